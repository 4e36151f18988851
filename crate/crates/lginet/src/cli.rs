//! Command-line entry points.
//!
//! Exit codes: 0 success, 1 malformed input, 2 contract/config violation,
//! 3 gradient check above threshold. `LGINET_SEED` overrides `--seed`
//! everywhere.

use crate::error::{Error, Result};
use crate::eval;
use crate::graphs::{self, ParseSample};
use crate::model::{Model, ModelConfig};
use crate::numcore::{GradCheckOptions, GradCheckReport, Precision};
use crate::synth::{self, SynthConfig};
use crate::training::{self, RunConfig};
use clap::{Args, Parser, Subcommand};
use std::fs;
use std::path::{Path, PathBuf};

pub const GRADCHECK_THRESHOLD: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "lginet",
    version,
    about = "Local-global interactive graph network for aspect-level sentiment classification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the stitched local-global interactive graph for each sample
    BuildGraph(BuildGraphArgs),
    /// Train a model and write a checkpoint plus training history
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset
    Eval(EvalArgs),
    /// Check analytic gradients against central finite differences
    Gradcheck(GradcheckArgs),
    /// Run the ablation table and the layer-count sweeps
    Ablate(AblateArgs),
    /// Generate a seeded synthetic corpus
    SynthData(SynthArgs),
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Flat `key = value` config file applied over the preset
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base preset: desk | paper
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Cross-graph variant: gate | mlp | mha
    #[arg(long)]
    variant: Option<String>,
    /// Structural ablation (none, no_syntax, no_relation, no_lgi, no_fa2c,
    /// syntax_decoder, relation_decoder)
    #[arg(long)]
    ablation: Option<String>,
    /// RNG seed; the LGINET_SEED environment variable takes precedence
    #[arg(long)]
    seed: Option<u64>,
    /// Numeric precision: 32 | 64
    #[arg(long)]
    precision: Option<String>,
}

impl ConfigArgs {
    fn resolve_over(&self, mut rc: RunConfig) -> Result<RunConfig> {
        if let Some(path) = &self.config {
            rc.apply_file(&fs::read_to_string(path)?)?;
        }
        if let Some(v) = &self.variant {
            rc.model.cgmp_variant = v.clone();
        }
        if let Some(a) = &self.ablation {
            rc.model.ablation = a.parse()?;
        }
        if let Some(p) = &self.precision {
            rc.train.precision = Precision::parse(p)?;
        }
        if let Some(s) = self.seed {
            rc.train.seed = s;
        }
        if let Ok(env_seed) = std::env::var("LGINET_SEED") {
            rc.train.seed = env_seed
                .parse()
                .map_err(|_| Error::config(format!("bad LGINET_SEED value {env_seed:?}")))?;
        }
        rc.validate()?;
        Ok(rc)
    }

    fn resolve(&self) -> Result<RunConfig> {
        self.resolve_over(RunConfig::preset(&self.preset)?)
    }
}

#[derive(Args)]
struct BuildGraphArgs {
    /// Input dataset: `.jsonl` samples or a `.conllu` file
    #[arg(long)]
    data: PathBuf,
    /// Output file for one graph JSON per line (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory for per-sample GraphViz DOT renderings
    #[arg(long)]
    dot: Option<PathBuf>,
    /// Aspect span `START,END` (half-open), required for CoNLL-U input
    #[arg(long)]
    aspect: Option<String>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct TrainArgs {
    /// Training dataset (JSONL)
    #[arg(long)]
    data: PathBuf,
    /// Output directory for model.ckpt, model.json and history.json
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory written by `train`
    #[arg(long)]
    model: PathBuf,
    /// Evaluation dataset (JSONL)
    #[arg(long)]
    data: PathBuf,
    /// Optional metrics JSON output path
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct AblateArgs {
    /// Training dataset (JSONL)
    #[arg(long)]
    data: PathBuf,
    /// Held-out dataset; defaults to an 80/20 split of `--data`
    #[arg(long)]
    test: Option<PathBuf>,
    /// Output directory for ablation.csv
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct SynthArgs {
    /// Number of samples
    #[arg(long, default_value_t = 32)]
    n: usize,
    /// RNG seed; LGINET_SEED takes precedence
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output JSONL path
    #[arg(long)]
    out: PathBuf,
    /// Hop distance from the polarity word to the merged aspect node
    #[arg(long, default_value_t = 3)]
    distance: u32,
    #[arg(long, default_value_t = 8)]
    min_tokens: usize,
    #[arg(long, default_value_t = 12)]
    max_tokens: usize,
    /// Plant a conflicting polarity word strictly farther away
    #[arg(long, default_value_t = false)]
    distractor: bool,
}

pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::BuildGraph(args) => cmd_build_graph(&args),
        Command::Train(args) => cmd_train(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::Gradcheck(args) => cmd_gradcheck(&args),
        Command::Ablate(args) => cmd_ablate(&args),
        Command::SynthData(args) => cmd_synth(&args),
    }
}

fn load_samples(path: &Path, aspect: Option<&str>) -> Result<Vec<ParseSample>> {
    let is_conllu = path
        .extension()
        .map(|e| e == "conllu" || e == "conll")
        .unwrap_or(false);
    if is_conllu {
        let span = aspect.ok_or_else(|| {
            Error::config("CoNLL-U input needs --aspect START,END to mark the aspect span")
        })?;
        let (start, end) = span
            .split_once(',')
            .and_then(|(a, b)| Some((a.trim().parse().ok()?, b.trim().parse().ok()?)))
            .ok_or_else(|| Error::config(format!("bad --aspect value {span:?}")))?;
        let text = fs::read_to_string(path)?;
        graphs::parse_conllu(&text)?
            .into_iter()
            .map(|skel| ParseSample::from_skeleton(skel, (start, end), 1))
            .collect()
    } else {
        graphs::dataset::read_jsonl(path)
    }
}

fn cmd_build_graph(args: &BuildGraphArgs) -> Result<i32> {
    let rc = args.config.resolve()?;
    let samples = load_samples(&args.data, args.aspect.as_deref())?;
    let vocab = graphs::vocab_from_samples(&samples, rc.model.max_bucket)?;
    let mode = crate::model::cgmp::lookup(&rc.model.cgmp_variant)?.mode();

    let mut lines = String::new();
    for (i, sample) in samples.iter().enumerate() {
        let lgig = graphs::build_lgig(sample, &vocab, rc.model.max_bucket, mode)?;
        lines.push_str(&serde_json::to_string(&lgig)?);
        lines.push('\n');
        if let Some(dot_dir) = &args.dot {
            fs::create_dir_all(dot_dir)?;
            fs::write(
                dot_dir.join(format!("sample{i:04}.dot")),
                lgig.to_dot(Some(&sample.tokens)),
            )?;
        }
    }
    match &args.out {
        Some(path) => fs::write(path, lines)?,
        None => print!("{lines}"),
    }
    Ok(0)
}

fn cmd_train(args: &TrainArgs) -> Result<i32> {
    let rc = args.config.resolve()?;
    let samples = graphs::dataset::read_jsonl(&args.data)?;
    let model = Model::from_dataset(rc.model.clone(), &samples)?;
    let prepared = model.prepare_all(&samples)?;
    let (params, history) = training::train(&model, &rc.train, &prepared)?;

    fs::create_dir_all(&args.out)?;
    model.save(&args.out, &params, rc.train.precision)?;
    fs::write(
        args.out.join("history.json"),
        serde_json::to_string_pretty(&history)?,
    )?;
    let last = history.last().expect("at least one epoch");
    println!(
        "trained {} epochs on {} samples: loss {:.4}, train acc {:.4}",
        history.len(),
        samples.len(),
        last.loss,
        last.acc
    );
    println!("checkpoint written to {}", args.out.display());
    Ok(0)
}

fn cmd_eval(args: &EvalArgs) -> Result<i32> {
    let (model, params) = Model::load(&args.model)?;
    let samples = graphs::dataset::read_jsonl(&args.data)?;
    let prepared = model.prepare_all(&samples)?;
    let preds = training::predictions(&model, &params, &prepared)?;
    let golds: Vec<u8> = samples.iter().map(|s| s.label).collect();
    let metrics = serde_json::json!({
        "n": samples.len(),
        "acc": eval::accuracy(&preds, &golds)?,
        "f1": eval::macro_f1(&preds, &golds, crate::model::N_CLASSES)?,
    });
    let rendered = serde_json::to_string_pretty(&metrics)?;
    println!("{rendered}");
    if let Some(path) = &args.out {
        fs::write(path, rendered)?;
    }
    Ok(0)
}

/// Fixed-scale gradient check: six merged nodes, eight hidden dims, two
/// heads, run at 64-bit regardless of the training precision.
pub fn gradcheck_config() -> RunConfig {
    let mut rc = RunConfig::desk();
    rc.model = ModelConfig {
        d_hidden: 8,
        d_rel: 6,
        n_heads_rel: 2,
        n_heads_mha: 2,
        dropout_enc: 0.0,
        dropout_other: 0.0,
        ..rc.model
    };
    rc
}

/// A single seven-token sample with a two-word aspect: six merged nodes.
pub fn gradcheck_sample() -> ParseSample {
    ParseSample {
        tokens: ["the", "food", "was", "really", "good", "thai", "curry"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        heads: vec![Some(1), Some(2), None, Some(4), Some(2), Some(6), Some(4)],
        deprels: ["det", "nsubj", "root", "advmod", "acomp", "amod", "pobj"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        aspect: (5, 7),
        label: 2,
    }
}

/// Builds the check-scale model for `rc`'s variant/ablation/layers and
/// compares analytic gradients of the scalar loss with central differences.
pub fn run_gradcheck(rc: &RunConfig) -> Result<GradCheckReport> {
    let sample = gradcheck_sample();
    let model = Model::from_dataset(rc.model.clone(), std::slice::from_ref(&sample))?;
    let prepared = model.prepare(&sample)?;
    let mut store = model.init_params(rc.train.seed)?;
    crate::numcore::grad_check(
        &mut store,
        |tape, params| {
            let p = model.forward(tape, params, &prepared, &mut crate::model::Mode::Eval)?;
            training::cross_entropy(tape, p, prepared.label)
        },
        &GradCheckOptions {
            eps: 1e-5,
            max_coords_per_param: Some(8),
            seed: rc.train.seed,
        },
    )
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<i32> {
    let rc = args.config.resolve_over(gradcheck_config())?;
    let report = run_gradcheck(&rc)?;
    let worst = report
        .worst
        .as_ref()
        .map(|(name, i)| format!("{name}[{i}]"))
        .unwrap_or_else(|| "-".to_string());
    println!(
        "variant={} ablation={} max_rel_err={:.3e} coords={} worst={}",
        rc.model.cgmp_variant, rc.model.ablation, report.max_rel_err, report.coords_checked, worst
    );
    if report.max_rel_err < GRADCHECK_THRESHOLD {
        Ok(0)
    } else {
        eprintln!(
            "gradient check failed: {:.3e} >= {GRADCHECK_THRESHOLD:e}",
            report.max_rel_err
        );
        Ok(3)
    }
}

fn cmd_ablate(args: &AblateArgs) -> Result<i32> {
    let rc = args.config.resolve()?;
    let samples = graphs::dataset::read_jsonl(&args.data)?;
    let (train_data, test_data): (Vec<_>, Vec<_>) = match &args.test {
        Some(path) => (samples, graphs::dataset::read_jsonl(path)?),
        None => {
            let cut = (samples.len() * 4).div_ceil(5).max(1);
            let (a, b) = samples.split_at(cut.min(samples.len()));
            if b.is_empty() {
                (a.to_vec(), a.to_vec())
            } else {
                (a.to_vec(), b.to_vec())
            }
        }
    };
    let rows = eval::run_suite(&rc, &train_data, &test_data)?;
    print!("{}", eval::rows_to_table(&rows));
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("ablation.csv"), eval::rows_to_csv(&rows))?;
        println!("rows written to {}", dir.join("ablation.csv").display());
    }
    Ok(0)
}

fn cmd_synth(args: &SynthArgs) -> Result<i32> {
    let mut seed = args.seed;
    if let Ok(env_seed) = std::env::var("LGINET_SEED") {
        seed = env_seed
            .parse()
            .map_err(|_| Error::config(format!("bad LGINET_SEED value {env_seed:?}")))?;
    }
    let cfg = SynthConfig {
        n_samples: args.n,
        seed,
        distance: args.distance,
        min_tokens: args.min_tokens,
        max_tokens: args.max_tokens,
        distractor: args.distractor,
    };
    let samples = synth::generate(&cfg)?;
    graphs::dataset::write_jsonl(&args.out, &samples)?;
    println!("wrote {} samples to {}", samples.len(), args.out.display());
    Ok(0)
}
