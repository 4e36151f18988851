//! The full network: initial encoding, stacked local-global interactive
//! layers, and the sentiment decoder.
//!
//! Each interactive layer runs intra-graph passing on both graphs (a
//! position-weighted graph convolution on the syntax side, reversible
//! relational attention on the relation side) and, unless ablated, a
//! cross-graph pass in both directions whose output is added to the
//! intra-graph term. Cross-graph inputs follow the layer equations: the
//! other graph's states from the previous layer plus this graph's states
//! after intra-graph passing.

pub mod cgmp;
pub mod layers;

use crate::error::{Error, Result};
use crate::graphs::{self, Lgig, ParseSample, RelationVocab};
use crate::numcore::{ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

pub use layers::{fa2c_attention, position_weights, pwgcn_matrix};

pub const N_CLASSES: usize = 3;

/// Structural ablations of the architecture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Full model.
    None,
    /// Drop the graph convolution and the syntax graph entirely.
    NoSyntax,
    /// Drop relational attention, relation embeddings and the relation graph.
    NoRelation,
    /// Keep both intra-graph passes but sever the cross-graph connections.
    NoLgi,
    /// Classify from the aspect row directly, no aspect-to-context attention.
    NoFa2c,
    /// Decode from the syntax stream alone (no integration projection).
    SyntaxDecoder,
    /// Decode from the relation stream alone (no integration projection).
    RelationDecoder,
}

impl Ablation {
    pub const ALL: [Ablation; 7] = [
        Ablation::None,
        Ablation::NoSyntax,
        Ablation::NoRelation,
        Ablation::NoLgi,
        Ablation::NoFa2c,
        Ablation::SyntaxDecoder,
        Ablation::RelationDecoder,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoSyntax => "no_syntax",
            Ablation::NoRelation => "no_relation",
            Ablation::NoLgi => "no_lgi",
            Ablation::NoFa2c => "no_fa2c",
            Ablation::SyntaxDecoder => "syntax_decoder",
            Ablation::RelationDecoder => "relation_decoder",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .iter()
            .copied()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| {
                let known: Vec<_> = Ablation::ALL.iter().map(|a| a.as_str()).collect();
                Error::config(format!(
                    "unknown ablation {s:?} (expected one of {known:?})"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_hidden: usize,
    pub d_rel: usize,
    pub l_lgi: usize,
    pub l_gcn: usize,
    pub n_heads_rel: usize,
    pub n_heads_mha: usize,
    pub cgmp_variant: String,
    pub dropout_enc: f64,
    pub dropout_other: f64,
    pub ablation: Ablation,
    pub max_bucket: u32,
}

impl ModelConfig {
    /// Desk-scale default: small dims, no dropout.
    pub fn desk() -> Self {
        ModelConfig {
            d_hidden: 64,
            d_rel: 32,
            l_lgi: 2,
            l_gcn: 2,
            n_heads_rel: 4,
            n_heads_mha: 4,
            cgmp_variant: "gate".to_string(),
            dropout_enc: 0.0,
            dropout_other: 0.0,
            ablation: Ablation::None,
            max_bucket: 4,
        }
    }

    /// Full-scale preset: 768/300 dims, dropout 0.1 on the encoder and 0.3
    /// elsewhere.
    pub fn paper() -> Self {
        ModelConfig {
            d_hidden: 768,
            d_rel: 300,
            l_lgi: 2,
            l_gcn: 2,
            n_heads_rel: 4,
            n_heads_mha: 4,
            cgmp_variant: "gate".to_string(),
            dropout_enc: 0.1,
            dropout_other: 0.3,
            ablation: Ablation::None,
            max_bucket: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.l_lgi == 0 {
            return Err(Error::config("l_lgi must be at least 1"));
        }
        if self.l_gcn == 0 {
            return Err(Error::config("l_gcn must be at least 1"));
        }
        if self.d_hidden == 0 || self.d_rel == 0 {
            return Err(Error::config("hidden dimensions must be positive"));
        }
        if self.n_heads_rel == 0 || self.n_heads_mha == 0 {
            return Err(Error::config("head counts must be positive"));
        }
        if !self.d_hidden.is_multiple_of(self.n_heads_mha) {
            return Err(Error::config(format!(
                "d_hidden {} not divisible by n_heads_mha {}",
                self.d_hidden, self.n_heads_mha
            )));
        }
        for (name, p) in [
            ("dropout_enc", self.dropout_enc),
            ("dropout_other", self.dropout_other),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::config(format!("{name} must lie in [0, 1), got {p}")));
            }
        }
        if self.max_bucket < 2 {
            return Err(Error::config("max_bucket must be at least 2"));
        }
        cgmp::lookup(&self.cgmp_variant)?;
        Ok(())
    }

    pub fn syntax_on(&self) -> bool {
        self.ablation != Ablation::NoSyntax
    }

    pub fn relation_on(&self) -> bool {
        self.ablation != Ablation::NoRelation
    }

    pub fn cross_on(&self) -> bool {
        self.syntax_on() && self.relation_on() && self.ablation != Ablation::NoLgi
    }

    /// The integration projection exists only when both streams feed the
    /// decoder.
    pub fn integration_on(&self) -> bool {
        self.syntax_on()
            && self.relation_on()
            && !matches!(
                self.ablation,
                Ablation::SyntaxDecoder | Ablation::RelationDecoder
            )
    }

    pub fn fa2c_on(&self) -> bool {
        self.ablation != Ablation::NoFa2c
    }
}

/// Token <-> embedding-row map; row 0 is the unknown-token fallback.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct WordVocab {
    strings: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for WordVocab {
    fn from(strings: Vec<String>) -> Self {
        let index = strings
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        WordVocab { strings, index }
    }
}

impl From<WordVocab> for Vec<String> {
    fn from(v: WordVocab) -> Vec<String> {
        v.strings
    }
}

impl WordVocab {
    pub const UNK: &'static str = "<unk>";

    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let set: std::collections::BTreeSet<&str> = tokens.into_iter().collect();
        let mut strings = vec![WordVocab::UNK.to_string()];
        strings.extend(
            set.into_iter()
                .filter(|t| *t != WordVocab::UNK)
                .map(String::from),
        );
        WordVocab::from(strings)
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.strings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.strings.is_empty()
    }

    pub fn strings(&self) -> &[String] {
        &self.strings
    }
}

/// A sample with its graphs and model-facing constants precomputed.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub word_ids: Vec<usize>,
    pub aspect: (usize, usize),
    pub lgig: Lgig,
    pub label: u8,
    /// Fused propagation matrix for the graph convolution (row-major n*n).
    pub norm_adj: Vec<f64>,
    /// Merged node indices excluding the aspect node, ascending.
    pub non_aspect: Vec<usize>,
    /// Relation ids per non-aspect node, in `non_aspect` order.
    pub rel_ids: Vec<usize>,
}

/// Eval vs train forward behavior; training carries the dropout stream.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

/// Initial node states: aspect tokens collapsed to a single mean row at
/// `tau`.
pub struct EncodedSample {
    pub h0: Var,
    pub tau: usize,
    pub n: usize,
}

/// Sidecar metadata stored next to a checkpoint archive.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub relation_vocab: RelationVocab,
    pub word_vocab: WordVocab,
}

pub struct Model {
    pub cfg: ModelConfig,
    pub words: WordVocab,
    pub relations: RelationVocab,
}

enum Init {
    Xavier,
    Zeros,
    Uniform(f64),
}

impl Model {
    pub fn new(cfg: ModelConfig, words: WordVocab, relations: RelationVocab) -> Result<Self> {
        cfg.validate()?;
        if words.is_empty() {
            return Err(Error::config("word vocabulary is empty"));
        }
        Ok(Model {
            cfg,
            words,
            relations,
        })
    }

    /// Builds vocabularies from a training split and wraps them.
    pub fn from_dataset(cfg: ModelConfig, samples: &[ParseSample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::config("cannot build a model from an empty dataset"));
        }
        let words = WordVocab::build(
            samples
                .iter()
                .flat_map(|s| s.tokens.iter().map(String::as_str)),
        );
        let relations = graphs::vocab_from_samples(samples, cfg.max_bucket)?;
        Model::new(cfg, words, relations)
    }

    pub fn prepare(&self, p: &ParseSample) -> Result<PreparedSample> {
        let mode = cgmp::lookup(&self.cfg.cgmp_variant)?.mode();
        let lgig = graphs::build_lgig(p, &self.relations, self.cfg.max_bucket, mode)?;
        let n = lgig.syntax.n;
        let tau = lgig.syntax.tau;
        let w_p = position_weights(n, tau);
        let norm_adj = pwgcn_matrix(&lgig.syntax, &w_p);
        let non_aspect: Vec<usize> = (0..n).filter(|&i| i != tau).collect();
        let rel_ids = non_aspect
            .iter()
            .map(|&i| lgig.relation.rel[i].expect("non-aspect node has relation") as usize)
            .collect();
        Ok(PreparedSample {
            word_ids: p.tokens.iter().map(|t| self.words.id(t)).collect(),
            aspect: p.aspect,
            lgig,
            label: p.label,
            norm_adj,
            non_aspect,
            rel_ids,
        })
    }

    pub fn prepare_all(&self, samples: &[ParseSample]) -> Result<Vec<PreparedSample>> {
        samples.iter().map(|s| self.prepare(s)).collect()
    }

    /// Parameter names and shapes in creation order. Which groups exist
    /// depends on the ablation, so tests can census names per variant.
    fn param_specs(&self) -> Vec<(String, Vec<usize>, Init)> {
        let cfg = &self.cfg;
        let d = cfg.d_hidden;
        let mut specs: Vec<(String, Vec<usize>, Init)> = Vec::new();
        specs.push((
            "embed.word".into(),
            vec![self.words.len(), d],
            Init::Uniform(0.1),
        ));
        specs.push(("encode.proj.w".into(), vec![d, d], Init::Xavier));
        specs.push(("encode.proj.b".into(), vec![d], Init::Zeros));
        if cfg.relation_on() {
            specs.push((
                "embed.rel".into(),
                vec![self.relations.len(), cfg.d_rel],
                Init::Uniform(0.1),
            ));
        }
        let pass = cgmp::lookup(&cfg.cgmp_variant).expect("validated at construction");
        for l in 0..cfg.l_lgi {
            if cfg.syntax_on() {
                for k in 0..cfg.l_gcn {
                    specs.push((format!("lgi{l}.pwgcn{k}.w"), vec![d, d], Init::Xavier));
                    specs.push((format!("lgi{l}.pwgcn{k}.b"), vec![d], Init::Zeros));
                }
            }
            if cfg.relation_on() {
                let dr = cfg.d_rel;
                specs.push((format!("lgi{l}.r2atn.ffn.w1"), vec![dr, dr], Init::Xavier));
                specs.push((format!("lgi{l}.r2atn.ffn.b1"), vec![dr], Init::Zeros));
                specs.push((
                    format!("lgi{l}.r2atn.ffn.w2"),
                    vec![dr, cfg.n_heads_rel],
                    Init::Xavier,
                ));
                specs.push((
                    format!("lgi{l}.r2atn.ffn.b2"),
                    vec![cfg.n_heads_rel],
                    Init::Zeros,
                ));
                for m in 0..cfg.n_heads_rel {
                    specs.push((format!("lgi{l}.r2atn.head{m}.w"), vec![d, d], Init::Xavier));
                }
            }
            if cfg.cross_on() {
                for dir in ["y2x", "x2y"] {
                    let prefix = format!("lgi{l}.cg{}.{dir}", pass.name());
                    for (name, shape) in pass.param_specs(cfg, &prefix) {
                        let init = if name.rsplit('.').next().is_some_and(|s| s.starts_with('b')) {
                            Init::Zeros
                        } else {
                            Init::Xavier
                        };
                        specs.push((name, shape, init));
                    }
                }
            }
        }
        if cfg.integration_on() {
            specs.push(("decode.wf.w".into(), vec![2 * d, d], Init::Xavier));
        }
        if cfg.fa2c_on() {
            specs.push(("decode.a2c.w".into(), vec![d, d], Init::Xavier));
            specs.push(("decode.a2c.b".into(), vec![d], Init::Zeros));
        }
        specs.push(("decode.out.w1".into(), vec![d, d], Init::Xavier));
        specs.push(("decode.out.b1".into(), vec![d], Init::Zeros));
        specs.push(("decode.out.w2".into(), vec![d, N_CLASSES], Init::Xavier));
        specs.push(("decode.out.b2".into(), vec![N_CLASSES], Init::Zeros));
        specs
    }

    pub fn param_names(&self) -> Vec<String> {
        self.param_specs().into_iter().map(|(n, _, _)| n).collect()
    }

    /// Fresh parameters: weights Glorot-uniform, biases zero, embeddings
    /// uniform in +-0.1, drawn from one seeded stream in declaration order.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (name, shape, init) in self.param_specs() {
            let numel: usize = shape.iter().product();
            let data: Vec<f64> = match init {
                Init::Zeros => vec![0.0; numel],
                Init::Uniform(bound) => (0..numel).map(|_| rng.gen_range(-bound..bound)).collect(),
                Init::Xavier => {
                    let (fan_in, fan_out) = match shape.as_slice() {
                        [r, c] => (*r as f64, *c as f64),
                        [n] => (*n as f64, *n as f64),
                        _ => (numel as f64, numel as f64),
                    };
                    let bound = (6.0 / (fan_in + fan_out)).sqrt();
                    (0..numel).map(|_| rng.gen_range(-bound..bound)).collect()
                }
            };
            store.insert(name, Tensor::new(shape, data)?)?;
        }
        Ok(store)
    }

    fn dropout(&self, tape: &mut Tape, h: Var, p: f64, mode: &mut Mode) -> Result<Var> {
        let rng = match mode {
            Mode::Eval => return Ok(h),
            Mode::Train(rng) => rng,
        };
        if p == 0.0 {
            return Ok(h);
        }
        let keep = 1.0 - p;
        let shape = tape.shape(h).to_vec();
        let numel: usize = shape.iter().product();
        let mask: Vec<f64> = (0..numel)
            .map(|_| {
                if rng.gen::<f64>() < p {
                    0.0
                } else {
                    1.0 / keep
                }
            })
            .collect();
        let mask = tape.constant_from(shape, mask)?;
        tape.mul(h, mask)
    }

    /// Projected token embeddings with the aspect span collapsed to its mean
    /// at row `tau`.
    pub fn encode(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        s: &PreparedSample,
        mode: &mut Mode,
    ) -> Result<EncodedSample> {
        let n_c = s.word_ids.len();
        let (a, b) = s.aspect;
        let n_a = b - a;
        let word_emb = tape.param(params, "embed.word")?;
        let emb = tape.gather_rows(word_emb, s.word_ids.clone())?;
        let pw = tape.param(params, "encode.proj.w")?;
        let pb = tape.param(params, "encode.proj.b")?;
        let proj = tape.linear(emb, pw, Some(pb))?;

        let asp_rows = tape.gather_rows(proj, (a..b).collect())?;
        let mean_row = tape.constant_from(vec![1, n_a], vec![1.0 / n_a as f64; n_a])?;
        let asp_mean = tape.matmul(mean_row, asp_rows)?;

        let mut parts = Vec::new();
        if a > 0 {
            parts.push(tape.gather_rows(proj, (0..a).collect())?);
        }
        parts.push(asp_mean);
        if b < n_c {
            parts.push(tape.gather_rows(proj, (b..n_c).collect())?);
        }
        let h0 = tape.concat_rows(&parts)?;
        let h0 = self.dropout(tape, h0, self.cfg.dropout_enc, mode)?;
        Ok(EncodedSample {
            h0,
            tau: s.lgig.syntax.tau,
            n: s.lgig.syntax.n,
        })
    }

    /// Full forward pass; returns class probabilities of shape `[1, 3]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        s: &PreparedSample,
        mode: &mut Mode,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        let enc = self.encode(tape, params, s, mode)?;
        let (n, tau) = (enc.n, enc.tau);

        let norm_adj = tape.constant_from(vec![n, n], s.norm_adj.clone())?;
        let pass = cgmp::lookup(&cfg.cgmp_variant)?;

        let mut hx = enc.h0;
        let mut hy = enc.h0;
        for l in 0..cfg.l_lgi {
            let x_prev = hx;
            let y_prev = hy;
            let x_igmp = if cfg.syntax_on() {
                let mut h = x_prev;
                for k in 0..cfg.l_gcn {
                    h = layers::pwgcn_layer(
                        tape,
                        params,
                        &format!("lgi{l}.pwgcn{k}"),
                        h,
                        norm_adj,
                    )?;
                }
                Some(h)
            } else {
                None
            };
            let y_igmp = if cfg.relation_on() {
                let rel_emb = tape.param(params, "embed.rel")?;
                Some(layers::relational_attention(
                    tape,
                    params,
                    &format!("lgi{l}.r2atn"),
                    y_prev,
                    rel_emb,
                    &s.rel_ids,
                    &s.non_aspect,
                    tau,
                    cfg.n_heads_rel,
                )?)
            } else {
                None
            };

            if cfg.cross_on() {
                let (x_igmp, y_igmp) = (x_igmp.unwrap(), y_igmp.unwrap());
                let prefix = |dir: &str| format!("lgi{l}.cg{}.{dir}", pass.name());
                let x_cross = pass.apply(tape, params, &prefix("y2x"), x_igmp, y_prev, cfg)?;
                hx = tape.add(x_igmp, x_cross)?;
                let y_cross = pass.apply(tape, params, &prefix("x2y"), y_igmp, x_prev, cfg)?;
                hy = tape.add(y_igmp, y_cross)?;
            } else {
                hx = x_igmp.unwrap_or(hx);
                hy = y_igmp.unwrap_or(hy);
            }
            if cfg.syntax_on() {
                hx = self.dropout(tape, hx, cfg.dropout_other, mode)?;
            }
            if cfg.relation_on() {
                hy = self.dropout(tape, hy, cfg.dropout_other, mode)?;
            }
        }

        let h_f = match cfg.ablation {
            Ablation::SyntaxDecoder => hx,
            Ablation::RelationDecoder => hy,
            Ablation::NoSyntax => hy,
            Ablation::NoRelation => hx,
            _ => {
                let cat = tape.concat_cols(hx, hy)?;
                let wf = tape.param(params, "decode.wf.w")?;
                tape.matmul(cat, wf)?
            }
        };

        let r = if cfg.fa2c_on() {
            let (_beta, r) = fa2c_attention(tape, params, "decode.a2c", h_f, tau)?;
            r
        } else {
            tape.gather_rows(h_f, vec![tau])?
        };
        layers::classify(tape, params, "decode.out", r)
    }

    /// Eval-mode class prediction; argmax with lowest-index tie-break.
    pub fn predict(&self, params: &ParamStore, s: &PreparedSample) -> Result<u8> {
        let mut tape = Tape::new(crate::numcore::Precision::F64);
        let p = self.forward(&mut tape, params, s, &mut Mode::Eval)?;
        Ok(argmax(tape.value(p)))
    }

    pub fn save(
        &self,
        dir: &Path,
        params: &ParamStore,
        precision: crate::numcore::Precision,
    ) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        crate::numcore::archive::save(&dir.join("model.ckpt"), params, precision)?;
        let meta = CheckpointMeta {
            config: self.cfg.clone(),
            relation_vocab: self.relations.clone(),
            word_vocab: self.words.clone(),
        };
        let json = serde_json::to_string_pretty(&meta)?;
        std::fs::write(dir.join("model.json"), json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(Model, ParamStore)> {
        let meta: CheckpointMeta =
            serde_json::from_str(&std::fs::read_to_string(dir.join("model.json"))?)?;
        let params = crate::numcore::archive::load(&dir.join("model.ckpt"))?;
        let model = Model::new(meta.config, meta.word_vocab, meta.relation_vocab)?;
        Ok((model, params))
    }
}

/// Lowest index wins ties.
pub fn argmax(values: &[f64]) -> u8 {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best as u8
}

#[cfg(test)]
mod tests;
