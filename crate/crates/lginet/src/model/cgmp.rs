//! Cross-graph message passing variants.
//!
//! Each variant lives behind [`CrossGraphPass`] and is registered by name;
//! config and CLI select one at runtime. `gate` and `mlp` operate on
//! one-to-one interactive edges (aligned counterpart nodes), `mha` on
//! one-to-all (complete bipartite attention).

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::graphs::InteractiveMode;
use crate::numcore::{ParamStore, Tape, Var};

/// One cross-graph transfer direction. `this_igmp` is the current graph's
/// states after intra-graph passing in this layer; `other_prev` is the other
/// graph's states entering the layer.
pub trait CrossGraphPass: Send + Sync {
    /// Registry key; also the `--variant` / config value.
    fn name(&self) -> &'static str;

    /// Interactive-edge wiring the pass assumes.
    fn mode(&self) -> InteractiveMode;

    /// Parameter names and shapes for one direction under `prefix`.
    fn param_specs(&self, cfg: &ModelConfig, prefix: &str) -> Vec<(String, Vec<usize>)>;

    fn apply(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        prefix: &str,
        this_igmp: Var,
        other_prev: Var,
        cfg: &ModelConfig,
    ) -> Result<Var>;
}

pub struct GatePass;
pub struct MlpPass;
pub struct MhaPass;

static GATE: GatePass = GatePass;
static MLP: MlpPass = MlpPass;
static MHA: MhaPass = MhaPass;

pub fn registry() -> &'static [&'static dyn CrossGraphPass] {
    static REGISTRY: [&dyn CrossGraphPass; 3] = [&GATE, &MLP, &MHA];
    &REGISTRY
}

pub fn lookup(name: &str) -> Result<&'static dyn CrossGraphPass> {
    registry()
        .iter()
        .find(|p| p.name() == name)
        .copied()
        .ok_or_else(|| {
            let known: Vec<_> = registry().iter().map(|p| p.name()).collect();
            Error::config(format!(
                "unknown cross-graph variant {name:?} (expected one of {known:?})"
            ))
        })
}

fn check_aligned(tape: &Tape, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::contract(format!(
            "cross-graph inputs misaligned: {:?} vs {:?}",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    Ok(())
}

impl CrossGraphPass for GatePass {
    fn name(&self) -> &'static str {
        "gate"
    }

    fn mode(&self) -> InteractiveMode {
        InteractiveMode::OneToOne
    }

    fn param_specs(&self, cfg: &ModelConfig, prefix: &str) -> Vec<(String, Vec<usize>)> {
        let d = cfg.d_hidden;
        vec![(format!("{prefix}.w"), vec![2 * d, d])]
    }

    /// `out_i = other_i * sigmoid(W [other_i, this_i])`. The logistic keeps
    /// the multiplier bounded, matching the gating convention.
    fn apply(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        prefix: &str,
        this_igmp: Var,
        other_prev: Var,
        _cfg: &ModelConfig,
    ) -> Result<Var> {
        check_aligned(tape, this_igmp, other_prev)?;
        let cat = tape.concat_cols(other_prev, this_igmp)?;
        let w = tape.param(params, &format!("{prefix}.w"))?;
        let pre = tape.matmul(cat, w)?;
        let gate = tape.sigmoid(pre)?;
        tape.mul(other_prev, gate)
    }
}

impl CrossGraphPass for MlpPass {
    fn name(&self) -> &'static str {
        "mlp"
    }

    fn mode(&self) -> InteractiveMode {
        InteractiveMode::OneToOne
    }

    fn param_specs(&self, cfg: &ModelConfig, prefix: &str) -> Vec<(String, Vec<usize>)> {
        let d = cfg.d_hidden;
        vec![
            (format!("{prefix}.w1"), vec![2 * d, d]),
            (format!("{prefix}.b1"), vec![d]),
            (format!("{prefix}.w2"), vec![d, d]),
            (format!("{prefix}.b2"), vec![d]),
        ]
    }

    /// One hidden layer of width `d_hidden` with ReLU, separate per
    /// direction.
    fn apply(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        prefix: &str,
        this_igmp: Var,
        other_prev: Var,
        _cfg: &ModelConfig,
    ) -> Result<Var> {
        check_aligned(tape, this_igmp, other_prev)?;
        let cat = tape.concat_cols(other_prev, this_igmp)?;
        let w1 = tape.param(params, &format!("{prefix}.w1"))?;
        let b1 = tape.param(params, &format!("{prefix}.b1"))?;
        let w2 = tape.param(params, &format!("{prefix}.w2"))?;
        let b2 = tape.param(params, &format!("{prefix}.b2"))?;
        let hidden = tape.linear(cat, w1, Some(b1))?;
        let hidden = tape.relu(hidden)?;
        tape.linear(hidden, w2, Some(b2))
    }
}

impl CrossGraphPass for MhaPass {
    fn name(&self) -> &'static str {
        "mha"
    }

    fn mode(&self) -> InteractiveMode {
        InteractiveMode::OneToAll
    }

    fn param_specs(&self, cfg: &ModelConfig, prefix: &str) -> Vec<(String, Vec<usize>)> {
        let d = cfg.d_hidden;
        let ds = d / cfg.n_heads_mha;
        let mut specs = Vec::new();
        for m in 0..cfg.n_heads_mha {
            specs.push((format!("{prefix}.head{m}.wq"), vec![d, ds]));
            specs.push((format!("{prefix}.head{m}.wk"), vec![d, ds]));
            specs.push((format!("{prefix}.head{m}.wv"), vec![d, ds]));
        }
        specs
    }

    /// Scaled dot-product attention, queries from this graph, keys/values
    /// from the other; heads concatenated, no output projection.
    fn apply(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        prefix: &str,
        this_igmp: Var,
        other_prev: Var,
        cfg: &ModelConfig,
    ) -> Result<Var> {
        let d = cfg.d_hidden;
        if !d.is_multiple_of(cfg.n_heads_mha) {
            return Err(Error::config(format!(
                "d_hidden {} not divisible by n_heads_mha {}",
                d, cfg.n_heads_mha
            )));
        }
        let ds = d / cfg.n_heads_mha;
        let scale = 1.0 / (ds as f64).sqrt();
        let mut heads = Vec::with_capacity(cfg.n_heads_mha);
        for m in 0..cfg.n_heads_mha {
            let wq = tape.param(params, &format!("{prefix}.head{m}.wq"))?;
            let wk = tape.param(params, &format!("{prefix}.head{m}.wk"))?;
            let wv = tape.param(params, &format!("{prefix}.head{m}.wv"))?;
            let q = tape.matmul(this_igmp, wq)?;
            let k = tape.matmul(other_prev, wk)?;
            let v = tape.matmul(other_prev, wv)?;
            let kt = tape.transpose(k)?;
            let logits = tape.matmul(q, kt)?;
            let logits = tape.scale(logits, scale)?;
            let attn = tape.softmax(logits, 1)?;
            heads.push(tape.matmul(attn, v)?);
        }
        let mut out = heads[0];
        for &h in &heads[1..] {
            out = tape.concat_cols(out, h)?;
        }
        Ok(out)
    }
}
