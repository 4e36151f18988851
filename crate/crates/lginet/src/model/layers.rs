//! Intra-graph passes and the sentiment decoder head.

use crate::error::{Error, Result};
use crate::graphs::SyntaxGraph;
use crate::numcore::{ParamStore, Tape, Var};

/// `w[i] = 1 - |i - tau| / (n + 1)`; weights lie in (0, 1] and peak at the
/// aspect node.
pub fn position_weights(n: usize, tau: usize) -> Vec<f64> {
    assert!(tau < n, "tau {tau} out of range for {n} nodes");
    (0..n)
        .map(|i| 1.0 - (i as f64 - tau as f64).abs() / (n as f64 + 1.0))
        .collect()
}

/// Constant propagation matrix for the position-weighted graph convolution:
/// `M[i][j] = (A + I)[i][j] * w_p[j] / (d_i + 1)` with `d_i` the degree
/// excluding the self-loop. One matmul by `M` then realizes the whole
/// neighborhood sum of a layer.
pub fn pwgcn_matrix(sg: &SyntaxGraph, w_p: &[f64]) -> Vec<f64> {
    let n = sg.n;
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        let divisor = (sg.degree(i) + 1) as f64;
        for j in 0..n {
            let a = if i == j { 1.0 } else { sg.adj[i][j] as f64 };
            m[i * n + j] = a * w_p[j] / divisor;
        }
    }
    m
}

/// One graph-convolution layer: `relu(M H W + b)`.
pub fn pwgcn_layer(
    tape: &mut Tape,
    params: &ParamStore,
    prefix: &str,
    h: Var,
    norm_adj: Var,
) -> Result<Var> {
    let w = tape.param(params, &format!("{prefix}.w"))?;
    let b = tape.param(params, &format!("{prefix}.b"))?;
    let agg = tape.matmul(norm_adj, h)?;
    let lin = tape.linear(agg, w, Some(b))?;
    tape.relu(lin)
}

/// Reversible relational attention over the star graph.
///
/// Aggregation: per head, relation-embedding scores give an attention
/// distribution over the non-aspect nodes; the head-averaged weighted sum of
/// their (per-head projected) states becomes the new aspect row. Reversal:
/// each non-aspect row receives the aggregate back, weighted by its own
/// head-averaged attention (the reversed-relation embedding is assigned the
/// attention weight itself).
#[allow(clippy::too_many_arguments)]
pub fn relational_attention(
    tape: &mut Tape,
    params: &ParamStore,
    prefix: &str,
    h: Var,
    rel_emb: Var,
    rel_ids: &[usize],
    non_aspect: &[usize],
    tau: usize,
    n_heads: usize,
) -> Result<Var> {
    let n = tape.shape(h)[0];
    if n < 2 {
        return Err(Error::contract(
            "relational attention needs at least one non-aspect node",
        ));
    }
    if non_aspect.len() != n - 1 || rel_ids.len() != n - 1 {
        return Err(Error::contract(format!(
            "expected {} non-aspect nodes, got {} (rel ids {})",
            n - 1,
            non_aspect.len(),
            rel_ids.len()
        )));
    }

    let h_na = tape.gather_rows(h, non_aspect.to_vec())?;
    let re = tape.gather_rows(rel_emb, rel_ids.to_vec())?;
    let w1 = tape.param(params, &format!("{prefix}.ffn.w1"))?;
    let b1 = tape.param(params, &format!("{prefix}.ffn.b1"))?;
    let w2 = tape.param(params, &format!("{prefix}.ffn.w2"))?;
    let b2 = tape.param(params, &format!("{prefix}.ffn.b2"))?;
    let hidden = tape.linear(re, w1, Some(b1))?;
    let hidden = tape.relu(hidden)?;
    let scores = tape.linear(hidden, w2, Some(b2))?; // [n-1, heads]
    let alpha = tape.softmax(scores, 0)?; // over non-aspect nodes, per head

    // Aggregate into the aspect row: mean over heads of (alpha_m^T H) W_m.
    let alpha_t = tape.transpose(alpha)?; // [heads, n-1]
    let mut agg: Option<Var> = None;
    for m in 0..n_heads {
        let am = tape.gather_rows(alpha_t, vec![m])?; // [1, n-1]
        let um = tape.matmul(am, h_na)?; // [1, d]
        let wm = tape.param(params, &format!("{prefix}.head{m}.w"))?;
        let vm = tape.matmul(um, wm)?;
        agg = Some(match agg {
            None => vm,
            Some(acc) => tape.add(acc, vm)?,
        });
    }
    let h_agg = tape.scale(agg.expect("n_heads >= 1"), 1.0 / n_heads as f64)?;

    // Reversal: h_i + mean_m(alpha_i^m) * h_agg, residual on non-aspect rows.
    let ones = tape.constant_from(vec![n_heads, 1], vec![1.0 / n_heads as f64; n_heads])?;
    let mean_alpha = tape.matmul(alpha, ones)?; // [n-1, 1]
    let outer = tape.matmul(mean_alpha, h_agg)?; // [n-1, d]
    let na_out = tape.add(h_na, outer)?;

    // Reassemble with the aspect row back at tau. `non_aspect` is ascending,
    // so its first `tau` rows precede the aspect node.
    let mut parts = Vec::new();
    if tau > 0 {
        parts.push(tape.gather_rows(na_out, (0..tau).collect())?);
    }
    parts.push(h_agg);
    if tau < n - 1 {
        parts.push(tape.gather_rows(na_out, (tau..n - 1).collect())?);
    }
    tape.concat_rows(&parts)
}

/// Flat aspect-to-context attention: scores `(W h_f^i + b) . R_a` over all
/// rows, softmax to beta, and the beta-weighted sum as the sentiment
/// representation. Returns `(beta [n,1], r [1,d])`.
pub fn fa2c_attention(
    tape: &mut Tape,
    params: &ParamStore,
    prefix: &str,
    h_f: Var,
    tau: usize,
) -> Result<(Var, Var)> {
    let r_a = tape.gather_rows(h_f, vec![tau])?; // [1, d]
    let w = tape.param(params, &format!("{prefix}.w"))?;
    let b = tape.param(params, &format!("{prefix}.b"))?;
    let mapped = tape.linear(h_f, w, Some(b))?; // [n, d]
    let r_a_t = tape.transpose(r_a)?; // [d, 1]
    let logits = tape.matmul(mapped, r_a_t)?; // [n, 1]
    let beta = tape.softmax(logits, 0)?;
    let beta_t = tape.transpose(beta)?; // [1, n]
    let r = tape.matmul(beta_t, h_f)?; // [1, d]
    Ok((beta, r))
}

/// Classifier head: one hidden layer with ReLU, then a 3-way softmax.
pub fn classify(tape: &mut Tape, params: &ParamStore, prefix: &str, r: Var) -> Result<Var> {
    let w1 = tape.param(params, &format!("{prefix}.w1"))?;
    let b1 = tape.param(params, &format!("{prefix}.b1"))?;
    let w2 = tape.param(params, &format!("{prefix}.w2"))?;
    let b2 = tape.param(params, &format!("{prefix}.b2"))?;
    let hidden = tape.linear(r, w1, Some(b1))?;
    let hidden = tape.relu(hidden)?;
    let logits = tape.linear(hidden, w2, Some(b2))?;
    tape.softmax(logits, 1)
}
