//! Central finite-difference gradient oracle.
//!
//! The oracle never touches the reverse pass of the function it checks: it
//! re-evaluates the forward scalar at nudged parameter values, so a bug in
//! the tape's backward rules cannot hide itself.

use super::{ParamStore, Precision, Tape, Var};
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Cap on checked coordinates per parameter; `None` checks all.
    pub max_coords_per_param: Option<usize>,
    /// Seed for coordinate sampling.
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            max_coords_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max over sampled coordinates of |analytic - numeric| / max(1, |analytic|, |numeric|)
    pub max_rel_err: f64,
    /// Parameter name and flat coordinate of the worst error.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
    /// Coordinates whose difference interval straddled an activation kink at
    /// every tried step size; a central difference is meaningless there.
    pub coords_skipped: usize,
}

/// Checks the analytic gradient of `build` (a scalar-valued recorded
/// computation over the store) against central finite differences.
///
/// `build` must be deterministic: it is evaluated twice up front and any
/// difference is reported as an oracle error. Runs at 64-bit regardless of
/// the training precision.
///
/// A central difference only estimates the derivative when `w - eps` and
/// `w + eps` lie on the same side of every ReLU-style kink, so each
/// coordinate compares the activation signatures of the two evaluations and
/// shrinks the step until they agree (skipping the coordinate if they never
/// do).
pub fn grad_check<B>(
    store: &mut ParamStore,
    build: B,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    B: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let eval = |store: &ParamStore| -> Result<(f64, u64)> {
        let mut tape = Tape::new(Precision::F64);
        let loss = build(&mut tape, store)?;
        if tape.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "grad_check target must be scalar, got shape {:?}",
                tape.shape(loss)
            )));
        }
        Ok((tape.value(loss)[0], tape.kink_signature()))
    };

    let first = eval(store)?;
    let second = eval(store)?;
    if first != second {
        return Err(Error::Oracle(format!(
            "function under test is non-deterministic: {} vs {}",
            first.0, second.0
        )));
    }

    // Analytic gradients.
    store.zero_grads();
    {
        let mut tape = Tape::new(Precision::F64);
        let loss = build(&mut tape, store)?;
        tape.backward(loss)?;
        tape.write_grads(store)?;
    }
    let analytic: Vec<(String, Vec<f64>)> = store
        .iter()
        .map(|(name, t)| (name.to_string(), t.grad().unwrap_or(&[]).to_vec()))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        coords_checked: 0,
        coords_skipped: 0,
    };

    for (name, grad) in &analytic {
        let numel = store.get(name)?.numel();
        let mut coords: Vec<usize> = (0..numel).collect();
        if let Some(cap) = opts.max_coords_per_param {
            if numel > cap {
                coords.shuffle(&mut rng);
                coords.truncate(cap);
                coords.sort_unstable();
            }
        }
        for &i in &coords {
            let original = store.get(name)?.data()[i];
            let mut numeric = None;
            let mut eps = opts.eps;
            for _ in 0..4 {
                store.get_mut(name)?.data_mut()[i] = original + eps;
                let plus = eval(store)?;
                store.get_mut(name)?.data_mut()[i] = original - eps;
                let minus = eval(store)?;
                store.get_mut(name)?.data_mut()[i] = original;
                if plus.1 == minus.1 {
                    numeric = Some((plus.0 - minus.0) / (2.0 * eps));
                    break;
                }
                eps /= 10.0;
            }
            let Some(numeric) = numeric else {
                report.coords_skipped += 1;
                continue;
            };
            let a = grad[i];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}
