//! Metrics and the ablation / layer-sweep harness.

use crate::error::{Error, Result};
use crate::model::{Ablation, Model, N_CLASSES};
use crate::training::{self, RunConfig};
use serde::{Deserialize, Serialize};

/// Fraction of exact matches.
pub fn accuracy(preds: &[u8], golds: &[u8]) -> Result<f64> {
    if preds.is_empty() || preds.len() != golds.len() {
        return Err(Error::contract(format!(
            "accuracy needs equal non-empty slices, got {} vs {}",
            preds.len(),
            golds.len()
        )));
    }
    let correct = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(correct as f64 / preds.len() as f64)
}

/// Unweighted mean of per-class F1. A class absent from both predictions
/// and golds is skipped; a class with support on either side but zero
/// precision/recall denominators contributes F1 = 0.
pub fn macro_f1(preds: &[u8], golds: &[u8], n_classes: usize) -> Result<f64> {
    if preds.is_empty() || preds.len() != golds.len() {
        return Err(Error::contract(format!(
            "macro_f1 needs equal non-empty slices, got {} vs {}",
            preds.len(),
            golds.len()
        )));
    }
    for &v in preds.iter().chain(golds) {
        if v as usize >= n_classes {
            return Err(Error::data(format!("label {v} outside 0..{n_classes}")));
        }
    }
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fn_ = vec![0usize; n_classes];
    for (&p, &g) in preds.iter().zip(golds) {
        if p == g {
            tp[p as usize] += 1;
        } else {
            fp[p as usize] += 1;
            fn_[g as usize] += 1;
        }
    }
    let mut sum = 0.0;
    let mut counted = 0usize;
    for c in 0..n_classes {
        let support = tp[c] + fp[c] + fn_[c];
        if support == 0 {
            continue; // absent from both sides
        }
        counted += 1;
        let p_den = tp[c] + fp[c];
        let r_den = tp[c] + fn_[c];
        let precision = if p_den == 0 {
            0.0
        } else {
            tp[c] as f64 / p_den as f64
        };
        let recall = if r_den == 0 {
            0.0
        } else {
            tp[c] as f64 / r_den as f64
        };
        if precision + recall > 0.0 {
            sum += 2.0 * precision * recall / (precision + recall);
        }
    }
    if counted == 0 {
        return Err(Error::contract("no class has support on either side"));
    }
    Ok(sum / counted as f64)
}

/// One harness row: an ablation or a layer-count setting.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HarnessRow {
    pub variant: String,
    pub acc: f64,
    pub f1: f64,
    pub params: usize,
    pub seed: u64,
}

/// Trains one variant and evaluates it on the held-out split.
pub fn run_ablation(
    base: &RunConfig,
    variant: &str,
    train_data: &[crate::graphs::ParseSample],
    test_data: &[crate::graphs::ParseSample],
) -> Result<HarnessRow> {
    let ablation: Ablation = variant.parse()?;
    let mut rc = base.clone();
    rc.model.ablation = ablation;
    run_row(&rc, variant, train_data, test_data)
}

fn run_row(
    rc: &RunConfig,
    name: &str,
    train_data: &[crate::graphs::ParseSample],
    test_data: &[crate::graphs::ParseSample],
) -> Result<HarnessRow> {
    rc.validate()?;
    let model = Model::from_dataset(rc.model.clone(), train_data)?;
    let prepared_train = model.prepare_all(train_data)?;
    let prepared_test = model.prepare_all(test_data)?;
    let (params, _history) = training::train(&model, &rc.train, &prepared_train)?;
    let preds = training::predictions(&model, &params, &prepared_test)?;
    let golds: Vec<u8> = test_data.iter().map(|s| s.label).collect();
    Ok(HarnessRow {
        variant: name.to_string(),
        acc: accuracy(&preds, &golds)?,
        f1: macro_f1(&preds, &golds, N_CLASSES)?,
        params: params.total_params(),
        seed: rc.train.seed,
    })
}

/// The full harness: the seven structural configurations, then the
/// interactive-layer sweep (1..=6) and graph-convolution sweep (1..=5).
pub fn run_suite(
    base: &RunConfig,
    train_data: &[crate::graphs::ParseSample],
    test_data: &[crate::graphs::ParseSample],
) -> Result<Vec<HarnessRow>> {
    let mut rows = Vec::new();
    for ablation in Ablation::ALL {
        rows.push(run_ablation(
            base,
            ablation.as_str(),
            train_data,
            test_data,
        )?);
    }
    for l_lgi in 1..=6 {
        let mut rc = base.clone();
        rc.model.l_lgi = l_lgi;
        rows.push(run_row(
            &rc,
            &format!("lgi_layers={l_lgi}"),
            train_data,
            test_data,
        )?);
    }
    for l_gcn in 1..=5 {
        let mut rc = base.clone();
        rc.model.l_gcn = l_gcn;
        rows.push(run_row(
            &rc,
            &format!("gcn_layers={l_gcn}"),
            train_data,
            test_data,
        )?);
    }
    Ok(rows)
}

pub fn rows_to_csv(rows: &[HarnessRow]) -> String {
    let mut out = String::from("variant,acc,f1,params,seed\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.4},{:.4},{},{}\n",
            r.variant, r.acc, r.f1, r.params, r.seed
        ));
    }
    out
}

pub fn rows_to_table(rows: &[HarnessRow]) -> String {
    let width = rows
        .iter()
        .map(|r| r.variant.len())
        .max()
        .unwrap_or(7)
        .max("variant".len());
    let mut out = format!(
        "{:width$}  {:>7}  {:>7}  {:>9}  {:>6}\n",
        "variant", "acc", "f1", "params", "seed"
    );
    for r in rows {
        out.push_str(&format!(
            "{:width$}  {:>7.4}  {:>7.4}  {:>9}  {:>6}\n",
            r.variant, r.acc, r.f1, r.params, r.seed
        ));
    }
    out
}
