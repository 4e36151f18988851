//! Objective, optimizer and training loop.
//!
//! Batches are realized as gradient accumulation over per-sample tapes with
//! a mean reduction, so the learning rate keeps its meaning across batch
//! sizes and variable node counts need no padding. Everything is seeded:
//! the shuffle and the dropout stream come from one ChaCha stream, so a
//! fixed seed reproduces checkpoints bitwise at 64-bit precision.

use crate::error::{Error, Result};
use crate::model::{Mode, Model, PreparedSample, N_CLASSES};
use crate::numcore::{ParamStore, Precision, Tape, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub precision: Precision,
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            lr: 5e-3,
            weight_decay: 1e-4,
            batch_size: 8,
            epochs: 200,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            precision: Precision::F64,
        }
    }

    /// Full-scale preset: batch 32 over 30 epochs at 32-bit, lr 1e-5,
    /// decay 0.05.
    pub fn paper() -> Self {
        TrainConfig {
            lr: 1e-5,
            weight_decay: 0.05,
            batch_size: 32,
            epochs: 30,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            precision: Precision::F32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr < 0.0 {
            return Err(Error::config(format!(
                "lr must be non-negative, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.eps <= 0.0 {
            return Err(Error::config("eps must be positive"));
        }
        Ok(())
    }
}

/// `-log P[y]` with probabilities clipped to 1e-12 before the log.
pub fn cross_entropy(tape: &mut Tape, p: Var, y: u8) -> Result<Var> {
    if y as usize >= N_CLASSES {
        return Err(Error::data(format!("class id {y} outside {{0, 1, 2}}")));
    }
    let numel: usize = tape.shape(p).iter().product();
    if numel != N_CLASSES {
        return Err(Error::contract(format!(
            "expected {N_CLASSES} probabilities, got shape {:?}",
            tape.shape(p)
        )));
    }
    let mut onehot = vec![0.0; N_CLASSES];
    onehot[y as usize] = 1.0;
    let onehot = tape.constant_from(tape.shape(p).to_vec(), onehot)?;
    let picked = tape.mul(p, onehot)?;
    let p_y = tape.sum_all(picked)?;
    let clipped = tape.max_scalar(p_y, 1e-12)?;
    let logp = tape.log(clipped)?;
    tape.scale(logp, -1.0)
}

/// Adaptive moment optimizer with decoupled weight decay: the decay
/// multiplies weights directly (`w *= 1 - lr * wd`) before the moment-based
/// update, never entering the gradients.
pub struct AdamW {
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    precision: Precision,
    t: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        AdamW {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            precision: cfg.precision,
            t: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let names: Vec<String> = store.names().map(String::from).collect();
        for name in names {
            let tensor = store.get_mut(&name)?;
            let grad = tensor
                .grad()
                .ok_or_else(|| Error::contract(format!("parameter {name:?} has no gradient")))?
                .to_vec();
            if let Some(bad) = grad.iter().position(|g| g.is_nan()) {
                return Err(Error::contract(format!(
                    "NaN gradient in parameter {name:?} at coordinate {bad}"
                )));
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            let data = tensor.data_mut();
            for i in 0..grad.len() {
                data[i] *= 1.0 - self.lr * self.weight_decay;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                data[i] = self.precision.quantize(data[i]);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStat {
    pub epoch: usize,
    pub loss: f64,
    pub acc: f64,
}

/// Eval-mode predictions over a prepared dataset.
pub fn predictions(model: &Model, params: &ParamStore, data: &[PreparedSample]) -> Result<Vec<u8>> {
    data.iter().map(|s| model.predict(params, s)).collect()
}

/// Trains from fresh parameters; returns the final store and per-epoch
/// history (mean training loss, eval-mode training accuracy).
pub fn train(
    model: &Model,
    tc: &TrainConfig,
    data: &[PreparedSample],
) -> Result<(ParamStore, Vec<EpochStat>)> {
    tc.validate()?;
    if data.is_empty() {
        return Err(Error::config("training dataset is empty"));
    }
    let mut store = model.init_params(tc.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(0x9E37_79B9_7F4A_7C15));
    let mut opt = AdamW::new(tc);
    let mut history = Vec::with_capacity(tc.epochs);

    for epoch in 1..=tc.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(tc.batch_size) {
            store.zero_grads();
            for &idx in batch {
                let sample = &data[idx];
                let mut tape = Tape::new(tc.precision);
                let p = model.forward(&mut tape, &store, sample, &mut Mode::Train(&mut rng))?;
                let loss = cross_entropy(&mut tape, p, sample.label)?;
                loss_sum += tape.value(loss)[0];
                tape.backward(loss)?;
                tape.write_grads(&mut store)?;
            }
            store.scale_grads(1.0 / batch.len() as f64);
            opt.step(&mut store)?;
        }
        let preds = predictions(model, &store, data)?;
        let correct = preds
            .iter()
            .zip(data)
            .filter(|(p, s)| **p == s.label)
            .count();
        history.push(EpochStat {
            epoch,
            loss: loss_sum / data.len() as f64,
            acc: correct as f64 / data.len() as f64,
        });
    }
    Ok((store, history))
}

/// Mean eval-mode loss over a dataset (full-batch loss probe).
pub fn mean_loss(model: &Model, params: &ParamStore, data: &[PreparedSample]) -> Result<f64> {
    let mut sum = 0.0;
    for s in data {
        let mut tape = Tape::new(Precision::F64);
        let p = model.forward(&mut tape, params, s, &mut Mode::Eval)?;
        let loss = cross_entropy(&mut tape, p, s.label)?;
        sum += tape.value(loss)[0];
    }
    Ok(sum / data.len() as f64)
}

/// A model + training configuration pair, assembled from a preset plus an
/// optional flat `key = value` config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: crate::model::ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn desk() -> Self {
        RunConfig {
            model: crate::model::ModelConfig::desk(),
            train: TrainConfig::desk(),
        }
    }

    pub fn paper() -> Self {
        RunConfig {
            model: crate::model::ModelConfig::paper(),
            train: TrainConfig::paper(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(RunConfig::desk()),
            "paper" => Ok(RunConfig::paper()),
            other => Err(Error::config(format!(
                "unknown preset {other:?} (expected desk or paper)"
            ))),
        }
    }

    /// Applies a flat config file: one `key = value` per line, `#` comments,
    /// unknown keys rejected.
    pub fn apply_file(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let lineno = lineno + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::format(lineno, format!("expected `key = value`, got {line:?}"))
            })?;
            let key = key.trim();
            let value = value.trim();
            self.apply_kv(key, value)
                .map_err(|e| Error::format(lineno, e.to_string()))?;
        }
        Ok(())
    }

    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::config(format!("bad value {value:?} for key {key:?}")))
        }
        match key {
            "d_hidden" => self.model.d_hidden = num(key, value)?,
            "d_rel" => self.model.d_rel = num(key, value)?,
            "l_lgi" => self.model.l_lgi = num(key, value)?,
            "l_gcn" => self.model.l_gcn = num(key, value)?,
            "n_heads_rel" => self.model.n_heads_rel = num(key, value)?,
            "n_heads_mha" => self.model.n_heads_mha = num(key, value)?,
            "variant" => self.model.cgmp_variant = value.to_string(),
            "dropout_enc" => self.model.dropout_enc = num(key, value)?,
            "dropout_other" => self.model.dropout_other = num(key, value)?,
            "ablation" => self.model.ablation = value.parse()?,
            "max_bucket" => self.model.max_bucket = num(key, value)?,
            "lr" => self.train.lr = num(key, value)?,
            "weight_decay" => self.train.weight_decay = num(key, value)?,
            "batch_size" => self.train.batch_size = num(key, value)?,
            "epochs" => self.train.epochs = num(key, value)?,
            "seed" => self.train.seed = num(key, value)?,
            "beta1" => self.train.beta1 = num(key, value)?,
            "beta2" => self.train.beta2 = num(key, value)?,
            "eps" => self.train.eps = num(key, value)?,
            "precision" => self.train.precision = Precision::parse(value)?,
            other => {
                return Err(Error::config(format!("unknown config key {other:?}")));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Tensor;

    fn softmax_probe(tape: &mut Tape, probs: [f64; 3]) -> Var {
        tape.constant_from(vec![1, 3], probs.to_vec()).unwrap()
    }

    #[test]
    fn cross_entropy_perfect_prediction() {
        let mut tape = Tape::new(Precision::F64);
        let p = softmax_probe(&mut tape, [1.0, 0.0, 0.0]);
        let loss = cross_entropy(&mut tape, p, 0).unwrap();
        assert!(tape.value(loss)[0].abs() <= 1e-11);
    }

    #[test]
    fn cross_entropy_uniform_is_ln3() {
        let third = 1.0 / 3.0;
        for y in 0..3u8 {
            let mut tape = Tape::new(Precision::F64);
            let p = softmax_probe(&mut tape, [third, third, third]);
            let loss = cross_entropy(&mut tape, p, y).unwrap();
            assert!((tape.value(loss)[0] - 3f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_hand_value() {
        let mut tape = Tape::new(Precision::F64);
        let p = softmax_probe(&mut tape, [0.5, 0.25, 0.25]);
        let loss = cross_entropy(&mut tape, p, 1).unwrap();
        assert!((tape.value(loss)[0] - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut tape = Tape::new(Precision::F64);
        let p = softmax_probe(&mut tape, [0.5, 0.25, 0.25]);
        assert!(matches!(
            cross_entropy(&mut tape, p, 3),
            Err(Error::Data(_))
        ));
    }

    fn store_one(name: &str, values: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        let n = values.len();
        s.insert(name, Tensor::new(vec![n], values).unwrap())
            .unwrap();
        s.zero_grads();
        s
    }

    #[test]
    fn adamw_zero_grad_no_decay_is_identity() {
        let cfg = TrainConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..TrainConfig::desk()
        };
        let mut store = store_one("w", vec![1.0, -2.0, 3.0]);
        let mut opt = AdamW::new(&cfg);
        for _ in 0..5 {
            store.zero_grads();
            opt.step(&mut store).unwrap();
        }
        assert_eq!(store.get("w").unwrap().data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn adamw_zero_grad_decay_shrinks_geometrically() {
        let cfg = TrainConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..TrainConfig::desk()
        };
        let mut store = store_one("w", vec![1.0, -2.0]);
        let mut opt = AdamW::new(&cfg);
        let factor = 1.0 - cfg.lr * cfg.weight_decay;
        for step in 1..=4 {
            store.zero_grads();
            opt.step(&mut store).unwrap();
            let expect = factor.powi(step);
            let data = store.get("w").unwrap().data();
            assert!((data[0] - expect).abs() < 1e-15);
            assert!((data[1] + 2.0 * expect).abs() < 1e-15);
        }
    }

    #[test]
    fn adamw_single_step_matches_hand_update() {
        // f(w) = w^2 at w = 1 gives g = 2.
        let cfg = TrainConfig {
            lr: 0.1,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            ..TrainConfig::desk()
        };
        let mut store = store_one("w", vec![1.0]);
        store.accumulate_grad("w", &[2.0]).unwrap();
        let mut opt = AdamW::new(&cfg);
        opt.step(&mut store).unwrap();

        let m = 0.1 * 2.0;
        let v: f64 = 0.001 * 4.0;
        let m_hat = m / (1.0 - 0.9);
        let v_hat: f64 = v / (1.0 - 0.999);
        let expected = 1.0 - 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        let got = store.get("w").unwrap().data()[0];
        assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
    }

    #[test]
    fn adamw_aborts_on_nan_gradient_with_name() {
        let cfg = TrainConfig::desk();
        let mut store = store_one("layer.weight", vec![1.0]);
        store.accumulate_grad("layer.weight", &[f64::NAN]).unwrap();
        let mut opt = AdamW::new(&cfg);
        let err = opt.step(&mut store).unwrap_err();
        assert!(err.to_string().contains("layer.weight"), "{err}");
    }

    #[test]
    fn config_file_round_trip_and_unknown_key() {
        let mut rc = RunConfig::desk();
        rc.apply_file("d_hidden = 16\nvariant = mha\n# comment\nlr = 0.01\n")
            .unwrap();
        assert_eq!(rc.model.d_hidden, 16);
        assert_eq!(rc.model.cgmp_variant, "mha");
        assert_eq!(rc.train.lr, 0.01);

        let err = rc.apply_file("no_such_key = 1\n").unwrap_err();
        assert!(err.to_string().contains("no_such_key"), "{err}");
        assert!(matches!(err, Error::Format { line: 1, .. }));
    }

    #[test]
    fn preset_lookup() {
        assert!(RunConfig::preset("desk").is_ok());
        assert!(RunConfig::preset("paper").is_ok());
        assert!(RunConfig::preset("galaxy").is_err());
    }

    fn tiny_setup(n_samples: usize) -> (crate::model::Model, Vec<crate::model::PreparedSample>) {
        let data = crate::synth::generate(&crate::synth::SynthConfig {
            n_samples,
            seed: 21,
            distance: 2,
            ..Default::default()
        })
        .unwrap();
        let cfg = crate::model::ModelConfig {
            d_hidden: 16,
            d_rel: 8,
            ..crate::model::ModelConfig::desk()
        };
        let model = crate::model::Model::from_dataset(cfg, &data).unwrap();
        let prepared = model.prepare_all(&data).unwrap();
        (model, prepared)
    }

    #[test]
    fn zero_lr_and_zero_decay_leave_parameters_unchanged() {
        let (model, prepared) = tiny_setup(6);
        let tc = TrainConfig {
            lr: 0.0,
            weight_decay: 0.0,
            epochs: 3,
            seed: 2,
            ..TrainConfig::desk()
        };
        let (trained, _) = train(&model, &tc, &prepared).unwrap();
        let init = model.init_params(tc.seed).unwrap();
        for (name, t) in init.iter() {
            let after = trained.get(name).unwrap();
            for (a, b) in t.data().iter().zip(after.data()) {
                assert_eq!(a.to_bits(), b.to_bits(), "{name} moved");
            }
        }
    }

    #[test]
    fn full_batch_loss_is_monotone_after_burn_in() {
        let (model, prepared) = tiny_setup(12);
        let tc = TrainConfig {
            batch_size: prepared.len(), // full batch
            epochs: 40,
            seed: 4,
            ..TrainConfig::desk()
        };
        let (_params, history) = train(&model, &tc, &prepared).unwrap();
        for w in history.windows(2).skip(5) {
            assert!(
                w[1].loss <= w[0].loss + 1e-3,
                "loss rose from {:.6} to {:.6} at epoch {}",
                w[0].loss,
                w[1].loss,
                w[1].epoch
            );
        }
    }

    #[test]
    fn fixed_seed_training_is_reproducible() {
        let (model, prepared) = tiny_setup(6);
        let tc = TrainConfig {
            epochs: 3,
            seed: 8,
            ..TrainConfig::desk()
        };
        let (a, ha) = train(&model, &tc, &prepared).unwrap();
        let (b, hb) = train(&model, &tc, &prepared).unwrap();
        assert_eq!(ha, hb);
        for (name, t) in a.iter() {
            let other = b.get(name).unwrap();
            for (x, y) in t.data().iter().zip(other.data()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{name} differs across runs");
            }
        }
    }

    #[test]
    fn train_rejects_empty_dataset() {
        let (model, _) = tiny_setup(4);
        assert!(matches!(
            train(&model, &TrainConfig::desk(), &[]),
            Err(Error::Config(_))
        ));
    }
}
