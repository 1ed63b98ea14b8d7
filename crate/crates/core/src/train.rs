//! Label-smoothed cross-entropy, SGD with coupled weight decay, a plateau
//! learning-rate schedule, global-norm clipping and the training loop.

use std::time::Instant;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::backbone::Model;
use crate::data::{batches, DatasetBundle};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{softmax_vec, Real, Shape, Tensor4};

const PROB_FLOOR: f64 = 1e-12;
const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub label_smoothing: f64,
    pub clip_norm: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Weight each sample's loss by the inverse frequency of its class in
    /// the training split.
    pub class_weighted: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            plateau_factor: 0.85,
            plateau_patience: 5,
            label_smoothing: 0.1,
            clip_norm: 0.5,
            epochs: 20,
            batch_size: 32,
            seed: 42,
            class_weighted: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr0", self.lr0),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("plateau_factor", self.plateau_factor),
            ("clip_norm", self.clip_norm),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config(format!(
                "label smoothing must lie in [0, 1), got {}",
                self.label_smoothing
            )));
        }
        if self.plateau_patience == 0 || self.batch_size == 0 {
            return Err(Error::config(
                "plateau patience and batch size must be at least 1",
            ));
        }
        Ok(())
    }
}

fn check_labels(classes: usize, labels: &[u32], n: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::data(format!(
            "{} labels for {n} rows of logits",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::data(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// Mean label-smoothed cross-entropy of `(N, classes, 1, 1)` logits and its
/// gradient. With `class_weights`, sample `n` counts `w[label_n]` times and
/// the loss is normalised by the total weight.
///
/// Probabilities are floored at `1e-12` before the log; the gradient is
/// exact for that clipped objective.
pub fn cross_entropy<T: Real>(
    logits: &Tensor4<T>,
    labels: &[u32],
    smoothing: f64,
    class_weights: Option<&[f64]>,
) -> Result<(f64, Tensor4<T>)> {
    let s = logits.shape();
    let k = s.c * s.h * s.w;
    check_labels(k, labels, s.n)?;
    let sample_w: Vec<f64> = labels
        .iter()
        .map(|&l| class_weights.map_or(1.0, |w| w[l as usize]))
        .collect();
    let total_w: f64 = sample_w.iter().sum();
    if !(total_w > 0.0) {
        return Err(Error::data("cross-entropy over zero total weight"));
    }
    let target = |j: usize, label: usize| -> f64 {
        let base = smoothing / k as f64;
        if j == label {
            1.0 - smoothing + base
        } else {
            base
        }
    };
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(s.n * k);
    for (n, &label) in labels.iter().enumerate() {
        let p = softmax_vec(&logits.data()[n * k..][..k])?;
        let label = label as usize;
        let scale = sample_w[n] / total_w;
        let mut live_mass = 0.0;
        let mut ln = 0.0;
        for (j, &pj) in p.iter().enumerate() {
            let pj = pj.as_f64();
            let t = target(j, label);
            ln -= t * pj.max(PROB_FLOOR).ln();
            if pj >= PROB_FLOOR {
                live_mass += t;
            }
        }
        loss += scale * ln;
        for (j, &pj) in p.iter().enumerate() {
            let pj = pj.as_f64();
            let own = if pj >= PROB_FLOOR {
                target(j, label)
            } else {
                0.0
            };
            grad.push(T::of(scale * (pj * live_mass - own)));
        }
    }
    Ok((loss, Tensor4::from_vec(s, grad)?))
}

/// Index of the largest logit per row, ties to the lowest index.
pub fn predictions<T: Real>(logits: &Tensor4<T>) -> Vec<usize> {
    let s = logits.shape();
    let k = s.c * s.h * s.w;
    (0..s.n)
        .map(|n| {
            let row = &logits.data()[n * k..][..k];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn correctness<T: Real>(logits: &Tensor4<T>, labels: &[u32]) -> Vec<bool> {
    predictions(logits)
        .into_iter()
        .zip(labels)
        .map(|(p, &l)| p == l as usize)
        .collect()
}

pub fn accuracy<T: Real>(logits: &Tensor4<T>, labels: &[u32]) -> f64 {
    mean_bool(&correctness(logits, labels))
}

fn mean_bool(v: &[bool]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().filter(|&&b| b).count() as f64 / v.len() as f64
}

/// Momentum buffers aligned with a parameter store's iteration order.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState<T> {
    velocity: Vec<Tensor4<T>>,
}

impl<T: Real> SgdState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        SgdState {
            velocity: params
                .iter()
                .map(|(_, p)| Tensor4::zeros(p.value.shape()))
                .collect(),
        }
    }

    pub fn velocity(&self, i: usize) -> &Tensor4<T> {
        &self.velocity[i]
    }
}

/// `v ← m·v + g + wd·w; w ← w − lr·v` for every parameter. Refuses the whole
/// step, leaving everything untouched, if any gradient is non-finite.
pub fn sgd_step<T: Real>(
    params: &mut ParamStore<T>,
    state: &mut SgdState<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if state.velocity.len() != params.len() {
        return Err(Error::config(
            "optimizer state does not match the parameter store",
        ));
    }
    if let Some((name, _)) = params.iter().find(|(_, p)| !p.grad.all_finite()) {
        return Err(Error::NonFiniteGradient(name.to_string()));
    }
    let (lr, m, wd) = (T::of(lr), T::of(momentum), T::of(weight_decay));
    for ((_, p), v) in params.iter_mut().zip(&mut state.velocity) {
        let g = p.grad.data();
        for ((vi, wi), &gi) in v.data_mut().iter_mut().zip(p.value.data_mut()).zip(g) {
            *vi = m * *vi + gi + wd * *wi;
            *wi = *wi - lr * *vi;
        }
    }
    Ok(())
}

/// Reduce-on-plateau on validation accuracy: after `patience` consecutive
/// epochs without strict improvement the rate is multiplied by `factor`
/// and the counter restarts.
#[derive(Debug, Clone, PartialEq)]
pub struct Plateau {
    lr0: f64,
    factor: f64,
    patience: usize,
    best: Option<f64>,
    stale: usize,
    reductions: i32,
}

impl Plateau {
    pub fn new(lr0: f64, factor: f64, patience: usize) -> Self {
        Plateau {
            lr0,
            factor,
            patience,
            best: None,
            stale: 0,
            reductions: 0,
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Plateau::new(cfg.lr0, cfg.plateau_factor, cfg.plateau_patience)
    }

    /// Current rate, always exactly `lr0 · factor^j`.
    pub fn lr(&self) -> f64 {
        self.lr0 * self.factor.powi(self.reductions)
    }

    pub fn reductions(&self) -> i32 {
        self.reductions
    }

    /// Feeds one validation accuracy; returns the rate for the next epoch.
    pub fn step(&mut self, val_acc: f64) -> f64 {
        match self.best {
            Some(b) if val_acc <= b => {
                self.stale += 1;
                if self.stale >= self.patience {
                    self.reductions += 1;
                    self.stale = 0;
                }
            }
            _ => {
                self.best = Some(val_acc);
                self.stale = 0;
            }
        }
        self.lr()
    }
}

/// Scales all gradients by `threshold / norm` when their global L2 norm
/// exceeds `threshold`. Returns the norm before clipping.
pub fn clip_gradients<T: Real>(params: &mut ParamStore<T>, threshold: f64) -> Result<f64> {
    if !(threshold > 0.0) {
        return Err(Error::config(format!(
            "clip threshold must be positive, got {threshold}"
        )));
    }
    let norm = params.grad_norm();
    if norm > threshold {
        let s = T::of(threshold / norm);
        for (_, p) in params.iter_mut() {
            for g in p.grad.data_mut() {
                *g = *g * s;
            }
        }
    }
    Ok(norm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Completed,
    Diverged,
}

/// Per-sample correctness, serialized as a string of `0`/`1`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BitVec(pub Vec<bool>);

impl Serialize for BitVec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(
            &self
                .0
                .iter()
                .map(|&b| if b { '1' } else { '0' })
                .collect::<String>(),
        )
    }
}

impl<'de> Deserialize<'de> for BitVec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(serde::de::Error::custom(format!("bad bit `{other}`"))),
            })
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(BitVec)
    }
}

/// Outcome of one training run. The serialized document leaves out the
/// wall time so that identical runs produce identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub dataset: String,
    pub topology: String,
    pub status: RunStatus,
    pub config: TrainConfig,
    pub param_count: usize,
    pub initial_val_acc: f64,
    pub test_acc: f64,
    pub test_correct: BitVec,
    pub epochs: Vec<EpochRow>,
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl RunRecord {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::data(format!("cannot serialize run record: {e}")))
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::data(format!("bad run record: {e}")))
    }

    pub fn lr_trace(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.lr).collect()
    }
}

/// Train/validation/test bundles for one run.
#[derive(Debug, Clone, Copy)]
pub struct Splits<'a> {
    pub train: &'a DatasetBundle,
    pub val: &'a DatasetBundle,
    pub test: &'a DatasetBundle,
}

/// Inverse-frequency weights `N / (K · n_k)`; classes absent from the
/// bundle get weight 0.
pub fn class_weights(bundle: &DatasetBundle) -> Vec<f64> {
    let counts = bundle.class_counts();
    let (n, k) = (bundle.len() as f64, bundle.class_count as f64);
    counts
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { n / (k * c as f64) })
        .collect()
}

/// Eval-mode correctness over a whole bundle.
pub fn evaluate(
    model: &Model,
    params: &ParamStore<f32>,
    buffers: &ParamStore<f32>,
    data: &DatasetBundle,
) -> Result<Vec<bool>> {
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let sub = data.subset(chunk, data.split)?;
        let logits = model.forward_eval(params, buffers, &sub.images)?;
        out.extend(correctness(&logits, &sub.labels));
    }
    Ok(out)
}

/// Runs `cfg.epochs` epochs of minibatch SGD, evaluating the validation
/// split after each epoch to drive the plateau schedule, then scores the
/// test split. A non-finite loss or gradient aborts with
/// [`Error::Diverged`] carrying the partial record.
pub fn train(
    model: &Model,
    params: &mut ParamStore<f32>,
    buffers: &mut ParamStore<f32>,
    data: Splits<'_>,
    cfg: &TrainConfig,
    labels: (&str, &str),
) -> Result<RunRecord> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() || data.test.is_empty() {
        return Err(Error::data(
            "train, validation and test splits must be non-empty",
        ));
    }
    let start = Instant::now();
    let weights = cfg.class_weighted.then(|| class_weights(data.train));
    let mut record = RunRecord {
        dataset: labels.0.to_string(),
        topology: labels.1.to_string(),
        status: RunStatus::Completed,
        config: cfg.clone(),
        param_count: params.numel(),
        initial_val_acc: mean_bool(&evaluate(model, params, buffers, data.val)?),
        test_acc: 0.0,
        test_correct: BitVec::default(),
        epochs: Vec::with_capacity(cfg.epochs),
        wall_time_secs: 0.0,
    };
    let mut sgd = SgdState::new(params);
    let mut plateau = Plateau::from_config(cfg);

    for epoch in 0..cfg.epochs {
        let lr = plateau.lr();
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for (b, batch) in batches(data.train, cfg.batch_size, cfg.seed, epoch as u64)?.enumerate() {
            params.zero_grad();
            let (logits, cache) = model.forward_train(params, &batch.images)?;
            let (loss, grad) = cross_entropy(
                &logits,
                &batch.labels,
                cfg.label_smoothing,
                weights.as_deref(),
            )?;
            let diverged = |record: &mut RunRecord, loss: f64| {
                record.status = RunStatus::Diverged;
                record.wall_time_secs = start.elapsed().as_secs_f64();
                Error::Diverged {
                    epoch,
                    batch: b,
                    loss,
                    record: Box::new(record.clone()),
                }
            };
            if !loss.is_finite() {
                return Err(diverged(&mut record, loss));
            }
            model.backward(params, &cache, &grad)?;
            model.update_running_stats(buffers, &cache)?;
            clip_gradients(params, cfg.clip_norm)?;
            match sgd_step(params, &mut sgd, lr, cfg.momentum, cfg.weight_decay) {
                Err(Error::NonFiniteGradient(_)) => return Err(diverged(&mut record, loss)),
                other => other?,
            }
            let n = batch.labels.len();
            loss_sum += loss * n as f64;
            correct += correctness(&logits, &batch.labels)
                .iter()
                .filter(|&&c| c)
                .count();
            seen += n;
        }
        let val_acc = mean_bool(&evaluate(model, params, buffers, data.val)?);
        record.epochs.push(EpochRow {
            epoch,
            train_loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            val_acc,
            lr,
        });
        plateau.step(val_acc);
    }

    let test = evaluate(model, params, buffers, data.test)?;
    record.test_acc = mean_bool(&test);
    record.test_correct = BitVec(test);
    record.wall_time_secs = start.elapsed().as_secs_f64();
    Ok(record)
}

/// Shape of a logits tensor for `n` samples.
pub fn logits_shape(n: usize, classes: usize) -> Shape {
    Shape::new(n, classes, 1, 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(rows: &[&[f64]]) -> Tensor4<f64> {
        let k = rows[0].len();
        Tensor4::from_vec(logits_shape(rows.len(), k), rows.concat()).unwrap()
    }

    #[test]
    fn uniform_logits_give_ln_classes() {
        for eps in [0.0, 0.1, 0.5] {
            let (l, _) =
                cross_entropy(&logits(&[&[0.0; 10], &[0.0; 10]]), &[3, 7], eps, None).unwrap();
            assert!((l - 10f64.ln()).abs() < 1e-12);
        }
        let (l, _) = cross_entropy(&logits(&[&[0.0, 0.0]]), &[1], 0.1, None).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_prediction_has_tiny_loss() {
        let (l, _) = cross_entropy(&logits(&[&[30.0, 0.0, 0.0]]), &[0], 0.0, None).unwrap();
        assert!(l < 1e-6);
    }

    #[test]
    fn unsmoothed_loss_is_mean_negative_log_prob() {
        let rows: [&[f64]; 3] = [&[0.3, -1.2, 2.0], &[1.0, 1.0, -0.5], &[-2.0, 0.1, 0.4]];
        let labels = [2, 0, 1];
        let (l, _) = cross_entropy(&logits(&rows), &labels, 0.0, None).unwrap();
        let direct: f64 = rows
            .iter()
            .zip(labels)
            .map(|(r, y)| {
                let lse = r.iter().map(|v| v.exp()).sum::<f64>().ln();
                lse - r[y as usize]
            })
            .sum::<f64>()
            / 3.0;
        assert!((l - direct).abs() < 1e-10);
    }

    #[test]
    fn out_of_range_label_is_data_error() {
        let r = cross_entropy(&logits(&[&[0.0, 1.0]]), &[2], 0.0, None);
        assert!(matches!(r, Err(Error::Data(_))));
    }

    #[test]
    fn class_weights_normalise_by_total_weight() {
        let z = logits(&[&[0.2, 0.9], &[1.5, -0.3]]);
        let (a, _) = cross_entropy(&z, &[0, 0], 0.0, Some(&[2.0, 1.0])).unwrap();
        let (b, _) = cross_entropy(&z, &[0, 0], 0.0, None).unwrap();
        assert!((a - b).abs() < 1e-12);
        let (w, _) = cross_entropy(&z, &[0, 1], 0.0, Some(&[3.0, 1.0])).unwrap();
        let (l_a, _) = cross_entropy(&logits(&[&[0.2, 0.9]]), &[0], 0.0, None).unwrap();
        let (l_b, _) = cross_entropy(&logits(&[&[1.5, -0.3]]), &[1], 0.0, None).unwrap();
        assert!((w - (3.0 * l_a + l_b) / 4.0).abs() < 1e-12);
    }

    #[test]
    fn accuracy_examples() {
        let z = logits(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(accuracy(&z, &[0, 1, 0, 1]), 1.0);
        assert_eq!(accuracy(&z, &[1, 0, 1, 0]), 0.0);
        assert_eq!(accuracy(&z, &[0, 1, 0, 0]), 0.75);
        assert_eq!(predictions(&logits(&[&[2.0, 2.0, 1.0]])), vec![0]);
    }

    fn scalar_store(w: f64, g: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor4::full(Shape::new(1, 1, 1, 1), w))
            .unwrap();
        s.grad_mut("w").unwrap().data_mut()[0] = g;
        s
    }

    #[test]
    fn sgd_hand_arithmetic() {
        let mut s = scalar_store(1.0, 1.0);
        let mut st = SgdState::new(&s);
        sgd_step(&mut s, &mut st, 0.1, 0.9, 5e-4).unwrap();
        assert!((st.velocity(0).data()[0] - 1.0005).abs() < 1e-15);
        assert!((s.value("w").unwrap().data()[0] - 0.89995).abs() < 1e-15);

        let v1 = 1.0005;
        let w1 = 0.89995;
        sgd_step(&mut s, &mut st, 0.1, 0.9, 5e-4).unwrap();
        let v2 = 0.9 * v1 + 1.0 + 5e-4 * w1;
        assert!((st.velocity(0).data()[0] - v2).abs() < 1e-15);
        assert!((s.value("w").unwrap().data()[0] - (w1 - 0.1 * v2)).abs() < 1e-15);
    }

    #[test]
    fn sgd_without_gradient_decays_velocity() {
        let mut s = scalar_store(2.0, 1.0);
        let mut st = SgdState::new(&s);
        sgd_step(&mut s, &mut st, 0.1, 0.9, 0.0).unwrap();
        let w = s.value("w").unwrap().data()[0];
        s.zero_grad();
        sgd_step(&mut s, &mut st, 0.1, 0.9, 0.0).unwrap();
        assert!((st.velocity(0).data()[0] - 0.9).abs() < 1e-15);
        assert!((s.value("w").unwrap().data()[0] - (w - 0.09)).abs() < 1e-15);
    }

    #[test]
    fn sgd_refuses_non_finite_gradients() {
        let mut s = scalar_store(1.0, f64::NAN);
        let mut st = SgdState::new(&s);
        assert!(matches!(
            sgd_step(&mut s, &mut st, 0.1, 0.9, 0.0),
            Err(Error::NonFiniteGradient(_))
        ));
        assert_eq!(s.value("w").unwrap().data()[0], 1.0);
    }

    #[test]
    fn plateau_traces() {
        let mut p = Plateau::new(0.1, 0.85, 5);
        for a in [0.5, 0.6, 0.7] {
            assert_eq!(p.step(a), 0.1);
        }

        let mut p = Plateau::new(0.1, 0.85, 5);
        p.step(0.5);
        for i in 0..5 {
            let lr = p.step(0.5);
            assert_eq!(lr, if i < 4 { 0.1 } else { 0.1 * 0.85 });
        }
        assert!((p.lr() - 0.085).abs() < 1e-15);

        let mut p = Plateau::new(0.1, 0.85, 5);
        p.step(0.9);
        for _ in 0..11 {
            p.step(0.4);
        }
        assert_eq!(p.reductions(), 2);
        assert!((p.lr() - 0.07225).abs() < 1e-15);
    }

    #[test]
    fn clipping_examples() {
        let mut s = scalar_store(0.0, 1.0);
        assert_eq!(clip_gradients(&mut s, 0.5).unwrap(), 1.0);
        assert_eq!(s.grad("w").unwrap().data()[0], 0.5);

        let mut s = scalar_store(0.0, 0.3);
        clip_gradients(&mut s, 0.5).unwrap();
        assert_eq!(s.grad("w").unwrap().data()[0], 0.3);

        let mut s = scalar_store(0.0, 3.0);
        s.insert("v", Tensor4::zeros(Shape::new(1, 1, 1, 1)))
            .unwrap();
        s.grad_mut("v").unwrap().data_mut()[0] = 4.0;
        clip_gradients(&mut s, 0.5).unwrap();
        assert!((s.grad("w").unwrap().data()[0] - 0.3).abs() < 1e-15);
        assert!((s.grad("v").unwrap().data()[0] - 0.4).abs() < 1e-15);
        assert!(clip_gradients(&mut s, 0.0).is_err());
    }

    #[test]
    fn bitvec_roundtrip() {
        let r = RunRecord {
            dataset: "d".into(),
            topology: "CSA".into(),
            status: RunStatus::Completed,
            config: TrainConfig::default(),
            param_count: 3,
            initial_val_acc: 0.25,
            test_acc: 0.5,
            test_correct: BitVec(vec![true, false, true, false]),
            epochs: vec![EpochRow {
                epoch: 0,
                train_loss: 1.0,
                train_acc: 0.5,
                val_acc: 0.5,
                lr: 0.1,
            }],
            wall_time_secs: 3.0,
        };
        let doc = r.to_toml().unwrap();
        assert!(doc.contains("test_correct = \"1010\""));
        assert!(!doc.contains("wall_time"));
        let back = RunRecord::from_toml(&doc).unwrap();
        assert_eq!(back.test_correct, r.test_correct);
        assert_eq!(back.epochs, r.epochs);
    }
}
