//! Linear scoring model, optimizers, and the deterministic training loop.
//!
//! The model scores class k for input x as `x . y_k / T` with a learned
//! label-embedding table Y. Training is fully seeded: the validation split,
//! per-epoch shuffles, label resampling, and extra negative draws each
//! consume an independent substream derived from the config seed, so two
//! runs with the same config are bitwise identical and losses that share a
//! code path (sd_infonce at epsilon 0 vs infonce) share exact trajectories.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::distributions::{label_smooth, sample_soft_distribution_label, Dataset};
use crate::losses::{
    infonce_loss, nll_loss, soft_target_ce_loss, soft_target_infonce_with_extras, LogitsBatch,
    LossId, LossOutput, NoiseModel,
};
use crate::numerics::{derive_seed, Matrix, RandomSource};
use crate::{Error, Result};

pub const DEFAULT_ADAM_BETAS: (f64, f64) = (0.9, 0.999);
pub const DEFAULT_ADAM_EPS: f64 = 1e-8;

/// Substream tags for [`derive_seed`] inside [`train`].
const STREAM_INIT: u64 = 1;
const STREAM_SPLIT: u64 = 2;
const STREAM_EPOCHS: u64 = 3;
const STREAM_RESAMPLE: u64 = 4;
const STREAM_EXTRAS: u64 = 5;

/// Label-embedding scorer: `logits[n,k] = x_n . y_k / temperature`.
///
/// Carries the log noise marginal it was trained against so downstream
/// audits can reconstruct corrected scores from the checkpoint alone.
#[derive(Debug, Clone)]
pub struct ScoringModel {
    embeddings: Matrix,
    temperature: f64,
    log_noise: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    k: usize,
    d: usize,
    temperature: f64,
    log_noise: Vec<f64>,
    embeddings: Vec<f64>,
}

impl ScoringModel {
    pub fn new(embeddings: Matrix, temperature: f64, log_noise: Vec<f64>) -> Result<ScoringModel> {
        if embeddings.rows() == 0 || embeddings.cols() == 0 {
            return Err(Error::EmptyInput);
        }
        if !temperature.is_finite() || temperature <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "temperature must be strictly positive (got {temperature})"
            )));
        }
        if log_noise.len() != embeddings.rows() {
            return Err(Error::ShapeMismatch(format!(
                "log_noise has {} entries for {} classes",
                log_noise.len(),
                embeddings.rows()
            )));
        }
        let total: f64 = log_noise.iter().map(|l| l.exp()).sum();
        if !total.is_finite() || (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "log_noise must exponentiate to a distribution (sum {total})"
            )));
        }
        Ok(ScoringModel {
            embeddings,
            temperature,
            log_noise,
        })
    }

    /// Entrywise N(0, 1/d) initialization with a uniform noise marginal.
    pub fn random_init(
        k: usize,
        d: usize,
        temperature: f64,
        rng: &mut RandomSource,
    ) -> Result<ScoringModel> {
        if k == 0 || d == 0 {
            return Err(Error::EmptyInput);
        }
        let std = (1.0 / d as f64).sqrt();
        let data: Vec<f64> = (0..k * d).map(|_| std * rng.normal()).collect();
        ScoringModel::new(
            Matrix::from_vec(k, d, data)?,
            temperature,
            vec![-(k as f64).ln(); k],
        )
    }

    pub fn n_classes(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn log_noise(&self) -> &[f64] {
        &self.log_noise
    }

    /// `logits[n,k] = x_n . y_k / temperature`.
    pub fn forward_logits(&self, inputs: &Matrix) -> Result<LogitsBatch> {
        let mut scores = inputs.mul_transpose(&self.embeddings)?;
        scores.scale_in_place(1.0 / self.temperature);
        LogitsBatch::new(scores)
    }

    pub fn to_json(&self) -> Result<String> {
        let checkpoint = Checkpoint {
            k: self.n_classes(),
            d: self.dim(),
            temperature: self.temperature,
            log_noise: self.log_noise.clone(),
            embeddings: self.embeddings.data().to_vec(),
        };
        Ok(serde_json::to_string_pretty(&checkpoint)?)
    }

    pub fn from_json(text: &str) -> Result<ScoringModel> {
        let checkpoint: Checkpoint = serde_json::from_str(text)?;
        ScoringModel::new(
            Matrix::from_vec(checkpoint.k, checkpoint.d, checkpoint.embeddings)?,
            checkpoint.temperature,
            checkpoint.log_noise,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ScoringModel> {
        ScoringModel::from_json(&std::fs::read_to_string(path)?)
    }
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

/// First and second moment accumulators plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(n_params: usize) -> AdamState {
        AdamState {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} params, {} grads, {} state entries",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    let (b1, b2) = betas;
    state.t += 1;
    let correction1 = 1.0 - b1.powi(state.t as i32);
    let correction2 = 1.0 - b2.powi(state.t as i32);
    for ((p, &g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / correction1;
        let v_hat = *v / correction2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Plain gradient descent step.
pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} params, {} grads",
            params.len(),
            grads.len()
        )));
    }
    for (p, &g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam,
}

/// Noise marginal used by the contrastive losses during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseChoice {
    Uniform,
    /// Class frequencies of the train split's labels.
    Empirical,
    Fixed(Vec<f64>),
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss_id: LossId,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
    /// Smoothing weight for the soft and resampled losses; 0 keeps targets
    /// one-hot.
    pub epsilon: f64,
    pub optimizer: Optimizer,
    pub noise: NoiseChoice,
    /// Smoothing distribution xi; None means uniform.
    pub smoothing_xi: Option<Vec<f64>>,
    /// Noise-sampled one-hot negatives appended to every soft-target
    /// InfoNCE batch.
    pub extra_negatives: usize,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            loss_id: LossId::Nll,
            max_epochs: 500,
            batch_size: 1024,
            learning_rate: 1e-3,
            patience: 20,
            val_fraction: 0.1,
            seed: 0,
            epsilon: 0.0,
            optimizer: Optimizer::Adam,
            noise: NoiseChoice::Empirical,
            smoothing_xi: None,
            extra_negatives: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 {
            return Err(Error::InvalidArgument("max_epochs must be positive".into()));
        }
        if self.patience == 0 {
            return Err(Error::InvalidArgument("patience must be positive".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be strictly positive (got {})",
                self.learning_rate
            )));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "val_fraction must lie in (0, 1) (got {})",
                self.val_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::InvalidArgument(format!(
                "epsilon must lie in [0, 1] (got {})",
                self.epsilon
            )));
        }
        let min_batch = if self.loss_id.uses_batch_negatives() { 2 } else { 1 };
        if self.batch_size < min_batch {
            return Err(Error::InvalidArgument(format!(
                "batch_size must be at least {min_batch} for {}",
                self.loss_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub final_model: ScoringModel,
    pub epochs_run: usize,
    /// 1-based epoch whose validation loss the returned model achieved.
    pub best_epoch: usize,
    pub train_curve: Vec<f64>,
    pub val_curve: Vec<f64>,
}

enum BatchTargets {
    Hard(Vec<usize>),
    Soft(Matrix),
}

struct TrainContext {
    loss_id: LossId,
    noise: NoiseModel,
    noise_probs: Vec<f64>,
    epsilon: f64,
    xi: Vec<f64>,
    extra_negatives: usize,
}

impl TrainContext {
    /// Targets for the given sample rows. Soft losses receive smoothed (or
    /// one-hot) rows; sd_infonce resamples through the supplied stream.
    fn targets_for(
        &self,
        labels: &[usize],
        indices: &[usize],
        n_classes: usize,
        resample: &mut Option<&mut RandomSource>,
    ) -> Result<BatchTargets> {
        match self.loss_id {
            LossId::Nll | LossId::InfoNce => {
                Ok(BatchTargets::Hard(indices.iter().map(|&i| labels[i]).collect()))
            }
            LossId::SdInfoNce => {
                let rng = resample
                    .as_mut()
                    .expect("sd_infonce needs a resampling stream");
                let mut out = Vec::with_capacity(indices.len());
                for &i in indices {
                    out.push(sample_soft_distribution_label(
                        labels[i],
                        self.epsilon,
                        &self.xi,
                        rng,
                    )?);
                }
                Ok(BatchTargets::Hard(out))
            }
            LossId::SoftCe | LossId::StInfoNce => {
                let mut rows = Matrix::zeros(indices.len(), n_classes);
                for (r, &i) in indices.iter().enumerate() {
                    let t = label_smooth(labels[i], n_classes, self.epsilon, Some(&self.xi))?;
                    rows.row_mut(r).copy_from_slice(t.as_slice());
                }
                Ok(BatchTargets::Soft(rows))
            }
        }
    }

    fn evaluate(
        &self,
        logits: &LogitsBatch,
        targets: &BatchTargets,
        extras: Option<&Matrix>,
    ) -> Result<LossOutput> {
        match (self.loss_id, targets) {
            (LossId::Nll, BatchTargets::Hard(labels)) => nll_loss(logits, labels),
            (LossId::InfoNce | LossId::SdInfoNce, BatchTargets::Hard(labels)) => {
                infonce_loss(logits, labels, &self.noise)
            }
            (LossId::SoftCe, BatchTargets::Soft(rows)) => soft_target_ce_loss(logits, rows),
            (LossId::StInfoNce, BatchTargets::Soft(rows)) => {
                soft_target_infonce_with_extras(logits, rows, extras, &self.noise)
            }
            _ => Err(Error::InvalidArgument(
                "targets do not match the configured loss".into(),
            )),
        }
    }

    /// One-hot rows for labels drawn from the noise marginal.
    fn draw_extras(&self, n_classes: usize, rng: &mut RandomSource) -> Result<Option<Matrix>> {
        if self.loss_id != LossId::StInfoNce || self.extra_negatives == 0 {
            return Ok(None);
        }
        let mut rows = Matrix::zeros(self.extra_negatives, n_classes);
        for r in 0..self.extra_negatives {
            let k = rng.categorical(&self.noise_probs)?;
            rows.set(r, k, 1.0);
        }
        Ok(Some(rows))
    }
}

fn batch_ranges(n: usize, batch_size: usize, drop_incomplete: bool) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        let complete = end - start == batch_size;
        // An undersized leading chunk survives the drop rule so a split
        // smaller than one batch is still evaluated.
        if complete || !drop_incomplete || start == 0 {
            out.push((start, end));
        }
        start = end;
    }
    out
}

/// Deterministic minibatch training with early stopping on validation loss.
///
/// The validation split is the first `val_fraction` of a seeded permutation,
/// fixed before training. Epoch shuffles reorder only the train portion.
/// The best-validation embeddings are returned, not the last ones.
pub fn train(
    dataset: &Dataset,
    config: &TrainConfig,
    init: Option<&ScoringModel>,
) -> Result<TrainResult> {
    config.validate()?;
    dataset.validate()?;
    let labels = dataset.hard_labels.as_ref().ok_or_else(|| {
        Error::InvalidArgument("training requires hard labels".into())
    })?;
    let n = dataset.len();
    let n_classes = dataset.n_classes;
    let dim = dataset.dim();

    let mut model = match init {
        Some(m) => {
            if m.n_classes() != n_classes || m.dim() != dim {
                return Err(Error::ShapeMismatch(format!(
                    "init model is {}x{}, dataset needs {n_classes}x{dim}",
                    m.n_classes(),
                    m.dim()
                )));
            }
            m.clone()
        }
        None => {
            let mut rng = RandomSource::new(derive_seed(config.seed, STREAM_INIT));
            ScoringModel::random_init(n_classes, dim, 1.0, &mut rng)?
        }
    };

    let mut order: Vec<usize> = (0..n).collect();
    RandomSource::new(derive_seed(config.seed, STREAM_SPLIT)).shuffle(&mut order);
    let n_val = ((n as f64 * config.val_fraction) as usize).max(1);
    if n_val >= n {
        return Err(Error::InvalidArgument(format!(
            "dataset of {n} rows leaves no train split at val_fraction {}",
            config.val_fraction
        )));
    }
    let (val_idx, train_idx) = order.split_at(n_val);
    let val_idx = val_idx.to_vec();
    let mut train_idx = train_idx.to_vec();
    if config.batch_size > train_idx.len() {
        return Err(Error::InvalidArgument(format!(
            "batch_size {} exceeds the train split of {}",
            config.batch_size,
            train_idx.len()
        )));
    }

    let noise = match &config.noise {
        NoiseChoice::Uniform => NoiseModel::uniform(n_classes, 1.0)?,
        NoiseChoice::Empirical => {
            let train_labels: Vec<usize> = train_idx.iter().map(|&i| labels[i]).collect();
            NoiseModel::from_empirical_labels(&train_labels, n_classes, 1.0)?
        }
        NoiseChoice::Fixed(p) => NoiseModel::from_probs(p, 1.0)?,
    };
    let noise_probs: Vec<f64> = noise.log_noise().iter().map(|l| l.exp()).collect();
    let xi = match &config.smoothing_xi {
        Some(p) => {
            if p.len() != n_classes {
                return Err(Error::ShapeMismatch(format!(
                    "smoothing_xi has {} entries for {n_classes} classes",
                    p.len()
                )));
            }
            p.clone()
        }
        None => vec![1.0 / n_classes as f64; n_classes],
    };
    let context = TrainContext {
        loss_id: config.loss_id,
        noise,
        noise_probs,
        epsilon: config.epsilon,
        xi,
        extra_negatives: config.extra_negatives,
    };
    model = ScoringModel::new(
        model.embeddings().clone(),
        model.temperature(),
        context.noise.log_noise().to_vec(),
    )?;

    let mut epoch_rng = RandomSource::new(derive_seed(config.seed, STREAM_EPOCHS));
    let mut resample_rng = RandomSource::new(derive_seed(config.seed, STREAM_RESAMPLE));
    let mut extras_rng = RandomSource::new(derive_seed(config.seed, STREAM_EXTRAS));

    // Validation targets and extras are drawn once so the monitored loss is
    // comparable across epochs.
    let val_targets = {
        let mut stream = Some(&mut resample_rng);
        context.targets_for(labels, &val_idx, n_classes, &mut stream)?
    };
    let val_extras = context.draw_extras(n_classes, &mut extras_rng)?;
    let val_inputs = dataset.inputs.select_rows(&val_idx)?;
    let drop_incomplete = config.loss_id.uses_batch_negatives();
    let val_ranges = batch_ranges(val_idx.len(), config.batch_size, drop_incomplete);

    let n_params = n_classes * dim;
    let mut adam = AdamState::new(n_params);
    let mut train_curve = Vec::new();
    let mut val_curve = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_embeddings = model.embeddings().clone();
    let mut since_best = 0usize;

    for epoch in 1..=config.max_epochs {
        epoch_rng.shuffle(&mut train_idx);
        let mut loss_sum = 0.0;
        let mut loss_weight = 0usize;
        for &(start, end) in &batch_ranges(train_idx.len(), config.batch_size, drop_incomplete) {
            let batch = &train_idx[start..end];
            let inputs = dataset.inputs.select_rows(batch)?;
            let logits = model.forward_logits(&inputs)?;
            let mut stream = Some(&mut resample_rng);
            let targets = context.targets_for(labels, batch, n_classes, &mut stream)?;
            let extras = context.draw_extras(n_classes, &mut extras_rng)?;
            let out = context.evaluate(&logits, &targets, extras.as_ref())?;
            if !out.value.is_finite() {
                return Err(Error::NumericFailure(format!(
                    "non-finite {} loss at epoch {epoch}",
                    config.loss_id
                )));
            }
            loss_sum += out.value * batch.len() as f64;
            loss_weight += batch.len();

            let mut grad = out.grad_logits.transpose_mul(&inputs)?;
            grad.scale_in_place(1.0 / model.temperature());
            match config.optimizer {
                Optimizer::Adam => adam_step(
                    model.embeddings.data_mut(),
                    grad.data(),
                    &mut adam,
                    config.learning_rate,
                    DEFAULT_ADAM_BETAS,
                    DEFAULT_ADAM_EPS,
                )?,
                Optimizer::Sgd => {
                    sgd_step(model.embeddings.data_mut(), grad.data(), config.learning_rate)?
                }
            }
        }
        train_curve.push(loss_sum / loss_weight as f64);

        let mut val_sum = 0.0;
        let mut val_weight = 0usize;
        for &(start, end) in &val_ranges {
            let chunk: Vec<usize> = (start..end).collect();
            let inputs = val_inputs.select_rows(&chunk)?;
            let logits = model.forward_logits(&inputs)?;
            let targets = slice_targets(&val_targets, start, end);
            let out = context.evaluate(&logits, &targets, val_extras.as_ref())?;
            if !out.value.is_finite() {
                return Err(Error::NumericFailure(format!(
                    "non-finite validation loss at epoch {epoch}"
                )));
            }
            val_sum += out.value * (end - start) as f64;
            val_weight += end - start;
        }
        let val_loss = val_sum / val_weight as f64;
        val_curve.push(val_loss);

        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_embeddings = model.embeddings().clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }

    let final_model = ScoringModel::new(
        best_embeddings,
        model.temperature(),
        model.log_noise().to_vec(),
    )?;
    Ok(TrainResult {
        final_model,
        epochs_run: train_curve.len(),
        best_epoch,
        train_curve,
        val_curve,
    })
}

fn slice_targets(targets: &BatchTargets, start: usize, end: usize) -> BatchTargets {
    match targets {
        BatchTargets::Hard(labels) => BatchTargets::Hard(labels[start..end].to_vec()),
        BatchTargets::Soft(rows) => {
            let idx: Vec<usize> = (start..end).collect();
            BatchTargets::Soft(rows.select_rows(&idx).expect("slice within target rows"))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{sample_gmm_dataset, GmmSpec};
    use approx::assert_relative_eq;

    fn toy_gmm(seed: u64, n_unique: usize, n_total: usize) -> Dataset {
        let spec = GmmSpec {
            n_modes: 4,
            dim: 4,
            alignment_percent: 40.0,
            mean_scale: 3.0,
            mixture_weights: None,
        };
        let modes = crate::distributions::make_modes(&spec).unwrap();
        let mut rng = RandomSource::new(seed);
        sample_gmm_dataset(&spec, n_unique, n_total, &modes, &mut rng).unwrap()
    }

    fn quick_config(loss_id: LossId, seed: u64) -> TrainConfig {
        TrainConfig {
            loss_id,
            max_epochs: 12,
            batch_size: 32,
            learning_rate: 0.05,
            patience: 12,
            val_fraction: 0.2,
            seed,
            epsilon: 0.0,
            optimizer: Optimizer::Adam,
            noise: NoiseChoice::Uniform,
            smoothing_xi: None,
            extra_negatives: 0,
        }
    }

    #[test]
    fn forward_logits_identity_probe_reads_embedding_columns() {
        let emb = Matrix::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let model = ScoringModel::new(emb, 1.0, vec![-(3f64).ln(); 3]).unwrap();
        let eye = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let logits = model.forward_logits(&eye).unwrap();
        assert_eq!(logits.values().row(0), &[1.0, 3.0, 5.0]);
        assert_eq!(logits.values().row(1), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn temperature_divides_logits() {
        let emb = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let unit = ScoringModel::new(emb.clone(), 1.0, vec![-(2f64).ln(); 2]).unwrap();
        let halved = ScoringModel::new(emb, 2.0, vec![-(2f64).ln(); 2]).unwrap();
        let x = Matrix::from_rows(&[vec![1.5, -0.5]]).unwrap();
        let a = unit.forward_logits(&x).unwrap();
        let b = halved.forward_logits(&x).unwrap();
        for (u, h) in a.values().data().iter().zip(b.values().data()) {
            assert_relative_eq!(u * 0.5, *h, epsilon = 1e-15);
        }
    }

    #[test]
    fn forward_logits_matches_naive_loops() {
        let mut rng = RandomSource::new(31);
        let model = ScoringModel::random_init(4, 2, 0.7, &mut rng).unwrap();
        let x = Matrix::from_vec(3, 2, (0..6).map(|_| rng.normal()).collect()).unwrap();
        let logits = model.forward_logits(&x).unwrap();
        for n in 0..3 {
            for k in 0..4 {
                let mut expected = 0.0;
                for c in 0..2 {
                    expected += x.get(n, c) * model.embeddings().get(k, c);
                }
                expected /= 0.7;
                assert_relative_eq!(logits.values().get(n, k), expected, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn adam_leaves_params_unchanged_on_zero_gradient() {
        let mut params = vec![1.0, -2.0, 0.5];
        let mut state = AdamState::new(3);
        adam_step(&mut params, &[0.0; 3], &mut state, 0.1, DEFAULT_ADAM_BETAS, DEFAULT_ADAM_EPS)
            .unwrap();
        assert_eq!(params, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn adam_first_step_magnitude_is_the_learning_rate() {
        let mut params = vec![1.0];
        let mut state = AdamState::new(1);
        adam_step(&mut params, &[1.0], &mut state, 0.001, DEFAULT_ADAM_BETAS, DEFAULT_ADAM_EPS)
            .unwrap();
        assert!((params[0] - 0.999).abs() < 2e-11, "{}", params[0]);

        // Frozen first-step value for g = 3, lr = 0.1: the bias-corrected
        // ratio is lr * g / (|g| + eps).
        let mut p = vec![0.0];
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[3.0], &mut s, 0.1, DEFAULT_ADAM_BETAS, DEFAULT_ADAM_EPS).unwrap();
        assert_relative_eq!(p[0], -0.09999999966666668, epsilon = 1e-15);
    }

    #[test]
    fn adam_trajectory_matches_reference_recurrence() {
        // Independent implementation of the published update rule on the
        // quadratic f(x) = (x - 3)^2, g = 2(x - 3).
        let (b1, b2) = DEFAULT_ADAM_BETAS;
        let eps = DEFAULT_ADAM_EPS;
        let lr = 0.05;
        let mut reference = 0.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let mut expected = Vec::new();
        for t in 1..=10 {
            let g = 2.0 * (reference - 3.0);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            reference -= lr * m_hat / (v_hat.sqrt() + eps);
            expected.push(reference);
        }

        let mut params = vec![0.0f64];
        let mut state = AdamState::new(1);
        for step in expected {
            let g = 2.0 * (params[0] - 3.0);
            adam_step(&mut params, &[g], &mut state, lr, DEFAULT_ADAM_BETAS, eps).unwrap();
            assert!((params[0] - step).abs() < 1e-12, "{} vs {step}", params[0]);
        }
    }

    #[test]
    fn sgd_step_is_exact() {
        let mut params = vec![1.0, 2.0];
        sgd_step(&mut params, &[0.5, -1.0], 0.1).unwrap();
        assert_eq!(params, vec![0.95, 2.1]);
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let mut rng = RandomSource::new(32);
        let model = ScoringModel::random_init(5, 3, 0.8, &mut rng).unwrap();
        let text = model.to_json().unwrap();
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(value["k"], 5);
        assert_eq!(value["d"], 3);
        let back = ScoringModel::from_json(&text).unwrap();
        assert_eq!(back.embeddings().data(), model.embeddings().data());
        assert_eq!(back.temperature(), model.temperature());
        assert_eq!(back.log_noise(), model.log_noise());
    }

    #[test]
    fn model_constructor_validates() {
        let emb = Matrix::zeros(2, 2);
        assert!(ScoringModel::new(emb.clone(), 0.0, vec![-(2f64).ln(); 2]).is_err());
        assert!(ScoringModel::new(emb.clone(), 1.0, vec![0.0, 0.0]).is_err());
        assert!(ScoringModel::new(emb, 1.0, vec![-(2f64).ln(); 3]).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let data = toy_gmm(7, 40, 240);
        let config = quick_config(LossId::InfoNce, 11);
        let a = train(&data, &config, None).unwrap();
        let b = train(&data, &config, None).unwrap();
        assert_eq!(a.train_curve, b.train_curve);
        assert_eq!(a.val_curve, b.val_curve);
        assert_eq!(
            a.final_model.embeddings().data(),
            b.final_model.embeddings().data()
        );
    }

    #[test]
    fn nll_solves_linearly_separable_labels() {
        // Two well-separated clusters with deterministic labels.
        let mut rng = RandomSource::new(33);
        let n = 200;
        let mut data = Vec::with_capacity(n * 2);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = i % 2;
            let center = if label == 0 { -4.0 } else { 4.0 };
            data.push(center + rng.normal());
            data.push(rng.normal());
            labels.push(label);
        }
        let dataset = Dataset {
            inputs: Matrix::from_vec(n, 2, data).unwrap(),
            hard_labels: Some(labels.clone()),
            soft_targets: None,
            n_classes: 2,
        };
        let mut config = quick_config(LossId::Nll, 3);
        config.max_epochs = 60;
        config.patience = 60;
        config.batch_size = 16;
        let result = train(&dataset, &config, None).unwrap();
        let logits = result.final_model.forward_logits(&dataset.inputs).unwrap();
        let predictions = crate::losses::predict(&logits, 1).unwrap();
        let correct = predictions
            .iter()
            .zip(&labels)
            .filter(|(p, &l)| p[0] == l)
            .count();
        assert!(correct as f64 / n as f64 > 0.99, "{correct}/{n}");
    }

    #[test]
    fn every_loss_decreases_on_the_toy_problem() {
        let data = toy_gmm(8, 60, 400);
        for &loss_id in &LossId::ALL {
            let mut config = quick_config(loss_id, 17);
            config.epsilon = if loss_id.uses_soft_targets() || loss_id == LossId::SdInfoNce {
                0.1
            } else {
                0.0
            };
            let result = train(&data, &config, None).unwrap();
            assert!(
                result.train_curve[9] < result.train_curve[0],
                "{loss_id}: {:?}",
                &result.train_curve[..10]
            );
        }
    }

    #[test]
    fn early_stopping_respects_patience_and_best_checkpoint() {
        let data = toy_gmm(9, 40, 240);
        let mut config = quick_config(LossId::Nll, 5);
        config.max_epochs = 300;
        config.patience = 5;
        config.learning_rate = 0.2;
        let result = train(&data, &config, None).unwrap();
        assert!(result.epochs_run <= 300);
        assert_eq!(result.train_curve.len(), result.epochs_run);
        assert_eq!(result.val_curve.len(), result.epochs_run);
        let best = result.val_curve[result.best_epoch - 1];
        for (i, &v) in result.val_curve.iter().enumerate() {
            if i + 1 > result.best_epoch {
                assert!(v >= best, "epoch {}: {v} < {best}", i + 1);
            }
        }
        // Converged long before the cap: patience must have triggered.
        assert!(result.epochs_run < 300, "{}", result.epochs_run);
    }

    #[test]
    fn oversized_batch_is_rejected() {
        let data = toy_gmm(10, 30, 100);
        let mut config = quick_config(LossId::Nll, 1);
        config.batch_size = 100;
        let err = train(&data, &config, None).unwrap_err();
        assert!(err.to_string().contains("exceeds the train split"));
    }

    #[test]
    fn sd_infonce_at_zero_epsilon_is_bitwise_infonce() {
        let data = toy_gmm(11, 40, 240);
        let a = train(&data, &quick_config(LossId::InfoNce, 13), None).unwrap();
        let b = train(&data, &quick_config(LossId::SdInfoNce, 13), None).unwrap();
        assert_eq!(a.train_curve, b.train_curve);
        assert_eq!(a.val_curve, b.val_curve);
        assert_eq!(
            a.final_model.embeddings().data(),
            b.final_model.embeddings().data()
        );
    }

    #[test]
    fn st_infonce_at_zero_epsilon_tracks_infonce() {
        // One-hot soft targets reduce to hard InfoNCE analytically; the two
        // code paths differ only in floating-point summation order, so short
        // trajectories agree to tight tolerance.
        let data = toy_gmm(12, 40, 240);
        let mut config_hard = quick_config(LossId::InfoNce, 19);
        config_hard.max_epochs = 4;
        let mut config_soft = quick_config(LossId::StInfoNce, 19);
        config_soft.max_epochs = 4;
        let a = train(&data, &config_hard, None).unwrap();
        let b = train(&data, &config_soft, None).unwrap();
        for (x, y) in a.train_curve.iter().zip(&b.train_curve) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
        for (x, y) in a
            .final_model
            .embeddings()
            .data()
            .iter()
            .zip(b.final_model.embeddings().data())
        {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn empirical_noise_requires_every_class_in_the_train_split() {
        // Class 3 appears only once; when that row lands in the validation
        // split the empirical marginal is undefined. Force it by using a
        // dataset where class 3 never appears at all.
        let inputs = Matrix::from_vec(8, 2, (0..16).map(|i| i as f64 * 0.1).collect()).unwrap();
        let labels = vec![0, 1, 2, 0, 1, 2, 0, 1];
        let dataset = Dataset {
            inputs,
            hard_labels: Some(labels),
            soft_targets: None,
            n_classes: 4,
        };
        let mut config = quick_config(LossId::InfoNce, 2);
        config.noise = NoiseChoice::Empirical;
        config.batch_size = 2;
        let err = train(&dataset, &config, None).unwrap_err();
        assert!(err.to_string().contains("never occurs"), "{err}");
    }

    #[test]
    fn diverging_run_aborts_with_an_error() {
        // Inputs scaled so the first gradient step overflows the embeddings,
        // making the very next forward pass non-finite.
        let mut data = toy_gmm(13, 30, 120);
        data.inputs.scale_in_place(100.0);
        let mut config = quick_config(LossId::Nll, 4);
        config.optimizer = Optimizer::Sgd;
        config.learning_rate = 1e308;
        config.max_epochs = 2;
        assert!(train(&data, &config, None).is_err());
    }

    #[test]
    fn extra_negatives_change_the_soft_target_trajectory() {
        let data = toy_gmm(14, 40, 240);
        let mut base = quick_config(LossId::StInfoNce, 21);
        base.epsilon = 0.1;
        let mut with_extras = base.clone();
        with_extras.extra_negatives = 8;
        let a = train(&data, &base, None).unwrap();
        let b = train(&data, &with_extras, None).unwrap();
        assert_ne!(a.train_curve, b.train_curve);
        // Extra pure-noise negatives inflate the contrastive denominator.
        assert!(b.train_curve[0] > a.train_curve[0]);
    }
}
