//! The loss family over class scores.
//!
//! All losses consume an N x K batch of class scores ("logits", one row per
//! sample) and return the scalar loss together with its gradient with respect
//! to those scores. The contrastive members additionally take a [`NoiseModel`]
//! and work on corrected scores `s = logits / temperature - log eta`, so that
//! `exp(s)` estimates the density ratio between the conditional and the noise:
//!
//! * [`nll_loss`]: mean cross-entropy against hard labels.
//! * [`soft_target_ce_loss`]: cross-entropy against probability-vector targets.
//! * [`infonce_loss`]: ranking loss where each sample's own label is the
//!   positive and the labels of the other batch rows are the negatives.
//! * [`soft_target_infonce_loss`]: the same ranking structure with aggregate
//!   scores `sum_i target_i * s_i` in place of single-class scores; the soft
//!   targets of the other rows act as negatives.
//! * [`soft_distribution_infonce_loss`]: InfoNCE over labels that were
//!   resampled from a smoothed distribution.
//!
//! [`energy_ce_form`] evaluates the soft-target objective through its
//! cross-entropy factorization; it agrees with [`soft_target_infonce_loss`]
//! analytically and serves as an independent route for consistency checks.

use serde::{Deserialize, Serialize};

use crate::distributions::validate_distribution;
use crate::numerics::{dot, log_sum_exp, softmax, Matrix};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Shared types
// ---------------------------------------------------------------------------

/// One batch of class scores: N samples by K classes, all finite.
#[derive(Debug, Clone)]
pub struct LogitsBatch {
    values: Matrix,
}

impl LogitsBatch {
    pub fn new(values: Matrix) -> Result<LogitsBatch> {
        if values.rows() == 0 || values.cols() == 0 {
            return Err(Error::EmptyInput);
        }
        if values.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits must be finite".into()));
        }
        Ok(LogitsBatch { values })
    }

    pub fn n(&self) -> usize {
        self.values.rows()
    }

    pub fn k(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }
}

/// Noise distribution and temperature for the contrastive losses.
///
/// `exp(log_noise)` sums to one; `temperature` scales the incoming logits
/// before the noise correction is subtracted.
#[derive(Debug, Clone)]
pub struct NoiseModel {
    log_noise: Vec<f64>,
    temperature: f64,
}

impl NoiseModel {
    pub fn from_probs(probs: &[f64], temperature: f64) -> Result<NoiseModel> {
        validate_distribution(probs, "noise distribution")?;
        if probs.iter().any(|p| *p == 0.0) {
            return Err(Error::InvalidArgument(
                "noise distribution must be strictly positive".into(),
            ));
        }
        if !temperature.is_finite() || temperature <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "temperature must be strictly positive (got {temperature})"
            )));
        }
        Ok(NoiseModel {
            log_noise: probs.iter().map(|p| p.ln()).collect(),
            temperature,
        })
    }

    pub fn uniform(n_classes: usize, temperature: f64) -> Result<NoiseModel> {
        if n_classes == 0 {
            return Err(Error::EmptyInput);
        }
        NoiseModel::from_probs(&vec![1.0 / n_classes as f64; n_classes], temperature)
    }

    /// Empirical class marginal of a hard-label sample.
    pub fn from_empirical_labels(
        labels: &[usize],
        n_classes: usize,
        temperature: f64,
    ) -> Result<NoiseModel> {
        if labels.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut counts = vec![0usize; n_classes];
        for &k in labels {
            if k >= n_classes {
                return Err(Error::InvalidArgument(format!(
                    "label {k} out of range for {n_classes} classes"
                )));
            }
            counts[k] += 1;
        }
        if let Some(k) = counts.iter().position(|&c| c == 0) {
            return Err(Error::InvalidArgument(format!(
                "empirical noise undefined: class {k} never occurs"
            )));
        }
        let n = labels.len() as f64;
        let probs: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
        NoiseModel::from_probs(&probs, temperature)
    }

    /// Empirical marginal of soft targets: the column means.
    pub fn from_empirical_targets(targets: &Matrix, temperature: f64) -> Result<NoiseModel> {
        if targets.rows() == 0 {
            return Err(Error::EmptyInput);
        }
        let mut sums = vec![0.0; targets.cols()];
        for i in 0..targets.rows() {
            for (s, v) in sums.iter_mut().zip(targets.row(i)) {
                *s += v;
            }
        }
        let n = targets.rows() as f64;
        for s in &mut sums {
            *s /= n;
        }
        NoiseModel::from_probs(&sums, temperature)
    }

    pub fn log_noise(&self) -> &[f64] {
        &self.log_noise
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn n_classes(&self) -> usize {
        self.log_noise.len()
    }
}

/// Loss value and gradient with respect to the input logits.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    pub grad_logits: Matrix,
}

/// Identifiers for the trainable losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossId {
    #[serde(rename = "nll")]
    Nll,
    #[serde(rename = "soft_ce")]
    SoftCe,
    #[serde(rename = "infonce")]
    InfoNce,
    #[serde(rename = "sd_infonce")]
    SdInfoNce,
    #[serde(rename = "st_infonce")]
    StInfoNce,
}

impl LossId {
    pub const ALL: [LossId; 5] = [
        LossId::Nll,
        LossId::SoftCe,
        LossId::InfoNce,
        LossId::SdInfoNce,
        LossId::StInfoNce,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            LossId::Nll => "nll",
            LossId::SoftCe => "soft_ce",
            LossId::InfoNce => "infonce",
            LossId::SdInfoNce => "sd_infonce",
            LossId::StInfoNce => "st_infonce",
        }
    }

    /// True for the losses that contrast against in-batch negatives.
    pub fn uses_batch_negatives(&self) -> bool {
        matches!(self, LossId::InfoNce | LossId::SdInfoNce | LossId::StInfoNce)
    }

    pub fn uses_soft_targets(&self) -> bool {
        matches!(self, LossId::SoftCe | LossId::StInfoNce)
    }
}

impl std::fmt::Display for LossId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for LossId {
    type Err = Error;

    fn from_str(s: &str) -> Result<LossId> {
        LossId::ALL
            .iter()
            .copied()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown loss id {s:?}")))
    }
}

// ---------------------------------------------------------------------------
// Validation helpers
// ---------------------------------------------------------------------------

fn validate_labels(labels: &[usize], n: usize, k: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    Ok(())
}

fn validate_targets(targets: &Matrix, n: usize, k: usize) -> Result<()> {
    if targets.rows() != n || targets.cols() != k {
        return Err(Error::ShapeMismatch(format!(
            "targets are {}x{}, expected {n}x{k}",
            targets.rows(),
            targets.cols()
        )));
    }
    for i in 0..n {
        validate_distribution(targets.row(i), "target row")?;
    }
    Ok(())
}

/// Corrected scores `s = logits / temperature - log eta`.
fn corrected_scores(logits: &LogitsBatch, noise: &NoiseModel) -> Result<Matrix> {
    if noise.n_classes() != logits.k() {
        return Err(Error::ShapeMismatch(format!(
            "noise model has {} classes, logits have {}",
            noise.n_classes(),
            logits.k()
        )));
    }
    let inv_t = 1.0 / noise.temperature();
    let mut s = logits.values().clone();
    for n in 0..s.rows() {
        for (v, ln_eta) in s.row_mut(n).iter_mut().zip(noise.log_noise()) {
            *v = *v * inv_t - ln_eta;
        }
    }
    Ok(s)
}

// ---------------------------------------------------------------------------
// Cross-entropy losses
// ---------------------------------------------------------------------------

/// Mean negative log-likelihood of hard labels under `softmax(logits)`.
///
/// ```
/// use softnce::losses::{nll_loss, LogitsBatch};
/// use softnce::numerics::Matrix;
/// let logits = LogitsBatch::new(Matrix::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
/// let out = nll_loss(&logits, &[0]).unwrap();
/// assert!((out.value - 2.4076059644443803).abs() < 1e-12);
/// ```
pub fn nll_loss(logits: &LogitsBatch, labels: &[usize]) -> Result<LossOutput> {
    let (n, k) = (logits.n(), logits.k());
    validate_labels(labels, n, k)?;
    let inv_n = 1.0 / n as f64;
    let mut grad = Matrix::zeros(n, k);
    let mut total = 0.0;
    for i in 0..n {
        let row = logits.values().row(i);
        total += log_sum_exp(row)? - row[labels[i]];
        let probs = softmax(row)?;
        let g = grad.row_mut(i);
        for (dst, p) in g.iter_mut().zip(probs) {
            *dst = p * inv_n;
        }
        g[labels[i]] -= inv_n;
    }
    Ok(LossOutput { value: total * inv_n, grad_logits: grad })
}

/// Mean cross-entropy of soft targets under `softmax(logits)`:
/// `-sum_i t_i log softmax(logits)_i` per row.
pub fn soft_target_ce_loss(logits: &LogitsBatch, targets: &Matrix) -> Result<LossOutput> {
    let (n, k) = (logits.n(), logits.k());
    validate_targets(targets, n, k)?;
    let inv_n = 1.0 / n as f64;
    let mut grad = Matrix::zeros(n, k);
    let mut total = 0.0;
    for i in 0..n {
        let row = logits.values().row(i);
        let t = targets.row(i);
        total += log_sum_exp(row)? - dot(t, row);
        let probs = softmax(row)?;
        for (dst, (p, tv)) in grad.row_mut(i).iter_mut().zip(probs.iter().zip(t)) {
            *dst = (p - tv) * inv_n;
        }
    }
    Ok(LossOutput { value: total * inv_n, grad_logits: grad })
}

// ---------------------------------------------------------------------------
// InfoNCE with in-batch negatives
// ---------------------------------------------------------------------------

/// InfoNCE over hard labels. For each sample the positive is its own label's
/// corrected score; the labels of the other batch rows (with multiplicity)
/// are the negatives. A batch of one has no negatives and scores zero.
///
/// Duplicate labels are aggregated per class, so every row costs O(K) rather
/// than O(N).
pub fn infonce_loss(
    logits: &LogitsBatch,
    labels: &[usize],
    noise: &NoiseModel,
) -> Result<LossOutput> {
    let (n, k) = (logits.n(), logits.k());
    validate_labels(labels, n, k)?;
    let s = corrected_scores(logits, noise)?;

    let mut counts = vec![0usize; k];
    for &l in labels {
        counts[l] += 1;
    }
    let present: Vec<usize> = (0..k).filter(|&c| counts[c] > 0).collect();

    let inv_n = 1.0 / n as f64;
    let scale = inv_n / noise.temperature();
    let mut grad = Matrix::zeros(n, k);
    let mut total = 0.0;
    let mut exps = vec![0.0; k];
    for i in 0..n {
        let row = s.row(i);
        let max = present
            .iter()
            .map(|&c| row[c])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for &c in &present {
            let e = (row[c] - max).exp();
            exps[c] = e;
            z += counts[c] as f64 * e;
        }
        // max - row[label] first: when every row shares one label the
        // difference is exactly zero and the batch loss is bitwise ln N,
        // which keeps finite differences clean at the constant point.
        total += z.ln() + (max - row[labels[i]]);
        let inv_z = 1.0 / z;
        let g = grad.row_mut(i);
        for &c in &present {
            g[c] = counts[c] as f64 * exps[c] * inv_z * scale;
        }
        g[labels[i]] -= scale;
    }
    Ok(LossOutput { value: total * inv_n, grad_logits: grad })
}

/// InfoNCE over labels drawn from a smoothed label distribution. The labels
/// must come from [`crate::distributions::sample_soft_distribution_label`]
/// or an equivalent resampling; the loss itself is exactly [`infonce_loss`].
pub fn soft_distribution_infonce_loss(
    logits: &LogitsBatch,
    smoothed_labels: &[usize],
    noise: &NoiseModel,
) -> Result<LossOutput> {
    infonce_loss(logits, smoothed_labels, noise)
}

/// Soft-target InfoNCE. Row `n`'s positive is the aggregate corrected score
/// `sum_i t_{n,i} s_{n,i}`; the aggregates of the other rows' targets (and of
/// any `extras`) are the negatives:
///
/// ```text
/// loss_n = -log [ exp(a_nn) / sum_m exp(a_nm) ],   a_nm = <s_n, t_m>
/// ```
pub fn soft_target_infonce_with_extras(
    logits: &LogitsBatch,
    targets: &Matrix,
    extras: Option<&Matrix>,
    noise: &NoiseModel,
) -> Result<LossOutput> {
    let (n, k) = (logits.n(), logits.k());
    validate_targets(targets, n, k)?;
    let n_extra = match extras {
        Some(x) => {
            if x.cols() != k {
                return Err(Error::ShapeMismatch(format!(
                    "extra negatives have {} columns, expected {k}",
                    x.cols()
                )));
            }
            for e in 0..x.rows() {
                validate_distribution(x.row(e), "extra negative row")?;
            }
            x.rows()
        }
        None => 0,
    };
    if n == 1 && n_extra == 0 {
        return Err(Error::InvalidArgument(
            "soft target InfoNCE needs at least one negative".into(),
        ));
    }
    let s = corrected_scores(logits, noise)?;
    let m_total = n + n_extra;

    let inv_n = 1.0 / n as f64;
    let scale = inv_n / noise.temperature();
    let mut grad = Matrix::zeros(n, k);
    let mut total = 0.0;
    let mut agg = vec![0.0; m_total];
    for i in 0..n {
        let srow = s.row(i);
        for m in 0..n {
            agg[m] = dot(srow, targets.row(m));
        }
        if let Some(x) = extras {
            for e in 0..n_extra {
                agg[n + e] = dot(srow, x.row(e));
            }
        }
        let max = agg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for a in &mut agg {
            *a = (*a - max).exp();
            z += *a;
        }
        // agg now holds exp(a - max); the positive's raw aggregate is
        // recovered from its exponent.
        let pos = agg[i].ln() + max;
        total += z.ln() + max - pos;
        let inv_z = 1.0 / z;
        let g = grad.row_mut(i);
        for m in 0..n {
            let coeff = (agg[m] * inv_z - if m == i { 1.0 } else { 0.0 }) * scale;
            for (dst, t) in g.iter_mut().zip(targets.row(m)) {
                *dst += coeff * t;
            }
        }
        if let Some(x) = extras {
            for e in 0..n_extra {
                let coeff = agg[n + e] * inv_z * scale;
                for (dst, t) in g.iter_mut().zip(x.row(e)) {
                    *dst += coeff * t;
                }
            }
        }
    }
    Ok(LossOutput { value: total * inv_n, grad_logits: grad })
}

/// [`soft_target_infonce_with_extras`] with in-batch negatives only.
pub fn soft_target_infonce_loss(
    logits: &LogitsBatch,
    targets: &Matrix,
    noise: &NoiseModel,
) -> Result<LossOutput> {
    soft_target_infonce_with_extras(logits, targets, None, noise)
}

/// Cross-entropy factorization of the soft-target objective: each class score
/// is turned into a log-probability against the shared aggregate denominator,
/// then weighted by the target,
///
/// ```text
/// loss_n = -sum_i t_{n,i} log [ exp(s_{n,i}) / sum_m exp(a_nm) ].
/// ```
///
/// Analytically identical to [`soft_target_infonce_loss`] because the
/// positive aggregate is exactly the target-weighted score sum; kept as an
/// independent computation route.
pub fn energy_ce_form(
    logits: &LogitsBatch,
    targets: &Matrix,
    noise: &NoiseModel,
) -> Result<LossOutput> {
    let (n, k) = (logits.n(), logits.k());
    validate_targets(targets, n, k)?;
    if n == 1 {
        return Err(Error::InvalidArgument(
            "soft target InfoNCE needs at least one negative".into(),
        ));
    }
    let s = corrected_scores(logits, noise)?;

    let inv_n = 1.0 / n as f64;
    let scale = inv_n / noise.temperature();
    let mut grad = Matrix::zeros(n, k);
    let mut total = 0.0;
    let mut agg = vec![0.0; n];
    for i in 0..n {
        let srow = s.row(i);
        for (m, a) in agg.iter_mut().enumerate() {
            *a = dot(srow, targets.row(m));
        }
        let log_denom = log_sum_exp(&agg)?;
        let t = targets.row(i);
        total += -t
            .iter()
            .zip(srow)
            .map(|(tv, sv)| tv * (sv - log_denom))
            .sum::<f64>();

        let w = softmax(&agg)?;
        let g = grad.row_mut(i);
        for (m, wm) in w.iter().enumerate() {
            for (dst, tv) in g.iter_mut().zip(targets.row(m)) {
                *dst += wm * tv * scale;
            }
        }
        for (dst, tv) in g.iter_mut().zip(t) {
            *dst -= tv * scale;
        }
    }
    Ok(LossOutput { value: total * inv_n, grad_logits: grad })
}

/// Single-tuple soft-target objective with explicitly supplied negatives:
/// the positive is `<alpha_pos, s>` and each row of `alpha_negs` contributes
/// a negative aggregate. No negatives means a perfectly identified positive,
/// which scores zero.
pub fn theoretical_soft_target_infonce(
    scores: &[f64],
    alpha_pos: &[f64],
    alpha_negs: &Matrix,
    noise: &NoiseModel,
) -> Result<f64> {
    let k = scores.len();
    if k == 0 {
        return Err(Error::EmptyInput);
    }
    if noise.n_classes() != k {
        return Err(Error::ShapeMismatch(format!(
            "noise model has {} classes, scores have {k}",
            noise.n_classes()
        )));
    }
    if alpha_pos.len() != k {
        return Err(Error::ShapeMismatch(format!(
            "alpha_pos has {} entries, expected {k}",
            alpha_pos.len()
        )));
    }
    validate_distribution(alpha_pos, "alpha_pos")?;
    if alpha_negs.rows() > 0 && alpha_negs.cols() != k {
        return Err(Error::ShapeMismatch(format!(
            "alpha_negs have {} columns, expected {k}",
            alpha_negs.cols()
        )));
    }
    let inv_t = 1.0 / noise.temperature();
    let s: Vec<f64> = scores
        .iter()
        .zip(noise.log_noise())
        .map(|(v, ln_eta)| v * inv_t - ln_eta)
        .collect();
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("corrected scores must be finite".into()));
    }
    if alpha_negs.rows() == 0 {
        return Ok(0.0);
    }
    let pos = dot(alpha_pos, &s);
    let mut all = Vec::with_capacity(1 + alpha_negs.rows());
    all.push(pos);
    for l in 0..alpha_negs.rows() {
        validate_distribution(alpha_negs.row(l), "alpha_negs row")?;
        all.push(dot(alpha_negs.row(l), &s));
    }
    Ok(log_sum_exp(&all)? - pos)
}

/// Indices of the `k` largest raw logits per row, ties broken toward the
/// lowest index.
pub fn predict(logits: &LogitsBatch, k: usize) -> Result<Vec<Vec<usize>>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    if k > logits.k() {
        return Err(Error::InvalidArgument(format!(
            "k ({k}) exceeds the class count ({})",
            logits.k()
        )));
    }
    let mut out = Vec::with_capacity(logits.n());
    for i in 0..logits.n() {
        let row = logits.values().row(i);
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
        order.truncate(k);
        out.push(order);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RandomSource;
    use approx::assert_relative_eq;

    fn batch(rows: &[Vec<f64>]) -> LogitsBatch {
        LogitsBatch::new(Matrix::from_rows(rows).unwrap()).unwrap()
    }

    fn random_batch(n: usize, k: usize, scale: f64, rng: &mut RandomSource) -> LogitsBatch {
        let data: Vec<f64> = (0..n * k).map(|_| scale * rng.normal()).collect();
        LogitsBatch::new(Matrix::from_vec(n, k, data).unwrap()).unwrap()
    }

    fn random_targets(n: usize, k: usize, rng: &mut RandomSource) -> Matrix {
        let mut rows = Vec::with_capacity(n);
        for _ in 0..n {
            let raw: Vec<f64> = (0..k).map(|_| -(1.0 - rng.uniform()).ln()).collect();
            let sum: f64 = raw.iter().sum();
            rows.push(raw.into_iter().map(|v| v / sum).collect());
        }
        Matrix::from_rows(&rows).unwrap()
    }

    fn one_hot_targets(labels: &[usize], k: usize) -> Matrix {
        let mut m = Matrix::zeros(labels.len(), k);
        for (i, &l) in labels.iter().enumerate() {
            m.set(i, l, 1.0);
        }
        m
    }

    // Direct per-row evaluation of the soft-target objective without the
    // shared kernels: plain exp sums, no max subtraction. Only valid for
    // moderate scores, which is all the oracle needs.
    fn st_infonce_brute(s: &Matrix, targets: &Matrix) -> f64 {
        let n = s.rows();
        let mut total = 0.0;
        for i in 0..n {
            let aggs: Vec<f64> = (0..n).map(|m| dot(s.row(i), targets.row(m))).collect();
            let denom: f64 = aggs.iter().map(|a| a.exp()).sum();
            total += -(aggs[i].exp() / denom).ln();
        }
        total / n as f64
    }

    #[test]
    fn nll_matches_frozen_example() {
        let out = nll_loss(&batch(&[vec![1.0, 2.0, 3.0]]), &[0]).unwrap();
        assert_relative_eq!(out.value, 2.4076059644443803, epsilon = 1e-12);
        let g = out.grad_logits.row(0);
        assert_relative_eq!(g[0], 0.09003057317038046 - 1.0, epsilon = 1e-12);
        assert_relative_eq!(g[1], 0.24472847105479764, epsilon = 1e-12);
        assert_relative_eq!(g[2], 0.6652409557748219, epsilon = 1e-12);
    }

    #[test]
    fn nll_validates_labels() {
        let b = batch(&[vec![0.0, 1.0]]);
        assert!(nll_loss(&b, &[2]).is_err());
        assert!(nll_loss(&b, &[0, 1]).is_err());
    }

    #[test]
    fn soft_ce_uniform_targets_match_frozen_example() {
        let b = batch(&[vec![1.0, 2.0, 3.0]]);
        let t = Matrix::from_rows(&[vec![1.0 / 3.0; 3]]).unwrap();
        let out = soft_target_ce_loss(&b, &t).unwrap();
        assert_relative_eq!(out.value, 1.4076059644443803, epsilon = 1e-12);
    }

    #[test]
    fn soft_ce_with_one_hot_targets_equals_nll() {
        let mut rng = RandomSource::new(100);
        for _ in 0..20 {
            let n = 1 + rng.below(8);
            let k = 2 + rng.below(6);
            let b = random_batch(n, k, 2.0, &mut rng);
            let labels: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
            let hard = nll_loss(&b, &labels).unwrap();
            let soft = soft_target_ce_loss(&b, &one_hot_targets(&labels, k)).unwrap();
            assert!((hard.value - soft.value).abs() < 1e-12);
            for (a, g) in hard.grad_logits.data().iter().zip(soft.grad_logits.data()) {
                assert!((a - g).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn infonce_matches_frozen_example() {
        let b = batch(&[vec![0.5, -0.3], vec![0.1, 0.9]]);
        let noise = NoiseModel::uniform(2, 1.0).unwrap();
        let out = infonce_loss(&b, &[0, 1], &noise).unwrap();
        // Both rows give ln(1 + exp(-0.8)).
        assert_relative_eq!(out.value, 0.3711006659477777, epsilon = 1e-12);
    }

    #[test]
    fn infonce_symmetric_logits_cost_ln_n() {
        let b = batch(&[vec![0.7, 0.7], vec![0.7, 0.7]]);
        let noise = NoiseModel::uniform(2, 1.0).unwrap();
        let out = infonce_loss(&b, &[0, 1], &noise).unwrap();
        assert_relative_eq!(out.value, std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn infonce_single_sample_has_zero_loss_and_gradient() {
        let b = batch(&[vec![3.0, -1.0, 0.5]]);
        let noise = NoiseModel::uniform(3, 1.0).unwrap();
        let out = infonce_loss(&b, &[1], &noise).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.grad_logits.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn infonce_uniform_noise_cancels() {
        // A uniform eta shifts every corrected score equally, so the loss
        // must match a direct evaluation on raw logits.
        let mut rng = RandomSource::new(4);
        let b = random_batch(6, 4, 1.5, &mut rng);
        let labels = [0, 1, 2, 3, 1, 0];
        let noise = NoiseModel::uniform(4, 1.0).unwrap();
        let out = infonce_loss(&b, &labels, &noise).unwrap();

        let n = b.n();
        let mut expected = 0.0;
        for i in 0..n {
            let row = b.values().row(i);
            let denom: f64 = labels.iter().map(|&l| row[l].exp()).sum();
            expected += -(row[labels[i]].exp() / denom).ln();
        }
        assert_relative_eq!(out.value, expected / n as f64, epsilon = 1e-12);
    }

    #[test]
    fn soft_distribution_route_is_infonce() {
        let mut rng = RandomSource::new(5);
        let b = random_batch(5, 3, 1.0, &mut rng);
        let labels = [0, 2, 1, 1, 0];
        let noise = NoiseModel::from_probs(&[0.5, 0.3, 0.2], 1.0).unwrap();
        let a = infonce_loss(&b, &labels, &noise).unwrap();
        let c = soft_distribution_infonce_loss(&b, &labels, &noise).unwrap();
        assert_eq!(a.value, c.value);
        assert_eq!(a.grad_logits.data(), c.grad_logits.data());
    }

    #[test]
    fn soft_target_infonce_matches_brute_force() {
        let mut rng = RandomSource::new(6);
        for _ in 0..25 {
            let n = 2 + rng.below(7);
            let k = 2 + rng.below(5);
            let b = random_batch(n, k, 1.0, &mut rng);
            let targets = random_targets(n, k, &mut rng);
            let noise = NoiseModel::uniform(k, 1.0).unwrap();
            let out = soft_target_infonce_loss(&b, &targets, &noise).unwrap();
            let s = corrected_scores(&b, &noise).unwrap();
            assert!((out.value - st_infonce_brute(&s, &targets)).abs() < 1e-12);
        }
    }

    #[test]
    fn soft_target_infonce_reduces_to_infonce_on_one_hot_targets() {
        let mut rng = RandomSource::new(7);
        for _ in 0..25 {
            let n = 2 + rng.below(8);
            let k = 2 + rng.below(6);
            let b = random_batch(n, k, 2.0, &mut rng);
            let labels: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
            let probs: Vec<f64> = {
                let raw: Vec<f64> = (0..k).map(|_| 0.5 + rng.uniform()).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / s).collect()
            };
            let noise = NoiseModel::from_probs(&probs, 1.0).unwrap();
            let hard = infonce_loss(&b, &labels, &noise).unwrap();
            let soft =
                soft_target_infonce_loss(&b, &one_hot_targets(&labels, k), &noise).unwrap();
            assert!(
                (hard.value - soft.value).abs() < 1e-12,
                "{} vs {}",
                hard.value,
                soft.value
            );
            for (a, g) in hard.grad_logits.data().iter().zip(soft.grad_logits.data()) {
                assert!((a - g).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn soft_target_infonce_single_sample_needs_negatives() {
        let b = batch(&[vec![1.0, 2.0]]);
        let t = Matrix::from_rows(&[vec![0.5, 0.5]]).unwrap();
        let noise = NoiseModel::uniform(2, 1.0).unwrap();
        let err = soft_target_infonce_loss(&b, &t, &noise).unwrap_err();
        assert!(err.to_string().contains("needs at least one negative"));
    }

    #[test]
    fn extra_negatives_raise_the_loss() {
        let mut rng = RandomSource::new(8);
        let b = random_batch(4, 3, 1.0, &mut rng);
        let targets = random_targets(4, 3, &mut rng);
        let extras = random_targets(2, 3, &mut rng);
        let noise = NoiseModel::uniform(3, 1.0).unwrap();
        let base = soft_target_infonce_loss(&b, &targets, &noise).unwrap();
        let more =
            soft_target_infonce_with_extras(&b, &targets, Some(&extras), &noise).unwrap();
        assert!(more.value > base.value);
    }

    #[test]
    fn extras_alone_satisfy_the_single_sample_case() {
        let b = batch(&[vec![1.0, 2.0]]);
        let t = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let extras = Matrix::from_rows(&[vec![0.5, 0.5]]).unwrap();
        let noise = NoiseModel::uniform(2, 1.0).unwrap();
        assert!(soft_target_infonce_with_extras(&b, &t, Some(&extras), &noise).is_ok());
    }

    #[test]
    fn energy_form_agrees_with_ranking_form() {
        let mut rng = RandomSource::new(9);
        for _ in 0..25 {
            let n = 2 + rng.below(7);
            let k = 2 + rng.below(5);
            let b = random_batch(n, k, 2.0, &mut rng);
            let targets = random_targets(n, k, &mut rng);
            let noise = NoiseModel::from_probs(
                &{
                    let raw: Vec<f64> = (0..k).map(|_| 0.5 + rng.uniform()).collect();
                    let s: f64 = raw.iter().sum();
                    raw.into_iter().map(|v| v / s).collect::<Vec<f64>>()
                },
                1.0,
            )
            .unwrap();
            let rank = soft_target_infonce_loss(&b, &targets, &noise).unwrap();
            let energy = energy_ce_form(&b, &targets, &noise).unwrap();
            assert!(
                (rank.value - energy.value).abs() < 1e-9,
                "{} vs {}",
                rank.value,
                energy.value
            );
            for (a, g) in rank.grad_logits.data().iter().zip(energy.grad_logits.data()) {
                assert!((a - g).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn theoretical_loss_matches_frozen_example() {
        let noise = NoiseModel::uniform(2, 1.0).unwrap();
        let negs = Matrix::from_rows(&[vec![0.5, 0.5], vec![0.2, 0.8]]).unwrap();
        let v = theoretical_soft_target_infonce(&[0.4, -0.2], &[0.7, 0.3], &negs, &noise)
            .unwrap();
        assert_relative_eq!(v, 0.9661236502431212, epsilon = 1e-12);
    }

    #[test]
    fn theoretical_loss_without_negatives_is_zero() {
        let noise = NoiseModel::uniform(3, 1.0).unwrap();
        let negs = Matrix::zeros(0, 3);
        let v =
            theoretical_soft_target_infonce(&[1.0, -1.0, 0.0], &[0.6, 0.3, 0.1], &negs, &noise)
                .unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn all_loss_gradients_have_zero_row_sums() {
        let mut rng = RandomSource::new(10);
        let n = 5;
        let k = 4;
        let b = random_batch(n, k, 2.0, &mut rng);
        let labels: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
        let targets = random_targets(n, k, &mut rng);
        let noise = NoiseModel::uniform(k, 1.0).unwrap();

        let outputs = [
            nll_loss(&b, &labels).unwrap(),
            soft_target_ce_loss(&b, &targets).unwrap(),
            infonce_loss(&b, &labels, &noise).unwrap(),
            soft_distribution_infonce_loss(&b, &labels, &noise).unwrap(),
            soft_target_infonce_loss(&b, &targets, &noise).unwrap(),
        ];
        for out in outputs {
            for i in 0..n {
                let sum: f64 = out.grad_logits.row(i).iter().sum();
                assert!(sum.abs() < 1e-12, "row sum {sum}");
            }
        }
    }

    #[test]
    fn losses_are_shift_invariant_within_tolerance() {
        let mut rng = RandomSource::new(11);
        let n = 6;
        let k = 4;
        let b = random_batch(n, k, 1.0, &mut rng);
        let shifted = LogitsBatch::new(
            Matrix::from_vec(
                n,
                k,
                b.values().data().iter().map(|v| v + 500.0).collect(),
            )
            .unwrap(),
        )
        .unwrap();
        let labels: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
        let targets = random_targets(n, k, &mut rng);
        let noise = NoiseModel::uniform(k, 1.0).unwrap();

        let pairs = [
            (nll_loss(&b, &labels).unwrap(), nll_loss(&shifted, &labels).unwrap()),
            (
                soft_target_ce_loss(&b, &targets).unwrap(),
                soft_target_ce_loss(&shifted, &targets).unwrap(),
            ),
            (
                infonce_loss(&b, &labels, &noise).unwrap(),
                infonce_loss(&shifted, &labels, &noise).unwrap(),
            ),
            (
                soft_target_infonce_loss(&b, &targets, &noise).unwrap(),
                soft_target_infonce_loss(&shifted, &targets, &noise).unwrap(),
            ),
        ];
        for (base, moved) in pairs {
            assert!((base.value - moved.value).abs() < 1e-9);
        }
    }

    #[test]
    fn losses_stay_finite_at_large_magnitudes() {
        let b = batch(&[vec![1000.0, -1000.0, 500.0], vec![-1000.0, 1000.0, -500.0]]);
        let labels = [0, 1];
        let targets = Matrix::from_rows(&[vec![0.6, 0.2, 0.2], vec![0.1, 0.8, 0.1]]).unwrap();
        let noise = NoiseModel::uniform(3, 1.0).unwrap();

        for out in [
            nll_loss(&b, &labels).unwrap(),
            soft_target_ce_loss(&b, &targets).unwrap(),
            infonce_loss(&b, &labels, &noise).unwrap(),
            soft_target_infonce_loss(&b, &targets, &noise).unwrap(),
            energy_ce_form(&b, &targets, &noise).unwrap(),
        ] {
            assert!(out.value.is_finite());
            assert!(out.grad_logits.data().iter().all(|g| g.is_finite()));
        }
    }

    #[test]
    fn temperature_scales_corrected_scores() {
        let b = batch(&[vec![2.0, -2.0], vec![-2.0, 2.0]]);
        let labels = [0, 1];
        let half = NoiseModel::uniform(2, 0.5).unwrap();
        let unit = NoiseModel::uniform(2, 1.0).unwrap();
        let doubled = LogitsBatch::new(
            Matrix::from_vec(2, 2, b.values().data().iter().map(|v| v * 2.0).collect())
                .unwrap(),
        )
        .unwrap();
        let a = infonce_loss(&b, &labels, &half).unwrap();
        let c = infonce_loss(&doubled, &labels, &unit).unwrap();
        assert_relative_eq!(a.value, c.value, epsilon = 1e-12);
    }

    #[test]
    fn predict_breaks_ties_toward_lower_index() {
        let b = batch(&[vec![1.0, 1.0, 0.0]]);
        assert_eq!(predict(&b, 1).unwrap(), vec![vec![0]]);
        assert_eq!(predict(&b, 2).unwrap(), vec![vec![0, 1]]);
        assert!(predict(&b, 0).is_err());
        assert!(predict(&b, 4).is_err());
    }

    #[test]
    fn noise_model_constructors_validate() {
        assert!(NoiseModel::from_probs(&[0.5, 0.6], 1.0).is_err());
        assert!(NoiseModel::from_probs(&[1.0, 0.0], 1.0).is_err());
        assert!(NoiseModel::from_probs(&[0.5, 0.5], 0.0).is_err());
        let err = NoiseModel::from_empirical_labels(&[0, 0, 2], 3, 1.0).unwrap_err();
        assert!(err.to_string().contains("class 1"));

        let m = NoiseModel::from_empirical_labels(&[0, 1, 1, 0], 2, 1.0).unwrap();
        assert_relative_eq!(m.log_noise()[0], (0.5f64).ln(), epsilon = 1e-15);

        let targets = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let t = NoiseModel::from_empirical_targets(&targets, 1.0).unwrap();
        assert_relative_eq!(t.log_noise()[0], (0.5f64).ln(), epsilon = 1e-15);
    }

    #[test]
    fn empirical_marginals_from_labels_and_one_hot_targets_agree_exactly() {
        let labels = [0usize, 1, 1, 2, 0, 1];
        let targets = one_hot_targets(&labels, 3);
        let a = NoiseModel::from_empirical_labels(&labels, 3, 1.0).unwrap();
        let b = NoiseModel::from_empirical_targets(&targets, 1.0).unwrap();
        assert_eq!(a.log_noise(), b.log_noise());
    }

    #[test]
    fn loss_id_serialization_uses_short_names() {
        assert_eq!(serde_json::to_string(&LossId::StInfoNce).unwrap(), "\"st_infonce\"");
        let id: LossId = serde_json::from_str("\"soft_ce\"").unwrap();
        assert_eq!(id, LossId::SoftCe);
        assert_eq!("infonce".parse::<LossId>().unwrap(), LossId::InfoNce);
        assert!("bogus".parse::<LossId>().is_err());
    }
}
