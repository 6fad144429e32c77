//! Estimation-error, accuracy, calibration, and information-theoretic
//! verification metrics.
//!
//! Everything here is exact finite arithmetic over discrete objects: KL
//! divergences between softmax conditionals, top-k accuracy, binned
//! calibration, the smoothed-conditional entropy bound, and the recovered
//! critic of a trained contrastive model. Entropies are in nats and
//! `0 log 0 = 0` throughout.

use serde::Serialize;

use crate::losses::{predict, LogitsBatch};
use crate::models::ScoringModel;
use crate::numerics::{log_softmax, softmax, CompensatedSum, Matrix, RandomSource};
use crate::{Error, Result};

const JOINT_TOL: f64 = 1e-12;
pub const CALIBRATION_BINS: usize = 15;

/// Joint distribution over a finite Z x Y grid: nonnegative entries that sum
/// to one within 1e-12.
#[derive(Debug, Clone)]
pub struct DiscreteJoint {
    table: Matrix,
}

impl DiscreteJoint {
    pub fn new(table: Matrix) -> Result<DiscreteJoint> {
        if table.rows() == 0 || table.cols() == 0 {
            return Err(Error::EmptyInput);
        }
        if table.data().iter().any(|&p| !p.is_finite() || p < 0.0) {
            return Err(Error::InvalidArgument(
                "joint entries must be finite and nonnegative".into(),
            ));
        }
        let total: f64 = table.data().iter().sum();
        if (total - 1.0).abs() > JOINT_TOL {
            return Err(Error::InvalidArgument(format!(
                "joint must sum to 1 (got {total})"
            )));
        }
        Ok(DiscreteJoint { table })
    }

    /// Random strictly positive joint via normalized exponential draws.
    pub fn random(n_z: usize, n_y: usize, rng: &mut RandomSource) -> Result<DiscreteJoint> {
        if n_z == 0 || n_y == 0 {
            return Err(Error::EmptyInput);
        }
        let mut data: Vec<f64> = (0..n_z * n_y)
            .map(|_| -(1.0 - rng.uniform()).ln())
            .collect();
        let total: f64 = data.iter().sum();
        for v in &mut data {
            *v /= total;
        }
        // Renormalize once more so the sum is exact to the last ulp.
        let total: f64 = data.iter().sum();
        for v in &mut data {
            *v /= total;
        }
        DiscreteJoint::new(Matrix::from_vec(n_z, n_y, data)?)
    }

    /// Product joint of the given marginals.
    pub fn independent(p_z: &[f64], p_y: &[f64]) -> Result<DiscreteJoint> {
        crate::distributions::validate_distribution(p_z, "p_z")?;
        crate::distributions::validate_distribution(p_y, "p_y")?;
        let mut data = Vec::with_capacity(p_z.len() * p_y.len());
        for &z in p_z {
            for &y in p_y {
                data.push(z * y);
            }
        }
        DiscreteJoint::new(Matrix::from_vec(p_z.len(), p_y.len(), data)?)
    }

    pub fn table(&self) -> &Matrix {
        &self.table
    }

    pub fn marginal_z(&self) -> Vec<f64> {
        (0..self.table.rows())
            .map(|z| self.table.row(z).iter().sum())
            .collect()
    }

    pub fn marginal_y(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.table.cols()];
        for z in 0..self.table.rows() {
            for (acc, v) in out.iter_mut().zip(self.table.row(z)) {
                *acc += v;
            }
        }
        out
    }
}

fn xlogx(p: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        p * p.ln()
    }
}

/// Mutual information, conditional entropy, and the smoothed-conditional
/// entropy behind the bound `I(Z;Y) + H(Y|Z) - H_eps(Y|Z) >= 0`.
#[derive(Debug, Clone, Serialize)]
pub struct MiBoundAudit {
    pub epsilon: f64,
    pub mi: f64,
    pub h_cond: f64,
    pub h_eps: f64,
    pub lhs: f64,
    pub holds_nonneg: bool,
}

/// Exact audit of the smoothing bound at one epsilon.
///
/// `H_eps(Y|Z)` is the conditional entropy of the smoothed conditional
/// `(1 - eps) p(y|z) + eps p(y)` under the matching smoothed joint, whose
/// Z-marginal is unchanged. At eps = 0 the lhs is the mutual information; at
/// eps = 1 the smoothed conditional is the marginal and the lhs vanishes.
pub fn mi_bound_audit(joint: &DiscreteJoint, epsilon: f64) -> Result<MiBoundAudit> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must lie in [0, 1] (got {epsilon})"
        )));
    }
    let p_z = joint.marginal_z();
    let p_y = joint.marginal_y();
    let table = joint.table();

    let h_y: f64 = -p_y.iter().map(|&p| xlogx(p)).sum::<f64>();
    let mut h_cond = 0.0;
    let mut h_eps = 0.0;
    for (z, &pz) in p_z.iter().enumerate() {
        if pz == 0.0 {
            continue;
        }
        for (y, &pzy) in table.row(z).iter().enumerate() {
            let cond = pzy / pz;
            h_cond -= pz * xlogx(cond);
            let smoothed = (1.0 - epsilon) * cond + epsilon * p_y[y];
            h_eps -= pz * xlogx(smoothed);
        }
    }
    let mi = h_y - h_cond;
    let lhs = mi + h_cond - h_eps;
    Ok(MiBoundAudit {
        epsilon,
        mi,
        h_cond,
        h_eps,
        lhs,
        holds_nonneg: lhs >= -JOINT_TOL,
    })
}

/// Mean forward KL from the true softmax conditional to the model's, over
/// the probe rows. Both sides evaluated in log space.
pub fn kl_estimation_error(
    theta_true: &Matrix,
    model: &ScoringModel,
    probes: &Matrix,
) -> Result<f64> {
    if theta_true.rows() != model.n_classes() || theta_true.cols() != model.dim() {
        return Err(Error::ShapeMismatch(format!(
            "true parameters are {}x{}, model is {}x{}",
            theta_true.rows(),
            theta_true.cols(),
            model.n_classes(),
            model.dim()
        )));
    }
    if probes.rows() == 0 {
        return Err(Error::EmptyInput);
    }
    let true_logits = probes.mul_transpose(theta_true)?;
    let model_logits = model.forward_logits(probes)?;
    let mut total = 0.0;
    for n in 0..probes.rows() {
        let log_p = log_softmax(true_logits.row(n))?;
        let log_q = log_softmax(model_logits.values().row(n))?;
        let mut kl = 0.0;
        for (lp, lq) in log_p.iter().zip(&log_q) {
            kl += lp.exp() * (lp - lq);
        }
        total += kl;
    }
    Ok(total / probes.rows() as f64)
}

/// Fraction of rows whose label appears in the top-k logits.
pub fn topk_accuracy(logits: &LogitsBatch, labels: &[usize], k: usize) -> Result<f64> {
    if labels.len() != logits.n() {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for a batch of {}",
            labels.len(),
            logits.n()
        )));
    }
    let ranked = predict(logits, k)?;
    let hits = ranked
        .iter()
        .zip(labels)
        .filter(|(top, label)| top.contains(label))
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Reliability summary over equal-width confidence bins.
#[derive(Debug, Clone, Serialize)]
pub struct CalibrationReport {
    pub bin_edges: Vec<f64>,
    pub bin_confidence: Vec<f64>,
    pub bin_accuracy: Vec<f64>,
    pub bin_counts: Vec<usize>,
    pub ece: f64,
}

/// Expected calibration error with 15 equal-width bins on [0, 1].
///
/// Confidence is the row maximum of `probs`; empty bins report zero
/// confidence and accuracy and contribute nothing to the ECE.
pub fn calibration(probs: &Matrix, labels: &[usize]) -> Result<CalibrationReport> {
    let n = probs.rows();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {} probability rows",
            labels.len(),
            n
        )));
    }
    for i in 0..n {
        crate::distributions::validate_distribution(probs.row(i), "probability row")?;
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= probs.cols()) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {} classes",
            probs.cols()
        )));
    }

    let bins = CALIBRATION_BINS;
    let mut conf_sum = vec![CompensatedSum::default(); bins];
    let mut hits = vec![0usize; bins];
    let mut counts = vec![0usize; bins];
    for (i, &label) in labels.iter().enumerate() {
        let row = probs.row(i);
        let mut best = 0usize;
        for (j, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = j;
            }
        }
        let confidence = row[best];
        let bin = ((confidence * bins as f64) as usize).min(bins - 1);
        conf_sum[bin].add(confidence);
        hits[bin] += (best == label) as usize;
        counts[bin] += 1;
    }

    // Per bin, (count/n)|acc - conf| equals |hits - conf_sum|/n with the
    // division deferred, which keeps integer hit counts exact instead of
    // passing them through two quotients.
    let mut ece_scaled = 0.0;
    let mut bin_confidence = vec![0.0; bins];
    let mut bin_accuracy = vec![0.0; bins];
    for b in 0..bins {
        if counts[b] == 0 {
            continue;
        }
        let conf = conf_sum[b].value();
        bin_confidence[b] = conf / counts[b] as f64;
        bin_accuracy[b] = hits[b] as f64 / counts[b] as f64;
        ece_scaled += (hits[b] as f64 - conf).abs();
    }
    let ece = ece_scaled / n as f64;
    let bin_edges = (0..=bins).map(|b| b as f64 / bins as f64).collect();
    Ok(CalibrationReport {
        bin_edges,
        bin_confidence,
        bin_accuracy,
        bin_counts: counts,
        ece,
    })
}

impl CalibrationReport {
    /// Reliability-diagram rows: bin_lo, bin_hi, confidence, accuracy, count.
    pub fn write_reliability_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path).map_err(Error::from)?;
        writer.write_record(["bin_lo", "bin_hi", "confidence", "accuracy", "count"])?;
        for b in 0..self.bin_counts.len() {
            writer.write_record(&[
                self.bin_edges[b].to_string(),
                self.bin_edges[b + 1].to_string(),
                self.bin_confidence[b].to_string(),
                self.bin_accuracy[b].to_string(),
                self.bin_counts[b].to_string(),
            ])?;
        }
        writer.flush()?;
        Ok(())
    }
}

/// Maximum deviation between the conditional recovered from a trained
/// contrastive model and the smoothed conditional it should converge to.
///
/// The input space is enumerated as one-hot rows, one per model input
/// dimension, so `true_cond` must have one row per dimension. At the optimum
/// the critic satisfies `exp(x . y_k / T) = c(x) p_eps(k|x)` when the
/// training noise equals the smoothing distribution, so the softmax of the
/// raw logits recovers `(1 - eps) p(k|x) + eps xi(k)` per input.
pub fn critic_recovery_audit(
    model: &ScoringModel,
    true_cond: &Matrix,
    xi: &[f64],
    epsilon: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must lie in [0, 1] (got {epsilon})"
        )));
    }
    if true_cond.rows() != model.dim() || true_cond.cols() != model.n_classes() {
        return Err(Error::ShapeMismatch(format!(
            "conditional table is {}x{}, the one-hot enumeration needs {}x{}",
            true_cond.rows(),
            true_cond.cols(),
            model.dim(),
            model.n_classes()
        )));
    }
    let mut inputs = Matrix::zeros(model.dim(), model.dim());
    for x in 0..model.dim() {
        inputs.set(x, x, 1.0);
    }
    let inputs = &inputs;
    if xi.len() != model.n_classes() {
        return Err(Error::ShapeMismatch(format!(
            "xi has {} entries for {} classes",
            xi.len(),
            model.n_classes()
        )));
    }
    crate::distributions::validate_distribution(xi, "xi")?;
    let logits = model.forward_logits(inputs)?;
    let mut max_dev: f64 = 0.0;
    for x in 0..inputs.rows() {
        crate::distributions::validate_distribution(true_cond.row(x), "conditional row")?;
        let recovered = softmax(logits.values().row(x))?;
        for (k, r) in recovered.iter().enumerate() {
            let target = (1.0 - epsilon) * true_cond.get(x, k) + epsilon * xi[k];
            max_dev = max_dev.max((r - target).abs());
        }
    }
    Ok(max_dev)
}
