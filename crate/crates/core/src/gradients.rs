//! Analytic gradients through the scoring head and a finite-difference
//! harness that validates them.
//!
//! Class scores are produced from input embeddings Z (N x d) and class
//! embeddings Y (K x d) by either a dot product or cosine similarity. The
//! losses differentiate with respect to the score matrix; this module chains
//! those gradients back to Z and Y and cross-checks the result against
//! central differences on every coordinate.

use serde::{Deserialize, Serialize};

use crate::losses::{
    infonce_loss, nll_loss, soft_target_ce_loss, soft_target_infonce_loss, LogitsBatch, LossId,
    LossOutput, NoiseModel,
};
use crate::numerics::{dot, softmax, Matrix, RandomSource};
use crate::{Error, Result};

/// How input and class embeddings are combined into a class score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scoring {
    Dot,
    Cosine,
}

impl Scoring {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scoring::Dot => "dot",
            Scoring::Cosine => "cosine",
        }
    }
}

/// Targets carried by a [`LossInstance`]: hard labels for the label losses,
/// probability rows for the soft-target losses.
#[derive(Debug, Clone)]
pub enum InstanceTargets {
    Hard(Vec<usize>),
    Soft(Matrix),
}

/// A fully specified differentiable problem: embeddings, targets, scoring
/// rule, noise model, and loss. Fields are public so the finite-difference
/// harness can perturb individual coordinates.
#[derive(Debug, Clone)]
pub struct LossInstance {
    pub inputs: Matrix,
    pub embeddings: Matrix,
    pub targets: InstanceTargets,
    pub scoring: Scoring,
    pub noise: NoiseModel,
    pub loss: LossId,
}

/// Gradient-check summary over all probed coordinates.
#[derive(Debug, Clone, Serialize)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub n_probes: usize,
}

impl GradReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Score matrix S (N x K) under the chosen rule. Cosine scoring requires
/// every row of both matrices to have nonzero norm.
pub fn score_matrix(inputs: &Matrix, embeddings: &Matrix, scoring: Scoring) -> Result<Matrix> {
    if inputs.cols() != embeddings.cols() {
        return Err(Error::ShapeMismatch(format!(
            "inputs have dimension {}, embeddings {}",
            inputs.cols(),
            embeddings.cols()
        )));
    }
    match scoring {
        Scoring::Dot => inputs.mul_transpose(embeddings),
        Scoring::Cosine => {
            let mut s = Matrix::zeros(inputs.rows(), embeddings.rows());
            let emb_norms: Vec<f64> = (0..embeddings.rows())
                .map(|k| norm(embeddings.row(k)))
                .collect();
            if emb_norms.iter().any(|&n| n == 0.0) {
                return Err(Error::InvalidArgument(
                    "cosine scoring undefined at origin".into(),
                ));
            }
            for n in 0..inputs.rows() {
                let z = inputs.row(n);
                let zn = norm(z);
                if zn == 0.0 {
                    return Err(Error::InvalidArgument(
                        "cosine scoring undefined at origin".into(),
                    ));
                }
                for k in 0..embeddings.rows() {
                    let v = dot(z, embeddings.row(k)) / (zn * emb_norms[k]);
                    s.set(n, k, v);
                }
            }
            Ok(s)
        }
    }
}

fn loss_output(instance: &LossInstance) -> Result<LossOutput> {
    let scores = score_matrix(&instance.inputs, &instance.embeddings, instance.scoring)?;
    let logits = LogitsBatch::new(scores)?;
    match (&instance.loss, &instance.targets) {
        (LossId::Nll, InstanceTargets::Hard(labels)) => nll_loss(&logits, labels),
        (LossId::SoftCe, InstanceTargets::Soft(t)) => soft_target_ce_loss(&logits, t),
        (LossId::InfoNce | LossId::SdInfoNce, InstanceTargets::Hard(labels)) => {
            infonce_loss(&logits, labels, &instance.noise)
        }
        (LossId::StInfoNce, InstanceTargets::Soft(t)) => {
            soft_target_infonce_loss(&logits, t, &instance.noise)
        }
        (id, InstanceTargets::Hard(_)) => Err(Error::InvalidArgument(format!(
            "loss {id} requires soft targets"
        ))),
        (id, InstanceTargets::Soft(_)) => Err(Error::InvalidArgument(format!(
            "loss {id} requires hard labels"
        ))),
    }
}

/// Scalar loss of the instance.
pub fn loss_value(instance: &LossInstance) -> Result<f64> {
    Ok(loss_output(instance)?.value)
}

/// Analytic gradients with respect to the inputs Z and the embeddings Y.
///
/// With G the loss gradient on the score matrix, dot scoring chains as
/// `dZ = G Y` and `dY = G^T Z`. Cosine scoring projects out the radial
/// component, leaving each input gradient orthogonal to its input:
///
/// ```text
/// dz_n = (1 / |z_n|) sum_k G_nk (y_hat_k - S_nk z_hat_n)
/// dy_k = (1 / |y_k|) sum_n G_nk (z_hat_n - S_nk y_hat_k)
/// ```
pub fn loss_grads(instance: &LossInstance) -> Result<(Matrix, Matrix)> {
    let g = loss_output(instance)?.grad_logits;
    let z = &instance.inputs;
    let y = &instance.embeddings;
    let (n_rows, k_rows, dim) = (z.rows(), y.rows(), z.cols());
    let mut grad_z = Matrix::zeros(n_rows, dim);
    let mut grad_y = Matrix::zeros(k_rows, dim);

    match instance.scoring {
        Scoring::Dot => {
            for n in 0..n_rows {
                let gz = grad_z.row_mut(n);
                for k in 0..k_rows {
                    let w = g.get(n, k);
                    for (dst, yv) in gz.iter_mut().zip(y.row(k)) {
                        *dst += w * yv;
                    }
                }
            }
            for k in 0..k_rows {
                let gy = grad_y.row_mut(k);
                for n in 0..n_rows {
                    let w = g.get(n, k);
                    for (dst, zv) in gy.iter_mut().zip(z.row(n)) {
                        *dst += w * zv;
                    }
                }
            }
        }
        Scoring::Cosine => {
            let s = score_matrix(z, y, Scoring::Cosine)?;
            let z_norms: Vec<f64> = (0..n_rows).map(|n| norm(z.row(n))).collect();
            let y_norms: Vec<f64> = (0..k_rows).map(|k| norm(y.row(k))).collect();
            for n in 0..n_rows {
                let zn = z_norms[n];
                let gz = grad_z.row_mut(n);
                let mut radial = 0.0;
                for k in 0..k_rows {
                    let w = g.get(n, k);
                    radial += w * s.get(n, k);
                    let yn = y_norms[k];
                    for (dst, yv) in gz.iter_mut().zip(y.row(k)) {
                        *dst += w * yv / yn;
                    }
                }
                for (dst, zv) in gz.iter_mut().zip(z.row(n)) {
                    *dst -= radial * zv / zn;
                }
                for v in gz.iter_mut() {
                    *v /= zn;
                }
            }
            for k in 0..k_rows {
                let yn = y_norms[k];
                let gy = grad_y.row_mut(k);
                let mut radial = 0.0;
                for n in 0..n_rows {
                    let w = g.get(n, k);
                    radial += w * s.get(n, k);
                    let zn = z_norms[n];
                    for (dst, zv) in gy.iter_mut().zip(z.row(n)) {
                        *dst += w * zv / zn;
                    }
                }
                for (dst, yv) in gy.iter_mut().zip(y.row(k)) {
                    *dst -= radial * yv / yn;
                }
                for v in gy.iter_mut() {
                    *v /= yn;
                }
            }
        }
    }
    Ok((grad_z, grad_y))
}

/// Random unit direction scaled to a norm in [0.8, 1.6]. Bounded norms keep
/// dot-product logits within a few units (softmax weights stay above ~1e-3)
/// and keep the cosine normalization curvature moderate; either extreme
/// produces gradient coordinates too small or too rough for finite
/// differences to resolve.
fn bounded_row(dim: usize, rng: &mut RandomSource) -> Vec<f64> {
    loop {
        let raw: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-6 {
            let radius = 0.8 + 0.8 * rng.uniform();
            return raw.into_iter().map(|v| v * radius / norm).collect();
        }
    }
}

impl LossInstance {
    /// Random instance with norm-bounded embeddings, random targets of the
    /// kind the loss expects, a random strictly positive noise marginal, and
    /// a temperature in [0.75, 1.5].
    pub fn random(
        loss: LossId,
        scoring: Scoring,
        n: usize,
        k: usize,
        dim: usize,
        rng: &mut RandomSource,
    ) -> Result<LossInstance> {
        if n == 0 || k == 0 || dim == 0 {
            return Err(Error::EmptyInput);
        }
        let inputs = Matrix::from_rows(
            &(0..n).map(|_| bounded_row(dim, rng)).collect::<Vec<_>>(),
        )?;
        let embeddings = Matrix::from_rows(
            &(0..k).map(|_| bounded_row(dim, rng)).collect::<Vec<_>>(),
        )?;
        let targets = if loss.uses_soft_targets() {
            let mut rows = Vec::with_capacity(n);
            for _ in 0..n {
                let raw: Vec<f64> = (0..k).map(|_| -(1.0 - rng.uniform()).ln()).collect();
                let sum: f64 = raw.iter().sum();
                rows.push(raw.into_iter().map(|v| v / sum).collect());
            }
            InstanceTargets::Soft(Matrix::from_rows(&rows)?)
        } else {
            InstanceTargets::Hard((0..n).map(|_| rng.below(k)).collect())
        };
        let probs: Vec<f64> = {
            let raw: Vec<f64> = (0..k).map(|_| 0.5 + rng.uniform()).collect();
            let sum: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / sum).collect()
        };
        let noise = NoiseModel::from_probs(&probs, 0.75 + 0.75 * rng.uniform())?;
        Ok(LossInstance {
            inputs,
            embeddings,
            targets,
            scoring,
            noise,
            loss,
        })
    }
}

fn fd_probe(
    instance: &mut LossInstance,
    analytic: &[(usize, usize, f64, bool)],
    step: f64,
) -> Result<GradReport> {
    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    for &(r, c, grad, is_input) in analytic {
        let original = if is_input {
            instance.inputs.get(r, c)
        } else {
            instance.embeddings.get(r, c)
        };
        let set = |v: f64, inst: &mut LossInstance| {
            if is_input {
                inst.inputs.set(r, c, v);
            } else {
                inst.embeddings.set(r, c, v);
            }
        };
        set(original + step, instance);
        let hi = loss_value(instance)?;
        set(original - step, instance);
        let lo = loss_value(instance)?;
        set(original + 2.0 * step, instance);
        let hi2 = loss_value(instance)?;
        set(original - 2.0 * step, instance);
        let lo2 = loss_value(instance)?;
        set(original, instance);
        // Fourth-order central stencil: truncation O(step^4) instead of
        // O(step^2), so roundoff in the loss evaluations dominates the error.
        let numeric = (8.0 * (hi - lo) - (hi2 - lo2)) / (12.0 * step);
        let abs = (grad - numeric).abs();
        let rel = abs / grad.abs().max(numeric.abs()).max(1e-8);
        max_abs = max_abs.max(abs);
        max_rel = max_rel.max(rel);
    }
    Ok(GradReport {
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        n_probes: analytic.len(),
    })
}

/// Compare supplied gradients against central differences on every
/// coordinate of the inputs and embeddings.
pub fn finite_difference_check_against(
    instance: &LossInstance,
    step: f64,
    grad_inputs: &Matrix,
    grad_embeddings: &Matrix,
) -> Result<GradReport> {
    if !step.is_finite() || !(1e-7..=1e-3).contains(&step) {
        return Err(Error::InvalidArgument(format!(
            "step must lie in [1e-7, 1e-3] (got {step})"
        )));
    }
    if grad_inputs.rows() != instance.inputs.rows()
        || grad_inputs.cols() != instance.inputs.cols()
        || grad_embeddings.rows() != instance.embeddings.rows()
        || grad_embeddings.cols() != instance.embeddings.cols()
    {
        return Err(Error::ShapeMismatch(
            "gradient shapes must match the instance".into(),
        ));
    }
    let mut probes = Vec::with_capacity(
        grad_inputs.rows() * grad_inputs.cols() + grad_embeddings.rows() * grad_embeddings.cols(),
    );
    for r in 0..grad_inputs.rows() {
        for c in 0..grad_inputs.cols() {
            probes.push((r, c, grad_inputs.get(r, c), true));
        }
    }
    for r in 0..grad_embeddings.rows() {
        for c in 0..grad_embeddings.cols() {
            probes.push((r, c, grad_embeddings.get(r, c), false));
        }
    }
    let mut work = instance.clone();
    fd_probe(&mut work, &probes, step)
}

/// Check the analytic gradients of the instance itself.
pub fn finite_difference_check(instance: &LossInstance, step: f64) -> Result<GradReport> {
    let (gz, gy) = loss_grads(instance)?;
    finite_difference_check_against(instance, step, &gz, &gy)
}

/// Gradients of the single-tuple soft-target objective with respect to one
/// input embedding `z` and the class embeddings `Y`.
///
/// Row 0 of `targets` is the positive; the remaining rows are negatives.
/// With `s_k` the corrected score of class k, aggregates `a_l = <t_l, s>`,
/// and C the softmax over aggregates, the loss is `-log C_0` and the score
/// gradient is `g_k = sum_l (C_l - [l = 0]) t_lk / T`. Dot scoring chains
/// directly; cosine scoring applies the same radial projection as
/// [`loss_grads`], so `grad_z` is orthogonal to `z`.
pub fn grad_wrt_embeddings(
    z: &[f64],
    y: &Matrix,
    targets: &Matrix,
    scoring: Scoring,
    noise: &NoiseModel,
) -> Result<(Vec<f64>, Matrix)> {
    let (k, dim) = (y.rows(), y.cols());
    if z.len() != dim {
        return Err(Error::ShapeMismatch(format!(
            "input has dimension {}, embeddings {dim}",
            z.len()
        )));
    }
    if targets.cols() != k || noise.n_classes() != k {
        return Err(Error::ShapeMismatch(
            "targets and noise must cover every class".into(),
        ));
    }
    if targets.rows() < 2 {
        return Err(Error::InvalidArgument(
            "soft target InfoNCE needs at least one negative".into(),
        ));
    }
    let z_matrix = Matrix::from_rows(&[z.to_vec()])?;
    let raw = score_matrix(&z_matrix, y, scoring)?;
    let inv_t = 1.0 / noise.temperature();
    let s: Vec<f64> = raw
        .row(0)
        .iter()
        .zip(noise.log_noise())
        .map(|(v, ln_eta)| v * inv_t - ln_eta)
        .collect();

    let aggs: Vec<f64> = (0..targets.rows())
        .map(|l| dot(targets.row(l), &s))
        .collect();
    let c = softmax(&aggs)?;
    let mut g = vec![0.0; k];
    for (l, cl) in c.iter().enumerate() {
        let coeff = (cl - if l == 0 { 1.0 } else { 0.0 }) * inv_t;
        for (gk, t) in g.iter_mut().zip(targets.row(l)) {
            *gk += coeff * t;
        }
    }

    let mut grad_z = vec![0.0; dim];
    let mut grad_y = Matrix::zeros(k, dim);
    match scoring {
        Scoring::Dot => {
            for (idx, gk) in g.iter().enumerate() {
                for ((dz, dy), (zv, yv)) in grad_z
                    .iter_mut()
                    .zip(grad_y.row_mut(idx))
                    .zip(z.iter().zip(y.row(idx)))
                {
                    *dz += gk * yv;
                    *dy = gk * zv;
                }
            }
        }
        Scoring::Cosine => {
            let zn = norm(z);
            for (idx, gk) in g.iter().enumerate() {
                let yrow = y.row(idx);
                let yn = norm(yrow);
                let r = raw.get(0, idx);
                for ((dz, dy), (zv, yv)) in grad_z
                    .iter_mut()
                    .zip(grad_y.row_mut(idx))
                    .zip(z.iter().zip(yrow))
                {
                    *dz += gk * (yv / yn - r * zv / zn) / zn;
                    *dy = gk * (zv / zn - r * yv / yn) / yn;
                }
            }
        }
    }
    Ok((grad_z, grad_y))
}

/// Gradient magnitude on class `j`'s score for one scored tuple, in the form
/// that exposes weak-target starvation: with `alpha` the positive target
/// (row 0 of `targets`) and C the softmax over aggregate scores,
///
/// ```text
/// m_j = alpha_j * | -1 + (sum_l targets_lj C_l) / alpha_j |
/// ```
///
/// which is zero whenever the positive puts no mass on class `j`, no matter
/// how the negatives weight it. Scores are `dot(z, y_k) / T - log eta_k`.
pub fn score_gradient_magnitude(
    z: &[f64],
    y: &Matrix,
    targets: &Matrix,
    j: usize,
    noise: &NoiseModel,
) -> Result<f64> {
    let k = y.rows();
    if z.len() != y.cols() {
        return Err(Error::ShapeMismatch(format!(
            "input has dimension {}, embeddings {}",
            z.len(),
            y.cols()
        )));
    }
    if targets.cols() != k || noise.n_classes() != k {
        return Err(Error::ShapeMismatch(
            "targets and noise must cover every class".into(),
        ));
    }
    if targets.rows() < 2 {
        return Err(Error::InvalidArgument(
            "soft target InfoNCE needs at least one negative".into(),
        ));
    }
    if j >= k {
        return Err(Error::InvalidArgument(format!(
            "class {j} out of range for {k} classes"
        )));
    }
    let inv_t = 1.0 / noise.temperature();
    let s: Vec<f64> = (0..k)
        .map(|c| dot(z, y.row(c)) * inv_t - noise.log_noise()[c])
        .collect();
    let alpha_j = targets.get(0, j);
    if alpha_j == 0.0 {
        return Ok(0.0);
    }
    let aggs: Vec<f64> = (0..targets.rows())
        .map(|l| dot(targets.row(l), &s))
        .collect();
    let c = softmax(&aggs)?;
    let weighted: f64 = (0..targets.rows()).map(|l| targets.get(l, j) * c[l]).sum();
    Ok(alpha_j * (-1.0 + weighted / alpha_j).abs())
}
