//! Target distributions and synthetic benchmark data.
//!
//! Covers the soft-target constructions (label smoothing, mixup), the
//! continuous categorical distribution over the probability simplex together
//! with its tuple posterior, and the Gaussian-mixture benchmark used to
//! compare the losses: modes on the unit sphere with a controllable pairwise
//! angle, a small unique point set resampled with replacement, and labels
//! drawn from the softmax of mode scores.

use serde::{Deserialize, Serialize};

use crate::numerics::{dot, softmax, Matrix, RandomSource};
use crate::{Error, Result};

/// Tolerance for "sums to one" checks on probability vectors.
pub(crate) const DISTRIBUTION_TOL: f64 = 1e-9;

/// Rejection sampling over the simplex degrades quickly with dimension.
const MAX_CC_SAMPLE_CLASSES: usize = 16;

pub(crate) fn validate_distribution(probs: &[f64], what: &str) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::EmptyInput);
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "{what} must be nonnegative and finite"
        )));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > DISTRIBUTION_TOL {
        return Err(Error::InvalidArgument(format!(
            "{what} must sum to 1 (got {sum})"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Soft targets
// ---------------------------------------------------------------------------

/// A probability vector over classes: nonnegative entries summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftTarget(Vec<f64>);

impl SoftTarget {
    pub fn new(probs: Vec<f64>) -> Result<SoftTarget> {
        validate_distribution(&probs, "soft target")?;
        Ok(SoftTarget(probs))
    }

    pub fn one_hot(k: usize, n_classes: usize) -> Result<SoftTarget> {
        if k >= n_classes {
            return Err(Error::InvalidArgument(format!(
                "class index {k} out of range for {n_classes} classes"
            )));
        }
        let mut probs = vec![0.0; n_classes];
        probs[k] = 1.0;
        Ok(SoftTarget(probs))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Smooths a one-hot label: `(1 - epsilon) * onehot(k) + epsilon * xi`.
/// `xi = None` means the uniform distribution.
///
/// ```
/// use softnce::distributions::label_smooth;
/// let t = label_smooth(0, 3, 0.1, None).unwrap();
/// assert!((t.as_slice()[0] - 0.9333333333333333).abs() < 1e-12);
/// ```
pub fn label_smooth(
    k: usize,
    n_classes: usize,
    epsilon: f64,
    xi: Option<&[f64]>,
) -> Result<SoftTarget> {
    if k >= n_classes {
        return Err(Error::InvalidArgument(format!(
            "class index {k} out of range for {n_classes} classes"
        )));
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must lie in [0, 1] (got {epsilon})"
        )));
    }
    let uniform;
    let noise = match xi {
        Some(xi) => {
            if xi.len() != n_classes {
                return Err(Error::ShapeMismatch(format!(
                    "xi has {} entries, expected {n_classes}",
                    xi.len()
                )));
            }
            validate_distribution(xi, "xi")?;
            xi
        }
        None => {
            uniform = vec![1.0 / n_classes as f64; n_classes];
            &uniform
        }
    };
    let probs = (0..n_classes)
        .map(|i| {
            let hard = if i == k { 1.0 - epsilon } else { 0.0 };
            hard + epsilon * noise[i]
        })
        .collect();
    SoftTarget::new(probs)
}

/// Blends two targets: `lam * a + (1 - lam) * b`.
pub fn mixup_targets(a: &SoftTarget, b: &SoftTarget, lam: f64) -> Result<SoftTarget> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "targets have different lengths: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if !(0.0..=1.0).contains(&lam) {
        return Err(Error::InvalidArgument(format!(
            "lam must lie in [0, 1] (got {lam})"
        )));
    }
    let probs = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| lam * x + (1.0 - lam) * y)
        .collect();
    SoftTarget::new(probs)
}

// ---------------------------------------------------------------------------
// Continuous categorical
// ---------------------------------------------------------------------------

/// Parameters of a continuous categorical distribution on the simplex:
/// density proportional to `prod_i lambda_i^{alpha_i}`.
#[derive(Debug, Clone)]
pub struct CcParams {
    lambda: Vec<f64>,
}

impl CcParams {
    pub fn new(lambda: Vec<f64>) -> Result<CcParams> {
        if lambda.len() < 2 {
            return Err(Error::InvalidArgument(
                "continuous categorical needs at least 2 classes".into(),
            ));
        }
        if lambda.iter().any(|l| !l.is_finite() || *l <= 0.0) {
            return Err(Error::InvalidArgument(
                "lambda entries must be strictly positive".into(),
            ));
        }
        Ok(CcParams { lambda })
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    pub fn n_classes(&self) -> usize {
        self.lambda.len()
    }
}

fn validate_simplex_point(alpha: &[f64], k: usize) -> Result<()> {
    if alpha.len() != k {
        return Err(Error::ShapeMismatch(format!(
            "alpha has {} entries, expected {k}",
            alpha.len()
        )));
    }
    validate_distribution(alpha, "alpha")
}

/// Unnormalized log-density of the continuous categorical:
/// `sum_i alpha_i * ln(lambda_i)`.
pub fn cc_log_density_unnorm(alpha: &[f64], params: &CcParams) -> Result<f64> {
    validate_simplex_point(alpha, params.n_classes())?;
    Ok(alpha
        .iter()
        .zip(params.lambda())
        .map(|(a, l)| a * l.ln())
        .sum())
}

/// Draws one point from the continuous categorical by vertex-bound rejection:
/// propose uniformly on the simplex, accept with probability
/// `prod_i lambda_i^{alpha_i} / max_j lambda_j`.
pub fn cc_sample(params: &CcParams, rng: &mut RandomSource) -> Result<Vec<f64>> {
    let k = params.n_classes();
    if k > MAX_CC_SAMPLE_CLASSES {
        return Err(Error::InvalidArgument(format!(
            "CC sampling supported for small K only (K <= {MAX_CC_SAMPLE_CLASSES}, got {k})"
        )));
    }
    let log_bound = params
        .lambda()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
        .ln();
    const MAX_ATTEMPTS: usize = 1_000_000;
    for _ in 0..MAX_ATTEMPTS {
        // Normalized unit exponentials are uniform on the simplex.
        let mut alpha: Vec<f64> = (0..k).map(|_| -(1.0 - rng.uniform()).ln()).collect();
        let total: f64 = alpha.iter().sum();
        for a in &mut alpha {
            *a /= total;
        }
        let log_density: f64 = alpha
            .iter()
            .zip(params.lambda())
            .map(|(a, l)| a * l.ln())
            .sum();
        if rng.uniform().ln() < log_density - log_bound {
            return Ok(alpha);
        }
    }
    Err(Error::NumericFailure(
        "CC rejection sampling exceeded the attempt budget".into(),
    ))
}

/// Posterior probability that each tuple row is the one drawn from the
/// conditional rather than the noise: softmax over rows of
/// `sum_i alpha_{l,i} * (ln p_i - ln eta_i)`, computed in log space.
pub fn cc_posterior(tuple: &Matrix, p_cond: &[f64], eta: &[f64]) -> Result<Vec<f64>> {
    let k = tuple.cols();
    if tuple.rows() == 0 {
        return Err(Error::EmptyInput);
    }
    if p_cond.len() != k || eta.len() != k {
        return Err(Error::ShapeMismatch(format!(
            "expected {k}-class distributions, got p: {}, eta: {}",
            p_cond.len(),
            eta.len()
        )));
    }
    if p_cond.iter().chain(eta).any(|v| !v.is_finite() || *v <= 0.0) {
        return Err(Error::InvalidArgument(
            "p_cond and eta must be strictly positive".into(),
        ));
    }
    for l in 0..tuple.rows() {
        validate_distribution(tuple.row(l), "tuple row")?;
    }
    let log_ratio: Vec<f64> = p_cond
        .iter()
        .zip(eta)
        .map(|(p, e)| p.ln() - e.ln())
        .collect();
    let logits: Vec<f64> = (0..tuple.rows())
        .map(|l| dot(tuple.row(l), &log_ratio))
        .collect();
    softmax(&logits)
}

/// Draws a hard label from the smoothed distribution
/// `(1 - epsilon) * onehot(k_true) + epsilon * xi`: keeps `k_true` with
/// probability `1 - epsilon`, otherwise draws from `xi`.
///
/// At `epsilon == 0` the true label is returned without consuming any
/// randomness, so a training run with smoothing disabled draws exactly the
/// same stream as one that never calls this.
pub fn sample_soft_distribution_label(
    k_true: usize,
    epsilon: f64,
    xi: &[f64],
    rng: &mut RandomSource,
) -> Result<usize> {
    validate_distribution(xi, "xi")?;
    if k_true >= xi.len() {
        return Err(Error::InvalidArgument(format!(
            "class index {k_true} out of range for {} classes",
            xi.len()
        )));
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must lie in [0, 1] (got {epsilon})"
        )));
    }
    if epsilon == 0.0 {
        return Ok(k_true);
    }
    if rng.uniform() < 1.0 - epsilon {
        Ok(k_true)
    } else {
        rng.categorical(xi)
    }
}

// ---------------------------------------------------------------------------
// GMM benchmark
// ---------------------------------------------------------------------------

/// Geometry of the benchmark mixture: `n_modes` unit directions in `dim`
/// dimensions whose pairwise alignment with the first mode is controlled by
/// `alignment_percent`, each scaled by `mean_scale` to form component means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmSpec {
    pub n_modes: usize,
    pub dim: usize,
    pub alignment_percent: f64,
    pub mean_scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixture_weights: Option<Vec<f64>>,
}

impl GmmSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_modes == 0 {
            return Err(Error::InvalidArgument("n_modes must be positive".into()));
        }
        if self.dim < self.n_modes {
            return Err(Error::InvalidArgument(format!(
                "dim ({}) must be at least n_modes ({})",
                self.dim, self.n_modes
            )));
        }
        if !self.mean_scale.is_finite() || self.mean_scale <= 0.0 {
            return Err(Error::InvalidArgument(
                "mean_scale must be strictly positive".into(),
            ));
        }
        alignment_angle(self.alignment_percent)?;
        if let Some(w) = &self.mixture_weights {
            if w.len() != self.n_modes {
                return Err(Error::ShapeMismatch(format!(
                    "{} mixture weights for {} modes",
                    w.len(),
                    self.n_modes
                )));
            }
            validate_distribution(w, "mixture weights")?;
        }
        Ok(())
    }

    pub fn weights(&self) -> Vec<f64> {
        match &self.mixture_weights {
            Some(w) => w.clone(),
            None => vec![1.0 / self.n_modes as f64; self.n_modes],
        }
    }
}

/// Maps an alignment percentage to the angle between mode 0 and every other
/// mode: `phi = (pi/2) * (100 - percent) / 100`. 0% keeps the modes
/// orthogonal; 100% would collapse them and is rejected.
pub fn alignment_angle(percent: f64) -> Result<f64> {
    if !percent.is_finite() || !(0.0..100.0).contains(&percent) {
        return Err(Error::InvalidArgument(format!(
            "alignment percent must lie in [0, 100) (got {percent})"
        )));
    }
    Ok(std::f64::consts::FRAC_PI_2 * (100.0 - percent) / 100.0)
}

/// Builds the mode directions: row 0 is `e_0`; row `i` is
/// `cos(phi) e_0 + sin(phi) e_i`. All rows are unit vectors and every row
/// past the first makes the same angle `phi` with row 0.
pub fn make_modes(spec: &GmmSpec) -> Result<Matrix> {
    spec.validate()?;
    let phi = alignment_angle(spec.alignment_percent)?;
    // At 0% the modes are exactly the standard basis.
    let (c, s) = if spec.alignment_percent == 0.0 {
        (0.0, 1.0)
    } else {
        (phi.cos(), phi.sin())
    };
    let mut modes = Matrix::zeros(spec.n_modes, spec.dim);
    modes.set(0, 0, 1.0);
    for i in 1..spec.n_modes {
        modes.set(i, 0, c);
        modes.set(i, i, s);
    }
    Ok(modes)
}

/// Labeled data for training: inputs plus hard labels, soft targets, or both.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: Matrix,
    pub hard_labels: Option<Vec<usize>>,
    pub soft_targets: Option<Matrix>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.hard_labels.is_none() && self.soft_targets.is_none() {
            return Err(Error::InvalidArgument(
                "dataset needs hard labels or soft targets".into(),
            ));
        }
        if let Some(labels) = &self.hard_labels {
            if labels.len() != self.len() {
                return Err(Error::ShapeMismatch(format!(
                    "{} labels for {} inputs",
                    labels.len(),
                    self.len()
                )));
            }
            if labels.iter().any(|&k| k >= self.n_classes) {
                return Err(Error::InvalidArgument(format!(
                    "label out of range for {} classes",
                    self.n_classes
                )));
            }
        }
        if let Some(targets) = &self.soft_targets {
            if targets.rows() != self.len() || targets.cols() != self.n_classes {
                return Err(Error::ShapeMismatch(format!(
                    "soft targets are {}x{}, expected {}x{}",
                    targets.rows(),
                    targets.cols(),
                    self.len(),
                    self.n_classes
                )));
            }
            for n in 0..targets.rows() {
                validate_distribution(targets.row(n), "soft target row")?;
            }
        }
        Ok(())
    }

    /// Writes `x_0,...,x_{d-1},label` rows. Requires hard labels.
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let labels = self.hard_labels.as_ref().ok_or_else(|| {
            Error::InvalidArgument("dataset CSV export requires hard labels".into())
        })?;
        let mut writer = csv::Writer::from_path(path).map_err(crate::Error::from)?;
        let mut header: Vec<String> = (0..self.dim()).map(|j| format!("x_{j}")).collect();
        header.push("label".into());
        writer.write_record(&header)?;
        for (i, &label) in labels.iter().enumerate() {
            let mut record: Vec<String> =
                self.inputs.row(i).iter().map(|v| v.to_string()).collect();
            record.push(label.to_string());
            writer.write_record(&record)?;
        }
        writer.flush()?;
        Ok(())
    }
}

/// Draws the unique point set: each point picks a mixture component and adds
/// unit Gaussian noise to its scaled mode.
pub fn sample_gmm_unique(
    spec: &GmmSpec,
    n_unique: usize,
    modes: &Matrix,
    rng: &mut RandomSource,
) -> Result<Matrix> {
    spec.validate()?;
    if modes.rows() != spec.n_modes || modes.cols() != spec.dim {
        return Err(Error::ShapeMismatch(format!(
            "modes are {}x{}, spec wants {}x{}",
            modes.rows(),
            modes.cols(),
            spec.n_modes,
            spec.dim
        )));
    }
    if n_unique < spec.n_modes {
        return Err(Error::InvalidArgument(format!(
            "n_unique ({n_unique}) must be at least n_modes ({})",
            spec.n_modes
        )));
    }
    let weights = spec.weights();
    let mut points = Matrix::zeros(n_unique, spec.dim);
    for i in 0..n_unique {
        let comp = rng.categorical(&weights)?;
        let mean = modes.row(comp);
        let row = points.row_mut(i);
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = spec.mean_scale * mean[j] + rng.normal();
        }
    }
    Ok(points)
}

/// Resamples the unique set with replacement to `n_total` rows and draws a
/// hard label for every row from `softmax(logit_scale * x . mode_k)`.
pub fn resample_with_labels(
    unique: &Matrix,
    n_total: usize,
    modes: &Matrix,
    logit_scale: f64,
    rng: &mut RandomSource,
) -> Result<Dataset> {
    if unique.rows() == 0 {
        return Err(Error::EmptyInput);
    }
    if n_total < unique.rows() {
        return Err(Error::InvalidArgument(format!(
            "n_total ({n_total}) must be at least n_unique ({})",
            unique.rows()
        )));
    }
    if unique.cols() != modes.cols() {
        return Err(Error::ShapeMismatch(format!(
            "points have dim {}, modes have dim {}",
            unique.cols(),
            modes.cols()
        )));
    }
    let k = modes.rows();
    let mut inputs = Matrix::zeros(n_total, unique.cols());
    let mut labels = Vec::with_capacity(n_total);
    let picks: Vec<usize> = (0..n_total).map(|_| rng.below(unique.rows())).collect();
    let mut logits = vec![0.0; k];
    for (i, &pick) in picks.iter().enumerate() {
        let x = unique.row(pick);
        inputs.row_mut(i).copy_from_slice(x);
        for (j, cell) in logits.iter_mut().enumerate() {
            *cell = logit_scale * dot(x, modes.row(j));
        }
        let probs = softmax(&logits)?;
        labels.push(rng.categorical(&probs)?);
    }
    Ok(Dataset {
        inputs,
        hard_labels: Some(labels),
        soft_targets: None,
        n_classes: k,
    })
}

/// Full benchmark draw: unique points, resampling, and unit-scale labels.
pub fn sample_gmm_dataset(
    spec: &GmmSpec,
    n_unique: usize,
    n_total: usize,
    modes: &Matrix,
    rng: &mut RandomSource,
) -> Result<Dataset> {
    let unique = sample_gmm_unique(spec, n_unique, modes, rng)?;
    resample_with_labels(&unique, n_total, modes, 1.0, rng)
}
