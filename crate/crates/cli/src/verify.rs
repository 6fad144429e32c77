//! Audit suites behind `verify` and `grad-check`: the smoothing bound on
//! random discrete joints, finite-difference gradient checks across every
//! loss, and the one-hot reduction and energy-form identities.

use serde::Serialize;
use serde_json::json;

use softnce::eval::{mi_bound_audit, DiscreteJoint};
use softnce::gradients::{
    finite_difference_check, finite_difference_check_against, loss_grads, LossInstance, Scoring,
};
use softnce::losses::{
    energy_ce_form, infonce_loss, nll_loss, soft_target_ce_loss, soft_target_infonce_loss,
    LogitsBatch, LossId, NoiseModel,
};
use softnce::numerics::{derive_seed, Matrix, RandomSource};

use crate::CliError;

/// Step for the fourth-order stencil. Larger than the harness default 1e-5:
/// with truncation at O(step^4) the error is dominated by roundoff in the
/// loss evaluations, which shrinks as the step grows.
const FD_STEP: f64 = 5e-4;
const FD_TOLERANCE: f64 = 1e-5;
const REDUCTION_VALUE_TOL: f64 = 1e-12;
const REDUCTION_GRAD_TOL: f64 = 1e-10;
const FORM_TOL: f64 = 1e-9;
const BOUND_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub name: String,
    pub checks: usize,
    pub failures: usize,
    /// Largest residual seen, measured as the suite's note describes.
    pub worst: f64,
    pub note: String,
    pub failing_case: Option<serde_json::Value>,
}

impl SuiteReport {
    fn passed(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub entropy_units: String,
    pub seed: u64,
    pub suites: Vec<SuiteReport>,
    pub passed: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    pub joints: usize,
    pub eps_grid: usize,
    pub instances: usize,
    pub seed: u64,
    /// Test hook: corrupts one analytic gradient so the run must fail.
    pub inject_fault: bool,
}

impl Default for VerifyOptions {
    fn default() -> VerifyOptions {
        VerifyOptions {
            joints: 200,
            eps_grid: 11,
            instances: 20,
            seed: 0,
            inject_fault: false,
        }
    }
}

// ---------------------------------------------------------------------------
// Random test-case generators
// ---------------------------------------------------------------------------

fn random_noise(k: usize, rng: &mut RandomSource) -> NoiseModel {
    let raw: Vec<f64> = (0..k).map(|_| 0.05 + rng.uniform()).collect();
    let total: f64 = raw.iter().sum();
    let probs: Vec<f64> = raw.into_iter().map(|v| v / total).collect();
    let temperature = 0.5 + rng.uniform();
    NoiseModel::from_probs(&probs, temperature).expect("strictly positive by construction")
}

fn random_logits(n: usize, k: usize, rng: &mut RandomSource) -> LogitsBatch {
    let values: Vec<f64> = (0..n * k).map(|_| 1.5 * rng.normal()).collect();
    LogitsBatch::new(Matrix::from_vec(n, k, values).expect("sized above"))
        .expect("finite by construction")
}

fn random_labels(n: usize, k: usize, rng: &mut RandomSource) -> Vec<usize> {
    (0..n).map(|_| rng.below(k)).collect()
}

fn one_hot(labels: &[usize], k: usize) -> Matrix {
    let mut targets = Matrix::zeros(labels.len(), k);
    for (i, &label) in labels.iter().enumerate() {
        targets.set(i, label, 1.0);
    }
    targets
}

fn random_targets(n: usize, k: usize, rng: &mut RandomSource) -> Matrix {
    let mut targets = Matrix::zeros(n, k);
    for i in 0..n {
        let raw: Vec<f64> = (0..k).map(|_| -(1.0 - rng.uniform()).ln()).collect();
        let total: f64 = raw.iter().sum();
        for (j, v) in raw.iter().enumerate() {
            targets.set(i, j, v / total);
        }
    }
    targets
}

fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Suites
// ---------------------------------------------------------------------------

/// Smoothing-bound audit over random joints; every 10th joint is a product
/// of random marginals whose bound must be identically zero.
pub fn mi_bound_suite(joints: usize, eps_grid: usize, seed: u64) -> Result<SuiteReport, CliError> {
    let mut rng = RandomSource::new(derive_seed(seed, 11));
    let mut checks = 0;
    let mut failures = 0;
    let mut worst: f64 = 0.0;
    let mut failing_case = None;
    for j in 0..joints {
        let n_z = 2 + rng.below(5);
        let n_y = 2 + rng.below(5);
        let independent = j % 10 == 9;
        let joint = if independent {
            let p_z = random_targets(1, n_z, &mut rng);
            let p_y = random_targets(1, n_y, &mut rng);
            DiscreteJoint::independent(p_z.row(0), p_y.row(0))?
        } else {
            DiscreteJoint::random(n_z, n_y, &mut rng)?
        };
        for step in 0..eps_grid {
            let epsilon = step as f64 / (eps_grid - 1) as f64;
            let audit = mi_bound_audit(&joint, epsilon)?;
            let mut residual: f64 = (-audit.lhs).max(0.0);
            if epsilon == 0.0 {
                residual = residual.max((audit.lhs - audit.mi).abs());
            }
            if epsilon == 1.0 {
                residual = residual.max(audit.lhs.abs());
            }
            if independent {
                residual = residual.max(audit.lhs.abs());
            }
            checks += 1;
            worst = worst.max(residual);
            if residual > BOUND_TOL {
                failures += 1;
                failing_case.get_or_insert_with(|| {
                    json!({
                        "joint": joint.table().data(),
                        "shape": [joint.table().rows(), joint.table().cols()],
                        "epsilon": epsilon,
                        "lhs": audit.lhs,
                        "independent": independent,
                    })
                });
            }
        }
    }
    Ok(SuiteReport {
        name: "mi_bound".into(),
        checks,
        failures,
        worst,
        note: format!(
            "max over checks of nonnegativity and endpoint-identity residuals, nats; tolerance {BOUND_TOL:e}"
        ),
        failing_case,
    })
}

/// Finite-difference check of every loss under both scoring rules. When
/// `inject_fault` is set, the first instance is checked against a
/// sign-flipped gradient, which the harness must reject.
fn gradient_fd_suite(
    instances: usize,
    seed: u64,
    inject_fault: bool,
) -> Result<SuiteReport, CliError> {
    let mut rng = RandomSource::new(derive_seed(seed, 12));
    let mut checks = 0;
    let mut failures = 0;
    let mut worst: f64 = 0.0;
    let mut failing_case = None;
    let mut fault_pending = inject_fault;
    for loss in LossId::ALL {
        for scoring in [Scoring::Dot, Scoring::Cosine] {
            for index in 0..instances {
                let n = 2 + rng.below(15);
                let k = 2 + rng.below(7);
                let dim = 1 + rng.below(8);
                let instance = LossInstance::random(loss, scoring, n, k, dim, &mut rng)?;
                let report = if fault_pending {
                    fault_pending = false;
                    let (mut gz, gy) = loss_grads(&instance)?;
                    gz.scale_in_place(-1.0);
                    finite_difference_check_against(&instance, FD_STEP, &gz, &gy)?
                } else {
                    finite_difference_check(&instance, FD_STEP)?
                };
                checks += 1;
                worst = worst.max(report.max_rel_error);
                if !report.passes(FD_TOLERANCE) {
                    failures += 1;
                    failing_case.get_or_insert_with(|| {
                        json!({
                            "loss": loss.as_str(),
                            "scoring": scoring.as_str(),
                            "instance": index,
                            "max_rel_error": report.max_rel_error,
                        })
                    });
                }
            }
        }
    }
    Ok(SuiteReport {
        name: "gradient_fd".into(),
        checks,
        failures,
        worst,
        note: format!(
            "max relative error of analytic vs central differences; tolerance {FD_TOLERANCE:e}"
        ),
        failing_case,
    })
}

/// One-hot targets must collapse the soft losses onto their hard
/// counterparts.
pub fn reduction_suite(batches: usize, seed: u64) -> Result<SuiteReport, CliError> {
    let mut rng = RandomSource::new(derive_seed(seed, 13));
    let mut checks = 0;
    let mut failures = 0;
    let mut worst: f64 = 0.0;
    let mut failing_case = None;
    for index in 0..batches {
        let n = 2 + rng.below(15);
        let k = 2 + rng.below(7);
        let logits = random_logits(n, k, &mut rng);
        let labels = random_labels(n, k, &mut rng);
        let targets = one_hot(&labels, k);
        let noise = random_noise(k, &mut rng);

        let pairs = [
            (
                "st_infonce_vs_infonce",
                soft_target_infonce_loss(&logits, &targets, &noise)?,
                infonce_loss(&logits, &labels, &noise)?,
            ),
            (
                "soft_ce_vs_nll",
                soft_target_ce_loss(&logits, &targets)?,
                nll_loss(&logits, &labels)?,
            ),
        ];
        for (label, soft, hard) in pairs {
            let value_diff = (soft.value - hard.value).abs();
            let grad_diff = max_abs_diff(&soft.grad_logits, &hard.grad_logits);
            checks += 1;
            worst = worst.max(value_diff);
            if value_diff > REDUCTION_VALUE_TOL || grad_diff > REDUCTION_GRAD_TOL {
                failures += 1;
                failing_case.get_or_insert_with(|| {
                    json!({
                        "pair": label,
                        "batch": index,
                        "value_diff": value_diff,
                        "grad_diff": grad_diff,
                    })
                });
            }
        }
    }
    Ok(SuiteReport {
        name: "reduction_identity".into(),
        checks,
        failures,
        worst,
        note: format!(
            "max |soft - hard| loss value; value tolerance {REDUCTION_VALUE_TOL:e}, gradient tolerance {REDUCTION_GRAD_TOL:e}"
        ),
        failing_case,
    })
}

/// The ranking form and the energy cross-entropy form are the same function
/// computed two ways.
pub fn form_identity_suite(batches: usize, seed: u64) -> Result<SuiteReport, CliError> {
    let mut rng = RandomSource::new(derive_seed(seed, 14));
    let mut checks = 0;
    let mut failures = 0;
    let mut worst: f64 = 0.0;
    let mut failing_case = None;
    for index in 0..batches {
        let n = 2 + rng.below(15);
        let k = 2 + rng.below(7);
        let logits = random_logits(n, k, &mut rng);
        let targets = random_targets(n, k, &mut rng);
        let noise = random_noise(k, &mut rng);
        let ranking = soft_target_infonce_loss(&logits, &targets, &noise)?;
        let energy = energy_ce_form(&logits, &targets, &noise)?;
        let value_diff = (ranking.value - energy.value).abs();
        let grad_diff = max_abs_diff(&ranking.grad_logits, &energy.grad_logits);
        let residual = value_diff.max(grad_diff);
        checks += 1;
        worst = worst.max(residual);
        if residual > FORM_TOL {
            failures += 1;
            failing_case.get_or_insert_with(|| {
                json!({
                    "batch": index,
                    "value_diff": value_diff,
                    "grad_diff": grad_diff,
                })
            });
        }
    }
    Ok(SuiteReport {
        name: "form_identity".into(),
        checks,
        failures,
        worst,
        note: format!(
            "max |ranking - energy| over value and gradients; tolerance {FORM_TOL:e}"
        ),
        failing_case,
    })
}

pub fn run_verify(options: &VerifyOptions) -> Result<VerifyReport, CliError> {
    if options.eps_grid < 2 {
        return Err(CliError::Config(
            "eps-grid needs at least the two endpoints".into(),
        ));
    }
    if options.joints == 0 || options.instances == 0 {
        return Err(CliError::Config(
            "joints and instances must be positive".into(),
        ));
    }
    let suites = vec![
        mi_bound_suite(options.joints, options.eps_grid, options.seed)?,
        gradient_fd_suite(options.instances, options.seed, options.inject_fault)?,
        reduction_suite(1000, options.seed)?,
        form_identity_suite(1000, options.seed)?,
    ];
    let passed = suites.iter().all(SuiteReport::passed);
    Ok(VerifyReport {
        entropy_units: "nats".into(),
        seed: options.seed,
        suites,
        passed,
    })
}

// ---------------------------------------------------------------------------
// grad-check
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckRow {
    pub loss: String,
    pub scoring: String,
    pub instances: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
    pub rows: Vec<GradCheckRow>,
    pub passed: bool,
}

/// Finite-difference sweep per (loss, scoring): `instances` random problems
/// with N <= 16, K <= 8, d <= 8.
pub fn run_grad_check(
    losses: &[LossId],
    instances: usize,
    step: f64,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport, CliError> {
    if losses.is_empty() || instances == 0 {
        return Err(CliError::Config(
            "grad-check needs at least one loss and one instance".into(),
        ));
    }
    let mut rng = RandomSource::new(derive_seed(seed, 15));
    let mut rows = Vec::new();
    for &loss in losses {
        for scoring in [Scoring::Dot, Scoring::Cosine] {
            let mut max_rel_error: f64 = 0.0;
            for _ in 0..instances {
                let n = 2 + rng.below(15);
                let k = 2 + rng.below(7);
                let dim = 1 + rng.below(8);
                let instance = LossInstance::random(loss, scoring, n, k, dim, &mut rng)?;
                let report = finite_difference_check(&instance, step)?;
                max_rel_error = max_rel_error.max(report.max_rel_error);
            }
            rows.push(GradCheckRow {
                loss: loss.as_str().to_string(),
                scoring: scoring.as_str().to_string(),
                instances,
                max_rel_error,
                passed: max_rel_error < tolerance,
            });
        }
    }
    let passed = rows.iter().all(|row| row.passed);
    Ok(GradCheckReport {
        step,
        tolerance,
        seed,
        rows,
        passed,
    })
}
