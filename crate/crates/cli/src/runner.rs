//! Experiment execution: dataset cells, training runs, and the `estimate`,
//! `train`, and `sweep` commands.
//!
//! Every cell derives its own seed chain from (user seed, cell coordinates),
//! so cells are independent, order-insensitive, and reproducible under any
//! `--jobs` setting. Within a cell, losses that are compared against each
//! other share the dataset, the parameter init, and the batch shuffles.

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use softnce::distributions::{
    make_modes, resample_with_labels, sample_gmm_unique, Dataset, GmmSpec,
};
use softnce::eval::{calibration, kl_estimation_error, topk_accuracy, CalibrationReport};
use softnce::losses::LossId;
use softnce::models::{train, ScoringModel, TrainConfig, TrainResult};
use softnce::numerics::{derive_seed, softmax, Matrix, RandomSource};
use softnce::Error;

use crate::config::{ExperimentConfig, KlOver, LabelTheta};
use crate::output::{self, ResultRow, SummaryRow};
use crate::stats;
use crate::CliError;

/// Seed-chain tags for the per-cell substreams. The training loop applies
/// its own tags on top of the cell's train seed.
pub const STREAM_CELL_DATA: u64 = 101;
pub const STREAM_CELL_TEST: u64 = 102;
pub const STREAM_CELL_TRAIN: u64 = 103;

fn chain_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(seed, |acc, &part| derive_seed(acc, part))
}

/// One training/evaluation cell of a sweep grid.
#[derive(Debug, Clone)]
pub struct Cell {
    pub seed: u64,
    pub alignment_percent: f64,
    pub epsilon: f64,
    pub batch_size: usize,
}

impl Cell {
    fn data_seed(&self) -> u64 {
        chain_seed(
            self.seed,
            &[STREAM_CELL_DATA, self.alignment_percent.to_bits()],
        )
    }

    fn test_seed(&self) -> u64 {
        chain_seed(
            self.seed,
            &[STREAM_CELL_TEST, self.alignment_percent.to_bits()],
        )
    }

    /// Excludes the loss id so paired losses share init and shuffles.
    fn train_seed(&self) -> u64 {
        chain_seed(
            self.seed,
            &[
                STREAM_CELL_TRAIN,
                self.alignment_percent.to_bits(),
                self.epsilon.to_bits(),
                self.batch_size as u64,
            ],
        )
    }
}

/// Materialized data for one cell: the labeled training rows, the unique
/// points they were resampled from, and the labeling parameters.
pub struct CellData {
    pub dataset: Dataset,
    pub unique: Matrix,
    pub modes: Matrix,
    /// Mode directions at the labeling logit scale; the KL ground truth.
    pub theta_label: Matrix,
}

fn label_scale(config: &ExperimentConfig) -> f64 {
    match config.label_theta {
        LabelTheta::Unit => 1.0,
        LabelTheta::Scaled => config.gmm.mean_scale,
    }
}

fn cell_gmm(config: &ExperimentConfig, alignment_percent: f64) -> GmmSpec {
    GmmSpec {
        alignment_percent,
        ..config.gmm.clone()
    }
}

pub fn build_cell_data(config: &ExperimentConfig, cell: &Cell) -> Result<CellData, CliError> {
    let spec = cell_gmm(config, cell.alignment_percent);
    let modes = make_modes(&spec)?;
    let scale = label_scale(config);
    let mut rng = RandomSource::new(cell.data_seed());
    let unique = sample_gmm_unique(&spec, config.data.n_unique, &modes, &mut rng)?;
    let dataset = resample_with_labels(&unique, config.data.n_total, &modes, scale, &mut rng)?;
    let mut theta_label = modes.clone();
    theta_label.scale_in_place(scale);
    Ok(CellData {
        dataset,
        unique,
        modes,
        theta_label,
    })
}

/// Fresh held-out draws from the same mixture and labeling model.
pub fn build_test_data(config: &ExperimentConfig, cell: &Cell) -> Result<Dataset, CliError> {
    let spec = cell_gmm(config, cell.alignment_percent);
    let modes = make_modes(&spec)?;
    let mut rng = RandomSource::new(cell.test_seed());
    let points = sample_gmm_unique(&spec, config.data.n_test, &modes, &mut rng)?;
    let test = resample_with_labels(
        &points,
        config.data.n_test,
        &modes,
        label_scale(config),
        &mut rng,
    )?;
    Ok(test)
}

fn cell_train_config(config: &ExperimentConfig, cell: &Cell, loss: LossId) -> TrainConfig {
    TrainConfig {
        loss_id: loss,
        epsilon: cell.epsilon,
        batch_size: cell.batch_size,
        seed: cell.train_seed(),
        ..config.train.clone()
    }
}

/// Accuracy and calibration of a model on a labeled test set.
pub fn test_metrics(
    model: &ScoringModel,
    test: &Dataset,
) -> Result<(TestMetrics, CalibrationReport), CliError> {
    let labels = test
        .hard_labels
        .as_ref()
        .ok_or_else(|| CliError::Config("test set lost its labels".into()))?;
    let logits = model.forward_logits(&test.inputs)?;
    let top1 = topk_accuracy(&logits, labels, 1)?;
    let top5 = topk_accuracy(&logits, labels, 5.min(model.n_classes()))?;
    let mut probs = Matrix::zeros(test.len(), model.n_classes());
    for i in 0..test.len() {
        probs
            .row_mut(i)
            .copy_from_slice(&softmax(logits.values().row(i))?);
    }
    let report = calibration(&probs, labels)?;
    Ok((
        TestMetrics {
            top1,
            top5,
            ece: report.ece,
        },
        report,
    ))
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct TestMetrics {
    pub top1: f64,
    pub top5: f64,
    pub ece: f64,
}

/// Runs cells on a rayon pool sized by `jobs` and concatenates their rows in
/// input order. Output order does not matter downstream; rows are sorted at
/// write time.
fn run_cells<F>(cells: &[Cell], jobs: usize, run: F) -> Result<Vec<ResultRow>, CliError>
where
    F: Fn(&Cell) -> Result<Vec<ResultRow>, CliError> + Sync,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Config(format!("cannot build thread pool: {e}")))?;
    let nested: Vec<Vec<ResultRow>> = pool.install(|| {
        cells
            .par_iter()
            .map(&run)
            .collect::<Result<Vec<_>, CliError>>()
    })?;
    Ok(nested.into_iter().flatten().collect())
}

/// A training failure that should flag the cell's rows rather than abort the
/// whole grid.
fn is_numeric_failure(err: &CliError) -> bool {
    matches!(
        err,
        CliError::Core(Error::NumericFailure(_)) | CliError::Core(Error::NonFinite(_))
    )
}

fn train_cell_model(
    data: &CellData,
    train_config: &TrainConfig,
) -> Result<Option<TrainResult>, CliError> {
    match train(&data.dataset, train_config, None) {
        Ok(result) => Ok(Some(result)),
        Err(err) => {
            let err = CliError::from(err);
            if is_numeric_failure(&err) {
                Ok(None)
            } else {
                Err(err)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// estimate
// ---------------------------------------------------------------------------

/// Parameter-estimation comparison: per (alignment, seed) trains NLL and
/// InfoNCE on the same dataset from the same init and reports forward KL
/// from the labeling conditional to each model's.
pub fn run_estimate(
    config: &ExperimentConfig,
    jobs: usize,
    out_dir: &Path,
) -> Result<EstimateOutput, CliError> {
    let experiment = config.experiment_id("estimate");
    let alignments: &[f64] = &config.sweep.alignment_percents;
    if alignments.is_empty() {
        return Err(CliError::Config(
            "estimate needs sweep.alignment_percents".into(),
        ));
    }
    let cells: Vec<Cell> = alignments
        .iter()
        .flat_map(|&alignment_percent| {
            config.seeds.iter().map(move |&seed| Cell {
                seed,
                alignment_percent,
                epsilon: config.train.epsilon,
                batch_size: config.train.batch_size,
            })
        })
        .collect();

    let mut rows = run_cells(&cells, jobs, |cell| {
        let data = build_cell_data(config, cell)?;
        let probes = match config.kl_over {
            KlOver::Unique => &data.unique,
            KlOver::Full => &data.dataset.inputs,
        };
        let mut rows = Vec::with_capacity(2);
        for loss in [LossId::Nll, LossId::InfoNce] {
            let train_config = cell_train_config(config, cell, loss);
            let kl = match train_cell_model(&data, &train_config)? {
                Some(result) => {
                    kl_estimation_error(&data.theta_label, &result.final_model, probes)?
                }
                None => f64::NAN,
            };
            rows.push(ResultRow {
                experiment: experiment.clone(),
                seed: cell.seed,
                loss_id: loss.as_str().to_string(),
                alignment_percent: cell.alignment_percent,
                epsilon: train_config.epsilon,
                batch_size: train_config.batch_size,
                metric: "kl".to_string(),
                value: kl,
                status: ResultRow::flag_status(kl),
            });
        }
        Ok(rows)
    })?;

    std::fs::create_dir_all(out_dir).map_err(CliError::Io)?;
    let csv_path = out_dir.join("estimate.csv");
    output::write_rows(&csv_path, &mut rows)?;
    output::write_sidecar(&csv_path, "estimate", config)?;

    let summary = summarize_estimate(&experiment, alignments, &rows);
    let summary_path = out_dir.join("estimate_summary.csv");
    output::write_summary(&summary_path, &summary)?;
    output::write_sidecar(&summary_path, "estimate", config)?;
    Ok(EstimateOutput { rows, summary })
}

pub struct EstimateOutput {
    pub rows: Vec<ResultRow>,
    pub summary: Vec<SummaryRow>,
}

/// Median and IQR of the finite KL values per (loss, alignment).
fn summarize_estimate(
    experiment: &str,
    alignments: &[f64],
    rows: &[ResultRow],
) -> Vec<SummaryRow> {
    let mut summary = Vec::new();
    for loss in [LossId::Nll, LossId::InfoNce] {
        for &alignment in alignments {
            let values: Vec<f64> = rows
                .iter()
                .filter(|r| {
                    r.loss_id == loss.as_str()
                        && r.alignment_percent == alignment
                        && r.value.is_finite()
                })
                .map(|r| r.value)
                .collect();
            for (metric, value) in [
                ("kl_median", stats::median(&values)),
                ("kl_iqr", stats::iqr(&values)),
            ] {
                summary.push(SummaryRow {
                    experiment: experiment.to_string(),
                    loss_id: loss.as_str().to_string(),
                    alignment_percent: alignment,
                    metric: metric.to_string(),
                    value: value.unwrap_or(f64::NAN),
                    n_seeds: values.len(),
                });
            }
        }
    }
    summary
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct TrainOutput {
    pub loss_id: String,
    pub top1: f64,
    pub top5: f64,
    pub ece: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub checkpoint: String,
}

/// Trains one model per the config and writes checkpoint, metrics, and
/// reliability-diagram data.
pub fn run_train(config: &ExperimentConfig, out_dir: &Path) -> Result<TrainOutput, CliError> {
    let seed = *config.seeds.first().expect("validated non-empty");
    let cell = Cell {
        seed,
        alignment_percent: config.gmm.alignment_percent,
        epsilon: config.train.epsilon,
        batch_size: config.train.batch_size,
    };
    let data = build_cell_data(config, &cell)?;
    let train_config = cell_train_config(config, &cell, config.train.loss_id);
    let result = train(&data.dataset, &train_config, None)?;
    let test = build_test_data(config, &cell)?;
    let (metrics, report) = test_metrics(&result.final_model, &test)?;

    std::fs::create_dir_all(out_dir).map_err(CliError::Io)?;
    result.final_model.save(&out_dir.join("model.json"))?;
    let reliability_path = out_dir.join("reliability.csv");
    report.write_reliability_csv(&reliability_path)?;
    output::write_sidecar(&reliability_path, "train", config)?;
    let output = TrainOutput {
        loss_id: config.train.loss_id.as_str().to_string(),
        top1: metrics.top1,
        top5: metrics.top5,
        ece: metrics.ece,
        best_epoch: result.best_epoch,
        epochs_run: result.epochs_run,
        checkpoint: "model.json".to_string(),
    };
    output::write_json(&out_dir.join("train_metrics.json"), &output)?;
    Ok(output)
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

/// Cartesian product over the named sweep axes and seeds; accuracy and
/// calibration metrics per cell and loss.
pub fn run_sweep(
    config: &ExperimentConfig,
    jobs: usize,
    out_dir: &Path,
) -> Result<Vec<ResultRow>, CliError> {
    if config.sweep.is_empty() {
        return Err(CliError::Config(
            "sweep needs at least one non-empty sweep list".into(),
        ));
    }
    let experiment = config.experiment_id("sweep");
    let alignments = non_empty_or(&config.sweep.alignment_percents, config.gmm.alignment_percent);
    let epsilons = non_empty_or(&config.sweep.epsilons, config.train.epsilon);
    let batch_sizes = non_empty_or(&config.sweep.batch_sizes, config.train.batch_size);
    let losses = non_empty_or(&config.sweep.losses, config.train.loss_id);

    let mut cells = Vec::new();
    for &alignment_percent in &alignments {
        for &epsilon in &epsilons {
            for &batch_size in &batch_sizes {
                for &seed in &config.seeds {
                    cells.push(Cell {
                        seed,
                        alignment_percent,
                        epsilon,
                        batch_size,
                    });
                }
            }
        }
    }

    let mut rows = run_cells(&cells, jobs, |cell| {
        let data = build_cell_data(config, cell)?;
        let test = build_test_data(config, cell)?;
        let mut rows = Vec::new();
        for &loss in &losses {
            let train_config = cell_train_config(config, cell, loss);
            let metrics = match train_cell_model(&data, &train_config)? {
                Some(result) => {
                    let (metrics, _) = test_metrics(&result.final_model, &test)?;
                    metrics
                }
                None => TestMetrics {
                    top1: f64::NAN,
                    top5: f64::NAN,
                    ece: f64::NAN,
                },
            };
            for (metric, value) in [
                ("top1", metrics.top1),
                ("top5", metrics.top5),
                ("ece", metrics.ece),
            ] {
                rows.push(ResultRow {
                    experiment: experiment.clone(),
                    seed: cell.seed,
                    loss_id: loss.as_str().to_string(),
                    alignment_percent: cell.alignment_percent,
                    epsilon: cell.epsilon,
                    batch_size: cell.batch_size,
                    metric: metric.to_string(),
                    value,
                    status: ResultRow::flag_status(value),
                });
            }
        }
        Ok(rows)
    })?;

    std::fs::create_dir_all(out_dir).map_err(CliError::Io)?;
    let csv_path = out_dir.join("sweep.csv");
    output::write_rows(&csv_path, &mut rows)?;
    output::write_sidecar(&csv_path, "sweep", config)?;
    Ok(rows)
}

fn non_empty_or<T: Copy>(list: &[T], fallback: T) -> Vec<T> {
    if list.is_empty() {
        vec![fallback]
    } else {
        list.to_vec()
    }
}
