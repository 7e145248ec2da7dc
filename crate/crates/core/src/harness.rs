//! End-to-end runs: train, score, threshold, evaluate. Also the
//! hyperparameter grid and the strategy ablation built on top of it.

use alloc::string::String;
use alloc::vec::Vec;

use crate::data::TimeSeries;
use crate::error::{AmadError, Result};
use crate::model::ModelConfig;
use crate::score::{build_report, score_series, EvalReport, ScoreConfig, ScoreReport};
use crate::train::{fit, TrainConfig, TrainLog, TrainedModel};

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub score: ScoreConfig,
}

/// Window length used with the published hyperparameters.
pub const PUBLISHED_WINDOW: usize = 100;
/// Window length of the CPU-scale setup.
pub const DESK_WINDOW: usize = 50;

impl PipelineConfig {
    /// Published hyperparameters for `input_dim` channels.
    pub fn published(input_dim: usize) -> Self {
        PipelineConfig {
            model: ModelConfig::published(input_dim, PUBLISHED_WINDOW),
            train: TrainConfig::published(),
            score: ScoreConfig::default(),
        }
    }

    /// CPU-scale setup for `input_dim` channels.
    pub fn desk(input_dim: usize) -> Self {
        PipelineConfig {
            model: ModelConfig::desk(input_dim, DESK_WINDOW),
            train: TrainConfig::default(),
            score: ScoreConfig::desk(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub model: TrainedModel,
    pub log: TrainLog,
    pub report: ScoreReport,
    pub raw: EvalReport,
    pub adjusted: EvalReport,
    /// CAD evaluations during training and scoring together.
    pub cad_evaluations: u64,
    pub contrastive_evaluations: u64,
}

/// Scores both splits of a trained model and thresholds the test scores.
pub fn score_and_threshold(
    model: &TrainedModel,
    train: &TimeSeries,
    test: &TimeSeries,
    cfg: &ScoreConfig,
) -> Result<(ScoreReport, u64)> {
    let test_scores = score_series(model, test, cfg.batch_size)?;
    let mut cad_evals = test_scores.cad_evaluations;
    let train_scores = match cfg.population {
        crate::score::ThresholdPopulation::TrainAndTest => {
            let s = score_series(model, train, cfg.batch_size)?;
            cad_evals += s.cad_evaluations;
            s.scores
        }
        crate::score::ThresholdPopulation::TestOnly => Vec::new(),
    };
    let report = build_report(
        &train_scores,
        &test_scores.scores,
        test.labels.as_deref(),
        cfg,
    )?;
    Ok((report, cad_evals))
}

/// Trains on `train`, scores `test` (which must carry labels) and reports
/// raw and point-adjusted metrics.
pub fn run_pipeline(train: &TimeSeries, test: &TimeSeries, cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    if test.labels.is_none() {
        return Err(AmadError::Data("evaluation needs a labelled test series".into()));
    }
    let (model, log) = fit(train, &cfg.model, &cfg.train)?;
    let (report, score_cad) = score_and_threshold(&model, train, test, &cfg.score)?;
    let (raw, adjusted) = report.evaluate().expect("labels checked above")?;
    Ok(PipelineOutcome {
        cad_evaluations: log.cad_evaluations + score_cad,
        contrastive_evaluations: log.contrastive_evaluations,
        model,
        log,
        report,
        raw,
        adjusted,
    })
}

/// Mixup weights searched by default.
pub const ALPHA_GRID: [f64; 3] = [0.3, 0.6, 0.9];
/// Temperatures searched by default.
pub const TAU_GRID: [f64; 3] = [0.07, 0.21, 0.35];

/// Metrics reported for a single configuration (point-adjusted).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl From<&EvalReport> for Metrics {
    fn from(r: &EvalReport) -> Self {
        Metrics {
            precision: r.precision,
            recall: r.recall,
            f1: r.f1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub alpha: f64,
    pub tau: f64,
    pub result: core::result::Result<Metrics, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridReport {
    pub cells: Vec<GridCell>,
    /// Mean metrics over each alpha row (successful cells only).
    pub alpha_marginals: Vec<(f64, Option<Metrics>)>,
    /// Mean metrics over each tau column.
    pub tau_marginals: Vec<(f64, Option<Metrics>)>,
}

fn mean_metrics<'a>(it: impl Iterator<Item = &'a Metrics>) -> Option<Metrics> {
    let (mut p, mut r, mut f, mut k) = (0.0, 0.0, 0.0, 0usize);
    for m in it {
        p += m.precision;
        r += m.recall;
        f += m.f1;
        k += 1;
    }
    (k > 0).then(|| Metrics {
        precision: p / k as f64,
        recall: r / k as f64,
        f1: f / k as f64,
    })
}

/// Configurations of every grid cell, alpha-major.
pub fn grid_configs(alphas: &[f64], taus: &[f64], base: &PipelineConfig) -> Vec<(f64, f64, PipelineConfig)> {
    let mut out = Vec::with_capacity(alphas.len() * taus.len());
    for &alpha in alphas {
        for &tau in taus {
            let mut cfg = base.clone();
            cfg.model.mixup_alpha = alpha;
            cfg.train.tau = tau;
            out.push((alpha, tau, cfg));
        }
    }
    out
}

/// Collects per-cell outcomes (in `grid_configs` order) into a report.
pub fn assemble_grid(alphas: &[f64], taus: &[f64], results: Vec<Result<Metrics>>) -> GridReport {
    let mut cells = Vec::with_capacity(results.len());
    let mut it = results.into_iter();
    for &alpha in alphas {
        for &tau in taus {
            let result = it
                .next()
                .unwrap_or_else(|| Err(AmadError::Contract("missing grid cell".into())))
                .map_err(|e| alloc::format!("{e}"));
            cells.push(GridCell { alpha, tau, result });
        }
    }
    let marg = |keep: &dyn Fn(&GridCell) -> bool| {
        mean_metrics(cells.iter().filter(|c| keep(c)).filter_map(|c| c.result.as_ref().ok()))
    };
    let alpha_marginals = alphas.iter().map(|&a| (a, marg(&|c| c.alpha == a))).collect();
    let tau_marginals = taus.iter().map(|&t| (t, marg(&|c| c.tau == t))).collect();
    GridReport {
        cells,
        alpha_marginals,
        tau_marginals,
    }
}

/// Point-adjusted metrics of one configuration.
pub fn grid_cell(train: &TimeSeries, test: &TimeSeries, cfg: &PipelineConfig) -> Result<Metrics> {
    run_pipeline(train, test, cfg).map(|o| Metrics::from(&o.adjusted))
}

/// Sequential grid search; a failing cell is recorded, not fatal.
pub fn grid_search(
    train: &TimeSeries,
    test: &TimeSeries,
    alphas: &[f64],
    taus: &[f64],
    base: &PipelineConfig,
) -> GridReport {
    let results = grid_configs(alphas, taus, base)
        .iter()
        .map(|(_, _, cfg)| grid_cell(train, test, cfg))
        .collect();
    assemble_grid(alphas, taus, results)
}

/// Which training strategies an ablation row enables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationRow {
    pub min: bool,
    pub max: bool,
    pub contrastive: bool,
    pub automask: bool,
}

impl AblationRow {
    pub const fn new(min: bool, max: bool, contrastive: bool, automask: bool) -> Self {
        AblationRow {
            min,
            max,
            contrastive,
            automask,
        }
    }

    /// `base` with this row's switches applied.
    pub fn apply(&self, base: &PipelineConfig) -> PipelineConfig {
        let mut cfg = base.clone();
        cfg.train.enable_min = self.min;
        cfg.train.enable_max = self.max;
        cfg.train.enable_contrastive = self.contrastive;
        cfg.train.enable_automask = self.automask;
        cfg.model.automask = self.automask;
        cfg
    }
}

/// The six standard rows, from everything off to everything on.
pub const ABLATION_ROWS: [AblationRow; 6] = [
    AblationRow::new(false, false, false, false),
    AblationRow::new(false, false, true, true),
    AblationRow::new(true, true, false, true),
    AblationRow::new(false, true, false, true),
    AblationRow::new(false, false, false, true),
    AblationRow::new(true, true, true, true),
];

/// A named train/test pair.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub train: TimeSeries,
    pub test: TimeSeries,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationResult {
    pub row: AblationRow,
    /// Per dataset, in input order.
    pub metrics: Vec<core::result::Result<Metrics, String>>,
    /// Mean F1 over the datasets that succeeded.
    pub avg_f1: Option<f64>,
    pub cad_evaluations: u64,
    pub contrastive_evaluations: u64,
}

/// Outcome of one row on one dataset, with instrumentation counters.
pub type RowOutcome = Result<(Metrics, u64, u64)>;

pub fn ablation_cell(row: &AblationRow, data: &Dataset, base: &PipelineConfig) -> RowOutcome {
    let out = run_pipeline(&data.train, &data.test, &row.apply(base))?;
    Ok((
        Metrics::from(&out.adjusted),
        out.cad_evaluations,
        out.contrastive_evaluations,
    ))
}

/// Groups row-major cell outcomes (`rows x datasets`) into results.
pub fn assemble_ablation(rows: &[AblationRow], n_datasets: usize, outcomes: Vec<RowOutcome>) -> Vec<AblationResult> {
    let mut it = outcomes.into_iter();
    rows.iter()
        .map(|&row| {
            let mut metrics = Vec::with_capacity(n_datasets);
            let (mut cad_evals, mut con_evals) = (0, 0);
            for _ in 0..n_datasets {
                match it.next() {
                    Some(Ok((m, c, k))) => {
                        cad_evals += c;
                        con_evals += k;
                        metrics.push(Ok(m));
                    }
                    Some(Err(e)) => metrics.push(Err(alloc::format!("{e}"))),
                    None => metrics.push(Err("missing ablation cell".into())),
                }
            }
            let ok: Vec<f64> = metrics.iter().filter_map(|m| m.as_ref().ok()).map(|m| m.f1).collect();
            let avg_f1 = (!ok.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64);
            AblationResult {
                row,
                metrics,
                avg_f1,
                cad_evaluations: cad_evals,
                contrastive_evaluations: con_evals,
            }
        })
        .collect()
}

/// Runs every row on every dataset sequentially.
pub fn ablation_run(rows: &[AblationRow], datasets: &[Dataset], base: &PipelineConfig) -> Vec<AblationResult> {
    let mut outcomes = Vec::with_capacity(rows.len() * datasets.len());
    for row in rows {
        for d in datasets {
            outcomes.push(ablation_cell(row, d, base));
        }
    }
    assemble_ablation(rows, datasets.len(), outcomes)
}
