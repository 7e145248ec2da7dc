//! The `amad` command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or IO
//! error, 3 numerical failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use amad_core::data::{synth_generate, SynthSpec, TimeSeries};
use amad_core::harness::{Dataset, PipelineConfig, ABLATION_ROWS, ALPHA_GRID, TAU_GRID};
use amad_core::score::{build_report, point_adjust, precision_recall_f1, score_series, ScoreConfig, ThresholdPopulation};
use amad_core::train::fit;
use clap::{Args, Parser, Subcommand};

use crate::config::{parse_override, read_pairs, Preset, RunConfig};
use crate::container::{load_checkpoint, load_series_binary, save_checkpoint, save_series_binary};
use crate::error::{CliError, Result};
use crate::manifest::Manifest;
use crate::series_csv::{load_series, save_series};
use crate::{parallel, reports};

#[derive(Debug, Parser)]
#[command(name = "amad", version, about = "Unsupervised multivariate time-series anomaly detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic train/test pair with labelled anomalies.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Score a series with a checkpoint and threshold it.
    Score(ScoreArgs),
    /// Compute raw and point-adjusted precision/recall/F1 from a score trace.
    Eval(EvalArgs),
    /// Train and evaluate every (alpha, tau) cell of the grid.
    Grid(GridArgs),
    /// Run the six-row strategy ablation.
    Ablate(AblateArgs),
}

/// Options shared by commands that train.
#[derive(Debug, Args)]
pub struct RunArgs {
    /// `key = value` config file; a run manifest works too.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Default hyperparameters: published or desk.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override one setting; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4000)]
    pub train_len: usize,
    #[arg(long, default_value_t = 2000)]
    pub test_len: usize,
    #[arg(long, default_value_t = 3)]
    pub dims: usize,
    #[arg(long, default_value_t = 0.01)]
    pub anomaly_fraction: f64,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    /// Write the binary container instead of CSV.
    #[arg(long)]
    pub binary: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Training series (CSV, or `.amad` container).
    #[arg(long)]
    pub train: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Series to score; a `label` column enables evaluation.
    #[arg(long)]
    pub series: PathBuf,
    /// Training series, pooled into the threshold population.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Percent of the population above the threshold.
    #[arg(long, default_value_t = 1.0)]
    pub ar: f64,
    /// train_test or test; defaults to train_test when --train is given.
    #[arg(long)]
    pub population: Option<String>,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Score trace written by `amad score`.
    #[arg(long)]
    pub scores: PathBuf,
    /// Labelled series; otherwise the trace's `gt` column is used.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Comma-separated mixup weights.
    #[arg(long, value_delimiter = ',')]
    pub alphas: Vec<f64>,
    /// Comma-separated temperatures.
    #[arg(long, value_delimiter = ',')]
    pub taus: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// `NAME=TRAIN:TEST`; repeatable, replaces --train/--test.
    #[arg(long = "dataset", value_name = "NAME=TRAIN:TEST")]
    pub datasets: Vec<String>,
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() {
                let _ = write!(stderr, "{}", e.render());
                1
            } else {
                let _ = write!(stdout, "{}", e.render());
                0
            };
            return code;
        }
    };
    match dispatch(cli.command, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a, out),
        Command::Train(a) => train(a, out),
        Command::Score(a) => score(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Grid(a) => grid(a, out),
        Command::Ablate(a) => ablate(a, out),
    }
}

fn say(out: &mut dyn Write, text: std::fmt::Arguments) -> Result<()> {
    out.write_fmt(text)
        .and_then(|_| out.write_all(b"\n"))
        .map_err(|e| CliError::io("<stdout>", e))
}

/// Loads a series by extension: `.amad` is the binary container, anything
/// else is CSV.
pub fn load_any(path: &Path) -> Result<TimeSeries> {
    if path.extension().is_some_and(|e| e == "amad") {
        load_series_binary(path)
    } else {
        load_series(path)
    }
}

fn make_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn synth(a: SynthArgs, out: &mut dyn Write) -> Result<()> {
    let spec = SynthSpec {
        train_len: a.train_len,
        test_len: a.test_len,
        dims: a.dims,
        anomaly_fraction: a.anomaly_fraction,
        noise_sigma: a.noise,
    };
    let data = synth_generate(a.seed, &spec)?;
    make_dir(&a.out)?;
    let ext = if a.binary { "amad" } else { "csv" };
    let train_path = a.out.join(format!("train.{ext}"));
    let test_path = a.out.join(format!("test.{ext}"));
    if a.binary {
        save_series_binary(&train_path, &data.train)?;
        save_series_binary(&test_path, &data.test)?;
    } else {
        save_series(&train_path, &data.train)?;
        save_series(&test_path, &data.test)?;
    }
    let anomalies_path = a.out.join("anomalies.csv");
    let mut text = String::from("kind,start,width,channel\n");
    for an in &data.anomalies {
        text.push_str(&format!("{},{},{},{}\n", an.kind.as_str(), an.start, an.width, an.channel));
    }
    std::fs::write(&anomalies_path, text).map_err(|e| CliError::io(&anomalies_path, e))?;

    let settings = vec![
        ("seed".to_string(), a.seed.to_string()),
        ("data.train".to_string(), train_path.display().to_string()),
        ("data.test".to_string(), test_path.display().to_string()),
        ("synth.train_len".to_string(), a.train_len.to_string()),
        ("synth.test_len".to_string(), a.test_len.to_string()),
        ("synth.dims".to_string(), a.dims.to_string()),
        ("synth.anomaly_fraction".to_string(), a.anomaly_fraction.to_string()),
        ("synth.noise".to_string(), a.noise.to_string()),
    ];
    let mut m = Manifest::new("synth", settings);
    m.result("anomalies", data.anomalies.len())
        .artifact(&train_path)
        .artifact(&test_path)
        .artifact(&anomalies_path);
    m.write(&a.out)?;
    say(
        out,
        format_args!(
            "wrote {} and {} ({} anomalies)",
            train_path.display(),
            test_path.display(),
            data.anomalies.len()
        ),
    )
}

/// Builds the run config: file first, then flags, then `--set` overrides.
fn run_config(run: &RunArgs, default_preset: Preset, extra: &[(&str, Option<&PathBuf>)]) -> Result<RunConfig> {
    let mut pairs = match &run.config {
        Some(p) => read_pairs(p)?,
        None => Vec::new(),
    };
    if let Some(p) = &run.preset {
        pairs.push(("preset".into(), p.clone()));
    }
    if let Some(s) = run.seed {
        pairs.push(("seed".into(), s.to_string()));
    }
    for (key, value) in extra {
        if let Some(v) = value {
            pairs.push((key.to_string(), v.display().to_string()));
        }
    }
    if let Some(o) = &run.out {
        pairs.push(("out".into(), o.display().to_string()));
    }
    for s in &run.overrides {
        pairs.push(parse_override(s)?);
    }
    RunConfig::from_pairs(&pairs, default_preset)
}

fn required<'a>(v: &'a Option<PathBuf>, what: &str) -> Result<&'a PathBuf> {
    v.as_ref()
        .ok_or_else(|| CliError::Usage(format!("{what} is required")))
}

fn train(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = run_config(&a.run, Preset::Published, &[("data.train", a.train.as_ref())])?;
    let dir = required(&cfg.out, "an output directory (--out)")?.clone();
    let train_path = required(&cfg.train_path, "a training series (--train)")?.clone();
    let series = load_any(&train_path)?;
    let p = cfg.resolved(series.dims())?;
    let (model, log) = fit(&series, &p.model, &p.train)?;

    make_dir(&dir)?;
    let ckpt = dir.join("checkpoint.amad");
    save_checkpoint(&ckpt, &model)?;
    let log_path = dir.join("train_log.csv");
    reports::save_train_log(&log_path, &log)?;
    let mut m = Manifest::new("train", cfg.to_pairs());
    m.result("epochs", log.epochs.len())
        .result("best_epoch", log.best_epoch)
        .result("stopped_early", log.stopped_early)
        .result("cad_evaluations", log.cad_evaluations)
        .result("contrastive_evaluations", log.contrastive_evaluations)
        .artifact(&ckpt)
        .artifact(&log_path);
    m.write(&dir)?;
    say(
        out,
        format_args!(
            "trained {} epochs (best {}), wrote {}",
            log.epochs.len(),
            log.best_epoch,
            ckpt.display()
        ),
    )
}

fn score(a: ScoreArgs, out: &mut dyn Write) -> Result<()> {
    let population = match a.population.as_deref() {
        Some(s) => ThresholdPopulation::parse(s)
            .ok_or_else(|| CliError::Usage(format!("unknown population {s:?} (train_test or test)")))?,
        None if a.train.is_some() => ThresholdPopulation::TrainAndTest,
        None => ThresholdPopulation::TestOnly,
    };
    if population == ThresholdPopulation::TrainAndTest && a.train.is_none() {
        return Err(CliError::Usage("population train_test needs --train".into()));
    }
    if !(a.ar > 0.0 && a.ar < 100.0) {
        return Err(CliError::Usage(format!("--ar {} must be in (0, 100)", a.ar)));
    }
    if a.batch_size == 0 {
        return Err(CliError::Usage("--batch-size must be positive".into()));
    }
    let scfg = ScoreConfig {
        anomaly_ratio: a.ar,
        population,
        batch_size: a.batch_size,
    };
    let model = load_checkpoint(&a.checkpoint)?;
    let series = load_any(&a.series)?;
    let test_scores = score_series(&model, &series, scfg.batch_size)?;
    let train_scores = match (&a.train, population) {
        (Some(p), ThresholdPopulation::TrainAndTest) => score_series(&model, &load_any(p)?, scfg.batch_size)?.scores,
        _ => Vec::new(),
    };
    let report = build_report(&train_scores, &test_scores.scores, series.labels.as_deref(), &scfg)?;

    make_dir(&a.out)?;
    let scores_path = a.out.join("scores.csv");
    reports::save_scores(&scores_path, &report)?;
    let settings = vec![
        ("score.ar".to_string(), scfg.anomaly_ratio.to_string()),
        ("score.population".to_string(), population.as_str().to_string()),
        ("score.batch_size".to_string(), scfg.batch_size.to_string()),
    ];
    let mut m = Manifest::new("score", settings);
    m.result("threshold", report.threshold)
        .result("flagged", report.flags_raw.iter().filter(|&&f| f == 1).count())
        .artifact(&a.checkpoint)
        .artifact(&a.series);
    if let Some(t) = &a.train {
        m.artifact(t);
    }
    m.artifact(&scores_path);
    if let Some(res) = report.evaluate() {
        let (raw, adj) = res?;
        let eval_path = a.out.join("eval.csv");
        reports::save_eval(&eval_path, &raw, &adj)?;
        m.result("f1_raw", raw.f1).result("f1_adjusted", adj.f1).artifact(&eval_path);
        say(out, format_args!("F1 raw {:.4}, adjusted {:.4}", raw.f1, adj.f1))?;
    }
    m.write(&a.out)?;
    say(
        out,
        format_args!("threshold {}, wrote {}", report.threshold, scores_path.display()),
    )
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    let trace = reports::load_scores(&a.scores)?;
    let labels = match &a.labels {
        Some(p) => load_any(p)?
            .labels
            .ok_or_else(|| CliError::Data(format!("{} has no label column", p.display())))?,
        None => trace
            .labels
            .clone()
            .ok_or_else(|| CliError::Usage("no ground truth: pass --labels or a trace with a gt column".into()))?,
    };
    if labels.len() != trace.flags.len() {
        return Err(CliError::Data(format!(
            "{} labels for {} scores",
            labels.len(),
            trace.flags.len()
        )));
    }
    let raw = precision_recall_f1(&trace.flags, &labels)?;
    let adj = precision_recall_f1(&point_adjust(&trace.flags, &labels)?, &labels)?;
    let mut table = Vec::new();
    reports::write_eval(&mut table, &raw, &adj)?;
    out.write_all(&table).map_err(|e| CliError::io("<stdout>", e))?;
    if let Some(dir) = &a.out {
        make_dir(dir)?;
        let path = dir.join("eval.csv");
        std::fs::write(&path, &table).map_err(|e| CliError::io(&path, e))?;
        let mut m = Manifest::new("eval", Vec::new());
        m.result("f1_raw", raw.f1)
            .result("f1_adjusted", adj.f1)
            .artifact(&a.scores)
            .artifact(&path);
        m.write(dir)?;
    }
    Ok(())
}

/// Loads train/test, checks dimensions, resolves the pipeline.
fn experiment_inputs(cfg: &RunConfig) -> Result<(TimeSeries, TimeSeries, PipelineConfig)> {
    let train = load_any(required(&cfg.train_path, "a training series (--train)")?)?;
    let test = load_any(required(&cfg.test_path, "a labelled test series (--test)")?)?;
    if train.dims() != test.dims() {
        return Err(CliError::Data(format!(
            "train has {} channels, test has {}",
            train.dims(),
            test.dims()
        )));
    }
    let p = cfg.resolved(train.dims())?;
    Ok((train, test, p))
}

fn grid(a: GridArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = run_config(
        &a.run,
        Preset::Desk,
        &[("data.train", a.train.as_ref()), ("data.test", a.test.as_ref())],
    )?;
    let dir = required(&cfg.out, "an output directory (--out)")?.clone();
    let (train, test, base) = experiment_inputs(&cfg)?;
    let alphas = if a.alphas.is_empty() { ALPHA_GRID.to_vec() } else { a.alphas };
    let taus = if a.taus.is_empty() { TAU_GRID.to_vec() } else { a.taus };
    let workers = parallel::worker_count(alphas.len() * taus.len())?;
    let report = parallel::grid(&train, &test, &alphas, &taus, &base, workers);

    make_dir(&dir)?;
    let path = dir.join("grid.csv");
    reports::save_grid(&path, &report)?;
    let mut settings = cfg.to_pairs();
    settings.push(("grid.alphas".into(), join(&alphas)));
    settings.push(("grid.taus".into(), join(&taus)));
    let mut m = Manifest::new("grid", settings);
    m.result("failed_cells", report.cells.iter().filter(|c| c.result.is_err()).count())
        .artifact(&path);
    m.write(&dir)?;
    for c in &report.cells {
        match &c.result {
            Ok(r) => say(out, format_args!("alpha {} tau {}: F1 {:.4}", c.alpha, c.tau, r.f1))?,
            Err(e) => say(out, format_args!("alpha {} tau {}: failed: {e}", c.alpha, c.tau))?,
        }
    }
    say(out, format_args!("wrote {}", path.display()))
}

fn join(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

fn parse_dataset(spec: &str) -> Result<(String, PathBuf, PathBuf)> {
    let bad = || CliError::Usage(format!("dataset {spec:?} must look like NAME=TRAIN:TEST"));
    let (name, paths) = spec.split_once('=').ok_or_else(bad)?;
    let (tr, te) = paths.split_once(':').ok_or_else(bad)?;
    if name.is_empty() || tr.is_empty() || te.is_empty() {
        return Err(bad());
    }
    Ok((name.to_string(), PathBuf::from(tr), PathBuf::from(te)))
}

fn ablate(a: AblateArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = run_config(
        &a.run,
        Preset::Desk,
        &[("data.train", a.train.as_ref()), ("data.test", a.test.as_ref())],
    )?;
    let dir = required(&cfg.out, "an output directory (--out)")?.clone();
    let mut datasets = Vec::new();
    let mut base: Option<PipelineConfig> = None;
    if a.datasets.is_empty() {
        let (train, test, p) = experiment_inputs(&cfg)?;
        base = Some(p);
        datasets.push(Dataset {
            name: "data".into(),
            train,
            test,
        });
    } else {
        for spec in &a.datasets {
            let (name, tr, te) = parse_dataset(spec)?;
            let mut c = cfg.clone();
            c.train_path = Some(tr);
            c.test_path = Some(te);
            let (train, test, p) = experiment_inputs(&c)?;
            if base.as_ref().is_some_and(|b| b.model.input_dim != p.model.input_dim) {
                return Err(CliError::Data(
                    "ablation datasets must share a channel count".into(),
                ));
            }
            base.get_or_insert(p);
            datasets.push(Dataset { name, train, test });
        }
    }
    let base = base.expect("at least one dataset");
    let workers = parallel::worker_count(ABLATION_ROWS.len() * datasets.len())?;
    let results = parallel::ablation(&ABLATION_ROWS, &datasets, &base, workers);

    make_dir(&dir)?;
    let path = dir.join("ablation.csv");
    let names: Vec<String> = datasets.iter().map(|d| d.name.clone()).collect();
    reports::save_ablation(&path, &names, &results)?;
    let mut settings = cfg.to_pairs();
    settings.extend(a.datasets.iter().map(|d| ("ablate.dataset".to_string(), d.clone())));
    let mut m = Manifest::new("ablate", settings);
    m.artifact(&path);
    m.write(&dir)?;
    for r in &results {
        let f1 = r.avg_f1.map_or("failed".to_string(), |f| format!("{f:.4}"));
        say(
            out,
            format_args!(
                "min {} max {} contrastive {} automask {}: avg F1 {f1}",
                r.row.min as u8, r.row.max as u8, r.row.contrastive as u8, r.row.automask as u8
            ),
        )?;
    }
    say(out, format_args!("wrote {}", path.display()))
}
