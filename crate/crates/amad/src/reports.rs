//! CSV outputs: training logs, score traces, evaluation tables, grid and
//! ablation summaries. All floats use shortest round-trip formatting.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use amad_core::harness::{AblationResult, GridReport, Metrics};
use amad_core::score::{EvalReport, ScoreReport};
use amad_core::train::TrainLog;

use crate::error::{CliError, Result};
use crate::series_csv::csv_err;

fn create(path: &Path) -> Result<csv::Writer<File>> {
    let f = File::create(path).map_err(|e| CliError::io(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

fn finish<W: Write>(mut w: csv::Writer<W>) -> Result<()> {
    w.flush().map_err(|e| CliError::Data(format!("write failed: {e}")))
}

pub fn write_train_log<W: Write>(writer: W, log: &TrainLog) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["epoch", "recon", "cad_l1", "contrastive", "val_recon", "lr"])
        .map_err(csv_err)?;
    for e in &log.epochs {
        w.write_record([
            e.epoch.to_string(),
            e.losses.recon.to_string(),
            e.losses.cad_l1.to_string(),
            e.losses.contrastive.to_string(),
            e.val_recon.to_string(),
            e.lr.to_string(),
        ])
        .map_err(csv_err)?;
    }
    finish(w)
}

pub fn save_train_log(path: &Path, log: &TrainLog) -> Result<()> {
    let f = File::create(path).map_err(|e| CliError::io(path, e))?;
    write_train_log(f, log)
}

/// Per-timestamp trace: `timestamp,score,flag_raw,flag_adjusted,gt`. The
/// adjusted flag and ground truth are empty when no labels are known.
pub fn save_scores(path: &Path, report: &ScoreReport) -> Result<()> {
    let mut w = create(path)?;
    w.write_record(["timestamp", "score", "flag_raw", "flag_adjusted", "gt"])
        .map_err(csv_err)?;
    for (t, s) in report.scores.iter().enumerate() {
        let (adj, gt) = match &report.labels {
            Some(l) => (report.flags_adjusted[t].to_string(), l[t].to_string()),
            None => (String::new(), String::new()),
        };
        w.write_record([t.to_string(), s.to_string(), report.flags_raw[t].to_string(), adj, gt])
            .map_err(csv_err)?;
    }
    finish(w)
}

/// A score trace read back from CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTrace {
    pub scores: Vec<f64>,
    pub flags: Vec<u8>,
    pub labels: Option<Vec<u8>>,
}

/// Reads a trace written by [`save_scores`]; only `score` and `flag_raw`
/// are required, `gt` is used when every row has one.
pub fn read_scores<R: Read>(reader: R) -> Result<ScoreTrace> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| CliError::Data(format!("unreadable header: {e}")))?
        .clone();
    let col = |name: &str| header.iter().position(|h| h == name);
    let score_i = col("score").ok_or_else(|| CliError::Data("missing score column".into()))?;
    let flag_i = col("flag_raw").ok_or_else(|| CliError::Data("missing flag_raw column".into()))?;
    let gt_i = col("gt");
    let mut trace = ScoreTrace {
        scores: Vec::new(),
        flags: Vec::new(),
        labels: None,
    };
    let mut gt: Vec<Option<u8>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::Data(format!("malformed CSV: {e}")))?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |i: usize| rec.get(i).unwrap_or("");
        let s: f64 = field(score_i)
            .parse()
            .map_err(|_| CliError::Data(format!("line {line}: bad score {:?}", field(score_i))))?;
        let f = bit(field(flag_i))
            .ok_or_else(|| CliError::Data(format!("line {line}: bad flag {:?}", field(flag_i))))?;
        trace.scores.push(s);
        trace.flags.push(f);
        gt.push(gt_i.and_then(|i| bit(field(i))));
    }
    if !gt.is_empty() && gt.iter().all(Option::is_some) {
        trace.labels = Some(gt.into_iter().flatten().collect());
    }
    Ok(trace)
}

fn bit(s: &str) -> Option<u8> {
    match s {
        "0" => Some(0),
        "1" => Some(1),
        _ => None,
    }
}

pub fn load_scores(path: &Path) -> Result<ScoreTrace> {
    let f = File::open(path).map_err(|e| CliError::io(path, e))?;
    read_scores(f)
}

pub const EVAL_HEADER: [&str; 7] = ["mode", "P", "R", "F1", "TP", "FP", "FN"];

fn eval_row(mode: &str, r: &EvalReport) -> [String; 7] {
    [
        mode.to_string(),
        r.precision.to_string(),
        r.recall.to_string(),
        r.f1.to_string(),
        r.tp.to_string(),
        r.fp.to_string(),
        r.fn_.to_string(),
    ]
}

pub fn write_eval<W: Write>(writer: W, raw: &EvalReport, adjusted: &EvalReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(EVAL_HEADER).map_err(csv_err)?;
    w.write_record(eval_row("raw", raw)).map_err(csv_err)?;
    w.write_record(eval_row("adjusted", adjusted)).map_err(csv_err)?;
    finish(w)
}

pub fn save_eval(path: &Path, raw: &EvalReport, adjusted: &EvalReport) -> Result<()> {
    let f = File::create(path).map_err(|e| CliError::io(path, e))?;
    write_eval(f, raw, adjusted)
}

fn metric_cells(m: Option<&Metrics>) -> [String; 3] {
    match m {
        Some(m) => [m.precision.to_string(), m.recall.to_string(), m.f1.to_string()],
        None => Default::default(),
    }
}

/// One row per cell, then the alpha and tau marginals. Failed cells keep
/// their error message and leave the metric columns empty.
pub fn save_grid(path: &Path, grid: &GridReport) -> Result<()> {
    let mut w = create(path)?;
    w.write_record(["kind", "alpha", "tau", "P", "R", "F1", "error"])
        .map_err(csv_err)?;
    for c in &grid.cells {
        let [p, r, f] = metric_cells(c.result.as_ref().ok());
        let err = c.result.as_ref().err().cloned().unwrap_or_default();
        w.write_record(["cell".into(), c.alpha.to_string(), c.tau.to_string(), p, r, f, err])
            .map_err(csv_err)?;
    }
    for (a, m) in &grid.alpha_marginals {
        let [p, r, f] = metric_cells(m.as_ref());
        w.write_record(["alpha".into(), a.to_string(), String::new(), p, r, f, String::new()])
            .map_err(csv_err)?;
    }
    for (t, m) in &grid.tau_marginals {
        let [p, r, f] = metric_cells(m.as_ref());
        w.write_record(["tau".into(), String::new(), t.to_string(), p, r, f, String::new()])
            .map_err(csv_err)?;
    }
    finish(w)
}

/// Ablation table. With a single dataset the metric columns are plain
/// `P,R,F1`; otherwise each is prefixed with the dataset name.
pub fn save_ablation(path: &Path, dataset_names: &[String], results: &[AblationResult]) -> Result<()> {
    let mut w = create(path)?;
    let mut header: Vec<String> = ["Min Strategy", "Max Strategy", "Contrastive Strategy", "AutoMask Module"]
        .map(String::from)
        .to_vec();
    for name in dataset_names {
        for m in ["P", "R", "F1"] {
            header.push(if dataset_names.len() == 1 {
                m.to_string()
            } else {
                format!("{name} {m}")
            });
        }
    }
    header.extend(["Avg F1", "CAD Evaluations", "Contrastive Evaluations"].map(String::from));
    w.write_record(&header).map_err(csv_err)?;
    let mark = |b: bool| if b { "1" } else { "0" }.to_string();
    for r in results {
        let mut row = vec![
            mark(r.row.min),
            mark(r.row.max),
            mark(r.row.contrastive),
            mark(r.row.automask),
        ];
        for m in &r.metrics {
            row.extend(metric_cells(m.as_ref().ok()));
        }
        row.push(r.avg_f1.map(|f| f.to_string()).unwrap_or_default());
        row.push(r.cad_evaluations.to_string());
        row.push(r.contrastive_evaluations.to_string());
        w.write_record(&row).map_err(csv_err)?;
    }
    finish(w)
}
