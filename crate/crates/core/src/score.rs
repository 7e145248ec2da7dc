//! Anomaly scores, percentile thresholds, point adjustment and metrics.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::TimeSeries;
use crate::error::{AmadError, Result};
use crate::graph::{softmax_in_place, Graph};
use crate::model::model_forward;
use crate::objective::cad;
use crate::tensor::Tensor;
use crate::train::TrainedModel;

/// Which scores the percentile threshold is computed over.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum ThresholdPopulation {
    /// Train and test scores pooled together.
    #[default]
    TrainAndTest,
    TestOnly,
}

impl ThresholdPopulation {
    pub fn as_str(self) -> &'static str {
        match self {
            ThresholdPopulation::TrainAndTest => "train_test",
            ThresholdPopulation::TestOnly => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train_test" => Some(ThresholdPopulation::TrainAndTest),
            "test" => Some(ThresholdPopulation::TestOnly),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreConfig {
    /// Anomaly ratio in percent; the threshold is the `(100 - ar)`-th
    /// percentile of the population.
    pub anomaly_ratio: f64,
    pub population: ThresholdPopulation,
    /// Windows per inference batch.
    pub batch_size: usize,
}

impl ScoreConfig {
    /// Thresholding used with the CPU-scale setup.
    pub fn desk() -> Self {
        ScoreConfig {
            anomaly_ratio: 0.25,
            population: ThresholdPopulation::TestOnly,
            ..Self::default()
        }
    }
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig {
            anomaly_ratio: 1.0,
            population: ThresholdPopulation::TrainAndTest,
            batch_size: 64,
        }
    }
}

/// Per-position score of one window:
/// `softmax(-cad) * ||x_t - recon_t||^2`.
///
/// `cad` may be `None` (no AutoMask branch), in which case every position
/// gets weight `1 / N`.
pub fn anomaly_score(x: &[f64], recon: &[f64], cad: Option<&[f64]>, dims: usize) -> Result<Vec<f64>> {
    if x.len() != recon.len() || dims == 0 || x.len() % dims != 0 {
        return Err(AmadError::shape("anomaly_score", &[x.len()], &[recon.len()]));
    }
    let n = x.len() / dims;
    let mut weights = match cad {
        Some(c) => {
            if c.len() != n {
                return Err(AmadError::shape("anomaly_score", &[n], &[c.len()]));
            }
            c.iter().map(|v| -v).collect()
        }
        None => vec![0.0; n],
    };
    softmax_in_place(&mut weights);
    Ok(weights
        .iter()
        .zip(x.chunks(dims).zip(recon.chunks(dims)))
        .map(|(w, (xt, rt))| {
            let err: f64 = xt.iter().zip(rt).map(|(a, b)| (a - b) * (a - b)).sum();
            w * err
        })
        .collect())
}

/// Linear-interpolated percentile, `q` in `[0, 100]`.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(AmadError::Data("percentile of an empty population".into()));
    }
    if !(0.0..=100.0).contains(&q) {
        return Err(AmadError::Config(format!("percentile {q} outside [0, 100]")));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(AmadError::Numeric("NaN in score population".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = libm::floor(pos) as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    Ok(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

/// The `(100 - ar)`-th percentile of `scores`.
pub fn threshold_from_percentile(scores: &[f64], anomaly_ratio: f64) -> Result<f64> {
    if !(anomaly_ratio > 0.0 && anomaly_ratio < 100.0) {
        return Err(AmadError::Config(format!(
            "anomaly ratio {anomaly_ratio} must be in (0, 100)"
        )));
    }
    percentile(scores, 100.0 - anomaly_ratio)
}

/// Flags every score strictly above the threshold.
pub fn flag(scores: &[f64], threshold: f64) -> Vec<u8> {
    scores.iter().map(|&s| (s > threshold) as u8).collect()
}

/// Contiguous runs of ones as half-open `(start, end)` ranges.
pub fn segments(labels: &[u8]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &l) in labels.iter().enumerate() {
        match (l != 0, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, labels.len()));
    }
    out
}

/// If any point of a ground-truth segment is flagged, the whole segment is.
pub fn point_adjust(flags: &[u8], truth: &[u8]) -> Result<Vec<u8>> {
    if flags.len() != truth.len() {
        return Err(AmadError::shape("point_adjust", &[flags.len()], &[truth.len()]));
    }
    let mut out: Vec<u8> = flags.iter().map(|&f| (f != 0) as u8).collect();
    for (s, e) in segments(truth) {
        if out[s..e].iter().any(|&f| f != 0) {
            out[s..e].iter_mut().for_each(|f| *f = 1);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Precision, recall and F1; empty denominators give 0.
pub fn precision_recall_f1(flags: &[u8], truth: &[u8]) -> Result<EvalReport> {
    if flags.len() != truth.len() {
        return Err(AmadError::shape("precision_recall_f1", &[flags.len()], &[truth.len()]));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&f, &t) in flags.iter().zip(truth) {
        match (f != 0, t != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(EvalReport {
        precision,
        recall,
        f1,
        tp,
        fp,
        fn_,
    })
}

/// Per-timestamp scores of a raw series.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesScores {
    pub scores: Vec<f64>,
    /// Inference batches in which CAD was computed.
    pub cad_evaluations: u64,
}

/// Scores every timestamp of `series` (raw values).
///
/// The series is cut into non-overlapping windows. A trailing partial
/// window is left-padded by repeating its first frame; padded positions
/// are dropped from the output.
pub fn score_series(model: &TrainedModel, series: &TimeSeries, batch_size: usize) -> Result<SeriesScores> {
    let cfg = &model.params.config;
    let (n, d) = (cfg.window_len, cfg.input_dim);
    if series.dims() != d {
        return Err(AmadError::Data(format!(
            "model expects {d} channels, series has {}",
            series.dims()
        )));
    }
    if series.is_empty() {
        return Err(AmadError::Data("cannot score an empty series".into()));
    }
    let norm = model.norm.normalize(series)?;
    let values = norm.values();
    let len = series.len();

    // (window data, number of leading pad frames)
    let mut windows: Vec<(Vec<f64>, usize)> = Vec::new();
    let mut start = 0;
    while start < len {
        let real = (len - start).min(n);
        let pad = n - real;
        let mut w = Vec::with_capacity(n * d);
        for _ in 0..pad {
            w.extend_from_slice(&values[start * d..(start + 1) * d]);
        }
        w.extend_from_slice(&values[start * d..(start + real) * d]);
        windows.push((w, pad));
        start += real;
    }

    let mut scores = Vec::with_capacity(len);
    let mut cad_evaluations = 0;
    for chunk in windows.chunks(batch_size.max(1)) {
        let k = chunk.len();
        let data: Vec<f64> = chunk.iter().flat_map(|(w, _)| w.iter().copied()).collect();
        let mut g = Graph::new();
        let bound = model.params.bind(&mut g, false);
        let x = g.constant(&Tensor::new([k, n, d], data)?);
        let fwd = model_forward(&mut g, cfg, &bound, x)?;
        let cad_values = if cfg.automask {
            cad_evaluations += 1;
            let c = cad(&mut g, &fwd.attn)?;
            Some(g.value(c).to_vec())
        } else {
            None
        };
        let xv = g.value(x);
        let rv = g.value(fwd.recon);
        for (i, (_, pad)) in chunk.iter().enumerate() {
            let span = i * n * d..(i + 1) * n * d;
            let c = cad_values.as_ref().map(|c| &c[i * n..(i + 1) * n]);
            let s = anomaly_score(&xv[span.clone()], &rv[span], c, d)?;
            scores.extend_from_slice(&s[*pad..]);
        }
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(AmadError::Numeric("non-finite anomaly score".into()));
    }
    Ok(SeriesScores {
        scores,
        cad_evaluations,
    })
}

/// Thresholded test scores, with and without point adjustment.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    pub scores: Vec<f64>,
    pub threshold: f64,
    pub anomaly_ratio: f64,
    pub flags_raw: Vec<u8>,
    /// Equal to `flags_raw` when no labels are available.
    pub flags_adjusted: Vec<u8>,
    pub labels: Option<Vec<u8>>,
}

impl ScoreReport {
    /// Raw and point-adjusted metrics, if labels are known.
    pub fn evaluate(&self) -> Option<Result<(EvalReport, EvalReport)>> {
        self.labels.as_ref().map(|l| {
            Ok((
                precision_recall_f1(&self.flags_raw, l)?,
                precision_recall_f1(&self.flags_adjusted, l)?,
            ))
        })
    }
}

/// Thresholds `test_scores` using the configured population.
pub fn build_report(
    train_scores: &[f64],
    test_scores: &[f64],
    labels: Option<&[u8]>,
    cfg: &ScoreConfig,
) -> Result<ScoreReport> {
    let threshold = match cfg.population {
        ThresholdPopulation::TrainAndTest => {
            let mut pool = train_scores.to_vec();
            pool.extend_from_slice(test_scores);
            threshold_from_percentile(&pool, cfg.anomaly_ratio)?
        }
        ThresholdPopulation::TestOnly => threshold_from_percentile(test_scores, cfg.anomaly_ratio)?,
    };
    let flags_raw = flag(test_scores, threshold);
    let flags_adjusted = match labels {
        Some(l) => point_adjust(&flags_raw, l)?,
        None => flags_raw.clone(),
    };
    Ok(ScoreReport {
        scores: test_scores.to_vec(),
        threshold,
        anomaly_ratio: cfg.anomaly_ratio,
        flags_raw,
        flags_adjusted,
        labels: labels.map(|l| l.to_vec()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_interpolates() {
        let v: Vec<f64> = (1..=5).map(|i| i as f64).collect();
        assert_eq!(percentile(&v, 50.0).unwrap(), 3.0);
        assert_eq!(percentile(&v, 0.0).unwrap(), 1.0);
        assert_eq!(percentile(&v, 100.0).unwrap(), 5.0);
        assert!((percentile(&v, 90.0).unwrap() - 4.6).abs() < 1e-12);
        let t = threshold_from_percentile(&v, 20.0).unwrap();
        assert!((t - 4.2).abs() < 1e-12);
        assert_eq!(flag(&v, t), vec![0, 0, 0, 0, 1]);
    }

    #[test]
    fn threshold_errors() {
        assert!(matches!(threshold_from_percentile(&[], 1.0), Err(AmadError::Data(_))));
        assert!(threshold_from_percentile(&[1.0], 0.0).is_err());
        assert!(threshold_from_percentile(&[1.0], 100.0).is_err());
    }

    #[test]
    fn ar_one_flags_ten_of_a_thousand() {
        let s: Vec<f64> = (0..1000).map(|i| i as f64 * 0.5).collect();
        let t = threshold_from_percentile(&s, 1.0).unwrap();
        assert_eq!(flag(&s, t).iter().filter(|&&f| f == 1).count(), 10);
    }

    #[test]
    fn point_adjust_example() {
        let gt = [0, 1, 1, 1, 0];
        let flags = [0, 0, 1, 0, 0];
        let adj = point_adjust(&flags, &gt).unwrap();
        assert_eq!(adj, vec![0, 1, 1, 1, 0]);
        let r = precision_recall_f1(&adj, &gt).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
        let raw = precision_recall_f1(&flags, &gt).unwrap();
        assert_eq!(raw.tp, 1);
        assert!((raw.recall - 1.0 / 3.0).abs() < 1e-15);
        assert!((raw.f1 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn empty_denominators_give_zero() {
        let r = precision_recall_f1(&[0, 0, 0], &[0, 0, 0]).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
        assert!(point_adjust(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn segments_cover_runs() {
        assert_eq!(segments(&[1, 1, 0, 1, 0, 0, 1]), vec![(0, 2), (3, 4), (6, 7)]);
        assert!(segments(&[0, 0]).is_empty());
    }

    #[test]
    fn score_weights_favour_low_discrepancy() {
        let x = [1.0, 1.0, 1.0];
        let r = [0.0, 0.0, 0.0];
        let s = anomaly_score(&x, &r, Some(&[0.0, 0.0, 0.69]), 1).unwrap();
        assert!(s[0] == s[1] && s[2] < s[0]);
        let u = anomaly_score(&x, &r, None, 1).unwrap();
        for v in u {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn population_choice() {
        let train = [0.0; 99];
        let test = [1.0];
        let both = build_report(&train, &test, None, &ScoreConfig::default()).unwrap();
        assert_eq!(both.flags_raw, vec![1]);
        let only = build_report(
            &train,
            &test,
            None,
            &ScoreConfig {
                population: ThresholdPopulation::TestOnly,
                ..ScoreConfig::default()
            },
        )
        .unwrap();
        assert_eq!(only.flags_raw, vec![0]);
    }
}
