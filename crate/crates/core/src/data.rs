//! Series containers, normalization, windowing and synthetic data.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{AmadError, Result};
use crate::tensor::Tensor;

/// Floor for per-channel standard deviations.
pub const STD_FLOOR: f64 = 1e-8;

/// A multivariate series stored row-major, `len x dims`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    values: Vec<f64>,
    dims: usize,
    pub channels: Vec<String>,
    pub labels: Option<Vec<u8>>,
}

impl TimeSeries {
    pub fn new(
        values: Vec<f64>,
        channels: Vec<String>,
        labels: Option<Vec<u8>>,
    ) -> Result<Self> {
        let dims = channels.len();
        if dims == 0 {
            return Err(AmadError::Data("series needs at least one channel".into()));
        }
        if values.len() % dims != 0 {
            return Err(AmadError::Data(format!(
                "{} values do not fill rows of {dims} channels",
                values.len()
            )));
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(AmadError::Data("series contains NaN".into()));
        }
        let len = values.len() / dims;
        if let Some(l) = &labels {
            if l.len() != len {
                return Err(AmadError::Data(format!(
                    "{} labels for {len} rows",
                    l.len()
                )));
            }
            if l.iter().any(|&v| v > 1) {
                return Err(AmadError::Data("labels must be 0 or 1".into()));
            }
        }
        Ok(TimeSeries {
            values,
            dims,
            channels,
            labels,
        })
    }

    /// Series with channels named `c0, c1, ...`.
    pub fn unnamed(values: Vec<f64>, dims: usize, labels: Option<Vec<u8>>) -> Result<Self> {
        let channels = (0..dims).map(|i| format!("c{i}")).collect();
        Self::new(values, channels, labels)
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.dims
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.dims..(t + 1) * self.dims]
    }
}

/// Per-channel mean and standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Population statistics of the training series; std floored at
    /// [`STD_FLOOR`].
    pub fn fit(series: &TimeSeries) -> Result<Self> {
        let (n, d) = (series.len(), series.dims());
        if n == 0 {
            return Err(AmadError::Data("cannot fit statistics on an empty series".into()));
        }
        let mut mean = vec![0.0; d];
        for t in 0..n {
            mean.iter_mut().zip(series.row(t)).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for t in 0..n {
            for ((acc, v), m) in var.iter_mut().zip(series.row(t)).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|v| libm::sqrt(v / n as f64).max(STD_FLOOR))
            .collect();
        Ok(NormStats { mean, std })
    }

    fn check(&self, series: &TimeSeries) -> Result<()> {
        if series.dims() != self.mean.len() {
            return Err(AmadError::Data(format!(
                "statistics fitted on {} channels, series has {}",
                self.mean.len(),
                series.dims()
            )));
        }
        Ok(())
    }

    /// `(x - mean) / std` per channel. Labels and names carry over.
    pub fn normalize(&self, series: &TimeSeries) -> Result<TimeSeries> {
        self.check(series)?;
        let d = series.dims();
        let values = series
            .values()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % d]) / self.std[i % d])
            .collect();
        TimeSeries::new(values, series.channels.clone(), series.labels.clone())
    }

    pub fn denormalize(&self, series: &TimeSeries) -> Result<TimeSeries> {
        self.check(series)?;
        let d = series.dims();
        let values = series
            .values()
            .iter()
            .enumerate()
            .map(|(i, v)| v * self.std[i % d] + self.mean[i % d])
            .collect();
        TimeSeries::new(values, series.channels.clone(), series.labels.clone())
    }
}

/// Windows cut from a series, `count x window_len x dims`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    pub data: Vec<f64>,
    pub window_len: usize,
    pub dims: usize,
    pub offsets: Vec<usize>,
}

impl WindowBatch {
    pub fn count(&self) -> usize {
        self.offsets.len()
    }

    pub fn window(&self, i: usize) -> &[f64] {
        let size = self.window_len * self.dims;
        &self.data[i * size..(i + 1) * size]
    }

    /// Stacks the selected windows into a `[k, window_len, dims]` tensor.
    pub fn gather(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.window_len * self.dims);
        for &i in indices {
            data.extend_from_slice(self.window(i));
        }
        Tensor::new([indices.len(), self.window_len, self.dims], data)
            .expect("window sizes are consistent")
    }
}

/// Windows at offsets `0, stride, 2*stride, ...`; there are
/// `(len - window_len) / stride + 1` of them.
pub fn sliding_windows(series: &TimeSeries, window_len: usize, stride: usize) -> Result<WindowBatch> {
    if window_len == 0 || stride == 0 {
        return Err(AmadError::Config("window length and stride must be positive".into()));
    }
    let len = series.len();
    if len < window_len {
        return Err(AmadError::Data(format!(
            "series of length {len} is shorter than the window {window_len}"
        )));
    }
    let d = series.dims();
    let offsets: Vec<usize> = (0..=(len - window_len) / stride).map(|i| i * stride).collect();
    let mut data = Vec::with_capacity(offsets.len() * window_len * d);
    for &o in &offsets {
        data.extend_from_slice(&series.values()[o * d..(o + window_len) * d]);
    }
    Ok(WindowBatch {
        data,
        window_len,
        dims: d,
        offsets,
    })
}

/// Kind of injected anomaly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnomalyKind {
    /// One-step jump of `+5` channel standard deviations.
    Spike,
    /// Segment offset by `+3` channel standard deviations.
    LevelShift,
    /// Segment whose noise level is multiplied by 5.
    NoiseBurst,
}

impl AnomalyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AnomalyKind::Spike => "spike",
            AnomalyKind::LevelShift => "level_shift",
            AnomalyKind::NoiseBurst => "noise_burst",
        }
    }
}

/// One injected, labelled segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InjectedAnomaly {
    pub kind: AnomalyKind,
    pub start: usize,
    pub width: usize,
    pub channel: usize,
}

/// Synthetic data request.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub train_len: usize,
    pub test_len: usize,
    pub dims: usize,
    /// Target fraction of labelled test points.
    pub anomaly_fraction: f64,
    pub noise_sigma: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            train_len: 4000,
            test_len: 2000,
            dims: 3,
            anomaly_fraction: 0.01,
            noise_sigma: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub train: TimeSeries,
    pub test: TimeSeries,
    pub anomalies: Vec<InjectedAnomaly>,
}

const MIN_SYNTH_LEN: usize = 10;

/// Seeded generator: each channel is the sum of two sinusoids with random
/// periods and phases plus Gaussian noise; the test part continues the same
/// signal in time and carries labelled spikes, level shifts and noise
/// bursts covering `anomaly_fraction` of its points.
pub fn synth_generate(seed: u64, spec: &SynthSpec) -> Result<SynthData> {
    if !(0.0..0.5).contains(&spec.anomaly_fraction) {
        return Err(AmadError::Config(format!(
            "anomaly fraction {} must be in [0, 0.5)",
            spec.anomaly_fraction
        )));
    }
    if spec.train_len < MIN_SYNTH_LEN || spec.test_len < MIN_SYNTH_LEN || spec.dims == 0 {
        return Err(AmadError::Config(format!(
            "synthetic series need at least {MIN_SYNTH_LEN} points and one channel"
        )));
    }
    if !(spec.noise_sigma >= 0.0) {
        return Err(AmadError::Config("noise sigma must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = spec.dims;
    let waves: Vec<[(f64, f64); 2]> = (0..d)
        .map(|_| {
            let mut wave = || {
                let period = rng.random_range(20.0..120.0);
                let phase = rng.random_range(0.0..core::f64::consts::TAU);
                (period, phase)
            };
            [wave(), wave()]
        })
        .collect();
    let clean = |t: usize, c: usize| -> f64 {
        waves[c]
            .iter()
            .map(|(period, phase)| libm::sin(core::f64::consts::TAU * t as f64 / period + phase))
            .sum()
    };
    // Two unit sinusoids with unrelated periods: variance 1/2 + 1/2.
    let channel_std = 1.0;
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let total = spec.train_len + spec.test_len;
    let mut values = Vec::with_capacity(total * d);
    let mut noise_draws = Vec::with_capacity(total * d);
    for t in 0..total {
        for c in 0..d {
            let z: f64 = noise.sample(&mut rng);
            noise_draws.push(z);
            values.push(clean(t, c) + spec.noise_sigma * z);
        }
    }
    let mut test_values = values.split_off(spec.train_len * d);
    let test_noise = &noise_draws[spec.train_len * d..];

    let target = libm::round(spec.anomaly_fraction * spec.test_len as f64) as usize;
    let mut labels = vec![0u8; spec.test_len];
    let anomalies = place_anomalies(&mut rng, spec.test_len, d, target);
    for a in &anomalies {
        for t in a.start..a.start + a.width {
            labels[t] = 1;
            let i = t * d + a.channel;
            match a.kind {
                AnomalyKind::Spike => test_values[i] += 5.0 * channel_std,
                AnomalyKind::LevelShift => test_values[i] += 3.0 * channel_std,
                AnomalyKind::NoiseBurst => test_values[i] += 4.0 * spec.noise_sigma * test_noise[i],
            }
        }
    }
    Ok(SynthData {
        train: TimeSeries::unnamed(values, d, None)?,
        test: TimeSeries::unnamed(test_values, d, Some(labels))?,
        anomalies,
    })
}

fn place_anomalies(rng: &mut ChaCha8Rng, len: usize, dims: usize, target: usize) -> Vec<InjectedAnomaly> {
    const KINDS: [AnomalyKind; 3] = [AnomalyKind::Spike, AnomalyKind::LevelShift, AnomalyKind::NoiseBurst];
    const MAX_TRIES: usize = 1000;
    let mut out: Vec<InjectedAnomaly> = Vec::new();
    let mut placed = 0;
    let mut tries = 0;
    while placed < target && tries < MAX_TRIES {
        tries += 1;
        let kind = *KINDS.choose(rng).expect("non-empty");
        let remaining = target - placed;
        let width = match kind {
            AnomalyKind::Spike => 1,
            _ => rng.random_range(10..=30).min(remaining),
        };
        if width > len {
            continue;
        }
        let start = rng.random_range(0..=len - width);
        // Keep one normal point between segments so they stay separate.
        let clash = out.iter().any(|a| start <= a.start + a.width && a.start <= start + width);
        if clash {
            continue;
        }
        out.push(InjectedAnomaly {
            kind,
            start,
            width,
            channel: rng.random_range(0..dims),
        });
        placed += width;
    }
    out.sort_by_key(|a| a.start);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(values: &[f64], dims: usize) -> TimeSeries {
        TimeSeries::unnamed(values.to_vec(), dims, None).unwrap()
    }

    #[test]
    fn zscore_constant_channel_and_mean() {
        let s = series(&[1.0, 5.0, 2.0, 5.0, 3.0, 5.0, 6.0, 5.0], 2);
        let stats = NormStats::fit(&s).unwrap();
        let n = stats.normalize(&s).unwrap();
        for t in 0..4 {
            assert_eq!(n.row(t)[1], 0.0);
        }
        let m: f64 = (0..4).map(|t| n.row(t)[0]).sum::<f64>() / 4.0;
        assert!(m.abs() < 1e-9);
        let back = stats.denormalize(&n).unwrap();
        for (a, b) in back.values().iter().zip(s.values()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn zscore_uses_train_stats_on_test() {
        let train = series(&[0.0, 1.0, 2.0, 3.0], 1);
        let test = series(&[10.0, 11.0, 12.0], 1);
        let stats = NormStats::fit(&train).unwrap();
        let n = stats.normalize(&test).unwrap();
        let m: f64 = n.values().iter().sum::<f64>() / 3.0;
        assert!(m.abs() > 1.0);
        let wrong = series(&[1.0, 2.0], 2);
        assert!(stats.normalize(&wrong).is_err());
    }

    #[test]
    fn window_counts_and_values() {
        let s = series(&[0.0, 1.0, 2.0, 3.0, 4.0], 1);
        let w = sliding_windows(&s, 3, 1).unwrap();
        assert_eq!(w.count(), 3);
        assert_eq!(w.window(2), &[2.0, 3.0, 4.0]);
        let s = series(&(0..10).map(|v| v as f64).collect::<Vec<_>>(), 1);
        let w = sliding_windows(&s, 3, 3).unwrap();
        assert_eq!(w.count(), 3);
        assert_eq!(w.offsets, vec![0, 3, 6]);
        assert!(sliding_windows(&s, 11, 1).is_err());
    }

    #[test]
    fn nan_and_ragged_series_are_rejected() {
        assert!(TimeSeries::unnamed(vec![1.0, f64::NAN], 1, None).is_err());
        assert!(TimeSeries::unnamed(vec![1.0, 2.0, 3.0], 2, None).is_err());
        assert!(TimeSeries::unnamed(vec![1.0, 2.0], 1, Some(vec![0])).is_err());
    }

    #[test]
    fn synth_is_deterministic() {
        let spec = SynthSpec {
            train_len: 300,
            test_len: 300,
            ..SynthSpec::default()
        };
        let a = synth_generate(7, &spec).unwrap();
        let b = synth_generate(7, &spec).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        let c = synth_generate(8, &spec).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn synth_zero_fraction_has_no_labels() {
        let spec = SynthSpec {
            train_len: 200,
            test_len: 200,
            anomaly_fraction: 0.0,
            ..SynthSpec::default()
        };
        let d = synth_generate(1, &spec).unwrap();
        assert!(d.test.labels.as_ref().unwrap().iter().all(|&l| l == 0));
    }

    #[test]
    fn synth_label_mass_matches_request() {
        let spec = SynthSpec {
            train_len: 100,
            test_len: 10_000,
            ..SynthSpec::default()
        };
        let d = synth_generate(3, &spec).unwrap();
        let labelled: usize = d.test.labels.as_ref().unwrap().iter().map(|&l| l as usize).sum();
        assert_eq!(labelled, 100);
    }

    #[test]
    fn synth_rejects_large_fraction() {
        let spec = SynthSpec {
            anomaly_fraction: 0.5,
            ..SynthSpec::default()
        };
        assert!(matches!(synth_generate(1, &spec), Err(AmadError::Config(_))));
    }
}
