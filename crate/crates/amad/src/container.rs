//! Binary container shared by checkpoints and series files.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! b"AMAD"  u16 version  u8 kind
//! u32 meta_count   { str key, str value }*
//! u32 array_count  { str name, u32 ndim, u64 dims[ndim], f64 data[prod(dims)] }*
//! ```
//!
//! where `str` is a `u32` byte length followed by UTF-8. Encoding is
//! deterministic, so decode followed by encode reproduces the input bytes.

use std::path::Path;

use amad_core::data::{NormStats, TimeSeries};
use amad_core::model::{init_params, sinusoidal_table, AmadParams, AttentionScaling, ModelConfig, ParamSet};
use amad_core::train::TrainedModel;
use amad_core::Tensor;

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"AMAD";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PayloadKind {
    Checkpoint = 1,
    Series = 2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: PayloadKind,
    pub meta: Vec<(String, String)>,
    pub arrays: Vec<Array>,
}

impl Container {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            put_str(&mut out, &a.name);
            out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
            for &d in &a.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(CliError::Data("not an AMAD container (bad magic)".into()));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
        if version != VERSION {
            return Err(CliError::Data(format!("unsupported container version {version}")));
        }
        let kind = match r.take(1)?[0] {
            1 => PayloadKind::Checkpoint,
            2 => PayloadKind::Series,
            k => return Err(CliError::Data(format!("unknown payload kind {k}"))),
        };
        let n_meta = r.u32()?;
        let mut meta = Vec::new();
        for _ in 0..n_meta {
            meta.push((r.string()?, r.string()?));
        }
        let n_arrays = r.u32()?;
        let mut arrays = Vec::new();
        for _ in 0..n_arrays {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(16));
            for _ in 0..ndim {
                let d = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                shape.push(usize::try_from(d).map_err(|_| r.corrupt("dimension too large"))?);
            }
            let count = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| r.corrupt("array too large"))?;
            let bytes = count.checked_mul(8).ok_or_else(|| r.corrupt("array too large"))?;
            let data = r
                .take(bytes)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            arrays.push(Array { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(r.corrupt("trailing bytes"));
        }
        Ok(Container { kind, meta, arrays })
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| CliError::Data(format!("container lacks metadata {key:?}")))
    }

    fn array(&self, name: &str) -> Option<&Array> {
        self.arrays.iter().find(|a| a.name == name)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, what: &str) -> CliError {
        CliError::Data(format!("corrupt container at byte {}: {what}", self.pos))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(e) => {
                let s = &self.bytes[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(self.corrupt("truncated")),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.corrupt("invalid UTF-8"))
    }
}

fn model_meta(cfg: &ModelConfig) -> Vec<(String, String)> {
    [
        ("model.n_layers", cfg.n_layers.to_string()),
        ("model.d_model", cfg.d_model.to_string()),
        ("model.n_heads", cfg.n_heads.to_string()),
        ("model.window_len", cfg.window_len.to_string()),
        ("model.input_dim", cfg.input_dim.to_string()),
        ("model.mixup_alpha", cfg.mixup_alpha.to_string()),
        ("model.rope_base", cfg.rope_base.to_string()),
        ("model.seed", cfg.seed.to_string()),
        ("model.scaling", cfg.scaling.as_str().to_string()),
        ("model.automask", cfg.automask.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

fn model_from_meta(c: &Container) -> Result<ModelConfig> {
    fn num<T: std::str::FromStr>(c: &Container, key: &str) -> Result<T> {
        let v = c.meta(key)?;
        v.parse()
            .map_err(|_| CliError::Data(format!("bad checkpoint value {key} = {v:?}")))
    }
    let scaling = c.meta("model.scaling")?;
    let cfg = ModelConfig {
        n_layers: num(c, "model.n_layers")?,
        d_model: num(c, "model.d_model")?,
        n_heads: num(c, "model.n_heads")?,
        window_len: num(c, "model.window_len")?,
        input_dim: num(c, "model.input_dim")?,
        mixup_alpha: num(c, "model.mixup_alpha")?,
        rope_base: num(c, "model.rope_base")?,
        seed: num(c, "model.seed")?,
        scaling: AttentionScaling::parse(scaling)
            .ok_or_else(|| CliError::Data(format!("bad checkpoint scaling {scaling:?}")))?,
        automask: num(c, "model.automask")?,
    };
    cfg.validate()
        .map_err(|e| CliError::Data(format!("checkpoint holds an invalid config: {e}")))?;
    Ok(cfg)
}

pub fn checkpoint_container(model: &TrainedModel) -> Container {
    let mut arrays: Vec<Array> = model
        .params
        .weights
        .entries()
        .into_iter()
        .map(|(name, t)| Array {
            name,
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        })
        .collect();
    let d = model.norm.mean.len();
    for (name, v) in [("norm.mean", &model.norm.mean), ("norm.std", &model.norm.std)] {
        arrays.push(Array {
            name: name.into(),
            shape: vec![d],
            data: v.clone(),
        });
    }
    Container {
        kind: PayloadKind::Checkpoint,
        meta: model_meta(&model.params.config),
        arrays,
    }
}

pub fn model_from_container(c: &Container) -> Result<TrainedModel> {
    if c.kind != PayloadKind::Checkpoint {
        return Err(CliError::Data("container does not hold a checkpoint".into()));
    }
    let cfg = model_from_meta(c)?;
    let template = init_params(&cfg, cfg.seed)?;
    let mut tensors = Vec::new();
    for (name, t) in template.weights.entries() {
        let a = c
            .array(&name)
            .ok_or_else(|| CliError::Data(format!("checkpoint lacks {name}")))?;
        if a.shape != t.shape() {
            return Err(CliError::Data(format!(
                "checkpoint {name} has shape {:?}, expected {:?}",
                a.shape,
                t.shape()
            )));
        }
        tensors.push(Tensor::new(a.shape.clone(), a.data.clone())?);
    }
    let weights = ParamSet::from_ordered(cfg.n_layers, tensors)?;
    let norm_part = |name: &str| -> Result<Vec<f64>> {
        let a = c
            .array(name)
            .ok_or_else(|| CliError::Data(format!("checkpoint lacks {name}")))?;
        if a.shape != [cfg.input_dim] {
            return Err(CliError::Data(format!("checkpoint {name} has the wrong length")));
        }
        Ok(a.data.clone())
    };
    let norm = NormStats {
        mean: norm_part("norm.mean")?,
        std: norm_part("norm.std")?,
    };
    let params = AmadParams {
        positional: sinusoidal_table(cfg.window_len, cfg.d_model),
        config: cfg,
        weights,
    };
    if !params.is_finite() {
        return Err(CliError::Data("checkpoint contains non-finite weights".into()));
    }
    Ok(TrainedModel { params, norm })
}

pub fn series_container(series: &TimeSeries) -> Container {
    let mut meta = vec![("channels".to_string(), series.dims().to_string())];
    for (i, name) in series.channels.iter().enumerate() {
        meta.push((format!("channel.{i}"), name.clone()));
    }
    let mut arrays = vec![Array {
        name: "values".into(),
        shape: vec![series.len(), series.dims()],
        data: series.values().to_vec(),
    }];
    if let Some(l) = &series.labels {
        arrays.push(Array {
            name: "labels".into(),
            shape: vec![l.len()],
            data: l.iter().map(|&v| v as f64).collect(),
        });
    }
    Container {
        kind: PayloadKind::Series,
        meta,
        arrays,
    }
}

pub fn series_from_container(c: &Container) -> Result<TimeSeries> {
    if c.kind != PayloadKind::Series {
        return Err(CliError::Data("container does not hold a series".into()));
    }
    let d: usize = c
        .meta("channels")?
        .parse()
        .map_err(|_| CliError::Data("bad channel count".into()))?;
    let channels = (0..d)
        .map(|i| c.meta(&format!("channel.{i}")).map(str::to_string))
        .collect::<Result<Vec<_>>>()?;
    let values = c
        .array("values")
        .ok_or_else(|| CliError::Data("series lacks values".into()))?;
    if values.shape.len() != 2 || values.shape[1] != d {
        return Err(CliError::Data("series values have the wrong shape".into()));
    }
    let labels = match c.array("labels") {
        Some(a) => Some(
            a.data
                .iter()
                .map(|&v| match v {
                    0.0 => Ok(0),
                    1.0 => Ok(1),
                    _ => Err(CliError::Data(format!("label {v} is not 0 or 1"))),
                })
                .collect::<Result<Vec<u8>>>()?,
        ),
        None => None,
    };
    Ok(TimeSeries::new(values.data.clone(), channels, labels)?)
}

fn read_file(path: &Path) -> Result<Container> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Container::decode(&bytes).map_err(|e| match e {
        CliError::Data(m) => CliError::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn write_file(path: &Path, c: &Container) -> Result<()> {
    std::fs::write(path, c.encode()).map_err(|e| CliError::io(path, e))
}

pub fn save_checkpoint(path: &Path, model: &TrainedModel) -> Result<()> {
    write_file(path, &checkpoint_container(model))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainedModel> {
    model_from_container(&read_file(path)?)
}

pub fn save_series_binary(path: &Path, series: &TimeSeries) -> Result<()> {
    write_file(path, &series_container(series))
}

pub fn load_series_binary(path: &Path) -> Result<TimeSeries> {
    series_from_container(&read_file(path)?)
}
