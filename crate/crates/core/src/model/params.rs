//! Learnable weights and their initialization.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::error::{AmadError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Weights of one encoder block.
///
/// Self-attention and AutoMask attention each own their query/key
/// projections; the value projection is shared by the mixed attention.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub w_q: T,
    pub w_k: T,
    pub automask_w_q: T,
    pub automask_w_k: T,
    pub w_v: T,
    /// One rotary frequency per head.
    pub omega: T,
    pub ffn_w: T,
    pub ffn_b: T,
    pub norm1_gamma: T,
    pub norm1_beta: T,
    pub norm2_gamma: T,
    pub norm2_beta: T,
}

const LAYER_FIELDS: usize = 12;

impl<T> LayerParams<T> {
    pub fn fields(&self) -> [(&'static str, &T); LAYER_FIELDS] {
        [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("automask_w_q", &self.automask_w_q),
            ("automask_w_k", &self.automask_w_k),
            ("w_v", &self.w_v),
            ("omega", &self.omega),
            ("ffn_w", &self.ffn_w),
            ("ffn_b", &self.ffn_b),
            ("norm1_gamma", &self.norm1_gamma),
            ("norm1_beta", &self.norm1_beta),
            ("norm2_gamma", &self.norm2_gamma),
            ("norm2_beta", &self.norm2_beta),
        ]
    }

    pub fn fields_mut(&mut self) -> [(&'static str, &mut T); LAYER_FIELDS] {
        [
            ("w_q", &mut self.w_q),
            ("w_k", &mut self.w_k),
            ("automask_w_q", &mut self.automask_w_q),
            ("automask_w_k", &mut self.automask_w_k),
            ("w_v", &mut self.w_v),
            ("omega", &mut self.omega),
            ("ffn_w", &mut self.ffn_w),
            ("ffn_b", &mut self.ffn_b),
            ("norm1_gamma", &mut self.norm1_gamma),
            ("norm1_beta", &mut self.norm1_beta),
            ("norm2_gamma", &mut self.norm2_gamma),
            ("norm2_beta", &mut self.norm2_beta),
        ]
    }

    fn from_array(a: [T; LAYER_FIELDS]) -> Self {
        let [w_q, w_k, automask_w_q, automask_w_k, w_v, omega, ffn_w, ffn_b, norm1_gamma, norm1_beta, norm2_gamma, norm2_beta] =
            a;
        LayerParams {
            w_q,
            w_k,
            automask_w_q,
            automask_w_k,
            w_v,
            omega,
            ffn_w,
            ffn_b,
            norm1_gamma,
            norm1_beta,
            norm2_gamma,
            norm2_beta,
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> LayerParams<U> {
        LayerParams::from_array(self.fields().map(|(_, t)| f(t)))
    }
}

/// Every learnable tensor of the model, generic over the payload so the same
/// layout serves values (`Tensor`), graph handles (`Var`) and optimizer
/// state.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    pub embed_w: T,
    pub embed_b: T,
    pub layers: Vec<LayerParams<T>>,
    pub head_w: T,
    pub head_b: T,
}

impl<T> ParamSet<T> {
    /// Named entries in declaration order.
    pub fn entries(&self) -> Vec<(String, &T)> {
        let mut out = Vec::with_capacity(4 + LAYER_FIELDS * self.layers.len());
        out.push((String::from("embed_w"), &self.embed_w));
        out.push((String::from("embed_b"), &self.embed_b));
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.fields() {
                out.push((format!("layers.{l}.{name}"), t));
            }
        }
        out.push((String::from("head_w"), &self.head_w));
        out.push((String::from("head_b"), &self.head_b));
        out
    }

    /// Mutable entries, same order as [`ParamSet::entries`].
    pub fn values_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::with_capacity(4 + LAYER_FIELDS * self.layers.len());
        out.push(&mut self.embed_w);
        out.push(&mut self.embed_b);
        for layer in &mut self.layers {
            out.extend(layer.fields_mut().into_iter().map(|(_, t)| t));
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> ParamSet<U> {
        ParamSet {
            embed_w: f(&self.embed_w),
            embed_b: f(&self.embed_b),
            layers: self.layers.iter().map(|l| l.map(&mut f)).collect(),
            head_w: f(&self.head_w),
            head_b: f(&self.head_b),
        }
    }

    /// Rebuilds a set from values listed in declaration order.
    pub fn from_ordered(n_layers: usize, values: impl IntoIterator<Item = T>) -> Result<Self> {
        let mut it = values.into_iter();
        let mut next = || {
            it.next()
                .ok_or_else(|| AmadError::Data("too few parameter entries".into()))
        };
        let embed_w = next()?;
        let embed_b = next()?;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let mut buf = Vec::with_capacity(LAYER_FIELDS);
            for _ in 0..LAYER_FIELDS {
                buf.push(next()?);
            }
            let arr: [T; LAYER_FIELDS] = buf.try_into().ok().expect("exactly LAYER_FIELDS entries");
            layers.push(LayerParams::from_array(arr));
        }
        let head_w = next()?;
        let head_b = next()?;
        if it.next().is_some() {
            return Err(AmadError::Data("too many parameter entries".into()));
        }
        Ok(ParamSet {
            embed_w,
            embed_b,
            layers,
            head_w,
            head_b,
        })
    }

    pub fn count(&self) -> usize {
        4 + LAYER_FIELDS * self.layers.len()
    }
}

/// Model weights plus the fixed positional table.
#[derive(Debug, Clone, PartialEq)]
pub struct AmadParams {
    pub config: ModelConfig,
    pub weights: ParamSet<Tensor>,
    /// Additive sinusoidal embedding, `window_len x d_model`. Not trained.
    pub positional: Tensor,
}

/// Parameters registered on a graph.
pub struct BoundParams {
    pub weights: ParamSet<Var>,
    pub positional: Var,
}

impl AmadParams {
    /// Registers every weight as a trainable leaf (or as a constant when
    /// `trainable` is false, which is cheaper for inference).
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let weights = self.weights.map(|t| if trainable { g.param(t) } else { g.constant(t) });
        let positional = g.constant(&self.positional);
        BoundParams {
            weights,
            positional,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.entries().iter().all(|(_, t)| t.is_finite())
    }
}

/// Deterministic initialization.
///
/// Linear weights are uniform in `+-sqrt(6 / (fan_in + fan_out))`, biases
/// zero, every rotary frequency 1 (plain rotary behaviour at the start),
/// layer-norm gains 1 and shifts 0.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<AmadParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, dm, h) = (cfg.input_dim, cfg.d_model, cfg.n_heads);
    let mut linear = |fan_in: usize, fan_out: usize| {
        let bound = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Tensor::new([fan_in, fan_out], data).expect("sized by construction")
    };
    let embed_w = linear(d, dm);
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for _ in 0..cfg.n_layers {
        layers.push(LayerParams {
            w_q: linear(dm, dm),
            w_k: linear(dm, dm),
            automask_w_q: linear(dm, dm),
            automask_w_k: linear(dm, dm),
            w_v: linear(dm, dm),
            omega: Tensor::full([h], 1.0),
            ffn_w: linear(dm, dm),
            ffn_b: Tensor::zeros([dm]),
            norm1_gamma: Tensor::full([dm], 1.0),
            norm1_beta: Tensor::zeros([dm]),
            norm2_gamma: Tensor::full([dm], 1.0),
            norm2_beta: Tensor::zeros([dm]),
        });
    }
    let head_w = linear(dm, d);
    Ok(AmadParams {
        config: cfg.clone(),
        weights: ParamSet {
            embed_w,
            embed_b: Tensor::zeros([dm]),
            layers,
            head_w,
            head_b: Tensor::zeros([d]),
        },
        positional: sinusoidal_table(cfg.window_len, dm),
    })
}

/// Standard sin/cos positional table over positions `0..n`.
pub fn sinusoidal_table(n: usize, d_model: usize) -> Tensor {
    let mut data = Vec::with_capacity(n * d_model);
    for p in 0..n {
        for j in 0..d_model {
            let pair = (j / 2) as f64;
            let angle = p as f64 / libm::pow(10_000.0, 2.0 * pair / d_model as f64);
            data.push(if j % 2 == 0 { libm::sin(angle) } else { libm::cos(angle) });
        }
    }
    Tensor::new([n, d_model], data).expect("sized by construction")
}
