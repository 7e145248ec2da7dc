//! The AMAD encoder.
//!
//! Input `[B, N, d]` is projected to `d_model`, shifted by a sinusoidal
//! positional table, passed through `L` blocks and projected back to `d`.
//! Each block:
//!
//! ```text
//! S = softmax(x Wq (x Wk)^T)                    per head
//! A = softmax(rot(x Wq') rot(x Wk')^T)          per head, rot uses omega
//! Z = merge_heads(mixup(A, S, alpha) . split_heads(x Wv))
//! H = LayerNorm(x + Z)
//! out = LayerNorm(H + GELU(H Wf + bf))
//! ```
//!
//! Both attention distributions of every layer are returned so the
//! objectives and the anomaly score can compare them.

mod attention;
mod config;
mod params;

use alloc::vec::Vec;

pub use attention::{
    attn_mixup, automask_attention, automask_logits, merge_heads, positions, rotary_mask_embed,
    self_attention, split_heads,
};
pub use config::{AttentionScaling, ModelConfig};
pub use params::{init_params, sinusoidal_table, AmadParams, BoundParams, LayerParams, ParamSet};

use crate::error::{AmadError, Result};
use crate::graph::{Graph, Var};

/// Per-layer attention distributions, each `[B, h, N, N]`.
///
/// `automask` is empty when the model runs without the AutoMask branch.
#[derive(Debug, Clone, Default)]
pub struct AttentionPack {
    pub automask: Vec<Var>,
    pub self_attn: Vec<Var>,
}

impl AttentionPack {
    pub fn layers(&self) -> usize {
        self.self_attn.len()
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Reconstruction, same shape as the input.
    pub recon: Var,
    pub attn: AttentionPack,
}

pub struct BlockOutput {
    pub out: Var,
    pub automask: Option<Var>,
    pub self_attn: Var,
}

pub fn amad_block_forward(
    g: &mut Graph,
    cfg: &ModelConfig,
    layer: &LayerParams<Var>,
    x: Var,
    positions: &[f64],
) -> Result<BlockOutput> {
    let q = g.matmul(x, layer.w_q)?;
    let k = g.matmul(x, layer.w_k)?;
    let v = g.matmul(x, layer.w_v)?;
    let s = self_attention(g, cfg, q, k)?;
    let (automask, mixed) = if cfg.automask {
        let aq = g.matmul(x, layer.automask_w_q)?;
        let ak = g.matmul(x, layer.automask_w_k)?;
        let a = automask_attention(g, cfg, aq, ak, layer.omega, positions)?;
        let m = attn_mixup(g, a, s, cfg.mixup_alpha)?;
        (Some(a), m)
    } else {
        (None, s)
    };
    let vh = split_heads(g, v, cfg.n_heads)?;
    let zh = g.matmul(mixed, vh)?;
    let z = merge_heads(g, zh)?;
    let res1 = g.add(x, z)?;
    let h = g.layer_norm(res1, layer.norm1_gamma, layer.norm1_beta)?;
    let f = g.matmul(h, layer.ffn_w)?;
    let f = g.add(f, layer.ffn_b)?;
    let f = g.gelu(f);
    let res2 = g.add(h, f)?;
    let out = g.layer_norm(res2, layer.norm2_gamma, layer.norm2_beta)?;
    Ok(BlockOutput {
        out,
        automask,
        self_attn: s,
    })
}

/// Full encoder pass over `x: [B, window_len, input_dim]`.
pub fn model_forward(
    g: &mut Graph,
    cfg: &ModelConfig,
    params: &BoundParams,
    x: Var,
) -> Result<ForwardOutput> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || s[1] != cfg.window_len || s[2] != cfg.input_dim {
        return Err(AmadError::shape(
            "model_forward",
            &s,
            &[0, cfg.window_len, cfg.input_dim],
        ));
    }
    if g.value(x).iter().any(|v| !v.is_finite()) {
        return Err(AmadError::Numeric("non-finite model input".into()));
    }
    let w = &params.weights;
    let pos = positions(cfg.window_len, 0.0);
    let e = g.matmul(x, w.embed_w)?;
    let e = g.add(e, w.embed_b)?;
    let mut hidden = g.add(e, params.positional)?;
    let mut attn = AttentionPack::default();
    for layer in &w.layers {
        let block = amad_block_forward(g, cfg, layer, hidden, &pos)?;
        hidden = block.out;
        attn.self_attn.push(block.self_attn);
        if let Some(a) = block.automask {
            attn.automask.push(a);
        }
    }
    let r = g.matmul(hidden, w.head_w)?;
    let recon = g.add(r, w.head_b)?;
    Ok(ForwardOutput { recon, attn })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn input(b: usize, n: usize, d: usize, phase: f64) -> Tensor {
        let data = (0..b * n * d)
            .map(|i| libm::sin(0.37 * i as f64 + phase))
            .collect();
        Tensor::new([b, n, d], data).unwrap()
    }

    fn small() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            ..ModelConfig::desk(3, 6)
        }
    }

    #[test]
    fn forward_shapes() {
        let cfg = small();
        let p = init_params(&cfg, 3).unwrap();
        let mut g = Graph::new();
        let bound = p.bind(&mut g, false);
        let x = g.constant(&input(2, 6, 3, 0.0));
        let out = model_forward(&mut g, &cfg, &bound, x).unwrap();
        assert_eq!(g.shape(out.recon), &[2, 6, 3]);
        assert_eq!(out.attn.layers(), 2);
        assert_eq!(out.attn.automask.len(), 2);
        for &a in out.attn.automask.iter().chain(&out.attn.self_attn) {
            assert_eq!(g.shape(a), &[2, 2, 6, 6]);
            for row in g.value(a).chunks(6) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn wrong_window_is_shape_error() {
        let cfg = small();
        let p = init_params(&cfg, 3).unwrap();
        let mut g = Graph::new();
        let bound = p.bind(&mut g, false);
        let x = g.constant(&input(2, 5, 3, 0.0));
        assert!(model_forward(&mut g, &cfg, &bound, x).is_err());
    }

    #[test]
    fn forward_is_bitwise_reproducible() {
        let cfg = small();
        let run = || {
            let p = init_params(&cfg, 9).unwrap();
            let mut g = Graph::new();
            let bound = p.bind(&mut g, false);
            let x = g.constant(&input(2, 6, 3, 0.5));
            let out = model_forward(&mut g, &cfg, &bound, x).unwrap();
            g.value(out.recon).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_ffn_branch_leaves_layer_norm_of_h() {
        let cfg = ModelConfig {
            n_layers: 1,
            ..small()
        };
        let mut p = init_params(&cfg, 4).unwrap();
        let layer = &mut p.weights.layers[0];
        layer.ffn_w = Tensor::zeros([8, 8]);
        layer.ffn_b = Tensor::zeros([8]);
        let mut g = Graph::new();
        let bound = p.bind(&mut g, false);
        let x = g.constant(&input(1, 6, 8, 0.1));
        let l = &bound.weights.layers[0];
        let out = amad_block_forward(&mut g, &cfg, l, x, &positions(6, 0.0)).unwrap();
        // Recompute H independently: LN(x + Z) with the same first half, then LN(H).
        let q = g.matmul(x, l.w_q).unwrap();
        let k = g.matmul(x, l.w_k).unwrap();
        let v = g.matmul(x, l.w_v).unwrap();
        let s = self_attention(&mut g, &cfg, q, k).unwrap();
        let aq = g.matmul(x, l.automask_w_q).unwrap();
        let ak = g.matmul(x, l.automask_w_k).unwrap();
        let a = automask_attention(&mut g, &cfg, aq, ak, l.omega, &positions(6, 0.0)).unwrap();
        let m = attn_mixup(&mut g, a, s, cfg.mixup_alpha).unwrap();
        let vh = split_heads(&mut g, v, 2).unwrap();
        let zh = g.matmul(m, vh).unwrap();
        let z = merge_heads(&mut g, zh).unwrap();
        let r = g.add(x, z).unwrap();
        let h = g.layer_norm(r, l.norm1_gamma, l.norm1_beta).unwrap();
        let expect = g.layer_norm(h, l.norm2_gamma, l.norm2_beta).unwrap();
        // GELU(0) = 0, so the second residual is H itself.
        assert_eq!(g.value(out.out), g.value(expect));
    }

    #[test]
    fn omega_changes_reconstruction() {
        let cfg = ModelConfig {
            n_layers: 1,
            mixup_alpha: 1.0,
            ..small()
        };
        let p = init_params(&cfg, 21).unwrap();
        let mut perturbed = p.clone();
        perturbed.weights.layers[0]
            .omega
            .data_mut()
            .iter_mut()
            .for_each(|w| *w += 0.1);
        let recon = |params: &AmadParams| {
            let mut g = Graph::new();
            let bound = params.bind(&mut g, false);
            let x = g.constant(&input(2, 6, 3, 0.2));
            let out = model_forward(&mut g, &cfg, &bound, x).unwrap();
            g.value(out.recon).to_vec()
        };
        let (a, b) = (recon(&p), recon(&perturbed));
        let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff > 0.0);
    }

    #[test]
    fn without_automask_the_pack_has_only_self_attention() {
        let cfg = ModelConfig {
            automask: false,
            ..small()
        };
        let p = init_params(&cfg, 2).unwrap();
        let mut g = Graph::new();
        let bound = p.bind(&mut g, false);
        let x = g.constant(&input(1, 6, 3, 0.0));
        let out = model_forward(&mut g, &cfg, &bound, x).unwrap();
        assert!(out.attn.automask.is_empty());
        assert_eq!(out.attn.self_attn.len(), 2);
    }
}
