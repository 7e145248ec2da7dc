//! Self-attention, AutoMask attention and their mixup.
//!
//! AutoMask attention rotates each head's query/key feature pairs by an
//! angle `p * omega[head] * theta[pair]`, where `theta` is the usual rotary
//! spectrum `base^(-2 pair / d_head)` and `omega` is a learnable per-head
//! frequency. Because both sides rotate by position, the logits depend only
//! on the position difference.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::config::{AttentionScaling, ModelConfig};
use crate::error::{AmadError, Result};
use crate::graph::{CustomOp, Graph, Var};

/// Window positions `offset + 1 ..= offset + n`.
pub fn positions(n: usize, offset: f64) -> Vec<f64> {
    (1..=n).map(|p| offset + p as f64).collect()
}

/// `[B, N, d_model] -> [B, h, N, d_head]`
pub fn split_heads(g: &mut Graph, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || s[2] % heads != 0 {
        return Err(AmadError::shape("split_heads", &s, &[heads]));
    }
    let r = g.reshape(x, &[s[0], s[1], heads, s[2] / heads])?;
    g.permute(r, &[0, 2, 1, 3])
}

/// `[B, h, N, d_head] -> [B, N, d_model]`
pub fn merge_heads(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(AmadError::shape("merge_heads", &s, &[]));
    }
    let p = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(p, &[s[0], s[2], s[1] * s[3]])
}

struct RotaryOp {
    /// `[B, h, N, d_head]`
    dims: [usize; 4],
    positions: Vec<f64>,
    thetas: Vec<f64>,
}

impl RotaryOp {
    fn angle(&self, head_omega: f64, pos: usize, pair: usize) -> f64 {
        self.positions[pos] * head_omega * self.thetas[pair]
    }
}

impl CustomOp for RotaryOp {
    fn name(&self) -> &'static str {
        "rotary_mask_embed"
    }

    fn backward(&self, inputs: &[&[f64]], output: &[f64], grad_out: &[f64]) -> Vec<Vec<f64>> {
        let [b, h, n, dh] = self.dims;
        let omega = inputs[1];
        let mut gx = vec![0.0; inputs[0].len()];
        let mut gw = vec![0.0; h];
        for bi in 0..b {
            for hi in 0..h {
                for pi in 0..n {
                    let base = ((bi * h + hi) * n + pi) * dh;
                    for k in 0..dh / 2 {
                        let (i0, i1) = (base + 2 * k, base + 2 * k + 1);
                        let a = self.angle(omega[hi], pi, k);
                        let (s, c) = libm::sincos(a);
                        let (g0, g1) = (grad_out[i0], grad_out[i1]);
                        gx[i0] = g0 * c + g1 * s;
                        gx[i1] = -g0 * s + g1 * c;
                        // dy0/da = -y1, dy1/da = y0
                        let da = -g0 * output[i1] + g1 * output[i0];
                        gw[hi] += da * self.positions[pi] * self.thetas[k];
                    }
                }
            }
        }
        vec![gx, gw]
    }
}

/// Rotates feature pairs `(x[2k], x[2k+1])` of a `[B, h, N, d_head]` tensor
/// by `positions[p] * omega[head] * base^(-2k/d_head)`. Differentiable in
/// both `x` and `omega`.
pub fn rotary_mask_embed(
    g: &mut Graph,
    x: Var,
    omega: Var,
    positions: &[f64],
    base: f64,
) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(AmadError::shape("rotary_mask_embed", &s, &[]));
    }
    let dims = [s[0], s[1], s[2], s[3]];
    let [b, h, n, dh] = dims;
    if dh % 2 != 0 {
        return Err(AmadError::Config(format!(
            "rotary embedding needs an even head dimension, got {dh}"
        )));
    }
    if g.shape(omega) != [h] {
        return Err(AmadError::shape("rotary_mask_embed", &s, g.shape(omega)));
    }
    if positions.len() != n {
        return Err(AmadError::shape("rotary_mask_embed", &s, &[positions.len()]));
    }
    let thetas: Vec<f64> = (0..dh / 2)
        .map(|k| libm::pow(base, -2.0 * k as f64 / dh as f64))
        .collect();
    let op = RotaryOp {
        dims,
        positions: positions.to_vec(),
        thetas,
    };
    let xv = g.value(x);
    let wv = g.value(omega);
    let mut out = vec![0.0; xv.len()];
    for bi in 0..b {
        for hi in 0..h {
            for pi in 0..n {
                let base = ((bi * h + hi) * n + pi) * dh;
                for k in 0..dh / 2 {
                    let (i0, i1) = (base + 2 * k, base + 2 * k + 1);
                    let (s, c) = libm::sincos(op.angle(wv[hi], pi, k));
                    out[i0] = xv[i0] * c - xv[i1] * s;
                    out[i1] = xv[i0] * s + xv[i1] * c;
                }
            }
        }
    }
    g.custom(&[x, omega], s, out, Box::new(op))
}

fn attention_probs(g: &mut Graph, q: Var, k: Var, scale: f64) -> Result<Var> {
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let scaled = g.scale(logits, scale);
    g.softmax_last_axis(scaled)
}

fn check_qk(g: &Graph, q: Var, k: Var, cfg: &ModelConfig) -> Result<()> {
    let (sq, sk) = (g.shape(q), g.shape(k));
    if sq.len() != 3 || sq != sk || sq[2] != cfg.d_model {
        return Err(AmadError::shape("attention", sq, sk));
    }
    Ok(())
}

/// Plain multi-head attention distributions, `[B, h, N, N]`.
pub fn self_attention(g: &mut Graph, cfg: &ModelConfig, q: Var, k: Var) -> Result<Var> {
    check_qk(g, q, k, cfg)?;
    let qh = split_heads(g, q, cfg.n_heads)?;
    let kh = split_heads(g, k, cfg.n_heads)?;
    let scale = match cfg.scaling {
        AttentionScaling::PerHead => 1.0 / libm::sqrt(cfg.d_head() as f64),
        AttentionScaling::Literal => 1.0 / libm::sqrt(cfg.d_model as f64),
    };
    attention_probs(g, qh, kh, scale)
}

/// Pre-softmax AutoMask logits `Q~ K~^T` per head (unscaled).
pub fn automask_logits(
    g: &mut Graph,
    cfg: &ModelConfig,
    q: Var,
    k: Var,
    omega: Var,
    positions: &[f64],
) -> Result<Var> {
    check_qk(g, q, k, cfg)?;
    let qh = split_heads(g, q, cfg.n_heads)?;
    let kh = split_heads(g, k, cfg.n_heads)?;
    let qr = rotary_mask_embed(g, qh, omega, positions, cfg.rope_base)?;
    let kr = rotary_mask_embed(g, kh, omega, positions, cfg.rope_base)?;
    let kt = g.transpose(kr)?;
    g.matmul(qr, kt)
}

/// AutoMask attention distributions, `[B, h, N, N]`.
pub fn automask_attention(
    g: &mut Graph,
    cfg: &ModelConfig,
    q: Var,
    k: Var,
    omega: Var,
    positions: &[f64],
) -> Result<Var> {
    let logits = automask_logits(g, cfg, q, k, omega, positions)?;
    let scale = match cfg.scaling {
        AttentionScaling::PerHead => 1.0 / libm::sqrt(cfg.d_head() as f64),
        AttentionScaling::Literal => 1.0 / cfg.d_model as f64,
    };
    let scaled = g.scale(logits, scale);
    g.softmax_last_axis(scaled)
}

/// `alpha * a + (1 - alpha) * s`.
pub fn attn_mixup(g: &mut Graph, a: Var, s: Var, alpha: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(AmadError::Config(format!("mixup alpha {alpha} outside [0, 1]")));
    }
    if g.shape(a) != g.shape(s) {
        return Err(AmadError::shape("attn_mixup", g.shape(a), g.shape(s)));
    }
    let wa = g.scale(a, alpha);
    let ws = g.scale(s, 1.0 - alpha);
    g.add(wa, ws)
}
