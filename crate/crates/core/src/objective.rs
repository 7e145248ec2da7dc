//! Training objectives built on the attention distributions.
//!
//! *Cross-attention divergence* (CAD) is, per window position, the
//! Jensen-Shannon divergence between the AutoMask row and the
//! self-attention row, averaged over heads and layers.
//!
//! The Max-Min phases reuse the reconstruction loss with a signed CAD term:
//! the Min phase detaches self-attention and pushes CAD down through the
//! AutoMask branch; the Max phase detaches AutoMask attention and pushes CAD
//! up through self-attention.

use alloc::format;
use alloc::vec;

use crate::error::{AmadError, Result};
use crate::graph::{js_row, Graph, Var};
use crate::model::{AttentionPack, ForwardOutput};

/// Floor applied to probabilities inside every logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

const DISTRIBUTION_TOL: f64 = 1e-6;

/// Jensen-Shannon divergence of two distributions in nats, in `[0, ln 2]`.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    for (name, d) in [("p", p), ("q", q)] {
        let total: f64 = d.iter().sum();
        if d.iter().any(|&x| !(x >= 0.0)) || (total - 1.0).abs() > DISTRIBUTION_TOL {
            return Err(AmadError::Contract(format!(
                "{name} is not a probability distribution (sum {total})"
            )));
        }
    }
    if p.len() != q.len() {
        return Err(AmadError::shape("js_divergence", &[p.len()], &[q.len()]));
    }
    Ok(js_row(p, q, PROB_FLOOR))
}

/// CAD from explicit per-layer distribution lists, `[B, N]`.
pub fn cad_from(g: &mut Graph, automask: &[Var], self_attn: &[Var]) -> Result<Var> {
    if automask.is_empty() || automask.len() != self_attn.len() {
        return Err(AmadError::Contract(format!(
            "CAD needs matching layer counts, got {} AutoMask and {} self-attention",
            automask.len(),
            self_attn.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (&a, &s) in automask.iter().zip(self_attn) {
        if g.shape(a).len() != 4 {
            return Err(AmadError::shape("cad", g.shape(a), g.shape(s)));
        }
        let js = g.js_divergence_rows(a, s, PROB_FLOOR)?; // [B, h, N]
        let per_layer = g.mean_axis(js, 1)?; // [B, N]
        total = Some(match total {
            None => per_layer,
            Some(t) => g.add(t, per_layer)?,
        });
    }
    let total = total.expect("at least one layer");
    Ok(g.scale(total, 1.0 / automask.len() as f64))
}

/// CAD of an attention pack, `[B, N]`.
pub fn cad(g: &mut Graph, attn: &AttentionPack) -> Result<Var> {
    cad_from(g, &attn.automask, &attn.self_attn)
}

/// Squared reconstruction error of a batch, averaged over the batch.
pub fn recon_term(g: &mut Graph, x: Var, recon: Var) -> Result<Var> {
    if g.shape(x) != g.shape(recon) {
        return Err(AmadError::shape("recon_loss", g.shape(x), g.shape(recon)));
    }
    let b = g.shape(x)[0] as f64;
    let diff = g.sub(x, recon)?;
    let f = g.frobenius_sq(diff);
    Ok(g.scale(f, 1.0 / b))
}

/// `-lambda_signed * ||cad||_1`, averaged over the batch.
pub fn cad_term(g: &mut Graph, cad_vec: Var, lambda_signed: f64) -> Var {
    let b = g.shape(cad_vec)[0] as f64;
    let l1 = g.l1_norm(cad_vec);
    g.scale(l1, -lambda_signed / b)
}

/// `(||x - recon||_F^2 - lambda_signed * ||cad||_1) / B`.
pub fn recon_loss(g: &mut Graph, x: Var, recon: Var, cad_vec: Var, lambda_signed: f64) -> Result<Var> {
    if g.shape(cad_vec).first() != g.shape(x).first() {
        return Err(AmadError::shape("recon_loss", g.shape(x), g.shape(cad_vec)));
    }
    let r = recon_term(g, x, recon)?;
    let c = cad_term(g, cad_vec, lambda_signed);
    g.add(r, c)
}

/// The two phase losses of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct MaxMinLosses {
    /// Reconstruction plus `+lambda * CAD(A, detach(S))`.
    pub min: Var,
    /// Reconstruction plus `-lambda * CAD(detach(A), S)`.
    pub max: Var,
    /// The shared reconstruction term.
    pub recon: Var,
    /// CAD-only part of `min`.
    pub min_cad_term: Var,
    /// CAD-only part of `max`.
    pub max_cad_term: Var,
    /// CAD value, `[B, N]` (the Min-phase node; its gradient reaches the
    /// AutoMask branch only).
    pub cad: Var,
}

pub fn maxmin_losses(g: &mut Graph, x: Var, fwd: &ForwardOutput, lambda: f64) -> Result<MaxMinLosses> {
    if !(lambda > 0.0) {
        return Err(AmadError::Config(format!("lambda must be positive, got {lambda}")));
    }
    let (cad_min, cad_max) = cad_split(g, &fwd.attn)?;
    let recon = recon_term(g, x, fwd.recon)?;
    let min_cad_term = cad_term(g, cad_min, -lambda);
    let max_cad_term = cad_term(g, cad_max, lambda);
    let min = g.add(recon, min_cad_term)?;
    let max = g.add(recon, max_cad_term)?;
    Ok(MaxMinLosses {
        min,
        max,
        recon,
        min_cad_term,
        max_cad_term,
        cad: cad_min,
    })
}

/// `CAD(A, detach(S))` and `CAD(detach(A), S)` from one evaluation of the
/// divergences.
pub fn cad_split(g: &mut Graph, attn: &AttentionPack) -> Result<(Var, Var)> {
    if attn.automask.is_empty() || attn.automask.len() != attn.self_attn.len() {
        return Err(AmadError::Contract(format!(
            "CAD needs matching layer counts, got {} AutoMask and {} self-attention",
            attn.automask.len(),
            attn.self_attn.len()
        )));
    }
    let mut to_a: Option<Var> = None;
    let mut to_s: Option<Var> = None;
    for (&a, &s) in attn.automask.iter().zip(&attn.self_attn) {
        if g.shape(a).len() != 4 {
            return Err(AmadError::shape("cad", g.shape(a), g.shape(s)));
        }
        let (ja, js) = g.js_divergence_rows_split(a, s, PROB_FLOOR)?;
        let la = g.mean_axis(ja, 1)?;
        let ls = g.mean_axis(js, 1)?;
        to_a = Some(match to_a {
            None => la,
            Some(t) => g.add(t, la)?,
        });
        to_s = Some(match to_s {
            None => ls,
            Some(t) => g.add(t, ls)?,
        });
    }
    let k = 1.0 / attn.automask.len() as f64;
    let (to_a, to_s) = (to_a.expect("at least one layer"), to_s.expect("at least one layer"));
    Ok((g.scale(to_a, k), g.scale(to_s, k)))
}

/// Local-global contrastive loss.
///
/// For each layer the self-attention and AutoMask distributions are
/// flattened to `[B, h*N*N]`, `logits = S A^T * exp(tau)`, and the
/// cross-entropy against targets `0..B` (mean over rows) is summed over
/// layers; the total is divided by `B`.
pub fn contrastive_loss(g: &mut Graph, attn: &AttentionPack, tau: f64) -> Result<Var> {
    if attn.automask.len() != attn.self_attn.len() || attn.automask.is_empty() {
        return Err(AmadError::Contract(
            "contrastive loss needs AutoMask and self-attention for every layer".into(),
        ));
    }
    let b = g.shape(attn.self_attn[0])[0];
    if b < 2 {
        return Err(AmadError::Config(format!(
            "contrastive loss needs a batch of at least 2, got {b}"
        )));
    }
    let mut eye = vec![0.0; b * b];
    (0..b).for_each(|i| eye[i * b + i] = 1.0);
    let eye = g.constant_from(vec![b, b], eye);
    let temperature = crate::math::exp(tau);
    let mut total: Option<Var> = None;
    for (&a, &s) in attn.automask.iter().zip(&attn.self_attn) {
        let flat = g.value(s).len() / b;
        let s_flat = g.reshape(s, &[b, flat])?;
        let a_flat = g.reshape(a, &[b, flat])?;
        let a_t = g.transpose(a_flat)?;
        let logits = g.matmul(s_flat, a_t)?;
        let logits = g.scale(logits, temperature);
        let log_p = g.log_softmax_last_axis(logits)?;
        let picked = g.mul(log_p, eye)?;
        let picked = g.sum(picked);
        let ce = g.scale(picked, -1.0 / b as f64);
        total = Some(match total {
            None => ce,
            Some(t) => g.add(t, ce)?,
        });
    }
    let total = total.expect("at least one layer");
    Ok(g.scale(total, 1.0 / b as f64))
}
