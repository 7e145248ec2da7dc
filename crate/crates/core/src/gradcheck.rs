//! Central finite differences for validating analytic gradients.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::Result;
use crate::model::ParamSet;
use crate::tensor::Tensor;

/// Gradient of `f` at `inputs` by central differences with step `h`.
pub fn numeric_grad(
    inputs: &[Tensor],
    h: f64,
    mut f: impl FnMut(&[Tensor]) -> Result<f64>,
) -> Result<Vec<Vec<f64>>> {
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let mut g = Vec::with_capacity(inputs[t].len());
        for i in 0..inputs[t].len() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + h;
            let up = f(&work)?;
            work[t].data_mut()[i] = orig - h;
            let down = f(&work)?;
            work[t].data_mut()[i] = orig;
            g.push((up - down) / (2.0 * h));
        }
        out.push(g);
    }
    Ok(out)
}

/// Same as [`numeric_grad`] over every tensor of a parameter set, in
/// declaration order.
pub fn numeric_param_grad(
    params: &ParamSet<Tensor>,
    h: f64,
    mut f: impl FnMut(&ParamSet<Tensor>) -> Result<f64>,
) -> Result<Vec<Vec<f64>>> {
    let n_layers = params.layers.len();
    let flat: Vec<Tensor> = params.entries().into_iter().map(|(_, t)| t.clone()).collect();
    numeric_grad(&flat, h, |ts| {
        let set = ParamSet::from_ordered(n_layers, ts.iter().cloned())?;
        f(&set)
    })
}

/// Worst disagreement between two gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradComparison {
    pub max_rel_err: f64,
    /// `(tensor index, element index)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, floor)`, maximized over all entries.
///
/// `floor` keeps entries whose true gradient is (near) zero from being
/// judged on round-off alone.
pub fn compare(analytic: &[Vec<f64>], numeric: &[Vec<f64>], floor: f64) -> GradComparison {
    let mut best = GradComparison {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for (t, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        assert_eq!(a.len(), n.len(), "gradient {t} sizes differ");
        for (i, (&x, &y)) in a.iter().zip(n).enumerate() {
            let err = (x - y).abs() / x.abs().max(y.abs()).max(floor);
            best.checked += 1;
            if err > best.max_rel_err || err.is_nan() {
                best.max_rel_err = err;
                best.worst = (t, i);
                best.analytic = x;
                best.numeric = y;
            }
        }
    }
    best
}

/// Human-readable location of a `worst` index within a parameter set.
pub fn describe(params: &ParamSet<Tensor>, worst: (usize, usize)) -> String {
    let names = params.entries();
    match names.get(worst.0) {
        Some((n, _)) => alloc::format!("{n}[{}]", worst.1),
        None => alloc::format!("#{}[{}]", worst.0, worst.1),
    }
}
