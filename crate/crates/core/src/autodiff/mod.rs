//! Reverse-mode differentiation over [`Tensor4`] values.

mod graph;

pub use graph::{Activation, Graph, Var, LEAKY_SLOPE, SPECTRAL_EPS};
pub(crate) use graph::bilinear_form;

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Variance floor inside the standard deviation of [`batch_moments`].
pub const MOMENT_EPS: f64 = 1e-5;

/// Per-channel population mean and `sqrt(var + MOMENT_EPS)` over the batch
/// and spatial axes. Both results have shape `1 x c x 1 x 1`.
pub fn batch_moments<T: crate::Scalar>(g: &mut Graph<T>, x: Var) -> Result<(Var, Var)> {
    let s = g.shape(x);
    if s.b * s.plane() == 0 {
        return Err(Error::shape("batch_moments", format!("no samples in {s}")));
    }
    let mean = g.channel_mean(x);
    let centered = g.sub(x, mean)?;
    let sq = g.square(centered);
    let var = g.channel_mean(sq);
    let var = g.add_scalar(var, MOMENT_EPS);
    let std = g.sqrt(var);
    Ok((mean, std))
}

/// Outcome of [`finite_diff_check`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates whose stencil crossed a kink of a piecewise op.
    pub skipped: usize,
}

/// Relative error with the `max(|a|, |b|, 1e-8)` denominator.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares the recorded gradient of a scalar function against central
/// differences with step `h`.
///
/// `f` builds the function on a fresh graph given the input variable. When
/// `max_coords` is set and smaller than the input, an evenly spaced subset
/// of coordinates is probed.
pub fn finite_diff_check<F>(x: &Tensor4<f64>, h: f64, max_coords: Option<usize>, mut f: F) -> Result<FdReport>
where
    F: FnMut(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut eval = |x: Tensor4<f64>, grad: bool| -> Result<(f64, Option<Vec<f64>>, u64)> {
        let mut g = Graph::new();
        let xv = g.variable(x);
        let root = f(&mut g, xv)?;
        let value = g.item(root)?;
        if !value.is_finite() {
            return Err(Error::non_finite("finite-difference objective"));
        }
        let grad = if grad {
            g.backward(root)?;
            Some(g.grad_tensor(xv).into_vec())
        } else {
            None
        };
        Ok((value, grad, g.kink_signature()))
    };

    let (_, analytic, base_sig) = eval(x.clone(), true)?;
    let analytic = analytic.expect("gradient requested");
    let n = x.len();
    let probes = max_coords.map_or(n, |m| m.clamp(1, n.max(1)));
    let mut report = FdReport { max_rel_error: 0.0, checked: 0, skipped: 0 };
    for k in 0..probes.min(n) {
        let i = if probes >= n { k } else { k * n / probes };
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let (fp, _, sp) = eval(plus, false)?;
        let (fm, _, sm) = eval(minus, false)?;
        if sp != base_sig || sm != base_sig {
            report.skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * h);
        report.max_rel_error = report.max_rel_error.max(rel_error(numeric, analytic[i]));
        report.checked += 1;
    }
    Ok(report)
}
