//! Spatially conditional operators driven by per-position mixing weights.

use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::{batch_moments, Activation, Graph, Var};
use crate::error::{Error, Result};
use crate::kernels::conv2d_forward;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor4};

/// Default softmax temperature.
pub const DEFAULT_TAU: f64 = 0.05;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum GateMode {
    #[default]
    Softmax,
    Sigmoid,
    Tanh,
    Relu,
    None,
}

impl GateMode {
    pub fn name(self) -> &'static str {
        match self {
            GateMode::Softmax => "softmax",
            GateMode::Sigmoid => "sigmoid",
            GateMode::Tanh => "tanh",
            GateMode::Relu => "relu",
            GateMode::None => "none",
        }
    }
}

/// Gated mixing weights, `b x n x h x w`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SemanticVectors {
    pub values: Var,
    pub mode: GateMode,
    pub tau: f64,
}

impl SemanticVectors {
    pub fn count<T: Scalar>(&self, g: &Graph<T>) -> usize {
        g.shape(self.values).c
    }
}

/// Normalizes raw vectors: softmax of `tau * v` across channels, or the
/// named elementwise map of `tau * v`. `None` passes `v` through.
pub fn semantic_gate<T: Scalar>(g: &mut Graph<T>, raw: Var, mode: GateMode, tau: f64) -> Result<SemanticVectors> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::param("semantic_gate", format!("temperature must be positive, got {tau}")));
    }
    if g.shape(raw).c == 0 {
        return Err(Error::param("semantic_gate", "no candidate channels"));
    }
    g.value(raw).ensure_finite("semantic_gate input")?;
    let values = match mode {
        GateMode::Softmax => g.channel_softmax(raw, tau),
        GateMode::None => raw,
        other => {
            let act = match other {
                GateMode::Sigmoid => Activation::Sigmoid,
                GateMode::Tanh => Activation::Tanh,
                _ => Activation::Relu,
            };
            let scaled = g.scale(raw, tau);
            g.activation(scaled, act)
        }
    };
    Ok(SemanticVectors { values, mode, tau })
}

/// Bilinear resize to `h x w`; softmax-gated vectors are renormalized so
/// every position still sums to one.
pub fn resize_vectors<T: Scalar>(g: &mut Graph<T>, v: SemanticVectors, h: usize, w: usize) -> Result<SemanticVectors> {
    let s = g.shape(v.values);
    if (s.h, s.w) == (h, w) {
        return Ok(v);
    }
    let mut values = g.resize_bilinear(v.values, h, w)?;
    if v.mode == GateMode::Softmax {
        let total = g.channel_sum(values);
        values = g.div(values, total)?;
    }
    Ok(SemanticVectors { values, ..v })
}

fn check_gate(op: &'static str, f: Shape, v: Shape, n: usize) -> Result<()> {
    if v.c != n {
        return Err(Error::param(op, format!("gate has {} channels but the bank has {n} candidates", v.c)));
    }
    if (v.b, v.h, v.w) != (f.b, f.h, f.w) {
        return Err(Error::shape(op, format!("gate {v} does not align with features {f}")));
    }
    Ok(())
}

/// Spatially conditional convolution: at each position the kernel is the
/// gate-weighted sum of the candidates, and so is the bias. Evaluated as `n`
/// ordinary convolutions mixed per position, which is equal by linearity.
pub fn scc_forward<T: Scalar>(g: &mut Graph<T>, f: Var, v: Var, kernels: &[Var], biases: &[Var]) -> Result<Var> {
    let n = kernels.len();
    if n == 0 || biases.len() != n {
        return Err(Error::param("scc", format!("{n} kernels with {} biases", biases.len())));
    }
    let ks = g.shape(kernels[0]);
    for &k in kernels {
        if g.shape(k) != ks {
            return Err(Error::param("scc", format!("candidate {} differs from {ks}", g.shape(k))));
        }
    }
    if ks.h % 2 == 0 {
        return Err(Error::param("scc", format!("kernel size {} must be odd", ks.h)));
    }
    check_gate("scc", g.shape(f), g.shape(v), n)?;
    let kernel = if n == 1 { kernels[0] } else { g.concat(kernels, 0)? };
    let bias = if n == 1 { biases[0] } else { g.concat(biases, 1)? };
    let stacked = g.conv2d(f, kernel, Some(bias), 1, ks.h / 2)?;
    g.gate_mix(stacked, v)
}

/// Literal per-position evaluation: forms the mixed kernel and bias at each
/// output position and applies it to that receptive field.
pub fn scc_reference<T: Scalar>(f: &Tensor4<T>, v: &Tensor4<T>, kernels: &[Tensor4<T>], biases: &[Vec<T>]) -> Result<Tensor4<T>> {
    let n = kernels.len();
    if n == 0 || biases.len() != n {
        return Err(Error::param("scc", format!("{n} kernels with {} biases", biases.len())));
    }
    let ks = kernels[0].shape();
    if kernels.iter().any(|k| k.shape() != ks) || biases.iter().any(|b| b.len() != ks.b) {
        return Err(Error::param("scc", "candidates differ in shape"));
    }
    let fs = f.shape();
    check_gate("scc", fs, v.shape(), n)?;
    if ks.c != fs.c {
        return Err(Error::shape("scc", format!("kernel {ks} does not accept {} channels", fs.c)));
    }
    let k = ks.h;
    let pad = (k / 2) as isize;
    let mut out = Tensor4::zeros(Shape::new(fs.b, ks.b, fs.h, fs.w));
    let mut mixed = alloc::vec![T::zero(); ks.numel()];
    let mut mixed_bias = alloc::vec![T::zero(); ks.b];
    for b in 0..fs.b {
        for r in 0..fs.h {
            for c in 0..fs.w {
                mixed.iter_mut().for_each(|x| *x = T::zero());
                mixed_bias.iter_mut().for_each(|x| *x = T::zero());
                for i in 0..n {
                    let wgt = v.at(b, i, r, c);
                    for (m, &kv) in mixed.iter_mut().zip(kernels[i].data()) {
                        *m += wgt * kv;
                    }
                    for (m, &bv) in mixed_bias.iter_mut().zip(&biases[i]) {
                        *m += wgt * bv;
                    }
                }
                for co in 0..ks.b {
                    let mut acc = mixed_bias[co];
                    for ci in 0..fs.c {
                        for dy in 0..k {
                            let y = r as isize + dy as isize - pad;
                            if y < 0 || y >= fs.h as isize {
                                continue;
                            }
                            for dx in 0..k {
                                let x = c as isize + dx as isize - pad;
                                if x < 0 || x >= fs.w as isize {
                                    continue;
                                }
                                acc += mixed[ks.index(co, ci, dy, dx)] * f.at(b, ci, y as usize, x as usize);
                            }
                        }
                    }
                    out.set(b, co, r, c, acc);
                }
            }
        }
    }
    Ok(out)
}

/// Plain convolution of each candidate, for callers that only need one.
pub fn conv_candidate<T: Scalar>(f: &Tensor4<T>, kernel: &Tensor4<T>, bias: &[T]) -> Result<Tensor4<T>> {
    let k = kernel.shape().h;
    conv2d_forward(f, kernel, Some(bias), 1, k / 2)
}

/// Source of the normalization moments in [`scn_forward`].
#[derive(Clone, Copy, Debug)]
pub enum Moments {
    /// Population moments of the current batch.
    Batch,
    /// Precomputed `(mean, std)` vectors, `1 x c x 1 x 1`.
    Fixed(Var, Var),
}

#[derive(Clone, Copy, Debug)]
pub struct ScnOutput {
    pub out: Var,
    pub mean: Var,
    pub std: Var,
}

/// Spatially conditional normalization. `scales` and `shifts` are the
/// candidate banks laid out `c x n x 1 x 1` (column `i` is candidate `i`).
/// Output is `x_hat * (1 + s_hat) + m_hat` with `s_hat`, `m_hat` the
/// gate-weighted candidate mixtures at each position.
pub fn scn_forward<T: Scalar>(
    g: &mut Graph<T>,
    f: Var,
    v: Var,
    scales: Var,
    shifts: Var,
    moments: Moments,
) -> Result<ScnOutput> {
    let fs = g.shape(f);
    let bank = Shape::new(fs.c, g.shape(v).c, 1, 1);
    for b in [scales, shifts] {
        if g.shape(b) != bank {
            return Err(Error::shape("scn", format!("candidate bank {} should be {bank}", g.shape(b))));
        }
    }
    check_gate("scn", fs, g.shape(v), bank.c)?;
    let (mean, std) = match moments {
        Moments::Batch => batch_moments(g, f)?,
        Moments::Fixed(m, s) => {
            if g.shape(m) != Shape::vector(fs.c) || g.shape(s) != Shape::vector(fs.c) {
                return Err(Error::shape("scn", "running moments do not match the channel count"));
            }
            (m, s)
        }
    };
    let centered = g.sub(f, mean)?;
    let xhat = g.div(centered, std)?;
    let s_hat = g.conv2d(v, scales, None, 1, 0)?;
    let m_hat = g.conv2d(v, shifts, None, 1, 0)?;
    let scaled = g.mul(xhat, s_hat)?;
    let y = g.add(xhat, scaled)?;
    let out = g.add(y, m_hat)?;
    Ok(ScnOutput { out, mean, std })
}
