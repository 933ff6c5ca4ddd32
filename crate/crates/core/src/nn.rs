//! Layer building blocks shared by the networks.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Graph, Var, MOMENT_EPS};
use crate::condops::{scc_forward, scn_forward, Moments};
use crate::error::Result;
use crate::params::{Bound, ParamId, ParamStore, Phase, StatsId};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor4};

/// Fan-in scaled normal standard deviation, `sqrt(2 / fan_in)`.
pub fn he_std(fan_in: usize) -> f64 {
    libm::sqrt(2.0 / fan_in as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    /// Kernel `c_out x c_in x k x k` drawn with standard deviation `std`,
    /// zero bias. `spectral` wraps the kernel in spectral normalization.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        std: Option<f64>,
        spectral: bool,
    ) -> Conv {
        let std = std.unwrap_or_else(|| he_std(c_in * k * k));
        let w = Tensor4::randn(Shape::new(c_out, c_in, k, k), std, rng);
        let weight = if spectral {
            store.add_spectral(format!("{name}.weight"), w, rng)
        } else {
            store.add(format!("{name}.weight"), w)
        };
        let bias = store.add(format!("{name}.bias"), Tensor4::zeros(Shape::vector(c_out)));
        Conv { weight, bias, stride, pad: k / 2 }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p.var(self.weight), Some(p.var(self.bias)), self.stride, self.pad)
    }
}

/// Candidate bank of a spatially conditional convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Scc {
    pub kernels: Vec<ParamId>,
    pub biases: Vec<ParamId>,
}

impl Scc {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        n: usize,
    ) -> Scc {
        let std = he_std(c_in * k * k);
        let mut kernels = Vec::with_capacity(n);
        let mut biases = Vec::with_capacity(n);
        for i in 0..n {
            let w = Tensor4::randn(Shape::new(c_out, c_in, k, k), std, rng);
            kernels.push(store.add_spectral(format!("{name}.kernel{i}"), w, rng));
            biases.push(store.add(format!("{name}.bias{i}"), Tensor4::zeros(Shape::vector(c_out))));
        }
        Scc { kernels, biases }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var, v: Var) -> Result<Var> {
        let ks: Vec<Var> = self.kernels.iter().map(|&k| p.var(k)).collect();
        let bs: Vec<Var> = self.biases.iter().map(|&b| p.var(b)).collect();
        scc_forward(g, x, v, &ks, &bs)
    }
}

/// Candidate banks and running statistics of a spatially conditional
/// normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct Scn {
    pub scales: ParamId,
    pub shifts: ParamId,
    pub stats: StatsId,
}

impl Scn {
    /// Both banks start at zero, so the layer begins as plain normalization.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize, n: usize) -> Scn {
        let shape = Shape::new(c, n, 1, 1);
        Scn {
            scales: store.add(format!("{name}.scales"), Tensor4::zeros(shape)),
            shifts: store.add(format!("{name}.shifts"), Tensor4::zeros(shape)),
            stats: store.add_stats(String::from(name), c),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        store: &mut ParamStore<T>,
        phase: Phase,
        x: Var,
        v: Var,
    ) -> Result<Var> {
        let moments = if phase.uses_running_stats() {
            let (m, s) = store.running_moments(self.stats, g, MOMENT_EPS)?;
            Moments::Fixed(m, s)
        } else {
            Moments::Batch
        };
        let out = scn_forward(g, x, v, p.var(self.scales), p.var(self.shifts), moments)?;
        if phase.updates_state() {
            let mean = g.value(out.mean).data().to_vec();
            let eps = T::of(MOMENT_EPS);
            let var: Vec<T> = g.value(out.std).data().iter().map(|&s| (s * s - eps).max(T::zero())).collect();
            store.update_running(self.stats, &mean, &var);
        }
        Ok(out.out)
    }
}
