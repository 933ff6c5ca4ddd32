//! Named parameter storage, spectral-norm state and running statistics.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor4};

/// Power iterations run on a freshly created spectral state so that the
/// first estimate is positive and reasonable.
pub const SPECTRAL_WARMUP: usize = 5;

/// Momentum of the running normalization statistics.
pub const RUNNING_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StatsId(pub(crate) usize);

/// How a forward pass treats spectral norms and normalization statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    /// One power iteration per bind, batch statistics, running stats updated.
    Train,
    /// Frozen spectral vectors, stored running statistics.
    Eval,
    /// Frozen spectral vectors, batch statistics, nothing updated.
    Check,
}

impl Phase {
    pub fn updates_state(self) -> bool {
        self == Phase::Train
    }

    pub fn uses_running_stats(self) -> bool {
        self == Phase::Eval
    }
}

/// Persistent left/right singular vector estimates of a weight viewed as
/// `c_out x (c_in*kh*kw)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralState<T> {
    pub u: Vec<T>,
    pub v: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor4<T>,
    pub grad: Tensor4<T>,
    pub spectral: Option<SpectralState<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub name: String,
    pub channels: usize,
    /// `None` until the first training batch.
    pub mean: Option<Vec<T>>,
    pub var: Option<Vec<T>>,
}

/// Graph handles for every parameter of one store, produced by
/// [`ParamStore::bind`].
#[derive(Clone, Debug)]
pub struct Bound {
    leaves: Vec<Var>,
    vars: Vec<Var>,
}

impl Bound {
    /// The value to use in the forward pass (spectrally normalized when the
    /// parameter carries spectral state).
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// The raw leaf the gradient lands on.
    pub fn leaf(&self, id: ParamId) -> Var {
        self.leaves[id.0]
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    stats: Vec<RunningStats<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), stats: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor4<T>) -> ParamId {
        let grad = Tensor4::zeros(value.shape());
        self.params.push(Param { name: name.into(), value, grad, spectral: None });
        ParamId(self.params.len() - 1)
    }

    /// Adds a parameter whose forward value is `value / sigma(value)`.
    pub fn add_spectral<R: Rng + ?Sized>(&mut self, name: impl Into<String>, value: Tensor4<T>, rng: &mut R) -> ParamId {
        let s = value.shape();
        let rows = s.b;
        let cols = s.c * s.plane();
        let mut u = random_unit::<T, R>(rows, rng);
        let mut v = random_unit::<T, R>(cols, rng);
        power_iteration(value.data(), &mut u, &mut v, SPECTRAL_WARMUP);
        let id = self.add(name, value);
        self.params[id.0].spectral = Some(SpectralState { u, v });
        id
    }

    pub fn add_stats(&mut self, name: impl Into<String>, channels: usize) -> StatsId {
        self.stats.push(RunningStats { name: name.into(), channels, mean: None, var: None });
        StatsId(self.stats.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn stats(&self) -> &[RunningStats<T>] {
        &self.stats
    }

    pub fn stats_mut(&mut self) -> &mut [RunningStats<T>] {
        &mut self.stats
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Records every parameter in `g`. Leaves receive gradients when
    /// `trainable`; under [`Phase::Train`] each spectral state advances by one
    /// power iteration first.
    pub fn bind(&mut self, g: &mut Graph<T>, phase: Phase, trainable: bool) -> Result<Bound> {
        self.bind_with(g, phase, trainable, None)
    }

    /// Like [`ParamStore::bind`], but `replace` substitutes an existing graph
    /// variable for one parameter's leaf.
    pub fn bind_with(
        &mut self,
        g: &mut Graph<T>,
        phase: Phase,
        trainable: bool,
        replace: Option<(ParamId, Var)>,
    ) -> Result<Bound> {
        let mut leaves = Vec::with_capacity(self.params.len());
        let mut vars = Vec::with_capacity(self.params.len());
        for (i, p) in self.params.iter_mut().enumerate() {
            let leaf = match replace {
                Some((id, v)) if id.0 == i => {
                    if g.shape(v) != p.value.shape() {
                        return Err(Error::shape(
                            "bind",
                            format!("replacement {} for {} has shape {}", g.shape(v), p.name, p.value.shape()),
                        ));
                    }
                    v
                }
                _ if trainable => g.variable(p.value.clone()),
                _ => g.constant(p.value.clone()),
            };
            let var = match &mut p.spectral {
                Some(st) => {
                    if phase.updates_state() {
                        power_iteration(p.value.data(), &mut st.u, &mut st.v, 1);
                    }
                    g.spectral_scale(leaf, st.u.clone(), st.v.clone())?
                }
                None => leaf,
            };
            leaves.push(leaf);
            vars.push(var);
        }
        Ok(Bound { leaves, vars })
    }

    /// Adds the gradients recorded in `g` into the stored gradients.
    pub fn pull_grads(&mut self, g: &Graph<T>, bound: &Bound) {
        for (p, &leaf) in self.params.iter_mut().zip(&bound.leaves) {
            if let Some(gr) = g.grad(leaf) {
                for (d, &s) in p.grad.data_mut().iter_mut().zip(gr) {
                    *d += s;
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn grads_are_zero(&self) -> bool {
        self.params.iter().all(|p| p.grad.data().iter().all(|v| *v == T::zero()))
    }

    /// Running statistics as `(mean, std)` constants.
    pub fn running_moments(&self, id: StatsId, g: &mut Graph<T>, eps: f64) -> Result<(Var, Var)> {
        let st = &self.stats[id.0];
        let (Some(mean), Some(var)) = (&st.mean, &st.var) else {
            return Err(Error::State(format!("no running statistics recorded for {}", st.name)));
        };
        let shape = Shape::vector(st.channels);
        let m = g.constant(Tensor4::from_vec(shape, mean.clone())?);
        let std: Vec<T> = var.iter().map(|&v| (v + T::of(eps)).sqrt()).collect();
        let s = g.constant(Tensor4::from_vec(shape, std)?);
        Ok((m, s))
    }

    /// Folds one batch's population moments into the running statistics.
    pub fn update_running(&mut self, id: StatsId, mean: &[T], var: &[T]) {
        let st = &mut self.stats[id.0];
        let mom = T::of(RUNNING_MOMENTUM);
        match (&mut st.mean, &mut st.var) {
            (Some(m), Some(v)) => {
                for (r, &b) in m.iter_mut().zip(mean) {
                    *r = (T::one() - mom) * *r + mom * b;
                }
                for (r, &b) in v.iter_mut().zip(var) {
                    *r = (T::one() - mom) * *r + mom * b;
                }
            }
            _ => {
                st.mean = Some(mean.to_vec());
                st.var = Some(var.to_vec());
            }
        }
    }

    /// Same store with every value converted to `U`.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::of(x.as_f64())).collect::<Vec<U>>();
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    spectral: p.spectral.as_ref().map(|s| SpectralState { u: conv(&s.u), v: conv(&s.v) }),
                })
                .collect(),
            stats: self
                .stats
                .iter()
                .map(|s| RunningStats {
                    name: s.name.clone(),
                    channels: s.channels,
                    mean: s.mean.as_deref().map(conv),
                    var: s.var.as_deref().map(conv),
                })
                .collect(),
        }
    }
}

fn random_unit<T: Scalar, R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<T> {
    let mut v: Vec<T> = (0..n).map(|_| T::of(rng.sample::<f64, _>(StandardNormal))).collect();
    normalize(&mut v);
    v
}

fn normalize<T: Scalar>(v: &mut [T]) -> T {
    let norm = v.iter().map(|&x| x * x).sum::<T>().sqrt();
    let d = norm.max(T::of(crate::autodiff::SPECTRAL_EPS));
    v.iter_mut().for_each(|x| *x /= d);
    norm
}

/// Advances `(u, v)` by `iters` steps of `v <- W^T u / |.|`, `u <- W v / |.|`
/// on the row-major `rows x cols` matrix `w` (`rows = u.len()`), returning
/// the estimate `u^T W v`.
pub fn power_iteration<T: Scalar>(w: &[T], u: &mut [T], v: &mut [T], iters: usize) -> T {
    let rows = u.len();
    let cols = v.len();
    debug_assert_eq!(w.len(), rows * cols);
    for _ in 0..iters {
        T::gemm(cols, rows, 1, T::one(), w, true, u, false, T::zero(), v);
        normalize(v);
        T::gemm(rows, cols, 1, T::one(), w, false, v, false, T::zero(), u);
        normalize(u);
    }
    crate::autodiff::bilinear_form(w, u, v)
}

/// `w / sigma(w)` on plain tensors after `iters` power iterations that
/// update `state` in place. A zero matrix stays zero.
pub fn spectral_normalize<T: Scalar>(w: &Tensor4<T>, state: &mut SpectralState<T>, iters: usize) -> Result<Tensor4<T>> {
    let s = w.shape();
    if state.u.len() != s.b || state.v.len() != s.c * s.plane() {
        return Err(Error::shape(
            "spectral_normalize",
            format!("vectors {}x{} do not fit weight {s}", state.u.len(), state.v.len()),
        ));
    }
    let sigma = power_iteration(w.data(), &mut state.u, &mut state.v, iters);
    let d = sigma.max(T::of(crate::autodiff::SPECTRAL_EPS));
    Ok(w.map(|x| x / d))
}

impl<T: Scalar> SpectralState<T> {
    /// Uniform unit vectors sized for `shape`.
    pub fn for_shape(shape: Shape) -> Self {
        let rows = shape.b;
        let cols = shape.c * shape.plane();
        let fill = |n: usize| vec![T::one() / T::of(n as f64).sqrt(); n];
        SpectralState { u: fill(rows), v: fill(cols) }
    }
}
