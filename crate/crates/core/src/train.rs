//! Optimizer, learning-rate schedule and the alternating update step.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adversary::{
    feature_matching_loss, hinge_d, hinge_g, perceptual_loss, svg_regression_loss, total_generator_loss,
    Discriminator, DiscriminatorConfig, FeatureExtractor, GeneratorTerms, LossWeights,
};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::generators::{Generator, GeneratorConfig};
use crate::params::{ParamStore, Phase};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor4};

/// Seed of the fixed perceptual feature extractor.
pub const FEATURE_SEED: u64 = 0x7068_6931;

fn default_lr_g() -> f64 {
    1e-4
}
fn default_lr_d() -> f64 {
    4e-4
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_batch() -> usize {
    4
}
fn default_steps() -> usize {
    500
}
fn default_seed() -> u64 {
    17
}
fn default_every() -> usize {
    250
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct TrainConfig {
    #[cfg_attr(feature = "serde", serde(default = "default_lr_g"))]
    pub lr_g: f64,
    #[cfg_attr(feature = "serde", serde(default = "default_lr_d"))]
    pub lr_d: f64,
    #[cfg_attr(feature = "serde", serde(default))]
    pub beta1: f64,
    #[cfg_attr(feature = "serde", serde(default = "default_beta2"))]
    pub beta2: f64,
    #[cfg_attr(feature = "serde", serde(default = "default_eps"))]
    pub eps: f64,
    #[cfg_attr(feature = "serde", serde(default = "default_batch"))]
    pub batch_size: usize,
    #[cfg_attr(feature = "serde", serde(default = "default_steps"))]
    pub total_steps: usize,
    /// Step at which linear decay begins; half of `total_steps` when absent.
    #[cfg_attr(feature = "serde", serde(default))]
    pub decay_start: Option<usize>,
    #[cfg_attr(feature = "serde", serde(default = "default_seed"))]
    pub seed: u64,
    #[cfg_attr(feature = "serde", serde(default = "default_every"))]
    pub checkpoint_every: usize,
    /// Check every parameter for NaN/Inf after each update.
    #[cfg_attr(feature = "serde", serde(default))]
    pub check_finite: bool,
    #[cfg_attr(feature = "serde", serde(default))]
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_g: default_lr_g(),
            lr_d: default_lr_d(),
            beta1: 0.0,
            beta2: default_beta2(),
            eps: default_eps(),
            batch_size: default_batch(),
            total_steps: default_steps(),
            decay_start: None,
            seed: default_seed(),
            checkpoint_every: default_every(),
            check_finite: false,
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    /// Desk-scale schedule: 500 steps with both rates four times the
    /// defaults.
    pub fn families4() -> Self {
        TrainConfig { lr_g: 4e-4, lr_d: 1.6e-3, total_steps: 500, ..TrainConfig::default() }
    }

    pub fn decay_start(&self) -> usize {
        self.decay_start.unwrap_or(self.total_steps / 2)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_g > 0.0 && self.lr_g.is_finite()) {
            return Err(Error::config("lr_g", format!("must be positive, got {}", self.lr_g)));
        }
        if !(self.lr_d >= self.lr_g && self.lr_d.is_finite()) {
            return Err(Error::config("lr_d", format!("must be at least lr_g, got {}", self.lr_d)));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::config("beta1", format!("must lie in [0, 1), got {}", self.beta1)));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("beta2", format!("must lie in [0, 1), got {}", self.beta2)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("eps", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.total_steps == 0 {
            return Err(Error::config("total_steps", "must be at least 1"));
        }
        if self.decay_start() > self.total_steps {
            return Err(Error::config(
                "decay_start",
                format!("{} exceeds total_steps {}", self.decay_start(), self.total_steps),
            ));
        }
        self.weights.validate()
    }
}

/// Learning rates `(generator, discriminator)` at `step`: constant until the
/// decay start, then linear to zero at `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> (f64, f64) {
    let total = cfg.total_steps;
    let start = cfg.decay_start();
    let step = step.min(total);
    let factor = if step < start {
        1.0
    } else if total == start {
        0.0
    } else {
        (total - step) as f64 / (total - start) as f64
    };
    (cfg.lr_g * factor, cfg.lr_d * factor)
}

/// Bias-corrected Adam moments for every parameter of one store.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || store.params().iter().map(|p| alloc::vec![T::zero(); p.value.len()]).collect();
        Adam { beta1, beta2, eps, t: 0, m: zeros(), v: zeros() }
    }

    /// One update of every parameter from its stored gradient. A non-finite
    /// gradient aborts before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        for p in store.params() {
            if let Some(i) = p.grad.data().iter().position(|g| !g.is_finite()) {
                return Err(Error::non_finite(format!("gradient of {} (flat index {i})", p.name)));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let b1 = T::of(self.beta1);
        let b2 = T::of(self.beta2);
        let c1 = T::of(1.0 - libm::pow(self.beta1, t as f64));
        let c2 = T::of(1.0 - libm::pow(self.beta2, t as f64));
        let lr = T::of(lr);
        let eps = T::of(self.eps);
        for ((p, m), v) in store.params_mut().iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grads = p.grad.data();
            let vals = p.value.data_mut();
            for j in 0..vals.len() {
                let g = grads[j];
                m[j] = b1 * m[j] + (T::one() - b1) * g;
                v[j] = b2 * v[j] + (T::one() - b2) * g * g;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                vals[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Standard-normal noise for `b` samples; the stream is fixed by
/// `(seed, stream)`.
pub fn sample_noise<T: Scalar>(seed: u64, stream: u64, b: usize, z_dim: usize) -> Tensor4<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    Tensor4::randn(Shape::new(b, z_dim, 1, 1), 1.0, &mut rng)
}

/// Every scalar reported by one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub step: usize,
    pub d_loss: f64,
    pub g_gan: f64,
    pub perceptual: f64,
    pub feature_matching: f64,
    pub svg: f64,
    pub g_total: f64,
    pub lr_g: f64,
    pub lr_d: f64,
}

impl LossReport {
    pub const HEADER: &'static str = "step,d_loss,g_gan,perceptual,feature_matching,svg,g_total,lr_g,lr_d";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.step,
            self.d_loss,
            self.g_gan,
            self.perceptual,
            self.feature_matching,
            self.svg,
            self.g_total,
            self.lr_g,
            self.lr_d
        )
    }
}

/// Generator, discriminator, feature extractor and both optimizers.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub generator: Generator<f32>,
    pub discriminator: Discriminator<f32>,
    pub features: FeatureExtractor<f32>,
    pub opt_g: Adam<f32>,
    pub opt_d: Adam<f32>,
    /// Number of completed steps.
    pub step: usize,
}

impl Trainer {
    pub fn new(
        gen: &GeneratorConfig,
        disc: &DiscriminatorConfig,
        config: &TrainConfig,
        features: FeatureExtractor<f32>,
    ) -> Result<Self> {
        config.validate()?;
        let generator = Generator::build(gen, config.seed)?;
        let discriminator = Discriminator::build(disc, gen.c_sem, gen.resolution, config.seed.wrapping_add(1))?;
        let opt_g = Adam::new(&generator.store, config.beta1, config.beta2, config.eps);
        let opt_d = Adam::new(&discriminator.store, config.beta1, config.beta2, config.eps);
        Ok(Trainer { config: config.clone(), generator, discriminator, features, opt_g, opt_d, step: 0 })
    }

    fn check_batch(&self, layout: &Tensor4<f32>, image: &Tensor4<f32>) -> Result<()> {
        let cfg = &self.generator.config;
        let ls = layout.shape();
        let is = image.shape();
        let r = cfg.resolution;
        if ls != Shape::new(ls.b, cfg.c_sem, r, r) || is != Shape::new(ls.b, 3, r, r) {
            return Err(Error::shape("train_step", format!("layout {ls} and image {is} do not fit the model")));
        }
        Ok(())
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self, layout: &Tensor4<f32>, image: &Tensor4<f32>) -> Result<LossReport> {
        self.check_batch(layout, image)?;
        let step = self.step;
        let (lr_g, lr_d) = lr_at(step, &self.config);
        let b = layout.shape().b;
        let z = sample_noise::<f32>(self.config.seed, step as u64, b, self.generator.config.z_dim);
        let fail = |what: &str, v: f64| -> Result<f64> {
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::non_finite(format!("{what} at step {step}")))
            }
        };

        // Discriminator update on a generator sample that records no graph
        // for the generator's parameters.
        self.generator.store.zero_grads();
        self.discriminator.store.zero_grads();
        let d_loss = {
            let mut g = Graph::new();
            let lay = g.constant(layout.clone());
            let real = g.constant(image.clone());
            let zv = g.constant(z.clone());
            let out = self.generator.forward(&mut g, lay, zv, Phase::Check, false)?;
            let fake = g.detach(out.image);
            let bound = self.discriminator.store.bind(&mut g, Phase::Train, true)?;
            let dr = self.discriminator.forward_bound(&mut g, &bound, real, lay)?;
            let df = self.discriminator.forward_bound(&mut g, &bound, fake, lay)?;
            let loss = hinge_d(&mut g, &dr.scores, &df.scores)?;
            let value = fail("discriminator loss", g.item(loss)? as f64)?;
            g.backward(loss)?;
            self.discriminator.store.pull_grads(&g, &bound);
            value
        };
        self.opt_d.step(&mut self.discriminator.store, lr_d)?;
        self.discriminator.store.zero_grads();

        // Generator update with a fresh forward pass.
        let mut g = Graph::new();
        let lay = g.constant(layout.clone());
        let real = g.constant(image.clone());
        let zv = g.constant(z);
        let gb = self.generator.store.bind(&mut g, Phase::Train, true)?;
        let out = self.generator.forward_bound(&mut g, &gb, lay, zv, Phase::Train)?;
        let db = self.discriminator.store.bind(&mut g, Phase::Check, false)?;
        let df = self.discriminator.forward_bound(&mut g, &db, out.image, lay)?;
        let dr = self.discriminator.forward_bound(&mut g, &db, real, lay)?;
        let w = &self.config.weights;
        let gan = hinge_g(&mut g, &df.scores)?;
        let fm = feature_matching_loss(&mut g, &df.features, &dr.features)?;
        let perceptual = perceptual_loss(&mut g, out.image, real, &self.features)?;
        let svg = if w.svg_perceptual {
            perceptual_loss(&mut g, out.svg.image, real, &self.features)?
        } else {
            svg_regression_loss(&mut g, out.svg.image, real, w.norm_p)?
        };
        let terms = GeneratorTerms { perceptual, gan, feature_matching: fm, svg };
        let total = total_generator_loss(&mut g, &terms, w)?;
        let report = LossReport {
            step,
            d_loss,
            g_gan: g.item(gan)? as f64,
            perceptual: g.item(perceptual)? as f64,
            feature_matching: g.item(fm)? as f64,
            svg: g.item(svg)? as f64,
            g_total: fail("generator loss", g.item(total)? as f64)?,
            lr_g,
            lr_d,
        };
        g.backward(total)?;
        self.generator.store.pull_grads(&g, &gb);
        drop(g);
        self.opt_g.step(&mut self.generator.store, lr_g)?;
        self.generator.store.zero_grads();
        if self.config.check_finite {
            for p in self.generator.store.params().iter().chain(self.discriminator.store.params()) {
                p.value.ensure_finite(&p.name)?;
            }
        }
        self.step += 1;
        Ok(report)
    }

    /// Every piece of mutable state as named tensors.
    pub fn named_state(&self) -> Vec<(String, Tensor4<f32>)> {
        let mut out = Vec::new();
        export_store("g", &self.generator.store, &mut out);
        export_adam("opt_g", &self.generator.store, &self.opt_g, &mut out);
        export_store("d", &self.discriminator.store, &mut out);
        export_adam("opt_d", &self.discriminator.store, &self.opt_d, &mut out);
        out
    }

    /// Restores state written by [`Trainer::named_state`] at `step`.
    pub fn load_named_state(&mut self, tensors: Vec<(String, Tensor4<f32>)>, step: usize) -> Result<()> {
        let mut map: BTreeMap<String, Tensor4<f32>> = tensors.into_iter().collect();
        import_store("g", &mut self.generator.store, &mut map)?;
        import_adam("opt_g", &self.generator.store, &mut self.opt_g, &mut map)?;
        import_store("d", &mut self.discriminator.store, &mut map)?;
        import_adam("opt_d", &self.discriminator.store, &mut self.opt_d, &mut map)?;
        if let Some(name) = map.keys().next() {
            return Err(Error::State(format!("unexpected tensor `{name}` in saved state")));
        }
        self.step = step;
        self.opt_g.t = step as u64;
        self.opt_d.t = step as u64;
        Ok(())
    }
}

fn vector(v: &[f32]) -> Tensor4<f32> {
    Tensor4::from_vec(Shape::vector(v.len()), v.to_vec()).expect("vector shape")
}

/// Named tensors for the values, spectral vectors and running statistics of
/// a store.
pub fn export_store<T: Scalar>(prefix: &str, store: &ParamStore<T>, out: &mut Vec<(String, Tensor4<T>)>) {
    let vec_t = |v: &[T]| Tensor4::from_vec(Shape::vector(v.len()), v.to_vec()).expect("vector shape");
    for p in store.params() {
        out.push((format!("{prefix}/{}", p.name), p.value.clone()));
        if let Some(s) = &p.spectral {
            out.push((format!("{prefix}/{}#u", p.name), vec_t(&s.u)));
            out.push((format!("{prefix}/{}#v", p.name), vec_t(&s.v)));
        }
    }
    for s in store.stats() {
        if let (Some(m), Some(v)) = (&s.mean, &s.var) {
            out.push((format!("{prefix}/{}#running_mean", s.name), vec_t(m)));
            out.push((format!("{prefix}/{}#running_var", s.name), vec_t(v)));
        }
    }
}

fn take<T: Scalar>(map: &mut BTreeMap<String, Tensor4<T>>, name: &str, shape: Shape) -> Result<Tensor4<T>> {
    let t = map.remove(name).ok_or_else(|| Error::State(format!("saved state lacks `{name}`")))?;
    if t.shape() != shape {
        return Err(Error::State(format!("`{name}` has shape {}, expected {shape}", t.shape())));
    }
    Ok(t)
}

pub fn import_store<T: Scalar>(prefix: &str, store: &mut ParamStore<T>, map: &mut BTreeMap<String, Tensor4<T>>) -> Result<()> {
    for p in store.params_mut() {
        p.value = take(map, &format!("{prefix}/{}", p.name), p.value.shape())?;
        if let Some(s) = &mut p.spectral {
            s.u = take(map, &format!("{prefix}/{}#u", p.name), Shape::vector(s.u.len()))?.into_vec();
            s.v = take(map, &format!("{prefix}/{}#v", p.name), Shape::vector(s.v.len()))?.into_vec();
        }
    }
    for s in store.stats_mut() {
        let mean_key = format!("{prefix}/{}#running_mean", s.name);
        let var_key = format!("{prefix}/{}#running_var", s.name);
        if map.contains_key(&mean_key) {
            s.mean = Some(take(map, &mean_key, Shape::vector(s.channels))?.into_vec());
            s.var = Some(take(map, &var_key, Shape::vector(s.channels))?.into_vec());
        } else {
            s.mean = None;
            s.var = None;
        }
    }
    Ok(())
}

fn export_adam(prefix: &str, store: &ParamStore<f32>, opt: &Adam<f32>, out: &mut Vec<(String, Tensor4<f32>)>) {
    for ((p, m), v) in store.params().iter().zip(&opt.m).zip(&opt.v) {
        out.push((format!("{prefix}/{}#m", p.name), vector(m)));
        out.push((format!("{prefix}/{}#v", p.name), vector(v)));
    }
}

fn import_adam(
    prefix: &str,
    store: &ParamStore<f32>,
    opt: &mut Adam<f32>,
    map: &mut BTreeMap<String, Tensor4<f32>>,
) -> Result<()> {
    for (i, p) in store.params().iter().enumerate() {
        let n = p.value.len();
        opt.m[i] = take(map, &format!("{prefix}/{}#m", p.name), Shape::vector(n))?.into_vec();
        opt.v[i] = take(map, &format!("{prefix}/{}#v", p.name), Shape::vector(n))?.into_vec();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig { total_steps: 100, ..TrainConfig::default() };
        assert_eq!(lr_at(0, &cfg), (1e-4, 4e-4));
        assert_eq!(lr_at(100, &cfg), (0.0, 0.0));
        let (g, d) = lr_at(75, &cfg);
        assert!((g - 0.5e-4).abs() < 1e-18 && (d - 2e-4).abs() < 1e-18);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("p", Tensor4::from_vec(Shape::vector(3), alloc::vec![1.0, 1.0, 1.0]).unwrap());
        store.param_mut(id).grad = Tensor4::from_vec(Shape::vector(3), alloc::vec![0.3, -2.0, 0.0]).unwrap();
        let mut opt = Adam::new(&store, 0.0, 0.999, 1e-8);
        opt.step(&mut store, 1e-2).unwrap();
        let v = store.param(id).value.data();
        assert!((v[0] - 0.99).abs() < 1e-8);
        assert!((v[1] - 1.01).abs() < 1e-8);
        assert_eq!(v[2], 1.0);
    }

    #[test]
    fn adam_rejects_nan() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("p", Tensor4::zeros(Shape::vector(2)));
        store.param_mut(id).grad.data_mut()[1] = f32::NAN;
        let mut opt = Adam::new(&store, 0.0, 0.999, 1e-8);
        assert!(matches!(opt.step(&mut store, 1e-3), Err(Error::NonFinite { .. })));
        assert_eq!(opt.t, 0);
    }

    #[test]
    fn config_validation() {
        let cfg = TrainConfig { lr_d: 1e-5, ..TrainConfig::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "lr_d"));
        let cfg = TrainConfig { decay_start: Some(900), ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
