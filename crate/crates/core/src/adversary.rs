//! Discriminator, fixed feature extractor and the loss terms.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Activation, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{he_std, Conv};
use crate::params::{Bound, ParamId, ParamStore, Phase};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor4};

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct DiscriminatorConfig {
    /// Width of each convolution of a branch. All but the last halve the
    /// resolution.
    pub channels: Vec<usize>,
    /// Number of input scales; scale `k` sees the image resized by `2^-k`.
    pub scales: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig { channels: vec![32, 64, 64], scales: 2 }
    }
}

impl DiscriminatorConfig {
    /// Number of stride-2 convolutions per branch.
    pub fn depth(&self) -> usize {
        self.channels.len().saturating_sub(1)
    }

    pub fn validate(&self, resolution: usize) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::config("discriminator.channels", "need at least one positive width"));
        }
        if self.scales == 0 {
            return Err(Error::config("discriminator.scales", "need at least one scale"));
        }
        let shrink = self.depth() + self.scales - 1;
        if shrink >= usize::BITS as usize || resolution % (1 << shrink) != 0 {
            return Err(Error::config(
                "discriminator.channels",
                format!("resolution {resolution} cannot be halved {shrink} times"),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Branch {
    convs: Vec<Conv>,
    score: Conv,
    embed: ParamId,
}

#[derive(Clone, Debug)]
pub struct DiscriminatorOutput {
    /// One patch score map per scale.
    pub scores: Vec<Var>,
    /// Post-activation feature maps of each scale.
    pub features: Vec<Vec<Var>>,
}

/// Multi-scale patch discriminator with a projection head: the score map is
/// a 1x1 convolution of the last features plus their per-position inner
/// product with an embedding of the layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<T> {
    pub config: DiscriminatorConfig,
    pub c_sem: usize,
    pub store: ParamStore<T>,
    branches: Vec<Branch>,
}

impl<T: Scalar> Discriminator<T> {
    pub fn build(config: &DiscriminatorConfig, c_sem: usize, resolution: usize, seed: u64) -> Result<Self> {
        config.validate(resolution)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut branches = Vec::with_capacity(config.scales);
        for s in 0..config.scales {
            let mut convs = Vec::with_capacity(config.channels.len());
            let mut c_in = 3;
            for (i, &c) in config.channels.iter().enumerate() {
                let stride = if i + 1 < config.channels.len() { 2 } else { 1 };
                convs.push(Conv::new(&mut store, &mut rng, &format!("d.scale{s}.conv{}", i + 1), c_in, c, 3, stride, None, true));
                c_in = c;
            }
            let score = Conv::new(&mut store, &mut rng, &format!("d.scale{s}.score"), c_in, 1, 1, 1, None, true);
            let w = Tensor4::randn(Shape::new(c_in, c_sem, 1, 1), he_std(c_sem), &mut rng);
            let embed = store.add_spectral(format!("d.scale{s}.embed.weight"), w, &mut rng);
            branches.push(Branch { convs, score, embed });
        }
        Ok(Discriminator { config: config.clone(), c_sem, store, branches })
    }

    pub fn cast<U: Scalar>(&self) -> Discriminator<U> {
        Discriminator {
            config: self.config.clone(),
            c_sem: self.c_sem,
            store: self.store.cast(),
            branches: self.branches.clone(),
        }
    }

    /// Parameter id of the layout embedding of scale `s`.
    pub fn embedding(&self, s: usize) -> ParamId {
        self.branches[s].embed
    }

    pub fn forward(&mut self, g: &mut Graph<T>, image: Var, layout: Var, phase: Phase, trainable: bool) -> Result<DiscriminatorOutput> {
        let bound = self.store.bind(g, phase, trainable)?;
        self.forward_bound(g, &bound, image, layout)
    }

    pub fn forward_bound(&self, g: &mut Graph<T>, p: &Bound, image: Var, layout: Var) -> Result<DiscriminatorOutput> {
        let is = g.shape(image);
        let ls = g.shape(layout);
        if is.c != 3 || ls.c != self.c_sem || (is.b, is.h, is.w) != (ls.b, ls.h, ls.w) {
            return Err(Error::shape(
                "discriminator",
                format!("image {is} and layout {ls} ({} classes expected) do not align", self.c_sem),
            ));
        }
        let mut scores = Vec::with_capacity(self.branches.len());
        let mut features = Vec::with_capacity(self.branches.len());
        for (s, branch) in self.branches.iter().enumerate() {
            let mut x = g.resize_bilinear(image, is.h >> s, is.w >> s)?;
            let mut feats = Vec::with_capacity(branch.convs.len());
            for conv in &branch.convs {
                let h = conv.forward(g, p, x)?;
                x = g.leaky_relu(h);
                feats.push(x);
            }
            let fs = g.shape(x);
            let lay = g.resize_bilinear(layout, fs.h, fs.w)?;
            let emb = g.conv2d(lay, p.var(branch.embed), None, 1, 0)?;
            let prod = g.mul(emb, x)?;
            let proj = g.channel_sum(prod);
            let base = branch.score.forward(g, p, x)?;
            scores.push(g.add(base, proj)?);
            features.push(feats);
        }
        Ok(DiscriminatorOutput { scores, features })
    }
}

/// Default widths of the fixed feature extractor stages.
pub const FEATURE_CHANNELS: [usize; 5] = [8, 16, 32, 32, 64];

/// Fixed five-stage convolutional pyramid standing in for a pretrained
/// perceptual network. Every stage but the first halves the resolution
/// before its convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor<T> {
    stages: Vec<(Tensor4<T>, Vec<T>)>,
    activation: Option<Activation>,
}

impl<T: Scalar> FeatureExtractor<T> {
    pub fn seeded(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stages = Vec::with_capacity(FEATURE_CHANNELS.len());
        let mut c_in = 3;
        for &c in &FEATURE_CHANNELS {
            let w = Tensor4::randn(Shape::new(c, c_in, 3, 3), he_std(c_in * 9), &mut rng);
            stages.push((w, vec![T::zero(); c]));
            c_in = c;
        }
        FeatureExtractor { stages, activation: Some(Activation::Relu) }
    }

    /// Uses externally supplied `(kernel, bias)` pairs, one per stage.
    pub fn from_weights(stages: Vec<(Tensor4<T>, Vec<T>)>) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::param("feature_extractor", "no stages"));
        }
        let mut c_in = 3;
        for (i, (k, b)) in stages.iter().enumerate() {
            let s = k.shape();
            if s.c != c_in || s.h != s.w || s.h % 2 == 0 || b.len() != s.b {
                return Err(Error::shape(
                    "feature_extractor",
                    format!("stage {i}: kernel {s} with {} biases after {c_in} channels", b.len()),
                ));
            }
            k.ensure_finite("feature extractor weights")?;
            c_in = s.b;
        }
        Ok(FeatureExtractor { stages, activation: Some(Activation::Relu) })
    }

    /// The same stages with the nonlinearity removed.
    pub fn linear(mut self) -> Self {
        self.activation = None;
        self
    }

    pub fn stages(&self) -> &[(Tensor4<T>, Vec<T>)] {
        &self.stages
    }

    pub fn output_dim(&self) -> usize {
        self.stages.last().map_or(0, |(k, _)| k.shape().b)
    }

    pub fn cast<U: Scalar>(&self) -> FeatureExtractor<U> {
        FeatureExtractor {
            stages: self
                .stages
                .iter()
                .map(|(k, b)| (k.cast(), b.iter().map(|v| U::of(v.as_f64())).collect()))
                .collect(),
            activation: self.activation,
        }
    }

    /// Feature map of every stage.
    pub fn forward(&self, g: &mut Graph<T>, image: Var) -> Result<Vec<Var>> {
        let mut x = image;
        let mut out = Vec::with_capacity(self.stages.len());
        for (i, (k, b)) in self.stages.iter().enumerate() {
            if i > 0 {
                let s = g.shape(x);
                x = g.resize_bilinear(x, (s.h / 2).max(1), (s.w / 2).max(1))?;
            }
            let kv = g.constant(k.clone());
            let bv = g.constant(Tensor4::from_vec(Shape::vector(b.len()), b.clone())?);
            let pad = k.shape().h / 2;
            x = g.conv2d(x, kv, Some(bv), 1, pad)?;
            if let Some(a) = self.activation {
                x = g.activation(x, a);
            }
            out.push(x);
        }
        Ok(out)
    }

    /// Global average of the final stage per image, `b x dim` row-major.
    pub fn pooled(&self, images: &Tensor4<T>) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let feats = self.forward(&mut g, x)?;
        let last = g.value(*feats.last().expect("stages")).clone();
        let s = last.shape();
        let mut rows = Vec::with_capacity(s.b);
        for b in 0..s.b {
            let row = (0..s.c)
                .map(|c| {
                    let off = s.index(b, c, 0, 0);
                    let sum: f64 = last.data()[off..off + s.plane()].iter().map(|v| v.as_f64()).sum();
                    sum / s.plane() as f64
                })
                .collect();
            rows.push(row);
        }
        Ok(rows)
    }
}

fn mean_abs_diff<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::shape("loss", format!("{} vs {}", g.shape(a), g.shape(b))));
    }
    let d = g.sub(a, b)?;
    let d = g.abs(d);
    Ok(g.mean(d))
}

fn average<T: Scalar>(g: &mut Graph<T>, terms: &[Var]) -> Result<Var> {
    let (&first, rest) = terms.split_first().ok_or_else(|| Error::param("loss", "no terms to average"))?;
    let mut acc = first;
    for &t in rest {
        acc = g.add(acc, t)?;
    }
    Ok(g.scale(acc, 1.0 / terms.len() as f64))
}

/// Mean over scales of `mean(relu(1 - real)) + mean(relu(1 + fake))`.
pub fn hinge_d<T: Scalar>(g: &mut Graph<T>, real: &[Var], fake: &[Var]) -> Result<Var> {
    if real.len() != fake.len() {
        return Err(Error::param("hinge_d", format!("{} real vs {} fake scales", real.len(), fake.len())));
    }
    let mut terms = Vec::with_capacity(real.len());
    for (&r, &f) in real.iter().zip(fake) {
        let r = g.neg(r);
        let r = g.add_scalar(r, 1.0);
        let r = g.relu(r);
        let r = g.mean(r);
        let f = g.add_scalar(f, 1.0);
        let f = g.relu(f);
        let f = g.mean(f);
        terms.push(g.add(r, f)?);
    }
    average(g, &terms)
}

/// Mean over scales of `mean(-fake)`.
pub fn hinge_g<T: Scalar>(g: &mut Graph<T>, fake: &[Var]) -> Result<Var> {
    let mut terms = Vec::with_capacity(fake.len());
    for &f in fake {
        let m = g.mean(f);
        terms.push(g.neg(m));
    }
    average(g, &terms)
}

/// Sum over extractor stages of the mean absolute feature difference.
pub fn perceptual_loss<T: Scalar>(g: &mut Graph<T>, fake: Var, real: Var, phi: &FeatureExtractor<T>) -> Result<Var> {
    if g.shape(fake) != g.shape(real) {
        return Err(Error::shape("perceptual_loss", format!("{} vs {}", g.shape(fake), g.shape(real))));
    }
    let ff = phi.forward(g, fake)?;
    let fr = phi.forward(g, real)?;
    let mut acc: Option<Var> = None;
    for (&a, &b) in ff.iter().zip(&fr) {
        let t = mean_abs_diff(g, a, b)?;
        acc = Some(match acc {
            Some(s) => g.add(s, t)?,
            None => t,
        });
    }
    acc.ok_or_else(|| Error::param("perceptual_loss", "extractor has no stages"))
}

/// Layerwise mean absolute difference averaged over layers and scales.
/// The real features are detached.
pub fn feature_matching_loss<T: Scalar>(g: &mut Graph<T>, fake: &[Vec<Var>], real: &[Vec<Var>]) -> Result<Var> {
    if fake.len() != real.len() || fake.iter().zip(real).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::param("feature_matching_loss", "feature lists are not aligned"));
    }
    let mut terms = Vec::new();
    for (fs, rs) in fake.iter().zip(real) {
        for (&f, &r) in fs.iter().zip(rs) {
            let r = g.detach(r);
            terms.push(mean_abs_diff(g, f, r)?);
        }
    }
    average(g, &terms)
}

/// Mean elementwise `|a - b|^p` for `p` in {1, 2}.
pub fn svg_regression_loss<T: Scalar>(g: &mut Graph<T>, predicted: Var, real: Var, p: u8) -> Result<Var> {
    match p {
        1 => mean_abs_diff(g, predicted, real),
        2 => {
            if g.shape(predicted) != g.shape(real) {
                return Err(Error::shape("svg_regression_loss", "shape mismatch"));
            }
            let d = g.sub(predicted, real)?;
            let d = g.square(d);
            Ok(g.mean(d))
        }
        _ => Err(Error::param("svg_regression_loss", format!("norm must be 1 or 2, got {p}"))),
    }
}

fn default_lambda_p() -> f64 {
    10.0
}
fn default_lambda_gan() -> f64 {
    1.0
}
fn default_lambda_fm() -> f64 {
    10.0
}
fn default_lambda_s() -> f64 {
    2.0
}
fn default_norm_p() -> u8 {
    1
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct LossWeights {
    #[cfg_attr(feature = "serde", serde(default = "default_lambda_p"))]
    pub lambda_p: f64,
    #[cfg_attr(feature = "serde", serde(default = "default_lambda_gan"))]
    pub lambda_gan: f64,
    #[cfg_attr(feature = "serde", serde(default = "default_lambda_fm"))]
    pub lambda_fm: f64,
    #[cfg_attr(feature = "serde", serde(default = "default_lambda_s"))]
    pub lambda_s: f64,
    #[cfg_attr(feature = "serde", serde(default = "default_norm_p"))]
    pub norm_p: u8,
    /// Compare the auxiliary prediction in extractor feature space instead
    /// of pixel space.
    #[cfg_attr(feature = "serde", serde(default))]
    pub svg_perceptual: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_p: default_lambda_p(),
            lambda_gan: default_lambda_gan(),
            lambda_fm: default_lambda_fm(),
            lambda_s: default_lambda_s(),
            norm_p: default_norm_p(),
            svg_perceptual: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_p", self.lambda_p),
            ("lambda_gan", self.lambda_gan),
            ("lambda_fm", self.lambda_fm),
            ("lambda_s", self.lambda_s),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, format!("must be a non-negative number, got {v}")));
            }
        }
        if !matches!(self.norm_p, 1 | 2) {
            return Err(Error::config("norm_p", format!("must be 1 or 2, got {}", self.norm_p)));
        }
        Ok(())
    }
}

/// The four generator loss terms.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorTerms {
    pub perceptual: Var,
    pub gan: Var,
    pub feature_matching: Var,
    pub svg: Var,
}

/// `lambda_p*Lp + lambda_gan*Lgan + lambda_fm*Lfm + lambda_s*Ls`. Fails on
/// the first non-finite term, naming it.
pub fn total_generator_loss<T: Scalar>(g: &mut Graph<T>, terms: &GeneratorTerms, w: &LossWeights) -> Result<Var> {
    let named = [
        ("perceptual", terms.perceptual, w.lambda_p),
        ("gan", terms.gan, w.lambda_gan),
        ("feature_matching", terms.feature_matching, w.lambda_fm),
        ("svg", terms.svg, w.lambda_s),
    ];
    let mut acc: Option<Var> = None;
    for (name, v, lambda) in named {
        let value = g.item(v)?;
        if !value.is_finite() {
            return Err(Error::non_finite(format!("generator loss term `{name}`")));
        }
        let t = g.scale(v, lambda);
        acc = Some(match acc {
            Some(a) => g.add(a, t)?,
            None => t,
        });
    }
    Ok(acc.expect("four terms"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full(g: &mut Graph<f64>, shape: Shape, v: f64) -> Var {
        g.constant(Tensor4::full(shape, v))
    }

    #[test]
    fn hinge_examples() {
        let s = Shape::new(1, 1, 2, 2);
        let mut g = Graph::new();
        let r = full(&mut g, s, 2.0);
        let f = full(&mut g, s, -2.0);
        let l = hinge_d(&mut g, &[r], &[f]).unwrap();
        assert_eq!(g.item(l).unwrap(), 0.0);
        let r = full(&mut g, s, 0.0);
        let f = full(&mut g, s, 0.0);
        let l = hinge_d(&mut g, &[r, r], &[f, f]).unwrap();
        assert_eq!(g.item(l).unwrap(), 2.0);
        let f = full(&mut g, s, 0.5);
        let l = hinge_g(&mut g, &[f]).unwrap();
        assert_eq!(g.item(l).unwrap(), -0.5);
    }

    #[test]
    fn regression_examples() {
        let s = Shape::new(1, 3, 2, 2);
        let mut g = Graph::new();
        let a = full(&mut g, s, 0.0);
        let b = full(&mut g, s, 0.5);
        let l1 = svg_regression_loss(&mut g, a, b, 1).unwrap();
        let l2 = svg_regression_loss(&mut g, a, b, 2).unwrap();
        assert_eq!(g.item(l1).unwrap(), 0.5);
        assert_eq!(g.item(l2).unwrap(), 0.25);
        assert!(svg_regression_loss(&mut g, a, b, 3).is_err());
    }

    #[test]
    fn feature_matching_example() {
        let s = Shape::new(1, 2, 2, 2);
        let mut g = Graph::new();
        let a = full(&mut g, s, 1.0);
        let b = full(&mut g, s, 3.0);
        let l = feature_matching_loss(&mut g, &[vec![a]], &[vec![b]]).unwrap();
        assert_eq!(g.item(l).unwrap(), 2.0);
    }

    #[test]
    fn total_with_default_weights() {
        let mut g = Graph::new();
        let one = full(&mut g, Shape::scalar(), 1.0);
        let t = GeneratorTerms { perceptual: one, gan: one, feature_matching: one, svg: one };
        let l = total_generator_loss(&mut g, &t, &LossWeights::default()).unwrap();
        assert_eq!(g.item(l).unwrap(), 23.0);
        let nan = full(&mut g, Shape::scalar(), f64::NAN);
        let t = GeneratorTerms { feature_matching: nan, ..t };
        let err = total_generator_loss(&mut g, &t, &LossWeights::default()).unwrap_err();
        assert!(matches!(err, Error::NonFinite { what } if what.contains("feature_matching")));
    }

    #[test]
    fn discriminator_score_size() {
        let cfg = DiscriminatorConfig::default();
        let mut d = Discriminator::<f64>::build(&cfg, 4, 16, 3).unwrap();
        let mut g = Graph::new();
        let img = full(&mut g, Shape::new(2, 3, 16, 16), 0.1);
        let lay = full(&mut g, Shape::new(2, 4, 16, 16), 0.25);
        let out = d.forward(&mut g, img, lay, Phase::Check, false).unwrap();
        assert_eq!(g.shape(out.scores[0]), Shape::new(2, 1, 4, 4));
        assert_eq!(g.shape(out.scores[1]), Shape::new(2, 1, 2, 2));
        assert_eq!(out.features[0].len(), 3);
    }
}
