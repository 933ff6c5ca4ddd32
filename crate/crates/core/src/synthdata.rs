//! Procedural paired scenes: a label map and an image painted with one
//! texture per appearance family.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor4};

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields))]
pub enum Texture {
    /// Constant color plus hashed per-pixel noise of the given amplitude.
    Flat { color: [f64; 3], noise: f64 },
    /// Square cells of side `cell` alternating between two colors.
    Checker { a: [f64; 3], b: [f64; 3], cell: usize },
    /// Bands of width `period / 2` at `angle` degrees.
    Stripes { a: [f64; 3], b: [f64; 3], period: f64, angle: f64 },
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ClassSpec {
    pub name: String,
    pub family: u32,
    pub texture: Texture,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct SceneSpec {
    pub resolution: usize,
    /// Class 0 is the background.
    pub classes: Vec<ClassSpec>,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub seed: u64,
}

impl SceneSpec {
    /// Background, two classes sharing one checker texture, one striped
    /// class; 32x32.
    pub fn families4(seed: u64) -> Self {
        let checker = Texture::Checker { a: [0.95, 0.78, 0.25], b: [0.80, 0.55, 0.15], cell: 2 };
        SceneSpec {
            resolution: 32,
            classes: vec![
                ClassSpec {
                    name: "background".into(),
                    family: 0,
                    texture: Texture::Flat { color: [0.35, 0.42, 0.38], noise: 0.04 },
                },
                ClassSpec { name: "left".into(), family: 1, texture: checker.clone() },
                ClassSpec { name: "right".into(), family: 1, texture: checker },
                ClassSpec {
                    name: "stripes".into(),
                    family: 2,
                    texture: Texture::Stripes { a: [0.20, 0.35, 0.90], b: [0.35, 0.55, 0.95], period: 6.0, angle: 45.0 },
                },
            ],
            min_shapes: 2,
            max_shapes: 4,
            seed,
        }
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 8 {
            return Err(Error::config("resolution", "scenes need at least 8x8 pixels"));
        }
        if self.classes.len() < 2 || self.classes.len() > 256 {
            return Err(Error::config("classes", "need between 2 and 256 classes"));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return Err(Error::config("min_shapes", "need 1 <= min_shapes <= max_shapes"));
        }
        for (i, a) in self.classes.iter().enumerate() {
            for b in &self.classes[..i] {
                if a.family == b.family && a.texture != b.texture {
                    return Err(Error::config(
                        "classes",
                        format!("{} and {} share family {} with different textures", a.name, b.name, a.family),
                    ));
                }
            }
            if let Texture::Checker { cell: 0, .. } = a.texture {
                return Err(Error::config("classes", format!("{}: checker cell must be positive", a.name)));
            }
            if let Texture::Stripes { period, .. } = a.texture {
                if !(period > 0.0) {
                    return Err(Error::config("classes", format!("{}: stripe period must be positive", a.name)));
                }
            }
        }
        Ok(())
    }

    /// Color in `[0, 1]` of `class` at pixel `(x, y)` before quantization.
    pub fn texel(&self, class: usize, x: usize, y: usize) -> [f64; 3] {
        let spec = &self.classes[class];
        match &spec.texture {
            Texture::Flat { color, noise } => {
                let n = hash_unit(self.seed, spec.family, x, y) * noise;
                color.map(|c| (c + n).clamp(0.0, 1.0))
            }
            Texture::Checker { a, b, cell } => {
                if (x / cell + y / cell) % 2 == 0 {
                    *a
                } else {
                    *b
                }
            }
            Texture::Stripes { a, b, period, angle } => {
                let t = angle.to_radians();
                let u = x as f64 * libm::cos(t) + y as f64 * libm::sin(t);
                if libm::floor(u / (period / 2.0)) as i64 % 2 == 0 {
                    *a
                } else {
                    *b
                }
            }
        }
    }

    /// Mean quantized color of each class's texture over a 64x64 patch,
    /// in `[-1, 1]`.
    pub fn reference_colors(&self) -> Vec<[f64; 3]> {
        (0..self.classes.len())
            .map(|c| {
                let mut acc = [0.0; 3];
                for y in 0..64 {
                    for x in 0..64 {
                        let t = self.texel(c, x, y);
                        for k in 0..3 {
                            acc[k] += dequantize(quantize(t[k]));
                        }
                    }
                }
                acc.map(|v| v / 4096.0)
            })
            .collect()
    }

    /// Representative class of each class's family (its lowest index).
    pub fn family_representative(&self) -> Vec<usize> {
        self.classes
            .iter()
            .map(|c| self.classes.iter().position(|o| o.family == c.family).expect("self"))
            .collect()
    }
}

fn hash_unit(seed: u64, family: u32, x: usize, y: usize) -> f64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [family as u64, x as u64, y as u64] {
        h = splitmix(h ^ v);
    }
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn quantize(v: f64) -> u8 {
    libm::round(v.clamp(0.0, 1.0) * 255.0) as u8
}

/// 8-bit value to `[-1, 1]`.
pub fn dequantize(q: u8) -> f64 {
    q as f64 / 127.5 - 1.0
}

/// Per-pixel class indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SemanticLayout {
    pub labels: Vec<u8>,
    pub h: usize,
    pub w: usize,
    pub class_count: usize,
}

impl SemanticLayout {
    pub fn new(labels: Vec<u8>, h: usize, w: usize, class_count: usize) -> Result<Self> {
        if labels.len() != h * w {
            return Err(Error::shape("layout", format!("{} labels for {h}x{w}", labels.len())));
        }
        if let Some(i) = labels.iter().position(|&l| l as usize >= class_count) {
            return Err(Error::param(
                "layout",
                format!("label {} at row {}, column {} exceeds {class_count} classes", labels[i], i / w, i % w),
            ));
        }
        Ok(SemanticLayout { labels, h, w, class_count })
    }

    pub fn at(&self, y: usize, x: usize) -> usize {
        self.labels[y * self.w + x] as usize
    }

    pub fn one_hot<T: Scalar>(&self) -> Tensor4<T> {
        Tensor4::from_fn(Shape::new(1, self.class_count, self.h, self.w), |_, c, y, x| {
            if self.at(y, x) == c {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    /// Nearest-neighbor resampling (half-pixel centers).
    pub fn resize(&self, h: usize, w: usize) -> Self {
        let mut labels = Vec::with_capacity(h * w);
        for y in 0..h {
            let sy = crate::kernels::nearest_index(self.h, h, y);
            for x in 0..w {
                labels.push(self.labels[sy * self.w + crate::kernels::nearest_index(self.w, w, x)]);
            }
        }
        SemanticLayout { labels, h, w, class_count: self.class_count }
    }

    pub fn class_pixels(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }
}

/// A layout and its 8-bit RGB rendering (interleaved, row-major).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SamplePair {
    pub layout: SemanticLayout,
    pub rgb: Vec<u8>,
}

impl SamplePair {
    /// Image in `[-1, 1]`, shape `1 x 3 x h x w`.
    pub fn image<T: Scalar>(&self) -> Tensor4<T> {
        rgb_to_tensor(&self.rgb, self.layout.h, self.layout.w)
    }
}

pub fn rgb_to_tensor<T: Scalar>(rgb: &[u8], h: usize, w: usize) -> Tensor4<T> {
    Tensor4::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| T::of(dequantize(rgb[(y * w + x) * 3 + c])))
}

/// Quantizes a `1 x 3 x h x w` tensor in `[-1, 1]` to interleaved RGB.
pub fn tensor_to_rgb<T: Scalar>(t: &Tensor4<T>, index: usize) -> Vec<u8> {
    let s = t.shape();
    let mut out = Vec::with_capacity(s.plane() * 3);
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..3 {
                out.push(quantize((t.at(index, c, y, x).as_f64() + 1.0) / 2.0));
            }
        }
    }
    out
}

/// Paints `labels` with each class's texture.
pub fn render(spec: &SceneSpec, layout: &SemanticLayout) -> Vec<u8> {
    let mut rgb = Vec::with_capacity(layout.h * layout.w * 3);
    for y in 0..layout.h {
        for x in 0..layout.w {
            let t = spec.texel(layout.at(y, x), x, y);
            rgb.extend(t.iter().map(|&v| quantize(v)));
        }
    }
    rgb
}

/// Scene `index`: background plus `min_shapes..=max_shapes` rectangles and
/// ellipses of random foreground classes.
pub fn generate_scene(spec: &SceneSpec, index: u64) -> SamplePair {
    let r = spec.resolution;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let mut labels = vec![0u8; r * r];
    let count = rng.random_range(spec.min_shapes..=spec.max_shapes);
    let (lo, hi) = ((r / 4).max(3), (r / 2).max(4));
    for _ in 0..count {
        let class = rng.random_range(1..spec.classes.len()) as u8;
        let ellipse = rng.random_bool(0.5);
        let sw = rng.random_range(lo..=hi);
        let sh = rng.random_range(lo..=hi);
        let x0 = rng.random_range(0..=r - sw);
        let y0 = rng.random_range(0..=r - sh);
        let (cx, cy) = (x0 as f64 + sw as f64 / 2.0, y0 as f64 + sh as f64 / 2.0);
        let (rx, ry) = (sw as f64 / 2.0, sh as f64 / 2.0);
        for y in y0..y0 + sh {
            for x in x0..x0 + sw {
                let inside = !ellipse || {
                    let dx = (x as f64 + 0.5 - cx) / rx;
                    let dy = (y as f64 + 0.5 - cy) / ry;
                    dx * dx + dy * dy <= 1.0
                };
                if inside {
                    labels[y * r + x] = class;
                }
            }
        }
    }
    let layout = SemanticLayout { labels, h: r, w: r, class_count: spec.classes.len() };
    let rgb = render(spec, &layout);
    SamplePair { layout, rgb }
}

/// Seeded shuffle of `0..n` for `epoch`.
pub fn epoch_permutation(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut rng);
    p
}

/// Full batches per epoch; the trailing partial batch is dropped.
pub fn batches_per_epoch(n: usize, batch: usize) -> usize {
    if batch == 0 {
        0
    } else {
        n / batch
    }
}

/// Sample indices of global step `step`.
pub fn batch_for_step(seed: u64, step: usize, n: usize, batch: usize) -> Result<Vec<usize>> {
    let per = batches_per_epoch(n, batch);
    if per == 0 {
        return Err(Error::param("batches", format!("{n} samples cannot fill a batch of {batch}")));
    }
    let epoch = step / per;
    let i = step % per;
    let perm = epoch_permutation(seed, epoch as u64, n);
    Ok(perm[i * batch..(i + 1) * batch].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic_and_one_hot() {
        let spec = SceneSpec::families4(5);
        spec.validate().unwrap();
        let a = generate_scene(&spec, 3);
        assert_eq!(a, generate_scene(&spec, 3));
        assert_ne!(a, generate_scene(&spec, 4));
        let oh = a.layout.one_hot::<f32>();
        for y in 0..32 {
            for x in 0..32 {
                let s: f32 = (0..4).map(|c| oh.at(0, c, y, x)).sum();
                assert_eq!(s, 1.0);
            }
        }
    }

    #[test]
    fn same_family_same_pixels() {
        let spec = SceneSpec::families4(5);
        let mut pair = generate_scene(&spec, 0);
        pair.layout.labels.iter_mut().for_each(|l| *l = 1);
        let one = render(&spec, &pair.layout);
        pair.layout.labels.iter_mut().for_each(|l| *l = 2);
        assert_eq!(one, render(&spec, &pair.layout));
    }

    #[test]
    fn batch_arithmetic() {
        assert_eq!(batches_per_epoch(10, 4), 2);
        let a = batch_for_step(1, 0, 10, 4).unwrap();
        let b = batch_for_step(1, 1, 10, 4).unwrap();
        assert!(a.iter().all(|i| !b.contains(i)));
        assert_eq!(epoch_permutation(9, 2, 10), epoch_permutation(9, 2, 10));
        assert!(batch_for_step(1, 0, 3, 4).is_err());
    }

    #[test]
    fn layout_rejects_bad_labels() {
        let err = SemanticLayout::new(vec![0, 1, 5, 0], 2, 2, 4).unwrap_err();
        assert!(format!("{err}").contains("row 1, column 0"));
    }
}
