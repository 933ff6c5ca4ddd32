//! Semantic-vector correlation, Fréchet distance over pooled features and
//! texture-oracle pixel accuracy.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::synthdata::{SceneSpec, SemanticLayout};
use crate::tensor::Tensor4;

pub const COSINE_EPS: f64 = 1e-8;

/// Mean semantic vector per class and their pairwise cosine similarity.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassVectorStats {
    pub means: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
    /// `cosine[i][j]` is `None` when class `i` or `j` has no pixels.
    pub cosine: Vec<Vec<Option<f64>>>,
}

impl ClassVectorStats {
    pub fn present(&self, class: usize) -> bool {
        self.counts[class] > 0
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.cosine[i][j]
    }
}

/// Running per-class sums of semantic vectors.
#[derive(Clone, Debug)]
pub struct ClassVectorAccumulator {
    sums: Vec<Vec<f64>>,
    counts: Vec<usize>,
    n: usize,
}

impl ClassVectorAccumulator {
    pub fn new(class_count: usize, n: usize) -> Self {
        ClassVectorAccumulator { sums: vec![vec![0.0; n]; class_count], counts: vec![0; class_count], n }
    }

    /// Adds batch item `index` of a `b x n x h x w` vector map; `layout` is
    /// nearest-resized to `h x w` when needed.
    pub fn add<T: Scalar>(&mut self, level: &Tensor4<T>, index: usize, layout: &SemanticLayout) -> Result<()> {
        let s = level.shape();
        if s.c != self.n || index >= s.b {
            return Err(Error::shape("class_vector_stats", format!("{s} against n={} item {index}", self.n)));
        }
        if layout.class_count != self.counts.len() {
            return Err(Error::shape(
                "class_vector_stats",
                format!("layout has {} classes, expected {}", layout.class_count, self.counts.len()),
            ));
        }
        let resized;
        let l = if layout.h == s.h && layout.w == s.w {
            layout
        } else {
            resized = layout.resize(s.h, s.w);
            &resized
        };
        for y in 0..s.h {
            for x in 0..s.w {
                let c = l.at(y, x);
                self.counts[c] += 1;
                for k in 0..s.c {
                    self.sums[c][k] += level.at(index, k, y, x).as_f64();
                }
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> ClassVectorStats {
        let means: Vec<Vec<f64>> = self
            .sums
            .iter()
            .zip(&self.counts)
            .map(|(s, &n)| if n == 0 { vec![0.0; self.n] } else { s.iter().map(|v| v / n as f64).collect() })
            .collect();
        let c = means.len();
        let mut cosine = vec![vec![None; c]; c];
        for i in 0..c {
            for j in 0..c {
                if self.counts[i] > 0 && self.counts[j] > 0 {
                    cosine[i][j] = Some(cosine_similarity(&means[i], &means[j]));
                }
            }
        }
        ClassVectorStats { means, counts: self.counts.clone(), cosine }
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = libm::sqrt(a.iter().map(|x| x * x).sum::<f64>());
    let nb = libm::sqrt(b.iter().map(|x| x * x).sum::<f64>());
    dot / (na * nb).max(COSINE_EPS)
}

/// Stats over every item of `level`, item `i` paired with `layouts[i]`.
pub fn class_vector_stats<T: Scalar>(level: &Tensor4<T>, layouts: &[SemanticLayout]) -> Result<ClassVectorStats> {
    let first = layouts.first().ok_or_else(|| Error::param("class_vector_stats", "no layouts"))?;
    if layouts.len() != level.shape().b {
        return Err(Error::shape(
            "class_vector_stats",
            format!("{} layouts for batch {}", layouts.len(), level.shape().b),
        ));
    }
    let mut acc = ClassVectorAccumulator::new(first.class_count, level.shape().c);
    for (i, l) in layouts.iter().enumerate() {
        acc.add(level, i, l)?;
    }
    Ok(acc.finish())
}

fn moments(set: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let first = set.first().ok_or_else(|| Error::param("frechet_distance", "empty feature set"))?;
    let d = first.len();
    if d == 0 || set.iter().any(|v| v.len() != d) {
        return Err(Error::param("frechet_distance", "feature vectors must share a positive length"));
    }
    let n = set.len();
    let mut mean = DVector::zeros(d);
    for v in set {
        mean += DVector::from_column_slice(v);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for v in set {
        let e = DVector::from_column_slice(v) - &mean;
        cov += &e * e.transpose();
    }
    if n > 1 {
        cov /= (n - 1) as f64;
    }
    Ok((mean, cov))
}

fn psd_sqrt(m: DMatrix<f64>) -> DMatrix<f64> {
    let sym = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| libm::sqrt(l.max(0.0)));
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

fn trace_sqrt(m: DMatrix<f64>) -> f64 {
    let sym = (&m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.iter().map(|&l| libm::sqrt(l.max(0.0))).sum()
}

/// Fréchet distance between Gaussians fitted to two sets. Sets smaller than
/// `dim + 1` use diagonal covariances.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (ma, ca) = moments(a)?;
    let (mb, cb) = moments(b)?;
    if ma.len() != mb.len() {
        return Err(Error::param("frechet_distance", format!("dimensions {} and {} differ", ma.len(), mb.len())));
    }
    let d = ma.len();
    let mean_term = (&ma - &mb).norm_squared();
    let cov_term = if a.len() > d && b.len() > d {
        let ra = psd_sqrt(ca.clone());
        let cross = trace_sqrt(&ra * &cb * &ra);
        ca.trace() + cb.trace() - 2.0 * cross
    } else {
        (0..d)
            .map(|i| {
                let (x, y) = (ca[(i, i)].max(0.0), cb[(i, i)].max(0.0));
                x + y - 2.0 * libm::sqrt(x * y)
            })
            .sum()
    };
    let total = mean_term + cov_term;
    if !total.is_finite() {
        return Err(Error::non_finite("frechet_distance"));
    }
    Ok(total.max(0.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleAccuracy {
    pub accuracy: f64,
    /// Per ground-truth class; `None` for classes with no scored pixels.
    pub per_class: Vec<Option<f64>>,
    pub counts: Vec<usize>,
}

/// Accumulates texture-oracle hits over several images.
#[derive(Clone, Debug)]
pub struct OracleAccumulator {
    refs: Vec<(u32, [f64; 3])>,
    family: Vec<u32>,
    hits: Vec<usize>,
    counts: Vec<usize>,
    skip_boundary: bool,
}

impl OracleAccumulator {
    /// With `skip_boundary`, pixels whose 3x3 label window spans several
    /// families are not scored.
    pub fn new(spec: &SceneSpec, skip_boundary: bool) -> Self {
        let colors = spec.reference_colors();
        let reps = spec.family_representative();
        let family: Vec<u32> = spec.classes.iter().map(|c| c.family).collect();
        let refs = reps
            .iter()
            .enumerate()
            .filter(|&(i, &r)| i == r)
            .map(|(i, _)| (family[i], colors[i]))
            .collect();
        let c = spec.classes.len();
        OracleAccumulator { refs, family, hits: vec![0; c], counts: vec![0; c], skip_boundary }
    }

    /// Scores item `index` of a `b x 3 x h x w` image in `[-1, 1]`.
    pub fn add<T: Scalar>(&mut self, image: &Tensor4<T>, index: usize, layout: &SemanticLayout) -> Result<()> {
        let s = image.shape();
        if s.c != 3 || s.h != layout.h || s.w != layout.w || index >= s.b {
            return Err(Error::shape(
                "oracle_pixel_accuracy",
                format!("image {s} item {index} against layout {}x{}", layout.h, layout.w),
            ));
        }
        if layout.class_count != self.counts.len() {
            return Err(Error::shape("oracle_pixel_accuracy", "layout class count differs from the scene spec"));
        }
        for y in 0..s.h {
            for x in 0..s.w {
                let truth = layout.at(y, x);
                let fam = self.family[truth];
                let mut mean = [0.0; 3];
                let mut k = 0.0;
                let mut mixed = false;
                for yy in y.saturating_sub(1)..(y + 2).min(s.h) {
                    for xx in x.saturating_sub(1)..(x + 2).min(s.w) {
                        mixed |= self.family[layout.at(yy, xx)] != fam;
                        for (c, m) in mean.iter_mut().enumerate() {
                            *m += image.at(index, c, yy, xx).as_f64();
                        }
                        k += 1.0;
                    }
                }
                if mixed && self.skip_boundary {
                    continue;
                }
                let mean = mean.map(|m| m / k);
                let predicted = self
                    .refs
                    .iter()
                    .map(|(f, r)| (*f, (0..3).map(|c| { let d = r[c] - mean[c]; d * d }).sum::<f64>()))
                    .fold((u32::MAX, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
                    .0;
                self.counts[truth] += 1;
                if predicted == fam {
                    self.hits[truth] += 1;
                }
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> OracleAccuracy {
        let total: usize = self.counts.iter().sum();
        let hits: usize = self.hits.iter().sum();
        OracleAccuracy {
            accuracy: if total == 0 { 0.0 } else { hits as f64 / total as f64 },
            per_class: self
                .hits
                .iter()
                .zip(&self.counts)
                .map(|(&h, &n)| if n == 0 { None } else { Some(h as f64 / n as f64) })
                .collect(),
            counts: self.counts.clone(),
        }
    }
}

/// Classifies each pixel by the nearest family reference color of its 3x3
/// local mean; classes of one family count as a single class.
pub fn oracle_pixel_accuracy<T: Scalar>(
    image: &Tensor4<T>,
    layout: &SemanticLayout,
    spec: &SceneSpec,
    skip_boundary: bool,
) -> Result<OracleAccuracy> {
    let mut acc = OracleAccumulator::new(spec, skip_boundary);
    acc.add(image, 0, layout)?;
    Ok(acc.finish())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    /// Training step, or `self` for real-against-real rows.
    pub tag: String,
    pub frechet: f64,
    pub pixel_accuracy: f64,
    pub per_class: Vec<Option<f64>>,
}
