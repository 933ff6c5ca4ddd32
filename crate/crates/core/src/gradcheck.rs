//! Finite-difference checks of every differentiable operation on seeded
//! random instances at 64-bit.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adversary::{
    feature_matching_loss, hinge_d, hinge_g, perceptual_loss, svg_regression_loss, total_generator_loss,
    FeatureExtractor, GeneratorTerms, LossWeights,
};
use crate::autodiff::{batch_moments, finite_diff_check, Activation, FdReport, Graph, Var};
use crate::condops::{scc_forward, scn_forward, semantic_gate, GateMode, Moments};
use crate::error::Result;
use crate::generators::{Generator, GeneratorConfig, ScResBlock};
use crate::params::{ParamStore, Phase, SpectralState};
use crate::tensor::{Shape, Tensor4};

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
/// Passing bound on the relative error.
pub const TOLERANCE: f64 = 1e-4;
const PROBES: usize = 24;

#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub op: String,
    pub instances: usize,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error <= TOLERANCE
    }
}

type Case = fn(&mut ChaCha8Rng) -> Result<Vec<FdReport>>;

/// Operation names in suite order.
pub fn op_names() -> Vec<&'static str> {
    cases().iter().map(|(n, _)| *n).collect()
}

fn cases() -> Vec<(&'static str, Case)> {
    vec![
        ("conv2d", conv2d as Case),
        ("resize_bilinear", resize_bilinear),
        ("resize_nearest", resize_nearest),
        ("leaky_relu", |r| activation(r, Activation::LeakyRelu)),
        ("relu", |r| activation(r, Activation::Relu)),
        ("tanh", |r| activation(r, Activation::Tanh)),
        ("sigmoid", |r| activation(r, Activation::Sigmoid)),
        ("hardtanh", |r| activation(r, Activation::Hardtanh)),
        ("batch_moments", moments),
        ("channel_pool", channel_pool),
        ("spectral_scale", spectral_scale),
        ("semantic_gate", gate),
        ("scc_forward", scc),
        ("scn_forward", scn),
        ("scresblock", resblock),
        ("hinge_d", loss_hinge_d),
        ("hinge_g", loss_hinge_g),
        ("perceptual_loss", loss_perceptual),
        ("feature_matching_loss", loss_fm),
        ("svg_regression_loss", loss_svg),
        ("total_generator_loss", loss_total),
        ("generator_end_to_end", end_to_end),
    ]
}

/// Runs `instances` random instances of every operation whose name contains
/// `filter`.
pub fn run_suite(seed: u64, instances: usize, filter: Option<&str>) -> Result<Vec<OpReport>> {
    let mut out = Vec::new();
    for (i, (name, case)) in cases().into_iter().enumerate() {
        if filter.is_some_and(|f| !name.contains(f)) {
            continue;
        }
        let mut report = OpReport { op: name.into(), instances, checked: 0, skipped: 0, max_rel_error: 0.0 };
        for k in 0..instances {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(((i as u64) << 32) | k as u64);
            for r in case(&mut rng)? {
                report.checked += r.checked;
                report.skipped += r.skipped;
                report.max_rel_error = report.max_rel_error.max(r.max_rel_error);
            }
        }
        out.push(report);
    }
    Ok(out)
}

fn randn(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor4<f64> {
    Tensor4::randn(shape, 1.0, rng)
}

fn check(x: &Tensor4<f64>, f: impl FnMut(&mut Graph<f64>, Var) -> Result<Var>) -> Result<FdReport> {
    finite_diff_check(x, STEP, Some(PROBES), f)
}

/// Random projection of `v` to a scalar.
fn project(g: &mut Graph<f64>, v: Var, weights: &Tensor4<f64>) -> Result<Var> {
    let w = g.constant(weights.clone());
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

fn dims(rng: &mut ChaCha8Rng) -> Shape {
    Shape::new(rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(2..=5), rng.random_range(2..=5))
}

fn conv2d(rng: &mut ChaCha8Rng) -> Result<Vec<FdReport>> {
    let xs = dims(rng);
    let k = if rng.random_bool(0.5) { 3 } else { 1 };
    let stride = rng.random_range(1..=2);
    let c_out = rng.random_range(1..=3);
    let x = randn(rng, xs);
    let kern = randn(rng, Shape::new(c_out, xs.c, k, k));
    let bias = randn(rng, Shape::vector(c_out));
    let mut probe = Graph::new();
    let (xv, kv, bv) = (probe.constant(x.clone()), probe.constant(kern.clone()), probe.constant(bias.clone()));
    let out = probe.conv2d(xv, kv, Some(bv), stride, k / 2)?;
    let w = randn(rng, probe.shape(out));
    let run = |g: &mut Graph<f64>, x: Var, k: Var, b: Var| -> Result<Var> {
        let y = g.conv2d(x, k, Some(b), stride, k_pad(g, k))?;
        project(g, y, &w)
    };
    Ok(vec![
        check(&x, |g, v| {
            let (k, b) = (g.constant(kern.clone()), g.constant(bias.clone()));
            run(g, v, k, b)
        })?,
        check(&kern, |g, v| {
            let (x, b) = (g.constant(x.clone()), g.constant(bias.clone()));
            run(g, x, v, b)
        })?,
        check(&bias, |g, v| {
            let (x, k) = (g.constant(x.clone()), g.constant(kern.clone()));
            run(g, x, k, v)
        })?,
    ])
}

fn k_pad(g: &Graph<f64>, k: Var) -> usize {
    g.shape(k).h / 2
}

fn resize(rng: &mut ChaCha8Rng, bilinear: bool) -> Result<Vec<FdReport>> {
    let xs = dims(rng);
    let (oh, ow) = (rng.random_range(1..=8), rng.random_range(1..=8));
    let x = randn(rng, xs);
    let w = randn(rng, Shape::new(xs.b, xs.c, oh, ow));
    Ok(vec![check(&x, |g, v| {
        let y = if bilinear { g.resize_bilinear(v, oh, ow)? } else { g.resize_nearest(v, oh, ow)? };
        project(g, y, &w)
    })?])
}

fn resize_bilinear(rng: &mut ChaCha8Rng) -> Result<Vec<FdReport>> {
    resize(rng, true)
}

fn resize_nearest(rng: &mut ChaCha8Rng) -> Result<Vec<FdReport>> {
    resize(rng, false)
}

fn activation(rng: &mut ChaCha8Rng, a: Activation) -> Result<Vec<FdReport>> {
    let xs = dims(rng);
    let x = Tensor4::randn(xs, 1.5, rng);
    let w = randn(rng, xs);
    Ok(vec![check(&x, |g, v| {
        let y = g.activation(v, a);
        project(g, y, &w)
    })?])
}

fn moments(rng: &mut ChaCha8Rng) -> Result<Vec<FdReport>> {
    let xs = dims(rng);
    let x = randn(rng, xs);
    let wm = randn(rng, Shape::new(1, xs.c, 1, 1));
    let ws = randn(rng, Shape::new(1, xs.c, 1, 1));
    Ok(vec![check(&x, |g, v| {
        let (m, s) = batch_moments(g, v)?;
        let a = project(g, m, &wm)?;
        let b = project(g, s, &ws)?;
        g.add(a, b)
    })?])
}

fn channel_pool(rng: &mut ChaCha8Rng) -> Result<Vec<FdReport>> {
    let mut xs = dims(rng);
    xs.c = rng.random_range(2..=7);
    let n = rng.random_range(1..=xs.c);
    let x = randn(rng, xs);
    let w = randn(rng, Shape::new(xs.b, n, xs.h, xs.w));
    Ok(vec![check(&x, |g, v| {
        let y = g.channel_pool(v, n)?;
        project(g, y, &w)
    })?])
}

fn spectral_scale(rng: &mut ChaCha8Rng) -> Result<Vec<FdReport>> {
    let ws = Shape::new(rng.random_range(1..=4), rng.random_range(1..=3), 1, rng.random_range(1..=3));
    let wt = randn(rng, ws);
    let mut st = SpectralState::for_shape(ws);
    crate::params::power_iteration(wt.data(), &mut st.u, &mut st.v, 3);
    let proj = randn(rng, ws);
    Ok(vec![check(&wt, |g, v| {
        let y = g.spectral_scale(v, st.u.clone(), st.v.clone())?;
        project(g, y, &proj)
    })?])
}

fn gate(rng: &mut ChaCha8Rng) -> Result<Vec<FdReport>> {
    let mut xs = dims(rng);
    xs.c = rng.random_range(1..=4);
    let mode = [GateMode::Softmax, GateMode::Sigmoid, GateMode::Tanh, GateMode::Relu, GateMode::None]
        [rng.random_range(0..5)];
    let tau = rng.random_range(0.05..2.0);
    let x = Tensor4::randn(xs, 1.0 / tau, rng);
    let w = randn(rng, xs);
    Ok(vec![check(&x, |g, v| {
        let y = semantic_gate(g, v, mode, tau)?;
        project(g, y.values, &w)
    })?])
}

struct SccCase {
    f: Tensor4<f64>,
    v: Tensor4<f64>,
    kernels: Vec<Tensor4<f64>>,
    biases: Vec<Tensor4<f64>>,
    w: Tensor4<f64>,
}

impl SccCase {
    fn run(&self, g: &mut Graph<f64>, which: usize, x: Var) -> Result<Var> {
        let f = if which == 0 { x } else { g.constant(self.f.clone()) };
        let v = if which == 1 { x } else { g.constant(self.v.clone()) };
        let ks: Vec<Var> =
            self.kernels.iter().enumerate().map(|(i, k)| if which == 2 && i == 0 { x } else { g.constant(k.clone()) }).collect();
        let bs: Vec<Var> =
            self.biases.iter().enumerate().map(|(i, b)| if which == 3 && i == 0 { x } else { g.constant(b.clone()) }).collect();
        let y = scc_forward(g, f, v, &ks, &bs)?;
        project(g, y, &self.w)
    }
}

fn scc(rng: &mut ChaCha8Rng) -> Result<Vec<FdReport>> {
    let fs = dims(rng);
    let n = [1, 2, 3, 5][rng.random_range(0..4)];
    let k = if rng.random_bool(0.5) { 3 } else { 1 };
    let c_out = rng.random_range(1..=3);
    let c = SccCase {
        f: randn(rng, fs),
        v: Tensor4::uniform(Shape::new(fs.b, n, fs.h, fs.w), 0.0, 1.0, rng),
        kernels: (0..n).map(|_| randn(rng, Shape::new(c_out, fs.c, k, k))).collect(),
        biases: (0..n).map(|_| randn(rng, Shape::vector(c_out))).collect(),
        w: randn(rng, Shape::new(fs.b, c_out, fs.h, fs.w)),
    };
    let inputs = [c.f.clone(), c.v.clone(), c.kernels[0].clone(), c.biases[0].clone()];
    inputs.iter().enumerate().map(|(i, x)| check(x, |g, v| c.run(g, i, v))).collect()
}

fn scn(rng: &mut ChaCha8Rng) -> Result<Vec<FdReport>> {
    let mut xs = dims(rng);
    xs.b = 2;
    let n = rng.random_range(1..=3);
    let x = randn(rng, xs);
    let v = Tensor4::uniform(Shape::new(xs.b, n, xs.h, xs.w), 0.0, 1.0, rng);
    let scales = Tensor4::randn(Shape::new(xs.c, n, 1, 1), 0.5, rng);
    let shifts = Tensor4::randn(Shape::new(xs.c, n, 1, 1), 0.5, rng);
    let w = randn(rng, xs);
    let inputs = [&x, &v, &scales, &shifts];
    let mut out = Vec::new();
    for (which, input) in inputs.iter().enumerate() {
        out.push(check(input, |g, var| {
            let mut pick = |i: usize, t: &Tensor4<f64>| if i == which { var } else { g.constant(t.clone()) };
            let (a, b, c, d) = (pick(0, &x), pick(1, &v), pick(2, &scales), pick(3, &shifts));
            let y = scn_forward(g, a, b, c, d, Moments::Batch)?;
            project(g, y.out, &w)
        })?);
    }
    Ok(out)
}

fn resblock(rng: &mut ChaCha8Rng) -> Result<Vec<FdReport>> {
    let c_in = rng.random_range(1..=3);
    let c_out = rng.random_range(1..=3);
    let n = rng.random_range(1..=3);
    let side = rng.random_range(2..=4);
    let mut store = ParamStore::<f64>::new();
    let block = ScResBlock::new(&mut store, rng, "block", c_in, c_out, 3, n);
    for p in store.params_mut() {
        if p.name.ends_with("scales") || p.name.ends_with("shifts") {
            p.value = Tensor4::randn(p.value.shape(), 0.5, rng);
        }
    }
    let x = randn(rng, Shape::new(2, c_in, side, side));
    let v = Tensor4::uniform(Shape::new(2, n, side, side), 0.0, 1.0, rng);
    let w = randn(rng, Shape::new(2, c_out, side, side));
    let kernel = store.find("block.conv1.kernel0").expect("kernel");
    let kernel_value = store.param(kernel).value.clone();
    let run = |store: &mut ParamStore<f64>, g: &mut Graph<f64>, xv: Var, vv: Var, replace| -> Result<Var> {
        let p = store.bind_with(g, Phase::Check, false, replace)?;
        let y = block.forward(g, &p, store, Phase::Check, xv, vv)?;
        project(g, y, &w)
    };
    let mut s1 = store.clone();
    let mut s2 = store.clone();
    Ok(vec![
        check(&x, |g, xv| {
            let vv = g.constant(v.clone());
            run(&mut store, g, xv, vv, None)
        })?,
        check(&v, |g, vv| {
            let xv = g.constant(x.clone());
            run(&mut s1, g, xv, vv, None)
        })?,
        check(&kernel_value, |g, kv| {
            let (xv, vv) = (g.constant(x.clone()), g.constant(v.clone()));
            run(&mut s2, g, xv, vv, Some((kernel, kv)))
        })?,
    ])
}

fn score_maps(rng: &mut ChaCha8Rng) -> Vec<Tensor4<f64>> {
    let b = rng.random_range(1..=2);
    (0..rng.random_range(1..=3))
        .map(|_| {
            let s = rng.random_range(1..=3);
            Tensor4::randn(Shape::new(b, 1, s, s), 1.5, rng)
        })
        .collect()
}

fn loss_hinge_d(rng: &mut ChaCha8Rng) -> Result<Vec<FdReport>> {
    let real = score_maps(rng);
    let fake: Vec<Tensor4<f64>> = real.iter().map(|r| Tensor4::randn(r.shape(), 1.5, rng)).collect();
    let mut out = Vec::new();
    for side in 0..2 {
        out.push(check(if side == 0 { &real[0] } else { &fake[0] }, |g, x| {
            let mut r: Vec<Var> = real.iter().map(|t| g.constant(t.clone())).collect();
            let mut f: Vec<Var> = fake.iter().map(|t| g.constant(t.clone())).collect();
            if side == 0 {
                r[0] = x;
            } else {
                f[0] = x;
            }
            hinge_d(g, &r, &f)
        })?);
    }
    Ok(out)
}

fn loss_hinge_g(rng: &mut ChaCha8Rng) -> Result<Vec<FdReport>> {
    let fake = score_maps(rng);
    Ok(vec![check(&fake[0], |g, x| {
        let mut f: Vec<Var> = fake.iter().map(|t| g.constant(t.clone())).collect();
        f[0] = x;
        hinge_g(g, &f)
    })?])
}

fn small_extractor(rng: &mut ChaCha8Rng) -> Result<FeatureExtractor<f64>> {
    let mut c_in = 3;
    let mut stages = Vec::new();
    for _ in 0..3 {
        let c = rng.random_range(2..=4);
        stages.push((Tensor4::randn(Shape::new(c, c_in, 3, 3), 0.5, rng), (0..c).map(|_| rng.random_range(-0.2..0.2)).collect()));
        c_in = c;
    }
    FeatureExtractor::from_weights(stages)
}

fn loss_perceptual(rng: &mut ChaCha8Rng) -> Result<Vec<FdReport>> {
    let phi = small_extractor(rng)?;
    let side = rng.random_range(4..=8);
    let s = Shape::new(rng.random_range(1..=2), 3, side, side);
    let fake = randn(rng, s);
    let real = randn(rng, s);
    Ok(vec![check(&fake, |g, x| {
        let r = g.constant(real.clone());
        perceptual_loss(g, x, r, &phi)
    })?])
}

fn feature_lists(rng: &mut ChaCha8Rng) -> Vec<Vec<Tensor4<f64>>> {
    let scales = rng.random_range(1..=2);
    let mut out = Vec::with_capacity(scales);
    for _ in 0..scales {
        let layers = rng.random_range(1..=3);
        let mut row = Vec::with_capacity(layers);
        for _ in 0..layers {
            let s = dims(rng);
            row.push(randn(rng, s));
        }
        out.push(row);
    }
    out
}

fn loss_fm(rng: &mut ChaCha8Rng) -> Result<Vec<FdReport>> {
    let fake = feature_lists(rng);
    let real: Vec<Vec<Tensor4<f64>>> =
        fake.iter().map(|s| s.iter().map(|t| randn(rng, t.shape())).collect()).collect();
    Ok(vec![check(&fake[0][0], |g, x| {
        let mut f: Vec<Vec<Var>> = fake.iter().map(|s| s.iter().map(|t| g.constant(t.clone())).collect()).collect();
        f[0][0] = x;
        let r: Vec<Vec<Var>> = real.iter().map(|s| s.iter().map(|t| g.constant(t.clone())).collect()).collect();
        feature_matching_loss(g, &f, &r)
    })?])
}

fn loss_svg(rng: &mut ChaCha8Rng) -> Result<Vec<FdReport>> {
    let s = dims(rng);
    let pred = randn(rng, s);
    let real = randn(rng, s);
    let mut out = Vec::new();
    for p in [1, 2] {
        out.push(check(&pred, |g, x| {
            let r = g.constant(real.clone());
            svg_regression_loss(g, x, r, p)
        })?);
    }
    Ok(out)
}

fn loss_total(rng: &mut ChaCha8Rng) -> Result<Vec<FdReport>> {
    let terms = randn(rng, Shape::vector(4));
    let w = LossWeights {
        lambda_p: rng.random_range(0.0..10.0),
        lambda_gan: rng.random_range(0.0..10.0),
        lambda_fm: rng.random_range(0.0..10.0),
        lambda_s: rng.random_range(0.0..10.0),
        ..LossWeights::default()
    };
    Ok(vec![check(&terms, |g, x| {
        let w4 = [0, 1, 2, 3].map(|i| {
            let mut sel = Tensor4::zeros(Shape::vector(4));
            sel.data_mut()[i] = 1.0;
            sel
        });
        let mut t = [x; 4];
        for (i, s) in w4.iter().enumerate() {
            let c = g.constant(s.clone());
            let m = g.mul(x, c)?;
            t[i] = g.sum(m);
        }
        let terms = GeneratorTerms { perceptual: t[0], gan: t[1], feature_matching: t[2], svg: t[3] };
        total_generator_loss(g, &terms, &w)
    })?])
}

fn tiny_generator() -> GeneratorConfig {
    GeneratorConfig {
        resolution: 8,
        c_sem: 3,
        svg_channels: vec![4, 3],
        svg_head_channels: 3,
        srg_channels: vec![4, 3],
        vector_taps: vec![1, 2],
        n: 2,
        tau: 1.0,
        z_dim: 3,
        ..GeneratorConfig::families4()
    }
}

fn end_to_end(rng: &mut ChaCha8Rng) -> Result<Vec<FdReport>> {
    let cfg = tiny_generator();
    let mut gen = Generator::<f64>::build(&cfg, rng.random())?;
    for p in gen.store.params_mut() {
        if p.name.starts_with("svg.head.conv2") || p.name.starts_with("srg.out") {
            p.value = Tensor4::randn(p.value.shape(), 0.1, rng);
        }
    }
    let r = cfg.resolution;
    let layout = Tensor4::from_fn(Shape::new(2, cfg.c_sem, r, r), |b, c, y, x| {
        if (x + 2 * y + b) % cfg.c_sem == c {
            1.0
        } else {
            0.0
        }
    });
    let z = randn(rng, Shape::new(2, cfg.z_dim, 1, 1));
    let wi = randn(rng, Shape::new(2, 3, r, r));
    let ws = randn(rng, Shape::new(2, 3, r, r));
    let first = gen.store.find("svg.stage1.conv1.weight").expect("svg weight");
    let first_value = gen.store.param(first).value.clone();
    let mut gen2 = gen.clone();
    let run = |gen: &mut Generator<f64>, g: &mut Graph<f64>, zv: Var, replace| -> Result<Var> {
        let lay = g.constant(layout.clone());
        let p = gen.store.bind_with(g, Phase::Check, false, replace)?;
        let out = gen.forward_bound(g, &p, lay, zv, Phase::Check)?;
        let a = project(g, out.image, &wi)?;
        let b = project(g, out.svg.image, &ws)?;
        g.add(a, b)
    };
    Ok(vec![
        check(&z, |g, zv| run(&mut gen, g, zv, None))?,
        check(&first_value, |g, wv| {
            let zv = g.constant(z.clone());
            run(&mut gen2, g, zv, Some((first, wv)))
        })?,
    ])
}

/// One line per operation: name, max relative error, verdict.
pub fn format_report(r: &OpReport) -> String {
    format!(
        "{:<24} max_rel_error={:.3e} checked={} skipped={} {}",
        r.op,
        r.max_rel_error,
        r.checked,
        r.skipped,
        if r.passed() { "ok" } else { "FAIL" }
    )
}
