//! Acceptance criteria, one line each. Exits nonzero when any criterion fails.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scgen::checkpoint::Checkpoint;
use scgen::config::ExperimentConfig;
use scgen::dataset::{write_dataset, Dataset};
use scgen::pnm::Image;
use scgen::run::{self, TrainOptions};
use scgen::{scgt, Error};
use scgen_core::autodiff::MOMENT_EPS;
use scgen_core::condops::{scc_forward, scc_reference, scn_forward, semantic_gate, GateMode, Moments};
use scgen_core::eval::frechet_distance;
use scgen_core::gradcheck::{run_suite, TOLERANCE};
use scgen_core::params::{spectral_normalize, SpectralState};
use scgen_core::synthdata::{generate_scene, SceneSpec};
use scgen_core::{Graph, Shape, Tensor4};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn scc_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f32;
    let draws = 120;
    for i in 0..draws {
        let n = [1, 2, 3, 5][i % 4];
        let (b, ci, co) = (rng.random_range(1..3), rng.random_range(1..5), rng.random_range(1..5));
        let (h, w) = (rng.random_range(2..9), rng.random_range(2..9));
        let k = [1, 3, 5][rng.random_range(0..3)];
        let f = Tensor4::<f32>::randn(Shape::new(b, ci, h, w), 1.0, &mut rng);
        let v = Tensor4::<f32>::uniform(Shape::new(b, n, h, w), 0.0, 1.0, &mut rng);
        let kernels: Vec<_> = (0..n).map(|_| Tensor4::<f32>::randn(Shape::new(co, ci, k, k), 1.0, &mut rng)).collect();
        let biases: Vec<Vec<f32>> =
            (0..n).map(|_| Tensor4::<f32>::randn(Shape::vector(co), 1.0, &mut rng).into_vec()).collect();
        let mut g = Graph::new();
        let (fv, vv) = (g.constant(f.clone()), g.constant(v.clone()));
        let kv: Vec<_> = kernels.iter().map(|t| g.constant(t.clone())).collect();
        let bv: Vec<_> =
            biases.iter().map(|t| g.constant(Tensor4::from_vec(Shape::vector(co), t.clone()).unwrap())).collect();
        let out = scc_forward(&mut g, fv, vv, &kv, &bv).unwrap();
        let reference = scc_reference(&f, &v, &kernels, &biases).unwrap();
        let scale = reference.data().iter().fold(1.0f32, |m, x| m.max(x.abs()));
        worst = worst.max(g.value(out).max_abs_diff(&reference) / scale);
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-5 && secs < 30.0,
        format!("max relative deviation {worst:.2e} over {draws} draws (limit 1e-5), {secs:.2} s (limit 30 s)"),
    )
}

fn degenerate_operators() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut scc_err = 0.0f64;
    let mut scn_err = 0.0f64;
    for _ in 0..20 {
        let f = Tensor4::<f64>::randn(Shape::new(2, 3, 6, 5), 1.0, &mut rng);
        let k = Tensor4::<f64>::randn(Shape::new(4, 3, 3, 3), 1.0, &mut rng);
        let bias = Tensor4::<f64>::randn(Shape::vector(4), 1.0, &mut rng);
        let mut g = Graph::new();
        let (fv, kv, bv) = (g.constant(f.clone()), g.constant(k), g.constant(bias));
        let ones = g.constant(Tensor4::full(Shape::new(2, 1, 6, 5), 1.0));
        let gated = semantic_gate(&mut g, ones, GateMode::Softmax, 0.05).unwrap();
        let scc = scc_forward(&mut g, fv, gated.values, &[kv], &[bv]).unwrap();
        let conv = g.conv2d(fv, kv, Some(bv), 1, 1).unwrap();
        scc_err = scc_err.max(g.value(scc).max_abs_diff(g.value(conv)));

        let n = 3;
        let v = Tensor4::<f64>::uniform(Shape::new(2, n, 6, 5), 0.0, 1.0, &mut rng);
        let vv = g.constant(v);
        let zeros = g.constant(Tensor4::zeros(Shape::new(3, n, 1, 1)));
        let out = scn_forward(&mut g, fv, vv, zeros, zeros, Moments::Batch).unwrap();
        // Plain batch normalization computed directly.
        let s = f.shape();
        let count = (s.b * s.plane()) as f64;
        let mut stats = Vec::new();
        for c in 0..s.c {
            let vals: Vec<f64> = (0..s.b)
                .flat_map(|b| (0..s.h).flat_map(move |y| (0..s.w).map(move |x| (b, y, x))))
                .map(|(b, y, x)| f.at(b, c, y, x))
                .collect();
            let mean = vals.iter().sum::<f64>() / count;
            let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / count;
            stats.push((mean, (var + MOMENT_EPS).sqrt()));
        }
        let bn = Tensor4::from_fn(s, |b, c, y, x| (f.at(b, c, y, x) - stats[c].0) / stats[c].1);
        scn_err = scn_err.max(g.value(out.out).max_abs_diff(&bn));
    }
    outcome(
        scc_err <= 1e-6 && scn_err <= 1e-6,
        format!("single-candidate SCC vs conv2d {scc_err:.2e}, zero-candidate SCN vs batch norm {scn_err:.2e} (limit 1e-6)"),
    )
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let reports = run_suite(0xacce, 20, None).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let failing: Vec<String> = reports.iter().filter(|r| !r.passed()).map(|r| r.op.to_string()).collect();
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let min_instances = reports.iter().map(|r| r.instances).min().unwrap_or(0);
    outcome(
        failing.is_empty() && min_instances >= 20 && secs < 300.0,
        format!(
            "{} operations x {min_instances} instances, worst relative error {worst:.2e} (limit {TOLERANCE:.0e}), {secs:.1} s (limit 300 s){}",
            reports.len(),
            if failing.is_empty() { String::new() } else { format!(", failing: {}", failing.join(" ")) }
        ),
    )
}

fn softmax_gate() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut sum_err, mut shift_err, mut argmax_ok) = (0.0f64, 0.0f64, true);
    for _ in 0..50 {
        let n = rng.random_range(2..8);
        let shape = Shape::new(2, n, 4, 4);
        let raw = Tensor4::<f64>::randn(shape, 30.0, &mut rng);
        let shift: f64 = rng.random_range(-100.0..100.0);
        let mut g = Graph::new();
        let a = g.constant(raw.clone());
        let b = g.constant(raw.map(|x| x + shift));
        let va = semantic_gate(&mut g, a, GateMode::Softmax, 0.05).unwrap().values;
        let vb = semantic_gate(&mut g, b, GateMode::Softmax, 0.05).unwrap().values;
        let (ta, tb) = (g.value(va), g.value(vb));
        shift_err = shift_err.max(ta.max_abs_diff(tb));
        for bi in 0..2 {
            for y in 0..4 {
                for x in 0..4 {
                    let sum: f64 = (0..n).map(|c| ta.at(bi, c, y, x)).sum();
                    sum_err = sum_err.max((sum - 1.0).abs());
                    let arg = |t: &Tensor4<f64>| {
                        (0..n).fold(0, |best, c| if t.at(bi, c, y, x) > t.at(bi, best, y, x) { c } else { best })
                    };
                    argmax_ok &= arg(ta) == arg(&raw);
                }
            }
        }
    }
    outcome(
        sum_err <= 1e-6 && shift_err <= 1e-6 && argmax_ok,
        format!("sum error {sum_err:.2e}, shift error {shift_err:.2e} (limit 1e-6), argmax preserved: {argmax_ok}"),
    )
}

/// Top singular value by power iteration on `w^T w`, written out directly.
fn top_singular(w: &[f64], rows: usize, cols: usize, iters: usize, rng: &mut ChaCha8Rng) -> f64 {
    let mut v: Vec<f64> = (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut sigma = 0.0;
    for _ in 0..iters {
        let u: Vec<f64> = (0..rows).map(|r| (0..cols).map(|c| w[r * cols + c] * v[c]).sum()).collect();
        let next: Vec<f64> = (0..cols).map(|c| (0..rows).map(|r| w[r * cols + c] * u[r]).sum()).collect();
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        sigma = norm.sqrt();
        v = next.iter().map(|x| x / norm).collect();
    }
    sigma
}

fn spectral_norm() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let w = Tensor4::<f64>::randn(Shape::new(64, 64, 1, 1), 1.0, &mut rng);
        let mut state = SpectralState::for_shape(w.shape());
        let normalized = spectral_normalize(&w, &mut state, 100).unwrap();
        let sigma = top_singular(normalized.data(), 64, 64, 500, &mut rng);
        worst = worst.max((sigma - 1.0).abs());
    }
    outcome(worst <= 0.01, format!("50 matrices 64x64, worst |sigma - 1| {worst:.2e} (limit 1e-2)"))
}

fn frechet() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let set: Vec<Vec<f64>> = (0..40).map(|_| (0..8).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let same = frechet_distance(&set, &set).unwrap();
    let pair = |mu: f64, var: f64| {
        let r = (var / 2.0f64).sqrt();
        vec![vec![mu - r], vec![mu + r]]
    };
    let shift = frechet_distance(&pair(0.0, 1.0), &pair(1.0, 1.0)).unwrap();
    let spread = frechet_distance(&pair(0.0, 4.0), &pair(0.0, 1.0)).unwrap();
    outcome(
        same <= 1e-6 && (shift - 1.0).abs() <= 1e-4 && (spread - 1.0).abs() <= 1e-4,
        format!("identical sets {same:.2e}, mean shift {shift:.6} (want 1), variance 4 vs 1 {spread:.6} (want 1)"),
    )
}

struct Smoke {
    first: f64,
    last: f64,
    secs: f64,
}

fn smoke_config() -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/families4.json");
    let mut cfg = ExperimentConfig::load(&path).unwrap();
    cfg.train.seed = 17;
    cfg.train.total_steps = 500;
    cfg
}

fn smoke_run(root: &Path, name: &str) -> (Smoke, scgen_core::train::Trainer) {
    let cfg = smoke_config();
    let data_dir = root.join("data");
    if !data_dir.exists() {
        write_dataset(&data_dir, &SceneSpec::families4(17), 8, false).unwrap();
    }
    let data = Dataset::load(&data_dir).unwrap();
    let opts = TrainOptions { skip_metrics: true, ..TrainOptions::default() };
    let start = Instant::now();
    let summary = run::train(&cfg, &data, &root.join(name), &opts).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let term = |r: &scgen_core::train::LossReport| r.perceptual + r.svg;
    let first = term(&summary.reports[0]);
    let last = term(summary.reports.last().unwrap());
    (Smoke { first, last, secs }, summary.trainer)
}

fn overfit(s: &Smoke) -> Outcome {
    let ratio = s.last / s.first;
    outcome(
        ratio <= 0.5 && s.secs <= 600.0,
        format!(
            "perceptual + svg {:.4} -> {:.4} ({:.1}% of step 0, limit 50%), {:.1} s for 500 steps (limit 600 s)",
            s.first,
            s.last,
            100.0 * ratio,
            s.secs
        ),
    )
}

fn family_ordering(trainer: &mut scgen_core::train::Trainer) -> Outcome {
    // Held-out split of 64 layouts.
    let spec = SceneSpec::families4(18);
    let layouts: Vec<_> = (0..64).map(|i| generate_scene(&spec, i).layout).collect();
    let stats = run::class_vectors(&mut trainer.generator, &layouts, None).unwrap();
    let (Some(same), Some(a), Some(b)) = (stats.get(1, 2), stats.get(1, 3), stats.get(2, 3)) else {
        return outcome(false, "a class is absent from the layouts".into());
    };
    let margin = same - a.max(b);
    outcome(
        margin >= 0.1,
        format!("cos(1,2) {same:.5}, cos(1,3) {a:.5}, cos(2,3) {b:.5}, margin {margin:.4} (limit 0.1)"),
    )
}

fn determinism(root: &Path) -> Outcome {
    let a = root.join("a");
    let b = root.join("b");
    let same_file = |name: &str| fs::read(a.join(name)).unwrap() == fs::read(b.join(name)).unwrap();
    let mut files = vec!["losses.csv".to_string(), run::FINAL_CHECKPOINT.to_string()];
    files.extend(
        fs::read_dir(&a)
            .unwrap()
            .filter_map(|e| e.ok()?.file_name().into_string().ok())
            .filter(|n| n.starts_with("ckpt_0")),
    );
    let identical = files.iter().all(|f| same_file(f));

    let cfg = smoke_config();
    let data = Dataset::load(&root.join("data")).unwrap();
    let resumed = root.join("resumed");
    let opts = TrainOptions {
        resume: Some(run::checkpoint_path(&a, 250)),
        stop_at: Some(260),
        skip_metrics: true,
        ..TrainOptions::default()
    };
    run::train(&cfg, &data, &resumed, &opts).unwrap();
    let rows = |dir: &Path| -> Vec<String> {
        fs::read_to_string(dir.join("losses.csv")).unwrap().lines().skip(1).map(str::to_owned).collect()
    };
    let tail = rows(&resumed);
    let reference: Vec<String> = rows(&a)[250..260].to_vec();
    let resumes = tail.len() == 10 && tail == reference;
    outcome(
        identical && resumes,
        format!("{} files bit-identical across runs: {identical}; resume at 250 reproduces 10 steps: {resumes}", files.len()),
    )
}

fn formats(root: &Path) -> Outcome {
    let mut problems = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let t = Tensor4::<f64>::randn(Shape::new(2, 3, 4, 5), 1.0, &mut rng);
    let bytes = scgt::encode(&t);
    if scgt::decode::<f64>(&bytes).ok().as_ref() != Some(&t) {
        problems.push("SCGT f64 round trip");
    }
    let f: Tensor4<f32> = t.cast();
    if scgt::decode::<f32>(&scgt::encode(&f)).ok().as_ref() != Some(&f) {
        problems.push("SCGT f32 round trip");
    }
    let mut bad = bytes.clone();
    bad[2] = b'?';
    if !matches!(scgt::decode::<f64>(&bad), Err(Error::Format { offset: 0, .. })) {
        problems.push("SCGT bad magic");
    }
    if !matches!(scgt::decode::<f64>(&bytes[..bytes.len() - 5]), Err(Error::Format { .. })) {
        problems.push("SCGT truncation");
    }
    let rgb = Image::rgb(7, 5, (0..105).map(|i| (i * 7 % 256) as u8).collect());
    let gray = Image::gray(7, 5, (0..35).map(|i| (i % 4) as u8).collect());
    for img in [&rgb, &gray] {
        if Image::decode(&img.encode()).ok().as_ref() != Some(img) {
            problems.push("PNM round trip");
        }
    }
    let mut p7 = rgb.encode();
    p7[1] = b'7';
    if !matches!(Image::decode(&p7), Err(Error::Format { .. })) {
        problems.push("P7 rejection");
    }
    let enc = rgb.encode();
    if !matches!(Image::decode(&enc[..enc.len() - 1]), Err(Error::Format { .. })) {
        problems.push("PNM truncation");
    }
    let ck = Checkpoint::load(&root.join("a").join(run::FINAL_CHECKPOINT)).unwrap();
    let ck_bytes = ck.encode();
    if Checkpoint::decode(&ck_bytes).ok().as_ref() != Some(&ck) {
        problems.push("checkpoint round trip");
    }
    if Checkpoint::decode(&ck_bytes[..ck_bytes.len() / 2]).is_ok() {
        problems.push("checkpoint truncation");
    }
    outcome(
        problems.is_empty(),
        if problems.is_empty() {
            "SCGT, PPM, PGM and checkpoint round trips exact; bad magic, P7 and truncation rejected with offsets".into()
        } else {
            format!("failed: {}", problems.join(", "))
        },
    )
}

fn report(index: usize, name: &str, o: &Outcome) -> bool {
    println!("{} {index:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    o.pass
}

fn main() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let mut all = true;
    all &= report(1, "SCC equivalence", &scc_equivalence());
    all &= report(2, "degenerate operators", &degenerate_operators());
    all &= report(3, "gradient suite", &gradient_suite());
    all &= report(4, "softmax gate", &softmax_gate());
    all &= report(5, "spectral normalization", &spectral_norm());
    all &= report(6, "Frechet metric", &frechet());
    let (smoke, mut trainer) = smoke_run(root, "a");
    all &= report(7, "overfit smoke test", &overfit(&smoke));
    all &= report(8, "same-family ordering", &family_ordering(&mut trainer));
    smoke_run(root, "b");
    all &= report(9, "determinism", &determinism(root));
    all &= report(10, "format conformance", &formats(root));
    if !all {
        std::process::exit(1);
    }
}
