use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use scgen_core::adversary::{hinge_d, FeatureExtractor};
use scgen_core::autodiff::batch_moments;
use scgen_core::condops::{scc_forward, scc_reference, scn_forward, semantic_gate, GateMode, Moments};
use scgen_core::eval::{class_vector_stats, cosine_similarity, frechet_distance, oracle_pixel_accuracy};
use scgen_core::generators::{Generator, GeneratorConfig};
use scgen_core::params::{power_iteration, spectral_normalize, Phase, SpectralState};
use scgen_core::synthdata::{generate_scene, SceneSpec, SemanticLayout};
use scgen_core::{Graph, Shape, Tensor4};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn config() -> ProptestConfig {
    ProptestConfig { cases: 24, ..ProptestConfig::default() }
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn softmax_gate_sums_shifts_and_argmax(seed in any::<u64>(), n in 2usize..6, shift in -50.0f64..50.0) {
        let mut r = rng(seed);
        let raw = Tensor4::<f64>::randn(Shape::new(2, n, 3, 3), 20.0, &mut r);
        let shifted = raw.map(|x| x + shift);
        let mut g = Graph::new();
        let (a, b) = (g.constant(raw.clone()), g.constant(shifted));
        let va = semantic_gate(&mut g, a, GateMode::Softmax, 0.05).unwrap();
        let vb = semantic_gate(&mut g, b, GateMode::Softmax, 0.05).unwrap();
        let (ta, tb) = (g.value(va.values), g.value(vb.values));
        prop_assert!(ta.max_abs_diff(tb) <= 1e-6);
        for bi in 0..2 {
            for y in 0..3 {
                for x in 0..3 {
                    let sum: f64 = (0..n).map(|c| ta.at(bi, c, y, x)).sum();
                    prop_assert!((sum - 1.0).abs() <= 1e-6);
                    let argmax = |t: &Tensor4<f64>| {
                        (0..n).fold(0, |best, c| if t.at(bi, c, y, x) > t.at(bi, best, y, x) { c } else { best })
                    };
                    prop_assert_eq!(argmax(ta), argmax(&raw));
                }
            }
        }
    }

    #[test]
    fn scc_matches_reference(seed in any::<u64>(), n in 1usize..4, c_in in 1usize..4, c_out in 1usize..4, side in 2usize..6) {
        let mut r = rng(seed);
        let f = Tensor4::<f32>::randn(Shape::new(2, c_in, side, side), 1.0, &mut r);
        let v = Tensor4::<f32>::uniform(Shape::new(2, n, side, side), 0.0, 1.0, &mut r);
        let kernels: Vec<_> = (0..n).map(|_| Tensor4::<f32>::randn(Shape::new(c_out, c_in, 3, 3), 1.0, &mut r)).collect();
        let biases: Vec<Vec<f32>> = (0..n).map(|_| Tensor4::<f32>::randn(Shape::vector(c_out), 1.0, &mut r).into_vec()).collect();
        let mut g = Graph::new();
        let (fv, vv) = (g.constant(f.clone()), g.constant(v.clone()));
        let kv: Vec<_> = kernels.iter().map(|k| g.constant(k.clone())).collect();
        let bv: Vec<_> = biases.iter().map(|b| g.constant(Tensor4::from_vec(Shape::vector(c_out), b.clone()).unwrap())).collect();
        let out = scc_forward(&mut g, fv, vv, &kv, &bv).unwrap();
        let reference = scc_reference(&f, &v, &kernels, &biases).unwrap();
        let scale = reference.data().iter().fold(1.0f32, |m, x| m.max(x.abs()));
        prop_assert!(g.value(out).max_abs_diff(&reference) / scale <= 1e-5);
    }

    #[test]
    fn spectral_normalize_ignores_scale(seed in any::<u64>(), t in 0.01f64..100.0) {
        let mut r = rng(seed);
        let w = Tensor4::<f64>::randn(Shape::new(6, 2, 3, 3), 1.0, &mut r);
        let scaled = w.map(|x| x * t);
        let mut s1 = SpectralState::for_shape(w.shape());
        let mut s2 = s1.clone();
        let a = spectral_normalize(&w, &mut s1, 60).unwrap();
        let b = spectral_normalize(&scaled, &mut s2, 60).unwrap();
        prop_assert!(a.max_abs_diff(&b) <= 1e-9);
    }

    #[test]
    fn spectral_normalize_gives_unit_top_singular_value(seed in any::<u64>()) {
        let mut r = rng(seed);
        let w = Tensor4::<f64>::randn(Shape::new(12, 12, 1, 1), 1.0, &mut r);
        let mut st = SpectralState::for_shape(w.shape());
        let out = spectral_normalize(&w, &mut st, 200).unwrap();
        let mut u: Vec<f64> = Tensor4::<f64>::randn(Shape::vector(12), 1.0, &mut r).into_vec();
        let mut v = vec![0.0; 12];
        let sigma = power_iteration(out.data(), &mut u, &mut v, 500);
        prop_assert!((sigma - 1.0).abs() <= 0.01, "sigma {}", sigma);
    }

    #[test]
    fn zero_candidate_scn_normalizes(seed in any::<u64>(), c in 1usize..4, n in 1usize..4) {
        let mut r = rng(seed);
        let x = Tensor4::<f64>::randn(Shape::new(4, c, 5, 5), 3.0, &mut r).map(|v| v + 2.0);
        let v = Tensor4::<f64>::uniform(Shape::new(4, n, 5, 5), 0.0, 1.0, &mut r);
        let mut g = Graph::new();
        let (xv, vv) = (g.constant(x), g.constant(v));
        let zeros = g.constant(Tensor4::zeros(Shape::new(c, n, 1, 1)));
        let out = scn_forward(&mut g, xv, vv, zeros, zeros, Moments::Batch).unwrap();
        let (m, s) = batch_moments(&mut g, out.out).unwrap();
        for ch in 0..c {
            prop_assert!(g.value(m).data()[ch].abs() <= 1e-4);
            prop_assert!((g.value(s).data()[ch] - 1.0).abs() <= 1e-2);
        }
    }

    #[test]
    fn frechet_symmetric_and_zero_on_self(seed in any::<u64>(), na in 2usize..12, nb in 2usize..12, d in 1usize..5) {
        let mut r = rng(seed);
        let mut set = |n: usize| -> Vec<Vec<f64>> {
            (0..n).map(|_| Tensor4::<f64>::randn(Shape::vector(d), 1.0, &mut r).into_vec()).collect()
        };
        let (a, b) = (set(na), set(nb));
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-9 * ab.max(1.0));
        prop_assert!(ab >= 0.0);
        prop_assert!(frechet_distance(&a, &a).unwrap() <= 1e-6);
    }

    #[test]
    fn cosine_ignores_positive_rescaling(seed in any::<u64>(), t in 0.01f64..100.0, class in 0usize..3) {
        let mut r = rng(seed);
        let level = Tensor4::<f64>::uniform(Shape::new(3, 4, 6, 6), 0.0, 1.0, &mut r);
        let layouts: Vec<SemanticLayout> = (0..3)
            .map(|b| SemanticLayout::new((0..36).map(|i| ((i / 4 + b) % 3) as u8).collect(), 6, 6, 3).unwrap())
            .collect();
        let scaled = Tensor4::from_fn(level.shape(), |b, c, y, x| {
            let v = level.at(b, c, y, x);
            if layouts[b].at(y, x) == class { v * t } else { v }
        });
        let a = class_vector_stats(&level, &layouts).unwrap();
        let s = class_vector_stats(&scaled, &layouts).unwrap();
        for i in 0..3 {
            prop_assert!((a.get(i, i).unwrap() - 1.0).abs() <= 1e-6);
            for j in 0..3 {
                prop_assert!((a.get(i, j).unwrap() - s.get(i, j).unwrap()).abs() <= 1e-9);
                prop_assert_eq!(a.get(i, j), a.get(j, i));
            }
        }
        let u = [1.0, 2.0, 3.0];
        let w = [-1.0, 0.5, 2.0];
        let scaled_u: Vec<f64> = u.iter().map(|x| x * t).collect();
        prop_assert!((cosine_similarity(&u, &w) - cosine_similarity(&scaled_u, &w)).abs() <= 1e-12);
    }

    #[test]
    fn oracle_accuracy_in_unit_interval(seed in any::<u64>(), index in 0u64..50, boundary in any::<bool>()) {
        let spec = SceneSpec::families4(seed);
        let pair = generate_scene(&spec, index);
        let mut r = rng(seed);
        let noise = Tensor4::<f64>::uniform(Shape::new(1, 3, 32, 32), -1.0, 1.0, &mut r);
        for img in [pair.image::<f64>(), noise] {
            let acc = oracle_pixel_accuracy(&img, &pair.layout, &spec, boundary).unwrap();
            prop_assert!((0.0..=1.0).contains(&acc.accuracy));
            for p in acc.per_class.iter().flatten() {
                prop_assert!((0.0..=1.0).contains(p));
            }
        }
    }

    #[test]
    fn scene_generation_is_deterministic(seed in any::<u64>(), index in any::<u64>()) {
        let spec = SceneSpec::families4(seed);
        prop_assert_eq!(generate_scene(&spec, index), generate_scene(&spec, index));
    }

    #[test]
    fn hinge_d_zero_iff_margins_met(real in prop::collection::vec(-3.0f64..3.0, 4), fake in prop::collection::vec(-3.0f64..3.0, 4)) {
        let s = Shape::new(1, 1, 2, 2);
        let mut g = Graph::new();
        let rv = g.constant(Tensor4::from_vec(s, real.clone()).unwrap());
        let fv = g.constant(Tensor4::from_vec(s, fake.clone()).unwrap());
        let l = hinge_d(&mut g, &[rv], &[fv]).unwrap();
        let met = real.iter().all(|&x| x >= 1.0) && fake.iter().all(|&x| x <= -1.0);
        prop_assert_eq!(g.item(l).unwrap() == 0.0, met);
    }
}

#[test]
fn delta_kernel_is_identity() {
    let mut r = rng(1);
    let x = Tensor4::<f64>::randn(Shape::new(2, 3, 5, 4), 1.0, &mut r);
    let k = Tensor4::from_fn(Shape::new(3, 3, 3, 3), |o, i, y, xx| if o == i && y == 1 && xx == 1 { 1.0 } else { 0.0 });
    let mut g = Graph::new();
    let (xv, kv) = (g.constant(x.clone()), g.constant(k));
    let y = g.conv2d(xv, kv, None, 1, 1).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn fan_out_multiplies_gradient() {
    let mut r = rng(2);
    let x = Tensor4::<f64>::randn(Shape::new(1, 2, 3, 3), 1.0, &mut r);
    let grad_with = |k: usize| {
        let mut g = Graph::new();
        let v = g.variable(x.clone());
        let mut acc = g.activation(v, scgen_core::autodiff::Activation::Tanh);
        let single = acc;
        for _ in 1..k {
            acc = g.add(acc, single).unwrap();
        }
        let s = g.sum(acc);
        g.backward(s).unwrap();
        g.grad(v).unwrap().to_vec()
    };
    let one = grad_with(1);
    let four = grad_with(4);
    for (a, b) in one.iter().zip(&four) {
        assert!((4.0 * a - b).abs() <= 1e-12);
    }
}

#[test]
fn resizes_preserve_constants_and_one_hot() {
    let mut g = Graph::new();
    let c = g.constant(Tensor4::full(Shape::new(1, 2, 5, 3), 0.7f64));
    let up = g.resize_bilinear(c, 11, 8).unwrap();
    assert!(g.value(up).data().iter().all(|&v| v == 0.7));
    let layout = SemanticLayout::new((0..25).map(|i| (i % 3) as u8).collect(), 5, 5, 3).unwrap();
    let oh = g.constant(layout.one_hot::<f64>());
    let near = g.resize_nearest(oh, 13, 7).unwrap();
    let v = g.value(near);
    for y in 0..13 {
        for x in 0..7 {
            let col: Vec<f64> = (0..3).map(|c| v.at(0, c, y, x)).collect();
            assert!(col.iter().all(|&e| e == 0.0 || e == 1.0));
            assert_eq!(col.iter().sum::<f64>(), 1.0);
        }
    }
}

#[test]
fn standardized_moments() {
    let mut r = rng(3);
    let x = Tensor4::<f64>::randn(Shape::new(8, 2, 6, 6), 1.0, &mut r);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let (m, s) = batch_moments(&mut g, xv).unwrap();
    let c = g.sub(xv, m).unwrap();
    let z = g.div(c, s).unwrap();
    let (m2, s2) = batch_moments(&mut g, z).unwrap();
    for ch in 0..2 {
        assert!(g.value(m2).data()[ch].abs() <= 1e-6);
        assert!((g.value(s2).data()[ch] - 1.0).abs() <= 1e-3);
    }
}

fn tiny() -> GeneratorConfig {
    GeneratorConfig {
        resolution: 16,
        c_sem: 4,
        svg_channels: vec![6, 5],
        svg_head_channels: 4,
        srg_channels: vec![8, 4],
        vector_taps: vec![1, 2],
        n: 3,
        z_dim: 8,
        ..GeneratorConfig::families4()
    }
}

fn layout(r: usize) -> Tensor4<f64> {
    Tensor4::from_fn(Shape::new(2, 4, r, r), |b, c, y, x| if (x / 3 + y / 4 + b) % 4 == c { 1.0 } else { 0.0 })
}

#[test]
fn pyramid_levels_stay_normalized_after_resize() {
    let cfg = tiny();
    let gen = Generator::<f64>::build(&cfg, 4).unwrap();
    let mut store = gen.store.clone();
    let mut g = Graph::new();
    let p = store.bind(&mut g, Phase::Eval, false).unwrap();
    let l = g.constant(layout(16));
    let out = gen.svg_forward(&mut g, &p, l).unwrap();
    for v in &out.pyramid {
        let r = scgen_core::condops::resize_vectors(&mut g, *v, 13, 13).unwrap();
        let t = g.value(r.values);
        for b in 0..2 {
            for y in 0..13 {
                for x in 0..13 {
                    let col: Vec<f64> = (0..3).map(|c| t.at(b, c, y, x)).collect();
                    assert!(col.iter().all(|e| (0.0..=1.0).contains(e)));
                    assert!((col.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
                }
            }
        }
    }
}

#[test]
fn generator_reaches_every_parameter() {
    let cfg = tiny();
    let mut gen = Generator::<f64>::build(&cfg, 5).unwrap();
    let mut g = Graph::new();
    let l = g.constant(layout(16));
    let z = g.constant(Tensor4::randn(Shape::new(2, 8, 1, 1), 1.0, &mut rng(6)));
    let p = gen.store.bind(&mut g, Phase::Check, true).unwrap();
    let out = gen.forward_bound(&mut g, &p, l, z, Phase::Check).unwrap();
    let sq = g.square(out.image);
    let a = g.sum(sq);
    let sv = g.square(out.svg.image);
    let b = g.sum(sv);
    let loss = g.add(a, b).unwrap();
    g.backward(loss).unwrap();
    gen.store.pull_grads(&g, &p);
    for param in gen.store.params() {
        assert!(param.grad.data().iter().any(|&v| v != 0.0), "{} has no gradient", param.name);
    }
    let img = g.value(out.image);
    assert!(img.data().iter().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn svg_is_pure() {
    let cfg = tiny();
    let gen = Generator::<f64>::build(&cfg, 7).unwrap();
    let run = || {
        let mut store = gen.store.clone();
        let mut g = Graph::new();
        let p = store.bind(&mut g, Phase::Eval, false).unwrap();
        let l = g.constant(layout(16));
        let out = gen.svg_forward(&mut g, &p, l).unwrap();
        let levels: Vec<_> = out.pyramid.iter().map(|v| g.value(v.values).clone()).collect();
        (g.value(out.image).clone(), levels)
    };
    assert_eq!(run(), run());
}

#[test]
fn feature_extractor_is_stable() {
    let a = FeatureExtractor::<f32>::seeded(9);
    let b = FeatureExtractor::<f32>::seeded(9);
    assert_eq!(a.stages(), b.stages());
}

#[test]
fn class_mean_color_is_stable_across_scenes() {
    let spec = SceneSpec::families4(11);
    let k = spec.class_count();
    let mut per_scene: Vec<Vec<[f64; 3]>> = vec![Vec::new(); k];
    for index in 0..40 {
        let pair = generate_scene(&spec, index);
        let mut sums = vec![[0.0; 3]; k];
        let mut counts = vec![0usize; k];
        for y in 0..pair.layout.h {
            for x in 0..pair.layout.w {
                let c = pair.layout.at(y, x);
                let p = (y * pair.layout.w + x) * 3;
                for ch in 0..3 {
                    sums[c][ch] += pair.rgb[p + ch] as f64 / 255.0;
                }
                counts[c] += 1;
            }
        }
        for c in 0..k {
            if counts[c] >= 500 {
                per_scene[c].push(sums[c].map(|s| s / counts[c] as f64));
            }
        }
    }
    // Scenes are 32x32, so only the background reaches the pixel threshold
    // per scene; pool the other classes over consecutive scenes instead.
    assert!(per_scene[0].len() >= 10);
    for means in per_scene.iter().filter(|m| m.len() >= 2) {
        for m in means {
            for ch in 0..3 {
                assert!((m[ch] - means[0][ch]).abs() <= 0.02);
            }
        }
    }
    for c in 1..k {
        let mut pooled = Vec::new();
        let (mut sum, mut count) = ([0.0; 3], 0usize);
        for index in 0..400 {
            let pair = generate_scene(&spec, index);
            for (i, &l) in pair.layout.labels.iter().enumerate() {
                if l as usize == c {
                    for ch in 0..3 {
                        sum[ch] += pair.rgb[i * 3 + ch] as f64 / 255.0;
                    }
                    count += 1;
                }
            }
            if count >= 500 {
                pooled.push(sum.map(|s| s / count as f64));
                (sum, count) = ([0.0; 3], 0);
            }
        }
        assert!(pooled.len() >= 3, "class {c}");
        for m in &pooled {
            for ch in 0..3 {
                assert!((m[ch] - pooled[0][ch]).abs() <= 0.02, "class {c} drifted: {m:?} vs {:?}", pooled[0]);
            }
        }
    }
}
