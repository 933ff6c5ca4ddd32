use scgen_core::adversary::{hinge_d, DiscriminatorConfig, FeatureExtractor};
use scgen_core::eval::oracle_pixel_accuracy;
use scgen_core::generators::GeneratorConfig;
use scgen_core::params::Phase;
use scgen_core::synthdata::{batch_for_step, batches_per_epoch, generate_scene, SceneSpec, SemanticLayout};
use scgen_core::train::{sample_noise, TrainConfig, Trainer};
use scgen_core::{Graph, Shape, Tensor4};

fn tiny() -> GeneratorConfig {
    GeneratorConfig {
        resolution: 16,
        c_sem: 4,
        svg_channels: vec![12, 8],
        svg_head_channels: 8,
        srg_channels: vec![24, 12],
        vector_taps: vec![1, 2],
        z_dim: 16,
        ..GeneratorConfig::families4()
    }
}

fn batch(count: usize) -> (Tensor4<f32>, Tensor4<f32>) {
    let spec = SceneSpec { resolution: 16, ..SceneSpec::families4(17) };
    let pairs: Vec<_> = (0..count as u64).map(|i| generate_scene(&spec, i)).collect();
    let layouts: Vec<_> = pairs.iter().map(|p| p.layout.one_hot::<f32>()).collect();
    let images: Vec<_> = pairs.iter().map(|p| p.image::<f32>()).collect();
    (
        Tensor4::stack(&layouts.iter().collect::<Vec<_>>()).unwrap(),
        Tensor4::stack(&images.iter().collect::<Vec<_>>()).unwrap(),
    )
}

fn trainer(steps: usize) -> Trainer {
    let cfg = TrainConfig { seed: 17, total_steps: steps, check_finite: true, ..TrainConfig::families4() };
    Trainer::new(&tiny(), &DiscriminatorConfig::default(), &cfg, FeatureExtractor::seeded(17)).unwrap()
}

#[test]
fn fixed_batch_overfits() {
    let (l, i) = batch(1);
    let mut t = trainer(200);
    let reports: Vec<_> = (0..200).map(|_| t.train_step(&l, &i).unwrap()).collect();
    let first = reports[0].perceptual + reports[0].svg;
    let last = reports[199].perceptual + reports[199].svg;
    assert!(last <= 0.5 * first, "{first} -> {last}");
}

#[test]
fn runs_are_bit_identical_and_grads_cleared() {
    let (l, i) = batch(2);
    let run = || {
        let mut t = trainer(6);
        let logs: Vec<String> = (0..6).map(|_| t.train_step(&l, &i).unwrap().csv_row()).collect();
        assert!(t.generator.store.grads_are_zero());
        assert!(t.discriminator.store.grads_are_zero());
        (logs, t.named_state())
    };
    assert_eq!(run(), run());
}

#[test]
fn resumed_state_continues_identically() {
    let (l, i) = batch(2);
    let mut a = trainer(20);
    for _ in 0..5 {
        a.train_step(&l, &i).unwrap();
    }
    let mut b = trainer(20);
    b.load_named_state(a.named_state(), a.step).unwrap();
    for _ in 0..10 {
        assert_eq!(a.train_step(&l, &i).unwrap(), b.train_step(&l, &i).unwrap());
    }
    assert_eq!(a.named_state(), b.named_state());
}

#[test]
fn discriminator_step_leaves_generator_untouched() {
    let (l, i) = batch(2);
    let mut t = trainer(4);
    let mut g = Graph::new();
    let lay = g.constant(l);
    let real = g.constant(i);
    let z = g.constant(sample_noise(17, 0, 2, 16));
    let out = t.generator.forward(&mut g, lay, z, Phase::Check, false).unwrap();
    let fake = g.detach(out.image);
    let bound = t.discriminator.store.bind(&mut g, Phase::Check, true).unwrap();
    let dr = t.discriminator.forward_bound(&mut g, &bound, real, lay).unwrap();
    let df = t.discriminator.forward_bound(&mut g, &bound, fake, lay).unwrap();
    let loss = hinge_d(&mut g, &dr.scores, &df.scores).unwrap();
    // Scores start near zero, so each of the real and fake terms is close to 1.
    let value = g.item(loss).unwrap() as f64;
    assert!((value - 2.0).abs() < 0.2, "{value}");
    g.backward(loss).unwrap();
    t.discriminator.store.pull_grads(&g, &bound);
    assert!(t.generator.store.grads_are_zero());
    assert!(!t.discriminator.store.grads_are_zero());
}

#[test]
fn epoch_arithmetic() {
    assert_eq!(batches_per_epoch(10, 4), 2);
    let e0: Vec<usize> = (0..2).flat_map(|s| batch_for_step(3, s, 10, 4).unwrap()).collect();
    let mut sorted = e0.clone();
    sorted.sort_unstable();
    sorted.dedup();
    assert_eq!(sorted.len(), 8);
    assert_eq!(batch_for_step(3, 2, 10, 4).unwrap().len(), 4);
}

#[test]
fn accuracy_is_count_weighted_per_class() {
    let spec = SceneSpec::families4(5);
    let pair = generate_scene(&spec, 3);
    let noisy = pair.image::<f64>().map(|v| (v + 0.3 * (v * 37.0).sin()).clamp(-1.0, 1.0));
    let acc = oracle_pixel_accuracy(&noisy, &pair.layout, &spec, false).unwrap();
    let weighted: f64 = acc.per_class.iter().zip(&acc.counts).map(|(p, &n)| p.unwrap_or(0.0) * n as f64).sum();
    let total: usize = acc.counts.iter().sum();
    assert!((weighted / total as f64 - acc.accuracy).abs() < 1e-12);
}

#[test]
fn uniform_gray_scores_the_background_prior() {
    let spec = SceneSpec::families4(5);
    for index in 0..5 {
        let pair = generate_scene(&spec, index);
        let gray = Tensor4::<f64>::zeros(Shape::new(1, 3, 32, 32));
        let acc = oracle_pixel_accuracy(&gray, &pair.layout, &spec, false).unwrap();
        let counts = pair.layout.class_pixels();
        let largest = *counts.iter().max().unwrap();
        assert_eq!(largest, counts[0]);
        assert!((acc.accuracy - largest as f64 / 1024.0).abs() < 1e-12);
    }
}

#[test]
fn ground_truth_scores_high() {
    let spec = SceneSpec::families4(5);
    let mut total = 0.0;
    for index in 0..16 {
        let pair = generate_scene(&spec, index);
        total += oracle_pixel_accuracy(&pair.image::<f64>(), &pair.layout, &spec, true).unwrap().accuracy;
    }
    assert!(total / 16.0 >= 0.95);
}

#[test]
fn same_family_classes_render_identically() {
    let spec = SceneSpec::families4(2);
    let labels: Vec<u8> = (0..1024).map(|i| if (i % 32) < 16 { 1 } else { 0 }).collect();
    let swapped: Vec<u8> = labels.iter().map(|&l| if l == 1 { 2 } else { l }).collect();
    let a = scgen_core::synthdata::render(&spec, &SemanticLayout::new(labels, 32, 32, 4).unwrap());
    let b = scgen_core::synthdata::render(&spec, &SemanticLayout::new(swapped, 32, 32, 4).unwrap());
    assert_eq!(a, b);
}
