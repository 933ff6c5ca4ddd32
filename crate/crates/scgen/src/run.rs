//! Training driver and checkpoint-based inference.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use scgen_core::adversary::FeatureExtractor;
use scgen_core::eval::{frechet_distance, ClassVectorAccumulator, ClassVectorStats, MetricReport, OracleAccumulator};
use scgen_core::generators::Generator;
use scgen_core::params::{ParamStore, Phase};
use scgen_core::synthdata::{tensor_to_rgb, SemanticLayout};
use scgen_core::train::{sample_noise, LossReport, Trainer, FEATURE_SEED};
use scgen_core::{Graph, Shape, Tensor4};

use crate::checkpoint::{load_feature_extractor, Checkpoint};
use crate::config::ExperimentConfig;
use crate::dataset::Dataset;
use crate::error::{write_file, Error, Result};
use crate::pnm::Image;
use crate::report;

pub const CONFIG_FILE: &str = "config.json";
pub const LOSSES_CSV: &str = "losses.csv";
pub const FINAL_CHECKPOINT: &str = "ckpt_final.ckpt";
/// Noise stream base of evaluation samples, kept apart from training steps.
const EVAL_STREAM: u64 = 1 << 40;

pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("ckpt_{step:06}.ckpt"))
}

pub fn feature_extractor(cfg: &ExperimentConfig) -> Result<FeatureExtractor<f32>> {
    match &cfg.perceptual_weights_path {
        Some(p) => load_feature_extractor(p),
        None => Ok(FeatureExtractor::seeded(FEATURE_SEED)),
    }
}

pub fn new_trainer(cfg: &ExperimentConfig) -> Result<Trainer> {
    cfg.validate()?;
    Ok(Trainer::new(&cfg.generator, &cfg.discriminator, &cfg.train, feature_extractor(cfg)?)?)
}

pub fn to_checkpoint(trainer: &Trainer, cfg: &ExperimentConfig) -> Checkpoint {
    Checkpoint { step: trainer.step as u64, config: cfg.to_json(), tensors: trainer.named_state() }
}

/// Rebuilds the trainer saved in `ck` together with its configuration.
pub fn from_checkpoint(ck: &Checkpoint) -> Result<(ExperimentConfig, Trainer)> {
    let cfg: ExperimentConfig = serde_json::from_str(&ck.config)
        .map_err(|source| Error::Json { path: PathBuf::from("<checkpoint config>"), source })?;
    let mut trainer = new_trainer(&cfg)?;
    trainer.load_named_state(ck.tensors.clone(), ck.step as usize)?;
    Ok((cfg, trainer))
}

/// Options of [`train`].
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub resume: Option<PathBuf>,
    /// Stop after this step instead of `total_steps`.
    pub stop_at: Option<usize>,
    /// Progress lines on stderr.
    pub verbose: bool,
    /// Skip metric evaluation at checkpoints.
    pub skip_metrics: bool,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub reports: Vec<LossReport>,
    pub trainer: Trainer,
    pub final_checkpoint: PathBuf,
}

fn read_losses(path: &Path, before: usize) -> Result<Vec<String>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| l.split(',').next().and_then(|s| s.parse::<usize>().ok()).is_some_and(|s| s < before))
        .map(str::to_owned)
        .collect())
}

/// Trains on `data`, writing the resolved config, `losses.csv`, periodic
/// checkpoints with preview grids and metric rows, and `ckpt_final.ckpt`.
pub fn train(cfg: &ExperimentConfig, data: &Dataset, out: &Path, opts: &TrainOptions) -> Result<TrainSummary> {
    cfg.validate()?;
    let tc = &cfg.train;
    if data.spec.class_count() != cfg.generator.c_sem || data.spec.resolution != cfg.generator.resolution {
        return Err(Error::Usage(format!(
            "data has {} classes at {}x{}, config expects {} classes at {}x{}",
            data.spec.class_count(),
            data.spec.resolution,
            data.spec.resolution,
            cfg.generator.c_sem,
            cfg.generator.resolution,
            cfg.generator.resolution
        )));
    }
    if data.len() < tc.batch_size {
        return Err(Error::Usage(format!("{} samples cannot fill a batch of {}", data.len(), tc.batch_size)));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_file(&out.join(CONFIG_FILE), cfg.to_json().as_bytes())?;

    let mut trainer = match &opts.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let (saved, trainer) = from_checkpoint(&ck)?;
            if saved.generator != cfg.generator || saved.discriminator != cfg.discriminator {
                return Err(Error::Usage(format!("{} was trained with a different architecture", path.display())));
            }
            let mut trainer = trainer;
            trainer.config = cfg.train.clone();
            trainer
        }
        None => new_trainer(cfg)?,
    };
    let losses_path = out.join(LOSSES_CSV);
    let kept = read_losses(&losses_path, trainer.step)?;
    let mut log = fs::File::create(&losses_path).map_err(|e| Error::io(&losses_path, e))?;
    let io = |e| Error::io(&losses_path, e);
    writeln!(log, "{}", LossReport::HEADER).map_err(io)?;
    for l in kept {
        writeln!(log, "{l}").map_err(io)?;
    }
    let mut metrics = read_metric_rows(out, trainer.step)?;

    let end = opts.stop_at.unwrap_or(tc.total_steps).min(tc.total_steps);
    let mut reports = Vec::new();
    while trainer.step < end {
        let (lay, img) = data.batch_for_step(tc.seed, trainer.step, tc.batch_size)?;
        let r = trainer.train_step(&lay, &img)?;
        writeln!(log, "{}", r.csv_row()).map_err(io)?;
        if opts.verbose && (r.step % 50 == 0 || trainer.step == end) {
            eprintln!(
                "step {:>6}  d {:.4}  g {:.4}  perceptual {:.4}  svg {:.4}",
                r.step, r.d_loss, r.g_total, r.perceptual, r.svg
            );
        }
        reports.push(r);
        let s = trainer.step;
        if s % tc.checkpoint_every.max(1) == 0 || s == tc.total_steps {
            log.flush().map_err(io)?;
            to_checkpoint(&trainer, cfg).save(&checkpoint_path(out, s))?;
            write_preview(&mut trainer, cfg, data, &out.join(format!("samples_{s:06}.ppm")))?;
            if !opts.skip_metrics {
                metrics.push(evaluate(&mut trainer.generator, &trainer.features, data, &s.to_string())?);
                report::write_metrics(&metrics, out)?;
            }
        }
    }
    log.flush().map_err(io)?;
    let final_checkpoint = out.join(FINAL_CHECKPOINT);
    to_checkpoint(&trainer, cfg).save(&final_checkpoint)?;
    Ok(TrainSummary { reports, trainer, final_checkpoint })
}

fn read_metric_rows(out: &Path, before: usize) -> Result<Vec<MetricReport>> {
    let path = out.join(report::METRICS_CSV);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut rows = Vec::new();
    let mut rd = csv::Reader::from_path(&path)?;
    for rec in rd.records() {
        let rec = rec?;
        let (Some(tag), Some(f), Some(a)) = (rec.get(0), rec.get(1), rec.get(2)) else { continue };
        if tag.parse::<usize>().is_ok_and(|s| s <= before) {
            rows.push(MetricReport {
                tag: tag.into(),
                frechet: f.parse().unwrap_or(f64::NAN),
                pixel_accuracy: a.parse().unwrap_or(f64::NAN),
                per_class: Vec::new(),
            });
        }
    }
    Ok(rows)
}

/// `Eval` once every normalization layer has running statistics, `Check`
/// (batch statistics) before any training.
pub fn inference_phase<T: scgen_core::Scalar>(store: &ParamStore<T>) -> Phase {
    if store.stats().iter().all(|s| s.mean.is_some()) {
        Phase::Eval
    } else {
        Phase::Check
    }
}

/// Generated image for each layout, one noise draw per `(seed, stream)`.
pub fn generate(gen: &mut Generator<f32>, layout: &Tensor4<f32>, z: &Tensor4<f32>) -> Result<Tensor4<f32>> {
    let phase = inference_phase(&gen.store);
    let mut g = Graph::new();
    let l = g.constant(layout.clone());
    let zv = g.constant(z.clone());
    let out = gen.forward(&mut g, l, zv, phase, false)?;
    Ok(g.value(out.image).clone())
}

/// Side-by-side real (top) and generated (bottom) images.
fn write_preview(trainer: &mut Trainer, cfg: &ExperimentConfig, data: &Dataset, path: &Path) -> Result<()> {
    let k = cfg.preview_samples.min(data.len()).max(1);
    let idx: Vec<usize> = (0..k).collect();
    let (lay, img) = data.batch(&idx)?;
    let z = sample_noise(cfg.train.seed, EVAL_STREAM, k, cfg.generator.z_dim);
    let fake = generate(&mut trainer.generator, &lay, &z)?;
    let r = cfg.generator.resolution;
    let mut grid = vec![0u8; k * r * 2 * r * 3];
    for (row, t) in [&img, &fake].into_iter().enumerate() {
        for i in 0..k {
            let rgb = tensor_to_rgb(t, i);
            for y in 0..r {
                let dst = ((row * r + y) * k * r + i * r) * 3;
                grid[dst..dst + r * 3].copy_from_slice(&rgb[y * r * 3..(y + 1) * r * 3]);
            }
        }
    }
    Image::rgb(k * r, 2 * r, grid).save(path)
}

/// Fréchet distance between pooled features of real and generated images
/// and oracle pixel accuracy of the generated images.
pub fn evaluate(gen: &mut Generator<f32>, phi: &FeatureExtractor<f32>, data: &Dataset, tag: &str) -> Result<MetricReport> {
    let mut real = Vec::with_capacity(data.len());
    let mut fake = Vec::with_capacity(data.len());
    let mut oracle = OracleAccumulator::new(&data.spec, false);
    for (i, p) in data.pairs.iter().enumerate() {
        let image = p.image::<f32>();
        let z = sample_noise(0, EVAL_STREAM + i as u64, 1, gen.config.z_dim);
        let out = generate(gen, &p.layout.one_hot(), &z)?;
        real.extend(phi.pooled(&image)?);
        fake.extend(phi.pooled(&out)?);
        oracle.add(&out, 0, &p.layout)?;
    }
    let acc = oracle.finish();
    Ok(MetricReport {
        tag: tag.into(),
        frechet: frechet_distance(&real, &fake)?,
        pixel_accuracy: acc.accuracy,
        per_class: acc.per_class,
    })
}

/// Real-against-real row: zero distance and the oracle's accuracy on the
/// dataset images themselves.
pub fn self_metrics(phi: &FeatureExtractor<f32>, data: &Dataset) -> Result<MetricReport> {
    let mut real = Vec::with_capacity(data.len());
    let mut oracle = OracleAccumulator::new(&data.spec, false);
    for p in &data.pairs {
        let image = p.image::<f32>();
        real.extend(phi.pooled(&image)?);
        oracle.add(&image, 0, &p.layout)?;
    }
    let acc = oracle.finish();
    Ok(MetricReport {
        tag: "self".into(),
        frechet: frechet_distance(&real, &real)?,
        pixel_accuracy: acc.accuracy,
        per_class: acc.per_class,
    })
}

/// Class statistics of pyramid level `level` (1-based, coarsest first;
/// `None` is the finest).
pub fn class_vectors(gen: &mut Generator<f32>, layouts: &[SemanticLayout], level: Option<usize>) -> Result<ClassVectorStats> {
    let levels = gen.config.levels();
    let level = level.unwrap_or(levels);
    if level == 0 || level > levels {
        return Err(Error::Usage(format!("level must lie in 1..={levels}, got {level}")));
    }
    let mut acc = ClassVectorAccumulator::new(gen.config.c_sem, gen.config.n);
    for l in layouts {
        if l.class_count != gen.config.c_sem {
            return Err(Error::Usage(format!("layout has {} classes, model expects {}", l.class_count, gen.config.c_sem)));
        }
        let mut g = Graph::<f32>::new();
        let p = gen.store.bind(&mut g, Phase::Eval, false)?;
        let lv = g.constant(l.one_hot());
        let out = gen.svg_forward(&mut g, &p, lv)?;
        acc.add(g.value(out.pyramid[level - 1].values), 0, l)?;
    }
    Ok(acc.finish())
}

/// `k` samples for one layout; sample `i` uses noise stream `i` of `seed`.
pub fn synthesize(gen: &mut Generator<f32>, layout: &SemanticLayout, seed: u64, k: usize) -> Result<Vec<Image>> {
    let c = &gen.config;
    if layout.class_count != c.c_sem {
        return Err(Error::Usage(format!("layout has {} classes, model expects {}", layout.class_count, c.c_sem)));
    }
    if layout.h != c.resolution || layout.w != c.resolution {
        return Err(Error::Usage(format!(
            "layout is {}x{}, model expects {}x{}",
            layout.w, layout.h, c.resolution, c.resolution
        )));
    }
    let one_hot = layout.one_hot::<f32>();
    (0..k)
        .map(|i| {
            let z = sample_noise(seed, i as u64, 1, gen.config.z_dim);
            let img = generate(gen, &one_hot, &z)?;
            Ok(Image::rgb(layout.w, layout.h, tensor_to_rgb(&img, 0)))
        })
        .collect()
}

/// Shape of a generator's noise input for `b` samples.
pub fn noise_shape(gen: &Generator<f32>, b: usize) -> Shape {
    Shape::new(b, gen.config.z_dim, 1, 1)
}
