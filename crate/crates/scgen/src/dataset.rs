//! Paired dataset directories: `img_{index:05}.ppm`, `seg_{index:05}.pgm`
//! and `spec.json`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use scgen_core::synthdata::{batch_for_step, generate_scene, SamplePair, SceneSpec, SemanticLayout};
use scgen_core::Tensor4;

use crate::error::{read_file, write_file, Error, Result};
use crate::pnm::Image;

pub const SPEC_FILE: &str = "spec.json";

pub fn image_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("img_{index:05}.ppm"))
}

pub fn layout_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("seg_{index:05}.pgm"))
}

/// Worker threads: `SCGEN_THREADS` when set to a positive integer, else the
/// number of logical cores.
pub fn worker_threads() -> usize {
    std::env::var("SCGEN_THREADS")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub fn layout_image(layout: &SemanticLayout) -> Image {
    Image::gray(layout.w, layout.h, layout.labels.clone())
}

/// Reads a P5 label map, rejecting labels at or above `class_count`.
pub fn load_layout(path: &Path, class_count: usize) -> Result<SemanticLayout> {
    let img = Image::load(path)?;
    if img.channels != 1 {
        return Err(Error::Data(format!("{}: layouts must be P5 grayscale", path.display())));
    }
    SemanticLayout::new(img.data, img.height, img.width, class_count)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn is_pair_file(name: &str) -> Option<(bool, usize)> {
    let (image, rest) = if let Some(r) = name.strip_prefix("img_") {
        (true, r.strip_suffix(".ppm")?)
    } else {
        (false, name.strip_prefix("seg_")?.strip_suffix(".pgm")?)
    };
    Some((image, rest.parse().ok()?))
}

/// Writes `count` generated pairs and the spec. A non-empty `dir` is refused
/// unless `force`, which first removes existing pair files.
pub fn write_dataset(dir: &Path, spec: &SceneSpec, count: usize, force: bool) -> Result<()> {
    if count == 0 {
        return Err(Error::Usage("count must be ≥ 1".into()));
    }
    spec.validate()?;
    if dir.exists() {
        let entries: Vec<_> = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.collect::<std::io::Result<_>>().map_err(|e| Error::io(dir, e))?;
        if !entries.is_empty() && !force {
            return Err(Error::Usage(format!("{} is not empty; pass --force to overwrite", dir.display())));
        }
        for e in entries {
            if e.file_name().to_str().and_then(is_pair_file).is_some() {
                fs::remove_file(e.path()).map_err(|err| Error::io(e.path(), err))?;
            }
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = serde_json::to_string_pretty(spec).expect("spec serializes");
    write_file(&dir.join(SPEC_FILE), format!("{json}\n").as_bytes())?;
    let threads = worker_threads().min(count);
    let results: Vec<Result<()>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                s.spawn(move || -> Result<()> {
                    for i in (t..count).step_by(threads) {
                        let p = generate_scene(spec, i as u64);
                        Image::rgb(p.layout.w, p.layout.h, p.rgb).save(&image_path(dir, i))?;
                        layout_image(&p.layout).save(&layout_path(dir, i))?;
                    }
                    Ok(())
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("writer thread")).collect()
    });
    results.into_iter().collect()
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: SceneSpec,
    pub pairs: Vec<SamplePair>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let spec_path = dir.join(SPEC_FILE);
        let spec: SceneSpec = serde_json::from_slice(&read_file(&spec_path)?)
            .map_err(|source| Error::Json { path: spec_path.clone(), source })?;
        spec.validate()?;
        let mut images = BTreeSet::new();
        let mut layouts = BTreeSet::new();
        for e in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let e = e.map_err(|e| Error::io(dir, e))?;
            match e.file_name().to_str().and_then(is_pair_file) {
                Some((true, i)) => images.insert(i),
                Some((false, i)) => layouts.insert(i),
                None => false,
            };
        }
        let no_image: Vec<usize> = layouts.difference(&images).copied().collect();
        let no_layout: Vec<usize> = images.difference(&layouts).copied().collect();
        if !no_image.is_empty() || !no_layout.is_empty() {
            let mut parts = Vec::new();
            if !no_image.is_empty() {
                parts.push(format!("missing image for layout index {no_image:?}"));
            }
            if !no_layout.is_empty() {
                parts.push(format!("missing layout for image index {no_layout:?}"));
            }
            return Err(Error::Data(format!("{}: {}", dir.display(), parts.join("; "))));
        }
        if images.is_empty() {
            return Err(Error::Data(format!("{}: no pairs", dir.display())));
        }
        let mut pairs = Vec::with_capacity(images.len());
        for i in images {
            let layout = load_layout(&layout_path(dir, i), spec.class_count())?;
            let img_path = image_path(dir, i);
            let img = Image::load(&img_path)?;
            if img.channels != 3 || img.width != layout.w || img.height != layout.h {
                return Err(Error::Data(format!(
                    "{}: {}x{} image does not match its {}x{} layout",
                    img_path.display(),
                    img.width,
                    img.height,
                    layout.w,
                    layout.h
                )));
            }
            pairs.push(SamplePair { layout, rgb: img.data });
        }
        Ok(Dataset { spec, pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Stacked one-hot layouts and images of `indices`.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor4<f32>, Tensor4<f32>)> {
        let lay: Vec<Tensor4<f32>> = indices.iter().map(|&i| self.pairs[i].layout.one_hot()).collect();
        let img: Vec<Tensor4<f32>> = indices.iter().map(|&i| self.pairs[i].image()).collect();
        Ok((Tensor4::stack(&lay.iter().collect::<Vec<_>>())?, Tensor4::stack(&img.iter().collect::<Vec<_>>())?))
    }

    /// Batch of global step `step` under the seeded epoch shuffle.
    pub fn batch_for_step(&self, seed: u64, step: usize, batch: usize) -> Result<(Tensor4<f32>, Tensor4<f32>)> {
        self.batch(&batch_for_step(seed, step, self.len(), batch)?)
    }
}
