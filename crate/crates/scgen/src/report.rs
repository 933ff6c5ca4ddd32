//! CSV and heatmap outputs of the analysis and evaluation commands.

use std::path::Path;

use scgen_core::eval::{ClassVectorStats, MetricReport};

use crate::error::{Error, Result};
use crate::pnm::Image;

pub const SIMILARITY_CSV: &str = "similarity.csv";
pub const SIMILARITY_PGM: &str = "similarity.pgm";
pub const METRICS_CSV: &str = "metrics.csv";
pub const CLASS_ACCURACY_CSV: &str = "class_accuracy.csv";

/// Gray level of a cosine similarity; absent entries map to 0.
pub fn heat(cos: Option<f64>) -> u8 {
    cos.map_or(0, |c| ((c.clamp(-1.0, 1.0) + 1.0) / 2.0 * 255.0).round() as u8)
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn finish(mut w: csv::Writer<std::fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

/// `similarity.csv` with one row per ordered class pair (`absent` when a
/// class has no pixels) and `similarity.pgm`, row-major in class order.
pub fn write_similarity(stats: &ClassVectorStats, dir: &Path) -> Result<()> {
    let c = stats.counts.len();
    let path = dir.join(SIMILARITY_CSV);
    let mut w = writer(&path)?;
    w.write_record(["class_i", "class_j", "cosine"])?;
    for i in 0..c {
        for j in 0..c {
            let cos = stats.get(i, j).map_or_else(|| "absent".to_string(), |v| v.to_string());
            w.write_record([i.to_string(), j.to_string(), cos])?;
        }
    }
    finish(w, &path)?;
    let pixels = (0..c).flat_map(|i| (0..c).map(move |j| (i, j))).map(|(i, j)| heat(stats.get(i, j))).collect();
    Image::gray(c, c, pixels).save(&dir.join(SIMILARITY_PGM))
}

/// `metrics.csv` (`step,frechet,accuracy`; the step column holds the tag) and `class_accuracy.csv`
/// (`step,class,accuracy`, empty for classes without pixels).
pub fn write_metrics(rows: &[MetricReport], dir: &Path) -> Result<()> {
    let path = dir.join(METRICS_CSV);
    let mut w = writer(&path)?;
    w.write_record(["step", "frechet", "accuracy"])?;
    for r in rows {
        w.write_record([r.tag.clone(), r.frechet.to_string(), r.pixel_accuracy.to_string()])?;
    }
    finish(w, &path)?;
    let path = dir.join(CLASS_ACCURACY_CSV);
    let mut w = writer(&path)?;
    w.write_record(["step", "class", "accuracy"])?;
    for r in rows {
        for (c, a) in r.per_class.iter().enumerate() {
            w.write_record([r.tag.clone(), c.to_string(), a.map_or_else(String::new, |v| v.to_string())])?;
        }
    }
    finish(w, &path)
}
