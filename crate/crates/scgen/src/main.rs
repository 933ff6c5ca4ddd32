use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use scgen::checkpoint::Checkpoint;
use scgen::config::ExperimentConfig;
use scgen::dataset::{load_layout, write_dataset, Dataset};
use scgen::error::{write_file, Error, Result};
use scgen::{report, run};
use scgen_core::gradcheck;
use scgen_core::synthdata::SceneSpec;

#[derive(Parser)]
#[command(name = "scgen", version, about = "Semantic image synthesis with spatially conditional operators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a paired synthetic dataset.
    MakeData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "families4")]
        preset: String,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Overwrite pairs in a non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a generator and discriminator.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Render images for one layout.
    Synth {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        layout: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Number of noise draws; several samples are written as `{stem}_{k}.ppm`.
        #[arg(long, default_value_t = 1)]
        samples: usize,
    },
    /// Cosine similarity of per-class mean semantic vectors.
    Analyze {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Pyramid level, 1 = coarsest; defaults to the finest.
        #[arg(long)]
        level: Option<usize>,
    },
    /// Fréchet distance and oracle pixel accuracy.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
}

fn prepare_out(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join(run::CONFIG_FILE), cfg.to_json().as_bytes())
}

fn sample_path(out: &Path, k: usize, total: usize) -> PathBuf {
    if total == 1 {
        return out.to_path_buf();
    }
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("sample");
    let ext = out.extension().and_then(|s| s.to_str()).unwrap_or("ppm");
    out.with_file_name(format!("{stem}_{k}.{ext}"))
}

fn execute(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::MakeData { out, preset, count, seed, force } => {
            let spec = match preset.as_str() {
                "families4" => SceneSpec::families4(seed),
                other => return Err(Error::Usage(format!("unknown dataset preset `{other}`; expected families4"))),
            };
            write_dataset(&out, &spec, count, force)?;
            println!("wrote {count} pairs to {}", out.display());
        }
        Command::Train { config, data, out, resume, quiet } => {
            let cfg = ExperimentConfig::load(&config)?;
            let data = Dataset::load(&data)?;
            let opts = run::TrainOptions { resume, verbose: !quiet, ..Default::default() };
            let summary = run::train(&cfg, &data, &out, &opts)?;
            println!("trained to step {}; final checkpoint {}", summary.trainer.step, summary.final_checkpoint.display());
        }
        Command::Synth { ckpt, layout, seed, out, samples } => {
            if samples == 0 {
                return Err(Error::Usage("samples must be ≥ 1".into()));
            }
            let (cfg, mut trainer) = run::from_checkpoint(&Checkpoint::load(&ckpt)?)?;
            let layout = load_layout(&layout, cfg.generator.c_sem)?;
            for (k, img) in run::synthesize(&mut trainer.generator, &layout, seed, samples)?.into_iter().enumerate() {
                img.save(&sample_path(&out, k, samples))?;
            }
        }
        Command::Analyze { ckpt, data, out, level } => {
            let (cfg, mut trainer) = run::from_checkpoint(&Checkpoint::load(&ckpt)?)?;
            let data = Dataset::load(&data)?;
            prepare_out(&out, &cfg)?;
            let layouts: Vec<_> = data.pairs.iter().map(|p| p.layout.clone()).collect();
            let stats = run::class_vectors(&mut trainer.generator, &layouts, level)?;
            report::write_similarity(&stats, &out)?;
            for (i, row) in stats.cosine.iter().enumerate() {
                let cells: Vec<String> = row.iter().map(|c| c.map_or("  absent".into(), |v| format!("{v:8.5}"))).collect();
                println!("class {i}: {}", cells.join(" "));
            }
        }
        Command::Eval { ckpt, data, out } => {
            let ck = Checkpoint::load(&ckpt)?;
            let (cfg, mut trainer) = run::from_checkpoint(&ck)?;
            let data = Dataset::load(&data)?;
            prepare_out(&out, &cfg)?;
            let model = run::evaluate(&mut trainer.generator, &trainer.features, &data, &ck.step.to_string())?;
            let own = run::self_metrics(&trainer.features, &data)?;
            for r in [&model, &own] {
                println!("{:>8}  frechet {:.6}  accuracy {:.4}", r.tag, r.frechet, r.pixel_accuracy);
            }
            report::write_metrics(&[model, own], &out)?;
        }
        Command::Gradcheck { seed, instances } => {
            let reports = gradcheck::run_suite(seed, instances, None)?;
            for r in &reports {
                println!("{}", gradcheck::format_report(r));
            }
            let failed: Vec<String> = reports
                .iter()
                .filter(|r| !r.passed())
                .map(|r| format!("{} ({:.3e})", r.op, r.max_rel_error))
                .collect();
            if !failed.is_empty() {
                eprintln!("error: gradient check failed for {}", failed.join(", "));
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
