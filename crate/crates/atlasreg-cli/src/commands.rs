//! Subcommand implementations.

use std::path::{Path, PathBuf};

use clap::Args;

use atlasreg::experiment::{
    self, curves_to_csv, evaluate, train, Dataset, ModelKind, SweepCell, TrainedModel,
};
use atlasreg::geometry::WarpMode;
use atlasreg::io;
use atlasreg::synthgen::{self, Variant};
use atlasreg::{Error, Result};

use crate::config::{self, Preset};
use crate::plot;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum VariantArg {
    Plain,
    Background,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ModelArg {
    TwoStage,
    DenseOnly,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::TwoStage => ModelKind::TwoStage,
            ModelArg::DenseOnly => ModelKind::DenseOnly,
        }
    }
}

#[derive(Args)]
pub struct GenArgs {
    /// Run configuration JSON; defaults come from the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long, value_enum, default_value = "plain")]
    variant: VariantArg,
    /// Output dataset directory (default: <data root>/<variant>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the generation and training seeds.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

pub fn run_gen(args: GenArgs) -> Result<()> {
    let cfg = config::resolve(args.config.as_deref(), args.preset, args.seed)?;
    let variant = match args.variant {
        VariantArg::Plain => Variant::Plain,
        VariantArg::Background => Variant::Background,
    };
    let out = args.out.unwrap_or_else(|| {
        config::data_root().join(match variant {
            Variant::Plain => "plain",
            Variant::Background => "background",
        })
    });
    synthgen::generate_dataset(&cfg.synth, variant, &out, args.jobs)?;
    config::echo_config(&out, &cfg)?;
    println!("{}", out.join("manifest.json").display());
    Ok(())
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Dataset directory (holding manifest.json).
    #[arg(long)]
    data: PathBuf,
    /// Run output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    /// Print the mean loss of each epoch while training.
    #[arg(long, default_value_t = false)]
    verbose: bool,
}

pub fn run_train(args: TrainArgs) -> Result<()> {
    let mut cfg = config::resolve(args.config.as_deref(), args.preset, args.seed)?;
    if let Some(model) = args.model {
        cfg.train.model_kind = model.into();
    }
    let ds = Dataset::open(&args.data)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    config::echo_config(&args.out, &cfg)?;

    let mut hook = |epoch: usize, mean_loss: f64, _m: &TrainedModel| {
        if args.verbose {
            eprintln!("epoch {:4}  mean loss {mean_loss:.6}", epoch + 1);
        }
    };
    let (model, curves) = train(&cfg.network, &cfg.train, &cfg.loss, &ds, Some(&mut hook))?;

    let ckpt = args.out.join("checkpoint.ckpt");
    model.save(&ckpt)?;
    std::fs::write(args.out.join("curves.csv"), curves_to_csv(&curves))
        .map_err(|e| Error::io(&args.out, e))?;
    println!("{}", ckpt.display());
    Ok(())
}

#[derive(Args)]
pub struct RegisterArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Target image (.nii.gz).
    #[arg(long)]
    image: PathBuf,
    /// Dataset directory providing atlas.nii.gz and mask.nii.gz.
    #[arg(long)]
    atlas_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "two-stage")]
    model: ModelArg,
}

pub fn run_register(args: RegisterArgs) -> Result<()> {
    let model = TrainedModel::load(&args.checkpoint)?;
    let image = io::nifti::read_image(&args.image)?;
    let atlas = io::nifti::read_image(&args.atlas_dir.join("atlas.nii.gz"))?;
    let mask = io::nifti::read_mask(&args.atlas_dir.join("mask.nii.gz"))?;
    if image.rank() != model.config().rank {
        return Err(Error::invalid(format!(
            "image rank {} does not match checkpoint rank {}",
            image.rank(),
            model.config().rank
        )));
    }
    // Composed warp for reported outputs.
    let r = model.infer(args.model.into(), &image, &atlas, &mask, WarpMode::Composed)?;

    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    io::nifti::write_image(&args.out.join("warped_final.nii.gz"), &r.warped_final)?;
    io::nifti::write_image(&args.out.join("warped_affine.nii.gz"), &r.warped_affine)?;
    io::nifti::write_image(
        &args.out.join("warped_segmented.nii.gz"),
        &r.warped_segmented,
    )?;
    io::nifti::write_field(&args.out.join("field.nii.gz"), &r.field)?;
    io::write_json(&args.out.join("affine.json"), &r.affine)?;
    println!("{}", args.out.display());
    Ok(())
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, value_enum, default_value = "two-stage")]
    model: ModelArg,
    /// Output CSV path (default: stdout only).
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run_eval(args: EvalArgs) -> Result<()> {
    let model = TrainedModel::load(&args.checkpoint)?;
    let ds = Dataset::open(&args.data)?;
    let report = evaluate(&model, args.model.into(), &ds, &args.split)?;

    let mut csv = String::from("split,sample,tre\n");
    for (i, v) in report.per_sample.iter().enumerate() {
        csv.push_str(&format!("{},{},{}\n", report.split, i, v));
    }
    csv.push_str(&format!(
        "{},mean,{}\n{},std,{}\n",
        report.split, report.mean, report.split, report.std
    ));
    if let Some(out) = &args.out {
        if let Some(parent) = out.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(out, &csv).map_err(|e| Error::io(out, e))?;
    }
    println!(
        "split {}: tre_mean {:.4} tre_std {:.4} (n = {})",
        report.split,
        report.mean,
        report.std,
        report.per_sample.len()
    );
    Ok(())
}

#[derive(Args)]
pub struct SweepArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated diffusion lambdas.
    #[arg(long, value_delimiter = ',', default_value = "0.2,0.8")]
    lambda_diffusion: Vec<f64>,
    /// Comma-separated scaling lambdas.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    lambda_scaling: Vec<f64>,
    /// Model kinds to include in the grid.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "two-stage")]
    models: Vec<ModelArg>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

pub fn run_sweep(args: SweepArgs) -> Result<()> {
    let cfg = config::resolve(args.config.as_deref(), args.preset, args.seed)?;
    let ds = Dataset::open(&args.data)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    config::echo_config(&args.out, &cfg)?;

    let mut cells = Vec::new();
    for model in &args.models {
        for &ld in &args.lambda_diffusion {
            for &ls in &args.lambda_scaling {
                cells.push(SweepCell {
                    model_kind: (*model).into(),
                    lambda_diffusion: ld,
                    lambda_scaling: ls,
                });
            }
        }
    }
    let runs_dir = args.out.join("runs");
    let table = experiment::sweep(
        &cells,
        &cfg.network,
        &cfg.train,
        &cfg.loss,
        &ds,
        args.jobs,
        Some(&runs_dir),
    )?;
    let csv_path = args.out.join("sweep.csv");
    std::fs::write(&csv_path, table.to_csv()).map_err(|e| Error::io(&csv_path, e))?;
    println!("{}", csv_path.display());
    Ok(())
}

#[derive(Args)]
pub struct ReportArgs {
    /// Run directory holding curves.csv and/or sweep.csv (and runs/<cell>/).
    #[arg(long)]
    run: PathBuf,
    /// Output directory for plots and tables (default: <run>/report).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn curve_csvs(run: &Path) -> Vec<(String, PathBuf)> {
    let mut found = Vec::new();
    if run.join("curves.csv").is_file() {
        found.push(("run".to_string(), run.join("curves.csv")));
    }
    let runs = run.join("runs");
    if runs.is_dir() {
        if let Ok(entries) = std::fs::read_dir(&runs) {
            let mut dirs: Vec<PathBuf> = entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.join("curves.csv").is_file())
                .collect();
            dirs.sort();
            for d in dirs {
                let name = d.file_name().unwrap().to_string_lossy().to_string();
                found.push((name, d.join("curves.csv")));
            }
        }
    }
    found
}

pub fn run_report(args: ReportArgs) -> Result<()> {
    let out = args.out.unwrap_or_else(|| args.run.join("report"));
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;

    let curves = curve_csvs(&args.run);
    let sweep_csv = args.run.join("sweep.csv");
    if curves.is_empty() && !sweep_csv.is_file() {
        return Err(Error::invalid(format!(
            "nothing to report under {}",
            args.run.display()
        )));
    }

    for (name, csv) in &curves {
        let png = out.join(format!("{name}_loss.png"));
        plot::render_loss_curves(csv, &png)?;
        println!("{}", png.display());
    }

    if sweep_csv.is_file() {
        let table = std::fs::read_to_string(&sweep_csv).map_err(|e| Error::io(&sweep_csv, e))?;
        let summary = plot::summarize_sweep(&table);
        let path = out.join("summary.txt");
        std::fs::write(&path, summary).map_err(|e| Error::io(&path, e))?;
        println!("{}", path.display());
    }
    Ok(())
}
