//! Command-line front end: single-pair registration, metric evaluation,
//! batch cohort analysis, and phantom generation. Every command is a thin
//! shell over the library so scripted runs and direct library calls produce
//! identical artifacts. Exit codes: 0 success, 2 validation failure, 3
//! registration divergence.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use voxreg::cohort;
use voxreg::error::{Error, Result};
use voxreg::evaluation::{MetricsReport, RegionTable};
use voxreg::nifti;
use voxreg::phantom::{
    deformed_timepoint, generate_phantom, generate_smooth_deformation, shell_region_table,
    simulate_growth, PhantomSpec,
};
use voxreg::pipeline::{run_cohort, CohortRunConfig};
use voxreg::registration::run_preset;
use voxreg::transforms::{resample_to_spacing, warp_image, warp_labels};

#[derive(Parser)]
#[command(
    name = "voxreg",
    version,
    about = "Deformable volume registration and longitudinal cohort analysis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Register one moving volume onto one fixed volume.
    Register(RegisterArgs),
    /// Score a registered pair's segmentations and field.
    Evaluate(EvaluateArgs),
    /// Register and analyze every within-subject pair of a manifest.
    Cohort(CohortArgs),
    /// Generate a synthetic phantom dataset.
    Phantom(PhantomArgs),
}

#[derive(Args)]
struct RegisterArgs {
    /// Fixed (target) volume.
    #[arg(long)]
    fixed: PathBuf,
    /// Moving volume.
    #[arg(long)]
    moving: PathBuf,
    /// Run-configuration TOML; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for field.nii.gz, warped.nii.gz, loss_trace.csv,
    /// timings.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Fixed segmentation.
    #[arg(long = "fixed-seg")]
    fixed_seg: PathBuf,
    /// Moving segmentation (warped internally through the field).
    #[arg(long = "moving-seg")]
    moving_seg: PathBuf,
    /// Displacement field from registration.
    #[arg(long)]
    field: PathBuf,
    /// Region-table CSV; the built-in table when omitted.
    #[arg(long)]
    regions: Option<PathBuf>,
    /// Output metrics CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CohortArgs {
    /// Scan manifest CSV (subject_id, age_years, sex, path[, seg_path][, exclude]).
    #[arg(long)]
    manifest: PathBuf,
    /// Run-configuration TOML; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Worker count; beats the config file and VOXREG_WORKERS.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory; falls back to the config file's output_dir.
    #[arg(long = "out-dir")]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct PhantomArgs {
    /// Grid size: one value for a cube or three comma-separated.
    #[arg(long, default_value = "64")]
    dims: String,
    /// Number of nested shell regions.
    #[arg(long = "region-count", default_value_t = 6)]
    region_count: usize,
    /// Noise standard deviation as a fraction of the intensity range.
    #[arg(long = "noise-sigma", default_value_t = 0.02)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also emit a smoothly deformed timepoint with this peak displacement
    /// (voxels) and the ground-truth field.
    #[arg(long = "deform-max")]
    deform_max: Option<f64>,
    /// Smoothness of the random deformation, in voxels.
    #[arg(long = "deform-sigma", default_value_t = 6.0)]
    deform_sigma: f64,
    /// Also emit a grown timepoint: which shell region expands.
    #[arg(long = "growth-region")]
    growth_region: Option<u32>,
    /// Volume scale of the grown region.
    #[arg(long = "growth-scale")]
    growth_scale: Option<f64>,
    /// Output directory.
    #[arg(long = "out-dir")]
    out_dir: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Diverged { .. } => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Register(args) => cmd_register(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Cohort(args) => cmd_cohort(args),
        Command::Phantom(args) => cmd_phantom(args),
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn cmd_register(args: RegisterArgs) -> Result<()> {
    let config = RunConfig::load_or_default(args.config.as_deref())?;
    let iso = [config.resample_mm; 3];
    let fixed = resample_to_spacing(&nifti::load_image(&args.fixed)?, iso)?;
    let moving = resample_to_spacing(&nifti::load_image(&args.moving)?, iso)?;

    let result = run_preset(&fixed, &moving, config.preset, &config.preset_configs())?;

    ensure_dir(&args.out)?;
    nifti::save_displacement_field(&result.field, args.out.join("field.nii.gz"))?;
    nifti::save_image(&warp_image(&moving, &result.field)?, args.out.join("warped.nii.gz"))?;

    let trace_path = args.out.join("loss_trace.csv");
    let mut trace = csv::Writer::from_path(&trace_path)
        .map_err(|e| Error::InvalidInput(format!("{}: {e}", trace_path.display())))?;
    trace
        .write_record(["iteration", "loss", "similarity", "regularizer"])
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    for (i, parts) in result.loss_trace.iter().enumerate() {
        trace
            .write_record([
                i.to_string(),
                format!("{}", parts.loss),
                format!("{}", parts.similarity),
                format!("{}", parts.regularizer),
            ])
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
    }
    trace.flush().map_err(|e| Error::io(&trace_path, e))?;

    let timings = serde_json::json!({
        "wall_seconds": result.wall_time,
        "stages": result.stage_seconds,
    });
    let timings_path = args.out.join("timings.json");
    std::fs::write(&timings_path, serde_json::to_string_pretty(&timings).expect("timing json"))
        .map_err(|e| Error::io(&timings_path, e))?;

    println!(
        "registered {} -> {} in {:.1}s; artifacts in {}",
        args.moving.display(),
        args.fixed.display(),
        result.wall_time,
        args.out.display()
    );
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let table = match &args.regions {
        Some(path) => RegionTable::from_file(path)?,
        None => RegionTable::default_table(),
    };
    let fixed_seg = nifti::load_labels(&args.fixed_seg)?;
    let moving_seg = nifti::load_labels(&args.moving_seg)?;
    let field = nifti::load_displacement_field(&args.field)?;
    let moved_seg = warp_labels(&moving_seg, &field)?;
    let report = MetricsReport::compute(&fixed_seg, &moved_seg, &field, &table)?;
    if report.negative_jd_pct > 0.0 {
        eprintln!(
            "warning: field folds over {:.4}% of the scored regions; |ln JD| columns are NaN",
            report.negative_jd_pct
        );
    }
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    let mut writer = csv::Writer::from_path(&args.out)
        .map_err(|e| Error::InvalidInput(format!("{}: {e}", args.out.display())))?;
    writer
        .write_record(MetricsReport::csv_header(&table))
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    writer
        .write_record(report.csv_row().iter().map(|v| format!("{v}")))
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    writer.flush().map_err(|e| Error::io(&args.out, e))?;
    println!(
        "mean dice {:.4}, weighted dice {:.4}, negative JD {:.4}%",
        report.mean_dice, report.weighted_dice, report.negative_jd_pct
    );
    Ok(())
}

fn cmd_cohort(args: CohortArgs) -> Result<()> {
    let config = RunConfig::load_or_default(args.config.as_deref())?;
    let out_dir = args
        .out_dir
        .or_else(|| config.output_dir.clone())
        .ok_or_else(|| {
            Error::InvalidInput("no output directory: pass --out-dir or set output_dir".into())
        })?;
    let records = cohort::read_manifest_file(&args.manifest)?;
    cohort::validate_paths(&records)?;
    let run = CohortRunConfig {
        preset: config.preset,
        configs: config.preset_configs(),
        table: config.region_table()?,
        workers: config.effective_workers(args.workers)?,
        resample_mm: Some(config.resample_mm),
    };
    let summary = run_cohort(&records, &run, &out_dir)?;
    println!(
        "cohort complete: {}/{} pairs succeeded in {:.1}s; artifacts in {}",
        summary.succeeded,
        summary.outcomes.len(),
        summary.total_seconds,
        out_dir.display()
    );
    Ok(())
}

fn parse_dims(text: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = text
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::InvalidInput(format!("bad dims {text:?}")))?;
    match parts.as_slice() {
        [n] => Ok([*n; 3]),
        [x, y, z] => Ok([*x, *y, *z]),
        _ => Err(Error::InvalidInput(format!(
            "dims need one or three values, got {text:?}"
        ))),
    }
}

fn cmd_phantom(args: PhantomArgs) -> Result<()> {
    let spec = PhantomSpec {
        dims: parse_dims(&args.dims)?,
        region_count: args.region_count,
        noise_sigma: args.noise_sigma,
        seed: args.seed,
    };
    let phantom = generate_phantom(&spec)?;
    ensure_dir(&args.out_dir)?;
    nifti::save_image(&phantom.image, args.out_dir.join("image.nii.gz"))?;
    nifti::save_labels(&phantom.labels, args.out_dir.join("labels.nii.gz"))?;
    let regions_path = args.out_dir.join("regions.csv");
    std::fs::write(&regions_path, shell_region_table(spec.region_count).to_csv_string())
        .map_err(|e| Error::io(&regions_path, e))?;

    let landmarks_path = args.out_dir.join("landmarks.csv");
    let mut landmarks = csv::Writer::from_path(&landmarks_path)
        .map_err(|e| Error::InvalidInput(format!("{}: {e}", landmarks_path.display())))?;
    landmarks
        .write_record(["id", "x", "y", "z"])
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    for lm in &phantom.landmarks {
        landmarks
            .write_record([
                lm.id.to_string(),
                format!("{}", lm.position[0]),
                format!("{}", lm.position[1]),
                format!("{}", lm.position[2]),
            ])
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
    }
    landmarks.flush().map_err(|e| Error::io(&landmarks_path, e))?;

    if let Some(max_disp) = args.deform_max {
        let field = generate_smooth_deformation(
            &phantom.image.geometry,
            max_disp,
            args.deform_sigma,
            args.seed.wrapping_add(1),
        )?;
        let (image, labels) = deformed_timepoint(&phantom, &field, args.seed.wrapping_add(2))?;
        nifti::save_image(&image, args.out_dir.join("deformed.nii.gz"))?;
        nifti::save_labels(&labels, args.out_dir.join("deformed_labels.nii.gz"))?;
        nifti::save_displacement_field(&field, args.out_dir.join("truth_field.nii.gz"))?;
    }

    match (args.growth_region, args.growth_scale) {
        (Some(region), Some(scale)) => {
            let growth = simulate_growth(&phantom, region, scale, args.seed.wrapping_add(3))?;
            nifti::save_image(&growth.image, args.out_dir.join("grown.nii.gz"))?;
            nifti::save_labels(&growth.labels, args.out_dir.join("grown_labels.nii.gz"))?;
            nifti::save_displacement_field(
                &growth.field,
                args.out_dir.join("growth_field.nii.gz"),
            )?;
        }
        (None, None) => {}
        _ => {
            return Err(Error::InvalidInput(
                "--growth-region and --growth-scale go together".into(),
            ))
        }
    }

    println!("phantom written to {}", args.out_dir.display());
    Ok(())
}
