//! `dewarp`: restoration, mesh fitting, synthesis, evaluation and β sweeps.
//!
//! Exit codes: 0 success, 1 usage or input error, 2 numerical or geometry
//! failure. Logs go to standard error; results go to files only.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use dewarp_core::deform::{apply_deformation, random_mesh, DeformationSpec};
use dewarp_core::fitloss::{coarse_to_fine_dewarp, write_loss_trace, FitConfig};
use dewarp_core::fourier::{check_beta, fourier_convert_channels, Blank, FourierConfig, BETA_RESTORE, BETA_TRAIN};
use dewarp_core::image::{load_image, save_image, to_grayscale, write_atomically};
use dewarp_core::metrics::{cer, evaluate_corpus, load_manifest, ms_ssim};
use dewarp_core::{Error, ImageBuf};
use rayon::prelude::*;
use serde::Serialize;

const DEFAULT_BETAS: [f64; 5] = [0.003, 0.005, 0.008, 0.01, 0.02];

#[derive(Parser, Debug)]
#[command(name = "dewarp", version, about = "Document dewarping by thin-plate-spline mesh fitting")]
struct Cli {
    /// Worker threads; 0 lets the pool decide.
    #[arg(long, global = true, env = "DEWARP_THREADS", default_value_t = 0)]
    threads: usize,

    /// Log level for standard error (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Photometric restoration with the Fourier converter.
    Restore {
        input: PathBuf,
        output: PathBuf,
        #[arg(long, default_value_t = BETA_RESTORE)]
        beta: f64,
        #[command(flatten)]
        blank: BlankArg,
    },
    /// Fit a mesh that dewarps INPUT onto the flat TARGET.
    Fit(FitArgs),
    /// Warp a flat image by a seeded random mesh.
    Synth {
        flat: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score dewarped images listed in a JSON manifest.
    Eval {
        manifest: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Restore INPUT at several β values and tabulate the results.
    SweepBeta {
        input: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Comma-separated β values.
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_BETAS)]
        betas: Vec<f64>,
        #[arg(long)]
        report: PathBuf,
        /// Directory for the restored images; defaults to the report's.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Directory holding OCR output named `restored_<beta>.txt`.
        #[arg(long, requires = "reference_text")]
        ocr_dir: Option<PathBuf>,
        #[arg(long)]
        reference_text: Option<PathBuf>,
        #[command(flatten)]
        blank: BlankArg,
    },
}

#[derive(Args, Debug)]
struct BlankArg {
    /// Blank paper: an intensity in [0, 1] or an image path.
    #[arg(long, default_value = "0.96")]
    blank: String,
}

impl BlankArg {
    fn resolve(&self) -> anyhow::Result<Blank> {
        match self.blank.parse::<f64>() {
            Ok(v) => Ok(Blank::Uniform(v)),
            Err(_) => {
                let p = PathBuf::from(&self.blank);
                require_file(&p)?;
                Ok(Blank::File(p))
            }
        }
    }
}

#[derive(Args, Debug)]
struct FitArgs {
    input: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Mesh shape as ROWSxCOLS.
    #[arg(long, default_value = "9x9", value_parser = parse_grid)]
    grid: (usize, usize),
    #[arg(long, default_value_t = 0.5)]
    lambda: f64,
    /// Converter β used inside the loss.
    #[arg(long, default_value_t = BETA_TRAIN)]
    beta: f64,
    /// Converter β for the restored output.
    #[arg(long, default_value_t = BETA_RESTORE)]
    restore_beta: f64,
    #[arg(long, default_value_t = 400)]
    iters_coarse: usize,
    #[arg(long, default_value_t = 200)]
    iters_refine: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 384)]
    working_size: usize,
    #[arg(long)]
    no_mutual: bool,
    #[arg(long)]
    no_fourier: bool,
    #[arg(long)]
    no_refine: bool,
}

impl FitArgs {
    fn config(&self) -> FitConfig {
        FitConfig {
            grid: self.grid,
            lambda: self.lambda,
            beta_train: self.beta,
            iters_coarse: self.iters_coarse,
            iters_refine: self.iters_refine,
            working_size: self.working_size,
            seed: self.seed,
            use_mutual: !self.no_mutual,
            use_fourier: !self.no_fourier,
            use_refine: !self.no_refine,
            ..FitConfig::default()
        }
    }
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (r, c) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected ROWSxCOLS, got {s:?}"))?;
    let r: usize = r.trim().parse().map_err(|_| format!("bad row count in {s:?}"))?;
    let c: usize = c.trim().parse().map_err(|_| format!("bad column count in {s:?}"))?;
    Ok((r, c))
}

fn require_file(p: &Path) -> anyhow::Result<()> {
    if !p.is_file() {
        bail!(Error::Argument(format!("{}: no such file", p.display())));
    }
    Ok(())
}

fn ensure_dir(p: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn restore(input: &Path, output: &Path, beta: f64, blank: &BlankArg) -> anyhow::Result<()> {
    check_beta(beta)?;
    require_file(input)?;
    let cfg = FourierConfig::new(beta, blank.resolve()?)?;
    let img = load_image(input)?;
    save_image(&fourier_convert_channels(&img, &cfg)?, output)?;
    log::info!("restored {} -> {}", input.display(), output.display());
    Ok(())
}

fn fit(args: &FitArgs) -> anyhow::Result<()> {
    let cfg = args.config();
    cfg.validate()?;
    check_beta(args.restore_beta)?;
    require_file(&args.input)?;
    require_file(&args.target)?;
    ensure_dir(&args.out_dir)?;
    let input = load_image(&args.input)?;
    let target = load_image(&args.target)?;
    let out = coarse_to_fine_dewarp(&input, &target, &cfg)?;
    if !out.converged {
        log::warn!("iteration budget exhausted before convergence");
    }
    let dir = &args.out_dir;
    save_image(&out.dewarped, dir.join("dewarped.png"))?;
    let restore_cfg = FourierConfig::new(args.restore_beta, Blank::default())?;
    save_image(&fourier_convert_channels(&out.dewarped, &restore_cfg)?, dir.join("restored.png"))?;
    write_text(&dir.join("mesh_coarse.json"), &out.mesh_coarse.to_json()?)?;
    write_text(&dir.join("mesh_refined.json"), &out.mesh_refined.to_json()?)?;
    write_loss_trace(&dir.join("loss.csv"), &out.loss_trace)?;
    log::info!("fit written to {}", dir.display());
    Ok(())
}

fn synth(flat: &Path, out_dir: &Path, sigma: f64, seed: u64) -> anyhow::Result<()> {
    require_file(flat)?;
    ensure_dir(out_dir)?;
    let img = load_image(flat)?;
    let mesh = random_mesh(&DeformationSpec::new(seed, sigma), img.width(), img.height())?;
    save_image(&apply_deformation(&img, &mesh)?, out_dir.join("warped.png"))?;
    write_text(&out_dir.join("mesh.json"), &mesh.to_json()?)?;
    Ok(())
}

fn eval(manifest: &Path, report: &Path) -> anyhow::Result<()> {
    require_file(manifest)?;
    let pairs = load_manifest(manifest)?;
    let out = evaluate_corpus(&pairs);
    for img in out.images.iter().filter(|r| r.error.is_some()) {
        log::warn!("{}: {}", img.name, img.error.as_deref().unwrap_or_default());
    }
    out.write(report)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct SweepRow {
    beta: f64,
    output: PathBuf,
    /// Against the grayscale target; absent when sizes differ or are too small.
    ms_ssim: Option<f64>,
    cer: Option<f64>,
}

#[derive(Debug, Serialize)]
struct SweepReport {
    input: PathBuf,
    target: PathBuf,
    rows: Vec<SweepRow>,
}

struct Sweep<'a> {
    input: &'a Path,
    target: &'a Path,
    betas: &'a [f64],
    report: &'a Path,
    out_dir: Option<&'a Path>,
    ocr_dir: Option<&'a Path>,
    reference_text: Option<&'a Path>,
    blank: &'a BlankArg,
}

fn sweep_beta(s: Sweep) -> anyhow::Result<()> {
    for &b in s.betas {
        check_beta(b)?;
    }
    require_file(s.input)?;
    require_file(s.target)?;
    let out_dir = match s.out_dir {
        Some(d) => d.to_path_buf(),
        None => s.report.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    if !out_dir.as_os_str().is_empty() {
        ensure_dir(&out_dir)?;
    }
    let reference = match s.reference_text {
        Some(p) => {
            require_file(p)?;
            Some(std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
        }
        None => None,
    };
    let blank = s.blank.resolve()?;
    let input = load_image(s.input)?;
    let target = to_grayscale(&load_image(s.target)?);

    let rows = s
        .betas
        .par_iter()
        .map(|&beta| -> dewarp_core::Result<SweepRow> {
            let restored = fourier_convert_channels(&input, &FourierConfig::new(beta, blank.clone())?)?;
            let output = out_dir.join(format!("restored_{beta}.png"));
            save_image(&restored, &output)?;
            let ms_ssim = score(&to_grayscale(&restored), &target);
            let cer = match (s.ocr_dir, &reference) {
                (Some(dir), Some(r)) => {
                    let path = dir.join(format!("restored_{beta}.txt"));
                    match std::fs::read_to_string(&path) {
                        Ok(hyp) => Some(cer(&hyp, r)?),
                        Err(_) => {
                            log::warn!("no OCR text at {}", path.display());
                            None
                        }
                    }
                }
                _ => None,
            };
            Ok(SweepRow { beta, output, ms_ssim, cer })
        })
        .collect::<dewarp_core::Result<Vec<_>>>()?;
    let report = SweepReport {
        input: s.input.to_path_buf(),
        target: s.target.to_path_buf(),
        rows,
    };
    write_text(s.report, &serde_json::to_string_pretty(&report)?)?;
    Ok(())
}

fn score(a: &ImageBuf, b: &ImageBuf) -> Option<f64> {
    if !a.same_shape(b) {
        return None;
    }
    ms_ssim(a, b).ok()
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    write_atomically(path, |f| std::io::Write::write_all(f, text.as_bytes()))?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Restore { input, output, beta, blank } => restore(input, output, *beta, blank),
        Command::Fit(args) => fit(args),
        Command::Synth { flat, out_dir, sigma, seed } => synth(flat, out_dir, *sigma, *seed),
        Command::Eval { manifest, report } => eval(manifest, report),
        Command::SweepBeta {
            input,
            target,
            betas,
            report,
            out_dir,
            ocr_dir,
            reference_text,
            blank,
        } => sweep_beta(Sweep {
            input,
            target,
            betas,
            report,
            out_dir: out_dir.as_deref(),
            ocr_dir: ocr_dir.as_deref(),
            reference_text: reference_text.as_deref(),
            blank,
        }),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_numerical() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .target(env_logger::Target::Stderr)
        .init();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            log::warn!("thread pool: {e}");
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
