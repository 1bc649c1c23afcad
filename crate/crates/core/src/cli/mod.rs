//! The `imls` command line: argument parsing, config files and the subcommands.

mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::fit::{fit_from, FitConfig, FitState};
use crate::geometry::{mesh_to_sdf, normalize_mesh, sample_surface};
use crate::io;
use crate::loss::LossWeights;
use crate::mesher::{extract_mesh_with, Coverage};
use crate::metrics::{evaluate_meshes, MetricOptions};
use crate::octree::{build_gt_octree, build_octree, generate_sdf_samples};
use crate::recon::reconstruct;

pub use config::{inject_config, parse_config};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "imls", version, about = "IMLS surface fitting, reconstruction, meshing and evaluation", args_override_self = true)]
pub struct Cli {
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// Flat `key = value` file; keys are long flag names, flags given on the command line win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Normalize a mesh and write its signed distance grid.
    Sdf(SdfArgs),
    /// Sample an oriented point cloud from a mesh surface.
    Sample(SampleArgs),
    /// Fit MLS points to a signed distance grid.
    Fit(FitArgs),
    /// Turn an oriented point cloud directly into MLS points.
    Recon(ReconArgs),
    /// Extract the zero level set of an MLS point file.
    Mesh(MeshArgs),
    /// Compare a predicted mesh against a reference.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SdfArgs {
    #[arg(long)]
    pub mesh: PathBuf,
    #[arg(long, default_value_t = 256)]
    pub res: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the normalized mesh.
    #[arg(long)]
    pub normalized_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub mesh: PathBuf,
    #[arg(long, default_value_t = 3000)]
    pub n: usize,
    /// Gaussian noise sigma relative to the longest bounding-box side.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Normalize the mesh into the unit cube first.
    #[arg(long)]
    pub normalize: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub sdf: PathBuf,
    /// Build the scaffold from this cloud instead of the distance grid.
    #[arg(long)]
    pub cloud: Option<PathBuf>,
    #[arg(long, default_value_t = 7)]
    pub depth: u32,
    /// MLS points per finest octant.
    #[arg(long, default_value_t = 1)]
    pub s: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Loss trace path (default: `<out>.trace`).
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 30)]
    pub coarse_epochs: usize,
    #[arg(long, default_value_t = 30)]
    pub fine_epochs: usize,
    /// Minibatch size; 0 takes full-batch steps.
    #[arg(long, default_value_t = crate::fit::DEFAULT_BATCH)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lambda_octree: f64,
    #[arg(long, default_value_t = 200.0)]
    pub lambda_sdf_coarse: f64,
    #[arg(long, default_value_t = 800.0)]
    pub lambda_sdf_fine: f64,
    #[arg(long, default_value_t = 0.05)]
    pub lambda_grad: f64,
    #[arg(long, default_value_t = 0.05)]
    pub lambda_repulsion: f64,
    #[arg(long, default_value_t = 10.0)]
    pub lambda_projection: f64,
    #[arg(long, default_value_t = 10.0)]
    pub lambda_radius: f64,
    #[arg(long, default_value_t = 5e-5)]
    pub weight_decay: f64,
}

#[derive(Debug, Args)]
pub struct ReconArgs {
    #[arg(long)]
    pub cloud: PathBuf,
    #[arg(long, default_value_t = crate::recon::DEFAULT_K)]
    pub k: usize,
    /// Depth of the host octants.
    #[arg(long, default_value_t = crate::recon::DEFAULT_HOST_DEPTH)]
    pub depth: u32,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MeshArgs {
    #[arg(long)]
    pub mls: PathBuf,
    #[arg(long, default_value_t = crate::mesher::DEFAULT_RESOLUTION)]
    pub res: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// March every cell instead of the narrow band.
    #[arg(long)]
    pub full_grid: bool,
    /// Write the evaluated band corners as a binary dump.
    #[arg(long)]
    pub dump: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, default_value_t = crate::metrics::DEFAULT_TAU)]
    pub tau: f64,
    #[arg(long, default_value_t = crate::metrics::DEFAULT_SAMPLES)]
    pub samples: usize,
    #[arg(long, default_value_t = crate::metrics::DEFAULT_SAMPLES)]
    pub iou_samples: usize,
    #[arg(long)]
    pub no_iou: bool,
    /// Print one `key=value` line instead of one pair per line.
    #[arg(long)]
    pub record: bool,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Diverged { .. } | Error::OutsideBand => EXIT_NUMERIC,
        _ => EXIT_INVALID,
    }
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run(args: Vec<OsString>, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> i32 {
    let args = match inject_config(&Cli::command(), args) {
        Ok(a) => a,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return EXIT_INVALID;
        }
    };
    let matches = match Cli::command().try_get_matches_from(&args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
            let _ = if e.use_stderr() { write!(err, "{}", e.render()) } else { write!(out, "{}", e.render()) };
            return code;
        }
    };
    let cli = Cli::from_arg_matches(&matches).expect("matches come from the same command");
    let mut header = format!("# imls {}\n# seed {}\n# threads {}\n", env!("CARGO_PKG_VERSION"), cli.seed, cli.threads);
    if let Some((name, found)) = matches.subcommand() {
        header.push_str(&format!("# command {name}\n"));
        let cmd = Cli::command();
        let sub = cmd.find_subcommand(name).expect("parsed subcommand exists");
        for arg in sub.get_arguments().chain(cmd.get_arguments()) {
            let id = arg.get_id().as_str();
            if let Ok(Some(vals)) = found.try_get_raw(id) {
                let vals: Vec<String> = vals.map(|v| v.to_string_lossy().into_owned()).collect();
                header.push_str(&format!("# config {}={}\n", id.replace('_', "-"), vals.join(",")));
            }
        }
    }
    let _ = err.write_all(header.as_bytes());
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build() {
        Ok(p) => p,
        Err(e) => {
            let _ = writeln!(err, "error: cannot start thread pool: {e}");
            return EXIT_INVALID;
        }
    };
    match pool.install(|| dispatch(&cli, out, err)) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cli: &Cli, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> Result<()> {
    match &cli.command {
        Command::Sdf(a) => cmd_sdf(a),
        Command::Sample(a) => cmd_sample(a, cli.seed),
        Command::Fit(a) => cmd_fit(a, cli.seed, err),
        Command::Recon(a) => cmd_recon(a),
        Command::Mesh(a) => cmd_mesh(a, err),
        Command::Eval(a) => cmd_eval(a, cli.seed, out),
    }
}

pub fn cmd_sdf(a: &SdfArgs) -> Result<()> {
    if a.res < 2 {
        return Err(Error::Invalid("resolution too small (need R >= 2)".into()));
    }
    let mesh = io::read_obj::<f64>(&a.mesh)?;
    let (norm, _) = normalize_mesh(&mesh)?;
    let grid = mesh_to_sdf(&norm, a.res)?;
    io::write_file(&a.out, &io::encode_sdf(&grid))?;
    if let Some(p) = &a.normalized_out {
        io::write_file(p, io::format_obj(&norm).as_bytes())?;
    }
    Ok(())
}

pub fn cmd_sample(a: &SampleArgs, seed: u64) -> Result<()> {
    let mut mesh = io::read_obj::<f64>(&a.mesh)?;
    if a.normalize {
        mesh = normalize_mesh(&mesh)?.0;
    }
    if !(a.noise >= 0.0 && a.noise.is_finite()) {
        return Err(Error::Invalid("noise must be a non-negative number".into()));
    }
    let cloud = sample_surface(&mesh, a.n, a.noise, seed)?;
    io::write_file(&a.out, io::format_cloud(&cloud).as_bytes())
}

pub fn fit_config(a: &FitArgs, seed: u64) -> FitConfig<f64> {
    FitConfig {
        points_per_octant: a.s,
        lr: a.lr,
        coarse_epochs: a.coarse_epochs,
        fine_epochs: a.fine_epochs,
        batch_size: (a.batch > 0).then_some(a.batch),
        seed,
        weights: LossWeights {
            octree: a.lambda_octree,
            sdf_coarse: a.lambda_sdf_coarse,
            sdf_fine: a.lambda_sdf_fine,
            grad: a.lambda_grad,
            repulsion: a.lambda_repulsion,
            projection: a.lambda_projection,
            radius: a.lambda_radius,
            weight_decay: a.weight_decay,
        },
        ..FitConfig::default()
    }
}

pub fn cmd_fit(a: &FitArgs, seed: u64, err: &mut (dyn Write + Send)) -> Result<()> {
    let cfg = fit_config(a, seed);
    cfg.validate()?;
    let sdf = io::read_sdf::<f64>(&a.sdf)?;
    let octree = match &a.cloud {
        Some(p) => build_octree(&io::read_cloud::<f64>(p)?, a.depth)?,
        None => build_gt_octree(&sdf, a.depth)?,
    };
    let samples = generate_sdf_samples(&sdf)?;
    let state = FitState::init(&octree, Some(&sdf), a.s, seed)?;
    let out = fit_from(&octree, &samples, state, &cfg, |r| {
        let _ = writeln!(err, "{}", r.trace_line());
    })?;
    let trace = a.trace.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".trace");
        p.into()
    });
    io::write_file(&trace, out.trace_text().as_bytes())?;
    io::write_file(&a.out, io::format_mls(&out.mls).as_bytes())?;
    out.require_converged()
}

pub fn cmd_recon(a: &ReconArgs) -> Result<()> {
    let cloud = io::read_cloud::<f64>(&a.cloud)?;
    let mls = reconstruct(&cloud, a.k, a.depth)?;
    io::write_file(&a.out, io::format_mls(&mls).as_bytes())
}

pub fn cmd_mesh(a: &MeshArgs, err: &mut (dyn Write + Send)) -> Result<()> {
    if a.res < 2 {
        return Err(Error::Invalid("resolution too small (need R >= 2)".into()));
    }
    let mls = io::read_mls::<f64>(&a.mls)?;
    let coverage = if a.full_grid { Coverage::Full } else { Coverage::Band };
    let (mesh, grid, stats) = extract_mesh_with(&mls, a.res, coverage)?;
    if stats.skipped_cells > 0 {
        let _ = writeln!(err, "warning: {} cells touch corners outside the MLS band and were skipped", stats.skipped_cells);
    }
    if stats.removed_triangles > 0 {
        let _ = writeln!(err, "warning: removed {} degenerate triangles", stats.removed_triangles);
    }
    if mesh.is_empty() {
        let _ = writeln!(err, "warning: extracted mesh is empty");
    }
    if let Some(p) = &a.dump {
        io::write_file(p, &grid.dump())?;
    }
    io::write_file(&a.out, io::format_obj(&mesh).as_bytes())
}

pub fn cmd_eval(a: &EvalArgs, seed: u64, out: &mut (dyn Write + Send)) -> Result<()> {
    let pred = io::read_obj::<f64>(&a.pred)?;
    let gt = io::read_obj::<f64>(&a.gt)?;
    if pred.is_empty() {
        return Err(Error::EmptyInput("empty prediction".into()));
    }
    if gt.is_empty() {
        return Err(Error::EmptyInput("empty reference mesh".into()));
    }
    let opts = MetricOptions { surface_samples: a.samples, iou_samples: a.iou_samples, tau: a.tau, seed, with_iou: !a.no_iou };
    let report = evaluate_meshes(&pred, &gt, &opts)?;
    let text = if a.record { report.to_record() + "\n" } else { report.to_kv() };
    out.write_all(text.as_bytes())?;
    Ok(())
}
