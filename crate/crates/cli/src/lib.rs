//! Pipeline runner behind the `pdrecon` binary.
//!
//! Artifact layout under the output directory:
//!
//! ```text
//! manifest.json          config echo, tool version, mesh size, run mode
//! mesh/                  nodes.csv, triangles.csv
//! phantom/               xi.csv, zeta.csv, s.csv (ground truth)
//! dataset/               u1..u4.csv, HE_ij.csv, HN_ij.csv, rho.csv,
//!                        gamma_boundary.csv, manifest.json
//! recon/                 atilde.csv, theta.csv, s.csv, gamma.csv, xi.csv,
//!                        zeta.csv, error.csv
//! report/summary.json    conditions, identities, diagnostics, errors
//! report/failing_nodes.csv
//! report/timings.json    wall-clock times; omitted in reference mode
//! ```

pub mod config;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use powerdensity::conductivity::ConductivityField;
use powerdensity::datarep::{check_dataset, data_identities, ConditionsReport, DataIdentities};
use powerdensity::forward::{assemble_dataset, PowerDensityDataset};
use powerdensity::io::{self, DatasetManifest, MeshInfo, DATASET_SCHEMA_VERSION};
use powerdensity::reconstruction::{evaluate_errors, reconstruct, BoundaryGamma, Diagnostics, ErrorReport};
use powerdensity::{Error, MatrixField, Mesh};
use serde::Serialize;

pub use config::{LoadedConfig, RunConfig};

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    /// Unreadable or unwritable files, malformed input tables.
    pub const IO: i32 = 1;
    /// Bad command line or configuration.
    pub const CONFIG: i32 = 2;
    /// The data violate one of the two admissibility conditions.
    pub const CONDITION: i32 = 3;
    /// The linear solver failed.
    pub const SOLVER: i32 = 4;
    /// Any other numerical failure during reconstruction.
    pub const RECONSTRUCTION: i32 = 5;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::Core(e) => match e {
                Error::Io { .. } | Error::Parse { .. } | Error::Json(_) => exit::IO,
                Error::Parameter(_) | Error::Mesh(_) => exit::CONFIG,
                Error::Admissibility { .. } | Error::ConditionTwo { .. } => exit::CONDITION,
                Error::Solver(_) => exit::SOLVER,
                Error::Domain(_)
                | Error::Field(_)
                | Error::Topology(_)
                | Error::Validity { .. }
                | Error::Reconstruction(_) => exit::RECONSTRUCTION,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Forward,
    Reconstruct,
    Full,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Single-threaded, timing-free outputs.
    pub reference: bool,
    /// Overrides `output_dir` from the config.
    pub output: Option<PathBuf>,
    /// Artifact directory holding `mesh/` and `dataset/` for `reconstruct`;
    /// defaults to the output directory.
    pub input: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub status: &'static str,
    pub command: Command,
    pub message: Option<String>,
    pub conditions: Option<ConditionsReport>,
    pub data_identities: Option<DataIdentities>,
    pub diagnostics: Option<Diagnostics>,
    pub errors: Option<ErrorReport>,
    pub config: RunConfig,
}

#[derive(Serialize)]
struct Manifest<'a> {
    schema_version: u32,
    tool: &'static str,
    version: &'static str,
    command: Command,
    reference: bool,
    threads: usize,
    config: &'a RunConfig,
    mesh: MeshInfo,
}

#[derive(Serialize)]
struct Timing {
    step: String,
    seconds: f64,
}

struct Run<'a> {
    cfg: &'a LoadedConfig,
    opts: &'a RunOptions,
    command: Command,
    root: PathBuf,
    timings: Vec<Timing>,
    clock: Instant,
}

impl<'a> Run<'a> {
    fn new(cfg: &'a LoadedConfig, opts: &'a RunOptions, command: Command) -> Result<Self, CliError> {
        let root = opts.output.clone().unwrap_or_else(|| cfg.config.output_dir.clone());
        io::create_dir(&root)?;
        Ok(Run {
            cfg,
            opts,
            command,
            root,
            timings: Vec::new(),
            clock: Instant::now(),
        })
    }

    fn dir(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn lap(&mut self, step: &str) {
        self.timings.push(Timing {
            step: step.to_string(),
            seconds: self.clock.elapsed().as_secs_f64(),
        });
        log::info!("{step} done in {:.3} s", self.clock.elapsed().as_secs_f64());
        self.clock = Instant::now();
    }

    fn summary(&self, status: &'static str) -> Summary {
        Summary {
            status,
            command: self.command,
            message: None,
            conditions: None,
            data_identities: None,
            diagnostics: None,
            errors: None,
            config: self.cfg.config.clone(),
        }
    }

    /// Writes the report and the top-level manifest.
    fn finish(&self, mesh: &Mesh, summary: &Summary) -> Result<(), CliError> {
        let report = self.dir("report");
        io::create_dir(&report)?;
        io::write_json(&report.join("summary.json"), summary)?;
        if self.opts.reference {
            let stale = report.join("timings.json");
            if stale.exists() {
                std::fs::remove_file(&stale).map_err(|e| Error::Io { path: stale, source: e })?;
            }
        } else {
            io::write_json(&report.join("timings.json"), &self.timings)?;
        }
        let manifest = Manifest {
            schema_version: config::SCHEMA_VERSION,
            tool: "pdrecon",
            version: env!("CARGO_PKG_VERSION"),
            command: self.command,
            reference: self.opts.reference,
            threads: rayon::current_num_threads(),
            config: &self.cfg.config,
            mesh: mesh_info(mesh, &self.cfg.config),
        };
        io::write_json(&self.root.join("manifest.json"), &manifest)?;
        Ok(())
    }
}

fn mesh_info(mesh: &Mesh, config: &RunConfig) -> MeshInfo {
    MeshInfo::new(mesh, serde_json::to_value(&config.mesh).unwrap_or_default())
}

struct Simulation {
    mesh: Arc<Mesh>,
    truth: Option<ConductivityField>,
    data: PowerDensityDataset,
    gamma_boundary: BoundaryGamma,
}

fn simulate(run: &mut Run) -> Result<Simulation, CliError> {
    let cfg = run.cfg;
    let mesh = cfg.build_mesh()?;
    let metric = cfg.build_metric(&mesh)?;
    let truth = cfg.build_phantom(&mesh)?;
    io::write_mesh(&run.dir("mesh"), &mesh)?;
    io::write_conductivity(&run.dir("phantom"), &truth)?;
    run.lap("setup");

    let data = assemble_dataset(&metric, &truth, cfg.config.bcs, cfg.config.solver)?;
    let gamma_boundary = BoundaryGamma::from_conductivity(&truth)?;
    run.lap("forward");

    let manifest = DatasetManifest {
        schema_version: DATASET_SCHEMA_VERSION,
        bcs: cfg.config.bcs,
        metric: metric.source(),
        mesh: mesh_info(&mesh, &cfg.config),
        solver: cfg.config.solver,
        noise: None,
    };
    io::write_dataset(&run.dir("dataset"), &data, &gamma_boundary, &manifest)?;
    run.lap("export");
    Ok(Simulation {
        mesh,
        truth: Some(truth),
        data,
        gamma_boundary,
    })
}

fn load_simulation(run: &Run) -> Result<Simulation, CliError> {
    let input = run.opts.input.clone().unwrap_or_else(|| run.root.clone());
    let mesh = Arc::new(io::read_mesh(&input.join("mesh"))?);
    let (data, gamma_boundary, _) = io::read_dataset(&input.join("dataset"), &mesh)?;
    let phantom = input.join("phantom");
    let truth = if phantom.join("xi.csv").exists() {
        Some(io::read_conductivity(&phantom, &mesh)?)
    } else {
        None
    };
    Ok(Simulation {
        mesh,
        truth,
        data,
        gamma_boundary,
    })
}

/// Condition check, then reconstruction and evaluation. Condition failures
/// still produce a report before the error is returned.
fn reconstruct_stage(run: &mut Run, sim: &Simulation, summary: &mut Summary) -> Result<(), CliError> {
    let settings = run.cfg.reconstruction_settings();
    let (conditions, dets) = check_dataset(&sim.data, settings.thresholds)?;
    let report = run.dir("report");
    io::create_dir(&report)?;
    let failing: Vec<(usize, u8)> = conditions
        .failing_condition_one
        .iter()
        .map(|&n| (n, 1))
        .chain(conditions.failing_condition_two.iter().map(|&n| (n, 2)))
        .collect();
    io::write_failing_nodes(&report.join("failing_nodes.csv"), &failing)?;
    summary.conditions = Some(conditions.clone());
    if let Some(err) = conditions.to_error(Some(&dets)) {
        summary.status = "condition_failure";
        summary.message = Some(err.to_string());
        run.finish(&sim.mesh, summary)?;
        return Err(err.into());
    }
    run.lap("conditions");

    let result = match reconstruct(&sim.data, &sim.gamma_boundary, &settings) {
        Ok(r) => r,
        Err(err) => {
            summary.status = "failed";
            summary.message = Some(err.to_string());
            run.finish(&sim.mesh, summary)?;
            return Err(err.into());
        }
    };
    for t in &result.diagnostics.timings {
        run.timings.push(Timing {
            step: format!("reconstruct/{}", t.step),
            seconds: t.seconds,
        });
    }
    if result.diagnostics.theta_curl_warning || result.diagnostics.dets_curl_warning {
        log::warn!(
            "curl residuals above {}: theta {:.3e}, log det {:.3e}",
            settings.curl_warning,
            result.diagnostics.theta_residual,
            result.diagnostics.dets_residual
        );
    }
    let evaluated = sim.truth.as_ref().map(|t| result.evaluate(t)).transpose()?;
    io::write_reconstruction(&run.dir("recon"), &result, evaluated.as_ref().map(|(_, e)| e))?;
    summary.diagnostics = Some(result.diagnostics.clone());
    summary.errors = evaluated.map(|(e, _)| e);
    run.clock = Instant::now();
    Ok(())
}

/// Runs one of the pipeline commands and returns its summary.
pub fn run(cfg: &LoadedConfig, opts: &RunOptions, command: Command) -> Result<Summary, CliError> {
    let mut run = Run::new(cfg, opts, command)?;
    let mut summary = run.summary("ok");
    let sim = match command {
        Command::Forward | Command::Full => simulate(&mut run)?,
        Command::Reconstruct => load_simulation(&run)?,
    };
    summary.data_identities = Some(data_identities(&sim.data)?);
    match command {
        Command::Forward => {
            let (conditions, _) = check_dataset(&sim.data, cfg.config.thresholds)?;
            summary.conditions = Some(conditions);
        }
        Command::Reconstruct | Command::Full => reconstruct_stage(&mut run, &sim, &mut summary)?,
    }
    run.finish(&sim.mesh, &summary)?;
    Ok(summary)
}

/// Compares two conductivity exports on a mesh. Each path is either a
/// `gamma.csv` file or a directory holding `gamma.csv` or `xi.csv`,
/// `zeta.csv` and `s.csv`.
pub fn evaluate(mesh_dir: &Path, truth: &Path, recon: &Path) -> Result<ErrorReport, CliError> {
    let mesh = Arc::new(io::read_mesh(mesh_dir)?);
    let truth = ConductivityField::from_gamma(&read_gamma_like(truth, &mesh)?)?;
    let recon = read_gamma_like(recon, &mesh)?;
    Ok(evaluate_errors(&truth, &recon)?.0)
}

fn read_gamma_like(path: &Path, mesh: &Arc<Mesh>) -> Result<MatrixField, CliError> {
    if path.is_dir() {
        if path.join("gamma.csv").exists() {
            Ok(io::read_gamma(&path.join("gamma.csv"), mesh)?)
        } else {
            Ok(io::read_conductivity(path, mesh)?.gamma()?)
        }
    } else {
        Ok(io::read_gamma(path, mesh)?)
    }
}
