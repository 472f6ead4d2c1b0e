//! Run configuration.
//!
//! A config file is TOML. Every section except `schema_version` is optional
//! and falls back to the defaults of the catenoid experiment; the resolved
//! configuration is echoed into the run manifest. Input paths (mesh
//! directory, sampled conformal factor) are relative to the config file,
//! `output_dir` is relative to the working directory.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use powerdensity::conductivity::{ConductivityField, PhantomSpec};
use powerdensity::datarep::{ConditionThresholds, GraphSmoothing};
use powerdensity::forward::BoundaryCondition;
use powerdensity::geometry::integrate::DEFAULT_CURL_WARNING;
use powerdensity::reconstruction::ReconstructionSettings;
use powerdensity::sparse::SolverSettings;
use powerdensity::{build_annulus_mesh, io, Mesh, Metric, MetricForm};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub mesh: MeshConfig,
    #[serde(default)]
    pub metric: MetricConfig,
    #[serde(default)]
    pub phantom: PhantomConfig,
    #[serde(default = "BoundaryCondition::reference_set")]
    pub bcs: [BoundaryCondition; 4],
    #[serde(default)]
    pub solver: SolverSettings,
    #[serde(default)]
    pub thresholds: ConditionThresholds,
    #[serde(default)]
    pub reconstruction: ReconstructionConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("run")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeshConfig {
    /// Log-uniform polar triangulation of `r_inner < |x| < r_outer`.
    Annulus {
        #[serde(default = "default_r_inner")]
        r_inner: f64,
        #[serde(default = "default_r_outer")]
        r_outer: f64,
        #[serde(default = "default_n_radial")]
        n_radial: usize,
        /// Defaults to `4 n_radial`.
        #[serde(default)]
        n_angular: Option<usize>,
    },
    /// `nodes.csv` and `triangles.csv` in `dir`.
    File { dir: PathBuf },
}

fn default_r_inner() -> f64 {
    std::f64::consts::E.recip()
}

fn default_r_outer() -> f64 {
    std::f64::consts::E
}

fn default_n_radial() -> usize {
    40
}

impl Default for MeshConfig {
    fn default() -> Self {
        MeshConfig::Annulus {
            r_inner: default_r_inner(),
            r_outer: default_r_outer(),
            n_radial: default_n_radial(),
            n_angular: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MetricConfig {
    Flat,
    #[default]
    Catenoid,
    /// Conformal factor sampled at the nodes (`node_id,value`).
    Grid {
        file: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PhantomConfig {
    Bumps(PhantomSpec),
    Constant { xi: f64, zeta: f64, s: f64 },
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig::Bumps(PhantomSpec::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructionConfig {
    pub form: MetricForm,
    pub curl_warning: f64,
    pub smoothing: Option<GraphSmoothing>,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        ReconstructionConfig {
            form: MetricForm::Manifold,
            curl_warning: DEFAULT_CURL_WARNING,
            smoothing: None,
        }
    }
}

/// A parsed config together with the directory its relative input paths
/// refer to.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub base_dir: PathBuf,
}

impl LoadedConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_str(&text, base_dir).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn from_str(text: &str, base_dir: PathBuf) -> Result<Self, CliError> {
        let config: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        config.validate()?;
        Ok(LoadedConfig { config, base_dir })
    }

    fn input(&self, p: &Path) -> PathBuf {
        self.base_dir.join(p)
    }

    pub fn build_mesh(&self) -> Result<Arc<Mesh>, CliError> {
        let mesh = match &self.config.mesh {
            MeshConfig::Annulus {
                r_inner,
                r_outer,
                n_radial,
                n_angular,
            } => build_annulus_mesh(*r_inner, *r_outer, *n_radial, n_angular.unwrap_or(4 * n_radial))
                .map_err(|e| CliError::Config(e.to_string()))?,
            MeshConfig::File { dir } => io::read_mesh(&self.input(dir))?,
        };
        Ok(Arc::new(mesh))
    }

    pub fn build_metric(&self, mesh: &Arc<Mesh>) -> Result<Metric, CliError> {
        Ok(match &self.config.metric {
            MetricConfig::Flat => Metric::flat(mesh),
            MetricConfig::Catenoid => Metric::catenoid(mesh).map_err(|e| CliError::Config(e.to_string()))?,
            MetricConfig::Grid { file } => Metric::sampled(io::read_scalar(&self.input(file), mesh)?)?,
        })
    }

    pub fn build_phantom(&self, mesh: &Arc<Mesh>) -> Result<ConductivityField, CliError> {
        match self.config.phantom {
            PhantomConfig::Bumps(spec) => Ok(spec.sample(mesh)),
            PhantomConfig::Constant { xi, zeta, s } => Ok(ConductivityField::constant(mesh, xi, zeta, s)),
        }
    }

    pub fn reconstruction_settings(&self) -> ReconstructionSettings {
        let r = self.config.reconstruction;
        ReconstructionSettings {
            form: r.form,
            solver: self.config.solver,
            thresholds: self.config.thresholds,
            curl_warning: r.curl_warning,
            smoothing: r.smoothing,
        }
    }
}

impl RunConfig {
    /// Checks everything that can be checked without building the mesh.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if let MeshConfig::Annulus {
            r_inner,
            r_outer,
            n_radial,
            n_angular,
        } = self.mesh
        {
            if !(r_inner > 0.0 && r_outer > r_inner && r_outer.is_finite()) {
                return bad(format!(
                    "mesh radii must satisfy 0 < r_inner < r_outer, got {r_inner}, {r_outer}"
                ));
            }
            if n_radial < 2 || n_angular.is_some_and(|n| n < 8) {
                return bad("mesh needs n_radial >= 2 and n_angular >= 8".into());
            }
        }
        for (k, bc) in self.bcs.iter().enumerate() {
            bc.validate().map_err(|e| CliError::Config(format!("bcs[{k}]: {e}")))?;
        }
        if let PhantomConfig::Constant { xi, zeta, s } = self.phantom {
            if !(xi > 0.0 && s > 0.0 && xi.is_finite() && zeta.is_finite() && s.is_finite()) {
                return bad(format!(
                    "constant phantom needs xi > 0 and s > 0, got xi = {xi}, s = {s}"
                ));
            }
        }
        if !(self.thresholds.c0 >= 0.0 && self.thresholds.grad_ratio >= 0.0) {
            return bad("thresholds must be non-negative".into());
        }
        if !(self.solver.rel_tol > 0.0) {
            return bad("solver.rel_tol must be positive".into());
        }
        Ok(())
    }
}
