//! Conformal metric `g_N = rho^2 g_E` on the fundamental domain.

use std::sync::Arc;

use nalgebra::Point2;

use super::field::ScalarField;
use super::mesh::Mesh;
use crate::error::{Error, Result};

/// How the conformal factor was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricSource {
    Flat,
    Catenoid,
    Sampled,
}

/// Which metric a quantity is expressed in: the flat chart metric `g_E` or
/// the surface metric `g_N = rho^2 g_E`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricForm {
    Euclidean,
    #[default]
    Manifold,
}

#[derive(Debug, Clone)]
pub struct Metric {
    rho: ScalarField,
    source: MetricSource,
}

impl Metric {
    /// Euclidean metric, rho = 1.
    pub fn flat(mesh: &Arc<Mesh>) -> Self {
        Metric {
            rho: ScalarField::constant(mesh, 1.0),
            source: MetricSource::Flat,
        }
    }

    /// Constant conformal factor (sampled, not analytic).
    pub fn constant(mesh: &Arc<Mesh>, rho: f64) -> Result<Self> {
        Metric::sampled(ScalarField::constant(mesh, rho))
    }

    /// The catenoid conformal factor evaluated at every node.
    pub fn catenoid(mesh: &Arc<Mesh>) -> Result<Self> {
        for (i, p) in mesh.nodes().iter().enumerate() {
            if p.x == 0.0 && p.y == 0.0 {
                return Err(Error::Domain(format!("node {i} sits at the origin")));
            }
        }
        let rho = ScalarField::from_fn(mesh, |_, p| catenoid_rho_unchecked(p));
        Ok(Metric {
            rho,
            source: MetricSource::Catenoid,
        })
    }

    /// Conformal factor given on the nodes, for example read from a file.
    pub fn sampled(rho: ScalarField) -> Result<Self> {
        if let Some((i, v)) = rho
            .values()
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v > 0.0))
        {
            return Err(Error::Domain(format!(
                "conformal factor {v} at node {i} is not positive"
            )));
        }
        Ok(Metric {
            rho,
            source: MetricSource::Sampled,
        })
    }

    /// Sampled values carrying the label of the metric they were sampled from.
    pub(crate) fn relabeled(mut self, source: MetricSource) -> Self {
        self.source = source;
        self
    }

    pub fn rho(&self) -> &ScalarField {
        &self.rho
    }

    pub fn source(&self) -> MetricSource {
        self.source
    }

    pub fn is_analytic(&self) -> bool {
        matches!(self.source, MetricSource::Flat | MetricSource::Catenoid)
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        self.rho.mesh()
    }

    /// rho^2 at every node.
    pub fn rho_squared(&self) -> ScalarField {
        self.rho.map(|r| r * r)
    }
}

/// Conformal factor of the catenoid chart,
/// `rho = cosh(log(|x|^2)/2) / |x|`.
pub fn catenoid_rho(point: Point2<f64>) -> Result<f64> {
    if point.x == 0.0 && point.y == 0.0 {
        return Err(Error::Domain("the catenoid chart is singular at the origin".into()));
    }
    Ok(catenoid_rho_unchecked(point))
}

fn catenoid_rho_unchecked(p: Point2<f64>) -> f64 {
    let r2 = p.x * p.x + p.y * p.y;
    (0.5 * r2.ln()).cosh() / r2.sqrt()
}
