//! Nodal fields over a shared mesh.

use std::sync::Arc;

use nalgebra::{Matrix2, Vector2};
use rayon::prelude::*;

use super::mesh::Mesh;
use crate::error::{Error, Result};

/// Values attached to every node of a mesh.
#[derive(Debug, Clone)]
pub struct Field<T> {
    mesh: Arc<Mesh>,
    values: Vec<T>,
}

pub type ScalarField = Field<f64>;
pub type VectorField = Field<Vector2<f64>>;
pub type MatrixField = Field<Matrix2<f64>>;

impl<T> Field<T> {
    pub fn new(mesh: Arc<Mesh>, values: Vec<T>) -> Result<Self> {
        if values.len() != mesh.node_count() {
            return Err(Error::Field(format!(
                "{} values for a mesh with {} nodes",
                values.len(),
                mesh.node_count()
            )));
        }
        Ok(Field { mesh, values })
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_mesh<U>(&self, other: &Field<U>) -> bool {
        Arc::ptr_eq(&self.mesh, &other.mesh)
    }

    pub(crate) fn check_same_mesh<U>(&self, other: &Field<U>) -> Result<()> {
        if self.same_mesh(other) {
            Ok(())
        } else {
            Err(Error::Field("fields live on different meshes".into()))
        }
    }
}

impl<T: Send + Sync> Field<T> {
    /// Evaluates `f` at every node position.
    pub fn from_fn<F>(mesh: &Arc<Mesh>, f: F) -> Self
    where
        F: Fn(usize, nalgebra::Point2<f64>) -> T + Sync,
    {
        let values = (0..mesh.node_count())
            .into_par_iter()
            .map(|i| f(i, mesh.node(i)))
            .collect();
        Field {
            mesh: Arc::clone(mesh),
            values,
        }
    }

    pub fn map<U: Send, F>(&self, f: F) -> Field<U>
    where
        F: Fn(&T) -> U + Sync + Send,
    {
        Field {
            mesh: Arc::clone(&self.mesh),
            values: self.values.par_iter().map(f).collect(),
        }
    }

    /// Pointwise combination of two fields on the same mesh.
    pub fn zip_map<U: Sync, V: Send, F>(&self, other: &Field<U>, f: F) -> Result<Field<V>>
    where
        F: Fn(&T, &U) -> V + Sync + Send,
    {
        self.check_same_mesh(other)?;
        Ok(Field {
            mesh: Arc::clone(&self.mesh),
            values: self
                .values
                .par_iter()
                .zip(other.values.par_iter())
                .map(|(a, b)| f(a, b))
                .collect(),
        })
    }

    pub fn try_map<U: Send, F>(&self, f: F) -> Result<Field<U>>
    where
        F: Fn(usize, &T) -> Result<U> + Sync + Send,
    {
        let values = self
            .values
            .par_iter()
            .enumerate()
            .map(|(i, v)| f(i, v))
            .collect::<Result<Vec<U>>>()?;
        Ok(Field {
            mesh: Arc::clone(&self.mesh),
            values,
        })
    }
}

impl<T> std::ops::Index<usize> for Field<T> {
    type Output = T;

    fn index(&self, i: usize) -> &T {
        &self.values[i]
    }
}

impl ScalarField {
    pub fn constant(mesh: &Arc<Mesh>, value: f64) -> Self {
        Field {
            mesh: Arc::clone(mesh),
            values: vec![value; mesh.node_count()],
        }
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Lumped-mass L² norm over the chart.
    pub fn l2_norm(&self) -> f64 {
        self.values
            .iter()
            .zip(self.mesh.lumped_mass())
            .map(|(v, m)| m * v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl VectorField {
    /// Splits into the two component fields.
    pub fn components(&self) -> (ScalarField, ScalarField) {
        (self.map(|v| v.x), self.map(|v| v.y))
    }

    pub fn from_components(x: &ScalarField, y: &ScalarField) -> Result<Self> {
        x.zip_map(y, |a, b| Vector2::new(*a, *b))
    }

    pub fn l2_norm(&self) -> f64 {
        self.values
            .iter()
            .zip(self.mesh.lumped_mass())
            .map(|(v, m)| m * v.norm_squared())
            .sum::<f64>()
            .sqrt()
    }
}

impl MatrixField {
    /// Maximum asymmetry `|m12 - m21| / (1 + |m|)` over the nodes.
    pub fn asymmetry(&self) -> f64 {
        self.values
            .iter()
            .map(|m| (m[(0, 1)] - m[(1, 0)]).abs() / (1.0 + m.norm()))
            .fold(0.0, f64::max)
    }

    pub fn is_symmetric(&self) -> bool {
        self.asymmetry() <= 1e-12
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|m| m.iter().all(|v| v.is_finite()))
    }

    /// Field of the `(r, c)` entry.
    pub fn entry(&self, r: usize, c: usize) -> ScalarField {
        self.map(|m| m[(r, c)])
    }

    /// Lumped-mass L² norm of the pointwise Frobenius norm.
    pub fn l2_norm(&self) -> f64 {
        self.values
            .iter()
            .zip(self.mesh.lumped_mass())
            .map(|(v, m)| m * v.norm_squared())
            .sum::<f64>()
            .sqrt()
    }
}
