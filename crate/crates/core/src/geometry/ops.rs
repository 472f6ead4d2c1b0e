//! Discrete differential operators in the Euclidean and conformal metrics.
//!
//! Every derivative in the crate goes through one nodal gradient operator,
//! a cubic least-squares fit over a graph patch whose weights are
//! precomputed on the [`Mesh`]. Data fields (power densities, transfer
//! matrices) are differentiated the same way as potentials.

use std::ops::Add;
use std::sync::Arc;

use nalgebra::{Matrix2, Vector2};
use rayon::prelude::*;

use super::field::{Field, MatrixField, ScalarField, VectorField};
use super::mesh::Mesh;
use super::metric::Metric;
use crate::error::Result;

/// Gradient of the P1 interpolant of `u` on every triangle.
pub fn element_gradients(u: &ScalarField) -> Vec<Vector2<f64>> {
    let mesh = u.mesh();
    (0..mesh.triangle_count())
        .into_par_iter()
        .map(|e| {
            let g = mesh.shape_gradients(e);
            let t = mesh.triangles()[e];
            g[0] * u[t[0]] + g[1] * u[t[1]] + g[2] * u[t[2]]
        })
        .collect()
}

/// Euclidean gradient at the nodes.
pub fn grad_e(u: &ScalarField) -> VectorField {
    apply(u.mesh(), |w, j| w * u[j], Vector2::zeros())
}

fn apply<T>(mesh: &Arc<Mesh>, term: impl Fn(Vector2<f64>, usize) -> T + Sync, zero: T) -> Field<T>
where
    T: Copy + Send + Sync + Add<Output = T>,
{
    let values = (0..mesh.node_count())
        .into_par_iter()
        .map(|i| {
            mesh.gradient_weights(i)
                .iter()
                .fold(zero, |acc, &(j, w)| acc + term(w, j))
        })
        .collect();
    Field::new(Arc::clone(mesh), values).expect("one value per node")
}

/// Gradient in `g_N`: `rho^-2 grad_E u`, nodewise.
pub fn grad_n(u: &ScalarField, metric: &Metric) -> Result<VectorField> {
    grad_e(u).zip_map(metric.rho(), |g, r| g / (r * r))
}

/// Converts a `g_N` gradient to the Euclidean one, `rho^2 grad_N u`.
pub fn to_euclidean_gradient(g: &VectorField, metric: &Metric) -> Result<VectorField> {
    g.zip_map(metric.rho(), |v, r| v * (r * r))
}

/// Euclidean divergence at the nodes.
pub fn div_e(v: &VectorField) -> ScalarField {
    apply(v.mesh(), |w, j| w.dot(&v[j]), 0.0)
}

/// Divergence in `g_N`, `rho^-2 sum_i d_i(v^i rho^2)`, discretized through
/// the product rule as `div_E v + v . grad_E log rho^2`.
pub fn div_n(v: &VectorField, metric: &Metric) -> Result<ScalarField> {
    let log_rho2 = metric.rho().map(|r| (r * r).ln());
    let dlog = grad_e(&log_rho2);
    let div = div_e(v);
    let correction = v.zip_map(&dlog, |a, b| a.dot(b))?;
    div.zip_map(&correction, |a, b| a + b)
}

/// Recovered Jacobian, `J[(i, j)] = d_j v_i`.
pub fn jacobian(v: &VectorField) -> MatrixField {
    let (vx, vy) = v.components();
    let gx = grad_e(&vx);
    let gy = grad_e(&vy);
    gx.zip_map(&gy, |a, b| Matrix2::new(a.x, a.y, b.x, b.y))
        .expect("components share the mesh")
}

/// Coordinate Lie bracket `[v, w] = (Dw) v - (Dv) w`.
pub fn lie_bracket(v: &VectorField, w: &VectorField) -> Result<VectorField> {
    v.check_same_mesh(w)?;
    let jv = jacobian(v);
    let jw = jacobian(w);
    let a = jw.zip_map(v, |j, x| j * x)?;
    let b = jv.zip_map(w, |j, x| j * x)?;
    a.zip_map(&b, |p, q| p - q)
}

/// Pointwise Euclidean length of a vector field.
pub fn norm(v: &VectorField) -> ScalarField {
    v.map(|x| x.norm())
}
