//! Forward problem: P1 Galerkin solves of `div(gamma grad u) = 0` with
//! polynomial Dirichlet data, and synthesis of the power-density matrix.

use std::sync::Arc;

use nalgebra::{Matrix2, Matrix4, Point2, Vector2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sprs::TriMat;

use crate::conductivity::{gamma_at, ConductivityField};
use crate::error::{Error, Result};
use crate::geometry::{grad_e, Field, MatrixField, Mesh, Metric, MetricForm, ScalarField};
use crate::sparse::{assemble, SolverSettings, SpdSolver};

/// Dirichlet data `f(x1, x2)`, a bivariate polynomial of total degree <= 2.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundaryCondition {
    pub c00: f64,
    pub c10: f64,
    pub c01: f64,
    pub c20: f64,
    pub c11: f64,
    pub c02: f64,
}

impl BoundaryCondition {
    pub fn new(c00: f64, c10: f64, c01: f64, c20: f64, c11: f64, c02: f64) -> Result<Self> {
        let bc = BoundaryCondition {
            c00,
            c10,
            c01,
            c20,
            c11,
            c02,
        };
        bc.validate()?;
        Ok(bc)
    }

    /// `f = x1`.
    pub fn x1() -> Self {
        BoundaryCondition {
            c10: 1.0,
            ..Default::default()
        }
    }

    /// `f = x2`.
    pub fn x2() -> Self {
        BoundaryCondition {
            c01: 1.0,
            ..Default::default()
        }
    }

    pub fn coefficients(&self) -> [f64; 6] {
        [self.c00, self.c10, self.c01, self.c20, self.c11, self.c02]
    }

    pub fn validate(&self) -> Result<()> {
        if self.coefficients().iter().all(|c| c.is_finite()) {
            Ok(())
        } else {
            Err(Error::Parameter(
                "boundary polynomial has non-finite coefficients".into(),
            ))
        }
    }

    pub fn eval(&self, p: Point2<f64>) -> f64 {
        let (x, y) = (p.x, p.y);
        self.c00 + self.c10 * x + self.c01 * y + self.c20 * x * x + self.c11 * x * y + self.c02 * y * y
    }

    pub fn gradient(&self, p: Point2<f64>) -> Vector2<f64> {
        let (x, y) = (p.x, p.y);
        Vector2::new(
            self.c10 + 2.0 * self.c20 * x + self.c11 * y,
            self.c01 + self.c11 * x + 2.0 * self.c02 * y,
        )
    }

    /// The four boundary polynomials of the catenoid reference experiment;
    /// the third repeats the second.
    pub fn reference_set() -> [BoundaryCondition; 4] {
        let f1 = BoundaryCondition {
            c01: -1.0,
            c02: -0.1,
            ..Default::default()
        };
        let f2 = BoundaryCondition {
            c10: 1.0,
            c01: -1.0,
            ..Default::default()
        };
        let f4 = BoundaryCondition {
            c01: 1.0,
            c20: -0.1,
            c11: 0.2,
            ..Default::default()
        };
        [f1, f2, f2, f4]
    }
}

/// Galerkin stiffness operator for a fixed conductivity, reduced to the
/// interior unknowns and factored once so that several Dirichlet problems
/// can share it.
pub struct ForwardSolver {
    mesh: Arc<Mesh>,
    /// Interior unknown index of each node, `None` on the boundary.
    unknown: Vec<Option<usize>>,
    /// `(row, boundary node, value)` entries of the interior-boundary block.
    coupling: Vec<(usize, usize, f64)>,
    solver: SpdSolver,
}

impl ForwardSolver {
    /// Assembles with the Euclidean weak form `int gamma grad u . grad v dx`.
    pub fn new(c: &ConductivityField, settings: SolverSettings) -> Result<Self> {
        let gamma = c.gamma()?;
        let coefficients = element_means(&gamma);
        Self::assemble(Arc::clone(c.mesh()), &coefficients, settings)
    }

    /// Assembles with the surface weak form
    /// `int g_N(gamma grad_N u, grad_N v) dV_N`. The integrand is formed
    /// nodewise (`rho^2 * rho^-2 * rho^-2 * rho^2 * gamma`) before the
    /// element quadrature, so the weights cancel up to rounding.
    pub fn new_manifold(c: &ConductivityField, metric: &Metric, settings: SolverSettings) -> Result<Self> {
        let gamma = c.gamma()?;
        let weighted = gamma.zip_map(metric.rho(), |g, r| {
            let r2 = r * r;
            let inv = r2.recip();
            // metric, two gradients, volume form
            g * (r2 * inv * inv * r2)
        })?;
        Self::assemble(Arc::clone(c.mesh()), &element_means(&weighted), settings)
    }

    fn assemble(mesh: Arc<Mesh>, coefficients: &[Matrix2<f64>], settings: SolverSettings) -> Result<Self> {
        let mut unknown = vec![None; mesh.node_count()];
        let mut count = 0;
        for (i, slot) in unknown.iter_mut().enumerate() {
            if !mesh.is_boundary(i) {
                *slot = Some(count);
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::Mesh("mesh has no interior nodes".into()));
        }
        let mut triplets = TriMat::new((count, count));
        let mut coupling = Vec::new();
        for (e, tri) in mesh.triangles().iter().enumerate() {
            let g = mesh.shape_gradients(e);
            let area = mesh.area(e);
            let k = &coefficients[e];
            for a in 0..3 {
                let Some(row) = unknown[tri[a]] else { continue };
                let kg = k * g[a];
                for b in 0..3 {
                    let value = area * kg.dot(&g[b]);
                    match unknown[tri[b]] {
                        Some(col) => triplets.add_triplet(row, col, value),
                        None => coupling.push((row, tri[b], value)),
                    }
                }
            }
        }
        let solver = SpdSolver::new(assemble(count, &triplets), settings)?;
        Ok(ForwardSolver {
            mesh,
            unknown,
            coupling,
            solver,
        })
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    /// Solves with nodal Dirichlet values `f(node)` on the boundary.
    pub fn solve(&self, f: &BoundaryCondition) -> Result<ScalarField> {
        f.validate()?;
        let boundary: Vec<f64> = self.mesh.nodes().iter().map(|p| f.eval(*p)).collect();
        let mut rhs = vec![0.0; self.solver.size()];
        for &(row, node, value) in &self.coupling {
            rhs[row] -= value * boundary[node];
        }
        let x = self.solver.solve(&rhs, None)?;
        let values = self
            .unknown
            .iter()
            .enumerate()
            .map(|(i, slot)| match slot {
                Some(k) => x[*k],
                None => boundary[i],
            })
            .collect();
        ScalarField::new(Arc::clone(&self.mesh), values)
    }
}

fn element_means(nodal: &MatrixField) -> Vec<Matrix2<f64>> {
    nodal
        .mesh()
        .triangles()
        .iter()
        .map(|t| (nodal[t[0]] + nodal[t[1]] + nodal[t[2]]) / 3.0)
        .collect()
}

/// Single Dirichlet solve with the default direct solver.
pub fn solve_dirichlet(c: &ConductivityField, f: &BoundaryCondition) -> Result<ScalarField> {
    ForwardSolver::new(c, SolverSettings::default())?.solve(f)
}

/// `H_ij = (grad_E u_i)^T gamma (grad_E u_j)` from recovered gradients.
pub fn power_density(c: &ConductivityField, ui: &ScalarField, uj: &ScalarField) -> Result<ScalarField> {
    ui.check_same_mesh(uj)?;
    ui.check_same_mesh(&c.xi)?;
    let gi = grad_e(ui);
    let gj = grad_e(uj);
    gi.try_map(|n, a| Ok(a.dot(&(gamma_at(c, n)? * gj[n]))))
}

/// Four potentials and their power-density matrices in both metrics.
#[derive(Debug, Clone)]
pub struct PowerDensityDataset {
    pub potentials: [ScalarField; 4],
    pub h_e: Field<Matrix4<f64>>,
    /// `rho^-2 H_E`, entrywise.
    pub h_n: Field<Matrix4<f64>>,
    pub bcs: [BoundaryCondition; 4],
    pub metric: Metric,
}

impl PowerDensityDataset {
    /// Builds a dataset from given potentials and Euclidean power densities.
    pub fn from_parts(
        potentials: [ScalarField; 4],
        h_e: Field<Matrix4<f64>>,
        bcs: [BoundaryCondition; 4],
        metric: Metric,
    ) -> Result<Self> {
        for u in &potentials {
            h_e.check_same_mesh(u)?;
        }
        h_e.check_same_mesh(metric.rho())?;
        let h_n = h_e.zip_map(metric.rho(), |h, r| h / (r * r))?;
        Ok(PowerDensityDataset {
            potentials,
            h_e,
            h_n,
            bcs,
            metric,
        })
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        self.h_e.mesh()
    }

    pub fn h(&self, form: MetricForm) -> &Field<Matrix4<f64>> {
        match form {
            MetricForm::Euclidean => &self.h_e,
            MetricForm::Manifold => &self.h_n,
        }
    }

    /// 2x2 block of one measurement pair: pair 0 is `(u1, u2)`, pair 1 is
    /// `(u3, u4)`.
    pub fn pair_block(&self, pair: usize, form: MetricForm) -> MatrixField {
        let o = 2 * pair;
        self.h(form)
            .map(|h| Matrix2::new(h[(o, o)], h[(o, o + 1)], h[(o + 1, o)], h[(o + 1, o + 1)]))
    }

    /// `[[H13, H14], [H23, H24]]`.
    pub fn cross_block(&self, form: MetricForm) -> MatrixField {
        self.h(form)
            .map(|h| Matrix2::new(h[(0, 2)], h[(0, 3)], h[(1, 2)], h[(1, 3)]))
    }

    /// Largest `|H_ij - H_ji|` over all nodes.
    pub fn asymmetry(&self) -> f64 {
        self.h_e
            .values()
            .iter()
            .map(|h| (h - h.transpose()).abs().max())
            .fold(0.0, f64::max)
    }

    /// Largest relative mismatch of `rho^2 H_N` against `H_E`.
    pub fn pullback_mismatch(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.h_e.len() {
            let r2 = self.metric.rho()[i].powi(2);
            let scale = self.h_e[i].abs().max().max(f64::MIN_POSITIVE);
            worst = worst.max((self.h_n[i] * r2 - self.h_e[i]).abs().max() / scale);
        }
        worst
    }

    /// Nodes where `kappa^-1 |grad u_i|^2 <= H_ii <= kappa |grad u_i|^2`
    /// fails for some `i`.
    pub fn ellipticity_trace_violations(&self, kappa: f64) -> Vec<usize> {
        let grads: Vec<_> = self.potentials.iter().map(grad_e).collect();
        (0..self.h_e.len())
            .filter(|&n| {
                (0..4).any(|i| {
                    let g2 = grads[i][n].norm_squared();
                    let h = self.h_e[n][(i, i)];
                    let slack = 1e-12 * (1.0 + g2);
                    h < g2 / kappa - slack || h > kappa * g2 + slack
                })
            })
            .collect()
    }
}

/// Solves the four forward problems (sharing one factorization) and fills
/// the full 4x4 power-density matrix.
pub fn assemble_dataset(
    metric: &Metric,
    c: &ConductivityField,
    bcs: [BoundaryCondition; 4],
    settings: SolverSettings,
) -> Result<PowerDensityDataset> {
    c.xi.check_same_mesh(metric.rho())?;
    let solver = ForwardSolver::new(c, settings)?;
    let potentials: Vec<ScalarField> = bcs.par_iter().map(|bc| solver.solve(bc)).collect::<Result<_>>()?;
    let potentials: [ScalarField; 4] = potentials.try_into().expect("four boundary conditions");
    let grads: Vec<_> = potentials.iter().map(grad_e).collect();
    let gamma = c.gamma()?;
    let h_e = gamma.try_map(|n, g| {
        let mut h = Matrix4::zeros();
        for i in 0..4 {
            let gi = g * grads[i][n];
            for j in i..4 {
                let v = gi.dot(&grads[j][n]);
                h[(i, j)] = v;
                h[(j, i)] = v;
            }
        }
        Ok(h)
    })?;
    PowerDensityDataset::from_parts(potentials, h_e, bcs, metric.clone())
}
