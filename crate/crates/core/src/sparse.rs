//! Sparse symmetric positive-definite solves.
//!
//! The direct path is an LDLᵀ factorization with reverse Cuthill-McKee
//! ordering from `sprs-ldl`; the iterative path is Jacobi-preconditioned
//! conjugate gradients. Both are checked against the relative residual.

use serde::{Deserialize, Serialize};
use sprs::{CsMat, TriMat};
use sprs_ldl::{Ldl, LdlNumeric};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    #[default]
    Direct,
    ConjugateGradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    pub kind: SolverKind,
    /// Target relative residual `|Ax - b| / |b|`.
    pub rel_tol: f64,
    pub max_iterations: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            kind: SolverKind::Direct,
            rel_tol: 1e-12,
            max_iterations: 20_000,
        }
    }
}

/// Residual above which a direct solve is reported as failed even after
/// iterative refinement.
const DIRECT_FAILURE_RESIDUAL: f64 = 1e-8;

/// Builds a CSR matrix from (row, col, value) triplets; duplicates are summed.
pub fn assemble(n: usize, triplets: &TriMat<f64>) -> CsMat<f64> {
    debug_assert_eq!(triplets.shape(), (n, n));
    triplets.to_csr()
}

enum Backend {
    Direct(Box<LdlNumeric<f64, usize>>),
    Cg { inv_diag: Vec<f64> },
}

/// A factored (or preconditioned) SPD operator ready for repeated solves.
pub struct SpdSolver {
    matrix: CsMat<f64>,
    backend: Backend,
    settings: SolverSettings,
}

impl SpdSolver {
    pub fn new(matrix: CsMat<f64>, settings: SolverSettings) -> Result<Self> {
        let (rows, cols) = matrix.shape();
        if rows != cols {
            return Err(Error::Solver(format!("matrix is {rows}x{cols}, not square")));
        }
        let diag: Vec<f64> = (0..rows).map(|i| matrix.get(i, i).copied().unwrap_or(0.0)).collect();
        if let Some(i) = diag.iter().position(|d| !(*d > 0.0)) {
            return Err(Error::Solver(format!(
                "non-positive diagonal entry {} at row {i}; the operator is singular or indefinite",
                diag[i]
            )));
        }
        let backend = match settings.kind {
            SolverKind::Direct => {
                let ldl = Ldl::new()
                    .fill_in_reduction(sprs::FillInReduction::ReverseCuthillMcKee)
                    .check_symmetry(sprs::SymmetryCheck::DontCheckSymmetry)
                    .numeric(matrix.view())
                    .map_err(|e| Error::Solver(format!("factorization failed: {e}")))?;
                if let Some(i) = ldl.d().iter().position(|d| !(*d > 0.0)) {
                    return Err(Error::Solver(format!(
                        "pivot {i} is {}; the operator is not positive definite",
                        ldl.d()[i]
                    )));
                }
                Backend::Direct(Box::new(ldl))
            }
            SolverKind::ConjugateGradient => Backend::Cg {
                inv_diag: diag.iter().map(|d| d.recip()).collect(),
            },
        };
        Ok(SpdSolver {
            matrix,
            backend,
            settings,
        })
    }

    pub fn size(&self) -> usize {
        self.matrix.rows()
    }

    pub fn matrix(&self) -> &CsMat<f64> {
        &self.matrix
    }

    /// Solves `A x = rhs`. `guess` seeds the iterative solver.
    pub fn solve(&self, rhs: &[f64], guess: Option<&[f64]>) -> Result<Vec<f64>> {
        if rhs.len() != self.size() {
            return Err(Error::Solver(format!(
                "right-hand side has {} entries, expected {}",
                rhs.len(),
                self.size()
            )));
        }
        let bnorm = norm(rhs);
        if bnorm == 0.0 {
            return Ok(vec![0.0; rhs.len()]);
        }
        match &self.backend {
            Backend::Direct(ldl) => {
                let mut x: Vec<f64> = ldl.solve(rhs);
                let mut rel = norm(&self.residual(&x, rhs)) / bnorm;
                for _ in 0..3 {
                    if rel <= self.settings.rel_tol {
                        break;
                    }
                    let r = self.residual(&x, rhs);
                    let dx: Vec<f64> = ldl.solve(&r);
                    for (xi, di) in x.iter_mut().zip(&dx) {
                        *xi += di;
                    }
                    rel = norm(&self.residual(&x, rhs)) / bnorm;
                }
                if !(rel <= DIRECT_FAILURE_RESIDUAL) {
                    return Err(Error::Solver(format!(
                        "direct solve stalled at relative residual {rel:e}"
                    )));
                }
                Ok(x)
            }
            Backend::Cg { inv_diag } => self.cg(rhs, guess, inv_diag, bnorm),
        }
    }

    fn residual(&self, x: &[f64], b: &[f64]) -> Vec<f64> {
        let ax = self.apply(x);
        b.iter().zip(&ax).map(|(b, a)| b - a).collect()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; x.len()];
        for (row, vec) in self.matrix.outer_iterator().enumerate() {
            y[row] = vec.iter().map(|(c, v)| v * x[c]).sum();
        }
        y
    }

    fn cg(&self, b: &[f64], guess: Option<&[f64]>, inv_diag: &[f64], bnorm: f64) -> Result<Vec<f64>> {
        let n = b.len();
        let mut x = guess.map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        let mut r = self.residual(&x, b);
        let mut z: Vec<f64> = r.iter().zip(inv_diag).map(|(r, d)| r * d).collect();
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        for _ in 0..self.settings.max_iterations {
            if norm(&r) / bnorm <= self.settings.rel_tol {
                return Ok(x);
            }
            let ap = self.apply(&p);
            let pap = dot(&p, &ap);
            if !(pap > 0.0) {
                return Err(Error::Solver("operator is not positive definite".into()));
            }
            let alpha = rz / pap;
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            for i in 0..n {
                z[i] = r[i] * inv_diag[i];
            }
            let rz_next = dot(&r, &z);
            let beta = rz_next / rz;
            rz = rz_next;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
        }
        let rel = norm(&self.residual(&x, b)) / bnorm;
        if rel <= self.settings.rel_tol {
            Ok(x)
        } else {
            Err(Error::Solver(format!(
                "conjugate gradients did not converge in {} iterations (relative residual {rel:e})",
                self.settings.max_iterations
            )))
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
