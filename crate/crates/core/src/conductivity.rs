//! Conductivity tensors: the `(xi, zeta, s)` parameterization, validation of
//! uniform ellipticity, the SPD square root, and the split `A = dets * Ã`
//! into a scale and a unit-determinant anisotropy.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{Matrix2, Point2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{MatrixField, Mesh, ScalarField};

/// Relative tolerance for symmetry of SPD inputs.
pub const SYMMETRY_TOLERANCE: f64 = 1e-12;

/// `gamma = s * [[xi, zeta], [zeta, (1 + zeta^2) / xi]]` at every node.
#[derive(Debug, Clone)]
pub struct ConductivityField {
    pub xi: ScalarField,
    pub zeta: ScalarField,
    /// `det(gamma)^(1/2)`.
    pub s: ScalarField,
}

/// Unit-determinant anisotropy `Ã` and scale `dets = det(A)^(1/2)`, with
/// `A = dets * Ã` and `gamma = A^2 = dets^2 * Ã^2`.
#[derive(Debug, Clone)]
pub struct AnisotropyField {
    pub atilde: MatrixField,
    pub dets: ScalarField,
}

/// Outcome of the uniform-ellipticity check.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EllipticityReport {
    pub kappa: f64,
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
    pub failing_nodes: Vec<usize>,
    pub pass: bool,
}

/// The `(xi, zeta, s)` parameterization of one tensor.
pub fn gamma_from_parameters(xi: f64, zeta: f64, s: f64) -> Matrix2<f64> {
    s * Matrix2::new(xi, zeta, zeta, (1.0 + zeta * zeta) / xi)
}

/// Inverse of [`gamma_from_parameters`]: `s = det^(1/2)`, `xi = g11 / s`,
/// `zeta = g12 / s`.
pub fn parameters_from_gamma(g: &Matrix2<f64>) -> (f64, f64, f64) {
    let s = g.determinant().max(0.0).sqrt();
    let off = 0.5 * (g[(0, 1)] + g[(1, 0)]);
    (g[(0, 0)] / s, off / s, s)
}

impl ConductivityField {
    pub fn new(xi: ScalarField, zeta: ScalarField, s: ScalarField) -> Result<Self> {
        xi.check_same_mesh(&zeta)?;
        xi.check_same_mesh(&s)?;
        Ok(ConductivityField { xi, zeta, s })
    }

    pub fn constant(mesh: &Arc<Mesh>, xi: f64, zeta: f64, s: f64) -> Self {
        ConductivityField {
            xi: ScalarField::constant(mesh, xi),
            zeta: ScalarField::constant(mesh, zeta),
            s: ScalarField::constant(mesh, s),
        }
    }

    /// Recovers the parameterization from a tensor field.
    pub fn from_gamma(gamma: &MatrixField) -> Result<Self> {
        let params = gamma.try_map(|i, g| {
            check_spd(g).map_err(|reason| Error::Validity { node: i, reason })?;
            Ok(parameters_from_gamma(g))
        })?;
        Ok(ConductivityField {
            xi: params.map(|p| p.0),
            zeta: params.map(|p| p.1),
            s: params.map(|p| p.2),
        })
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        self.xi.mesh()
    }

    pub fn gamma_at(&self, node: usize) -> Result<Matrix2<f64>> {
        gamma_at(self, node)
    }

    /// The tensor at every node.
    pub fn gamma(&self) -> Result<MatrixField> {
        self.xi.try_map(|i, _| gamma_at(self, i))
    }
}

/// Tensor at one node; rejects non-positive `xi` or `s`.
pub fn gamma_at(c: &ConductivityField, node: usize) -> Result<Matrix2<f64>> {
    if node >= c.xi.len() {
        return Err(Error::Parameter(format!("node {node} does not exist")));
    }
    let (xi, zeta, s) = (c.xi[node], c.zeta[node], c.s[node]);
    if !(xi > 0.0 && xi.is_finite()) {
        return Err(Error::Validity {
            node,
            reason: format!("xi = {xi} is not positive"),
        });
    }
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::Validity {
            node,
            reason: format!("s = {s} is not positive"),
        });
    }
    if !zeta.is_finite() {
        return Err(Error::Validity {
            node,
            reason: "zeta is not finite".into(),
        });
    }
    Ok(gamma_from_parameters(xi, zeta, s))
}

/// Eigenvalues `(small, large)` and the unit eigenvector of the large one,
/// for a symmetric 2x2 matrix.
pub fn sym_eigen(m: &Matrix2<f64>) -> (f64, f64, Vector2<f64>) {
    let a = m[(0, 0)];
    let c = m[(1, 1)];
    let b = 0.5 * (m[(0, 1)] + m[(1, 0)]);
    let mean = 0.5 * (a + c);
    let half_diff = 0.5 * (a - c);
    let radius = half_diff.hypot(b);
    let angle = 0.5 * b.atan2(half_diff);
    (mean - radius, mean + radius, Vector2::new(angle.cos(), angle.sin()))
}

fn check_spd(m: &Matrix2<f64>) -> std::result::Result<(), String> {
    if !m.iter().all(|v| v.is_finite()) {
        return Err("matrix has non-finite entries".into());
    }
    if (m[(0, 1)] - m[(1, 0)]).abs() > SYMMETRY_TOLERANCE * (1.0 + m.norm()) {
        return Err("matrix is not symmetric".into());
    }
    let (lo, _, _) = sym_eigen(m);
    if !(lo > 0.0) {
        return Err(format!("matrix is not positive definite (smallest eigenvalue {lo:e})"));
    }
    Ok(())
}

/// Unique SPD square root through the closed-form eigendecomposition.
pub fn sqrt_spd(m: &Matrix2<f64>) -> Result<Matrix2<f64>> {
    check_spd(m).map_err(|reason| Error::Validity { node: 0, reason })?;
    Ok(sqrt_spd_unchecked(m))
}

pub(crate) fn sqrt_spd_unchecked(m: &Matrix2<f64>) -> Matrix2<f64> {
    let (lo, hi, v) = sym_eigen(m);
    let w = Vector2::new(-v.y, v.x);
    hi.sqrt() * v * v.transpose() + lo.sqrt() * w * w.transpose()
}

/// Pointwise SPD square root of a tensor field.
pub fn sqrt_spd_field(m: &MatrixField) -> Result<MatrixField> {
    m.try_map(|i, g| {
        check_spd(g).map_err(|reason| Error::Validity { node: i, reason })?;
        Ok(sqrt_spd_unchecked(g))
    })
}

/// `Ã = det(A)^(-1/2) A` (unit determinant) and `dets = det(A)^(1/2)`.
pub fn split_a(a: &MatrixField) -> Result<AnisotropyField> {
    let parts = a.try_map(|i, m| {
        check_spd(m).map_err(|reason| Error::Validity { node: i, reason })?;
        let dets = m.determinant().sqrt();
        Ok((m / dets, dets))
    })?;
    Ok(AnisotropyField {
        atilde: parts.map(|p| p.0),
        dets: parts.map(|p| p.1),
    })
}

impl AnisotropyField {
    /// `gamma = dets^2 * Ã^2`.
    pub fn gamma(&self) -> Result<MatrixField> {
        self.atilde.zip_map(&self.dets, |a, d| d * d * a * a)
    }
}

/// Checks `kappa^-1 <= eig(gamma) <= kappa` at every node.
pub fn validate(c: &ConductivityField, kappa: f64) -> Result<EllipticityReport> {
    if !(kappa > 1.0) {
        return Err(Error::Parameter(format!("kappa must exceed 1, got {kappa}")));
    }
    let mut report = EllipticityReport {
        kappa,
        min_eigenvalue: f64::INFINITY,
        max_eigenvalue: f64::NEG_INFINITY,
        failing_nodes: Vec::new(),
        pass: true,
    };
    for i in 0..c.xi.len() {
        let Ok(g) = gamma_at(c, i) else {
            report.failing_nodes.push(i);
            continue;
        };
        let (lo, hi, _) = sym_eigen(&g);
        report.min_eigenvalue = report.min_eigenvalue.min(lo);
        report.max_eigenvalue = report.max_eigenvalue.max(hi);
        if lo < kappa.recip() || hi > kappa {
            report.failing_nodes.push(i);
        }
    }
    report.pass = report.failing_nodes.is_empty();
    Ok(report)
}

/// A Gaussian bump centred at polar position `(radius, angle)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bump {
    pub radius: f64,
    pub angle: f64,
    pub amplitude: f64,
    /// Standard deviation of the Gaussian.
    pub scale: f64,
}

impl Bump {
    pub fn center(&self) -> Point2<f64> {
        Point2::new(self.radius * self.angle.cos(), self.radius * self.angle.sin())
    }

    pub fn eval(&self, p: Point2<f64>) -> f64 {
        let d2 = (p - self.center()).norm_squared();
        (-d2 / (2.0 * self.scale * self.scale)).exp()
    }
}

/// Smooth phantom on an annulus:
/// `xi = 1 + a_xi g_xi`, `zeta = a_zeta g_zeta`, `s = 1 + a_s g_s`, each bump
/// multiplied by a C-infinity cutoff that vanishes within `boundary_margin`
/// of either circle and reaches 1 after a further `transition_width`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub xi: Bump,
    pub zeta: Bump,
    pub s: Bump,
    pub boundary_margin: f64,
    pub transition_width: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        let bump = |k: f64, amplitude: f64| Bump {
            radius: 1.4,
            angle: 2.0 * PI * k / 3.0,
            amplitude,
            scale: 0.3,
        };
        PhantomSpec {
            xi: bump(0.0, 0.5),
            zeta: bump(1.0, 0.4),
            s: bump(2.0, 0.5),
            boundary_margin: 0.1,
            transition_width: 0.3,
        }
    }
}

impl PhantomSpec {
    /// Evaluates `(xi, zeta, s)` at `p` for the annulus `r_inner < |p| < r_outer`.
    pub fn eval(&self, p: Point2<f64>, r_inner: f64, r_outer: f64) -> (f64, f64, f64) {
        let r = p.coords.norm();
        let dist = (r - r_inner).min(r_outer - r);
        let cut = smooth_step((dist - self.boundary_margin) / self.transition_width);
        (
            1.0 + self.xi.amplitude * cut * self.xi.eval(p),
            self.zeta.amplitude * cut * self.zeta.eval(p),
            1.0 + self.s.amplitude * cut * self.s.eval(p),
        )
    }

    /// Samples the phantom on an annulus mesh; the radii are read off the
    /// extreme node radii.
    pub fn sample(&self, mesh: &Arc<Mesh>) -> ConductivityField {
        let (r_inner, r_outer) = annulus_radii(mesh);
        let vals = crate::geometry::Field::from_fn(mesh, |_, p| self.eval(p, r_inner, r_outer));
        ConductivityField {
            xi: vals.map(|v| v.0),
            zeta: vals.map(|v| v.1),
            s: vals.map(|v| v.2),
        }
    }
}

/// Smallest and largest node radius.
pub fn annulus_radii(mesh: &Mesh) -> (f64, f64) {
    mesh.nodes().iter().fold((f64::INFINITY, 0.0), |(lo, hi), p| {
        let r = p.coords.norm();
        (lo.min(r), hi.max(r))
    })
}

/// The default three-bump phantom.
pub fn phantom_default(mesh: &Arc<Mesh>) -> ConductivityField {
    PhantomSpec::default().sample(mesh)
}

/// C-infinity step: 0 for `t <= 0`, 1 for `t >= 1`.
fn smooth_step(t: f64) -> f64 {
    let f = |x: f64| if x > 0.0 { (-1.0 / x).exp() } else { 0.0 };
    if t <= 0.0 {
        0.0
    } else if t >= 1.0 {
        1.0
    } else {
        f(t) / (f(t) + f(1.0 - t))
    }
}
