//! Three-step reconstruction of `gamma` from a power-density dataset:
//! the unit-determinant anisotropy `Ã` from the difference of the two
//! pairs' frame equations, the frame angle `theta` by integrating its
//! gradient, and `det(gamma)^(1/2)` by integrating the log-determinant
//! equation. Both steps 2 and 3 are anchored at the boundary node `x_m`
//! where the first boundary condition attains its minimum.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::conductivity::{sqrt_spd, sqrt_spd_unchecked, AnisotropyField, ConductivityField};
use crate::datarep::{
    check_dataset, transfer_data, ConditionThresholds, ConditionsReport, GraphSmoothing, TransferData,
};
use crate::error::{Error, Result};
use crate::forward::{BoundaryCondition, PowerDensityDataset};
use crate::geometry::integrate::DEFAULT_CURL_WARNING;
use crate::geometry::{
    grad_e, grad_n, lie_bracket, GradientIntegrator, IntegratedField, MatrixField, Mesh, Metric, MetricForm,
    ScalarField, VectorField,
};
use crate::sparse::SolverSettings;

/// `J`, rotation by a quarter turn.
const J: Matrix2<f64> = Matrix2::new(0.0, -1.0, 1.0, 0.0);

/// Relative tolerance for treating two boundary values of `f1` as tied.
pub const TIE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructionSettings {
    pub form: MetricForm,
    pub solver: SolverSettings,
    pub thresholds: ConditionThresholds,
    pub curl_warning: f64,
    /// Optional smoothing of the power densities before differentiation.
    pub smoothing: Option<GraphSmoothing>,
}

impl Default for ReconstructionSettings {
    fn default() -> Self {
        ReconstructionSettings {
            form: MetricForm::Manifold,
            solver: SolverSettings::default(),
            thresholds: ConditionThresholds::default(),
            curl_warning: DEFAULT_CURL_WARNING,
            smoothing: None,
        }
    }
}

/// `gamma` on the boundary nodes, the only place it is assumed known.
#[derive(Debug, Clone)]
pub struct BoundaryGamma {
    values: Vec<Option<Matrix2<f64>>>,
}

impl BoundaryGamma {
    pub fn new(mesh: &Mesh, entries: impl IntoIterator<Item = (usize, Matrix2<f64>)>) -> Result<Self> {
        let mut values = vec![None; mesh.node_count()];
        for (i, g) in entries {
            if !mesh.is_boundary(i) {
                return Err(Error::Parameter(format!("node {i} is not on the boundary")));
            }
            values[i] = Some(g);
        }
        Ok(BoundaryGamma { values })
    }

    /// Restriction of a known conductivity to the boundary.
    pub fn from_conductivity(c: &ConductivityField) -> Result<Self> {
        let mesh = c.mesh();
        let entries = mesh
            .boundary_nodes()
            .into_iter()
            .map(|i| Ok((i, c.gamma_at(i)?)))
            .collect::<Result<Vec<_>>>()?;
        BoundaryGamma::new(mesh, entries)
    }

    pub fn get(&self, node: usize) -> Option<Matrix2<f64>> {
        self.values.get(node).copied().flatten()
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, Matrix2<f64>)> + '_ {
        self.values.iter().enumerate().filter_map(|(i, g)| g.map(|g| (i, g)))
    }
}

/// Anchor values at `x_m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub node: usize,
    pub theta: f64,
    /// `log det A(x_m) = log det(gamma(x_m))^(1/2)`.
    pub log_det_a: f64,
    /// Another boundary node attains the same minimum within tolerance.
    pub tied: bool,
}

/// Locates `x_m`, the boundary node minimizing `f1` (lowest index on ties),
/// and evaluates `theta(x_m) = arg(-A nu)` with `nu` the outward normal.
pub fn theta_at_xm(f1: &BoundaryCondition, gamma_boundary: &BoundaryGamma, mesh: &Mesh) -> Result<Anchor> {
    let boundary = mesh.boundary_nodes();
    let values: Vec<(usize, f64)> = boundary.iter().map(|&i| (i, f1.eval(mesh.node(i)))).collect();
    let (mut node, mut best) = (usize::MAX, f64::INFINITY);
    for &(i, v) in &values {
        if v < best || (v == best && i < node) {
            node = i;
            best = v;
        }
    }
    if node == usize::MAX {
        return Err(Error::Mesh("mesh has no boundary nodes".into()));
    }
    let tol = TIE_TOLERANCE * (1.0 + best.abs());
    let tied = values.iter().any(|&(i, v)| i != node && v - best <= tol);
    if tied {
        log::warn!("boundary minimum of f1 is attained at several nodes; using node {node}");
    }
    let gamma = gamma_boundary
        .get(node)
        .ok_or_else(|| Error::Reconstruction(format!("gamma is not known at x_m = node {node}")))?;
    let a = sqrt_spd(&gamma).map_err(|_| Error::Validity {
        node,
        reason: "boundary gamma is not SPD".into(),
    })?;
    let dir = -(a * mesh.normal(node));
    Ok(Anchor {
        node,
        theta: dir.y.atan2(dir.x),
        log_det_a: a.determinant().ln(),
        tied,
    })
}

/// Per-node `rho` for the manifold form, 1 for the Euclidean form.
fn metric_scale(metric: &Metric, form: MetricForm) -> ScalarField {
    match form {
        MetricForm::Euclidean => metric.rho().map(|_| 1.0),
        MetricForm::Manifold => metric.rho().clone(),
    }
}

fn form_gradient(f: &ScalarField, metric: &Metric, form: MetricForm) -> Result<VectorField> {
    match form {
        MetricForm::Euclidean => Ok(grad_e(f)),
        MetricForm::Manifold => grad_n(f, metric),
    }
}

/// Cosine and sine of `theta_B - theta_A` from the cross power densities:
/// `R_A^T R_B = T_A H_cross T_B^T`, projected to the nearest rotation.
pub fn pair_angle(
    data: &PowerDensityDataset,
    a: &TransferData,
    b: &TransferData,
    form: MetricForm,
) -> Result<(ScalarField, ScalarField)> {
    let cross = data.cross_block(form);
    let cs = cross.try_map(|node, h| {
        let m = a.t[node] * h * b.t[node].transpose();
        let (c, s) = (m[(0, 0)] + m[(1, 1)], m[(1, 0)] - m[(0, 1)]);
        let r = c.hypot(s);
        if r > 0.0 {
            Ok((c / r, s / r))
        } else {
            Err(Error::Admissibility {
                node,
                reason: "cross power densities give no rotation between the pairs".into(),
            })
        }
    })?;
    Ok((cs.map(|v| v.0), cs.map(|v| v.1)))
}

/// Output of step 1.
#[derive(Debug, Clone)]
pub struct AtildeStep {
    pub atilde: MatrixField,
    pub w: VectorField,
    pub z: VectorField,
    /// Nodes where the closed form was not positive definite and the value
    /// was copied from the nearest valid node.
    pub filled: Vec<usize>,
}

/// Unit-determinant symmetric `X` with `X w = z`; `None` unless `w . z > 0`.
pub fn solve_atilde_squared(w: &Vector2<f64>, z: &Vector2<f64>) -> Option<Matrix2<f64>> {
    let wz = w.dot(z);
    if !(wz > 0.0) || !wz.is_finite() {
        return None;
    }
    let off = z.x * z.y - w.x * w.y;
    Some(Matrix2::new(z.x * z.x + w.y * w.y, off, off, z.y * z.y + w.x * w.x) / wz)
}

/// Step 1: subtracting the frame equations of the two pairs leaves
/// `Ã^2 w = z` with `w = grad(theta_A - theta_B) - (V^a_A - V^a_B)` and
/// `z = -J (D_A - D_B) / 2`, solved in closed form at every node.
pub fn reconstruct_atilde(
    data: &PowerDensityDataset,
    a: &TransferData,
    b: &TransferData,
    form: MetricForm,
    threshold: f64,
) -> Result<AtildeStep> {
    let metric = &data.metric;
    let mesh = Arc::clone(data.mesh());
    let (c, s) = pair_angle(data, a, b, form)?;
    let dc = form_gradient(&c, metric, form)?;
    let ds = form_gradient(&s, metric, form)?;
    let scale = metric_scale(metric, form);
    let n = mesh.node_count();
    let mut w = Vec::with_capacity(n);
    let mut z = Vec::with_capacity(n);
    for i in 0..n {
        // grad(theta_B - theta_A) = c grad s - s grad c, free of 2 pi jumps
        let d_delta = c[i] * ds[i] - s[i] * dc[i];
        let wi = -d_delta - (a.v.v12a[i] - b.v.v12a[i]);
        // length in the metric of the form
        let magnitude = scale[i] * wi.norm();
        if !(magnitude > threshold) {
            return Err(Error::ConditionTwo {
                node: i,
                quantity: "|w|",
                magnitude,
                threshold,
            });
        }
        w.push(wi);
        z.push(-0.5 * J * (a.d[i] - b.d[i]));
    }
    let mut squared: Vec<Option<Matrix2<f64>>> = (0..n).map(|i| solve_atilde_squared(&w[i], &z[i])).collect();
    let filled: Vec<usize> = (0..n).filter(|&i| squared[i].is_none()).collect();
    if filled.len() == n {
        return Err(Error::Reconstruction(
            "the anisotropy equation has no positive definite solution at any node".into(),
        ));
    }
    if !filled.is_empty() {
        log::warn!(
            "anisotropy step filled {} nodes from nearest valid neighbours",
            filled.len()
        );
        let valid: Vec<usize> = (0..n).filter(|&i| squared[i].is_some()).collect();
        for &i in &filled {
            let p = mesh.node(i);
            let nearest = valid
                .iter()
                .copied()
                .min_by(|&x, &y| {
                    let dx = (mesh.node(x) - p).norm_squared();
                    let dy = (mesh.node(y) - p).norm_squared();
                    dx.total_cmp(&dy).then(x.cmp(&y))
                })
                .expect("at least one valid node");
            squared[i] = squared[nearest];
        }
    }
    let atilde = squared
        .into_iter()
        .map(|x| sqrt_spd_unchecked(&x.expect("filled above")))
        .collect();
    Ok(AtildeStep {
        atilde: MatrixField::new(Arc::clone(&mesh), atilde)?,
        w: VectorField::new(Arc::clone(&mesh), w)?,
        z: VectorField::new(mesh, z)?,
        filled,
    })
}

/// Euclidean `grad theta` from the frame equation of one pair. In the
/// manifold form this evaluates
/// `grad_N theta = V^a - Ã^-2 (rho^-2 [Ã_2, Ã_1] + rho^-2 J grad_N rho^2 / 2 + J D / 2)`
/// and converts with `grad_E = rho^2 grad_N`.
pub fn theta_gradient(
    atilde: &MatrixField,
    td: &TransferData,
    metric: &Metric,
    form: MetricForm,
) -> Result<VectorField> {
    let col = |k: usize| atilde.map(move |m| Vector2::new(m[(0, k)], m[(1, k)]));
    let bracket = lie_bracket(&col(1), &col(0))?;
    let rho = metric.rho();
    let grad_rho2 = match form {
        MetricForm::Euclidean => None,
        MetricForm::Manifold => Some(grad_n(&metric.rho_squared(), metric)?),
    };
    let values = (0..atilde.len())
        .map(|i| {
            let inv2 = (atilde[i] * atilde[i]).try_inverse().ok_or_else(|| Error::Validity {
                node: i,
                reason: "anisotropy is singular".into(),
            })?;
            Ok(match &grad_rho2 {
                None => td.v.v12a[i] - inv2 * (bracket[i] + 0.5 * J * td.d[i]),
                Some(g) => {
                    let r2 = rho[i] * rho[i];
                    let gn = td.v.v12a[i] - inv2 * (bracket[i] / r2 + 0.5 / r2 * J * g[i] + 0.5 * J * td.d[i]);
                    gn * r2
                }
            })
        })
        .collect::<Result<Vec<_>>>()?;
    VectorField::new(Arc::clone(atilde.mesh()), values)
}

/// Step 2: integrates `grad theta` from `theta(x_m)`.
pub fn reconstruct_theta(
    atilde: &MatrixField,
    td: &TransferData,
    metric: &Metric,
    form: MetricForm,
    integrator: &GradientIntegrator,
    theta0: f64,
) -> Result<IntegratedField> {
    let g = theta_gradient(atilde, td, metric, form)?;
    integrator.integrate(&g, theta0)
}

/// Rotation `R(theta)`, the frame `S = R T^-T` of one pair, in the chosen
/// form (`R_N = rho^-1 R_E`).
#[derive(Debug, Clone)]
pub struct FrameField {
    pub theta: ScalarField,
    pub r: MatrixField,
    pub s: MatrixField,
}

pub fn rotation(theta: f64) -> Matrix2<f64> {
    let (s, c) = theta.sin_cos();
    Matrix2::new(c, -s, s, c)
}

pub fn frame_field(theta: &ScalarField, td: &TransferData, metric: &Metric, form: MetricForm) -> Result<FrameField> {
    let scale = metric_scale(metric, form);
    let r = theta.map(|t| rotation(*t));
    let s = r.try_map(|i, rot| {
        let t_inv_t = td.t[i].try_inverse().ok_or_else(|| Error::Admissibility {
            node: i,
            reason: "transfer matrix is singular".into(),
        })?;
        Ok(rot * t_inv_t.transpose() / scale[i])
    })?;
    Ok(FrameField {
        theta: theta.clone(),
        r,
        s,
    })
}

/// Euclidean `grad log det A` from
/// `grad log det A = D + sum_pq g(grad H^qp, Ã S_p) Ã^-1 S_q`, evaluated in
/// the chosen form and converted with `grad_E = rho^2 grad_N`.
pub fn log_det_gradient(
    atilde: &MatrixField,
    frame: &FrameField,
    td: &TransferData,
    h2: &MatrixField,
    metric: &Metric,
    form: MetricForm,
) -> Result<VectorField> {
    let h_inv = h2.try_map(|node, h| {
        h.try_inverse().ok_or_else(|| Error::Admissibility {
            node,
            reason: "power-density block is singular".into(),
        })
    })?;
    let g11 = form_gradient(&h_inv.entry(0, 0), metric, form)?;
    let g12 = form_gradient(&h_inv.entry(0, 1), metric, form)?;
    let g22 = form_gradient(&h_inv.entry(1, 1), metric, form)?;
    let scale = metric_scale(metric, form);
    let values = (0..atilde.len())
        .map(|i| {
            let at = atilde[i];
            let at_inv = at.try_inverse().ok_or_else(|| Error::Validity {
                node: i,
                reason: "anisotropy is singular".into(),
            })?;
            let s = frame.s[i];
            let sp = [s.column(0).into_owned(), s.column(1).into_owned()];
            let grads = [[g11[i], g12[i]], [g12[i], g22[i]]];
            let r2 = scale[i] * scale[i];
            let mut sum = Vector2::zeros();
            for p in 0..2 {
                let asp = at * sp[p];
                for q in 0..2 {
                    sum += r2 * grads[q][p].dot(&asp) * (at_inv * sp[q]);
                }
            }
            Ok((td.d[i] + sum) * r2)
        })
        .collect::<Result<Vec<_>>>()?;
    VectorField::new(Arc::clone(atilde.mesh()), values)
}

/// Step 3: integrates `grad log det A` from `x_m` and returns
/// `s = det A = det(gamma)^(1/2)` together with the integration record.
#[allow(clippy::too_many_arguments)]
pub fn reconstruct_dets(
    atilde: &MatrixField,
    frame: &FrameField,
    td: &TransferData,
    h2: &MatrixField,
    metric: &Metric,
    form: MetricForm,
    integrator: &GradientIntegrator,
    log_det_a0: f64,
) -> Result<(ScalarField, IntegratedField)> {
    let g = log_det_gradient(atilde, frame, td, h2, metric, form)?;
    let integrated = integrator.integrate(&g, log_det_a0)?;
    Ok((integrated.field.map(|v| v.exp()), integrated))
}

/// `gamma = s Ã^2`.
pub fn assemble_gamma(atilde: &MatrixField, s: &ScalarField) -> Result<MatrixField> {
    atilde.check_same_mesh(s)?;
    atilde.try_map(|i, a| {
        let si = s[i];
        if !(si > 0.0 && si.is_finite()) {
            return Err(Error::Validity {
                node: i,
                reason: format!("determinant factor {si} is not positive"),
            });
        }
        let g = si * a * a;
        // exact symmetry; the product of a symmetric matrix with itself can
        // differ in the last bit
        let off = 0.5 * (g[(0, 1)] + g[(1, 0)]);
        Ok(Matrix2::new(g[(0, 0)], off, off, g[(1, 1)]))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComponentError {
    /// `|recon - truth|_L2 / |truth|_L2`, or the absolute L2 error when the
    /// truth vanishes identically.
    pub relative_l2: f64,
    pub linf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub xi: ComponentError,
    pub zeta: ComponentError,
    pub s: ComponentError,
    pub gamma_frobenius: ComponentError,
}

fn component_error(recon: &ScalarField, truth: &ScalarField) -> Result<ComponentError> {
    let diff = recon.zip_map(truth, |a, b| a - b)?;
    let norm = truth.l2_norm();
    Ok(ComponentError {
        relative_l2: if norm > 0.0 {
            diff.l2_norm() / norm
        } else {
            diff.l2_norm()
        },
        linf: diff.max_abs(),
    })
}

/// Errors of `recon` against `truth` per component of the `(xi, zeta, s)`
/// parameterization, plus the pointwise Frobenius error field.
pub fn evaluate_errors(truth: &ConductivityField, recon: &MatrixField) -> Result<(ErrorReport, ScalarField)> {
    let recovered = ConductivityField::from_gamma(recon)?;
    let truth_gamma = truth.gamma()?;
    let pointwise = recon.zip_map(&truth_gamma, |a, b| (a - b).norm())?;
    let norm = truth_gamma.l2_norm();
    let report = ErrorReport {
        xi: component_error(&recovered.xi, &truth.xi)?,
        zeta: component_error(&recovered.zeta, &truth.zeta)?,
        s: component_error(&recovered.s, &truth.s)?,
        gamma_frobenius: ComponentError {
            relative_l2: if norm > 0.0 {
                pointwise.l2_norm() / norm
            } else {
                pointwise.l2_norm()
            },
            linf: pointwise.max_abs(),
        },
    };
    Ok((report, pointwise))
}

/// Angle of `A grad u1`, the frame angle computable when `gamma` is known.
pub fn frame_angle_oracle(c: &ConductivityField, u1: &ScalarField) -> Result<ScalarField> {
    let g = grad_e(u1);
    g.try_map(|i, v| {
        let a = sqrt_spd(&c.gamma_at(i)?)?;
        let d = a * v;
        Ok(d.y.atan2(d.x))
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepTiming {
    pub step: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Diagnostics {
    pub form: MetricForm,
    pub conditions: ConditionsReport,
    pub anchor: Anchor,
    pub filled_nodes: Vec<usize>,
    pub theta_residual: f64,
    pub theta_holonomy: Vec<f64>,
    pub theta_curl_warning: bool,
    pub dets_residual: f64,
    pub dets_holonomy: Vec<f64>,
    pub dets_curl_warning: bool,
    /// Wall-clock time per step; not part of any reproducible output.
    #[serde(skip)]
    pub timings: Vec<StepTiming>,
}

#[derive(Debug, Clone)]
pub struct ReconstructionResult {
    pub atilde: AnisotropyField,
    pub theta: ScalarField,
    /// `det(gamma)^(1/2)`.
    pub s: ScalarField,
    pub gamma: MatrixField,
    pub frame: FrameField,
    pub step1: AtildeStep,
    pub diagnostics: Diagnostics,
}

impl ReconstructionResult {
    pub fn evaluate(&self, truth: &ConductivityField) -> Result<(ErrorReport, ScalarField)> {
        evaluate_errors(truth, &self.gamma)
    }
}

/// Replaces `H_E` by its smoothed version (and `H_N` accordingly).
pub fn smooth_dataset(data: &PowerDensityDataset, smoothing: &GraphSmoothing) -> Result<PowerDensityDataset> {
    let h_e = smoothing.apply(&data.h_e)?;
    PowerDensityDataset::from_parts(data.potentials.clone(), h_e, data.bcs, data.metric.clone())
}

/// Runs the data checks and the three steps.
pub fn reconstruct(
    data: &PowerDensityDataset,
    gamma_boundary: &BoundaryGamma,
    settings: &ReconstructionSettings,
) -> Result<ReconstructionResult> {
    let mut timings = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str, timings: &mut Vec<StepTiming>| {
        timings.push(StepTiming {
            step: name.to_string(),
            seconds: clock.elapsed().as_secs_f64(),
        });
        clock = Instant::now();
    };

    let (conditions, dets) = check_dataset(data, settings.thresholds)?;
    if let Some(err) = conditions.to_error(Some(&dets)) {
        return Err(err);
    }
    let smoothed;
    let data = match &settings.smoothing {
        Some(sm) => {
            smoothed = smooth_dataset(data, sm)?;
            &smoothed
        }
        None => data,
    };
    let form = settings.form;
    let metric = &data.metric;
    let mesh = data.mesh();
    let td_a = transfer_data(data, 0, form)?;
    let td_b = transfer_data(data, 1, form)?;
    lap("data", &mut timings);

    let step1 = reconstruct_atilde(data, &td_a, &td_b, form, settings.thresholds.grad_ratio)?;
    lap("anisotropy", &mut timings);

    let anchor = theta_at_xm(&data.bcs[0], gamma_boundary, mesh)?;
    let integrator = GradientIntegrator::new(mesh, anchor.node, settings.solver, settings.curl_warning)?;
    let theta = reconstruct_theta(&step1.atilde, &td_a, metric, form, &integrator, anchor.theta)?;
    if theta.curl_warning {
        log::warn!(
            "theta gradient has relative curl residual {:.3e}",
            theta.relative_residual
        );
    }
    lap("theta", &mut timings);

    let frame = frame_field(&theta.field, &td_a, metric, form)?;
    let h2 = data.pair_block(0, form);
    let (s, dets_int) = reconstruct_dets(
        &step1.atilde,
        &frame,
        &td_a,
        &h2,
        metric,
        form,
        &integrator,
        anchor.log_det_a,
    )?;
    if dets_int.curl_warning {
        log::warn!(
            "log det A gradient has relative curl residual {:.3e}",
            dets_int.relative_residual
        );
    }
    let gamma = assemble_gamma(&step1.atilde, &s)?;
    lap("determinant", &mut timings);

    let diagnostics = Diagnostics {
        form,
        conditions,
        anchor,
        filled_nodes: step1.filled.clone(),
        theta_residual: theta.relative_residual,
        theta_holonomy: theta.holonomy.clone(),
        theta_curl_warning: theta.curl_warning,
        dets_residual: dets_int.relative_residual,
        dets_holonomy: dets_int.holonomy.clone(),
        dets_curl_warning: dets_int.curl_warning,
        timings,
    };
    Ok(ReconstructionResult {
        atilde: AnisotropyField {
            atilde: step1.atilde.clone(),
            dets: s.map(|v| v.sqrt()),
        },
        theta: theta.field,
        s,
        gamma,
        frame,
        step1,
        diagnostics,
    })
}
