//! Quantities computed from the power densities alone: the admissibility
//! conditions, the transfer matrix that orthonormalizes a measurement pair,
//! the V-fields built from its derivatives, and the log-determinant field D.

use std::sync::Arc;

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::PowerDensityDataset;
use crate::geometry::{grad_e, grad_n, MatrixField, Mesh, Metric, MetricForm, ScalarField, VectorField};

/// Thresholds below which the two data conditions are reported as failing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConditionThresholds {
    pub c0: f64,
    pub grad_ratio: f64,
}

impl Default for ConditionThresholds {
    fn default() -> Self {
        ConditionThresholds {
            c0: 1e-3,
            grad_ratio: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionsReport {
    /// Minimum over nodes of `det(grad_N u1, grad_N u2)` and
    /// `det(grad_N u3, grad_N u4)`.
    pub c0: f64,
    /// Minimum over nodes of `|grad_N log(det_12 / det_34)|_N`.
    pub min_grad_ratio: f64,
    pub thresholds: ConditionThresholds,
    pub condition_one: bool,
    pub condition_two: bool,
    pub failing_condition_one: Vec<usize>,
    pub failing_condition_two: Vec<usize>,
}

impl ConditionsReport {
    pub fn pass(&self) -> bool {
        self.condition_one && self.condition_two
    }

    /// The error the pipeline aborts with, if any condition fails.
    pub fn to_error(&self, dets: Option<&PairDeterminants>) -> Option<Error> {
        if let Some(&node) = self.failing_condition_one.first() {
            let value = dets.map_or(f64::NAN, |d| d.first[node].min(d.second[node]));
            return Some(Error::Admissibility {
                node,
                reason: format!(
                    "condition 1: pair determinant {value:.3e} is below {:.3e} ({} failing nodes)",
                    self.thresholds.c0,
                    self.failing_condition_one.len()
                ),
            });
        }
        self.failing_condition_two.first().map(|&node| Error::ConditionTwo {
            node,
            quantity: "|grad log(det_A / det_B)|",
            magnitude: dets.map_or(f64::NAN, |d| d.ratio_gradient_norm[node]),
            threshold: self.thresholds.grad_ratio,
        })
    }
}

/// Nodal quantities behind a [`ConditionsReport`].
#[derive(Debug, Clone)]
pub struct PairDeterminants {
    pub first: ScalarField,
    pub second: ScalarField,
    pub ratio_gradient_norm: ScalarField,
}

fn det_columns(a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    a.x * b.y - a.y * b.x
}

/// Evaluates both pair determinants in the `g_N` gradients and the `g_N`
/// length of the gradient of their log ratio.
pub fn pair_determinants(potentials: &[ScalarField; 4], metric: &Metric) -> Result<PairDeterminants> {
    let g: Vec<VectorField> = potentials.iter().map(|u| grad_n(u, metric)).collect::<Result<_>>()?;
    let first = g[0].zip_map(&g[1], det_columns)?;
    let second = g[2].zip_map(&g[3], det_columns)?;
    // rho^-4 cancels in the ratio; work with Euclidean determinants so the
    // logarithm is taken of O(1) numbers.
    let ge: Vec<VectorField> = potentials.iter().map(grad_e).collect();
    let e1 = ge[0].zip_map(&ge[1], det_columns)?;
    let e2 = ge[2].zip_map(&ge[3], det_columns)?;
    let log_ratio = e1.zip_map(&e2, |a, b| (a.abs() / b.abs()).ln())?;
    let grad = grad_e(&log_ratio);
    // |grad_N f|_N = rho |rho^-2 grad_E f| = |grad_E f| / rho
    let ratio_gradient_norm = grad.zip_map(metric.rho(), |v, r| {
        let n = v.norm() / r;
        if n.is_finite() {
            n
        } else {
            0.0
        }
    })?;
    Ok(PairDeterminants {
        first,
        second,
        ratio_gradient_norm,
    })
}

pub fn check_conditions(
    potentials: &[ScalarField; 4],
    metric: &Metric,
    thresholds: ConditionThresholds,
) -> Result<(ConditionsReport, PairDeterminants)> {
    let dets = pair_determinants(potentials, metric)?;
    let n = dets.first.len();
    let mut c0 = f64::INFINITY;
    let mut min_grad_ratio = f64::INFINITY;
    let mut failing_one = Vec::new();
    let mut failing_two = Vec::new();
    for i in 0..n {
        let d = dets.first[i].min(dets.second[i]);
        c0 = c0.min(d);
        if !(d > thresholds.c0) {
            failing_one.push(i);
        }
        let r = dets.ratio_gradient_norm[i];
        min_grad_ratio = min_grad_ratio.min(r);
        if !(r > thresholds.grad_ratio) {
            failing_two.push(i);
        }
    }
    let report = ConditionsReport {
        c0,
        min_grad_ratio,
        thresholds,
        condition_one: failing_one.is_empty(),
        condition_two: failing_two.is_empty(),
        failing_condition_one: failing_one,
        failing_condition_two: failing_two,
    };
    Ok((report, dets))
}

/// Convenience wrapper over the dataset's potentials and metric.
pub fn check_dataset(
    data: &PowerDensityDataset,
    thresholds: ConditionThresholds,
) -> Result<(ConditionsReport, PairDeterminants)> {
    check_conditions(&data.potentials, &data.metric, thresholds)
}

/// `T = [[H11^-1/2, 0], [-H12 H11^-1/2 det^-1/2, H11^1/2 det^-1/2]]`.
pub fn transfer_matrix_at(h: &Matrix2<f64>) -> Option<Matrix2<f64>> {
    let h11 = h[(0, 0)];
    let det = h.determinant();
    if !(h11 > 0.0 && det > 0.0) {
        return None;
    }
    let a = h11.sqrt();
    let b = det.sqrt();
    Some(Matrix2::new(1.0 / a, 0.0, -h[(0, 1)] / (a * b), a / b))
}

pub fn transfer_matrix(h2: &MatrixField) -> Result<MatrixField> {
    h2.try_map(|node, h| {
        transfer_matrix_at(h).ok_or_else(|| Error::Admissibility {
            node,
            reason: format!(
                "power-density block has H11 = {:.3e} and det = {:.3e}; both must be positive",
                h[(0, 0)],
                h.determinant()
            ),
        })
    })
}

/// Worst-case defects of the identities every dataset satisfies by
/// construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataIdentities {
    /// `max |T H T^T - I|` over both pairs, both metric forms and all nodes.
    pub transfer_orthonormality: f64,
    /// `max |rho^2 H_N - H_E| / max |H_E|`, nodewise.
    pub pullback_mismatch: f64,
    pub asymmetry: f64,
}

pub fn data_identities(data: &PowerDensityDataset) -> Result<DataIdentities> {
    let mut worst: f64 = 0.0;
    for form in [MetricForm::Euclidean, MetricForm::Manifold] {
        for pair in 0..2 {
            let h = data.pair_block(pair, form);
            let t = transfer_matrix(&h)?;
            for (t, h) in t.values().iter().zip(h.values()) {
                worst = worst.max((t * h * t.transpose() - Matrix2::identity()).abs().max());
            }
        }
    }
    Ok(DataIdentities {
        transfer_orthonormality: worst,
        pullback_mismatch: data.pullback_mismatch(),
        asymmetry: data.asymmetry(),
    })
}

/// `V_ij = sum_k grad(T_ik) (T^-1)_kj` and `V^a = (V12 - V21) / 2`.
#[derive(Debug, Clone)]
pub struct VFields {
    pub v11: VectorField,
    pub v12: VectorField,
    pub v21: VectorField,
    pub v22: VectorField,
    pub v12a: VectorField,
}

/// V-fields of `t`, with `grad_N` in the manifold form and `grad_E` in the
/// Euclidean form.
pub fn v_fields(t: &MatrixField, metric: &Metric, form: MetricForm) -> Result<VFields> {
    let inv = t.try_map(|node, m| {
        m.try_inverse().ok_or_else(|| Error::Admissibility {
            node,
            reason: "transfer matrix is singular".into(),
        })
    })?;
    let grad = |f: &ScalarField| match form {
        MetricForm::Euclidean => Ok(grad_e(f)),
        MetricForm::Manifold => grad_n(f, metric),
    };
    let mut dt = [[None, None], [None, None]];
    for (i, row) in dt.iter_mut().enumerate() {
        for (k, slot) in row.iter_mut().enumerate() {
            *slot = Some(grad(&t.entry(i, k))?);
        }
    }
    let dt = dt.map(|row| row.map(|g| g.expect("filled above")));
    let v = |i: usize, j: usize| -> Result<VectorField> {
        let mesh = Arc::clone(t.mesh());
        let values = (0..t.len())
            .map(|n| dt[i][0][n] * inv[n][(0, j)] + dt[i][1][n] * inv[n][(1, j)])
            .collect();
        VectorField::new(mesh, values)
    };
    let v11 = v(0, 0)?;
    let v12 = v(0, 1)?;
    let v21 = v(1, 0)?;
    let v22 = v(1, 1)?;
    let v12a = v12.zip_map(&v21, |a, b| 0.5 * (a - b))?;
    Ok(VFields {
        v11,
        v12,
        v21,
        v22,
        v12a,
    })
}

/// `D = grad log(det H) / 2` of a pair block expressed in `form`.
pub fn d_field(h2: &MatrixField, metric: &Metric, form: MetricForm) -> Result<VectorField> {
    let log_det = h2.try_map(|node, h| {
        let d = h.determinant();
        if d > 0.0 {
            Ok(0.5 * d.ln())
        } else {
            Err(Error::Admissibility {
                node,
                reason: format!("power-density determinant {d:.3e} is not positive"),
            })
        }
    })?;
    match form {
        MetricForm::Euclidean => Ok(grad_e(&log_det)),
        MetricForm::Manifold => grad_n(&log_det, metric),
    }
}

/// Cross-check of the two D forms against the metric substitution rules.
#[derive(Debug, Clone)]
pub struct DAudit {
    pub d_e: VectorField,
    pub d_n: VectorField,
    /// `D_N - rho^-2 (D_E - grad_E log rho^2)`, which vanishes up to recovery
    /// error.
    pub corrected: VectorField,
    /// `D_N - (rho^-2 D_E - grad_E rho^2)`, the alternative substitution.
    pub alternative: VectorField,
}

pub fn d_audit(data: &PowerDensityDataset, pair: usize) -> Result<DAudit> {
    let metric = &data.metric;
    let d_e = d_field(
        &data.pair_block(pair, MetricForm::Euclidean),
        metric,
        MetricForm::Euclidean,
    )?;
    let d_n = d_field(
        &data.pair_block(pair, MetricForm::Manifold),
        metric,
        MetricForm::Manifold,
    )?;
    let rho2 = metric.rho_squared();
    let grad_log_rho2 = grad_e(&rho2.map(|r| r.ln()));
    let grad_rho2 = grad_e(&rho2);
    let n = d_e.len();
    let mesh = Arc::clone(d_e.mesh());
    let corrected = (0..n).map(|i| d_n[i] - (d_e[i] - grad_log_rho2[i]) / rho2[i]).collect();
    let alternative = (0..n).map(|i| d_n[i] - (d_e[i] / rho2[i] - grad_rho2[i])).collect();
    Ok(DAudit {
        corrected: VectorField::new(Arc::clone(&mesh), corrected)?,
        alternative: VectorField::new(mesh, alternative)?,
        d_e,
        d_n,
    })
}

/// Everything the reconstruction needs from one measurement pair.
#[derive(Debug, Clone)]
pub struct TransferData {
    pub t: MatrixField,
    pub v: VFields,
    pub d: VectorField,
}

pub fn transfer_data(data: &PowerDensityDataset, pair: usize, form: MetricForm) -> Result<TransferData> {
    transfer_data_from_block(&data.pair_block(pair, form), &data.metric, form)
}

pub fn transfer_data_from_block(h2: &MatrixField, metric: &Metric, form: MetricForm) -> Result<TransferData> {
    let t = transfer_matrix(h2)?;
    let v = v_fields(&t, metric, form)?;
    let d = d_field(h2, metric, form)?;
    Ok(TransferData { t, v, d })
}

/// Gaussian graph smoothing for noisy data: each pass replaces a node value
/// by the average over itself and its neighbours, weighted by
/// `exp(-|x_i - x_j|^2 / (2 sigma^2))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSmoothing {
    pub sigma: f64,
    pub passes: usize,
}

impl GraphSmoothing {
    pub fn apply<T>(&self, values: &crate::geometry::Field<T>) -> Result<crate::geometry::Field<T>>
    where
        T: Copy + Send + Sync + std::ops::Add<Output = T> + std::ops::Mul<f64, Output = T>,
    {
        if !(self.sigma > 0.0) {
            return Err(Error::Parameter(format!(
                "smoothing sigma must be positive, got {}",
                self.sigma
            )));
        }
        let mesh: &Arc<Mesh> = values.mesh();
        let mut current = values.values().to_vec();
        for _ in 0..self.passes {
            current = (0..mesh.node_count())
                .map(|i| {
                    let xi = mesh.node(i);
                    let mut total = current[i];
                    let mut weight = 1.0;
                    for &j in mesh.neighbors(i) {
                        let w = (-(mesh.node(j) - xi).norm_squared() / (2.0 * self.sigma * self.sigma)).exp();
                        total = total + current[j] * w;
                        weight += w;
                    }
                    total * weight.recip()
                })
                .collect();
        }
        crate::geometry::Field::new(Arc::clone(mesh), current)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conductivity::phantom_default;
    use crate::forward::{assemble_dataset, BoundaryCondition};
    use crate::geometry::build_annulus_mesh;
    use crate::sparse::SolverSettings;
    use proptest::prelude::*;
    use std::f64::consts::E;

    fn close(a: &Matrix2<f64>, b: &Matrix2<f64>, tol: f64) -> bool {
        (a - b).norm() <= tol
    }

    #[test]
    fn identities_hold_on_simulated_data() {
        let m = Arc::new(build_annulus_mesh(E.recip(), E, 10, 40).unwrap());
        let metric = Metric::catenoid(&m).unwrap();
        let data = assemble_dataset(
            &metric,
            &phantom_default(&m),
            BoundaryCondition::reference_set(),
            SolverSettings::default(),
        )
        .unwrap();
        let id = data_identities(&data).unwrap();
        assert!(id.transfer_orthonormality < 1e-8, "{id:?}");
        assert!(id.pullback_mismatch < 1e-15, "{id:?}");
        assert_eq!(id.asymmetry, 0.0);
    }

    #[test]
    fn transfer_examples() {
        assert!(close(
            &transfer_matrix_at(&Matrix2::identity()).unwrap(),
            &Matrix2::identity(),
            1e-15
        ));
        let t = transfer_matrix_at(&Matrix2::new(4.0, 0.0, 0.0, 1.0)).unwrap();
        assert!(close(&t, &Matrix2::new(0.5, 0.0, 0.0, 1.0), 1e-15));
        let h = Matrix2::new(1.0, 0.5, 0.5, 1.0);
        let t = transfer_matrix_at(&h).unwrap();
        let q = 0.75f64.powf(-0.5);
        assert!(close(&t, &Matrix2::new(1.0, 0.0, -0.5 * q, q), 1e-15));
        assert!(close(&(t * h * t.transpose()), &Matrix2::identity(), 1e-14));
        assert!(transfer_matrix_at(&Matrix2::new(1.0, 1.0, 1.0, 1.0)).is_none());
        assert!(transfer_matrix_at(&Matrix2::new(-1.0, 0.0, 0.0, -1.0)).is_none());
    }

    fn spd() -> impl Strategy<Value = Matrix2<f64>> {
        (0.01f64..100.0, 0.01f64..100.0, 0.0f64..std::f64::consts::PI).prop_map(|(l1, l2, t)| {
            let v = Vector2::new(t.cos(), t.sin());
            let w = Vector2::new(-v.y, v.x);
            l1 * v * v.transpose() + l2 * w * w.transpose()
        })
    }

    proptest! {
        #[test]
        fn transfer_orthonormalizes(h in spd()) {
            let t = transfer_matrix_at(&h).unwrap();
            prop_assert!(t[(0, 0)] > 0.0 && t[(0, 1)] == 0.0);
            prop_assert!(close(&(t * h * t.transpose()), &Matrix2::identity(), 1e-8));
            let expected = h.determinant().powf(-0.5);
            prop_assert!((t.determinant() - expected).abs() <= 1e-10 * expected.max(1.0));
        }
    }

    fn small_annulus(n: usize) -> Arc<Mesh> {
        Arc::new(build_annulus_mesh(0.3, 0.7, n, 4 * n).unwrap())
    }

    #[test]
    fn conditions_on_affine_potentials() {
        let m = small_annulus(20);
        let flat = Metric::flat(&m);
        let u = [
            ScalarField::from_fn(&m, |_, p| p.x),
            ScalarField::from_fn(&m, |_, p| p.y),
            ScalarField::from_fn(&m, |_, p| p.x),
            ScalarField::from_fn(&m, |_, p| p.x * p.y + p.y),
        ];
        let (report, _) = check_conditions(&u, &flat, ConditionThresholds::default()).unwrap();
        assert!((report.c0 - 0.3).abs() < 1e-3, "c0 = {}", report.c0);
        assert!(report.min_grad_ratio > 0.5);
        assert!(report.pass());
    }

    #[test]
    fn duplicate_pair_fails_condition_two() {
        let m = small_annulus(10);
        let flat = Metric::flat(&m);
        let x = ScalarField::from_fn(&m, |_, p| p.x);
        let y = ScalarField::from_fn(&m, |_, p| p.y);
        let u = [x.clone(), y.clone(), x, y];
        let (report, dets) = check_conditions(&u, &flat, ConditionThresholds::default()).unwrap();
        assert!(report.condition_one);
        assert!(!report.condition_two);
        assert_eq!(report.failing_condition_two.len(), m.node_count());
        assert!(matches!(report.to_error(Some(&dets)), Some(Error::ConditionTwo { .. })));
    }

    #[test]
    fn v_field_examples() {
        let m = small_annulus(20);
        let flat = Metric::flat(&m);
        let c = MatrixField::from_fn(&m, |_, _| Matrix2::new(2.0, 0.0, 1.0, 3.0));
        let v = v_fields(&c, &flat, MetricForm::Euclidean).unwrap();
        for f in [&v.v11, &v.v12, &v.v21, &v.v22, &v.v12a] {
            assert!(f.values().iter().all(|x| x.norm() < 1e-12));
        }
        // t = 1 + x1: V11 = (1/t, 0), V22 = -(1/t, 0), off-diagonal fields vanish
        let worst = |n: usize| {
            let m = small_annulus(n);
            let flat = Metric::flat(&m);
            let t = MatrixField::from_fn(&m, |_, p| Matrix2::new(1.0 + p.x, 0.0, 0.0, 1.0 / (1.0 + p.x)));
            let v = v_fields(&t, &flat, MetricForm::Manifold).unwrap();
            let mut worst: f64 = 0.0;
            for (i, p) in m.nodes().iter().enumerate() {
                let exact = Vector2::new(1.0 / (1.0 + p.x), 0.0);
                worst = worst.max((v.v11[i] - exact).norm() / exact.norm());
                worst = worst.max((v.v22[i] + exact).norm() / exact.norm());
                assert_eq!(v.v12[i], Vector2::zeros());
                assert_eq!(v.v21[i], Vector2::zeros());
            }
            (worst, v, m)
        };
        let (coarse, _, _) = worst(20);
        let (fine, v, m) = worst(40);
        assert!(fine < 2e-2 && coarse / fine > 2.5, "{coarse} {fine}");
        for i in 0..m.node_count() {
            assert_eq!(v.v12a[i], 0.5 * (v.v12[i] - v.v21[i]));
        }
    }

    #[test]
    fn d_field_examples() {
        let m = small_annulus(20);
        let flat = Metric::flat(&m);
        let h = MatrixField::from_fn(&m, |_, _| Matrix2::new(2.0, 0.3, 0.3, 1.0));
        assert!(d_field(&h, &flat, MetricForm::Manifold)
            .unwrap()
            .values()
            .iter()
            .all(|v| v.norm() < 1e-12));
        let h = MatrixField::from_fn(&m, |_, p| Matrix2::new((2.0 * p.x).exp(), 0.0, 0.0, 1.0));
        for v in d_field(&h, &flat, MetricForm::Euclidean).unwrap().values() {
            assert!((v - Vector2::new(1.0, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn substitution_audit_prefers_corrected_rule() {
        let m = Arc::new(build_annulus_mesh(E.recip(), E, 20, 80).unwrap());
        let metric = Metric::catenoid(&m).unwrap();
        let data = assemble_dataset(
            &metric,
            &phantom_default(&m),
            BoundaryCondition::reference_set(),
            SolverSettings::default(),
        )
        .unwrap();
        let audit = d_audit(&data, 0).unwrap();
        let corrected = audit.corrected.l2_norm() / audit.d_n.l2_norm();
        let alternative = audit.alternative.l2_norm() / audit.d_n.l2_norm();
        assert!(corrected < 1e-2, "{corrected}");
        assert!(alternative > 0.5, "{alternative}");
    }

    #[test]
    fn swapping_pairs_swaps_outputs() {
        let m = Arc::new(build_annulus_mesh(E.recip(), E, 10, 40).unwrap());
        let metric = Metric::catenoid(&m).unwrap();
        let c = phantom_default(&m);
        let [f1, f2, _, f4] = BoundaryCondition::reference_set();
        let a = assemble_dataset(&metric, &c, [f1, f2, f2, f4], SolverSettings::default()).unwrap();
        let b = assemble_dataset(&metric, &c, [f2, f4, f1, f2], SolverSettings::default()).unwrap();
        let ta = transfer_data(&a, 0, MetricForm::Manifold).unwrap();
        let tb = transfer_data(&b, 1, MetricForm::Manifold).unwrap();
        assert_eq!(ta.t.values(), tb.t.values());
        assert_eq!(ta.d.values(), tb.d.values());
        assert_eq!(ta.v.v12a.values(), tb.v.v12a.values());
    }

    #[test]
    fn smoothing_preserves_constants() {
        let m = small_annulus(6);
        let f = ScalarField::constant(&m, 3.5);
        let s = GraphSmoothing { sigma: 0.1, passes: 3 }.apply(&f).unwrap();
        assert!(s.values().iter().all(|v| (v - 3.5).abs() < 1e-14));
    }
}
