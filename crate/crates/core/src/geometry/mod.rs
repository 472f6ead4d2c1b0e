//! Meshing of the fundamental domain, nodal fields, and the differential
//! operators of the Euclidean and conformal metrics.

pub mod field;
pub mod integrate;
pub mod mesh;
pub mod metric;
pub mod ops;

pub use field::{Field, MatrixField, ScalarField, VectorField};
pub use integrate::{integrate_gradient, GradientIntegrator, IntegratedField};
pub use mesh::{build_annulus_mesh, Mesh};
pub use metric::{catenoid_rho, Metric, MetricForm, MetricSource};
pub use ops::{div_e, div_n, grad_e, grad_n, jacobian, lie_bracket};
