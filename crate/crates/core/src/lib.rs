//! Reconstruction of anisotropic conductivities from power densities on a
//! conformally flat surface chart.

pub mod conductivity;
pub mod datarep;
pub mod error;
pub mod forward;
pub mod geometry;
pub mod io;
pub mod reconstruction;
pub mod sparse;

pub use error::{Error, Result};
pub use geometry::{
    build_annulus_mesh, Field, MatrixField, Mesh, Metric, MetricForm, MetricSource, ScalarField, VectorField,
};
