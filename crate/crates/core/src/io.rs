//! CSV and JSON artifacts.
//!
//! Floats are written with Rust's shortest round-trip formatting, so every
//! field read back from an export is bit-identical to the one written.
//! Layouts are documented in `docs/formats.md`.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{Matrix2, Matrix4, Point2};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::conductivity::ConductivityField;
use crate::error::{Error, Result};
use crate::forward::{BoundaryCondition, PowerDensityDataset};
use crate::geometry::metric::MetricSource;
use crate::geometry::{Field, MatrixField, Mesh, Metric, ScalarField};
use crate::reconstruction::{BoundaryGamma, ReconstructionResult};
use crate::sparse::SolverSettings;

/// Version of the dataset manifest layout.
pub const DATASET_SCHEMA_VERSION: u32 = 1;

/// Sidecar describing an exported dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub bcs: [BoundaryCondition; 4],
    pub metric: MetricSource,
    pub mesh: MeshInfo,
    pub solver: SolverSettings,
    /// Reserved for a measurement noise model; always `null` for now.
    pub noise: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshInfo {
    pub node_count: usize,
    pub triangle_count: usize,
    /// Free-form generator parameters.
    pub generator: serde_json::Value,
}

impl MeshInfo {
    pub fn new(mesh: &Mesh, generator: serde_json::Value) -> Self {
        MeshInfo {
            node_count: mesh.node_count(),
            triangle_count: mesh.triangle_count(),
            generator,
        }
    }
}

/// Creates `dir` and its parents.
pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        reason: e.to_string(),
    })
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new().from_writer(file))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        kind => Error::Parse {
            path: path.to_path_buf(),
            line,
            reason: format!("{kind:?}"),
        },
    }
}

/// Shortest round-trip form, with an exponent for very small or large values.
fn num(x: f64) -> String {
    format!("{x:?}")
}

fn write_table(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a table with exactly the given header; returns the rows as strings
/// together with their line numbers.
fn read_table(path: &Path, header: &[&str]) -> Result<Vec<(usize, csv::StringRecord)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let found = r.headers().map_err(|e| csv_error(path, e))?.clone();
    if found.iter().ne(header.iter().copied()) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            reason: format!(
                "expected header {:?}, found {:?}",
                header.join(","),
                found.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }
    r.records()
        .map(|rec| {
            let rec = rec.map_err(|e| csv_error(path, e))?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            Ok((line, rec))
        })
        .collect()
}

fn parse<T: std::str::FromStr>(path: &Path, line: usize, text: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    text.parse().map_err(|e: T::Err| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason: format!("{text:?}: {e}"),
    })
}

/// Writes `nodes.csv` and `triangles.csv` into `dir`.
pub fn write_mesh(dir: &Path, mesh: &Mesh) -> Result<()> {
    create_dir(dir)?;
    write_table(
        &dir.join("nodes.csv"),
        &["id", "x1", "x2", "boundary_id"],
        mesh.nodes().iter().enumerate().map(|(i, p)| {
            let id = mesh.boundary_id(i).map_or(-1, |b| b as i64);
            vec![i.to_string(), num(p.x), num(p.y), id.to_string()]
        }),
    )?;
    write_table(
        &dir.join("triangles.csv"),
        &["n0", "n1", "n2"],
        mesh.triangles()
            .iter()
            .map(|t| t.iter().map(usize::to_string).collect()),
    )
}

/// Reads a mesh written by [`write_mesh`] (or by hand in the same format).
pub fn read_mesh(dir: &Path) -> Result<Mesh> {
    let path = dir.join("nodes.csv");
    let rows = read_table(&path, &["id", "x1", "x2", "boundary_id"])?;
    let mut nodes = Vec::with_capacity(rows.len());
    let mut boundary = Vec::with_capacity(rows.len());
    for (k, (line, rec)) in rows.iter().enumerate() {
        let id: usize = parse(&path, *line, &rec[0])?;
        if id != k {
            return Err(Error::Parse {
                path,
                line: *line,
                reason: format!("node ids must be 0, 1, ... in order; found {id} at position {k}"),
            });
        }
        nodes.push(Point2::new(
            parse(&path, *line, &rec[1])?,
            parse(&path, *line, &rec[2])?,
        ));
        let b: i64 = parse(&path, *line, &rec[3])?;
        boundary.push(usize::try_from(b).ok());
    }
    let path = dir.join("triangles.csv");
    let triangles = read_table(&path, &["n0", "n1", "n2"])?
        .iter()
        .map(|(line, rec)| {
            Ok([
                parse(&path, *line, &rec[0])?,
                parse(&path, *line, &rec[1])?,
                parse(&path, *line, &rec[2])?,
            ])
        })
        .collect::<Result<Vec<[usize; 3]>>>()?;
    Mesh::from_tables(nodes, boundary, triangles)
}

/// Writes per-node columns `node_id,<names>`.
fn write_columns<T>(path: &Path, names: &[&str], field: &Field<T>, cells: impl Fn(&T) -> Vec<f64>) -> Result<()> {
    let header: Vec<&str> = std::iter::once("node_id").chain(names.iter().copied()).collect();
    write_table(
        path,
        &header,
        field.values().iter().enumerate().map(|(i, v)| {
            std::iter::once(i.to_string())
                .chain(cells(v).into_iter().map(num))
                .collect()
        }),
    )
}

/// Reads rows `node_id,<names>` as `(node, values)` pairs.
fn read_columns(path: &Path, names: &[&str]) -> Result<Vec<(usize, Vec<f64>)>> {
    let header: Vec<&str> = std::iter::once("node_id").chain(names.iter().copied()).collect();
    read_table(path, &header)?
        .iter()
        .map(|(line, rec)| {
            let node = parse(path, *line, &rec[0])?;
            let values = rec
                .iter()
                .skip(1)
                .map(|t| parse(path, *line, t))
                .collect::<Result<_>>()?;
            Ok((node, values))
        })
        .collect()
}

/// Reads a full nodal field; rows must list every node once, in order.
fn read_field<T>(path: &Path, names: &[&str], mesh: &Arc<Mesh>, build: impl Fn(&[f64]) -> T) -> Result<Field<T>> {
    let rows = read_columns(path, names)?;
    if rows.len() != mesh.node_count() || rows.iter().enumerate().any(|(k, (i, _))| *i != k) {
        return Err(Error::Field(format!(
            "{}: expected rows for nodes 0..{} in order",
            path.display(),
            mesh.node_count()
        )));
    }
    Field::new(Arc::clone(mesh), rows.iter().map(|(_, v)| build(v)).collect())
}

const SYMMETRIC: [(usize, usize); 3] = [(0, 0), (0, 1), (1, 1)];

fn symmetric_names(prefix: &str) -> Vec<String> {
    SYMMETRIC
        .iter()
        .map(|(r, c)| format!("{prefix}{}{}", r + 1, c + 1))
        .collect()
}

fn symmetric(v: &[f64]) -> Matrix2<f64> {
    Matrix2::new(v[0], v[1], v[1], v[2])
}

pub fn write_scalar(path: &Path, field: &ScalarField) -> Result<()> {
    write_columns(path, &["value"], field, |v| vec![*v])
}

pub fn read_scalar(path: &Path, mesh: &Arc<Mesh>) -> Result<ScalarField> {
    read_field(path, &["value"], mesh, |v| v[0])
}

/// Writes the upper triangle of a symmetric matrix field as
/// `node_id,<p>11,<p>12,<p>22`.
pub fn write_symmetric(path: &Path, prefix: &str, field: &MatrixField) -> Result<()> {
    let names = symmetric_names(prefix);
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    write_columns(path, &names, field, |m| {
        SYMMETRIC.iter().map(|&(r, c)| m[(r, c)]).collect()
    })
}

pub fn read_symmetric(path: &Path, prefix: &str, mesh: &Arc<Mesh>) -> Result<MatrixField> {
    let names = symmetric_names(prefix);
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    read_field(path, &names, mesh, symmetric)
}

/// Writes `xi.csv`, `zeta.csv` and `s.csv`.
pub fn write_conductivity(dir: &Path, c: &ConductivityField) -> Result<()> {
    create_dir(dir)?;
    write_scalar(&dir.join("xi.csv"), &c.xi)?;
    write_scalar(&dir.join("zeta.csv"), &c.zeta)?;
    write_scalar(&dir.join("s.csv"), &c.s)
}

pub fn read_conductivity(dir: &Path, mesh: &Arc<Mesh>) -> Result<ConductivityField> {
    ConductivityField::new(
        read_scalar(&dir.join("xi.csv"), mesh)?,
        read_scalar(&dir.join("zeta.csv"), mesh)?,
        read_scalar(&dir.join("s.csv"), mesh)?,
    )
}

fn h_file(form: &str, i: usize, j: usize) -> String {
    format!("H{form}_{}{}.csv", i + 1, j + 1)
}

/// Exports a dataset: `u1..u4.csv`, the upper triangle of `H_E` and `H_N` as
/// `HE_ij.csv` / `HN_ij.csv`, `rho.csv`, `gamma_boundary.csv` and
/// `manifest.json`.
pub fn write_dataset(
    dir: &Path,
    data: &PowerDensityDataset,
    gamma_boundary: &BoundaryGamma,
    manifest: &DatasetManifest,
) -> Result<()> {
    create_dir(dir)?;
    for (k, u) in data.potentials.iter().enumerate() {
        write_scalar(&dir.join(format!("u{}.csv", k + 1)), u)?;
    }
    for i in 0..4 {
        for j in i..4 {
            write_scalar(&dir.join(h_file("E", i, j)), &data.h_e.map(|h| h[(i, j)]))?;
            write_scalar(&dir.join(h_file("N", i, j)), &data.h_n.map(|h| h[(i, j)]))?;
        }
    }
    write_scalar(&dir.join("rho.csv"), data.metric.rho())?;
    let path = dir.join("gamma_boundary.csv");
    let header = ["node_id", "g11", "g12", "g22"];
    write_table(
        &path,
        &header,
        gamma_boundary
            .entries()
            .map(|(i, g)| vec![i.to_string(), num(g[(0, 0)]), num(g[(0, 1)]), num(g[(1, 1)])]),
    )?;
    write_json(&dir.join("manifest.json"), manifest)
}

/// Reads a dataset written by [`write_dataset`] on the given mesh. `H_N` is
/// recomputed from `H_E` and `rho` exactly as during simulation.
pub fn read_dataset(dir: &Path, mesh: &Arc<Mesh>) -> Result<(PowerDensityDataset, BoundaryGamma, DatasetManifest)> {
    let manifest: DatasetManifest = read_json(&dir.join("manifest.json"))?;
    if manifest.schema_version != DATASET_SCHEMA_VERSION {
        return Err(Error::Parameter(format!(
            "dataset schema_version {} is not supported (expected {DATASET_SCHEMA_VERSION})",
            manifest.schema_version
        )));
    }
    if manifest.mesh.node_count != mesh.node_count() || manifest.mesh.triangle_count != mesh.triangle_count() {
        return Err(Error::Mesh(format!(
            "dataset was generated on {} nodes / {} triangles, mesh has {} / {}",
            manifest.mesh.node_count,
            manifest.mesh.triangle_count,
            mesh.node_count(),
            mesh.triangle_count()
        )));
    }
    let potentials = [0, 1, 2, 3].map(|k| read_scalar(&dir.join(format!("u{}.csv", k + 1)), mesh));
    let [u1, u2, u3, u4] = potentials;
    let potentials = [u1?, u2?, u3?, u4?];

    let mut h = vec![Matrix4::zeros(); mesh.node_count()];
    for i in 0..4 {
        for j in i..4 {
            let entry = read_scalar(&dir.join(h_file("E", i, j)), mesh)?;
            for (m, v) in h.iter_mut().zip(entry.values()) {
                m[(i, j)] = *v;
                m[(j, i)] = *v;
            }
        }
    }
    let h_e = Field::new(Arc::clone(mesh), h)?;
    let metric = Metric::sampled(read_scalar(&dir.join("rho.csv"), mesh)?)?.relabeled(manifest.metric);
    let data = PowerDensityDataset::from_parts(potentials, h_e, manifest.bcs, metric)?;

    let path = dir.join("gamma_boundary.csv");
    let entries = read_columns(&path, &["g11", "g12", "g22"])?
        .into_iter()
        .map(|(i, v)| {
            if i >= mesh.node_count() {
                return Err(Error::Field(format!("{}: node {i} is not on the mesh", path.display())));
            }
            Ok((i, symmetric(&v)))
        })
        .collect::<Result<Vec<_>>>()?;
    let gamma_boundary = BoundaryGamma::new(mesh, entries)?;
    Ok((data, gamma_boundary, manifest))
}

/// Files written by [`write_reconstruction`], relative to its directory.
pub const RECONSTRUCTION_FILES: [&str; 6] = ["atilde.csv", "theta.csv", "s.csv", "gamma.csv", "xi.csv", "zeta.csv"];

/// Exports the reconstructed fields, plus `error.csv` (pointwise Frobenius
/// error) when a ground truth was available.
pub fn write_reconstruction(dir: &Path, r: &ReconstructionResult, error: Option<&ScalarField>) -> Result<()> {
    create_dir(dir)?;
    write_symmetric(&dir.join("atilde.csv"), "a", &r.atilde.atilde)?;
    write_scalar(&dir.join("theta.csv"), &r.theta)?;
    write_scalar(&dir.join("s.csv"), &r.s)?;
    write_symmetric(&dir.join("gamma.csv"), "g", &r.gamma)?;
    let params = ConductivityField::from_gamma(&r.gamma)?;
    write_scalar(&dir.join("xi.csv"), &params.xi)?;
    write_scalar(&dir.join("zeta.csv"), &params.zeta)?;
    if let Some(e) = error {
        write_scalar(&dir.join("error.csv"), e)?;
    }
    Ok(())
}

/// Reads a `gamma.csv` written by [`write_reconstruction`].
pub fn read_gamma(path: &Path, mesh: &Arc<Mesh>) -> Result<MatrixField> {
    read_symmetric(path, "g", mesh)
}

/// Writes `node_id,condition` rows for every node failing a data condition.
pub fn write_failing_nodes(path: &Path, nodes: &[(usize, u8)]) -> Result<()> {
    write_table(
        path,
        &["node_id", "condition"],
        nodes.iter().map(|(i, c)| vec![i.to_string(), c.to_string()]),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conductivity::phantom_default;
    use crate::forward::assemble_dataset;
    use crate::geometry::build_annulus_mesh;
    use crate::reconstruction::reconstruct;
    use std::f64::consts::E;

    fn mesh() -> Arc<Mesh> {
        Arc::new(build_annulus_mesh(E.recip(), E, 8, 32).unwrap())
    }

    #[test]
    fn mesh_round_trip() {
        let m = mesh();
        let dir = tempfile::tempdir().unwrap();
        write_mesh(dir.path(), &m).unwrap();
        let back = read_mesh(dir.path()).unwrap();
        assert_eq!(back.nodes(), m.nodes());
        assert_eq!(back.triangles(), m.triangles());
        for i in 0..m.node_count() {
            assert_eq!(back.boundary_id(i), m.boundary_id(i));
        }
        let text = fs::read_to_string(dir.path().join("nodes.csv")).unwrap();
        assert!(text.starts_with("id,x1,x2,boundary_id\n0,"));
        assert!(text.lines().nth(1).unwrap().ends_with(",0"));
        assert!(text.contains(",-1\n"));
    }

    #[test]
    fn fields_round_trip_bit_exactly() {
        let m = mesh();
        let dir = tempfile::tempdir().unwrap();
        let f = ScalarField::from_fn(&m, |_, p| (p.x * 1e3).sin() / 3.0 + 1e-300 * p.y);
        write_scalar(&dir.path().join("f.csv"), &f).unwrap();
        let back = read_scalar(&dir.path().join("f.csv"), &m).unwrap();
        assert!(f
            .values()
            .iter()
            .zip(back.values())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn malformed_tables_are_rejected() {
        let m = mesh();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(&path, "node,value\n0,1\n").unwrap();
        assert!(matches!(read_scalar(&path, &m), Err(Error::Parse { line: 1, .. })));
        fs::write(&path, "node_id,value\n0,one\n").unwrap();
        assert!(matches!(read_scalar(&path, &m), Err(Error::Parse { line: 2, .. })));
        fs::write(&path, "node_id,value\n0,1\n").unwrap();
        assert!(matches!(read_scalar(&path, &m), Err(Error::Field(_))));
        assert!(matches!(
            read_scalar(&dir.path().join("missing.csv"), &m),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn dataset_round_trip_reproduces_the_reconstruction() {
        let m = Arc::new(build_annulus_mesh(E.recip(), E, 12, 48).unwrap());
        let metric = Metric::catenoid(&m).unwrap();
        let c = phantom_default(&m);
        let bcs = BoundaryCondition::reference_set();
        let data = assemble_dataset(&metric, &c, bcs, SolverSettings::default()).unwrap();
        let bg = BoundaryGamma::from_conductivity(&c).unwrap();
        let manifest = DatasetManifest {
            schema_version: DATASET_SCHEMA_VERSION,
            bcs,
            metric: metric.source(),
            mesh: MeshInfo::new(&m, serde_json::json!({"kind": "annulus"})),
            solver: SolverSettings::default(),
            noise: None,
        };
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &data, &bg, &manifest).unwrap();
        let (back, bg_back, manifest_back) = read_dataset(dir.path(), &m).unwrap();
        assert_eq!(manifest_back, manifest);
        assert_eq!(back.metric.source(), MetricSource::Catenoid);
        assert_eq!(bg_back.entries().collect::<Vec<_>>(), bg.entries().collect::<Vec<_>>());
        for n in 0..m.node_count() {
            assert_eq!(back.h_e[n], data.h_e[n]);
            assert_eq!(back.h_n[n], data.h_n[n]);
        }
        let settings = crate::reconstruction::ReconstructionSettings {
            thresholds: crate::datarep::ConditionThresholds {
                c0: 0.0,
                grad_ratio: 0.0,
            },
            ..Default::default()
        };
        let a = reconstruct(&data, &bg, &settings).unwrap();
        let b = reconstruct(&back, &bg_back, &settings).unwrap();
        assert_eq!(a.gamma.values(), b.gamma.values());

        let out = dir.path().join("recon");
        write_reconstruction(&out, &a, None).unwrap();
        assert_eq!(
            read_gamma(&out.join("gamma.csv"), &m).unwrap().values(),
            a.gamma.values()
        );
        for f in RECONSTRUCTION_FILES {
            assert!(out.join(f).exists(), "{f}");
        }
    }

    #[test]
    fn dataset_on_wrong_mesh_is_rejected() {
        let m = mesh();
        let c = phantom_default(&m);
        let data = assemble_dataset(
            &Metric::flat(&m),
            &c,
            BoundaryCondition::reference_set(),
            SolverSettings::default(),
        )
        .unwrap();
        let manifest = DatasetManifest {
            schema_version: DATASET_SCHEMA_VERSION,
            bcs: data.bcs,
            metric: MetricSource::Flat,
            mesh: MeshInfo::new(&m, serde_json::Value::Null),
            solver: SolverSettings::default(),
            noise: None,
        };
        let dir = tempfile::tempdir().unwrap();
        write_dataset(
            dir.path(),
            &data,
            &BoundaryGamma::from_conductivity(&c).unwrap(),
            &manifest,
        )
        .unwrap();
        let other = Arc::new(build_annulus_mesh(E.recip(), E, 9, 32).unwrap());
        assert!(matches!(read_dataset(dir.path(), &other), Err(Error::Mesh(_))));
    }
}
