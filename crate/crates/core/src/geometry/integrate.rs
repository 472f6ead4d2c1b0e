//! Recovery of a scalar potential from a (nearly) curl-free vector field.
//!
//! A first pass integrates along the edges of a shortest-path spanning tree
//! rooted at the base node. The result is then refined by the P1
//! least-squares problem `min ∫ |grad phi - F|²` with the base value pinned,
//! which spreads inconsistencies over the whole domain instead of
//! accumulating them along long tree paths.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::sync::Arc;

use nalgebra::Vector2;
use sprs::TriMat;

use super::field::{ScalarField, VectorField};
use super::mesh::Mesh;
use super::ops::element_gradients;
use crate::error::{Error, Result};
use crate::sparse::{assemble, SolverKind, SolverSettings, SpdSolver};

/// Relative L² residual above which the input is flagged as not integrable.
pub const DEFAULT_CURL_WARNING: f64 = 1e-2;

#[derive(Debug, Clone)]
pub struct IntegratedField {
    pub field: ScalarField,
    /// Result of plain spanning-tree path integration.
    pub tree_field: ScalarField,
    /// `|grad phi - F|_L2 / |F|_L2` with `F` averaged per element.
    pub relative_residual: f64,
    pub absolute_residual: f64,
    /// Circulation of `F` around each boundary loop.
    pub holonomy: Vec<f64>,
    pub curl_warning: bool,
}

/// Pinned Laplacian factored once per mesh and base node, reusable for
/// several integrations.
pub struct GradientIntegrator {
    mesh: Arc<Mesh>,
    base: usize,
    free_index: Vec<Option<usize>>,
    base_column: Vec<(usize, f64)>,
    solver: SpdSolver,
    tree: SpanningTree,
    warn_threshold: f64,
}

impl GradientIntegrator {
    pub fn new(mesh: &Arc<Mesh>, base: usize, settings: SolverSettings, warn_threshold: f64) -> Result<Self> {
        if base >= mesh.node_count() {
            return Err(Error::Parameter(format!("base node {base} does not exist")));
        }
        if mesh.connected_components() != 1 {
            return Err(Error::Topology(format!(
                "mesh has {} connected components",
                mesh.connected_components()
            )));
        }
        let n = mesh.node_count();
        let mut free_index = vec![None; n];
        let mut next = 0;
        for (i, slot) in free_index.iter_mut().enumerate() {
            if i != base {
                *slot = Some(next);
                next += 1;
            }
        }

        let mut trip = TriMat::new((next, next));
        let mut base_column = Vec::new();
        for e in 0..mesh.triangle_count() {
            let tri = mesh.triangles()[e];
            let g = mesh.shape_gradients(e);
            let area = mesh.area(e);
            for a in 0..3 {
                let Some(ra) = free_index[tri[a]] else { continue };
                for b in 0..3 {
                    let k = area * g[a].dot(&g[b]);
                    match free_index[tri[b]] {
                        Some(rb) => trip.add_triplet(ra, rb, k),
                        None => base_column.push((ra, k)),
                    }
                }
            }
        }
        let solver = SpdSolver::new(assemble(next, &trip), settings)?;
        Ok(GradientIntegrator {
            mesh: Arc::clone(mesh),
            base,
            free_index,
            base_column,
            solver,
            tree: SpanningTree::shortest_paths(mesh, base),
            warn_threshold,
        })
    }

    pub fn base(&self) -> usize {
        self.base
    }

    pub fn integrate(&self, f: &VectorField, base_value: f64) -> Result<IntegratedField> {
        if !Arc::ptr_eq(f.mesh(), &self.mesh) {
            return Err(Error::Field("gradient field lives on a different mesh".into()));
        }
        let mesh = &self.mesh;
        let tree_field = self.tree.integrate(mesh, f, base_value);

        let mut rhs = vec![0.0; self.solver.size()];
        for e in 0..mesh.triangle_count() {
            let tri = mesh.triangles()[e];
            let mean = element_mean(f, tri);
            let g = mesh.shape_gradients(e);
            for a in 0..3 {
                if let Some(r) = self.free_index[tri[a]] {
                    rhs[r] += mesh.area(e) * g[a].dot(&mean);
                }
            }
        }
        for &(r, k) in &self.base_column {
            rhs[r] -= k * base_value;
        }
        let guess: Vec<f64> = (0..mesh.node_count())
            .filter(|&i| i != self.base)
            .map(|i| tree_field[i])
            .collect();
        let free = self.solver.solve(&rhs, Some(&guess))?;
        let values: Vec<f64> = (0..mesh.node_count())
            .map(|i| match self.free_index[i] {
                Some(r) => free[r],
                None => base_value,
            })
            .collect();
        let field = ScalarField::new(Arc::clone(mesh), values)?;

        let grads = element_gradients(&field);
        let (mut num, mut den) = (0.0, 0.0);
        for (e, g) in grads.iter().enumerate() {
            let mean = element_mean(f, mesh.triangles()[e]);
            num += mesh.area(e) * (g - mean).norm_squared();
            den += mesh.area(e) * mean.norm_squared();
        }
        let absolute_residual = num.sqrt();
        let relative_residual = if den > 0.0 { (num / den).sqrt() } else { 0.0 };
        let holonomy = mesh
            .boundary_loops()
            .iter()
            .map(|lp| circulation(mesh, f, lp))
            .collect();
        Ok(IntegratedField {
            field,
            tree_field,
            relative_residual,
            absolute_residual,
            holonomy,
            curl_warning: relative_residual > self.warn_threshold,
        })
    }
}

/// One-shot integration with default solver settings and warning threshold.
pub fn integrate_gradient(f: &VectorField, base_node: usize, base_value: f64) -> Result<IntegratedField> {
    GradientIntegrator::new(f.mesh(), base_node, SolverSettings::default(), DEFAULT_CURL_WARNING)?
        .integrate(f, base_value)
}

/// Same as [`integrate_gradient`] but with an explicit solver choice.
pub fn integrate_gradient_with(
    f: &VectorField,
    base_node: usize,
    base_value: f64,
    kind: SolverKind,
) -> Result<IntegratedField> {
    let settings = SolverSettings {
        kind,
        ..Default::default()
    };
    GradientIntegrator::new(f.mesh(), base_node, settings, DEFAULT_CURL_WARNING)?.integrate(f, base_value)
}

/// Line integral of `f` around a closed node loop, trapezoidal on each edge.
pub fn circulation(mesh: &Mesh, f: &VectorField, lp: &[usize]) -> f64 {
    (0..lp.len())
        .map(|k| {
            let (a, b) = (lp[k], lp[(k + 1) % lp.len()]);
            0.5 * (f[a] + f[b]).dot(&(mesh.node(b) - mesh.node(a)))
        })
        .sum()
}

fn element_mean(f: &VectorField, tri: [usize; 3]) -> Vector2<f64> {
    (f[tri[0]] + f[tri[1]] + f[tri[2]]) / 3.0
}

struct SpanningTree {
    /// Nodes in settlement order, each with its parent (root has none).
    order: Vec<(usize, Option<usize>)>,
}

#[derive(PartialEq)]
struct Candidate(f64, usize);

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on distance, ties by node index
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl SpanningTree {
    fn shortest_paths(mesh: &Mesh, root: usize) -> Self {
        let n = mesh.node_count();
        let mut dist = vec![f64::INFINITY; n];
        let mut parent = vec![None; n];
        let mut done = vec![false; n];
        let mut order = Vec::with_capacity(n);
        let mut heap = BinaryHeap::new();
        dist[root] = 0.0;
        heap.push(Candidate(0.0, root));
        while let Some(Candidate(d, v)) = heap.pop() {
            if done[v] {
                continue;
            }
            done[v] = true;
            order.push((v, parent[v]));
            for &w in mesh.neighbors(v) {
                let nd = d + (mesh.node(w) - mesh.node(v)).norm();
                if nd < dist[w] {
                    dist[w] = nd;
                    parent[w] = Some(v);
                    heap.push(Candidate(nd, w));
                }
            }
        }
        SpanningTree { order }
    }

    fn integrate(&self, mesh: &Arc<Mesh>, f: &VectorField, base_value: f64) -> ScalarField {
        let mut phi = vec![0.0; mesh.node_count()];
        for &(v, p) in &self.order {
            phi[v] = match p {
                None => base_value,
                Some(p) => phi[p] + 0.5 * (f[p] + f[v]).dot(&(mesh.node(v) - mesh.node(p))),
            };
        }
        ScalarField::new(Arc::clone(mesh), phi).expect("one value per node")
    }
}
