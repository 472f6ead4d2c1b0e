//! Triangulated planar fundamental domain.
//!
//! A [`Mesh`] owns the node coordinates, the counterclockwise triangle list,
//! the boundary loops with their outward unit normals, and everything derived
//! from those once at construction: element areas, P1 shape-function
//! gradients, adjacency, lumped node weights, and the nodal gradient
//! stencils used by every differential operator in the crate.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;

use nalgebra::{DMatrix, Point2, Vector2};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Tolerance on the Euclidean length of stored outward normals.
pub const NORMAL_TOLERANCE: f64 = 1e-12;

const CUBIC_TERMS: usize = 10;
const MAX_PATCH_STEPS: usize = 3;
const FIT_CONDITION: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct Mesh {
    nodes: Vec<Point2<f64>>,
    triangles: Vec<[usize; 3]>,
    boundary_loops: Vec<Vec<usize>>,
    boundary_id: Vec<Option<usize>>,
    normals: Vec<Vector2<f64>>,

    areas: Vec<f64>,
    shape_gradients: Vec<[Vector2<f64>; 3]>,
    node_elements: Vec<Vec<usize>>,
    neighbors: Vec<Vec<usize>>,
    lumped_mass: Vec<f64>,
    gradient: Vec<Vec<(usize, Vector2<f64>)>>,
}

impl Mesh {
    /// Builds a mesh from explicit boundary loops and per-node outward normals.
    ///
    /// `normals` has one entry per node; entries for interior nodes are ignored
    /// and stored as zero.
    pub fn new(
        nodes: Vec<Point2<f64>>,
        triangles: Vec<[usize; 3]>,
        boundary_loops: Vec<Vec<usize>>,
        normals: Vec<Vector2<f64>>,
    ) -> Result<Self> {
        let n = nodes.len();
        if triangles.is_empty() {
            return Err(Error::Mesh("mesh has no triangles".into()));
        }
        if normals.len() != n {
            return Err(Error::Mesh(format!("{} normals given for {} nodes", normals.len(), n)));
        }
        if let Some(p) = nodes.iter().position(|p| !(p.x.is_finite() && p.y.is_finite())) {
            return Err(Error::Mesh(format!("node {p} has non-finite coordinates")));
        }

        let mut areas = Vec::with_capacity(triangles.len());
        let mut shape_gradients = Vec::with_capacity(triangles.len());
        for (e, tri) in triangles.iter().enumerate() {
            if tri.iter().any(|&v| v >= n) {
                return Err(Error::Mesh(format!("triangle {e} references a missing node")));
            }
            let (area, grads) = p1_element(&nodes[tri[0]], &nodes[tri[1]], &nodes[tri[2]]);
            if !(area > 0.0) {
                return Err(Error::Mesh(format!(
                    "triangle {e} has non-positive signed area {area:e}"
                )));
            }
            areas.push(area);
            shape_gradients.push(grads);
        }

        let edge_count = edge_use_counts(&triangles);
        let mut boundary_id = vec![None; n];
        let mut stored_normals = vec![Vector2::zeros(); n];
        for (k, lp) in boundary_loops.iter().enumerate() {
            if lp.len() < 3 {
                return Err(Error::Mesh(format!("boundary loop {k} has fewer than 3 nodes")));
            }
            for (i, &a) in lp.iter().enumerate() {
                let b = lp[(i + 1) % lp.len()];
                if a >= n {
                    return Err(Error::Mesh(format!("boundary loop {k} references a missing node")));
                }
                if edge_count.get(&ordered(a, b)) != Some(&1) {
                    return Err(Error::Mesh(format!(
                        "boundary loop {k} is not closed along boundary edges ({a}, {b})"
                    )));
                }
                if boundary_id[a].is_some() {
                    return Err(Error::Mesh(format!("node {a} appears in several boundary loops")));
                }
                boundary_id[a] = Some(k);
                let nrm = normals[a];
                if (nrm.norm() - 1.0).abs() > NORMAL_TOLERANCE {
                    return Err(Error::Mesh(format!(
                        "outward normal at node {a} has length {}",
                        nrm.norm()
                    )));
                }
                stored_normals[a] = nrm;
            }
        }
        let boundary_edges = edge_count.values().filter(|&&c| c == 1).count();
        let loop_edges: usize = boundary_loops.iter().map(Vec::len).sum();
        if boundary_edges != loop_edges {
            return Err(Error::Mesh(format!(
                "{boundary_edges} boundary edges but loops cover {loop_edges}"
            )));
        }

        let mut node_elements = vec![Vec::new(); n];
        let mut neighbor_sets = vec![Vec::new(); n];
        for (e, tri) in triangles.iter().enumerate() {
            for i in 0..3 {
                node_elements[tri[i]].push(e);
                for j in 0..3 {
                    if i != j {
                        neighbor_sets[tri[i]].push(tri[j]);
                    }
                }
            }
        }
        let neighbors: Vec<Vec<usize>> = neighbor_sets
            .into_iter()
            .map(|mut v| {
                v.sort_unstable();
                v.dedup();
                v
            })
            .collect();

        let mut lumped_mass = vec![0.0; n];
        for (tri, area) in triangles.iter().zip(&areas) {
            for &v in tri {
                lumped_mass[v] += area / 3.0;
            }
        }

        let mut mesh = Mesh {
            nodes,
            triangles,
            boundary_loops,
            boundary_id,
            normals: stored_normals,
            areas,
            shape_gradients,
            node_elements,
            neighbors,
            lumped_mass,
            gradient: Vec::new(),
        };
        mesh.gradient = (0..n).into_par_iter().map(|i| mesh.gradient_stencil(i)).collect();
        Ok(mesh)
    }

    /// Builds a mesh from node/triangle tables where boundary membership is
    /// given per node, as in the CSV import format. Loops are traced along
    /// boundary edges with the domain on the left; normals are the normalized
    /// mean of the two adjacent edge normals.
    pub fn from_tables(
        nodes: Vec<Point2<f64>>,
        boundary_ids: Vec<Option<usize>>,
        triangles: Vec<[usize; 3]>,
    ) -> Result<Self> {
        let n = nodes.len();
        if boundary_ids.len() != n {
            return Err(Error::Mesh("boundary id table does not match node table".into()));
        }
        let edge_count = edge_use_counts(&triangles);
        // Directed boundary edges keep the orientation of their triangle, so
        // the interior lies to the left of a -> b.
        let mut next: HashMap<usize, usize> = HashMap::new();
        for tri in &triangles {
            for i in 0..3 {
                let (a, b) = (tri[i], tri[(i + 1) % 3]);
                if a >= n || b >= n {
                    return Err(Error::Mesh("triangle references a missing node".into()));
                }
                if edge_count[&ordered(a, b)] == 1 && next.insert(a, b).is_some() {
                    return Err(Error::Mesh(format!("node {a} is a non-manifold boundary vertex")));
                }
            }
        }
        let mut components: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, id) in boundary_ids.iter().enumerate() {
            match (id, next.contains_key(&i)) {
                (Some(k), true) => components.entry(*k).or_default().push(i),
                (Some(_), false) => return Err(Error::Mesh(format!("node {i} is marked boundary but is interior"))),
                (None, true) => return Err(Error::Mesh(format!("node {i} lies on the boundary but is unmarked"))),
                (None, false) => {}
            }
        }
        if components.keys().copied().ne(0..components.len()) {
            return Err(Error::Mesh(
                "boundary ids must be numbered 0, 1, ... without gaps".into(),
            ));
        }

        let mut loops = Vec::with_capacity(components.len());
        let mut normals = vec![Vector2::zeros(); n];
        for (k, members) in components {
            let start = members[0];
            let mut lp = vec![start];
            let mut cur = next[&start];
            while cur != start {
                if boundary_ids[cur] != Some(k) || lp.len() > members.len() {
                    return Err(Error::Mesh(format!("boundary component {k} is not a single loop")));
                }
                lp.push(cur);
                cur = next[&cur];
            }
            if lp.len() != members.len() {
                return Err(Error::Mesh(format!("boundary component {k} is not a single loop")));
            }
            for (i, &b) in lp.iter().enumerate() {
                let a = lp[(i + lp.len() - 1) % lp.len()];
                let c = lp[(i + 1) % lp.len()];
                let sum = edge_normal(&nodes[a], &nodes[b]) + edge_normal(&nodes[b], &nodes[c]);
                normals[b] = sum.normalize();
            }
            loops.push(lp);
        }
        Mesh::new(nodes, triangles, loops, normals)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn triangle_count(&self) -> usize {
        self.triangles.len()
    }

    pub fn nodes(&self) -> &[Point2<f64>] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> Point2<f64> {
        self.nodes[i]
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn boundary_loops(&self) -> &[Vec<usize>] {
        &self.boundary_loops
    }

    pub fn boundary_id(&self, i: usize) -> Option<usize> {
        self.boundary_id[i]
    }

    pub fn is_boundary(&self, i: usize) -> bool {
        self.boundary_id[i].is_some()
    }

    /// Boundary nodes in increasing index order.
    pub fn boundary_nodes(&self) -> Vec<usize> {
        (0..self.node_count()).filter(|&i| self.is_boundary(i)).collect()
    }

    /// Outward unit normal at a boundary node, zero at interior nodes.
    pub fn normal(&self, i: usize) -> Vector2<f64> {
        self.normals[i]
    }

    pub fn area(&self, e: usize) -> f64 {
        self.areas[e]
    }

    pub fn total_area(&self) -> f64 {
        self.areas.iter().sum()
    }

    /// Gradients of the three P1 hat functions on triangle `e`.
    pub fn shape_gradients(&self, e: usize) -> &[Vector2<f64>; 3] {
        &self.shape_gradients[e]
    }

    pub fn centroid(&self, e: usize) -> Point2<f64> {
        let [a, b, c] = self.triangles[e];
        Point2::from((self.nodes[a].coords + self.nodes[b].coords + self.nodes[c].coords) / 3.0)
    }

    pub fn node_elements(&self, i: usize) -> &[usize] {
        &self.node_elements[i]
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    /// Lumped (row-sum) mass: one third of the area of every incident triangle.
    pub fn lumped_mass(&self) -> &[f64] {
        &self.lumped_mass
    }

    /// Nodal gradient weights: `grad u(x_i) = sum_j w_ij u_j`.
    pub(crate) fn gradient_weights(&self, i: usize) -> &[(usize, Vector2<f64>)] {
        &self.gradient[i]
    }

    /// Longest triangle edge.
    pub fn max_edge_length(&self) -> f64 {
        self.triangles
            .iter()
            .flat_map(|t| (0..3).map(move |i| (t[i], t[(i + 1) % 3])))
            .map(|(a, b)| (self.nodes[a] - self.nodes[b]).norm())
            .fold(0.0, f64::max)
    }

    /// Number of connected components of the node graph.
    pub fn connected_components(&self) -> usize {
        let mut seen = vec![false; self.node_count()];
        let mut count = 0;
        for s in 0..self.node_count() {
            if seen[s] {
                continue;
            }
            count += 1;
            seen[s] = true;
            let mut stack = vec![s];
            while let Some(v) = stack.pop() {
                for &w in &self.neighbors[v] {
                    if !seen[w] {
                        seen[w] = true;
                        stack.push(w);
                    }
                }
            }
        }
        count
    }

    /// Gradient stencil at node `i`: a least-squares cubic through the nodal
    /// values of the graph patch, differentiated at the node. Patches grow
    /// from two to three graph steps until they hold enough well-spread
    /// nodes, which covers the one-sided patches at the boundary. Falls back
    /// to the area-weighted average of incident element gradients when no
    /// patch gives a well-conditioned fit.
    fn gradient_stencil(&self, i: usize) -> Vec<(usize, Vector2<f64>)> {
        let mut patch = vec![i];
        let mut seen = std::collections::HashSet::from([i]);
        let mut frontier = vec![i];
        for steps in 1..=MAX_PATCH_STEPS {
            let mut next = Vec::new();
            for &v in &frontier {
                for &w in &self.neighbors[v] {
                    if seen.insert(w) {
                        next.push(w);
                    }
                }
            }
            patch.extend_from_slice(&next);
            frontier = next;
            if steps >= 2 && patch.len() >= 2 * CUBIC_TERMS {
                if let Some(stencil) = self.cubic_fit(i, &patch) {
                    return stencil;
                }
            }
        }
        self.cubic_fit(i, &patch).unwrap_or_else(|| self.averaging_stencil(i))
    }

    fn cubic_fit(&self, i: usize, patch: &[usize]) -> Option<Vec<(usize, Vector2<f64>)>> {
        if patch.len() < CUBIC_TERMS {
            return None;
        }
        let xi = self.nodes[i];
        let scale = patch.iter().map(|&j| (self.nodes[j] - xi).norm()).fold(0.0, f64::max);
        let design = DMatrix::from_fn(patch.len(), CUBIC_TERMS, |r, c| {
            let d = (self.nodes[patch[r]] - xi) / scale;
            let (x, y) = (d.x, d.y);
            [
                1.0,
                x,
                y,
                x * x,
                x * y,
                y * y,
                x * x * x,
                x * x * y,
                x * y * y,
                y * y * y,
            ][c]
        });
        let svd = design.svd(true, true);
        let sv = &svd.singular_values;
        if sv.min() < FIT_CONDITION * sv.max() {
            return None;
        }
        let pinv = svd.pseudo_inverse(0.0).ok()?;
        Some(
            patch
                .iter()
                .enumerate()
                .map(|(k, &j)| (j, Vector2::new(pinv[(1, k)], pinv[(2, k)]) / scale))
                .collect(),
        )
    }

    fn averaging_stencil(&self, i: usize) -> Vec<(usize, Vector2<f64>)> {
        let own = &self.node_elements[i];
        let total: f64 = own.iter().map(|&e| self.areas[e]).sum();
        let mut weights: BTreeMap<usize, Vector2<f64>> = BTreeMap::new();
        for &e in own {
            let w = self.areas[e] / total;
            for (k, &v) in self.triangles[e].iter().enumerate() {
                *weights.entry(v).or_insert_with(Vector2::zeros) += self.shape_gradients[e][k] * w;
            }
        }
        weights.into_iter().collect()
    }
}

/// Structured polar triangulation of the annulus `r_inner < |x| < r_outer`.
///
/// Rings are spaced uniformly in `log r`, which keeps the cell aspect ratio
/// constant across the annulus. Node `(ring, j)` has index
/// `ring * n_angular + j`; ring 0 is the inner circle. Boundary loop 0 is the
/// inner circle, loop 1 the outer one, both traversed with the domain on the
/// left.
pub fn build_annulus_mesh(r_inner: f64, r_outer: f64, n_radial: usize, n_angular: usize) -> Result<Mesh> {
    if !(r_inner > 0.0 && r_outer > r_inner && r_outer.is_finite()) {
        return Err(Error::Parameter(format!(
            "annulus radii must satisfy 0 < r_inner < r_outer, got ({r_inner}, {r_outer})"
        )));
    }
    if n_radial < 2 {
        return Err(Error::Parameter(format!("n_radial must be at least 2, got {n_radial}")));
    }
    if n_angular < 8 {
        return Err(Error::Parameter(format!(
            "n_angular must be at least 8, got {n_angular}"
        )));
    }

    let log_span = (r_outer / r_inner).ln();
    let mut nodes = Vec::with_capacity((n_radial + 1) * n_angular);
    let mut normals = Vec::with_capacity(nodes.capacity());
    for ring in 0..=n_radial {
        let r = if ring == 0 {
            r_inner
        } else if ring == n_radial {
            r_outer
        } else {
            r_inner * (log_span * ring as f64 / n_radial as f64).exp()
        };
        for j in 0..n_angular {
            let phi = 2.0 * PI * j as f64 / n_angular as f64;
            let (s, c) = phi.sin_cos();
            nodes.push(Point2::new(r * c, r * s));
            let radial = Vector2::new(c, s);
            normals.push(if ring == 0 {
                -radial
            } else if ring == n_radial {
                radial
            } else {
                Vector2::zeros()
            });
        }
    }

    let id = |ring: usize, j: usize| ring * n_angular + j % n_angular;
    let mut triangles = Vec::with_capacity(2 * n_radial * n_angular);
    for ring in 0..n_radial {
        for j in 0..n_angular {
            let a = id(ring, j);
            let b = id(ring + 1, j);
            let c = id(ring + 1, j + 1);
            let d = id(ring, j + 1);
            triangles.push([a, b, c]);
            triangles.push([a, c, d]);
        }
    }

    let inner: Vec<usize> = std::iter::once(0)
        .chain((1..n_angular).rev())
        .map(|j| id(0, j))
        .collect();
    let outer: Vec<usize> = (0..n_angular).map(|j| id(n_radial, j)).collect();
    Mesh::new(nodes, triangles, vec![inner, outer], normals)
}

fn p1_element(a: &Point2<f64>, b: &Point2<f64>, c: &Point2<f64>) -> (f64, [Vector2<f64>; 3]) {
    let twice = (b.x - a.x) * (c.y - a.y) - (c.x - a.x) * (b.y - a.y);
    let area = 0.5 * twice;
    // grad of the hat function at a vertex is the rotated opposite edge / 2A.
    let g = |p: &Point2<f64>, q: &Point2<f64>| Vector2::new(p.y - q.y, q.x - p.x) / twice;
    (area, [g(b, c), g(c, a), g(a, b)])
}

fn edge_normal(a: &Point2<f64>, b: &Point2<f64>) -> Vector2<f64> {
    let d = b - a;
    Vector2::new(d.y, -d.x).normalize()
}

fn ordered(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

fn edge_use_counts(triangles: &[[usize; 3]]) -> HashMap<(usize, usize), u32> {
    let mut count = HashMap::new();
    for tri in triangles {
        for i in 0..3 {
            *count.entry(ordered(tri[i], tri[(i + 1) % 3])).or_insert(0) += 1;
        }
    }
    count
}
