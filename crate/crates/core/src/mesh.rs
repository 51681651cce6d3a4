//! Lattice meshes, the edge-difference gradient operator and segment scars.

use std::collections::{BTreeSet, HashSet, VecDeque};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Segment identifier, `1..=n_segments`.
pub type SegmentId = usize;

/// Undirected graph of myocardial nodes with 3D positions and segment labels.
///
/// Edges are stored as ordered `(tail, head)` pairs; the order fixes the sign
/// convention of [`GradientOperator`].
#[derive(Debug, Clone, PartialEq)]
pub struct MeshGraph {
    node_coords: Vec<[f64; 3]>,
    edges: Vec<(usize, usize)>,
    segment_of_node: Vec<SegmentId>,
    n_segments: usize,
}

#[derive(Serialize, Deserialize)]
struct MeshJson {
    nodes: Vec<[f64; 3]>,
    edges: Vec<[usize; 2]>,
    segments: Vec<SegmentId>,
}

impl MeshGraph {
    /// Builds a mesh after checking every structural invariant: edges in
    /// range, no self-loops or duplicate undirected edges, a connected graph,
    /// and one label in `1..=S` per node with every label used.
    pub fn new(
        node_coords: Vec<[f64; 3]>,
        edges: Vec<(usize, usize)>,
        segment_of_node: Vec<SegmentId>,
    ) -> Result<Self> {
        let n = node_coords.len();
        if n == 0 {
            return Err(Error::invalid("mesh has no nodes"));
        }
        if segment_of_node.len() != n {
            return Err(Error::invalid(format!(
                "{} segment labels for {} nodes",
                segment_of_node.len(),
                n
            )));
        }
        if node_coords.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::invalid("non-finite node coordinate"));
        }
        let mut seen = HashSet::with_capacity(edges.len());
        for &(a, b) in &edges {
            if a >= n || b >= n {
                return Err(Error::invalid(format!("edge ({a},{b}) out of range")));
            }
            if a == b {
                return Err(Error::invalid(format!("self-loop at node {a}")));
            }
            if !seen.insert((a.min(b), a.max(b))) {
                return Err(Error::invalid(format!("duplicate edge ({a},{b})")));
            }
        }
        let n_segments = segment_of_node.iter().copied().max().unwrap_or(0);
        if segment_of_node.contains(&0) {
            return Err(Error::invalid("segment ids start at 1"));
        }
        let used: BTreeSet<_> = segment_of_node.iter().copied().collect();
        if used.len() != n_segments {
            return Err(Error::invalid("segment ids are not contiguous"));
        }
        let mesh = MeshGraph {
            node_coords,
            edges,
            segment_of_node,
            n_segments,
        };
        if !mesh.is_connected() {
            return Err(Error::invalid("mesh graph is not connected"));
        }
        Ok(mesh)
    }

    pub fn n_nodes(&self) -> usize {
        self.node_coords.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn n_segments(&self) -> usize {
        self.n_segments
    }

    pub fn node_coords(&self) -> &[[f64; 3]] {
        &self.node_coords
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn segment_of_node(&self) -> &[SegmentId] {
        &self.segment_of_node
    }

    pub fn nodes_in_segment(&self, segment: SegmentId) -> Vec<usize> {
        self.segment_of_node
            .iter()
            .enumerate()
            .filter(|&(_, &s)| s == segment)
            .map(|(i, _)| i)
            .collect()
    }

    /// Neighbor lists in edge order.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n_nodes()];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        adj
    }

    pub fn centroid(&self) -> [f64; 3] {
        centroid_of(self.node_coords.iter())
    }

    /// Largest distance from the centroid to any node.
    pub fn bounding_radius(&self) -> f64 {
        let c = self.centroid();
        self.node_coords
            .iter()
            .map(|p| dist(p, &c))
            .fold(0.0, f64::max)
    }

    fn is_connected(&self) -> bool {
        let adj = self.adjacency();
        let mut visited = vec![false; self.n_nodes()];
        let mut queue = VecDeque::from([0]);
        visited[0] = true;
        let mut count = 1;
        while let Some(i) = queue.pop_front() {
            for &j in &adj[i] {
                if !visited[j] {
                    visited[j] = true;
                    count += 1;
                    queue.push_back(j);
                }
            }
        }
        count == self.n_nodes()
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = MeshJson {
            nodes: self.node_coords.clone(),
            edges: self.edges.iter().map(|&(a, b)| [a, b]).collect(),
            segments: self.segment_of_node.clone(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: MeshJson = serde_json::from_str(text)?;
        MeshGraph::new(
            doc.nodes,
            doc.edges.into_iter().map(|[a, b]| (a, b)).collect(),
            doc.segments,
        )
    }
}

pub(crate) fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

pub(crate) fn centroid_of<'a>(points: impl Iterator<Item = &'a [f64; 3]>) -> [f64; 3] {
    let mut c = [0.0; 3];
    let mut n = 0usize;
    for p in points {
        for k in 0..3 {
            c[k] += p[k];
        }
        n += 1;
    }
    if n > 0 {
        for v in &mut c {
            *v /= n as f64;
        }
    }
    c
}

/// Regular `nx × ny × nz` lattice with nearest-neighbor edges.
///
/// Node `i` sits at `(x, y, z)` with `i = x + nx·(y + ny·z)`. Edges are
/// emitted per node in index order towards `+x`, `+y`, `+z`. Segments are
/// consecutive runs along a space-filling curve (see [`lattice_curve`]) whose
/// sizes differ by at most one, the larger runs first, so every segment is a
/// connected, compact patch.
pub fn build_lattice_mesh(nx: usize, ny: usize, nz: usize, n_segments: usize) -> Result<MeshGraph> {
    if nx == 0 || ny == 0 || nz == 0 {
        return Err(Error::invalid(format!(
            "lattice dimensions must be positive, got {nx}×{ny}×{nz}"
        )));
    }
    let n = nx * ny * nz;
    if n < 2 {
        return Err(Error::invalid("lattice needs at least two nodes"));
    }
    if n_segments == 0 || n_segments > n {
        return Err(Error::invalid(format!(
            "n_segments must be in 1..={n}, got {n_segments}"
        )));
    }
    let index = |x: usize, y: usize, z: usize| x + nx * (y + ny * z);
    let mut coords = Vec::with_capacity(n);
    let mut edges = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                coords.push([x as f64, y as f64, z as f64]);
            }
        }
    }
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = index(x, y, z);
                if x + 1 < nx {
                    edges.push((i, index(x + 1, y, z)));
                }
                if y + 1 < ny {
                    edges.push((i, index(x, y + 1, z)));
                }
                if z + 1 < nz {
                    edges.push((i, index(x, y, z + 1)));
                }
            }
        }
    }
    let base = n / n_segments;
    let extra = n % n_segments;
    let mut segments = vec![0; n];
    let mut curve = lattice_curve(nx, ny, nz).into_iter();
    for s in 0..n_segments {
        let size = base + usize::from(s < extra);
        for node in curve.by_ref().take(size) {
            segments[node] = s + 1;
        }
    }
    MeshGraph::new(coords, edges, segments)
}

/// Node indices of an `nx × ny × nz` lattice in the order of a generalized
/// Hilbert curve: each layer is traversed by the 2-D curve, alternate layers
/// in reverse, so consecutive entries are always lattice neighbors.
pub fn lattice_curve(nx: usize, ny: usize, nz: usize) -> Vec<usize> {
    let mut layer = Vec::with_capacity(nx * ny);
    let (w, h) = (nx as i64, ny as i64);
    if w >= h {
        gilbert(0, 0, w, 0, 0, h, &mut layer);
    } else {
        gilbert(0, 0, 0, h, w, 0, &mut layer);
    }
    let mut out = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        let nodes = layer.iter().map(|&(x, y)| x as usize + nx * (y as usize + ny * z));
        if z % 2 == 0 {
            out.extend(nodes);
        } else {
            out.extend(nodes.rev());
        }
    }
    out
}

/// Recursive generalized Hilbert curve over the rectangle spanned by the
/// major axis `(ax, ay)` and minor axis `(bx, by)` from `(x, y)`.
fn gilbert(x: i64, y: i64, ax: i64, ay: i64, bx: i64, by: i64, out: &mut Vec<(i64, i64)>) {
    let w = (ax + ay).abs();
    let h = (bx + by).abs();
    let (dax, day) = (ax.signum(), ay.signum());
    let (dbx, dby) = (bx.signum(), by.signum());
    if h == 1 {
        out.extend((0..w).map(|i| (x + i * dax, y + i * day)));
        return;
    }
    if w == 1 {
        out.extend((0..h).map(|i| (x + i * dbx, y + i * dby)));
        return;
    }
    let (mut ax2, mut ay2) = (ax.div_euclid(2), ay.div_euclid(2));
    let (mut bx2, mut by2) = (bx.div_euclid(2), by.div_euclid(2));
    let w2 = (ax2 + ay2).abs();
    let h2 = (bx2 + by2).abs();
    if 2 * w > 3 * h {
        if w2 % 2 == 1 && w > 2 {
            ax2 += dax;
            ay2 += day;
        }
        gilbert(x, y, ax2, ay2, bx, by, out);
        gilbert(x + ax2, y + ay2, ax - ax2, ay - ay2, bx, by, out);
    } else {
        if h2 % 2 == 1 && h > 2 {
            bx2 += dbx;
            by2 += dby;
        }
        gilbert(x, y, bx2, by2, ax2, ay2, out);
        gilbert(x + bx2, y + by2, ax, ay, bx - bx2, by - by2, out);
        gilbert(
            x + (ax - dax) + (bx2 - dbx),
            y + (ay - day) + (by2 - dby),
            -bx2,
            -by2,
            -(ax - ax2),
            -(ay - ay2),
            out,
        );
    }
}

/// Edge-difference operator `D`: row `e` of `D·u` is `u[head] − u[tail]`.
///
/// Kept in edge-list form; [`GradientOperator::to_dense`] materializes the
/// `n_edges × n_nodes` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientOperator {
    edges: Vec<(usize, usize)>,
    n_nodes: usize,
}

pub fn gradient_operator(mesh: &MeshGraph) -> GradientOperator {
    GradientOperator {
        edges: mesh.edges.clone(),
        n_nodes: mesh.n_nodes(),
    }
}

impl GradientOperator {
    pub fn n_rows(&self) -> usize {
        self.edges.len()
    }

    pub fn n_cols(&self) -> usize {
        self.n_nodes
    }

    pub fn edge_index(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn apply(&self, u: &DVector<f64>) -> DVector<f64> {
        assert_eq!(u.len(), self.n_nodes, "gradient input length");
        DVector::from_iterator(
            self.edges.len(),
            self.edges.iter().map(|&(t, h)| u[h] - u[t]),
        )
    }

    pub fn apply_transpose(&self, w: &DVector<f64>) -> DVector<f64> {
        assert_eq!(w.len(), self.edges.len(), "divergence input length");
        let mut out = DVector::zeros(self.n_nodes);
        for (e, &(t, h)) in self.edges.iter().enumerate() {
            out[h] += w[e];
            out[t] -= w[e];
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.edges.len(), self.n_nodes);
        for (e, &(t, h)) in self.edges.iter().enumerate() {
            d[(e, t)] = -1.0;
            d[(e, h)] = 1.0;
        }
        d
    }

    /// Diagonal of `D·M·Dᵀ` for a symmetric `M`, i.e. the variance of each
    /// edge difference under covariance `M`.
    pub fn edge_quadratic_diag(&self, m: &DMatrix<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.edges.len(),
            self.edges
                .iter()
                .map(|&(t, h)| m[(h, h)] + m[(t, t)] - m[(h, t)] - m[(t, h)]),
        )
    }
}

/// Nodes of one segment marked as scar.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScarMask {
    pub scar_nodes: BTreeSet<usize>,
    pub source_segment: SegmentId,
}

impl ScarMask {
    pub fn contains(&self, node: usize) -> bool {
        self.scar_nodes.contains(&node)
    }

    /// Edges with at least one scar endpoint, and the remaining edges.
    pub fn split_edges(&self, mesh: &MeshGraph) -> (Vec<usize>, Vec<usize>) {
        (0..mesh.n_edges()).partition(|&e| {
            let (a, b) = mesh.edges[e];
            self.contains(a) || self.contains(b)
        })
    }
}

/// Marks every node of `segment` as scar.
pub fn make_scar(mesh: &MeshGraph, segment: SegmentId) -> Result<ScarMask> {
    if segment == 0 || segment > mesh.n_segments() {
        return Err(Error::invalid(format!(
            "segment {segment} does not exist (mesh has {})",
            mesh.n_segments()
        )));
    }
    Ok(ScarMask {
        scar_nodes: mesh.nodes_in_segment(segment).into_iter().collect(),
        source_segment: segment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smallest_lattice() {
        let m = build_lattice_mesh(2, 1, 1, 1).unwrap();
        assert_eq!(m.n_nodes(), 2);
        assert_eq!(m.edges(), &[(0, 1)]);
        assert_eq!(m.segment_of_node(), &[1, 1]);
    }

    #[test]
    fn grid_edge_counts() {
        let m = build_lattice_mesh(3, 3, 1, 1).unwrap();
        assert_eq!((m.n_nodes(), m.n_edges()), (9, 12));

        let m = build_lattice_mesh(16, 16, 1, 17).unwrap();
        assert_eq!((m.n_nodes(), m.n_edges()), (256, 480));
        let sizes: Vec<usize> = (1..=17).map(|s| m.nodes_in_segment(s).len()).collect();
        let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
        assert!(hi - lo <= 1);
        assert_eq!(sizes.iter().sum::<usize>(), 256);
        // every segment is a connected patch
        let adj = m.adjacency();
        for s in 1..=17 {
            let nodes: BTreeSet<usize> = m.nodes_in_segment(s).into_iter().collect();
            let start = *nodes.iter().next().unwrap();
            let mut seen = BTreeSet::from([start]);
            let mut stack = vec![start];
            while let Some(i) = stack.pop() {
                for &j in &adj[i] {
                    if nodes.contains(&j) && seen.insert(j) {
                        stack.push(j);
                    }
                }
            }
            assert_eq!(seen, nodes, "segment {s} is not connected");
        }
    }

    #[test]
    fn curve_visits_every_node_through_neighbors() {
        for (nx, ny, nz) in [(16, 16, 1), (5, 3, 1), (3, 7, 2), (1, 4, 1), (6, 6, 3)] {
            let c = lattice_curve(nx, ny, nz);
            let set: BTreeSet<usize> = c.iter().copied().collect();
            assert_eq!(set.len(), nx * ny * nz);
            let m = build_lattice_mesh(nx, ny, nz, 1).unwrap();
            let adj = m.adjacency();
            for w in c.windows(2) {
                assert!(adj[w[0]].contains(&w[1]), "{nx}x{ny}x{nz}: {} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn three_d_lattice_uses_six_neighborhood() {
        let m = build_lattice_mesh(3, 3, 3, 2).unwrap();
        assert_eq!(m.n_edges(), 3 * 3 * 3 * 2);
        let adj = m.adjacency();
        assert_eq!(adj[13].len(), 6);
    }

    #[test]
    fn rejects_bad_lattice_args() {
        assert!(matches!(build_lattice_mesh(0, 3, 1, 1), Err(Error::InvalidArgument(_))));
        assert!(build_lattice_mesh(1, 1, 1, 1).is_err());
        assert!(build_lattice_mesh(2, 2, 1, 5).is_err());
        assert!(build_lattice_mesh(2, 2, 1, 0).is_err());
    }

    #[test]
    fn chain_gradient_matrix() {
        let m = build_lattice_mesh(3, 1, 1, 1).unwrap();
        let d = gradient_operator(&m).to_dense();
        let expected = DMatrix::from_row_slice(2, 3, &[-1.0, 1.0, 0.0, 0.0, -1.0, 1.0]);
        assert_eq!(d, expected);
    }

    #[test]
    fn gradient_of_x_coordinate() {
        let m = build_lattice_mesh(3, 3, 1, 1).unwrap();
        let d = gradient_operator(&m);
        let u = DVector::from_iterator(9, m.node_coords().iter().map(|p| p[0]));
        let du = d.apply(&u);
        for (e, &(t, h)) in m.edges().iter().enumerate() {
            let horizontal = m.node_coords()[t][1] == m.node_coords()[h][1];
            assert_eq!(du[e], if horizontal { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn dense_and_implicit_forms_agree() {
        let m = build_lattice_mesh(4, 3, 2, 3).unwrap();
        let d = gradient_operator(&m);
        let dense = d.to_dense();
        let u = DVector::from_fn(m.n_nodes(), |i, _| (i as f64 * 0.37).sin());
        let w = DVector::from_fn(m.n_edges(), |i, _| (i as f64 * 0.11).cos());
        assert!((d.apply(&u) - &dense * &u).amax() < 1e-14);
        assert!((d.apply_transpose(&w) - dense.transpose() * &w).amax() < 1e-14);
        let cov = DMatrix::from_fn(m.n_nodes(), m.n_nodes(), |i, j| {
            (-((i as f64) - (j as f64)).powi(2) / 8.0).exp()
        });
        let full = &dense * &cov * dense.transpose();
        assert!((d.edge_quadratic_diag(&cov) - full.diagonal()).amax() < 1e-12);
    }

    #[test]
    fn scar_masks() {
        let m = build_lattice_mesh(16, 16, 1, 17).unwrap();
        let scar = make_scar(&m, 1).unwrap();
        // 256 = 17·15 + 1, so segment 1 takes the extra node
        assert_eq!(scar.scar_nodes.len(), 16);
        assert!(scar.scar_nodes.iter().all(|&i| m.segment_of_node()[i] == 1));
        let last = make_scar(&m, 17).unwrap();
        assert_eq!(last.scar_nodes.len(), 15);

        let two = build_lattice_mesh(2, 1, 1, 1).unwrap();
        assert_eq!(make_scar(&two, 1).unwrap().scar_nodes.len(), 2);
        assert!(matches!(make_scar(&m, 99), Err(Error::InvalidArgument(_))));
        assert!(make_scar(&m, 0).is_err());
    }

    #[test]
    fn mesh_validation() {
        let c = vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        assert!(MeshGraph::new(c.clone(), vec![(0, 1), (1, 2)], vec![1, 1, 2]).is_ok());
        assert!(MeshGraph::new(c.clone(), vec![(0, 1)], vec![1, 1, 1]).is_err());
        assert!(MeshGraph::new(c.clone(), vec![(0, 1), (1, 0), (1, 2)], vec![1; 3]).is_err());
        assert!(MeshGraph::new(c.clone(), vec![(0, 0), (1, 2)], vec![1; 3]).is_err());
        assert!(MeshGraph::new(c.clone(), vec![(0, 1), (1, 3)], vec![1; 3]).is_err());
        assert!(MeshGraph::new(c, vec![(0, 1), (1, 2)], vec![1, 3, 3]).is_err());
    }

    #[test]
    fn json_round_trip() {
        let m = build_lattice_mesh(3, 2, 1, 2).unwrap();
        let text = m.to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["edges"][0], serde_json::json!([0, 1]));
        assert_eq!(v["segments"].as_array().unwrap().len(), 6);
        assert_eq!(MeshGraph::from_json(&text).unwrap(), m);
    }
}
