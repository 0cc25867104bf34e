//! The flow graph: nodes are flows, edges join flows that share an endpoint.

mod spectral;

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::Tensor;
use crate::traffic_data::{LatLng, RoadGeometry};

pub use spectral::{kmeans_cluster, spectral_clusters, spectral_embed, ClusterAssignment, SpectralEmbedding};

/// Two endpoints closer than this (degrees, per axis) are the same point.
pub const SNAP_TOLERANCE_DEG: f64 = 1e-6;

/// Mean Earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

/// `(city, nodes, edges)` of the San Francisco and New York flow graphs.
/// Only used to size synthetic scenarios.
pub const REFERENCE_SCALES: [(&str, usize, usize); 2] = [("SFO", 2_416, 19_334), ("NYC", 13_028, 92_470)];

/// Undirected simple graph over flows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowGraph {
    n: usize,
    /// Sorted `(i, j)` pairs with `i < j`.
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
}

impl FlowGraph {
    /// Builds a graph from an explicit edge list; duplicates and self-loops
    /// are dropped.
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidInput("flow graph needs at least one flow".into()));
        }
        let mut list = Vec::new();
        for (a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::InvalidInput(format!("edge ({a}, {b}) out of range for {n} flows")));
            }
            if a != b {
                list.push((a.min(b), a.max(b)));
            }
        }
        list.sort_unstable();
        list.dedup();
        let mut neighbors = vec![Vec::new(); n];
        for &(a, b) in &list {
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for nb in &mut neighbors {
            nb.sort_unstable();
        }
        Ok(FlowGraph { n, edges: list, neighbors })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    /// Dense 0/1 adjacency `A`.
    pub fn adjacency(&self) -> Tensor {
        let mut a = Tensor::zeros(self.n, self.n);
        for &(i, j) in &self.edges {
            a.set(i, j, 1.0);
            a.set(j, i, 1.0);
        }
        a
    }

    /// `Ã = A + I`.
    pub fn adjacency_with_self_loops(&self) -> Tensor {
        let mut a = self.adjacency();
        for i in 0..self.n {
            a.set(i, i, 1.0);
        }
        a
    }

    /// Graph-convolution propagation matrix `D̃^{-1/2} Ã D̃^{-1/2}`.
    pub fn propagation_matrix(&self) -> Tensor {
        let d: Vec<usize> = (0..self.n).map(|i| self.degree(i) + 1).collect();
        let mut p = Tensor::zeros(self.n, self.n);
        for i in 0..self.n {
            p.set(i, i, 1.0 / d[i] as f64);
            for &j in &self.neighbors[i] {
                p.set(i, j, 1.0 / ((d[i] * d[j]) as f64).sqrt());
            }
        }
        p
    }

    /// Clustering Laplacian `I − D^{-1/2} A D^{-1/2}`; isolated flows get a
    /// zero `D^{-1/2}` entry.
    pub fn clustering_laplacian(&self) -> Tensor {
        // Isolated flows have no neighbors, so their zero D^{-1/2} entry
        // never enters a product.
        let mut l = Tensor::identity(self.n);
        for i in 0..self.n {
            for &j in &self.neighbors[i] {
                l.set(i, j, -1.0 / ((self.degree(i) * self.degree(j)) as f64).sqrt());
            }
        }
        l
    }

    /// Connected-component label of every flow, numbered by first flow.
    pub fn components(&self) -> Vec<usize> {
        let mut label = vec![usize::MAX; self.n];
        let mut next = 0;
        for start in 0..self.n {
            if label[start] != usize::MAX {
                continue;
            }
            let mut stack = vec![start];
            label[start] = next;
            while let Some(u) = stack.pop() {
                for &v in &self.neighbors[u] {
                    if label[v] == usize::MAX {
                        label[v] = next;
                        stack.push(v);
                    }
                }
            }
            next += 1;
        }
        label
    }
}

fn cell(p: LatLng) -> (i64, i64) {
    (
        (p.lat / SNAP_TOLERANCE_DEG).floor() as i64,
        (p.lng / SNAP_TOLERANCE_DEG).floor() as i64,
    )
}

fn same_point(a: LatLng, b: LatLng) -> bool {
    (a.lat - b.lat).abs() <= SNAP_TOLERANCE_DEG && (a.lng - b.lng).abs() <= SNAP_TOLERANCE_DEG
}

/// Joins every pair of flows sharing an endpoint within [`SNAP_TOLERANCE_DEG`].
pub fn build_flow_graph(geometry: &RoadGeometry) -> Result<FlowGraph> {
    if geometry.is_empty() {
        return Err(Error::InvalidInput("geometry has no flows".into()));
    }
    let mut buckets: HashMap<(i64, i64), Vec<(usize, LatLng)>> = HashMap::new();
    for (i, f) in geometry.flows.iter().enumerate() {
        for p in [f.a, f.b] {
            if !(p.lat.is_finite() && p.lng.is_finite()) {
                return Err(Error::InvalidInput(format!("flow {i} has a non-finite endpoint")));
            }
            buckets.entry(cell(p)).or_default().push((i, p));
        }
    }
    let mut edges = Vec::new();
    for (i, f) in geometry.flows.iter().enumerate() {
        for p in [f.a, f.b] {
            let (ci, cj) = cell(p);
            for di in -1..=1 {
                for dj in -1..=1 {
                    let Some(bucket) = buckets.get(&(ci + di, cj + dj)) else {
                        continue;
                    };
                    for &(j, q) in bucket {
                        if j > i && same_point(p, q) {
                            edges.push((i, j));
                        }
                    }
                }
            }
        }
    }
    FlowGraph::from_edges(geometry.len(), edges)
}

/// Equirectangular distance in meters, projected at the pair's mean latitude.
pub fn flow_distance(a: LatLng, b: LatLng) -> f64 {
    let mean_lat = ((a.lat + b.lat) / 2.0).to_radians();
    let x = (b.lng - a.lng).to_radians() * mean_lat.cos();
    let y = (b.lat - a.lat).to_radians();
    EARTH_RADIUS_M * (x * x + y * y).sqrt()
}

fn write_file(path: &Path, body: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    body(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// Edge list as `src_flow,dst_flow`, one row per undirected edge.
pub fn save_edges(graph: &FlowGraph, path: &Path) -> Result<()> {
    write_file(path, |w| {
        writeln!(w, "src_flow,dst_flow")?;
        for (a, b) in graph.edges() {
            writeln!(w, "{a},{b}")?;
        }
        Ok(())
    })
}

pub fn save_clusters(assignment: &ClusterAssignment, path: &Path) -> Result<()> {
    write_file(path, |w| {
        writeln!(w, "flow_id,label")?;
        for (i, l) in assignment.labels.iter().enumerate() {
            writeln!(w, "{i},{l}")?;
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::traffic_data::FlowSegment;

    fn seg(a: (f64, f64), b: (f64, f64)) -> FlowSegment {
        FlowSegment {
            a: LatLng::new(a.0, a.1),
            b: LatLng::new(b.0, b.1),
        }
    }

    #[test]
    fn shared_endpoint_gives_one_edge() {
        let g = build_flow_graph(&RoadGeometry {
            flows: vec![seg((0.0, 0.0), (0.0, 1.0)), seg((0.0, 1.0), (1.0, 1.0))],
        })
        .unwrap();
        assert_eq!(g.edges(), &[(0, 1)]);
    }

    #[test]
    fn three_flows_at_one_point_form_a_triangle() {
        let c = (0.5, 0.5);
        let g = build_flow_graph(&RoadGeometry {
            flows: vec![seg(c, (0.0, 0.0)), seg((1.0, 0.0), c), seg(c, (0.0, 1.0))],
        })
        .unwrap();
        assert_eq!(g.edges(), &[(0, 1), (0, 2), (1, 2)]);
    }

    #[test]
    fn snap_tolerance() {
        let near = build_flow_graph(&RoadGeometry {
            flows: vec![seg((0.0, 0.0), (0.0, 1.0)), seg((0.0, 1.0 + 5e-7), (1.0, 1.0))],
        })
        .unwrap();
        assert_eq!(near.edges().len(), 1);
        let far = build_flow_graph(&RoadGeometry {
            flows: vec![seg((0.0, 0.0), (0.0, 1.0)), seg((0.0, 1.0 + 5e-6), (1.0, 1.0))],
        })
        .unwrap();
        assert!(far.edges().is_empty());
    }

    #[test]
    fn empty_geometry_is_rejected() {
        assert!(build_flow_graph(&RoadGeometry { flows: vec![] }).is_err());
    }

    #[test]
    fn single_node_propagation_is_one() {
        let g = FlowGraph::from_edges(1, []).unwrap();
        assert_eq!(g.propagation_matrix().data(), &[1.0]);
        assert_eq!(g.clustering_laplacian().data(), &[1.0]);
    }

    #[test]
    fn two_node_clustering_laplacian() {
        // Degrees are 1, so D^{-1/2} A D^{-1/2} has off-diagonal 1.
        let g = FlowGraph::from_edges(2, [(0, 1)]).unwrap();
        assert_eq!(g.clustering_laplacian().data(), &[1.0, -1.0, -1.0, 1.0]);
        // Ã has degrees 2: every entry 1/2.
        assert_eq!(g.propagation_matrix().data(), &[0.5; 4]);
    }

    #[test]
    fn distance_oracles() {
        let a = LatLng::new(37.75, -122.45);
        assert_eq!(flow_distance(a, a), 0.0);
        let b = LatLng::new(37.76, -122.45);
        assert!((flow_distance(a, b) - 1111.95).abs() < 1.0);
        assert_eq!(flow_distance(a, b), flow_distance(b, a));
    }

    #[test]
    fn components_of_two_cliques() {
        let g = FlowGraph::from_edges(5, [(0, 1), (1, 2), (0, 2), (3, 4)]).unwrap();
        assert_eq!(g.components(), vec![0, 0, 0, 1, 1]);
    }
}
