use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::FlowGraph;
use crate::error::{Error, Result};
use crate::neural::Tensor;
use crate::seed::rng_for;

const KMEANS_MAX_ITER: usize = 300;
const KMEANS_TOL: f64 = 1e-6;

/// The `k` smallest eigenpairs of the clustering Laplacian.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralEmbedding {
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    /// `N × k`, unit-norm columns.
    pub vectors: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    /// Label in `0..k` per flow, numbered in order of first appearance.
    pub labels: Vec<usize>,
    pub k: usize,
    /// The points that were clustered (`N × dims`).
    pub embedding: Tensor,
    /// Within-cluster sum of squares after each assignment step.
    pub objective_history: Vec<f64>,
    pub iterations: usize,
}

impl ClusterAssignment {
    /// Every flow in cluster 0.
    pub fn single(n: usize) -> Self {
        ClusterAssignment {
            labels: vec![0; n],
            k: 1,
            embedding: Tensor::zeros(n, 1),
            objective_history: Vec::new(),
            iterations: 0,
        }
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }
}

/// First `k` eigenvectors of `I − D^{-1/2} A D^{-1/2}` by dense symmetric QR.
///
/// Each column's sign is fixed so that its largest-magnitude entry is
/// positive.
pub fn spectral_embed(graph: &FlowGraph, k: usize) -> Result<SpectralEmbedding> {
    let n = graph.n();
    if k == 0 || k > n {
        return Err(Error::InvalidInput(format!("spectral_embed needs 1 ≤ k ≤ {n}, got {k}")));
    }
    let l = graph.clustering_laplacian();
    let m = DMatrix::from_row_slice(n, n, l.data());
    let max_iter = 1000 * n.max(10);
    let eig = SymmetricEigen::try_new(m, f64::EPSILON, max_iter).ok_or(Error::NoConvergence { iterations: max_iter })?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(a.cmp(&b)));
    let mut vectors = Tensor::zeros(n, k);
    let mut eigenvalues = Vec::with_capacity(k);
    for (c, &idx) in order.iter().take(k).enumerate() {
        let col = eig.eigenvectors.column(idx);
        let norm = col.norm();
        let pivot = (0..n).fold(0, |best, i| if col[i].abs() > col[best].abs() + 1e-12 { i } else { best });
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            vectors.set(i, c, sign * col[i] / norm);
        }
        eigenvalues.push(eig.eigenvalues[idx]);
    }
    Ok(SpectralEmbedding { eigenvalues, vectors })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's k-means with k-means++ seeding.
///
/// Stops when no centroid moves more than `1e-6` or after 300 iterations.
/// A cluster that empties is reseeded with the point farthest from its
/// current centroid.
pub fn kmeans_cluster(points: &Tensor, k: usize, seed: u64) -> Result<ClusterAssignment> {
    let (n, dims) = points.shape();
    if k == 0 || k > n {
        return Err(Error::InvalidInput(format!("kmeans needs 1 ≤ k ≤ {n}, got {k}")));
    }
    if !points.is_finite() {
        return Err(Error::InvalidInput("kmeans points must be finite".into()));
    }
    let mut rng = rng_for(seed, "kmeans");
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points.row(rng.random_range(0..n)).to_vec());
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > target {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.push(points.row(pick).to_vec());
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), &centroids[centroids.len() - 1]));
        }
    }

    let mut labels = vec![0usize; n];
    let mut history = Vec::new();
    let mut iterations = 0;
    for iter in 0..KMEANS_MAX_ITER {
        iterations = iter + 1;
        let mut objective = 0.0;
        for (i, label) in labels.iter_mut().enumerate() {
            let (mut best, mut best_d) = (0, f64::INFINITY);
            for (c, centroid) in centroids.iter().enumerate() {
                let d = sq_dist(points.row(i), centroid);
                if d < best_d {
                    best = c;
                    best_d = d;
                }
            }
            *label = best;
            objective += best_d;
        }

        let mut sums = vec![vec![0.0; dims]; k];
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        let mut repaired = false;
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            // Steal the worst-fitting point from a cluster that can spare it.
            let far = (0..n)
                .filter(|&i| counts[labels[i]] > 1)
                .max_by(|&a, &b| {
                    sq_dist(points.row(a), &centroids[labels[a]])
                        .total_cmp(&sq_dist(points.row(b), &centroids[labels[b]]))
                        .then(b.cmp(&a))
                })
                .expect("k ≤ n leaves a cluster with a spare point");
            let old = labels[far];
            objective -= sq_dist(points.row(far), &centroids[old]);
            counts[old] -= 1;
            for (s, v) in sums[old].iter_mut().zip(points.row(far)) {
                *s -= v;
            }
            labels[far] = c;
            counts[c] = 1;
            sums[c] = points.row(far).to_vec();
            repaired = true;
        }
        history.push(objective);

        let mut movement: f64 = 0.0;
        for c in 0..k {
            let new: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            movement = movement.max(sq_dist(&new, &centroids[c]).sqrt());
            centroids[c] = new;
        }
        if movement <= KMEANS_TOL && !repaired {
            break;
        }
    }

    // Canonical numbering: clusters in order of their first flow.
    let mut remap = vec![usize::MAX; k];
    let mut next = 0;
    for l in labels.iter_mut() {
        if remap[*l] == usize::MAX {
            remap[*l] = next;
            next += 1;
        }
        *l = remap[*l];
    }
    Ok(ClusterAssignment {
        labels,
        k,
        embedding: points.clone(),
        objective_history: history,
        iterations,
    })
}

/// Spectral partition: embed with `k` eigenvectors, scale each row to unit
/// length, then k-means.
pub fn spectral_clusters(graph: &FlowGraph, k: usize, seed: u64) -> Result<ClusterAssignment> {
    if k == 1 {
        return Ok(ClusterAssignment::single(graph.n()));
    }
    let emb = spectral_embed(graph, k)?;
    let mut rows = emb.vectors.clone();
    for i in 0..rows.rows() {
        let r = rows.row_mut(i);
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            r.iter_mut().for_each(|v| *v /= norm);
        }
    }
    let mut assignment = kmeans_cluster(&rows, k, seed)?;
    assignment.embedding = emb.vectors;
    Ok(assignment)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn residual(l: &Tensor, v: &[f64], lambda: f64) -> f64 {
        let n = v.len();
        (0..n)
            .map(|i| {
                let lv: f64 = (0..n).map(|j| l.get(i, j) * v[j]).sum();
                (lv - lambda * v[i]).powi(2)
            })
            .sum::<f64>()
            .sqrt()
    }

    fn path(n: usize) -> FlowGraph {
        FlowGraph::from_edges(n, (0..n - 1).map(|i| (i, i + 1))).unwrap()
    }

    #[test]
    fn connected_graph_kernel_is_sqrt_degree() {
        let g = path(5);
        let e = spectral_embed(&g, 1).unwrap();
        assert!(e.eigenvalues[0].abs() < 1e-10);
        let d: Vec<f64> = (0..5).map(|i| (g.degree(i) as f64).sqrt()).collect();
        let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (i, di) in d.iter().enumerate() {
            assert!((e.vectors.get(i, 0) - di / norm).abs() < 1e-10);
        }
    }

    #[test]
    fn two_components_two_zero_eigenvalues_and_residuals() {
        let g = FlowGraph::from_edges(6, [(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)]).unwrap();
        let e = spectral_embed(&g, 3).unwrap();
        assert!(e.eigenvalues[0].abs() < 1e-10 && e.eigenvalues[1].abs() < 1e-10);
        assert!(e.eigenvalues[2] > 0.1);
        let l = g.clustering_laplacian();
        for c in 0..3 {
            let col: Vec<f64> = (0..6).map(|i| e.vectors.get(i, c)).collect();
            assert!(residual(&l, &col, e.eigenvalues[c]) < 1e-8);
        }
    }

    #[test]
    fn k_out_of_range() {
        assert!(spectral_embed(&path(3), 0).is_err());
        assert!(spectral_embed(&path(3), 4).is_err());
        assert!(kmeans_cluster(&Tensor::zeros(2, 1), 3, 0).is_err());
    }

    #[test]
    fn kmeans_separates_blobs() {
        let pts = Tensor::from_rows(&[
            vec![0.0, 0.0],
            vec![10.0, 10.0],
            vec![0.1, -0.1],
            vec![10.1, 9.9],
            vec![-0.1, 0.1],
        ])
        .unwrap();
        let a = kmeans_cluster(&pts, 2, 3).unwrap();
        assert_eq!(a.labels, vec![0, 1, 0, 1, 0]);
        let one = kmeans_cluster(&pts, 1, 3).unwrap();
        assert!(one.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn disconnected_cliques_cluster_into_components() {
        let mut edges = Vec::new();
        for base in [0, 4] {
            for i in 0..4 {
                for j in i + 1..4 {
                    edges.push((base + i, base + j));
                }
            }
        }
        let g = FlowGraph::from_edges(8, edges).unwrap();
        let a = spectral_clusters(&g, 2, 11).unwrap();
        assert_eq!(a.labels, g.components());
    }

    #[test]
    fn duplicate_points_still_fill_every_cluster() {
        let pts = Tensor::zeros(5, 2);
        let a = kmeans_cluster(&pts, 3, 1).unwrap();
        assert!(a.cluster_sizes().iter().all(|&s| s > 0));
    }
}
