//! Weighted graphs, Laplacians and connectivity.

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-12;

/// Dense weighted graph. Undirected graphs have a symmetric adjacency; a
/// directed graph keeps its adjacency as given and is symmetrized before any
/// Laplacian operation.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    adjacency: Array2<f64>,
    directed: bool,
}

fn validate_adjacency(a: &Array2<f64>) -> Result<()> {
    let (r, c) = a.dim();
    if r != c {
        return Err(Error::Graph(format!("adjacency must be square, got {r}x{c}")));
    }
    if r == 0 {
        return Err(Error::Graph("graph must have at least one node".into()));
    }
    for ((i, j), &w) in a.indexed_iter() {
        if !w.is_finite() || w < 0.0 {
            return Err(Error::Graph(format!("edge ({i}, {j}) has invalid weight {w}")));
        }
        if i == j && w != 0.0 {
            return Err(Error::Graph(format!("self-loop on node {i}")));
        }
    }
    Ok(())
}

fn is_symmetric(a: &Array2<f64>) -> bool {
    let n = a.nrows();
    (0..n).all(|i| (i + 1..n).all(|j| (a[[i, j]] - a[[j, i]]).abs() <= SYMMETRY_TOL))
}

impl Graph {
    /// Undirected graph; rejects asymmetric adjacency.
    pub fn undirected(adjacency: Array2<f64>) -> Result<Self> {
        validate_adjacency(&adjacency)?;
        if !is_symmetric(&adjacency) {
            return Err(Error::Graph("adjacency is not symmetric".into()));
        }
        Ok(Self {
            adjacency,
            directed: false,
        })
    }

    pub fn directed(adjacency: Array2<f64>) -> Result<Self> {
        validate_adjacency(&adjacency)?;
        Ok(Self {
            adjacency,
            directed: true,
        })
    }

    pub fn empty(n: usize) -> Self {
        Self {
            adjacency: Array2::zeros((n, n)),
            directed: false,
        }
    }

    /// Builds an undirected graph from `(i, j, w)` triples.
    pub fn from_edges(n: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let mut a = Array2::zeros((n, n));
        for &(i, j, w) in edges {
            if i >= n || j >= n {
                return Err(Error::Graph(format!("edge ({i}, {j}) out of range for {n} nodes")));
            }
            if i == j {
                return Err(Error::Graph(format!("self-loop on node {i}")));
            }
            a[[i, j]] = w;
            a[[j, i]] = w;
        }
        Self::undirected(a)
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.nrows()
    }

    pub fn adjacency(&self) -> &Array2<f64> {
        &self.adjacency
    }

    pub fn is_directed(&self) -> bool {
        self.directed
    }

    /// Symmetric view used by every Laplacian operation.
    pub fn symmetric_adjacency(&self) -> Array2<f64> {
        if self.directed {
            (&self.adjacency + &self.adjacency.t()) * 0.5
        } else {
            self.adjacency.clone()
        }
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency[[i, j]] > 0.0
    }

    /// Undirected edges `(i, j, w)` with `i < j`, in row-major order.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let a = self.symmetric_adjacency();
        let n = a.nrows();
        let mut out = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if a[[i, j]] > 0.0 {
                    out.push((i, j, a[[i, j]]));
                }
            }
        }
        out
    }

    pub fn edge_count(&self) -> usize {
        self.edges().len()
    }

    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        (0..self.node_count())
            .filter(|&j| self.adjacency[[i, j]] > 0.0)
            .collect()
    }

    /// Weighted degrees `D_ii = sum_j A_ij` of the symmetric view.
    pub fn degrees(&self) -> Array1<f64> {
        self.symmetric_adjacency().sum_axis(Axis(1))
    }

    pub fn laplacian(&self) -> LaplacianBundle {
        LaplacianBundle::from_symmetric(self.symmetric_adjacency())
    }

    /// Relabels nodes so that new node `k` is old node `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.node_count();
        let a = Array2::from_shape_fn((n, n), |(i, j)| self.adjacency[[perm[i], perm[j]]]);
        Self {
            adjacency: a,
            directed: self.directed,
        }
    }
}

/// Degree matrix, combinatorial Laplacian `L = D - A` and the self-loop
/// augmented symmetric normalization `D~^{-1/2} (A + I) D~^{-1/2}`.
#[derive(Clone, Debug, PartialEq)]
pub struct LaplacianBundle {
    pub degree: Array2<f64>,
    pub laplacian: Array2<f64>,
    pub sym_norm_adjacency: Array2<f64>,
}

impl LaplacianBundle {
    /// Rejects asymmetric input.
    pub fn from_adjacency(a: &Array2<f64>) -> Result<Self> {
        validate_adjacency(a)?;
        if !is_symmetric(a) {
            return Err(Error::Graph("Laplacian requires a symmetric adjacency".into()));
        }
        Ok(Self::from_symmetric(a.clone()))
    }

    fn from_symmetric(a: Array2<f64>) -> Self {
        let n = a.nrows();
        let deg = a.sum_axis(Axis(1));
        let degree = Array2::from_diag(&deg);
        let laplacian = &degree - &a;
        let inv_sqrt: Array1<f64> = deg.mapv(|d| 1.0 / (d + 1.0).sqrt());
        let sym_norm_adjacency = Array2::from_shape_fn((n, n), |(i, j)| {
            let aug = if i == j { 1.0 } else { a[[i, j]] };
            inv_sqrt[i] * aug * inv_sqrt[j]
        });
        Self {
            degree,
            laplacian,
            sym_norm_adjacency,
        }
    }
}

/// `L U`: row `i` is `D_ii u_i - sum_j A_ij u_j`.
pub fn laplacian_apply(laplacian: &Array2<f64>, states: &Array2<f64>) -> Result<Array2<f64>> {
    if laplacian.ncols() != states.nrows() || laplacian.nrows() != laplacian.ncols() {
        return Err(Error::Shape {
            op: "laplacian_apply",
            left: laplacian.shape().to_vec(),
            right: states.shape().to_vec(),
        });
    }
    Ok(laplacian.dot(states))
}

/// Connected components of the symmetric view: `(count, labels)` with labels
/// numbered in order of first appearance.
pub fn connected_components(g: &Graph) -> (usize, Vec<usize>) {
    let a = g.symmetric_adjacency();
    let n = a.nrows();
    let mut labels = vec![usize::MAX; n];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..n {
        if labels[start] != usize::MAX {
            continue;
        }
        labels[start] = count;
        stack.push(start);
        while let Some(v) = stack.pop() {
            for w in 0..n {
                if a[[v, w]] > 0.0 && labels[w] == usize::MAX {
                    labels[w] = count;
                    stack.push(w);
                }
            }
        }
        count += 1;
    }
    (count, labels)
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
pub fn symmetric_eigenvalues(m: &Array2<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut a = m.clone();
    let scale = a.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[[i, j]] * a[[i, j]])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[[p, q]];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[[i, i]]).collect();
    eig.sort_by(|x, y| x.total_cmp(y));
    eig
}
