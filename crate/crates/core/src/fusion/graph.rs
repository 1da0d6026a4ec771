//! Spatial k-nearest-neighbour graphs over selected patches.

use crate::data::PatchCoord;
use crate::numeric::Matrix;

pub const DEFAULT_K_NN: usize = 8;

/// Symmetrized KNN graph. `adjacency` has a zero diagonal; `norm_adjacency`
/// is `D^-1/2 (A + I) D^-1/2` with `degree` the row sums of `A + I`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGraph {
    pub adjacency: Matrix,
    pub norm_adjacency: Matrix,
    pub degree: Vec<f64>,
}

impl PatchGraph {
    pub fn nodes(&self) -> usize {
        self.adjacency.rows()
    }

    /// Graph with no edges: the normalized adjacency is the identity.
    pub fn isolated(n: usize) -> Self {
        PatchGraph {
            adjacency: Matrix::zeros(n, n),
            norm_adjacency: Matrix::identity(n),
            degree: vec![1.0; n],
        }
    }

    fn from_adjacency(adjacency: Matrix) -> Self {
        let n = adjacency.rows();
        let degree: Vec<f64> = (0..n).map(|i| adjacency.row(i).iter().sum::<f64>() + 1.0).collect();
        let norm_adjacency = Matrix::from_fn(n, n, |i, j| {
            let a = adjacency[(i, j)] + if i == j { 1.0 } else { 0.0 };
            a / (degree[i].sqrt() * degree[j].sqrt())
        });
        PatchGraph {
            adjacency,
            norm_adjacency,
            degree,
        }
    }
}

fn distance2(a: PatchCoord, b: PatchCoord) -> i64 {
    let dx = i64::from(a.gx) - i64::from(b.gx);
    let dy = i64::from(a.gy) - i64::from(b.gy);
    dx * dx + dy * dy
}

/// Row `i` marks the `min(k, same-slide nodes - 1)` nearest nodes to `i`.
/// Distance ties go to the smaller `ids` value, so the result is stable under
/// reordering of the nodes when `ids` are the patches' original indices.
pub fn directed_knn(coords: &[PatchCoord], ids: &[usize], k: usize) -> Matrix {
    assert_eq!(coords.len(), ids.len(), "one id per node");
    let n = coords.len();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        let mut others: Vec<usize> = (0..n).filter(|&j| j != i && coords[j].slide == coords[i].slide).collect();
        others.sort_by_key(|&j| (distance2(coords[i], coords[j]), ids[j]));
        for &j in others.iter().take(k) {
            out.row_mut(i)[j] = 1.0;
        }
    }
    out
}

/// KNN graph on grid coordinates, per slide, symmetrized with `max(A, Aᵀ)`.
pub fn knn_graph(coords: &[PatchCoord], ids: &[usize], k: usize) -> PatchGraph {
    let directed = directed_knn(coords, ids, k);
    let n = directed.rows();
    let sym = Matrix::from_fn(n, n, |i, j| directed[(i, j)].max(directed[(j, i)]));
    PatchGraph::from_adjacency(sym)
}
