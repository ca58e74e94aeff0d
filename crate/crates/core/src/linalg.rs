//! Dense linear-algebra helpers shared across modules.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

/// Column block width for parallel products. Fixed so results do not depend
/// on the size of the thread pool.
const BLOCK_COLS: usize = 8;

/// A symmetric n×n operator that can be applied to a block of vectors.
pub trait SymmetricOperator: Sync {
    fn dim(&self) -> usize;

    /// Returns `A X` for an n×k block `X`.
    fn apply_block(&self, x: &DMatrix<f64>) -> DMatrix<f64>;

    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let x = DMatrix::from_column_slice(v.len(), 1, v.as_slice());
        DVector::from_column_slice(self.apply_block(&x).as_slice())
    }

    /// The diagonal, when cheaply available.
    fn diagonal(&self) -> Option<DVector<f64>> {
        None
    }
}

impl SymmetricOperator for DMatrix<f64> {
    fn dim(&self) -> usize {
        self.nrows()
    }

    fn apply_block(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        par_matmul(self, x)
    }

    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        par_matvec(self, v.as_slice())
    }

    fn diagonal(&self) -> Option<DVector<f64>> {
        Some(DMatrix::diagonal(self))
    }
}

/// `A X`, parallel over fixed-width column blocks of `X`.
pub fn par_matmul(a: &DMatrix<f64>, x: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.ncols(), x.nrows());
    let (n, k) = (a.nrows(), x.ncols());
    if k == 1 {
        let y = par_matvec(a, x.as_slice());
        return DMatrix::from_column_slice(n, 1, y.as_slice());
    }
    let starts: Vec<usize> = (0..k).step_by(BLOCK_COLS).collect();
    let blocks: Vec<DMatrix<f64>> = starts
        .par_iter()
        .map(|&s| {
            let w = BLOCK_COLS.min(k - s);
            a * x.columns(s, w)
        })
        .collect();
    let mut out = DMatrix::zeros(n, k);
    for (&s, b) in starts.iter().zip(&blocks) {
        out.columns_mut(s, b.ncols()).copy_from(b);
    }
    out
}

/// `A v` for a symmetric `A`, computed as column dot products so each entry
/// is produced by one thread in a fixed order.
pub fn par_matvec(a: &DMatrix<f64>, v: &[f64]) -> DVector<f64> {
    let n = a.nrows();
    let data = a.as_slice();
    let out: Vec<f64> = (0..a.ncols())
        .into_par_iter()
        .map(|j| dot(&data[j * n..(j + 1) * n], v))
        .collect();
    DVector::from_vec(out)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `wᵀ A w`.
pub fn quadratic<A: SymmetricOperator + ?Sized>(a: &A, w: &[f64]) -> f64 {
    let v = DVector::from_column_slice(w);
    dot(a.apply(&v).as_slice(), w)
}

/// Householder QR with column pivoting of an n×p matrix.
pub struct PivotedQr {
    /// Householder vectors, one per processed column, each of length n with
    /// zeros above its pivot row.
    reflectors: Vec<(DVector<f64>, f64)>,
    /// Original column indices in pivot order.
    pub pivots: Vec<usize>,
    /// Numerical rank.
    pub rank: usize,
    n: usize,
}

impl PivotedQr {
    /// Factors `a`, stopping when the largest remaining column norm drops
    /// below `rel_tol` times the largest initial column norm.
    pub fn new(a: &DMatrix<f64>, rel_tol: f64) -> Self {
        let (n, p) = a.shape();
        let mut r = a.clone();
        let mut pivots: Vec<usize> = (0..p).collect();
        let mut reflectors = Vec::new();
        let norm0 = (0..p).map(|j| r.column(j).norm()).fold(0.0, f64::max);
        let mut rank = 0;
        for k in 0..p.min(n) {
            let (best, best_norm) = (k..p)
                .map(|j| (j, r.view((k, j), (n - k, 1)).norm()))
                .fold((k, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
            if best_norm <= rel_tol * norm0 || best_norm == 0.0 {
                break;
            }
            r.swap_columns(k, best);
            pivots.swap(k, best);
            let x = r.view((k, k), (n - k, 1)).clone_owned();
            let alpha = -x[0].signum() * best_norm;
            let alpha = if alpha == 0.0 { best_norm } else { alpha };
            let mut v = DVector::zeros(n);
            v.rows_mut(k, n - k).copy_from(&x.column(0));
            v[k] -= alpha;
            let vnorm2 = v.norm_squared();
            let beta = if vnorm2 > 0.0 { 2.0 / vnorm2 } else { 0.0 };
            for j in k..p {
                let s = beta * v.rows(k, n - k).dot(&r.view((k, j), (n - k, 1)).column(0));
                let mut col = r.view_mut((k, j), (n - k, 1));
                let mut col = col.column_mut(0);
                col.axpy(-s, &v.rows(k, n - k), 1.0);
            }
            reflectors.push((v, beta));
            rank += 1;
        }
        Self {
            reflectors,
            pivots,
            rank,
            n,
        }
    }

    /// Applies `Q = H₁⋯H_r` to `x` in place.
    fn apply_q(&self, x: &mut DVector<f64>) {
        for (v, beta) in self.reflectors.iter().rev() {
            let s = beta * v.dot(x);
            x.axpy(-s, v, 1.0);
        }
    }

    /// Orthonormal basis of the orthogonal complement of the column span,
    /// as an n×(n − rank) matrix.
    pub fn complement(&self) -> DMatrix<f64> {
        let n = self.n;
        let cols: Vec<DVector<f64>> = (self.rank..n)
            .into_par_iter()
            .map(|j| {
                let mut e = DVector::zeros(n);
                e[j] = 1.0;
                self.apply_q(&mut e);
                e
            })
            .collect();
        let mut out = DMatrix::zeros(n, n - self.rank);
        for (c, col) in cols.iter().enumerate() {
            out.set_column(c, col);
        }
        out
    }

    /// Unit vector orthogonal to the column span, if the span is not the
    /// whole space.
    pub fn null_vector(&self) -> Option<DVector<f64>> {
        (self.rank < self.n).then(|| {
            let mut e = DVector::zeros(self.n);
            e[self.n - 1] = 1.0;
            self.apply_q(&mut e);
            e
        })
    }
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut css = 0.0;
    let mut theta = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        css += ui;
        let t = (css - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}
