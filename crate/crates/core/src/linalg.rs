//! Dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

/// Thin SVD with singular values in decreasing order.
///
/// Signs are fixed so that the largest-magnitude entry of every left
/// singular vector is positive.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: DMatrix<f64>,
    pub s: DVector<f64>,
    pub v_t: DMatrix<f64>,
}

pub fn svd(m: &DMatrix<f64>) -> Svd {
    let (rows, cols) = m.shape();
    let k = rows.min(cols);
    if k == 0 {
        return Svd {
            u: DMatrix::zeros(rows, 0),
            s: DVector::zeros(0),
            v_t: DMatrix::zeros(0, cols),
        };
    }
    let dec = to_faer(m).thin_svd().expect("SVD did not converge");
    let (u0, v0, s0) = (dec.U(), dec.V(), dec.S().column_vector());
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| s0[j].partial_cmp(&s0[i]).unwrap_or(std::cmp::Ordering::Equal));

    let mut u = DMatrix::zeros(rows, k);
    let mut v_t = DMatrix::zeros(k, cols);
    let mut s = DVector::zeros(k);
    for (dst, &src) in order.iter().enumerate() {
        let mut pivot = 0;
        for i in 1..rows {
            if u0[(i, src)].abs() > u0[(pivot, src)].abs() {
                pivot = i;
            }
        }
        let sign = if u0[(pivot, src)] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..rows {
            u[(i, dst)] = sign * u0[(i, src)];
        }
        for j in 0..cols {
            v_t[(dst, j)] = sign * v0[(j, src)];
        }
        s[dst] = s0[src];
    }
    Svd { u, s, v_t }
}

fn to_faer(m: &DMatrix<f64>) -> faer::Mat<f64> {
    faer::Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

pub fn singular_values(m: &DMatrix<f64>) -> DVector<f64> {
    if m.nrows().min(m.ncols()) == 0 {
        return DVector::zeros(0);
    }
    let mut s = to_faer(m).singular_values().expect("SVD did not converge");
    s.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    DVector::from_vec(s)
}

pub fn nuclear_norm(m: &DMatrix<f64>) -> f64 {
    singular_values(m).sum()
}

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    singular_values(m).iter().copied().fold(0.0, f64::max)
}

/// Number of singular values above `rel_tol * s_max`.
pub fn numerical_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    let s = singular_values(m);
    match s.iter().copied().fold(0.0, f64::max) {
        smax if smax > 0.0 => s.iter().filter(|&&x| x > rel_tol * smax).count(),
        _ => 0,
    }
}

/// Orthonormal basis for the column span, dropping directions below
/// `rel_tol * s_max`.
pub fn orth(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let d = svd(m);
    let smax = d.s.iter().copied().fold(0.0, f64::max);
    if smax == 0.0 {
        return DMatrix::zeros(m.nrows(), 0);
    }
    let k = d.s.iter().filter(|&&x| x > rel_tol * smax).count();
    d.u.columns(0, k).into_owned()
}

/// Singular value soft-thresholding: `U max(S - t, 0) Vᵀ`.
pub fn svt(m: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
    let d = svd(m);
    let k = d.s.iter().filter(|&&x| x > t).count();
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for l in 0..k {
        let w = d.s[l] - t;
        out += (d.u.column(l) * w) * d.v_t.row(l);
    }
    out
}

/// Pseudo-inverse of a symmetric positive semi-definite matrix.
pub struct SymPinv {
    q: DMatrix<f64>,
    inv: DVector<f64>,
}

impl SymPinv {
    pub fn new(g: &DMatrix<f64>, rel_tol: f64) -> Self {
        let n = g.nrows();
        let eig = to_faer(g).self_adjoint_eigen(faer::Side::Lower).expect("eigendecomposition did not converge");
        let (vecs, vals) = (eig.U(), eig.S().column_vector());
        let lmax = (0..n).map(|k| vals[k]).fold(0.0, f64::max);
        let inv = DVector::from_fn(n, |k, _| {
            let l = vals[k];
            if lmax > 0.0 && l > rel_tol * lmax {
                1.0 / l
            } else {
                0.0
            }
        });
        SymPinv { q: DMatrix::from_fn(n, n, |i, j| vecs[(i, j)]), inv }
    }

    pub fn rank(&self) -> usize {
        self.inv.iter().filter(|&&x| x != 0.0).count()
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let c = self.q.tr_mul(v).component_mul(&self.inv);
        &self.q * c
    }
}

/// Haar-distributed orthogonal matrix from a Gaussian draw.
pub fn haar_orthogonal(g: DMatrix<f64>) -> DMatrix<f64> {
    let n = g.nrows();
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

pub fn max_row_norm_sq(m: &DMatrix<f64>) -> f64 {
    (0..m.nrows())
        .map(|i| m.row(i).norm_squared())
        .fold(0.0, f64::max)
}

pub fn log_space(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.ln(), hi.ln());
            (0..n)
                .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
                .collect()
        }
    }
}
