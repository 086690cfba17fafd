//! Dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

/// Full SVD with singular values sorted in descending order.
///
/// Returns `(sigma, v)` where `v` is `cols x cols`; wide matrices are padded
/// with zero rows so that every right singular vector is available.
pub fn svd_full(m: &DMatrix<f64>) -> Option<(Vec<f64>, DMatrix<f64>)> {
    let (rows, cols) = m.shape();
    let a = if rows < cols {
        let mut p = DMatrix::zeros(cols, cols);
        p.view_mut((0, 0), (rows, cols)).copy_from(m);
        p
    } else {
        m.clone()
    };
    let svd = nalgebra::linalg::SVD::try_new(a, false, true, f64::EPSILON, 0)?;
    let v_t = svd.v_t?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let sigma = order.iter().map(|&i| svd.singular_values[i]).collect();
    let v = DMatrix::from_fn(cols, cols, |r, c| v_t[(order[c], r)]);
    Some((sigma, v))
}

pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// `(sigma_min, sigma_max)` of a matrix; `(0, 0)` for an empty one.
pub fn extreme_singular_values(m: &DMatrix<f64>) -> (f64, f64) {
    if m.is_empty() {
        return (0.0, 0.0);
    }
    let s = singular_values(m);
    let min = if m.nrows() < m.ncols() { 0.0 } else { *s.last().unwrap() };
    (min, s[0])
}

/// Number of singular values strictly above `rel_tol * sigma_1`.
pub fn numerical_rank(sigma: &[f64], rel_tol: f64) -> usize {
    match sigma.first() {
        Some(&s1) if s1 > 0.0 => sigma.iter().filter(|&&s| s > rel_tol * s1).count(),
        _ => 0,
    }
}

/// Error-free transformation `a + b = s + e`.
#[inline]
pub fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let z = s - a;
    (s, (a - (s - z)) + (b - z))
}

/// Error-free transformation `a * b = p + e`.
#[inline]
pub fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

/// Dot product evaluated as if in twice the working precision (Ogita,
/// Rump and Oishi's `Dot2`), returned as an unevaluated pair `hi + lo`.
pub fn dot2<I>(terms: I) -> (f64, f64)
where
    I: IntoIterator<Item = (f64, f64)>,
{
    let mut s = 0.0;
    let mut c = 0.0;
    for (a, b) in terms {
        let (p, ep) = two_prod(a, b);
        let (t, es) = two_sum(s, p);
        s = t;
        c += ep + es;
    }
    two_sum(s, c)
}

/// `M (w_hi + w_lo)` with compensated accumulation.
pub fn matvec_compensated(m: &DMatrix<f64>, w_hi: &DVector<f64>, w_lo: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(m.nrows(), |i, _| {
        let row = m.row(i);
        let (hi, lo) = dot2(
            row.iter()
                .zip(w_hi.iter())
                .map(|(a, b)| (*a, *b))
                .chain(row.iter().zip(w_lo.iter()).map(|(a, b)| (*a, *b))),
        );
        hi + lo
    })
}

/// 2-norm of `w_hi + w_lo`.
pub fn norm_dd(w_hi: &DVector<f64>, w_lo: &DVector<f64>) -> f64 {
    let (hi, lo) = dot2(
        w_hi.iter()
            .map(|a| (*a, *a))
            .chain(w_hi.iter().zip(w_lo.iter()).map(|(a, b)| (2.0 * a, *b))),
    );
    (hi + lo).sqrt()
}

/// Rank of the controllability matrix `[B, AB, ..., A^{n-1} B]`.
pub fn controllability_rank(a: &DMatrix<f64>, b: &DMatrix<f64>) -> usize {
    let n = a.nrows();
    let m = b.ncols();
    let mut ctrb = DMatrix::zeros(n, n * m);
    let mut blk = b.clone();
    for k in 0..n {
        ctrb.view_mut((0, k * m), (n, m)).copy_from(&blk);
        blk = a * blk;
    }
    numerical_rank(&singular_values(&ctrb), 1e-10)
}
