//! Nullspace extraction, nullity certification and solution unpacking.
//!
//! The unknown vector is `v = [vec T; vec N; vec M]` (column-major), with
//! `T` of size `n x s`, `N` of size `m x p` and `M` of size `m x r`. When the
//! stacked regressor has a one-dimensional kernel, any kernel vector
//! satisfies the linearization identity at every point of the domain, not
//! only at the samples.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dictionary::{Dictionary, DictionaryError, Dims};
use crate::linalg::{self, two_sum};
use crate::regressor::{
    self, build_f, data_sufficiency, BrunovskyStructure, RegressorError, StackedRegressor, SufficiencyReport,
};
use crate::simulator::{ControlAffineSystem, Dataset};

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("matrix is empty")]
    EmptyMatrix,
    #[error("matrix has non-finite entries; factorization failed")]
    Factorization,
    #[error("vector has length {actual}, expected mu = {expected}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("vector is numerically zero")]
    ZeroVector,
    #[error("sparsification removed every entry")]
    EmptySupport,
    #[error("sparse refit rejected: restricted residual {residual:.3e} exceeds {limit:.3e}")]
    SparsifyRejected { residual: f64, limit: f64 },
    #[error(transparent)]
    Regressor(#[from] RegressorError),
    #[error(transparent)]
    Dictionary(#[from] DictionaryError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NullspaceOptions {
    /// Relative rank threshold; `None` selects `max(rows, cols) * eps`.
    pub rank_tol: Option<f64>,
    /// Refine a one-dimensional kernel with compensated residuals.
    pub refine: bool,
}

impl Default for NullspaceOptions {
    fn default() -> Self {
        Self { rank_tol: None, refine: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullspaceResult {
    /// Singular values in descending order (`cols` of them).
    pub singular_values: Vec<f64>,
    pub rank: usize,
    pub nullity: usize,
    /// Orthonormal kernel basis, each of length `cols`.
    pub basis: Vec<Vec<f64>>,
    pub rank_tol: f64,
    /// `sigma_rank / sigma_{rank+1}`; `None` when the kernel is trivial or
    /// the matrix is zero.
    pub gap: Option<f64>,
    /// `||M w|| / ||w||` for the refined kernel vector, an upper bound on
    /// the smallest singular value.
    pub refined_min_singular_value: Option<f64>,
}

impl NullspaceResult {
    pub fn basis_vectors(&self) -> Vec<DVector<f64>> {
        self.basis.iter().map(|b| DVector::from_column_slice(b)).collect()
    }
}

/// Kernel of `m` from its singular value decomposition.
pub fn nullspace(m: &DMatrix<f64>, opts: NullspaceOptions) -> Result<NullspaceResult, SolverError> {
    if m.is_empty() {
        return Err(SolverError::EmptyMatrix);
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(SolverError::Factorization);
    }
    let (rows, cols) = m.shape();
    let rank_tol = opts.rank_tol.unwrap_or_else(|| regressor::default_rank_tol(rows, cols));
    let (sigma, v) = linalg::svd_full(m).ok_or(SolverError::Factorization)?;
    let rank = linalg::numerical_rank(&sigma, rank_tol);
    let nullity = cols - rank;
    let mut basis: Vec<Vec<f64>> = (rank..cols).map(|j| v.column(j).iter().copied().collect()).collect();

    let mut refined_min = None;
    let mut next_sigma = sigma.get(rank).copied();
    if nullity == 1 && opts.refine {
        if let Some((w, resid)) = refine_null_vector(m, &DVector::from_column_slice(&basis[0])) {
            basis[0] = w.iter().copied().collect();
            refined_min = Some(resid);
            next_sigma = Some(next_sigma.map_or(resid, |s| s.min(resid)));
        }
    }
    let gap = match (rank, next_sigma) {
        (0, _) | (_, None) => None,
        (r, Some(s)) if nullity > 0 => {
            let g = sigma[r - 1] / s;
            Some(if g.is_finite() { g } else { f64::MAX })
        }
        _ => None,
    };
    Ok(NullspaceResult {
        singular_values: sigma,
        rank,
        nullity,
        basis,
        rank_tol,
        gap,
        refined_min_singular_value: refined_min,
    })
}

/// Refines an approximate kernel vector of `m`.
///
/// Fixes the largest entry of `w0` to one and iteratively refines the
/// remaining least-squares problem, computing residuals with `Dot2` on a
/// double-double iterate. Returns the unit vector and `||M w|| / ||w||`.
pub fn refine_null_vector(m: &DMatrix<f64>, w0: &DVector<f64>) -> Option<(DVector<f64>, f64)> {
    let (rows, cols) = m.shape();
    if cols < 2 || rows < cols - 1 {
        return None;
    }
    let pivot = w0.iamax();
    if w0[pivot] == 0.0 {
        return None;
    }
    let others: Vec<usize> = (0..cols).filter(|&j| j != pivot).collect();
    let a = m.select_columns(&others);
    let qr = a.qr();
    let q = qr.q();
    let r = qr.r();
    if r.diagonal().iter().any(|d| *d == 0.0) {
        return None;
    }

    let mut hi = w0 / w0[pivot];
    hi[pivot] = 1.0;
    let mut lo = DVector::zeros(cols);
    let resid = |hi: &DVector<f64>, lo: &DVector<f64>| {
        linalg::matvec_compensated(m, hi, lo).norm() / linalg::norm_dd(hi, lo)
    };
    let start = resid(&hi, &lo);
    let mut best = (hi.clone(), lo.clone(), start);

    for _ in 0..8 {
        let res = linalg::matvec_compensated(m, &hi, &lo);
        let rhs = q.tr_mul(&res);
        let d = match r.solve_upper_triangular(&rhs) {
            Some(d) => -d,
            None => break,
        };
        for (k, &j) in others.iter().enumerate() {
            let (s, e) = two_sum(hi[j], d[k]);
            let (s2, e2) = two_sum(s, lo[j] + e);
            hi[j] = s2;
            lo[j] = e2;
        }
        let now = resid(&hi, &lo);
        if now < best.2 {
            best = (hi.clone(), lo.clone(), now);
        }
        if d.amax() <= 1e-18 * hi.amax() {
            break;
        }
    }
    let (hi, lo, res) = best;
    let norm = linalg::norm_dd(&hi, &lo);
    let w = DVector::from_fn(cols, |i, _| (hi[i] + lo[i]) / norm);
    Some((w, res))
}

/// `[vec T; vec N; vec M]`.
pub fn pack(t: &DMatrix<f64>, n_bar: &DMatrix<f64>, m_bar: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(
        t.len() + n_bar.len() + m_bar.len(),
        t.iter().chain(n_bar.iter()).chain(m_bar.iter()).copied(),
    )
}

/// Inverse of [`pack`] for the given dimensions.
pub fn unpack(v: &DVector<f64>, dims: Dims) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>), SolverError> {
    let mu = dims.mu();
    if v.len() != mu {
        return Err(SolverError::LengthMismatch { expected: mu, actual: v.len() });
    }
    let Dims { n, m, s, p, r } = dims;
    let sl = v.as_slice();
    let t = DMatrix::from_column_slice(n, s, &sl[..n * s]);
    let nb = DMatrix::from_column_slice(m, p, &sl[n * s..n * s + m * p]);
    let mb = DMatrix::from_column_slice(m, r, &sl[n * s + m * p..]);
    Ok((t, nb, mb))
}

/// Scale fixed by dividing through the first significant entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub index: usize,
    pub divisor: f64,
}

/// Divides `v` by its first entry exceeding `1e-9 * ||v||_inf`.
pub fn normalize(v: &DVector<f64>) -> Result<(DVector<f64>, Normalization), SolverError> {
    let vmax = v.amax();
    if !(vmax > 0.0) || !vmax.is_finite() {
        return Err(SolverError::ZeroVector);
    }
    let index = v.iter().position(|x| x.abs() > 1e-9 * vmax).ok_or(SolverError::ZeroVector)?;
    let divisor = v[index];
    let mut out = v / divisor;
    out[index] = 1.0;
    Ok((out, Normalization { index, divisor }))
}

/// Nonsingularity certificates at the operating point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Regularity {
    pub transform_nonsingular: bool,
    pub gain_nonsingular: bool,
    pub transform_singular_values: (f64, f64),
    pub gain_singular_values: (f64, f64),
    pub tau_x0: Vec<f64>,
}

impl Regularity {
    pub fn transform_condition(&self) -> f64 {
        self.transform_singular_values.1 / self.transform_singular_values.0
    }
    pub fn gain_condition(&self) -> f64 {
        self.gain_singular_values.1 / self.gain_singular_values.0
    }
    pub fn is_regular(&self) -> bool {
        self.transform_nonsingular && self.gain_nonsingular
    }
}

/// True when `sigma_min(a) > tol * max(sigma_max(a), scale)`.
///
/// `scale` bounds the magnitude of the terms forming `a`; it keeps the
/// test meaningful for `1 x 1` matrices.
pub fn nonsingular(a: &DMatrix<f64>, scale: f64, tol: f64) -> (bool, f64, f64) {
    let (min, max) = linalg::extreme_singular_values(a);
    (min > tol * max.max(scale), min, max)
}

/// Tests `T J_Z(x0)` and `M W(x0)` against `1e-8` relative thresholds and
/// reports `tau(x0) = T Z(x0)`.
pub fn check_regularity(
    t: &DMatrix<f64>,
    m_bar: &DMatrix<f64>,
    dict: &Dictionary,
    x0: &[f64],
) -> Result<Regularity, SolverError> {
    let jz = dict.eval_jacobian_z(x0)?;
    let w = dict.eval_w(x0)?;
    let tj = t * &jz;
    let g = m_bar * &w;
    let (tn, tmin, tmax) = nonsingular(&tj, t.norm() * jz.norm(), 1e-8);
    let (gn, gmin, gmax) = nonsingular(&g, m_bar.norm() * w.norm(), 1e-8);
    let tau = t * dict.eval_z(x0)?;
    Ok(Regularity {
        transform_nonsingular: tn,
        gain_nonsingular: gn,
        transform_singular_values: (tmin, tmax),
        gain_singular_values: (gmin, gmax),
        tau_x0: tau.iter().copied().collect(),
    })
}

/// A normalized kernel vector with its unpacked matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizingSolution {
    pub dims: Dims,
    pub v: DVector<f64>,
    pub t: DMatrix<f64>,
    pub n_bar: DMatrix<f64>,
    pub m_bar: DMatrix<f64>,
    pub normalization: Normalization,
    pub x0: Vec<f64>,
    pub regularity: Regularity,
}

impl LinearizingSolution {
    /// Normalizes, unpacks and checks regularity of a raw kernel vector.
    pub fn from_vector(raw: &DVector<f64>, dict: &Dictionary, x0: &[f64]) -> Result<Self, SolverError> {
        let dims = dict.dims();
        if raw.len() != dims.mu() {
            return Err(SolverError::LengthMismatch { expected: dims.mu(), actual: raw.len() });
        }
        let (v, normalization) = normalize(raw)?;
        let (t, n_bar, m_bar) = unpack(&v, dims)?;
        let regularity = check_regularity(&t, &m_bar, dict, x0)?;
        Ok(Self { dims, v, t, n_bar, m_bar, normalization, x0: x0.to_vec(), regularity })
    }

    /// `tau(x) = T Z(x)`
    pub fn tau(&self, dict: &Dictionary, x: &[f64]) -> Result<DVector<f64>, SolverError> {
        Ok(&self.t * dict.eval_z(x)?)
    }

    /// `delta(x) = N Y(x)`
    pub fn delta(&self, dict: &Dictionary, x: &[f64]) -> Result<DVector<f64>, SolverError> {
        Ok(&self.n_bar * dict.eval_y(x)?)
    }

    /// `gamma(x) = M W(x)`
    pub fn gamma(&self, dict: &Dictionary, x: &[f64]) -> Result<DMatrix<f64>, SolverError> {
        Ok(&self.m_bar * dict.eval_w(x)?)
    }

    /// `T J_Z(x)`, the Jacobian of `tau`.
    pub fn transform_jacobian(&self, dict: &Dictionary, x: &[f64]) -> Result<DMatrix<f64>, SolverError> {
        Ok(&self.t * dict.eval_jacobian_z(x)?)
    }

    /// `F(x, u, x') v`.
    pub fn residual(
        &self,
        dict: &Dictionary,
        bs: &BrunovskyStructure,
        x: &[f64],
        u: &[f64],
        dx: &[f64],
    ) -> Result<DVector<f64>, SolverError> {
        Ok(build_f(dict, bs, x, u, dx)?.assembled() * &self.v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub rank_tol: Option<f64>,
    /// Minimum `sigma_{mu-1} / sigma_mu` to certify a one-dimensional kernel.
    pub gap_threshold: f64,
    pub refine: bool,
    /// Random kernel combinations tried when the nullity exceeds one.
    pub candidate_draws: usize,
    pub max_candidates: usize,
    pub seed: u64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            rank_tol: None,
            gap_threshold: 1e6,
            refine: true,
            candidate_draws: 64,
            max_candidates: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    /// Nullity one, gap above threshold and regular at `x0`.
    Certified,
    /// A solution exists but at least one certificate is missing.
    Uncertified,
    /// Trivial kernel: the dictionary is incomplete or the data inconsistent.
    NoSolution,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub status: SolveStatus,
    pub sufficiency: SufficiencyReport,
    /// Kernel of the working (possibly equilibrated) matrix.
    pub nullspace: NullspaceResult,
    /// Kernel basis mapped back to the original columns.
    pub basis: Vec<DVector<f64>>,
    pub solution: Option<LinearizingSolution>,
    pub candidates: Vec<LinearizingSolution>,
    pub warnings: Vec<String>,
}

/// Shared back half of the data-driven and model-based paths.
pub fn solve_homogeneous<U>(
    working: &DMatrix<f64>,
    unscale: U,
    dict: &Dictionary,
    x0: &[f64],
    opts: &SolverOptions,
    sufficiency: SufficiencyReport,
    mut warnings: Vec<String>,
) -> Result<SolveReport, SolverError>
where
    U: Fn(&DVector<f64>) -> DVector<f64>,
{
    let ns = nullspace(working, NullspaceOptions { rank_tol: opts.rank_tol, refine: opts.refine })?;
    let basis: Vec<DVector<f64>> = ns.basis_vectors().iter().map(&unscale).collect();
    if dict.is_outside_domain(x0) {
        warnings.push(format!("operating point {x0:?} lies outside the dictionary domain"));
    }
    let mut report = SolveReport {
        status: SolveStatus::NoSolution,
        sufficiency,
        nullspace: ns.clone(),
        basis: basis.clone(),
        solution: None,
        candidates: Vec::new(),
        warnings,
    };
    match ns.nullity {
        0 => {
            report
                .warnings
                .push("trivial kernel: dictionary incomplete or data inconsistent".into());
        }
        1 => {
            let sol = LinearizingSolution::from_vector(&basis[0], dict, x0)?;
            let gap_ok = ns.gap.is_some_and(|g| g >= opts.gap_threshold);
            if !gap_ok {
                report.warnings.push(format!(
                    "spectral gap {:.3e} below threshold {:.1e}",
                    ns.gap.unwrap_or(0.0),
                    opts.gap_threshold
                ));
            }
            if !sol.regularity.transform_nonsingular {
                report.warnings.push("T J_Z(x0) is singular".into());
            }
            if !sol.regularity.gain_nonsingular {
                report.warnings.push("M W(x0) is singular".into());
            }
            let tau_norm = sol.regularity.tau_x0.iter().fold(0.0f64, |a, b| a.max(b.abs()));
            if tau_norm > 1e-8 * sol.t.amax().max(1.0) {
                report.warnings.push(format!("tau(x0) = {:?} is not zero", sol.regularity.tau_x0));
            }
            report.status = if gap_ok && sol.regularity.is_regular() {
                SolveStatus::Certified
            } else {
                SolveStatus::Uncertified
            };
            report.solution = Some(sol);
        }
        k => {
            report.status = SolveStatus::Uncertified;
            report.warnings.push(format!(
                "kernel has dimension {k}; candidates below are not certified to generalize"
            ));
            report.candidates = candidate_search(&basis, dict, x0, opts);
        }
    }
    Ok(report)
}

/// Random combinations of a multi-dimensional kernel that are regular at `x0`.
fn candidate_search(
    basis: &[DVector<f64>],
    dict: &Dictionary,
    x0: &[f64],
    opts: &SolverOptions,
) -> Vec<LinearizingSolution> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut out = Vec::new();
    for _ in 0..opts.candidate_draws {
        if out.len() >= opts.max_candidates {
            break;
        }
        let mut v = DVector::zeros(basis[0].len());
        for b in basis {
            v.axpy(rng.random_range(-1.0..=1.0), b, 1.0);
        }
        if let Ok(sol) = LinearizingSolution::from_vector(&v, dict, x0) {
            if sol.regularity.is_regular() {
                out.push(sol);
            }
        }
    }
    out
}

/// Data-driven solution from a stacked regressor.
pub fn solve_linearization(
    sr: &StackedRegressor,
    dict: &Dictionary,
    bs: &BrunovskyStructure,
    x0: &[f64],
    opts: &SolverOptions,
) -> Result<SolveReport, SolverError> {
    if sr.cols() != dict.mu() || bs.n() != dict.n() || bs.m() != dict.m() {
        return Err(SolverError::LengthMismatch { expected: dict.mu(), actual: sr.cols() });
    }
    let sufficiency = data_sufficiency(sr, opts.rank_tol)?;
    let mut warnings = Vec::new();
    if !sufficiency.sufficient_rows {
        warnings.push(format!(
            "insufficient data: {} rows available, at least {} required",
            sufficiency.rows, sufficiency.required_rows
        ));
    }
    if sr.approximate_derivatives {
        warnings.push("derivatives were estimated by finite differences; the certificate is approximate".into());
    }
    solve_homogeneous(&sr.working_matrix(), |w| sr.unscale(w), dict, x0, opts, sufficiency, warnings)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparsifyOptions {
    /// Entries with `|v_i| <= threshold * ||v||_inf` are removed.
    pub threshold: f64,
    pub max_iters: usize,
    pub rank_tol: Option<f64>,
}

/// Sequential thresholding of a kernel vector.
///
/// Removes small entries, refits the smallest right singular vector on the
/// remaining columns and repeats until the support is stable. The result is
/// accepted only if the restricted residual stays within `rank_tol * sigma_1`.
pub fn sparsify(
    sr: &StackedRegressor,
    dict: &Dictionary,
    x0: &[f64],
    v: &DVector<f64>,
    opts: &SparsifyOptions,
) -> Result<LinearizingSolution, SolverError> {
    let mu = sr.cols();
    if v.len() != mu {
        return Err(SolverError::LengthMismatch { expected: mu, actual: v.len() });
    }
    let working = sr.working_matrix();
    let (rows, cols) = working.shape();
    let sigma1 = linalg::singular_values(&working).first().copied().unwrap_or(0.0);
    let limit = opts.rank_tol.unwrap_or_else(|| regressor::default_rank_tol(rows, cols)) * sigma1;
    let scale = sr.column_scale.clone().unwrap_or_else(|| DVector::from_element(mu, 1.0));

    let mut current = v.clone();
    let mut support: Vec<usize> = Vec::new();
    let mut residual = f64::INFINITY;
    for _ in 0..opts.max_iters.max(1) {
        let vmax = current.amax();
        let next: Vec<usize> = (0..mu).filter(|&i| current[i].abs() > opts.threshold * vmax).collect();
        if next.is_empty() {
            return Err(SolverError::EmptySupport);
        }
        if next == support {
            break;
        }
        support = next;
        let restricted = working.select_columns(&support);
        let (_, vr) = linalg::svd_full(&restricted).ok_or(SolverError::Factorization)?;
        let w0 = DVector::from_iterator(support.len(), vr.column(support.len() - 1).iter().copied());
        let (w, res) = refine_null_vector(&restricted, &w0).unwrap_or_else(|| {
            let res = (&restricted * &w0).norm();
            (w0.clone(), res)
        });
        residual = res;
        current = DVector::zeros(mu);
        for (k, &j) in support.iter().enumerate() {
            current[j] = w[k] / scale[j];
        }
    }
    if residual > limit {
        return Err(SolverError::SparsifyRejected { residual, limit });
    }
    LinearizingSolution::from_vector(&current, dict, x0)
}

/// Block structures `(r_1..r_m)` whose stacked regressor has nullity one.
pub fn search_block_structures(
    dict: &Dictionary,
    data: &Dataset,
    opts: &SolverOptions,
) -> Result<Vec<(Vec<usize>, NullspaceResult)>, SolverError> {
    let mut out = Vec::new();
    for blocks in regressor::compositions(dict.n(), dict.m()) {
        let bs = BrunovskyStructure::new(&blocks, dict.n())?;
        let sr = regressor::stack(dict, &bs, data, true)?;
        let ns = nullspace(&sr.working_matrix(), NullspaceOptions { rank_tol: opts.rank_tol, refine: opts.refine })?;
        if ns.nullity == 1 {
            out.push((blocks, ns));
        }
    }
    Ok(out)
}

/// Residual statistics of `F(x, u, f(x) + g(x) u) v` on fresh points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualStats {
    pub points: usize,
    pub max: f64,
    pub mean: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Where fresh validation points are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreshPointOptions {
    pub state_lower: Vec<f64>,
    pub state_upper: Vec<f64>,
    pub input_lower: Vec<f64>,
    pub input_upper: Vec<f64>,
    pub count: usize,
    pub seed: u64,
    pub tolerance: f64,
}

/// Replays the linearization identity at uniformly drawn `(x, u)` pairs
/// that do not coincide with any sample in `exclude`.
pub fn fresh_point_residuals(
    sol: &LinearizingSolution,
    dict: &Dictionary,
    bs: &BrunovskyStructure,
    sys: &ControlAffineSystem,
    opts: &FreshPointOptions,
    exclude: Option<&Dataset>,
) -> Result<ResidualStats, SolverError> {
    let (n, m) = (dict.n(), dict.m());
    if sys.n() != n || sys.m() != m || opts.state_lower.len() != n || opts.state_upper.len() != n
        || opts.input_lower.len() != m || opts.input_upper.len() != m
    {
        return Err(SolverError::LengthMismatch { expected: n, actual: opts.state_lower.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(2);
    let draw = |rng: &mut ChaCha8Rng, lo: &[f64], hi: &[f64]| -> Vec<f64> {
        lo.iter().zip(hi).map(|(a, b)| if a == b { *a } else { rng.random_range(*a..=*b) }).collect()
    };
    let mut max = 0.0f64;
    let mut sum = 0.0;
    let mut taken = 0;
    while taken < opts.count {
        let x = draw(&mut rng, &opts.state_lower, &opts.state_upper);
        let u = draw(&mut rng, &opts.input_lower, &opts.input_upper);
        if exclude.is_some_and(|d| d.samples.iter().any(|s| s.x == x && s.u == u)) {
            continue;
        }
        let dx = sys.vector_field(&x, &u);
        let r = sol.residual(dict, bs, &x, &u, dx.as_slice())?.amax();
        max = max.max(r);
        sum += r;
        taken += 1;
    }
    Ok(ResidualStats {
        points: taken,
        max,
        mean: if taken > 0 { sum / taken as f64 } else { 0.0 },
        tolerance: opts.tolerance,
        passed: max <= opts.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dictionary::{build_standard_library, DomainBox, Family, LibrarySpec};

    #[test]
    fn identity_has_trivial_kernel() {
        let ns = nullspace(&DMatrix::identity(3, 3), NullspaceOptions::default()).unwrap();
        assert_eq!(ns.nullity, 0);
        assert_eq!(ns.rank, 3);
        assert!(ns.gap.is_none());
    }

    #[test]
    fn one_row_kernel() {
        let m = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let ns = nullspace(&m, NullspaceOptions::default()).unwrap();
        assert_eq!(ns.nullity, 1);
        let b = &ns.basis[0];
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((b[0].abs() - h).abs() < 1e-15 && (b[0] + b[1]).abs() < 1e-15);
    }

    #[test]
    fn non_finite_and_empty_rejected() {
        let m = DMatrix::from_row_slice(1, 2, &[1.0, f64::NAN]);
        assert!(matches!(nullspace(&m, NullspaceOptions::default()), Err(SolverError::Factorization)));
        assert!(matches!(
            nullspace(&DMatrix::zeros(0, 0), NullspaceOptions::default()),
            Err(SolverError::EmptyMatrix)
        ));
    }

    #[test]
    fn zero_matrix_full_kernel() {
        let ns = nullspace(&DMatrix::zeros(4, 3), NullspaceOptions::default()).unwrap();
        assert_eq!(ns.nullity, 3);
        assert!(ns.gap.is_none());
    }

    #[test]
    fn refinement_reduces_residual() {
        // Ill-conditioned matrix with an exact kernel vector (1, -1, 2).
        let mut m = DMatrix::zeros(6, 3);
        for i in 0..6 {
            let a = 1.0 + i as f64;
            let b = 1e-7 * (i as f64).powi(2);
            m[(i, 0)] = a + 2.0 * b;
            m[(i, 1)] = a + 4.0 * b;
            m[(i, 2)] = b;
        }
        let ns = nullspace(&m, NullspaceOptions::default()).unwrap();
        assert_eq!(ns.nullity, 1);
        let w = DVector::from_column_slice(&ns.basis[0]);
        let (v, _) = normalize(&w).unwrap();
        assert!((v[1] + 1.0).abs() < 1e-12 && (v[2] - 2.0).abs() < 1e-9, "{v}");
        let refined = ns.refined_min_singular_value.unwrap();
        let plain = nullspace(&m, NullspaceOptions { rank_tol: None, refine: false }).unwrap();
        let w_plain = DVector::from_column_slice(&plain.basis[0]);
        let plain_res = linalg::matvec_compensated(&m, &w_plain, &DVector::zeros(3)).norm();
        assert!(refined <= plain_res, "{refined} > {plain_res}");
        assert!(ns.gap.unwrap() > 1e6);
    }

    #[test]
    fn unpack_example1_transform() {
        let dims = Dims { n: 2, m: 1, s: 4, p: 4, r: 5 };
        let (mu, lam) = (-0.5, 0.2);
        let mut v = DVector::zeros(17);
        v.as_mut_slice()[..8].copy_from_slice(&[1.0, mu, -1.0, -lam, 0.0, lam, 0.0, 0.0]);
        let (t, nb, mb) = unpack(&v, dims).unwrap();
        assert_eq!(t, DMatrix::from_row_slice(2, 4, &[1.0, -1.0, 0.0, 0.0, mu, -lam, lam, 0.0]));
        assert_eq!(nb.shape(), (1, 4));
        assert_eq!(mb.shape(), (1, 5));
    }

    #[test]
    fn unpack_zero_and_mismatch() {
        let dims = Dims { n: 2, m: 1, s: 2, p: 2, r: 1 };
        let (t, nb, mb) = unpack(&DVector::zeros(7), dims).unwrap();
        assert!(t.iter().chain(nb.iter()).chain(mb.iter()).all(|x| *x == 0.0));
        assert!(matches!(
            unpack(&DVector::zeros(6), dims),
            Err(SolverError::LengthMismatch { expected: 7, actual: 6 })
        ));
    }

    #[test]
    fn normalize_rules() {
        let v = DVector::from_vec(vec![1e-12, -2.0, 4.0]);
        let (n, rec) = normalize(&v).unwrap();
        assert_eq!(rec.index, 1);
        assert_eq!(n.as_slice(), &[-5e-13, 1.0, -2.0]);
        let (again, _) = normalize(&n).unwrap();
        assert_eq!(again, n);
        let (scaled, _) = normalize(&(&v * -2.0)).unwrap();
        assert_eq!(scaled, n);
        assert!(matches!(normalize(&DVector::zeros(3)), Err(SolverError::ZeroVector)));
    }

    fn ex2_dict() -> Dictionary {
        let spec = LibrarySpec::new(
            vec![Family::Coordinates, Family::Powers(2), Family::Powers(3), Family::Sin, Family::Cos],
            DomainBox::symmetric(2, 1.0),
        );
        build_standard_library(&spec, 1).unwrap()
    }

    pub(crate) fn eq25_vector() -> DVector<f64> {
        let mut v = DVector::zeros(41);
        for (i, x) in [(0, 1.0), (1, -0.5), (2, -1.0), (3, -0.2), (5, 0.2), (20, 0.25), (21, -0.04), (22, -0.16), (30, -0.7), (31, 0.4)] {
            v[i] = x;
        }
        v
    }

    #[test]
    fn regularity_of_known_solution() {
        let d = ex2_dict();
        let sol = LinearizingSolution::from_vector(&eq25_vector(), &d, &[0.0, 0.0]).unwrap();
        let tj = sol.transform_jacobian(&d, &[0.0, 0.0]).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -0.5, -0.2]);
        assert!((tj - expected).amax() < 1e-15);
        assert!((sol.gamma(&d, &[0.0, 0.0]).unwrap()[(0, 0)] + 0.7).abs() < 1e-15);
        assert!(sol.regularity.is_regular());
        assert_eq!(sol.regularity.tau_x0, vec![0.0, 0.0]);
    }

    #[test]
    fn repeated_transform_rows_are_singular() {
        let d = ex2_dict();
        let t = DMatrix::from_fn(2, 10, |_, j| if j == 0 { 1.0 } else if j == 1 { -1.0 } else { 0.0 });
        let m = DMatrix::from_row_slice(1, 11, &[-0.7, 0.4, 0., 0., 0., 0., 0., 0., 0., 0., 0.]);
        let reg = check_regularity(&t, &m, &d, &[0.0, 0.0]).unwrap();
        assert!(!reg.transform_nonsingular);
        assert!(reg.gain_nonsingular);
    }

    #[test]
    fn sparsify_threshold_one_is_empty() {
        let d = ex2_dict();
        let sr = StackedRegressor {
            matrix: DMatrix::identity(41, 41),
            samples: 1,
            n: 2,
            column_scale: None,
            source: String::new(),
            approximate_derivatives: false,
        };
        let opts = SparsifyOptions { threshold: 1.0, max_iters: 5, rank_tol: None };
        assert!(matches!(
            sparsify(&sr, &d, &[0.0, 0.0], &eq25_vector(), &opts),
            Err(SolverError::EmptySupport)
        ));
    }
}
