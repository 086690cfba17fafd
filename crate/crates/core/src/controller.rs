//! Stabilizing feedback `u = gamma(x)^{-1} (K tau(x) - delta(x))`, sampled
//! domain and region-of-attraction estimates, and closed-loop simulation.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dictionary::{Dictionary, DictionaryError, DomainBox};
use crate::linalg;
use crate::regressor::BrunovskyStructure;
use crate::simulator::{fmt17, ControlAffineSystem};
use crate::solver::LinearizingSolution;

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("expected {expected} polynomials (one per block), got {actual}")]
    PolynomialCount { expected: usize, actual: usize },
    #[error("block {block} has size {size} but the polynomial has degree {degree}")]
    PolynomialDegree { block: usize, size: usize, degree: usize },
    #[error("requested polynomial for block {block} is not Hurwitz")]
    UnstablePolynomial { block: usize },
    #[error("gamma(x) is singular at x = {x:?} (sigma_min = {sigma_min:.3e})")]
    GammaSingular { x: Vec<f64>, sigma_min: f64 },
    #[error("gamma became singular at t = {t:.4} (x = {x:?})")]
    GammaCrossing { t: f64, x: Vec<f64> },
    #[error("closed loop diverged at t = {t:.4} (x = {x:?})")]
    Diverged { t: f64, x: Vec<f64> },
    #[error("matrix is not Hurwitz")]
    NotHurwitz,
    #[error("Q must be symmetric positive definite")]
    InvalidQ,
    #[error("Lyapunov solution is not positive definite")]
    IndefiniteP,
    #[error("T J_Z(x0) fails the nonsingularity check at x0 = {x0:?}")]
    SingularAtOperatingPoint { x0: Vec<f64> },
    #[error("no positive Lyapunov level fits inside the verified region")]
    NoLevel,
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Dictionary(#[from] DictionaryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Ascending coefficients `[a_0, ..., a_{r-1}]` of the monic polynomial with
/// the given real roots.
pub fn poly_from_real_roots(roots: &[f64]) -> Vec<f64> {
    let mut c = vec![1.0];
    for &r in roots {
        let mut next = vec![0.0; c.len() + 1];
        for (k, &ck) in c.iter().enumerate() {
            next[k + 1] += ck;
            next[k] -= r * ck;
        }
        c = next;
    }
    c.pop();
    c
}

/// Companion matrix whose last row is `-[a_0, ..., a_{r-1}]`.
fn companion(coeffs: &[f64]) -> DMatrix<f64> {
    let r = coeffs.len();
    let mut c = DMatrix::zeros(r, r);
    for i in 0..r.saturating_sub(1) {
        c[(i, i + 1)] = 1.0;
    }
    for (j, a) in coeffs.iter().enumerate() {
        c[(r - 1, j)] = -a;
    }
    c
}

fn eigenvalues(a: &DMatrix<f64>) -> Vec<(f64, f64)> {
    a.complex_eigenvalues().iter().map(|z| (z.re, z.im)).collect()
}

pub fn is_hurwitz(a: &DMatrix<f64>) -> bool {
    eigenvalues(a).iter().all(|(re, _)| *re < 0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateFeedback {
    /// `m x n` gain, row-major when serialized.
    pub k: Vec<Vec<f64>>,
    /// Ascending monic coefficients per block.
    pub coefficients: Vec<Vec<f64>>,
    /// Closed-loop eigenvalues as `(re, im)`.
    pub eigenvalues: Vec<(f64, f64)>,
}

impl StateFeedback {
    pub fn gain(&self) -> DMatrix<f64> {
        let m = self.k.len();
        let n = self.k.first().map_or(0, Vec::len);
        DMatrix::from_fn(m, n, |i, j| self.k[i][j])
    }

    pub fn closed_loop(&self, bs: &BrunovskyStructure) -> DMatrix<f64> {
        bs.a() + bs.b() * self.gain()
    }
}

/// Per-block companion matching: the last row of closed-loop block `i`
/// becomes the negated coefficients of its requested polynomial.
pub fn place_poles_brunovsky(bs: &BrunovskyStructure, polys: &[Vec<f64>]) -> Result<StateFeedback, ControllerError> {
    let blocks = bs.blocks();
    if polys.len() != blocks.len() {
        return Err(ControllerError::PolynomialCount { expected: blocks.len(), actual: polys.len() });
    }
    let mut k = DMatrix::zeros(bs.m(), bs.n());
    for (i, ((&size, coeffs), off)) in blocks.iter().zip(polys).zip(bs.offsets()).enumerate() {
        if coeffs.len() != size {
            return Err(ControllerError::PolynomialDegree { block: i, size, degree: coeffs.len() });
        }
        if !is_hurwitz(&companion(coeffs)) {
            return Err(ControllerError::UnstablePolynomial { block: i });
        }
        for (j, a) in coeffs.iter().enumerate() {
            k[(i, off + j)] = -a;
        }
    }
    let cl = bs.a() + bs.b() * &k;
    Ok(StateFeedback {
        k: k.row_iter().map(|r| r.iter().copied().collect()).collect(),
        coefficients: polys.to_vec(),
        eigenvalues: eigenvalues(&cl),
    })
}

/// Default poles `-1, ..., -r_i` per block.
pub fn default_polynomials(bs: &BrunovskyStructure) -> Vec<Vec<f64>> {
    bs.blocks()
        .iter()
        .map(|&r| poly_from_real_roots(&(1..=r).map(|k| -(k as f64)).collect::<Vec<_>>()))
        .collect()
}

fn gamma_checked(sol: &LinearizingSolution, dict: &Dictionary, x: &[f64]) -> Result<DMatrix<f64>, ControllerError> {
    let w = dict.eval_w(x)?;
    let gamma = &sol.m_bar * &w;
    let (min, max) = linalg::extreme_singular_values(&gamma);
    if !(min > 1e-10 * max.max(sol.m_bar.norm() * w.norm())) {
        return Err(ControllerError::GammaSingular { x: x.to_vec(), sigma_min: min });
    }
    Ok(gamma)
}

/// `gamma(x)^{-1} (K T Z(x) - N Y(x))`.
pub fn control_law(
    sol: &LinearizingSolution,
    k: &DMatrix<f64>,
    dict: &Dictionary,
    x: &[f64],
) -> Result<DVector<f64>, ControllerError> {
    let gamma = gamma_checked(sol, dict, x)?;
    let tau = &sol.t * dict.eval_z(x)?;
    let delta = &sol.n_bar * dict.eval_y(x)?;
    let rhs = k * tau - delta;
    gamma
        .lu()
        .solve(&rhs)
        .ok_or_else(|| ControllerError::GammaSingular { x: x.to_vec(), sigma_min: 0.0 })
}

/// Solves `A^T P + P A = -Q` through `(I kron A^T + A^T kron I) vec P = -vec Q`.
pub fn lyapunov_solve(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>, ControllerError> {
    let n = a.nrows();
    if a.ncols() != n || q.shape() != (n, n) {
        return Err(ControllerError::Dimension("A and Q must be square of equal size".into()));
    }
    if (q - q.transpose()).amax() > 1e-12 * q.amax().max(1.0) || q.clone().cholesky().is_none() {
        return Err(ControllerError::InvalidQ);
    }
    if !is_hurwitz(a) {
        return Err(ControllerError::NotHurwitz);
    }
    let id = DMatrix::<f64>::identity(n, n);
    let at = a.transpose();
    let big = id.kronecker(&at) + at.kronecker(&id);
    let rhs = -DVector::from_column_slice(q.as_slice());
    let vec_p = big.lu().solve(&rhs).ok_or(ControllerError::NotHurwitz)?;
    let p = DMatrix::from_column_slice(n, n, vec_p.as_slice());
    let p = (&p + p.transpose()) * 0.5;
    if p.clone().cholesky().is_none() {
        return Err(ControllerError::IndefiniteP);
    }
    Ok(p)
}

/// Uniform tensor grid over a box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Grid {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, counts: Vec<usize>) -> Result<Self, ControllerError> {
        if lower.len() != upper.len() || lower.len() != counts.len() || lower.is_empty() {
            return Err(ControllerError::Grid("lower, upper and counts must have equal, non-zero length".into()));
        }
        if lower.iter().zip(&upper).any(|(a, b)| !(a < b)) || counts.iter().any(|&c| c < 2) {
            return Err(ControllerError::Grid("need lower < upper and at least 2 points per axis".into()));
        }
        Ok(Self { lower, upper, counts })
    }

    pub fn over(domain: &DomainBox, per_axis: usize) -> Result<Self, ControllerError> {
        Self::new(domain.lower.clone(), domain.upper.clone(), vec![per_axis; domain.dim()])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn coordinate(&self, axis: usize, i: usize) -> f64 {
        let span = self.upper[axis] - self.lower[axis];
        self.lower[axis] + span * i as f64 / (self.counts[axis] - 1) as f64
    }

    /// Multi-index of flat index `flat` (first axis fastest).
    pub fn index(&self, mut flat: usize) -> Vec<usize> {
        self.counts
            .iter()
            .map(|&c| {
                let i = flat % c;
                flat /= c;
                i
            })
            .collect()
    }

    pub fn point(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter().enumerate().map(|(k, &i)| self.coordinate(k, i)).collect()
    }

    pub fn on_boundary(&self, idx: &[usize]) -> bool {
        idx.iter().zip(&self.counts).any(|(&i, &c)| i == 0 || i + 1 == c)
    }

    fn nearest(&self, x: &[f64]) -> Vec<usize> {
        (0..self.dim())
            .map(|k| {
                let h = (self.upper[k] - self.lower[k]) / (self.counts[k] - 1) as f64;
                (((x[k] - self.lower[k]) / h).round().max(0.0) as usize).min(self.counts[k] - 1)
            })
            .collect()
    }
}

/// Sampled check of the coordinate change. Not a certificate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffeoRegion {
    pub certified: bool,
    pub grid: Grid,
    /// Largest verified axis-aligned box around `x0`.
    pub verified: DomainBox,
    pub threshold: f64,
    pub max_min_singular_value: f64,
    pub min_singular_value_at_x0: f64,
    pub failing_points: usize,
}

impl DiffeoRegion {
    pub fn contains(&self, x: &[f64]) -> bool {
        self.verified.contains(x)
    }
}

fn min_sv_and_sign(sol: &LinearizingSolution, dict: &Dictionary, x: &[f64]) -> Result<(f64, f64), ControllerError> {
    let tj = &sol.t * dict.eval_jacobian_z(x)?;
    let (min, _) = linalg::extreme_singular_values(&tj);
    Ok((min, tj.determinant().signum()))
}

/// Minimum singular value of `T J_Z` on the grid, and the largest box around
/// `x0` on which it stays above `1e-6` times its grid maximum without the
/// Jacobian determinant changing sign.
pub fn diffeo_domain_check(
    sol: &LinearizingSolution,
    dict: &Dictionary,
    grid: &Grid,
) -> Result<DiffeoRegion, ControllerError> {
    let n = dict.n();
    if grid.dim() != n || sol.x0.len() != n {
        return Err(ControllerError::Dimension(format!("grid has {} axes, state has {n}", grid.dim())));
    }
    let x0 = &sol.x0;
    let values: Vec<(f64, f64)> = (0..grid.len())
        .map(|f| min_sv_and_sign(sol, dict, &grid.point(&grid.index(f))))
        .collect::<Result<_, _>>()?;
    let gmax = values.iter().fold(0.0f64, |a, v| a.max(v.0));
    let threshold = 1e-6 * gmax;
    let (s0, sign0) = min_sv_and_sign(sol, dict, x0)?;
    if !(s0 > threshold) || sign0 == 0.0 {
        return Err(ControllerError::SingularAtOperatingPoint { x0: x0.clone() });
    }
    let pass: Vec<bool> = values.iter().map(|(s, sg)| *s > threshold && *sg == sign0).collect();
    let to_flat = |idx: &[usize]| {
        let mut f = 0;
        for k in (0..n).rev() {
            f = f * grid.counts[k] + idx[k];
        }
        f
    };

    let start = grid.nearest(x0);
    let (mut lo, mut hi) = (start.clone(), start.clone());
    let verified = if pass[to_flat(&start)] {
        loop {
            let mut grown = false;
            for axis in 0..n {
                for up in [false, true] {
                    let target = if up {
                        if hi[axis] + 1 >= grid.counts[axis] {
                            continue;
                        }
                        hi[axis] + 1
                    } else {
                        if lo[axis] == 0 {
                            continue;
                        }
                        lo[axis] - 1
                    };
                    if face_passes(&lo, &hi, axis, target, &pass, &to_flat) {
                        if up {
                            hi[axis] = target;
                        } else {
                            lo[axis] = target;
                        }
                        grown = true;
                    }
                }
            }
            if !grown {
                break;
            }
        }
        DomainBox {
            lower: (0..n).map(|k| grid.coordinate(k, lo[k]).min(x0[k])).collect(),
            upper: (0..n).map(|k| grid.coordinate(k, hi[k]).max(x0[k])).collect(),
        }
    } else {
        DomainBox { lower: x0.clone(), upper: x0.clone() }
    };
    Ok(DiffeoRegion {
        certified: false,
        grid: grid.clone(),
        verified,
        threshold,
        max_min_singular_value: gmax,
        min_singular_value_at_x0: s0,
        failing_points: pass.iter().filter(|p| !**p).count(),
    })
}

fn face_passes(
    lo: &[usize],
    hi: &[usize],
    axis: usize,
    at: usize,
    pass: &[bool],
    to_flat: &dyn Fn(&[usize]) -> usize,
) -> bool {
    let n = lo.len();
    let mut idx: Vec<usize> = lo.to_vec();
    idx[axis] = at;
    loop {
        if !pass[to_flat(&idx)] {
            return false;
        }
        let mut k = 0;
        loop {
            if k == n {
                return true;
            }
            if k == axis {
                k += 1;
                continue;
            }
            if idx[k] < hi[k] {
                idx[k] += 1;
                break;
            }
            idx[k] = lo[k];
            k += 1;
        }
    }
}

/// Lyapunov sublevel estimate in the linearizing coordinates. Not a certificate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoaEstimate {
    pub certified: bool,
    /// Row-major.
    pub p: Vec<Vec<f64>>,
    pub level: f64,
    pub grid: Grid,
    /// Grid points with `V <= level`.
    pub inside_points: usize,
    pub region: DiffeoRegion,
}

/// `c` is just below the smallest `V = tau^T P tau` over grid points that
/// leave the verified box or lie on the grid boundary.
pub fn estimate_roa(
    sol: &LinearizingSolution,
    feedback: &StateFeedback,
    bs: &BrunovskyStructure,
    dict: &Dictionary,
    grid: &Grid,
    q: &DMatrix<f64>,
) -> Result<RoaEstimate, ControllerError> {
    let region = diffeo_domain_check(sol, dict, grid)?;
    estimate_roa_in(sol, feedback, bs, dict, region, q)
}

/// [`estimate_roa`] against a given region record, sampled on its grid.
pub fn estimate_roa_in(
    sol: &LinearizingSolution,
    feedback: &StateFeedback,
    bs: &BrunovskyStructure,
    dict: &Dictionary,
    region: DiffeoRegion,
    q: &DMatrix<f64>,
) -> Result<RoaEstimate, ControllerError> {
    let grid = &region.grid;
    let p = lyapunov_solve(&feedback.closed_loop(bs), q)?;
    let mut values = Vec::with_capacity(grid.len());
    let mut bound = f64::INFINITY;
    for f in 0..grid.len() {
        let idx = grid.index(f);
        let x = grid.point(&idx);
        let tau = &sol.t * dict.eval_z(&x)?;
        let v = tau.dot(&(&p * &tau));
        if grid.on_boundary(&idx) || !region.contains(&x) {
            bound = bound.min(v);
        }
        values.push(v);
    }
    if !(bound > 0.0) || !bound.is_finite() {
        return Err(ControllerError::NoLevel);
    }
    let level = bound.next_down();
    Ok(RoaEstimate {
        certified: false,
        p: p.row_iter().map(|r| r.iter().copied().collect()).collect(),
        level,
        grid: grid.clone(),
        inside_points: values.iter().filter(|v| **v <= level).count(),
        region,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationOptions {
    pub duration: f64,
    pub step: f64,
    /// Abort once `||x||_inf` exceeds this.
    pub divergence_bound: f64,
}

impl Default for SimulationOptions {
    fn default() -> Self {
        Self { duration: 5.0, step: 0.01, divergence_bound: 1e6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub t: f64,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub eta: Vec<f64>,
    pub v: f64,
    /// `exp((A_c + B_c K) t) tau(x(0))`.
    pub eta_linear: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub n: usize,
    pub m: usize,
    pub points: Vec<TrajectoryPoint>,
}

impl Trajectory {
    pub fn final_state(&self) -> &[f64] {
        &self.points.last().expect("trajectory has at least one point").x
    }

    /// `max_t ||eta(t) - eta_linear(t)||_inf`.
    pub fn max_eta_deviation(&self) -> f64 {
        self.points
            .iter()
            .flat_map(|p| p.eta.iter().zip(&p.eta_linear).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max)
    }

    /// Largest increase of `V` between consecutive samples.
    pub fn max_lyapunov_increase(&self) -> f64 {
        self.points.windows(2).map(|w| w[1].v - w[0].v).fold(f64::NEG_INFINITY, f64::max)
    }

    /// `t,x1..xn,u1..um,eta1..etan,V`
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), ControllerError> {
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.n).map(|i| format!("x{i}")));
        header.extend((1..=self.m).map(|i| format!("u{i}")));
        header.extend((1..=self.n).map(|i| format!("eta{i}")));
        header.push("V".into());
        writeln!(w, "{}", header.join(","))?;
        for p in &self.points {
            let row: Vec<String> = std::iter::once(p.t)
                .chain(p.x.iter().copied())
                .chain(p.u.iter().copied())
                .chain(p.eta.iter().copied())
                .chain(std::iter::once(p.v))
                .map(fmt17)
                .collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Integrates the closed loop with RK4, evaluating the feedback inside
/// every stage. Aborts when `gamma` becomes singular or changes sign
/// relative to the operating point.
#[allow(clippy::too_many_arguments)]
pub fn closed_loop_simulate(
    sys: &ControlAffineSystem,
    sol: &LinearizingSolution,
    dict: &Dictionary,
    bs: &BrunovskyStructure,
    feedback: &StateFeedback,
    p: &DMatrix<f64>,
    x_init: &[f64],
    opts: &SimulationOptions,
) -> Result<Trajectory, ControllerError> {
    let (n, m) = (sys.n(), sys.m());
    if x_init.len() != n || dict.n() != n || dict.m() != m {
        return Err(ControllerError::Dimension("system, dictionary and x0 disagree".into()));
    }
    if !(opts.step > 0.0) || !(opts.duration >= 0.0) {
        return Err(ControllerError::Dimension("step must be positive and duration non-negative".into()));
    }
    let k = feedback.gain();
    let a_cl = feedback.closed_loop(bs);
    let sign0 = gamma_checked(sol, dict, &sol.x0)?.determinant().signum();
    let gamma_sign = |x: &[f64]| gamma_checked(sol, dict, x).map(|g| g.determinant().signum());
    if gamma_sign(x_init)? != sign0 {
        return Err(ControllerError::GammaSingular { x: x_init.to_vec(), sigma_min: 0.0 });
    }
    let field = |x: &DVector<f64>| -> Result<DVector<f64>, ControllerError> {
        let u = control_law(sol, &k, dict, x.as_slice())?;
        Ok(sys.vector_field(x.as_slice(), u.as_slice()))
    };
    let tau0 = &sol.t * dict.eval_z(x_init)?;
    let steps = (opts.duration / opts.step).round() as usize;
    let h = opts.step;

    let mut x = DVector::from_column_slice(x_init);
    let mut points = Vec::with_capacity(steps + 1);
    for i in 0..=steps {
        let t = i as f64 * h;
        let u = control_law(sol, &k, dict, x.as_slice()).map_err(|_| ControllerError::GammaCrossing {
            t,
            x: x.as_slice().to_vec(),
        })?;
        let eta = &sol.t * dict.eval_z(x.as_slice())?;
        let eta_lin = (&a_cl * t).exp() * &tau0;
        points.push(TrajectoryPoint {
            t,
            x: x.as_slice().to_vec(),
            u: u.as_slice().to_vec(),
            v: eta.dot(&(p * &eta)),
            eta: eta.as_slice().to_vec(),
            eta_linear: eta_lin.as_slice().to_vec(),
        });
        if i == steps {
            break;
        }
        let crossing = |_| ControllerError::GammaCrossing { t, x: x.as_slice().to_vec() };
        let k1 = field(&x).map_err(crossing)?;
        let k2 = field(&(&x + &k1 * (h / 2.0))).map_err(crossing)?;
        let k3 = field(&(&x + &k2 * (h / 2.0))).map_err(crossing)?;
        let k4 = field(&(&x + &k3 * h)).map_err(crossing)?;
        let next = &x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        if next.iter().any(|v| !v.is_finite()) || next.amax() > opts.divergence_bound {
            return Err(ControllerError::Diverged { t: t + h, x: next.as_slice().to_vec() });
        }
        if gamma_sign(next.as_slice()).map_err(crossing)? != sign0 {
            return Err(ControllerError::GammaCrossing { t: t + h, x: next.as_slice().to_vec() });
        }
        x = next;
    }
    Ok(Trajectory { n, m, points })
}
