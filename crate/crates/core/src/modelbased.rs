//! Model-based path: expand each regressor entry in a finite basis over
//! `(x, u)` and solve for the kernel of the stacked coefficient system.
//!
//! With `F_ij(x, u) = phi(x, u)^T c_ij`, the identity `F(x, u) v = 0` holds
//! everywhere iff `C_i v = 0` for every state `i`, where column `j` of `C_i`
//! is `c_ij`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dictionary::{BasisFunction, Dictionary, DictionaryError};
use crate::linalg;
use crate::regressor::{build_f, BrunovskyStructure, RegressorError, SufficiencyReport};
use crate::simulator::ControlAffineSystem;
use crate::solver::{solve_homogeneous, SolveReport, SolverError, SolverOptions};

#[derive(Debug, Error)]
pub enum ModelBasedError {
    #[error("basis is empty")]
    EmptyBasis,
    #[error("basis evaluated on the design has rank {rank} < {size}; functions are dependent or the design is too small")]
    RankDeficientBasis { rank: usize, size: usize },
    #[error("design has {points} points but the basis has {size} functions")]
    TooFewPoints { points: usize, size: usize },
    #[error("system has n = {sys_n}, m = {sys_m} but the dictionary has n = {n}, m = {m}")]
    Dimension { sys_n: usize, sys_m: usize, n: usize, m: usize },
    #[error("invalid design: {0}")]
    Design(String),
    #[error(transparent)]
    Dictionary(#[from] DictionaryError),
    #[error(transparent)]
    Regressor(#[from] RegressorError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// Basis functions over the joint variable `(x, u)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhiBasis {
    pub n: usize,
    pub m: usize,
    pub functions: Vec<BasisFunction>,
}

impl PhiBasis {
    pub fn new(n: usize, m: usize, functions: Vec<BasisFunction>) -> Result<Self, ModelBasedError> {
        if functions.is_empty() {
            return Err(ModelBasedError::EmptyBasis);
        }
        if let Some(f) = functions.iter().find(|f| f.min_dim() > n + m) {
            return Err(DictionaryError::CoordinateOutOfRange { index: f.min_dim() - 1, dim: n + m }.into());
        }
        Ok(Self { n, m, functions })
    }

    /// Parses expressions such as `"x1^2*u1"` or `"sin(x2)"`.
    pub fn parse<S: AsRef<str>>(exprs: &[S], n: usize, m: usize) -> Result<Self, ModelBasedError> {
        let functions = exprs
            .iter()
            .map(|e| BasisFunction::parse(e.as_ref(), n, m))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(n, m, functions)
    }

    /// Monomials in `(x, u)` of total degree `1..=degree`, at most linear in `u`.
    pub fn monomials(n: usize, m: usize, degree: u32) -> Result<Self, ModelBasedError> {
        let mut functions = Vec::new();
        for d in 1..=degree {
            let mut exps = vec![0u32; n + m];
            collect_monomials(&mut exps, 0, d, n, &mut functions);
        }
        Self::new(n, m, functions)
    }

    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    pub fn eval(&self, xu: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.functions.iter().map(|f| f.eval(xu)))
    }

    pub fn labels(&self) -> Vec<String> {
        let mut names: Vec<String> = (1..=self.n).map(|i| format!("x{i}")).collect();
        names.extend((1..=self.m).map(|i| format!("u{i}")));
        self.functions.iter().map(|f| f.render(&names)).collect()
    }
}

fn collect_monomials(exps: &mut Vec<u32>, pos: usize, left: u32, n: usize, out: &mut Vec<BasisFunction>) {
    if pos == exps.len() {
        if left == 0 {
            out.push(BasisFunction::monomial(exps.clone()));
        }
        return;
    }
    let u_used: u32 = exps[n..pos.max(n)].iter().sum();
    let cap = if pos >= n { left.min(1 - u_used.min(1)) } else { left };
    for e in (0..=cap).rev() {
        exps[pos] = e;
        collect_monomials(exps, pos + 1, left - e, n, out);
    }
    exps[pos] = 0;
}

/// Points at which the regressor entries are sampled for fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SampleDesign {
    /// Halton sequence; defaults to `max(200, 20 n_b)` points.
    Halton { points: Option<usize> },
    /// Full grid with `per_axis` points on every axis.
    Tensor { per_axis: usize },
}

impl Default for SampleDesign {
    fn default() -> Self {
        SampleDesign::Halton { points: None }
    }
}

const PRIMES: [u64; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

impl SampleDesign {
    pub fn points(&self, lower: &[f64], upper: &[f64], basis_len: usize) -> Result<Vec<Vec<f64>>, ModelBasedError> {
        let d = lower.len();
        if upper.len() != d || lower.iter().zip(upper).any(|(a, b)| !(a < b)) {
            return Err(ModelBasedError::Design("bounds must satisfy lower < upper per axis".into()));
        }
        match *self {
            SampleDesign::Halton { points } => {
                if d > PRIMES.len() {
                    return Err(ModelBasedError::Design(format!("Halton design supports at most {} axes", PRIMES.len())));
                }
                let count = points.unwrap_or_else(|| (20 * basis_len).max(200));
                Ok((1..=count as u64)
                    .map(|i| {
                        (0..d)
                            .map(|k| lower[k] + (upper[k] - lower[k]) * radical_inverse(i, PRIMES[k]))
                            .collect()
                    })
                    .collect())
            }
            SampleDesign::Tensor { per_axis } => {
                if per_axis < 2 {
                    return Err(ModelBasedError::Design("tensor design needs at least 2 points per axis".into()));
                }
                let total = per_axis.checked_pow(d as u32).filter(|t| *t <= 10_000_000).ok_or_else(|| {
                    ModelBasedError::Design("tensor design is too large".into())
                })?;
                Ok((0..total)
                    .map(|mut idx| {
                        (0..d)
                            .map(|k| {
                                let i = idx % per_axis;
                                idx /= per_axis;
                                lower[k] + (upper[k] - lower[k]) * i as f64 / (per_axis - 1) as f64
                            })
                            .collect()
                    })
                    .collect())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBasedOptions {
    pub design: SampleDesign,
    /// Input bounds for the design; the state bounds come from the dictionary domain.
    pub input_lower: Vec<f64>,
    pub input_upper: Vec<f64>,
    /// Entries whose fit residual exceeds `fit_tol * max(1, max |F_ij|)` are flagged.
    pub fit_tol: f64,
    pub solver: SolverOptions,
}

impl ModelBasedOptions {
    pub fn new(m: usize) -> Self {
        Self {
            design: SampleDesign::default(),
            input_lower: vec![-1.0; m],
            input_upper: vec![1.0; m],
            fit_tol: 1e-9,
            solver: SolverOptions { rank_tol: Some(1e-8), ..SolverOptions::default() },
        }
    }
}

/// A regressor entry the basis cannot represent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlaggedEntry {
    pub state: usize,
    pub column: usize,
    pub residual: f64,
}

/// Least-squares coefficients of every regressor entry.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientTable {
    /// One `n_b x mu` block per state; column `j` holds `c_ij`.
    pub blocks: Vec<DMatrix<f64>>,
    /// Maximum absolute fit residual per entry (`n x mu`).
    pub residuals: DMatrix<f64>,
    pub flagged: Vec<FlaggedEntry>,
    /// Condition number of the design matrix `Phi`.
    pub design_condition: f64,
    pub points: usize,
}

impl CoefficientTable {
    /// Rows `C_1; ...; C_n` stacked.
    pub fn assemble(&self) -> DMatrix<f64> {
        let nb = self.blocks.first().map_or(0, |b| b.nrows());
        let mu = self.blocks.first().map_or(0, |b| b.ncols());
        let mut out = DMatrix::zeros(nb * self.blocks.len(), mu);
        for (i, b) in self.blocks.iter().enumerate() {
            out.view_mut((i * nb, 0), (nb, mu)).copy_from(b);
        }
        out
    }
}

fn check_dims(sys: &ControlAffineSystem, dict: &Dictionary) -> Result<(), ModelBasedError> {
    if sys.n() != dict.n() || sys.m() != dict.m() {
        return Err(ModelBasedError::Dimension { sys_n: sys.n(), sys_m: sys.m(), n: dict.n(), m: dict.m() });
    }
    Ok(())
}

/// Fits `F_ij(x, u) = phi(x, u)^T c_ij` with `x' = f(x) + g(x) u` substituted.
pub fn fit_coefficients(
    sys: &ControlAffineSystem,
    dict: &Dictionary,
    bs: &BrunovskyStructure,
    phi: &PhiBasis,
    opts: &ModelBasedOptions,
) -> Result<CoefficientTable, ModelBasedError> {
    check_dims(sys, dict)?;
    let (n, m, mu, nb) = (dict.n(), dict.m(), dict.mu(), phi.len());
    if phi.n != n || phi.m != m {
        return Err(ModelBasedError::Dimension { sys_n: phi.n, sys_m: phi.m, n, m });
    }
    if opts.input_lower.len() != m || opts.input_upper.len() != m {
        return Err(ModelBasedError::Design(format!("input bounds must have {m} entries")));
    }
    let mut lower = dict.domain().lower.clone();
    let mut upper = dict.domain().upper.clone();
    lower.extend_from_slice(&opts.input_lower);
    upper.extend_from_slice(&opts.input_upper);
    let pts = opts.design.points(&lower, &upper, nb)?;
    if pts.len() < nb {
        return Err(ModelBasedError::TooFewPoints { points: pts.len(), size: nb });
    }

    let mut design = DMatrix::zeros(pts.len(), nb);
    let mut rhs = DMatrix::zeros(pts.len(), n * mu);
    for (k, xu) in pts.iter().enumerate() {
        design.set_row(k, &phi.eval(xu).transpose());
        let (x, u) = xu.split_at(n);
        let dx = sys.vector_field(x, u);
        let f = build_f(dict, bs, x, u, dx.as_slice())?.assembled();
        for j in 0..mu {
            for i in 0..n {
                rhs[(k, i * mu + j)] = f[(i, j)];
            }
        }
    }

    let sv = linalg::singular_values(&design);
    let rank = linalg::numerical_rank(&sv, 1e-10);
    if rank < nb {
        return Err(ModelBasedError::RankDeficientBasis { rank, size: nb });
    }
    let design_condition = sv[0] / sv[nb - 1];
    let qr = design.clone().qr();
    let coeffs = qr.r().solve_upper_triangular(&qr.q().tr_mul(&rhs)).ok_or(SolverError::Factorization)?;
    let fitted = &design * &coeffs;

    let mut blocks = vec![DMatrix::zeros(nb, mu); n];
    let mut residuals = DMatrix::zeros(n, mu);
    let mut flagged = Vec::new();
    for i in 0..n {
        for j in 0..mu {
            let col = i * mu + j;
            blocks[i].set_column(j, &coeffs.column(col));
            let res = (rhs.column(col) - fitted.column(col)).amax();
            residuals[(i, j)] = res;
            if res > opts.fit_tol * rhs.column(col).amax().max(1.0) {
                flagged.push(FlaggedEntry { state: i, column: j, residual: res });
            }
        }
    }
    Ok(CoefficientTable { blocks, residuals, flagged, design_condition, points: pts.len() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBasedReport {
    pub table: CoefficientTable,
    pub report: SolveReport,
}

/// Fits the coefficient table and extracts its kernel.
pub fn solve_model_based(
    sys: &ControlAffineSystem,
    dict: &Dictionary,
    bs: &BrunovskyStructure,
    phi: &PhiBasis,
    x0: &[f64],
    opts: &ModelBasedOptions,
) -> Result<ModelBasedReport, ModelBasedError> {
    let table = fit_coefficients(sys, dict, bs, phi, opts)?;
    let system = table.assemble();
    let (rows, cols) = system.shape();
    let tol = opts.solver.rank_tol.unwrap_or(1e-8);
    let rank = linalg::numerical_rank(&linalg::singular_values(&system), tol);
    let required = cols.saturating_sub(1);
    let sufficiency = SufficiencyReport {
        rows,
        columns: cols,
        required_rows: required,
        sufficient_rows: rows >= required,
        numerical_rank: rank,
        required_rank: required,
        rank_deficient: rank < required,
    };
    let mut warnings = Vec::new();
    if !table.flagged.is_empty() {
        warnings.push(format!(
            "{} regressor entries are not represented by the basis (max residual {:.3e}); the expansion assumption fails",
            table.flagged.len(),
            table.flagged.iter().map(|f| f.residual).fold(0.0, f64::max)
        ));
    }
    let solver = SolverOptions { rank_tol: Some(tol), ..opts.solver.clone() };
    let report = solve_homogeneous(&system, |w| w.clone(), dict, x0, &solver, sufficiency, warnings)?;
    Ok(ModelBasedReport { table, report })
}
