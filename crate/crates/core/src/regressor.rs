//! Brunovsky canonical pair and the Kronecker-structured regressor.
//!
//! For one sample the regressor is `F = [l1 l2 l3]` with
//!
//! ```text
//! l1 = Z(x)^T ⊗ A_c - (J_Z(x) x')^T ⊗ I_n
//! l2 = Y(x)^T ⊗ B_c
//! l3 = (W(x) u)^T ⊗ B_c
//! ```
//!
//! so that `F [vec T; vec N; vec M] = A_c T Z + B_c (N Y + M W u) - T J_Z x'`
//! under column-major vectorization.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dictionary::{Dictionary, DictionaryError};
use crate::linalg;
use crate::simulator::Dataset;

#[derive(Debug, Error)]
pub enum RegressorError {
    #[error("Brunovsky blocks must be at least 1, got {0:?}")]
    EmptyBlock(Vec<usize>),
    #[error("Brunovsky blocks sum to {sum}, expected n = {n}")]
    BlockSum { sum: usize, n: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Dictionary(#[from] DictionaryError),
    #[error("singular value decomposition failed (non-finite entries?)")]
    Factorization,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Block sizes `(r_1, ..., r_m)` and the canonical pair `(A_c, B_c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BrunovskyStructure {
    blocks: Vec<usize>,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
}

impl BrunovskyStructure {
    pub fn new(blocks: &[usize], n: usize) -> Result<Self, RegressorError> {
        if blocks.is_empty() || blocks.contains(&0) {
            return Err(RegressorError::EmptyBlock(blocks.to_vec()));
        }
        let sum: usize = blocks.iter().sum();
        if sum != n {
            return Err(RegressorError::BlockSum { sum, n });
        }
        let m = blocks.len();
        let mut a = DMatrix::zeros(n, n);
        let mut b = DMatrix::zeros(n, m);
        let mut off = 0;
        for (i, &r) in blocks.iter().enumerate() {
            for k in 0..r - 1 {
                a[(off + k, off + k + 1)] = 1.0;
            }
            b[(off + r - 1, i)] = 1.0;
            off += r;
        }
        debug_assert_eq!(linalg::controllability_rank(&a, &b), n);
        Ok(Self { blocks: blocks.to_vec(), a, b })
    }

    /// Single chain of length `n` for one input.
    pub fn single(n: usize) -> Self {
        Self::new(&[n], n).expect("n >= 1")
    }

    pub fn blocks(&self) -> &[usize] {
        &self.blocks
    }
    pub fn n(&self) -> usize {
        self.a.nrows()
    }
    pub fn m(&self) -> usize {
        self.blocks.len()
    }
    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    /// Row offset of each block.
    pub fn offsets(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .scan(0, |acc, &r| {
                let o = *acc;
                *acc += r;
                Some(o)
            })
            .collect()
    }

    pub fn controllability_rank(&self) -> usize {
        linalg::controllability_rank(&self.a, &self.b)
    }
}

/// Shorthand for [`BrunovskyStructure::new`].
pub fn brunovsky(blocks: &[usize], n: usize) -> Result<BrunovskyStructure, RegressorError> {
    BrunovskyStructure::new(blocks, n)
}

/// All compositions of `n` into `m` positive parts, in lexicographic order.
pub fn compositions(n: usize, m: usize) -> Vec<Vec<usize>> {
    fn rec(left: usize, parts: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if parts == 1 {
            cur.push(left);
            out.push(cur.clone());
            cur.pop();
            return;
        }
        for first in 1..=left.saturating_sub(parts - 1) {
            cur.push(first);
            rec(left - first, parts - 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if m >= 1 && n >= m {
        rec(n, m, &mut Vec::new(), &mut out);
    }
    out
}

/// The three column groups of `F` for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressorBlock {
    pub l1: DMatrix<f64>,
    pub l2: DMatrix<f64>,
    pub l3: DMatrix<f64>,
}

impl RegressorBlock {
    pub fn assembled(&self) -> DMatrix<f64> {
        let n = self.l1.nrows();
        let (c1, c2, c3) = (self.l1.ncols(), self.l2.ncols(), self.l3.ncols());
        let mut f = DMatrix::zeros(n, c1 + c2 + c3);
        f.view_mut((0, 0), (n, c1)).copy_from(&self.l1);
        f.view_mut((0, c1), (n, c2)).copy_from(&self.l2);
        f.view_mut((0, c1 + c2), (n, c3)).copy_from(&self.l3);
        f
    }
}

fn check_structure(dict: &Dictionary, bs: &BrunovskyStructure) -> Result<(), RegressorError> {
    if bs.n() != dict.n() || bs.m() != dict.m() {
        return Err(RegressorError::Dimension(format!(
            "Brunovsky structure is {}x{} but the dictionary has n = {}, m = {}",
            bs.n(),
            bs.m(),
            dict.n(),
            dict.m()
        )));
    }
    Ok(())
}

/// `F(x, u, x')` for one sample.
pub fn build_f(
    dict: &Dictionary,
    bs: &BrunovskyStructure,
    x: &[f64],
    u: &[f64],
    dx: &[f64],
) -> Result<RegressorBlock, RegressorError> {
    check_structure(dict, bs)?;
    let n = dict.n();
    if u.len() != dict.m() || dx.len() != n {
        return Err(RegressorError::Dimension(format!(
            "expected u of length {} and x' of length {n}, got {} and {}",
            dict.m(),
            u.len(),
            dx.len()
        )));
    }
    let z = dict.eval_z(x)?;
    let jz = dict.eval_jacobian_z(x)?;
    let y = dict.eval_y(x)?;
    let w = dict.eval_w(x)?;
    let zdot = &jz * DVector::from_column_slice(dx);
    let wu = &w * DVector::from_column_slice(u);
    let eye = DMatrix::<f64>::identity(n, n);
    let l1 = z.transpose().kronecker(bs.a()) - zdot.transpose().kronecker(&eye);
    let l2 = y.transpose().kronecker(bs.b());
    let l3 = wu.transpose().kronecker(bs.b());
    Ok(RegressorBlock { l1, l2, l3 })
}

/// The stacked data matrix `[F(x_0,u_0,x'_0); ...; F(x_{L-1},...)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedRegressor {
    pub matrix: DMatrix<f64>,
    pub samples: usize,
    pub n: usize,
    /// Power-of-two column scales `d_j`; the equilibrated matrix is
    /// `matrix * diag(1/d_j)`.
    pub column_scale: Option<DVector<f64>>,
    pub source: String,
    pub approximate_derivatives: bool,
}

impl StackedRegressor {
    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }
    pub fn cols(&self) -> usize {
        self.matrix.ncols()
    }

    /// Matrix actually handed to the nullspace routine.
    pub fn working_matrix(&self) -> DMatrix<f64> {
        match &self.column_scale {
            Some(d) => {
                let mut m = self.matrix.clone();
                for (j, s) in d.iter().enumerate() {
                    m.column_mut(j).scale_mut(1.0 / s);
                }
                m
            }
            None => self.matrix.clone(),
        }
    }

    /// Maps a vector of the working matrix back to the original columns.
    pub fn unscale(&self, w: &DVector<f64>) -> DVector<f64> {
        match &self.column_scale {
            Some(d) => w.component_div(d),
            None => w.clone(),
        }
    }

    /// Dense CSV export (17 significant digits, no header).
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), RegressorError> {
        for i in 0..self.rows() {
            let row: Vec<String> = self.matrix.row(i).iter().map(|v| format!("{v:.16e}")).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Power-of-two column scales bringing each column to max-norm in `[0.5, 1)`
/// (zero columns keep scale 1).
pub fn equilibration_scales(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(m.ncols(), |j, _| {
        let amax = m.column(j).amax();
        if amax > 0.0 && amax.is_finite() {
            let e = amax.log2().floor() as i32 + 1;
            2f64.powi(e)
        } else {
            1.0
        }
    })
}

/// Stacks `F` over a dataset. Sample `i` occupies rows `[i n, (i+1) n)`.
pub fn stack(
    dict: &Dictionary,
    bs: &BrunovskyStructure,
    data: &Dataset,
    equilibrate: bool,
) -> Result<StackedRegressor, RegressorError> {
    check_structure(dict, bs)?;
    if data.is_empty() {
        return Err(RegressorError::EmptyDataset);
    }
    if data.n != dict.n() || data.m != dict.m() {
        return Err(RegressorError::Dimension(format!(
            "dataset has n = {}, m = {} but the dictionary has n = {}, m = {}",
            data.n,
            data.m,
            dict.n(),
            dict.m()
        )));
    }
    let n = dict.n();
    let mu = dict.mu();
    let mut matrix = DMatrix::zeros(data.len() * n, mu);
    for (i, s) in data.samples.iter().enumerate() {
        let f = build_f(dict, bs, &s.x, &s.u, &s.dx)?.assembled();
        matrix.view_mut((i * n, 0), (n, mu)).copy_from(&f);
    }
    let column_scale = equilibrate.then(|| equilibration_scales(&matrix));
    let source = match &data.provenance {
        crate::simulator::Provenance::Simulated { system, seed, .. } => format!("{system}/seed={seed}"),
        crate::simulator::Provenance::External { path } => path.clone(),
    };
    Ok(StackedRegressor {
        matrix,
        samples: data.len(),
        n,
        column_scale,
        source,
        approximate_derivatives: data.derivatives == crate::simulator::DerivativeSource::Approximate,
    })
}

/// Row-count and rank diagnostics for the nullity-one condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SufficiencyReport {
    pub rows: usize,
    pub columns: usize,
    /// `mu - 1`
    pub required_rows: usize,
    pub sufficient_rows: bool,
    pub numerical_rank: usize,
    pub required_rank: usize,
    pub rank_deficient: bool,
}

/// Checks `L n >= mu - 1` and compares the numerical rank with `mu - 1`.
///
/// `rank_tol` is relative to the largest singular value; `None` selects
/// `max(rows, cols) * eps`.
pub fn data_sufficiency(sr: &StackedRegressor, rank_tol: Option<f64>) -> Result<SufficiencyReport, RegressorError> {
    let m = sr.working_matrix();
    if m.iter().any(|v| !v.is_finite()) {
        return Err(RegressorError::Factorization);
    }
    let (rows, cols) = m.shape();
    let tol = rank_tol.unwrap_or_else(|| default_rank_tol(rows, cols));
    let rank = linalg::numerical_rank(&linalg::singular_values(&m), tol);
    let required = cols.saturating_sub(1);
    Ok(SufficiencyReport {
        rows,
        columns: cols,
        required_rows: required,
        sufficient_rows: rows >= required,
        numerical_rank: rank,
        required_rank: required,
        rank_deficient: rank < required,
    })
}

/// `max(rows, cols) * eps`.
pub fn default_rank_tol(rows: usize, cols: usize) -> f64 {
    rows.max(cols) as f64 * f64::EPSILON
}
