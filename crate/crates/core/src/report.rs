//! JSON report schema shared by the data-driven and model-based paths.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dictionary::{Dictionary, Dims};
use crate::modelbased::{FlaggedEntry, ModelBasedReport};
use crate::regressor::SufficiencyReport;
use crate::solver::{LinearizingSolution, Normalization, Regularity, SolveReport, SolveStatus, SolverError};

pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn rows_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let ncols = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j])
}

/// Serializable form of a [`LinearizingSolution`]; matrices are row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionRecord {
    pub dims: Dims,
    pub v: Vec<f64>,
    pub t: Vec<Vec<f64>>,
    pub n_bar: Vec<Vec<f64>>,
    pub m_bar: Vec<Vec<f64>>,
    pub normalization: Normalization,
    pub x0: Vec<f64>,
    pub regularity: Regularity,
}

impl From<&LinearizingSolution> for SolutionRecord {
    fn from(s: &LinearizingSolution) -> Self {
        Self {
            dims: s.dims,
            v: s.v.iter().copied().collect(),
            t: matrix_rows(&s.t),
            n_bar: matrix_rows(&s.n_bar),
            m_bar: matrix_rows(&s.m_bar),
            normalization: s.normalization,
            x0: s.x0.clone(),
            regularity: s.regularity.clone(),
        }
    }
}

impl SolutionRecord {
    /// Rebuilds the solution from `v`, re-checking it against `dict`.
    pub fn to_solution(&self, dict: &Dictionary) -> Result<LinearizingSolution, SolverError> {
        let mut sol = LinearizingSolution::from_vector(&DVector::from_column_slice(&self.v), dict, &self.x0)?;
        if sol.normalization.index == self.normalization.index {
            sol.normalization = self.normalization;
        }
        Ok(sol)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolutionKind {
    DataDriven,
    ModelBased,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionReport {
    pub kind: SolutionKind,
    pub status: SolveStatus,
    pub blocks: Vec<usize>,
    pub dims: Dims,
    pub sufficiency: SufficiencyReport,
    pub singular_values: Vec<f64>,
    pub rank: usize,
    pub nullity: usize,
    pub rank_tol: f64,
    pub gap: Option<f64>,
    pub refined_min_singular_value: Option<f64>,
    /// Kernel basis in the original unknown coordinates.
    pub basis: Vec<Vec<f64>>,
    pub solution: Option<SolutionRecord>,
    pub candidates: Vec<SolutionRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unrepresented_entries: Vec<FlaggedEntry>,
    pub warnings: Vec<String>,
    #[serde(default)]
    pub provenance: Option<serde_json::Value>,
    #[serde(default)]
    pub config: Option<serde_json::Value>,
}

impl SolutionReport {
    pub fn new(kind: SolutionKind, blocks: &[usize], dims: Dims, rep: &SolveReport) -> Self {
        let ns = &rep.nullspace;
        Self {
            kind,
            status: rep.status,
            blocks: blocks.to_vec(),
            dims,
            sufficiency: rep.sufficiency.clone(),
            singular_values: ns.singular_values.clone(),
            rank: ns.rank,
            nullity: ns.nullity,
            rank_tol: ns.rank_tol,
            gap: ns.gap,
            refined_min_singular_value: ns.refined_min_singular_value,
            basis: rep.basis.iter().map(|b| b.iter().copied().collect()).collect(),
            solution: rep.solution.as_ref().map(SolutionRecord::from),
            candidates: rep.candidates.iter().map(SolutionRecord::from).collect(),
            unrepresented_entries: Vec::new(),
            warnings: rep.warnings.clone(),
            provenance: None,
            config: None,
        }
    }

    pub fn model_based(blocks: &[usize], dims: Dims, rep: &ModelBasedReport) -> Self {
        let mut out = Self::new(SolutionKind::ModelBased, blocks, dims, &rep.report);
        out.unrepresented_entries = rep.table.flagged.clone();
        out
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }
}
