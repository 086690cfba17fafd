//! Basis libraries `Z`, `Y`, `W` and their analytic Jacobians.
//!
//! A [`Dictionary`] holds three ordered lists of scalar basis functions:
//! `Z` spans the coordinate change `tau(x) = T Z(x)`, `Y` spans the drift
//! term `delta(x) = N Y(x)` and the `r x m` grid `W` spans the input gain
//! `gamma(x) = M W(x)`. Every basis kind carries a closed-form gradient, so
//! no numerical differentiation is involved anywhere downstream.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DictionaryError {
    #[error("dimension mismatch: expected a vector of length {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("family degree must be at least 1, got {0}")]
    InvalidDegree(u32),
    #[error("the Z library is empty")]
    EmptyZ,
    #[error("the W grid must have {m} columns in every row")]
    RaggedW { m: usize },
    #[error("Z has {s} entries but the state has dimension {n}; tau cannot have a rank-n Jacobian")]
    TooFewCoordinates { s: usize, n: usize },
    #[error("basis function refers to coordinate {index} but the argument has dimension {dim}")]
    CoordinateOutOfRange { index: usize, dim: usize },
    #[error("invalid domain box: {0}")]
    InvalidDomain(String),
    #[error("cannot parse basis expression `{0}`")]
    Parse(String),
    #[error("unknown library family `{0}`")]
    UnknownFamily(String),
}

/// Axis-aligned box `lower <= x <= upper`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl DomainBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, DictionaryError> {
        if lower.len() != upper.len() {
            return Err(DictionaryError::InvalidDomain(format!(
                "lower has {} entries, upper has {}",
                lower.len(),
                upper.len()
            )));
        }
        if let Some(i) = (0..lower.len()).find(|&i| !(lower[i] <= upper[i])) {
            return Err(DictionaryError::InvalidDomain(format!(
                "coordinate {} has lower {} > upper {}",
                i + 1,
                lower[i],
                upper[i]
            )));
        }
        Ok(Self { lower, upper })
    }

    /// Symmetric box `[-half_width, half_width]^dim`.
    pub fn symmetric(dim: usize, half_width: f64) -> Self {
        Self {
            lower: vec![-half_width; dim],
            upper: vec![half_width; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (lo, hi))| *lo <= *v && *v <= *hi)
    }

    /// Box scaled about its center by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let (lower, upper) = self
            .lower
            .iter()
            .zip(&self.upper)
            .map(|(lo, hi)| {
                let c = 0.5 * (lo + hi);
                let h = 0.5 * (hi - lo) * factor;
                (c - h, c + h)
            })
            .unzip();
        Self { lower, upper }
    }
}

/// A scalar function of a real vector with a closed-form gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BasisFunction {
    Constant { value: f64 },
    Coordinate { index: usize },
    Monomial { exponents: Vec<u32> },
    Sin { index: usize },
    Cos { index: usize },
    /// `offset + sum_i coeffs[i] * x_i`
    Affine { offset: f64, coeffs: Vec<f64> },
}

impl BasisFunction {
    pub fn one() -> Self {
        BasisFunction::Constant { value: 1.0 }
    }

    pub fn zero() -> Self {
        BasisFunction::Constant { value: 0.0 }
    }

    pub fn coordinate(index: usize) -> Self {
        BasisFunction::Coordinate { index }
    }

    pub fn monomial(exponents: Vec<u32>) -> Self {
        BasisFunction::Monomial { exponents }
    }

    /// Smallest argument dimension this function can be evaluated on.
    pub fn min_dim(&self) -> usize {
        match self {
            BasisFunction::Constant { .. } => 0,
            BasisFunction::Coordinate { index }
            | BasisFunction::Sin { index }
            | BasisFunction::Cos { index } => index + 1,
            BasisFunction::Monomial { exponents } => exponents
                .iter()
                .rposition(|&e| e > 0)
                .map_or(0, |i| i + 1),
            BasisFunction::Affine { coeffs, .. } => coeffs.len(),
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            BasisFunction::Constant { value } => *value,
            BasisFunction::Coordinate { index } => x[*index],
            BasisFunction::Monomial { exponents } => exponents
                .iter()
                .enumerate()
                .filter(|(_, &e)| e > 0)
                .map(|(i, &e)| x[i].powi(e as i32))
                .product(),
            BasisFunction::Sin { index } => x[*index].sin(),
            BasisFunction::Cos { index } => x[*index].cos(),
            BasisFunction::Affine { offset, coeffs } => {
                offset + coeffs.iter().zip(x).map(|(c, v)| c * v).sum::<f64>()
            }
        }
    }

    /// Writes the gradient into `out` (length = dimension of `x`).
    pub fn gradient_into(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|g| *g = 0.0);
        match self {
            BasisFunction::Constant { .. } => {}
            BasisFunction::Coordinate { index } => out[*index] = 1.0,
            BasisFunction::Monomial { exponents } => {
                for (j, &ej) in exponents.iter().enumerate() {
                    if ej == 0 {
                        continue;
                    }
                    let mut d = ej as f64 * x[j].powi(ej as i32 - 1);
                    for (i, &ei) in exponents.iter().enumerate() {
                        if i != j && ei > 0 {
                            d *= x[i].powi(ei as i32);
                        }
                    }
                    out[j] = d;
                }
            }
            BasisFunction::Sin { index } => out[*index] = x[*index].cos(),
            BasisFunction::Cos { index } => out[*index] = -x[*index].sin(),
            BasisFunction::Affine { coeffs, .. } => out[..coeffs.len()].copy_from_slice(coeffs),
        }
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        self.gradient_into(x, &mut g);
        g
    }

    /// Renders the function with variable names `names[i]`.
    pub fn render(&self, names: &[String]) -> String {
        match self {
            BasisFunction::Constant { value } => format!("{value}"),
            BasisFunction::Coordinate { index } => names[*index].clone(),
            BasisFunction::Monomial { exponents } => {
                let factors: Vec<String> = exponents
                    .iter()
                    .enumerate()
                    .filter(|(_, &e)| e > 0)
                    .map(|(i, &e)| {
                        if e == 1 {
                            names[i].clone()
                        } else {
                            format!("{}^{}", names[i], e)
                        }
                    })
                    .collect();
                if factors.is_empty() {
                    "1".into()
                } else {
                    factors.join("*")
                }
            }
            BasisFunction::Sin { index } => format!("sin({})", names[*index]),
            BasisFunction::Cos { index } => format!("cos({})", names[*index]),
            BasisFunction::Affine { offset, coeffs } => {
                let mut s = format!("{offset}");
                for (i, c) in coeffs.iter().enumerate() {
                    if *c != 0.0 {
                        s.push_str(&format!(" + {c}*{}", names[i]));
                    }
                }
                s
            }
        }
    }

    /// Parses expressions such as `1`, `x2`, `x1^2*u1`, `sin(x1)` or `cos(u1)`.
    ///
    /// Variables `x1..xn` map to indices `0..n`, `u1..um` to `n..n+m`.
    pub fn parse(expr: &str, n: usize, m: usize) -> Result<Self, DictionaryError> {
        let err = || DictionaryError::Parse(expr.to_string());
        let e = expr.trim();
        if e.is_empty() {
            return Err(err());
        }
        if let Ok(value) = e.parse::<f64>() {
            return Ok(BasisFunction::Constant { value });
        }
        for (prefix, trig) in [("sin(", true), ("cos(", false)] {
            if let Some(inner) = e.strip_prefix(prefix) {
                let inner = inner.strip_suffix(')').ok_or_else(err)?;
                let index = parse_variable(inner.trim(), n, m).ok_or_else(err)?;
                return Ok(if trig {
                    BasisFunction::Sin { index }
                } else {
                    BasisFunction::Cos { index }
                });
            }
        }
        let mut exponents = vec![0u32; n + m];
        for factor in e.split('*') {
            let (var, pow) = match factor.split_once('^') {
                Some((v, p)) => (v.trim(), p.trim().parse::<u32>().map_err(|_| err())?),
                None => (factor.trim(), 1),
            };
            let idx = parse_variable(var, n, m).ok_or_else(err)?;
            exponents[idx] += pow;
        }
        Ok(monomial_or_coordinate(exponents))
    }
}

fn parse_variable(var: &str, n: usize, m: usize) -> Option<usize> {
    let (offset, limit, rest) = if let Some(r) = var.strip_prefix('x') {
        (0, n, r)
    } else {
        (n, m, var.strip_prefix('u')?)
    };
    let k: usize = rest.parse().ok()?;
    (1..=limit).contains(&k).then(|| offset + k - 1)
}

fn monomial_or_coordinate(exponents: Vec<u32>) -> BasisFunction {
    let degree: u32 = exponents.iter().sum();
    if degree == 0 {
        BasisFunction::one()
    } else if degree == 1 {
        BasisFunction::Coordinate {
            index: exponents.iter().position(|&e| e == 1).unwrap(),
        }
    } else {
        BasisFunction::Monomial { exponents }
    }
}

impl fmt::Display for BasisFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dim = self.min_dim().max(1);
        let names: Vec<String> = (1..=dim).map(|i| format!("z{i}")).collect();
        f.write_str(&self.render(&names))
    }
}

/// Named function families used by [`LibrarySpec`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Family {
    Constant,
    Coordinates,
    /// `x_i^k` for every coordinate.
    Powers(u32),
    /// All monomials of total degree `1..=d`.
    Monomials(u32),
    Sin,
    Cos,
}

impl FromStr for Family {
    type Err = DictionaryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let param = |prefix: &str| -> Option<Result<u32, DictionaryError>> {
            let inner = s.strip_prefix(prefix)?.strip_prefix('(')?.strip_suffix(')')?;
            Some(
                inner
                    .trim()
                    .parse::<u32>()
                    .map_err(|_| DictionaryError::UnknownFamily(s.to_string())),
            )
        };
        Ok(match s {
            "constant" => Family::Constant,
            "coordinates" | "coords" => Family::Coordinates,
            "squares" => Family::Powers(2),
            "cubes" => Family::Powers(3),
            "sin" => Family::Sin,
            "cos" => Family::Cos,
            _ => {
                if let Some(d) = param("powers") {
                    Family::Powers(d?)
                } else if let Some(d) = param("monomials") {
                    Family::Monomials(d?)
                } else {
                    return Err(DictionaryError::UnknownFamily(s.to_string()));
                }
            }
        })
    }
}

impl TryFrom<String> for Family {
    type Error = DictionaryError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Family> for String {
    fn from(f: Family) -> String {
        match f {
            Family::Constant => "constant".into(),
            Family::Coordinates => "coordinates".into(),
            Family::Powers(2) => "squares".into(),
            Family::Powers(3) => "cubes".into(),
            Family::Powers(k) => format!("powers({k})"),
            Family::Monomials(d) => format!("monomials({d})"),
            Family::Sin => "sin".into(),
            Family::Cos => "cos".into(),
        }
    }
}

/// Builds an ordered basis list from families over `dim` variables.
///
/// Order: constant, coordinates, remaining monomials in graded-lexicographic
/// order, sines, cosines. Duplicates are dropped.
pub fn build_family_list(families: &[Family], dim: usize) -> Result<Vec<BasisFunction>, DictionaryError> {
    let mut constant = false;
    let mut coords = false;
    let mut sin = false;
    let mut cos = false;
    let mut monomials: BTreeSet<Vec<u32>> = BTreeSet::new();
    for fam in families {
        match *fam {
            Family::Constant => constant = true,
            Family::Coordinates => coords = true,
            Family::Sin => sin = true,
            Family::Cos => cos = true,
            Family::Powers(k) => {
                if k < 1 {
                    return Err(DictionaryError::InvalidDegree(k));
                }
                if k == 1 {
                    coords = true;
                } else {
                    for i in 0..dim {
                        let mut e = vec![0; dim];
                        e[i] = k;
                        monomials.insert(e);
                    }
                }
            }
            Family::Monomials(d) => {
                if d < 1 {
                    return Err(DictionaryError::InvalidDegree(d));
                }
                coords = true;
                for deg in 2..=d {
                    for e in exponent_vectors(dim, deg) {
                        monomials.insert(e);
                    }
                }
            }
        }
    }
    let mut mono: Vec<Vec<u32>> = monomials.into_iter().collect();
    mono.sort_by(|a, b| graded_lex(a, b));

    let mut out = Vec::new();
    if constant {
        out.push(BasisFunction::one());
    }
    if coords {
        out.extend((0..dim).map(BasisFunction::coordinate));
    }
    out.extend(mono.into_iter().map(BasisFunction::monomial));
    if sin {
        out.extend((0..dim).map(|index| BasisFunction::Sin { index }));
    }
    if cos {
        out.extend((0..dim).map(|index| BasisFunction::Cos { index }));
    }
    Ok(out)
}

/// Graded-lex: lower total degree first, then larger leading exponents first.
fn graded_lex(a: &[u32], b: &[u32]) -> std::cmp::Ordering {
    let da: u32 = a.iter().sum();
    let db: u32 = b.iter().sum();
    da.cmp(&db).then_with(|| b.cmp(a))
}

/// All exponent vectors of length `dim` with total degree `deg`.
fn exponent_vectors(dim: usize, deg: u32) -> Vec<Vec<u32>> {
    fn rec(dim: usize, left: u32, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if cur.len() + 1 == dim {
            cur.push(left);
            out.push(cur.clone());
            cur.pop();
            return;
        }
        for e in (0..=left).rev() {
            cur.push(e);
            rec(dim, left - e, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if dim > 0 {
        rec(dim, deg, &mut Vec::with_capacity(dim), &mut out);
    }
    out
}

/// Declarative description of a dictionary.
///
/// `y` defaults to `z`; `w` defaults to `constant` followed by `z`, and the
/// W grid is block diagonal over the inputs (`W = I_m ⊗ w`), which reduces
/// to the column `[1; Z(x)]` for a single input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LibrarySpec {
    pub z: Vec<Family>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<Vec<Family>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w: Option<Vec<Family>>,
    pub domain: DomainBox,
}

impl LibrarySpec {
    pub fn new(z: Vec<Family>, domain: DomainBox) -> Self {
        Self { z, y: None, w: None, domain }
    }

    pub fn y_families(&self) -> Vec<Family> {
        self.y.clone().unwrap_or_else(|| self.z.clone())
    }

    pub fn w_families(&self) -> Vec<Family> {
        self.w.clone().unwrap_or_else(|| {
            let mut w = vec![Family::Constant];
            w.extend(self.z.iter().copied());
            w
        })
    }
}

/// Builds a dictionary from a library spec with deterministic ordering.
pub fn build_standard_library(spec: &LibrarySpec, m: usize) -> Result<Dictionary, DictionaryError> {
    let n = spec.domain.dim();
    let z = build_family_list(&spec.z, n)?;
    if z.is_empty() {
        return Err(DictionaryError::EmptyZ);
    }
    let y = build_family_list(&spec.y_families(), n)?;
    let w_col = build_family_list(&spec.w_families(), n)?;
    let mut w = Vec::with_capacity(w_col.len() * m);
    for j in 0..m {
        for f in &w_col {
            let mut row = vec![BasisFunction::zero(); m];
            row[j] = f.clone();
            w.push(row);
        }
    }
    Dictionary::new(n, m, z, y, w, spec.domain.clone())
}

/// Ordered libraries `Z` (length s), `Y` (length p) and the `r x m` grid `W`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dictionary {
    n: usize,
    m: usize,
    z: Vec<BasisFunction>,
    y: Vec<BasisFunction>,
    w: Vec<Vec<BasisFunction>>,
    domain: DomainBox,
}

/// Sizes `(n, m, s, p, r)` of a dictionary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n: usize,
    pub m: usize,
    pub s: usize,
    pub p: usize,
    pub r: usize,
}

impl Dims {
    /// Length of the unknown vector `[vec T; vec N; vec M]`.
    pub fn mu(&self) -> usize {
        self.n * self.s + self.p * self.m + self.r * self.m
    }
}

impl Dictionary {
    pub fn new(
        n: usize,
        m: usize,
        z: Vec<BasisFunction>,
        y: Vec<BasisFunction>,
        w: Vec<Vec<BasisFunction>>,
        domain: DomainBox,
    ) -> Result<Self, DictionaryError> {
        if z.is_empty() {
            return Err(DictionaryError::EmptyZ);
        }
        if domain.dim() != n {
            return Err(DictionaryError::DimensionMismatch {
                expected: n,
                actual: domain.dim(),
            });
        }
        if w.iter().any(|row| row.len() != m) {
            return Err(DictionaryError::RaggedW { m });
        }
        for f in z.iter().chain(&y).chain(w.iter().flatten()) {
            if f.min_dim() > n {
                return Err(DictionaryError::CoordinateOutOfRange {
                    index: f.min_dim() - 1,
                    dim: n,
                });
            }
        }
        Ok(Self { n, m, z, y, w, domain })
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn m(&self) -> usize {
        self.m
    }
    pub fn s(&self) -> usize {
        self.z.len()
    }
    pub fn p(&self) -> usize {
        self.y.len()
    }
    pub fn r(&self) -> usize {
        self.w.len()
    }
    pub fn mu(&self) -> usize {
        self.dims().mu()
    }
    pub fn dims(&self) -> Dims {
        Dims {
            n: self.n,
            m: self.m,
            s: self.s(),
            p: self.p(),
            r: self.r(),
        }
    }
    pub fn domain(&self) -> &DomainBox {
        &self.domain
    }
    pub fn z(&self) -> &[BasisFunction] {
        &self.z
    }
    pub fn y(&self) -> &[BasisFunction] {
        &self.y
    }
    pub fn w(&self) -> &[Vec<BasisFunction>] {
        &self.w
    }

    /// Errors when `s < n`.
    pub fn check_coordinate_count(&self) -> Result<(), DictionaryError> {
        if self.s() < self.n {
            Err(DictionaryError::TooFewCoordinates { s: self.s(), n: self.n })
        } else {
            Ok(())
        }
    }

    /// True when `x` lies outside the declared domain box. Evaluation is
    /// still permitted there.
    pub fn is_outside_domain(&self, x: &[f64]) -> bool {
        !self.domain.contains(x)
    }

    fn check(&self, x: &[f64]) -> Result<(), DictionaryError> {
        if x.len() != self.n {
            Err(DictionaryError::DimensionMismatch {
                expected: self.n,
                actual: x.len(),
            })
        } else {
            Ok(())
        }
    }

    pub fn eval_z(&self, x: &[f64]) -> Result<DVector<f64>, DictionaryError> {
        self.check(x)?;
        Ok(DVector::from_iterator(self.s(), self.z.iter().map(|f| f.eval(x))))
    }

    /// `s x n` matrix whose row k is the gradient of `Z_k` at `x`.
    pub fn eval_jacobian_z(&self, x: &[f64]) -> Result<DMatrix<f64>, DictionaryError> {
        self.check(x)?;
        let mut jac = DMatrix::zeros(self.s(), self.n);
        let mut g = vec![0.0; self.n];
        for (k, f) in self.z.iter().enumerate() {
            f.gradient_into(x, &mut g);
            for (j, v) in g.iter().enumerate() {
                jac[(k, j)] = *v;
            }
        }
        Ok(jac)
    }

    pub fn eval_y(&self, x: &[f64]) -> Result<DVector<f64>, DictionaryError> {
        self.check(x)?;
        Ok(DVector::from_iterator(self.p(), self.y.iter().map(|f| f.eval(x))))
    }

    pub fn eval_w(&self, x: &[f64]) -> Result<DMatrix<f64>, DictionaryError> {
        self.check(x)?;
        Ok(DMatrix::from_fn(self.r(), self.m, |i, j| self.w[i][j].eval(x)))
    }

    /// Human-readable names of the Z entries.
    pub fn z_labels(&self) -> Vec<String> {
        let names = state_names(self.n);
        self.z.iter().map(|f| f.render(&names)).collect()
    }
}

pub(crate) fn state_names(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("x{i}")).collect()
}
