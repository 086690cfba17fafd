//! Control-affine systems, excitation signals and dataset collection.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dictionary::DomainBox;

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("step size must be positive, got {0}")]
    NonPositiveStep(f64),
    #[error("non-finite value in the vector field at t = {t}")]
    NonFinite { t: f64 },
    #[error("trajectory left the safety box at t = {t} (state {state:?})")]
    Escaped { t: f64, state: Vec<f64> },
    #[error("duration {duration} is not an integer multiple of the sample period {period}")]
    NonIntegerSampleCount { duration: f64, period: f64 },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("timestamps are not uniformly spaced (sample {index})")]
    NonUniformTimestamps { index: usize },
    #[error("at least {needed} samples are required, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("unknown built-in system `{0}`")]
    UnknownSystem(String),
    #[error("missing parameter `{0}`")]
    MissingParameter(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed dataset: {0}")]
    Malformed(String),
}

type Drift = Arc<dyn Fn(&[f64]) -> DVector<f64> + Send + Sync>;
type InputMatrix = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;

/// `x' = f(x) + g(x) u`.
#[derive(Clone)]
pub struct ControlAffineSystem {
    name: String,
    n: usize,
    m: usize,
    params: BTreeMap<String, f64>,
    drift: Drift,
    input: InputMatrix,
}

impl fmt::Debug for ControlAffineSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlAffineSystem")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("m", &self.m)
            .field("params", &self.params)
            .finish()
    }
}

impl ControlAffineSystem {
    pub fn new<F, G>(name: impl Into<String>, n: usize, m: usize, drift: F, input: G) -> Self
    where
        F: Fn(&[f64]) -> DVector<f64> + Send + Sync + 'static,
        G: Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            n,
            m,
            params: BTreeMap::new(),
            drift: Arc::new(drift),
            input: Arc::new(input),
        }
    }

    pub fn with_params(mut self, params: BTreeMap<String, f64>) -> Self {
        self.params = params;
        self
    }

    /// `x1' = mu x1 + u`, `x2' = lambda (x2 - x1^2) + u`.
    pub fn example1(mu: f64, lambda: f64) -> Self {
        let params = BTreeMap::from([("lambda".to_string(), lambda), ("mu".to_string(), mu)]);
        Self::new(
            "example1",
            2,
            1,
            move |x| DVector::from_vec(vec![mu * x[0], lambda * (x[1] - x[0] * x[0])]),
            |_| DMatrix::from_element(2, 1, 1.0),
        )
        .with_params(params)
    }

    /// `x' = A x + B u`.
    pub fn linear(a: DMatrix<f64>, b: DMatrix<f64>) -> Self {
        let n = a.nrows();
        let m = b.ncols();
        let mut params = BTreeMap::new();
        for i in 0..n {
            for j in 0..n {
                params.insert(format!("a{}{}", i + 1, j + 1), a[(i, j)]);
            }
            for j in 0..m {
                params.insert(format!("b{}{}", i + 1, j + 1), b[(i, j)]);
            }
        }
        Self::new(
            "linear",
            n,
            m,
            move |x| &a * DVector::from_column_slice(x),
            move |_| b.clone(),
        )
        .with_params(params)
    }

    /// Built-in systems by name: `example1` (params `mu`, `lambda`) and
    /// `linear` (params `n`, `m`, `aIJ`, `bIJ`, 1-based).
    pub fn builtin(name: &str, params: &BTreeMap<String, f64>) -> Result<Self, SimulationError> {
        let get = |k: &str| {
            params
                .get(k)
                .copied()
                .ok_or_else(|| SimulationError::MissingParameter(k.to_string()))
        };
        match name {
            "example1" => Ok(Self::example1(get("mu")?, get("lambda")?)),
            "linear" => {
                let n = get("n")? as usize;
                let m = get("m")? as usize;
                let a = DMatrix::from_fn(n, n, |i, j| {
                    params.get(&format!("a{}{}", i + 1, j + 1)).copied().unwrap_or(0.0)
                });
                let b = DMatrix::from_fn(n, m, |i, j| {
                    params.get(&format!("b{}{}", i + 1, j + 1)).copied().unwrap_or(0.0)
                });
                Ok(Self::linear(a, b))
            }
            other => Err(SimulationError::UnknownSystem(other.to_string())),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn n(&self) -> usize {
        self.n
    }
    pub fn m(&self) -> usize {
        self.m
    }
    pub fn params(&self) -> &BTreeMap<String, f64> {
        &self.params
    }

    pub fn drift(&self, x: &[f64]) -> DVector<f64> {
        (self.drift)(x)
    }

    pub fn input_matrix(&self, x: &[f64]) -> DMatrix<f64> {
        (self.input)(x)
    }

    /// `f(x) + g(x) u`.
    pub fn vector_field(&self, x: &[f64], u: &[f64]) -> DVector<f64> {
        let mut dx = self.drift(x);
        dx.gemv(1.0, &self.input_matrix(x), &DVector::from_column_slice(u), 1.0);
        dx
    }
}

/// One classical Runge-Kutta step with the input held constant.
pub fn rk4_step<F>(field: F, x: &DVector<f64>, u: &DVector<f64>, h: f64) -> Result<DVector<f64>, SimulationError>
where
    F: Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64>,
{
    if !(h > 0.0) {
        return Err(SimulationError::NonPositiveStep(h));
    }
    let k1 = field(x, u);
    let k2 = field(&(x + &k1 * (h / 2.0)), u);
    let k3 = field(&(x + &k2 * (h / 2.0)), u);
    let k4 = field(&(x + &k3 * h), u);
    let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    if next.iter().all(|v| v.is_finite()) {
        Ok(next)
    } else {
        Err(SimulationError::NonFinite { t: f64::NAN })
    }
}

/// Excitation waveforms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SignalKind {
    /// Independent uniform draws held for `hold` seconds.
    PiecewiseConstantUniform,
    /// Sum of `components` sinusoids with random frequencies in
    /// `[0, max_frequency]` Hz and random phases.
    MultiSine { components: usize, max_frequency: f64 },
    /// Zero-order hold of user-supplied `(time, input)` rows.
    Table { times: Vec<f64>, values: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcitationSignal {
    #[serde(flatten)]
    pub kind: SignalKind,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Hold period in seconds; `None` means "use the sample period".
    #[serde(default)]
    pub hold: Option<f64>,
    pub seed: u64,
}

impl ExcitationSignal {
    pub fn piecewise_uniform(lower: Vec<f64>, upper: Vec<f64>, seed: u64) -> Self {
        Self {
            kind: SignalKind::PiecewiseConstantUniform,
            lower,
            upper,
            hold: None,
            seed,
        }
    }

    pub fn m(&self) -> usize {
        self.lower.len()
    }

    /// Draws the random parameters and returns a time-indexable schedule.
    pub fn realize(&self, duration: f64, default_hold: f64) -> Result<InputSchedule, SimulationError> {
        if self.lower.len() != self.upper.len() {
            return Err(SimulationError::Dimension("excitation bounds differ in length".into()));
        }
        if self.lower.iter().zip(&self.upper).any(|(lo, hi)| !(lo <= hi)) {
            return Err(SimulationError::Invalid("excitation lower bound exceeds upper bound".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let m = self.m();
        let hold = self.hold.unwrap_or(default_hold);
        match &self.kind {
            SignalKind::PiecewiseConstantUniform => {
                if !(hold > 0.0) {
                    return Err(SimulationError::Invalid(format!("hold period must be positive, got {hold}")));
                }
                let count = ((duration / hold).ceil() as usize).max(1) + 1;
                let values = (0..count)
                    .map(|_| {
                        (0..m)
                            .map(|j| uniform(&mut rng, self.lower[j], self.upper[j]))
                            .collect()
                    })
                    .collect();
                Ok(InputSchedule::Held { hold, values })
            }
            SignalKind::MultiSine { components, max_frequency } => {
                let k = (*components).max(1);
                let waves = (0..m)
                    .map(|j| {
                        let mid = 0.5 * (self.lower[j] + self.upper[j]);
                        let amp = 0.5 * (self.upper[j] - self.lower[j]) / k as f64;
                        let comps = (0..k)
                            .map(|_| {
                                let f = rng.random::<f64>() * max_frequency;
                                let phase = rng.random::<f64>() * std::f64::consts::TAU;
                                (amp, f, phase)
                            })
                            .collect();
                        (mid, comps)
                    })
                    .collect();
                Ok(InputSchedule::Sines { waves })
            }
            SignalKind::Table { times, values } => {
                if times.is_empty() || times.len() != values.len() {
                    return Err(SimulationError::Invalid("input table needs matching non-empty times/values".into()));
                }
                if values.iter().any(|v| v.len() != m) {
                    return Err(SimulationError::Dimension("input table row length differs from m".into()));
                }
                if times.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(SimulationError::Invalid("input table times must increase".into()));
                }
                let clamped = values
                    .iter()
                    .map(|row| {
                        row.iter()
                            .enumerate()
                            .map(|(j, v)| v.clamp(self.lower[j], self.upper[j]))
                            .collect()
                    })
                    .collect();
                Ok(InputSchedule::Table { times: times.clone(), values: clamped })
            }
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// A realized excitation signal.
#[derive(Debug, Clone, PartialEq)]
pub enum InputSchedule {
    Held { hold: f64, values: Vec<Vec<f64>> },
    Sines { waves: Vec<(f64, Vec<(f64, f64, f64)>)> },
    Table { times: Vec<f64>, values: Vec<Vec<f64>> },
}

impl InputSchedule {
    pub fn value_at(&self, t: f64) -> DVector<f64> {
        match self {
            InputSchedule::Held { hold, values } => {
                // Tolerate round-off at the hold boundaries.
                let k = ((t / hold) + 1e-9).floor().max(0.0) as usize;
                DVector::from_column_slice(&values[k.min(values.len() - 1)])
            }
            InputSchedule::Sines { waves } => DVector::from_iterator(
                waves.len(),
                waves.iter().map(|(mid, comps)| {
                    mid + comps
                        .iter()
                        .map(|(a, f, ph)| a * (std::f64::consts::TAU * f * t + ph).sin())
                        .sum::<f64>()
                }),
            ),
            InputSchedule::Table { times, values } => {
                let k = times.partition_point(|&s| s <= t + 1e-12).saturating_sub(1);
                DVector::from_column_slice(&values[k])
            }
        }
    }
}

/// One sample `(t, x, u, x')`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t: f64,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub dx: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerivativeSource {
    /// `x'` evaluated from the model at the sample.
    Exact,
    /// `x'` estimated by finite differences.
    Approximate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum Provenance {
    Simulated {
        system: String,
        params: BTreeMap<String, f64>,
        seed: u64,
        x0: Vec<f64>,
        substeps: usize,
    },
    External { path: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub n: usize,
    pub m: usize,
    pub sample_period: f64,
    pub derivatives: DerivativeSource,
    pub provenance: Provenance,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Checks dimensions and strictly increasing timestamps.
    pub fn validate(&self) -> Result<(), SimulationError> {
        for (i, s) in self.samples.iter().enumerate() {
            if s.x.len() != self.n || s.dx.len() != self.n || s.u.len() != self.m {
                return Err(SimulationError::Dimension(format!("sample {i} has inconsistent lengths")));
            }
            if i > 0 && !(s.t > self.samples[i - 1].t) {
                return Err(SimulationError::Malformed(format!("timestamp of sample {i} does not increase")));
            }
        }
        Ok(())
    }

    pub fn csv_header(n: usize, m: usize) -> Vec<String> {
        let mut h = vec!["t".to_string()];
        h.extend((1..=n).map(|i| format!("x{i}")));
        h.extend((1..=m).map(|i| format!("u{i}")));
        h.extend((1..=n).map(|i| format!("dx{i}")));
        h
    }

    /// Writes `t,x1..xn,u1..um,dx1..dxn` with 17 significant digits.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), SimulationError> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(Self::csv_header(self.n, self.m))?;
        for s in &self.samples {
            let row: Vec<String> = std::iter::once(s.t)
                .chain(s.x.iter().copied())
                .chain(s.u.iter().copied())
                .chain(s.dx.iter().copied())
                .map(fmt17)
                .collect();
            wr.write_record(&row)?;
        }
        wr.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Reads a dataset CSV. Missing `dx` columns are estimated with
    /// [`estimate_derivatives`].
    pub fn read_csv<R: Read>(r: R, provenance: Provenance) -> Result<Self, SimulationError> {
        let mut rd = csv::Reader::from_reader(r);
        let header: Vec<String> = rd.headers()?.iter().map(|h| h.trim().to_string()).collect();
        let count = |prefix: &str| {
            header
                .iter()
                .filter(|h| h.strip_prefix(prefix).is_some_and(|r| r.parse::<usize>().is_ok()))
                .count()
        };
        let n = count("x");
        let m = count("u");
        let ndx = count("dx");
        if header.first().map(String::as_str) != Some("t") || n == 0 {
            return Err(SimulationError::Malformed("header must start with t,x1..".into()));
        }
        if ndx != 0 && ndx != n {
            return Err(SimulationError::Malformed(format!("{ndx} dx columns for {n} states")));
        }
        if header != Self::csv_header(n, m)[..1 + n + m + ndx] {
            return Err(SimulationError::Malformed(format!("unexpected column order {header:?}")));
        }
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|v| v.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| SimulationError::Malformed(e.to_string()))?;
            if vals.len() != header.len() {
                return Err(SimulationError::Malformed("row length differs from header".into()));
            }
            rows.push(vals);
        }
        let period = if rows.len() > 1 { rows[1][0] - rows[0][0] } else { 0.0 };
        if ndx == 0 {
            let traj: Vec<(f64, Vec<f64>, Vec<f64>)> = rows
                .iter()
                .map(|r| (r[0], r[1..1 + n].to_vec(), r[1 + n..1 + n + m].to_vec()))
                .collect();
            let mut ds = estimate_derivatives(&traj)?;
            ds.provenance = provenance;
            return Ok(ds);
        }
        let samples = rows
            .iter()
            .map(|r| Sample {
                t: r[0],
                x: r[1..1 + n].to_vec(),
                u: r[1 + n..1 + n + m].to_vec(),
                dx: r[1 + n + m..].to_vec(),
            })
            .collect();
        let ds = Dataset {
            n,
            m,
            sample_period: period,
            derivatives: DerivativeSource::Exact,
            provenance,
            samples,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn to_json(&self) -> Result<String, SimulationError> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub(crate) fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Options for [`collect_dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct CollectOptions {
    pub duration: f64,
    pub sample_period: f64,
    pub substeps: usize,
    pub safety_box: Option<DomainBox>,
}

/// Simulates an open-loop experiment and records `L = duration / period`
/// samples at `t_i = i * period` (a single sample when `duration = 0`).
///
/// The stored derivative is the model evaluation `f(x_i) + g(x_i) u_i`.
pub fn collect_dataset(
    sys: &ControlAffineSystem,
    x0: &[f64],
    signal: &ExcitationSignal,
    opts: &CollectOptions,
) -> Result<Dataset, SimulationError> {
    if x0.len() != sys.n() {
        return Err(SimulationError::Dimension(format!("x0 has {} entries, system n = {}", x0.len(), sys.n())));
    }
    if signal.m() != sys.m() {
        return Err(SimulationError::Dimension(format!("excitation has {} inputs, system m = {}", signal.m(), sys.m())));
    }
    if opts.substeps < 1 {
        return Err(SimulationError::Invalid("substeps must be at least 1".into()));
    }
    if !(opts.sample_period > 0.0) || !(opts.duration >= 0.0) {
        return Err(SimulationError::Invalid("sample period must be positive and duration non-negative".into()));
    }
    let ratio = opts.duration / opts.sample_period;
    let count = ratio.round();
    if (ratio - count).abs() > 1e-9 * ratio.max(1.0) {
        return Err(SimulationError::NonIntegerSampleCount {
            duration: opts.duration,
            period: opts.sample_period,
        });
    }
    let count = (count as usize).max(1);
    let schedule = signal.realize(opts.duration, opts.sample_period)?;
    let h = opts.sample_period / opts.substeps as f64;
    let field = |x: &DVector<f64>, u: &DVector<f64>| sys.vector_field(x.as_slice(), u.as_slice());

    let mut x = DVector::from_column_slice(x0);
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let t = i as f64 * opts.sample_period;
        check_state(&x, t, opts.safety_box.as_ref())?;
        let u = schedule.value_at(t);
        let dx = sys.vector_field(x.as_slice(), u.as_slice());
        if dx.iter().any(|v| !v.is_finite()) {
            return Err(SimulationError::NonFinite { t });
        }
        samples.push(Sample {
            t,
            x: x.as_slice().to_vec(),
            u: u.as_slice().to_vec(),
            dx: dx.as_slice().to_vec(),
        });
        if i + 1 == count {
            break;
        }
        for k in 0..opts.substeps {
            let ts = t + k as f64 * h;
            let uk = schedule.value_at(ts);
            x = rk4_step(field, &x, &uk, h).map_err(|_| SimulationError::NonFinite { t: ts })?;
            check_state(&x, ts + h, opts.safety_box.as_ref())?;
        }
    }
    Ok(Dataset {
        n: sys.n(),
        m: sys.m(),
        sample_period: opts.sample_period,
        derivatives: DerivativeSource::Exact,
        provenance: Provenance::Simulated {
            system: sys.name().to_string(),
            params: sys.params().clone(),
            seed: signal.seed,
            x0: x0.to_vec(),
            substeps: opts.substeps,
        },
        samples,
    })
}

fn check_state(x: &DVector<f64>, t: f64, safety: Option<&DomainBox>) -> Result<(), SimulationError> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(SimulationError::NonFinite { t });
    }
    if let Some(b) = safety {
        if !b.contains(x.as_slice()) {
            return Err(SimulationError::Escaped { t, state: x.as_slice().to_vec() });
        }
    }
    Ok(())
}

/// Draws `x0` uniformly from `[lower, upper]` on a stream separate from the
/// excitation draws of the same seed.
pub fn draw_initial_state(lower: &[f64], upper: &[f64], seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    lower.iter().zip(upper).map(|(lo, hi)| uniform(&mut rng, *lo, *hi)).collect()
}

/// Finite-difference derivatives for trajectories without recorded `x'`.
///
/// Central differences in the interior; third-order one-sided stencils at
/// the ends (second-order with exactly three samples).
pub fn estimate_derivatives(traj: &[(f64, Vec<f64>, Vec<f64>)]) -> Result<Dataset, SimulationError> {
    if traj.len() < 3 {
        return Err(SimulationError::TooFewSamples { needed: 3, got: traj.len() });
    }
    let n = traj[0].1.len();
    let m = traj[0].2.len();
    if traj.iter().any(|(_, x, u)| x.len() != n || u.len() != m) {
        return Err(SimulationError::Dimension("trajectory rows differ in length".into()));
    }
    let h = traj[1].0 - traj[0].0;
    if !(h > 0.0) {
        return Err(SimulationError::NonUniformTimestamps { index: 1 });
    }
    for i in 1..traj.len() {
        let d = traj[i].0 - traj[i - 1].0;
        if (d - h).abs() > 1e-9 * h.max(traj[i].0.abs()) {
            return Err(SimulationError::NonUniformTimestamps { index: i });
        }
    }
    let len = traj.len();
    let x = |i: usize, j: usize| traj[i].1[j];
    let samples = (0..len)
        .map(|i| {
            let dx = (0..n)
                .map(|j| {
                    if i > 0 && i + 1 < len {
                        (x(i + 1, j) - x(i - 1, j)) / (2.0 * h)
                    } else if len >= 4 {
                        if i == 0 {
                            (-11.0 * x(0, j) + 18.0 * x(1, j) - 9.0 * x(2, j) + 2.0 * x(3, j)) / (6.0 * h)
                        } else {
                            let k = len - 1;
                            (11.0 * x(k, j) - 18.0 * x(k - 1, j) + 9.0 * x(k - 2, j) - 2.0 * x(k - 3, j))
                                / (6.0 * h)
                        }
                    } else if i == 0 {
                        (-3.0 * x(0, j) + 4.0 * x(1, j) - x(2, j)) / (2.0 * h)
                    } else {
                        (3.0 * x(2, j) - 4.0 * x(1, j) + x(0, j)) / (2.0 * h)
                    }
                })
                .collect();
            Sample {
                t: traj[i].0,
                x: traj[i].1.clone(),
                u: traj[i].2.clone(),
                dx,
            }
        })
        .collect();
    Ok(Dataset {
        n,
        m,
        sample_period: h,
        derivatives: DerivativeSource::Approximate,
        provenance: Provenance::External { path: String::new() },
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decay(x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        -x
    }

    #[test]
    fn rk4_exponential_decay() {
        let x = rk4_step(decay, &DVector::from_element(1, 1.0), &DVector::zeros(0), 0.1).unwrap();
        // closed form e^{-0.1}
        assert!((x[0] - (-0.1f64).exp()).abs() < 1e-7);
        assert!((x[0] - 0.904_837_42).abs() < 1e-7);
    }

    #[test]
    fn rk4_zero_field_and_integrator() {
        let zero = |x: &DVector<f64>, _: &DVector<f64>| DVector::zeros(x.len());
        let x0 = DVector::from_vec(vec![0.3, -2.0]);
        assert_eq!(rk4_step(zero, &x0, &DVector::zeros(0), 0.7).unwrap(), x0);
        let integ = |_: &DVector<f64>, u: &DVector<f64>| u.clone();
        let x = rk4_step(integ, &DVector::zeros(1), &DVector::from_element(1, 1.0), 0.5).unwrap();
        assert_eq!(x[0], 0.5);
    }

    #[test]
    fn rk4_rejects_bad_step_and_non_finite() {
        assert!(matches!(
            rk4_step(decay, &DVector::from_element(1, 1.0), &DVector::zeros(0), 0.0),
            Err(SimulationError::NonPositiveStep(_))
        ));
        let blow = |x: &DVector<f64>, _: &DVector<f64>| x.map(|_| f64::NAN);
        assert!(rk4_step(blow, &DVector::from_element(1, 1.0), &DVector::zeros(0), 0.1).is_err());
    }

    #[test]
    fn rk4_global_error_ratio() {
        let err = |steps: usize| {
            let h = 1.0 / steps as f64;
            let mut x = DVector::from_element(1, 1.0);
            for _ in 0..steps {
                x = rk4_step(decay, &x, &DVector::zeros(0), h).unwrap();
            }
            (x[0] - (-1.0f64).exp()).abs()
        };
        let ratio = err(10) / err(20);
        assert!((12.0..=20.0).contains(&ratio), "ratio {ratio}");
    }

    fn ex2_opts() -> CollectOptions {
        CollectOptions {
            duration: 10.0,
            sample_period: 0.1,
            substeps: 10,
            safety_box: Some(DomainBox::symmetric(2, 10.0)),
        }
    }

    #[test]
    fn example2_collects_100_samples_with_exact_derivatives() {
        let sys = ControlAffineSystem::example1(-0.5, 0.2);
        let sig = ExcitationSignal::piecewise_uniform(vec![-0.1], vec![0.1], 3);
        let x0 = draw_initial_state(&[-0.1, -0.1], &[0.1, 0.1], 3);
        let ds = collect_dataset(&sys, &x0, &sig, &ex2_opts()).unwrap();
        assert_eq!(ds.len(), 100);
        ds.validate().unwrap();
        for s in &ds.samples {
            assert!(s.u[0].abs() <= 0.1);
            assert_eq!(sys.vector_field(&s.x, &s.u).as_slice(), s.dx.as_slice());
        }
        assert!((ds.samples[99].t - 9.9).abs() < 1e-12);
    }

    #[test]
    fn zero_duration_gives_initial_sample() {
        let sys = ControlAffineSystem::example1(-0.5, 0.2);
        let sig = ExcitationSignal::piecewise_uniform(vec![-0.1], vec![0.1], 0);
        let opts = CollectOptions { duration: 0.0, ..ex2_opts() };
        let ds = collect_dataset(&sys, &[0.05, 0.02], &sig, &opts).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.samples[0].x, vec![0.05, 0.02]);
    }

    #[test]
    fn pure_integrator_is_exact() {
        let sys = ControlAffineSystem::linear(DMatrix::zeros(2, 2), DMatrix::identity(2, 2));
        let sig = ExcitationSignal::piecewise_uniform(vec![0.3, -0.2], vec![0.3, -0.2], 0);
        let opts = CollectOptions {
            duration: 1.0,
            sample_period: 0.25,
            substeps: 3,
            safety_box: None,
        };
        let ds = collect_dataset(&sys, &[1.0, 2.0], &sig, &opts).unwrap();
        assert_eq!(ds.len(), 4);
        for s in &ds.samples {
            // closed form x(t) = x0 + t u
            assert!((s.x[0] - (1.0 + 0.3 * s.t)).abs() < 1e-14);
            assert!((s.x[1] - (2.0 - 0.2 * s.t)).abs() < 1e-14);
        }
    }

    #[test]
    fn escape_and_bad_sample_count() {
        let sys = ControlAffineSystem::linear(DMatrix::from_element(1, 1, 5.0), DMatrix::zeros(1, 1));
        let sig = ExcitationSignal::piecewise_uniform(vec![0.0], vec![0.0], 0);
        let opts = CollectOptions {
            duration: 10.0,
            sample_period: 0.1,
            substeps: 10,
            safety_box: Some(DomainBox::symmetric(1, 10.0)),
        };
        match collect_dataset(&sys, &[1.0], &sig, &opts) {
            Err(SimulationError::Escaped { t, .. }) => assert!(t > 0.4 && t < 0.5, "t = {t}"),
            other => panic!("expected escape, got {other:?}"),
        }
        let opts = CollectOptions { duration: 1.05, sample_period: 0.1, ..opts };
        assert!(matches!(
            collect_dataset(&sys, &[1.0], &sig, &opts),
            Err(SimulationError::NonIntegerSampleCount { .. })
        ));
    }

    #[test]
    fn same_seed_same_dataset() {
        let sys = ControlAffineSystem::example1(-0.5, 0.2);
        let sig = ExcitationSignal::piecewise_uniform(vec![-0.1], vec![0.1], 11);
        let a = collect_dataset(&sys, &[0.01, 0.02], &sig, &ex2_opts()).unwrap();
        let b = collect_dataset(&sys, &[0.01, 0.02], &sig, &ex2_opts()).unwrap();
        let (mut ca, mut cb) = (Vec::new(), Vec::new());
        a.write_csv(&mut ca).unwrap();
        b.write_csv(&mut cb).unwrap();
        assert_eq!(ca, cb);
        let sig2 = ExcitationSignal { seed: 12, ..sig };
        let c = collect_dataset(&sys, &[0.01, 0.02], &sig2, &ex2_opts()).unwrap();
        assert_ne!(a.samples[5].u, c.samples[5].u);
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let sys = ControlAffineSystem::example1(-0.5, 0.2);
        let sig = ExcitationSignal::piecewise_uniform(vec![-0.1], vec![0.1], 5);
        let ds = collect_dataset(&sys, &[0.03, -0.07], &sig, &ex2_opts()).unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,x1,x2,u1,dx1,dx2\n"));
        let back = Dataset::read_csv(&buf[..], ds.provenance.clone()).unwrap();
        assert_eq!(back.samples, ds.samples);
    }

    #[test]
    fn multisine_and_table_signals_are_bounded() {
        let sig = ExcitationSignal {
            kind: SignalKind::MultiSine { components: 4, max_frequency: 2.0 },
            lower: vec![-0.1],
            upper: vec![0.3],
            hold: None,
            seed: 2,
        };
        let s = sig.realize(5.0, 0.1).unwrap();
        for k in 0..500 {
            let u = s.value_at(k as f64 * 0.01)[0];
            assert!((-0.1 - 1e-12..=0.3 + 1e-12).contains(&u));
        }
        let sig = ExcitationSignal {
            kind: SignalKind::Table { times: vec![0.0, 1.0], values: vec![vec![0.5], vec![-2.0]] },
            lower: vec![-1.0],
            upper: vec![1.0],
            hold: None,
            seed: 0,
        };
        let s = sig.realize(2.0, 0.1).unwrap();
        assert_eq!(s.value_at(0.5)[0], 0.5);
        assert_eq!(s.value_at(1.5)[0], -1.0);
    }

    #[test]
    fn derivatives_of_quadratic_and_constant() {
        let traj: Vec<_> = (0..11)
            .map(|i| {
                let t = i as f64 * 0.1;
                (t, vec![t * t, 3.0], vec![0.0])
            })
            .collect();
        let ds = estimate_derivatives(&traj).unwrap();
        assert_eq!(ds.derivatives, DerivativeSource::Approximate);
        assert!((ds.samples[5].dx[0] - 1.0).abs() < 1e-12);
        assert!(ds.samples.iter().all(|s| s.dx[1] == 0.0));
        // cubic stencil is exact on the quadratic at the ends too
        assert!(ds.samples[0].dx[0].abs() < 1e-12);
        assert!((ds.samples[10].dx[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn derivatives_of_sine() {
        let h = 0.01;
        let traj: Vec<_> = (0..=300)
            .map(|i| {
                let t = i as f64 * h;
                (t, vec![t.sin()], vec![])
            })
            .collect();
        let ds = estimate_derivatives(&traj).unwrap();
        let max_err = ds
            .samples
            .iter()
            .map(|s| (s.dx[0] - s.t.cos()).abs())
            .fold(0.0, f64::max);
        // interior bound h^2/6
        assert!(max_err <= 2e-5, "max error {max_err}");
    }

    #[test]
    fn derivative_errors() {
        let short = vec![(0.0, vec![1.0], vec![]), (0.1, vec![1.0], vec![])];
        assert!(matches!(estimate_derivatives(&short), Err(SimulationError::TooFewSamples { .. })));
        let uneven = vec![
            (0.0, vec![1.0], vec![]),
            (0.1, vec![1.0], vec![]),
            (0.3, vec![1.0], vec![]),
        ];
        assert!(matches!(
            estimate_derivatives(&uneven),
            Err(SimulationError::NonUniformTimestamps { index: 2 })
        ));
    }

    #[test]
    fn csv_without_derivatives_is_estimated() {
        let text = "t,x1,u1\n0,0,0\n0.5,0.25,0\n1,1,0\n1.5,2.25,0\n";
        let ds = Dataset::read_csv(text.as_bytes(), Provenance::External { path: "mem".into() }).unwrap();
        assert_eq!(ds.derivatives, DerivativeSource::Approximate);
        assert!((ds.samples[1].dx[0] - 1.0).abs() < 1e-12);
        assert!(matches!(ds.provenance, Provenance::External { .. }));
    }

    #[test]
    fn builtin_lookup() {
        let params = BTreeMap::from([("mu".into(), -0.5), ("lambda".into(), 0.2)]);
        let sys = ControlAffineSystem::builtin("example1", &params).unwrap();
        assert_eq!(sys.vector_field(&[1.0, 2.0], &[3.0]).as_slice(), &[2.5, 3.2]);
        assert!(ControlAffineSystem::builtin("vanderpol", &params).is_err());
        assert!(ControlAffineSystem::builtin("example1", &BTreeMap::new()).is_err());
        let lin = BTreeMap::from([
            ("n".into(), 2.0),
            ("m".into(), 1.0),
            ("a12".into(), 1.0),
            ("b21".into(), 1.0),
        ]);
        let sys = ControlAffineSystem::builtin("linear", &lin).unwrap();
        assert_eq!(sys.vector_field(&[1.0, 2.0], &[3.0]).as_slice(), &[2.0, 3.0]);
    }
}
