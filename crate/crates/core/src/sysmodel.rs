//! Switched systems, τ-periodic switching signals with bounded delays, and
//! piecewise RK4 integration that lands exactly on switching instants.

use std::fmt;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{ExprError, Expression};

/// States whose magnitude exceeds this are treated as a blow-up.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Mode(pub usize);

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid system: {0}")]
    InvalidSystem(String),
    #[error("invalid signal: {0}")]
    InvalidSignal(String),
    #[error("vector field of mode {mode} failed at t = {time}: {source}")]
    Field {
        mode: Mode,
        time: f64,
        #[source]
        source: ExprError,
    },
    #[error("integration diverged at t = {time}")]
    Diverged { time: f64 },
    #[error("trajectory csv: {0}")]
    Csv(String),
}

/// Per-mode vector field.
#[derive(Debug, Clone)]
pub enum VectorField {
    /// `f(x) = A x + b`.
    Affine { a: DMatrix<f64>, b: DVector<f64> },
    /// One expression per coordinate, each over `x1..xn`.
    Expr(Vec<Expression>),
}

impl VectorField {
    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) -> Result<(), ExprError> {
        match self {
            VectorField::Affine { a, b } => {
                let n = b.len();
                for i in 0..n {
                    let mut acc = b[i];
                    for j in 0..n {
                        acc += a[(i, j)] * x[j];
                    }
                    out[i] = acc;
                }
                Ok(())
            }
            VectorField::Expr(components) => {
                for (o, e) in out.iter_mut().zip(components) {
                    *o = e.eval(x)?;
                }
                Ok(())
            }
        }
    }

    fn dim(&self) -> usize {
        match self {
            VectorField::Affine { b, .. } => b.len(),
            VectorField::Expr(c) => c.len(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModeSpec {
    pub name: String,
    pub field: VectorField,
}

/// A finite family of vector fields on `R^n` indexed by modes `0..m`.
#[derive(Debug, Clone)]
pub struct SwitchedSystem {
    dim: usize,
    modes: Vec<ModeSpec>,
}

impl SwitchedSystem {
    pub fn new(dim: usize, modes: Vec<ModeSpec>) -> Result<Self, ModelError> {
        if dim == 0 {
            return Err(ModelError::InvalidSystem("dimension must be positive".into()));
        }
        if modes.is_empty() {
            return Err(ModelError::InvalidSystem("at least one mode is required".into()));
        }
        for m in &modes {
            if m.field.dim() != dim {
                return Err(ModelError::InvalidSystem(format!(
                    "mode `{}` has {} components, expected {dim}",
                    m.name,
                    m.field.dim()
                )));
            }
            if let VectorField::Affine { a, .. } = &m.field {
                if a.nrows() != dim || a.ncols() != dim {
                    return Err(ModelError::InvalidSystem(format!(
                        "mode `{}` matrix is {}x{}, expected {dim}x{dim}",
                        m.name,
                        a.nrows(),
                        a.ncols()
                    )));
                }
            }
            if let VectorField::Expr(components) = &m.field {
                if components.iter().any(|e| e.vars().len() != dim) {
                    return Err(ModelError::InvalidSystem(format!(
                        "mode `{}` expressions must be over exactly {dim} variables",
                        m.name
                    )));
                }
            }
        }
        let mut names: Vec<&str> = modes.iter().map(|m| m.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != modes.len() {
            return Err(ModelError::InvalidSystem("mode names must be unique".into()));
        }
        Ok(SwitchedSystem { dim, modes })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_modes(&self) -> usize {
        self.modes.len()
    }

    pub fn modes(&self) -> impl Iterator<Item = Mode> + '_ {
        (0..self.modes.len()).map(Mode)
    }

    pub fn mode_spec(&self, p: Mode) -> &ModeSpec {
        &self.modes[p.0]
    }

    pub fn mode_name(&self, p: Mode) -> &str {
        &self.modes[p.0].name
    }

    pub fn mode_by_name(&self, name: &str) -> Option<Mode> {
        self.modes.iter().position(|m| m.name == name).map(Mode)
    }

    pub fn is_affine(&self) -> bool {
        self.modes.iter().all(|m| matches!(m.field, VectorField::Affine { .. }))
    }

    pub fn field(&self, p: Mode, x: &[f64], out: &mut [f64]) -> Result<(), ExprError> {
        self.modes[p.0].field.eval_into(x, out)
    }

    pub fn field_vec(&self, p: Mode, x: &[f64]) -> Result<Vec<f64>, ExprError> {
        let mut out = vec![0.0; self.dim];
        self.field(p, x, &mut out)?;
        Ok(out)
    }
}

/// Piecewise-constant, right-continuous mode schedule that is τ-periodic
/// with switching delays within `delay_bound`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchingSignal {
    period: f64,
    delay_bound: f64,
    events: Vec<(f64, Mode)>,
    horizon: f64,
}

fn periods_for(period: f64, horizon: f64) -> usize {
    ((horizon / period) - 1e-9).ceil().max(1.0) as usize
}

impl SwitchingSignal {
    /// Events at `0, τ, 2τ, …` carrying `modes[k]` on `[kτ, (k+1)τ)`.
    pub fn periodic(period: f64, modes: &[Mode], horizon: f64) -> Result<Self, ModelError> {
        if !(period > 0.0) || !period.is_finite() {
            return Err(ModelError::InvalidSignal("period must be positive".into()));
        }
        if modes.is_empty() {
            return Err(ModelError::InvalidSignal("mode sequence is empty".into()));
        }
        if !(horizon >= period * (1.0 - 1e-12)) || !horizon.is_finite() {
            return Err(ModelError::InvalidSignal("horizon must be at least one period".into()));
        }
        let needed = periods_for(period, horizon);
        if modes.len() < needed {
            return Err(ModelError::InvalidSignal(format!(
                "mode sequence too short: {} modes for {needed} periods",
                modes.len()
            )));
        }
        let events = modes[..needed]
            .iter()
            .enumerate()
            .map(|(k, &p)| (k as f64 * period, p))
            .collect();
        Ok(SwitchingSignal {
            period,
            delay_bound: 0.0,
            events,
            horizon,
        })
    }

    /// Shifts the event at `kτ` (k ≥ 1) to `kτ + delays[k-1]`.
    pub fn delayed(&self, delay_bound: f64, delays: &[f64]) -> Result<Self, ModelError> {
        if self.delay_bound != 0.0 {
            return Err(ModelError::InvalidSignal("base signal must be delay-free".into()));
        }
        if !(delay_bound >= 0.0) || delay_bound >= self.period {
            return Err(ModelError::InvalidSignal(format!(
                "delay bound {delay_bound} must lie in [0, period = {})",
                self.period
            )));
        }
        if delays.len() != self.events.len() - 1 {
            return Err(ModelError::InvalidSignal(format!(
                "expected {} delays, got {}",
                self.events.len() - 1,
                delays.len()
            )));
        }
        if let Some((k, d)) = delays
            .iter()
            .enumerate()
            .find(|(_, &d)| !(0.0..=delay_bound).contains(&d))
        {
            return Err(ModelError::InvalidSignal(format!(
                "delay {d} for switch {} is outside [0, {delay_bound}]",
                k + 1
            )));
        }
        let mut events = self.events.clone();
        for (ev, d) in events.iter_mut().skip(1).zip(delays) {
            ev.0 += d;
        }
        Ok(SwitchingSignal {
            period: self.period,
            delay_bound,
            events,
            horizon: self.horizon,
        })
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn delay_bound(&self) -> f64 {
        self.delay_bound
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn events(&self) -> &[(f64, Mode)] {
        &self.events
    }

    /// Mode sequence, one entry per period.
    pub fn modes(&self) -> Vec<Mode> {
        self.events.iter().map(|e| e.1).collect()
    }

    /// Mode of the last event with time ≤ `t`.
    pub fn mode_at(&self, t: f64) -> Mode {
        let idx = self.events.partition_point(|e| e.0 <= t);
        self.events[idx.saturating_sub(1)].1
    }

    /// Event times at which the mode actually changes.
    pub fn switching_times(&self) -> Vec<f64> {
        self.events
            .windows(2)
            .filter(|w| w[0].1 != w[1].1)
            .map(|w| w[1].0)
            .collect()
    }
}

/// Fixed-step RK4 flow under a constant mode; the last step is shortened so
/// the endpoint is exactly `duration`.
pub fn flow_constant(
    sys: &SwitchedSystem,
    x0: &[f64],
    p: Mode,
    duration: f64,
    dt: f64,
) -> Result<Vec<f64>, ModelError> {
    let mut x = x0.to_vec();
    if duration <= 0.0 {
        return Ok(x);
    }
    let mut ws = Rk4Workspace::new(sys.dim());
    let n = ((duration / dt) - 1e-9).ceil().max(1.0) as usize;
    let last = duration - (n - 1) as f64 * dt;
    for k in 0..n {
        let h = if k + 1 == n { last } else { dt };
        ws.step(sys, p, &mut x, h, k as f64 * dt)?;
    }
    Ok(x)
}

struct Rk4Workspace {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4Workspace {
    fn new(n: usize) -> Self {
        Rk4Workspace {
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            k4: vec![0.0; n],
            tmp: vec![0.0; n],
        }
    }

    fn step(&mut self, sys: &SwitchedSystem, p: Mode, x: &mut [f64], h: f64, t: f64) -> Result<(), ModelError> {
        let field_err = |source| ModelError::Field {
            mode: p,
            time: t,
            source,
        };
        sys.field(p, x, &mut self.k1).map_err(field_err)?;
        for i in 0..x.len() {
            self.tmp[i] = x[i] + 0.5 * h * self.k1[i];
        }
        sys.field(p, &self.tmp, &mut self.k2).map_err(field_err)?;
        for i in 0..x.len() {
            self.tmp[i] = x[i] + 0.5 * h * self.k2[i];
        }
        sys.field(p, &self.tmp, &mut self.k3).map_err(field_err)?;
        for i in 0..x.len() {
            self.tmp[i] = x[i] + h * self.k3[i];
        }
        sys.field(p, &self.tmp, &mut self.k4).map_err(field_err)?;
        for i in 0..x.len() {
            x[i] += h / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
        if x.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT) {
            return Err(ModelError::Diverged { time: t + h });
        }
        Ok(())
    }
}

/// Sampled trajectory stored row-major: sample `i` occupies
/// `states[i*dim .. (i+1)*dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    dim: usize,
    step: f64,
    times: Vec<f64>,
    states: Vec<f64>,
    modes: Vec<Mode>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn step_size(&self) -> f64 {
        self.step
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn modes(&self) -> &[Mode] {
        &self.modes
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn final_state(&self) -> &[f64] {
        self.state(self.len() - 1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, &[f64], Mode)> + '_ {
        (0..self.len()).map(move |i| (self.times[i], self.state(i), self.modes[i]))
    }

    /// Writes `t,x1,...,xn,mode` rows with 17 significant digits.
    pub fn write_csv<W: Write>(&self, sys: &SwitchedSystem, out: W) -> Result<(), ModelError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.dim).map(|i| format!("x{i}")));
        header.push("mode".into());
        w.write_record(&header).map_err(|e| ModelError::Csv(e.to_string()))?;
        for (t, x, p) in self.iter() {
            let mut row = vec![format!("{t:.16e}")];
            row.extend(x.iter().map(|v| format!("{v:.16e}")));
            row.push(sys.mode_name(p).to_string());
            w.write_record(&row).map_err(|e| ModelError::Csv(e.to_string()))?;
        }
        w.flush().map_err(|e| ModelError::Csv(e.to_string()))
    }

    /// Reads the format produced by [`Trajectory::write_csv`].
    pub fn read_csv<R: Read>(sys: &SwitchedSystem, input: R) -> Result<Self, ModelError> {
        let err = |m: String| ModelError::Csv(m);
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers().map_err(|e| err(e.to_string()))?.clone();
        let dim = sys.dim();
        let mut expected = vec!["t".to_string()];
        expected.extend((1..=dim).map(|i| format!("x{i}")));
        expected.push("mode".into());
        if header.iter().ne(expected.iter().map(String::as_str)) {
            return Err(err(format!("unexpected header {header:?}")));
        }
        let mut traj = Trajectory {
            dim,
            step: 0.0,
            times: Vec::new(),
            states: Vec::new(),
            modes: Vec::new(),
        };
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| err(e.to_string()))?;
            if rec.len() != dim + 2 {
                return Err(err(format!("row {} has {} fields", line + 1, rec.len())));
            }
            let num = |s: &str| -> Result<f64, ModelError> {
                s.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| err(format!("row {}: bad number `{s}`", line + 1)))
            };
            let t = num(&rec[0])?;
            if traj.times.last().is_some_and(|&prev| t <= prev) {
                return Err(err(format!("row {}: times must increase", line + 1)));
            }
            traj.times.push(t);
            for i in 0..dim {
                traj.states.push(num(&rec[i + 1])?);
            }
            let mode = sys
                .mode_by_name(&rec[dim + 1])
                .ok_or_else(|| err(format!("row {}: unknown mode `{}`", line + 1, &rec[dim + 1])))?;
            traj.modes.push(mode);
        }
        if traj.times.first().is_some_and(|&t| t != 0.0) {
            return Err(err("first sample must be at t = 0".into()));
        }
        if traj.times.len() >= 2 {
            traj.step = traj.times.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
        }
        Ok(traj)
    }
}

/// Sample times: multiples of `dt`, every event time of `sig` below `t_end`,
/// any `extra` times, and `t_end`. Grid points within 1e-9·dt of a
/// distinguished time are dropped in favour of it.
fn sample_grid(sig: &SwitchingSignal, t_end: f64, dt: f64, extra: &[f64]) -> Vec<f64> {
    let mut marks: Vec<f64> = sig
        .events()
        .iter()
        .map(|e| e.0)
        .chain(extra.iter().copied())
        .filter(|&t| t >= 0.0 && t <= t_end)
        .collect();
    marks.push(t_end);
    marks.sort_by(f64::total_cmp);
    marks.dedup();
    let tol = 1e-9 * dt;
    let n = (t_end / dt + 1e-9).floor() as usize;
    let mut out = Vec::with_capacity(n + marks.len() + 1);
    let mut m = 0;
    for k in 0..=n {
        let g = k as f64 * dt;
        while m < marks.len() && marks[m] < g - tol {
            out.push(marks[m]);
            m += 1;
        }
        if m < marks.len() && (marks[m] - g).abs() <= tol {
            continue;
        }
        if g <= t_end {
            out.push(g);
        }
    }
    out.extend_from_slice(&marks[m..]);
    out.dedup();
    out
}

/// Simulates `sig` from `x0` up to `t_end`, splitting exactly at every
/// event time.
pub fn simulate(
    sys: &SwitchedSystem,
    sig: &SwitchingSignal,
    x0: &[f64],
    t_end: f64,
    dt: f64,
) -> Result<Trajectory, ModelError> {
    simulate_with_samples(sys, sig, x0, t_end, dt, &[])
}

/// Like [`simulate`], additionally sampling at the given `extra` times.
pub fn simulate_with_samples(
    sys: &SwitchedSystem,
    sig: &SwitchingSignal,
    x0: &[f64],
    t_end: f64,
    dt: f64,
    extra: &[f64],
) -> Result<Trajectory, ModelError> {
    if t_end > sig.horizon() * (1.0 + 1e-12) {
        return Err(ModelError::InvalidSignal(format!(
            "t_end {t_end} beyond signal horizon {}",
            sig.horizon()
        )));
    }
    if !(dt > 0.0) {
        return Err(ModelError::InvalidSignal("dt must be positive".into()));
    }
    if x0.len() != sys.dim() {
        return Err(ModelError::InvalidSystem(format!(
            "initial state has {} components, expected {}",
            x0.len(),
            sys.dim()
        )));
    }
    let times = sample_grid(sig, t_end, dt, extra);
    let dim = sys.dim();
    let mut states = Vec::with_capacity(times.len() * dim);
    let mut modes = Vec::with_capacity(times.len());
    let mut ws = Rk4Workspace::new(dim);
    let mut x = x0.to_vec();
    let events = sig.events();
    let mut ev = 0;
    let mut current = events[0].1;
    for (i, &t) in times.iter().enumerate() {
        if i > 0 {
            let h = t - times[i - 1];
            ws.step(sys, current, &mut x, h, times[i - 1])?;
        }
        while ev < events.len() && events[ev].0 <= t {
            current = events[ev].1;
            ev += 1;
        }
        states.extend_from_slice(&x);
        modes.push(current);
    }
    Ok(Trajectory {
        dim,
        step: dt,
        times,
        states,
        modes,
    })
}

pub fn euclidean_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}
