//! δ-GAS Lyapunov certificates (common or multiple), class-K envelopes, and
//! sampled verification of the certificate inequalities over a box.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{self, ExprError, Expression};
use crate::sysmodel::{euclidean_distance, Mode, SwitchedSystem};

/// Sampled inequalities are accepted within this absolute slack.
pub const CHECK_SLACK: f64 = 1e-9;
/// Pairs closer than this are treated as diagonal (gradients skipped).
pub const DIAGONAL_RADIUS: f64 = 1e-6;
/// Default multiplier applied to the grid maximum in [`estimate_nu`].
pub const DEFAULT_NU_SAFETY: f64 = 1.05;

#[derive(Debug, Error)]
pub enum CertError {
    #[error("invalid class-K function: {0}")]
    InvalidClassK(String),
    #[error("value {y} is outside the range of the class-K function (s_max = {s_max}, f(s_max) = {f_max})")]
    OutOfRange { y: f64, s_max: f64, f_max: f64 },
    #[error("invalid certificate: {0}")]
    Invalid(String),
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("evaluation failed at x = {x:?}, y = {y:?}: {source}")]
    Eval {
        x: Vec<f64>,
        y: Vec<f64>,
        #[source]
        source: ExprError,
    },
    #[error(transparent)]
    Expr(#[from] ExprError),
}

/// Axis-aligned box `[lower, upper]` in state space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl StateBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, CertError> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(CertError::InvalidBox(format!(
                "bounds have lengths {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        for (i, (l, u)) in lower.iter().zip(&upper).enumerate() {
            if !(l.is_finite() && u.is_finite() && l < u) {
                return Err(CertError::InvalidBox(format!(
                    "axis {} has lower {l} not below upper {u}",
                    i + 1
                )));
            }
        }
        Ok(StateBox { lower, upper })
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.margin(x) >= 0.0
    }

    /// Smallest distance to a face; negative outside the box.
    pub fn margin(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(v, (l, u))| (v - l).min(u - v))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn is_subset_of(&self, other: &StateBox) -> bool {
        self.dim() == other.dim()
            && self.lower.iter().zip(&other.lower).all(|(a, b)| a >= b)
            && self.upper.iter().zip(&other.upper).all(|(a, b)| a <= b)
    }

    /// `per_axis` evenly spaced points per axis (corners included), last axis fastest.
    pub fn grid_points(&self, per_axis: usize) -> Vec<Vec<f64>> {
        let n = self.dim();
        let per_axis = per_axis.max(2);
        let total = per_axis.pow(n as u32);
        let mut out = Vec::with_capacity(total);
        let mut idx = vec![0usize; n];
        for _ in 0..total {
            out.push(
                (0..n)
                    .map(|i| {
                        let frac = idx[i] as f64 / (per_axis - 1) as f64;
                        self.lower[i] + frac * (self.upper[i] - self.lower[i])
                    })
                    .collect(),
            );
            for i in (0..n).rev() {
                idx[i] += 1;
                if idx[i] < per_axis {
                    break;
                }
                idx[i] = 0;
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub enum ClassKForm {
    Linear { c: f64 },
    Power { c: f64, q: f64 },
    Expr(Expression),
}

/// Strictly increasing function with value 0 at 0 on `[0, s_max]`.
#[derive(Debug, Clone)]
pub struct ClassK {
    form: ClassKForm,
    s_max: f64,
}

impl ClassK {
    pub fn linear(c: f64) -> Result<Self, CertError> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(CertError::InvalidClassK(format!(
                "linear coefficient {c} must be positive"
            )));
        }
        Ok(ClassK {
            form: ClassKForm::Linear { c },
            s_max: f64::INFINITY,
        })
    }

    pub fn identity() -> Self {
        ClassK {
            form: ClassKForm::Linear { c: 1.0 },
            s_max: f64::INFINITY,
        }
    }

    pub fn power(c: f64, q: f64, s_max: Option<f64>) -> Result<Self, CertError> {
        if !(c > 0.0 && c.is_finite() && q > 0.0 && q.is_finite()) {
            return Err(CertError::InvalidClassK(format!(
                "power form needs c, q > 0 (got {c}, {q})"
            )));
        }
        Ok(ClassK {
            form: ClassKForm::Power { c, q },
            s_max: s_max.unwrap_or(f64::INFINITY),
        })
    }

    /// Expression in `s`, checked for `f(0) = 0` and monotonicity on 64 samples.
    pub fn expression(e: Expression, s_max: f64) -> Result<Self, CertError> {
        if !(s_max > 0.0 && s_max.is_finite()) {
            return Err(CertError::InvalidClassK(
                "expression form needs a finite s_max > 0".into(),
            ));
        }
        if e.vars().len() != 1 {
            return Err(CertError::InvalidClassK(
                "expression must be in the single variable s".into(),
            ));
        }
        let f0 = e.eval(&[0.0])?;
        if f0.abs() > 1e-12 {
            return Err(CertError::InvalidClassK(format!("f(0) = {f0}, expected 0")));
        }
        let mut prev = f0;
        for i in 1..64 {
            let s = s_max * i as f64 / 63.0;
            let v = e.eval(&[s])?;
            if v < prev - 1e-12 {
                return Err(CertError::InvalidClassK(format!("decreasing near s = {s}")));
            }
            prev = v;
        }
        if prev <= f0 {
            return Err(CertError::InvalidClassK("function is constant on its domain".into()));
        }
        Ok(ClassK {
            form: ClassKForm::Expr(e),
            s_max,
        })
    }

    pub fn form(&self) -> &ClassKForm {
        &self.form
    }

    pub fn s_max(&self) -> f64 {
        self.s_max
    }

    /// Slope when the function is linear.
    pub fn linear_coefficient(&self) -> Option<f64> {
        match self.form {
            ClassKForm::Linear { c } => Some(c),
            _ => None,
        }
    }

    pub fn eval(&self, s: f64) -> Result<f64, CertError> {
        Ok(match &self.form {
            ClassKForm::Linear { c } => c * s,
            ClassKForm::Power { c, q } => c * s.powf(*q),
            ClassKForm::Expr(e) => e.eval(&[s])?,
        })
    }

    /// Inverse on `[0, f(s_max)]`; closed form where available, otherwise
    /// bisection to an absolute tolerance of 1e-12.
    pub fn inverse(&self, y: f64) -> Result<f64, CertError> {
        if !(y >= 0.0) {
            return Err(CertError::OutOfRange {
                y,
                s_max: self.s_max,
                f_max: self.eval(self.s_max).unwrap_or(f64::NAN),
            });
        }
        if y.is_infinite() {
            return Ok(f64::INFINITY);
        }
        let f_max = if self.s_max.is_finite() {
            self.eval(self.s_max)?
        } else {
            f64::INFINITY
        };
        if y > f_max {
            return Err(CertError::OutOfRange {
                y,
                s_max: self.s_max,
                f_max,
            });
        }
        match &self.form {
            ClassKForm::Linear { c } => Ok(y / c),
            ClassKForm::Power { c, q } => Ok((y / c).powf(1.0 / q)),
            ClassKForm::Expr(e) => {
                let (mut lo, mut hi) = (0.0f64, self.s_max);
                while hi - lo > 1e-12 {
                    let mid = 0.5 * (lo + hi);
                    if mid <= lo || mid >= hi {
                        break;
                    }
                    if e.eval(&[mid])? < y {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                Ok(0.5 * (lo + hi))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CertKind {
    Common,
    Multiple,
}

/// Incremental Lyapunov function `V(x, y)`.
#[derive(Debug, Clone)]
pub enum LyapunovFn {
    /// `V = sqrt((x-y)^T M (x-y))`, analytic gradient.
    Quadratic { m: DMatrix<f64> },
    /// Expression over `x1..xn, y1..yn`, finite-difference gradient.
    Expr(Expression),
}

impl LyapunovFn {
    pub fn value(&self, x: &[f64], y: &[f64]) -> Result<f64, ExprError> {
        match self {
            LyapunovFn::Quadratic { m } => Ok(quad_form(m, x, y).max(0.0).sqrt()),
            LyapunovFn::Expr(e) => {
                let mut args = Vec::with_capacity(x.len() * 2);
                args.extend_from_slice(x);
                args.extend_from_slice(y);
                e.eval(&args)
            }
        }
    }

    /// Writes `∂V/∂x` and `∂V/∂y` into `gx`, `gy`. Undefined on the diagonal.
    pub fn gradient(&self, x: &[f64], y: &[f64], gx: &mut [f64], gy: &mut [f64]) -> Result<(), ExprError> {
        let n = x.len();
        match self {
            LyapunovFn::Quadratic { m } => {
                let v = quad_form(m, x, y).max(0.0).sqrt();
                for i in 0..n {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += 0.5 * (m[(i, j)] + m[(j, i)]) * (x[j] - y[j]);
                    }
                    gx[i] = if v > 0.0 { acc / v } else { 0.0 };
                    gy[i] = -gx[i];
                }
                Ok(())
            }
            LyapunovFn::Expr(_) => {
                let sep = euclidean_distance(x, y);
                let cap = if sep > 0.0 { sep / 4.0 } else { f64::INFINITY };
                let mut xp = x.to_vec();
                let hx = (1e-6 * (1.0 + norm(x))).min(cap);
                for i in 0..n {
                    xp[i] = x[i] + hx;
                    let up = self.value(&xp, y)?;
                    xp[i] = x[i] - hx;
                    let down = self.value(&xp, y)?;
                    xp[i] = x[i];
                    gx[i] = (up - down) / (2.0 * hx);
                }
                let mut yp = y.to_vec();
                let hy = (1e-6 * (1.0 + norm(y))).min(cap);
                for i in 0..n {
                    yp[i] = y[i] + hy;
                    let up = self.value(x, &yp)?;
                    yp[i] = y[i] - hy;
                    let down = self.value(x, &yp)?;
                    yp[i] = y[i];
                    gy[i] = (up - down) / (2.0 * hy);
                }
                Ok(())
            }
        }
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn quad_form(m: &DMatrix<f64>, x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    let mut acc = 0.0;
    for i in 0..n {
        let ei = x[i] - y[i];
        for j in 0..n {
            acc += ei * m[(i, j)] * (x[j] - y[j]);
        }
    }
    acc
}

/// Common or multiple δ-GAS Lyapunov witness with aggregated constants.
#[derive(Debug, Clone)]
pub struct LyapunovCertificate {
    kind: CertKind,
    functions: Vec<LyapunovFn>,
    pub alpha_lo: ClassK,
    pub alpha_hi: ClassK,
    pub gamma: ClassK,
    pub kappa: f64,
    pub mu: f64,
    pub nu: Option<f64>,
}

impl LyapunovCertificate {
    pub fn common(
        v: LyapunovFn,
        alpha_lo: ClassK,
        alpha_hi: ClassK,
        kappa: f64,
        gamma: Option<ClassK>,
        nu: Option<f64>,
    ) -> Result<Self, CertError> {
        Self::build(CertKind::Common, vec![v], alpha_lo, alpha_hi, kappa, 1.0, gamma, nu)
    }

    /// One function per mode, in mode order.
    #[allow(clippy::too_many_arguments)]
    pub fn multiple(
        per_mode: Vec<LyapunovFn>,
        alpha_lo: ClassK,
        alpha_hi: ClassK,
        kappa: f64,
        mu: f64,
        gamma: Option<ClassK>,
        nu: Option<f64>,
    ) -> Result<Self, CertError> {
        Self::build(CertKind::Multiple, per_mode, alpha_lo, alpha_hi, kappa, mu, gamma, nu)
    }

    #[allow(clippy::too_many_arguments)]
    fn build(
        kind: CertKind,
        functions: Vec<LyapunovFn>,
        alpha_lo: ClassK,
        alpha_hi: ClassK,
        kappa: f64,
        mu: f64,
        gamma: Option<ClassK>,
        nu: Option<f64>,
    ) -> Result<Self, CertError> {
        if functions.is_empty() {
            return Err(CertError::Invalid("no Lyapunov function given".into()));
        }
        if !(kappa > 0.0 && kappa.is_finite()) {
            return Err(CertError::Invalid(format!("kappa = {kappa} must be positive")));
        }
        if !(mu >= 1.0 && mu.is_finite()) {
            return Err(CertError::Invalid(format!("mu = {mu} must be at least 1")));
        }
        if let Some(nu) = nu {
            if !(nu >= 0.0 && nu.is_finite()) {
                return Err(CertError::Invalid(format!("nu = {nu} must be nonnegative")));
            }
        }
        let gamma = gamma.unwrap_or_else(|| alpha_hi.clone());
        Ok(LyapunovCertificate {
            kind,
            functions,
            alpha_lo,
            alpha_hi,
            gamma,
            kappa,
            mu,
            nu,
        })
    }

    pub fn kind(&self) -> CertKind {
        self.kind
    }

    pub fn num_functions(&self) -> usize {
        self.functions.len()
    }

    /// The function associated with mode `p` (the shared one for common certificates).
    pub fn function(&self, p: Mode) -> &LyapunovFn {
        match self.kind {
            CertKind::Common => &self.functions[0],
            CertKind::Multiple => &self.functions[p.0],
        }
    }

    pub fn value(&self, p: Mode, x: &[f64], y: &[f64]) -> Result<f64, ExprError> {
        self.function(p).value(x, y)
    }

    pub fn check_against(&self, sys: &SwitchedSystem) -> Result<(), CertError> {
        if self.kind == CertKind::Multiple && self.functions.len() != sys.num_modes() {
            return Err(CertError::Invalid(format!(
                "multiple certificate has {} functions for {} modes",
                self.functions.len(),
                sys.num_modes()
            )));
        }
        for f in &self.functions {
            match f {
                LyapunovFn::Quadratic { m } if m.nrows() != sys.dim() || m.ncols() != sys.dim() => {
                    return Err(CertError::Invalid(format!(
                        "matrix is {}x{}, system dimension is {}",
                        m.nrows(),
                        m.ncols(),
                        sys.dim()
                    )));
                }
                LyapunovFn::Expr(e) if e.vars().len() != 2 * sys.dim() => {
                    return Err(CertError::Invalid(format!(
                        "expression must be over {} variables",
                        2 * sys.dim()
                    )));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// JSON schema

/// Class-K function as written in JSON: a bare number `c` means `c·s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClassKSpec {
    Linear(f64),
    Power {
        c: f64,
        q: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        s_max: Option<f64>,
    },
    Expr {
        expr: String,
        s_max: f64,
    },
}

impl ClassKSpec {
    pub fn compile(&self) -> Result<ClassK, CertError> {
        match self {
            ClassKSpec::Linear(c) => ClassK::linear(*c),
            ClassKSpec::Power { c, q, s_max } => ClassK::power(*c, *q, *s_max),
            ClassKSpec::Expr { expr, s_max } => ClassK::expression(expr::parse(expr, &["s"])?, *s_max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SingleVSpec {
    Matrix(Vec<Vec<f64>>),
    Expr(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VSpec {
    Single(SingleVSpec),
    PerMode(BTreeMap<String, SingleVSpec>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificateSpec {
    pub kind: CertKind,
    #[serde(rename = "V")]
    pub v: VSpec,
    pub alpha_lo: ClassKSpec,
    pub alpha_hi: ClassKSpec,
    pub kappa: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<ClassKSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nu: Option<f64>,
}

fn compile_single(spec: &SingleVSpec, dim: usize) -> Result<LyapunovFn, CertError> {
    match spec {
        SingleVSpec::Matrix(rows) => {
            if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
                return Err(CertError::Invalid(format!("V matrix must be {dim}x{dim}")));
            }
            if rows.iter().flatten().any(|v| !v.is_finite()) {
                return Err(CertError::Invalid("V matrix has non-finite entries".into()));
            }
            Ok(LyapunovFn::Quadratic {
                m: DMatrix::from_fn(dim, dim, |i, j| rows[i][j]),
            })
        }
        SingleVSpec::Expr(src) => {
            let vars: Vec<String> = (1..=dim)
                .map(|i| format!("x{i}"))
                .chain((1..=dim).map(|i| format!("y{i}")))
                .collect();
            Ok(LyapunovFn::Expr(expr::parse(src, &vars)?))
        }
    }
}

impl CertificateSpec {
    pub fn compile(&self, sys: &SwitchedSystem) -> Result<LyapunovCertificate, CertError> {
        let dim = sys.dim();
        let alpha_lo = self.alpha_lo.compile()?;
        let alpha_hi = self.alpha_hi.compile()?;
        let gamma = self.gamma.as_ref().map(ClassKSpec::compile).transpose()?;
        let cert = match (self.kind, &self.v) {
            (CertKind::Common, VSpec::Single(s)) => {
                if self.mu.is_some_and(|m| m != 1.0) {
                    return Err(CertError::Invalid(
                        "mu is only meaningful for multiple certificates".into(),
                    ));
                }
                LyapunovCertificate::common(compile_single(s, dim)?, alpha_lo, alpha_hi, self.kappa, gamma, self.nu)?
            }
            (CertKind::Multiple, VSpec::PerMode(map)) => {
                let mut per_mode = Vec::with_capacity(sys.num_modes());
                for p in sys.modes() {
                    let name = sys.mode_name(p);
                    let s = map
                        .get(name)
                        .ok_or_else(|| CertError::Invalid(format!("no V given for mode `{name}`")))?;
                    per_mode.push(compile_single(s, dim)?);
                }
                if let Some(extra) = map.keys().find(|k| sys.mode_by_name(k).is_none()) {
                    return Err(CertError::Invalid(format!("V given for unknown mode `{extra}`")));
                }
                let mu = self
                    .mu
                    .ok_or_else(|| CertError::Invalid("multiple certificate requires mu".into()))?;
                LyapunovCertificate::multiple(per_mode, alpha_lo, alpha_hi, self.kappa, mu, gamma, self.nu)?
            }
            (CertKind::Common, _) => return Err(CertError::Invalid("common certificate needs a single V".into())),
            (CertKind::Multiple, _) => {
                return Err(CertError::Invalid(
                    "multiple certificate needs V keyed by mode name".into(),
                ))
            }
        };
        cert.check_against(sys)?;
        Ok(cert)
    }
}

// ---------------------------------------------------------------------------
// Sampled checks

/// Outcome of the sampled checks of the sandwich, decay and mode-ratio inequalities.
#[derive(Debug, Clone, Default, Serialize)]
pub struct CertCheckReport {
    pub pairs: usize,
    pub sandwich_violations: usize,
    pub decay_violations: usize,
    pub mu_violations: usize,
    /// Largest of `α̲(‖x−y‖) − V` and `V − ᾱ(‖x−y‖)`.
    pub worst_sandwich: f64,
    /// Largest `∂V/∂x·f(x) + ∂V/∂y·f(y) + κV`.
    pub worst_decay: f64,
    /// Largest `V_p − μ V_p'`.
    pub worst_mu: f64,
    pub examples: Vec<String>,
}

impl CertCheckReport {
    pub fn passed(&self) -> bool {
        self.sandwich_violations == 0 && self.decay_violations == 0 && self.mu_violations == 0
    }

    fn merge(mut self, other: CertCheckReport) -> CertCheckReport {
        self.pairs += other.pairs;
        self.sandwich_violations += other.sandwich_violations;
        self.decay_violations += other.decay_violations;
        self.mu_violations += other.mu_violations;
        self.worst_sandwich = self.worst_sandwich.max(other.worst_sandwich);
        self.worst_decay = self.worst_decay.max(other.worst_decay);
        self.worst_mu = self.worst_mu.max(other.worst_mu);
        self.examples.extend(other.examples);
        self.examples.truncate(8);
        self
    }

    fn empty() -> CertCheckReport {
        CertCheckReport {
            worst_sandwich: f64::NEG_INFINITY,
            worst_decay: f64::NEG_INFINITY,
            worst_mu: f64::NEG_INFINITY,
            ..Default::default()
        }
    }
}

/// Checks the certificate inequalities on all pairs of a `grid_per_axis^n` grid of `region`.
pub fn check_certificate(
    sys: &SwitchedSystem,
    cert: &LyapunovCertificate,
    region: &StateBox,
    grid_per_axis: usize,
) -> Result<CertCheckReport, CertError> {
    cert.check_against(sys)?;
    let pts = region.grid_points(grid_per_axis);
    let n = sys.dim();
    let per_x = pts
        .par_iter()
        .map(|x| -> Result<CertCheckReport, CertError> {
            let mut rep = CertCheckReport::empty();
            let mut gx = vec![0.0; n];
            let mut gy = vec![0.0; n];
            let mut fx = vec![0.0; n];
            let mut fy = vec![0.0; n];
            for y in &pts {
                rep.pairs += 1;
                let wrap = |source| CertError::Eval {
                    x: x.clone(),
                    y: y.clone(),
                    source,
                };
                let dist = euclidean_distance(x, y);
                let lo = cert.alpha_lo.eval(dist)?;
                let hi = cert.alpha_hi.eval(dist)?;
                let values = (0..cert.num_functions())
                    .map(|p| cert.value(Mode(p), x, y).map_err(wrap))
                    .collect::<Result<Vec<_>, _>>()?;
                for &v in &values {
                    let excess = (lo - v).max(v - hi);
                    rep.worst_sandwich = rep.worst_sandwich.max(excess);
                    if excess > CHECK_SLACK {
                        rep.sandwich_violations += 1;
                        if rep.examples.len() < 4 {
                            rep.examples.push(format!(
                                "sandwich: x={x:?} y={y:?} V={v:.12} bounds=[{lo:.12}, {hi:.12}]"
                            ));
                        }
                    }
                }
                if cert.kind() == CertKind::Multiple {
                    for (p, &vp) in values.iter().enumerate() {
                        for (q, &vq) in values.iter().enumerate() {
                            if p == q {
                                continue;
                            }
                            let excess = vp - cert.mu * vq;
                            rep.worst_mu = rep.worst_mu.max(excess);
                            if excess > CHECK_SLACK {
                                rep.mu_violations += 1;
                                if rep.examples.len() < 4 {
                                    rep.examples.push(format!(
                                        "mu: x={x:?} y={y:?} V_{p}={vp:.12} > mu*V_{q}={:.12}",
                                        cert.mu * vq
                                    ));
                                }
                            }
                        }
                    }
                }
                if dist < DIAGONAL_RADIUS {
                    continue;
                }
                for p in sys.modes() {
                    let f = cert.function(p);
                    f.gradient(x, y, &mut gx, &mut gy).map_err(wrap)?;
                    sys.field(p, x, &mut fx).map_err(wrap)?;
                    sys.field(p, y, &mut fy).map_err(wrap)?;
                    let lie: f64 = (0..n).map(|i| gx[i] * fx[i] + gy[i] * fy[i]).sum();
                    let v = values[if cert.kind() == CertKind::Common { 0 } else { p.0 }];
                    let excess = lie + cert.kappa * v;
                    rep.worst_decay = rep.worst_decay.max(excess);
                    if excess > CHECK_SLACK {
                        rep.decay_violations += 1;
                        if rep.examples.len() < 4 {
                            rep.examples.push(format!(
                                "decay: mode {p} x={x:?} y={y:?} dV={lie:.12} > -kappa V={:.12}",
                                -cert.kappa * v
                            ));
                        }
                    }
                }
            }
            Ok(rep)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(per_x.into_iter().fold(CertCheckReport::empty(), CertCheckReport::merge))
}

/// Grid estimate of the intermode derivative bound.
#[derive(Debug, Clone, Serialize)]
pub struct NuEstimate {
    /// Maximum of the intermode derivative over the sampled pairs (clamped at 0).
    pub grid_max: f64,
    pub safety_factor: f64,
    /// `grid_max * safety_factor`.
    pub value: f64,
    /// Sample attaining the maximum: `(x, y, p, p')`.
    pub argmax: Option<(Vec<f64>, Vec<f64>, Mode, Mode)>,
}

/// Maximizes `∂W/∂x(x,y)·f_p(x) + ∂W/∂y(x,y)·f_p'(y)` over ordered distinct
/// mode pairs and grid pairs `(x, y)`, where `W = V` for common certificates
/// and `W = V_p'` for multiple ones.
pub fn estimate_nu(
    sys: &SwitchedSystem,
    cert: &LyapunovCertificate,
    region: &StateBox,
    grid_per_axis: usize,
    safety_factor: f64,
) -> Result<NuEstimate, CertError> {
    if grid_per_axis < 2 {
        return Err(CertError::Invalid("grid needs at least 2 points per axis".into()));
    }
    cert.check_against(sys)?;
    let n = sys.dim();
    let pts = region.grid_points(grid_per_axis);
    let m = sys.num_modes();
    // Field values are shared across all pairs.
    let fields: Vec<Vec<Vec<f64>>> = pts
        .iter()
        .map(|x| {
            sys.modes()
                .map(|p| {
                    sys.field_vec(p, x).map_err(|source| CertError::Eval {
                        x: x.clone(),
                        y: x.clone(),
                        source,
                    })
                })
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<_, _>>()?;
    type Best = (f64, Option<(usize, usize, usize, usize)>);
    let best: Best = (0..pts.len())
        .into_par_iter()
        .map(|ix| -> Result<Best, CertError> {
            let x = &pts[ix];
            let mut gx = vec![0.0; n];
            let mut gy = vec![0.0; n];
            let mut best: Best = (f64::NEG_INFINITY, None);
            for (iy, y) in pts.iter().enumerate() {
                if euclidean_distance(x, y) < DIAGONAL_RADIUS {
                    continue;
                }
                let grads: Vec<(Vec<f64>, Vec<f64>)> = match cert.kind() {
                    CertKind::Common => {
                        cert.function(Mode(0))
                            .gradient(x, y, &mut gx, &mut gy)
                            .map_err(|source| CertError::Eval {
                                x: x.clone(),
                                y: y.clone(),
                                source,
                            })?;
                        vec![(gx.clone(), gy.clone())]
                    }
                    CertKind::Multiple => (0..m)
                        .map(|q| {
                            cert.function(Mode(q))
                                .gradient(x, y, &mut gx, &mut gy)
                                .map(|_| (gx.clone(), gy.clone()))
                                .map_err(|source| CertError::Eval {
                                    x: x.clone(),
                                    y: y.clone(),
                                    source,
                                })
                        })
                        .collect::<Result<_, _>>()?,
                };
                for p in 0..m {
                    for q in 0..m {
                        if p == q {
                            continue;
                        }
                        let (gx, gy) = &grads[if cert.kind() == CertKind::Common { 0 } else { q }];
                        let fx = &fields[ix][p];
                        let fy = &fields[iy][q];
                        let val: f64 = (0..n).map(|i| gx[i] * fx[i] + gy[i] * fy[i]).sum();
                        if val > best.0 {
                            best = (val, Some((ix, iy, p, q)));
                        }
                    }
                }
            }
            Ok(best)
        })
        .try_reduce(
            || (f64::NEG_INFINITY, None),
            |a, b| {
                // Ties resolve to the earlier sample so the result is schedule independent.
                Ok(if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1 && b.1.is_some()) {
                    b
                } else {
                    a
                })
            },
        )?;
    let grid_max = best.0.max(0.0);
    Ok(NuEstimate {
        grid_max,
        safety_factor,
        value: grid_max * safety_factor,
        argmax: best
            .1
            .map(|(ix, iy, p, q)| (pts[ix].clone(), pts[iy].clone(), Mode(p), Mode(q))),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demos;

    #[test]
    fn identity_inverse() {
        let f = ClassK::identity();
        assert_eq!(f.inverse(0.029418).unwrap(), 0.029418);
    }

    #[test]
    fn linear_inverse() {
        let f = ClassK::linear(6f64.sqrt()).unwrap();
        assert!((f.inverse(6f64.sqrt()).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn bisection_inverse_matches_sqrt() {
        let f = ClassK::expression(expr::parse("s^2", &["s"]).unwrap(), 10.0).unwrap();
        let s = f.inverse(2.0).unwrap();
        assert!((s - 2f64.sqrt()).abs() < 1e-10);
        assert!((f.eval(s).unwrap() - 2.0).abs() <= 1e-10 * 2.0);
    }

    #[test]
    fn power_inverse_closed_form() {
        let f = ClassK::power(2.0, 3.0, None).unwrap();
        assert!((f.inverse(16.0).unwrap() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn inverse_out_of_range() {
        let f = ClassK::expression(expr::parse("s^2", &["s"]).unwrap(), 10.0).unwrap();
        match f.inverse(101.0) {
            Err(CertError::OutOfRange { s_max, .. }) => assert_eq!(s_max, 10.0),
            other => panic!("{other:?}"),
        }
        assert!(f.inverse(-1.0).is_err());
    }

    #[test]
    fn class_k_validation() {
        assert!(ClassK::linear(0.0).is_err());
        assert!(ClassK::power(1.0, -1.0, None).is_err());
        assert!(ClassK::expression(expr::parse("s+1", &["s"]).unwrap(), 1.0).is_err());
        assert!(ClassK::expression(expr::parse("-s", &["s"]).unwrap(), 1.0).is_err());
        assert!(ClassK::expression(expr::parse("s", &["s"]).unwrap(), f64::INFINITY).is_err());
    }

    #[test]
    fn box_validation_and_margin() {
        assert!(StateBox::new(vec![1.0], vec![1.0]).is_err());
        assert!(StateBox::new(vec![1.0, 2.0], vec![2.0]).is_err());
        let b = StateBox::new(vec![1.3, 5.7], vec![1.7, 5.8]).unwrap();
        assert!((b.margin(&[1.5, 5.75]) - 0.05).abs() < 1e-12);
        assert!(b.margin(&[1.2, 5.75]) < 0.0);
        assert_eq!(b.grid_points(3).len(), 9);
        assert_eq!(b.grid_points(3)[0], vec![1.3, 5.7]);
        assert_eq!(b.grid_points(3)[8], vec![1.7, 5.8]);
    }

    #[test]
    fn quadratic_gradient_matches_finite_differences() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0224, 0.0084, 0.0084, 1.0031]);
        let q = LyapunovFn::Quadratic { m };
        let e = LyapunovFn::Expr(
            expr::parse(
                "sqrt(1.0224*(x1-y1)^2 + 2*0.0084*(x1-y1)*(x2-y2) + 1.0031*(x2-y2)^2)",
                &["x1", "x2", "y1", "y2"],
            )
            .unwrap(),
        );
        let (x, y) = ([1.4, 5.72], [1.61, 5.79]);
        let (mut a, mut b, mut c, mut d) = ([0.0; 2], [0.0; 2], [0.0; 2], [0.0; 2]);
        q.gradient(&x, &y, &mut a, &mut b).unwrap();
        e.gradient(&x, &y, &mut c, &mut d).unwrap();
        for i in 0..2 {
            assert!((a[i] - c[i]).abs() < 1e-7);
            assert!((b[i] - d[i]).abs() < 1e-7);
        }
        assert!((q.value(&x, &y).unwrap() - e.value(&x, &y).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn single_mode_nu_is_zero() {
        let sys = SwitchedSystem::new(
            1,
            vec![crate::sysmodel::ModeSpec {
                name: "only".into(),
                field: crate::sysmodel::VectorField::Expr(vec![expr::parse("-x1", &["x1"]).unwrap()]),
            }],
        )
        .unwrap();
        let cert = LyapunovCertificate::common(
            LyapunovFn::Quadratic {
                m: DMatrix::identity(1, 1),
            },
            ClassK::identity(),
            ClassK::identity(),
            1.0,
            None,
            None,
        )
        .unwrap();
        let b = StateBox::new(vec![-1.0], vec![1.0]).unwrap();
        let est = estimate_nu(&sys, &cert, &b, 11, 1.05).unwrap();
        assert_eq!(est.value, 0.0);
        assert!(est.argmax.is_none());
    }

    #[test]
    fn nu_monotone_under_box_enlargement() {
        // The larger grid contains every sample of the smaller one.
        let cfg = demos::dcdc();
        let small = StateBox::new(vec![1.3, 5.7], vec![1.5, 5.75]).unwrap();
        let large = StateBox::new(vec![1.3, 5.7], vec![1.7, 5.8]).unwrap();
        let a = estimate_nu(&cfg.system, &cfg.certificate, &small, 6, 1.0).unwrap();
        let b = estimate_nu(&cfg.system, &cfg.certificate, &large, 11, 1.0).unwrap();
        assert!(b.grid_max >= a.grid_max);
    }

    #[test]
    fn nu_grid_refinement_is_stable() {
        for cfg in [demos::dcdc(), demos::water_tank()] {
            let coarse = estimate_nu(&cfg.system, &cfg.certificate, &cfg.safe_box, 21, 1.0).unwrap();
            let fine = estimate_nu(&cfg.system, &cfg.certificate, &cfg.safe_box, 41, 1.0).unwrap();
            let rel = (fine.grid_max - coarse.grid_max).abs() / fine.grid_max;
            assert!(rel <= 0.05, "{} vs {}", coarse.grid_max, fine.grid_max);
        }
    }

    #[test]
    fn nu_rejects_degenerate_grid() {
        let cfg = demos::dcdc();
        assert!(estimate_nu(&cfg.system, &cfg.certificate, &cfg.safe_box, 1, 1.0).is_err());
    }

    #[test]
    fn certificate_spec_round_trip() {
        let text = r#"{"kind":"multiple","V":{"OFF":"abs(exp(sqrt(x1))-exp(sqrt(y1)))","ON":"sqrt(6)*abs(x1-y1)"},
            "alpha_lo":1.0,"alpha_hi":{"c":3.74,"q":1.0},"kappa":0.1,"mu":1.6329931618554518,"nu":2.94}"#;
        let spec: CertificateSpec = serde_json::from_str(text).unwrap();
        let back: CertificateSpec = serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(spec, back);
        let cert = spec.compile(&demos::water_tank_system()).unwrap();
        assert_eq!(cert.kind(), CertKind::Multiple);
        assert_eq!(cert.num_functions(), 2);
    }

    #[test]
    fn certificate_spec_errors() {
        let sys = demos::water_tank_system();
        let missing_mu =
            r#"{"kind":"multiple","V":{"OFF":"abs(x1-y1)","ON":"abs(x1-y1)"},"alpha_lo":1,"alpha_hi":1,"kappa":0.1}"#;
        let spec: CertificateSpec = serde_json::from_str(missing_mu).unwrap();
        assert!(spec.compile(&sys).is_err());
        let unknown_mode = r#"{"kind":"multiple","V":{"OFF":"abs(x1-y1)","ON":"abs(x1-y1)","X":"abs(x1-y1)"},"alpha_lo":1,"alpha_hi":1,"kappa":0.1,"mu":1}"#;
        let spec: CertificateSpec = serde_json::from_str(unknown_mode).unwrap();
        assert!(spec.compile(&sys).is_err());
        let bad_matrix = r#"{"kind":"common","V":[[1,0],[0,1]],"alpha_lo":1,"alpha_hi":1,"kappa":0.1}"#;
        let spec: CertificateSpec = serde_json::from_str(bad_matrix).unwrap();
        assert!(spec.compile(&sys).is_err());
    }
}
