//! Switching-delay error bounds, the transition-system view of delayed and
//! delay-free switched systems, and empirical bisimulation checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::certs::{CertError, CertKind, ClassK, LyapunovCertificate};
use crate::sysmodel::{
    euclidean_distance, flow_constant, simulate_with_samples, Mode, ModelError, SwitchedSystem, SwitchingSignal,
    Trajectory,
};

/// Default length of the per-switch sequence.
pub const DEFAULT_PER_SWITCH: usize = 64;

#[derive(Debug, Error)]
pub enum BoundError {
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error(transparent)]
    Cert(#[from] CertError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Deterministic RNG for sample `index` of a run seeded with `seed`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundParams {
    pub kind: CertKind,
    pub tau: f64,
    pub delta0: f64,
    pub kappa: f64,
    pub mu: f64,
    pub nu: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundResult {
    /// Bound on the state error; `+inf` when the dwell-time condition fails.
    #[serde(serialize_with = "ser_extended")]
    pub epsilon: f64,
    #[serde(skip)]
    pub fixed_point: f64,
    /// `per_switch[k]`: bound after `k` delayed switches.
    pub per_switch: Vec<f64>,
    pub dwell_time_ok: bool,
    pub params: BoundParams,
}

/// Writes `+inf` as the string "inf" so JSON output stays valid.
fn ser_extended<S: serde::Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
    }
}

/// `g(ε) = α̲⁻¹(rate·α̲(ε) + increment)`.
#[derive(Debug, Clone)]
pub struct DelayRecurrence {
    pub alpha_lo: ClassK,
    pub rate: f64,
    pub increment: f64,
}

impl DelayRecurrence {
    pub fn new(cert: &LyapunovCertificate, nu: f64, tau: f64, delta0: f64) -> Result<Self, BoundError> {
        check_params(cert, nu, tau, delta0)?;
        let mu = match cert.kind() {
            CertKind::Common => 1.0,
            CertKind::Multiple => cert.mu,
        };
        Ok(DelayRecurrence {
            alpha_lo: cert.alpha_lo.clone(),
            rate: mu * (-cert.kappa * (tau - delta0)).exp(),
            increment: nu * delta0,
        })
    }

    pub fn g(&self, eps: f64) -> Result<f64, CertError> {
        if eps.is_infinite() {
            return Ok(f64::INFINITY);
        }
        self.alpha_lo
            .inverse(self.rate * self.alpha_lo.eval(eps)? + self.increment)
    }

    /// `g^k(eps0)` by replaying the recurrence.
    pub fn iterate(&self, eps0: f64, k: usize) -> Result<f64, CertError> {
        let mut e = eps0;
        for _ in 0..k {
            e = self.g(e)?;
        }
        Ok(e)
    }

    /// `g^k(eps0)` in closed form: `α̲⁻¹(r^k α̲(ε0) + c(1-r^k)/(1-r))`, or `c·k` when `r = 1`.
    pub fn closed_form(&self, eps0: f64, k: usize) -> Result<f64, CertError> {
        let (r, c) = (self.rate, self.increment);
        let rk = r.powi(k as i32);
        let acc = if r == 1.0 {
            c * k as f64
        } else {
            c * (1.0 - rk) / (1.0 - r)
        };
        self.alpha_lo.inverse(rk * self.alpha_lo.eval(eps0)? + acc)
    }

    pub fn fixed_point(&self) -> Result<f64, CertError> {
        if self.increment == 0.0 {
            return Ok(0.0);
        }
        if self.rate >= 1.0 {
            return Ok(f64::INFINITY);
        }
        self.alpha_lo.inverse(self.increment / (1.0 - self.rate))
    }
}

fn check_params(cert: &LyapunovCertificate, nu: f64, tau: f64, delta0: f64) -> Result<(), BoundError> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(BoundError::Params(format!("period {tau} must be positive")));
    }
    if !(delta0 >= 0.0) {
        return Err(BoundError::Params(format!("delay bound {delta0} must be nonnegative")));
    }
    if delta0 >= tau {
        return Err(BoundError::Params("delay bound must be < period".into()));
    }
    if !(nu >= 0.0 && nu.is_finite()) {
        return Err(BoundError::Params(format!("nu = {nu} must be nonnegative")));
    }
    if !(cert.kappa > 0.0) {
        return Err(BoundError::Params("kappa must be positive".into()));
    }
    Ok(())
}

fn run_bound(
    cert: &LyapunovCertificate,
    rec: &DelayRecurrence,
    nu: f64,
    tau: f64,
    delta0: f64,
    dwell_time_ok: bool,
    per_switch_len: usize,
) -> Result<BoundResult, BoundError> {
    let fixed_point = if dwell_time_ok {
        rec.fixed_point()?
    } else {
        f64::INFINITY
    };
    let mut per_switch = Vec::with_capacity(per_switch_len);
    let mut e = 0.0;
    for k in 0..per_switch_len {
        if k > 0 {
            e = rec.g(e)?;
        }
        per_switch.push(e.min(fixed_point));
    }
    Ok(BoundResult {
        epsilon: fixed_point,
        fixed_point,
        per_switch,
        dwell_time_ok,
        params: BoundParams {
            kind: cert.kind(),
            tau,
            delta0,
            kappa: cert.kappa,
            mu: if cert.kind() == CertKind::Common { 1.0 } else { cert.mu },
            nu,
        },
    })
}

/// Bound for a common certificate: `α̲⁻¹(νδ0 / (1 − e^{−κ(τ−δ0)}))`.
pub fn bound_common(
    cert: &LyapunovCertificate,
    nu: f64,
    tau: f64,
    delta0: f64,
    per_switch_len: usize,
) -> Result<BoundResult, BoundError> {
    if cert.kind() != CertKind::Common {
        return Err(BoundError::Params("bound_common needs a common certificate".into()));
    }
    let rec = DelayRecurrence::new(cert, nu, tau, delta0)?;
    run_bound(cert, &rec, nu, tau, delta0, true, per_switch_len)
}

/// Bound for multiple certificates: `α̲⁻¹(ν′δ0 / (1 − μe^{−κ(τ−δ0)}))`,
/// `+inf` unless `τ − δ0 > ln μ / κ`. The per-switch sequence is produced either way.
pub fn bound_multiple(
    cert: &LyapunovCertificate,
    nu: f64,
    tau: f64,
    delta0: f64,
    per_switch_len: usize,
) -> Result<BoundResult, BoundError> {
    if cert.kind() != CertKind::Multiple {
        return Err(BoundError::Params("bound_multiple needs a multiple certificate".into()));
    }
    let rec = DelayRecurrence::new(cert, nu, tau, delta0)?;
    let dwell_time_ok = tau - delta0 > cert.mu.ln() / cert.kappa;
    run_bound(cert, &rec, nu, tau, delta0, dwell_time_ok, per_switch_len)
}

/// Dispatches on the certificate kind.
pub fn bound(
    cert: &LyapunovCertificate,
    nu: f64,
    tau: f64,
    delta0: f64,
    per_switch_len: usize,
) -> Result<BoundResult, BoundError> {
    match cert.kind() {
        CertKind::Common => bound_common(cert, nu, tau, delta0, per_switch_len),
        CertKind::Multiple => bound_multiple(cert, nu, tau, delta0, per_switch_len),
    }
}

// ---------------------------------------------------------------------------
// Transition-system view

/// State `(x, t, p)`: `p` becomes active at the switching instant `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct TSState {
    pub x: Vec<f64>,
    pub t: f64,
    pub p: Mode,
}

/// Delayed system paired with its delay-free counterpart.
#[derive(Debug, Clone)]
pub struct DelayedPair<'a> {
    pub sys: &'a SwitchedSystem,
    pub tau: f64,
    pub delta0: f64,
    pub dt: f64,
}

impl DelayedPair<'_> {
    const TIME_TOL: f64 = 1e-9;

    /// `b.x` flowed to `a.t` under `a.p`, or `None` when `a` and `b` are not
    /// comparable (different modes, `b.t` off the period grid, or `a.t`
    /// outside `[b.t, b.t + δ0]`).
    fn align(&self, a: &TSState, b: &TSState) -> Option<Vec<f64>> {
        if a.p != b.p {
            return None;
        }
        let tol = Self::TIME_TOL * self.tau.max(1.0);
        let k = (b.t / self.tau).round();
        if k < 0.0 || (b.t - k * self.tau).abs() > tol {
            return None;
        }
        let lag = a.t - b.t;
        if lag < -tol || lag > self.delta0 + tol {
            return None;
        }
        flow_constant(self.sys, &b.x, a.p, lag.max(0.0), self.dt).ok()
    }

    /// Output premetric; `a` is the delayed state, `b` the delay-free one.
    pub fn premetric(&self, a: &TSState, b: &TSState) -> f64 {
        match self.align(a, b) {
            Some(y) => euclidean_distance(&a.x, &y),
            None => f64::INFINITY,
        }
    }

    /// `V_p(a.x, b.x flowed to a.t)` under the same comparability rules as
    /// [`premetric`](Self::premetric).
    pub fn v_prime(&self, cert: &LyapunovCertificate, a: &TSState, b: &TSState) -> f64 {
        match self.align(a, b) {
            Some(y) => cert.value(a.p, &a.x, &y).unwrap_or(f64::INFINITY),
            None => f64::INFINITY,
        }
    }
}

/// Chooses the mode for the next period from the delay-free state at the
/// switching instant.
pub trait ModeChooser: Sync {
    fn choose(&self, x: &[f64], step: usize) -> Mode;
}

impl<F> ModeChooser for F
where
    F: Fn(&[f64], usize) -> Mode + Sync,
{
    fn choose(&self, x: &[f64], step: usize) -> Mode {
        self(x, step)
    }
}

#[derive(Debug, Clone)]
pub struct BisimOptions {
    pub epsilon: f64,
    pub samples: usize,
    pub steps: usize,
    pub seed: u64,
    /// Every delay equals `δ0` instead of being drawn uniformly.
    pub adversarial: bool,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct BisimReport {
    pub samples: usize,
    pub checks: usize,
    /// Rounds where the premetric exceeded ε or `V′` exceeded `α̲(ε)`.
    pub plain_violations: usize,
    /// Rounds where the premetric exceeded `g^k(ε)` or `V′` exceeded `α̲(g^k(ε))`.
    pub incrementing_violations: usize,
    pub max_premetric: f64,
    pub max_v_prime: f64,
    /// Smallest `g^k(ε) − premetric` seen.
    pub min_slack: f64,
    pub examples: Vec<String>,
}

impl BisimReport {
    pub fn passed(&self) -> bool {
        self.plain_violations == 0 && self.incrementing_violations == 0
    }
}

const BISIM_TOL: f64 = 1e-9;

/// Plays matching transitions of the delayed and delay-free systems from
/// related initial pairs and checks the relation round by round.
///
/// Each sample draws `x0` from `initial`, perturbs it within `V ≤ α̲(ε)` for
/// the delay-free copy, then runs `steps` rounds. Sample 0 uses zero delays,
/// sample 1 uses `δ0` everywhere; the rest draw delays uniformly in `[0, δ0]`
/// unless `adversarial` is set.
pub fn check_bisimulation<C, I>(
    pair: &DelayedPair<'_>,
    cert: &LyapunovCertificate,
    rec: &DelayRecurrence,
    chooser: &C,
    initial: I,
    opts: &BisimOptions,
) -> Result<BisimReport, BoundError>
where
    C: ModeChooser + ?Sized,
    I: Fn(&mut ChaCha8Rng) -> Vec<f64> + Sync,
{
    let eps = opts.epsilon;
    let alpha_eps = cert.alpha_lo.eval(eps)?;
    let mut bounds = Vec::with_capacity(opts.steps + 1);
    let mut e = eps;
    for k in 0..=opts.steps {
        if k > 0 {
            e = rec.g(e)?;
        }
        bounds.push((e, cert.alpha_lo.eval(e)?));
    }
    let n = pair.sys.dim();
    let per_sample: Vec<BisimReport> = (0..opts.samples)
        .into_par_iter()
        .map(|i| -> Result<BisimReport, BoundError> {
            let mut rng = sample_rng(opts.seed, i as u64);
            let x0 = initial(&mut rng);
            let p0 = chooser.choose(&x0, 0);
            let mut y0 = x0.clone();
            if eps > 0.0 {
                for _ in 0..64 {
                    let cand: Vec<f64> = x0.iter().map(|v| v + rng.random_range(-eps..=eps)).collect();
                    if cert.value(p0, &x0, &cand).is_ok_and(|v| v <= alpha_eps) {
                        y0 = cand;
                        break;
                    }
                }
            }
            let mut a = TSState { x: x0, t: 0.0, p: p0 };
            let mut b = TSState { x: y0, t: 0.0, p: p0 };
            let mut rep = BisimReport {
                samples: 1,
                min_slack: f64::INFINITY,
                ..Default::default()
            };
            for k in 0..=opts.steps {
                if k > 0 {
                    let t_next = k as f64 * pair.tau;
                    let bx = flow_constant(pair.sys, &b.x, b.p, pair.tau, pair.dt)?;
                    let p_next = chooser.choose(&bx, k);
                    let d = match i {
                        0 => 0.0,
                        1 => pair.delta0,
                        _ if opts.adversarial => pair.delta0,
                        _ if pair.delta0 > 0.0 => rng.random_range(0.0..=pair.delta0),
                        _ => 0.0,
                    };
                    a.x = flow_constant(pair.sys, &a.x, a.p, t_next + d - a.t, pair.dt)?;
                    a.t = t_next + d;
                    a.p = p_next;
                    b = TSState { x: bx, t: t_next, p: p_next };
                }
                let dist = pair.premetric(&a, &b);
                let vp = pair.v_prime(cert, &a, &b);
                let (bound_k, alpha_k) = bounds[k];
                rep.checks += 1;
                rep.max_premetric = rep.max_premetric.max(dist);
                rep.max_v_prime = rep.max_v_prime.max(vp);
                rep.min_slack = rep.min_slack.min(bound_k - dist);
                if dist > eps + BISIM_TOL || vp > alpha_eps + BISIM_TOL {
                    rep.plain_violations += 1;
                }
                if dist > bound_k + BISIM_TOL || vp > alpha_k + BISIM_TOL {
                    rep.incrementing_violations += 1;
                    if rep.examples.len() < 2 {
                        rep.examples.push(format!(
                            "sample {i} round {k}: premetric {dist:.3e} (bound {bound_k:.3e}), V' {vp:.3e} (bound {alpha_k:.3e})"
                        ));
                    }
                }
                debug_assert_eq!(a.x.len(), n);
            }
            Ok(rep)
        })
        .collect::<Result<_, _>>()?;
    let mut total = BisimReport {
        min_slack: f64::INFINITY,
        ..Default::default()
    };
    for r in per_sample {
        total.samples += r.samples;
        total.checks += r.checks;
        total.plain_violations += r.plain_violations;
        total.incrementing_violations += r.incrementing_violations;
        total.max_premetric = total.max_premetric.max(r.max_premetric);
        total.max_v_prime = total.max_v_prime.max(r.max_v_prime);
        total.min_slack = total.min_slack.min(r.min_slack);
        if total.examples.len() < 8 {
            total.examples.extend(r.examples);
        }
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Trajectory comparison

/// Pointwise gap between a delay-free run and its delayed counterpart.
#[derive(Debug, Clone)]
pub struct DeviationProfile {
    pub nominal: Trajectory,
    pub delayed: Trajectory,
    /// Largest gap over all samples.
    pub max: f64,
    /// `running[k]`: largest gap over samples with `t ≤ (k+1)τ`.
    pub running: Vec<f64>,
}

/// Simulates `base` and `base.delayed(δ0, delays)` from `x0` on a shared
/// sample grid and measures the gap.
pub fn compare_delayed(
    sys: &SwitchedSystem,
    base: &SwitchingSignal,
    delta0: f64,
    delays: &[f64],
    x0: &[f64],
    t_end: f64,
    dt: f64,
) -> Result<DeviationProfile, BoundError> {
    let delayed_sig = base.delayed(delta0, delays)?;
    let nominal_marks: Vec<f64> = base.events().iter().map(|e| e.0).collect();
    let delayed_marks: Vec<f64> = delayed_sig.events().iter().map(|e| e.0).collect();
    let nominal = simulate_with_samples(sys, base, x0, t_end, dt, &delayed_marks)?;
    let delayed = simulate_with_samples(sys, &delayed_sig, x0, t_end, dt, &nominal_marks)?;
    if nominal.times() != delayed.times() {
        return Err(BoundError::Params("sample grids of the two runs differ".into()));
    }
    let tau = base.period();
    let periods = (t_end / tau).ceil() as usize;
    let mut running = vec![0.0f64; periods.max(1)];
    let mut max = 0.0f64;
    for i in 0..nominal.len() {
        let gap = euclidean_distance(nominal.state(i), delayed.state(i));
        max = max.max(gap);
        let t = nominal.times()[i];
        // first index k with t <= (k+1)τ
        let k = ((t / tau - 1e-9).ceil() as usize)
            .saturating_sub(1)
            .min(running.len() - 1);
        running[k] = running[k].max(gap);
    }
    for k in 1..running.len() {
        running[k] = running[k].max(running[k - 1]);
    }
    Ok(DeviationProfile {
        nominal,
        delayed,
        max,
        running,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::certs::{ClassK, LyapunovFn};
    use crate::demos;
    use nalgebra::DMatrix;

    fn common(kappa: f64) -> LyapunovCertificate {
        LyapunovCertificate::common(
            LyapunovFn::Quadratic {
                m: DMatrix::identity(1, 1),
            },
            ClassK::identity(),
            ClassK::identity(),
            kappa,
            None,
            None,
        )
        .unwrap()
    }

    fn multiple(kappa: f64, mu: f64) -> LyapunovCertificate {
        let v = LyapunovFn::Quadratic {
            m: DMatrix::identity(1, 1),
        };
        LyapunovCertificate::multiple(
            vec![v.clone(), v],
            ClassK::identity(),
            ClassK::identity(),
            kappa,
            mu,
            None,
            None,
        )
        .unwrap()
    }

    #[test]
    fn dcdc_number() {
        let r = bound_common(&common(0.014), 0.41, 0.5, 0.0005, 64).unwrap();
        assert!((r.epsilon - 0.0294176).abs() < 1e-6, "{}", r.epsilon);
    }

    #[test]
    fn water_tank_number() {
        let r = bound_multiple(&multiple(0.1, 2.0 * 6f64.sqrt() / 3.0), 2.94, 10.0, 0.1, 64).unwrap();
        assert!((r.epsilon - 0.747678).abs() < 1e-6, "{}", r.epsilon);
        assert!(r.dwell_time_ok);
    }

    #[test]
    fn hand_arithmetic() {
        let r = bound_common(&common(2f64.ln()), 1.0, 1.1, 0.1, 4).unwrap();
        assert!((r.epsilon - 0.2).abs() < 1e-15);
        assert_eq!(r.per_switch[0], 0.0);
        assert!((r.per_switch[1] - 0.1).abs() < 1e-15);
        assert!((r.per_switch[2] - 0.15).abs() < 1e-15);
    }

    #[test]
    fn zero_delay_is_zero() {
        let r = bound_common(&common(0.014), 0.41, 0.5, 0.0, 64).unwrap();
        assert_eq!(r.epsilon, 0.0);
        assert!(r.per_switch.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mu_one_reduces_to_common() {
        let a = bound_common(&common(0.1), 2.94, 10.0, 0.1, 64).unwrap();
        let b = bound_multiple(&multiple(0.1, 1.0), 2.94, 10.0, 0.1, 64).unwrap();
        assert_eq!(a.epsilon, b.epsilon);
        assert_eq!(a.per_switch, b.per_switch);
    }

    #[test]
    fn dwell_time_violation() {
        // μ e^{-κ(τ-δ0)} = 1.2
        let kappa = 0.1;
        let mu = 1.2 * (kappa * 9.9f64).exp();
        let r = bound_multiple(&multiple(kappa, mu), 2.94, 10.0, 0.1, 64).unwrap();
        assert!(!r.dwell_time_ok);
        assert_eq!(r.epsilon, f64::INFINITY);
        assert!(r.per_switch.iter().all(|v| v.is_finite()));
        assert!(r.per_switch.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn parameter_errors() {
        assert!(bound_common(&common(0.1), 1.0, 0.5, 0.5, 8).is_err());
        assert!(bound_common(&common(0.1), -1.0, 0.5, 0.1, 8).is_err());
        assert!(bound_multiple(&common(0.1), 1.0, 0.5, 0.1, 8).is_err());
    }

    #[test]
    fn recurrence_fixed_point_and_closed_form() {
        let cert = multiple(0.1, 2.0 * 6f64.sqrt() / 3.0);
        let rec = DelayRecurrence::new(&cert, 2.94, 10.0, 0.1).unwrap();
        let fp = rec.fixed_point().unwrap();
        assert!((rec.g(fp).unwrap() - fp).abs() < 1e-10);
        for k in 0..=100 {
            let a = rec.iterate(0.0, k).unwrap();
            let b = rec.closed_form(0.0, k).unwrap();
            assert!((a - b).abs() < 1e-10, "k={k}: {a} vs {b}");
        }
    }

    #[test]
    fn json_shape() {
        let r = bound_common(&common(0.014), 0.41, 0.5, 0.0005, 3).unwrap();
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        assert_eq!(keys, ["dwell_time_ok", "epsilon", "params", "per_switch"]);
        let inf = bound_multiple(&multiple(0.1, 1e9), 1.0, 10.0, 0.1, 3).unwrap();
        assert_eq!(serde_json::to_value(&inf).unwrap()["epsilon"], "inf");
    }

    #[test]
    fn premetric_cases() {
        let sys = demos::water_tank_system();
        let off = sys.mode_by_name("OFF").unwrap();
        let on = sys.mode_by_name("ON").unwrap();
        let pair = DelayedPair {
            sys: &sys,
            tau: 10.0,
            delta0: 0.1,
            dt: 1e-4,
        };
        let q = TSState {
            x: vec![4.0],
            t: 10.0,
            p: off,
        };
        assert_eq!(pair.premetric(&q, &q), 0.0);
        let other = TSState { p: on, ..q.clone() };
        assert_eq!(pair.premetric(&q, &other), f64::INFINITY);
        let a = TSState {
            x: vec![3.61],
            t: 10.0,
            p: off,
        };
        assert!((pair.premetric(&a, &q) - 0.39).abs() < 1e-12);
        let a = TSState {
            x: vec![3.61],
            t: 10.001,
            p: off,
        };
        // (2 - 0.0001)^2 = 3.9996..., minus 3.61
        assert!((pair.premetric(&a, &q) - 0.389600).abs() < 1e-4);
        // outside the delay window, or off the period grid
        let late = TSState {
            x: vec![3.61],
            t: 10.2,
            p: off,
        };
        assert_eq!(pair.premetric(&late, &q), f64::INFINITY);
        let off_grid = TSState { t: 10.05, ..q.clone() };
        assert_eq!(pair.premetric(&a, &off_grid), f64::INFINITY);
        // asymmetric: swapping arguments breaks the window condition
        assert_eq!(pair.premetric(&q, &a), f64::INFINITY);
    }

    #[test]
    fn identity_relation_has_no_violations() {
        let sys = demos::dcdc_system();
        let cert = demos::dcdc().certificate;
        let pair = DelayedPair {
            sys: &sys,
            tau: 0.5,
            delta0: 0.0,
            dt: 5e-4,
        };
        let rec = DelayRecurrence::new(&cert, 0.41, 0.5, 0.0).unwrap();
        let chooser = |_: &[f64], k: usize| Mode(k % 2);
        let opts = BisimOptions {
            epsilon: 0.0,
            samples: 8,
            steps: 10,
            seed: 1,
            adversarial: false,
        };
        let rep = check_bisimulation(&pair, &cert, &rec, &chooser, |_| vec![1.5, 5.75], &opts).unwrap();
        assert!(rep.passed());
        assert_eq!(rep.max_premetric, 0.0);
    }

    #[test]
    fn zero_delays_give_identical_runs() {
        let sys = demos::dcdc_system();
        let base = SwitchingSignal::periodic(0.5, &[Mode(0), Mode(1), Mode(0)], 1.5).unwrap();
        let prof = compare_delayed(&sys, &base, 0.0005, &[0.0, 0.0], &[1.5, 5.75], 1.5, 5e-4).unwrap();
        assert_eq!(prof.max, 0.0);
        assert_eq!(prof.running.len(), 3);
    }
}
