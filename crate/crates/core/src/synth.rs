//! Safety synthesis on a finite abstraction, switching-signal extraction and
//! closed-loop verification under random switching delays.

use std::collections::BTreeMap;

use bitvec::prelude::*;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::certs::StateBox;
use crate::delaybound::{compare_delayed, sample_rng, BoundError, BoundResult, ModeChooser};
use crate::symabs::{OnePeriodMap, SymbolicModel};
use crate::sysmodel::{Mode, ModelError, SwitchedSystem, SwitchingSignal};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("axis {axis} empty: width {width} < 2·{margin} (deficit {deficit})")]
    EmptyAxis {
        axis: usize,
        width: f64,
        margin: f64,
        deficit: f64,
    },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("state {0} is not in the safe set")]
    NotSafe(usize),
    #[error("the safe set is empty")]
    EmptyController,
    #[error("invalid controller file: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Bound(#[from] BoundError),
}

/// Moves every face of `b` inward by `margin`.
pub fn shrink_box(b: &StateBox, margin: f64) -> Result<StateBox, SynthError> {
    if !(margin >= 0.0) {
        return Err(SynthError::Invalid(format!("margin {margin} must be nonnegative")));
    }
    for d in 0..b.dim() {
        let width = b.upper()[d] - b.lower()[d];
        if width <= 2.0 * margin {
            return Err(SynthError::EmptyAxis {
                axis: d + 1,
                width,
                margin,
                deficit: 2.0 * margin - width,
            });
        }
    }
    Ok(StateBox::new(
        b.lower().iter().map(|l| l + margin).collect(),
        b.upper().iter().map(|u| u - margin).collect(),
    )
    .expect("shrunk box is nonempty"))
}

/// Deterministic finite transition structure; `None` is the sink.
pub trait TransitionTable: Sync {
    fn num_states(&self) -> usize;
    fn num_modes(&self) -> usize;
    fn successor(&self, q: usize, p: Mode) -> Option<usize>;
}

impl TransitionTable for SymbolicModel {
    fn num_states(&self) -> usize {
        SymbolicModel::num_states(self)
    }
    fn num_modes(&self) -> usize {
        SymbolicModel::num_modes(self)
    }
    fn successor(&self, q: usize, p: Mode) -> Option<usize> {
        SymbolicModel::successor(self, q, p)
    }
}

/// Small explicit table, row `q` holding the successor under each mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplicitModel {
    pub num_modes: usize,
    pub succ: Vec<Vec<Option<usize>>>,
}

impl TransitionTable for ExplicitModel {
    fn num_states(&self) -> usize {
        self.succ.len()
    }
    fn num_modes(&self) -> usize {
        self.num_modes
    }
    fn successor(&self, q: usize, p: Mode) -> Option<usize> {
        self.succ[q][p.0]
    }
}

fn has_safe_move<T: TransitionTable + ?Sized>(t: &T, set: &BitSlice, q: usize) -> bool {
    (0..t.num_modes()).any(|p| t.successor(q, Mode(p)).is_some_and(|s| set[s]))
}

/// Largest subset of `initial` in which every state has a mode staying inside.
/// Sweeps alternate direction until nothing changes.
pub fn maximal_invariant<T: TransitionTable + ?Sized>(t: &T, initial: &BitSlice) -> BitVec {
    let mut set: BitVec = initial.to_bitvec();
    let n = t.num_states();
    let mut forward = true;
    loop {
        let mut changed = false;
        let mut visit = |q: usize, set: &mut BitVec| {
            if set[q] && !has_safe_move(t, set, q) {
                set.set(q, false);
                changed = true;
            }
        };
        if forward {
            for q in 0..n {
                visit(q, &mut set);
            }
        } else {
            for q in (0..n).rev() {
                visit(q, &mut set);
            }
        }
        if !changed {
            return set;
        }
        forward = !forward;
    }
}

/// Safe set with its admissible modes (bit `p` of `allowed[q]`).
#[derive(Debug, Clone, PartialEq)]
pub struct SafetyController {
    safe: BitVec,
    allowed: Vec<u64>,
    safe_list: Vec<usize>,
    target: Option<StateBox>,
    num_modes: usize,
}

impl SafetyController {
    /// Controller for the maximal invariant inside `initial`.
    pub fn from_table<T: TransitionTable + ?Sized>(
        t: &T,
        initial: &BitSlice,
        target: Option<StateBox>,
    ) -> Result<Self, SynthError> {
        if t.num_modes() > 64 {
            return Err(SynthError::Invalid("at most 64 modes are supported".into()));
        }
        if initial.len() != t.num_states() {
            return Err(SynthError::Invalid(
                "initial set size differs from the state count".into(),
            ));
        }
        let safe = maximal_invariant(t, initial);
        let allowed: Vec<u64> = (0..t.num_states())
            .into_par_iter()
            .map(|q| {
                if !safe[q] {
                    return 0;
                }
                (0..t.num_modes())
                    .filter(|&p| t.successor(q, Mode(p)).is_some_and(|s| safe[s]))
                    .fold(0u64, |m, p| m | (1 << p))
            })
            .collect();
        let safe_list = safe.iter_ones().collect();
        Ok(SafetyController {
            safe,
            allowed,
            safe_list,
            target,
            num_modes: t.num_modes(),
        })
    }

    pub fn is_empty(&self) -> bool {
        self.safe_list.is_empty()
    }

    pub fn len(&self) -> usize {
        self.safe_list.len()
    }

    pub fn is_safe(&self, q: usize) -> bool {
        q < self.safe.len() && self.safe[q]
    }

    pub fn safe_set(&self) -> &BitSlice {
        &self.safe
    }

    pub fn safe_states(&self) -> &[usize] {
        &self.safe_list
    }

    pub fn target(&self) -> Option<&StateBox> {
        self.target.as_ref()
    }

    pub fn num_modes(&self) -> usize {
        self.num_modes
    }

    pub fn allowed_mask(&self, q: usize) -> u64 {
        self.allowed[q]
    }

    /// Admissible modes of `q` in increasing order (empty outside the safe set).
    pub fn allowed(&self, q: usize) -> Vec<Mode> {
        let mask = self.allowed[q];
        (0..self.num_modes).filter(|p| mask >> p & 1 == 1).map(Mode).collect()
    }

    pub fn to_json(&self, model: &SymbolicModel) -> String {
        let names = model.mode_names();
        let file = ControllerFile {
            modes: names.to_vec(),
            total_states: model.num_states(),
            safe_states: self.len(),
            target: self.target.clone(),
            allowed: self
                .safe_list
                .iter()
                .map(|&q| {
                    let mut modes: Vec<String> = self.allowed(q).iter().map(|p| names[p.0].clone()).collect();
                    modes.sort();
                    (model.grid().index_tuple(q), modes)
                })
                .collect(),
        };
        serde_json::to_string(&file).expect("controller serializes")
    }

    pub fn from_json(text: &str, model: &SymbolicModel) -> Result<Self, SynthError> {
        let file: ControllerFile = serde_json::from_str(text).map_err(|e| SynthError::Format(e.to_string()))?;
        if file.modes != model.mode_names() {
            return Err(SynthError::Format("mode names differ from the model".into()));
        }
        if file.total_states != model.num_states() {
            return Err(SynthError::Format("state count differs from the model".into()));
        }
        let n = model.num_states();
        let mut safe = bitvec![0; n];
        let mut allowed = vec![0u64; n];
        for (idx, modes) in &file.allowed {
            let q = model
                .grid()
                .linear_index(idx)
                .ok_or_else(|| SynthError::Format(format!("index {idx:?} outside the grid")))?;
            if modes.is_empty() {
                return Err(SynthError::Format(format!("state {idx:?} has no modes")));
            }
            for name in modes {
                let p = file
                    .modes
                    .iter()
                    .position(|m| m == name)
                    .ok_or_else(|| SynthError::Format(format!("unknown mode `{name}`")))?;
                allowed[q] |= 1 << p;
            }
            safe.set(q, true);
        }
        if safe.count_ones() != file.safe_states {
            return Err(SynthError::Format("safe state count does not match the entries".into()));
        }
        for q in safe.iter_ones() {
            for p in 0..model.num_modes() {
                if allowed[q] >> p & 1 == 1 && !model.successor(q, Mode(p)).is_some_and(|s| safe[s]) {
                    return Err(SynthError::Format(format!("mode {p} leaves the safe set from {q}")));
                }
            }
        }
        let safe_list = safe.iter_ones().collect();
        Ok(SafetyController {
            safe,
            allowed,
            safe_list,
            target: file.target,
            num_modes: model.num_modes(),
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ControllerFile {
    modes: Vec<String>,
    total_states: usize,
    safe_states: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target: Option<StateBox>,
    allowed: Vec<(Vec<usize>, Vec<String>)>,
}

/// Maximal controlled invariant of the model inside `target`.
pub fn synthesize_safety(model: &SymbolicModel, target: &StateBox) -> Result<SafetyController, SynthError> {
    if !target.is_subset_of(&model.grid().domain()) {
        return Err(SynthError::Invalid("target box is not inside the model box".into()));
    }
    let n = model.num_states();
    let inside: Vec<bool> = (0..n)
        .into_par_iter()
        .map(|q| target.contains(&model.coords(q)))
        .collect();
    let initial: BitVec = inside.into_iter().collect();
    SafetyController::from_table(model, &initial, Some(target.clone()))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionPolicy {
    #[default]
    LeastMode,
    RoundRobin,
    SeededRandom {
        seed: u64,
    },
}

/// Picks one of `allowed` (nonempty, increasing).
fn pick(policy: SelectionPolicy, allowed: &[Mode], last: Option<Mode>, num_modes: usize, rng: &mut ChaCha8Rng) -> Mode {
    match policy {
        SelectionPolicy::LeastMode => allowed[0],
        SelectionPolicy::RoundRobin => {
            let start = last.map_or(0, |p| (p.0 + 1) % num_modes);
            *allowed.iter().find(|p| p.0 >= start).unwrap_or(&allowed[0])
        }
        SelectionPolicy::SeededRandom { .. } => allowed[rng.random_range(0..allowed.len())],
    }
}

/// Walks the symbolic closed loop from `q0`; returns the chosen modes and
/// the visited states (`periods + 1` of them).
pub fn walk<T: TransitionTable + ?Sized>(
    ctrl: &SafetyController,
    model: &T,
    q0: usize,
    periods: usize,
    policy: SelectionPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Mode>, Vec<usize>), SynthError> {
    if !ctrl.is_safe(q0) {
        return Err(SynthError::NotSafe(q0));
    }
    let mut modes = Vec::with_capacity(periods);
    let mut trace = Vec::with_capacity(periods + 1);
    let mut q = q0;
    trace.push(q);
    for _ in 0..periods {
        let allowed = ctrl.allowed(q);
        let p = pick(policy, &allowed, modes.last().copied(), ctrl.num_modes(), rng);
        q = model.successor(q, p).expect("admissible modes stay in the safe set");
        modes.push(p);
        trace.push(q);
    }
    Ok((modes, trace))
}

/// τ-periodic signal of `periods` modes chosen along the symbolic closed loop.
pub fn extract_signal<T: TransitionTable + ?Sized>(
    ctrl: &SafetyController,
    model: &T,
    tau: f64,
    q0: usize,
    periods: usize,
    policy: SelectionPolicy,
) -> Result<SwitchingSignal, SynthError> {
    let seed = match policy {
        SelectionPolicy::SeededRandom { seed } => seed,
        _ => 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (modes, _) = walk(ctrl, model, q0, periods, policy, &mut rng)?;
    Ok(SwitchingSignal::periodic(tau, &modes, periods as f64 * tau)?)
}

/// Produces initial states and open-loop mode sequences for closed-loop trials.
pub trait Supervisor: Sync {
    fn initial_state(&self, rng: &mut ChaCha8Rng) -> Result<Vec<f64>, SynthError>;
    fn plan(&self, x0: &[f64], periods: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Mode>, SynthError>;
}

/// Open-loop signals read off the symbolic controller from a random safe state.
pub struct SymbolicSupervisor<'a> {
    pub model: &'a SymbolicModel,
    pub ctrl: &'a SafetyController,
    pub policy: SelectionPolicy,
}

fn random_safe_state(ctrl: &SafetyController, rng: &mut ChaCha8Rng) -> Result<usize, SynthError> {
    let safe = ctrl.safe_states();
    if safe.is_empty() {
        return Err(SynthError::EmptyController);
    }
    Ok(safe[rng.random_range(0..safe.len())])
}

impl Supervisor for SymbolicSupervisor<'_> {
    fn initial_state(&self, rng: &mut ChaCha8Rng) -> Result<Vec<f64>, SynthError> {
        Ok(self.model.coords(random_safe_state(self.ctrl, rng)?))
    }

    fn plan(&self, x0: &[f64], periods: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Mode>, SynthError> {
        let q0 = self
            .model
            .snap(x0)
            .ok_or_else(|| SynthError::Invalid("initial state outside the grid".into()))?;
        let mut walk_rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
        Ok(walk(self.ctrl, self.model, q0, periods, self.policy, &mut walk_rng)?.0)
    }
}

/// At each period start pick `below` if `x[coordinate] < threshold`, else `above`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdRule {
    pub coordinate: usize,
    pub threshold: f64,
    pub below: Mode,
    pub above: Mode,
}

impl ThresholdRule {
    pub fn choose(&self, x: &[f64]) -> Mode {
        if x[self.coordinate] < self.threshold {
            self.below
        } else {
            self.above
        }
    }
}

impl ModeChooser for ThresholdRule {
    fn choose(&self, x: &[f64], _: usize) -> Mode {
        ThresholdRule::choose(self, x)
    }
}

/// Threshold rule evaluated on the delay-free trajectory, initial states
/// uniform in `initial`.
pub struct ThresholdSupervisor<'a> {
    pub sys: &'a SwitchedSystem,
    pub rule: ThresholdRule,
    pub initial: StateBox,
    pub map: OnePeriodMap,
    pub tau: f64,
}

impl Supervisor for ThresholdSupervisor<'_> {
    fn initial_state(&self, rng: &mut ChaCha8Rng) -> Result<Vec<f64>, SynthError> {
        Ok(uniform_in(&self.initial, rng))
    }

    fn plan(&self, x0: &[f64], periods: usize, _: &mut ChaCha8Rng) -> Result<Vec<Mode>, SynthError> {
        let mut x = x0.to_vec();
        let mut modes = Vec::with_capacity(periods);
        for _ in 0..periods {
            let p = self.rule.choose(&x);
            x = self.map.apply(self.sys, &x, p, self.tau)?;
            modes.push(p);
        }
        Ok(modes)
    }
}

pub fn uniform_in(b: &StateBox, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..b.dim())
        .map(|d| rng.random_range(b.lower()[d]..=b.upper()[d]))
        .collect()
}

/// State feedback through the symbolic controller, evaluated on the
/// delay-free trajectory: among the admissible modes of the nearest grid
/// point, prefer one whose one-period image snaps into the safe set;
/// otherwise the mode keeping the image deepest inside the target box.
pub struct FeedbackSupervisor<'a> {
    pub sys: &'a SwitchedSystem,
    pub model: &'a SymbolicModel,
    pub ctrl: &'a SafetyController,
    pub map: OnePeriodMap,
}

impl FeedbackSupervisor<'_> {
    fn image(&self, x: &[f64], p: Mode) -> Option<Vec<f64>> {
        self.map.apply(self.sys, x, p, self.model.tau()).ok()
    }

    pub fn decide(&self, x: &[f64]) -> Mode {
        let candidates: Vec<Mode> = match self.model.snap(x) {
            Some(q) if self.ctrl.is_safe(q) => self.ctrl.allowed(q),
            _ => self.sys.modes().collect(),
        };
        for &p in &candidates {
            if let Some(y) = self.image(x, p) {
                if self.model.snap(&y).is_some_and(|q| self.ctrl.is_safe(q)) {
                    return p;
                }
            }
        }
        let score = |p: Mode| -> f64 {
            match (self.image(x, p), self.ctrl.target()) {
                (Some(y), Some(t)) => t.margin(&y),
                (Some(y), None) => self.model.grid().domain().margin(&y),
                _ => f64::NEG_INFINITY,
            }
        };
        self.sys
            .modes()
            .map(|p| (score(p), p))
            .fold(
                (f64::NEG_INFINITY, Mode(0)),
                |best, cur| if cur.0 > best.0 { cur } else { best },
            )
            .1
    }
}

impl ModeChooser for FeedbackSupervisor<'_> {
    fn choose(&self, x: &[f64], _: usize) -> Mode {
        self.decide(x)
    }
}

impl Supervisor for FeedbackSupervisor<'_> {
    fn initial_state(&self, rng: &mut ChaCha8Rng) -> Result<Vec<f64>, SynthError> {
        Ok(self.model.coords(random_safe_state(self.ctrl, rng)?))
    }

    fn plan(&self, x0: &[f64], periods: usize, _: &mut ChaCha8Rng) -> Result<Vec<Mode>, SynthError> {
        let mut x = x0.to_vec();
        let mut modes = Vec::with_capacity(periods);
        for _ in 0..periods {
            let p = self.decide(&x);
            x = self.map.apply(self.sys, &x, p, self.model.tau())?;
            modes.push(p);
        }
        Ok(modes)
    }
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub trials: usize,
    pub periods: usize,
    pub seed: u64,
    pub dt: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrialReport {
    pub trial: usize,
    pub x0: Vec<f64>,
    /// Smallest distance of the delay-free run to the faces of the safe box, minus ε.
    pub nominal_margin: f64,
    /// Smallest distance of the delayed run to the faces of the safe box.
    pub delayed_margin: f64,
    pub max_gap: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClosedLoopReport {
    pub epsilon: f64,
    pub trials: Vec<TrialReport>,
    pub nominal_violations: usize,
    pub delayed_violations: usize,
    pub gap_violations: usize,
    pub worst_nominal_margin: f64,
    pub worst_delayed_margin: f64,
    pub worst_gap: f64,
    pub passed: bool,
}

const GAP_SLACK: f64 = 1e-6;

/// Runs `trials` delay-free/delayed pairs and checks that the delay-free run
/// stays in the safe box shrunk by ε, the delayed run stays in the safe box,
/// and their gap stays below ε. Trial 0 uses zero delays and trial 1 uses
/// `δ0` everywhere; the others draw delays uniformly in `[0, δ0]`.
pub fn verify_closed_loop<S: Supervisor + ?Sized>(
    sys: &SwitchedSystem,
    supervisor: &S,
    safe: &StateBox,
    bound: &BoundResult,
    delta0: f64,
    opts: &VerifyOptions,
) -> Result<ClosedLoopReport, SynthError> {
    if opts.trials == 0 || opts.periods == 0 {
        return Err(SynthError::Invalid("trials and periods must be positive".into()));
    }
    let eps = bound.epsilon;
    let tau = bound.params.tau;
    let t_end = opts.periods as f64 * tau;
    let trials: Vec<TrialReport> = (0..opts.trials)
        .into_par_iter()
        .map(|i| -> Result<TrialReport, SynthError> {
            let mut rng = sample_rng(opts.seed, i as u64);
            let x0 = supervisor.initial_state(&mut rng)?;
            let modes = supervisor.plan(&x0, opts.periods, &mut rng)?;
            let base = SwitchingSignal::periodic(tau, &modes, t_end)?;
            let delays: Vec<f64> = (1..opts.periods)
                .map(|_| match i {
                    0 => 0.0,
                    1 => delta0,
                    _ if delta0 > 0.0 => rng.random_range(0.0..=delta0),
                    _ => 0.0,
                })
                .collect();
            let prof = compare_delayed(sys, &base, delta0, &delays, &x0, t_end, opts.dt)?;
            let nominal_margin = prof
                .nominal
                .iter()
                .map(|(_, x, _)| safe.margin(x))
                .fold(f64::INFINITY, f64::min)
                - eps;
            let delayed_margin = prof
                .delayed
                .iter()
                .map(|(_, x, _)| safe.margin(x))
                .fold(f64::INFINITY, f64::min);
            let passed = nominal_margin >= 0.0 && delayed_margin >= 0.0 && prof.max <= eps + GAP_SLACK;
            Ok(TrialReport {
                trial: i,
                x0,
                nominal_margin,
                delayed_margin,
                max_gap: prof.max,
                passed,
            })
        })
        .collect::<Result<_, _>>()?;
    let nominal_violations = trials.iter().filter(|t| !(t.nominal_margin >= 0.0)).count();
    let delayed_violations = trials.iter().filter(|t| !(t.delayed_margin >= 0.0)).count();
    let gap_violations = trials.iter().filter(|t| !(t.max_gap <= eps + GAP_SLACK)).count();
    let min = |f: fn(&TrialReport) -> f64| trials.iter().map(f).fold(f64::INFINITY, f64::min);
    Ok(ClosedLoopReport {
        epsilon: eps,
        worst_nominal_margin: min(|t| t.nominal_margin),
        worst_delayed_margin: min(|t| t.delayed_margin),
        worst_gap: trials.iter().map(|t| t.max_gap).fold(0.0, f64::max),
        passed: nominal_violations == 0 && delayed_violations == 0 && gap_violations == 0,
        nominal_violations,
        delayed_violations,
        gap_violations,
        trials,
    })
}

/// Controller summary for reports.
pub fn summarize(ctrl: &SafetyController, model: &SymbolicModel) -> BTreeMap<&'static str, serde_json::Value> {
    let mut m = BTreeMap::new();
    m.insert("total_states", model.num_states().into());
    m.insert("safe_states", ctrl.len().into());
    m.insert("eta", model.eta().into());
    m.insert("counts", model.grid().counts.clone().into());
    m
}
