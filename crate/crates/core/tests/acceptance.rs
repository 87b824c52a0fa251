#![allow(clippy::needless_range_loop)]

//! End-to-end acceptance checks. Prints one line per criterion and exits
//! nonzero if any of them fails.

use std::time::Instant;

use bitvec::prelude::*;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use switchbound::certs::{check_certificate, estimate_nu, ClassK, LyapunovCertificate, LyapunovFn, DEFAULT_NU_SAFETY};
use switchbound::config::{ControllerChoice, SystemConfig};
use switchbound::delaybound::{
    bound_common, bound_multiple, check_bisimulation, compare_delayed, sample_rng, BisimOptions, BoundResult,
    DelayRecurrence, DelayedPair,
};
use switchbound::demos;
use switchbound::symabs::{build_symbolic, max_eta, AbstractionOptions, OnePeriodMap, SymbolicModel};
use switchbound::synth::{
    shrink_box, synthesize_safety, verify_closed_loop, ExplicitModel, FeedbackSupervisor, SafetyController,
    SelectionPolicy, Supervisor, SymbolicSupervisor, ThresholdSupervisor, TransitionTable, VerifyOptions,
};
use switchbound::sysmodel::{Mode, SwitchingSignal};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn nu_of(cfg: &SystemConfig) -> f64 {
    cfg.pinned_nu().expect("demo certificates pin nu")
}

fn demo_bound(cfg: &SystemConfig) -> BoundResult {
    switchbound::delaybound::bound(&cfg.certificate, nu_of(cfg), cfg.tau, cfg.delta0, 64).unwrap()
}

fn criterion_1() -> Outcome {
    let cfg = demos::dcdc();
    let r = bound_common(&cfg.certificate, 0.41, 0.5, 0.0005, 64).map_err(|e| e.to_string())?;
    check(
        (r.epsilon - 0.0294176).abs() <= 1e-6,
        format!("epsilon = {:.7}", r.epsilon),
    )
}

fn criterion_2() -> Outcome {
    let cfg = demos::water_tank();
    let mu = 2.0 * 6f64.sqrt() / 3.0;
    let r = bound_multiple(&cfg.certificate, 2.94, 10.0, 0.1, 64).map_err(|e| e.to_string())?;
    let dwell = mu.ln() / 0.1;
    check(
        (cfg.certificate.mu - mu).abs() < 1e-15
            && (r.epsilon - 0.747678).abs() <= 1e-6
            && r.dwell_time_ok
            && 9.9 > dwell
            && (dwell - 4.905).abs() < 1e-3,
        format!("epsilon = {:.6}, ln(mu)/kappa = {dwell:.4} < 9.9", r.epsilon),
    )
}

/// Symbolic controller on the full safe box, used to generate DC-DC signals
/// that keep the state where the certificate constants hold.
struct DcdcFeedback {
    cfg: SystemConfig,
    model: SymbolicModel,
    ctrl: SafetyController,
}

impl DcdcFeedback {
    fn new() -> Self {
        let cfg = demos::dcdc();
        let opts = AbstractionOptions {
            dt: 1e-3 * cfg.tau,
            ..Default::default()
        };
        let model = build_symbolic(&cfg.system, &cfg.safe_box, 1e-3, cfg.tau, &opts).unwrap();
        let ctrl = synthesize_safety(&model, &cfg.safe_box).unwrap();
        DcdcFeedback { cfg, model, ctrl }
    }

    fn supervisor(&self) -> FeedbackSupervisor<'_> {
        FeedbackSupervisor {
            sys: &self.cfg.system,
            model: &self.model,
            ctrl: &self.ctrl,
            map: OnePeriodMap::for_system(&self.cfg.system, self.cfg.tau, 1e-3 * self.cfg.tau),
        }
    }
}

struct Soundness {
    trials: usize,
    max_dev: f64,
    worst_switch_excess: f64,
}

/// Trial 0 uses zero delays, trial 1 uses `δ0` everywhere, the rest are uniform.
fn soundness_run<S: Supervisor + ?Sized>(
    cfg: &SystemConfig,
    sup: &S,
    bound: &BoundResult,
    random_trials: usize,
    periods: usize,
    dt: f64,
    seed: u64,
) -> Result<Soundness, String> {
    let t_end = periods as f64 * cfg.tau;
    let results: Vec<(f64, f64)> = (0..random_trials + 2)
        .into_par_iter()
        .map(|i| -> Result<(f64, f64), String> {
            let mut rng = sample_rng(seed, i as u64);
            let x0 = sup.initial_state(&mut rng).map_err(|e| e.to_string())?;
            let modes = sup.plan(&x0, periods, &mut rng).map_err(|e| e.to_string())?;
            let base = SwitchingSignal::periodic(cfg.tau, &modes, t_end).map_err(|e| e.to_string())?;
            let delays: Vec<f64> = (1..periods)
                .map(|_| match i {
                    0 => 0.0,
                    1 => cfg.delta0,
                    _ => rng.random_range(0.0..=cfg.delta0),
                })
                .collect();
            let prof =
                compare_delayed(&cfg.system, &base, cfg.delta0, &delays, &x0, t_end, dt).map_err(|e| e.to_string())?;
            let excess = prof
                .running
                .iter()
                .zip(&bound.per_switch)
                .map(|(r, b)| r - b)
                .fold(f64::NEG_INFINITY, f64::max);
            Ok((prof.max, excess))
        })
        .collect::<Result<_, _>>()?;
    Ok(Soundness {
        trials: results.len(),
        max_dev: results.iter().map(|r| r.0).fold(0.0, f64::max),
        worst_switch_excess: results.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max),
    })
}

fn criterion_3(fb: &DcdcFeedback) -> Outcome {
    let cfg = &fb.cfg;
    let bound = demo_bound(cfg);
    let s = soundness_run(cfg, &fb.supervisor(), &bound, 1000, 50, 5e-4, 3)?;
    check(
        s.max_dev <= 0.0294176 + 1e-6 && s.worst_switch_excess <= 1e-6,
        format!(
            "{} trials, max deviation {:.3e} (bound {:.7}), worst per-switch excess {:.3e}",
            s.trials, s.max_dev, bound.epsilon, s.worst_switch_excess
        ),
    )
}

fn water_tank_supervisor(cfg: &SystemConfig, eps: f64) -> ThresholdSupervisor<'_> {
    let ControllerChoice::Threshold(rule) = cfg.controller.clone() else {
        panic!("water tank demo uses the threshold controller")
    };
    ThresholdSupervisor {
        sys: &cfg.system,
        rule,
        initial: shrink_box(&cfg.safe_box, eps).unwrap(),
        map: OnePeriodMap::Rk4 { dt: cfg.dt() },
        tau: cfg.tau,
    }
}

fn criterion_4() -> Outcome {
    let cfg = demos::water_tank();
    let bound = demo_bound(&cfg);
    let sup = water_tank_supervisor(&cfg, bound.epsilon);
    let s = soundness_run(&cfg, &sup, &bound, 1000, 50, cfg.dt(), 4)?;
    check(
        s.max_dev <= 0.747678 + 1e-5 && s.worst_switch_excess <= 1e-5,
        format!(
            "{} trials, max deviation {:.4e} (bound {:.6}), worst per-switch excess {:.3e}",
            s.trials, s.max_dev, bound.epsilon, s.worst_switch_excess
        ),
    )
}

fn recurrence_ok(cert: &LyapunovCertificate, nu: f64, tau: f64, delta0: f64) -> Result<(), String> {
    let rec = DelayRecurrence::new(cert, nu, tau, delta0).map_err(|e| e.to_string())?;
    let fp = rec.fixed_point().map_err(|e| e.to_string())?;
    let mut e = 0.0;
    for k in 0..=100 {
        if k > 0 {
            let next = rec.g(e).map_err(|e| e.to_string())?;
            if next < e {
                return Err(format!("decreasing at k={k}"));
            }
            e = next;
        }
        let closed = rec.closed_form(0.0, k).map_err(|e| e.to_string())?;
        if (closed - e).abs() > 1e-10 {
            return Err(format!("k={k}: replay {e} vs closed form {closed}"));
        }
        if e > fp * (1.0 + 1e-12) {
            return Err(format!("k={k}: {e} above the fixed point {fp}"));
        }
    }
    for _ in 0..200_000 {
        if (fp - e).abs() <= 1e-9 * fp.max(1e-300) {
            return Ok(());
        }
        e = rec.g(e).map_err(|e| e.to_string())?;
    }
    Err(format!("no convergence: {e} vs {fp}"))
}

fn criterion_5() -> Outcome {
    for cfg in [demos::dcdc(), demos::water_tank()] {
        recurrence_ok(&cfg.certificate, nu_of(&cfg), cfg.tau, cfg.delta0)
            .map_err(|e| format!("{}: {e}", cfg.name()))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut tuples = 0;
    while tuples < 100 {
        let tau = rng.random_range(0.1..10.0);
        let delta0 = rng.random_range(0.0..0.5 * tau);
        let kappa = rng.random_range(0.01..1.0);
        let nu = rng.random_range(0.0..5.0);
        let alpha = if rng.random_bool(0.5) {
            ClassK::linear(rng.random_range(0.5..2.0)).unwrap()
        } else {
            ClassK::power(rng.random_range(0.5..2.0), rng.random_range(0.5..3.0), None).unwrap()
        };
        let mu: f64 = if rng.random_bool(0.5) {
            1.0
        } else {
            rng.random_range(1.0..3.0)
        };
        if (tau - delta0) <= mu.ln() / kappa {
            continue;
        }
        let v = LyapunovFn::Quadratic {
            m: DMatrix::identity(1, 1),
        };
        let cert = if mu == 1.0 {
            LyapunovCertificate::common(v, alpha.clone(), alpha, kappa, None, None)
        } else {
            LyapunovCertificate::multiple(vec![v.clone(), v], alpha.clone(), alpha, kappa, mu, None, None)
        }
        .unwrap();
        recurrence_ok(&cert, nu, tau, delta0)
            .map_err(|e| format!("tau={tau} delta0={delta0} kappa={kappa} nu={nu} mu={mu}: {e}"))?;
        tuples += 1;
    }
    Ok("both demos and 100 random tuples agree, nondecreasing, convergent".into())
}

fn criterion_6(fb: &DcdcFeedback) -> Outcome {
    let cfg = &fb.cfg;
    let bound = demo_bound(cfg);
    let rec = DelayRecurrence::new(&cfg.certificate, nu_of(cfg), cfg.tau, cfg.delta0).unwrap();
    let pair = DelayedPair {
        sys: &cfg.system,
        tau: cfg.tau,
        delta0: cfg.delta0,
        dt: 1e-3 * cfg.tau,
    };
    let sup = fb.supervisor();
    let opts = BisimOptions {
        epsilon: bound.epsilon,
        samples: 200,
        steps: 20,
        seed: 42,
        adversarial: false,
    };
    let initial = |rng: &mut ChaCha8Rng| {
        let safe = fb.ctrl.safe_states();
        fb.model.coords(safe[rng.random_range(0..safe.len())])
    };
    let rep = check_bisimulation(&pair, &cfg.certificate, &rec, &sup, initial, &opts).map_err(|e| e.to_string())?;
    check(
        rep.passed(),
        format!(
            "{} checks, plain {} / incrementing {} violations, max premetric {:.3e}, max V' {:.3e}",
            rep.checks, rep.plain_violations, rep.incrementing_violations, rep.max_premetric, rep.max_v_prime
        ),
    )
}

fn brute_force(m: &ExplicitModel, initial: &[bool]) -> Vec<bool> {
    let n = m.num_states();
    let mut best = vec![false; n];
    for mask in 0u32..(1 << n) {
        let inside = |q: usize| mask >> q & 1 == 1;
        if (0..n).any(|q| inside(q) && !initial[q]) {
            continue;
        }
        let invariant = (0..n)
            .filter(|&q| inside(q))
            .all(|q| (0..m.num_modes).any(|p| m.succ[q][p].is_some_and(inside)));
        if invariant {
            for q in 0..n {
                best[q] |= inside(q);
            }
        }
    }
    best
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..200 {
        let n = rng.random_range(1..=12);
        let modes = rng.random_range(1..=3);
        let succ = (0..n)
            .map(|_| {
                (0..modes)
                    .map(|_| {
                        if rng.random_bool(0.2) {
                            None
                        } else {
                            Some(rng.random_range(0..n))
                        }
                    })
                    .collect()
            })
            .collect();
        let m = ExplicitModel { num_modes: modes, succ };
        let initial: Vec<bool> = (0..n).map(|_| rng.random_bool(0.8)).collect();
        let bits: BitVec = initial.iter().copied().collect();
        let ctrl = SafetyController::from_table(&m, &bits, None).map_err(|e| e.to_string())?;
        let expected = brute_force(&m, &initial);
        for q in 0..n {
            if ctrl.is_safe(q) != expected[q] {
                return Err(format!("case {case}: membership of state {q} differs"));
            }
            let want: Vec<Mode> = (0..modes)
                .filter(|&p| expected[q] && m.succ[q][p].is_some_and(|s| expected[s]))
                .map(Mode)
                .collect();
            if ctrl.allowed(q) != want {
                return Err(format!("case {case}: admissible modes of state {q} differ"));
            }
        }
    }
    Ok("200 random models match exhaustive enumeration".into())
}

fn workflow(eps2: f64) -> Result<String, String> {
    let cfg = demos::dcdc();
    let bound = demo_bound(&cfg);
    let eps1 = bound.epsilon;
    let eta = max_eta(&cfg.certificate, cfg.tau, eps2).map_err(|e| e.to_string())?;
    let opts = AbstractionOptions {
        dt: cfg.dt(),
        cap: cfg.workflow.grid_cap,
        eps2: Some(eps2),
        eta_limit: Some(eta),
        affine_fast_path: true,
    };
    let model = build_symbolic(&cfg.system, &cfg.safe_box, eta, cfg.tau, &opts).map_err(|e| e.to_string())?;
    let target = shrink_box(&cfg.safe_box, eps1 + eps2).map_err(|e| e.to_string())?;
    let ctrl = synthesize_safety(&model, &target).map_err(|e| e.to_string())?;
    let head = format!(
        "eps2={eps2}: eta {eta:.4e}, grid {:?} ({} states), safe {}",
        model.grid().counts,
        model.num_states(),
        ctrl.len()
    );
    if ctrl.is_empty() {
        return Err(format!("{head}, controller empty"));
    }
    let sup = SymbolicSupervisor {
        model: &model,
        ctrl: &ctrl,
        policy: SelectionPolicy::LeastMode,
    };
    let vopts = VerifyOptions {
        trials: 100,
        periods: 100,
        seed: cfg.workflow.seed,
        dt: cfg.dt(),
    };
    let rep = verify_closed_loop(&cfg.system, &sup, &cfg.safe_box, &bound, cfg.delta0, &vopts)
        .map_err(|e| format!("{head}, {e}"))?;
    check(
        rep.passed,
        format!(
            "{head}, violations nominal {} delayed {} gap {}",
            rep.nominal_violations, rep.delayed_violations, rep.gap_violations
        ),
    )
}

fn criterion_8() -> Outcome {
    let start = Instant::now();
    let full = workflow(0.015);
    let full_time = start.elapsed().as_secs_f64();
    let start = Instant::now();
    let smoke = workflow(0.018);
    let smoke_time = start.elapsed().as_secs_f64();
    let line = |r: &Outcome| match r {
        Ok(s) | Err(s) => s.clone(),
    };
    let detail = format!(
        "[{}] ({full_time:.1}s); smoke [{}] ({smoke_time:.1}s)",
        line(&full),
        line(&smoke)
    );
    check(full.is_ok() && smoke.is_ok() && smoke_time <= 120.0, detail)
}

fn criterion_9() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for cfg in [demos::dcdc(), demos::water_tank()] {
        let rep = check_certificate(&cfg.system, &cfg.certificate, &cfg.safe_box, cfg.workflow.cert_grid)
            .map_err(|e| e.to_string())?;
        ok &= rep.passed();
        parts.push(format!(
            "{}: sandwich {} decay {} mu {} violations (worst {:.2e}/{:.2e}/{:.2e})",
            cfg.name(),
            rep.sandwich_violations,
            rep.decay_violations,
            rep.mu_violations,
            rep.worst_sandwich,
            rep.worst_decay,
            rep.worst_mu
        ));
        let est = estimate_nu(
            &cfg.system,
            &cfg.certificate,
            &cfg.safe_box,
            cfg.workflow.nu_grid,
            DEFAULT_NU_SAFETY,
        )
        .map_err(|e| e.to_string())?;
        let pinned = nu_of(&cfg);
        ok &= est.value <= pinned;
        parts.push(format!(
            "nu estimate {:.4} (grid max {:.4}) vs {pinned}",
            est.value, est.grid_max
        ));
    }
    check(ok, parts.join("; "))
}

fn criterion_10() -> Outcome {
    let dcdc = demos::dcdc();
    let zero = bound_common(&dcdc.certificate, 0.41, 0.5, 0.0, 64).map_err(|e| e.to_string())?;
    let base = SwitchingSignal::periodic(0.5, &[Mode(0), Mode(1), Mode(1), Mode(0)], 2.0).unwrap();
    let prof =
        compare_delayed(&dcdc.system, &base, 0.0, &[0.0; 3], &[1.5, 5.75], 2.0, 5e-4).map_err(|e| e.to_string())?;
    let identical = prof.nominal.times() == prof.delayed.times()
        && (0..prof.nominal.len()).all(|i| prof.nominal.state(i) == prof.delayed.state(i));

    let tank = demos::water_tank();
    let v = LyapunovFn::Quadratic {
        m: DMatrix::identity(1, 1),
    };
    let common =
        LyapunovCertificate::common(v.clone(), ClassK::identity(), ClassK::identity(), 0.1, None, None).unwrap();
    let mu_one = LyapunovCertificate::multiple(
        vec![v.clone(), v.clone()],
        ClassK::identity(),
        ClassK::identity(),
        0.1,
        1.0,
        None,
        None,
    )
    .unwrap();
    let a = bound_common(&common, 2.94, tank.tau, tank.delta0, 64).map_err(|e| e.to_string())?;
    let b = bound_multiple(&mu_one, 2.94, tank.tau, tank.delta0, 64).map_err(|e| e.to_string())?;

    let mu_bad = 1.2 * (0.1f64 * 9.9).exp();
    let bad = LyapunovCertificate::multiple(
        vec![v.clone(), v],
        ClassK::identity(),
        ClassK::identity(),
        0.1,
        mu_bad,
        None,
        None,
    )
    .unwrap();
    let r = bound_multiple(&bad, 2.94, 10.0, 0.1, 64).map_err(|e| e.to_string())?;

    let zero_ok = zero.epsilon == 0.0 && zero.per_switch.iter().all(|&v| v == 0.0) && prof.max == 0.0 && identical;
    let mu_ok = a.epsilon == b.epsilon && a.per_switch == b.per_switch;
    let dwell_ok = !r.dwell_time_ok
        && r.epsilon == f64::INFINITY
        && r.per_switch.iter().all(|v| v.is_finite())
        && r.per_switch.windows(2).all(|w| w[1] >= w[0]);
    check(
        zero_ok && mu_ok && dwell_ok,
        format!("zero delay {zero_ok}, mu = 1 reduction {mu_ok}, dwell-time violation {dwell_ok}"),
    )
}

fn main() {
    let fb = DcdcFeedback::new();
    let criteria: Vec<(usize, Box<dyn Fn() -> Outcome + '_>)> = vec![
        (1, Box::new(criterion_1)),
        (2, Box::new(criterion_2)),
        (3, Box::new(|| criterion_3(&fb))),
        (4, Box::new(criterion_4)),
        (5, Box::new(criterion_5)),
        (6, Box::new(|| criterion_6(&fb))),
        (7, Box::new(criterion_7)),
        (8, Box::new(criterion_8)),
        (9, Box::new(criterion_9)),
        (10, Box::new(criterion_10)),
    ];
    let mut failed = Vec::new();
    for (n, run) in &criteria {
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n:>2}: PASS ({secs:.1}s) {detail}"),
            Err(detail) => {
                println!("criterion {n:>2}: FAIL ({secs:.1}s) {detail}");
                failed.push(*n);
            }
        }
    }
    if failed.is_empty() {
        println!("acceptance: all {} criteria pass", criteria.len());
    } else {
        println!(
            "acceptance: {} of {} criteria fail: {failed:?}",
            failed.len(),
            criteria.len()
        );
        std::process::exit(1);
    }
}
