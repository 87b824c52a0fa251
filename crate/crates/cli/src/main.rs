use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use switchbound::certs::{check_certificate, estimate_nu, CertCheckReport};
use switchbound::config::{load_config, ControllerChoice, SystemConfig};
use switchbound::delaybound::{bound, BoundResult};
use switchbound::demos;
use switchbound::symabs::{build_symbolic, max_eta, AbstractionOptions, OnePeriodMap, SymbolicModel};
use switchbound::synth::{
    shrink_box, summarize, synthesize_safety, verify_closed_loop, ClosedLoopReport, SafetyController,
    SymbolicSupervisor, ThresholdSupervisor, VerifyOptions,
};
use switchbound::sysmodel::{simulate, Mode, SwitchingSignal};

const EXIT_VALIDATION: u8 = 1;
const EXIT_FINDINGS: u8 = 2;
const EXIT_USAGE: u8 = 64;

#[derive(Parser)]
#[command(
    name = "switchbound",
    version,
    about = "Switching-delay error bounds and safety synthesis for switched systems"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// System configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact output path.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Print machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// Treat failed sampled certificate checks as errors.
    #[arg(long, global = true)]
    strict_cert: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Delay error bound and per-switch sequence.
    Bound,
    /// Simulate the delay-free or delayed system and write a CSV trajectory.
    Simulate(SimulateArgs),
    /// Build the grid abstraction of the delay-free system.
    Abstract(AbstractArgs),
    /// Synthesize a safety controller on the shrunk safe box.
    Synthesize(SynthArgs),
    /// Closed-loop verification under random switching delays.
    Verify(VerifyArgs),
    /// Run a built-in example end to end.
    Demo(DemoArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Initial state, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x0: Vec<f64>,
    #[arg(long, default_value_t = 10)]
    periods: usize,
    /// Mode names, repeated cyclically; defaults to the threshold controller
    /// when configured, otherwise all modes in order.
    #[arg(long, value_delimiter = ',')]
    modes: Vec<String>,
    /// Draw switching delays uniformly in [0, delta0].
    #[arg(long)]
    delayed: bool,
    /// Integration step (defaults to the configured one).
    #[arg(long)]
    dt: Option<f64>,
}

#[derive(Args)]
struct AbstractArgs {
    #[arg(long)]
    eps2: Option<f64>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    eps2: Option<f64>,
    /// Previously exported model; built from the config when absent.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    eps2: Option<f64>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    controller: Option<PathBuf>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    periods: Option<usize>,
}

#[derive(Args)]
struct DemoArgs {
    /// dcdc or watertank
    name: String,
    /// Write the embedded configuration to this path and exit.
    #[arg(long)]
    emit_config: Option<PathBuf>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    periods: Option<usize>,
}

/// Error carrying its exit code.
#[derive(Debug)]
struct Exit(u8, String);

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.1)
    }
}

impl std::error::Error for Exit {}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Some(n) = std::env::var("SWITCHBOUND_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            let code = e.downcast_ref::<Exit>().map_or(EXIT_VALIDATION, |x| x.0);
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> Result<u8> {
    let c = cli.common;
    match cli.command {
        Command::Bound => cmd_bound(&c),
        Command::Simulate(a) => cmd_simulate(&c, a),
        Command::Abstract(a) => cmd_abstract(&c, a),
        Command::Synthesize(a) => cmd_synthesize(&c, a),
        Command::Verify(a) => cmd_verify(&c, a),
        Command::Demo(a) => cmd_demo(&c, a),
    }
}

fn load(c: &Common) -> Result<(SystemConfig, CertCheckReport)> {
    let path = c
        .config
        .as_ref()
        .ok_or_else(|| Exit(EXIT_USAGE, "--config is required for this command".into()))?;
    let cfg = load_config(path).with_context(|| format!("loading {}", path.display()))?;
    let report = certificate_gate(&cfg, c.strict_cert)?;
    Ok((cfg, report))
}

/// Runs the sampled certificate checks; failures warn unless `strict`.
fn certificate_gate(cfg: &SystemConfig, strict: bool) -> Result<CertCheckReport> {
    let report = check_certificate(&cfg.system, &cfg.certificate, &cfg.safe_box, cfg.workflow.cert_grid)?;
    if !report.passed() {
        let msg = format!(
            "certificate sampled checks failed: {} sandwich, {} decay, {} mode-ratio violations (worst {:.3e}, {:.3e}, {:.3e})",
            report.sandwich_violations,
            report.decay_violations,
            report.mu_violations,
            report.worst_sandwich,
            report.worst_decay,
            report.worst_mu
        );
        if strict {
            bail!(msg);
        }
        warn!("{msg}");
    }
    Ok(report)
}

fn resolve_nu(cfg: &SystemConfig) -> Result<(f64, bool)> {
    if let Some(nu) = cfg.pinned_nu() {
        return Ok((nu, true));
    }
    let est = estimate_nu(
        &cfg.system,
        &cfg.certificate,
        &cfg.safe_box,
        cfg.workflow.nu_grid,
        cfg.workflow.nu_safety_factor,
    )?;
    Ok((est.value, false))
}

fn compute_bound(cfg: &SystemConfig) -> Result<(BoundResult, bool)> {
    let (nu, pinned) = resolve_nu(cfg)?;
    Ok((
        bound(&cfg.certificate, nu, cfg.tau, cfg.delta0, cfg.workflow.per_switch)?,
        pinned,
    ))
}

fn cert_json(r: &CertCheckReport) -> Value {
    json!({
        "passed": r.passed(),
        "pairs": r.pairs,
        "sandwich_violations": r.sandwich_violations,
        "decay_violations": r.decay_violations,
        "mu_violations": r.mu_violations,
    })
}

fn print_json(v: &Value) -> Result<()> {
    // serde_json's default map keeps keys sorted
    let sorted: Value = serde_json::from_str(&v.to_string())?;
    let mut out = io::stdout().lock();
    writeln!(out, "{}", serde_json::to_string_pretty(&sorted)?)?;
    Ok(())
}

fn write_out(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn fmt_eps(e: f64) -> String {
    if e.is_finite() {
        format!("{e:.7}")
    } else {
        "inf".into()
    }
}

fn cmd_bound(c: &Common) -> Result<u8> {
    let (cfg, cert) = load(c)?;
    let (b, pinned) = compute_bound(&cfg)?;
    let mut v = serde_json::to_value(&b)?;
    v["nu_source"] = json!(if pinned { "pinned" } else { "estimated" });
    v["certificate_check"] = cert_json(&cert);
    if let Some(out) = &c.out {
        write_out(out, &serde_json::to_string_pretty(&v)?)?;
    }
    if c.json {
        print_json(&v)?;
    } else {
        println!("epsilon {}", fmt_eps(b.epsilon));
        println!(
            "dwell-time condition {}",
            if b.dwell_time_ok { "holds" } else { "fails" }
        );
        let shown: Vec<String> = b.per_switch.iter().take(6).map(|e| format!("{e:.6e}")).collect();
        println!("per-switch {} ...", shown.join(" "));
    }
    Ok(0)
}

fn cmd_simulate(c: &Common, a: SimulateArgs) -> Result<u8> {
    let (cfg, _) = load(c)?;
    let sys = &cfg.system;
    if a.x0.len() != sys.dim() {
        bail!("--x0 needs {} comma-separated values", sys.dim());
    }
    if a.periods == 0 {
        bail!("--periods must be positive");
    }
    let dt = a.dt.unwrap_or_else(|| cfg.dt());
    let modes: Vec<Mode> = if !a.modes.is_empty() {
        let named = a
            .modes
            .iter()
            .map(|n| sys.mode_by_name(n).ok_or_else(|| anyhow!("unknown mode `{n}`")))
            .collect::<Result<Vec<_>>>()?;
        (0..a.periods).map(|k| named[k % named.len()]).collect()
    } else if let ControllerChoice::Threshold(rule) = &cfg.controller {
        let map = OnePeriodMap::for_system(sys, cfg.tau, dt);
        let mut x = a.x0.clone();
        let mut seq = Vec::with_capacity(a.periods);
        for _ in 0..a.periods {
            let p = rule.choose(&x);
            x = map.apply(sys, &x, p, cfg.tau)?;
            seq.push(p);
        }
        seq
    } else {
        (0..a.periods).map(|k| Mode(k % sys.num_modes())).collect()
    };
    let t_end = a.periods as f64 * cfg.tau;
    let mut sig = SwitchingSignal::periodic(cfg.tau, &modes, t_end)?;
    if a.delayed {
        let seed = c.seed.unwrap_or(cfg.workflow.seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let delays: Vec<f64> = (1..a.periods)
            .map(|_| {
                if cfg.delta0 > 0.0 {
                    rng.random_range(0.0..=cfg.delta0)
                } else {
                    0.0
                }
            })
            .collect();
        sig = sig.delayed(cfg.delta0, &delays)?;
    }
    let traj = simulate(sys, &sig, &a.x0, t_end, dt)?;
    let mut buf = Vec::new();
    traj.write_csv(sys, &mut buf)?;
    match &c.out {
        Some(out) => fs::write(out, &buf).with_context(|| format!("writing {}", out.display()))?,
        None if !c.json => io::stdout().lock().write_all(&buf)?,
        None => {}
    }
    if c.json {
        print_json(&json!({
            "samples": traj.len(),
            "final_state": traj.final_state(),
            "events": sig.events().len(),
            "t_end": t_end,
        }))?;
    }
    Ok(0)
}

struct Pipeline {
    bound: BoundResult,
    eps2: f64,
    eta: f64,
    model: SymbolicModel,
}

fn eps2_of(cfg: &SystemConfig, flag: Option<f64>) -> Result<f64> {
    flag.or(cfg.workflow.eps2)
        .ok_or_else(|| anyhow!("eps2 is not configured; pass --eps2"))
}

fn build_model(cfg: &SystemConfig, eps2: f64) -> Result<(f64, SymbolicModel)> {
    let eta = max_eta(&cfg.certificate, cfg.tau, eps2)?;
    let opts = AbstractionOptions {
        dt: cfg.dt(),
        cap: cfg.workflow.grid_cap,
        eps2: Some(eps2),
        eta_limit: Some(eta),
        affine_fast_path: true,
    };
    Ok((eta, build_symbolic(&cfg.system, &cfg.safe_box, eta, cfg.tau, &opts)?))
}

fn pipeline(cfg: &SystemConfig, eps2_flag: Option<f64>, model_path: Option<&Path>) -> Result<Pipeline> {
    let (bound, _) = compute_bound(cfg)?;
    let eps2 = eps2_of(cfg, eps2_flag)?;
    let (eta, model) = match model_path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let m = SymbolicModel::from_json(&text)?;
            (m.eta(), m)
        }
        None => build_model(cfg, eps2)?,
    };
    Ok(Pipeline {
        bound,
        eps2,
        eta,
        model,
    })
}

fn synthesize(cfg: &SystemConfig, p: &Pipeline) -> Result<SafetyController> {
    if !p.bound.epsilon.is_finite() {
        bail!("the delay bound is infinite; no shrunk safe box exists");
    }
    let target = shrink_box(&cfg.safe_box, p.bound.epsilon + p.eps2)?;
    Ok(synthesize_safety(&p.model, &target)?)
}

fn cmd_abstract(c: &Common, a: AbstractArgs) -> Result<u8> {
    let (cfg, _) = load(c)?;
    let eps2 = eps2_of(&cfg, a.eps2)?;
    let (eta, model) = build_model(&cfg, eps2)?;
    if let Some(out) = &c.out {
        write_out(out, &model.to_json())?;
    }
    let summary = json!({
        "eps2": eps2,
        "eta": eta,
        "counts": model.grid().counts,
        "states": model.num_states(),
    });
    if c.json {
        print_json(&summary)?;
    } else {
        println!("eta {eta:.6e}");
        println!("grid {:?} ({} states)", model.grid().counts, model.num_states());
    }
    Ok(0)
}

fn cmd_synthesize(c: &Common, a: SynthArgs) -> Result<u8> {
    let (cfg, _) = load(c)?;
    let p = pipeline(&cfg, a.eps2, a.model.as_deref())?;
    let ctrl = synthesize(&cfg, &p)?;
    if let Some(out) = &c.out {
        write_out(out, &ctrl.to_json(&p.model))?;
    }
    let mut summary = serde_json::to_value(summarize(&ctrl, &p.model))?;
    summary["epsilon"] = json!(p.bound.epsilon);
    summary["eps2"] = json!(p.eps2);
    if c.json {
        print_json(&summary)?;
    } else {
        println!("epsilon {}", fmt_eps(p.bound.epsilon));
        println!("eta {:.6e}", p.eta);
        if ctrl.is_empty() {
            println!("safe set empty: no mode choice keeps any grid state inside the shrunk box");
        } else {
            println!("safe states {} of {}", ctrl.len(), p.model.num_states());
        }
    }
    Ok(0)
}

fn verify_options(cfg: &SystemConfig, c: &Common, trials: Option<usize>, periods: Option<usize>) -> VerifyOptions {
    VerifyOptions {
        trials: trials.unwrap_or(cfg.workflow.trials),
        periods: periods.unwrap_or(cfg.workflow.periods),
        seed: c.seed.unwrap_or(cfg.workflow.seed),
        dt: cfg.dt(),
    }
}

/// Verification outcome as JSON plus pass/fail.
fn run_verification(
    cfg: &SystemConfig,
    opts: &VerifyOptions,
    eps2: Option<f64>,
    model_path: Option<&Path>,
    ctrl_path: Option<&Path>,
) -> Result<(Value, bool)> {
    match &cfg.controller {
        ControllerChoice::Threshold(rule) => {
            let (b, _) = compute_bound(cfg)?;
            if !b.epsilon.is_finite() {
                bail!("the delay bound is infinite");
            }
            let sup = ThresholdSupervisor {
                sys: &cfg.system,
                rule: rule.clone(),
                initial: shrink_box(&cfg.safe_box, b.epsilon)?,
                map: OnePeriodMap::for_system(&cfg.system, cfg.tau, cfg.dt()),
                tau: cfg.tau,
            };
            let rep = verify_closed_loop(&cfg.system, &sup, &cfg.safe_box, &b, cfg.delta0, opts)?;
            Ok((report_json(&rep), rep.passed))
        }
        ControllerChoice::Symbolic(policy) => {
            let p = pipeline(cfg, eps2, model_path)?;
            let ctrl = match ctrl_path {
                Some(path) => {
                    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                    SafetyController::from_json(&text, &p.model)?
                }
                None => synthesize(cfg, &p)?,
            };
            let mut v = json!({
                "epsilon": p.bound.epsilon,
                "eps2": p.eps2,
                "controller": summarize(&ctrl, &p.model),
            });
            if ctrl.is_empty() {
                v["passed"] = json!(false);
                v["finding"] = json!("safe set empty");
                return Ok((v, false));
            }
            let sup = SymbolicSupervisor {
                model: &p.model,
                ctrl: &ctrl,
                policy: *policy,
            };
            let rep = verify_closed_loop(&cfg.system, &sup, &cfg.safe_box, &p.bound, cfg.delta0, opts)?;
            let mut full = report_json(&rep);
            full["eps2"] = v["eps2"].take();
            full["controller"] = v["controller"].take();
            Ok((full, rep.passed))
        }
    }
}

fn report_json(rep: &ClosedLoopReport) -> Value {
    serde_json::to_value(rep).expect("report serializes")
}

fn print_verification(v: &Value, passed: bool) {
    let get = |k: &str| v.get(k).cloned().unwrap_or(Value::Null);
    println!("epsilon {}", get("epsilon").as_f64().map_or("inf".into(), fmt_eps));
    if let Some(f) = v.get("finding") {
        println!("finding: {}", f.as_str().unwrap_or_default());
    } else {
        println!(
            "violations: nominal {} delayed {} gap {}",
            get("nominal_violations"),
            get("delayed_violations"),
            get("gap_violations")
        );
        println!("worst gap {}", get("worst_gap"));
    }
    println!("containment {}", if passed { "PASS" } else { "FAIL" });
}

fn cmd_verify(c: &Common, a: VerifyArgs) -> Result<u8> {
    let (cfg, cert) = load(c)?;
    let opts = verify_options(&cfg, c, a.trials, a.periods);
    let (mut v, passed) = run_verification(&cfg, &opts, a.eps2, a.model.as_deref(), a.controller.as_deref())?;
    v["certificate_check"] = cert_json(&cert);
    if let Some(out) = &c.out {
        write_out(out, &serde_json::to_string_pretty(&v)?)?;
    }
    if c.json {
        print_json(&v)?;
    } else {
        print_verification(&v, passed);
    }
    Ok(if passed { 0 } else { EXIT_FINDINGS })
}

fn cmd_demo(c: &Common, a: DemoArgs) -> Result<u8> {
    let (cfg, text) = demos::by_name(&a.name).ok_or_else(|| {
        Exit(
            EXIT_USAGE,
            format!("unknown demo `{}`; choose one of {}", a.name, demos::NAMES.join(", ")),
        )
    })?;
    if let Some(path) = &a.emit_config {
        write_out(path, text)?;
        if !c.json {
            println!("wrote {}", path.display());
        }
        return Ok(0);
    }
    let cert = certificate_gate(&cfg, c.strict_cert)?;
    let (b, _) = compute_bound(&cfg)?;
    let opts = verify_options(&cfg, c, a.trials, a.periods);
    let (mut v, passed) = run_verification(&cfg, &opts, None, None, None)?;
    v["demo"] = json!(a.name);
    v["per_switch"] = json!(b.per_switch);
    v["dwell_time_ok"] = json!(b.dwell_time_ok);
    v["certificate_check"] = cert_json(&cert);
    if let Some(out) = &c.out {
        write_out(out, &serde_json::to_string_pretty(&v)?)?;
    }
    if c.json {
        print_json(&v)?;
    } else {
        println!("demo {}", a.name);
        if !cert.passed() {
            println!("certificate sampled checks: FAIL (see warnings)");
        }
        print_verification(&v, passed);
    }
    Ok(if passed { 0 } else { EXIT_FINDINGS })
}
