//! Error bounds for switching delays in incrementally stable switched
//! systems, plus a grid abstraction and safety synthesis workflow that
//! uses those bounds to keep delayed closed loops inside a safe box.
//!
//! Modules, bottom up:
//!
//! - [`expr`]: arithmetic expressions for user-defined dynamics and certificates.
//! - [`sysmodel`]: switched systems, switching signals, RK4 simulation.
//! - [`certs`]: Lyapunov certificates, class-K functions, sampled checks.
//! - [`delaybound`]: delay error bounds and bisimulation checks.
//! - [`symabs`]: uniform-grid symbolic abstraction.
//! - [`synth`]: safety synthesis and closed-loop verification.
//! - [`config`], [`demos`]: JSON configuration and the built-in examples.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod certs;
pub mod config;
pub mod delaybound;
pub mod demos;
pub mod expr;
pub mod symabs;
pub mod synth;
pub mod sysmodel;

pub use certs::{check_certificate, estimate_nu, ClassK, LyapunovCertificate, StateBox};
pub use config::{load_config, SystemConfig};
pub use delaybound::{bound, bound_common, bound_multiple, check_bisimulation, BoundResult};
pub use expr::{parse, Expression};
pub use symabs::{build_symbolic, max_eta, SymbolicModel};
pub use synth::{extract_signal, shrink_box, synthesize_safety, verify_closed_loop, SafetyController};
pub use sysmodel::{flow_constant, simulate, Mode, SwitchedSystem, SwitchingSignal, Trajectory};
