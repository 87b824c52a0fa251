//! JSON configuration: system, timing, safe box, certificate and workflow knobs.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::certs::{CertificateSpec, LyapunovCertificate, StateBox, DEFAULT_NU_SAFETY};
use crate::expr;
use crate::synth::{SelectionPolicy, ThresholdRule};
use crate::sysmodel::{ModeSpec, SwitchedSystem, VectorField};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("JSON error at `{path}`: {message}")]
    Parse { path: String, message: String },
    #[error("invalid `{field}`: {message}")]
    Validation { field: String, message: String },
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Validation {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineSpec {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

/// One mode: exactly one of `affine` and `field` must be present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeEntry {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub affine: Option<AffineSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CertificateRef {
    File { file: String },
    Inline(Box<CertificateSpec>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ControllerSpec {
    /// Safety controller synthesized on the symbolic model.
    Symbolic {
        #[serde(default)]
        policy: SelectionPolicy,
    },
    /// Period-start rule: `below` if `x[coordinate] < threshold`, else `above`.
    /// `coordinate` is 1-based.
    Threshold {
        coordinate: usize,
        threshold: f64,
        below: String,
        above: String,
    },
}

impl Default for ControllerSpec {
    fn default() -> Self {
        ControllerSpec::Symbolic {
            policy: SelectionPolicy::default(),
        }
    }
}

fn default_grid_cap() -> usize {
    5_000_000
}
fn default_seed() -> u64 {
    42
}
fn default_nu_grid() -> usize {
    41
}
fn default_cert_grid() -> usize {
    11
}
fn default_trials() -> usize {
    100
}
fn default_periods() -> usize {
    100
}
fn default_per_switch() -> usize {
    64
}
fn default_nu_safety() -> f64 {
    DEFAULT_NU_SAFETY
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkflowSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps2: Option<f64>,
    #[serde(default = "default_grid_cap")]
    pub grid_cap: usize,
    /// Integration step; `None` means `1e-3 * tau`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_nu_grid")]
    pub nu_grid: usize,
    #[serde(default = "default_cert_grid")]
    pub cert_grid: usize,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_periods")]
    pub periods: usize,
    #[serde(default = "default_per_switch")]
    pub per_switch: usize,
    #[serde(default = "default_nu_safety")]
    pub nu_safety_factor: f64,
}

impl Default for WorkflowSpec {
    fn default() -> Self {
        WorkflowSpec {
            eps2: None,
            grid_cap: default_grid_cap(),
            dt: None,
            seed: default_seed(),
            nu_grid: default_nu_grid(),
            cert_grid: default_cert_grid(),
            trials: default_trials(),
            periods: default_periods(),
            per_switch: default_per_switch(),
            nu_safety_factor: default_nu_safety(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// The on-disk document, kept verbatim for lossless round trips.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub dimension: usize,
    pub modes: Vec<ModeEntry>,
    pub tau: f64,
    pub delta0: f64,
    pub safe_box: BoxSpec,
    pub certificate: CertificateRef,
    #[serde(default)]
    pub workflow: WorkflowSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controller: Option<ControllerSpec>,
}

#[derive(Debug, Clone)]
pub enum ControllerChoice {
    Symbolic(SelectionPolicy),
    Threshold(ThresholdRule),
}

/// Fully validated configuration.
#[derive(Debug, Clone)]
pub struct SystemConfig {
    pub raw: ConfigFile,
    pub system: SwitchedSystem,
    pub tau: f64,
    pub delta0: f64,
    pub safe_box: StateBox,
    pub certificate: LyapunovCertificate,
    pub certificate_spec: CertificateSpec,
    pub workflow: WorkflowSpec,
    pub controller: ControllerChoice,
}

impl SystemConfig {
    pub fn name(&self) -> &str {
        self.raw.name.as_deref().unwrap_or("system")
    }

    /// Integration step: the configured value or `1e-3 * tau`.
    pub fn dt(&self) -> f64 {
        self.workflow.dt.unwrap_or(1e-3 * self.tau)
    }

    /// Pinned ν from the certificate, if any.
    pub fn pinned_nu(&self) -> Option<f64> {
        self.certificate.nu
    }

    /// Serializes the document as it was loaded, with the certificate inlined.
    pub fn to_json_pretty(&self) -> String {
        let mut raw = self.raw.clone();
        raw.certificate = CertificateRef::Inline(Box::new(self.certificate_spec.clone()));
        serde_json::to_string_pretty(&raw).expect("config serializes")
    }
}

fn parse_json<T: serde::de::DeserializeOwned>(text: &str) -> Result<T, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Parse {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

/// Parses and validates a config held in memory; certificate file references
/// are resolved against `base_dir`.
pub fn from_json_str(text: &str, base_dir: Option<&Path>) -> Result<SystemConfig, ConfigError> {
    let raw: ConfigFile = parse_json(text)?;
    compile(raw, base_dir)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<SystemConfig, ConfigError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_json_str(&text, path.parent())
}

fn matrix(rows: &[Vec<f64>], n: usize, field: &str) -> Result<DMatrix<f64>, ConfigError> {
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(invalid(field, format!("must be a {n}x{n} matrix")));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(invalid(field, "entries must be finite"));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

pub fn compile(raw: ConfigFile, base_dir: Option<&Path>) -> Result<SystemConfig, ConfigError> {
    let n = raw.dimension;
    if n == 0 {
        return Err(invalid("dimension", "must be positive"));
    }
    if raw.modes.is_empty() {
        return Err(invalid("modes", "at least one mode is required"));
    }
    let vars: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
    let mut specs = Vec::with_capacity(raw.modes.len());
    for (k, m) in raw.modes.iter().enumerate() {
        let field = match (&m.affine, &m.field) {
            (Some(aff), None) => {
                let a = matrix(&aff.a, n, &format!("modes[{k}].affine.a"))?;
                if aff.b.len() != n || aff.b.iter().any(|v| !v.is_finite()) {
                    return Err(invalid(
                        format!("modes[{k}].affine.b"),
                        format!("must hold {n} finite numbers"),
                    ));
                }
                VectorField::Affine {
                    a,
                    b: DVector::from_column_slice(&aff.b),
                }
            }
            (None, Some(components)) => {
                if components.len() != n {
                    return Err(invalid(format!("modes[{k}].field"), format!("needs {n} components")));
                }
                let mut parsed = Vec::with_capacity(n);
                for (i, src) in components.iter().enumerate() {
                    parsed.push(
                        expr::parse(src, &vars)
                            .map_err(|e| invalid(format!("modes[{k}].field[{i}]"), e.to_string()))?,
                    );
                }
                VectorField::Expr(parsed)
            }
            _ => {
                return Err(invalid(
                    format!("modes[{k}]"),
                    "give exactly one of `affine` and `field`",
                ))
            }
        };
        specs.push(ModeSpec {
            name: m.name.clone(),
            field,
        });
    }
    let system = SwitchedSystem::new(n, specs).map_err(|e| invalid("modes", e.to_string()))?;

    if !(raw.tau > 0.0 && raw.tau.is_finite()) {
        return Err(invalid("tau", "period must be positive"));
    }
    if !(raw.delta0 >= 0.0 && raw.delta0.is_finite()) {
        return Err(invalid("delta0", "delay bound must be nonnegative"));
    }
    if raw.delta0 >= raw.tau {
        return Err(invalid("delta0", "delay bound must be < period"));
    }
    if raw.safe_box.lower.len() != n {
        return Err(invalid("safe_box", format!("bounds must have {n} entries")));
    }
    let safe_box = StateBox::new(raw.safe_box.lower.clone(), raw.safe_box.upper.clone())
        .map_err(|e| invalid("safe_box", e.to_string()))?;

    let certificate_spec = match &raw.certificate {
        CertificateRef::Inline(spec) => (**spec).clone(),
        CertificateRef::File { file } => {
            let path = match base_dir {
                Some(dir) => dir.join(file),
                None => PathBuf::from(file),
            };
            let text = fs::read_to_string(&path).map_err(|source| ConfigError::Io {
                path: path.clone(),
                source,
            })?;
            parse_json::<CertificateSpec>(&text).map_err(|e| match e {
                ConfigError::Parse { path: p, message } => ConfigError::Parse {
                    path: format!("certificate({file}).{p}"),
                    message,
                },
                other => other,
            })?
        }
    };
    let certificate = certificate_spec
        .compile(&system)
        .map_err(|e| invalid("certificate", e.to_string()))?;

    let wf = &raw.workflow;
    if let Some(eps2) = wf.eps2 {
        if !(eps2 > 0.0 && eps2.is_finite()) {
            return Err(invalid("workflow.eps2", "must be positive"));
        }
    }
    if let Some(dt) = wf.dt {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(invalid("workflow.dt", "must be positive"));
        }
    }
    if wf.nu_grid < 2 || wf.cert_grid < 2 {
        return Err(invalid("workflow", "grids need at least 2 points per axis"));
    }
    if wf.trials == 0 || wf.periods == 0 {
        return Err(invalid("workflow", "trials and periods must be positive"));
    }
    if !(wf.nu_safety_factor >= 1.0 && wf.nu_safety_factor.is_finite()) {
        return Err(invalid("workflow.nu_safety_factor", "must be at least 1"));
    }

    let controller = match raw.controller.clone().unwrap_or_default() {
        ControllerSpec::Symbolic { policy } => ControllerChoice::Symbolic(policy),
        ControllerSpec::Threshold {
            coordinate,
            threshold,
            below,
            above,
        } => {
            if coordinate == 0 || coordinate > n {
                return Err(invalid("controller.coordinate", format!("must be in 1..={n}")));
            }
            if !threshold.is_finite() {
                return Err(invalid("controller.threshold", "must be finite"));
            }
            let lookup = |name: &str, field: &str| {
                system
                    .mode_by_name(name)
                    .ok_or_else(|| invalid(field, format!("unknown mode `{name}`")))
            };
            ControllerChoice::Threshold(ThresholdRule {
                coordinate: coordinate - 1,
                threshold,
                below: lookup(&below, "controller.below")?,
                above: lookup(&above, "controller.above")?,
            })
        }
    };

    Ok(SystemConfig {
        tau: raw.tau,
        delta0: raw.delta0,
        workflow: raw.workflow.clone(),
        raw,
        system,
        safe_box,
        certificate,
        certificate_spec,
        controller,
    })
}
