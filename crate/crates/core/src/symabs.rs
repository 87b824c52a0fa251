//! Uniform-grid symbolic abstraction of the delay-free sampled system.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::certs::{CertError, LyapunovCertificate, StateBox};
use crate::sysmodel::{flow_constant, Mode, ModelError, SwitchedSystem, VectorField};

/// Successor index standing for "left the grid box".
pub const SINK: u32 = u32::MAX;
/// Default limit on the number of grid states.
pub const DEFAULT_GRID_CAP: usize = 5_000_000;

#[derive(Debug, Error)]
pub enum AbstractionError {
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("grid has {states} states, above the cap of {cap}; use a larger eps2")]
    TooLarge { states: u128, cap: usize },
    #[error("invalid model file: {0}")]
    Format(String),
    #[error(transparent)]
    Cert(#[from] CertError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Largest grid spacing `η` with `γ(η) ≤ (1 − e^{−κτ})·α̲(ε2)`.
pub fn max_eta(cert: &LyapunovCertificate, tau: f64, eps2: f64) -> Result<f64, CertError> {
    if !(eps2 > 0.0) {
        return Err(CertError::Invalid(format!("eps2 = {eps2} must be positive")));
    }
    let budget = (1.0 - (-cert.kappa * tau).exp()) * cert.alpha_lo.eval(eps2)?;
    cert.gamma.inverse(budget)
}

/// The map `x ↦ x(τ, x, p)` for every mode.
#[derive(Debug, Clone)]
pub enum OnePeriodMap {
    /// `x ↦ E_p x + c_p`, exact for affine fields.
    Affine(Vec<(DMatrix<f64>, DVector<f64>)>),
    Rk4 {
        dt: f64,
    },
}

impl OnePeriodMap {
    /// Exact map when every mode is affine, RK4 otherwise.
    pub fn for_system(sys: &SwitchedSystem, tau: f64, dt: f64) -> Self {
        Self::exact(sys, tau).unwrap_or(OnePeriodMap::Rk4 { dt })
    }

    /// `exp([[A, b], [0, 0]] τ) = [[E, c], [0, 1]]`.
    pub fn exact(sys: &SwitchedSystem, tau: f64) -> Option<Self> {
        let n = sys.dim();
        let mut maps = Vec::with_capacity(sys.num_modes());
        for p in sys.modes() {
            let VectorField::Affine { a, b } = &sys.mode_spec(p).field else {
                return None;
            };
            let mut aug = DMatrix::zeros(n + 1, n + 1);
            aug.view_mut((0, 0), (n, n)).copy_from(a);
            aug.view_mut((0, n), (n, 1)).copy_from(b);
            let ex = (aug * tau).exp();
            maps.push((
                ex.view((0, 0), (n, n)).into_owned(),
                ex.view((0, n), (n, 1)).column(0).into_owned(),
            ));
        }
        Some(OnePeriodMap::Affine(maps))
    }

    pub fn apply(&self, sys: &SwitchedSystem, x: &[f64], p: Mode, tau: f64) -> Result<Vec<f64>, ModelError> {
        match self {
            OnePeriodMap::Affine(maps) => {
                let (e, c) = &maps[p.0];
                let n = x.len();
                Ok((0..n)
                    .map(|i| c[i] + (0..n).map(|j| e[(i, j)] * x[j]).sum::<f64>())
                    .collect())
            }
            OnePeriodMap::Rk4 { dt } => flow_constant(sys, x, p, tau, *dt),
        }
    }
}

/// Uniform grid `lower + i·η` clipped to a box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub eta: f64,
    pub counts: Vec<usize>,
}

impl Grid {
    pub fn new(domain: &StateBox, eta: f64) -> Result<Self, AbstractionError> {
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(AbstractionError::Grid(format!("spacing {eta} must be positive")));
        }
        let counts = domain
            .lower()
            .iter()
            .zip(domain.upper())
            .map(|(l, u)| ((u - l) / eta + 1e-9).floor() as usize + 1)
            .collect();
        Ok(Grid {
            lower: domain.lower().to_vec(),
            upper: domain.upper().to_vec(),
            eta,
            counts,
        })
    }

    pub fn dim(&self) -> usize {
        self.counts.len()
    }

    pub fn num_states_wide(&self) -> u128 {
        self.counts.iter().map(|&c| c as u128).product()
    }

    pub fn num_states(&self) -> usize {
        self.counts.iter().product()
    }

    /// Index tuple of linear state `q` (last axis fastest).
    pub fn index_tuple(&self, mut q: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        for d in (0..self.dim()).rev() {
            idx[d] = q % self.counts[d];
            q /= self.counts[d];
        }
        idx
    }

    pub fn linear_index(&self, idx: &[usize]) -> Option<usize> {
        if idx.len() != self.dim() {
            return None;
        }
        let mut q = 0usize;
        for (d, &i) in idx.iter().enumerate() {
            if i >= self.counts[d] {
                return None;
            }
            q = q * self.counts[d] + i;
        }
        Some(q)
    }

    pub fn coords(&self, q: usize) -> Vec<f64> {
        self.index_tuple(q)
            .iter()
            .enumerate()
            .map(|(d, &i)| (self.lower[d] + i as f64 * self.eta).min(self.upper[d]))
            .collect()
    }

    /// Nearest grid point (ties toward the lower index), `None` outside the box.
    pub fn snap(&self, x: &[f64]) -> Option<usize> {
        let mut q = 0usize;
        for d in 0..self.dim() {
            if !(x[d] >= self.lower[d] && x[d] <= self.upper[d]) {
                return None;
            }
            let v = (x[d] - self.lower[d]) / self.eta;
            let i = ((v - 0.5).ceil().max(0.0) as usize).min(self.counts[d] - 1);
            q = q * self.counts[d] + i;
        }
        Some(q)
    }

    pub fn domain(&self) -> StateBox {
        StateBox::new(self.lower.clone(), self.upper.clone()).expect("grid box is valid")
    }
}

/// Deterministic finite abstraction: one successor (or [`SINK`]) per state and mode.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolicModel {
    grid: Grid,
    tau: f64,
    eps2: Option<f64>,
    mode_names: Vec<String>,
    trans: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct AbstractionOptions {
    pub dt: f64,
    pub cap: usize,
    pub eps2: Option<f64>,
    /// Spacing limit from [`max_eta`]; exceeding it only warns.
    pub eta_limit: Option<f64>,
    /// Use the exact one-period map for affine systems.
    pub affine_fast_path: bool,
}

impl Default for AbstractionOptions {
    fn default() -> Self {
        AbstractionOptions {
            dt: 1e-3,
            cap: DEFAULT_GRID_CAP,
            eps2: None,
            eta_limit: None,
            affine_fast_path: true,
        }
    }
}

pub fn build_symbolic(
    sys: &SwitchedSystem,
    domain: &StateBox,
    eta: f64,
    tau: f64,
    opts: &AbstractionOptions,
) -> Result<SymbolicModel, AbstractionError> {
    if domain.dim() != sys.dim() {
        return Err(AbstractionError::Grid("box dimension differs from the system".into()));
    }
    if !(tau > 0.0) {
        return Err(AbstractionError::Grid("period must be positive".into()));
    }
    if let Some(limit) = opts.eta_limit {
        if eta > limit {
            warn!("grid spacing {eta:e} exceeds the precision limit {limit:e}");
        }
    }
    let grid = Grid::new(domain, eta)?;
    let wide = grid.num_states_wide();
    if wide > opts.cap as u128 || wide >= SINK as u128 {
        return Err(AbstractionError::TooLarge {
            states: wide,
            cap: opts.cap,
        });
    }
    let map = if opts.affine_fast_path {
        OnePeriodMap::for_system(sys, tau, opts.dt)
    } else {
        OnePeriodMap::Rk4 { dt: opts.dt }
    };
    let m = sys.num_modes();
    let mut trans = vec![SINK; grid.num_states() * m];
    trans
        .par_chunks_mut(m)
        .enumerate()
        .try_for_each(|(q, row)| -> Result<(), ModelError> {
            let x = grid.coords(q);
            for (p, slot) in row.iter_mut().enumerate() {
                let y = match map.apply(sys, &x, Mode(p), tau) {
                    Ok(y) => y,
                    // a blow-up leaves the box
                    Err(ModelError::Diverged { .. }) | Err(ModelError::Field { .. }) => continue,
                    Err(e) => return Err(e),
                };
                *slot = grid.snap(&y).map_or(SINK, |t| t as u32);
            }
            Ok(())
        })?;
    Ok(SymbolicModel {
        grid,
        tau,
        eps2: opts.eps2,
        mode_names: sys.modes().map(|p| sys.mode_name(p).to_string()).collect(),
        trans,
    })
}

impl SymbolicModel {
    /// Assembles a model from raw parts, validating shapes and targets.
    pub fn from_parts(
        grid: Grid,
        tau: f64,
        eps2: Option<f64>,
        mode_names: Vec<String>,
        trans: Vec<u32>,
    ) -> Result<Self, AbstractionError> {
        let states = grid.num_states_wide();
        if states >= SINK as u128 {
            return Err(AbstractionError::Format("too many states".into()));
        }
        if grid.lower.len() != grid.dim() || grid.upper.len() != grid.dim() || grid.dim() == 0 {
            return Err(AbstractionError::Format(
                "grid bounds do not match the index space".into(),
            ));
        }
        if grid.counts.contains(&0) {
            return Err(AbstractionError::Format("empty grid axis".into()));
        }
        let expected = Grid::new(&grid.domain_checked()?, grid.eta)?;
        if expected.counts != grid.counts {
            return Err(AbstractionError::Format(format!(
                "counts {:?} do not match the box and spacing (expected {:?})",
                grid.counts, expected.counts
            )));
        }
        if mode_names.is_empty() {
            return Err(AbstractionError::Format("no modes".into()));
        }
        if trans.len() as u128 != states * mode_names.len() as u128 {
            return Err(AbstractionError::Format("transition table has the wrong length".into()));
        }
        if let Some(bad) = trans.iter().find(|&&t| t != SINK && t as u128 >= states) {
            return Err(AbstractionError::Format(format!("target {bad} out of range")));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(AbstractionError::Format("period must be positive".into()));
        }
        Ok(SymbolicModel {
            grid,
            tau,
            eps2,
            mode_names,
            trans,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn eps2(&self) -> Option<f64> {
        self.eps2
    }

    pub fn eta(&self) -> f64 {
        self.grid.eta
    }

    pub fn num_states(&self) -> usize {
        self.grid.num_states()
    }

    pub fn num_modes(&self) -> usize {
        self.mode_names.len()
    }

    pub fn mode_names(&self) -> &[String] {
        &self.mode_names
    }

    /// Successor of `q` under `p`, `None` for the sink.
    pub fn successor(&self, q: usize, p: Mode) -> Option<usize> {
        let t = self.trans[q * self.num_modes() + p.0];
        (t != SINK).then_some(t as usize)
    }

    pub fn raw_transitions(&self) -> &[u32] {
        &self.trans
    }

    pub fn coords(&self, q: usize) -> Vec<f64> {
        self.grid.coords(q)
    }

    pub fn snap(&self, x: &[f64]) -> Option<usize> {
        self.grid.snap(x)
    }

    pub fn to_json(&self) -> String {
        let m = self.num_modes();
        let file = ModelFile {
            header: ModelHeader {
                lower: self.grid.lower.clone(),
                upper: self.grid.upper.clone(),
                eta: self.grid.eta,
                counts: self.grid.counts.clone(),
                tau: self.tau,
                eps2: self.eps2,
                modes: self.mode_names.clone(),
            },
            transitions: self
                .trans
                .chunks(m)
                .map(|row| row.iter().map(|&t| if t == SINK { -1 } else { t as i64 }).collect())
                .collect(),
        };
        serde_json::to_string(&file).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, AbstractionError> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| AbstractionError::Format(e.to_string()))?;
        let h = file.header;
        let m = h.modes.len();
        let mut trans = Vec::with_capacity(file.transitions.len() * m);
        for row in &file.transitions {
            if row.len() != m {
                return Err(AbstractionError::Format(
                    "row length differs from the mode count".into(),
                ));
            }
            for &t in row {
                trans.push(match t {
                    -1 => SINK,
                    t if (0..SINK as i64).contains(&t) => t as u32,
                    t => return Err(AbstractionError::Format(format!("bad target {t}"))),
                });
            }
        }
        let grid = Grid {
            lower: h.lower,
            upper: h.upper,
            eta: h.eta,
            counts: h.counts,
        };
        SymbolicModel::from_parts(grid, h.tau, h.eps2, h.modes, trans)
    }
}

impl Grid {
    fn domain_checked(&self) -> Result<StateBox, AbstractionError> {
        StateBox::new(self.lower.clone(), self.upper.clone()).map_err(|e| AbstractionError::Format(e.to_string()))
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelHeader {
    lower: Vec<f64>,
    upper: Vec<f64>,
    eta: f64,
    counts: Vec<usize>,
    tau: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    eps2: Option<f64>,
    modes: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    header: ModelHeader,
    /// One row per state; `-1` is the sink.
    transitions: Vec<Vec<i64>>,
}
