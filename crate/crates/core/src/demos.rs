//! Built-in example systems: a DC-DC boost converter (per-unit, second state
//! scaled by 5) and a nonlinear water tank.

use crate::config::{from_json_str, SystemConfig};
use crate::sysmodel::SwitchedSystem;

pub const DCDC_JSON: &str = include_str!("../demos/dcdc.json");
pub const WATER_TANK_JSON: &str = include_str!("../demos/watertank.json");

/// Demo names accepted by [`by_name`].
pub const NAMES: [&str; 2] = ["dcdc", "watertank"];

pub fn dcdc() -> SystemConfig {
    from_json_str(DCDC_JSON, None).expect("embedded dcdc config is valid")
}

pub fn water_tank() -> SystemConfig {
    from_json_str(WATER_TANK_JSON, None).expect("embedded water tank config is valid")
}

pub fn dcdc_system() -> SwitchedSystem {
    dcdc().system
}

pub fn water_tank_system() -> SwitchedSystem {
    water_tank().system
}

pub fn by_name(name: &str) -> Option<(SystemConfig, &'static str)> {
    match name {
        "dcdc" => Some((dcdc(), DCDC_JSON)),
        "watertank" => Some((water_tank(), WATER_TANK_JSON)),
        _ => None,
    }
}
