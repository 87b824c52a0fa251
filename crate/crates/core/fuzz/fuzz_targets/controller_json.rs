#![no_main]
use std::sync::OnceLock;

use libfuzzer_sys::fuzz_target;
use switchbound::{SafetyController, SymbolicModel};

fn model() -> &'static SymbolicModel {
    static M: OnceLock<SymbolicModel> = OnceLock::new();
    M.get_or_init(|| SymbolicModel::from_json(include_str!("../corpus/model_json/watertank.json")).unwrap())
}

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(c) = SafetyController::from_json(s, model()) {
        for &q in c.safe_states() {
            assert!(c.allowed_mask(q) != 0);
        }
    }
});
