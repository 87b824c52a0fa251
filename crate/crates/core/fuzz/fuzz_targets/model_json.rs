#![no_main]
use libfuzzer_sys::fuzz_target;
use switchbound::SymbolicModel;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    let Ok(model) = SymbolicModel::from_json(s) else { return };
    for q in 0..model.num_states().min(64) {
        for p in 0..model.num_modes() {
            let _ = model.successor(q, switchbound::Mode(p));
        }
    }
});
