#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let sys = switchbound::demos::dcdc_system();
    if let Ok(t) = switchbound::Trajectory::read_csv(&sys, data) {
        let mut out = Vec::new();
        t.write_csv(&sys, &mut out).expect("write back");
    }
});
