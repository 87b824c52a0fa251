#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(e) = switchbound::parse(s, &["x1", "x2", "y1", "y2"]) {
        let _ = e.eval(&[0.5, -1.0, 2.0, 3.0]);
        let back = switchbound::parse(&e.to_string(), e.vars()).expect("printed form reparses");
        assert_eq!(back.to_string(), e.to_string());
    }
});
