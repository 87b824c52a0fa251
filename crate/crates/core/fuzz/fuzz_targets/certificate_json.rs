#![no_main]
use libfuzzer_sys::fuzz_target;
use switchbound::certs::CertificateSpec;

fuzz_target!(|data: &[u8]| {
    let Ok(spec) = serde_json::from_slice::<CertificateSpec>(data) else {
        return;
    };
    let _ = spec.compile(&switchbound::demos::dcdc_system());
    let _ = spec.compile(&switchbound::demos::water_tank_system());
});
