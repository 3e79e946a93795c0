#![no_main]

use kdaction::evaluation::SweepResult;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(r) = SweepResult::from_json(text) {
        let _ = r.to_text();
        let again = SweepResult::from_json(&r.to_json()).expect("written report re-parses");
        assert_eq!(again.to_json(), r.to_json());
    }
});
