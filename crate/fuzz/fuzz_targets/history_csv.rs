#![no_main]

use kdaction::evaluation::{history_to_csv, parse_history_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(h) = parse_history_csv(text) {
        // compare text, not values: NaN cells are legal and never equal themselves
        let csv = history_to_csv(&h);
        let again = parse_history_csv(&csv).expect("written history re-parses");
        assert_eq!(history_to_csv(&again), csv);
    }
});
