#![no_main]

use kdaction::models::FeatureStore;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(store) = FeatureStore::parse(text) {
        let again = FeatureStore::parse(&store.to_jsonl()).expect("written store re-parses");
        assert_eq!(store, again);
    }
});
