#![no_main]

use kdaction::dataset::ClipManifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = ClipManifest::parse(text, "root") {
        let again = ClipManifest::parse(&m.to_jsonl(), "root").expect("written manifest re-parses");
        assert_eq!(m, again);
    }
});
