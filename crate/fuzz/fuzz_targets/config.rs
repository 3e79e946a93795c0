#![no_main]

use kdaction::experiment::{parse_override, ExperimentConfig};
use libfuzzer_sys::fuzz_target;

// Input: a TOML document, optionally followed by a NUL byte and one
// `key=value` override per line.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let (doc, tail) = text.split_once('\0').unwrap_or((text, ""));
    let Ok(overrides) = tail.lines().filter(|l| !l.is_empty()).map(parse_override).collect::<Result<Vec<_>, _>>()
    else {
        return;
    };
    if let Ok(c) = ExperimentConfig::parse(doc, &overrides) {
        let toml = c.to_toml();
        let again = ExperimentConfig::parse(&toml, &[]).expect("written config re-parses");
        assert_eq!(again.to_toml(), toml);
        assert_eq!(again.hash8(), c.hash8());
    }
});
