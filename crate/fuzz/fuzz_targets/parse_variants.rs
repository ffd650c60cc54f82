#![no_main]

use irl_track::config::{apply_variant, parse_variants_str, ExperimentConfig};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(spec) = parse_variants_str(text) {
        let base = ExperimentConfig::benchmark();
        for v in &spec.variants {
            let _ = apply_variant(&base, v);
        }
    }
});
