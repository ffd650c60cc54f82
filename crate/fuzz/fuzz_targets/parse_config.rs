#![no_main]

use irl_track::config::parse_config_str;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = parse_config_str(text) {
        // anything accepted must survive a round trip
        let again = parse_config_str(&cfg.to_json()).expect("serialized config parses");
        assert_eq!(cfg, again);
    }
});
