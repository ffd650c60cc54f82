#![no_main]

use irl_track::experiment::check_run_csv;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = check_run_csv(data);
});
