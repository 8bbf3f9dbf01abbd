#![no_main]

use hibbo::fig2::parse_fig2_csv;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_fig2_csv(text);
    }
});
