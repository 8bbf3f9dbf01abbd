#![no_main]

use hibbo::pgm::{parse_index, write_index};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(entries) = parse_index(text) {
            assert_eq!(parse_index(&write_index(&entries)).expect("re-parse"), entries);
        }
    }
});
