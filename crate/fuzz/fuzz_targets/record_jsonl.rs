#![no_main]

use hibbo::record::RunRecord;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(r) = RunRecord::from_jsonl(text) {
            let back = RunRecord::from_jsonl(&r.to_jsonl()).expect("re-parse");
            assert_eq!(back.queries.len(), r.queries.len());
        }
    }
});
