#![no_main]

use hibbo::vae::VaeModel;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(m) = VaeModel::from_checkpoint(text) {
            VaeModel::from_checkpoint(&m.to_checkpoint()).expect("re-parse");
        }
    }
});
