#![no_main]

use hibbo::pgm::PgmImage;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = PgmImage::parse(data) {
        assert_eq!(PgmImage::parse(&img.to_bytes()).expect("re-parse"), img);
    }
});
