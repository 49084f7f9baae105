#![no_main]

use libfuzzer_sys::fuzz_target;
use transnas_core::dataset::parse_labels;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(labels) = parse_labels(text, "fuzz") {
            assert!(labels.iter().all(|&l| l <= 1));
        }
    }
});
