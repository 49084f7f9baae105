#![no_main]

use libfuzzer_sys::fuzz_target;
use transnas_core::scoring::parse_score_csv;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(rows) = parse_score_csv(text, "fuzz") {
            assert!(rows.iter().all(|r| r.decision <= 1 && r.label.is_none_or(|l| l <= 1)));
        }
    }
});
