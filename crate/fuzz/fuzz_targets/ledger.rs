#![no_main]

use libfuzzer_sys::fuzz_target;
use transnas_core::nas::{pareto_front, parse_ledger};

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(records) = parse_ledger(text, "fuzz") {
            for r in &records {
                let line = r.to_json_line();
                assert_eq!(parse_ledger(&line, "fuzz").expect("record must round-trip").len(), 1);
            }
            let _ = pareto_front(&records);
        }
    }
});
