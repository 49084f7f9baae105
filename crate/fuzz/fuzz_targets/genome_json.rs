#![no_main]

use libfuzzer_sys::fuzz_target;
use transnas_core::model::Genome;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(g) = Genome::from_json(text) {
            let _ = g.violations();
            let back = Genome::from_json(&g.to_json()).expect("serialized genome must parse");
            assert_eq!(back, g);
        }
    }
});
