#![no_main]

use libfuzzer_sys::fuzz_target;
use transnas_core::dataset::parse_matrix;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok((m, header)) = parse_matrix(text, "fuzz") {
            assert_eq!(m.data().len(), m.rows() * m.cols());
            if let Some(h) = header {
                assert_eq!(h.len(), m.cols());
            }
        }
    }
});
