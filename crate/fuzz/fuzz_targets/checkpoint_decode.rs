#![no_main]

use libfuzzer_sys::fuzz_target;
use transnas_core::model::checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = checkpoint::decode(data) {
        let bytes = checkpoint::encode(&model);
        let again = checkpoint::decode(&bytes).expect("encoded checkpoint must decode");
        assert_eq!(checkpoint::encode(&again), bytes);
    }
});
