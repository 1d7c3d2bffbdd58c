#![no_main]

use libfuzzer_sys::fuzz_target;
use periodic_homog::fieldio::{decode_field, encode_field};

fuzz_target!(|data: &[u8]| {
    if let Ok(file) = decode_field(data) {
        let bytes = encode_field(&file.components).expect("decoded fields encode");
        assert_eq!(bytes, data);
    }
});
