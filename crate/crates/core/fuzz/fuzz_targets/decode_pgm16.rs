#![no_main]

use libfuzzer_sys::fuzz_target;
use tokenmatch::metrics::{decode_pgm16, encode_pgm16};

fuzz_target!(|data: &[u8]| {
    if let Ok(depth) = decode_pgm16(data) {
        let back = decode_pgm16(&encode_pgm16(&depth)).expect("encoded map decodes");
        assert_eq!(back, depth);
    }
});
