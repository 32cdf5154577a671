#![no_main]

use libfuzzer_sys::fuzz_target;
use tokenmatch::contrastive::{decode_head, encode_head};

fuzz_target!(|data: &[u8]| {
    if let Ok(head) = decode_head(data) {
        let back = decode_head(&encode_head(&head)).expect("encoded head decodes");
        assert!(back.same_params(&head));
    }
});
