#![no_main]

use libfuzzer_sys::fuzz_target;
use tokenmatch::store::{decode_tmpd, encode_tmpd};

fuzz_target!(|data: &[u8]| {
    if let Ok((_, entries)) = decode_tmpd(data) {
        let again = encode_tmpd(&entries).expect("decoded entries re-encode");
        let (_, back) = decode_tmpd(&again).expect("re-encoded bytes decode");
        assert_eq!(back, entries);
    }
});
