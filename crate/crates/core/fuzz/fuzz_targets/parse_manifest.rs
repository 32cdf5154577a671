#![no_main]

use libfuzzer_sys::fuzz_target;
use tokenmatch::store::{encode_manifest, parse_manifest, TemplateMeta};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(records) = parse_manifest(text) {
        let again = encode_manifest(&records);
        let back = parse_manifest(std::str::from_utf8(&again).unwrap()).expect("encoded manifest parses");
        assert_eq!(back, records);
        for (i, r) in records.iter().enumerate() {
            let _ = TemplateMeta::from_manifest(r, i);
        }
    }
});
