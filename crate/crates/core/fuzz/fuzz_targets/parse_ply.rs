#![no_main]

use libfuzzer_sys::fuzz_target;
use tokenmatch::metrics::{parse_ply, write_ply};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(mesh) = parse_ply(text) {
        let back = parse_ply(&write_ply(&mesh)).expect("written mesh parses");
        assert_eq!(back.triangles, mesh.triangles);
    }
});
