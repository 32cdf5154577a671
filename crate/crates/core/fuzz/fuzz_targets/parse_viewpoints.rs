#![no_main]

use libfuzzer_sys::fuzz_target;
use tokenmatch::geometry::{parse_viewpoints, viewpoint_to_rotation};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(views) = parse_viewpoints(text) {
        for v in &views {
            let _ = viewpoint_to_rotation(v);
        }
    }
});
