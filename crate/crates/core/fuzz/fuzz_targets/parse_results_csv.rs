#![no_main]

use libfuzzer_sys::fuzz_target;
use tokenmatch::matcher::parse_results_csv;

fuzz_target!(|data: &[u8]| {
    let Some((&first, rest)) = data.split_first() else { return };
    let Ok(text) = std::str::from_utf8(rest) else { return };
    let _ = parse_results_csv(text, first as usize % 8, 0.2);
});
