#![no_main]

use libfuzzer_sys::fuzz_target;
use ssimgan::harness::parse_summary_table;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(rows) = parse_summary_table(text) {
            assert!(rows.iter().all(|r| r.mean.is_finite() && r.max.is_finite() && r.min.is_finite()));
        }
    }
});
