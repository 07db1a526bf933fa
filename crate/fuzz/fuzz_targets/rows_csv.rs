#![no_main]

use libfuzzer_sys::fuzz_target;
use ssimgan::harness::{read_rows_csv, summarize_rows, write_rows_csv};

fuzz_target!(|data: &[u8]| {
    if let Ok(rows) = read_rows_csv(data) {
        let _ = summarize_rows(&rows);
        let mut buf = Vec::new();
        write_rows_csv(&mut buf, &rows).expect("rows re-serialise");
    }
});
