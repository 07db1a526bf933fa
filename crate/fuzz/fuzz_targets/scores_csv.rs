#![no_main]

use libfuzzer_sys::fuzz_target;
use ssimgan::select::{rank_and_select, read_scores_csv};

fuzz_target!(|data: &[u8]| {
    if let Ok(scores) = read_scores_csv(data) {
        let ranked = rank_and_select(&scores, scores.len());
        assert_eq!(ranked.len(), scores.len());
    }
});
