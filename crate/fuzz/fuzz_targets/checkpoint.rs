#![no_main]

use libfuzzer_sys::fuzz_target;
use ssimgan::checkpoint::{decode, encode};

fuzz_target!(|data: &[u8]| {
    if let Ok((model, meta)) = decode(data) {
        let bytes = encode(&model, &meta).expect("decoded model re-encodes");
        let (again, meta2) = decode(&bytes).expect("re-encoded checkpoint decodes");
        assert_eq!(meta2, meta);
        assert_eq!(again.specs(), model.specs());
    }
});
