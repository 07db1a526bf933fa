#![no_main]

use libfuzzer_sys::fuzz_target;
use ssimgan::config::AppConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = AppConfig::from_json(text) {
            cfg.validate().expect("parsed config is valid");
        }
    }
});
