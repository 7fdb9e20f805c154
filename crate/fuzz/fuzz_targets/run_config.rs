#![no_main]

use std::path::Path;

use bpd::config::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = RunConfig::parse("fuzz", text, Path::new("/nonexistent")) {
            let again = RunConfig::parse("resolved", &cfg.resolved(), Path::new("/nonexistent"))
                .expect("resolved config parses");
            assert_eq!(again.hash(), cfg.hash());
        }
    }
});
