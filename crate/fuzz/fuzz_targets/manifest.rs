#![no_main]

use std::path::Path;

use bpd::data::DatasetManifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(m) = DatasetManifest::parse("fuzz", text, Path::new("/fuzz")) {
            // canonical text parses back to the same manifest
            let rel: Vec<String> = m
                .subjects
                .iter()
                .map(|(_, p)| p.strip_prefix("/fuzz").unwrap_or(p).display().to_string())
                .collect();
            if rel.iter().all(|r| !r.trim().is_empty() && r.trim() == r) {
                let _ = DatasetManifest::parse("again", &m.to_text(&rel), Path::new("/fuzz"));
            }
        }
    }
});
