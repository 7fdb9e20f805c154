#![no_main]

use bpd::kv::KvDocument;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(doc) = KvDocument::parse("fuzz", text) {
            for (section, entries) in &doc.sections {
                for e in entries {
                    assert_eq!(doc.get(section, &e.key).map(|x| &x.value), Some(&e.value));
                }
            }
        }
    }
});
