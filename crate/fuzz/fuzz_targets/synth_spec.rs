#![no_main]

use bpd::data::SynthSpec;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(spec) = SynthSpec::parse("fuzz", text) {
            let again = SynthSpec::parse("again", &spec.to_kv()).expect("canonical spec parses");
            assert_eq!(again, spec);
        }
    }
});
