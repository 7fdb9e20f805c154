#![no_main]

use std::path::Path;
use std::sync::OnceLock;

use bpd::data::{parse_sensor_file, segment_stream, DatasetManifest};
use libfuzzer_sys::fuzz_target;

fn manifest() -> &'static DatasetManifest {
    static M: OnceLock<DatasetManifest> = OnceLock::new();
    M.get_or_init(|| {
        DatasetManifest::parse(
            "fuzz",
            "name = f\nsampling_rate = 10\nchannels = 3\nlabels = 1=a, 2=b, 7=c\nnull_label = 0\nmissing = -999\n\n[subjects]\ns = s.csv\n",
            Path::new("."),
        )
        .expect("fixed manifest parses")
    })
}

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(s) = parse_sensor_file("fuzz.csv", text, manifest()) {
            assert_eq!(s.values.len(), s.channels * s.labels.len());
            assert!(s.values.iter().all(|v| v.is_finite()));
            if s.labels.len() >= 4 {
                let _ = segment_stream(&s.labels, 4, 0.5);
            }
        }
    }
});
