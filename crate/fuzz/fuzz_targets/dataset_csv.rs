#![no_main]

use comet::stream::{parse_dataset_csv, write_dataset_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(examples) = parse_dataset_csv(data) {
        if examples.is_empty() {
            return;
        }
        let mut out = Vec::new();
        write_dataset_csv(&examples, &mut out).expect("parsed examples serialize");
        let back =
            parse_dataset_csv(std::str::from_utf8(&out).unwrap()).expect("written csv parses");
        assert_eq!(back, examples);
    }
});
