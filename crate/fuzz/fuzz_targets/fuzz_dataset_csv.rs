#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        // Must never panic: malformed input comes back as Error::Parse with
        // a line number.
        let _ = feddkc::data::parse_dataset_csv(text);
    }
});
