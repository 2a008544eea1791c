#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(config) = feddkc::config::parse_config_str(text) {
            // Semantic validation must also be panic-free. Skip file-backed
            // datasets so the fuzzer never touches the filesystem.
            if matches!(config.dataset, feddkc::config::DatasetSpec::Synth { .. }) {
                let _ = config.validate();
            }
        }
    }
});
