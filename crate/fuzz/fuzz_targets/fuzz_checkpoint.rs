#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(checkpoint) = feddkc::neural::checkpoint_from_json(text) {
            // A checkpoint that parses must rebuild into a usable network.
            let _ = checkpoint.into_mlp().expect("validated checkpoints rebuild");
        }
    }
});
