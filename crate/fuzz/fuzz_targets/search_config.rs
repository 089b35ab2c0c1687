// Config files are user input; parsing plus validation must never panic.
#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(config) = serde_json::from_str::<prdk::search::SearchConfig>(text) {
        let _ = config.validate();
    }
});
