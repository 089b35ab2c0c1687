// The binary dataset reader must never panic or over-allocate on arbitrary
// bytes; it may only return an error.
#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = prdk::dataio::from_bytes(data, false);
    let _ = prdk::dataio::from_bytes(data, true);
});
