// Search-state documents come from disk; import and validation must reject
// malformed input without panicking.
#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(doc) = prdk::schema::state_from_json(text) {
        let _ = prdk::schema::doc_to_state(&doc);
        let _ = prdk::schema::doc_cell_graph(&doc);
    }
});
