#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // must never panic; malformed files surface as typed errors
    let _ = zeroi2v::checkpoint::load_bytes(data);
});
