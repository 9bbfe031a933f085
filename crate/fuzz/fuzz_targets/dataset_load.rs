#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = zeroi2v::data::dataset_from_bytes::<f32>(data);
    let _ = zeroi2v::data::dataset_from_bytes::<f64>(data);
});
