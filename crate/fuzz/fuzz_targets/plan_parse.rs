#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(plan) = zeroi2v::stdha::HeadOffsetPlan::parse(text) {
            // parsed plans must round-trip through the multiset printer
            let printed = plan.multiset_string();
            let back = zeroi2v::stdha::HeadOffsetPlan::parse(&printed).unwrap();
            assert_eq!(back.temporal_receptive_field(), plan.temporal_receptive_field());
        }
    }
});
