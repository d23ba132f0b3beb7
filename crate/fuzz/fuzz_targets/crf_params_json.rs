#![no_main]

use libfuzzer_sys::fuzz_target;
use mfnet::CrfParams;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(theta) = CrfParams::from_json(text) {
        assert!(theta.is_finite());
        assert_eq!(CrfParams::from_json(&theta.to_json()).unwrap(), theta);
    }
});
