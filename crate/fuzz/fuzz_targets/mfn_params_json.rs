#![no_main]

use libfuzzer_sys::fuzz_target;
use mfnet::MfnParams;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(params) = MfnParams::from_json(text) {
        assert!(!params.layers.is_empty());
        assert_eq!(MfnParams::from_json(&params.to_json()).unwrap(), params);
    }
});
