#![no_main]

use libfuzzer_sys::fuzz_target;
use mfnet::data;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = data::decode_input(data) {
        assert!(img.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
        assert_eq!(data::decode_input(&data::encode_input(&img)).unwrap(), img);
    }
    if let Ok((h, w, label)) = data::decode_label(data) {
        assert_eq!(label.len(), h * w);
        let again = data::decode_label(&data::encode_label(w, h, label.labels())).unwrap();
        assert_eq!(again, (h, w, label));
    }
});
