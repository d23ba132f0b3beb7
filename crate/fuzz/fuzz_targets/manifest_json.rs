#![no_main]

use libfuzzer_sys::fuzz_target;
use mfnet::data::DatasetManifest;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(manifest) = DatasetManifest::from_json(text) {
        assert_eq!(manifest.files.len(), manifest.n_images);
        assert_eq!(
            DatasetManifest::from_json(&manifest.to_json()).unwrap(),
            manifest
        );
    }
});
