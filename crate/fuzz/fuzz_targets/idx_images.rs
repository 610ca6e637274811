#![no_main]

use acfl::datasets::parse_idx_images;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((n, width, features)) = parse_idx_images(data) {
        assert_eq!(features.len(), n * width);
        assert_eq!(data.len(), 16 + features.len());
        assert!(features.iter().all(|v| (0.0..=1.0).contains(v)));
    }
});
