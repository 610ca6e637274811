#![no_main]

use acfl::datasets::parse_idx_pair;
use libfuzzer_sys::fuzz_target;

// First byte splits the input into an image file and a label file.
fuzz_target!(|data: &[u8]| {
    let Some((&cut, rest)) = data.split_first() else { return };
    let cut = (cut as usize * rest.len()) / 255;
    let (images, labels) = rest.split_at(cut);
    if let Ok(ds) = parse_idx_pair(images, labels) {
        assert_eq!(ds.features().len(), ds.len() * ds.n_features());
        assert!(ds.labels().iter().all(|&l| l < ds.n_classes()));
    }
});
