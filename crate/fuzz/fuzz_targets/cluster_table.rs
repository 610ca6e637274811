#![no_main]

use acfl::clustering::{parse_assignment_table, Clustering};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(pairs) = parse_assignment_table(text) else { return };
    // keep the cluster count bounded so from_assignments stays cheap
    if pairs.iter().any(|&(_, c)| c > 4096) {
        return;
    }
    if let Ok(c) = Clustering::from_assignments(&pairs) {
        assert_eq!(parse_assignment_table(&c.to_table()).unwrap(), c.pairs());
    }
});
