#![no_main]

use acfl_cli::{parse_config_str, to_toml};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = parse_config_str(text, &[]) {
        let again = parse_config_str(&to_toml(&cfg).unwrap(), &[]).unwrap();
        assert_eq!(again, cfg);
    }
});
