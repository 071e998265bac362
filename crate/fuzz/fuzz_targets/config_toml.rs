#![no_main]

use libfuzzer_sys::fuzz_target;
use mivae::harness::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(cfg) = ExperimentConfig::from_toml_str(text) else { return };
    let again = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).expect("serialized config parses");
    assert_eq!(again, cfg);
});
