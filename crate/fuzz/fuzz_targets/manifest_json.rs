#![no_main]

use libfuzzer_sys::fuzz_target;
use mivae_cli::RunManifest;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(m) = RunManifest::from_json(text) else { return };
    let again = RunManifest::from_json(&m.to_json()).expect("serialized manifest parses");
    assert_eq!(again, m);
});
