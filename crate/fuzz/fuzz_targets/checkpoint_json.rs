#![no_main]

use libfuzzer_sys::fuzz_target;
use mivae::model::Checkpoint;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(ck) = Checkpoint::from_json(text) else { return };
    if let Ok(params) = ck.params() {
        assert_eq!(params.config, ck.config);
    }
});
