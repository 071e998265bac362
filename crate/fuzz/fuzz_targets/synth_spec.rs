#![no_main]

use libfuzzer_sys::fuzz_target;
use mivae::data::{sample_synthetic, SyntheticSpec};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(spec) = SyntheticSpec::from_toml_str(text) else { return };
    let work = spec.num_bags.saturating_mul(spec.max_instances).saturating_mul(spec.dim);
    if work > 20_000 {
        return;
    }
    if let Ok(ds) = sample_synthetic(&spec, 0) {
        for bag in ds.bags() {
            let labels = bag.instance_labels.as_ref().expect("synthetic bags carry instance labels");
            assert_eq!(bag.label, labels.iter().any(|l| *l));
        }
    }
});
