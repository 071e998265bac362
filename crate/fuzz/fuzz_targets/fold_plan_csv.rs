#![no_main]

use libfuzzer_sys::fuzz_target;
use mivae::data::FoldPlan;

fuzz_target!(|data: &[u8]| {
    let Ok(plan) = FoldPlan::read_csv(data) else { return };
    let mut out = Vec::new();
    plan.write_csv(&mut out).expect("a parsed plan writes");
    assert_eq!(FoldPlan::read_csv(out.as_slice()).expect("written plan parses"), plan);
});
