#![no_main]

use libfuzzer_sys::fuzz_target;
use mivae::data::{read_bag_csv, write_bag_csv};

fuzz_target!(|data: &[u8]| {
    let Ok(ds) = read_bag_csv(data, "fuzz") else { return };
    let mut out = Vec::new();
    write_bag_csv(&ds, &mut out).expect("a parsed dataset writes");
    let again = read_bag_csv(out.as_slice(), "fuzz").expect("written CSV parses");
    assert_eq!(again, ds);
});
