#![no_main]

use libfuzzer_sys::fuzz_target;
use mivae::harness::{read_instance_scores, write_instance_scores};

fuzz_target!(|data: &[u8]| {
    let Ok(rows) = read_instance_scores(data) else { return };
    assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.score)));
    let mut out = Vec::new();
    write_instance_scores(&rows, &mut out).expect("parsed rows write");
    assert_eq!(read_instance_scores(out.as_slice()).expect("written rows parse"), rows);
});
