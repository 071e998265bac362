#![no_main]

use libfuzzer_sys::fuzz_target;
use mivae::harness::GridConfig;
use mivae::model::MivaeConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(grid) = GridConfig::from_toml_str(text) else { return };
    if grid.grid.len() <= 4096 {
        assert_eq!(grid.grid.cells(&MivaeConfig::new(2, 2)).len(), grid.grid.len());
    }
    let again = GridConfig::from_toml_str(&grid.to_toml_string()).expect("serialized grid parses");
    assert_eq!(again, grid);
});
