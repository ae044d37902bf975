#![no_main]

use geopretrain_core::dataset::ColorCodeTable;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(table) = ColorCodeTable::from_json(text) {
        let back = ColorCodeTable::from_json(&table.to_json()).expect("table round trips");
        assert_eq!(back.names(), table.names());
    }
});
