#![no_main]

use hiersample_service::store::ExportFilter;
use hiersample_service::Store;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(store) = Store::import_jsonl(text) else { return };
    let filter = ExportFilter { reveal: true, ..Default::default() };
    let bundle = store.export_jsonl(&filter);
    let again = Store::import_jsonl(&bundle).unwrap();
    assert_eq!(again.export_jsonl(&filter), bundle);
});
