#![no_main]

use hiersample_service::Store;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sessions.jsonl");
    std::fs::write(&path, data).unwrap();
    let _ = Store::open(&path);
});
