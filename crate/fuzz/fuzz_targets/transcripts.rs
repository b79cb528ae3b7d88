#![no_main]

use hiersample::eval::parse_transcripts;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = parse_transcripts(data);
});
