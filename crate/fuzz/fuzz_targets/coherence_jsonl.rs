#![no_main]

use hiersample::coherence::parse_coherence_jsonl;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = parse_coherence_jsonl(data);
});
