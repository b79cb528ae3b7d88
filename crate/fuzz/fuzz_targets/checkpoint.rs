#![no_main]

use hiersample::checkpoint::{decode_classifier, decode_model, decode_train_state};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = decode_model(data);
    let _ = decode_classifier(data);
    let _ = decode_train_state(data);
});
