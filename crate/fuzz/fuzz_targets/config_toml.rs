#![no_main]

use hiersample::config::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = ExperimentConfig::from_toml(text) {
        // a valid config renders back to TOML that loads
        ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
    }
});
