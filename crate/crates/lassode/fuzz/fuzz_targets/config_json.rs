//! Config deserialization plus validation must never panic.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = serde_json::from_str::<lassode::config::TrainConfig>(text) {
        let _ = cfg.model.validate();
    }
    if let Ok(cfg) = serde_json::from_str::<lassode::config::ModelConfig>(text) {
        let _ = cfg.validate();
    }
});
