//! The dataset manifest parser must reject malformed input without
//! panicking, and accepted entries must carry valid dimensions.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(manifest) = lassode::pipeline::parse_manifest(text) {
        for e in &manifest.entries {
            assert!(e.d_x >= 1);
            assert!(e.dt > 0.0 && e.t_max > 0.0);
        }
    }
});
