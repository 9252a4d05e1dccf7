//! The trajectory CSV parser must reject malformed input with an error,
//! never panic, and any accepted trajectory must satisfy its own invariants.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(traj) = lassode::ode::parse_trajectory_csv(text) {
        assert!(!traj.times.is_empty());
        assert_eq!(traj.times.len(), traj.states.len());
        assert!(traj.times.iter().all(|t| t.is_finite()));
        assert!(traj.states.iter().flatten().all(|v| v.is_finite()));
    }
});
