//! Value/time normalization, prefix slicing, and dataset persistence.
//!
//! Each channel is mapped to [-1, 1] by its own per-trajectory range and
//! timestamps to [0, 1] by t_max. Channels never read each other during
//! normalization; coupling is recovered later by attention.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::LassError;
use crate::ode::{read_trajectory_csv, write_trajectory_csv, Trajectory};

#[derive(Clone, Debug)]
pub struct ChannelScale {
    /// raw = norm * scale + offset
    pub scale: f64,
    pub offset: f64,
}

#[derive(Clone, Debug)]
pub struct NormalizedTrajectory {
    pub system: String,
    /// times mapped into [0, 1]
    pub norm_times: Vec<f64>,
    /// per channel, one value per timestamp, each in [-1, 1]
    pub channels: Vec<Vec<f64>>,
    pub denorm: Vec<ChannelScale>,
    pub t_max: f64,
    /// normalized sampling interval dt / t_max
    pub norm_dt: f64,
}

impl NormalizedTrajectory {
    pub fn num_points(&self) -> usize {
        self.norm_times.len()
    }

    pub fn state_dim(&self) -> usize {
        self.channels.len()
    }

    pub fn denormalize(&self, channel: usize, norm_value: f64) -> f64 {
        let s = &self.denorm[channel];
        norm_value * s.scale + s.offset
    }
}

#[derive(Clone, Debug)]
pub struct PrefixedSample {
    pub traj: NormalizedTrajectory,
    pub prefix_ratio: f64,
    pub prefix_len: usize,
}

/// Per-trajectory affine normalization. A constant channel maps to 0 with a
/// recorded scale of 1 so denormalization still works.
pub fn normalize(traj: &Trajectory, t_max: f64) -> Result<NormalizedTrajectory, LassError> {
    let last = *traj
        .times
        .last()
        .ok_or_else(|| LassError::Data("empty trajectory".into()))?;
    if t_max < last {
        return Err(LassError::Data(format!(
            "t_max {t_max} is before the last timestamp {last}"
        )));
    }
    let d = traj.state_dim();
    let mut channels = Vec::with_capacity(d);
    let mut denorm = Vec::with_capacity(d);
    for j in 0..d {
        let raw = traj.channel(j);
        let min = raw.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max == min {
            // degenerate constant channel
            channels.push(vec![0.0; raw.len()]);
            denorm.push(ChannelScale {
                scale: 1.0,
                offset: min,
            });
        } else {
            let scale = (max - min) / 2.0;
            let offset = (max + min) / 2.0;
            channels.push(raw.iter().map(|v| (v - offset) / scale).collect());
            denorm.push(ChannelScale { scale, offset });
        }
    }
    Ok(NormalizedTrajectory {
        system: traj.system.clone(),
        norm_times: traj.times.iter().map(|t| t / t_max).collect(),
        channels,
        denorm,
        t_max,
        norm_dt: traj.dt / t_max,
    })
}

/// First floor(ratio * (N+1)) observations form the prefix; the target set is
/// always the full trajectory.
pub fn slice_prefix(nt: &NormalizedTrajectory, ratio: f64) -> Result<PrefixedSample, LassError> {
    assert!(
        ratio > 0.0 && ratio <= 1.0,
        "prefix ratio must be in (0, 1]"
    );
    let prefix_len = (ratio * nt.num_points() as f64).floor() as usize;
    if prefix_len < 2 {
        return Err(LassError::PrefixTooShort { len: prefix_len });
    }
    Ok(PrefixedSample {
        traj: nt.clone(),
        prefix_ratio: ratio,
        prefix_len,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub system: String,
    pub params: BTreeMap<String, f64>,
    pub dt: f64,
    pub t_max: f64,
    pub d_x: usize,
    pub file: String,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn write_dataset(trajectories: &[Trajectory], dir: &Path) -> Result<Manifest, LassError> {
    std::fs::create_dir_all(dir).map_err(|e| LassError::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    let mut manifest = Manifest::default();
    for (i, traj) in trajectories.iter().enumerate() {
        let file = format!("{}_{i:05}.csv", traj.system);
        write_trajectory_csv(traj, &dir.join(&file))?;
        manifest.entries.push(ManifestEntry {
            system: traj.system.clone(),
            params: traj.params.clone(),
            dt: traj.dt,
            t_max: traj.t_max,
            d_x: traj.state_dim(),
            file,
        });
    }
    write_manifest(&manifest, dir)?;
    Ok(manifest)
}

pub fn write_manifest(manifest: &Manifest, dir: &Path) -> Result<(), LassError> {
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(manifest).expect("manifest serialization");
    std::fs::write(&path, json).map_err(|e| LassError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, LassError> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| LassError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    parse_manifest(&text).map_err(|msg| LassError::Parse {
        path: path.display().to_string(),
        message: msg,
    })
}

/// Parses manifest JSON; public for fuzzing.
pub fn parse_manifest(text: &str) -> Result<Manifest, String> {
    let manifest: Manifest = serde_json::from_str(text).map_err(|e| e.to_string())?;
    for e in &manifest.entries {
        if e.d_x == 0 || e.d_x > crate::ode::MAX_STATE_DIM {
            return Err(format!("entry {}: bad channel count {}", e.file, e.d_x));
        }
        if !(e.dt.is_finite() && e.dt > 0.0) || !(e.t_max.is_finite() && e.t_max > 0.0) {
            return Err(format!("entry {}: bad dt/t_max", e.file));
        }
    }
    Ok(manifest)
}

/// Loads every trajectory the manifest references; a missing or corrupt CSV
/// fails with an error naming that file.
pub fn load_dataset(dir: &Path) -> Result<Vec<(ManifestEntry, Trajectory)>, LassError> {
    let manifest = read_manifest(dir)?;
    let mut out = Vec::with_capacity(manifest.entries.len());
    for entry in manifest.entries {
        let path: PathBuf = dir.join(&entry.file);
        let mut traj = read_trajectory_csv(&path)?;
        traj.system = entry.system.clone();
        traj.params = entry.params.clone();
        out.push((entry, traj));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ode::{find_system, register_builtin_systems, simulate};
    use proptest::prelude::*;

    fn sine_traj(n: usize, freq: f64, dt: f64) -> Trajectory {
        let times: Vec<f64> = (0..n).map(|i| i as f64 * dt).collect();
        let states: Vec<Vec<f64>> = times
            .iter()
            .map(|t| vec![(2.0 * std::f64::consts::PI * freq * t).sin()])
            .collect();
        Trajectory {
            system: "sine".into(),
            params: BTreeMap::new(),
            t_max: *times.last().unwrap(),
            times,
            states,
            dt,
        }
    }

    #[test]
    fn normalize_maps_range_endpoints() {
        let mut traj = sine_traj(10, 0.05, 1.0);
        // overwrite with a channel spanning [-3, 3]
        for (i, s) in traj.states.iter_mut().enumerate() {
            s[0] = -3.0 + 6.0 * (i as f64) / 9.0;
        }
        let nt = normalize(&traj, traj.t_max).unwrap();
        assert!((nt.channels[0][9] - 1.0).abs() < 1e-12);
        assert!((nt.channels[0][0] + 1.0).abs() < 1e-12);
        // midpoint of the range maps to 0 (value 0.0 at the middle of [-3,3])
        let mid = nt.channels[0][4] * nt.denorm[0].scale + nt.denorm[0].offset;
        assert!((mid - traj.states[4][0]).abs() < 1e-12);
    }

    #[test]
    fn time_normalization_divides_by_t_max() {
        let traj = sine_traj(31, 0.1, 1.0); // t goes 0..30
        let nt = normalize(&traj, 30.0).unwrap();
        assert!((nt.norm_times[15] - 0.5).abs() < 1e-12);
        assert_eq!(*nt.norm_times.last().unwrap(), 1.0);
    }

    #[test]
    fn constant_channel_normalizes_to_zero() {
        let mut traj = sine_traj(10, 0.05, 1.0);
        for s in traj.states.iter_mut() {
            s[0] = 4.2;
        }
        let nt = normalize(&traj, traj.t_max).unwrap();
        assert!(nt.channels[0].iter().all(|v| *v == 0.0));
        assert_eq!(nt.denorm[0].scale, 1.0);
        assert_eq!(nt.denormalize(0, 0.0), 4.2);
    }

    proptest! {
        #[test]
        fn normalization_round_trip_is_identity(
            values in proptest::collection::vec(-1e3f64..1e3, 5..40),
        ) {
            let dt = 0.1;
            let times: Vec<f64> = (0..values.len()).map(|i| i as f64 * dt).collect();
            let traj = Trajectory {
                system: "prop".into(),
                params: BTreeMap::new(),
                t_max: *times.last().unwrap() + 1.0,
                times,
                states: values.iter().map(|v| vec![*v]).collect(),
                dt,
            };
            let nt = normalize(&traj, traj.t_max).unwrap();
            for (norm, raw) in nt.channels[0].iter().zip(&values) {
                prop_assert!(*norm >= -1.0 - 1e-12 && *norm <= 1.0 + 1e-12);
                let back = nt.denormalize(0, *norm);
                prop_assert!((back - raw).abs() <= 1e-12 * raw.abs().max(1.0));
            }
        }
    }

    #[test]
    fn channel_independence() {
        // changing channel 1 must not affect channel 0's normalization
        let sys = find_system(&register_builtin_systems(), "harmonic_oscillator")
            .unwrap()
            .clone();
        let traj = simulate(&sys, &[1.0, 0.5], 6.0, 0.1).unwrap();
        let nt_a = normalize(&traj, 6.0).unwrap();
        let mut modified = traj.clone();
        for s in modified.states.iter_mut() {
            s[1] *= 17.0;
        }
        let nt_b = normalize(&modified, 6.0).unwrap();
        assert_eq!(nt_a.channels[0], nt_b.channels[0]);
    }

    /// Plain DFT magnitude per bin; test-only oracle.
    fn dft_peak_bin(signal: &[f64]) -> usize {
        let n = signal.len();
        let mut best = (0usize, 0.0f64);
        for k in 1..n / 2 {
            let (mut re, mut im) = (0.0, 0.0);
            for (i, v) in signal.iter().enumerate() {
                let a = -2.0 * std::f64::consts::PI * (k * i) as f64 / n as f64;
                re += v * a.cos();
                im += v * a.sin();
            }
            let mag = re * re + im * im;
            if mag > best.1 {
                best = (k, mag);
            }
        }
        best.0
    }

    #[test]
    fn multi_timescale_normalization_aligns_cycle_counts() {
        // same 100-point sine shape at 10x different sampling rates; choosing
        // t_max 10x apart puts the same number of cycles on [0,1]
        let slow = sine_traj(100, 0.1, 1.0); // 1 Hz-ish over 99 s
        let fast = sine_traj(100, 1.0, 0.1); // same shape over 9.9 s
        let nt_slow = normalize(&slow, 99.0).unwrap();
        let nt_fast = normalize(&fast, 9.9).unwrap();
        assert_eq!(
            dft_peak_bin(&nt_slow.channels[0]),
            dft_peak_bin(&nt_fast.channels[0])
        );
    }

    #[test]
    fn prefix_floor_rule() {
        let traj = sine_traj(100, 0.02, 1.0);
        let nt = normalize(&traj, traj.t_max).unwrap();
        assert_eq!(slice_prefix(&nt, 0.3).unwrap().prefix_len, 30);
        assert_eq!(slice_prefix(&nt, 1.0).unwrap().prefix_len, 100);

        let traj = sine_traj(101, 0.02, 1.0);
        let nt = normalize(&traj, traj.t_max).unwrap();
        assert_eq!(slice_prefix(&nt, 0.9).unwrap().prefix_len, 90);
    }

    #[test]
    fn too_short_prefix_is_rejected() {
        let traj = sine_traj(10, 0.05, 1.0);
        let nt = normalize(&traj, traj.t_max).unwrap();
        assert!(matches!(
            slice_prefix(&nt, 0.1),
            Err(LassError::PrefixTooShort { len: 1 })
        ));
    }

    #[test]
    fn manifest_round_trip() {
        let sys = find_system(&register_builtin_systems(), "harmonic_oscillator")
            .unwrap()
            .clone();
        let trajs = vec![
            simulate(&sys, &[1.0, 0.0], 5.0, 0.1).unwrap(),
            simulate(&sys, &[0.5, 0.5], 5.0, 0.1).unwrap(),
        ];
        let dir = std::env::temp_dir().join("lassode_manifest_test");
        let _ = std::fs::remove_dir_all(&dir);
        let written = write_dataset(&trajs, &dir).unwrap();
        let read = read_manifest(&dir).unwrap();
        assert_eq!(written, read);
        let loaded = load_dataset(&dir).unwrap();
        assert_eq!(loaded.len(), 2);
    }

    #[test]
    fn empty_manifest_is_valid() {
        let dir = std::env::temp_dir().join("lassode_manifest_empty");
        let _ = std::fs::remove_dir_all(&dir);
        write_dataset(&[], &dir).unwrap();
        let m = read_manifest(&dir).unwrap();
        assert!(m.entries.is_empty());
    }

    #[test]
    fn missing_csv_is_named_in_error() {
        let sys = find_system(&register_builtin_systems(), "harmonic_oscillator")
            .unwrap()
            .clone();
        let trajs = vec![simulate(&sys, &[1.0, 0.0], 5.0, 0.1).unwrap()];
        let dir = std::env::temp_dir().join("lassode_manifest_missing");
        let _ = std::fs::remove_dir_all(&dir);
        let manifest = write_dataset(&trajs, &dir).unwrap();
        std::fs::remove_file(dir.join(&manifest.entries[0].file)).unwrap();
        let err = load_dataset(&dir).unwrap_err();
        assert!(err.to_string().contains(&manifest.entries[0].file));
    }
}
