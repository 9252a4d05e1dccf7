//! Synthetic dynamical-system library and fixed-step RK4 simulation.
//!
//! Trajectories are written as CSV (`t,x1,...,xd`) with enough digits to
//! survive a round trip well below solver accuracy.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::LassError;

pub const MAX_STATE_DIM: usize = 10;
pub const BLOWUP_LIMIT: f64 = 1e12;
const SAMPLE_RETRIES: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    VanDerPol,
    LotkaVolterra,
    FitzHughNagumo,
    Lorenz63,
    Rossler,
    Duffing,
    Pendulum,
    LogisticGrowth,
    HopfNormal,
    HarmonicOscillator,
}

#[derive(Clone, Debug)]
pub struct OdeSystem {
    pub name: String,
    pub state_dim: usize,
    pub kind: SystemKind,
    pub params: BTreeMap<String, f64>,
    pub default_t_max: f64,
    pub default_dt: f64,
    /// Range each state coordinate is drawn from when sampling datasets.
    pub x0_range: Vec<(f64, f64)>,
}

impl OdeSystem {
    fn p(&self, key: &str) -> f64 {
        *self
            .params
            .get(key)
            .unwrap_or_else(|| panic!("{}: missing param {key}", self.name))
    }

    pub fn rhs(&self, x: &[f64], dx: &mut [f64]) {
        debug_assert_eq!(x.len(), self.state_dim);
        match self.kind {
            SystemKind::VanDerPol => {
                let mu = self.p("mu");
                dx[0] = x[1];
                dx[1] = mu * (1.0 - x[0] * x[0]) * x[1] - x[0];
            }
            SystemKind::LotkaVolterra => {
                let (a, b, c, d) = (
                    self.p("alpha"),
                    self.p("beta"),
                    self.p("gamma"),
                    self.p("delta"),
                );
                dx[0] = a * x[0] - b * x[0] * x[1];
                dx[1] = d * x[0] * x[1] - c * x[1];
            }
            SystemKind::FitzHughNagumo => {
                let (a, b, tau, i_ext) = (self.p("a"), self.p("b"), self.p("tau"), self.p("i_ext"));
                dx[0] = x[0] - x[0].powi(3) / 3.0 - x[1] + i_ext;
                dx[1] = (x[0] + a - b * x[1]) / tau;
            }
            SystemKind::Lorenz63 => {
                let (s, r, b) = (self.p("sigma"), self.p("rho"), self.p("beta"));
                dx[0] = s * (x[1] - x[0]);
                dx[1] = x[0] * (r - x[2]) - x[1];
                dx[2] = x[0] * x[1] - b * x[2];
            }
            SystemKind::Rossler => {
                let (a, b, c) = (self.p("a"), self.p("b"), self.p("c"));
                dx[0] = -x[1] - x[2];
                dx[1] = x[0] + a * x[1];
                dx[2] = b + x[2] * (x[0] - c);
            }
            SystemKind::Duffing => {
                let (delta, alpha, beta) = (self.p("delta"), self.p("alpha"), self.p("beta"));
                dx[0] = x[1];
                dx[1] = -delta * x[1] - alpha * x[0] - beta * x[0].powi(3);
            }
            SystemKind::Pendulum => {
                let (g_over_l, damping) = (self.p("g_over_l"), self.p("damping"));
                dx[0] = x[1];
                dx[1] = -g_over_l * x[0].sin() - damping * x[1];
            }
            SystemKind::LogisticGrowth => {
                let (r, k) = (self.p("r"), self.p("k"));
                dx[0] = r * x[0] * (1.0 - x[0] / k);
            }
            SystemKind::HopfNormal => {
                let (mu, omega) = (self.p("mu"), self.p("omega"));
                let r2 = x[0] * x[0] + x[1] * x[1];
                dx[0] = (mu - r2) * x[0] - omega * x[1];
                dx[1] = omega * x[0] + (mu - r2) * x[1];
            }
            SystemKind::HarmonicOscillator => {
                let omega = self.p("omega");
                dx[0] = x[1];
                dx[1] = -omega * omega * x[0];
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub system: String,
    pub params: BTreeMap<String, f64>,
    pub times: Vec<f64>,
    /// (N+1) rows of state_dim values
    pub states: Vec<Vec<f64>>,
    pub dt: f64,
    pub t_max: f64,
}

impl Trajectory {
    pub fn state_dim(&self) -> usize {
        self.states.first().map_or(0, |s| s.len())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn channel(&self, j: usize) -> Vec<f64> {
        self.states.iter().map(|s| s[j]).collect()
    }
}

fn params(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

/// The builtin system registry. Coefficients the source models leave open use
/// textbook-standard defaults, recorded here and in dataset manifests.
pub fn register_builtin_systems() -> Vec<OdeSystem> {
    let mut systems = Vec::new();
    for mu in [0.5, 1.0, 3.0, 10.0] {
        systems.push(OdeSystem {
            name: format!("vanderpol_mu{mu}"),
            state_dim: 2,
            kind: SystemKind::VanDerPol,
            params: params(&[("mu", mu)]),
            default_t_max: 30.0,
            default_dt: 0.2,
            x0_range: vec![(-2.0, 2.0), (-2.0, 2.0)],
        });
    }
    systems.push(OdeSystem {
        name: "lotka_volterra".into(),
        state_dim: 2,
        kind: SystemKind::LotkaVolterra,
        params: params(&[
            ("alpha", 1.0),
            ("beta", 1.0),
            ("gamma", 1.0),
            ("delta", 1.0),
        ]),
        default_t_max: 15.0,
        default_dt: 0.1,
        x0_range: vec![(0.5, 2.0), (0.5, 2.0)],
    });
    systems.push(OdeSystem {
        name: "fitzhugh_nagumo".into(),
        state_dim: 2,
        kind: SystemKind::FitzHughNagumo,
        params: params(&[("a", 0.7), ("b", 0.8), ("tau", 12.5), ("i_ext", 0.5)]),
        default_t_max: 100.0,
        default_dt: 0.5,
        x0_range: vec![(-2.0, 2.0), (-1.0, 1.0)],
    });
    systems.push(OdeSystem {
        name: "lorenz63".into(),
        state_dim: 3,
        kind: SystemKind::Lorenz63,
        params: params(&[("sigma", 10.0), ("rho", 28.0), ("beta", 8.0 / 3.0)]),
        default_t_max: 3.0,
        default_dt: 0.02,
        x0_range: vec![(-10.0, 10.0), (-10.0, 10.0), (10.0, 30.0)],
    });
    systems.push(OdeSystem {
        name: "rossler".into(),
        state_dim: 3,
        kind: SystemKind::Rossler,
        params: params(&[("a", 0.2), ("b", 0.2), ("c", 5.7)]),
        default_t_max: 30.0,
        default_dt: 0.2,
        x0_range: vec![(-5.0, 5.0), (-5.0, 5.0), (0.0, 5.0)],
    });
    systems.push(OdeSystem {
        name: "duffing".into(),
        state_dim: 2,
        kind: SystemKind::Duffing,
        params: params(&[("delta", 0.2), ("alpha", -1.0), ("beta", 1.0)]),
        default_t_max: 30.0,
        default_dt: 0.2,
        x0_range: vec![(-1.5, 1.5), (-1.0, 1.0)],
    });
    systems.push(OdeSystem {
        name: "pendulum".into(),
        state_dim: 2,
        kind: SystemKind::Pendulum,
        params: params(&[("g_over_l", 4.0), ("damping", 0.0)]),
        default_t_max: 15.0,
        default_dt: 0.1,
        x0_range: vec![(-1.5, 1.5), (-1.0, 1.0)],
    });
    systems.push(OdeSystem {
        name: "pendulum_damped".into(),
        state_dim: 2,
        kind: SystemKind::Pendulum,
        params: params(&[("g_over_l", 4.0), ("damping", 0.3)]),
        default_t_max: 15.0,
        default_dt: 0.1,
        x0_range: vec![(-1.5, 1.5), (-1.0, 1.0)],
    });
    systems.push(OdeSystem {
        name: "logistic_growth".into(),
        state_dim: 1,
        kind: SystemKind::LogisticGrowth,
        params: params(&[("r", 1.0), ("k", 1.0)]),
        default_t_max: 12.0,
        default_dt: 0.1,
        x0_range: vec![(0.05, 0.5)],
    });
    systems.push(OdeSystem {
        name: "hopf_normal".into(),
        state_dim: 2,
        kind: SystemKind::HopfNormal,
        params: params(&[("mu", 1.0), ("omega", 2.0)]),
        default_t_max: 15.0,
        default_dt: 0.1,
        x0_range: vec![(-1.5, 1.5), (-1.5, 1.5)],
    });
    systems.push(OdeSystem {
        name: "harmonic_oscillator".into(),
        state_dim: 2,
        kind: SystemKind::HarmonicOscillator,
        params: params(&[("omega", 1.0)]),
        default_t_max: 18.0,
        default_dt: 0.15,
        x0_range: vec![(-1.5, 1.5), (-1.5, 1.5)],
    });
    systems
}

pub fn find_system<'a>(systems: &'a [OdeSystem], name: &str) -> Option<&'a OdeSystem> {
    systems.iter().find(|s| s.name == name)
}

/// Fixed-step RK4 from t=0 to t_max on a uniform grid.
pub fn simulate(
    system: &OdeSystem,
    x0: &[f64],
    t_max: f64,
    dt: f64,
) -> Result<Trajectory, LassError> {
    assert!(dt > 0.0, "dt must be positive");
    assert!(t_max >= dt, "t_max must be at least dt");
    assert_eq!(
        x0.len(),
        system.state_dim,
        "x0 dimension must match the system"
    );

    let n_steps = (t_max / dt).round() as usize;
    let d = system.state_dim;
    let mut states = Vec::with_capacity(n_steps + 1);
    let mut times = Vec::with_capacity(n_steps + 1);
    let mut x = x0.to_vec();
    states.push(x.clone());
    times.push(0.0);

    let mut k1 = vec![0.0; d];
    let mut k2 = vec![0.0; d];
    let mut k3 = vec![0.0; d];
    let mut k4 = vec![0.0; d];
    let mut tmp = vec![0.0; d];

    for step in 0..n_steps {
        system.rhs(&x, &mut k1);
        for i in 0..d {
            tmp[i] = x[i] + 0.5 * dt * k1[i];
        }
        system.rhs(&tmp, &mut k2);
        for i in 0..d {
            tmp[i] = x[i] + 0.5 * dt * k2[i];
        }
        system.rhs(&tmp, &mut k3);
        for i in 0..d {
            tmp[i] = x[i] + dt * k3[i];
        }
        system.rhs(&tmp, &mut k4);
        for i in 0..d {
            x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if x.iter().any(|v| !v.is_finite() || v.abs() > BLOWUP_LIMIT) {
            return Err(LassError::NonFinite {
                context: format!("{} at t={}", system.name, (step + 1) as f64 * dt),
                limit: BLOWUP_LIMIT,
            });
        }
        times.push((step + 1) as f64 * dt);
        states.push(x.clone());
    }

    Ok(Trajectory {
        system: system.name.clone(),
        params: system.params.clone(),
        times,
        states,
        dt,
        t_max,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SystemSampleSpec {
    pub system: String,
    pub count: usize,
    /// Optional override of the registry's initial-condition box.
    #[serde(default)]
    pub x0_range: Option<Vec<(f64, f64)>>,
    /// Optional (lo, hi) ranges for named coefficients.
    #[serde(default)]
    pub param_ranges: BTreeMap<String, (f64, f64)>,
    #[serde(default)]
    pub t_max: Option<f64>,
    #[serde(default)]
    pub dt: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub systems: Vec<SystemSampleSpec>,
    pub seed: u64,
}

/// Draws trajectories per the spec. Reproducible: trajectory i of the flat
/// list uses an rng seeded with `seed ^ i`, so parallel generation is
/// byte-identical to sequential.
pub fn sample_dataset(
    registry: &[OdeSystem],
    spec: &DatasetSpec,
) -> Result<Vec<Trajectory>, LassError> {
    let mut jobs = Vec::new();
    for sys_spec in &spec.systems {
        let system = find_system(registry, &sys_spec.system)
            .ok_or_else(|| LassError::Config(format!("unknown system: {}", sys_spec.system)))?;
        for (k, _) in &sys_spec.param_ranges {
            if !system.params.contains_key(k) {
                return Err(LassError::Config(format!(
                    "system {} has no coefficient {k}",
                    system.name
                )));
            }
        }
        if let Some(r) = &sys_spec.x0_range {
            if r.len() != system.state_dim {
                return Err(LassError::Config(format!(
                    "x0_range for {} has {} entries, state_dim is {}",
                    system.name,
                    r.len(),
                    system.state_dim
                )));
            }
        }
        for _ in 0..sys_spec.count {
            jobs.push((system.clone(), sys_spec.clone()));
        }
    }

    jobs.into_par_iter()
        .enumerate()
        .map(|(idx, (system, sys_spec))| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ idx as u64);
            sample_one(&system, &sys_spec, &mut rng)
        })
        .collect()
}

fn sample_one(
    system: &OdeSystem,
    spec: &SystemSampleSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory, LassError> {
    let t_max = spec.t_max.unwrap_or(system.default_t_max);
    let dt = spec.dt.unwrap_or(system.default_dt);
    let ranges = spec.x0_range.as_ref().unwrap_or(&system.x0_range);

    let mut last_err = None;
    for _ in 0..SAMPLE_RETRIES {
        let mut sys = system.clone();
        for (key, (lo, hi)) in &spec.param_ranges {
            let v = if lo == hi {
                *lo
            } else {
                rng.gen_range(*lo..*hi)
            };
            sys.params.insert(key.clone(), v);
        }
        let x0: Vec<f64> = ranges
            .iter()
            .map(|(lo, hi)| {
                if lo == hi {
                    *lo
                } else {
                    rng.gen_range(*lo..*hi)
                }
            })
            .collect();
        match simulate(&sys, &x0, t_max, dt) {
            Ok(traj) => return Ok(traj),
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.unwrap_or_else(|| {
        LassError::Data(format!("failed to sample a trajectory for {}", system.name))
    }))
}

pub fn write_trajectory_csv(traj: &Trajectory, path: &Path) -> Result<(), LassError> {
    let file = std::fs::File::create(path).map_err(|e| LassError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut w = std::io::BufWriter::new(file);
    let io_err = |e: std::io::Error| LassError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let d = traj.state_dim();
    let header: Vec<String> = std::iter::once("t".to_string())
        .chain((1..=d).map(|j| format!("x{j}")))
        .collect();
    writeln!(w, "{}", header.join(",")).map_err(io_err)?;
    for (t, state) in traj.times.iter().zip(&traj.states) {
        write!(w, "{t:.15}").map_err(io_err)?;
        for v in state {
            write!(w, ",{v:.15}").map_err(io_err)?;
        }
        writeln!(w).map_err(io_err)?;
    }
    Ok(())
}

pub fn read_trajectory_csv(path: &Path) -> Result<Trajectory, LassError> {
    let file = std::fs::File::open(path).map_err(|e| LassError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut lines = Vec::new();
    for line in BufReader::new(file).lines() {
        lines.push(line.map_err(|e| LassError::Io {
            path: path.display().to_string(),
            source: e,
        })?);
    }
    parse_trajectory_csv(&lines.join("\n")).map_err(|msg| LassError::Parse {
        path: path.display().to_string(),
        message: msg,
    })
}

/// Parses the `t,x1,...,xd` trajectory format. Public (with a plain string
/// error) so the fuzz targets can drive it directly.
pub fn parse_trajectory_csv(text: &str) -> Result<Trajectory, String> {
    let mut lines = text.lines();
    let header = lines.next().ok_or("empty file")?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"t") || cols.len() < 2 {
        return Err(format!("bad header: {header}"));
    }
    let d = cols.len() - 1;
    if d > MAX_STATE_DIM {
        return Err(format!(
            "{d} channels exceeds the maximum of {MAX_STATE_DIM}"
        ));
    }
    let mut times = Vec::new();
    let mut states = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 1 {
            return Err(format!(
                "row {} has {} fields, expected {}",
                i + 2,
                fields.len(),
                d + 1
            ));
        }
        let mut parsed = fields.iter().map(|f| f.parse::<f64>());
        let t = parsed
            .next()
            .unwrap()
            .map_err(|e| format!("row {}: {e}", i + 2))?;
        let state: Vec<f64> = parsed
            .collect::<Result<_, _>>()
            .map_err(|e| format!("row {}: {e}", i + 2))?;
        if !t.is_finite() || state.iter().any(|v| !v.is_finite()) {
            return Err(format!("row {}: non-finite value", i + 2));
        }
        times.push(t);
        states.push(state);
    }
    if times.len() < 2 {
        return Err("need at least 2 rows".into());
    }
    for w in times.windows(2) {
        if w[1] <= w[0] {
            return Err("timestamps must be strictly increasing".into());
        }
    }
    let dt = times[1] - times[0];
    for w in times.windows(2) {
        let step = w[1] - w[0];
        if (step - dt).abs() > 1e-9 * dt.abs().max(1.0) {
            return Err("non-uniform sampling grid".into());
        }
    }
    let t_max = *times.last().unwrap();
    Ok(Trajectory {
        system: String::new(),
        params: BTreeMap::new(),
        times,
        states,
        dt,
        t_max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn harmonic() -> OdeSystem {
        find_system(&register_builtin_systems(), "harmonic_oscillator")
            .unwrap()
            .clone()
    }

    #[test]
    fn vanderpol_mu_zero_degenerates_to_harmonic() {
        let mut vdp = find_system(&register_builtin_systems(), "vanderpol_mu1")
            .unwrap()
            .clone();
        vdp.params.insert("mu".into(), 0.0);
        let x = [0.7, -1.3];
        let mut dv = [0.0; 2];
        vdp.rhs(&x, &mut dv);
        assert_eq!(dv, [x[1], -x[0]]);
    }

    #[test]
    fn lotka_volterra_origin_is_fixed_point() {
        let lv = find_system(&register_builtin_systems(), "lotka_volterra")
            .unwrap()
            .clone();
        let mut dv = [1.0; 2];
        lv.rhs(&[0.0, 0.0], &mut dv);
        assert_eq!(dv, [0.0, 0.0]);
    }

    #[test]
    fn registry_has_four_vanderpol_stiffness_values() {
        let systems = register_builtin_systems();
        let mus: Vec<f64> = systems
            .iter()
            .filter(|s| s.kind == SystemKind::VanDerPol)
            .map(|s| s.params["mu"])
            .collect();
        assert!(mus.len() >= 4);
        let mut sorted = mus.clone();
        sorted.sort_by(f64::total_cmp);
        sorted.dedup();
        assert_eq!(sorted.len(), mus.len(), "mu values must be distinct");
    }

    #[test]
    fn harmonic_oscillator_returns_home_after_one_period() {
        let sys = harmonic();
        let t_max = 2.0 * std::f64::consts::PI;
        let traj = simulate(&sys, &[1.0, 0.0], t_max, t_max / 4096.0).unwrap();
        let last = traj.states.last().unwrap();
        assert!((last[0] - 1.0).abs() < 1e-6, "x1 = {}", last[0]);
        assert!(last[1].abs() < 1e-6, "x2 = {}", last[1]);
    }

    #[test]
    fn t_max_equal_dt_gives_two_points() {
        let sys = harmonic();
        let traj = simulate(&sys, &[1.0, 0.0], 0.1, 0.1).unwrap();
        assert_eq!(traj.len(), 2);
    }

    #[test]
    fn harmonic_energy_drift_is_tiny() {
        let sys = harmonic();
        let traj = simulate(&sys, &[1.0, 0.0], 10.0, 0.001).unwrap();
        assert_eq!(traj.len(), 10_001);
        let e0 = 0.5 * (1.0f64);
        for s in &traj.states {
            let e = 0.5 * (s[0] * s[0] + s[1] * s[1]);
            assert!((e - e0).abs() < 1e-8, "energy drifted to {e}");
        }
    }

    #[test]
    fn rk4_order_check_on_closed_form() {
        let sys = harmonic();
        let period = 2.0 * std::f64::consts::PI;
        let max_err = |dt: f64| {
            let traj = simulate(&sys, &[1.0, 0.0], period, dt).unwrap();
            traj.times
                .iter()
                .zip(&traj.states)
                .map(|(t, s)| {
                    let exact = (t.cos(), -t.sin());
                    (s[0] - exact.0).abs().max((s[1] - exact.1).abs())
                })
                .fold(0.0f64, f64::max)
        };
        let e1 = max_err(period / 100.0);
        let e2 = max_err(period / 200.0);
        assert!(
            e1 / e2 >= 12.0,
            "convergence factor {} below order-4 expectation",
            e1 / e2
        );
    }

    #[test]
    fn lotka_volterra_conserved_quantity_drifts_slowly() {
        let lv = find_system(&register_builtin_systems(), "lotka_volterra")
            .unwrap()
            .clone();
        let traj = simulate(&lv, &[1.5, 0.8], 10.0, 0.001).unwrap();
        // V = delta*x - gamma*ln x + beta*y - alpha*ln y with all coeffs 1
        let v = |s: &[f64]| s[0] - s[0].ln() + s[1] - s[1].ln();
        let v0 = v(&traj.states[0]);
        for s in &traj.states {
            assert!((v(s) - v0).abs() / v0.abs() < 1e-4);
        }
    }

    #[test]
    fn simulate_is_deterministic() {
        let sys = harmonic();
        let a = simulate(&sys, &[0.3, 0.4], 5.0, 0.01).unwrap();
        let b = simulate(&sys, &[0.3, 0.4], 5.0, 0.01).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn blow_up_is_reported() {
        let mut sys = harmonic();
        sys.kind = SystemKind::LogisticGrowth;
        sys.state_dim = 1;
        sys.params = params(&[("r", 1.0), ("k", -1.0)]); // negative capacity explodes
        let err = simulate(&sys, &[10.0], 100.0, 0.5).unwrap_err();
        assert!(matches!(err, LassError::NonFinite { .. }));
    }

    fn small_spec(seed: u64) -> DatasetSpec {
        DatasetSpec {
            systems: vec![
                SystemSampleSpec {
                    system: "harmonic_oscillator".into(),
                    count: 3,
                    x0_range: None,
                    param_ranges: BTreeMap::new(),
                    t_max: Some(6.0),
                    dt: Some(0.1),
                },
                SystemSampleSpec {
                    system: "vanderpol_mu1".into(),
                    count: 2,
                    x0_range: None,
                    param_ranges: BTreeMap::new(),
                    t_max: Some(6.0),
                    dt: Some(0.1),
                },
            ],
            seed,
        }
    }

    #[test]
    fn dataset_sampling_is_reproducible() {
        let registry = register_builtin_systems();
        let a = sample_dataset(&registry, &small_spec(42)).unwrap();
        let b = sample_dataset(&registry, &small_spec(42)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
    }

    #[test]
    fn zero_count_system_is_absent() {
        let registry = register_builtin_systems();
        let mut spec = small_spec(7);
        spec.systems[1].count = 0;
        let trajs = sample_dataset(&registry, &spec).unwrap();
        assert!(trajs.iter().all(|t| t.system == "harmonic_oscillator"));
    }

    #[test]
    fn collapsed_x0_range_pins_the_initial_state() {
        let registry = register_builtin_systems();
        let mut spec = small_spec(7);
        spec.systems.truncate(1);
        spec.systems[0].x0_range = Some(vec![(1.0, 1.0), (0.0, 0.0)]);
        let trajs = sample_dataset(&registry, &spec).unwrap();
        for t in trajs {
            assert_eq!(t.states[0], vec![1.0, 0.0]);
        }
    }

    #[test]
    fn csv_round_trip() {
        let sys = harmonic();
        let traj = simulate(&sys, &[1.0, 0.5], 3.0, 0.05).unwrap();
        let dir = std::env::temp_dir().join("lassode_csv_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("traj.csv");
        write_trajectory_csv(&traj, &path).unwrap();
        let back = read_trajectory_csv(&path).unwrap();
        assert_eq!(back.len(), traj.len());
        for (a, b) in traj.states.iter().zip(&back.states) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn csv_parser_rejects_ragged_rows() {
        let text = "t,x1,x2\n0.0,1.0,2.0\n0.1,1.0\n";
        assert!(parse_trajectory_csv(text).is_err());
    }
}
