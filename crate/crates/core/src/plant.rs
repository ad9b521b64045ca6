//! Ground-truth data generation: the electronic throttle (ETC) plant, a
//! fixed-step RK4 integrator, damped multi-sine excitation and measurement
//! noise.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::percentile;

/// Physical parameters of the throttle model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EtcParams {
    pub n_m: f64,
    pub j_m: f64,
    pub j_g: f64,
    pub b_m: f64,
    pub b_t: f64,
    pub k_sp: f64,
    pub k_t: f64,
    pub r_p: f64,
    pub r_af: f64,
    pub l_a: f64,
    pub k_b: f64,
    pub r_a: f64,
    pub k_g: f64,
    /// Ambient pressure in atmospheres.
    pub p_atm: f64,
}

impl Default for EtcParams {
    fn default() -> Self {
        Self {
            n_m: 4.0,
            j_m: 0.0004,
            j_g: 0.005,
            b_m: 0.03,
            b_t: 3.4e-3,
            k_sp: 0.4316,
            k_t: 0.1045,
            r_p: 0.0015,
            r_af: 0.002,
            l_a: 0.003,
            k_b: 0.1051,
            r_a: 1.9,
            k_g: 100.0,
            p_atm: 1.0,
        }
    }
}

impl EtcParams {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.n_m, self.j_m, self.j_g, self.b_m, self.b_t, self.k_sp, self.k_t, self.r_p,
            self.r_af, self.l_a, self.k_b, self.r_a, self.k_g, self.p_atm,
        ];
        if all.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidArgument("ETC parameters must be finite and > 0".into()))
        }
    }

    /// Reflected inertia `N_m^2 J_m + J_g`.
    pub fn inertia(&self) -> f64 {
        self.n_m * self.n_m * self.j_m + self.j_g
    }

    /// Spring, friction and air torque acting on the plate.
    pub fn load_torque(&self, x: &[f64; 3]) -> f64 {
        -self.k_sp * (x[0] - FRAC_PI_2) - (self.n_m * self.n_m * self.b_m + self.b_t) * x[1]
            - 2.0 * self.p_atm * (PI - x[0]) * self.r_p * self.r_p * self.r_af * x[0].cos().powi(2)
    }
}

/// Plate angle, angular rate and motor torque; `u` is the armature current.
pub fn etc_rhs(x: &[f64; 3], u: f64, p: &EtcParams) -> [f64; 3] {
    [
        x[1],
        (p.load_torque(x) + p.n_m * p.k_t * x[2]) / p.inertia(),
        (-p.n_m * p.k_b * x[1] - p.r_a * x[2] + p.k_g * u) / p.l_a,
    ]
}

/// Rest point of the plant for `u = 0`.
pub const ETC_EQUILIBRIUM: [f64; 3] = [FRAC_PI_2, 0.0, 0.0];

/// One classical RK4 step; `u_of_t` is sampled at the stage times.
pub fn rk4_step<const D: usize>(
    rhs: &impl Fn(&[f64; D], f64) -> [f64; D],
    x: &[f64; D],
    t: f64,
    h: f64,
    u_of_t: &impl Fn(f64) -> f64,
) -> [f64; D] {
    let shifted = |base: &[f64; D], k: &[f64; D], a: f64| -> [f64; D] {
        std::array::from_fn(|i| base[i] + a * k[i])
    };
    let k1 = rhs(x, u_of_t(t));
    let u_mid = u_of_t(t + 0.5 * h);
    let k2 = rhs(&shifted(x, &k1, 0.5 * h), u_mid);
    let k3 = rhs(&shifted(x, &k2, 0.5 * h), u_mid);
    let k4 = rhs(&shifted(x, &k3, h), u_of_t(t + h));
    std::array::from_fn(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
}

/// Uniformly sampled record of one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub tau: f64,
    pub t: Vec<f64>,
    pub u: Vec<f64>,
    /// Clean output `x1`.
    pub y: Vec<f64>,
    pub y_noisy: Vec<f64>,
    /// Full state per sample; ground truth only.
    pub state_log: Option<Vec<Vec<f64>>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Simulates `n` samples `t_k = k tau`, taking `substeps` RK4 steps per
/// sample. The output `y` is the first state component.
pub fn integrate<const D: usize>(
    rhs: impl Fn(&[f64; D], f64) -> [f64; D],
    x0: [f64; D],
    u_of_t: impl Fn(f64) -> f64,
    tau: f64,
    n: usize,
    substeps: usize,
) -> Result<Trajectory> {
    integrate_with_breaks(rhs, x0, u_of_t, tau, n, substeps, &[])
}

/// Like [`integrate`], but any RK4 step straddling one of `breaks` (sorted
/// times where `u` has a kink) is split there so the kink does not cost
/// accuracy.
pub fn integrate_with_breaks<const D: usize>(
    rhs: impl Fn(&[f64; D], f64) -> [f64; D],
    x0: [f64; D],
    u_of_t: impl Fn(f64) -> f64,
    tau: f64,
    n: usize,
    substeps: usize,
    breaks: &[f64],
) -> Result<Trajectory> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!("tau {tau} must be > 0")));
    }
    if n < 2 {
        return Err(Error::InvalidArgument("need at least 2 samples".into()));
    }
    if substeps == 0 {
        return Err(Error::InvalidArgument("substeps must be >= 1".into()));
    }
    let h = tau / substeps as f64;
    let mut next_break = 0;
    let mut x = x0;
    let mut t_vec = Vec::with_capacity(n);
    let mut u_vec = Vec::with_capacity(n);
    let mut y_vec = Vec::with_capacity(n);
    let mut states = Vec::with_capacity(n);
    for k in 0..n {
        let tk = k as f64 * tau;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::IntegrationDiverged { step: k });
        }
        t_vec.push(tk);
        u_vec.push(u_of_t(tk));
        y_vec.push(x[0]);
        states.push(x.to_vec());
        if k + 1 < n {
            for s in 0..substeps {
                let mut a = tk + s as f64 * h;
                let b = a + h;
                while next_break < breaks.len() && breaks[next_break] <= a {
                    next_break += 1;
                }
                while next_break < breaks.len() && breaks[next_break] < b {
                    let c = breaks[next_break];
                    x = rk4_step(&rhs, &x, a, c - a, &u_of_t);
                    a = c;
                    next_break += 1;
                }
                x = rk4_step(&rhs, &x, a, b - a, &u_of_t);
            }
        }
    }
    Ok(Trajectory {
        tau,
        t: t_vec,
        u: u_vec,
        y_noisy: y_vec.clone(),
        y: y_vec,
        state_log: Some(states),
    })
}

/// Ranges from which excitation parameters are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExcitationBounds {
    pub n_b: usize,
    pub omega_max: f64,
    pub mu: f64,
    pub u_bar: f64,
}

impl Default for ExcitationBounds {
    fn default() -> Self {
        Self {
            n_b: 20,
            omega_max: 10.0,
            mu: 4.0,
            u_bar: 5.0,
        }
    }
}

/// `u(t) = sat_[-u_bar, u_bar](exp(-mu t) sum_i a_i sin(w_i t + psi_i))`
/// with `w_i = i w_max / n_B`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcitationSpec {
    pub n_b: usize,
    pub omega_max: f64,
    pub mu: f64,
    pub u_bar: f64,
    pub amplitudes: Vec<f64>,
    pub phases: Vec<f64>,
    pub seed: u64,
}

impl ExcitationSpec {
    pub fn random(bounds: &ExcitationBounds, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut amplitudes = Vec::with_capacity(bounds.n_b);
        let mut phases = Vec::with_capacity(bounds.n_b);
        for _ in 0..bounds.n_b {
            amplitudes.push(rng.gen_range(-bounds.u_bar..=bounds.u_bar));
            phases.push(rng.gen_range(0.0..2.0 * PI));
        }
        Self {
            n_b: bounds.n_b,
            omega_max: bounds.omega_max,
            mu: bounds.mu,
            u_bar: bounds.u_bar,
            amplitudes,
            phases,
            seed,
        }
    }

    pub fn pulsation(&self, i: usize) -> f64 {
        i as f64 * self.omega_max / self.n_b as f64
    }

    pub fn value(&self, t: f64) -> f64 {
        excitation(self, t)
    }

    /// Damped multi-sine before saturation.
    pub fn unsaturated(&self, t: f64) -> f64 {
        let sum: f64 = self
            .amplitudes
            .iter()
            .zip(&self.phases)
            .enumerate()
            .map(|(i, (a, psi))| a * (self.pulsation(i + 1) * t + psi).sin())
            .sum();
        (-self.mu * t).exp() * sum
    }

    /// Times in `(0, t_end)` where the saturation switches on or off,
    /// located by a scan at `1e-4` followed by bisection.
    pub fn saturation_breaks(&self, t_end: f64) -> Vec<f64> {
        const SCAN: f64 = 1e-4;
        let excess = |t: f64| self.unsaturated(t).abs() - self.u_bar;
        let mut out = Vec::new();
        let steps = (t_end / SCAN).ceil() as usize;
        let mut t0 = 0.0;
        let mut f0 = excess(t0);
        for i in 1..=steps {
            let t1 = (i as f64 * SCAN).min(t_end);
            let f1 = excess(t1);
            if (f0 > 0.0) != (f1 > 0.0) {
                let (mut lo, mut hi) = (t0, t1);
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    if (excess(mid) > 0.0) == (f0 > 0.0) {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                out.push(0.5 * (lo + hi));
            }
            t0 = t1;
            f0 = f1;
        }
        out
    }
}

pub fn excitation(spec: &ExcitationSpec, t: f64) -> f64 {
    spec.unsaturated(t).clamp(-spec.u_bar, spec.u_bar)
}

/// `y + nsr * percentile(|y|, 99) * nu` with standard Gaussian `nu`.
pub fn add_noise(y: &[f64], nsr: f64, seed: u64) -> Result<Vec<f64>> {
    if !(nsr >= 0.0 && nsr.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise ratio {nsr} must be >= 0")));
    }
    if nsr == 0.0 || y.is_empty() {
        return Ok(y.to_vec());
    }
    let abs: Vec<f64> = y.iter().map(|v| v.abs()).collect();
    let level = nsr * percentile(&abs, 99.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(y.iter()
        .map(|v| {
            let nu: f64 = StandardNormal.sample(&mut rng);
            v + level * nu
        })
        .collect())
}

/// SplitMix64 finaliser.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeds of scenario `k`: `mix64(master + G * (2k + 1))` for the excitation
/// and `mix64(master + G * (2k + 2))` for the noise, `G` being the 64-bit
/// golden-ratio increment. Each scenario is reproducible on its own.
pub fn scenario_seeds(master_seed: u64, k: usize) -> ScenarioSeeds {
    const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
    let idx = k as u64;
    ScenarioSeeds {
        excitation: mix64(master_seed.wrapping_add(GOLDEN.wrapping_mul(2 * idx + 1))),
        noise: mix64(master_seed.wrapping_add(GOLDEN.wrapping_mul(2 * idx + 2))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioSeeds {
    pub excitation: u64,
    pub noise: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub n_scenarios: usize,
    pub tau: f64,
    pub duration: f64,
    pub nsr: f64,
    pub master_seed: u64,
    /// RK4 steps per sampling period.
    pub substeps: usize,
    pub params: EtcParams,
    pub excitation: ExcitationBounds,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_scenarios: 100,
            tau: 0.003,
            duration: 3.0,
            nsr: 0.03,
            master_seed: 0,
            substeps: 64,
            params: EtcParams::default(),
            excitation: ExcitationBounds::default(),
        }
    }
}

impl DatasetConfig {
    pub fn n_samples(&self) -> usize {
        (self.duration / self.tau).round() as usize
    }
}

/// Simulates one excitation scenario from rest.
pub fn simulate_scenario(cfg: &DatasetConfig, k: usize) -> Result<Trajectory> {
    let seeds = scenario_seeds(cfg.master_seed, k);
    let spec = ExcitationSpec::random(&cfg.excitation, seeds.excitation);
    let params = cfg.params;
    let n = cfg.n_samples();
    let breaks = spec.saturation_breaks(n as f64 * cfg.tau);
    let mut traj = integrate_with_breaks(
        |x: &[f64; 3], u| etc_rhs(x, u, &params),
        ETC_EQUILIBRIUM,
        |t| spec.value(t),
        cfg.tau,
        n,
        cfg.substeps,
        &breaks,
    )?;
    traj.y_noisy = add_noise(&traj.y, cfg.nsr, seeds.noise)?;
    Ok(traj)
}

pub fn make_dataset(cfg: &DatasetConfig) -> Result<Vec<Trajectory>> {
    if cfg.n_scenarios == 0 || !(cfg.tau > 0.0) || !(cfg.duration > 0.0) {
        return Err(Error::InvalidArgument(
            "scenario count, tau and duration must be positive".into(),
        ));
    }
    cfg.params.validate()?;
    (0..cfg.n_scenarios)
        .into_par_iter()
        .map(|k| simulate_scenario(cfg, k))
        .collect()
}

/// Contents of `manifest.json` in a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub files: Vec<String>,
    pub tau: f64,
    pub nsr: f64,
    pub master_seed: u64,
    pub n_samples: usize,
    pub seeds: Vec<ScenarioSeeds>,
    pub config: DatasetConfig,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn scenario_file_name(k: usize) -> String {
    format!("scenario_{k}.csv")
}

pub fn trajectory_to_csv(traj: &Trajectory) -> String {
    let mut out = String::with_capacity(traj.len() * 64);
    out.push_str("t,u,y,y_noisy\n");
    for i in 0..traj.len() {
        // `{}` on f64 prints the shortest representation that round-trips
        let _ = writeln!(out, "{},{},{},{}", traj.t[i], traj.u[i], traj.y[i], traj.y_noisy[i]);
    }
    out
}

pub fn write_trajectory_csv(path: &Path, traj: &Trajectory) -> Result<()> {
    std::fs::write(path, trajectory_to_csv(traj)).map_err(|e| Error::io(path, e))
}

pub fn read_trajectory_csv(path: &Path, tau: f64) -> Result<Trajectory> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == "t,u,y,y_noisy" => {}
        _ => return Err(Error::format(path, "expected header t,u,y,y_noisy")),
    }
    let mut cols: [Vec<f64>; 4] = Default::default();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::format(path, format!("line {}: expected 4 fields", lineno + 2)));
        }
        for (col, f) in cols.iter_mut().zip(&fields) {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| Error::format(path, format!("line {}: bad number {f:?}", lineno + 2)))?;
            col.push(v);
        }
    }
    let [t, u, y, y_noisy] = cols;
    if t.is_empty() {
        return Err(Error::format(path, "no samples"));
    }
    Ok(Trajectory {
        tau,
        t,
        u,
        y,
        y_noisy,
        state_log: None,
    })
}

/// Writes `scenario_<k>.csv` files plus `manifest.json` into `dir`.
pub fn write_dataset(dir: &Path, cfg: &DatasetConfig, trajs: &[Trajectory]) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files: Vec<String> = (0..trajs.len()).map(scenario_file_name).collect();
    for (traj, name) in trajs.iter().zip(&files) {
        write_trajectory_csv(&dir.join(name), traj)?;
    }
    let manifest = DatasetManifest {
        files,
        tau: cfg.tau,
        nsr: cfg.nsr,
        master_seed: cfg.master_seed,
        n_samples: cfg.n_samples(),
        seeds: (0..trajs.len()).map(|k| scenario_seeds(cfg.master_seed, k)).collect(),
        config: cfg.clone(),
    };
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path: PathBuf = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
}

pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<Trajectory>)> {
    let manifest = read_manifest(dir)?;
    let trajs = manifest
        .files
        .par_iter()
        .map(|f| read_trajectory_csv(&dir.join(f), manifest.tau))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, trajs))
}
