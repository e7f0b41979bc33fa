//! Ground-truth systems: the damped Duffing oscillator and the
//! Kuramoto-Sivashinsky equation on a periodic grid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use crate::dataset::{DatasetError, SystemDescriptor, TimeSeriesDataset};
use crate::odeint::{dopri54, FnField, IntegratorConfig, OdeError};

#[derive(Debug, thiserror::Error)]
pub enum SystemError {
    #[error("invalid system parameters: {0}")]
    Params(String),
    #[error("state has dimension {got}, system expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error(transparent)]
    Integration(#[from] OdeError),
    #[error("explicit Euler left the finite range")]
    BlowUp,
    #[error("trajectory {trajectory} blew up on all {attempts} sampled initial conditions")]
    RejectionLimit { trajectory: usize, attempts: usize },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// One sampling interval of a ground-truth flow map.
pub trait Stepper: Sync {
    fn dim(&self) -> usize;
    fn step(&self, x: &[f64]) -> Result<Vec<f64>, SystemError>;

    /// `x, F(x), ..., F^steps(x)` as one flat snapshot-major vector.
    fn trajectory(&self, x0: &[f64], steps: usize) -> Result<Vec<f64>, SystemError> {
        let mut out = Vec::with_capacity((steps + 1) * x0.len());
        out.extend_from_slice(x0);
        let mut x = x0.to_vec();
        for _ in 0..steps {
            x = self.step(&x)?;
            out.extend_from_slice(&x);
        }
        Ok(out)
    }
}

/// Deterministic per-trajectory generator: stream `i` of the seed.
fn trajectory_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    rng
}

/// `x'' + gamma x' + x (beta + alpha x^2) = 0`, sampled every `dt`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DuffingParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub dt: f64,
    pub integrator: IntegratorConfig,
}

impl Default for DuffingParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: -1.0,
            gamma: 0.5,
            dt: 0.25,
            integrator: IntegratorConfig::default(),
        }
    }
}

impl DuffingParams {
    pub fn validate(&self) -> Result<(), SystemError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(SystemError::Params(format!("dt must be > 0, got {}", self.dt)));
        }
        if ![self.alpha, self.beta, self.gamma].iter().all(|v| v.is_finite()) {
            return Err(SystemError::Params("coefficients must be finite".into()));
        }
        self.integrator.validate()?;
        Ok(())
    }

    pub fn descriptor(&self) -> SystemDescriptor {
        SystemDescriptor::Duffing {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            dt: self.dt,
        }
    }

    /// `x'^2/2 + beta x^2/2 + alpha x^4/4`, non-increasing for `gamma >= 0`.
    pub fn energy(&self, s: &[f64]) -> f64 {
        0.5 * s[1] * s[1] + 0.5 * self.beta * s[0] * s[0] + 0.25 * self.alpha * s[0].powi(4)
    }
}

pub fn duffing_step(p: &DuffingParams, state: &[f64]) -> Result<[f64; 2], SystemError> {
    if state.len() != 2 {
        return Err(SystemError::Dimension {
            expected: 2,
            got: state.len(),
        });
    }
    let (a, b, g) = (p.alpha, p.beta, p.gamma);
    let field = FnField::new(2, |_t, y: &[f64], dy: &mut [f64]| {
        dy[0] = y[1];
        dy[1] = -g * y[1] - y[0] * (b + a * y[0] * y[0]);
    });
    let y = dopri54(&field, state, 0.0, p.dt, &p.integrator)?;
    Ok([y[0], y[1]])
}

impl Stepper for DuffingParams {
    fn dim(&self) -> usize {
        2
    }
    fn step(&self, x: &[f64]) -> Result<Vec<f64>, SystemError> {
        duffing_step(self, x).map(|s| s.to_vec())
    }
}

/// Duffing data: initial conditions uniform on `[-half_width, half_width]^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DuffingDataConfig {
    pub trajectories: usize,
    pub steps: usize,
    pub half_width: f64,
}

impl Default for DuffingDataConfig {
    fn default() -> Self {
        Self {
            trajectories: 1000,
            steps: 10,
            half_width: 2.0,
        }
    }
}

pub fn generate_duffing(
    p: &DuffingParams,
    cfg: &DuffingDataConfig,
    seed: u64,
) -> Result<TimeSeriesDataset, SystemError> {
    p.validate()?;
    if cfg.trajectories == 0 || cfg.steps == 0 || !(cfg.half_width > 0.0) {
        return Err(SystemError::Params(
            "need at least one trajectory, one step and a positive box".into(),
        ));
    }
    let trajs: Result<Vec<Vec<f64>>, SystemError> = (0..cfg.trajectories)
        .into_par_iter()
        .map(|i| {
            let mut rng = trajectory_rng(seed, i);
            let h = cfg.half_width;
            let x0 = [rng.random_range(-h..=h), rng.random_range(-h..=h)];
            p.trajectory(&x0, cfg.steps)
        })
        .collect();
    Ok(TimeSeriesDataset::from_trajectories(
        2,
        trajs?,
        p.descriptor(),
        seed,
    )?)
}

/// 1000 trajectories of 10 steps from `[-2, 2]^2`.
pub fn generate_duffing_dataset(seed: u64) -> Result<TimeSeriesDataset, SystemError> {
    generate_duffing(&DuffingParams::default(), &DuffingDataConfig::default(), seed)
}

/// `u_t = -u_xx - u_xxxx - u u_x` on a periodic grid of `nx` points over `length`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KsParams {
    pub length: f64,
    pub nx: usize,
    /// Sampling interval between stored snapshots.
    pub dt: f64,
    /// Euler substeps per sampling interval; `None` picks the smallest count
    /// keeping the linear part stable.
    pub substeps: Option<usize>,
    /// Use `(u^2)_x / 2` for the nonlinear term instead of `u u_x`.
    pub conservative: bool,
}

impl Default for KsParams {
    fn default() -> Self {
        Self {
            length: 16.0,
            nx: 128,
            dt: 0.005,
            substeps: None,
            conservative: false,
        }
    }
}

/// Stored states are rejected once any entry exceeds this magnitude.
pub const KS_BLOWUP_LIMIT: f64 = 1e8;

impl KsParams {
    pub fn dx(&self) -> f64 {
        self.length / self.nx as f64
    }

    pub fn validate(&self) -> Result<(), SystemError> {
        if self.nx < 5 {
            return Err(SystemError::Params("nx must be at least 5".into()));
        }
        if !(self.length > 0.0 && self.dt > 0.0) {
            return Err(SystemError::Params("length and dt must be positive".into()));
        }
        if self.substeps == Some(0) {
            return Err(SystemError::Params("substeps must be positive".into()));
        }
        Ok(())
    }

    /// Euler substeps per sampling interval. The discrete linear operator has
    /// eigenvalues down to `4/dx^2 - 16/dx^4`; the automatic count keeps
    /// `|1 + h lambda| <= 0.9` for all of them.
    pub fn effective_substeps(&self) -> usize {
        self.substeps.unwrap_or_else(|| {
            let dx = self.dx();
            let most_negative = 16.0 / dx.powi(4) - 4.0 / (dx * dx);
            let h_max = 0.95 * 2.0 / most_negative;
            ((self.dt / h_max).ceil() as usize).max(1)
        })
    }

    pub fn descriptor(&self) -> SystemDescriptor {
        SystemDescriptor::Ks {
            length: self.length,
            nx: self.nx,
            dt: self.dt,
            substeps: self.effective_substeps(),
            conservative: self.conservative,
        }
    }
}

/// Central-difference right-hand side, written into `out`.
pub fn ks_rhs_into(p: &KsParams, u: &[f64], out: &mut [f64]) {
    let n = u.len();
    let dx = p.dx();
    let (c1, c2, c4) = (0.5 / dx, 1.0 / (dx * dx), 1.0 / dx.powi(4));
    for i in 0..n {
        let um2 = u[(i + n - 2) % n];
        let um1 = u[(i + n - 1) % n];
        let up1 = u[(i + 1) % n];
        let up2 = u[(i + 2) % n];
        let ui = u[i];
        let uxx = (up1 - 2.0 * ui + um1) * c2;
        let uxxxx = (um2 - 4.0 * um1 + 6.0 * ui - 4.0 * up1 + up2) * c4;
        let adv = if p.conservative {
            0.5 * (up1 * up1 - um1 * um1) * c1
        } else {
            ui * (up1 - um1) * c1
        };
        out[i] = -uxx - uxxxx - adv;
    }
}

pub fn ks_rhs(p: &KsParams, u: &[f64]) -> Result<Vec<f64>, SystemError> {
    if u.len() != p.nx {
        return Err(SystemError::Dimension {
            expected: p.nx,
            got: u.len(),
        });
    }
    let mut out = vec![0.0; u.len()];
    ks_rhs_into(p, u, &mut out);
    Ok(out)
}

/// One sampling interval of substepped explicit Euler.
pub fn ks_step(p: &KsParams, u: &[f64]) -> Result<Vec<f64>, SystemError> {
    if u.len() != p.nx {
        return Err(SystemError::Dimension {
            expected: p.nx,
            got: u.len(),
        });
    }
    let subs = p.effective_substeps();
    let h = p.dt / subs as f64;
    let mut y = u.to_vec();
    let mut dy = vec![0.0; y.len()];
    for _ in 0..subs {
        ks_rhs_into(p, &y, &mut dy);
        for (a, b) in y.iter_mut().zip(&dy) {
            *a += h * b;
        }
    }
    if y.iter().any(|v| !v.is_finite() || v.abs() > KS_BLOWUP_LIMIT) {
        return Err(SystemError::BlowUp);
    }
    Ok(y)
}

impl Stepper for KsParams {
    fn dim(&self) -> usize {
        self.nx
    }
    fn step(&self, x: &[f64]) -> Result<Vec<f64>, SystemError> {
        ks_step(self, x)
    }
}

/// KS data: initial conditions uniform on `[-amplitude, amplitude]^nx`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KsDataConfig {
    pub trajectories: usize,
    pub steps: usize,
    pub amplitude: f64,
    /// Initial conditions tried per trajectory before giving up.
    pub max_attempts: usize,
}

impl Default for KsDataConfig {
    fn default() -> Self {
        Self {
            trajectories: 100,
            steps: 100,
            amplitude: 4.0,
            max_attempts: 100,
        }
    }
}

pub fn generate_ks(
    p: &KsParams,
    cfg: &KsDataConfig,
    seed: u64,
) -> Result<TimeSeriesDataset, SystemError> {
    p.validate()?;
    if cfg.trajectories == 0 || cfg.steps == 0 || cfg.max_attempts == 0 {
        return Err(SystemError::Params(
            "trajectories, steps and max_attempts must be positive".into(),
        ));
    }
    let results: Result<Vec<(Vec<f64>, u64)>, SystemError> = (0..cfg.trajectories)
        .into_par_iter()
        .map(|i| {
            let mut rng = trajectory_rng(seed, i);
            for attempt in 0..cfg.max_attempts {
                let u0: Vec<f64> = (0..p.nx)
                    .map(|_| rng.random_range(-cfg.amplitude..=cfg.amplitude))
                    .collect();
                match p.trajectory(&u0, cfg.steps) {
                    Ok(t) => return Ok((t, attempt as u64)),
                    Err(SystemError::BlowUp) => continue,
                    Err(e) => return Err(e),
                }
            }
            Err(SystemError::RejectionLimit {
                trajectory: i,
                attempts: cfg.max_attempts,
            })
        })
        .collect();
    let results = results?;
    let rejections = results.iter().map(|(_, r)| r).sum();
    let mut ds = TimeSeriesDataset::from_trajectories(
        p.nx,
        results.into_iter().map(|(t, _)| t).collect(),
        p.descriptor(),
        seed,
    )?;
    ds.rejections = rejections;
    Ok(ds)
}

/// 100 trajectories of 100 steps on 128 grid points.
pub fn generate_ks_dataset(seed: u64) -> Result<TimeSeriesDataset, SystemError> {
    generate_ks(&KsParams::default(), &KsDataConfig::default(), seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duffing_fixed_points() {
        let p = DuffingParams::default();
        for x in [[1.0, 0.0], [-1.0, 0.0], [0.0, 0.0]] {
            let y = duffing_step(&p, &x).unwrap();
            assert!((y[0] - x[0]).abs() < 1e-14 && y[1].abs() < 1e-14);
        }
        assert!(duffing_step(&p, &[1.0]).is_err());
    }

    #[test]
    fn duffing_converges_to_a_well() {
        let p = DuffingParams::default();
        let t = p.trajectory(&[0.5, 0.0], 200).unwrap();
        let x = t[t.len() - 2];
        assert!((x.abs() - 1.0).abs() < 1e-3, "x1 = {x}");
    }

    #[test]
    fn duffing_energy_decays_and_symmetry() {
        let p = DuffingParams::default();
        let a = p.trajectory(&[1.7, -0.9], 30).unwrap();
        let b = p.trajectory(&[-1.7, 0.9], 30).unwrap();
        for (s, w) in a.chunks(2).zip(a.chunks(2).skip(1)) {
            assert!(p.energy(w) <= p.energy(s) + 1e-7);
        }
        for (x, y) in a.iter().zip(&b) {
            assert!((x + y).abs() < 1e-12);
        }
    }

    #[test]
    fn small_duffing_dataset() {
        let cfg = DuffingDataConfig {
            trajectories: 20,
            steps: 10,
            half_width: 2.0,
        };
        let p = DuffingParams::default();
        let a = generate_duffing(&p, &cfg, 3).unwrap();
        assert_eq!(a.n_pairs(), 200);
        assert_eq!(a, generate_duffing(&p, &cfg, 3).unwrap());
        assert_ne!(a.snapshots, generate_duffing(&p, &cfg, 4).unwrap().snapshots);
        for (i, j) in a.pair_indices() {
            assert_eq!(duffing_step(&p, a.snapshot(i)).unwrap(), a.snapshot(j));
        }
        for t in 0..20 {
            assert!(a.trajectory(t)[..2].iter().all(|v| v.abs() <= 2.0));
        }
    }

    #[test]
    fn ks_rhs_annihilates_constants() {
        let p = KsParams::default();
        assert!(ks_rhs(&p, &vec![0.0; 128]).unwrap().iter().all(|&v| v == 0.0));
        assert!(ks_rhs(&p, &vec![2.5; 128]).unwrap().iter().all(|v| v.abs() < 1e-9));
        assert!(ks_rhs(&p, &[0.0; 3]).is_err());
    }

    #[test]
    fn ks_rhs_matches_analytic_sine() {
        let p = KsParams::default();
        let k = 2.0 * std::f64::consts::PI / p.length;
        let x: Vec<f64> = (0..p.nx).map(|i| i as f64 * p.dx()).collect();
        let u: Vec<f64> = x.iter().map(|&x| (k * x).sin()).collect();
        let got = ks_rhs(&p, &u).unwrap();
        let mut worst = 0.0f64;
        for (i, &xi) in x.iter().enumerate() {
            let (s, c) = (k * xi).sin_cos();
            // -u_xx - u_xxxx - u u_x
            let want = k * k * s - k.powi(4) * s - s * k * c;
            worst = worst.max((got[i] - want).abs());
        }
        assert!(worst < 1e-3, "worst {worst}");
        let p2 = KsParams { nx: 256, ..p };
        let x2: Vec<f64> = (0..p2.nx).map(|i| i as f64 * p2.dx()).collect();
        let u2: Vec<f64> = x2.iter().map(|&x| (k * x).sin()).collect();
        let got2 = ks_rhs(&p2, &u2).unwrap();
        let worst2 = x2
            .iter()
            .enumerate()
            .map(|(i, &xi)| {
                let (s, c) = (k * xi).sin_cos();
                (got2[i] - (k * k * s - k.powi(4) * s - s * k * c)).abs()
            })
            .fold(0.0, f64::max);
        let ratio = worst / worst2;
        assert!((3.5..4.5).contains(&ratio), "convergence ratio {ratio}");
    }

    #[test]
    fn ks_translation_equivariance() {
        let p = KsParams::default();
        let mut rng = trajectory_rng(1, 0);
        let u: Vec<f64> = (0..128).map(|_| rng.random_range(-4.0..4.0)).collect();
        let mut shifted = u.clone();
        shifted.rotate_right(5);
        let mut a = ks_rhs(&p, &u).unwrap();
        a.rotate_right(5);
        assert_eq!(a, ks_rhs(&p, &shifted).unwrap());
        let cons = KsParams {
            conservative: true,
            ..p
        };
        let mut b = ks_rhs(&cons, &u).unwrap();
        b.rotate_right(5);
        assert_eq!(b, ks_rhs(&cons, &shifted).unwrap());
    }

    #[test]
    fn ks_substeps() {
        let p = KsParams::default();
        assert_eq!(p.effective_substeps(), 172);
        assert_eq!(KsParams { nx: 64, ..p }.effective_substeps(), 11);
        assert_eq!(KsParams { substeps: Some(1), ..p }.effective_substeps(), 1);
    }

    #[test]
    fn ks_single_substep_blows_up() {
        let p = KsParams {
            substeps: Some(1),
            ..KsParams::default()
        };
        let cfg = KsDataConfig {
            trajectories: 2,
            steps: 100,
            max_attempts: 3,
            ..KsDataConfig::default()
        };
        assert!(matches!(
            generate_ks(&p, &cfg, 0),
            Err(SystemError::RejectionLimit { .. })
        ));
    }

    #[test]
    fn small_ks_dataset() {
        let p = KsParams {
            nx: 32,
            length: 16.0,
            ..KsParams::default()
        };
        let cfg = KsDataConfig {
            trajectories: 4,
            steps: 20,
            ..KsDataConfig::default()
        };
        let ds = generate_ks(&p, &cfg, 5).unwrap();
        assert_eq!(ds.n_pairs(), 80);
        assert_eq!(ds.d, 32);
        assert_eq!(ds.rejections, 0);
        for (i, j) in ds.pair_indices().into_iter().take(10) {
            assert_eq!(ks_step(&p, ds.snapshot(i)).unwrap(), ds.snapshot(j));
        }
    }
}
