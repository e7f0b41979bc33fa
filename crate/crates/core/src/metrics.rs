//! Evaluation: trajectory reconstruction error, Monte-Carlo eigenfunction
//! normalisation and error, basin classification and parameter sweeps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::TimeSeriesDataset;
use crate::edmd::{EdmdError, KoopmanModel};
use crate::systems::{DuffingParams, Stepper, SystemError};
use crate::trainer::{train, TrainConfig, TrainError};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error(transparent)]
    Edmd(#[from] EdmdError),
    #[error(transparent)]
    System(#[from] SystemError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("eigenfunction {index} vanishes on the sampling region")]
    ZeroNorm { index: usize },
    #[error("invalid evaluation input: {0}")]
    Invalid(String),
}

/// Monte-Carlo and classification settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub samples: usize,
    /// Axis-aligned sampling box, one `[low, high]` per state component.
    pub region: Vec<[f64; 2]>,
    pub seed: u64,
    /// Step index whose predicted state decides the basin label.
    pub horizon: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self::duffing()
    }
}

impl EvalConfig {
    /// `[-2, 2]^2`, the Duffing training region.
    pub fn duffing() -> Self {
        Self {
            samples: 10_000,
            region: vec![[-2.0, 2.0]; 2],
            seed: 0,
            horizon: 49,
        }
    }

    /// `[-4, 4]^nx`, the KS initial-condition box.
    pub fn ks(nx: usize) -> Self {
        Self {
            region: vec![[-4.0, 4.0]; nx],
            ..Self::duffing()
        }
    }

    pub fn validate(&self, d: usize) -> Result<(), MetricsError> {
        if self.samples == 0 {
            return Err(MetricsError::Invalid("sample count must be positive".into()));
        }
        if self.region.len() != d {
            return Err(MetricsError::Invalid(format!(
                "sampling box has {} axes, state has {d}",
                self.region.len()
            )));
        }
        if self.region.iter().any(|[lo, hi]| !(lo < hi) || !lo.is_finite() || !hi.is_finite()) {
            return Err(MetricsError::Invalid("sampling box is degenerate".into()));
        }
        Ok(())
    }
}

/// `count` uniform points from `region`, snapshot-major. Different `stream`s
/// give independent sample sets for the same seed.
pub fn sample_box(region: &[[f64; 2]], count: usize, seed: u64, stream: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut out = Vec::with_capacity(count * region.len());
    for _ in 0..count {
        for &[lo, hi] in region {
            out.push(rng.random_range(lo..=hi));
        }
    }
    out
}

/// `sqrt(1/N sum_{n=1}^N |x(n) - x~(n)|^2)` over flat snapshot-major
/// trajectories of `N + 1` states; the initial state is excluded.
pub fn reconstruction_error(actual: &[f64], predicted: &[f64], d: usize) -> Result<f64, MetricsError> {
    if d == 0 || actual.len() != predicted.len() || actual.len() % d != 0 {
        return Err(MetricsError::Invalid("trajectories differ in shape".into()));
    }
    let states = actual.len() / d;
    if states < 2 {
        return Err(MetricsError::Invalid("need at least two states".into()));
    }
    let sum: f64 = actual[d..]
        .iter()
        .zip(&predicted[d..])
        .map(|(a, p)| (a - p) * (a - p))
        .sum();
    Ok((sum / (states - 1) as f64).sqrt())
}

/// Mean `|phi_j|^2` over the given samples, per eigenfunction.
pub fn mean_square_eigenfunctions(
    model: &KoopmanModel,
    samples: &[f64],
) -> Result<Vec<f64>, MetricsError> {
    let d = model.dictionary.state_dim();
    let n = samples.len() / d;
    let phi = model.eigenfunctions_batch(samples, n)?;
    Ok((0..model.size())
        .map(|j| phi.column(j).iter().map(|c| c.norm_sqr()).sum::<f64>() / n as f64)
        .collect())
}

/// Rescales every eigenfunction to unit empirical `L^2` norm on the sampling box.
pub fn normalize_eigenfunctions(
    model: &KoopmanModel,
    cfg: &EvalConfig,
) -> Result<KoopmanModel, MetricsError> {
    let d = model.dictionary.state_dim();
    cfg.validate(d)?;
    let samples = sample_box(&cfg.region, cfg.samples, cfg.seed, 0);
    let norms = mean_square_eigenfunctions(model, &samples)?;
    let mut out = model.clone();
    for (j, a) in norms.into_iter().enumerate() {
        if !(a > 0.0) || !a.is_finite() {
            return Err(MetricsError::ZeroNorm { index: j });
        }
        out.rescale_eigenfunction(j, 1.0 / a.sqrt());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenError {
    /// `E_j` per eigenpair, in eigenvalue order.
    pub per_pair: Vec<f64>,
    /// Mean of `per_pair`.
    pub mean: f64,
    pub samples: usize,
}

/// `E_j = sqrt(mean |phi_j(F(x)) - mu_j phi_j(x)|^2)` over one shared sample
/// set, for a model whose eigenfunctions are already normalised.
pub fn eigenfunction_error<S: Stepper + ?Sized>(
    model: &KoopmanModel,
    truth: &S,
    cfg: &EvalConfig,
) -> Result<EigenError, MetricsError> {
    let d = model.dictionary.state_dim();
    cfg.validate(d)?;
    if truth.dim() != d {
        return Err(MetricsError::Invalid(format!(
            "stepper has dimension {}, model {d}",
            truth.dim()
        )));
    }
    let xs = sample_box(&cfg.region, cfg.samples, cfg.seed, 1);
    let stepped: Result<Vec<Vec<f64>>, SystemError> =
        xs.par_chunks(d).map(|x| truth.step(x)).collect();
    let fx: Vec<f64> = stepped?.concat();
    let n = cfg.samples;
    let phi = model.eigenfunctions_batch(&xs, n)?;
    let phi_f = model.eigenfunctions_batch(&fx, n)?;
    let per_pair: Vec<f64> = model
        .eigenvalues()
        .iter()
        .enumerate()
        .map(|(j, &mu)| {
            let s: f64 = (0..n)
                .map(|i| (phi_f[(i, j)] - mu * phi[(i, j)]).norm_sqr())
                .sum();
            (s / n as f64).sqrt()
        })
        .collect();
    let mean = per_pair.iter().sum::<f64>() / per_pair.len() as f64;
    Ok(EigenError {
        per_pair,
        mean,
        samples: n,
    })
}

/// Normalises on one sample set, then measures the eigenfunction error on another.
pub fn evaluate_eigen<S: Stepper + ?Sized>(
    model: &KoopmanModel,
    truth: &S,
    cfg: &EvalConfig,
) -> Result<EigenError, MetricsError> {
    let normalized = normalize_eigenfunctions(model, cfg)?;
    eigenfunction_error(&normalized, truth, cfg)
}

/// `+1` or `-1`, whichever is nearer to `x`; ties go to `+1`.
pub fn basin_label(x: f64) -> i8 {
    if x >= 0.0 {
        1
    } else {
        -1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub initial_conditions: Vec<[f64; 2]>,
    pub truth: Vec<i8>,
    pub predicted: Vec<i8>,
    pub accuracy: f64,
}

/// Labels initial conditions by the sign of `x_1` at step `horizon`, both
/// from the model's prediction and from simulating the true dynamics.
pub fn classify_basins(
    model: &KoopmanModel,
    initial_conditions: &[f64],
    truth: &DuffingParams,
    horizon: usize,
) -> Result<Classification, MetricsError> {
    if model.dictionary.state_dim() != 2 || initial_conditions.len() % 2 != 0 {
        return Err(MetricsError::Invalid(
            "classification needs a two-dimensional Duffing model".into(),
        ));
    }
    let n = initial_conditions.len() / 2;
    let predicted: Vec<i8> = model
        .predict_many(initial_conditions, n, horizon)?
        .iter()
        .map(|t| basin_label(t[2 * horizon]))
        .collect();
    let truth_labels: Result<Vec<i8>, SystemError> = initial_conditions
        .par_chunks(2)
        .map(|x| {
            let t = truth.trajectory(x, horizon)?;
            Ok(basin_label(t[2 * horizon]))
        })
        .collect();
    let truth_labels = truth_labels?;
    let correct = predicted
        .iter()
        .zip(&truth_labels)
        .filter(|(a, b)| a == b)
        .count();
    Ok(Classification {
        initial_conditions: initial_conditions
            .chunks(2)
            .map(|c| [c[0], c[1]])
            .collect(),
        truth: truth_labels,
        predicted,
        accuracy: correct as f64 / n.max(1) as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasinReconstruction {
    pub basin: i8,
    pub trajectories: usize,
    /// Mean of the per-trajectory reconstruction errors.
    pub mean_error: f64,
    pub max_error: f64,
}

/// Reconstruction error of `steps`-step predictions from fresh initial
/// conditions, grouped by the basin each true trajectory ends in. Draws until
/// each basin has `per_basin` trajectories.
pub fn duffing_reconstruction_by_basin(
    model: &KoopmanModel,
    truth: &DuffingParams,
    region: &[[f64; 2]],
    per_basin: usize,
    steps: usize,
    seed: u64,
) -> Result<Vec<BasinReconstruction>, MetricsError> {
    if per_basin == 0 || steps == 0 {
        return Err(MetricsError::Invalid("need trajectories and steps".into()));
    }
    let mut buckets: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    let mut stream = 0u64;
    while buckets.iter().any(|b| b.len() < per_basin) {
        let batch = 2 * per_basin;
        let ics = sample_box(region, batch, seed, 100 + stream);
        stream += 1;
        let actual: Result<Vec<Vec<f64>>, SystemError> =
            ics.par_chunks(2).map(|x| truth.trajectory(x, steps)).collect();
        let actual = actual?;
        let predicted = model.predict_many(&ics, batch, steps)?;
        for (a, p) in actual.iter().zip(&predicted) {
            let slot = (basin_label(a[2 * steps]) < 0) as usize;
            if buckets[slot].len() < per_basin {
                buckets[slot].push(reconstruction_error(a, p, 2)?);
            }
        }
        if stream > 1000 {
            return Err(MetricsError::Invalid(
                "could not find initial conditions in both basins".into(),
            ));
        }
    }
    Ok([1i8, -1]
        .iter()
        .zip(&buckets)
        .map(|(&basin, errs)| BasinReconstruction {
            basin,
            trajectories: errs.len(),
            mean_error: errs.iter().sum::<f64>() / errs.len() as f64,
            max_error: errs.iter().cloned().fold(0.0, f64::max),
        })
        .collect())
}

/// Reconstruction error of each given initial condition against a stepper.
pub fn reconstruction_errors<S: Stepper + ?Sized>(
    model: &KoopmanModel,
    truth: &S,
    initial_conditions: &[f64],
    steps: usize,
) -> Result<Vec<f64>, MetricsError> {
    let d = model.dictionary.state_dim();
    let n = initial_conditions.len() / d;
    let actual: Result<Vec<Vec<f64>>, SystemError> = initial_conditions
        .par_chunks(d)
        .map(|x| truth.trajectory(x, steps))
        .collect();
    let predicted = model.predict_many(initial_conditions, n, steps)?;
    actual?
        .iter()
        .zip(&predicted)
        .map(|(a, p)| reconstruction_error(a, p, d))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub parameter_count: usize,
    pub metric: f64,
    pub final_loss: f64,
}

/// Trains each configuration on `data` and evaluates `metric` on the result.
pub fn efficiency_sweep(
    configs: &[(String, TrainConfig)],
    data: &TimeSeriesDataset,
    metric: &dyn Fn(&KoopmanModel) -> Result<f64, MetricsError>,
) -> Result<Vec<SweepRow>, MetricsError> {
    configs
        .iter()
        .map(|(label, cfg)| {
            let (_, model, report) = train(cfg, data)?;
            Ok(SweepRow {
                label: label.clone(),
                parameter_count: report.parameter_count,
                metric: metric(&model)?,
                final_loss: report.final_loss,
            })
        })
        .collect()
}

/// Smallest parameter count whose metric meets `target` (`>=` when
/// `higher_is_better`, otherwise `<=`).
pub fn minimum_parameters(rows: &[SweepRow], target: f64, higher_is_better: bool) -> Option<usize> {
    rows.iter()
        .filter(|r| {
            if higher_is_better {
                r.metric >= target
            } else {
                r.metric <= target
            }
        })
        .map(|r| r.parameter_count)
        .min()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edmd::{compute_gram, compute_k, Dictionary};
    use crate::numerics::DenseMatrix;
    use nalgebra::dmatrix;

    #[test]
    fn reconstruction_error_cases() {
        let t = [0.0, 1.0, 2.0];
        assert_eq!(reconstruction_error(&t, &t, 1).unwrap(), 0.0);
        let e = reconstruction_error(&[5.0, 0.0, 0.0], &[0.0, 0.3, 0.4], 1).unwrap();
        assert!((e - 0.3535533905932738).abs() < 1e-15);
        let a = [0.0; 9];
        let b: Vec<f64> = a.iter().map(|v| v + 0.2).collect();
        let e = reconstruction_error(&a, &b, 3).unwrap();
        assert!((e - 0.2 * 3f64.sqrt()).abs() < 1e-15);
        assert_eq!(e, reconstruction_error(&b, &a, 3).unwrap());
        assert!(reconstruction_error(&[1.0], &[1.0], 1).is_err());
    }

    fn constant_model(value: f64) -> KoopmanModel {
        // single constant element, scaled eigenvector so phi == value
        let dict = Dictionary::custom(2, true, false, None).unwrap();
        let mut m =
            KoopmanModel::with_observable(dict, &DenseMatrix::identity(1, 1), &dmatrix![0.0, 0.0])
                .unwrap();
        m.rescale_eigenfunction(0, value);
        m
    }

    #[test]
    fn constant_eigenfunction_normalizes_to_one() {
        let cfg = EvalConfig {
            samples: 100,
            ..EvalConfig::duffing()
        };
        let m = normalize_eigenfunctions(&constant_model(2.0), &cfg).unwrap();
        let phi = crate::edmd::eigenfunctions_at(&m, &[0.3, 0.1]).unwrap();
        assert!((phi[0].re - 1.0).abs() < 1e-14);
        let err = eigenfunction_error(&m, &DuffingParams::default(), &cfg).unwrap();
        assert!(err.per_pair[0] < 1e-14);
        assert!(matches!(
            normalize_eigenfunctions(&constant_model(0.0), &cfg),
            Err(MetricsError::ZeroNorm { index: 0 })
        ));
    }

    #[test]
    fn projection_eigenfunction_moment() {
        // dictionary {x} on [-1, 1]: a = 1/3
        let dict = Dictionary::custom(1, false, true, None).unwrap();
        let m = KoopmanModel::new(dict, &dmatrix![0.5]).unwrap();
        let cfg = EvalConfig {
            samples: 1_000_000,
            region: vec![[-1.0, 1.0]],
            seed: 3,
            horizon: 49,
        };
        let a = mean_square_eigenfunctions(&m, &sample_box(&cfg.region, cfg.samples, 3, 0)).unwrap();
        assert!((a[0] / (1.0 / 3.0) - 1.0).abs() < 0.01);
        let n = normalize_eigenfunctions(&m, &cfg).unwrap();
        let phi = crate::edmd::eigenfunctions_at(&n, &[1.0]).unwrap();
        assert!((phi[0].norm() - 3f64.sqrt()).abs() < 0.01);
    }

    #[test]
    fn linear_system_eigenfunctions_are_exact() {
        struct Linear;
        impl Stepper for Linear {
            fn dim(&self) -> usize {
                2
            }
            fn step(&self, x: &[f64]) -> Result<Vec<f64>, SystemError> {
                Ok(vec![0.9 * x[0] + 0.1 * x[1], 0.8 * x[1]])
            }
        }
        let xs = sample_box(&[[-1.0, 1.0]; 2], 50, 1, 0);
        let ys: Vec<f64> = xs.chunks(2).flat_map(|x| Linear.step(x).unwrap()).collect();
        let ds = TimeSeriesDataset::from_pairs(2, &xs, &ys).unwrap();
        let dict = Dictionary::fixed(2);
        let (g, a) = compute_gram(&dict, &ds).unwrap();
        let model = KoopmanModel::new(dict, &compute_k(&g, &a, 0.0).unwrap()).unwrap();
        let cfg = EvalConfig {
            samples: 2000,
            ..EvalConfig::duffing()
        };
        let err = evaluate_eigen(&model, &Linear, &cfg).unwrap();
        assert!(err.per_pair.iter().all(|&e| e < 1e-6), "{:?}", err.per_pair);
        // normalisation is idempotent up to sampling noise
        let once = normalize_eigenfunctions(&model, &cfg).unwrap();
        let fresh = sample_box(&cfg.region, 10_000, 99, 0);
        for a in mean_square_eigenfunctions(&once, &fresh).unwrap() {
            assert!((0.9..=1.1).contains(&a), "{a}");
        }
    }

    #[test]
    fn unit_phase_invariance() {
        let dict = Dictionary::fixed(2);
        let k = dmatrix![1.0, 0.0, 0.0; 0.0, 0.9, 0.0; 0.0, 0.1, 0.8];
        let model = KoopmanModel::new(dict, &k).unwrap();
        let cfg = EvalConfig {
            samples: 500,
            ..EvalConfig::duffing()
        };
        let base = evaluate_eigen(&model, &DuffingParams::default(), &cfg).unwrap();
        let mut rotated = model.clone();
        let phase = num_complex::Complex64::new(0.6, -0.8);
        rotated.spectral.right[1] *= phase;
        let rot = evaluate_eigen(&rotated, &DuffingParams::default(), &cfg).unwrap();
        for (a, b) in base.per_pair.iter().zip(&rot.per_pair) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn equilibria_classification() {
        // a model that predicts x(n) = x(0): K = I on {1, x1, x2}
        let model = KoopmanModel::new(Dictionary::fixed(2), &DenseMatrix::identity(3, 3)).unwrap();
        let c = classify_basins(&model, &[1.0, 0.0, -1.0, 0.0], &DuffingParams::default(), 49)
            .unwrap();
        assert_eq!(c.truth, vec![1, -1]);
        assert_eq!(c.predicted, vec![1, -1]);
        assert_eq!(c.accuracy, 1.0);
        // odd symmetry flips truth labels
        let ics = sample_box(&[[-2.0, 2.0]; 2], 20, 4, 0);
        let neg: Vec<f64> = ics.iter().map(|v| -v).collect();
        let a = classify_basins(&model, &ics, &DuffingParams::default(), 49).unwrap();
        let b = classify_basins(&model, &neg, &DuffingParams::default(), 49).unwrap();
        for (x, y) in a.truth.iter().zip(&b.truth) {
            assert_eq!(*x, -*y);
        }
    }

    #[test]
    fn constant_plus_one_predictor_accuracy() {
        // K maps every state to the constant: x~(n >= 1) = (0, 0), labelled +1
        let k = dmatrix![1.0, 0.0, 0.0; 0.0, 0.0, 0.0; 0.0, 0.0, 0.0];
        let model = KoopmanModel::new(Dictionary::fixed(2), &k).unwrap();
        let ics = sample_box(&[[-2.0, 2.0]; 2], 200, 8, 0);
        let c = classify_basins(&model, &ics, &DuffingParams::default(), 49).unwrap();
        assert!(c.predicted.iter().all(|&l| l == 1));
        let plus = c.truth.iter().filter(|&&l| l == 1).count() as f64 / 200.0;
        assert_eq!(c.accuracy, plus);
    }

    #[test]
    fn sweep_minimum() {
        let rows = vec![
            SweepRow { label: "a".into(), parameter_count: 100, metric: 0.9, final_loss: 0.0 },
            SweepRow { label: "b".into(), parameter_count: 50, metric: 1.0, final_loss: 0.0 },
            SweepRow { label: "c".into(), parameter_count: 20, metric: 0.5, final_loss: 0.0 },
        ];
        assert_eq!(minimum_parameters(&rows, 1.0, true), Some(50));
        assert_eq!(minimum_parameters(&rows, 0.6, false), Some(20));
        assert_eq!(minimum_parameters(&rows, 2.0, true), None);
    }
}
