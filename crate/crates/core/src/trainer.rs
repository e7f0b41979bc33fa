//! Alternating EDMD-DL optimisation: closed-form `K` at fixed network
//! parameters, then Adam steps on the network at fixed `K`.
//!
//! The loss is `J = sum_n |Psi(x_{n+1}) - Psi(x_n) K|^2 + lambda |K|_F^2` with
//! `Psi` as a row vector. Its exact minimiser over `K` is
//! `(G + (lambda / N) I)^+ A` because `G` and `A` are averages over `N` pairs.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::TimeSeriesDataset;
use crate::edmd::{compute_k, gather_pairs, gram_from_blocks, Dictionary, EdmdError, KoopmanModel};
use crate::networks::kernels::{gemm, View};
use crate::networks::{
    adam_step, init_mlp, init_node, AdamConfig, AdamState, Architecture, DictionaryNetwork,
    InitScale,
};
use crate::numerics::DenseMatrix;
use crate::odeint::IntegratorConfig;

/// Slack allowed when checking that a `K` update does not increase `J`.
pub const MONOTONE_SLACK: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Edmd(#[from] EdmdError),
    #[error("loss became non-finite at iteration {iteration}")]
    NonFinite {
        iteration: usize,
        losses: Vec<f64>,
    },
}

impl From<crate::networks::NetworkError> for TrainError {
    fn from(e: crate::networks::NetworkError) -> Self {
        TrainError::Edmd(e.into())
    }
}

/// Trainable part of the dictionary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DictionaryKind {
    Mlp {
        width: usize,
        depth: usize,
    },
    Node {
        width: usize,
        field_width: usize,
        #[serde(default = "unit_span")]
        time_span: [f64; 2],
    },
}

fn unit_span() -> [f64; 2] {
    [0.0, 1.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Total dictionary size `M`, including the constant and the projections.
    pub dictionary_size: usize,
    pub lambda: f64,
    /// Stop once `J <= epsilon`.
    pub epsilon: f64,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Adam steps per `K` update.
    pub inner_steps: usize,
    /// Pairs per Adam step; `None` uses the whole dataset.
    pub batch_size: Option<usize>,
    pub seed: u64,
    pub dictionary: DictionaryKind,
    pub init_scale: InitScale,
    pub integrator: IntegratorConfig,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dictionary_size: 25,
            lambda: 0.01,
            epsilon: 30.0,
            learning_rate: 0.001,
            max_epochs: 5000,
            inner_steps: 1,
            batch_size: None,
            seed: 0,
            dictionary: DictionaryKind::Node {
                width: 120,
                field_width: 68,
                time_span: unit_span(),
            },
            init_scale: InitScale::Inverse,
            integrator: IntegratorConfig::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, state_dim: usize) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon must be > 0, got {}", self.epsilon));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be > 0, got {}", self.learning_rate));
        }
        if self.max_epochs == 0 || self.inner_steps == 0 {
            return bad("max_epochs and inner_steps must be positive".into());
        }
        if self.batch_size == Some(0) {
            return bad("batch_size must be positive".into());
        }
        if self.dictionary_size <= state_dim + 1 {
            return bad(format!(
                "dictionary size {} leaves no trainable elements for state dimension {state_dim}",
                self.dictionary_size
            ));
        }
        if let Err(e) = self.integrator.validate() {
            return bad(e.to_string());
        }
        self.architecture(state_dim).validate()?;
        Ok(())
    }

    pub fn architecture(&self, state_dim: usize) -> Architecture {
        let outputs = self.dictionary_size.saturating_sub(state_dim + 1);
        match self.dictionary {
            DictionaryKind::Mlp { width, depth } => Architecture::Mlp {
                input_dim: state_dim,
                width,
                hidden_depth: depth,
                outputs,
            },
            DictionaryKind::Node {
                width,
                field_width,
                time_span,
            } => Architecture::Node {
                input_dim: state_dim,
                width,
                field_width,
                outputs,
                time_span,
            },
        }
    }

    /// Freshly initialised network for this configuration.
    pub fn init_network(&self, state_dim: usize) -> Result<DictionaryNetwork, TrainError> {
        self.validate(state_dim)?;
        let outputs = self.dictionary_size - state_dim - 1;
        let mut net = match self.dictionary {
            DictionaryKind::Mlp { width, depth } => {
                init_mlp(state_dim, width, depth, outputs, self.seed, self.init_scale)?
            }
            DictionaryKind::Node {
                width,
                field_width,
                time_span,
            } => {
                let mut n =
                    init_node(state_dim, width, field_width, outputs, self.seed, self.init_scale)?;
                n.architecture = Architecture::Node {
                    input_dim: state_dim,
                    width,
                    field_width,
                    outputs,
                    time_span,
                };
                n
            }
        };
        net.integrator = self.integrator;
        Ok(net)
    }
}

/// Per-iteration record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// `J` with the previous `K` at the current parameters (absent on the first iteration).
    pub loss_before_k_update: Option<f64>,
    /// `J` right after the `K` update.
    pub loss: f64,
}

impl IterationRecord {
    pub fn monotone(&self) -> bool {
        self.loss_before_k_update
            .is_none_or(|before| self.loss <= before + MONOTONE_SLACK)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<IterationRecord>,
    pub final_loss: f64,
    pub iterations: usize,
    pub success: bool,
    /// Iteration whose parameters were returned.
    pub selected_iteration: usize,
    pub wall_time_s: f64,
    pub parameter_count: usize,
    pub monotone_violations: usize,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }
}

/// `J` for column-major `M x N` source/target blocks.
pub(crate) fn loss_from_blocks(k: &DenseMatrix, x: &[f64], y: &[f64], lambda: f64) -> f64 {
    let fit: f64 = residual(k, x, y).iter().map(|r| r * r).sum();
    fit + lambda * k.iter().map(|v| v * v).sum::<f64>()
}

/// `R = Y - K^T X`.
fn residual(k: &DenseMatrix, x: &[f64], y: &[f64]) -> Vec<f64> {
    let m = k.nrows();
    let n = x.len() / m;
    let mut r = y.to_vec();
    gemm(
        -1.0,
        View::col_major(k.as_slice(), m, m).t(),
        View::col_major(x, m, n),
        1.0,
        &mut r,
    );
    r
}

/// `J(K, theta)` over every pair of the dataset.
pub fn loss_j(
    k: &DenseMatrix,
    dict: &Dictionary,
    data: &TimeSeriesDataset,
    lambda: f64,
) -> Result<f64, EdmdError> {
    let m = dict.size();
    if k.shape() != (m, m) {
        return Err(EdmdError::Dimension {
            expected: m,
            got: k.nrows(),
        });
    }
    let (features, _) = dict.evaluate_batch(&data.snapshots, data.n_snapshots())?;
    let (x, y) = gather_pairs(&features, m, &data.pair_indices());
    Ok(loss_from_blocks(k, &x, &y, lambda))
}

/// `K` minimising `J` at the dictionary's current parameters.
pub fn update_k(
    dict: &Dictionary,
    data: &TimeSeriesDataset,
    lambda: f64,
) -> Result<DenseMatrix, EdmdError> {
    let (g, a) = crate::edmd::compute_gram(dict, data)?;
    compute_k(&g, &a, lambda / data.n_pairs() as f64)
}

/// Output cotangent for the snapshots of a batch: `dJ/dY = 2R`, `dJ/dX = -2 K R`,
/// accumulated per snapshot and restricted to the trainable rows.
fn trainable_cotangent(
    k: &DenseMatrix,
    x: &[f64],
    y: &[f64],
    pairs: &[(usize, usize)],
    n_snapshots: usize,
    fixed: usize,
) -> Vec<f64> {
    let m = k.nrows();
    let n = pairs.len();
    let r = residual(k, x, y);
    let mut kr = vec![0.0; m * n];
    gemm(
        1.0,
        View::col_major(k.as_slice(), m, m),
        View::col_major(&r, m, n),
        0.0,
        &mut kr,
    );
    let t = m - fixed;
    let mut out = vec![0.0; t * n_snapshots];
    for (p, &(i, j)) in pairs.iter().enumerate() {
        for q in 0..t {
            out[j * t + q] += 2.0 * r[p * m + fixed + q];
            out[i * t + q] -= 2.0 * kr[p * m + fixed + q];
        }
    }
    out
}

/// Snapshots touched by a set of pairs, with the pairs re-indexed into them.
fn local_snapshots(
    data: &TimeSeriesDataset,
    pairs: &[(usize, usize)],
) -> (Vec<f64>, Vec<(usize, usize)>) {
    let mut map = std::collections::BTreeMap::new();
    for &(i, j) in pairs {
        map.insert(i, 0);
        map.insert(j, 0);
    }
    let mut xs = Vec::with_capacity(map.len() * data.d);
    for (n, (idx, slot)) in map.iter_mut().enumerate() {
        *slot = n;
        xs.extend_from_slice(data.snapshot(*idx));
    }
    let local = pairs.iter().map(|(i, j)| (map[i], map[j])).collect();
    (xs, local)
}

/// Runs the alternating optimisation and decomposes the selected `K`.
pub fn train(
    config: &TrainConfig,
    data: &TimeSeriesDataset,
) -> Result<(Dictionary, KoopmanModel, TrainReport), TrainError> {
    train_with_observer(config, data, &mut |_, _| {})
}

/// As [`train`], calling `observer` after every `K` update.
pub fn train_with_observer(
    config: &TrainConfig,
    data: &TimeSeriesDataset,
    observer: &mut dyn FnMut(&IterationRecord, &DictionaryNetwork),
) -> Result<(Dictionary, KoopmanModel, TrainReport), TrainError> {
    let network = config.init_network(data.d)?;
    train_from(config, data, network, observer)
}

/// Continues training from the given network parameters.
pub fn train_from(
    config: &TrainConfig,
    data: &TimeSeriesDataset,
    network: DictionaryNetwork,
    observer: &mut dyn FnMut(&IterationRecord, &DictionaryNetwork),
) -> Result<(Dictionary, KoopmanModel, TrainReport), TrainError> {
    config.validate(data.d)?;
    data.validate().map_err(EdmdError::from)?;
    if network.input_dim() != data.d || network.outputs() + data.d + 1 != config.dictionary_size {
        return Err(TrainError::Config(
            "network shape disagrees with the configuration".into(),
        ));
    }
    let start = Instant::now();
    let pairs = data.pair_indices();
    let n_pairs = pairs.len();
    let n_snap = data.n_snapshots();
    let mut dict = Dictionary::new(network);
    let m = dict.size();
    let fixed = dict.fixed_size();
    let k_lambda = config.lambda / n_pairs as f64;
    let mut adam = AdamState::new(dict.network().unwrap().count_parameters());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..n_pairs).collect();
    let mut cursor = n_pairs;

    let mut records = Vec::new();
    let mut k_prev: Option<DenseMatrix> = None;
    let mut best: Option<(f64, usize, Vec<f64>, DenseMatrix)> = None;
    let mut success = false;

    for iteration in 0..config.max_epochs {
        let (features, record) = dict.evaluate_batch(&data.snapshots, n_snap)?;
        let (x, y) = gather_pairs(&features, m, &pairs);
        let before = k_prev
            .as_ref()
            .map(|k| loss_from_blocks(k, &x, &y, config.lambda));
        let (g, a) = gram_from_blocks(&x, &y, m);
        let k = compute_k(&g, &a, k_lambda)?;
        let loss = loss_from_blocks(&k, &x, &y, config.lambda);
        let rec = IterationRecord {
            iteration,
            loss_before_k_update: before,
            loss,
        };
        records.push(rec);
        if !loss.is_finite() {
            return Err(TrainError::NonFinite {
                iteration,
                losses: records.iter().map(|r| r.loss).collect(),
            });
        }
        observer(&rec, dict.network().unwrap());
        let params = &dict.network().unwrap().params;
        if best.as_ref().is_none_or(|b| loss < b.0) {
            best = Some((loss, iteration, params.clone(), k.clone()));
        }
        if loss <= config.epsilon {
            success = true;
            best = Some((loss, iteration, params.clone(), k.clone()));
            break;
        }
        if iteration + 1 == config.max_epochs {
            break;
        }

        let mut full = Some((record.expect("trainable dictionary"), x, y));
        for _ in 0..config.inner_steps {
            let net = dict.network().unwrap();
            let grads = match config.batch_size {
                None => {
                    let (rec, x, y) = match full.take() {
                        Some(v) => v,
                        None => {
                            let (f, r) = dict.evaluate_batch(&data.snapshots, n_snap)?;
                            let (x, y) = gather_pairs(&f, m, &pairs);
                            (r.unwrap(), x, y)
                        }
                    };
                    let cot = trainable_cotangent(&k, &x, &y, &pairs, n_snap, fixed);
                    net.backward(&rec, &cot)?
                }
                Some(bs) => {
                    let bs = bs.min(n_pairs);
                    if cursor + bs > n_pairs {
                        order.shuffle(&mut rng);
                        cursor = 0;
                    }
                    let batch: Vec<(usize, usize)> =
                        order[cursor..cursor + bs].iter().map(|&p| pairs[p]).collect();
                    cursor += bs;
                    let (xs, local) = local_snapshots(data, &batch);
                    let count = xs.len() / data.d;
                    let (f, r) = dict.evaluate_batch(&xs, count)?;
                    let (x, y) = gather_pairs(&f, m, &local);
                    let cot = trainable_cotangent(&k, &x, &y, &local, count, fixed);
                    net.backward(&r.unwrap(), &cot)?
                }
            };
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::NonFinite {
                    iteration,
                    losses: records.iter().map(|r| r.loss).collect(),
                });
            }
            let net = dict.network_mut().unwrap();
            adam_step(
                &mut net.params,
                &grads,
                &mut adam,
                config.learning_rate,
                &config.adam,
            );
        }
        k_prev = Some(k);
    }

    let (final_loss, selected, params, k) = best.expect("at least one iteration");
    dict.network_mut().unwrap().params = params;
    let model = KoopmanModel::new(dict.clone(), &k)?;
    let report = TrainReport {
        final_loss,
        iterations: records.len(),
        success,
        selected_iteration: selected,
        wall_time_s: start.elapsed().as_secs_f64(),
        parameter_count: dict.network().unwrap().count_parameters(),
        monotone_violations: records.iter().filter(|r| !r.monotone()).count(),
        records,
    };
    Ok((dict, model, report))
}
