//! Trainable dictionary networks: a residual MLP and a neural ODE, both with
//! hand-written reverse-mode gradients (the NODE through the adjoint method).
//!
//! Batches are column-major `features x batch` buffers. Parameters live in one
//! flat vector in declaration order; each weight matrix is stored column-major.

mod adam;
pub(crate) mod kernels;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::odeint::{
    adjoint_backward, dopri54, IntegratorConfig, OdeError, ParametricField, VectorField,
};
use kernels::{add_bias, gemm, row_sums, tanh_backward, tanh_in_place, View};

pub use adam::{adam_step, AdamConfig, AdamState};

/// Samples integrated together by one NODE solve.
pub const NODE_CHUNK: usize = 512;

pub const CHECKPOINT_FORMAT: &str = "edmd-dl-checkpoint/1";

#[derive(Debug, thiserror::Error)]
pub enum NetworkError {
    #[error("invalid network configuration: {0}")]
    Precondition(String),
    #[error("input has dimension {got}, network expects {expected}")]
    InputDim { expected: usize, got: usize },
    #[error("output cotangent has {got} entries, expected {expected}")]
    GradShape { expected: usize, got: usize },
    #[error("forward record does not match the current parameters")]
    StaleRecord,
    #[error("neural ODE integration failed: {0}")]
    Integration(#[from] OdeError),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
}

/// Range of the MLP / NODE affine-map initialisation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScale {
    /// Weights and biases uniform in `[-sqrt(l), sqrt(l)]`.
    Literal,
    /// Weights uniform in `[-1/sqrt(l), 1/sqrt(l)]`, biases in `[-sqrt(l), sqrt(l)]`.
    #[default]
    Inverse,
    /// Weights and biases uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, where
    /// `fan_in` is the input dimension of each affine map.
    FanIn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Architecture {
    /// Input affine map, `hidden_depth - 1` residual tanh blocks, output affine map.
    Mlp {
        input_dim: usize,
        width: usize,
        hidden_depth: usize,
        outputs: usize,
    },
    /// Input affine map, `dh/dt = W3 tanh(W2 tanh(W1 h))` over `time_span`,
    /// output affine map.
    Node {
        input_dim: usize,
        width: usize,
        field_width: usize,
        outputs: usize,
        time_span: [f64; 2],
    },
}

impl Architecture {
    pub fn input_dim(&self) -> usize {
        match *self {
            Architecture::Mlp { input_dim, .. } | Architecture::Node { input_dim, .. } => {
                input_dim
            }
        }
    }

    pub fn outputs(&self) -> usize {
        match *self {
            Architecture::Mlp { outputs, .. } | Architecture::Node { outputs, .. } => outputs,
        }
    }

    pub fn width(&self) -> usize {
        match *self {
            Architecture::Mlp { width, .. } | Architecture::Node { width, .. } => width,
        }
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let bad = |msg: &str| Err(NetworkError::Precondition(msg.to_string()));
        match *self {
            Architecture::Mlp {
                input_dim,
                width,
                hidden_depth,
                outputs,
            } => {
                if input_dim == 0 || width == 0 || hidden_depth == 0 || outputs == 0 {
                    return bad("MLP dimensions, width and depth must all be positive");
                }
            }
            Architecture::Node {
                input_dim,
                width,
                field_width,
                outputs,
                time_span,
            } => {
                if input_dim == 0 || width == 0 || field_width == 0 || outputs == 0 {
                    return bad("NODE dimensions and widths must all be positive");
                }
                if !(time_span[0].is_finite() && time_span[1].is_finite())
                    || time_span[0] >= time_span[1]
                {
                    return bad("NODE time span must satisfy t_s < t_e");
                }
            }
        }
        Ok(())
    }

    /// Parameter blocks in declaration order: `(name, rows, cols)`.
    pub fn layout(&self) -> Vec<(String, usize, usize)> {
        match *self {
            Architecture::Mlp {
                input_dim,
                width,
                hidden_depth,
                outputs,
            } => {
                let mut v = vec![
                    ("input.weight".to_string(), width, input_dim),
                    ("input.bias".to_string(), width, 1),
                ];
                for i in 0..hidden_depth.saturating_sub(1) {
                    v.push((format!("block{i}.weight"), width, width));
                    v.push((format!("block{i}.bias"), width, 1));
                }
                v.push(("output.weight".to_string(), outputs, width));
                v.push(("output.bias".to_string(), outputs, 1));
                v
            }
            Architecture::Node {
                input_dim,
                width,
                field_width,
                outputs,
                ..
            } => vec![
                ("input.weight".to_string(), width, input_dim),
                ("input.bias".to_string(), width, 1),
                ("field.w1".to_string(), field_width, width),
                ("field.w2".to_string(), field_width, field_width),
                ("field.w3".to_string(), width, field_width),
                ("output.weight".to_string(), outputs, width),
                ("output.bias".to_string(), outputs, 1),
            ],
        }
    }

    /// Closed-form count of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        match *self {
            Architecture::Mlp {
                input_dim,
                width,
                hidden_depth,
                outputs,
            } => {
                width * input_dim
                    + width
                    + hidden_depth.saturating_sub(1) * (width * width + width)
                    + outputs * width
                    + outputs
            }
            Architecture::Node {
                input_dim,
                width,
                field_width,
                outputs,
                ..
            } => {
                width * input_dim
                    + width
                    + 2 * width * field_width
                    + field_width * field_width
                    + outputs * width
                    + outputs
            }
        }
    }
}

/// Trainable dictionary network with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DictionaryNetwork {
    pub architecture: Architecture,
    pub params: Vec<f64>,
    pub integrator: IntegratorConfig,
    pub init_scale: InitScale,
    pub seed: u64,
    offsets: Vec<usize>,
}

/// Intermediate values kept by a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardRecord {
    fingerprint: u64,
    batch: usize,
    inputs: Vec<f64>,
    kind: RecordKind,
}

#[derive(Debug, Clone)]
enum RecordKind {
    /// Hidden states entering each block plus the final state, and each
    /// block's tanh activation.
    Mlp {
        hidden: Vec<Vec<f64>>,
        activations: Vec<Vec<f64>>,
    },
    /// Only the terminal NODE state.
    Node { h_end: Vec<f64> },
}

impl ForwardRecord {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

fn fingerprint(params: &[f64]) -> u64 {
    // FNV-1a over the bit patterns
    let mut h: u64 = 0xcbf29ce484222325;
    for p in params {
        for b in p.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

fn uniform_fill(rng: &mut ChaCha8Rng, out: &mut [f64], bound: f64) {
    for v in out.iter_mut() {
        *v = rng.random_range(-bound..=bound);
    }
}

fn affine_bound(width: usize, fan_in: usize, is_bias: bool, scale: InitScale) -> f64 {
    let s = (width as f64).sqrt();
    match scale {
        InitScale::Literal => s,
        InitScale::Inverse if is_bias => s,
        InitScale::Inverse => 1.0 / s,
        InitScale::FanIn => 1.0 / (fan_in as f64).sqrt(),
    }
}

/// Residual MLP with uniform initialisation.
pub fn init_mlp(
    input_dim: usize,
    width: usize,
    hidden_depth: usize,
    outputs: usize,
    seed: u64,
    init_scale: InitScale,
) -> Result<DictionaryNetwork, NetworkError> {
    let arch = Architecture::Mlp {
        input_dim,
        width,
        hidden_depth,
        outputs,
    };
    let mut net = DictionaryNetwork::zeros(arch, seed)?;
    net.init_scale = init_scale;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fan_in = input_dim;
    for (i, (name, _, cols)) in net.architecture.layout().into_iter().enumerate() {
        let is_bias = name.ends_with("bias");
        if !is_bias {
            fan_in = cols;
        }
        let bound = affine_bound(width, fan_in, is_bias, init_scale);
        let range = net.block_range(i);
        uniform_fill(&mut rng, &mut net.params[range], bound);
    }
    Ok(net)
}

/// Neural-ODE dictionary: field weights i.i.d. `N(0, 0.1^2)`, affine maps as in
/// [`init_mlp`] for width `width`.
pub fn init_node(
    input_dim: usize,
    width: usize,
    field_width: usize,
    outputs: usize,
    seed: u64,
    init_scale: InitScale,
) -> Result<DictionaryNetwork, NetworkError> {
    let arch = Architecture::Node {
        input_dim,
        width,
        field_width,
        outputs,
        time_span: [0.0, 1.0],
    };
    let mut net = DictionaryNetwork::zeros(arch, seed)?;
    net.init_scale = init_scale;
    let normal = Normal::new(0.0, 0.1).expect("valid normal");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fan_in = input_dim;
    for (i, (name, _, cols)) in net.architecture.layout().into_iter().enumerate() {
        let range = net.block_range(i);
        if name.starts_with("field") {
            for v in &mut net.params[range] {
                *v = normal.sample(&mut rng);
            }
            continue;
        }
        let is_bias = name.ends_with("bias");
        if !is_bias {
            fan_in = cols;
        }
        let bound = affine_bound(width, fan_in, is_bias, init_scale);
        uniform_fill(&mut rng, &mut net.params[range], bound);
    }
    Ok(net)
}

impl DictionaryNetwork {
    /// Network with every parameter zero.
    pub fn zeros(architecture: Architecture, seed: u64) -> Result<Self, NetworkError> {
        architecture.validate()?;
        let mut offsets = vec![0];
        for (_, r, c) in architecture.layout() {
            offsets.push(offsets.last().unwrap() + r * c);
        }
        let n = *offsets.last().unwrap();
        debug_assert_eq!(n, architecture.parameter_count());
        Ok(Self {
            architecture,
            params: vec![0.0; n],
            integrator: IntegratorConfig::default(),
            init_scale: InitScale::default(),
            seed,
            offsets,
        })
    }

    pub fn count_parameters(&self) -> usize {
        self.params.len()
    }

    pub fn input_dim(&self) -> usize {
        self.architecture.input_dim()
    }

    pub fn outputs(&self) -> usize {
        self.architecture.outputs()
    }

    fn block_range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    fn block(&self, i: usize) -> &[f64] {
        &self.params[self.block_range(i)]
    }

    /// Parameters of the named block.
    pub fn block_by_name(&self, name: &str) -> Option<&[f64]> {
        let idx = self
            .architecture
            .layout()
            .iter()
            .position(|(n, _, _)| n == name)?;
        Some(self.block(idx))
    }

    pub fn block_by_name_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let idx = self
            .architecture
            .layout()
            .iter()
            .position(|(n, _, _)| n == name)?;
        let r = self.block_range(idx);
        Some(&mut self.params[r])
    }

    fn matrix(&self, i: usize) -> View<'_> {
        let (_, r, c) = self.architecture.layout()[i];
        View::col_major(self.block(i), r, c)
    }

    /// Forward pass for one state vector.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardRecord), NetworkError> {
        self.forward_batch(x, 1)
    }

    /// Forward pass for `batch` column-major inputs (`input_dim x batch`).
    /// Returns the `outputs x batch` trainable dictionary values.
    pub fn forward_batch(
        &self,
        inputs: &[f64],
        batch: usize,
    ) -> Result<(Vec<f64>, ForwardRecord), NetworkError> {
        let d = self.input_dim();
        if inputs.len() != d * batch {
            return Err(NetworkError::InputDim {
                expected: d * batch,
                got: inputs.len(),
            });
        }
        let width = self.architecture.width();
        let mut h = vec![0.0; width * batch];
        gemm(1.0, self.matrix(0), View::col_major(inputs, d, batch), 0.0, &mut h);
        add_bias(&mut h, self.block(1));

        let (last, kind, out_idx) = match self.architecture {
            Architecture::Mlp { hidden_depth, .. } => {
                let mut hidden = Vec::with_capacity(hidden_depth);
                let mut activations = Vec::with_capacity(hidden_depth - 1);
                for b in 0..hidden_depth - 1 {
                    let mut z = vec![0.0; width * batch];
                    gemm(
                        1.0,
                        self.matrix(2 + 2 * b),
                        View::col_major(&h, width, batch),
                        0.0,
                        &mut z,
                    );
                    add_bias(&mut z, self.block(3 + 2 * b));
                    tanh_in_place(&mut z);
                    let next: Vec<f64> = h.iter().zip(&z).map(|(a, b)| a + b).collect();
                    hidden.push(std::mem::replace(&mut h, next));
                    activations.push(z);
                }
                hidden.push(h.clone());
                (
                    h,
                    RecordKind::Mlp {
                        hidden,
                        activations,
                    },
                    2 * hidden_depth,
                )
            }
            Architecture::Node { time_span, .. } => {
                let h_end = self.integrate_node(&h, batch, time_span)?;
                (
                    h_end.clone(),
                    RecordKind::Node { h_end },
                    5,
                )
            }
        };
        let m = self.outputs();
        let mut out = vec![0.0; m * batch];
        gemm(
            1.0,
            self.matrix(out_idx),
            View::col_major(&last, width, batch),
            0.0,
            &mut out,
        );
        add_bias(&mut out, self.block(out_idx + 1));
        let record = ForwardRecord {
            fingerprint: fingerprint(&self.params),
            batch,
            inputs: inputs.to_vec(),
            kind,
        };
        Ok((out, record))
    }

    fn node_field(&self, batch: usize) -> NodeField<'_> {
        let Architecture::Node {
            width, field_width, ..
        } = self.architecture
        else {
            unreachable!("node_field on an MLP")
        };
        let start = self.offsets[2];
        let end = self.offsets[5];
        NodeField::new(&self.params[start..end], width, field_width, batch)
    }

    fn integrate_node(
        &self,
        h0: &[f64],
        batch: usize,
        span: [f64; 2],
    ) -> Result<Vec<f64>, NetworkError> {
        let width = self.architecture.width();
        let chunks: Vec<Result<Vec<f64>, OdeError>> = h0
            .par_chunks(width * NODE_CHUNK)
            .map(|chunk| {
                let field = self.node_field(chunk.len() / width);
                dopri54(&field, chunk, span[0], span[1], &self.integrator)
            })
            .collect();
        let mut out = Vec::with_capacity(width * batch);
        for c in chunks {
            out.extend(c?);
        }
        Ok(out)
    }

    /// Gradient of a scalar loss with respect to all parameters, given the
    /// loss cotangent on the outputs (`outputs x batch`, column-major).
    pub fn backward(
        &self,
        record: &ForwardRecord,
        grad_outputs: &[f64],
    ) -> Result<Vec<f64>, NetworkError> {
        if record.fingerprint != fingerprint(&self.params)
            || record.inputs.len() != self.input_dim() * record.batch
        {
            return Err(NetworkError::StaleRecord);
        }
        let batch = record.batch;
        let m = self.outputs();
        if grad_outputs.len() != m * batch {
            return Err(NetworkError::GradShape {
                expected: m * batch,
                got: grad_outputs.len(),
            });
        }
        let width = self.architecture.width();
        let d = self.input_dim();
        let mut grads = vec![0.0; self.params.len()];
        let g_out = View::col_major(grad_outputs, m, batch);

        let (last, out_idx): (&[f64], usize) = match (&record.kind, &self.architecture) {
            (RecordKind::Mlp { hidden, .. }, Architecture::Mlp { hidden_depth, .. }) => {
                (hidden.last().unwrap(), 2 * hidden_depth)
            }
            (RecordKind::Node { h_end }, Architecture::Node { .. }) => (h_end, 5),
            _ => return Err(NetworkError::StaleRecord),
        };
        {
            let r = self.block_range(out_idx);
            gemm(
                1.0,
                g_out,
                View::col_major(last, width, batch).t(),
                0.0,
                &mut grads[r],
            );
            let r = self.block_range(out_idx + 1);
            row_sums(grad_outputs, &mut grads[r]);
        }
        let mut gh = vec![0.0; width * batch];
        gemm(1.0, self.matrix(out_idx).t(), g_out, 0.0, &mut gh);

        match &record.kind {
            RecordKind::Mlp {
                hidden,
                activations,
            } => {
                for b in (0..activations.len()).rev() {
                    let mut gz = gh.clone();
                    tanh_backward(&mut gz, &activations[b]);
                    let gzv = View::col_major(&gz, width, batch);
                    let r = self.block_range(2 + 2 * b);
                    gemm(
                        1.0,
                        gzv,
                        View::col_major(&hidden[b], width, batch).t(),
                        0.0,
                        &mut grads[r],
                    );
                    let r = self.block_range(3 + 2 * b);
                    row_sums(&gz, &mut grads[r]);
                    gemm(1.0, self.matrix(2 + 2 * b).t(), gzv, 1.0, &mut gh);
                }
            }
            RecordKind::Node { h_end } => {
                let Architecture::Node { time_span, .. } = self.architecture else {
                    unreachable!()
                };
                let field_range = self.offsets[2]..self.offsets[5];
                let pieces: Vec<Result<(Vec<f64>, Vec<f64>), OdeError>> = h_end
                    .par_chunks(width * NODE_CHUNK)
                    .zip(gh.par_chunks(width * NODE_CHUNK))
                    .map(|(hc, gc)| {
                        let field = self.node_field(hc.len() / width);
                        adjoint_backward(
                            &field,
                            hc,
                            gc,
                            time_span[0],
                            time_span[1],
                            &self.integrator,
                        )
                        .map(|g| (g.params, g.h_start))
                    })
                    .collect();
                let mut start_grad = Vec::with_capacity(gh.len());
                for p in pieces {
                    let (gp, gs) = p?;
                    for (acc, v) in grads[field_range.clone()].iter_mut().zip(&gp) {
                        *acc += v;
                    }
                    start_grad.extend(gs);
                }
                gh = start_grad;
            }
        }
        let r = self.block_range(0);
        gemm(
            1.0,
            View::col_major(&gh, width, batch),
            View::col_major(&record.inputs, d, batch).t(),
            0.0,
            &mut grads[r],
        );
        let r = self.block_range(1);
        row_sums(&gh, &mut grads[r]);
        Ok(grads)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let params = self
            .architecture
            .layout()
            .into_iter()
            .enumerate()
            .map(|(i, (name, rows, cols))| NamedArray {
                name,
                rows,
                cols,
                values: self.block(i).to_vec(),
            })
            .collect();
        Checkpoint {
            format_version: CHECKPOINT_FORMAT.to_string(),
            architecture: self.architecture.clone(),
            init_scale: self.init_scale,
            seed: self.seed,
            integrator: self.integrator,
            parameter_count: self.params.len(),
            storage_order: "column-major".to_string(),
            params,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, NetworkError> {
        if ck.format_version != CHECKPOINT_FORMAT {
            return Err(NetworkError::Checkpoint(format!(
                "unsupported format version {:?}",
                ck.format_version
            )));
        }
        let mut net = Self::zeros(ck.architecture.clone(), ck.seed)?;
        net.integrator = ck.integrator;
        net.init_scale = ck.init_scale;
        let layout = net.architecture.layout();
        if layout.len() != ck.params.len() {
            return Err(NetworkError::Checkpoint(format!(
                "expected {} parameter arrays, found {}",
                layout.len(),
                ck.params.len()
            )));
        }
        for (i, ((name, rows, cols), arr)) in layout.iter().zip(&ck.params).enumerate() {
            if &arr.name != name || arr.rows != *rows || arr.cols != *cols {
                return Err(NetworkError::Checkpoint(format!(
                    "array {i} is {}[{}x{}], expected {name}[{rows}x{cols}]",
                    arr.name, arr.rows, arr.cols
                )));
            }
            if arr.values.len() != rows * cols || arr.values.iter().any(|v| !v.is_finite()) {
                return Err(NetworkError::Checkpoint(format!(
                    "array {name} has bad length or non-finite values"
                )));
            }
            let r = net.block_range(i);
            net.params[r].copy_from_slice(&arr.values);
        }
        Ok(net)
    }
}

/// Serialized network: architecture, integrator settings and named parameter arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: String,
    pub architecture: Architecture,
    pub init_scale: InitScale,
    pub seed: u64,
    pub integrator: IntegratorConfig,
    pub parameter_count: usize,
    pub storage_order: String,
    pub params: Vec<NamedArray>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

struct NodeScratch {
    a1: Vec<f64>,
    a2: Vec<f64>,
    g1: Vec<f64>,
    g2: Vec<f64>,
}

/// `dh/dt = W3 tanh(W2 tanh(W1 h))` applied column-wise to a batch.
struct NodeField<'a> {
    w1: View<'a>,
    w2: View<'a>,
    w3: View<'a>,
    width: usize,
    inner: usize,
    batch: usize,
    scratch: std::cell::RefCell<NodeScratch>,
}

impl<'a> NodeField<'a> {
    fn new(weights: &'a [f64], width: usize, inner: usize, batch: usize) -> Self {
        let (w1, rest) = weights.split_at(inner * width);
        let (w2, w3) = rest.split_at(inner * inner);
        let n = inner * batch;
        Self {
            w1: View::col_major(w1, inner, width),
            w2: View::col_major(w2, inner, inner),
            w3: View::col_major(w3, width, inner),
            width,
            inner,
            batch,
            scratch: std::cell::RefCell::new(NodeScratch {
                a1: vec![0.0; n],
                a2: vec![0.0; n],
                g1: vec![0.0; n],
                g2: vec![0.0; n],
            }),
        }
    }

    fn hidden(&self, h: &[f64], s: &mut NodeScratch) {
        gemm(
            1.0,
            self.w1,
            View::col_major(h, self.width, self.batch),
            0.0,
            &mut s.a1,
        );
        tanh_in_place(&mut s.a1);
        gemm(
            1.0,
            self.w2,
            View::col_major(&s.a1, self.inner, self.batch),
            0.0,
            &mut s.a2,
        );
        tanh_in_place(&mut s.a2);
    }

    fn grads(
        &self,
        h: &[f64],
        a: &[f64],
        s: &mut NodeScratch,
        grad_h: &mut [f64],
        grad_theta: &mut [f64],
    ) {
        let (l, k, b) = (self.width, self.inner, self.batch);
        let av = View::col_major(a, l, b);
        let (gw1, rest) = grad_theta.split_at_mut(k * l);
        let (gw2, gw3) = rest.split_at_mut(k * k);
        gemm(1.0, self.w3.t(), av, 0.0, &mut s.g2);
        gemm(1.0, av, View::col_major(&s.a2, k, b).t(), 0.0, gw3);
        tanh_backward(&mut s.g2, &s.a2);
        let g2v = View::col_major(&s.g2, k, b);
        gemm(1.0, g2v, View::col_major(&s.a1, k, b).t(), 0.0, gw2);
        gemm(1.0, self.w2.t(), g2v, 0.0, &mut s.g1);
        tanh_backward(&mut s.g1, &s.a1);
        let g1v = View::col_major(&s.g1, k, b);
        gemm(1.0, g1v, View::col_major(h, l, b).t(), 0.0, gw1);
        gemm(1.0, self.w1.t(), g1v, 0.0, grad_h);
    }
}

impl VectorField for NodeField<'_> {
    fn dim(&self) -> usize {
        self.width * self.batch
    }

    fn eval(&self, _t: f64, y: &[f64], dy: &mut [f64]) {
        let mut s = self.scratch.borrow_mut();
        self.hidden(y, &mut s);
        gemm(
            1.0,
            self.w3,
            View::col_major(&s.a2, self.inner, self.batch),
            0.0,
            dy,
        );
    }
}

impl ParametricField for NodeField<'_> {
    fn param_dim(&self) -> usize {
        2 * self.width * self.inner + self.inner * self.inner
    }

    fn vjp(&self, _t: f64, h: &[f64], a: &[f64], grad_h: &mut [f64], grad_theta: &mut [f64]) {
        let mut s = self.scratch.borrow_mut();
        self.hidden(h, &mut s);
        self.grads(h, a, &mut s, grad_h, grad_theta);
    }

    fn eval_and_vjp(
        &self,
        _t: f64,
        h: &[f64],
        a: &[f64],
        dh: &mut [f64],
        grad_h: &mut [f64],
        grad_theta: &mut [f64],
    ) {
        let mut s = self.scratch.borrow_mut();
        self.hidden(h, &mut s);
        gemm(
            1.0,
            self.w3,
            View::col_major(&s.a2, self.inner, self.batch),
            0.0,
            dh,
        );
        self.grads(h, a, &mut s, grad_h, grad_theta);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mlp_parameter_counts() {
        let net = init_mlp(2, 170, 3, 22, 0, InitScale::Inverse).unwrap();
        assert_eq!(net.count_parameters(), 62_412);
        assert_eq!(510 + 2 * 29_070 + 3_762, 62_412);
        let tiny = init_mlp(1, 1, 1, 1, 0, InitScale::Inverse).unwrap();
        assert_eq!(tiny.count_parameters(), 4);
    }

    #[test]
    fn node_field_weight_count() {
        let net = init_node(2, 120, 68, 22, 0, InitScale::Inverse).unwrap();
        let field: usize = ["field.w1", "field.w2", "field.w3"]
            .iter()
            .map(|n| net.block_by_name(n).unwrap().len())
            .sum();
        assert_eq!(field, 120 * 68 + 68 * 68 + 68 * 120);
        assert_eq!(field, 20_944);
    }

    #[test]
    fn zero_sizes_rejected() {
        assert!(init_node(2, 4, 0, 3, 0, InitScale::Inverse).is_err());
        assert!(init_mlp(2, 0, 3, 3, 0, InitScale::Inverse).is_err());
        assert!(init_mlp(2, 4, 0, 3, 0, InitScale::Inverse).is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_mlp(3, 7, 2, 4, 11, InitScale::Inverse).unwrap();
        let b = init_mlp(3, 7, 2, 4, 11, InitScale::Inverse).unwrap();
        assert_eq!(a.params, b.params);
        let c = init_node(3, 7, 5, 4, 11, InitScale::Inverse).unwrap();
        let d = init_node(3, 7, 5, 4, 11, InitScale::Inverse).unwrap();
        assert_eq!(c.params, d.params);
        let e = init_node(3, 7, 5, 4, 12, InitScale::Inverse).unwrap();
        assert_ne!(c.params, e.params);
    }

    #[test]
    fn init_ranges() {
        let net = init_mlp(2, 16, 3, 4, 5, InitScale::Inverse).unwrap();
        let w = net.block_by_name("block0.weight").unwrap();
        assert!(w.iter().all(|v| v.abs() <= 0.25));
        let b = net.block_by_name("block0.bias").unwrap();
        assert!(b.iter().all(|v| v.abs() <= 4.0));
        assert!(b.iter().any(|v| v.abs() > 0.25));
        let lit = init_mlp(2, 16, 3, 4, 5, InitScale::Literal).unwrap();
        let w = lit.block_by_name("block0.weight").unwrap();
        assert!(w.iter().all(|v| v.abs() <= 4.0) && w.iter().any(|v| v.abs() > 0.25));

        let fan = init_mlp(2, 16, 3, 4, 5, InitScale::FanIn).unwrap();
        let bound = 1.0 / 2f64.sqrt();
        let w = fan.block_by_name("input.weight").unwrap();
        assert!(w.iter().all(|v| v.abs() <= bound) && w.iter().any(|v| v.abs() > 0.25));
        let b = fan.block_by_name("input.bias").unwrap();
        assert!(b.iter().all(|v| v.abs() <= bound) && b.iter().any(|v| v.abs() > 0.25));
        let b = fan.block_by_name("block0.bias").unwrap();
        assert!(b.iter().all(|v| v.abs() <= 0.25));
    }

    #[test]
    fn node_field_weights_distribution() {
        let net = init_node(2, 8, 200, 3, 9, InitScale::Inverse).unwrap();
        let w2 = net.block_by_name("field.w2").unwrap();
        let n = w2.len() as f64;
        let mean = w2.iter().sum::<f64>() / n;
        let var = w2.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((0.09..=0.11).contains(&var.sqrt()), "std {}", var.sqrt());
    }

    #[test]
    fn zero_mlp_outputs_zero() {
        let net = DictionaryNetwork::zeros(
            Architecture::Mlp {
                input_dim: 2,
                width: 5,
                hidden_depth: 3,
                outputs: 4,
            },
            0,
        )
        .unwrap();
        let (out, _) = net.forward(&[3.0, -1.0]).unwrap();
        assert_eq!(out, vec![0.0; 4]);
    }

    #[test]
    fn zero_field_node_is_affine_composition() {
        let mut net = init_node(2, 6, 4, 3, 1, InitScale::Inverse).unwrap();
        for name in ["field.w1", "field.w2", "field.w3"] {
            net.block_by_name_mut(name).unwrap().fill(0.0);
        }
        let x = [0.4, -1.3];
        let (out, _) = net.forward(&x).unwrap();
        let w_in = net.block_by_name("input.weight").unwrap();
        let b_in = net.block_by_name("input.bias").unwrap();
        let w_out = net.block_by_name("output.weight").unwrap();
        let b_out = net.block_by_name("output.bias").unwrap();
        let h: Vec<f64> = (0..6)
            .map(|i| w_in[i] * x[0] + w_in[6 + i] * x[1] + b_in[i])
            .collect();
        for j in 0..3 {
            let want: f64 = b_out[j] + (0..6).map(|i| w_out[j + 3 * i] * h[i]).sum::<f64>();
            assert!((out[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn scalar_residual_block() {
        let mut net = DictionaryNetwork::zeros(
            Architecture::Mlp {
                input_dim: 1,
                width: 1,
                hidden_depth: 2,
                outputs: 1,
            },
            0,
        )
        .unwrap();
        net.block_by_name_mut("input.weight").unwrap()[0] = 1.0;
        net.block_by_name_mut("block0.weight").unwrap()[0] = 1.0;
        net.block_by_name_mut("output.weight").unwrap()[0] = 1.0;
        let (out, _) = net.forward(&[0.5]).unwrap();
        let want = 0.5 + 0.5f64.tanh();
        assert!((out[0] - want).abs() < 1e-15);
        assert!((out[0] - 0.9621171573).abs() < 1e-9);
    }

    #[test]
    fn residual_identity_when_blocks_zeroed() {
        let mut net = init_mlp(3, 6, 3, 2, 4, InitScale::Inverse).unwrap();
        for b in 0..2 {
            net.block_by_name_mut(&format!("block{b}.weight"))
                .unwrap()
                .fill(0.0);
            net.block_by_name_mut(&format!("block{b}.bias"))
                .unwrap()
                .fill(0.0);
        }
        let mut shallow = DictionaryNetwork::zeros(
            Architecture::Mlp {
                input_dim: 3,
                width: 6,
                hidden_depth: 1,
                outputs: 2,
            },
            0,
        )
        .unwrap();
        for name in ["input.weight", "input.bias", "output.weight", "output.bias"] {
            shallow
                .block_by_name_mut(name)
                .unwrap()
                .copy_from_slice(net.block_by_name(name).unwrap());
        }
        let x = [0.1, 0.7, -0.3];
        assert_eq!(net.forward(&x).unwrap().0, shallow.forward(&x).unwrap().0);
    }

    #[test]
    fn zero_cotangent_gives_zero_gradient() {
        let net = init_mlp(2, 5, 3, 3, 2, InitScale::Inverse).unwrap();
        let (_, rec) = net.forward(&[0.2, 0.3]).unwrap();
        assert!(net.backward(&rec, &[0.0; 3]).unwrap().iter().all(|&g| g == 0.0));
        let node = init_node(2, 5, 3, 3, 2, InitScale::Inverse).unwrap();
        let (_, rec) = node.forward(&[0.2, 0.3]).unwrap();
        assert!(node.backward(&rec, &[0.0; 3]).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn single_affine_gradient() {
        // depth 1: y = W_out (W_in x + b_in) + b_out with W_in = I
        let mut net = DictionaryNetwork::zeros(
            Architecture::Mlp {
                input_dim: 2,
                width: 2,
                hidden_depth: 1,
                outputs: 2,
            },
            0,
        )
        .unwrap();
        net.block_by_name_mut("input.weight")
            .unwrap()
            .copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        let x = [0.6, -2.0];
        let (_, rec) = net.forward(&x).unwrap();
        let g = net.backward(&rec, &[1.0, 0.0]).unwrap();
        let off: usize = 4 + 2;
        // d y1 / d W_out[0, j] = h_j = x_j (column-major: entries 0 and 2)
        assert_eq!(g[off], x[0]);
        assert_eq!(g[off + 2], x[1]);
        assert_eq!(g[off + 1], 0.0);
        assert_eq!(g[off + 4], 1.0);
        assert_eq!(g[off + 5], 0.0);
    }

    #[test]
    fn stale_record_rejected() {
        let mut net = init_mlp(2, 4, 2, 2, 0, InitScale::Inverse).unwrap();
        let (_, rec) = net.forward(&[1.0, 2.0]).unwrap();
        net.params[0] += 1e-3;
        assert!(matches!(
            net.backward(&rec, &[1.0, 1.0]),
            Err(NetworkError::StaleRecord)
        ));
        let other = init_node(2, 4, 2, 2, 0, InitScale::Inverse).unwrap();
        assert!(other.backward(&rec, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn wrong_input_dim() {
        let net = init_mlp(2, 4, 2, 2, 0, InitScale::Inverse).unwrap();
        assert!(matches!(
            net.forward(&[1.0]),
            Err(NetworkError::InputDim { .. })
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut net = init_node(2, 5, 3, 4, 8, InitScale::Inverse).unwrap();
        net.integrator.abs_tol = 1e-10;
        let ck = net.to_checkpoint();
        let json = serde_json::to_string(&ck).unwrap();
        let back: Checkpoint = serde_json::from_str(&json).unwrap();
        assert_eq!(DictionaryNetwork::from_checkpoint(&back).unwrap(), net);
        let mut broken = ck.clone();
        broken.params[2].values.pop();
        assert!(DictionaryNetwork::from_checkpoint(&broken).is_err());
    }
}
