//! Extended DMD: dictionary evaluation, Gram matrices, the Koopman matrix and
//! its spectral decomposition into eigenvalues, eigenfunctions and modes.
//!
//! Dictionary values are row vectors: `Psi(x_{n+1}) ~ Psi(x_n) K`. A right
//! eigenvector `zeta_k` of `K` gives the eigenfunction `phi_k = Psi zeta_k`.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetError, TimeSeriesDataset};
use crate::networks::kernels::{gemm, View};
use crate::networks::{Checkpoint, DictionaryNetwork, ForwardRecord, NetworkError};
use crate::numerics::{
    eig_nonsymmetric, pseudo_inverse, ComplexVector, DenseMatrix, NumericsError, DEFAULT_CUTOFF,
};

/// Largest tolerated `|Im x| / |Re x|` in a reconstructed real state.
pub const IMAGINARY_RESIDUE_TOL: f64 = 1e-6;

pub const MODEL_FORMAT: &str = "edmd-dl-model/1";

#[derive(Debug, thiserror::Error)]
pub enum EdmdError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("state has dimension {got}, dictionary expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("{0}")]
    Precondition(String),
    #[error("prediction at step {step} has imaginary residue {ratio:.3e} relative to its real part")]
    ImaginaryResidue { step: usize, ratio: f64 },
}

/// `[1, x_1..x_d, network(x)]`, with the constant and projection blocks optional
/// so that classical DMD dictionaries can be expressed.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    state_dim: usize,
    constant: bool,
    projections: bool,
    network: Option<DictionaryNetwork>,
}

impl Dictionary {
    /// Constant, projections and the trainable network.
    pub fn new(network: DictionaryNetwork) -> Self {
        Self {
            state_dim: network.input_dim(),
            constant: true,
            projections: true,
            network: Some(network),
        }
    }

    /// Constant and projections only.
    pub fn fixed(state_dim: usize) -> Self {
        Self {
            state_dim,
            constant: true,
            projections: true,
            network: None,
        }
    }

    pub fn custom(
        state_dim: usize,
        constant: bool,
        projections: bool,
        network: Option<DictionaryNetwork>,
    ) -> Result<Self, EdmdError> {
        if state_dim == 0 {
            return Err(EdmdError::Precondition("state dimension must be positive".into()));
        }
        if let Some(net) = &network {
            if net.input_dim() != state_dim {
                return Err(EdmdError::Dimension {
                    expected: state_dim,
                    got: net.input_dim(),
                });
            }
        }
        let d = Self {
            state_dim,
            constant,
            projections,
            network,
        };
        if d.size() == 0 {
            return Err(EdmdError::Precondition("dictionary has no elements".into()));
        }
        Ok(d)
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    /// Total dictionary size `M`.
    pub fn size(&self) -> usize {
        self.fixed_size() + self.network.as_ref().map_or(0, |n| n.outputs())
    }

    /// Number of non-trainable elements.
    pub fn fixed_size(&self) -> usize {
        self.constant as usize + if self.projections { self.state_dim } else { 0 }
    }

    pub fn has_constant(&self) -> bool {
        self.constant
    }

    pub fn has_projections(&self) -> bool {
        self.projections
    }

    pub fn network(&self) -> Option<&DictionaryNetwork> {
        self.network.as_ref()
    }

    pub fn network_mut(&mut self) -> Option<&mut DictionaryNetwork> {
        self.network.as_mut()
    }

    /// Column-major `M x n` dictionary values for `n` snapshot-major states,
    /// plus the network's forward record when there is a network.
    pub fn evaluate_batch(
        &self,
        xs: &[f64],
        n: usize,
    ) -> Result<(Vec<f64>, Option<ForwardRecord>), EdmdError> {
        let d = self.state_dim;
        if xs.len() != d * n {
            return Err(EdmdError::Dimension {
                expected: d * n,
                got: xs.len(),
            });
        }
        let m = self.size();
        let fixed = self.fixed_size();
        let mut out = vec![0.0; m * n];
        let (net_out, record) = match &self.network {
            Some(net) => {
                let (o, r) = net.forward_batch(xs, n)?;
                (Some(o), Some(r))
            }
            None => (None, None),
        };
        for s in 0..n {
            let col = &mut out[s * m..(s + 1) * m];
            let mut r = 0;
            if self.constant {
                col[0] = 1.0;
                r = 1;
            }
            if self.projections {
                col[r..r + d].copy_from_slice(&xs[s * d..(s + 1) * d]);
            }
            if let Some(o) = &net_out {
                let k = m - fixed;
                col[fixed..].copy_from_slice(&o[s * k..(s + 1) * k]);
            }
        }
        Ok((out, record))
    }

    /// Identity-observable `B` (`M x d`): the identity block on the projection rows.
    pub fn identity_observable(&self) -> Result<DenseMatrix, EdmdError> {
        if !self.projections {
            return Err(EdmdError::Precondition(
                "identity observable needs the projection elements".into(),
            ));
        }
        let off = self.constant as usize;
        let mut b = DenseMatrix::zeros(self.size(), self.state_dim);
        for i in 0..self.state_dim {
            b[(off + i, i)] = 1.0;
        }
        Ok(b)
    }

    pub fn to_spec(&self) -> DictionarySpec {
        DictionarySpec {
            state_dim: self.state_dim,
            constant: self.constant,
            projections: self.projections,
            network: self.network.as_ref().map(|n| n.to_checkpoint()),
        }
    }

    pub fn from_spec(spec: &DictionarySpec) -> Result<Self, EdmdError> {
        let network = match &spec.network {
            Some(ck) => Some(DictionaryNetwork::from_checkpoint(ck)?),
            None => None,
        };
        Self::custom(spec.state_dim, spec.constant, spec.projections, network)
    }
}

/// Serialized dictionary layout plus the network checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DictionarySpec {
    pub state_dim: usize,
    pub constant: bool,
    pub projections: bool,
    pub network: Option<Checkpoint>,
}

/// `Psi(x)` as a row of length `M`.
pub fn evaluate_dictionary(dict: &Dictionary, x: &[f64]) -> Result<Vec<f64>, EdmdError> {
    if x.len() != dict.state_dim() {
        return Err(EdmdError::Dimension {
            expected: dict.state_dim(),
            got: x.len(),
        });
    }
    Ok(dict.evaluate_batch(x, 1)?.0)
}

/// Splits column-major `M x S` snapshot features into the `M x N` blocks of
/// pair sources and targets.
pub(crate) fn gather_pairs(
    features: &[f64],
    m: usize,
    pairs: &[(usize, usize)],
) -> (Vec<f64>, Vec<f64>) {
    let mut x = Vec::with_capacity(m * pairs.len());
    let mut y = Vec::with_capacity(m * pairs.len());
    for &(i, j) in pairs {
        x.extend_from_slice(&features[i * m..(i + 1) * m]);
        y.extend_from_slice(&features[j * m..(j + 1) * m]);
    }
    (x, y)
}

/// `G = X X^T / N` and `A = X Y^T / N` for column-major `M x N` blocks.
pub(crate) fn gram_from_blocks(x: &[f64], y: &[f64], m: usize) -> (DenseMatrix, DenseMatrix) {
    let n = x.len() / m;
    let scale = 1.0 / n as f64;
    let xv = View::col_major(x, m, n);
    let mut g = vec![0.0; m * m];
    let mut a = vec![0.0; m * m];
    gemm(scale, xv, xv.t(), 0.0, &mut g);
    gemm(scale, xv, View::col_major(y, m, n).t(), 0.0, &mut a);
    let g = DMatrix::from_column_slice(m, m, &g);
    let g = (&g + g.transpose()) * 0.5;
    (g, DMatrix::from_column_slice(m, m, &a))
}

/// Averaged outer products over every transition pair of the dataset.
pub fn compute_gram(
    dict: &Dictionary,
    data: &TimeSeriesDataset,
) -> Result<(DenseMatrix, DenseMatrix), EdmdError> {
    if data.d != dict.state_dim() {
        return Err(EdmdError::Dimension {
            expected: dict.state_dim(),
            got: data.d,
        });
    }
    let pairs = data.pair_indices();
    if pairs.is_empty() {
        return Err(DatasetError::Empty.into());
    }
    let m = dict.size();
    let (features, _) = dict.evaluate_batch(&data.snapshots, data.n_snapshots())?;
    let (x, y) = gather_pairs(&features, m, &pairs);
    Ok(gram_from_blocks(&x, &y, m))
}

/// `K = (G + lambda I)^+ A`.
pub fn compute_k(g: &DenseMatrix, a: &DenseMatrix, lambda: f64) -> Result<DenseMatrix, EdmdError> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(EdmdError::Precondition(format!(
            "lambda must be finite and >= 0, got {lambda}"
        )));
    }
    if !g.is_square() || g.shape() != a.shape() {
        return Err(NumericsError::Shape(format!(
            "G is {:?} and A is {:?}",
            g.shape(),
            a.shape()
        ))
        .into());
    }
    let mut reg = g.clone();
    for i in 0..reg.nrows() {
        reg[(i, i)] += lambda;
    }
    Ok(pseudo_inverse(&reg, DEFAULT_CUTOFF)? * a)
}

/// Eigentriples of `K` and the modes of the observable `B`.
#[derive(Debug, Clone, PartialEq)]
pub struct KoopmanDecomposition {
    pub k: DenseMatrix,
    pub b: DenseMatrix,
    pub eigenvalues: Vec<Complex64>,
    /// `zeta_k`, unit norm.
    pub right: Vec<ComplexVector>,
    /// `xi_k`, scaled so that `xi_j^H zeta_k = delta_jk`.
    pub left: Vec<ComplexVector>,
    /// `m_k = (xi_k^H B)^T`, each of length `d`.
    pub modes: Vec<ComplexVector>,
}

pub fn decompose(k: &DenseMatrix, b: &DenseMatrix) -> Result<KoopmanDecomposition, EdmdError> {
    if b.nrows() != k.nrows() {
        return Err(NumericsError::Shape(format!(
            "B has {} rows, K is {}x{}",
            b.nrows(),
            k.nrows(),
            k.ncols()
        ))
        .into());
    }
    let pairs = eig_nonsymmetric(k)?;
    let bc = b.map(|v| Complex64::new(v, 0.0));
    let mut out = KoopmanDecomposition {
        k: k.clone(),
        b: b.clone(),
        eigenvalues: Vec::with_capacity(pairs.len()),
        right: Vec::with_capacity(pairs.len()),
        left: Vec::with_capacity(pairs.len()),
        modes: Vec::with_capacity(pairs.len()),
    };
    for p in pairs {
        out.modes.push((p.left.adjoint() * &bc).transpose());
        out.eigenvalues.push(p.value);
        out.right.push(p.right);
        out.left.push(p.left);
    }
    Ok(out)
}

/// A decomposed Koopman approximation bound to its dictionary.
#[derive(Debug, Clone, PartialEq)]
pub struct KoopmanModel {
    pub dictionary: Dictionary,
    pub spectral: KoopmanDecomposition,
}

impl KoopmanModel {
    /// Decomposes `k` with the identity observable of `dictionary`.
    pub fn new(dictionary: Dictionary, k: &DenseMatrix) -> Result<Self, EdmdError> {
        let b = dictionary.identity_observable()?;
        Self::with_observable(dictionary, k, &b)
    }

    pub fn with_observable(
        dictionary: Dictionary,
        k: &DenseMatrix,
        b: &DenseMatrix,
    ) -> Result<Self, EdmdError> {
        if k.nrows() != dictionary.size() {
            return Err(EdmdError::Dimension {
                expected: dictionary.size(),
                got: k.nrows(),
            });
        }
        Ok(Self {
            spectral: decompose(k, b)?,
            dictionary,
        })
    }

    pub fn size(&self) -> usize {
        self.dictionary.size()
    }

    pub fn eigenvalues(&self) -> &[Complex64] {
        &self.spectral.eigenvalues
    }

    /// `phi_k(x_i)` for `n` states, as an `n x M` matrix.
    pub fn eigenfunctions_batch(&self, xs: &[f64], n: usize) -> Result<DMatrix<Complex64>, EdmdError> {
        let m = self.size();
        let (psi, _) = self.dictionary.evaluate_batch(xs, n)?;
        // psi is M x n column-major, i.e. Psi^T row-major
        let psi = DMatrix::from_column_slice(m, n, &psi).transpose();
        let psi = psi.map(|v| Complex64::new(v, 0.0));
        let mut z = DMatrix::<Complex64>::zeros(m, m);
        for (k, zeta) in self.spectral.right.iter().enumerate() {
            z.set_column(k, zeta);
        }
        Ok(psi * z)
    }

    /// Scales `zeta_j` by `c` (and `xi_j`, `m_j` by `1/c`), which keeps the
    /// biorthogonality and the reconstruction unchanged.
    pub fn rescale_eigenfunction(&mut self, j: usize, c: f64) {
        let s = &mut self.spectral;
        s.right[j] *= Complex64::new(c, 0.0);
        s.left[j] /= Complex64::new(c, 0.0);
        s.modes[j] /= Complex64::new(c, 0.0);
    }

    /// Predicted trajectories `x~_0..x~_{n_steps}` for `count` initial states.
    /// Returns one flat snapshot-major trajectory per initial state.
    pub fn predict_many(
        &self,
        x0s: &[f64],
        count: usize,
        n_steps: usize,
    ) -> Result<Vec<Vec<f64>>, EdmdError> {
        let d = self.dictionary.state_dim();
        let m = self.size();
        if self.spectral.b.ncols() != d {
            return Err(EdmdError::Precondition(
                "prediction needs an identity observable".into(),
            ));
        }
        let phi = self.eigenfunctions_batch(x0s, count)?;
        let mu = &self.spectral.eigenvalues;
        let mut out = Vec::with_capacity(count);
        let mut acc = vec![Complex64::new(0.0, 0.0); d];
        let mut terms = vec![0.0f64; d];
        for s in 0..count {
            let mut traj = Vec::with_capacity((n_steps + 1) * d);
            let mut powers: Vec<Complex64> = (0..m).map(|k| phi[(s, k)]).collect();
            for step in 0..=n_steps {
                acc.fill(Complex64::new(0.0, 0.0));
                // magnitude of the terms being summed: the scale cancellation roundoff lives at
                terms.fill(0.0);
                for k in 0..m {
                    let c = powers[k];
                    for ((a, t), mode) in acc.iter_mut().zip(terms.iter_mut()).zip(self.spectral.modes[k].iter()) {
                        let v = c * mode;
                        *a += v;
                        *t += v.norm();
                    }
                    powers[k] = c * mu[k];
                }
                let scale = terms.iter().fold(0.0f64, |x, &v| x.max(v));
                let im_norm = acc.iter().fold(0.0f64, |x, v| x.max(v.im.abs()));
                if im_norm > IMAGINARY_RESIDUE_TOL * scale && im_norm > f64::MIN_POSITIVE {
                    return Err(EdmdError::ImaginaryResidue {
                        step,
                        ratio: if scale > 0.0 { im_norm / scale } else { f64::INFINITY },
                    });
                }
                traj.extend(acc.iter().map(|v| v.re));
            }
            out.push(traj);
        }
        Ok(out)
    }

    pub fn to_export(&self) -> ModelExport {
        let s = &self.spectral;
        let rows = |m: &DenseMatrix| -> Vec<Vec<f64>> {
            (0..m.nrows())
                .map(|i| m.row(i).iter().copied().collect())
                .collect()
        };
        let cvec = |v: &ComplexVector| -> Vec<[f64; 2]> { v.iter().map(|c| [c.re, c.im]).collect() };
        ModelExport {
            format_version: MODEL_FORMAT.to_string(),
            state_dim: self.dictionary.state_dim(),
            dictionary_size: self.size(),
            dictionary: self.dictionary.to_spec(),
            k: rows(&s.k),
            b: rows(&s.b),
            eigenvalues: s.eigenvalues.iter().map(|c| [c.re, c.im]).collect(),
            right_eigenvectors: s.right.iter().map(cvec).collect(),
            left_eigenvectors: s.left.iter().map(cvec).collect(),
            modes: s.modes.iter().map(cvec).collect(),
        }
    }

    pub fn from_export(e: &ModelExport) -> Result<Self, EdmdError> {
        if e.format_version != MODEL_FORMAT {
            return Err(EdmdError::Precondition(format!(
                "unsupported model format {:?}",
                e.format_version
            )));
        }
        let dictionary = Dictionary::from_spec(&e.dictionary)?;
        let m = dictionary.size();
        let d = dictionary.state_dim();
        let bad = |what: &str| EdmdError::Precondition(format!("model export: malformed {what}"));
        let mat = |rows: &[Vec<f64>], c: usize, what: &str| -> Result<DenseMatrix, EdmdError> {
            if rows.len() != m || rows.iter().any(|r| r.len() != c) {
                return Err(bad(what));
            }
            Ok(DenseMatrix::from_fn(m, c, |i, j| rows[i][j]))
        };
        let cvecs = |vs: &[Vec<[f64; 2]>], len: usize, what: &str| {
            if vs.len() != m || vs.iter().any(|v| v.len() != len) {
                return Err(bad(what));
            }
            Ok(vs
                .iter()
                .map(|v| ComplexVector::from_iterator(len, v.iter().map(|c| Complex64::new(c[0], c[1]))))
                .collect::<Vec<_>>())
        };
        if e.eigenvalues.len() != m {
            return Err(bad("eigenvalues"));
        }
        let k = mat(&e.k, m, "K")?;
        let b = mat(&e.b, e.b.first().map_or(0, |r| r.len()), "B")?;
        let spectral = KoopmanDecomposition {
            eigenvalues: e.eigenvalues.iter().map(|c| Complex64::new(c[0], c[1])).collect(),
            right: cvecs(&e.right_eigenvectors, m, "right eigenvectors")?,
            left: cvecs(&e.left_eigenvectors, m, "left eigenvectors")?,
            modes: cvecs(&e.modes, b.ncols(), "modes")?,
            k,
            b,
        };
        if spectral.b.ncols() != d {
            return Err(bad("B"));
        }
        Ok(Self {
            dictionary,
            spectral,
        })
    }
}

/// JSON model document. Matrices are lists of rows; complex numbers are `[re, im]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelExport {
    pub format_version: String,
    pub state_dim: usize,
    pub dictionary_size: usize,
    pub dictionary: DictionarySpec,
    pub k: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub eigenvalues: Vec<[f64; 2]>,
    pub right_eigenvectors: Vec<Vec<[f64; 2]>>,
    pub left_eigenvectors: Vec<Vec<[f64; 2]>>,
    pub modes: Vec<Vec<[f64; 2]>>,
}

/// `eigenfunctions_at` for a single state.
pub fn eigenfunctions_at(model: &KoopmanModel, x: &[f64]) -> Result<Vec<Complex64>, EdmdError> {
    if x.len() != model.dictionary.state_dim() {
        return Err(EdmdError::Dimension {
            expected: model.dictionary.state_dim(),
            got: x.len(),
        });
    }
    let phi = model.eigenfunctions_batch(x, 1)?;
    Ok(phi.row(0).iter().copied().collect())
}

/// `x~_n = sum_k mu_k^n m_k phi_k(x0)` for `n = 0..=n_steps`, one state per entry.
pub fn predict(model: &KoopmanModel, x0: &[f64], n_steps: usize) -> Result<Vec<Vec<f64>>, EdmdError> {
    let d = model.dictionary.state_dim();
    if x0.len() != d {
        return Err(EdmdError::Dimension {
            expected: d,
            got: x0.len(),
        });
    }
    let traj = model.predict_many(x0, 1, n_steps)?.pop().unwrap();
    Ok(traj.chunks(d).map(|c| c.to_vec()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::{init_mlp, Architecture, InitScale};
    use nalgebra::dmatrix;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn scalar_linear_data(n: usize) -> TimeSeriesDataset {
        let mut x = vec![2.0];
        for _ in 0..n {
            x.push(0.5 * x.last().unwrap());
        }
        TimeSeriesDataset::from_trajectories(
            1,
            vec![x],
            crate::dataset::SystemDescriptor::Custom { label: "lin".into() },
            0,
        )
        .unwrap()
    }

    fn scalar_model() -> KoopmanModel {
        let dict = Dictionary::fixed(1);
        let (g, a) = compute_gram(&dict, &scalar_linear_data(6)).unwrap();
        let k = compute_k(&g, &a, 0.0).unwrap();
        KoopmanModel::new(dict, &k).unwrap()
    }

    #[test]
    fn zero_network_dictionary_values() {
        let net = DictionaryNetwork::zeros(
            Architecture::Mlp {
                input_dim: 2,
                width: 3,
                hidden_depth: 2,
                outputs: 4,
            },
            0,
        )
        .unwrap();
        let dict = Dictionary::new(net);
        assert_eq!(dict.size(), 7);
        assert_eq!(
            evaluate_dictionary(&dict, &[3.0, -1.0]).unwrap(),
            vec![1.0, 3.0, -1.0, 0.0, 0.0, 0.0, 0.0]
        );
        assert!(evaluate_dictionary(&dict, &[3.0]).is_err());
    }

    #[test]
    fn fixed_prefix_ignores_network_parameters() {
        let a = Dictionary::new(init_mlp(2, 5, 2, 3, 1, InitScale::Inverse).unwrap());
        let b = Dictionary::new(init_mlp(2, 5, 2, 3, 2, InitScale::Inverse).unwrap());
        let x = [0.7, -0.2];
        let pa = evaluate_dictionary(&a, &x).unwrap();
        let pb = evaluate_dictionary(&b, &x).unwrap();
        assert_eq!(pa[..3], pb[..3]);
        assert_ne!(pa[3..], pb[3..]);
        assert_eq!(pa[0], 1.0);
    }

    #[test]
    fn single_pair_gram() {
        // Psi(x0) = (1, 2), Psi(x1) = (1, 0) with the dictionary {1, x}
        let dict = Dictionary::fixed(1);
        let ds = TimeSeriesDataset::from_pairs(1, &[2.0], &[0.0]).unwrap();
        let (g, a) = compute_gram(&dict, &ds).unwrap();
        assert_eq!(g, dmatrix![1.0, 2.0; 2.0, 4.0]);
        assert_eq!(a, dmatrix![1.0, 0.0; 2.0, 0.0]);
        let k = compute_k(&g, &a, 0.0).unwrap();
        let want = dmatrix![0.2, 0.0; 0.4, 0.0];
        assert!((k - want).amax() < 1e-12);
    }

    #[test]
    fn constant_only_gram() {
        let dict = Dictionary::custom(1, true, false, None).unwrap();
        let ds = TimeSeriesDataset::from_pairs(1, &[5.0, 1.0], &[3.0, -2.0]).unwrap();
        let (g, a) = compute_gram(&dict, &ds).unwrap();
        assert_eq!(g, dmatrix![1.0]);
        assert_eq!(a, dmatrix![1.0]);
    }

    #[test]
    fn compute_k_regularized_identity() {
        let i = DenseMatrix::identity(3, 3);
        assert!((compute_k(&i, &i, 0.0).unwrap() - &i).amax() < 1e-15);
        assert!((compute_k(&i, &i, 1.0).unwrap() - &i * 0.5).amax() < 1e-15);
        assert!(compute_k(&i, &i, -1.0).is_err());
        assert!(compute_k(&i, &DenseMatrix::identity(2, 2), 0.0).is_err());
    }

    #[test]
    fn scalar_linear_system_k() {
        let model = scalar_model();
        let want = dmatrix![1.0, 0.0; 0.0, 0.5];
        assert!((&model.spectral.k - want).amax() < 1e-12);
        let mu = model.eigenvalues();
        assert!(close(mu[0].re, 1.0, 1e-12) && close(mu[1].re, 0.5, 1e-12));
        // mode of mu = 0.5 times its eigenfunction recovers x
        let phi = eigenfunctions_at(&model, &[2.0]).unwrap();
        let recon = model.spectral.modes[1][0] * phi[1];
        assert!(close(recon.re, 2.0, 1e-12) && recon.im.abs() < 1e-15);
        // phi for mu = 0.5 is proportional to x with mode 1/c
        let c = model.spectral.right[1][1];
        assert!(close((phi[1] / c).re, 2.0, 1e-12));
        assert!(close((model.spectral.modes[1][0] * c).re, 1.0, 1e-12));
    }

    #[test]
    fn scalar_linear_prediction() {
        let model = scalar_model();
        let traj = predict(&model, &[2.0], 3).unwrap();
        for (got, want) in traj.iter().zip([2.0, 1.0, 0.5, 0.25]) {
            assert!(close(got[0], want, 1e-12), "{got:?} vs {want}");
        }
        let zero = predict(&model, &[-3.5], 0).unwrap();
        assert_eq!(zero.len(), 1);
        assert!(close(zero[0][0], -3.5, 1e-12));
    }

    #[test]
    fn prediction_semigroup_on_invariant_dictionary() {
        let model = scalar_model();
        let long = predict(&model, &[1.3], 6).unwrap();
        let mid = predict(&model, &[1.3], 3).unwrap();
        let rest = predict(&model, &mid[3], 3).unwrap();
        assert!(close(long[6][0], rest[3][0], 1e-12));
    }

    #[test]
    fn identity_decomposition_modes_are_b_rows() {
        let b = dmatrix![1.0, 0.0; 0.0, 1.0; 0.0, 0.0];
        let dec = decompose(&DenseMatrix::identity(3, 3), &b).unwrap();
        for (k, mode) in dec.modes.iter().enumerate() {
            assert!(close(dec.eigenvalues[k].re, 1.0, 1e-14));
            for i in 0..2 {
                assert!((mode[i] - Complex64::new(b[(k, i)], 0.0)).norm() < 1e-12);
            }
        }
        assert!(decompose(&dmatrix![1.0, 1.0; 0.0, 1.0], &dmatrix![1.0; 0.0]).is_err());
    }

    #[test]
    fn constant_eigenfunction() {
        let dict = Dictionary::custom(2, true, false, None).unwrap();
        let model =
            KoopmanModel::with_observable(dict, &DenseMatrix::identity(1, 1), &dmatrix![0.0, 0.0])
                .unwrap();
        let phi = eigenfunctions_at(&model, &[4.0, -7.0]).unwrap();
        assert!((phi[0] - Complex64::new(1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn rescaling_scales_eigenfunction_only() {
        let mut model = scalar_model();
        let x = [0.8];
        let before = eigenfunctions_at(&model, &x).unwrap();
        let traj = predict(&model, &x, 4).unwrap();
        model.rescale_eigenfunction(1, 3.0);
        let after = eigenfunctions_at(&model, &x).unwrap();
        assert!((after[1] - before[1] * 3.0).norm() < 1e-14);
        assert_eq!(after[0], before[0]);
        let traj2 = predict(&model, &x, 4).unwrap();
        for (a, b) in traj.iter().zip(&traj2) {
            assert!(close(a[0], b[0], 1e-14));
        }
    }

    #[test]
    fn rotation_prediction_is_real() {
        // x_{n+1} = R x_n with a damped rotation: complex eigenvalue pair
        let (c, s) = (0.9 * 0.3f64.cos(), 0.9 * 0.3f64.sin());
        let mut xs = vec![];
        let mut ys = vec![];
        for i in 0..20 {
            let x = [(i as f64 * 0.7).sin(), (i as f64 * 1.3).cos()];
            xs.extend(x);
            ys.extend([c * x[0] - s * x[1], s * x[0] + c * x[1]]);
        }
        let ds = TimeSeriesDataset::from_pairs(2, &xs, &ys).unwrap();
        let dict = Dictionary::fixed(2);
        let (g, a) = compute_gram(&dict, &ds).unwrap();
        let model = KoopmanModel::new(dict, &compute_k(&g, &a, 0.0).unwrap()).unwrap();
        assert!(model.eigenvalues()[1].im.abs() > 0.1);
        let traj = predict(&model, &[1.0, 0.0], 5).unwrap();
        let mut x = [1.0, 0.0];
        for step in traj.iter().skip(1) {
            x = [c * x[0] - s * x[1], s * x[0] + c * x[1]];
            assert!(close(step[0], x[0], 1e-10) && close(step[1], x[1], 1e-10));
        }
    }

    #[test]
    fn export_round_trip() {
        let dict = Dictionary::new(init_mlp(1, 3, 2, 2, 4, InitScale::Inverse).unwrap());
        let data = scalar_linear_data(8);
        let (g, a) = compute_gram(&dict, &data).unwrap();
        let k = compute_k(&g, &a, 1e-3).unwrap();
        let model = KoopmanModel::new(dict, &k).unwrap();
        let json = serde_json::to_string(&model.to_export()).unwrap();
        let back: ModelExport = serde_json::from_str(&json).unwrap();
        assert_eq!(KoopmanModel::from_export(&back).unwrap(), model);
    }
}
