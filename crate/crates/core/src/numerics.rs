//! Dense linear algebra used by EDMD: SVD pseudo-inverse and a nonsymmetric
//! eigendecomposition returning biorthogonally scaled left/right eigenvectors.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector, Schur, LU, SVD};
use num_complex::Complex64;

/// Real dense matrix. All EDMD matrices (G, A, K, B) use this type.
pub type DenseMatrix = DMatrix<f64>;
/// Complex column vector (eigenvectors and Koopman modes).
pub type ComplexVector = DVector<Complex64>;

/// Default relative singular-value cutoff for [`pseudo_inverse`].
pub const DEFAULT_CUTOFF: f64 = 1e-12;

const MAX_SVD_ITERATIONS: usize = 10_000;
const MAX_SCHUR_ITERATIONS: usize = 10_000;
/// Relative distance under which two eigenvalues share an eigenspace.
const CLUSTER_TOL: f64 = 1e-9;
/// Inverse-iteration residual accepted as an eigenvector, relative to ||K||.
const RESIDUAL_TOL: f64 = 1e-8;
/// Unit left/right vectors with |xi* zeta| below this are treated as defective.
const DEFECT_TOL: f64 = 1e-10;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("matrix is empty")]
    Empty,
    #[error("matrix contains a non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("expected a square matrix, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("negative singular-value cutoff {0}")]
    BadCutoff(f64),
    #[error("SVD failed to converge within {iterations} iterations")]
    SvdNoConvergence { iterations: usize },
    #[error("Schur decomposition failed to converge within {iterations} iterations")]
    SchurNoConvergence { iterations: usize },
    #[error("matrix is defective at eigenvalue index {index} (left/right eigenvectors nearly orthogonal)")]
    Defective { index: usize },
}

pub fn ensure_finite(m: &DenseMatrix) -> Result<(), NumericsError> {
    if m.is_empty() {
        return Err(NumericsError::Empty);
    }
    for c in 0..m.ncols() {
        for r in 0..m.nrows() {
            if !m[(r, c)].is_finite() {
                return Err(NumericsError::NonFinite { row: r, col: c });
            }
        }
    }
    Ok(())
}

/// Moore-Penrose pseudo-inverse via SVD. Singular values `<= cutoff * sigma_max`
/// are treated as zero.
pub fn pseudo_inverse(a: &DenseMatrix, cutoff: f64) -> Result<DenseMatrix, NumericsError> {
    ensure_finite(a)?;
    if !(cutoff >= 0.0) {
        return Err(NumericsError::BadCutoff(cutoff));
    }
    let (rows, cols) = a.shape();
    let svd = SVD::try_new(a.clone(), true, true, f64::EPSILON, MAX_SVD_ITERATIONS).ok_or(
        NumericsError::SvdNoConvergence {
            iterations: MAX_SVD_ITERATIONS,
        },
    )?;
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let sigma_max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let threshold = cutoff * sigma_max;
    let mut out = DenseMatrix::zeros(cols, rows);
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s <= threshold || s == 0.0 {
            continue;
        }
        let inv = 1.0 / s;
        // out += v_k * inv * u_k^T
        for j in 0..rows {
            let uj = u[(j, k)] * inv;
            if uj == 0.0 {
                continue;
            }
            for i in 0..cols {
                out[(i, j)] += v_t[(k, i)] * uj;
            }
        }
    }
    Ok(out)
}

/// One eigentriple of a real square matrix. `left` is scaled so that
/// `left^H right == 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Eigenpair {
    pub value: Complex64,
    pub right: ComplexVector,
    pub left: ComplexVector,
}

fn order_eigenvalues(a: &Complex64, b: &Complex64) -> Ordering {
    b.norm()
        .total_cmp(&a.norm())
        .then(b.re.total_cmp(&a.re))
        .then(b.im.total_cmp(&a.im))
}

/// Eigenvalues of a real square matrix in the canonical order: descending
/// modulus, then descending real part, then descending imaginary part.
/// Conjugate pairs are exact conjugates and adjacent.
pub fn eigenvalues(k: &DenseMatrix) -> Result<Vec<Complex64>, NumericsError> {
    ensure_finite(k)?;
    if !k.is_square() {
        return Err(NumericsError::NotSquare {
            rows: k.nrows(),
            cols: k.ncols(),
        });
    }
    let schur = Schur::try_new(k.clone(), f64::EPSILON, MAX_SCHUR_ITERATIONS).ok_or(
        NumericsError::SchurNoConvergence {
            iterations: MAX_SCHUR_ITERATIONS,
        },
    )?;
    let raw = schur.complex_eigenvalues();
    // Keep reals and upper-half-plane members; regenerate partners as exact conjugates.
    let mut values = Vec::with_capacity(raw.len());
    let mut upper = 0usize;
    let mut lower = 0usize;
    for z in raw.iter() {
        if z.im > 0.0 {
            upper += 1;
            values.push(*z);
            values.push(z.conj());
        } else if z.im < 0.0 {
            lower += 1;
        } else {
            values.push(Complex64::new(z.re, 0.0));
        }
    }
    debug_assert_eq!(upper, lower, "real Schur form yields conjugate pairs");
    values.sort_by(order_eigenvalues);
    Ok(values)
}

fn complexify(k: &DenseMatrix) -> DMatrix<Complex64> {
    k.map(|v| Complex64::new(v, 0.0))
}

fn normalize(v: &mut ComplexVector) -> f64 {
    let n = v.norm();
    if n > 0.0 {
        v.unscale_mut(n);
    }
    n
}

/// Rotates the phase so the largest-modulus component is real and positive.
fn fix_phase(v: &mut ComplexVector) {
    let mut best = 0usize;
    let mut best_abs = -1.0;
    for (i, z) in v.iter().enumerate() {
        let a = z.norm();
        if a > best_abs * (1.0 + 1e-12) {
            best = i;
            best_abs = a;
        }
    }
    if best_abs > 0.0 {
        let phase = v[best] / best_abs;
        let rot = phase.conj();
        for z in v.iter_mut() {
            *z *= rot;
        }
        v[best] = Complex64::new(v[best].re, 0.0);
    }
}

fn project_out(v: &mut ComplexVector, basis: &[ComplexVector]) {
    for b in basis {
        let c = b.dotc(v);
        v.axpy(-c, b, Complex64::new(1.0, 0.0));
    }
}

fn candidate_start(n: usize, idx: usize, coordinates_first: bool) -> Option<ComplexVector> {
    let generic = |seed: usize| {
        ComplexVector::from_fn(n, |i, _| {
            let x = (i as f64 + 1.0) * (0.7548776662 + seed as f64 * 0.5698402910) + 0.1;
            Complex64::new(1.0 + 0.5 * (x * 6.283185307179586).sin(), 0.0)
        })
    };
    let generic_count = 4;
    let unit = |j: usize| {
        let mut v = ComplexVector::zeros(n);
        v[j] = Complex64::new(1.0, 0.0);
        v
    };
    if coordinates_first {
        if idx < n {
            Some(unit(idx))
        } else if idx < n + generic_count {
            Some(generic(idx - n))
        } else {
            None
        }
    } else if idx < generic_count {
        Some(generic(idx))
    } else if idx < generic_count + n {
        Some(unit(idx - generic_count))
    } else {
        None
    }
}

/// Inverse iteration for a vector in the null space of `K - mu I`, orthogonal to
/// `found`. Returns a unit vector or `None` if no independent eigenvector exists.
fn inverse_iteration(
    kc: &DMatrix<Complex64>,
    mu: Complex64,
    scale: f64,
    found: &[ComplexVector],
    coordinates_first: bool,
) -> Option<ComplexVector> {
    let n = kc.nrows();
    let mut factor = None;
    for bump in [1e-10, 1e-8, 1e-6] {
        let shift = mu + Complex64::new(bump * scale, 0.0);
        let mut shifted = kc.clone();
        for i in 0..n {
            shifted[(i, i)] -= shift;
        }
        let lu = LU::new(shifted);
        if lu.is_invertible() {
            factor = Some(lu);
            break;
        }
    }
    let lu = factor?;
    let residual = |v: &ComplexVector| {
        let kv = kc * v;
        (kv - v * mu).norm()
    };
    let mut idx = 0;
    while let Some(mut v) = candidate_start(n, idx, coordinates_first) {
        idx += 1;
        project_out(&mut v, found);
        if normalize(&mut v) < 1e-6 {
            continue;
        }
        let mut ok = true;
        for _ in 0..3 {
            match lu.solve(&v) {
                Some(w) if w.iter().all(|z| z.re.is_finite() && z.im.is_finite()) => v = w,
                _ => {
                    ok = false;
                    break;
                }
            }
            let before = v.norm();
            project_out(&mut v, found);
            if before == 0.0 || normalize(&mut v) < 1e-6 * before {
                ok = false;
                break;
            }
        }
        if ok && residual(&v) <= RESIDUAL_TOL * scale {
            return Some(v);
        }
    }
    None
}

fn cluster_of(values: &[Complex64], scale: f64) -> Vec<usize> {
    // cluster id per index, only among reals/upper-half-plane representatives
    let mut ids = vec![usize::MAX; values.len()];
    let mut next = 0;
    for i in 0..values.len() {
        if ids[i] != usize::MAX {
            continue;
        }
        ids[i] = next;
        for j in i + 1..values.len() {
            if ids[j] == usize::MAX && (values[i] - values[j]).norm() <= CLUSTER_TOL * scale {
                ids[j] = next;
            }
        }
        next += 1;
    }
    ids
}

/// Eigendecomposition of a real square matrix with biorthogonal scaling
/// `left_j^H right_k = delta_jk`. Right vectors have unit norm.
pub fn eig_nonsymmetric(k: &DenseMatrix) -> Result<Vec<Eigenpair>, NumericsError> {
    let values = eigenvalues(k)?;
    let n = k.nrows();
    let scale = k.norm().max(1.0);
    let kc = complexify(k);
    let kt = complexify(&k.transpose());

    // Representatives: real eigenvalues and the positive-imaginary member of each pair.
    let reps: Vec<usize> = (0..n).filter(|&i| values[i].im >= 0.0).collect();
    let rep_values: Vec<Complex64> = reps.iter().map(|&i| values[i]).collect();
    let cluster_ids = cluster_of(&rep_values, scale);
    let n_clusters = cluster_ids.iter().copied().max().map_or(0, |m| m + 1);
    let mut cluster_sizes = vec![0usize; n_clusters];
    for &c in &cluster_ids {
        cluster_sizes[c] += 1;
    }

    let mut right: Vec<Option<ComplexVector>> = vec![None; n];
    let mut left: Vec<Option<ComplexVector>> = vec![None; n];
    let mut right_found: Vec<Vec<ComplexVector>> = vec![Vec::new(); n_clusters];
    let mut left_found: Vec<Vec<ComplexVector>> = vec![Vec::new(); n_clusters];
    for (r, &i) in reps.iter().enumerate() {
        let c = cluster_ids[r];
        let coords = cluster_sizes[c] > 1;
        let mu = values[i];
        let zr = inverse_iteration(&kc, mu, scale, &right_found[c], coords)
            .ok_or(NumericsError::Defective { index: i })?;
        // Left vectors: K^T y = mu y, xi = conj(y).
        let yl = inverse_iteration(&kt, mu, scale, &left_found[c], coords)
            .ok_or(NumericsError::Defective { index: i })?;
        right_found[c].push(zr.clone());
        left_found[c].push(yl.clone());
        let mut zr = zr;
        let mut yl = yl;
        fix_phase(&mut zr);
        fix_phase(&mut yl);
        right[i] = Some(zr);
        left[i] = Some(yl.map(|z| z.conj()));
    }

    // Biorthogonal scaling within each cluster.
    for c in 0..n_clusters {
        let members: Vec<usize> = reps
            .iter()
            .enumerate()
            .filter(|(r, _)| cluster_ids[*r] == c)
            .map(|(_, &i)| i)
            .collect();
        let m = members.len();
        let z = DMatrix::from_columns(
            &members.iter().map(|&i| right[i].clone().unwrap()).collect::<Vec<_>>(),
        );
        let x = DMatrix::from_columns(
            &members.iter().map(|&i| left[i].clone().unwrap()).collect::<Vec<_>>(),
        );
        let overlap = x.adjoint() * &z;
        if m == 1 {
            let s = overlap[(0, 0)];
            if s.norm() < DEFECT_TOL {
                return Err(NumericsError::Defective { index: members[0] });
            }
            let i = members[0];
            let xi = left[i].take().unwrap() / s.conj();
            left[i] = Some(xi);
        } else {
            let sv = overlap.clone().singular_values();
            let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
            if smin < DEFECT_TOL {
                return Err(NumericsError::Defective { index: members[0] });
            }
            let inv = overlap
                .try_inverse()
                .ok_or(NumericsError::Defective { index: members[0] })?;
            let scaled = x * inv.adjoint();
            for (col, &i) in members.iter().enumerate() {
                left[i] = Some(scaled.column(col).into_owned());
            }
        }
    }

    // Conjugate partners directly follow their representative.
    for i in 0..n {
        if values[i].im < 0.0 {
            let partner = i - 1;
            debug_assert!((values[partner] - values[i].conj()).norm() == 0.0);
            right[i] = right[partner].as_ref().map(|v| v.map(|z| z.conj()));
            left[i] = left[partner].as_ref().map(|v| v.map(|z| z.conj()));
        }
    }

    Ok(values
        .into_iter()
        .zip(right.into_iter().zip(left))
        .map(|(value, (r, l))| Eigenpair {
            value,
            right: r.expect("every eigenvalue assigned"),
            left: l.expect("every eigenvalue assigned"),
        })
        .collect())
}
