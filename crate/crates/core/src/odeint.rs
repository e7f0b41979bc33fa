//! ODE integration: adaptive Dormand-Prince 5(4), explicit Euler, and the
//! adjoint sensitivity pass used to differentiate neural-ODE dictionaries.

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum OdeError {
    #[error("integration interval is empty (t0 == t1 == {0})")]
    EmptyInterval(f64),
    #[error("maximum number of steps exceeded; last reached t = {t}")]
    MaxSteps { t: f64 },
    #[error("vector field returned a non-finite value at t = {t}")]
    NonFinite { t: f64 },
    #[error("step size underflow at t = {t}")]
    StepUnderflow { t: f64 },
    #[error("explicit Euler produced a non-finite state at step {step}")]
    EulerBlowUp { step: usize },
    #[error("invalid integrator configuration: {0}")]
    Config(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

/// Tolerances and limits for [`dopri54`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntegratorConfig {
    pub abs_tol: f64,
    pub rel_tol: f64,
    /// Initial step magnitude; `0` selects the automatic heuristic.
    pub initial_step: f64,
    pub max_steps: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            abs_tol: 1e-9,
            rel_tol: 1e-7,
            initial_step: 0.0,
            max_steps: 100_000,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<(), OdeError> {
        if !(self.abs_tol > 0.0) || !(self.rel_tol > 0.0) {
            return Err(OdeError::Config(format!(
                "tolerances must be positive (abs {}, rel {})",
                self.abs_tol, self.rel_tol
            )));
        }
        if self.max_steps == 0 {
            return Err(OdeError::Config("max_steps must be positive".into()));
        }
        if !(self.initial_step >= 0.0) {
            return Err(OdeError::Config("initial_step must be >= 0".into()));
        }
        Ok(())
    }
}

/// Right-hand side `dy/dt = f(y, t)` whose output has the dimension of its input.
pub trait VectorField {
    fn dim(&self) -> usize;
    fn eval(&self, t: f64, y: &[f64], dy: &mut [f64]);
}

/// Adapts a closure to [`VectorField`].
pub struct FnField<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(f64, &[f64], &mut [f64])> FnField<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(f64, &[f64], &mut [f64])> VectorField for FnField<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, t: f64, y: &[f64], dy: &mut [f64]) {
        (self.f)(t, y, dy)
    }
}

/// A vector field with trainable parameters that supports vector-Jacobian
/// products with respect to both state and parameters.
pub trait ParametricField: VectorField {
    fn param_dim(&self) -> usize;
    /// Accumulates `a^T df/dh` into `grad_h` and `a^T df/dtheta` into `grad_theta`
    /// (both are overwritten, not added to).
    fn vjp(&self, t: f64, h: &[f64], a: &[f64], grad_h: &mut [f64], grad_theta: &mut [f64]);

    /// `f(h)` together with the vector-Jacobian products; override when the
    /// two share work.
    fn eval_and_vjp(
        &self,
        t: f64,
        h: &[f64],
        a: &[f64],
        dh: &mut [f64],
        grad_h: &mut [f64],
        grad_theta: &mut [f64],
    ) {
        self.eval(t, h, dh);
        self.vjp(t, h, a, grad_h, grad_theta);
    }
}

/// Counters from one adaptive integration.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct IntegrationStats {
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

// Dormand-Prince 5(4) tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// error coefficients: fifth-order minus embedded fourth-order weights
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 5.0;

fn eval_checked<F: VectorField + ?Sized>(
    field: &F,
    t: f64,
    y: &[f64],
    dy: &mut [f64],
    stats: &mut IntegrationStats,
) -> Result<(), OdeError> {
    field.eval(t, y, dy);
    stats.evaluations += 1;
    if dy.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(OdeError::NonFinite { t })
    }
}

fn scaled_rms(v: &[f64], y0: &[f64], y1: Option<&[f64]>, cfg: &IntegratorConfig) -> f64 {
    let n = v.len().max(1) as f64;
    let mut acc = 0.0;
    for i in 0..v.len() {
        let mag = match y1 {
            Some(y1) => y0[i].abs().max(y1[i].abs()),
            None => y0[i].abs(),
        };
        let sc = cfg.abs_tol + cfg.rel_tol * mag;
        let r = v[i] / sc;
        acc += r * r;
    }
    (acc / n).sqrt()
}

fn initial_step<F: VectorField + ?Sized>(
    field: &F,
    t0: f64,
    y0: &[f64],
    f0: &[f64],
    direction: f64,
    span: f64,
    cfg: &IntegratorConfig,
    stats: &mut IntegrationStats,
) -> Result<f64, OdeError> {
    let d0 = scaled_rms(y0, y0, None, cfg);
    let d1 = scaled_rms(f0, y0, None, cfg);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    };
    let h0 = h0.min(span);
    let y1: Vec<f64> = y0
        .iter()
        .zip(f0)
        .map(|(y, f)| y + direction * h0 * f)
        .collect();
    let mut f1 = vec![0.0; y0.len()];
    eval_checked(field, t0 + direction * h0, &y1, &mut f1, stats)?;
    let diff: Vec<f64> = f1.iter().zip(f0).map(|(a, b)| a - b).collect();
    let d2 = scaled_rms(&diff, y0, None, cfg) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(1.0 / 5.0)
    };
    Ok((100.0 * h0).min(h1).min(span))
}

/// Integrates `field` from `t0` to `t1` (either direction) with adaptive
/// Dormand-Prince 5(4) steps and returns the state at `t1`.
pub fn dopri54<F: VectorField + ?Sized>(
    field: &F,
    y0: &[f64],
    t0: f64,
    t1: f64,
    cfg: &IntegratorConfig,
) -> Result<Vec<f64>, OdeError> {
    dopri54_with_stats(field, y0, t0, t1, cfg).map(|(y, _)| y)
}

pub fn dopri54_with_stats<F: VectorField + ?Sized>(
    field: &F,
    y0: &[f64],
    t0: f64,
    t1: f64,
    cfg: &IntegratorConfig,
) -> Result<(Vec<f64>, IntegrationStats), OdeError> {
    cfg.validate()?;
    let n = field.dim();
    if y0.len() != n {
        return Err(OdeError::Dimension {
            expected: n,
            got: y0.len(),
        });
    }
    if t0 == t1 {
        return Err(OdeError::EmptyInterval(t0));
    }
    if y0.iter().any(|v| !v.is_finite()) {
        return Err(OdeError::NonFinite { t: t0 });
    }
    let direction = (t1 - t0).signum();
    let span = (t1 - t0).abs();
    let mut stats = IntegrationStats::default();

    let mut y = y0.to_vec();
    let mut k1 = vec![0.0; n];
    eval_checked(field, t0, &y, &mut k1, &mut stats)?;
    let mut h = if cfg.initial_step > 0.0 {
        cfg.initial_step.min(span)
    } else {
        initial_step(field, t0, &y, &k1, direction, span, cfg, &mut stats)?
    };

    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut k5 = vec![0.0; n];
    let mut k6 = vec![0.0; n];
    let mut k7 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    let mut y_new = vec![0.0; n];
    let mut err = vec![0.0; n];

    let mut t = t0;
    let mut rejected_last = false;
    loop {
        let remaining = (t1 - t) * direction;
        if remaining <= 0.0 {
            break;
        }
        if stats.accepted + stats.rejected >= cfg.max_steps {
            return Err(OdeError::MaxSteps { t });
        }
        let last = h >= remaining;
        if last {
            h = remaining;
        }
        if h < 16.0 * f64::EPSILON * t.abs().max(span) {
            return Err(OdeError::StepUnderflow { t });
        }
        let hs = h * direction;

        for i in 0..n {
            tmp[i] = y[i] + hs * A21 * k1[i];
        }
        eval_checked(field, t + C2 * hs, &tmp, &mut k2, &mut stats)?;
        for i in 0..n {
            tmp[i] = y[i] + hs * (A31 * k1[i] + A32 * k2[i]);
        }
        eval_checked(field, t + C3 * hs, &tmp, &mut k3, &mut stats)?;
        for i in 0..n {
            tmp[i] = y[i] + hs * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
        }
        eval_checked(field, t + C4 * hs, &tmp, &mut k4, &mut stats)?;
        for i in 0..n {
            tmp[i] = y[i] + hs * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        eval_checked(field, t + C5 * hs, &tmp, &mut k5, &mut stats)?;
        for i in 0..n {
            tmp[i] = y[i]
                + hs * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        eval_checked(field, t + hs, &tmp, &mut k6, &mut stats)?;
        for i in 0..n {
            y_new[i] =
                y[i] + hs * (B1 * k1[i] + B3 * k3[i] + B4 * k4[i] + B5 * k5[i] + B6 * k6[i]);
        }
        let t_new = if last { t1 } else { t + hs };
        eval_checked(field, t_new, &y_new, &mut k7, &mut stats)?;
        for i in 0..n {
            err[i] = hs
                * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
        }
        let err_norm = scaled_rms(&err, &y, Some(&y_new), cfg);

        if err_norm <= 1.0 {
            stats.accepted += 1;
            t = t_new;
            std::mem::swap(&mut y, &mut y_new);
            std::mem::swap(&mut k1, &mut k7);
            let mut factor = if err_norm == 0.0 {
                MAX_FACTOR
            } else {
                (SAFETY * err_norm.powf(-0.2)).clamp(MIN_FACTOR, MAX_FACTOR)
            };
            if rejected_last {
                factor = factor.min(1.0);
            }
            rejected_last = false;
            if last {
                break;
            }
            h *= factor;
        } else {
            stats.rejected += 1;
            rejected_last = true;
            h *= (SAFETY * err_norm.powf(-0.2)).clamp(MIN_FACTOR, 1.0);
        }
    }
    Ok((y, stats))
}

/// Explicit Euler: `y_{n+1} = y_n + dt f(y_n, n dt)`. Returns `steps + 1` states.
pub fn euler_integrate<F: VectorField + ?Sized>(
    field: &F,
    y0: &[f64],
    dt: f64,
    steps: usize,
) -> Result<Vec<Vec<f64>>, OdeError> {
    if !(dt > 0.0) {
        return Err(OdeError::Config(format!("dt must be positive, got {dt}")));
    }
    if y0.len() != field.dim() {
        return Err(OdeError::Dimension {
            expected: field.dim(),
            got: y0.len(),
        });
    }
    let mut out = Vec::with_capacity(steps + 1);
    out.push(y0.to_vec());
    let mut dy = vec![0.0; y0.len()];
    for step in 0..steps {
        let y = out.last().unwrap();
        field.eval(step as f64 * dt, y, &mut dy);
        let next: Vec<f64> = y.iter().zip(&dy).map(|(y, d)| y + dt * d).collect();
        if next.iter().any(|v| !v.is_finite()) {
            return Err(OdeError::EulerBlowUp { step: step + 1 });
        }
        out.push(next);
    }
    Ok(out)
}

/// Augmented backward system: state `[h, a, g]` with
/// `dh/dt = f(h)`, `da/dt = -a^T df/dh`, `dg/dt = -a^T df/dtheta`.
struct AugmentedAdjoint<'a, P: ParametricField + ?Sized> {
    field: &'a P,
    n: usize,
    p: usize,
    scratch_h: std::cell::RefCell<Vec<f64>>,
}

impl<P: ParametricField + ?Sized> VectorField for AugmentedAdjoint<'_, P> {
    fn dim(&self) -> usize {
        2 * self.n + self.p
    }

    fn eval(&self, t: f64, y: &[f64], dy: &mut [f64]) {
        let (h, rest) = y.split_at(self.n);
        let a = &rest[..self.n];
        let (dh, drest) = dy.split_at_mut(self.n);
        let (da, dg) = drest.split_at_mut(self.n);
        let mut gh = self.scratch_h.borrow_mut();
        self.field.eval_and_vjp(t, h, a, dh, &mut gh, dg);
        for (d, g) in da.iter_mut().zip(gh.iter()) {
            *d = -g;
        }
        for d in dg.iter_mut() {
            *d = -*d;
        }
    }
}

/// Gradients returned by [`adjoint_backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointGradients {
    /// `dJ/dtheta`.
    pub params: Vec<f64>,
    /// `dJ/dh(t_start)`.
    pub h_start: Vec<f64>,
    /// State reconstructed at `t_start` by the backward replay.
    pub replayed_start: Vec<f64>,
}

/// Adjoint sensitivity pass: given `h(t_end)` and `dJ/dh(t_end)`, integrates
/// state, adjoint and parameter-gradient accumulator backward to `t_start`.
pub fn adjoint_backward<P: ParametricField + ?Sized>(
    field: &P,
    h_end: &[f64],
    grad_h_end: &[f64],
    t_start: f64,
    t_end: f64,
    cfg: &IntegratorConfig,
) -> Result<AdjointGradients, OdeError> {
    let n = field.dim();
    let p = field.param_dim();
    if h_end.len() != n {
        return Err(OdeError::Dimension {
            expected: n,
            got: h_end.len(),
        });
    }
    if grad_h_end.len() != n {
        return Err(OdeError::Dimension {
            expected: n,
            got: grad_h_end.len(),
        });
    }
    let aug = AugmentedAdjoint {
        field,
        n,
        p,
        scratch_h: std::cell::RefCell::new(vec![0.0; n]),
    };
    let mut z0 = Vec::with_capacity(2 * n + p);
    z0.extend_from_slice(h_end);
    z0.extend_from_slice(grad_h_end);
    z0.resize(2 * n + p, 0.0);
    let z = dopri54(&aug, &z0, t_end, t_start, cfg)?;
    Ok(AdjointGradients {
        replayed_start: z[..n].to_vec(),
        h_start: z[n..2 * n].to_vec(),
        params: z[2 * n..].to_vec(),
    })
}
