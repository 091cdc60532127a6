//! Fixed-point solvers and implicit differentiation.
//!
//! States are flat `f64` vectors so the same machinery serves latent fields,
//! strain fields and small synthetic maps.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveMode {
    Plain,
    Anderson,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AndersonConfig {
    pub window: usize,
    /// Tikhonov term relative to the mean diagonal of the Gram matrix.
    pub regularization: f64,
    pub beta: f64,
}

impl Default for AndersonConfig {
    fn default() -> Self {
        Self {
            window: 5,
            regularization: 1e-4,
            beta: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeqConfig {
    pub eval_iters: usize,
    pub train_min_iters: usize,
    pub train_max_iters: usize,
    pub eval_mode: SolveMode,
    pub anderson: AndersonConfig,
    pub backward_tol: f64,
    pub backward_max_iters: usize,
    /// Optional early stop on the normalized residual.
    pub forward_tol: Option<f64>,
}

impl Default for DeqConfig {
    fn default() -> Self {
        Self {
            eval_iters: 16,
            train_min_iters: 2,
            train_max_iters: 30,
            eval_mode: SolveMode::Anderson,
            anderson: AndersonConfig::default(),
            backward_tol: 1e-4,
            backward_max_iters: 16,
            forward_tol: None,
        }
    }
}

impl DeqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.anderson.window == 0 {
            return Err(Error::InvalidArgument("anderson window must be at least 1".into()));
        }
        if self.train_min_iters == 0 || self.train_min_iters > self.train_max_iters || self.eval_iters == 0 {
            return Err(Error::InvalidArgument("iteration counts must be positive and ordered".into()));
        }
        Ok(())
    }

    /// Depth of one training rollout, uniform on `[min, max]`.
    pub fn sample_train_depth(&self, rng: &mut impl Rng) -> usize {
        rng.random_range(self.train_min_iters..=self.train_max_iters)
    }
}

/// Uniform training depth on `[2, 30]`.
pub fn sample_train_depth(rng: &mut impl Rng) -> usize {
    DeqConfig::default().sample_train_depth(rng)
}

pub trait FixedPointMap {
    fn apply(&self, h: &[f64]) -> Result<Vec<f64>>;
}

/// Vector-Jacobian products of a map linearized at a point.
pub trait Linearized {
    /// `wᵀ ∂f/∂h`.
    fn vjp_state(&self, w: &[f64]) -> Vec<f64>;
    /// Accumulates `wᵀ ∂f/∂θ` into `grads`.
    fn vjp_params(&self, w: &[f64], grads: &mut [f64]);
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖f(h) − h‖ / ‖h‖`. For `h = 0` the step is normalized by `‖f(h)‖`
/// instead, which gives 1 for any nonzero step and 0 at a zero fixed point.
pub fn normalized_residual(h: &[f64], fh: &[f64]) -> f64 {
    let d = h.iter().zip(fh).map(|(a, b)| (b - a) * (b - a)).sum::<f64>().sqrt();
    let nh = norm(h);
    if nh > 0.0 {
        d / nh
    } else {
        let nf = norm(fh);
        if nf > 0.0 {
            d / nf
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointResult {
    pub state: Vec<f64>,
    /// One entry per map evaluation.
    pub residuals: Vec<f64>,
}

impl FixedPointResult {
    pub fn iterations(&self) -> usize {
        self.residuals.len()
    }
}

/// Mixing coefficients and next iterate from the most recent iterates `xs`
/// and their images `fs` (oldest first). Falls back to a plain step when the
/// least-squares system cannot be solved.
pub fn anderson_step(xs: &[Vec<f64>], fs: &[Vec<f64>], cfg: &AndersonConfig) -> (Vec<f64>, Vec<f64>) {
    let k = xs.len();
    assert!(k >= 1 && k == fs.len(), "anderson history must be non-empty and paired");
    let plain = || {
        let mut a = vec![0.0; k];
        a[k - 1] = 1.0;
        (mix(xs, fs, &a, cfg.beta), a)
    };
    if k == 1 {
        return plain();
    }
    let g: Vec<Vec<f64>> = xs.iter().zip(fs).map(|(x, f)| f.iter().zip(x).map(|(a, b)| a - b).collect()).collect();
    let mut gram = DMatrix::<f64>::zeros(k, k);
    for i in 0..k {
        for j in i..k {
            let v: f64 = g[i].iter().zip(&g[j]).map(|(a, b)| a * b).sum();
            gram[(i, j)] = v;
            gram[(j, i)] = v;
        }
    }
    let scale = gram.diagonal().mean();
    if !(scale > 0.0 && scale.is_finite()) {
        return plain();
    }
    // minimize αᵀ(GᵀG + λI)α subject to Σα = 1
    let lambda = cfg.regularization * scale;
    for i in 0..k {
        gram[(i, i)] += lambda;
    }
    let alpha = match gram.cholesky() {
        Some(ch) => {
            let y = ch.solve(&DVector::from_element(k, 1.0));
            let s = y.sum();
            if s.abs() < f64::MIN_POSITIVE || !s.is_finite() {
                return plain();
            }
            (y / s).iter().copied().collect::<Vec<f64>>()
        }
        None => return plain(),
    };
    if alpha.iter().any(|a| !a.is_finite()) {
        return plain();
    }
    (mix(xs, fs, &alpha, cfg.beta), alpha)
}

fn mix(xs: &[Vec<f64>], fs: &[Vec<f64>], alpha: &[f64], beta: f64) -> Vec<f64> {
    let n = xs[0].len();
    let mut out = vec![0.0; n];
    for ((x, f), &a) in xs.iter().zip(fs).zip(alpha) {
        for i in 0..n {
            out[i] += a * (beta * f[i] + (1.0 - beta) * x[i]);
        }
    }
    out
}

fn check_finite(v: &[f64], it: usize, residuals: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "non-finite iterate at step {it}; residual trace {residuals:?}"
        )))
    }
}

/// Runs `max_iters` map evaluations (fewer if `tol` is met). The returned
/// state is the last image `f(h)`.
pub fn fixed_point_solve<M: FixedPointMap + ?Sized>(
    map: &M,
    h0: Vec<f64>,
    max_iters: usize,
    mode: SolveMode,
    anderson: &AndersonConfig,
    tol: Option<f64>,
) -> Result<FixedPointResult> {
    let mut residuals = Vec::with_capacity(max_iters);
    let mut h = h0;
    let mut xs: Vec<Vec<f64>> = Vec::new();
    let mut fs: Vec<Vec<f64>> = Vec::new();
    for it in 0..max_iters {
        let fh = map.apply(&h)?;
        check_finite(&fh, it, &residuals)?;
        let r = normalized_residual(&h, &fh);
        residuals.push(r);
        let done = it + 1 == max_iters || tol.is_some_and(|t| r < t);
        if done {
            h = fh;
            break;
        }
        h = match mode {
            SolveMode::Plain => fh,
            SolveMode::Anderson => {
                xs.push(std::mem::take(&mut h));
                fs.push(fh);
                if xs.len() > anderson.window {
                    xs.remove(0);
                    fs.remove(0);
                }
                anderson_step(&xs, &fs, anderson).0
            }
        };
    }
    Ok(FixedPointResult { state: h, residuals })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjointReport {
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

struct AdjointMap<'a, L: Linearized + ?Sized> {
    lin: &'a L,
    g: &'a [f64],
}

impl<L: Linearized + ?Sized> FixedPointMap for AdjointMap<'_, L> {
    fn apply(&self, w: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.lin.vjp_state(w);
        out.iter_mut().zip(self.g).for_each(|(a, b)| *a += b);
        Ok(out)
    }
}

/// Solves `w = g + wᵀ ∂f/∂h` with Anderson mixing and accumulates
/// `wᵀ ∂f/∂θ` into `grads`. An unconverged adjoint still contributes its
/// truncated estimate; the report carries the flag.
pub fn ift_backward<L: Linearized + ?Sized>(
    lin: &L,
    g: &[f64],
    tol: f64,
    max_iters: usize,
    anderson: &AndersonConfig,
    grads: &mut [f64],
) -> Result<(Vec<f64>, AdjointReport)> {
    if g.iter().all(|x| *x == 0.0) {
        return Ok((
            g.to_vec(),
            AdjointReport {
                iterations: 0,
                residual: 0.0,
                converged: true,
            },
        ));
    }
    let map = AdjointMap { lin, g };
    let sol = fixed_point_solve(&map, g.to_vec(), max_iters.max(1), SolveMode::Anderson, anderson, Some(tol))?;
    let residual = *sol.residuals.last().expect("at least one adjoint iteration");
    let converged = residual < tol;
    if !converged {
        log::debug!("adjoint solve stopped at residual {residual:.3e} after {} iterations", sol.iterations());
    }
    lin.vjp_params(&sol.state, grads);
    let iterations = sol.iterations();
    Ok((
        sol.state,
        AdjointReport {
            iterations,
            residual,
            converged,
        },
    ))
}
