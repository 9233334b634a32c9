//! Linearized last-layer objective, its quadratic surrogate, the smoothness,
//! strong-convexity and gradient-bound constants, and a FedAvg convergence
//! run on the surrogate.
//!
//! For level `i ≥ 1` of sample `j` write `A = U ψ⁽ⁱ⁾ᵀ` and `B = ψ⁽ⁱ⁻¹⁾ᵀ`.
//! The linearized loss distills against a teacher frozen at `w_t`:
//! `‖B w_t − A w‖²`. The surrogate replaces it by the bilinear form
//! `wᵀ Aᵀ(A − B) w`, whose gradient `(M + Mᵀ) w` with `M = Aᵀ(A − B)` has
//! the `2 Aᵀ(A − B) w` leading structure of the smoothness proof.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{check_levels, Resolution};
use crate::error::{invalid, shape_mismatch, Error, Result};
use crate::losses::LossCoeffs;
use crate::model::{spectral_norm, LinearModel};

/// Settings of the theory report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheoryConfig {
    /// Image resolution levels of each client, native first.
    pub clients: Vec<Vec<Resolution>>,
    pub samples_per_client: usize,
    pub keypoints: usize,
    pub m_phi: f64,
    /// Radius of the iterate ball.
    pub radius: f64,
    pub alpha: f64,
    pub gamma: f64,
    /// Random linear instances for the bound checks.
    pub instances: usize,
    /// Random pairs / points per bound check.
    pub trials: usize,
    pub equivalence_instances: usize,
    pub rounds: usize,
    pub local_steps: usize,
    /// Independent stochastic runs averaged into the gap curve.
    pub repeats: usize,
    /// First round of the rate fit.
    pub fit_from: usize,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        let hi = Resolution::new(64, 48);
        let mid = Resolution::new(48, 36);
        let lo = Resolution::new(32, 24);
        Self {
            clients: vec![vec![hi, mid, lo], vec![mid, lo], vec![lo]],
            samples_per_client: 16,
            keypoints: 1,
            m_phi: 1.0,
            radius: 5.0,
            alpha: 1.0,
            gamma: 1.0,
            instances: 5,
            trials: 500,
            equivalence_instances: 10,
            rounds: 500,
            local_steps: 2,
            repeats: 32,
            fit_from: 50,
        }
    }
}

impl TheoryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients.is_empty() {
            return Err(invalid("at least one client is required"));
        }
        for c in &self.clients {
            check_levels(c)?;
        }
        if self.samples_per_client == 0 || self.keypoints == 0 {
            return Err(invalid("samples_per_client and keypoints must be at least 1"));
        }
        if !(self.m_phi > 0.0 && self.radius > 0.0 && self.gamma > 0.0 && self.alpha >= 0.0) {
            return Err(invalid("m_phi, radius and gamma must be positive and alpha non-negative"));
        }
        if self.instances == 0 || self.trials == 0 || self.rounds == 0 || self.local_steps == 0 || self.repeats == 0 {
            return Err(invalid("instances, trials, rounds, local_steps and repeats must be at least 1"));
        }
        if self.fit_from == 0 || self.fit_from >= self.rounds {
            return Err(invalid("fit_from must lie in 1..rounds"));
        }
        Ok(())
    }

    pub fn coeffs(&self) -> LossCoeffs {
        LossCoeffs {
            alpha: self.alpha,
            gamma: self.gamma,
            mu_prox: 0.0,
        }
    }
}

fn check_dim(lm: &LinearModel, w: &DVector<f64>) -> Result<()> {
    if w.len() != lm.dim {
        return Err(shape_mismatch(format!(
            "weight has {} entries, the model has {}",
            w.len(),
            lm.dim
        )));
    }
    if lm.samples.is_empty() {
        return Err(invalid("linear model has no samples"));
    }
    Ok(())
}

/// `(U ⊗ I_K) ψ⁽ⁱ⁾ᵀ` for sample `j`, applied sparsely.
fn lifted(lm: &LinearModel, j: usize, i: usize) -> DMatrix<f64> {
    let psi = &lm.samples[j].psi[i];
    let op = &lm.ups[i - 1];
    let k = lm.keypoints;
    let mut out = DMatrix::zeros(op.dst_len() * k, lm.dim);
    let mut src = vec![0.0; psi.ncols()];
    let mut dst = vec![0.0; op.dst_len() * k];
    for col in 0..lm.dim {
        for (s, v) in src.iter_mut().zip(psi.row(col).iter()) {
            *s = *v;
        }
        dst.iter_mut().for_each(|v| *v = 0.0);
        op.apply_slice(&src, k, &mut dst);
        out.column_mut(col).copy_from_slice(&dst);
    }
    out
}

/// `(1/n) Σ_j ‖ψ⁽⁰⁾ᵀ w − T‖²` and its gradient.
fn task_term(lm: &LinearModel, w: &DVector<f64>) -> (f64, DVector<f64>) {
    let n = lm.samples.len() as f64;
    let mut value = 0.0;
    let mut grad = DVector::zeros(lm.dim);
    for s in &lm.samples {
        let r = s.psi[0].tr_mul(w) - &s.target;
        value += r.norm_squared() / n;
        grad += &s.psi[0] * r * (2.0 / n);
    }
    (value, grad)
}

/// Linearized loss with the distillation teacher frozen at `w_t`; returns
/// the value and the gradient in `w`.
pub fn linear_objective(
    lm: &LinearModel,
    w: &DVector<f64>,
    w_t: &DVector<f64>,
    coeffs: &LossCoeffs,
) -> Result<(f64, DVector<f64>)> {
    check_dim(lm, w)?;
    check_dim(lm, w_t)?;
    let (mut value, mut grad) = task_term(lm, w);
    if coeffs.alpha != 0.0 {
        let n = lm.samples.len() as f64;
        for j in 0..lm.samples.len() {
            for i in 1..lm.levels() {
                let a = lifted(lm, j, i);
                let teacher = lm.samples[j].psi[i - 1].tr_mul(w_t);
                let r = &a * w - teacher;
                value += coeffs.alpha * r.norm_squared() / n;
                grad += a.tr_mul(&r) * (2.0 * coeffs.alpha / n);
            }
        }
    }
    value += 0.5 * coeffs.gamma * w.norm_squared();
    grad += w * coeffs.gamma;
    Ok((value, grad))
}

pub fn loss_linear(lm: &LinearModel, w: &DVector<f64>, w_t: &DVector<f64>, coeffs: &LossCoeffs) -> Result<f64> {
    linear_objective(lm, w, w_t, coeffs).map(|(v, _)| v)
}

/// `M = (1/n) Σ_j Σ_i Aᵀ(A − B)` over one client's samples.
fn kd_matrix(lm: &LinearModel, samples: impl Iterator<Item = usize>, n: f64) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(lm.dim, lm.dim);
    for j in samples {
        for i in 1..lm.levels() {
            let a = lifted(lm, j, i);
            let b = lm.samples[j].psi[i - 1].transpose();
            m += a.tr_mul(&(&a - b)) / n;
        }
    }
    m
}

fn surrogate_objective(lm: &LinearModel, w: &DVector<f64>, coeffs: &LossCoeffs) -> Result<(f64, DVector<f64>)> {
    check_dim(lm, w)?;
    let (mut value, mut grad) = task_term(lm, w);
    if coeffs.alpha != 0.0 {
        let m = kd_matrix(lm, 0..lm.samples.len(), lm.samples.len() as f64);
        value += coeffs.alpha * w.dot(&(&m * w));
        grad += (&m + m.transpose()) * w * coeffs.alpha;
    }
    value += 0.5 * coeffs.gamma * w.norm_squared();
    grad += w * coeffs.gamma;
    Ok((value, grad))
}

pub fn loss_surrogate(lm: &LinearModel, w: &DVector<f64>, coeffs: &LossCoeffs) -> Result<f64> {
    surrogate_objective(lm, w, coeffs).map(|(v, _)| v)
}

pub fn grad_surrogate(lm: &LinearModel, w: &DVector<f64>, coeffs: &LossCoeffs) -> Result<DVector<f64>> {
    surrogate_objective(lm, w, coeffs).map(|(_, g)| g)
}

/// `½ wᵀ H w − bᵀ w + c` with symmetric `H`.
#[derive(Clone, Debug, PartialEq)]
pub struct Quadratic {
    pub h: DMatrix<f64>,
    pub b: DVector<f64>,
    pub c: f64,
}

impl Quadratic {
    pub fn value(&self, w: &DVector<f64>) -> f64 {
        0.5 * w.dot(&(&self.h * w)) - self.b.dot(w) + self.c
    }

    pub fn grad(&self, w: &DVector<f64>) -> DVector<f64> {
        &self.h * w - &self.b
    }

    /// Unique minimizer; fails unless `H` is positive definite.
    pub fn minimizer(&self) -> Result<DVector<f64>> {
        let chol = self
            .h
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numeric("surrogate Hessian is not positive definite".into()))?;
        Ok(chol.solve(&self.b))
    }

    pub fn mean(parts: &[Quadratic]) -> Result<Quadratic> {
        let first = parts.first().ok_or_else(|| invalid("no quadratics to average"))?;
        let n = parts.len() as f64;
        let mut out = Quadratic {
            h: DMatrix::zeros(first.h.nrows(), first.h.ncols()),
            b: DVector::zeros(first.b.len()),
            c: 0.0,
        };
        for q in parts {
            if q.b.len() != first.b.len() {
                return Err(shape_mismatch("quadratics differ in dimension"));
            }
            out.h += &q.h / n;
            out.b += &q.b / n;
            out.c += q.c / n;
        }
        Ok(out)
    }
}

/// The surrogate restricted to the given samples, averaged over them.
fn quadratic_over(lm: &LinearModel, coeffs: &LossCoeffs, samples: &[usize]) -> Quadratic {
    let n = samples.len() as f64;
    let d = lm.dim;
    let mut h = DMatrix::identity(d, d) * coeffs.gamma;
    let mut b = DVector::zeros(d);
    let mut c = 0.0;
    for &j in samples {
        let s = &lm.samples[j];
        h += (&s.psi[0] * s.psi[0].transpose()) * (2.0 / n);
        b += (&s.psi[0] * &s.target) * (2.0 / n);
        c += s.target.norm_squared() / n;
    }
    if coeffs.alpha != 0.0 {
        let m = kd_matrix(lm, samples.iter().copied(), n);
        h += (&m + m.transpose()) * coeffs.alpha;
    }
    Quadratic { h, b, c }
}

/// Closed form of the full surrogate.
pub fn surrogate_quadratic(lm: &LinearModel, coeffs: &LossCoeffs) -> Quadratic {
    let all: Vec<usize> = (0..lm.samples.len()).collect();
    quadratic_over(lm, coeffs, &all)
}

/// Single-sample surrogates whose mean is [`surrogate_quadratic`].
pub fn sample_quadratics(lm: &LinearModel, coeffs: &LossCoeffs) -> Vec<Quadratic> {
    (0..lm.samples.len())
        .map(|j| quadratic_over(lm, coeffs, &[j]))
        .collect()
}

/// `(|L − L̄|, ‖∇L − ∇L̄‖)` at `w = w_t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EquivalenceResiduals {
    pub value: f64,
    pub grad: f64,
}

pub fn check_local_equivalence(lm: &LinearModel, w_t: &DVector<f64>, coeffs: &LossCoeffs) -> Result<EquivalenceResiduals> {
    let (lv, lg) = linear_objective(lm, w_t, w_t, coeffs)?;
    let (sv, sg) = surrogate_objective(lm, w_t, coeffs)?;
    Ok(EquivalenceResiduals {
        value: (lv - sv).abs(),
        grad: (lg - sg).norm(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TheoryConstants {
    pub m_phi: f64,
    pub m_u: f64,
    pub m_t: f64,
    pub radius: f64,
    pub alpha: f64,
    pub gamma: f64,
    /// Number of resolution levels.
    pub r: usize,
    /// Smoothness constant.
    pub l: f64,
    /// Gradient-norm bound.
    pub c: f64,
}

/// `2(1 + α(r−1)(M_U+1)²)M_φ² + γ`.
pub fn lipschitz_bound(alpha: f64, gamma: f64, r: usize, m_u: f64, m_phi: f64) -> f64 {
    let kd = alpha * (r as f64 - 1.0) * (m_u + 1.0).powi(2);
    2.0 * (1.0 + kd) * m_phi * m_phi + gamma
}

/// `2M_φ(M_φR + M_T) + 2α(r−1)M_φ²(M_U+1)²R + γR`.
pub fn gradient_bound(alpha: f64, gamma: f64, r: usize, m_u: f64, m_phi: f64, m_t: f64, radius: f64) -> f64 {
    2.0 * m_phi * (m_phi * radius + m_t)
        + 2.0 * alpha * (r as f64 - 1.0) * m_phi * m_phi * (m_u + 1.0).powi(2) * radius
        + gamma * radius
}

impl TheoryConstants {
    pub fn new(m_phi: f64, m_u: f64, m_t: f64, radius: f64, coeffs: &LossCoeffs, r: usize) -> Self {
        Self {
            m_phi,
            m_u,
            m_t,
            radius,
            alpha: coeffs.alpha,
            gamma: coeffs.gamma,
            r,
            l: lipschitz_bound(coeffs.alpha, coeffs.gamma, r, m_u, m_phi),
            c: gradient_bound(coeffs.alpha, coeffs.gamma, r, m_u, m_phi, m_t, radius),
        }
    }

    /// Offset `E + α r M_U² M_φ² / γ` of the step-size schedule.
    pub fn schedule_offset(&self, local_steps: usize) -> f64 {
        local_steps as f64 + self.alpha * self.r as f64 * self.m_u.powi(2) * self.m_phi.powi(2) / self.gamma
    }

    /// `η_t = 1 / (γ (offset + t))`.
    pub fn step_size(&self, local_steps: usize, t: usize) -> f64 {
        1.0 / (self.gamma * (self.schedule_offset(local_steps) + t as f64))
    }
}

/// Largest operator norm of the model's upsampling operators (0 without any).
pub fn max_upsample_norm(lm: &LinearModel) -> f64 {
    (1..lm.levels())
        .map(|i| {
            let op = &lm.ups[i - 1];
            let (rows, cols) = (op.dst_len(), op.src_len());
            spectral_norm(&DMatrix::from_row_slice(rows, cols, &op.dense()))
        })
        .fold(0.0, f64::max)
}

pub fn compute_constants(lm: &LinearModel, coeffs: &LossCoeffs, radius: f64) -> TheoryConstants {
    let m_t = lm.samples.iter().map(|s| s.target.norm()).fold(0.0, f64::max);
    TheoryConstants::new(lm.m_phi, max_upsample_norm(lm), m_t, radius, coeffs, lm.levels())
}

/// Constants shared by several clients: worst case of each bound.
pub fn combine_constants(parts: &[TheoryConstants]) -> Result<TheoryConstants> {
    let first = parts.first().ok_or_else(|| invalid("no constants to combine"))?;
    let coeffs = LossCoeffs {
        alpha: first.alpha,
        gamma: first.gamma,
        mu_prox: 0.0,
    };
    let max = |f: fn(&TheoryConstants) -> f64| parts.iter().map(f).fold(0.0, f64::max);
    Ok(TheoryConstants::new(
        max(|c| c.m_phi),
        max(|c| c.m_u),
        max(|c| c.m_t),
        first.radius,
        &coeffs,
        parts.iter().map(|c| c.r).max().unwrap_or(1),
    ))
}

/// Uniform draw from the closed ball of radius `r` in `R^d`.
pub fn sample_ball(rng: &mut impl Rng, d: usize, r: f64) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = v.norm();
        if norm > 0.0 {
            let radius = r * rng.gen::<f64>().powf(1.0 / d as f64);
            return v * (radius / norm);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundReport {
    pub lipschitz_estimate: f64,
    pub lipschitz_bound: f64,
    pub lipschitz_ok: bool,
    pub min_eigenvalue: f64,
    pub strong_convexity_ok: bool,
    pub max_grad_norm: f64,
    pub max_sample_grad_norm: f64,
    /// Mean `‖∇L̄(w; ξ) − ∇L̄(w)‖` over the sampled points and indices.
    pub mean_sample_deviation: f64,
    pub grad_bound: f64,
    pub grad_ok: bool,
}

/// Empirical checks of the three propositions with `trials` random pairs
/// and points in the `R`-ball.
pub fn verify_bounds(
    lm: &LinearModel,
    consts: &TheoryConstants,
    trials: usize,
    seed: u64,
) -> Result<BoundReport> {
    if trials == 0 {
        return Err(invalid("at least one trial is required"));
    }
    let coeffs = LossCoeffs {
        alpha: consts.alpha,
        gamma: consts.gamma,
        mu_prox: 0.0,
    };
    let q = surrogate_quadratic(lm, &coeffs);
    let per_sample = sample_quadratics(lm, &coeffs);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = lm.dim;

    let mut lip: f64 = 0.0;
    for _ in 0..trials {
        let u = sample_ball(&mut rng, d, consts.radius);
        let v = sample_ball(&mut rng, d, consts.radius);
        let du = (&u - &v).norm();
        if du > 0.0 {
            lip = lip.max((q.grad(&u) - q.grad(&v)).norm() / du);
        }
    }

    let sym = (&q.h + q.h.transpose()) * 0.5;
    let min_eig = SymmetricEigen::new(sym).eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);

    let (mut gmax, mut smax, mut dev) = (0.0f64, 0.0f64, 0.0);
    for _ in 0..trials {
        let w = sample_ball(&mut rng, d, consts.radius);
        let g = q.grad(&w);
        gmax = gmax.max(g.norm());
        let xi = rng.gen_range(0..per_sample.len());
        let gs = per_sample[xi].grad(&w);
        smax = smax.max(gs.norm());
        dev += (gs - g).norm() / trials as f64;
    }
    Ok(BoundReport {
        lipschitz_estimate: lip,
        lipschitz_bound: consts.l,
        lipschitz_ok: lip <= consts.l,
        min_eigenvalue: min_eig,
        strong_convexity_ok: min_eig >= consts.gamma - 1e-9,
        max_grad_norm: gmax,
        max_sample_grad_norm: smax,
        mean_sample_deviation: dev,
        grad_bound: consts.c,
        grad_ok: gmax <= consts.c && smax <= consts.c && dev <= consts.c,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradientMode {
    /// One uniformly drawn sample per local step.
    #[default]
    Stochastic,
    /// Exact local gradient.
    Full,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceOptions {
    pub rounds: usize,
    pub local_steps: usize,
    pub repeats: usize,
    pub seed: u64,
    pub mode: GradientMode,
    /// Initial global iterate; zero when absent.
    pub start: Option<DVector<f64>>,
}

/// Least-squares fit of `c / t` and its coefficient of determination.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RateFit {
    pub c: f64,
    pub r2: f64,
}

pub fn fit_inverse(t: &[f64], y: &[f64]) -> Result<RateFit> {
    if t.len() != y.len() || t.len() < 2 {
        return Err(invalid("rate fit needs at least two matching points"));
    }
    let num: f64 = t.iter().zip(y).map(|(t, y)| y / t).sum();
    let den: f64 = t.iter().map(|t| 1.0 / (t * t)).sum();
    let c = num / den;
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_res: f64 = t.iter().zip(y).map(|(t, y)| (y - c / t).powi(2)).sum();
    let ss_tot: f64 = y.iter().map(|y| (y - mean).powi(2)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Ok(RateFit { c, r2 })
}

/// Mann-Kendall trend statistic with the one-sided p-value of an upward
/// trend (normal approximation, no tie correction).
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MannKendall {
    pub s: i64,
    pub z: f64,
    pub p_upward: f64,
}

pub fn mann_kendall(x: &[f64]) -> MannKendall {
    let n = x.len();
    let mut s: i64 = 0;
    for i in 0..n {
        for j in i + 1..n {
            s += match x[j].partial_cmp(&x[i]) {
                Some(std::cmp::Ordering::Greater) => 1,
                Some(std::cmp::Ordering::Less) => -1,
                _ => 0,
            };
        }
    }
    let nf = n as f64;
    let var = nf * (nf - 1.0) * (2.0 * nf + 5.0) / 18.0;
    let z = if var == 0.0 {
        0.0
    } else if s > 0 {
        (s as f64 - 1.0) / var.sqrt()
    } else if s < 0 {
        (s as f64 + 1.0) / var.sqrt()
    } else {
        0.0
    };
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    MannKendall {
        s,
        z,
        p_upward: 1.0 - normal.cdf(z),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvergenceResult {
    /// Round counts `1..=T`.
    pub t: Vec<usize>,
    /// Mean optimality gap of the global objective after `t` rounds.
    pub gap: Vec<f64>,
    /// Step size used in round `t`.
    pub eta: Vec<f64>,
    pub initial_gap: f64,
    pub optimum: f64,
}

/// FedAvg on the client surrogates with `η_t = 1/(γ(E + α r M_U² M_φ²/γ + t))`.
pub fn convergence_experiment(
    models: &[LinearModel],
    coeffs: &LossCoeffs,
    consts: &TheoryConstants,
    opts: &ConvergenceOptions,
) -> Result<ConvergenceResult> {
    if models.is_empty() {
        return Err(invalid("at least one client is required"));
    }
    if opts.rounds == 0 || opts.local_steps == 0 || opts.repeats == 0 {
        return Err(invalid("rounds, local steps and repeats must be at least 1"));
    }
    let d = models[0].dim;
    if models.iter().any(|m| m.dim != d) {
        return Err(shape_mismatch("clients differ in feature dimension"));
    }
    let locals: Vec<Quadratic> = models.iter().map(|m| surrogate_quadratic(m, coeffs)).collect();
    let samples: Vec<Vec<Quadratic>> = models.iter().map(|m| sample_quadratics(m, coeffs)).collect();
    let global = Quadratic::mean(&locals)?;
    let w_star = global.minimizer()?;
    let optimum = global.value(&w_star);
    let start = match &opts.start {
        Some(w) if w.len() != d => return Err(shape_mismatch("start point has the wrong dimension")),
        Some(w) => w.clone(),
        None => DVector::zeros(d),
    };
    let eta: Vec<f64> = (0..opts.rounds).map(|t| consts.step_size(opts.local_steps, t)).collect();
    let mut gap = vec![0.0; opts.rounds];
    let n = models.len() as f64;
    for rep in 0..opts.repeats {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(rep as u64));
        let mut w = start.clone();
        for (t, &step) in eta.iter().enumerate() {
            let mut next = DVector::zeros(d);
            for (k, local) in locals.iter().enumerate() {
                let mut wk = w.clone();
                for _ in 0..opts.local_steps {
                    let g = match opts.mode {
                        GradientMode::Full => local.grad(&wk),
                        GradientMode::Stochastic => {
                            let xi = rng.gen_range(0..samples[k].len());
                            samples[k][xi].grad(&wk)
                        }
                    };
                    wk -= g * step;
                }
                next += wk / n;
            }
            w = next;
            let g = global.value(&w) - optimum;
            if !g.is_finite() {
                return Err(Error::Numeric(format!("optimality gap diverged in round {t}")));
            }
            gap[t] += g / opts.repeats as f64;
        }
    }
    Ok(ConvergenceResult {
        t: (1..=opts.rounds).collect(),
        gap,
        eta,
        initial_gap: global.value(&start) - optimum,
        optimum,
    })
}
