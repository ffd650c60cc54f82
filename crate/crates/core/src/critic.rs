//! Critic-only integral reinforcement learning.
//!
//! The value function is approximated as `V̂(z) = Ŵᵀ ϑ(z)`. Over a sliding
//! window `[t − T, t]` the interval Bellman residual
//!
//! ```text
//! ê = ∫ e^{−γ(τ−t+T)} [Q(z) + Û(û)] dτ + Ŵᵀ Δϑ,   Δϑ = e^{−γT} ϑ(z(t)) − ϑ(z(t−T))
//! ```
//!
//! drives a normalised gradient step whose gain grows with `|ê|`. An
//! indicator-gated stabilising term pushes `Ŵ` downhill on
//! `Σ = Ŵᵀ ∇ϑ ż` whenever the value estimate is not decreasing along the
//! trajectory, so no initial stabilising policy is required.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::min_eig_sym;
use crate::policy::{self, SaturationSpec};

/// Value-function regressor `ϑ` with its Jacobian.
#[allow(clippy::len_without_is_empty)]
pub trait CriticBasis: Send + Sync {
    fn input_dim(&self) -> usize;
    /// `N₁`
    fn len(&self) -> usize;
    fn theta(&self, z: &DVector<f64>) -> DVector<f64>;
    /// `∂ϑ/∂z`, `N₁ × dim(z)`.
    fn grad(&self, z: &DVector<f64>) -> DMatrix<f64>;
}

/// `ϑ = (z1, z2, z1², z2², z1 z2, z1³, z2³)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct PolynomialCriticBasis;

impl CriticBasis for PolynomialCriticBasis {
    fn input_dim(&self) -> usize {
        2
    }

    fn len(&self) -> usize {
        7
    }

    fn theta(&self, z: &DVector<f64>) -> DVector<f64> {
        let (a, b) = (z[0], z[1]);
        DVector::from_vec(vec![a, b, a * a, b * b, a * b, a * a * a, b * b * b])
    }

    fn grad(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let (a, b) = (z[0], z[1]);
        #[rustfmt::skip]
        let rows = [
            1.0, 0.0,
            0.0, 1.0,
            2.0 * a, 0.0,
            0.0, 2.0 * b,
            b, a,
            3.0 * a * a, 0.0,
            0.0, 3.0 * b * b,
        ];
        DMatrix::from_row_slice(7, 2, &rows)
    }
}

/// Learner hyperparameters of the critic update.
#[derive(Debug, Clone, PartialEq)]
pub struct GainConfig {
    /// Base learning rate `α`.
    pub alpha: f64,
    /// Exponent `k₂` on `|ê|` in the variable gain.
    pub exponent: f64,
    /// Gain offset `l ∈ (0, 1]`.
    pub offset: f64,
    /// `K₁ ∈ ℝ^{N₁}`
    pub k1: DVector<f64>,
    /// `K₂ ∈ ℝ^{N₁×N₁}`, symmetric.
    pub k2: DMatrix<f64>,
    /// Discount rate `γ`, 1/s.
    pub gamma: f64,
    /// IRL interval `T`, s.
    pub interval: f64,
}

impl GainConfig {
    /// Defaults for a basis of size `n`: `α = 20`, `k₂ = 1`, `l = 0.1`,
    /// `K₁ = 0`, `K₂ = 0.02 I`, `γ = 0.1`, `T = 0.05`.
    pub fn defaults(n: usize) -> Self {
        GainConfig {
            alpha: 20.0,
            exponent: 1.0,
            offset: 0.1,
            k1: DVector::zeros(n),
            k2: DMatrix::identity(n, n) * 0.02,
            gamma: 0.1,
            interval: 0.05,
        }
    }

    /// Scalar validity checks plus [`check_gains`]. Returns `λ_min(M₁)`.
    pub fn validate(&self) -> Result<f64> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::config("critic.alpha", "must be > 0"));
        }
        if !(self.exponent >= 0.0) || !self.exponent.is_finite() {
            return Err(Error::config("critic.k2", "must be >= 0"));
        }
        if !(self.offset > 0.0 && self.offset <= 1.0) {
            return Err(Error::config("critic.l", "must lie in (0, 1]"));
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::config("critic.gamma", "must be >= 0"));
        }
        if !(self.interval > 0.0) || !self.interval.is_finite() {
            return Err(Error::config("critic.T", "must be > 0"));
        }
        check_gains(self)
    }
}

/// Assemble `M₁ = [[1, −K₁ᵀ/2], [−K₁/2, K₂]]` and return `λ_min(M₁)`;
/// rejects gains for which `M₁` is not positive definite.
pub fn check_gains(cfg: &GainConfig) -> Result<f64> {
    let n = cfg.k1.len();
    if cfg.k2.nrows() != n || cfg.k2.ncols() != n {
        return Err(Error::config(
            "critic.K2",
            format!("expected {n}x{n}, got {}x{}", cfg.k2.nrows(), cfg.k2.ncols()),
        ));
    }
    if (&cfg.k2 - cfg.k2.transpose()).abs().max() > crate::linalg::SYMMETRY_TOL {
        return Err(Error::config("critic.K2", "must be symmetric"));
    }
    let mut m = DMatrix::zeros(n + 1, n + 1);
    m[(0, 0)] = 1.0;
    for i in 0..n {
        m[(0, i + 1)] = -0.5 * cfg.k1[i];
        m[(i + 1, 0)] = -0.5 * cfg.k1[i];
    }
    m.view_mut((1, 1), (n, n)).copy_from(&cfg.k2);
    let lam = min_eig_sym(&m).map_err(|e| Error::config("critic.K2", e.to_string()))?;
    if lam <= 0.0 {
        return Err(Error::config(
            "critic.K2",
            format!("M1 not positive definite (lambda_min = {lam:e})"),
        ));
    }
    Ok(lam)
}

/// `Δϑ = e^{−γT} ϑ_now − ϑ_then`.
pub fn delta_theta(
    theta_now: &DVector<f64>,
    theta_then: &DVector<f64>,
    gamma: f64,
    interval: f64,
) -> DVector<f64> {
    theta_now * (-gamma * interval).exp() - theta_then
}

/// `m_s = 1 + ΔϑᵀΔϑ`, `φ = Δϑ/m_s`, `ϑ̄ = Δϑ/m_s²`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizers {
    pub m_s: f64,
    pub phi: DVector<f64>,
    pub theta_bar: DVector<f64>,
}

pub fn normalizers(delta: &DVector<f64>) -> Normalizers {
    let m_s = 1.0 + delta.norm_squared();
    Normalizers {
        m_s,
        phi: delta / m_s,
        theta_bar: delta / (m_s * m_s),
    }
}

/// One sample of the IRL window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub t: f64,
    pub z: DVector<f64>,
    pub theta: DVector<f64>,
    /// `Q(z) + Û(û)` at this instant.
    pub reward: f64,
    /// `M = ∇ϑ Ĝ u_m (tanh τ − sgn τ)` at this instant.
    pub m: DVector<f64>,
}

/// Sliding window of `T/dt + 1` equally spaced samples spanning `[t − T, t]`.
#[derive(Debug, Clone)]
pub struct IrlWindow {
    samples: VecDeque<WindowSample>,
    intervals: usize,
    dt: f64,
}

/// Window terms evaluated once the window is full.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowTerms {
    /// `∫ e^{−γ(τ−t+T)} [Q + Û] dτ`
    pub reward_integral: f64,
    /// `∫ e^{−γ(τ−t+T)} M dτ`
    pub m_integral: DVector<f64>,
    pub delta_theta: DVector<f64>,
}

impl IrlWindow {
    /// `interval` must be a positive integer multiple of `dt`.
    pub fn new(interval: f64, dt: f64) -> Result<Self> {
        let intervals = intervals_per_window(interval, dt)?;
        Ok(IrlWindow {
            samples: VecDeque::with_capacity(intervals + 1),
            intervals,
            dt,
        })
    }

    pub fn push(&mut self, sample: WindowSample) -> Result<()> {
        if let Some(last) = self.samples.back() {
            if !(sample.t > last.t) {
                return Err(Error::Domain(format!(
                    "window timestamps must increase ({} after {})",
                    sample.t, last.t
                )));
            }
        }
        self.samples.push_back(sample);
        while self.samples.len() > self.intervals + 1 {
            self.samples.pop_front();
        }
        Ok(())
    }

    pub fn is_full(&self) -> bool {
        self.samples.len() == self.intervals + 1
    }

    pub fn samples(&self) -> impl Iterator<Item = &WindowSample> {
        self.samples.iter()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn span(&self) -> f64 {
        match (self.samples.front(), self.samples.back()) {
            (Some(a), Some(b)) => b.t - a.t,
            _ => 0.0,
        }
    }

    /// Discount weights `e^{−γ(τ_k − (t − T))}` on the window grid.
    fn weights(&self, gamma: f64) -> impl Iterator<Item = f64> + '_ {
        let dt = self.dt;
        (0..self.samples.len()).map(move |k| (-gamma * k as f64 * dt).exp())
    }

    /// Trapezoidal window integrals and `Δϑ`; `None` until the window is full.
    pub fn terms(&self, gamma: f64) -> Option<WindowTerms> {
        if !self.is_full() {
            return None;
        }
        let n = self.samples.len();
        let h = self.dt;
        let mut reward = 0.0;
        let mut m_int = DVector::zeros(self.samples[0].m.len());
        for (k, (s, w)) in self.samples.iter().zip(self.weights(gamma)).enumerate() {
            let c = if k == 0 || k == n - 1 { 0.5 * h } else { h };
            reward += c * w * s.reward;
            m_int.axpy(c * w, &s.m, 1.0);
        }
        let interval = self.intervals as f64 * h;
        let first = &self.samples[0];
        let last = &self.samples[n - 1];
        Some(WindowTerms {
            reward_integral: reward,
            m_integral: m_int,
            delta_theta: delta_theta(&last.theta, &first.theta, gamma, interval),
        })
    }

    /// Instantaneous HJB error `ê = ∫(Q + Û) + ŴᵀΔϑ`; `None` before the
    /// first full window.
    pub fn hjb_error(&self, w_hat: &DVector<f64>, gamma: f64) -> Option<f64> {
        self.terms(gamma)
            .map(|t| t.reward_integral + w_hat.dot(&t.delta_theta))
    }
}

/// Number of `dt` steps in an IRL interval; errors unless `T/dt` is integral.
pub fn intervals_per_window(interval: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0) || !(interval > 0.0) {
        return Err(Error::config("critic.T", "T and dt must be > 0"));
    }
    let ratio = interval / dt;
    let n = ratio.round();
    if n < 1.0 || (ratio - n).abs() > 1e-9 * ratio.max(1.0) {
        return Err(Error::config(
            "critic.T",
            format!("T not a multiple of dt (T = {interval}, dt = {dt})"),
        ));
    }
    Ok(n as usize)
}

/// `Σ = Ŵᵀ ∇ϑ ż` and the indicator `Ξ` (0 when `Σ < 0`, else 1).
pub fn sigma_and_indicator(w_hat: &DVector<f64>, grad: &DMatrix<f64>, z_dot: &DVector<f64>) -> (f64, u8) {
    let sigma = w_hat.dot(&(grad * z_dot));
    (sigma, if sigma < 0.0 { 0 } else { 1 })
}

/// `½ ∇ϑ Ĝ R⁻¹ (I − 𝓑) Ĝᵀ ∇ϑᵀ Ŵ − ∇ϑ ż`, with `𝓑 = diag(tanh² τ_i)` and
/// `τ` computed from the same `Ŵ`, `Ĝ`, `∇ϑ`.
///
/// This is `−∂Σ/∂Ŵ`; the caller scales it by `α Ξ`.
pub fn stabilizing_term(
    w_hat: &DVector<f64>,
    grad: &DMatrix<f64>,
    g_aug: &DMatrix<f64>,
    z_dot: &DVector<f64>,
    spec: &SaturationSpec,
) -> DVector<f64> {
    let tau = policy::tau(w_hat, g_aug, grad, spec);
    let mut inner = g_aug.transpose() * (grad.transpose() * w_hat);
    for i in 0..inner.len() {
        let th = tau[i].tanh();
        inner[i] *= (1.0 - th * th) / spec.r[i];
    }
    grad * (g_aug * inner) * 0.5 - grad * z_dot
}

/// `sgn` with `sgn(0) = 0`.
fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `M = ∇ϑ Ĝ u_m (tanh τ − sgn τ)`.
pub fn m_vector(grad: &DMatrix<f64>, g_aug: &DMatrix<f64>, tau: &DVector<f64>, u_max: f64) -> DVector<f64> {
    let gap = tau.map(|t| u_max * (t.tanh() - sgn(t)));
    grad * (g_aug * gap)
}

/// `|ê|^{k₂} + l`, with `|0|⁰ = 1`.
pub fn variable_gain(e_hat: f64, exponent: f64, offset: f64) -> f64 {
    let mag = if exponent == 0.0 {
        1.0
    } else {
        e_hat.abs().powf(exponent)
    };
    mag + offset
}

/// Critic weight derivative:
///
/// ```text
/// Ŵ̇ = −α g ϑ̄ ê + α Ξ stab + α g ((K₁ φᵀ − K₂) Ŵ − ϑ̄ Ŵᵀ∫e^{−γ(τ−t+T)} M dτ)
/// ```
///
/// with `g = |ê|^{k₂} + l`.
#[allow(clippy::too_many_arguments)]
pub fn critic_update_derivative(
    w_hat: &DVector<f64>,
    e_hat: f64,
    delta: &DVector<f64>,
    xi: u8,
    stab: &DVector<f64>,
    m_integral: &DVector<f64>,
    cfg: &GainConfig,
) -> DVector<f64> {
    let norm = normalizers(delta);
    let g = variable_gain(e_hat, cfg.exponent, cfg.offset);
    let a = cfg.alpha;
    let wm = w_hat.dot(m_integral);

    let mut out = &norm.theta_bar * (-a * g * e_hat);
    if xi != 0 {
        out.axpy(a, stab, 1.0);
    }
    let robust = &cfg.k1 * norm.phi.dot(w_hat) - &cfg.k2 * w_hat - &norm.theta_bar * wm;
    out.axpy(a * g, &robust, 1.0);
    out
}

/// Inputs held fixed while the critic weights are advanced over one step.
#[derive(Debug, Clone, Copy)]
pub struct CriticStepInputs<'a> {
    pub terms: &'a WindowTerms,
    pub grad: &'a DMatrix<f64>,
    pub g_aug: &'a DMatrix<f64>,
    pub z_dot: &'a DVector<f64>,
    pub spec: &'a SaturationSpec,
    pub gains: &'a GainConfig,
}

impl CriticStepInputs<'_> {
    /// `(Ŵ̇, ê)` at `w`, with `Ξ` re-evaluated at `w`.
    pub fn derivative(&self, w: &DVector<f64>) -> (DVector<f64>, f64, DVector<f64>, f64) {
        let e = self.terms.reward_integral + w.dot(&self.terms.delta_theta);
        let (sigma, xi) = sigma_and_indicator(w, self.grad, self.z_dot);
        let stab = stabilizing_term(w, self.grad, self.g_aug, self.z_dot, self.spec);
        let wd = critic_update_derivative(
            w,
            e,
            &self.terms.delta_theta,
            xi,
            &stab,
            &self.terms.m_integral,
            self.gains,
        );
        let active = if xi != 0 { stab } else { DVector::zeros(w.len()) };
        (wd, e, active, sigma)
    }

    /// Largest forward Euler step that keeps the `ê`-driven part of the
    /// update contractive at `w`.
    fn stable_step(&self, e: f64, stab_active: bool) -> f64 {
        let gains = self.gains;
        let norm = normalizers(&self.terms.delta_theta);
        let g = variable_gain(e, gains.exponent, gains.offset);
        let dg = if gains.exponent == 0.0 {
            gains.offset
        } else {
            (1.0 + gains.exponent) * e.abs().powf(gains.exponent) + gains.offset
        };
        let mut rate = dg * self.terms.delta_theta.norm_squared() / (norm.m_s * norm.m_s);
        rate += g * (gains.k2.norm() + gains.k1.norm() * norm.phi.norm());
        rate += g * norm.theta_bar.norm() * self.terms.m_integral.norm();
        if stab_active {
            let gg = self.grad * self.g_aug;
            let r_min = self.spec.r.min();
            rate += 0.5 * gg.norm_squared() / r_min;
        }
        let rate = gains.alpha * rate;
        if rate > 0.0 {
            0.5 / rate
        } else {
            f64::INFINITY
        }
    }
}

/// Advance `w` by `dt` with forward Euler substeps.
///
/// With `max_substeps = 1` this is a single explicit step from the step
/// start. Otherwise the step is split whenever the variable-gain term would
/// be unstable, or the stabilizing term would carry `Σ` past zero.
/// Returns `(Ŵ(t+dt), substeps)`.
pub fn advance_critic(
    w: &DVector<f64>,
    inputs: &CriticStepInputs<'_>,
    dt: f64,
    max_substeps: usize,
) -> (DVector<f64>, usize) {
    let h_min = dt / max_substeps.max(1) as f64;
    let mut w = w.clone();
    let mut remaining = dt;
    let mut count = 0;
    while remaining > 1e-15 * dt {
        let (wd, e, stab, sigma) = inputs.derivative(&w);
        let mut h = remaining;
        if max_substeps > 1 {
            let active = stab.iter().any(|&v| v != 0.0);
            h = h.min(inputs.stable_step(e, active));
            if active {
                let push = inputs.gains.alpha * stab.norm_squared();
                if push > 0.0 {
                    h = h.min(sigma.max(0.0) / push);
                }
            }
            h = h.max(h_min).min(remaining);
            if count + 1 >= max_substeps {
                h = remaining;
            }
        }
        w.axpy(h, &wd, 1.0);
        remaining -= h;
        count += 1;
    }
    (w, count)
}

/// `Γ = ½(1 − γ₁) + sqrt(¼(1 − γ₁)² − γ₁)` for `0 ≤ γ₁ ≤ 3 − √8`.
pub fn uub_gamma(gamma1: f64) -> Result<f64> {
    let upper = 3.0 - 8f64.sqrt();
    if !(gamma1 >= 0.0 && gamma1 <= upper + 1e-15) {
        return Err(Error::Domain(format!(
            "gamma1 must lie in [0, 3 - sqrt(8)], got {gamma1}"
        )));
    }
    let half = 0.5 * (1.0 - gamma1);
    let disc = (half * half - gamma1).max(0.0);
    Ok(half + disc.sqrt())
}
