//! Saturated control and the associated non-quadratic utility.
//!
//! With `ψ = tanh`, the constrained utility
//! `U(u) = 2 u_m ∫₀ᵘ atanh(ν/u_m)ᵀ R dν` admits a closed form at the optimal
//! policy `u = -u_m tanh(τ)`. Both forms are provided; the quadrature form
//! exists to cross-check the closed form.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Control bound and diagonal input penalty.
#[derive(Debug, Clone, PartialEq)]
pub struct SaturationSpec {
    pub u_max: f64,
    /// Diagonal of `R`.
    pub r: DVector<f64>,
}

impl SaturationSpec {
    pub fn new(u_max: f64, r: Vec<f64>) -> Result<Self> {
        if !(u_max > 0.0) || !u_max.is_finite() {
            return Err(Error::Domain(format!("u_max must be > 0, got {u_max}")));
        }
        if r.is_empty() || r.iter().any(|&ri| !(ri > 0.0) || !ri.is_finite()) {
            return Err(Error::Domain("R diagonal must be strictly positive".into()));
        }
        Ok(SaturationSpec {
            u_max,
            r: DVector::from_vec(r),
        })
    }

    pub fn inputs(&self) -> usize {
        self.r.len()
    }
}

/// Pre-saturation argument `τ = (1/2u_m) R⁻¹ Gᵀ ∇ϑᵀ W`.
///
/// `grad` is the `N₁ × dim(z)` critic Jacobian and `g_aug` the
/// `dim(z) × m` augmented control matrix.
pub fn tau(
    weights: &DVector<f64>,
    g_aug: &DMatrix<f64>,
    grad: &DMatrix<f64>,
    spec: &SaturationSpec,
) -> DVector<f64> {
    let value_grad = grad.transpose() * weights;
    let mut t = g_aug.transpose() * value_grad;
    for (ti, ri) in t.iter_mut().zip(spec.r.iter()) {
        *ti /= 2.0 * spec.u_max * ri;
    }
    t
}

/// `û = -u_m tanh(τ)`.
pub fn control(tau: &DVector<f64>, spec: &SaturationSpec) -> DVector<f64> {
    tau.map(|t| -spec.u_max * t.tanh())
}

/// `ln(1 - tanh²τ)`, evaluated as `-2 ln cosh τ` so it stays finite for any
/// finite `τ`.
fn ln_sech_sq(t: f64) -> f64 {
    let a = t.abs();
    -2.0 * (a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2)
}

/// Closed-form utility at `u = -u_m tanh(τ)`:
/// `2u_m² τᵀR tanh τ + u_m² Σ R_i ln(1 - tanh² τ_i)`.
pub fn utility_closed(tau: &DVector<f64>, spec: &SaturationSpec) -> f64 {
    let um2 = spec.u_max * spec.u_max;
    tau.iter()
        .zip(spec.r.iter())
        .map(|(&t, &r)| 2.0 * um2 * r * t * t.tanh() + um2 * r * ln_sech_sq(t))
        .sum::<f64>()
        // the exact value is nonnegative; clip rounding below zero
        .max(0.0)
}

/// Absolute tolerance of the adaptive Simpson oracle.
pub const QUADRATURE_TOL: f64 = 1e-10;

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn adaptive_simpson(
    f: &impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    adaptive_simpson(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
        + adaptive_simpson(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}

/// Adaptive Simpson integral of `f` over `[a, b]`.
pub fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    let fa = f(a);
    let fb = f(b);
    let fm = f(0.5 * (a + b));
    let whole = simpson(a, b, fa, fm, fb);
    adaptive_simpson(&f, a, b, fa, fm, fb, whole, tol, 50)
}

/// Utility by direct quadrature of `2 u_m R_i atanh(ν/u_m)` per channel.
pub fn utility_quadrature(u: &DVector<f64>, spec: &SaturationSpec) -> Result<f64> {
    if u.len() != spec.inputs() {
        return Err(Error::Domain(format!(
            "control has {} channels, R has {}",
            u.len(),
            spec.inputs()
        )));
    }
    let um = spec.u_max;
    let mut total = 0.0;
    for (&ui, &ri) in u.iter().zip(spec.r.iter()) {
        if !(ui.abs() < um) {
            return Err(Error::Domain(format!(
                "|u| = {} must be < u_max = {um}",
                ui.abs()
            )));
        }
        total += integrate(|v| 2.0 * um * ri * (v / um).atanh(), 0.0, ui, QUADRATURE_TOL);
    }
    Ok(total)
}

/// State penalty `eᵀ Q e`, where `e` is the leading error block of `z`.
pub fn q_cost(z: &DVector<f64>, q: &DMatrix<f64>) -> f64 {
    let e = z.rows(0, q.nrows());
    (e.transpose() * q * e)[(0, 0)]
}

/// `(‖tanh τa − tanh τb‖, T_m)` with `T_m = sqrt(Σ min(|τa_i − τb_i|², 4))`.
pub fn tanh_diff_bound(tau_a: &DVector<f64>, tau_b: &DVector<f64>) -> (f64, f64) {
    let lhs = tau_a
        .iter()
        .zip(tau_b.iter())
        .map(|(a, b)| (a.tanh() - b.tanh()).powi(2))
        .sum::<f64>()
        .sqrt();
    let tm = tau_a
        .iter()
        .zip(tau_b.iter())
        .map(|(a, b)| (a - b).powi(2).min(4.0))
        .sum::<f64>()
        .sqrt();
    (lhs, tm)
}
