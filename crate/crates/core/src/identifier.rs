//! Online plant identification with filtered regressors and experience replay.
//!
//! The plant is parameterised as `ẋ = W₁ᵀ Φ(x, u)` with
//! `Φ = [ξ₁(x); ξ₂(x) u]`. Low-pass filtering both `Φ` and `x` with time
//! constant `k_f` yields `ẋ_f = (x − x_f)/k_f` without differentiating any
//! measurement. The Gram matrix `Π` and cross term `K` accumulate
//! `Φ_f Φ_fᵀ` and `Φ_f ẋ_fᵀ` with forgetting rate `l_f`, so that
//! `K = Π W₁` for an exactly representable plant and `M₁ = Π Ŵ₁ − K`
//! measures the weight error directly.
//!
//! The replay stack keeps snapshots `(Π_j, K_j)` and adds
//! `Σ Π_j Ŵ₁ − Σ K_j` to the update, which keeps `P = Π + Σ Π_j` positive
//! definite once enough independent snapshots have been recorded.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::min_eig_sym;

/// Regressor pair `(ξ₁, ξ₂)` used by the identifier.
pub trait IdentifierBasis: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    /// `k_w1`
    fn drift_dim(&self) -> usize;
    /// `k_w2`
    fn control_dim(&self) -> usize;
    /// `ξ₁(x) ∈ ℝ^{k_w1}`
    fn drift(&self, x: &DVector<f64>) -> DVector<f64>;
    /// `ξ₂(x) ∈ ℝ^{k_w2 × m}`
    fn control(&self, x: &DVector<f64>) -> DMatrix<f64>;

    fn regressor_dim(&self) -> usize {
        self.drift_dim() + self.control_dim()
    }
}

/// `ξ₁ = (x1, x2, x1³)`, `ξ₂ = (1)`: represents the spring–damper exactly.
#[derive(Debug, Clone, Copy, Default)]
pub struct SpringDamperBasis;

impl IdentifierBasis for SpringDamperBasis {
    fn state_dim(&self) -> usize {
        2
    }
    fn input_dim(&self) -> usize {
        1
    }
    fn drift_dim(&self) -> usize {
        3
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(vec![x[0], x[1], x[0].powi(3)])
    }
    fn control(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, 1.0)
    }
}

/// Combined regressor `Φ = [ξ₁(x); ξ₂(x) u]`.
pub fn regressor(basis: &dyn IdentifierBasis, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
    if x.len() != basis.state_dim() {
        return Err(Error::config(
            "identifier.basis",
            format!("basis expects {} states, got {}", basis.state_dim(), x.len()),
        ));
    }
    if u.len() != basis.input_dim() {
        return Err(Error::config(
            "identifier.basis",
            format!("basis expects {} inputs, got {}", basis.input_dim(), u.len()),
        ));
    }
    let drift = basis.drift(x);
    let ctrl = basis.control(x) * u;
    let mut phi = DVector::zeros(drift.len() + ctrl.len());
    phi.rows_mut(0, drift.len()).copy_from(&drift);
    phi.rows_mut(drift.len(), ctrl.len()).copy_from(&ctrl);
    Ok(phi)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentifierState {
    /// `Ŵ₁`, `(k_w1 + k_w2) × n`
    pub w_hat: DMatrix<f64>,
    pub phi_f: DVector<f64>,
    pub x_f: DVector<f64>,
    /// `Π`
    pub pi: DMatrix<f64>,
    /// `K`
    pub k: DMatrix<f64>,
}

impl IdentifierState {
    /// Zero filters and Gram terms, `Π(0) = 0`, `K(0) = 0`.
    pub fn zeros(regressor_dim: usize, state_dim: usize) -> Self {
        IdentifierState {
            w_hat: DMatrix::zeros(regressor_dim, state_dim),
            phi_f: DVector::zeros(regressor_dim),
            x_f: DVector::zeros(state_dim),
            pi: DMatrix::zeros(regressor_dim, regressor_dim),
            k: DMatrix::zeros(regressor_dim, state_dim),
        }
    }

    pub fn regressor_dim(&self) -> usize {
        self.phi_f.len()
    }

    pub fn state_dim(&self) -> usize {
        self.x_f.len()
    }
}

/// `(Φ̇_f, ẋ_f) = ((Φ − Φ_f)/k_f, (x − x_f)/k_f)`.
pub fn filter_derivatives(
    phi: &DVector<f64>,
    x: &DVector<f64>,
    state: &IdentifierState,
    k_f: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if !(k_f > 0.0) {
        return Err(Error::config("identifier.k_f", format!("must be > 0, got {k_f}")));
    }
    Ok(((phi - &state.phi_f) / k_f, (x - &state.x_f) / k_f))
}

/// `(Π̇, K̇) = (−l_f Π + Φ_f Φ_fᵀ, −l_f K + Φ_f ẋ_fᵀ)`.
pub fn gram_derivatives(
    state: &IdentifierState,
    xf_dot: &DVector<f64>,
    l_f: f64,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let pi_dot = &state.phi_f * state.phi_f.transpose() - &state.pi * l_f;
    let k_dot = &state.phi_f * xf_dot.transpose() - &state.k * l_f;
    (pi_dot, k_dot)
}

/// `M₁ = Π Ŵ₁ − K`.
pub fn m1(state: &IdentifierState) -> DMatrix<f64> {
    &state.pi * &state.w_hat - &state.k
}

/// `Ŵ̇₁ = −Γ₁ (M₁ + Σ Π_j Ŵ₁ − Σ K_j)`.
///
/// Stored snapshots are combined with the current `Ŵ₁`. Each snapshot
/// residual `Π_j Ŵ₁ − K_j` is formed separately, so the derivative is exactly
/// zero whenever every `K_j = Π_j Ŵ₁`.
pub fn update_derivative(
    state: &IdentifierState,
    stack: Option<&ReplayStack>,
    gamma1: &DMatrix<f64>,
) -> DMatrix<f64> {
    let mut drive = m1(state);
    if let Some(s) = stack {
        for snap in s.snapshots() {
            drive += &snap.pi * &state.w_hat - &snap.k;
        }
    }
    -(gamma1 * drive)
}

/// One backward-Euler step of the update law.
///
/// The law is linear in `Ŵ₁`, `Ŵ̇₁ = −Γ₁(P Ŵ₁ − K_P)` with `P = Π + ΣΠ_j` and
/// `K_P = K + ΣK_j`, so the step solves `(I + dt Γ₁ P) Ŵ₁⁺ = Ŵ₁ + dt Γ₁ K_P`.
/// Stable for any `dt` since `Γ₁ P` has nonnegative eigenvalues.
pub fn implicit_step(
    state: &IdentifierState,
    stack: Option<&ReplayStack>,
    gamma1: &DMatrix<f64>,
    dt: f64,
) -> Result<DMatrix<f64>> {
    let mut p = state.pi.clone();
    let mut k = state.k.clone();
    if let Some(s) = stack.filter(|s| !s.is_empty()) {
        p += &s.sum_pi;
        k += &s.sum_k;
    }
    let n = p.nrows();
    let lhs = DMatrix::identity(n, n) + gamma1 * p * dt;
    let rhs = &state.w_hat + gamma1 * k * dt;
    lhs.lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Domain("singular identifier step matrix".into()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub pi: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub t: f64,
}

/// When to record snapshots.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnapshotPolicy {
    /// s
    pub period: f64,
}

/// Result of one [`ReplayStack::maybe_record`] call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecordOutcome {
    pub recorded: bool,
    /// `λ_min(Σ Π_j)` before the call.
    pub lambda_before: f64,
    /// `λ_min(Σ Π_j)` after the call.
    pub lambda_after: f64,
    /// Index replaced, `None` for an append or a rejection.
    pub replaced: Option<usize>,
}

/// Fixed-capacity memory of `(Π_j, K_j)` snapshots with running sums.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayStack {
    capacity: usize,
    snapshots: Vec<Snapshot>,
    pub sum_pi: DMatrix<f64>,
    pub sum_k: DMatrix<f64>,
    next_due: f64,
}

impl ReplayStack {
    pub fn new(capacity: usize, regressor_dim: usize, state_dim: usize) -> Self {
        ReplayStack {
            capacity,
            snapshots: Vec::with_capacity(capacity),
            sum_pi: DMatrix::zeros(regressor_dim, regressor_dim),
            sum_k: DMatrix::zeros(regressor_dim, state_dim),
            next_due: f64::NAN,
        }
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.snapshots.len() >= self.capacity
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn snapshots(&self) -> &[Snapshot] {
        &self.snapshots
    }

    fn resum(&mut self) {
        self.sum_pi.fill(0.0);
        self.sum_k.fill(0.0);
        for s in &self.snapshots {
            self.sum_pi += &s.pi;
            self.sum_k += &s.k;
        }
    }

    /// `λ_min(Σ Π_j)`; zero for an empty stack.
    pub fn min_eig(&self) -> Result<f64> {
        if self.is_empty() {
            return Ok(0.0);
        }
        min_eig_sym(&self.sum_pi)
    }

    /// Unconditionally append (or, when full, evict the oldest snapshot).
    pub fn push(&mut self, pi: &DMatrix<f64>, k: &DMatrix<f64>, t: f64) {
        if self.capacity == 0 {
            return;
        }
        if self.is_full() {
            self.snapshots.remove(0);
        }
        self.snapshots.push(Snapshot {
            pi: pi.clone(),
            k: k.clone(),
            t,
        });
        self.resum();
    }

    /// Record a snapshot at period boundaries.
    ///
    /// Until the stack is full every due snapshot is appended. Once full,
    /// the candidate replaces the stored snapshot whose replacement gives
    /// the largest `λ_min(Σ Π_j)`, and only if that strictly exceeds the
    /// current value.
    pub fn maybe_record(
        &mut self,
        pi: &DMatrix<f64>,
        k: &DMatrix<f64>,
        t: f64,
        policy: &SnapshotPolicy,
    ) -> Result<RecordOutcome> {
        if self.next_due.is_nan() {
            self.next_due = policy.period;
        }
        let before = self.min_eig()?;
        let rejected = RecordOutcome {
            recorded: false,
            lambda_before: before,
            lambda_after: before,
            replaced: None,
        };
        // half a microsecond of slack absorbs accumulated `t += dt` rounding
        if self.capacity == 0 || t + 5e-7 < self.next_due {
            return Ok(rejected);
        }
        while self.next_due <= t + 5e-7 {
            self.next_due += policy.period;
        }

        if !self.is_full() {
            self.snapshots.push(Snapshot {
                pi: pi.clone(),
                k: k.clone(),
                t,
            });
            self.resum();
            return Ok(RecordOutcome {
                recorded: true,
                lambda_before: before,
                lambda_after: self.min_eig()?,
                replaced: None,
            });
        }

        let mut best: Option<(usize, f64)> = None;
        for (j, s) in self.snapshots.iter().enumerate() {
            let trial = &self.sum_pi - &s.pi + pi;
            let lam = min_eig_sym(&trial)?;
            if best.is_none_or(|(_, b)| lam > b) {
                best = Some((j, lam));
            }
        }
        match best {
            Some((j, lam)) if lam > before => {
                self.snapshots[j] = Snapshot {
                    pi: pi.clone(),
                    k: k.clone(),
                    t,
                };
                self.resum();
                let after = self.min_eig()?;
                // keep the strict-increase contract even if the resummed
                // eigenvalue rounds differently from the trial
                if after > before {
                    Ok(RecordOutcome {
                        recorded: true,
                        lambda_before: before,
                        lambda_after: after,
                        replaced: Some(j),
                    })
                } else {
                    Err(Error::Domain(format!(
                        "snapshot replacement did not increase λ_min ({before:e} -> {after:e})"
                    )))
                }
            }
            _ => Ok(rejected),
        }
    }
}

/// `(f̂(x), ĝ(x))` from the current weights: `f̂ = ŵ₁ ξ₁`, `ĝ = ŵ₂ ξ₂`.
pub fn estimates(
    state: &IdentifierState,
    basis: &dyn IdentifierBasis,
    x: &DVector<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let kw1 = basis.drift_dim();
    let kw2 = basis.control_dim();
    let w1 = state.w_hat.rows(0, kw1);
    let w2 = state.w_hat.rows(kw1, kw2);
    let f_hat = w1.transpose() * basis.drift(x);
    let g_hat = w2.transpose() * basis.control(x);
    (f_hat, g_hat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{plant_derivative, PlantParams, PlantState};

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(x)
    }

    #[test]
    fn regressor_examples() {
        let b = SpringDamperBasis;
        assert_eq!(
            regressor(&b, &v(&[2.0, 1.0]), &v(&[0.5])).unwrap().as_slice(),
            &[2.0, 1.0, 8.0, 0.5]
        );
        assert_eq!(
            regressor(&b, &v(&[0.0, 0.0]), &v(&[0.0])).unwrap().as_slice(),
            &[0.0; 4]
        );
        assert_eq!(
            regressor(&b, &v(&[1.0, -1.0]), &v(&[2.0])).unwrap().as_slice(),
            &[1.0, -1.0, 1.0, 2.0]
        );
    }

    #[test]
    fn regressor_dimension_mismatch() {
        let b = SpringDamperBasis;
        assert!(matches!(
            regressor(&b, &v(&[1.0]), &v(&[0.0])),
            Err(Error::Config { .. })
        ));
        assert!(matches!(
            regressor(&b, &v(&[1.0, 2.0]), &v(&[0.0, 1.0])),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn filter_examples() {
        let mut s = IdentifierState::zeros(4, 2);
        s.phi_f = v(&[1.0, 2.0, 3.0, 4.0]);
        let (dphi, dx) = filter_derivatives(&s.phi_f.clone(), &v(&[1.0, 0.0]), &s, 0.01).unwrap();
        assert_eq!(dphi.norm(), 0.0);
        assert!((dx[0] - 100.0).abs() < 1e-9 && dx[1] == 0.0);
        assert!(filter_derivatives(&s.phi_f.clone(), &v(&[1.0, 0.0]), &s, 0.0).is_err());
    }

    #[test]
    fn filter_lag_time_constant() {
        // explicit first-order lag toward a constant input
        let mut s = IdentifierState::zeros(1, 1);
        let phi = v(&[2.0]);
        let k_f: f64 = 0.05;
        let dt = 1e-5;
        let steps = (k_f / dt).round() as usize;
        for _ in 0..steps {
            let (d, _) = filter_derivatives(&phi, &v(&[0.0]), &s, k_f).unwrap();
            s.phi_f += d * dt;
        }
        // one time constant: 1 - e^{-1}
        let expected = 2.0 * (1.0 - (-1.0f64).exp());
        assert!((s.phi_f[0] - expected).abs() < 1e-4);
    }

    #[test]
    fn gram_examples() {
        let mut s = IdentifierState::zeros(2, 1);
        s.pi = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        s.k = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let (dpi, dk) = gram_derivatives(&s, &v(&[5.0]), 0.5);
        assert_eq!(dpi, &s.pi * -0.5);
        assert_eq!(dk, &s.k * -0.5);
        s.phi_f = v(&[0.3, -0.7]);
        let (dpi, _) = gram_derivatives(&s, &v(&[5.0]), 0.5);
        assert_eq!(dpi, dpi.transpose());
    }

    fn exact_state(params: &PlantParams) -> IdentifierState {
        // K = Π W₁ exactly: the noiseless, exactly-represented case
        let w = params.true_identifier_weights();
        let a = DMatrix::from_fn(4, 4, |i, j| ((i + 2 * j) as f64).sin());
        let pi = &a * a.transpose();
        IdentifierState {
            k: &pi * &w,
            pi,
            w_hat: w,
            phi_f: DVector::zeros(4),
            x_f: DVector::zeros(2),
        }
    }

    #[test]
    fn m1_examples() {
        let p = PlantParams::new(1.0, 3.0, 0.5).unwrap();
        let s = exact_state(&p);
        assert!(m1(&s).norm() < 1e-14);
        let z = IdentifierState::zeros(4, 2);
        assert_eq!(m1(&z).norm(), 0.0);
        let mut s = IdentifierState::zeros(4, 2);
        s.pi = DMatrix::identity(4, 4);
        s.w_hat = p.true_identifier_weights();
        assert_eq!(m1(&s), s.w_hat);
    }

    #[test]
    fn update_examples() {
        let p = PlantParams::new(1.0, 3.0, 0.5).unwrap();
        let g = DMatrix::identity(4, 4) * 7.0;
        let s = exact_state(&p);
        assert!(update_derivative(&s, None, &g).norm() < 1e-13);

        let mut s = IdentifierState::zeros(4, 2);
        s.pi = DMatrix::identity(4, 4) * 2.0;
        s.w_hat = DMatrix::from_element(4, 2, 1.0);
        let d = update_derivative(&s, None, &g);
        assert_eq!(d, m1(&s) * -7.0);

        let mut stack = ReplayStack::new(4, 4, 2);
        stack.push(&DMatrix::identity(4, 4), &DMatrix::zeros(4, 2), 0.5);
        let mut s = IdentifierState::zeros(4, 2);
        s.w_hat = DMatrix::from_fn(4, 2, |i, j| (i * 2 + j) as f64);
        let d = update_derivative(&s, Some(&stack), &DMatrix::identity(4, 4));
        assert_eq!(d, -&s.w_hat);
    }

    #[test]
    fn estimates_examples() {
        let b = SpringDamperBasis;
        let s = IdentifierState::zeros(4, 2);
        let (f, g) = estimates(&s, &b, &v(&[1.0, 1.0]));
        assert_eq!(f.norm(), 0.0);
        assert_eq!(g.norm(), 0.0);

        let p = PlantParams::new(1.0, 3.0, 0.5).unwrap();
        let mut s = IdentifierState::zeros(4, 2);
        s.w_hat = p.true_identifier_weights();
        for x in [[0.0, 0.0], [1.0, 1.0], [-2.0, 0.3]] {
            let (_, g) = estimates(&s, &b, &v(&x));
            assert_eq!(g.as_slice(), &[0.0, 1.0]);
        }
        let (f, _) = estimates(&s, &b, &v(&[1.0, 1.0]));
        let d = plant_derivative(&PlantState::new(1.0, 1.0), 0.0, &p).unwrap();
        assert!((f[1] - (-3.5)).abs() < 1e-14);
        assert_eq!(f.as_slice(), &[d.x1, d.x2]);
    }

    fn rank_one(dir: &[f64], scale: f64) -> DMatrix<f64> {
        let d = v(dir);
        &d * d.transpose() * scale
    }

    #[test]
    fn record_until_full_then_improve_only() {
        let policy = SnapshotPolicy { period: 0.5 };
        let mut stack = ReplayStack::new(2, 2, 1);
        let k = DMatrix::zeros(2, 1);

        // not yet due
        let out = stack
            .maybe_record(&rank_one(&[1.0, 0.0], 1.0), &k, 0.2, &policy)
            .unwrap();
        assert!(!out.recorded);

        let out = stack
            .maybe_record(&rank_one(&[1.0, 0.0], 1.0), &k, 0.5, &policy)
            .unwrap();
        assert!(out.recorded);
        let out = stack
            .maybe_record(&rank_one(&[1.0, 0.0], 1.0), &k, 1.0, &policy)
            .unwrap();
        assert!(out.recorded && stack.is_full());
        assert!(stack.min_eig().unwrap().abs() < 1e-12);

        // full: a candidate that cannot raise λ_min is rejected
        let out = stack
            .maybe_record(&rank_one(&[1.0, 0.0], 0.5), &k, 1.5, &policy)
            .unwrap();
        assert!(!out.recorded);
        assert_eq!(stack.len(), 2);

        // full: an orthogonal direction raises λ_min and is accepted
        let out = stack
            .maybe_record(&rank_one(&[0.0, 1.0], 3.0), &k, 2.0, &policy)
            .unwrap();
        assert!(out.recorded);
        assert!(out.lambda_after > out.lambda_before);
        let direct = min_eig_sym(&stack.sum_pi).unwrap();
        assert!((direct - 1.0).abs() < 1e-10, "λ_min = {direct}");
        assert!(out.replaced.is_some());
    }

    #[test]
    fn stack_sums_match_snapshots() {
        let policy = SnapshotPolicy { period: 0.1 };
        let mut stack = ReplayStack::new(3, 2, 2);
        for i in 1..20 {
            let t = i as f64 * 0.1;
            let pi = rank_one(&[t.cos(), t.sin()], 1.0 + t);
            let k = DMatrix::from_element(2, 2, t);
            stack.maybe_record(&pi, &k, t, &policy).unwrap();
            assert!(stack.len() <= stack.capacity());
            let mut sp = DMatrix::zeros(2, 2);
            let mut sk = DMatrix::zeros(2, 2);
            for s in stack.snapshots() {
                sp += &s.pi;
                sk += &s.k;
            }
            assert!((sp - &stack.sum_pi).abs().max() < 1e-12);
            assert!((sk - &stack.sum_k).abs().max() < 1e-12);
        }
    }
}
