//! Fixed-step closed-loop simulation of plant, identifier, and critic.
//!
//! Each step:
//! 1. measure `x`, build `z`, evaluate `ĝ`, `τ`, and the saturated policy;
//! 2. add the probing signal and clip to `±u_m`;
//! 3. evaluate the learner derivatives at the start of the step;
//! 4. advance plant, filters, `Π`, `K` by RK4 with the control held;
//! 5. advance `Ŵ₁`, `Ŵ` by forward Euler and offer a replay snapshot.
//!
//! Parameter switches take effect between steps, so a step starting at a
//! switch instant already integrates the new plant.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::critic::{self, CriticBasis, GainConfig, IrlWindow, PolynomialCriticBasis, WindowSample};
use crate::error::{Error, Result};
use crate::identifier::{
    self, IdentifierBasis, IdentifierState, ReplayStack, SnapshotPolicy, SpringDamperBasis,
};
use crate::linalg::min_eig_sym;
use crate::models::{self, ParameterSchedule, PlantParams, PlantState};
use crate::ode::{rk4_step, OdeState};
use crate::policy::{self, SaturationSpec};

/// Additive excitation `A/n Σ sin(2π f_i t + φ_i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub enabled: bool,
    /// N
    pub amplitude: f64,
    /// Hz
    pub frequencies: Vec<f64>,
    /// Draw phases from the run seed instead of starting every sine at zero.
    #[serde(default)]
    pub random_phase: bool,
}

impl ProbeConfig {
    pub fn disabled() -> Self {
        ProbeConfig {
            enabled: false,
            amplitude: 0.0,
            frequencies: Vec::new(),
            random_phase: false,
        }
    }
}

/// Probing signal generator with its phases fixed at construction.
#[derive(Debug, Clone)]
pub struct Probe {
    cfg: ProbeConfig,
    phases: Vec<f64>,
}

impl Probe {
    pub fn new(cfg: ProbeConfig, seed: u64) -> Self {
        let phases = if cfg.random_phase {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            cfg.frequencies
                .iter()
                .map(|_| rng.gen_range(0.0..2.0 * PI))
                .collect()
        } else {
            vec![0.0; cfg.frequencies.len()]
        };
        Probe { cfg, phases }
    }

    pub fn at(&self, t: f64) -> f64 {
        probe_signal(t, &self.cfg, &self.phases)
    }
}

/// Sum of sinusoids bounded by the configured amplitude; zero when disabled.
pub fn probe_signal(t: f64, cfg: &ProbeConfig, phases: &[f64]) -> f64 {
    if !cfg.enabled || cfg.frequencies.is_empty() {
        return 0.0;
    }
    let n = cfg.frequencies.len() as f64;
    let s: f64 = cfg
        .frequencies
        .iter()
        .enumerate()
        .map(|(i, f)| (2.0 * PI * f * t + phases.get(i).copied().unwrap_or(0.0)).sin())
        .sum();
    cfg.amplitude * s / n
}

/// `clip(û + probe, −u_m, u_m)`.
pub fn apply_probe(u_hat: f64, probe: f64, u_max: f64) -> f64 {
    (u_hat + probe).clamp(-u_max, u_max)
}

/// Discretization of the identifier weight update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightStep {
    ForwardEuler,
    /// Backward Euler on the linear update law; see [`identifier::implicit_step`].
    BackwardEuler,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentifierConfig {
    /// Filter time constant `k_f`, s.
    pub k_f: f64,
    /// Forgetting rate `l_f`, 1/s.
    pub l_f: f64,
    /// `Γ₁ = gamma1 · I`.
    pub gamma1: f64,
    /// Replay stack size `N`.
    pub capacity: usize,
    pub snapshot_period: f64,
    pub er_enabled: bool,
    /// Initial `Ŵ₁`; zero when absent.
    pub w_init: Option<DMatrix<f64>>,
    pub step: WeightStep,
}

impl Default for IdentifierConfig {
    fn default() -> Self {
        IdentifierConfig {
            k_f: 0.005,
            l_f: 1.0,
            gamma1: 100.0,
            capacity: 10,
            snapshot_period: 0.5,
            er_enabled: true,
            w_init: None,
            step: WeightStep::BackwardEuler,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub dt: f64,
    pub duration: f64,
    pub schedule: ParameterSchedule,
    pub x0: PlantState,
    /// Position setpoint, m.
    pub x1d: f64,
    pub identifier: IdentifierConfig,
    pub gains: GainConfig,
    /// Penalty on the tracking-error block of `z`.
    pub q: DMatrix<f64>,
    pub saturation: SaturationSpec,
    pub critic_w_init: DVector<f64>,
    /// Upper bound on critic substeps per `dt`; 1 gives plain forward Euler.
    pub critic_max_substeps: usize,
    pub probe: ProbeConfig,
    pub seed: u64,
}

impl SimConfig {
    /// The 45 s setpoint benchmark with default gains and probing off.
    pub fn benchmark() -> Self {
        let n = PolynomialCriticBasis.len();
        SimConfig {
            dt: 1e-3,
            duration: 45.0,
            schedule: ParameterSchedule::benchmark(),
            x0: PlantState::new(0.0, 0.0),
            x1d: 1.0,
            identifier: IdentifierConfig::default(),
            gains: GainConfig::defaults(n),
            q: DMatrix::from_element(1, 1, 10.0),
            saturation: SaturationSpec::new(2.0, vec![1.0]).expect("valid saturation"),
            critic_w_init: DVector::zeros(n),
            critic_max_substeps: 1,
            probe: ProbeConfig::disabled(),
            seed: 0,
        }
    }

    pub fn steps(&self) -> usize {
        (self.duration / self.dt).round() as usize
    }

    pub fn validate(&self) -> Result<f64> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::config("sim.dt", "must be > 0"));
        }
        if !(self.duration > 0.0) || !self.duration.is_finite() {
            return Err(Error::config("sim.duration", "must be > 0"));
        }
        let ratio = self.duration / self.dt;
        if (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) {
            return Err(Error::config("sim.duration", "duration not a multiple of dt"));
        }
        critic::intervals_per_window(self.gains.interval, self.dt)?;
        let id = &self.identifier;
        if !(id.k_f > 0.0) {
            return Err(Error::config("identifier.k_f", "must be > 0"));
        }
        if !(id.l_f > 0.0) {
            return Err(Error::config("identifier.l_f", "must be > 0"));
        }
        if !(id.gamma1 > 0.0) || !id.gamma1.is_finite() {
            return Err(Error::config(
                "identifier.gamma1",
                "must be > 0 (Γ₁ positive definite)",
            ));
        }
        if id.er_enabled && id.capacity == 0 {
            return Err(Error::config(
                "identifier.N",
                "must be >= 1 when replay is enabled",
            ));
        }
        if !(id.snapshot_period > 0.0) {
            return Err(Error::config("identifier.snapshot_period", "must be > 0"));
        }
        if let Some(w) = &id.w_init {
            if w.shape() != (4, 2) {
                return Err(Error::config("identifier.W_init", "expected a 4x2 matrix"));
            }
        }
        if self.critic_max_substeps == 0 {
            return Err(Error::config("critic.max_substeps", "must be >= 1"));
        }
        if self.critic_w_init.len() != self.gains.k1.len() {
            return Err(Error::config(
                "critic.W_init",
                "length must match the critic basis",
            ));
        }
        if !self.x0.is_finite() || !self.x1d.is_finite() {
            return Err(Error::config("plant.x0", "must be finite"));
        }
        if self.q.nrows() != 1 || self.q.ncols() != 1 || !(self.q[(0, 0)] >= 0.0) {
            return Err(Error::config("critic.Q", "must be a nonnegative scalar"));
        }
        if self.probe.enabled && !(self.probe.amplitude >= 0.0) {
            return Err(Error::config("sim.probe.amplitude", "must be >= 0"));
        }
        self.gains.validate()
    }
}

/// Continuous part of the closed loop, integrated by RK4.
#[derive(Debug, Clone)]
struct Continuous {
    x: DVector<f64>,
    phi_f: DVector<f64>,
    x_f: DVector<f64>,
    pi: DMatrix<f64>,
    k: DMatrix<f64>,
}

impl OdeState for Continuous {
    fn axpy(&mut self, a: f64, o: &Self) {
        self.x.axpy(a, &o.x, 1.0);
        self.phi_f.axpy(a, &o.phi_f, 1.0);
        self.x_f.axpy(a, &o.x_f, 1.0);
        self.pi += &o.pi * a;
        self.k += &o.k * a;
    }
}

/// One row of the run record plus internal diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub t: f64,
    pub x1: f64,
    pub x2: f64,
    pub x1d: f64,
    pub x2d: f64,
    /// Applied control after probing and clipping.
    pub u: f64,
    pub z1: f64,
    pub z2: f64,
    /// Instantaneous HJB error; 0 before the first full window.
    pub e_hjb: f64,
    pub sigma: f64,
    pub xi: u8,
    pub w: Vec<f64>,
    /// `Ŵ₁` flattened row-major.
    pub w_id: Vec<f64>,
    pub g_tilde_norm: f64,
    pub lambda_min_p: f64,
    // diagnostics not written to CSV
    pub u_hat: f64,
    pub w_dot_norm: f64,
    pub phi_norm: f64,
    pub theta_bar_norm: f64,
    pub id_error_norm: f64,
    pub window_ready: bool,
    pub critic_substeps: usize,
}

/// Aggregate results of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentMetrics {
    pub start: f64,
    pub end: f64,
    pub mass: f64,
    pub spring: f64,
    pub damping: f64,
    /// Mean `|x1 − x1d|` over the last 3 s of the segment.
    pub tracking_error: f64,
    /// Mean `x1` over the last 3 s of the segment.
    pub mean_x1: f64,
    /// Position where the largest admissible control balances the spring,
    /// `(u_m/k)^{1/3}`.
    pub reachable_x1: f64,
    /// Mean `‖g − ĝ‖` over the last 2 s of the segment.
    pub g_tilde: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub steps: usize,
    pub rows: usize,
    pub max_abs_u: f64,
    pub final_g_tilde_norm: f64,
    pub final_identifier_error: f64,
    pub segments: Vec<SegmentMetrics>,
    pub max_critic_norm: f64,
    /// Mean `‖Ŵ̇‖` over the first and last 5 s.
    pub critic_rate_first: f64,
    pub critic_rate_last: f64,
    /// Time after which `‖Ŵ − Ŵ_final‖ ≤ 5 % ‖Ŵ_final‖` holds to the end.
    pub critic_settling_time: f64,
    pub max_phi_norm: f64,
    pub max_theta_bar_norm: f64,
    pub snapshots_accepted: usize,
    /// Accepted snapshots that lowered `λ_min(Σ Π_j)`.
    pub lambda_violations: usize,
    /// Steps where `Π` failed the symmetry or PSD check.
    pub pi_monitor_trips: usize,
    pub final_lambda_min_p: f64,
}

/// `λ_min(ΣΠ_j)` before/after one accepted snapshot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnapshotEvent {
    pub t: f64,
    pub lambda_before: f64,
    pub lambda_after: f64,
    pub replaced: bool,
}

/// Tolerance for "nondecreasing" that absorbs the eigensolver's own
/// convergence threshold.
pub fn lambda_tolerance(sum_pi: &DMatrix<f64>) -> f64 {
    crate::linalg::OFF_DIAGONAL_TOL * sum_pi.norm().max(1.0)
}

pub struct Simulator {
    cfg: SimConfig,
    id_basis: Box<dyn IdentifierBasis>,
    critic_basis: Box<dyn CriticBasis>,
    cont: Continuous,
    w_id: DMatrix<f64>,
    w: DVector<f64>,
    stack: ReplayStack,
    window: IrlWindow,
    probe: Probe,
    gamma1: DMatrix<f64>,
    z_prev: Option<DVector<f64>>,
    step: usize,
    pub snapshot_events: Vec<SnapshotEvent>,
    pub pi_monitor_trips: usize,
}

impl Simulator {
    pub fn new(cfg: SimConfig) -> Result<Self> {
        cfg.validate()?;
        let id_basis: Box<dyn IdentifierBasis> = Box::new(SpringDamperBasis);
        let critic_basis: Box<dyn CriticBasis> = Box::new(PolynomialCriticBasis);
        let p = id_basis.regressor_dim();
        let n = id_basis.state_dim();
        let x = cfg.x0.to_vector();
        let w_id = cfg
            .identifier
            .w_init
            .clone()
            .unwrap_or_else(|| DMatrix::zeros(p, n));
        let window = IrlWindow::new(cfg.gains.interval, cfg.dt)?;
        let probe = Probe::new(cfg.probe.clone(), cfg.seed);
        Ok(Simulator {
            cont: Continuous {
                x,
                phi_f: DVector::zeros(p),
                x_f: DVector::zeros(n),
                pi: DMatrix::zeros(p, p),
                k: DMatrix::zeros(p, n),
            },
            stack: ReplayStack::new(cfg.identifier.capacity, p, n),
            gamma1: DMatrix::identity(p, p) * cfg.identifier.gamma1,
            w: cfg.critic_w_init.clone(),
            w_id,
            window,
            probe,
            id_basis,
            critic_basis,
            z_prev: None,
            step: 0,
            snapshot_events: Vec::new(),
            pi_monitor_trips: 0,
            cfg,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn time(&self) -> f64 {
        self.step as f64 * self.cfg.dt
    }

    pub fn identifier_weights(&self) -> &DMatrix<f64> {
        &self.w_id
    }

    pub fn critic_weights(&self) -> &DVector<f64> {
        &self.w
    }

    pub fn stack(&self) -> &ReplayStack {
        &self.stack
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.cont.pi
    }

    fn identifier_state(&self) -> IdentifierState {
        IdentifierState {
            w_hat: self.w_id.clone(),
            phi_f: self.cont.phi_f.clone(),
            x_f: self.cont.x_f.clone(),
            pi: self.cont.pi.clone(),
            k: self.cont.k.clone(),
        }
    }

    fn fail(&self, what: impl Into<String>) -> Error {
        Error::Numerical {
            step: self.step,
            what: what.into(),
        }
    }

    /// Evaluate the current step, advance the state by `dt` unless
    /// `advance` is false, and return the record for the step start.
    pub fn step(&mut self, advance: bool) -> Result<StepRecord> {
        let cfg = &self.cfg;
        let t = self.time();
        let params = cfg.schedule.params_at(t)?;
        let x = self.cont.x.clone();
        if x.iter().any(|v| !v.is_finite()) {
            return Err(self.fail("plant state is not finite"));
        }
        let plant = PlantState::from_slice(x.as_slice());

        let x2d = models::reference(plant.x1, cfg.x1d, 0.0);
        let z = models::augment(&plant, x2d).to_vector();

        let id_state = self.identifier_state();
        let (_, g_hat) = identifier::estimates(&id_state, self.id_basis.as_ref(), &x);
        let g_col = g_hat.column(0).into_owned();
        let g_aug = DMatrix::from_column_slice(2, 1, models::augmented_g(&g_col).as_slice());

        let theta = self.critic_basis.theta(&z);
        let grad = self.critic_basis.grad(&z);
        let tau = policy::tau(&self.w, &g_aug, &grad, &cfg.saturation);
        let u_hat = policy::control(&tau, &cfg.saturation)[0];
        let u = apply_probe(u_hat, self.probe.at(t), cfg.saturation.u_max);

        let reward = policy::q_cost(&z, &cfg.q) + policy::utility_closed(&tau, &cfg.saturation);
        let m = critic::m_vector(&grad, &g_aug, &tau, cfg.saturation.u_max);
        self.window.push(WindowSample {
            t,
            z: z.clone(),
            theta,
            reward,
            m,
        })?;

        let z_dot = match &self.z_prev {
            Some(prev) => (&z - prev) / cfg.dt,
            None => DVector::zeros(z.len()),
        };
        let (sigma, xi) = critic::sigma_and_indicator(&self.w, &grad, &z_dot);

        let (w_next, w_dot, e_hjb, phi_norm, theta_bar_norm, substeps) =
            match self.window.terms(cfg.gains.gamma) {
                Some(terms) => {
                    let inputs = critic::CriticStepInputs {
                        terms: &terms,
                        grad: &grad,
                        g_aug: &g_aug,
                        z_dot: &z_dot,
                        spec: &cfg.saturation,
                        gains: &cfg.gains,
                    };
                    let (wd, e, _, _) = inputs.derivative(&self.w);
                    let (next, n) = critic::advance_critic(&self.w, &inputs, cfg.dt, cfg.critic_max_substeps);
                    let nz = critic::normalizers(&terms.delta_theta);
                    (next, wd, e, nz.phi.norm(), nz.theta_bar.norm(), n)
                }
                None => (self.w.clone(), DVector::zeros(self.w.len()), 0.0, 0.0, 0.0, 0),
            };
        let ready = substeps > 0;

        let stack = cfg.identifier.er_enabled.then_some(&self.stack);
        let w_id_dot = identifier::update_derivative(&id_state, stack, &self.gamma1);
        let w_id_next = match cfg.identifier.step {
            WeightStep::ForwardEuler => &self.w_id + &w_id_dot * cfg.dt,
            WeightStep::BackwardEuler => identifier::implicit_step(&id_state, stack, &self.gamma1, cfg.dt)?,
        };

        let g_true = params.control_gain();
        let g_tilde_norm = (&g_true - &g_col).norm();
        let mut p_mat = self.cont.pi.clone();
        if cfg.identifier.er_enabled && !self.stack.is_empty() {
            p_mat += &self.stack.sum_pi;
        }
        let lambda_min_p = min_eig_sym(&p_mat).map_err(|e| self.fail(e.to_string()))?;
        let id_error_norm = (params.true_identifier_weights() - &self.w_id).norm();

        let record = StepRecord {
            step: self.step,
            t,
            x1: plant.x1,
            x2: plant.x2,
            x1d: cfg.x1d,
            x2d,
            u,
            z1: z[0],
            z2: z[1],
            e_hjb,
            sigma,
            xi,
            w: self.w.iter().copied().collect(),
            w_id: row_major(&self.w_id),
            g_tilde_norm,
            lambda_min_p,
            u_hat,
            w_dot_norm: w_dot.norm(),
            phi_norm,
            theta_bar_norm,
            id_error_norm,
            window_ready: ready,
            critic_substeps: substeps,
        };
        if !record_is_finite(&record) {
            return Err(self.fail(format!("non-finite value in step record at t = {t}")));
        }
        if !advance {
            return Ok(record);
        }

        self.advance_continuous(&params, u)?;
        self.w_id = w_id_next;
        self.w = w_next;
        self.z_prev = Some(z);
        self.step += 1;

        self.monitor_gram();
        if self.cfg.identifier.er_enabled {
            let policy = SnapshotPolicy {
                period: self.cfg.identifier.snapshot_period,
            };
            let t_new = self.time();
            let out = self
                .stack
                .maybe_record(&self.cont.pi, &self.cont.k, t_new, &policy)?;
            if out.recorded {
                self.snapshot_events.push(SnapshotEvent {
                    t: t_new,
                    lambda_before: out.lambda_before,
                    lambda_after: out.lambda_after,
                    replaced: out.replaced.is_some(),
                });
            }
        }
        if self.w.iter().chain(self.w_id.iter()).any(|v| !v.is_finite()) {
            return Err(self.fail("learner weights are not finite"));
        }
        Ok(record)
    }

    fn advance_continuous(&mut self, params: &PlantParams, u: f64) -> Result<()> {
        let basis = self.id_basis.as_ref();
        let k_f = self.cfg.identifier.k_f;
        let l_f = self.cfg.identifier.l_f;
        let u_vec = DVector::from_element(1, u);
        let step = self.step;
        let next = rk4_step(&self.cont, self.cfg.dt, |s: &Continuous| {
            let plant = PlantState::from_slice(s.x.as_slice());
            let dx = models::plant_derivative(&plant, u, params).map_err(|e| match e {
                Error::Numerical { what, .. } => Error::Numerical { step, what },
                other => other,
            })?;
            let phi = identifier::regressor(basis, &s.x, &u_vec)?;
            let id = IdentifierState {
                w_hat: DMatrix::zeros(0, 0),
                phi_f: s.phi_f.clone(),
                x_f: s.x_f.clone(),
                pi: s.pi.clone(),
                k: s.k.clone(),
            };
            let (dphi, dxf) = identifier::filter_derivatives(&phi, &s.x, &id, k_f)?;
            let (dpi, dk) = identifier::gram_derivatives(&id, &dxf, l_f);
            Ok(Continuous {
                x: DVector::from_vec(vec![dx.x1, dx.x2]),
                phi_f: dphi,
                x_f: dxf,
                pi: dpi,
                k: dk,
            })
        })?;
        self.cont = next;
        Ok(())
    }

    fn monitor_gram(&mut self) {
        let pi = &self.cont.pi;
        let asym = (pi - pi.transpose()).abs().max();
        let psd = min_eig_sym(pi).map(|l| l >= -1e-9).unwrap_or(false);
        if asym > 1e-12 || !psd {
            self.pi_monitor_trips += 1;
        }
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    (0..m.nrows())
        .flat_map(|i| (0..m.ncols()).map(move |j| (i, j)))
        .map(|(i, j)| m[(i, j)])
        .collect()
}

fn record_is_finite(r: &StepRecord) -> bool {
    [
        r.x1,
        r.x2,
        r.x2d,
        r.u,
        r.z1,
        r.z2,
        r.e_hjb,
        r.sigma,
        r.g_tilde_norm,
        r.lambda_min_p,
    ]
    .iter()
    .chain(r.w.iter())
    .chain(r.w_id.iter())
    .all(|v| v.is_finite())
}

/// Streaming accumulator for [`Metrics`].
struct MetricsBuilder {
    cfg: SimConfig,
    rows: Vec<Lite>,
}

/// The subset of a record needed for metrics.
struct Lite {
    t: f64,
    x1: f64,
    u: f64,
    g_tilde: f64,
    w: Vec<f64>,
    w_dot_norm: f64,
    phi_norm: f64,
    theta_bar_norm: f64,
    id_error: f64,
    lambda_min_p: f64,
}

impl MetricsBuilder {
    fn push(&mut self, r: &StepRecord) {
        self.rows.push(Lite {
            t: r.t,
            x1: r.x1,
            u: r.u,
            g_tilde: r.g_tilde_norm,
            w: r.w.clone(),
            w_dot_norm: r.w_dot_norm,
            phi_norm: r.phi_norm,
            theta_bar_norm: r.theta_bar_norm,
            id_error: r.id_error_norm,
            lambda_min_p: r.lambda_min_p,
        });
    }

    fn mean_over(&self, a: f64, b: f64, f: impl Fn(&Lite) -> f64) -> f64 {
        let eps = 1e-9;
        let (s, n) = self
            .rows
            .iter()
            .filter(|r| r.t >= a - eps && r.t < b - eps)
            .fold((0.0, 0usize), |(s, n), r| (s + f(r), n + 1));
        if n == 0 {
            f64::NAN
        } else {
            s / n as f64
        }
    }

    fn finish(self, sim: &Simulator) -> Metrics {
        let cfg = &self.cfg;
        let horizon = cfg.duration;
        let last_t = horizon + cfg.dt;
        let u_max = cfg.saturation.u_max;
        let segments = cfg
            .schedule
            .segments()
            .iter()
            .zip(cfg.schedule.intervals(horizon))
            .map(|(seg, (a, b))| {
                // the final segment includes the closing row at t = duration
                let b = if (b - horizon).abs() < 1e-9 { last_t } else { b };
                let p = seg.params;
                SegmentMetrics {
                    start: a,
                    end: b.min(horizon),
                    mass: p.mass,
                    spring: p.spring,
                    damping: p.damping,
                    tracking_error: self.mean_over((b - 3.0).max(a), b, |r| (r.x1 - cfg.x1d).abs()),
                    mean_x1: self.mean_over((b - 3.0).max(a), b, |r| r.x1),
                    reachable_x1: if p.spring > 0.0 {
                        (u_max / p.spring).cbrt()
                    } else {
                        f64::INFINITY
                    },
                    g_tilde: self.mean_over((b - 2.0).max(a), b, |r| r.g_tilde),
                }
            })
            .collect();

        let last = self.rows.last();
        let w_final: Vec<f64> = last.map(|r| r.w.clone()).unwrap_or_default();
        let w_final_norm = norm(&w_final);
        let mut settling = 0.0;
        for r in self.rows.iter().rev() {
            let d = norm(&r.w.iter().zip(&w_final).map(|(a, b)| a - b).collect::<Vec<_>>());
            if d > 0.05 * w_final_norm {
                settling = r.t;
                break;
            }
        }
        let lambda_violations = sim
            .snapshot_events
            .iter()
            .filter(|e| e.lambda_after < e.lambda_before - lambda_tolerance(&sim.stack.sum_pi))
            .count();

        Metrics {
            steps: cfg.steps(),
            rows: self.rows.len(),
            max_abs_u: self.rows.iter().map(|r| r.u.abs()).fold(0.0, f64::max),
            final_g_tilde_norm: last.map_or(f64::NAN, |r| r.g_tilde),
            final_identifier_error: last.map_or(f64::NAN, |r| r.id_error),
            segments,
            max_critic_norm: self.rows.iter().map(|r| norm(&r.w)).fold(0.0, f64::max),
            critic_rate_first: self.mean_over(0.0, 5.0, |r| r.w_dot_norm),
            critic_rate_last: self.mean_over(horizon - 5.0, last_t, |r| r.w_dot_norm),
            critic_settling_time: settling,
            max_phi_norm: self.rows.iter().map(|r| r.phi_norm).fold(0.0, f64::max),
            max_theta_bar_norm: self.rows.iter().map(|r| r.theta_bar_norm).fold(0.0, f64::max),
            snapshots_accepted: sim.snapshot_events.len(),
            lambda_violations,
            pi_monitor_trips: sim.pi_monitor_trips,
            final_lambda_min_p: last.map_or(f64::NAN, |r| r.lambda_min_p),
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Outcome of [`run`]: metrics plus the snapshot log.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub metrics: Metrics,
    pub snapshot_events: Vec<SnapshotEvent>,
    pub final_identifier_weights: DMatrix<f64>,
    pub final_critic_weights: DVector<f64>,
}

/// Run the full scenario, streaming every row (`duration/dt + 1` of them)
/// to `sink`.
pub fn run<F>(cfg: &SimConfig, mut sink: F) -> Result<RunSummary>
where
    F: FnMut(&StepRecord) -> Result<()>,
{
    let mut sim = Simulator::new(cfg.clone())?;
    let steps = cfg.steps();
    let mut metrics = MetricsBuilder {
        cfg: cfg.clone(),
        rows: Vec::with_capacity(steps + 1),
    };
    for k in 0..=steps {
        let rec = sim.step(k < steps)?;
        metrics.push(&rec);
        sink(&rec)?;
    }
    Ok(RunSummary {
        metrics: metrics.finish(&sim),
        snapshot_events: sim.snapshot_events.clone(),
        final_identifier_weights: sim.w_id.clone(),
        final_critic_weights: sim.w.clone(),
    })
}

/// Run and keep every record in memory.
pub fn run_collect(cfg: &SimConfig) -> Result<(Vec<StepRecord>, RunSummary)> {
    let mut rows = Vec::with_capacity(cfg.steps() + 1);
    let summary = run(cfg, |r| {
        rows.push(r.clone());
        Ok(())
    })?;
    Ok((rows, summary))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probe_examples() {
        let off = ProbeConfig::disabled();
        assert_eq!(probe_signal(1.3, &off, &[]), 0.0);
        let on = ProbeConfig {
            enabled: true,
            amplitude: 0.2,
            frequencies: vec![1.1, 2.3, 3.7],
            random_phase: false,
        };
        assert_eq!(probe_signal(0.0, &on, &[0.0; 3]), 0.0);
        for k in 0..1000 {
            assert!(probe_signal(k as f64 * 0.013, &on, &[0.0; 3]).abs() <= 0.2);
        }
    }

    #[test]
    fn clip_examples() {
        assert!((apply_probe(-1.95, 0.5, 2.0) + 1.45).abs() < 1e-12);
        assert_eq!(apply_probe(1.95, 0.5, 2.0), 2.0);
        assert_eq!(apply_probe(-1.95, -0.5, 2.0), -2.0);
    }

    #[test]
    fn random_phase_depends_on_seed() {
        let cfg = ProbeConfig {
            enabled: true,
            amplitude: 1.0,
            frequencies: vec![1.0, 2.0],
            random_phase: true,
        };
        let a = Probe::new(cfg.clone(), 1);
        let b = Probe::new(cfg.clone(), 1);
        let c = Probe::new(cfg, 2);
        assert_eq!(a.at(0.37), b.at(0.37));
        assert_ne!(a.at(0.37), c.at(0.37));
    }

    #[test]
    fn row_major_layout() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(row_major(&m), vec![1.0, 2.0, 3.0, 4.0]);
    }
}
