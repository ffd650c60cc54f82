//! True plant, setpoint reference, and tracking-error augmentation.
//!
//! The plant is the nonlinear spring–damper
//!
//! ```text
//! x1' = x2
//! x2' = -(k/m) x1^3 - (c/m) x2 + u/m
//! ```
//!
//! whose physical parameters switch at scheduled instants. The learner never
//! sees [`PlantParams`]; only the simulator does.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantParams {
    /// kg
    pub mass: f64,
    /// N/m
    pub spring: f64,
    /// N·s/m
    pub damping: f64,
}

impl PlantParams {
    pub fn new(mass: f64, spring: f64, damping: f64) -> Result<Self> {
        let p = PlantParams {
            mass,
            spring,
            damping,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mass.is_finite() && self.spring.is_finite() && self.damping.is_finite()) {
            return Err(Error::Domain("plant parameters must be finite".into()));
        }
        if self.mass <= 0.0 {
            return Err(Error::Domain(format!("mass must be > 0, got {}", self.mass)));
        }
        Ok(())
    }

    /// Ideal identifier weights for the `(x1, x2, x1^3 | u)` regressor.
    ///
    /// Rows follow the regressor order, columns the state derivatives.
    pub fn true_identifier_weights(&self) -> nalgebra::DMatrix<f64> {
        let m = self.mass;
        nalgebra::DMatrix::from_row_slice(
            4,
            2,
            &[
                0.0,
                0.0, //
                1.0,
                -self.damping / m, //
                0.0,
                -self.spring / m, //
                0.0,
                1.0 / m,
            ],
        )
    }

    /// True control coupling `g(x) = (0, 1/m)`.
    pub fn control_gain(&self) -> DVector<f64> {
        DVector::from_vec(vec![0.0, 1.0 / self.mass])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSegment {
    /// s
    pub start: f64,
    pub params: PlantParams,
}

/// Piecewise-constant parameters on left-closed, right-open intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ScheduleSegment>", into = "Vec<ScheduleSegment>")]
pub struct ParameterSchedule {
    segments: Vec<ScheduleSegment>,
}

impl ParameterSchedule {
    pub fn new(segments: Vec<ScheduleSegment>) -> Result<Self> {
        let first = segments
            .first()
            .ok_or_else(|| Error::Domain("schedule needs at least one segment".into()))?;
        if first.start != 0.0 {
            return Err(Error::Domain(format!(
                "first segment must start at 0, got {}",
                first.start
            )));
        }
        for (i, pair) in segments.windows(2).enumerate() {
            if !(pair[1].start > pair[0].start) || !pair[1].start.is_finite() {
                return Err(Error::Domain(format!(
                    "segment start times must be strictly increasing (segment {})",
                    i + 1
                )));
            }
        }
        for s in &segments {
            s.params.validate()?;
        }
        Ok(ParameterSchedule { segments })
    }

    pub fn constant(params: PlantParams) -> Self {
        ParameterSchedule {
            segments: vec![ScheduleSegment { start: 0.0, params }],
        }
    }

    /// The benchmark: `(m,k)` = (1,3) on [0,14), (4.5,5) on [14,30), (8,9)
    /// afterwards, with `c = 0.5` throughout.
    pub fn benchmark() -> Self {
        let seg = |start, mass, spring| ScheduleSegment {
            start,
            params: PlantParams {
                mass,
                spring,
                damping: 0.5,
            },
        };
        ParameterSchedule {
            segments: vec![seg(0.0, 1.0, 3.0), seg(14.0, 4.5, 5.0), seg(30.0, 8.0, 9.0)],
        }
    }

    pub fn segments(&self) -> &[ScheduleSegment] {
        &self.segments
    }

    /// Index of the segment containing `t`.
    pub fn segment_index(&self, t: f64) -> Result<usize> {
        if !(t >= 0.0) {
            return Err(Error::Domain(format!("time must be >= 0, got {t}")));
        }
        Ok(self.segments.partition_point(|s| s.start <= t) - 1)
    }

    pub fn params_at(&self, t: f64) -> Result<PlantParams> {
        Ok(self.segments[self.segment_index(t)?].params)
    }

    /// `[start, end)` of every segment, with the last one closed at `horizon`.
    pub fn intervals(&self, horizon: f64) -> Vec<(f64, f64)> {
        self.segments
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let end = self.segments.get(i + 1).map_or(horizon, |n| n.start);
                (s.start, end.min(horizon))
            })
            .filter(|(a, b)| b > a)
            .collect()
    }
}

impl TryFrom<Vec<ScheduleSegment>> for ParameterSchedule {
    type Error = Error;
    fn try_from(v: Vec<ScheduleSegment>) -> Result<Self> {
        ParameterSchedule::new(v)
    }
}

impl From<ParameterSchedule> for Vec<ScheduleSegment> {
    fn from(s: ParameterSchedule) -> Self {
        s.segments
    }
}

/// Spring–damper state (position m, velocity m/s).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    pub x1: f64,
    pub x2: f64,
}

impl PlantState {
    pub fn new(x1: f64, x2: f64) -> Self {
        PlantState { x1, x2 }
    }

    pub fn is_finite(&self) -> bool {
        self.x1.is_finite() && self.x2.is_finite()
    }

    pub fn to_vector(self) -> DVector<f64> {
        DVector::from_vec(vec![self.x1, self.x2])
    }

    pub fn from_slice(v: &[f64]) -> Self {
        PlantState { x1: v[0], x2: v[1] }
    }
}

/// Tracking error on `x2` and the desired velocity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentedState {
    pub z1: f64,
    pub z2: f64,
}

impl AugmentedState {
    pub fn to_vector(self) -> DVector<f64> {
        DVector::from_vec(vec![self.z1, self.z2])
    }
}

/// Spring–damper vector field. Returns `(x1', x2')`.
pub fn plant_derivative(x: &PlantState, u: f64, p: &PlantParams) -> Result<PlantState> {
    if !x.is_finite() || !u.is_finite() {
        return Err(Error::Numerical {
            step: 0,
            what: format!("non-finite plant input x={x:?} u={u}"),
        });
    }
    if p.mass <= 0.0 {
        return Err(Error::Domain(format!("mass must be > 0, got {}", p.mass)));
    }
    let m = p.mass;
    Ok(PlantState {
        x1: x.x2,
        x2: -(p.spring / m) * x.x1.powi(3) - (p.damping / m) * x.x2 + u / m,
    })
}

/// Kinematic velocity command `x2d = x1d' - 5 (x1 - x1d)`.
pub fn reference(x1: f64, x1d: f64, x1d_dot: f64) -> f64 {
    x1d_dot - REFERENCE_GAIN * (x1 - x1d)
}

/// Position-loop gain of the velocity command, 1/s.
pub const REFERENCE_GAIN: f64 = 5.0;

pub fn augment(x: &PlantState, x2d: f64) -> AugmentedState {
    AugmentedState {
        z1: x.x2 - x2d,
        z2: x2d,
    }
}

/// Control column of the augmented system, `G = (g2, 0)`.
///
/// `g_hat` is the per-state control gain of a single-input plant; only the
/// velocity channel drives the tracked error.
pub fn augmented_g(g_hat: &DVector<f64>) -> DVector<f64> {
    DVector::from_vec(vec![g_hat[1], 0.0])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nominal() -> PlantParams {
        PlantParams::new(1.0, 3.0, 0.5).unwrap()
    }

    #[test]
    fn derivative_examples() {
        let p = nominal();
        let d = plant_derivative(&PlantState::new(0.0, 0.0), 0.0, &p).unwrap();
        assert_eq!((d.x1, d.x2), (0.0, 0.0));
        let d = plant_derivative(&PlantState::new(1.0, 0.0), 0.0, &p).unwrap();
        assert_eq!((d.x1, d.x2), (0.0, -3.0));
        let d = plant_derivative(&PlantState::new(1.0, 2.0), 1.0, &p).unwrap();
        assert_eq!((d.x1, d.x2), (2.0, -3.0));
    }

    #[test]
    fn derivative_rejects_nan() {
        let p = nominal();
        let r = plant_derivative(&PlantState::new(f64::NAN, 0.0), 0.0, &p);
        assert!(matches!(r, Err(Error::Numerical { .. })));
        assert!(plant_derivative(&PlantState::new(0.0, 0.0), f64::INFINITY, &p).is_err());
    }

    #[test]
    fn bad_mass_rejected() {
        assert!(PlantParams::new(0.0, 1.0, 1.0).is_err());
        assert!(PlantParams::new(-1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn benchmark_schedule_lookup() {
        let s = ParameterSchedule::benchmark();
        assert_eq!(
            s.params_at(0.0).unwrap(),
            PlantParams::new(1.0, 3.0, 0.5).unwrap()
        );
        assert_eq!(
            s.params_at(20.0).unwrap(),
            PlantParams::new(4.5, 5.0, 0.5).unwrap()
        );
        assert_eq!(
            s.params_at(30.0).unwrap(),
            PlantParams::new(8.0, 9.0, 0.5).unwrap()
        );
        // switch instants belong to the new segment
        assert_eq!(s.params_at(14.0).unwrap().mass, 4.5);
        assert_eq!(s.params_at(13.999_999).unwrap().mass, 1.0);
        assert!(matches!(s.params_at(-1e-9), Err(Error::Domain(_))));
    }

    #[test]
    fn schedule_validation() {
        let p = nominal();
        let seg = |start| ScheduleSegment { start, params: p };
        assert!(ParameterSchedule::new(vec![]).is_err());
        assert!(ParameterSchedule::new(vec![seg(1.0)]).is_err());
        assert!(ParameterSchedule::new(vec![seg(0.0), seg(2.0), seg(2.0)]).is_err());
        assert!(ParameterSchedule::new(vec![seg(0.0), seg(2.0), seg(1.0)]).is_err());
        assert!(ParameterSchedule::new(vec![seg(0.0), seg(2.0)]).is_ok());
    }

    #[test]
    fn intervals_cover_horizon() {
        let s = ParameterSchedule::benchmark();
        assert_eq!(s.intervals(45.0), vec![(0.0, 14.0), (14.0, 30.0), (30.0, 45.0)]);
        assert_eq!(s.intervals(20.0), vec![(0.0, 14.0), (14.0, 20.0)]);
    }

    #[test]
    fn reference_examples() {
        assert_eq!(reference(1.0, 1.0, 0.0), 0.0);
        assert_eq!(reference(0.0, 1.0, 0.0), 5.0);
        assert!((reference(1.2, 1.0, 0.0) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn augment_examples() {
        let z = augment(&PlantState::new(0.3, 2.0), 2.0);
        assert_eq!((z.z1, z.z2), (0.0, 2.0));
        let z = augment(&PlantState::new(0.3, 0.0), 5.0);
        assert_eq!((z.z1, z.z2), (-5.0, 5.0));
        let z = augment(&PlantState::new(0.3, 1.0), 0.0);
        assert_eq!((z.z1, z.z2), (1.0, 0.0));
    }

    #[test]
    fn augmented_g_selects_velocity_channel() {
        let g = |a: f64, b: f64| augmented_g(&DVector::from_vec(vec![a, b]));
        assert_eq!(g(0.0, 1.0).as_slice(), &[1.0, 0.0]);
        assert_eq!(g(0.0, 0.125).as_slice(), &[0.125, 0.0]);
        assert_eq!(g(0.3, 0.5).as_slice(), &[0.5, 0.0]);
    }

    #[test]
    fn true_weights_reproduce_vector_field() {
        let p = PlantParams::new(4.5, 5.0, 0.5).unwrap();
        let w = p.true_identifier_weights();
        let x = PlantState::new(0.7, -1.3);
        let u = 0.9;
        let phi = DVector::from_vec(vec![x.x1, x.x2, x.x1.powi(3), u]);
        let xdot = w.transpose() * phi;
        let d = plant_derivative(&x, u, &p).unwrap();
        assert!((xdot[0] - d.x1).abs() < 1e-14);
        assert!((xdot[1] - d.x2).abs() < 1e-14);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn derivative_affine_in_u(
                x1 in -3.0..3.0f64, x2 in -3.0..3.0f64,
                u1 in -5.0..5.0f64, u2 in -5.0..5.0f64,
                m in 0.1..10.0f64, k in 0.0..10.0f64, c in 0.0..2.0f64,
            ) {
                let p = PlantParams::new(m, k, c).unwrap();
                let x = PlantState::new(x1, x2);
                let a = plant_derivative(&x, u1, &p).unwrap();
                let b = plant_derivative(&x, u2, &p).unwrap();
                prop_assert_eq!(a.x1 - b.x1, 0.0);
                prop_assert!(((a.x2 - b.x2) - (u1 - u2) / m).abs() < 1e-9);
            }

            #[test]
            fn schedule_is_piecewise_constant(t in 0.0..60.0f64) {
                let s = ParameterSchedule::benchmark();
                let idx = s.segment_index(t).unwrap();
                let seg = s.segments()[idx];
                prop_assert!(seg.start <= t);
                if let Some(next) = s.segments().get(idx + 1) {
                    prop_assert!(t < next.start);
                }
                prop_assert_eq!(s.params_at(t).unwrap(), seg.params);
            }

            #[test]
            fn setpoint_error_identity(x1 in -3.0..3.0f64, x2 in -3.0..3.0f64) {
                let x = PlantState::new(x1, x2);
                let z = augment(&x, reference(x1, 1.0, 0.0));
                prop_assert!((z.z1 - (x2 + 5.0 * (x1 - 1.0))).abs() < 1e-12);
            }
        }
    }
}
