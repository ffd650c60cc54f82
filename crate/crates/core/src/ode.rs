//! Classical fixed-step fourth-order Runge–Kutta.

use nalgebra::DVector;

use crate::error::Result;

/// State types that RK4 can combine linearly.
pub trait OdeState: Clone {
    /// `self += a · other`
    fn axpy(&mut self, a: f64, other: &Self);
}

impl OdeState for f64 {
    fn axpy(&mut self, a: f64, other: &Self) {
        *self += a * other;
    }
}

impl OdeState for DVector<f64> {
    fn axpy(&mut self, a: f64, other: &Self) {
        DVector::axpy(self, a, other, 1.0);
    }
}

/// One RK4 step of an autonomous system `y' = f(y)`.
///
/// Time-varying inputs (control, plant parameters) are held constant over
/// the step by the caller.
pub fn rk4_step<S, F>(y: &S, dt: f64, mut f: F) -> Result<S>
where
    S: OdeState,
    F: FnMut(&S) -> Result<S>,
{
    let k1 = f(y)?;
    let mut y2 = y.clone();
    y2.axpy(0.5 * dt, &k1);
    let k2 = f(&y2)?;
    let mut y3 = y.clone();
    y3.axpy(0.5 * dt, &k2);
    let k3 = f(&y3)?;
    let mut y4 = y.clone();
    y4.axpy(dt, &k3);
    let k4 = f(&y4)?;

    let mut out = y.clone();
    out.axpy(dt / 6.0, &k1);
    out.axpy(dt / 3.0, &k2);
    out.axpy(dt / 3.0, &k3);
    out.axpy(dt / 6.0, &k4);
    Ok(out)
}
