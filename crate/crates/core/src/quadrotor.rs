//! Planar quadrotor plant with an attitude loop, its flat maps and the
//! figure-eight reference.
//!
//! State `[x, xd, z, zd, theta, thetad]`, input `[T_c, theta_c]`, flat output
//! `(x, z)` and flat state `[x, xd, xdd, xddd, z, zd, zdd, zddd]`. The thrust
//! is dynamically extended by a double integrator, so the extended input is
//! `nu = [T_c'', theta_c]` and the extension state `[T_c, T_c', theta_c]`.

use std::io::Write;
use std::path::Path;

use nalgebra::{DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

pub const FLAT_DIM: usize = 8;
pub const INPUT_DIM: usize = 2;
/// Extension state `[T_c, T_c', theta_c]`.
pub const ETA_DIM: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadParams<T> {
    /// Thrust gain, m/s^2 per unit thrust command.
    pub beta1: T,
    /// Thrust offset, m/s^2.
    pub beta2: T,
    pub alpha1: T,
    pub alpha2: T,
    pub alpha3: T,
    pub g: T,
    /// Smallest admissible specific force for the flat maps.
    pub f_min: T,
}

impl Default for QuadParams<f64> {
    /// Identified Crazyflie 2.1 attitude-level model.
    fn default() -> Self {
        Self {
            beta1: 20.907574256269616,
            beta2: 3.653687545690674,
            alpha1: -130.3,
            alpha2: -16.33,
            alpha3: 119.3,
            g: 9.81,
            f_min: 1.0,
        }
    }
}

impl<T: Real> QuadParams<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta1 > T::zero()) {
            return Err(Error::InvalidArgument("beta1 must be positive".into()));
        }
        if self.alpha3 == T::zero() {
            return Err(Error::InvalidArgument("alpha3 must be non-zero".into()));
        }
        if !(self.g > T::zero()) || !(self.f_min > T::zero()) {
            return Err(Error::InvalidArgument("g and f_min must be positive".into()));
        }
        Ok(())
    }

    /// Thrust command holding hover.
    pub fn hover_thrust(&self) -> T {
        (self.g - self.beta2) / self.beta1
    }

    pub fn cast<U: Real>(&self) -> QuadParams<U> {
        let c = |x: T| U::lit(x.as_f64());
        QuadParams {
            beta1: c(self.beta1),
            beta2: c(self.beta2),
            alpha1: c(self.alpha1),
            alpha2: c(self.alpha2),
            alpha3: c(self.alpha3),
            g: c(self.g),
            f_min: c(self.f_min),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PhysState<T> {
    pub x: T,
    pub x_dot: T,
    pub z: T,
    pub z_dot: T,
    pub theta: T,
    pub theta_dot: T,
}

impl<T: Real> PhysState<T> {
    pub fn to_array(&self) -> [T; 6] {
        [self.x, self.x_dot, self.z, self.z_dot, self.theta, self.theta_dot]
    }

    pub fn from_array(a: [T; 6]) -> Self {
        Self { x: a[0], x_dot: a[1], z: a[2], z_dot: a[3], theta: a[4], theta_dot: a[5] }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.as_f64().is_finite())
    }
}

/// Time derivative of the physical state.
pub fn dynamics_rhs<T: Real>(s: &PhysState<T>, u: [T; 2], p: &QuadParams<T>) -> PhysState<T> {
    let force = p.beta2 + p.beta1 * u[0];
    PhysState {
        x: s.x_dot,
        x_dot: s.theta.sin() * force,
        z: s.z_dot,
        z_dot: s.theta.cos() * force - p.g,
        theta: s.theta_dot,
        theta_dot: p.alpha1 * s.theta + p.alpha2 * s.theta_dot + p.alpha3 * u[1],
    }
}

/// Augmented state `[x, xd, z, zd, theta, thetad, T_c, T_c']` with constant
/// thrust acceleration and roll command.
fn augmented_rhs<T: Real>(y: &[T; 8], nu: [T; 2], p: &QuadParams<T>) -> [T; 8] {
    let s = PhysState::from_array([y[0], y[1], y[2], y[3], y[4], y[5]]);
    let d = dynamics_rhs(&s, [y[6], nu[1]], p).to_array();
    [d[0], d[1], d[2], d[3], d[4], d[5], y[7], nu[0]]
}

/// Advance plant and continuous thrust extension by `dt` with fixed-step RK4.
///
/// `eta` is `[T_c, T_c', theta_c]`; `nu = [T_c'', theta_c]` is held over the step.
pub fn integrate<T: Real>(
    s: &PhysState<T>,
    eta: &DVector<T>,
    nu: &DVector<T>,
    dt: T,
    p: &QuadParams<T>,
    substeps: usize,
) -> (PhysState<T>, DVector<T>) {
    let a = s.to_array();
    let mut y = [a[0], a[1], a[2], a[3], a[4], a[5], eta[0], eta[1]];
    let nu = [nu[0], nu[1]];
    let n = substeps.max(1);
    let h = dt / T::lit(n as f64);
    let half = T::lit(0.5);
    let sixth = T::lit(1.0 / 6.0);
    let two = T::lit(2.0);
    let axpy = |y: &[T; 8], k: &[T; 8], c: T| -> [T; 8] { std::array::from_fn(|i| y[i] + c * k[i]) };
    for _ in 0..n {
        let k1 = augmented_rhs(&y, nu, p);
        let k2 = augmented_rhs(&axpy(&y, &k1, half * h), nu, p);
        let k3 = augmented_rhs(&axpy(&y, &k2, half * h), nu, p);
        let k4 = augmented_rhs(&axpy(&y, &k3, h), nu, p);
        y = std::array::from_fn(|i| y[i] + h * sixth * (k1[i] + two * k2[i] + two * k3[i] + k4[i]));
    }
    let s_next = PhysState::from_array([y[0], y[1], y[2], y[3], y[4], y[5]]);
    let eta_next = DVector::from_vec(vec![y[6], y[7], nu[1]]);
    (s_next, eta_next)
}

/// Flat state of a physical state given the current thrust and its rate.
pub fn physical_to_flat<T: Real>(s: &PhysState<T>, thrust: T, thrust_rate: T, p: &QuadParams<T>) -> DVector<T> {
    let force = p.beta2 + p.beta1 * thrust;
    let force_rate = p.beta1 * thrust_rate;
    let (st, ct) = (s.theta.sin(), s.theta.cos());
    DVector::from_vec(vec![
        s.x,
        s.x_dot,
        st * force,
        force_rate * st + force * ct * s.theta_dot,
        s.z,
        s.z_dot,
        ct * force - p.g,
        force_rate * ct - force * st * s.theta_dot,
    ])
}

/// Specific force and attitude encoded by a flat state.
fn force_and_attitude<T: Real>(z: &DVector<T>, p: &QuadParams<T>) -> Result<(T, T)> {
    let ax = z[2];
    let az = z[6] + p.g;
    let force = (ax * ax + az * az).sqrt();
    if !(force >= p.f_min) {
        return Err(Error::Singularity { force: force.as_f64(), min: p.f_min.as_f64() });
    }
    Ok((force, ax.atan2(az)))
}

/// Inverse flat map: physical state, thrust and thrust rate from a flat state.
pub fn flat_to_physical<T: Real>(z: &DVector<T>, p: &QuadParams<T>) -> Result<(PhysState<T>, T, T)> {
    if z.len() != FLAT_DIM {
        return Err(Error::Dimension(format!("flat state of length {}", z.len())));
    }
    let (force, theta) = force_and_attitude(z, p)?;
    let (st, ct) = (theta.sin(), theta.cos());
    let theta_dot = (ct * z[3] - st * z[7]) / force;
    let thrust = (force - p.beta2) / p.beta1;
    let thrust_rate = (st * z[3] + ct * z[7]) / p.beta1;
    let s = PhysState { x: z[0], x_dot: z[1], z: z[4], z_dot: z[5], theta, theta_dot };
    Ok((s, thrust, thrust_rate))
}

/// Ground-truth flat input map `v = alpha(z) + beta(z) nu`.
#[derive(Debug, Clone, PartialEq)]
pub struct PsiEval<T: Real> {
    pub v: Vector2<T>,
    pub alpha: Vector2<T>,
    pub beta: Matrix2<T>,
}

/// Fourth output derivatives for flat state `z` and extended input `nu`.
pub fn psi_true<T: Real>(z: &DVector<T>, nu: &DVector<T>, p: &QuadParams<T>) -> Result<PsiEval<T>> {
    let (s, _, thrust_rate) = flat_to_physical(z, p)?;
    let (force, _) = force_and_attitude(z, p)?;
    let force_rate = p.beta1 * thrust_rate;
    let (st, ct) = (s.theta.sin(), s.theta.cos());
    let w = s.theta_dot;
    let two = T::lit(2.0);
    let theta_dd_free = p.alpha1 * s.theta + p.alpha2 * w;
    let alpha = Vector2::new(
        two * force_rate * ct * w - force * st * w * w + force * ct * theta_dd_free,
        -two * force_rate * st * w - force * ct * w * w - force * st * theta_dd_free,
    );
    let beta = Matrix2::new(
        st * p.beta1,
        ct * p.alpha3 * force,
        ct * p.beta1,
        -st * p.alpha3 * force,
    );
    let v = alpha + beta * Vector2::new(nu[0], nu[1]);
    Ok(PsiEval { v, alpha, beta })
}

/// Extended input realising flat input `v` exactly at `z`.
pub fn invert_psi<T: Real>(z: &DVector<T>, v: &DVector<T>, p: &QuadParams<T>) -> Result<DVector<T>> {
    let ev = psi_true(z, &DVector::zeros(INPUT_DIM), p)?;
    let inv = ev
        .beta
        .try_inverse()
        .ok_or_else(|| Error::Singularity { force: 0.0, min: p.f_min.as_f64() })?;
    let nu = inv * (Vector2::new(v[0], v[1]) - ev.alpha);
    Ok(DVector::from_vec(vec![nu[0], nu[1]]))
}

/// Flat reference sampled at the control rate.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTrajectory<T: Real> {
    pub dt: T,
    pub z_ref: Vec<DVector<T>>,
    pub v_ref: Vec<DVector<T>>,
}

impl<T: Real> ReferenceTrajectory<T> {
    pub fn len(&self) -> usize {
        self.z_ref.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z_ref.is_empty()
    }

    /// `horizon + 1` states and `horizon` inputs starting at step `k`,
    /// holding the last sample past the end.
    pub fn window(&self, k: usize, horizon: usize) -> (Vec<DVector<T>>, Vec<DVector<T>>) {
        let last = self.len() - 1;
        let z = (0..=horizon).map(|j| self.z_ref[(k + j).min(last)].clone()).collect();
        let v = (0..horizon).map(|j| self.v_ref[(k + j).min(last)].clone()).collect();
        (z, v)
    }

    /// CSV with columns `t, z0..z{n-1}, v0..v{m-1}`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        let n = self.z_ref.first().map_or(0, |z| z.len());
        let m = self.v_ref.first().map_or(0, |v| v.len());
        let mut header = vec!["t".to_string()];
        header.extend((0..n).map(|i| format!("z{i}")));
        header.extend((0..m).map(|i| format!("v{i}")));
        writeln!(f, "{}", header.join(","))?;
        for (k, (z, v)) in self.z_ref.iter().zip(&self.v_ref).enumerate() {
            let mut row = vec![format!("{}", k as f64 * self.dt.as_f64())];
            row.extend(z.iter().chain(v.iter()).map(|x| format!("{}", x.as_f64())));
            writeln!(f, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Parameters of the figure-eight `center + (A_x sin wt, A_z sin 2wt)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lemniscate<T> {
    pub amplitude_x: T,
    pub amplitude_z: T,
    pub period: T,
    pub center_x: T,
    pub center_z: T,
}

/// Value and first four derivatives of `a sin(w t)`.
fn sine_derivatives<T: Real>(a: T, w: T, t: T) -> [T; 5] {
    let (s, c) = ((w * t).sin(), (w * t).cos());
    let w2 = w * w;
    [a * s, a * w * c, -a * w2 * s, -a * w2 * w * c, a * w2 * w2 * s]
}

impl<T: Real> Lemniscate<T> {
    /// Output derivatives `[y, y', y'', y''', y'''']` of both axes at time `t`.
    pub fn derivatives(&self, t: T) -> ([T; 5], [T; 5]) {
        let w = T::two_pi() / self.period;
        let mut x = sine_derivatives(self.amplitude_x, w, t);
        let mut z = sine_derivatives(self.amplitude_z, w + w, t);
        x[0] += self.center_x;
        z[0] += self.center_z;
        (x, z)
    }
}

/// Sample the figure-eight reference over `n_steps` control steps.
pub fn lemniscate_reference<T: Real>(shape: &Lemniscate<T>, dt: T, n_steps: usize) -> Result<ReferenceTrajectory<T>> {
    if !(shape.period > T::zero()) {
        return Err(Error::InvalidArgument("lemniscate period must be positive".into()));
    }
    if !(dt > T::zero()) {
        return Err(Error::InvalidArgument("sampling time must be positive".into()));
    }
    let mut z_ref = Vec::with_capacity(n_steps);
    let mut v_ref = Vec::with_capacity(n_steps);
    for k in 0..n_steps {
        let (x, z) = shape.derivatives(T::lit(k as f64) * dt);
        z_ref.push(DVector::from_vec(vec![x[0], x[1], x[2], x[3], z[0], z[1], z[2], z[3]]));
        v_ref.push(DVector::from_vec(vec![x[4], z[4]]));
    }
    Ok(ReferenceTrajectory { dt, z_ref, v_ref })
}
