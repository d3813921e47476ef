//! Flux-linkage maps and the general current ODE built on them.

use nalgebra::{Matrix2, Vector2};

use crate::error::{Error, Result};
use crate::model::DriveParameters;

/// Flux linkage `psi_dq(i_d, i_q, eps_el)` with its partial derivatives.
pub trait FluxMap {
    fn flux(&self, i_d: f64, i_q: f64, eps_el: f64) -> (f64, f64);

    /// `d psi_dq / d i_dq` as a 2x2 matrix.
    fn current_jacobian(&self, i_d: f64, i_q: f64, eps_el: f64) -> Matrix2<f64>;

    /// `d psi_dq / d eps_el`.
    fn angle_derivative(&self, i_d: f64, i_q: f64, eps_el: f64) -> (f64, f64);
}

/// Constant inductances plus the permanent-magnet flux on the d-axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFlux {
    pub l_d: f64,
    pub l_q: f64,
    pub psi_p: f64,
}

impl LinearFlux {
    pub fn new(p: &DriveParameters) -> Self {
        Self {
            l_d: p.l_d,
            l_q: p.l_q,
            psi_p: p.psi_p,
        }
    }
}

impl FluxMap for LinearFlux {
    fn flux(&self, i_d: f64, i_q: f64, _eps_el: f64) -> (f64, f64) {
        (self.l_d * i_d + self.psi_p, self.l_q * i_q)
    }

    fn current_jacobian(&self, _i_d: f64, _i_q: f64, _eps_el: f64) -> Matrix2<f64> {
        Matrix2::new(self.l_d, 0.0, 0.0, self.l_q)
    }

    fn angle_derivative(&self, _i_d: f64, _i_q: f64, _eps_el: f64) -> (f64, f64) {
        (0.0, 0.0)
    }
}

/// Ground-truth plant flux with soft saturation and a sixth-harmonic
/// permanent-magnet ripple:
///
/// ```text
/// psi_d = L_d i_d / (1 + |i_d| / I_sat) + psi_p (1 + a cos(6 eps))
/// psi_q = L_q i_q / (1 + |i_q| / I_sat)
/// ```
///
/// The incremental inductances equal `L_d`, `L_q` at zero current.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaturatedFlux {
    pub l_d: f64,
    pub l_q: f64,
    pub psi_p: f64,
    /// Saturation current in ampere.
    pub i_sat: f64,
    /// Relative amplitude of the sixth-harmonic magnet flux ripple.
    pub ripple: f64,
}

impl SaturatedFlux {
    pub const DEFAULT_I_SAT: f64 = 300.0;
    pub const DEFAULT_RIPPLE: f64 = 0.01;

    pub fn new(p: &DriveParameters, i_sat: f64, ripple: f64) -> Self {
        Self {
            l_d: p.l_d,
            l_q: p.l_q,
            psi_p: p.psi_p,
            i_sat,
            ripple,
        }
    }

    fn saturate(&self, l: f64, i: f64) -> f64 {
        l * i / (1.0 + i.abs() / self.i_sat)
    }

    fn incremental(&self, l: f64, i: f64) -> f64 {
        let den = 1.0 + i.abs() / self.i_sat;
        l / (den * den)
    }
}

impl FluxMap for SaturatedFlux {
    fn flux(&self, i_d: f64, i_q: f64, eps_el: f64) -> (f64, f64) {
        (
            self.saturate(self.l_d, i_d) + self.psi_p * (1.0 + self.ripple * (6.0 * eps_el).cos()),
            self.saturate(self.l_q, i_q),
        )
    }

    fn current_jacobian(&self, i_d: f64, i_q: f64, _eps_el: f64) -> Matrix2<f64> {
        Matrix2::new(
            self.incremental(self.l_d, i_d),
            0.0,
            0.0,
            self.incremental(self.l_q, i_q),
        )
    }

    fn angle_derivative(&self, _i_d: f64, _i_q: f64, eps_el: f64) -> (f64, f64) {
        (-6.0 * self.ripple * self.psi_p * (6.0 * eps_el).sin(), 0.0)
    }
}

/// Configuration-level choice of flux map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FluxChoice {
    Linear,
    Saturated { i_sat: f64, ripple: f64 },
}

impl Default for FluxChoice {
    fn default() -> Self {
        FluxChoice::Linear
    }
}

impl FluxChoice {
    pub fn saturated_default() -> Self {
        FluxChoice::Saturated {
            i_sat: SaturatedFlux::DEFAULT_I_SAT,
            ripple: SaturatedFlux::DEFAULT_RIPPLE,
        }
    }

    pub fn build(&self, p: &DriveParameters) -> FluxModel {
        match *self {
            FluxChoice::Linear => FluxModel::Linear(LinearFlux::new(p)),
            FluxChoice::Saturated { i_sat, ripple } => {
                FluxModel::Saturated(SaturatedFlux::new(p, i_sat, ripple))
            }
        }
    }
}

/// Concrete flux map used by the simulator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FluxModel {
    Linear(LinearFlux),
    Saturated(SaturatedFlux),
}

impl FluxMap for FluxModel {
    fn flux(&self, i_d: f64, i_q: f64, eps_el: f64) -> (f64, f64) {
        match self {
            FluxModel::Linear(f) => f.flux(i_d, i_q, eps_el),
            FluxModel::Saturated(f) => f.flux(i_d, i_q, eps_el),
        }
    }

    fn current_jacobian(&self, i_d: f64, i_q: f64, eps_el: f64) -> Matrix2<f64> {
        match self {
            FluxModel::Linear(f) => f.current_jacobian(i_d, i_q, eps_el),
            FluxModel::Saturated(f) => f.current_jacobian(i_d, i_q, eps_el),
        }
    }

    fn angle_derivative(&self, i_d: f64, i_q: f64, eps_el: f64) -> (f64, f64) {
        match self {
            FluxModel::Linear(f) => f.angle_derivative(i_d, i_q, eps_el),
            FluxModel::Saturated(f) => f.angle_derivative(i_d, i_q, eps_el),
        }
    }
}

/// Current derivatives of the general voltage equation
/// `u = R i + w J psi + d psi / dt` for an arbitrary flux map.
///
/// `d psi / dt` expands to `(d psi / d i) di/dt + (d psi / d eps) w`, which
/// is solved for `di/dt` through the 2x2 current Jacobian.
pub fn general_ode_rhs(
    p: &DriveParameters,
    flux: &dyn FluxMap,
    omega_el: f64,
    u_dq: (f64, f64),
    i_dq: (f64, f64),
    eps_el: f64,
) -> Result<(f64, f64)> {
    let (i_d, i_q) = i_dq;
    let (psi_d, psi_q) = flux.flux(i_d, i_q, eps_el);
    let (dpsi_d_eps, dpsi_q_eps) = flux.angle_derivative(i_d, i_q, eps_el);
    let rhs = Vector2::new(
        u_dq.0 - p.r_s * i_d + omega_el * psi_q - omega_el * dpsi_d_eps,
        u_dq.1 - p.r_s * i_q - omega_el * psi_d - omega_el * dpsi_q_eps,
    );
    let jac = flux.current_jacobian(i_d, i_q, eps_el);
    let scale = jac.abs().max();
    let det = jac.determinant();
    if !det.is_finite() || det.abs() <= f64::EPSILON * scale * scale {
        return Err(Error::Numeric(format!(
            "singular flux Jacobian at i_d = {i_d}, i_q = {i_q}, eps = {eps_el} (det = {det:e})"
        )));
    }
    let did = (jac[(1, 1)] * rhs[0] - jac[(0, 1)] * rhs[1]) / det;
    let diq = (jac[(0, 0)] * rhs[1] - jac[(1, 0)] * rhs[0]) / det;
    Ok((did, diq))
}
