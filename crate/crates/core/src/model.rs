//! Drive constants, inverter/dq algebra and the autonomous-system matrices.
//!
//! The state of every autonomous system is
//! `x = [i_d, i_q, sin(eps_el), cos(eps_el), 1]`. Holding an elementary
//! vector `v_n` for a whole controller cycle makes the plant the linear
//! time-invariant system `dx/dt = A_n x`.

use std::f64::consts::PI;

use nalgebra::{Matrix5, Vector5};

use crate::error::{Error, Result};

/// Nameplate and white-box constants of the drive, SI units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriveParameters {
    /// Stator resistance in ohm.
    pub r_s: f64,
    /// d-axis inductance in henry.
    pub l_d: f64,
    /// q-axis inductance in henry.
    pub l_q: f64,
    /// Permanent-magnet flux linkage in volt-seconds.
    pub psi_p: f64,
    pub pole_pairs: u32,
    /// DC-link voltage in volt.
    pub u_dc: f64,
    /// Maximum length of the dq current vector in ampere.
    pub i_max: f64,
}

impl Default for DriveParameters {
    fn default() -> Self {
        Self {
            r_s: 0.018,
            l_d: 370e-6,
            l_q: 1200e-6,
            psi_p: 0.066,
            pole_pairs: 3,
            u_dc: 300.0,
            i_max: 240.0,
        }
    }
}

impl DriveParameters {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("r_s", self.r_s),
            ("l_d", self.l_d),
            ("l_q", self.l_q),
            ("psi_p", self.psi_p),
            ("u_dc", self.u_dc),
            ("i_max", self.i_max),
        ];
        for (name, value) in fields {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::Domain(format!(
                    "drive parameter {name} must be finite and strictly positive, got {value}"
                )));
            }
        }
        if self.pole_pairs < 1 {
            return Err(Error::Domain("pole_pairs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Fixed operating point of the drive and the controller timing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingConditions {
    /// Mechanical speed in min^-1.
    pub n_me: f64,
    /// Electrical angular frequency in rad/s, `2*pi*n_me/60*p`.
    pub omega_el: f64,
    /// Controller cycle time in seconds.
    pub t_s: f64,
    /// Maximum switching frequency in Hz (reported against, never enforced).
    pub f_sw_max: f64,
    pub horizon: u32,
}

impl Default for OperatingConditions {
    fn default() -> Self {
        Self::new(1000.0, 3, 50e-6, 10e3).expect("default operating conditions are valid")
    }
}

impl OperatingConditions {
    pub fn new(n_me: f64, pole_pairs: u32, t_s: f64, f_sw_max: f64) -> Result<Self> {
        if !n_me.is_finite() {
            return Err(Error::Domain(format!("speed must be finite, got {n_me}")));
        }
        if !(t_s.is_finite() && t_s > 0.0) {
            return Err(Error::Domain(format!("cycle time must be positive, got {t_s}")));
        }
        if !(f_sw_max.is_finite() && f_sw_max > 0.0) {
            return Err(Error::Domain(format!(
                "switching frequency limit must be positive, got {f_sw_max}"
            )));
        }
        Ok(Self {
            n_me,
            omega_el: electrical_frequency(n_me, pole_pairs),
            t_s,
            f_sw_max,
            horizon: 1,
        })
    }
}

/// Electrical angular frequency in rad/s for a mechanical speed in min^-1.
pub fn electrical_frequency(n_me: f64, pole_pairs: u32) -> f64 {
    2.0 * PI * n_me / 60.0 * f64::from(pole_pairs)
}

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_angle(angle: f64) -> f64 {
    if angle > -PI && angle <= PI {
        return angle;
    }
    let wrapped = (angle + PI).rem_euclid(2.0 * PI) - PI;
    if wrapped <= -PI {
        PI
    } else {
        wrapped
    }
}

const SWITCHING_TABLE: [[i8; 3]; 8] = [
    [-1, -1, -1],
    [1, -1, -1],
    [1, 1, -1],
    [-1, 1, -1],
    [-1, 1, 1],
    [-1, -1, 1],
    [1, -1, 1],
    [1, 1, 1],
];

/// Phase-leg switching states of one inverter elementary vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SwitchingState {
    pub n: u8,
    pub s_a: i8,
    pub s_b: i8,
    pub s_c: i8,
}

impl SwitchingState {
    pub fn legs(&self) -> [i8; 3] {
        [self.s_a, self.s_b, self.s_c]
    }

    /// Number of phase legs that change state when moving to `other`.
    pub fn toggles_to(&self, other: &SwitchingState) -> u32 {
        self.legs()
            .iter()
            .zip(other.legs())
            .filter(|(a, b)| **a != *b)
            .count() as u32
    }

    /// Stationary-frame voltage `(u_alpha, u_beta)` applied by this vector.
    pub fn alpha_beta_voltage(&self, u_dc: f64) -> (f64, f64) {
        let (a, b, c) = (
            f64::from(self.s_a),
            f64::from(self.s_b),
            f64::from(self.s_c),
        );
        let u_alpha = u_dc / 3.0 * (a - 0.5 * b - 0.5 * c);
        let u_beta = u_dc / 3.0 * (3f64.sqrt() / 2.0) * (b - c);
        (u_alpha, u_beta)
    }
}

/// Switching states of elementary vector `n` (1..=8).
pub fn elementary_vector(n: u8) -> Result<SwitchingState> {
    if !(1..=8).contains(&n) {
        return Err(Error::Domain(format!(
            "elementary vector index must be in 1..=8, got {n}"
        )));
    }
    let [s_a, s_b, s_c] = SWITCHING_TABLE[usize::from(n - 1)];
    Ok(SwitchingState { n, s_a, s_b, s_c })
}

/// Checks that a vector index lies in `1..=max`.
pub fn check_vector_index(n: u8, max: u8) -> Result<()> {
    if (1..=max).contains(&n) {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "elementary vector index must be in 1..={max}, got {n}"
        )))
    }
}

/// Rotor-frame voltage `(u_d, u_q)` produced by `sw` at electrical angle `eps_el`.
pub fn dq_voltage(sw: &SwitchingState, eps_el: f64, u_dc: f64) -> (f64, f64) {
    let (u_alpha, u_beta) = sw.alpha_beta_voltage(u_dc);
    let (sin, cos) = eps_el.sin_cos();
    (cos * u_alpha + sin * u_beta, -sin * u_alpha + cos * u_beta)
}

/// Extended state `[i_d, i_q, sin(eps), cos(eps), 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateVector(Vector5<f64>);

impl StateVector {
    pub fn from_angle(i_d: f64, i_q: f64, eps_el: f64) -> Self {
        let (sin, cos) = normalize_angle(eps_el).sin_cos();
        Self(Vector5::new(i_d, i_q, sin, cos, 1.0))
    }

    pub fn from_parts(i_d: f64, i_q: f64, sin_eps: f64, cos_eps: f64) -> Self {
        Self(Vector5::new(i_d, i_q, sin_eps, cos_eps, 1.0))
    }

    /// Wraps a raw vector whose last element is exactly one.
    pub fn from_vector(v: Vector5<f64>) -> Result<Self> {
        if v[4] != 1.0 {
            return Err(Error::Numeric(format!(
                "constant state element must be 1, got {}",
                v[4]
            )));
        }
        Ok(Self(v))
    }

    pub fn i_d(&self) -> f64 {
        self.0[0]
    }

    pub fn i_q(&self) -> f64 {
        self.0[1]
    }

    pub fn sin_eps(&self) -> f64 {
        self.0[2]
    }

    pub fn cos_eps(&self) -> f64 {
        self.0[3]
    }

    pub fn one(&self) -> f64 {
        self.0[4]
    }

    pub fn currents(&self) -> (f64, f64) {
        (self.0[0], self.0[1])
    }

    pub fn angle(&self) -> f64 {
        self.0[2].atan2(self.0[3])
    }

    pub fn as_vector(&self) -> &Vector5<f64> {
        &self.0
    }
}

/// Continuous-time system matrix `A_n` of one autonomous system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SystemMatrix {
    pub a: Matrix5<f64>,
    pub n: u8,
}

/// Builds `A_n` for elementary vector `n` (1..=8) at electrical frequency `omega_el`.
///
/// Rows 1-2 hold the current dynamics of the basic model with the inverter
/// voltage expressed through `sin(eps)`/`cos(eps)`, rows 3-4 rotate the
/// angle pair and row 5 keeps the constant element fixed.
pub fn build_system_matrix(p: &DriveParameters, omega_el: f64, n: u8) -> Result<SystemMatrix> {
    if !(p.l_d > 0.0 && p.l_q > 0.0) {
        return Err(Error::Domain(format!(
            "inductances must be positive, got l_d = {}, l_q = {}",
            p.l_d, p.l_q
        )));
    }
    let sw = elementary_vector(n)?;
    let (u_alpha, u_beta) = sw.alpha_beta_voltage(p.u_dc);
    let w = omega_el;
    #[rustfmt::skip]
    let a = Matrix5::new(
        -p.r_s / p.l_d,      p.l_q / p.l_d * w, u_beta / p.l_d,   u_alpha / p.l_d, 0.0,
        -p.l_d / p.l_q * w, -p.r_s / p.l_q,     -u_alpha / p.l_q, u_beta / p.l_q,  -p.psi_p / p.l_q * w,
        0.0,                 0.0,               0.0,              w,               0.0,
        0.0,                 0.0,               -w,               0.0,             0.0,
        0.0,                 0.0,               0.0,              0.0,             0.0,
    );
    Ok(SystemMatrix { a, n })
}

/// All eight system matrices, indexed `0..8` for `n = 1..=8`.
pub fn build_all_system_matrices(p: &DriveParameters, omega_el: f64) -> Result<Vec<SystemMatrix>> {
    (1..=8).map(|n| build_system_matrix(p, omega_el, n)).collect()
}

/// Current derivatives of the basic (constant-inductance) PMSM model.
pub fn basic_ode_rhs(p: &DriveParameters, omega_el: f64, u_dq: (f64, f64), i_dq: (f64, f64)) -> (f64, f64) {
    let (u_d, u_q) = u_dq;
    let (i_d, i_q) = i_dq;
    let did = -p.r_s / p.l_d * i_d + p.l_q * omega_el / p.l_d * i_q + u_d / p.l_d;
    let diq = -p.l_d * omega_el / p.l_q * i_d - p.r_s / p.l_q * i_q + u_q / p.l_q
        - p.psi_p * omega_el / p.l_q;
    (did, diq)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn switching_table_rows() {
        let v1 = elementary_vector(1).unwrap();
        assert_eq!(v1.legs(), [-1, -1, -1]);
        assert_eq!(elementary_vector(3).unwrap().legs(), [1, 1, -1]);
        assert_eq!(elementary_vector(8).unwrap().legs(), [1, 1, 1]);
        assert!(elementary_vector(0).is_err());
        assert!(elementary_vector(9).is_err());
    }

    #[test]
    fn dq_voltage_examples() {
        let v1 = elementary_vector(1).unwrap();
        let v2 = elementary_vector(2).unwrap();
        assert_eq!(dq_voltage(&v1, 1.234, 300.0), (0.0, 0.0));
        let (ud, uq) = dq_voltage(&v2, 0.0, 300.0);
        assert!(close(ud, 200.0, 1e-12) && close(uq, 0.0, 1e-12));
        let (ud, uq) = dq_voltage(&v2, PI / 2.0, 300.0);
        assert!(close(ud, 0.0, 1e-12) && close(uq, -200.0, 1e-12));
    }

    #[test]
    fn active_vectors_sum_to_zero() {
        for k in 0..50 {
            let eps = -PI + 0.13 * f64::from(k);
            let (sd, sq) = (2..=7)
                .map(|n| dq_voltage(&elementary_vector(n).unwrap(), eps, 300.0))
                .fold((0.0, 0.0), |acc, u| (acc.0 + u.0, acc.1 + u.1));
            assert!(sd.abs() < 1e-9 && sq.abs() < 1e-9);
        }
    }

    #[test]
    fn system_matrix_entries() {
        let p = DriveParameters::default();
        let a1 = build_system_matrix(&p, 314.159, 1).unwrap();
        assert!(close(a1.a[(0, 0)], -48.648_648_648_648_65, 1e-9));
        for (r, c) in [(0, 2), (0, 3), (1, 2), (1, 3)] {
            assert_eq!(a1.a[(r, c)], 0.0);
        }
        let a8 = build_system_matrix(&p, 314.159, 8).unwrap();
        assert_eq!(a1.a, a8.a);
    }

    #[test]
    fn rotation_rows_are_fixed() {
        let p = DriveParameters::default();
        let w = 314.159;
        for m in build_all_system_matrices(&p, w).unwrap() {
            assert_eq!(m.a.row(2).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0, 0.0, w, 0.0]);
            assert_eq!(m.a.row(3).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0, -w, 0.0, 0.0]);
            assert!(m.a.row(4).iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn non_positive_inductance_rejected() {
        let p = DriveParameters {
            l_q: 0.0,
            ..DriveParameters::default()
        };
        assert!(build_system_matrix(&p, 314.0, 2).is_err());
        assert!(p.validate().is_err());
        assert!(DriveParameters::default().validate().is_ok());
    }

    #[test]
    fn basic_rhs_back_emf() {
        let p = DriveParameters::default();
        let (did, diq) = basic_ode_rhs(&p, 314.159, (0.0, 0.0), (0.0, 0.0));
        assert_eq!(did, 0.0);
        assert!(close(diq, -17278.745, 1e-3));
        assert_eq!(basic_ode_rhs(&p, 0.0, (0.0, 0.0), (0.0, 0.0)), (0.0, 0.0));
    }

    #[test]
    fn angle_normalization() {
        assert_eq!(normalize_angle(PI), PI);
        assert_eq!(normalize_angle(-PI), PI);
        assert!(close(normalize_angle(3.0 * PI / 2.0), -PI / 2.0, 1e-12));
        assert!(close(normalize_angle(0.25), 0.25, 1e-15));
        let s = StateVector::from_angle(1.0, 2.0, 7.0);
        assert!(close(s.sin_eps().powi(2) + s.cos_eps().powi(2), 1.0, 1e-12));
        assert_eq!(s.one(), 1.0);
    }

    #[test]
    fn operating_condition_defaults() {
        let c = OperatingConditions::default();
        assert!(close(c.omega_el, 2.0 * PI * 1000.0 / 60.0 * 3.0, 1e-12));
        assert_eq!(c.t_s, 50e-6);
        assert_eq!(c.horizon, 1);
        assert!(OperatingConditions::new(1000.0, 3, 0.0, 1e4).is_err());
    }

    #[test]
    fn toggles_between_vectors() {
        let v1 = elementary_vector(1).unwrap();
        let v3 = elementary_vector(3).unwrap();
        let v8 = elementary_vector(8).unwrap();
        assert_eq!(v1.toggles_to(&v3), 2);
        assert_eq!(v1.toggles_to(&v8), 3);
        assert_eq!(v3.toggles_to(&v3), 0);
    }
}
