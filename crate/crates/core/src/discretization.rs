//! Discrete-time models of the autonomous systems.
//!
//! The exact propagator over one controller cycle is the transition matrix
//! `Phi_n(T_s) = exp(A_n T_s)`; the usual white-box controller model is its
//! first-order truncation `K_n = I + A_n T_s`.

use std::fmt::Write as _;

use nalgebra::{Matrix5, SMatrix};

use crate::error::{Error, Result};
use crate::model::{StateVector, SystemMatrix};

/// Default relative truncation tolerance of the exponential series.
pub const DEFAULT_EXPM_TOL: f64 = 1e-12;

const MAX_SERIES_TERMS: usize = 200;

fn max_norm<const D: usize>(m: &SMatrix<f64, D, D>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

fn inf_norm<const D: usize>(m: &SMatrix<f64, D, D>) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `exp(A dt)` by scaling and squaring over the truncated Taylor series.
///
/// `A dt` is scaled by `2^-s` until its infinity norm is at most 0.5, the
/// series is summed until the next term's max-norm drops below
/// `tol * max-norm(sum)`, and the result is squared `s` times.
pub fn matrix_exponential<const D: usize>(
    a: &SMatrix<f64, D, D>,
    dt: f64,
    tol: f64,
) -> Result<SMatrix<f64, D, D>> {
    if !(dt >= 0.0 && dt.is_finite()) {
        return Err(Error::Domain(format!("time step must be finite and >= 0, got {dt}")));
    }
    if !(tol > 0.0) {
        return Err(Error::Domain(format!("tolerance must be positive, got {tol}")));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("matrix exponential of a non-finite matrix".into()));
    }
    let scaled = a * dt;
    let norm = inf_norm(&scaled);
    let mut squarings = 0i32;
    if norm > 0.5 {
        squarings = (norm / 0.5).log2().ceil() as i32;
    }
    let b = scaled / 2f64.powi(squarings);

    let mut sum = SMatrix::<f64, D, D>::identity();
    let mut term = SMatrix::<f64, D, D>::identity();
    for k in 1..=MAX_SERIES_TERMS {
        term = term * b / k as f64;
        sum += term;
        if max_norm(&(term * b)) / (k as f64 + 1.0) < tol * max_norm(&sum) {
            break;
        }
    }
    for _ in 0..squarings {
        sum = sum * sum;
    }
    if sum.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("matrix exponential overflowed".into()));
    }
    Ok(sum)
}

/// Taylor polynomial `sum_{k=0}^{order} (A dt)^k / k!` without scaling.
pub fn truncated_series<const D: usize>(a: &SMatrix<f64, D, D>, dt: f64, order: u32) -> SMatrix<f64, D, D> {
    let b = a * dt;
    let mut sum = SMatrix::<f64, D, D>::identity();
    let mut term = SMatrix::<f64, D, D>::identity();
    for k in 1..=order {
        term = term * b / f64::from(k);
        sum += term;
    }
    sum
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransitionKind {
    Exact,
    FirstOrder,
    /// Taylor truncation of arbitrary order.
    Series(u32),
}

/// Discrete-time propagator of one autonomous system over `t_s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionMatrix {
    pub phi: Matrix5<f64>,
    pub t_s: f64,
    pub n: u8,
    pub kind: TransitionKind,
}

/// Exact transition matrix `exp(A_n t_s)`.
pub fn exact_model(sys: &SystemMatrix, t_s: f64) -> Result<TransitionMatrix> {
    Ok(TransitionMatrix {
        phi: matrix_exponential(&sys.a, t_s, DEFAULT_EXPM_TOL)?,
        t_s,
        n: sys.n,
        kind: TransitionKind::Exact,
    })
}

/// First-order model `K_n = I + A_n t_s`.
pub fn first_order_model(sys: &SystemMatrix, t_s: f64) -> TransitionMatrix {
    TransitionMatrix {
        phi: Matrix5::identity() + sys.a * t_s,
        t_s,
        n: sys.n,
        kind: TransitionKind::FirstOrder,
    }
}

/// Taylor model of the given order; order 1 equals [`first_order_model`].
pub fn series_model(sys: &SystemMatrix, t_s: f64, order: u32) -> TransitionMatrix {
    if order == 1 {
        return first_order_model(sys, t_s);
    }
    TransitionMatrix {
        phi: truncated_series(&sys.a, t_s, order),
        t_s,
        n: sys.n,
        kind: TransitionKind::Series(order),
    }
}

impl TransitionMatrix {
    pub fn propagate(&self, x: &StateVector) -> StateVector {
        StateVector::from_vector(self.phi * x.as_vector())
            .expect("transition matrices keep the constant row fixed")
    }

    /// Row-major CSV with 17 significant digits, one matrix row per line.
    pub fn to_csv(&self) -> String {
        matrix_to_csv(&self.phi)
    }
}

pub fn matrix_to_csv<const R: usize, const C: usize>(m: &SMatrix<f64, R, C>) -> String {
    let mut out = String::new();
    for r in 0..R {
        let row: Vec<String> = (0..C).map(|c| format!("{:.16e}", m[(r, c)])).collect();
        let _ = writeln!(out, "{}", row.join(","));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_system_matrix, DriveParameters, OperatingConditions};
    use nalgebra::Matrix2;

    fn rotation_generator(w: f64) -> Matrix2<f64> {
        Matrix2::new(0.0, w, -w, 0.0)
    }

    #[test]
    fn zero_step_is_identity() {
        let p = DriveParameters::default();
        let a = build_system_matrix(&p, 314.0, 4).unwrap();
        assert_eq!(matrix_exponential(&a.a, 0.0, 1e-12).unwrap(), Matrix5::identity());
    }

    #[test]
    fn rotation_block_closed_form() {
        let c = OperatingConditions::default();
        let phi = matrix_exponential(&rotation_generator(c.omega_el), c.t_s, 1e-12).unwrap();
        let th = c.omega_el * c.t_s;
        let expect = Matrix2::new(th.cos(), th.sin(), -th.sin(), th.cos());
        assert!((phi - expect).abs().max() <= 1e-12);
        assert!((phi[(0, 0)] - 0.999_876_63).abs() < 1e-8);
        assert!((phi[(0, 1)] - 0.015_707_32).abs() < 1e-8);
    }

    #[test]
    fn nilpotent_series_terminates() {
        let a = Matrix2::new(0.0, 3.5, 0.0, 0.0);
        let phi = matrix_exponential(&a, 0.2, 1e-12).unwrap();
        assert!((phi - Matrix2::new(1.0, 0.7, 0.0, 1.0)).abs().max() <= 1e-15);
    }

    #[test]
    fn first_order_formula() {
        let sys = SystemMatrix {
            a: Matrix5::zeros(),
            n: 1,
        };
        assert_eq!(first_order_model(&sys, 50e-6).phi, Matrix5::identity());
        let c = OperatingConditions::default();
        let k = Matrix2::identity() + rotation_generator(c.omega_el) * c.t_s;
        assert!((k[(0, 1)] - 0.015_708_0).abs() < 1e-7);
        assert_eq!(k[(0, 0)], 1.0);
    }

    #[test]
    fn rejects_bad_input() {
        let mut a = Matrix2::<f64>::zeros();
        assert!(matrix_exponential(&a, -1.0, 1e-12).is_err());
        assert!(matrix_exponential(&a, 1.0, 0.0).is_err());
        a[(0, 0)] = f64::NAN;
        assert!(matches!(matrix_exponential(&a, 1.0, 1e-12), Err(Error::Numeric(_))));
    }

    #[test]
    fn large_norm_uses_squaring() {
        // exp of diag(-50, 3) over t=1 exercises many squarings
        let a = Matrix2::new(-50.0, 0.0, 0.0, 3.0);
        let phi = matrix_exponential(&a, 1.0, 1e-14).unwrap();
        assert!((phi[(0, 0)] - (-50f64).exp()).abs() < 1e-30);
        assert!((phi[(1, 1)] / 3f64.exp() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn csv_export_has_five_rows_of_five() {
        let p = DriveParameters::default();
        let c = OperatingConditions::default();
        let sys = build_system_matrix(&p, c.omega_el, 2).unwrap();
        let csv = exact_model(&sys, c.t_s).unwrap().to_csv();
        let rows: Vec<_> = csv.lines().collect();
        assert_eq!(rows.len(), 5);
        for row in rows {
            let vals: Vec<f64> = row.split(',').map(|v| v.parse().unwrap()).collect();
            assert_eq!(vals.len(), 5);
        }
    }

    #[test]
    fn series_model_order_one_is_first_order() {
        let p = DriveParameters::default();
        let sys = build_system_matrix(&p, 314.0, 5).unwrap();
        assert_eq!(series_model(&sys, 50e-6, 1), first_order_model(&sys, 50e-6));
        let exact = exact_model(&sys, 50e-6).unwrap();
        let high = series_model(&sys, 50e-6, 12);
        assert!((high.phi - exact.phi).abs().max() < 1e-10);
    }
}
