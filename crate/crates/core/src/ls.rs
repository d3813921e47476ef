//! Least-squares extraction of the per-vector transition gains.
//!
//! For subset `n` the regressors are `w = [i_d, i_q, sin eps, cos eps, 1]`
//! at `k` and the targets the currents at `k+1`; `K_n = Y W^+`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, Matrix2x5};
use rayon::prelude::*;

use crate::dataset::{class_of, ClassIndex, Dataset, GridSpec, Sample};
use crate::error::{Error, Result};
use crate::mlp::Observation;
use crate::mpc::{LinearModel, PredictionModel};
use crate::StateVector;
use crate::NUM_SUBSETS;

/// Relative singular-value cutoff of the pseudo-inverse.
pub const SVD_CUTOFF: f64 = 1e-10;

/// Extra regressor computed from `(i_d, i_q, eps)`.
pub type FeatureFn = fn(f64, f64, f64) -> f64;

/// Which samples of a subset enter a fit.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Neighborhood {
    #[default]
    Global,
    /// Samples of one grid class.
    Class(ClassIndex, GridSpec),
    /// Samples within `radius` A of `(i_d, i_q)`.
    Ball { i_d: f64, i_q: f64, radius: f64 },
}

impl Neighborhood {
    pub fn contains(&self, s: &Sample) -> bool {
        match self {
            Neighborhood::Global => true,
            Neighborhood::Class(c, g) => class_of(s, g).is_ok_and(|k| k == *c),
            Neighborhood::Ball { i_d, i_q, radius } => (s.i_d_k - i_d).hypot(s.i_q_k - i_q) <= *radius,
        }
    }
}

/// Regressor and target matrices of one subset.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionData {
    /// `(5 + extra) x j`, rows `i_d, i_q, sin eps, cos eps, 1, extra...`.
    pub w: DMatrix<f64>,
    /// `2 x j`.
    pub y: DMatrix<f64>,
    pub n: u8,
}

/// Regression of subset `n` over the whole dataset.
pub fn build_regression(d: &Dataset, n: u8) -> Result<RegressionData> {
    build_regression_with(d, n, Neighborhood::Global, &[])
}

/// Regression of subset `n` restricted to `hood`, with extra feature rows.
pub fn build_regression_with(d: &Dataset, n: u8, hood: Neighborhood, extra: &[FeatureFn]) -> Result<RegressionData> {
    let rows = 5 + extra.len();
    let samples: Vec<&Sample> = d.subset(n).filter(|s| hood.contains(s)).collect();
    if samples.is_empty() {
        return Err(Error::Fit {
            n,
            reason: "no samples for this subset".into(),
        });
    }
    let j = samples.len();
    let mut w = DMatrix::zeros(rows, j);
    let mut y = DMatrix::zeros(2, j);
    for (c, s) in samples.iter().enumerate() {
        let (sin, cos) = s.eps_k.sin_cos();
        w[(0, c)] = s.i_d_k;
        w[(1, c)] = s.i_q_k;
        w[(2, c)] = sin;
        w[(3, c)] = cos;
        w[(4, c)] = 1.0;
        for (e, f) in extra.iter().enumerate() {
            w[(5 + e, c)] = f(s.i_d_k, s.i_q_k, s.eps_k);
        }
        y[(0, c)] = s.i_d_k1;
        y[(1, c)] = s.i_q_k1;
    }
    Ok(RegressionData { w, y, n })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    /// `2 x (5 + extra)` gain.
    pub k: DMatrix<f64>,
    /// RMS residual per current channel in A.
    pub residual_rms: [f64; 2],
    pub condition_number: f64,
    pub sample_count: usize,
    pub n: u8,
}

impl FitReport {
    /// The standard 2x5 gain; fails when extra features were used.
    pub fn gain(&self) -> Result<Matrix2x5<f64>> {
        if self.k.shape() != (2, 5) {
            return Err(Error::Fit {
                n: self.n,
                reason: format!("gain has shape {:?}, expected 2x5", self.k.shape()),
            });
        }
        Ok(Matrix2x5::from_iterator(self.k.iter().copied()))
    }
}

/// Minimizes `||Y - K W||_F`.
///
/// With `ridge = 0` the SVD pseudo-inverse of the row-equilibrated `W` is
/// used, with singular values below `SVD_CUTOFF * sigma_max` dropped. With `ridge > 0`
/// the regularized normal equations `K (W W^T + lambda I) = Y W^T` are solved
/// with `lambda = ridge * trace(W W^T) / rows`.
pub fn ls_fit(r: &RegressionData, ridge: f64) -> Result<FitReport> {
    let n = r.n;
    let fit_err = |reason: String| Error::Fit { n, reason };
    if r.w.ncols() == 0 || r.w.ncols() != r.y.ncols() || r.y.nrows() != 2 {
        return Err(fit_err(format!(
            "regressor and target shapes {:?} and {:?} do not match",
            r.w.shape(),
            r.y.shape()
        )));
    }
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(fit_err(format!("ridge must be finite and >= 0, got {ridge}")));
    }
    if r.w.iter().all(|v| *v == 0.0) {
        return Err(fit_err("all-zero regressor matrix".into()));
    }
    if r.w.iter().chain(r.y.iter()).any(|v| !v.is_finite()) {
        return Err(fit_err("non-finite regressors or targets".into()));
    }

    // nalgebra's SVD loses accuracy on badly scaled inputs (currents next to
    // sin/cos rows), so rows are equilibrated first: K = (Y (D W)^+) D
    let scale: Vec<f64> = r
        .w
        .row_iter()
        .map(|row| {
            let norm = row.norm();
            if norm > 0.0 {
                1.0 / norm
            } else {
                1.0
            }
        })
        .collect();
    let mut scaled = r.w.transpose();
    for (mut col, s) in scaled.column_iter_mut().zip(&scale) {
        col *= *s;
    }
    let gram_eigen = (&r.w * r.w.transpose()).symmetric_eigenvalues();
    let (e_max, e_min) = (gram_eigen.max(), gram_eigen.min());
    let condition_number = if e_min > 0.0 {
        (e_max / e_min).sqrt()
    } else {
        f64::INFINITY
    };

    let k = if ridge == 0.0 {
        let svd = scaled.svd(true, true);
        let s_max = svd.singular_values.max();
        let mut k = svd
            .solve(&r.y.transpose(), SVD_CUTOFF * s_max)
            .map_err(|e| fit_err(format!("pseudo-inverse solve failed: {e}")))?
            .transpose();
        for (mut col, s) in k.column_iter_mut().zip(&scale) {
            col *= *s;
        }
        k
    } else {
        let gram = &r.w * r.w.transpose();
        let lambda = ridge * gram.trace() / gram.nrows() as f64;
        let lhs = gram + DMatrix::identity(r.w.nrows(), r.w.nrows()) * lambda;
        let rhs = &r.w * r.y.transpose();
        let chol = lhs
            .cholesky()
            .ok_or_else(|| fit_err("regularized normal equations are not positive definite".into()))?;
        chol.solve(&rhs).transpose()
    };

    let resid = &r.y - &k * &r.w;
    let j = r.w.ncols() as f64;
    let rms = |row: usize| (resid.row(row).norm_squared() / j).sqrt();
    Ok(FitReport {
        residual_rms: [rms(0), rms(1)],
        condition_number,
        sample_count: r.w.ncols(),
        n,
        k,
    })
}

/// Fits all seven subsets in parallel and assembles a least-squares model.
pub fn fit_all(d: &Dataset, ridge: f64, hood: Neighborhood, t_s: f64) -> Result<(PredictionModel, Vec<FitReport>)> {
    let reports = (1..=NUM_SUBSETS as u8)
        .into_par_iter()
        .map(|n| ls_fit(&build_regression_with(d, n, hood, &[])?, ridge))
        .collect::<Result<Vec<_>>>()?;
    let gains = reports.iter().map(FitReport::gain).collect::<Result<Vec<_>>>()?;
    Ok((PredictionModel::LeastSquares(LinearModel::new(gains, t_s)?), reports))
}

pub fn fit_reports_csv(reports: &[FitReport]) -> String {
    let mut out = String::from("n,samples,residual_rms_d,residual_rms_q,condition_number\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{:.16e},{:.16e},{:.16e}",
            r.n, r.sample_count, r.residual_rms[0], r.residual_rms[1], r.condition_number
        );
    }
    out
}

/// One-step-ahead RMS error of a subset or of the whole test set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RmsRow {
    /// `None` for the overall row.
    pub n: Option<u8>,
    pub samples: usize,
    pub rms_d: f64,
    pub rms_q: f64,
}

impl RmsRow {
    /// Combined RMS over both channels.
    pub fn rms(&self) -> f64 {
        ((self.rms_d * self.rms_d + self.rms_q * self.rms_q) / 2.0).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub per_subset: Vec<RmsRow>,
    pub overall: RmsRow,
}

impl Evaluation {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("subset,samples,rms_d,rms_q,rms\n");
        for r in self.per_subset.iter().chain(std::iter::once(&self.overall)) {
            let label = r.n.map_or_else(|| "all".to_string(), |n| n.to_string());
            let _ = writeln!(out, "{label},{},{:.16e},{:.16e},{:.16e}", r.samples, r.rms_d, r.rms_q, r.rms());
        }
        out
    }
}

/// Predicts every test sample and accumulates squared errors per subset.
pub fn evaluate(m: &PredictionModel, test: &Dataset) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::Evaluation("test dataset is empty".into()));
    }
    let errors = test
        .samples
        .par_iter()
        .map(|s| {
            let x = match m {
                PredictionModel::Mlp(_) => {
                    let o = Observation::from(s);
                    StateVector::from_parts(o.i_d, o.i_q, o.sin_eps, o.cos_eps)
                }
                _ => StateVector::from_angle(s.i_d_k, s.i_q_k, s.eps_k),
            };
            let (d, q) = m
                .predict(s.n_k, &x, s.n_k_prev)
                .map_err(|e| Error::Evaluation(format!("{} model cannot predict subset {}: {e}", m.kind(), s.n_k)))?;
            Ok((s.n_k, d - s.i_d_k1, q - s.i_q_k1))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut acc = [(0usize, 0.0f64, 0.0f64); NUM_SUBSETS];
    for (n, ed, eq) in &errors {
        let a = &mut acc[usize::from(*n) - 1];
        a.0 += 1;
        a.1 += ed * ed;
        a.2 += eq * eq;
    }
    let row = |n: Option<u8>, (c, sd, sq): (usize, f64, f64)| RmsRow {
        n,
        samples: c,
        rms_d: if c > 0 { (sd / c as f64).sqrt() } else { 0.0 },
        rms_q: if c > 0 { (sq / c as f64).sqrt() } else { 0.0 },
    };
    let total = acc.iter().fold((0, 0.0, 0.0), |t, a| (t.0 + a.0, t.1 + a.1, t.2 + a.2));
    Ok(Evaluation {
        per_subset: acc.iter().enumerate().map(|(i, a)| row(Some(i as u8 + 1), *a)).collect(),
        overall: row(None, total),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn synthetic(k: &DMatrix<f64>, j: usize, seed: u64) -> RegressionData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = DMatrix::from_fn(5, j, |_, _| rng.random_range(-1.0..1.0));
        w.row_mut(4).fill(1.0);
        let y = k * &w;
        RegressionData { w, y, n: 3 }
    }

    fn random_k(seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(2, 5, |_, _| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn builds_regressors_in_dataset_order() {
        let s = |id: f64, n: u8, eps: f64| Sample {
            i_d_k: id,
            i_q_k: -1.0,
            eps_k: eps,
            n_k: n,
            n_k_prev: n,
            i_d_k1: id + 1.0,
            i_q_k1: 0.0,
        };
        let d = Dataset::new(vec![s(-1.0, 2, 0.0), s(-5.0, 3, 0.0), s(-2.0, 2, 0.0), s(-3.0, 2, 1.0)]).unwrap();
        let r = build_regression(&d, 2).unwrap();
        assert_eq!(r.w.shape(), (5, 3));
        assert_eq!(r.w.row(0).iter().copied().collect::<Vec<_>>(), vec![-1.0, -2.0, -3.0]);
        assert!(r.w.row(4).iter().all(|v| *v == 1.0));
        assert_eq!((r.w[(2, 0)], r.w[(3, 0)]), (0.0, 1.0));
        assert!(matches!(build_regression(&d, 5), Err(Error::Fit { n: 5, .. })));
    }

    #[test]
    fn recovers_generating_gain() {
        let k = random_k(1);
        let rep = ls_fit(&synthetic(&k, 200, 2), 0.0).unwrap();
        assert!((&rep.k - &k).abs().max() <= 1e-8);
        assert!(rep.residual_rms[0] < 1e-10 && rep.residual_rms[1] < 1e-10);
        assert_eq!(rep.sample_count, 200);
    }

    #[test]
    fn identity_targets_give_identity_gain() {
        let mut r = synthetic(&random_k(3), 50, 4);
        r.y = r.w.rows(0, 2).into_owned();
        let rep = ls_fit(&r, 0.0).unwrap();
        let mut expect = DMatrix::zeros(2, 5);
        expect[(0, 0)] = 1.0;
        expect[(1, 1)] = 1.0;
        assert!((&rep.k - expect).abs().max() <= 1e-10);
    }

    #[test]
    fn all_zero_regressors_are_rejected() {
        let r = RegressionData {
            w: DMatrix::zeros(5, 10),
            y: DMatrix::zeros(2, 10),
            n: 4,
        };
        assert!(matches!(ls_fit(&r, 0.0), Err(Error::Fit { n: 4, .. })));
    }

    #[test]
    fn matches_normal_equations() {
        let mut r = synthetic(&random_k(5), 300, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        r.y.iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
        let rep = ls_fit(&r, 0.0).unwrap();
        let gram = &r.w * r.w.transpose();
        let normal = (&r.y * r.w.transpose()) * gram.try_inverse().unwrap();
        assert!((&rep.k - normal).abs().max() <= 1e-8);
    }

    #[test]
    fn residual_is_local_minimum() {
        let mut r = synthetic(&random_k(8), 100, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        r.y.iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
        let rep = ls_fit(&r, 0.0).unwrap();
        let frob = |k: &DMatrix<f64>| (&r.y - k * &r.w).norm_squared();
        let base = frob(&rep.k);
        for i in 0..rep.k.len() {
            for delta in [1e-3, -1e-3] {
                let mut k = rep.k.clone();
                k[i] += delta;
                assert!(frob(&k) > base);
            }
        }
    }

    #[test]
    fn ridge_shrinks_towards_zero() {
        let r = synthetic(&random_k(11), 100, 12);
        let plain = ls_fit(&r, 0.0).unwrap();
        let small = ls_fit(&r, 1e-12).unwrap();
        assert!((&plain.k - &small.k).abs().max() < 1e-6);
        let big = ls_fit(&r, 10.0).unwrap();
        assert!(big.k.norm() < plain.k.norm());
        assert!(ls_fit(&r, -1.0).is_err());
    }

    #[test]
    fn extra_features_extend_the_gain() {
        let s = |i: usize| {
            let f = i as f64;
            Sample {
                i_d_k: -f,
                i_q_k: -(f * 0.37).sin() * 40.0,
                eps_k: (f * 0.71).sin() * 3.0,
                n_k: 2,
                n_k_prev: 2,
                i_d_k1: -f + 0.5 * f * f / 100.0,
                i_q_k1: 0.0,
            }
        };
        let d = Dataset::new((0..60).map(s).collect()).unwrap();
        let sq: FeatureFn = |i_d, _, _| i_d * i_d;
        let r = build_regression_with(&d, 2, Neighborhood::Global, &[sq]).unwrap();
        let rep = ls_fit(&r, 0.0).unwrap();
        assert_eq!(rep.k.shape(), (2, 6));
        assert!((rep.k[(0, 5)] - 0.005).abs() < 1e-9);
        assert!(rep.gain().is_err());
    }

    #[test]
    fn ball_neighborhood_filters_samples() {
        let hood = Neighborhood::Ball {
            i_d: -10.0,
            i_q: -10.0,
            radius: 5.0,
        };
        let mut s = Sample {
            i_d_k: -12.0,
            i_q_k: -9.0,
            eps_k: 0.0,
            n_k: 1,
            n_k_prev: 1,
            i_d_k1: 0.0,
            i_q_k1: 0.0,
        };
        assert!(hood.contains(&s));
        s.i_d_k = -20.0;
        assert!(!hood.contains(&s));
    }
}
