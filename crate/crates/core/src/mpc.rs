//! Horizon-1 finite-control-set model predictive control.
//!
//! Each cycle the controller predicts the currents at `k+1` for every
//! candidate vector `1..=7`, evaluates a weighted quadratic tracking cost and
//! applies the minimizer.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix2x5, SMatrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::discretization::{exact_model, first_order_model, series_model, TransitionMatrix};
use crate::error::{Error, Result};
use crate::mlp::{MlpModel, Observation};
use crate::model::{build_system_matrix, elementary_vector, DriveParameters, OperatingConditions, StateVector};
use crate::plant::{Plant, PlantConfig, PlantState};
use crate::NUM_SUBSETS;

/// Current reference for the controller.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reference {
    pub i_d_ref: f64,
    pub i_q_ref: f64,
}

impl Reference {
    pub fn new(i_d_ref: f64, i_q_ref: f64) -> Self {
        Self { i_d_ref, i_q_ref }
    }

    pub fn validate(&self, i_max: f64) -> Result<()> {
        let (d, q) = (self.i_d_ref, self.i_q_ref);
        if !(d <= 0.0 && q <= 0.0 && d.hypot(q) <= i_max + 1e-9) {
            return Err(Error::Validation(format!(
                "reference ({d}, {q}) A outside the quadrant i_d <= 0, i_q <= 0, |i| <= {i_max}"
            )));
        }
        Ok(())
    }
}

/// Weights of the squared d/q tracking errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostWeights {
    pub d: f64,
    pub q: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self { d: 1.0, q: 1.0 }
    }
}

/// Seven current-row gains `[K_n]_{1:2, :}` for `n = 1..=7`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub gains: Vec<Matrix2x5<f64>>,
    pub t_s: f64,
}

impl LinearModel {
    pub fn new(gains: Vec<Matrix2x5<f64>>, t_s: f64) -> Result<Self> {
        if gains.len() != NUM_SUBSETS {
            return Err(Error::Config(format!(
                "linear model needs {NUM_SUBSETS} sub-models, got {}",
                gains.len()
            )));
        }
        Ok(Self { gains, t_s })
    }

    pub fn from_transitions(ms: &[TransitionMatrix]) -> Result<Self> {
        let t_s = ms.first().map_or(0.0, |m| m.t_s);
        Self::new(
            ms.iter().take(NUM_SUBSETS).map(|m| m.phi.fixed_rows::<2>(0).into_owned()).collect(),
            t_s,
        )
    }

    fn predict(&self, n: u8, x: &StateVector) -> Result<(f64, f64)> {
        let k = self.gains.get(usize::from(n) - 1).ok_or_else(|| {
            Error::Config(format!("linear model lacks a sub-model for n = {n}"))
        })?;
        let y = k * x.as_vector();
        Ok((y[0], y[1]))
    }
}

/// Any of the supported one-step predictors.
#[derive(Debug, Clone, PartialEq)]
pub enum PredictionModel {
    FirstOrder(LinearModel),
    Exact(LinearModel),
    LeastSquares(LinearModel),
    Mlp(MlpModel),
}

fn white_box(
    p: &DriveParameters,
    c: &OperatingConditions,
    f: impl Fn(&crate::model::SystemMatrix) -> Result<TransitionMatrix>,
) -> Result<LinearModel> {
    let ms = (1..=NUM_SUBSETS as u8)
        .map(|n| f(&build_system_matrix(p, c.omega_el, n)?))
        .collect::<Result<Vec<_>>>()?;
    LinearModel::from_transitions(&ms)
}

impl PredictionModel {
    /// Exact discretization `exp(A_n T_s)` of the nominal white-box model.
    pub fn exact(p: &DriveParameters, c: &OperatingConditions) -> Result<Self> {
        Ok(PredictionModel::Exact(white_box(p, c, |s| exact_model(s, c.t_s))?))
    }

    /// First-order discretization `I + A_n T_s`.
    pub fn first_order(p: &DriveParameters, c: &OperatingConditions) -> Result<Self> {
        Ok(PredictionModel::FirstOrder(white_box(p, c, |s| Ok(first_order_model(s, c.t_s)))?))
    }

    /// Taylor discretization of the given order, stored as a first-order kind
    /// for order 1 and as an exact kind otherwise.
    pub fn series(p: &DriveParameters, c: &OperatingConditions, order: u32) -> Result<Self> {
        let m = white_box(p, c, |s| Ok(series_model(s, c.t_s, order)))?;
        Ok(if order == 1 {
            PredictionModel::FirstOrder(m)
        } else {
            PredictionModel::Exact(m)
        })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            PredictionModel::FirstOrder(_) => "first_order",
            PredictionModel::Exact(_) => "exact",
            PredictionModel::LeastSquares(_) => "least_squares",
            PredictionModel::Mlp(_) => "mlp",
        }
    }

    pub fn t_s(&self) -> f64 {
        match self {
            PredictionModel::FirstOrder(m)
            | PredictionModel::Exact(m)
            | PredictionModel::LeastSquares(m) => m.t_s,
            PredictionModel::Mlp(m) => m.t_s,
        }
    }

    /// Predicted currents at `k+1` when vector `n` is applied from `x`.
    /// Matrix models ignore `n_prev`.
    pub fn predict(&self, n: u8, x: &StateVector, n_prev: u8) -> Result<(f64, f64)> {
        for (name, v) in [("n", n), ("n_prev", n_prev)] {
            if !(1..=NUM_SUBSETS as u8).contains(&v) {
                return Err(Error::Domain(format!("{name} must be in 1..=7, got {v}")));
            }
        }
        match self {
            PredictionModel::FirstOrder(m)
            | PredictionModel::Exact(m)
            | PredictionModel::LeastSquares(m) => m.predict(n, x),
            PredictionModel::Mlp(m) => m.predict(&Observation {
                i_d: x.i_d(),
                i_q: x.i_q(),
                sin_eps: x.sin_eps(),
                cos_eps: x.cos_eps(),
                n,
                n_prev,
            }),
        }
    }

    /// Serializes to the plain-text model format.
    ///
    /// Linear models are written as `kind,<name>`, `t_s,<seconds>`, then per
    /// sub-model a header `n,<n>,shape,2x5` followed by two comma-separated
    /// rows. Network models embed the flat network format.
    pub fn to_text(&self) -> String {
        match self {
            PredictionModel::FirstOrder(m)
            | PredictionModel::Exact(m)
            | PredictionModel::LeastSquares(m) => {
                let mut out = format!("kind,{}\nt_s,{:.16e}\n", self.kind(), m.t_s);
                for (i, k) in m.gains.iter().enumerate() {
                    let _ = writeln!(out, "n,{},shape,2x5", i + 1);
                    out.push_str(&crate::discretization::matrix_to_csv(k));
                }
                out
            }
            PredictionModel::Mlp(m) => format!("kind,mlp\n{}", m.to_text()),
        }
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, first) = lines.next().ok_or_else(|| Error::Parse {
            line: 1,
            message: "empty model file".into(),
        })?;
        let kind = first.strip_prefix("kind,").ok_or_else(|| Error::Parse {
            line: 1,
            message: format!("expected `kind,<name>`, got `{first}`"),
        })?;
        if kind == "mlp" {
            let rest: String = text.split_once('\n').map_or("", |(_, r)| r).to_string();
            return Ok(PredictionModel::Mlp(MlpModel::from_text(&rest)?));
        }
        let parse_err = |line: usize, message: String| Error::Parse {
            line: line as u64 + 1,
            message,
        };
        let (ln, t_line) = lines.next().ok_or_else(|| parse_err(1, "missing t_s line".into()))?;
        let t_s: f64 = t_line
            .strip_prefix("t_s,")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| parse_err(ln, format!("expected `t_s,<seconds>`, got `{t_line}`")))?;
        let mut gains = Vec::new();
        while let Some((ln, header)) = lines.next() {
            if header.trim().is_empty() {
                continue;
            }
            let expected = format!("n,{},shape,2x5", gains.len() + 1);
            if header.trim() != expected {
                return Err(parse_err(ln, format!("expected `{expected}`, got `{header}`")));
            }
            let mut k = SMatrix::<f64, 2, 5>::zeros();
            for r in 0..2 {
                let (ln, row) = lines
                    .next()
                    .ok_or_else(|| parse_err(ln, "truncated matrix block".into()))?;
                let vals: Vec<f64> = row
                    .split(',')
                    .map(|v| v.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| parse_err(ln, format!("bad matrix entry: {e}")))?;
                if vals.len() != 5 {
                    return Err(parse_err(ln, format!("expected 5 columns, got {}", vals.len())));
                }
                for (c, v) in vals.into_iter().enumerate() {
                    k[(r, c)] = v;
                }
            }
            gains.push(k);
        }
        let m = LinearModel::new(gains, t_s)?;
        match kind {
            "first_order" => Ok(PredictionModel::FirstOrder(m)),
            "exact" => Ok(PredictionModel::Exact(m)),
            "least_squares" => Ok(PredictionModel::LeastSquares(m)),
            other => Err(Error::Parse {
                line: 1,
                message: format!("unknown model kind `{other}`"),
            }),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Picks the vector in `1..=7` whose predicted currents minimize
/// `w_d (i_d - i_d_ref)^2 + w_q (i_q - i_q_ref)^2`.
///
/// Exact ties prefer `n_prev` (no switching), then the lowest index.
pub fn mpc_step(
    m: &PredictionModel,
    x: &StateVector,
    reference: &Reference,
    n_prev: u8,
    weights: &CostWeights,
) -> Result<u8> {
    Ok(evaluate_candidates(m, x, reference, n_prev, weights)?.0)
}

/// Chosen vector and its predicted cost.
pub fn evaluate_candidates(
    m: &PredictionModel,
    x: &StateVector,
    reference: &Reference,
    n_prev: u8,
    weights: &CostWeights,
) -> Result<(u8, f64)> {
    let mut best: Option<(u8, f64)> = None;
    for n in 1..=NUM_SUBSETS as u8 {
        let (id, iq) = m.predict(n, x, n_prev)?;
        let cost = weights.d * (id - reference.i_d_ref).powi(2) + weights.q * (iq - reference.i_q_ref).powi(2);
        if !cost.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite cost from the {} model's sub-model n = {n}",
                m.kind()
            )));
        }
        best = match best {
            None => Some((n, cost)),
            Some((bn, bc)) if cost < bc || (cost == bc && n == n_prev && bn != n_prev) => Some((n, cost)),
            keep => keep,
        };
    }
    Ok(best.expect("seven candidates evaluated"))
}

/// One controller cycle of a closed-loop run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryPoint {
    pub cycle: usize,
    /// True currents at the start of the cycle.
    pub i_d: f64,
    pub i_q: f64,
    pub n: u8,
    /// Predicted cost of the applied vector.
    pub cost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosedLoopMetrics {
    /// RMS of the true tracking error over the steady-state window, in A.
    pub rms_error: f64,
    pub rms_d: f64,
    pub rms_q: f64,
    /// Mean per-leg switching frequency, in Hz.
    pub switching_frequency: f64,
    pub exceeds_f_sw_max: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopRun {
    pub trajectory: Vec<TrajectoryPoint>,
    pub final_state: PlantState,
    pub metrics: ClosedLoopMetrics,
}

/// Options of [`run_closed_loop`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosedLoopOptions {
    pub initial: PlantState,
    pub weights: CostWeights,
    /// Fraction of leading cycles excluded from the steady-state RMS.
    pub settle_fraction: f64,
}

impl Default for ClosedLoopOptions {
    fn default() -> Self {
        Self {
            initial: PlantState::new(0.0, 0.0, 0.0),
            weights: CostWeights::default(),
            settle_fraction: 0.5,
        }
    }
}

/// Alternates controller decisions and plant cycles.
///
/// The controller sees noisy measured currents and the exact angle, with no
/// computation-delay compensation. Switching frequency counts phase-leg
/// toggles: `f_sw = toggles / (3 legs * 2 * cycles * T_s)`.
pub fn run_closed_loop(
    plant_cfg: &PlantConfig,
    m: &PredictionModel,
    reference: &Reference,
    cycles: usize,
    opts: &ClosedLoopOptions,
) -> Result<ClosedLoopRun> {
    if cycles < 1 {
        return Err(Error::Validation("closed loop needs at least one cycle".into()));
    }
    let plant = Plant::new(*plant_cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(plant_cfg.seed);
    let mut x = opts.initial;
    let mut n_prev = 1u8;
    let mut toggles = 0u64;
    let mut trajectory = Vec::with_capacity(cycles);
    let settle = ((cycles as f64) * opts.settle_fraction.clamp(0.0, 1.0)).floor() as usize;
    let (mut sum_d, mut sum_q, mut count) = (0.0, 0.0, 0usize);
    for cycle in 0..cycles {
        let (md, mq) = plant.measure(&x, &mut rng);
        let sv = StateVector::from_angle(md, mq, x.eps);
        let (n, cost) = evaluate_candidates(m, &sv, reference, n_prev, &opts.weights)?;
        toggles += u64::from(elementary_vector(n_prev)?.toggles_to(&elementary_vector(n)?));
        trajectory.push(TrajectoryPoint {
            cycle,
            i_d: x.i_d,
            i_q: x.i_q,
            n,
            cost,
        });
        x = plant.step(&x, n)?;
        n_prev = n;
        if cycle >= settle {
            sum_d += (x.i_d - reference.i_d_ref).powi(2);
            sum_q += (x.i_q - reference.i_q_ref).powi(2);
            count += 1;
        }
    }
    let count = count.max(1) as f64;
    let duration = cycles as f64 * plant_cfg.cond.t_s;
    let f_sw = toggles as f64 / (3.0 * 2.0 * duration);
    Ok(ClosedLoopRun {
        trajectory,
        final_state: x,
        metrics: ClosedLoopMetrics {
            rms_error: ((sum_d + sum_q) / count).sqrt(),
            rms_d: (sum_d / count).sqrt(),
            rms_q: (sum_q / count).sqrt(),
            switching_frequency: f_sw,
            exceeds_f_sw_max: f_sw > plant_cfg.cond.f_sw_max,
        },
    })
}

/// Trajectory as CSV with header `cycle,i_d,i_q,n,cost`.
pub fn write_trajectory_csv<W: Write>(run: &ClosedLoopRun, mut w: W) -> std::io::Result<()> {
    writeln!(w, "cycle,i_d,i_q,n,cost")?;
    for p in &run.trajectory {
        writeln!(w, "{},{:.16e},{:.16e},{},{:.16e}", p.cycle, p.i_d, p.i_q, p.n, p.cost)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_model(outputs: [(f64, f64); 7]) -> PredictionModel {
        let gains = outputs
            .iter()
            .map(|&(d, q)| {
                let mut k = Matrix2x5::zeros();
                k[(0, 4)] = d;
                k[(1, 4)] = q;
                k
            })
            .collect();
        PredictionModel::LeastSquares(LinearModel::new(gains, 50e-6).unwrap())
    }

    #[test]
    fn zero_cost_candidate_wins() {
        let mut outs = [(5.0, 5.0); 7];
        outs[4] = (-50.0, -100.0);
        let m = constant_model(outs);
        let x = StateVector::from_angle(0.0, 0.0, 0.0);
        let r = Reference::new(-50.0, -100.0);
        assert_eq!(mpc_step(&m, &x, &r, 1, &CostWeights::default()).unwrap(), 5);
    }

    #[test]
    fn ties_prefer_previous_vector_then_lowest_index() {
        let m = constant_model([(1.0, 1.0); 7]);
        let x = StateVector::from_angle(0.0, 0.0, 0.0);
        let r = Reference::new(0.0, 0.0);
        let w = CostWeights::default();
        assert_eq!(mpc_step(&m, &x, &r, 6, &w).unwrap(), 6);
        let mut outs = [(3.0, 3.0); 7];
        outs[2] = (1.0, 1.0);
        outs[5] = (1.0, 1.0);
        let m = constant_model(outs);
        assert_eq!(mpc_step(&m, &x, &r, 1, &w).unwrap(), 3);
        assert_eq!(mpc_step(&m, &x, &r, 6, &w).unwrap(), 6);
    }

    #[test]
    fn non_finite_cost_names_sub_model() {
        let mut outs = [(1.0, 1.0); 7];
        outs[3] = (f64::NAN, 0.0);
        let m = constant_model(outs);
        let err = mpc_step(&m, &StateVector::from_angle(0.0, 0.0, 0.0), &Reference::new(0.0, 0.0), 1, &CostWeights::default())
            .unwrap_err();
        assert!(err.to_string().contains("n = 4"), "{err}");
    }

    #[test]
    fn missing_sub_model_is_a_config_error() {
        assert!(matches!(
            LinearModel::new(vec![Matrix2x5::zeros(); 6], 50e-6),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn equilibrium_of_zero_vector_is_fixed_point() {
        let p = DriveParameters::default();
        let c = OperatingConditions::default();
        let a = build_system_matrix(&p, c.omega_el, 1).unwrap().a;
        let sub = a.fixed_view::<2, 2>(0, 0).into_owned();
        let rhs = -nalgebra::Vector2::new(a[(0, 4)], a[(1, 4)]);
        let eq = sub.lu().solve(&rhs).unwrap();
        let m = PredictionModel::exact(&p, &c).unwrap();
        let x = StateVector::from_angle(eq[0], eq[1], 0.3);
        let (id, iq) = m.predict(1, &x, 4).unwrap();
        assert!((id - eq[0]).abs() < 1e-9 && (iq - eq[1]).abs() < 1e-9);
    }

    #[test]
    fn standstill_zero_reference_holds_zero_vector() {
        let mut cfg = PlantConfig {
            noise_sigma_current: 0.0,
            ..PlantConfig::default()
        };
        cfg.cond = OperatingConditions::new(0.0, 3, 50e-6, 10e3).unwrap();
        let m = PredictionModel::exact(&cfg.params, &cfg.cond).unwrap();
        let run = run_closed_loop(&cfg, &m, &Reference::new(0.0, 0.0), 100, &ClosedLoopOptions::default()).unwrap();
        assert!(run.trajectory.iter().all(|p| p.n == 1));
        assert_eq!(run.metrics.rms_error, 0.0);
        assert_eq!(run.metrics.switching_frequency, 0.0);
    }

    #[test]
    fn closed_loop_settles_on_linear_plant() {
        let cfg = PlantConfig {
            noise_sigma_current: 0.0,
            ..PlantConfig::default()
        };
        let m = PredictionModel::exact(&cfg.params, &cfg.cond).unwrap();
        let r = Reference::new(-50.0, -100.0);
        let run = run_closed_loop(&cfg, &m, &r, 400, &ClosedLoopOptions::default()).unwrap();
        let worst = run.trajectory[200..]
            .iter()
            .map(|p| (p.i_d - r.i_d_ref).abs().max((p.i_q - r.i_q_ref).abs()))
            .fold(0.0, f64::max);
        assert!(worst <= 5.0, "largest deviation after 200 cycles: {worst:.2} A");
    }

    #[test]
    fn switching_frequency_is_bounded_by_half_the_cycle_rate() {
        let cfg = PlantConfig::default();
        let m = PredictionModel::exact(&cfg.params, &cfg.cond).unwrap();
        let r = Reference::new(-50.0, -100.0);
        let run = run_closed_loop(&cfg, &m, &r, 400, &ClosedLoopOptions::default()).unwrap();
        assert!(run.metrics.switching_frequency <= 1.0 / (2.0 * cfg.cond.t_s));
        assert!(run.metrics.switching_frequency > 0.0);
    }

    #[test]
    fn model_text_round_trip() {
        let p = DriveParameters::default();
        let c = OperatingConditions::default();
        for m in [PredictionModel::exact(&p, &c).unwrap(), PredictionModel::first_order(&p, &c).unwrap()] {
            let back = PredictionModel::from_text(&m.to_text()).unwrap();
            assert_eq!(back, m);
        }
        assert!(PredictionModel::from_text("kind,bogus\nt_s,1\n").is_err());
        assert!(PredictionModel::from_text("").is_err());
    }
}
