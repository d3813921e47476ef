//! Ground-truth simulation of the continuous plant and dataset generation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::dataset::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::flux::{general_ode_rhs, FluxChoice, FluxModel};
use crate::model::{
    dq_voltage, elementary_vector, normalize_angle, DriveParameters, OperatingConditions,
    StateVector, SwitchingState,
};
use crate::mpc::{mpc_step, CostWeights, PredictionModel, Reference};
use crate::NUM_SUBSETS;

/// Simulator settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantConfig {
    pub params: DriveParameters,
    pub cond: OperatingConditions,
    pub flux: FluxChoice,
    /// RK4 steps per controller cycle.
    pub substeps: usize,
    /// Standard deviation of the additive current measurement noise in A.
    pub noise_sigma_current: f64,
    pub seed: u64,
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self {
            params: DriveParameters::default(),
            cond: OperatingConditions::default(),
            flux: FluxChoice::Linear,
            substeps: 10,
            noise_sigma_current: 0.1,
            seed: 0,
        }
    }
}

impl PlantConfig {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if self.substeps < 1 {
            return Err(Error::Validation("substeps must be at least 1".into()));
        }
        if !(self.noise_sigma_current >= 0.0 && self.noise_sigma_current.is_finite()) {
            return Err(Error::Validation("noise sigma must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// True continuous state of the plant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantState {
    pub i_d: f64,
    pub i_q: f64,
    pub eps: f64,
}

impl PlantState {
    pub fn new(i_d: f64, i_q: f64, eps: f64) -> Self {
        Self {
            i_d,
            i_q,
            eps: normalize_angle(eps),
        }
    }

    pub fn to_state_vector(&self) -> StateVector {
        StateVector::from_angle(self.i_d, self.i_q, self.eps)
    }
}

/// Simulator bound to one configuration.
#[derive(Debug, Clone)]
pub struct Plant {
    cfg: PlantConfig,
    flux: FluxModel,
    vectors: [SwitchingState; 8],
}

impl Plant {
    pub fn new(cfg: PlantConfig) -> Result<Self> {
        cfg.validate()?;
        let mut vectors = [elementary_vector(1)?; 8];
        for (n, v) in (1..=8).zip(vectors.iter_mut()) {
            *v = elementary_vector(n)?;
        }
        Ok(Self {
            flux: cfg.flux.build(&cfg.params),
            cfg,
            vectors,
        })
    }

    pub fn config(&self) -> &PlantConfig {
        &self.cfg
    }

    fn derivative(&self, sw: &SwitchingState, i: (f64, f64), eps: f64) -> Result<(f64, f64)> {
        let p = &self.cfg.params;
        let u = dq_voltage(sw, eps, p.u_dc);
        general_ode_rhs(p, &self.flux, self.cfg.cond.omega_el, u, i, eps)
    }

    /// Holds vector `n` for one controller cycle.
    ///
    /// Currents are integrated with classical RK4 over `substeps` equal
    /// steps; the angle advances analytically by `omega_el * t_s`.
    pub fn step(&self, x: &PlantState, n: u8) -> Result<PlantState> {
        if !(1..=8).contains(&n) {
            return Err(Error::Domain(format!("elementary vector index must be in 1..=8, got {n}")));
        }
        let sw = self.vectors[usize::from(n - 1)];
        let w = self.cfg.cond.omega_el;
        let h = self.cfg.cond.t_s / self.cfg.substeps as f64;
        let limit = 10.0 * self.cfg.params.i_max;
        let (mut id, mut iq) = (x.i_d, x.i_q);
        for s in 0..self.cfg.substeps {
            let t = s as f64 * h;
            let e0 = x.eps + w * t;
            let e_mid = e0 + 0.5 * w * h;
            let e1 = e0 + w * h;
            let k1 = self.derivative(&sw, (id, iq), e0)?;
            let k2 = self.derivative(&sw, (id + 0.5 * h * k1.0, iq + 0.5 * h * k1.1), e_mid)?;
            let k3 = self.derivative(&sw, (id + 0.5 * h * k2.0, iq + 0.5 * h * k2.1), e_mid)?;
            let k4 = self.derivative(&sw, (id + h * k3.0, iq + h * k3.1), e1)?;
            id += h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
            iq += h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
            let magnitude = id.hypot(iq);
            if !(magnitude <= limit) {
                return Err(Error::Unstable {
                    time: t + h,
                    magnitude,
                });
            }
        }
        Ok(PlantState::new(id, iq, x.eps + w * self.cfg.cond.t_s))
    }

    /// Currents as seen by the transducers.
    pub fn measure<R: Rng>(&self, x: &PlantState, rng: &mut R) -> (f64, f64) {
        let sigma = self.cfg.noise_sigma_current;
        if sigma == 0.0 {
            return (x.i_d, x.i_q);
        }
        let normal = Normal::new(0.0, sigma).expect("sigma validated");
        (x.i_d + normal.sample(rng), x.i_q + normal.sample(rng))
    }
}

/// One-shot form of [`Plant::step`].
pub fn integrate_cycle(cfg: &PlantConfig, x: &PlantState, n: u8) -> Result<PlantState> {
    Plant::new(*cfg)?.step(x, n)
}

/// Setpoints on a square lattice of `spacing` covering the operating quadrant
/// `i_d <= 0, i_q <= 0, |i| <= i_max`, ordered by `i_d` then `i_q`.
pub fn quadrant_setpoints(i_max: f64, spacing: f64) -> Vec<(f64, f64)> {
    let steps = (i_max / spacing).floor() as i64;
    let mut out = Vec::new();
    for a in 0..=steps {
        for b in 0..=steps {
            let (id, iq) = (-(a as f64) * spacing, -(b as f64) * spacing);
            if id.hypot(iq) <= i_max + 1e-9 {
                out.push((id, iq));
            }
        }
    }
    out
}

fn validate_setpoint(sp: (f64, f64), i_max: f64) -> Result<()> {
    let (id, iq) = sp;
    if !(id <= 0.0 && iq <= 0.0 && id.hypot(iq) <= i_max + 1e-9) {
        return Err(Error::Validation(format!(
            "setpoint ({id}, {iq}) A outside the quadrant i_d <= 0, i_q <= 0, |i| <= {i_max}"
        )));
    }
    Ok(())
}

fn seeded_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Records samples from closed-loop FCS-MPC operation at each setpoint.
///
/// The controller uses the exact white-box model of the nominal parameters.
/// With probability `random_vector_prob` its choice is replaced by a uniform
/// draw from `1..=7`, except on the saturated plant while the measured
/// current exceeds `i_sat`, where the controller keeps control. Each setpoint starts at the setpoint currents with a
/// random angle and runs on its own random stream, so setpoints are simulated
/// in parallel. The merged samples are shuffled.
pub fn generate_dataset(
    cfg: &PlantConfig,
    setpoints: &[(f64, f64)],
    cycles_per_setpoint: usize,
    random_vector_prob: f64,
) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&random_vector_prob) {
        return Err(Error::Validation(format!(
            "random vector probability must lie in [0, 1], got {random_vector_prob}"
        )));
    }
    for sp in setpoints {
        validate_setpoint(*sp, cfg.params.i_max)?;
    }
    let plant = Plant::new(*cfg)?;
    let controller = PredictionModel::exact(&cfg.params, &cfg.cond)?;
    let weights = CostWeights::default();
    // the soft-saturation map is not physical far past i_sat
    let excitation_limit = match cfg.flux {
        FluxChoice::Saturated { i_sat, .. } => Some(i_sat),
        FluxChoice::Linear => None,
    };

    let chunks: Vec<Vec<Sample>> = setpoints
        .par_iter()
        .enumerate()
        .map(|(idx, &(id_ref, iq_ref))| {
            let mut rng = seeded_stream(cfg.seed, idx as u64 + 1);
            let reference = Reference::new(id_ref, iq_ref);
            let mut x = PlantState::new(id_ref, iq_ref, rng.random_range(-std::f64::consts::PI..std::f64::consts::PI));
            let mut n_prev = 1u8;
            let mut meas = plant.measure(&x, &mut rng);
            let mut out = Vec::with_capacity(cycles_per_setpoint);
            for _ in 0..cycles_per_setpoint {
                let sv = StateVector::from_angle(meas.0, meas.1, x.eps);
                let mut n = mpc_step(&controller, &sv, &reference, n_prev, &weights)?;
                let inside = excitation_limit.is_none_or(|lim| meas.0.hypot(meas.1) <= lim);
                if random_vector_prob > 0.0 && rng.random_bool(random_vector_prob) && inside {
                    n = rng.random_range(1..=NUM_SUBSETS as u8);
                }
                let next = plant.step(&x, n)?;
                let meas_next = plant.measure(&next, &mut rng);
                out.push(Sample {
                    i_d_k: meas.0,
                    i_q_k: meas.1,
                    eps_k: x.eps,
                    n_k: n,
                    n_k_prev: n_prev,
                    i_d_k1: meas_next.0,
                    i_q_k1: meas_next.1,
                });
                x = next;
                meas = meas_next;
                n_prev = n;
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let mut d = Dataset {
        samples: chunks.into_iter().flatten().collect(),
    };
    d.shuffle(cfg.seed);
    Ok(d)
}

/// Open-loop excitation: `per_subset` samples for every vector `1..=7`, each
/// started from a state drawn uniformly from the quarter disc of radius
/// `i_max` with a uniform angle and a uniform previous vector.
pub fn generate_excitation(cfg: &PlantConfig, per_subset: usize) -> Result<Dataset> {
    let plant = Plant::new(*cfg)?;
    let i_max = cfg.params.i_max;
    let chunks: Vec<Vec<Sample>> = (1..=NUM_SUBSETS as u8)
        .into_par_iter()
        .map(|n| {
            let mut rng = seeded_stream(cfg.seed, 1000 + u64::from(n));
            let mut out = Vec::with_capacity(per_subset);
            for _ in 0..per_subset {
                let r = i_max * rng.random::<f64>().sqrt();
                let phi = rng.random_range(0.0..std::f64::consts::FRAC_PI_2);
                let x = PlantState::new(
                    -r * phi.cos(),
                    -r * phi.sin(),
                    rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
                );
                let next = plant.step(&x, n)?;
                let m0 = plant.measure(&x, &mut rng);
                let m1 = plant.measure(&next, &mut rng);
                out.push(Sample {
                    i_d_k: m0.0,
                    i_q_k: m0.1,
                    eps_k: x.eps,
                    n_k: n,
                    n_k_prev: rng.random_range(1..=NUM_SUBSETS as u8),
                    i_d_k1: m1.0,
                    i_q_k1: m1.1,
                });
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut d = Dataset {
        samples: chunks.into_iter().flatten().collect(),
    };
    d.shuffle(cfg.seed);
    Ok(d)
}
