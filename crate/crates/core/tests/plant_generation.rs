use pmsm_sysid::discretization::exact_model;
use pmsm_sysid::flux::FluxChoice;
use pmsm_sysid::model::build_system_matrix;
use pmsm_sysid::plant::{generate_dataset, quadrant_setpoints, PlantConfig};
use pmsm_sysid::{Error, StateVector};

fn noiseless_linear() -> PlantConfig {
    PlantConfig {
        flux: FluxChoice::Linear,
        noise_sigma_current: 0.0,
        seed: 11,
        ..PlantConfig::default()
    }
}

#[test]
fn noiseless_linear_samples_follow_transition_matrices() {
    let cfg = noiseless_linear();
    let phis: Vec<_> = (1..=7)
        .map(|n| exact_model(&build_system_matrix(&cfg.params, cfg.cond.omega_el, n).unwrap(), cfg.cond.t_s).unwrap())
        .collect();
    let d = generate_dataset(&cfg, &quadrant_setpoints(240.0, 40.0), 50, 0.0).unwrap();
    assert!(!d.is_empty());
    for s in &d.samples {
        let x = StateVector::from_angle(s.i_d_k, s.i_q_k, s.eps_k);
        let next = phis[usize::from(s.n_k) - 1].propagate(&x);
        assert!((next.i_d() - s.i_d_k1).abs() <= 1e-6, "{s:?}");
        assert!((next.i_q() - s.i_q_k1).abs() <= 1e-6, "{s:?}");
    }
}

#[test]
fn zero_cycles_give_an_empty_dataset() {
    let d = generate_dataset(&PlantConfig::default(), &[(-10.0, -10.0)], 0, 0.3).unwrap();
    assert!(d.is_empty());
}

#[test]
fn setpoints_outside_the_quadrant_are_rejected() {
    let cfg = PlantConfig::default();
    assert!(matches!(generate_dataset(&cfg, &[(10.0, -10.0)], 5, 0.0), Err(Error::Validation(_))));
    assert!(matches!(generate_dataset(&cfg, &[(-200.0, -200.0)], 5, 0.0), Err(Error::Validation(_))));
    assert!(generate_dataset(&cfg, &[(-10.0, -10.0)], 5, 1.5).is_err());
}

#[test]
fn fully_random_vectors_are_uniform() {
    let cfg = PlantConfig {
        seed: 4,
        ..PlantConfig::default()
    };
    let d = generate_dataset(&cfg, &quadrant_setpoints(240.0, 30.0), 200, 1.0).unwrap();
    let total = d.len() as f64;
    let p = 1.0 / 7.0;
    let sd = (total * p * (1.0 - p)).sqrt();
    for (i, c) in d.subset_counts().iter().enumerate() {
        assert!((*c as f64 - total * p).abs() <= 3.0 * sd, "subset {} count {c} of {total}", i + 1);
    }
}

#[test]
fn output_is_reproducible_and_well_formed() {
    let cfg = PlantConfig {
        seed: 9,
        ..PlantConfig::default()
    };
    let sp = quadrant_setpoints(240.0, 60.0);
    let a = generate_dataset(&cfg, &sp, 40, 0.3).unwrap();
    let b = generate_dataset(&cfg, &sp, 40, 0.3).unwrap();
    assert_eq!(a, b);
    for s in &a.samples {
        assert!((1..=7).contains(&s.n_k) && (1..=7).contains(&s.n_k_prev));
        assert!(s.eps_k > -std::f64::consts::PI && s.eps_k <= std::f64::consts::PI);
    }
    let other = generate_dataset(&PlantConfig { seed: 10, ..cfg }, &sp, 40, 0.3).unwrap();
    assert_ne!(a, other);
}
