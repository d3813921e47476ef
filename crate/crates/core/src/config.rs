//! `key = value` run configuration with typed views.
//!
//! Every key has a default; unknown keys are rejected. The resolved table is
//! written back verbatim as a manifest, which parses to the same config.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use crate::dataset::{ColumnMapping, GridAxis, GridSpec};
use crate::error::{Error, Result};
use crate::flux::FluxChoice;
use crate::ls::Neighborhood;
use crate::mlp::{Activation, Feature, MlpTopology, Optimizer, TrainConfig};
use crate::model::{DriveParameters, OperatingConditions};
use crate::mpc::Reference;
use crate::plant::PlantConfig;

/// Every accepted key with its default value.
pub const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    // drive
    ("r_s", "0.018"),
    ("l_d", "370e-6"),
    ("l_q", "1200e-6"),
    ("psi_p", "0.066"),
    ("pole_pairs", "3"),
    ("u_dc", "300"),
    ("i_max", "240"),
    // operating point
    ("n_me", "1000"),
    ("t_s", "50e-6"),
    ("f_sw_max", "10e3"),
    // plant
    ("flux", "saturated"),
    ("i_sat", "300"),
    ("ripple", "0.01"),
    ("substeps", "10"),
    ("noise_sigma", "0.1"),
    // generation
    ("setpoint_spacing", "10"),
    ("cycles_per_setpoint", "200"),
    ("random_vector_prob", "0.3"),
    ("excitation_per_subset", "0"),
    // grid and balancing
    ("grid_d_lo", "-240"),
    ("grid_d_hi", "0"),
    ("grid_q_lo", "-240"),
    ("grid_q_hi", "0"),
    ("grid_dq_step", "10"),
    ("grid_eps_bins", "36"),
    ("cap", "48"),
    ("column_preset", "canonical"),
    ("columns", ""),
    // fitting
    ("holdout", "0.2"),
    ("ridge", "0"),
    ("ls_ball", ""),
    ("series_order", "1"),
    ("mlp_hidden", "64"),
    ("mlp_activation", "tanh"),
    ("mlp_features", "i_d,i_q,sin_eps,cos_eps,onehot_n,onehot_n_prev"),
    ("mlp_per_vector", "false"),
    ("optimizer", "adam"),
    ("learning_rate", "1e-3"),
    ("batch_size", "256"),
    ("epochs", "50"),
    ("validation_fraction", "0.1"),
    // closed loop
    ("references", "-50:-100;-100:-50;-20:-200;-150:-150;-80:-20"),
    ("cycles", "2000"),
    ("settle_fraction", "0.5"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

/// Splits `key = value` lines, skipping blanks and `#` comments.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String, u64)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or_default().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i as u64 + 1,
            message: format!("expected `key = value`, got `{line}`"),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string(), i as u64 + 1));
    }
    Ok(out)
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v, line) in parse_key_values(text)? {
            cfg.set(&k, &v).map_err(|e| Error::Parse {
                line,
                message: e.to_string(),
            })?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown config key `{key}`"))),
        }
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not `key=value`")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("key listed in DEFAULTS")
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.get(key);
        v.parse()
            .map_err(|e| Error::Config(format!("bad value `{v}` for `{key}`: {e}")))
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        self.parse(key)
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.parse(key)
    }

    pub fn seed(&self) -> Result<u64> {
        self.parse("seed")
    }

    /// Sorted `key = value` lines preceded by a comment naming the command.
    pub fn manifest(&self, command: &str) -> String {
        let mut out = format!("# {command}\n");
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn drive_parameters(&self) -> Result<DriveParameters> {
        let p = DriveParameters {
            r_s: self.f64("r_s")?,
            l_d: self.f64("l_d")?,
            l_q: self.f64("l_q")?,
            psi_p: self.f64("psi_p")?,
            pole_pairs: self.parse("pole_pairs")?,
            u_dc: self.f64("u_dc")?,
            i_max: self.f64("i_max")?,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn operating_conditions(&self) -> Result<OperatingConditions> {
        OperatingConditions::new(
            self.f64("n_me")?,
            self.parse("pole_pairs")?,
            self.f64("t_s")?,
            self.f64("f_sw_max")?,
        )
    }

    pub fn flux(&self) -> Result<FluxChoice> {
        match self.get("flux") {
            "linear" => Ok(FluxChoice::Linear),
            "saturated" => Ok(FluxChoice::Saturated {
                i_sat: self.f64("i_sat")?,
                ripple: self.f64("ripple")?,
            }),
            other => Err(Error::Config(format!("flux must be `linear` or `saturated`, got `{other}`"))),
        }
    }

    pub fn plant_config(&self) -> Result<PlantConfig> {
        let cfg = PlantConfig {
            params: self.drive_parameters()?,
            cond: self.operating_conditions()?,
            flux: self.flux()?,
            substeps: self.usize("substeps")?,
            noise_sigma_current: self.f64("noise_sigma")?,
            seed: self.seed()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn grid(&self) -> Result<GridSpec> {
        let step = self.f64("grid_dq_step")?;
        let bins = self.usize("grid_eps_bins")?;
        if bins == 0 {
            return Err(Error::Config("grid_eps_bins must be positive".into()));
        }
        let g = GridSpec {
            i_d: GridAxis {
                lo: self.f64("grid_d_lo")?,
                hi: self.f64("grid_d_hi")?,
                step,
            },
            i_q: GridAxis {
                lo: self.f64("grid_q_lo")?,
                hi: self.f64("grid_q_hi")?,
                step,
            },
            eps: GridAxis {
                lo: -PI,
                hi: PI,
                step: 2.0 * PI / bins as f64,
            },
            i_max: self.f64("i_max")?,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn column_mapping(&self) -> Result<ColumnMapping> {
        let base = match self.get("column_preset") {
            "canonical" => ColumnMapping::default(),
            "kaggle" => ColumnMapping::kaggle(),
            other => return Err(Error::Config(format!("unknown column preset `{other}`"))),
        };
        let overrides = self.get("columns");
        if overrides.is_empty() {
            Ok(base)
        } else {
            base.with_overrides(overrides)
        }
    }

    pub fn neighborhood(&self) -> Result<Neighborhood> {
        let v = self.get("ls_ball");
        if v.is_empty() {
            return Ok(Neighborhood::Global);
        }
        let parts: Vec<f64> = v
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("bad ls_ball `{v}`: {e}")))?;
        match parts[..] {
            [i_d, i_q, radius] if radius > 0.0 => Ok(Neighborhood::Ball { i_d, i_q, radius }),
            _ => Err(Error::Config(format!("ls_ball must be `i_d,i_q,radius` with radius > 0, got `{v}`"))),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let optimizer = match self.get("optimizer") {
            "adam" => Optimizer::Adam,
            "sgd" => Optimizer::Sgd,
            other => return Err(Error::Config(format!("optimizer must be `adam` or `sgd`, got `{other}`"))),
        };
        let cfg = TrainConfig {
            optimizer,
            learning_rate: self.f64("learning_rate")?,
            batch_size: self.usize("batch_size")?,
            epochs: self.usize("epochs")?,
            seed: self.seed()?,
            validation_fraction: self.f64("validation_fraction")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn topology(&self) -> Result<MlpTopology> {
        let hidden = self.get("mlp_hidden");
        let hidden = if hidden.is_empty() {
            Vec::new()
        } else {
            hidden
                .split(',')
                .map(|w| match w.trim().parse::<usize>() {
                    Ok(w) if w > 0 => Ok(w),
                    _ => Err(Error::Config(format!("bad hidden width `{w}`"))),
                })
                .collect::<Result<_>>()?
        };
        Ok(MlpTopology {
            features: self
                .get("mlp_features")
                .split(',')
                .map(Feature::parse)
                .collect::<Result<_>>()?,
            hidden,
            activation: Activation::parse(self.get("mlp_activation"))?,
            per_vector: self.parse("mlp_per_vector")?,
        })
    }

    /// References as `i_d:i_q` pairs separated by `;`.
    pub fn references(&self) -> Result<Vec<Reference>> {
        let i_max = self.f64("i_max")?;
        self.get("references")
            .split(';')
            .filter(|s| !s.trim().is_empty())
            .map(|s| {
                let (d, q) = s
                    .split_once(':')
                    .ok_or_else(|| Error::Config(format!("reference `{s}` is not `i_d:i_q`")))?;
                let num = |v: &str| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Config(format!("bad reference `{s}`: {e}")))
                };
                let r = Reference::new(num(d)?, num(q)?);
                r.validate(i_max)?;
                Ok(r)
            })
            .collect()
    }
}
