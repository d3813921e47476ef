//! Batch front-end: generate, balance, fit, evaluate, compare and classes.
//!
//! Every subcommand resolves a `key = value` config (file, then `--set`
//! overrides), writes its CSV artifacts into `--out` and echoes the resolved
//! config into `manifest.txt`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use pmsm_sysid::config::RunConfig;
use pmsm_sysid::dataset::{
    balance, default_caps, homogeneity_curve, homogeneity_csv, read_csv_file, stats, valid_classes, write_csv_file,
    Dataset,
};
use pmsm_sysid::ls::{evaluate, fit_all, fit_reports_csv};
use pmsm_sysid::mlp::fit_mlp;
use pmsm_sysid::mpc::{run_closed_loop, write_trajectory_csv, ClosedLoopOptions, PredictionModel};
use pmsm_sysid::plant::{generate_dataset, generate_excitation, quadrant_setpoints};

#[derive(Parser)]
#[command(name = "pmsm-sysid", version, about = "PMSM drive simulation and prediction-model identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config override `key=value`; may be repeated and wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set seed=<N>`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the plant under FCS-MPC and write a dataset.
    Generate(Common),
    /// Cap every (vector, class) cell and write the homogeneity sweep.
    Balance {
        #[command(flatten)]
        common: Common,
        /// Dataset CSV to balance.
        #[arg(long)]
        input: PathBuf,
    },
    /// Extract a prediction model from a dataset.
    Fit {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        method: Method,
        /// Training dataset CSV (not needed for white-box methods).
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// One-step-ahead RMS error of a model on a dataset.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Closed-loop comparison of two or more models at the configured references.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Model file; give at least two.
        #[arg(long = "model", required = true)]
        models: Vec<PathBuf>,
    },
    /// Print valid class counts of the configured grid.
    Classes(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    /// Taylor discretization of `series_order` (first order by default).
    Whitebox,
    /// Exact matrix-exponential discretization.
    Exact,
    /// Per-vector least squares.
    Ls,
    /// Feedforward network.
    Mlp,
}

impl Method {
    fn name(self) -> &'static str {
        match self {
            Method::Whitebox => "whitebox",
            Method::Exact => "exact",
            Method::Ls => "ls",
            Method::Mlp => "mlp",
        }
    }
}

fn resolve(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    for kv in &c.overrides {
        cfg.apply_override(kv)?;
    }
    if let Some(seed) = c.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    Ok(cfg)
}

fn prepare(c: &Common, cfg: &RunConfig, command: &str, inputs: &[&Path]) -> Result<()> {
    fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))?;
    let mut manifest = cfg.manifest(command);
    for input in inputs {
        manifest.push_str(&format!("# input: {}\n", input.display()));
    }
    write(&c.out.join("manifest.txt"), &manifest)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn load_dataset(cfg: &RunConfig, path: &Path) -> Result<Dataset> {
    Ok(read_csv_file(path, &cfg.column_mapping()?)?)
}

fn generate(c: &Common) -> Result<()> {
    let cfg = resolve(c)?;
    prepare(c, &cfg, "generate", &[])?;
    let plant = cfg.plant_config()?;
    let setpoints = quadrant_setpoints(plant.params.i_max, cfg.f64("setpoint_spacing")?);
    let mut d = generate_dataset(
        &plant,
        &setpoints,
        cfg.usize("cycles_per_setpoint")?,
        cfg.f64("random_vector_prob")?,
    )?;
    let extra = cfg.usize("excitation_per_subset")?;
    if extra > 0 {
        d.samples.extend(generate_excitation(&plant, extra)?.samples);
        d.shuffle(plant.seed);
    }
    write_csv_file(&d, &c.out.join("dataset.csv"))?;
    write(&c.out.join("stats.csv"), &stats(&d, &cfg.grid()?).to_csv())?;
    println!("wrote {} samples from {} setpoints", d.len(), setpoints.len());
    Ok(())
}

fn balance_cmd(c: &Common, input: &Path) -> Result<()> {
    let cfg = resolve(c)?;
    prepare(c, &cfg, "balance", &[input])?;
    let d = load_dataset(&cfg, input)?;
    let g = cfg.grid()?;
    let cap = cfg.usize("cap")?;
    let out = balance(&d, &g, cap, cfg.seed()?)?;
    write_csv_file(&out.balanced, &c.out.join("balanced.csv"))?;
    write_csv_file(&out.remainder, &c.out.join("remainder.csv"))?;
    write_csv_file(&out.rejects, &c.out.join("rejects.csv"))?;
    write(&c.out.join("homogeneity.csv"), &homogeneity_csv(&homogeneity_curve(&d, &g, &default_caps())))?;
    write(
        &c.out.join("homogeneity_balanced.csv"),
        &homogeneity_csv(&homogeneity_curve(&out.balanced, &g, &default_caps())),
    )?;
    write(&c.out.join("stats.csv"), &stats(&out.balanced, &g).to_csv())?;
    println!(
        "balanced {} / remainder {} / rejects {} (cap {cap})",
        out.balanced.len(),
        out.remainder.len(),
        out.rejects.len()
    );
    Ok(())
}

fn fit(c: &Common, method: Method, input: Option<&Path>) -> Result<()> {
    let cfg = resolve(c)?;
    let inputs: Vec<&Path> = input.into_iter().collect();
    prepare(c, &cfg, &format!("fit {}", method.name()), &inputs)?;
    let p = cfg.drive_parameters()?;
    let cond = cfg.operating_conditions()?;
    let model = match method {
        Method::Whitebox => PredictionModel::series(&p, &cond, cfg.usize("series_order")?.try_into()?)?,
        Method::Exact => PredictionModel::exact(&p, &cond)?,
        Method::Ls | Method::Mlp => {
            let Some(input) = input else {
                bail!("--input is required for method {}", method.name());
            };
            let d = load_dataset(&cfg, input)?;
            let (train, holdout) = d.split(cfg.f64("holdout")?, cfg.seed()?);
            write_csv_file(&holdout, &c.out.join("holdout.csv"))?;
            let model = if matches!(method, Method::Ls) {
                let (m, reports) = fit_all(&train, cfg.f64("ridge")?, cfg.neighborhood()?, cond.t_s)?;
                write(&c.out.join("fit_report.csv"), &fit_reports_csv(&reports))?;
                m
            } else {
                let (m, hist) = fit_mlp(&train, &cfg.topology()?, &cfg.train_config()?, cond.t_s)?;
                let mut loss = String::from("network,epoch,train_loss,validation_loss\n");
                for (i, h) in hist.iter().enumerate() {
                    for (e, (t, v)) in h.train_loss.iter().zip(&h.validation_loss).enumerate() {
                        loss.push_str(&format!("{},{},{t:.16e},{v:.16e}\n", i + 1, e + 1));
                    }
                }
                write(&c.out.join("loss.csv"), &loss)?;
                PredictionModel::Mlp(m)
            };
            if !holdout.is_empty() {
                write(&c.out.join("metrics.csv"), &evaluate(&model, &holdout)?.to_csv())?;
            }
            model
        }
    };
    model.save(&c.out.join("model.txt"))?;
    println!("wrote {} model", model.kind());
    Ok(())
}

fn evaluate_cmd(c: &Common, model: &Path, input: &Path) -> Result<()> {
    let cfg = resolve(c)?;
    prepare(c, &cfg, "evaluate", &[model, input])?;
    let m = PredictionModel::load(model)?;
    let d = load_dataset(&cfg, input)?;
    let e = evaluate(&m, &d)?;
    write(&c.out.join("metrics.csv"), &e.to_csv())?;
    println!(
        "{}: rms_d {:.6} A, rms_q {:.6} A over {} samples",
        m.kind(),
        e.overall.rms_d,
        e.overall.rms_q,
        e.overall.samples
    );
    Ok(())
}

fn compare(c: &Common, paths: &[PathBuf]) -> Result<()> {
    let cfg = resolve(c)?;
    let inputs: Vec<&Path> = paths.iter().map(PathBuf::as_path).collect();
    prepare(c, &cfg, "compare", &inputs)?;
    if paths.len() < 2 {
        bail!(pmsm_sysid::Error::Validation("compare needs at least two models".into()));
    }
    let plant = cfg.plant_config()?;
    let models = paths
        .iter()
        .map(|p| PredictionModel::load(p))
        .collect::<pmsm_sysid::Result<Vec<_>>>()?;
    for (m, path) in models.iter().zip(paths) {
        if (m.t_s() - plant.cond.t_s).abs() > 1e-12 * plant.cond.t_s {
            bail!(pmsm_sysid::Error::Validation(format!(
                "model {} has T_s = {} s, the plant runs at {} s",
                path.display(),
                m.t_s(),
                plant.cond.t_s
            )));
        }
    }
    let refs = cfg.references()?;
    let cycles = cfg.usize("cycles")?;
    let opts = ClosedLoopOptions {
        settle_fraction: cfg.f64("settle_fraction")?,
        ..ClosedLoopOptions::default()
    };
    let mut report = String::from(
        "model,kind,i_d_ref,i_q_ref,rms_error,rms_d,rms_q,switching_frequency,exceeds_f_sw_max\n",
    );
    for (mi, m) in models.iter().enumerate() {
        for (ri, r) in refs.iter().enumerate() {
            let run = run_closed_loop(&plant, m, r, cycles, &opts)?;
            let k = &run.metrics;
            report.push_str(&format!(
                "{},{},{},{},{:.16e},{:.16e},{:.16e},{:.16e},{}\n",
                mi + 1,
                m.kind(),
                r.i_d_ref,
                r.i_q_ref,
                k.rms_error,
                k.rms_d,
                k.rms_q,
                k.switching_frequency,
                k.exceeds_f_sw_max
            ));
            let mut buf = Vec::new();
            write_trajectory_csv(&run, &mut buf)?;
            fs::write(c.out.join(format!("trajectory_m{}_r{}.csv", mi + 1, ri + 1)), buf)?;
        }
    }
    write(&c.out.join("report.csv"), &report)?;
    print!("{report}");
    Ok(())
}

fn classes(c: &Common) -> Result<()> {
    let cfg = resolve(c)?;
    prepare(c, &cfg, "classes", &[])?;
    let g = cfg.grid()?;
    let cells = g.valid_dq_cells().len();
    let total = valid_classes(&g).len();
    let text = format!("valid_dq_cells,{cells}\nvalid_classes,{total}\n");
    write(&c.out.join("classes.csv"), &text)?;
    print!("{text}");
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Generate(c) => generate(&c),
        Command::Balance { common, input } => balance_cmd(&common, &input),
        Command::Fit { common, method, input } => fit(&common, method, input.as_deref()),
        Command::Evaluate { common, model, input } => evaluate_cmd(&common, &model, &input),
        Command::Compare { common, models } => compare(&common, &models),
        Command::Classes(c) => classes(&c),
    }
}
