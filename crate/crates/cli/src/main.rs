//! `chmm`: fit, simulate, analyze and predict with additive coupled HMMs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use chmm_core::analysis::{
    compose_protocol, contribution_analysis, persistence_summary, predict_protocol,
    transmission_graph, ContributionSetup, ProtocolSpec,
};
use chmm_core::generative::{
    observed_curve, posterior_predictive_curve, simulate_cohort, InitialSource, Measure,
    SimulationSpec,
};
use chmm_core::io::{
    fit_to_dir, load_json, load_run_config, read_dataset, read_posterior, save_dataset, save_json,
    write_contribution_csv, write_curve_csv, write_file, write_persistence_csv,
    write_transmission_csv, ModelFile, RunConfig, CONFIG_FILE, DATA_FILE,
};
use chmm_core::oracle::oracle_check;
use chmm_core::{Arm, ChmmError, CohortDataset, PosteriorSamples};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "chmm", version, about = "Additive coupled HMMs for multi-site carriage data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MeasureArg {
    Observed,
    Latent,
}

impl From<MeasureArg> for Measure {
    fn from(m: MeasureArg) -> Self {
        match m {
            MeasureArg::Observed => Measure::Observed,
            MeasureArg::Latent => Measure::Latent,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Fit one arm by MCMC and write the posterior files.
    Fit {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Arm to fit when the data holds both (edu or decol).
        #[arg(long)]
        arm: Option<Arm>,
    },
    /// Simulate a synthetic cohort and write it as visit records.
    Simulate {
        /// Model JSON file, or a posterior directory.
        #[arg(long)]
        params: PathBuf,
        /// Draw to use when `--params` is a posterior directory (default: last).
        #[arg(long)]
        draw: Option<usize>,
        /// Simulation spec JSON; defaults to the visit schedule.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        patients: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Persistence, transmission graph, predictive curves and, given a
    /// second arm, therapy contributions.
    Analyze {
        #[arg(long)]
        posterior: PathBuf,
        /// Decolonization-arm posterior; enables the contribution analysis.
        #[arg(long)]
        decol: Option<PathBuf>,
        /// Observed data; defaults to the copy stored with the posterior.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        thin: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; defaults to `<posterior>/analysis`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Pair arms with different draw counts by stretching indices.
        #[arg(long)]
        resample: bool,
    },
    /// Carriage curves under a hypothetical protocol.
    Predict {
        #[arg(long)]
        edu: PathBuf,
        #[arg(long)]
        decol: PathBuf,
        /// e.g. `nares=decol,skin=edu,throat=clear,wound=edu`
        #[arg(long)]
        protocol: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        thin: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        patients: Option<usize>,
        #[arg(long, value_enum, default_value = "latent")]
        measure: MeasureArg,
        #[arg(long)]
        resample: bool,
        /// Output CSV; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Exact-versus-engine report on a random small instance.
    OracleCheck {
        #[arg(long, default_value_t = 2)]
        chains: usize,
        #[arg(long, default_value_t = 3)]
        months: usize,
        #[arg(long, default_value_t = 20_000)]
        draws: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            report_error("usage", &e.to_string());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            let kind = match e.downcast_ref::<ChmmError>() {
                Some(ChmmError::Ingest(_)) => "ingest",
                Some(ChmmError::Io { .. }) => "io",
                Some(ChmmError::InvalidConfig(_)) | Some(ChmmError::Json(_)) => "config",
                Some(_) => "model",
                None => "error",
            };
            report_error(kind, &format!("{e:#}"));
            ExitCode::FAILURE
        }
    }
}

fn report_error(kind: &str, message: &str) {
    let value = serde_json::json!({ "error": kind, "message": message.trim_end() });
    eprintln!("{value}");
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Fit {
            data,
            config,
            out,
            seed,
            arm,
        } => fit(data, config, out, seed, arm),
        Command::Simulate {
            params,
            draw,
            spec,
            patients,
            out,
            seed,
        } => simulate(&params, draw, spec.as_deref(), patients, &out, seed),
        Command::Analyze {
            posterior,
            decol,
            data,
            threshold,
            thin,
            seed,
            out,
            resample,
        } => analyze(&posterior, decol.as_deref(), data.as_deref(), threshold, thin, seed, out, resample),
        Command::Predict {
            edu,
            decol,
            protocol,
            config,
            thin,
            seed,
            patients,
            measure,
            resample,
            out,
        } => predict(
            &edu, &decol, &protocol, config.as_deref(), thin, seed, patients, measure.into(), resample,
            out.as_deref(),
        ),
        Command::OracleCheck {
            chains,
            months,
            draws,
            seed,
            out,
        } => {
            let report = oracle_check(chains, months, draws, seed)?;
            match out {
                Some(path) => save_json(&path, &report)?,
                None => println!("{}", serde_json::to_string_pretty(&report)?),
            }
            Ok(if report.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
    }
}

fn select_arm(data: CohortDataset, arm: Option<Arm>) -> Result<CohortDataset> {
    let arms = data.arms();
    match arm {
        Some(a) => {
            let filtered = data.filter_arm(a);
            if filtered.is_empty() {
                bail!(ChmmError::InvalidConfig(format!("no patients in arm {a}")));
            }
            Ok(filtered)
        }
        None if arms.len() > 1 => bail!(ChmmError::InvalidConfig(
            "data holds both arms; choose one with --arm (arms are fit separately)".into()
        )),
        None => Ok(data),
    }
}

fn fit(
    data: Option<PathBuf>,
    config: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    arm: Option<Arm>,
) -> Result<ExitCode> {
    let mut cfg = match &config {
        Some(path) => load_run_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.mcmc.rng_seed = s;
    }
    if arm.is_some() {
        cfg.arm = arm;
    }
    let data_path = data
        .or_else(|| cfg.data.clone())
        .context("no input data: pass --data or set `data` in the config")?;
    let out = out
        .or_else(|| cfg.out.clone())
        .context("no output directory: pass --out or set `out` in the config")?;
    let dataset = select_arm(read_dataset(&data_path)?, cfg.arm)?;
    cfg.data = Some(data_path);
    cfg.out = Some(out.clone());
    let samples = fit_to_dir(&dataset, &cfg, &out)?;
    let rates: Vec<String> = samples
        .diagnostics
        .acceptance_rate
        .iter()
        .map(|r| format!("{r:.3}"))
        .collect();
    eprintln!(
        "fit: {} patients, {} retained draws, acceptance [{}] -> {}",
        dataset.num_patients(),
        samples.len(),
        rates.join(", "),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn simulate(
    params: &Path,
    draw: Option<usize>,
    spec: Option<&Path>,
    patients: usize,
    out: &Path,
    seed: Option<u64>,
) -> Result<ExitCode> {
    let (space, model) = if params.is_dir() {
        let samples = read_posterior(params)?;
        let idx = draw.unwrap_or(samples.len() - 1);
        let Some(d) = samples.draws.get(idx).cloned() else {
            bail!(ChmmError::InvalidConfig(format!(
                "draw {idx} out of range (posterior has {})",
                samples.len()
            )));
        };
        (samples.space, d)
    } else {
        ModelFile::load(params)?
    };
    let mut spec = match spec {
        Some(path) => load_json::<SimulationSpec>(path)?,
        None => SimulationSpec::visit_schedule(patients, 1),
    };
    if let Some(s) = seed {
        spec.rng_seed = s;
    }
    let (_, data) = simulate_cohort(&space, &model, &spec)?;
    save_dataset(out, &data)?;
    eprintln!("simulate: {} patients -> {}", data.num_patients(), out.display());
    Ok(ExitCode::SUCCESS)
}

/// Run config stored next to a posterior, or the defaults.
fn stored_config(dir: &Path) -> Result<RunConfig> {
    let path = dir.join(CONFIG_FILE);
    Ok(if path.exists() {
        load_json(&path)?
    } else {
        RunConfig::default()
    })
}

fn predictive_spec(cfg: &RunConfig, data: Option<&CohortDataset>, seed: u64) -> SimulationSpec {
    let n = cfg
        .predictive_patients
        .or(data.map(CohortDataset::num_patients))
        .unwrap_or(1000);
    let mut spec = cfg.simulation_spec(n, seed);
    spec.initial = InitialSource::Params;
    spec
}

#[allow(clippy::too_many_arguments)]
fn analyze(
    posterior: &Path,
    decol: Option<&Path>,
    data: Option<&Path>,
    threshold: Option<f64>,
    thin: Option<usize>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    resample: bool,
) -> Result<ExitCode> {
    let cfg = stored_config(posterior)?;
    let samples = read_posterior(posterior)?;
    let data_path = data.map(Path::to_path_buf).unwrap_or_else(|| posterior.join(DATA_FILE));
    let dataset = read_dataset(&data_path)?;
    let threshold = threshold.unwrap_or(cfg.threshold);
    let thin = thin.unwrap_or(cfg.thin);
    let seed = seed.unwrap_or(cfg.mcmc.rng_seed);
    let out = out.unwrap_or_else(|| posterior.join("analysis"));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    let persistence = persistence_summary(&samples)?;
    write_file(&out.join("persistence.csv"), |w| write_persistence_csv(w, &persistence))?;

    let graph = transmission_graph(&samples, &dataset, threshold)?;
    write_file(&out.join("transmission.csv"), |w| write_transmission_csv(w, &graph))?;
    fs::write(out.join("transmission.dot"), graph.to_dot())
        .with_context(|| format!("writing {}", out.join("transmission.dot").display()))?;

    let spec = predictive_spec(&cfg, Some(&dataset), seed);
    let observed = observed_curve(&dataset, 1);
    write_file(&out.join("observed.csv"), |w| write_curve_csv(w, &observed))?;
    for (measure, name) in [(Measure::Observed, "predictive.csv"), (Measure::Latent, "predictive_latent.csv")] {
        let curve = posterior_predictive_curve(&samples, &spec, thin, measure)?;
        write_file(&out.join(name), |w| write_curve_csv(w, &curve))?;
    }

    if let Some(decol) = decol {
        let decol = read_posterior(decol)?;
        let setup = ContributionSetup {
            thin,
            resample,
            ..Default::default()
        };
        let report = contribution_analysis(&samples, &decol, &setup, &spec)?;
        write_file(&out.join("contributions.csv"), |w| write_contribution_csv(w, &report))?;
        save_json(&out.join("contributions.json"), &report)?;
    }
    eprintln!(
        "analyze: {} edges kept at threshold {threshold} -> {}",
        graph.included_edges().count(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
fn predict(
    edu: &Path,
    decol: &Path,
    protocol: &str,
    config: Option<&Path>,
    thin: Option<usize>,
    seed: Option<u64>,
    patients: Option<usize>,
    measure: Measure,
    resample: bool,
    out: Option<&Path>,
) -> Result<ExitCode> {
    let cfg = match config {
        Some(path) => load_run_config(path)?,
        None => stored_config(edu)?,
    };
    let edu_samples: PosteriorSamples = read_posterior(edu)?;
    let decol_samples = read_posterior(decol)?;
    let spec_protocol = ProtocolSpec::parse(&edu_samples.space, protocol)?;
    let composed = compose_protocol(&edu_samples, &decol_samples, &spec_protocol, resample)?
        .thinned(thin.unwrap_or(cfg.thin));
    let edu_data = read_dataset(&edu.join(DATA_FILE)).ok();
    let mut spec = predictive_spec(&cfg, edu_data.as_ref(), seed.unwrap_or(cfg.mcmc.rng_seed));
    if let Some(n) = patients {
        spec.num_patients = n;
    }
    let curve = predict_protocol(&composed, &spec, measure)?;
    match out {
        Some(path) => write_file(path, |w| write_curve_csv(w, &curve))?,
        None => write_curve_csv(std::io::stdout().lock(), &curve)?,
    }
    Ok(ExitCode::SUCCESS)
}
