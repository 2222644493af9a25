//! Command-line driver: simulation, per-individual sampling, population
//! fitting, kernel benchmarking, and replicated Monte Carlo studies, all
//! reproducible from one master seed.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use popmix_core::config::{parse_kernel, DesignConfig, ModelBundle, RunConfig};
use popmix_core::diagnostics::{mean_square_distance, ChainSummary, MIN_ESS_LEN};
use popmix_core::io;
use popmix_core::likelihood::ObservationModel;
use popmix_core::model::{IndividualData, Theta};
use popmix_core::models::{simulate_continuous, simulate_tte, ContinuousDesign, TteDesign};
use popmix_core::saem::{saem_fit, SaemConfig, SaemTrace};
use popmix_core::samplers::{run_sampler, ChainInit, SamplerConfig};
use rand::Rng;

#[derive(Parser)]
#[command(
    name = "popmix",
    version,
    about = "Mixed-effects sampling and estimation toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration (defaults used when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the configured one.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand, Clone, Copy, PartialEq)]
enum Command {
    /// Write a synthetic dataset for the configured model.
    Simulate,
    /// Run the configured kernels on each individual; write traces and
    /// diagnostics.
    Sample,
    /// Estimate population parameters by stochastic-approximation EM.
    Fit,
    /// Compare kernels on one dataset, with timing.
    Benchmark,
    /// Replicated simulate-and-fit study; writes distance curves per
    /// algorithm.
    Mcstudy,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Sample => "sample",
            Command::Fit => "fit",
            Command::Benchmark => "benchmark",
            Command::Mcstudy => "mcstudy",
        }
    }
}

#[derive(Serialize)]
struct Versions {
    cli: &'static str,
    core: &'static str,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'static str,
    seed: u64,
    threads: usize,
    versions: Versions,
    config: &'a RunConfig,
    outputs: Vec<String>,
    notes: Vec<String>,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .context("thread pool configuration")?;
    }
    let config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let seed = cli.seed.or(config.seed).unwrap_or(0);
    std::fs::create_dir_all(&cli.out)
        .with_context(|| format!("cannot create output directory {}", cli.out.display()))?;

    let mut outputs = Vec::new();
    let mut notes = Vec::new();
    match cli.command {
        Command::Simulate => cmd_simulate(&config, seed, &cli.out, &mut outputs)?,
        Command::Sample => cmd_sample(&config, seed, &cli.out, &mut outputs, &mut notes)?,
        Command::Fit => cmd_fit(&config, seed, &cli.out, &mut outputs, &mut notes)?,
        Command::Benchmark => cmd_benchmark(&config, seed, &cli.out, &mut outputs, &mut notes)?,
        Command::Mcstudy => cmd_mcstudy(&config, seed, &cli.out, &mut outputs, &mut notes)?,
    }

    let manifest = Manifest {
        command: cli.command.name(),
        seed,
        threads: cli.threads,
        versions: Versions {
            cli: env!("CARGO_PKG_VERSION"),
            core: popmix_core::VERSION,
        },
        config: &config,
        outputs,
        notes,
    };
    io::write_manifest(cli.out.join("manifest.json"), &manifest)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Dataset plumbing
// ---------------------------------------------------------------------------

fn simulate_bundle(bundle: &ModelBundle, seed: u64) -> Result<Vec<IndividualData>> {
    let n = bundle.n_individuals;
    let data = match (&bundle.design, &bundle.obs) {
        (DesignConfig::Continuous { times, dose }, ObservationModel::Continuous { structural, .. }) => {
            simulate_continuous(
                &bundle.theta,
                structural.as_ref(),
                &ContinuousDesign::replicate(n, times.clone(), *dose),
                seed,
            )?
        }
        (DesignConfig::TimeToEvent { censor_time }, ObservationModel::TimeToEvent { hazard }) => {
            simulate_tte(
                &bundle.theta,
                hazard.as_ref(),
                &TteDesign::replicate(n, *censor_time),
                seed,
            )?
        }
        _ => bail!("design kind does not match the observation model"),
    };
    Ok(data)
}

/// Load the configured dataset, or simulate one from the preset when no
/// data path is given.
fn load_or_simulate(
    config: &RunConfig,
    bundle: &ModelBundle,
    seed: u64,
    notes: &mut Vec<String>,
) -> Result<Vec<IndividualData>> {
    match &config.data {
        Some(path) => {
            let data = match &bundle.obs {
                ObservationModel::Continuous { .. } => io::read_continuous_csv(path)?,
                ObservationModel::TimeToEvent { .. } => io::read_tte_csv(path)?,
            };
            if data.is_empty() {
                bail!("dataset {} holds no individuals", path.display());
            }
            Ok(data)
        }
        None => {
            notes.push("no data path configured; simulated the preset dataset".into());
            simulate_bundle(bundle, seed)
        }
    }
}

fn write_dataset(
    dir: &Path,
    name: &str,
    bundle: &ModelBundle,
    data: &[IndividualData],
    outputs: &mut Vec<String>,
) -> Result<()> {
    let path = dir.join(name);
    match &bundle.obs {
        ObservationModel::Continuous { .. } => io::write_continuous_csv(&path, data)?,
        ObservationModel::TimeToEvent { .. } => io::write_tte_csv(&path, data)?,
    }
    outputs.push(name.to_string());
    Ok(())
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn cmd_simulate(config: &RunConfig, seed: u64, out: &Path, outputs: &mut Vec<String>) -> Result<()> {
    let bundle = config.resolve_model()?;
    let data = simulate_bundle(&bundle, seed)?;
    write_dataset(out, "dataset.csv", &bundle, &data, outputs)
}

struct KernelRun {
    tag: String,
    id: String,
    trace: popmix_core::samplers::ChainTrace,
    summary: Option<ChainSummary>,
    seconds: f64,
}

/// Parse and validate every configured kernel tag, before any output exists.
fn parse_kernels(
    section: &popmix_core::config::SamplerSection,
) -> Result<Vec<(String, popmix_core::samplers::Kernel)>> {
    if section.kernels.is_empty() {
        bail!("sampler.kernels is empty");
    }
    section
        .kernels
        .iter()
        .map(|tag| Ok((tag.clone(), parse_kernel(tag, section)?)))
        .collect()
}

fn run_kernels(
    config: &RunConfig,
    bundle: &ModelBundle,
    data: &[IndividualData],
    kernels: &[(String, popmix_core::samplers::Kernel)],
    seed: u64,
) -> Result<Vec<KernelRun>> {
    let section = &config.sampler;
    let selected: Vec<&IndividualData> = match &section.individual {
        Some(id) => {
            let one = data
                .iter()
                .find(|d| &d.id == id)
                .ok_or_else(|| anyhow!("sampler.individual {id:?} not present in the dataset"))?;
            vec![one]
        }
        None => data.iter().collect(),
    };
    let population = &bundle.theta.population;
    let mut runs = Vec::new();
    for (tag, kernel) in kernels {
        // Mode starts for every kernel: chains are compared in stationarity,
        // and an independence chain started far outside its proposal's
        // support may reject every candidate for the whole run.
        let sampler_config =
            SamplerConfig::new(*kernel, section.n_iter, seed).with_init(ChainInit::Map);
        sampler_config.validate()?;
        let mut batch: Vec<KernelRun> = selected
            .par_iter()
            .map(|ind| {
                let post = popmix_core::likelihood::Posterior::new(ind, &bundle.obs, population)?;
                let start = Instant::now();
                let trace = run_sampler(&post, &sampler_config)?;
                let seconds = start.elapsed().as_secs_f64();
                let summary = if trace.len() >= MIN_ESS_LEN {
                    Some(ChainSummary::from_trace(&trace, section.max_lag)?)
                } else {
                    None
                };
                Ok(KernelRun {
                    tag: tag.clone(),
                    id: ind.id.clone(),
                    trace,
                    summary,
                    seconds,
                })
            })
            .collect::<Result<_, popmix_core::Error>>()?;
        runs.append(&mut batch);
    }
    Ok(runs)
}

fn cmd_sample(
    config: &RunConfig,
    seed: u64,
    out: &Path,
    outputs: &mut Vec<String>,
    notes: &mut Vec<String>,
) -> Result<()> {
    let bundle = config.resolve_model()?;
    let kernels = parse_kernels(&config.sampler)?;
    let data = load_or_simulate(config, &bundle, seed, notes)?;
    if config.data.is_none() {
        write_dataset(out, "dataset.csv", &bundle, &data, outputs)?;
    }
    let names: Vec<String> = bundle.theta.population.names().to_vec();
    let transforms = bundle.theta.population.transforms().to_vec();
    let runs = run_kernels(config, &bundle, &data, &kernels, seed)?;
    let mut skipped = 0usize;
    for run in &runs {
        let chain_name = format!("chain_{}_{}.csv", run.tag, run.id);
        io::write_chain_csv(out.join(&chain_name), &run.trace, &names, &transforms)?;
        outputs.push(chain_name);
        match &run.summary {
            Some(summary) => {
                let summary_name = format!("summary_{}_{}.csv", run.tag, run.id);
                io::write_summary_csv(out.join(&summary_name), summary, &names)?;
                outputs.push(summary_name);
                let acf_name = format!("acf_{}_{}.csv", run.tag, run.id);
                io::write_acf_csv(out.join(&acf_name), &summary.acf, &names)?;
                outputs.push(acf_name);
            }
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        notes.push(format!(
            "diagnostics skipped for {skipped} trace(s) shorter than {MIN_ESS_LEN} iterations"
        ));
    }
    Ok(())
}

fn cmd_benchmark(
    config: &RunConfig,
    seed: u64,
    out: &Path,
    outputs: &mut Vec<String>,
    notes: &mut Vec<String>,
) -> Result<()> {
    let bundle = config.resolve_model()?;
    let kernels = parse_kernels(&config.sampler)?;
    let data = load_or_simulate(config, &bundle, seed, notes)?;
    let names = bundle.theta.population.names().to_vec();
    let runs = run_kernels(config, &bundle, &data, &kernels, seed)?;
    let path = out.join("benchmark.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record([
        "kernel",
        "individual",
        "coordinate",
        "msjd",
        "ess",
        "acceptance_rate",
        "seconds",
    ])?;
    let mut skipped = 0usize;
    for run in &runs {
        let Some(summary) = &run.summary else {
            skipped += 1;
            continue;
        };
        for (j, name) in names.iter().enumerate() {
            w.write_record([
                run.tag.as_str(),
                run.id.as_str(),
                name.as_str(),
                &format!("{}", summary.msjd[j]),
                &format!("{}", summary.ess[j]),
                &format!("{}", summary.acceptance_rate),
                &format!("{}", run.seconds),
            ])?;
        }
    }
    w.flush()?;
    outputs.push("benchmark.csv".into());
    if skipped > 0 {
        notes.push(format!(
            "{skipped} run(s) were too short for diagnostics and are absent from benchmark.csv"
        ));
    }
    Ok(())
}

fn saem_config_for(config: &RunConfig, seed: u64) -> Result<SaemConfig> {
    let section = &config.saem;
    let mut saem = match section.algorithm.as_str() {
        "saem" => SaemConfig::reference(section.n_iter, seed),
        "fsaem" => SaemConfig::accelerated(section.n_iter, seed, section.switch_after),
        other => bail!("saem.algorithm must be \"saem\" or \"fsaem\", got {other:?}"),
    };
    saem = saem.with_burn(section.burn, section.decay);
    saem.validate()?;
    Ok(saem)
}

fn fit_once(
    config: &RunConfig,
    bundle: &ModelBundle,
    data: &[IndividualData],
    theta0: &Theta,
    seed: u64,
) -> Result<SaemTrace> {
    let saem = saem_config_for(config, seed)?;
    Ok(saem_fit(data, &bundle.obs, theta0, &saem)?)
}

fn cmd_fit(
    config: &RunConfig,
    seed: u64,
    out: &Path,
    outputs: &mut Vec<String>,
    notes: &mut Vec<String>,
) -> Result<()> {
    let bundle = config.resolve_model()?;
    let data = load_or_simulate(config, &bundle, seed, notes)?;
    saem_config_for(config, seed)?; // validate before any output is written
    let inits: Vec<Theta> = if config.saem.inits.is_empty() {
        vec![bundle.theta.clone()]
    } else {
        config
            .saem
            .inits
            .iter()
            .map(|tc| tc.apply(&bundle.theta))
            .collect::<Result<_, popmix_core::Error>>()?
    };
    #[derive(Serialize)]
    struct FitResult {
        init: usize,
        trace: String,
        components: Vec<String>,
        estimate: Vec<f64>,
    }
    let mut results = Vec::new();
    for (i, theta0) in inits.iter().enumerate() {
        let trace = fit_once(config, &bundle, &data, theta0, seed)?;
        let name = format!("fit_{}.csv", i + 1);
        io::write_saem_csv(out.join(&name), &trace)?;
        outputs.push(name.clone());
        results.push(FitResult {
            init: i + 1,
            trace: name,
            components: trace.names.clone(),
            estimate: trace.final_theta.flatten(),
        });
    }
    io::write_manifest(out.join("estimates.json"), &results)?;
    outputs.push("estimates.json".into());
    Ok(())
}

fn cmd_mcstudy(
    config: &RunConfig,
    seed: u64,
    out: &Path,
    outputs: &mut Vec<String>,
    notes: &mut Vec<String>,
) -> Result<()> {
    let bundle = config.resolve_model()?;
    saem_config_for(config, seed)?; // validate shape early; per-run configs differ only by seed
    let m = config.mcstudy.replicates;
    if m == 0 {
        bail!("mcstudy.replicates must be positive");
    }
    let theta0 = match config.saem.inits.first() {
        Some(tc) => tc.apply(&bundle.theta)?,
        None => bundle.theta.clone(),
    };
    let mut seeder = popmix_core::rng::stream_rng(seed, "mcstudy", 0);
    let replicate_seeds: Vec<u64> = (0..m).map(|_| seeder.gen()).collect();

    let mut study_config = config.clone();
    study_config.saem.n_iter = config.mcstudy.n_iter;

    let mut traces: Vec<(Vec<SaemTrace>, &str)> =
        vec![(Vec::new(), "saem"), (Vec::new(), "fsaem")];
    for (rep, &rep_seed) in replicate_seeds.iter().enumerate() {
        let data = simulate_bundle(&bundle, rep_seed)?;
        for (collected, algorithm) in traces.iter_mut() {
            study_config.saem.algorithm = algorithm.to_string();
            match fit_once(&study_config, &bundle, &data, &theta0, rep_seed) {
                Ok(trace) => collected.push(trace),
                Err(e) => notes.push(format!(
                    "replicate {} excluded for {algorithm}: {e}",
                    rep + 1
                )),
            }
        }
    }

    for (collected, algorithm) in &traces {
        if collected.is_empty() {
            bail!("no {algorithm} replicate completed");
        }
        let components = collected[0].names.clone();
        let curves = components
            .iter()
            .map(|c| Ok((c.clone(), mean_square_distance(collected, c)?)))
            .collect::<Result<Vec<_>, popmix_core::Error>>()?;
        let name = format!("distance_{algorithm}.csv");
        io::write_distance_csv(out.join(&name), &curves)?;
        outputs.push(name);
    }
    Ok(())
}
