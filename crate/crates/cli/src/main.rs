//! `fruitsense` command-line front end.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;

use fruitsense::calibration::calibrate;
use fruitsense::classify::build_profile;
use fruitsense::delay_profile::{refit_profile, solve_lasso, stitch, NdftOperator};
use fruitsense::experiment::{
    build_library, derive_seed, run_benchmark, run_pipeline, simulate_trial, BenchmarkReport,
};
use fruitsense::features::build_features_with;
use fruitsense::{
    classify, extract_direct_path, Artifact, CalibratedSpectrum, CsiDataset, DelayProfile, DirectPathSpectrum,
    Error, ExperimentConfig, FeatureVector, PlannedProfile, ProfileLibrary, Result, RipenessLabel, Stage,
};

/// Seed stream used by `simulate`.
const STREAM_SIMULATE: u64 = 0;

#[derive(Parser)]
#[command(name = "fruitsense", version, about = "WiFi CSI fruit ripeness signal chain")]
struct Cli {
    /// Experiment config (TOML). Every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file; stdout when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Path prefix for columnar plot data (`<prefix>.pdp.csv`, `<prefix>.spectrum.csv`).
    #[arg(long, global = true)]
    plot_data: Option<PathBuf>,
    /// Override the Monte-Carlo trial count.
    #[arg(long, global = true)]
    trials: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one CSI dataset with embedded ground truth.
    Simulate {
        /// Ripeness class to place in the room.
        #[arg(long, default_value = "ripen")]
        class: RipenessLabel,
        /// Trial index; each index draws a different room and error realisation.
        #[arg(long, default_value_t = 0)]
        trial: u64,
    },
    /// Remove phase errors from a CSI dataset.
    Calibrate { input: PathBuf },
    /// Solve the sparse delay profile of a calibrated spectrum.
    Pdp { input: PathBuf },
    /// Isolate the direct path of a delay profile.
    Extract { input: PathBuf },
    /// MODWT features of a direct-path spectrum.
    Features { input: PathBuf },
    /// Build a profile library from labelled feature files, or by simulation
    /// when no samples are given.
    ProfileBuild {
        /// `LABEL=PATH` pairs, repeatable.
        #[arg(long = "sample", value_parser = parse_sample)]
        samples: Vec<(RipenessLabel, PathBuf)>,
    },
    /// Classify a feature vector against a library.
    Classify {
        input: PathBuf,
        #[arg(long)]
        library: PathBuf,
    },
    /// Run the whole chain on a dataset, or a seeded Monte-Carlo benchmark
    /// when no dataset is given.
    Pipeline {
        input: Option<PathBuf>,
        #[arg(long)]
        library: Option<PathBuf>,
    },
    /// Per-stage wall-clock timings on one simulated dataset.
    Bench {
        #[arg(long)]
        library: Option<PathBuf>,
    },
}

fn parse_sample(s: &str) -> std::result::Result<(RipenessLabel, PathBuf), String> {
    let (label, path) = s.split_once('=').ok_or("expected LABEL=PATH")?;
    Ok((label.parse().map_err(|e: Error| e.to_string())?, PathBuf::from(path)))
}

fn exit_code(stage: Stage) -> u8 {
    match stage {
        Stage::Config => 2,
        Stage::Io => 3,
        Stage::Simulate => 10,
        Stage::Calibrate => 11,
        Stage::DelayProfile => 12,
        Stage::Extract => 13,
        Stage::Features => 14,
        Stage::Classify => 15,
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).map_err(|e| match e {
            Error::Io(io) => Error::Config(format!("{}: {io}", p.display())),
            other => other,
        })?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.trials {
        cfg.trials = t;
    }
    if let Some(w) = cfg.plan.build()?.coherence_warning() {
        eprintln!("warning: {w}");
    }
    Ok(cfg)
}

fn output(cli: &Cli) -> Result<Box<dyn Write>> {
    Ok(match &cli.out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn write_artifact<T: Artifact>(cli: &Cli, artifact: &T) -> Result<()> {
    artifact.to_container().write_to(output(cli)?)
}

fn write_json<T: Serialize>(cli: &Cli, value: &T) -> Result<()> {
    let mut w = output(cli)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::Format(e.to_string()))?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn plot_path(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_pdp_plot(prefix: &Path, lasso: &DelayProfile, refit: &DelayProfile) -> Result<()> {
    let mut w = BufWriter::new(File::create(plot_path(prefix, ".pdp.csv"))?);
    writeln!(w, "delay_ns,lasso,refit")?;
    for (i, (a, b)) in lasso.magnitudes().iter().zip(refit.magnitudes()).enumerate() {
        writeln!(w, "{},{a},{b}", lasso.grid.delay(i) * 1e9)?;
    }
    w.flush()?;
    Ok(())
}

fn write_spectrum_plot(prefix: &Path, direct: &DirectPathSpectrum) -> Result<()> {
    let mut w = BufWriter::new(File::create(plot_path(prefix, ".spectrum.csv"))?);
    writeln!(w, "frequency_hz,amplitude,phase_rad")?;
    for (f, h) in direct.frequencies.iter().zip(&direct.response) {
        writeln!(w, "{f},{},{}", h.norm(), h.arg())?;
    }
    w.flush()?;
    Ok(())
}

fn solve_profile(cal: &CalibratedSpectrum, cfg: &ExperimentConfig) -> Result<(DelayProfile, DelayProfile)> {
    let c = &cfg.calibration;
    let op = NdftOperator::new(&cal.plan.frequencies(), c.grid)?;
    let y = stitch(cal);
    let lasso = solve_lasso(&op, &y, &c.sparsity, None)?;
    let refit = refit_profile(&lasso, &op, &y, &c.window, &cfg.refit)?;
    Ok((lasso, refit))
}

fn print_benchmark(report: &BenchmarkReport) {
    let hits: usize = (0..report.confusion.labels.len()).map(|i| report.confusion.counts[i][i]).sum();
    eprintln!(
        "accuracy: {:.4} ({hits}/{}) seed {}",
        report.accuracy,
        report.confusion.total(),
        report.seed
    );
    eprint!("{}", report.confusion);
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Simulate { class, trial } => {
            let plan = cfg.plan.build()?;
            let slab_class = cfg
                .classes
                .iter()
                .find(|c| c.label == *class)
                .ok_or_else(|| Error::Config(format!("class {class} is not defined in the config")))?;
            let seed = derive_seed(cfg.seed, STREAM_SIMULATE, *trial);
            write_artifact(cli, &simulate_trial(&cfg, &plan, slab_class, seed)?)
        }
        Command::Calibrate { input } => {
            let ds = CsiDataset::load(input)?;
            write_artifact(cli, &calibrate(&ds, &cfg.calibration)?)
        }
        Command::Pdp { input } => {
            let cal = CalibratedSpectrum::load(input)?;
            let (lasso, refit) = solve_profile(&cal, &cfg)?;
            eprintln!("solver iterations: {}", lasso.iterations());
            if let Some(prefix) = &cli.plot_data {
                write_pdp_plot(prefix, &lasso, &refit)?;
            }
            write_artifact(cli, &PlannedProfile { plan: cal.plan, profile: refit })
        }
        Command::Extract { input } => {
            let planned = PlannedProfile::load(input)?;
            let direct = extract_direct_path(&planned.profile, &planned.plan, &cfg.calibration.window)?;
            if let Some(prefix) = &cli.plot_data {
                write_spectrum_plot(prefix, &direct)?;
            }
            write_artifact(cli, &direct)
        }
        Command::Features { input } => {
            let direct = DirectPathSpectrum::load(input)?;
            let fv = build_features_with(&direct, &cfg.modwt(), cfg.features.mode, cfg.plan.subcarriers)?;
            write_artifact(cli, &fv)
        }
        Command::ProfileBuild { samples } => {
            let lib = if samples.is_empty() {
                build_library(&cfg)?
            } else {
                let mut profiles = Vec::new();
                for label in RipenessLabel::ALL {
                    let fvs = samples
                        .iter()
                        .filter(|(l, _)| *l == label)
                        .map(|(_, p)| FeatureVector::load(p))
                        .collect::<Result<Vec<_>>>()?;
                    if !fvs.is_empty() {
                        profiles.push(build_profile(&fvs, label)?);
                    }
                }
                let lib = ProfileLibrary {
                    profiles,
                    fruit_kind: cfg.fruit_kind.clone(),
                    plan_hash: cfg.plan.build()?.fingerprint(),
                };
                lib.validate()?;
                lib
            };
            write_artifact(cli, &lib)
        }
        Command::Classify { input, library } => {
            let fv = FeatureVector::load(input)?;
            let lib = ProfileLibrary::load(library)?;
            write_json(cli, &classify(&fv, &lib)?)
        }
        Command::Pipeline { input: Some(input), library } => {
            let ds = CsiDataset::load(input)?;
            let lib = library.as_deref().map(ProfileLibrary::load).transpose()?;
            let settings = cfg.settings();
            let out = run_pipeline(&ds, &settings, lib.as_ref())?;
            if let Some(prefix) = &cli.plot_data {
                write_pdp_plot(prefix, &out.lasso, &out.profile)?;
                write_spectrum_plot(prefix, &out.direct)?;
            }
            write_json(cli, &out.report(&ds, &settings)?)
        }
        Command::Pipeline { input: None, library } => {
            let lib = match library {
                Some(p) => ProfileLibrary::load(p)?,
                None => build_library(&cfg)?,
            };
            let report = run_benchmark(&cfg, &lib)?;
            print_benchmark(&report);
            write_json(cli, &report)
        }
        Command::Bench { library } => {
            let plan = cfg.plan.build()?;
            let lib = library.as_deref().map(ProfileLibrary::load).transpose()?;
            let start = Instant::now();
            let ds = simulate_trial(&cfg, &plan, &cfg.classes[0], derive_seed(cfg.seed, STREAM_SIMULATE, 0))?;
            let simulate = start.elapsed().as_secs_f64();
            let out = run_pipeline(&ds, &cfg.settings(), lib.as_ref())?;
            if !out.lasso.objective_monotone() {
                return Err(Error::Solver("objective trace increased".into()));
            }
            let mut rows = vec![("simulate_s".to_string(), format!("{simulate:.6}"))];
            for (name, secs) in out.timings.rows() {
                rows.push((format!("{name}_s"), format!("{secs:.6}")));
            }
            rows.push(("total_s".into(), format!("{:.6}", simulate + out.timings.total())));
            rows.push(("solver_iterations".into(), out.lasso.iterations().to_string()));
            rows.push(("objective_monotone".into(), "true".into()));
            rows.push(("channels".into(), plan.channel_count().to_string()));
            let mut w = output(cli)?;
            writeln!(w, "metric,value")?;
            for (metric, value) in rows {
                writeln!(w, "{metric},{value}")?;
            }
            w.flush()?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let stage = e.stage();
            eprintln!("error [{}]: {e}", stage.name());
            ExitCode::from(exit_code(stage))
        }
    }
}
