use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use expfbf::dynamics::{self, MgParams, NlsConfig, TrajectoryDataset};
use expfbf::features::FeatureSpec;
use expfbf::filter::{FilterConfig, FilterModel, Mode};
use expfbf::harness::{self, ExperimentConfig, ExperimentReport, MgDenoiseConfig, NlsReconstructConfig, FULL_ENSEMBLE};
use expfbf::koopman::{self, KoopmanModel, Observables};
use expfbf::{par, Error, Result};
use nalgebra::DMatrix;
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "expfbf", version, about = "Explicit-space functional Bayesian filter and Koopman/DMD baselines")]
struct Cli {
    /// Directory receiving every output file and manifest.json.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Seed overriding the one in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a dataset.
    #[command(subcommand)]
    Gen(GenCommand),
    /// Run the filter over a dataset.
    #[command(subcommand)]
    Filter(FilterCommand),
    /// Fit exact DMD to a dataset.
    #[command(subcommand)]
    Dmd(DmdCommand),
    /// Fit a Koopman model on lifted snapshots and roll it forward.
    #[command(subcommand)]
    Koopman(KoopmanCommand),
    /// Run a full experiment.
    #[command(subcommand)]
    Experiment(ExperimentCommand),
    /// Create or inspect filter checkpoints.
    #[command(subcommand)]
    Model(ModelCommand),
    /// Build a feature map and report its size.
    #[command(subcommand)]
    Features(FeaturesCommand),
}

#[derive(Subcommand, Debug)]
enum GenCommand {
    /// Mackey–Glass series.
    Mg {
        #[command(flatten)]
        source: ConfigSource,
        /// Add white noise at this SNR.
        #[arg(long)]
        snr_db: Option<f64>,
    },
    /// Nonlinear Schrödinger snapshots (real part).
    Nls {
        #[command(flatten)]
        source: ConfigSource,
    },
}

#[derive(Args, Debug)]
struct ConfigSource {
    /// JSON configuration file.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Named preset.
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Subcommand, Debug)]
enum FilterCommand {
    Run {
        /// Dataset CSV written by `gen`.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        source: ConfigSource,
    },
}

#[derive(Subcommand, Debug)]
enum DmdCommand {
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        rank: usize,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ObservableKind {
    Dmd,
    K1,
    K2,
    Gq,
}

#[derive(Subcommand, Debug)]
enum KoopmanCommand {
    Predict {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        rank: usize,
        #[arg(long, value_enum, default_value = "dmd")]
        observables: ObservableKind,
        /// Steps to roll forward; defaults to the dataset length minus one.
        #[arg(long)]
        steps: Option<usize>,
        /// Feature spec JSON for GQ observables.
        #[arg(long)]
        features: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    #[command(flatten)]
    source: ConfigSource,
    /// Ensemble size of 50.
    #[arg(long, conflicts_with = "ensemble")]
    paper_scale: bool,
    #[arg(long)]
    ensemble: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum ExperimentCommand {
    Mg(ExperimentArgs),
    Nls(ExperimentArgs),
}

#[derive(Subcommand, Debug)]
enum ModelCommand {
    /// Initialize a model from a filter configuration and save it.
    Save {
        #[command(flatten)]
        source: ConfigSource,
        #[arg(long, default_value = "model.bin")]
        name: String,
    },
    /// Load a checkpoint and write its summary.
    Load {
        #[arg(long)]
        path: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum FeaturesCommand {
    Inspect {
        /// Feature spec JSON.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dim: usize,
        /// Comma-separated point at which to evaluate the map.
        #[arg(long, value_delimiter = ',')]
        point: Option<Vec<f64>>,
    },
}

#[derive(Serialize)]
struct Manifest {
    command: String,
    version: &'static str,
    args: Vec<String>,
    config_hash: Option<String>,
    seed: Option<u64>,
    parallel: bool,
    wall_time_s: f64,
    outputs: Vec<String>,
}

struct Run {
    out_dir: PathBuf,
    seed: Option<u64>,
    outputs: Vec<String>,
    config_hash: Option<String>,
}

impl Run {
    fn path(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.out_dir.join(name)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 2 } else { 1 })
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let start = Instant::now();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let name = command_name(&cli.command);
    fs::create_dir_all(&cli.out_dir)?;
    let mut run = Run { out_dir: cli.out_dir.clone(), seed: cli.seed, outputs: Vec::new(), config_hash: None };
    match cli.command {
        Command::Gen(GenCommand::Mg { source, snr_db }) => gen_mg(&mut run, &source, snr_db)?,
        Command::Gen(GenCommand::Nls { source }) => gen_nls(&mut run, &source)?,
        Command::Filter(FilterCommand::Run { data, source }) => filter_run(&mut run, &data, &source)?,
        Command::Dmd(DmdCommand::Fit { data, rank }) => dmd_fit(&mut run, &data, rank)?,
        Command::Koopman(KoopmanCommand::Predict { data, rank, observables, steps, features }) => {
            koopman_predict(&mut run, &data, rank, observables, steps, features.as_deref())?
        }
        Command::Experiment(ExperimentCommand::Mg(a)) => experiment(&mut run, &a, true)?,
        Command::Experiment(ExperimentCommand::Nls(a)) => experiment(&mut run, &a, false)?,
        Command::Model(ModelCommand::Save { source, name }) => model_save(&mut run, &source, &name)?,
        Command::Model(ModelCommand::Load { path }) => model_load(&mut run, &path)?,
        Command::Features(FeaturesCommand::Inspect { config, dim, point }) => {
            features_inspect(&mut run, &config, dim, point.as_deref())?
        }
    }
    let manifest = Manifest {
        command: name,
        version: env!("CARGO_PKG_VERSION"),
        args,
        config_hash: run.config_hash.clone(),
        seed: run.seed,
        parallel: par::is_parallel(),
        wall_time_s: start.elapsed().as_secs_f64(),
        outputs: run.outputs.clone(),
    };
    // Experiments write their own richer manifest.
    if !manifest.command.starts_with("experiment") {
        fs::write(run.out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    }
    Ok(())
}

fn command_name(c: &Command) -> String {
    match c {
        Command::Gen(GenCommand::Mg { .. }) => "gen mg",
        Command::Gen(GenCommand::Nls { .. }) => "gen nls",
        Command::Filter(_) => "filter run",
        Command::Dmd(_) => "dmd fit",
        Command::Koopman(_) => "koopman predict",
        Command::Experiment(ExperimentCommand::Mg(_)) => "experiment mg",
        Command::Experiment(ExperimentCommand::Nls(_)) => "experiment nls",
        Command::Model(ModelCommand::Save { .. }) => "model save",
        Command::Model(ModelCommand::Load { .. }) => "model load",
        Command::Features(_) => "features inspect",
    }
    .to_string()
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::InvalidInput(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::InvalidInput(format!("config {}: {e}", path.display())))
}

fn nls_preset(name: &str) -> Result<NlsReconstructConfig> {
    match ExperimentConfig::preset(name)? {
        ExperimentConfig::NlsReconstruct(c) => Ok(c),
        _ => Err(Error::InvalidInput(format!("preset '{name}' is not an NLS preset"))),
    }
}

fn gen_mg(run: &mut Run, source: &ConfigSource, snr_db: Option<f64>) -> Result<()> {
    let params: MgParams = match (&source.config, source.preset.as_deref()) {
        (Some(p), _) => read_json(p)?,
        (None, None | Some("paper") | Some("mg")) => MgParams::standard(),
        (None, Some(other)) => return Err(Error::InvalidInput(format!("unknown MG preset '{other}', expected 'paper'"))),
    };
    run.config_hash = Some(harness::config_hash(&params));
    let mut data = dynamics::mackey_glass(&params)?;
    if let Some(db) = snr_db {
        data = data.with_noise(db, run.seed.unwrap_or(0))?;
    }
    data.write(&run.path("mg.csv"))?;
    run.outputs.push("mg.json".into());
    println!("wrote {} samples to {}", data.len(), run.out_dir.join("mg.csv").display());
    Ok(())
}

fn gen_nls(run: &mut Run, source: &ConfigSource) -> Result<()> {
    let cfg: NlsConfig = match (&source.config, source.preset.as_deref()) {
        (Some(p), _) => read_json(p)?,
        (None, preset) => nls_preset(preset.unwrap_or("nls21"))?.nls,
    };
    run.config_hash = Some(harness::config_hash(&cfg));
    let data = dynamics::nls_simulate(&cfg)?;
    data.write(&run.path("nls.csv"))?;
    run.outputs.push("nls.json".into());
    println!("wrote {} snapshots of dimension {}", data.len(), data.dim());
    Ok(())
}

fn filter_config(source: &ConfigSource, dim: usize) -> Result<FilterConfig> {
    if let Some(p) = &source.config {
        return read_json(p);
    }
    match source.preset.as_deref() {
        Some("mg") | Some("paper") => Ok(MgDenoiseConfig::standard().filter),
        Some(name) => Ok(nls_preset(name)?.filter),
        None if dim == 1 => Ok(MgDenoiseConfig::standard().filter),
        None => {
            let mut f = nls_preset("nls21")?.filter;
            f.n_x = dim;
            f.n_y = dim;
            Ok(f)
        }
    }
}

fn filter_run(run: &mut Run, data_path: &Path, source: &ConfigSource) -> Result<()> {
    let data = TrajectoryDataset::read(data_path)?;
    let mut cfg = filter_config(source, data.dim())?;
    if let Some(s) = run.seed {
        cfg.seed = s;
    }
    run.config_hash = Some(harness::config_hash(&cfg));
    let meas = data.noisy.as_ref().unwrap_or(&data.clean);
    let mut model = FilterModel::new(cfg.clone())?;
    let n_y = model.measurement_range().len();
    if n_y != data.dim() {
        return Err(Error::InvalidInput(format!("filter measures {n_y} coordinates, dataset has {}", data.dim())));
    }
    let first = if cfg.n_u > 0 {
        if data.dim() != 1 {
            return Err(Error::InvalidInput("delay-embedded inputs need a scalar series".into()));
        }
        cfg.n_u
    } else {
        if cfg.mode == Mode::Concat {
            model.reset_state_from(meas.column(0).as_slice())?;
        }
        1
    };
    let mut w = csv::Writer::from_path(run.path("steps.csv")).map_err(Error::from)?;
    let mut header = vec!["step".to_string(), "time".into()];
    header.extend((0..n_y).map(|i| format!("prior{i}")));
    header.extend((0..n_y).map(|i| format!("posterior{i}")));
    header.extend(["prior_sq_error".into(), "posterior_sq_error".into()]);
    w.write_record(&header).map_err(Error::from)?;
    let (mut prior, mut post) = (0.0, 0.0);
    for i in first..data.len() {
        let u: Option<Vec<f64>> = (cfg.n_u > 0).then(|| (1..=cfg.n_u).map(|j| meas[(0, i - j)]).collect());
        let d: Vec<f64> = meas.column(i).iter().copied().collect();
        let c: Vec<f64> = data.clean.column(i).iter().copied().collect();
        let r = model.step(u.as_deref(), &d, Some(&c))?;
        let (pe, qe) = (r.prior_sq_error.unwrap_or(f64::NAN), r.posterior_sq_error.unwrap_or(f64::NAN));
        prior += pe;
        post += qe;
        let mut rec = vec![r.step.to_string(), data.times[i].to_string()];
        rec.extend(r.prior_output.iter().map(f64::to_string));
        rec.extend(r.posterior_output.iter().map(f64::to_string));
        rec.extend([pe.to_string(), qe.to_string()]);
        w.write_record(&rec).map_err(Error::from)?;
    }
    w.flush()?;
    model.save(&run.path("model.bin"))?;
    let n = (data.len() - first) as f64;
    println!("prior mse {:.6e}, posterior mse {:.6e} over {} steps", prior / n, post / n, n);
    Ok(())
}

fn dmd_fit(run: &mut Run, data_path: &Path, rank: usize) -> Result<()> {
    let data = TrajectoryDataset::read(data_path)?;
    let (x, xp) = data.snapshot_pairs()?;
    let model = koopman::dmd_fit(&x, &xp, rank, data.dt)?;
    model.spectra().write_csv(&run.path("spectra.csv"))?;
    #[derive(Serialize)]
    struct Summary<'a> {
        rank: usize,
        spectral_radius: f64,
        amplitude_residual: f64,
        singular_values: &'a [f64],
    }
    let s = Summary {
        rank: model.rank,
        spectral_radius: model.spectral_radius(),
        amplitude_residual: model.amplitude_residual,
        singular_values: model.singular_values.as_slice(),
    };
    fs::write(run.path("dmd.json"), serde_json::to_string_pretty(&s)?)?;
    println!("rank {} DMD, spectral radius {:.6}", model.rank, model.spectral_radius());
    Ok(())
}

fn koopman_predict(
    run: &mut Run,
    data_path: &Path,
    rank: usize,
    kind: ObservableKind,
    steps: Option<usize>,
    features: Option<&Path>,
) -> Result<()> {
    let data = TrajectoryDataset::read(data_path)?;
    let (x, xp) = data.snapshot_pairs()?;
    let observables = match kind {
        ObservableKind::Dmd => Observables::Identity,
        ObservableKind::K1 => Observables::Cubic,
        ObservableKind::K2 => Observables::Quadratic,
        ObservableKind::Gq => {
            let mut spec: FeatureSpec = match features {
                Some(p) => read_json(p)?,
                None => nls_preset("nls21")?.gq_features,
            };
            if let (Some(s), FeatureSpec::GaussHermite { seed, .. } | FeatureSpec::RandomFourier { seed, .. }) =
                (run.seed, &mut spec)
            {
                *seed = s;
            }
            run.config_hash = Some(harness::config_hash(&spec));
            Observables::Gq(spec.build(data.dim())?)
        }
    };
    let name = observables.name();
    let model = KoopmanModel::fit(observables, &x, &xp, rank, data.dt)?;
    let steps = steps.unwrap_or(data.len() - 1);
    let pred = model.predict_states(steps);
    let times: Vec<f64> = (0..=steps).map(|k| data.times[0] + k as f64 * data.dt).collect();
    write_states(&run.path("prediction.csv"), &times, &pred)?;
    model.dmd.spectra().write_csv(&run.path(&format!("spectra_{name}.csv")))?;
    let overlap = (steps + 1).min(data.len());
    let (per_time, total) =
        koopman::reconstruction_mse(&pred.columns(0, overlap).into_owned(), &data.clean.columns(0, overlap).into_owned())?;
    koopman::write_mse_csv(&run.path("mse.csv"), &times[..overlap], &per_time)?;
    println!("{name}: total mse {total:.6e} over {overlap} snapshots, spectral radius {:.6}", model.dmd.spectral_radius());
    Ok(())
}

fn write_states(path: &Path, times: &[f64], states: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["time".to_string()];
    header.extend((0..states.nrows()).map(|i| format!("x{i}")));
    w.write_record(&header)?;
    for (k, t) in times.iter().enumerate() {
        let mut rec = vec![t.to_string()];
        rec.extend(states.column(k).iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn experiment(run: &mut Run, a: &ExperimentArgs, mg: bool) -> Result<()> {
    let mut cfg = match (&a.source.config, a.source.preset.as_deref()) {
        (Some(p), _) => ExperimentConfig::from_json_file(p)?,
        (None, Some(name)) => ExperimentConfig::preset(name)?,
        (None, None) => ExperimentConfig::preset(if mg { "mg" } else { "nls21" })?,
    };
    if matches!(cfg, ExperimentConfig::MgDenoise(_)) != mg {
        return Err(Error::InvalidInput(format!("configuration describes {}, not this experiment", cfg.name())));
    }
    if let Some(s) = run.seed {
        cfg.set_seed(s);
    }
    if a.paper_scale {
        cfg.set_ensemble(FULL_ENSEMBLE);
    } else if let Some(n) = a.ensemble {
        cfg.set_ensemble(n);
    }
    cfg.validate()?;
    run.config_hash = Some(cfg.hash());
    fs::write(run.out_dir.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    match harness::run_experiment(&cfg, Some(&run.out_dir))? {
        ExperimentReport::Mg(r) => {
            let last = r.table.rows() - 1;
            let floor = r.noise_floor.iter().sum::<f64>() / r.noise_floor.len() as f64;
            println!(
                "iteration {}: prior {:.4e}, posterior {:.4e}, test posterior {:.4e}, noise floor {:.4e}",
                last + 1,
                r.table.mean("train_prior", last),
                r.table.mean("train_posterior", last),
                r.table.mean("test_posterior", last),
                floor
            );
        }
        ExperimentReport::Nls(r) => {
            for s in &r.summaries {
                let radius = s.spectral_radius.map(|v| format!(", |λ|max {v:.4}")).unwrap_or_default();
                println!("{:>17}: total mse {:.4e}{radius}", s.method, s.total_mean);
            }
            for n in &r.notes {
                println!("note: {n}");
            }
        }
    }
    Ok(())
}

fn model_save(run: &mut Run, source: &ConfigSource, name: &str) -> Result<()> {
    let mut cfg = filter_config(source, 1)?;
    if let Some(s) = run.seed {
        cfg.seed = s;
    }
    run.config_hash = Some(harness::config_hash(&cfg));
    let model = FilterModel::new(cfg)?;
    model.save(&run.path(name))?;
    println!("saved model with n_s = {}, {} weights", model.n_s(), model.n_omega());
    Ok(())
}

fn model_load(run: &mut Run, path: &Path) -> Result<()> {
    let model = FilterModel::load(path)?;
    #[derive(Serialize)]
    struct Summary<'a> {
        config: &'a FilterConfig,
        n_s: usize,
        n_omega: usize,
        steps: usize,
        state: &'a [f64],
        healthy: bool,
    }
    let s = Summary {
        config: model.config(),
        n_s: model.n_s(),
        n_omega: model.n_omega(),
        steps: model.step_count(),
        state: model.state().as_slice(),
        healthy: model.health().is_healthy(),
    };
    fs::write(run.path("model.json"), serde_json::to_string_pretty(&s)?)?;
    println!("model at step {}, n_s = {}, {} weights", s.steps, s.n_s, s.n_omega);
    Ok(())
}

fn features_inspect(run: &mut Run, config: &Path, dim: usize, point: Option<&[f64]>) -> Result<()> {
    let spec: FeatureSpec = read_json(config)?;
    run.config_hash = Some(harness::config_hash(&spec));
    let map = spec.build(dim)?;
    #[derive(Serialize)]
    struct Summary {
        input_dim: usize,
        feature_dim: usize,
        values: Option<Vec<f64>>,
        self_kernel: Option<f64>,
    }
    let (values, self_kernel) = match point {
        Some(x) => {
            let v = map.eval(x)?;
            (Some(v.as_slice().to_vec()), Some(v.norm_squared()))
        }
        None => (None, None),
    };
    let s = Summary { input_dim: map.input_dim(), feature_dim: map.feature_dim(), values, self_kernel };
    fs::write(run.path("features.json"), serde_json::to_string_pretty(&s)?)?;
    fs::write(run.path("descriptor.json"), serde_json::to_string_pretty(&map.descriptor())?)?;
    println!("input dimension {}, feature dimension {}", s.input_dim, s.feature_dim);
    Ok(())
}
