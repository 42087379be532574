//! Experiment drivers: Mackey–Glass denoising and NLS reconstruction, with
//! configuration presets, ensemble statistics and CSV/JSON outputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::{self, MgParams, NlsConfig};
use crate::error::{Error, Result};
use crate::features::FeatureSpec;
use crate::filter::{CovarianceLayout, FilterConfig, FilterModel, Mode};
use crate::koopman::{self, KoopmanModel, Observables};
use crate::par;

/// Ensemble size for full-scale runs.
pub const FULL_ENSEMBLE: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "experiment", rename_all = "kebab-case")]
pub enum ExperimentConfig {
    MgDenoise(MgDenoiseConfig),
    NlsReconstruct(NlsReconstructConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MgDenoiseConfig {
    /// `samples` is the training length; the test segment follows it.
    pub mg: MgParams,
    pub snr_db: f64,
    /// Delay-embedding length `ℓ` of the input.
    pub embedding: usize,
    pub test_samples: usize,
    pub batches: usize,
    pub batch_steps: usize,
    pub ensemble: usize,
    /// The `seed` field is replaced per ensemble member.
    pub filter: FilterConfig,
    pub seed: u64,
    /// Save the member-0 model after training.
    #[serde(default = "default_true")]
    pub checkpoint: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "dmd")]
    Dmd,
    #[serde(rename = "g_k1")]
    GK1,
    #[serde(rename = "g_k2")]
    GK2,
    #[serde(rename = "g_gq")]
    GGq,
    #[serde(rename = "expfbf")]
    Expfbf,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Dmd, Method::GK1, Method::GK2, Method::GGq, Method::Expfbf];

    /// Column name in result tables.
    pub fn column(&self) -> &'static str {
        match self {
            Method::Dmd => "dmd",
            Method::GK1 => "k1",
            Method::GK2 => "k2",
            Method::GGq => "gq",
            Method::Expfbf => "expfbf",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NlsReconstructConfig {
    pub nls: NlsConfig,
    pub methods: Vec<Method>,
    pub rank: usize,
    /// GQ observables for the Koopman model and state features for expFBF.
    /// The seed is replaced per ensemble member.
    pub gq_features: FeatureSpec,
    /// The `state_features` and `seed` fields are replaced per member.
    pub filter: FilterConfig,
    pub ensemble: usize,
    pub seed: u64,
}

fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    pub const PRESETS: [&'static str; 4] = ["mg", "nls21", "nls101", "nls31-r30"];

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "mg" | "paper" => Ok(ExperimentConfig::MgDenoise(MgDenoiseConfig::standard())),
            "nls21" => Ok(ExperimentConfig::NlsReconstruct(NlsReconstructConfig::standard(2.0, 21, 10))),
            "nls101" => Ok(ExperimentConfig::NlsReconstruct(NlsReconstructConfig::standard(2.0, 101, 10))),
            "nls31-r30" => Ok(ExperimentConfig::NlsReconstruct(NlsReconstructConfig::standard(3.1, 101, 30))),
            other => Err(Error::invalid(format!(
                "unknown preset '{other}', expected one of {}",
                Self::PRESETS.join(", ")
            ))),
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::invalid(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::invalid(format!("config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ExperimentConfig::MgDenoise(c) => c.validate(),
            ExperimentConfig::NlsReconstruct(c) => c.validate(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ExperimentConfig::MgDenoise(_) => "mg-denoise",
            ExperimentConfig::NlsReconstruct(_) => "nls-reconstruct",
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        match self {
            ExperimentConfig::MgDenoise(c) => c.seed = seed,
            ExperimentConfig::NlsReconstruct(c) => c.seed = seed,
        }
    }

    pub fn set_ensemble(&mut self, n: usize) {
        match self {
            ExperimentConfig::MgDenoise(c) => c.ensemble = n,
            ExperimentConfig::NlsReconstruct(c) => c.ensemble = n,
        }
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

impl MgDenoiseConfig {
    pub fn standard() -> Self {
        MgDenoiseConfig {
            mg: MgParams::standard(),
            snr_db: 10.0,
            embedding: 7,
            test_samples: 100,
            batches: 10,
            batch_steps: 100,
            ensemble: 10,
            filter: FilterConfig {
                n_x: 5,
                n_y: 1,
                n_u: 7,
                mode: Mode::InputState,
                state_features: FeatureSpec::Taylor { order: 4, a: 0.6 },
                input_features: Some(FeatureSpec::Taylor { order: 4, a: 1.8 }),
                sigma_s: 0.3,
                sigma_y: 0.3,
                sigma_omega: 0.0,
                p4_init: 10.0,
                kappa1: 0.4,
                kappa2: 0.1,
                layout: CovarianceLayout::PerStateBlock,
                measurement_start: None,
                relift: true,
                seed: 0,
            },
            seed: 2024,
            checkpoint: true,
        }
    }

    /// Total generated samples: training, a gap of `embedding`, then the test segment.
    pub fn total_samples(&self) -> usize {
        self.mg.samples + self.embedding + self.test_samples
    }

    pub fn validate(&self) -> Result<()> {
        self.mg.validate()?;
        if self.ensemble == 0 || self.batches == 0 || self.batch_steps == 0 || self.test_samples == 0 {
            return Err(Error::invalid("ensemble, batches, batch_steps and test_samples must be at least 1"));
        }
        if self.filter.n_u != self.embedding || self.filter.n_y != 1 {
            return Err(Error::invalid(format!(
                "filter needs n_u = embedding = {} and n_y = 1, got n_u = {}, n_y = {}",
                self.embedding, self.filter.n_u, self.filter.n_y
            )));
        }
        if self.embedding + self.batch_steps > self.mg.samples {
            return Err(Error::invalid(format!(
                "batches of {} steps do not fit in {} training samples after a {}-sample embedding",
                self.batch_steps, self.mg.samples, self.embedding
            )));
        }
        Ok(())
    }
}

impl NlsReconstructConfig {
    /// `Δt = π/20`, so `m = 21` spans `[0, π]`.
    pub fn standard(amplitude: f64, snapshots: usize, rank: usize) -> Self {
        let horizon = std::f64::consts::PI / 20.0 * (snapshots - 1) as f64;
        let gq = FeatureSpec::GaussHermite { degree: 3, nodes: Some(64), a: 0.1, seed: 7 };
        NlsReconstructConfig {
            nls: NlsConfig::standard(amplitude, snapshots, horizon),
            methods: Method::ALL.to_vec(),
            rank,
            gq_features: gq.clone(),
            filter: FilterConfig {
                n_x: 32,
                n_y: 32,
                n_u: 0,
                mode: Mode::Concat,
                state_features: gq,
                input_features: None,
                sigma_s: 0.01,
                sigma_y: 0.01,
                sigma_omega: 0.0,
                p4_init: 1.0,
                kappa1: 1.0,
                kappa2: 1.0,
                layout: CovarianceLayout::PerStateBlock,
                measurement_start: None,
                relift: true,
                seed: 0,
            },
            ensemble: 1,
            seed: 2024,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.nls.validate()?;
        if self.ensemble == 0 || self.rank == 0 {
            return Err(Error::invalid("ensemble and rank must be at least 1"));
        }
        if self.methods.is_empty() {
            return Err(Error::invalid("method list is empty"));
        }
        if self.nls.snapshots < 2 {
            return Err(Error::invalid("at least two snapshots are needed"));
        }
        if self.methods.contains(&Method::Expfbf)
            && (self.filter.n_x != self.nls.output_points || self.filter.n_u != 0 || self.filter.mode != Mode::Concat)
        {
            return Err(Error::invalid(format!(
                "expFBF on NLS needs concat mode with n_x = {} and no input",
                self.nls.output_points
            )));
        }
        Ok(())
    }
}

/// Per-member seeds, all derived from the experiment seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MemberSeeds {
    pub member: usize,
    pub filter: u64,
    pub noise: u64,
    pub schedule: u64,
    pub features: u64,
}

pub fn member_seeds(seed: u64, member: usize) -> MemberSeeds {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(member as u64);
    MemberSeeds { member, filter: rng.random(), noise: rng.random(), schedule: rng.random(), features: rng.random() }
}

pub fn config_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("configuration serializes");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-row results for every ensemble member, with mean and sample standard
/// deviation across members.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultTable {
    pub index_name: String,
    pub index: Vec<f64>,
    pub columns: Vec<String>,
    /// `runs[member][column][row]`
    pub runs: Vec<Vec<Vec<f64>>>,
}

impl ResultTable {
    pub fn new(index_name: &str, index: Vec<f64>, columns: Vec<String>, runs: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::invalid("result table needs at least one run"));
        }
        for run in &runs {
            if run.len() != columns.len() || run.iter().any(|c| c.len() != index.len()) {
                return Err(Error::invalid("result table run has missing cells"));
            }
        }
        Ok(ResultTable { index_name: index_name.to_string(), index, columns, runs })
    }

    pub fn ensemble(&self) -> usize {
        self.runs.len()
    }

    pub fn rows(&self) -> usize {
        self.index.len()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    fn col(&self, name: &str) -> usize {
        self.column_index(name).unwrap_or_else(|| panic!("no column {name}"))
    }

    pub fn mean(&self, column: &str, row: usize) -> f64 {
        let c = self.col(column);
        self.runs.iter().map(|r| r[c][row]).sum::<f64>() / self.ensemble() as f64
    }

    /// Sample standard deviation; zero for a single member.
    pub fn std(&self, column: &str, row: usize) -> f64 {
        let n = self.ensemble();
        if n < 2 {
            return 0.0;
        }
        let c = self.col(column);
        let m = self.mean(column, row);
        (self.runs.iter().map(|r| (r[c][row] - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    }

    pub fn mean_column(&self, column: &str) -> Vec<f64> {
        (0..self.rows()).map(|i| self.mean(column, i)).collect()
    }

    /// Header `index, <col>_mean, <col>_std, ...`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec![self.index_name.clone()];
        for c in &self.columns {
            header.push(format!("{c}_mean"));
            header.push(format!("{c}_std"));
        }
        w.write_record(&header)?;
        for (i, t) in self.index.iter().enumerate() {
            let mut rec = vec![t.to_string()];
            for c in &self.columns {
                rec.push(self.mean(c, i).to_string());
                rec.push(self.std(c, i).to_string());
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// One row per member and index value.
    pub fn write_runs_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["member".to_string(), self.index_name.clone()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header)?;
        for (m, run) in self.runs.iter().enumerate() {
            for (i, t) in self.index.iter().enumerate() {
                let mut rec = vec![m.to_string(), t.to_string()];
                rec.extend(run.iter().map(|col| col[i].to_string()));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub experiment: String,
    pub version: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub seeds: Vec<MemberSeeds>,
    pub parallel: bool,
    pub wall_time_s: f64,
    pub outputs: Vec<String>,
    pub notes: Vec<String>,
}

impl Manifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Output of [`run_mg_denoise`].
#[derive(Debug, Clone)]
pub struct MgReport {
    /// Rows are batch iterations `1..=batches`. Columns: `train_prior`,
    /// `train_posterior` (mean squared error over the batch against the clean
    /// signal), `test_prior`, `test_posterior` (frozen weights on the test
    /// segment), and `noisy` (the measurement error over the batch).
    pub table: ResultTable,
    /// Mean squared measurement error over the training segment, per member.
    pub noise_floor: Vec<f64>,
    /// Mean square of the clean training signal, per member.
    pub signal_power: Vec<f64>,
    pub seeds: Vec<MemberSeeds>,
    pub checkpoint: Option<PathBuf>,
}

struct MgMember {
    columns: Vec<Vec<f64>>,
    noise_floor: f64,
    signal_power: f64,
    model: FilterModel,
}

const MG_COLUMNS: [&str; 5] = ["train_prior", "train_posterior", "test_prior", "test_posterior", "noisy"];

/// Runs the Mackey–Glass denoising protocol and, if `out_dir` is given,
/// writes `mse.csv`, `runs.csv`, `manifest.json` and a checkpoint.
pub fn run_mg_denoise(cfg: &MgDenoiseConfig, out_dir: Option<&Path>) -> Result<MgReport> {
    cfg.validate()?;
    let start = Instant::now();
    let mut params = cfg.mg.clone();
    params.samples = cfg.total_samples();
    let clean = dynamics::mackey_glass(&params)?.clean.row(0).iter().copied().collect::<Vec<_>>();
    let seeds: Vec<MemberSeeds> = (0..cfg.ensemble).map(|m| member_seeds(cfg.seed, m)).collect();

    let members: Vec<Result<MgMember>> =
        par::map_range(cfg.ensemble, |m| mg_member(cfg, &clean, &seeds[m]).map_err(|e| e.context(format!("ensemble member {m}"))));
    let members = members.into_iter().collect::<Result<Vec<_>>>()?;

    let index = (1..=cfg.batches).map(|b| b as f64).collect();
    let columns = MG_COLUMNS.iter().map(|c| c.to_string()).collect();
    let noise_floor = members.iter().map(|m| m.noise_floor).collect();
    let signal_power = members.iter().map(|m| m.signal_power).collect();
    let mut members = members;
    let first_model = members[0].model.clone();
    let runs = members.iter_mut().map(|m| std::mem::take(&mut m.columns)).collect();
    let table = ResultTable::new("iteration", index, columns, runs)?;

    let mut checkpoint = None;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        table.write_csv(&dir.join("mse.csv"))?;
        table.write_runs_csv(&dir.join("runs.csv"))?;
        let mut outputs = vec!["mse.csv".to_string(), "runs.csv".to_string()];
        if cfg.checkpoint {
            let path = dir.join("model_member0.bin");
            first_model.save(&path)?;
            outputs.push("model_member0.bin".into());
            checkpoint = Some(path);
        }
        let config = ExperimentConfig::MgDenoise(cfg.clone());
        Manifest {
            experiment: config.name().into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_hash: config.hash(),
            config,
            seeds: seeds.clone(),
            parallel: par::is_parallel(),
            wall_time_s: start.elapsed().as_secs_f64(),
            outputs,
            notes: vec!["errors are measured against the clean signal".into()],
        }
        .write(dir)?;
    }
    Ok(MgReport { table, noise_floor, signal_power, seeds, checkpoint })
}

fn mg_member(cfg: &MgDenoiseConfig, clean: &[f64], seeds: &MemberSeeds) -> Result<MgMember> {
    let (noisy, _) = dynamics::add_awgn(clean, cfg.snr_db, seeds.noise)?;
    let train = cfg.mg.samples;
    let test_start = train + cfg.embedding;
    let ell = cfg.embedding;
    // Input at step i is (d_{i-1}, ..., d_{i-ℓ}).
    let input = |i: usize| -> Vec<f64> { (1..=ell).map(|j| noisy[i - j]).collect() };

    let mut filter_cfg = cfg.filter.clone();
    filter_cfg.seed = seeds.filter;
    let mut model = FilterModel::new(filter_cfg)?;
    let zero = vec![0.0; model.n_s()];
    let mut rng = ChaCha20Rng::seed_from_u64(seeds.schedule);
    let mut columns = vec![Vec::with_capacity(cfg.batches); MG_COLUMNS.len()];

    for _ in 0..cfg.batches {
        let b0 = rng.random_range(ell..=train - cfg.batch_steps);
        model.set_state(&zero)?;
        let (mut prior, mut post, mut meas) = (0.0, 0.0, 0.0);
        for i in b0..b0 + cfg.batch_steps {
            let r = model.step(Some(&input(i)), &[noisy[i]], Some(&[clean[i]]))?;
            prior += r.prior_sq_error.unwrap_or(f64::NAN);
            post += r.posterior_sq_error.unwrap_or(f64::NAN);
            meas += (noisy[i] - clean[i]).powi(2);
        }
        let n = cfg.batch_steps as f64;

        let mut test = model.clone();
        test.freeze_weights(true);
        test.set_state(&zero)?;
        let (mut tprior, mut tpost) = (0.0, 0.0);
        for i in test_start..test_start + cfg.test_samples {
            let r = test.step(Some(&input(i)), &[noisy[i]], Some(&[clean[i]]))?;
            tprior += r.prior_sq_error.unwrap_or(f64::NAN);
            tpost += r.posterior_sq_error.unwrap_or(f64::NAN);
        }
        let nt = cfg.test_samples as f64;
        for (c, v) in columns.iter_mut().zip([prior / n, post / n, tprior / nt, tpost / nt, meas / n]) {
            c.push(v);
        }
    }
    let noise_floor = (ell..train).map(|i| (noisy[i] - clean[i]).powi(2)).sum::<f64>() / (train - ell) as f64;
    let signal_power = (ell..train).map(|i| clean[i] * clean[i]).sum::<f64>() / (train - ell) as f64;
    Ok(MgMember { columns, noise_floor, signal_power, model })
}

/// Totals and spectral summary for one reconstruction method.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: String,
    pub total_mean: f64,
    pub total_std: f64,
    /// Largest eigenvalue modulus of the fitted operator (member 0); `None` for expFBF.
    pub spectral_radius: Option<f64>,
    pub unstable: bool,
    /// Rank actually used, after clamping to the numerical rank.
    pub rank: Option<usize>,
}

/// Output of [`run_nls_reconstruct`].
#[derive(Debug, Clone)]
pub struct NlsReport {
    /// Rows are snapshot times; one column per method plus `expfbf_posterior`.
    pub table: ResultTable,
    pub summaries: Vec<MethodSummary>,
    pub seeds: Vec<MemberSeeds>,
    /// Member-0 reconstructions, `(column name, 32 × m matrix)`.
    pub reconstructions: Vec<(String, DMatrix<f64>)>,
    pub truth: DMatrix<f64>,
    pub times: Vec<f64>,
    pub notes: Vec<String>,
}

impl NlsReport {
    pub fn summary(&self, column: &str) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.method == column)
    }
}

struct MethodRun {
    columns: Vec<(String, Vec<f64>, DMatrix<f64>)>,
    koopman: Option<KoopmanModel>,
    note: Option<String>,
}

/// Fits the Koopman baselines and runs expFBF on one NLS trajectory. With
/// `out_dir`, writes `mse.csv`, `runs.csv`, `totals.csv`, `spectra_*.csv`,
/// `recon_*.csv`, `truth.csv` and `manifest.json`.
pub fn run_nls_reconstruct(cfg: &NlsReconstructConfig, out_dir: Option<&Path>) -> Result<NlsReport> {
    cfg.validate()?;
    let start = Instant::now();
    let data = dynamics::nls_simulate(&cfg.nls)?;
    let truth = data.clean.clone();
    let (x, xp) = data.snapshot_pairs()?;
    let seeds: Vec<MemberSeeds> = (0..cfg.ensemble).map(|m| member_seeds(cfg.seed, m)).collect();

    let jobs: Vec<(usize, Method)> =
        (0..cfg.ensemble).flat_map(|m| cfg.methods.iter().map(move |&k| (m, k))).collect();
    let results: Vec<Result<MethodRun>> = par::map_range(jobs.len(), |j| {
        let (m, method) = jobs[j];
        nls_method(cfg, method, &seeds[m], &truth, &x, &xp, data.dt)
            .map_err(|e| e.context(format!("{} (member {m})", method.column())))
    });
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;

    let mut columns: Vec<String> = Vec::new();
    for r in &results[..cfg.methods.len()] {
        columns.extend(r.columns.iter().map(|c| c.0.clone()));
    }
    let runs: Vec<Vec<Vec<f64>>> = results
        .chunks(cfg.methods.len())
        .map(|member| member.iter().flat_map(|r| r.columns.iter().map(|c| c.1.clone())).collect())
        .collect();
    let table = ResultTable::new("time", data.times.clone(), columns, runs)?;

    let mut notes: Vec<String> = Vec::new();
    for r in &results[..cfg.methods.len()] {
        notes.extend(r.note.clone());
    }
    let member0 = &results[..cfg.methods.len()];
    let summaries: Vec<MethodSummary> = table
        .columns
        .iter()
        .map(|name| {
            let c = table.col(name);
            let totals: Vec<f64> = table.runs.iter().map(|r| r[c].iter().sum()).collect();
            let n = totals.len() as f64;
            let mean = totals.iter().sum::<f64>() / n;
            let std = if totals.len() < 2 {
                0.0
            } else {
                (totals.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            };
            let km = member0.iter().find(|r| r.columns.iter().any(|c| &c.0 == name)).and_then(|r| r.koopman.as_ref());
            let radius = km.map(|k| k.dmd.spectral_radius());
            MethodSummary {
                method: name.clone(),
                total_mean: mean,
                total_std: std,
                spectral_radius: radius,
                unstable: radius.is_some_and(|r| r > 1.0),
                rank: km.map(|k| k.dmd.rank),
            }
        })
        .collect();
    let reconstructions: Vec<(String, DMatrix<f64>)> =
        member0.iter().flat_map(|r| r.columns.iter().map(|c| (c.0.clone(), c.2.clone()))).collect();

    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        let mut outputs = vec!["mse.csv".to_string(), "runs.csv".into(), "totals.csv".into(), "truth.csv".into()];
        table.write_csv(&dir.join("mse.csv"))?;
        table.write_runs_csv(&dir.join("runs.csv"))?;
        write_totals(&dir.join("totals.csv"), &summaries)?;
        let grid = cfg.nls.output_grid();
        write_snapshots(&dir.join("truth.csv"), &data.times, &grid, &truth)?;
        for r in member0 {
            if let Some(k) = &r.koopman {
                let name = format!("spectra_{}.csv", k.observables.name());
                k.dmd.spectra().write_csv(&dir.join(&name))?;
                outputs.push(name);
            }
        }
        for (name, rec) in &reconstructions {
            let file = format!("recon_{name}.csv");
            write_snapshots(&dir.join(&file), &data.times, &grid, rec)?;
            outputs.push(file);
        }
        let config = ExperimentConfig::NlsReconstruct(cfg.clone());
        Manifest {
            experiment: config.name().into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_hash: config.hash(),
            config,
            seeds: seeds.clone(),
            parallel: par::is_parallel(),
            wall_time_s: start.elapsed().as_secs_f64(),
            outputs,
            notes: notes.clone(),
        }
        .write(dir)?;
    }
    Ok(NlsReport { table, summaries, seeds, reconstructions, truth, times: data.times, notes })
}

fn member_features(cfg: &NlsReconstructConfig, seeds: &MemberSeeds) -> FeatureSpec {
    let mut spec = cfg.gq_features.clone();
    if seeds.member > 0 {
        match &mut spec {
            FeatureSpec::GaussHermite { seed, .. } | FeatureSpec::RandomFourier { seed, .. } => *seed = seeds.features,
            _ => {}
        }
    }
    spec
}

fn nls_method(
    cfg: &NlsReconstructConfig,
    method: Method,
    seeds: &MemberSeeds,
    truth: &DMatrix<f64>,
    x: &DMatrix<f64>,
    xp: &DMatrix<f64>,
    dt: f64,
) -> Result<MethodRun> {
    let m = truth.ncols();
    let n = truth.nrows();
    let observables = match method {
        Method::Dmd => Observables::Identity,
        Method::GK1 => Observables::Cubic,
        Method::GK2 => Observables::Quadratic,
        Method::GGq => Observables::Gq(member_features(cfg, seeds).build(n)?),
        Method::Expfbf => {
            let mut fc = cfg.filter.clone();
            fc.state_features = member_features(cfg, seeds);
            fc.seed = seeds.filter;
            let mut model = FilterModel::new(fc)?;
            model.reset_state_from(truth.column(0).as_slice())?;
            let mut prior = DMatrix::zeros(n, m);
            let mut post = DMatrix::zeros(n, m);
            prior.set_column(0, &model.output());
            post.set_column(0, &model.output());
            for k in 1..m {
                let d: Vec<f64> = truth.column(k).iter().copied().collect();
                let r = model.step(None, &d, None)?;
                prior.column_mut(k).copy_from_slice(&r.prior_output);
                post.column_mut(k).copy_from_slice(&r.posterior_output);
            }
            let (pe, _) = koopman::reconstruction_mse(&prior, truth)?;
            let (qe, _) = koopman::reconstruction_mse(&post, truth)?;
            return Ok(MethodRun {
                columns: vec![("expfbf".into(), pe, prior), ("expfbf_posterior".into(), qe, post)],
                koopman: None,
                note: None,
            });
        }
    };
    let name = observables.name();
    let (model, note) = match KoopmanModel::fit(observables.clone(), x, xp, cfg.rank, dt) {
        Ok(k) => (k, None),
        Err(e) => match root_cause(&e) {
            Error::RankDeficient { requested, rank } => {
                let (requested, rank) = (*requested, *rank);
                let k = KoopmanModel::fit(observables, x, xp, rank, dt)?;
                (k, Some(format!("{name}: rank {requested} exceeds numerical rank {rank}; fitted with rank {rank}")))
            }
            _ => return Err(e),
        },
    };
    let rec = model.predict_states(m - 1);
    let (per_time, _) = koopman::reconstruction_mse(&rec, truth)?;
    Ok(MethodRun { columns: vec![(name.to_string(), per_time, rec)], koopman: Some(model), note })
}

fn root_cause(e: &Error) -> &Error {
    match e {
        Error::Step { source, .. } | Error::Context { source, .. } => root_cause(source),
        other => other,
    }
}

fn write_totals(path: &Path, summaries: &[MethodSummary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["method", "total_mean", "total_std", "spectral_radius", "unstable", "rank"])?;
    for s in summaries {
        w.write_record([
            s.method.clone(),
            s.total_mean.to_string(),
            s.total_std.to_string(),
            s.spectral_radius.map(|r| r.to_string()).unwrap_or_default(),
            s.unstable.to_string(),
            s.rank.map(|r| r.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One row per snapshot: `time, x=<grid point>...`.
pub fn write_snapshots(path: &Path, times: &[f64], grid: &[f64], states: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["time".to_string()];
    header.extend(grid.iter().map(|x| format!("x={x}")));
    w.write_record(&header)?;
    for (k, t) in times.iter().enumerate() {
        let mut rec = vec![t.to_string()];
        rec.extend(states.column(k).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs either experiment.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<ExperimentReport> {
    match cfg {
        ExperimentConfig::MgDenoise(c) => run_mg_denoise(c, out_dir).map(ExperimentReport::Mg),
        ExperimentConfig::NlsReconstruct(c) => run_nls_reconstruct(c, out_dir).map(ExperimentReport::Nls),
    }
}

#[derive(Debug, Clone)]
pub enum ExperimentReport {
    Mg(MgReport),
    Nls(NlsReport),
}
