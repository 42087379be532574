//! Ground-truth generators: the Mackey–Glass delay equation, a
//! pseudo-spectral nonlinear Schrödinger solver, and calibrated white noise.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mackey–Glass parameters for `dy/dt = β y(t−τ)/(1 + y(t−τ)ⁿ) − γ y(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MgParams {
    pub beta: f64,
    pub gamma: f64,
    pub tau: f64,
    pub n: f64,
    /// Sampling period of the output series.
    pub dt: f64,
    pub y0: f64,
    /// Number of output samples, starting at `t = 0`.
    pub samples: usize,
    /// RK4 substeps per sampling period.
    #[serde(default = "default_mg_substeps")]
    pub substeps: usize,
}

fn default_mg_substeps() -> usize {
    10
}

impl MgParams {
    pub fn standard() -> Self {
        MgParams { beta: 0.2, gamma: 0.1, tau: 30.0, n: 10.0, dt: 6.0, y0: 0.9, samples: 1000, substeps: 10 }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.beta, self.gamma, self.tau, self.n, self.dt, self.y0].iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("Mackey–Glass parameters must be finite"));
        }
        if self.dt <= 0.0 {
            return Err(Error::invalid(format!("sampling period must be positive, got {}", self.dt)));
        }
        if self.tau < 0.0 {
            return Err(Error::invalid(format!("delay must be nonnegative, got {}", self.tau)));
        }
        if self.samples == 0 || self.substeps == 0 {
            return Err(Error::invalid("sample and substep counts must be at least 1"));
        }
        Ok(())
    }
}

/// Noise applied to a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseDescriptor {
    /// Target SNR in dB; `None` encodes +∞ (no noise).
    pub snr_db: Option<f64>,
    pub seed: u64,
}

/// Uniformly sampled trajectory. States are stored one snapshot per column.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub times: Vec<f64>,
    pub clean: DMatrix<f64>,
    pub noisy: Option<DMatrix<f64>>,
    pub noise: Option<NoiseDescriptor>,
    pub dt: f64,
    /// Complex field for NLS runs, on the output grid.
    pub complex: Option<DMatrix<Complex64>>,
    /// Generator parameters echoed into the sidecar file.
    pub params: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    params: serde_json::Value,
    dt: f64,
    dim: usize,
    len: usize,
    noise: Option<NoiseDescriptor>,
    columns: Vec<String>,
}

impl TrajectoryDataset {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.clean.nrows()
    }

    /// Clean snapshot pairs `(X, X′)`: columns `0..m−1` and `1..m`.
    pub fn snapshot_pairs(&self) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let m = self.len();
        if m < 2 {
            return Err(Error::invalid("need at least two snapshots to form X and X′"));
        }
        Ok((self.clean.columns(0, m - 1).into_owned(), self.clean.columns(1, m - 1).into_owned()))
    }

    /// Copy with AWGN at `snr_db` added to the clean states.
    pub fn with_noise(&self, snr_db: f64, seed: u64) -> Result<Self> {
        let (noisy, _) = add_awgn(self.clean.as_slice(), snr_db, seed)?;
        let mut out = self.clone();
        out.noisy = Some(DMatrix::from_vec(self.clean.nrows(), self.clean.ncols(), noisy));
        out.noise = Some(NoiseDescriptor { snr_db: snr_db.is_finite().then_some(snr_db), seed });
        Ok(out)
    }

    fn columns(&self) -> Vec<String> {
        let mut cols = vec!["time".to_string()];
        cols.extend((0..self.dim()).map(|i| format!("x{i}")));
        if self.noisy.is_some() {
            cols.extend((0..self.dim()).map(|i| format!("noisy{i}")));
        }
        cols
    }

    /// Writes `path` (CSV, one row per snapshot) and `path` with a `.json`
    /// extension as the sidecar.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(self.columns())?;
        for (j, t) in self.times.iter().enumerate() {
            let mut row = vec![t.to_string()];
            row.extend(self.clean.column(j).iter().map(f64::to_string));
            if let Some(noisy) = &self.noisy {
                row.extend(noisy.column(j).iter().map(f64::to_string));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        let sidecar = Sidecar {
            params: self.params.clone(),
            dt: self.dt,
            dim: self.dim(),
            len: self.len(),
            noise: self.noise,
            columns: self.columns(),
        };
        fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }

    /// Reads a dataset written by [`TrajectoryDataset::write`]. The complex
    /// field is not persisted.
    pub fn read(path: &Path) -> Result<Self> {
        let side_path = sidecar_path(path);
        let sidecar: Sidecar = serde_json::from_str(
            &fs::read_to_string(&side_path)
                .map_err(|e| Error::Io(e).context(format!("reading {}", side_path.display())))?,
        )?;
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::Csv(e).context(format!("reading {}", path.display())))?;
        let d = sidecar.dim;
        let has_noise = sidecar.columns.len() == 1 + 2 * d;
        let mut times = Vec::new();
        let mut clean = Vec::new();
        let mut noisy = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != sidecar.columns.len() {
                return Err(Error::invalid(format!("row has {} fields, expected {}", rec.len(), sidecar.columns.len())));
            }
            let vals: Vec<f64> = rec
                .iter()
                .map(|s| s.parse::<f64>().map_err(|e| Error::invalid(format!("bad number {s:?}: {e}"))))
                .collect::<Result<_>>()?;
            times.push(vals[0]);
            clean.extend_from_slice(&vals[1..1 + d]);
            if has_noise {
                noisy.extend_from_slice(&vals[1 + d..1 + 2 * d]);
            }
        }
        let len = times.len();
        if len != sidecar.len {
            return Err(Error::invalid(format!("CSV has {len} rows, sidecar says {}", sidecar.len)));
        }
        Ok(TrajectoryDataset {
            times,
            clean: DMatrix::from_vec(d, len, clean),
            noisy: has_noise.then(|| DMatrix::from_vec(d, len, noisy)),
            noise: sidecar.noise,
            dt: sidecar.dt,
            complex: None,
            params: sidecar.params,
        })
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn mg_rhs(p: &MgParams, y: f64, delayed: f64) -> f64 {
    p.beta * delayed / (1.0 + delayed.powf(p.n)) - p.gamma * y
}

/// Integrates the Mackey–Glass equation with RK4 on a fine grid of
/// `dt / substeps`. Delayed values are linearly interpolated from the stored
/// fine-grid history; the history before `t = 0` is the constant `y₀`.
pub fn mackey_glass(params: &MgParams) -> Result<TrajectoryDataset> {
    params.validate()?;
    let h = params.dt / params.substeps as f64;
    let total = (params.samples - 1) * params.substeps;
    let mut hist = Vec::with_capacity(total + 1);
    hist.push(params.y0);

    // Delayed value at fine-grid position `pos` (in substeps). Positions past
    // the stored history only occur when τ is shorter than a substep; they
    // interpolate towards the current stage value at position `last + off`.
    let tau_steps = params.tau / h;
    let delayed = |hist: &[f64], pos: f64, off: f64, y_stage: f64| -> f64 {
        if pos < 0.0 {
            return params.y0;
        }
        let last = hist.len() - 1;
        if pos <= last as f64 {
            let k = (pos.floor() as usize).min(last);
            let frac = pos - k as f64;
            if k == last || frac == 0.0 {
                return hist[k];
            }
            hist[k] + frac * (hist[k + 1] - hist[k])
        } else {
            let frac = (pos - last as f64) / off;
            hist[last] + frac * (y_stage - hist[last])
        }
    };

    for step in 0..total {
        let base = step as f64 - tau_steps;
        let y = hist[step];
        let k1 = mg_rhs(params, y, delayed(&hist, base, 0.0, y));
        let y2 = y + 0.5 * h * k1;
        let k2 = mg_rhs(params, y2, delayed(&hist, base + 0.5, 0.5, y2));
        let y3 = y + 0.5 * h * k2;
        let k3 = mg_rhs(params, y3, delayed(&hist, base + 0.5, 0.5, y3));
        let y4 = y + h * k3;
        let k4 = mg_rhs(params, y4, delayed(&hist, base + 1.0, 1.0, y4));
        let next = y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if !next.is_finite() || next.abs() > 1e6 {
            return Err(Error::numeric(format!("Mackey–Glass diverged at t = {:.3}", (step + 1) as f64 * h)));
        }
        hist.push(next);
    }

    let series: Vec<f64> = hist.iter().step_by(params.substeps).copied().collect();
    let times = (0..params.samples).map(|k| k as f64 * params.dt).collect();
    Ok(TrajectoryDataset {
        times,
        clean: DMatrix::from_row_slice(1, params.samples, &series),
        noisy: None,
        noise: None,
        dt: params.dt,
        complex: None,
        params: serde_json::to_value(params)?,
    })
}

/// Outcome of [`add_awgn`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseReport {
    pub target_snr_db: f64,
    pub signal_power: f64,
    pub noise_variance: f64,
    /// `10 log10(signal power / empirical noise power)`; +∞ when no noise was added.
    pub achieved_snr_db: f64,
}

/// Adds zero-mean Gaussian noise with variance `P / 10^{snr_db/10}`, where
/// `P` is the mean-square power of `x`. `snr_db = +∞` returns a copy.
pub fn add_awgn(x: &[f64], snr_db: f64, seed: u64) -> Result<(Vec<f64>, NoiseReport)> {
    if x.is_empty() {
        return Err(Error::invalid("cannot add noise to an empty signal"));
    }
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(Error::invalid(format!("invalid SNR {snr_db}")));
    }
    let power = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    if !(power > 0.0 && power.is_finite()) {
        return Err(Error::invalid("signal has zero (or non-finite) power; SNR is undefined"));
    }
    if snr_db == f64::INFINITY {
        let report = NoiseReport { target_snr_db: snr_db, signal_power: power, noise_variance: 0.0, achieved_snr_db: f64::INFINITY };
        return Ok((x.to_vec(), report));
    }
    let variance = power / 10f64.powf(snr_db / 10.0);
    let sd = variance.sqrt();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut noise_power = 0.0;
    let out = x
        .iter()
        .map(|v| {
            let e: f64 = StandardNormal.sample(&mut rng);
            noise_power += (sd * e) * (sd * e);
            v + sd * e
        })
        .collect();
    noise_power /= x.len() as f64;
    let report = NoiseReport {
        target_snr_db: snr_db,
        signal_power: power,
        noise_variance: variance,
        achieved_snr_db: 10.0 * (power / noise_power).log10(),
    };
    Ok((out, report))
}

/// Settings for `i u_t + ½ u_xx + |u|²u = 0` with `u(x, 0) = c·sech(x)` on a
/// periodic box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NlsConfig {
    pub x_min: f64,
    pub x_max: f64,
    /// Solver grid size, a power of two.
    pub solver_points: usize,
    /// Output grid size; must divide `solver_points`.
    pub output_points: usize,
    /// Number of snapshots `m`, uniformly spaced on `[0, T]` including both ends.
    pub snapshots: usize,
    pub horizon: f64,
    pub amplitude: f64,
    /// RK4 substeps per time `π`; the actual count scales with the horizon.
    pub substeps_per_pi: usize,
}

impl NlsConfig {
    pub fn standard(amplitude: f64, snapshots: usize, horizon: f64) -> Self {
        NlsConfig {
            x_min: -15.0,
            x_max: 15.0,
            solver_points: 1024,
            output_points: 32,
            snapshots,
            horizon,
            amplitude,
            substeps_per_pi: 16000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.x_max > self.x_min) || !self.x_min.is_finite() || !self.x_max.is_finite() {
            return Err(Error::invalid("NLS domain must satisfy x_min < x_max"));
        }
        if !self.solver_points.is_power_of_two() || self.solver_points < 2 {
            return Err(Error::invalid(format!("solver grid {} is not a power of two", self.solver_points)));
        }
        if self.output_points == 0 || self.solver_points % self.output_points != 0 {
            return Err(Error::invalid(format!(
                "output grid {} must divide solver grid {}",
                self.output_points, self.solver_points
            )));
        }
        if self.snapshots < 2 || !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::invalid("need at least two snapshots over a positive horizon"));
        }
        if self.substeps_per_pi == 0 || !self.amplitude.is_finite() {
            return Err(Error::invalid("substep count must be positive and amplitude finite"));
        }
        Ok(())
    }

    /// RK4 substeps between consecutive snapshots.
    pub fn steps_per_snapshot(&self) -> usize {
        let total = (self.substeps_per_pi as f64 * self.horizon / PI).ceil() as usize;
        total.div_ceil(self.snapshots - 1).max(1)
    }

    /// Solver grid points `x_j = x_min + j·L/N`, `j = 0..N`.
    pub fn solver_grid(&self) -> Vec<f64> {
        let dx = (self.x_max - self.x_min) / self.solver_points as f64;
        (0..self.solver_points).map(|j| self.x_min + j as f64 * dx).collect()
    }

    pub fn output_grid(&self) -> Vec<f64> {
        let stride = self.solver_points / self.output_points;
        self.solver_grid().into_iter().step_by(stride).collect()
    }
}

struct SpectralNls {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    /// `−½k²` per Fourier mode.
    linear: Vec<f64>,
    scratch: Vec<Complex64>,
}

impl SpectralNls {
    fn new(cfg: &NlsConfig) -> Self {
        let n = cfg.solver_points;
        let mut planner = FftPlanner::new();
        let length = cfg.x_max - cfg.x_min;
        let linear = (0..n)
            .map(|j| {
                let m = if j <= n / 2 { j as f64 } else { j as f64 - n as f64 };
                let k = 2.0 * PI * m / length;
                -0.5 * k * k
            })
            .collect();
        SpectralNls {
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
            linear,
            scratch: vec![Complex64::new(0.0, 0.0); n],
        }
    }

    fn to_physical(&mut self, uhat: &[Complex64], out: &mut [Complex64]) {
        out.copy_from_slice(uhat);
        self.inverse.process_with_scratch(out, &mut self.scratch);
        let scale = 1.0 / out.len() as f64;
        out.iter_mut().for_each(|v| *v *= scale);
    }

    fn to_spectral(&mut self, u: &mut [Complex64]) {
        self.forward.process_with_scratch(u, &mut self.scratch);
    }

    /// `i(−½k²û) + i·FFT(|u|²u)`
    fn rhs(&mut self, uhat: &[Complex64], buf: &mut [Complex64], out: &mut [Complex64]) {
        self.to_physical(uhat, buf);
        buf.iter_mut().for_each(|v| *v *= v.norm_sqr());
        self.to_spectral(buf);
        let i = Complex64::i();
        for ((o, &u), (&nl, &lin)) in out.iter_mut().zip(uhat).zip(buf.iter().zip(&self.linear)) {
            *o = i * (u * lin + nl);
        }
    }

    fn rk4_step(&mut self, uhat: &mut [Complex64], h: f64, work: &mut RkWork) {
        let n = uhat.len();
        self.rhs(uhat, &mut work.buf, &mut work.k1);
        for j in 0..n {
            work.stage[j] = uhat[j] + 0.5 * h * work.k1[j];
        }
        let stage = work.stage.clone();
        self.rhs(&stage, &mut work.buf, &mut work.k2);
        for j in 0..n {
            work.stage[j] = uhat[j] + 0.5 * h * work.k2[j];
        }
        let stage = work.stage.clone();
        self.rhs(&stage, &mut work.buf, &mut work.k3);
        for j in 0..n {
            work.stage[j] = uhat[j] + h * work.k3[j];
        }
        let stage = work.stage.clone();
        self.rhs(&stage, &mut work.buf, &mut work.k4);
        for j in 0..n {
            uhat[j] += h / 6.0 * (work.k1[j] + 2.0 * work.k2[j] + 2.0 * work.k3[j] + work.k4[j]);
        }
    }
}

struct RkWork {
    buf: Vec<Complex64>,
    stage: Vec<Complex64>,
    k1: Vec<Complex64>,
    k2: Vec<Complex64>,
    k3: Vec<Complex64>,
    k4: Vec<Complex64>,
}

impl RkWork {
    fn new(n: usize) -> Self {
        let z = vec![Complex64::new(0.0, 0.0); n];
        RkWork { buf: z.clone(), stage: z.clone(), k1: z.clone(), k2: z.clone(), k3: z.clone(), k4: z }
    }
}

/// Solver-grid field at each snapshot time, one snapshot per column.
pub fn nls_solve_fine(cfg: &NlsConfig) -> Result<DMatrix<Complex64>> {
    cfg.validate()?;
    let n = cfg.solver_points;
    let steps = cfg.steps_per_snapshot();
    let h = cfg.horizon / ((cfg.snapshots - 1) * steps) as f64;
    let mut solver = SpectralNls::new(cfg);
    let mut work = RkWork::new(n);

    let mut u: Vec<Complex64> =
        cfg.solver_grid().iter().map(|&x| Complex64::new(cfg.amplitude / x.cosh(), 0.0)).collect();
    let norm0 = u.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
    let mut out = DMatrix::from_element(n, cfg.snapshots, Complex64::new(0.0, 0.0));
    out.set_column(0, &nalgebra::DVector::from_column_slice(&u));
    let mut uhat = u.clone();
    solver.to_spectral(&mut uhat);

    for snap in 1..cfg.snapshots {
        for _ in 0..steps {
            solver.rk4_step(&mut uhat, h, &mut work);
        }
        solver.to_physical(&uhat, &mut u);
        let norm = u.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        if !norm.is_finite() || norm > 10.0 * norm0.max(f64::MIN_POSITIVE) {
            return Err(Error::numeric(format!(
                "NLS solution blew up before snapshot {snap} (norm {norm:e}); use a smaller substep"
            )));
        }
        out.set_column(snap, &nalgebra::DVector::from_column_slice(&u));
    }
    Ok(out)
}

/// Maximum automatic substep doublings after a blow-up.
const NLS_RETRIES: usize = 4;

/// Simulates the NLS and returns snapshots on the output grid. The clean
/// states are the real part; the complex field is kept alongside.
pub fn nls_simulate(cfg: &NlsConfig) -> Result<TrajectoryDataset> {
    cfg.validate()?;
    let mut attempt = cfg.clone();
    let mut fine = nls_solve_fine(&attempt);
    for _ in 0..NLS_RETRIES {
        match &fine {
            Err(e) if e.is_numeric() => {
                attempt.substeps_per_pi *= 2;
                log::warn!("NLS blow-up, retrying with {} substeps per π", attempt.substeps_per_pi);
                fine = nls_solve_fine(&attempt);
            }
            _ => break,
        }
    }
    let fine = fine?;
    let stride = cfg.solver_points / cfg.output_points;
    let coarse = DMatrix::from_fn(cfg.output_points, cfg.snapshots, |i, j| fine[(i * stride, j)]);
    let times = (0..cfg.snapshots).map(|j| j as f64 * cfg.horizon / (cfg.snapshots - 1) as f64).collect();
    let dt = cfg.horizon / (cfg.snapshots - 1) as f64;
    Ok(TrajectoryDataset {
        times,
        clean: coarse.map(|z| z.re),
        noisy: None,
        noise: None,
        dt,
        complex: Some(coarse),
        params: serde_json::to_value(&attempt)?,
    })
}
