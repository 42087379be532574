//! DMD and observable-lifted Koopman baselines.
//!
//! Snapshots are lifted column by column, an exact DMD is fitted in the
//! lifted space, and future states are reconstructed open-loop from the
//! initial lift as `Φ diag(λᵏ) b`, reading back the leading state block.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureMap, FeatureMapDescriptor};
use crate::numerics;

/// Singular values below this fraction of the largest count as zero.
pub const RANK_TOLERANCE: f64 = 1e-12;

/// Observable families. Every lift keeps the raw state as its leading block.
#[derive(Debug, Clone)]
pub enum Observables {
    /// `g(x) = x`
    Identity,
    /// `g(x) = [x; |x|²x]`
    Cubic,
    /// `g(x) = [x; |x|²]`
    Quadratic,
    /// `g(x) = [x; φ̃(x)]` with Fourier quadrature features.
    Gq(FeatureMap),
}

/// Serializable tag for [`Observables`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObservableDescriptor {
    Identity,
    Cubic,
    Quadratic,
    Gq { features: FeatureMapDescriptor },
}

impl Observables {
    pub fn name(&self) -> &'static str {
        match self {
            Observables::Identity => "dmd",
            Observables::Cubic => "k1",
            Observables::Quadratic => "k2",
            Observables::Gq(_) => "gq",
        }
    }

    pub fn lifted_dim(&self, n: usize) -> usize {
        match self {
            Observables::Identity => n,
            Observables::Cubic | Observables::Quadratic => 2 * n,
            Observables::Gq(map) => n + map.feature_dim(),
        }
    }

    pub fn descriptor(&self) -> ObservableDescriptor {
        match self {
            Observables::Identity => ObservableDescriptor::Identity,
            Observables::Cubic => ObservableDescriptor::Cubic,
            Observables::Quadratic => ObservableDescriptor::Quadratic,
            Observables::Gq(map) => ObservableDescriptor::Gq { features: map.descriptor() },
        }
    }

    pub fn from_descriptor(desc: &ObservableDescriptor) -> Result<Self> {
        Ok(match desc {
            ObservableDescriptor::Identity => Observables::Identity,
            ObservableDescriptor::Cubic => Observables::Cubic,
            ObservableDescriptor::Quadratic => Observables::Quadratic,
            ObservableDescriptor::Gq { features } => Observables::Gq(FeatureMap::from_descriptor(features)?),
        })
    }

    /// Lifts every column of `x`.
    pub fn lift(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        numerics::ensure_finite(x, "snapshot matrix")?;
        let n = x.nrows();
        if let Observables::Gq(map) = self {
            if map.input_dim() != n {
                return Err(Error::invalid(format!("GQ features expect dimension {}, snapshots have {n}", map.input_dim())));
            }
        }
        let mut out = DMatrix::zeros(self.lifted_dim(n), x.ncols());
        for (j, col) in x.column_iter().enumerate() {
            out.view_mut((0, j), (n, 1)).copy_from(&col);
            match self {
                Observables::Identity => {}
                Observables::Cubic => {
                    for i in 0..n {
                        out[(n + i, j)] = col[i] * col[i] * col[i];
                    }
                }
                Observables::Quadratic => {
                    for i in 0..n {
                        out[(n + i, j)] = col[i] * col[i];
                    }
                }
                Observables::Gq(map) => {
                    let f = map.eval(col.as_slice())?;
                    out.view_mut((n, j), (f.len(), 1)).copy_from(&f);
                }
            }
        }
        Ok(out)
    }
}

/// Leading `n` rows of a lifted matrix.
pub fn read_out(lifted: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    lifted.rows(0, n).into_owned()
}

/// Rank-`r` exact DMD.
#[derive(Debug, Clone)]
pub struct DmdModel {
    pub rank: usize,
    /// Lifted dim × r.
    pub modes: DMatrix<Complex64>,
    pub eigenvalues: DVector<Complex64>,
    pub amplitudes: DVector<Complex64>,
    pub dt: f64,
    /// All singular values of `X`, descending.
    pub singular_values: DVector<f64>,
    /// `‖Φb − x₀‖₂` of the amplitude fit.
    pub amplitude_residual: f64,
}

/// Fits `X′ ≈ K X` with exact DMD truncated to rank `r`.
pub fn dmd_fit(x: &DMatrix<f64>, xp: &DMatrix<f64>, r: usize, dt: f64) -> Result<DmdModel> {
    if x.shape() != xp.shape() {
        return Err(Error::invalid(format!("X is {:?} but X′ is {:?}", x.shape(), xp.shape())));
    }
    if r == 0 {
        return Err(Error::invalid("DMD rank must be at least 1"));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::invalid(format!("time step must be positive, got {dt}")));
    }
    numerics::ensure_finite(xp, "X′")?;
    let dec = numerics::svd(x)?;
    let s1 = dec.s[0];
    let numerical_rank = dec.s.iter().filter(|&&s| s >= RANK_TOLERANCE * s1 && s > 0.0).count();
    if r > numerical_rank {
        return Err(Error::RankDeficient { requested: r, rank: numerical_rank });
    }
    let ur = dec.u.columns(0, r);
    let vr = dec.v.columns(0, r);
    let s_inv = DMatrix::from_diagonal(&dec.s.rows(0, r).map(|s| 1.0 / s));
    // X′ V_r S_r⁻¹ is shared by the reduced operator and the modes.
    let xp_v_sinv = numerics::mat_mul(&numerics::mat_mul(xp, &vr.into_owned()), &s_inv);
    let a_tilde = ur.transpose() * &xp_v_sinv;
    let eig = numerics::eig_general(&a_tilde)?;
    let modes = xp_v_sinv.map(|v| Complex64::new(v, 0.0)) * &eig.vectors;

    let x0 = x.column(0).map(|v| Complex64::new(v, 0.0));
    let amp_svd = modes.clone().svd(true, true);
    let amplitudes = amp_svd
        .solve(&x0, 1e-14 * amp_svd.singular_values.max())
        .map_err(|e| Error::numeric(format!("amplitude least squares: {e}")))?;
    let amplitude_residual = (&modes * &amplitudes - &x0).norm();

    Ok(DmdModel { rank: r, modes, eigenvalues: eig.values, amplitudes, dt, singular_values: dec.s, amplitude_residual })
}

/// One eigenvalue and its continuous-time exponent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpectrumEntry {
    pub lambda: Complex64,
    /// `ln(λ)/Δt` on the principal branch; `None` for a zero eigenvalue.
    pub exponent: Option<Complex64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Spectra {
    pub entries: Vec<SpectrumEntry>,
    /// Set when one or more zero eigenvalues had no logarithm.
    pub zero_excluded: bool,
}

impl Spectra {
    /// Writes columns `re, im, exponent_re, exponent_im`; zero eigenvalues
    /// are left out.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["re", "im", "exponent_re", "exponent_im"])?;
        for e in &self.entries {
            if let Some(x) = e.exponent {
                w.write_record([e.lambda.re, e.lambda.im, x.re, x.im].map(|v| v.to_string()))?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

impl DmdModel {
    pub fn lifted_dim(&self) -> usize {
        self.modes.nrows()
    }

    /// Lifted trajectory; column `k` is `Φ diag(λᵏ) b` for `k = 0..=steps`.
    pub fn predict(&self, steps: usize) -> DMatrix<Complex64> {
        let mut out = DMatrix::zeros(self.lifted_dim(), steps + 1);
        let mut coeff = self.amplitudes.clone();
        for k in 0..=steps {
            out.set_column(k, &(&self.modes * &coeff));
            coeff.component_mul_assign(&self.eigenvalues);
        }
        out
    }

    pub fn spectra(&self) -> Spectra {
        let scale = self.eigenvalues.iter().map(|l| l.norm()).fold(0.0, f64::max);
        let mut zero_excluded = false;
        let entries = self
            .eigenvalues
            .iter()
            .map(|&lambda| {
                let exponent = if lambda.norm() <= f64::EPSILON * scale || lambda.norm() == 0.0 {
                    zero_excluded = true;
                    None
                } else {
                    Some(lambda.ln() / self.dt)
                };
                SpectrumEntry { lambda, exponent }
            })
            .collect();
        if zero_excluded {
            log::warn!("zero DMD eigenvalue excluded from the continuous-time spectrum");
        }
        Spectra { entries, zero_excluded }
    }

    /// Largest eigenvalue modulus.
    pub fn spectral_radius(&self) -> f64 {
        self.eigenvalues.iter().map(|l| l.norm()).fold(0.0, f64::max)
    }
}

/// DMD fitted on lifted snapshots, with state read-out.
#[derive(Debug, Clone)]
pub struct KoopmanModel {
    pub observables: Observables,
    pub state_dim: usize,
    pub dmd: DmdModel,
}

impl KoopmanModel {
    pub fn fit(observables: Observables, x: &DMatrix<f64>, xp: &DMatrix<f64>, r: usize, dt: f64) -> Result<Self> {
        let gx = observables.lift(x)?;
        let gxp = observables.lift(xp)?;
        let dmd = dmd_fit(&gx, &gxp, r, dt).map_err(|e| e.context(format!("fitting {} observables", observables.name())))?;
        Ok(KoopmanModel { state_dim: x.nrows(), observables, dmd })
    }

    /// Real part of the leading state block for `k = 0..=steps`.
    pub fn predict_states(&self, steps: usize) -> DMatrix<f64> {
        self.dmd.predict(steps).rows(0, self.state_dim).map(|z| z.re)
    }
}

/// Per-time squared error summed over space, and its sum over time.
pub fn reconstruction_mse(predicted: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<(Vec<f64>, f64)> {
    if predicted.shape() != truth.shape() {
        return Err(Error::invalid(format!(
            "prediction is {:?} but truth is {:?}",
            predicted.shape(),
            truth.shape()
        )));
    }
    let per_time: Vec<f64> = predicted
        .column_iter()
        .zip(truth.column_iter())
        .map(|(p, t)| p.iter().zip(t.iter()).map(|(a, b)| (a - b) * (a - b)).sum())
        .collect();
    let total = per_time.iter().sum();
    Ok((per_time, total))
}

/// Writes `time, mse` rows.
pub fn write_mse_csv(path: &Path, times: &[f64], per_time: &[f64]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "time,mse")?;
    for (t, m) in times.iter().zip(per_time) {
        writeln!(f, "{t},{m}")?;
    }
    f.flush()?;
    Ok(())
}
