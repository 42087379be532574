//! Joint recursive estimation of an augmented state and the linear operator
//! weights acting on its explicit kernel features.
//!
//! The super-augmented state is `[s; Ω]` where `Ω` stacks the entries of the
//! transition weights `A` (state features) and `B` (input features). The
//! weight Jacobian `F2` has one nonzero row block per state component, the
//! feature row `z = [f(s)ᵀ, φ(u)ᵀ]`, so it is never formed densely.
//!
//! Internally the weights of state component `k` (row `k` of `A` followed by
//! row `k` of `B`) occupy the contiguous index range `k·W .. (k+1)·W`, which
//! lets the per-state-block covariance layout store `P4` as `n_s` diagonal
//! blocks. [`FilterModel::weights`] and the `*_public` accessors convert to
//! the row-major `A`-then-`B` ordering.

use std::fs;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureMap, FeatureSpec};
use crate::numerics;
use crate::par;

/// Full-layout `P4` matrices above this many entries are refused.
pub const MAX_FULL_P4_ENTRIES: usize = 1 << 28;

const INIT_RANGE: f64 = 0.1;
const CHECKPOINT_MAGIC: &[u8; 8] = b"EXPFBF1\n";

/// How the state is propagated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// `s⁻ = A ψ(x) + B φ(u)` with `x` the leading `n_x` coordinates of `s = [x; y]`.
    InputState,
    /// The state lives in feature space: `s⁻ = A s + B φ(u)`.
    FeatureState,
    /// `s = [x; ψ(x)]` propagated linearly by `A`, feature block relifted from `x`.
    Concat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceLayout {
    Full,
    PerStateBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub n_x: usize,
    pub n_y: usize,
    pub n_u: usize,
    pub mode: Mode,
    pub state_features: FeatureSpec,
    pub input_features: Option<FeatureSpec>,
    /// Process noise standard deviation on `s`.
    pub sigma_s: f64,
    /// Measurement noise standard deviation.
    pub sigma_y: f64,
    /// Process noise standard deviation on the weights.
    pub sigma_omega: f64,
    /// Initial weight variance `σ²_{P4}(0)`.
    pub p4_init: f64,
    pub kappa1: f64,
    pub kappa2: f64,
    pub layout: CovarianceLayout,
    /// First measured state coordinate; defaults to the last `n_y`
    /// coordinates, or the leading ones in concat mode.
    #[serde(default)]
    pub measurement_start: Option<usize>,
    #[serde(default = "default_true")]
    pub relift: bool,
    pub seed: u64,
}

fn default_true() -> bool {
    true
}

impl FilterConfig {
    fn validate(&self) -> Result<()> {
        for (name, v) in [("sigma_s", self.sigma_s), ("sigma_y", self.sigma_y), ("p4_init", self.p4_init)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.sigma_omega.is_finite() && self.sigma_omega >= 0.0) {
            return Err(Error::invalid(format!("sigma_omega must be nonnegative, got {}", self.sigma_omega)));
        }
        for (name, k) in [("kappa1", self.kappa1), ("kappa2", self.kappa2)] {
            if !(k > 0.0 && k <= 1.0) {
                return Err(Error::invalid(format!("{name} must lie in (0, 1], got {k}")));
            }
        }
        if self.n_x == 0 || self.n_y == 0 {
            return Err(Error::invalid("n_x and n_y must be at least 1"));
        }
        if self.input_features.is_some() != (self.n_u > 0) {
            return Err(Error::invalid("an input feature map is required exactly when n_u > 0"));
        }
        Ok(())
    }
}

/// Storage of the weight covariance.
#[derive(Debug, Clone, PartialEq)]
pub enum P4Storage {
    Full(DMatrix<f64>),
    /// One `W × W` block per state component; cross-component blocks are dropped.
    Blocks(Vec<DMatrix<f64>>),
}

/// `F2 = ∂s/∂Ω`: row `k` holds `z` in weight block `k` and zeros elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuralF2 {
    pub n_s: usize,
    pub z: DVector<f64>,
}

impl StructuralF2 {
    pub fn block_width(&self) -> usize {
        self.z.len()
    }

    /// `F2 v` for a weight-space vector `v` (internal ordering).
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let w = self.block_width();
        DVector::from_fn(self.n_s, |k, _| self.z.dot(&v.rows(k * w, w)))
    }

    /// Dense `n_s × n_Ω` matrix in internal ordering.
    pub fn materialize(&self) -> DMatrix<f64> {
        let w = self.block_width();
        let mut m = DMatrix::zeros(self.n_s, self.n_s * w);
        for k in 0..self.n_s {
            m.view_mut((k, k * w), (1, w)).copy_from(&self.z.transpose());
        }
        m
    }
}

/// State after a prediction, with the linearization used.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub prior_state: DVector<f64>,
    pub f1: DMatrix<f64>,
    pub f2: StructuralF2,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepReport {
    pub step: usize,
    pub prior_state: Vec<f64>,
    pub prior_output: Vec<f64>,
    pub innovation: Vec<f64>,
    pub posterior_state: Vec<f64>,
    pub posterior_output: Vec<f64>,
    /// `‖y⁻ − y_clean‖²` when a clean reference was supplied.
    pub prior_sq_error: Option<f64>,
    pub posterior_sq_error: Option<f64>,
}

/// Symmetry and definiteness diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovarianceHealth {
    pub p1_asymmetry: f64,
    pub p4_asymmetry: f64,
    pub p1_min_eigenvalue: f64,
}

impl CovarianceHealth {
    pub fn is_healthy(&self) -> bool {
        self.p1_asymmetry <= 1e-9 && self.p4_asymmetry <= 1e-9 && self.p1_min_eigenvalue >= -1e-8
    }
}

#[derive(Debug, Clone)]
pub struct FilterModel {
    config: FilterConfig,
    psi: FeatureMap,
    phi: Option<FeatureMap>,
    n_s: usize,
    /// Length of the transition feature vector `f(s)`.
    n_f: usize,
    n_phi: usize,
    measured: Range<usize>,
    pub(crate) s: DVector<f64>,
    pub(crate) a: DMatrix<f64>,
    pub(crate) b: DMatrix<f64>,
    /// Full layout: `P1`. Block layout: `R`, the state covariance given the weights.
    pub(crate) c1: DMatrix<f64>,
    /// Full layout: `P2`. Block layout: `T`, the regression of `s` on the
    /// weights, so that `P1 = R + T P4 Tᵀ` and `P2 = T P4`.
    pub(crate) c2: DMatrix<f64>,
    pub(crate) p4: P4Storage,
    step: usize,
    weights_frozen: bool,
}

impl FilterModel {
    /// Builds the feature maps and draws the initial state and weights.
    pub fn new(config: FilterConfig) -> Result<Self> {
        config.validate()?;
        let psi = config.state_features.build(config.n_x)?;
        let phi = match &config.input_features {
            Some(spec) => Some(spec.build(config.n_u)?),
            None => None,
        };
        Self::with_maps(config, psi, phi)
    }

    fn with_maps(config: FilterConfig, psi: FeatureMap, phi: Option<FeatureMap>) -> Result<Self> {
        let d_psi = psi.feature_dim();
        let n_s = match config.mode {
            Mode::InputState => config.n_x + config.n_y,
            Mode::FeatureState => d_psi,
            Mode::Concat => config.n_x + d_psi,
        };
        let n_f = match config.mode {
            Mode::InputState => d_psi,
            Mode::FeatureState | Mode::Concat => n_s,
        };
        let n_phi = phi.as_ref().map_or(0, FeatureMap::feature_dim);
        let start = config.measurement_start.unwrap_or(match config.mode {
            Mode::Concat => 0,
            _ => n_s.saturating_sub(config.n_y),
        });
        if start + config.n_y > n_s {
            return Err(Error::invalid(format!(
                "measurement range {start}..{} exceeds state dimension {n_s}",
                start + config.n_y
            )));
        }
        let w = n_f + n_phi;
        let n_omega = n_s
            .checked_mul(w)
            .ok_or_else(|| Error::Capacity("weight dimension overflows".into()))?;
        let p4 = match config.layout {
            CovarianceLayout::Full => {
                let entries = n_omega.checked_mul(n_omega).filter(|&e| e <= MAX_FULL_P4_ENTRIES);
                if entries.is_none() {
                    return Err(Error::Capacity(format!(
                        "full weight covariance would need {n_omega}² entries; use the per-state-block layout"
                    )));
                }
                P4Storage::Full(DMatrix::identity(n_omega, n_omega) * config.p4_init)
            }
            CovarianceLayout::PerStateBlock => {
                P4Storage::Blocks((0..n_s).map(|_| DMatrix::identity(w, w) * config.p4_init).collect())
            }
        };

        let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
        let mut draw = |_: usize, _: usize| rng.random_range(-INIT_RANGE..=INIT_RANGE);
        let s = DVector::from_fn(n_s, &mut draw);
        let a = DMatrix::from_fn(n_f, n_s, &mut draw).transpose();
        let b = DMatrix::from_fn(n_phi, n_s, &mut draw).transpose();

        let mut model = FilterModel {
            c1: DMatrix::identity(n_s, n_s) * (config.sigma_s * config.sigma_s),
            c2: DMatrix::zeros(n_s, n_omega),
            p4,
            measured: start..start + config.n_y,
            config,
            psi,
            phi,
            n_s,
            n_f,
            n_phi,
            s,
            a,
            b,
            step: 0,
            weights_frozen: false,
        };
        model.relift()?;
        Ok(model)
    }

    pub fn config(&self) -> &FilterConfig {
        &self.config
    }

    pub fn state_map(&self) -> &FeatureMap {
        &self.psi
    }

    pub fn input_map(&self) -> Option<&FeatureMap> {
        self.phi.as_ref()
    }

    pub fn n_s(&self) -> usize {
        self.n_s
    }

    pub fn n_omega(&self) -> usize {
        self.n_s * self.block_width()
    }

    /// Weights per state component, `dim f(s) + dim φ(u)`.
    pub fn block_width(&self) -> usize {
        self.n_f + self.n_phi
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn measurement_range(&self) -> Range<usize> {
        self.measured.clone()
    }

    pub fn state(&self) -> &DVector<f64> {
        &self.s
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    /// State covariance `P1`.
    pub fn p1(&self) -> DMatrix<f64> {
        match &self.p4 {
            P4Storage::Full(_) => self.c1.clone(),
            P4Storage::Blocks(blocks) => {
                let w = self.block_width();
                let mut p1 = self.c1.clone();
                for (k, blk) in blocks.iter().enumerate() {
                    let t = self.c2.columns(k * w, w);
                    p1 += (t * blk) * t.transpose();
                }
                numerics::symmetrize_in_place(&mut p1);
                p1
            }
        }
    }

    /// State/weight cross covariance `P2` (internal weight order).
    pub fn p2(&self) -> DMatrix<f64> {
        match &self.p4 {
            P4Storage::Full(_) => self.c2.clone(),
            P4Storage::Blocks(blocks) => {
                let w = self.block_width();
                let mut p2 = DMatrix::zeros(self.n_s, self.n_omega());
                for (k, blk) in blocks.iter().enumerate() {
                    p2.columns_mut(k * w, w).copy_from(&(self.c2.columns(k * w, w) * blk));
                }
                p2
            }
        }
    }

    pub fn p4(&self) -> &P4Storage {
        &self.p4
    }

    /// Selected output `𝕀 s`.
    pub fn output(&self) -> DVector<f64> {
        self.s.rows(self.measured.start, self.measured.len()).into_owned()
    }

    /// Replaces the state (relifting the feature block in concat mode).
    pub fn set_state(&mut self, s: &[f64]) -> Result<()> {
        if s.len() != self.n_s {
            return Err(Error::invalid(format!("state has length {}, expected {}", s.len(), self.n_s)));
        }
        self.s = DVector::from_column_slice(s);
        self.relift()
    }

    /// Sets the leading `n_x` coordinates and zeros the rest before relifting.
    pub fn reset_state_from(&mut self, x: &[f64]) -> Result<()> {
        let mut s = vec![0.0; self.n_s];
        let n = x.len().min(self.n_s);
        s[..n].copy_from_slice(&x[..n]);
        self.set_state(&s)
    }

    pub fn set_weights(&mut self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
        if a.shape() != self.a.shape() || b.shape() != self.b.shape() {
            return Err(Error::invalid(format!(
                "weight shapes {:?}/{:?} do not match {:?}/{:?}",
                a.shape(),
                b.shape(),
                self.a.shape(),
                self.b.shape()
            )));
        }
        self.a.copy_from(a);
        self.b.copy_from(b);
        Ok(())
    }

    /// Overwrites `P1`, keeping `P2` and `P4`.
    pub fn set_p1(&mut self, p1: &DMatrix<f64>) -> Result<()> {
        if p1.shape() != self.c1.shape() {
            return Err(Error::invalid(format!("P1 has shape {:?}, expected {:?}", p1.shape(), self.c1.shape())));
        }
        let explained = self.p1() - &self.c1;
        self.c1 = p1 - explained;
        Ok(())
    }

    /// Stops weight updates (`κ₂ = 0`); covariances are still propagated.
    pub fn freeze_weights(&mut self, frozen: bool) {
        self.weights_frozen = frozen;
    }

    fn relift(&mut self) -> Result<()> {
        if self.config.mode == Mode::Concat && self.config.relift {
            let n_x = self.config.n_x;
            let feat = self.psi.eval(self.s.rows(0, n_x).as_slice())?;
            self.s.rows_mut(n_x, feat.len()).copy_from(&feat);
        }
        Ok(())
    }

    /// `f(s)`, the vector multiplied by `A`.
    fn transition_features(&self, s: &DVector<f64>) -> Result<DVector<f64>> {
        match self.config.mode {
            Mode::InputState => self.psi.eval(s.rows(0, self.config.n_x).as_slice()),
            Mode::FeatureState | Mode::Concat => Ok(s.clone()),
        }
    }

    fn input_features(&self, u: Option<&[f64]>) -> Result<DVector<f64>> {
        match (&self.phi, u) {
            (Some(phi), Some(u)) => phi.eval(u),
            (None, None) => Ok(DVector::zeros(0)),
            (Some(_), None) => Err(Error::invalid("model has an input map but no input was given")),
            (None, Some(_)) => Err(Error::invalid("model has no input map but an input was given")),
        }
    }

    /// `A f(s) + B φ(u)` for an arbitrary state, without touching the model.
    pub fn state_transition(&self, s: &DVector<f64>, u: Option<&[f64]>) -> Result<DVector<f64>> {
        let f = self.transition_features(s)?;
        let g = self.input_features(u)?;
        let mut next = &self.a * f;
        if self.n_phi > 0 {
            next += &self.b * g;
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("state transition produced non-finite values"));
        }
        Ok(next)
    }

    /// `∂s⁻/∂s` at the given state.
    pub fn jacobian_f1_at(&self, s: &DVector<f64>) -> Result<DMatrix<f64>> {
        match self.config.mode {
            Mode::InputState => {
                let n_x = self.config.n_x;
                let jac = self.psi.jacobian(s.rows(0, n_x).as_slice())?;
                let mut f1 = DMatrix::zeros(self.n_s, self.n_s);
                f1.columns_mut(0, n_x).copy_from(&(&self.a * jac));
                Ok(f1)
            }
            Mode::FeatureState | Mode::Concat => Ok(self.a.clone()),
        }
    }

    pub fn jacobian_f1(&self) -> Result<DMatrix<f64>> {
        self.jacobian_f1_at(&self.s)
    }

    pub fn jacobian_f2(&self, u: Option<&[f64]>) -> Result<StructuralF2> {
        let f = self.transition_features(&self.s)?;
        let g = self.input_features(u)?;
        let mut z = DVector::zeros(self.block_width());
        z.rows_mut(0, self.n_f).copy_from(&f);
        z.rows_mut(self.n_f, self.n_phi).copy_from(&g);
        Ok(StructuralF2 { n_s: self.n_s, z })
    }

    /// Time update: moves the model to its prior at the next step.
    pub fn predict(&mut self, u: Option<&[f64]>) -> Result<Prediction> {
        let f1 = self.jacobian_f1()?;
        let f2 = self.jacobian_f2(u)?;
        let prior = self.state_transition(&self.s, u)?;
        let w = self.block_width();
        let n_s = self.n_s;
        let z = &f2.z;

        let q = self.config.sigma_s * self.config.sigma_s;
        let qw = self.config.sigma_omega * self.config.sigma_omega;
        let (c1, c2) = match &mut self.p4 {
            P4Storage::Full(p4) => {
                // P2⁻ = F1 P2 + F2 P4
                let mut p2m = numerics::mat_mul(&f1, &self.c2);
                for k in 0..n_s {
                    let row = p4.rows(k * w, w).tr_mul(z);
                    let mut target = p2m.row_mut(k);
                    target += row.transpose();
                }
                // F2 P2ᵀ has row k = (P2[:, block k] z)ᵀ; P2⁻ F2ᵀ has column k = P2⁻[:, block k] z.
                let mut f2p2t = DMatrix::zeros(n_s, n_s);
                let mut p2m_f2t = DMatrix::zeros(n_s, n_s);
                for k in 0..n_s {
                    f2p2t.set_row(k, &(self.c2.columns(k * w, w) * z).transpose());
                    p2m_f2t.set_column(k, &(p2m.columns(k * w, w) * z));
                }
                let mut p1m = (numerics::mat_mul(&f1, &self.c1) + f2p2t) * f1.transpose() + p2m_f2t;
                for i in 0..n_s {
                    p1m[(i, i)] += q;
                }
                numerics::symmetrize_in_place(&mut p1m);
                for i in 0..p4.nrows() {
                    p4[(i, i)] += qw;
                }
                (p1m, p2m)
            }
            P4Storage::Blocks(blocks) => {
                // T⁻ = F1 T + F2, R⁻ = F1 R F1ᵀ + σ_s² I
                let mut t = numerics::mat_mul(&f1, &self.c2);
                for k in 0..n_s {
                    let mut target = t.view_mut((k, k * w), (1, w));
                    target += z.transpose();
                }
                let mut r = &f1 * &self.c1 * f1.transpose();
                for i in 0..n_s {
                    r[(i, i)] += q;
                }
                if qw > 0.0 {
                    // Weight noise decorrelates s from the new weights:
                    // T′ = T P4 (P4 + qI)⁻¹, R′ = R + T P4 Tᵀ − T′ (P4 + qI) T′ᵀ.
                    for (k, blk) in blocks.iter_mut().enumerate() {
                        let x = t.columns(k * w, w) * &*blk;
                        for i in 0..w {
                            blk[(i, i)] += qw;
                        }
                        let t_new = numerics::spd_solve(blk, &x.transpose())
                            .map_err(|e| e.at_step(self.step + 1))?
                            .transpose();
                        r += &x * t.columns(k * w, w).transpose() - &t_new * x.transpose();
                        t.columns_mut(k * w, w).copy_from(&t_new);
                    }
                }
                numerics::symmetrize_in_place(&mut r);
                (r, t)
            }
        };

        let finite = c1.iter().chain(c2.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::numeric("prior covariance became non-finite").at_step(self.step + 1));
        }
        self.s = prior.clone();
        self.c1 = c1;
        self.c2 = c2;
        Ok(Prediction { prior_state: prior, f1, f2 })
    }

    /// Measurement update against `d`. Returns the innovation.
    pub fn update(&mut self, d: &[f64]) -> Result<DVector<f64>> {
        let n_y = self.config.n_y;
        if d.len() != n_y {
            return Err(Error::invalid(format!("measurement has length {}, expected {n_y}", d.len())));
        }
        let sel = self.measured.clone();
        let e = DVector::from_column_slice(d) - self.s.rows(sel.start, n_y);
        let w = self.block_width();
        let (l1, l2) = match &self.p4 {
            P4Storage::Full(_) => (self.c1.columns(sel.start, n_y).into_owned(), self.c2.rows(sel.start, n_y).transpose()),
            P4Storage::Blocks(blocks) => {
                // L2 block k = P4_k (𝕀 T_k)ᵀ, L1 = R 𝕀ᵀ + Σ_k T_k L2_k
                let mut l2 = DMatrix::zeros(self.n_omega(), n_y);
                let mut l1 = self.c1.columns(sel.start, n_y).into_owned();
                for (k, blk) in blocks.iter().enumerate() {
                    let tk = self.c2.columns(k * w, w);
                    let l2k = blk * tk.rows(sel.start, n_y).transpose();
                    l1 += tk * &l2k;
                    l2.rows_mut(k * w, w).copy_from(&l2k);
                }
                (l1, l2)
            }
        };
        let mut m = l1.rows(sel.start, n_y).into_owned();
        numerics::symmetrize_in_place(&mut m);
        let r = self.config.sigma_y * self.config.sigma_y;
        for i in 0..n_y {
            m[(i, i)] += r;
        }
        let n = numerics::spd_solve(&m, &DMatrix::identity(n_y, n_y)).map_err(|err| err.at_step(self.step + 1))?;
        let k1 = &l1 * &n;
        let k2 = numerics::mat_mul(&l2, &n);

        self.s += (&k1 * &e) * self.config.kappa1;
        let kappa2 = if self.weights_frozen { 0.0 } else { self.config.kappa2 };
        if kappa2 != 0.0 {
            let delta = &k2 * &e * kappa2;
            let w = self.block_width();
            for k in 0..self.n_s {
                for j in 0..w {
                    let v = delta[k * w + j];
                    if j < self.n_f {
                        self.a[(k, j)] += v;
                    } else {
                        self.b[(k, j - self.n_f)] += v;
                    }
                }
            }
        }

        match &mut self.p4 {
            P4Storage::Full(p4) => {
                self.c1 -= &k1 * l1.transpose();
                numerics::symmetrize_in_place(&mut self.c1);
                self.c2 -= numerics::mat_mul(&k1, &l2.transpose());
                *p4 -= numerics::mat_mul(&k2, &l2.transpose());
                numerics::symmetrize_in_place(p4);
            }
            P4Storage::Blocks(blocks) => {
                // Exact conditional update of (R, T); only the diagonal
                // blocks of the weight posterior are kept.
                par::for_each_indexed(blocks, |k, blk| {
                    let kk = k2.rows(k * w, w);
                    let ll = l2.rows(k * w, w);
                    *blk -= kk * ll.transpose();
                    numerics::symmetrize_in_place(blk);
                });
                let mut rs = self.c1.view((sel.start, sel.start), (n_y, n_y)).into_owned();
                for i in 0..n_y {
                    rs[(i, i)] += r;
                }
                let gain = numerics::spd_solve(&rs, &self.c1.rows(sel.start, n_y).into_owned())
                    .map_err(|err| err.at_step(self.step + 1))?
                    .transpose();
                let t_sel = self.c2.rows(sel.start, n_y).into_owned();
                self.c2 -= numerics::mat_mul(&gain, &t_sel);
                let r_sel = self.c1.rows(sel.start, n_y).into_owned();
                self.c1 -= &gain * r_sel;
                numerics::symmetrize_in_place(&mut self.c1);
            }
        }
        self.relift()?;
        self.step += 1;
        if self.s.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("posterior state became non-finite").at_step(self.step));
        }
        Ok(e)
    }

    /// One predict/update cycle.
    pub fn step(&mut self, u: Option<&[f64]>, d: &[f64], clean: Option<&[f64]>) -> Result<StepReport> {
        let step = self.step + 1;
        self.predict(u).map_err(|e| ensure_step(e, step))?;
        let prior_state = self.s.as_slice().to_vec();
        let prior_output = self.output().as_slice().to_vec();
        let innovation = self.update(d)?;
        let posterior_output = self.output().as_slice().to_vec();
        let sq = |y: &[f64]| clean.map(|c| y.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>());
        Ok(StepReport {
            step,
            prior_sq_error: sq(&prior_output),
            posterior_sq_error: sq(&posterior_output),
            prior_state,
            prior_output,
            innovation: innovation.as_slice().to_vec(),
            posterior_state: self.s.as_slice().to_vec(),
            posterior_output,
        })
    }

    pub fn health(&self) -> CovarianceHealth {
        let p4_asymmetry = match &self.p4 {
            P4Storage::Full(p4) => numerics::asymmetry(p4),
            P4Storage::Blocks(blocks) => blocks.iter().map(numerics::asymmetry).fold(0.0, f64::max),
        };
        let p1 = self.p1();
        CovarianceHealth {
            p1_asymmetry: numerics::asymmetry(&p1),
            p4_asymmetry,
            p1_min_eigenvalue: numerics::min_symmetric_eigenvalue(&p1),
        }
    }

    /// Internal weight index → index in the row-major `A`-then-`B` vector.
    pub fn public_weight_index(&self, internal: usize) -> usize {
        let w = self.block_width();
        let (k, j) = (internal / w, internal % w);
        if j < self.n_f {
            k * self.n_f + j
        } else {
            self.n_s * self.n_f + k * self.n_phi + (j - self.n_f)
        }
    }

    /// Weights as one vector: `A` row-major, then `B` row-major.
    pub fn weights(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_omega());
        for k in 0..self.n_s {
            for j in 0..self.n_f {
                out[k * self.n_f + j] = self.a[(k, j)];
            }
            for j in 0..self.n_phi {
                out[self.n_s * self.n_f + k * self.n_phi + j] = self.b[(k, j)];
            }
        }
        out
    }

    /// `P2` with columns in public weight order.
    pub fn p2_public(&self) -> DMatrix<f64> {
        let p2 = self.p2();
        let mut out = DMatrix::zeros(self.n_s, self.n_omega());
        for i in 0..self.n_omega() {
            out.set_column(self.public_weight_index(i), &p2.column(i));
        }
        out
    }

    /// Dense `P4` in public weight order (zeros off the blocks in block layout).
    pub fn p4_public(&self) -> DMatrix<f64> {
        let n = self.n_omega();
        let w = self.block_width();
        let mut out = DMatrix::zeros(n, n);
        let idx: Vec<usize> = (0..n).map(|i| self.public_weight_index(i)).collect();
        match &self.p4 {
            P4Storage::Full(p4) => {
                for i in 0..n {
                    for j in 0..n {
                        out[(idx[i], idx[j])] = p4[(i, j)];
                    }
                }
            }
            P4Storage::Blocks(blocks) => {
                for (k, blk) in blocks.iter().enumerate() {
                    for i in 0..w {
                        for j in 0..w {
                            out[(idx[k * w + i], idx[k * w + j])] = blk[(i, j)];
                        }
                    }
                }
            }
        }
        out
    }

    /// Saves to a single file: magic line, little-endian `u64` header
    /// length, JSON header, then column-major little-endian `f64` blocks
    /// `s, A, B, P1, P2, P4`. In block layout the `P1` and `P2` slots hold
    /// `R` and `T` and the `P4` blocks are concatenated.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut config = self.config.clone();
        config.state_features = FeatureSpec::Explicit(self.psi.descriptor());
        config.input_features = self.phi.as_ref().map(|m| FeatureSpec::Explicit(m.descriptor()));
        let header = CheckpointHeader { config, step: self.step, weights_frozen: self.weights_frozen };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |m: &[f64]| m.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        put(self.s.as_slice());
        put(self.a.as_slice());
        put(self.b.as_slice());
        put(self.c1.as_slice());
        put(self.c2.as_slice());
        match &self.p4 {
            P4Storage::Full(p4) => put(p4.as_slice()),
            P4Storage::Blocks(blocks) => blocks.iter().for_each(|b| put(b.as_slice())),
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .map_err(|e| Error::Io(e).context(format!("opening checkpoint {}", path.display())))?
            .read_to_end(&mut bytes)?;
        let bad = || Error::invalid(format!("{} is not a valid checkpoint", path.display()));
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad());
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().map_err(|_| bad())?) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(bad)?;
        let header: CheckpointHeader = serde_json::from_slice(body)?;
        let mut model = FilterModel::new(header.config)?;
        let mut cursor = 16 + hlen;
        let mut take = |dst: &mut [f64]| -> Result<()> {
            let end = cursor + 8 * dst.len();
            let chunk = bytes.get(cursor..end).ok_or_else(bad)?;
            for (d, c) in dst.iter_mut().zip(chunk.chunks_exact(8)) {
                *d = f64::from_le_bytes(c.try_into().expect("8-byte chunk"));
            }
            cursor = end;
            Ok(())
        };
        take(model.s.as_mut_slice())?;
        take(model.a.as_mut_slice())?;
        take(model.b.as_mut_slice())?;
        take(model.c1.as_mut_slice())?;
        take(model.c2.as_mut_slice())?;
        match &mut model.p4 {
            P4Storage::Full(p4) => take(p4.as_mut_slice())?,
            P4Storage::Blocks(blocks) => {
                for b in blocks.iter_mut() {
                    take(b.as_mut_slice())?;
                }
            }
        }
        if cursor != bytes.len() {
            return Err(bad());
        }
        model.step = header.step;
        model.weights_frozen = header.weights_frozen;
        Ok(model)
    }
}

fn ensure_step(e: Error, step: usize) -> Error {
    match e {
        Error::Step { .. } => e,
        other => other.at_step(step),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config: FilterConfig,
    step: usize,
    weights_frozen: bool,
}

/// Runs `predict`/`update` over a sequence. `inputs` must be absent exactly
/// when the model has no input map; `clean` enables squared-error tracking.
pub fn run_sequence(
    model: &mut FilterModel,
    inputs: Option<&[Vec<f64>]>,
    measurements: &[Vec<f64>],
    clean: Option<&[Vec<f64>]>,
) -> Result<Vec<StepReport>> {
    if let Some(u) = inputs {
        if u.len() != measurements.len() {
            return Err(Error::invalid(format!("{} inputs for {} measurements", u.len(), measurements.len())));
        }
    }
    if let Some(c) = clean {
        if c.len() != measurements.len() {
            return Err(Error::invalid(format!("{} clean samples for {} measurements", c.len(), measurements.len())));
        }
    }
    measurements
        .iter()
        .enumerate()
        .map(|(i, d)| {
            model.step(inputs.map(|u| u[i].as_slice()), d, clean.map(|c| c[i].as_slice()))
        })
        .collect()
}
