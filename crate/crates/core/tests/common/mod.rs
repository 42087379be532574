//! Dense joint extended Kalman filter on `[s; vec_r(A); vec_r(B)]`, used as
//! an independent oracle for the block recursion.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};

use expfbf::features::FeatureSpec;
use expfbf::filter::{CovarianceLayout, FilterConfig, FilterModel, Mode};

pub const A_PSI: f64 = 0.5;
pub const A_PHI: f64 = 0.8;

pub fn oracle_config(layout: CovarianceLayout, sigma_omega: f64) -> FilterConfig {
    FilterConfig {
        n_x: 1,
        n_y: 1,
        n_u: 1,
        mode: Mode::InputState,
        state_features: FeatureSpec::Taylor { order: 2, a: A_PSI },
        input_features: Some(FeatureSpec::Taylor { order: 1, a: A_PHI }),
        sigma_s: 0.3,
        sigma_y: 0.2,
        sigma_omega,
        p4_init: 2.0,
        kappa1: 1.0,
        kappa2: 1.0,
        layout,
        measurement_start: None,
        relift: true,
        seed: 5,
    }
}

/// One-dimensional Gaussian Taylor features `e^{−x²/2σ²} xʲ / (σʲ √j!)` and derivatives.
pub fn taylor_1d(x: f64, a: f64, order: usize) -> (Vec<f64>, Vec<f64>) {
    let sigma = (1.0 / (2.0 * a)).sqrt();
    let g = (-a * x * x).exp();
    let mut f = Vec::new();
    let mut df = Vec::new();
    let mut fact = 1.0;
    for j in 0..=order {
        if j > 0 {
            fact *= j as f64;
        }
        let c = 1.0 / (sigma.powi(j as i32) * fact.sqrt());
        let mono = x.powi(j as i32);
        let dmono = if j == 0 { 0.0 } else { j as f64 * x.powi(j as i32 - 1) };
        f.push(c * g * mono);
        df.push(c * g * (dmono - 2.0 * a * x * mono));
    }
    (f, df)
}

/// Extended Kalman filter on the dense super-state `[s; vec_r(A); vec_r(B)]`.
pub struct DenseOracle {
    pub x: DVector<f64>,
    pub p: DMatrix<f64>,
    q: DMatrix<f64>,
    r: f64,
}

pub const N_S: usize = 2;
pub const D_PSI: usize = 3;
pub const D_PHI: usize = 2;
pub const N: usize = N_S + N_S * (D_PSI + D_PHI);

impl DenseOracle {
    fn a(&self, k: usize, j: usize) -> f64 {
        self.x[N_S + k * D_PSI + j]
    }

    fn b(&self, k: usize, j: usize) -> f64 {
        self.x[N_S + N_S * D_PSI + k * D_PHI + j]
    }

    fn step(&mut self, u: f64, d: f64) {
        let (psi, dpsi) = taylor_1d(self.x[0], A_PSI, D_PSI - 1);
        let (phi, _) = taylor_1d(u, A_PHI, D_PHI - 1);
        let mut f = DMatrix::identity(N, N);
        let mut next = self.x.clone();
        for k in 0..N_S {
            next[k] = (0..D_PSI).map(|j| self.a(k, j) * psi[j]).sum::<f64>()
                + (0..D_PHI).map(|j| self.b(k, j) * phi[j]).sum::<f64>();
            f.row_mut(k).fill(0.0);
            f[(k, 0)] = (0..D_PSI).map(|j| self.a(k, j) * dpsi[j]).sum::<f64>();
            for j in 0..D_PSI {
                f[(k, N_S + k * D_PSI + j)] = psi[j];
            }
            for j in 0..D_PHI {
                f[(k, N_S + N_S * D_PSI + k * D_PHI + j)] = phi[j];
            }
        }
        self.x = next;
        self.p = &f * &self.p * f.transpose() + &self.q;

        let h = N_S - 1;
        let s = self.p[(h, h)] + self.r;
        let k = self.p.column(h) / s;
        let e = d - self.x[h];
        self.x += &k * e;
        self.p -= &k * self.p.row(h).clone_owned();
    }
}

pub fn oracle_from(model: &FilterModel, sigma_omega: f64) -> DenseOracle {
    let mut x = DVector::zeros(N);
    x.rows_mut(0, N_S).copy_from(model.state());
    x.rows_mut(N_S, N - N_S).copy_from(&model.weights());
    let mut p = DMatrix::zeros(N, N);
    p.view_mut((0, 0), (N_S, N_S)).copy_from(&model.p1());
    p.view_mut((N_S, N_S), (N - N_S, N - N_S)).copy_from(&model.p4_public());
    let mut q = DMatrix::zeros(N, N);
    for i in 0..N {
        q[(i, i)] = if i < N_S { 0.09 } else { sigma_omega * sigma_omega };
    }
    DenseOracle { x, p, q, r: 0.04 }
}

pub fn drive(i: usize) -> (f64, f64) {
    let t = i as f64;
    ((0.37 * t).sin(), 0.8 * (0.21 * t).cos() + 0.1 * (1.3 * t).sin())
}

/// Largest entrywise gap between the full-layout filter and the dense oracle
/// over 50 steps, across state, weights and all covariance blocks.
pub fn oracle_max_deviation(sigma_omega: f64) -> f64 {
    let mut model = FilterModel::new(oracle_config(CovarianceLayout::Full, sigma_omega)).unwrap();
    assert_eq!(model.n_omega(), N - N_S);
    let mut oracle = oracle_from(&model, sigma_omega);
    let mut worst: f64 = 0.0;
    for i in 0..50 {
        let (u, d) = drive(i);
        model.step(Some(&[u]), &[d], None).unwrap();
        oracle.step(u, d);
        worst = worst
            .max((model.state() - oracle.x.rows(0, N_S)).amax())
            .max((model.weights() - oracle.x.rows(N_S, N - N_S)).amax())
            .max((model.p1() - oracle.p.view((0, 0), (N_S, N_S))).amax())
            .max((model.p2_public() - oracle.p.view((0, N_S), (N_S, N - N_S))).amax())
            .max((model.p4_public() - oracle.p.view((N_S, N_S), (N - N_S, N - N_S))).amax());
    }
    worst
}
