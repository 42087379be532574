use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

mod common;

use common::*;
use expfbf::features::FeatureSpec;
use expfbf::filter::{run_sequence, CovarianceLayout, FilterConfig, FilterModel, Mode, P4Storage};

#[test]
fn matches_dense_joint_kalman_filter() {
    assert!(oracle_max_deviation(0.0) < 1e-8);
}

#[test]
fn matches_dense_joint_kalman_filter_with_weight_noise() {
    assert!(oracle_max_deviation(0.05) < 1e-8);
}

#[test]
fn block_layout_equals_full_layout_for_one_state() {
    let cfg = |layout| FilterConfig {
        mode: Mode::FeatureState,
        n_y: 1,
        state_features: FeatureSpec::Taylor { order: 0, a: A_PSI },
        ..oracle_config(layout, 0.01)
    };
    let mut full = FilterModel::new(cfg(CovarianceLayout::Full)).unwrap();
    let mut blocks = FilterModel::new(cfg(CovarianceLayout::PerStateBlock)).unwrap();
    assert_eq!(full.n_s(), 1);
    for i in 0..40 {
        let (u, d) = drive(i);
        full.step(Some(&[u]), &[d], None).unwrap();
        blocks.step(Some(&[u]), &[d], None).unwrap();
    }
    assert!((full.state() - blocks.state()).amax() < 1e-12);
    assert!((full.p4_public() - blocks.p4_public()).amax() < 1e-12);
}

#[test]
fn block_layout_keeps_only_diagonal_blocks() {
    let mut m = FilterModel::new(oracle_config(CovarianceLayout::PerStateBlock, 0.0)).unwrap();
    for i in 0..20 {
        let (u, d) = drive(i);
        m.step(Some(&[u]), &[d], None).unwrap();
    }
    match m.p4() {
        P4Storage::Blocks(b) => assert_eq!(b.len(), 2),
        P4Storage::Full(_) => panic!("expected block storage"),
    }
    assert!(m.health().is_healthy());
}

#[test]
fn f1_matches_finite_differences() {
    let cfg = FilterConfig {
        n_x: 2,
        n_y: 1,
        n_u: 1,
        state_features: FeatureSpec::RandomFourier { nodes: 6, a: 0.7, seed: 3 },
        ..oracle_config(CovarianceLayout::PerStateBlock, 0.0)
    };
    let m = FilterModel::new(cfg).unwrap();
    let s = DVector::from_vec(vec![0.3, -0.7, 0.2]);
    let u = [0.4];
    let f1 = m.jacobian_f1_at(&s).unwrap();
    let h = 1e-6;
    for j in 0..3 {
        let mut sp = s.clone();
        let mut sm = s.clone();
        sp[j] += h;
        sm[j] -= h;
        let fd = (m.state_transition(&sp, Some(&u)).unwrap() - m.state_transition(&sm, Some(&u)).unwrap()) / (2.0 * h);
        assert!((fd - f1.column(j)).amax() < 1e-8, "column {j}");
    }
}

#[test]
fn structural_f2_matches_finite_differences_in_weights() {
    let mut m = FilterModel::new(oracle_config(CovarianceLayout::Full, 0.0)).unwrap();
    let u = [0.25];
    let f2 = m.jacobian_f2(Some(&u)).unwrap().materialize();
    let s = m.state().clone();
    let base = m.state_transition(&s, Some(&u)).unwrap();
    // Transition is linear in the weights: perturb one at a time.
    let w = m.block_width();
    for k in 0..m.n_s() {
        for j in 0..w {
            let mut pert = m.clone();
            let idx = k * w + j;
            if j < m.a().ncols() {
                pert_a(&mut pert, k, j);
            } else {
                pert_b(&mut pert, k, j - m.a().ncols());
            }
            let diff = pert.state_transition(&s, Some(&u)).unwrap() - &base;
            assert!((diff - f2.column(idx)).amax() < 1e-14);
        }
    }
    m.step(Some(&u), &[0.1], None).unwrap();
}

fn pert_a(m: &mut FilterModel, k: usize, j: usize) {
    let mut a = m.a().clone();
    a[(k, j)] += 1.0;
    set_weights(m, a, m.b().clone());
}

fn pert_b(m: &mut FilterModel, k: usize, j: usize) {
    let mut b = m.b().clone();
    b[(k, j)] += 1.0;
    set_weights(m, m.a().clone(), b);
}

fn set_weights(m: &mut FilterModel, a: DMatrix<f64>, b: DMatrix<f64>) {
    m.set_weights(&a, &b).unwrap();
}

#[test]
fn runs_are_bit_identical() {
    let run = || {
        let mut m = FilterModel::new(oracle_config(CovarianceLayout::PerStateBlock, 0.0)).unwrap();
        let u: Vec<Vec<f64>> = (0..30).map(|i| vec![drive(i).0]).collect();
        let d: Vec<Vec<f64>> = (0..30).map(|i| vec![drive(i).1]).collect();
        run_sequence(&mut m, Some(&u), &d, Some(&d)).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    for layout in [CovarianceLayout::Full, CovarianceLayout::PerStateBlock] {
        let cfg = FilterConfig {
            state_features: FeatureSpec::GaussHermite { degree: 3, nodes: Some(4), a: 0.5, seed: 9 },
            ..oracle_config(layout, 0.0)
        };
        let mut m = FilterModel::new(cfg).unwrap();
        for i in 0..15 {
            let (u, d) = drive(i);
            m.step(Some(&[u]), &[d], None).unwrap();
        }
        let path = dir.path().join("ckpt.bin");
        m.save(&path).unwrap();
        let mut back = FilterModel::load(&path).unwrap();
        assert_eq!(back.state(), m.state());
        assert_eq!(back.weights(), m.weights());
        assert_eq!(back.p1(), m.p1());
        assert_eq!(back.p2(), m.p2());
        assert_eq!(back.p4(), m.p4());
        assert_eq!(back.step_count(), m.step_count());
        for i in 15..25 {
            let (u, d) = drive(i);
            let r1 = m.step(Some(&[u]), &[d], None).unwrap();
            let r2 = back.step(Some(&[u]), &[d], None).unwrap();
            assert_eq!(r1, r2);
        }
    }
    std::fs::write(dir.path().join("junk.bin"), b"nope").unwrap();
    assert!(FilterModel::load(&dir.path().join("junk.bin")).is_err());
}

#[test]
fn non_positive_innovation_reports_step() {
    let mut m = FilterModel::new(oracle_config(CovarianceLayout::Full, 0.0)).unwrap();
    m.step(Some(&[0.1]), &[0.2], None).unwrap();
    let n = m.n_s();
    m.set_p1(&(DMatrix::identity(n, n) * -1e6)).unwrap();
    let err = m.step(Some(&[0.1]), &[0.2], None).unwrap_err();
    assert!(err.is_numeric());
    assert!(err.to_string().contains("step 2"), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn covariances_stay_symmetric_and_psd(
        seed in 0u64..1000,
        sigma_s in 0.01f64..1.0,
        sigma_y in 0.01f64..1.0,
        p4_init in 0.5f64..10.0,
        kappa1 in 0.1f64..1.0,
        kappa2 in 0.1f64..1.0,
        blocks in any::<bool>(),
        data in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 20..60),
    ) {
        let layout = if blocks { CovarianceLayout::PerStateBlock } else { CovarianceLayout::Full };
        let cfg = FilterConfig { seed, sigma_s, sigma_y, p4_init, kappa1, kappa2, ..oracle_config(layout, 0.0) };
        let mut m = FilterModel::new(cfg).unwrap();
        for (u, d) in data {
            m.step(Some(&[u]), &[d], None).unwrap();
            let h = m.health();
            prop_assert!(h.p1_asymmetry <= 1e-9);
            prop_assert!(h.p4_asymmetry <= 1e-9);
            prop_assert!(h.p1_min_eigenvalue >= -1e-8, "min eig {}", h.p1_min_eigenvalue);
        }
    }
}
