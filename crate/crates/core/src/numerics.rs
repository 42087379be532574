//! Dense linear algebra, FFT and constrained least squares.
//!
//! Decompositions are delegated to `nalgebra` and transforms to `rustfft`;
//! this module pins the input checks, output conventions and tolerances the
//! rest of the crate relies on. The SPD solver and the NNLS solver are local
//! because callers need the failing pivot index and a fixed pivoting order.

use nalgebra::{DMatrix, DMatrixViewMut, DVector};
use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::par;

/// Columns per work item in [`mat_mul`].
const MATMUL_CHUNK: usize = 64;
const SVD_EPS: f64 = 1e-15;
const SVD_MAX_ITER: usize = 10_000;

/// Thin SVD `A = U diag(S) Vᵀ` with `S` sorted descending.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: DMatrix<f64>,
    pub s: DVector<f64>,
    pub v: DMatrix<f64>,
}

/// Eigenpairs of a general real square matrix.
#[derive(Debug, Clone)]
pub struct Eigen {
    pub values: DVector<Complex64>,
    /// Unit-norm eigenvectors, one per column, matching `values`.
    pub vectors: DMatrix<Complex64>,
}

pub(crate) fn ensure_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{what} contains non-finite entries")))
    }
}

/// Singular value decomposition.
pub fn svd(a: &DMatrix<f64>) -> Result<Svd> {
    ensure_finite(a, "svd input")?;
    if a.is_empty() {
        return Err(Error::invalid("svd of an empty matrix"));
    }
    let dec = a
        .clone()
        .try_svd(true, true, SVD_EPS, SVD_MAX_ITER)
        .ok_or_else(|| Error::numeric("svd did not converge"))?;
    let u = dec.u.ok_or_else(|| Error::numeric("svd produced no U"))?;
    let v_t = dec.v_t.ok_or_else(|| Error::numeric("svd produced no Vᵀ"))?;
    Ok(Svd { u, s: dec.singular_values, v: v_t.transpose() })
}

/// Eigenvalues and unit eigenvectors of a general real square matrix.
///
/// Eigenvalues come from a real Schur form. Each eigenvector is taken from
/// the numerical null space of `A − λI`; eigenvalues that coincide to within
/// `1e-7·max(1, ‖A‖)` share one null space of matching dimension, so
/// repeated eigenvalues of diagonalizable matrices get independent vectors.
pub fn eig_general(a: &DMatrix<f64>) -> Result<Eigen> {
    if !a.is_square() {
        return Err(Error::invalid(format!("eig of non-square {}x{} matrix", a.nrows(), a.ncols())));
    }
    ensure_finite(a, "eig input")?;
    let n = a.nrows();
    if n == 0 {
        return Ok(Eigen { values: DVector::zeros(0), vectors: DMatrix::zeros(0, 0) });
    }
    // Near-scalar matrices can stall the QR iteration at machine-epsilon
    // deflation; loosen the tolerance before giving up.
    let schur = [f64::EPSILON, 1e-14, 1e-12]
        .iter()
        .find_map(|&eps| nalgebra::Schur::try_new(a.clone(), eps, SVD_MAX_ITER))
        .ok_or_else(|| Error::numeric("Schur iteration did not converge"))?;
    let values = schur.complex_eigenvalues();
    let scale = a.norm().max(1.0);
    let cluster_tol = 1e-7 * scale;

    let ac = a.map(|x| Complex64::new(x, 0.0));
    let mut vectors = DMatrix::<Complex64>::zeros(n, n);
    let mut assigned = vec![false; n];
    for i in 0..n {
        if assigned[i] {
            continue;
        }
        let members: Vec<usize> = (i..n)
            .filter(|&j| !assigned[j] && (values[j] - values[i]).norm() <= cluster_tol)
            .collect();
        let centre = members.iter().map(|&j| values[j]).sum::<Complex64>() / members.len() as f64;
        let mut shifted = ac.clone();
        for d in 0..n {
            shifted[(d, d)] -= centre;
        }
        let dec = shifted
            .try_svd(false, true, SVD_EPS, SVD_MAX_ITER)
            .ok_or_else(|| Error::numeric("eigenvector SVD did not converge"))?;
        let v_t = dec.v_t.ok_or_else(|| Error::numeric("eigenvector SVD produced no V"))?;
        // Singular values are sorted descending; the null space is the tail.
        for (slot, &j) in members.iter().enumerate() {
            let row = n - members.len() + slot;
            let mut v: DVector<Complex64> = v_t.row(row).adjoint();
            let norm = v.norm();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::numeric("degenerate eigenvector"));
            }
            v /= Complex64::new(norm, 0.0);
            vectors.set_column(j, &v);
            assigned[j] = true;
        }
    }
    Ok(Eigen { values, vectors })
}

/// Solves `M X = B` for symmetric positive definite `M` by Cholesky factorization.
///
/// `M` must be symmetric to `1e-9·max(1, max|Mᵢⱼ|)`; it is symmetrized before
/// factoring, so the result is identical for `M` and `(M + Mᵀ)/2`. A pivot at
/// or below `1e-12` is reported with its index.
pub fn spd_solve(m: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    if !m.is_square() {
        return Err(Error::invalid("spd_solve: matrix is not square"));
    }
    if b.nrows() != n {
        return Err(Error::invalid(format!("spd_solve: rhs has {} rows, expected {n}", b.nrows())));
    }
    ensure_finite(m, "spd_solve matrix")?;
    ensure_finite(b, "spd_solve rhs")?;
    let scale = m.amax().max(1.0);
    for i in 0..n {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-9 * scale {
                return Err(Error::invalid(format!("spd_solve: matrix not symmetric at ({i},{j})")));
            }
        }
    }
    let l = cholesky_lower(&symmetrize(m))?;
    let mut x = b.clone();
    for col in 0..x.ncols() {
        // L y = b
        for i in 0..n {
            let mut acc = x[(i, col)];
            for k in 0..i {
                acc -= l[(i, k)] * x[(k, col)];
            }
            x[(i, col)] = acc / l[(i, i)];
        }
        // Lᵀ x = y
        for i in (0..n).rev() {
            let mut acc = x[(i, col)];
            for k in i + 1..n {
                acc -= l[(k, i)] * x[(k, col)];
            }
            x[(i, col)] = acc / l[(i, i)];
        }
    }
    Ok(x)
}

fn cholesky_lower(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 1e-12) {
            return Err(Error::NotPositiveDefinite { pivot: j, value: d });
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in j + 1..n {
            let mut acc = m[(i, j)];
            for k in 0..j {
                acc -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = acc / djj;
        }
    }
    Ok(l)
}

/// `(M + Mᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    symmetrize_in_place(&mut out);
    out
}

pub fn symmetrize_in_place(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Largest absolute asymmetry `max |Mᵢⱼ − Mⱼᵢ|`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..i {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_symmetric_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    symmetrize(m).symmetric_eigenvalues().min()
}

/// Result of [`nnls`].
#[derive(Debug, Clone)]
pub struct NnlsSolution {
    pub x: DVector<f64>,
    /// `‖C x − d‖₂` at the solution.
    pub residual_norm: f64,
    pub iterations: usize,
}

/// Non-negative least squares `min ‖C x − d‖₂ s.t. x ≥ 0` (Lawson–Hanson active set).
///
/// The entering variable is the one with the largest positive gradient
/// component `Cᵀ(d − Cx)`; ties go to the lowest index. Variables leave the
/// passive set in index order once they reach zero.
pub fn nnls(c: &DMatrix<f64>, d: &DVector<f64>) -> Result<NnlsSolution> {
    let (m, n) = c.shape();
    if d.len() != m {
        return Err(Error::invalid(format!("nnls: {m} rows but rhs length {}", d.len())));
    }
    ensure_finite(c, "nnls matrix")?;
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("nnls rhs contains non-finite entries"));
    }
    let mut x = DVector::<f64>::zeros(n);
    if n == 0 {
        return Ok(NnlsSolution { residual_norm: d.norm(), x, iterations: 0 });
    }
    let tol = 1e-12 * (c.amax().max(1.0) * d.amax().max(1.0)) * (m.max(n) as f64);
    let mut passive = vec![false; n];
    let max_outer = 3 * n + 10;
    let mut iterations = 0;

    loop {
        let w = c.tr_mul(&(d - c * &x));
        let mut entering = None;
        let mut best = tol;
        for j in 0..n {
            if !passive[j] && w[j] > best {
                best = w[j];
                entering = Some(j);
            }
        }
        let Some(t) = entering else { break };
        if iterations >= max_outer {
            break;
        }
        iterations += 1;
        passive[t] = true;

        loop {
            let z = passive_least_squares(c, d, &passive)?;
            let feasible = (0..n).filter(|&j| passive[j]).all(|j| z[j] > 0.0);
            if feasible {
                x = z;
                break;
            }
            let mut alpha = f64::INFINITY;
            for j in 0..n {
                if passive[j] && z[j] <= 0.0 {
                    let denom = x[j] - z[j];
                    if denom > 0.0 {
                        alpha = alpha.min(x[j] / denom);
                    }
                }
            }
            if !alpha.is_finite() {
                alpha = 0.0;
            }
            x += (&z - &x) * alpha;
            let mut moved = false;
            for j in 0..n {
                if passive[j] && x[j] <= tol {
                    x[j] = 0.0;
                    passive[j] = false;
                    moved = true;
                }
            }
            if !moved || !passive.iter().any(|&p| p) {
                break;
            }
        }
    }
    let residual_norm = (c * &x - d).norm();
    Ok(NnlsSolution { x, residual_norm, iterations })
}

fn passive_least_squares(c: &DMatrix<f64>, d: &DVector<f64>, passive: &[bool]) -> Result<DVector<f64>> {
    let cols: Vec<usize> = (0..passive.len()).filter(|&j| passive[j]).collect();
    let mut z = DVector::<f64>::zeros(passive.len());
    if cols.is_empty() {
        return Ok(z);
    }
    let sub = c.select_columns(cols.iter());
    let dec = sub
        .try_svd(true, true, SVD_EPS, SVD_MAX_ITER)
        .ok_or_else(|| Error::numeric("nnls subproblem SVD did not converge"))?;
    let eps = dec.singular_values.max() * 1e-13;
    let sol = dec.solve(d, eps).map_err(|e| Error::numeric(format!("nnls subproblem: {e}")))?;
    for (k, &j) in cols.iter().enumerate() {
        z[j] = sol[k];
    }
    Ok(z)
}

/// Dense product `a · b`, computed in independent column blocks of `b`.
///
/// Block boundaries do not depend on the thread count, so the result is
/// bit-identical with and without the `parallel` feature.
pub fn mat_mul(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.ncols(), b.nrows(), "mat_mul: inner dimensions differ");
    let rows = a.nrows();
    let cols = b.ncols();
    let mut out = DMatrix::<f64>::zeros(rows, cols);
    if rows == 0 || cols == 0 {
        return out;
    }
    par::for_each_chunk(out.as_mut_slice(), rows * MATMUL_CHUNK, |block, chunk| {
        let start = block * MATMUL_CHUNK;
        let width = chunk.len() / rows;
        let mut view = DMatrixViewMut::from_slice(chunk, rows, width);
        view.gemm(1.0, a, &b.columns(start, width), 0.0);
    });
    out
}

fn check_fft_len(n: usize) -> Result<()> {
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::invalid(format!("fft length {n} is not a power of two")));
    }
    Ok(())
}

/// Forward DFT, `X_k = Σ_j x_j e^{−2πi jk/n}` (unnormalized).
pub fn fft(x: &[Complex64]) -> Result<Vec<Complex64>> {
    check_fft_len(x.len())?;
    let mut buf = x.to_vec();
    FftPlanner::<f64>::new().plan_fft_forward(buf.len()).process(&mut buf);
    Ok(buf)
}

/// Inverse DFT with the `1/n` normalization, so `ifft(fft(x)) = x`.
pub fn ifft(x: &[Complex64]) -> Result<Vec<Complex64>> {
    check_fft_len(x.len())?;
    let mut buf = x.to_vec();
    FftPlanner::<f64>::new().plan_fft_inverse(buf.len()).process(&mut buf);
    let scale = 1.0 / buf.len() as f64;
    buf.iter_mut().for_each(|v| *v *= scale);
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn svd_of_identity_and_diagonal() {
        let s = svd(&DMatrix::identity(3, 3)).unwrap();
        assert_eq!(s.s.as_slice(), &[1.0, 1.0, 1.0]);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 3.0, 2.0]));
        let s = svd(&d).unwrap();
        for (got, want) in s.s.iter().zip([3.0, 2.0, 1.0]) {
            assert!((got - want).abs() < 1e-14);
        }
    }

    #[test]
    fn svd_reconstructs_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for shape in [(8, 5), (5, 8), (6, 6)] {
            for _ in 0..100 {
                let a = random_matrix(&mut rng, shape.0, shape.1);
                let s = svd(&a).unwrap();
                let rec = &s.u * DMatrix::from_diagonal(&s.s) * s.v.transpose();
                assert!((rec - &a).norm() <= 1e-10 * a.norm().max(1.0));
                let k = s.s.len();
                assert!((s.u.tr_mul(&s.u) - DMatrix::identity(k, k)).amax() < 1e-10);
                assert!((s.v.tr_mul(&s.v) - DMatrix::identity(k, k)).amax() < 1e-10);
                assert!(s.s.as_slice().windows(2).all(|w| w[0] >= w[1]));
            }
        }
    }

    #[test]
    fn svd_rejects_nan() {
        let mut a = DMatrix::identity(2, 2);
        a[(0, 1)] = f64::NAN;
        assert!(matches!(svd(&a), Err(Error::InvalidInput(_))));
    }

    fn sorted_by_angle(v: &DVector<Complex64>) -> Vec<Complex64> {
        let mut out: Vec<_> = v.iter().copied().collect();
        out.sort_by(|a, b| a.arg().partial_cmp(&b.arg()).unwrap());
        out
    }

    fn max_residual(a: &DMatrix<f64>, e: &Eigen) -> f64 {
        let ac = a.map(|x| Complex64::new(x, 0.0));
        (0..e.values.len())
            .map(|k| {
                let v = e.vectors.column(k);
                (&ac * v - v * e.values[k]).norm()
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn eig_diagonal_and_rotation() {
        let d = DMatrix::from_row_slice(2, 2, &[0.9, 0.0, 0.0, 0.5]);
        let e = eig_general(&d).unwrap();
        let mut re: Vec<f64> = e.values.iter().map(|z| z.re).collect();
        re.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert!((re[0] - 0.9).abs() < 1e-14 && (re[1] - 0.5).abs() < 1e-14);

        let rot = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        let e = eig_general(&rot).unwrap();
        let vals = sorted_by_angle(&e.values);
        assert!((vals[0] - Complex64::new(0.0, -1.0)).norm() < 1e-12);
        assert!((vals[1] - Complex64::new(0.0, 1.0)).norm() < 1e-12);
        assert!(max_residual(&rot, &e) < 1e-8);
    }

    #[test]
    fn eig_companion_of_z3_minus_1() {
        // Companion matrix of z³ − 1; roots are the cube roots of unity.
        let c = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let e = eig_general(&c).unwrap();
        // Oracle: z³ − 1 = (z − 1)(z² + z + 1), the quadratic giving (−1 ± i√3)/2.
        let h = 3f64.sqrt() / 2.0;
        let expected = [Complex64::new(-0.5, -h), Complex64::new(1.0, 0.0), Complex64::new(-0.5, h)];
        for (got, want) in sorted_by_angle(&e.values).iter().zip(expected) {
            assert!((got - want).norm() < 1e-12, "{got} vs {want}");
        }
        assert!(max_residual(&c, &e) <= 1e-8 * c.norm());
    }

    #[test]
    fn eig_repeated_eigenvalue_gets_independent_vectors() {
        let e = eig_general(&DMatrix::identity(4, 4)).unwrap();
        let gram = e.vectors.adjoint() * &e.vectors;
        assert!((gram - DMatrix::<Complex64>::identity(4, 4)).norm() < 1e-10);
    }

    #[test]
    fn eig_near_identity_converges() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let a = DMatrix::identity(4, 4) + random_matrix(&mut rng, 4, 4) * 1e-15;
            let e = eig_general(&a).unwrap();
            assert!(e.values.iter().all(|z| (z - Complex64::new(1.0, 0.0)).norm() < 1e-10));
        }
    }

    #[test]
    fn eig_residuals_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in [2, 5, 9] {
            for _ in 0..100 {
                let a = random_matrix(&mut rng, n, n);
                let e = eig_general(&a).unwrap();
                assert!(max_residual(&a, &e) <= 1e-8 * a.norm(), "n={n}");
                for k in 0..n {
                    assert!((e.vectors.column(k).norm() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn spd_solve_examples() {
        let b = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(spd_solve(&DMatrix::identity(3, 3), &b).unwrap(), b);

        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let x = spd_solve(&m, &DMatrix::from_column_slice(2, 1, &[3.0, 3.0])).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-15 && (x[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn spd_solve_random_residual_and_symmetrization_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [1, 4, 12] {
            for _ in 0..100 {
                let g = random_matrix(&mut rng, n, n);
                let m = g.tr_mul(&g) + DMatrix::identity(n, n);
                let b = random_matrix(&mut rng, n, 3);
                let x = spd_solve(&m, &b).unwrap();
                assert!((&m * &x - &b).norm() <= 1e-9 * b.norm());

                let mut skew = m.clone();
                skew[(0, n - 1)] += 4e-10;
                let x1 = spd_solve(&skew, &b).unwrap();
                let x2 = spd_solve(&symmetrize(&skew), &b).unwrap();
                assert!((x1 - x2).amax() <= 1e-12);
            }
        }
    }

    #[test]
    fn spd_solve_reports_failing_pivot() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
        let err = spd_solve(&m, &DMatrix::identity(3, 3)).unwrap_err();
        assert!(matches!(err, Error::NotPositiveDefinite { pivot: 2, .. }), "{err:?}");
        let indefinite = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, 1.0]);
        assert!(matches!(
            spd_solve(&indefinite, &DMatrix::identity(2, 2)),
            Err(Error::NotPositiveDefinite { pivot: 0, .. })
        ));
        let asym = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.0, 2.0]);
        assert!(matches!(spd_solve(&asym, &DMatrix::identity(2, 2)), Err(Error::InvalidInput(_))));
    }

    fn assert_kkt(c: &DMatrix<f64>, d: &DVector<f64>, x: &DVector<f64>) {
        let grad = c.tr_mul(&(c * x - d));
        for j in 0..x.len() {
            assert!(x[j] >= 0.0);
            if x[j] == 0.0 {
                assert!(grad[j] >= -1e-8, "active coordinate {j} gradient {}", grad[j]);
            } else {
                assert!(grad[j].abs() <= 1e-8, "free coordinate {j} gradient {}", grad[j]);
            }
        }
    }

    #[test]
    fn nnls_two_point_symmetric_rule() {
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, -1.0, 1.0]);
        let sol = nnls(&c, &DVector::from_vec(vec![1.0, 0.0])).unwrap();
        assert!((sol.x[0] - 0.5).abs() < 1e-14 && (sol.x[1] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn nnls_clamps_at_boundary() {
        let c = DMatrix::from_row_slice(1, 1, &[1.0]);
        let sol = nnls(&c, &DVector::from_vec(vec![-1.0])).unwrap();
        assert_eq!(sol.x[0], 0.0);
    }

    #[test]
    fn nnls_matches_least_squares_when_unconstrained_optimum_is_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let c = random_matrix(&mut rng, 8, 3);
        let x_true = DVector::from_vec(vec![0.7, 1.3, 0.2]);
        let d = &c * &x_true + DVector::from_fn(8, |_, _| 1e-3 * rng.random_range(-1.0..1.0));
        // Oracle: pseudo-inverse solution.
        let pinv = c.clone().pseudo_inverse(1e-14).unwrap();
        let ls = &pinv * &d;
        assert!(ls.iter().all(|&v| v > 0.0));
        let sol = nnls(&c, &d).unwrap();
        assert!((sol.x - ls).amax() < 1e-10);
    }

    #[test]
    fn nnls_kkt_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let m = rng.random_range(2..10);
            let n = rng.random_range(1..12);
            let c = random_matrix(&mut rng, m, n);
            let d = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
            let sol = nnls(&c, &d).unwrap();
            assert_kkt(&c, &d, &sol.x);
        }
    }

    #[test]
    fn mat_mul_matches_nalgebra() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_matrix(&mut rng, 7, 13);
        let b = random_matrix(&mut rng, 13, 150);
        assert!((mat_mul(&a, &b) - &a * &b).amax() < 1e-13);
    }

    #[test]
    fn fft_impulse_and_dc() {
        let mut x = vec![Complex64::new(0.0, 0.0); 8];
        x[0] = Complex64::new(1.0, 0.0);
        assert!(fft(&x).unwrap().iter().all(|v| (v - Complex64::new(1.0, 0.0)).norm() < 1e-15));

        let c = vec![Complex64::new(2.0, 0.0); 16];
        let spec = fft(&c).unwrap();
        assert!((spec[0] - Complex64::new(32.0, 0.0)).norm() < 1e-12);
        assert!(spec[1..].iter().all(|v| v.norm() < 1e-12));
    }

    #[test]
    fn fft_parseval_and_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<Complex64> =
            (0..32).map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
        let spec = fft(&x).unwrap();
        let time_energy: f64 = x.iter().map(|v| v.norm_sqr()).sum();
        let freq_energy: f64 = spec.iter().map(|v| v.norm_sqr()).sum::<f64>() / 32.0;
        assert!((time_energy - freq_energy).abs() <= 1e-10);
        let back = ifft(&spec).unwrap();
        assert!(back.iter().zip(&x).all(|(a, b)| (a - b).norm() <= 1e-12));
    }

    #[test]
    fn fft_rejects_non_power_of_two() {
        assert!(matches!(fft(&[Complex64::new(1.0, 0.0); 12]), Err(Error::InvalidInput(_))));
        assert!(ifft(&[]).is_err());
    }
}
