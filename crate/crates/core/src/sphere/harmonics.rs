//! Real symmetric spherical harmonics and regularized least-squares fits.
//!
//! Basis convention (even orders only, column index `l(l-1)/2 + l + m` for
//! `l = 0, 2, …, L` and `m = -l..=l`):
//!
//! * `m > 0`: `√2 · N_l^m · P_l^m(cos θ) · cos(mφ)`
//! * `m = 0`: `N_l^0 · P_l(cos θ)`
//! * `m < 0`: `√2 · N_l^|m| · P_l^|m|(cos θ) · sin(|m|φ)`
//!
//! i.e. √2 times the real or imaginary part of the complex harmonic
//! `Y_l^|m|`, with `P_l^m` carrying the Condon–Shortley phase and
//! `N_l^m = sqrt((2l+1)/(4π) · (l-m)!/(l+m)!)`. The columns are orthonormal
//! on the sphere.

use std::f64::consts::{PI, SQRT_2};

use nalgebra::{DMatrix, DVector};

use super::{Direction, DirectionSet};
use crate::error::{Error, Result};

/// Laplace–Beltrami regularization weight used when none is given.
pub const DEFAULT_LAMBDA: f64 = 0.006;

/// Cap on the automatically chosen order.
pub const MAX_DEFAULT_ORDER: usize = 8;

/// Number of coefficients of the even-order basis up to `order`.
pub fn n_coeffs(order: usize) -> usize {
    (order + 1) * (order + 2) / 2
}

/// Inverse of [`n_coeffs`]; `None` when `r` is not a valid coefficient count.
pub fn order_from_coeffs(r: usize) -> Option<usize> {
    (0..=64).step_by(2).find(|&l| n_coeffs(l) == r)
}

/// Largest even order whose coefficient count fits in `n` samples, capped at 8.
pub fn default_order(n: usize) -> usize {
    let mut order = 0;
    while order + 2 <= MAX_DEFAULT_ORDER && n_coeffs(order + 2) <= n {
        order += 2;
    }
    order
}

fn check_order(order: usize) -> Result<()> {
    if order % 2 == 1 {
        Err(Error::OddOrder(order))
    } else {
        Ok(())
    }
}

/// Degree `l` of every column, in column order.
fn column_degrees(order: usize) -> impl Iterator<Item = usize> {
    (0..=order)
        .step_by(2)
        .flat_map(|l| std::iter::repeat_n(l, 2 * l + 1))
}

/// Diagonal of the Laplace–Beltrami operator, `l(l+1)` per column.
pub fn laplace_beltrami(order: usize) -> Vec<f64> {
    column_degrees(order).map(|l| (l * (l + 1)) as f64).collect()
}

#[inline]
fn plm_index(l: usize, m: usize) -> usize {
    l * (l + 1) / 2 + m
}

/// Associated Legendre functions `P_l^m(cos θ)` with Condon–Shortley phase for
/// `0 ≤ m ≤ l ≤ order`, by the standard three-term recurrence in `l`.
fn legendre_table(order: usize, cos_t: f64, sin_t: f64, out: &mut Vec<f64>) {
    out.clear();
    out.resize(plm_index(order, order) + 1, 0.0);
    let mut pmm = 1.0;
    for m in 0..=order {
        if m > 0 {
            pmm *= -((2 * m - 1) as f64) * sin_t;
        }
        out[plm_index(m, m)] = pmm;
        if m < order {
            let p1 = cos_t * (2 * m + 1) as f64 * pmm;
            out[plm_index(m + 1, m)] = p1;
            let (mut prev2, mut prev1) = (pmm, p1);
            for l in (m + 2)..=order {
                let p = ((2 * l - 1) as f64 * cos_t * prev1 - (l + m - 1) as f64 * prev2)
                    / (l - m) as f64;
                out[plm_index(l, m)] = p;
                prev2 = prev1;
                prev1 = p;
            }
        }
    }
}

fn normalization(l: usize, m: usize) -> f64 {
    // (l-m)!/(l+m)!
    let ratio: f64 = ((l - m + 1)..=(l + m)).map(|k| 1.0 / k as f64).product();
    ((2 * l + 1) as f64 / (4.0 * PI) * ratio).sqrt()
}

/// Evaluates one basis row at `(theta, phi)`, optionally with its partial
/// derivatives in `theta` and `phi`. Slices must hold `n_coeffs(order)` values.
///
/// The θ-derivative uses `dP_l^m/dθ = ½(P_l^{m+1} − (l+m)(l−m+1) P_l^{m−1})`,
/// which stays finite at the poles.
pub fn sh_row(
    order: usize,
    theta: f64,
    phi: f64,
    out: &mut [f64],
    mut d_theta: Option<&mut [f64]>,
    mut d_phi: Option<&mut [f64]>,
) {
    let (sin_t, cos_t) = theta.sin_cos();
    let mut p = Vec::new();
    legendre_table(order, cos_t, sin_t, &mut p);
    let plm = |l: usize, m: usize| if m > l { 0.0 } else { p[plm_index(l, m)] };

    for l in (0..=order).step_by(2) {
        let base = if l == 0 { 0 } else { l * (l - 1) / 2 + l };
        let norm0 = normalization(l, 0);
        out[base] = norm0 * plm(l, 0);
        if let Some(dt) = d_theta.as_deref_mut() {
            dt[base] = if l == 0 { 0.0 } else { norm0 * plm(l, 1) };
        }
        if let Some(dp) = d_phi.as_deref_mut() {
            dp[base] = 0.0;
        }
        for m in 1..=l {
            let nm = SQRT_2 * normalization(l, m);
            let (sm, cm) = (m as f64 * phi).sin_cos();
            let v = nm * plm(l, m);
            out[base + m] = v * cm;
            out[base - m] = v * sm;
            if let Some(dt) = d_theta.as_deref_mut() {
                let dp_dt =
                    0.5 * (plm(l, m + 1) - ((l + m) * (l - m + 1)) as f64 * plm(l, m - 1));
                dt[base + m] = nm * dp_dt * cm;
                dt[base - m] = nm * dp_dt * sm;
            }
            if let Some(dp) = d_phi.as_deref_mut() {
                dp[base + m] = -(m as f64) * v * sm;
                dp[base - m] = (m as f64) * v * cm;
            }
        }
    }
}

/// A basis matrix (one row per direction) together with its order.
#[derive(Clone, Debug)]
pub struct ShBasis {
    pub order: usize,
    pub matrix: DMatrix<f64>,
}

impl ShBasis {
    pub fn n_rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn n_coeffs(&self) -> usize {
        self.matrix.ncols()
    }
}

fn basis_rows(order: usize, dirs: &[Direction], derivs: bool) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let r = n_coeffs(order);
    let n = dirs.len();
    let mut b = DMatrix::zeros(n, r);
    let mut dt = DMatrix::zeros(if derivs { n } else { 0 }, r);
    let mut dp = DMatrix::zeros(if derivs { n } else { 0 }, r);
    let mut row = vec![0.0; r];
    let mut row_t = vec![0.0; r];
    let mut row_p = vec![0.0; r];
    for (i, d) in dirs.iter().enumerate() {
        if derivs {
            sh_row(order, d.theta, d.phi, &mut row, Some(&mut row_t), Some(&mut row_p));
            for j in 0..r {
                dt[(i, j)] = row_t[j];
                dp[(i, j)] = row_p[j];
            }
        } else {
            sh_row(order, d.theta, d.phi, &mut row, None, None);
        }
        for j in 0..r {
            b[(i, j)] = row[j];
        }
    }
    (b, dt, dp)
}

/// Basis matrix `B` with `B[i, j] = Y_j(dirs[i])`.
pub fn sh_basis(order: usize, dirs: &DirectionSet) -> Result<ShBasis> {
    check_order(order)?;
    let (matrix, _, _) = basis_rows(order, &dirs.dirs, false);
    Ok(ShBasis { order, matrix })
}

/// Partial derivatives `(∂B/∂θ, ∂B/∂φ)`, each row taken w.r.t. its own direction.
pub fn sh_basis_derivatives(order: usize, dirs: &DirectionSet) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_order(order)?;
    let (_, dt, dp) = basis_rows(order, &dirs.dirs, true);
    Ok((dt, dp))
}

/// Coefficients of an even-order real symmetric expansion.
#[derive(Clone, Debug, PartialEq)]
pub struct ShExpansion {
    pub order: usize,
    pub coeffs: Vec<f64>,
}

impl ShExpansion {
    pub fn new(order: usize, coeffs: Vec<f64>) -> Result<Self> {
        check_order(order)?;
        if coeffs.len() != n_coeffs(order) {
            return Err(Error::Shape(format!(
                "order {order} needs {} coefficients, got {}",
                n_coeffs(order),
                coeffs.len()
            )));
        }
        Ok(ShExpansion { order, coeffs })
    }

    pub fn zeros(order: usize) -> Result<Self> {
        Self::new(order, vec![0.0; n_coeffs(order)])
    }

    /// Value at a single direction.
    pub fn value_at(&self, theta: f64, phi: f64) -> f64 {
        let mut row = vec![0.0; self.coeffs.len()];
        sh_row(self.order, theta, phi, &mut row, None, None);
        row.iter().zip(&self.coeffs).map(|(a, b)| a * b).sum()
    }
}

/// Precomputed regularized least-squares operator
/// `P = (BᵀB + λΛ²)⁻¹ Bᵀ`, mapping samples to coefficients.
#[derive(Clone, Debug)]
pub struct ShFitter {
    pub order: usize,
    pub lambda: f64,
    /// `R × n`.
    pub pinv: DMatrix<f64>,
}

impl ShFitter {
    pub fn new(basis: &ShBasis, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) {
            return Err(Error::Invalid(format!("lambda must be >= 0, got {lambda}")));
        }
        let (gram, _) = regularized_gram(basis, lambda);
        let chol = cholesky_checked(gram)?;
        let pinv = chol.solve(&basis.matrix.transpose());
        Ok(ShFitter {
            order: basis.order,
            lambda,
            pinv,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.pinv.ncols()
    }

    pub fn fit_into(&self, signals: &[f64], coeffs: &mut [f64]) {
        let (r, n) = self.pinv.shape();
        for (j, c) in coeffs.iter_mut().enumerate().take(r) {
            let mut acc = 0.0;
            for (i, s) in signals.iter().enumerate().take(n) {
                acc += self.pinv[(j, i)] * s;
            }
            *c = acc;
        }
    }

    pub fn fit(&self, signals: &[f64]) -> Result<ShExpansion> {
        if signals.len() != self.n_samples() {
            return Err(Error::Shape(format!(
                "{} signals for a {}-direction basis",
                signals.len(),
                self.n_samples()
            )));
        }
        let mut coeffs = vec![0.0; self.pinv.nrows()];
        self.fit_into(signals, &mut coeffs);
        ShExpansion::new(self.order, coeffs)
    }
}

/// `BᵀB + λΛ²` and the Laplace–Beltrami diagonal.
pub(crate) fn regularized_gram(basis: &ShBasis, lambda: f64) -> (DMatrix<f64>, Vec<f64>) {
    let mut gram = basis.matrix.transpose() * &basis.matrix;
    let lb = laplace_beltrami(basis.order);
    for (j, l) in lb.iter().enumerate() {
        gram[(j, j)] += lambda * l * l;
    }
    (gram, lb)
}

/// Cholesky factorization that also rejects numerically singular systems.
pub(crate) fn cholesky_checked(
    gram: DMatrix<f64>,
) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let max_diag = gram.diagonal().iter().cloned().fold(0.0_f64, f64::max);
    let chol = nalgebra::Cholesky::new(gram).ok_or(Error::RankDeficient)?;
    let min_pivot = chol
        .l_dirty()
        .diagonal()
        .iter()
        .map(|d| d * d)
        .fold(f64::INFINITY, f64::min);
    if !(max_diag > 0.0) || min_pivot < 1e-12 * max_diag {
        return Err(Error::RankDeficient);
    }
    Ok(chol)
}

/// Solves `min ‖Bc − s‖² + λ‖Λc‖²` with `Λ = diag(l(l+1))`.
pub fn fit_sh(signals: &[f64], basis: &ShBasis, lambda: f64) -> Result<ShExpansion> {
    if signals.len() != basis.n_rows() {
        return Err(Error::Shape(format!(
            "{} signals for a {}-row basis",
            signals.len(),
            basis.n_rows()
        )));
    }
    ShFitter::new(basis, lambda)?.fit(signals)
}

/// Evaluates `B(dirs) · coeffs`.
pub fn eval_sh(expansion: &ShExpansion, dirs: &DirectionSet) -> Vec<f64> {
    // order is validated at construction
    let b = sh_basis(expansion.order, dirs).expect("even order");
    let c = DVector::from_column_slice(&expansion.coeffs);
    (b.matrix * c).as_slice().to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sphere::{cart_to_sph, Vec3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dirs(n: usize, seed: u64) -> DirectionSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dirs = (0..n)
            .map(|_| {
                let z: f64 = rng.gen_range(-1.0..1.0);
                let p: f64 = rng.gen_range(0.0..2.0 * PI);
                let r = (1.0 - z * z).sqrt();
                cart_to_sph(&[r * p.cos(), r * p.sin(), z]).unwrap()
            })
            .collect();
        DirectionSet::new(dirs).unwrap()
    }

    /// Fibonacci points on the full sphere.
    fn fibonacci(n: usize) -> DirectionSet {
        let golden = PI * (3.0 - 5f64.sqrt());
        let v: Vec<Vec3> = (0..n)
            .map(|i| {
                let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
                let r = (1.0 - z * z).sqrt();
                let a = golden * i as f64;
                [r * a.cos(), r * a.sin(), z]
            })
            .collect();
        DirectionSet::from_cartesian(&v).unwrap()
    }

    #[test]
    fn counts_and_default_order() {
        assert_eq!(n_coeffs(0), 1);
        assert_eq!(n_coeffs(4), 15);
        assert_eq!(n_coeffs(8), 45);
        assert_eq!(order_from_coeffs(28), Some(6));
        assert_eq!(order_from_coeffs(7), None);
        assert_eq!(default_order(5), 0);
        assert_eq!(default_order(6), 2);
        assert_eq!(default_order(14), 2);
        assert_eq!(default_order(15), 4);
        assert_eq!(default_order(60), 8);
        assert_eq!(default_order(1000), 8);
    }

    #[test]
    fn order_zero_is_constant() {
        let b = sh_basis(0, &random_dirs(10, 1)).unwrap();
        assert_eq!(b.n_coeffs(), 1);
        for i in 0..10 {
            assert!((b.matrix[(i, 0)] - 0.282_094_791_773_878_14).abs() < 1e-15);
        }
        assert_eq!(sh_basis(4, &random_dirs(3, 1)).unwrap().n_coeffs(), 15);
    }

    #[test]
    fn odd_order_rejected() {
        let d = random_dirs(3, 2);
        assert!(matches!(sh_basis(3, &d), Err(Error::OddOrder(3))));
        assert!(matches!(sh_basis_derivatives(5, &d), Err(Error::OddOrder(5))));
        assert!(ShExpansion::new(1, vec![0.0; 3]).is_err());
    }

    #[test]
    fn degree_two_matches_closed_forms() {
        // Independent closed-form real harmonics of degree 2.
        let dirs = random_dirs(40, 3);
        let b = sh_basis(2, &dirs).unwrap();
        for (i, v) in dirs.to_cartesian().iter().enumerate() {
            let [x, y, z] = *v;
            let c = (15.0 / (4.0 * PI)).sqrt();
            let expect = [
                // m = -2, -1, 0, 1, 2 under the documented sign convention
                c * x * y,
                -c * y * z,
                (5.0 / (16.0 * PI)).sqrt() * (3.0 * z * z - 1.0),
                -c * x * z,
                0.5 * c * (x * x - y * y),
            ];
            for m in 0..5 {
                assert!(
                    (b.matrix[(i, 1 + m)] - expect[m]).abs() < 1e-12,
                    "row {i} col {m}: {} vs {}",
                    b.matrix[(i, 1 + m)],
                    expect[m]
                );
            }
        }
        let pole = DirectionSet::new(vec![Direction::new(0.0, 0.0)]).unwrap();
        let b = sh_basis(2, &pole).unwrap();
        assert!((b.matrix[(0, 3)] - 0.630_783_130_505_040).abs() < 1e-12);
    }

    #[test]
    fn derivatives_of_zonal_and_constant_columns() {
        let dirs = random_dirs(20, 4);
        let (dt, dp) = sh_basis_derivatives(6, &dirs).unwrap();
        for i in 0..20 {
            assert_eq!(dt[(i, 0)], 0.0);
            assert_eq!(dp[(i, 0)], 0.0);
            for l in [2usize, 4, 6] {
                let j = l * (l - 1) / 2 + l;
                assert_eq!(dp[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn derivatives_match_central_differences() {
        let dirs = random_dirs(50, 5);
        let order = 8;
        let h = 1e-6;
        let (dt, dp) = sh_basis_derivatives(order, &dirs).unwrap();
        let r = n_coeffs(order);
        let mut worst: f64 = 0.0;
        let (mut a, mut b) = (vec![0.0; r], vec![0.0; r]);
        for (i, d) in dirs.dirs.iter().enumerate() {
            if d.theta < 0.05 || d.theta > PI - 0.05 {
                continue;
            }
            sh_row(order, d.theta + h, d.phi, &mut a, None, None);
            sh_row(order, d.theta - h, d.phi, &mut b, None, None);
            for j in 0..r {
                let fd = (a[j] - b[j]) / (2.0 * h);
                worst = worst.max((fd - dt[(i, j)]).abs() / fd.abs().max(dt[(i, j)].abs()).max(1e-3));
            }
            sh_row(order, d.theta, d.phi + h, &mut a, None, None);
            sh_row(order, d.theta, d.phi - h, &mut b, None, None);
            for j in 0..r {
                let fd = (a[j] - b[j]) / (2.0 * h);
                worst = worst.max((fd - dp[(i, j)]).abs() / fd.abs().max(dp[(i, j)].abs()).max(1e-3));
            }
        }
        assert!(worst < 1e-5, "relative error {worst}");
    }

    #[test]
    fn theta_derivative_finite_at_poles() {
        let d = DirectionSet::new(vec![Direction::new(0.0, 0.3), Direction::new(PI, 1.1)]).unwrap();
        let (dt, dp) = sh_basis_derivatives(8, &d).unwrap();
        assert!(dt.iter().chain(dp.iter()).all(|v| v.is_finite()));
    }

    #[test]
    fn columns_orthonormal_on_dense_grid() {
        let grid = fibonacci(10_000);
        let b = sh_basis(8, &grid).unwrap().matrix;
        let w = 4.0 * PI / 10_000.0;
        let g = b.transpose() * &b * w;
        let r = g.nrows();
        let mut worst: f64 = 0.0;
        for i in 0..r {
            for j in 0..r {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g[(i, j)] - target).abs());
            }
        }
        assert!(worst < 2e-3, "max deviation {worst}");
    }

    #[test]
    fn constant_signal_fit() {
        let dirs = fibonacci(60);
        let half: Vec<_> = dirs.dirs.iter().take(30).cloned().collect();
        let dirs = DirectionSet::new(half).unwrap();
        let b = sh_basis(4, &dirs).unwrap();
        let e = fit_sh(&vec![1.0; 30], &b, 0.0).unwrap();
        assert!((e.coeffs[0] - 3.544_907_701_811_032).abs() < 1e-10);
        assert!(e.coeffs[1..].iter().all(|c| c.abs() < 1e-10));
        let z = fit_sh(&vec![0.0; 30], &b, 0.0).unwrap();
        assert!(z.coeffs.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn eval_constant_expansion() {
        let mut c = vec![0.0; 15];
        c[0] = 2.0 * PI.sqrt();
        let e = ShExpansion::new(4, c).unwrap();
        for v in eval_sh(&e, &random_dirs(25, 6)) {
            assert!((v - 1.0).abs() < 1e-14);
        }
        let z = ShExpansion::zeros(4).unwrap();
        assert!(eval_sh(&z, &random_dirs(5, 6)).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn underdetermined_fit_requires_lambda() {
        let dirs = random_dirs(10, 7);
        let b = sh_basis(4, &dirs).unwrap();
        assert!(matches!(fit_sh(&[1.0; 10], &b, 0.0), Err(Error::RankDeficient)));
        assert!(fit_sh(&[1.0; 10], &b, DEFAULT_LAMBDA).is_ok());
    }

    #[test]
    fn regularization_shrinks_high_orders() {
        let dirs = random_dirs(60, 8);
        let b = sh_basis(6, &dirs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s: Vec<f64> = (0..60).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut prev = f64::INFINITY;
        for lambda in [0.0, 1e-4, 1e-3, 1e-2, 1e-1, 1.0] {
            let e = fit_sh(&s, &b, lambda).unwrap();
            let hi: f64 = e.coeffs[1..].iter().map(|c| c * c).sum::<f64>().sqrt();
            assert!(hi <= prev + 1e-12, "lambda {lambda}: {hi} > {prev}");
            prev = hi;
        }
    }

    #[test]
    fn antipodal_flip_invariance() {
        let dirs = random_dirs(30, 10);
        let flipped = DirectionSet::from_cartesian(
            &dirs
                .to_cartesian()
                .iter()
                .map(|v| [-v[0], -v[1], -v[2]])
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let a = sh_basis(6, &dirs).unwrap().matrix;
        let b = sh_basis(6, &flipped).unwrap().matrix;
        assert!((a - b).abs().max() < 1e-12);
    }
}
