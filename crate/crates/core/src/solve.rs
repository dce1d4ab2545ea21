//! Dense solves, energy norms, Aitken extrapolation and the energy-error identities.

use nalgebra::{DMatrix, DVector};

use crate::quadrature::neumaier_sum;
use crate::{Error, Result};

/// Condition estimates above this are treated as singular.
pub const CONDITION_LIMIT: f64 = 1e14;

/// A square dense system `A x = b`.
#[derive(Clone, Debug)]
pub struct DenseSystem {
    pub matrix: DMatrix<f64>,
    pub rhs: Vec<f64>,
}

impl DenseSystem {
    pub fn new(matrix: DMatrix<f64>, rhs: Vec<f64>) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::DimensionMismatch {
                expected: matrix.nrows(),
                got: matrix.ncols(),
            });
        }
        if rhs.len() != matrix.nrows() {
            return Err(Error::DimensionMismatch {
                expected: matrix.nrows(),
                got: rhs.len(),
            });
        }
        Ok(Self { matrix, rhs })
    }
}

fn norm1(a: &DMatrix<f64>) -> f64 {
    a.column_iter().map(|c| c.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// Hager's estimate of `||A^{-1}||_1` from an LU factorization.
fn inverse_norm1_estimate(lu: &nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>, n: usize) -> f64 {
    let lu_t = lu.clone();
    let mut x = DVector::from_element(n, 1.0 / n as f64);
    let mut est = 0.0;
    for _ in 0..5 {
        let Some(y) = lu.solve(&x) else {
            return f64::INFINITY;
        };
        let y1 = y.iter().map(|v| v.abs()).sum::<f64>();
        if !y1.is_finite() {
            return f64::INFINITY;
        }
        if y1 <= est {
            break;
        }
        est = y1;
        let xi = y.map(|v| if v >= 0.0 { 1.0 } else { -1.0 });
        // z = A^{-T} xi via the transposed factors: solve with the transpose system
        let Some(z) = solve_transposed(&lu_t, &xi) else {
            return f64::INFINITY;
        };
        let (j, zmax) = z.iter().enumerate().fold((0, 0.0), |(bj, bv), (j, v)| if v.abs() > bv { (j, v.abs()) } else { (bj, bv) });
        if zmax <= z.dot(&x) {
            break;
        }
        x = DVector::zeros(n);
        x[j] = 1.0;
    }
    est
}

/// Solves `A^T z = r` with the factors `P A = L U`.
fn solve_transposed(lu: &nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>, r: &DVector<f64>) -> Option<DVector<f64>> {
    let l = lu.l();
    let u = lu.u();
    // A^T = U^T L^T P, so solve U^T w = r, L^T v = w, z = P^T v
    let w = u.transpose().solve_lower_triangular(r)?;
    let mut v = l.transpose().solve_upper_triangular(&w)?;
    lu.p().inv_permute_rows(&mut v);
    Some(v)
}

/// One-norm condition estimate of `A`.
pub fn condition_estimate(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    if n == 0 {
        return 1.0;
    }
    let lu = a.clone().lu();
    norm1(a) * inverse_norm1_estimate(&lu, n)
}

/// Diagonal scaling `s_i = |a_ii|^{-1/2}` (1 where the diagonal vanishes).
fn equilibration(a: &DMatrix<f64>) -> Vec<f64> {
    (0..a.nrows())
        .map(|i| {
            let d = a[(i, i)].abs();
            if d > 0.0 && d.is_finite() {
                1.0 / d.sqrt()
            } else {
                1.0
            }
        })
        .collect()
}

/// LU with partial pivoting on the symmetrically equilibrated matrix
/// `S A S`. Fails if its condition estimate exceeds [`CONDITION_LIMIT`].
///
/// On locally refined meshes the basis functions differ in scale by many
/// orders of magnitude; the scaling removes that part of the condition number.
pub fn solve_dense(system: &DenseSystem) -> Result<Vec<f64>> {
    let a = &system.matrix;
    let n = a.nrows();
    let s = equilibration(a);
    let scaled = DMatrix::from_fn(n, n, |i, j| s[i] * a[(i, j)] * s[j]);
    let lu = scaled.clone().lu();
    let anorm = norm1(&scaled);
    let cond = if anorm == 0.0 { f64::INFINITY } else { anorm * inverse_norm1_estimate(&lu, n) };
    if !(cond <= CONDITION_LIMIT) {
        return Err(Error::Singular(cond));
    }
    let b = DVector::from_fn(n, |i, _| s[i] * system.rhs[i]);
    let y = lu.solve(&b).ok_or(Error::Singular(f64::INFINITY))?;
    Ok(y.iter().zip(&s).map(|(y, s)| y * s).collect())
}

/// `c^T A c`, summed with compensation.
pub fn energy_norm_sq(a: &DMatrix<f64>, c: &[f64]) -> f64 {
    let n = c.len();
    neumaier_sum((0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| c[i] * a[(i, j)] * c[j]))
}

/// Result of Aitken extrapolation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Extrapolated {
    pub value: f64,
    /// The second difference vanished and the last raw term was returned.
    pub degenerate: bool,
}

/// Aitken's `Delta^2` applied to the last three terms.
pub fn aitken_extrapolate(xs: &[f64]) -> Result<Extrapolated> {
    if xs.len() < 3 {
        return Err(Error::Config("Aitken extrapolation needs at least three terms".into()));
    }
    let n = xs.len();
    let (x0, x1, x2) = (xs[n - 3], xs[n - 2], xs[n - 1]);
    let d1 = x2 - x1;
    let d0 = x1 - x0;
    let dd = d1 - d0;
    let scale = x0.abs().max(x1.abs()).max(x2.abs()).max(f64::MIN_POSITIVE);
    if dd.abs() <= 1e-15 * scale || d1 == 0.0 {
        return Ok(Extrapolated {
            value: x2,
            degenerate: dd.abs() <= 1e-15 * scale && d1 != 0.0,
        });
    }
    Ok(Extrapolated {
        value: x2 - d1 * d1 / dd,
        degenerate: false,
    })
}

/// A squared error, clamped at zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErrorSq {
    /// Value before clamping.
    pub raw: f64,
    pub value: f64,
    /// The raw value was negative.
    pub clamped: bool,
}

impl ErrorSq {
    fn from_raw(raw: f64) -> Self {
        if raw < 0.0 {
            log::warn!("negative squared error {raw:e} clamped to zero");
        }
        Self {
            raw,
            value: raw.max(0.0),
            clamped: raw < 0.0,
        }
    }
}

/// `|||phi - phi_gal|||^2 = |||phi|||^2 - c^T A c`.
pub fn galerkin_error_sq(exact_energy_sq: f64, a: &DMatrix<f64>, c_gal: &[f64]) -> ErrorSq {
    ErrorSq::from_raw(exact_energy_sq - energy_norm_sq(a, c_gal))
}

/// `|||phi|||^2 - (2 b^T c - c^T A c)`: equal to [`galerkin_error_sq`] for the
/// exact Galerkin solution, but only second-order sensitive to solver error in `c`.
pub fn galerkin_error_sq_stationary(exact_energy_sq: f64, a: &DMatrix<f64>, b: &[f64], c_gal: &[f64]) -> ErrorSq {
    let bc = neumaier_sum(b.iter().zip(c_gal).map(|(b, c)| b * c));
    ErrorSq::from_raw(exact_energy_sq - (2.0 * bc - energy_norm_sq(a, c_gal)))
}

/// Collocation error from the Galerkin error on the same space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CollocationError {
    /// `|||phi - phi_gal|||^2 + |||phi_gal - phi_col|||^2` (Pythagoras).
    pub error: ErrorSq,
    /// The same with a minus sign, kept for comparison only.
    pub minus_variant: f64,
    /// `|||phi_gal - phi_col|||^2`.
    pub difference_sq: f64,
}

pub fn collocation_error_sq(exact_energy_sq: f64, a: &DMatrix<f64>, c_gal: &[f64], c_col: &[f64]) -> CollocationError {
    collocation_error_from(galerkin_error_sq(exact_energy_sq, a, c_gal), a, c_gal, c_col)
}

/// As [`collocation_error_sq`], starting from a known Galerkin error.
pub fn collocation_error_from(gal: ErrorSq, a: &DMatrix<f64>, c_gal: &[f64], c_col: &[f64]) -> CollocationError {
    let d: Vec<f64> = c_gal.iter().zip(c_col).map(|(g, c)| g - c).collect();
    let diff = energy_norm_sq(a, &d).max(0.0);
    let err = ErrorSq::from_raw(gal.value + diff);
    log::debug!("collocation error: plus {:e}, minus {:e}", gal.value + diff, gal.value - diff);
    CollocationError {
        error: err,
        minus_variant: gal.value - diff,
        difference_sq: diff,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn trivial_solves() {
        let s = DenseSystem::new(DMatrix::identity(3, 3), vec![1.0, -2.0, 3.0]).unwrap();
        assert_eq!(solve_dense(&s).unwrap(), vec![1.0, -2.0, 3.0]);
        let s = DenseSystem::new(DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 4.0]), vec![2.0, 8.0]).unwrap();
        assert_eq!(solve_dense(&s).unwrap(), vec![1.0, 2.0]);
        let s = DenseSystem::new(DMatrix::zeros(2, 2), vec![1.0, 1.0]).unwrap();
        assert!(matches!(solve_dense(&s), Err(Error::Singular(_))));
        assert!(DenseSystem::new(DMatrix::zeros(2, 3), vec![0.0; 2]).is_err());
    }

    #[test]
    fn rejects_ill_conditioned() {
        let eps = 1e-16;
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0 + eps * 4.0]);
        assert!(solve_dense(&DenseSystem::new(a, vec![1.0, 1.0]).unwrap()).is_err());
    }

    #[test]
    fn condition_estimate_matches_exact_on_small_matrices() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 1.0, 0.0, 1.0, 2.0]);
        let inv = a.clone().try_inverse().unwrap();
        let exact = norm1(&a) * norm1(&inv);
        let est = condition_estimate(&a);
        assert!(est <= exact * (1.0 + 1e-12) && est >= exact / 3.0, "{est} vs {exact}");
    }

    #[test]
    fn aitken_examples() {
        let xs: Vec<f64> = (0..6).map(|n| 1.0 + 0.5f64.powi(n)).collect();
        assert_eq!(aitken_extrapolate(&xs).unwrap().value, 1.0);
        let c = aitken_extrapolate(&[2.5; 4]).unwrap();
        assert_eq!(c.value, 2.5);
        let noisy: Vec<f64> = (0..8).map(|n| 3.0 + 5.0 * 0.3f64.powi(n) + if n % 2 == 0 { 1e-13 } else { -1e-13 }).collect();
        assert!((aitken_extrapolate(&noisy[..5]).unwrap().value - 3.0).abs() < 1e-10);
        assert!(aitken_extrapolate(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn error_identities() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        assert_eq!(energy_norm_sq(&a, &[0.0, 0.0]), 0.0);
        let c = [0.3, -0.7];
        let c2 = [0.6, -1.4];
        assert!((energy_norm_sq(&a, &c2) - 4.0 * energy_norm_sq(&a, &c)).abs() < 1e-15);
        let e = energy_norm_sq(&a, &c);
        assert_eq!(galerkin_error_sq(e, &a, &c).value, 0.0);
        let neg = galerkin_error_sq(e - 1e-3, &a, &c);
        assert!(neg.clamped && neg.value == 0.0 && neg.raw < 0.0);
        let col = collocation_error_sq(e + 0.1, &a, &c, &c);
        assert!((col.error.value - 0.1).abs() < 1e-15);
        let col = collocation_error_sq(e + 0.1, &a, &c, &[0.0, 0.0]);
        assert!(col.error.value >= 0.1);
        assert!((col.error.value - col.minus_variant - 2.0 * col.difference_sq).abs() < 1e-15);
    }

    #[test]
    fn stationary_error_matches_at_the_solution() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let b = vec![1.0, -0.5];
        let c = solve_dense(&DenseSystem::new(a.clone(), b.clone()).unwrap()).unwrap();
        let e = 1.7;
        let x = galerkin_error_sq(e, &a, &c).value;
        let y = galerkin_error_sq_stationary(e, &a, &b, &c).value;
        assert!((x - y).abs() < 1e-15);
        // a perturbation of size d changes the stationary form by O(d^2) only
        let d = 1e-6;
        let cp = [c[0] + d, c[1]];
        let z = galerkin_error_sq_stationary(e, &a, &b, &cp).value;
        assert!((z - y - a[(0, 0)] * d * d).abs() < 1e-15);
    }

    #[test]
    fn badly_scaled_but_well_conditioned() {
        // D A D with D spanning 12 orders of magnitude
        let base = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 1.0, 0.0, 1.0, 2.0]);
        let d = [1.0, 1e-6, 1e-12];
        let a = DMatrix::from_fn(3, 3, |i, j| d[i] * base[(i, j)] * d[j]);
        assert!(condition_estimate(&a) > CONDITION_LIMIT);
        let x = solve_dense(&DenseSystem::new(a.clone(), vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let r = &a * DVector::from_column_slice(&x) - DVector::from_column_slice(&[1.0, 2.0, 3.0]);
        assert!(r.amax() < 1e-12);
    }

    proptest! {
        #[test]
        fn lu_residual_bound(vals in proptest::collection::vec(-1.0f64..1.0, 36), rhs in proptest::collection::vec(-1.0f64..1.0, 6)) {
            let mut a = DMatrix::from_row_slice(6, 6, &vals);
            for i in 0..6 { a[(i, i)] += 4.0; }
            let s = DenseSystem::new(a.clone(), rhs.clone()).unwrap();
            let x = solve_dense(&s).unwrap();
            let xv = DVector::from_column_slice(&x);
            let bv = DVector::from_column_slice(&rhs);
            let r = (&a * &xv - &bv).norm();
            prop_assert!(r <= 1e-10 * (a.norm() * xv.norm() + bv.norm()));
        }

        #[test]
        fn aitken_exact_on_geometric(l in -5.0f64..5.0, c in 0.1f64..3.0, q in 0.05f64..0.8) {
            let xs: Vec<f64> = (0..4).map(|n| l + c * q.powi(n)).collect();
            let v = aitken_extrapolate(&xs).unwrap().value;
            prop_assert!((v - l).abs() < 1e-10 * (1.0 + l.abs()));
        }
    }
}
