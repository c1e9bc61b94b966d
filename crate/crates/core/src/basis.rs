//! Tensor-product quadratic B-spline bases for the non-stationarity
//! functions, with zero-derivative (Neumann) boundary behaviour, and the
//! second-order random-walk penalty built from derivative Gram matrices.
//!
//! The 1-D construction uses uniform knots. With `m` basis functions on
//! `[A, B]` and spacing `delta = (B - A) / (m - 1)`, the unconstrained
//! cardinal splines are `phi_j(x) = B2((x - A)/delta - j)` for integer `j`,
//! where `B2` is the centered quadratic B-spline. The Neumann condition is
//! imposed by even reflection across each boundary, which folds the two
//! exterior splines into their mirror images:
//!
//!   g_1 = phi_1 + phi_{-1},   g_{m-2} = phi_{m-2} + phi_m,
//!
//! and leaves the rest unchanged. Every resulting basis function has zero
//! first derivative at both ends, the functions are C^1, and they still sum
//! to the constant 1.

use crate::error::{Error, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Centered quadratic B-spline, support `[-1.5, 1.5]`.
fn b2(t: f64) -> f64 {
    let a = t.abs();
    if a >= 1.5 {
        0.0
    } else if a <= 0.5 {
        0.75 - t * t
    } else {
        0.5 * (1.5 - a) * (1.5 - a)
    }
}

fn b2_d1(t: f64) -> f64 {
    let a = t.abs();
    if a >= 1.5 {
        0.0
    } else if a <= 0.5 {
        -2.0 * t
    } else {
        -(1.5 - a) * t.signum()
    }
}

fn b2_d2(t: f64) -> f64 {
    let a = t.abs();
    if a >= 1.5 {
        0.0
    } else if a <= 0.5 {
        -2.0
    } else {
        1.0
    }
}

/// A Neumann-constrained uniform quadratic B-spline basis on `[a, b]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Basis1D {
    pub n_fun: usize,
    pub a: f64,
    pub b: f64,
    pub delta: f64,
}

pub fn build_basis_1d(n_fun: usize, a: f64, b: f64) -> Result<Basis1D> {
    if n_fun < 2 {
        return Err(Error::InvalidBasis(format!(
            "need at least 2 basis functions, got {n_fun}"
        )));
    }
    if !(b > a) {
        return Err(Error::InvalidBasis(format!("invalid interval [{a}, {b}]")));
    }
    Ok(Basis1D {
        n_fun,
        a,
        b,
        delta: (b - a) / (n_fun - 1) as f64,
    })
}

impl Basis1D {
    /// Integer shifts contributing to basis function `j` after reflection.
    fn mirrors(&self, j: usize) -> [Option<i64>; 3] {
        let m = self.n_fun as i64;
        let j = j as i64;
        let left = if j == 1 { Some(-1) } else { None };
        let right = if j == m - 2 { Some(m) } else { None };
        [Some(j), left, right]
    }

    pub fn value(&self, j: usize, x: f64) -> f64 {
        let s = (x - self.a) / self.delta;
        self.mirrors(j)
            .iter()
            .flatten()
            .map(|&i| b2(s - i as f64))
            .sum()
    }

    pub fn deriv1(&self, j: usize, x: f64) -> f64 {
        let s = (x - self.a) / self.delta;
        self.mirrors(j)
            .iter()
            .flatten()
            .map(|&i| b2_d1(s - i as f64))
            .sum::<f64>()
            / self.delta
    }

    pub fn deriv2(&self, j: usize, x: f64) -> f64 {
        let s = (x - self.a) / self.delta;
        self.mirrors(j)
            .iter()
            .flatten()
            .map(|&i| b2_d2(s - i as f64))
            .sum::<f64>()
            / (self.delta * self.delta)
    }

    /// Breakpoints of the piecewise-polynomial representation, in `x`.
    pub fn breakpoints(&self) -> Vec<f64> {
        let m = self.n_fun;
        let mut s_pts = vec![0.0];
        let mut h = 0.5;
        while h < (m - 1) as f64 {
            s_pts.push(h);
            h += 1.0;
        }
        s_pts.push((m - 1) as f64);
        s_pts.iter().map(|&s| self.a + s * self.delta).collect()
    }
}

/// Derivative Gram matrices of a 1-D basis: `M_n[i][j] = <g_i^(n), g_j^(n)>`
/// over `[a, b]`, for n = 0, 1, 2. Integrands are polynomials of degree at
/// most 4 per knot span, so 3-point Gauss quadrature per span is exact.
pub fn gram_matrices(basis: &Basis1D) -> [DMatrix<f64>; 3] {
    const NODES: [f64; 3] = [-0.7745966692414834, 0.0, 0.7745966692414834];
    const WEIGHTS: [f64; 3] = [
        0.5555555555555556,
        0.8888888888888888,
        0.5555555555555556,
    ];
    let m = basis.n_fun;
    let mut grams = [
        DMatrix::zeros(m, m),
        DMatrix::zeros(m, m),
        DMatrix::zeros(m, m),
    ];
    let bp = basis.breakpoints();
    for w in bp.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let half = 0.5 * (hi - lo);
        let mid = 0.5 * (hi + lo);
        for (node, wt) in NODES.iter().zip(WEIGHTS.iter()) {
            let x = mid + half * node;
            let scale = wt * half;
            let vals: Vec<[f64; 3]> = (0..m)
                .map(|j| {
                    [
                        basis.value(j, x),
                        basis.deriv1(j, x),
                        basis.deriv2(j, x),
                    ]
                })
                .collect();
            for n in 0..3 {
                for i in 0..m {
                    for j in i..m {
                        let v = scale * vals[i][n] * vals[j][n];
                        grams[n][(i, j)] += v;
                        if i != j {
                            grams[n][(j, i)] += v;
                        }
                    }
                }
            }
        }
    }
    grams
}

/// Tensor-product basis: `f_ij(x, y) = g_i(x) h_j(y)`, with coefficients
/// stacked row-wise, index `i * l + j` for `i` over the x-basis and `j`
/// over the y-basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Basis2D {
    pub bx: Basis1D,
    pub by: Basis1D,
}

impl Basis2D {
    pub fn n_coeffs(&self) -> usize {
        self.bx.n_fun * self.by.n_fun
    }

    pub fn fn_value(&self, coeff_idx: usize, point: (f64, f64)) -> f64 {
        let l = self.by.n_fun;
        let (i, j) = (coeff_idx / l, coeff_idx % l);
        self.bx.value(i, point.0) * self.by.value(j, point.1)
    }
}

/// Evaluates `sum_ij alpha_ij g_i(x) h_j(y)` at each point.
pub fn eval_field(basis: &Basis2D, coeffs: &[f64], points: &[(f64, f64)]) -> Result<Vec<f64>> {
    let (k, l) = (basis.bx.n_fun, basis.by.n_fun);
    if coeffs.len() != k * l {
        return Err(Error::DimensionMismatch(format!(
            "expected {} coefficients, got {}",
            k * l,
            coeffs.len()
        )));
    }
    Ok(points
        .iter()
        .map(|&(x, y)| {
            let gx: Vec<f64> = (0..k).map(|i| basis.bx.value(i, x)).collect();
            let hy: Vec<f64> = (0..l).map(|j| basis.by.value(j, y)).collect();
            let mut acc = 0.0;
            for i in 0..k {
                if gx[i] != 0.0 {
                    for j in 0..l {
                        acc += coeffs[i * l + j] * gx[i] * hy[j];
                    }
                }
            }
            acc
        })
        .collect())
}

/// The second-order random-walk penalty on the coefficients of a tensor
/// basis: `C = G2 (x) H0 + 2 G1 (x) H1 + G0 (x) H2`, symmetric positive
/// semidefinite with null space spanned by the constant coefficient vector.
#[derive(Debug, Clone)]
pub struct Rw2Penalty {
    pub matrix: DMatrix<f64>,
}

pub fn rw2_precision(basis: &Basis2D) -> Rw2Penalty {
    let g = gram_matrices(&basis.bx);
    let h = gram_matrices(&basis.by);
    let (k, l) = (basis.bx.n_fun, basis.by.n_fun);
    let n = k * l;
    let mut q = DMatrix::zeros(n, n);
    for i in 0..k {
        for p in 0..k {
            for j in 0..l {
                for r in 0..l {
                    q[(i * l + j, p * l + r)] = g[2][(i, p)] * h[0][(j, r)]
                        + 2.0 * g[1][(i, p)] * h[1][(j, r)]
                        + g[0][(i, p)] * h[2][(j, r)];
                }
            }
        }
    }
    // Symmetrize away quadrature rounding.
    let qt = q.transpose();
    Rw2Penalty {
        matrix: 0.5 * (q + qt),
    }
}

/// Basis for one non-stationarity function: either a single constant (the
/// stationary case, no penalty) or a full tensor spline basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FieldBasis {
    Constant,
    Tensor(Basis2D),
}

impl FieldBasis {
    pub fn n_coeffs(&self) -> usize {
        match self {
            FieldBasis::Constant => 1,
            FieldBasis::Tensor(b) => b.n_coeffs(),
        }
    }

    /// Value of the `idx`-th basis function at a point.
    pub fn fn_value(&self, idx: usize, point: (f64, f64)) -> f64 {
        match self {
            FieldBasis::Constant => 1.0,
            FieldBasis::Tensor(b) => b.fn_value(idx, point),
        }
    }

    pub fn eval(&self, coeffs: &[f64], points: &[(f64, f64)]) -> Result<Vec<f64>> {
        match self {
            FieldBasis::Constant => {
                if coeffs.len() != 1 {
                    return Err(Error::DimensionMismatch(
                        "constant basis takes one coefficient".into(),
                    ));
                }
                Ok(vec![coeffs[0]; points.len()])
            }
            FieldBasis::Tensor(b) => eval_field(b, coeffs, points),
        }
    }

    /// RW2 penalty matrix; `None` for the constant basis (zero penalty).
    pub fn penalty(&self) -> Option<Rw2Penalty> {
        match self {
            FieldBasis::Constant => None,
            FieldBasis::Tensor(b) => Some(rw2_precision(b)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn two_functions_partition_and_neumann() {
        let b = build_basis_1d(2, 0.0, 1.0).unwrap();
        for t in [0.0, 0.1, 0.33, 0.5, 0.77, 1.0] {
            assert_abs_diff_eq!(b.value(0, t) + b.value(1, t), 1.0, epsilon = 1e-12);
        }
        for j in 0..2 {
            assert_abs_diff_eq!(b.deriv1(j, 0.0), 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(b.deriv1(j, 1.0), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn endpoint_derivatives_vanish_finite_difference() {
        // A realistic configuration: 8 functions on a continental longitude span.
        let b = build_basis_1d(8, -130.15, -60.85).unwrap();
        let eps = 1e-6;
        for j in 0..8 {
            let da = (b.value(j, b.a + eps) - b.value(j, b.a)) / eps;
            let db = (b.value(j, b.b) - b.value(j, b.b - eps)) / eps;
            // One-sided differences of a quadratic with zero end slope are O(eps).
            assert!(da.abs() < 1e-5, "left slope {da}");
            assert!(db.abs() < 1e-5, "right slope {db}");
            let central = (b.value(j, b.a + 2.0 * eps) - b.value(j, b.a)) / (2.0 * eps)
                - b.deriv1(j, b.a + eps);
            assert!(central.abs() < 1e-8);
        }
    }

    #[test]
    fn partition_of_unity_general() {
        for m in [2, 3, 4, 5, 9] {
            let b = build_basis_1d(m, -1.0, 3.0).unwrap();
            for t in 0..=40 {
                let x = -1.0 + 0.1 * t as f64;
                let s: f64 = (0..m).map(|j| b.value(j, x)).sum();
                assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
                let d: f64 = (0..m).map(|j| b.deriv1(j, x)).sum();
                assert_abs_diff_eq!(d, 0.0, epsilon = 1e-10);
            }
        }
    }

    /// Adaptive-refinement quadrature oracle, independent of the Gauss rule
    /// used by `gram_matrices`: composite Simpson on a fine dyadic grid.
    fn simpson_oracle(f: impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
        let n = 1 << 14;
        let h = (b - a) / n as f64;
        let mut acc = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(a + i as f64 * h);
        }
        acc * h / 3.0
    }

    #[test]
    fn gram_matrices_match_quadrature_oracle() {
        let b = build_basis_1d(4, 0.5, 2.5).unwrap();
        let grams = gram_matrices(&b);
        for i in 0..4 {
            for j in 0..4 {
                let o0 = simpson_oracle(|x| b.value(i, x) * b.value(j, x), b.a, b.b);
                let o1 = simpson_oracle(|x| b.deriv1(i, x) * b.deriv1(j, x), b.a, b.b);
                assert_abs_diff_eq!(grams[0][(i, j)], o0, epsilon = 1e-10);
                assert_abs_diff_eq!(grams[1][(i, j)], o1, epsilon = 1e-8);
            }
        }
        // M0 row sums equal the integral of g_i (partition of unity).
        for i in 0..4 {
            let row_sum: f64 = (0..4).map(|j| grams[0][(i, j)]).sum();
            let integral = simpson_oracle(|x| b.value(i, x), b.a, b.b);
            assert_abs_diff_eq!(row_sum, integral, epsilon = 1e-10);
        }
        // M2 annihilates constants.
        for i in 0..4 {
            let s: f64 = (0..4).map(|j| grams[2][(i, j)]).sum();
            assert_abs_diff_eq!(s, 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn eval_field_partition_of_unity_and_oracle() {
        let basis = Basis2D {
            bx: build_basis_1d(3, 0.0, 2.0).unwrap(),
            by: build_basis_1d(4, -1.0, 1.0).unwrap(),
        };
        let pts = vec![(0.3, -0.4), (1.9, 0.9), (0.0, -1.0), (2.0, 1.0)];
        let ones = vec![1.0; basis.n_coeffs()];
        for v in eval_field(&basis, &ones, &pts).unwrap() {
            assert_abs_diff_eq!(v, 1.0, epsilon = 1e-12);
        }
        let zeros = vec![0.0; basis.n_coeffs()];
        for v in eval_field(&basis, &zeros, &pts).unwrap() {
            assert_eq!(v, 0.0);
        }
        // Direct double-sum oracle.
        let coeffs: Vec<f64> = (0..basis.n_coeffs()).map(|c| (c as f64).sin()).collect();
        let vals = eval_field(&basis, &coeffs, &pts).unwrap();
        for (p, v) in pts.iter().zip(vals.iter()) {
            let mut direct = 0.0;
            for i in 0..3 {
                for j in 0..4 {
                    direct += coeffs[i * 4 + j] * basis.bx.value(i, p.0) * basis.by.value(j, p.1);
                }
            }
            assert_abs_diff_eq!(direct, *v, epsilon = 1e-12);
        }
        assert!(eval_field(&basis, &[1.0], &pts).is_err());
    }

    #[test]
    fn rw2_null_space_and_rank() {
        let basis = Basis2D {
            bx: build_basis_1d(3, 0.0, 1.0).unwrap(),
            by: build_basis_1d(3, 0.0, 1.0).unwrap(),
        };
        let q = rw2_precision(&basis).matrix;
        let n = q.nrows();
        let ones = nalgebra::DVector::from_element(n, 1.0);
        let r = &q * &ones;
        assert!(r.amax() < 1e-10, "Q_rw2 * 1 = {r}");
        let eig = q.clone().symmetric_eigen();
        let max_ev = eig.eigenvalues.amax();
        let near_zero = eig
            .eigenvalues
            .iter()
            .filter(|&&e| e.abs() <= 1e-10 * max_ev)
            .count();
        assert_eq!(near_zero, 1, "rank must be kl - 1");
        assert!(eig.eigenvalues.iter().all(|&e| e > -1e-10 * max_ev));
    }

    #[test]
    fn rw2_matches_laplacian_quadrature_2x2() {
        // Brute-force <Delta f_ij, Delta f_kl> by 2-D Simpson quadrature.
        let basis = Basis2D {
            bx: build_basis_1d(2, 0.0, 1.0).unwrap(),
            by: build_basis_1d(2, 0.0, 1.0).unwrap(),
        };
        let q = rw2_precision(&basis).matrix;
        let n = 256;
        let h = 1.0 / n as f64;
        let lap = |c: usize, x: f64, y: f64| {
            let (i, j) = (c / 2, c % 2);
            basis.bx.deriv2(i, x) * basis.by.value(j, y)
                + basis.bx.value(i, x) * basis.by.deriv2(j, y)
        };
        for a in 0..4 {
            for b in 0..4 {
                let mut acc = 0.0;
                for ix in 0..n {
                    for iy in 0..n {
                        let x = (ix as f64 + 0.5) * h;
                        let y = (iy as f64 + 0.5) * h;
                        acc += lap(a, x, y) * lap(b, x, y);
                    }
                }
                acc *= h * h;
                assert_abs_diff_eq!(q[(a, b)], acc, epsilon = 1e-4);
            }
        }
    }

    proptest! {
        #[test]
        fn rw2_quadratic_form_invariant_to_constant_shift(
            seed in 0u64..1000,
            c in -5.0f64..5.0,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let basis = Basis2D {
                bx: build_basis_1d(3, 0.0, 1.0).unwrap(),
                by: build_basis_1d(2, 0.0, 1.0).unwrap(),
            };
            let q = rw2_precision(&basis).matrix;
            let n = q.nrows();
            let alpha = nalgebra::DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let shifted = &alpha + nalgebra::DVector::from_element(n, c);
            let f0 = (alpha.transpose() * &q * &alpha)[(0, 0)];
            let f1 = (shifted.transpose() * &q * &shifted)[(0, 0)];
            prop_assert!((f0 - f1).abs() < 1e-8 * (1.0 + f0.abs()));
        }
    }
}
