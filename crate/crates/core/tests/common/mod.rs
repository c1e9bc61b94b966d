//! Shared oracles for the integration tests: an independent Bessel K1
//! implementation for Matern correlations, and dense Gaussian likelihood
//! and kriging computations built directly from covariance matrices.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use spdegrf::geometry::selection_matrix;
use spdegrf::model::{Dataset, ModelSpec};
use spdegrf::spde::{assemble_a, assemble_q, eval_spde_fields, NonStatParams};

/// Modified Bessel function K1 via polynomial approximations
/// (Abramowitz & Stegun 9.8.3, 9.8.7, 9.8.8); absolute error below 3e-7.
pub fn bessel_k1(x: f64) -> f64 {
    assert!(x > 0.0, "K1 requires a positive argument");
    if x <= 2.0 {
        let t = x / 3.75;
        let t2 = t * t;
        let i1 = x
            * (0.5
                + t2 * (0.87890594
                    + t2 * (0.51498869
                        + t2 * (0.15084934
                            + t2 * (0.02658733 + t2 * (0.00301532 + t2 * 0.00032411))))));
        let s = x / 2.0;
        let s2 = s * s;
        let series = 1.0
            + s2 * (0.15443144
                + s2 * (-0.67278579
                    + s2 * (-0.18156897
                        + s2 * (-0.01919402 + s2 * (-0.00110404 + s2 * (-0.00004686))))));
        (x * (x / 2.0).ln() * i1 + series) / x
    } else {
        let u = 2.0 / x;
        let poly = 1.25331414
            + u * (0.23498619
                + u * (-0.03655620
                    + u * (0.01504268 + u * (-0.00780353 + u * (0.00325614 + u * (-0.00068245))))));
        poly * (-x).exp() / x.sqrt()
    }
}

/// Matern correlation with smoothness 1 at distance `d` for scale `kappa`.
pub fn matern_nu1_correlation(kappa: f64, d: f64) -> f64 {
    if d == 0.0 {
        1.0
    } else {
        kappa * d * bessel_k1(kappa * d)
    }
}

/// Dense marginal covariance of the observations,
/// `S Q_z^{-1} S^T + D^{-1}`, built by brute force.
pub fn dense_observation_covariance(
    spec: &ModelSpec,
    params: &NonStatParams,
    ds: &Dataset,
) -> DMatrix<f64> {
    let grid = &spec.grid;
    let fields = eval_spde_fields(params, &spec.basis, grid).unwrap();
    let q = assemble_q(&assemble_a(&fields, grid), grid).to_dense();
    let q_inv = q.try_inverse().unwrap();
    let sel = selection_matrix(grid, &ds.locations).unwrap();
    let tau: Vec<f64> = params.log_tau_noise.iter().map(|&l| l.exp()).collect();
    let n = ds.n_obs();
    let p = ds.n_covariates();
    let mut cov = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let mut c = 0.0;
            if ds.replicate[i] == ds.replicate[j] {
                c += q_inv[(sel.cells[i], sel.cells[j])];
            }
            if let Some(x) = &ds.x {
                for k in 0..p {
                    c += x[i][k] * x[j][k] / spec.tau_beta;
                }
            }
            if i == j {
                c += 1.0 / tau[ds.region[i]];
            }
            cov[(i, j)] = c;
        }
    }
    cov
}

/// Dense zero-mean multivariate normal log density.
pub fn dense_mvn_logpdf(cov: &DMatrix<f64>, y: &[f64]) -> f64 {
    let n = y.len();
    let chol = cov.clone().cholesky().expect("oracle covariance SPD");
    let yv = DVector::from_column_slice(y);
    let alpha = chol.solve(&yv);
    let logdet: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    -0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln() - 0.5 * logdet - 0.5 * yv.dot(&alpha)
}

/// Dense log marginal density of the data under the model.
pub fn dense_marginal_oracle(spec: &ModelSpec, params: &NonStatParams, ds: &Dataset) -> f64 {
    dense_mvn_logpdf(&dense_observation_covariance(spec, params, ds), &ds.y)
}

/// Dense conditional Gaussian log density of `y_test` given `y_train` at
/// fixed parameters, from the joint observation covariance.
pub fn dense_conditional_logpdf(
    spec: &ModelSpec,
    params: &NonStatParams,
    train: &Dataset,
    test: &Dataset,
) -> f64 {
    let joint = concat(train, test);
    let cov = dense_observation_covariance(spec, params, &joint);
    let n_tr = train.n_obs();
    let n_te = test.n_obs();
    let c_tt = cov.view((0, 0), (n_tr, n_tr)).into_owned();
    let c_te = cov.view((0, n_tr), (n_tr, n_te)).into_owned();
    let c_ee = cov.view((n_tr, n_tr), (n_te, n_te)).into_owned();
    let chol = c_tt.cholesky().unwrap();
    let y_tr = DVector::from_column_slice(&train.y);
    let mean = c_te.transpose() * chol.solve(&y_tr);
    let cond_cov = c_ee - c_te.transpose() * chol.solve(&c_te);
    let resid: Vec<f64> = test
        .y
        .iter()
        .enumerate()
        .map(|(i, &v)| v - mean[i])
        .collect();
    dense_mvn_logpdf(&cond_cov, &resid)
}

pub fn concat(a: &Dataset, b: &Dataset) -> Dataset {
    let mut x = a.x.clone();
    if let (Some(xs), Some(xb)) = (&mut x, &b.x) {
        xs.extend(xb.iter().cloned());
    }
    Dataset {
        locations: [a.locations.clone(), b.locations.clone()].concat(),
        y: [a.y.clone(), b.y.clone()].concat(),
        x,
        replicate: [a.replicate.clone(), b.replicate.clone()].concat(),
        region: [a.region.clone(), b.region.clone()].concat(),
        n_replicates: a.n_replicates.max(b.n_replicates),
        n_regions: a.n_regions.max(b.n_regions),
    }
}
