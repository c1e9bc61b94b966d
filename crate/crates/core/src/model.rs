//! The hierarchical observation model and its integrated penalized
//! log-likelihood. Observations are `y = X beta + E u + noise`, with `u`
//! the discretized field (one block per replicate), `beta` optional fixed
//! effects, and independent Gaussian noise whose precision can differ
//! between regions. The latent vector `z = (u_1, .., u_T, beta)` is
//! integrated out analytically, leaving a likelihood in the covariance
//! parameters alone, maximized by L-BFGS with the analytic gradient.
//!
//! The gradient needs traces `Tr[(Q^-1 - Q_C^-1) dQ]`, which only touch
//! inverse entries on the sparsity pattern of `dQ`; these come from the
//! Takahashi partial inverse of each factor. Fixed effects are ordered
//! after the field block and pinned last in the fill-reducing permutation
//! so the needed cross entries always lie on the factor pattern.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::basis::FieldBasis;
use crate::error::{Error, Result};
use crate::geometry::{selection_matrix, Grid};
use crate::opt::{lbfgs, LbfgsOptions};
use crate::sparse::{analyze, factorize, CholeskyFactor, PartialInverse, SparseSym, Symbolic};
use crate::spde::{
    assemble_a, assemble_dq, assemble_q, eval_field_derivatives, eval_spde_fields, NonStatParams,
    SpdeOperator,
};

/// Observed data: point locations, responses, optional covariates, and the
/// replicate and nugget-region index of every observation.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub locations: Vec<(f64, f64)>,
    pub y: Vec<f64>,
    /// Row-major N x p covariate matrix; `None` means p = 0.
    pub x: Option<Vec<Vec<f64>>>,
    pub replicate: Vec<usize>,
    pub region: Vec<usize>,
    pub n_replicates: usize,
    pub n_regions: usize,
}

impl Dataset {
    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.x.as_ref().map_or(0, |x| x.first().map_or(0, Vec::len))
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.y.len();
        if self.locations.len() != n || self.replicate.len() != n || self.region.len() != n {
            return Err(Error::DimensionMismatch(
                "locations, y, replicate, region must have equal length".into(),
            ));
        }
        if self.n_replicates < 1 || self.n_regions < 1 {
            return Err(Error::InvalidArgument(
                "need at least one replicate and one region".into(),
            ));
        }
        if let Some(x) = &self.x {
            let p = self.n_covariates();
            if x.len() != n || x.iter().any(|r| r.len() != p) {
                return Err(Error::DimensionMismatch("ragged covariate matrix".into()));
            }
        }
        if self.replicate.iter().any(|&t| t >= self.n_replicates) {
            return Err(Error::InvalidArgument("replicate index out of range".into()));
        }
        if self.region.iter().any(|&r| r >= self.n_regions) {
            return Err(Error::InvalidArgument("region index out of range".into()));
        }
        Ok(())
    }
}

/// Fixed model configuration: the grid, the spline basis shared by the
/// four parameter fields, and the pre-selected penalty precisions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    pub grid: Grid,
    pub basis: FieldBasis,
    pub tau: [f64; 4],
    pub tau_beta: f64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.tau.iter().any(|&t| t <= 0.0) || self.tau_beta <= 0.0 {
            return Err(Error::InvalidArgument(
                "penalty precisions must be strictly positive".into(),
            ));
        }
        Ok(())
    }
}

/// Assembled Gaussian system for fixed covariance parameters: the prior
/// field precision `Q`, the conditional precision blocks `Q_C`, and the
/// posterior mean of the latent vector. Replicate blocks with identical
/// nugget diagonals share one numeric factorization.
pub struct LatentSystem {
    pub n_cells: usize,
    pub p: usize,
    pub n_replicates: usize,
    pub q: SparseSym,
    pub q_factor: CholeskyFactor,
    /// Unique conditional blocks and their factors. With covariates the
    /// single block has size `n_cells + p`; otherwise blocks have size
    /// `n_cells`.
    pub qc_mats: Vec<SparseSym>,
    pub qc_factors: Vec<CholeskyFactor>,
    /// Replicate index to unique block index.
    pub rep_block: Vec<usize>,
    /// Posterior mean per replicate; with covariates the single entry has
    /// the `beta` coefficients appended after the cells.
    pub mu: Vec<Vec<f64>>,
    /// Per-observation nugget precision, containing cell, and residual
    /// `y - S mu`.
    pub obs_d: Vec<f64>,
    pub obs_cell: Vec<usize>,
    pub resid: Vec<f64>,
    /// Observation count per region.
    pub region_count: Vec<usize>,
    pub log_det_qz: f64,
    pub log_det_qc: f64,
}

fn dedupe_key(w: &[f64]) -> Vec<u64> {
    w.iter().map(|v| v.to_bits()).collect()
}

/// Builds the latent Gaussian system at the given parameters.
pub fn build_latent_system(
    spec: &ModelSpec,
    params: &NonStatParams,
    dataset: &Dataset,
) -> Result<LatentSystem> {
    spec.validate()?;
    dataset.validate()?;
    if params.n_coeffs() != spec.basis.n_coeffs() {
        return Err(Error::DimensionMismatch(
            "parameter count does not match basis".into(),
        ));
    }
    if params.n_regions() != dataset.n_regions {
        return Err(Error::DimensionMismatch(
            "nugget parameter count does not match dataset regions".into(),
        ));
    }
    let p = dataset.n_covariates();
    let t_rep = dataset.n_replicates;
    if p > 0 && t_rep > 1 {
        return Err(Error::UnsupportedConfiguration(
            "covariates are only supported with a single replicate".into(),
        ));
    }

    let grid = &spec.grid;
    let m = grid.n_cells();
    let fields = eval_spde_fields(params, &spec.basis, grid)?;
    let a = assemble_a(&fields, grid);
    let q = assemble_q(&a, grid);
    let q_sym = Arc::new(analyze(&q, 0)?);
    let q_factor = factorize(&q, &q_sym)?;

    let tau_noise: Vec<f64> = params.log_tau_noise.iter().map(|&l| l.exp()).collect();
    let sel = selection_matrix(grid, &dataset.locations)?;
    let obs_d: Vec<f64> = dataset.region.iter().map(|&r| tau_noise[r]).collect();
    let mut region_count = vec![0usize; dataset.n_regions];
    for &r in &dataset.region {
        region_count[r] += 1;
    }

    let q_triplets: Vec<(usize, usize, f64)> = q.iter_entries().collect();

    let mut qc_mats = Vec::new();
    let mut qc_factors: Vec<CholeskyFactor> = Vec::new();
    let mut rep_block = vec![0usize; t_rep];
    let mut mu: Vec<Vec<f64>> = Vec::with_capacity(t_rep);
    let mut log_det_qc = 0.0;

    if p > 0 {
        // Single block of size m + p with beta ordered last.
        let x = dataset.x.as_ref().unwrap();
        let mut trip = q_triplets.clone();
        let mut rhs = vec![0.0; m + p];
        for (i, &cell) in sel.cells.iter().enumerate() {
            let d = obs_d[i];
            trip.push((cell, cell, d));
            for k in 0..p {
                trip.push((cell, m + k, d * x[i][k]));
                trip.push((m + k, cell, d * x[i][k]));
                for l in 0..p {
                    trip.push((m + k, m + l, d * x[i][k] * x[i][l]));
                }
                rhs[m + k] += d * x[i][k] * dataset.y[i];
            }
            rhs[cell] += d * dataset.y[i];
        }
        for k in 0..p {
            trip.push((m + k, m + k, spec.tau_beta));
        }
        let qc = SparseSym::from_triplets(m + p, &trip);
        let qc_sym = Arc::new(analyze(&qc, p)?);
        let factor = factorize(&qc, &qc_sym)?;
        log_det_qc += factor.log_det;
        mu.push(factor.solve(&rhs));
        qc_mats.push(qc);
        qc_factors.push(factor);
    } else {
        // Per-replicate blocks Q + diag(w_t), deduplicated on w_t.
        let mut weights = vec![vec![0.0f64; m]; t_rep];
        let mut rhs = vec![vec![0.0f64; m]; t_rep];
        for (i, &cell) in sel.cells.iter().enumerate() {
            let t = dataset.replicate[i];
            weights[t][cell] += obs_d[i];
            rhs[t][cell] += obs_d[i] * dataset.y[i];
        }
        let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
        for t in 0..t_rep {
            let key = dedupe_key(&weights[t]);
            let block = match seen.get(&key) {
                Some(&b) => b,
                None => {
                    let mut trip = q_triplets.clone();
                    for (c, &w) in weights[t].iter().enumerate() {
                        if w != 0.0 {
                            trip.push((c, c, w));
                        }
                    }
                    let qc = SparseSym::from_triplets(m, &trip);
                    let factor = factorize(&qc, &q_sym)?;
                    qc_mats.push(qc);
                    qc_factors.push(factor);
                    let b = qc_factors.len() - 1;
                    seen.insert(key, b);
                    b
                }
            };
            rep_block[t] = block;
            log_det_qc += qc_factors[block].log_det;
            mu.push(qc_factors[block].solve(&rhs[t]));
        }
    }

    let x_opt = dataset.x.as_ref();
    let resid: Vec<f64> = (0..dataset.n_obs())
        .map(|i| {
            let t = dataset.replicate[i];
            let mut fitted = mu[t][sel.cells[i]];
            if let Some(x) = x_opt {
                for k in 0..p {
                    fitted += x[i][k] * mu[t][m + k];
                }
            }
            dataset.y[i] - fitted
        })
        .collect();

    let log_det_qz = t_rep as f64 * q_factor.log_det + p as f64 * spec.tau_beta.ln();

    Ok(LatentSystem {
        n_cells: m,
        p,
        n_replicates: t_rep,
        q,
        q_factor,
        qc_mats,
        qc_factors,
        rep_block,
        mu,
        obs_d,
        obs_cell: sel.cells,
        resid,
        region_count,
        log_det_qz,
        log_det_qc,
    })
}

impl LatentSystem {
    /// `mu^T Q_z mu` summed over replicates, including the fixed-effect
    /// penalty block.
    fn quad_prior(&self, tau_beta: f64) -> f64 {
        let mut s = 0.0;
        for mu_t in &self.mu {
            s += self.q.quadratic_form(&mu_t[..self.n_cells]);
            for &b in &mu_t[self.n_cells..] {
                s += tau_beta * b * b;
            }
        }
        s
    }

    /// `(y - S mu)^T D (y - S mu)`.
    fn quad_noise(&self) -> f64 {
        self.resid
            .iter()
            .zip(&self.obs_d)
            .map(|(&r, &d)| d * r * r)
            .sum()
    }
}

fn penalty_term(spec: &ModelSpec, params: &NonStatParams) -> f64 {
    match spec.basis.penalty() {
        None => 0.0,
        Some(pen) => {
            let mut s = 0.0;
            for (i, alpha) in params.alpha.iter().enumerate() {
                let a = nalgebra::DVector::from_column_slice(alpha);
                s += spec.tau[i] * (&pen.matrix * &a).dot(&a);
            }
            0.5 * s
        }
    }
}

fn data_terms(spec: &ModelSpec, params: &NonStatParams, sys: &LatentSystem) -> f64 {
    let region_logdet: f64 = sys
        .region_count
        .iter()
        .zip(&params.log_tau_noise)
        .map(|(&n, &lt)| n as f64 * lt)
        .sum();
    0.5 * (sys.log_det_qz + region_logdet - sys.log_det_qc)
        - 0.5 * sys.quad_prior(spec.tau_beta)
        - 0.5 * sys.quad_noise()
}

/// The integrated penalized log-likelihood, up to an additive constant
/// that does not depend on the parameters.
pub fn penalized_loglik(spec: &ModelSpec, params: &NonStatParams, dataset: &Dataset) -> Result<f64> {
    let sys = build_latent_system(spec, params, dataset)?;
    Ok(-penalty_term(spec, params) + data_terms(spec, params, &sys))
}

/// The exact log marginal density of the data given the parameters,
/// constants included.
pub fn log_marginal_density(
    spec: &ModelSpec,
    params: &NonStatParams,
    dataset: &Dataset,
) -> Result<f64> {
    let sys = build_latent_system(spec, params, dataset)?;
    let n = dataset.n_obs() as f64;
    Ok(data_terms(spec, params, &sys) - 0.5 * n * (2.0 * std::f64::consts::PI).ln())
}

fn gradient_from_system(
    spec: &ModelSpec,
    params: &NonStatParams,
    dataset: &Dataset,
    sys: &LatentSystem,
) -> Result<Vec<f64>> {
    let grid = &spec.grid;
    let m = sys.n_cells;
    let nc = params.n_coeffs();
    let mut grad = vec![0.0; params.n_params()];

    let fields = eval_spde_fields(params, &spec.basis, grid)?;
    let a = assemble_a(&fields, grid);

    let z_prior = sys.q_factor.partial_inverse();
    let z_blocks: Vec<PartialInverse> =
        sys.qc_factors.iter().map(|f| f.partial_inverse()).collect();
    // How many replicates use each unique block.
    let mut block_mult = vec![0.0f64; sys.qc_factors.len()];
    for &b in &sys.rep_block {
        block_mult[b] += 1.0;
    }

    let penalty = spec.basis.penalty();
    for which in 0..4 * nc {
        let df = eval_field_derivatives(&fields, &spec.basis, grid, which)?;
        let da: SpdeOperator = assemble_a(&df, grid);
        let dq = assemble_dq(&a, &da, grid);

        let mut g = sys.n_replicates as f64 * 0.5 * z_prior.trace_product(&dq);
        for (z, &mult) in z_blocks.iter().zip(&block_mult) {
            g -= 0.5 * mult * z.trace_product(&dq);
        }
        for mu_t in &sys.mu {
            g -= 0.5 * dq.quadratic_form(&mu_t[..m]);
        }
        if let Some(pen) = &penalty {
            let (func, _) = (which / nc, which % nc);
            let alpha = nalgebra::DVector::from_column_slice(&params.alpha[func]);
            g -= spec.tau[func] * (pen.matrix.row(which % nc) * &alpha)[0];
        }
        grad[which] = g;
    }

    // Nugget parameters: per region r, with tau_r = exp(log tau_r),
    //   N_r/2 - (tau_r/2) Tr[Q_C^-1 S_r^T S_r] - (tau_r/2) ||resid_r||^2.
    let tau_noise: Vec<f64> = params.log_tau_noise.iter().map(|&l| l.exp()).collect();
    let x_opt = dataset.x.as_ref();
    let mut trace_r = vec![0.0f64; dataset.n_regions];
    let mut rss_r = vec![0.0f64; dataset.n_regions];
    for i in 0..dataset.n_obs() {
        let r = dataset.region[i];
        let t = dataset.replicate[i];
        let z = &z_blocks[sys.rep_block[t]];
        let cell = sys.obs_cell[i];
        let mut sqs = z.entry(cell, cell).unwrap_or(0.0);
        if let Some(x) = x_opt {
            for k in 0..sys.p {
                let cross = z.entry(cell, m + k).unwrap_or(0.0);
                sqs += 2.0 * x[i][k] * cross;
                for l in 0..sys.p {
                    sqs += x[i][k] * x[i][l] * z.entry(m + k, m + l).unwrap_or(0.0);
                }
            }
        }
        trace_r[r] += sqs;
        rss_r[r] += sys.resid[i] * sys.resid[i];
    }
    for r in 0..dataset.n_regions {
        grad[4 * nc + r] = 0.5 * sys.region_count[r] as f64
            - 0.5 * tau_noise[r] * trace_r[r]
            - 0.5 * tau_noise[r] * rss_r[r];
    }
    Ok(grad)
}

/// Analytic gradient of the penalized log-likelihood with respect to the
/// flat parameter vector.
pub fn gradient(spec: &ModelSpec, params: &NonStatParams, dataset: &Dataset) -> Result<Vec<f64>> {
    let sys = build_latent_system(spec, params, dataset)?;
    gradient_from_system(spec, params, dataset, &sys)
}

/// Value and gradient in one system build.
pub fn loglik_and_gradient(
    spec: &ModelSpec,
    params: &NonStatParams,
    dataset: &Dataset,
) -> Result<(f64, Vec<f64>)> {
    let sys = build_latent_system(spec, params, dataset)?;
    let f = -penalty_term(spec, params) + data_terms(spec, params, &sys);
    let g = gradient_from_system(spec, params, dataset, &sys)?;
    Ok((f, g))
}

/// Result of a maximum-likelihood fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub params: NonStatParams,
    pub loglik: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Approximate standard errors from the observed information matrix;
    /// only computed for the stationary model.
    pub std_errors: Option<Vec<f64>>,
}

fn default_stationary_init(spec: &ModelSpec, dataset: &Dataset) -> NonStatParams {
    // Range about a quarter of the domain diagonal, isotropic, nugget
    // variance about a tenth of the sample variance.
    let dx = spec.grid.x_max - spec.grid.x_min;
    let dy = spec.grid.y_max - spec.grid.y_min;
    let diag = (dx * dx + dy * dy).sqrt();
    let kappa = 8.0f64.sqrt() / (0.25 * diag);
    let n = dataset.n_obs();
    let var = if n > 1 {
        let mean = dataset.y.iter().sum::<f64>() / n as f64;
        dataset.y.iter().map(|&v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        1.0
    };
    let log_tau = (10.0 / var.max(1e-12)).ln();
    // v = 0 is a stationary point of the likelihood (H is quadratic in v),
    // so the anisotropy vector must start slightly off the origin.
    NonStatParams::stationary(
        2.0 * kappa.ln(),
        0.0,
        0.1,
        0.1,
        vec![log_tau; dataset.n_regions],
    )
}

fn run_lbfgs(
    spec: &ModelSpec,
    dataset: &Dataset,
    init: &NonStatParams,
) -> (NonStatParams, crate::opt::OptResult) {
    let nc = spec.basis.n_coeffs();
    let nr = dataset.n_regions;
    let theta0 = init.to_flat();
    let res = lbfgs(&theta0, &LbfgsOptions::default(), |theta| {
        match NonStatParams::from_flat(theta, nc, nr)
            .and_then(|p| loglik_and_gradient(spec, &p, dataset))
        {
            Ok((f, g)) => (-f, g.iter().map(|&v| -v).collect()),
            Err(_) => (f64::INFINITY, vec![0.0; theta.len()]),
        }
    });
    let params = NonStatParams::from_flat(&res.x, nc, nr).expect("optimizer preserves dimensions");
    (params, res)
}

/// Maximizes the penalized log-likelihood. Without an explicit starting
/// point, a stationary model is fitted first and its optimum broadcast to
/// the non-stationary coefficients.
pub fn fit(spec: &ModelSpec, dataset: &Dataset, init: Option<NonStatParams>) -> Result<FitResult> {
    spec.validate()?;
    dataset.validate()?;
    let stationary = matches!(spec.basis, FieldBasis::Constant);

    let start = match init {
        Some(p) => p,
        None => {
            let guess = default_stationary_init(spec, dataset);
            if stationary {
                guess
            } else {
                let stat_spec = ModelSpec {
                    grid: spec.grid.clone(),
                    basis: FieldBasis::Constant,
                    tau: spec.tau,
                    tau_beta: spec.tau_beta,
                };
                let (stat_params, _) = run_lbfgs(&stat_spec, dataset, &guess);
                let nc = spec.basis.n_coeffs();
                NonStatParams {
                    alpha: std::array::from_fn(|i| vec![stat_params.alpha[i][0]; nc]),
                    log_tau_noise: stat_params.log_tau_noise,
                }
            }
        }
    };

    let (params, res) = run_lbfgs(spec, dataset, &start);
    let std_errors = if stationary {
        observed_information_se(spec, &params, dataset).ok()
    } else {
        None
    };
    Ok(FitResult {
        params,
        loglik: -res.f,
        grad_norm: res.grad_norm,
        iterations: res.iterations,
        converged: res.converged,
        std_errors,
    })
}

/// Standard errors from a finite-difference Hessian of the log-likelihood
/// (observed information), for the low-dimensional stationary model.
pub fn observed_information_se(
    spec: &ModelSpec,
    params: &NonStatParams,
    dataset: &Dataset,
) -> Result<Vec<f64>> {
    let nc = params.n_coeffs();
    let nr = params.n_regions();
    let theta = params.to_flat();
    let n = theta.len();
    let h = 1e-4;
    let mut hess = nalgebra::DMatrix::zeros(n, n);
    for i in 0..n {
        let mut tp = theta.clone();
        tp[i] += h;
        let gp = gradient(spec, &NonStatParams::from_flat(&tp, nc, nr)?, dataset)?;
        let mut tm = theta.clone();
        tm[i] -= h;
        let gm = gradient(spec, &NonStatParams::from_flat(&tm, nc, nr)?, dataset)?;
        for j in 0..n {
            hess[(i, j)] = (gp[j] - gm[j]) / (2.0 * h);
        }
    }
    // Observed information = -Hessian; symmetrize before inverting.
    let info = -(&hess + hess.transpose()) * 0.5;
    let inv = info
        .try_inverse()
        .ok_or_else(|| Error::InvalidArgument("singular observed information".into()))?;
    Ok((0..n).map(|i| inv[(i, i)].max(0.0).sqrt()).collect())
}

/// Interpretable summary of a stationary fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StationarySummary {
    /// H divided by kappa^2, the matrix controlling the correlation range.
    pub h_over_kappa2: [[f64; 2]; 2],
    /// Implied marginal variance of the field.
    pub sigma2: f64,
    /// Nugget precision per region.
    pub tau_noise: Vec<f64>,
}

pub fn verify_stationary_summary(params: &NonStatParams) -> Result<StationarySummary> {
    if params.n_coeffs() != 1 {
        return Err(Error::InvalidArgument(
            "summary requires a stationary parameter vector".into(),
        ));
    }
    let kappa2 = params.alpha[0][0].exp();
    let gamma = params.alpha[1][0].exp();
    let (vx, vy) = (params.alpha[2][0], params.alpha[3][0]);
    let h = [[gamma + vx * vx, vx * vy], [vx * vy, gamma + vy * vy]];
    let det_h = h[0][0] * h[1][1] - h[0][1] * h[1][0];
    let sigma2 = 1.0 / (4.0 * std::f64::consts::PI * kappa2 * det_h.sqrt());
    Ok(StationarySummary {
        h_over_kappa2: [
            [h[0][0] / kappa2, h[0][1] / kappa2],
            [h[1][0] / kappa2, h[1][1] / kappa2],
        ],
        sigma2,
        tau_noise: params.log_tau_noise.iter().map(|&l| l.exp()).collect(),
    })
}

/// A shared symbolic analysis is threaded through repeated factorizations
/// of the same pattern; exposed for callers that refit on a fixed grid.
pub fn field_precision(spec: &ModelSpec, params: &NonStatParams) -> Result<(SparseSym, Arc<Symbolic>)> {
    let fields = eval_spde_fields(params, &spec.basis, &spec.grid)?;
    let q = assemble_q(&assemble_a(&fields, &spec.grid), &spec.grid);
    let sym = Arc::new(analyze(&q, 0)?);
    Ok((q, sym))
}
