//! Everything downstream of a fit: kriging predictions on the grid with
//! latent and observation standard deviations, covariance-structure
//! summaries, proper scoring rules (CRPS, log-predictive score, RMSE),
//! empirical semivariograms, K-fold cross-validation over the penalty
//! precisions, replicate de-trending, and seeded simulation.
//!
//! The holdout log-score is computed as a difference of two exact
//! marginal log densities, log pi(train + test) - log pi(train), at the
//! same fitted parameters; this equals the negative log density of the
//! joint predictive distribution without ever forming a dense conditional
//! covariance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::model::{
    build_latent_system, fit, log_marginal_density, Dataset, FitResult, ModelSpec,
};
use crate::spde::NonStatParams;

/// Predictive mean and standard deviations at every cell center, for one
/// replicate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionGrid {
    pub replicate: usize,
    pub mean: Vec<f64>,
    pub sd_latent: Vec<f64>,
    pub sd_obs: Vec<f64>,
}

/// Marginal standard deviation field and correlation fields with respect
/// to reference cells, describing the prior covariance structure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CovSummary {
    pub marginal_sd: Vec<f64>,
    pub reference_cells: Vec<usize>,
    pub correlations: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreReport {
    pub crps: f64,
    pub log_score: f64,
    pub rmse: f64,
}

/// Binned empirical semivariogram.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Variogram {
    pub bin_centers: Vec<f64>,
    pub semivariance: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Kriging on the grid: posterior mean and standard deviations of the
/// latent surface and of a new observation at each cell center.
/// `covariate_grid` supplies per-cell covariate values and is required
/// exactly when the model has fixed effects. `cell_region` assigns each
/// cell the nugget region used for the observation standard deviation;
/// region 0 everywhere when omitted.
pub fn predict_grid(
    fit: &FitResult,
    spec: &ModelSpec,
    dataset: &Dataset,
    covariate_grid: Option<&[Vec<f64>]>,
    cell_region: Option<&[usize]>,
    replicate: usize,
) -> Result<PredictionGrid> {
    let sys = build_latent_system(spec, &fit.params, dataset)?;
    let m = sys.n_cells;
    let p = sys.p;
    if replicate >= sys.n_replicates {
        return Err(Error::InvalidArgument("replicate index out of range".into()));
    }
    if p > 0 && covariate_grid.is_none() {
        return Err(Error::InvalidArgument(
            "model has fixed effects; a covariate grid is required".into(),
        ));
    }
    if let Some(cg) = covariate_grid {
        if cg.len() != m || cg.iter().any(|r| r.len() != p) {
            return Err(Error::DimensionMismatch(
                "covariate grid must have one length-p row per cell".into(),
            ));
        }
    }
    if let Some(cr) = cell_region {
        if cr.len() != m || cr.iter().any(|&r| r >= fit.params.n_regions()) {
            return Err(Error::InvalidArgument("invalid cell region assignment".into()));
        }
    }

    let block = sys.rep_block[replicate];
    let z = sys.qc_factors[block].partial_inverse();
    let mu = &sys.mu[if p > 0 { 0 } else { replicate }];
    let tau: Vec<f64> = fit.params.log_tau_noise.iter().map(|&l| l.exp()).collect();

    let mut mean = vec![0.0; m];
    let mut sd_latent = vec![0.0; m];
    let mut sd_obs = vec![0.0; m];
    for c in 0..m {
        let mut mc = mu[c];
        let mut var = z.entry(c, c).unwrap_or(0.0);
        if let Some(cg) = covariate_grid {
            for k in 0..p {
                mc += cg[c][k] * mu[m + k];
                var += 2.0 * cg[c][k] * z.entry(c, m + k).unwrap_or(0.0);
                for l in 0..p {
                    var += cg[c][k] * cg[c][l] * z.entry(m + k, m + l).unwrap_or(0.0);
                }
            }
        }
        let region = cell_region.map_or(0, |cr| cr[c]);
        mean[c] = mc;
        sd_latent[c] = var.max(0.0).sqrt();
        sd_obs[c] = (var.max(0.0) + 1.0 / tau[region]).sqrt();
    }
    Ok(PredictionGrid {
        replicate,
        mean,
        sd_latent,
        sd_obs,
    })
}

/// Marginal standard deviations of the field and correlation fields with
/// respect to the given reference cells, from the prior precision.
pub fn cov_summary(
    spec: &ModelSpec,
    params: &NonStatParams,
    reference_cells: &[usize],
) -> Result<CovSummary> {
    let (q, sym) = crate::model::field_precision(spec, params)?;
    let factor = crate::sparse::factorize(&q, &sym)?;
    let z = factor.partial_inverse();
    let diag = z.diag();
    let m = q.n;
    let mut correlations = Vec::with_capacity(reference_cells.len());
    for &r in reference_cells {
        if r >= m {
            return Err(Error::InvalidArgument("reference cell out of range".into()));
        }
        let mut e = vec![0.0; m];
        e[r] = 1.0;
        let col = factor.solve(&e);
        let corr: Vec<f64> = (0..m)
            .map(|i| col[i] / (col[r] * diag[i]).sqrt())
            .collect();
        correlations.push(corr);
    }
    Ok(CovSummary {
        marginal_sd: diag.iter().map(|&v| v.sqrt()).collect(),
        reference_cells: reference_cells.to_vec(),
        correlations,
    })
}

/// Closed-form CRPS of a Gaussian predictive distribution.
pub fn crps_gaussian(mu: f64, sigma: f64, y: f64) -> Result<f64> {
    if sigma <= 0.0 {
        return Err(Error::InvalidArgument(
            "CRPS requires a positive predictive standard deviation".into(),
        ));
    }
    let std = Normal::new(0.0, 1.0).expect("standard normal");
    let z = (y - mu) / sigma;
    Ok(sigma * (z * (2.0 * std.cdf(z) - 1.0) + 2.0 * std.pdf(z) - 1.0 / std::f64::consts::PI.sqrt()))
}

pub fn mean_crps(mu: &[f64], sigma: &[f64], y: &[f64]) -> Result<f64> {
    if mu.len() != y.len() || sigma.len() != y.len() {
        return Err(Error::DimensionMismatch("CRPS input lengths differ".into()));
    }
    if y.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let mut s = 0.0;
    for i in 0..y.len() {
        s += crps_gaussian(mu[i], sigma[i], y[i])?;
    }
    Ok(s / y.len() as f64)
}

fn concat_datasets(train: &Dataset, test: &Dataset) -> Result<Dataset> {
    if train.n_covariates() != test.n_covariates() {
        return Err(Error::DimensionMismatch(
            "train and test covariate dimensions differ".into(),
        ));
    }
    for i in 0..test.n_obs() {
        for j in 0..train.n_obs() {
            if test.locations[i] == train.locations[j] && test.replicate[i] == train.replicate[j] {
                return Err(Error::InvalidArgument(
                    "train and test sets overlap".into(),
                ));
            }
        }
    }
    let mut x = train.x.clone();
    if let (Some(xs), Some(xt)) = (&mut x, &test.x) {
        xs.extend(xt.iter().cloned());
    }
    Ok(Dataset {
        locations: [train.locations.clone(), test.locations.clone()].concat(),
        y: [train.y.clone(), test.y.clone()].concat(),
        x,
        replicate: [train.replicate.clone(), test.replicate.clone()].concat(),
        region: [train.region.clone(), test.region.clone()].concat(),
        n_replicates: train.n_replicates.max(test.n_replicates),
        n_regions: train.n_regions.max(test.n_regions),
    })
}

/// Negative log density of the held-out data under the joint predictive
/// distribution at the fitted parameters.
pub fn log_score_holdout(
    fit: &FitResult,
    spec: &ModelSpec,
    train: &Dataset,
    test: &Dataset,
) -> Result<f64> {
    if test.n_obs() == 0 {
        return Ok(0.0);
    }
    let joint = concat_datasets(train, test)?;
    let l_joint = log_marginal_density(spec, &fit.params, &joint)?;
    let l_train = log_marginal_density(spec, &fit.params, train)?;
    Ok(-(l_joint - l_train))
}

pub fn rmse(predictions: &[f64], y_test: &[f64]) -> Result<f64> {
    if predictions.len() != y_test.len() {
        return Err(Error::DimensionMismatch("RMSE input lengths differ".into()));
    }
    if y_test.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let ss: f64 = predictions
        .iter()
        .zip(y_test)
        .map(|(&p, &y)| (p - y) * (p - y))
        .sum();
    Ok((ss / y_test.len() as f64).sqrt())
}

/// Empirical semivariogram over observation pairs within the same
/// replicate. `region_filter` keeps only stations on one side of a
/// longitude threshold: `(threshold, true)` keeps the west side.
pub fn variogram(
    dataset: &Dataset,
    bin_width: f64,
    max_dist: f64,
    region_filter: Option<(f64, bool)>,
) -> Result<Variogram> {
    if bin_width <= 0.0 || max_dist <= 0.0 {
        return Err(Error::InvalidArgument("bins must have positive extent".into()));
    }
    let keep: Vec<usize> = (0..dataset.n_obs())
        .filter(|&i| match region_filter {
            None => true,
            Some((thr, west)) => {
                if west {
                    dataset.locations[i].0 < thr
                } else {
                    dataset.locations[i].0 >= thr
                }
            }
        })
        .collect();
    if keep.len() < 2 {
        return Err(Error::InvalidArgument(
            "variogram needs at least two stations after filtering".into(),
        ));
    }
    let n_bins = (max_dist / bin_width).ceil() as usize;
    let mut sums = vec![0.0f64; n_bins];
    let mut counts = vec![0usize; n_bins];
    for (a, &i) in keep.iter().enumerate() {
        for &j in &keep[a + 1..] {
            if dataset.replicate[i] != dataset.replicate[j] {
                continue;
            }
            let (xi, yi) = dataset.locations[i];
            let (xj, yj) = dataset.locations[j];
            let d = ((xi - xj).powi(2) + (yi - yj).powi(2)).sqrt();
            if d >= max_dist {
                continue;
            }
            let b = (d / bin_width) as usize;
            sums[b] += (dataset.y[i] - dataset.y[j]).powi(2);
            counts[b] += 1;
        }
    }
    Ok(Variogram {
        bin_centers: (0..n_bins).map(|b| (b as f64 + 0.5) * bin_width).collect(),
        semivariance: (0..n_bins)
            .map(|b| {
                if counts[b] > 0 {
                    sums[b] / (2.0 * counts[b] as f64)
                } else {
                    f64::NAN
                }
            })
            .collect(),
        counts,
    })
}

/// Score of one candidate in a penalty search.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvEntry {
    pub log_tau: [f64; 4],
    pub score: f64,
}

/// Seeded K-fold cross-validation over candidate penalty 4-tuples,
/// scored by the mean holdout log-score; returns the winner and the full
/// table. Candidates run in parallel.
pub fn cv_penalty_search(
    spec_template: &ModelSpec,
    dataset: &Dataset,
    candidates: &[[f64; 4]],
    folds: usize,
    seed: u64,
) -> Result<([f64; 4], Vec<CvEntry>)> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("empty candidate grid".into()));
    }
    if folds < 2 {
        return Err(Error::InvalidArgument("need at least two folds".into()));
    }
    let n = dataset.n_obs();
    if n < folds {
        return Err(Error::InvalidArgument("fewer observations than folds".into()));
    }
    // Seeded random partition into folds.
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let fold_of: Vec<usize> = {
        let mut f = vec![0usize; n];
        for (pos, &i) in order.iter().enumerate() {
            f[i] = pos % folds;
        }
        f
    };
    let subset = |pred: &dyn Fn(usize) -> bool| -> Dataset {
        let idx: Vec<usize> = (0..n).filter(|&i| pred(i)).collect();
        Dataset {
            locations: idx.iter().map(|&i| dataset.locations[i]).collect(),
            y: idx.iter().map(|&i| dataset.y[i]).collect(),
            x: dataset
                .x
                .as_ref()
                .map(|x| idx.iter().map(|&i| x[i].clone()).collect()),
            replicate: idx.iter().map(|&i| dataset.replicate[i]).collect(),
            region: idx.iter().map(|&i| dataset.region[i]).collect(),
            n_replicates: dataset.n_replicates,
            n_regions: dataset.n_regions,
        }
    };

    let table: Result<Vec<CvEntry>> = candidates
        .par_iter()
        .map(|&log_tau| {
            let spec = ModelSpec {
                tau: [
                    log_tau[0].exp(),
                    log_tau[1].exp(),
                    log_tau[2].exp(),
                    log_tau[3].exp(),
                ],
                ..spec_template.clone()
            };
            let scores: Result<Vec<f64>> = (0..folds)
                .into_par_iter()
                .map(|k| {
                    let train = subset(&|i| fold_of[i] != k);
                    let test = subset(&|i| fold_of[i] == k);
                    let res = fit(&spec, &train, None)?;
                    log_score_holdout(&res, &spec, &train, &test)
                })
                .collect();
            let scores = scores?;
            Ok(CvEntry {
                log_tau,
                score: scores.iter().sum::<f64>() / folds as f64,
            })
        })
        .collect();
    let table = table?;
    let best = table
        .iter()
        .min_by(|a, b| a.score.total_cmp(&b.score))
        .expect("non-empty table")
        .log_tau;
    Ok((best, table))
}

/// Removes a common spatial mean from replicated data: fits the given
/// stationary replicate model, averages the per-replicate posterior mean
/// surfaces into one field, and subtracts it from each observation.
pub fn detrend(
    dataset: &Dataset,
    spec_stationary: &ModelSpec,
) -> Result<(Dataset, Vec<f64>, FitResult)> {
    if dataset.n_replicates < 2 {
        return Err(Error::InvalidArgument(
            "de-trending needs at least two replicates".into(),
        ));
    }
    if dataset.n_covariates() > 0 {
        return Err(Error::UnsupportedConfiguration(
            "de-trending is defined for models without fixed effects".into(),
        ));
    }
    let res = fit(spec_stationary, dataset, None)?;
    let sys = build_latent_system(spec_stationary, &res.params, dataset)?;
    let m = sys.n_cells;
    let mut mean_field = vec![0.0; m];
    for mu_t in &sys.mu {
        for c in 0..m {
            mean_field[c] += mu_t[c];
        }
    }
    for v in mean_field.iter_mut() {
        *v /= sys.n_replicates as f64;
    }
    let mut residual = dataset.clone();
    for i in 0..dataset.n_obs() {
        residual.y[i] -= mean_field[sys.obs_cell[i]];
    }
    Ok((residual, mean_field, res))
}

/// Simulates observations from the model: one field draw per replicate
/// plus region noise. Deterministic under the seed.
pub fn simulate_dataset(
    spec: &ModelSpec,
    params_true: &NonStatParams,
    locations: &[(f64, f64)],
    region: &[usize],
    n_replicates: usize,
    seed: u64,
) -> Result<Dataset> {
    if region.len() != locations.len() {
        return Err(Error::DimensionMismatch(
            "one region index per location".into(),
        ));
    }
    let n_regions = params_true.n_regions();
    if region.iter().any(|&r| r >= n_regions) {
        return Err(Error::InvalidArgument("region index out of range".into()));
    }
    let (q, sym) = crate::model::field_precision(spec, params_true)?;
    let factor = crate::sparse::factorize(&q, &sym)?;
    let cells = crate::geometry::selection_matrix(&spec.grid, locations)?.cells;
    let sd_noise: Vec<f64> = params_true
        .log_tau_noise
        .iter()
        .map(|&l| (-0.5 * l).exp())
        .collect();

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut locations_all = Vec::new();
    let mut y = Vec::new();
    let mut replicate = Vec::new();
    let mut region_all = Vec::new();
    for t in 0..n_replicates {
        let z: Vec<f64> = (0..q.n).map(|_| rng.sample(StandardNormal)).collect();
        let u = factor.sample(&z)?;
        for (i, &cell) in cells.iter().enumerate() {
            let eps: f64 = rng.sample(StandardNormal);
            locations_all.push(locations[i]);
            y.push(u[cell] + sd_noise[region[i]] * eps);
            replicate.push(t);
            region_all.push(region[i]);
        }
    }
    Ok(Dataset {
        locations: locations_all,
        y,
        x: None,
        replicate,
        region: region_all,
        n_replicates,
        n_regions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::FieldBasis;
    use crate::geometry::build_grid;
    use approx::assert_abs_diff_eq;
    use proptest::{prop_assert, proptest};

    fn stat_spec(grid: crate::geometry::Grid) -> ModelSpec {
        ModelSpec {
            grid,
            basis: FieldBasis::Constant,
            tau: [1.0; 4],
            tau_beta: 1e-4,
        }
    }

    fn empty_dataset() -> Dataset {
        Dataset {
            locations: vec![],
            y: vec![],
            x: None,
            replicate: vec![],
            region: vec![],
            n_replicates: 1,
            n_regions: 1,
        }
    }

    #[test]
    fn crps_at_center() {
        for sigma in [0.3, 1.0, 4.2] {
            let c = crps_gaussian(1.5, sigma, 1.5).unwrap();
            let expect = sigma
                * (2.0 / (2.0 * std::f64::consts::PI).sqrt() - 1.0 / std::f64::consts::PI.sqrt());
            assert_abs_diff_eq!(c, expect, epsilon = 1e-12);
            assert_abs_diff_eq!(c, 0.23369497725510913 * sigma, epsilon = 1e-10);
        }
    }

    #[test]
    fn crps_matches_quadrature() {
        // Integral definition: CRPS = int (F(x) - 1{x >= y})^2 dx.
        let std = Normal::new(0.0, 1.0).unwrap();
        // The integrand jumps at x = y, so integrate the two smooth
        // pieces separately.
        let simpson = |f: &dyn Fn(f64) -> f64, lo: f64, hi: f64| -> f64 {
            let n = 20000;
            let h = (hi - lo) / n as f64;
            let mut s = f(lo) + f(hi);
            for i in 1..n {
                s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(lo + i as f64 * h);
            }
            s * h / 3.0
        };
        let quad = |mu: f64, sigma: f64, y: f64| -> f64 {
            let lo = mu.min(y) - 12.0 * sigma;
            let hi = mu.max(y) + 12.0 * sigma;
            let cdf = |x: f64| std.cdf((x - mu) / sigma);
            simpson(&|x| cdf(x) * cdf(x), lo, y)
                + simpson(&|x| (cdf(x) - 1.0) * (cdf(x) - 1.0), y, hi)
        };
        let cases = [(0.0, 1.0, 0.7), (1.2, 0.4, -0.5), (-2.0, 3.0, 4.0)];
        for (mu, sigma, y) in cases {
            assert_abs_diff_eq!(
                crps_gaussian(mu, sigma, y).unwrap(),
                quad(mu, sigma, y),
                epsilon = 1e-6
            );
        }
    }

    proptest! {
        #[test]
        fn crps_positive_homogeneity(
            mu in -3.0f64..3.0,
            sigma in 0.1f64..3.0,
            y in -3.0f64..3.0,
            a in 0.1f64..5.0,
        ) {
            let base = crps_gaussian(mu, sigma, y).unwrap();
            let scaled = crps_gaussian(a * mu, a * sigma, a * y).unwrap();
            prop_assert!((scaled - a * base).abs() < 1e-10 * (1.0 + scaled.abs()));
        }
    }

    #[test]
    fn crps_vanishing_sigma_limit() {
        assert!(crps_gaussian(0.5, 1e-12, 0.5).unwrap().abs() < 1e-11);
        assert!(crps_gaussian(0.5, 0.0, 0.5).is_err());
    }

    #[test]
    fn rmse_basics() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(
            rmse(&[1.5, 2.5, 3.5], &[1.0, 2.0, 3.0]).unwrap(),
            0.5,
            epsilon = 1e-14
        );
        assert!(rmse(&[1.0], &[]).is_err());
    }

    #[test]
    fn variogram_trivial_cases() {
        let mut ds = empty_dataset();
        ds.locations = vec![(0.0, 0.0), (1.0, 0.0)];
        ds.y = vec![0.7, 0.7];
        ds.replicate = vec![0, 0];
        ds.region = vec![0, 0];
        let v = variogram(&ds, 2.0, 2.0, None).unwrap();
        assert_eq!(v.counts, vec![1]);
        assert_eq!(v.semivariance, vec![0.0]);

        ds.y = vec![0.0, 2.0];
        let v = variogram(&ds, 2.0, 2.0, None).unwrap();
        assert_abs_diff_eq!(v.semivariance[0], 2.0, epsilon = 1e-14);
    }

    #[test]
    fn variogram_white_noise_flat() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let n = 400;
        let mut ds = empty_dataset();
        for _ in 0..n {
            ds.locations
                .push((rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)));
            let g: f64 = rng.sample(StandardNormal);
            ds.y.push(1.7 * g);
            ds.replicate.push(0);
            ds.region.push(0);
        }
        let v = variogram(&ds, 0.2, 1.0, None).unwrap();
        let var = 1.7 * 1.7;
        for b in 0..v.bin_centers.len() {
            assert!(
                (v.semivariance[b] - var).abs() < 0.35 * var,
                "bin {b}: {} vs {var}",
                v.semivariance[b]
            );
        }
    }

    #[test]
    fn variogram_longitude_filter() {
        let mut ds = empty_dataset();
        ds.locations = vec![(-1.0, 0.0), (-0.5, 0.0), (1.0, 0.0)];
        ds.y = vec![0.0, 1.0, 100.0];
        ds.replicate = vec![0, 0, 0];
        ds.region = vec![0, 0, 0];
        let v = variogram(&ds, 1.0, 3.0, Some((0.0, true))).unwrap();
        assert_eq!(v.counts.iter().sum::<usize>(), 1);
        assert!(variogram(&ds, 1.0, 3.0, Some((-2.0, true))).is_err());
    }

    #[test]
    fn log_score_empty_test_is_zero() {
        let grid = build_grid(0.0, 1.0, 0.0, 1.0, 4, 4).unwrap();
        let spec = stat_spec(grid.clone());
        let mut train = empty_dataset();
        train.locations = vec![(0.5, 0.5)];
        train.y = vec![0.3];
        train.replicate = vec![0];
        train.region = vec![0];
        let res = fit(&spec, &train, Some(NonStatParams::stationary(0.0, 0.0, 0.0, 0.0, vec![0.0]))).unwrap();
        assert_eq!(
            log_score_holdout(&res, &spec, &train, &empty_dataset()).unwrap(),
            0.0
        );
    }

    #[test]
    fn log_score_noise_only_closed_form_and_additivity() {
        // Enormous kappa^2 kills the field; observations are independent
        // noise, so the predictive density factorizes over stations.
        let grid = build_grid(0.0, 1.0, 0.0, 1.0, 4, 4).unwrap();
        let spec = stat_spec(grid.clone());
        let lt = 0.4f64;
        let params = NonStatParams::stationary(22.0, 0.0, 0.0, 0.0, vec![lt]);
        let fitres = FitResult {
            params: params.clone(),
            loglik: 0.0,
            grad_norm: 0.0,
            iterations: 0,
            converged: true,
            std_errors: None,
        };
        let mut train = empty_dataset();
        train.locations = vec![(0.1, 0.1), (0.9, 0.9)];
        train.y = vec![0.5, -0.3];
        train.replicate = vec![0, 0];
        train.region = vec![0, 0];
        let mut test = empty_dataset();
        test.locations = vec![(0.3, 0.6), (0.6, 0.3)];
        test.y = vec![0.2, -0.8];
        test.replicate = vec![0, 0];
        test.region = vec![0, 0];
        let score = log_score_holdout(&fitres, &spec, &train, &test).unwrap();
        let var = (-lt).exp();
        let closed: f64 = test
            .y
            .iter()
            .map(|&v| 0.5 * (2.0 * std::f64::consts::PI * var).ln() + 0.5 * v * v / var)
            .sum();
        assert_abs_diff_eq!(score, closed, epsilon = 1e-6);

        // Additivity over disjoint test subsets in the noise-only model.
        let test_a = Dataset {
            locations: vec![test.locations[0]],
            y: vec![test.y[0]],
            x: None,
            replicate: vec![0],
            region: vec![0],
            n_replicates: 1,
            n_regions: 1,
        };
        let test_b = Dataset {
            locations: vec![test.locations[1]],
            y: vec![test.y[1]],
            x: None,
            replicate: vec![0],
            region: vec![0],
            n_replicates: 1,
            n_regions: 1,
        };
        let sa = log_score_holdout(&fitres, &spec, &train, &test_a).unwrap();
        let sb = log_score_holdout(&fitres, &spec, &train, &test_b).unwrap();
        assert_abs_diff_eq!(score, sa + sb, epsilon = 1e-6);
    }

    #[test]
    fn log_score_rejects_overlap() {
        let grid = build_grid(0.0, 1.0, 0.0, 1.0, 4, 4).unwrap();
        let spec = stat_spec(grid);
        let mut train = empty_dataset();
        train.locations = vec![(0.5, 0.5)];
        train.y = vec![0.3];
        train.replicate = vec![0];
        train.region = vec![0];
        let fitres = FitResult {
            params: NonStatParams::stationary(0.0, 0.0, 0.0, 0.0, vec![0.0]),
            loglik: 0.0,
            grad_norm: 0.0,
            iterations: 0,
            converged: true,
            std_errors: None,
        };
        assert!(log_score_holdout(&fitres, &spec, &train, &train.clone()).is_err());
    }

    #[test]
    fn prediction_matches_dense_kriging_oracle() {
        use nalgebra::{DMatrix, DVector};
        let grid = build_grid(0.0, 1.0, 0.0, 1.0, 5, 4).unwrap();
        let spec = stat_spec(grid.clone());
        let params = NonStatParams::stationary(0.3, 0.0, 0.2, -0.1, vec![0.9]);
        let mut ds = empty_dataset();
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        for _ in 0..12 {
            ds.locations
                .push((rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)));
            ds.y.push(rng.gen_range(-1.0..1.0));
            ds.replicate.push(0);
            ds.region.push(0);
        }
        let fitres = FitResult {
            params: params.clone(),
            loglik: 0.0,
            grad_norm: 0.0,
            iterations: 0,
            converged: true,
            std_errors: None,
        };
        let pred = predict_grid(&fitres, &spec, &ds, None, None, 0).unwrap();

        // Dense oracle: posterior of u given y.
        let (q, _) = crate::model::field_precision(&spec, &params).unwrap();
        let m = q.n;
        let tau = 0.9f64.exp();
        let cells = crate::geometry::selection_matrix(&grid, &ds.locations)
            .unwrap()
            .cells;
        let mut qc = q.to_dense();
        let mut rhs = DVector::zeros(m);
        for (i, &c) in cells.iter().enumerate() {
            qc[(c, c)] += tau;
            rhs[c] += tau * ds.y[i];
        }
        let chol = qc.cholesky().unwrap();
        let mu = chol.solve(&rhs);
        let cov: DMatrix<f64> = chol.inverse();
        for c in 0..m {
            assert_abs_diff_eq!(pred.mean[c], mu[c], epsilon = 1e-8);
            assert_abs_diff_eq!(pred.sd_latent[c], cov[(c, c)].sqrt(), epsilon = 1e-8);
            assert_abs_diff_eq!(
                pred.sd_obs[c],
                (cov[(c, c)] + 1.0 / tau).sqrt(),
                epsilon = 1e-8
            );
        }
    }

    #[test]
    fn no_data_prediction_is_prior() {
        let grid = build_grid(0.0, 1.0, 0.0, 1.0, 5, 4).unwrap();
        let spec = stat_spec(grid.clone());
        let params = NonStatParams::stationary(0.3, 0.0, 0.0, 0.0, vec![0.9]);
        let fitres = FitResult {
            params: params.clone(),
            loglik: 0.0,
            grad_norm: 0.0,
            iterations: 0,
            converged: true,
            std_errors: None,
        };
        let pred = predict_grid(&fitres, &spec, &empty_dataset(), None, None, 0).unwrap();
        let (q, sym) = crate::model::field_precision(&spec, &params).unwrap();
        let diag = crate::sparse::factorize(&q, &sym)
            .unwrap()
            .partial_inverse()
            .diag();
        for c in 0..q.n {
            assert_eq!(pred.mean[c], 0.0);
            assert_abs_diff_eq!(pred.sd_latent[c], diag[c].sqrt(), epsilon = 1e-12);
        }
    }

    #[test]
    fn observed_cell_shrinks_predictive_sd() {
        let grid = build_grid(0.0, 1.0, 0.0, 1.0, 6, 6).unwrap();
        let spec = stat_spec(grid.clone());
        let params = NonStatParams::stationary(0.0, 0.0, 0.0, 0.0, vec![6.0]);
        let mut ds = empty_dataset();
        for _ in 0..20 {
            ds.locations.push((0.42, 0.42));
            ds.y.push(0.5);
            ds.replicate.push(0);
            ds.region.push(0);
        }
        let fitres = FitResult {
            params: params.clone(),
            loglik: 0.0,
            grad_norm: 0.0,
            iterations: 0,
            converged: true,
            std_errors: None,
        };
        let pred = predict_grid(&fitres, &spec, &ds, None, None, 0).unwrap();
        let cell = crate::geometry::locate_cell(&grid, (0.42, 0.42)).unwrap().0;
        let summary = cov_summary(&spec, &params, &[cell]).unwrap();
        assert!(pred.sd_latent[cell] < 0.2 * summary.marginal_sd[cell]);
        for c in 0..grid.n_cells() {
            assert!(pred.sd_obs[c] >= pred.sd_latent[c]);
        }
    }

    #[test]
    fn correlation_field_properties() {
        let grid = build_grid(0.0, 4.0, 0.0, 4.0, 21, 21).unwrap();
        let spec = stat_spec(grid.clone());
        let params = NonStatParams::stationary(1.0, 0.0, 0.0, 0.0, vec![0.0]);
        let center = grid.flat(10, 10);
        let s = cov_summary(&spec, &params, &[center]).unwrap();
        let corr = &s.correlations[0];
        assert_abs_diff_eq!(corr[center], 1.0, epsilon = 1e-12);
        for &v in corr {
            assert!(v.abs() <= 1.0 + 1e-8);
        }
        // Radial symmetry of the isotropic field on the interior.
        let east = grid.flat(10, 13);
        let north = grid.flat(13, 10);
        assert_abs_diff_eq!(corr[east], corr[north], epsilon = 0.02);
    }

    #[test]
    fn simulate_is_deterministic_and_near_noiseless() {
        let grid = build_grid(0.0, 1.0, 0.0, 1.0, 6, 6).unwrap();
        let spec = stat_spec(grid.clone());
        let params = NonStatParams::stationary(0.5, 0.0, 0.0, 0.0, vec![27.6]);
        let locs = vec![(0.2, 0.3), (0.8, 0.5), (0.5, 0.9)];
        let a = simulate_dataset(&spec, &params, &locs, &[0, 0, 0], 2, 42).unwrap();
        let b = simulate_dataset(&spec, &params, &locs, &[0, 0, 0], 2, 42).unwrap();
        assert_eq!(a.y, b.y);
        assert_eq!(a.n_obs(), 6);

        // tau = e^27.6 ~ 1e12: observations equal the field draw.
        let (q, sym) = crate::model::field_precision(&spec, &params).unwrap();
        let factor = crate::sparse::factorize(&q, &sym).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        let z: Vec<f64> = (0..q.n).map(|_| rng.sample(StandardNormal)).collect();
        let u = factor.sample(&z).unwrap();
        let cells = crate::geometry::selection_matrix(&grid, &locs).unwrap().cells;
        for (i, &c) in cells.iter().enumerate() {
            assert_abs_diff_eq!(a.y[i], u[c], epsilon = 1e-4);
        }
    }

    #[test]
    fn simulate_variance_matches_model() {
        let grid = build_grid(0.0, 1.0, 0.0, 1.0, 5, 5).unwrap();
        let spec = stat_spec(grid.clone());
        let lt = 1.2f64;
        let params = NonStatParams::stationary(0.8, 0.0, 0.0, 0.0, vec![lt]);
        let loc = [(0.52, 0.52)];
        let reps = 4000;
        let ds = simulate_dataset(&spec, &params, &loc, &[0], reps, 5).unwrap();
        let var = ds.y.iter().map(|&v| v * v).sum::<f64>() / reps as f64;
        let (q, sym) = crate::model::field_precision(&spec, &params).unwrap();
        let diag = crate::sparse::factorize(&q, &sym)
            .unwrap()
            .partial_inverse()
            .diag();
        let cell = crate::geometry::locate_cell(&grid, loc[0]).unwrap().0;
        let expect = diag[cell] + (-lt).exp();
        assert!(
            (var - expect).abs() < 4.0 * expect / (reps as f64 / 2.0).sqrt(),
            "empirical {var} vs model {expect}"
        );
    }

    #[test]
    fn detrend_identical_replicates() {
        let grid = build_grid(0.0, 1.0, 0.0, 1.0, 5, 5).unwrap();
        let spec = stat_spec(grid.clone());
        let mut ds = empty_dataset();
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        // One smooth field realization shared by all replicates.
        let locs: Vec<(f64, f64)> = (0..25)
            .map(|_| (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)))
            .collect();
        let truth = NonStatParams::stationary(1.0, 0.0, 0.0, 0.0, vec![8.0]);
        let one = simulate_dataset(&spec, &truth, &locs, &vec![0; 25], 1, 23).unwrap();
        let base: Vec<((f64, f64), f64)> = locs.into_iter().zip(one.y).collect();
        for t in 0..3 {
            for &(loc, v) in &base {
                ds.locations.push(loc);
                ds.y.push(v);
                ds.replicate.push(t);
                ds.region.push(0);
            }
        }
        ds.n_replicates = 3;
        let (residual, mean_field, _) = detrend(&ds, &spec).unwrap();
        assert_eq!(mean_field.len(), grid.n_cells());
        // Residual magnitudes shrink well below data magnitudes.
        let rms_before = rmse(&ds.y, &vec![0.0; ds.n_obs()]).unwrap();
        let rms_after = rmse(&residual.y, &vec![0.0; ds.n_obs()]).unwrap();
        assert!(rms_after < 0.5 * rms_before);

        // A constant shift moves the mean field, not (up to the refitted
        // covariance parameters) the residuals. There is no explicit
        // intercept, so the invariance is only approximate.
        let mut shifted = ds.clone();
        for v in shifted.y.iter_mut() {
            *v += 5.0;
        }
        let (res_shift, mean_shift, _) = detrend(&shifted, &spec).unwrap();
        let rms_shift = rmse(&res_shift.y, &vec![0.0; ds.n_obs()]).unwrap();
        assert!(rms_shift < 0.15 * 5.0, "shifted residual rms {rms_shift}");
        let obs_cells: std::collections::HashSet<usize> = crate::geometry::selection_matrix(&grid, &ds.locations)
            .unwrap()
            .cells
            .into_iter()
            .collect();
        for c in obs_cells {
            assert!((mean_shift[c] - mean_field[c] - 5.0).abs() < 0.5);
        }
        assert!(detrend(&base_as_single(&ds), &spec).is_err());
    }

    fn base_as_single(ds: &Dataset) -> Dataset {
        let idx: Vec<usize> = (0..ds.n_obs()).filter(|&i| ds.replicate[i] == 0).collect();
        Dataset {
            locations: idx.iter().map(|&i| ds.locations[i]).collect(),
            y: idx.iter().map(|&i| ds.y[i]).collect(),
            x: None,
            replicate: vec![0; idx.len()],
            region: vec![0; idx.len()],
            n_replicates: 1,
            n_regions: 1,
        }
    }

    #[test]
    fn cv_single_candidate() {
        let grid = build_grid(0.0, 1.0, 0.0, 1.0, 5, 5).unwrap();
        let spec = stat_spec(grid.clone());
        let params = NonStatParams::stationary(0.5, 0.0, 0.0, 0.0, vec![2.0]);
        let locs: Vec<(f64, f64)> = {
            let mut rng = ChaCha20Rng::seed_from_u64(31);
            (0..20)
                .map(|_| (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)))
                .collect()
        };
        let ds = simulate_dataset(&spec, &params, &locs, &vec![0; 20], 1, 31).unwrap();
        let (best, table) = cv_penalty_search(&spec, &ds, &[[2.0, 4.0, 2.0, 8.0]], 2, 9).unwrap();
        assert_eq!(best, [2.0, 4.0, 2.0, 8.0]);
        assert_eq!(table.len(), 1);
        assert!(table[0].score.is_finite());
        assert!(cv_penalty_search(&spec, &ds, &[], 2, 9).is_err());
    }
}
