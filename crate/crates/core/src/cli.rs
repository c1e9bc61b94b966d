//! Batch front-end: station CSV ingestion, a flat key-value run
//! configuration, and the subcommands wiring the pipeline together.
//! All outputs are JSON or CSV, written to a temporary file and renamed
//! into place so a failing run never leaves a half-written artifact.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::basis::{build_basis_1d, Basis2D, FieldBasis};
use crate::error::{Error, Result};
use crate::geometry::{build_grid, locate_cell, Grid};
use crate::inference::{
    cov_summary, crps_gaussian, cv_penalty_search, detrend, log_score_holdout, predict_grid, rmse,
    simulate_dataset, variogram, CvEntry,
};
use crate::model::{fit, penalized_loglik, Dataset, FitResult, ModelSpec};
use crate::spde::NonStatParams;

/// One row of a stations file.
#[derive(Debug, Clone, PartialEq)]
pub struct StationRecord {
    pub lon: f64,
    pub lat: f64,
    pub elev_km: f64,
    pub value: f64,
    pub year: i64,
}

/// Parsed run configuration; every field has a default so minimal config
/// files stay small.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub stations: Option<String>,
    pub output_dir: Option<String>,

    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub n_x: usize,
    pub n_y: usize,

    #[serde(default = "default_basis_k")]
    pub basis_k: usize,
    #[serde(default = "default_basis_l")]
    pub basis_l: usize,
    #[serde(default)]
    pub stationary: bool,

    #[serde(default = "default_log_tau")]
    pub log_tau1: f64,
    #[serde(default = "default_log_tau")]
    pub log_tau2: f64,
    #[serde(default = "default_log_tau")]
    pub log_tau3: f64,
    #[serde(default = "default_log_tau")]
    pub log_tau4: f64,
    #[serde(default = "default_tau_beta")]
    pub tau_beta: f64,

    /// Single-year selection; mutually exclusive with a year range.
    pub year: Option<i64>,
    pub year_min: Option<i64>,
    pub year_max: Option<i64>,

    /// Longitude threshold splitting the nugget into west/east regions.
    pub region_split: Option<f64>,
    /// Use the elevation column (plus an intercept) as fixed effects.
    #[serde(default)]
    pub use_elevation: bool,
    /// Per-cell covariate file for prediction (lon,lat,elev_km).
    pub covariate_grid: Option<String>,

    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_holdout")]
    pub holdout: f64,
    #[serde(default)]
    pub skip_bad: bool,

    /// Reference points for correlation fields, "lon:lat" pairs.
    #[serde(default)]
    pub reference_points: Vec<String>,

    /// Variogram controls.
    pub bin_width: Option<f64>,
    pub max_dist: Option<f64>,
    /// "west" or "east" of region_split.
    pub variogram_side: Option<String>,

    /// Simulation truth.
    pub true_log_kappa2: Option<f64>,
    pub true_log_gamma: Option<f64>,
    pub true_v_x: Option<f64>,
    pub true_v_y: Option<f64>,
    #[serde(default)]
    pub true_log_tau: Vec<f64>,
    pub n_stations: Option<usize>,
    pub n_replicates: Option<usize>,

    /// Fit file consumed by predict/score when refitting is not wanted.
    pub fit_file: Option<String>,

    /// Cross-validation candidate grid, each "a,b,c,d" of log penalties;
    /// defaults to the full 4^4 lattice over {2,4,6,8}.
    #[serde(default)]
    pub cv_candidates: Vec<String>,
    #[serde(default = "default_folds")]
    pub cv_folds: usize,
}

fn default_basis_k() -> usize {
    2
}
fn default_basis_l() -> usize {
    2
}
fn default_log_tau() -> f64 {
    4.0
}
fn default_tau_beta() -> f64 {
    1e-4
}
fn default_holdout() -> f64 {
    0.2
}
fn default_folds() -> usize {
    5
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }

    pub fn grid(&self) -> Result<Grid> {
        build_grid(self.x_min, self.x_max, self.y_min, self.y_max, self.n_x, self.n_y)
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let grid = self.grid()?;
        let basis = if self.stationary {
            FieldBasis::Constant
        } else {
            FieldBasis::Tensor(Basis2D {
                bx: build_basis_1d(self.basis_k, self.x_min, self.x_max)?,
                by: build_basis_1d(self.basis_l, self.y_min, self.y_max)?,
            })
        };
        Ok(ModelSpec {
            grid,
            basis,
            tau: [
                self.log_tau1.exp(),
                self.log_tau2.exp(),
                self.log_tau3.exp(),
                self.log_tau4.exp(),
            ],
            tau_beta: self.tau_beta,
        })
    }

    fn output_path(&self, name: &str) -> PathBuf {
        Path::new(self.output_dir.as_deref().unwrap_or(".")).join(name)
    }

    fn stations_path(&self) -> Result<PathBuf> {
        self.stations
            .as_deref()
            .map(PathBuf::from)
            .ok_or_else(|| Error::InvalidArgument("config is missing 'stations'".into()))
    }
}

/// Reads a stations CSV with header `lon,lat,elev_km,value,year`.
/// Malformed lines are collected with their line numbers; unless
/// `skip_bad` is set, any malformed line fails the load.
pub fn load_stations(path: &Path, skip_bad: bool) -> Result<Vec<StationRecord>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == "lon,lat,elev_km,value,year" => {}
        Some((_, header)) => {
            return Err(Error::Parse(format!(
                "{}: expected header 'lon,lat,elev_km,value,year', got '{}'",
                path.display(),
                header.trim()
            )))
        }
        None => return Err(Error::Parse(format!("{}: empty file", path.display()))),
    }
    let mut records = Vec::new();
    let mut bad: Vec<(usize, String)> = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        match parse_station_line(line) {
            Ok(r) => records.push(r),
            Err(msg) => bad.push((line_no, msg)),
        }
    }
    if !bad.is_empty() && !skip_bad {
        let report: Vec<String> = bad
            .iter()
            .map(|(l, m)| format!("line {l}: {m}"))
            .collect();
        return Err(Error::Parse(format!(
            "{}: {} malformed line(s):\n{}",
            path.display(),
            bad.len(),
            report.join("\n")
        )));
    }
    Ok(records)
}

fn parse_station_line(line: &str) -> std::result::Result<StationRecord, String> {
    let fields: Vec<&str> = line.trim().split(',').collect();
    if fields.len() != 5 {
        return Err(format!("expected 5 fields, got {}", fields.len()));
    }
    let num = |s: &str, name: &str| -> std::result::Result<f64, String> {
        let v: f64 = s
            .trim()
            .parse()
            .map_err(|_| format!("non-numeric {name} '{}'", s.trim()))?;
        if !v.is_finite() {
            return Err(format!("non-finite {name}"));
        }
        Ok(v)
    };
    Ok(StationRecord {
        lon: num(fields[0], "lon")?,
        lat: num(fields[1], "lat")?,
        elev_km: num(fields[2], "elev_km")?,
        value: num(fields[3], "value")?,
        year: fields[4]
            .trim()
            .parse()
            .map_err(|_| format!("non-integer year '{}'", fields[4].trim()))?,
    })
}

/// Builds a Dataset from station records under the config's year
/// selection, region rule, and covariate settings. Out-of-domain rows
/// count as malformed.
pub fn build_dataset(config: &RunConfig, records: &[StationRecord]) -> Result<Dataset> {
    let (y_lo, y_hi) = match (config.year, config.year_min, config.year_max) {
        (Some(y), None, None) => (y, y),
        (None, Some(a), Some(b)) if a <= b => (a, b),
        (None, None, None) => (i64::MIN, i64::MAX),
        _ => {
            return Err(Error::InvalidArgument(
                "set either 'year' or a valid 'year_min'..'year_max' range".into(),
            ))
        }
    };
    let selected: Vec<&StationRecord> = records
        .iter()
        .filter(|r| r.year >= y_lo && r.year <= y_hi)
        .collect();
    if selected.is_empty() {
        return Err(Error::InvalidArgument(
            "no stations match the year selection".into(),
        ));
    }
    let grid = config.grid()?;
    let mut out_of_domain = Vec::new();
    for r in &selected {
        if locate_cell(&grid, (r.lon, r.lat)).is_err() {
            out_of_domain.push(format!("station at ({}, {})", r.lon, r.lat));
        }
    }
    if !out_of_domain.is_empty() && !config.skip_bad {
        return Err(Error::Parse(format!(
            "{} station(s) outside the domain:\n{}",
            out_of_domain.len(),
            out_of_domain.join("\n")
        )));
    }
    let kept: Vec<&StationRecord> = selected
        .into_iter()
        .filter(|r| locate_cell(&grid, (r.lon, r.lat)).is_ok())
        .collect();

    let year_base = kept.iter().map(|r| r.year).min().unwrap();
    let year_top = kept.iter().map(|r| r.year).max().unwrap();
    let t_rep = (year_top - year_base + 1) as usize;
    let n_regions = if config.region_split.is_some() { 2 } else { 1 };
    let region_of = |lon: f64| match config.region_split {
        Some(split) => usize::from(lon >= split),
        None => 0,
    };
    let x = if config.use_elevation {
        Some(kept.iter().map(|r| vec![1.0, r.elev_km]).collect())
    } else {
        None
    };
    Ok(Dataset {
        locations: kept.iter().map(|r| (r.lon, r.lat)).collect(),
        y: kept.iter().map(|r| r.value).collect(),
        x,
        replicate: kept.iter().map(|r| (r.year - year_base) as usize).collect(),
        region: kept.iter().map(|r| region_of(r.lon)).collect(),
        n_replicates: t_rep,
        n_regions,
    })
}

fn write_atomic(path: &Path, content: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, content)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FitArtifact {
    pub basis_k: usize,
    pub basis_l: usize,
    pub stationary: bool,
    pub log_tau: [f64; 4],
    pub tau_beta: f64,
    pub fit: FitResult,
    pub elapsed_secs: f64,
}

fn load_fit(path: &Path) -> Result<FitArtifact> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

fn region_of_cells(config: &RunConfig, grid: &Grid) -> Option<Vec<usize>> {
    config.region_split.map(|split| {
        (0..grid.n_cells())
            .map(|c| usize::from(grid.cell_center(c).0 >= split))
            .collect()
    })
}

fn load_covariate_grid(config: &RunConfig, grid: &Grid) -> Result<Option<Vec<Vec<f64>>>> {
    let Some(path) = &config.covariate_grid else {
        return Ok(None);
    };
    let records = load_stations_like(Path::new(path))?;
    let mut cells = vec![None; grid.n_cells()];
    for (lon, lat, elev) in records {
        let c = locate_cell(grid, (lon, lat))?;
        cells[c.0] = Some(vec![1.0, elev]);
    }
    cells
        .into_iter()
        .collect::<Option<Vec<_>>>()
        .map(Some)
        .ok_or_else(|| Error::Parse("covariate grid does not cover every cell".into()))
}

fn load_stations_like(path: &Path) -> Result<Vec<(f64, f64, f64)>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if idx == 0 || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() < 3 {
            return Err(Error::Parse(format!("{}: line {}", path.display(), idx + 1)));
        }
        let p = |s: &str| -> Result<f64> {
            s.trim()
                .parse()
                .map_err(|_| Error::Parse(format!("{}: line {}", path.display(), idx + 1)))
        };
        out.push((p(f[0])?, p(f[1])?, p(f[2])?));
    }
    Ok(out)
}

fn reference_cells(config: &RunConfig, grid: &Grid) -> Result<Vec<usize>> {
    config
        .reference_points
        .iter()
        .map(|s| {
            let parts: Vec<&str> = s.split(':').collect();
            if parts.len() != 2 {
                return Err(Error::InvalidArgument(format!(
                    "reference point '{s}' is not 'lon:lat'"
                )));
            }
            let lon: f64 = parts[0]
                .parse()
                .map_err(|_| Error::Parse(format!("reference point '{s}'")))?;
            let lat: f64 = parts[1]
                .parse()
                .map_err(|_| Error::Parse(format!("reference point '{s}'")))?;
            Ok(locate_cell(grid, (lon, lat))?.0)
        })
        .collect()
}

pub fn run_fit(config: &RunConfig) -> Result<()> {
    let spec = config.model_spec()?;
    let records = load_stations(&config.stations_path()?, config.skip_bad)?;
    let dataset = build_dataset(config, &records)?;
    let start = Instant::now();
    let result = fit(&spec, &dataset, None)?;
    let artifact = FitArtifact {
        basis_k: config.basis_k,
        basis_l: config.basis_l,
        stationary: config.stationary,
        log_tau: [config.log_tau1, config.log_tau2, config.log_tau3, config.log_tau4],
        tau_beta: config.tau_beta,
        fit: result,
        elapsed_secs: start.elapsed().as_secs_f64(),
    };
    let json = serde_json::to_string_pretty(&artifact)
        .map_err(|e| Error::Parse(format!("serializing fit: {e}")))?;
    write_atomic(&config.output_path("fit.json"), &json)
}

fn fit_or_load(config: &RunConfig, spec: &ModelSpec, dataset: &Dataset) -> Result<FitResult> {
    match &config.fit_file {
        Some(path) => Ok(load_fit(Path::new(path))?.fit),
        None => fit(spec, dataset, None),
    }
}

pub fn run_predict(config: &RunConfig) -> Result<()> {
    let spec = config.model_spec()?;
    let grid = &spec.grid;
    let records = load_stations(&config.stations_path()?, config.skip_bad)?;
    let dataset = build_dataset(config, &records)?;
    let result = fit_or_load(config, &spec, &dataset)?;
    let covariate_grid = load_covariate_grid(config, grid)?;
    let cell_region = region_of_cells(config, grid);
    let pred = predict_grid(
        &result,
        &spec,
        &dataset,
        covariate_grid.as_deref(),
        cell_region.as_deref(),
        0,
    )?;

    let mut csv = String::from("lon,lat,mean,sd_latent,sd_obs\n");
    for c in 0..grid.n_cells() {
        let (lon, lat) = grid.cell_center(c);
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            fmt(lon),
            fmt(lat),
            fmt(pred.mean[c]),
            fmt(pred.sd_latent[c]),
            fmt(pred.sd_obs[c])
        ));
    }
    write_atomic(&config.output_path("prediction.csv"), &csv)?;

    let refs = reference_cells(config, grid)?;
    let summary = cov_summary(&spec, &result.params, &refs)?;
    let mut header = String::from("lon,lat,marginal_sd");
    for i in 0..refs.len() {
        header.push_str(&format!(",corr_{}", i + 1));
    }
    header.push('\n');
    let mut csv = header;
    for c in 0..grid.n_cells() {
        let (lon, lat) = grid.cell_center(c);
        let mut row = format!("{},{},{}", fmt(lon), fmt(lat), fmt(summary.marginal_sd[c]));
        for corr in &summary.correlations {
            row.push_str(&format!(",{}", fmt(corr[c])));
        }
        row.push('\n');
        csv.push_str(&row);
    }
    write_atomic(&config.output_path("covsummary.csv"), &csv)
}

/// Seeded random holdout split; returns (train, test) index sets.
fn holdout_split(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    use rand::{Rng, SeedableRng};
    if !(0.0..1.0).contains(&fraction) || (n as f64 * fraction) < 1.0 {
        return Err(Error::InvalidArgument(
            "holdout fraction yields an empty test set".into(),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let n_test = (n as f64 * fraction).round() as usize;
    let (test, train) = order.split_at(n_test.max(1));
    Ok((train.to_vec(), test.to_vec()))
}

fn subset(ds: &Dataset, idx: &[usize]) -> Dataset {
    Dataset {
        locations: idx.iter().map(|&i| ds.locations[i]).collect(),
        y: idx.iter().map(|&i| ds.y[i]).collect(),
        x: ds
            .x
            .as_ref()
            .map(|x| idx.iter().map(|&i| x[i].clone()).collect()),
        replicate: idx.iter().map(|&i| ds.replicate[i]).collect(),
        region: idx.iter().map(|&i| ds.region[i]).collect(),
        n_replicates: ds.n_replicates,
        n_regions: ds.n_regions,
    }
}

#[derive(Debug, Serialize)]
struct ScoresArtifact {
    crps: f64,
    log_score: f64,
    rmse: f64,
    n_train: usize,
    n_test: usize,
}

pub fn run_score(config: &RunConfig) -> Result<()> {
    let spec = config.model_spec()?;
    let records = load_stations(&config.stations_path()?, config.skip_bad)?;
    let dataset = build_dataset(config, &records)?;
    let (train_idx, test_idx) = holdout_split(dataset.n_obs(), config.holdout, config.seed)?;
    let train = subset(&dataset, &train_idx);
    let test = subset(&dataset, &test_idx);
    let result = fit_or_load(config, &spec, &train)?;

    let covariate_grid = load_covariate_grid(config, &spec.grid)?;
    let cell_region = region_of_cells(config, &spec.grid);
    // Per-test-point predictive mean and observation sd from the cell
    // containing each station, per replicate.
    let mut crps_sum = 0.0;
    let mut means = Vec::with_capacity(test.n_obs());
    let mut preds: std::collections::HashMap<usize, crate::inference::PredictionGrid> =
        std::collections::HashMap::new();
    for i in 0..test.n_obs() {
        let t = test.replicate[i];
        if !preds.contains_key(&t) {
            preds.insert(
                t,
                predict_grid(
                    &result,
                    &spec,
                    &train,
                    covariate_grid.as_deref(),
                    cell_region.as_deref(),
                    t,
                )?,
            );
        }
        let p = &preds[&t];
        let cell = locate_cell(&spec.grid, test.locations[i])?.0;
        crps_sum += crps_gaussian(p.mean[cell], p.sd_obs[cell], test.y[i])?;
        means.push(p.mean[cell]);
    }
    let scores = ScoresArtifact {
        crps: crps_sum / test.n_obs() as f64,
        log_score: log_score_holdout(&result, &spec, &train, &test)?,
        rmse: rmse(&means, &test.y)?,
        n_train: train.n_obs(),
        n_test: test.n_obs(),
    };
    let json = serde_json::to_string_pretty(&scores)
        .map_err(|e| Error::Parse(format!("serializing scores: {e}")))?;
    write_atomic(&config.output_path("scores.json"), &json)
}

#[derive(Debug, Serialize)]
struct CvArtifact {
    best_log_tau: [f64; 4],
    entries: Vec<CvEntry>,
}

pub fn run_cv(config: &RunConfig) -> Result<()> {
    let spec = config.model_spec()?;
    let records = load_stations(&config.stations_path()?, config.skip_bad)?;
    let dataset = build_dataset(config, &records)?;
    let candidates: Vec<[f64; 4]> = if config.cv_candidates.is_empty() {
        let levels = [2.0, 4.0, 6.0, 8.0];
        let mut all = Vec::with_capacity(256);
        for &a in &levels {
            for &b in &levels {
                for &c in &levels {
                    for &d in &levels {
                        all.push([a, b, c, d]);
                    }
                }
            }
        }
        all
    } else {
        config
            .cv_candidates
            .iter()
            .map(|s| {
                let v: Vec<f64> = s
                    .split(',')
                    .map(|t| t.trim().parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::Parse(format!("cv candidate '{s}'")))?;
                if v.len() != 4 {
                    return Err(Error::Parse(format!("cv candidate '{s}' needs 4 values")));
                }
                Ok([v[0], v[1], v[2], v[3]])
            })
            .collect::<Result<_>>()?
    };
    let (best, entries) =
        cv_penalty_search(&spec, &dataset, &candidates, config.cv_folds, config.seed)?;
    let json = serde_json::to_string_pretty(&CvArtifact {
        best_log_tau: best,
        entries,
    })
    .map_err(|e| Error::Parse(format!("serializing cv: {e}")))?;
    write_atomic(&config.output_path("cv.json"), &json)
}

pub fn run_simulate(config: &RunConfig) -> Result<()> {
    use rand::{Rng, SeedableRng};
    let spec = config.model_spec()?;
    let truth = NonStatParams::stationary(
        config
            .true_log_kappa2
            .ok_or_else(|| Error::InvalidArgument("missing true_log_kappa2".into()))?,
        config.true_log_gamma.unwrap_or(0.0),
        config.true_v_x.unwrap_or(0.0),
        config.true_v_y.unwrap_or(0.0),
        if config.true_log_tau.is_empty() {
            vec![4.0]
        } else {
            config.true_log_tau.clone()
        },
    );
    let n = config
        .n_stations
        .ok_or_else(|| Error::InvalidArgument("missing n_stations".into()))?;
    let t_rep = config.n_replicates.unwrap_or(1);
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(config.seed);
    let locations: Vec<(f64, f64)> = (0..n)
        .map(|_| {
            (
                rng.gen_range(config.x_min..config.x_max),
                rng.gen_range(config.y_min..config.y_max),
            )
        })
        .collect();
    let region: Vec<usize> = locations
        .iter()
        .map(|&(lon, _)| match config.region_split {
            Some(split) if truth.n_regions() > 1 => usize::from(lon >= split),
            _ => 0,
        })
        .collect();
    let ds = simulate_dataset(&spec, &truth, &locations, &region, t_rep, config.seed)?;
    let mut csv = String::from("lon,lat,elev_km,value,year\n");
    for i in 0..ds.n_obs() {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            fmt(ds.locations[i].0),
            fmt(ds.locations[i].1),
            fmt(0.0),
            fmt(ds.y[i]),
            2000 + ds.replicate[i]
        ));
    }
    write_atomic(&config.output_path("simulated.csv"), &csv)
}

pub fn run_variogram(config: &RunConfig) -> Result<()> {
    let records = load_stations(&config.stations_path()?, config.skip_bad)?;
    let dataset = build_dataset(config, &records)?;
    let diag = {
        let dx = config.x_max - config.x_min;
        let dy = config.y_max - config.y_min;
        (dx * dx + dy * dy).sqrt()
    };
    let max_dist = config.max_dist.unwrap_or(0.5 * diag);
    let bin_width = config.bin_width.unwrap_or(max_dist / 30.0);
    let filter = match (config.variogram_side.as_deref(), config.region_split) {
        (Some("west"), Some(split)) => Some((split, true)),
        (Some("east"), Some(split)) => Some((split, false)),
        (Some(side), None) => {
            return Err(Error::InvalidArgument(format!(
                "variogram_side '{side}' needs region_split"
            )))
        }
        (Some(side), _) => {
            return Err(Error::InvalidArgument(format!(
                "variogram_side must be 'west' or 'east', got '{side}'"
            )))
        }
        (None, _) => None,
    };
    let v = variogram(&dataset, bin_width, max_dist, filter)?;
    let mut csv = String::from("bin_center,semivariance,count\n");
    for b in 0..v.bin_centers.len() {
        let sv = if v.counts[b] > 0 {
            fmt(v.semivariance[b])
        } else {
            "NA".to_string()
        };
        csv.push_str(&format!("{},{},{}\n", fmt(v.bin_centers[b]), sv, v.counts[b]));
    }
    write_atomic(&config.output_path("variogram.csv"), &csv)
}

pub fn run_detrend(config: &RunConfig) -> Result<()> {
    let mut stat_config = config.clone();
    stat_config.stationary = true;
    let spec = stat_config.model_spec()?;
    let records = load_stations(&config.stations_path()?, config.skip_bad)?;
    let dataset = build_dataset(config, &records)?;
    let (residual, mean_field, _) = detrend(&dataset, &spec)?;

    let year_base = records
        .iter()
        .map(|r| r.year)
        .min()
        .expect("non-empty records");
    let mut csv = String::from("lon,lat,elev_km,value,year\n");
    for i in 0..residual.n_obs() {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            fmt(residual.locations[i].0),
            fmt(residual.locations[i].1),
            fmt(0.0),
            fmt(residual.y[i]),
            year_base + residual.replicate[i] as i64
        ));
    }
    write_atomic(&config.output_path("residuals.csv"), &csv)?;

    let grid = spec.grid;
    let mut csv = String::from("lon,lat,mean\n");
    for c in 0..grid.n_cells() {
        let (lon, lat) = grid.cell_center(c);
        csv.push_str(&format!("{},{},{}\n", fmt(lon), fmt(lat), fmt(mean_field[c])));
    }
    write_atomic(&config.output_path("meanfield.csv"), &csv)
}

/// Round-trip check used by the fit artifact tests: re-evaluating the
/// stored parameters must reproduce the stored likelihood.
pub fn check_fit_roundtrip(config: &RunConfig, artifact: &FitArtifact) -> Result<f64> {
    let spec = config.model_spec()?;
    let records = load_stations(&config.stations_path()?, config.skip_bad)?;
    let dataset = build_dataset(config, &records)?;
    penalized_loglik(&spec, &artifact.fit.params, &dataset)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(name: &str, content: &str) -> PathBuf {
        let dir = std::env::temp_dir().join("spdegrf-cli-tests");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join(name);
        fs::write(&path, content).unwrap();
        path
    }

    #[test]
    fn empty_file_with_header_loads_nothing() {
        let p = write_tmp("empty.csv", "lon,lat,elev_km,value,year\n");
        assert!(load_stations(&p, false).unwrap().is_empty());
    }

    #[test]
    fn round_trips_one_record() {
        let p = write_tmp("one.csv", "lon,lat,elev_km,value,year\n-100.5,42.25,1.5,6.9,1981\n");
        let r = load_stations(&p, false).unwrap();
        assert_eq!(
            r,
            vec![StationRecord {
                lon: -100.5,
                lat: 42.25,
                elev_km: 1.5,
                value: 6.9,
                year: 1981
            }]
        );
    }

    #[test]
    fn malformed_line_reported_with_number() {
        let p = write_tmp(
            "bad.csv",
            "lon,lat,elev_km,value,year\n1.0,2.0,0.1,3.0,1981\n1.0,oops,0.1,3.0,1981\n",
        );
        let err = load_stations(&p, false).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("line 3"), "{msg}");
        assert_eq!(load_stations(&p, true).unwrap().len(), 1);
    }

    #[test]
    fn bad_header_rejected() {
        let p = write_tmp("hdr.csv", "lng,lat,elev,value,year\n");
        assert!(load_stations(&p, false).is_err());
    }

    #[test]
    fn config_defaults_apply() {
        let cfg: RunConfig = toml::from_str(
            "x_min = 0.0\nx_max = 1.0\ny_min = 0.0\ny_max = 1.0\nn_x = 10\nn_y = 10\n",
        )
        .unwrap();
        assert_eq!(cfg.basis_k, 2);
        assert_eq!(cfg.holdout, 0.2);
        assert_eq!(cfg.cv_folds, 5);
        assert!(!cfg.stationary);
        assert!(cfg.model_spec().is_ok());
    }

    #[test]
    fn dataset_from_records_with_region_split() {
        let cfg: RunConfig = toml::from_str(
            "x_min = -10.0\nx_max = 10.0\ny_min = 0.0\ny_max = 10.0\nn_x = 10\nn_y = 10\nregion_split = 0.0\n",
        )
        .unwrap();
        let records = vec![
            StationRecord { lon: -5.0, lat: 5.0, elev_km: 0.0, value: 1.0, year: 1980 },
            StationRecord { lon: 5.0, lat: 5.0, elev_km: 0.0, value: 2.0, year: 1981 },
        ];
        let ds = build_dataset(&cfg, &records).unwrap();
        assert_eq!(ds.region, vec![0, 1]);
        assert_eq!(ds.replicate, vec![0, 1]);
        assert_eq!(ds.n_replicates, 2);
        assert_eq!(ds.n_regions, 2);
    }

    #[test]
    fn out_of_domain_station_rejected_unless_skipped() {
        let mut cfg: RunConfig = toml::from_str(
            "x_min = 0.0\nx_max = 1.0\ny_min = 0.0\ny_max = 1.0\nn_x = 5\nn_y = 5\n",
        )
        .unwrap();
        let records = vec![
            StationRecord { lon: 0.5, lat: 0.5, elev_km: 0.0, value: 1.0, year: 1980 },
            StationRecord { lon: 3.0, lat: 0.5, elev_km: 0.0, value: 2.0, year: 1980 },
        ];
        assert!(build_dataset(&cfg, &records).is_err());
        cfg.skip_bad = true;
        assert_eq!(build_dataset(&cfg, &records).unwrap().n_obs(), 1);
    }

    #[test]
    fn holdout_split_is_seeded_and_disjoint() {
        let (tr1, te1) = holdout_split(50, 0.2, 7).unwrap();
        let (tr2, te2) = holdout_split(50, 0.2, 7).unwrap();
        assert_eq!(tr1, tr2);
        assert_eq!(te1, te2);
        assert_eq!(tr1.len() + te1.len(), 50);
        assert_eq!(te1.len(), 10);
        assert!(tr1.iter().all(|i| !te1.contains(i)));
        assert!(holdout_split(50, 0.0, 7).is_err());
    }
}
