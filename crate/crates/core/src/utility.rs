//! Monte Carlo privacy–utility evaluation.
//!
//! For each protection radius `R` on a grid, every scooter location is
//! perturbed with `ε = ln(ratio) / R` (`R = 0` publishes exact locations) and
//! the damage to two city use cases is measured: scooters pushed outside the
//! city boundary, and per-neighborhood count distortion.
//!
//! Trial `j` at grid index `i` draws from substream `(i, j)` of the master
//! seed, and trials are aggregated in index order, so reports are identical
//! regardless of how rayon schedules the work.

use crate::feed::Snapshot;
use crate::geo::LatLon;
use crate::privacy::{epsilon_from, perturb, PrivacyError};
use crate::region::{count_points, Region, RegionSet};
use crate::rng::RandomSource;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io;

#[derive(Debug, thiserror::Error)]
pub enum UtilityError {
    #[error("empty R grid")]
    EmptyGrid,
    #[error("R grid must be finite, non-negative and strictly ascending (at index {0})")]
    BadGrid(usize),
    #[error("trials must be at least 1")]
    NoTrials,
    #[error("empty region set")]
    NoRegions,
    #[error("nothing to evaluate: supply a boundary, neighborhoods, or both")]
    NothingToMeasure,
    #[error("bad grid spec {0:?}: expected start:stop:step")]
    GridSpec(String),
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
    #[error("region counts do not partition {expected} scooters (got {got}) at R index {grid_index}, trial {trial}")]
    Partition {
        expected: u64,
        got: u64,
        grid_index: usize,
        trial: u32,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub r_grid: Vec<f64>,
    pub trials: u32,
    /// Likelihood-ratio bound held fixed across the grid.
    pub ratio: f64,
    pub master_seed: u64,
}

impl ExperimentConfig {
    fn validate(&self) -> Result<(), UtilityError> {
        if self.r_grid.is_empty() {
            return Err(UtilityError::EmptyGrid);
        }
        for (i, r) in self.r_grid.iter().enumerate() {
            if !(r.is_finite() && *r >= 0.0) || (i > 0 && *r <= self.r_grid[i - 1]) {
                return Err(UtilityError::BadGrid(i));
            }
        }
        if self.trials == 0 {
            return Err(UtilityError::NoTrials);
        }
        // also validates ratio
        epsilon_from(1.0, self.ratio)?;
        Ok(())
    }

    /// `None` at `R = 0`, meaning no perturbation.
    pub fn epsilon_at(&self, r_km: f64) -> Result<Option<f64>, PrivacyError> {
        if r_km == 0.0 {
            Ok(None)
        } else {
            epsilon_from(r_km, self.ratio).map(Some)
        }
    }
}

/// Parses `start:stop:step`, inclusive of both ends.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>, UtilityError> {
    let bad = || UtilityError::GridSpec(spec.to_owned());
    let parts: Vec<f64> = spec
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| bad())?;
    let [start, stop, step] = parts[..] else {
        return Err(bad());
    };
    if !(start.is_finite() && stop.is_finite() && step > 0.0 && step.is_finite() && stop >= start) {
        return Err(bad());
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    Ok((0..=n)
        .map(|i| ((start + i as f64 * step) * 1e12).round() / 1e12)
        .collect())
}

/// One grid point's trial-averaged metrics. Metrics not requested are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityRow {
    #[serde(rename = "R_km")]
    pub r_km: f64,
    #[serde(deserialize_with = "csv::invalid_option")]
    pub epsilon: Option<f64>,
    #[serde(deserialize_with = "csv::invalid_option")]
    pub mean_outside: Option<f64>,
    #[serde(deserialize_with = "csv::invalid_option")]
    pub stderr_outside: Option<f64>,
    #[serde(deserialize_with = "csv::invalid_option")]
    pub mean_abs_error: Option<f64>,
    #[serde(deserialize_with = "csv::invalid_option")]
    pub stderr_abs_error: Option<f64>,
    #[serde(deserialize_with = "csv::invalid_option")]
    pub mean_escapes: Option<f64>,
    #[serde(deserialize_with = "csv::invalid_option")]
    pub stderr_escapes: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityReport {
    pub trials: u32,
    pub ratio: f64,
    pub master_seed: u64,
    pub epsilon_rule: String,
    /// Scooters that took part in the experiment.
    pub scooters: usize,
    /// Scooters dropped because they started outside the boundary.
    pub excluded_outside: usize,
    pub neighborhoods: usize,
    pub rows: Vec<UtilityRow>,
}

#[derive(Default)]
struct TrialMetrics {
    outside: Option<f64>,
    abs_error: Option<f64>,
    escapes: Option<f64>,
}

/// Mean and standard error of the mean.
fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn summarize(values: Vec<Option<f64>>) -> (Option<f64>, Option<f64>) {
    let present: Option<Vec<f64>> = values.into_iter().collect();
    match present {
        Some(v) if !v.is_empty() => {
            let (m, s) = mean_stderr(&v);
            (Some(m), Some(s))
        }
        _ => (None, None),
    }
}

struct Neighborhoods<'a> {
    set: &'a RegionSet,
    true_region: Vec<Option<usize>>,
    true_counts: Vec<u64>,
}

/// Runs boundary and/or neighborhood trials over shared perturbations.
pub fn run_experiment(
    points: &[LatLon],
    boundary: Option<&Region>,
    neighborhoods: Option<&RegionSet>,
    config: &ExperimentConfig,
) -> Result<UtilityReport, UtilityError> {
    config.validate()?;
    if boundary.is_none() && neighborhoods.is_none() {
        return Err(UtilityError::NothingToMeasure);
    }
    if neighborhoods.is_some_and(|n| n.regions.is_empty()) {
        return Err(UtilityError::NoRegions);
    }

    let (points, excluded_outside): (Vec<LatLon>, usize) = match boundary {
        Some(b) => {
            let inside: Vec<_> = points.iter().copied().filter(|p| b.contains(*p)).collect();
            let excluded = points.len() - inside.len();
            if excluded > 0 {
                log::warn!("{excluded} scooters start outside the boundary and are excluded");
            }
            (inside, excluded)
        }
        None => (points.to_vec(), 0),
    };

    let hoods = neighborhoods.map(|set| {
        let true_region: Vec<_> = points.iter().map(|p| set.locate(*p)).collect();
        let mut true_counts = vec![0u64; set.regions.len()];
        for r in true_region.iter().flatten() {
            true_counts[*r] += 1;
        }
        Neighborhoods {
            set,
            true_region,
            true_counts,
        }
    });

    let epsilons: Vec<Option<f64>> = config
        .r_grid
        .iter()
        .map(|&r| config.epsilon_at(r))
        .collect::<Result<_, _>>()?;
    let root = RandomSource::new(config.master_seed);
    let trials = config.trials as usize;

    let results: Vec<Result<TrialMetrics, UtilityError>> = (0..config.r_grid.len() * trials)
        .into_par_iter()
        .map(|flat| {
            let (gi, trial) = (flat / trials, (flat % trials) as u32);
            let noisy: Vec<LatLon> = match epsilons[gi] {
                None => points.clone(),
                Some(eps) => {
                    let mut rng = root.substream2(gi as u32, trial);
                    points.iter().map(|p| perturb(*p, eps, &mut rng)).collect()
                }
            };
            let mut m = TrialMetrics::default();
            if let Some(b) = boundary {
                m.outside = Some(noisy.iter().filter(|p| !b.contains(**p)).count() as f64);
            }
            if let Some(h) = &hoods {
                let counts = count_points(noisy.iter().copied(), h.set);
                let expected = noisy.len() as u64;
                if counts.total() != expected {
                    return Err(UtilityError::Partition {
                        expected,
                        got: counts.total(),
                        grid_index: gi,
                        trial,
                    });
                }
                let k = h.set.regions.len() as f64;
                let abs_error: u64 = counts
                    .counts
                    .iter()
                    .zip(&h.true_counts)
                    .map(|((_, noisy_n), true_n)| noisy_n.abs_diff(*true_n))
                    .sum();
                let escapes = h
                    .true_region
                    .iter()
                    .zip(&noisy)
                    .filter(|(r, p)| r.is_some_and(|r| !h.set.regions[r].contains(**p)))
                    .count();
                m.abs_error = Some(abs_error as f64 / k);
                m.escapes = Some(escapes as f64 / k);
            }
            Ok(m)
        })
        .collect();
    let results: Vec<TrialMetrics> = results.into_iter().collect::<Result<_, _>>()?;

    let rows = config
        .r_grid
        .iter()
        .zip(&epsilons)
        .zip(results.chunks(trials))
        .map(|((&r_km, &epsilon), chunk)| {
            let (mean_outside, stderr_outside) = summarize(chunk.iter().map(|m| m.outside).collect());
            let (mean_abs_error, stderr_abs_error) = summarize(chunk.iter().map(|m| m.abs_error).collect());
            let (mean_escapes, stderr_escapes) = summarize(chunk.iter().map(|m| m.escapes).collect());
            UtilityRow {
                r_km,
                epsilon,
                mean_outside,
                stderr_outside,
                mean_abs_error,
                stderr_abs_error,
                mean_escapes,
                stderr_escapes,
            }
        })
        .collect();

    Ok(UtilityReport {
        trials: config.trials,
        ratio: config.ratio,
        master_seed: config.master_seed,
        epsilon_rule: format!("epsilon = ln({}) / R per grid point; R = 0 publishes exact locations", config.ratio),
        scooters: points.len(),
        excluded_outside,
        neighborhoods: neighborhoods.map_or(0, |n| n.regions.len()),
        rows,
    })
}

/// Mean number of scooters landing outside `boundary`, per grid point.
pub fn boundary_loss_experiment(
    snapshot: &Snapshot,
    boundary: &Region,
    config: &ExperimentConfig,
) -> Result<UtilityReport, UtilityError> {
    let points: Vec<_> = snapshot.observations.iter().map(|o| o.location()).collect();
    run_experiment(&points, Some(boundary), None, config)
}

/// Mean per-neighborhood escapes and absolute count error, per grid point.
pub fn neighborhood_loss_experiment(
    snapshot: &Snapshot,
    regions: &RegionSet,
    config: &ExperimentConfig,
) -> Result<UtilityReport, UtilityError> {
    let points: Vec<_> = snapshot.observations.iter().map(|o| o.location()).collect();
    run_experiment(&points, None, Some(regions), config)
}

pub const REPORT_COLUMNS: [&str; 8] = [
    "R_km",
    "epsilon",
    "mean_outside",
    "stderr_outside",
    "mean_abs_error",
    "stderr_abs_error",
    "mean_escapes",
    "stderr_escapes",
];

/// Writes `# ` comment lines, then the fixed columns in [`REPORT_COLUMNS`].
/// Unmeasured metrics are empty cells.
pub fn write_report_csv<W: io::Write>(mut out: W, report: &UtilityReport, comments: &[String]) -> io::Result<()> {
    for c in comments {
        writeln!(out, "# {c}")?;
    }
    writeln!(out, "# trials: {}", report.trials)?;
    writeln!(out, "# ratio: {}", report.ratio)?;
    writeln!(out, "# epsilon_rule: {}", report.epsilon_rule)?;
    writeln!(out, "# scooters: {}", report.scooters)?;
    writeln!(out, "# excluded_outside: {}", report.excluded_outside)?;
    writeln!(out, "# neighborhoods: {}", report.neighborhoods)?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(REPORT_COLUMNS)?;
    for row in &report.rows {
        w.serialize(row)?;
    }
    w.flush()
}

pub fn write_report_json<W: io::Write>(out: W, report: &UtilityReport) -> serde_json::Result<()> {
    serde_json::to_writer_pretty(out, report)
}

pub fn read_report_json<R: io::Read>(input: R) -> serde_json::Result<UtilityReport> {
    serde_json::from_reader(input)
}

/// Reads the rows back from a CSV report.
pub fn read_report_csv<R: io::Read>(input: R) -> csv::Result<Vec<UtilityRow>> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(input)
        .deserialize()
        .collect()
}

/// One perturbed copy of `points` as GeoJSON (true and noisy positions).
pub fn perturbed_geojson(points: &[LatLon], epsilon: f64, seed: u64) -> serde_json::Value {
    let mut rng = RandomSource::new(seed);
    let features: Vec<_> = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let q = perturb(*p, epsilon, &mut rng);
            serde_json::json!({
                "type": "Feature",
                "geometry": {"type": "Point", "coordinates": [q.lon, q.lat]},
                "properties": {"index": i, "true_lat": p.lat, "true_lon": p.lon},
            })
        })
        .collect();
    serde_json::json!({"type": "FeatureCollection", "features": features})
}
