//! Hotspot discovery: k-means over trip endpoints on a local planar projection.

use crate::geo::{haversine_distance, LatLon, PlanarPoint, EARTH_RADIUS_KM};
use crate::rng::RandomSource;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use std::collections::BTreeMap;
use std::io;

/// Points farther than this from the projection origin are refused.
pub const MAX_PROJECTION_KM: f64 = 100.0;
pub const MAX_ITERATIONS: usize = 100;
/// Convergence threshold on the largest centroid move, km.
pub const CONVERGENCE_KM: f64 = 1e-6;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ClusterError {
    #[error("no points to cluster")]
    Empty,
    #[error("k = {k} out of range for {n} points")]
    KOutOfRange { k: usize, n: usize },
    #[error("only {distinct} distinct locations for k = {k}")]
    TooFewDistinct { distinct: usize, k: usize },
    #[error("point {index} is {distance_km:.1} km from the projection origin (limit {MAX_PROJECTION_KM} km)")]
    TooFar { index: usize, distance_km: f64 },
    #[error("point {0} has a non-finite coordinate")]
    NonFinite(usize),
}

/// Equirectangular projection around `origin`, in km.
pub fn project_local(points: &[LatLon], origin: LatLon) -> Result<Vec<PlanarPoint>, ClusterError> {
    let kx = origin.lat.to_radians().cos() * EARTH_RADIUS_KM;
    points
        .iter()
        .enumerate()
        .map(|(index, p)| {
            let distance_km = haversine_distance(origin, *p) / 1000.0;
            if distance_km.is_nan() || distance_km > MAX_PROJECTION_KM {
                return Err(ClusterError::TooFar { index, distance_km });
            }
            Ok(PlanarPoint {
                x: (p.lon - origin.lon).to_radians() * kx,
                y: (p.lat - origin.lat).to_radians() * EARTH_RADIUS_KM,
            })
        })
        .collect()
}

/// Inverse of [`project_local`].
pub fn unproject_local(p: PlanarPoint, origin: LatLon) -> LatLon {
    let kx = origin.lat.to_radians().cos() * EARTH_RADIUS_KM;
    LatLon {
        lat: origin.lat + (p.y / EARTH_RADIUS_KM).to_degrees(),
        lon: origin.lon + (p.x / kx).to_degrees(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub centroids: Vec<PlanarPoint>,
    /// Cluster index per input point.
    pub assignments: Vec<usize>,
    /// Sum of squared distances to assigned centroids, km².
    pub inertia: f64,
    /// Inertia after every assignment step, starting with the seeding.
    pub inertia_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn nearest(p: &PlanarPoint, centroids: &[PlanarPoint]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = p.distance_sq(c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn assign(points: &[PlanarPoint], centroids: &[PlanarPoint]) -> (Vec<usize>, Vec<f64>) {
    points.par_iter().map(|p| nearest(p, centroids)).unzip()
}

fn sample_d2(d2: &[f64], total: f64, rng: &mut RandomSource) -> usize {
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, &w) in d2.iter().enumerate() {
        acc += w;
        if w > 0.0 && acc > target {
            return i;
        }
    }
    // rounding can leave target just past the final partial sum
    d2.iter().rposition(|&w| w > 0.0).expect("positive total")
}

/// Greedy k-means++: each step draws `2 + ln k` D²-weighted candidates and
/// keeps the one that lowers the potential most.
fn seed_plus_plus(points: &[PlanarPoint], k: usize, rng: &mut RandomSource) -> Vec<PlanarPoint> {
    let n = points.len();
    let trials = 2 + (k as f64).ln() as usize;
    let first = rng.random_range(0..n);
    let mut chosen = vec![false; n];
    chosen[first] = true;
    let mut centroids = vec![points[first]];
    let mut d2: Vec<f64> = points.iter().map(|p| p.distance_sq(&points[first])).collect();

    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            let pick = chosen.iter().position(|c| !c).expect("k <= n");
            chosen[pick] = true;
            centroids.push(points[pick]);
            continue;
        }
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..trials {
            let cand = sample_d2(&d2, total, rng);
            let c = points[cand];
            let next: Vec<f64> = d2.par_iter().zip(points).map(|(w, p)| w.min(p.distance_sq(&c))).collect();
            let potential: f64 = next.iter().sum();
            if best.as_ref().is_none_or(|b| potential < b.0) {
                best = Some((potential, cand, next));
            }
        }
        let (_, pick, next) = best.expect("at least one trial");
        chosen[pick] = true;
        centroids.push(points[pick]);
        d2 = next;
    }
    centroids
}

/// Moves each empty cluster's centroid onto the point farthest from its own
/// centroid. Returns whether anything moved.
fn repair_empty(
    points: &[PlanarPoint],
    centroids: &mut [PlanarPoint],
    assignments: &mut [usize],
    dist: &mut [f64],
    sizes: &mut [usize],
) -> bool {
    let mut moved = false;
    for c in 0..centroids.len() {
        if sizes[c] > 0 {
            continue;
        }
        let Some((far, _)) = dist
            .iter()
            .enumerate()
            .filter(|&(i, &d)| d > 0.0 && sizes[assignments[i]] > 1)
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        else {
            continue;
        };
        sizes[assignments[far]] -= 1;
        sizes[c] = 1;
        assignments[far] = c;
        dist[far] = 0.0;
        centroids[c] = points[far];
        moved = true;
    }
    moved
}

fn inertia_of(dist: &[f64]) -> f64 {
    dist.iter().sum()
}

fn check_monotone(prev: f64, next: f64) {
    debug_assert!(
        next <= prev + 1e-9 * prev.abs().max(1.0),
        "k-means inertia increased: {prev} -> {next}"
    );
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// Deterministic in `(points, k, seed)`; the parallel assignment step does
/// not affect the result. Empty clusters are reseeded at the point farthest
/// from its centroid, so every returned cluster is non-empty.
pub fn kmeans(points: &[PlanarPoint], k: usize, seed: u64) -> Result<KMeansFit, ClusterError> {
    let n = points.len();
    if n == 0 {
        return Err(ClusterError::Empty);
    }
    if k == 0 || k > n {
        return Err(ClusterError::KOutOfRange { k, n });
    }
    if let Some(i) = points.iter().position(|p| !(p.x.is_finite() && p.y.is_finite())) {
        return Err(ClusterError::NonFinite(i));
    }
    let distinct = count_distinct(points);
    if distinct < k {
        return Err(ClusterError::TooFewDistinct { distinct, k });
    }

    let mut rng = RandomSource::new(seed);
    let mut centroids = seed_plus_plus(points, k, &mut rng);
    let (mut assignments, mut dist) = assign(points, &centroids);
    let mut inertia = inertia_of(&dist);
    let mut trace = vec![inertia];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let mut sums = vec![(0.0, 0.0, 0usize); k];
        for (p, &a) in points.iter().zip(&assignments) {
            sums[a].0 += p.x;
            sums[a].1 += p.y;
            sums[a].2 += 1;
        }
        let mut next: Vec<PlanarPoint> = sums
            .iter()
            .zip(&centroids)
            .map(|(&(sx, sy, m), old)| {
                if m == 0 {
                    *old
                } else {
                    PlanarPoint::new(sx / m as f64, sy / m as f64)
                }
            })
            .collect();
        let mut sizes: Vec<usize> = sums.iter().map(|s| s.2).collect();
        let mut dist_to_next: Vec<f64> = points
            .iter()
            .zip(&assignments)
            .map(|(p, &a)| p.distance_sq(&next[a]))
            .collect();
        repair_empty(points, &mut next, &mut assignments, &mut dist_to_next, &mut sizes);

        let shift = next
            .iter()
            .zip(&centroids)
            .map(|(a, b)| a.distance(b))
            .fold(0.0, f64::max);
        centroids = next;
        (assignments, dist) = assign(points, &centroids);
        let next_inertia = inertia_of(&dist);
        check_monotone(inertia, next_inertia);
        inertia = next_inertia;
        trace.push(inertia);

        let all_nonempty = cluster_sizes(&assignments, k).iter().all(|&s| s > 0);
        if shift < CONVERGENCE_KM && all_nonempty {
            converged = true;
            break;
        }
    }

    // Iteration cap reached with an empty cluster: keep repairing until none remain.
    let mut sizes = cluster_sizes(&assignments, k);
    while sizes.contains(&0) {
        if !repair_empty(points, &mut centroids, &mut assignments, &mut dist, &mut sizes) {
            break;
        }
        (assignments, dist) = assign(points, &centroids);
        inertia = inertia_of(&dist);
        trace.push(inertia);
        sizes = cluster_sizes(&assignments, k);
    }

    Ok(KMeansFit {
        centroids,
        assignments,
        inertia,
        inertia_trace: trace,
        iterations,
        converged,
    })
}

fn cluster_sizes(assignments: &[usize], k: usize) -> Vec<usize> {
    let mut sizes = vec![0; k];
    for &a in assignments {
        sizes[a] += 1;
    }
    sizes
}

fn count_distinct(points: &[PlanarPoint]) -> usize {
    let mut keys: Vec<(u64, u64)> = points.iter().map(|p| (p.x.to_bits(), p.y.to_bits())).collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cluster {
    pub id: usize,
    pub centroid: LatLon,
    /// Indices into the clustered input, ascending.
    pub member_indices: Vec<usize>,
    pub size: usize,
}

/// Projects `points` around their mean, runs [`kmeans`], and maps the
/// centroids back to degrees.
pub fn cluster_locations(points: &[LatLon], k: usize, seed: u64) -> Result<Vec<Cluster>, ClusterError> {
    if points.is_empty() {
        return Err(ClusterError::Empty);
    }
    let origin = mean_location(points);
    let planar = project_local(points, origin)?;
    let fit = kmeans(&planar, k, seed)?;
    let mut members = vec![Vec::new(); k];
    for (i, &a) in fit.assignments.iter().enumerate() {
        members[a].push(i);
    }
    Ok(fit
        .centroids
        .iter()
        .zip(members)
        .enumerate()
        .map(|(id, (c, member_indices))| Cluster {
            id,
            centroid: unproject_local(*c, origin),
            size: member_indices.len(),
            member_indices,
        })
        .collect())
}

fn mean_location(points: &[LatLon]) -> LatLon {
    let n = points.len() as f64;
    let (lat, lon) = points
        .iter()
        .fold((0.0, 0.0), |(a, b), p| (a + p.lat, b + p.lon));
    LatLon::new(lat / n, lon / n)
}

/// Cluster size → number of clusters of that size.
pub fn cluster_size_histogram(clusters: &[Cluster]) -> BTreeMap<usize, usize> {
    let mut h = BTreeMap::new();
    for c in clusters {
        *h.entry(c.size).or_insert(0) += 1;
    }
    h
}

/// Clusters with at most `max_size` members, smallest first, ties by id.
pub fn select_small_clusters(clusters: &[Cluster], max_size: usize) -> Vec<Cluster> {
    let mut small: Vec<Cluster> = clusters.iter().filter(|c| c.size <= max_size).cloned().collect();
    small.sort_by_key(|c| (c.size, c.id));
    small
}

pub fn write_clusters_csv<W: io::Write>(out: W, clusters: &[Cluster]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["cluster_id", "centroid_lat", "centroid_lon", "size"])?;
    for c in clusters {
        w.serialize((c.id, c.centroid.lat, c.centroid.lon, c.size))?;
    }
    w.flush()?;
    Ok(())
}

/// Centroids as a GeoJSON FeatureCollection of Points.
pub fn clusters_geojson(clusters: &[Cluster]) -> serde_json::Value {
    let features: Vec<_> = clusters
        .iter()
        .map(|c| {
            serde_json::json!({
                "type": "Feature",
                "geometry": {"type": "Point", "coordinates": [c.centroid.lon, c.centroid.lat]},
                "properties": {"cluster_id": c.id, "size": c.size},
            })
        })
        .collect();
    serde_json::json!({"type": "FeatureCollection", "features": features})
}
