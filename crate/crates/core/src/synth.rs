//! Synthetic fleets with known ground truth.
//!
//! Each scooter alternates between parked dwells and events. An event is a
//! rider trip, a short operator shuffle (< 100 m), or a maintenance pickup
//! that keeps the scooter off the feed for more than an hour. The scooter is
//! absent from every snapshot taken strictly between departure and arrival.
//!
//! Dwells last at least two snapshot intervals, so every event is visible on
//! its own: the scooter is observed at the old location before it leaves and
//! at the new location before it leaves again.

use crate::feed::{ScooterObservation, Snapshot};
use crate::geo::{destination_point, LatLon};
use crate::region::{Region, RegionError};
use crate::rng::RandomSource;
use crate::trips::{Trip, TripRecord};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use std::io;

/// 2019-11-12T00:00:00Z
pub const DEFAULT_START: i64 = 1_573_516_800;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hotspot {
    pub center: LatLon,
    pub weight: f64,
    pub spread_m: f64,
}

fn default_provider() -> String {
    "synth".into()
}

fn default_start() -> i64 {
    DEFAULT_START
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetConfig {
    #[serde(default = "default_provider")]
    pub provider: String,
    pub n_scooters: usize,
    /// Service area ring, open or closed.
    pub area: Vec<LatLon>,
    /// Rider trips per scooter-hour.
    pub trip_rate: f64,
    /// Uniform `[min, max]` straight-line trip distance, meters.
    pub trip_distance_m: (f64, f64),
    /// Uniform `[min, max]` trip duration, seconds.
    pub trip_duration_s: (i64, i64),
    /// Fleet-wide relocation events per hour, split evenly between shuffles
    /// and maintenance pickups.
    pub relocation_rate: f64,
    pub snapshot_interval_s: u32,
    pub duration_h: f64,
    /// When non-empty, parking spots and trip destinations are drawn from
    /// these instead of uniformly over the area.
    #[serde(default)]
    pub hotspots: Vec<Hotspot>,
    pub seed: u64,
    #[serde(default = "default_start")]
    pub start_time: i64,
    /// `(from_h, to_h)` offsets from the start during which no event is in progress.
    #[serde(default)]
    pub quiet_periods_h: Vec<(f64, f64)>,
    /// Give a scooter a fresh id after every event.
    #[serde(default)]
    pub rotate_ids: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid fleet config: {0}")]
    Config(String),
    #[error("service area: {0}")]
    Area(#[from] RegionError),
    #[error("could not place a scooter inside the service area")]
    Placement,
}

impl FleetConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Config(m.into()));
        if self.n_scooters == 0 {
            return bad("n_scooters must be positive");
        }
        if !(self.trip_rate >= 0.0 && self.trip_rate.is_finite()) {
            return bad("trip_rate must be non-negative");
        }
        if !(self.relocation_rate >= 0.0 && self.relocation_rate.is_finite()) {
            return bad("relocation_rate must be non-negative");
        }
        let (dmin, dmax) = self.trip_distance_m;
        if !(dmin >= 0.0 && dmin <= dmax && dmax.is_finite()) {
            return bad("trip_distance_m must satisfy 0 <= min <= max");
        }
        let (tmin, tmax) = self.trip_duration_s;
        if !(tmin > 0 && tmin <= tmax) {
            return bad("trip_duration_s must satisfy 0 < min <= max");
        }
        if self.snapshot_interval_s == 0 {
            return bad("snapshot_interval_s must be positive");
        }
        if !(self.duration_h > 0.0 && self.duration_h.is_finite()) {
            return bad("duration_h must be positive");
        }
        for h in &self.hotspots {
            if !(h.weight > 0.0 && h.spread_m >= 0.0 && h.center.is_valid()) {
                return bad("hotspots need a valid center, positive weight and non-negative spread");
            }
        }
        for &(a, b) in &self.quiet_periods_h {
            if !(a >= 0.0 && a < b) {
                return bad("quiet periods must satisfy 0 <= from < to");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    Trip,
    Shuffle,
    Maintenance,
}

impl EventKind {
    pub fn is_fake(self) -> bool {
        self != EventKind::Trip
    }
}

/// One movement of one scooter. Absent from the feed for `depart < t < arrive`.
#[derive(Debug, Clone, PartialEq)]
pub struct FleetEvent {
    pub scooter_id: String,
    pub kind: EventKind,
    pub from: LatLon,
    pub to: LatLon,
    pub depart: i64,
    pub arrive: i64,
}

impl FleetEvent {
    pub fn as_trip(&self) -> Trip {
        Trip::new(self.scooter_id.clone(), self.from, self.depart, self.to, self.arrive)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    pub trips: Vec<Trip>,
    /// Trip-shaped relocation events (fake trips).
    pub relocations: Vec<Trip>,
}

impl GroundTruth {
    pub fn from_events(events: &[FleetEvent]) -> Self {
        let mut gt = GroundTruth::default();
        for e in events {
            if e.kind.is_fake() {
                gt.relocations.push(e.as_trip());
            } else {
                gt.trips.push(e.as_trip());
            }
        }
        gt
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub snapshots: Vec<Snapshot>,
    pub events: Vec<FleetEvent>,
    pub truth: GroundTruth,
}

fn open_unit(rng: &mut RandomSource) -> f64 {
    1.0 - rng.random::<f64>()
}

/// Uniform in the region's lat/lon bounding box, rejected outside the region.
pub fn uniform_point_in(region: &Region, rng: &mut RandomSource) -> Option<LatLon> {
    let b = region.bbox();
    (0..10_000).find_map(|_| {
        let p = LatLon::new(
            rng.random_range(b.min_lat..=b.max_lat),
            rng.random_range(b.min_lon..=b.max_lon),
        );
        region.contains(p).then_some(p)
    })
}

/// 2-D Gaussian scatter with per-axis standard deviation `spread_m`.
pub fn gaussian_offset(center: LatLon, spread_m: f64, rng: &mut RandomSource) -> LatLon {
    let bearing = rng.random::<f64>() * TAU;
    let r_m = spread_m * (-2.0 * open_unit(rng).ln()).sqrt();
    destination_point(center, bearing, r_m / 1000.0)
}

/// `sizes[i]` points scattered around `centers[i]`; a test fixture for clustering.
pub fn planted_clusters(centers: &[LatLon], sizes: &[usize], spread_m: f64, seed: u64) -> Vec<LatLon> {
    let mut rng = RandomSource::new(seed);
    centers
        .iter()
        .zip(sizes)
        .flat_map(|(c, &n)| (0..n).map(|_| gaussian_offset(*c, spread_m, &mut rng)).collect::<Vec<_>>())
        .collect()
}

struct Sampler<'a> {
    config: &'a FleetConfig,
    area: &'a Region,
    total_weight: f64,
}

impl Sampler<'_> {
    fn hotspot_point(&self, rng: &mut RandomSource) -> Option<LatLon> {
        let mut pick = rng.random::<f64>() * self.total_weight;
        let spot = self
            .config
            .hotspots
            .iter()
            .find(|h| {
                pick -= h.weight;
                pick < 0.0
            })
            .unwrap_or_else(|| self.config.hotspots.last().expect("non-empty"));
        (0..32).find_map(|_| {
            let p = gaussian_offset(spot.center, spot.spread_m, rng);
            self.area.contains(p).then_some(p)
        })
    }

    fn parking_spot(&self, rng: &mut RandomSource) -> Option<LatLon> {
        if self.config.hotspots.is_empty() {
            uniform_point_in(self.area, rng)
        } else {
            self.hotspot_point(rng)
        }
    }

    fn trip_destination(&self, from: LatLon, rng: &mut RandomSource) -> Option<LatLon> {
        if !self.config.hotspots.is_empty() {
            return self.hotspot_point(rng);
        }
        let (lo, hi) = self.config.trip_distance_m;
        (0..32).find_map(|_| {
            let d = rng.random_range(lo..=hi);
            let p = destination_point(from, rng.random::<f64>() * TAU, d / 1000.0);
            self.area.contains(p).then_some(p)
        })
    }

    fn shuffle_destination(&self, from: LatLon, rng: &mut RandomSource) -> Option<LatLon> {
        (0..32).find_map(|_| {
            let d = rng.random_range(10.0..90.0);
            let p = destination_point(from, rng.random::<f64>() * TAU, d / 1000.0);
            self.area.contains(p).then_some(p)
        })
    }
}

/// First quiet period (absolute times) overlapping `[a, b]`.
fn quiet_overlap(quiet: &[(i64, i64)], a: i64, b: i64) -> Option<(i64, i64)> {
    quiet.iter().copied().find(|&(qa, qb)| a <= qb && b >= qa)
}

/// Simulates the fleet and renders one snapshot per interval (both ends inclusive).
pub fn generate(config: &FleetConfig) -> Result<SynthOutput, SynthError> {
    config.validate()?;
    let area = Region::from_ring("area", config.area.clone())?;
    let sampler = Sampler {
        config,
        area: &area,
        total_weight: config.hotspots.iter().map(|h| h.weight).sum(),
    };

    let interval = i64::from(config.snapshot_interval_s);
    let n_snaps = ((config.duration_h * 3600.0) as i64 / interval) + 1;
    let times: Vec<i64> = (0..n_snaps).map(|k| config.start_time + k * interval).collect();
    let end = *times.last().expect("at least one snapshot");
    let quiet: Vec<(i64, i64)> = config
        .quiet_periods_h
        .iter()
        .map(|&(a, b)| {
            (
                config.start_time + (a * 3600.0).round() as i64,
                config.start_time + (b * 3600.0).round() as i64,
            )
        })
        .collect();

    let trip_rate = config.trip_rate / 3600.0;
    let reloc_rate = config.relocation_rate / 3600.0 / config.n_scooters as f64;
    let total_rate = trip_rate + reloc_rate;
    let min_dwell = 2 * interval;
    let maintenance_min = 3600 + 2 * interval + 60;

    let root = RandomSource::new(config.seed);
    let mut initial = Vec::with_capacity(config.n_scooters);
    let mut events = Vec::new();

    for i in 0..config.n_scooters {
        let mut rng = root.substream(i as u64);
        let id = format!("SYN{i:05}");
        let mut loc = sampler.parking_spot(&mut rng).ok_or(SynthError::Placement)?;
        initial.push((id.clone(), loc));
        if total_rate <= 0.0 {
            continue;
        }
        let mut t = config.start_time;
        loop {
            let wait = (-open_unit(&mut rng).ln() / total_rate).round() as i64;
            let depart = t + min_dwell + wait;
            if depart >= end {
                break;
            }
            let roll = rng.random::<f64>() * total_rate;
            let (kind, to, duration) = if roll < trip_rate {
                let (lo, hi) = config.trip_duration_s;
                let dur = rng.random_range(lo..=hi);
                (EventKind::Trip, sampler.trip_destination(loc, &mut rng), dur)
            } else if roll < trip_rate + reloc_rate / 2.0 {
                let dur = rng.random_range(interval..=600.max(interval));
                (EventKind::Shuffle, sampler.shuffle_destination(loc, &mut rng), dur)
            } else {
                let dur = rng.random_range(maintenance_min..=4 * 3600);
                (EventKind::Maintenance, sampler.parking_spot(&mut rng), dur)
            };
            let arrive = depart + duration;
            if arrive > end {
                break;
            }
            if let Some((_, quiet_end)) = quiet_overlap(&quiet, depart, arrive) {
                t = quiet_end;
                continue;
            }
            match to {
                Some(to) => {
                    events.push(FleetEvent {
                        scooter_id: id.clone(),
                        kind,
                        from: loc,
                        to,
                        depart,
                        arrive,
                    });
                    loc = to;
                    t = arrive;
                }
                None => t = depart,
            }
        }
    }

    let snapshots = render_snapshots(
        &config.provider,
        config.snapshot_interval_s,
        &times,
        &initial,
        &events,
        config.rotate_ids,
    );
    events.sort_by(|a, b| (a.depart, &a.scooter_id).cmp(&(b.depart, &b.scooter_id)));
    let truth = GroundTruth::from_events(&events);
    Ok(SynthOutput {
        snapshots,
        events,
        truth,
    })
}

/// Renders feed snapshots at `times` from initial positions and per-scooter
/// events (each scooter's events must be ordered and non-overlapping).
pub fn render_snapshots(
    provider: &str,
    ttl_s: u32,
    times: &[i64],
    initial: &[(String, LatLon)],
    events: &[FleetEvent],
    rotate_ids: bool,
) -> Vec<Snapshot> {
    struct Track<'a> {
        base_id: &'a str,
        start: LatLon,
        events: Vec<&'a FleetEvent>,
    }
    let mut tracks: Vec<Track> = initial
        .iter()
        .map(|(id, loc)| Track {
            base_id: id,
            start: *loc,
            events: events.iter().filter(|e| &e.scooter_id == id).collect(),
        })
        .collect();
    for t in &mut tracks {
        t.events.sort_by_key(|e| e.depart);
    }

    times
        .iter()
        .map(|&now| {
            let mut observations: Vec<ScooterObservation> = tracks
                .iter()
                .filter_map(|track| {
                    // events that have fully completed by `now`
                    let done = track.events.iter().take_while(|e| e.arrive <= now).count();
                    if let Some(next) = track.events.get(done) {
                        if next.depart < now {
                            return None;
                        }
                    }
                    let loc = match done {
                        0 => track.start,
                        n => track.events[n - 1].to,
                    };
                    let id = if rotate_ids && done > 0 {
                        format!("{}-r{done}", track.base_id)
                    } else {
                        track.base_id.to_owned()
                    };
                    Some(ScooterObservation {
                        scooter_id: id,
                        lat: loc.lat,
                        lon: loc.lon,
                        is_reserved: false,
                        is_disabled: false,
                    })
                })
                .collect();
            observations.sort_by(|a, b| a.scooter_id.cmp(&b.scooter_id));
            Snapshot {
                provider: provider.to_owned(),
                captured_at: now,
                ttl_s,
                observations,
            }
        })
        .collect()
}

/// Ground truth in the trip CSV schema plus an `is_fake` column, ordered by start time.
pub fn write_ground_truth_csv<W: io::Write>(out: W, truth: &GroundTruth) -> csv::Result<()> {
    let mut rows: Vec<(&Trip, bool)> = truth
        .trips
        .iter()
        .map(|t| (t, false))
        .chain(truth.relocations.iter().map(|t| (t, true)))
        .collect();
    rows.sort_by(|a, b| (a.0.start_time, &a.0.scooter_id).cmp(&(b.0.start_time, &b.0.scooter_id)));
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record([
        "scooter_id",
        "start_time",
        "end_time",
        "start_lat",
        "start_lon",
        "end_lat",
        "end_lon",
        "distance_m",
        "duration_s",
        "is_fake",
    ])?;
    for (t, is_fake) in rows {
        let r = TripRecord::from(t);
        w.write_record([
            r.scooter_id,
            r.start_time.to_string(),
            r.end_time.to_string(),
            r.start_lat.to_string(),
            r.start_lon.to_string(),
            r.end_lat.to_string(),
            r.end_lon.to_string(),
            r.distance_m.to_string(),
            r.duration_s.to_string(),
            is_fake.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
