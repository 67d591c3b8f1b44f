//! Trip reconstruction from consecutive availability snapshots, relocation
//! filtering, and parked-count series for fleet-size estimation.

use crate::feed::{ObservationFilter, Snapshot};
use crate::geo::{haversine_distance, LatLon};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io;
use std::num::NonZeroU64;

/// A reconstructed ride.
#[derive(Debug, Clone, PartialEq)]
pub struct Trip {
    pub scooter_id: String,
    pub start: LatLon,
    pub end: LatLon,
    /// Last time the scooter was seen at `start`.
    pub start_time: i64,
    /// First time the scooter was seen at `end`.
    pub end_time: i64,
    pub distance_m: f64,
    pub duration_s: i64,
}

impl Trip {
    /// Derives distance and duration from the endpoints.
    pub fn new(scooter_id: impl Into<String>, start: LatLon, start_time: i64, end: LatLon, end_time: i64) -> Self {
        Self {
            scooter_id: scooter_id.into(),
            start,
            end,
            start_time,
            end_time,
            distance_m: haversine_distance(start, end),
            duration_s: end_time - start_time,
        }
    }
}

/// Thresholds separating rides from operator relocations. Both inclusive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripFilter {
    pub min_distance_m: f64,
    pub max_duration_s: i64,
}

impl Default for TripFilter {
    fn default() -> Self {
        Self {
            min_distance_m: 100.0,
            max_duration_s: 3600,
        }
    }
}

impl TripFilter {
    pub fn new(min_distance_m: f64, max_duration_s: i64) -> Result<Self, TripError> {
        if min_distance_m.is_nan() || min_distance_m < 0.0 || max_duration_s <= 0 {
            return Err(TripError::InvalidFilter {
                min_distance_m,
                max_duration_s,
            });
        }
        Ok(Self {
            min_distance_m,
            max_duration_s,
        })
    }

    pub fn keeps(&self, trip: &Trip) -> bool {
        trip.distance_m >= self.min_distance_m && trip.duration_s <= self.max_duration_s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconstructOptions {
    /// Displacements at or below this are treated as GPS jitter.
    pub min_move_m: f64,
    /// An absence longer than this resets the scooter's history instead of
    /// producing a trip (provider-side id recycling).
    pub max_absence_s: i64,
}

impl Default for ReconstructOptions {
    fn default() -> Self {
        Self {
            min_move_m: 5.0,
            max_absence_s: 24 * 3600,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TripError {
    #[error("snapshots not strictly ascending: {prev} then {next}")]
    Unsorted { prev: i64, next: i64 },
    #[error("mixed providers: {0} and {1}")]
    MixedProviders(String, String),
    #[error("invalid trip filter (min distance {min_distance_m} m, max duration {max_duration_s} s)")]
    InvalidFilter { min_distance_m: f64, max_duration_s: i64 },
    #[error("no series points inside window [{from}, {to}]")]
    EmptyWindow { from: i64, to: i64 },
}

struct Sighting {
    loc: LatLon,
    last_seen: i64,
}

/// Diffs consecutive snapshots per scooter id and emits one trip per
/// location change larger than `min_move_m`. Output is ordered by
/// `(end_time, scooter_id)`.
pub fn reconstruct_trips(snapshots: &[Snapshot], opts: ReconstructOptions) -> Result<Vec<Trip>, TripError> {
    check_sequence(snapshots)?;
    let mut history: HashMap<&str, Sighting> = HashMap::new();
    let mut trips = Vec::new();

    for snap in snapshots {
        let t = snap.captured_at;
        for obs in &snap.observations {
            let loc = obs.location();
            match history.get_mut(obs.scooter_id.as_str()) {
                None => {
                    history.insert(&obs.scooter_id, Sighting { loc, last_seen: t });
                }
                Some(prev) if t - prev.last_seen > opts.max_absence_s => {
                    *prev = Sighting { loc, last_seen: t };
                }
                Some(prev) => {
                    if haversine_distance(prev.loc, loc) > opts.min_move_m {
                        trips.push(Trip::new(obs.scooter_id.clone(), prev.loc, prev.last_seen, loc, t));
                        prev.loc = loc;
                    }
                    prev.last_seen = t;
                }
            }
        }
    }
    trips.sort_by(|a, b| {
        a.end_time
            .cmp(&b.end_time)
            .then_with(|| a.scooter_id.cmp(&b.scooter_id))
    });
    Ok(trips)
}

fn check_sequence(snapshots: &[Snapshot]) -> Result<(), TripError> {
    for pair in snapshots.windows(2) {
        if pair[0].provider != pair[1].provider {
            return Err(TripError::MixedProviders(pair[0].provider.clone(), pair[1].provider.clone()));
        }
        if pair[1].captured_at <= pair[0].captured_at {
            return Err(TripError::Unsorted {
                prev: pair[0].captured_at,
                next: pair[1].captured_at,
            });
        }
    }
    Ok(())
}

pub fn filter_trips(trips: &[Trip], filter: &TripFilter) -> Vec<Trip> {
    trips.iter().filter(|t| filter.keeps(t)).cloned().collect()
}

/// Parked-vehicle count per snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParkedCountSeries {
    pub provider: String,
    pub points: Vec<(i64, u64)>,
}

pub fn parked_count_series(snapshots: &[Snapshot], filter: ObservationFilter) -> Result<ParkedCountSeries, TripError> {
    check_sequence(snapshots)?;
    let provider = snapshots.first().map(|s| s.provider.clone()).unwrap_or_default();
    let points = snapshots
        .iter()
        .map(|s| {
            let n = s.observations.iter().filter(|o| filter.admits(o)).count();
            (s.captured_at, n as u64)
        })
        .collect();
    Ok(ParkedCountSeries { provider, points })
}

/// Peak parked count inside `[from, to]`; quiet periods approach the fleet size.
pub fn estimate_fleet_size(series: &ParkedCountSeries, from: i64, to: i64) -> Result<u64, TripError> {
    series
        .points
        .iter()
        .filter(|(t, _)| (from..=to).contains(t))
        .map(|&(_, c)| c)
        .max()
        .ok_or(TripError::EmptyWindow { from, to })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CapVerdict {
    Compliant,
    Exceeds { by: u64 },
}

pub fn check_device_cap(estimate: u64, cap: NonZeroU64) -> CapVerdict {
    match estimate.checked_sub(cap.get()) {
        Some(by) if by > 0 => CapVerdict::Exceeds { by },
        _ => CapVerdict::Compliant,
    }
}

/// Flat CSV row for trip export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripRecord {
    pub scooter_id: String,
    pub start_time: i64,
    pub end_time: i64,
    pub start_lat: f64,
    pub start_lon: f64,
    pub end_lat: f64,
    pub end_lon: f64,
    pub distance_m: f64,
    pub duration_s: i64,
}

impl From<&Trip> for TripRecord {
    fn from(t: &Trip) -> Self {
        Self {
            scooter_id: t.scooter_id.clone(),
            start_time: t.start_time,
            end_time: t.end_time,
            start_lat: t.start.lat,
            start_lon: t.start.lon,
            end_lat: t.end.lat,
            end_lon: t.end.lon,
            distance_m: t.distance_m,
            duration_s: t.duration_s,
        }
    }
}

impl From<TripRecord> for Trip {
    fn from(r: TripRecord) -> Self {
        Self {
            scooter_id: r.scooter_id,
            start: LatLon::new(r.start_lat, r.start_lon),
            end: LatLon::new(r.end_lat, r.end_lon),
            start_time: r.start_time,
            end_time: r.end_time,
            distance_m: r.distance_m,
            duration_s: r.duration_s,
        }
    }
}

pub fn write_trips_csv<W: io::Write>(out: W, trips: &[Trip]) -> csv::Result<()> {
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
    ])?;
    for t in trips {
        w.serialize(TripRecord::from(t))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads trips written by [`write_trips_csv`]; `#` lines are metadata comments.
pub fn read_trips_csv<R: io::Read>(input: R) -> csv::Result<Vec<Trip>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
    r.deserialize::<TripRecord>()
        .map(|rec| rec.map(Trip::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feed::ScooterObservation;
    use crate::geo::destination_point;
    use proptest::prelude::*;

    fn obs(id: &str, loc: LatLon) -> ScooterObservation {
        ScooterObservation {
            scooter_id: id.into(),
            lat: loc.lat,
            lon: loc.lon,
            is_reserved: false,
            is_disabled: false,
        }
    }

    fn snap(t: i64, obs: Vec<ScooterObservation>) -> Snapshot {
        Snapshot {
            provider: "spin".into(),
            captured_at: t,
            ttl_s: 60,
            observations: obs,
        }
    }

    const L1: LatLon = LatLon::new(34.0201, -118.2763);

    #[test]
    fn stationary_scooter_has_no_trips() {
        let snaps: Vec<_> = (0..5).map(|i| snap(i * 60, vec![obs("a", L1)])).collect();
        assert!(reconstruct_trips(&snaps, Default::default()).unwrap().is_empty());
    }

    #[test]
    fn move_between_snapshots() {
        let l2 = destination_point(L1, 1.0, 0.6);
        let snaps = vec![
            snap(60, vec![obs("a", L1)]),
            snap(120, vec![obs("a", L1)]),
            snap(180, vec![obs("a", l2)]),
        ];
        let trips = reconstruct_trips(&snaps, Default::default()).unwrap();
        assert_eq!(trips.len(), 1);
        let t = &trips[0];
        assert_eq!((t.start, t.start_time), (L1, 120));
        assert_eq!((t.end, t.end_time), (l2, 180));
        assert!((t.distance_m - 600.0).abs() < 1e-6);
        assert_eq!(t.duration_s, 60);
    }

    #[test]
    fn absence_spans_gap() {
        let l2 = destination_point(L1, 2.0, 1.5);
        let snaps = vec![
            snap(60, vec![obs("a", L1)]),
            snap(120, vec![obs("a", L1)]),
            snap(180, vec![]),
            snap(240, vec![]),
            snap(300, vec![]),
            snap(360, vec![obs("a", l2)]),
        ];
        let trips = reconstruct_trips(&snaps, Default::default()).unwrap();
        assert_eq!(trips.len(), 1);
        assert_eq!((trips[0].start_time, trips[0].end_time), (120, 360));
    }

    #[test]
    fn vanished_scooter_yields_nothing() {
        let snaps = vec![snap(60, vec![obs("a", L1)]), snap(120, vec![]), snap(180, vec![])];
        assert!(reconstruct_trips(&snaps, Default::default()).unwrap().is_empty());
    }

    #[test]
    fn jitter_below_floor_ignored() {
        let wobble = destination_point(L1, 0.3, 0.003);
        let snaps = vec![
            snap(60, vec![obs("a", L1)]),
            snap(120, vec![obs("a", wobble)]),
            snap(180, vec![obs("a", L1)]),
        ];
        assert!(reconstruct_trips(&snaps, Default::default()).unwrap().is_empty());
    }

    #[test]
    fn long_absence_resets_history() {
        let l2 = destination_point(L1, 0.0, 2.0);
        let snaps = vec![snap(0, vec![obs("a", L1)]), snap(25 * 3600, vec![obs("a", l2)])];
        assert!(reconstruct_trips(&snaps, Default::default()).unwrap().is_empty());
        let snaps = vec![snap(0, vec![obs("a", L1)]), snap(23 * 3600, vec![obs("a", l2)])];
        assert_eq!(reconstruct_trips(&snaps, Default::default()).unwrap().len(), 1);
    }

    #[test]
    fn rejects_bad_sequences() {
        let unsorted = vec![snap(120, vec![]), snap(60, vec![])];
        assert!(matches!(
            reconstruct_trips(&unsorted, Default::default()),
            Err(TripError::Unsorted { .. })
        ));
        let mut other = snap(180, vec![]);
        other.provider = "bird".into();
        let mixed = vec![snap(60, vec![]), other];
        assert!(matches!(
            reconstruct_trips(&mixed, Default::default()),
            Err(TripError::MixedProviders(..))
        ));
    }

    fn trip(distance_m: f64, duration_s: i64) -> Trip {
        let end = destination_point(L1, 0.5, distance_m / 1000.0);
        Trip::new("a", L1, 0, end, duration_s)
    }

    #[test]
    fn filter_thresholds() {
        let f = TripFilter::default();
        assert!(!f.keeps(&trip(50.0, 600)));
        assert!(!f.keeps(&trip(500.0, 7200)));
        assert!(f.keeps(&trip(150.0, 600)));
        // inclusive at both limits
        let exact = Trip {
            distance_m: 100.0,
            ..trip(100.0, 3600)
        };
        assert!(f.keeps(&exact));
        assert!(!f.keeps(&trip(150.0, 3601)));
        assert!(TripFilter::new(-1.0, 10).is_err());
        assert!(TripFilter::new(1.0, 0).is_err());
    }

    #[test]
    fn count_series_and_fleet_size() {
        let ids = |n: usize| (0..n).map(|i| obs(&format!("s{i}"), L1)).collect::<Vec<_>>();
        let snaps = vec![snap(1, ids(5)), snap(2, ids(7)), snap(3, ids(6))];
        let series = parked_count_series(&snaps, Default::default()).unwrap();
        assert_eq!(series.points, vec![(1, 5), (2, 7), (3, 6)]);
        assert_eq!(estimate_fleet_size(&series, 1, 3).unwrap(), 7);
        assert_eq!(estimate_fleet_size(&series, 3, 3).unwrap(), 6);
        assert!(matches!(
            estimate_fleet_size(&series, 10, 20),
            Err(TripError::EmptyWindow { .. })
        ));

        let empty = parked_count_series(&[snap(1, vec![])], Default::default()).unwrap();
        assert_eq!(empty.points, vec![(1, 0)]);

        let constant = ParkedCountSeries {
            provider: "p".into(),
            points: (0..10).map(|t| (t, 10)).collect(),
        };
        assert_eq!(estimate_fleet_size(&constant, 0, 9).unwrap(), 10);
        let peaked = ParkedCountSeries {
            provider: "p".into(),
            points: vec![(1, 5), (2, 9), (3, 7)],
        };
        assert_eq!(estimate_fleet_size(&peaked, 1, 3).unwrap(), 9);
    }

    #[test]
    fn count_series_flags() {
        let mut reserved = obs("r", L1);
        reserved.is_reserved = true;
        let mut disabled = obs("d", L1);
        disabled.is_disabled = true;
        let snaps = vec![snap(1, vec![obs("a", L1), reserved, disabled])];
        let only_parked = ObservationFilter {
            include_reserved: false,
            include_disabled: false,
        };
        assert_eq!(parked_count_series(&snaps, only_parked).unwrap().points, vec![(1, 1)]);
        assert_eq!(parked_count_series(&snaps, Default::default()).unwrap().points, vec![(1, 3)]);
    }

    #[test]
    fn device_cap() {
        let cap = NonZeroU64::new(3000).unwrap();
        assert_eq!(check_device_cap(2999, cap), CapVerdict::Compliant);
        assert_eq!(check_device_cap(3000, cap), CapVerdict::Compliant);
        assert_eq!(check_device_cap(3200, cap), CapVerdict::Exceeds { by: 200 });
    }

    #[test]
    fn csv_roundtrip() {
        let trips = vec![trip(150.0, 600), trip(2500.0, 1200)];
        let mut buf = Vec::new();
        write_trips_csv(&mut buf, &trips).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(
            "scooter_id,start_time,end_time,start_lat,start_lon,end_lat,end_lon,distance_m,duration_s\n"
        ));
        assert_eq!(read_trips_csv(&buf[..]).unwrap(), trips);

        let mut empty = Vec::new();
        write_trips_csv(&mut empty, &[]).unwrap();
        assert_eq!(empty.iter().filter(|&&b| b == b'\n').count(), 1);
    }

    proptest! {
        #[test]
        fn filter_is_subset_and_idempotent(
            spec in prop::collection::vec((0.0..3000.0f64, 1i64..10_000), 0..40),
            min_d in 0.0..500.0f64, max_t in 1i64..8000,
        ) {
            let trips: Vec<_> = spec.iter().map(|&(d, t)| trip(d, t)).collect();
            let f = TripFilter::new(min_d, max_t).unwrap();
            let once = filter_trips(&trips, &f);
            prop_assert!(once.iter().all(|t| trips.contains(t)));
            prop_assert_eq!(filter_trips(&once, &f), once);
        }

        #[test]
        fn fleet_estimate_survives_subsampling(
            counts in prop::collection::vec(0u64..5000, 1..60),
            keep_mask in prop::collection::vec(any::<bool>(), 60),
        ) {
            let points: Vec<_> = counts.iter().enumerate().map(|(i, &c)| (i as i64, c)).collect();
            let full = ParkedCountSeries { provider: "p".into(), points: points.clone() };
            let peak = estimate_fleet_size(&full, 0, 100).unwrap();
            let peak_idx = counts.iter().position(|&c| c == peak).unwrap();
            let sub: Vec<_> = points.into_iter().enumerate()
                .filter(|(i, _)| *i == peak_idx || keep_mask[*i])
                .map(|(_, p)| p).collect();
            let sub = ParkedCountSeries { provider: "p".into(), points: sub };
            prop_assert_eq!(estimate_fleet_size(&sub, 0, 100).unwrap(), peak);
        }

        #[test]
        fn emitted_trips_satisfy_invariants(
            moves in prop::collection::vec((0.0..std::f64::consts::TAU, 0.0..2.0f64, any::<bool>()), 1..30),
        ) {
            let mut loc = L1;
            let mut snaps = vec![snap(0, vec![obs("a", loc)])];
            for (i, &(bearing, km, present)) in moves.iter().enumerate() {
                loc = destination_point(loc, bearing, km);
                let o = if present { vec![obs("a", loc)] } else { vec![] };
                snaps.push(snap((i as i64 + 1) * 60, o));
            }
            for t in reconstruct_trips(&snaps, Default::default()).unwrap() {
                prop_assert!(t.end_time > t.start_time);
                prop_assert_eq!(t.duration_s, t.end_time - t.start_time);
                prop_assert_eq!(t.distance_m, haversine_distance(t.start, t.end));
                prop_assert!(t.distance_m > 5.0);
            }
        }
    }
}
