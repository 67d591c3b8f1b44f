use micromob::feed::{ReadOptions, SnapshotStore};
use micromob::synth::{FleetConfig, DEFAULT_START};
use micromob::trips::read_trips_csv;
use micromob::utility::read_report_csv;
use micromob::LatLon;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Output};

fn micromob(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_micromob"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = micromob(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn fleet(trip_rate: f64, relocation_rate: f64) -> FleetConfig {
    FleetConfig {
        provider: "synth".into(),
        n_scooters: 30,
        area: vec![
            LatLon::new(34.00, -118.30),
            LatLon::new(34.00, -118.20),
            LatLon::new(34.08, -118.20),
            LatLon::new(34.08, -118.30),
        ],
        trip_rate,
        trip_distance_m: (50.0, 3000.0),
        trip_duration_s: (120, 3000),
        relocation_rate,
        snapshot_interval_s: 60,
        duration_h: 3.0,
        hotspots: vec![],
        seed: 5,
        start_time: DEFAULT_START,
        quiet_periods_h: vec![],
        rotate_ids: false,
    }
}

fn write_fleet(dir: &Path, cfg: &FleetConfig) {
    std::fs::write(dir.join("fleet.json"), serde_json::to_vec(cfg).unwrap()).unwrap();
}

fn square_geojson(name: &str, lat0: f64, lon0: f64, lat1: f64, lon1: f64) -> serde_json::Value {
    serde_json::json!({
        "type": "Feature",
        "properties": {"name": name},
        "geometry": {"type": "Polygon", "coordinates": [[[lon0, lat0], [lon1, lat0], [lon1, lat1], [lon0, lat1], [lon0, lat0]]]},
    })
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

#[test]
fn synth_reconstruct_matches_truth() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_fleet(d, &fleet(0.8, 10.0));
    ok(d, &["synth", "--config", "fleet.json", "--output", "archive.jsonl", "--truth", "truth.csv"]);
    ok(d, &["reconstruct", "--store", "archive.jsonl", "--output", "trips.csv"]);

    let trips = read_trips_csv(std::fs::File::open(d.join("trips.csv")).unwrap()).unwrap();
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(d.join("truth.csv"))
        .unwrap();
    let truth: Vec<(String, i64, i64, f64, bool)> = reader
        .records()
        .map(|r| {
            let r = r.unwrap();
            (
                r[0].to_string(),
                r[1].parse().unwrap(),
                r[2].parse().unwrap(),
                r[7].parse().unwrap(),
                r[9].parse().unwrap(),
            )
        })
        .filter(|(_, s, e, dist, fake)| !fake && *dist >= 100.0 && e - s <= 3600)
        .collect();
    assert!(!truth.is_empty());
    assert_eq!(trips.len(), truth.len());
    for t in &trips {
        assert!(
            truth.iter().any(|(id, s, e, _, _)| id == &t.scooter_id
                && (t.start_time - s).abs() <= 60
                && (t.end_time - e).abs() <= 60),
            "{t:?} not in truth"
        );
    }
}

#[test]
fn static_archive_gives_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_fleet(d, &fleet(0.0, 0.0));
    ok(d, &["synth", "--config", "fleet.json", "--output", "archive.jsonl"]);
    ok(d, &["reconstruct", "--store", "archive.jsonl", "--output", "trips.csv"]);
    let text = std::fs::read_to_string(d.join("trips.csv")).unwrap();
    let body: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(
        body,
        vec!["scooter_id,start_time,end_time,start_lat,start_lon,end_lat,end_lon,distance_m,duration_s"]
    );
    assert!(text.starts_with("# command: reconstruct\n# version: "));
    assert!(text.contains("\"min_distance_m\":100.0"));
    assert!(text.contains("\"max_duration_s\":3600"));
}

#[test]
fn missing_archive_is_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = micromob(dir.path(), &["reconstruct", "--store", "nope.jsonl"]);
    assert_eq!(exit_code(&out), 1);
}

#[test]
fn cluster_k_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_fleet(d, &fleet(0.5, 0.0));
    ok(d, &["synth", "--config", "fleet.json", "--output", "archive.jsonl"]);
    ok(d, &["reconstruct", "--store", "archive.jsonl", "--output", "trips.csv"]);
    let n = read_trips_csv(std::fs::File::open(d.join("trips.csv")).unwrap()).unwrap().len();
    assert!(n > 2);

    let k = n.to_string();
    ok(d, &["cluster", "--trips", "trips.csv", "--k", &k, "--output", "clusters.csv"]);
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(d.join("clusters.csv"))
        .unwrap();
    let sizes: Vec<usize> = r.records().map(|x| x.unwrap()[3].parse().unwrap()).collect();
    assert_eq!(sizes.len(), n);
    assert!(sizes.iter().all(|&s| s == 1));

    let too_many = (n + 1).to_string();
    let out = micromob(d, &["cluster", "--trips", "trips.csv", "--k", &too_many]);
    assert_eq!(exit_code(&out), 2);

    ok(d, &["cluster", "--trips", "trips.csv", "--k", "2", "--max-size", "1000", "--format", "geojson", "--output", "c.geojson"]);
    let fc: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("c.geojson")).unwrap()).unwrap();
    assert_eq!(fc["features"].as_array().unwrap().len(), 2);
    assert_eq!(fc["meta"]["seed"], 0);
}

#[test]
fn sanitize_records_epsilon_and_keeps_schema() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_fleet(d, &fleet(0.5, 2.0));
    ok(d, &["synth", "--config", "fleet.json", "--output", "archive.jsonl"]);
    ok(d, &["sanitize", "--store", "archive.jsonl", "--radius-km", "0.25", "--ratio", "6", "--seed", "3", "--output", "noisy.jsonl"]);

    let noisy = SnapshotStore::new(d.join("noisy.jsonl"));
    let meta = noisy.read_meta().unwrap().unwrap();
    assert_eq!(meta.command, "sanitize");
    assert_eq!(meta.seed, Some(3));
    let eps = meta.params["epsilon"].as_f64().unwrap();
    assert!((eps - 4.0 * 6f64.ln()).abs() < 1e-12);

    let before = SnapshotStore::new(d.join("archive.jsonl")).read_all(ReadOptions::default()).unwrap();
    let after = noisy.read_all(ReadOptions::default()).unwrap();
    assert_eq!(before.len(), after.len());
    let mut moved = 0;
    for (a, b) in before.iter().zip(&after) {
        assert_eq!((a.captured_at, a.ttl_s, &a.provider), (b.captured_at, b.ttl_s, &b.provider));
        assert_eq!(a.observations.len(), b.observations.len());
        for (x, y) in a.observations.iter().zip(&b.observations) {
            assert_eq!(x.scooter_id, y.scooter_id);
            assert_eq!((x.is_reserved, x.is_disabled), (y.is_reserved, y.is_disabled));
            moved += (x.location() != y.location()) as usize;
        }
    }
    assert!(moved > 0);
    ok(d, &["reconstruct", "--store", "noisy.jsonl", "--output", "trips.csv"]);
}

#[test]
fn sanitize_flag_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for args in [
        vec!["sanitize", "--store", "a", "--output", "o"],
        vec!["sanitize", "--store", "a", "--epsilon", "2", "--radius-km", "1", "--ratio", "6", "--output", "o"],
        vec!["sanitize", "--store", "a", "--epsilon", "-2", "--output", "o"],
        vec!["sanitize", "--store", "a", "--epsilon", "2"],
    ] {
        assert_eq!(exit_code(&micromob(d, &args)), 2, "{args:?}");
    }
}

#[test]
fn evaluate_report_shape() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_fleet(d, &fleet(0.0, 0.0));
    ok(d, &["synth", "--config", "fleet.json", "--output", "archive.jsonl"]);
    let boundary = serde_json::json!({"type": "FeatureCollection", "features": [square_geojson("city", 34.0, -118.3, 34.08, -118.2)]});
    let hoods = serde_json::json!({"type": "FeatureCollection", "features": [
        square_geojson("west", 34.0, -118.3, 34.08, -118.25),
        square_geojson("east", 34.0, -118.25, 34.08, -118.2),
    ]});
    std::fs::write(d.join("boundary.geojson"), boundary.to_string()).unwrap();
    std::fs::write(d.join("hoods.geojson"), hoods.to_string()).unwrap();

    ok(d, &["evaluate", "--store", "archive.jsonl", "--boundary", "boundary.geojson", "--neighborhoods", "hoods.geojson", "--trials", "10", "--output", "report.csv"]);
    let text = std::fs::read_to_string(d.join("report.csv")).unwrap();
    assert!(text.contains("# command: evaluate"));
    assert!(text.contains("# seed: 0"));
    let rows = read_report_csv(text.as_bytes()).unwrap();
    assert_eq!(rows.len(), 21);
    assert_eq!(rows[0].r_km, 0.0);
    assert_eq!(rows[0].mean_outside, Some(0.0));
    assert_eq!(rows[0].mean_abs_error, Some(0.0));
    assert_eq!(rows[0].mean_escapes, Some(0.0));
    assert!(rows[20].mean_outside.unwrap() > 0.0);

    ok(d, &["evaluate", "--store", "archive.jsonl", "--boundary", "boundary.geojson", "--r-grid", "0:0.5:0.25", "--trials", "5", "--format", "json", "--output", "report.json"]);
    let report = micromob::utility::read_report_json(std::fs::File::open(d.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.rows.len(), 3);
    assert_eq!(report.trials, 5);

    let out = micromob(d, &["evaluate", "--store", "archive.jsonl", "--boundary", "missing.geojson"]);
    assert_eq!(exit_code(&out), 1);
    let out = micromob(d, &["evaluate", "--store", "archive.jsonl", "--boundary", "boundary.geojson", "--r-grid", "1:0"]);
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn synth_invalid_config_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_fleet(d, &FleetConfig { n_scooters: 0, ..fleet(1.0, 1.0) });
    assert_eq!(exit_code(&micromob(d, &["synth", "--config", "fleet.json", "--output", "a.jsonl"])), 2);
    std::fs::write(d.join("fleet.json"), "{not json").unwrap();
    assert_eq!(exit_code(&micromob(d, &["synth", "--config", "fleet.json", "--output", "a.jsonl"])), 2);
}

#[test]
fn fleet_estimate_and_cap() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_fleet(d, &fleet(0.0, 0.0));
    ok(d, &["synth", "--config", "fleet.json", "--output", "archive.jsonl"]);
    let from = DEFAULT_START.to_string();
    let to = (DEFAULT_START + 3600).to_string();
    let out = ok(d, &["fleet", "--store", "archive.jsonl", "--from", &from, "--to", &to, "--cap", "25", "--format", "json"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["estimate"], 30);
    assert_eq!(v["exceeds_by"], 5);
}

#[test]
fn scrape_bad_url_and_zero_duration() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = micromob(d, &["scrape", "--url", "::nope", "--provider", "p", "--store", "a.jsonl", "--duration", "1"]);
    assert_eq!(exit_code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad --url"));
    let out = micromob(d, &["scrape", "--url", "ftp://x/y", "--provider", "p", "--store", "a.jsonl", "--duration", "1"]);
    assert_eq!(exit_code(&out), 2);

    ok(d, &["scrape", "--url", "http://127.0.0.1:9/feed", "--provider", "p", "--store", "empty.jsonl", "--duration", "0"]);
    let store = SnapshotStore::new(d.join("empty.jsonl"));
    assert!(store.read_all(ReadOptions::default()).unwrap().is_empty());
    assert_eq!(store.read_meta().unwrap().unwrap().command, "scrape");
}

fn gbfs_doc(last_updated: i64, ttl: u32) -> String {
    serde_json::json!({
        "last_updated": last_updated,
        "ttl": ttl,
        "data": {"bikes": [
            {"bike_id": "a", "lat": 34.05, "lon": -118.25, "is_reserved": 0, "is_disabled": 0},
            {"bike_id": "b", "lat": 34.06, "lon": -118.24, "is_reserved": 0, "is_disabled": 0},
        ]}
    })
    .to_string()
}

/// Serves `last_updated = 1000 + k` on the k-th request, forever.
fn stub_server() -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    std::thread::spawn(move || {
        for (k, conn) in listener.incoming().enumerate() {
            let Ok(mut conn) = conn else { continue };
            let mut reader = BufReader::new(conn.try_clone().unwrap());
            let mut line = String::new();
            while reader.read_line(&mut line).map(|n| n > 0).unwrap_or(false) && line != "\r\n" {
                line.clear();
            }
            let body = gbfs_doc(1000 + k as i64, 60);
            let _ = write!(
                conn,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
        }
    });
    format!("http://{addr}/free_bike_status.json")
}

#[test]
fn scrape_stub_server() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let url = stub_server();
    ok(d, &["scrape", "--url", &url, "--provider", "stub", "--interval", "1", "--duration", "3", "--store", "a.jsonl"]);
    let snaps = SnapshotStore::new(d.join("a.jsonl")).read_all(ReadOptions::default()).unwrap();
    assert_eq!(snaps.len(), 3);
    assert_eq!(snaps.iter().map(|s| s.captured_at).collect::<Vec<_>>(), vec![1000, 1001, 1002]);
    assert!(snaps.iter().all(|s| s.provider == "stub" && s.len() == 2));
}

#[test]
fn scrape_file_url() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("feed.json"), gbfs_doc(500, 60)).unwrap();
    let url = format!("file://{}", d.join("feed.json").display());
    ok(d, &["scrape", "--url", &url, "--provider", "f", "--interval", "1", "--duration", "2", "--store", "a.jsonl"]);
    let snaps = SnapshotStore::new(d.join("a.jsonl")).read_all(ReadOptions::default()).unwrap();
    // the second poll sees the same last_updated and is skipped
    assert_eq!(snaps.len(), 1);
}
