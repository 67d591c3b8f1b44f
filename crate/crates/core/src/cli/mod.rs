//! Command-line front end. Every command reads and writes files only; outputs
//! carry a metadata header (command, version, seed, parameters).

use crate::cluster::{cluster_locations, clusters_geojson, select_small_clusters, write_clusters_csv, ClusterError};
use crate::feed::{
    poll_feed, ArchiveMeta, FeedSource, FileSource, HttpSource, ObservationFilter, PollConfig, ReadOptions,
    ScooterObservation, Snapshot, SnapshotStore, SystemPacer,
};
use crate::privacy::{epsilon_from, perturb};
use crate::region::{load_boundary_geojson, load_regions_geojson, Region, RegionSet};
use crate::rng::RandomSource;
use crate::synth::{generate, write_ground_truth_csv, FleetConfig, SynthError};
use crate::trips::{
    check_device_cap, estimate_fleet_size, filter_trips, parked_count_series, read_trips_csv, reconstruct_trips,
    write_trips_csv, CapVerdict, ReconstructOptions, TripFilter, TripRecord,
};
use crate::utility::{parse_grid, run_experiment, write_report_csv, ExperimentConfig, UtilityReport};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;
use std::io::Write;
use std::num::NonZeroU64;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "micromob", version, about = "Scooter feed scraping, trip reconstruction and location privacy")]
pub struct Cli {
    /// Master seed for every randomized step.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output file; stdout when omitted (archive-producing commands require it).
    #[arg(long, short, global = true)]
    pub output: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
    Geojson,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Poll a free_bike_status feed into a snapshot archive.
    Scrape(ScrapeArgs),
    /// Rebuild trips from an archive.
    Reconstruct(ReconstructArgs),
    /// k-means over trip endpoints.
    Cluster(ClusterArgs),
    /// Rewrite an archive with every location perturbed.
    Sanitize(SanitizeArgs),
    /// Monte Carlo utility loss over a grid of privacy radii.
    Evaluate(EvaluateArgs),
    /// Generate a synthetic fleet archive and its ground truth.
    Synth(SynthArgs),
    /// Estimate fleet size over a window and check it against a cap.
    Fleet(FleetArgs),
}

#[derive(Debug, Args)]
pub struct ScrapeArgs {
    /// http(s):// or file:// URL of the free_bike_status document.
    #[arg(long)]
    pub url: String,
    #[arg(long)]
    pub provider: String,
    /// Seconds between polls (shortened to the feed TTL when that is smaller).
    #[arg(long, default_value_t = 60)]
    pub interval: u64,
    #[arg(long)]
    pub store: PathBuf,
    /// Seconds to run; until interrupted when omitted.
    #[arg(long)]
    pub duration: Option<u64>,
    #[arg(long, default_value_t = 10)]
    pub timeout: u64,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub store: PathBuf,
    /// Required when the archive holds more than one provider.
    #[arg(long)]
    pub provider: Option<String>,
    #[arg(long, default_value_t = 100.0)]
    pub min_distance_m: f64,
    #[arg(long, default_value_t = 3600)]
    pub max_duration_s: i64,
    /// Moves shorter than this are GPS jitter.
    #[arg(long, default_value_t = 5.0)]
    pub min_move_m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Endpoint {
    Start,
    End,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    #[arg(long)]
    pub trips: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub k: usize,
    #[arg(long, value_enum, default_value_t = Endpoint::End)]
    pub endpoint: Endpoint,
    /// Only report clusters with at most this many members.
    #[arg(long)]
    pub max_size: Option<usize>,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("privacy").required(true).args(["epsilon", "radius_km"]))]
pub struct SanitizeArgs {
    #[arg(long)]
    pub store: PathBuf,
    /// Privacy parameter in 1/km.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Radius within which locations stay indistinguishable.
    #[arg(long, requires = "ratio")]
    pub radius_km: Option<f64>,
    /// Likelihood-ratio bound at `radius_km`.
    #[arg(long, requires = "radius_km")]
    pub ratio: Option<f64>,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("regions").required(true).multiple(true).args(["boundary", "neighborhoods"]))]
pub struct EvaluateArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub provider: Option<String>,
    /// Use the latest snapshot at or before this time; latest overall when omitted.
    #[arg(long)]
    pub at: Option<i64>,
    /// GeoJSON city boundary.
    #[arg(long)]
    pub boundary: Option<PathBuf>,
    /// GeoJSON neighborhood polygons.
    #[arg(long)]
    pub neighborhoods: Option<PathBuf>,
    #[arg(long, default_value = "name")]
    pub name_property: String,
    #[arg(long, default_value = "0:1:0.05")]
    pub r_grid: String,
    #[arg(long, default_value_t = 100)]
    pub trials: u32,
    #[arg(long, default_value_t = 6.0)]
    pub ratio: f64,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON fleet configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Ground-truth CSV destination.
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FleetArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub provider: Option<String>,
    #[arg(long)]
    pub from: i64,
    #[arg(long)]
    pub to: i64,
    #[arg(long)]
    pub cap: Option<NonZeroU64>,
    #[arg(long)]
    pub exclude_reserved: bool,
    #[arg(long)]
    pub exclude_disabled: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Runtime(e.into())
}

struct Meta {
    command: &'static str,
    seed: Option<u64>,
    params: serde_json::Value,
}

impl Meta {
    fn archive(&self) -> ArchiveMeta {
        ArchiveMeta {
            command: self.command.into(),
            version: VERSION.into(),
            seed: self.seed,
            params: self.params.clone(),
        }
    }

    fn comments(&self) -> Vec<String> {
        let mut out = vec![format!("command: {}", self.command), format!("version: {VERSION}")];
        if let Some(s) = self.seed {
            out.push(format!("seed: {s}"));
        }
        out.push(format!("params: {}", self.params));
        out
    }

    fn comment_block(&self) -> Vec<u8> {
        self.comments().iter().flat_map(|c| format!("# {c}\n").into_bytes()).collect()
    }

    fn json(&self) -> serde_json::Value {
        serde_json::to_value(self.archive()).expect("meta serializes")
    }
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn emit(output: Option<&Path>, bytes: &[u8]) -> Result<(), CliError> {
    match output {
        Some(p) => std::fs::write(p, bytes).map_err(|e| runtime(anyhow::anyhow!("{}: {e}", p.display()))),
        None => std::io::stdout().lock().write_all(bytes).map_err(runtime),
    }
}

fn require_output<'a>(cli_output: Option<&'a Path>, command: &str) -> Result<&'a Path, CliError> {
    cli_output.ok_or_else(|| usage(format!("{command} writes an archive and needs --output")))
}

fn json_bytes(v: &impl Serialize) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(v).expect("json serializes");
    out.push(b'\n');
    out
}

/// Resolves the provider to read; implicit only for single-provider archives.
fn pick_provider(store: &SnapshotStore, explicit: Option<&str>) -> Result<String, CliError> {
    if let Some(p) = explicit {
        return Ok(p.to_owned());
    }
    let providers = store.providers(ReadOptions::default()).map_err(runtime)?;
    match providers.as_slice() {
        [only] => Ok(only.clone()),
        [] => Err(runtime(anyhow::anyhow!("{} holds no snapshots", store.path().display()))),
        many => Err(usage(format!("archive holds several providers ({}); pass --provider", many.join(", ")))),
    }
}

fn existing_store(path: &Path) -> Result<SnapshotStore, CliError> {
    if !path.exists() {
        return Err(runtime(anyhow::anyhow!("archive {} does not exist", path.display())));
    }
    Ok(SnapshotStore::new(path))
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let output = cli.output.as_deref();
    match &cli.command {
        Command::Scrape(a) => scrape(a),
        Command::Reconstruct(a) => reconstruct(a, output, cli.format),
        Command::Cluster(a) => cluster(a, cli.seed, output, cli.format),
        Command::Sanitize(a) => sanitize(a, cli.seed, output),
        Command::Evaluate(a) => evaluate(a, cli.seed, output, cli.format),
        Command::Synth(a) => synth(a, output),
        Command::Fleet(a) => fleet(a, output, cli.format),
    }
}

fn scrape(a: &ScrapeArgs) -> Result<(), CliError> {
    if a.interval == 0 {
        return Err(usage("--interval must be positive"));
    }
    let url = url::Url::parse(&a.url).map_err(|e| usage(format!("bad --url {:?}: {e}", a.url)))?;
    let mut source: Box<dyn FeedSource> = match url.scheme() {
        "http" | "https" => Box::new(HttpSource::new(url.as_str(), Duration::from_secs(a.timeout))),
        "file" => {
            let path = url
                .to_file_path()
                .map_err(|_| usage(format!("bad --url {:?}: not a local path", a.url)))?;
            Box::new(FileSource(path))
        }
        other => return Err(usage(format!("bad --url {:?}: unsupported scheme {other}", a.url))),
    };

    let store = SnapshotStore::new(&a.store);
    let fresh = std::fs::metadata(&a.store).map(|m| m.len() == 0).unwrap_or(true);
    if fresh {
        let meta = Meta {
            command: "scrape",
            seed: None,
            params: json!({"provider": a.provider, "url": a.url, "interval_s": a.interval}),
        };
        store.write_all(Some(&meta.archive()), []).map_err(runtime)?;
    }

    let stop = Arc::new(AtomicBool::new(false));
    {
        let stop = Arc::clone(&stop);
        if let Err(e) = ctrlc::set_handler(move || stop.store(true, Ordering::Relaxed)) {
            log::debug!("interrupt handler not installed: {e}");
        }
    }
    let mut config = PollConfig::new(&a.provider, Duration::from_secs(a.interval));
    config.duration = a.duration.map(Duration::from_secs);
    let summary = poll_feed(source.as_mut(), &store, &config, &stop, &mut SystemPacer::new()).map_err(runtime)?;
    log::info!("{summary:?}");
    eprintln!(
        "{} snapshots written over {} rounds ({} duplicates, {} failed rounds)",
        summary.snapshots_written, summary.rounds, summary.duplicates_skipped, summary.exhausted_rounds
    );
    Ok(())
}

fn load_provider_snapshots(store: &SnapshotStore, provider: Option<&str>) -> Result<(String, Vec<Snapshot>), CliError> {
    let provider = pick_provider(store, provider)?;
    let snaps = store
        .read_snapshots(&provider, i64::MIN, i64::MAX, ReadOptions::default())
        .map_err(runtime)?;
    Ok((provider, snaps))
}

fn reconstruct(a: &ReconstructArgs, output: Option<&Path>, format: Format) -> Result<(), CliError> {
    let filter = TripFilter::new(a.min_distance_m, a.max_duration_s).map_err(|e| usage(e.to_string()))?;
    if a.min_move_m.is_nan() || a.min_move_m < 0.0 {
        return Err(usage("--min-move-m must be non-negative"));
    }
    let store = existing_store(&a.store)?;
    let (provider, snaps) = load_provider_snapshots(&store, a.provider.as_deref())?;
    let opts = ReconstructOptions {
        min_move_m: a.min_move_m,
        ..ReconstructOptions::default()
    };
    let raw = reconstruct_trips(&snaps, opts).map_err(runtime)?;
    let trips = filter_trips(&raw, &filter);
    log::info!("{} candidate trips, {} kept", raw.len(), trips.len());
    let meta = Meta {
        command: "reconstruct",
        seed: None,
        params: json!({
            "store": file_name(&a.store),
            "provider": provider,
            "min_distance_m": a.min_distance_m,
            "max_duration_s": a.max_duration_s,
            "min_move_m": a.min_move_m,
            "snapshots": snaps.len(),
            "candidates": raw.len(),
        }),
    };
    let bytes = match format {
        Format::Csv => {
            let mut buf = meta.comment_block();
            write_trips_csv(&mut buf, &trips).map_err(runtime)?;
            buf
        }
        Format::Json => {
            let rows: Vec<TripRecord> = trips.iter().map(TripRecord::from).collect();
            json_bytes(&json!({"meta": meta.json(), "trips": rows}))
        }
        Format::Geojson => {
            let features: Vec<_> = trips
                .iter()
                .map(|t| {
                    json!({
                        "type": "Feature",
                        "geometry": {"type": "LineString", "coordinates": [[t.start.lon, t.start.lat], [t.end.lon, t.end.lat]]},
                        "properties": {"scooter_id": t.scooter_id, "start_time": t.start_time, "end_time": t.end_time,
                                       "distance_m": t.distance_m, "duration_s": t.duration_s},
                    })
                })
                .collect();
            json_bytes(&json!({"type": "FeatureCollection", "meta": meta.json(), "features": features}))
        }
    };
    emit(output, &bytes)
}

fn cluster(a: &ClusterArgs, seed: u64, output: Option<&Path>, format: Format) -> Result<(), CliError> {
    let text = std::fs::read(&a.trips).map_err(|e| runtime(anyhow::anyhow!("{}: {e}", a.trips.display())))?;
    let trips = read_trips_csv(text.as_slice()).map_err(runtime)?;
    if a.k == 0 || a.k > trips.len() {
        return Err(usage(format!("--k {} must be between 1 and the trip count {}", a.k, trips.len())));
    }
    let points: Vec<_> = trips
        .iter()
        .map(|t| match a.endpoint {
            Endpoint::Start => t.start,
            Endpoint::End => t.end,
        })
        .collect();
    let clusters = cluster_locations(&points, a.k, seed).map_err(|e| match e {
        ClusterError::KOutOfRange { .. } | ClusterError::TooFewDistinct { .. } => usage(e.to_string()),
        other => runtime(other),
    })?;
    let reported = match a.max_size {
        Some(m) => select_small_clusters(&clusters, m),
        None => clusters,
    };
    let meta = Meta {
        command: "cluster",
        seed: Some(seed),
        params: json!({
            "trips": file_name(&a.trips),
            "k": a.k,
            "endpoint": format!("{:?}", a.endpoint).to_lowercase(),
            "max_size": a.max_size,
        }),
    };
    let bytes = match format {
        Format::Csv => {
            let mut buf = meta.comment_block();
            write_clusters_csv(&mut buf, &reported).map_err(runtime)?;
            buf
        }
        Format::Json => json_bytes(&json!({"meta": meta.json(), "clusters": reported})),
        Format::Geojson => {
            let mut fc = clusters_geojson(&reported);
            fc["meta"] = meta.json();
            json_bytes(&fc)
        }
    };
    emit(output, &bytes)
}

fn sanitize(a: &SanitizeArgs, seed: u64, output: Option<&Path>) -> Result<(), CliError> {
    let epsilon = match (a.epsilon, a.radius_km, a.ratio) {
        (Some(e), None, None) if e > 0.0 && e.is_finite() => e,
        (Some(_), None, None) => return Err(usage("--epsilon must be positive")),
        (None, Some(r), Some(ratio)) => epsilon_from(r, ratio).map_err(|e| usage(e.to_string()))?,
        _ => return Err(usage("give either --epsilon or --radius-km with --ratio")),
    };
    let out_path = require_output(output, "sanitize")?;
    let store = existing_store(&a.store)?;
    let snaps = store.read_all(ReadOptions::default()).map_err(runtime)?;
    let root = RandomSource::new(seed);
    let noisy: Vec<Snapshot> = snaps
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = root.substream(i as u64);
            Snapshot {
                observations: s
                    .observations
                    .iter()
                    .map(|o| {
                        let q = perturb(o.location(), epsilon, &mut rng);
                        ScooterObservation {
                            lat: q.lat,
                            lon: q.lon,
                            ..o.clone()
                        }
                    })
                    .collect(),
                ..s.clone()
            }
        })
        .collect();
    let meta = Meta {
        command: "sanitize",
        seed: Some(seed),
        params: json!({
            "store": file_name(&a.store),
            "epsilon": epsilon,
            "radius_km": a.radius_km,
            "ratio": a.ratio,
        }),
    };
    SnapshotStore::new(out_path)
        .write_all(Some(&meta.archive()), &noisy)
        .map_err(runtime)
}

fn pick_snapshot(snaps: Vec<Snapshot>, at: Option<i64>) -> Result<Snapshot, CliError> {
    let chosen = match at {
        Some(t) => snaps.into_iter().rfind(|s| s.captured_at <= t),
        None => snaps.into_iter().next_back(),
    };
    chosen.ok_or_else(|| runtime(anyhow::anyhow!("no snapshot at or before the requested time")))
}

fn evaluate(a: &EvaluateArgs, seed: u64, output: Option<&Path>, format: Format) -> Result<(), CliError> {
    let r_grid = parse_grid(&a.r_grid).map_err(|e| usage(e.to_string()))?;
    let config = ExperimentConfig {
        r_grid,
        trials: a.trials,
        ratio: a.ratio,
        master_seed: seed,
    };
    let boundary: Option<Region> = a
        .boundary
        .as_deref()
        .map(load_boundary_geojson)
        .transpose()
        .map_err(runtime)?;
    let neighborhoods: Option<RegionSet> = match &a.neighborhoods {
        Some(p) => {
            let regions = load_regions_geojson(p, &a.name_property).map_err(runtime)?;
            Some(RegionSet::new(regions, boundary.clone()).map_err(runtime)?)
        }
        None => None,
    };
    let store = existing_store(&a.store)?;
    let (provider, snaps) = load_provider_snapshots(&store, a.provider.as_deref())?;
    let snapshot = pick_snapshot(snaps, a.at)?;
    let points: Vec<_> = snapshot.observations.iter().map(|o| o.location()).collect();
    let report = run_experiment(&points, boundary.as_ref(), neighborhoods.as_ref(), &config).map_err(|e| {
        use crate::utility::UtilityError as U;
        match e {
            U::EmptyGrid | U::BadGrid(_) | U::NoTrials | U::GridSpec(_) | U::Privacy(_) => usage(e.to_string()),
            other => runtime(other),
        }
    })?;
    let meta = Meta {
        command: "evaluate",
        seed: Some(seed),
        params: json!({
            "store": file_name(&a.store),
            "provider": provider,
            "captured_at": snapshot.captured_at,
            "boundary": a.boundary.as_deref().map(file_name),
            "neighborhoods": a.neighborhoods.as_deref().map(file_name),
            "r_grid": a.r_grid,
        }),
    };
    let bytes = match format {
        Format::Csv => {
            let mut buf = Vec::new();
            let comments: Vec<String> = meta.comments();
            write_report_csv(&mut buf, &report, &comments).map_err(runtime)?;
            buf
        }
        Format::Json => {
            #[derive(Serialize)]
            struct Wrapped<'a> {
                meta: serde_json::Value,
                #[serde(flatten)]
                report: &'a UtilityReport,
            }
            json_bytes(&Wrapped {
                meta: meta.json(),
                report: &report,
            })
        }
        Format::Geojson => return Err(usage("evaluate writes csv or json")),
    };
    emit(output, &bytes)
}

fn synth(a: &SynthArgs, output: Option<&Path>) -> Result<(), CliError> {
    let out_path = require_output(output, "synth")?;
    let text = std::fs::read_to_string(&a.config).map_err(|e| runtime(anyhow::anyhow!("{}: {e}", a.config.display())))?;
    let config: FleetConfig =
        serde_json::from_str(&text).map_err(|e| usage(format!("invalid fleet config {}: {e}", a.config.display())))?;
    let out = generate(&config).map_err(|e| match e {
        SynthError::Config(_) | SynthError::Area(_) => usage(e.to_string()),
        SynthError::Placement => runtime(e),
    })?;
    let meta = Meta {
        command: "synth",
        seed: Some(config.seed),
        params: serde_json::to_value(&config).expect("config serializes"),
    };
    SnapshotStore::new(out_path)
        .write_all(Some(&meta.archive()), &out.snapshots)
        .map_err(runtime)?;
    if let Some(truth_path) = &a.truth {
        let mut buf = meta.comment_block();
        write_ground_truth_csv(&mut buf, &out.truth).map_err(runtime)?;
        emit(Some(truth_path), &buf)?;
    }
    eprintln!(
        "{} snapshots, {} trips, {} relocations",
        out.snapshots.len(),
        out.truth.trips.len(),
        out.truth.relocations.len()
    );
    Ok(())
}

fn fleet(a: &FleetArgs, output: Option<&Path>, format: Format) -> Result<(), CliError> {
    if a.from > a.to {
        return Err(usage("--from must not be after --to"));
    }
    let store = existing_store(&a.store)?;
    let (provider, snaps) = load_provider_snapshots(&store, a.provider.as_deref())?;
    let filter = ObservationFilter {
        include_reserved: !a.exclude_reserved,
        include_disabled: !a.exclude_disabled,
    };
    let series = parked_count_series(&snaps, filter).map_err(runtime)?;
    let estimate = estimate_fleet_size(&series, a.from, a.to).map_err(runtime)?;
    let verdict = a.cap.map(|cap| check_device_cap(estimate, cap));
    let over_by = match verdict {
        Some(CapVerdict::Exceeds { by }) => Some(by),
        _ => None,
    };
    let meta = Meta {
        command: "fleet",
        seed: None,
        params: json!({"store": file_name(&a.store), "provider": provider, "from": a.from, "to": a.to, "cap": a.cap}),
    };
    let bytes = match format {
        Format::Csv => {
            let mut buf = meta.comment_block();
            buf.extend_from_slice(b"provider,from,to,estimate,cap,exceeds_by\n");
            let cap = a.cap.map(|c| c.to_string()).unwrap_or_default();
            let by = over_by.map(|b| b.to_string()).unwrap_or_default();
            buf.extend_from_slice(format!("{provider},{},{},{estimate},{cap},{by}\n", a.from, a.to).as_bytes());
            buf
        }
        Format::Json => json_bytes(&json!({
            "meta": meta.json(),
            "estimate": estimate,
            "cap": a.cap,
            "exceeds_by": over_by,
        })),
        Format::Geojson => return Err(usage("fleet writes csv or json")),
    };
    emit(output, &bytes)
}
