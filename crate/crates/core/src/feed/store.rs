use super::Snapshot;
use serde::{Deserialize, Serialize};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

/// Provenance record stored as an optional `{"meta": {...}}` line in an archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveMeta {
    pub command: String,
    pub version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub params: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct MetaLine {
    meta: ArchiveMeta,
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("archive {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("archive {path} line {line}: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("invalid time range: from {from} > to {to}")]
    InvalidRange { from: i64, to: i64 },
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ReadOptions {
    /// Skip unparseable lines (logged) instead of failing.
    pub skip_corrupt: bool,
}

/// Append-only newline-delimited JSON archive, one snapshot per line.
///
/// Single writer per file; readers need no coordination since lines are only
/// ever appended.
#[derive(Debug, Clone)]
pub struct SnapshotStore {
    path: PathBuf,
}

enum Line {
    Blank,
    Meta(ArchiveMeta),
    Snapshot(Snapshot),
}

fn parse_line(text: &str) -> Result<Line, String> {
    if text.trim().is_empty() {
        return Ok(Line::Blank);
    }
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
    if value.get("meta").is_some() && value.get("provider").is_none() {
        let m: MetaLine = serde_json::from_value(value).map_err(|e| e.to_string())?;
        return Ok(Line::Meta(m.meta));
    }
    let snapshot: Snapshot = serde_json::from_value(value).map_err(|e| e.to_string())?;
    snapshot.validate().map_err(|e| e.to_string())?;
    Ok(Line::Snapshot(snapshot))
}

impl SnapshotStore {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn io(&self, source: std::io::Error) -> StoreError {
        StoreError::Io {
            path: self.path.clone(),
            source,
        }
    }

    /// Creates the file if missing without touching existing content.
    pub fn touch(&self) -> Result<(), StoreError> {
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map(|_| ())
            .map_err(|e| self.io(e))
    }

    pub fn append(&self, snapshot: &Snapshot) -> Result<(), StoreError> {
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| self.io(e))?;
        let mut line = serde_json::to_vec(snapshot).expect("snapshot serializes");
        line.push(b'\n');
        file.write_all(&line).map_err(|e| self.io(e))?;
        file.flush().map_err(|e| self.io(e))
    }

    /// Replaces the archive with `meta` (if any) followed by `snapshots`.
    pub fn write_all<'a>(
        &self,
        meta: Option<&ArchiveMeta>,
        snapshots: impl IntoIterator<Item = &'a Snapshot>,
    ) -> Result<(), StoreError> {
        let file = File::create(&self.path).map_err(|e| self.io(e))?;
        let mut out = BufWriter::new(file);
        if let Some(meta) = meta {
            serde_json::to_writer(&mut out, &MetaLine { meta: meta.clone() })
                .map_err(|e| self.io(e.into()))?;
            out.write_all(b"\n").map_err(|e| self.io(e))?;
        }
        for s in snapshots {
            serde_json::to_writer(&mut out, s).map_err(|e| self.io(e.into()))?;
            out.write_all(b"\n").map_err(|e| self.io(e))?;
        }
        out.flush().map_err(|e| self.io(e))
    }

    fn scan(
        &self,
        opts: ReadOptions,
        mut visit: impl FnMut(Line),
    ) -> Result<(), StoreError> {
        let file = File::open(&self.path).map_err(|e| self.io(e))?;
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let text = line.map_err(|e| self.io(e))?;
            match parse_line(&text) {
                Ok(parsed) => visit(parsed),
                Err(message) if opts.skip_corrupt => {
                    log::warn!("{}: skipping corrupt line {}: {}", self.path.display(), idx + 1, message);
                }
                Err(message) => {
                    return Err(StoreError::Corrupt {
                        path: self.path.clone(),
                        line: idx + 1,
                        message,
                    })
                }
            }
        }
        Ok(())
    }

    /// Every snapshot in file order, all providers.
    pub fn read_all(&self, opts: ReadOptions) -> Result<Vec<Snapshot>, StoreError> {
        let mut out = Vec::new();
        self.scan(opts, |line| {
            if let Line::Snapshot(s) = line {
                out.push(s);
            }
        })?;
        Ok(out)
    }

    /// The first metadata line, if the archive carries one.
    pub fn read_meta(&self) -> Result<Option<ArchiveMeta>, StoreError> {
        let mut meta = None;
        self.scan(ReadOptions { skip_corrupt: true }, |line| {
            if let Line::Meta(m) = line {
                meta.get_or_insert(m);
            }
        })?;
        Ok(meta)
    }

    /// Distinct providers in order of first appearance.
    pub fn providers(&self, opts: ReadOptions) -> Result<Vec<String>, StoreError> {
        let mut out: Vec<String> = Vec::new();
        self.scan(opts, |line| {
            if let Line::Snapshot(s) = line {
                if !out.contains(&s.provider) {
                    out.push(s.provider);
                }
            }
        })?;
        Ok(out)
    }

    /// Snapshots of `provider` with `captured_at` in `[from, to]`, ascending,
    /// one per timestamp (first occurrence wins).
    pub fn read_snapshots(
        &self,
        provider: &str,
        from: i64,
        to: i64,
        opts: ReadOptions,
    ) -> Result<Vec<Snapshot>, StoreError> {
        if from > to {
            return Err(StoreError::InvalidRange { from, to });
        }
        let mut out = Vec::new();
        self.scan(opts, |line| {
            if let Line::Snapshot(s) = line {
                if s.provider == provider && (from..=to).contains(&s.captured_at) {
                    out.push(s);
                }
            }
        })?;
        // stable sort keeps the earliest-written copy first for dedup
        out.sort_by_key(|s| s.captured_at);
        out.dedup_by_key(|s| s.captured_at);
        Ok(out)
    }

    /// Latest stored `captured_at` for `provider`; `None` for a missing file or provider.
    pub fn last_captured_at(&self, provider: &str) -> Result<Option<i64>, StoreError> {
        if !self.path.exists() {
            return Ok(None);
        }
        let mut last = None;
        self.scan(ReadOptions { skip_corrupt: true }, |line| {
            if let Line::Snapshot(s) = line {
                if s.provider == provider {
                    last = last.max(Some(s.captured_at));
                }
            }
        })?;
        Ok(last)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feed::ScooterObservation;

    fn snap(provider: &str, t: i64) -> Snapshot {
        Snapshot {
            provider: provider.into(),
            captured_at: t,
            ttl_s: 60,
            observations: vec![ScooterObservation {
                scooter_id: format!("s{t}"),
                lat: 34.0 + t as f64 * 1e-4,
                lon: -118.3,
                is_reserved: false,
                is_disabled: t % 2 == 0,
            }],
        }
    }

    fn fixture(dir: &tempfile::TempDir) -> (SnapshotStore, Vec<Snapshot>) {
        let store = SnapshotStore::new(dir.path().join("a.jsonl"));
        let snaps: Vec<_> = (1..=5).map(|i| snap("bird", i * 60)).collect();
        for s in &snaps {
            store.append(s).unwrap();
        }
        (store, snaps)
    }

    #[test]
    fn full_range_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let (store, snaps) = fixture(&dir);
        let got = store.read_snapshots("bird", i64::MIN, i64::MAX, ReadOptions::default()).unwrap();
        assert_eq!(got, snaps);
    }

    #[test]
    fn empty_range() {
        let dir = tempfile::tempdir().unwrap();
        let (store, _) = fixture(&dir);
        let got = store.read_snapshots("bird", 1000, 2000, ReadOptions::default()).unwrap();
        assert!(got.is_empty());
        assert!(matches!(
            store.read_snapshots("bird", 10, 5, ReadOptions::default()),
            Err(StoreError::InvalidRange { .. })
        ));
    }

    #[test]
    fn partial_range_matches_linear_scan() {
        let dir = tempfile::tempdir().unwrap();
        let (store, snaps) = fixture(&dir);
        let (from, to) = (100, 200);
        let oracle: Vec<_> = snaps
            .iter()
            .filter(|s| s.captured_at >= from && s.captured_at <= to)
            .cloned()
            .collect();
        assert_eq!(oracle.len(), 2);
        let got = store.read_snapshots("bird", from, to, ReadOptions::default()).unwrap();
        assert_eq!(got, oracle);
    }

    #[test]
    fn sorts_dedups_and_filters_provider() {
        let dir = tempfile::tempdir().unwrap();
        let store = SnapshotStore::new(dir.path().join("b.jsonl"));
        for t in [180, 60, 120, 60] {
            store.append(&snap("bird", t)).unwrap();
        }
        store.append(&snap("lime", 90)).unwrap();
        let got = store.read_snapshots("bird", 0, 1000, ReadOptions::default()).unwrap();
        let times: Vec<_> = got.iter().map(|s| s.captured_at).collect();
        assert_eq!(times, vec![60, 120, 180]);
        assert_eq!(store.providers(ReadOptions::default()).unwrap(), vec!["bird", "lime"]);
        assert_eq!(store.last_captured_at("bird").unwrap(), Some(180));
        assert_eq!(store.last_captured_at("spin").unwrap(), None);
    }

    #[test]
    fn corrupt_line_reported_or_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let (store, _) = fixture(&dir);
        let mut f = OpenOptions::new().append(true).open(store.path()).unwrap();
        writeln!(f, "{{not json").unwrap();
        store.append(&snap("bird", 600)).unwrap();

        match store.read_snapshots("bird", 0, 1000, ReadOptions::default()) {
            Err(StoreError::Corrupt { line, .. }) => assert_eq!(line, 6),
            other => panic!("expected corrupt error, got {other:?}"),
        }
        let got = store
            .read_snapshots("bird", 0, 1000, ReadOptions { skip_corrupt: true })
            .unwrap();
        assert_eq!(got.len(), 6);
    }

    #[test]
    fn meta_line_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let store = SnapshotStore::new(dir.path().join("m.jsonl"));
        let meta = ArchiveMeta {
            command: "sanitize".into(),
            version: "0.1.0".into(),
            seed: Some(7),
            params: serde_json::json!({"epsilon": 1.5}),
        };
        let snaps = vec![snap("bird", 60), snap("bird", 120)];
        store.write_all(Some(&meta), &snaps).unwrap();
        assert_eq!(store.read_meta().unwrap(), Some(meta));
        assert_eq!(store.read_all(ReadOptions::default()).unwrap(), snaps);
    }

    #[test]
    fn schema_field_names() {
        let line = serde_json::to_value(snap("bird", 60)).unwrap();
        assert!(line.get("provider").is_some());
        assert!(line.get("captured_at").is_some());
        assert!(line.get("ttl_s").is_some());
        let bike = &line["bikes"][0];
        for key in ["id", "lat", "lon", "reserved", "disabled"] {
            assert!(bike.get(key).is_some(), "missing {key}");
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        let store = SnapshotStore::new("/nonexistent/dir/x.jsonl");
        assert!(matches!(store.read_all(ReadOptions::default()), Err(StoreError::Io { .. })));
    }
}
