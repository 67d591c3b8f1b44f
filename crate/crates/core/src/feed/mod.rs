//! GBFS `free_bike_status` ingestion: parsing, archiving and polling.

mod poll;
mod store;

pub use poll::{
    poll_feed, FeedSource, FetchError, FileSource, HttpSource, Pacer, PollConfig, PollSummary, SystemPacer,
};
pub use store::{ArchiveMeta, ReadOptions, SnapshotStore, StoreError};

use crate::geo::LatLon;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::HashSet;

/// One parked (or reserved/disabled) vehicle as published in the feed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScooterObservation {
    #[serde(rename = "id")]
    pub scooter_id: String,
    pub lat: f64,
    pub lon: f64,
    #[serde(rename = "reserved")]
    pub is_reserved: bool,
    #[serde(rename = "disabled")]
    pub is_disabled: bool,
}

impl ScooterObservation {
    pub fn location(&self) -> LatLon {
        LatLon::new(self.lat, self.lon)
    }
}

/// One provider's fleet state at the feed's own `last_updated` instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub provider: String,
    pub captured_at: i64,
    pub ttl_s: u32,
    #[serde(rename = "bikes")]
    pub observations: Vec<ScooterObservation>,
}

/// Which observations count as "parked" for downstream consumers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObservationFilter {
    pub include_reserved: bool,
    pub include_disabled: bool,
}

impl Default for ObservationFilter {
    fn default() -> Self {
        Self {
            include_reserved: true,
            include_disabled: true,
        }
    }
}

impl ObservationFilter {
    pub fn admits(&self, obs: &ScooterObservation) -> bool {
        (self.include_reserved || !obs.is_reserved) && (self.include_disabled || !obs.is_disabled)
    }
}

impl Snapshot {
    /// Checks the per-snapshot invariants: valid coordinates, non-empty and unique ids, positive TTL.
    pub fn validate(&self) -> Result<(), FeedError> {
        if self.ttl_s == 0 {
            return Err(FeedError::InvalidTtl(0));
        }
        let mut seen = HashSet::with_capacity(self.observations.len());
        for obs in &self.observations {
            if obs.scooter_id.is_empty() {
                return Err(FeedError::EmptyId);
            }
            if !obs.location().is_valid() {
                return Err(FeedError::Coordinate {
                    id: obs.scooter_id.clone(),
                    lat: obs.lat,
                    lon: obs.lon,
                });
            }
            if !seen.insert(obs.scooter_id.as_str()) {
                return Err(FeedError::DuplicateId(obs.scooter_id.clone()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum FeedError {
    #[error("malformed feed document: {0}")]
    Malformed(String),
    #[error("missing required field `{0}`")]
    MissingField(String),
    #[error("field `{field}` has the wrong type")]
    WrongType { field: String },
    #[error("scooter {id}: coordinate ({lat}, {lon}) out of range")]
    Coordinate { id: String, lat: f64, lon: f64 },
    #[error("duplicate scooter id {0}")]
    DuplicateId(String),
    #[error("empty scooter id")]
    EmptyId,
    #[error("ttl must be positive, got {0}")]
    InvalidTtl(i64),
}

fn field<'a>(obj: &'a Value, name: &str, path: &str) -> Result<&'a Value, FeedError> {
    obj.get(name)
        .ok_or_else(|| FeedError::MissingField(format!("{path}{name}")))
}

// Real feeds publish numbers as JSON numbers or numeric strings.
fn as_f64(v: &Value, name: &str) -> Result<f64, FeedError> {
    match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
    .ok_or_else(|| FeedError::WrongType { field: name.into() })
}

fn as_i64(v: &Value, name: &str) -> Result<i64, FeedError> {
    match v {
        Value::Number(n) => n.as_i64().or_else(|| n.as_f64().map(|f| f as i64)),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
    .ok_or_else(|| FeedError::WrongType { field: name.into() })
}

// GBFS v1 uses 0/1 integers for booleans, later versions use true/false.
fn as_flag(v: &Value, name: &str) -> Result<bool, FeedError> {
    match v {
        Value::Bool(b) => Some(*b),
        Value::Number(n) => match n.as_i64() {
            Some(0) => Some(false),
            Some(1) => Some(true),
            _ => None,
        },
        _ => None,
    }
    .ok_or_else(|| FeedError::WrongType { field: name.into() })
}

fn as_id(v: &Value) -> Result<String, FeedError> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        _ => Err(FeedError::WrongType {
            field: "bike_id".into(),
        }),
    }
}

/// Parses a GBFS `free_bike_status` document. `captured_at` is the feed's own
/// `last_updated`, never the local clock.
pub fn parse_free_bike_status(raw: &[u8], provider: &str) -> Result<Snapshot, FeedError> {
    let doc: Value = serde_json::from_slice(raw).map_err(|e| FeedError::Malformed(e.to_string()))?;
    if !doc.is_object() {
        return Err(FeedError::Malformed("top level is not an object".into()));
    }
    let captured_at = as_i64(field(&doc, "last_updated", "")?, "last_updated")?;
    let ttl = as_i64(field(&doc, "ttl", "")?, "ttl")?;
    let ttl_s = u32::try_from(ttl)
        .ok()
        .filter(|t| *t > 0)
        .ok_or(FeedError::InvalidTtl(ttl))?;
    let bikes = field(field(&doc, "data", "")?, "bikes", "data.")?
        .as_array()
        .ok_or_else(|| FeedError::WrongType {
            field: "data.bikes".into(),
        })?;

    let mut observations = Vec::with_capacity(bikes.len());
    for bike in bikes {
        let scooter_id = as_id(field(bike, "bike_id", "data.bikes[].")?)?;
        let lat = as_f64(field(bike, "lat", "data.bikes[].")?, "lat")?;
        let lon = as_f64(field(bike, "lon", "data.bikes[].")?, "lon")?;
        let is_reserved = as_flag(field(bike, "is_reserved", "data.bikes[].")?, "is_reserved")?;
        let is_disabled = as_flag(field(bike, "is_disabled", "data.bikes[].")?, "is_disabled")?;
        observations.push(ScooterObservation {
            scooter_id,
            lat,
            lon,
            is_reserved,
            is_disabled,
        });
    }

    let snapshot = Snapshot {
        provider: provider.to_owned(),
        captured_at,
        ttl_s,
        observations,
    };
    snapshot.validate()?;
    Ok(snapshot)
}

/// Renders a snapshot as a GBFS `free_bike_status` document.
pub fn to_free_bike_status(snapshot: &Snapshot) -> Vec<u8> {
    let bikes: Vec<Value> = snapshot
        .observations
        .iter()
        .map(|o| {
            serde_json::json!({
                "bike_id": o.scooter_id,
                "lat": o.lat,
                "lon": o.lon,
                "is_reserved": o.is_reserved,
                "is_disabled": o.is_disabled,
            })
        })
        .collect();
    let doc = serde_json::json!({
        "last_updated": snapshot.captured_at,
        "ttl": snapshot.ttl_s,
        "data": { "bikes": bikes },
    });
    serde_json::to_vec(&doc).expect("json values always serialize")
}
