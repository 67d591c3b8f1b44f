//! Named polygon regions (city limits, neighborhoods) and containment queries.
//!
//! Rings are treated as planar polygons in (lon, lat) space, the way GeoJSON
//! boundary files are drawn. Points on an edge or vertex count as inside.

use crate::feed::Snapshot;
use crate::geo::LatLon;
use serde::Serialize;
use serde_json::Value;
use std::collections::HashSet;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum RegionError {
    #[error("region {region}: ring has {vertices} vertices, need at least 4")]
    TooFewVertices { region: String, vertices: usize },
    #[error("region {region}: ring is not closed")]
    NotClosed { region: String },
    #[error("region {region}: ring self-intersects near {at}")]
    SelfIntersecting { region: String, at: LatLon },
    #[error("region {region}: invalid coordinate {at}")]
    Coordinate { region: String, at: LatLon },
    #[error("region {0} has no polygons")]
    NoPolygons(String),
    #[error("duplicate region name {0}")]
    DuplicateName(String),
    #[error("geojson: {0}")]
    GeoJson(String),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A closed ring: first vertex equals last.
pub type Ring = Vec<LatLon>;

#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    pub exterior: Ring,
    pub holes: Vec<Ring>,
}

impl Polygon {
    fn rings(&self) -> impl Iterator<Item = &Ring> {
        std::iter::once(&self.exterior).chain(&self.holes)
    }

    fn contains(&self, p: LatLon) -> bool {
        let mut inside = false;
        for ring in self.rings() {
            for edge in ring.windows(2) {
                let (a, b) = (edge[0], edge[1]);
                if on_segment(p, a, b) {
                    return true;
                }
                if (a.lat > p.lat) != (b.lat > p.lat) {
                    let x = a.lon + (p.lat - a.lat) * (b.lon - a.lon) / (b.lat - a.lat);
                    if p.lon < x {
                        inside = !inside;
                    }
                }
            }
        }
        inside
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundingBox {
    pub min_lat: f64,
    pub min_lon: f64,
    pub max_lat: f64,
    pub max_lon: f64,
}

impl BoundingBox {
    fn of<'a>(points: impl Iterator<Item = &'a LatLon>) -> Self {
        let mut b = BoundingBox {
            min_lat: f64::INFINITY,
            min_lon: f64::INFINITY,
            max_lat: f64::NEG_INFINITY,
            max_lon: f64::NEG_INFINITY,
        };
        for p in points {
            b.min_lat = b.min_lat.min(p.lat);
            b.max_lat = b.max_lat.max(p.lat);
            b.min_lon = b.min_lon.min(p.lon);
            b.max_lon = b.max_lon.max(p.lon);
        }
        b
    }

    pub fn contains(&self, p: LatLon) -> bool {
        p.lat >= self.min_lat && p.lat <= self.max_lat && p.lon >= self.min_lon && p.lon <= self.max_lon
    }
}

/// A named set of polygons (a MultiPolygon).
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub name: String,
    pub polygons: Vec<Polygon>,
    bbox: BoundingBox,
}

fn orient(a: LatLon, b: LatLon, c: LatLon) -> f64 {
    (b.lon - a.lon) * (c.lat - a.lat) - (b.lat - a.lat) * (c.lon - a.lon)
}

fn within_box(p: LatLon, a: LatLon, b: LatLon) -> bool {
    p.lon >= a.lon.min(b.lon) && p.lon <= a.lon.max(b.lon) && p.lat >= a.lat.min(b.lat) && p.lat <= a.lat.max(b.lat)
}

fn on_segment(p: LatLon, a: LatLon, b: LatLon) -> bool {
    orient(a, b, p) == 0.0 && within_box(p, a, b)
}

fn segments_intersect(p1: LatLon, p2: LatLon, p3: LatLon, p4: LatLon) -> bool {
    let d1 = orient(p3, p4, p1);
    let d2 = orient(p3, p4, p2);
    let d3 = orient(p1, p2, p3);
    let d4 = orient(p1, p2, p4);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && within_box(p1, p3, p4))
        || (d2 == 0.0 && within_box(p2, p3, p4))
        || (d3 == 0.0 && within_box(p3, p1, p2))
        || (d4 == 0.0 && within_box(p4, p1, p2))
}

/// Finds a crossing between two non-adjacent edges, sweeping edges by longitude.
fn self_intersection(ring: &[LatLon]) -> Option<LatLon> {
    let n = ring.len() - 1;
    let mut edges: Vec<usize> = (0..n).collect();
    let min_lon = |i: usize| ring[i].lon.min(ring[i + 1].lon);
    let max_lon = |i: usize| ring[i].lon.max(ring[i + 1].lon);
    edges.sort_by(|&a, &b| min_lon(a).total_cmp(&min_lon(b)));
    for (pos, &i) in edges.iter().enumerate() {
        for &j in &edges[pos + 1..] {
            if min_lon(j) > max_lon(i) {
                break;
            }
            let (lo, hi) = (i.min(j), i.max(j));
            if hi == lo + 1 || (lo == 0 && hi == n - 1) {
                continue;
            }
            if segments_intersect(ring[i], ring[i + 1], ring[j], ring[j + 1]) {
                return Some(ring[i]);
            }
        }
    }
    None
}

fn normalize_ring(region: &str, mut ring: Ring) -> Result<Ring, RegionError> {
    if let Some(bad) = ring.iter().find(|p| !p.is_valid()) {
        return Err(RegionError::Coordinate {
            region: region.into(),
            at: *bad,
        });
    }
    if ring.first() != ring.last() || ring.len() < 2 {
        return Err(RegionError::NotClosed { region: region.into() });
    }
    ring.dedup();
    if ring.len() < 4 {
        return Err(RegionError::TooFewVertices {
            region: region.into(),
            vertices: ring.len(),
        });
    }
    if let Some(at) = self_intersection(&ring) {
        return Err(RegionError::SelfIntersecting {
            region: region.into(),
            at,
        });
    }
    Ok(ring)
}

impl Region {
    /// Validates every ring: closed, at least 4 vertices (consecutive
    /// duplicates collapsed), no self-intersection.
    pub fn new(name: impl Into<String>, polygons: Vec<Polygon>) -> Result<Self, RegionError> {
        let name = name.into();
        if polygons.is_empty() {
            return Err(RegionError::NoPolygons(name));
        }
        let polygons = polygons
            .into_iter()
            .map(|p| {
                Ok(Polygon {
                    exterior: normalize_ring(&name, p.exterior)?,
                    holes: p
                        .holes
                        .into_iter()
                        .map(|h| normalize_ring(&name, h))
                        .collect::<Result<_, _>>()?,
                })
            })
            .collect::<Result<Vec<_>, RegionError>>()?;
        let bbox = BoundingBox::of(polygons.iter().flat_map(|p| p.exterior.iter()));
        Ok(Self { name, polygons, bbox })
    }

    /// Single-ring region from an open or closed vertex list.
    pub fn from_ring(name: impl Into<String>, mut vertices: Vec<LatLon>) -> Result<Self, RegionError> {
        if vertices.first() != vertices.last() {
            if let Some(&first) = vertices.first() {
                vertices.push(first);
            }
        }
        Self::new(
            name,
            vec![Polygon {
                exterior: vertices,
                holes: vec![],
            }],
        )
    }

    /// Merges the polygons of several regions under one name.
    pub fn union(name: impl Into<String>, regions: Vec<Region>) -> Result<Self, RegionError> {
        let polygons = regions.into_iter().flat_map(|r| r.polygons).collect();
        Self::new(name, polygons)
    }

    pub fn bbox(&self) -> BoundingBox {
        self.bbox
    }

    pub fn contains(&self, p: LatLon) -> bool {
        self.bbox.contains(p) && self.polygons.iter().any(|poly| poly.contains(p))
    }
}

pub fn point_in_region(p: LatLon, region: &Region) -> bool {
    region.contains(p)
}

/// Neighborhood partition (possibly overlapping, first match wins) plus an
/// optional outer boundary.
#[derive(Debug, Clone)]
pub struct RegionSet {
    pub regions: Vec<Region>,
    pub boundary: Option<Region>,
}

impl RegionSet {
    pub fn new(regions: Vec<Region>, boundary: Option<Region>) -> Result<Self, RegionError> {
        let mut seen = HashSet::new();
        for r in &regions {
            if !seen.insert(r.name.as_str()) {
                return Err(RegionError::DuplicateName(r.name.clone()));
            }
        }
        Ok(Self { regions, boundary })
    }

    /// Index of the first region containing `p`.
    pub fn locate(&self, p: LatLon) -> Option<usize> {
        self.regions.iter().position(|r| r.contains(p))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionCounts {
    /// `(region name, count)` in region file order.
    pub counts: Vec<(String, u64)>,
    pub outside: u64,
}

impl RegionCounts {
    pub fn total(&self) -> u64 {
        self.counts.iter().map(|(_, c)| c).sum::<u64>() + self.outside
    }
}

/// Counts per region by first match; everything else is `outside`.
pub fn count_points(points: impl IntoIterator<Item = LatLon>, regions: &RegionSet) -> RegionCounts {
    let mut counts = vec![0u64; regions.regions.len()];
    let mut outside = 0;
    for p in points {
        match regions.locate(p) {
            Some(i) => counts[i] += 1,
            None => outside += 1,
        }
    }
    RegionCounts {
        counts: regions
            .regions
            .iter()
            .map(|r| r.name.clone())
            .zip(counts)
            .collect(),
        outside,
    }
}

pub fn count_by_region(snapshot: &Snapshot, regions: &RegionSet) -> RegionCounts {
    count_points(snapshot.observations.iter().map(|o| o.location()), regions)
}

fn parse_position(v: &Value) -> Result<LatLon, RegionError> {
    let arr = v.as_array().ok_or_else(|| RegionError::GeoJson("position is not an array".into()))?;
    match (arr.first().and_then(Value::as_f64), arr.get(1).and_then(Value::as_f64)) {
        (Some(lon), Some(lat)) => Ok(LatLon::new(lat, lon)),
        _ => Err(RegionError::GeoJson("position needs two numbers".into())),
    }
}

fn parse_polygon(v: &Value) -> Result<Polygon, RegionError> {
    let rings = v
        .as_array()
        .ok_or_else(|| RegionError::GeoJson("polygon coordinates are not an array".into()))?;
    let mut rings = rings.iter().map(|r| {
        r.as_array()
            .ok_or_else(|| RegionError::GeoJson("ring is not an array".into()))?
            .iter()
            .map(parse_position)
            .collect::<Result<Ring, _>>()
    });
    let exterior = rings
        .next()
        .ok_or_else(|| RegionError::GeoJson("polygon without rings".into()))??;
    Ok(Polygon {
        exterior,
        holes: rings.collect::<Result<_, _>>()?,
    })
}

fn parse_geometry(g: &Value) -> Result<Vec<Polygon>, RegionError> {
    let coords = g.get("coordinates");
    match (g.get("type").and_then(Value::as_str), coords) {
        (Some("Polygon"), Some(c)) => Ok(vec![parse_polygon(c)?]),
        (Some("MultiPolygon"), Some(Value::Array(polys))) => polys.iter().map(parse_polygon).collect(),
        (Some(other), _) => Err(RegionError::GeoJson(format!("unsupported geometry type {other}"))),
        (None, _) => Err(RegionError::GeoJson("geometry without type".into())),
    }
}

fn feature_name(props: Option<&Value>, key: &str, index: usize) -> String {
    match props.and_then(|p| p.get(key)) {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        _ => format!("feature-{index}"),
    }
}

/// Reads Polygon/MultiPolygon features, naming each by `name_property`
/// (falling back to `feature-<index>`).
pub fn parse_regions_geojson(text: &str, name_property: &str) -> Result<Vec<Region>, RegionError> {
    let doc: Value = serde_json::from_str(text).map_err(|e| RegionError::GeoJson(e.to_string()))?;
    let features: Vec<(String, &Value)> = match doc.get("type").and_then(Value::as_str) {
        Some("FeatureCollection") => doc
            .get("features")
            .and_then(Value::as_array)
            .ok_or_else(|| RegionError::GeoJson("FeatureCollection without features".into()))?
            .iter()
            .enumerate()
            .map(|(i, f)| (feature_name(f.get("properties"), name_property, i), f))
            .collect(),
        Some("Feature") => vec![(feature_name(doc.get("properties"), name_property, 0), &doc)],
        Some("Polygon" | "MultiPolygon") => {
            return Ok(vec![Region::new("feature-0", parse_geometry(&doc)?)?]);
        }
        _ => return Err(RegionError::GeoJson("expected a FeatureCollection, Feature or Polygon".into())),
    };
    features
        .into_iter()
        .filter(|(_, f)| !f.get("geometry").is_none_or(Value::is_null))
        .map(|(name, f)| Region::new(name, parse_geometry(&f["geometry"])?))
        .collect()
}

pub fn load_regions_geojson(path: &Path, name_property: &str) -> Result<Vec<Region>, RegionError> {
    let text = std::fs::read_to_string(path).map_err(|source| RegionError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_regions_geojson(&text, name_property)
}

/// Loads a boundary file, merging all its features into one region.
pub fn load_boundary_geojson(path: &Path) -> Result<Region, RegionError> {
    Region::union("boundary", load_regions_geojson(path, "name")?)
}

pub fn regions_geojson(regions: &[Region]) -> Value {
    let ring = |r: &Ring| r.iter().map(|p| vec![p.lon, p.lat]).collect::<Vec<_>>();
    let features: Vec<Value> = regions
        .iter()
        .map(|r| {
            let polys: Vec<Value> = r
                .polygons
                .iter()
                .map(|p| serde_json::json!(p.rings().map(ring).collect::<Vec<_>>()))
                .collect();
            serde_json::json!({
                "type": "Feature",
                "properties": {"name": r.name},
                "geometry": {"type": "MultiPolygon", "coordinates": polys},
            })
        })
        .collect();
    serde_json::json!({"type": "FeatureCollection", "features": features})
}
