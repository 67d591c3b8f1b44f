//! Privacy analysis toolkit for public micromobility availability feeds.
//!
//! The attack side ingests GBFS `free_bike_status` snapshots ([`feed`]),
//! rebuilds rider trips by diffing consecutive snapshots ([`trips`]) and
//! clusters trip endpoints into hotspots ([`cluster`]). The defense side
//! publishes locations through the planar Laplace mechanism ([`privacy`]) and
//! measures what that costs city use cases ([`utility`]). [`synth`] generates
//! fleets with known ground truth for validating the whole pipeline.

pub mod cli;
pub mod cluster;
pub mod feed;
pub mod geo;
pub mod privacy;
pub mod region;
pub mod rng;
pub mod synth;
pub mod trips;
pub mod utility;

pub use geo::{haversine_distance, LatLon, PlanarPoint, EARTH_RADIUS_KM};
