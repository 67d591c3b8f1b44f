//! Geo-indistinguishable location release via the planar Laplace mechanism.
//!
//! A true location is displaced by a polar noise vector: a uniform bearing and
//! a radius with density `ε² r e^{-εr}`. The output density at planar offset
//! `z` is `(ε²/2π) e^{-ε|z|}`, so for two true locations at distance `d` the
//! likelihood ratio of any output is at most `e^{εd}`.
//!
//! `ε` is in inverse kilometers and every radius at this boundary is in km.

use crate::geo::{destination_point, LatLon, PlanarPoint};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};

/// Displacements beyond this are not city-scale and are refused by [`displace`].
pub const MAX_DISPLACEMENT_KM: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PrivacyError {
    #[error("epsilon must be positive and finite, got {0}")]
    Epsilon(f64),
    #[error("radius must be positive and finite, got {0} km")]
    Radius(f64),
    #[error("likelihood ratio bound must exceed 1, got {0}")]
    Ratio(f64),
    #[error("distance must be non-negative, got {0} km")]
    NegativeDistance(f64),
    #[error("displacement of {0} km exceeds the {MAX_DISPLACEMENT_KM} km limit")]
    DisplacementTooLarge(f64),
    #[error("invalid location {0}")]
    Location(LatLon),
}

/// The `(ε, R)` pair. Only `epsilon` drives sampling; `radius_km` records
/// the protection radius the ε was derived for.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyParams {
    pub epsilon: f64,
    pub radius_km: f64,
}

impl PrivacyParams {
    pub fn new(epsilon: f64, radius_km: f64) -> Result<Self, PrivacyError> {
        check_epsilon(epsilon)?;
        if !(radius_km > 0.0 && radius_km.is_finite()) {
            return Err(PrivacyError::Radius(radius_km));
        }
        Ok(Self { epsilon, radius_km })
    }

    /// Params guaranteeing a likelihood ratio of at most `ratio_bound` within `radius_km`.
    pub fn from_ratio(radius_km: f64, ratio_bound: f64) -> Result<Self, PrivacyError> {
        let epsilon = epsilon_from(radius_km, ratio_bound)?;
        Ok(Self { epsilon, radius_km })
    }

    /// `e^{εR}`, the worst-case likelihood ratio within the radius.
    pub fn ratio_bound(&self) -> f64 {
        (self.epsilon * self.radius_km).exp()
    }
}

fn check_epsilon(epsilon: f64) -> Result<(), PrivacyError> {
    if epsilon > 0.0 && epsilon.is_finite() {
        Ok(())
    } else {
        Err(PrivacyError::Epsilon(epsilon))
    }
}

/// `ε = ln(ratio_bound) / R`.
pub fn epsilon_from(radius_km: f64, ratio_bound: f64) -> Result<f64, PrivacyError> {
    if !(radius_km > 0.0 && radius_km.is_finite()) {
        return Err(PrivacyError::Radius(radius_km));
    }
    if !(ratio_bound > 1.0 && ratio_bound.is_finite()) {
        return Err(PrivacyError::Ratio(ratio_bound));
    }
    Ok(ratio_bound.ln() / radius_km)
}

/// Polar noise: bearing `theta` (radians, 0 = north, clockwise) and radius `r` (km).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolarNoise {
    pub theta: f64,
    pub r: f64,
}

/// Uniform on (0, 1].
fn open_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    1.0 - rng.random::<f64>()
}

/// Draws `theta ~ U[0, 2π)` and `r ~ Gamma(2, ε)` as the sum of two
/// Exponential(ε) variates.
///
/// Panics if `epsilon` is not positive and finite.
pub fn sample_polar_laplace<R: Rng + ?Sized>(epsilon: f64, rng: &mut R) -> PolarNoise {
    assert!(epsilon > 0.0 && epsilon.is_finite(), "epsilon must be positive, got {epsilon}");
    let mut theta = rng.random::<f64>() * TAU;
    if theta >= TAU {
        theta = 0.0;
    }
    let u1 = open_unit(rng);
    let u2 = open_unit(rng);
    let r = -(u1.ln() + u2.ln()) / epsilon;
    PolarNoise { theta, r }
}

/// Moves `loc` by `noise.r` km along bearing `noise.theta` on the sphere.
pub fn displace(loc: LatLon, noise: PolarNoise) -> Result<LatLon, PrivacyError> {
    if !loc.is_valid() {
        return Err(PrivacyError::Location(loc));
    }
    if noise.r.is_nan() || noise.r < 0.0 {
        return Err(PrivacyError::NegativeDistance(noise.r));
    }
    if noise.r > MAX_DISPLACEMENT_KM {
        return Err(PrivacyError::DisplacementTooLarge(noise.r));
    }
    Ok(destination_point(loc, noise.theta, noise.r))
}

/// Releases a noisy version of `loc`. Outputs are never clipped or remapped,
/// so they may land anywhere (outside a city, in the ocean).
pub fn perturb<R: Rng + ?Sized>(loc: LatLon, epsilon: f64, rng: &mut R) -> LatLon {
    let noise = sample_polar_laplace(epsilon, rng);
    destination_point(loc, noise.theta, noise.r)
}

/// Probability that the displacement is at most `x` km: `1 - (1 + εx) e^{-εx}`.
pub fn analytic_cdf(epsilon: f64, x: f64) -> Result<f64, PrivacyError> {
    check_epsilon(epsilon)?;
    if x.is_nan() || x < 0.0 {
        return Err(PrivacyError::NegativeDistance(x));
    }
    let ex = epsilon * x;
    Ok(1.0 - (1.0 + ex) * (-ex).exp())
}

/// Output density (per km²) at `at` for true location `center`.
pub fn planar_density(epsilon: f64, center: PlanarPoint, at: PlanarPoint) -> f64 {
    epsilon * epsilon / (2.0 * PI) * (-epsilon * center.distance(&at)).exp()
}
