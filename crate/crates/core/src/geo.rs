//! Geodesic primitives on a spherical Earth.
//!
//! Angles are radians internally; [`GeoPoint`] carries degrees because that
//! is what every file format and API exchanges. Bearings are measured
//! clockwise from north.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Mean Earth radius in meters.
pub const MEAN_EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Separations below this use planar interpolation in [`intermediate_point`].
const PLANAR_INTERPOLATION_LIMIT_M: f64 = 1_000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("latitude {0} outside [-90, 90]")]
    Latitude(f64),
    #[error("longitude {0} outside [-180, 180]")]
    Longitude(f64),
    #[error("undefined bearing between coincident points")]
    UndefinedBearing,
    #[error("earth radius must be positive, got {0}")]
    Radius(f64),
}

/// A WGS84 position in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeoError> {
        if !(-90.0..=90.0).contains(&lat) {
            return Err(GeoError::Latitude(lat));
        }
        if !(-180.0..=180.0).contains(&lon) {
            return Err(GeoError::Longitude(lon));
        }
        Ok(Self { lat, lon })
    }

    pub fn validate(&self) -> Result<(), GeoError> {
        Self::new(self.lat, self.lon).map(|_| ())
    }

    fn lat_rad(&self) -> f64 {
        self.lat.to_radians()
    }

    fn lon_rad(&self) -> f64 {
        self.lon.to_radians()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarthModel {
    pub radius: f64,
}

impl EarthModel {
    pub fn new(radius: f64) -> Result<Self, GeoError> {
        if radius.is_finite() && radius > 0.0 {
            Ok(Self { radius })
        } else {
            Err(GeoError::Radius(radius))
        }
    }
}

impl Default for EarthModel {
    fn default() -> Self {
        Self {
            radius: MEAN_EARTH_RADIUS_M,
        }
    }
}

/// Great-circle ground distance in meters (haversine formula).
///
/// Bit-symmetric in its arguments: swapping `a` and `b` only negates the
/// differences before they are squared.
pub fn haversine_distance(a: GeoPoint, b: GeoPoint, earth: EarthModel) -> f64 {
    let (phi_a, phi_b) = (a.lat_rad(), b.lat_rad());
    let half_dphi = (phi_b - phi_a) / 2.0;
    let half_dlambda = (b.lon_rad() - a.lon_rad()) / 2.0;
    let h = half_dphi.sin().powi(2) + phi_a.cos() * phi_b.cos() * half_dlambda.sin().powi(2);
    2.0 * earth.radius * h.sqrt().min(1.0).asin()
}

/// [`haversine_distance`] on the default [`EarthModel`].
pub fn distance(a: GeoPoint, b: GeoPoint) -> f64 {
    haversine_distance(a, b, EarthModel::default())
}

/// Point reached by travelling `distance_m` along a great circle from
/// `origin` with the given initial bearing.
pub fn destination_point(
    origin: GeoPoint,
    bearing: f64,
    distance_m: f64,
    earth: EarthModel,
) -> GeoPoint {
    if distance_m == 0.0 {
        return origin;
    }
    let delta = distance_m / earth.radius;
    let phi1 = origin.lat_rad();
    let lambda1 = origin.lon_rad();
    let sin_phi2 = phi1.sin() * delta.cos() + phi1.cos() * delta.sin() * bearing.cos();
    let phi2 = sin_phi2.clamp(-1.0, 1.0).asin();
    let lambda2 = lambda1
        + (bearing.sin() * delta.sin() * phi1.cos()).atan2(delta.cos() - phi1.sin() * sin_phi2);
    GeoPoint {
        lat: phi2.to_degrees(),
        lon: normalize_lon(lambda2.to_degrees()),
    }
}

/// Point at fraction `ratio` of the way from `a` to `b`.
///
/// Below 1 km separation this is plain linear interpolation of the
/// coordinates, which is what collaborative correction operates on
/// (meter scale). Larger separations interpolate along the great circle.
pub fn intermediate_point(a: GeoPoint, b: GeoPoint, ratio: f64) -> GeoPoint {
    let ratio = ratio.clamp(0.0, 1.0);
    if ratio == 0.0 {
        return a;
    }
    if ratio == 1.0 {
        return b;
    }
    let d = distance(a, b);
    if d < PLANAR_INTERPOLATION_LIMIT_M {
        return GeoPoint {
            lat: a.lat + (b.lat - a.lat) * ratio,
            lon: a.lon + (b.lon - a.lon) * ratio,
        };
    }
    let delta = d / MEAN_EARTH_RADIUS_M;
    let wa = ((1.0 - ratio) * delta).sin() / delta.sin();
    let wb = (ratio * delta).sin() / delta.sin();
    let (pa, la, pb, lb) = (a.lat_rad(), a.lon_rad(), b.lat_rad(), b.lon_rad());
    let x = wa * pa.cos() * la.cos() + wb * pb.cos() * lb.cos();
    let y = wa * pa.cos() * la.sin() + wb * pb.cos() * lb.sin();
    let z = wa * pa.sin() + wb * pb.sin();
    GeoPoint {
        lat: z.atan2((x * x + y * y).sqrt()).to_degrees(),
        lon: y.atan2(x).to_degrees(),
    }
}

/// Initial great-circle bearing from `a` to `b`, in `[0, 2π)`.
pub fn initial_bearing(a: GeoPoint, b: GeoPoint) -> Result<f64, GeoError> {
    if a == b {
        return Err(GeoError::UndefinedBearing);
    }
    let (phi1, phi2) = (a.lat_rad(), b.lat_rad());
    let dlambda = b.lon_rad() - a.lon_rad();
    let y = dlambda.sin() * phi2.cos();
    let x = phi1.cos() * phi2.sin() - phi1.sin() * phi2.cos() * dlambda.cos();
    Ok(normalize_angle(y.atan2(x)))
}

/// Wraps any angle into `[0, 2π)`.
pub fn normalize_angle(theta: f64) -> f64 {
    let r = theta.rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU for tiny negative inputs
    if r >= TAU {
        0.0
    } else {
        r
    }
}

fn normalize_lon(lon: f64) -> f64 {
    if (-180.0..=180.0).contains(&lon) {
        lon
    } else {
        (lon + 540.0).rem_euclid(360.0) - 180.0
    }
}

/// Local east/north tangent frame anchored at an origin point.
///
/// Equirectangular projection; accurate to well below a centimeter over
/// building-sized extents.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalFrame {
    origin: GeoPoint,
    meters_per_deg_lat: f64,
    meters_per_deg_lon: f64,
}

impl LocalFrame {
    pub fn new(origin: GeoPoint) -> Self {
        let m = MEAN_EARTH_RADIUS_M * PI / 180.0;
        Self {
            origin,
            meters_per_deg_lat: m,
            meters_per_deg_lon: m * origin.lat_rad().cos(),
        }
    }

    pub fn origin(&self) -> GeoPoint {
        self.origin
    }

    /// Returns `(east, north)` in meters.
    pub fn to_local(&self, p: GeoPoint) -> (f64, f64) {
        (
            (p.lon - self.origin.lon) * self.meters_per_deg_lon,
            (p.lat - self.origin.lat) * self.meters_per_deg_lat,
        )
    }

    pub fn to_geo(&self, east: f64, north: f64) -> GeoPoint {
        GeoPoint {
            lat: self.origin.lat + north / self.meters_per_deg_lat,
            lon: self.origin.lon + east / self.meters_per_deg_lon,
        }
    }
}
