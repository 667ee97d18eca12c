//! WGS84 geodetic positions, UTM projection and heading arithmetic.
//!
//! The projection uses the Krüger series carried to sixth order in the third
//! flattening, which keeps the forward/inverse pair accurate to a few
//! nanometres anywhere inside a zone (and well beyond it).

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// WGS84 semi-major axis, metres.
pub const WGS84_A: f64 = 6_378_137.0;
/// WGS84 flattening.
pub const WGS84_F: f64 = 1.0 / 298.257_223_563;
/// UTM central scale factor.
pub const UTM_K0: f64 = 0.9996;
pub const FALSE_EASTING: f64 = 500_000.0;
pub const FALSE_NORTHING_SOUTH: f64 = 10_000_000.0;

/// Largest meridian offset inside any zone, exception zones included (6°),
/// plus the 1° overlap allowed when a zone is forced.
pub const FORCED_ZONE_MAX_OFFSET_DEG: f64 = 7.0;

const MIN_LAT: f64 = -80.0;
const MAX_LAT: f64 = 84.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeoError {
    #[error("invalid coordinate: {0}")]
    InvalidCoordinate(String),
    #[error("longitude {lon}° is {offset:.3}° from the central meridian of zone {zone}")]
    OutOfZone { lon: f64, zone: u8, offset: f64 },
}

/// A WGS84 position in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    lat: f64,
    lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeoError> {
        if !lat.is_finite() || !lon.is_finite() {
            return Err(GeoError::InvalidCoordinate(format!(
                "non-finite lat/lon ({lat}, {lon})"
            )));
        }
        if !(-90.0..=90.0).contains(&lat) {
            return Err(GeoError::InvalidCoordinate(format!("latitude {lat} outside [-90, 90]")));
        }
        if !(-180.0..180.0).contains(&lon) {
            return Err(GeoError::InvalidCoordinate(format!(
                "longitude {lon} outside [-180, 180)"
            )));
        }
        Ok(Self { lat, lon })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hemisphere {
    North,
    South,
}

/// A UTM zone: number plus hemisphere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct UtmZone {
    pub number: u8,
    pub hemisphere: Hemisphere,
}

impl UtmZone {
    pub fn new(number: u8, hemisphere: Hemisphere) -> Result<Self, GeoError> {
        if !(1..=60).contains(&number) {
            return Err(GeoError::InvalidCoordinate(format!("zone {number} outside [1, 60]")));
        }
        Ok(Self { number, hemisphere })
    }

    pub fn central_meridian(&self) -> f64 {
        central_meridian(self.number)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtmPoint {
    pub easting: f64,
    pub northing: f64,
    pub zone: UtmZone,
}

/// Heading in degrees clockwise from north, canonicalised to `[0, 360)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Heading(f64);

impl Heading {
    /// Wraps any finite angle onto `[0, 360)`.
    pub fn new(deg: f64) -> Self {
        let mut v = deg.rem_euclid(360.0);
        // rem_euclid can round up to exactly 360 for tiny negative inputs.
        if v >= 360.0 {
            v = 0.0;
        }
        Self(v)
    }

    pub fn degrees(&self) -> f64 {
        self.0
    }

    /// Planar yaw in radians, counter-clockwise from +x (east), in `(-π, π]`.
    pub fn to_yaw(&self) -> f64 {
        wrap_pi(std::f64::consts::FRAC_PI_2 - self.0.to_radians())
    }

    pub fn from_yaw(yaw: f64) -> Self {
        Self::new(90.0 - yaw.to_degrees())
    }

    /// Linear interpolation along the shorter arc.
    pub fn lerp(&self, other: Heading, w: f64) -> Heading {
        let mut delta = other.0 - self.0;
        if delta > 180.0 {
            delta -= 360.0;
        } else if delta < -180.0 {
            delta += 360.0;
        }
        Heading::new(self.0 + w * delta)
    }
}

/// Smallest absolute separation between two headings, in `[0, 180]`.
pub fn angle_diff(a: Heading, b: Heading) -> f64 {
    let d = (a.0 - b.0).abs() % 360.0;
    if d > 180.0 {
        360.0 - d
    } else {
        d
    }
}

/// Wraps an angle in radians onto `(-π, π]`.
pub fn wrap_pi(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let mut v = (a + PI).rem_euclid(TAU) - PI;
    if v <= -PI {
        v += TAU;
    }
    v
}

pub fn central_meridian(zone: u8) -> f64 {
    f64::from(zone) * 6.0 - 183.0
}

/// Standard UTM zone for a position, including the Norway and Svalbard exceptions.
pub fn zone_for(p: GeoPoint) -> u8 {
    let (lat, lon) = (p.lat, p.lon);
    if (56.0..64.0).contains(&lat) && (3.0..12.0).contains(&lon) {
        return 32;
    }
    if (72.0..=84.0).contains(&lat) && lon >= 0.0 {
        if lon < 9.0 {
            return 31;
        } else if lon < 21.0 {
            return 33;
        } else if lon < 33.0 {
            return 35;
        } else if lon < 42.0 {
            return 37;
        }
    }
    (((lon + 180.0) / 6.0).floor() as i32 + 1).clamp(1, 60) as u8
}

/// Series constants derived from the ellipsoid.
struct Kruger {
    e: f64,
    a_rect: f64,
    alpha: [f64; 6],
    beta: [f64; 6],
}

impl Kruger {
    fn wgs84() -> Self {
        let f = WGS84_F;
        let n = f / (2.0 - f);
        let (n2, n3) = (n * n, n * n * n);
        let (n4, n5, n6) = (n2 * n2, n2 * n3, n3 * n3);
        let a_rect = WGS84_A / (1.0 + n) * (1.0 + n2 / 4.0 + n4 / 64.0 + n6 / 256.0);
        let alpha = [
            n / 2.0 - 2.0 / 3.0 * n2 + 5.0 / 16.0 * n3 + 41.0 / 180.0 * n4 - 127.0 / 288.0 * n5
                + 7891.0 / 37800.0 * n6,
            13.0 / 48.0 * n2 - 3.0 / 5.0 * n3 + 557.0 / 1440.0 * n4 + 281.0 / 630.0 * n5
                - 1_983_433.0 / 1_935_360.0 * n6,
            61.0 / 240.0 * n3 - 103.0 / 140.0 * n4 + 15061.0 / 26880.0 * n5
                + 167_603.0 / 181_440.0 * n6,
            49561.0 / 161_280.0 * n4 - 179.0 / 168.0 * n5 + 6_601_661.0 / 7_257_600.0 * n6,
            34729.0 / 80640.0 * n5 - 3_418_889.0 / 1_995_840.0 * n6,
            212_378_941.0 / 319_334_400.0 * n6,
        ];
        let beta = [
            n / 2.0 - 2.0 / 3.0 * n2 + 37.0 / 96.0 * n3 - 1.0 / 360.0 * n4 - 81.0 / 512.0 * n5
                + 96199.0 / 604_800.0 * n6,
            n2 / 48.0 + n3 / 15.0 - 437.0 / 1440.0 * n4 + 46.0 / 105.0 * n5
                - 1_118_711.0 / 3_870_720.0 * n6,
            17.0 / 480.0 * n3 - 37.0 / 840.0 * n4 - 209.0 / 4480.0 * n5 + 5569.0 / 90720.0 * n6,
            4397.0 / 161_280.0 * n4 - 11.0 / 504.0 * n5 - 830_251.0 / 7_257_600.0 * n6,
            4583.0 / 161_280.0 * n5 - 108_847.0 / 3_991_680.0 * n6,
            20_648_693.0 / 638_668_800.0 * n6,
        ];
        Self { e: (f * (2.0 - f)).sqrt(), a_rect, alpha, beta }
    }

    /// tan(conformal latitude) from tan(geodetic latitude).
    fn taup(&self, tau: f64) -> f64 {
        let tau1 = tau.hypot(1.0);
        let sig = (self.e * (self.e * tau / tau1).atanh()).sinh();
        tau * sig.hypot(1.0) - sig * tau1
    }

    /// Inverse of `taup` by Newton iteration.
    fn tau_from_taup(&self, taup: f64) -> f64 {
        let e2m = 1.0 - self.e * self.e;
        let mut tau = taup / e2m;
        for _ in 0..8 {
            let tau1 = tau.hypot(1.0);
            let taupa = self.taup(tau);
            let dtau = (taup - taupa) * (1.0 + e2m * tau * tau)
                / (e2m * tau1 * taupa.hypot(1.0));
            tau += dtau;
            if dtau.abs() < 1e-15 * tau.abs().max(1.0) {
                break;
            }
        }
        tau
    }
}

fn kruger() -> &'static Kruger {
    use std::sync::OnceLock;
    static K: OnceLock<Kruger> = OnceLock::new();
    K.get_or_init(Kruger::wgs84)
}

/// Projects a position to UTM. With `forced_zone` the point is projected into
/// that zone as long as it lies within 4° of the zone's central meridian.
pub fn to_utm(p: GeoPoint, forced_zone: Option<u8>) -> Result<UtmPoint, GeoError> {
    if !(MIN_LAT..=MAX_LAT).contains(&p.lat) {
        return Err(GeoError::InvalidCoordinate(format!(
            "latitude {} outside the UTM band [{MIN_LAT}, {MAX_LAT}]",
            p.lat
        )));
    }
    let zone = match forced_zone {
        Some(z) => {
            if !(1..=60).contains(&z) {
                return Err(GeoError::InvalidCoordinate(format!("zone {z} outside [1, 60]")));
            }
            let offset = lon_offset(p.lon, central_meridian(z)).abs();
            if offset >= FORCED_ZONE_MAX_OFFSET_DEG {
                return Err(GeoError::OutOfZone { lon: p.lon, zone: z, offset });
            }
            z
        }
        None => zone_for(p),
    };
    let hemisphere = if p.lat >= 0.0 { Hemisphere::North } else { Hemisphere::South };
    let k = kruger();

    let phi = p.lat.to_radians();
    let lam = lon_offset(p.lon, central_meridian(zone)).to_radians();
    let tau = phi.tan();
    let taup = k.taup(tau);
    let xip = taup.atan2(lam.cos());
    let etap = (lam.sin() / taup.hypot(lam.cos())).asinh();

    let mut xi = xip;
    let mut eta = etap;
    for (j, a) in k.alpha.iter().enumerate() {
        let m = 2.0 * (j + 1) as f64;
        xi += a * (m * xip).sin() * (m * etap).cosh();
        eta += a * (m * xip).cos() * (m * etap).sinh();
    }

    let easting = FALSE_EASTING + UTM_K0 * k.a_rect * eta;
    let mut northing = UTM_K0 * k.a_rect * xi;
    if hemisphere == Hemisphere::South {
        northing += FALSE_NORTHING_SOUTH;
    }
    Ok(UtmPoint { easting, northing, zone: UtmZone { number: zone, hemisphere } })
}

/// Inverse projection.
pub fn from_utm(p: UtmPoint) -> Result<GeoPoint, GeoError> {
    if !p.easting.is_finite() || !p.northing.is_finite() {
        return Err(GeoError::InvalidCoordinate(format!(
            "non-finite easting/northing ({}, {})",
            p.easting, p.northing
        )));
    }
    if !(1..=60).contains(&p.zone.number) {
        return Err(GeoError::InvalidCoordinate(format!("zone {} outside [1, 60]", p.zone.number)));
    }
    let k = kruger();
    let northing = match p.zone.hemisphere {
        Hemisphere::North => p.northing,
        Hemisphere::South => p.northing - FALSE_NORTHING_SOUTH,
    };
    let xi = northing / (UTM_K0 * k.a_rect);
    let eta = (p.easting - FALSE_EASTING) / (UTM_K0 * k.a_rect);

    let mut xip = xi;
    let mut etap = eta;
    for (j, b) in k.beta.iter().enumerate() {
        let m = 2.0 * (j + 1) as f64;
        xip -= b * (m * xi).sin() * (m * eta).cosh();
        etap -= b * (m * xi).cos() * (m * eta).sinh();
    }
    let taup = xip.sin() / etap.sinh().hypot(xip.cos());
    let lam = etap.sinh().atan2(xip.cos());
    let tau = k.tau_from_taup(taup);

    let lat = tau.atan().to_degrees();
    let mut lon = central_meridian(p.zone.number) + lam.to_degrees();
    if lon >= 180.0 {
        lon -= 360.0;
    } else if lon < -180.0 {
        lon += 360.0;
    }
    GeoPoint::new(lat, lon)
}

/// Re-expresses planar coordinates from one zone in another.
pub fn reproject(x: f64, y: f64, from: UtmZone, to: UtmZone) -> Result<(f64, f64), GeoError> {
    if from == to {
        return Ok((x, y));
    }
    let g = from_utm(UtmPoint { easting: x, northing: y, zone: from })?;
    let mut u = to_utm(g, Some(to.number))?;
    if u.zone.hemisphere != to.hemisphere {
        u.northing += match to.hemisphere {
            Hemisphere::South => FALSE_NORTHING_SOUTH,
            Hemisphere::North => -FALSE_NORTHING_SOUTH,
        };
    }
    Ok((u.easting, u.northing))
}

/// Signed longitude difference folded into `[-180, 180)`.
fn lon_offset(lon: f64, meridian: f64) -> f64 {
    (lon - meridian + 180.0).rem_euclid(360.0) - 180.0
}
