use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

const WGS84_A: f64 = 6_378_137.0;
const WGS84_E2: f64 = 6.694_379_990_14e-3;

/// Geodetic point: latitude and longitude in degrees, ellipsoidal height in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geodetic {
    pub lat: f64,
    pub lon: f64,
    pub height: f64,
}

/// East-North-Up tangent frame anchored at a patch center.
///
/// The conversion is the first-order tangent-plane map (meridional and
/// prime-vertical radii evaluated at the origin), which keeps it affine.
/// Patches span a few hundred meters, where the neglected curvature terms are
/// far below a millimeter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalFrame {
    pub origin: Geodetic,
}

impl LocalFrame {
    pub fn new(origin: Geodetic) -> Self {
        Self { origin }
    }

    /// Meters per radian along (east, north).
    fn radii(&self) -> (f64, f64) {
        let phi = self.origin.lat.to_radians();
        let s2 = phi.sin().powi(2);
        let w = (1.0 - WGS84_E2 * s2).sqrt();
        let n = WGS84_A / w;
        let m = WGS84_A * (1.0 - WGS84_E2) / (w * w * w);
        (n * phi.cos(), m)
    }

    pub fn to_geodetic(&self, enu: &Vector3<f64>) -> Geodetic {
        let (re, rn) = self.radii();
        Geodetic {
            lat: self.origin.lat + (enu.y / rn).to_degrees(),
            lon: self.origin.lon + (enu.x / re).to_degrees(),
            height: self.origin.height + enu.z,
        }
    }

    pub fn from_geodetic(&self, geo: &Geodetic) -> Vector3<f64> {
        let (re, rn) = self.radii();
        Vector3::new(
            (geo.lon - self.origin.lon).to_radians() * re,
            (geo.lat - self.origin.lat).to_radians() * rn,
            geo.height - self.origin.height,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_tight() {
        let frame = LocalFrame::new(Geodetic { lat: 30.3, lon: -81.6, height: 12.0 });
        let p = Vector3::new(120.5, -88.25, 31.0);
        let back = frame.from_geodetic(&frame.to_geodetic(&p));
        assert!((back - p).norm() < 1e-8);
    }

    #[test]
    fn one_arcsecond_of_latitude_is_about_31_meters() {
        let frame = LocalFrame::new(Geodetic { lat: 45.0, lon: 0.0, height: 0.0 });
        let g = Geodetic { lat: 45.0 + 1.0 / 3600.0, lon: 0.0, height: 0.0 };
        let y = frame.from_geodetic(&g).y;
        assert!((y - 30.87).abs() < 0.05, "{y}");
    }
}
