//! Geodesic helpers shared across the pipeline: haversine distances and a
//! local equirectangular plane for meter/degree conversions.

/// Mean Earth radius in meters, used for every geodesic computation.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Great-circle distance in meters between two (lat, lon) points in degrees.
pub fn haversine_m(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (lat1, lon1) = (a.0.to_radians(), a.1.to_radians());
    let (lat2, lon2) = (b.0.to_radians(), b.1.to_radians());
    let dlat = lat2 - lat1;
    let dlon = lon2 - lon1;
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Flat-plane approximation anchored at a reference point: x is meters east,
/// y is meters north. Good to well under a meter at urban scales, which is
/// all the correction and noise machinery needs.
#[derive(Debug, Clone, Copy)]
pub struct LocalFrame {
    lat0: f64,
    lon0: f64,
    cos_lat0: f64,
}

impl LocalFrame {
    pub fn new(lat0: f64, lon0: f64) -> Self {
        LocalFrame {
            lat0,
            lon0,
            cos_lat0: lat0.to_radians().cos(),
        }
    }

    pub fn to_local(&self, lat: f64, lon: f64) -> (f64, f64) {
        let x = (lon - self.lon0).to_radians() * EARTH_RADIUS_M * self.cos_lat0;
        let y = (lat - self.lat0).to_radians() * EARTH_RADIUS_M;
        (x, y)
    }

    pub fn to_geo(&self, x: f64, y: f64) -> (f64, f64) {
        let lat = self.lat0 + (y / EARTH_RADIUS_M).to_degrees();
        let lon = self.lon0 + (x / (EARTH_RADIUS_M * self.cos_lat0)).to_degrees();
        (lat, lon)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn haversine_zero_for_identical_points() {
        assert_eq!(haversine_m((3.14, 101.69), (3.14, 101.69)), 0.0);
    }

    #[test]
    fn haversine_one_degree_latitude() {
        // 1 degree of latitude = R * pi/180 regardless of longitude.
        let d = haversine_m((3.0, 101.0), (4.0, 101.0));
        let expect = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
        assert!((d - expect).abs() < 1e-6 * expect, "{d} vs {expect}");
    }

    #[test]
    fn haversine_symmetric() {
        let a = (3.1, 101.6);
        let b = (3.2, 101.8);
        assert_eq!(haversine_m(a, b), haversine_m(b, a));
    }

    #[test]
    fn local_frame_round_trip() {
        let frame = LocalFrame::new(3.14, 101.69);
        let (x, y) = frame.to_local(3.15, 101.71);
        let (lat, lon) = frame.to_geo(x, y);
        assert!((lat - 3.15).abs() < 1e-12);
        assert!((lon - 101.71).abs() < 1e-12);
    }

    #[test]
    fn local_frame_agrees_with_haversine_nearby() {
        let frame = LocalFrame::new(3.14, 101.69);
        let (x, y) = frame.to_local(3.141, 101.692);
        let planar = (x * x + y * y).sqrt();
        let geodesic = haversine_m((3.14, 101.69), (3.141, 101.692));
        assert!((planar - geodesic).abs() < 0.01, "{planar} vs {geodesic}");
    }
}
