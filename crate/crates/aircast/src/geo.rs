//! Great-circle geometry on WGS84 coordinates: initial bearings between
//! stations and the pairwise bearing matrix used by the flow feature.
//!
//! A spherical earth model is used; for station separations of a fraction of
//! a degree this is accurate to well under 0.01°.

use crate::data::StationMeta;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeoError {
    #[error("initial bearing is undefined for identical points ({lat}, {lon})")]
    IdenticalPoints { lat: f64, lon: f64 },
}

const EARTH_RADIUS_KM: f64 = 6371.0;

/// Initial great-circle bearing (forward azimuth) in degrees `[0, 360)` from
/// `(lat1, lon1)` to `(lat2, lon2)`, both in degrees.
pub fn initial_bearing(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> Result<f64, GeoError> {
    if lat1 == lat2 && lon1 == lon2 {
        return Err(GeoError::IdenticalPoints { lat: lat1, lon: lon1 });
    }
    let phi1 = lat1.to_radians();
    let phi2 = lat2.to_radians();
    let delta = (lon2 - lon1).to_radians();
    let y = delta.sin() * phi2.cos();
    let x = phi1.cos() * phi2.sin() - phi1.sin() * phi2.cos() * delta.cos();
    Ok(y.atan2(x).to_degrees().rem_euclid(360.0))
}

/// Great-circle distance in kilometres (haversine).
pub fn distance_km(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let phi1 = lat1.to_radians();
    let phi2 = lat2.to_radians();
    let dphi = (lat2 - lat1).to_radians();
    let dlam = (lon2 - lon1).to_radians();
    let a = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlam / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * a.sqrt().asin()
}

/// Pairwise initial bearings between stations.
///
/// `theta(a, i)` is the bearing from station `a` to station `i`. The diagonal
/// is undefined and must never be read.
#[derive(Debug, Clone)]
pub struct BearingMatrix {
    n: usize,
    theta: Vec<f64>,
}

impl BearingMatrix {
    pub fn compute(stations: &[StationMeta]) -> Result<Self, GeoError> {
        let n = stations.len();
        let mut theta = vec![f64::NAN; n * n];
        for (a, from) in stations.iter().enumerate() {
            for (i, to) in stations.iter().enumerate() {
                if a == i {
                    continue;
                }
                theta[a * n + i] =
                    initial_bearing(from.latitude, from.longitude, to.latitude, to.longitude)?;
            }
        }
        Ok(Self { n, theta })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Bearing in degrees from station `a` to station `i`; panics on the diagonal.
    pub fn theta(&self, a: usize, i: usize) -> f64 {
        assert_ne!(a, i, "bearing from a station to itself is undefined");
        self.theta[a * self.n + i]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent forward-azimuth computation via 3-D unit vectors: the
    /// azimuth of the great-circle tangent at the start point, expressed in
    /// the local east/north frame. Shares no code with `initial_bearing`.
    fn bearing_oracle(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
        fn unit(lat: f64, lon: f64) -> [f64; 3] {
            let (phi, lam) = (lat.to_radians(), lon.to_radians());
            [phi.cos() * lam.cos(), phi.cos() * lam.sin(), phi.sin()]
        }
        fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
            [
                a[1] * b[2] - a[2] * b[1],
                a[2] * b[0] - a[0] * b[2],
                a[0] * b[1] - a[1] * b[0],
            ]
        }
        fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
            a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
        }
        let p1 = unit(lat1, lon1);
        let p2 = unit(lat2, lon2);
        // Tangent at p1 along the great circle toward p2.
        let normal = cross(p1, p2);
        let tangent = cross(normal, p1);
        // Local frame at p1.
        let east = cross([0.0, 0.0, 1.0], p1);
        let north = cross(p1, east);
        let e = dot(tangent, east) / (dot(east, east).sqrt());
        let n = dot(tangent, north) / (dot(north, north).sqrt());
        e.atan2(n).to_degrees().rem_euclid(360.0)
    }

    #[test]
    fn due_north_is_zero() {
        assert!((initial_bearing(0.0, 0.0, 1.0, 0.0).unwrap() - 0.0).abs() < 1e-9);
    }

    #[test]
    fn due_east_on_equator_is_ninety() {
        assert!((initial_bearing(0.0, 0.0, 0.0, 1.0).unwrap() - 90.0).abs() < 1e-9);
    }

    #[test]
    fn delhi_pair_matches_azimuth_oracle() {
        let got = initial_bearing(28.5, 77.1, 28.6, 77.3).unwrap();
        let want = bearing_oracle(28.5, 77.1, 28.6, 77.3);
        assert!((got - want).abs() < 0.01, "got {got}, oracle {want}");
        // Frozen from the oracle above.
        assert!((got - 60.30299).abs() < 0.01, "got {got}");
    }

    #[test]
    fn identical_points_are_rejected() {
        assert_eq!(
            initial_bearing(28.5, 77.1, 28.5, 77.1),
            Err(GeoError::IdenticalPoints { lat: 28.5, lon: 77.1 })
        );
    }

    #[test]
    fn random_pairs_match_azimuth_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let lat1: f64 = rng.gen_range(-80.0..80.0);
            let lon1: f64 = rng.gen_range(-179.0..179.0);
            let lat2: f64 = lat1 + rng.gen_range(-1.0..1.0);
            let lon2: f64 = lon1 + rng.gen_range(-1.0..1.0);
            if lat1 == lat2 && lon1 == lon2 {
                continue;
            }
            let got = initial_bearing(lat1, lon1, lat2, lon2).unwrap();
            let want = bearing_oracle(lat1, lon1, lat2, lon2);
            let diff = (got - want).abs();
            let diff = diff.min(360.0 - diff);
            assert!(diff < 0.01, "({lat1},{lon1})->({lat2},{lon2}): got {got}, oracle {want}");
        }
    }

    #[test]
    fn bearing_matrix_covers_all_ordered_pairs() {
        let stations = vec![
            StationMeta::new("a", 28.50, 77.10).unwrap(),
            StationMeta::new("b", 28.55, 77.20).unwrap(),
            StationMeta::new("c", 28.60, 77.15).unwrap(),
        ];
        let m = BearingMatrix::compute(&stations).unwrap();
        for a in 0..3 {
            for i in 0..3 {
                if a != i {
                    let t = m.theta(a, i);
                    assert!((0.0..360.0).contains(&t));
                }
            }
        }
    }

    #[test]
    fn distance_is_symmetric_and_sane() {
        let d1 = distance_km(28.5, 77.1, 28.6, 77.3);
        let d2 = distance_km(28.6, 77.3, 28.5, 77.1);
        assert!((d1 - d2).abs() < 1e-9);
        // ~0.1° lat + 0.2° lon near 28.5°N is roughly 22 km.
        assert!(d1 > 15.0 && d1 < 30.0, "{d1}");
    }
}
