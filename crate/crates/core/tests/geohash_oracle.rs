//! Geohash encoding checked against exact rational arithmetic.

mod common;

use common::geohash_ref::reference;
use poigraph::geocode::geohash_encode;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn matches_exact_reference_on_random_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for i in 0..10_000 {
        let lat: f64 = rng.gen_range(-90.0..=90.0);
        let lon: f64 = rng.gen_range(-180.0..=180.0);
        let k = 1 + i % 12;
        assert_eq!(
            geohash_encode(lat, lon, k).unwrap(),
            reference(lat, lon, k),
            "({lat}, {lon}) at precision {k}"
        );
    }
}

#[test]
fn matches_reference_on_edges() {
    let edges = [
        (0.0, 0.0),
        (90.0, 180.0),
        (-90.0, -180.0),
        (45.0, 45.0),
        (-0.0, -0.0),
        (89.999999, -179.999999),
        (39.92324, 116.3906),
    ];
    for (lat, lon) in edges {
        for k in 1..=12 {
            assert_eq!(geohash_encode(lat, lon, k).unwrap(), reference(lat, lon, k));
        }
    }
    assert_eq!(reference(0.0, 0.0, 1), "s");
}
