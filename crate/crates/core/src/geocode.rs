//! Geohash strings and the recurrent location encoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::check_coords;
use crate::error::{Error, Result};
use crate::numerics::{bigru_encode, init_bigru, BackwardState, ParamStore, Scalar, Tape, Var};

pub const GEOHASH_ALPHABET: &[u8; 32] = b"0123456789bcdefghjkmnpqrstuvwxyz";
pub const MAX_PRECISION: usize = 12;
pub const DEFAULT_PRECISION: usize = 10;
/// 32 alphabet symbols plus `[PAD]` at index 0.
pub const GEO_VOCAB: usize = 33;
pub const PAD: usize = 0;

fn check_precision(precision: usize) -> Result<()> {
    if !(1..=MAX_PRECISION).contains(&precision) {
        return Err(Error::Validation(format!(
            "geohash precision {precision} outside [1, {MAX_PRECISION}]"
        )));
    }
    Ok(())
}

/// Standard geohash, longitude bit first.
pub fn geohash_encode(lat: f64, lon: f64, precision: usize) -> Result<String> {
    check_coords(lat, lon)?;
    check_precision(precision)?;
    let (mut lat_lo, mut lat_hi) = (-90.0f64, 90.0f64);
    let (mut lon_lo, mut lon_hi) = (-180.0f64, 180.0f64);
    let mut out = String::with_capacity(precision);
    let mut even = true;
    for _ in 0..precision {
        let mut idx = 0usize;
        for _ in 0..5 {
            let (lo, hi, x) = if even {
                (&mut lon_lo, &mut lon_hi, lon)
            } else {
                (&mut lat_lo, &mut lat_hi, lat)
            };
            let mid = (*lo + *hi) / 2.0;
            idx <<= 1;
            if x >= mid {
                idx |= 1;
                *lo = mid;
            } else {
                *hi = mid;
            }
            even = !even;
        }
        out.push(GEOHASH_ALPHABET[idx] as char);
    }
    Ok(out)
}

fn symbol_index(c: char) -> Result<usize> {
    GEOHASH_ALPHABET
        .iter()
        .position(|&b| b as char == c)
        .ok_or_else(|| Error::Validation(format!("invalid geohash character `{c}`")))
}

/// Checks length and alphabet.
pub fn validate_geohash(g: &str) -> Result<()> {
    check_precision(g.chars().count())?;
    for c in g.chars() {
        symbol_index(c)?;
    }
    Ok(())
}

/// Decoded cell as `(lat_min, lat_max, lon_min, lon_max)`.
pub fn geohash_bounds(g: &str) -> Result<(f64, f64, f64, f64)> {
    validate_geohash(g)?;
    let (mut lat_lo, mut lat_hi) = (-90.0f64, 90.0f64);
    let (mut lon_lo, mut lon_hi) = (-180.0f64, 180.0f64);
    let mut even = true;
    for c in g.chars() {
        let idx = symbol_index(c)?;
        for bit in (0..5).rev() {
            let (lo, hi) = if even {
                (&mut lon_lo, &mut lon_hi)
            } else {
                (&mut lat_lo, &mut lat_hi)
            };
            let mid = (*lo + *hi) / 2.0;
            if idx >> bit & 1 == 1 {
                *lo = mid;
            } else {
                *hi = mid;
            }
            even = !even;
        }
    }
    Ok((lat_lo, lat_hi, lon_lo, lon_hi))
}

/// Left-pads with `[PAD]` to twelve symbols; alphabet symbol `k` maps to
/// index `k + 1`.
pub fn pad_and_index(g: &str) -> Result<[usize; MAX_PRECISION]> {
    validate_geohash(g)?;
    let mut out = [PAD; MAX_PRECISION];
    let offset = MAX_PRECISION - g.chars().count();
    for (i, c) in g.chars().enumerate() {
        out[offset + i] = symbol_index(c)? + 1;
    }
    Ok(out)
}

/// Hyperparameters of the location encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocationEncoderConfig {
    pub precision: usize,
    pub d_c: usize,
    /// Output width; each direction has `d / 2` units.
    pub d: usize,
    pub backward_state: BackwardState,
}

impl Default for LocationEncoderConfig {
    fn default() -> Self {
        LocationEncoderConfig {
            precision: DEFAULT_PRECISION,
            d_c: 64,
            d: 128,
            backward_state: BackwardState::Terminal,
        }
    }
}

pub const LOCATION_PREFIX: &str = "geo";

/// Location encoder bound to parameters named `geo.*` in a store.
#[derive(Clone, Debug, PartialEq)]
pub struct LocationEncoder {
    pub config: LocationEncoderConfig,
}

impl LocationEncoder {
    pub fn new(config: LocationEncoderConfig) -> Result<Self> {
        check_precision(config.precision)?;
        if config.d == 0 || config.d % 2 != 0 || config.d_c == 0 {
            return Err(Error::Config(format!(
                "location encoder needs even d > 0 and d_c > 0 (got d={}, d_c={})",
                config.d, config.d_c
            )));
        }
        Ok(LocationEncoder { config })
    }

    pub fn init_params<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<()> {
        init_bigru(
            store,
            LOCATION_PREFIX,
            GEO_VOCAB,
            self.config.d_c,
            self.config.d / 2,
            rng,
        )
    }

    /// Padded symbol sequence for a coordinate pair.
    pub fn symbols(&self, lat: f64, lon: f64) -> Result<Vec<usize>> {
        let g = geohash_encode(lat, lon, self.config.precision)?;
        Ok(pad_and_index(&g)?.to_vec())
    }

    /// `n × d` embeddings of the given coordinates. All twelve positions,
    /// padding included, are processed.
    pub fn encode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        coords: &[(f64, f64)],
    ) -> Result<Var> {
        let seqs = coords
            .iter()
            .map(|&(lat, lon)| self.symbols(lat, lon))
            .collect::<Result<Vec<_>>>()?;
        bigru_encode(tape, store, LOCATION_PREFIX, &seqs, self.config.backward_state)
    }
}

/// Single-location convenience wrapper returning a `d`-vector.
pub fn encode_location<T: Scalar>(
    lat: f64,
    lon: f64,
    encoder: &LocationEncoder,
    store: &ParamStore<T>,
) -> Result<Vec<T>> {
    let mut tape = Tape::new();
    let v = encoder.encode(&mut tape, store, &[(lat, lon)])?;
    Ok(tape.value(v).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check_sampled, RngStreams};
    use proptest::prelude::*;

    #[test]
    fn origin_is_s() {
        assert_eq!(geohash_encode(0.0, 0.0, 1).unwrap(), "s");
        let (a, b, c, d) = geohash_bounds("s").unwrap();
        assert_eq!((a, b, c, d), (0.0, 45.0, 0.0, 45.0));
    }

    #[test]
    fn padding_matches_example() {
        let idx = pad_and_index("wx4g09np9p").unwrap();
        let expect: Vec<usize> = "wx4g09np9p"
            .bytes()
            .map(|b| GEOHASH_ALPHABET.iter().position(|&a| a == b).unwrap() + 1)
            .collect();
        assert_eq!(&idx[..2], &[PAD, PAD]);
        assert_eq!(&idx[2..], &expect[..]);
        assert_eq!(pad_and_index("s").unwrap()[..11], [PAD; 11]);
        assert!(pad_and_index("wx4g09np9pzz").unwrap().iter().all(|&i| i != PAD));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(geohash_encode(91.0, 0.0, 5).is_err());
        assert!(geohash_encode(0.0, 181.0, 5).is_err());
        assert!(geohash_encode(0.0, 0.0, 13).is_err());
        assert!(geohash_encode(0.0, 0.0, 0).is_err());
        assert!(geohash_bounds("sa").is_err());
        assert!(geohash_bounds("").is_err());
    }

    proptest! {
        #[test]
        fn cell_contains_point(lat in -90.0f64..=90.0, lon in -180.0f64..=180.0, k in 1usize..=12) {
            let g = geohash_encode(lat, lon, k).unwrap();
            let (a, b, c, d) = geohash_bounds(&g).unwrap();
            prop_assert!(a <= lat && lat <= b && c <= lon && lon <= d);
        }

        #[test]
        fn cells_nest(lat in -90.0f64..90.0, lon in -180.0f64..180.0, k in 1usize..12, sym in 0usize..32) {
            let g = geohash_encode(lat, lon, k).unwrap();
            let child = format!("{g}{}", GEOHASH_ALPHABET[sym] as char);
            let (a, b, c0, d) = geohash_bounds(&g).unwrap();
            let (a2, b2, c2, d2) = geohash_bounds(&child).unwrap();
            prop_assert!(a <= a2 && b2 <= b && c0 <= c2 && d2 <= d);
            prop_assert!((b2 - a2) * (d2 - c2) < (b - a) * (d - c0));
        }

        #[test]
        fn shared_cell_shares_prefix(lat in -89.0f64..89.0, lon in -179.0f64..179.0, k in 1usize..=12, u in 0.0f64..1.0, v in 0.0f64..1.0) {
            let g = geohash_encode(lat, lon, k).unwrap();
            let (a, b, c, d) = geohash_bounds(&g).unwrap();
            let lat2 = (a + u * (b - a)).min(b);
            let lon2 = (c + v * (d - c)).min(d);
            let g2 = geohash_encode(lat2, lon2, k).unwrap();
            // Upper edges belong to the neighbouring cell.
            if lat2 < b && lon2 < d {
                prop_assert_eq!(g, g2);
            }
        }
    }

    fn encoder(d_c: usize, d: usize) -> (LocationEncoder, ParamStore<f64>) {
        let enc = LocationEncoder::new(LocationEncoderConfig {
            d_c,
            d,
            ..Default::default()
        })
        .unwrap();
        let mut store = ParamStore::new();
        enc.init_params(&mut store, &mut RngStreams::new(1).stream("geo"))
            .unwrap();
        (enc, store)
    }

    #[test]
    fn encoding_shape_and_determinism() {
        let (enc, store) = encoder(64, 128);
        let a = encode_location(35.68, 139.76, &enc, &store).unwrap();
        let b = encode_location(35.68, 139.76, &enc, &store).unwrap();
        assert_eq!(a.len(), 128);
        assert_eq!(a, b);
        assert_ne!(a, encode_location(-33.9, 151.2, &enc, &store).unwrap());
    }

    #[test]
    fn encoder_gradients() {
        let (enc, store) = encoder(4, 6);
        let report = grad_check_sampled(
            |tape, p| {
                let v = enc.encode(tape, p, &[(35.68, 139.76), (-12.5, 7.25)])?;
                tape.sum(v)
            },
            &store,
            1e-5,
            40,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn odd_width_rejected() {
        assert!(LocationEncoder::new(LocationEncoderConfig {
            d: 7,
            ..Default::default()
        })
        .is_err());
    }
}
