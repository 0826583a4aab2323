//! Geohash computed with exact rational arithmetic.

use num_bigint::BigInt;
use poigraph::geocode::GEOHASH_ALPHABET;

/// `x = mantissa · 2^exp` exactly.
fn decompose(x: f64) -> (BigInt, i32) {
    if x == 0.0 {
        return (BigInt::from(0), 0);
    }
    let bits = x.to_bits();
    let sign = if bits >> 63 == 1 { -1i64 } else { 1 };
    let exp = ((bits >> 52) & 0x7ff) as i32;
    let frac = bits & ((1u64 << 52) - 1);
    let (m, e) = if exp == 0 {
        (frac, -1074)
    } else {
        (frac | (1u64 << 52), exp - 1075)
    };
    (BigInt::from(sign) * BigInt::from(m), e)
}

/// `min(floor((x − lo) · 2^n / span), 2^n − 1)` computed exactly.
fn cell(x: f64, lo: i64, span: i64, n: u32) -> u64 {
    let (m, e) = decompose(x);
    let (num, den) = if e >= 0 {
        ((m << e as usize) - BigInt::from(lo), BigInt::from(span))
    } else {
        let s = (-e) as usize;
        (m - (BigInt::from(lo) << s), BigInt::from(span) << s)
    };
    let q: BigInt = (num << n as usize) / den;
    let max = (1u64 << n) - 1;
    let q: u64 = q.try_into().expect("non-negative and small");
    q.min(max)
}

pub fn reference(lat: f64, lon: f64, k: usize) -> String {
    let total = 5 * k as u32;
    let lon_bits = total.div_ceil(2);
    let lat_bits = total / 2;
    let lon_cell = cell(lon, -180, 360, lon_bits);
    let lat_cell = cell(lat, -90, 180, lat_bits);
    let mut bits = Vec::with_capacity(total as usize);
    for i in 0..total {
        let (c, n, j) = if i % 2 == 0 {
            (lon_cell, lon_bits, i / 2)
        } else {
            (lat_cell, lat_bits, i / 2)
        };
        bits.push((c >> (n - 1 - j)) & 1);
    }
    bits.chunks(5)
        .map(|ch| GEOHASH_ALPHABET[ch.iter().fold(0, |a, &b| (a << 1) | b as usize)] as char)
        .collect()
}

