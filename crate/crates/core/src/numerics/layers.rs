use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::{Scalar, Tensor};

/// `x W (+ b)`.
pub fn dense<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add_row(y, b),
        None => Ok(y),
    }
}

/// Inverted dropout. Identity at inference or when `rate == 0`.
pub fn dropout<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    rate: f64,
    training: bool,
    rng: &mut impl Rng,
) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let keep = T::of(1.0 / (1.0 - rate));
    let n = tape.value(x).len();
    let mask: Vec<T> = (0..n)
        .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
        .collect();
    let shape = tape.value(x).shape().to_vec();
    tape.mul_const(x, Tensor::new(shape, mask)?)
}
