//! Bidirectional GRU over batches of variable-length index sequences.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::params::ParamStore;
use crate::numerics::tape::{GruVars, Tape, Var};
use crate::numerics::tensor::{Scalar, Tensor};

/// Which backward-direction state summarizes a sequence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackwardState {
    /// State after the whole reversed sequence, i.e. at the first position.
    #[default]
    Terminal,
    /// State after one step, i.e. at the last position.
    LastPosition,
}

/// Registers `{prefix}.emb` (`vocab × d_in`) and both directions'
/// GRU weights (`d_in → d_h`).
pub fn init_bigru<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    vocab: usize,
    d_in: usize,
    d_h: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    store.insert_uniform(format!("{prefix}.emb"), &[vocab, d_in], d_in, rng)?;
    for dir in ["fwd", "bwd"] {
        store.insert_uniform(format!("{prefix}.{dir}.wx"), &[d_in, 3 * d_h], d_h, rng)?;
        store.insert_uniform(format!("{prefix}.{dir}.wh"), &[d_h, 3 * d_h], d_h, rng)?;
        store.insert_uniform(format!("{prefix}.{dir}.bx"), &[3 * d_h], d_h, rng)?;
        store.insert_uniform(format!("{prefix}.{dir}.bh"), &[3 * d_h], d_h, rng)?;
    }
    Ok(())
}

fn gru_vars<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    dir: &str,
) -> Result<GruVars> {
    Ok(GruVars {
        wx: tape.param(store, &format!("{prefix}.{dir}.wx"))?,
        wh: tape.param(store, &format!("{prefix}.{dir}.wh"))?,
        bx: tape.param(store, &format!("{prefix}.{dir}.bx"))?,
        bh: tape.param(store, &format!("{prefix}.{dir}.bh"))?,
    })
}

/// Encodes each sequence into `[forward final ; backward summary]`, an
/// `n × 2·d_h` matrix in input order. Sequences must be non-empty; only
/// their real positions are processed.
pub fn bigru_encode<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    seqs: &[Vec<usize>],
    backward: BackwardState,
) -> Result<Var> {
    if seqs.is_empty() {
        return Err(Error::dim("bigru_encode", "empty batch"));
    }
    if seqs.iter().any(|s| s.is_empty()) {
        return Err(Error::dim("bigru_encode", "empty sequence"));
    }
    let emb = tape.param(store, &format!("{prefix}.emb"))?;
    let fwd = gru_vars(tape, store, prefix, "fwd")?;
    let bwd = gru_vars(tape, store, prefix, "bwd")?;
    let d_h = tape.dims(fwd.wh).0;

    let n = seqs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| seqs[b].len().cmp(&seqs[a].len()).then(a.cmp(&b)));
    let max_len = seqs[order[0]].len();

    let mut hf = tape.constant(Tensor::zeros([n, d_h]));
    let mut hb = tape.constant(Tensor::zeros([n, d_h]));
    let mut hb_first = None;
    for t in 0..max_len {
        let active = order.iter().take_while(|&&i| seqs[i].len() > t).count();
        let fi: Vec<usize> = order[..active].iter().map(|&i| seqs[i][t]).collect();
        let bi: Vec<usize> = order[..active]
            .iter()
            .map(|&i| seqs[i][seqs[i].len() - 1 - t])
            .collect();
        let xf = tape.gather_rows(emb, fi)?;
        let xb = tape.gather_rows(emb, bi)?;
        hf = tape.gru_cell(xf, hf, fwd)?;
        hb = tape.gru_cell(xb, hb, bwd)?;
        if t == 0 {
            hb_first = Some(hb);
        }
    }
    let hb = match backward {
        BackwardState::Terminal => hb,
        BackwardState::LastPosition => hb_first.expect("at least one step"),
    };
    let sorted = tape.concat_cols(&[hf, hb])?;
    let mut inverse = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        inverse[i] = pos;
    }
    tape.gather_rows(sorted, Arc::new(inverse))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, RngStreams};

    fn store(d_in: usize, d_h: usize) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let mut rng = RngStreams::new(3).stream("t");
        init_bigru(&mut s, "enc", 6, d_in, d_h, &mut rng).unwrap();
        s
    }

    #[test]
    fn batch_equals_singletons() {
        let s = store(4, 3);
        let seqs = vec![vec![1, 2], vec![3, 4, 5, 1], vec![2]];
        let mut tape = Tape::new();
        let all = bigru_encode(&mut tape, &s, "enc", &seqs, BackwardState::Terminal).unwrap();
        let all = tape.value(all).clone();
        for (i, seq) in seqs.iter().enumerate() {
            let mut t1 = Tape::new();
            let one = bigru_encode(&mut t1, &s, "enc", &[seq.clone()], BackwardState::Terminal)
                .unwrap();
            for (a, b) in t1.value(one).data().iter().zip(all.row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_readings_agree_for_length_one() {
        let s = store(4, 3);
        let mut tape = Tape::new();
        let a = bigru_encode(&mut tape, &s, "enc", &[vec![2]], BackwardState::Terminal).unwrap();
        let b =
            bigru_encode(&mut tape, &s, "enc", &[vec![2]], BackwardState::LastPosition).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let s = store(3, 2);
        let seqs = vec![vec![0, 1, 2], vec![5, 4]];
        for mode in [BackwardState::Terminal, BackwardState::LastPosition] {
            let report = grad_check(
                |tape, p| {
                    let y = bigru_encode(tape, p, "enc", &seqs, mode)?;
                    let y = tape.tanh(y)?;
                    tape.sum(y)
                },
                &s,
                1e-5,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{report:?}");
        }
    }

    #[test]
    fn rejects_empty_sequence() {
        let s = store(2, 2);
        let mut tape = Tape::new();
        assert!(bigru_encode(&mut tape, &s, "enc", &[vec![]], BackwardState::Terminal).is_err());
    }
}
