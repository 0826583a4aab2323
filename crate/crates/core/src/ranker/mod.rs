//! Query-conditioned fusion, the relevance head, training and ranking.

mod model;
mod train;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Segments, Tape, Tensor, Var};

pub use model::{
    FeatureRecord, Model, ModelConfig, PoiBlock, ScoredCandidate, ScoredPairs, ScoringCache, Variant,
    MODEL_FORMAT,
};
pub use train::{
    batch_loss, make_batches, train, train_step, BatchLoss, BatchPlanner, Example, LrSchedule, StepReport, TrainConfig,
    TrainReport,
};

/// How an in-batch pair is scored.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairScoring {
    /// Two-class head on `[q̃; m]`; the pair score is the class-1 minus
    /// class-0 logit. Being linear in `q̃`, it cannot order POIs for a
    /// fixed query except through `φ`.
    Head,
    /// `q̃ · m`.
    #[default]
    Dot,
}

/// Ranker parameter names.
pub const W3Q: &str = "rank.w3q";
pub const W3M: &str = "rank.w3m";
pub const B3: &str = "rank.b";
pub const W4: &str = "rank.w4";
pub const WV: &str = "rank.wv";

/// Parameter nodes of the fusion and output layers.
#[derive(Clone, Copy, Debug)]
pub struct RankerVars {
    /// Rows of `W_3` acting on `q̃`.
    pub w3q: Var,
    /// Rows of `W_3` acting on `M_k`.
    pub w3m: Var,
    pub b: Var,
    pub w4: Var,
    pub wv: Var,
}

/// Pairs `(query row, POI)` scored together, with the rows of `M` that
/// belong to each POI.
pub struct PairLayout<'a> {
    pub pairs: &'a [(usize, usize)],
    /// `M` rows of POI `j` are `offsets[j]..offsets[j + 1]`.
    pub offsets: &'a [usize],
}

/// Fused representation of every pair and its attention coefficients.
pub struct Fused {
    /// One row per pair, `m = Σ φ_k M_k`.
    pub m: Var,
    /// `φ` for each `(pair, row)` entry.
    pub phi: Var,
    pub segments: Arc<Segments>,
    /// `q̃` gathered per pair.
    pub q: Var,
}

/// `s_k = W_4 tanh(q̃ W_3q + M_k W_3m + b)`, `φ = softmax(s)` over the
/// POI's rows, `m = Σ φ_k M_k`, for every pair at once.
pub fn fuse_pairs<T: Scalar>(
    tape: &mut Tape<T>,
    v: &RankerVars,
    q: Var,
    m_rows: Var,
    layout: &PairLayout<'_>,
) -> Result<Fused> {
    let n_poi = layout.offsets.len().saturating_sub(1);
    let n_q = tape.dims(q).0;
    let mut qa_idx = Vec::new();
    let mut row_idx = Vec::new();
    let mut lengths = Vec::with_capacity(layout.pairs.len());
    for &(qi, pj) in layout.pairs {
        if qi >= n_q || pj >= n_poi {
            return Err(Error::dim("fuse", format!("pair ({qi}, {pj}) out of range")));
        }
        let rows = layout.offsets[pj]..layout.offsets[pj + 1];
        if rows.is_empty() {
            return Err(Error::dim("fuse", "POI without representation rows"));
        }
        lengths.push(rows.len());
        for k in rows {
            qa_idx.push(qi);
            row_idx.push(k);
        }
    }
    let segments = Arc::new(Segments::from_lengths(lengths));
    let row_idx = Arc::new(row_idx);
    let a = tape.matmul(q, v.w3q)?;
    let c = tape.matmul(m_rows, v.w3m)?;
    let c = tape.add_row(c, v.b)?;
    let a = tape.gather_rows(a, qa_idx)?;
    let c = tape.gather_rows(c, Arc::clone(&row_idx))?;
    let h = tape.add(a, c)?;
    let h = tape.tanh(h)?;
    let s = tape.matmul(h, v.w4)?;
    let phi = tape.segment_softmax(s, &segments)?;
    let mk = tape.gather_rows(m_rows, row_idx)?;
    let m = tape.segment_weighted_sum(phi, mk, &segments)?;
    let q_pairs = tape.gather_rows(q, layout.pairs.iter().map(|p| p.0).collect::<Vec<_>>())?;
    Ok(Fused {
        m,
        phi,
        segments,
        q: q_pairs,
    })
}

/// Two-class logits `[q̃; m] W_v`, one row per pair.
pub fn head_logits<T: Scalar>(tape: &mut Tape<T>, wv: Var, q: Var, m: Var) -> Result<Var> {
    let x = tape.concat_cols(&[q, m])?;
    tape.matmul(x, wv)
}

/// Pair score column: class-1 minus class-0 logit, or `q̃ · m`.
pub fn pair_scores<T: Scalar>(
    tape: &mut Tape<T>,
    scoring: PairScoring,
    v: &RankerVars,
    fused: &Fused,
) -> Result<Var> {
    match scoring {
        PairScoring::Head => {
            let l = head_logits(tape, v.wv, fused.q, fused.m)?;
            let l0 = tape.slice_cols(l, 0, 1)?;
            let l1 = tape.slice_cols(l, 1, 1)?;
            tape.sub(l1, l0)
        }
        PairScoring::Dot => tape.row_dot(fused.q, fused.m),
    }
}

/// Probability of class 1 from the logit difference.
pub fn probability(score: f64) -> f64 {
    1.0 / (1.0 + (-score).exp())
}

/// Single-pair fusion on plain vectors: returns `m` and `φ`. Masked rows of
/// `m_rows` get `φ = 0`.
pub fn fuse<T: Scalar>(
    q: &[T],
    m_rows: &[Vec<T>],
    mask: &[bool],
    w3q: &Tensor<T>,
    w3m: &Tensor<T>,
    b: &Tensor<T>,
    w4: &Tensor<T>,
) -> Result<(Vec<T>, Vec<T>)> {
    if m_rows.len() != mask.len() {
        return Err(Error::dim("fuse", "mask length differs from row count"));
    }
    let valid: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    if valid.is_empty() {
        return Err(Error::InvalidMask);
    }
    let d = q.len();
    let mut tape = Tape::new();
    let vars = RankerVars {
        w3q: tape.constant(w3q.clone()),
        w3m: tape.constant(w3m.clone()),
        b: tape.constant(b.clone()),
        w4: tape.constant(w4.clone()),
        wv: tape.constant(Tensor::zeros([1, 1])),
    };
    let qv = tape.constant(Tensor::matrix(1, d, q.to_vec())?);
    let dm = m_rows[valid[0]].len();
    let rows: Vec<T> = valid.iter().flat_map(|&i| m_rows[i].clone()).collect();
    let mv = tape.constant(Tensor::matrix(valid.len(), dm, rows)?);
    let offsets = [0, valid.len()];
    let fused = fuse_pairs(
        &mut tape,
        &vars,
        qv,
        mv,
        &PairLayout {
            pairs: &[(0, 0)],
            offsets: &offsets,
        },
    )?;
    let mut phi = vec![T::zero(); mask.len()];
    for (k, &i) in valid.iter().enumerate() {
        phi[i] = tape.value(fused.phi).data()[k];
    }
    Ok((tape.value(fused.m).data().to_vec(), phi))
}

/// Class-1 probability of `softmax([q̃; m] W_v)`.
pub fn score<T: Scalar>(q: &[T], m: &[T], wv: &Tensor<T>) -> Result<f64> {
    let mut tape = Tape::new();
    let qv = tape.constant(Tensor::matrix(1, q.len(), q.to_vec())?);
    let mv = tape.constant(Tensor::matrix(1, m.len(), m.to_vec())?);
    let w = tape.constant(wv.clone());
    let l = head_logits(&mut tape, w, qv, mv)?;
    let p = tape.softmax(l, None)?;
    Ok(tape.value(p).data()[1].f64())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStreams;
    use rand::Rng;

    fn rand_tensor(shape: [usize; 2], rng: &mut impl Rng) -> Tensor<f64> {
        let n = shape[0] * shape[1];
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn params(d: usize) -> [Tensor<f64>; 4] {
        let mut rng = RngStreams::new(2).stream("t");
        [
            rand_tensor([d, d], &mut rng),
            rand_tensor([d, d], &mut rng),
            rand_tensor([1, d], &mut rng).reshape([d]).unwrap(),
            rand_tensor([d, 1], &mut rng),
        ]
    }

    #[test]
    fn single_row_is_returned_exactly() {
        let [a, b, c, w4] = params(3);
        let row = vec![0.3, -0.7, 1.1];
        let (m, phi) = fuse(&[0.1, 0.2, 0.3], &[row.clone()], &[true], &a, &b, &c, &w4).unwrap();
        assert_eq!(m, row);
        assert_eq!(phi, vec![1.0]);
    }

    #[test]
    fn masked_rows_match_removed_rows() {
        let [a, b, c, w4] = params(3);
        let q = [0.5, -0.1, 0.2];
        let rows = vec![vec![0.3, -0.7, 1.1], vec![0.9, 0.1, 0.0], vec![-0.2, 0.4, 0.6]];
        let (m, phi) = fuse(&q, &rows, &[true, false, true], &a, &b, &c, &w4).unwrap();
        assert_eq!(phi[1], 0.0);
        assert!((phi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let kept = vec![rows[0].clone(), rows[2].clone()];
        let (m2, _) = fuse(&q, &kept, &[true, true], &a, &b, &c, &w4).unwrap();
        assert_eq!(m, m2);
        assert!(fuse(&q, &rows, &[false; 3], &a, &b, &c, &w4).is_err());
    }

    #[test]
    fn duplicates_share_weight_and_order_is_irrelevant() {
        let [a, b, c, w4] = params(2);
        let q = [0.5, -0.1];
        let r0 = vec![0.3, -0.7];
        let r1 = vec![0.9, 0.1];
        let (_, phi) = fuse(&q, &[r0.clone(), r0.clone(), r1.clone()], &[true; 3], &a, &b, &c, &w4).unwrap();
        assert_eq!(phi[0], phi[1]);
        let (m1, p1) = fuse(&q, &[r0.clone(), r1.clone()], &[true; 2], &a, &b, &c, &w4).unwrap();
        let (m2, p2) = fuse(&q, &[r1, r0], &[true; 2], &a, &b, &c, &w4).unwrap();
        assert!((p1[0] - p2[1]).abs() < 1e-15);
        for (x, y) in m1.iter().zip(&m2) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn score_contracts() {
        let zero = Tensor::<f64>::zeros([4, 2]);
        assert_eq!(score(&[1.0, 2.0], &[3.0, -4.0], &zero).unwrap(), 0.5);
        let mut rng = RngStreams::new(3).stream("s");
        let wv = rand_tensor([4, 2], &mut rng);
        let base = score(&[1.0, 2.0], &[3.0, -4.0], &wv).unwrap();
        assert!(base > 0.0 && base < 1.0);
        let mut shifted = wv.clone();
        for r in 0..4 {
            shifted.row_mut(r)[1] += 0.25;
        }
        // Class-1 logit grows by 0.25 · Σ inputs = 0.5.
        assert!(score(&[1.0, 2.0], &[3.0, -4.0], &shifted).unwrap() > base);
        assert!((probability(0.0) - 0.5).abs() < 1e-15);
    }
}
