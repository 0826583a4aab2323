use std::sync::Arc;

use super::*;
use crate::numerics::rng::RngStreams;
use rand::Rng;

fn random_store(shapes: &[(&str, &[usize])], seed: u64) -> ParamStore<f64> {
    let mut rng = RngStreams::new(seed).stream("test");
    let mut s = ParamStore::new();
    for (name, shape) in shapes {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        s.insert(*name, Tensor::new(shape.to_vec(), data).unwrap()).unwrap();
    }
    s
}

fn assert_grads<F>(shapes: &[(&str, &[usize])], f: F)
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> crate::Result<Var>,
{
    let s = random_store(shapes, 42);
    let r = grad_check(f, &s, 1e-5).unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

// Weighted sum keeps every output coordinate distinguishable in the check.
fn weighted_sum(t: &mut Tape<f64>, v: Var) -> crate::Result<Var> {
    let n = t.value(v).len();
    let w: Vec<f64> = (0..n).map(|i| 0.5 + (i as f64 * 0.37).sin()).collect();
    let shape = t.value(v).shape().to_vec();
    let y = t.mul_const(v, Tensor::new(shape, w)?)?;
    t.sum(y)
}

#[test]
fn matmul_add_row_grads() {
    assert_grads(&[("x", &[3, 4]), ("w", &[4, 2]), ("b", &[2])], |t, p| {
        let x = t.param(p, "x")?;
        let w = t.param(p, "w")?;
        let b = t.param(p, "b")?;
        let y = dense(t, x, w, Some(b))?;
        weighted_sum(t, y)
    });
}

#[test]
fn elementwise_grads() {
    assert_grads(&[("a", &[2, 3]), ("b", &[2, 3])], |t, p| {
        let a = t.param(p, "a")?;
        let b = t.param(p, "b")?;
        let s = t.sigmoid(a)?;
        let h = t.tanh(b)?;
        let m = t.mul(s, h)?;
        let d = t.sub(m, a)?;
        let x = t.max(d, b)?;
        let y = t.scale(x, 1.7)?;
        weighted_sum(t, y)
    });
}

#[test]
fn shape_ops_grads() {
    assert_grads(&[("a", &[3, 2]), ("b", &[3, 3]), ("c", &[1, 5])], |t, p| {
        let a = t.param(p, "a")?;
        let b = t.param(p, "b")?;
        let c = t.param(p, "c")?;
        let ab = t.concat_cols(&[a, b])?;
        let abc = t.concat_rows(&[ab, c])?;
        let g = t.gather_rows(abc, vec![3, 0, 0, 2])?;
        let s = t.slice_cols(g, 1, 3)?;
        let s = t.reshape(s, 2, 6)?;
        let d = t.row_dot(s, s)?;
        weighted_sum(t, d)
    });
}

#[test]
fn softmax_and_segments_grads() {
    assert_grads(&[("x", &[2, 4]), ("s", &[6, 1]), ("v", &[6, 3])], |t, p| {
        let x = t.param(p, "x")?;
        let sm = t.softmax(x, Some(&[true, false, true, true]))?;
        let seg = Arc::new(Segments::from_lengths([2, 0, 3, 1]));
        let s = t.param(p, "s")?;
        let a = t.segment_softmax(s, &seg)?;
        let v = t.param(p, "v")?;
        let o = t.segment_weighted_sum(a, v, &seg)?;
        let l1 = weighted_sum(t, sm)?;
        let l2 = weighted_sum(t, o)?;
        t.add(l1, l2)
    });
}

#[test]
fn cross_entropy_grads() {
    assert_grads(&[("x", &[3, 3])], |t, p| {
        let x = t.param(p, "x")?;
        t.cross_entropy(x, &[0, 2, 1])
    });
}

#[test]
fn gru_cell_grads() {
    let shapes: &[(&str, &[usize])] = &[
        ("x", &[2, 3]),
        ("h", &[3, 4]),
        ("wx", &[3, 12]),
        ("wh", &[4, 12]),
        ("bx", &[12]),
        ("bh", &[12]),
    ];
    assert_grads(shapes, |t, p| {
        let x = t.param(p, "x")?;
        let h = t.param(p, "h")?;
        let g = GruVars {
            wx: t.param(p, "wx")?,
            wh: t.param(p, "wh")?,
            bx: t.param(p, "bx")?,
            bh: t.param(p, "bh")?,
        };
        let h1 = t.gru_cell(x, h, g)?;
        let x2 = t.gather_rows(x, vec![1])?;
        let h2 = t.gru_cell(x2, h1, g)?;
        weighted_sum(t, h2)
    });
}

#[test]
fn gru_zero_params_zero_state() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::from_f64(vec![1, 2], &[0.5, -1.0]).unwrap());
    let h = t.constant(Tensor::zeros(vec![1, 3]));
    let g = GruVars {
        wx: t.constant(Tensor::zeros(vec![2, 9])),
        wh: t.constant(Tensor::zeros(vec![3, 9])),
        bx: t.constant(Tensor::zeros(vec![9])),
        bh: t.constant(Tensor::zeros(vec![9])),
    };
    let out = t.gru_cell(x, h, g).unwrap();
    assert!(t.value(out).data().iter().all(|&v| v == 0.0));
}

#[test]
fn gru_state_stays_bounded() {
    let s = random_store(&[("wx", &[2, 15]), ("wh", &[5, 15]), ("bx", &[15]), ("bh", &[15])], 9);
    let mut t = Tape::<f64>::new();
    let g = GruVars {
        wx: t.param(&s, "wx").unwrap(),
        wh: t.param(&s, "wh").unwrap(),
        bx: t.param(&s, "bx").unwrap(),
        bh: t.param(&s, "bh").unwrap(),
    };
    let mut h = t.constant(Tensor::full(vec![1, 5], 0.9));
    let x = t.constant(Tensor::from_f64(vec![1, 2], &[3.0, -4.0]).unwrap());
    for _ in 0..50 {
        h = t.gru_cell(x, h, g).unwrap();
        assert!(t.value(h).data().iter().all(|v| v.abs() < 1.0));
    }
}

#[test]
fn gru_shape_mismatch() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::zeros(vec![1, 2]));
    let h = t.constant(Tensor::zeros(vec![1, 3]));
    let g = GruVars {
        wx: t.constant(Tensor::zeros(vec![3, 9])),
        wh: t.constant(Tensor::zeros(vec![3, 9])),
        bx: t.constant(Tensor::zeros(vec![9])),
        bh: t.constant(Tensor::zeros(vec![9])),
    };
    assert!(matches!(t.gru_cell(x, h, g), Err(crate::Error::Dimension { .. })));
}

#[test]
fn softmax_examples() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::from_f64(vec![3], &[0.0, 0.0, 0.0]).unwrap());
    let y = t.softmax(x, None).unwrap();
    for v in t.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = t.constant(Tensor::from_f64(vec![3], &[1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap());
    let y = t.softmax(x, None).unwrap();
    for (v, e) in t.value(y).data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
        assert!((v - e).abs() < 1e-12);
    }
    let x = t.constant(Tensor::from_f64(vec![3], &[5.0, -2.0, 9.0]).unwrap());
    let y = t.softmax(x, Some(&[false, true, false])).unwrap();
    assert_eq!(t.value(y).data(), &[0.0, 1.0, 0.0]);
    assert!(matches!(
        t.softmax(x, Some(&[false, false, false])),
        Err(crate::Error::InvalidMask)
    ));
}

#[test]
fn non_finite_forward_is_error() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::from_f64(vec![1], &[f64::MAX]).unwrap());
    assert!(matches!(t.scale(x, 10.0), Err(crate::Error::NonFinite { .. })));
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_is_distribution(
            xs in proptest::collection::vec(-50.0f64..50.0, 1..12),
            mask_bits in proptest::collection::vec(any::<bool>(), 12),
        ) {
            let n = xs.len();
            let mut mask: Vec<bool> = mask_bits[..n].to_vec();
            mask[0] = true;
            let mut t = Tape::<f64>::new();
            let x = t.constant(Tensor::new(vec![n], xs).unwrap());
            let y = t.softmax(x, Some(&mask)).unwrap();
            let v = t.value(y).data();
            let total: f64 = v.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
            for (p, m) in v.iter().zip(&mask) {
                prop_assert!(*p >= 0.0);
                if !m { prop_assert_eq!(*p, 0.0); }
            }
        }
    }
}
