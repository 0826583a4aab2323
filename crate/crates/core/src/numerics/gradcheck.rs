use crate::error::{Error, Result};
use crate::numerics::params::ParamStore;
use crate::numerics::tape::{Tape, Var};

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub entries_checked: usize,
    /// Entries whose forward and backward differences disagree, i.e. the
    /// function has a kink within the stencil.
    pub nonsmooth: usize,
}

/// Relative disagreement of the one-sided differences above which an entry
/// counts as non-smooth.
pub const KINK_TOL: f64 = 1e-3;

/// Ratio between the error-denominator floor and the one-ulp roundoff level
/// `ε·max(|f(x)|, 1)/h` of a difference quotient. A loss built from a few
/// thousand float64 operations carries about ten ulps of error, so gradients
/// below the floor cannot be resolved to 1e-4 relative.
pub const FLOOR_FACTOR: f64 = 1e5;

/// Compares reverse-mode gradients of the scalar built by `f` against
/// finite differences, entry by entry, with relative error
/// `|analytic − numeric| / max(|analytic|, |numeric|, floor)` with
/// `floor = FLOOR_FACTOR · ε · max(|f(x)|, 1) / h`.
///
/// Three second-order-or-better estimates are formed from the points
/// `x ± h`, `x ± 2h` and `x`: the fourth-order central difference and the
/// forward and backward one-sided differences. The error of an entry is
/// the smallest of the three. A kink (a tie inside an elementwise max, say)
/// spoils only the estimates whose points straddle it, so one side stays
/// exact to second order, while a wrong analytic gradient disagrees with
/// all of them.
pub fn grad_check<F>(f: F, params: &ParamStore<f64>, epsilon: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    grad_check_sampled(f, params, epsilon, usize::MAX)
}

/// Like [`grad_check`] but checks at most `per_param` evenly spaced entries
/// of each parameter.
pub fn grad_check_sampled<F>(
    f: F,
    params: &ParamStore<f64>,
    epsilon: f64,
    per_param: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    if epsilon <= 0.0 {
        return Err(Error::Config("grad_check epsilon must be positive".into()));
    }
    let eval = |p: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(&mut tape, p)?;
        let v = tape.value(out).item();
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let out = f(&mut tape, params)?;
    let f0 = tape.value(out).item();
    if !f0.is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    let floor = FLOOR_FACTOR * f64::EPSILON * f0.abs().max(1.0) / epsilon;
    let grads = tape.backward(out)?;
    let mut analytic = params.clone();
    analytic.zero_grads();
    analytic.accumulate(&tape, &grads);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        entries_checked: 0,
        nonsmooth: 0,
    };
    let mut probe = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let n = params.get(&name).map_or(0, |t| t.len());
        let stride = if per_param >= n { 1 } else { n.div_ceil(per_param) };
        let g = analytic.grad(&name).expect("zeroed above").data().to_vec();
        for i in (0..n).step_by(stride) {
            let orig = probe.get(&name).expect("present").data()[i];
            let mut at = |dx: f64| -> Result<f64> {
                probe.get_mut(&name).expect("present").data_mut()[i] = orig + dx;
                eval(&probe)
            };
            let (f1, f_1) = (at(epsilon)?, at(-epsilon)?);
            let (f2, f_2) = (at(2.0 * epsilon)?, at(-2.0 * epsilon)?);
            probe.get_mut(&name).expect("present").data_mut()[i] = orig;
            let central = (8.0 * (f1 - f_1) - (f2 - f_2)) / (12.0 * epsilon);
            let forward = (-3.0 * f0 + 4.0 * f1 - f2) / (2.0 * epsilon);
            let backward = (3.0 * f0 - 4.0 * f_1 + f_2) / (2.0 * epsilon);
            if (forward - backward).abs() > KINK_TOL * forward.abs().max(backward.abs()).max(floor) {
                report.nonsmooth += 1;
            }
            let a = g[i];
            let rel = [central, forward, backward]
                .into_iter()
                .map(|n| (a - n).abs() / a.abs().max(n.abs()).max(floor))
                .fold(f64::INFINITY, f64::min);
            report.entries_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Tensor;

    fn store() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::from_f64(vec![3], &[0.3, -1.2, 2.0]).unwrap()).unwrap();
        s.insert("b", Tensor::from_f64(vec![2, 2], &[0.1, 0.2, -0.3, 0.4]).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn sum_of_params() {
        let r = grad_check(
            |t, p| {
                let a = t.param(p, "a")?;
                let b = t.param(p, "b")?;
                let sa = t.sum(a)?;
                let sb = t.sum(b)?;
                t.add(sa, sb)
            },
            &store(),
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert_eq!(r.entries_checked, 7);
    }

    #[test]
    fn constant_function() {
        let r = grad_check(
            |t, _| Ok(t.constant(Tensor::scalar(3.0))),
            &store(),
            1e-5,
        )
        .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn non_finite_is_error() {
        let r = grad_check(
            |t, _| Ok(t.constant(Tensor::scalar(f64::NAN))),
            &store(),
            1e-5,
        );
        assert!(r.is_err());
    }

    #[test]
    fn kink_inside_stencil_is_tolerated() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::from_f64(vec![2], &[0.0, 1.0]).unwrap()).unwrap();
        s.insert("b", Tensor::from_f64(vec![2], &[2e-5, -1.0]).unwrap()).unwrap();
        let r = grad_check(
            |t, p| {
                let a = t.param(p, "a")?;
                let b = t.param(p, "b")?;
                let m = t.max(a, b)?;
                t.sum(m)
            },
            &s,
            1e-4,
        )
        .unwrap();
        assert_eq!(r.nonsmooth, 2);
        assert_eq!(r.entries_checked, 4);
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn hidden_dependence_is_caught() {
        // The constant term depends on the parameters outside the tape, so the
        // analytic gradient misses 2a while finite differences see it.
        let r = grad_check(
            |t, p| {
                let a = t.param(p, "a")?;
                let sa = t.sum(a)?;
                let sq: f64 = p.get("a").unwrap().data().iter().map(|x| x * x).sum();
                let c = t.constant(Tensor::scalar(sq));
                t.add(sa, c)
            },
            &store(),
            1e-5,
        )
        .unwrap();
        assert_eq!(r.nonsmooth, 0);
        assert!(r.max_rel_error > 0.1, "{r:?}");
    }
}
