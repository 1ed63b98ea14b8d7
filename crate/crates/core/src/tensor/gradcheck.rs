use std::fmt;

use super::kinks;
use super::Shape;
use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Coordinate {
    pub tensor: String,
    pub index: [usize; 4],
}

impl fmt::Display for Coordinate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, c, h, w] = self.index;
        write!(f, "{}[{n},{c},{h},{w}]", self.tensor)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_coordinate: Option<Coordinate>,
    /// Analytic and numeric derivative at the worst coordinate.
    pub worst_pair: (f64, f64),
    /// `‖a − n‖₂ / ‖n‖₂` over the compared coordinates. Not used for
    /// pass/fail; it separates genuine errors from a few coordinates whose
    /// value is lost to cancellation.
    pub norm_rel_error: f64,
    pub pass: bool,
    pub tolerance: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates whose stencil crossed a ReLU/max switch point.
    pub skipped_nonsmooth: usize,
}

/// Relative error with a `1e-8` floor on the denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Step shrink factor between extrapolation levels.
const SHRINK: f64 = 1.4;
/// Maximum number of smooth step sizes extrapolated per coordinate.
const LEVELS: usize = 12;
/// Leading steps that may be discarded for crossing a kink before the
/// coordinate is given up on.
const MAX_SKIPS: usize = 24;
/// Stop once the extrapolation error grows past this multiple of the best.
const SAFE: f64 = 2.0;

/// Central-difference derivatives of a scalar objective, one per coordinate
/// of every tensor in the store they were taken from.
#[derive(Debug, Clone, PartialEq)]
pub struct NumericGradient {
    /// Per tensor: name, shape, and the estimate (`None` where every step
    /// near the coordinate crossed a kink).
    tensors: Vec<(String, Shape, Vec<Option<f64>>)>,
}

impl NumericGradient {
    /// Compares `analytic` gradient buffers against these estimates.
    pub fn compare(&self, analytic: &ParamStore<f64>, tol: f64) -> Result<GradCheckReport> {
        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            worst_coordinate: None,
            worst_pair: (0.0, 0.0),
            norm_rel_error: 0.0,
            pass: true,
            tolerance: tol,
            checked: 0,
            skipped_nonsmooth: 0,
        };
        let (mut diff_sq, mut ref_sq) = (0.0, 0.0);
        for (name, shape, values) in &self.tensors {
            let grad = analytic.grad(name)?;
            if grad.shape() != *shape {
                return Err(Error::shape(format!(
                    "gradient of {name} is {}, expected {shape}",
                    grad.shape()
                )));
            }
            for (i, (&a, n)) in grad.data().iter().zip(values).enumerate() {
                let Some(n) = *n else {
                    report.skipped_nonsmooth += 1;
                    continue;
                };
                let rel = relative_error(a, n);
                diff_sq += (a - n) * (a - n);
                ref_sq += n * n;
                report.checked += 1;
                if rel > report.max_rel_error || report.worst_coordinate.is_none() {
                    report.max_rel_error = rel;
                    report.worst_pair = (a, n);
                    report.worst_coordinate = Some(Coordinate {
                        tensor: name.clone(),
                        index: shape.unravel(i),
                    });
                }
            }
        }
        report.norm_rel_error = diff_sq.sqrt() / ref_sq.sqrt().max(1e-8);
        report.pass = report.max_rel_error <= tol;
        Ok(report)
    }
}

/// Compares the gradient buffers of `store` against central differences of
/// `f` taken at the current parameter values. See [`numeric_gradient`].
pub fn grad_check<F>(
    store: &mut ParamStore<f64>,
    f: F,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore<f64>) -> Result<f64>,
{
    numeric_gradient(store, f, eps)?.compare(store, tol)
}

/// Estimates the derivative of `f` with respect to every stored value.
///
/// Each derivative is Ridders' extrapolation of central differences
/// `(f(x+h) - f(x-h)) / 2h` over steps `eps, eps/1.4, eps/1.4², …`, keeping
/// the estimate with the smallest error bound. Steps whose evaluations change
/// a ReLU/max decision relative to the unperturbed point are discarded and
/// the step keeps shrinking; a coordinate that finds no smooth step within
/// `eps/1.4^24` of its value gets no estimate. Values are restored
/// bit-exactly after each coordinate.
pub fn numeric_gradient<F>(
    store: &mut ParamStore<f64>,
    mut f: F,
    eps: f64,
) -> Result<NumericGradient>
where
    F: FnMut(&ParamStore<f64>) -> Result<f64>,
{
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::config(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    let (base, sig0) = kinks::trace(|| f(store));
    let base = base?;
    if !base.is_finite() {
        return Err(Error::Evaluation(format!(
            "objective is {base} at the unperturbed point"
        )));
    }

    let mut tensors = Vec::new();
    for name in store.names() {
        let shape = store.value(&name)?.shape();
        let mut values = Vec::with_capacity(shape.numel());
        for i in 0..shape.numel() {
            let orig = store.value(&name)?.data()[i];
            let mut eval = |h: f64| -> Result<Option<f64>> {
                let mut vals = [0.0; 2];
                let mut smooth = true;
                for (slot, x) in [orig + h, orig - h].into_iter().enumerate() {
                    store.value_mut(&name)?.data_mut()[i] = x;
                    let (v, sig) = kinks::trace(|| f(store));
                    store.value_mut(&name)?.data_mut()[i] = orig;
                    let v = v?;
                    if !v.is_finite() {
                        return Err(Error::Evaluation(format!(
                            "objective is {v} at {name}[{i}] {:+e}",
                            x - orig
                        )));
                    }
                    smooth &= sig == sig0;
                    vals[slot] = v;
                }
                Ok(smooth.then(|| (vals[0] - vals[1]) / (2.0 * h)))
            };
            values.push(ridders(&mut eval, eps)?);
        }
        tensors.push((name, shape, values));
    }
    Ok(NumericGradient { tensors })
}

/// Neville extrapolation to `h → 0` of the central differences returned by
/// `diff(h)`, which yields `None` for a step that crosses a kink. Returns
/// `None` when no step is smooth.
fn ridders(diff: &mut impl FnMut(f64) -> Result<Option<f64>>, h0: f64) -> Result<Option<f64>> {
    let c2 = SHRINK * SHRINK;
    let mut prev: Vec<f64> = Vec::new();
    let mut best: Option<f64> = None;
    let mut best_err = f64::INFINITY;
    let mut h = h0;
    let mut skips = 0;
    while prev.len() < LEVELS {
        match diff(h)? {
            None if prev.is_empty() => {
                skips += 1;
                if skips > MAX_SKIPS {
                    break;
                }
            }
            None => break,
            Some(d) => {
                let mut row = Vec::with_capacity(prev.len() + 1);
                row.push(d);
                let mut fac = c2;
                for (j, &p) in prev.iter().enumerate() {
                    let v = (row[j] * fac - p) / (fac - 1.0);
                    fac *= c2;
                    let err = (v - row[j]).abs().max((v - p).abs());
                    if err <= best_err {
                        best_err = err;
                        best = Some(v);
                    }
                    row.push(v);
                }
                if best.is_none() {
                    best = Some(d);
                }
                let stalled = prev
                    .last()
                    .is_some_and(|&p| (row[row.len() - 1] - p).abs() >= SAFE * best_err);
                prev = row;
                if stalled {
                    break;
                }
            }
        }
        h /= SHRINK;
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::{pointwise, Activation, Shape, Tensor4};

    fn sigmoid_problem(scale: f64) -> ParamStore<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor4::<f64>::randn(Shape::new(2, 3, 4, 4), 1.5, &mut rng);
        let y = pointwise(&x, Activation::Sigmoid);
        let mut s = ParamStore::new();
        s.insert("x", x).unwrap();
        let g = y.map(|v| scale * v * (1.0 - v));
        s.accumulate_grad("x", &g).unwrap();
        s
    }

    fn sum_sigmoid(s: &ParamStore<f64>) -> Result<f64> {
        Ok(pointwise(s.value("x")?, Activation::Sigmoid).sum())
    }

    #[test]
    fn sigmoid_sum_passes_in_f64() {
        let mut s = sigmoid_problem(1.0);
        let r = grad_check(&mut s, sum_sigmoid, 1e-4, 1e-6).unwrap();
        assert!(r.pass, "{r:?}");
        assert!(r.max_rel_error < 1e-6);
        assert_eq!(r.checked, 96);
        assert_eq!(r.skipped_nonsmooth, 0);
    }

    #[test]
    fn constant_objective_has_zero_error() {
        let mut s = ParamStore::new();
        s.insert("x", Tensor4::full(Shape::new(1, 2, 2, 2), 0.3))
            .unwrap();
        let r = grad_check(&mut s, |_| Ok(4.0), 1e-3, 0.0).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert!(r.pass);
    }

    #[test]
    fn doubled_gradient_fails_with_half_error() {
        let mut s = sigmoid_problem(2.0);
        let r = grad_check(&mut s, sum_sigmoid, 1e-4, 1e-6).unwrap();
        assert!(!r.pass);
        assert!((r.max_rel_error - 0.5).abs() < 1e-8, "{}", r.max_rel_error);
    }

    #[test]
    fn values_are_restored_exactly() {
        let mut s = sigmoid_problem(1.0);
        let before = s.clone();
        grad_check(&mut s, sum_sigmoid, 1e-3, 1.0).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let mut s = sigmoid_problem(1.0);
        let x0 = s.value("x").unwrap().data()[0];
        let r = grad_check(
            &mut s,
            |p| {
                let v = p.value("x")?.data()[0];
                Ok(if v == x0 { 1.0 } else { f64::NAN })
            },
            1e-3,
            1.0,
        );
        assert!(matches!(r, Err(Error::Evaluation(_))));
        assert!(grad_check(&mut s, sum_sigmoid, 0.0, 1.0).is_err());
    }

    #[test]
    fn relu_kink_crossings_are_skipped() {
        let mut s = ParamStore::new();
        // 1e-6 is reached by shrinking the step; 1e-12 is not.
        let x = Tensor4::from_vec(Shape::new(1, 1, 1, 4), vec![1e-12, 0.5, -0.5, 1e-6]).unwrap();
        s.insert("x", x).unwrap();
        s.accumulate_grad(
            "x",
            &Tensor4::from_vec(Shape::new(1, 1, 1, 4), vec![1.0, 1.0, 0.0, 1.0]).unwrap(),
        )
        .unwrap();
        let r = grad_check(
            &mut s,
            |p| Ok(pointwise(p.value("x")?, Activation::Relu).sum()),
            1e-4,
            1e-4,
        )
        .unwrap();
        assert_eq!(r.skipped_nonsmooth, 1);
        assert_eq!(r.checked, 3);
        assert!(r.pass, "{r:?}");
    }
}
