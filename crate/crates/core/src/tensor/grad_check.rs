use super::{Element, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of a central-difference gradient comparison.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Relative error with denominator `max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Max relative error between `backward` and central differences of a
/// scalar function `f` at `x`, over every element of `x`.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<f64>
where
    T: Element,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    grad_check_with(f, x, eps, None).map(|r| r.max_rel_error)
}

/// Like [`grad_check`], restricted to `indices` when given.
pub fn grad_check_with<T, F>(
    f: F,
    x: &Tensor<T>,
    eps: f64,
    indices: Option<&[usize]>,
) -> Result<GradCheckReport>
where
    T: Element,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::arg("grad_check", "eps must be positive"));
    }
    let eval = |t: &Tensor<T>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(t);
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).item()?.as_f64())
    };

    let mut tape = Tape::new();
    let xv = tape.leaf(&x.detached().with_requires_grad(true));
    let out = f(&mut tape, xv)?;
    let grads = tape.backward(out)?;
    let analytic = grads.get(xv).expect("leaf requires grad").data().to_vec();

    let all: Vec<usize>;
    let idx = match indices {
        Some(i) => i,
        None => {
            all = (0..x.numel()).collect();
            &all
        }
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut probe = x.detached();
    for &i in idx {
        let orig = probe.data()[i];
        probe.data_mut()[i] = T::of(orig.as_f64() + eps);
        let fp = eval(&probe)?;
        probe.data_mut()[i] = T::of(orig.as_f64() - eps);
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic[i].as_f64();
        let err = relative_error(a, numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.checked == 1 {
            report = GradCheckReport {
                max_rel_error: err,
                worst_index: i,
                analytic: a,
                numeric,
                checked: report.checked,
            };
        }
    }
    Ok(report)
}
