use crate::error::{Error, Result};
use crate::scalar::Real;

/// Central finite-difference gradient of `f` at `point`.
pub fn numeric_gradient<T: Real, F>(mut f: F, point: &[T], step: T) -> Result<Vec<T>>
where
    F: FnMut(&[T]) -> Result<T>,
{
    if !(step > T::zero()) {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {step}")));
    }
    let two = T::lit(2.0);
    let mut x = point.to_vec();
    let mut out = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + step;
        let up = finite(f(&x)?, "forward evaluation")?;
        x[i] = orig - step;
        let down = finite(f(&x)?, "backward evaluation")?;
        x[i] = orig;
        out.push((up - down) / (two * step));
    }
    Ok(out)
}

/// Compares the analytic gradient returned by `f` against central finite
/// differences and returns `max_i |a_i − fd_i| / max(1, |a_i|, |fd_i|)`.
///
/// `f` maps a parameter vector to `(value, analytic gradient)`.
pub fn grad_check<T: Real, F>(mut f: F, point: &[T], step: T) -> Result<T>
where
    F: FnMut(&[T]) -> Result<(T, Vec<T>)>,
{
    let (value, analytic) = f(point)?;
    finite(value, "evaluation")?;
    if analytic.len() != point.len() {
        return Err(Error::Shape(format!(
            "analytic gradient has {} entries for {} parameters",
            analytic.len(),
            point.len()
        )));
    }
    if let Some(bad) = analytic.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite analytic gradient {bad}")));
    }
    let fd = numeric_gradient(|x| f(x).map(|(v, _)| v), point, step)?;
    Ok(analytic
        .iter()
        .zip(&fd)
        .map(|(&a, &n)| (a - n).abs() / T::one().max(a.abs()).max(n.abs()))
        .fold(T::zero(), T::max))
}

fn finite<T: Real>(v: T, what: &str) -> Result<T> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("non-finite {what} during gradient check")))
    }
}
