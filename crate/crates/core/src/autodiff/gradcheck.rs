use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Outcome of comparing tape gradients with central finite differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Worst componentwise relative error.
    pub max_rel_err: f64,
    /// Component where it occurred.
    pub worst: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Relative error `|a - b| / max(|a|, |b|, floor)`.
///
/// `floor` keeps components whose true gradient is (near) zero from
/// dominating through cancellation noise in the finite differences;
/// [`gradient_check`] sets it to `1e-3` of the largest analytic component.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    let d = (a - b).abs();
    if d == 0.0 {
        return 0.0;
    }
    d / a.abs().max(b.abs()).max(floor)
}

/// Compare the reverse-mode gradient of the scalar function `f` at `point`
/// with central differences of step `h`.
///
/// Too small an `h` makes the finite differences cancellation dominated;
/// the resulting error is reported, not hidden.
pub fn gradient_check<F>(f: F, point: &Tensor, h: f64) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let analytic = {
        let tape = Tape::new();
        let x = tape.leaf(point.clone());
        let y = f(&tape, x)?;
        tape.backward(y)?.wrt(x).into_data()
    };
    let eval = |p: Tensor| -> Result<f64> {
        let tape = Tape::new();
        let x = tape.constant(p);
        f(&tape, x)?.item()
    };
    let mut numeric = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        numeric.push((eval(plus)? - eval(minus)?) / (2.0 * h));
    }
    let scale = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let floor = (1e-3 * scale).max(f64::MIN_POSITIVE);
    let (worst, max_rel_err) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n, floor))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    Ok(GradCheck {
        max_rel_err,
        worst,
        analytic,
        numeric,
    })
}
