//! Character expansion of the 2D U(1) Wilson theory on a torus.
//!
//! Expanding `exp(beta cos x_P) = sum_n I_n(beta) exp(i n x_P)` and
//! integrating every link (each appears in two plaquettes with opposite
//! orientation) forces all plaquettes into the same representation, so
//! `Z = sum_n I_n(beta)^{N_P}` up to the constant `exp(-beta N_P)`.

use super::{Coupling, Geometry};
use crate::error::{Error, Result};

const MAX_ORDER: usize = 10_000;

/// Natural log of the modified Bessel function `I_n(x)` for integer `n >= 0`
/// and `x > 0`, from its power series.
pub(crate) fn log_bessel_i(n: usize, x: f64) -> Result<f64> {
    if !(x.is_finite() && x > 0.0) {
        return Err(Error::domain(format!("Bessel argument must be positive, got {x}")));
    }
    if x > 600.0 {
        return Err(Error::domain(format!("Bessel argument {x} too large for the series")));
    }
    let half = 0.5 * x;
    let log_fact: f64 = (1..=n).map(|k| (k as f64).ln()).sum();
    let log_lead = n as f64 * half.ln() - log_fact;
    let q = half * half;
    let mut term = 1.0f64;
    let mut sum = 1.0f64;
    for k in 0.. {
        let k = k as f64;
        term *= q / ((k + 1.0) * (k + 1.0 + n as f64));
        sum += term;
        if term < 1e-17 * sum {
            break;
        }
        if k > 5_000.0 {
            return Err(Error::numerical(format!("Bessel series for I_{n}({x}) did not converge")));
        }
    }
    Ok(log_lead + sum.ln())
}

/// Modified Bessel function of the first kind `I_n(x)`, integer order.
pub fn bessel_i(n: i64, x: f64) -> Result<f64> {
    Ok(log_bessel_i(n.unsigned_abs() as usize, x)?.exp())
}

/// Ratios `I_n(beta) / I_0(beta)` for `n = 0, 1, ...` until `r_n^{power}`
/// drops below `1e-16` relative to the leading term.
fn bessel_ratios(beta: f64, power: usize) -> Result<Vec<f64>> {
    let log_i0 = log_bessel_i(0, beta)?;
    let mut ratios = vec![1.0];
    for n in 1..MAX_ORDER {
        let r = (log_bessel_i(n, beta)? - log_i0).exp();
        ratios.push(r);
        if r.powi(power as i32) < 1e-16 {
            // one more entry so that r_{n+1} is available to the caller
            ratios.push((log_bessel_i(n + 1, beta)? - log_i0).exp());
            return Ok(ratios);
        }
    }
    Err(Error::numerical(format!(
        "character expansion did not converge within {MAX_ORDER} terms at beta={beta}"
    )))
}

/// Exact `<cos x_P>` on a periodic `geom` lattice at coupling `beta`.
pub fn exact_average_plaquette(coupling: Coupling, geom: Geometry) -> Result<f64> {
    let np = geom.n_plaquettes();
    let r = bessel_ratios(coupling.beta(), np - 1)?;
    let last = r.len() - 1;
    // n = 0 term, then +n and -n contribute equally.
    let mut z = 1.0;
    let mut num = r[1];
    for n in 1..last {
        let rn = r[n].powi((np - 1) as i32);
        z += 2.0 * rn * r[n];
        num += rn * (r[n - 1] + r[n + 1]);
    }
    let value = num / z;
    if !value.is_finite() {
        return Err(Error::numerical("character expansion produced a non-finite value"));
    }
    Ok(value)
}

/// `log Z` for the normalised Haar measure (each link integrated with
/// `dx / 2pi`) and weight `exp(-S)`.
pub fn exact_log_partition(coupling: Coupling, geom: Geometry) -> Result<f64> {
    let beta = coupling.beta();
    let np = geom.n_plaquettes();
    let r = bessel_ratios(beta, np)?;
    let series: f64 = 1.0 + 2.0 * r[1..].iter().map(|x| x.powi(np as i32)).sum::<f64>();
    Ok(np as f64 * (log_bessel_i(0, beta)? - beta) + series.ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn g(l: usize) -> Geometry {
        Geometry::square(l).unwrap()
    }

    fn c(b: f64) -> Coupling {
        Coupling::new(b).unwrap()
    }

    #[test]
    fn bessel_reference_values() {
        // I_0(1), I_1(2), I_0(6), I_1(6) from standard tables.
        assert_abs_diff_eq!(bessel_i(0, 1.0).unwrap(), 1.266_065_877_752_008_4, epsilon = 1e-14);
        assert_abs_diff_eq!(bessel_i(1, 2.0).unwrap(), 1.590_636_854_637_329, epsilon = 1e-13);
        assert_abs_diff_eq!(bessel_i(0, 6.0).unwrap(), 67.234_406_976_477_97, epsilon = 1e-10);
        assert_abs_diff_eq!(bessel_i(1, 6.0).unwrap(), 61.341_936_777_640_26, epsilon = 1e-10);
        assert_eq!(bessel_i(-3, 2.5).unwrap(), bessel_i(3, 2.5).unwrap());
    }

    #[test]
    fn weak_coupling_limit_is_zero() {
        let v = exact_average_plaquette(c(1e-9), g(8)).unwrap();
        assert!(v.abs() < 1e-8);
    }

    #[test]
    fn large_volume_approaches_bessel_ratio() {
        let ratio = bessel_i(1, 2.0).unwrap() / bessel_i(0, 2.0).unwrap();
        assert_abs_diff_eq!(ratio, 0.697_774_657_964_008, epsilon = 1e-12);
        assert_abs_diff_eq!(exact_average_plaquette(c(2.0), g(32)).unwrap(), ratio, epsilon = 1e-12);
        // 8x8 at beta = 2: torus corrections are already ~5e-11.
        assert_abs_diff_eq!(exact_average_plaquette(c(2.0), g(8)).unwrap(), 0.697_774_658_010_837_6, epsilon = 1e-12);
    }

    #[test]
    fn beta_six_values() {
        // Reference values from an independent scipy evaluation of the same
        // character sum. At 8x8 the torus correction is ~1e-4, at 16x16 it
        // is below 1e-11.
        let ratio = bessel_i(1, 6.0).unwrap() / bessel_i(0, 6.0).unwrap();
        assert_abs_diff_eq!(ratio, 0.912_359_304_352_915, epsilon = 1e-12);
        let v8 = exact_average_plaquette(c(6.0), g(8)).unwrap();
        assert_abs_diff_eq!(v8, 0.912_454_914_876_674, epsilon = 1e-12);
        let v16 = exact_average_plaquette(c(6.0), g(16)).unwrap();
        assert_abs_diff_eq!(v16, ratio, epsilon = 1e-10);
    }

    #[test]
    fn small_lattices_match_reference() {
        assert_abs_diff_eq!(exact_average_plaquette(c(2.0), g(2)).unwrap(), 0.779_560_922_692_434_8, epsilon = 1e-12);
        assert_abs_diff_eq!(exact_average_plaquette(c(2.0), g(4)).unwrap(), 0.699_251_926_817_704_6, epsilon = 1e-12);
    }

    #[test]
    fn plaquette_is_derivative_of_log_partition() {
        // <cos x_P> = 1 + (1/N_P) d log Z / d beta
        let geom = g(4);
        let b = 1.3;
        let h = 1e-5;
        let d = (exact_log_partition(c(b + h), geom).unwrap() - exact_log_partition(c(b - h), geom).unwrap()) / (2.0 * h);
        let from_z = 1.0 + d / geom.n_plaquettes() as f64;
        assert_abs_diff_eq!(from_z, exact_average_plaquette(c(b), geom).unwrap(), epsilon = 1e-8);
    }

    #[test]
    fn log_partition_by_quadrature_on_2x2() {
        // Independent check: on 2x2 the four plaquettes are determined by
        // three free plaquette angles plus the winding, so integrate the
        // product of single-plaquette weights with the constraint
        // sum_P x_P = 0 (mod 2pi) via its Fourier representation:
        // Z = sum_n (e^{-b} I_n(b))^4, with each I_n by trapezoid quadrature.
        let b = 0.8;
        let m = 400;
        let quad = |n: i32| -> f64 {
            (0..m)
                .map(|k| {
                    let t = -std::f64::consts::PI + std::f64::consts::TAU * k as f64 / m as f64;
                    (b * (t.cos() - 1.0)).exp() * (n as f64 * t).cos()
                })
                .sum::<f64>()
                / m as f64
        };
        let z: f64 = (-6..=6).map(|n| quad(n).powi(4)).sum();
        assert_abs_diff_eq!(exact_log_partition(c(b), g(2)).unwrap(), z.ln(), epsilon = 1e-12);
    }
}
