//! Ensemble statistics: importance-sampling ESS, integrated autocorrelation
//! time, topological tunneling rate and bootstrap errors.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

/// Log importance weights `log w_i = log p~(x_i) - log q(x_i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightSet {
    log_weights: Vec<f64>,
}

impl WeightSet {
    /// Entries may be `-inf` (zero weight) but not `+inf` or NaN.
    pub fn new(log_weights: Vec<f64>) -> Result<Self> {
        if log_weights.is_empty() {
            return Err(Error::domain("weight set is empty"));
        }
        if let Some(i) = log_weights.iter().position(|w| w.is_nan() || *w == f64::INFINITY) {
            return Err(Error::domain(format!("log weight {i} is {}", log_weights[i])));
        }
        Ok(Self { log_weights })
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }
}

/// One scalar observable per trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    values: Vec<f64>,
}

impl Series {
    pub fn new(label: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        let label = label.into();
        if values.is_empty() {
            return Err(Error::domain(format!("series `{label}` is empty")));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(format!("series `{label}` has non-finite entry {i}")));
        }
        Ok(Self { label, values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        mean(&self.values)
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Normalised effective sample size `(sum w)^2 / (N sum w^2)` in `(0, 1]`.
pub fn effective_sample_size(ws: &WeightSet) -> Result<f64> {
    let lw = ws.log_weights();
    let max = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::numerical("all importance weights are zero"));
    }
    let (mut s1, mut s2) = (0.0, 0.0);
    for &l in lw {
        let w = (l - max).exp();
        s1 += w;
        s2 += w * w;
    }
    Ok(s1 * s1 / (lw.len() as f64 * s2))
}

/// Normalised autocorrelation `rho(t)` for `t = 0..=max_lag`.
fn autocorrelation(xs: &[f64], max_lag: usize) -> Vec<f64> {
    let n = xs.len();
    let m = mean(xs);
    let centered: Vec<f64> = xs.iter().map(|x| x - m).collect();
    let c0 = centered.iter().map(|x| x * x).sum::<f64>() / n as f64;
    (0..=max_lag)
        .map(|t| {
            let c: f64 = centered[..n - t].iter().zip(&centered[t..]).map(|(a, b)| a * b).sum();
            c / (n - t) as f64 / c0
        })
        .collect()
}

/// Integrated autocorrelation time with the self-consistent window
/// `W >= 5 tau_int(W)`. Independent samples give 0.5.
pub fn integrated_autocorrelation(s: &Series) -> Result<f64> {
    let xs = s.values();
    let n = xs.len();
    if n < 10 {
        return Err(Error::domain(format!("need at least 10 samples for tau_int, got {n}")));
    }
    let m = mean(xs);
    if xs.iter().all(|&x| x == m) || variance(xs) == 0.0 {
        return Err(Error::FrozenObservable(s.label.clone()));
    }
    let max_lag = n / 2;
    // compute the autocorrelation in growing chunks so short-tau series stay cheap
    let mut lag_cap = 64.min(max_lag);
    loop {
        let rho = autocorrelation(xs, lag_cap);
        let mut tau = 0.5;
        for w in 1..=lag_cap {
            tau += rho[w];
            if w as f64 >= 5.0 * tau {
                return Ok(tau.max(0.5));
            }
        }
        if lag_cap == max_lag {
            log::warn!("tau_int window for `{}` reached N/2 without self-consistency", s.label);
            return Ok(tau.max(0.5));
        }
        lag_cap = (lag_cap * 4).min(max_lag);
    }
}

/// Fraction of consecutive pairs whose (integer) charges differ.
pub fn tunneling_rate(q: &Series) -> Result<f64> {
    let xs = q.values();
    if xs.len() < 2 {
        return Err(Error::domain("tunneling rate needs at least two samples"));
    }
    if let Some(v) = xs.iter().find(|v| (*v - v.round()).abs() > 1e-6) {
        return Err(Error::domain(format!("charge series `{}` has non-integer entry {v}", q.label)));
    }
    let changes = xs.windows(2).filter(|w| w[0].round() != w[1].round()).count();
    Ok(changes as f64 / (xs.len() - 1) as f64)
}

/// Number of distinct integer values in a charge series.
pub fn distinct_charges(q: &Series) -> usize {
    let mut v: Vec<i64> = q.values().iter().map(|x| x.round() as i64).collect();
    v.sort_unstable();
    v.dedup();
    v.len()
}

/// Standard deviation of the mean over seeded bootstrap resamples.
pub fn bootstrap_error(s: &Series, n_resample: usize, seed: u64) -> Result<f64> {
    blocked_bootstrap_error(s, 1, n_resample, seed)
}

/// Bootstrap error of the mean resampling contiguous blocks of `block`
/// samples, which accounts for autocorrelation shorter than the block.
pub fn blocked_bootstrap_error(s: &Series, block: usize, n_resample: usize, seed: u64) -> Result<f64> {
    let xs = s.values();
    if xs.len() < 2 {
        return Err(Error::domain("bootstrap needs at least two samples"));
    }
    if block == 0 || n_resample < 2 {
        return Err(Error::domain("block length and resample count must be positive"));
    }
    let blocks: Vec<f64> = xs.chunks_exact(block).map(mean).collect();
    if blocks.len() < 2 {
        return Err(Error::domain(format!(
            "block length {block} leaves fewer than two blocks of {} samples",
            xs.len()
        )));
    }
    let nb = blocks.len();
    let mut rng = rng::stream(seed, 0);
    let means: Vec<f64> = (0..n_resample)
        .map(|_| (0..nb).map(|_| blocks[rng.random_range(0..nb)]).sum::<f64>() / nb as f64)
        .collect();
    Ok(variance(&means).sqrt())
}

/// Fraction of accepted trajectories.
pub fn acceptance_rate(accepted: &[bool]) -> f64 {
    accepted.iter().filter(|a| **a).count() as f64 / accepted.len().max(1) as f64
}

/// Mean of `exp(-dH)` and its naive standard error.
pub fn exp_minus_dh(delta_h: &[f64]) -> (f64, f64) {
    let w: Vec<f64> = delta_h.iter().map(|d| (-d).exp()).collect();
    let se = if w.len() > 1 {
        (variance(&w) / w.len() as f64).sqrt()
    } else {
        f64::NAN
    };
    (mean(&w), se)
}
