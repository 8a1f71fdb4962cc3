//! `analyze`: chain statistics as summary JSON.

use lflow::hmc::ChainRecord;
use lflow::statistics::{self, Series};
use lflow::Error;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Bootstrap resamples for the plaquette error.
const N_RESAMPLE: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub beta: Option<f64>,
    pub lx: Option<usize>,
    pub ly: Option<usize>,
    pub n_traj: usize,
    pub acceptance: Option<f64>,
    pub avg_plaq: Option<f64>,
    pub avg_plaq_err: Option<f64>,
    #[serde(rename = "tau_int_Q")]
    pub tau_int_q: Option<f64>,
    pub tunneling_rate: Option<f64>,
    pub ess: Option<f64>,
    pub n_chains: usize,
    /// Human-readable notes such as `frozen observable: Q`.
    pub flags: Vec<String>,
}

/// Pool the chains (each with its first `skip` records dropped).
pub fn summarize(chains: &[Vec<ChainRecord>], skip: usize, seed: u64) -> Result<Summary, CliError> {
    let kept: Vec<&[ChainRecord]> = chains.iter().map(|c| &c[skip.min(c.len())..]).collect();
    let n_traj: usize = kept.iter().map(|c| c.len()).sum();
    let mut s = Summary {
        beta: None,
        lx: None,
        ly: None,
        n_traj,
        acceptance: None,
        avg_plaq: None,
        avg_plaq_err: None,
        tau_int_q: None,
        tunneling_rate: None,
        ess: None,
        n_chains: chains.len(),
        flags: Vec::new(),
    };
    if n_traj == 0 {
        s.flags.push("no records after burn-in".into());
        return Ok(s);
    }
    let accepted: Vec<bool> = kept.iter().flat_map(|c| c.iter().map(|r| r.accepted)).collect();
    s.acceptance = Some(statistics::acceptance_rate(&accepted));

    let plaq: Vec<f64> = kept.iter().flat_map(|c| c.iter().map(|r| r.avg_plaq)).collect();
    s.avg_plaq = Some(statistics::mean(&plaq));
    if plaq.len() >= 2 {
        let block = match statistics::integrated_autocorrelation(&Series::new("avg_plaq", kept[0].iter().map(|r| r.avg_plaq).collect())?) {
            Ok(tau) => (2.0 * tau).ceil() as usize,
            Err(_) => 1,
        }
        .clamp(1, plaq.len() / 2);
        s.avg_plaq_err = Some(statistics::blocked_bootstrap_error(&Series::new("avg_plaq", plaq)?, block, N_RESAMPLE, seed)?);
    }

    let mut taus = Vec::new();
    let mut frozen = 0;
    let (mut changes, mut pairs) = (0usize, 0usize);
    for c in &kept {
        let q = Series::new("Q", c.iter().map(|r| r.charge as f64).collect())?;
        if c.len() >= 2 {
            changes += c.windows(2).filter(|w| w[0].charge != w[1].charge).count();
            pairs += c.len() - 1;
        }
        match statistics::integrated_autocorrelation(&q) {
            Ok(t) => taus.push(t),
            Err(Error::FrozenObservable(_)) => frozen += 1,
            Err(Error::Domain(msg)) => s.flags.push(format!("tau_int_Q: {msg}")),
            Err(e) => return Err(e.into()),
        }
    }
    if frozen > 0 {
        s.flags.push(if frozen == kept.len() {
            "frozen observable: Q".to_string()
        } else {
            format!("frozen observable: Q in {frozen} of {} chains", kept.len())
        });
    }
    if !taus.is_empty() {
        s.tau_int_q = Some(statistics::mean(&taus));
    }
    if pairs > 0 {
        s.tunneling_rate = Some(changes as f64 / pairs as f64);
    }
    Ok(s)
}
