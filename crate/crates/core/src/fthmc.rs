//! Field-transformation HMC.
//!
//! HMC runs on the latent variables `z` of a flow `x = f(z)` with the
//! effective action `S_eff(z) = S(f(z)) - log |det J(z)|` and unit-mass
//! Gaussian momenta. Observables are always measured on `x`. The flow
//! changes how fast the chain decorrelates, never its target: for any
//! invertible model the pushed-forward chain samples `exp(-S(x))`.
//!
//! The module also offers the flow as an independence sampler
//! ([`flow_proposal_sampler`], [`independence_metropolis`]).

use rand::Rng;

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::flow::{self, batch_tensor, FlowModel};
use crate::hmc::{self, Action, HmcParams, RecordSink};
use crate::lattice::{self, Coupling, GaugeConfig};
use crate::statistics::WeightSet;

/// fthmc uses exactly the HMC parameters.
pub type FthmcParams = HmcParams;

/// `S_eff` bound to a read-only model.
#[derive(Clone, Copy, Debug)]
pub struct EffectiveAction<'m> {
    pub model: &'m FlowModel,
    pub coupling: Coupling,
}

impl Action for EffectiveAction<'_> {
    fn action(&mut self, z: &GaugeConfig) -> Result<f64> {
        effective_action(z, self.model, self.coupling)
    }

    fn force(&mut self, z: &GaugeConfig, out: &mut [f64]) -> Result<()> {
        let f = effective_force(z, self.model, self.coupling)?;
        out.copy_from_slice(&f);
        Ok(())
    }
}

/// `S(f(z)) - log |det J(z)|`.
pub fn effective_action(z: &GaugeConfig, model: &FlowModel, coupling: Coupling) -> Result<f64> {
    let (x, log_jac) = model.forward(z)?;
    let s = lattice::wilson_action(&x, coupling) - log_jac;
    if !s.is_finite() {
        return Err(Error::numerical(format!("effective action is {s}")));
    }
    Ok(s)
}

/// `dS_eff/dz` by reverse-mode differentiation through the flow.
///
/// The physical force `dS/dx` is analytic and enters the tape as a
/// constant, so the backward pass carries `J^T dS/dx - d log|det J|/dz`.
pub fn effective_force(z: &GaugeConfig, model: &FlowModel, coupling: Coupling) -> Result<Vec<f64>> {
    let geom = z.geometry();
    if geom != model.geometry() {
        return Err(Error::Shape {
            op: "effective_force",
            lhs: vec![2, model.geometry().lx(), model.geometry().ly()],
            rhs: vec![2, geom.lx(), geom.ly()],
        });
    }
    let tape = Tape::new();
    let params = model.params().bind(&tape, false);
    let z_var = tape.leaf(batch_tensor(geom, &[z.angles()]));
    let mut x = z_var;
    let mut log_jac = None;
    // tape positions where each layer ends, to attribute backward failures
    let mut marks = Vec::with_capacity(model.layers().len());
    for layer in model.layers() {
        let (next, lj) = layer.apply(x, &params, false)?;
        x = next;
        log_jac = Some(match log_jac {
            None => lj,
            Some(acc) => lj.add(acc)?,
        });
        marks.push(tape.len());
    }
    let x_cfg = GaugeConfig::from_angles_unchecked(geom, x.value().into_data());
    let grad_x = lattice::action_gradient(&x_cfg, coupling);
    let g = tape.constant(Tensor::new(vec![1, 2, geom.lx(), geom.ly()], grad_x)?);
    let mut objective = x.mul(g)?.sum();
    if let Some(lj) = log_jac {
        objective = objective.sub(lj.sum())?;
    }
    let grads = tape.backward(objective).map_err(|e| match e {
        Error::NonFinite { op, node } => {
            let layer = marks.iter().position(|&m| node < m);
            Error::numerical(match layer {
                Some(l) => format!("non-finite gradient in flow layer {l} (`{op}`)"),
                None => format!("non-finite gradient in the action term (`{op}`)"),
            })
        }
        other => other,
    })?;
    Ok(grads.wrt(z_var).into_data())
}

/// Run fthmc from latent state `start_z`; records carry observables of
/// `x = f(z)` and the sink receives `x`. Returns the final latent state.
pub fn run_fthmc_chain<S: RecordSink + ?Sized>(
    start_z: GaugeConfig,
    model: &FlowModel,
    coupling: Coupling,
    params: &FthmcParams,
    sink: &mut S,
) -> Result<GaugeConfig> {
    let mut action = EffectiveAction { model, coupling };
    hmc::run_chain_with(start_z, &mut action, coupling, params, |z| Ok(model.forward(z)?.0), sink)
}

/// Independent draws from the flow with their importance weights.
#[derive(Clone, Debug)]
pub struct FlowSamples {
    pub configs: Vec<GaugeConfig>,
    pub log_q: Vec<f64>,
    pub action: Vec<f64>,
    /// `log w = -S - log q`, up to the unknown `log Z`.
    pub weights: WeightSet,
}

/// Prior batch size pushed through the flow at once.
const PROPOSAL_CHUNK: usize = 256;

/// Draw `n` prior samples, push them through the flow and weight them.
pub fn flow_proposal_sampler<R: Rng + ?Sized>(
    model: &FlowModel,
    coupling: Coupling,
    n: usize,
    rng: &mut R,
) -> Result<FlowSamples> {
    let geom = model.geometry();
    let log_r = flow::log_prior_density(geom);
    let mut configs = Vec::with_capacity(n);
    let mut log_q = Vec::with_capacity(n);
    let mut action = Vec::with_capacity(n);
    while configs.len() < n {
        let k = PROPOSAL_CHUNK.min(n - configs.len());
        let zs: Vec<_> = (0..k).map(|_| flow::sample_prior(geom, rng)).collect();
        let (xs, lj) = model.forward_batch(&zs)?;
        for (x, l) in xs.into_iter().zip(lj) {
            log_q.push(log_r - l);
            action.push(lattice::wilson_action(&x, coupling));
            configs.push(x);
        }
    }
    let log_w = action.iter().zip(&log_q).map(|(s, q)| -s - q).collect();
    Ok(FlowSamples {
        configs,
        log_q,
        action,
        weights: WeightSet::new(log_w)?,
    })
}

/// Independence Metropolis over pre-drawn flow samples: sample `i` replaces
/// the current state with probability `min(1, w_i / w_current)`.
///
/// Returns the index of the state after each step (starting with sample 0)
/// and the acceptance rate.
pub fn independence_metropolis<R: Rng + ?Sized>(samples: &FlowSamples, rng: &mut R) -> (Vec<usize>, f64) {
    let lw = samples.weights.log_weights();
    if lw.is_empty() {
        return (Vec::new(), 0.0);
    }
    let mut current = 0;
    let mut chain = Vec::with_capacity(lw.len());
    chain.push(0);
    let mut accepted = 0usize;
    for (i, &w) in lw.iter().enumerate().skip(1) {
        let u: f64 = rng.random();
        if u.ln() < w - lw[current] {
            current = i;
            accepted += 1;
        }
        chain.push(current);
    }
    let rate = if lw.len() > 1 {
        accepted as f64 / (lw.len() - 1) as f64
    } else {
        0.0
    };
    (chain, rate)
}
