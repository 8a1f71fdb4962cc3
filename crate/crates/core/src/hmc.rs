//! Hamiltonian Monte Carlo on link angles.
//!
//! A trajectory refreshes Gaussian momenta, integrates Hamilton's equations
//! with the leapfrog scheme and applies a Metropolis test on `dH`. The
//! integrator and the chain driver are generic over [`Action`], which lets
//! [`crate::fthmc`] reuse them with the flow-induced effective action.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::lattice::{self, Coupling, GaugeConfig, Geometry};
use crate::rng::{self, ChaCha8Rng};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HmcParams {
    pub step_size: f64,
    pub n_leapfrog: usize,
    pub seed: u64,
    pub n_traj: usize,
    /// Chain id: selects the random stream and tags emitted records.
    pub chain: u64,
}

impl Default for HmcParams {
    fn default() -> Self {
        Self {
            step_size: 0.1,
            n_leapfrog: 10,
            seed: 0,
            n_traj: 1000,
            chain: 0,
        }
    }
}

impl HmcParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(Error::domain(format!("step size must be positive, got {}", self.step_size)));
        }
        if self.n_leapfrog == 0 {
            return Err(Error::domain("n_leapfrog must be at least 1"));
        }
        Ok(())
    }
}

/// Action driving the dynamics: value and gradient with respect to the
/// integration variables.
pub trait Action {
    fn action(&mut self, x: &GaugeConfig) -> Result<f64>;

    /// Write `dS/dx` into `out` (same layout as the link angles).
    fn force(&mut self, x: &GaugeConfig, out: &mut [f64]) -> Result<()>;
}

/// The Wilson gauge action with its analytic force.
#[derive(Clone, Copy, Debug)]
pub struct WilsonAction {
    pub coupling: Coupling,
}

impl Action for WilsonAction {
    fn action(&mut self, x: &GaugeConfig) -> Result<f64> {
        Ok(lattice::wilson_action(x, self.coupling))
    }

    fn force(&mut self, x: &GaugeConfig, out: &mut [f64]) -> Result<()> {
        lattice::action_gradient_into(x, self.coupling, out);
        Ok(())
    }
}

/// One standard normal per link, drawn in storage order.
pub fn sample_momentum<R: Rng + ?Sized>(geom: Geometry, rng: &mut R) -> Vec<f64> {
    (0..geom.n_links()).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn kinetic_energy(v: &[f64]) -> f64 {
    0.5 * v.iter().map(|p| p * p).sum::<f64>()
}

/// `n_steps` leapfrog steps in place, with adjacent half kicks fused.
///
/// `force(x, out)` must write `dS/dx` into `out`.
pub fn leapfrog<F>(x: &mut [f64], v: &mut [f64], eps: f64, n_steps: usize, mut force: F) -> Result<()>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<()>,
{
    if n_steps == 0 {
        return Ok(());
    }
    let mut f = vec![0.0; x.len()];
    let eval = |x: &[f64], f: &mut [f64], step: usize, force: &mut F| -> Result<()> {
        force(x, f)?;
        if f.iter().any(|g| !g.is_finite()) {
            return Err(Error::Integration { step });
        }
        Ok(())
    };
    eval(x, &mut f, 0, &mut force)?;
    let half = 0.5 * eps;
    for (vi, fi) in v.iter_mut().zip(&f) {
        *vi -= half * fi;
    }
    for step in 0..n_steps {
        for (xi, vi) in x.iter_mut().zip(v.iter()) {
            *xi += eps * *vi;
        }
        eval(x, &mut f, step + 1, &mut force)?;
        let kick = if step + 1 == n_steps { half } else { eps };
        for (vi, fi) in v.iter_mut().zip(&f) {
            *vi -= kick * fi;
        }
    }
    Ok(())
}

/// Leapfrog on a gauge configuration driven by an [`Action`].
pub fn leapfrog_config<A: Action + ?Sized>(
    x: &GaugeConfig,
    v: &[f64],
    eps: f64,
    n_steps: usize,
    action: &mut A,
) -> Result<(GaugeConfig, Vec<f64>)> {
    let geom = x.geometry();
    let mut pos = x.angles().to_vec();
    let mut mom = v.to_vec();
    leapfrog(&mut pos, &mut mom, eps, n_steps, |p, out| {
        // the action sees a configuration view of the current positions
        let cfg = GaugeConfig::from_angles_unchecked(geom, p.to_vec());
        action.force(&cfg, out)
    })?;
    Ok((GaugeConfig::from_angles_unchecked(geom, pos), mom))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetropolisOutcome {
    pub accepted: bool,
    /// `dH` was NaN and the proposal was rejected.
    pub nan: bool,
}

/// Accept with probability `min(1, exp(-dH))`, consuming exactly one
/// uniform draw.
pub fn metropolis_test<R: Rng + ?Sized>(delta_h: f64, rng: &mut R) -> MetropolisOutcome {
    let u: f64 = rng.random();
    if delta_h.is_nan() {
        return MetropolisOutcome { accepted: false, nan: true };
    }
    MetropolisOutcome {
        accepted: u < (-delta_h).exp(),
        nan: false,
    }
}

#[derive(Clone, Debug)]
pub struct TrajectoryResult {
    pub proposed: GaugeConfig,
    pub delta_h: f64,
    pub accepted: bool,
    pub end_config: GaugeConfig,
}

/// One full HMC trajectory from `start`.
pub fn trajectory<A: Action + ?Sized>(
    start: &GaugeConfig,
    action: &mut A,
    eps: f64,
    n_leapfrog: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TrajectoryResult> {
    let v0 = sample_momentum(start.geometry(), rng);
    let h0 = kinetic_energy(&v0) + action.action(start)?;
    let (proposed, v1) = leapfrog_config(start, &v0, eps, n_leapfrog, action)?;
    let h1 = kinetic_energy(&v1) + action.action(&proposed)?;
    let delta_h = h1 - h0;
    let outcome = metropolis_test(delta_h, rng);
    if outcome.nan {
        log::warn!("dH is NaN; proposal rejected");
    }
    let end_config = if outcome.accepted { proposed.clone() } else { start.clone() };
    Ok(TrajectoryResult {
        proposed,
        delta_h,
        accepted: outcome.accepted,
        end_config,
    })
}

/// Observables of one trajectory, measured on the physical configuration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChainRecord {
    pub chain: u64,
    pub traj: usize,
    pub action: f64,
    pub avg_plaq: f64,
    pub charge: i64,
    pub delta_h: f64,
    pub accepted: bool,
}

/// Consumer of chain records together with the measured configuration.
pub trait RecordSink {
    fn record(&mut self, rec: &ChainRecord, cfg: &GaugeConfig) -> Result<()>;
}

impl RecordSink for Vec<ChainRecord> {
    fn record(&mut self, rec: &ChainRecord, _cfg: &GaugeConfig) -> Result<()> {
        self.push(*rec);
        Ok(())
    }
}

impl<F: FnMut(&ChainRecord, &GaugeConfig) -> Result<()>> RecordSink for F {
    fn record(&mut self, rec: &ChainRecord, cfg: &GaugeConfig) -> Result<()> {
        self(rec, cfg)
    }
}

/// Generic chain driver.
///
/// `measure` maps the integration state to the physical configuration on
/// which observables are taken; for plain HMC it is the identity.
pub fn run_chain_with<A, M, S>(
    start: GaugeConfig,
    action: &mut A,
    coupling: Coupling,
    params: &HmcParams,
    mut measure: M,
    sink: &mut S,
) -> Result<GaugeConfig>
where
    A: Action + ?Sized,
    M: FnMut(&GaugeConfig) -> Result<GaugeConfig>,
    S: RecordSink + ?Sized,
{
    params.validate()?;
    let mut rng = rng::stream(params.seed, params.chain);
    let mut state = start;
    for traj in 0..params.n_traj {
        let result = trajectory(&state, action, params.step_size, params.n_leapfrog, &mut rng)?;
        state = result.end_config;
        let x = measure(&state)?;
        let rec = ChainRecord {
            chain: params.chain,
            traj,
            action: lattice::wilson_action(&x, coupling),
            avg_plaq: lattice::average_plaquette(&x),
            charge: lattice::topological_charge(&x)?,
            delta_h: result.delta_h,
            accepted: result.accepted,
        };
        sink.record(&rec, &x).map_err(|e| Error::Sink {
            traj,
            source: Box::new(e),
        })?;
    }
    Ok(state)
}

/// Plain HMC with the Wilson action.
pub fn run_chain<S: RecordSink + ?Sized>(
    start: GaugeConfig,
    coupling: Coupling,
    params: &HmcParams,
    sink: &mut S,
) -> Result<GaugeConfig> {
    let mut action = WilsonAction { coupling };
    run_chain_with(start, &mut action, coupling, params, |x| Ok(x.clone()), sink)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::statistics;

    fn geom(l: usize) -> Geometry {
        Geometry::square(l).unwrap()
    }

    #[test]
    fn momenta_are_deterministic() {
        let a = sample_momentum(geom(4), &mut rng::stream(3, 0));
        let b = sample_momentum(geom(4), &mut rng::stream(3, 0));
        assert_eq!(a, b);
    }

    #[test]
    fn momentum_moments() {
        let mut rng = rng::stream(17, 0);
        let g = geom(10);
        let mut draws = Vec::with_capacity(1_000_000);
        while draws.len() < 1_000_000 {
            draws.extend(sample_momentum(g, &mut rng));
        }
        let m = statistics::mean(&draws);
        let var = statistics::variance(&draws);
        assert!(m.abs() < 3e-3, "mean {m}");
        assert!((var - 1.0).abs() < 0.01, "variance {var}");
    }

    #[test]
    fn kinetic_energy_per_dof() {
        let mut rng = rng::stream(4, 0);
        let g = geom(8);
        let n = 2000;
        let ke: Vec<f64> = (0..n).map(|_| kinetic_energy(&sample_momentum(g, &mut rng)) / g.n_links() as f64).collect();
        // each entry is chi^2_{128} / 256: variance 2 * 128 / 256^2
        let sigma = (2.0 * 128.0f64).sqrt() / 256.0 / (n as f64).sqrt();
        assert!((statistics::mean(&ke) - 0.5).abs() < 3.0 * sigma);
    }

    #[test]
    fn zero_step_leapfrog_is_identity() {
        let mut x = vec![0.3, -1.0];
        let mut v = vec![1.0, 2.0];
        leapfrog(&mut x, &mut v, 0.0, 5, |x, f| {
            f.copy_from_slice(x);
            Ok(())
        })
        .unwrap();
        assert_eq!(x, vec![0.3, -1.0]);
        assert_eq!(v, vec![1.0, 2.0]);
        leapfrog(&mut x, &mut v, 0.1, 0, |_, _| unreachable!()).unwrap();
        assert_eq!(x, vec![0.3, -1.0]);
    }

    #[test]
    fn leapfrog_is_reversible_on_gauge_field() {
        let g = geom(6);
        let c = Coupling::new(3.0).unwrap();
        let mut act = WilsonAction { coupling: c };
        let x0 = GaugeConfig::random_seeded(g, 8);
        let v0 = sample_momentum(g, &mut rng::stream(9, 0));
        let (x1, v1) = leapfrog_config(&x0, &v0, 0.05, 20, &mut act).unwrap();
        let back: Vec<f64> = v1.iter().map(|p| -p).collect();
        let (x2, v2) = leapfrog_config(&x1, &back, 0.05, 20, &mut act).unwrap();
        for (a, b) in x0.angles().iter().zip(x2.angles()) {
            assert!((a - b).abs() < 1e-10);
        }
        for (a, b) in v0.iter().zip(&v2) {
            assert!((a + b).abs() < 1e-10);
        }
    }

    #[test]
    fn harmonic_energy_error_is_second_order() {
        // S = x^2 / 2, trajectory length 1.
        let energy_error = |eps: f64| {
            let n = (1.0 / eps).round() as usize;
            let (mut x, mut v) = (vec![1.0], vec![0.5]);
            let h0 = 0.5 * (x[0] * x[0] + v[0] * v[0]);
            leapfrog(&mut x, &mut v, eps, n, |x, f| {
                f[0] = x[0];
                Ok(())
            })
            .unwrap();
            (0.5 * (x[0] * x[0] + v[0] * v[0]) - h0).abs()
        };
        let e1 = energy_error(0.1);
        let e2 = energy_error(0.05);
        let e3 = energy_error(0.025);
        let r1 = e1 / e2;
        let r2 = e2 / e3;
        assert!((r1 - 4.0).abs() < 0.4, "ratio {r1}");
        assert!((r2 - 4.0).abs() < 0.4, "ratio {r2}");
        // C = |dH| / eps^2 stable across halvings
        assert!((e1 / 0.01 - e3 / 0.000625).abs() / (e1 / 0.01) < 0.1);
    }

    #[test]
    fn non_finite_force_reports_step() {
        let mut x = vec![0.0];
        let mut v = vec![1.0];
        let err = leapfrog(&mut x, &mut v, 0.1, 5, |x, f| {
            f[0] = if x[0] > 0.25 { f64::NAN } else { 0.0 };
            Ok(())
        })
        .unwrap_err();
        assert!(matches!(err, Error::Integration { step: 3 }), "{err:?}");
    }

    #[test]
    fn metropolis_edge_cases() {
        let mut rng = rng::stream(1, 0);
        for _ in 0..1000 {
            assert!(metropolis_test(0.0, &mut rng).accepted);
            assert!(metropolis_test(-3.0, &mut rng).accepted);
            assert!(!metropolis_test(f64::INFINITY, &mut rng).accepted);
        }
        let nan = metropolis_test(f64::NAN, &mut rng);
        assert!(!nan.accepted && nan.nan);
    }

    #[test]
    fn metropolis_consumes_one_draw() {
        let mut a = rng::stream(2, 0);
        let mut b = rng::stream(2, 0);
        metropolis_test(f64::NAN, &mut a);
        let _: f64 = b.random();
        assert_eq!(a.random::<u64>(), b.random::<u64>());
    }

    #[test]
    fn metropolis_rate_ln2() {
        let mut rng = rng::stream(3, 0);
        let n = 1_000_000;
        let acc = (0..n).filter(|_| metropolis_test(2f64.ln(), &mut rng).accepted).count() as f64 / n as f64;
        assert!((acc - 0.5).abs() < 1.5e-3, "acceptance {acc}");
    }

    #[test]
    fn chain_is_deterministic() {
        let g = geom(4);
        let c = Coupling::new(2.0).unwrap();
        let params = HmcParams { n_traj: 20, seed: 5, ..Default::default() };
        let mut r1 = Vec::new();
        let mut r2 = Vec::new();
        let a = run_chain(GaugeConfig::cold(g), c, &params, &mut r1).unwrap();
        let b = run_chain(GaugeConfig::cold(g), c, &params, &mut r2).unwrap();
        assert_eq!(r1, r2);
        assert!(a.angles().iter().zip(b.angles()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn sink_failure_reports_position() {
        let g = geom(4);
        let c = Coupling::new(2.0).unwrap();
        let params = HmcParams { n_traj: 10, ..Default::default() };
        let mut sink = |rec: &ChainRecord, _: &GaugeConfig| -> Result<()> {
            if rec.traj == 4 {
                Err(Error::format("disk full"))
            } else {
                Ok(())
            }
        };
        let err = run_chain(GaugeConfig::cold(g), c, &params, &mut sink).unwrap_err();
        assert!(matches!(err, Error::Sink { traj: 4, .. }));
    }

    #[test]
    fn acceptance_grows_as_step_shrinks() {
        let g = geom(8);
        let c = Coupling::new(2.0).unwrap();
        let start = GaugeConfig::random_seeded(g, 1);
        let rate = |eps: f64| {
            let n = (1.0 / eps).round() as usize;
            let params = HmcParams { step_size: eps, n_leapfrog: n, n_traj: 300, seed: 2, chain: 0 };
            let mut recs = Vec::new();
            run_chain(start.clone(), c, &params, &mut recs).unwrap();
            let acc: Vec<bool> = recs[50..].iter().map(|r| r.accepted).collect();
            statistics::acceptance_rate(&acc)
        };
        let (a, b, d) = (rate(0.5), rate(0.25), rate(0.1));
        assert!(a < b && b < d, "{a} {b} {d}");
    }

    #[test]
    fn invalid_params() {
        let c = Coupling::new(1.0).unwrap();
        let bad = HmcParams { step_size: 0.0, ..Default::default() };
        assert!(run_chain(GaugeConfig::cold(geom(2)), c, &bad, &mut Vec::new()).is_err());
        let bad = HmcParams { n_leapfrog: 0, ..Default::default() };
        assert!(run_chain(GaugeConfig::cold(geom(2)), c, &bad, &mut Vec::new()).is_err());
    }
}
