//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Three operations are exposed: the exact average plaquette, a short HMC
//! chain with its histories, and the plaquette field of an instanton
//! configuration. The logic lives in plain Rust functions so it can be
//! tested natively; the `#[wasm_bindgen]` wrappers only convert errors.

use lflow::hmc::{self, ChainRecord, HmcParams};
use lflow::lattice::{self, Coupling, GaugeConfig, Geometry};
use wasm_bindgen::prelude::*;

/// Histories of one HMC run, plus the plaquette field of its last state.
#[wasm_bindgen]
#[derive(Clone, Debug)]
pub struct HmcTrace {
    plaquettes: Vec<f64>,
    charges: Vec<f64>,
    acceptance: f64,
    exact: f64,
    lx: usize,
    ly: usize,
    final_field: Vec<f64>,
}

#[wasm_bindgen]
impl HmcTrace {
    /// Average plaquette after every trajectory.
    pub fn plaquettes(&self) -> Vec<f64> {
        self.plaquettes.clone()
    }

    /// Topological charge after every trajectory.
    pub fn charges(&self) -> Vec<f64> {
        self.charges.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn acceptance(&self) -> f64 {
        self.acceptance
    }

    /// Exact infinite-statistics plaquette for the same coupling and size.
    #[wasm_bindgen(getter)]
    pub fn exact(&self) -> f64 {
        self.exact
    }

    #[wasm_bindgen(getter)]
    pub fn lx(&self) -> usize {
        self.lx
    }

    #[wasm_bindgen(getter)]
    pub fn ly(&self) -> usize {
        self.ly
    }

    /// Wrapped plaquette angles of the final configuration, row-major `[x][y]`.
    pub fn final_field(&self) -> Vec<f64> {
        self.final_field.clone()
    }
}

pub fn exact_plaquette_impl(beta: f64, lx: usize, ly: usize) -> lflow::Result<f64> {
    lattice::exact_average_plaquette(Coupling::new(beta)?, Geometry::new(lx, ly)?)
}

pub fn run_hmc_impl(l: usize, beta: f64, eps: f64, nlf: usize, ntraj: usize, seed: u64) -> lflow::Result<HmcTrace> {
    let geom = Geometry::square(l)?;
    let coupling = Coupling::new(beta)?;
    let params = HmcParams {
        step_size: eps,
        n_leapfrog: nlf,
        seed,
        n_traj: ntraj,
        chain: 0,
    };
    let mut recs: Vec<ChainRecord> = Vec::with_capacity(ntraj);
    let end = hmc::run_chain(GaugeConfig::cold(geom), coupling, &params, &mut recs)?;
    let accepted = recs.iter().filter(|r| r.accepted).count();
    Ok(HmcTrace {
        plaquettes: recs.iter().map(|r| r.avg_plaq).collect(),
        charges: recs.iter().map(|r| r.charge as f64).collect(),
        acceptance: accepted as f64 / ntraj.max(1) as f64,
        exact: lattice::exact_average_plaquette(coupling, geom)?,
        lx: l,
        ly: l,
        final_field: wrapped_plaquettes(&end),
    })
}

pub fn instanton_field_impl(l: usize, q: i64) -> lflow::Result<Vec<f64>> {
    let cfg = lattice::instanton_config(Geometry::square(l)?, q)?;
    Ok(wrapped_plaquettes(&cfg))
}

fn wrapped_plaquettes(cfg: &GaugeConfig) -> Vec<f64> {
    lattice::plaquette_field(cfg).into_iter().map(lattice::wrap).collect()
}

fn js(e: lflow::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Exact average plaquette `<cos x_P>` on an `lx` by `ly` periodic lattice.
#[wasm_bindgen]
pub fn exact_plaquette(beta: f64, lx: usize, ly: usize) -> Result<f64, JsError> {
    exact_plaquette_impl(beta, lx, ly).map_err(js)
}

/// Run `ntraj` HMC trajectories from a cold start on an `l` by `l` lattice.
#[wasm_bindgen]
pub fn run_hmc(l: usize, beta: f64, eps: f64, nlf: usize, ntraj: usize, seed: u64) -> Result<HmcTrace, JsError> {
    run_hmc_impl(l, beta, eps, nlf, ntraj, seed).map_err(js)
}

/// Plaquette angles of the uniform-flux configuration with charge `q`.
#[wasm_bindgen]
pub fn instanton_field(l: usize, q: i32) -> Result<Vec<f64>, JsError> {
    instanton_field_impl(l, q as i64).map_err(js)
}
