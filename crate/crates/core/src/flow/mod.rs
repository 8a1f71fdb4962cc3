//! Normalizing flows on U(1) link configurations.
//!
//! A [`FlowModel`] is a stack of [`PlaquetteCouplingLayer`]s mapping latent
//! configurations `z`, drawn from the uniform (Haar) prior, to physical
//! configurations `x = f(z)`. Every layer is invertible with a closed-form
//! log-Jacobian, and all layer networks see only gauge-invariant inputs,
//! so the whole flow commutes with gauge transformations.
//!
//! Weights are convolution kernels with periodic padding and therefore do
//! not depend on the lattice volume: [`FlowModel::with_geometry`] moves a
//! model to another volume unchanged.

mod affine;
mod circle;
mod gauge;

pub use affine::{affine_forward, affine_inverse, AffineCouplingLayer};
pub use circle::{circle_map_forward, circle_map_inverse};
pub use gauge::{layer_pattern, plaquettes, wilson_action_batch, PlaquetteCouplingLayer, MASK_PERIOD, STRIPES4};

pub(crate) use gauge::batch_tensor;

use std::f64::consts::TAU;

use rand::Rng;

use crate::autodiff::{BoundParams, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::lattice::{GaugeConfig, Geometry};
use crate::rng;

/// Random stream reserved for weight initialisation.
const INIT_STREAM: u64 = 0x696e_6974;

/// Self-describing shape of a flow.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub n_layers: usize,
    pub mask_pattern: u32,
    pub hidden_channels: usize,
    /// Number of hidden convolution layers per conditioning network.
    pub n_hidden: usize,
    pub kernel_size: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            n_layers: 8,
            mask_pattern: STRIPES4,
            hidden_channels: 16,
            n_hidden: 2,
            kernel_size: 3,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.mask_pattern != STRIPES4 {
            return Err(Error::domain(format!("unknown mask pattern id {}", self.mask_pattern)));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::domain(format!("kernel size must be odd, got {}", self.kernel_size)));
        }
        if self.hidden_channels == 0 || self.n_hidden == 0 {
            return Err(Error::domain("conditioning networks need at least one hidden layer with one channel"));
        }
        Ok(())
    }

    /// Named descriptor fields, used for checkpoints and diffs.
    pub fn fields(&self) -> [(&'static str, usize); 5] {
        [
            ("n_layers", self.n_layers),
            ("mask_pattern", self.mask_pattern as usize),
            ("hidden_channels", self.hidden_channels),
            ("n_hidden", self.n_hidden),
            ("kernel_size", self.kernel_size),
        ]
    }

    /// Field-by-field differences, formatted `name: self != other`.
    pub fn diff(&self, other: &Architecture) -> Vec<String> {
        self.fields()
            .iter()
            .zip(other.fields())
            .filter(|(a, b)| a.1 != b.1)
            .map(|(a, b)| format!("{}: {} != {}", a.0, a.1, b.1))
            .collect()
    }

    /// Channel counts of the convolutions of one conditioning network.
    fn conv_channels(&self) -> Vec<(usize, usize)> {
        let h = self.hidden_channels;
        let mut ch = vec![(2, h)];
        ch.extend(std::iter::repeat_n((h, h), self.n_hidden - 1));
        ch.push((h, 2));
        ch
    }

    /// Parameter names and shapes in store order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let k = self.kernel_size;
        let mut out = Vec::new();
        for layer in 0..self.n_layers {
            for (j, (ci, co)) in self.conv_channels().into_iter().enumerate() {
                out.push((format!("layer{layer}.conv{j}.weight"), vec![co, ci, k, k]));
                out.push((format!("layer{layer}.conv{j}.bias"), vec![co]));
            }
        }
        out
    }
}

/// Composition `f_k o ... o f_1` of plaquette coupling layers.
#[derive(Clone, Debug)]
pub struct FlowModel {
    geom: Geometry,
    arch: Architecture,
    params: ParamStore,
    layers: Vec<PlaquetteCouplingLayer>,
}

impl FlowModel {
    /// Fresh model: hidden convolutions uniform in `+-1/sqrt(fan_in)`,
    /// output convolutions zero, so the flow starts as the identity.
    pub fn new(arch: Architecture, geom: Geometry, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng::stream(seed, INIT_STREAM);
        let mut params = ParamStore::new();
        let n_conv = arch.n_hidden + 1;
        for (i, (name, shape)) in arch.param_shapes().into_iter().enumerate() {
            let n: usize = shape.iter().product();
            let is_output = (i / 2) % n_conv == n_conv - 1;
            let data = if is_output {
                vec![0.0; n]
            } else {
                let w = if shape.len() == 4 { shape.clone() } else { arch.param_shapes()[i - 1].1.clone() };
                let bound = 1.0 / ((w[1] * w[2] * w[3]) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            };
            params.insert(name, Tensor::new(shape, data)?)?;
        }
        Self::from_params(arch, geom, params)
    }

    /// The empty flow.
    pub fn identity(geom: Geometry) -> Self {
        let arch = Architecture {
            n_layers: 0,
            ..Architecture::default()
        };
        Self {
            geom,
            arch,
            params: ParamStore::new(),
            layers: Vec::new(),
        }
    }

    /// Assemble a model from existing weights; names and shapes must match `arch`.
    pub fn from_params(arch: Architecture, geom: Geometry, params: ParamStore) -> Result<Self> {
        arch.validate()?;
        let expected = arch.param_shapes();
        let mut mismatches = Vec::new();
        for (name, shape) in &expected {
            match params.index_of(name) {
                None => mismatches.push(format!("missing parameter {name}")),
                Some(i) if params.value(i).shape() != shape.as_slice() => mismatches.push(format!(
                    "{name}: shape {:?} != {:?}",
                    params.value(i).shape(),
                    shape
                )),
                Some(_) => {}
            }
        }
        for name in params.names() {
            if !expected.iter().any(|(n, _)| n == name) {
                mismatches.push(format!("unexpected parameter {name}"));
            }
        }
        if !mismatches.is_empty() {
            return Err(Error::ArchitectureMismatch(mismatches));
        }
        let n_conv = arch.n_hidden + 1;
        let mut layers = Vec::with_capacity(arch.n_layers);
        for l in 0..arch.n_layers {
            let convs = (0..n_conv)
                .map(|j| {
                    let id = |what| params.index_of(&format!("layer{l}.conv{j}.{what}")).expect("checked above");
                    (id("weight"), id("bias"))
                })
                .collect();
            let (mu, offset) = layer_pattern(l);
            layers.push(PlaquetteCouplingLayer::new(geom, mu, offset, convs)?);
        }
        let model = Self {
            geom,
            arch,
            params,
            layers,
        };
        let uncovered = model.uncovered_links();
        if !uncovered.is_empty() && arch.n_layers > 0 {
            log::warn!(
                "flow with {} layers on {geom} never updates {} of {} links",
                arch.n_layers,
                uncovered.len(),
                geom.n_links()
            );
        }
        Ok(model)
    }

    /// Overwrite every weight, output layers included, with uniform draws in
    /// `+-scale/sqrt(fan_in)`.
    pub fn randomize(&mut self, scale: f64, seed: u64) {
        let mut rng = rng::stream(seed, INIT_STREAM + 1);
        for (id, (_, shape)) in self.arch.param_shapes().iter().enumerate() {
            let w = if shape.len() == 4 { shape } else { &self.arch.param_shapes()[id - 1].1 };
            let bound = scale / ((w[1] * w[2] * w[3]) as f64).sqrt();
            for v in self.params.value_mut(id).data_mut() {
                *v = rng.random_range(-bound..bound);
            }
        }
    }

    pub fn geometry(&self) -> Geometry {
        self.geom
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn layers(&self) -> &[PlaquetteCouplingLayer] {
        &self.layers
    }

    /// Same weights on another lattice.
    pub fn with_geometry(&self, geom: Geometry) -> Result<Self> {
        Self::from_params(self.arch, geom, self.params.clone())
    }

    /// Links that no layer ever moves.
    pub fn uncovered_links(&self) -> Vec<usize> {
        let mut touched = vec![false; self.geom.n_links()];
        for layer in &self.layers {
            for l in layer.assigned_links() {
                touched[l] = true;
            }
        }
        (0..touched.len()).filter(|&i| !touched[i]).collect()
    }

    fn check_batch(&self, op: &'static str, z: Var<'_>) -> Result<()> {
        let shape = z.shape();
        let want = [2, self.geom.lx(), self.geom.ly()];
        if shape.len() != 4 || shape[1..] != want {
            return Err(Error::Shape {
                op,
                lhs: vec![0, 2, self.geom.lx(), self.geom.ly()],
                rhs: shape,
            });
        }
        Ok(())
    }

    /// Push a batch `[B, 2, Lx, Ly]` through the flow on `z`'s tape.
    /// Returns `(x, logJ[B])`.
    pub fn forward_tape<'t>(&self, params: &BoundParams<'t>, z: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        self.check_batch("flow_forward", z)?;
        let mut log_jac = z.tape().constant(Tensor::zeros(&[z.shape()[0]]));
        let mut x = z;
        for layer in &self.layers {
            let (next, lj) = layer.apply(x, params, false)?;
            x = next;
            log_jac = log_jac.add(lj)?;
        }
        Ok((x, log_jac))
    }

    /// Inverse pass; the log-Jacobian is that of the inverse map.
    pub fn inverse_tape<'t>(&self, params: &BoundParams<'t>, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        self.check_batch("flow_inverse", x)?;
        let mut log_jac = x.tape().constant(Tensor::zeros(&[x.shape()[0]]));
        let mut z = x;
        for layer in self.layers.iter().rev() {
            let (next, lj) = layer.apply(z, params, true)?;
            z = next;
            log_jac = log_jac.add(lj)?;
        }
        Ok((z, log_jac))
    }

    fn run_batch(&self, cfgs: &[&GaugeConfig], inverse: bool) -> Result<(Vec<GaugeConfig>, Vec<f64>)> {
        for c in cfgs {
            if c.geometry() != self.geom {
                return Err(Error::Shape {
                    op: if inverse { "flow_inverse" } else { "flow_forward" },
                    lhs: vec![2, self.geom.lx(), self.geom.ly()],
                    rhs: vec![2, c.geometry().lx(), c.geometry().ly()],
                });
            }
        }
        if cfgs.is_empty() {
            return Ok((Vec::new(), Vec::new()));
        }
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let angles: Vec<&[f64]> = cfgs.iter().map(|c| c.angles()).collect();
        let input = tape.constant(batch_tensor(self.geom, &angles));
        let (out, lj) = if inverse {
            self.inverse_tape(&bound, input)?
        } else {
            self.forward_tape(&bound, input)?
        };
        let out = out.value();
        let lj = lj.value().into_data();
        if !out.is_finite() || lj.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("flow produced non-finite values"));
        }
        let n = self.geom.n_links();
        let cfgs = out
            .data()
            .chunks(n)
            .map(|c| GaugeConfig::from_angles_unchecked(self.geom, c.to_vec()))
            .collect();
        Ok((cfgs, lj))
    }

    /// `x = f(z)` and `log |det df/dz|`.
    pub fn forward(&self, z: &GaugeConfig) -> Result<(GaugeConfig, f64)> {
        let (mut x, lj) = self.run_batch(&[z], false)?;
        Ok((x.pop().expect("one output"), lj[0]))
    }

    /// `z = f^{-1}(x)` and `log |det df^{-1}/dx|`.
    pub fn inverse(&self, x: &GaugeConfig) -> Result<(GaugeConfig, f64)> {
        let (mut z, lj) = self.run_batch(&[x], true)?;
        Ok((z.pop().expect("one output"), lj[0]))
    }

    pub fn forward_batch(&self, zs: &[GaugeConfig]) -> Result<(Vec<GaugeConfig>, Vec<f64>)> {
        self.run_batch(&zs.iter().collect::<Vec<_>>(), false)
    }

    pub fn inverse_batch(&self, xs: &[GaugeConfig]) -> Result<(Vec<GaugeConfig>, Vec<f64>)> {
        self.run_batch(&xs.iter().collect::<Vec<_>>(), true)
    }

    /// Model density `log q(x) = log r(f^{-1}(x)) + log |det df^{-1}/dx|`.
    pub fn log_q(&self, x: &GaugeConfig) -> Result<f64> {
        let (_, lj) = self.inverse(x)?;
        Ok(log_prior_density(self.geom) + lj)
    }
}

/// `x = f(z)` with the total forward log-Jacobian.
pub fn flow_forward(z: &GaugeConfig, model: &FlowModel) -> Result<(GaugeConfig, f64)> {
    model.forward(z)
}

/// `z = f^{-1}(x)` with the total inverse log-Jacobian.
pub fn flow_inverse(x: &GaugeConfig, model: &FlowModel) -> Result<(GaugeConfig, f64)> {
    model.inverse(x)
}

pub fn model_log_q(x: &GaugeConfig, model: &FlowModel) -> Result<f64> {
    model.log_q(x)
}

/// Draw from the uniform prior on `(-pi, pi]^{2V}`.
pub fn sample_prior<R: Rng + ?Sized>(geom: Geometry, rng: &mut R) -> GaugeConfig {
    GaugeConfig::random(geom, rng)
}

/// `log r(z) = -2 Lx Ly log(2 pi)`, the same for every `z`.
pub fn log_prior_density(geom: Geometry) -> f64 {
    -(geom.n_links() as f64) * TAU.ln()
}
