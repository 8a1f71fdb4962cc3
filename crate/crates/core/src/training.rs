//! Reverse-KL training of flows, checkpoints and volume transfer.
//!
//! Every epoch draws a fresh prior batch from the random stream numbered by
//! the epoch, so a run resumed from a checkpoint continues bit-for-bit like
//! an uninterrupted one.

use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::autodiff::{BoundParams, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::flow::{self, batch_tensor, wilson_action_batch, Architecture, FlowModel, MASK_PERIOD};
use crate::io;
use crate::lattice::{Coupling, GaugeConfig, Geometry};
use crate::rng;
use crate::statistics::{self, WeightSet};

/// Stream offset for independent ESS evaluation batches.
const EVAL_STREAM: u64 = 1 << 40;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub beta: f64,
    pub geom: Geometry,
    pub batch_size: usize,
    pub n_epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Directory receiving `checkpoint.lfck`; `None` keeps everything in memory.
    pub out_dir: Option<PathBuf>,
    /// When non-zero, ESS is measured on a separate batch of this size
    /// instead of the training batch.
    pub eval_batch_size: usize,
    /// Global gradient-norm clipping threshold.
    pub clip_norm: f64,
    pub estimator: GradientEstimator,
}

/// Which terms of the reverse-KL gradient are kept.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GradientEstimator {
    /// Exact gradient of the batch loss: sample path plus the explicit
    /// parameter dependence of `log q`.
    #[default]
    Full,
    /// Sample path only; the explicit term has zero mean and is dropped, so
    /// the gradient vanishes sample by sample once `q = p`.
    PathOnly,
}

impl std::str::FromStr for GradientEstimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "path" => Ok(Self::PathOnly),
            other => Err(Error::domain(format!("unknown gradient estimator {other:?} (expected full or path)"))),
        }
    }
}

impl TrainConfig {
    pub fn new(beta: f64, geom: Geometry) -> Self {
        Self {
            beta,
            geom,
            batch_size: 64,
            n_epochs: 1000,
            learning_rate: 1e-3,
            seed: 0,
            checkpoint_every: 0,
            out_dir: None,
            eval_batch_size: 0,
            clip_norm: 10.0,
            estimator: GradientEstimator::Full,
        }
    }

    pub fn validate(&self) -> Result<()> {
        Coupling::new(self.beta)?;
        if self.batch_size == 0 {
            return Err(Error::domain("batch_size must be at least 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::domain(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::domain("clip_norm must be positive"));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainLogRow {
    pub epoch: usize,
    /// Reverse KL up to the unknown `log Z`.
    pub loss: f64,
    pub ess: f64,
    pub mean_logq: f64,
    pub mean_action: f64,
    /// Wall-clock seconds since the trainer was created.
    pub seconds: f64,
    /// Whether the gradient was clipped this epoch (not part of the CSV).
    pub clipped: bool,
}

/// Loss node and per-sample diagnostics of one batch.
pub struct KlBatch<'t> {
    pub loss: Var<'t>,
    pub log_q: Vec<f64>,
    pub action: Vec<f64>,
}

impl KlBatch<'_> {
    /// Log importance weights `-S - log q`.
    pub fn log_weights(&self) -> Vec<f64> {
        self.action.iter().zip(&self.log_q).map(|(s, q)| -s - q).collect()
    }
}

/// `(1/N) sum_i [log q(y_i) + S(y_i)]` with `y_i = f(z_i)`, differentiable in
/// the model parameters along the sample path.
pub fn reverse_kl_loss<'t>(
    model: &FlowModel,
    params: &BoundParams<'t>,
    z: Var<'t>,
    coupling: Coupling,
) -> Result<KlBatch<'t>> {
    let (x, log_jac) = model.forward_tape(params, z)?;
    let action = wilson_action_batch(x, coupling.beta())?;
    let log_q = log_jac.neg().add_scalar(flow::log_prior_density(model.geometry()));
    let action_v = action.value().into_data();
    if let Some(i) = action_v.iter().position(|s| !s.is_finite()) {
        return Err(Error::numerical(format!("non-finite action on sample {i}")));
    }
    let loss = log_q.add(action)?.mean();
    Ok(KlBatch {
        loss,
        log_q: log_q.value().into_data(),
        action: action_v,
    })
}

/// Same loss value as [`reverse_kl_loss`], but `log q` is evaluated through
/// the inverse flow with the parameters in `frozen` (bound as constants), so
/// gradients reach `params` only through the samples.
pub fn path_kl_loss<'t>(
    model: &FlowModel,
    params: &BoundParams<'t>,
    frozen: &BoundParams<'t>,
    z: Var<'t>,
    coupling: Coupling,
) -> Result<KlBatch<'t>> {
    let (x, _) = model.forward_tape(params, z)?;
    let action = wilson_action_batch(x, coupling.beta())?;
    let (_, inv_log_jac) = model.inverse_tape(frozen, x)?;
    let log_q = inv_log_jac.add_scalar(flow::log_prior_density(model.geometry()));
    let action_v = action.value().into_data();
    if let Some(i) = action_v.iter().position(|s| !s.is_finite()) {
        return Err(Error::numerical(format!("non-finite action on sample {i}")));
    }
    let loss = log_q.add(action)?.mean();
    Ok(KlBatch {
        loss,
        log_q: log_q.value().into_data(),
        action: action_v,
    })
}

/// Adam state: `beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`, bias corrected.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(params: &ParamStore, learning_rate: f64) -> Self {
        let zeros: Vec<Tensor> = params.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            learning_rate,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    pub fn from_moments(learning_rate: f64, step: u64, m: Vec<Tensor>, v: Vec<Tensor>) -> Self {
        Self {
            learning_rate,
            step,
            m,
            v,
        }
    }
}

/// One Adam update from the gradients accumulated in `params`.
pub fn optimizer_step(params: &mut ParamStore, state: &mut Adam) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::Shape {
            op: "optimizer_step",
            lhs: vec![state.m.len()],
            rhs: vec![params.len()],
        });
    }
    for id in 0..params.len() {
        if state.m[id].shape() != params.grad(id).shape() {
            return Err(Error::Shape {
                op: "optimizer_step",
                lhs: state.m[id].shape().to_vec(),
                rhs: params.grad(id).shape().to_vec(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - Adam::BETA1.powi(t);
    let c2 = 1.0 - Adam::BETA2.powi(t);
    let lr = state.learning_rate;
    for id in 0..params.len() {
        let g = params.grad(id).data().to_vec();
        let m = state.m[id].data_mut();
        let v = state.v[id].data_mut();
        let w = params.value_mut(id).data_mut();
        for k in 0..g.len() {
            m[k] = Adam::BETA1 * m[k] + (1.0 - Adam::BETA1) * g[k];
            v[k] = Adam::BETA2 * v[k] + (1.0 - Adam::BETA2) * g[k] * g[k];
            let mh = m[k] / c1;
            let vh = v[k] / c2;
            w[k] -= lr * mh / (vh.sqrt() + Adam::EPS);
        }
    }
    Ok(())
}

/// Model weights plus optimizer and training metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: Architecture,
    pub geom: Geometry,
    pub beta: f64,
    pub epoch: usize,
    pub seed: u64,
    pub params: ParamStore,
    pub adam: Option<Adam>,
}

const ARCH_KEY: &str = "__arch__";
const META_KEY: &str = "__meta__";
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

fn exact_usize(v: f64, what: &str) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && v < 9.007_199_254_740_992e15 {
        Ok(v as usize)
    } else {
        Err(Error::format(format!("checkpoint field {what} is not a non-negative integer: {v}")))
    }
}

impl Checkpoint {
    pub fn model(&self) -> Result<FlowModel> {
        FlowModel::from_params(self.arch, self.geom, self.params.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let arch: Vec<f64> = self.arch.fields().iter().map(|(_, v)| *v as f64).collect();
        let adam_step = self.adam.as_ref().map_or(-1.0, |a| a.step as f64);
        let adam_lr = self.adam.as_ref().map_or(0.0, |a| a.learning_rate);
        let meta = vec![
            self.geom.lx() as f64,
            self.geom.ly() as f64,
            self.beta,
            self.epoch as f64,
            (self.seed >> 32) as f64,
            (self.seed & 0xffff_ffff) as f64,
            adam_step,
            adam_lr,
        ];
        let mut tensors = vec![
            (ARCH_KEY.to_string(), Tensor::vector(arch)),
            (META_KEY.to_string(), Tensor::vector(meta)),
        ];
        for (name, t) in self.params.iter() {
            tensors.push((name.to_string(), t.clone()));
        }
        if let Some(adam) = &self.adam {
            for (i, name) in self.params.names().iter().enumerate() {
                tensors.push((format!("{ADAM_M}{name}"), adam.m[i].clone()));
                tensors.push((format!("{ADAM_V}{name}"), adam.v[i].clone()));
            }
        }
        let mut buf = Vec::new();
        io::write_tensors(&mut buf, &tensors)?;
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let tensors = io::read_tensors(&mut Cursor::new(bytes))?;
        let find = |key: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == key)
                .map(|(_, t)| t.data().to_vec())
                .ok_or_else(|| Error::format(format!("checkpoint lacks {key}")))
        };
        let a = find(ARCH_KEY)?;
        let m = find(META_KEY)?;
        if a.len() != 5 || m.len() != 8 {
            return Err(Error::format("checkpoint descriptor has the wrong length"));
        }
        let arch = Architecture {
            n_layers: exact_usize(a[0], "n_layers")?,
            mask_pattern: exact_usize(a[1], "mask_pattern")? as u32,
            hidden_channels: exact_usize(a[2], "hidden_channels")?,
            n_hidden: exact_usize(a[3], "n_hidden")?,
            kernel_size: exact_usize(a[4], "kernel_size")?,
        };
        let geom = Geometry::new(exact_usize(m[0], "lx")?, exact_usize(m[1], "ly")?)
            .map_err(|e| Error::format(format!("checkpoint geometry: {e}")))?;
        let seed = ((exact_usize(m[4], "seed")? as u64) << 32) | exact_usize(m[5], "seed")? as u64;
        let mut params = ParamStore::new();
        let mut m_moments = Vec::new();
        let mut v_moments = Vec::new();
        for (name, t) in &tensors {
            if name == ARCH_KEY || name == META_KEY || name.starts_with(ADAM_M) || name.starts_with(ADAM_V) {
                continue;
            }
            params
                .insert(name.clone(), t.clone())
                .map_err(|e| Error::format(format!("checkpoint parameters: {e}")))?;
        }
        let adam = if m[6] >= 0.0 {
            for name in params.names() {
                let get = |prefix: &str| {
                    tensors
                        .iter()
                        .find(|(n, _)| n.strip_prefix(prefix) == Some(name.as_str()))
                        .map(|(_, t)| t.clone())
                        .ok_or_else(|| Error::format(format!("checkpoint lacks optimizer state for {name}")))
                };
                m_moments.push(get(ADAM_M)?);
                v_moments.push(get(ADAM_V)?);
            }
            Some(Adam::from_moments(m[7], exact_usize(m[6], "adam_step")? as u64, m_moments, v_moments))
        } else {
            None
        };
        let ckpt = Self {
            arch,
            geom,
            beta: m[2],
            epoch: exact_usize(m[3], "epoch")?,
            seed,
            params,
            adam,
        };
        // validates names and shapes against the descriptor
        ckpt.model().map_err(|e| Error::format(format!("checkpoint inconsistent with its descriptor: {e}")))?;
        Ok(ckpt)
    }

    /// Atomic write.
    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Stateful training loop.
pub struct Trainer {
    config: TrainConfig,
    coupling: Coupling,
    model: FlowModel,
    adam: Adam,
    epoch: usize,
    started: Instant,
}

impl Trainer {
    pub fn new(config: TrainConfig, model: FlowModel) -> Result<Self> {
        config.validate()?;
        if model.geometry() != config.geom {
            return Err(Error::domain(format!(
                "model geometry {} differs from training geometry {}",
                model.geometry(),
                config.geom
            )));
        }
        let adam = Adam::new(model.params(), config.learning_rate);
        Ok(Self {
            coupling: Coupling::new(config.beta)?,
            config,
            model,
            adam,
            epoch: 0,
            started: Instant::now(),
        })
    }

    /// Continue from a checkpoint written by a run with the same config.
    pub fn resume(config: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(config, ckpt.model()?)?;
        if let Some(adam) = &ckpt.adam {
            t.adam = adam.clone();
            t.adam.learning_rate = t.config.learning_rate;
        }
        t.epoch = ckpt.epoch;
        Ok(t)
    }

    pub fn model(&self) -> &FlowModel {
        &self.model
    }

    pub fn into_model(self) -> FlowModel {
        self.model
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            arch: self.model.architecture(),
            geom: self.model.geometry(),
            beta: self.config.beta,
            epoch: self.epoch,
            seed: self.config.seed,
            params: self.model.params().clone(),
            adam: Some(self.adam.clone()),
        }
    }

    fn prior_batch(&self, stream: u64, n: usize) -> Tensor {
        let mut r = rng::stream(self.config.seed, stream);
        let cfgs: Vec<GaugeConfig> = (0..n).map(|_| flow::sample_prior(self.config.geom, &mut r)).collect();
        let angles: Vec<&[f64]> = cfgs.iter().map(|c| c.angles()).collect();
        batch_tensor(self.config.geom, &angles)
    }

    /// Run one epoch. Parameters change only if the loss and all gradients
    /// are finite.
    pub fn step(&mut self) -> Result<TrainLogRow> {
        let epoch = self.epoch + 1;
        let z = self.prior_batch(epoch as u64, self.config.batch_size);
        let tape = Tape::new();
        let bound = self.model.params().bind(&tape, true);
        let z = tape.constant(z);
        let batch = match self.config.estimator {
            GradientEstimator::Full => reverse_kl_loss(&self.model, &bound, z, self.coupling)?,
            GradientEstimator::PathOnly => {
                let frozen = self.model.params().bind(&tape, false);
                path_kl_loss(&self.model, &bound, &frozen, z, self.coupling)?
            }
        };
        let loss = batch.loss.item()?;
        if !loss.is_finite() {
            return Err(Error::numerical(format!("loss is {loss} at epoch {epoch}")));
        }
        let mut params = self.model.params().clone();
        params.zero_grad();
        tape.backward_into(batch.loss, &bound, &mut params)?;
        let norm = params.grad_norm();
        let clipped = norm > self.config.clip_norm;
        if clipped {
            log::info!("epoch {epoch}: gradient norm {norm:.3e} clipped to {}", self.config.clip_norm);
            let f = self.config.clip_norm / norm;
            for g in params.grads_mut() {
                for v in g.data_mut() {
                    *v *= f;
                }
            }
        }
        let log_w = if self.config.eval_batch_size > 0 {
            let z = self.prior_batch(EVAL_STREAM + epoch as u64, self.config.eval_batch_size);
            let tape = Tape::new();
            let bound = self.model.params().bind(&tape, false);
            reverse_kl_loss(&self.model, &bound, tape.constant(z), self.coupling)?.log_weights()
        } else {
            batch.log_weights()
        };
        let ess = statistics::effective_sample_size(&WeightSet::new(log_w)?)?;
        optimizer_step(&mut params, &mut self.adam)?;
        if params.values().iter().any(|t| !t.is_finite()) {
            return Err(Error::numerical(format!("parameters became non-finite at epoch {epoch}")));
        }
        *self.model.params_mut() = params;
        self.epoch = epoch;
        Ok(TrainLogRow {
            epoch,
            loss,
            ess,
            mean_logq: statistics::mean(&batch.log_q),
            mean_action: statistics::mean(&batch.action),
            seconds: self.started.elapsed().as_secs_f64(),
            clipped,
        })
    }

    fn write_checkpoint(&self) -> Result<()> {
        if let Some(dir) = &self.config.out_dir {
            std::fs::create_dir_all(dir)?;
            self.checkpoint().save(&dir.join("checkpoint.lfck"))?;
        }
        Ok(())
    }

    /// Train until `config.n_epochs`, reporting each row to `on_row`.
    ///
    /// On a numerical failure the error is returned and the last checkpoint
    /// on disk is left untouched.
    pub fn run<F: FnMut(&TrainLogRow) -> Result<()>>(&mut self, mut on_row: F) -> Result<()> {
        while self.epoch < self.config.n_epochs {
            let row = self.step()?;
            on_row(&row)?;
            if self.config.checkpoint_every > 0 && self.epoch % self.config.checkpoint_every == 0 {
                self.write_checkpoint()?;
            }
        }
        self.write_checkpoint()
    }
}

/// Train `model` from scratch; returns the final checkpoint and the log.
pub fn train(config: TrainConfig, model: FlowModel) -> Result<(Checkpoint, Vec<TrainLogRow>)> {
    let mut trainer = Trainer::new(config, model)?;
    let mut rows = Vec::new();
    trainer.run(|r| {
        rows.push(r.clone());
        Ok(())
    })?;
    Ok((trainer.checkpoint(), rows))
}

/// Load checkpoint weights onto another lattice without retraining.
///
/// `expected` is the architecture the caller intends to run; any difference
/// is reported field by field. The target sides must be multiples of the
/// mask period (or the geometry unchanged).
pub fn transfer_weights(ckpt: &Checkpoint, target: Geometry, expected: &Architecture) -> Result<FlowModel> {
    let diff = ckpt.arch.diff(expected);
    if !diff.is_empty() {
        return Err(Error::ArchitectureMismatch(diff));
    }
    if target != ckpt.geom && (target.lx() % MASK_PERIOD != 0 || target.ly() % MASK_PERIOD != 0) {
        return Err(Error::domain(format!(
            "target lattice {target} is not a multiple of the mask period {MASK_PERIOD}"
        )));
    }
    ckpt.model()?.with_geometry(target)
}

/// Reverse-KL loss of a fixed latent batch `[B, 2, Lx, Ly]`, without gradients.
pub fn loss_value(model: &FlowModel, z: &Tensor, coupling: Coupling) -> Result<f64> {
    let tape = Tape::new();
    let bound = model.params().bind(&tape, false);
    reverse_kl_loss(model, &bound, tape.constant(z.clone()), coupling)?.loss.item()
}
