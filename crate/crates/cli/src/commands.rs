use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use lflow::flow::{Architecture, FlowModel};
use lflow::fthmc;
use lflow::hmc::{self, ChainRecord, HmcParams};
use lflow::io::{self, EnsembleWriter, ObservableWriter, TrainLogWriter};
use lflow::lattice::{self, Coupling, GaugeConfig, Geometry};
use lflow::statistics;
use lflow::training::{self, Checkpoint, GradientEstimator, TrainConfig, Trainer};

use crate::config::{key, required, Config, Key};
use crate::error::CliError;
use crate::manifest::{self, RunManifest};
use crate::plot;
use crate::summary::{self, Summary};

pub const HMC_KEYS: &[Key] = &[
    key("beta", "2.0", "inverse coupling"),
    key("lx", "8", "lattice extent in x"),
    key("ly", "8", "lattice extent in y"),
    key("eps", "0.1", "leapfrog step size"),
    key("nlf", "10", "leapfrog steps per trajectory"),
    key("ntraj", "1000", "number of trajectories"),
    key("seed", "0", "random seed"),
    key("start", "cold", "initial configuration: cold or random"),
    key("chains", "1", "independent chains; chain k uses random stream k"),
    required("obs", "observable CSV path"),
    key("out", "", "ensemble output path (optional)"),
    key("save_every", "1", "store every n-th configuration in the ensemble"),
];

pub const FTHMC_KEYS: &[Key] = &[
    required("checkpoint", "trained flow checkpoint"),
    key("beta", "", "inverse coupling [default: the checkpoint's]"),
    key("lx", "", "lattice extent in x [default: the checkpoint's]"),
    key("ly", "", "lattice extent in y [default: the checkpoint's]"),
    key("eps", "0.01", "leapfrog step size in latent space"),
    key("nlf", "100", "leapfrog steps per trajectory"),
    key("ntraj", "1000", "number of trajectories"),
    key("seed", "0", "random seed"),
    key("start", "cold", "initial latent configuration: cold or random"),
    key("chains", "1", "independent chains; chain k uses random stream k"),
    required("obs", "observable CSV path"),
    key("out", "", "ensemble output path (optional)"),
    key("save_every", "1", "store every n-th configuration in the ensemble"),
];

pub const TRAIN_KEYS: &[Key] = &[
    key("beta", "2.0", "inverse coupling"),
    key("lx", "8", "lattice extent in x"),
    key("ly", "8", "lattice extent in y"),
    key("batch_size", "64", "prior samples per epoch"),
    key("epochs", "1000", "number of epochs"),
    key("lr", "0.001", "Adam learning rate"),
    key("seed", "0", "seed for initialisation and prior batches"),
    key("n_layers", "8", "coupling layers"),
    key("hidden_channels", "16", "channels of the hidden convolutions"),
    key("n_hidden", "2", "hidden convolutions per layer"),
    key("kernel_size", "3", "odd convolution kernel size"),
    key("checkpoint_every", "100", "write the checkpoint every n epochs (0: only at the end)"),
    key("eval_batch", "0", "separate ESS batch size (0: use the training batch)"),
    key("clip_norm", "10", "global gradient norm clip"),
    key("estimator", "full", "gradient estimator: full or path"),
    required("out_dir", "directory for checkpoint.lfck and train_log.csv"),
    key("resume", "false", "continue from out_dir/checkpoint.lfck if present"),
];

pub const TRANSFER_KEYS: &[Key] = &[
    required("checkpoint", "source checkpoint"),
    required("lx", "target lattice extent in x"),
    required("ly", "target lattice extent in y"),
    required("out", "output checkpoint path"),
];

pub const EXACT_KEYS: &[Key] = &[
    required("beta", "inverse coupling"),
    key("lx", "8", "lattice extent in x"),
    key("ly", "8", "lattice extent in y"),
];

pub const ANALYZE_KEYS: &[Key] = &[
    required("obs", "observable CSV paths, comma separated; file k is chain k"),
    key("skip", "0", "burn-in trajectories dropped from each chain"),
    key("out", "", "summary JSON path (default: standard output)"),
    key("plot", "", "SVG path for the Q and plaquette histories (optional)"),
    key("beta", "", "inverse coupling [default: from the run manifest]"),
    key("lx", "", "lattice extent in x [default: from the run manifest]"),
    key("ly", "", "lattice extent in y [default: from the run manifest]"),
    key("checkpoint", "", "flow checkpoint whose independence-sampler ESS is reported"),
    key("ess_samples", "1024", "flow samples for the ESS"),
    key("seed", "0", "seed for the bootstrap and the ESS samples"),
];

pub fn schema(command: &str) -> Option<&'static [Key]> {
    Some(match command {
        "hmc" => HMC_KEYS,
        "fthmc" => FTHMC_KEYS,
        "train" => TRAIN_KEYS,
        "transfer" => TRANSFER_KEYS,
        "exact" => EXACT_KEYS,
        "analyze" => ANALYZE_KEYS,
        _ => return None,
    })
}

pub fn run(command: &str, cfg: Config) -> Result<(), CliError> {
    match command {
        "hmc" => cmd_hmc(cfg),
        "fthmc" => cmd_fthmc(cfg),
        "train" => cmd_train(cfg),
        "transfer" => cmd_transfer(cfg),
        "exact" => cmd_exact(cfg),
        "analyze" => cmd_analyze(cfg),
        other => Err(CliError::Config(format!("unknown command `{other}`"))),
    }
}

fn geometry(lx: usize, ly: usize) -> Result<Geometry, CliError> {
    Geometry::new(lx, ly).map_err(|e| CliError::Config(e.to_string()))
}

fn coupling(beta: f64) -> Result<Coupling, CliError> {
    Coupling::new(beta).map_err(|e| CliError::Config(e.to_string()))
}

/// `runs/obs.csv` -> `runs/obs.chain3.csv` when more than one chain runs.
pub fn chain_path(path: &Path, chain: u64, n_chains: u64) -> PathBuf {
    if n_chains <= 1 {
        return path.to_path_buf();
    }
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}.chain{chain}.{}", ext.to_string_lossy()),
        None => format!("{stem}.chain{chain}"),
    };
    path.with_file_name(name)
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

/// Shared sampler settings of `hmc` and `fthmc`.
struct ChainPlan {
    geom: Geometry,
    beta: f64,
    params: HmcParams,
    start: String,
    chains: u64,
    obs: PathBuf,
    out: Option<PathBuf>,
    save_every: usize,
}

impl ChainPlan {
    fn from_config(cfg: &Config, geom: Geometry, beta: f64) -> Result<Self, CliError> {
        let params = HmcParams {
            step_size: cfg.get("eps")?,
            n_leapfrog: cfg.get("nlf")?,
            seed: cfg.get("seed")?,
            n_traj: cfg.get("ntraj")?,
            chain: 0,
        };
        params.validate().map_err(|e| CliError::Config(e.to_string()))?;
        let start = cfg.str("start").to_string();
        if start != "cold" && start != "random" {
            return Err(CliError::Config(format!("key `start`: expected cold or random, got {start:?}")));
        }
        let chains: u64 = cfg.get("chains")?;
        let save_every: usize = cfg.get("save_every")?;
        if chains == 0 || save_every == 0 {
            return Err(CliError::Config("chains and save_every must be at least 1".into()));
        }
        Ok(Self {
            geom,
            beta,
            params,
            start,
            chains,
            obs: PathBuf::from(cfg.str("obs")),
            out: cfg.opt_str("out").map(PathBuf::from),
            save_every,
        })
    }

    fn start_config(&self, chain: u64) -> GaugeConfig {
        match self.start.as_str() {
            "random" => GaugeConfig::random(self.geom, &mut lflow::rng::stream(self.params.seed, lflow::rng::START_STREAM + chain)),
            _ => GaugeConfig::cold(self.geom),
        }
    }

    fn outputs(&self) -> Vec<String> {
        let mut v = Vec::new();
        for c in 0..self.chains {
            v.push(chain_path(&self.obs, c, self.chains).display().to_string());
            if let Some(out) = &self.out {
                v.push(chain_path(out, c, self.chains).display().to_string());
            }
        }
        v
    }

    /// Run every chain on its own thread; `chain` runs one chain into a sink.
    fn run<F>(&self, chain_fn: F) -> Result<(), CliError>
    where
        F: Fn(GaugeConfig, &HmcParams, &mut dyn hmc::RecordSink) -> lflow::Result<GaugeConfig> + Sync,
    {
        let results: Vec<Result<(), CliError>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..self.chains)
                .map(|c| {
                    let chain_fn = &chain_fn;
                    s.spawn(move || self.run_one(c, chain_fn))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(CliError::Config("chain thread panicked".into()))))
                .collect()
        });
        results.into_iter().collect()
    }

    fn run_one<F>(&self, chain: u64, chain_fn: &F) -> Result<(), CliError>
    where
        F: Fn(GaugeConfig, &HmcParams, &mut dyn hmc::RecordSink) -> lflow::Result<GaugeConfig>,
    {
        let mut obs = ObservableWriter::new(create(&chain_path(&self.obs, chain, self.chains))?)?;
        let mut ens = match &self.out {
            Some(p) => Some(EnsembleWriter::new(create(&chain_path(p, chain, self.chains))?, self.geom, self.beta)?),
            None => None,
        };
        let params = HmcParams { chain, ..self.params };
        let mut accepted = 0usize;
        let mut sink = |r: &ChainRecord, x: &GaugeConfig| -> lflow::Result<()> {
            obs.write(r)?;
            accepted += usize::from(r.accepted);
            if let Some(e) = ens.as_mut() {
                if (r.traj + 1) % self.save_every == 0 {
                    e.write(x)?;
                }
            }
            if (r.traj + 1) % 100 == 0 {
                log::info!("chain {chain}: {} trajectories, acceptance {:.3}", r.traj + 1, accepted as f64 / (r.traj + 1) as f64);
            }
            Ok(())
        };
        chain_fn(self.start_config(chain), &params, &mut sink)?;
        obs.finish()?;
        if let Some(e) = ens {
            e.finish()?;
        }
        Ok(())
    }
}

fn write_manifest(command: &str, cfg: &Config, seed: Option<u64>, started: f64, ckpt: Option<&[u8]>, outputs: Vec<String>) -> Result<(), CliError> {
    RunManifest {
        artifact_version: manifest::ARTIFACT_VERSION.to_string(),
        command: command.to_string(),
        config: cfg.values().clone(),
        seed,
        started,
        finished: manifest::now(),
        input_checkpoint_hash: ckpt.map(manifest::git_blob_hash),
        outputs,
    }
    .write_all()
}

fn cmd_hmc(cfg: Config) -> Result<(), CliError> {
    let started = manifest::now();
    let geom = geometry(cfg.get("lx")?, cfg.get("ly")?)?;
    let beta: f64 = cfg.get("beta")?;
    let c = coupling(beta)?;
    let plan = ChainPlan::from_config(&cfg, geom, beta)?;
    plan.run(|start, params, sink| hmc::run_chain(start, c, params, sink))?;
    write_manifest("hmc", &cfg, Some(plan.params.seed), started, None, plan.outputs())
}

fn read_checkpoint(path: &str) -> Result<(Vec<u8>, Checkpoint), CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Input(format!("cannot read checkpoint {path}: {e}")))?;
    let ckpt = Checkpoint::from_bytes(&bytes)?;
    Ok((bytes, ckpt))
}

/// Checkpoint model placed on `geom`, transferring weights if needed.
fn model_on(ckpt: &Checkpoint, geom: Geometry) -> Result<FlowModel, CliError> {
    if geom == ckpt.geom {
        Ok(ckpt.model()?)
    } else {
        log::info!("transferring checkpoint weights from {} to {geom}", ckpt.geom);
        Ok(training::transfer_weights(ckpt, geom, &ckpt.arch)?)
    }
}

fn cmd_fthmc(mut cfg: Config) -> Result<(), CliError> {
    let started = manifest::now();
    let (bytes, ckpt) = read_checkpoint(cfg.str("checkpoint"))?;
    let beta = cfg.opt("beta")?.unwrap_or(ckpt.beta);
    let lx = cfg.opt("lx")?.unwrap_or(ckpt.geom.lx());
    let ly = cfg.opt("ly")?.unwrap_or(ckpt.geom.ly());
    // record the values actually used so the manifest is self-contained
    cfg = cfg.with("beta", beta.to_string()).with("lx", lx.to_string()).with("ly", ly.to_string());
    let geom = geometry(lx, ly)?;
    let c = coupling(beta)?;
    let model = model_on(&ckpt, geom)?;
    let plan = ChainPlan::from_config(&cfg, geom, beta)?;
    plan.run(|start, params, sink| fthmc::run_fthmc_chain(start, &model, c, params, sink))?;
    write_manifest("fthmc", &cfg, Some(plan.params.seed), started, Some(&bytes), plan.outputs())
}

fn cmd_train(cfg: Config) -> Result<(), CliError> {
    let started = manifest::now();
    let geom = geometry(cfg.get("lx")?, cfg.get("ly")?)?;
    let arch = Architecture {
        n_layers: cfg.get("n_layers")?,
        mask_pattern: lflow::flow::STRIPES4,
        hidden_channels: cfg.get("hidden_channels")?,
        n_hidden: cfg.get("n_hidden")?,
        kernel_size: cfg.get("kernel_size")?,
    };
    arch.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let out_dir = PathBuf::from(cfg.str("out_dir"));
    let mut tc = TrainConfig::new(cfg.get("beta")?, geom);
    tc.batch_size = cfg.get("batch_size")?;
    tc.n_epochs = cfg.get("epochs")?;
    tc.learning_rate = cfg.get("lr")?;
    tc.seed = cfg.get("seed")?;
    tc.checkpoint_every = cfg.get("checkpoint_every")?;
    tc.eval_batch_size = cfg.get("eval_batch")?;
    tc.clip_norm = cfg.get("clip_norm")?;
    tc.estimator = cfg.get::<GradientEstimator>("estimator")?;
    tc.out_dir = Some(out_dir.clone());
    tc.validate().map_err(|e| CliError::Config(e.to_string()))?;

    std::fs::create_dir_all(&out_dir)?;
    let ckpt_path = out_dir.join("checkpoint.lfck");
    let log_path = out_dir.join("train_log.csv");
    let mut trainer = if cfg.bool("resume")? && ckpt_path.exists() {
        let (_, ckpt) = read_checkpoint(&ckpt_path.display().to_string())?;
        if ckpt.arch != arch || ckpt.geom != geom {
            let mut diff = arch.diff(&ckpt.arch);
            if ckpt.geom != geom {
                diff.push(format!("geometry: {geom} != {}", ckpt.geom));
            }
            return Err(lflow::Error::ArchitectureMismatch(diff).into());
        }
        log::info!("resuming from epoch {}", ckpt.epoch);
        Trainer::resume(tc.clone(), &ckpt)?
    } else {
        Trainer::new(tc.clone(), FlowModel::new(arch, geom, tc.seed)?)?
    };

    // keep the log rows the checkpoint already accounts for
    let kept = if trainer.epoch() > 0 && log_path.exists() {
        let rows = io::read_train_log(File::open(&log_path)?)?;
        rows.into_iter().filter(|r| r.epoch <= trainer.epoch()).collect()
    } else {
        Vec::new()
    };
    let mut log = TrainLogWriter::new(create(&log_path)?)?;
    for r in &kept {
        log.write(r)?;
    }
    let report = (tc.n_epochs / 20).max(1);
    trainer.run(|row| {
        log.write(row)?;
        if row.epoch % report == 0 {
            log::info!("epoch {}: loss {:.4} ess {:.4}", row.epoch, row.loss, row.ess);
        }
        Ok(())
    })?;
    log.finish()?;
    let outputs = vec![ckpt_path.display().to_string(), log_path.display().to_string()];
    write_manifest("train", &cfg, Some(tc.seed), started, None, outputs)
}

fn cmd_transfer(cfg: Config) -> Result<(), CliError> {
    let started = manifest::now();
    let (bytes, ckpt) = read_checkpoint(cfg.str("checkpoint"))?;
    let geom = geometry(cfg.get("lx")?, cfg.get("ly")?)?;
    let model = training::transfer_weights(&ckpt, geom, &ckpt.arch)?;
    let out = PathBuf::from(cfg.str("out"));
    Checkpoint {
        arch: ckpt.arch,
        geom,
        beta: ckpt.beta,
        epoch: ckpt.epoch,
        seed: ckpt.seed,
        params: model.params().clone(),
        adam: None,
    }
    .save(&out)?;
    write_manifest("transfer", &cfg, None, started, Some(&bytes), vec![out.display().to_string()])
}

fn cmd_exact(cfg: Config) -> Result<(), CliError> {
    let geom = geometry(cfg.get("lx")?, cfg.get("ly")?)?;
    let value = lattice::exact_average_plaquette(coupling(cfg.get("beta")?)?, geom)?;
    println!("{value:.16e}");
    Ok(())
}

/// Config of the run that produced `obs`, if its manifest is alongside.
fn producer_config(obs: &Path) -> Option<std::collections::BTreeMap<String, String>> {
    RunManifest::load(&manifest::manifest_path(obs)).ok().map(|m| m.config)
}

fn cmd_analyze(cfg: Config) -> Result<(), CliError> {
    let paths: Vec<PathBuf> = cfg.str("obs").split(',').map(|s| PathBuf::from(s.trim())).collect();
    let mut chains = Vec::with_capacity(paths.len());
    for (k, p) in paths.iter().enumerate() {
        if !p.exists() {
            return Err(CliError::Input(format!("observable file {} does not exist", p.display())));
        }
        chains.push(io::read_observables_file(p, k as u64)?);
    }
    let seed: u64 = cfg.get("seed")?;
    let mut s: Summary = summary::summarize(&chains, cfg.get("skip")?, seed)?;
    let producer = producer_config(&paths[0]);
    fn from<T: std::str::FromStr>(m: &Option<std::collections::BTreeMap<String, String>>, name: &str) -> Option<T> {
        m.as_ref().and_then(|m| m.get(name)).and_then(|v| v.parse().ok())
    }
    s.beta = cfg.opt("beta")?.or_else(|| from(&producer, "beta"));
    s.lx = cfg.opt("lx")?.or_else(|| from(&producer, "lx"));
    s.ly = cfg.opt("ly")?.or_else(|| from(&producer, "ly"));

    if let Some(path) = cfg.opt_str("checkpoint") {
        let (_, ckpt) = read_checkpoint(path)?;
        let beta = s.beta.unwrap_or(ckpt.beta);
        let geom = match (s.lx, s.ly) {
            (Some(lx), Some(ly)) => geometry(lx, ly)?,
            _ => ckpt.geom,
        };
        let model = model_on(&ckpt, geom)?;
        let n: usize = cfg.get("ess_samples")?;
        let samples = fthmc::flow_proposal_sampler(&model, coupling(beta)?, n, &mut lflow::rng::stream(seed, 0))?;
        s.ess = Some(statistics::effective_sample_size(&samples.weights)?);
    }

    let json = serde_json::to_string_pretty(&s)?;
    match cfg.opt_str("out") {
        Some(out) => io::write_atomic(Path::new(out), format!("{json}\n").as_bytes())?,
        None => println!("{json}"),
    }
    if let Some(p) = cfg.opt_str("plot") {
        io::write_atomic(Path::new(p), plot::history_svg(&chains).as_bytes())?;
    }
    Ok(())
}

/// Re-run the command recorded in a manifest with its resolved config.
pub fn replay(manifest_file: &Path) -> Result<(), CliError> {
    let m = RunManifest::load(manifest_file)?;
    if m.artifact_version != manifest::ARTIFACT_VERSION {
        log::warn!("manifest written by version {}, replaying with {}", m.artifact_version, manifest::ARTIFACT_VERSION);
    }
    let schema = schema(&m.command).ok_or_else(|| CliError::Input(format!("manifest names unknown command `{}`", m.command)))?;
    let cfg = Config::from_map(m.config, schema)?;
    run(&m.command, cfg)
}
