//! Run configuration, the experiment driver and cross-run reports.
//!
//! A config file is plain `key = value` lines; `#` starts a comment and
//! unset keys take their defaults. [`RunConfig::emit`] writes every key, and
//! parsing the result gives back the same config.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::thread;
use std::time::{Duration, Instant};

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gan::{
    derive_seed, one_hot, train_centralized, write_loss_csv, GLossVariant, GeneratorTrainer, RoundReport, TrainConfig,
    WeightMode,
};
use crate::mixture::{self, make_shards, Component, MixtureSpec, Sample, Shard, ShardMode};
use crate::nn::{write_checkpoint, GeneratorNet, OptimizerKind};
use crate::protocol::{
    audit_privacy, connect_tcp, link_error, run_discriminator_node, run_generator_server, write_transcript,
    InProcAcceptor, ServerConfig, ServerOutcome, TcpAcceptor, ANY_NODE,
};

/// Environment variable overriding the artifact root.
pub const RUN_DIR_ENV: &str = "ADGN_RUN_DIR";
/// Histogram window and bin count for all divergence scores.
pub const EVAL_RANGE: (f64, f64) = (-10.0, 10.0);
pub const EVAL_BINS: usize = 100;
/// Upper bound on dumped generator samples.
pub const MAX_EVAL_SAMPLES: usize = 100_000;

pub const CONFIG_FILE: &str = "config.txt";
pub const LOSSES_FILE: &str = "losses.csv";
pub const SAMPLES_FILE: &str = "samples.csv";
pub const HISTOGRAM_FILE: &str = "histogram.csv";
pub const CHECKPOINT_FILE: &str = "generator.ckpt";
pub const TRANSCRIPT_FILE: &str = "transcript.bin";
pub const SUMMARY_FILE: &str = "summary.txt";

const DATASET_STREAM: u64 = u64::MAX - 1;

/// `$ADGN_RUN_DIR`, or `runs` in the working directory.
pub fn runs_root() -> PathBuf {
    std::env::var_os(RUN_DIR_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scenario {
    /// One generator and one discriminator on the union of all shards.
    SynAll,
    /// Centralized training on shard `n` alone.
    SynSubset(usize),
    /// One generator served over the protocol to one discriminator per shard.
    AsynDgan,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scenario::SynAll => f.write_str("syn_all"),
            Scenario::SynSubset(n) => write!(f, "syn_subset:{n}"),
            Scenario::AsynDgan => f.write_str("asyndgan"),
        }
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "syn_all" => Ok(Scenario::SynAll),
            "asyndgan" => Ok(Scenario::AsynDgan),
            _ => match s.strip_prefix("syn_subset:") {
                Some(n) => Ok(Scenario::SynSubset(parse_num("scenario", n)?)),
                None => Err(Error::Config(format!("unknown scenario `{s}`"))),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Transport {
    InProc,
    /// Localhost TCP; the generator binds this address (port 0 picks one).
    Tcp(String),
}

impl fmt::Display for Transport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transport::InProc => f.write_str("inproc"),
            Transport::Tcp(addr) => write!(f, "tcp:{addr}"),
        }
    }
}

impl FromStr for Transport {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inproc" => Ok(Transport::InProc),
            "tcp" => Ok(Transport::Tcp("127.0.0.1:0".into())),
            _ => match s.strip_prefix("tcp:") {
                Some(addr) if !addr.is_empty() => Ok(Transport::Tcp(addr.into())),
                _ => Err(Error::Config(format!("unknown transport `{s}`"))),
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShardKind {
    PerComponent,
    RandomSplit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub scenario: Scenario,
    pub mixture: MixtureSpec,
    pub dataset_size: usize,
    pub shard_mode: ShardKind,
    pub nodes: usize,
    pub batch: usize,
    pub k_d: usize,
    pub iterations: u32,
    pub generator_hidden: Vec<usize>,
    pub discriminator_hidden: Vec<usize>,
    pub dropout: f64,
    pub g_optimizer: OptimizerKind,
    pub d_optimizer: OptimizerKind,
    pub g_loss: GLossVariant,
    pub weights: WeightMode,
    pub seed_init: u64,
    pub seed_data: u64,
    pub seed_dropout: u64,
    pub seed_eval: u64,
    pub transport: Transport,
    pub deterministic: bool,
    pub timeout_secs: u64,
    pub eval_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            scenario: Scenario::AsynDgan,
            mixture: MixtureSpec::three_gaussians(true),
            dataset_size: 30_000,
            shard_mode: ShardKind::PerComponent,
            nodes: 3,
            batch: t.batch,
            k_d: t.k_d,
            iterations: t.iterations,
            generator_hidden: t.generator_hidden,
            discriminator_hidden: t.discriminator_hidden,
            dropout: t.dropout,
            g_optimizer: t.g_optimizer,
            d_optimizer: t.d_optimizer,
            g_loss: t.g_loss,
            weights: t.weights,
            seed_init: 0,
            seed_data: 0,
            seed_dropout: 0,
            seed_eval: 0,
            transport: Transport::InProc,
            deterministic: true,
            timeout_secs: 30,
            eval_samples: MAX_EVAL_SAMPLES,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|item| parse_num(key, item)).collect()
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{v}`"))),
    }
}

fn parse_optimizer(key: &str, v: &str) -> Result<OptimizerKind> {
    let mut parts = v.split_whitespace();
    let name = parts.next().unwrap_or_default();
    let nums: Vec<f64> = parts.map(|p| parse_num(key, p)).collect::<Result<_>>()?;
    match (name, nums.as_slice()) {
        ("adam", &[lr, beta1, beta2, eps]) => Ok(OptimizerKind::Adam { lr, beta1, beta2, eps }),
        ("sgd", &[lr, momentum]) => Ok(OptimizerKind::SgdMomentum { lr, momentum }),
        _ => Err(Error::Config(format!(
            "`{key}`: expected `adam LR BETA1 BETA2 EPS` or `sgd LR MOMENTUM`, got `{v}`"
        ))),
    }
}

fn emit_optimizer(o: &OptimizerKind) -> String {
    match *o {
        OptimizerKind::Adam { lr, beta1, beta2, eps } => format!("adam {lr} {beta1} {beta2} {eps}"),
        OptimizerKind::SgdMomentum { lr, momentum } => format!("sgd {lr} {momentum}"),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        let mut seen = BTreeMap::new();
        let (mut means, mut spreads, mut priors) = (None, None, None);
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let (key, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let (key, v) = (key.trim(), v.trim());
            if seen.insert(key.to_string(), lineno).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", lineno + 1)));
            }
            match key {
                "scenario" => c.scenario = v.parse()?,
                "mixture_means" => means = Some(parse_list::<f64>(key, v)?),
                "mixture_spreads" => spreads = Some(parse_list::<f64>(key, v)?),
                "mixture_priors" => priors = Some(parse_list::<f64>(key, v)?),
                "spread_is_variance" => c.mixture.spread_is_variance = parse_bool(key, v)?,
                "dataset_size" => c.dataset_size = parse_num(key, v)?,
                "shard_mode" => {
                    c.shard_mode = match v {
                        "per_component" => ShardKind::PerComponent,
                        "random_split" => ShardKind::RandomSplit,
                        _ => return Err(Error::Config(format!("unknown shard_mode `{v}`"))),
                    }
                }
                "nodes" => c.nodes = parse_num(key, v)?,
                "batch" => c.batch = parse_num(key, v)?,
                "k_d" => c.k_d = parse_num(key, v)?,
                "iterations" => c.iterations = parse_num(key, v)?,
                "generator_hidden" => c.generator_hidden = parse_list(key, v)?,
                "discriminator_hidden" => c.discriminator_hidden = parse_list(key, v)?,
                "dropout" => c.dropout = parse_num(key, v)?,
                "g_optimizer" => c.g_optimizer = parse_optimizer(key, v)?,
                "d_optimizer" => c.d_optimizer = parse_optimizer(key, v)?,
                "g_loss" => {
                    c.g_loss = match v {
                        "saturating" => GLossVariant::Saturating,
                        "non_saturating" => GLossVariant::NonSaturating,
                        _ => return Err(Error::Config(format!("unknown g_loss `{v}`"))),
                    }
                }
                "weights" => {
                    c.weights = match v {
                        "shard_size" => WeightMode::ShardSize,
                        "uniform" => WeightMode::Uniform,
                        _ => return Err(Error::Config(format!("unknown weights `{v}`"))),
                    }
                }
                "seed_init" => c.seed_init = parse_num(key, v)?,
                "seed_data" => c.seed_data = parse_num(key, v)?,
                "seed_dropout" => c.seed_dropout = parse_num(key, v)?,
                "seed_eval" => c.seed_eval = parse_num(key, v)?,
                "transport" => c.transport = v.parse()?,
                "deterministic" => c.deterministic = parse_bool(key, v)?,
                "timeout_secs" => c.timeout_secs = parse_num(key, v)?,
                "eval_samples" => c.eval_samples = parse_num(key, v)?,
                _ => return Err(Error::Config(format!("line {}: unknown key `{key}`", lineno + 1))),
            }
        }
        if means.is_some() || spreads.is_some() || priors.is_some() {
            let means = means.unwrap_or_else(|| c.mixture.components.iter().map(|m| m.mean).collect());
            let spreads = spreads.unwrap_or_else(|| c.mixture.components.iter().map(|m| m.spread).collect());
            if means.len() != spreads.len() {
                return Err(Error::Config(
                    "mixture_means and mixture_spreads differ in length".into(),
                ));
            }
            let priors = priors.unwrap_or_else(|| vec![1.0 / means.len() as f64; means.len()]);
            let components = means
                .into_iter()
                .zip(spreads)
                .map(|(mean, spread)| Component { mean, spread })
                .collect();
            c.mixture = MixtureSpec::new(components, priors, c.mixture.spread_is_variance)
                .map_err(|e| Error::Config(e.to_string()))?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn emit(&self) -> String {
        let m = &self.mixture;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        kv("scenario", self.scenario.to_string());
        kv(
            "mixture_means",
            join(&m.components.iter().map(|c| c.mean).collect::<Vec<_>>()),
        );
        kv(
            "mixture_spreads",
            join(&m.components.iter().map(|c| c.spread).collect::<Vec<_>>()),
        );
        kv("mixture_priors", join(&m.priors));
        kv("spread_is_variance", m.spread_is_variance.to_string());
        kv("dataset_size", self.dataset_size.to_string());
        kv(
            "shard_mode",
            match self.shard_mode {
                ShardKind::PerComponent => "per_component",
                ShardKind::RandomSplit => "random_split",
            }
            .into(),
        );
        kv("nodes", self.nodes.to_string());
        kv("batch", self.batch.to_string());
        kv("k_d", self.k_d.to_string());
        kv("iterations", self.iterations.to_string());
        kv("generator_hidden", join(&self.generator_hidden));
        kv("discriminator_hidden", join(&self.discriminator_hidden));
        kv("dropout", self.dropout.to_string());
        kv("g_optimizer", emit_optimizer(&self.g_optimizer));
        kv("d_optimizer", emit_optimizer(&self.d_optimizer));
        kv("g_loss", self.g_loss.to_string());
        kv(
            "weights",
            match self.weights {
                WeightMode::ShardSize => "shard_size",
                WeightMode::Uniform => "uniform",
            }
            .into(),
        );
        kv("seed_init", self.seed_init.to_string());
        kv("seed_data", self.seed_data.to_string());
        kv("seed_dropout", self.seed_dropout.to_string());
        kv("seed_eval", self.seed_eval.to_string());
        kv("transport", self.transport.to_string());
        kv("deterministic", self.deterministic.to_string());
        kv("timeout_secs", self.timeout_secs.to_string());
        kv("eval_samples", self.eval_samples.to_string());
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        if self.nodes == 0 || self.nodes >= ANY_NODE as usize {
            return Err(Error::Config(format!("nodes must be in 1..{}", ANY_NODE)));
        }
        if self.dataset_size < self.nodes {
            return Err(Error::Config(format!(
                "dataset_size {} is smaller than nodes {}",
                self.dataset_size, self.nodes
            )));
        }
        if self.shard_mode == ShardKind::PerComponent && self.nodes != self.mixture.len() {
            return Err(Error::Config(format!(
                "per_component sharding needs nodes = {} (one per component), got {}",
                self.mixture.len(),
                self.nodes
            )));
        }
        if let Scenario::SynSubset(n) = self.scenario {
            if n >= self.nodes {
                return Err(Error::Config(format!(
                    "syn_subset:{n} needs n < nodes ({})",
                    self.nodes
                )));
            }
        }
        if self.eval_samples == 0 || self.eval_samples > MAX_EVAL_SAMPLES {
            return Err(Error::Config(format!("eval_samples must be in 1..={MAX_EVAL_SAMPLES}")));
        }
        if self.timeout_secs == 0 {
            return Err(Error::Config("timeout_secs must be positive".into()));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            components: self.mixture.len(),
            batch: self.batch,
            k_d: self.k_d,
            iterations: self.iterations,
            generator_hidden: self.generator_hidden.clone(),
            discriminator_hidden: self.discriminator_hidden.clone(),
            dropout: self.dropout,
            g_optimizer: self.g_optimizer,
            d_optimizer: self.d_optimizer,
            seed_init: self.seed_init,
            seed_data: self.seed_data,
            seed_dropout: self.seed_dropout,
            g_loss: self.g_loss,
            weights: self.weights,
        }
    }

    pub fn server_config(&self) -> ServerConfig {
        ServerConfig {
            expected_nodes: self.nodes,
            iterations: self.iterations,
            batch: self.batch,
            k_d: self.k_d,
            weights: self.weights,
            g_loss: self.g_loss,
            timeout: Duration::from_secs(self.timeout_secs),
            deterministic: self.deterministic,
        }
    }

    /// The full training set, before sharding.
    pub fn dataset(&self) -> Result<Vec<Sample>> {
        mixture::sample(
            &self.mixture,
            self.dataset_size,
            derive_seed(self.seed_data, DATASET_STREAM),
        )
    }

    pub fn shards(&self, dataset: &[Sample]) -> Result<Vec<Shard>> {
        let mode = match self.shard_mode {
            ShardKind::PerComponent => ShardMode::PerComponent,
            ShardKind::RandomSplit => ShardMode::RandomSplit {
                nodes: self.nodes,
                seed: derive_seed(self.seed_data, DATASET_STREAM - 1),
            },
        };
        let shards = make_shards(dataset, mode)?;
        if shards.len() != self.nodes {
            return Err(Error::Config(format!(
                "sharding produced {} shards for {} nodes",
                shards.len(),
                self.nodes
            )));
        }
        Ok(shards)
    }
}

/// Draws `n` samples from `g`, components picked by the mixture priors.
pub fn draw_samples(g: &GeneratorNet, spec: &MixtureSpec, n: usize, seed_eval: u64) -> Result<Vec<Sample>> {
    let mut pick = ChaCha8Rng::seed_from_u64(derive_seed(seed_eval, 1));
    let mut noise = ChaCha8Rng::seed_from_u64(derive_seed(seed_eval, 2));
    let xs: Vec<usize> = (0..n).map(|_| spec.sample_component(&mut pick)).collect();
    let mut out = Vec::with_capacity(n);
    for chunk in xs.chunks(10_000) {
        let ys = g.sample(&one_hot(chunk, spec.len())?, &mut noise)?;
        out.extend(chunk.iter().zip(ys.data()).map(|(&x, &y)| Sample { x, y }));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scores {
    pub js_marginal: f64,
    /// One per component; `ln 2` when the generator produced none for it.
    pub js_components: Vec<f64>,
}

/// Divergences of generated samples against fresh draws from the true
/// mixture (marginal) and from each component.
pub fn score(generated: &[Sample], spec: &MixtureSpec, n_truth: usize, seed_eval: u64) -> Result<Scores> {
    let ys = |s: &[Sample]| s.iter().map(|v| v.y as f64).collect::<Vec<f64>>();
    let truth = mixture::sample(spec, n_truth, derive_seed(seed_eval, 3))?;
    let js_marginal = mixture::js_divergence(&ys(generated), &ys(&truth), EVAL_BINS, EVAL_RANGE)?;
    let mut js_components = Vec::with_capacity(spec.len());
    for j in 0..spec.len() {
        let gen: Vec<f64> = generated.iter().filter(|s| s.x == j).map(|s| s.y as f64).collect();
        if gen.is_empty() {
            js_components.push(std::f64::consts::LN_2);
            continue;
        }
        let truth: Vec<f64> = mixture::sample_conditional(spec, j, n_truth, derive_seed(seed_eval, 4 + j as u64))
            .into_iter()
            .map(f64::from)
            .collect();
        js_components.push(mixture::js_divergence(&gen, &truth, EVAL_BINS, EVAL_RANGE)?);
    }
    Ok(Scores {
        js_marginal,
        js_components,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub scenario: String,
    pub scores: Scores,
    pub bytes_total: u64,
    pub wall_time_secs: f64,
    pub privacy_violations: usize,
    pub files: Vec<String>,
}

impl Summary {
    pub fn emit(&self) -> String {
        let mut s = format!(
            "scenario = {}\njs_marginal = {}\n",
            self.scenario, self.scores.js_marginal
        );
        for (j, v) in self.scores.js_components.iter().enumerate() {
            s.push_str(&format!("js_component_{j} = {v}\n"));
        }
        s.push_str(&format!(
            "bytes_total = {}\nwall_time_secs = {}\nprivacy_violations = {}\nfiles = {}\n",
            self.bytes_total,
            self.wall_time_secs,
            self.privacy_violations,
            self.files.join(",")
        ));
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("bad summary line `{line}`")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            kv.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::Config(format!("summary lacks `{k}`")))
        };
        let mut js_components = Vec::new();
        while let Some(v) = kv.get(&format!("js_component_{}", js_components.len())) {
            js_components.push(parse_num("js_component", v)?);
        }
        Ok(Self {
            scenario: get("scenario")?.to_string(),
            scores: Scores {
                js_marginal: parse_num("js_marginal", get("js_marginal")?)?,
                js_components,
            },
            bytes_total: parse_num("bytes_total", get("bytes_total")?)?,
            wall_time_secs: parse_num("wall_time_secs", get("wall_time_secs")?)?,
            privacy_violations: parse_num("privacy_violations", get("privacy_violations")?)?,
            files: get("files")?
                .split(',')
                .filter(|f| !f.is_empty())
                .map(String::from)
                .collect(),
        })
    }
}

#[derive(Debug)]
pub struct RunArtifact {
    pub dir: PathBuf,
    pub summary: Summary,
    pub reports: Vec<RoundReport>,
    /// Present for protocol runs only.
    pub outcome: Option<ServerOutcome>,
}

/// Trains against one discriminator node per shard over the configured
/// transport, nodes on worker threads and the generator on this one.
pub fn run_distributed(cfg: &RunConfig, shards: Vec<Shard>) -> Result<(GeneratorNet, ServerOutcome)> {
    let tc = cfg.train_config();
    let scfg = cfg.server_config();
    let mut trainer = GeneratorTrainer::new(&tc)?;
    let outcome = thread::scope(|scope| {
        let mut handles = Vec::new();
        let served = match &cfg.transport {
            Transport::InProc => {
                let (mut acceptor, connector) = InProcAcceptor::new();
                for shard in shards {
                    let mut link = connector.connect().map_err(|e| link_error(shard.node_id, e))?;
                    let tc = &tc;
                    handles.push(scope.spawn(move || {
                        let id = shard.node_id;
                        run_discriminator_node(&mut link, shard, tc, Some(id))
                    }));
                }
                drop(connector);
                run_generator_server(&mut acceptor, &mut trainer, &scfg)
            }
            Transport::Tcp(addr) => {
                let mut acceptor = TcpAcceptor::bind(addr.as_str())?;
                let local = acceptor.local_addr()?;
                for shard in shards {
                    let tc = &tc;
                    handles.push(scope.spawn(move || {
                        let mut link = connect_tcp(local, 3)?;
                        let id = shard.node_id;
                        run_discriminator_node(&mut link, shard, tc, Some(id))
                    }));
                }
                run_generator_server(&mut acceptor, &mut trainer, &scfg)
            }
        };
        let mut node_err = None;
        for h in handles {
            match h.join() {
                Ok(Ok(_)) => {}
                Ok(Err(e)) => node_err = node_err.or(Some(e)),
                Err(_) => node_err = node_err.or(Some(Error::Contract("discriminator thread panicked".into()))),
            }
        }
        let outcome = served?;
        match node_err {
            Some(e) => Err(e),
            None => Ok(outcome),
        }
    })?;
    Ok((trainer.into_generator(), outcome))
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

/// Writes the generator's parameters as a named checkpoint.
pub fn save_generator(g: &GeneratorNet, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut out, &g.mlp.named_params("generator"))?;
    out.flush()?;
    Ok(())
}

/// Runs one scenario end to end and writes its artifacts to `dir`.
///
/// `snapshot` is stored verbatim as the run's config file. On failure the
/// directory keeps whatever was written so far.
pub fn run_experiment(cfg: &RunConfig, snapshot: &str, dir: &Path) -> Result<RunArtifact> {
    cfg.validate()?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), snapshot)?;
    let started = Instant::now();
    let dataset = cfg.dataset()?;
    let shards = cfg.shards(&dataset)?;
    let tc = cfg.train_config();
    info!("{}: training for {} rounds", cfg.scenario, cfg.iterations);

    let (g, reports, outcome) = match cfg.scenario {
        Scenario::SynAll => {
            let pooled = Shard {
                node_id: 0,
                samples: shards.into_iter().flat_map(|s| s.samples).collect(),
            };
            let (g, r) = train_centralized(&tc, pooled)?;
            (g, r, None)
        }
        Scenario::SynSubset(n) => {
            let shard = shards.into_iter().nth(n).expect("validated index");
            let (g, r) = train_centralized(&tc, shard)?;
            (g, r, None)
        }
        Scenario::AsynDgan => {
            let (g, o) = run_distributed(cfg, shards)?;
            (g, o.reports.clone(), Some(o))
        }
    };

    let mut files = vec![CONFIG_FILE.to_string()];
    let mut out = create(dir, LOSSES_FILE)?;
    write_loss_csv(&mut out, &reports)?;
    out.flush()?;
    files.push(LOSSES_FILE.into());

    let mut violations = 0;
    let mut bytes_total = 0;
    if let Some(o) = &outcome {
        let mut out = create(dir, TRANSCRIPT_FILE)?;
        write_transcript(&mut out, &o.transcript)?;
        out.flush()?;
        files.push(TRANSCRIPT_FILE.into());
        let found = audit_privacy(&o.transcript, &dataset);
        for v in &found {
            warn!("privacy audit: frame {}: {}", v.frame_index, v.reason);
        }
        violations = found.len();
        bytes_total = o.ledger.total();
    }

    save_generator(&g, &dir.join(CHECKPOINT_FILE))?;
    files.push(CHECKPOINT_FILE.into());

    let samples = draw_samples(&g, &cfg.mixture, cfg.eval_samples, cfg.seed_eval)?;
    let mut out = create(dir, SAMPLES_FILE)?;
    mixture::write_samples_csv(&mut out, &samples)?;
    out.flush()?;
    files.push(SAMPLES_FILE.into());

    let ys: Vec<f64> = samples.iter().map(|s| s.y as f64).collect();
    let mut out = create(dir, HISTOGRAM_FILE)?;
    mixture::write_histogram_csv(&mut out, &ys, EVAL_BINS, EVAL_RANGE)?;
    out.flush()?;
    files.push(HISTOGRAM_FILE.into());

    let scores = score(&samples, &cfg.mixture, cfg.eval_samples, cfg.seed_eval)?;
    let summary = Summary {
        scenario: cfg.scenario.to_string(),
        scores,
        bytes_total,
        wall_time_secs: started.elapsed().as_secs_f64(),
        privacy_violations: violations,
        files,
    };
    fs::write(dir.join(SUMMARY_FILE), summary.emit())?;
    info!(
        "{}: js_marginal {:.4}, per component {:?}",
        summary.scenario, summary.scores.js_marginal, summary.scores.js_components
    );
    Ok(RunArtifact {
        dir: dir.to_path_buf(),
        summary,
        reports,
        outcome,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub run: String,
    pub scenario: String,
    pub scores: Scores,
    pub bytes_total: u64,
    pub wall_time_secs: f64,
}

/// Re-scores each run directory from its config and sample dump. Directories
/// without a summary are skipped with a warning.
pub fn report(dirs: &[PathBuf]) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for dir in dirs {
        let summary_path = dir.join(SUMMARY_FILE);
        if !summary_path.is_file() {
            warn!("skipping {}: no {SUMMARY_FILE}", dir.display());
            continue;
        }
        let summary = Summary::parse(&fs::read_to_string(&summary_path)?)?;
        let cfg = RunConfig::parse(&fs::read_to_string(dir.join(CONFIG_FILE))?)?;
        let samples = mixture::read_samples_csv(BufReader::new(File::open(dir.join(SAMPLES_FILE))?))?;
        rows.push(ReportRow {
            run: dir.display().to_string(),
            scenario: cfg.scenario.to_string(),
            scores: score(&samples, &cfg.mixture, cfg.eval_samples, cfg.seed_eval)?,
            bytes_total: summary.bytes_total,
            wall_time_secs: summary.wall_time_secs,
        });
    }
    Ok(rows)
}

pub const REPORT_HEADER: &str = "run,scenario,js_marginal,js_components,bytes_total,wall_time_secs";

/// One CSV row per run; per-component values are `;`-separated.
pub fn write_report<W: Write>(out: &mut W, rows: &[ReportRow]) -> Result<()> {
    writeln!(out, "{REPORT_HEADER}")?;
    for r in rows {
        let comps = r
            .scores
            .js_components
            .iter()
            .map(|v| format!("{v:.6}"))
            .collect::<Vec<_>>()
            .join(";");
        writeln!(
            out,
            "{},{},{:.6},{},{},{:.3}",
            r.run, r.scenario, r.scores.js_marginal, comps, r.bytes_total, r.wall_time_secs
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::parse(&c.emit()).unwrap(), c);
    }

    #[test]
    fn partial_config_uses_defaults() {
        let c = RunConfig::parse("# quick\nscenario = syn_subset:1\niterations = 10  # short\n").unwrap();
        assert_eq!(c.scenario, Scenario::SynSubset(1));
        assert_eq!(c.iterations, 10);
        assert_eq!(c.batch, 64);
    }

    #[test]
    fn config_rejections() {
        for bad in [
            "scenario = syn_subset:3",
            "nodes = 2",
            "bogus = 1",
            "batch = 1\nbatch = 2",
            "g_optimizer = adam 0.1",
            "transport = udp",
            "dropout = 0",
            "mixture_priors = 0.5,0.6,0.1",
            "eval_samples = 100001",
        ] {
            assert!(matches!(RunConfig::parse(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn custom_mixture_and_optimizer() {
        let text =
            "mixture_means = 0,5\nmixture_spreads = 1,2\nnodes = 2\ng_optimizer = sgd 0.01 0.9\ntransport = tcp\n";
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(c.mixture.priors, vec![0.5, 0.5]);
        assert_eq!(
            c.g_optimizer,
            OptimizerKind::SgdMomentum {
                lr: 0.01,
                momentum: 0.9
            }
        );
        assert_eq!(c.transport, Transport::Tcp("127.0.0.1:0".into()));
        assert_eq!(RunConfig::parse(&c.emit()).unwrap(), c);
    }

    #[test]
    fn summary_round_trips() {
        let s = Summary {
            scenario: "asyndgan".into(),
            scores: Scores {
                js_marginal: 0.0123,
                js_components: vec![0.1, 0.2, 1.0 / 3.0],
            },
            bytes_total: 42,
            wall_time_secs: 1.5,
            privacy_violations: 0,
            files: vec!["a".into(), "b".into()],
        };
        assert_eq!(Summary::parse(&s.emit()).unwrap(), s);
    }
}
