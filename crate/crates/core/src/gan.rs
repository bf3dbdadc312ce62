//! Conditional GAN losses and the two sides of the distributed training step.
//!
//! A [`DiscriminatorWorker`] holds one node's private shard and discriminator;
//! a [`GeneratorTrainer`] holds the central generator. The transport layer in
//! [`crate::protocol`] moves auxiliary batches, fake batches and fake-batch
//! gradients between them. [`train_centralized`] runs the same arithmetic
//! in a single graph with no transport, which is how the pooled-data and
//! single-subset baselines are trained.

use std::fmt;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{contract, Error, Result};
use crate::mixture::Shard;
use crate::nn::{BoundParams, DiscriminatorNet, GeneratorNet, Optimizer, OptimizerKind};

/// Mixture prior over nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureWeights(Vec<f64>);

impl MixtureWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(contract(format!("invalid mixture weights {weights:?}")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(contract(format!("mixture weights sum to {total}, not 1")));
        }
        Ok(Self(weights))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn from_sizes(sizes: &[usize]) -> Result<Self> {
        let total: usize = sizes.iter().sum();
        if total == 0 {
            return Err(contract("all shards are empty"));
        }
        Self::new(sizes.iter().map(|&s| s as f64 / total as f64).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn get(&self, j: usize) -> f64 {
        self.0[j]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GLossVariant {
    /// `mean log(1 - D(G(x)))`, minimized.
    #[default]
    Saturating,
    /// `-mean log D(G(x))`, minimized.
    NonSaturating,
}

impl fmt::Display for GLossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GLossVariant::Saturating => "saturating",
            GLossVariant::NonSaturating => "non_saturating",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum WeightMode {
    #[default]
    ShardSize,
    Uniform,
}

/// Row-wise one-hot encoding, `[xs.len(), k]`.
pub fn one_hot<T: Real>(xs: &[usize], k: usize) -> Result<Tensor<T>> {
    if xs.is_empty() {
        return Err(contract("one-hot batch must be nonempty"));
    }
    let mut data = vec![T::zero(); xs.len() * k];
    for (i, &x) in xs.iter().enumerate() {
        if x >= k {
            return Err(contract(format!("component {x} out of range for {k} components")));
        }
        data[i * k + x] = T::one();
    }
    Tensor::matrix(xs.len(), k, data)
}

/// Inverse of [`one_hot`]; rejects rows that are not exactly one-hot.
pub fn decode_one_hot(t: &Tensor<f32>) -> Result<Vec<usize>> {
    if t.shape().len() != 2 {
        return Err(contract(format!("aux batch must be [m, k], got {:?}", t.shape())));
    }
    let k = t.shape()[1];
    t.data()
        .chunks_exact(k)
        .enumerate()
        .map(|(i, row)| {
            let mut hot = None;
            for (j, &v) in row.iter().enumerate() {
                match v {
                    v if v == 1.0 && hot.is_none() => hot = Some(j),
                    0.0 => {}
                    _ => return Err(contract(format!("aux row {i} is not one-hot"))),
                }
            }
            hot.ok_or_else(|| contract(format!("aux row {i} is not one-hot")))
        })
        .collect()
}

/// One node's auxiliary minibatch.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxBatch {
    pub node_id: u16,
    pub round: u32,
    pub xs: Vec<usize>,
}

impl AuxBatch {
    pub fn to_tensor(&self, k: usize) -> Result<Tensor<f32>> {
        one_hot(&self.xs, k)
    }
}

fn check_batch<T: Real>(g: &Graph<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    let (ra, rb) = (g.value(a).rows(), g.value(b).rows());
    if ra != rb {
        return Err(Error::ShapeMismatch {
            op,
            left: g.value(a).shape().to_vec(),
            right: g.value(b).shape().to_vec(),
        });
    }
    Ok(())
}

/// Discriminator loss `-mean[log D(y|x) + log(1 - D(ŷ|x))]` in logit form.
pub fn d_loss<T: Real>(
    g: &mut Graph<T>,
    d: &DiscriminatorNet<T>,
    params: &BoundParams,
    real_y: Var,
    fake_y: Var,
    x: Var,
) -> Result<Var> {
    check_batch(g, "d_loss", real_y, fake_y)?;
    check_batch(g, "d_loss", real_y, x)?;
    let real_logit = d.forward(g, params, real_y, x)?;
    let fake_logit = d.forward(g, params, fake_y, x)?;
    let log_d_real = g.log_sigmoid(real_logit)?;
    let neg_fake = g.neg(fake_logit)?;
    let log_one_minus = g.log_sigmoid(neg_fake)?;
    let a = g.mean(log_d_real)?;
    let b = g.mean(log_one_minus)?;
    let s = g.add(a, b)?;
    g.neg(s)
}

/// One node's generator objective on its fake batch.
pub fn g_loss_from_node<T: Real>(
    g: &mut Graph<T>,
    d: &DiscriminatorNet<T>,
    params: &BoundParams,
    fake_y: Var,
    x: Var,
    variant: GLossVariant,
) -> Result<Var> {
    check_batch(g, "g_loss", fake_y, x)?;
    let logit = d.forward(g, params, fake_y, x)?;
    match variant {
        GLossVariant::Saturating => {
            let neg = g.neg(logit)?;
            let l = g.log_sigmoid(neg)?;
            g.mean(l)
        }
        GLossVariant::NonSaturating => {
            let l = g.log_sigmoid(logit)?;
            let m = g.mean(l)?;
            g.neg(m)
        }
    }
}

/// Hyperparameters shared by every training path.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub components: usize,
    pub batch: usize,
    pub k_d: usize,
    pub iterations: u32,
    pub generator_hidden: Vec<usize>,
    pub discriminator_hidden: Vec<usize>,
    pub dropout: f64,
    pub g_optimizer: OptimizerKind,
    pub d_optimizer: OptimizerKind,
    pub seed_init: u64,
    pub seed_data: u64,
    pub seed_dropout: u64,
    pub g_loss: GLossVariant,
    pub weights: WeightMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            components: 3,
            batch: 64,
            k_d: 1,
            iterations: 5000,
            generator_hidden: vec![64, 64],
            discriminator_hidden: vec![64, 64],
            dropout: 0.5,
            g_optimizer: OptimizerKind::default(),
            d_optimizer: OptimizerKind::default(),
            seed_init: 0,
            seed_data: 0,
            seed_dropout: 0,
            g_loss: GLossVariant::Saturating,
            weights: WeightMode::ShardSize,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.components == 0 || self.batch == 0 || self.k_d == 0 {
            return Err(Error::Config("components, batch and k_d must be at least 1".into()));
        }
        if !(self.dropout > 0.0 && self.dropout < 1.0) {
            return Err(Error::Config(format!("dropout {} outside (0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// SplitMix64 finalizer; derives independent seeds from `(base, stream)`.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_GENERATOR: u64 = u64::MAX;

/// Losses a node reports after the generator phase.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NodeLosses {
    pub d_loss: f32,
    pub g_loss: f32,
}

/// Node-side state: private shard, local discriminator and its optimizer.
#[derive(Debug)]
pub struct DiscriminatorWorker {
    node_id: u16,
    shard: Shard,
    components: usize,
    d: DiscriminatorNet,
    opt: Optimizer,
    rng: ChaCha8Rng,
    g_loss: GLossVariant,
    pending: Option<(Tensor, Vec<f32>)>,
}

impl DiscriminatorWorker {
    pub fn new(node_id: u16, shard: Shard, cfg: &TrainConfig) -> Result<Self> {
        if shard.is_empty() {
            return Err(contract(format!("node {node_id} has an empty shard")));
        }
        if let Some(s) = shard.samples.iter().find(|s| s.x >= cfg.components) {
            return Err(contract(format!(
                "shard sample has component {} >= {}",
                s.x, cfg.components
            )));
        }
        let mut d = DiscriminatorNet::new(cfg.components, &cfg.discriminator_hidden)?;
        d.mlp.init_params(derive_seed(cfg.seed_init, node_id as u64));
        Ok(Self {
            node_id,
            shard,
            components: cfg.components,
            d,
            opt: Optimizer::new(cfg.d_optimizer),
            rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed_data, node_id as u64)),
            g_loss: cfg.g_loss,
            pending: None,
        })
    }

    pub fn node_id(&self) -> u16 {
        self.node_id
    }

    pub fn shard_len(&self) -> usize {
        self.shard.len()
    }

    pub fn discriminator(&self) -> &DiscriminatorNet {
        &self.d
    }

    /// Draws `m` records with replacement from the shard, keeps their real
    /// values locally, and returns the one-hot auxiliary batch for the generator.
    pub fn sample_aux(&mut self, m: usize) -> Result<Tensor> {
        if m == 0 {
            return Err(contract("batch size must be at least 1"));
        }
        let n = self.shard.len();
        let picks: Vec<_> = (0..m)
            .map(|_| self.shard.samples[self.rng.random_range(0..n)])
            .collect();
        let xs: Vec<usize> = picks.iter().map(|s| s.x).collect();
        let aux = one_hot(&xs, self.components)?;
        self.pending = Some((aux.clone(), picks.iter().map(|s| s.y).collect()));
        Ok(aux)
    }

    fn take_pending(&mut self, fake: &Tensor) -> Result<(Tensor, Tensor)> {
        let (aux, real) = self
            .pending
            .take()
            .ok_or_else(|| contract("fake batch arrived without a pending aux batch"))?;
        if fake.shape() != [aux.rows(), 1] {
            return Err(Error::ShapeMismatch {
                op: "fake batch",
                left: vec![aux.rows(), 1],
                right: fake.shape().to_vec(),
            });
        }
        let real = Tensor::matrix(real.len(), 1, real)?;
        Ok((aux, real))
    }

    /// One discriminator ascent step on the pending real batch against `fake`.
    pub fn update(&mut self, fake: &Tensor) -> Result<f32> {
        let (aux, real) = self.take_pending(fake)?;
        let mut g = Graph::new();
        let params = self.d.mlp.bind(&mut g, true);
        let (r, f, x) = (g.constant(real), g.constant(fake.clone()), g.constant(aux));
        let loss = d_loss(&mut g, &self.d, &params, r, f, x)?;
        let value = g.value(loss).data()[0];
        let mut grads = g.backward(loss)?;
        self.d.mlp.store_grads(&params, &mut grads)?;
        self.opt.step(&mut self.d.mlp.params_mut())?;
        self.d.mlp.zero_grad();
        Ok(value)
    }

    /// Gradient of this node's generator objective with respect to `fake`,
    /// plus the node's current losses. The discriminator is not updated.
    pub fn fake_gradient(&mut self, fake: &Tensor) -> Result<(Tensor, NodeLosses)> {
        let (aux, real) = self.take_pending(fake)?;
        let mut g = Graph::new();
        let params = self.d.mlp.bind(&mut g, false);
        let f = g.leaf(&fake.clone().with_grad());
        let x = g.constant(aux);
        let r = g.constant(real);
        let dl = d_loss(&mut g, &self.d, &params, r, f, x)?;
        let d_value = g.value(dl).data()[0];
        let gl = g_loss_from_node(&mut g, &self.d, &params, f, x, self.g_loss)?;
        let g_value = g.value(gl).data()[0];
        let mut grads = g.backward(gl)?;
        let grad = grads
            .take(f)
            .ok_or_else(|| contract("fake batch received no gradient"))?;
        Ok((
            Tensor::new(fake.shape().to_vec(), grad)?,
            NodeLosses {
                d_loss: d_value,
                g_loss: g_value,
            },
        ))
    }
}

struct PendingFake {
    graph: Graph,
    params: BoundParams,
    out: Var,
}

/// Generator-side state. Fake batches for the generator phase keep their
/// graphs until the matching gradient arrives.
pub struct GeneratorTrainer {
    g: GeneratorNet,
    opt: Optimizer,
    rng: ChaCha8Rng,
    pending: Vec<(u16, PendingFake)>,
}

impl fmt::Debug for GeneratorTrainer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GeneratorTrainer")
            .field("steps", &self.opt.steps())
            .field("pending", &self.pending.len())
            .finish()
    }
}

impl GeneratorTrainer {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let mut g = GeneratorNet::new(cfg.components, &cfg.generator_hidden, cfg.dropout)?;
        g.mlp.init_params(derive_seed(cfg.seed_init, STREAM_GENERATOR));
        Ok(Self {
            g,
            opt: Optimizer::new(cfg.g_optimizer),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed_dropout),
            pending: Vec::new(),
        })
    }

    pub fn generator(&self) -> &GeneratorNet {
        &self.g
    }

    pub fn into_generator(self) -> GeneratorNet {
        self.g
    }

    pub fn steps(&self) -> u64 {
        self.opt.steps()
    }

    fn check_aux(&self, aux: &Tensor) -> Result<()> {
        decode_one_hot(aux)?;
        if aux.shape()[1] != self.g.components() {
            return Err(Error::ShapeMismatch {
                op: "aux batch",
                left: vec![aux.rows(), self.g.components()],
                right: aux.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Fake batch for a discriminator update; nothing is retained.
    pub fn generate(&mut self, aux: &Tensor) -> Result<Tensor> {
        self.check_aux(aux)?;
        self.g.sample(aux, &mut self.rng)
    }

    /// Fake batch for the generator update; its graph is kept for `node`.
    pub fn generate_for_update(&mut self, node: u16, aux: &Tensor) -> Result<Tensor> {
        self.check_aux(aux)?;
        if self.pending.iter().any(|(n, _)| *n == node) {
            return Err(contract(format!("node {node} already has a pending fake batch")));
        }
        let mut graph = Graph::new();
        let params = self.g.mlp.bind(&mut graph, true);
        let x = graph.constant(aux.clone());
        let out = self.g.forward(&mut graph, &params, x, &mut self.rng)?;
        let fake = graph.value(out).clone();
        self.pending.push((node, PendingFake { graph, params, out }));
        Ok(fake)
    }

    /// Back-propagates `weight * grad` through the fake batch generated for `node`.
    pub fn accumulate(&mut self, node: u16, grad: &Tensor, weight: f64) -> Result<()> {
        let idx = self
            .pending
            .iter()
            .position(|(n, _)| *n == node)
            .ok_or_else(|| contract(format!("no pending fake batch for node {node}")))?;
        let (_, mut p) = self.pending.swap_remove(idx);
        if grad.shape() != p.graph.value(p.out).shape() {
            return Err(Error::ShapeMismatch {
                op: "fake gradient",
                left: p.graph.value(p.out).shape().to_vec(),
                right: grad.shape().to_vec(),
            });
        }
        let mut grads = p.graph.backward_from(p.out, grad.data().to_vec())?;
        self.g.mlp.accumulate_grads(&p.params, &mut grads, weight as f32)
    }

    /// Applies the accumulated gradient and clears it.
    pub fn step(&mut self) -> Result<()> {
        self.pending.clear();
        self.opt.step(&mut self.g.mlp.params_mut())?;
        self.g.mlp.zero_grad();
        Ok(())
    }

    pub fn discard_pending(&mut self) {
        self.pending.clear();
        self.g.mlp.zero_grad();
    }
}

/// Per-node row of a round report.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NodeReport {
    pub node: u16,
    pub d_loss: f32,
    pub g_loss: f32,
    pub bytes_tx: u64,
    pub bytes_rx: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundReport {
    pub round: u32,
    pub nodes: Vec<NodeReport>,
    /// `Σ_j π_j g_loss_j`.
    pub g_loss: f64,
    pub g_loss_variant: GLossVariant,
}

impl RoundReport {
    pub fn check_finite(&self) -> Result<()> {
        if self.g_loss.is_finite() && self.nodes.iter().all(|n| n.d_loss.is_finite() && n.g_loss.is_finite()) {
            return Ok(());
        }
        let detail = self
            .nodes
            .iter()
            .map(|n| format!("node {} d_loss={} g_loss={}", n.node, n.d_loss, n.g_loss))
            .collect::<Vec<_>>()
            .join("; ");
        Err(Error::NonFinite {
            round: self.round,
            detail,
        })
    }
}

pub const LOSS_CSV_HEADER: &str = "round,node,d_loss,g_loss,bytes_tx,bytes_rx";

pub fn write_loss_csv<W: Write>(out: &mut W, reports: &[RoundReport]) -> Result<()> {
    writeln!(out, "{LOSS_CSV_HEADER}")?;
    for r in reports {
        for n in &r.nodes {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.round, n.node, n.d_loss, n.g_loss, n.bytes_tx, n.bytes_rx
            )?;
        }
    }
    Ok(())
}

/// Trains one generator against one discriminator on a single shard, in one
/// graph per step. The random streams match a one-node distributed run whose
/// node carries the same id.
pub fn train_centralized(cfg: &TrainConfig, shard: Shard) -> Result<(GeneratorNet, Vec<RoundReport>)> {
    cfg.validate()?;
    let node = shard.node_id;
    let mut worker = DiscriminatorWorker::new(node, shard, cfg)?;
    let mut gen = GeneratorTrainer::new(cfg)?;
    let mut reports = Vec::with_capacity(cfg.iterations as usize);
    for round in 0..cfg.iterations {
        for _ in 0..cfg.k_d {
            let aux = worker.sample_aux(cfg.batch)?;
            let fake = gen.generate(&aux)?;
            worker.update(&fake)?;
        }

        let aux = worker.sample_aux(cfg.batch)?;
        let (_, real) = worker.pending.clone().expect("aux just sampled");
        let mut graph = Graph::new();
        let g_params = gen.g.mlp.bind(&mut graph, true);
        let d_params = worker.d.mlp.bind(&mut graph, false);
        let x = graph.constant(aux);
        let fake = gen.g.forward(&mut graph, &g_params, x, &mut gen.rng)?;
        let r = graph.constant(Tensor::matrix(real.len(), 1, real)?);
        let dl = d_loss(&mut graph, &worker.d, &d_params, r, fake, x)?;
        let d_value = graph.value(dl).data()[0];
        let gl = g_loss_from_node(&mut graph, &worker.d, &d_params, fake, x, cfg.g_loss)?;
        let g_value = graph.value(gl).data()[0];
        let mut grads = graph.backward(gl)?;
        worker.pending = None;
        gen.g.mlp.accumulate_grads(&g_params, &mut grads, 1.0)?;
        gen.step()?;

        let report = RoundReport {
            round,
            nodes: vec![NodeReport {
                node,
                d_loss: d_value,
                g_loss: g_value,
                bytes_tx: 0,
                bytes_rx: 0,
            }],
            g_loss: g_value as f64,
            g_loss_variant: cfg.g_loss,
        };
        report.check_finite()?;
        reports.push(report);
    }
    Ok((gen.g, reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::{self, MixtureSpec, ShardMode};

    fn d_with_logit(bias: f32) -> DiscriminatorNet {
        // zero weights, output bias fixes the logit everywhere
        let mut d = DiscriminatorNet::<f32>::new(3, &[4]).unwrap();
        d.mlp.init_params(0);
        for p in d.mlp.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let last = d.mlp.params_mut().pop().unwrap();
        last.data_mut()[0] = bias;
        d
    }

    fn batch(g: &mut Graph, m: usize) -> (Var, Var, Var) {
        let real = g.constant(Tensor::matrix(m, 1, (0..m).map(|i| i as f32 * 0.3 - 1.0).collect()).unwrap());
        let fake = g.constant(Tensor::matrix(m, 1, (0..m).map(|i| 2.0 - i as f32 * 0.1).collect()).unwrap());
        let x = g.constant(one_hot(&(0..m).map(|i| i % 3).collect::<Vec<_>>(), 3).unwrap());
        (real, fake, x)
    }

    #[test]
    fn d_loss_at_half_is_two_log_two() {
        let d = d_with_logit(0.0);
        let mut g = Graph::new();
        let p = d.mlp.bind(&mut g, false);
        let (r, f, x) = batch(&mut g, 5);
        let l = d_loss(&mut g, &d, &p, r, f, x).unwrap();
        assert!((g.value(l).data()[0] as f64 - 2.0 * std::f64::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn d_loss_batch_mismatch() {
        let d = d_with_logit(0.0);
        let mut g = Graph::new();
        let p = d.mlp.bind(&mut g, false);
        let (r, _, x) = batch(&mut g, 5);
        let f = g.constant(Tensor::matrix(4, 1, vec![0.0; 4]).unwrap());
        assert!(d_loss(&mut g, &d, &p, r, f, x).is_err());
    }

    #[test]
    fn g_loss_values() {
        let mut g = Graph::new();
        let d = d_with_logit(0.0);
        let p = d.mlp.bind(&mut g, false);
        let (_, f, x) = batch(&mut g, 4);
        let l = g_loss_from_node(&mut g, &d, &p, f, x, GLossVariant::Saturating).unwrap();
        assert!((g.value(l).data()[0] + std::f32::consts::LN_2).abs() < 1e-6);

        let fooled = d_with_logit(-20.0);
        let mut g = Graph::new();
        let p = fooled.mlp.bind(&mut g, false);
        let (_, f, x) = batch(&mut g, 4);
        let l = g_loss_from_node(&mut g, &fooled, &p, f, x, GLossVariant::Saturating).unwrap();
        assert!(g.value(l).data()[0].abs() < 1e-8);
    }

    #[test]
    fn weights() {
        assert_eq!(
            MixtureWeights::from_sizes(&[1, 1, 2]).unwrap().as_slice(),
            &[0.25, 0.25, 0.5]
        );
        assert!(MixtureWeights::new(vec![0.5, 0.6]).is_err());
        assert!(MixtureWeights::new(vec![]).is_err());
        let u = MixtureWeights::uniform(3);
        let losses = [0.3, -0.7, 1.1];
        let weighted: f64 = losses.iter().enumerate().map(|(j, l)| u.get(j) * l).sum();
        assert!((weighted - losses.iter().sum::<f64>() / 3.0).abs() < 1e-15);
    }

    #[test]
    fn one_hot_validation() {
        let t = one_hot::<f32>(&[2, 0], 3).unwrap();
        assert_eq!(t.data(), &[0., 0., 1., 1., 0., 0.]);
        assert_eq!(decode_one_hot(&t).unwrap(), vec![2, 0]);
        let bad = Tensor::matrix(1, 3, vec![1.0, 1.0, 0.0]).unwrap();
        assert!(decode_one_hot(&bad).is_err());
        assert!(one_hot::<f32>(&[3], 3).is_err());
    }

    #[test]
    fn worker_aux_follows_shard_prior() {
        let spec = MixtureSpec::three_gaussians(true);
        let data = mixture::sample(&spec, 600, 1).unwrap();
        let shards = mixture::make_shards(&data, ShardMode::PerComponent).unwrap();
        let mut w = DiscriminatorWorker::new(1, shards[1].clone(), &TrainConfig::default()).unwrap();
        let aux = w.sample_aux(64).unwrap();
        assert_eq!(decode_one_hot(&aux).unwrap(), vec![1; 64]);
        let fake = Tensor::matrix(64, 1, vec![0.5; 64]).unwrap();
        let (grad, losses) = w.fake_gradient(&fake).unwrap();
        assert_eq!(grad.shape(), &[64, 1]);
        assert!(losses.d_loss.is_finite() && losses.g_loss.is_finite());
        assert!(w.fake_gradient(&fake).is_err());
    }

    #[test]
    fn centralized_run_is_reproducible() {
        let spec = MixtureSpec::three_gaussians(true);
        let data = mixture::sample(&spec, 300, 2).unwrap();
        let cfg = TrainConfig {
            iterations: 20,
            batch: 16,
            ..TrainConfig::default()
        };
        let shard = Shard {
            node_id: 0,
            samples: data,
        };
        let (g1, r1) = train_centralized(&cfg, shard.clone()).unwrap();
        let (g2, r2) = train_centralized(&cfg, shard).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(g1, g2);
        assert!(r1.iter().all(|r| r.check_finite().is_ok()));
    }
}
