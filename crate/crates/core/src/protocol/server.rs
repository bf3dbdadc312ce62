//! Generator-side session handling and the per-round message flow.

use std::time::Duration;

use log::{debug, info, warn};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::gan::{GLossVariant, GeneratorTrainer, MixtureWeights, NodeReport, RoundReport, WeightMode};

use super::audit::{Direction, Transcript};
use super::transport::{Acceptor, Link, LinkError};
use super::{decode, encode, Message, MsgType, Payload, Phase, ANY_NODE};

#[derive(Clone, Debug, PartialEq)]
pub struct ServerConfig {
    pub expected_nodes: usize,
    pub iterations: u32,
    pub batch: usize,
    pub k_d: usize,
    pub weights: WeightMode,
    pub g_loss: GLossVariant,
    pub timeout: Duration,
    /// Service nodes one at a time in id order instead of pipelining each phase.
    pub deterministic: bool,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            expected_nodes: 1,
            iterations: 1,
            batch: 64,
            k_d: 1,
            weights: WeightMode::ShardSize,
            g_loss: GLossVariant::Saturating,
            timeout: Duration::from_secs(30),
            deterministic: false,
        }
    }
}

/// Bytes moved per node over a whole run, including handshake and shutdown.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Ledger {
    /// `(node, bytes sent by the generator, bytes received by the generator)`.
    pub per_node: Vec<(u16, u64, u64)>,
}

impl Ledger {
    pub fn total(&self) -> u64 {
        self.per_node.iter().map(|(_, tx, rx)| tx + rx).sum()
    }
}

#[derive(Debug)]
pub struct ServerOutcome {
    pub reports: Vec<RoundReport>,
    pub transcript: Transcript,
    pub ledger: Ledger,
    pub weights: MixtureWeights,
}

struct Session {
    id: u16,
    link: Box<dyn Link>,
    shard_size: u32,
    tx: u64,
    rx: u64,
}

struct Server<'a> {
    sessions: Vec<Session>,
    transcript: Transcript,
    trainer: &'a mut GeneratorTrainer,
    cfg: &'a ServerConfig,
    weights: MixtureWeights,
}

fn link_error(node: u16, e: LinkError) -> Error {
    match e {
        LinkError::Timeout => Error::NodeTimeout { node },
        LinkError::Closed => Error::Disconnected { node },
        LinkError::Decode(d) => Error::Decode(d),
        LinkError::Io(io) => Error::Io(io),
    }
}

impl Server<'_> {
    fn send(&mut self, idx: usize, msg: &Message) -> Result<()> {
        let bytes = encode(msg);
        let s = &mut self.sessions[idx];
        self.transcript.record(Direction::Outbound, s.id, &bytes);
        s.tx += bytes.len() as u64;
        s.link.send(&bytes).map_err(|e| link_error(s.id, e))
    }

    fn recv(&mut self, idx: usize, want: MsgType, round: u32) -> Result<Message> {
        let s = &mut self.sessions[idx];
        let bytes = s.link.recv(Some(self.cfg.timeout)).map_err(|e| link_error(s.id, e))?;
        self.transcript.record(Direction::Inbound, s.id, &bytes);
        s.rx += bytes.len() as u64;
        let msg = decode(&bytes)?;
        if msg.msg_type() != want || msg.node_id != s.id || msg.round != round {
            return Err(Error::UnexpectedMessage(format!(
                "expected {want:?} for round {round} from node {}, got {:?} for round {} from node {}",
                s.id,
                msg.msg_type(),
                msg.round,
                msg.node_id
            )));
        }
        Ok(msg)
    }

    fn begin(&mut self, idx: usize, round: u32, phase: Phase) -> Result<()> {
        let id = self.sessions[idx].id;
        let batch = self.cfg.batch as u32;
        self.send(idx, &Message::new(id, round, Payload::RoundBegin { phase, batch }))
    }

    fn serve_aux(&mut self, idx: usize, round: u32, phase: Phase) -> Result<()> {
        let id = self.sessions[idx].id;
        let aux = match self.recv(idx, MsgType::AuxBatch, round)?.payload {
            Payload::AuxBatch(t) => t,
            _ => unreachable!("type checked in recv"),
        };
        if aux.rows() != self.cfg.batch {
            return Err(Error::UnexpectedMessage(format!(
                "node {id} sent {} aux rows, expected {}",
                aux.rows(),
                self.cfg.batch
            )));
        }
        let fake = match phase {
            Phase::Discriminator => self.trainer.generate(&aux)?,
            Phase::Generator => self.trainer.generate_for_update(id, &aux)?,
        };
        self.send(idx, &Message::new(id, round, Payload::FakeBatch(fake)))
    }

    fn collect_grad(&mut self, idx: usize, round: u32) -> Result<NodeReport> {
        let id = self.sessions[idx].id;
        let (tx0, rx0) = (self.sessions[idx].tx, self.sessions[idx].rx);
        let grad: Tensor = match self.recv(idx, MsgType::FakeGrad, round)?.payload {
            Payload::FakeGrad(t) => t,
            _ => unreachable!("type checked in recv"),
        };
        let (d_loss, g_loss) = match self.recv(idx, MsgType::DLoss, round)?.payload {
            Payload::DLoss { d_loss, g_loss } => (d_loss, g_loss),
            _ => unreachable!("type checked in recv"),
        };
        let weight = self.weights.get(idx);
        self.trainer.accumulate(id, &grad, weight)?;
        let s = &self.sessions[idx];
        Ok(NodeReport {
            node: id,
            d_loss,
            g_loss,
            bytes_tx: s.tx - tx0,
            bytes_rx: s.rx - rx0,
        })
    }

    fn phase(&mut self, round: u32, phase: Phase) -> Result<Vec<NodeReport>> {
        let n = self.sessions.len();
        let mut reports = Vec::new();
        if self.cfg.deterministic {
            for i in 0..n {
                self.begin(i, round, phase)?;
                self.serve_aux(i, round, phase)?;
                if phase == Phase::Generator {
                    reports.push(self.collect_grad(i, round)?);
                }
            }
        } else {
            for i in 0..n {
                self.begin(i, round, phase)?;
            }
            for i in 0..n {
                self.serve_aux(i, round, phase)?;
            }
            if phase == Phase::Generator {
                for i in 0..n {
                    reports.push(self.collect_grad(i, round)?);
                }
            }
        }
        Ok(reports)
    }

    fn round(&mut self, round: u32) -> Result<RoundReport> {
        let start: Vec<(u64, u64)> = self.sessions.iter().map(|s| (s.tx, s.rx)).collect();
        for _ in 0..self.cfg.k_d {
            self.phase(round, Phase::Discriminator)?;
        }
        let mut nodes = self.phase(round, Phase::Generator)?;
        self.trainer.step()?;
        for (i, r) in nodes.iter_mut().enumerate() {
            r.bytes_tx = self.sessions[i].tx - start[i].0;
            r.bytes_rx = self.sessions[i].rx - start[i].1;
        }
        let g_loss = nodes
            .iter()
            .enumerate()
            .map(|(i, r)| self.weights.get(i) * r.g_loss as f64)
            .sum();
        let report = RoundReport {
            round,
            nodes,
            g_loss,
            g_loss_variant: self.cfg.g_loss,
        };
        report.check_finite()?;
        Ok(report)
    }
}

fn accept_nodes<A: Acceptor + ?Sized>(
    acceptor: &mut A,
    cfg: &ServerConfig,
    transcript: &mut Transcript,
) -> Result<Vec<Session>> {
    let mut sessions: Vec<Session> = Vec::new();
    while sessions.len() < cfg.expected_nodes {
        let mut link = acceptor.accept().map_err(|e| link_error(ANY_NODE, e))?;
        let bytes = link.recv(Some(cfg.timeout)).map_err(|e| link_error(ANY_NODE, e))?;
        let msg = decode(&bytes)?;
        let requested = msg.node_id;
        transcript.record(Direction::Inbound, requested, &bytes);
        let Payload::Join { shard_size } = msg.payload else {
            return Err(Error::UnexpectedMessage(format!(
                "expected Join, got {:?}",
                msg.msg_type()
            )));
        };
        let taken = |id: u16| sessions.iter().any(|s| s.id == id);
        let assigned = if requested == ANY_NODE {
            (0..cfg.expected_nodes as u16).find(|&id| !taken(id))
        } else if (requested as usize) < cfg.expected_nodes && !taken(requested) {
            Some(requested)
        } else {
            None
        };
        let ack_id = assigned.unwrap_or(requested);
        let ack = encode(&Message::new(
            ack_id,
            0,
            Payload::JoinAck {
                accepted: assigned.is_some(),
            },
        ));
        transcript.record(Direction::Outbound, ack_id, &ack);
        let sent = link.send(&ack);
        match assigned {
            Some(id) => {
                sent.map_err(|e| link_error(id, e))?;
                info!("node {id} joined with {shard_size} samples");
                sessions.push(Session {
                    id,
                    link,
                    shard_size,
                    tx: ack.len() as u64,
                    rx: bytes.len() as u64,
                });
            }
            None => warn!("rejected join request for node id {requested}"),
        }
    }
    sessions.sort_by_key(|s| s.id);
    Ok(sessions)
}

/// Accepts `expected_nodes` discriminator nodes, then runs the training
/// rounds: `k_d` discriminator phases followed by one generator phase, each
/// with a barrier across all nodes. A round that times out is retried once.
pub fn run_generator_server<A: Acceptor + ?Sized>(
    acceptor: &mut A,
    trainer: &mut GeneratorTrainer,
    cfg: &ServerConfig,
) -> Result<ServerOutcome> {
    if cfg.expected_nodes == 0 || cfg.expected_nodes >= ANY_NODE as usize {
        return Err(Error::Config(format!("cannot serve {} nodes", cfg.expected_nodes)));
    }
    let mut transcript = Transcript::new();
    let sessions = accept_nodes(acceptor, cfg, &mut transcript)?;
    let weights = match cfg.weights {
        WeightMode::Uniform => MixtureWeights::uniform(sessions.len()),
        WeightMode::ShardSize => {
            MixtureWeights::from_sizes(&sessions.iter().map(|s| s.shard_size as usize).collect::<Vec<_>>())?
        }
    };
    let mut server = Server {
        sessions,
        transcript,
        trainer,
        cfg,
        weights,
    };

    let mut reports = Vec::with_capacity(cfg.iterations as usize);
    for round in 0..cfg.iterations {
        let report = match server.round(round) {
            Ok(r) => r,
            Err(Error::NodeTimeout { node }) => {
                warn!("round {round}: node {node} timed out, retrying once");
                server.trainer.discard_pending();
                server.round(round)?
            }
            Err(e) => return Err(e),
        };
        debug!("round {round}: g_loss {}", report.g_loss);
        reports.push(report);
    }

    for i in 0..server.sessions.len() {
        let id = server.sessions[i].id;
        server.send(i, &Message::new(id, cfg.iterations, Payload::Shutdown))?;
    }
    let ledger = Ledger {
        per_node: server.sessions.iter().map(|s| (s.id, s.tx, s.rx)).collect(),
    };
    Ok(ServerOutcome {
        reports,
        transcript: server.transcript,
        ledger,
        weights: server.weights,
    })
}
