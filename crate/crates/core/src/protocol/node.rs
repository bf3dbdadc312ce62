//! Discriminator node runtime: a single-threaded loop answering the generator.

use std::net::ToSocketAddrs;
use std::thread;
use std::time::Duration;

use log::{debug, warn};

use crate::error::{Error, Result};
use crate::gan::{DiscriminatorWorker, TrainConfig};
use crate::mixture::Shard;

use super::transport::{Link, LinkError, TcpLink};
use super::{decode, encode, Message, Payload, Phase, ANY_NODE};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeSummary {
    pub node_id: u16,
    pub rounds: u32,
}

pub(crate) fn link_error(node: u16, e: LinkError) -> Error {
    match e {
        LinkError::Timeout => Error::NodeTimeout { node },
        LinkError::Closed => Error::Disconnected { node },
        LinkError::Decode(d) => Error::Decode(d),
        LinkError::Io(io) => Error::Io(io),
    }
}

/// Connects to the generator, retrying up to `attempts` times with a short backoff.
pub fn connect_tcp<A: ToSocketAddrs + Copy>(addr: A, attempts: u32) -> Result<TcpLink> {
    let mut last = None;
    for attempt in 0..attempts.max(1) {
        match TcpLink::connect(addr) {
            Ok(link) => return Ok(link),
            Err(e) => {
                warn!("connect attempt {} failed: {e}", attempt + 1);
                last = Some(e);
                thread::sleep(Duration::from_millis(200 << attempt.min(4)));
            }
        }
    }
    Err(last.expect("at least one attempt").into())
}

/// Joins the generator and serves rounds until it sends `Shutdown`.
///
/// The shard never leaves this function: outbound frames carry only the
/// one-hot auxiliary batch, the gradient with respect to the received fake
/// batch, and two scalar losses.
pub fn run_discriminator_node(
    link: &mut dyn Link,
    shard: Shard,
    cfg: &TrainConfig,
    requested_id: Option<u16>,
) -> Result<NodeSummary> {
    let requested = requested_id.unwrap_or(ANY_NODE);
    let shard_size = u32::try_from(shard.len()).map_err(|_| Error::Config("shard too large".into()))?;
    let send = |link: &mut dyn Link, msg: Message| link.send(&encode(&msg)).map_err(|e| link_error(msg.node_id, e));

    send(link, Message::new(requested, 0, Payload::Join { shard_size }))?;
    let ack = decode(&link.recv(None).map_err(|e| link_error(requested, e))?)?;
    let id = match ack.payload {
        Payload::JoinAck { accepted: true } => ack.node_id,
        Payload::JoinAck { accepted: false } => {
            return Err(Error::JoinRejected(format!("node id {requested} refused")));
        }
        other => {
            return Err(Error::UnexpectedMessage(format!(
                "expected JoinAck, got {:?}",
                other.msg_type()
            )))
        }
    };
    let mut worker = DiscriminatorWorker::new(id, shard, cfg)?;
    let mut rounds = 0;

    loop {
        let msg = decode(&link.recv(None).map_err(|e| link_error(id, e))?)?;
        let round = msg.round;
        match msg.payload {
            Payload::RoundBegin { phase, batch } => {
                let aux = worker.sample_aux(batch as usize)?;
                send(link, Message::new(id, round, Payload::AuxBatch(aux)))?;
                let reply = decode(&link.recv(None).map_err(|e| link_error(id, e))?)?;
                let Payload::FakeBatch(fake) = reply.payload else {
                    return Err(Error::UnexpectedMessage(format!(
                        "expected FakeBatch, got {:?}",
                        reply.msg_type()
                    )));
                };
                match phase {
                    Phase::Discriminator => {
                        let loss = worker.update(&fake)?;
                        debug!("node {id} round {round}: d_loss {loss}");
                    }
                    Phase::Generator => {
                        let (grad, losses) = worker.fake_gradient(&fake)?;
                        send(link, Message::new(id, round, Payload::FakeGrad(grad)))?;
                        send(
                            link,
                            Message::new(
                                id,
                                round,
                                Payload::DLoss {
                                    d_loss: losses.d_loss,
                                    g_loss: losses.g_loss,
                                },
                            ),
                        )?;
                        rounds += 1;
                    }
                }
            }
            Payload::Shutdown => return Ok(NodeSummary { node_id: id, rounds }),
            other => {
                return Err(Error::UnexpectedMessage(format!(
                    "node {id} got {:?} outside a round",
                    other.msg_type()
                )))
            }
        }
    }
}
