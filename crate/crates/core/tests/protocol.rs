use std::thread;

use asyndgan_core::gan::{decode_one_hot, GeneratorTrainer, TrainConfig};
use asyndgan_core::mixture::{self, make_shards, MixtureSpec, Sample, Shard, ShardMode};
use asyndgan_core::protocol::{
    audit_privacy, connect_tcp, decode, encode, inproc_pair, read_transcript, run_discriminator_node,
    run_generator_server, write_transcript, Direction, InProcAcceptor, Link, Message, MsgType, Payload, Phase,
    ServerConfig, TcpAcceptor,
};
use asyndgan_core::Error;

fn shards() -> Vec<Shard> {
    let data = mixture::sample(&MixtureSpec::three_gaussians(true), 600, 1).unwrap();
    make_shards(&data, ShardMode::PerComponent).unwrap()
}

fn train_cfg(iterations: u32) -> TrainConfig {
    TrainConfig {
        iterations,
        batch: 16,
        ..TrainConfig::default()
    }
}

fn server_cfg(tc: &TrainConfig, nodes: usize) -> ServerConfig {
    ServerConfig {
        expected_nodes: nodes,
        iterations: tc.iterations,
        batch: tc.batch,
        k_d: tc.k_d,
        ..ServerConfig::default()
    }
}

#[test]
fn one_round_message_counts() {
    let tc = train_cfg(1);
    let (mut acceptor, connector) = InProcAcceptor::new();
    let mut handles = Vec::new();
    for shard in shards() {
        let mut link = connector.connect().unwrap();
        let tc = tc.clone();
        handles.push(thread::spawn(move || {
            run_discriminator_node(&mut link, shard, &tc, None)
        }));
    }
    let mut trainer = GeneratorTrainer::new(&tc).unwrap();
    let out = run_generator_server(&mut acceptor, &mut trainer, &server_cfg(&tc, 3)).unwrap();
    let mut ids: Vec<u16> = handles
        .into_iter()
        .map(|h| h.join().unwrap().unwrap().node_id)
        .collect();
    ids.sort();
    assert_eq!(ids, vec![0, 1, 2]);

    let t = &out.transcript;
    assert_eq!(t.count(Direction::Inbound, MsgType::Join), 3);
    assert_eq!(t.count(Direction::Outbound, MsgType::JoinAck), 3);
    assert_eq!(t.count(Direction::Outbound, MsgType::RoundBegin), 6);
    assert_eq!(t.count(Direction::Inbound, MsgType::AuxBatch), 6);
    assert_eq!(t.count(Direction::Outbound, MsgType::FakeBatch), 6);
    assert_eq!(t.count(Direction::Inbound, MsgType::FakeGrad), 3);
    assert_eq!(t.count(Direction::Inbound, MsgType::DLoss), 3);
    assert_eq!(t.count(Direction::Outbound, MsgType::Shutdown), 3);
    assert_eq!(t.len(), 3 + 3 + 6 + 6 + 6 + 3 + 3 + 3);
    assert_eq!(out.reports.len(), 1);
    assert_eq!(trainer.steps(), 1);
}

#[test]
fn fake_grad_shape_and_node_conditioning() {
    let tc = train_cfg(3);
    let (mut acceptor, connector) = InProcAcceptor::new();
    let mut handles = Vec::new();
    for shard in shards() {
        let mut link = connector.connect().unwrap();
        let tc = tc.clone();
        let id = shard.node_id;
        handles.push(thread::spawn(move || {
            run_discriminator_node(&mut link, shard, &tc, Some(id))
        }));
    }
    let mut trainer = GeneratorTrainer::new(&tc).unwrap();
    let out = run_generator_server(&mut acceptor, &mut trainer, &server_cfg(&tc, 3)).unwrap();
    for h in handles {
        assert_eq!(h.join().unwrap().unwrap().rounds, 3);
    }
    for e in out.transcript.entries() {
        let msg = decode(&e.frame).unwrap();
        match &msg.payload {
            Payload::FakeGrad(g) => assert_eq!(g.shape(), &[16, 1]),
            Payload::AuxBatch(a) => {
                assert_eq!(a.shape(), &[16, 3]);
                assert!(decode_one_hot(a).unwrap().iter().all(|&x| x == e.endpoint as usize));
            }
            _ => {}
        }
    }
}

fn join_with(requests: &[Option<u16>], nodes: usize) -> Vec<asyndgan_core::Result<u16>> {
    let tc = train_cfg(1);
    let (mut acceptor, connector) = InProcAcceptor::new();
    let all = shards();
    // Links are accepted in connection order.
    let handles: Vec<_> = requests
        .iter()
        .enumerate()
        .map(|(i, &req)| {
            let mut link = connector.connect().unwrap();
            let shard = all[i % all.len()].clone();
            let tc = tc.clone();
            thread::spawn(move || run_discriminator_node(&mut link, shard, &tc, req).map(|s| s.node_id))
        })
        .collect();
    let mut trainer = GeneratorTrainer::new(&tc).unwrap();
    run_generator_server(&mut acceptor, &mut trainer, &server_cfg(&tc, nodes)).unwrap();
    handles.into_iter().map(|h| h.join().unwrap()).collect()
}

#[test]
fn duplicate_node_id_is_rejected() {
    let r = join_with(&[Some(0), Some(0), Some(1)], 2);
    assert_eq!(r[0].as_ref().unwrap(), &0);
    assert!(matches!(r[1], Err(Error::JoinRejected(_))));
    assert_eq!(r[2].as_ref().unwrap(), &1);
}

#[test]
fn out_of_range_id_is_rejected_and_any_takes_next_free() {
    let r = join_with(&[Some(7), Some(1), None], 2);
    assert!(matches!(r[0], Err(Error::JoinRejected(_))));
    assert_eq!(r[1].as_ref().unwrap(), &1);
    assert_eq!(r[2].as_ref().unwrap(), &0);
}

#[test]
fn node_rejects_out_of_order_frames() {
    let (mut gen_side, mut node_side) = inproc_pair();
    let shard = shards().remove(0);
    let tc = train_cfg(1);
    let h = thread::spawn(move || run_discriminator_node(&mut node_side, shard, &tc, None));
    let join = decode(&gen_side.recv(None).unwrap()).unwrap();
    assert_eq!(join.msg_type(), MsgType::Join);
    gen_side
        .send(&encode(&Message::new(0, 0, Payload::JoinAck { accepted: true })))
        .unwrap();
    gen_side
        .send(&encode(&Message::new(
            0,
            0,
            Payload::RoundBegin {
                phase: Phase::Generator,
                batch: 4,
            },
        )))
        .unwrap();
    let aux = decode(&gen_side.recv(None).unwrap()).unwrap();
    assert_eq!(aux.msg_type(), MsgType::AuxBatch);
    gen_side.send(&encode(&Message::new(0, 0, Payload::Shutdown))).unwrap();
    assert!(matches!(h.join().unwrap(), Err(Error::UnexpectedMessage(_))));
}

#[test]
fn tcp_run_and_transcript_dump() {
    let tc = train_cfg(4);
    let mut acceptor = TcpAcceptor::bind("127.0.0.1:0").unwrap();
    let addr = acceptor.local_addr().unwrap();
    let all = shards();
    let real: Vec<Sample> = all.iter().flat_map(|s| s.samples.clone()).collect();
    let mut handles = Vec::new();
    for shard in all {
        let tc = tc.clone();
        handles.push(thread::spawn(move || {
            let mut link = connect_tcp(addr, 3)?;
            run_discriminator_node(&mut link, shard, &tc, None)
        }));
    }
    let mut trainer = GeneratorTrainer::new(&tc).unwrap();
    let out = run_generator_server(&mut acceptor, &mut trainer, &server_cfg(&tc, 3)).unwrap();
    for h in handles {
        h.join().unwrap().unwrap();
    }
    assert_eq!(out.ledger.total(), out.transcript.total_bytes());
    assert!(audit_privacy(&out.transcript, &real).is_empty());

    let mut buf = Vec::new();
    write_transcript(&mut buf, &out.transcript).unwrap();
    let back = read_transcript(&mut buf.as_slice()).unwrap();
    assert_eq!(back, out.transcript);
}

#[test]
fn connect_gives_up_after_retries() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    assert!(connect_tcp(addr, 2).is_err());
}
