//! Communication-cost accounting.

use super::{tensor_payload_len, HEADER_LEN};

/// Bytes for one fake-batch transfer of `batch` images of `h × w × c` scalars.
pub fn comm_cost(h: u64, w: u64, c: u64, batch: u64, bytes_per_scalar: u64) -> u64 {
    h * w * c * batch * bytes_per_scalar
}

/// Bytes a gradient-sharing scheme moves per client per iteration.
pub fn gradient_sharing_cost(params: u64, bytes_per_scalar: u64) -> u64 {
    params * bytes_per_scalar
}

/// Exact frame bytes one node exchanges with the generator in one round of
/// this protocol, by message type.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProtocolCost {
    pub round_begin: u64,
    pub aux_batch: u64,
    pub fake_batch: u64,
    pub fake_grad: u64,
    pub loss: u64,
}

impl ProtocolCost {
    pub fn sent_by_generator(&self) -> u64 {
        self.round_begin + self.fake_batch
    }

    pub fn received_by_generator(&self) -> u64 {
        self.aux_batch + self.fake_grad + self.loss
    }

    pub fn total(&self) -> u64 {
        self.sent_by_generator() + self.received_by_generator()
    }
}

/// Per-node, per-round bytes for batch size `m`, `k` components and `k_d`
/// discriminator phases per round.
pub fn protocol_cost(m: usize, k: usize, k_d: usize) -> ProtocolCost {
    let frame = |payload: usize| (HEADER_LEN + payload) as u64;
    let phases = (k_d + 1) as u64;
    ProtocolCost {
        round_begin: phases * frame(5),
        aux_batch: phases * frame(tensor_payload_len(&[m, k])),
        fake_batch: phases * frame(tensor_payload_len(&[m, 1])),
        fake_grad: frame(tensor_payload_len(&[m, 1])),
        loss: frame(tensor_payload_len(&[2])),
    }
}
