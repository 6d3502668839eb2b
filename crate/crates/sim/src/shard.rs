//! Per-device cost of one feed-forward layer whose weights are split along
//! the hidden (MLP) dimension.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Partial outputs are summed with an all-reduce; every device ends up
    /// holding the full output.
    Allreduce,
    /// Partial outputs are reduce-scattered so each device keeps a shard;
    /// the next layer all-gathers its input.
    ReducescatterAllgather,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShardSpec {
    pub n_way: usize,
    pub batch: usize,
    pub seq: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    pub heads: usize,
    pub strategy: Strategy,
    pub element_size: usize,
}

impl Default for ShardSpec {
    fn default() -> Self {
        Self { n_way: 4, batch: 8, seq: 1024, d_model: 4096, d_mlp: 16384, heads: 64, strategy: Strategy::Allreduce, element_size: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShardCost {
    pub strategy: Strategy,
    /// Bytes sent per device for the layer's collectives.
    pub comm_bytes_per_layer: f64,
    /// Elements of the layer output resident on one device.
    pub peak_output_elems: usize,
    /// Elements of the hidden activation resident on one device.
    pub hidden_elems: usize,
    /// Elements materialised by gathering the input, zero when the input is
    /// already replicated.
    pub gathered_input_elems: usize,
    pub peak_activation_elems: usize,
}

pub fn shard_cost(spec: &ShardSpec) -> Result<ShardCost> {
    let n = spec.n_way;
    if n == 0 || spec.batch == 0 || spec.seq == 0 || spec.d_model == 0 || spec.element_size == 0 {
        return Err(SimError::Contract("all shard dimensions must be positive".into()));
    }
    if !spec.d_mlp.is_multiple_of(n) || !spec.heads.is_multiple_of(n) {
        return Err(SimError::Contract(format!("n_way {n} must divide d_mlp {} and heads {}", spec.d_mlp, spec.heads)));
    }
    let tokens = spec.batch * spec.seq;
    let full = tokens * spec.d_model;
    let comm = 2.0 * (n - 1) as f64 / n as f64 * full as f64 * spec.element_size as f64;
    let hidden = tokens * spec.d_mlp / n;
    let (out, gathered) = match spec.strategy {
        Strategy::Allreduce => (full, 0),
        Strategy::ReducescatterAllgather if n == 1 => (full, 0),
        Strategy::ReducescatterAllgather => (full / n, full),
    };
    Ok(ShardCost {
        strategy: spec.strategy,
        comm_bytes_per_layer: comm,
        peak_output_elems: out,
        hidden_elems: hidden,
        gathered_input_elems: gathered,
        peak_activation_elems: out + hidden.max(gathered),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_device_has_no_comm() {
        for strategy in [Strategy::Allreduce, Strategy::ReducescatterAllgather] {
            let c = shard_cost(&ShardSpec { n_way: 1, strategy, ..Default::default() }).unwrap();
            assert_eq!(c.comm_bytes_per_layer, 0.0);
            assert_eq!(c.peak_output_elems, 8 * 1024 * 4096);
        }
    }

    #[test]
    fn divisibility_is_checked() {
        assert!(shard_cost(&ShardSpec { n_way: 3, ..Default::default() }).is_err());
    }
}
