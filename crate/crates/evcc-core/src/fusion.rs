//! Stacked bidirectional cross-attention with element-wise sigmoid gates.
//!
//! Each block lets the attention-branch tokens attend to the conv-branch
//! tokens and vice versa; both directions read the block's input state, and
//! each attended update is modulated element-wise by a gate computed from
//! the un-normalized stream with a single linear layer (d^2 + d parameters
//! per direction, a quarter of a 4d^2 MLP gate).

use crate::config::FusionConfig;
use crate::error::Result;
use crate::nn::{CrossAttention, Linear};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::{Scalar, Tape, Tensor, TensorId};

/// Gate bias init: sigmoid(-2) ~ 0.12, so fusion starts close to the
/// identity and opens as the gates learn.
pub const GATE_BIAS_INIT: f64 = -2.0;

/// The pair of token streams threaded through the fusion stack.
#[derive(Debug, Clone, Copy)]
pub struct FusionState {
    pub zv: TensorId,
    pub zc: TensorId,
}

pub struct FusionBlockParams {
    pub v2c: CrossAttention,
    pub c2v: CrossAttention,
    pub gate_v: Linear,
    pub gate_c: Linear,
}

impl FusionBlockParams {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Self {
        let block = FusionBlockParams {
            v2c: CrossAttention::init(store, &format!("{name}.v2c"), d, heads, rng),
            c2v: CrossAttention::init(store, &format!("{name}.c2v"), d, heads, rng),
            gate_v: Linear::init(store, &format!("{name}.gate_v"), d, d, rng),
            gate_c: Linear::init(store, &format!("{name}.gate_c"), d, d, rng),
        };
        for gate in [&block.gate_v, &block.gate_c] {
            store.get_mut(gate.b).value = Tensor::full(&[d], T::from_f64(GATE_BIAS_INIT));
        }
        block
    }
}

pub struct FusionParams {
    pub blocks: Vec<FusionBlockParams>,
}

impl FusionParams {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        cfg: &FusionConfig,
        d: usize,
        rng: &mut Rng,
    ) -> Self {
        let blocks = (0..cfg.depth)
            .map(|i| FusionBlockParams::init(store, &format!("fusion.block{i}"), d, cfg.heads, rng))
            .collect();
        FusionParams { blocks }
    }
}

/// Z + sigmoid(W Z + b) .* attended. The gate reads the raw (un-normalized)
/// stream.
pub fn gated_update<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &[TensorId],
    z: TensorId,
    attended: TensorId,
    gate: &Linear,
) -> Result<TensorId> {
    let g = gate.apply(tape, bound, z)?;
    let g = tape.sigmoid(g)?;
    let gated = tape.mul(g, attended)?;
    tape.add(z, gated)
}

/// One bidirectional block; both directions read the input state.
pub fn bidirectional_block<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &[TensorId],
    params: &FusionBlockParams,
    state: FusionState,
) -> Result<FusionState> {
    let attn_v = params.v2c.apply(tape, bound, state.zv, state.zc)?;
    let attn_c = params.c2v.apply(tape, bound, state.zc, state.zv)?;
    Ok(FusionState {
        zv: gated_update(tape, bound, state.zv, attn_v, &params.gate_v)?,
        zc: gated_update(tape, bound, state.zc, attn_c, &params.gate_c)?,
    })
}

/// Apply every block in sequence; depth 0 is the identity.
pub fn fuse<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &[TensorId],
    params: &FusionParams,
    mut state: FusionState,
) -> Result<FusionState> {
    for block in &params.blocks {
        state = bidirectional_block(tape, bound, block, state)?;
    }
    Ok(state)
}

/// Mean over the token axis of both streams: (F_v, F_c).
pub fn global_pool<T: Scalar>(
    tape: &mut Tape<T>,
    state: FusionState,
) -> Result<(TensorId, TensorId)> {
    Ok((tape.mean_tokens(state.zv)?, tape.mean_tokens(state.zc)?))
}

/// Parameters of one gate direction: a single d -> d linear layer.
pub fn gate_param_count(d: usize) -> usize {
    d * d + d
}

/// Parameters of the MLP-gate baseline the single-linear gate replaces.
pub fn mlp_gate_baseline_param_count(d: usize) -> usize {
    4 * d * d
}
