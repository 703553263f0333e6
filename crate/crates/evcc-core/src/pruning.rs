//! Adaptive token pruning: importance scoring, top-k retention with a
//! floor, and aggregation of dropped tokens into a learnable-weighted
//! summary token that preserves a gradient path to the dropped content.

use crate::config::PruneConfig;
use crate::error::Result;
use crate::nn::{Linear, Norm};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{topk_indices, Scalar, Tape, Tensor, TensorId};

/// Per-stream pruning parameters: the importance MLP, the summary
/// projection, and the learnable summary weight.
pub struct PruningParams {
    pub norm: Norm,
    pub mlp1: Linear,
    pub mlp2: Linear,
    pub pool_proj: Linear,
    pub gamma: ParamId,
}

impl PruningParams {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        cfg: &PruneConfig,
        rng: &mut Rng,
    ) -> Self {
        PruningParams {
            norm: Norm::init(store, &format!("{name}.ln"), d),
            mlp1: Linear::init(store, &format!("{name}.mlp1"), d, cfg.score_hidden, rng),
            mlp2: Linear::init(store, &format!("{name}.mlp2"), cfg.score_hidden, 1, rng),
            pool_proj: Linear::init(store, &format!("{name}.pool"), d, d, rng),
            gamma: store.push(
                format!("{name}.gamma"),
                Tensor::scalar(T::from_f64(cfg.gamma_init)),
            ),
        }
    }
}

/// Result of pruning one token stream.
pub struct PrunedSequence {
    /// [B, k+1, d]: k kept tokens in original order, summary token last.
    pub tokens: TensorId,
    /// Strictly ascending kept indices per sample, each of length k.
    pub kept_indices: Vec<Vec<usize>>,
    /// Raw importance scores [B, n].
    pub scores: TensorId,
    pub k: usize,
}

/// k = max(N_min, floor(n / r)), clamped to n.
pub fn compute_k(n: usize, cfg: &PruneConfig) -> usize {
    (cfg.n_min.max(n / cfg.r)).min(n)
}

/// Per-token scalar scores: LayerNorm -> linear -> GELU -> linear.
pub fn importance_scores<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &[TensorId],
    params: &PruningParams,
    z: TensorId,
) -> Result<TensorId> {
    let n = params.norm.apply(tape, bound, z)?;
    let h = params.mlp1.apply(tape, bound, n)?;
    let h = tape.gelu(h)?;
    let s = params.mlp2.apply(tape, bound, h)?;
    tape.squeeze_last(s)
}

/// gamma * pool_proj(mean of the dropped tokens); the zero vector when the
/// dropped set is empty.
pub fn summarize_dropped<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &[TensorId],
    params: &PruningParams,
    z: TensorId,
    dropped: &[Vec<usize>],
) -> Result<TensorId> {
    let dims = tape.value(z).dims().to_vec();
    let (b, d) = (dims[0], dims[2]);
    if dropped[0].is_empty() {
        return Ok(tape.constant(Tensor::zeros(&[b, d])));
    }
    let dropped_tokens = tape.gather_tokens(z, dropped.to_vec())?;
    let mean = tape.mean_tokens(dropped_tokens)?;
    let proj = params.pool_proj.apply(tape, bound, mean)?;
    tape.scale_by_scalar(proj, bound[params.gamma.0])
}

/// Score, select top-k, optionally scale kept tokens by sigmoid(score), and
/// append the summary token.
pub fn prune<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &[TensorId],
    params: &PruningParams,
    cfg: &PruneConfig,
    z: TensorId,
) -> Result<PrunedSequence> {
    let dims = tape.value(z).dims().to_vec();
    let (b, n) = (dims[0], dims[1]);
    let k = compute_k(n, cfg);

    let scores = importance_scores(tape, bound, params, z)?;
    let score_vals = tape.value(scores).data().to_vec();

    let mut kept = Vec::with_capacity(b);
    let mut dropped = Vec::with_capacity(b);
    for bi in 0..b {
        let row = &score_vals[bi * n..(bi + 1) * n];
        let keep = topk_indices(row, k)?;
        let keep_set: std::collections::HashSet<usize> = keep.iter().copied().collect();
        let drop: Vec<usize> = (0..n).filter(|i| !keep_set.contains(i)).collect();
        kept.push(keep);
        dropped.push(drop);
    }

    let mut kept_tokens = tape.gather_tokens(z, kept.clone())?;
    if cfg.score_scale {
        let kept_scores = tape.gather_tokens(scores, kept.clone())?;
        let sig = tape.sigmoid(kept_scores)?;
        kept_tokens = tape.row_scale_tokens(kept_tokens, sig)?;
    }

    let summary = summarize_dropped(tape, bound, params, z, &dropped)?;
    let summary_tok = tape.unsqueeze_tokens(summary)?;
    let tokens = tape.concat_tokens(&[kept_tokens, summary_tok])?;

    Ok(PrunedSequence { tokens, kept_indices: kept, scores, k })
}
