//! Classification heads and the multi-task loss: main cross-entropy plus
//! lambda-weighted mean of the three per-branch auxiliary cross-entropies.

use crate::error::Result;
use crate::nn::Linear;
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::{Scalar, Tape, Tensor, TensorId};

/// Main head on the fused feature; auxiliary heads on F_v, F_c, Z_x.
pub struct Heads {
    pub main: Linear,
    pub aux_v: Linear,
    pub aux_c: Linear,
    pub aux_x: Linear,
}

impl Heads {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        d: usize,
        classes: usize,
        rng: &mut Rng,
    ) -> Self {
        Heads {
            main: Linear::init(store, "heads.main", d, classes, rng),
            aux_v: Linear::init(store, "heads.aux_v", d, classes, rng),
            aux_c: Linear::init(store, "heads.aux_c", d, classes, rng),
            aux_x: Linear::init(store, "heads.aux_x", d, classes, rng),
        }
    }
}

pub struct LossBreakdown {
    pub total: TensorId,
    pub main_ce: TensorId,
    pub aux_ce: [TensorId; 3],
    pub lambda: f64,
}

/// total = main + lambda * mean(aux). Exposed separately so the combination
/// rule can be tested on known scalar values.
pub fn combine_losses<T: Scalar>(
    tape: &mut Tape<T>,
    main_ce: TensorId,
    aux_ce: [TensorId; 3],
    lambda: f64,
) -> Result<TensorId> {
    let sum = tape.add(aux_ce[0], aux_ce[1])?;
    let sum = tape.add(sum, aux_ce[2])?;
    let mean_aux = tape.scale(sum, 1.0 / 3.0)?;
    tape.add_scaled(main_ce, mean_aux, lambda)
}

/// Mean-over-batch cross-entropy per head, combined per the multi-task rule.
pub fn multitask_loss<T: Scalar>(
    tape: &mut Tape<T>,
    main_logits: TensorId,
    aux_logits: [TensorId; 3],
    labels: &[usize],
    lambda: f64,
) -> Result<LossBreakdown> {
    let main_ce = tape.cross_entropy_mean(main_logits, labels)?;
    let aux_ce = [
        tape.cross_entropy_mean(aux_logits[0], labels)?,
        tape.cross_entropy_mean(aux_logits[1], labels)?,
        tape.cross_entropy_mean(aux_logits[2], labels)?,
    ];
    let total = combine_losses(tape, main_ce, aux_ce, lambda)?;
    Ok(LossBreakdown { total, main_ce, aux_ce, lambda })
}

/// Argmax match rate; ties break toward the lower class index.
pub fn accuracy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    let dims = logits.dims();
    let (b, c) = (dims[0], dims[1]);
    debug_assert_eq!(labels.len(), b);
    let mut hits = 0usize;
    for (bi, &y) in labels.iter().enumerate() {
        let row = &logits.data()[bi * c..(bi + 1) * c];
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best == y {
            hits += 1;
        }
    }
    hits as f64 / b as f64
}
