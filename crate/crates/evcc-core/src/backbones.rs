//! Toy branch networks: a patch-attention branch, a convolutional branch,
//! and a hybrid conv-attention branch, each projected into the shared
//! latent space. Small stand-ins that keep the full interface: token
//! sequences from the first two, a pooled global vector from the third.

use crate::config::ModelConfig;
use crate::error::Result;
use crate::nn::{ConvStage, Linear, SelfBlock};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{PadMode, Scalar, Tape, Tensor, TensorId};

/// The three branch outputs after projection to the shared dim.
pub struct BranchOutputs {
    /// Attention-branch tokens [B, N_v, d].
    pub z_v: TensorId,
    /// Conv-branch tokens [B, N_c, d].
    pub z_c: TensorId,
    /// Hybrid-branch global vector [B, d].
    pub z_x: TensorId,
}

pub struct VitBranch {
    pub patch_embed: Linear,
    pub pos: ParamId,
    pub blocks: Vec<SelfBlock>,
    patch: usize,
}

impl VitBranch {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let p = cfg.patch_size;
        let patch_dim = 3 * p * p;
        let patch_embed = Linear::init(store, "vit.patch", patch_dim, cfg.d_v, rng);
        let pos = store.push(
            "vit.pos",
            Tensor::randn(&[cfg.n_v(), cfg.d_v], 0.02, rng),
        );
        let blocks = (0..cfg.vit_blocks)
            .map(|i| SelfBlock::init(store, &format!("vit.block{i}"), cfg.d_v, cfg.vit_heads, rng))
            .collect();
        VitBranch { patch_embed, pos, blocks, patch: p }
    }

    /// images [B,3,H,W] -> tokens [B, N_v, d_v].
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &[TensorId],
        images: TensorId,
    ) -> Result<TensorId> {
        let patches = tape.image_patches(images, self.patch)?;
        let mut x = self.patch_embed.apply(tape, bound, patches)?;
        x = tape.add_bias(x, bound[self.pos.0])?;
        for block in &self.blocks {
            x = block.apply(tape, bound, x)?;
        }
        Ok(x)
    }
}

pub struct ConvBranch {
    pub stages: Vec<ConvStage>,
}

impl ConvBranch {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let mut stages = Vec::new();
        let mut c_in = 3;
        for (i, (&depth, &dim)) in cfg
            .conv_stage_depths
            .iter()
            .zip(&cfg.conv_stage_dims)
            .enumerate()
        {
            stages.push(ConvStage::init(
                store,
                &format!("conv.stage{i}"),
                c_in,
                dim,
                depth,
                2,
                rng,
            ));
            c_in = dim;
        }
        ConvBranch { stages }
    }

    /// images [B,3,H,W] -> tokens [B, N_c, d_c]. `pad` selects the test-only
    /// circular mode used by the shift-equivariance check.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &[TensorId],
        images: TensorId,
        pad: PadMode,
    ) -> Result<TensorId> {
        let dims = tape.value(images).dims().to_vec();
        let (mut h, mut w) = (dims[2], dims[3]);
        // channel-last token grid of raw pixels
        let mut x = tape.image_patches(images, 1)?;
        for stage in &self.stages {
            let (y, nh, nw) = stage.apply(tape, bound, x, h, w, pad)?;
            x = y;
            h = nh;
            w = nw;
        }
        Ok(x)
    }
}

pub struct HybridBranch {
    pub stem: Vec<ConvStage>,
    pub blocks: Vec<SelfBlock>,
}

impl HybridBranch {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let mut stem = Vec::new();
        let mut c_in = 3;
        for (i, (&depth, &dim)) in cfg
            .hybrid_stem_depths
            .iter()
            .zip(&cfg.hybrid_stem_dims)
            .enumerate()
        {
            let patch = if i == 0 { cfg.hybrid_stem_patch } else { 2 };
            stem.push(ConvStage::init(
                store,
                &format!("hybrid.stem{i}"),
                c_in,
                dim,
                depth,
                patch,
                rng,
            ));
            c_in = dim;
        }
        let blocks = (0..cfg.hybrid_blocks)
            .map(|i| {
                SelfBlock::init(store, &format!("hybrid.block{i}"), cfg.d_x(), cfg.vit_heads, rng)
            })
            .collect();
        HybridBranch { stem, blocks }
    }

    /// images [B,3,H,W] -> pooled vector [B, d_x].
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &[TensorId],
        images: TensorId,
    ) -> Result<TensorId> {
        let dims = tape.value(images).dims().to_vec();
        let (mut h, mut w) = (dims[2], dims[3]);
        let mut x = tape.image_patches(images, 1)?;
        for stage in &self.stem {
            let (y, nh, nw) = stage.apply(tape, bound, x, h, w, PadMode::Zero)?;
            x = y;
            h = nh;
            w = nw;
        }
        for block in &self.blocks {
            x = block.apply(tape, bound, x)?;
        }
        tape.mean_tokens(x)
    }
}

/// The three linear projections into the shared latent space.
pub struct SharedProjection {
    pub proj_v: Linear,
    pub proj_c: Linear,
    pub proj_x: Linear,
}

impl SharedProjection {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let d = cfg.shared_dim;
        SharedProjection {
            proj_v: Linear::init(store, "proj.v", cfg.d_v, d, rng),
            proj_c: Linear::init(store, "proj.c", cfg.d_c(), d, rng),
            proj_x: Linear::init(store, "proj.x", cfg.d_x(), d, rng),
        }
    }

    pub fn apply<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &[TensorId],
        raw_v: TensorId,
        raw_c: TensorId,
        raw_x: TensorId,
    ) -> Result<BranchOutputs> {
        Ok(BranchOutputs {
            z_v: self.proj_v.apply(tape, bound, raw_v)?,
            z_c: self.proj_c.apply(tape, bound, raw_c)?,
            z_x: self.proj_x.apply(tape, bound, raw_x)?,
        })
    }
}

/// Mark the first `frozen_vit_blocks` attention blocks and the first
/// `frozen_conv_stages` stages of the conv and hybrid branches as
/// non-trainable. Returns the number of parameter tensors frozen.
pub fn apply_freeze_masks<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig) -> usize {
    let mut n = 0;
    for i in 0..cfg.frozen_vit_blocks {
        n += store.freeze_prefix(&format!("vit.block{i}."));
    }
    for i in 0..cfg.frozen_conv_stages {
        n += store.freeze_prefix(&format!("conv.stage{i}."));
        n += store.freeze_prefix(&format!("hybrid.stem{i}."));
    }
    n
}
