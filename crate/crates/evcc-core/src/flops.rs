//! Analytical multiply-accumulate accounting.
//!
//! Conventions (mirrored by the hand-count oracle in the tests):
//! - one MAC = one multiply-accumulate; reported FLOPs = 2 * MACs;
//! - a linear layer applied to N rows costs N * d_in * d_out MACs (biases
//!   free);
//! - a depthwise 3x3 conv over an N-cell grid with C channels costs
//!   9 * N * C MACs (edge taps counted as full taps);
//! - the cross-attention product term costs 2 * Nq * Nk * d MACs (scores
//!   plus value mixing), reported separately from the projection MACs
//!   (3*Nk + 2*Nq) * d^2 so the headline reduction ratios can be computed
//!   on the product term alone;
//! - layer norms, activations, residual adds, softmax, and element-wise
//!   gating multiplies count zero MACs.
//!
//! All counts are exact integers from closed-form shape arithmetic and are
//! reported per sample, so they are invariant to batch size.

use crate::config::{PruneConfig, RunConfig};
use crate::error::Result;
use crate::nn::MLP_RATIO;
use crate::pruning::compute_k;

/// MACs of one multi-head cross-attention call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CrossAttentionMacs {
    /// 2 * Nq * Nk * d: attention scores plus value mixing. Independent of
    /// the head count (heads partition d).
    pub attention_product: u64,
    /// QKV and output projections: (3*Nk + 2*Nq) * d^2.
    pub projections: u64,
}

impl CrossAttentionMacs {
    pub fn total(&self) -> u64 {
        self.attention_product + self.projections
    }
}

pub fn cross_attention_macs(nq: usize, nk: usize, d: usize, heads: usize) -> CrossAttentionMacs {
    debug_assert!(heads >= 1 && d.is_multiple_of(heads));
    let (nq, nk, d) = (nq as u64, nk as u64, d as u64);
    CrossAttentionMacs {
        attention_product: 2 * nq * nk * d,
        projections: 3 * nk * d * d + 2 * nq * d * d,
    }
}

/// Pruned-vs-unpruned ratio of the cross-attention product term.
#[derive(Debug, Clone, Copy)]
pub struct PruningReduction {
    /// ((k_v+1) * (k_c+1)) / (N_v * N_c): floors, the N_min clamp, and the
    /// appended summary token included.
    pub exact_ratio: f64,
    /// The continuous 1/r^2 approximation.
    pub ideal_ratio: f64,
    /// Product-term MACs before and after pruning.
    pub baseline_macs: u64,
    pub pruned_macs: u64,
}

impl PruningReduction {
    pub fn exact_reduction(&self) -> f64 {
        1.0 - self.exact_ratio
    }

    pub fn ideal_reduction(&self) -> f64 {
        1.0 - self.ideal_ratio
    }
}

pub fn pruning_reduction(
    n_v: usize,
    n_c: usize,
    d: usize,
    r: usize,
    n_min: usize,
) -> PruningReduction {
    let cfg = PruneConfig {
        r,
        n_min,
        gamma_init: 0.0,
        score_hidden: 1,
        score_scale: false,
    };
    let kv1 = compute_k(n_v, &cfg) + 1;
    let kc1 = compute_k(n_c, &cfg) + 1;
    PruningReduction {
        exact_ratio: (kv1 * kc1) as f64 / (n_v * n_c) as f64,
        ideal_ratio: 1.0 / (r * r) as f64,
        baseline_macs: 2 * (n_v * n_c * d) as u64,
        pruned_macs: 2 * (kv1 * kc1 * d) as u64,
    }
}

/// Per-component MAC counts for one configuration, with an unpruned
/// baseline of the same architecture for comparison.
#[derive(Debug, Clone)]
pub struct FlopReport {
    /// (component, per-sample MACs) in a fixed order.
    pub components: Vec<(String, u64)>,
    pub total: u64,
    pub baseline_components: Vec<(String, u64)>,
    pub baseline_total: u64,
    /// Cross-attention product term for the configured (pruned) and
    /// baseline (unpruned) token counts, across all fusion blocks.
    pub cross_attention_product: u64,
    pub baseline_cross_attention_product: u64,
    /// Fusion token counts, configured (kept+summary) and raw.
    pub tokens_v: usize,
    pub tokens_c: usize,
    pub raw_tokens_v: usize,
    pub raw_tokens_c: usize,
}

impl FlopReport {
    pub fn total_reduction_fraction(&self) -> f64 {
        1.0 - self.total as f64 / self.baseline_total as f64
    }

    pub fn cross_attention_reduction_fraction(&self) -> f64 {
        if self.baseline_cross_attention_product == 0 {
            return 0.0;
        }
        1.0 - self.cross_attention_product as f64 / self.baseline_cross_attention_product as f64
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("component                      MACs/sample      FLOPs/sample\n");
        for (name, macs) in &self.components {
            s.push_str(&format!("{name:<28} {macs:>14} {:>16}\n", 2 * macs));
        }
        s.push_str(&format!(
            "{:<28} {:>14} {:>16}\n",
            "total",
            self.total,
            2 * self.total
        ));
        s.push_str(&format!(
            "{:<28} {:>14} {:>16}\n",
            "total (unpruned baseline)",
            self.baseline_total,
            2 * self.baseline_total
        ));
        s.push_str(&format!(
            "fusion tokens: {}x{} pruned vs {}x{} unpruned\n",
            self.tokens_v, self.tokens_c, self.raw_tokens_v, self.raw_tokens_c
        ));
        s.push_str(&format!(
            "cross-attention product reduction: {:.1}%\n",
            100.0 * self.cross_attention_reduction_fraction()
        ));
        s.push_str(&format!(
            "whole-model reduction:             {:.1}%\n",
            100.0 * self.total_reduction_fraction()
        ));
        s
    }

    /// One key=value line per component, machine readable.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (name, macs) in &self.components {
            s.push_str(&format!("component.{name}.macs={macs}\n"));
        }
        s.push_str(&format!("total.macs={}\n", self.total));
        s.push_str(&format!("baseline.total.macs={}\n", self.baseline_total));
        s.push_str(&format!(
            "cross_attention.product.macs={}\n",
            self.cross_attention_product
        ));
        s.push_str(&format!(
            "baseline.cross_attention.product.macs={}\n",
            self.baseline_cross_attention_product
        ));
        s.push_str(&format!(
            "cross_attention.reduction={:.6}\n",
            self.cross_attention_reduction_fraction()
        ));
        s.push_str(&format!(
            "total.reduction={:.6}\n",
            self.total_reduction_fraction()
        ));
        s
    }
}

/// MACs of one pre-norm transformer block (self-attention + MLP) on n
/// tokens of width d: QKV + output projections, the attention product, and
/// the two MLP linears.
fn self_block_macs(n: usize, d: usize) -> u64 {
    let (n, d) = (n as u64, d as u64);
    4 * n * d * d + 2 * n * n * d + n * d * (MLP_RATIO as u64 * d) * 2
}

/// MACs of one conv stage on an incoming g_in x g_in grid.
fn conv_stage_macs(g_in: usize, c_in: usize, c: usize, depth: usize, patch: usize) -> u64 {
    let g_out = (g_in / patch) as u64;
    let cells = g_out * g_out;
    let down = cells * (patch * patch * c_in) as u64 * c as u64;
    let c64 = c as u64;
    let block = 9 * cells * c64
        + cells * c64 * (MLP_RATIO as u64 * c64)
        + cells * (MLP_RATIO as u64 * c64) * c64;
    down + depth as u64 * block
}

/// Walk the configured architecture and count every component.
pub fn model_flop_report(cfg: &RunConfig) -> Result<FlopReport> {
    cfg.validate()?;
    let m = &cfg.model;
    let d = m.shared_dim;
    let classes = cfg.data.n_classes;
    let n_v = m.n_v();
    let n_c = m.n_c();
    let kv1 = compute_k(n_v, &cfg.prune) + 1;
    let kc1 = compute_k(n_c, &cfg.prune) + 1;

    // branch and projection costs are shared by both rows
    let p = m.patch_size;
    let vit_patch = (n_v * 3 * p * p * m.d_v) as u64;
    let vit_blocks = m.vit_blocks as u64 * self_block_macs(n_v, m.d_v);

    let mut conv = 0u64;
    let mut g = m.image_size;
    let mut c_in = 3usize;
    for (&depth, &dim) in m.conv_stage_depths.iter().zip(&m.conv_stage_dims) {
        conv += conv_stage_macs(g, c_in, dim, depth, 2);
        g /= 2;
        c_in = dim;
    }

    let mut hybrid = 0u64;
    let mut g = m.image_size;
    let mut c_in = 3usize;
    for (i, (&depth, &dim)) in m
        .hybrid_stem_depths
        .iter()
        .zip(&m.hybrid_stem_dims)
        .enumerate()
    {
        let patch = if i == 0 { m.hybrid_stem_patch } else { 2 };
        hybrid += conv_stage_macs(g, c_in, dim, depth, patch);
        g /= patch;
        c_in = dim;
    }
    let hybrid_tokens = g * g;
    hybrid += m.hybrid_blocks as u64 * self_block_macs(hybrid_tokens, m.d_x());

    let projections =
        (n_v * m.d_v * d) as u64 + (n_c * m.d_c() * d) as u64 + (m.d_x() * d) as u64;

    let h_s = cfg.prune.score_hidden;
    let pruning = (n_v * d * h_s + n_v * h_s) as u64
        + (n_c * d * h_s + n_c * h_s) as u64
        + 2 * (d * d) as u64;

    let fusion_for = |tv: usize, tc: usize| -> (u64, u64, u64) {
        let l = cfg.fusion.depth as u64;
        let v2c = cross_attention_macs(tv, tc, d, cfg.fusion.heads);
        let c2v = cross_attention_macs(tc, tv, d, cfg.fusion.heads);
        let gates = ((tv + tc) * d * d) as u64;
        (
            l * (v2c.attention_product + c2v.attention_product),
            l * (v2c.projections + c2v.projections),
            l * gates,
        )
    };
    let (fuse_prod, fuse_proj, fuse_gates) = fusion_for(kv1, kc1);
    let (base_prod, base_proj, base_gates) = fusion_for(n_v, n_c);

    let hidden = cfg.router_hidden();
    let router =
        (3 * d * hidden) as u64 + (hidden * 3) as u64 + hidden as u64 + 3 * (d * d) as u64;
    let heads = (4 * d * classes) as u64;

    let build = |pruning_macs: u64, prod: u64, proj: u64, gates: u64| -> (Vec<(String, u64)>, u64) {
        let comps = vec![
            ("vit.patch_embed".to_string(), vit_patch),
            ("vit.blocks".to_string(), vit_blocks),
            ("conv".to_string(), conv),
            ("hybrid".to_string(), hybrid),
            ("projections".to_string(), projections),
            ("pruning".to_string(), pruning_macs),
            ("fusion.attention_product".to_string(), prod),
            ("fusion.projections".to_string(), proj),
            ("fusion.gates".to_string(), gates),
            ("router".to_string(), router),
            ("heads".to_string(), heads),
        ];
        let total = comps.iter().map(|(_, m)| m).sum();
        (comps, total)
    };
    let (components, total) = build(pruning, fuse_prod, fuse_proj, fuse_gates);
    let (baseline_components, baseline_total) = build(0, base_prod, base_proj, base_gates);

    Ok(FlopReport {
        components,
        total,
        baseline_components,
        baseline_total,
        cross_attention_product: fuse_prod,
        baseline_cross_attention_product: base_prod,
        tokens_v: kv1,
        tokens_c: kc1,
        raw_tokens_v: n_v,
        raw_tokens_c: n_c,
    })
}
