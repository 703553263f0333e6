//! Full model assembly: branches -> shared projection -> token pruning ->
//! bidirectional fusion -> confidence routing -> heads.

use crate::backbones::{
    apply_freeze_masks, BranchOutputs, ConvBranch, HybridBranch, SharedProjection, VitBranch,
};
use crate::config::{Arch, RunConfig};
use crate::error::Result;
use crate::fusion::{fuse, global_pool, FusionParams, FusionState};
use crate::nn::Linear;
use crate::objective::{multitask_loss, Heads, LossBreakdown};
use crate::params::ParamStore;
use crate::pruning::{prune, PrunedSequence, PruningParams};
use crate::rng::Rng;
use crate::router::{route, RouterParams, RoutingDecision};
use crate::tensor::{PadMode, Scalar, Tape, TensorId};

pub struct EvccModel<T: Scalar> {
    pub cfg: RunConfig,
    pub store: ParamStore<T>,
    pub vit: VitBranch,
    pub conv: Option<ConvBranch>,
    pub hybrid: Option<HybridBranch>,
    pub proj: Option<SharedProjection>,
    pub prune_v: Option<PruningParams>,
    pub prune_c: Option<PruningParams>,
    pub fusion: Option<FusionParams>,
    pub router: Option<RouterParams>,
    pub heads: Option<Heads>,
    /// Baseline head for the single-branch architecture, with the final
    /// pre-pooling norm a pre-norm transformer needs.
    pub baseline_head: Option<(crate::nn::Norm, Linear)>,
    pub classes: usize,
}

pub struct ForwardOutput {
    pub main_logits: TensorId,
    /// (aux_v, aux_c, aux_x); absent for the baseline architecture.
    pub aux_logits: Option<[TensorId; 3]>,
    pub routing: Option<RoutingDecision>,
    pub pruned_v: Option<PrunedSequence>,
    pub pruned_c: Option<PrunedSequence>,
    /// Post-fusion pooled features (F_v, F_c).
    pub pooled: Option<(TensorId, TensorId)>,
}

impl<T: Scalar> EvccModel<T> {
    /// Deterministic init from `cfg.seed`.
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::derive(cfg.seed, 0x6d6f64656c);
        let mut store = ParamStore::new();
        let m = &cfg.model;
        let d = m.shared_dim;
        let classes = cfg.data.n_classes;

        let vit = VitBranch::init(&mut store, m, &mut rng);
        let model = match m.arch {
            Arch::VitBaseline => {
                let norm = crate::nn::Norm::init(&mut store, "heads.norm", m.d_v);
                let head = Linear::init(&mut store, "heads.main", m.d_v, classes, &mut rng);
                let head = (norm, head);
                EvccModel {
                    cfg: cfg.clone(),
                    store,
                    vit,
                    conv: None,
                    hybrid: None,
                    proj: None,
                    prune_v: None,
                    prune_c: None,
                    fusion: None,
                    router: None,
                    heads: None,
                    baseline_head: Some(head),
                    classes,
                }
            }
            Arch::Evcc => {
                let conv = ConvBranch::init(&mut store, m, &mut rng);
                let hybrid = HybridBranch::init(&mut store, m, &mut rng);
                let proj = SharedProjection::init(&mut store, m, &mut rng);
                let prune_v =
                    PruningParams::init(&mut store, "prune.v", d, &cfg.prune, &mut rng);
                let prune_c =
                    PruningParams::init(&mut store, "prune.c", d, &cfg.prune, &mut rng);
                let fusion = FusionParams::init(&mut store, &cfg.fusion, d, &mut rng);
                let router = RouterParams::init(&mut store, d, cfg.router_hidden(), &mut rng);
                let heads = Heads::init(&mut store, d, classes, &mut rng);
                EvccModel {
                    cfg: cfg.clone(),
                    store,
                    vit,
                    conv: Some(conv),
                    hybrid: Some(hybrid),
                    proj: Some(proj),
                    prune_v: Some(prune_v),
                    prune_c: Some(prune_c),
                    fusion: Some(fusion),
                    router: Some(router),
                    heads: Some(heads),
                    baseline_head: None,
                    classes,
                }
            }
        };
        let mut model = model;
        apply_freeze_masks(&mut model.store, &model.cfg.model);
        Ok(model)
    }

    /// Register all parameters on a tape.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<TensorId> {
        self.store.bind(tape)
    }

    /// Raw branch outputs projected into the shared space.
    pub fn branch_outputs(
        &self,
        tape: &mut Tape<T>,
        bound: &[TensorId],
        images: TensorId,
    ) -> Result<BranchOutputs> {
        let raw_v = self.vit.forward(tape, bound, images)?;
        let raw_c = self
            .conv
            .as_ref()
            .expect("evcc arch")
            .forward(tape, bound, images, PadMode::Zero)?;
        let raw_x = self
            .hybrid
            .as_ref()
            .expect("evcc arch")
            .forward(tape, bound, images)?;
        self.proj
            .as_ref()
            .expect("evcc arch")
            .apply(tape, bound, raw_v, raw_c, raw_x)
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        bound: &[TensorId],
        images: TensorId,
    ) -> Result<ForwardOutput> {
        if let Some((norm, head)) = &self.baseline_head {
            let tokens = self.vit.forward(tape, bound, images)?;
            let tokens = norm.apply(tape, bound, tokens)?;
            let pooled = tape.mean_tokens(tokens)?;
            let logits = head.apply(tape, bound, pooled)?;
            return Ok(ForwardOutput {
                main_logits: logits,
                aux_logits: None,
                routing: None,
                pruned_v: None,
                pruned_c: None,
                pooled: None,
            });
        }

        let outs = self.branch_outputs(tape, bound, images)?;
        let prune_cfg = &self.cfg.prune;
        let pv = prune(tape, bound, self.prune_v.as_ref().unwrap(), prune_cfg, outs.z_v)?;
        let pc = prune(tape, bound, self.prune_c.as_ref().unwrap(), prune_cfg, outs.z_c)?;

        let state = FusionState { zv: pv.tokens, zc: pc.tokens };
        let fused = fuse(tape, bound, self.fusion.as_ref().unwrap(), state)?;
        let (f_v, f_c) = global_pool(tape, fused)?;

        let router = self.router.as_ref().unwrap();
        let decision = route(tape, bound, router, f_v, f_c, outs.z_x)?;

        let heads = self.heads.as_ref().unwrap();
        let main_logits = heads.main.apply(tape, bound, decision.f_final)?;
        let aux_v = heads.aux_v.apply(tape, bound, f_v)?;
        let aux_c = heads.aux_c.apply(tape, bound, f_c)?;
        let aux_x = heads.aux_x.apply(tape, bound, outs.z_x)?;

        Ok(ForwardOutput {
            main_logits,
            aux_logits: Some([aux_v, aux_c, aux_x]),
            routing: Some(decision),
            pruned_v: Some(pv),
            pruned_c: Some(pc),
            pooled: Some((f_v, f_c)),
        })
    }

    /// Multi-task loss for the full model, plain cross-entropy for the
    /// baseline.
    pub fn loss(
        &self,
        tape: &mut Tape<T>,
        output: &ForwardOutput,
        labels: &[usize],
    ) -> Result<LossBreakdown> {
        match output.aux_logits {
            Some(aux) => multitask_loss(
                tape,
                output.main_logits,
                aux,
                labels,
                self.cfg.loss.lambda,
            ),
            None => {
                let ce = tape.cross_entropy_mean(output.main_logits, labels)?;
                Ok(LossBreakdown {
                    total: ce,
                    main_ce: ce,
                    aux_ce: [ce, ce, ce],
                    lambda: 0.0,
                })
            }
        }
    }

    /// Current value of a pruning stream's summary weight.
    pub fn gamma(&self, stream: &str) -> f64 {
        self.store
            .by_name(&format!("prune.{stream}.gamma"))
            .map(|id| self.store.get(id).value.item().to_f64())
            .unwrap_or(0.0)
    }
}
