//! Run configuration: flat `key=value` lines with section-dotted keys.
//!
//! The format is dependency-free and diff-friendly; the resolved config is
//! echoed verbatim into every run directory. `#` starts a comment.

use crate::error::{EvccError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    /// Full three-branch model.
    Evcc,
    /// Single attention branch + linear head; calibration baseline.
    VitBaseline,
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub arch: Arch,
    pub image_size: usize,
    pub patch_size: usize,
    pub vit_blocks: usize,
    pub vit_heads: usize,
    pub conv_stage_depths: Vec<usize>,
    pub conv_stage_dims: Vec<usize>,
    pub hybrid_stem_patch: usize,
    pub hybrid_stem_depths: Vec<usize>,
    pub hybrid_stem_dims: Vec<usize>,
    pub hybrid_blocks: usize,
    pub d_v: usize,
    pub shared_dim: usize,
    pub frozen_vit_blocks: usize,
    pub frozen_conv_stages: usize,
}

impl ModelConfig {
    /// Raw token width of the conv branch output.
    pub fn d_c(&self) -> usize {
        *self.conv_stage_dims.last().expect("conv stages non-empty")
    }

    /// Raw width of the hybrid branch output.
    pub fn d_x(&self) -> usize {
        *self.hybrid_stem_dims.last().expect("hybrid stem non-empty")
    }

    /// Token count of the attention branch.
    pub fn n_v(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    /// Token count of the conv branch (one stride-2 downsample per stage).
    pub fn n_c(&self) -> usize {
        let g = self.image_size >> self.conv_stage_depths.len();
        g * g
    }

    /// Token grid side of the hybrid branch after its stem.
    pub fn hybrid_grid(&self) -> usize {
        (self.image_size / self.hybrid_stem_patch) >> (self.hybrid_stem_depths.len() - 1)
    }
}

#[derive(Debug, Clone)]
pub struct PruneConfig {
    pub r: usize,
    pub n_min: usize,
    pub gamma_init: f64,
    pub score_hidden: usize,
    /// Scale kept tokens by sigmoid(score); disabled for the no-prune
    /// equivalence mode.
    pub score_scale: bool,
}

#[derive(Debug, Clone)]
pub struct FusionConfig {
    pub depth: usize,
    pub heads: usize,
}

#[derive(Debug, Clone)]
pub struct RouterConfig {
    /// Hidden width of the router trunk; 0 means "use the shared dim".
    pub hidden: usize,
}

#[derive(Debug, Clone)]
pub struct LossConfig {
    pub lambda: f64,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: String,
    pub eval_every: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataTask {
    Synthetic,
    Cifar,
}

#[derive(Debug, Clone)]
pub struct DataConfig {
    pub task: DataTask,
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub test_per_class: usize,
    pub global_cue: f64,
    pub local_cue: f64,
    pub noise_std: f64,
    pub cifar_path: String,
    pub take_n: usize,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub prune: PruneConfig,
    pub fusion: FusionConfig,
    pub router: RouterConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig {
                arch: Arch::Evcc,
                image_size: 32,
                patch_size: 4,
                vit_blocks: 2,
                vit_heads: 4,
                conv_stage_depths: vec![2, 2],
                conv_stage_dims: vec![32, 64],
                hybrid_stem_patch: 4,
                hybrid_stem_depths: vec![1],
                hybrid_stem_dims: vec![64],
                hybrid_blocks: 1,
                d_v: 64,
                shared_dim: 64,
                frozen_vit_blocks: 0,
                frozen_conv_stages: 0,
            },
            prune: PruneConfig {
                r: 2,
                n_min: 8,
                gamma_init: 0.1,
                score_hidden: 32,
                score_scale: true,
            },
            fusion: FusionConfig { depth: 3, heads: 4 },
            router: RouterConfig { hidden: 0 },
            loss: LossConfig { lambda: 0.1 },
            train: TrainConfig {
                steps: 250,
                batch_size: 16,
                lr: 0.08,
                optimizer: "sgd".into(),
                eval_every: 100,
            },
            data: DataConfig {
                task: DataTask::Synthetic,
                n_classes: 4,
                samples_per_class: 500,
                test_per_class: 100,
                global_cue: 1.0,
                local_cue: 1.0,
                noise_std: 0.05,
                cifar_path: String::new(),
                take_n: 0,
            },
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| EvccError::Config(format!("bad value {v:?} for {key}")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|s| parse_num(key, s.trim()))
        .collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(EvccError::Config(format!("bad bool {v:?} for {key}"))),
    }
}

fn fmt_list(v: &[usize]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    /// Apply one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "model.arch" => {
                self.model.arch = match v {
                    "evcc" => Arch::Evcc,
                    "vit_baseline" => Arch::VitBaseline,
                    _ => {
                        return Err(EvccError::Config(format!(
                            "bad value {v:?} for model.arch (evcc|vit_baseline)"
                        )))
                    }
                }
            }
            "model.image_size" => self.model.image_size = parse_num(key, v)?,
            "model.patch_size" => self.model.patch_size = parse_num(key, v)?,
            "model.vit_blocks" => self.model.vit_blocks = parse_num(key, v)?,
            "model.vit_heads" => self.model.vit_heads = parse_num(key, v)?,
            "model.conv_stage_depths" => self.model.conv_stage_depths = parse_list(key, v)?,
            "model.conv_stage_dims" => self.model.conv_stage_dims = parse_list(key, v)?,
            "model.hybrid_stem_patch" => self.model.hybrid_stem_patch = parse_num(key, v)?,
            "model.hybrid_stem_depths" => self.model.hybrid_stem_depths = parse_list(key, v)?,
            "model.hybrid_stem_dims" => self.model.hybrid_stem_dims = parse_list(key, v)?,
            "model.hybrid_blocks" => self.model.hybrid_blocks = parse_num(key, v)?,
            "model.d_v" => self.model.d_v = parse_num(key, v)?,
            "model.shared_dim" => self.model.shared_dim = parse_num(key, v)?,
            "model.frozen_vit_blocks" => self.model.frozen_vit_blocks = parse_num(key, v)?,
            "model.frozen_conv_stages" => self.model.frozen_conv_stages = parse_num(key, v)?,
            "prune.r" => self.prune.r = parse_num(key, v)?,
            "prune.n_min" => self.prune.n_min = parse_num(key, v)?,
            "prune.gamma_init" => self.prune.gamma_init = parse_num(key, v)?,
            "prune.score_hidden" => self.prune.score_hidden = parse_num(key, v)?,
            "prune.score_scale" => self.prune.score_scale = parse_bool(key, v)?,
            "fusion.depth" => self.fusion.depth = parse_num(key, v)?,
            "fusion.heads" => self.fusion.heads = parse_num(key, v)?,
            "router.hidden" => self.router.hidden = parse_num(key, v)?,
            "loss.lambda" => self.loss.lambda = parse_num(key, v)?,
            "train.steps" => self.train.steps = parse_num(key, v)?,
            "train.batch_size" => self.train.batch_size = parse_num(key, v)?,
            "train.lr" => self.train.lr = parse_num(key, v)?,
            "train.optimizer" => {
                v.parse::<crate::params::OptimKind>()?;
                self.train.optimizer = v.to_string();
            }
            "train.eval_every" => self.train.eval_every = parse_num(key, v)?,
            "data.task" => {
                self.data.task = match v {
                    "synthetic" => DataTask::Synthetic,
                    "cifar" => DataTask::Cifar,
                    _ => {
                        return Err(EvccError::Config(format!(
                            "bad value {v:?} for data.task (synthetic|cifar)"
                        )))
                    }
                }
            }
            "data.n_classes" => self.data.n_classes = parse_num(key, v)?,
            "data.samples_per_class" => self.data.samples_per_class = parse_num(key, v)?,
            "data.test_per_class" => self.data.test_per_class = parse_num(key, v)?,
            "data.global_cue" => self.data.global_cue = parse_num(key, v)?,
            "data.local_cue" => self.data.local_cue = parse_num(key, v)?,
            "data.noise_std" => self.data.noise_std = parse_num(key, v)?,
            "data.cifar_path" => self.data.cifar_path = v.to_string(),
            "data.take_n" => self.data.take_n = parse_num(key, v)?,
            _ => return Err(EvccError::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parse a config file body on top of the defaults.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(EvccError::Config(format!(
                    "line {}: expected key=value, got {raw:?}",
                    lineno + 1
                )));
            };
            cfg.set(key.trim(), value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical echo of every resolved key. Parsing this text reproduces
    /// the config exactly.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let arch = match m.arch {
            Arch::Evcc => "evcc",
            Arch::VitBaseline => "vit_baseline",
        };
        let task = match self.data.task {
            DataTask::Synthetic => "synthetic",
            DataTask::Cifar => "cifar",
        };
        format!(
            "seed={}\n\
             model.arch={arch}\n\
             model.image_size={}\n\
             model.patch_size={}\n\
             model.vit_blocks={}\n\
             model.vit_heads={}\n\
             model.conv_stage_depths={}\n\
             model.conv_stage_dims={}\n\
             model.hybrid_stem_patch={}\n\
             model.hybrid_stem_depths={}\n\
             model.hybrid_stem_dims={}\n\
             model.hybrid_blocks={}\n\
             model.d_v={}\n\
             model.shared_dim={}\n\
             model.frozen_vit_blocks={}\n\
             model.frozen_conv_stages={}\n\
             prune.r={}\n\
             prune.n_min={}\n\
             prune.gamma_init={}\n\
             prune.score_hidden={}\n\
             prune.score_scale={}\n\
             fusion.depth={}\n\
             fusion.heads={}\n\
             router.hidden={}\n\
             loss.lambda={}\n\
             train.steps={}\n\
             train.batch_size={}\n\
             train.lr={}\n\
             train.optimizer={}\n\
             train.eval_every={}\n\
             data.task={task}\n\
             data.n_classes={}\n\
             data.samples_per_class={}\n\
             data.test_per_class={}\n\
             data.global_cue={}\n\
             data.local_cue={}\n\
             data.noise_std={}\n\
             data.cifar_path={}\n\
             data.take_n={}\n",
            self.seed,
            m.image_size,
            m.patch_size,
            m.vit_blocks,
            m.vit_heads,
            fmt_list(&m.conv_stage_depths),
            fmt_list(&m.conv_stage_dims),
            m.hybrid_stem_patch,
            fmt_list(&m.hybrid_stem_depths),
            fmt_list(&m.hybrid_stem_dims),
            m.hybrid_blocks,
            m.d_v,
            m.shared_dim,
            m.frozen_vit_blocks,
            m.frozen_conv_stages,
            self.prune.r,
            self.prune.n_min,
            self.prune.gamma_init,
            self.prune.score_hidden,
            self.prune.score_scale,
            self.fusion.depth,
            self.fusion.heads,
            self.router.hidden,
            self.loss.lambda,
            self.train.steps,
            self.train.batch_size,
            self.train.lr,
            self.train.optimizer,
            self.train.eval_every,
            self.data.n_classes,
            self.data.samples_per_class,
            self.data.test_per_class,
            self.data.global_cue,
            self.data.local_cue,
            self.data.noise_std,
            self.data.cifar_path,
            self.data.take_n,
        )
    }

    /// FNV-1a 64 digest of the canonical text; stored in checkpoints.
    pub fn digest(&self) -> u64 {
        fnv1a64(self.to_text().as_bytes())
    }

    pub fn router_hidden(&self) -> usize {
        if self.router.hidden == 0 {
            self.model.shared_dim
        } else {
            self.router.hidden
        }
    }

    pub fn optimizer_kind(&self) -> crate::params::OptimKind {
        self.train.optimizer.parse().expect("validated")
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.image_size == 0 || m.patch_size == 0 || !m.image_size.is_multiple_of(m.patch_size) {
            return Err(EvccError::Config(format!(
                "image_size {} not divisible by patch_size {}",
                m.image_size, m.patch_size
            )));
        }
        if m.shared_dim == 0 {
            return Err(EvccError::Config("shared_dim must be positive".into()));
        }
        if !m.d_v.is_multiple_of(m.vit_heads) {
            return Err(EvccError::Config(format!(
                "d_v {} not divisible by vit_heads {}",
                m.d_v, m.vit_heads
            )));
        }
        if !m.shared_dim.is_multiple_of(self.fusion.heads) {
            return Err(EvccError::Config(format!(
                "shared_dim {} not divisible by fusion.heads {}",
                m.shared_dim, self.fusion.heads
            )));
        }
        if m.conv_stage_depths.len() != m.conv_stage_dims.len()
            || m.conv_stage_depths.is_empty()
        {
            return Err(EvccError::Config(
                "conv stage depths/dims must be non-empty and the same length".into(),
            ));
        }
        if m.hybrid_stem_depths.len() != m.hybrid_stem_dims.len()
            || m.hybrid_stem_depths.is_empty()
        {
            return Err(EvccError::Config(
                "hybrid stem depths/dims must be non-empty and the same length".into(),
            ));
        }
        if m.image_size >> m.conv_stage_depths.len() == 0 {
            return Err(EvccError::Config(format!(
                "conv stages reduce the {0}x{0} feature map below 1x1",
                m.image_size
            )));
        }
        if !m.image_size.is_multiple_of(m.hybrid_stem_patch) || m.hybrid_grid() == 0 {
            return Err(EvccError::Config(
                "hybrid stem reduces the feature map below 1x1".into(),
            ));
        }
        if !m.d_x().is_multiple_of(m.vit_heads) {
            return Err(EvccError::Config(format!(
                "hybrid dim {} not divisible by vit_heads {}",
                m.d_x(),
                m.vit_heads
            )));
        }
        if m.frozen_vit_blocks > m.vit_blocks {
            return Err(EvccError::Config(format!(
                "frozen_vit_blocks {} exceeds vit_blocks {}",
                m.frozen_vit_blocks, m.vit_blocks
            )));
        }
        if m.frozen_conv_stages > m.conv_stage_depths.len() {
            return Err(EvccError::Config(format!(
                "frozen_conv_stages {} exceeds stage count {}",
                m.frozen_conv_stages,
                m.conv_stage_depths.len()
            )));
        }
        if self.prune.r == 0 {
            return Err(EvccError::Config("prune.r must be >= 1".into()));
        }
        if self.prune.n_min == 0 {
            return Err(EvccError::Config("prune.n_min must be >= 1".into()));
        }
        if self.loss.lambda < 0.0 {
            return Err(EvccError::Config("loss.lambda must be >= 0".into()));
        }
        if self.data.n_classes < 2 {
            return Err(EvccError::Config("data.n_classes must be >= 2".into()));
        }
        if self.train.batch_size == 0 {
            return Err(EvccError::Config("train.batch_size must be >= 1".into()));
        }
        self.train.optimizer.parse::<crate::params::OptimKind>()?;
        Ok(())
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_text();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back.to_text(), text);
        assert_eq!(back.digest(), cfg.digest());
    }

    #[test]
    fn unknown_key_is_config_error() {
        let err = RunConfig::parse("bogus.key=1\n").unwrap_err();
        assert!(matches!(err, EvccError::Config(_)));
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let cfg = RunConfig::parse("# comment\n\nprune.r=4 # trailing\n").unwrap();
        assert_eq!(cfg.prune.r, 4);
    }

    #[test]
    fn indivisible_patch_grid_is_config_error() {
        let mut cfg = RunConfig::default();
        cfg.model.image_size = 30;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn digest_changes_with_content() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        b.prune.r = 4;
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn default_token_counts() {
        let m = RunConfig::default().model;
        assert_eq!(m.n_v(), 64);
        assert_eq!(m.n_c(), 64);
        assert_eq!(m.hybrid_grid(), 8);
        assert_eq!(m.d_c(), 64);
        assert_eq!(m.d_x(), 64);
    }
}
