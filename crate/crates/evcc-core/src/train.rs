//! Training, evaluation, gradient-check, and sweep drivers.
//!
//! Every run is a pure function of (config, seed): batch sampling and
//! augmentation draw from per-step derived rng streams, so resuming from a
//! checkpoint at step t reproduces the uninterrupted run bit-exactly.

use std::path::{Path, PathBuf};

use crate::config::{Arch, DataTask, RunConfig};
use crate::data::augment::augment_batch;
use crate::data::checkpoint::{
    load_checkpoint, load_into_store, save_checkpoint, store_tensors, CheckpointData,
};
use crate::data::cifar::load_cifar_binary;
use crate::data::metrics::{MetricsLog, MetricsRecord};
use crate::data::synthetic::generate_synthetic;
use crate::data::Dataset;
use crate::error::{EvccError, Result};
use crate::gradcheck::{grad_check, GradCheckReport};
use crate::model::EvccModel;
use crate::params::Optimizer;
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};

/// Load the train (stream 0) or test (stream 1) split.
pub fn load_dataset(cfg: &RunConfig, test_split: bool) -> Result<Dataset> {
    match cfg.data.task {
        DataTask::Synthetic => {
            let per_class = if test_split {
                cfg.data.test_per_class
            } else {
                cfg.data.samples_per_class
            };
            generate_synthetic(
                &cfg.data,
                cfg.model.image_size,
                per_class,
                cfg.seed,
                if test_split { 1 } else { 0 },
            )
        }
        DataTask::Cifar => {
            if cfg.data.cifar_path.is_empty() {
                return Err(EvccError::Config(
                    "data.task=cifar requires data.cifar_path".into(),
                ));
            }
            if cfg.model.image_size != 32 {
                return Err(EvccError::Config(
                    "CIFAR images are 32x32; set model.image_size=32".into(),
                ));
            }
            let ds = load_cifar_binary(
                Path::new(&cfg.data.cifar_path),
                cfg.data.take_n,
                false,
            )?;
            if cfg.data.n_classes != ds.n_classes {
                return Err(EvccError::Config(format!(
                    "data.n_classes={} but CIFAR-100 has {} fine classes",
                    cfg.data.n_classes, ds.n_classes
                )));
            }
            Ok(ds)
        }
    }
}

/// Mean statistics of one evaluation pass. No parameter mutation.
pub fn evaluate(
    model: &EvccModel<f32>,
    dataset: &Dataset,
    limit: usize,
    step: u64,
    split: &str,
) -> Result<MetricsRecord> {
    let n = if limit == 0 {
        dataset.len()
    } else {
        limit.min(dataset.len())
    };
    let bs = model.cfg.train.batch_size;
    let mut total = 0.0;
    let mut main = 0.0;
    let mut aux = [0.0f64; 3];
    let mut hits = 0.0;
    let mut conf_sum = 0.0;
    let mut pi_sum = [0.0f64; 3];
    let mut seen = 0usize;

    let mut start = 0;
    while start < n {
        let end = (start + bs).min(n);
        let indices: Vec<usize> = (start..end).collect();
        let (images, labels) = dataset.batch(&indices)?;
        let b = labels.len();

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let x = tape.constant(images);
        let out = model.forward(&mut tape, &bound, x)?;
        let loss = model.loss(&mut tape, &out, &labels)?;

        let w = b as f64;
        total += tape.value(loss.total).item() as f64 * w;
        main += tape.value(loss.main_ce).item() as f64 * w;
        for (i, a) in loss.aux_ce.iter().enumerate() {
            aux[i] += tape.value(*a).item() as f64 * w;
        }
        hits += crate::objective::accuracy(tape.value(out.main_logits), &labels) * w;
        if let Some(routing) = &out.routing {
            for &c in tape.value(routing.conf).data() {
                conf_sum += c as f64;
            }
            let pf = tape.value(routing.pi_final).data();
            for bi in 0..b {
                for j in 0..3 {
                    pi_sum[j] += pf[bi * 3 + j] as f64;
                }
            }
        }
        seen += b;
        start = end;
    }

    let w = seen as f64;
    Ok(MetricsRecord {
        step,
        split: split.to_string(),
        total: total / w,
        main: main / w,
        aux_v: aux[0] / w,
        aux_c: aux[1] / w,
        aux_x: aux[2] / w,
        acc: hits / w,
        conf: conf_sum / w,
        pi_v: pi_sum[0] / w,
        pi_c: pi_sum[1] / w,
        pi_x: pi_sum[2] / w,
        gamma_v: model.gamma("v"),
        gamma_c: model.gamma("c"),
    })
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub final_train: MetricsRecord,
    pub final_test: MetricsRecord,
    pub checkpoint: PathBuf,
    pub metrics_log: PathBuf,
}

/// Samples evaluated at periodic checkpoints during training.
const EVAL_SUBSET: usize = 256;

/// Train per config into `out_dir`; `resume` continues from a checkpoint.
pub fn run_train(cfg: &RunConfig, out_dir: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    run_train_until(cfg, out_dir, resume, None)
}

/// As [`run_train`], but optionally stop and checkpoint after `stop_after`
/// steps while keeping the full-step learning-rate schedule, so a stopped
/// run can be resumed into a bit-exact continuation.
pub fn run_train_until(
    cfg: &RunConfig,
    out_dir: &Path,
    resume: Option<&Path>,
    stop_after: Option<u64>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("config.txt"), cfg.to_text())?;
    let metrics_path = out_dir.join("metrics.log");
    let mut log = MetricsLog::create(&metrics_path)?;

    let train_set = load_dataset(cfg, false)?;
    let test_set = load_dataset(cfg, true)?;

    let mut model = EvccModel::<f32>::new(cfg)?;
    let mut optimizer = Optimizer::new(
        cfg.optimizer_kind(),
        cfg.train.lr,
        cfg.train.steps,
        model.store.len(),
    );

    let mut start_step = 0u64;
    if let Some(path) = resume {
        let ckpt = load_checkpoint(path)?;
        if ckpt.config_digest != cfg.digest() {
            eprintln!(
                "warning: checkpoint config digest {:#018x} != current {:#018x}; continuing",
                ckpt.config_digest,
                cfg.digest()
            );
        }
        load_into_store(&mut model.store, &ckpt)?;
        optimizer.load_state(&model.store, &ckpt.tensor_map());
        start_step = ckpt.step;
    }

    let end_step = stop_after.unwrap_or(cfg.train.steps).min(cfg.train.steps);

    // initial evaluation record (the only record when steps == 0)
    let initial = evaluate(&model, &train_set, EVAL_SUBSET, start_step, "train")?;
    log.append(&initial)?;

    for step in start_step..end_step {
        let mut rng = Rng::derive(cfg.seed, 0x737465 ^ step);
        let indices: Vec<usize> = (0..cfg.train.batch_size)
            .map(|_| rng.below(train_set.len()))
            .collect();
        let (mut images, labels) = train_set.batch(&indices)?;
        augment_batch(&mut images, &mut rng);

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let x = tape.constant(images);
        // a non-finite value anywhere in the step aborts with a diagnostic
        // record; the op-level checks surface the offending operation
        let loss = (|| {
            let out = model.forward(&mut tape, &bound, x)?;
            model.loss(&mut tape, &out, &labels)
        })();
        let loss = match loss {
            Ok(l) => l,
            Err(EvccError::NonFinite(op)) => {
                log.append_raw(&format!("step={step} split=train event=nan_abort op={op}"))?;
                return Err(EvccError::NanAbort {
                    step,
                    detail: format!("non-finite value in {op}"),
                });
            }
            Err(e) => return Err(e),
        };
        let loss_val = tape.value(loss.total).item();
        if !loss_val.is_finite() {
            log.append_raw(&format!("step={step} split=train event=nan_abort"))?;
            return Err(EvccError::NanAbort {
                step,
                detail: format!("training loss = {loss_val}"),
            });
        }
        tape.backward(loss.total)?;

        let grads: Vec<Option<Vec<f32>>> = bound
            .iter()
            .map(|&id| tape.grad(id).map(|g| g.to_vec()))
            .collect();
        optimizer.step(&mut model.store, &grads, step);

        let done = step + 1;
        if cfg.train.eval_every > 0 && done % cfg.train.eval_every == 0 && done < end_step {
            let rec = evaluate(&model, &train_set, EVAL_SUBSET, done, "train")?;
            log.append(&rec)?;
        }
    }

    let final_train = evaluate(&model, &train_set, 0, end_step, "train")?;
    log.append(&final_train)?;
    let final_test = evaluate(&model, &test_set, 0, end_step, "test")?;
    log.append(&final_test)?;

    let checkpoint = out_dir.join("model.ckpt");
    let mut tensors = store_tensors(&model.store);
    tensors.extend(optimizer.state_tensors(&model.store));
    save_checkpoint(&checkpoint, &tensors, end_step, cfg.digest())?;

    Ok(TrainOutcome {
        final_train,
        final_test,
        checkpoint,
        metrics_log: metrics_path,
    })
}

/// Evaluate a checkpoint on the train or test split without mutation.
pub fn run_eval(cfg: &RunConfig, checkpoint: &Path, test_split: bool) -> Result<MetricsRecord> {
    cfg.validate()?;
    let ckpt = load_checkpoint(checkpoint)?;
    if ckpt.config_digest != cfg.digest() {
        eprintln!(
            "warning: checkpoint config digest {:#018x} != current {:#018x}",
            ckpt.config_digest,
            cfg.digest()
        );
    }
    let mut model = EvccModel::<f32>::new(cfg)?;
    load_into_store(&mut model.store, &ckpt)?;
    let dataset = load_dataset(cfg, test_split)?;
    evaluate(
        &model,
        &dataset,
        0,
        ckpt.step,
        if test_split { "test" } else { "train" },
    )
}

/// Restore a model from a checkpoint (helper shared with the FFI layer).
pub fn model_from_checkpoint(cfg: &RunConfig, ckpt: &CheckpointData) -> Result<EvccModel<f32>> {
    let mut model = EvccModel::<f32>::new(cfg)?;
    load_into_store(&mut model.store, ckpt)?;
    Ok(model)
}

/// Gradient-check the full model loss on a 2-sample batch in double
/// precision. Frozen groups are reported as skipped.
pub fn run_gradcheck(cfg: &RunConfig, h: f64, tol: f64) -> Result<GradCheckReport> {
    cfg.validate()?;
    let model = EvccModel::<f64>::new(cfg)?;
    let mut rng = Rng::derive(cfg.seed, 0x6763);
    let images = Tensor::<f64>::randn(&[2, 3, cfg.model.image_size, cfg.model.image_size], 0.5, &mut rng);
    let labels = vec![0usize, 1 % cfg.data.n_classes];

    let mut store = model.store.cast::<f64>();
    // move the parameters out of the model so the closure can rebuild the
    // graph against the perturbed store on every evaluation
    let build = |tape: &mut Tape<f64>, bound: &[crate::tensor::TensorId]| {
        let x = tape.constant(images.clone());
        let out = model_forward_with(&model, tape, bound, x)?;
        let loss = model.loss(tape, &out, &labels)?;
        Ok(loss.total)
    };
    grad_check(&mut store, h, tol, build)
}

fn model_forward_with(
    model: &EvccModel<f64>,
    tape: &mut Tape<f64>,
    bound: &[crate::tensor::TensorId],
    images: crate::tensor::TensorId,
) -> Result<crate::model::ForwardOutput> {
    model.forward(tape, bound, images)
}

/// One sweep cell result.
pub struct SweepCell {
    pub value: String,
    pub seed: u64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub total_macs: u64,
    pub cross_attention_macs: u64,
    pub error: Option<String>,
}

pub const SWEEP_KNOBS: [&str; 3] = ["loss.lambda", "fusion.depth", "prune.r"];

/// Run train+eval per (value, seed) cell; cell failures are recorded and
/// the sweep continues.
pub fn run_sweep(
    base: &RunConfig,
    knob: &str,
    values: &[String],
    seeds: &[u64],
    out_dir: &Path,
) -> Result<Vec<SweepCell>> {
    if !SWEEP_KNOBS.contains(&knob) {
        return Err(EvccError::Config(format!(
            "sweep knob must be one of {SWEEP_KNOBS:?}, got {knob:?}"
        )));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut cells = Vec::new();
    for value in values {
        for &seed in seeds {
            let mut cfg = base.clone();
            let cell = match cfg
                .set(knob, value)
                .and_then(|_| {
                    cfg.seed = seed;
                    cfg.validate()
                })
                .and_then(|_| {
                    let dir = out_dir.join(format!("{}_{}_s{}", knob.replace('.', "_"), value, seed));
                    run_train(&cfg, &dir, None)
                }) {
                Ok(outcome) => {
                    let report = crate::flops::model_flop_report(&cfg)?;
                    SweepCell {
                        value: value.clone(),
                        seed,
                        train_acc: outcome.final_train.acc,
                        test_acc: outcome.final_test.acc,
                        total_macs: report.total,
                        cross_attention_macs: report.cross_attention_product,
                        error: None,
                    }
                }
                Err(e) => SweepCell {
                    value: value.clone(),
                    seed,
                    train_acc: f64::NAN,
                    test_acc: f64::NAN,
                    total_macs: 0,
                    cross_attention_macs: 0,
                    error: Some(e.to_string()),
                },
            };
            cells.push(cell);
        }
    }

    // machine-readable records
    let mut records = String::new();
    for c in &cells {
        records.push_str(&format!(
            "knob={knob} value={} seed={} train_acc={} test_acc={} total_macs={} xattn_macs={} error={}\n",
            c.value,
            c.seed,
            c.train_acc,
            c.test_acc,
            c.total_macs,
            c.cross_attention_macs,
            c.error.as_deref().unwrap_or("none")
        ));
    }
    std::fs::write(out_dir.join("sweep.log"), &records)?;
    Ok(cells)
}

/// Aligned human-readable sweep table.
pub fn sweep_table(knob: &str, cells: &[SweepCell]) -> String {
    let mut s = format!(
        "{knob:<16} {:>6} {:>10} {:>10} {:>14} {:>14}\n",
        "seed", "train_acc", "test_acc", "total_macs", "xattn_macs"
    );
    for c in cells {
        if let Some(err) = &c.error {
            s.push_str(&format!("{:<16} {:>6} failed: {err}\n", c.value, c.seed));
        } else {
            s.push_str(&format!(
                "{:<16} {:>6} {:>10.4} {:>10.4} {:>14} {:>14}\n",
                c.value, c.seed, c.train_acc, c.test_acc, c.total_macs, c.cross_attention_macs
            ));
        }
    }
    s
}

/// Baseline config for the single-branch calibration model.
pub fn baseline_config(cfg: &RunConfig) -> RunConfig {
    let mut base = cfg.clone();
    base.model.arch = Arch::VitBaseline;
    base
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fast_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model.image_size = 16;
        cfg.model.patch_size = 4;
        cfg.model.vit_blocks = 1;
        cfg.model.vit_heads = 2;
        cfg.model.conv_stage_depths = vec![1, 1];
        cfg.model.conv_stage_dims = vec![8, 16];
        cfg.model.hybrid_stem_patch = 4;
        cfg.model.hybrid_stem_depths = vec![1];
        cfg.model.hybrid_stem_dims = vec![16];
        cfg.model.d_v = 16;
        cfg.model.shared_dim = 16;
        cfg.prune.n_min = 4;
        cfg.prune.score_hidden = 8;
        cfg.fusion.depth = 1;
        cfg.fusion.heads = 2;
        cfg.train.steps = 3;
        cfg.train.batch_size = 4;
        cfg.train.eval_every = 0;
        cfg.data.samples_per_class = 8;
        cfg.data.test_per_class = 4;
        cfg
    }

    fn tmpdir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!(
            "evcc-train-test-{tag}-{}-{}",
            std::process::id(),
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .unwrap()
                .as_nanos()
        ));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn zero_steps_emits_initial_record_only() {
        let mut cfg = fast_cfg();
        cfg.train.steps = 0;
        let dir = tmpdir("zero");
        let outcome = run_train(&cfg, &dir, None).unwrap();
        assert_eq!(outcome.final_train.step, 0);
        let log = std::fs::read_to_string(&outcome.metrics_log).unwrap();
        // initial record + final train + final test
        assert_eq!(log.lines().count(), 3);
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn same_seed_runs_produce_identical_logs() {
        let cfg = fast_cfg();
        let d1 = tmpdir("det1");
        let d2 = tmpdir("det2");
        run_train(&cfg, &d1, None).unwrap();
        run_train(&cfg, &d2, None).unwrap();
        let l1 = std::fs::read_to_string(d1.join("metrics.log")).unwrap();
        let l2 = std::fs::read_to_string(d2.join("metrics.log")).unwrap();
        assert_eq!(l1, l2);
        // checkpoints bit-identical too
        let c1 = std::fs::read(d1.join("model.ckpt")).unwrap();
        let c2 = std::fs::read(d2.join("model.ckpt")).unwrap();
        assert_eq!(c1, c2);
        std::fs::remove_dir_all(d1).unwrap();
        std::fs::remove_dir_all(d2).unwrap();
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let mut cfg = fast_cfg();
        cfg.train.steps = 4;
        let full_dir = tmpdir("full");
        let full = run_train(&cfg, &full_dir, None).unwrap();

        // same schedule, stopped after 2 steps
        let half_dir = tmpdir("half");
        let half = run_train_until(&cfg, &half_dir, None, Some(2)).unwrap();

        // resume the remaining steps
        let resume_dir = tmpdir("resume");
        let resumed = run_train(&cfg, &resume_dir, Some(&half.checkpoint)).unwrap();

        assert_eq!(full.final_train.acc, resumed.final_train.acc);
        assert_eq!(full.final_train.total, resumed.final_train.total);
        // parameter payloads identical (skip header/digest differences by
        // comparing loaded tensors)
        let a = load_checkpoint(&full.checkpoint).unwrap();
        let b = load_checkpoint(&resumed.checkpoint).unwrap();
        assert_eq!(a.tensors.len(), b.tensors.len());
        for ((n1, t1), (n2, t2)) in a.tensors.iter().zip(&b.tensors) {
            assert_eq!(n1, n2);
            assert_eq!(t1.data(), t2.data(), "{n1}");
        }
        for d in [full_dir, half_dir, resume_dir] {
            std::fs::remove_dir_all(d).unwrap();
        }
    }

    #[test]
    fn exploding_run_aborts_with_diagnostic_record() {
        let mut cfg = fast_cfg();
        cfg.train.optimizer = "sgd".into();
        cfg.train.lr = 1e6; // guaranteed blow-up
        cfg.train.steps = 50;
        let dir = tmpdir("nan");
        let err = run_train(&cfg, &dir, None).unwrap_err();
        assert!(matches!(err, EvccError::NanAbort { .. }), "{err}");
        let log = std::fs::read_to_string(dir.join("metrics.log")).unwrap();
        assert!(log.contains("event=nan_abort"), "{log}");
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut cfg = fast_cfg();
        cfg.model.frozen_vit_blocks = 1;
        cfg.model.frozen_conv_stages = 1;
        let before = EvccModel::<f32>::new(&cfg).unwrap();
        let dir = tmpdir("frozen");
        let outcome = run_train(&cfg, &dir, None).unwrap();
        let after = load_checkpoint(&outcome.checkpoint).unwrap();
        let map = after.tensor_map();
        let mut checked = 0;
        for (_, p) in before.store.iter() {
            if p.frozen {
                assert_eq!(
                    map[&p.name].data(),
                    p.value.data(),
                    "frozen {} moved",
                    p.name
                );
                checked += 1;
            } else {
                // at least one trainable parameter must move
            }
        }
        assert!(checked > 0);
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn eval_is_repeatable_and_consistent_with_train() {
        let cfg = fast_cfg();
        let dir = tmpdir("eval");
        let outcome = run_train(&cfg, &dir, None).unwrap();
        let e1 = run_eval(&cfg, &outcome.checkpoint, false).unwrap();
        let e2 = run_eval(&cfg, &outcome.checkpoint, false).unwrap();
        assert_eq!(e1, e2);
        assert_eq!(e1.acc, outcome.final_train.acc);
        assert_eq!(e1.total, outcome.final_train.total);
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn sweep_runs_every_cell_and_survives_failure() {
        let mut cfg = fast_cfg();
        cfg.train.steps = 1;
        let dir = tmpdir("sweep");
        let cells = run_sweep(
            &cfg,
            "prune.r",
            &["1".into(), "2".into()],
            &[0, 1],
            &dir,
        )
        .unwrap();
        assert_eq!(cells.len(), 4);
        assert!(cells.iter().all(|c| c.error.is_none()));
        // cross-attention MACs nonincreasing in r
        let macs_r1 = cells[0].cross_attention_macs;
        let macs_r2 = cells[2].cross_attention_macs;
        assert!(macs_r2 <= macs_r1);
        let table = sweep_table("prune.r", &cells);
        assert!(table.contains("prune.r"));
        assert!(std::fs::read_to_string(dir.join("sweep.log"))
            .unwrap()
            .contains("knob=prune.r"));
        std::fs::remove_dir_all(dir).unwrap();

        // invalid knob is rejected
        assert!(run_sweep(&cfg, "model.patch_size", &["2".into()], &[0], &tmpdir("bad")).is_err());
    }

    #[test]
    fn lambda_sweep_completes_and_logs_every_cell() {
        let mut cfg = fast_cfg();
        cfg.train.steps = 1;
        let dir = tmpdir("lambda");
        let cells = run_sweep(
            &cfg,
            "loss.lambda",
            &["0".into(), "0.1".into(), "0.5".into()],
            &[0],
            &dir,
        )
        .unwrap();
        assert_eq!(cells.len(), 3);
        assert!(cells.iter().all(|c| c.error.is_none()));
        let log = std::fs::read_to_string(dir.join("sweep.log")).unwrap();
        assert_eq!(log.lines().count(), 3);
        std::fs::remove_dir_all(dir).unwrap();
    }

    use crate::gradcheck::{DEFAULT_H, DEFAULT_TOL};

    #[test]
    fn gradcheck_passes_on_a_small_config() {
        let mut cfg = fast_cfg();
        cfg.prune.n_min = 1; // ensure real pruning so the summary path is live
        cfg.model.image_size = 8;
        cfg.model.patch_size = 4;
        cfg.model.conv_stage_dims = vec![4, 8];
        cfg.model.hybrid_stem_dims = vec![8];
        cfg.model.d_v = 8;
        cfg.model.shared_dim = 8;
        cfg.prune.score_hidden = 4;
        cfg.data.n_classes = 2;
        let report = run_gradcheck(&cfg, DEFAULT_H, DEFAULT_TOL).unwrap();
        assert!(
            report.passed(),
            "failing groups: {:?} (max rel {})",
            report.failing_groups(),
            report.max_rel_err()
        );
    }
}
