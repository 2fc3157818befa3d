//! Training orchestration: SGD with momentum, the stepped learning-rate
//! schedule, teacher training, and AFD/baseline student distillation, plus
//! the file-level command implementations behind the CLI.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{compute_attn_masks, ProposalSet};
use crate::ckpt::{dataset_from_checkpoint, dataset_to_checkpoint, fnv1a, Checkpoint};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate, write_pr_csv, EvalResult, MATCH_IOU};
use crate::gcontext::{global_loss, GcBlockParams};
use crate::losses::{
    cls_head_loss, feature_attn_loss, feature_distill_loss, loc_head_loss, rpn_loss, total_loss,
    FpnFeatures, HeadOutputs, LevelPatches, LossParts,
};
use crate::nn::{ConvParams, Params};
use crate::parallel::parallel_map;
use crate::scene::{batch_images, Scene};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::toydet::{
    assign_targets_sampled, decode_and_nms, forward, proposals_from_teacher, task_loss,
    AssignedTargets, DetectorParams, DetectorSpec, NegativeSampling,
};

/// Seed for one step's negative sampling; identical across afd and baseline
/// runs so both see the same anchors.
fn sample_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    seed.wrapping_mul(0x100000001b3)
        .wrapping_add((epoch as u64) << 20)
        .wrapping_add(batch as u64)
}

pub const EVAL_SCORE_THRESH: f64 = 0.05;
pub const EVAL_NMS_IOU: f64 = 0.5;

// rng stream ids per purpose, all derived from the run seed
const STREAM_TEACHER_INIT: u64 = 1;
const STREAM_STUDENT_INIT: u64 = 2;
const STREAM_DISTILL_INIT: u64 = 3;
const STREAM_SHUFFLE: u64 = 4;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// SGD with momentum and decoupled-from-nothing weight decay folded into the
/// gradient, velocity kept per parameter name:
/// v = momentum * v + g + wd * w; w -= lr * v.
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Gradients of one parameter group are rescaled when their joint norm
    /// exceeds this; <= 0 disables clipping.
    pub max_grad_norm: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Sgd {
        Sgd {
            lr,
            momentum,
            weight_decay,
            max_grad_norm: 0.0,
            velocity: BTreeMap::new(),
        }
    }

    pub fn with_clip(mut self, max_grad_norm: f64) -> Sgd {
        self.max_grad_norm = max_grad_norm;
        self
    }

    /// Apply one update. `tracked` must be the tape-registered copy of
    /// `model` from the current step, visited in the same order.
    pub fn step<P: Params>(
        &mut self,
        model: &mut P,
        tracked: &P,
        grads: &crate::tape::Gradients,
    ) -> Result<()> {
        let mut updates: Vec<(String, Vec<f64>)> = Vec::new();
        let mut first_err: Option<Error> = None;
        tracked.visit(&mut |name, t| {
            if first_err.is_some() {
                return;
            }
            match grads.get(t) {
                Ok(g) => updates.push((name.to_string(), g.to_vec())),
                Err(e) => first_err = Some(e),
            }
        });
        if let Some(e) = first_err {
            return Err(e);
        }
        if self.max_grad_norm > 0.0 {
            let norm: f64 = updates
                .iter()
                .flat_map(|(_, g)| g.iter())
                .map(|g| g * g)
                .sum::<f64>()
                .sqrt();
            if norm > self.max_grad_norm {
                let scale = self.max_grad_norm / norm;
                for (_, g) in updates.iter_mut() {
                    for v in g.iter_mut() {
                        *v *= scale;
                    }
                }
            }
        }
        let mut idx = 0usize;
        let lr = self.lr;
        let momentum = self.momentum;
        let wd = self.weight_decay;
        let velocity = &mut self.velocity;
        model.visit_mut(&mut |name, t| {
            let (uname, g) = &updates[idx];
            idx += 1;
            debug_assert_eq!(uname, name, "visit order drifted");
            let v = velocity.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            let data = t.data();
            let mut next = Vec::with_capacity(data.len());
            for i in 0..data.len() {
                v[i] = momentum * v[i] + g[i] + wd * data[i];
                next.push(data[i] - lr * v[i]);
            }
            t.set_data(next).expect("same length");
        });
        Ok(())
    }
}

/// Learning rate at a 0-based epoch under the stepped decay schedule.
pub fn lr_at(cfg: &RunConfig, epoch: usize) -> f64 {
    let decays = cfg
        .optimizer
        .decay_epochs
        .iter()
        .filter(|&&e| e <= epoch)
        .count() as u32;
    cfg.optimizer.learning_rate * cfg.optimizer.decay_factor.powi(decays as i32)
}

/// Epoch rate scaled by the linear warmup ramp (from a tenth of the rate to
/// its full value over `warmup_steps` global steps).
pub fn lr_at_step(cfg: &RunConfig, epoch: usize, global_step: usize) -> f64 {
    let base = lr_at(cfg, epoch);
    let w = cfg.optimizer.warmup_steps;
    if global_step < w {
        let frac = (global_step + 1) as f64 / w as f64;
        base * (0.1 + 0.9 * frac)
    } else {
        base
    }
}

/// One metrics record per epoch; the key set is identical for every
/// command, with unused components at zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub task_loss: f64,
    pub l_fd: f64,
    pub l_fa: f64,
    pub l_glob: f64,
    pub l_cls_h: f64,
    pub l_loc_h: f64,
    pub l_rpn: f64,
    pub total: f64,
    pub val_map: f64,
}

/// Evaluate a detector over scenes, fanning image chunks out to workers.
pub fn eval_detector(spec: &DetectorSpec, params: &DetectorParams, scenes: &[Scene]) -> Result<EvalResult> {
    let grid = spec.anchor_grid();
    let chunk = 8usize;
    let n_chunks = scenes.len().div_ceil(chunk);
    let per_chunk: Vec<Result<Vec<Vec<crate::toydet::Detection>>>> = parallel_map(n_chunks, |ci| {
        let lo = ci * chunk;
        let hi = ((ci + 1) * chunk).min(scenes.len());
        let refs: Vec<&Scene> = scenes[lo..hi].iter().collect();
        let images = batch_images(&refs, spec.image_size);
        let mut tape = Tape::new();
        let (_, heads) = forward(&mut tape, spec, params, &images)?;
        decode_and_nms(spec, &grid, &heads, EVAL_SCORE_THRESH, EVAL_NMS_IOU)
    });
    let mut dets = Vec::with_capacity(scenes.len());
    for c in per_chunk {
        dets.extend(c?);
    }
    let gts: Vec<Vec<crate::scene::SceneObject>> = scenes.iter().map(|s| s.objects.clone()).collect();
    evaluate(&dets, &gts, spec.num_classes, MATCH_IOU)
}

fn batches(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

fn gather<'a>(scenes: &'a [Scene], idx: &[usize]) -> Vec<&'a Scene> {
    idx.iter().map(|&i| &scenes[i]).collect()
}

/// Train the teacher detector with its task loss only.
pub fn train_teacher(cfg: &RunConfig, train: &[Scene], val: &[Scene]) -> Result<(DetectorParams, Vec<EpochMetrics>)> {
    cfg.validate()?;
    let spec = &cfg.teacher;
    let mut params = DetectorParams::init(spec, &mut stream_rng(cfg.seed, STREAM_TEACHER_INIT))?;
    let grid = spec.anchor_grid();
    let mut sgd = Sgd::new(cfg.optimizer.learning_rate, cfg.optimizer.momentum, cfg.optimizer.weight_decay)
        .with_clip(cfg.optimizer.max_grad_norm);
    let mut shuffle_rng = stream_rng(cfg.seed, STREAM_SHUFFLE);
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut global_step = 0usize;

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut task_sum = 0.0;
        let batch_list = batches(&order, cfg.batch_size);
        for (bi, batch) in batch_list.iter().enumerate() {
            sgd.lr = lr_at_step(cfg, epoch, global_step);
            global_step += 1;
            let scenes = gather(train, batch);
            let images = batch_images(&scenes, spec.image_size);
            let gts: Vec<_> = scenes.iter().map(|s| s.objects.clone()).collect();
            let sampling = Some(NegativeSampling {
                seed: sample_seed(cfg.seed, epoch, bi),
            });
            let targets = assign_targets_sampled(&grid, &gts, spec.num_classes, sampling);

            let mut tape = Tape::new();
            let tracked = params.tracked(&mut tape);
            let (_, heads) = forward(&mut tape, spec, &tracked, &images)?;
            let loss = task_loss(&mut tape, &heads, &targets)?;
            let loss_value = loss.item()?;
            if !loss_value.is_finite() {
                return Err(Error::NonFiniteComponent(format!("task loss {loss_value}")));
            }
            task_sum += loss_value;
            let grads = tape.backward(&loss)?;
            sgd.step(&mut params, &tracked, &grads)?;
        }
        let task_mean = task_sum / batch_list.len() as f64;
        let val_map = eval_detector(spec, &params, val)?.map;
        metrics.push(EpochMetrics {
            epoch,
            lr: lr_at(cfg, epoch),
            task_loss: task_mean,
            l_fd: 0.0,
            l_fa: 0.0,
            l_glob: 0.0,
            l_cls_h: 0.0,
            l_loc_h: 0.0,
            l_rpn: 0.0,
            total: task_mean,
            val_map,
        });
    }
    Ok((params, metrics))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistillMode {
    Afd,
    Baseline,
}

impl FromStr for DistillMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<DistillMode> {
        match s {
            "afd" => Ok(DistillMode::Afd),
            "baseline" => Ok(DistillMode::Baseline),
            other => Err(Error::ConfigError(format!("unknown mode {other} (afd|baseline)"))),
        }
    }
}

impl fmt::Display for DistillMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DistillMode::Afd => "afd",
            DistillMode::Baseline => "baseline",
        })
    }
}

/// Frozen per-scene teacher outputs, computed once up front.
struct TeacherCache {
    features: Vec<Vec<Tensor>>,
    cls: Vec<Vec<Tensor>>,
    loc: Vec<Vec<Tensor>>,
    obj: Vec<Vec<Tensor>>,
    num_classes: usize,
    anchors_per_cell: usize,
}

impl TeacherCache {
    fn build(spec: &DetectorSpec, params: &DetectorParams, scenes: &[Scene]) -> Result<TeacherCache> {
        let per_scene: Vec<Result<(Vec<Tensor>, Vec<Tensor>, Vec<Tensor>, Vec<Tensor>)>> =
            parallel_map(scenes.len(), |i| {
                let mut tape = Tape::new();
                let images = scenes[i].image_tensor(spec.image_size);
                let (features, heads) = forward(&mut tape, spec, params, &images)?;
                Ok((features.levels, heads.cls, heads.loc, heads.obj))
            });
        let mut cache = TeacherCache {
            features: Vec::with_capacity(scenes.len()),
            cls: Vec::with_capacity(scenes.len()),
            loc: Vec::with_capacity(scenes.len()),
            obj: Vec::with_capacity(scenes.len()),
            num_classes: spec.num_classes,
            anchors_per_cell: spec.anchors_per_cell(),
        };
        for entry in per_scene {
            let (f, c, l, o) = entry?;
            debug_assert!(f.iter().all(|t| !t.is_tracked()), "teacher outputs must stay off-tape");
            cache.features.push(f);
            cache.cls.push(c);
            cache.loc.push(l);
            cache.obj.push(o);
        }
        Ok(cache)
    }

    fn batch(&self, idx: &[usize]) -> (FpnFeatures, HeadOutputs) {
        let levels = self.features[0].len();
        let pick = |table: &Vec<Vec<Tensor>>| -> Vec<Tensor> {
            (0..levels)
                .map(|l| {
                    let parts: Vec<&Tensor> = idx.iter().map(|&i| &table[i][l]).collect();
                    concat_batch(&parts)
                })
                .collect()
        };
        (
            FpnFeatures {
                levels: pick(&self.features),
            },
            HeadOutputs {
                cls: pick(&self.cls),
                loc: pick(&self.loc),
                obj: pick(&self.obj),
                num_classes: self.num_classes,
                anchors_per_cell: self.anchors_per_cell,
            },
        )
    }
}

/// Concatenate `[1, ...]` tensors along the batch axis. Plain data only.
fn concat_batch(parts: &[&Tensor]) -> Tensor {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.len();
    let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::from_vec(shape, data).unwrap()
}

/// Everything a distillation run produces.
pub struct DistillResult {
    pub student: DetectorParams,
    pub adapters: Option<Vec<ConvParams>>,
    pub gc: Option<GcBlockParams>,
    pub metrics: Vec<EpochMetrics>,
}

pub(crate) struct StepLosses {
    task: f64,
    fd: f64,
    fa: f64,
    glob: f64,
    cls_h: f64,
    loc_h: f64,
    rpn: f64,
    total: f64,
}

pub(crate) fn afd_step(
    cfg: &RunConfig,
    teacher: &(FpnFeatures, HeadOutputs),
    proposals: Option<&ProposalSet>,
    student_spec: &DetectorSpec,
    tape: &mut Tape,
    student: &DetectorParams,
    adapters: &[ConvParams],
    gc: &GcBlockParams,
    images: &Tensor,
    targets: &AssignedTargets,
) -> Result<(Tensor, StepLosses)> {
    let (teacher_features, teacher_heads) = teacher;
    let (features, heads) = forward(tape, student_spec, student, images)?;
    let task = task_loss(tape, &heads, targets)?;

    // channel-adapt the student features once for masks and feature losses
    let adapted: Vec<Tensor> = features
        .levels
        .iter()
        .zip(adapters)
        .map(|(f, a)| a.apply(tape, f))
        .collect::<Result<_>>()?;

    // masks act as fixed weights inside the losses: they are computed from
    // detached copies, so no gradient flows through the attention softmax
    let adapted_detached: Vec<Tensor> = adapted.iter().map(|t| t.detached()).collect();
    let masks = compute_attn_masks(
        tape,
        &teacher_features.levels,
        &adapted_detached,
        proposals,
        &student_spec.strides,
        &cfg.mask,
    )?;

    let fd = feature_distill_loss(tape, teacher_features, &features, adapters, &masks)?;

    // per-level, per-image patch splits for the attention feature loss
    let mut patches_t = Vec::new();
    let mut patches_s = Vec::new();
    for (lt, ls) in teacher_features.levels.iter().zip(&adapted) {
        let n = lt.shape()[0];
        let mut level_t = LevelPatches {
            per_image: Vec::with_capacity(n),
        };
        let mut level_s = LevelPatches {
            per_image: Vec::with_capacity(n),
        };
        for img in 0..n {
            let t_img = tape.select(lt, 0, img)?;
            let s_img = tape.select(ls, 0, img)?;
            level_t
                .per_image
                .push(crate::attention::split_patches(tape, &t_img, cfg.mask.instance_size)?);
            level_s
                .per_image
                .push(crate::attention::split_patches(tape, &s_img, cfg.mask.instance_size)?);
        }
        patches_t.push(level_t);
        patches_s.push(level_s);
    }
    let adapted_features = FpnFeatures {
        levels: adapted.clone(),
    };
    let fa = feature_attn_loss(tape, teacher_features, &adapted_features, &patches_t, &patches_s)?;

    let glob = global_loss(tape, &teacher_features.levels, &adapted, gc)?;

    let cls_h = cls_head_loss(tape, &heads, teacher_heads, &masks)?;
    let grid = student_spec.anchor_grid();
    let loc_h = loc_head_loss(tape, &heads, teacher_heads, &grid, &masks)?;

    let rpn = rpn_loss(
        tape,
        &heads.obj,
        &heads.loc,
        &targets.labels,
        &targets.target_offsets,
        cfg.loss_weights.rpn_cls,
        cfg.loss_weights.rpn_reg,
    )?;

    let parts = LossParts {
        feature: fd.clone(),
        attention: fa.clone(),
        global: glob.clone(),
        cls_head: cls_h.clone(),
        loc_head: loc_h.clone(),
        rpn: rpn.clone(),
    };
    let eq13 = total_loss(tape, &parts, &cfg.loss_weights)?;
    let full = tape.add(&task, &eq13)?;
    let losses = StepLosses {
        task: task.item()?,
        fd: fd.item()?,
        fa: fa.item()?,
        glob: glob.item()?,
        cls_h: cls_h.item()?,
        loc_h: loc_h.item()?,
        rpn: rpn.item()?,
        total: full.item()?,
    };
    Ok((full, losses))
}

/// Distill a student against a frozen teacher (`Afd`), or train the same
/// student on the task loss alone (`Baseline`) with identical
/// initialization and data order.
pub fn distill(
    cfg: &RunConfig,
    mode: DistillMode,
    teacher_params: &DetectorParams,
    train: &[Scene],
    val: &[Scene],
) -> Result<DistillResult> {
    cfg.validate()?;
    let student_spec = &cfg.student;
    let teacher_spec = &cfg.teacher;
    let mut student = DetectorParams::init(student_spec, &mut stream_rng(cfg.seed, STREAM_STUDENT_INIT))?;

    let mut distill_rng = stream_rng(cfg.seed, STREAM_DISTILL_INIT);
    let (mut adapters, mut gc) = if mode == DistillMode::Afd {
        let adapters: Vec<ConvParams> = teacher_spec
            .strides
            .iter()
            .map(|_| {
                ConvParams::he_init(
                    teacher_spec.base_channels,
                    student_spec.base_channels,
                    1,
                    1,
                    0,
                    &mut distill_rng,
                )
            })
            .collect();
        let gc = GcBlockParams::init(
            teacher_spec.base_channels,
            cfg.global_block.reduction,
            cfg.global_block.weight,
            &mut distill_rng,
        )?;
        (Some(adapters), Some(gc))
    } else {
        (None, None)
    };

    let teacher_cache = if mode == DistillMode::Afd {
        Some(TeacherCache::build(teacher_spec, teacher_params, train)?)
    } else {
        None
    };

    let grid = student_spec.anchor_grid();
    let mut sgd = Sgd::new(cfg.optimizer.learning_rate, cfg.optimizer.momentum, cfg.optimizer.weight_decay)
        .with_clip(cfg.optimizer.max_grad_norm);
    let mut shuffle_rng = stream_rng(cfg.seed, STREAM_SHUFFLE);
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut global_step = 0usize;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let batch_list = batches(&order, cfg.batch_size);
        let mut sums = StepLosses {
            task: 0.0,
            fd: 0.0,
            fa: 0.0,
            glob: 0.0,
            cls_h: 0.0,
            loc_h: 0.0,
            rpn: 0.0,
            total: 0.0,
        };
        for (bi, batch) in batch_list.iter().enumerate() {
            sgd.lr = lr_at_step(cfg, epoch, global_step);
            global_step += 1;
            let scenes = gather(train, batch);
            let images = batch_images(&scenes, student_spec.image_size);
            let gts: Vec<_> = scenes.iter().map(|s| s.objects.clone()).collect();
            let sampling = Some(NegativeSampling {
                seed: sample_seed(cfg.seed, epoch, bi),
            });
            let targets = assign_targets_sampled(&grid, &gts, student_spec.num_classes, sampling);

            let mut tape = Tape::new();
            let tracked_student = student.tracked(&mut tape);

            match mode {
                DistillMode::Baseline => {
                    let (_, heads) = forward(&mut tape, student_spec, &tracked_student, &images)?;
                    let loss = task_loss(&mut tape, &heads, &targets)?;
                    let v = loss.item()?;
                    if !v.is_finite() {
                        return Err(Error::NonFiniteComponent(format!("task loss {v}")));
                    }
                    sums.task += v;
                    sums.total += v;
                    let grads = tape.backward(&loss)?;
                    sgd.step(&mut student, &tracked_student, &grads)?;
                }
                DistillMode::Afd => {
                    let cache = teacher_cache.as_ref().unwrap();
                    let teacher_batch = cache.batch(batch);
                    let proposals = if cfg.mask.use_proposal_mask {
                        Some(proposals_from_teacher(
                            teacher_spec,
                            &teacher_spec.anchor_grid(),
                            &teacher_batch.1,
                            cfg.proposal_top_n,
                        )?)
                    } else {
                        None
                    };
                    let tracked_adapters: Vec<ConvParams> = adapters
                        .as_ref()
                        .unwrap()
                        .iter()
                        .map(|a| ConvParams {
                            w: tape.watch(&a.w),
                            b: tape.watch(&a.b),
                            stride: a.stride,
                            pad: a.pad,
                        })
                        .collect();
                    let tracked_gc = gc.as_ref().unwrap().tracked(&mut tape);

                    let (loss, step_losses) = afd_step(
                        cfg,
                        &teacher_batch,
                        proposals.as_ref(),
                        student_spec,
                        &mut tape,
                        &tracked_student,
                        &tracked_adapters,
                        &tracked_gc,
                        &images,
                        &targets,
                    )?;
                    if !step_losses.total.is_finite() {
                        return Err(Error::NonFiniteComponent(format!(
                            "distill loss {}",
                            step_losses.total
                        )));
                    }
                    sums.task += step_losses.task;
                    sums.fd += step_losses.fd;
                    sums.fa += step_losses.fa;
                    sums.glob += step_losses.glob;
                    sums.cls_h += step_losses.cls_h;
                    sums.loc_h += step_losses.loc_h;
                    sums.rpn += step_losses.rpn;
                    sums.total += step_losses.total;

                    let grads = tape.backward(&loss)?;
                    sgd.step(&mut student, &tracked_student, &grads)?;
                    // adapters and the gc block train jointly with the student
                    let adapters_mut = adapters.as_mut().unwrap();
                    for (level, (a, t)) in adapters_mut.iter_mut().zip(&tracked_adapters).enumerate() {
                        let mut pair_model = AdapterPair {
                            level,
                            w: a.w.clone(),
                            b: a.b.clone(),
                        };
                        let pair_tracked = AdapterPair {
                            level,
                            w: t.w.clone(),
                            b: t.b.clone(),
                        };
                        sgd.step(&mut pair_model, &pair_tracked, &grads)?;
                        a.w = pair_model.w;
                        a.b = pair_model.b;
                    }
                    sgd.step(gc.as_mut().unwrap(), &tracked_gc, &grads)?;
                }
            }
        }
        let steps = batch_list.len() as f64;
        let val_map = eval_detector(student_spec, &student, val)?.map;
        metrics.push(EpochMetrics {
            epoch,
            lr: lr_at(cfg, epoch),
            task_loss: sums.task / steps,
            l_fd: sums.fd / steps,
            l_fa: sums.fa / steps,
            l_glob: sums.glob / steps,
            l_cls_h: sums.cls_h / steps,
            l_loc_h: sums.loc_h / steps,
            l_rpn: sums.rpn / steps,
            total: sums.total / steps,
            val_map,
        });
    }
    Ok(DistillResult {
        student,
        adapters,
        gc,
        metrics,
    })
}

/// Diagnostic wrapper exposing the per-component values of one AFD step.
#[allow(clippy::too_many_arguments)]
#[doc(hidden)]
pub fn afd_step_diag(
    cfg: &RunConfig,
    teacher: &(FpnFeatures, HeadOutputs),
    proposals: Option<&ProposalSet>,
    student_spec: &DetectorSpec,
    tape: &mut Tape,
    student: &DetectorParams,
    adapters: &[ConvParams],
    gc: &GcBlockParams,
    images: &Tensor,
    targets: &AssignedTargets,
) -> Result<(Tensor, [f64; 7])> {
    let (loss, l) = afd_step(
        cfg, teacher, proposals, student_spec, tape, student, adapters, gc, images, targets,
    )?;
    Ok((loss, [l.task, l.fd, l.fa, l.glob, l.cls_h, l.loc_h, l.rpn]))
}

/// One adapter conv viewed as a named parameter group.
#[derive(Clone)]
struct AdapterPair {
    level: usize,
    w: Tensor,
    b: Tensor,
}

impl Params for AdapterPair {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("adapt{}.w", self.level), &self.w);
        f(&format!("adapt{}.b", self.level), &self.b);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("adapt{}.w", self.level), &mut self.w);
        f(&format!("adapt{}.b", self.level), &mut self.b);
    }
}

// ── checkpoint plumbing ─────────────────────────────────────────────────

fn params_into_checkpoint<P: Params>(ck: &mut Checkpoint, p: &P) {
    p.visit(&mut |name, t| {
        ck.insert_tensor(name, t.shape().to_vec(), t.data().to_vec()).unwrap();
    });
}

fn fill_params<P: Params>(p: &mut P, ck: &Checkpoint) -> Result<()> {
    let mut err = None;
    p.visit_mut(&mut |name, t| {
        if err.is_some() {
            return;
        }
        match ck.tensor(name) {
            Ok((dims, data)) => {
                if dims != t.shape() {
                    err = Some(Error::CheckpointMismatch(format!(
                        "tensor {name}: stored {dims:?} vs expected {:?}",
                        t.shape()
                    )));
                    return;
                }
                t.set_data(data.clone()).unwrap();
            }
            Err(e) => err = Some(e),
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Serialize a detector with its spec and run metadata.
pub fn detector_checkpoint(
    params: &DetectorParams,
    spec: &DetectorSpec,
    kind: &str,
    cfg: &RunConfig,
    epoch: usize,
) -> Checkpoint {
    let mut ck = Checkpoint::default();
    params_into_checkpoint(&mut ck, params);
    ck.metadata.insert("kind".into(), kind.into());
    ck.metadata.insert("spec".into(), serde_json::to_string(spec).unwrap());
    ck.metadata.insert("epoch".into(), epoch.to_string());
    ck.metadata.insert("seed".into(), cfg.seed.to_string());
    ck.metadata.insert("config_hash".into(), cfg.hash());
    ck
}

/// Load any detector checkpoint (teacher or student); the spec rides in
/// the metadata.
pub fn load_detector(ck: &Checkpoint) -> Result<(DetectorSpec, DetectorParams)> {
    let spec: DetectorSpec = serde_json::from_str(ck.meta("spec")?)
        .map_err(|e| Error::CheckpointMismatch(format!("bad spec metadata: {e}")))?;
    spec.validate()?;
    let mut params = DetectorParams::init(&spec, &mut ChaCha8Rng::seed_from_u64(0))?;
    fill_params(&mut params, ck)?;
    Ok((spec, params))
}

// ── command implementations ─────────────────────────────────────────────

pub fn write_metrics(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for m in metrics {
        let line = serde_json::to_string(m).expect("metrics serialize");
        writeln!(f, "{line}")?;
    }
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| Error::ConfigError(format!("bad metrics line: {e}")))?);
    }
    Ok(out)
}

/// `gen-data`: write a dataset container; returns (scene count, checksum).
pub fn run_gen_data(seed: u64, count: usize, scene_cfg: &crate::scene::SceneConfig, out: &Path) -> Result<(usize, u64)> {
    scene_cfg.validate()?;
    let scenes: Vec<Scene> = {
        let per: Vec<Scene> = parallel_map(count, |i| crate::scene::gen_scene(seed.wrapping_add(i as u64), scene_cfg));
        per
    };
    let ck = dataset_to_checkpoint(&scenes, scene_cfg.image_size, seed);
    let bytes = ck.to_bytes();
    fs::write(out, &bytes)?;
    Ok((count, fnv1a(&bytes)))
}

/// Load a dataset file and slice the train/val split demanded by the config.
pub fn load_split(cfg: &RunConfig, data: &Path) -> Result<(Vec<Scene>, Vec<Scene>)> {
    let ck = Checkpoint::load(data)?;
    let scenes = dataset_from_checkpoint(&ck)?;
    let need = cfg.dataset.train_scenes + cfg.dataset.val_scenes;
    if scenes.len() < need {
        return Err(Error::ConfigError(format!(
            "dataset holds {} scenes, config needs {} train + {} val",
            scenes.len(),
            cfg.dataset.train_scenes,
            cfg.dataset.val_scenes
        )));
    }
    let train = scenes[..cfg.dataset.train_scenes].to_vec();
    let val = scenes[cfg.dataset.train_scenes..need].to_vec();
    Ok((train, val))
}

/// `train-teacher`: returns the final validation mAP.
pub fn run_train_teacher(cfg: &RunConfig, data: &Path, out_dir: &Path) -> Result<f64> {
    let (train, val) = load_split(cfg, data)?;
    let (params, metrics) = train_teacher(cfg, &train, &val)?;
    fs::create_dir_all(out_dir)?;
    let ck = detector_checkpoint(&params, &cfg.teacher, "teacher", cfg, cfg.epochs.saturating_sub(1));
    ck.save(&out_dir.join("teacher.ckpt"))?;
    write_metrics(&out_dir.join("metrics.jsonl"), &metrics)?;
    Ok(metrics.last().map(|m| m.val_map).unwrap_or(0.0))
}

/// `distill`: trains a student in the given mode against a teacher
/// checkpoint; returns the final validation mAP.
pub fn run_distill(cfg: &RunConfig, mode: DistillMode, teacher_ckpt: &Path, data: &Path, out_dir: &Path) -> Result<f64> {
    let ck = Checkpoint::load(teacher_ckpt)?;
    let (spec, teacher_params) = load_detector(&ck)?;
    let stored = serde_json::to_value(&spec).unwrap();
    let expected = serde_json::to_value(&cfg.teacher).unwrap();
    if stored != expected {
        return Err(Error::CheckpointMismatch(
            "teacher checkpoint spec differs from the config's teacher spec".into(),
        ));
    }
    let (train, val) = load_split(cfg, data)?;
    let result = distill(cfg, mode, &teacher_params, &train, &val)?;
    fs::create_dir_all(out_dir)?;
    let mut out_ck = detector_checkpoint(
        &result.student,
        &cfg.student,
        "student",
        cfg,
        cfg.epochs.saturating_sub(1),
    );
    out_ck.metadata.insert("mode".into(), mode.to_string());
    if let Some(adapters) = &result.adapters {
        for (level, a) in adapters.iter().enumerate() {
            let pair = AdapterPair {
                level,
                w: a.w.clone(),
                b: a.b.clone(),
            };
            params_into_checkpoint(&mut out_ck, &pair);
        }
    }
    if let Some(gc) = &result.gc {
        params_into_checkpoint(&mut out_ck, gc);
    }
    out_ck.save(&out_dir.join("student.ckpt"))?;
    write_metrics(&out_dir.join("metrics.jsonl"), &result.metrics)?;
    Ok(result.metrics.last().map(|m| m.val_map).unwrap_or(0.0))
}

/// `eval`: evaluate a detector checkpoint over a whole dataset file. Writes
/// PR curves as CSV when a path is given; returns the result for printing.
pub fn run_eval(ckpt: &Path, data: &Path, pr_out: Option<&Path>) -> Result<EvalResult> {
    let ck = Checkpoint::load(ckpt)?;
    let (spec, params) = load_detector(&ck)?;
    let dataset = dataset_from_checkpoint(&Checkpoint::load(data)?)?;
    let result = eval_detector(&spec, &params, &dataset)?;
    if let Some(path) = pr_out {
        let mut f = fs::File::create(path)?;
        write_pr_csv(&mut f, &result.curves)?;
    }
    Ok(result)
}

/// `report`: merge per-run metrics into a comparison CSV with one epoch
/// axis and per-run val_map/total columns.
pub fn run_report(runs: &[PathBuf], out: &Path) -> Result<()> {
    if runs.is_empty() {
        return Err(Error::ConfigError("report needs at least one run".into()));
    }
    let mut labeled = Vec::new();
    for path in runs {
        let label = run_label(path);
        labeled.push((label, read_metrics(path)?));
    }
    let epochs = labeled[0].1.len();
    if labeled.iter().any(|(_, m)| m.len() != epochs) {
        return Err(Error::ConfigError("runs cover different epoch ranges".into()));
    }
    let mut f = fs::File::create(out)?;
    let mut header = String::from("epoch");
    for (label, _) in &labeled {
        header.push_str(&format!(",{label}_val_map,{label}_total"));
    }
    writeln!(f, "{header}")?;
    for e in 0..epochs {
        let mut row = format!("{e}");
        for (_, metrics) in &labeled {
            row.push_str(&format!(",{},{}", metrics[e].val_map, metrics[e].total));
        }
        writeln!(f, "{row}")?;
    }
    Ok(())
}

fn run_label(path: &Path) -> String {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
    if stem == "metrics" {
        path.parent()
            .and_then(|p| p.file_name())
            .and_then(|s| s.to_str())
            .unwrap_or(stem)
            .to_string()
    } else {
        stem.to_string()
    }
}
