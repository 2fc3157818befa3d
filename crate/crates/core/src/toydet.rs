//! Tiny dense detectors over the synthetic scenes: backbone + two-level
//! feature pyramid + shared heads (classification, localization,
//! objectness), anchor target assignment, the task loss, decoding with NMS,
//! and teacher proposal extraction.

use serde::{Deserialize, Serialize};

use crate::attention::{ProposalSet, ScoredBox};
use crate::boxes::{decode_offsets, encode_offsets, iou, nms, AnchorGrid, Box2D, LevelAnchors};
use crate::error::{Error, Result};
use crate::losses::{FpnFeatures, HeadOutputs};
use crate::nn::{instance_norm, visit_conv, visit_conv_mut, visit_norm, visit_norm_mut, ConvParams, NormParams, Params};
use crate::scene::SceneObject;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const IOU_POSITIVE: f64 = 0.5;
pub const IOU_NEGATIVE: f64 = 0.4;

/// Architecture of one detector. The backbone is a chain of 3x3 stride-2
/// convolutions; FPN levels tap the stages whose stride matches.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSpec {
    pub stage_channels: Vec<usize>,
    pub base_channels: usize,
    pub num_classes: usize,
    pub image_size: usize,
    pub strides: Vec<usize>,
    pub anchor_scales: Vec<f64>,
    /// Anchor base side = factor * stride, multiplied by each scale.
    pub anchor_base_factor: f64,
}

impl DetectorSpec {
    pub fn teacher(num_classes: usize) -> DetectorSpec {
        DetectorSpec {
            stage_channels: vec![8, 16, 32, 32],
            base_channels: 32,
            num_classes,
            image_size: 64,
            strides: vec![8, 16],
            anchor_scales: vec![1.0, 1.5],
            anchor_base_factor: 1.5,
        }
    }

    pub fn student(num_classes: usize) -> DetectorSpec {
        DetectorSpec {
            stage_channels: vec![4, 8, 8, 8],
            base_channels: 8,
            ..DetectorSpec::teacher(num_classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() || self.stage_channels.iter().any(|&c| c == 0) {
            return Err(Error::ConfigError("backbone needs nonzero stage channels".into()));
        }
        if self.base_channels == 0 || self.num_classes == 0 {
            return Err(Error::ConfigError("channels and classes must be nonzero".into()));
        }
        if self.anchor_scales.is_empty() {
            return Err(Error::ConfigError("need at least one anchor scale".into()));
        }
        if self.strides.is_empty() {
            return Err(Error::ConfigError("need at least one FPN level".into()));
        }
        for &s in &self.strides {
            self.stage_for_stride(s)?;
            if self.image_size % s != 0 {
                return Err(Error::ConfigError(format!(
                    "stride {s} does not divide image size {}",
                    self.image_size
                )));
            }
        }
        Ok(())
    }

    fn stage_for_stride(&self, stride: usize) -> Result<usize> {
        let mut s = 2;
        for (i, _) in self.stage_channels.iter().enumerate() {
            if s == stride {
                return Ok(i);
            }
            s *= 2;
        }
        Err(Error::ConfigError(format!(
            "no backbone stage has stride {stride} (stages reach {})",
            1 << self.stage_channels.len()
        )))
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_scales.len()
    }

    pub fn level_size(&self, level: usize) -> usize {
        self.image_size / self.strides[level]
    }

    pub fn anchor_grid(&self) -> AnchorGrid {
        let levels = self
            .strides
            .iter()
            .map(|&stride| {
                let sizes: Vec<f64> = self
                    .anchor_scales
                    .iter()
                    .map(|sc| sc * self.anchor_base_factor * stride as f64)
                    .collect();
                let m = self.image_size / stride;
                LevelAnchors::new(stride, m, m, &sizes)
            })
            .collect();
        AnchorGrid { levels }
    }
}

pub const NORM_EPS: f64 = 1e-5;

/// All weights of one detector. Each backbone stage and the shared head
/// conv carry an instance-norm layer (conv, norm, relu).
#[derive(Debug, Clone)]
pub struct DetectorParams {
    pub stages: Vec<ConvParams>,
    pub stage_norms: Vec<NormParams>,
    pub laterals: Vec<ConvParams>,
    pub head_conv: ConvParams,
    pub head_norm: NormParams,
    pub cls_head: ConvParams,
    pub loc_head: ConvParams,
    pub obj_head: ConvParams,
}

impl DetectorParams {
    pub fn init<R: rand::Rng>(spec: &DetectorSpec, rng: &mut R) -> Result<DetectorParams> {
        spec.validate()?;
        let mut stages = Vec::new();
        let mut stage_norms = Vec::new();
        let mut cin = 3;
        for &cout in &spec.stage_channels {
            stages.push(ConvParams::he_init(cout, cin, 3, 2, 1, rng));
            stage_norms.push(NormParams::identity(cout));
            cin = cout;
        }
        let laterals = spec
            .strides
            .iter()
            .map(|&s| {
                let tap = spec.stage_for_stride(s).unwrap();
                ConvParams::he_init(spec.base_channels, spec.stage_channels[tap], 1, 1, 0, rng)
            })
            .collect();
        let a = spec.anchors_per_cell();
        let b = spec.base_channels;
        // background-prior bias on the class head and a negative objectness
        // prior keep early foreground scores low, which stabilizes the
        // first training steps
        let mut cls_head = ConvParams::he_init(a * (spec.num_classes + 1), b, 1, 1, 0, rng);
        let mut cls_bias = vec![0.0; a * (spec.num_classes + 1)];
        for ai in 0..a {
            cls_bias[ai * (spec.num_classes + 1) + spec.num_classes] = 2.0;
        }
        cls_head.b = Tensor::from_vec(vec![a * (spec.num_classes + 1)], cls_bias).unwrap();
        Ok(DetectorParams {
            stages,
            stage_norms,
            laterals,
            head_conv: ConvParams::he_init(b, b, 3, 1, 1, rng),
            head_norm: NormParams::identity(b),
            cls_head,
            loc_head: ConvParams::he_init(4 * a, b, 1, 1, 0, rng),
            obj_head: ConvParams::he_init(a, b, 1, 1, 0, rng).with_bias(-2.0),
        })
    }
}

impl Params for DetectorParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, s) in self.stages.iter().enumerate() {
            visit_conv(&format!("stage{i}"), s, f);
        }
        for (i, nrm) in self.stage_norms.iter().enumerate() {
            visit_norm(&format!("stage{i}.norm"), nrm, f);
        }
        for (i, l) in self.laterals.iter().enumerate() {
            visit_conv(&format!("lateral{i}"), l, f);
        }
        visit_conv("head", &self.head_conv, f);
        visit_norm("head.norm", &self.head_norm, f);
        visit_conv("cls", &self.cls_head, f);
        visit_conv("loc", &self.loc_head, f);
        visit_conv("obj", &self.obj_head, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            visit_conv_mut(&format!("stage{i}"), s, f);
        }
        for (i, nrm) in self.stage_norms.iter_mut().enumerate() {
            visit_norm_mut(&format!("stage{i}.norm"), nrm, f);
        }
        for (i, l) in self.laterals.iter_mut().enumerate() {
            visit_conv_mut(&format!("lateral{i}"), l, f);
        }
        visit_conv_mut("head", &mut self.head_conv, f);
        visit_norm_mut("head.norm", &mut self.head_norm, f);
        visit_conv_mut("cls", &mut self.cls_head, f);
        visit_conv_mut("loc", &mut self.loc_head, f);
        visit_conv_mut("obj", &mut self.obj_head, f);
    }
}

/// Run the detector: backbone stages with relu, lateral 1x1 convs at the
/// tapped strides, then the shared head stack per level.
pub fn forward(
    tape: &mut Tape,
    spec: &DetectorSpec,
    params: &DetectorParams,
    images: &Tensor,
) -> Result<(FpnFeatures, HeadOutputs)> {
    let s = spec.image_size;
    if images.rank() != 4 || images.shape()[1] != 3 || images.shape()[2] != s || images.shape()[3] != s {
        return Err(Error::ShapeMismatch(format!(
            "expected [N,3,{s},{s}] images, got {:?}",
            images.shape()
        )));
    }
    let mut taps: Vec<Option<Tensor>> = vec![None; spec.strides.len()];
    let mut x = images.clone();
    for (i, stage) in params.stages.iter().enumerate() {
        let conv = stage.apply(tape, &x)?;
        let normed = instance_norm(tape, &conv, &params.stage_norms[i], NORM_EPS)?;
        x = tape.relu(&normed)?;
        for (level, &stride) in spec.strides.iter().enumerate() {
            if spec.stage_for_stride(stride)? == i {
                taps[level] = Some(x.clone());
            }
        }
    }
    let mut features = Vec::with_capacity(spec.strides.len());
    for (level, tap) in taps.into_iter().enumerate() {
        let tap = tap.ok_or_else(|| Error::ConfigError(format!("level {level} has no backbone tap")))?;
        features.push(params.laterals[level].apply(tape, &tap)?);
    }

    let mut cls = Vec::new();
    let mut loc = Vec::new();
    let mut obj = Vec::new();
    for feat in &features {
        let h = params.head_conv.apply(tape, feat)?;
        let h = instance_norm(tape, &h, &params.head_norm, NORM_EPS)?;
        let h = tape.relu(&h)?;
        cls.push(params.cls_head.apply(tape, &h)?);
        loc.push(params.loc_head.apply(tape, &h)?);
        obj.push(params.obj_head.apply(tape, &h)?);
    }
    Ok((
        FpnFeatures { levels: features },
        HeadOutputs {
            cls,
            loc,
            obj,
            num_classes: spec.num_classes,
            anchors_per_cell: spec.anchors_per_cell(),
        },
    ))
}

/// Anchor labels, class targets and offset targets for a batch.
#[derive(Debug, Clone)]
pub struct AssignedTargets {
    /// Per level `[N, A, H, W]`: 1 positive, 0 negative, -1 ignored.
    pub labels: Vec<Tensor>,
    /// Per level `[N, A, K+1, H, W]` one-hot class targets (background = K);
    /// all-zero rows for ignored anchors.
    pub class_onehot: Vec<Tensor>,
    /// Per level `[N, A, 4, H, W]`, zero outside positives.
    pub target_offsets: Vec<Tensor>,
    pub num_sampled: usize,
    pub num_positive: usize,
}

/// Negatives kept per image: at most `NEG_PER_POS` per positive with a
/// floor of `MIN_NEG`, drawn with the given seed. Unsampled negatives are
/// marked ignored so the class imbalance stays bounded.
#[derive(Debug, Clone, Copy)]
pub struct NegativeSampling {
    pub seed: u64,
}

pub const NEG_PER_POS: usize = 3;
pub const MIN_NEG: usize = 32;

/// Assign ground truth to anchors: IoU >= 0.5 positive, < 0.4 negative,
/// in between ignored; the highest-IoU anchor of every ground-truth box is
/// forced positive (ties to the lowest anchor index). With `sampling`, the
/// negative set is subsampled deterministically from the given seed.
pub fn assign_targets_sampled(
    grid: &AnchorGrid,
    gts: &[Vec<SceneObject>],
    num_classes: usize,
    sampling: Option<NegativeSampling>,
) -> AssignedTargets {
    let n = gts.len();
    let classes = num_classes + 1;
    let level_sizes: Vec<usize> = grid.levels.iter().map(|l| l.boxes().len()).collect();
    let total: usize = level_sizes.iter().sum();

    let mut labels = vec![vec![0.0f64; 0]; grid.levels.len()];
    let mut onehot = vec![vec![0.0f64; 0]; grid.levels.len()];
    let mut offsets = vec![vec![0.0f64; 0]; grid.levels.len()];
    for (l, anchors) in grid.levels.iter().enumerate() {
        labels[l] = vec![0.0; n * anchors.boxes().len()];
        onehot[l] = vec![0.0; n * anchors.boxes().len() * classes];
        offsets[l] = vec![0.0; n * anchors.boxes().len() * 4];
    }

    let mut num_sampled = 0;
    let mut num_positive = 0;
    for (img, img_gts) in gts.iter().enumerate() {
        // flat assignment over all levels
        let mut label = vec![0i8; total];
        let mut assigned = vec![usize::MAX; total];
        let mut flat_anchor = Vec::with_capacity(total);
        for anchors in &grid.levels {
            flat_anchor.extend_from_slice(anchors.boxes());
        }
        if !img_gts.is_empty() {
            for (m, anchor) in flat_anchor.iter().enumerate() {
                let mut best = 0.0;
                let mut best_gt = usize::MAX;
                for (g, gt) in img_gts.iter().enumerate() {
                    let v = iou(anchor, &gt.bbox);
                    if v > best {
                        best = v;
                        best_gt = g;
                    }
                }
                if best >= IOU_POSITIVE {
                    label[m] = 1;
                    assigned[m] = best_gt;
                } else if best >= IOU_NEGATIVE {
                    label[m] = -1;
                }
            }
            for (g, gt) in img_gts.iter().enumerate() {
                let mut best = f64::MIN;
                let mut best_anchor = 0;
                for (m, anchor) in flat_anchor.iter().enumerate() {
                    let v = iou(anchor, &gt.bbox);
                    if v > best {
                        best = v;
                        best_anchor = m;
                    }
                }
                label[best_anchor] = 1;
                assigned[best_anchor] = g;
            }
        }

        if let Some(s) = sampling {
            let positives = label.iter().filter(|&&l| l == 1).count();
            let keep = (positives * NEG_PER_POS).max(MIN_NEG);
            let mut negatives: Vec<usize> =
                (0..total).filter(|&m| label[m] == 0).collect();
            if negatives.len() > keep {
                use rand::seq::SliceRandom;
                use rand::SeedableRng;
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(
                    s.seed.wrapping_add(img as u64).wrapping_mul(0x9e3779b97f4a7c15),
                );
                negatives.shuffle(&mut rng);
                for &m in &negatives[keep..] {
                    label[m] = -1;
                }
            }
        }

        // scatter into per-level layouts
        let mut base = 0;
        for (l, anchors) in grid.levels.iter().enumerate() {
            let per_level = anchors.boxes().len();
            let (h, w) = (anchors.h, anchors.w);
            let a_cells = anchors.per_cell();
            for local in 0..per_level {
                let m = base + local;
                let lab = label[m];
                if lab >= 0 {
                    num_sampled += 1;
                }
                let (a, rest) = (local / (h * w), local % (h * w));
                let (i, j) = (rest / w, rest % w);
                let l_idx = ((img * a_cells + a) * h + i) * w + j;
                labels[l][l_idx] = lab as f64;
                let class = if lab == 1 {
                    num_positive += 1;
                    img_gts[assigned[m]].class
                } else if lab == 0 {
                    num_classes // background
                } else {
                    classes // sentinel: leaves the one-hot row zero
                };
                if class < classes {
                    let oh_idx = (((img * a_cells + a) * classes + class) * h + i) * w + j;
                    onehot[l][oh_idx] = 1.0;
                }
                if lab == 1 {
                    let t = encode_offsets(&flat_anchor[m], &img_gts[assigned[m]].bbox);
                    for (coord, &tv) in t.iter().enumerate() {
                        let o_idx = (((img * a_cells + a) * 4 + coord) * h + i) * w + j;
                        offsets[l][o_idx] = tv;
                    }
                }
            }
            base += per_level;
        }
    }

    let mut labels_t = Vec::new();
    let mut onehot_t = Vec::new();
    let mut offsets_t = Vec::new();
    for (l, anchors) in grid.levels.iter().enumerate() {
        let (h, w, a) = (anchors.h, anchors.w, anchors.per_cell());
        labels_t.push(Tensor::from_vec(vec![n, a, h, w], std::mem::take(&mut labels[l])).unwrap());
        onehot_t.push(
            Tensor::from_vec(vec![n, a, classes, h, w], std::mem::take(&mut onehot[l])).unwrap(),
        );
        offsets_t
            .push(Tensor::from_vec(vec![n, a, 4, h, w], std::mem::take(&mut offsets[l])).unwrap());
    }
    AssignedTargets {
        labels: labels_t,
        class_onehot: onehot_t,
        target_offsets: offsets_t,
        num_sampled,
        num_positive,
    }
}

/// [`assign_targets_sampled`] with every negative anchor kept.
pub fn assign_targets(grid: &AnchorGrid, gts: &[Vec<SceneObject>], num_classes: usize) -> AssignedTargets {
    assign_targets_sampled(grid, gts, num_classes, None)
}

/// The student's own detection loss: classification cross-entropy over
/// sampled anchors, smooth-L1 on positive offsets, and objectness BCE.
///
/// Cross-entropy and BCE are normalized per group — the positive mean plus
/// the sampled-negative mean — so the few positive anchors keep gradient
/// weight against the background majority.
pub fn task_loss(tape: &mut Tape, outputs: &HeadOutputs, targets: &AssignedTargets) -> Result<Tensor> {
    if targets.num_sampled == 0 {
        return Err(Error::NoSampledAnchors);
    }
    let classes = outputs.num_classes + 1;
    let a = outputs.anchors_per_cell;
    let mut cls_pos: Option<Tensor> = None;
    let mut cls_neg: Option<Tensor> = None;
    let mut reg_sum: Option<Tensor> = None;
    let mut obj_pos: Option<Tensor> = None;
    let mut obj_neg: Option<Tensor> = None;
    let accum = |tape: &mut Tape, slot: &mut Option<Tensor>, v: Tensor| -> Result<()> {
        *slot = Some(match slot.take() {
            None => v,
            Some(acc) => tape.add(&acc, &v)?,
        });
        Ok(())
    };
    for (level, cls) in outputs.cls.iter().enumerate() {
        let (n, h, w) = (cls.shape()[0], cls.shape()[2], cls.shape()[3]);
        let pos: Vec<f64> = targets.labels[level]
            .data()
            .iter()
            .map(|&v| if v == 1.0 { 1.0 } else { 0.0 })
            .collect();
        let neg: Vec<f64> = targets.labels[level]
            .data()
            .iter()
            .map(|&v| if v == 0.0 { 1.0 } else { 0.0 })
            .collect();
        let pos_t = Tensor::from_vec(vec![n, a, h, w], pos.clone())?;
        let neg_t = Tensor::from_vec(vec![n, a, h, w], neg)?;

        let c5 = tape.reshape(cls, &[n, a, classes, h, w])?;
        let ls = tape.log_softmax(&c5, &[2])?;
        let picked = tape.mul(&ls, &targets.class_onehot[level])?;
        let ce = tape.sum(&picked, &[2])?; // [N,A,H,W], negative log-likelihoods
        let ce_pos = tape.mul(&ce, &pos_t)?;
        let s = tape.sum_all(&ce_pos)?;
        accum(tape, &mut cls_pos, s)?;
        let ce_neg = tape.mul(&ce, &neg_t)?;
        let s = tape.sum_all(&ce_neg)?;
        accum(tape, &mut cls_neg, s)?;

        let o5 = tape.reshape(&outputs.loc[level], &[n, a, 4, h, w])?;
        let diff = tape.sub(&o5, &targets.target_offsets[level])?;
        let sl1 = tape.smooth_l1(&diff)?;
        let pos4 = tape.expand(&pos_t, &[2], &[4])?;
        let masked = tape.mul(&sl1, &pos4)?;
        let s = tape.sum_all(&masked)?;
        accum(tape, &mut reg_sum, s)?;

        let bce = tape.bce_with_logits(&outputs.obj[level], &pos_t)?;
        let bce_pos = tape.mul(&bce, &pos_t)?;
        let s = tape.sum_all(&bce_pos)?;
        accum(tape, &mut obj_pos, s)?;
        let bce_neg = tape.mul(&bce, &neg_t)?;
        let s = tape.sum_all(&bce_neg)?;
        accum(tape, &mut obj_neg, s)?;
    }
    let n_pos = targets.num_positive.max(1) as f64;
    let n_neg = (targets.num_sampled - targets.num_positive).max(1) as f64;
    let cls_p = tape.scale(&cls_pos.unwrap(), -1.0 / n_pos)?;
    let cls_n = tape.scale(&cls_neg.unwrap(), -1.0 / n_neg)?;
    let reg = tape.scale(&reg_sum.unwrap(), 1.0 / n_pos)?;
    let obj_p = tape.scale(&obj_pos.unwrap(), 1.0 / n_pos)?;
    let obj_n = tape.scale(&obj_neg.unwrap(), 1.0 / n_neg)?;
    let mut total = tape.add(&cls_p, &cls_n)?;
    total = tape.add(&total, &reg)?;
    total = tape.add(&total, &obj_p)?;
    tape.add(&total, &obj_n)
}



/// A decoded, scored detection.
#[derive(Debug, Clone)]
pub struct Detection {
    pub bbox: Box2D,
    pub class: usize,
    pub score: f64,
}

fn softmax_slice(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / denom).collect()
}

const MAX_DETECTIONS: usize = 100;

/// Decode head outputs against the anchors, clip to the image, and run
/// per-class greedy NMS. Detection score is the softmax class probability.
pub fn decode_and_nms(
    spec: &DetectorSpec,
    grid: &AnchorGrid,
    outputs: &HeadOutputs,
    score_thresh: f64,
    iou_thresh: f64,
) -> Result<Vec<Vec<Detection>>> {
    if !(0.0..1.0).contains(&score_thresh) || !(0.0..1.0).contains(&iou_thresh) {
        return Err(Error::ConfigError("thresholds must lie in (0,1)".into()));
    }
    let n = outputs.cls.first().map(|t| t.shape()[0]).unwrap_or(0);
    let k = outputs.num_classes;
    let a = outputs.anchors_per_cell;
    let size = spec.image_size as f64;
    let mut all = Vec::with_capacity(n);
    for img in 0..n {
        let mut per_class: Vec<Vec<(Box2D, f64)>> = vec![Vec::new(); k];
        for (level, anchors) in grid.levels.iter().enumerate() {
            let cls = outputs.cls[level].data();
            let loc = outputs.loc[level].data();
            let (h, w) = (anchors.h, anchors.w);
            let cls_stride = a * (k + 1) * h * w;
            let loc_stride = a * 4 * h * w;
            for ai in 0..a {
                for i in 0..h {
                    for j in 0..w {
                        let mut logits = Vec::with_capacity(k + 1);
                        for c in 0..=k {
                            logits.push(cls[img * cls_stride + ((ai * (k + 1) + c) * h + i) * w + j]);
                        }
                        let probs = softmax_slice(&logits);
                        let mut t = [0.0; 4];
                        for (coord, tv) in t.iter_mut().enumerate() {
                            *tv = loc[img * loc_stride + ((ai * 4 + coord) * h + i) * w + j];
                        }
                        let decoded = decode_offsets(anchors.get(ai, i, j), &t).clip(size, size);
                        if decoded.x_min >= decoded.x_max || decoded.y_min >= decoded.y_max {
                            continue;
                        }
                        for (class, prob) in probs.iter().enumerate().take(k) {
                            if *prob >= score_thresh {
                                per_class[class].push((decoded, *prob));
                            }
                        }
                    }
                }
            }
        }
        let mut dets = Vec::new();
        for (class, candidates) in per_class.into_iter().enumerate() {
            let boxes: Vec<Box2D> = candidates.iter().map(|c| c.0).collect();
            let scores: Vec<f64> = candidates.iter().map(|c| c.1).collect();
            for keep in nms(&boxes, &scores, iou_thresh) {
                dets.push(Detection {
                    bbox: boxes[keep],
                    class,
                    score: scores[keep],
                });
            }
        }
        dets.sort_by(|x, y| {
            y.score
                .partial_cmp(&x.score)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(x.class.cmp(&y.class))
        });
        dets.truncate(MAX_DETECTIONS);
        all.push(dets);
    }
    Ok(all)
}

const PROPOSAL_NMS_IOU: f64 = 0.7;

/// Top-n objectness proposals after decode and class-agnostic NMS, in image
/// coordinates. Ties in objectness break by anchor index.
pub fn proposals_from_teacher(
    spec: &DetectorSpec,
    grid: &AnchorGrid,
    outputs: &HeadOutputs,
    top_n: usize,
) -> Result<ProposalSet> {
    if top_n == 0 {
        return Err(Error::ConfigError("top_n must be at least 1".into()));
    }
    let n = outputs.obj.first().map(|t| t.shape()[0]).unwrap_or(0);
    let a = outputs.anchors_per_cell;
    let size = spec.image_size as f64;
    let mut set = ProposalSet::empty(n);
    for img in 0..n {
        let mut boxes = Vec::new();
        let mut scores = Vec::new();
        for (level, anchors) in grid.levels.iter().enumerate() {
            let obj = outputs.obj[level].data();
            let loc = outputs.loc[level].data();
            let (h, w) = (anchors.h, anchors.w);
            let obj_stride = a * h * w;
            let loc_stride = a * 4 * h * w;
            for ai in 0..a {
                for i in 0..h {
                    for j in 0..w {
                        let z = obj[img * obj_stride + (ai * h + i) * w + j];
                        let score = 1.0 / (1.0 + (-z).exp());
                        let mut t = [0.0; 4];
                        for (coord, tv) in t.iter_mut().enumerate() {
                            *tv = loc[img * loc_stride + ((ai * 4 + coord) * h + i) * w + j];
                        }
                        let decoded = decode_offsets(anchors.get(ai, i, j), &t).clip(size, size);
                        if decoded.x_min >= decoded.x_max || decoded.y_min >= decoded.y_max {
                            continue;
                        }
                        boxes.push(decoded);
                        scores.push(score);
                    }
                }
            }
        }
        let keep = nms(&boxes, &scores, PROPOSAL_NMS_IOU);
        set.per_image[img] = keep
            .into_iter()
            .take(top_n)
            .map(|i| ScoredBox {
                bbox: boxes[i],
                score: scores[i],
            })
            .collect();
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec() -> DetectorSpec {
        DetectorSpec::teacher(3)
    }

    #[test]
    fn forward_shapes() {
        let spec = spec();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = DetectorParams::init(&spec, &mut rng).unwrap();
        let mut tape = Tape::new();
        let images = Tensor::zeros(&[2, 3, 64, 64]);
        let (features, heads) = forward(&mut tape, &spec, &params, &images).unwrap();
        assert_eq!(features.levels[0].shape(), &[2, 32, 8, 8]);
        assert_eq!(features.levels[1].shape(), &[2, 32, 4, 4]);
        assert_eq!(heads.cls[0].shape(), &[2, 2 * 4, 8, 8]);
        assert_eq!(heads.loc[0].shape(), &[2, 8, 8, 8]);
        assert_eq!(heads.obj[1].shape(), &[2, 2, 4, 4]);

        let student = DetectorSpec::student(3);
        let sparams = DetectorParams::init(&student, &mut rng).unwrap();
        let (sf, _) = forward(&mut tape, &student, &sparams, &images).unwrap();
        assert_eq!(sf.levels[0].shape(), &[2, 8, 8, 8]);
    }

    #[test]
    fn zero_weights_give_zero_outputs() {
        let spec = spec();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = DetectorParams::init(&spec, &mut rng).unwrap();
        params.visit_mut(&mut |_, t| {
            let n = t.len();
            t.set_data(vec![0.0; n]).unwrap();
        });
        let mut tape = Tape::new();
        let images = Tensor::full(&[1, 3, 64, 64], 0.5);
        let (features, heads) = forward(&mut tape, &spec, &params, &images).unwrap();
        assert!(features.levels[0].data().iter().all(|&v| v == 0.0));
        assert!(heads.cls[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn assign_exact_anchor_is_positive_with_zero_offsets() {
        let spec = spec();
        let grid = spec.anchor_grid();
        // ground truth exactly equal to anchor (0, 2, 3) of level 0
        let gt_box = *grid.levels[0].get(0, 2, 3);
        let gts = vec![vec![SceneObject {
            class: 1,
            bbox: gt_box,
        }]];
        let targets = assign_targets(&grid, &gts, 3);
        let labels = targets.labels[0].data();
        let (h, w) = (8, 8);
        let idx = ((0 * 2 + 0) * h + 2) * w + 3;
        assert_eq!(labels[idx], 1.0);
        for coord in 0..4 {
            let o_idx = (((0 * 2 + 0) * 4 + coord) * h + 2) * w + 3;
            assert!(targets.target_offsets[0].data()[o_idx].abs() < 1e-12);
        }
        // one-hot picks class 1
        let oh_idx = (((0 * 2 + 0) * 4 + 1) * h + 2) * w + 3;
        assert_eq!(targets.class_onehot[0].data()[oh_idx], 1.0);
        assert!(targets.num_positive >= 1);
    }

    #[test]
    fn assign_no_gt_all_negative() {
        let spec = spec();
        let grid = spec.anchor_grid();
        let targets = assign_targets(&grid, &[Vec::new()], 3);
        assert!(targets.labels.iter().all(|l| l.data().iter().all(|&v| v == 0.0)));
        assert_eq!(targets.num_positive, 0);
        assert_eq!(targets.num_sampled, grid.total());
    }

    #[test]
    fn assign_matches_brute_force_oracle() {
        let spec = spec();
        let grid = spec.anchor_grid();
        let cfg = crate::scene::SceneConfig::default();
        for seed in 0..20 {
            let scene = crate::scene::gen_scene(seed, &cfg);
            let targets = assign_targets(&grid, &[scene.objects.clone()], 3);

            // oracle: recompute labels anchor by anchor
            let mut flat = Vec::new();
            for anchors in &grid.levels {
                flat.extend_from_slice(anchors.boxes());
            }
            let mut expect = vec![0.0f64; flat.len()];
            for (m, anchor) in flat.iter().enumerate() {
                let best = scene
                    .objects
                    .iter()
                    .map(|o| iou(anchor, &o.bbox))
                    .fold(0.0, f64::max);
                expect[m] = if best >= IOU_POSITIVE {
                    1.0
                } else if best >= IOU_NEGATIVE {
                    -1.0
                } else {
                    0.0
                };
            }
            for obj in &scene.objects {
                let mut best = f64::MIN;
                let mut best_m = 0;
                for (m, anchor) in flat.iter().enumerate() {
                    let v = iou(anchor, &obj.bbox);
                    if v > best {
                        best = v;
                        best_m = m;
                    }
                }
                expect[best_m] = 1.0;
            }

            let mut got = Vec::new();
            for (l, anchors) in grid.levels.iter().enumerate() {
                let (h, w) = (anchors.h, anchors.w);
                for a in 0..anchors.per_cell() {
                    for i in 0..h {
                        for j in 0..w {
                            got.push(targets.labels[l].data()[((a) * h + i) * w + j]);
                        }
                    }
                }
            }
            assert_eq!(got, expect, "seed {seed}");
        }
    }

    #[test]
    fn task_loss_uniform_logits_give_class_entropy() {
        let spec = spec();
        let grid = spec.anchor_grid();
        let targets = assign_targets(&grid, &[Vec::new()], 3);
        let zero_heads = HeadOutputs {
            cls: vec![Tensor::zeros(&[1, 8, 8, 8]), Tensor::zeros(&[1, 8, 4, 4])],
            loc: vec![Tensor::zeros(&[1, 8, 8, 8]), Tensor::zeros(&[1, 8, 4, 4])],
            obj: vec![Tensor::zeros(&[1, 2, 8, 8]), Tensor::zeros(&[1, 2, 4, 4])],
            num_classes: 3,
            anchors_per_cell: 2,
        };
        let mut tape = Tape::new();
        let loss = task_loss(&mut tape, &zero_heads, &targets).unwrap();
        // CE = ln(4) per sampled anchor; objectness BCE = ln 2 per anchor; no reg
        let expect = 4.0f64.ln() + 2.0f64.ln();
        assert!((loss.item().unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn task_loss_perfect_predictions_vanish() {
        let spec = spec();
        let grid = spec.anchor_grid();
        let gt_box = *grid.levels[0].get(1, 4, 4);
        let gts = vec![vec![SceneObject {
            class: 2,
            bbox: gt_box,
        }]];
        let targets = assign_targets(&grid, &gts, 3);

        // craft saturated outputs agreeing with the targets
        let mut cls = Vec::new();
        let mut loc = Vec::new();
        let mut obj = Vec::new();
        for (l, anchors) in grid.levels.iter().enumerate() {
            let (h, w, a) = (anchors.h, anchors.w, anchors.per_cell());
            let oh = targets.class_onehot[l].data();
            let mut cls_data = vec![0.0; a * 4 * h * w];
            for ai in 0..a {
                for c in 0..4 {
                    for i in 0..h {
                        for j in 0..w {
                            let hot = oh[(((ai) * 4 + c) * h + i) * w + j];
                            cls_data[((ai * 4 + c) * h + i) * w + j] = if hot == 1.0 { 40.0 } else { -40.0 };
                        }
                    }
                }
            }
            cls.push(Tensor::from_vec(vec![1, a * 4, h, w], cls_data).unwrap());
            loc.push(
                Tensor::from_vec(vec![1, a * 4, h, w], targets.target_offsets[l].data().to_vec())
                    .unwrap(),
            );
            let labels = targets.labels[l].data();
            let obj_data: Vec<f64> = labels.iter().map(|&v| if v == 1.0 { 40.0 } else { -40.0 }).collect();
            obj.push(Tensor::from_vec(vec![1, a, h, w], obj_data).unwrap());
        }
        let outputs = HeadOutputs {
            cls,
            loc,
            obj,
            num_classes: 3,
            anchors_per_cell: 2,
        };
        let mut tape = Tape::new();
        let loss = task_loss(&mut tape, &outputs, &targets).unwrap();
        assert!(loss.item().unwrap() < 1e-6, "loss {}", loss.item().unwrap());
    }

    #[test]
    fn nms_duplicates_and_disjoint_boxes() {
        let spec = spec();
        let grid = spec.anchor_grid();
        // identical boxes with scores 0.9/0.8 -> one survivor;
        // disjoint boxes -> both survive. Crafted via direct head outputs on
        // a single-anchor level is cumbersome; use boxes::nms semantics
        // through decode_and_nms with saturated class scores instead.
        let (h, w, a) = (8usize, 8usize, 2usize);
        let mut cls_data = vec![-40.0; a * 4 * h * w];
        // anchor (0, 2, 2) and (1, 2, 2) both confident class 0: same center,
        // different sizes -> IoU (16/24)^2 ~ 0.44 < 0.5 both survive; bump
        // offsets so the second matches the first exactly.
        for (ai, i, j) in [(0usize, 2usize, 2usize), (1, 2, 2)] {
            cls_data[((ai * 4) * h + i) * w + j] = 40.0;
        }
        let mut loc_data = vec![0.0; a * 4 * h * w];
        // anchor 1 at (2,2): rescale to anchor-0 size: dw = dh = ln(16/24)
        let dwh = (16.0f64 / 24.0).ln();
        loc_data[((1 * 4 + 2) * h + 2) * w + 2] = dwh;
        loc_data[((1 * 4 + 3) * h + 2) * w + 2] = dwh;
        let outputs = HeadOutputs {
            cls: vec![
                Tensor::from_vec(vec![1, a * 4, h, w], cls_data).unwrap(),
                Tensor::full(&[1, a * 4, 4, 4], -40.0),
            ],
            loc: vec![
                Tensor::from_vec(vec![1, a * 4, h, w], loc_data).unwrap(),
                Tensor::zeros(&[1, a * 4, 4, 4]),
            ],
            obj: vec![Tensor::zeros(&[1, a, h, w]), Tensor::zeros(&[1, a, 4, 4])],
            num_classes: 3,
            anchors_per_cell: a,
        };
        let dets = decode_and_nms(&spec, &grid, &outputs, 0.5, 0.5).unwrap();
        // the two candidates decode to the same box: exactly one survives
        assert_eq!(dets[0].len(), 1);
        assert_eq!(dets[0][0].class, 0);
    }

    #[test]
    fn proposals_zero_objectness_tie_break_deterministic() {
        let spec = spec();
        let grid = spec.anchor_grid();
        let outputs = HeadOutputs {
            cls: vec![Tensor::zeros(&[1, 8, 8, 8]), Tensor::zeros(&[1, 8, 4, 4])],
            loc: vec![Tensor::zeros(&[1, 8, 8, 8]), Tensor::zeros(&[1, 8, 4, 4])],
            obj: vec![Tensor::zeros(&[1, 2, 8, 8]), Tensor::zeros(&[1, 2, 4, 4])],
            num_classes: 3,
            anchors_per_cell: 2,
        };
        let p1 = proposals_from_teacher(&spec, &grid, &outputs, 5).unwrap();
        let p2 = proposals_from_teacher(&spec, &grid, &outputs, 5).unwrap();
        assert_eq!(p1.per_image[0].len(), 5);
        for (a, b) in p1.per_image[0].iter().zip(&p2.per_image[0]) {
            assert_eq!(a.bbox, b.bbox);
        }
        // proposals stay inside the image
        for sb in &p1.per_image[0] {
            assert!(sb.bbox.x_min >= 0.0 && sb.bbox.x_max <= 64.0);
            assert!(sb.bbox.y_min >= 0.0 && sb.bbox.y_max <= 64.0);
        }
    }

    #[test]
    fn spec_validation_catches_bad_strides() {
        let mut s = spec();
        s.strides = vec![7];
        assert!(s.validate().is_err());
        let mut s = spec();
        s.strides = vec![32];
        assert!(s.validate().is_err());
        assert!(spec().validate().is_ok());
    }
}
