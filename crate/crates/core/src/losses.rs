//! The distillation loss stack: masked feature distillation, attention
//! feature losses, masked head distillation (cross-entropy and IoU), the
//! objectness/regression loss, and the total aggregation.

use serde::{Deserialize, Serialize};

use crate::attention::AttnMasks;
use crate::boxes::{AnchorGrid, BOX_XFORM_CLIP, MIN_BOX_SIDE};
use crate::error::{Error, Result};
use crate::featnorm::{normalize_features, DEFAULT_EPS};
use crate::nn::ConvParams;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Balancing weights of the total distillation loss.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Weight on the feature distillation term.
    pub feature: f64,
    /// Weight on the attention feature term.
    pub attention: f64,
    /// Weight on the two head distillation terms.
    pub head: f64,
    /// Objectness classification balance inside the RPN-style loss.
    pub rpn_cls: f64,
    /// Offset regression balance inside the RPN-style loss.
    pub rpn_reg: f64,
}

impl LossWeights {
    /// One-stage settings: 5e-4 / 2e-2 / 1e-1, unit RPN balances.
    pub fn one_stage() -> LossWeights {
        LossWeights {
            feature: 5e-4,
            attention: 2e-2,
            head: 1e-1,
            rpn_cls: 1.0,
            rpn_reg: 1.0,
        }
    }

    /// Two-stage settings: 6e-5 / 4e-3 / 1e-1, unit RPN balances.
    pub fn two_stage() -> LossWeights {
        LossWeights {
            feature: 6e-5,
            attention: 4e-3,
            ..LossWeights::one_stage()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("feature", self.feature),
            ("attention", self.attention),
            ("head", self.head),
            ("rpn_cls", self.rpn_cls),
            ("rpn_reg", self.rpn_reg),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::ConfigError(format!("loss weight {name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Per-level batched feature maps from one detector.
#[derive(Debug, Clone)]
pub struct FpnFeatures {
    /// One `[N, C, H, W]` tensor per FPN level.
    pub levels: Vec<Tensor>,
}

/// Dense head outputs for every FPN level.
///
/// Channel layouts: classification `[N, A*(K+1), H, W]` with channel
/// `a*(K+1) + k` (class K is background), localization `[N, 4A, H, W]` with
/// channel `a*4 + coord`, objectness `[N, A, H, W]`.
#[derive(Debug, Clone)]
pub struct HeadOutputs {
    pub cls: Vec<Tensor>,
    pub loc: Vec<Tensor>,
    pub obj: Vec<Tensor>,
    pub num_classes: usize,
    pub anchors_per_cell: usize,
}

impl HeadOutputs {
    pub fn num_levels(&self) -> usize {
        self.cls.len()
    }
}

fn check_levels(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(format!("level count {a} vs {b}")));
    }
    Ok(())
}

/// Masked feature distillation: per level, the squared difference of the
/// normalized teacher features and normalized channel-adapted student
/// features is weighted by the spatial and channel attention masks, summed,
/// clamped at zero against round-off and square-rooted; levels are added.
pub fn feature_distill_loss(
    tape: &mut Tape,
    f_t: &FpnFeatures,
    f_s: &FpnFeatures,
    adapters: &[ConvParams],
    masks: &AttnMasks,
) -> Result<Tensor> {
    check_levels(f_t.levels.len(), f_s.levels.len())?;
    check_levels(f_t.levels.len(), adapters.len())?;
    check_levels(f_t.levels.len(), masks.levels.len())?;
    let mut total: Option<Tensor> = None;
    for ((ft, fs), (adapter, level_masks)) in f_t
        .levels
        .iter()
        .zip(&f_s.levels)
        .zip(adapters.iter().zip(&masks.levels))
    {
        let adapted = adapter.apply(tape, fs)?;
        if adapted.shape() != ft.shape() {
            return Err(Error::ShapeMismatch(format!(
                "adapted student {:?} vs teacher {:?}",
                adapted.shape(),
                ft.shape()
            )));
        }
        let (n, c, h, w) = (ft.shape()[0], ft.shape()[1], ft.shape()[2], ft.shape()[3]);
        let nt = normalize_features(tape, ft, DEFAULT_EPS)?;
        let ns = normalize_features(tape, &adapted, DEFAULT_EPS)?;
        let diff = tape.sub(&nt, &ns)?;
        let sq = tape.square(&diff)?;
        let sp = tape.expand(&level_masks.lg_sp, &[1], &[c])?; // [N,C,H,W]
        let ch = tape.expand(&level_masks.lg_ch, &[2, 3], &[h, w])?; // [N,C,H,W]
        debug_assert_eq!(sp.shape(), [n, c, h, w]);
        let weighted = tape.mul(&sq, &sp)?;
        let weighted = tape.mul(&weighted, &ch)?;
        let inner = tape.sum_all(&weighted)?;
        let inner = tape.clamp_min(&inner, 0.0)?;
        let level_loss = tape.sqrt(&inner)?;
        total = Some(match total {
            None => level_loss,
            Some(t) => tape.add(&t, &level_loss)?,
        });
    }
    total.ok_or_else(|| Error::ShapeMismatch("no levels given".into()))
}

/// Channel attention feature: mean over channels, a spatial map.
pub fn attn_feature_ch(tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(Error::ShapeMismatch(format!("expected [C,H,W], got {:?}", x.shape())));
    }
    tape.mean(x, &[0])
}

/// Spatial attention feature: mean over positions, a channel vector.
pub fn attn_feature_sp(tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(Error::ShapeMismatch(format!("expected [C,H,W], got {:?}", x.shape())));
    }
    tape.mean(x, &[1, 2])
}

fn l2_norm(tape: &mut Tape, diff: &Tensor) -> Result<Tensor> {
    let sq = tape.square(diff)?;
    let s = tape.sum_all(&sq)?;
    tape.sqrt(&s)
}

/// Patches of one feature level: `per_image[n][p]` is patch p of image n.
#[derive(Debug, Clone)]
pub struct LevelPatches {
    pub per_image: Vec<Vec<Tensor>>,
}

/// Attention feature loss. The channel part averages the Euclidean norm of
/// global channel-attention differences with the per-patch mean; the spatial
/// part uses the global spatial attention features only. Student features
/// and patches must be channel-adapted to the teacher beforehand.
pub fn feature_attn_loss(
    tape: &mut Tape,
    f_t: &FpnFeatures,
    f_s: &FpnFeatures,
    patches_t: &[LevelPatches],
    patches_s: &[LevelPatches],
) -> Result<Tensor> {
    check_levels(f_t.levels.len(), f_s.levels.len())?;
    check_levels(f_t.levels.len(), patches_t.len())?;
    check_levels(f_t.levels.len(), patches_s.len())?;
    let mut total: Option<Tensor> = None;
    for ((ft, fs), (pt, ps)) in f_t
        .levels
        .iter()
        .zip(&f_s.levels)
        .zip(patches_t.iter().zip(patches_s))
    {
        if ft.shape() != fs.shape() {
            return Err(Error::ShapeMismatch(format!(
                "teacher {:?} vs student {:?}",
                ft.shape(),
                fs.shape()
            )));
        }
        let n = ft.shape()[0];
        if pt.per_image.len() != n || ps.per_image.len() != n {
            return Err(Error::ShapeMismatch("patch list does not match batch".into()));
        }
        for img in 0..n {
            let ft_img = tape.select(ft, 0, img)?;
            let fs_img = tape.select(fs, 0, img)?;

            let ch_t = attn_feature_ch(tape, &ft_img)?;
            let ch_s = attn_feature_ch(tape, &fs_img)?;
            let ch_diff = tape.sub(&ch_s, &ch_t)?;
            let ch_global = l2_norm(tape, &ch_diff)?;

            let img_pt = &pt.per_image[img];
            let img_ps = &ps.per_image[img];
            if img_pt.len() != img_ps.len() || img_pt.is_empty() {
                return Err(Error::ShapeMismatch("patch count mismatch".into()));
            }
            let mut patch_sum: Option<Tensor> = None;
            for (patch_t, patch_s) in img_pt.iter().zip(img_ps) {
                let ch_t = attn_feature_ch(tape, patch_t)?;
                let ch_s = attn_feature_ch(tape, patch_s)?;
                let d = tape.sub(&ch_s, &ch_t)?;
                let norm = l2_norm(tape, &d)?;
                patch_sum = Some(match patch_sum {
                    None => norm,
                    Some(t) => tape.add(&t, &norm)?,
                });
            }
            let patch_mean = tape.scale(&patch_sum.unwrap(), 1.0 / img_pt.len() as f64)?;

            let cha = tape.add(&ch_global, &patch_mean)?;
            let cha = tape.scale(&cha, 0.5)?;

            let sp_t = attn_feature_sp(tape, &ft_img)?;
            let sp_s = attn_feature_sp(tape, &fs_img)?;
            let sp_diff = tape.sub(&sp_s, &sp_t)?;
            let spa = l2_norm(tape, &sp_diff)?;

            let fa = tape.add(&cha, &spa)?;
            total = Some(match total {
                None => fa,
                Some(t) => tape.add(&t, &fa)?,
            });
        }
    }
    total.ok_or_else(|| Error::ShapeMismatch("no levels given".into()))
}

/// Masked classification head distillation: per anchor and location, the
/// cross-entropy of the student class distribution against the teacher's
/// (soft target), weighted by the combined spatial mask, summed everywhere.
pub fn cls_head_loss(
    tape: &mut Tape,
    o_s: &HeadOutputs,
    o_t: &HeadOutputs,
    masks: &AttnMasks,
) -> Result<Tensor> {
    check_levels(o_s.cls.len(), o_t.cls.len())?;
    check_levels(o_s.cls.len(), masks.levels.len())?;
    if o_s.num_classes != o_t.num_classes || o_s.anchors_per_cell != o_t.anchors_per_cell {
        return Err(Error::ShapeMismatch("head layouts differ".into()));
    }
    let classes = o_s.num_classes + 1;
    let a = o_s.anchors_per_cell;
    let mut total: Option<Tensor> = None;
    for (level, (s, t)) in o_s.cls.iter().zip(&o_t.cls).enumerate() {
        if s.shape() != t.shape() {
            return Err(Error::ShapeMismatch(format!(
                "cls outputs {:?} vs {:?}",
                s.shape(),
                t.shape()
            )));
        }
        let (n, h, w) = (s.shape()[0], s.shape()[2], s.shape()[3]);
        let s5 = tape.reshape(s, &[n, a, classes, h, w])?;
        let t5 = tape.reshape(t, &[n, a, classes, h, w])?;
        let p_t = tape.softmax(&t5, &[2])?;
        let ls_s = tape.log_softmax(&s5, &[2])?;
        let prod = tape.mul(&p_t, &ls_s)?;
        let ce_neg = tape.sum(&prod, &[2])?; // [N,A,H,W]
        let ce = tape.scale(&ce_neg, -1.0)?;
        let sp = tape.expand(&masks.levels[level].lg_sp, &[1], &[a])?;
        let weighted = tape.mul(&ce, &sp)?;
        let level_sum = tape.sum_all(&weighted)?;
        total = Some(match total {
            None => level_sum,
            Some(acc) => tape.add(&acc, &level_sum)?,
        });
    }
    total.ok_or_else(|| Error::ShapeMismatch("no levels given".into()))
}

/// Decode `[N, A, 4, H, W]` offsets against the anchor grid of one level
/// into per-location corner tensors (x1, y1, x2, y2), each `[N, A, H, W]`.
fn decode_boxes(
    tape: &mut Tape,
    offsets: &Tensor,
    anchors: &crate::boxes::LevelAnchors,
) -> Result<[Tensor; 4]> {
    let n = offsets.shape()[0];
    let (acx, acy, aw, ah) = anchors.center_tensors();
    let acx = tape.expand(&acx, &[0], &[n])?;
    let acy = tape.expand(&acy, &[0], &[n])?;
    let aw = tape.expand(&aw, &[0], &[n])?;
    let ah = tape.expand(&ah, &[0], &[n])?;

    let dx = tape.select(offsets, 2, 0)?;
    let dy = tape.select(offsets, 2, 1)?;
    let dw = tape.select(offsets, 2, 2)?;
    let dh = tape.select(offsets, 2, 3)?;

    let cx_off = tape.mul(&dx, &aw)?;
    let cx = tape.add(&acx, &cx_off)?;
    let cy_off = tape.mul(&dy, &ah)?;
    let cy = tape.add(&acy, &cy_off)?;

    let dw = tape.clamp_max(&dw, BOX_XFORM_CLIP)?;
    let dh = tape.clamp_max(&dh, BOX_XFORM_CLIP)?;
    let ew = tape.exp(&dw)?;
    let eh = tape.exp(&dh)?;
    let w = tape.mul(&aw, &ew)?;
    let h = tape.mul(&ah, &eh)?;
    let w = tape.clamp_min(&w, MIN_BOX_SIDE)?;
    let h = tape.clamp_min(&h, MIN_BOX_SIDE)?;

    let half_w = tape.scale(&w, 0.5)?;
    let half_h = tape.scale(&h, 0.5)?;
    let x1 = tape.sub(&cx, &half_w)?;
    let y1 = tape.sub(&cy, &half_h)?;
    let x2 = tape.add(&cx, &half_w)?;
    let y2 = tape.add(&cy, &half_h)?;
    Ok([x1, y1, x2, y2])
}

fn tensor_iou(tape: &mut Tape, a: &[Tensor; 4], b: &[Tensor; 4]) -> Result<Tensor> {
    let ix1 = tape.maximum(&a[0], &b[0])?;
    let iy1 = tape.maximum(&a[1], &b[1])?;
    let ix2 = tape.minimum(&a[2], &b[2])?;
    let iy2 = tape.minimum(&a[3], &b[3])?;
    let iw_raw = tape.sub(&ix2, &ix1)?;
    let iw = tape.relu(&iw_raw)?;
    let ih_raw = tape.sub(&iy2, &iy1)?;
    let ih = tape.relu(&ih_raw)?;
    let inter = tape.mul(&iw, &ih)?;

    let area = |tape: &mut Tape, c: &[Tensor; 4]| -> Result<Tensor> {
        let w = tape.sub(&c[2], &c[0])?;
        let h = tape.sub(&c[3], &c[1])?;
        tape.mul(&w, &h)
    };
    let area_a = area(tape, a)?;
    let area_b = area(tape, b)?;
    let sum_areas = tape.add(&area_a, &area_b)?;
    let union = tape.sub(&sum_areas, &inter)?;
    tape.div(&inter, &union)
}

/// Masked localization head distillation: teacher and student offsets are
/// decoded against the shared anchors, and 1 - IoU of the decoded boxes is
/// weighted by the combined spatial mask and summed.
pub fn loc_head_loss(
    tape: &mut Tape,
    k_s: &HeadOutputs,
    k_t: &HeadOutputs,
    anchors: &AnchorGrid,
    masks: &AttnMasks,
) -> Result<Tensor> {
    check_levels(k_s.loc.len(), k_t.loc.len())?;
    check_levels(k_s.loc.len(), anchors.levels.len())?;
    check_levels(k_s.loc.len(), masks.levels.len())?;
    let a = k_s.anchors_per_cell;
    let mut total: Option<Tensor> = None;
    for (level, (s, t)) in k_s.loc.iter().zip(&k_t.loc).enumerate() {
        if s.shape() != t.shape() {
            return Err(Error::ShapeMismatch(format!(
                "loc outputs {:?} vs {:?}",
                s.shape(),
                t.shape()
            )));
        }
        let (n, h, w) = (s.shape()[0], s.shape()[2], s.shape()[3]);
        let s5 = tape.reshape(s, &[n, a, 4, h, w])?;
        let t5 = tape.reshape(t, &[n, a, 4, h, w])?;
        let boxes_s = decode_boxes(tape, &s5, &anchors.levels[level])?;
        let boxes_t = decode_boxes(tape, &t5, &anchors.levels[level])?;
        let iou = tensor_iou(tape, &boxes_s, &boxes_t)?;
        let one = Tensor::scalar(1.0);
        let loss_map = tape.sub(&one, &iou)?; // [N,A,H,W]
        let sp = tape.expand(&masks.levels[level].lg_sp, &[1], &[a])?;
        let weighted = tape.mul(&loss_map, &sp)?;
        let level_sum = tape.sum_all(&weighted)?;
        total = Some(match total {
            None => level_sum,
            Some(acc) => tape.add(&acc, &level_sum)?,
        });
    }
    total.ok_or_else(|| Error::ShapeMismatch("no levels given".into()))
}

/// Objectness + regression loss against assigned anchor targets.
///
/// `labels` carry 1 for positive, 0 for negative and -1 for ignored anchors
/// per level (`[N, A, H, W]`); `target_offsets` are `[N, A, 4, H, W]` with
/// zeros outside positives. Classification averages binary cross-entropy
/// over all non-ignored anchors; regression averages smooth-L1 over
/// positive anchors.
pub fn rpn_loss(
    tape: &mut Tape,
    obj_logits: &[Tensor],
    loc_offsets: &[Tensor],
    labels: &[Tensor],
    target_offsets: &[Tensor],
    lambda_cls: f64,
    lambda_reg: f64,
) -> Result<Tensor> {
    check_levels(obj_logits.len(), labels.len())?;
    check_levels(loc_offsets.len(), target_offsets.len())?;
    check_levels(obj_logits.len(), loc_offsets.len())?;

    let mut n_cls = 0usize;
    let mut n_reg = 0usize;
    for lab in labels {
        n_cls += lab.data().iter().filter(|&&v| v >= 0.0).count();
        n_reg += lab.data().iter().filter(|&&v| v == 1.0).count();
    }
    if n_cls == 0 {
        return Err(Error::NoSampledAnchors);
    }

    let mut cls_sum: Option<Tensor> = None;
    let mut reg_sum: Option<Tensor> = None;
    for (level, (obj, lab)) in obj_logits.iter().zip(labels).enumerate() {
        if obj.shape() != lab.shape() {
            return Err(Error::ShapeMismatch(format!(
                "objectness {:?} vs labels {:?}",
                obj.shape(),
                lab.shape()
            )));
        }
        let sampled: Vec<f64> = lab.data().iter().map(|&v| if v >= 0.0 { 1.0 } else { 0.0 }).collect();
        let positive: Vec<f64> = lab.data().iter().map(|&v| if v == 1.0 { 1.0 } else { 0.0 }).collect();
        let targets01 = Tensor::from_vec(lab.shape().to_vec(), positive.clone())?;
        let sample_mask = Tensor::from_vec(lab.shape().to_vec(), sampled)?;
        let bce = tape.bce_with_logits(obj, &targets01)?;
        let bce = tape.mul(&bce, &sample_mask)?;
        let s = tape.sum_all(&bce)?;
        cls_sum = Some(match cls_sum {
            None => s,
            Some(acc) => tape.add(&acc, &s)?,
        });

        let offsets = &loc_offsets[level];
        let t_star = &target_offsets[level];
        let (n, h, w) = (lab.shape()[0], lab.shape()[2], lab.shape()[3]);
        let a = lab.shape()[1];
        let o5 = tape.reshape(offsets, &[n, a, 4, h, w])?;
        if t_star.shape() != [n, a, 4, h, w] {
            return Err(Error::ShapeMismatch(format!(
                "target offsets {:?} vs [{n},{a},4,{h},{w}]",
                t_star.shape()
            )));
        }
        let diff = tape.sub(&o5, t_star)?;
        let sl1 = tape.smooth_l1(&diff)?;
        let pos = Tensor::from_vec(lab.shape().to_vec(), positive)?;
        let pos4 = tape.expand(&pos, &[2], &[4])?;
        let masked = tape.mul(&sl1, &pos4)?;
        let s = tape.sum_all(&masked)?;
        reg_sum = Some(match reg_sum {
            None => s,
            Some(acc) => tape.add(&acc, &s)?,
        });
    }
    let cls = tape.scale(&cls_sum.unwrap(), lambda_cls / n_cls as f64)?;
    let reg = tape.scale(&reg_sum.unwrap(), lambda_reg / n_reg.max(1) as f64)?;
    tape.add(&cls, &reg)
}

/// All scalar components entering the total loss.
#[derive(Debug, Clone)]
pub struct LossParts {
    pub feature: Tensor,
    pub attention: Tensor,
    pub global: Tensor,
    pub cls_head: Tensor,
    pub loc_head: Tensor,
    pub rpn: Tensor,
}

/// Total distillation loss: weighted feature + attention terms, the global
/// term (already carrying its own weight), the head pair scaled together,
/// and the RPN term. The student's own task loss is added by the trainer.
pub fn total_loss(tape: &mut Tape, parts: &LossParts, w: &LossWeights) -> Result<Tensor> {
    for (name, part) in [
        ("feature", &parts.feature),
        ("attention", &parts.attention),
        ("global", &parts.global),
        ("cls_head", &parts.cls_head),
        ("loc_head", &parts.loc_head),
        ("rpn", &parts.rpn),
    ] {
        let v = part.item()?;
        if !v.is_finite() {
            return Err(Error::NonFiniteComponent(format!("{name} = {v}")));
        }
    }
    let fd = tape.scale(&parts.feature, w.feature)?;
    let fa = tape.scale(&parts.attention, w.attention)?;
    let heads = tape.add(&parts.cls_head, &parts.loc_head)?;
    let heads = tape.scale(&heads, w.head)?;
    let mut total = tape.add(&fd, &fa)?;
    total = tape.add(&total, &parts.global)?;
    total = tape.add(&total, &heads)?;
    tape.add(&total, &parts.rpn)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{compute_attn_masks, MaskConfig};
    use crate::boxes::{AnchorGrid, LevelAnchors};

    fn wavy(n: usize, f: f64) -> Vec<f64> {
        (0..n).map(|i| (i as f64 * f).sin()).collect()
    }

    fn unit_masks(n: usize, c: usize, h: usize, w: usize) -> AttnMasks {
        AttnMasks {
            levels: vec![crate::attention::LevelAttnMasks {
                lg_ch: Tensor::ones(&[n, c]),
                lg_sp: Tensor::ones(&[n, h, w]),
                l_ch: Tensor::ones(&[n, c]),
                l_sp: Tensor::ones(&[n, h, w]),
                g_ch: Tensor::ones(&[n, c]),
                g_sp: Tensor::ones(&[n, h, w]),
            }],
        }
    }

    fn identity_adapter(c: usize) -> ConvParams {
        let mut w = vec![0.0; c * c];
        for i in 0..c {
            w[i * c + i] = 1.0;
        }
        ConvParams {
            w: Tensor::from_vec(vec![c, c, 1, 1], w).unwrap(),
            b: Tensor::zeros(&[c]),
            stride: 1,
            pad: 0,
        }
    }

    #[test]
    fn weights_defaults_match_modes() {
        let one = LossWeights::one_stage();
        assert_eq!(one.feature, 5e-4);
        assert_eq!(one.attention, 2e-2);
        assert_eq!(one.head, 1e-1);
        let two = LossWeights::two_stage();
        assert_eq!(two.feature, 6e-5);
        assert_eq!(two.attention, 4e-3);
        assert_eq!(two.head, 1e-1);
        assert_eq!(two.rpn_cls, 1.0);
        assert_eq!(two.rpn_reg, 1.0);
    }

    #[test]
    fn feature_distill_zero_when_adapted_equal() {
        let mut tape = Tape::new();
        let data = wavy(2 * 3 * 16, 0.7);
        let f = Tensor::from_vec(vec![2, 3, 4, 4], data).unwrap();
        let f_t = FpnFeatures {
            levels: vec![f.clone()],
        };
        let f_s = FpnFeatures { levels: vec![f] };
        let masks = unit_masks(2, 3, 4, 4);
        let loss =
            feature_distill_loss(&mut tape, &f_t, &f_s, &[identity_adapter(3)], &masks).unwrap();
        assert_eq!(loss.item().unwrap(), 0.0);
    }

    #[test]
    fn feature_distill_uniform_masks_reduce_to_plain_error() {
        let mut tape = Tape::new();
        let dt = wavy(1 * 2 * 16, 0.3);
        let ds = wavy(1 * 2 * 16, 0.9);
        let f_t = FpnFeatures {
            levels: vec![Tensor::from_vec(vec![1, 2, 4, 4], dt.clone()).unwrap()],
        };
        let f_s = FpnFeatures {
            levels: vec![Tensor::from_vec(vec![1, 2, 4, 4], ds.clone()).unwrap()],
        };
        let masks = unit_masks(1, 2, 4, 4);
        let loss =
            feature_distill_loss(&mut tape, &f_t, &f_s, &[identity_adapter(2)], &masks).unwrap();

        // oracle: normalized squared error, summed, sqrt
        let norm = |d: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; d.len()];
            for c in 0..2 {
                let vals: Vec<f64> = (0..16).map(|i| d[c * 16 + i]).collect();
                let mu = vals.iter().sum::<f64>() / 16.0;
                let var = vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 16.0;
                for i in 0..16 {
                    out[c * 16 + i] = (vals[i] - mu) / (var + DEFAULT_EPS).sqrt();
                }
            }
            out
        };
        let nt = norm(&dt);
        let ns = norm(&ds);
        let expect: f64 = nt
            .iter()
            .zip(&ns)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!((loss.item().unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn attn_features_trivial_cases() {
        let mut tape = Tape::new();
        let x = Tensor::from_vec(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let ch = attn_feature_ch(&mut tape, &x).unwrap();
        assert_eq!(ch.data(), x.data());

        let two = Tensor::from_vec(vec![2, 2, 2], vec![2.0, 2.0, 2.0, 2.0, 4.0, 4.0, 4.0, 4.0]).unwrap();
        let ch = attn_feature_ch(&mut tape, &two).unwrap();
        assert!(ch.data().iter().all(|&v| v == 3.0));

        let x11 = Tensor::from_vec(vec![3, 1, 1], vec![5.0, 6.0, 7.0]).unwrap();
        let sp = attn_feature_sp(&mut tape, &x11).unwrap();
        assert_eq!(sp.data(), &[5.0, 6.0, 7.0]);
        let sp = attn_feature_sp(&mut tape, &two).unwrap();
        assert_eq!(sp.data(), &[2.0, 4.0]);
    }

    #[test]
    fn feature_attn_zero_at_equality_and_single_patch_coincides() {
        let mut tape = Tape::new();
        let data = wavy(3 * 16, 0.5);
        let f = Tensor::from_vec(vec![1, 3, 4, 4], data).unwrap();
        let features = FpnFeatures {
            levels: vec![f.clone()],
        };
        let img = tape.select(&f, 0, 0).unwrap();
        let patches = crate::attention::split_patches(&mut tape, &img, 4).unwrap();
        let lp = LevelPatches {
            per_image: vec![patches],
        };
        let loss = feature_attn_loss(
            &mut tape,
            &features,
            &features,
            std::slice::from_ref(&lp),
            std::slice::from_ref(&lp),
        )
        .unwrap();
        assert_eq!(loss.item().unwrap(), 0.0);
    }

    #[test]
    fn cls_head_equal_outputs_have_zero_gradient() {
        let mut tape = Tape::new();
        let logits = wavy(1 * 8 * 4, 1.3);
        let plain = Tensor::from_vec(vec![1, 8, 2, 2], logits).unwrap();
        let tracked = tape.watch(&plain);
        let mk = |cls: Tensor| HeadOutputs {
            cls: vec![cls],
            loc: vec![],
            obj: vec![],
            num_classes: 3,
            anchors_per_cell: 2,
        };
        let masks = unit_masks(1, 8, 2, 2);
        let loss = cls_head_loss(&mut tape, &mk(tracked.clone()), &mk(plain.clone()), &masks).unwrap();
        assert!(loss.item().unwrap() > 0.0); // teacher entropy
        let grads = tape.backward(&loss).unwrap();
        for g in grads.get(&tracked).unwrap() {
            assert!(g.abs() < 1e-10);
        }
    }

    #[test]
    fn cls_head_uniform_teacher_gives_log_c() {
        // uniform teacher distribution and uniform student: loss is the
        // entropy ln(C) at every anchor/location, times the mask weight
        let mut tape = Tape::new();
        let zeros = Tensor::zeros(&[1, 8, 2, 2]);
        let heads = HeadOutputs {
            cls: vec![zeros],
            loc: vec![],
            obj: vec![],
            num_classes: 3,
            anchors_per_cell: 2,
        };
        let masks = unit_masks(1, 8, 2, 2);
        let loss = cls_head_loss(&mut tape, &heads, &heads, &masks).unwrap();
        let locations = 2.0 * 2.0 * 2.0; // A * H * W
        let expect = locations * 4.0f64.ln();
        assert!((loss.item().unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn loc_head_zero_at_equal_offsets() {
        let mut tape = Tape::new();
        let offsets = Tensor::from_vec(vec![1, 8, 2, 2], wavy(32, 0.21)).unwrap();
        let heads = HeadOutputs {
            cls: vec![],
            loc: vec![offsets],
            obj: vec![],
            num_classes: 3,
            anchors_per_cell: 2,
        };
        let anchors = AnchorGrid {
            levels: vec![LevelAnchors::new(8, 2, 2, &[16.0, 24.0])],
        };
        let masks = unit_masks(1, 8, 2, 2);
        let loss = loc_head_loss(&mut tape, &heads, &heads, &anchors, &masks).unwrap();
        assert!(loss.item().unwrap().abs() < 1e-12);
    }

    #[test]
    fn loc_head_matches_scalar_iou_for_shifted_box() {
        // teacher shifted so the plain-math IoU is 1/7: per-location loss 6/7
        let mut tape = Tape::new();
        let anchors = AnchorGrid {
            levels: vec![LevelAnchors::new(8, 1, 1, &[2.0])],
        };
        let zero = Tensor::zeros(&[1, 4, 1, 1]);
        // anchor box is 2x2 centered at (4,4): corners (3,3,5,5);
        // teacher decodes to (4,4,6,6): dx = dy = 0.5
        let mut t_off = vec![0.0; 4];
        t_off[0] = 0.5;
        t_off[1] = 0.5;
        let t = Tensor::from_vec(vec![1, 4, 1, 1], t_off).unwrap();
        let mk = |loc: Tensor| HeadOutputs {
            cls: vec![],
            loc: vec![loc],
            obj: vec![],
            num_classes: 3,
            anchors_per_cell: 1,
        };
        let masks = unit_masks(1, 4, 1, 1);
        let loss = loc_head_loss(&mut tape, &mk(zero), &mk(t), &anchors, &masks).unwrap();
        assert!((loss.item().unwrap() - 6.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn rpn_loss_perfect_predictions_vanish() {
        let mut tape = Tape::new();
        let labels = Tensor::from_vec(vec![1, 2, 1, 1], vec![1.0, 0.0]).unwrap();
        // saturated logits: sigmoid(30) ~ 1, sigmoid(-30) ~ 0
        let obj = Tensor::from_vec(vec![1, 2, 1, 1], vec![30.0, -30.0]).unwrap();
        let offsets = Tensor::zeros(&[1, 8, 1, 1]);
        let t_star = Tensor::zeros(&[1, 2, 4, 1, 1]);
        let loss = rpn_loss(
            &mut tape,
            &[obj],
            &[offsets],
            &[labels],
            &[t_star],
            1.0,
            1.0,
        )
        .unwrap();
        assert!(loss.item().unwrap() < 1e-6);
    }

    #[test]
    fn rpn_loss_single_positive_half_offset() {
        // one positive anchor, |t - t*| = 0.5 per coordinate:
        // regression term = 4 * (0.25 / 2) = 0.5
        let mut tape = Tape::new();
        let labels = Tensor::from_vec(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let obj = Tensor::from_vec(vec![1, 1, 1, 1], vec![40.0]).unwrap();
        let offsets = Tensor::full(&[1, 4, 1, 1], 0.5);
        let t_star = Tensor::zeros(&[1, 1, 4, 1, 1]);
        let loss = rpn_loss(
            &mut tape,
            &[obj],
            &[offsets],
            &[labels],
            &[t_star],
            1.0,
            1.0,
        )
        .unwrap();
        assert!((loss.item().unwrap() - 0.5).abs() < 1e-9);
    }

    #[test]
    fn rpn_loss_all_ignored_is_error() {
        let mut tape = Tape::new();
        let labels = Tensor::full(&[1, 1, 1, 1], -1.0);
        let obj = Tensor::zeros(&[1, 1, 1, 1]);
        let offsets = Tensor::zeros(&[1, 4, 1, 1]);
        let t_star = Tensor::zeros(&[1, 1, 4, 1, 1]);
        assert!(matches!(
            rpn_loss(&mut tape, &[obj], &[offsets], &[labels], &[t_star], 1.0, 1.0),
            Err(Error::NoSampledAnchors)
        ));
    }

    #[test]
    fn total_loss_arithmetic_and_finiteness() {
        let mut tape = Tape::new();
        let one = || Tensor::scalar(1.0);
        let parts = LossParts {
            feature: one(),
            attention: one(),
            global: one(),
            cls_head: one(),
            loc_head: one(),
            rpn: one(),
        };
        let w = LossWeights {
            feature: 1.0,
            attention: 1.0,
            head: 1.0,
            rpn_cls: 1.0,
            rpn_reg: 1.0,
        };
        let total = total_loss(&mut tape, &parts, &w).unwrap();
        assert_eq!(total.item().unwrap(), 6.0);

        let bad = LossParts {
            feature: Tensor::scalar(f64::NAN),
            ..parts
        };
        assert!(matches!(
            total_loss(&mut tape, &bad, &w),
            Err(Error::NonFiniteComponent(_))
        ));
    }
}
