//! Local, global, and combined channel/spatial attention masks.
//!
//! A channel mask softmaxes the per-channel mean magnitude over channels and
//! rescales; a spatial mask softmaxes the per-position channel-mean magnitude
//! over positions. Local variants run per non-overlapping I x I patch; the
//! combined mask is the arithmetic mean of local and global. All of it runs
//! on the tape, so mask values stay differentiable with respect to whichever
//! features were tracked.

use serde::{Deserialize, Serialize};

use crate::boxes::Box2D;
use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Scale applied to the channel softmax (sums to this over channels).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelScale {
    /// H*W prefactor, as printed in the channel-mask equation.
    MapArea,
    /// C prefactor (the dimensionally conventional alternative).
    ChannelCount,
}

/// Scale applied to the spatial softmax (sums to this over positions).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialScale {
    /// C prefactor, as printed in the spatial-mask equation.
    ChannelCount,
    /// H*W prefactor (the dimensionally conventional alternative).
    MapArea,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskConfig {
    pub temperature: f64,
    pub instance_size: usize,
    pub channel_scale: ChannelScale,
    pub spatial_scale: SpatialScale,
    pub use_proposal_mask: bool,
}

impl MaskConfig {
    /// One-stage defaults: T = 0.1, proposal restriction off.
    pub fn one_stage() -> MaskConfig {
        MaskConfig {
            temperature: 0.1,
            instance_size: 4,
            channel_scale: ChannelScale::MapArea,
            spatial_scale: SpatialScale::ChannelCount,
            use_proposal_mask: false,
        }
    }

    /// Two-stage defaults: T = 0.4, proposal restriction on.
    pub fn two_stage() -> MaskConfig {
        MaskConfig {
            temperature: 0.4,
            use_proposal_mask: true,
            ..MaskConfig::one_stage()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(Error::ConfigError("mask temperature must be positive".into()));
        }
        if self.instance_size == 0 {
            return Err(Error::ConfigError("instance size must be at least 1".into()));
        }
        Ok(())
    }

    fn channel_scale_value(&self, c: usize, h: usize, w: usize) -> f64 {
        match self.channel_scale {
            ChannelScale::MapArea => (h * w) as f64,
            ChannelScale::ChannelCount => c as f64,
        }
    }

    fn spatial_scale_value(&self, c: usize, h: usize, w: usize) -> f64 {
        match self.spatial_scale {
            SpatialScale::ChannelCount => c as f64,
            SpatialScale::MapArea => (h * w) as f64,
        }
    }
}

/// A box with the objectness score it was proposed with.
#[derive(Debug, Clone, Copy)]
pub struct ScoredBox {
    pub bbox: Box2D,
    pub score: f64,
}

/// Teacher proposals, per image, in image pixel coordinates.
#[derive(Debug, Clone, Default)]
pub struct ProposalSet {
    pub per_image: Vec<Vec<ScoredBox>>,
}

impl ProposalSet {
    pub fn empty(num_images: usize) -> ProposalSet {
        ProposalSet {
            per_image: vec![Vec::new(); num_images],
        }
    }

    /// Boxes of one image mapped into a feature level's coordinate frame and
    /// clipped to the map; degenerate boxes are dropped.
    pub fn level_boxes(&self, image: usize, stride: usize, h: usize, w: usize) -> Vec<Box2D> {
        self.per_image[image]
            .iter()
            .map(|sb| sb.bbox.scaled(1.0 / stride as f64).clip(w as f64, h as f64))
            .filter(|b| b.x_min < b.x_max && b.y_min < b.y_max)
            .collect()
    }
}

/// Binary {0,1} mask of the cells covered by the union of the boxes; a cell
/// counts as covered when its center lies inside a box. All-ones when no
/// boxes are given.
pub fn proposal_region_mask(boxes: Option<&[Box2D]>, h: usize, w: usize) -> Result<Tensor> {
    let boxes = match boxes {
        Some(b) if !b.is_empty() => b,
        _ => return Ok(Tensor::ones(&[h, w])),
    };
    let mut mask = vec![0.0; h * w];
    for b in boxes {
        b.validate()?;
        if b.x_min < 0.0 || b.y_min < 0.0 || b.x_max > w as f64 || b.y_max > h as f64 {
            return Err(Error::BoxOutOfBounds(format!("{b:?} on {h}x{w} map")));
        }
        for i in 0..h {
            let cy = i as f64 + 0.5;
            if cy < b.y_min || cy > b.y_max {
                continue;
            }
            for j in 0..w {
                let cx = j as f64 + 0.5;
                if cx >= b.x_min && cx <= b.x_max {
                    mask[i * w + j] = 1.0;
                }
            }
        }
    }
    Tensor::from_vec(vec![h, w], mask)
}

fn check_chw(x: &Tensor) -> Result<(usize, usize, usize)> {
    if x.rank() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "expected [C,H,W] feature map, got {:?}",
            x.shape()
        )));
    }
    Ok((x.shape()[0], x.shape()[1], x.shape()[2]))
}

fn check_region(region: &Tensor, h: usize, w: usize) -> Result<f64> {
    if region.shape() != [h, w] {
        return Err(Error::ShapeMismatch(format!(
            "region {:?} vs {h}x{w} map",
            region.shape()
        )));
    }
    if region.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::DomainError("region mask must be binary".into()));
    }
    let count: f64 = region.data().iter().sum();
    if count == 0.0 {
        return Err(Error::EmptyRegion);
    }
    Ok(count)
}

/// Channel attention mask: softmax over channels of the mean |x| inside the
/// region, divided by the temperature, times the configured scale.
pub fn channel_mask(tape: &mut Tape, x: &Tensor, region: &Tensor, cfg: &MaskConfig) -> Result<Tensor> {
    let (c, h, w) = check_chw(x)?;
    let count = check_region(region, h, w)?;
    let mag = tape.abs(x)?;
    let region_full = tape.expand(region, &[0], &[c])?;
    let masked = tape.mul(&mag, &region_full)?;
    let sums = tape.sum(&masked, &[1, 2])?;
    let g = tape.scale(&sums, 1.0 / (count * cfg.temperature))?;
    let sm = tape.softmax(&g, &[0])?;
    tape.scale(&sm, cfg.channel_scale_value(c, h, w))
}

/// Spatial attention mask: softmax over positions of the channel-mean |x|,
/// restricted to the region (cells outside come out exactly 0), times the
/// configured scale.
pub fn spatial_mask(tape: &mut Tape, x: &Tensor, region: &Tensor, cfg: &MaskConfig) -> Result<Tensor> {
    let (c, h, w) = check_chw(x)?;
    check_region(region, h, w)?;
    let mag = tape.abs(x)?;
    let g = tape.mean(&mag, &[0])?;
    let g = tape.scale(&g, 1.0 / cfg.temperature)?;
    let sm = tape.masked_softmax(&g, region, &[0, 1])?;
    tape.scale(&sm, cfg.spatial_scale_value(c, h, w))
}

/// Split `[C,H,W]` into non-overlapping `[C,I,I]` patches in row-major patch
/// order. Reassembling with [`reassemble_patches`] reproduces the input
/// bit-exactly.
pub fn split_patches(tape: &mut Tape, x: &Tensor, instance: usize) -> Result<Vec<Tensor>> {
    let (_c, h, w) = check_chw(x)?;
    if instance == 0 || h % instance != 0 || w % instance != 0 {
        return Err(Error::IndivisibleShape(format!(
            "{h}x{w} map not divisible into {instance}x{instance} patches"
        )));
    }
    let mut patches = Vec::with_capacity((h / instance) * (w / instance));
    for py in 0..h / instance {
        for px in 0..w / instance {
            patches.push(tape.slice_window(x, py * instance, px * instance, instance, instance)?);
        }
    }
    Ok(patches)
}

/// Inverse of [`split_patches`] for any rank >= 2 patch list.
pub fn reassemble_patches(tape: &mut Tape, patches: &[Tensor], h: usize, w: usize) -> Result<Tensor> {
    if patches.is_empty() {
        return Err(Error::ShapeMismatch("no patches to reassemble".into()));
    }
    let r = patches[0].rank();
    let (ph, pw) = (patches[0].shape()[r - 2], patches[0].shape()[r - 1]);
    if h % ph != 0 || w % pw != 0 || patches.len() != (h / ph) * (w / pw) {
        return Err(Error::IndivisibleShape(format!(
            "{} patches of {ph}x{pw} cannot tile {h}x{w}",
            patches.len()
        )));
    }
    let cols = w / pw;
    let mut acc: Option<Tensor> = None;
    for (p, patch) in patches.iter().enumerate() {
        let y0 = (p / cols) * ph;
        let x0 = (p % cols) * pw;
        let placed = tape.pad_window(patch, y0, x0, h, w)?;
        acc = Some(match acc {
            None => placed,
            Some(t) => tape.add(&t, &placed)?,
        });
    }
    Ok(acc.unwrap())
}

/// Local masks of one teacher/student feature pair.
#[derive(Debug, Clone)]
pub struct LocalMasks {
    /// Per-patch combined channel masks, in patch order (skipping patches
    /// with no region overlap).
    pub channel_per_patch: Vec<Tensor>,
    /// Patch channel masks averaged into one length-C vector.
    pub channel: Tensor,
    /// Patch spatial masks reassembled onto the full H x W grid.
    pub spatial: Tensor,
}

/// Per-patch masks: channel and spatial masks of teacher and student patches
/// summed patchwise, with spatial patch masks placed back on the full grid
/// and channel patch masks averaged into a single length-C vector.
///
/// Patches whose region has no active cell contribute a zero spatial block
/// and are left out of the channel average.
pub fn local_masks(
    tape: &mut Tape,
    f_t: &Tensor,
    f_s: &Tensor,
    region: &Tensor,
    cfg: &MaskConfig,
) -> Result<LocalMasks> {
    if f_t.shape() != f_s.shape() {
        return Err(Error::ShapeMismatch(format!(
            "teacher {:?} vs student {:?}",
            f_t.shape(),
            f_s.shape()
        )));
    }
    let (_c, h, w) = check_chw(f_t)?;
    check_region(region, h, w)?;
    let i = cfg.instance_size;
    let patches_t = split_patches(tape, f_t, i)?;
    let patches_s = split_patches(tape, f_s, i)?;
    let cols = w / i;

    let mut kept_channel = Vec::new();
    let mut spatial_acc: Option<Tensor> = None;
    for (p, (pt, ps)) in patches_t.iter().zip(&patches_s).enumerate() {
        let y0 = (p / cols) * i;
        let x0 = (p % cols) * i;
        let region_p = tape.slice_window(region, y0, x0, i, i)?;
        if region_p.data().iter().all(|&v| v == 0.0) {
            continue;
        }
        let ch_t = channel_mask(tape, pt, &region_p, cfg)?;
        let ch_s = channel_mask(tape, ps, &region_p, cfg)?;
        kept_channel.push(tape.add(&ch_t, &ch_s)?);

        let sp_t = spatial_mask(tape, pt, &region_p, cfg)?;
        let sp_s = spatial_mask(tape, ps, &region_p, cfg)?;
        let sp = tape.add(&sp_t, &sp_s)?;
        let placed = tape.pad_window(&sp, y0, x0, h, w)?;
        spatial_acc = Some(match spatial_acc {
            None => placed,
            Some(t) => tape.add(&t, &placed)?,
        });
    }
    // check_region guarantees at least one active cell, hence one kept patch
    let channel = if kept_channel.len() == 1 {
        kept_channel[0].clone()
    } else {
        let stacked = tape.stack(&kept_channel)?;
        tape.mean(&stacked, &[0])?
    };
    Ok(LocalMasks {
        channel_per_patch: kept_channel,
        channel,
        spatial: spatial_acc.expect("at least one patch overlaps the region"),
    })
}

/// Whole-map channel and spatial masks, teacher plus student.
pub fn global_masks(
    tape: &mut Tape,
    f_t: &Tensor,
    f_s: &Tensor,
    region: &Tensor,
    cfg: &MaskConfig,
) -> Result<(Tensor, Tensor)> {
    if f_t.shape() != f_s.shape() {
        return Err(Error::ShapeMismatch(format!(
            "teacher {:?} vs student {:?}",
            f_t.shape(),
            f_s.shape()
        )));
    }
    let ch_t = channel_mask(tape, f_t, region, cfg)?;
    let ch_s = channel_mask(tape, f_s, region, cfg)?;
    let g_ch = tape.add(&ch_t, &ch_s)?;
    let sp_t = spatial_mask(tape, f_t, region, cfg)?;
    let sp_s = spatial_mask(tape, f_s, region, cfg)?;
    let g_sp = tape.add(&sp_t, &sp_s)?;
    Ok((g_ch, g_sp))
}

/// Arithmetic mean of local and global masks.
pub fn combine_masks(
    tape: &mut Tape,
    l_ch: &Tensor,
    l_sp: &Tensor,
    g_ch: &Tensor,
    g_sp: &Tensor,
) -> Result<(Tensor, Tensor)> {
    if l_ch.shape() != g_ch.shape() || l_sp.shape() != g_sp.shape() {
        return Err(Error::ShapeMismatch("local/global mask shapes differ".into()));
    }
    let ch = tape.add(l_ch, g_ch)?;
    let lg_ch = tape.scale(&ch, 0.5)?;
    let sp = tape.add(l_sp, g_sp)?;
    let lg_sp = tape.scale(&sp, 0.5)?;
    Ok((lg_ch, lg_sp))
}

/// Masks of one image at one FPN level, with the intermediates retained.
#[derive(Debug, Clone)]
pub struct ImageMasks {
    pub lg_ch: Tensor,
    pub lg_sp: Tensor,
    pub l_ch: Tensor,
    pub l_sp: Tensor,
    pub g_ch: Tensor,
    pub g_sp: Tensor,
}

/// Full mask pipeline for one image: local + global + combination.
pub fn image_masks(
    tape: &mut Tape,
    f_t: &Tensor,
    f_s: &Tensor,
    region: &Tensor,
    cfg: &MaskConfig,
) -> Result<ImageMasks> {
    let local = local_masks(tape, f_t, f_s, region, cfg)?;
    let (g_ch, g_sp) = global_masks(tape, f_t, f_s, region, cfg)?;
    let (lg_ch, lg_sp) = combine_masks(tape, &local.channel, &local.spatial, &g_ch, &g_sp)?;
    Ok(ImageMasks {
        lg_ch,
        lg_sp,
        l_ch: local.channel,
        l_sp: local.spatial,
        g_ch,
        g_sp,
    })
}

/// Batched masks of one FPN level: combined masks stacked over the batch.
#[derive(Debug, Clone)]
pub struct LevelAttnMasks {
    /// [N, C]
    pub lg_ch: Tensor,
    /// [N, H, W]
    pub lg_sp: Tensor,
    pub l_ch: Tensor,
    pub l_sp: Tensor,
    pub g_ch: Tensor,
    pub g_sp: Tensor,
}

/// Combined channel and spatial attention masks for every FPN level.
#[derive(Debug, Clone)]
pub struct AttnMasks {
    pub levels: Vec<LevelAttnMasks>,
}

/// Compute batched masks from per-level `[N,C,H,W]` teacher features and
/// channel-adapted student features. When `cfg.use_proposal_mask` is set and
/// proposals are given, each image's masks are restricted to the union of
/// its proposal boxes mapped into the level frame.
pub fn compute_attn_masks(
    tape: &mut Tape,
    teacher_levels: &[Tensor],
    student_levels: &[Tensor],
    proposals: Option<&ProposalSet>,
    strides: &[usize],
    cfg: &MaskConfig,
) -> Result<AttnMasks> {
    if teacher_levels.len() != student_levels.len() || teacher_levels.len() != strides.len() {
        return Err(Error::ShapeMismatch("level count mismatch".into()));
    }
    let mut levels = Vec::with_capacity(teacher_levels.len());
    for ((f_t, f_s), &stride) in teacher_levels.iter().zip(student_levels).zip(strides) {
        if f_t.shape() != f_s.shape() {
            return Err(Error::ShapeMismatch(format!(
                "teacher {:?} vs student {:?}",
                f_t.shape(),
                f_s.shape()
            )));
        }
        let (n, h, w) = (f_t.shape()[0], f_t.shape()[2], f_t.shape()[3]);
        let mut per_image = Vec::with_capacity(n);
        for img in 0..n {
            let region = match (cfg.use_proposal_mask, proposals) {
                (true, Some(p)) => {
                    let boxes = p.level_boxes(img, stride, h, w);
                    proposal_region_mask(Some(&boxes), h, w)?
                }
                _ => Tensor::ones(&[h, w]),
            };
            let ft_img = tape.select(f_t, 0, img)?;
            let fs_img = tape.select(f_s, 0, img)?;
            per_image.push(image_masks(tape, &ft_img, &fs_img, &region, cfg)?);
        }
        let stack_of = |tape: &mut Tape, pick: &dyn Fn(&ImageMasks) -> Tensor| -> Result<Tensor> {
            let parts: Vec<Tensor> = per_image.iter().map(pick).collect();
            tape.stack(&parts)
        };
        levels.push(LevelAttnMasks {
            lg_ch: stack_of(tape, &|m| m.lg_ch.clone())?,
            lg_sp: stack_of(tape, &|m| m.lg_sp.clone())?,
            l_ch: stack_of(tape, &|m| m.l_ch.clone())?,
            l_sp: stack_of(tape, &|m| m.l_sp.clone())?,
            g_ch: stack_of(tape, &|m| m.g_ch.clone())?,
            g_sp: stack_of(tape, &|m| m.g_sp.clone())?,
        });
    }
    Ok(AttnMasks { levels })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> MaskConfig {
        MaskConfig::one_stage()
    }

    fn ones_region(h: usize, w: usize) -> Tensor {
        Tensor::ones(&[h, w])
    }

    #[test]
    fn region_mask_no_proposals_is_all_ones() {
        let m = proposal_region_mask(None, 4, 4).unwrap();
        assert!(m.data().iter().all(|&v| v == 1.0));
        let m = proposal_region_mask(Some(&[]), 4, 4).unwrap();
        assert!(m.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn region_mask_full_cover_and_out_of_bounds() {
        let full = Box2D::new(0.0, 0.0, 4.0, 4.0).unwrap();
        let m = proposal_region_mask(Some(&[full]), 4, 4).unwrap();
        assert!(m.data().iter().all(|&v| v == 1.0));

        let off = Box2D::new(0.0, 0.0, 5.0, 4.0).unwrap();
        assert!(matches!(
            proposal_region_mask(Some(&[off]), 4, 4),
            Err(Error::BoxOutOfBounds(_))
        ));
    }

    #[test]
    fn region_mask_union_matches_containment_oracle() {
        let a = Box2D::new(0.0, 0.0, 2.0, 3.0).unwrap();
        let b = Box2D::new(1.0, 1.5, 3.6, 4.0).unwrap();
        let m = proposal_region_mask(Some(&[a, b]), 4, 4).unwrap();
        let mut expect = vec![0.0; 16];
        for i in 0..4 {
            for j in 0..4 {
                let (cx, cy) = (j as f64 + 0.5, i as f64 + 0.5);
                for bx in [&a, &b] {
                    if cx >= bx.x_min && cx <= bx.x_max && cy >= bx.y_min && cy <= bx.y_max {
                        expect[i * 4 + j] = 1.0;
                    }
                }
            }
        }
        assert_eq!(m.data(), &expect[..]);
    }

    #[test]
    fn channel_mask_uniform_input_gets_prefactor() {
        // constant input over 4 channels on an 8x8 map, MapArea scale:
        // every entry is 64 * (1/4) = 16
        let mut tape = Tape::new();
        let x = Tensor::full(&[4, 8, 8], 3.0);
        let m = channel_mask(&mut tape, &x, &ones_region(8, 8), &cfg()).unwrap();
        for v in m.data() {
            assert!((v - 16.0).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_mask_high_temperature_is_uniform() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..4 * 16).map(|i| (i as f64 * 0.13).sin() * 0.1).collect();
        let x = Tensor::from_vec(vec![4, 4, 4], data).unwrap();
        let hot = MaskConfig {
            temperature: 1e6,
            ..cfg()
        };
        let m = channel_mask(&mut tape, &x, &ones_region(4, 4), &hot).unwrap();
        let scale = 16.0; // HW
        for v in m.data() {
            assert!((v - scale / 4.0).abs() < 1e-6);
        }
    }

    #[test]
    fn spatial_mask_uniform_input() {
        // constant input on a 2x2 map with C = 3: each cell is 3/4
        let mut tape = Tape::new();
        let x = Tensor::full(&[3, 2, 2], -1.25);
        let m = spatial_mask(&mut tape, &x, &ones_region(2, 2), &cfg()).unwrap();
        for v in m.data() {
            assert!((v - 0.75).abs() < 1e-12);
        }
    }

    #[test]
    fn spatial_mask_region_restriction() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..3 * 16).map(|i| (i as f64 * 0.31).cos()).collect();
        let x = Tensor::from_vec(vec![3, 4, 4], data).unwrap();
        let mut region = vec![0.0; 16];
        for cell in region.iter_mut().take(8) {
            *cell = 1.0;
        }
        let region = Tensor::from_vec(vec![4, 4], region).unwrap();
        let m = spatial_mask(&mut tape, &x, &region, &cfg()).unwrap();
        for (i, v) in m.data().iter().enumerate() {
            if i >= 8 {
                assert_eq!(*v, 0.0);
            }
        }
        let sum: f64 = m.data().iter().sum();
        assert!((sum - 3.0).abs() < 1e-9);
    }

    #[test]
    fn empty_region_is_an_error() {
        let mut tape = Tape::new();
        let x = Tensor::ones(&[2, 2, 2]);
        let region = Tensor::zeros(&[2, 2]);
        assert!(matches!(
            channel_mask(&mut tape, &x, &region, &cfg()),
            Err(Error::EmptyRegion)
        ));
        assert!(matches!(
            spatial_mask(&mut tape, &x, &region, &cfg()),
            Err(Error::EmptyRegion)
        ));
    }

    #[test]
    fn split_patches_counts_and_roundtrip() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..2 * 64).map(|i| i as f64).collect();
        let x = Tensor::from_vec(vec![2, 8, 8], data).unwrap();
        let patches = split_patches(&mut tape, &x, 4).unwrap();
        assert_eq!(patches.len(), 4);
        let back = reassemble_patches(&mut tape, &patches, 8, 8).unwrap();
        assert_eq!(back.data(), x.data());

        // degenerate tiling: I = H = W gives one patch equal to the input
        let patches = split_patches(&mut tape, &x, 8).unwrap();
        assert_eq!(patches.len(), 1);
        assert_eq!(patches[0].data(), x.data());

        assert!(matches!(
            split_patches(&mut tape, &x, 3),
            Err(Error::IndivisibleShape(_))
        ));
    }

    #[test]
    fn local_masks_equal_twice_single_detector_when_twins() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..3 * 16).map(|i| (i as f64 * 0.7).sin()).collect();
        let x = Tensor::from_vec(vec![3, 4, 4], data).unwrap();
        let c = MaskConfig {
            instance_size: 2,
            ..cfg()
        };
        let region = ones_region(4, 4);
        let local = local_masks(&mut tape, &x, &x, &region, &c).unwrap();

        // single-detector per-patch masks, doubled
        let patches = split_patches(&mut tape, &x, 2).unwrap();
        for (p, patch) in patches.iter().enumerate() {
            let region_p = Tensor::ones(&[2, 2]);
            let single = channel_mask(&mut tape, patch, &region_p, &c).unwrap();
            for (a, b) in local.channel_per_patch[p].data().iter().zip(single.data()) {
                assert!((a - 2.0 * b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_patch_local_equals_global_bitwise() {
        let mut tape = Tape::new();
        let dt: Vec<f64> = (0..3 * 16).map(|i| (i as f64 * 0.37).sin()).collect();
        let ds: Vec<f64> = (0..3 * 16).map(|i| (i as f64 * 0.53).cos()).collect();
        let f_t = Tensor::from_vec(vec![3, 4, 4], dt).unwrap();
        let f_s = Tensor::from_vec(vec![3, 4, 4], ds).unwrap();
        let c = MaskConfig {
            instance_size: 4,
            ..cfg()
        };
        let region = ones_region(4, 4);
        let local = local_masks(&mut tape, &f_t, &f_s, &region, &c).unwrap();
        let (g_ch, g_sp) = global_masks(&mut tape, &f_t, &f_s, &region, &c).unwrap();
        assert_eq!(local.channel.data(), g_ch.data());
        assert_eq!(local.spatial.data(), g_sp.data());

        let masks = image_masks(&mut tape, &f_t, &f_s, &region, &c).unwrap();
        assert_eq!(masks.lg_ch.data(), g_ch.data());
        assert_eq!(masks.lg_sp.data(), g_sp.data());
    }

    #[test]
    fn combine_masks_arithmetic() {
        let mut tape = Tape::new();
        let l = Tensor::full(&[3], 2.0);
        let g = Tensor::full(&[3], 4.0);
        let ls = Tensor::full(&[2, 2], 2.0);
        let gs = Tensor::full(&[2, 2], 4.0);
        let (lg_ch, lg_sp) = combine_masks(&mut tape, &l, &ls, &g, &gs).unwrap();
        assert!(lg_ch.data().iter().all(|&v| v == 3.0));
        assert!(lg_sp.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn global_masks_zero_student_adds_uniform() {
        // |0| input produces uniform softmax, so G = teacher mask + uniform
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..2 * 4).map(|i| (i as f64) * 0.5 + 0.1).collect();
        let f_t = Tensor::from_vec(vec![2, 2, 2], data).unwrap();
        let f_s = Tensor::zeros(&[2, 2, 2]);
        let region = ones_region(2, 2);
        let (g_ch, _) = global_masks(&mut tape, &f_t, &f_s, &region, &cfg()).unwrap();
        let t_only = channel_mask(&mut tape, &f_t, &region, &cfg()).unwrap();
        let uniform = 4.0 / 2.0; // scale HW=4 over C=2 channels
        for (g, t) in g_ch.data().iter().zip(t_only.data()) {
            assert!((g - (t + uniform)).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_sums_hit_configured_scales() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..4 * 36).map(|i| (i as f64 * 0.11).sin() * 3.0).collect();
        let x = Tensor::from_vec(vec![4, 6, 6], data).unwrap();
        let region = ones_region(6, 6);

        let ch = channel_mask(&mut tape, &x, &region, &cfg()).unwrap();
        let sum: f64 = ch.data().iter().sum();
        assert!((sum - 36.0).abs() < 1e-9);

        let dim_cfg = MaskConfig {
            channel_scale: ChannelScale::ChannelCount,
            spatial_scale: SpatialScale::MapArea,
            ..cfg()
        };
        let ch = channel_mask(&mut tape, &x, &region, &dim_cfg).unwrap();
        let sum: f64 = ch.data().iter().sum();
        assert!((sum - 4.0).abs() < 1e-9);

        let sp = spatial_mask(&mut tape, &x, &region, &dim_cfg).unwrap();
        let sum: f64 = sp.data().iter().sum();
        assert!((sum - 36.0).abs() < 1e-9);
    }
}
