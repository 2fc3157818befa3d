//! Central finite differences and the gradient-check suites behind the
//! `gradcheck` CLI command. The finite-difference path never touches
//! `Tape::backward`, so it stays an independent oracle for it.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Central-difference gradient of a scalar function at `x`:
/// (f(x + h e_i) - f(x - h e_i)) / (2h) per element.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let mut grad = vec![0.0; x.len()];
    let base = x.data().to_vec();
    for i in 0..x.len() {
        let mut plus = base.clone();
        plus[i] += h;
        let fp = f(&Tensor::from_vec(x.shape().to_vec(), plus)?)?;
        let mut minus = base.clone();
        minus[i] -= h;
        let fm = f(&Tensor::from_vec(x.shape().to_vec(), minus)?)?;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// Worst pairwise deviation between an analytic and a numeric gradient:
/// absolute error, relative error (largest-magnitude denominator).
pub fn grad_deviation(analytic: &[f64], numeric: &[f64]) -> (f64, f64) {
    let mut max_abs = 0.0f64;
    let mut max_rel = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        let abs = (a - n).abs();
        max_abs = max_abs.max(abs);
        let denom = a.abs().max(n.abs());
        if denom > 1e-8 {
            max_rel = max_rel.max(abs / denom);
        }
    }
    (max_abs, max_rel)
}

/// One named check: passes when the relative error is under `rel_tol` or the
/// absolute error is under `abs_tol` (guards near-zero gradients).
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_abs: f64,
    pub max_rel: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel < self.rel_tol || self.max_abs < self.abs_tol
    }
}

#[derive(Debug, Default, Clone)]
pub struct GradCheckReport {
    pub checks: Vec<CheckResult>,
}

impl GradCheckReport {
    pub fn record(&mut self, name: &str, analytic: &[f64], numeric: &[f64], rel_tol: f64, abs_tol: f64) {
        let (max_abs, max_rel) = grad_deviation(analytic, numeric);
        self.checks.push(CheckResult {
            name: name.to_string(),
            max_abs,
            max_rel,
            rel_tol,
            abs_tol,
        });
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed())
    }

    pub fn worst_rel(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel).fold(0.0, f64::max)
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checks.extend(other.checks);
    }

    pub fn into_result(self) -> Result<GradCheckReport> {
        if self.all_passed() {
            Ok(self)
        } else {
            let failing: Vec<String> = self
                .checks
                .iter()
                .filter(|c| !c.passed())
                .map(|c| format!("{} (rel {:.3e}, abs {:.3e})", c.name, c.max_rel, c.max_abs))
                .collect();
            Err(Error::GradCheckFailure(failing.join("; ")))
        }
    }
}

// ── suites behind the gradcheck command ─────────────────────────────────

use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{self, MaskConfig};
use crate::config::RunConfig;
use crate::featnorm::normalize_features;
use crate::gcontext::{gc_forward, global_loss, GcBlockParams};
use crate::losses;
use crate::nn::{ConvParams, Params};
use crate::scene::{gen_scene, SceneConfig};
use crate::tape::Tape;
use crate::toydet::{self, DetectorParams, DetectorSpec};

pub const OP_REL_TOL: f64 = 1e-6;
pub const OP_ABS_TOL: f64 = 1e-9;
pub const OP_H: f64 = 1e-6;
pub const LOSS_REL_TOL: f64 = 1e-4;
pub const LOSS_ABS_TOL: f64 = 1e-8;
pub const PIPELINE_REL_TOL: f64 = 1e-4;
pub const PIPELINE_ABS_TOL: f64 = 1e-5;
pub const PIPELINE_H: f64 = 1e-5;

/// A central difference straddles a relu/abs kink when its one-sided halves
/// disagree; such elements are excluded from the comparison (the analytic
/// subgradient and the two-sided difference legitimately differ there).
fn kink_between(left: f64, right: f64, central: f64) -> bool {
    (left - right).abs() > 1e-4 * (1.0 + central.abs())
}

fn rand_tensor<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

/// Check d(sum(w * op(x)))/dx against central differences, with fixed random
/// probe weights w so every output element contributes.
fn fd_check<F>(
    report: &mut GradCheckReport,
    rng: &mut ChaCha8Rng,
    name: &str,
    x: &Tensor,
    op: F,
) -> Result<()>
where
    F: Fn(&mut Tape, &Tensor) -> Result<Tensor>,
{
    let probe = {
        let mut t = Tape::new();
        let y = op(&mut t, x)?;
        rand_tensor(y.shape(), -1.0, 1.0, rng)
    };
    let eval = |input: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let y = op(&mut tape, input)?;
        let weighted = tape.mul(&y, &probe)?;
        tape.sum_all(&weighted)?.item()
    };
    let numeric = finite_diff_grad(eval, x, OP_H)?;

    let mut tape = Tape::new();
    let xt = tape.watch(x);
    let y = op(&mut tape, &xt)?;
    let weighted = tape.mul(&y, &probe)?;
    let loss = tape.sum_all(&weighted)?;
    let grads = tape.backward(&loss)?;
    report.record(name, grads.get(&xt)?, &numeric, OP_REL_TOL, OP_ABS_TOL);
    Ok(())
}

/// Finite-difference checks for every differentiable tape operation,
/// sampled away from kinks (|x| > 10h for relu and friends).
pub fn check_ops(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();
    let shape = [2usize, 3, 4];

    let a = rand_tensor(&shape, 0.2, 1.5, &mut rng);
    let b = rand_tensor(&shape, 2.0, 3.0, &mut rng);

    fd_check(&mut report, &mut rng, "add.lhs", &a, |t, x| t.add(x, &b))?;
    fd_check(&mut report, &mut rng, "add.rhs", &b, |t, x| t.add(&a, x))?;
    fd_check(&mut report, &mut rng, "sub.lhs", &a, |t, x| t.sub(x, &b))?;
    fd_check(&mut report, &mut rng, "sub.rhs", &b, |t, x| t.sub(&a, x))?;
    fd_check(&mut report, &mut rng, "mul.lhs", &a, |t, x| t.mul(x, &b))?;
    fd_check(&mut report, &mut rng, "mul.rhs", &b, |t, x| t.mul(&a, x))?;
    fd_check(&mut report, &mut rng, "div.lhs", &a, |t, x| t.div(x, &b))?;
    fd_check(&mut report, &mut rng, "div.rhs", &b, |t, x| t.div(&a, x))?;
    // a in [0.2, 1.5], b in [2, 3]: min picks a, max picks b, no ties
    fd_check(&mut report, &mut rng, "minimum.lhs", &a, |t, x| t.minimum(x, &b))?;
    fd_check(&mut report, &mut rng, "maximum.rhs", &b, |t, x| t.maximum(&a, x))?;
    let scalar = Tensor::scalar(1.75);
    fd_check(&mut report, &mut rng, "mul.scalar_broadcast", &scalar, |t, x| t.mul(&a, x))?;

    let signed = {
        let m = rand_tensor(&shape, 0.1, 1.0, &mut rng);
        let signs = rand_tensor(&shape, -1.0, 1.0, &mut rng);
        let data: Vec<f64> = m
            .data()
            .iter()
            .zip(signs.data())
            .map(|(&v, &s)| if s >= 0.0 { v } else { -v })
            .collect();
        Tensor::from_vec(shape.to_vec(), data).unwrap()
    };
    fd_check(&mut report, &mut rng, "relu", &signed, |t, x| t.relu(x))?;
    fd_check(&mut report, &mut rng, "abs", &signed, |t, x| t.abs(x))?;
    fd_check(&mut report, &mut rng, "square", &signed, |t, x| t.square(x))?;
    fd_check(&mut report, &mut rng, "sqrt", &a, |t, x| t.sqrt(x))?;
    fd_check(&mut report, &mut rng, "ln", &a, |t, x| t.ln(x))?;
    fd_check(&mut report, &mut rng, "exp", &signed, |t, x| t.exp(x))?;
    fd_check(&mut report, &mut rng, "scale", &signed, |t, x| t.scale(x, -2.5))?;
    fd_check(&mut report, &mut rng, "add_scalar", &signed, |t, x| t.add_scalar(x, 0.7))?;
    // inputs in ±[0.1, 1]: clamp bounds at ±2 and 0.05 stay clear of samples
    fd_check(&mut report, &mut rng, "clamp_min", &a, |t, x| t.clamp_min(x, 0.05))?;
    fd_check(&mut report, &mut rng, "clamp_max", &signed, |t, x| t.clamp_max(x, 2.0))?;
    let spread = rand_tensor(&shape, -3.0, 3.0, &mut rng);
    let spread = Tensor::from_vec(
        shape.to_vec(),
        spread
            .data()
            .iter()
            .map(|&v| if (v.abs() - 1.0).abs() < 1e-3 { v + 0.01 } else { v })
            .collect(),
    )
    .unwrap();
    fd_check(&mut report, &mut rng, "smooth_l1", &spread, |t, x| t.smooth_l1(x))?;
    let targets = rand_tensor(&shape, 0.0, 1.0, &mut rng);
    fd_check(&mut report, &mut rng, "bce_with_logits", &spread, |t, x| {
        t.bce_with_logits(x, &targets)
    })?;

    fd_check(&mut report, &mut rng, "softmax.axis1", &spread, |t, x| t.softmax(x, &[1]))?;
    fd_check(&mut report, &mut rng, "softmax.joint", &spread, |t, x| t.softmax(x, &[0, 2]))?;
    fd_check(&mut report, &mut rng, "log_softmax", &spread, |t, x| t.log_softmax(x, &[2]))?;
    let support = {
        let mut data = vec![1.0; 24];
        for (i, v) in data.iter_mut().enumerate() {
            if i % 3 == 1 {
                *v = 0.0;
            }
        }
        Tensor::from_vec(shape.to_vec(), data).unwrap()
    };
    fd_check(&mut report, &mut rng, "masked_softmax", &spread, |t, x| {
        t.masked_softmax(x, &support, &[1, 2])
    })?;

    fd_check(&mut report, &mut rng, "sum", &spread, |t, x| t.sum(x, &[0, 2]))?;
    fd_check(&mut report, &mut rng, "mean", &spread, |t, x| t.mean(x, &[1]))?;
    let vec_c = rand_tensor(&[3], -1.0, 1.0, &mut rng);
    fd_check(&mut report, &mut rng, "expand", &vec_c, |t, x| t.expand(x, &[0, 2], &[2, 4]))?;
    fd_check(&mut report, &mut rng, "reshape", &spread, |t, x| t.reshape(x, &[6, 4]))?;
    fd_check(&mut report, &mut rng, "select", &spread, |t, x| t.select(x, 1, 2))?;
    let plane = rand_tensor(&[2, 4, 4], -1.0, 1.0, &mut rng);
    fd_check(&mut report, &mut rng, "slice_window", &plane, |t, x| {
        t.slice_window(x, 1, 1, 2, 3)
    })?;
    let small = rand_tensor(&[2, 2, 2], -1.0, 1.0, &mut rng);
    fd_check(&mut report, &mut rng, "pad_window", &small, |t, x| t.pad_window(x, 1, 2, 4, 5))?;
    let other = rand_tensor(&[2, 2, 2], -1.0, 1.0, &mut rng);
    fd_check(&mut report, &mut rng, "stack", &small, |t, x| {
        t.stack(&[x.clone(), other.clone()])
    })?;

    // conv2d: gradients w.r.t. input, weights, bias on 1x1 and 3x3 kernels
    let x4 = rand_tensor(&[2, 3, 4, 4], -1.0, 1.0, &mut rng);
    let w1 = rand_tensor(&[2, 3, 1, 1], -1.0, 1.0, &mut rng);
    let w3 = rand_tensor(&[2, 3, 3, 3], -0.5, 0.5, &mut rng);
    let bias = rand_tensor(&[2], -0.5, 0.5, &mut rng);
    fd_check(&mut report, &mut rng, "conv2d.1x1.x", &x4, |t, x| {
        t.conv2d(x, &w1, &bias, 1, 0)
    })?;
    fd_check(&mut report, &mut rng, "conv2d.3x3.x", &x4, |t, x| {
        t.conv2d(x, &w3, &bias, 1, 1)
    })?;
    fd_check(&mut report, &mut rng, "conv2d.3x3s2.x", &x4, |t, x| {
        t.conv2d(x, &w3, &bias, 2, 1)
    })?;
    fd_check(&mut report, &mut rng, "conv2d.w", &w3, |t, w| {
        t.conv2d(&x4, w, &bias, 1, 1)
    })?;
    fd_check(&mut report, &mut rng, "conv2d.b", &bias, |t, b| {
        t.conv2d(&x4, &w3, b, 1, 1)
    })?;

    fd_check(&mut report, &mut rng, "normalize_features", &x4, |t, x| {
        normalize_features(t, x, crate::featnorm::DEFAULT_EPS)
    })?;

    let gc = GcBlockParams::init(8, 4, 1.0, &mut rng)?;
    let f8 = rand_tensor(&[1, 8, 3, 3], -1.0, 1.0, &mut rng);
    fd_check(&mut report, &mut rng, "gc_forward", &f8, |t, x| gc_forward(t, x, &gc))?;

    let cfg = MaskConfig::one_stage();
    let region = Tensor::ones(&[4, 4]);
    let chw = rand_tensor(&[3, 4, 4], -1.0, 1.0, &mut rng);
    fd_check(&mut report, &mut rng, "channel_mask", &chw, |t, x| {
        attention::channel_mask(t, x, &region, &cfg)
    })?;
    fd_check(&mut report, &mut rng, "spatial_mask", &chw, |t, x| {
        attention::spatial_mask(t, x, &region, &cfg)
    })?;

    Ok(report)
}

/// Finite-difference checks for each loss function with respect to the
/// student-side inputs.
pub fn check_losses(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();
    let mask_cfg = MaskConfig {
        instance_size: 2,
        ..MaskConfig::one_stage()
    };

    // shared fixtures: one level, 1 image, teacher C=4, student C=2
    let f_t = rand_tensor(&[1, 4, 4, 4], -1.0, 1.0, &mut rng);
    let f_s = rand_tensor(&[1, 2, 4, 4], -1.0, 1.0, &mut rng);
    let adapter = ConvParams::he_init(4, 2, 1, 1, 0, &mut rng);

    let masks_for = |tape: &mut Tape, fs: &Tensor| -> Result<crate::attention::AttnMasks> {
        let adapted = adapter.apply(tape, fs)?;
        attention::compute_attn_masks(tape, &[f_t.clone()], &[adapted], None, &[8], &mask_cfg)
    };

    // feature distillation with on-tape masks, w.r.t. raw student features
    fd_check(&mut report, &mut rng, "feature_distill_loss", &f_s, |t, fs| {
        let masks = masks_for(t, fs)?;
        losses::feature_distill_loss(
            t,
            &losses::FpnFeatures {
                levels: vec![f_t.clone()],
            },
            &losses::FpnFeatures {
                levels: vec![fs.clone()],
            },
            std::slice::from_ref(&adapter),
            &masks,
        )
    })?;

    fd_check(&mut report, &mut rng, "feature_distill_loss.adapter_w", &adapter.w, |t, w| {
        let adapter_var = ConvParams {
            w: w.clone(),
            b: adapter.b.clone(),
            stride: 1,
            pad: 0,
        };
        let adapted = adapter_var.apply(t, &f_s)?;
        let masks =
            attention::compute_attn_masks(t, &[f_t.clone()], &[adapted], None, &[8], &mask_cfg)?;
        losses::feature_distill_loss(
            t,
            &losses::FpnFeatures {
                levels: vec![f_t.clone()],
            },
            &losses::FpnFeatures {
                levels: vec![f_s.clone()],
            },
            std::slice::from_ref(&adapter_var),
            &masks,
        )
    })?;

    fd_check(&mut report, &mut rng, "feature_attn_loss", &f_s, |t, fs| {
        let adapted = adapter.apply(t, fs)?;
        let mut patches_t = losses::LevelPatches { per_image: vec![] };
        let mut patches_s = losses::LevelPatches { per_image: vec![] };
        let t_img = t.select(&f_t, 0, 0)?;
        let s_img = t.select(&adapted, 0, 0)?;
        patches_t.per_image.push(attention::split_patches(t, &t_img, 2)?);
        patches_s.per_image.push(attention::split_patches(t, &s_img, 2)?);
        losses::feature_attn_loss(
            t,
            &losses::FpnFeatures {
                levels: vec![f_t.clone()],
            },
            &losses::FpnFeatures {
                levels: vec![adapted],
            },
            std::slice::from_ref(&patches_t),
            std::slice::from_ref(&patches_s),
        )
    })?;

    let gc = GcBlockParams::init(4, 4, 0.5, &mut rng)?;
    fd_check(&mut report, &mut rng, "global_loss", &f_s, |t, fs| {
        let adapted = adapter.apply(t, fs)?;
        global_loss(t, &[f_t.clone()], &[adapted], &gc)
    })?;

    // head losses: A=1, K=2 on a 2x2 map with fixed nontrivial masks
    let masks = {
        let mut tape = Tape::new();
        attention::compute_attn_masks(
            &mut tape,
            &[rand_tensor(&[1, 3, 2, 2], -1.0, 1.0, &mut rng)],
            &[rand_tensor(&[1, 3, 2, 2], -1.0, 1.0, &mut rng)],
            None,
            &[8],
            &MaskConfig {
                instance_size: 2,
                ..MaskConfig::one_stage()
            },
        )
        .unwrap()
    };
    let o_t = rand_tensor(&[1, 3, 2, 2], -1.5, 1.5, &mut rng);
    let o_s0 = rand_tensor(&[1, 3, 2, 2], -1.5, 1.5, &mut rng);
    let heads_of = |cls: Tensor| losses::HeadOutputs {
        cls: vec![cls],
        loc: vec![],
        obj: vec![],
        num_classes: 2,
        anchors_per_cell: 1,
    };
    fd_check(&mut report, &mut rng, "cls_head_loss", &o_s0, |t, o| {
        losses::cls_head_loss(t, &heads_of(o.clone()), &heads_of(o_t.clone()), &masks)
    })?;

    let anchors = crate::boxes::AnchorGrid {
        levels: vec![crate::boxes::LevelAnchors::new(8, 2, 2, &[12.0])],
    };
    let k_t = rand_tensor(&[1, 4, 2, 2], -0.4, 0.4, &mut rng);
    let k_s0 = rand_tensor(&[1, 4, 2, 2], -0.4, 0.4, &mut rng);
    let loc_of = |loc: Tensor| losses::HeadOutputs {
        cls: vec![],
        loc: vec![loc],
        obj: vec![],
        num_classes: 2,
        anchors_per_cell: 1,
    };
    fd_check(&mut report, &mut rng, "loc_head_loss", &k_s0, |t, k| {
        losses::loc_head_loss(t, &loc_of(k.clone()), &loc_of(k_t.clone()), &anchors, &masks)
    })?;

    let labels = Tensor::from_vec(vec![1, 1, 2, 2], vec![1.0, 0.0, -1.0, 0.0]).unwrap();
    let t_star = rand_tensor(&[1, 1, 4, 2, 2], -0.3, 0.3, &mut rng);
    let obj0 = rand_tensor(&[1, 1, 2, 2], -1.0, 1.0, &mut rng);
    fd_check(&mut report, &mut rng, "rpn_loss.obj", &obj0, |t, obj| {
        losses::rpn_loss(
            t,
            std::slice::from_ref(obj),
            &[k_s0.clone()],
            &[labels.clone()],
            &[t_star.clone()],
            1.0,
            1.0,
        )
    })?;
    fd_check(&mut report, &mut rng, "rpn_loss.offsets", &k_s0, |t, k| {
        losses::rpn_loss(
            t,
            &[obj0.clone()],
            std::slice::from_ref(k),
            &[labels.clone()],
            &[t_star.clone()],
            1.0,
            1.0,
        )
    })?;

    // the task loss through real target assignment on a generated scene
    let spec = DetectorSpec::student(3);
    let grid = spec.anchor_grid();
    let scene = gen_scene(5, &SceneConfig::default());
    let targets = toydet::assign_targets(&grid, &[scene.objects.clone()], 3);
    let a = spec.anchors_per_cell();
    let k1 = spec.num_classes + 1;
    let cls0 = rand_tensor(&[1, a * k1, 8, 8], -1.0, 1.0, &mut rng);
    let cls1 = rand_tensor(&[1, a * k1, 4, 4], -1.0, 1.0, &mut rng);
    let loc0 = rand_tensor(&[1, a * 4, 8, 8], -0.4, 0.4, &mut rng);
    let loc1 = rand_tensor(&[1, a * 4, 4, 4], -0.4, 0.4, &mut rng);
    let obj1 = rand_tensor(&[1, a, 4, 4], -1.0, 1.0, &mut rng);
    let obj_var = rand_tensor(&[1, a, 8, 8], -1.0, 1.0, &mut rng);
    fd_check(&mut report, &mut rng, "task_loss.obj", &obj_var, |t, obj| {
        let outputs = losses::HeadOutputs {
            cls: vec![cls0.clone(), cls1.clone()],
            loc: vec![loc0.clone(), loc1.clone()],
            obj: vec![obj.clone(), obj1.clone()],
            num_classes: 3,
            anchors_per_cell: a,
        };
        toydet::task_loss(t, &outputs, &targets)
    })?;
    fd_check(&mut report, &mut rng, "task_loss.cls", &cls0, |t, cls| {
        let outputs = losses::HeadOutputs {
            cls: vec![cls.clone(), cls1.clone()],
            loc: vec![loc0.clone(), loc1.clone()],
            obj: vec![obj_var.clone(), obj1.clone()],
            num_classes: 3,
            anchors_per_cell: a,
        };
        toydet::task_loss(t, &outputs, &targets)
    })?;
    fd_check(&mut report, &mut rng, "task_loss.loc", &loc0, |t, loc| {
        let outputs = losses::HeadOutputs {
            cls: vec![cls0.clone(), cls1.clone()],
            loc: vec![loc.clone(), loc1.clone()],
            obj: vec![obj_var.clone(), obj1.clone()],
            num_classes: 3,
            anchors_per_cell: a,
        };
        toydet::task_loss(t, &outputs, &targets)
    })?;

    // tighten the per-loss tolerance to the loss-level contract
    for c in report.checks.iter_mut() {
        c.rel_tol = LOSS_REL_TOL.min(c.rel_tol * 100.0);
        c.abs_tol = LOSS_ABS_TOL;
    }
    Ok(report)
}

/// Micro configuration for the end-to-end pipeline check: full 64x64 scenes
/// but very narrow networks, so per-parameter finite differences stay fast.
pub fn micro_config() -> RunConfig {
    let mut cfg = RunConfig::default_desk();
    cfg.teacher.stage_channels = vec![2, 4, 8, 8];
    cfg.teacher.base_channels = 8;
    cfg.student.stage_channels = vec![2, 2, 4, 4];
    cfg.student.base_channels = 4;
    cfg.global_block.reduction = 4;
    cfg.dataset.train_scenes = 2;
    cfg.dataset.val_scenes = 1;
    cfg.batch_size = 2;
    cfg
}

/// Move every bias off zero so no relu input sits exactly on its kink,
/// where one-sided finite differences disagree with the subgradient.
fn jitter_biases<P: Params, R: Rng>(p: &mut P, rng: &mut R) {
    p.visit_mut(&mut |name, t| {
        if name.ends_with(".b") || name.ends_with(".shift") {
            let data: Vec<f64> = t.data().iter().map(|&v| v + rng.gen_range(0.01..0.06)).collect();
            t.set_data(data).unwrap();
        }
    });
}

/// Full-pipeline gradient check: the complete distillation objective (task
/// loss plus every distillation term) on a 2-image micro-batch, checked for
/// every student, adapter, and context-block parameter.
pub fn check_pipeline(seed: u64) -> Result<GradCheckReport> {
    let cfg = micro_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let teacher = DetectorParams::init(&cfg.teacher, &mut rng)?;
    let mut student = DetectorParams::init(&cfg.student, &mut rng)?;
    jitter_biases(&mut student, &mut rng);
    let mut adapters: Vec<ConvParams> = cfg
        .teacher
        .strides
        .iter()
        .map(|_| ConvParams::he_init(cfg.teacher.base_channels, cfg.student.base_channels, 1, 1, 0, &mut rng))
        .collect();
    for a in adapters.iter_mut() {
        let data: Vec<f64> = a.b.data().iter().map(|&v| v + rng.gen_range(0.01..0.06)).collect();
        a.b.set_data(data).unwrap();
    }
    let mut gc = GcBlockParams::init(cfg.teacher.base_channels, cfg.global_block.reduction, cfg.global_block.weight, &mut rng)?;
    // random l3 so gradients reach the bottleneck parameters at all
    gc.l3 = ConvParams::he_init(
        cfg.teacher.base_channels,
        cfg.teacher.base_channels / cfg.global_block.reduction,
        1,
        1,
        0,
        &mut rng,
    );
    jitter_biases(&mut gc, &mut rng);

    let scene_cfg = SceneConfig::default();
    let scenes = [gen_scene(seed ^ 101, &scene_cfg), gen_scene(seed ^ 202, &scene_cfg)];
    let refs: Vec<&crate::scene::Scene> = scenes.iter().collect();
    let images = crate::scene::batch_images(&refs, cfg.student.image_size);
    let gts: Vec<_> = scenes.iter().map(|s| s.objects.clone()).collect();
    let grid = cfg.student.anchor_grid();
    let targets = toydet::assign_targets(&grid, &gts, cfg.student.num_classes);

    // frozen teacher outputs, computed once off-tape
    let mut teacher_tape = Tape::new();
    let (t_features, t_heads) = toydet::forward(&mut teacher_tape, &cfg.teacher, &teacher, &images)?;
    let teacher_batch = (t_features, t_heads);

    let eval_full = |student: &DetectorParams, adapters: &[ConvParams], gc: &GcBlockParams| -> Result<f64> {
        let mut tape = Tape::new();
        let (loss, _) = crate::train::afd_step(
            &cfg,
            &teacher_batch,
            None,
            &cfg.student,
            &mut tape,
            student,
            adapters,
            gc,
            &images,
            &targets,
        )?;
        loss.item()
    };

    // analytic gradients from one backward pass over tracked copies
    let mut tape = Tape::new();
    let tracked_student = student.tracked(&mut tape);
    let tracked_adapters: Vec<ConvParams> = adapters
        .iter()
        .map(|a| ConvParams {
            w: tape.watch(&a.w),
            b: tape.watch(&a.b),
            stride: a.stride,
            pad: a.pad,
        })
        .collect();
    let tracked_gc = gc.tracked(&mut tape);
    let (loss, _) = crate::train::afd_step(
        &cfg,
        &teacher_batch,
        None,
        &cfg.student,
        &mut tape,
        &tracked_student,
        &tracked_adapters,
        &tracked_gc,
        &images,
        &targets,
    )?;
    let grads = tape.backward(&loss)?;

    let f0 = loss.item()?;
    let mut report = GradCheckReport::default();
    let mut skipped = 0usize;
    let mut compared = 0usize;

    // central differences per element; elements whose one-sided halves
    // disagree straddle a kink and are excluded from the comparison
    let mut fd_tensor = |name: &str,
                         analytic: &[f64],
                         probe: &mut dyn FnMut(usize, f64) -> Result<f64>,
                         report: &mut GradCheckReport|
     -> Result<()> {
        let mut numeric = vec![0.0; analytic.len()];
        for j in 0..analytic.len() {
            let fp = probe(j, PIPELINE_H)?;
            let fm = probe(j, -PIPELINE_H)?;
            let central = (fp - fm) / (2.0 * PIPELINE_H);
            let left = (f0 - fm) / PIPELINE_H;
            let right = (fp - f0) / PIPELINE_H;
            compared += 1;
            if kink_between(left, right, central) {
                skipped += 1;
                numeric[j] = analytic[j];
            } else {
                numeric[j] = central;
            }
        }
        report.record(name, analytic, &numeric, PIPELINE_REL_TOL, PIPELINE_ABS_TOL);
        Ok(())
    };

    // student parameters, tensor by tensor
    let student_names: Vec<String> = {
        let mut v = Vec::new();
        student.visit(&mut |name, _| v.push(name.to_string()));
        v
    };
    let mut student_analytic: Vec<Vec<f64>> = Vec::new();
    tracked_student.visit(&mut |_, t| {
        student_analytic.push(grads.get(t).unwrap().to_vec());
    });
    for (pi, pname) in student_names.iter().enumerate() {
        let mut probe = |j: usize, delta: f64| -> Result<f64> {
            let mut s2 = student.clone();
            let mut i = 0;
            s2.visit_mut(&mut |_, t| {
                if i == pi {
                    let mut d = t.data().to_vec();
                    d[j] += delta;
                    t.set_data(d).unwrap();
                }
                i += 1;
            });
            eval_full(&s2, &adapters, &gc)
        };
        fd_tensor(
            &format!("pipeline.student.{pname}"),
            &student_analytic[pi],
            &mut probe,
            &mut report,
        )?;
    }

    // adapters
    for (level, tracked) in tracked_adapters.iter().enumerate() {
        for (field, tracked_t) in [("w", &tracked.w), ("b", &tracked.b)] {
            let analytic_g = grads.get(tracked_t)?.to_vec();
            let mut probe = |j: usize, delta: f64| -> Result<f64> {
                let mut a2 = adapters.clone();
                let t = if field == "w" { &mut a2[level].w } else { &mut a2[level].b };
                let mut d = t.data().to_vec();
                d[j] += delta;
                t.set_data(d).unwrap();
                eval_full(&student, &a2, &gc)
            };
            fd_tensor(
                &format!("pipeline.adapt{level}.{field}"),
                &analytic_g,
                &mut probe,
                &mut report,
            )?;
        }
    }

    // global-context block
    let gc_names: Vec<String> = {
        let mut v = Vec::new();
        gc.visit(&mut |name, _| v.push(name.to_string()));
        v
    };
    let mut gc_analytic: Vec<Vec<f64>> = Vec::new();
    tracked_gc.visit(&mut |_, t| {
        gc_analytic.push(grads.get(t).unwrap().to_vec());
    });
    for (pi, pname) in gc_names.iter().enumerate() {
        let mut probe = |j: usize, delta: f64| -> Result<f64> {
            let mut g2 = gc.clone();
            let mut i = 0;
            g2.visit_mut(&mut |_, t| {
                if i == pi {
                    let mut d = t.data().to_vec();
                    d[j] += delta;
                    t.set_data(d).unwrap();
                }
                i += 1;
            });
            eval_full(&student, &adapters, &g2)
        };
        fd_tensor(&format!("pipeline.{pname}"), &gc_analytic[pi], &mut probe, &mut report)?;
    }

    if skipped * 4 > compared {
        return Err(Error::GradCheckFailure(format!(
            "{skipped}/{compared} elements skipped as kink-adjacent; too many to conclude"
        )));
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradCheckScope {
    Ops,
    Losses,
    Pipeline,
}

impl FromStr for GradCheckScope {
    type Err = Error;
    fn from_str(s: &str) -> Result<GradCheckScope> {
        match s {
            "ops" => Ok(GradCheckScope::Ops),
            "losses" => Ok(GradCheckScope::Losses),
            "pipeline" => Ok(GradCheckScope::Pipeline),
            other => Err(Error::ConfigError(format!(
                "unknown scope {other} (ops|losses|pipeline)"
            ))),
        }
    }
}

/// Run one suite with a fixed seed, as the CLI command does.
pub fn run_scope(scope: GradCheckScope, seed: u64) -> Result<GradCheckReport> {
    match scope {
        GradCheckScope::Ops => check_ops(seed),
        GradCheckScope::Losses => check_losses(seed),
        GradCheckScope::Pipeline => check_pipeline(seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let x = Tensor::from_vec(vec![1], vec![3.0]).unwrap();
        let g = finite_diff_grad(
            |t| Ok(t.data().iter().map(|v| v * v).sum()),
            &x,
            1e-6,
        )
        .unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn relu_kink_reports_subgradient_in_unit_interval() {
        let x = Tensor::from_vec(vec![1], vec![0.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.data().iter().map(|v| v.max(0.0)).sum()), &x, 1e-6).unwrap();
        assert!((0.0..=1.0).contains(&g[0]));
    }

    #[test]
    fn agrees_with_backward_on_softmax_mean_composite() {
        use crate::tape::Tape;
        let data: Vec<f64> = (0..6).map(|i| (i as f64 * 1.7).cos()).collect();
        let x = Tensor::from_vec(vec![2, 3], data).unwrap();

        let eval = |t: &Tensor| -> Result<f64> {
            let mut tape = Tape::new();
            let sm = tape.softmax(t, &[1])?;
            let sq = tape.square(&sm)?;
            let m = tape.mean(&sq, &[0, 1])?;
            m.item()
        };
        let numeric = finite_diff_grad(eval, &x, 1e-6).unwrap();

        let mut tape = Tape::new();
        let xt = tape.watch(&x);
        let sm = tape.softmax(&xt, &[1]).unwrap();
        let sq = tape.square(&sm).unwrap();
        let m = tape.mean(&sq, &[0, 1]).unwrap();
        let grads = tape.backward(&m).unwrap();
        let analytic = grads.get(&xt).unwrap();

        let (_, max_rel) = grad_deviation(analytic, &numeric);
        assert!(max_rel < 1e-6, "rel error {max_rel}");
    }
}
