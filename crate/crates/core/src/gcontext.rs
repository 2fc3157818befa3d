//! Global-context relation block and the global distillation loss.
//!
//! The block pools a softmax-weighted context vector over all pixels,
//! pushes it through a bottleneck (1x1 conv, relu, layer norm, 1x1 conv)
//! and re-injects the result residually at every position. The final conv
//! starts at exactly zero, so the block is the identity map at
//! initialization.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{visit_conv, visit_conv_mut, ConvParams, Params};
use crate::tape::Tape;
use crate::tensor::Tensor;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Default weight on the global distillation loss.
pub const DEFAULT_GLOBAL_WEIGHT: f64 = 5e-4;

#[derive(Debug, Clone)]
pub struct GcBlockParams {
    /// 1x1 conv C -> 1: context attention logits.
    pub l1: ConvParams,
    /// 1x1 conv C -> C/r: bottleneck in.
    pub l2: ConvParams,
    /// Layer-norm scale over the C/r bottleneck channels.
    pub ln_scale: Tensor,
    /// Layer-norm shift over the C/r bottleneck channels.
    pub ln_shift: Tensor,
    /// 1x1 conv C/r -> C: bottleneck out, zero-initialized.
    pub l3: ConvParams,
    pub reduction: usize,
    /// Loss-balancing weight on the squared block-output difference.
    pub loss_weight: f64,
}

impl GcBlockParams {
    pub fn init<R: Rng>(channels: usize, reduction: usize, loss_weight: f64, rng: &mut R) -> Result<GcBlockParams> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::ConfigError(format!(
                "reduction {reduction} must divide channel count {channels}"
            )));
        }
        let mid = channels / reduction;
        Ok(GcBlockParams {
            l1: ConvParams::he_init(1, channels, 1, 1, 0, rng),
            l2: ConvParams::he_init(mid, channels, 1, 1, 0, rng),
            ln_scale: Tensor::ones(&[mid]),
            ln_shift: Tensor::zeros(&[mid]),
            l3: ConvParams::zero_init(channels, mid, 1, 1, 0),
            reduction,
            loss_weight,
        })
    }

    pub fn channels(&self) -> usize {
        self.l1.in_channels()
    }
}

impl Params for GcBlockParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        visit_conv("gc.l1", &self.l1, f);
        visit_conv("gc.l2", &self.l2, f);
        f("gc.ln.scale", &self.ln_scale);
        f("gc.ln.shift", &self.ln_shift);
        visit_conv("gc.l3", &self.l3, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        visit_conv_mut("gc.l1", &mut self.l1, f);
        visit_conv_mut("gc.l2", &mut self.l2, f);
        f("gc.ln.scale", &mut self.ln_scale);
        f("gc.ln.shift", &mut self.ln_shift);
        visit_conv_mut("gc.l3", &mut self.l3, f);
    }
}

/// Layer norm over the channel axis of a `[N, C, 1, 1]` tensor.
fn layer_norm(tape: &mut Tape, x: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let mu = tape.mean(x, &[1, 2, 3])?;
    let mu_full = tape.expand(&mu, &[1, 2, 3], &[c, 1, 1])?;
    let centered = tape.sub(x, &mu_full)?;
    let sq = tape.square(&centered)?;
    let var = tape.mean(&sq, &[1, 2, 3])?;
    let var_eps = tape.add_scalar(&var, LAYER_NORM_EPS)?;
    let std = tape.sqrt(&var_eps)?;
    let std_full = tape.expand(&std, &[1, 2, 3], &[c, 1, 1])?;
    let normed = tape.div(&centered, &std_full)?;
    let scale_full = tape.expand(scale, &[0, 2, 3], &[n, 1, 1])?;
    let shift_full = tape.expand(shift, &[0, 2, 3], &[n, 1, 1])?;
    let scaled = tape.mul(&normed, &scale_full)?;
    tape.add(&scaled, &shift_full)
}

/// `B(F) = F + L3(LN(ReLU(L2(ctx))))` where the context vector pools the
/// feature map with softmax(L1 F) weights over all pixels.
pub fn gc_forward(tape: &mut Tape, f: &Tensor, params: &GcBlockParams) -> Result<Tensor> {
    if f.rank() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "gc_forward expects [N,C,H,W], got {:?}",
            f.shape()
        )));
    }
    let (n, c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2], f.shape()[3]);
    if c != params.channels() {
        return Err(Error::ShapeMismatch(format!(
            "gc block built for {} channels, features have {c}",
            params.channels()
        )));
    }
    // attention weights over the n^p = H*W pixels, per image
    let logits = params.l1.apply(tape, f)?; // [N,1,H,W]
    let weights = tape.softmax(&logits, &[2, 3])?;
    let weights = tape.reshape(&weights, &[n, h, w])?;
    let weights_c = tape.expand(&weights, &[1], &[c])?; // [N,C,H,W]
    let weighted = tape.mul(f, &weights_c)?;
    let context = tape.sum(&weighted, &[2, 3])?; // [N,C]
    let context = tape.reshape(&context, &[n, c, 1, 1])?;

    let mid = params.l2.apply(tape, &context)?;
    let mid = tape.relu(&mid)?;
    let mid = layer_norm(tape, &mid, &params.ln_scale, &params.ln_shift)?;
    let transform = params.l3.apply(tape, &mid)?; // [N,C,1,1]

    let transform = tape.reshape(&transform, &[n, c])?;
    let transform_full = tape.expand(&transform, &[2, 3], &[h, w])?;
    tape.add(f, &transform_full)
}

/// Global distillation loss: `loss_weight * sum((B(F_T) - B(F_S))^2)`,
/// summed over all elements and every FPN level through one shared block.
/// Teacher features are expected untracked so no gradient can reach them.
pub fn global_loss(
    tape: &mut Tape,
    teacher_levels: &[Tensor],
    student_levels: &[Tensor],
    params: &GcBlockParams,
) -> Result<Tensor> {
    if teacher_levels.len() != student_levels.len() {
        return Err(Error::ShapeMismatch("level count mismatch".into()));
    }
    let mut total: Option<Tensor> = None;
    for (f_t, f_s) in teacher_levels.iter().zip(student_levels) {
        if f_t.shape() != f_s.shape() {
            return Err(Error::ShapeMismatch(format!(
                "teacher {:?} vs student {:?}",
                f_t.shape(),
                f_s.shape()
            )));
        }
        let b_t = gc_forward(tape, f_t, params)?;
        let b_s = gc_forward(tape, f_s, params)?;
        let diff = tape.sub(&b_t, &b_s)?;
        let sq = tape.square(&diff)?;
        let level_sum = tape.sum_all(&sq)?;
        total = Some(match total {
            None => level_sum,
            Some(t) => tape.add(&t, &level_sum)?,
        });
    }
    let total = total.ok_or_else(|| Error::ShapeMismatch("no levels given".into()))?;
    tape.scale(&total, params.loss_weight)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block(c: usize) -> GcBlockParams {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        GcBlockParams::init(c, 4, DEFAULT_GLOBAL_WEIGHT, &mut rng).unwrap()
    }

    #[test]
    fn zero_init_l3_makes_identity() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..2 * 4 * 9).map(|i| (i as f64 * 0.21).sin()).collect();
        let f = Tensor::from_vec(vec![2, 4, 3, 3], data).unwrap();
        let out = gc_forward(&mut tape, &f, &block(4)).unwrap();
        assert_eq!(out.data(), f.data());
    }

    #[test]
    fn single_pixel_context_is_the_pixel() {
        // softmax over one element is 1, so the context vector must equal the
        // feature itself; B(F) = F + transform(F), hand-computed below.
        let mut tape = Tape::new();
        let fv = [0.3, -1.2, 2.0, 0.5];
        let f = Tensor::from_vec(vec![1, 4, 1, 1], fv.to_vec()).unwrap();
        let mut params = block(4);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        params.l3 = ConvParams::he_init(4, 1, 1, 1, 0, &mut rng);
        let out = gc_forward(&mut tape, &f, &params).unwrap();

        // transform(ctx) with ctx = F: L2, relu, layer norm, L3
        let mid: Vec<f64> = (0..1)
            .map(|o| {
                let mut acc = params.l2.b.data()[o];
                for (ci, x) in fv.iter().enumerate() {
                    acc += params.l2.w.data()[o * 4 + ci] * x;
                }
                acc.max(0.0)
            })
            .collect();
        let mu = mid.iter().sum::<f64>() / mid.len() as f64;
        let var = mid.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / mid.len() as f64;
        let normed: Vec<f64> = mid
            .iter()
            .enumerate()
            .map(|(i, v)| {
                (v - mu) / (var + 1e-5).sqrt() * params.ln_scale.data()[i] + params.ln_shift.data()[i]
            })
            .collect();
        for co in 0..4 {
            let mut t = params.l3.b.data()[co];
            for (ci, nv) in normed.iter().enumerate() {
                t += params.l3.w.data()[co * normed.len() + ci] * nv;
            }
            assert!((out.data()[co] - (fv[co] + t)).abs() < 1e-12);
        }
    }

    #[test]
    fn shift_invariance_of_context_softmax() {
        // adding a constant to the L1 logits (via its bias) leaves B(F) unchanged
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..1 * 4 * 9).map(|i| (i as f64 * 0.37).cos()).collect();
        let f = Tensor::from_vec(vec![1, 4, 3, 3], data).unwrap();
        let mut p1 = block(4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        p1.l3 = ConvParams::he_init(4, 1, 1, 1, 0, &mut rng);
        let mut p2 = p1.clone();
        p2.l1 = p1.l1.clone().with_bias(7.5);
        let out1 = gc_forward(&mut tape, &f, &p1).unwrap();
        let out2 = gc_forward(&mut tape, &f, &p2).unwrap();
        for (a, b) in out1.data().iter().zip(out2.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_zero_for_identical_inputs() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..1 * 4 * 4).map(|i| i as f64 * 0.1).collect();
        let f = Tensor::from_vec(vec![1, 4, 2, 2], data).unwrap();
        let loss = global_loss(&mut tape, &[f.clone()], &[f.clone()], &block(4)).unwrap();
        assert_eq!(loss.item().unwrap(), 0.0);
    }

    #[test]
    fn zero_init_loss_is_weighted_mse_of_inputs() {
        let mut tape = Tape::new();
        let d1: Vec<f64> = (0..16).map(|i| (i as f64 * 0.3).sin()).collect();
        let d2: Vec<f64> = (0..16).map(|i| (i as f64 * 0.3).sin() + 0.25).collect();
        let f_t = Tensor::from_vec(vec![1, 4, 2, 2], d1).unwrap();
        let f_s = Tensor::from_vec(vec![1, 4, 2, 2], d2).unwrap();
        let params = block(4);
        let loss = global_loss(&mut tape, &[f_t.clone()], &[f_s.clone()], &params).unwrap();
        let expect: f64 = f_t
            .data()
            .iter()
            .zip(f_s.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            * params.loss_weight;
        assert!((loss.item().unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn no_gradient_reaches_teacher_constants() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = block(8);
        params.l3 = ConvParams::he_init(8, 2, 1, 1, 0, &mut rng);
        let tracked = params.tracked(&mut tape);

        let f_t =
            Tensor::from_vec(vec![1, 8, 2, 2], (0..32).map(|i| i as f64 * 0.2).collect()).unwrap();
        let d2: Vec<f64> = (0..32).map(|i| (i as f64 * 0.4).cos()).collect();
        let f_s_plain = Tensor::from_vec(vec![1, 8, 2, 2], d2).unwrap();
        let f_s = tape.watch(&f_s_plain);

        let loss = global_loss(&mut tape, &[f_t.clone()], &[f_s.clone()], &tracked).unwrap();
        let grads = tape.backward(&loss).unwrap();
        // teacher features never joined the tape
        assert!(f_t.node.is_none());
        assert!(matches!(grads.get(&f_t), Err(Error::DetachedTensor)));
        // student features and block params do receive gradients
        assert!(grads.get(&f_s).unwrap().iter().any(|&g| g != 0.0));
        let mut saw_nonzero = false;
        tracked.visit(&mut |_, t| {
            if grads.get(t).unwrap().iter().any(|&g| g != 0.0) {
                saw_nonzero = true;
            }
        });
        assert!(saw_nonzero);
    }
}
