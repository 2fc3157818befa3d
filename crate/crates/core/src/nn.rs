//! Parameter containers shared by the detector, the adapters and the
//! global-context block, plus weight initialization.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Weights and bias of one convolution layer.
#[derive(Debug, Clone)]
pub struct ConvParams {
    pub w: Tensor,
    pub b: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl ConvParams {
    /// He-normal initialization: std = sqrt(2 / fan_in), zero bias.
    pub fn he_init<R: Rng>(cout: usize, cin: usize, k: usize, stride: usize, pad: usize, rng: &mut R) -> ConvParams {
        let fan_in = (cin * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
        let w: Vec<f64> = (0..cout * cin * k * k).map(|_| normal.sample(rng)).collect();
        ConvParams {
            w: Tensor::from_vec(vec![cout, cin, k, k], w).unwrap(),
            b: Tensor::zeros(&[cout]),
            stride,
            pad,
        }
    }

    pub fn zero_init(cout: usize, cin: usize, k: usize, stride: usize, pad: usize) -> ConvParams {
        ConvParams {
            w: Tensor::zeros(&[cout, cin, k, k]),
            b: Tensor::zeros(&[cout]),
            stride,
            pad,
        }
    }

    pub fn with_bias(mut self, value: f64) -> ConvParams {
        let n = self.b.len();
        self.b = Tensor::full(&[n], value);
        self
    }

    pub fn apply(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
        tape.conv2d(x, &self.w, &self.b, self.stride, self.pad)
    }

    pub fn out_channels(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.w.shape()[1]
    }
}

/// Learned scale and shift of a normalization layer.
#[derive(Debug, Clone)]
pub struct NormParams {
    pub scale: Tensor,
    pub shift: Tensor,
}

impl NormParams {
    pub fn identity(channels: usize) -> NormParams {
        NormParams {
            scale: Tensor::ones(&[channels]),
            shift: Tensor::zeros(&[channels]),
        }
    }
}

/// Instance norm: zero mean, unit variance per image and channel over the
/// spatial extent, then learned per-channel scale and shift. Batch-size
/// independent, so training and evaluation share one code path.
pub fn instance_norm(tape: &mut Tape, x: &Tensor, norm: &NormParams, eps: f64) -> Result<Tensor> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let spatial = [2usize, 3];
    let mu = tape.mean(x, &spatial)?;
    let mu_full = tape.expand(&mu, &spatial, &[h, w])?;
    let centered = tape.sub(x, &mu_full)?;
    let sq = tape.square(&centered)?;
    let var = tape.mean(&sq, &spatial)?;
    let var_eps = tape.add_scalar(&var, eps)?;
    let std = tape.sqrt(&var_eps)?;
    let std_full = tape.expand(&std, &spatial, &[h, w])?;
    let normed = tape.div(&centered, &std_full)?;
    let scale_full = tape.expand(&norm.scale, &[0, 2, 3], &[n, h, w])?;
    let shift_full = tape.expand(&norm.shift, &[0, 2, 3], &[n, h, w])?;
    debug_assert_eq!(scale_full.shape(), [n, c, h, w]);
    let scaled = tape.mul(&normed, &scale_full)?;
    tape.add(&scaled, &shift_full)
}

pub(crate) fn visit_norm(prefix: &str, p: &NormParams, f: &mut dyn FnMut(&str, &Tensor)) {
    f(&format!("{prefix}.scale"), &p.scale);
    f(&format!("{prefix}.shift"), &p.shift);
}

pub(crate) fn visit_norm_mut(prefix: &str, p: &mut NormParams, f: &mut dyn FnMut(&str, &mut Tensor)) {
    f(&format!("{prefix}.scale"), &mut p.scale);
    f(&format!("{prefix}.shift"), &mut p.shift);
}

/// Anything holding named, orderable trainable tensors. Visit order is fixed
/// by the implementation, which makes optimizer state and checkpoints stable.
pub trait Params: Clone {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    /// Copy of self with every parameter registered on the tape as a
    /// gradient-carrying leaf.
    fn tracked(&self, tape: &mut Tape) -> Self {
        let mut out = self.clone();
        out.visit_mut(&mut |_, t| *t = tape.watch(t));
        out
    }

    fn num_values(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name.to_string(), t.clone())));
        out
    }
}

/// Visit helper for ConvParams members.
pub(crate) fn visit_conv(prefix: &str, c: &ConvParams, f: &mut dyn FnMut(&str, &Tensor)) {
    f(&format!("{prefix}.w"), &c.w);
    f(&format!("{prefix}.b"), &c.b);
}

pub(crate) fn visit_conv_mut(prefix: &str, c: &mut ConvParams, f: &mut dyn FnMut(&str, &mut Tensor)) {
    f(&format!("{prefix}.w"), &mut c.w);
    f(&format!("{prefix}.b"), &mut c.b);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn he_init_is_deterministic_per_seed() {
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let a = ConvParams::he_init(4, 3, 3, 1, 1, &mut r1);
        let b = ConvParams::he_init(4, 3, 3, 1, 1, &mut r2);
        assert_eq!(a.w.data(), b.w.data());
        assert!(a.b.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_apply_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = ConvParams::he_init(2, 3, 3, 2, 1, &mut rng);
        let mut tape = Tape::new();
        let x = Tensor::zeros(&[1, 3, 8, 8]);
        let y = conv.apply(&mut tape, &x).unwrap();
        assert_eq!(y.shape(), &[1, 2, 4, 4]);
    }
}
