//! Per-channel feature normalization applied before feature distillation.
//!
//! Statistics are computed over the functional mini-batch of one channel —
//! all batch elements and spatial positions — and recomputed on every
//! forward pass, so normalization stays differentiable through the mean and
//! variance.

use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Normalize `[N, C, H, W]` features to zero mean and unit variance per
/// channel: `(x - mu_c) / sqrt(var_c + eps)` with one statistic pair per
/// channel, uniform across locations.
pub fn normalize_features(tape: &mut Tape, x: &Tensor, eps: f64) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "normalize_features expects [N,C,H,W], got {:?}",
            x.shape()
        )));
    }
    if eps <= 0.0 {
        return Err(Error::DomainError("normalization epsilon must be positive".into()));
    }
    let (n, _c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let m = n * h * w;
    if m < 2 {
        return Err(Error::DegenerateBatch(format!(
            "functional mini-batch of {m} values (need >= 2)"
        )));
    }
    let stat_axes = [0usize, 2, 3];
    let mu = tape.mean(x, &stat_axes)?;
    let mu_full = tape.expand(&mu, &stat_axes, &[n, h, w])?;
    let centered = tape.sub(x, &mu_full)?;
    let sq = tape.square(&centered)?;
    let var = tape.mean(&sq, &stat_axes)?;
    let var_eps = tape.add_scalar(&var, eps)?;
    let std = tape.sqrt(&var_eps)?;
    let std_full = tape.expand(&std, &stat_axes, &[n, h, w])?;
    tape.div(&centered, &std_full)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_channel_maps_to_zero() {
        let mut tape = Tape::new();
        let x = Tensor::full(&[2, 3, 2, 2], 7.5);
        let y = normalize_features(&mut tape, &x, DEFAULT_EPS).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_point_channel_analytic() {
        // channel values {-1, 1}: mean 0, variance 1, so outputs are
        // +-1/sqrt(1 + eps)
        let mut tape = Tape::new();
        let x = Tensor::from_vec(vec![2, 1, 1, 1], vec![-1.0, 1.0]).unwrap();
        let y = normalize_features(&mut tape, &x, DEFAULT_EPS).unwrap();
        let expect = 1.0 / (1.0 + DEFAULT_EPS).sqrt();
        assert!((y.data()[0] + expect).abs() < 1e-15);
        assert!((y.data()[1] - expect).abs() < 1e-15);
    }

    #[test]
    fn degenerate_batch_rejected() {
        let mut tape = Tape::new();
        let x = Tensor::zeros(&[1, 4, 1, 1]);
        assert!(matches!(
            normalize_features(&mut tape, &x, DEFAULT_EPS),
            Err(Error::DegenerateBatch(_))
        ));
    }

    #[test]
    fn rank_checked() {
        let mut tape = Tape::new();
        let x = Tensor::zeros(&[4, 4]);
        assert!(matches!(
            normalize_features(&mut tape, &x, DEFAULT_EPS),
            Err(Error::ShapeMismatch(_))
        ));
    }
}
