//! Direct 2D cross-correlation kernels used by the tape's conv2d node.
//!
//! Loop order keeps the innermost walk contiguous over output columns so the
//! compiler can vectorize; valid output ranges are precomputed per kernel
//! offset instead of bounds-checking every tap.

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvDims {
    pub fn out_size(in_size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = in_size + 2 * pad;
        if padded < k {
            return None;
        }
        Some((padded - k) / stride + 1)
    }
}

/// Output index range [lo, hi) such that `o*stride + k_off - pad` stays
/// inside [0, in_size) for every o in the range.
fn valid_range(in_size: usize, k_off: usize, stride: usize, pad: usize, out_size: usize) -> (usize, usize) {
    let lo = if pad > k_off {
        (pad - k_off).div_ceil(stride)
    } else {
        0
    };
    let top = in_size + pad;
    if top <= k_off {
        return (0, 0);
    }
    let hi = ((top - 1 - k_off) / stride + 1).min(out_size);
    (lo.min(hi), hi)
}

pub(crate) fn forward(x: &[f64], w: &[f64], b: &[f64], d: &ConvDims) -> Vec<f64> {
    let mut out = vec![0.0; d.n * d.cout * d.out_h * d.out_w];
    let in_plane = d.h * d.w;
    let out_plane = d.out_h * d.out_w;
    let w_per_cout = d.cin * d.k * d.k;
    for n in 0..d.n {
        let x_img = &x[n * d.cin * in_plane..(n + 1) * d.cin * in_plane];
        let out_img = &mut out[n * d.cout * out_plane..(n + 1) * d.cout * out_plane];
        for co in 0..d.cout {
            let o_plane = &mut out_img[co * out_plane..(co + 1) * out_plane];
            o_plane.fill(b[co]);
            let w_co = &w[co * w_per_cout..(co + 1) * w_per_cout];
            for ci in 0..d.cin {
                let x_plane = &x_img[ci * in_plane..(ci + 1) * in_plane];
                for ky in 0..d.k {
                    let (oy_lo, oy_hi) = valid_range(d.h, ky, d.stride, d.pad, d.out_h);
                    for kx in 0..d.k {
                        let wv = w_co[ci * d.k * d.k + ky * d.k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox_lo, ox_hi) = valid_range(d.w, kx, d.stride, d.pad, d.out_w);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * d.stride + ky - d.pad;
                            let x_row = &x_plane[iy * d.w..iy * d.w + d.w];
                            let o_row = &mut o_plane[oy * d.out_w..oy * d.out_w + d.out_w];
                            for ox in ox_lo..ox_hi {
                                let ix = ox * d.stride + kx - d.pad;
                                o_row[ox] += wv * x_row[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn backward_x(go: &[f64], w: &[f64], d: &ConvDims) -> Vec<f64> {
    let mut gx = vec![0.0; d.n * d.cin * d.h * d.w];
    let in_plane = d.h * d.w;
    let out_plane = d.out_h * d.out_w;
    let w_per_cout = d.cin * d.k * d.k;
    for n in 0..d.n {
        let go_img = &go[n * d.cout * out_plane..(n + 1) * d.cout * out_plane];
        let gx_img = &mut gx[n * d.cin * in_plane..(n + 1) * d.cin * in_plane];
        for co in 0..d.cout {
            let go_plane = &go_img[co * out_plane..(co + 1) * out_plane];
            let w_co = &w[co * w_per_cout..(co + 1) * w_per_cout];
            for ci in 0..d.cin {
                let gx_plane = &mut gx_img[ci * in_plane..(ci + 1) * in_plane];
                for ky in 0..d.k {
                    let (oy_lo, oy_hi) = valid_range(d.h, ky, d.stride, d.pad, d.out_h);
                    for kx in 0..d.k {
                        let wv = w_co[ci * d.k * d.k + ky * d.k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox_lo, ox_hi) = valid_range(d.w, kx, d.stride, d.pad, d.out_w);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * d.stride + ky - d.pad;
                            let gx_row = &mut gx_plane[iy * d.w..iy * d.w + d.w];
                            let go_row = &go_plane[oy * d.out_w..oy * d.out_w + d.out_w];
                            for ox in ox_lo..ox_hi {
                                let ix = ox * d.stride + kx - d.pad;
                                gx_row[ix] += wv * go_row[ox];
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

pub(crate) fn backward_w(go: &[f64], x: &[f64], d: &ConvDims) -> Vec<f64> {
    let mut gw = vec![0.0; d.cout * d.cin * d.k * d.k];
    let in_plane = d.h * d.w;
    let out_plane = d.out_h * d.out_w;
    let w_per_cout = d.cin * d.k * d.k;
    for n in 0..d.n {
        let x_img = &x[n * d.cin * in_plane..(n + 1) * d.cin * in_plane];
        let go_img = &go[n * d.cout * out_plane..(n + 1) * d.cout * out_plane];
        for co in 0..d.cout {
            let go_plane = &go_img[co * out_plane..(co + 1) * out_plane];
            for ci in 0..d.cin {
                let x_plane = &x_img[ci * in_plane..(ci + 1) * in_plane];
                for ky in 0..d.k {
                    let (oy_lo, oy_hi) = valid_range(d.h, ky, d.stride, d.pad, d.out_h);
                    for kx in 0..d.k {
                        let (ox_lo, ox_hi) = valid_range(d.w, kx, d.stride, d.pad, d.out_w);
                        let mut acc = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * d.stride + ky - d.pad;
                            let x_row = &x_plane[iy * d.w..iy * d.w + d.w];
                            let go_row = &go_plane[oy * d.out_w..oy * d.out_w + d.out_w];
                            for ox in ox_lo..ox_hi {
                                let ix = ox * d.stride + kx - d.pad;
                                acc += go_row[ox] * x_row[ix];
                            }
                        }
                        gw[co * w_per_cout + ci * d.k * d.k + ky * d.k + kx] += acc;
                    }
                }
            }
        }
    }
    gw
}

pub(crate) fn backward_b(go: &[f64], d: &ConvDims) -> Vec<f64> {
    let mut gb = vec![0.0; d.cout];
    let out_plane = d.out_h * d.out_w;
    for n in 0..d.n {
        for co in 0..d.cout {
            let base = (n * d.cout + co) * out_plane;
            let mut acc = 0.0;
            for v in &go[base..base + out_plane] {
                acc += v;
            }
            gb[co] += acc;
        }
    }
    gb
}
