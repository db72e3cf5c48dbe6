//! 2-D convolution kernels (cross-correlation convention).
//!
//! Hot path of every network forward/backward pass; the inner loops run over
//! contiguous output rows so the compiler can vectorize them. Padding is
//! materialized into a scratch buffer, which keeps the loops branch-free.

use crate::error::{Error, Result};
use crate::grid::{Grid, Scalar};

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
    pub h_pad: usize,
    pub w_pad: usize,
}

pub(crate) fn conv_dims<T: Scalar>(
    input: &Grid<T>,
    weights: &Grid<T>,
    bias: &Grid<T>,
    stride: usize,
    padding: usize,
) -> Result<ConvDims> {
    if input.rank() != 3 {
        return Err(Error::shape(
            "conv2d",
            format!("input must be [C,H,W], got {:?}", input.shape()),
        ));
    }
    if weights.rank() != 4 {
        return Err(Error::shape(
            "conv2d",
            format!("weights must be [Cout,Cin,k,k], got {:?}", weights.shape()),
        ));
    }
    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (c_out, w_cin, k, k2) = (
        weights.shape()[0],
        weights.shape()[1],
        weights.shape()[2],
        weights.shape()[3],
    );
    if k != k2 {
        return Err(Error::shape(
            "conv2d",
            format!("kernel must be square, got {k}x{k2}"),
        ));
    }
    if k % 2 == 0 {
        return Err(Error::shape("conv2d", format!("kernel size {k} must be odd")));
    }
    if w_cin != c_in {
        return Err(Error::shape(
            "conv2d",
            format!(
                "weights expect {w_cin} input channels, input has {c_in} (input {:?}, weights {:?})",
                input.shape(),
                weights.shape()
            ),
        ));
    }
    if bias.shape() != [c_out] {
        return Err(Error::shape(
            "conv2d",
            format!("bias must be [{c_out}], got {:?}", bias.shape()),
        ));
    }
    if stride < 1 {
        return Err(Error::shape("conv2d", "stride must be >= 1".to_string()));
    }
    let h_span = h + 2 * padding;
    let w_span = w + 2 * padding;
    if h_span < k || w_span < k {
        return Err(Error::shape(
            "conv2d",
            format!("padded input {h_span}x{w_span} smaller than kernel {k}"),
        ));
    }
    if (h_span - k) % stride != 0 || (w_span - k) % stride != 0 {
        return Err(Error::shape(
            "conv2d",
            format!(
                "output size not integral: H={h} W={w} k={k} stride={stride} padding={padding}"
            ),
        ));
    }
    Ok(ConvDims {
        c_in,
        h,
        w,
        c_out,
        k,
        stride,
        padding,
        h_out: (h_span - k) / stride + 1,
        w_out: (w_span - k) / stride + 1,
        h_pad: h_span,
        w_pad: w_span,
    })
}

fn pad_input<T: Scalar>(input: &Grid<T>, d: &ConvDims) -> Vec<T> {
    if d.padding == 0 {
        return input.data().to_vec();
    }
    let mut out = vec![T::ZERO; d.c_in * d.h_pad * d.w_pad];
    let src = input.data();
    for c in 0..d.c_in {
        for row in 0..d.h {
            let src_off = (c * d.h + row) * d.w;
            let dst_off = (c * d.h_pad + row + d.padding) * d.w_pad + d.padding;
            out[dst_off..dst_off + d.w].copy_from_slice(&src[src_off..src_off + d.w]);
        }
    }
    out
}

fn unpad_grad<T: Scalar>(gpad: &[T], d: &ConvDims) -> Grid<T> {
    if d.padding == 0 {
        return Grid::new(vec![d.c_in, d.h, d.w], gpad.to_vec()).expect("unpad shape");
    }
    let mut out = Grid::zeros(&[d.c_in, d.h, d.w]);
    let dst = out.data_mut();
    for c in 0..d.c_in {
        for row in 0..d.h {
            let dst_off = (c * d.h + row) * d.w;
            let src_off = (c * d.h_pad + row + d.padding) * d.w_pad + d.padding;
            dst[dst_off..dst_off + d.w].copy_from_slice(&gpad[src_off..src_off + d.w]);
        }
    }
    out
}

pub(crate) fn forward<T: Scalar>(
    input: &Grid<T>,
    weights: &Grid<T>,
    bias: &Grid<T>,
    d: &ConvDims,
) -> Grid<T> {
    let padded = pad_input(input, d);
    let wdat = weights.data();
    let bdat = bias.data();
    let mut out = vec![T::ZERO; d.c_out * d.h_out * d.w_out];
    let plane_out = d.h_out * d.w_out;
    let plane_pad = d.h_pad * d.w_pad;

    for oc in 0..d.c_out {
        let out_plane = &mut out[oc * plane_out..(oc + 1) * plane_out];
        out_plane.fill(bdat[oc]);
        for ic in 0..d.c_in {
            let in_plane = &padded[ic * plane_pad..(ic + 1) * plane_pad];
            let w_base = ((oc * d.c_in) + ic) * d.k * d.k;
            for ky in 0..d.k {
                for kx in 0..d.k {
                    let wv = wdat[w_base + ky * d.k + kx];
                    if d.stride == 1 {
                        for oy in 0..d.h_out {
                            let src = &in_plane[(oy + ky) * d.w_pad + kx..][..d.w_out];
                            let dst = &mut out_plane[oy * d.w_out..(oy + 1) * d.w_out];
                            for (o, &x) in dst.iter_mut().zip(src) {
                                *o += wv * x;
                            }
                        }
                    } else {
                        for oy in 0..d.h_out {
                            let row = (oy * d.stride + ky) * d.w_pad + kx;
                            let dst = &mut out_plane[oy * d.w_out..(oy + 1) * d.w_out];
                            for (ox, o) in dst.iter_mut().enumerate() {
                                *o += wv * in_plane[row + ox * d.stride];
                            }
                        }
                    }
                }
            }
        }
    }
    Grid::new(vec![d.c_out, d.h_out, d.w_out], out).expect("conv output shape")
}

/// Gradients w.r.t. input, weights, and bias given the output gradient.
pub(crate) fn backward<T: Scalar>(
    input: &Grid<T>,
    weights: &Grid<T>,
    grad_out: &Grid<T>,
    d: &ConvDims,
) -> (Grid<T>, Grid<T>, Grid<T>) {
    let padded = pad_input(input, d);
    let wdat = weights.data();
    let g = grad_out.data();
    let plane_out = d.h_out * d.w_out;
    let plane_pad = d.h_pad * d.w_pad;

    let mut gpad = vec![T::ZERO; d.c_in * d.h_pad * d.w_pad];
    let mut gw = vec![T::ZERO; weights.len()];
    let mut gb = vec![T::ZERO; d.c_out];

    for oc in 0..d.c_out {
        let g_plane = &g[oc * plane_out..(oc + 1) * plane_out];
        let mut acc = T::ZERO;
        for &v in g_plane {
            acc += v;
        }
        gb[oc] = acc;

        for ic in 0..d.c_in {
            let in_plane = &padded[ic * plane_pad..(ic + 1) * plane_pad];
            let gin_plane = &mut gpad[ic * plane_pad..(ic + 1) * plane_pad];
            let w_base = ((oc * d.c_in) + ic) * d.k * d.k;
            for ky in 0..d.k {
                for kx in 0..d.k {
                    let wv = wdat[w_base + ky * d.k + kx];
                    let mut wsum = T::ZERO;
                    if d.stride == 1 {
                        for oy in 0..d.h_out {
                            let base = (oy + ky) * d.w_pad + kx;
                            let grow = &g_plane[oy * d.w_out..(oy + 1) * d.w_out];
                            let src = &in_plane[base..base + d.w_out];
                            for (&gv, &x) in grow.iter().zip(src) {
                                wsum += gv * x;
                            }
                            let dst = &mut gin_plane[base..base + d.w_out];
                            for (o, &gv) in dst.iter_mut().zip(grow) {
                                *o += wv * gv;
                            }
                        }
                    } else {
                        for oy in 0..d.h_out {
                            let base = (oy * d.stride + ky) * d.w_pad + kx;
                            let grow = &g_plane[oy * d.w_out..(oy + 1) * d.w_out];
                            for (ox, &gv) in grow.iter().enumerate() {
                                let idx = base + ox * d.stride;
                                wsum += gv * in_plane[idx];
                                gin_plane[idx] += wv * gv;
                            }
                        }
                    }
                    gw[w_base + ky * d.k + kx] += wsum;
                }
            }
        }
    }

    let grad_input = unpad_grad(&gpad, d);
    let grad_weights = Grid::new(weights.shape().to_vec(), gw).expect("conv dw shape");
    let grad_bias = Grid::new(vec![d.c_out], gb).expect("conv db shape");
    (grad_input, grad_weights, grad_bias)
}
