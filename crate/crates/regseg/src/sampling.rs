//! Bilinear sampling kernels for dense-displacement warping.
//!
//! `output(p) = bilinear(image, p + field(p))` with out-of-range sample
//! coordinates clamped to the border. Differentiable w.r.t. both the image
//! and the field; the clamp zeroes field gradients at the border.

use crate::grid::{Grid, Scalar};

#[inline]
fn clamp_coord<T: Scalar>(v: T, max: T) -> (T, bool) {
    if v < T::ZERO {
        (T::ZERO, true)
    } else if v > max {
        (max, true)
    } else {
        (v, false)
    }
}

/// Forward warp: `image` is `[C,H,W]`, `field` is `[2,H,W]` (row, col
/// displacements in pixels).
pub(crate) fn warp_forward<T: Scalar>(image: &Grid<T>, field: &Grid<T>) -> Grid<T> {
    let (c_n, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let mut out = Grid::zeros(&[c_n, h, w]);
    let hw = h * w;
    let img = image.data();
    let f = field.data();
    let odat = out.data_mut();
    let h_max = T::from_f64((h - 1) as f64);
    let w_max = T::from_f64((w - 1) as f64);

    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            let y = T::from_f64(i as f64) + f[p];
            let x = T::from_f64(j as f64) + f[hw + p];
            let (yc, _) = clamp_coord(y, h_max);
            let (xc, _) = clamp_coord(x, w_max);
            let y0 = yc.floor();
            let x0 = xc.floor();
            let dy = yc - y0;
            let dx = xc - x0;
            let i0 = y0.to_f64() as usize;
            let j0 = x0.to_f64() as usize;
            let i1 = (i0 + 1).min(h - 1);
            let j1 = (j0 + 1).min(w - 1);
            let w00 = (T::ONE - dy) * (T::ONE - dx);
            let w01 = (T::ONE - dy) * dx;
            let w10 = dy * (T::ONE - dx);
            let w11 = dy * dx;
            for c in 0..c_n {
                let base = c * hw;
                odat[base + p] = w00 * img[base + i0 * w + j0]
                    + w01 * img[base + i0 * w + j1]
                    + w10 * img[base + i1 * w + j0]
                    + w11 * img[base + i1 * w + j1];
            }
        }
    }
    out
}

/// Backward warp: gradients w.r.t. image and field given the output gradient.
pub(crate) fn warp_backward<T: Scalar>(
    image: &Grid<T>,
    field: &Grid<T>,
    grad_out: &Grid<T>,
) -> (Grid<T>, Grid<T>) {
    let (c_n, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let hw = h * w;
    let img = image.data();
    let f = field.data();
    let g = grad_out.data();
    let mut gimg = Grid::zeros(image.shape());
    let mut gfield = Grid::zeros(field.shape());
    let h_max = T::from_f64((h - 1) as f64);
    let w_max = T::from_f64((w - 1) as f64);

    let gi = gimg.data_mut();
    let gf = gfield.data_mut();
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            let y = T::from_f64(i as f64) + f[p];
            let x = T::from_f64(j as f64) + f[hw + p];
            let (yc, y_clamped) = clamp_coord(y, h_max);
            let (xc, x_clamped) = clamp_coord(x, w_max);
            let y0 = yc.floor();
            let x0 = xc.floor();
            let dy = yc - y0;
            let dx = xc - x0;
            let i0 = y0.to_f64() as usize;
            let j0 = x0.to_f64() as usize;
            let i1 = (i0 + 1).min(h - 1);
            let j1 = (j0 + 1).min(w - 1);
            let w00 = (T::ONE - dy) * (T::ONE - dx);
            let w01 = (T::ONE - dy) * dx;
            let w10 = dy * (T::ONE - dx);
            let w11 = dy * dx;
            let mut gy = T::ZERO;
            let mut gx = T::ZERO;
            for c in 0..c_n {
                let base = c * hw;
                let gv = g[base + p];
                let v00 = img[base + i0 * w + j0];
                let v01 = img[base + i0 * w + j1];
                let v10 = img[base + i1 * w + j0];
                let v11 = img[base + i1 * w + j1];
                gi[base + i0 * w + j0] += gv * w00;
                gi[base + i0 * w + j1] += gv * w01;
                gi[base + i1 * w + j0] += gv * w10;
                gi[base + i1 * w + j1] += gv * w11;
                gy += gv * ((v10 - v00) * (T::ONE - dx) + (v11 - v01) * dx);
                gx += gv * ((v01 - v00) * (T::ONE - dy) + (v11 - v10) * dy);
            }
            if !y_clamped {
                gf[p] = gy;
            }
            if !x_clamped {
                gf[hw + p] = gx;
            }
        }
    }
    (gimg, gfield)
}
