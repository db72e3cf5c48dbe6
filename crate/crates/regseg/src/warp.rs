//! Dense-displacement spatial transformer and the deformation-degree
//! perturbation block.
//!
//! A [`DisplacementField`] moves every output pixel `p` to sample the input
//! at `p + field(p)` with bilinear interpolation, clamped at the border.
//! [`dss_sample`] scales a field by a random factor in `[0,1]`, sampling an
//! intermediate deformation along the displacement path; drawing a fresh
//! factor per use keeps warped training data diverse even after the
//! registration network converges.

use crate::error::{Error, Result};
use crate::grid::{Grid, Scalar};
use crate::sampling;
use crate::tape::{NodeId, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Tolerance for validating that label channels sum to one per pixel.
const LABEL_SUM_TOL: f64 = 1e-4;

/// Per-pixel displacement field `[2,H,W]`: channel 0 is the row
/// displacement, channel 1 the column displacement, both in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField<T: Scalar> {
    grid: Grid<T>,
}

impl<T: Scalar> DisplacementField<T> {
    pub fn new(grid: Grid<T>) -> Result<Self> {
        if grid.rank() != 3 || grid.shape()[0] != 2 {
            return Err(Error::shape(
                "displacement_field",
                format!("expected [2,H,W], got {:?}", grid.shape()),
            ));
        }
        grid.ensure_finite("displacement_field")?;
        Ok(DisplacementField { grid })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        DisplacementField {
            grid: Grid::zeros(&[2, h, w]),
        }
    }

    /// Constant translation field `(dy, dx)`.
    pub fn translation(h: usize, w: usize, dy: f64, dx: f64) -> Self {
        let mut grid = Grid::zeros(&[2, h, w]);
        let hw = h * w;
        let (dyv, dxv) = (T::from_f64(dy), T::from_f64(dx));
        for i in 0..hw {
            grid.data_mut()[i] = dyv;
            grid.data_mut()[hw + i] = dxv;
        }
        DisplacementField { grid }
    }

    pub fn grid(&self) -> &Grid<T> {
        &self.grid
    }

    pub fn into_grid(self) -> Grid<T> {
        self.grid
    }

    pub fn height(&self) -> usize {
        self.grid.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.grid.shape()[2]
    }

    /// The field scaled by a perturbation factor; the original is untouched.
    pub fn scaled(&self, alpha: f64) -> Self {
        let a = T::from_f64(alpha);
        DisplacementField {
            grid: self.grid.map(|v| a * v),
        }
    }
}

/// One draw of the perturbation factor, with its seed for provenance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationDraw {
    pub alpha: f64,
    pub seed: u64,
}

/// Draws `alpha ~ U[0,1]` from the given seed and returns the scaled field
/// together with the draw. One scalar factor is applied to the whole field.
pub fn dss_sample<T: Scalar>(
    field: &DisplacementField<T>,
    seed: u64,
) -> (DisplacementField<T>, PerturbationDraw) {
    let alpha = draw_alpha(seed);
    (field.scaled(alpha), PerturbationDraw { alpha, seed })
}

/// The perturbation factor that [`dss_sample`] would draw for `seed`.
pub fn draw_alpha(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.gen::<f64>()
}

fn check_image_field<T: Scalar>(image: &Grid<T>, field: &DisplacementField<T>) -> Result<()> {
    if image.rank() != 3 {
        return Err(Error::shape(
            "warp_image",
            format!("image must be [C,H,W], got {:?}", image.shape()),
        ));
    }
    if image.shape()[1] != field.height() || image.shape()[2] != field.width() {
        return Err(Error::shape(
            "warp_image",
            format!(
                "image {:?} does not match field [2,{},{}]",
                image.shape(),
                field.height(),
                field.width()
            ),
        ));
    }
    Ok(())
}

/// Bilinear warp of an image by a displacement field (eager, off-tape).
pub fn warp_image<T: Scalar>(image: &Grid<T>, field: &DisplacementField<T>) -> Result<Grid<T>> {
    check_image_field(image, field)?;
    Ok(sampling::warp_forward(image, field.grid()))
}

fn check_label_normalized<T: Scalar>(label: &Grid<T>) -> Result<()> {
    if label.rank() != 3 || label.shape()[0] < 2 {
        return Err(Error::shape(
            "warp_label",
            format!("label must be [C>=2,H,W], got {:?}", label.shape()),
        ));
    }
    let (c_n, h, w) = (label.shape()[0], label.shape()[1], label.shape()[2]);
    let hw = h * w;
    for p in 0..hw {
        let mut s = 0.0;
        for c in 0..c_n {
            s += label.data()[c * hw + p].to_f64();
        }
        if (s - 1.0).abs() > LABEL_SUM_TOL {
            return Err(Error::domain(
                "warp_label",
                format!("label channels sum to {s} at pixel {p}; expected 1"),
            ));
        }
    }
    Ok(())
}

/// Warps a (soft) one-hot label and renormalizes each pixel to sum to one.
pub fn warp_label<T: Scalar>(label: &Grid<T>, field: &DisplacementField<T>) -> Result<Grid<T>> {
    check_label_normalized(label)?;
    check_image_field(label, field)?;
    let warped = sampling::warp_forward(label, field.grid());
    let (c_n, h, w) = (warped.shape()[0], warped.shape()[1], warped.shape()[2]);
    let hw = h * w;
    let tiny = T::from_f64(1e-7);
    let mut out = warped;
    let d = out.data_mut();
    for p in 0..hw {
        let mut s = tiny;
        for c in 0..c_n {
            s += d[c * hw + p];
        }
        for c in 0..c_n {
            d[c * hw + p] /= s;
        }
    }
    Ok(out)
}

/// Warps a hard one-hot label and re-binarizes it by per-pixel argmax.
/// Used for ground-truth labels, where crisp masks are wanted.
pub fn warp_label_hard<T: Scalar>(
    label: &Grid<T>,
    field: &DisplacementField<T>,
) -> Result<Grid<T>> {
    check_label_normalized(label)?;
    check_image_field(label, field)?;
    let warped = sampling::warp_forward(label, field.grid());
    let (c_n, h, w) = (warped.shape()[0], warped.shape()[1], warped.shape()[2]);
    let hw = h * w;
    let mut out = Grid::zeros(warped.shape());
    for p in 0..hw {
        let mut best = 0usize;
        let mut best_v = warped.data()[p];
        for c in 1..c_n {
            let v = warped.data()[c * hw + p];
            if v > best_v {
                best_v = v;
                best = c;
            }
        }
        out.data_mut()[best * hw + p] = T::ONE;
    }
    Ok(out)
}

/// Tape-recorded label warp: bilinear warp then per-pixel renormalization,
/// differentiable w.r.t. the field.
pub fn warp_label_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    label: NodeId,
    field: NodeId,
) -> Result<NodeId> {
    check_label_normalized(tape.value(label))?;
    let warped = tape.warp_image(label, field)?;
    tape.renorm_channels(warped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn smooth_random_field(h: usize, w: usize, amp: f64, seed: u64) -> DisplacementField<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Low-frequency sinusoid mixture keeps the field smooth.
        let (a1, a2, p1, p2) = (
            rng.gen_range(-amp..amp),
            rng.gen_range(-amp..amp),
            rng.gen_range(0.0..6.28),
            rng.gen_range(0.0..6.28),
        );
        let grid = Grid::from_fn(&[2, h, w], |idx| {
            let ch = idx / (h * w);
            let i = (idx / w) % h;
            let j = idx % w;
            let t = (i as f64 / h as f64 + 2.0 * j as f64 / w as f64) * 3.0;
            if ch == 0 {
                a1 * (t + p1).sin()
            } else {
                a2 * (t + p2).cos()
            }
        });
        DisplacementField::new(grid).unwrap()
    }

    #[test]
    fn dss_endpoints_and_scaling() {
        let field = DisplacementField::<f64>::translation(4, 4, 2.0, 2.0);
        assert!(field.scaled(0.0).grid().data().iter().all(|&v| v == 0.0));
        assert_eq!(field.scaled(1.0), field);
        let half = field.scaled(0.5);
        assert!(half.grid().data().iter().all(|&v| v == 1.0));

        let (sampled, draw) = dss_sample(&field, 99);
        assert!((0.0..=1.0).contains(&draw.alpha));
        assert_eq!(draw.seed, 99);
        assert_eq!(sampled, field.scaled(draw.alpha));
        // Same seed, same draw.
        assert_eq!(dss_sample(&field, 99).1, draw);
    }

    #[test]
    fn identity_warp_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let image = Grid::<f64>::from_fn(&[3, 6, 5], |_| rng.gen_range(0.0..1.0));
        let out = warp_image(&image, &DisplacementField::zeros(6, 5)).unwrap();
        assert!(out
            .data()
            .iter()
            .zip(image.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn half_pixel_row_averages_and_clamps() {
        let image = Grid::<f64>::new(vec![1, 1, 2], vec![0.2, 0.8]).unwrap();
        let field = DisplacementField::translation(1, 2, 0.0, 0.5);
        let out = warp_image(&image, &field).unwrap();
        assert!((out.data()[0] - 0.5).abs() < 1e-12);
        assert!((out.data()[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn integer_shift_matches_index_oracle_on_interior() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let image = Grid::<f64>::from_fn(&[1, 8, 8], |_| rng.gen_range(0.0..1.0));
        let field = DisplacementField::translation(8, 8, 1.0, 0.0);
        let out = warp_image(&image, &field).unwrap();
        // output(i,j) samples input at (i+1, j): valid for i in 0..7.
        for i in 0..7 {
            for j in 0..8 {
                assert_eq!(out.at3(0, i, j), image.at3(0, i + 1, j), "({i},{j})");
            }
        }
    }

    #[test]
    fn warp_label_keeps_pixels_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // Random soft label, normalized per pixel.
        let mut label = Grid::<f64>::from_fn(&[3, 8, 8], |_| rng.gen_range(0.1..1.0));
        for p in 0..64 {
            let s: f64 = (0..3).map(|c| label.data()[c * 64 + p]).sum();
            for c in 0..3 {
                label.data_mut()[c * 64 + p] /= s;
            }
        }
        for seed in 0..5 {
            let field = smooth_random_field(8, 8, 2.0, seed);
            let warped = warp_label(&label, &field).unwrap();
            for p in 0..64 {
                let s: f64 = (0..3).map(|c| warped.data()[c * 64 + p]).sum();
                assert!((s - 1.0).abs() < 1e-6, "sum {s}");
            }
        }
        // Zero field leaves the label unchanged (up to renormalization tiny).
        let same = warp_label(&label, &DisplacementField::zeros(8, 8)).unwrap();
        for (a, b) in same.data().iter().zip(label.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn non_normalized_label_rejected() {
        let label = Grid::<f64>::full(&[2, 4, 4], 0.9);
        let field = DisplacementField::zeros(4, 4);
        assert!(warp_label(&label, &field).is_err());
    }

    #[test]
    fn hard_label_shift_matches_index_oracle() {
        // A one-hot disc mask shifted down by 2 rows.
        let (h, w) = (12, 12);
        let mut label = Grid::<f64>::zeros(&[2, h, w]);
        for i in 0..h {
            for j in 0..w {
                let inside =
                    (i as f64 - 6.0).powi(2) + (j as f64 - 6.0).powi(2) <= 9.0;
                label.set3(usize::from(inside), i, j, 1.0);
            }
        }
        let field = DisplacementField::translation(h, w, 2.0, 0.0);
        let shifted = warp_label_hard(&label, &field).unwrap();
        for i in 0..h - 2 {
            for j in 0..w {
                assert_eq!(shifted.at3(1, i, j), label.at3(1, i + 2, j), "({i},{j})");
            }
        }
    }

    #[test]
    fn interpolation_toward_target_is_monotone_for_translations() {
        // Axis-aligned sub-pixel translation: per-pixel linearity makes the
        // mean absolute difference to the fully warped image exactly
        // non-increasing in alpha.
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let image = Grid::<f64>::from_fn(&[1, 10, 10], |_| rng.gen_range(0.0..1.0));
        let field = DisplacementField::translation(10, 10, 0.6, 0.0);
        let target = warp_image(&image, &field).unwrap();
        let mad = |alpha: f64| -> f64 {
            let w = warp_image(&image, &field.scaled(alpha)).unwrap();
            let mut acc = 0.0;
            let mut n = 0.0;
            for i in 2..8 {
                for j in 2..8 {
                    acc += (w.at3(0, i, j) - target.at3(0, i, j)).abs();
                    n += 1.0;
                }
            }
            acc / n
        };
        let mut prev = f64::INFINITY;
        for k in 0..=10 {
            let cur = mad(k as f64 / 10.0);
            assert!(cur <= prev + 1e-12, "alpha {} rose: {cur} > {prev}", k);
            prev = cur;
        }

        // A linear-intensity plane stays exact under bilinear sampling, so
        // the same monotonicity holds for a multi-pixel translation.
        let plane = Grid::<f64>::from_fn(&[1, 12, 12], |idx| {
            let i = (idx / 12) % 12;
            let j = idx % 12;
            0.03 * i as f64 + 0.05 * j as f64
        });
        let big = DisplacementField::translation(12, 12, 2.5, 1.5);
        let target = warp_image(&plane, &big).unwrap();
        let mut prev = f64::INFINITY;
        for k in 0..=10 {
            let alpha = k as f64 / 10.0;
            let wimg = warp_image(&plane, &big.scaled(alpha)).unwrap();
            let mut acc = 0.0;
            for i in 4..8 {
                for j in 4..8 {
                    acc += (wimg.at3(0, i, j) - target.at3(0, i, j)).abs();
                }
            }
            assert!(acc <= prev + 1e-12, "alpha {alpha} rose");
            prev = acc;
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let image = Grid::<f64>::zeros(&[1, 4, 4]);
        let field = DisplacementField::zeros(5, 4);
        assert!(warp_image(&image, &field).is_err());
    }
}
