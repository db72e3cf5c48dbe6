//! Loss functions for the joint model: the confidence-weighted
//! cross-entropy, the segmentation-consistency region constraint, local
//! windowed cross-correlation, field smoothness, the adversarial pair, and
//! the weighted totals for the registration and segmentation updates.
//!
//! Every loss is built on the tape, so gradients come from the engine and
//! are covered by the finite-difference oracle. All reductions are means,
//! which keeps the lambda weights resolution-independent.

use crate::error::{Error, Result};
use crate::grid::{Grid, Scalar};
use crate::tape::{NodeId, Tape};
use serde::{Deserialize, Serialize};

/// Epsilon added inside every `log` call; saturated sigmoid/softmax outputs
/// would otherwise hit the log domain edge.
pub const LOG_EPS: f64 = 1e-7;

/// Epsilon in the local cross-correlation denominator.
pub const CC_EPS: f64 = 1e-5;

/// Default local cross-correlation window side.
pub const CC_WINDOW: usize = 9;

/// Loss term weights. Defaults follow the tuned operating point:
/// adversarial 1, region constraint 10, cross-correlation 1, smoothness 1,
/// confidence-weighted CE 1, supervised CE 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_adv: f64,
    pub lambda_drc: f64,
    pub lambda_cc: f64,
    pub lambda_r: f64,
    pub lambda_acm: f64,
    pub lambda_ce: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_adv: 1.0,
            lambda_drc: 10.0,
            lambda_cc: 1.0,
            lambda_r: 1.0,
            lambda_acm: 1.0,
            lambda_ce: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda_adv", self.lambda_adv),
            ("lambda_drc", self.lambda_drc),
            ("lambda_cc", self.lambda_cc),
            ("lambda_r", self.lambda_r),
            ("lambda_acm", self.lambda_acm),
            ("lambda_ce", self.lambda_ce),
        ];
        for (name, v) in all {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Pixel-wise discriminator output: `[1,H,W]`, sigmoid range.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentConfidenceMap<T: Scalar> {
    grid: Grid<T>,
}

impl<T: Scalar> AlignmentConfidenceMap<T> {
    pub fn new(grid: Grid<T>) -> Result<Self> {
        if grid.rank() != 3 || grid.shape()[0] != 1 {
            return Err(Error::shape(
                "confidence_map",
                format!("expected [1,H,W], got {:?}", grid.shape()),
            ));
        }
        if grid
            .data()
            .iter()
            .any(|&v| !(v > T::ZERO && v < T::ONE))
        {
            return Err(Error::domain(
                "confidence_map",
                "values must lie strictly in (0,1)".to_string(),
            ));
        }
        Ok(AlignmentConfidenceMap { grid })
    }

    pub fn grid(&self) -> &Grid<T> {
        &self.grid
    }

    pub fn mean(&self) -> f64 {
        let s: f64 = self.grid.data().iter().map(|v| v.to_f64()).sum();
        s / self.grid.len() as f64
    }
}

fn expect_map<T: Scalar>(tape: &Tape<T>, id: NodeId, op: &'static str) -> Result<(usize, usize)> {
    let v = tape.value(id);
    if v.rank() != 3 || v.shape()[0] != 1 {
        return Err(Error::shape(
            op,
            format!("expected [1,H,W] map, got {:?}", v.shape()),
        ));
    }
    Ok((v.shape()[1], v.shape()[2]))
}

fn expect_same_shape<T: Scalar>(
    tape: &Tape<T>,
    a: NodeId,
    b: NodeId,
    op: &'static str,
) -> Result<()> {
    let (va, vb) = (tape.value(a), tape.value(b));
    if !va.same_shape(vb) {
        return Err(Error::shape(
            op,
            format!("shape mismatch: {:?} vs {:?}", va.shape(), vb.shape()),
        ));
    }
    Ok(())
}

fn check_normalized<T: Scalar>(tape: &Tape<T>, id: NodeId, op: &'static str) -> Result<()> {
    let v = tape.value(id);
    if v.rank() != 3 || v.shape()[0] < 2 {
        return Err(Error::shape(
            op,
            format!("expected [C>=2,H,W], got {:?}", v.shape()),
        ));
    }
    let (c_n, hw) = (v.shape()[0], v.shape()[1] * v.shape()[2]);
    for p in 0..hw {
        let mut s = 0.0;
        for c in 0..c_n {
            s += v.data()[c * hw + p].to_f64();
        }
        if (s - 1.0).abs() > 1e-4 {
            return Err(Error::domain(
                op,
                format!("channels sum to {s} at pixel {p}; expected 1"),
            ));
        }
    }
    Ok(())
}

/// Local windowed squared cross-correlation similarity, negated so that
/// better alignment means lower loss. Statistics are taken over windows that
/// lie fully inside the image, so the value is invariant to affine intensity
/// changes of either argument (padding a window with zeros would break that).
pub fn local_cc<T: Scalar>(
    tape: &mut Tape<T>,
    warped: NodeId,
    fixed: NodeId,
    window: usize,
) -> Result<NodeId> {
    if window % 2 == 0 || window == 0 {
        return Err(Error::Config(format!(
            "local_cc window must be odd, got {window}"
        )));
    }
    let (h, w) = expect_map(tape, warped, "local_cc")?;
    expect_map(tape, fixed, "local_cc")?;
    expect_same_shape(tape, warped, fixed, "local_cc")?;
    if h < window || w < window {
        return Err(Error::shape(
            "local_cc",
            format!("image {h}x{w} smaller than window {window}"),
        ));
    }

    let n = (window * window) as f64;
    let pad = 0;
    let ones = tape.constant(Grid::full(&[1, 1, window, window], T::ONE));
    let zero_bias = tape.constant(Grid::zeros(&[1]));

    let sum_a = tape.conv2d(warped, ones, zero_bias, 1, pad)?;
    let sum_b = tape.conv2d(fixed, ones, zero_bias, 1, pad)?;
    let a2 = tape.mul(warped, warped)?;
    let b2 = tape.mul(fixed, fixed)?;
    let ab = tape.mul(warped, fixed)?;
    let sum_a2 = tape.conv2d(a2, ones, zero_bias, 1, pad)?;
    let sum_b2 = tape.conv2d(b2, ones, zero_bias, 1, pad)?;
    let sum_ab = tape.conv2d(ab, ones, zero_bias, 1, pad)?;

    let sasb = tape.mul(sum_a, sum_b)?;
    let mean_term = tape.affine(sasb, 1.0 / n, 0.0);
    let cross = tape.sub(sum_ab, mean_term)?;

    let sasa = tape.mul(sum_a, sum_a)?;
    let var_a_mean = tape.affine(sasa, 1.0 / n, 0.0);
    let var_a = tape.sub(sum_a2, var_a_mean)?;
    let sbsb = tape.mul(sum_b, sum_b)?;
    let var_b_mean = tape.affine(sbsb, 1.0 / n, 0.0);
    let var_b = tape.sub(sum_b2, var_b_mean)?;

    let num = tape.square(cross);
    let var_prod = tape.mul(var_a, var_b)?;
    let den = tape.affine(var_prod, 1.0, CC_EPS);
    let cc = tape.div(num, den)?;
    let mean_cc = tape.reduce_mean(cc)?;
    Ok(tape.affine(mean_cc, -1.0, 0.0))
}

/// Smoothness penalty on a displacement field: mean squared forward
/// difference along rows and columns.
pub fn smoothness<T: Scalar>(tape: &mut Tape<T>, field: NodeId) -> Result<NodeId> {
    tape.smoothness(field)
}

/// Reference blend `beta * moving + (1 - beta) * fixed`; stands in for a
/// well-registered pair on the discriminator's positive side.
pub fn fuse_reference<T: Scalar>(x_m: &Grid<T>, x_f: &Grid<T>, beta: f64) -> Result<Grid<T>> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Config(format!("beta must be in [0,1], got {beta}")));
    }
    let b = T::from_f64(beta);
    let ib = T::ONE - b;
    x_m.zip_map(x_f, "fuse_reference", |m, f| b * m + ib * f)
}

/// Discriminator loss: reference pairs are positives, warped pairs
/// negatives: `mean[-log(d_ref + eps) - log(1 - d_warp + eps)]`.
pub fn disc_loss<T: Scalar>(tape: &mut Tape<T>, d_ref: NodeId, d_warp: NodeId) -> Result<NodeId> {
    expect_map(tape, d_ref, "disc_loss")?;
    expect_map(tape, d_warp, "disc_loss")?;
    expect_same_shape(tape, d_ref, d_warp, "disc_loss")?;
    let ref_eps = tape.affine(d_ref, 1.0, LOG_EPS);
    let log_ref = tape.log(ref_eps)?;
    let mean_ref = tape.reduce_mean(log_ref)?;
    let one_minus = tape.affine(d_warp, -1.0, 1.0 + LOG_EPS);
    let log_warp = tape.log(one_minus)?;
    let mean_warp = tape.reduce_mean(log_warp)?;
    let s = tape.add(mean_ref, mean_warp)?;
    Ok(tape.affine(s, -1.0, 0.0))
}

/// Non-saturating adversarial term for the registration update:
/// `mean[-log(d_warp + eps)]`.
pub fn adv_loss<T: Scalar>(tape: &mut Tape<T>, d_warp: NodeId) -> Result<NodeId> {
    expect_map(tape, d_warp, "adv_loss")?;
    let eps = tape.affine(d_warp, 1.0, LOG_EPS);
    let lg = tape.log(eps)?;
    let mean = tape.reduce_mean(lg)?;
    Ok(tape.affine(mean, -1.0, 0.0))
}

/// Per-pixel cross-entropy map `[1,H,W]`: `-sum_c target_c log(pred_c+eps)`.
fn ce_map<T: Scalar>(tape: &mut Tape<T>, pred: NodeId, target: NodeId) -> Result<NodeId> {
    let pred_eps = tape.affine(pred, 1.0, LOG_EPS);
    let lg = tape.log(pred_eps)?;
    let prod = tape.mul(target, lg)?;
    let s = tape.channel_sum(prod)?;
    Ok(tape.affine(s, -1.0, 0.0))
}

/// Cross-entropy between a softmax prediction and a (soft) one-hot target,
/// averaged over pixels.
pub fn ce_loss<T: Scalar>(tape: &mut Tape<T>, pred: NodeId, target: NodeId) -> Result<NodeId> {
    expect_same_shape(tape, pred, target, "ce_loss")?;
    check_normalized(tape, pred, "ce_loss")?;
    check_normalized(tape, target, "ce_loss")?;
    let map = ce_map(tape, pred, target)?;
    tape.reduce_mean(map)
}

/// Confidence-weighted cross-entropy: the discriminator's alignment map
/// down-weights misaligned pixels of the weakly supervised pair. The map is
/// detached here, so no gradient reaches the discriminator through this loss.
pub fn acm_loss<T: Scalar>(
    tape: &mut Tape<T>,
    d_map: NodeId,
    warped_label: NodeId,
    seg_fixed: NodeId,
) -> Result<NodeId> {
    let (h, w) = expect_map(tape, d_map, "acm_loss")?;
    expect_same_shape(tape, warped_label, seg_fixed, "acm_loss")?;
    let v = tape.value(seg_fixed);
    if v.rank() != 3 || v.shape()[1] != h || v.shape()[2] != w {
        return Err(Error::shape(
            "acm_loss",
            format!(
                "seg-mask {:?} does not match confidence map [1,{h},{w}]",
                v.shape()
            ),
        ));
    }
    check_normalized(tape, seg_fixed, "acm_loss")?;
    check_normalized(tape, warped_label, "acm_loss")?;
    let d_const = tape.detach(d_map);
    let map = ce_map(tape, seg_fixed, warped_label)?;
    let weighted = tape.mul(d_const, map)?;
    tape.reduce_mean(weighted)
}

/// Region constraint: mean squared difference between the seg-masks of the
/// warped and fixed images. Each structure lives in its own channel, so
/// regions are constrained independently; minimized by the registration.
pub fn drc_loss<T: Scalar>(
    tape: &mut Tape<T>,
    seg_warped: NodeId,
    seg_fixed: NodeId,
) -> Result<NodeId> {
    let (a, b) = (tape.value(seg_warped), tape.value(seg_fixed));
    if a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] {
        return Err(Error::shape(
            "drc_loss",
            format!(
                "seg-mask channel mismatch: {:?} vs {:?}",
                a.shape(),
                b.shape()
            ),
        ));
    }
    expect_same_shape(tape, seg_warped, seg_fixed, "drc_loss")?;
    let d = tape.sub(seg_warped, seg_fixed)?;
    let sq = tape.square(d);
    tape.reduce_mean(sq)
}

/// Scalar terms entering the registration total.
#[derive(Debug, Clone, Copy)]
pub struct RegLossTerms {
    pub adv: NodeId,
    pub drc: Option<NodeId>,
    pub cc: NodeId,
    pub smooth: NodeId,
}

/// Registration total: `l_adv*adv + l_drc*drc + l_cc*cc + l_r*smooth`.
pub fn reg_total<T: Scalar>(
    tape: &mut Tape<T>,
    terms: RegLossTerms,
    w: &LossWeights,
) -> Result<NodeId> {
    let mut acc = tape.affine(terms.adv, w.lambda_adv, 0.0);
    if let Some(drc) = terms.drc {
        let t = tape.affine(drc, w.lambda_drc, 0.0);
        acc = tape.add(acc, t)?;
    }
    let t = tape.affine(terms.cc, w.lambda_cc, 0.0);
    acc = tape.add(acc, t)?;
    let t = tape.affine(terms.smooth, w.lambda_r, 0.0);
    tape.add(acc, t)
}

/// Scalar terms entering the segmentation total.
#[derive(Debug, Clone, Copy)]
pub struct SegLossTerms {
    pub acm: Option<NodeId>,
    pub ce: NodeId,
}

/// Segmentation total: `l_acm*acm + l_ce*ce`.
pub fn seg_total<T: Scalar>(
    tape: &mut Tape<T>,
    terms: SegLossTerms,
    w: &LossWeights,
) -> Result<NodeId> {
    let mut acc = tape.affine(terms.ce, w.lambda_ce, 0.0);
    if let Some(acm) = terms.acm {
        let t = tape.affine(acm, w.lambda_acm, 0.0);
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}
