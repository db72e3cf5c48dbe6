//! The standard gradient-check suite: every loss, the two full training
//! objectives through all three networks, and the warp's field gradients,
//! verified against central finite differences in 64-bit mode on a small
//! toy instance.

use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckReport};
use crate::grid::Grid;
use crate::losses::{self, LossWeights, RegLossTerms, SegLossTerms};
use crate::nets::{build_disc_net, build_reg_net, build_seg_net, ArchConfig, NetworkHandle};
use crate::tape::NodeId;
use crate::util::mix_seed;
use crate::warp::warp_label_on_tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

pub struct SuiteItem {
    pub name: &'static str,
    pub report: GradCheckReport,
}

fn smooth_image(size: usize, seed: u64) -> Grid<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b, pa, pb) = (
        rng.gen_range(0.5..1.5),
        rng.gen_range(0.5..1.5),
        rng.gen_range(0.0..6.28),
        rng.gen_range(0.0..6.28),
    );
    Grid::from_fn(&[1, size, size], |idx| {
        let i = (idx / size) as f64 / size as f64;
        let j = (idx % size) as f64 / size as f64;
        let v = 0.5
            + 0.25 * (a * 6.0 * i + pa).sin()
            + 0.2 * (b * 5.0 * j + pb).cos()
            + 0.05 * (11.0 * (i + j)).sin();
        v.clamp(0.02, 0.98)
    })
}

/// Hard one-hot toy label with C classes from smooth intensity bands.
fn toy_label(size: usize, classes: usize, seed: u64) -> Grid<f64> {
    let base = smooth_image(size, seed);
    let mut out = Grid::zeros(&[classes, size, size]);
    for p in 0..size * size {
        let v = base.data()[p];
        let c = ((v * classes as f64) as usize).min(classes - 1);
        out.data_mut()[c * size * size + p] = 1.0;
    }
    out
}

/// Off-integer displacement field; bilinear gradients are checked away from
/// the interpolation knots where the kernel is non-smooth.
fn off_integer_field(size: usize, seed: u64) -> Grid<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Grid::from_fn(&[2, size, size], |_| {
        let mag = rng.gen_range(0.2..0.7);
        if rng.gen_bool(0.5) {
            mag
        } else {
            -mag
        }
    })
}

fn params_of(net: &NetworkHandle<f64>) -> Vec<(String, Grid<f64>)> {
    net.params()
        .iter()
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect()
}

fn bound_from(names: &[(String, Grid<f64>)], ids: &[NodeId]) -> BTreeMap<String, NodeId> {
    names
        .iter()
        .zip(ids)
        .map(|((name, _), id)| (name.clone(), *id))
        .collect()
}

/// Runs the full suite. `max_coords` bounds probed coordinates per tensor.
pub fn loss_suite(
    size: usize,
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> Result<Vec<SuiteItem>> {
    let mut items = Vec::new();
    let x_m = smooth_image(size, mix_seed(seed, "xm", 0));
    let x_f = smooth_image(size, mix_seed(seed, "xf", 0));
    let y_m = toy_label(size, 4, mix_seed(seed, "ym", 0));
    let field = off_integer_field(size, mix_seed(seed, "field", 0));
    let weights = LossWeights::default();

    // Plain losses on leaf inputs.
    items.push(SuiteItem {
        name: "local_cc",
        report: grad_check(
            &[("a".into(), x_m.clone()), ("b".into(), x_f.clone())],
            eps,
            max_coords,
            seed,
            |t, ids| losses::local_cc(t, ids[0], ids[1], 9),
        )?,
    });
    items.push(SuiteItem {
        name: "smoothness",
        report: grad_check(&[("f".into(), field.clone())], eps, max_coords, seed, |t, ids| {
            losses::smoothness(t, ids[0])
        })?,
    });
    items.push(SuiteItem {
        name: "cross_entropy",
        report: {
            let target = toy_label(size, 4, mix_seed(seed, "tgt", 0));
            let logits = off_integer_field(size, mix_seed(seed, "lg", 0));
            // Reuse the field generator as a logit source across 4 channels.
            let logits4 = Grid::from_fn(&[4, size, size], |i| {
                logits.data()[i % logits.len()] * 2.0
            });
            grad_check(&[("lg".into(), logits4)], eps, max_coords, seed, move |t, ids| {
                let sm = t.softmax_channel(ids[0])?;
                let tg = t.constant(target.clone());
                losses::ce_loss(t, sm, tg)
            })?
        },
    });
    items.push(SuiteItem {
        name: "disc_bce",
        report: {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, "dmaps", 0));
            let d_ref = Grid::from_fn(&[1, size, size], |_| rng.gen_range(0.1..0.9));
            let d_warp = Grid::from_fn(&[1, size, size], |_| rng.gen_range(0.1..0.9));
            grad_check(
                &[("dr".into(), d_ref), ("dw".into(), d_warp)],
                eps,
                max_coords,
                seed,
                |t, ids| losses::disc_loss(t, ids[0], ids[1]),
            )?
        },
    });
    items.push(SuiteItem {
        name: "adversarial",
        report: {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, "advmap", 0));
            let d_warp = Grid::from_fn(&[1, size, size], |_| rng.gen_range(0.1..0.9));
            grad_check(&[("dw".into(), d_warp)], eps, max_coords, seed, |t, ids| {
                losses::adv_loss(t, ids[0])
            })?
        },
    });
    items.push(SuiteItem {
        name: "confidence_weighted_ce",
        report: {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, "acm", 0));
            let d_map = Grid::from_fn(&[1, size, size], |_| rng.gen_range(0.1..0.9));
            let label = toy_label(size, 4, mix_seed(seed, "acml", 0));
            let logits = Grid::from_fn(&[4, size, size], |_| rng.gen_range(-1.5..1.5));
            grad_check(&[("lg".into(), logits)], eps, max_coords, seed, move |t, ids| {
                let sm = t.softmax_channel(ids[0])?;
                let d = t.constant(d_map.clone());
                let lb = t.constant(label.clone());
                losses::acm_loss(t, d, lb, sm)
            })?
        },
    });
    items.push(SuiteItem {
        name: "region_constraint",
        report: {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, "drc", 0));
            let la = Grid::from_fn(&[4, size, size], |_| rng.gen_range(-1.5..1.5));
            let lb = Grid::from_fn(&[4, size, size], |_| rng.gen_range(-1.5..1.5));
            grad_check(
                &[("a".into(), la), ("b".into(), lb)],
                eps,
                max_coords,
                seed,
                |t, ids| {
                    let sa = t.softmax_channel(ids[0])?;
                    let sb = t.softmax_channel(ids[1])?;
                    losses::drc_loss(t, sa, sb)
                },
            )?
        },
    });
    items.push(SuiteItem {
        name: "warp_field_grad",
        report: {
            let image = x_m.clone();
            grad_check(&[("field".into(), field.clone())], eps, max_coords, seed, move |t, ids| {
                let img = t.constant(image.clone());
                let w = t.warp_image(img, ids[0])?;
                let sq = t.square(w);
                t.reduce_mean(sq)
            })?
        },
    });

    // Full training objectives through the three networks.
    let cfg = ArchConfig::default();
    let mut reg: NetworkHandle<f64> = build_reg_net(cfg, mix_seed(seed, "reg", 0))?;
    let seg: NetworkHandle<f64> = build_seg_net(cfg, mix_seed(seed, "seg", 0))?;
    let disc: NetworkHandle<f64> = build_disc_net(cfg, mix_seed(seed, "disc", 0))?;
    // Randomize the zero-initialised registration head so the field lands
    // away from the bilinear kernel's integer knots.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, "head", 0));
        let shape_w = reg.params()["reg.head.w"].shape().to_vec();
        let noisy = Grid::from_fn(&shape_w, |_| rng.gen_range(-0.05..0.05));
        reg.set_param("reg.head.w", noisy)?;
        let shape_b = reg.params()["reg.head.b"].shape().to_vec();
        let noisy_b = Grid::from_fn(&shape_b, |_| rng.gen_range(0.1..0.4));
        reg.set_param("reg.head.b", noisy_b)?;
    }

    items.push(SuiteItem {
        name: "registration_total",
        report: {
            let reg_params = params_of(&reg);
            let (reg_c, seg_c, disc_c) = (reg.clone(), seg.clone(), disc.clone());
            let (xm, xf) = (x_m.clone(), x_f.clone());
            let w = weights;
            grad_check(&reg_params.clone(), eps, max_coords, seed, move |t, ids| {
                let bound = crate::nets::BoundNet::from_ids(bound_from(&reg_params, ids));
                let seg_b = seg_c.bind(t, false)?;
                let disc_b = disc_c.bind(t, false)?;
                let xm_n = t.constant(xm.clone());
                let xf_n = t.constant(xf.clone());
                let pair = t.concat_channels(&[xm_n, xf_n])?;
                let phi = reg_c.forward(t, &bound, pair)?;
                let scaled = t.affine(phi, 0.7, 0.0);
                let warped = t.warp_image(xm_n, scaled)?;
                let wp = t.concat_channels(&[warped, xf_n])?;
                let d_warp = disc_c.forward(t, &disc_b, wp)?;
                let adv = losses::adv_loss(t, d_warp)?;
                let seg_w = seg_c.forward(t, &seg_b, warped)?;
                let seg_f = seg_c.forward(t, &seg_b, xf_n)?;
                let drc = losses::drc_loss(t, seg_w, seg_f)?;
                let cc = losses::local_cc(t, warped, xf_n, 9)?;
                let smooth = losses::smoothness(t, phi)?;
                losses::reg_total(
                    t,
                    RegLossTerms {
                        adv,
                        drc: Some(drc),
                        cc,
                        smooth,
                    },
                    &w,
                )
            })?
        },
    });

    items.push(SuiteItem {
        name: "segmentation_total",
        report: {
            let seg_params = params_of(&seg);
            let (reg_c, seg_c, disc_c) = (reg.clone(), seg.clone(), disc.clone());
            let (xm, xf, ym) = (x_m.clone(), x_f.clone(), y_m.clone());
            let w = weights;
            grad_check(&seg_params.clone(), eps, max_coords, seed, move |t, ids| {
                let bound = crate::nets::BoundNet::from_ids(bound_from(&seg_params, ids));
                let reg_b = reg_c.bind(t, false)?;
                let disc_b = disc_c.bind(t, false)?;
                let xm_n = t.constant(xm.clone());
                let xf_n = t.constant(xf.clone());
                let ym_n = t.constant(ym.clone());
                let pair = t.concat_channels(&[xm_n, xf_n])?;
                let phi = reg_c.forward(t, &reg_b, pair)?;
                let scaled = t.affine(phi, 0.6, 0.0);
                let warped = t.warp_image(xm_n, scaled)?;
                let y_w = warp_label_on_tape(t, ym_n, scaled)?;
                let seg_w = seg_c.forward(t, &bound, warped)?;
                let ce = losses::ce_loss(t, seg_w, y_w)?;
                let wp = t.concat_channels(&[warped, xf_n])?;
                let d_map = disc_c.forward(t, &disc_b, wp)?;
                let seg_f = seg_c.forward(t, &bound, xf_n)?;
                let acm = losses::acm_loss(t, d_map, y_w, seg_f)?;
                losses::seg_total(t, SegLossTerms { acm: Some(acm), ce }, &w)
            })?
        },
    });

    Ok(items)
}
