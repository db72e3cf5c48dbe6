//! Central finite-difference gradient checking.
//!
//! The oracle every differentiable operation is accepted against: analytic
//! gradients from [`Tape::backward`] are compared to
//! `(f(p+eps) - f(p-eps)) / (2 eps)` in 64-bit mode. For large parameter
//! tensors a deterministic subset of coordinates is probed.

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::tape::{NodeId, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamCheck>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

/// Relative error convention: `|a - n| / max(|a|, |n|, 1e-8)`.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Checks the analytic gradient of the scalar loss produced by `build`
/// against central finite differences.
///
/// `build` receives a fresh tape and the parameter leaves in the order of
/// `params`; it must be deterministic (two evaluations at the same point must
/// agree bit-for-bit, otherwise the check fails hard). `max_coords_per_param`
/// bounds the probed coordinates per tensor (0 means every coordinate).
/// When subsampling, coordinates are taken in decreasing analytic-gradient
/// magnitude with ties broken by a seeded shuffle: central differences cannot
/// resolve near-zero gradients below their cancellation noise, so the
/// informative directions are the large ones.
pub fn grad_check<F>(
    params: &[(String, Grid<f64>)],
    eps: f64,
    max_coords_per_param: usize,
    coord_seed: u64,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
{
    let eval = |point: &[(String, Grid<f64>)]| -> Result<(f64, Option<Tape<f64>>, NodeId)> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = point
            .iter()
            .map(|(name, grid)| tape.leaf(name, grid.clone()))
            .collect::<Result<_>>()?;
        let loss = build(&mut tape, &ids)?;
        let v = tape.scalar(loss)?;
        Ok((v, Some(tape), loss))
    };

    let (base_loss, tape, loss_id) = eval(params)?;
    let (replay_loss, _, _) = eval(params)?;
    if base_loss.to_bits() != replay_loss.to_bits() {
        return Err(Error::domain(
            "grad_check",
            format!(
                "non-deterministic loss builder: {base_loss:?} vs {replay_loss:?} on identical inputs"
            ),
        ));
    }
    let tape = tape.expect("tape retained");
    let grads = tape.backward(loss_id)?;

    let mut per_param = Vec::with_capacity(params.len());
    let mut overall: f64 = 0.0;
    for (pi, (name, grid)) in params.iter().enumerate() {
        let analytic = grads
            .named(name)
            .ok_or_else(|| Error::domain("grad_check", format!("missing gradient for {name}")))?;

        let n = grid.len();
        let coords: Vec<usize> = if max_coords_per_param == 0 || n <= max_coords_per_param {
            (0..n).collect()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(coord_seed.wrapping_add(pi as u64));
            let mut order: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
            order.sort_by(|&a, &b| {
                analytic.data()[b]
                    .abs()
                    .partial_cmp(&analytic.data()[a].abs())
                    .expect("finite gradients")
            });
            order.truncate(max_coords_per_param);
            order
        };

        let mut worst: f64 = 0.0;
        let mut point: Vec<(String, Grid<f64>)> = params.to_vec();
        for &ci in &coords {
            let orig = point[pi].1.data()[ci];
            point[pi].1.data_mut()[ci] = orig + eps;
            let (fp, _, _) = eval(&point)?;
            point[pi].1.data_mut()[ci] = orig - eps;
            let (fm, _, _) = eval(&point)?;
            point[pi].1.data_mut()[ci] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            worst = worst.max(rel_err(analytic.data()[ci], numeric));
        }
        overall = overall.max(worst);
        per_param.push(ParamCheck {
            name: name.clone(),
            max_rel_err: worst,
            coords_checked: coords.len(),
        });
    }

    Ok(GradCheckReport {
        per_param,
        max_rel_err: overall,
    })
}
