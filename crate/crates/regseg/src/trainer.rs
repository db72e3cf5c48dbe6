//! Alternating joint training loop.
//!
//! Each step runs up to three sub-updates on fresh tapes, in order:
//! discriminator (reference vs warped pairs), registration (adversarial +
//! region constraint + similarity + smoothness), segmentation (supervised CE
//! on warped pairs + confidence-weighted CE on weakly supervised pairs).
//! During every sub-update the other two networks are inserted as constants,
//! so their parameters and gradient buffers stay untouched.
//!
//! All randomness is derived per step from the master seed, which makes runs
//! bit-reproducible and lets a resumed run replay the exact trajectory.

use crate::error::{Error, Result};
use crate::grid::{Grid, Scalar};
use crate::losses::{self, LossWeights, RegLossTerms, SegLossTerms};
use crate::nets::{build_disc_net, build_reg_net, build_seg_net, ArchConfig, NetworkHandle};
use crate::optim::{OptimizerKind, OptimizerState};
use crate::rsf;
use crate::synthdata::{Corpus, Sample};
use crate::tape::Tape;
use crate::util::{fnv1a64, mix_seed};
use crate::warp::{self, warp_label_on_tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Alternating discriminator / registration / segmentation updates.
    Joint,
    /// Registration and discriminator only.
    RegOnly,
    /// Registration warm-up, then segmentation on freshly warped copies.
    SegOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: u64,
    pub mode: TrainMode,
    pub use_dss: bool,
    pub use_acm: bool,
    pub use_drc: bool,
    pub weights: LossWeights,
    pub arch: ArchConfig,
    pub lr_reg: f64,
    pub lr_seg: f64,
    pub lr_disc: f64,
    pub batch_size: usize,
    /// Reference-image fusion factor.
    pub beta: f64,
    pub cc_window: usize,
    /// Registration warm-up before the seg-only phase.
    pub seg_warmup_steps: u64,
    /// Checkpoint cadence in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    /// Restrict the labeled pool to its first k samples (label-count sweep).
    pub n_labeled_used: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 7,
            steps: 2000,
            mode: TrainMode::Joint,
            use_dss: true,
            use_acm: true,
            use_drc: true,
            weights: LossWeights::default(),
            arch: ArchConfig::default(),
            lr_reg: 2e-4,
            lr_seg: 2e-4,
            lr_disc: 2e-4,
            batch_size: 1,
            beta: 0.1,
            cc_window: 9,
            seg_warmup_steps: 500,
            checkpoint_every: 0,
            n_labeled_used: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.arch.validate()?;
        for (name, lr) in [
            ("lr_reg", self.lr_reg),
            ("lr_seg", self.lr_seg),
            ("lr_disc", self.lr_disc),
        ] {
            if !(lr >= 0.0) {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {lr}"
                )));
            }
        }
        if self.batch_size != 1 {
            return Err(Error::Config(
                "batch_size other than 1 is not supported".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta must be in [0,1], got {}", self.beta)));
        }
        if self.cc_window % 2 == 0 {
            return Err(Error::Config("cc_window must be odd".into()));
        }
        match self.mode {
            TrainMode::RegOnly if self.use_drc || self.use_acm => Err(Error::Config(
                "reg-only mode trains without seg feedback: use_drc/use_acm must be false".into(),
            )),
            TrainMode::SegOnly if self.use_acm || self.use_drc => Err(Error::Config(
                "seg-only mode is the plain baseline: use_acm/use_drc must be false".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn config_hash(&self) -> u64 {
        let json = serde_json::to_string(self).expect("config serializes");
        fnv1a64(json.as_bytes())
    }

    /// Warm-up steps that precede the main budget (seg-only mode).
    pub fn warmup_steps(&self) -> u64 {
        match self.mode {
            TrainMode::SegOnly => self.seg_warmup_steps,
            _ => 0,
        }
    }

    pub fn total_steps(&self) -> u64 {
        self.steps + self.warmup_steps()
    }
}

/// Per-step loss bookkeeping. `ms` is wall time and is the one column
/// excluded from determinism comparisons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub l_d: f64,
    pub l_adv: f64,
    pub l_drc: f64,
    pub l_cc: f64,
    pub l_r: f64,
    pub l_reg: f64,
    pub l_acm: f64,
    pub l_ce: f64,
    pub l_seg: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub ms: u64,
}

impl StepLog {
    pub const CSV_HEADER: &'static str =
        "step,L_D,L_adv,L_drc,L_cc,L_R,L_reg,L_acm,L_ce,L_seg,alpha1,alpha2,alpha3,ms";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.l_d,
            self.l_adv,
            self.l_drc,
            self.l_cc,
            self.l_r,
            self.l_reg,
            self.l_acm,
            self.l_ce,
            self.l_seg,
            self.alpha1,
            self.alpha2,
            self.alpha3,
            self.ms
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<StepLog> {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 14 {
            return Err(Error::Config(format!(
                "step log row has {} fields, expected 14",
                parts.len()
            )));
        }
        let f = |i: usize| -> Result<f64> {
            parts[i]
                .parse()
                .map_err(|e| Error::Config(format!("bad float '{}': {e}", parts[i])))
        };
        Ok(StepLog {
            step: parts[0]
                .parse()
                .map_err(|e| Error::Config(format!("bad step: {e}")))?,
            l_d: f(1)?,
            l_adv: f(2)?,
            l_drc: f(3)?,
            l_cc: f(4)?,
            l_r: f(5)?,
            l_reg: f(6)?,
            l_acm: f(7)?,
            l_ce: f(8)?,
            l_seg: f(9)?,
            alpha1: f(10)?,
            alpha2: f(11)?,
            alpha3: f(12)?,
            ms: parts[13]
                .parse()
                .map_err(|e| Error::Config(format!("bad ms: {e}")))?,
        })
    }

    /// Every column except wall time, for bit-identity comparisons.
    pub fn deterministic_part(&self) -> String {
        let full = self.to_csv_row();
        full.rsplit_once(',').expect("csv row has commas").0.to_string()
    }
}

/// Discriminator health per step, written as a sidecar CSV so the adversarial
/// game can be audited without re-running.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscHealth {
    pub step: u64,
    pub d_ref_mean: f64,
    pub d_warp_mean: f64,
}

impl DiscHealth {
    pub const CSV_HEADER: &'static str = "step,d_ref_mean,d_warp_mean";

    pub fn to_csv_row(&self) -> String {
        format!("{},{},{}", self.step, self.d_ref_mean, self.d_warp_mean)
    }
}

/// The three networks, their optimizers, and the step counter.
#[derive(Clone)]
pub struct Trainer<T: Scalar> {
    pub cfg: TrainConfig,
    pub reg: NetworkHandle<T>,
    pub seg: NetworkHandle<T>,
    pub disc: NetworkHandle<T>,
    pub opt_reg: OptimizerState<T>,
    pub opt_seg: OptimizerState<T>,
    pub opt_disc: OptimizerState<T>,
    /// Completed steps.
    pub step: u64,
}

fn mean_of<T: Scalar>(g: &Grid<T>) -> f64 {
    g.data().iter().map(|v| v.to_f64()).sum::<f64>() / g.len() as f64
}

/// Aborts the step before any parameter is touched when a loss goes
/// non-finite, naming the offending component.
fn check_finite(components: &[(&str, f64)]) -> Result<()> {
    for (name, v) in components {
        if !v.is_finite() {
            return Err(Error::Train(format!("loss component {name} is not finite ({v})")));
        }
    }
    Ok(())
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let reg = build_reg_net(cfg.arch, mix_seed(cfg.seed, "init-reg", 0))?;
        let seg = build_seg_net(cfg.arch, mix_seed(cfg.seed, "init-seg", 0))?;
        let disc = build_disc_net(cfg.arch, mix_seed(cfg.seed, "init-disc", 0))?;
        let opt_reg = OptimizerState::with_kind(OptimizerKind::RmsProp, cfg.lr_reg)?;
        let opt_seg = OptimizerState::with_kind(OptimizerKind::Adam, cfg.lr_seg)?;
        let opt_disc = OptimizerState::with_kind(OptimizerKind::RmsProp, cfg.lr_disc)?;
        Ok(Trainer {
            cfg,
            reg,
            seg,
            disc,
            opt_reg,
            opt_seg,
            opt_disc,
            step: 0,
        })
    }

    /// Seeds of the three per-step perturbation draws.
    pub fn alpha_seeds(&self, step: u64) -> [u64; 3] {
        [
            mix_seed(self.cfg.seed, "alpha", step * 4 + 1),
            mix_seed(self.cfg.seed, "alpha", step * 4 + 2),
            mix_seed(self.cfg.seed, "alpha", step * 4 + 3),
        ]
    }

    fn cast_image(image: &Grid<f32>) -> Grid<T> {
        image.cast::<T>()
    }

    /// Discriminator update (sub-update 1). Returns `(L_D, d_ref mean,
    /// d_warp mean, alpha used)`.
    pub fn update_discriminator(
        &mut self,
        x_m: &Grid<f32>,
        x_f: &Grid<f32>,
        alpha: f64,
    ) -> Result<(f64, f64, f64)> {
        let mut tape: Tape<T> = Tape::new();
        let reg_b = self.reg.bind(&mut tape, false)?;
        let disc_b = self.disc.bind(&mut tape, true)?;

        let xm = tape.constant(Self::cast_image(x_m));
        let xf = tape.constant(Self::cast_image(x_f));
        let pair = tape.concat_channels(&[xm, xf])?;
        let field = self.reg.forward(&mut tape, &reg_b, pair)?;
        let scaled = tape.affine(field, alpha, 0.0);
        let warped = tape.warp_image(xm, scaled)?;

        let x_r = losses::fuse_reference(
            &Self::cast_image(x_m),
            &Self::cast_image(x_f),
            self.cfg.beta,
        )?;
        let xr = tape.constant(x_r);
        let ref_pair = tape.concat_channels(&[xr, xf])?;
        let warp_pair = tape.concat_channels(&[warped, xf])?;
        let d_ref = self.disc.forward(&mut tape, &disc_b, ref_pair)?;
        let d_warp = self.disc.forward(&mut tape, &disc_b, warp_pair)?;
        let loss = losses::disc_loss(&mut tape, d_ref, d_warp)?;
        let l_d = tape.scalar(loss)?;
        check_finite(&[("L_D", l_d)])?;
        let d_ref_mean = mean_of(tape.value(d_ref));
        let d_warp_mean = mean_of(tape.value(d_warp));

        let grads = tape.backward(loss)?;
        self.opt_disc.step(self.disc.params_mut(), grads.by_name())?;
        Ok((l_d, d_ref_mean, d_warp_mean))
    }

    /// Registration update (sub-update 2). Returns
    /// `(L_adv, L_drc, L_cc, L_R, L_reg)`.
    ///
    /// The adversarial and region-constraint terms see the perturbed warp;
    /// the similarity and smoothness terms act on the unperturbed field.
    /// Scaling the similarity target by the random factor would teach the
    /// network a systematically over-long field (the optimum of
    /// `E_a[cc(warp(a*phi))]` is ~1.5x the true displacement), which shows
    /// up directly as lost registration Dice at evaluation time.
    pub fn update_registration(
        &mut self,
        x_m: &Grid<f32>,
        x_f: &Grid<f32>,
        alpha: f64,
        use_drc: bool,
    ) -> Result<(f64, f64, f64, f64, f64)> {
        let mut tape: Tape<T> = Tape::new();
        let reg_b = self.reg.bind(&mut tape, true)?;
        let disc_b = self.disc.bind(&mut tape, false)?;
        let seg_b = if use_drc {
            Some(self.seg.bind(&mut tape, false)?)
        } else {
            None
        };

        let xm = tape.constant(Self::cast_image(x_m));
        let xf = tape.constant(Self::cast_image(x_f));
        let pair = tape.concat_channels(&[xm, xf])?;
        let field = self.reg.forward(&mut tape, &reg_b, pair)?;
        let scaled = tape.affine(field, alpha, 0.0);
        let warped = tape.warp_image(xm, scaled)?;

        let warp_pair = tape.concat_channels(&[warped, xf])?;
        let d_warp = self.disc.forward(&mut tape, &disc_b, warp_pair)?;
        let adv = losses::adv_loss(&mut tape, d_warp)?;

        let drc = match &seg_b {
            Some(seg_b) => {
                let seg_w = self.seg.forward(&mut tape, seg_b, warped)?;
                let seg_f = self.seg.forward(&mut tape, seg_b, xf)?;
                Some(losses::drc_loss(&mut tape, seg_w, seg_f)?)
            }
            None => None,
        };
        let warped_full = tape.warp_image(xm, field)?;
        let cc = losses::local_cc(&mut tape, warped_full, xf, self.cfg.cc_window)?;
        let smooth = losses::smoothness(&mut tape, field)?;
        let total = losses::reg_total(
            &mut tape,
            RegLossTerms {
                adv,
                drc,
                cc,
                smooth,
            },
            &self.cfg.weights,
        )?;

        let l_adv = tape.scalar(adv)?;
        let l_drc = match drc {
            Some(id) => tape.scalar(id)?,
            None => 0.0,
        };
        let l_cc = tape.scalar(cc)?;
        let l_r = tape.scalar(smooth)?;
        let l_reg = tape.scalar(total)?;
        check_finite(&[
            ("L_adv", l_adv),
            ("L_drc", l_drc),
            ("L_cc", l_cc),
            ("L_R", l_r),
            ("L_reg", l_reg),
        ])?;

        let grads = tape.backward(total)?;
        self.opt_reg.step(self.reg.params_mut(), grads.by_name())?;
        Ok((l_adv, l_drc, l_cc, l_r, l_reg))
    }

    /// Segmentation update (sub-update 3). Returns `(L_acm, L_ce, L_seg)`.
    pub fn update_segmentation(
        &mut self,
        x_m: &Grid<f32>,
        y_m: &Grid<f32>,
        x_f: &Grid<f32>,
        alpha: f64,
        use_acm: bool,
    ) -> Result<(f64, f64, f64)> {
        let mut tape: Tape<T> = Tape::new();
        let reg_b = self.reg.bind(&mut tape, false)?;
        let seg_b = self.seg.bind(&mut tape, true)?;
        let disc_b = if use_acm {
            Some(self.disc.bind(&mut tape, false)?)
        } else {
            None
        };

        let xm = tape.constant(Self::cast_image(x_m));
        let xf = tape.constant(Self::cast_image(x_f));
        let ym = tape.constant(Self::cast_image(y_m));
        let pair = tape.concat_channels(&[xm, xf])?;
        let field = self.reg.forward(&mut tape, &reg_b, pair)?;
        let scaled = tape.affine(field, alpha, 0.0);
        let warped = tape.warp_image(xm, scaled)?;
        let warped_label = warp_label_on_tape(&mut tape, ym, scaled)?;

        let seg_w = self.seg.forward(&mut tape, &seg_b, warped)?;
        let ce = losses::ce_loss(&mut tape, seg_w, warped_label)?;
        let acm = match &disc_b {
            Some(disc_b) => {
                let warp_pair = tape.concat_channels(&[warped, xf])?;
                let d_map = self.disc.forward(&mut tape, disc_b, warp_pair)?;
                let seg_f = self.seg.forward(&mut tape, &seg_b, xf)?;
                Some(losses::acm_loss(&mut tape, d_map, warped_label, seg_f)?)
            }
            None => None,
        };
        let total = losses::seg_total(&mut tape, SegLossTerms { acm, ce }, &self.cfg.weights)?;

        let l_ce = tape.scalar(ce)?;
        let l_acm = match acm {
            Some(id) => tape.scalar(id)?,
            None => 0.0,
        };
        let l_seg = tape.scalar(total)?;
        check_finite(&[("L_acm", l_acm), ("L_ce", l_ce), ("L_seg", l_seg)])?;

        let grads = tape.backward(total)?;
        self.opt_seg.step(self.seg.params_mut(), grads.by_name())?;
        Ok((l_acm, l_ce, l_seg))
    }

    /// One full training step with explicit perturbation factors
    /// `[disc, reg, seg]`; [`Trainer::train_step`] derives them from the
    /// step seed. Exposed for scripted reproduction and inspection.
    pub fn train_step_with_alphas(
        &mut self,
        moving: &Sample,
        fixed: &Sample,
        alphas: [f64; 3],
    ) -> Result<(StepLog, DiscHealth)> {
        let t0 = Instant::now();
        let step = self.step + 1;
        let seeds = self.alpha_seeds(self.step);
        let y_m = moving
            .label
            .as_ref()
            .ok_or_else(|| Error::Train(format!("moving sample (seed {}) must be labeled", moving.seed)))?;

        let warmup = self.step < self.cfg.warmup_steps();
        let (run_disc, run_reg, run_seg) = match self.cfg.mode {
            TrainMode::Joint => (true, true, true),
            TrainMode::RegOnly => (true, true, false),
            TrainMode::SegOnly => (warmup, warmup, !warmup),
        };

        let mut log = StepLog {
            step,
            l_d: 0.0,
            l_adv: 0.0,
            l_drc: 0.0,
            l_cc: 0.0,
            l_r: 0.0,
            l_reg: 0.0,
            l_acm: 0.0,
            l_ce: 0.0,
            l_seg: 0.0,
            alpha1: alphas[0],
            alpha2: alphas[1],
            alpha3: alphas[2],
            ms: 0,
        };
        let mut health = DiscHealth {
            step,
            d_ref_mean: f64::NAN,
            d_warp_mean: f64::NAN,
        };

        // On failure, report the step and its derived RNG seeds so the
        // exact draw can be replayed.
        let ctx = |e: Error| {
            Error::Train(format!("step {step} aborted (alpha seeds {seeds:?}): {e}"))
        };
        if run_disc {
            let (l_d, d_ref, d_warp) = self
                .update_discriminator(&moving.image, &fixed.image, alphas[0])
                .map_err(ctx)?;
            log.l_d = l_d;
            health.d_ref_mean = d_ref;
            health.d_warp_mean = d_warp;
        }
        if run_reg {
            let use_drc = self.cfg.use_drc && self.cfg.mode == TrainMode::Joint;
            let (l_adv, l_drc, l_cc, l_r, l_reg) = self
                .update_registration(&moving.image, &fixed.image, alphas[1], use_drc)
                .map_err(ctx)?;
            log.l_adv = l_adv;
            log.l_drc = l_drc;
            log.l_cc = l_cc;
            log.l_r = l_r;
            log.l_reg = l_reg;
        }
        if run_seg {
            let use_acm = self.cfg.use_acm && self.cfg.mode == TrainMode::Joint;
            let (l_acm, l_ce, l_seg) = self
                .update_segmentation(&moving.image, y_m, &fixed.image, alphas[2], use_acm)
                .map_err(ctx)?;
            log.l_acm = l_acm;
            log.l_ce = l_ce;
            log.l_seg = l_seg;
        }

        self.step = step;
        log.ms = t0.elapsed().as_millis() as u64;
        Ok((log, health))
    }

    /// One training step; perturbation factors are derived from the step
    /// seed. Slots that draw no factor log 1.0 (the unperturbed field).
    pub fn train_step(&mut self, moving: &Sample, fixed: &Sample) -> Result<(StepLog, DiscHealth)> {
        let seeds = self.alpha_seeds(self.step);
        let warmup = self.step < self.cfg.warmup_steps();
        let dss = self.cfg.use_dss;
        // The seg-only baseline always draws a fresh factor for its
        // augmentation warp; joint/reg modes draw only with the DSS block on.
        let seg_always_draws = self.cfg.mode == TrainMode::SegOnly && !warmup;
        let alphas = [
            if dss { warp::draw_alpha(seeds[0]) } else { 1.0 },
            if dss { warp::draw_alpha(seeds[1]) } else { 1.0 },
            if dss || seg_always_draws {
                warp::draw_alpha(seeds[2])
            } else {
                1.0
            },
        ];
        self.train_step_with_alphas(moving, fixed, alphas)
    }
}

/// Training pair list after applying any labeled-pool restriction.
pub fn train_pairs(cfg: &TrainConfig, corpus: &Corpus) -> Result<Vec<(usize, usize)>> {
    let limit = cfg.n_labeled_used.unwrap_or(corpus.labeled.len());
    if limit == 0 || limit > corpus.labeled.len() {
        return Err(Error::Config(format!(
            "n_labeled_used {limit} outside 1..={}",
            corpus.labeled.len()
        )));
    }
    let pairs: Vec<(usize, usize)> = corpus
        .manifest
        .train_pairs
        .iter()
        .copied()
        .filter(|&(l, _)| l < limit)
        .collect();
    if pairs.is_empty() {
        return Err(Error::Config("no training pairs".into()));
    }
    Ok(pairs)
}

/// Deterministic pair order for an epoch (seeded Fisher-Yates).
pub fn epoch_order(seed: u64, epoch: u64, len: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, "epoch", epoch));
    for i in (1..len).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Pair index for a global step.
pub fn pair_for_step(cfg: &TrainConfig, pairs_len: usize, step: u64) -> usize {
    let epoch = step / pairs_len as u64;
    let pos = (step % pairs_len as u64) as usize;
    epoch_order(cfg.seed, epoch, pairs_len)[pos]
}

/// Artifacts of a training run.
pub struct RunOutput<T: Scalar> {
    pub trainer: Trainer<T>,
    pub logs: Vec<StepLog>,
    pub health: Vec<DiscHealth>,
}

/// Runs (or resumes) training over the corpus pair list in seeded shuffled
/// order. When `out_dir` is given, writes `steplog.csv`, `disc_health.csv`,
/// cadenced checkpoints, and `final.ckpt`.
pub fn run_training(
    cfg: &TrainConfig,
    corpus: &Corpus,
    out_dir: Option<&Path>,
    resume_from: Option<Trainer<f32>>,
) -> Result<RunOutput<f32>> {
    cfg.validate()?;
    let mut trainer = match resume_from {
        Some(t) => t,
        None => Trainer::<f32>::new(cfg.clone())?,
    };
    let pairs = train_pairs(cfg, corpus)?;
    let total = cfg.total_steps();

    let mut logs = Vec::new();
    let mut health_rows = Vec::new();
    let mut log_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
            let path = dir.join("steplog.csv");
            let fresh = trainer.step == 0;
            let mut f = fs::OpenOptions::new()
                .create(true)
                .append(!fresh)
                .write(true)
                .truncate(fresh)
                .open(&path)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            if fresh {
                writeln!(f, "{}", StepLog::CSV_HEADER)
                    .map_err(|e| Error::io(path.display().to_string(), e))?;
            }
            let hpath = dir.join("disc_health.csv");
            let mut hf = fs::OpenOptions::new()
                .create(true)
                .append(!fresh)
                .write(true)
                .truncate(fresh)
                .open(&hpath)
                .map_err(|e| Error::io(hpath.display().to_string(), e))?;
            if fresh {
                writeln!(hf, "{}", DiscHealth::CSV_HEADER)
                    .map_err(|e| Error::io(hpath.display().to_string(), e))?;
            }
            Some((f, hf))
        }
        None => None,
    };

    while trainer.step < total {
        let pair_idx = pair_for_step(cfg, pairs.len(), trainer.step);
        let (l, u) = pairs[pair_idx];
        let (log, health) = trainer.train_step(&corpus.labeled[l], &corpus.unlabeled[u])?;
        if let Some((f, hf)) = log_file.as_mut() {
            writeln!(f, "{}", log.to_csv_row()).map_err(|e| Error::Train(format!("log write: {e}")))?;
            if health.d_ref_mean.is_finite() {
                writeln!(hf, "{}", health.to_csv_row())
                    .map_err(|e| Error::Train(format!("health write: {e}")))?;
            }
        }
        logs.push(log);
        if health.d_ref_mean.is_finite() {
            health_rows.push(health);
        }
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && trainer.step % cfg.checkpoint_every == 0 {
                save_checkpoint(&trainer, &dir.join(format!("step_{:06}.ckpt", trainer.step)))?;
            }
        }
    }
    if let Some(dir) = out_dir {
        save_checkpoint(&trainer, &dir.join("final.ckpt"))?;
    }
    Ok(RunOutput {
        trainer,
        logs,
        health: health_rows,
    })
}

// --- Checkpoint container ----------------------------------------------
//
// Layout: magic `RSC1`, u32 little-endian header length, JSON header, then
// one RSF1 blob per tensor in header order. The header records the step,
// the config hash, the seed-derivation scheme, and optimizer step counters.

const CKPT_MAGIC: [u8; 4] = *b"RSC1";

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    step: u64,
    config_hash: String,
    master_seed: u64,
    rng_scheme: String,
    opt_steps: BTreeMap<String, u64>,
    tensors: Vec<String>,
}

fn collect_tensors<'a>(trainer: &'a Trainer<f32>) -> Vec<(String, &'a Grid<f32>)> {
    let mut tensors: Vec<(String, &Grid<f32>)> = Vec::new();
    for (net_name, net) in [
        ("reg", &trainer.reg),
        ("seg", &trainer.seg),
        ("disc", &trainer.disc),
    ] {
        for (k, v) in net.params() {
            tensors.push((format!("params.{net_name}::{k}"), v));
        }
    }
    for (opt_name, opt) in [
        ("reg", &trainer.opt_reg),
        ("seg", &trainer.opt_seg),
        ("disc", &trainer.opt_disc),
    ] {
        for (k, v) in opt.export_tensors() {
            tensors.push((format!("opt.{opt_name}::{k}"), v));
        }
    }
    tensors
}

pub fn save_checkpoint(trainer: &Trainer<f32>, path: &Path) -> Result<()> {
    let tensors = collect_tensors(trainer);
    let header = CheckpointHeader {
        step: trainer.step,
        config_hash: format!("{:016x}", trainer.cfg.config_hash()),
        master_seed: trainer.cfg.seed,
        rng_scheme: "per-step-derived".to_string(),
        opt_steps: BTreeMap::from([
            ("reg".to_string(), trainer.opt_reg.step),
            ("seg".to_string(), trainer.opt_seg.step),
            ("disc".to_string(), trainer.opt_disc.step),
        ]),
        tensors: tensors.iter().map(|(k, _)| k.clone()).collect(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(&CKPT_MAGIC);
    buf.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_json);
    for (_, grid) in &tensors {
        rsf::encode_into(grid, &mut buf)?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Raw checkpoint contents.
pub struct CheckpointData {
    pub step: u64,
    pub config_hash: u64,
    pub master_seed: u64,
    pub opt_steps: BTreeMap<String, u64>,
    pub tensors: BTreeMap<String, Grid<f32>>,
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointData> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let p = || path.display().to_string();
    if bytes.len() < 8 || bytes[0..4] != CKPT_MAGIC {
        return Err(Error::format(p(), "bad checkpoint magic"));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + hlen {
        return Err(Error::format(p(), "truncated checkpoint header"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[8..8 + hlen])?;
    let mut offset = 8 + hlen;
    let mut tensors = BTreeMap::new();
    for name in &header.tensors {
        let grid = rsf::decode_from(&bytes, &mut offset)
            .map_err(|e| Error::format(p(), format!("tensor '{name}': {e}")))?;
        tensors.insert(name.clone(), grid);
    }
    if offset != bytes.len() {
        return Err(Error::format(p(), "trailing bytes after tensors"));
    }
    let config_hash = u64::from_str_radix(&header.config_hash, 16)
        .map_err(|_| Error::format(p(), "bad config hash"))?;
    Ok(CheckpointData {
        step: header.step,
        config_hash,
        master_seed: header.master_seed,
        opt_steps: header.opt_steps,
        tensors,
    })
}

impl Trainer<f32> {
    /// Rebuilds a trainer from a checkpoint. The config hash must match
    /// unless `allow_mismatch` is set.
    pub fn from_checkpoint(
        cfg: TrainConfig,
        data: CheckpointData,
        allow_mismatch: bool,
    ) -> Result<Self> {
        if data.config_hash != cfg.config_hash() && !allow_mismatch {
            return Err(Error::Config(format!(
                "checkpoint config hash {:016x} does not match current config {:016x}; \
                 refusing to resume without allow-mismatch",
                data.config_hash,
                cfg.config_hash()
            )));
        }
        let mut trainer = Trainer::<f32>::new(cfg)?;
        trainer.step = data.step;
        for (key, grid) in &data.tensors {
            if let Some(rest) = key.strip_prefix("params.") {
                let (net_name, param) = rest
                    .split_once("::")
                    .ok_or_else(|| Error::Config(format!("bad tensor key '{key}'")))?;
                let net = match net_name {
                    "reg" => &mut trainer.reg,
                    "seg" => &mut trainer.seg,
                    "disc" => &mut trainer.disc,
                    _ => return Err(Error::Config(format!("unknown net '{net_name}'"))),
                };
                net.set_param(param, grid.clone())?;
            } else if let Some(rest) = key.strip_prefix("opt.") {
                let (opt_name, tensor_key) = rest
                    .split_once("::")
                    .ok_or_else(|| Error::Config(format!("bad tensor key '{key}'")))?;
                let opt = match opt_name {
                    "reg" => &mut trainer.opt_reg,
                    "seg" => &mut trainer.opt_seg,
                    "disc" => &mut trainer.opt_disc,
                    _ => return Err(Error::Config(format!("unknown optimizer '{opt_name}'"))),
                };
                opt.import_tensor(tensor_key, grid.clone())?;
            } else {
                return Err(Error::Config(format!("unknown tensor key '{key}'")));
            }
        }
        trainer.opt_reg.step = *data.opt_steps.get("reg").unwrap_or(&0);
        trainer.opt_seg.step = *data.opt_steps.get("seg").unwrap_or(&0);
        trainer.opt_disc.step = *data.opt_steps.get("disc").unwrap_or(&0);
        Ok(trainer)
    }
}
