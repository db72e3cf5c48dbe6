//! Dice evaluation, the ablation runner, the label-count sweep, and report
//! emission (CSV/JSON tables plus 8-bit PGM dumps).

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::synthdata::{load_corpus, make_dataset, Corpus, DatasetConfig, Sample};
use crate::trainer::{run_training, TrainConfig, TrainMode};
use crate::util::mix_seed;
use crate::warp::{warp_label_hard, DisplacementField};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

/// Dice coefficient in percent between two binary masks of equal shape.
/// Conventions at the formula's undefined point: both masks empty scores
/// 100 (vacuous agreement), exactly one empty scores 0.
pub fn dice(g: &Grid<f32>, p: &Grid<f32>) -> Result<f64> {
    if !g.same_shape(p) {
        return Err(Error::shape(
            "dice",
            format!("mask shapes differ: {:?} vs {:?}", g.shape(), p.shape()),
        ));
    }
    for (name, m) in [("G", g), ("P", p)] {
        if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::domain(
                "dice",
                format!("mask {name} is not binary"),
            ));
        }
    }
    let mut inter = 0u64;
    let mut size_g = 0u64;
    let mut size_p = 0u64;
    for (&a, &b) in g.data().iter().zip(p.data()) {
        size_g += (a == 1.0) as u64;
        size_p += (b == 1.0) as u64;
        inter += (a == 1.0 && b == 1.0) as u64;
    }
    if size_g + size_p == 0 {
        return Ok(100.0);
    }
    Ok(200.0 * inter as f64 / (size_g + size_p) as f64)
}

/// Per-pixel argmax of `[C,H,W]` probabilities to a hard one-hot grid.
pub fn hard_argmax(probs: &Grid<f32>) -> Grid<f32> {
    let (c_n, h, w) = (probs.shape()[0], probs.shape()[1], probs.shape()[2]);
    let hw = h * w;
    let mut out = Grid::zeros(probs.shape());
    for p in 0..hw {
        let mut best = 0usize;
        let mut best_v = probs.data()[p];
        for c in 1..c_n {
            let v = probs.data()[c * hw + p];
            if v > best_v {
                best_v = v;
                best = c;
            }
        }
        out.data_mut()[best * hw + p] = 1.0;
    }
    out
}

/// Per-structure channel mask (background channel 0 excluded by callers).
fn channel_mask(one_hot: &Grid<f32>, c: usize) -> Grid<f32> {
    let (h, w) = (one_hot.shape()[1], one_hot.shape()[2]);
    let hw = h * w;
    Grid::new(
        vec![1, h, w],
        one_hot.data()[c * hw..(c + 1) * hw].to_vec(),
    )
    .expect("channel mask")
}

/// Aggregate Dice over cases and structures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceStats {
    /// Mean Dice per structure across cases (background excluded).
    pub per_structure: Vec<f64>,
    /// Mean over every (case, structure) value.
    pub mean: f64,
    /// Population standard deviation over the same values.
    pub std: f64,
}

fn aggregate(values_per_structure: Vec<Vec<f64>>) -> DiceStats {
    let per_structure: Vec<f64> = values_per_structure
        .iter()
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
        .collect();
    let all: Vec<f64> = values_per_structure.into_iter().flatten().collect();
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let var = all.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / all.len() as f64;
    DiceStats {
        per_structure,
        mean,
        std: var.sqrt(),
    }
}

/// Segmentation Dice: argmax the prediction, compare each structure channel
/// against ground truth.
pub fn evaluate_seg<F>(predict: F, test: &[Sample]) -> Result<DiceStats>
where
    F: Fn(&Grid<f32>) -> Result<Grid<f32>>,
{
    if test.is_empty() {
        return Err(Error::Config("empty test set".into()));
    }
    let classes = test[0]
        .label
        .as_ref()
        .ok_or_else(|| Error::Config("test samples must be labeled".into()))?
        .shape()[0];
    let mut per_structure = vec![Vec::new(); classes - 1];
    for sample in test {
        let gt = sample
            .label
            .as_ref()
            .ok_or_else(|| Error::Config("test samples must be labeled".into()))?;
        let pred = hard_argmax(&predict(&sample.image)?);
        for c in 1..classes {
            per_structure[c - 1].push(dice(&channel_mask(gt, c), &channel_mask(&pred, c))?);
        }
    }
    Ok(aggregate(per_structure))
}

/// Registration Dice: predict the full (unperturbed) field for each pair,
/// warp the moving ground-truth label hard, compare to the fixed label.
pub fn evaluate_reg<F>(field_for: F, pairs: &[(&Sample, &Sample)]) -> Result<DiceStats>
where
    F: Fn(&Grid<f32>, &Grid<f32>) -> Result<Grid<f32>>,
{
    if pairs.is_empty() {
        return Err(Error::Config("empty pair set".into()));
    }
    let classes = pairs[0]
        .1
        .label
        .as_ref()
        .ok_or_else(|| Error::Config("fixed samples must be labeled".into()))?
        .shape()[0];
    let mut per_structure = vec![Vec::new(); classes - 1];
    for (moving, fixed) in pairs {
        let y_m = moving
            .label
            .as_ref()
            .ok_or_else(|| Error::Config("moving samples must be labeled".into()))?;
        let y_f = fixed
            .label
            .as_ref()
            .ok_or_else(|| Error::Config("fixed samples must be labeled".into()))?;
        let field = DisplacementField::new(field_for(&moving.image, &fixed.image)?)?;
        let warped = warp_label_hard(y_m, &field)?;
        for c in 1..classes {
            per_structure[c - 1].push(dice(&channel_mask(y_f, c), &channel_mask(&warped, c))?);
        }
    }
    Ok(aggregate(per_structure))
}

/// Dice metrics of one evaluated model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub arm: String,
    pub seed: u64,
    pub step: u64,
    pub stats: DiceStats,
}

// --- Ablation arms -------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arm {
    RegOnly,
    SegOnly,
    DirectJoint,
    JointDss,
    JointAcm,
    JointDrc,
    Full,
}

impl Arm {
    pub const ALL: [Arm; 7] = [
        Arm::RegOnly,
        Arm::SegOnly,
        Arm::DirectJoint,
        Arm::JointDss,
        Arm::JointAcm,
        Arm::JointDrc,
        Arm::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arm::RegOnly => "R",
            Arm::SegOnly => "S",
            Arm::DirectJoint => "R+S",
            Arm::JointDss => "R+S+DSS",
            Arm::JointAcm => "R+S+ACM",
            Arm::JointDrc => "R+S+DRC",
            Arm::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Arm> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown arm '{s}'; expected one of R, S, R+S, R+S+DSS, R+S+ACM, R+S+DRC, full"
                ))
            })
    }

    pub fn trains_reg(self) -> bool {
        !matches!(self, Arm::SegOnly)
    }

    pub fn trains_seg(self) -> bool {
        !matches!(self, Arm::RegOnly)
    }

    /// The arm's toggle set applied over a base config.
    pub fn apply(self, base: &TrainConfig, seed: u64) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.seed = seed;
        let (mode, dss, acm, drc) = match self {
            Arm::RegOnly => (TrainMode::RegOnly, false, false, false),
            Arm::SegOnly => (TrainMode::SegOnly, false, false, false),
            Arm::DirectJoint => (TrainMode::Joint, false, false, false),
            Arm::JointDss => (TrainMode::Joint, true, false, false),
            Arm::JointAcm => (TrainMode::Joint, false, true, false),
            Arm::JointDrc => (TrainMode::Joint, false, false, true),
            Arm::Full => (TrainMode::Joint, true, true, true),
        };
        cfg.mode = mode;
        cfg.use_dss = dss;
        cfg.use_acm = acm;
        cfg.use_drc = drc;
        cfg
    }
}

/// One row of the ablation table. Dice fields are absent for metrics the
/// arm does not produce, or when the arm's run failed (the failure marker).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRecord {
    pub arm: String,
    pub seed: u64,
    pub r_dice_mean: Option<f64>,
    pub r_dice_std: Option<f64>,
    pub s_dice_mean: Option<f64>,
    pub s_dice_std: Option<f64>,
    pub steps: u64,
    pub wall_s: f64,
}

impl AblationRecord {
    pub const CSV_HEADER: &'static str =
        "arm,seed,r_dice_mean,r_dice_std,s_dice_mean,s_dice_std,steps,wall_s";

    fn opt(v: Option<f64>) -> String {
        v.map(|x| x.to_string()).unwrap_or_default()
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.arm,
            self.seed,
            Self::opt(self.r_dice_mean),
            Self::opt(self.r_dice_std),
            Self::opt(self.s_dice_mean),
            Self::opt(self.s_dice_std),
            self.steps,
            self.wall_s
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<AblationRecord> {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 8 {
            return Err(Error::Config(format!(
                "ablation row has {} fields, expected 8",
                parts.len()
            )));
        }
        let opt = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|e| Error::Config(format!("bad float '{s}': {e}")))
            }
        };
        Ok(AblationRecord {
            arm: parts[0].to_string(),
            seed: parts[1].parse().map_err(|e| Error::Config(format!("bad seed: {e}")))?,
            r_dice_mean: opt(parts[2])?,
            r_dice_std: opt(parts[3])?,
            s_dice_mean: opt(parts[4])?,
            s_dice_std: opt(parts[5])?,
            steps: parts[6].parse().map_err(|e| Error::Config(format!("bad steps: {e}")))?,
            wall_s: parts[7].parse().map_err(|e| Error::Config(format!("bad wall_s: {e}")))?,
        })
    }
}

/// Evaluates a trained run on its corpus: registration Dice over the test
/// pairs and segmentation Dice over the test set.
pub fn evaluate_run(
    trainer: &crate::trainer::Trainer<f32>,
    corpus: &Corpus,
    want_reg: bool,
    want_seg: bool,
) -> Result<(Option<DiceStats>, Option<DiceStats>)> {
    let r = if want_reg {
        let pairs: Vec<(&Sample, &Sample)> = corpus
            .manifest
            .test_pairs
            .iter()
            .map(|&(t, l)| (&corpus.labeled[l], &corpus.test[t]))
            .collect();
        Some(evaluate_reg(
            |m, f| {
                let mut data = Vec::with_capacity(2 * m.len());
                data.extend_from_slice(m.data());
                data.extend_from_slice(f.data());
                let pair = Grid::new(vec![2, m.shape()[1], m.shape()[2]], data)?;
                trainer.reg.forward_plain(&pair)
            },
            &pairs,
        )?)
    } else {
        None
    };
    let s = if want_seg {
        Some(evaluate_seg(
            |img| trainer.seg.forward_plain(img),
            &corpus.test,
        )?)
    } else {
        None
    };
    Ok((r, s))
}

/// Serial-or-parallel job runner bounded by `threads`.
fn run_jobs<J, R>(jobs: Vec<J>, threads: usize, f: impl Fn(J) -> R + Sync) -> Vec<R>
where
    J: Send,
    R: Send,
{
    let threads = threads.max(1);
    let jobs = Mutex::new(jobs.into_iter().enumerate().collect::<Vec<_>>());
    let results: Mutex<Vec<(usize, R)>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let job = jobs.lock().expect("job queue").pop();
                match job {
                    Some((idx, j)) => {
                        let r = f(j);
                        results.lock().expect("results").push((idx, r));
                    }
                    None => break,
                }
            });
        }
    });
    let mut out = results.into_inner().expect("results");
    out.sort_by_key(|(i, _)| *i);
    out.into_iter().map(|(_, r)| r).collect()
}

/// Worker-thread cap: `REGSEG_THREADS` or the machine's parallelism.
pub fn default_threads() -> usize {
    std::env::var("REGSEG_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

/// Trains one arm on the per-seed corpus, evaluates both metrics.
fn run_arm(
    arm: Arm,
    seed: u64,
    base: &TrainConfig,
    corpus: &Corpus,
    out_dir: &Path,
) -> Result<AblationRecord> {
    let cfg = arm.apply(base, seed);
    let t0 = Instant::now();
    let run = run_training(&cfg, corpus, Some(out_dir), None)?;
    let (r, s) = evaluate_run(&run.trainer, corpus, arm.trains_reg(), arm.trains_seg())?;
    Ok(AblationRecord {
        arm: arm.name().to_string(),
        seed,
        r_dice_mean: r.as_ref().map(|x| x.mean),
        r_dice_std: r.as_ref().map(|x| x.std),
        s_dice_mean: s.as_ref().map(|x| x.mean),
        s_dice_std: s.as_ref().map(|x| x.std),
        steps: run.trainer.step,
        wall_s: t0.elapsed().as_secs_f64(),
    })
}

/// Generates (or reuses) the per-seed corpus under `out_dir/corpus_s{seed}`.
fn corpus_for_seed(data_cfg: &DatasetConfig, seed: u64, out_dir: &Path) -> Result<Corpus> {
    let mut cfg = data_cfg.clone();
    cfg.master_seed = mix_seed(seed, "corpus", 0);
    let dir = out_dir.join(format!("corpus_s{seed}"));
    let manifest = dir.join("manifest.json");
    if !manifest.exists() {
        make_dataset(&cfg, &dir, false)?;
    }
    load_corpus(&manifest)
}

/// Trains every `(arm, seed)` combination and emits `ablation.csv`.
/// Arms sharing a seed share the corpus and the network initialisation;
/// only the toggles differ. Failed runs keep their row with empty metric
/// fields as the failure marker.
pub fn ablate(
    base: &TrainConfig,
    data_cfg: &DatasetConfig,
    arms: &[Arm],
    seeds: &[u64],
    out_dir: &Path,
    threads: usize,
) -> Result<Vec<AblationRecord>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    // Corpora are built serially up front; training runs share them.
    let mut corpora = Vec::new();
    for &seed in seeds {
        corpora.push((seed, corpus_for_seed(data_cfg, seed, out_dir)?));
    }
    let jobs: Vec<(Arm, usize)> = arms
        .iter()
        .flat_map(|&arm| (0..seeds.len()).map(move |si| (arm, si)))
        .collect();
    let records = run_jobs(jobs, threads, |(arm, si)| {
        let (seed, corpus) = &corpora[si];
        let run_dir = out_dir.join(format!("{}_s{seed}", arm.name().replace('+', "_")));
        match run_arm(arm, *seed, base, corpus, &run_dir) {
            Ok(rec) => rec,
            Err(e) => {
                eprintln!("arm {} seed {seed} failed: {e}", arm.name());
                AblationRecord {
                    arm: arm.name().to_string(),
                    seed: *seed,
                    r_dice_mean: None,
                    r_dice_std: None,
                    s_dice_mean: None,
                    s_dice_std: None,
                    steps: 0,
                    wall_s: 0.0,
                }
            }
        }
    });
    write_ablation_csv(&records, &out_dir.join("ablation.csv"))?;
    Ok(records)
}

pub fn write_ablation_csv(records: &[AblationRecord], path: &Path) -> Result<()> {
    let mut text = String::from(AblationRecord::CSV_HEADER);
    for r in records {
        text.push('\n');
        text.push_str(&r.to_csv_row());
    }
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_ablation_csv(path: &Path) -> Result<Vec<AblationRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == AblationRecord::CSV_HEADER => {}
        other => {
            return Err(Error::Config(format!("bad ablation header: {other:?}")));
        }
    }
    lines.map(AblationRecord::parse_csv_row).collect()
}

// --- Label-count sweep ----------------------------------------------------

/// One point of the few-shot label sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub labels: usize,
    pub arm: String,
    pub seed: u64,
    pub s_dice_mean: f64,
    pub s_dice_std: f64,
}

impl SweepRecord {
    pub const CSV_HEADER: &'static str = "labels,arm,seed,s_dice_mean,s_dice_std";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.labels, self.arm, self.seed, self.s_dice_mean, self.s_dice_std
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<SweepRecord> {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 5 {
            return Err(Error::Config(format!(
                "sweep row has {} fields, expected 5",
                parts.len()
            )));
        }
        Ok(SweepRecord {
            labels: parts[0].parse().map_err(|e| Error::Config(format!("bad labels: {e}")))?,
            arm: parts[1].to_string(),
            seed: parts[2].parse().map_err(|e| Error::Config(format!("bad seed: {e}")))?,
            s_dice_mean: parts[3].parse().map_err(|e| Error::Config(format!("bad mean: {e}")))?,
            s_dice_std: parts[4].parse().map_err(|e| Error::Config(format!("bad std: {e}")))?,
        })
    }
}

/// Trains the full model and the seg-only baseline at each label count,
/// emitting `sweep.csv` curve data.
pub fn label_sweep(
    base: &TrainConfig,
    data_cfg: &DatasetConfig,
    counts: &[usize],
    seeds: &[u64],
    out_dir: &Path,
    threads: usize,
) -> Result<Vec<SweepRecord>> {
    for &c in counts {
        if c == 0 || c > data_cfg.n_labeled {
            return Err(Error::Config(format!(
                "label count {c} outside the generated pool 1..={}",
                data_cfg.n_labeled
            )));
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let mut corpora = Vec::new();
    for &seed in seeds {
        corpora.push((seed, corpus_for_seed(data_cfg, seed, out_dir)?));
    }
    let arms = [Arm::Full, Arm::SegOnly];
    let jobs: Vec<(usize, Arm, usize)> = counts
        .iter()
        .flat_map(|&count| {
            arms.into_iter()
                .flat_map(move |arm| (0..seeds.len()).map(move |si| (count, arm, si)))
        })
        .collect();
    let records = run_jobs(jobs, threads, |(count, arm, si)| {
        let (seed, corpus) = &corpora[si];
        let mut cfg = arm.apply(base, *seed);
        cfg.n_labeled_used = Some(count);
        let run_dir = out_dir.join(format!(
            "labels{count}_{}_s{seed}",
            arm.name().replace('+', "_")
        ));
        let result = (|| -> Result<SweepRecord> {
            let run = run_training(&cfg, corpus, Some(&run_dir), None)?;
            let (_, s) = evaluate_run(&run.trainer, corpus, false, true)?;
            let s = s.expect("seg stats requested");
            Ok(SweepRecord {
                labels: count,
                arm: arm.name().to_string(),
                seed: *seed,
                s_dice_mean: s.mean,
                s_dice_std: s.std,
            })
        })();
        match result {
            Ok(rec) => rec,
            Err(e) => {
                eprintln!("sweep count {count} arm {} seed {seed} failed: {e}", arm.name());
                SweepRecord {
                    labels: count,
                    arm: arm.name().to_string(),
                    seed: *seed,
                    s_dice_mean: f64::NAN,
                    s_dice_std: f64::NAN,
                }
            }
        }
    });
    let mut text = String::from(SweepRecord::CSV_HEADER);
    for r in &records {
        text.push('\n');
        text.push_str(&r.to_csv_row());
    }
    text.push('\n');
    let path = out_dir.join("sweep.csv");
    fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(records)
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == SweepRecord::CSV_HEADER => {}
        other => return Err(Error::Config(format!("bad sweep header: {other:?}"))),
    }
    lines.map(SweepRecord::parse_csv_row).collect()
}

// --- Report emission ------------------------------------------------------

/// Writes `metrics.csv` and `metrics.json` for a set of records.
/// Per-structure columns are `d1..dK`.
pub fn emit_report(records: &[MetricsRecord], out_dir: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Config("no records to report".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let k = records[0].stats.per_structure.len();
    let mut text = String::from("arm,seed,step,mean,std");
    for i in 1..=k {
        text.push_str(&format!(",d{i}"));
    }
    for r in records {
        text.push('\n');
        text.push_str(&format!(
            "{},{},{},{},{}",
            r.arm, r.seed, r.step, r.stats.mean, r.stats.std
        ));
        for v in &r.stats.per_structure {
            text.push_str(&format!(",{v}"));
        }
    }
    text.push('\n');
    let csv_path = out_dir.join("metrics.csv");
    fs::write(&csv_path, text).map_err(|e| Error::io(csv_path.display().to_string(), e))?;
    let json_path = out_dir.join("metrics.json");
    let json = serde_json::to_string_pretty(records)?;
    fs::write(&json_path, json).map_err(|e| Error::io(json_path.display().to_string(), e))?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Config("empty metrics csv".into()))?;
    if !header.starts_with("arm,seed,step,mean,std") {
        return Err(Error::Config(format!("bad metrics header: {header}")));
    }
    let mut out = Vec::new();
    for line in lines {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() < 5 {
            return Err(Error::Config(format!("short metrics row: {line}")));
        }
        let f = |s: &str| -> Result<f64> {
            s.parse().map_err(|e| Error::Config(format!("bad float '{s}': {e}")))
        };
        out.push(MetricsRecord {
            arm: parts[0].to_string(),
            seed: parts[1].parse().map_err(|e| Error::Config(format!("bad seed: {e}")))?,
            step: parts[2].parse().map_err(|e| Error::Config(format!("bad step: {e}")))?,
            stats: DiceStats {
                mean: f(parts[3])?,
                std: f(parts[4])?,
                per_structure: parts[5..].iter().map(|s| f(s)).collect::<Result<_>>()?,
            },
        });
    }
    Ok(out)
}

/// Writes a `[1,H,W]` grid as binary P5 PGM, mapping `[lo, hi]` to 0..255
/// with round-half-away-from-zero (0.5 in unit range lands on 128).
pub fn write_pgm(gray: &Grid<f32>, lo: f32, hi: f32, path: &Path) -> Result<()> {
    if gray.rank() != 3 || gray.shape()[0] != 1 {
        return Err(Error::shape(
            "write_pgm",
            format!("expected [1,H,W], got {:?}", gray.shape()),
        ));
    }
    if !(hi > lo) {
        return Err(Error::Config(format!("bad pgm range [{lo}, {hi}]")));
    }
    let (h, w) = (gray.shape()[1], gray.shape()[2]);
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    for &v in gray.data() {
        let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
        bytes.push((t * 255.0).round() as u8);
    }
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Min-max normalized PGM; constant inputs map to black.
pub fn write_pgm_minmax(gray: &Grid<f32>, path: &Path) -> Result<()> {
    let lo = gray.data().iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = gray.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    if hi > lo {
        write_pgm(gray, lo, hi, path)
    } else {
        write_pgm(&Grid::zeros(gray.shape()), 0.0, 1.0, path)
    }
}
