//! Evaluation and harness behaviour: dice conventions, oracle predictors,
//! arm mapping, ablation/sweep wiring, and report round-trips.

use regseg::evalkit::{
    ablate, dice, emit_report, evaluate_reg, evaluate_seg, hard_argmax, label_sweep,
    read_ablation_csv, read_metrics_csv, read_sweep_csv, write_pgm, Arm, DiceStats,
    MetricsRecord,
};
use regseg::grid::Grid;
use regseg::nets::{build_seg_net, ArchConfig};
use regseg::synthdata::{
    generate_sample, DatasetConfig, GenParams, Sample, SceneTemplate,
};
use regseg::trainer::{TrainConfig, TrainMode};
use regseg::warp::DisplacementField;

fn mask(shape: &[usize], ones: &[usize]) -> Grid<f32> {
    let mut g = Grid::zeros(shape);
    for &i in ones {
        g.data_mut()[i] = 1.0;
    }
    g
}

#[test]
fn dice_formula_cases() {
    let g = mask(&[1, 2, 4], &[0, 1, 2, 3]);
    assert_eq!(dice(&g, &g).unwrap(), 100.0);

    let p = mask(&[1, 2, 4], &[4, 5]);
    assert_eq!(dice(&g, &p).unwrap(), 0.0);

    // |G| = 4, |P| = 2, overlap 2 -> 66.7.
    let p = mask(&[1, 2, 4], &[0, 1]);
    let v = dice(&g, &p).unwrap();
    assert!((v - 200.0 * 2.0 / 6.0).abs() < 1e-12);
    assert!((v - 66.7).abs() < 0.1);

    // Conventions at the undefined point.
    let empty = Grid::zeros(&[1, 2, 4]);
    assert_eq!(dice(&empty, &empty).unwrap(), 100.0);
    assert_eq!(dice(&g, &empty).unwrap(), 0.0);
    assert_eq!(dice(&empty, &g).unwrap(), 0.0);

    // Non-binary rejected.
    let soft = Grid::full(&[1, 2, 4], 0.5);
    assert!(dice(&g, &soft).is_err());
}

#[test]
fn dice_is_symmetric_on_random_masks() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let a = Grid::from_fn(&[1, 6, 6], |_| f32::from(rng.gen_bool(0.4)));
        let b = Grid::from_fn(&[1, 6, 6], |_| f32::from(rng.gen_bool(0.4)));
        assert_eq!(dice(&a, &b).unwrap(), dice(&b, &a).unwrap());
        if a.data().iter().any(|&v| v == 1.0) {
            assert_eq!(dice(&a, &a).unwrap(), 100.0);
        }
    }
}

fn toy_labeled_samples(n: usize) -> Vec<Sample> {
    let template = SceneTemplate::default_scene(64, 64);
    let params = GenParams::default();
    (0..n)
        .map(|i| generate_sample(&template, &params, 4000 + i as u64).unwrap())
        .collect()
}

#[test]
fn seg_oracle_and_all_background_predictors() {
    let test = toy_labeled_samples(3);
    // A predictor that returns the ground truth scores 100 everywhere.
    let labels: Vec<Grid<f32>> = test.iter().map(|s| s.label.clone().unwrap()).collect();
    let images: Vec<Vec<u32>> = test
        .iter()
        .map(|s| s.image.data().iter().map(|v| v.to_bits()).collect())
        .collect();
    let oracle = |img: &Grid<f32>| -> regseg::Result<Grid<f32>> {
        let key: Vec<u32> = img.data().iter().map(|v| v.to_bits()).collect();
        let idx = images.iter().position(|k| k == &key).expect("known image");
        Ok(labels[idx].clone())
    };
    let stats = evaluate_seg(oracle, &test).unwrap();
    assert_eq!(stats.mean, 100.0);
    assert_eq!(stats.std, 0.0);

    // All-background prediction scores 0 on every structure.
    let all_bg = |img: &Grid<f32>| -> regseg::Result<Grid<f32>> {
        let (h, w) = (img.shape()[1], img.shape()[2]);
        let mut g = Grid::zeros(&[4, h, w]);
        for p in 0..h * w {
            g.data_mut()[p] = 1.0;
        }
        Ok(g)
    };
    let stats = evaluate_seg(all_bg, &test).unwrap();
    assert_eq!(stats.mean, 0.0);
    assert!(stats.per_structure.iter().all(|&v| v == 0.0));
}

#[test]
fn untrained_seg_net_scores_low() {
    // Pilot regression band: a random-init segmenter stays under 30 mean
    // Dice on the default corpus, across 3 seeds.
    let test = toy_labeled_samples(4);
    for seed in 0..3 {
        let net = build_seg_net::<f32>(ArchConfig::default(), 900 + seed).unwrap();
        let stats = evaluate_seg(|img| net.forward_plain(img), &test).unwrap();
        assert!(stats.mean < 30.0, "seed {seed}: mean {}", stats.mean);
    }
}

#[test]
fn reg_identity_and_zero_field_equivalence() {
    let samples = toy_labeled_samples(2);
    // Identity pairs with the zero field score 100.
    let pairs: Vec<(&Sample, &Sample)> = vec![(&samples[0], &samples[0])];
    let zero_field = |m: &Grid<f32>, _f: &Grid<f32>| -> regseg::Result<Grid<f32>> {
        Ok(Grid::zeros(&[2, m.shape()[1], m.shape()[2]]))
    };
    let stats = evaluate_reg(zero_field, &pairs).unwrap();
    assert_eq!(stats.mean, 100.0);

    // Zero field on a real pair equals the raw label-vs-label Dice.
    let pairs: Vec<(&Sample, &Sample)> = vec![(&samples[0], &samples[1])];
    let stats = evaluate_reg(zero_field, &pairs).unwrap();
    let y_m = samples[0].label.as_ref().unwrap();
    let y_f = samples[1].label.as_ref().unwrap();
    let hw = 64 * 64;
    let mut direct = Vec::new();
    for c in 1..4 {
        let gm = Grid::new(vec![1, 64, 64], y_m.data()[c * hw..(c + 1) * hw].to_vec()).unwrap();
        let gf = Grid::new(vec![1, 64, 64], y_f.data()[c * hw..(c + 1) * hw].to_vec()).unwrap();
        direct.push(dice(&gf, &gm).unwrap());
    }
    for (a, b) in stats.per_structure.iter().zip(&direct) {
        assert_eq!(a, b);
    }
}

#[test]
fn forced_translation_field_beats_zero_field() {
    // Construct a pair with a known optimal shift: fixed = moving shifted.
    let samples = toy_labeled_samples(1);
    let moving = &samples[0];
    let shift = DisplacementField::<f32>::translation(64, 64, 3.0, 0.0);
    let fixed_img = regseg::warp::warp_image(&moving.image, &shift).unwrap();
    let fixed_lab =
        regseg::warp::warp_label_hard(moving.label.as_ref().unwrap(), &shift).unwrap();
    let fixed = Sample {
        image: fixed_img,
        label: Some(fixed_lab),
        seed: 0,
    };
    let pairs: Vec<(&Sample, &Sample)> = vec![(moving, &fixed)];

    let zero = evaluate_reg(
        |m, _| Ok(Grid::zeros(&[2, m.shape()[1], m.shape()[2]])),
        &pairs,
    )
    .unwrap();
    // The fixed image samples moving at p + 3 rows; warping the moving
    // label with the same field aligns them exactly.
    let forced = evaluate_reg(
        |m, _| Ok(DisplacementField::<f32>::translation(m.shape()[1], m.shape()[2], 3.0, 0.0).into_grid()),
        &pairs,
    )
    .unwrap();
    assert!(forced.mean >= zero.mean, "{} vs {}", forced.mean, zero.mean);
    assert!(forced.mean > 99.0, "forced shift should align: {}", forced.mean);
}

#[test]
fn hard_argmax_picks_first_on_ties_and_max_otherwise() {
    let probs = Grid::new(
        vec![3, 1, 2],
        vec![0.2, 0.5, 0.25, 0.5, 0.3, 0.25],
    )
    .unwrap();
    let hard = hard_argmax(&probs);
    // Pixel 0: channel 2 wins (0.3 > 0.25 > 0.2); pixel 1: tie between
    // channels 0 and 1 resolves to the lower channel.
    assert_eq!(hard.at3(2, 0, 0), 1.0);
    assert_eq!(hard.at3(0, 0, 1), 1.0);
}

#[test]
fn arm_toggle_mapping_matches_the_table() {
    let base = TrainConfig::default();
    let dss = Arm::JointDss.apply(&base, 3);
    assert_eq!(dss.mode, TrainMode::Joint);
    assert!(dss.use_dss && !dss.use_acm && !dss.use_drc);

    let full = Arm::Full.apply(&base, 3);
    assert!(full.use_dss && full.use_acm && full.use_drc);

    let direct = Arm::DirectJoint.apply(&base, 3);
    assert!(!direct.use_dss && !direct.use_acm && !direct.use_drc);
    assert_eq!(direct.mode, TrainMode::Joint);

    let r = Arm::RegOnly.apply(&base, 3);
    assert_eq!(r.mode, TrainMode::RegOnly);
    let s = Arm::SegOnly.apply(&base, 3);
    assert_eq!(s.mode, TrainMode::SegOnly);

    assert_eq!(Arm::parse("R+S+DSS").unwrap(), Arm::JointDss);
    assert_eq!(Arm::parse("full").unwrap(), Arm::Full);
    assert!(Arm::parse("bogus").is_err());
}

fn smoke_base_cfg() -> TrainConfig {
    TrainConfig {
        steps: 2,
        seg_warmup_steps: 1,
        arch: ArchConfig {
            levels: 2,
            base_channels: 8,
            ..Default::default()
        },
        ..TrainConfig::default()
    }
}

fn smoke_data_cfg() -> DatasetConfig {
    DatasetConfig {
        canvas: 32,
        n_labeled: 2,
        n_unlabeled: 2,
        n_test: 2,
        ..DatasetConfig::default()
    }
}

#[test]
fn single_arm_ablation_emits_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let records = ablate(
        &smoke_base_cfg(),
        &smoke_data_cfg(),
        &[Arm::DirectJoint],
        &[5],
        dir.path(),
        1,
    )
    .unwrap();
    assert_eq!(records.len(), 1);
    assert_eq!(records[0].arm, "R+S");
    assert_eq!(records[0].steps, 2);
    assert!(records[0].r_dice_mean.is_some());
    assert!(records[0].s_dice_mean.is_some());

    let back = read_ablation_csv(&dir.path().join("ablation.csv")).unwrap();
    assert_eq!(back, records);
}

#[test]
fn reg_only_arm_reports_no_seg_dice() {
    let dir = tempfile::tempdir().unwrap();
    let records = ablate(
        &smoke_base_cfg(),
        &smoke_data_cfg(),
        &[Arm::RegOnly],
        &[5],
        dir.path(),
        1,
    )
    .unwrap();
    assert!(records[0].r_dice_mean.is_some());
    assert!(records[0].s_dice_mean.is_none());
    let back = read_ablation_csv(&dir.path().join("ablation.csv")).unwrap();
    assert_eq!(back, records);
}

#[test]
fn sweep_bookkeeping_rows_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let records = label_sweep(
        &smoke_base_cfg(),
        &smoke_data_cfg(),
        &[1, 2],
        &[5],
        dir.path(),
        1,
    )
    .unwrap();
    // counts x {full, seg-only} x seeds.
    assert_eq!(records.len(), 4);
    let back = read_sweep_csv(&dir.path().join("sweep.csv")).unwrap();
    assert_eq!(back, records);

    // Degenerate sweep: one count, both arms still present.
    let dir2 = tempfile::tempdir().unwrap();
    let records = label_sweep(
        &smoke_base_cfg(),
        &smoke_data_cfg(),
        &[2],
        &[5],
        dir2.path(),
        1,
    )
    .unwrap();
    assert_eq!(records.len(), 2);

    // Count above the generated pool is rejected.
    assert!(label_sweep(
        &smoke_base_cfg(),
        &smoke_data_cfg(),
        &[3],
        &[5],
        dir2.path(),
        1
    )
    .is_err());
}

#[test]
fn report_round_trip_and_pgm_rounding() {
    let dir = tempfile::tempdir().unwrap();
    let records = vec![MetricsRecord {
        arm: "full".to_string(),
        seed: 3,
        step: 2000,
        stats: DiceStats {
            per_structure: vec![81.25, 77.5, 90.0],
            mean: 82.9166666666667,
            std: 5.2,
        },
    }];
    emit_report(&records, dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(text.lines().count(), 2);
    let back = read_metrics_csv(&dir.path().join("metrics.csv")).unwrap();
    assert_eq!(back, records);

    // Confidence map at exactly 0.5 renders as mid-gray 128
    // (round half away from zero, documented).
    let half = Grid::full(&[1, 4, 4], 0.5f32);
    let pgm = dir.path().join("half.pgm");
    write_pgm(&half, 0.0, 1.0, &pgm).unwrap();
    let bytes = std::fs::read(&pgm).unwrap();
    let header_end = bytes.windows(4).position(|w| w == b"255\n").unwrap() + 4;
    assert!(bytes[header_end..].iter().all(|&b| b == 128));
    assert_eq!(bytes[header_end..].len(), 16);
}

#[test]
fn arms_sharing_a_seed_share_network_initialisations() {
    let base = smoke_base_cfg();
    let full = regseg::trainer::Trainer::<f32>::new(Arm::Full.apply(&base, 42)).unwrap();
    let joint = regseg::trainer::Trainer::<f32>::new(Arm::DirectJoint.apply(&base, 42)).unwrap();
    for (a, b) in [
        (full.reg.params(), joint.reg.params()),
        (full.seg.params(), joint.seg.params()),
        (full.disc.params(), joint.disc.params()),
    ] {
        for (name, v) in a {
            let w = &b[name];
            assert!(v
                .data()
                .iter()
                .zip(w.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
    // A different seed changes the initialisation.
    let other = regseg::trainer::Trainer::<f32>::new(Arm::Full.apply(&base, 43)).unwrap();
    assert_ne!(
        full.reg.params()["reg.enc0.w"].data(),
        other.reg.params()["reg.enc0.w"].data()
    );
}
