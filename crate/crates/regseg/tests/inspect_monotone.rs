//! A briefly trained registration checkpoint, applied to a constructed
//! translation-dominant pair, must move the warped image monotonically
//! toward the fixed image as the perturbation factor grows — the property
//! the inspection panels visualise.

use regseg::grid::Grid;
use regseg::synthdata::{make_dataset, load_corpus, DatasetConfig};
use regseg::trainer::{run_training, TrainConfig, TrainMode};
use regseg::warp::{warp_image, DisplacementField};

#[test]
fn trained_checkpoint_panels_approach_the_fixed_image() {
    let dir = tempfile::tempdir().unwrap();
    let data_cfg = DatasetConfig {
        n_labeled: 2,
        n_unlabeled: 8,
        n_test: 2,
        ..DatasetConfig::default()
    };
    make_dataset(&data_cfg, &dir.path().join("data"), false).unwrap();
    let corpus = load_corpus(&dir.path().join("data/manifest.json")).unwrap();

    let cfg = TrainConfig {
        seed: 31,
        steps: 500,
        mode: TrainMode::RegOnly,
        use_dss: false,
        use_acm: false,
        use_drc: false,
        ..TrainConfig::default()
    };
    let run = run_training(&cfg, &corpus, None, None).unwrap();

    // Translation-dominant pair: the fixed image is the moving image
    // shifted by (2, 1) pixels.
    let moving = &corpus.labeled[0].image;
    let shift = DisplacementField::<f32>::translation(64, 64, 2.0, 1.0);
    let fixed = warp_image(moving, &shift).unwrap();

    let mut pair = Vec::with_capacity(2 * 64 * 64);
    pair.extend_from_slice(moving.data());
    pair.extend_from_slice(fixed.data());
    let field = DisplacementField::new(
        run.trainer
            .reg
            .forward_plain(&Grid::new(vec![2, 64, 64], pair).unwrap())
            .unwrap(),
    )
    .unwrap();

    let mad = |alpha: f64| -> f64 {
        let w = warp_image(moving, &field.scaled(alpha)).unwrap();
        w.data()
            .iter()
            .zip(fixed.data())
            .map(|(a, b)| (a - b).abs() as f64)
            .sum::<f64>()
            / w.len() as f64
    };

    let mads: Vec<f64> = (0..=4).map(|k| mad(k as f64 * 0.25)).collect();
    for win in mads.windows(2) {
        assert!(
            win[1] <= win[0] + 2e-3,
            "distance to fixed rose along the factor axis: {mads:?}"
        );
    }
    assert!(
        mads[4] < mads[0] * 0.9,
        "full warp should clearly improve on identity: {mads:?}"
    );
}
