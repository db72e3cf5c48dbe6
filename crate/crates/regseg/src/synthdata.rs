//! Seeded generator of synthetic 2-D cardiac-like scenes.
//!
//! A [`SceneTemplate`] holds K structure ellipses (the segmentation targets)
//! over a cluttered background of arcs and blobs that deform and re-tint per
//! sample but carry no labels. Every sample is a pure function of
//! `(template, generation params, seed)`: rasterize, deform with a smooth
//! random field, jitter structure intensities, add pixel noise. Ground-truth
//! labels are deformed with the same field and re-binarized by argmax.

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::rsf;
use crate::util::{fnv1a64, mix_seed, randn};
use crate::warp::{warp_image, warp_label_hard, DisplacementField};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const GENERATOR_VERSION: &str = "rsgen-1";

/// One labelled structure: a rotated ellipse with a nominal intensity band.
/// The raster uses the band midpoint; per-sample jitter stays inside the band
/// when its half-width matches the jitter amplitude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    /// (row, col) center in pixels.
    pub center: (f64, f64),
    /// (semi-axis along rotated y, semi-axis along rotated x).
    pub axes: (f64, f64),
    pub rotation: f64,
    /// (low, high) intensity band.
    pub intensity: (f64, f64),
}

impl Ellipse {
    fn contains(&self, row: f64, col: f64) -> bool {
        let dy = row - self.center.0;
        let dx = col - self.center.1;
        let (s, c) = self.rotation.sin_cos();
        let u = dy * c + dx * s;
        let v = -dy * s + dx * c;
        (u / self.axes.0).powi(2) + (v / self.axes.1).powi(2) <= 1.0
    }

    fn mid_intensity(&self) -> f64 {
        0.5 * (self.intensity.0 + self.intensity.1)
    }
}

/// Unlabelled background clutter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Distractor {
    /// Partial ring, rib-cage-like.
    Arc {
        center: (f64, f64),
        radius: f64,
        thickness: f64,
        start_angle: f64,
        end_angle: f64,
        intensity: (f64, f64),
    },
    /// Small ellipse blob.
    Blob {
        center: (f64, f64),
        axes: (f64, f64),
        rotation: f64,
        intensity: (f64, f64),
    },
}

impl Distractor {
    fn band(&self) -> (f64, f64) {
        match self {
            Distractor::Arc { intensity, .. } => *intensity,
            Distractor::Blob { intensity, .. } => *intensity,
        }
    }

    fn contains(&self, row: f64, col: f64) -> bool {
        match self {
            Distractor::Arc {
                center,
                radius,
                thickness,
                start_angle,
                end_angle,
                ..
            } => {
                let dy = row - center.0;
                let dx = col - center.1;
                let r = (dy * dy + dx * dx).sqrt();
                if (r - radius).abs() > *thickness {
                    return false;
                }
                let mut a = dy.atan2(dx);
                if a < *start_angle {
                    a += std::f64::consts::TAU;
                }
                a >= *start_angle && a <= *end_angle
            }
            Distractor::Blob {
                center,
                axes,
                rotation,
                ..
            } => {
                let dy = row - center.0;
                let dx = col - center.1;
                let (s, c) = rotation.sin_cos();
                let u = dy * c + dx * s;
                let v = -dy * s + dx * c;
                (u / axes.0).powi(2) + (v / axes.1).powi(2) <= 1.0
            }
        }
    }
}

/// The scene layout: K structures plus J distractors on an H x W canvas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneTemplate {
    pub canvas: (usize, usize),
    pub background: f64,
    pub structures: Vec<Ellipse>,
    pub distractors: Vec<Distractor>,
}

impl SceneTemplate {
    /// Default scene scaled to `h x w`: three nested/adjacent structures
    /// over arcs and blobs mimicking a cluttered thorax slice.
    pub fn default_scene(h: usize, w: usize) -> Self {
        let sy = h as f64 / 64.0;
        let sx = w as f64 / 64.0;
        let s = sy.min(sx);
        // Intensity bands are wide and overlap across structures and
        // clutter: a per-sample draw makes raw intensity an ambiguous cue,
        // so segmenting from few labels requires shape and context.
        let structures = vec![
            Ellipse {
                center: (33.0 * sy, 27.0 * sx),
                axes: (13.0 * s, 10.0 * s),
                rotation: 0.35,
                intensity: (0.35, 0.75),
            },
            Ellipse {
                center: (26.0 * sy, 42.0 * sx),
                axes: (8.0 * s, 6.0 * s),
                rotation: -0.5,
                intensity: (0.45, 0.85),
            },
            Ellipse {
                center: (37.0 * sy, 30.0 * sx),
                axes: (5.5 * s, 4.0 * s),
                rotation: 0.35,
                intensity: (0.55, 0.95),
            },
        ];
        let distractors = vec![
            Distractor::Arc {
                center: (32.0 * sy, 32.0 * sx),
                radius: 26.0 * s,
                thickness: 1.8 * s,
                start_angle: -2.7,
                end_angle: -0.5,
                intensity: (0.35, 0.85),
            },
            Distractor::Arc {
                center: (34.0 * sy, 30.0 * sx),
                radius: 24.0 * s,
                thickness: 1.5 * s,
                start_angle: 0.4,
                end_angle: 2.3,
                intensity: (0.40, 0.90),
            },
            Distractor::Arc {
                center: (30.0 * sy, 34.0 * sx),
                radius: 28.5 * s,
                thickness: 1.2 * s,
                start_angle: 2.6,
                end_angle: 4.1,
                intensity: (0.45, 0.95),
            },
            Distractor::Blob {
                center: (12.0 * sy, 13.0 * sx),
                axes: (4.0 * s, 3.0 * s),
                rotation: 0.8,
                intensity: (0.45, 0.95),
            },
            Distractor::Blob {
                center: (52.0 * sy, 16.0 * sx),
                axes: (3.5 * s, 2.5 * s),
                rotation: -0.4,
                intensity: (0.40, 0.90),
            },
            Distractor::Blob {
                center: (13.0 * sy, 50.0 * sx),
                axes: (3.0 * s, 4.0 * s),
                rotation: 0.2,
                intensity: (0.45, 0.95),
            },
        ];
        SceneTemplate {
            canvas: (h, w),
            background: 0.10,
            structures,
            distractors,
        }
    }

    pub fn num_structures(&self) -> usize {
        self.structures.len()
    }

    /// Channel count of labels: background + K structures.
    pub fn num_classes(&self) -> usize {
        self.structures.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.canvas;
        if h < 16 || w < 16 {
            return Err(Error::Config(format!("canvas {h}x{w} too small")));
        }
        if self.structures.is_empty() {
            return Err(Error::Config("template needs at least one structure".into()));
        }
        for (i, e) in self.structures.iter().enumerate() {
            let reach = e.axes.0.max(e.axes.1);
            let fits = e.center.0 - reach >= 4.0
                && e.center.0 + reach <= (h as f64) - 4.0
                && e.center.1 - reach >= 4.0
                && e.center.1 + reach <= (w as f64) - 4.0;
            if !fits {
                return Err(Error::Config(format!(
                    "structure {i} does not fit the canvas with a 4 px margin"
                )));
            }
            for (j, other) in self.structures.iter().enumerate().skip(i + 1) {
                if e == other {
                    return Err(Error::Config(format!("structures {i} and {j} are identical")));
                }
            }
        }
        Ok(())
    }

    /// Deterministic rasterization at band midpoints: `(image, label ids)`.
    /// Later structures paint over earlier ones; distractors never label.
    pub fn rasterize(&self) -> (Grid<f32>, Vec<u8>) {
        self.rasterize_with(|band| 0.5 * (band.0 + band.1))
    }

    /// `intensity_pick` chooses a value from each shape's band; the
    /// deterministic path uses band midpoints, sample generation draws
    /// per-sample values so appearance varies across the corpus.
    fn rasterize_with(
        &self,
        mut intensity_pick: impl FnMut(&(f64, f64)) -> f64,
    ) -> (Grid<f32>, Vec<u8>) {
        let (h, w) = self.canvas;
        let mut image = Grid::<f32>::full(&[1, h, w], self.background as f32);
        let mut ids = vec![0u8; h * w];
        for d in &self.distractors {
            let v = intensity_pick(&d.band()) as f32;
            for i in 0..h {
                for j in 0..w {
                    if d.contains(i as f64, j as f64) {
                        image.data_mut()[i * w + j] = v;
                    }
                }
            }
        }
        for (k, e) in self.structures.iter().enumerate() {
            let v = intensity_pick(&e.intensity) as f32;
            for i in 0..h {
                for j in 0..w {
                    if e.contains(i as f64, j as f64) {
                        image.data_mut()[i * w + j] = v;
                        ids[i * w + j] = (k + 1) as u8;
                    }
                }
            }
        }
        (image, ids)
    }
}

/// Per-sample randomisation amplitudes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenParams {
    /// RMS amplitude of the smooth deformation field, in pixels.
    pub deform_amp: f64,
    /// Gaussian smoothing sigma of the field, in pixels.
    pub deform_smooth: f64,
    /// Per-structure intensity jitter amplitude; also enables per-sample
    /// distractor re-tinting within each band.
    pub jitter: f64,
    /// Additive Gaussian pixel noise sigma.
    pub noise_sigma: f64,
    /// Retries when a deformation pushes a structure fully off canvas.
    pub max_retries: u32,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            deform_amp: 3.0,
            deform_smooth: 8.0,
            jitter: 0.1,
            noise_sigma: 0.02,
            max_retries: 8,
        }
    }
}

/// One generated sample. `label` is one-hot `[K+1,H,W]` with channel 0
/// background; withheld for the unlabeled training split.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Grid<f32>,
    pub label: Option<Grid<f32>>,
    pub seed: u64,
}

fn ids_to_one_hot(ids: &[u8], classes: usize, h: usize, w: usize) -> Grid<f32> {
    let mut g = Grid::<f32>::zeros(&[classes, h, w]);
    for (p, &id) in ids.iter().enumerate() {
        g.data_mut()[(id as usize) * h * w + p] = 1.0;
    }
    g
}

/// Smooth random field: white noise blurred by a truncated Gaussian and
/// rescaled so the peak per-pixel displacement magnitude equals `amp` pixels.
fn smooth_field(h: usize, w: usize, amp: f64, sigma: f64, rng: &mut ChaCha8Rng) -> Grid<f32> {
    if amp == 0.0 {
        return Grid::zeros(&[2, h, w]);
    }
    let mut noise = vec![0f64; 2 * h * w];
    for v in noise.iter_mut() {
        *v = randn(rng);
    }
    // Separable truncated Gaussian kernel.
    let radius = (3.0 * sigma).ceil() as usize;
    let mut kernel = Vec::with_capacity(2 * radius + 1);
    for i in 0..=2 * radius {
        let x = i as f64 - radius as f64;
        kernel.push((-0.5 * (x / sigma).powi(2)).exp());
    }
    let ksum: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= ksum;
    }

    let mut blurred = vec![0f64; 2 * h * w];
    let mut tmp = vec![0f64; h * w];
    for ch in 0..2 {
        let plane = &noise[ch * h * w..(ch + 1) * h * w];
        // Rows.
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let jj = j as isize + ki as isize - radius as isize;
                    if jj >= 0 && (jj as usize) < w {
                        acc += kv * plane[i * w + jj as usize];
                    }
                }
                tmp[i * w + j] = acc;
            }
        }
        // Columns.
        let out = &mut blurred[ch * h * w..(ch + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let ii = i as isize + ki as isize - radius as isize;
                    if ii >= 0 && (ii as usize) < h {
                        acc += kv * tmp[ii as usize * w + j];
                    }
                }
                out[i * w + j] = acc;
            }
        }
    }
    let hw = h * w;
    let mut peak = 0.0f64;
    for p in 0..hw {
        let m = blurred[p] * blurred[p] + blurred[hw + p] * blurred[hw + p];
        peak = peak.max(m);
    }
    let peak = peak.sqrt();
    let scale = if peak > 1e-12 { amp / peak } else { 0.0 };
    Grid::new(
        vec![2, h, w],
        blurred.iter().map(|&v| (v * scale) as f32).collect(),
    )
    .expect("field shape")
}

/// Generates one sample. Deterministic in `(template, params, seed)`; if the
/// deformation removes a structure entirely, the next derived seed is tried
/// up to `params.max_retries` times.
pub fn generate_sample(
    template: &SceneTemplate,
    params: &GenParams,
    seed: u64,
) -> Result<Sample> {
    template.validate()?;
    let (h, w) = template.canvas;
    let classes = template.num_classes();

    for attempt in 0..=params.max_retries {
        let attempt_seed = if attempt == 0 {
            seed
        } else {
            mix_seed(seed, "retry", attempt as u64)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(attempt_seed);

        // Per-sample appearance draw for every shape band (suppressed when
        // jitter is zero, so a degenerate config reproduces the template
        // rasterization exactly).
        let jitter_on = params.jitter > 0.0;
        let (image0, ids0) = template.rasterize_with(|band| {
            if jitter_on {
                rng.gen_range(band.0..band.1)
            } else {
                0.5 * (band.0 + band.1)
            }
        });
        let label0 = ids_to_one_hot(&ids0, classes, h, w);

        let field = DisplacementField::new(smooth_field(
            h,
            w,
            params.deform_amp,
            params.deform_smooth,
            &mut rng,
        ))?;
        let mut image = warp_image(&image0, &field)?;
        let label = warp_label_hard(&label0, &field)?;

        // Structure survival check.
        let hw = h * w;
        let survived = (1..classes).all(|c| {
            label.data()[c * hw..(c + 1) * hw]
                .iter()
                .any(|&v| v > 0.5)
        });
        if !survived {
            continue;
        }

        // Per-structure intensity jitter, applied through the deformed mask.
        if jitter_on {
            for c in 1..classes {
                let dv = rng.gen_range(-params.jitter..params.jitter) as f32;
                for p in 0..hw {
                    if label.data()[c * hw + p] > 0.5 {
                        image.data_mut()[p] += dv;
                    }
                }
            }
        }

        // Pixel noise, clipped to [0,1].
        if params.noise_sigma > 0.0 {
            for p in 0..hw {
                let n = (randn(&mut rng) * params.noise_sigma) as f32;
                image.data_mut()[p] += n;
            }
        }
        for v in image.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }

        return Ok(Sample {
            image,
            label: Some(label),
            seed,
        });
    }
    Err(Error::Train(format!(
        "sample seed {seed}: structure lost after {} deformation retries",
        params.max_retries
    )))
}

/// Corpus configuration for [`make_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub master_seed: u64,
    pub canvas: usize,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_test: usize,
    pub gen: GenParams,
    /// Template override; `None` uses the default scene for the canvas.
    pub template: Option<SceneTemplate>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            master_seed: 7,
            canvas: 64,
            n_labeled: 4,
            n_unlabeled: 20,
            n_test: 16,
            gen: GenParams::default(),
            template: None,
        }
    }
}

impl DatasetConfig {
    pub fn template(&self) -> SceneTemplate {
        self.template
            .clone()
            .unwrap_or_else(|| SceneTemplate::default_scene(self.canvas, self.canvas))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub role: String,
    pub index: usize,
    pub seed: u64,
    pub image: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

/// On-disk corpus description; regenerating from the listed seeds
/// reproduces the corpus byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub corpus_id: String,
    pub generator_version: String,
    pub canvas: (usize, usize),
    pub num_structures: usize,
    pub num_distractors: usize,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_test: usize,
    pub config: DatasetConfig,
    pub entries: Vec<ManifestEntry>,
    /// (labeled index, unlabeled index) cross product.
    pub train_pairs: Vec<(usize, usize)>,
    /// (test index, labeled index) pairs.
    pub test_pairs: Vec<(usize, usize)>,
}

pub fn sample_seed(master: u64, role: &str, index: usize) -> u64 {
    mix_seed(master, role, index as u64)
}

/// Generates the corpus, writes rasters and the manifest under `out_dir`.
/// Labels are withheld from unlabeled-train files. Fails on an existing
/// manifest unless `force` is set.
pub fn make_dataset(cfg: &DatasetConfig, out_dir: &Path, force: bool) -> Result<DatasetManifest> {
    if cfg.n_labeled < 1 || cfg.n_unlabeled < 1 || cfg.n_test < 1 {
        return Err(Error::Config("all split counts must be >= 1".into()));
    }
    let template = cfg.template();
    template.validate()?;
    let manifest_path = out_dir.join("manifest.json");
    if manifest_path.exists() && !force {
        return Err(Error::Config(format!(
            "manifest already exists at {}; pass force to overwrite",
            manifest_path.display()
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    let mut entries = Vec::new();
    let mut write_split = |role: &str, count: usize, with_labels: bool| -> Result<()> {
        for index in 0..count {
            let seed = sample_seed(cfg.master_seed, role, index);
            let sample = generate_sample(&template, &cfg.gen, seed)?;
            let image_name = format!("{role}_{index:03}.img.rsf");
            rsf::save_raster(&sample.image, &out_dir.join(&image_name))?;
            let label_name = if with_labels {
                let name = format!("{role}_{index:03}.lab.rsf");
                rsf::save_raster(sample.label.as_ref().expect("generated label"), &out_dir.join(&name))?;
                Some(name)
            } else {
                None
            };
            entries.push(ManifestEntry {
                role: role.to_string(),
                index,
                seed,
                image: image_name,
                label: label_name,
            });
        }
        Ok(())
    };
    write_split("labeled", cfg.n_labeled, true)?;
    write_split("unlabeled", cfg.n_unlabeled, false)?;
    write_split("test", cfg.n_test, true)?;

    let train_pairs: Vec<(usize, usize)> = (0..cfg.n_labeled)
        .flat_map(|l| (0..cfg.n_unlabeled).map(move |u| (l, u)))
        .collect();
    let test_pairs: Vec<(usize, usize)> = (0..cfg.n_test)
        .flat_map(|t| (0..cfg.n_labeled).map(move |l| (t, l)))
        .collect();

    let id_material = format!(
        "{GENERATOR_VERSION}/{}/{}x{}/{}-{}-{}",
        cfg.master_seed, cfg.canvas, cfg.canvas, cfg.n_labeled, cfg.n_unlabeled, cfg.n_test
    );
    let manifest = DatasetManifest {
        corpus_id: format!("{:016x}", fnv1a64(id_material.as_bytes())),
        generator_version: GENERATOR_VERSION.to_string(),
        canvas: template.canvas,
        num_structures: template.structures.len(),
        num_distractors: template.distractors.len(),
        n_labeled: cfg.n_labeled,
        n_unlabeled: cfg.n_unlabeled,
        n_test: cfg.n_test,
        config: cfg.clone(),
        entries,
        train_pairs,
        test_pairs,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&manifest_path, json).map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    Ok(manifest)
}

/// A corpus loaded back from disk.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub manifest: DatasetManifest,
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
    pub test: Vec<Sample>,
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_corpus(manifest_path: &Path) -> Result<Corpus> {
    let manifest = load_manifest(manifest_path)?;
    if manifest.generator_version != GENERATOR_VERSION {
        return Err(Error::Config(format!(
            "corpus was generated by '{}' but this build is '{GENERATOR_VERSION}'; regenerate it",
            manifest.generator_version
        )));
    }
    let dir = manifest_path
        .parent()
        .ok_or_else(|| Error::Config("manifest path has no parent directory".into()))?;
    let mut corpus = Corpus {
        manifest: manifest.clone(),
        labeled: Vec::new(),
        unlabeled: Vec::new(),
        test: Vec::new(),
    };
    for e in &manifest.entries {
        let image = rsf::load_raster(&dir.join(&e.image))?;
        let label = match &e.label {
            Some(name) => Some(rsf::load_raster(&dir.join(name))?),
            None => None,
        };
        let sample = Sample {
            image,
            label,
            seed: e.seed,
        };
        match e.role.as_str() {
            "labeled" => corpus.labeled.push(sample),
            "unlabeled" => corpus.unlabeled.push(sample),
            "test" => corpus.test.push(sample),
            other => {
                return Err(Error::Config(format!("unknown split role '{other}' in manifest")))
            }
        }
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_template() -> SceneTemplate {
        SceneTemplate::default_scene(64, 64)
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let t = default_template();
        let p = GenParams::default();
        let a = generate_sample(&t, &p, 42).unwrap();
        let b = generate_sample(&t, &p, 42).unwrap();
        assert!(a
            .image
            .data()
            .iter()
            .zip(b.image.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(a.label.unwrap().data(), b.label.unwrap().data());
        let c = generate_sample(&t, &p, 43).unwrap();
        assert_ne!(a.image.data(), c.image.data());
    }

    #[test]
    fn degenerate_params_reproduce_template_rasterization() {
        let t = default_template();
        let p = GenParams {
            deform_amp: 0.0,
            jitter: 0.0,
            noise_sigma: 0.0,
            ..GenParams::default()
        };
        let s = generate_sample(&t, &p, 5).unwrap();
        let (image0, ids0) = t.rasterize();
        assert_eq!(s.image.data(), image0.data());
        let label = s.label.unwrap();
        let hw = 64 * 64;
        for (p_idx, &id) in ids0.iter().enumerate() {
            assert_eq!(label.data()[(id as usize) * hw + p_idx], 1.0);
        }
    }

    #[test]
    fn labels_stay_consistent_with_the_deformed_image() {
        // With photometric noise off, a pixel labelled structure k whose
        // warped one-hot weight is saturated (interior, away from blended
        // boundaries) must carry exactly that structure's raster intensity:
        // image and label went through the same field.
        let t = default_template();
        let p = GenParams {
            jitter: 0.0,
            noise_sigma: 0.0,
            ..GenParams::default()
        };
        for seed in [3u64, 17, 91] {
            let s = generate_sample(&t, &p, seed).unwrap();
            let label = s.label.unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let field = DisplacementField::new(smooth_field(
                64,
                64,
                p.deform_amp,
                p.deform_smooth,
                &mut rng,
            ))
            .unwrap();
            let soft = crate::warp::warp_label(
                &{
                    let (_, ids0) = t.rasterize();
                    ids_to_one_hot(&ids0, 4, 64, 64)
                },
                &field,
            )
            .unwrap();
            let hw = 64 * 64;
            let mut checked = 0;
            for k in 1..4usize {
                let expect = (0.5 * (t.structures[k - 1].intensity.0
                    + t.structures[k - 1].intensity.1)) as f32;
                for pix in 0..hw {
                    if label.data()[k * hw + pix] > 0.5 && soft.data()[k * hw + pix] > 0.999999 {
                        let got = s.image.data()[pix];
                        assert!(
                            (got - expect).abs() < 1e-5,
                            "seed {seed} structure {k} pixel {pix}: {got} vs {expect}"
                        );
                        checked += 1;
                    }
                }
            }
            assert!(checked > 100, "too few interior pixels checked: {checked}");
        }
    }

    #[test]
    fn labels_are_one_hot_with_background_channel_zero() {
        let t = default_template();
        let s = generate_sample(&t, &GenParams::default(), 11).unwrap();
        let label = s.label.unwrap();
        assert_eq!(label.shape(), &[4, 64, 64]);
        let hw = 64 * 64;
        for p in 0..hw {
            let sum: f32 = (0..4).map(|c| label.data()[c * hw + p]).sum();
            assert_eq!(sum, 1.0);
        }
    }

    #[test]
    fn structure_pixel_counts_stay_within_band_over_100_seeds() {
        // Monte-Carlo band: deformed structure areas stay within +-40% of
        // the template rasterization counts.
        let t = default_template();
        let p = GenParams::default();
        let (_, ids0) = t.rasterize();
        let hw = 64 * 64;
        let base: Vec<f64> = (1..=3)
            .map(|k| ids0.iter().filter(|&&v| v as usize == k).count() as f64)
            .collect();
        for seed in 0..100 {
            let s = generate_sample(&t, &p, 10_000 + seed).unwrap();
            let label = s.label.unwrap();
            for k in 1..=3usize {
                let n = label.data()[k * hw..(k + 1) * hw]
                    .iter()
                    .filter(|&&v| v > 0.5)
                    .count() as f64;
                let ratio = n / base[k - 1];
                assert!(
                    (0.6..=1.4).contains(&ratio),
                    "seed {seed} structure {k}: ratio {ratio:.3}"
                );
            }
        }
    }

    #[test]
    fn dataset_writes_splits_pairs_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            canvas: 32,
            n_labeled: 2,
            n_unlabeled: 3,
            n_test: 2,
            ..DatasetConfig::default()
        };
        let manifest = make_dataset(&cfg, dir.path(), false).unwrap();
        assert_eq!(manifest.train_pairs.len(), 6);
        assert_eq!(manifest.test_pairs.len(), 4);

        // Default counts give the 4 x 20 = 80 pair protocol.
        let default_pairs = DatasetConfig::default();
        assert_eq!(default_pairs.n_labeled * default_pairs.n_unlabeled, 80);

        // Unlabeled images must not carry label files.
        for e in &manifest.entries {
            match e.role.as_str() {
                "unlabeled" => assert!(e.label.is_none()),
                _ => assert!(e.label.is_some()),
            }
        }

        // Round trip through the manifest.
        let corpus = load_corpus(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(corpus.labeled.len(), 2);
        assert_eq!(corpus.unlabeled.len(), 3);
        assert_eq!(corpus.test.len(), 2);
        assert!(corpus.unlabeled.iter().all(|s| s.label.is_none()));

        // Collision without force.
        assert!(make_dataset(&cfg, dir.path(), false).is_err());
        assert!(make_dataset(&cfg, dir.path(), true).is_ok());
    }

    #[test]
    fn regeneration_from_manifest_seeds_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            canvas: 32,
            n_labeled: 1,
            n_unlabeled: 2,
            n_test: 1,
            ..DatasetConfig::default()
        };
        let manifest = make_dataset(&cfg, dir.path(), false).unwrap();
        let template = cfg.template();
        for e in &manifest.entries {
            let regen = generate_sample(&template, &cfg.gen, e.seed).unwrap();
            let on_disk = rsf::load_raster(&dir.path().join(&e.image)).unwrap();
            assert!(regen
                .image
                .data()
                .iter()
                .zip(on_disk.data())
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn split_seeds_are_disjoint() {
        let cfg = DatasetConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (role, count) in [
            ("labeled", cfg.n_labeled),
            ("unlabeled", cfg.n_unlabeled),
            ("test", cfg.n_test),
        ] {
            for i in 0..count {
                assert!(seen.insert(sample_seed(cfg.master_seed, role, i)));
            }
        }
    }

    #[test]
    fn template_validation_catches_margin_and_duplicates() {
        let mut t = default_template();
        t.structures[0].center = (2.0, 30.0);
        assert!(t.validate().is_err());
        let mut t = default_template();
        t.structures[1] = t.structures[0].clone();
        assert!(t.validate().is_err());
    }
}
