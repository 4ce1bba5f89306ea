//! Deterministic synthetic scenes and Gaussian pixel classifiers.
//!
//! Scenes are overlapping filled ellipses ("cells") of random classes on a
//! background, colored by per-class Gaussian noise with occasional
//! single-channel impulse outliers. Base segmenters are per-pixel Gaussian
//! classifiers restricted to different subsets of the RGB channels, so their
//! errors differ. Together they produce real softmax probability maps for the
//! fusion engine at desk scale.
//!
//! All randomness comes from ChaCha8 streams keyed by the scene seed, so a
//! dataset is a pure function of its configuration.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::compare::{evaluate, Combo, ComparisonTable};
use crate::error::{Error, Result};
use crate::fusion::FusionRule;
use crate::io::{
    create_dir, save_manifest, write_mask, write_ppm, write_probmap, Manifest, ModelEntry, RgbImage,
};
use crate::probmap::{softmax, ClassSet, LabelMask, ProbMap, Shape};

/// Channel levels of the default class colors. Class `k` takes the low or
/// high level of channel `c` according to bit `c` of `k`, so any two classes
/// differ by at least one full level step in at least one channel.
const LEVELS: [[f64; 2]; 3] = [[205.0, 150.0], [180.0, 120.0], [200.0, 140.0]];

/// Classes the default color table covers.
pub const MAX_DEFAULT_CLASSES: usize = 8;

pub const DEFAULT_STDDEV: f64 = 14.0;

/// Per-channel probability that a pixel sample is replaced by uniform noise.
pub const DEFAULT_OUTLIER_RATE: f64 = 0.03;

/// Default RGB centers for `num_classes <= 8`.
pub fn default_class_means(num_classes: usize) -> Result<Vec<[f64; 3]>> {
    if num_classes > MAX_DEFAULT_CLASSES {
        return Err(Error::invalid(format!(
            "default colors cover at most {MAX_DEFAULT_CLASSES} classes, got {num_classes}"
        )));
    }
    Ok((0..num_classes)
        .map(|k| std::array::from_fn(|c| LEVELS[c][(k >> c) & 1]))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Inclusive range of ellipse counts.
    pub blob_count_range: (usize, usize),
    /// Inclusive range of ellipse semi-axes, as fractions of `min(height, width)`.
    pub blob_radius_range: (f64, f64),
    pub class_color_means: Vec<[f64; 3]>,
    pub class_color_stddev: [f64; 3],
    pub outlier_rate: f64,
}

impl SceneSpec {
    /// A spec with the default colors and blob sizes.
    pub fn with_defaults(
        seed: u64,
        height: usize,
        width: usize,
        num_classes: usize,
    ) -> Result<Self> {
        Ok(Self {
            seed,
            height,
            width,
            num_classes,
            blob_count_range: (4, 10),
            blob_radius_range: (0.10, 0.26),
            class_color_means: default_class_means(num_classes)?,
            class_color_stddev: [DEFAULT_STDDEV; 3],
            outlier_rate: DEFAULT_OUTLIER_RATE,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::invalid(format!(
                "scene has zero area ({}x{})",
                self.width, self.height
            )));
        }
        if !(2..=256).contains(&self.num_classes) {
            return Err(Error::invalid(format!(
                "class count must be in 2..=256, got {}",
                self.num_classes
            )));
        }
        if self.class_color_means.len() != self.num_classes {
            return Err(Error::invalid(format!(
                "{} color means for {} classes",
                self.class_color_means.len(),
                self.num_classes
            )));
        }
        let (lo, hi) = self.blob_count_range;
        if lo > hi {
            return Err(Error::invalid(format!(
                "empty blob count range [{lo}, {hi}]"
            )));
        }
        let (rlo, rhi) = self.blob_radius_range;
        if !(rlo > 0.0 && rlo <= rhi && rhi.is_finite()) {
            return Err(Error::invalid(format!(
                "bad blob radius range [{rlo}, {rhi}]"
            )));
        }
        if !self
            .class_color_stddev
            .iter()
            .all(|s| s.is_finite() && *s > 0.0)
        {
            return Err(Error::invalid("color stddev must be positive"));
        }
        if !(0.0..=1.0).contains(&self.outlier_rate) {
            return Err(Error::invalid("outlier rate must lie in [0, 1]"));
        }
        let means = &self.class_color_means;
        for a in 0..means.len() {
            for b in a + 1..means.len() {
                let separated = (0..3)
                    .any(|c| (means[a][c] - means[b][c]).abs() >= 3.0 * self.class_color_stddev[c]);
                if !separated {
                    return Err(Error::invalid(format!(
                        "classes {a} and {b} are not separated by 3 stddev in any channel"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Draws one scene: the RGB image and its ground-truth mask.
pub fn generate_scene(spec: &SceneSpec) -> Result<(RgbImage, LabelMask)> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut mask = LabelMask::filled(h, w, 0);

    let blobs = rng.random_range(spec.blob_count_range.0..=spec.blob_count_range.1);
    let scale = h.min(w) as f64;
    for _ in 0..blobs {
        let class = rng.random_range(1..spec.num_classes) as u8;
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let a = scale * rng.random_range(spec.blob_radius_range.0..=spec.blob_radius_range.1);
        let b = scale * rng.random_range(spec.blob_radius_range.0..=spec.blob_radius_range.1);
        let theta = rng.random_range(0.0..PI);
        paint_ellipse(&mut mask, (cy, cx), (a, b), theta, class);
    }

    let noise: Vec<Normal<f64>> = spec
        .class_color_stddev
        .iter()
        .map(|&s| Normal::new(0.0, s).expect("stddev validated"))
        .collect();
    let mut data = Vec::with_capacity(h * w * 3);
    for &label in mask.labels() {
        let mean = spec.class_color_means[usize::from(label)];
        for c in 0..3 {
            let v = if rng.random_bool(spec.outlier_rate) {
                rng.random_range(0.0..=255.0)
            } else {
                mean[c] + noise[c].sample(&mut rng)
            };
            data.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok((RgbImage::new(w, h, data)?, mask))
}

/// Fills a rotated ellipse; later calls overwrite earlier ones.
fn paint_ellipse(
    mask: &mut LabelMask,
    center: (f64, f64),
    axes: (f64, f64),
    theta: f64,
    class: u8,
) {
    let (cy, cx) = center;
    let (a, b) = axes;
    let reach = a.max(b);
    let (sin, cos) = theta.sin_cos();
    let row_lo = (cy - reach).floor().max(0.0) as usize;
    let row_hi = ((cy + reach).ceil() as usize).min(mask.height().saturating_sub(1));
    let col_lo = (cx - reach).floor().max(0.0) as usize;
    let col_hi = ((cx + reach).ceil() as usize).min(mask.width().saturating_sub(1));
    for row in row_lo..=row_hi {
        for col in col_lo..=col_hi {
            let dy = row as f64 + 0.5 - cy;
            let dx = col as f64 + 0.5 - cx;
            let u = (dx * cos + dy * sin) / a;
            let v = (-dx * sin + dy * cos) / b;
            if u * u + v * v <= 1.0 {
                mask.set(row, col, class);
            }
        }
    }
}

/// Subset of RGB channels a classifier looks at, as bits `R=1, G=2, B=4`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ChannelMask(u8);

impl ChannelMask {
    pub const R: ChannelMask = ChannelMask(0b001);
    pub const G: ChannelMask = ChannelMask(0b010);
    pub const B: ChannelMask = ChannelMask(0b100);
    pub const RG: ChannelMask = ChannelMask(0b011);
    pub const GB: ChannelMask = ChannelMask(0b110);
    pub const RB: ChannelMask = ChannelMask(0b101);
    pub const RGB: ChannelMask = ChannelMask(0b111);

    pub fn new(bits: u8) -> Result<Self> {
        if bits == 0 || bits > 0b111 {
            return Err(Error::invalid(format!(
                "channel mask {bits:#05b} selects no valid channels"
            )));
        }
        Ok(Self(bits))
    }

    pub fn channels(self) -> Vec<usize> {
        (0..3).filter(|c| self.0 & (1 << c) != 0).collect()
    }

    pub fn name(self) -> String {
        self.channels()
            .into_iter()
            .map(|c| ['r', 'g', 'b'][c])
            .collect()
    }
}

/// Per-class diagonal Gaussian over the selected channels.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelGaussianModel {
    pub features: ChannelMask,
    pub epsilon: f64,
    /// `means[k][f]` for class `k` and selected channel `f`.
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
    pub priors: Vec<f64>,
}

/// Fits per-class channel means and variances on a training split.
/// Variances are the empirical ones plus `epsilon`.
pub fn fit_pixel_model(
    training: &[(RgbImage, LabelMask)],
    num_classes: usize,
    features: ChannelMask,
    epsilon: f64,
) -> Result<PixelGaussianModel> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::invalid(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let channels = features.channels();
    let f = channels.len();
    let mut counts = vec![0u64; num_classes];
    let mut sums = vec![vec![0.0f64; f]; num_classes];
    for (image, mask) in training {
        check_pair(image, mask)?;
        mask.check_classes(num_classes, "training mask")?;
        for (rgb, &label) in image.pixels().zip(mask.labels()) {
            let k = usize::from(label);
            counts[k] += 1;
            for (s, &c) in sums[k].iter_mut().zip(&channels) {
                *s += f64::from(rgb[c]);
            }
        }
    }
    if let Some(k) = counts.iter().position(|&n| n == 0) {
        return Err(Error::invalid(format!("class {k} has no training pixels")));
    }
    let means: Vec<Vec<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &n)| s.iter().map(|v| v / n as f64).collect())
        .collect();

    let mut sq = vec![vec![0.0f64; f]; num_classes];
    for (image, mask) in training {
        for (rgb, &label) in image.pixels().zip(mask.labels()) {
            let k = usize::from(label);
            for ((s, &c), m) in sq[k].iter_mut().zip(&channels).zip(&means[k]) {
                let d = f64::from(rgb[c]) - m;
                *s += d * d;
            }
        }
    }
    let variances = sq
        .iter()
        .zip(&counts)
        .map(|(s, &n)| s.iter().map(|v| v / n as f64 + epsilon).collect())
        .collect();
    let total: u64 = counts.iter().sum();
    let priors = counts.iter().map(|&n| n as f64 / total as f64).collect();
    Ok(PixelGaussianModel {
        features,
        epsilon,
        means,
        variances,
        priors,
    })
}

fn check_pair(image: &RgbImage, mask: &LabelMask) -> Result<()> {
    if (image.height(), image.width()) != (mask.height(), mask.width()) {
        return Err(Error::invalid(format!(
            "image is {}x{} but mask is {}x{}",
            image.width(),
            image.height(),
            mask.width(),
            mask.height()
        )));
    }
    Ok(())
}

impl PixelGaussianModel {
    pub fn num_classes(&self) -> usize {
        self.priors.len()
    }

    /// `log prior + Σ log N(x_c; μ, σ²)` for every class.
    pub fn log_scores(&self, rgb: [u8; 3]) -> Vec<f64> {
        let channels = self.features.channels();
        (0..self.num_classes())
            .map(|k| {
                let mut score = self.priors[k].ln();
                for ((&c, &mean), &var) in
                    channels.iter().zip(&self.means[k]).zip(&self.variances[k])
                {
                    let d = f64::from(rgb[c]) - mean;
                    score -= 0.5 * ((2.0 * PI * var).ln() + d * d / var);
                }
                score
            })
            .collect()
    }
}

/// Softmax of the per-class log scores at every pixel.
pub fn predict_probmap(model: &PixelGaussianModel, image: &RgbImage) -> Result<ProbMap> {
    let c = model.num_classes();
    let mut data = Vec::with_capacity(image.width() * image.height() * c);
    for rgb in image.pixels() {
        let probs = softmax(&model.log_scores(rgb))?;
        data.extend(probs.into_iter().map(|p| p as f32));
    }
    ProbMap::new(Shape::new(image.height(), image.width(), c), data)
}

/// The full-feature model, used alone when a single variant is requested.
pub const FULL_VARIANT: (ChannelMask, f64) = (ChannelMask::RGB, 1.0);

/// Feature subsets and smoothing of the variants handed out when two or more
/// are requested. The first two see disjoint channels, and no later one
/// repeats a subset.
pub const VARIANT_CONFIGS: [(ChannelMask, f64); 7] = [
    (ChannelMask::RG, 4.0),
    (ChannelMask::B, 9.0),
    (ChannelMask::GB, 16.0),
    (ChannelMask::RB, 25.0),
    (ChannelMask::R, 36.0),
    (ChannelMask::G, 49.0),
    (ChannelMask::RGB, 64.0),
];

/// Configurations of `k` variants: the full model for `k = 1`, otherwise the
/// first `k` entries of [`VARIANT_CONFIGS`].
pub fn variant_configs(k: usize) -> Result<Vec<(ChannelMask, f64)>> {
    match k {
        0 => Err(Error::invalid("variant count must be at least 1")),
        1 => Ok(vec![FULL_VARIANT]),
        k if k <= VARIANT_CONFIGS.len() => Ok(VARIANT_CONFIGS[..k].to_vec()),
        k => Err(Error::invalid(format!(
            "variant count must be at most {}, got {k}",
            VARIANT_CONFIGS.len()
        ))),
    }
}

/// Fits the variants of [`variant_configs`], named by their channels.
pub fn make_model_variants(
    training: &[(RgbImage, LabelMask)],
    num_classes: usize,
    k: usize,
) -> Result<Vec<(String, PixelGaussianModel)>> {
    variant_configs(k)?
        .par_iter()
        .map(|&(features, eps)| {
            let model = fit_pixel_model(training, num_classes, features, eps)?;
            Ok((features.name(), model))
        })
        .collect()
}

/// Parameters of a full synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub images: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub variants: usize,
}

impl SynthConfig {
    /// Number of training images: four fifths of the set, at least one, and
    /// leaving at least one test image.
    pub fn train_count(&self) -> usize {
        (self.images * 4 / 5).clamp(1, self.images.saturating_sub(1).max(1))
    }

    /// Scene spec of image `index`, with a seed derived from the dataset seed.
    pub fn scene(&self, index: usize) -> Result<SceneSpec> {
        SceneSpec::with_defaults(
            mix_seed(self.seed, index as u64),
            self.height,
            self.width,
            self.num_classes,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.images < 2 {
            return Err(Error::invalid(format!(
                "need at least 2 images for a train/test split, got {}",
                self.images
            )));
        }
        variant_configs(self.variants)?;
        self.scene(0)?.validate()
    }
}

/// SplitMix64 finalizer over `seed + index`.
fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates scenes, fits the variants on the training split and writes a
/// complete dataset under `out`:
///
/// ```text
/// out/manifest.json
/// out/images/<id>.ppm        every scene
/// out/gt/<id>.pgm            every ground-truth mask
/// out/probs/<variant>/<id>.npy   test images only
/// ```
pub fn write_dataset(config: &SynthConfig, out: &Path) -> Result<Manifest> {
    config.validate()?;
    let ids: Vec<String> = (0..config.images).map(|i| format!("img_{i:04}")).collect();
    let scenes: Vec<(RgbImage, LabelMask)> = (0..config.images)
        .into_par_iter()
        .map(|i| generate_scene(&config.scene(i)?))
        .collect::<Result<_>>()?;
    let n_train = config.train_count();
    let (train, test) = scenes.split_at(n_train);
    let variants = make_model_variants(train, config.num_classes, config.variants)?;

    create_dir(out.join("images"))?;
    create_dir(out.join("gt"))?;
    for (id, (image, mask)) in ids.iter().zip(&scenes) {
        write_ppm(image, out.join("images").join(format!("{id}.ppm")))?;
        write_mask(mask, out.join("gt").join(format!("{id}.pgm")))?;
    }
    let mut models = Vec::with_capacity(variants.len());
    for (name, model) in &variants {
        let dir = format!("probs/{name}");
        create_dir(out.join(&dir))?;
        let maps: Vec<ProbMap> = test
            .par_iter()
            .map(|(image, _)| predict_probmap(model, image))
            .collect::<Result<_>>()?;
        for (id, map) in ids[n_train..].iter().zip(&maps) {
            write_probmap(map, out.join(&dir).join(format!("{id}.npy")))?;
        }
        models.push(ModelEntry {
            name: name.clone(),
            dir,
        });
    }

    let palette = config
        .scene(0)?
        .class_color_means
        .iter()
        .map(|m| m.map(|v| v as u8))
        .collect();
    let names = (0..config.num_classes)
        .map(|k| {
            if k == 0 {
                "background".to_string()
            } else {
                format!("class{k}")
            }
        })
        .collect();
    let classes = ClassSet::new(names, Some(palette))?;
    let mut manifest = Manifest::new(classes, models, "gt", ids[n_train..].to_vec());
    manifest.train_images = ids[..n_train].to_vec();
    save_manifest(&manifest, out.join("manifest.json"))?;
    manifest.set_root(out);
    Ok(manifest)
}

/// Writes a synthetic dataset and evaluates every `(rule, combo)` cell on it.
pub fn run_experiment(
    config: &SynthConfig,
    out: &Path,
    rules: &[FusionRule],
    combos: Option<&[Combo]>,
) -> Result<ComparisonTable> {
    let manifest = write_dataset(config, out)?;
    let names: Vec<String> = manifest.model_names().map(String::from).collect();
    let all;
    let combos = match combos {
        Some(c) => c,
        None => {
            all = crate::compare::all_combos(&names);
            &all
        }
    };
    evaluate(&manifest, rules, combos)
}
