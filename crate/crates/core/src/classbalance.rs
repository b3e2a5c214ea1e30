//! Class statistics, rare class sampling and class-balanced pseudo-label weights.
//!
//! Minority parts receive few supporting gradients early in self-training even
//! when rare class sampling feeds them more often: their pseudo-labels tend to
//! be precise but incomplete. The CB weight map multiplies the pseudo-label
//! loss weight of chosen classes (head by default) by `beta`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixing::PseudoLabel;
use crate::tensor::{softmax_into, LabelMap, ScoreMap, IGNORE_LABEL};
use crate::{BACKGROUND, CLASS_NAMES, HEAD, NUM_CLASSES};

/// Default share of an image's pixels a class must exceed to count as present.
pub const DEFAULT_PRESENCE_THRESHOLD: f64 = 0.001;
pub const DEFAULT_RCS_TEMPERATURE: f64 = 0.01;
pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 0.968;
pub const DEFAULT_BETA: f64 = 2.0;

const MAX_SAMPLE_RETRIES: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub num_classes: usize,
    pub class_pixels: Vec<u64>,
    /// Per image, the classes whose pixel count exceeds `presence_threshold · pixels`.
    pub image_class_presence: Vec<Vec<u8>>,
    pub presence_threshold: f64,
}

/// Frequencies over part classes only (background excluded).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartFrequency {
    /// Indexed by class id; entry 0 (background) is always 0.
    pub values: Vec<f64>,
    /// False when the dataset holds no part pixels; `values` are then all zero.
    pub defined: bool,
}

impl ClassStats {
    /// Statistics of a single label map.
    pub fn from_label(label: &LabelMap, num_classes: usize, presence_threshold: f64) -> Result<Self> {
        label.validate_classes(num_classes)?;
        let mut class_pixels = vec![0u64; num_classes];
        for &v in label.data() {
            if v != IGNORE_LABEL {
                class_pixels[v as usize] += 1;
            }
        }
        let min_pixels = presence_threshold * label.pixels() as f64;
        let presence = (0..num_classes)
            .filter(|&c| class_pixels[c] as f64 > min_pixels)
            .map(|c| c as u8)
            .collect();
        Ok(Self {
            num_classes,
            class_pixels,
            image_class_presence: vec![presence],
            presence_threshold,
        })
    }

    /// Associative merge; image order is `self` then `other`.
    pub fn merge(mut self, other: ClassStats) -> Result<Self> {
        if self.num_classes != other.num_classes {
            return Err(Error::InvalidInput("cannot merge stats with different class counts".into()));
        }
        for (a, b) in self.class_pixels.iter_mut().zip(&other.class_pixels) {
            *a += b;
        }
        self.image_class_presence.extend(other.image_class_presence);
        Ok(self)
    }

    pub fn total_pixels(&self) -> u64 {
        self.class_pixels.iter().sum()
    }

    /// Fraction of non-ignore pixels per class, background included.
    pub fn class_frequency(&self) -> Vec<f64> {
        let total = self.total_pixels() as f64;
        self.class_pixels
            .iter()
            .map(|&c| if total > 0.0 { c as f64 / total } else { 0.0 })
            .collect()
    }

    pub fn part_frequency(&self) -> PartFrequency {
        let parts: u64 = self
            .class_pixels
            .iter()
            .enumerate()
            .filter(|&(c, _)| c != BACKGROUND as usize)
            .map(|(_, &n)| n)
            .sum();
        let values = self
            .class_pixels
            .iter()
            .enumerate()
            .map(|(c, &n)| {
                if c == BACKGROUND as usize || parts == 0 {
                    0.0
                } else {
                    n as f64 / parts as f64
                }
            })
            .collect();
        PartFrequency {
            values,
            defined: parts > 0,
        }
    }

    /// Two-row table of part-only frequencies in percent.
    pub fn render_table(&self) -> String {
        let freq = self.part_frequency();
        let name = |c: usize| {
            CLASS_NAMES
                .get(c)
                .map(|s| s.to_string())
                .unwrap_or_else(|| format!("c{c}"))
        };
        let mut header = format!("{:<16}", "class");
        let mut row = format!("{:<16}", "pixel frequency");
        for c in 1..self.num_classes {
            header.push_str(&format!("{:>8}", name(c)));
            row.push_str(&format!("{:>8}", format!("{:.1}%", 100.0 * freq.values[c])));
        }
        format!("{header}\n{row}\n")
    }
}

/// Pixel counts and frequencies over a dataset with the default 5-class catalog.
pub fn pixel_frequency(dataset: &[LabelMap]) -> Result<ClassStats> {
    pixel_frequency_with(dataset, NUM_CLASSES, DEFAULT_PRESENCE_THRESHOLD)
}

pub fn pixel_frequency_with(
    dataset: &[LabelMap],
    num_classes: usize,
    presence_threshold: f64,
) -> Result<ClassStats> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput("pixel statistics need at least one label map".into()));
    }
    if !(0.0..=1.0).contains(&presence_threshold) {
        return Err(Error::InvalidInput(format!(
            "presence threshold {presence_threshold} outside [0, 1]"
        )));
    }
    let mut stats = ClassStats {
        num_classes,
        class_pixels: vec![0; num_classes],
        image_class_presence: Vec::with_capacity(dataset.len()),
        presence_threshold,
    };
    for label in dataset {
        stats = stats.merge(ClassStats::from_label(label, num_classes, presence_threshold)?)?;
    }
    if stats.total_pixels() == 0 {
        return Err(Error::InvalidInput("dataset has no labeled pixels".into()));
    }
    Ok(stats)
}

/// Rare class sampling distribution `P(c) ∝ exp((1 − f_c) / T)` over part classes.
///
/// `f_c` is the part-only frequency. Background and classes without pixels get 0.
pub fn rcs_distribution(stats: &ClassStats, temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidInput(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let freq = stats.part_frequency();
    if !freq.defined {
        return Err(Error::InvalidInput("no part-class pixels to sample from".into()));
    }
    let eligible: Vec<usize> = (0..stats.num_classes)
        .filter(|&c| c != BACKGROUND as usize && stats.class_pixels[c] > 0)
        .collect();
    let logits: Vec<f64> = eligible
        .iter()
        .map(|&c| (1.0 - freq.values[c]) / temperature)
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut dist = vec![0.0; stats.num_classes];
    for (&c, w) in eligible.iter().zip(&weights) {
        dist[c] = w / total;
    }
    Ok(dist)
}

/// Draws source images biased towards rare classes.
#[derive(Debug, Clone)]
pub struct RareClassSampler {
    cumulative: Vec<f64>,
    images_by_class: Vec<Vec<usize>>,
}

impl RareClassSampler {
    pub fn new(stats: &ClassStats, dist: &[f64]) -> Result<Self> {
        if dist.len() != stats.num_classes {
            return Err(Error::InvalidInput(format!(
                "distribution has {} entries for {} classes",
                dist.len(),
                stats.num_classes
            )));
        }
        if dist.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidInput("distribution entries must be nonnegative".into()));
        }
        let total: f64 = dist.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidInput(format!("distribution sums to {total}")));
        }
        let mut images_by_class = vec![Vec::new(); stats.num_classes];
        for (i, present) in stats.image_class_presence.iter().enumerate() {
            for &c in present {
                images_by_class[c as usize].push(i);
            }
        }
        let mut acc = 0.0;
        let cumulative = dist
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        Ok(Self {
            cumulative,
            images_by_class,
        })
    }

    fn draw_class<R: Rng>(&self, rng: &mut R) -> usize {
        let total = *self.cumulative.last().unwrap_or(&0.0);
        let u = rng.random::<f64>() * total;
        self.cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.cumulative.len() - 1)
    }

    /// Draws a class, then a uniform image containing it; redraws if no image does.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Result<usize> {
        for _ in 0..MAX_SAMPLE_RETRIES {
            let class = self.draw_class(rng);
            let images = &self.images_by_class[class];
            if !images.is_empty() {
                return Ok(images[rng.random_range(0..images.len())]);
            }
        }
        Err(Error::InvalidInput(format!(
            "no image contains a sampled class after {MAX_SAMPLE_RETRIES} draws"
        )))
    }

    pub fn images_with(&self, class: u8) -> &[usize] {
        &self.images_by_class[class as usize]
    }
}

pub fn sample_source_index(stats: &ClassStats, dist: &[f64], seed: u64) -> Result<usize> {
    let sampler = RareClassSampler::new(stats, dist)?;
    sampler.sample(&mut ChaCha8Rng::seed_from_u64(seed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CBConfig {
    pub beta: f64,
    pub boosted_classes: Vec<u8>,
    pub confidence_threshold: f64,
    /// Use each pixel's confidence as base weight instead of the image quality `q`.
    #[serde(default)]
    pub per_pixel_confidence: bool,
}

impl Default for CBConfig {
    fn default() -> Self {
        Self {
            beta: DEFAULT_BETA,
            boosted_classes: vec![HEAD],
            confidence_threshold: DEFAULT_CONFIDENCE_THRESHOLD,
            per_pixel_confidence: false,
        }
    }
}

impl CBConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 1.0) || !self.beta.is_finite() {
            return Err(Error::InvalidConfig(format!("beta must be >= 1, got {}", self.beta)));
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(Error::InvalidConfig(format!(
                "confidence threshold must be in [0, 1], got {}",
                self.confidence_threshold
            )));
        }
        Ok(())
    }
}

/// Nonnegative per-pixel loss weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl WeightMap {
    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }
}

/// Fraction of non-ignore pixels with confidence `>= tau`; 0 when every pixel is ignored.
pub fn pseudo_label_quality(pseudo: &PseudoLabel, tau: f64) -> f64 {
    let mut valid = 0usize;
    let mut confident = 0usize;
    for (&l, &c) in pseudo.label.data().iter().zip(&pseudo.confidence) {
        if l == IGNORE_LABEL {
            continue;
        }
        valid += 1;
        if c >= tau {
            confident += 1;
        }
    }
    if valid == 0 {
        0.0
    } else {
        confident as f64 / valid as f64
    }
}

/// Pseudo-label weights: `q` everywhere, `q · beta` on boosted classes, 0 on ignore.
pub fn cb_weight_map(pseudo: &PseudoLabel, cfg: &CBConfig) -> Result<WeightMap> {
    cfg.validate()?;
    let q = pseudo_label_quality(pseudo, cfg.confidence_threshold);
    let mut boosted = [false; 256];
    for &c in &cfg.boosted_classes {
        boosted[c as usize] = true;
    }
    let data = pseudo
        .label
        .data()
        .iter()
        .zip(&pseudo.confidence)
        .map(|(&l, &conf)| {
            if l == IGNORE_LABEL {
                return 0.0;
            }
            let base = if cfg.per_pixel_confidence { conf } else { q };
            if boosted[l as usize] {
                base * cfg.beta
            } else {
                base
            }
        })
        .collect();
    Ok(WeightMap {
        height: pseudo.label.height(),
        width: pseudo.label.width(),
        data,
    })
}

/// Loss value and gradient with respect to the scores (same layout as [`ScoreMap`]).
#[derive(Debug, Clone, PartialEq)]
pub struct LossAndGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Weighted softmax cross-entropy averaged over non-ignore pixels.
pub fn weighted_ce_loss(scores: &ScoreMap, label: &LabelMap, weights: &WeightMap) -> Result<LossAndGrad> {
    if scores.height != label.height()
        || scores.width != label.width()
        || weights.height != label.height()
        || weights.width != label.width()
        || weights.data.len() != label.pixels()
    {
        return Err(Error::InvalidPair("scores, label and weights must share dims".into()));
    }
    if scores.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite class score".into()));
    }
    label.validate_classes(scores.classes)?;
    let k = scores.classes;
    let mut grad = vec![0.0; scores.data.len()];
    let valid = label.data().iter().filter(|&&l| l != IGNORE_LABEL).count();
    if valid == 0 {
        return Ok(LossAndGrad { loss: 0.0, grad });
    }
    let norm = 1.0 / valid as f64;
    let mut probs = vec![0.0; k];
    let mut loss = 0.0;
    for (i, &l) in label.data().iter().enumerate() {
        if l == IGNORE_LABEL {
            continue;
        }
        let w = weights.data[i];
        let s = scores.pixel(i);
        softmax_into(s, &mut probs);
        // log-sum-exp form keeps the loss finite for large margins
        let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + s.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += w * (lse - s[l as usize]);
        let g = &mut grad[i * k..(i + 1) * k];
        for (j, gj) in g.iter_mut().enumerate() {
            let target = if j == l as usize { 1.0 } else { 0.0 };
            *gj = w * norm * (probs[j] - target);
        }
    }
    Ok(LossAndGrad {
        loss: loss * norm,
        grad,
    })
}
