//! ClassMix masks and cross-domain sample mixing.
//!
//! A mixed sample pastes the pixels of half of the source image's part classes
//! onto a target image. With Fourier alignment the pasted source pixels are
//! first re-synthesised with the target's amplitude spectrum, so both regions
//! of the mixed image share the target's frequency content.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{fourier_align_band, AmplitudeBand};
use crate::tensor::{ImageTensor, LabelMap, IGNORE_LABEL};
use crate::BACKGROUND;

/// Binary H×W mask; `1` marks pixels taken from the source.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl MixMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::InvalidInput(format!(
                "mask needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidInput("mask values must be 0 or 1".into()));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            data: vec![value as u8; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn is_source(&self, index: usize) -> bool {
        self.data[index] == 1
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }
}

/// Teacher prediction on a target image: per-pixel class and max softmax probability.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub label: LabelMap,
    pub confidence: Vec<f64>,
}

impl PseudoLabel {
    pub fn new(label: LabelMap, confidence: Vec<f64>) -> Result<Self> {
        if confidence.len() != label.pixels() {
            return Err(Error::InvalidInput(format!(
                "confidence has {} values for {} pixels",
                confidence.len(),
                label.pixels()
            )));
        }
        if confidence
            .iter()
            .any(|c| !c.is_finite() || !(0.0..=1.0).contains(c))
        {
            return Err(Error::InvalidInput("confidence must lie in [0, 1]".into()));
        }
        Ok(Self { label, confidence })
    }

    /// Pseudo-label with the same confidence everywhere.
    pub fn uniform(label: LabelMap, confidence: f64) -> Result<Self> {
        let n = label.pixels();
        Self::new(label, vec![confidence; n])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedSample {
    pub image: ImageTensor,
    pub label: LabelMap,
    pub mask: MixMask,
    pub selected_classes: Vec<u8>,
}

/// How the source image is prepared before it is pasted.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum SourceAlignment {
    /// Paste the raw source pixels.
    None,
    /// Paste the source re-synthesised with the target amplitude spectrum.
    #[default]
    Fourier,
    /// Like `Fourier` but swapping only a low-frequency band.
    FourierBand(AmplitudeBand),
}

/// Mask covering exactly the pixels whose source label is in `selected`.
pub fn mask_for_classes(source_label: &LabelMap, selected: &[u8]) -> MixMask {
    let mut member = [false; 256];
    for &c in selected {
        member[c as usize] = true;
    }
    MixMask {
        height: source_label.height(),
        width: source_label.width(),
        data: source_label
            .data()
            .iter()
            .map(|&v| member[v as usize] as u8)
            .collect(),
    }
}

/// ClassMix mask: picks `⌈|C|/2⌉` of the part classes present in the source
/// label (background and ignore excluded) and masks their pixels.
///
/// Returns the mask and the sorted selected classes.
pub fn classmix_mask(source_label: &LabelMap, seed: u64) -> (MixMask, Vec<u8>) {
    let mut candidates: Vec<u8> = source_label
        .classes()
        .into_iter()
        .filter(|&c| c != BACKGROUND)
        .collect();
    let take = candidates.len().div_ceil(2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    candidates.shuffle(&mut rng);
    let mut selected = candidates[..take].to_vec();
    selected.sort_unstable();
    (mask_for_classes(source_label, &selected), selected)
}

/// `M ⊙ aligned_source + (1 − M) ⊙ target`.
pub fn mix_images(
    aligned_source: &ImageTensor,
    target: &ImageTensor,
    mask: &MixMask,
) -> Result<ImageTensor> {
    if !aligned_source.same_dims(target) {
        return Err(Error::InvalidPair(format!(
            "source is {}x{}x{}, target is {}x{}x{}",
            aligned_source.height(),
            aligned_source.width(),
            aligned_source.channels(),
            target.height(),
            target.width(),
            target.channels()
        )));
    }
    if mask.height != target.height() || mask.width != target.width() {
        return Err(Error::InvalidPair("mask dims differ from images".into()));
    }
    let n = target.pixels();
    let data = aligned_source
        .data()
        .iter()
        .zip(target.data())
        .enumerate()
        .map(|(i, (&s, &t))| if mask.data[i % n] == 1 { s } else { t })
        .collect();
    ImageTensor::new(target.height(), target.width(), target.channels(), data)
}

/// `M ⊙ y_s + (1 − M) ⊙ ŷ_t`; ignore labels are copied from whichever side is selected.
pub fn mix_labels(
    source_label: &LabelMap,
    target_pseudo: &PseudoLabel,
    mask: &MixMask,
) -> Result<LabelMap> {
    let pseudo = &target_pseudo.label;
    if !source_label.same_dims(pseudo)
        || mask.height != source_label.height()
        || mask.width != source_label.width()
    {
        return Err(Error::InvalidPair(format!(
            "label dims {}x{} / pseudo {}x{} / mask {}x{} disagree",
            source_label.height(),
            source_label.width(),
            pseudo.height(),
            pseudo.width(),
            mask.height,
            mask.width
        )));
    }
    let data = source_label
        .data()
        .iter()
        .zip(pseudo.data())
        .zip(&mask.data)
        .map(|((&s, &t), &m)| if m == 1 { s } else { t })
        .collect();
    LabelMap::new(source_label.height(), source_label.width(), data)
}

/// Fourier-aligned ClassMix sample.
pub fn make_mixed_sample(
    source: (&ImageTensor, &LabelMap),
    target: (&ImageTensor, &PseudoLabel),
    seed: u64,
) -> Result<MixedSample> {
    make_mixed_sample_with(source, target, seed, SourceAlignment::Fourier)
}

pub fn make_mixed_sample_with(
    source: (&ImageTensor, &LabelMap),
    target: (&ImageTensor, &PseudoLabel),
    seed: u64,
    alignment: SourceAlignment,
) -> Result<MixedSample> {
    let (src_img, src_lbl) = source;
    let (tgt_img, pseudo) = target;
    if src_img.height() != src_lbl.height() || src_img.width() != src_lbl.width() {
        return Err(Error::InvalidPair("source image and label dims differ".into()));
    }
    if !src_img.same_dims(tgt_img) || !src_lbl.same_dims(&pseudo.label) {
        return Err(Error::InvalidPair("source and target dims differ".into()));
    }
    let (mask, selected_classes) = classmix_mask(src_lbl, seed);
    // nothing is pasted, so skip the transforms
    let image = if mask.count() == 0 {
        tgt_img.clone()
    } else {
        let pasted = match alignment {
            SourceAlignment::None => src_img.clone(),
            SourceAlignment::Fourier => fourier_align_band(src_img, tgt_img, AmplitudeBand::Full)?,
            SourceAlignment::FourierBand(band) => fourier_align_band(src_img, tgt_img, band)?,
        };
        mix_images(&pasted, tgt_img, &mask)?
    };
    let label = mix_labels(src_lbl, pseudo, &mask)?;
    Ok(MixedSample {
        image,
        label,
        mask,
        selected_classes,
    })
}

/// Label map with every pixel set to [`IGNORE_LABEL`], for targets without pseudo-labels.
pub fn ignore_pseudo_label(height: usize, width: usize) -> Result<PseudoLabel> {
    PseudoLabel::uniform(LabelMap::filled(height, width, IGNORE_LABEL)?, 0.0)
}
