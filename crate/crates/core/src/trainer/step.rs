//! One optimisation step of the mean-teacher loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classbalance::{cb_weight_map, pseudo_label_quality, weighted_ce_loss, WeightMap};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::mixing::{make_mixed_sample_with, MixedSample, PseudoLabel, SourceAlignment};
use crate::spectral::AmplitudeBand;
use crate::tensor::{ImageTensor, LabelMap, ScoreMap};

use super::model::TinySegModel;
use super::teacher::{ema_update, teacher_pseudo_label, TeacherState};
use super::{OptimizerKind, TrainConfig};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerState {
    Sgd,
    AdamW { m: Vec<f64>, v: Vec<f64>, t: u64 },
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, params: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => OptimizerState::Sgd,
            OptimizerKind::AdamW => OptimizerState::AdamW {
                m: vec![0.0; params],
                v: vec![0.0; params],
                t: 0,
            },
        }
    }

    fn apply(&mut self, params: &mut [f64], grad: &[f64], lr: f64, weight_decay: f64) {
        match self {
            OptimizerState::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            OptimizerState::AdamW { m, v, t } => {
                *t += 1;
                let c1 = 1.0 - ADAM_BETA1.powi(*t as i32);
                let c2 = 1.0 - ADAM_BETA2.powi(*t as i32);
                for i in 0..params.len() {
                    m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * grad[i];
                    v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
                    let update = (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                    params[i] -= lr * (update + weight_decay * params[i]);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub student: TinySegModel,
    pub teacher: TeacherState,
    pub optimizer: OptimizerState,
    pub iteration: usize,
}

impl TrainState {
    /// Fresh student from the run seed; the teacher starts as its copy.
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let student = TinySegModel::new(cfg.model, derive_seed(cfg.seed, 0))?;
        let teacher = TeacherState::from_student(&student, cfg.ema_alpha);
        let optimizer = OptimizerState::new(cfg.optimizer, student.params.len());
        Ok(Self {
            student,
            teacher,
            optimizer,
            iteration: 0,
        })
    }
}

/// Loss scalars of one step, each averaged over the batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub source: f64,
    pub mixed: f64,
    pub total: f64,
    /// Mean fraction of confident pseudo-label pixels.
    pub pseudo_quality: f64,
}

/// Seed for the ClassMix class draw of batch item `i`.
pub fn mix_seed(step_seed: u64, i: usize) -> u64 {
    derive_seed(step_seed, 2 * i as u64)
}

fn jitter_seed(step_seed: u64, i: usize) -> u64 {
    derive_seed(step_seed, 2 * i as u64 + 1)
}

pub fn source_alignment(cfg: &TrainConfig) -> SourceAlignment {
    match (cfg.use_fdm, cfg.fdm_band) {
        (false, _) => SourceAlignment::None,
        (true, None) => SourceAlignment::Fourier,
        (true, Some(fraction)) => SourceAlignment::FourierBand(AmplitudeBand::LowFrequency { fraction }),
    }
}

/// Random per-image contrast and brightness change, clamped to `[0, 1]`.
pub fn color_jitter(image: &ImageTensor, strength: f64, seed: u64) -> Result<ImageTensor> {
    if strength == 0.0 {
        return Ok(image.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let contrast = 1.0 + rng.random_range(-strength..=strength);
    let brightness = rng.random_range(-strength..=strength);
    let data = image
        .data()
        .iter()
        .map(|&v| (v - 0.5) * contrast + 0.5 + brightness)
        .collect();
    ImageTensor::from_clamped(image.height(), image.width(), image.channels(), data)
}

/// Weights for the mixed loss: pasted source pixels count fully, target
/// pixels carry the pseudo-label weights.
pub fn mixed_weight_map(sample: &MixedSample, pseudo_weights: &WeightMap) -> WeightMap {
    let data = pseudo_weights
        .data
        .iter()
        .enumerate()
        .map(|(i, &w)| if sample.mask.is_source(i) { 1.0 } else { w })
        .collect();
    WeightMap {
        height: pseudo_weights.height,
        width: pseudo_weights.width,
        data,
    }
}

/// Mixed sample, its loss weights and the pseudo-label it was built from.
pub fn prepare_mixed(
    teacher: &TeacherState,
    source: (&ImageTensor, &LabelMap),
    target: &ImageTensor,
    cfg: &TrainConfig,
    step_seed: u64,
    index: usize,
) -> Result<(MixedSample, WeightMap, PseudoLabel)> {
    let pseudo = teacher_pseudo_label(teacher, target)?;
    let mut sample = make_mixed_sample_with(
        source,
        (target, &pseudo),
        mix_seed(step_seed, index),
        source_alignment(cfg),
    )?;
    sample.image = color_jitter(&sample.image, cfg.jitter, jitter_seed(step_seed, index))?;
    let weights = mixed_weight_map(&sample, &cb_weight_map(&pseudo, &cfg.effective_cb())?);
    Ok((sample, weights, pseudo))
}

fn check_scores(scores: &ScoreMap, state: &TrainState, step_seed: u64) -> Result<()> {
    if scores.data.iter().all(|v| v.is_finite()) {
        return Ok(());
    }
    Err(Error::Numerical(format!(
        "non-finite student scores at iteration {} (step seed {step_seed})",
        state.iteration + 1
    )))
}

/// Source CE plus weighted mixed CE, one optimizer update, one EMA update.
///
/// `source_batch[i]` is mixed into `target_batch[i]`.
pub fn train_step(
    state: &mut TrainState,
    source_batch: &[(&ImageTensor, &LabelMap)],
    target_batch: &[&ImageTensor],
    cfg: &TrainConfig,
    step_seed: u64,
) -> Result<StepLosses> {
    if source_batch.is_empty() || source_batch.len() != target_batch.len() {
        return Err(Error::InvalidInput(format!(
            "need equal non-empty batches, got {} source and {} target",
            source_batch.len(),
            target_batch.len()
        )));
    }
    let scale = 1.0 / source_batch.len() as f64;
    let mut grad = vec![0.0; state.student.params.len()];
    let mut losses = StepLosses::default();

    for (i, (&(src_img, src_lbl), &tgt_img)) in source_batch.iter().zip(target_batch).enumerate() {
        let cache = state.student.forward_cached(src_img);
        check_scores(&cache.scores, state, step_seed)?;
        let ones = WeightMap::filled(src_lbl.height(), src_lbl.width(), 1.0);
        let mut sup = weighted_ce_loss(&cache.scores, src_lbl, &ones)?;
        sup.grad.iter_mut().for_each(|g| *g *= scale);
        state.student.backward(&cache, &sup.grad, &mut grad);
        losses.source += sup.loss * scale;

        let (sample, weights, pseudo) = prepare_mixed(&state.teacher, (src_img, src_lbl), tgt_img, cfg, step_seed, i)?;
        let cache = state.student.forward_cached(&sample.image);
        check_scores(&cache.scores, state, step_seed)?;
        let mut mixed = weighted_ce_loss(&cache.scores, &sample.label, &weights)?;
        mixed.grad.iter_mut().for_each(|g| *g *= scale);
        state.student.backward(&cache, &mixed.grad, &mut grad);
        losses.mixed += mixed.loss * scale;
        losses.pseudo_quality += pseudo_label_quality(&pseudo, cfg.cb.confidence_threshold) * scale;
    }
    losses.total = losses.source + losses.mixed;
    if !losses.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite loss at iteration {} (step seed {step_seed}, source {}, mixed {})",
            state.iteration + 1,
            losses.source,
            losses.mixed
        )));
    }

    state
        .optimizer
        .apply(&mut state.student.params, &grad, cfg.learning_rate, cfg.weight_decay);
    if state.student.params.iter().any(|p| !p.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite parameters after iteration {} (step seed {step_seed})",
            state.iteration + 1
        )));
    }
    state.iteration += 1;
    // ramp the momentum up so the teacher is not stuck at its random init
    let alpha = cfg.ema_alpha.min(1.0 - 1.0 / (state.iteration as f64 + 1.0));
    ema_update(&mut state.teacher, &state.student, alpha)?;
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classbalance::CBConfig;
    use crate::toybench::{generate_scene, Domain, ToySceneSpec};

    fn scene(domain: Domain, seed: u64) -> (ImageTensor, LabelMap) {
        generate_scene(&ToySceneSpec::sample(32, domain, seed).unwrap()).unwrap()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            model: super::super::ModelConfig {
                hidden: 4,
                ..Default::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn loss_matches_hand_composition() {
        let (si, sl) = scene(Domain::Source, 1);
        let (ti, _) = scene(Domain::Target, 2);
        let cfg = small_cfg();
        let mut state = TrainState::new(&cfg).unwrap();
        let before = state.clone();
        let losses = train_step(&mut state, &[(&si, &sl)], &[&ti], &cfg, 99).unwrap();

        // compose independently from the module-level pieces
        let ones = WeightMap::filled(32, 32, 1.0);
        let src = weighted_ce_loss(&before.student.forward(&si), &sl, &ones).unwrap().loss;
        let pseudo = teacher_pseudo_label(&before.teacher, &ti).unwrap();
        let sample = crate::mixing::make_mixed_sample((&si, &sl), (&ti, &pseudo), mix_seed(99, 0)).unwrap();
        let w = cb_weight_map(&pseudo, &cfg.cb).unwrap();
        let w: Vec<f64> = (0..w.data.len())
            .map(|i| if sample.mask.data()[i] == 1 { 1.0 } else { w.data[i] })
            .collect();
        let w = WeightMap { height: 32, width: 32, data: w };
        let mixed = weighted_ce_loss(&before.student.forward(&sample.image), &sample.label, &w).unwrap().loss;
        assert!((losses.source - src).abs() < 1e-12);
        assert!((losses.mixed - mixed).abs() < 1e-12);
        assert!((losses.total - (src + mixed)).abs() < 1e-12);
        assert_ne!(state.student.params, before.student.params);
        assert_eq!(state.iteration, 1);
    }

    #[test]
    fn neutral_beta_equals_cb_off() {
        let (si, sl) = scene(Domain::Source, 3);
        let (ti, _) = scene(Domain::Target, 4);
        let on = TrainConfig {
            cb: CBConfig { beta: 1.0, ..CBConfig::default() },
            ..small_cfg()
        };
        let off = TrainConfig { use_cb: false, ..small_cfg() };
        let mut a = TrainState::new(&on).unwrap();
        let mut b = TrainState::new(&off).unwrap();
        for step in 0..3 {
            let la = train_step(&mut a, &[(&si, &sl)], &[&ti], &on, step).unwrap();
            let lb = train_step(&mut b, &[(&si, &sl)], &[&ti], &off, step).unwrap();
            assert_eq!(la.total.to_bits(), lb.total.to_bits());
        }
        assert_eq!(a, b);
    }

    #[test]
    fn teacher_stays_in_student_envelope() {
        let (si, sl) = scene(Domain::Source, 5);
        let (ti, _) = scene(Domain::Target, 6);
        let cfg = TrainConfig {
            ema_alpha: 0.9,
            learning_rate: 0.2,
            ..small_cfg()
        };
        let mut state = TrainState::new(&cfg).unwrap();
        let mut lo = state.student.params.clone();
        let mut hi = lo.clone();
        for step in 0..6 {
            train_step(&mut state, &[(&si, &sl)], &[&ti], &cfg, step).unwrap();
            for (k, &p) in state.student.params.iter().enumerate() {
                lo[k] = lo[k].min(p);
                hi[k] = hi[k].max(p);
            }
            for (k, &t) in state.teacher.model.params.iter().enumerate() {
                let slack = 1e-12 * hi[k].abs().max(1.0);
                assert!(t >= lo[k] - slack && t <= hi[k] + slack);
            }
        }
    }

    #[test]
    fn adamw_step_moves_parameters() {
        let (si, sl) = scene(Domain::Source, 7);
        let (ti, _) = scene(Domain::Target, 8);
        let cfg = TrainConfig {
            optimizer: OptimizerKind::AdamW,
            learning_rate: 1e-3,
            ..small_cfg()
        };
        let mut state = TrainState::new(&cfg).unwrap();
        let before = state.student.params.clone();
        train_step(&mut state, &[(&si, &sl)], &[&ti], &cfg, 0).unwrap();
        // first Adam step moves each parameter with a gradient by about lr
        let moved = before.iter().zip(&state.student.params).filter(|(a, b)| (*a - *b).abs() > 5e-4).count();
        assert!(moved > before.len() / 2);
    }

    #[test]
    fn mismatched_batches_are_rejected() {
        let (si, sl) = scene(Domain::Source, 9);
        let cfg = small_cfg();
        let mut state = TrainState::new(&cfg).unwrap();
        assert!(train_step(&mut state, &[(&si, &sl)], &[], &cfg, 0).is_err());
    }

    #[test]
    fn jitter_is_seeded_and_bounded() {
        let (img, _) = scene(Domain::Target, 10);
        let a = color_jitter(&img, 0.2, 1).unwrap();
        assert_eq!(a, color_jitter(&img, 0.2, 1).unwrap());
        assert_ne!(a, color_jitter(&img, 0.2, 2).unwrap());
        assert_eq!(color_jitter(&img, 0.0, 1).unwrap(), img);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
