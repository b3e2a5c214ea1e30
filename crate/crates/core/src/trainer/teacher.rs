//! Mean teacher: an EMA copy of the student that produces pseudo-labels.

use crate::error::{Error, Result};
use crate::mixing::PseudoLabel;
use crate::tensor::{softmax_into, ImageTensor, LabelMap};

use super::model::TinySegModel;

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherState {
    pub model: TinySegModel,
    pub alpha: f64,
}

impl TeacherState {
    /// Teacher initialised as an exact copy of the student.
    pub fn from_student(student: &TinySegModel, alpha: f64) -> Self {
        Self {
            model: student.clone(),
            alpha,
        }
    }
}

/// `θ_t ← α·θ_t + (1 − α)·θ_s`, elementwise.
pub fn ema_update(teacher: &mut TeacherState, student: &TinySegModel, alpha: f64) -> Result<()> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::InvalidState(format!("EMA momentum {alpha} outside [0, 1)")));
    }
    if teacher.model.config != student.config || teacher.model.params.len() != student.params.len() {
        return Err(Error::InvalidState("teacher and student shapes differ".into()));
    }
    for (t, &s) in teacher.model.params.iter_mut().zip(&student.params) {
        *t = alpha * *t + (1.0 - alpha) * s;
    }
    teacher.alpha = alpha;
    Ok(())
}

/// Argmax of the teacher's softmax (lowest class wins ties) and its max probability.
pub fn teacher_pseudo_label(teacher: &TeacherState, image: &ImageTensor) -> Result<PseudoLabel> {
    predict(&teacher.model, image)
}

/// Pseudo-label style prediction from any model.
pub fn predict(model: &TinySegModel, image: &ImageTensor) -> Result<PseudoLabel> {
    let scores = model.forward(image);
    let k = scores.classes;
    let mut probs = vec![0.0; k];
    let mut labels = Vec::with_capacity(scores.pixels());
    let mut confidence = Vec::with_capacity(scores.pixels());
    for i in 0..scores.pixels() {
        softmax_into(scores.pixel(i), &mut probs);
        let mut best = 0;
        for j in 1..k {
            if probs[j] > probs[best] {
                best = j;
            }
        }
        labels.push(best as u8);
        confidence.push(probs[best].clamp(0.0, 1.0));
    }
    PseudoLabel::new(LabelMap::new(image.height(), image.width(), labels)?, confidence)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn image(seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::new(6, 7, 3, (0..126).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn uniform_teacher_labels_background() {
        let mut model = TinySegModel::new(ModelConfig::default(), 1).unwrap();
        model.zero_head();
        let teacher = TeacherState::from_student(&model, 0.99);
        let pseudo = teacher_pseudo_label(&teacher, &image(1)).unwrap();
        assert!(pseudo.label.data().iter().all(|&l| l == 0));
        assert!(pseudo.confidence.iter().all(|&c| (c - 0.2).abs() < 1e-15));
    }

    #[test]
    fn peaked_teacher_is_confident() {
        let mut model = TinySegModel::new(ModelConfig::default(), 1).unwrap();
        model.zero_head();
        let [_, _, head] = model.config.stages();
        // bias of class 3 dominates
        model.params[head.offset + head.weight_len() + 3] = 50.0;
        let pseudo = predict(&model, &image(2)).unwrap();
        assert!(pseudo.label.data().iter().all(|&l| l == 3));
        assert!(pseudo.confidence.iter().all(|&c| c > 1.0 - 1e-12));
    }

    #[test]
    fn matches_argmax_oracle() {
        let model = TinySegModel::new(ModelConfig::default(), 17).unwrap();
        let img = image(17);
        let pseudo = predict(&model, &img).unwrap();
        let scores = model.forward(&img);
        for i in 0..scores.pixels() {
            let s = scores.pixel(i);
            let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let arg = s.iter().position(|&v| v == max).unwrap();
            let denom: f64 = s.iter().map(|v| (v - max).exp()).sum();
            assert_eq!(pseudo.label.data()[i] as usize, arg);
            assert!((pseudo.confidence[i] - 1.0 / denom).abs() < 1e-12);
        }
    }

    #[test]
    fn ema_examples() {
        let student = TinySegModel::new(ModelConfig::default(), 1).unwrap();
        let other = TinySegModel::new(ModelConfig::default(), 2).unwrap();
        let mut teacher = TeacherState::from_student(&other, 0.5);
        ema_update(&mut teacher, &student, 0.0).unwrap();
        assert_eq!(teacher.model.params, student.params);

        let mut same = TeacherState::from_student(&student, 0.9);
        ema_update(&mut same, &student, 0.9).unwrap();
        for (a, b) in same.model.params.iter().zip(&student.params) {
            assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0));
        }

        let mut teacher = TeacherState::from_student(&other, 0.999);
        ema_update(&mut teacher, &student, 0.999).unwrap();
        for ((t, o), s) in teacher.model.params.iter().zip(&other.params).zip(&student.params) {
            assert!((t - (0.999 * o + 0.001 * s)).abs() < 1e-12);
        }

        assert!(ema_update(&mut teacher, &student, 1.0).is_err());
        let small = TinySegModel::new(ModelConfig { hidden: 3, ..ModelConfig::default() }, 1).unwrap();
        assert!(matches!(ema_update(&mut teacher, &small, 0.5), Err(Error::InvalidState(_))));
    }
}
