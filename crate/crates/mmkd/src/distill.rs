//! Probability normalization, CE/KL losses, the base distillation objective,
//! modality dropout and total-loss composition.

use ndarray::ArrayD;
use rand::Rng;

use crate::autodiff::Tape;
use crate::error::{MmkdError, Result};
use crate::synth::IGNORE_LABEL;

/// Which side of the KL is the target distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KlDirection {
    /// KL(teacher || student): teacher probabilities weight log(teacher/student).
    #[default]
    TeacherStudent,
    /// Flipped direction, kept for ablation.
    StudentTeacher,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PrototypeMode {
    #[default]
    Hybrid,
    Single,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RegularizerMode {
    #[default]
    Single,
    Hybrid,
    Off,
}

/// Loss weights and variant switches; every ablation row is one setting.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub prototype_mode: PrototypeMode,
    pub regularizer_mode: RegularizerMode,
    pub kl_direction: KlDirection,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 50.0,
            alpha: 100.0,
            beta: 12.0,
            prototype_mode: PrototypeMode::Hybrid,
            regularizer_mode: RegularizerMode::Single,
            kl_direction: KlDirection::TeacherStudent,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || self.alpha < 0.0 || self.beta < 0.0 {
            return Err(MmkdError::Config("loss weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// Stabilized softmax over a single score vector.
pub fn prob_normalize(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(MmkdError::Contract("prob_normalize on empty vector".into()));
    }
    if x.iter().any(|v| v.is_nan()) {
        return Err(MmkdError::Contract("prob_normalize on NaN input".into()));
    }
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / s).collect())
}

/// Mean CE over non-ignored pixels of a [B,C,H,W] logits batch.
///
/// Returns the loss and a flag set when every pixel was ignored (loss 0).
pub fn ce_loss(logits: &ArrayD<f64>, labels: &ArrayD<u8>) -> Result<(f64, bool)> {
    let mut tape = Tape::new();
    let l = tape.leaf(logits.clone());
    let (v, all_ignored) = tape.ce_loss(l, labels, IGNORE_LABEL)?;
    Ok((tape.value_scalar(v), all_ignored))
}

/// KL divergence between softmax-normalized inputs along `axis`, mean-reduced
/// over the remaining positions. Direction per [`KlDirection`].
pub fn kl_div(
    student: &ArrayD<f64>,
    teacher: &ArrayD<f64>,
    axis: usize,
    direction: KlDirection,
) -> Result<f64> {
    kl_div_masked(student, teacher, axis, direction, None)
}

/// [`kl_div`] restricted to rows where `mask` is true.
pub fn kl_div_masked(
    student: &ArrayD<f64>,
    teacher: &ArrayD<f64>,
    axis: usize,
    direction: KlDirection,
    mask: Option<&ArrayD<bool>>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let s = tape.leaf(student.clone());
    let t = tape.leaf(teacher.clone());
    let v = match direction {
        KlDirection::TeacherStudent => tape.kl_mean(s, t, axis, mask)?,
        KlDirection::StudentTeacher => tape.kl_mean(t, s, axis, mask)?,
    };
    Ok(tape.value_scalar(v))
}

/// Base objective pieces: CE + lambda * KL(logits).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OriginBreakdown {
    pub ce: f64,
    pub kl: f64,
    pub total: f64,
    pub all_ignored: bool,
}

/// CE + lambda*KL on logits; ignore-labeled pixels are excluded from both.
pub fn l_origin(
    student_logits: &ArrayD<f64>,
    teacher_logits: &ArrayD<f64>,
    labels: &ArrayD<u8>,
    lambda: f64,
    direction: KlDirection,
) -> Result<OriginBreakdown> {
    if student_logits.shape() != teacher_logits.shape() {
        return Err(MmkdError::Contract(
            "student/teacher logit shape mismatch".into(),
        ));
    }
    let (ce, all_ignored) = ce_loss(student_logits, labels)?;
    let mask = labels.mapv(|v| v != IGNORE_LABEL);
    let kl = kl_div_masked(student_logits, teacher_logits, 1, direction, Some(&mask))?;
    Ok(OriginBreakdown {
        ce,
        kl,
        total: ce + lambda * kl,
        all_ignored,
    })
}

// ---------------------------------------------------------------------------
// modality dropout

#[derive(Debug, Clone, PartialEq)]
pub enum DropoutKind {
    /// Uniform over the 2^M - 1 non-empty subsets.
    UniformSubset,
    /// Independent keep probability per modality, empty draws rejected.
    Bernoulli { keep: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DropoutPolicy {
    pub kind: DropoutKind,
    pub num_modalities: usize,
    /// Resample per sample instead of per batch.
    pub per_sample: bool,
}

impl Default for DropoutPolicy {
    fn default() -> Self {
        DropoutPolicy {
            kind: DropoutKind::UniformSubset,
            num_modalities: 4,
            per_sample: false,
        }
    }
}

impl DropoutPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.num_modalities == 0 {
            return Err(MmkdError::Config("dropout over zero modalities".into()));
        }
        if self.num_modalities > 20 {
            return Err(MmkdError::Config(
                "subset enumeration limited to 20 modalities".into(),
            ));
        }
        if let DropoutKind::Bernoulli { keep } = self.kind {
            if !(0.0..=1.0).contains(&keep) || keep == 0.0 {
                return Err(MmkdError::Config(
                    "bernoulli keep probability must be in (0,1]".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Draws a non-empty modality subset (sorted indices).
pub fn sample_dropout_subset<R: Rng>(policy: &DropoutPolicy, rng: &mut R) -> Vec<usize> {
    let m = policy.num_modalities;
    match policy.kind {
        DropoutKind::UniformSubset => {
            let mask: u64 = rng.gen_range(1..(1u64 << m));
            (0..m).filter(|i| mask >> i & 1 == 1).collect()
        }
        DropoutKind::Bernoulli { keep } => loop {
            let subset: Vec<usize> = (0..m).filter(|_| rng.gen::<f64>() < keep).collect();
            if !subset.is_empty() {
                return subset;
            }
        },
    }
}

// ---------------------------------------------------------------------------
// total loss

/// L = L_origin + alpha * L_proto + beta * L_reg.
///
/// `proto`/`reg` must be present whenever the corresponding mode is enabled.
pub fn total_loss(
    origin: f64,
    proto: Option<f64>,
    reg: Option<f64>,
    weights: &LossWeights,
) -> Result<f64> {
    let mut total = origin;
    if weights.prototype_mode != PrototypeMode::Off {
        let p = proto.ok_or_else(|| {
            MmkdError::Contract("prototype loss required by mode but missing".into())
        })?;
        total += weights.alpha * p;
    }
    if weights.regularizer_mode != RegularizerMode::Off {
        let r = reg.ok_or_else(|| {
            MmkdError::Contract("regularizer loss required by mode but missing".into())
        })?;
        total += weights.beta * r;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;
    use std::collections::HashSet;

    #[test]
    fn prob_normalize_examples() {
        let p = prob_normalize(&[0.0, 0.0]).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12);

        let a = prob_normalize(&[1.0, -2.0, 0.3]).unwrap();
        let b = prob_normalize(&[101.0, 98.0, 100.3]).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-7);
        }

        let p = prob_normalize(&[1f64.ln(), 3f64.ln()]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-12 && (p[1] - 0.75).abs() < 1e-12);

        assert!(prob_normalize(&[f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn ce_uniform_logits_is_log_c() {
        let logits = ArrayD::zeros(IxDyn(&[1, 6, 4, 4]));
        let labels = ArrayD::from_shape_fn(IxDyn(&[1, 4, 4]), |ix| ((ix[1] + ix[2]) % 6) as u8);
        let (ce, warn) = ce_loss(&logits, &labels).unwrap();
        assert!(!warn);
        assert!((ce - 6f64.ln()).abs() < 1e-12, "{ce}");
    }

    #[test]
    fn ce_confident_margin_is_tiny() {
        let labels = ArrayD::from_shape_fn(IxDyn(&[1, 2, 2]), |ix| ((ix[1] + ix[2]) % 3) as u8);
        let mut logits = ArrayD::zeros(IxDyn(&[1, 3, 2, 2]));
        for i in 0..2 {
            for j in 0..2 {
                logits[[0, labels[[0, i, j]] as usize, i, j]] = 20.0;
            }
        }
        let (ce, _) = ce_loss(&logits, &labels).unwrap();
        assert!(ce < 1e-8, "{ce}");
    }

    #[test]
    fn ce_ignores_masked_half() {
        let mut rng = crate::rng::stream(3, &[0]);
        let logits = ArrayD::from_shape_fn(IxDyn(&[1, 4, 4, 4]), |_| rng.gen::<f64>() * 2.0 - 1.0);
        let mut labels = ArrayD::from_shape_fn(IxDyn(&[1, 4, 4]), |_| rng.gen_range(0..4) as u8);
        for i in 0..4 {
            for j in 0..4 {
                if (i + j) % 2 == 0 {
                    labels[[0, i, j]] = IGNORE_LABEL;
                }
            }
        }
        let (ce, _) = ce_loss(&logits, &labels).unwrap();

        // brute-force masked mean from first principles
        let mut total = 0.0;
        let mut n = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                let y = labels[[0, i, j]];
                if y == IGNORE_LABEL {
                    continue;
                }
                let row: Vec<f64> = (0..4).map(|c| logits[[0, c, i, j]]).collect();
                let p = prob_normalize(&row).unwrap();
                total -= p[y as usize].ln();
                n += 1.0;
            }
        }
        assert!((ce - total / n).abs() < 1e-12);
    }

    #[test]
    fn all_ignored_yields_zero_with_warning() {
        let logits = ArrayD::zeros(IxDyn(&[1, 3, 2, 2]));
        let labels = ArrayD::from_elem(IxDyn(&[1, 2, 2]), IGNORE_LABEL);
        let (ce, warn) = ce_loss(&logits, &labels).unwrap();
        assert_eq!(ce, 0.0);
        assert!(warn);
    }

    #[test]
    fn kl_identity_hand_value_and_nonnegativity() {
        let x = ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![0.3, -1.2]).unwrap();
        assert!(kl_div(&x, &x, 1, KlDirection::TeacherStudent).unwrap() < 1e-7);

        // teacher (0.75, 0.25), student uniform
        let t = ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![0.75f64.ln(), 0.25f64.ln()]).unwrap();
        let s = ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![0.0, 0.0]).unwrap();
        let v = kl_div(&s, &t, 1, KlDirection::TeacherStudent).unwrap();
        let expect = 0.75 * (0.75f64 / 0.5).ln() + 0.25 * (0.25f64 / 0.5).ln();
        assert!((v - expect).abs() < 1e-9, "{v} vs {expect}");
        assert!((v - 0.1308).abs() < 1e-4);

        let mut rng = crate::rng::stream(5, &[0]);
        for _ in 0..50 {
            let a = ArrayD::from_shape_fn(IxDyn(&[2, 5]), |_| rng.gen::<f64>() * 4.0 - 2.0);
            let b = ArrayD::from_shape_fn(IxDyn(&[2, 5]), |_| rng.gen::<f64>() * 4.0 - 2.0);
            assert!(kl_div(&a, &b, 1, KlDirection::TeacherStudent).unwrap() >= -1e-9);
        }
    }

    #[test]
    fn kl_joint_convexity_smoke() {
        let mut rng = crate::rng::stream(6, &[0]);
        for _ in 0..100 {
            let a1 = ArrayD::from_shape_fn(IxDyn(&[1, 4]), |_| rng.gen::<f64>() * 2.0 - 1.0);
            let b1 = ArrayD::from_shape_fn(IxDyn(&[1, 4]), |_| rng.gen::<f64>() * 2.0 - 1.0);
            let a2 = ArrayD::from_shape_fn(IxDyn(&[1, 4]), |_| rng.gen::<f64>() * 2.0 - 1.0);
            let b2 = ArrayD::from_shape_fn(IxDyn(&[1, 4]), |_| rng.gen::<f64>() * 2.0 - 1.0);
            // mix in probability space, then re-log to feed as logits
            let mix = |x: &ArrayD<f64>, y: &ArrayD<f64>| {
                let px = prob_normalize(x.as_slice().unwrap()).unwrap();
                let py = prob_normalize(y.as_slice().unwrap()).unwrap();
                let m: Vec<f64> = px
                    .iter()
                    .zip(&py)
                    .map(|(a, b)| ((a + b) / 2.0).ln())
                    .collect();
                ArrayD::from_shape_vec(IxDyn(&[1, 4]), m).unwrap()
            };
            let am = mix(&a1, &a2);
            let bm = mix(&b1, &b2);
            let kl_m = kl_div(&am, &bm, 1, KlDirection::TeacherStudent).unwrap();
            let kl_1 = kl_div(&a1, &b1, 1, KlDirection::TeacherStudent).unwrap();
            let kl_2 = kl_div(&a2, &b2, 1, KlDirection::TeacherStudent).unwrap();
            assert!(kl_m <= (kl_1 + kl_2) / 2.0 + 1e-9);
        }
    }

    #[test]
    fn l_origin_degenerate_weights() {
        let mut rng = crate::rng::stream(7, &[0]);
        let s = ArrayD::from_shape_fn(IxDyn(&[1, 3, 4, 4]), |_| rng.gen::<f64>());
        let t = ArrayD::from_shape_fn(IxDyn(&[1, 3, 4, 4]), |_| rng.gen::<f64>());
        let labels = ArrayD::from_shape_fn(IxDyn(&[1, 4, 4]), |_| rng.gen_range(0..3) as u8);

        let b = l_origin(&s, &t, &labels, 0.0, KlDirection::TeacherStudent).unwrap();
        let (ce, _) = ce_loss(&s, &labels).unwrap();
        assert_eq!(b.total, ce);

        let b2 = l_origin(&s, &s, &labels, 50.0, KlDirection::TeacherStudent).unwrap();
        assert!((b2.total - ce).abs() < 1e-9);
        assert!(b2.kl.abs() < 1e-12);
    }

    #[test]
    fn dropout_m1_is_forced() {
        let policy = DropoutPolicy {
            num_modalities: 1,
            ..DropoutPolicy::default()
        };
        let mut rng = crate::rng::stream(8, &[0]);
        for _ in 0..100 {
            assert_eq!(sample_dropout_subset(&policy, &mut rng), vec![0]);
        }
    }

    #[test]
    fn dropout_m2_uniform_frequencies() {
        let policy = DropoutPolicy {
            num_modalities: 2,
            ..DropoutPolicy::default()
        };
        let mut rng = crate::rng::stream(9, &[0]);
        let mut counts = [0usize; 3];
        let n = 30_000;
        for _ in 0..n {
            let s = sample_dropout_subset(&policy, &mut rng);
            let idx = match s.as_slice() {
                [0] => 0,
                [1] => 1,
                [0, 1] => 2,
                other => panic!("unexpected subset {other:?}"),
            };
            counts[idx] += 1;
        }
        let expected = n as f64 / 3.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // chi-square critical value, 2 dof, p = 0.01
        assert!(chi2 < 9.21, "chi2 = {chi2}, counts = {counts:?}");
    }

    #[test]
    fn dropout_m4_covers_all_15_subsets() {
        let policy = DropoutPolicy {
            num_modalities: 4,
            ..DropoutPolicy::default()
        };
        let mut rng = crate::rng::stream(10, &[0]);
        let mut seen = HashSet::new();
        for _ in 0..30_000 {
            seen.insert(sample_dropout_subset(&policy, &mut rng));
        }
        assert_eq!(seen.len(), 15);
    }

    #[test]
    fn dropout_never_empty() {
        let mut rng = crate::rng::stream(11, &[0]);
        for kind in [
            DropoutKind::UniformSubset,
            DropoutKind::Bernoulli { keep: 0.3 },
        ] {
            let policy = DropoutPolicy {
                kind,
                num_modalities: 4,
                per_sample: false,
            };
            for _ in 0..1_000_000 {
                if sample_dropout_subset(&policy, &mut rng).is_empty() {
                    panic!("empty dropout subset drawn");
                }
            }
        }
    }

    #[test]
    fn total_loss_composition() {
        let off = LossWeights {
            prototype_mode: PrototypeMode::Off,
            regularizer_mode: RegularizerMode::Off,
            ..LossWeights::default()
        };
        assert_eq!(total_loss(2.5, None, None, &off).unwrap(), 2.5);

        let w = LossWeights {
            alpha: 2.0,
            beta: 3.0,
            ..LossWeights::default()
        };
        assert_eq!(total_loss(1.0, Some(1.0), Some(1.0), &w).unwrap(), 6.0);
        assert!(total_loss(1.0, None, Some(1.0), &w).is_err());
        assert!(total_loss(1.0, Some(1.0), None, &w).is_err());

        // linear in each component given the others fixed
        let base = total_loss(1.0, Some(2.0), Some(3.0), &w).unwrap();
        let bump = total_loss(1.0, Some(3.0), Some(3.0), &w).unwrap();
        assert_eq!(bump - base, w.alpha);
    }
}
