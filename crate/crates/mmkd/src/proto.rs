//! Class-prototype distillation.
//!
//! Labels are nearest-neighbor downsampled to each stage's resolution,
//! features are compressed into per-class mean vectors (prototypes), and
//! student prototypes are distilled against teacher prototypes under a random
//! permutation of the student's present modalities (hybrid mode) or the
//! matching modality (single mode).

use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::distill::PrototypeMode;
use crate::error::{MmkdError, Result};
use crate::synth::IGNORE_LABEL;

/// Per-class mean feature vectors for one (stage, modality) pair.
#[derive(Debug, Clone)]
pub struct PrototypeSet {
    /// [C, d]; rows of invalid classes are zero.
    pub prototypes: Array2<f64>,
    /// Class present in the downsampled labels.
    pub validity: Vec<bool>,
}

/// Nearest-neighbor label downsampling, top-left anchored: output cell (i, j)
/// reads source pixel (floor(i*H/h), floor(j*W/w)).
pub fn downsample_labels(labels: &Array2<u8>, h: usize, w: usize) -> Result<Array2<u8>> {
    let (src_h, src_w) = labels.dim();
    if h > src_h || w > src_w || h == 0 || w == 0 {
        return Err(MmkdError::Contract(format!(
            "downsample target {h}x{w} invalid for source {src_h}x{src_w}"
        )));
    }
    Ok(Array2::from_shape_fn((h, w), |(i, j)| {
        labels[[i * src_h / h, j * src_w / w]]
    }))
}

/// Masked per-class mean of one stage tensor [d, h, w] under labels [h, w].
pub fn compute_prototypes(
    features: &ArrayD<f64>,
    labels: &Array2<u8>,
    num_classes: usize,
) -> Result<PrototypeSet> {
    let mut tape = Tape::new();
    let f = tape.leaf(features.clone());
    let (p, validity) =
        tape.class_prototypes(f, &labels.clone().into_dyn(), num_classes, IGNORE_LABEL)?;
    let prototypes = tape
        .value(p)
        .clone()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap();
    Ok(PrototypeSet {
        prototypes,
        validity,
    })
}

// ---------------------------------------------------------------------------
// permutation plans

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PermGranularity {
    /// One draw shared by all four stages.
    #[default]
    PerBatch,
    /// Independent draw per stage.
    PerStage,
}

/// Permutation of positions 0..k-1 over the student's present modalities,
/// one per stage (identical across stages under per-batch granularity).
#[derive(Debug, Clone, PartialEq)]
pub struct PermutationPlan {
    pub per_stage: [Vec<usize>; 4],
}

impl PermutationPlan {
    pub fn identity(k: usize) -> PermutationPlan {
        let id: Vec<usize> = (0..k).collect();
        PermutationPlan {
            per_stage: [id.clone(), id.clone(), id.clone(), id],
        }
    }

    /// Log-friendly rendering, e.g. `2,0,1|2,0,1|2,0,1|2,0,1`.
    pub fn descriptor(&self) -> String {
        self.per_stage
            .iter()
            .map(|p| {
                p.iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            })
            .collect::<Vec<_>>()
            .join("|")
    }
}

fn draw_mapping<R: Rng>(k: usize, rng: &mut R, with_replacement: bool) -> Vec<usize> {
    if with_replacement {
        return (0..k).map(|_| rng.gen_range(0..k)).collect();
    }
    let mut perm: Vec<usize> = (0..k).collect();
    for i in (1..k).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    perm
}

/// Uniform random bijection over the present modalities (identity when only
/// one is present). `with_replacement` draws each slot independently instead.
pub fn sample_permutation<R: Rng>(
    present_count: usize,
    rng: &mut R,
    granularity: PermGranularity,
    with_replacement: bool,
) -> PermutationPlan {
    assert!(present_count >= 1, "permutation over empty present set");
    match granularity {
        PermGranularity::PerBatch => {
            let p = draw_mapping(present_count, rng, with_replacement);
            PermutationPlan {
                per_stage: [p.clone(), p.clone(), p.clone(), p],
            }
        }
        PermGranularity::PerStage => PermutationPlan {
            per_stage: std::array::from_fn(|_| draw_mapping(present_count, rng, with_replacement)),
        },
    }
}

// ---------------------------------------------------------------------------
// hybrid prototype loss

/// Stage feature vars for one modality, stages 1..4, each [B, d_i, h_i, w_i].
pub type StageVars = Vec<Var>;

/// Prototype distillation loss on the tape.
///
/// `student` holds the present modalities (sorted by modality index);
/// `teacher` must hold all `num_modalities` pyramids. Teacher slot `j` is
/// paired with the student pyramid at position `plan[i][j % k]` (hybrid) or
/// `j % k` (single) in the present list. Class terms where either prototype
/// is invalid are skipped and the mean renormalized over counted terms.
#[allow(clippy::too_many_arguments)]
pub fn prototype_loss_on_tape(
    tape: &mut Tape,
    student: &[(usize, StageVars)],
    teacher: &[(usize, StageVars)],
    labels: &ArrayD<u8>,
    num_classes: usize,
    num_modalities: usize,
    plan: &PermutationPlan,
    mode: PrototypeMode,
) -> Result<Var> {
    if mode == PrototypeMode::Off {
        return Err(MmkdError::Contract(
            "prototype loss requested with mode off".into(),
        ));
    }
    if student.is_empty() {
        return Err(MmkdError::Contract("no student modalities present".into()));
    }
    if teacher.len() != num_modalities {
        return Err(MmkdError::Contract(format!(
            "teacher must be full-modality: expected {num_modalities} pyramids, got {}",
            teacher.len()
        )));
    }
    let k = student.len();
    let batch = tape.value(student[0].1[0]).shape()[0];
    if labels.ndim() != 3 || labels.shape()[0] != batch {
        return Err(MmkdError::Contract("labels must be [B,H,W]".into()));
    }
    let (full_h, full_w) = (labels.shape()[1], labels.shape()[2]);

    let mut terms: Vec<Var> = Vec::new();
    let mut counted = 0usize;
    for n in 0..batch {
        let sample_labels = labels
            .index_axis(ndarray::Axis(0), n)
            .to_owned()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        for stage in 0..4 {
            let sshape = tape.value(student[0].1[stage]).shape().to_vec();
            let (h, w) = (sshape[2], sshape[3]);
            if full_h % h != 0 || full_w % w != 0 {
                return Err(MmkdError::Contract(format!(
                    "stage {stage} resolution {h}x{w} does not divide labels {full_h}x{full_w}"
                )));
            }
            let ds = downsample_labels(&sample_labels, h, w)?.into_dyn();

            // student prototypes for every present modality at this stage
            let mut sprotos = Vec::with_capacity(k);
            for (_, pyr) in student {
                let f = tape.index_batch(pyr[stage], n);
                sprotos.push(tape.class_prototypes(f, &ds, num_classes, IGNORE_LABEL)?);
            }
            for (j, (_, tpyr)) in teacher.iter().enumerate() {
                let tshape = tape.value(tpyr[stage]).shape();
                if tshape[2] != h || tshape[3] != w {
                    return Err(MmkdError::Contract(
                        "student/teacher stage resolution mismatch".into(),
                    ));
                }
                let tf = tape.index_batch(tpyr[stage], n);
                let (tproto, tvalid) = tape.class_prototypes(tf, &ds, num_classes, IGNORE_LABEL)?;
                let spos = match mode {
                    PrototypeMode::Hybrid => plan.per_stage[stage][j % k],
                    PrototypeMode::Single => j % k,
                    PrototypeMode::Off => unreachable!(),
                };
                let (sproto, svalid) = &sprotos[spos];
                let mask: Vec<bool> = tvalid
                    .iter()
                    .zip(svalid.iter())
                    .map(|(&a, &b)| a && b)
                    .collect();
                let n_valid = mask.iter().filter(|&&v| v).count();
                if n_valid == 0 {
                    continue;
                }
                let mask_nd = ArrayD::from_shape_vec(IxDyn(&[num_classes]), mask).unwrap();
                // KL(teacher proto || student proto), channel axis 1
                let mean_kl = tape.kl_mean(*sproto, tproto, 1, Some(&mask_nd))?;
                let sum_kl = tape.scale(mean_kl, n_valid as f64);
                terms.push(sum_kl);
                counted += n_valid;
            }
        }
    }
    if counted == 0 {
        return Ok(tape.leaf(crate::autodiff::scalar(0.0)));
    }
    let mut acc = terms[0];
    for t in &terms[1..] {
        acc = tape.add(acc, *t);
    }
    Ok(tape.scale(acc, 1.0 / counted as f64))
}

/// Plain-value prototype loss over borrowed stage tensors.
///
/// `student`/`teacher` map modality index to 4 stage tensors [B,d,h,w].
#[allow(clippy::too_many_arguments)]
pub fn prototype_loss(
    student: &[(usize, Vec<ArrayD<f64>>)],
    teacher: &[(usize, Vec<ArrayD<f64>>)],
    labels: &ArrayD<u8>,
    num_classes: usize,
    num_modalities: usize,
    plan: &PermutationPlan,
    mode: PrototypeMode,
) -> Result<f64> {
    let mut tape = Tape::new();
    let sv: Vec<(usize, StageVars)> = student
        .iter()
        .map(|(m, stages)| (*m, stages.iter().map(|s| tape.leaf(s.clone())).collect()))
        .collect();
    let tv: Vec<(usize, StageVars)> = teacher
        .iter()
        .map(|(m, stages)| (*m, stages.iter().map(|s| tape.leaf(s.clone())).collect()))
        .collect();
    let loss = prototype_loss_on_tape(
        &mut tape,
        &sv,
        &tv,
        labels,
        num_classes,
        num_modalities,
        plan,
        mode,
    )?;
    Ok(tape.value_scalar(loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference, max_rel_err};
    use ndarray::{Array2, ArrayD, IxDyn};
    use rand::Rng;
    use std::collections::HashSet;

    // -- independent oracles ------------------------------------------------

    /// Pixel-loop prototype oracle.
    fn proto_oracle(f: &ArrayD<f64>, labels: &Array2<u8>, c: usize) -> (Vec<Vec<f64>>, Vec<bool>) {
        let d = f.shape()[0];
        let mut sums = vec![vec![0.0; d]; c];
        let mut counts = vec![0usize; c];
        for cls in 0..c {
            for i in 0..labels.dim().0 {
                for j in 0..labels.dim().1 {
                    if labels[[i, j]] as usize == cls {
                        counts[cls] += 1;
                        for ch in 0..d {
                            sums[cls][ch] += f[[ch, i, j]];
                        }
                    }
                }
            }
        }
        let valid: Vec<bool> = counts.iter().map(|&n| n > 0).collect();
        for cls in 0..c {
            if counts[cls] > 0 {
                for v in &mut sums[cls] {
                    *v /= counts[cls] as f64;
                }
            }
        }
        (sums, valid)
    }

    fn kl_vec(t: &[f64], s: &[f64]) -> f64 {
        let norm = |x: &[f64]| {
            let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|v| v / z).collect::<Vec<f64>>()
        };
        let pt = norm(t);
        let ps = norm(s);
        pt.iter()
            .zip(ps.iter())
            .map(|(&a, &b)| a * (a.ln() - b.ln()))
            .sum()
    }

    /// Explicit-loop oracle for the prototype loss.
    fn hpdm_oracle(
        student: &[(usize, Vec<ArrayD<f64>>)],
        teacher: &[(usize, Vec<ArrayD<f64>>)],
        labels: &ArrayD<u8>,
        c: usize,
        plan: &PermutationPlan,
        hybrid: bool,
    ) -> f64 {
        let k = student.len();
        let batch = labels.shape()[0];
        let mut total = 0.0;
        let mut counted = 0usize;
        for n in 0..batch {
            let sl = labels
                .index_axis(ndarray::Axis(0), n)
                .to_owned()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            for stage in 0..4 {
                let (h, w) = (
                    student[0].1[stage].shape()[2],
                    student[0].1[stage].shape()[3],
                );
                let ds = downsample_labels(&sl, h, w).unwrap();
                for (j, (_, tpyr)) in teacher.iter().enumerate() {
                    let tf = tpyr[stage].index_axis(ndarray::Axis(0), n).to_owned();
                    let (tp, tv) = proto_oracle(&tf.into_dyn(), &ds, c);
                    let spos = if hybrid {
                        plan.per_stage[stage][j % k]
                    } else {
                        j % k
                    };
                    let sf = student[spos].1[stage]
                        .index_axis(ndarray::Axis(0), n)
                        .to_owned();
                    let (sp, sv) = proto_oracle(&sf.into_dyn(), &ds, c);
                    for cls in 0..c {
                        if tv[cls] && sv[cls] {
                            total += kl_vec(&tp[cls], &sp[cls]);
                            counted += 1;
                        }
                    }
                }
            }
        }
        total / counted as f64
    }

    fn rand_pyramids(
        modalities: &[usize],
        batch: usize,
        dims: &[(usize, usize, usize)],
        seed: u64,
    ) -> Vec<(usize, Vec<ArrayD<f64>>)> {
        let mut rng = crate::rng::stream(seed, &[0]);
        modalities
            .iter()
            .map(|&m| {
                let stages = dims
                    .iter()
                    .map(|&(d, h, w)| {
                        ArrayD::from_shape_fn(IxDyn(&[batch, d, h, w]), |_| {
                            rng.gen::<f64>() * 2.0 - 1.0
                        })
                    })
                    .collect();
                (m, stages)
            })
            .collect()
    }

    const DIMS: [(usize, usize, usize); 4] = [(3, 8, 8), (4, 4, 4), (5, 2, 2), (6, 1, 1)];

    fn rand_labels(batch: usize, c: usize, seed: u64) -> ArrayD<u8> {
        let mut rng = crate::rng::stream(seed, &[1]);
        ArrayD::from_shape_fn(IxDyn(&[batch, 16, 16]), |_| rng.gen_range(0..c) as u8)
    }

    // -- downsampling -------------------------------------------------------

    #[test]
    fn downsample_examples() {
        let constant = Array2::from_elem((6, 6), 3u8);
        assert_eq!(
            downsample_labels(&constant, 3, 3).unwrap(),
            Array2::from_elem((3, 3), 3u8)
        );

        let checker = Array2::from_shape_fn((4, 4), |(i, j)| ((i + j) % 2) as u8);
        let out = downsample_labels(&checker, 2, 2).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(out[[i, j]], checker[[2 * i, 2 * j]]);
            }
        }

        let any = Array2::from_shape_fn((5, 7), |(i, j)| ((i * 7 + j) % 4) as u8);
        assert_eq!(downsample_labels(&any, 5, 7).unwrap(), any);

        assert!(downsample_labels(&any, 6, 7).is_err());
    }

    #[test]
    fn downsample_matches_nearest_neighbor_oracle() {
        let mut rng = crate::rng::stream(3, &[0]);
        for _ in 0..20 {
            let src_h = rng.gen_range(4..16);
            let src_w = rng.gen_range(4..16);
            let labels = Array2::from_shape_fn((src_h, src_w), |_| rng.gen_range(0..5) as u8);
            let h = rng.gen_range(1..=src_h);
            let w = rng.gen_range(1..=src_w);
            let out = downsample_labels(&labels, h, w).unwrap();
            for i in 0..h {
                for j in 0..w {
                    // nearest source pixel under top-left anchoring, ties to
                    // the smaller index
                    let si = i * src_h / h;
                    let sj = j * src_w / w;
                    assert_eq!(out[[i, j]], labels[[si, sj]]);
                }
            }
            let values: HashSet<u8> = out.iter().cloned().collect();
            let src_values: HashSet<u8> = labels.iter().cloned().collect();
            assert!(values.is_subset(&src_values));
        }
    }

    // -- prototypes ----------------------------------------------------------

    #[test]
    fn prototype_examples() {
        // all pixels class 2, constant feature vector
        let mut f = ArrayD::zeros(IxDyn(&[3, 2, 2]));
        for ch in 0..3 {
            f.index_axis_mut(ndarray::Axis(0), ch).fill(ch as f64 + 0.5);
        }
        let labels = Array2::from_elem((2, 2), 2u8);
        let ps = compute_prototypes(&f, &labels, 4).unwrap();
        assert_eq!(ps.validity, vec![false, false, true, false]);
        for ch in 0..3 {
            assert_eq!(ps.prototypes[[2, ch]], ch as f64 + 0.5);
        }

        // two pixels of class 0 with features [1,0] and [0,1]
        let f = ArrayD::from_shape_vec(IxDyn(&[2, 1, 2]), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let labels = Array2::zeros((1, 2));
        let ps = compute_prototypes(&f, &labels, 2).unwrap();
        assert!((ps.prototypes[[0, 0]] - 0.5).abs() < 1e-12);
        assert!((ps.prototypes[[0, 1]] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn prototypes_match_pixel_loop_oracle() {
        let mut rng = crate::rng::stream(5, &[0]);
        for trial in 0..20 {
            let f = ArrayD::from_shape_fn(IxDyn(&[4, 8, 8]), |_| rng.gen::<f64>() * 2.0 - 1.0);
            let labels = Array2::from_shape_fn((8, 8), |_| {
                let v = rng.gen_range(0..5);
                if v == 4 {
                    IGNORE_LABEL
                } else {
                    v as u8
                }
            });
            let ps = compute_prototypes(&f, &labels, 4).unwrap();
            let (op, ov) = proto_oracle(&f, &labels, 4);
            assert_eq!(ps.validity, ov, "trial {trial}");
            for c in 0..4 {
                if ov[c] {
                    for (ch, want) in op[c].iter().enumerate() {
                        assert!((ps.prototypes[[c, ch]] - want).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn prototype_set_is_compact() {
        let f = ArrayD::zeros(IxDyn(&[7, 32, 32]));
        let labels = Array2::zeros((32, 32));
        let ps = compute_prototypes(&f, &labels, 5).unwrap();
        assert_eq!(ps.prototypes.dim(), (5, 7));
    }

    // -- permutations ---------------------------------------------------------

    #[test]
    fn permutation_one_modality_is_identity() {
        let mut rng = crate::rng::stream(7, &[0]);
        for _ in 0..50 {
            let p = sample_permutation(1, &mut rng, PermGranularity::PerBatch, false);
            assert_eq!(p, PermutationPlan::identity(1));
        }
    }

    #[test]
    fn permutation_two_modalities_balanced() {
        let mut rng = crate::rng::stream(8, &[0]);
        let mut swaps = 0usize;
        let n = 20_000;
        for _ in 0..n {
            let p = sample_permutation(2, &mut rng, PermGranularity::PerBatch, false);
            if p.per_stage[0] == vec![1, 0] {
                swaps += 1;
            }
        }
        let frac = swaps as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.02, "swap fraction {frac}");
    }

    #[test]
    fn permutation_four_modalities_covers_all_bijections() {
        let mut rng = crate::rng::stream(9, &[0]);
        let mut seen = HashSet::new();
        for _ in 0..100_000 {
            let p = sample_permutation(4, &mut rng, PermGranularity::PerBatch, false);
            seen.insert(p.per_stage[0].clone());
        }
        assert_eq!(seen.len(), 24);
    }

    // -- loss ------------------------------------------------------------------

    #[test]
    fn identical_pyramids_give_zero_loss() {
        let teacher = rand_pyramids(&[0, 1], 2, &DIMS, 11);
        let labels = rand_labels(2, 4, 12);
        let plan = PermutationPlan::identity(2);
        let loss = prototype_loss(
            &teacher,
            &teacher,
            &labels,
            4,
            2,
            &plan,
            PrototypeMode::Single,
        )
        .unwrap();
        assert!(loss.abs() < 1e-7, "{loss}");

        let hybrid = prototype_loss(
            &teacher,
            &teacher,
            &labels,
            4,
            2,
            &plan,
            PrototypeMode::Hybrid,
        )
        .unwrap();
        assert_eq!(
            loss, hybrid,
            "identity permutation must coincide with single"
        );
    }

    #[test]
    fn loss_matches_bruteforce_oracle() {
        let mut rng = crate::rng::stream(13, &[0]);
        for trial in 0..10 {
            let student = rand_pyramids(&[0, 1], 2, &DIMS, 100 + trial);
            let teacher = rand_pyramids(&[0, 1], 2, &DIMS, 200 + trial);
            let labels = rand_labels(2, 4, 300 + trial);
            let plan = sample_permutation(2, &mut rng, PermGranularity::PerBatch, false);
            for (mode, hybrid) in [
                (PrototypeMode::Hybrid, true),
                (PrototypeMode::Single, false),
            ] {
                let got = prototype_loss(&student, &teacher, &labels, 4, 2, &plan, mode).unwrap();
                let want = hpdm_oracle(&student, &teacher, &labels, 4, &plan, hybrid);
                assert!(
                    (got - want).abs() <= 1e-6 * want.abs().max(1.0),
                    "trial {trial}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn teacher_must_be_full_modality() {
        let student = rand_pyramids(&[0], 1, &DIMS, 14);
        let teacher = rand_pyramids(&[0], 1, &DIMS, 15);
        let labels = rand_labels(1, 4, 16);
        let plan = PermutationPlan::identity(1);
        let err = prototype_loss(
            &student,
            &teacher,
            &labels,
            4,
            2,
            &plan,
            PrototypeMode::Single,
        );
        assert!(matches!(err, Err(MmkdError::Contract(_))));
    }

    #[test]
    fn hybrid_marginal_equals_enumerated_pairings() {
        // for M = 3, averaging the loss over all 3! permutation plans equals
        // the average over all single-pairing assignments
        let student = rand_pyramids(&[0, 1, 2], 1, &DIMS, 17);
        let teacher = rand_pyramids(&[0, 1, 2], 1, &DIMS, 18);
        let labels = rand_labels(1, 4, 19);
        let perms: Vec<Vec<usize>> = vec![
            vec![0, 1, 2],
            vec![0, 2, 1],
            vec![1, 0, 2],
            vec![1, 2, 0],
            vec![2, 0, 1],
            vec![2, 1, 0],
        ];
        let mut avg_hybrid = 0.0;
        let mut avg_pairing = 0.0;
        for p in &perms {
            let plan = PermutationPlan {
                per_stage: [p.clone(), p.clone(), p.clone(), p.clone()],
            };
            avg_hybrid += prototype_loss(
                &student,
                &teacher,
                &labels,
                4,
                3,
                &plan,
                PrototypeMode::Hybrid,
            )
            .unwrap();
            avg_pairing += hpdm_oracle(&student, &teacher, &labels, 4, &plan, true);
        }
        avg_hybrid /= perms.len() as f64;
        avg_pairing /= perms.len() as f64;
        assert!((avg_hybrid - avg_pairing).abs() < 1e-5);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let teacher = rand_pyramids(
            &[0, 1],
            1,
            &[(3, 4, 4), (3, 2, 2), (4, 2, 2), (4, 1, 1)],
            20,
        );
        let labels = {
            let mut rng = crate::rng::stream(21, &[0]);
            ArrayD::from_shape_fn(IxDyn(&[1, 8, 8]), |_| rng.gen_range(0..3) as u8)
        };
        let plan = PermutationPlan {
            per_stage: [vec![1, 0], vec![1, 0], vec![1, 0], vec![1, 0]],
        };
        // perturb the stage-0 features of student modality 0
        let base = rand_pyramids(
            &[0, 1],
            1,
            &[(3, 4, 4), (3, 2, 2), (4, 2, 2), (4, 1, 1)],
            22,
        );
        let eval = |f0: &ArrayD<f64>| {
            let mut student = base.clone();
            student[0].1[0] = f0.clone();
            prototype_loss(
                &student,
                &teacher,
                &labels,
                3,
                2,
                &plan,
                PrototypeMode::Hybrid,
            )
            .unwrap()
        };

        let mut tape = Tape::new();
        let mut sv = Vec::new();
        let mut target = None;
        for (mi, (m, stages)) in base.iter().enumerate() {
            let vars: StageVars = stages.iter().map(|s| tape.leaf(s.clone())).collect();
            if mi == 0 {
                target = Some(vars[0]);
            }
            sv.push((*m, vars));
        }
        let tv: Vec<(usize, StageVars)> = teacher
            .iter()
            .map(|(m, stages)| (*m, stages.iter().map(|s| tape.leaf(s.clone())).collect()))
            .collect();
        let loss = prototype_loss_on_tape(
            &mut tape,
            &sv,
            &tv,
            &labels,
            3,
            2,
            &plan,
            PrototypeMode::Hybrid,
        )
        .unwrap();
        let grads = tape.backward(loss);
        let fd = finite_difference(eval, &base[0].1[0], 1e-6);
        let err = max_rel_err(grads.get(target.unwrap()).unwrap(), &fd);
        assert!(err < 1e-4, "gradient error {err}");
    }
}
