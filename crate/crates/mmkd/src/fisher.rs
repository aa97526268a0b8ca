//! Fisher-information feature regularizer.
//!
//! For each (stage, modality) pair the student and teacher stage features are
//! perturbed by a shared Gaussian draw, and a Monte-Carlo estimate of
//! integral of ‖∇_z KL(z_x, z_t)‖² under that perturbation is formed. The KL
//! is the pixel-mean channel KL of softmax-normalized features, so its
//! gradient with respect to z_x is (softmax(z_x) - softmax(z_t)) / P per
//! pixel in closed form; squaring and averaging that expression on the tape
//! keeps the whole regularizer first-order differentiable. Each estimate is
//! inverted with an ε stabilizer and the terms are summed over the four
//! stages and all modalities, then averaged over the batch.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{softmax_nd, Tape, Var};
use crate::distill::RegularizerMode;
use crate::error::{MmkdError, Result};
use crate::proto::{PermutationPlan, StageVars};
use crate::rng;

/// Noise scale resolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SigmaPolicy {
    Absolute(f64),
    /// Multiplier on the standard deviation of the student stage features,
    /// recomputed per batch.
    RelativeStd(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationSpec {
    pub sigma: SigmaPolicy,
    /// Monte-Carlo sample count S.
    pub samples: usize,
    /// Inverse stabilizer; each term is 1/(estimate + epsilon).
    pub epsilon: f64,
    /// Share each Gaussian draw between student and teacher.
    pub paired_noise: bool,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        PerturbationSpec {
            sigma: SigmaPolicy::RelativeStd(0.5),
            samples: 4,
            epsilon: 1e-3,
            paired_noise: true,
        }
    }
}

/// One (stage, modality) Fisher estimate.
#[derive(Debug, Clone, Copy)]
pub struct FisherTerm {
    /// Monte-Carlo mean of the squared gradient norm; ≥ 0.
    pub estimate: f64,
    /// Sample variance of the per-draw squared norms.
    pub variance: f64,
    /// 1/(estimate + ε), in (0, 1/ε].
    pub inverse: f64,
}

const SIGMA_FLOOR: f64 = 1e-9;

/// Resolve σ for one feature tensor; floored to keep the measure
/// non-degenerate on constant features.
pub fn resolve_sigma(spec: &PerturbationSpec, features: &ArrayD<f64>) -> f64 {
    match spec.sigma {
        SigmaPolicy::Absolute(s) => s,
        SigmaPolicy::RelativeStd(mult) => {
            let n = features.len() as f64;
            let mean = features.sum() / n;
            let var = features
                .iter()
                .map(|v| (v - mean) * (v - mean))
                .sum::<f64>()
                / n;
            // constant features have zero std; keep the measure non-degenerate
            (mult * var.sqrt()).max(SIGMA_FLOOR)
        }
    }
}

fn check_finite(name: &str, x: &ArrayD<f64>) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(MmkdError::Contract(format!("non-finite values in {name}")));
    }
    Ok(())
}

fn gaussian(shape: &[usize], sigma: f64, rng: &mut impl Rng) -> ArrayD<f64> {
    let normal = Normal::new(0.0, sigma).expect("sigma > 0");
    ArrayD::from_shape_fn(IxDyn(shape), |_| normal.sample(rng))
}

/// Draw S paired perturbations of a student/teacher feature pair.
pub fn perturb_features(
    f: &ArrayD<f64>,
    t: &ArrayD<f64>,
    spec: &PerturbationSpec,
    rng: &mut impl Rng,
) -> Result<Vec<(ArrayD<f64>, ArrayD<f64>)>> {
    if spec.samples == 0 {
        return Err(MmkdError::Contract(
            "perturbation sample count must be ≥ 1".into(),
        ));
    }
    if f.shape() != t.shape() {
        return Err(MmkdError::Contract(
            "student/teacher feature shape mismatch".into(),
        ));
    }
    check_finite("student features", f)?;
    check_finite("teacher features", t)?;
    let sigma = resolve_sigma(spec, f);
    if sigma <= 0.0 {
        return Err(MmkdError::Contract(
            "resolved noise sigma must be > 0".into(),
        ));
    }
    let mut out = Vec::with_capacity(spec.samples);
    for _ in 0..spec.samples {
        let noise = gaussian(f.shape(), sigma, rng);
        let tn = if spec.paired_noise {
            noise.clone()
        } else {
            gaussian(t.shape(), sigma, rng)
        };
        out.push((f + &noise, t + &tn));
    }
    Ok(out)
}

/// Squared norm of the KL gradient at one perturbed point [d, h, w]:
/// (1/P²)·Σ (softmax(z_x) - softmax(z_t))² over channels and pixels.
fn grad_norm_sq(zx: &ArrayD<f64>, zt: &ArrayD<f64>) -> f64 {
    let px = softmax_nd(zx, 0);
    let pt = softmax_nd(zt, 0);
    let pixels = (zx.len() / zx.shape()[0]) as f64;
    px.iter()
        .zip(pt.iter())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<f64>()
        / (pixels * pixels)
}

/// Monte-Carlo Fisher estimate for one feature pair [d, h, w].
pub fn fisher_term(
    f: &ArrayD<f64>,
    t: &ArrayD<f64>,
    spec: &PerturbationSpec,
    rng: &mut impl Rng,
) -> Result<FisherTerm> {
    let draws = perturb_features(f, t, spec, rng)?;
    let norms: Vec<f64> = draws.iter().map(|(zx, zt)| grad_norm_sq(zx, zt)).collect();
    let s = norms.len() as f64;
    let estimate = norms.iter().sum::<f64>() / s;
    let variance = norms
        .iter()
        .map(|v| (v - estimate) * (v - estimate))
        .sum::<f64>()
        / s;
    Ok(FisherTerm {
        estimate,
        variance,
        inverse: 1.0 / (estimate + spec.epsilon),
    })
}

/// One ε-inverted Fisher term on the tape, for a single-sample feature pair
/// [d, h, w] with precomputed noise draws.
fn fisher_inverse_on_tape(
    tape: &mut Tape,
    f: Var,
    t: Var,
    noises: &[(ArrayD<f64>, ArrayD<f64>)],
    epsilon: f64,
) -> Var {
    let shape = tape.value(f).shape().to_vec();
    let pixels = (shape.iter().product::<usize>() / shape[0]) as f64;
    let mut terms = Vec::with_capacity(noises.len());
    for (nf, nt) in noises {
        let nf_leaf = tape.leaf(nf.clone());
        let nt_leaf = tape.leaf(nt.clone());
        let zx = tape.add(f, nf_leaf);
        let zt = tape.add(t, nt_leaf);
        let px = tape.softmax_axis(zx, 0);
        let pt = tape.softmax_axis(zt, 0);
        let diff = tape.sub(px, pt);
        let sq = tape.mul(diff, diff);
        let total = tape.sum_all(sq);
        terms.push(tape.scale(total, 1.0 / (pixels * pixels)));
    }
    let estimate = tape.mean_vars(&terms);
    tape.recip_eps(estimate, epsilon)
}

const TAG_RRM: u64 = 0x72726d; // "rrm"

/// The keyed noise stream behind [`rrm_loss_on_tape`]; public so external
/// checks can regenerate the exact draws.
pub fn noise_stream(
    noise_seed: u64,
    n: usize,
    stage: usize,
    slot: usize,
) -> rand_chacha::ChaCha8Rng {
    rng::stream(noise_seed, &[TAG_RRM, n as u64, stage as u64, slot as u64])
}

/// Fisher regularizer on the tape.
///
/// `student` holds present modalities (sorted by modality index), `teacher`
/// all `num_modalities`. Teacher slot `j` pairs with student position
/// `j % k` (single) or `plan[stage][j % k]` (hybrid). Noise draws are keyed
/// by (noise_seed, sample, stage, teacher slot) so the loss is reproducible
/// and independently recomputable.
#[allow(clippy::too_many_arguments)]
pub fn rrm_loss_on_tape(
    tape: &mut Tape,
    student: &[(usize, StageVars)],
    teacher: &[(usize, StageVars)],
    spec: &PerturbationSpec,
    mode: RegularizerMode,
    plan: &PermutationPlan,
    num_modalities: usize,
    noise_seed: u64,
) -> Result<Var> {
    if mode == RegularizerMode::Off {
        return Err(MmkdError::Contract(
            "regularizer requested with mode off".into(),
        ));
    }
    if spec.samples == 0 {
        return Err(MmkdError::Contract(
            "perturbation sample count must be ≥ 1".into(),
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

    // σ per (stage, student position), from whole-batch student features
    let mut sigmas = vec![vec![0.0f64; k]; 4];
    for stage in 0..4 {
        for (pos, (_, pyr)) in student.iter().enumerate() {
            let values = tape.value(pyr[stage]);
            check_finite("student features", values)?;
            sigmas[stage][pos] = resolve_sigma(spec, values);
        }
    }
    for (_, pyr) in teacher {
        for stage in pyr.iter().take(4) {
            check_finite("teacher features", tape.value(*stage))?;
        }
    }

    let mut per_sample: Vec<Var> = Vec::with_capacity(batch);
    for n in 0..batch {
        let mut terms = Vec::with_capacity(4 * num_modalities);
        for stage in 0..4 {
            for (j, (_, tpyr)) in teacher.iter().enumerate() {
                let spos = match mode {
                    RegularizerMode::Hybrid => plan.per_stage[stage][j % k],
                    RegularizerMode::Single => j % k,
                    RegularizerMode::Off => unreachable!(),
                };
                let f = tape.index_batch(student[spos].1[stage], n);
                let t = tape.index_batch(tpyr[stage], n);
                let shape = tape.value(f).shape().to_vec();
                if tape.value(t).shape() != shape.as_slice() {
                    return Err(MmkdError::Contract(
                        "student/teacher stage resolution mismatch".into(),
                    ));
                }
                let sigma = sigmas[stage][spos];
                let mut nrng = noise_stream(noise_seed, n, stage, j);
                let mut noises = Vec::with_capacity(spec.samples);
                for _ in 0..spec.samples {
                    let nf = gaussian(&shape, sigma, &mut nrng);
                    let nt = if spec.paired_noise {
                        nf.clone()
                    } else {
                        gaussian(&shape, sigma, &mut nrng)
                    };
                    noises.push((nf, nt));
                }
                terms.push(fisher_inverse_on_tape(tape, f, t, &noises, spec.epsilon));
            }
        }
        let mut acc = terms[0];
        for term in &terms[1..] {
            acc = tape.add(acc, *term);
        }
        per_sample.push(acc);
    }
    Ok(tape.mean_vars(&per_sample))
}

/// Plain-value regularizer over borrowed stage tensors [B, d, h, w].
pub fn rrm_loss(
    student: &[(usize, Vec<ArrayD<f64>>)],
    teacher: &[(usize, Vec<ArrayD<f64>>)],
    spec: &PerturbationSpec,
    mode: RegularizerMode,
    plan: &PermutationPlan,
    num_modalities: usize,
    noise_seed: u64,
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
    let loss = rrm_loss_on_tape(
        &mut tape,
        &sv,
        &tv,
        spec,
        mode,
        plan,
        num_modalities,
        noise_seed,
    )?;
    Ok(tape.value_scalar(loss))
}

/// Pixel-mean channel KL of softmax-normalized features, KL(P(t) ‖ P(x)).
pub fn feature_kl(zx: &ArrayD<f64>, zt: &ArrayD<f64>) -> f64 {
    let px = softmax_nd(zx, 0);
    let pt = softmax_nd(zt, 0);
    let pixels = (zx.len() / zx.shape()[0]) as f64;
    pt.iter()
        .zip(px.iter())
        .map(|(&a, &b)| a * (a.ln() - b.ln()))
        .sum::<f64>()
        / pixels
}

/// Diagnostic for the Gaussian Poincaré direction: Monte-Carlo estimates of
/// Var_μ(KL) and of σ²·E_μ‖∇KL‖² under μ = N(f, σ²I) with the teacher point
/// perturbed by the same draw. Not part of any training loss.
pub fn variance_bound(
    f: &ArrayD<f64>,
    t: &ArrayD<f64>,
    sigma: f64,
    samples: usize,
    rng: &mut impl Rng,
) -> (f64, f64) {
    let mut kls = Vec::with_capacity(samples);
    let mut grad_sum = 0.0;
    for _ in 0..samples {
        let noise = gaussian(f.shape(), sigma, rng);
        let zx = f + &noise;
        let zt = t + &noise;
        kls.push(feature_kl(&zx, &zt));
        grad_sum += grad_norm_sq(&zx, &zt);
    }
    let mean = kls.iter().sum::<f64>() / samples as f64;
    let var = kls.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / samples as f64;
    (var, sigma * sigma * grad_sum / samples as f64)
}
