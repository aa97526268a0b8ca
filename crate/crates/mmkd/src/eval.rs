//! Robustness metrics: mIoU, missing-modality scores (every non-empty
//! modality subset, averaged and probability-weighted), random pixel-masking
//! scores, and noisy-modality scores under Gaussian plus salt-and-pepper
//! corruption. Missing modalities are handled in two semantics: "drop"
//! excludes the modality from the fusion mean, "zero-fill" feeds zero tensors
//! through the encoder.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tape;
use crate::error::{MmkdError, Result};
use crate::model::SegModel;
use crate::rng;
use crate::synth::{Modality, ModalitySample, IGNORE_LABEL};

// ---------------------------------------------------------------------------
// confusion and mIoU

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    /// counts[gt][pred]
    pub counts: Array2<u64>,
    pub ignored: u64,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> ConfusionMatrix {
        ConfusionMatrix {
            counts: Array2::zeros((num_classes, num_classes)),
            ignored: 0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.counts.dim().0
    }

    pub fn update(&mut self, prediction: &Array2<u8>, labels: &Array2<u8>) -> Result<()> {
        if prediction.dim() != labels.dim() {
            return Err(MmkdError::Contract(format!(
                "prediction {:?} vs labels {:?} shape mismatch",
                prediction.dim(),
                labels.dim()
            )));
        }
        let c = self.num_classes();
        for (p, l) in prediction.iter().zip(labels.iter()) {
            if *l == IGNORE_LABEL {
                self.ignored += 1;
                continue;
            }
            if (*l as usize) >= c || (*p as usize) >= c {
                return Err(MmkdError::Contract(format!(
                    "label/prediction value out of range for {c} classes"
                )));
            }
            self.counts[[*l as usize, *p as usize]] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        self.counts += &other.counts;
        self.ignored += other.ignored;
    }

    pub fn total(&self) -> u64 {
        self.counts.sum() + self.ignored
    }

    /// Per-class IoU (None when the class appears in neither prediction nor
    /// ground truth) and the mean over counted classes, in percent.
    pub fn miou(&self) -> Result<(f64, Vec<Option<f64>>)> {
        let c = self.num_classes();
        let mut per_class = Vec::with_capacity(c);
        let mut sum = 0.0;
        let mut counted = 0usize;
        for k in 0..c {
            let tp = self.counts[[k, k]];
            let fp: u64 = (0..c).map(|g| self.counts[[g, k]]).sum::<u64>() - tp;
            let fn_: u64 = (0..c).map(|p| self.counts[[k, p]]).sum::<u64>() - tp;
            let denom = tp + fp + fn_;
            if denom == 0 {
                per_class.push(None);
            } else {
                let iou = tp as f64 / denom as f64;
                per_class.push(Some(iou));
                sum += iou;
                counted += 1;
            }
        }
        if counted == 0 {
            return Err(MmkdError::UndefinedMetric(
                "no class present in prediction or ground truth".into(),
            ));
        }
        Ok((100.0 * sum / counted as f64, per_class))
    }
}

/// mIoU over paired prediction/label grids.
pub fn miou(
    predictions: &[Array2<u8>],
    labels: &[Array2<u8>],
    num_classes: usize,
) -> Result<(f64, Vec<Option<f64>>)> {
    if predictions.len() != labels.len() {
        return Err(MmkdError::Contract(
            "prediction/label count mismatch".into(),
        ));
    }
    let mut cm = ConfusionMatrix::new(num_classes);
    for (p, l) in predictions.iter().zip(labels.iter()) {
        cm.update(p, l)?;
    }
    cm.miou()
}

// ---------------------------------------------------------------------------
// subsets and probabilities

/// Present-modality bitmasks for all 2^m - 1 non-empty subsets, ordered by
/// missing count (fewest missing first), then by mask.
pub fn subsets(num_modalities: usize) -> Vec<u32> {
    let mut masks: Vec<u32> = (1..(1u32 << num_modalities)).collect();
    masks.sort_by_key(|m| (num_modalities as u32 - m.count_ones(), *m));
    masks
}

/// Concatenated modality initials in canonical order, e.g. `RDE`.
pub fn subset_name(mask: u32, modalities: &[Modality]) -> String {
    modalities
        .iter()
        .enumerate()
        .filter(|(i, _)| mask & (1 << i) != 0)
        .map(|(_, m)| m.initial())
        .collect()
}

/// Probability weight p^k(1-p)^(n-k) for a subset with k missing modalities,
/// verbatim (the weights over k = 0..n-1 sum to 1 - p^n, not 1).
pub fn subset_probability(missing: usize, num_modalities: usize, p: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&p) {
        return Err(MmkdError::Config(format!(
            "missing ratio {p} outside [0,1)"
        )));
    }
    if missing >= num_modalities {
        return Err(MmkdError::Contract(format!(
            "missing count {missing} must be < modality count {num_modalities}"
        )));
    }
    Ok(p.powi(missing as i32) * (1.0 - p).powi((num_modalities - missing) as i32))
}

// ---------------------------------------------------------------------------
// evaluation specs

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Semantics {
    /// Missing modality excluded from the fusion mean.
    #[default]
    Drop,
    /// Missing modality replaced by zero tensors through the encoder.
    ZeroFill,
}

impl Semantics {
    pub fn name(self) -> &'static str {
        match self {
            Semantics::Drop => "drop",
            Semantics::ZeroFill => "zero-fill",
        }
    }

    pub fn from_name(name: &str) -> Result<Semantics> {
        match name {
            "drop" => Ok(Semantics::Drop),
            "zero-fill" => Ok(Semantics::ZeroFill),
            other => Err(MmkdError::Config(format!("unknown semantics '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub mu: f64,
    pub sigma: f64,
    /// Salt-and-pepper pixel fraction.
    pub density: f64,
    pub level_name: String,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.density) {
            return Err(MmkdError::Config(format!(
                "salt-and-pepper density {} outside [0,1]",
                self.density
            )));
        }
        if self.sigma < 0.0 {
            return Err(MmkdError::Config("noise sigma must be >= 0".into()));
        }
        Ok(())
    }

    pub fn level(name: &str) -> Result<NoiseSpec> {
        let (sigma, density) = match name {
            "low" => (0.05, 0.01),
            "mid" => (0.1, 0.05),
            "high" => (0.2, 0.1),
            other => return Err(MmkdError::Config(format!("unknown noise level '{other}'"))),
        };
        Ok(NoiseSpec {
            mu: 0.0,
            sigma,
            density,
            level_name: name.to_string(),
        })
    }

    pub fn levels() -> [&'static str; 3] {
        ["low", "mid", "high"]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSpec {
    pub missing_ratio: f64,
    pub semantics: Semantics,
    /// Divide expected scores by 1 - p^n to form a true expectation.
    pub renormalize: bool,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            missing_ratio: 0.2,
            semantics: Semantics::Drop,
            renormalize: false,
        }
    }
}

/// One sample ready for evaluation: full modality tensors [3,H,W] in
/// canonical modality order plus the label grid.
#[derive(Debug, Clone)]
pub struct EvalSample {
    pub tensors: Vec<ArrayD<f64>>,
    pub labels: Array2<u8>,
}

impl EvalSample {
    pub fn from_modality_sample(
        sample: &ModalitySample,
        modalities: &[Modality],
    ) -> Result<EvalSample> {
        let mut tensors = Vec::with_capacity(modalities.len());
        for m in modalities {
            let t = sample.tensor(*m).ok_or_else(|| {
                MmkdError::Contract(format!("sample lacks modality {}", m.name()))
            })?;
            tensors.push(crate::synth::to_chw_f64(t));
        }
        Ok(EvalSample {
            tensors,
            labels: sample.labels.clone(),
        })
    }
}

// ---------------------------------------------------------------------------
// model-driven scoring

/// Argmax class prediction for one sample's present inputs [3,H,W].
pub fn predict(model: &SegModel, inputs: &[(usize, ArrayD<f64>)]) -> Result<Array2<u8>> {
    let mut tape = Tape::new();
    let params = model.params_on_tape(&mut tape);
    let vars: Vec<(usize, crate::autodiff::Var)> = inputs
        .iter()
        .map(|(m, x)| {
            let mut shape = vec![1usize];
            shape.extend_from_slice(x.shape());
            let batched = x.clone().into_shape_with_order(IxDyn(&shape)).unwrap();
            (*m, tape.leaf(batched))
        })
        .collect();
    let (logits, _) = model.forward(&mut tape, &params, &vars)?;
    let l = tape.value(logits);
    let (c, h, w) = (l.shape()[1], l.shape()[2], l.shape()[3]);
    let mut out = Array2::<u8>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut best = 0usize;
            let mut best_v = l[[0, 0, i, j]];
            for k in 1..c {
                let v = l[[0, k, i, j]];
                if v > best_v {
                    best_v = v;
                    best = k;
                }
            }
            out[[i, j]] = best as u8;
        }
    }
    Ok(out)
}

fn zeros_like(x: &ArrayD<f64>) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(x.shape()))
}

/// Inputs for one present-mask under the chosen semantics.
fn build_inputs(sample: &EvalSample, mask: u32, semantics: Semantics) -> Vec<(usize, ArrayD<f64>)> {
    let mut inputs = Vec::new();
    for (m, t) in sample.tensors.iter().enumerate() {
        if mask & (1 << m) != 0 {
            inputs.push((m, t.clone()));
        } else if semantics == Semantics::ZeroFill {
            inputs.push((m, zeros_like(t)));
        }
    }
    inputs
}

/// Dataset mIoU with a per-sample input builder.
fn score_with<F>(model: &SegModel, samples: &[EvalSample], mut inputs_for: F) -> Result<f64>
where
    F: FnMut(usize, &EvalSample) -> Result<Vec<(usize, ArrayD<f64>)>>,
{
    let mut cm = ConfusionMatrix::new(model.config.num_classes);
    for (idx, s) in samples.iter().enumerate() {
        let inputs = inputs_for(idx, s)?;
        let pred = predict(model, &inputs)?;
        cm.update(&pred, &s.labels)?;
    }
    Ok(cm.miou()?.0)
}

fn aggregate(
    per_subset: &[(u32, f64)],
    num_modalities: usize,
    spec: &EvalSpec,
) -> Result<(f64, f64)> {
    let avg = per_subset.iter().map(|(_, v)| v).sum::<f64>() / per_subset.len() as f64;
    let mut expected = 0.0;
    for (mask, v) in per_subset {
        let missing = num_modalities - mask.count_ones() as usize;
        expected += subset_probability(missing, num_modalities, spec.missing_ratio)? * v;
    }
    if spec.renormalize {
        expected /= 1.0 - spec.missing_ratio.powi(num_modalities as i32);
    }
    Ok((avg, expected))
}

/// (average, expectation, per-subset mIoU keyed by present-mask).
pub type SubsetScores = (f64, f64, Vec<(u32, f64)>);

/// Missing-modality scores: mIoU per non-empty present subset, with the
/// unweighted average and the probability-weighted expectation.
pub fn emm_scores(
    model: &SegModel,
    samples: &[EvalSample],
    spec: &EvalSpec,
) -> Result<SubsetScores> {
    let m = model.config.num_modalities;
    let mut per_subset = Vec::new();
    for mask in subsets(m) {
        let v = score_with(model, samples, |_, s| {
            Ok(build_inputs(s, mask, spec.semantics))
        })?;
        per_subset.push((mask, v));
    }
    let (avg, expected) = aggregate(&per_subset, m, spec)?;
    Ok((avg, expected, per_subset))
}

/// Zero a fraction `p` of pixels (all channels) independently.
pub fn mask_pixels(x: &ArrayD<f64>, p: f64, rng: &mut impl Rng) -> ArrayD<f64> {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let mut out = x.clone();
    for i in 0..h {
        for j in 0..w {
            if rng.gen::<f64>() < p {
                for ch in 0..x.shape()[0] {
                    out[[ch, i, j]] = 0.0;
                }
            }
        }
    }
    out
}

/// Random-masking scores: for each subset role the complement modalities are
/// partially zeroed per pixel with probability `spec.missing_ratio`; all
/// modalities stay in the fusion.
pub fn rmm_scores(
    model: &SegModel,
    samples: &[EvalSample],
    spec: &EvalSpec,
    seed: u64,
) -> Result<SubsetScores> {
    let m = model.config.num_modalities;
    let tag = rng::tag("rmm");
    let mut per_subset = Vec::new();
    for mask in subsets(m) {
        let v = score_with(model, samples, |idx, s| {
            let mut inputs = Vec::with_capacity(m);
            for (mi, t) in s.tensors.iter().enumerate() {
                if mask & (1 << mi) != 0 {
                    inputs.push((mi, t.clone()));
                } else {
                    let mut r = rng::stream(seed, &[tag, mask as u64, idx as u64, mi as u64]);
                    inputs.push((mi, mask_pixels(t, spec.missing_ratio, &mut r)));
                }
            }
            Ok(inputs)
        })?;
        per_subset.push((mask, v));
    }
    let (avg, expected) = aggregate(&per_subset, m, spec)?;
    Ok((avg, expected, per_subset))
}

/// X_N = clamp(x + Gaussian(mu, sigma) + salt-and-pepper(density), 0, 1).
pub fn inject_noise(x: &ArrayD<f64>, noise: &NoiseSpec, rng: &mut impl Rng) -> Result<ArrayD<f64>> {
    noise.validate()?;
    let mut out = x.clone();
    if noise.sigma > 0.0 || noise.mu != 0.0 {
        let normal = Normal::new(noise.mu, noise.sigma)
            .map_err(|_| MmkdError::Config("invalid Gaussian noise parameters".into()))?;
        for v in out.iter_mut() {
            *v += normal.sample(rng);
        }
    }
    if noise.density > 0.0 {
        let (h, w) = (x.shape()[1], x.shape()[2]);
        for i in 0..h {
            for j in 0..w {
                if rng.gen::<f64>() < noise.density {
                    let value = if rng.gen::<bool>() { 1.0 } else { 0.0 };
                    for ch in 0..x.shape()[0] {
                        out[[ch, i, j]] = value;
                    }
                }
            }
        }
    }
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok(out)
}

/// Noisy-modality score: every modality corrupted, full presence.
pub fn nm_score(
    model: &SegModel,
    samples: &[EvalSample],
    noise: &NoiseSpec,
    seed: u64,
) -> Result<f64> {
    noise.validate()?;
    let tag = rng::tag("nm");
    score_with(model, samples, |idx, s| {
        let mut inputs = Vec::with_capacity(s.tensors.len());
        for (mi, t) in s.tensors.iter().enumerate() {
            let mut r = rng::stream(seed, &[tag, idx as u64, mi as u64]);
            inputs.push((mi, inject_noise(t, noise, &mut r)?));
        }
        Ok(inputs)
    })
}

// ---------------------------------------------------------------------------
// report

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub metadata: BTreeMap<String, String>,
    pub emm_avg: f64,
    pub emm_expected: f64,
    pub rmm_avg: f64,
    pub rmm_expected: f64,
    /// (level name, score) in low/mid/high order.
    pub nm: Vec<(String, f64)>,
    /// (subset name, mIoU) under missing semantics, canonical subset order.
    pub emm_subsets: Vec<(String, f64)>,
    /// (subset name, mIoU) under partial pixel masking.
    pub rmm_subsets: Vec<(String, f64)>,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.metadata {
            out.push_str(&format!("meta.{k}\t{v}\n"));
        }
        out.push_str(&format!("emm_avg\t{:.6}\n", self.emm_avg));
        out.push_str(&format!("emm_expected\t{:.6}\n", self.emm_expected));
        out.push_str(&format!("rmm_avg\t{:.6}\n", self.rmm_avg));
        out.push_str(&format!("rmm_expected\t{:.6}\n", self.rmm_expected));
        for (level, v) in &self.nm {
            out.push_str(&format!("nm_{level}\t{v:.6}\n"));
        }
        out.push_str("subset\tmiou\n");
        for (name, v) in &self.emm_subsets {
            out.push_str(&format!("{name}\t{v:.6}\n"));
        }
        out.push_str("rmm_subset\tmiou\n");
        for (name, v) in &self.rmm_subsets {
            out.push_str(&format!("{name}\t{v:.6}\n"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<EvalReport> {
        let mut report = EvalReport {
            metadata: BTreeMap::new(),
            emm_avg: f64::NAN,
            emm_expected: f64::NAN,
            rmm_avg: f64::NAN,
            rmm_expected: f64::NAN,
            nm: Vec::new(),
            emm_subsets: Vec::new(),
            rmm_subsets: Vec::new(),
        };
        // section 0: headers, 1: emm subsets, 2: rmm subsets
        let mut section = 0;
        let bad = |line: &str| MmkdError::Comparison(format!("malformed report line '{line}'"));
        for line in text.lines() {
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('\t').ok_or_else(|| bad(line))?;
            match (section, key) {
                (0, "subset") => section = 1,
                (1, "rmm_subset") => section = 2,
                (0, _) => {
                    if let Some(meta) = key.strip_prefix("meta.") {
                        report.metadata.insert(meta.to_string(), value.to_string());
                        continue;
                    }
                    let v: f64 = value.parse().map_err(|_| bad(line))?;
                    match key {
                        "emm_avg" => report.emm_avg = v,
                        "emm_expected" => report.emm_expected = v,
                        "rmm_avg" => report.rmm_avg = v,
                        "rmm_expected" => report.rmm_expected = v,
                        _ => {
                            if let Some(level) = key.strip_prefix("nm_") {
                                report.nm.push((level.to_string(), v));
                            } else {
                                return Err(bad(line));
                            }
                        }
                    }
                }
                (1, _) | (2, _) => {
                    let v: f64 = value.parse().map_err(|_| bad(line))?;
                    if section == 1 {
                        report.emm_subsets.push((key.to_string(), v));
                    } else {
                        report.rmm_subsets.push((key.to_string(), v));
                    }
                }
                _ => return Err(bad(line)),
            }
        }
        if report.emm_avg.is_nan() || report.emm_subsets.is_empty() {
            return Err(MmkdError::Comparison(
                "report missing required fields".into(),
            ));
        }
        Ok(report)
    }
}
