//! Two-stage training orchestration: teacher training on full modalities,
//! student training under modality dropout with prototype and Fisher
//! distillation, robustness evaluation, and report comparison.
//!
//! Every artifact in a run directory is a pure function of (config, seed):
//! sample order, dropout subsets, permutations and perturbation noise are all
//! drawn from stateless streams keyed by step, so an interrupted run resumed
//! from its last checkpoint reproduces the uninterrupted trajectory exactly.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::config::RunConfig;
use crate::distill::{sample_dropout_subset, KlDirection, PrototypeMode, RegularizerMode};
use crate::error::{MmkdError, Result};
use crate::eval::{self, EvalReport, EvalSample};
use crate::model::{Pyramid, SegModel};
use crate::optim::{AdamW, OptimConfig};
use crate::proto::{self};
use crate::rmt::{self, RmtData};
use crate::rng;
use crate::synth::{self, IGNORE_LABEL};

pub const TRAIN_LOG: &str = "train.log";
pub const VAL_LOG: &str = "val.log";
pub const CONFIG_FILE: &str = "config.txt";

// ---------------------------------------------------------------------------
// data

/// Generates the train and val splits for a config.
pub fn gen_data(config: &RunConfig) -> Result<()> {
    config.validate()?;
    let spec = config.scene_spec();
    synth::generate_dataset(&spec, config.data_train_count, "train", &config.data_root)?;
    synth::generate_dataset(&spec, config.data_val_count, "val", &config.data_root)?;
    Ok(())
}

/// Loads every sample of a split into memory, manifest order.
pub fn load_split(config: &RunConfig, split: &str) -> Result<Vec<EvalSample>> {
    let ids = synth::split_sample_ids(&config.data_root, split)?;
    if ids.is_empty() {
        return Err(MmkdError::Io {
            path: config.data_root.clone(),
            source: std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("no samples for split '{split}'; run gen-data first"),
            ),
        });
    }
    let modalities = config.modalities();
    let mut out = Vec::with_capacity(ids.len());
    for (id, _) in ids {
        let s = synth::load_sample(
            &config.data_root,
            split,
            &id,
            &modalities,
            config.model.num_classes,
        )?;
        out.push(EvalSample::from_modality_sample(&s, &modalities)?);
    }
    Ok(out)
}

/// Stacks chosen samples into per-modality [B,3,H,W] batches plus [B,H,W]
/// labels.
fn stack_batch(
    samples: &[EvalSample],
    indices: &[usize],
    num_modalities: usize,
) -> (Vec<ArrayD<f64>>, ArrayD<u8>) {
    let b = indices.len();
    let (h, w) = samples[indices[0]].labels.dim();
    let mut inputs = Vec::with_capacity(num_modalities);
    for m in 0..num_modalities {
        let mut x = ArrayD::zeros(IxDyn(&[b, 3, h, w]));
        for (bi, &si) in indices.iter().enumerate() {
            x.index_axis_mut(ndarray::Axis(0), bi)
                .assign(&samples[si].tensors[m]);
        }
        inputs.push(x);
    }
    let mut labels = ArrayD::from_elem(IxDyn(&[b, h, w]), IGNORE_LABEL);
    for (bi, &si) in indices.iter().enumerate() {
        labels
            .index_axis_mut(ndarray::Axis(0), bi)
            .assign(&samples[si].labels);
    }
    (inputs, labels)
}

/// Random horizontal/vertical flips, one independent draw per sample; all
/// modalities and the label grid flip together so geometry stays consistent.
fn augment_batch(inputs: &mut [ArrayD<f64>], labels: &mut ArrayD<u8>, seed: u64, step: u64) {
    use ndarray::{Axis, Slice};
    let b = labels.shape()[0];
    let mut r = rng::stream(seed, &[rng::tag("aug"), step]);
    for bi in 0..b {
        let flip_v: bool = r.gen();
        let flip_h: bool = r.gen();
        // sample axes: modality tensors are [3,H,W], labels [H,W]
        for (axis_x, axis_l, flip) in [(1, 0, flip_v), (2, 1, flip_h)] {
            if !flip {
                continue;
            }
            for x in inputs.iter_mut() {
                let mut view = x.index_axis_mut(Axis(0), bi);
                let flipped = view
                    .slice_axis(Axis(axis_x), Slice::new(0, None, -1))
                    .to_owned();
                view.assign(&flipped);
            }
            let mut view = labels.index_axis_mut(Axis(0), bi);
            let flipped = view
                .slice_axis(Axis(axis_l), Slice::new(0, None, -1))
                .to_owned();
            view.assign(&flipped);
        }
    }
}

// ---------------------------------------------------------------------------
// optimizer state i/o

const OPTIM_MAGIC: &[u8; 4] = b"RSOS";

fn save_optimizer(path: &Path, opt: &AdamW) -> Result<()> {
    let f = File::create(path).map_err(|e| MmkdError::io(path, e))?;
    let mut w = BufWriter::new(f);
    let io = |e| MmkdError::io(path, e);
    w.write_all(OPTIM_MAGIC).map_err(io)?;
    w.write_all(&opt.step.to_le_bytes()).map_err(io)?;
    w.write_all(&(opt.m.len() as u32).to_le_bytes())
        .map_err(io)?;
    for (name, m) in &opt.m {
        let v = &opt.v[name];
        w.write_all(&(name.len() as u16).to_le_bytes())
            .map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        rmt::write_record(&mut w, &RmtData::F64(m.clone()), path)?;
        rmt::write_record(&mut w, &RmtData::F64(v.clone()), path)?;
    }
    w.flush().map_err(io)
}

fn load_optimizer(path: &Path, config: OptimConfig) -> Result<AdamW> {
    let f = File::open(path).map_err(|e| MmkdError::io(path, e))?;
    let mut r = BufReader::new(f);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| MmkdError::format(path, "magic", e.to_string()))?;
    if &magic != OPTIM_MAGIC {
        return Err(MmkdError::format(
            path,
            "magic",
            "not an optimizer state file",
        ));
    }
    let mut buf8 = [0u8; 8];
    r.read_exact(&mut buf8)
        .map_err(|e| MmkdError::format(path, "step", e.to_string()))?;
    let step = u64::from_le_bytes(buf8);
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)
        .map_err(|e| MmkdError::format(path, "count", e.to_string()))?;
    let count = u32::from_le_bytes(buf4) as usize;
    let mut opt = AdamW::new(config)?;
    opt.step = step;
    for _ in 0..count {
        let mut buf2 = [0u8; 2];
        r.read_exact(&mut buf2)
            .map_err(|e| MmkdError::format(path, "name", e.to_string()))?;
        let nlen = u16::from_le_bytes(buf2) as usize;
        let mut nbuf = vec![0u8; nlen];
        r.read_exact(&mut nbuf)
            .map_err(|e| MmkdError::format(path, "name", e.to_string()))?;
        let name =
            String::from_utf8(nbuf).map_err(|e| MmkdError::format(path, "name", e.to_string()))?;
        let m = rmt::read_record(&mut r, path)?
            .as_f64()
            .ok_or_else(|| MmkdError::format(path, "moment dtype", "expected f64"))?
            .clone();
        let v = rmt::read_record(&mut r, path)?
            .as_f64()
            .ok_or_else(|| MmkdError::format(path, "moment dtype", "expected f64"))?
            .clone();
        opt.m.insert(name.clone(), m);
        opt.v.insert(name, v);
    }
    Ok(opt)
}

// ---------------------------------------------------------------------------
// training internals

struct StepBreakdown {
    ce: f64,
    kl: f64,
    proto: f64,
    reg: f64,
    total: f64,
}

/// Frozen teacher outputs for one batch, materialized as plain values.
struct TeacherOutputs {
    logits: ArrayD<f64>,
    /// Per modality index, 4 stage tensors [B,d,h,w].
    stages: Vec<(usize, Vec<ArrayD<f64>>)>,
}

fn teacher_forward(teacher: &SegModel, inputs: &[ArrayD<f64>]) -> Result<TeacherOutputs> {
    let mut tape = Tape::new();
    let params = teacher.params_on_tape(&mut tape);
    let vars: Vec<(usize, Var)> = inputs
        .iter()
        .enumerate()
        .map(|(m, x)| (m, tape.leaf(x.clone())))
        .collect();
    let (logits, pyramids) = teacher.forward(&mut tape, &params, &vars)?;
    let stages = pyramids
        .into_iter()
        .map(|(m, pyr)| (m, pyr.into_iter().map(|v| tape.value(v).clone()).collect()))
        .collect();
    Ok(TeacherOutputs {
        logits: tape.value(logits).clone(),
        stages,
    })
}

/// Writes the bool mask of non-ignored label pixels.
fn label_mask(labels: &ArrayD<u8>) -> ArrayD<bool> {
    labels.mapv(|v| v != IGNORE_LABEL)
}

#[allow(clippy::too_many_arguments)]
fn student_step(
    student: &SegModel,
    teacher: Option<&TeacherOutputs>,
    config: &RunConfig,
    inputs: &[ArrayD<f64>],
    labels: &ArrayD<u8>,
    subset: &[usize],
    step: u64,
) -> Result<(StepBreakdown, BTreeMap<String, ArrayD<f64>>)> {
    let mut tape = Tape::new();
    let params = student.params_on_tape(&mut tape);
    let vars: Vec<(usize, Var)> = subset
        .iter()
        .map(|&m| (m, tape.leaf(inputs[m].clone())))
        .collect();
    let (logits, pyramids) = student.forward(&mut tape, &params, &vars)?;
    if tape.value(logits).iter().any(|v| !v.is_finite()) {
        return Err(MmkdError::Divergence(format!(
            "non-finite logits at step {step}"
        )));
    }
    let (ce, _) = tape.ce_loss(logits, labels, IGNORE_LABEL)?;
    let mut total = ce;

    let weights = &config.loss;
    let mut kl_value = 0.0;
    let mut proto_value = 0.0;
    let mut reg_value = 0.0;
    if let Some(t) = teacher {
        if weights.lambda != 0.0 {
            let t_logits = tape.leaf(t.logits.clone());
            let mask = label_mask(labels);
            let kl = match weights.kl_direction {
                KlDirection::TeacherStudent => tape.kl_mean(logits, t_logits, 1, Some(&mask))?,
                KlDirection::StudentTeacher => {
                    let s = logits;
                    tape.kl_mean(t_logits, s, 1, Some(&mask))?
                }
            };
            kl_value = tape.value_scalar(kl);
            let weighted = tape.scale(kl, weights.lambda);
            total = tape.add(total, weighted);
        }

        let need_proto = weights.prototype_mode != PrototypeMode::Off;
        let need_reg = weights.regularizer_mode != RegularizerMode::Off;
        if need_proto || need_reg {
            let student_stages: Vec<(usize, Pyramid)> = pyramids;
            let teacher_stages: Vec<(usize, Vec<Var>)> = t
                .stages
                .iter()
                .map(|(m, stages)| (*m, stages.iter().map(|s| tape.leaf(s.clone())).collect()))
                .collect();
            let k = student_stages.len();
            let mut perm_rng = rng::stream(config.seed, &[rng::tag("perm"), step]);
            let plan = proto::sample_permutation(
                k,
                &mut perm_rng,
                config.perm_granularity(),
                config.proto_with_replacement,
            );
            if need_proto {
                let p = proto::prototype_loss_on_tape(
                    &mut tape,
                    &student_stages,
                    &teacher_stages,
                    labels,
                    config.model.num_classes,
                    config.model.num_modalities,
                    &plan,
                    weights.prototype_mode,
                )?;
                proto_value = tape.value_scalar(p);
                let weighted = tape.scale(p, weights.alpha);
                total = tape.add(total, weighted);
            }
            if need_reg {
                let noise_seed: u64 =
                    rng::stream(config.seed, &[rng::tag("rrm-noise"), step]).gen();
                let r = crate::fisher::rrm_loss_on_tape(
                    &mut tape,
                    &student_stages,
                    &teacher_stages,
                    &config.perturbation_spec()?,
                    weights.regularizer_mode,
                    &plan,
                    config.model.num_modalities,
                    noise_seed,
                )?;
                reg_value = tape.value_scalar(r);
                let weighted = tape.scale(r, weights.beta);
                total = tape.add(total, weighted);
            }
        }
    }

    let total_value = tape.value_scalar(total);
    if !total_value.is_finite() {
        return Err(MmkdError::Divergence(format!(
            "non-finite loss at step {step}"
        )));
    }
    let grads = tape.backward(total);
    let mut by_name = BTreeMap::new();
    for (name, var) in params.iter() {
        if let Some(g) = grads.get(*var) {
            by_name.insert(name.clone(), g.clone());
        }
    }
    Ok((
        StepBreakdown {
            ce: tape.value_scalar(ce),
            kl: kl_value,
            proto: proto_value,
            reg: reg_value,
            total: total_value,
        },
        by_name,
    ))
}

/// Runs one optimizer step over subset groups: each group of sample indices
/// shares one dropout draw, losses and gradients are averaged with weights
/// proportional to group size, so per-sample dropout reproduces the
/// per-sample mean of the batch.
#[allow(clippy::too_many_arguments)]
fn grouped_step(
    student: &SegModel,
    teacher: Option<&TeacherOutputs>,
    config: &RunConfig,
    inputs: &[ArrayD<f64>],
    labels: &ArrayD<u8>,
    groups: &[(Vec<usize>, Vec<usize>)],
    step: u64,
) -> Result<(StepBreakdown, BTreeMap<String, ArrayD<f64>>)> {
    use ndarray::Axis;
    let batch = labels.shape()[0];
    let mut agg = StepBreakdown {
        ce: 0.0,
        kl: 0.0,
        proto: 0.0,
        reg: 0.0,
        total: 0.0,
    };
    let mut agg_grads: BTreeMap<String, ArrayD<f64>> = BTreeMap::new();
    for (subset, idx) in groups {
        let w = idx.len() as f64 / batch as f64;
        let whole = idx.len() == batch;
        let g_inputs: Vec<ArrayD<f64>>;
        let g_labels: ArrayD<u8>;
        let g_teacher: Option<TeacherOutputs>;
        let (inp, lab, tch) = if whole {
            (inputs, labels, teacher)
        } else {
            g_inputs = inputs.iter().map(|x| x.select(Axis(0), idx)).collect();
            g_labels = labels.select(Axis(0), idx);
            g_teacher = teacher.map(|t| TeacherOutputs {
                logits: t.logits.select(Axis(0), idx),
                stages: t
                    .stages
                    .iter()
                    .map(|(m, st)| (*m, st.iter().map(|a| a.select(Axis(0), idx)).collect()))
                    .collect(),
            });
            (g_inputs.as_slice(), &g_labels, g_teacher.as_ref())
        };
        let (b, grads) = student_step(student, tch, config, inp, lab, subset, step)?;
        agg.ce += w * b.ce;
        agg.kl += w * b.kl;
        agg.proto += w * b.proto;
        agg.reg += w * b.reg;
        agg.total += w * b.total;
        for (name, g) in grads {
            match agg_grads.get_mut(&name) {
                Some(acc) => *acc = &*acc + &(g * w),
                None => {
                    agg_grads.insert(name, g * w);
                }
            }
        }
    }
    Ok((agg, agg_grads))
}

fn subset_tag(subset: &[usize], modalities: &[synth::Modality]) -> String {
    subset.iter().map(|&m| modalities[m].initial()).collect()
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng::stream(seed, &[rng::tag("order"), epoch as u64]);
    for i in (1..n).rev() {
        let j = r.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Per-epoch validation score used for best-checkpoint selection: the
/// unweighted mean mIoU over all non-empty modality subsets.
fn validation_score(model: &SegModel, val: &[EvalSample], config: &RunConfig) -> Result<f64> {
    let (avg, _, _) = eval::emm_scores(model, val, &config.eval_spec()?)?;
    Ok(avg)
}

pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub best_val: f64,
    pub final_checksum: String,
    pub first_loss: f64,
    pub final_loss: f64,
}

struct TrainSetup {
    train: Vec<EvalSample>,
    val: Vec<EvalSample>,
    steps_per_epoch: usize,
    optim: OptimConfig,
}

fn setup(config: &RunConfig) -> Result<TrainSetup> {
    config.validate()?;
    let train = load_split(config, "train")?;
    let val = load_split(config, "val")?;
    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    let total_steps = (config.epochs * steps_per_epoch) as u64;
    let warmup = ((config.warmup_epochs * steps_per_epoch) as u64).min(total_steps - 1);
    let mut optim = OptimConfig::new(config.lr, warmup, total_steps);
    optim.weight_decay = config.weight_decay;
    optim.poly_exponent = config.poly_exponent;
    Ok(TrainSetup {
        train,
        val,
        steps_per_epoch,
        optim,
    })
}

/// Common epoch loop for both stages. `teacher` is None for teacher training
/// (CE only, all modalities, no dropout).
#[allow(clippy::too_many_arguments)]
fn run_training(
    config: &RunConfig,
    run_dir: &Path,
    stage: &str,
    mut model: SegModel,
    teacher: Option<&SegModel>,
    teacher_meta: BTreeMap<String, String>,
    resume: Option<&Path>,
    stop_after_epoch: Option<usize>,
) -> Result<TrainOutcome> {
    let s = setup(config)?;
    fs::create_dir_all(run_dir).map_err(|e| MmkdError::io(run_dir, e))?;
    let config_path = run_dir.join(CONFIG_FILE);
    fs::write(&config_path, config.to_text()).map_err(|e| MmkdError::io(&config_path, e))?;

    let last_path = run_dir.join(format!("{stage}-last.rsck"));
    let best_path = run_dir.join(format!("{stage}-best.rsck"));
    let opt_path = run_dir.join(format!("{stage}-last.opt"));

    let mut opt = AdamW::new(s.optim)?;
    let mut start_epoch = 0usize;
    let mut best_val = f64::NEG_INFINITY;
    if let Some(ckpt) = resume {
        let (resumed, meta) = SegModel::load(ckpt, Some(&config.model))?;
        model = resumed;
        start_epoch = meta
            .get("epoch")
            .and_then(|v| v.parse::<usize>().ok())
            .map(|e| e + 1)
            .unwrap_or(0);
        best_val = meta
            .get("best_val")
            .and_then(|v| v.parse().ok())
            .unwrap_or(f64::NEG_INFINITY);
        let opt_file = ckpt.with_extension("opt");
        opt = load_optimizer(&opt_file, s.optim)?;
    }

    let teacher_checksum = teacher.map(|t| t.checksum());
    let modalities = config.modalities();
    let dropout = config.dropout_policy()?;
    let all: Vec<usize> = (0..config.model.num_modalities).collect();

    let mut train_log = String::new();
    let mut val_log = String::new();
    train_log.push_str("step\tce\tkl\tproto\treg\ttotal\tsubset\tlr\n");
    val_log.push_str("epoch\temm_avg\n");

    let mut first_loss = f64::NAN;
    let mut final_loss = f64::NAN;
    let mut meta_base = teacher_meta;
    meta_base.insert("stage".into(), stage.to_string());
    meta_base.insert("config_hash".into(), config.hash());

    // schedule and streams come from the full config, so stopping early and
    // resuming later replays the uninterrupted trajectory
    let end_epoch = match stop_after_epoch {
        Some(e) => config.epochs.min(e + 1),
        None => config.epochs,
    };
    for epoch in start_epoch..end_epoch {
        let order = epoch_order(config.seed, epoch, s.train.len());
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let step = (epoch * s.steps_per_epoch + bi) as u64;
            let (mut inputs, mut labels) =
                stack_batch(&s.train, chunk, config.model.num_modalities);
            if config.augment {
                augment_batch(&mut inputs, &mut labels, config.seed, step);
            }
            let t_out = match teacher {
                None => None,
                Some(t) => Some(teacher_forward(t, &inputs)?),
            };
            // each group shares one drawn subset; per-batch dropout is a
            // single group spanning the whole batch
            let groups: Vec<(Vec<usize>, Vec<usize>)> = if t_out.is_none() {
                vec![(all.clone(), (0..chunk.len()).collect())]
            } else {
                let mut drng = rng::stream(config.seed, &[rng::tag("dropout"), step]);
                if dropout.per_sample {
                    let mut by_subset: BTreeMap<Vec<usize>, Vec<usize>> = BTreeMap::new();
                    for i in 0..chunk.len() {
                        let subset = sample_dropout_subset(&dropout, &mut drng);
                        by_subset.entry(subset).or_default().push(i);
                    }
                    by_subset.into_iter().collect()
                } else {
                    let subset = sample_dropout_subset(&dropout, &mut drng);
                    vec![(subset, (0..chunk.len()).collect())]
                }
            };
            let lr = s.optim.lr_at(opt.step);
            let step_result = grouped_step(
                &model,
                t_out.as_ref(),
                config,
                &inputs,
                &labels,
                &groups,
                step,
            );
            let (breakdown, grads) = match step_result {
                Ok(v) => v,
                Err(MmkdError::Divergence(msg)) => {
                    // last-good checkpoint from the previous epoch stays put
                    let log_path = run_dir.join(TRAIN_LOG);
                    train_log.push_str(&format!("{step}\tdiverged\n"));
                    fs::write(&log_path, &train_log).map_err(|e| MmkdError::io(&log_path, e))?;
                    return Err(MmkdError::Divergence(msg));
                }
                Err(e) => return Err(e),
            };
            let tag = groups
                .iter()
                .map(|(s, _)| subset_tag(s, &modalities))
                .collect::<Vec<_>>()
                .join(",");
            if first_loss.is_nan() {
                first_loss = breakdown.total;
            }
            final_loss = breakdown.total;
            opt.apply(&mut model.params, &grads)?;
            train_log.push_str(&format!(
                "{step}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\t{:.8}\n",
                breakdown.ce,
                breakdown.kl,
                breakdown.proto,
                breakdown.reg,
                breakdown.total,
                tag,
                lr,
            ));
        }

        if let (Some(t), Some(sum)) = (teacher, teacher_checksum.as_ref()) {
            if &t.checksum() != sum {
                return Err(MmkdError::Contract(
                    "teacher parameters changed during student training".into(),
                ));
            }
        }

        let score = validation_score(&model, &s.val, config)?;
        val_log.push_str(&format!("{epoch}\t{score:.6}\n"));

        let mut meta = meta_base.clone();
        meta.insert("epoch".into(), epoch.to_string());
        meta.insert("step".into(), opt.step.to_string());
        if score > best_val {
            best_val = score;
        }
        meta.insert("best_val".into(), format!("{best_val:.6}"));
        model.save(&last_path, &meta)?;
        save_optimizer(&opt_path, &opt)?;
        if score == best_val {
            model.save(&best_path, &meta)?;
        }
        let log_path = run_dir.join(TRAIN_LOG);
        fs::write(&log_path, &train_log).map_err(|e| MmkdError::io(&log_path, e))?;
        let vpath = run_dir.join(VAL_LOG);
        fs::write(&vpath, &val_log).map_err(|e| MmkdError::io(&vpath, e))?;
    }

    Ok(TrainOutcome {
        run_dir: run_dir.to_path_buf(),
        last_checkpoint: last_path,
        best_checkpoint: best_path,
        best_val,
        final_checksum: model.checksum(),
        first_loss,
        final_loss,
    })
}

/// Stage one: CE-only training on all modalities. `stop_after_epoch`
/// interrupts the run after that epoch's checkpoint (resume replays the rest
/// exactly).
pub fn train_teacher(
    config: &RunConfig,
    run_dir: &Path,
    resume: Option<&Path>,
    stop_after_epoch: Option<usize>,
) -> Result<TrainOutcome> {
    let model = SegModel::new(config.model.clone(), config.seed)?;
    run_training(
        config,
        run_dir,
        "teacher",
        model,
        None,
        BTreeMap::new(),
        resume,
        stop_after_epoch,
    )
}

/// Stage two: fresh student distilled from a frozen teacher checkpoint.
pub fn train_student(
    config: &RunConfig,
    run_dir: &Path,
    teacher_checkpoint: &Path,
    resume: Option<&Path>,
    stop_after_epoch: Option<usize>,
) -> Result<TrainOutcome> {
    let (teacher, _) = SegModel::load(teacher_checkpoint, Some(&config.model))?;
    // the student draws a different init stream than the teacher did
    let model = SegModel::new(config.model.clone(), config.seed ^ rng::tag("student"))?;
    let mut meta = BTreeMap::new();
    meta.insert("teacher_checksum".into(), teacher.checksum());
    meta.insert(
        "teacher_checkpoint".into(),
        teacher_checkpoint.display().to_string(),
    );
    run_training(
        config,
        run_dir,
        "student",
        model,
        Some(&teacher),
        meta,
        resume,
        stop_after_epoch,
    )
}

/// Fresh run-directory name: `<unix-seconds>-<config-hash>`.
pub fn new_run_dir(config: &RunConfig) -> PathBuf {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    config.out_root.join(format!("{secs}-{}", config.hash()))
}

// ---------------------------------------------------------------------------
// evaluation and reports

/// Full robustness report for a checkpoint over one split.
pub fn evaluate(config: &RunConfig, checkpoint: &Path, split: &str) -> Result<EvalReport> {
    let (model, _) = SegModel::load(checkpoint, Some(&config.model))?;
    let samples = load_split(config, split)?;
    let spec = config.eval_spec()?;
    let modalities = config.modalities();
    let (emm_avg, emm_expected, emm_subsets) = eval::emm_scores(&model, &samples, &spec)?;
    let (rmm_avg, rmm_expected, rmm_subsets) =
        eval::rmm_scores(&model, &samples, &spec, config.seed)?;
    let mut nm = Vec::new();
    for level in eval::NoiseSpec::levels() {
        let noise = eval::NoiseSpec::level(level)?;
        nm.push((
            level.to_string(),
            eval::nm_score(&model, &samples, &noise, config.seed)?,
        ));
    }
    let name = |mask: u32| eval::subset_name(mask, &modalities);
    let mut metadata = BTreeMap::new();
    metadata.insert("checkpoint".into(), model.checksum());
    metadata.insert(
        "dataset".into(),
        format!("{}:{split}", config.data_root.display()),
    );
    metadata.insert("semantics".into(), spec.semantics.name().to_string());
    metadata.insert("missing_ratio".into(), format!("{}", spec.missing_ratio));
    metadata.insert("renormalize".into(), format!("{}", spec.renormalize));
    metadata.insert("seed".into(), format!("{}", config.seed));
    metadata.insert(
        "nm_levels".into(),
        "low=0.05/0.01 mid=0.1/0.05 high=0.2/0.1".into(),
    );
    Ok(EvalReport {
        metadata,
        emm_avg,
        emm_expected,
        rmm_avg,
        rmm_expected,
        nm,
        emm_subsets: emm_subsets.iter().map(|(m, v)| (name(*m), *v)).collect(),
        rmm_subsets: rmm_subsets.iter().map(|(m, v)| (name(*m), *v)).collect(),
    })
}

/// Side-by-side subset table with deltas against the first report and a mean
/// row. Reports must share a dataset and subset naming.
pub fn report_compare(reports: &[(String, EvalReport)]) -> Result<String> {
    if reports.is_empty() {
        return Err(MmkdError::Comparison("no reports given".into()));
    }
    let base = &reports[0].1;
    let dataset = base.metadata.get("dataset");
    for (name, r) in reports {
        if r.metadata.get("dataset") != dataset {
            return Err(MmkdError::Comparison(format!(
                "report '{name}' evaluates a different dataset"
            )));
        }
    }
    let subset_names: Vec<&String> = base.emm_subsets.iter().map(|(n, _)| n).collect();
    for (name, r) in reports.iter().skip(1) {
        for want in &subset_names {
            if !r.emm_subsets.iter().any(|(n, _)| n == *want) {
                return Err(MmkdError::Comparison(format!(
                    "report '{name}' is missing subset row '{want}'"
                )));
            }
        }
        if r.emm_subsets.len() != subset_names.len() {
            return Err(MmkdError::Comparison(format!(
                "report '{name}' has extra subset rows"
            )));
        }
    }

    let mut out = String::new();
    out.push_str("subset");
    for (name, _) in reports {
        out.push_str(&format!("\t{name}"));
    }
    for (name, _) in reports.iter().skip(1) {
        out.push_str(&format!("\td({name})"));
    }
    out.push('\n');
    let value_of = |r: &EvalReport, subset: &str| -> f64 {
        r.emm_subsets
            .iter()
            .find(|(n, _)| n == subset)
            .map(|(_, v)| *v)
            .unwrap()
    };
    for subset in &subset_names {
        out.push_str(subset);
        let base_v = value_of(base, subset);
        for (_, r) in reports {
            out.push_str(&format!("\t{:.2}", value_of(r, subset)));
        }
        for (_, r) in reports.iter().skip(1) {
            out.push_str(&format!("\t{:+.2}", value_of(r, subset) - base_v));
        }
        out.push('\n');
    }
    // mean row over subsets per report
    out.push_str("Mean");
    let mean_of = |r: &EvalReport| -> f64 {
        r.emm_subsets.iter().map(|(_, v)| v).sum::<f64>() / r.emm_subsets.len() as f64
    };
    let base_mean = mean_of(base);
    for (_, r) in reports {
        out.push_str(&format!("\t{:.2}", mean_of(r)));
    }
    for (_, r) in reports.iter().skip(1) {
        out.push_str(&format!("\t{:+.2}", mean_of(r) - base_mean));
    }
    out.push('\n');
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    /// Tiny end-to-end config: 8x8 scenes, 3 classes, 2 modalities.
    fn tiny_config(root: &Path, seed: u64) -> RunConfig {
        let mut c = RunConfig {
            seed,
            data_root: root.join("data"),
            out_root: root.join("runs"),
            ..RunConfig::default()
        };
        c.data_height = 16;
        c.data_width = 16;
        c.data_num_shapes = 3;
        c.data_train_count = 8;
        c.data_val_count = 4;
        c.model.num_classes = 3;
        c.model.num_modalities = 2;
        c.model.stage_channels = [4, 6, 8, 10];
        c.model.stage_strides = [2, 4, 8, 16];
        c.model.decoder_dim = 8;
        c.epochs = 2;
        c.warmup_epochs = 1;
        c.batch_size = 4;
        c.lr = 1e-2;
        c.perturb_samples = 1;
        c
    }

    #[test]
    fn teacher_smoke_learns_and_is_deterministic() {
        let tmp = TempDir::new().unwrap();
        let config = tiny_config(tmp.path(), 3);
        gen_data(&config).unwrap();

        let out_a = train_teacher(&config, &tmp.path().join("a"), None, None).unwrap();
        assert!(
            out_a.final_loss < out_a.first_loss,
            "no learning: {} -> {}",
            out_a.first_loss,
            out_a.final_loss
        );
        let out_b = train_teacher(&config, &tmp.path().join("b"), None, None).unwrap();
        assert_eq!(out_a.final_checksum, out_b.final_checksum);

        // artifacts byte-identical across reruns
        for f in [TRAIN_LOG, VAL_LOG, "teacher-last.rsck", "teacher-best.rsck"] {
            let a = fs::read(tmp.path().join("a").join(f)).unwrap();
            let b = fs::read(tmp.path().join("b").join(f)).unwrap();
            assert_eq!(a, b, "artifact {f} differs");
        }
    }

    #[test]
    fn augmentation_flips_inputs_and_labels_together() {
        use ndarray::Axis;
        // coordinate-coded pixels: any flip is a detectable permutation and
        // the label must always name the pixel the input came from
        let (b, h, w) = (4, 6, 5);
        let mut inputs = vec![ArrayD::zeros(IxDyn(&[b, 3, h, w]))];
        let mut labels = ArrayD::from_elem(IxDyn(&[b, h, w]), 0u8);
        for bi in 0..b {
            for y in 0..h {
                for x in 0..w {
                    let v = (y * w + x) as u8;
                    for c in 0..3 {
                        inputs[0][[bi, c, y, x]] = v as f64;
                    }
                    labels[[bi, y, x]] = v;
                }
            }
        }
        let orig_in = inputs[0].clone();
        let orig_lb = labels.clone();
        augment_batch(&mut inputs, &mut labels, 9, 2);
        let mut any_flipped = false;
        for bi in 0..b {
            for y in 0..h {
                for x in 0..w {
                    assert_eq!(inputs[0][[bi, 0, y, x]], labels[[bi, y, x]] as f64);
                }
            }
            any_flipped |= labels.index_axis(Axis(0), bi) != orig_lb.index_axis(Axis(0), bi);
        }
        assert!(any_flipped, "seeded draw produced no flips");
        // flips are involutions: replaying the same draws restores the batch
        augment_batch(&mut inputs, &mut labels, 9, 2);
        assert_eq!(inputs[0], orig_in);
        assert_eq!(labels, orig_lb);
    }

    #[test]
    fn student_full_loop_keeps_teacher_frozen() {
        let tmp = TempDir::new().unwrap();
        let mut config = tiny_config(tmp.path(), 4);
        config.epochs = 1;
        gen_data(&config).unwrap();
        let teacher = train_teacher(&config, &tmp.path().join("t"), None, None).unwrap();
        let before = fs::read(&teacher.last_checkpoint).unwrap();

        let out = train_student(
            &config,
            &tmp.path().join("s"),
            &teacher.last_checkpoint,
            None,
            None,
        )
        .unwrap();
        assert_ne!(out.final_checksum, teacher.final_checksum);
        assert_eq!(before, fs::read(&teacher.last_checkpoint).unwrap());

        // the student checkpoint records its teacher
        let (_, meta) = SegModel::load(&out.last_checkpoint, None).unwrap();
        let (t_model, _) = SegModel::load(&teacher.last_checkpoint, None).unwrap();
        assert_eq!(meta["teacher_checksum"], t_model.checksum());
        assert_eq!(meta["stage"], "student");

        // loss breakdown log has all columns
        let log = fs::read_to_string(out.run_dir.join(TRAIN_LOG)).unwrap();
        let header = log.lines().next().unwrap();
        assert_eq!(header, "step\tce\tkl\tproto\treg\ttotal\tsubset\tlr");
        let first = log.lines().nth(1).unwrap();
        assert_eq!(first.split('\t').count(), 8);
    }

    #[test]
    fn per_sample_dropout_matches_per_batch_when_subsets_agree() {
        let tmp = TempDir::new().unwrap();
        let mut config = tiny_config(tmp.path(), 6);
        config.epochs = 1;
        gen_data(&config).unwrap();
        let teacher = train_teacher(&config, &tmp.path().join("t"), None, None).unwrap();

        config.dropout_per_sample = true;
        let out = train_student(
            &config,
            &tmp.path().join("s"),
            &teacher.last_checkpoint,
            None,
            None,
        )
        .unwrap();
        assert!(out.final_loss.is_finite());
        // reruns stay byte-deterministic with grouped steps
        let out_b = train_student(
            &config,
            &tmp.path().join("s2"),
            &teacher.last_checkpoint,
            None,
            None,
        )
        .unwrap();
        assert_eq!(out.final_checksum, out_b.final_checksum);
        // per-sample draws differ from the per-batch stream
        config.dropout_per_sample = false;
        let per_batch = train_student(
            &config,
            &tmp.path().join("s3"),
            &teacher.last_checkpoint,
            None,
            None,
        )
        .unwrap();
        assert_ne!(out.final_checksum, per_batch.final_checksum);
    }

    #[test]
    fn ce_only_ablation_runs_without_distillation_terms() {
        let tmp = TempDir::new().unwrap();
        let mut config = tiny_config(tmp.path(), 5);
        config.epochs = 1;
        config.loss.lambda = 0.0;
        config.loss.prototype_mode = PrototypeMode::Off;
        config.loss.regularizer_mode = RegularizerMode::Off;
        gen_data(&config).unwrap();
        let teacher = train_teacher(&config, &tmp.path().join("t"), None, None).unwrap();
        let out = train_student(
            &config,
            &tmp.path().join("s"),
            &teacher.last_checkpoint,
            None,
            None,
        )
        .unwrap();
        let log = fs::read_to_string(out.run_dir.join(TRAIN_LOG)).unwrap();
        for line in log.lines().skip(1) {
            let cols: Vec<&str> = line.split('\t').collect();
            assert_eq!(cols[2], "0.000000", "kl column");
            assert_eq!(cols[3], "0.000000", "proto column");
            assert_eq!(cols[4], "0.000000", "reg column");
        }
    }

    #[test]
    fn resume_reproduces_the_uninterrupted_trajectory() {
        let tmp = TempDir::new().unwrap();
        let mut config = tiny_config(tmp.path(), 6);
        config.epochs = 3;
        gen_data(&config).unwrap();

        let full = train_teacher(&config, &tmp.path().join("full"), None, None).unwrap();

        // interrupt after epoch 1, then resume from the last checkpoint
        let part_dir = tmp.path().join("part");
        train_teacher(&config, &part_dir, None, Some(1)).unwrap();
        let resumed = train_teacher(
            &config,
            &part_dir,
            Some(&part_dir.join("teacher-last.rsck")),
            None,
        )
        .unwrap();
        assert_eq!(resumed.final_checksum, full.final_checksum);
    }

    #[test]
    fn evaluate_writes_consistent_reports() {
        let tmp = TempDir::new().unwrap();
        let mut config = tiny_config(tmp.path(), 7);
        config.epochs = 1;
        gen_data(&config).unwrap();
        let teacher = train_teacher(&config, &tmp.path().join("t"), None, None).unwrap();
        let report = evaluate(&config, &teacher.last_checkpoint, "val").unwrap();

        // 2 modalities -> 3 subset rows; full subset equals a direct score
        assert_eq!(report.emm_subsets.len(), 3);
        let (model, _) = SegModel::load(&teacher.last_checkpoint, None).unwrap();
        let samples = load_split(&config, "val").unwrap();
        let mut cm = eval::ConfusionMatrix::new(config.model.num_classes);
        for s in &samples {
            let inputs: Vec<(usize, ArrayD<f64>)> = s.tensors.iter().cloned().enumerate().collect();
            let pred = eval::predict(&model, &inputs).unwrap();
            cm.update(&pred, &s.labels).unwrap();
        }
        let direct = cm.miou().unwrap().0;
        assert_eq!(report.emm_subsets[0].1, direct);

        // reruns byte-identical
        let again = evaluate(&config, &teacher.last_checkpoint, "val").unwrap();
        assert_eq!(report.to_text(), again.to_text());
    }

    #[test]
    fn report_compare_table() {
        let mk = |shift: f64, dataset: &str| {
            let mut metadata = BTreeMap::new();
            metadata.insert("dataset".to_string(), dataset.to_string());
            EvalReport {
                metadata,
                emm_avg: 50.0 + shift,
                emm_expected: 51.0 + shift,
                rmm_avg: 52.0,
                rmm_expected: 53.0,
                nm: vec![],
                emm_subsets: vec![
                    ("RD".to_string(), 60.0 + shift),
                    ("R".to_string(), 40.0 + shift),
                    ("D".to_string(), 20.0 + shift),
                ],
                rmm_subsets: vec![],
            }
        };
        let a = mk(0.0, "d:val");
        let b = mk(2.5, "d:val");
        let table = report_compare(&[("base".into(), a.clone()), ("ours".into(), b)]).unwrap();
        assert!(table.contains("subset\tbase\tours\td(ours)"));
        assert!(table.contains("RD\t60.00\t62.50\t+2.50"));
        assert!(table.contains("Mean\t40.00\t42.50\t+2.50"));

        // identity: all deltas zero
        let same = report_compare(&[("x".into(), a.clone()), ("y".into(), a.clone())]).unwrap();
        for line in same.lines().skip(1) {
            assert!(line.ends_with("+0.00"), "{line}");
        }

        // mismatched dataset and missing subset are comparison errors
        let other = mk(0.0, "d:train");
        assert!(matches!(
            report_compare(&[("a".into(), a.clone()), ("b".into(), other)]),
            Err(MmkdError::Comparison(_))
        ));
        let mut missing = mk(0.0, "d:val");
        missing.emm_subsets.pop();
        let err = report_compare(&[("a".into(), a), ("b".into(), missing)]);
        match err {
            Err(MmkdError::Comparison(msg)) => assert!(msg.contains('D'), "{msg}"),
            other => panic!("expected comparison error, got {other:?}"),
        }
    }

    #[test]
    fn divergence_keeps_last_good_checkpoint() {
        let tmp = TempDir::new().unwrap();
        let mut config = tiny_config(tmp.path(), 8);
        config.epochs = 3;
        config.lr = 1e18; // guaranteed blow-up after the first updates
        gen_data(&config).unwrap();
        let dir = tmp.path().join("t");
        let err = train_teacher(&config, &dir, None, None);
        match err {
            Err(MmkdError::Divergence(_)) => {}
            other => panic!(
                "expected divergence, got {:?}",
                other.map(|o| o.final_checksum)
            ),
        }
        // a checkpoint from a completed epoch may exist; the log records the
        // diverged step either way
        let log = fs::read_to_string(dir.join(TRAIN_LOG)).unwrap();
        assert!(log.contains("diverged"));
    }

    #[test]
    fn missing_dataset_is_an_io_error() {
        let tmp = TempDir::new().unwrap();
        let config = tiny_config(tmp.path(), 9);
        let err = train_teacher(&config, &tmp.path().join("t"), None, None);
        assert!(matches!(err, Err(MmkdError::Io { .. })));
    }
}
