//! Run configuration: flat `key = value` text with dotted namespaces, every
//! key defaulted and overridable, hashed for run-directory naming.

use std::path::PathBuf;

use sha2::{Digest, Sha256};

use crate::distill::{
    DropoutKind, DropoutPolicy, KlDirection, LossWeights, PrototypeMode, RegularizerMode,
};
use crate::error::{MmkdError, Result};
use crate::eval::{EvalSpec, Semantics};
use crate::fisher::{PerturbationSpec, SigmaPolicy};
use crate::model::ModelConfig;
use crate::proto::PermGranularity;
use crate::synth::{Modality, SceneSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_root: PathBuf,

    pub data_root: PathBuf,
    pub data_height: usize,
    pub data_width: usize,
    pub data_num_shapes: usize,
    /// Fraction of foreground train labels swapped to a wrong class.
    pub data_label_noise: f64,
    pub data_train_count: usize,
    pub data_val_count: usize,

    pub model: ModelConfig,
    pub loss: LossWeights,

    pub dropout_kind: String,
    pub dropout_keep: f64,
    pub dropout_per_sample: bool,

    pub perturb_policy: String,
    pub perturb_sigma: f64,
    pub perturb_samples: usize,
    pub perturb_epsilon: f64,
    pub perturb_paired: bool,

    pub proto_granularity: String,
    pub proto_with_replacement: bool,

    pub eval_missing_ratio: f64,
    pub eval_semantics: String,
    pub eval_renormalize: bool,

    pub lr: f64,
    pub weight_decay: f64,
    /// Random horizontal/vertical flips during training.
    pub augment: bool,
    pub warmup_epochs: usize,
    pub poly_exponent: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_root: PathBuf::from("runs"),
            data_root: PathBuf::from("data"),
            data_height: 64,
            data_width: 64,
            data_num_shapes: 5,
            data_label_noise: 0.0,
            data_train_count: 200,
            data_val_count: 50,
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            dropout_kind: "uniform-subset".into(),
            dropout_keep: 0.5,
            dropout_per_sample: false,
            perturb_policy: "relative".into(),
            perturb_sigma: 0.5,
            perturb_samples: 4,
            perturb_epsilon: 1e-3,
            perturb_paired: true,
            proto_granularity: "per-batch".into(),
            proto_with_replacement: false,
            eval_missing_ratio: 0.2,
            eval_semantics: "drop".into(),
            eval_renormalize: false,
            lr: 2e-3,
            weight_decay: 0.01,
            augment: true,
            warmup_epochs: 10,
            poly_exponent: 0.9,
            epochs: 40,
            batch_size: 8,
        }
    }
}

fn parse_as<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| MmkdError::Config(format!("invalid value '{value}' for key '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(MmkdError::Config(format!(
            "invalid boolean '{value}' for key '{key}' (use true/false)"
        ))),
    }
}

fn parse_four(key: &str, value: &str) -> Result<[usize; 4]> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return Err(MmkdError::Config(format!(
            "key '{key}' needs 4 comma-separated values, got '{value}'"
        )));
    }
    let mut out = [0usize; 4];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = parse_as(key, p)?;
    }
    Ok(out)
}

impl RunConfig {
    /// Apply one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse_as(key, v)?,
            "out_root" => self.out_root = PathBuf::from(v),
            "data.root" => self.data_root = PathBuf::from(v),
            "data.height" => self.data_height = parse_as(key, v)?,
            "data.width" => self.data_width = parse_as(key, v)?,
            "data.num_shapes" => self.data_num_shapes = parse_as(key, v)?,
            "data.label_noise" => self.data_label_noise = parse_as(key, v)?,
            "data.train_count" => self.data_train_count = parse_as(key, v)?,
            "data.val_count" => self.data_val_count = parse_as(key, v)?,
            "model.stage_channels" => self.model.stage_channels = parse_four(key, v)?,
            "model.stage_strides" => self.model.stage_strides = parse_four(key, v)?,
            "model.num_classes" => self.model.num_classes = parse_as(key, v)?,
            "model.num_modalities" => self.model.num_modalities = parse_as(key, v)?,
            "model.decoder_dim" => self.model.decoder_dim = parse_as(key, v)?,
            "model.shared_encoder" => self.model.shared_encoder = parse_bool(key, v)?,
            "loss.lambda" => self.loss.lambda = parse_as(key, v)?,
            "loss.alpha" => self.loss.alpha = parse_as(key, v)?,
            "loss.beta" => self.loss.beta = parse_as(key, v)?,
            "loss.prototype_mode" => {
                self.loss.prototype_mode = match v {
                    "hybrid" => PrototypeMode::Hybrid,
                    "single" => PrototypeMode::Single,
                    "off" => PrototypeMode::Off,
                    _ => return Err(MmkdError::Config(format!("unknown prototype mode '{v}'"))),
                }
            }
            "loss.regularizer_mode" => {
                self.loss.regularizer_mode = match v {
                    "hybrid" => RegularizerMode::Hybrid,
                    "single" => RegularizerMode::Single,
                    "off" => RegularizerMode::Off,
                    _ => return Err(MmkdError::Config(format!("unknown regularizer mode '{v}'"))),
                }
            }
            "loss.kl_direction" => {
                self.loss.kl_direction = match v {
                    "teacher-student" => KlDirection::TeacherStudent,
                    "student-teacher" => KlDirection::StudentTeacher,
                    _ => return Err(MmkdError::Config(format!("unknown KL direction '{v}'"))),
                }
            }
            "dropout.kind" => match v {
                "uniform-subset" | "bernoulli" => self.dropout_kind = v.into(),
                _ => return Err(MmkdError::Config(format!("unknown dropout kind '{v}'"))),
            },
            "dropout.keep" => self.dropout_keep = parse_as(key, v)?,
            "dropout.per_sample" => self.dropout_per_sample = parse_bool(key, v)?,
            "perturb.policy" => match v {
                "relative" | "absolute" => self.perturb_policy = v.into(),
                _ => return Err(MmkdError::Config(format!("unknown sigma policy '{v}'"))),
            },
            "perturb.sigma" => self.perturb_sigma = parse_as(key, v)?,
            "perturb.samples" => self.perturb_samples = parse_as(key, v)?,
            "perturb.epsilon" => self.perturb_epsilon = parse_as(key, v)?,
            "perturb.paired" => self.perturb_paired = parse_bool(key, v)?,
            "proto.granularity" => match v {
                "per-batch" | "per-stage" => self.proto_granularity = v.into(),
                _ => return Err(MmkdError::Config(format!("unknown granularity '{v}'"))),
            },
            "proto.with_replacement" => self.proto_with_replacement = parse_bool(key, v)?,
            "eval.missing_ratio" => self.eval_missing_ratio = parse_as(key, v)?,
            "eval.semantics" => {
                Semantics::from_name(v)?;
                self.eval_semantics = v.into();
            }
            "eval.renormalize" => self.eval_renormalize = parse_bool(key, v)?,
            "optim.lr" => self.lr = parse_as(key, v)?,
            "optim.weight_decay" => self.weight_decay = parse_as(key, v)?,
            "optim.augment" => self.augment = parse_bool(key, v)?,
            "optim.warmup_epochs" => self.warmup_epochs = parse_as(key, v)?,
            "optim.poly_exponent" => self.poly_exponent = parse_as(key, v)?,
            "optim.epochs" => self.epochs = parse_as(key, v)?,
            "optim.batch_size" => self.batch_size = parse_as(key, v)?,
            _ => return Err(MmkdError::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Parse flat `key = value` text; `#` starts a comment.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut config = RunConfig::default();
        config.apply(text)?;
        Ok(config)
    }

    pub fn apply(&mut self, text: &str) -> Result<()> {
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                MmkdError::Config(format!("expected 'key = value', got '{line}'"))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Canonical serialization; parsing it back reproduces the config.
    pub fn to_text(&self) -> String {
        let join = |a: &[usize; 4]| {
            a.iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let proto_mode = match self.loss.prototype_mode {
            PrototypeMode::Hybrid => "hybrid",
            PrototypeMode::Single => "single",
            PrototypeMode::Off => "off",
        };
        let reg_mode = match self.loss.regularizer_mode {
            RegularizerMode::Hybrid => "hybrid",
            RegularizerMode::Single => "single",
            RegularizerMode::Off => "off",
        };
        let kl_dir = match self.loss.kl_direction {
            KlDirection::TeacherStudent => "teacher-student",
            KlDirection::StudentTeacher => "student-teacher",
        };
        format!(
            "seed = {}\n\
             out_root = {}\n\
             data.root = {}\n\
             data.height = {}\n\
             data.width = {}\n\
             data.num_shapes = {}\n\
             data.label_noise = {}\n\
             data.train_count = {}\n\
             data.val_count = {}\n\
             model.stage_channels = {}\n\
             model.stage_strides = {}\n\
             model.num_classes = {}\n\
             model.num_modalities = {}\n\
             model.decoder_dim = {}\n\
             model.shared_encoder = {}\n\
             loss.lambda = {}\n\
             loss.alpha = {}\n\
             loss.beta = {}\n\
             loss.prototype_mode = {}\n\
             loss.regularizer_mode = {}\n\
             loss.kl_direction = {}\n\
             dropout.kind = {}\n\
             dropout.keep = {}\n\
             dropout.per_sample = {}\n\
             perturb.policy = {}\n\
             perturb.sigma = {}\n\
             perturb.samples = {}\n\
             perturb.epsilon = {}\n\
             perturb.paired = {}\n\
             proto.granularity = {}\n\
             proto.with_replacement = {}\n\
             eval.missing_ratio = {}\n\
             eval.semantics = {}\n\
             eval.renormalize = {}\n\
             optim.lr = {}\n\
             optim.weight_decay = {}\n\
             optim.augment = {}\n\
             optim.warmup_epochs = {}\n\
             optim.poly_exponent = {}\n\
             optim.epochs = {}\n\
             optim.batch_size = {}\n",
            self.seed,
            self.out_root.display(),
            self.data_root.display(),
            self.data_height,
            self.data_width,
            self.data_num_shapes,
            self.data_label_noise,
            self.data_train_count,
            self.data_val_count,
            join(&self.model.stage_channels),
            join(&self.model.stage_strides),
            self.model.num_classes,
            self.model.num_modalities,
            self.model.decoder_dim,
            self.model.shared_encoder,
            self.loss.lambda,
            self.loss.alpha,
            self.loss.beta,
            proto_mode,
            reg_mode,
            kl_dir,
            self.dropout_kind,
            self.dropout_keep,
            self.dropout_per_sample,
            self.perturb_policy,
            self.perturb_sigma,
            self.perturb_samples,
            self.perturb_epsilon,
            self.perturb_paired,
            self.proto_granularity,
            self.proto_with_replacement,
            self.eval_missing_ratio,
            self.eval_semantics,
            self.eval_renormalize,
            self.lr,
            self.weight_decay,
            self.augment,
            self.warmup_epochs,
            self.poly_exponent,
            self.epochs,
            self.batch_size,
        )
    }

    /// First 12 hex digits of the SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_text().as_bytes());
        let digest = h.finalize();
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.dropout_policy()?.validate()?;
        if !self.data_height.is_multiple_of(self.model.stage_strides[3])
            || !self.data_width.is_multiple_of(self.model.stage_strides[3])
        {
            return Err(MmkdError::Config(format!(
                "data {}x{} not divisible by final stride {}",
                self.data_height, self.data_width, self.model.stage_strides[3]
            )));
        }
        if self.model.num_modalities > Modality::ALL.len() {
            return Err(MmkdError::Config(format!(
                "at most {} modalities supported",
                Modality::ALL.len()
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(MmkdError::Config(
                "epochs and batch_size must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn modalities(&self) -> Vec<Modality> {
        Modality::ALL[..self.model.num_modalities].to_vec()
    }

    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec {
            seed: self.seed,
            height: self.data_height,
            width: self.data_width,
            num_classes: self.model.num_classes,
            num_shapes: self.data_num_shapes,
            label_noise: self.data_label_noise,
            modalities: self.modalities(),
        }
    }

    pub fn dropout_policy(&self) -> Result<DropoutPolicy> {
        let kind = match self.dropout_kind.as_str() {
            "uniform-subset" => DropoutKind::UniformSubset,
            "bernoulli" => DropoutKind::Bernoulli {
                keep: self.dropout_keep,
            },
            other => return Err(MmkdError::Config(format!("unknown dropout kind '{other}'"))),
        };
        Ok(DropoutPolicy {
            kind,
            num_modalities: self.model.num_modalities,
            per_sample: self.dropout_per_sample,
        })
    }

    pub fn perturbation_spec(&self) -> Result<PerturbationSpec> {
        let sigma = match self.perturb_policy.as_str() {
            "relative" => SigmaPolicy::RelativeStd(self.perturb_sigma),
            "absolute" => SigmaPolicy::Absolute(self.perturb_sigma),
            other => return Err(MmkdError::Config(format!("unknown sigma policy '{other}'"))),
        };
        Ok(PerturbationSpec {
            sigma,
            samples: self.perturb_samples,
            epsilon: self.perturb_epsilon,
            paired_noise: self.perturb_paired,
        })
    }

    pub fn perm_granularity(&self) -> PermGranularity {
        match self.proto_granularity.as_str() {
            "per-stage" => PermGranularity::PerStage,
            _ => PermGranularity::PerBatch,
        }
    }

    pub fn eval_spec(&self) -> Result<EvalSpec> {
        Ok(EvalSpec {
            missing_ratio: self.eval_missing_ratio,
            semantics: Semantics::from_name(&self.eval_semantics)?,
            renormalize: self.eval_renormalize,
        })
    }
}
