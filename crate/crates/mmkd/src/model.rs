//! Tiny modality-agnostic hierarchical segmentation network.
//!
//! One encoder (weights shared across modalities by default) produces a
//! 4-stage feature pyramid per modality; fusion is the arithmetic mean over
//! present modalities; a lightweight decoder upsamples every fused stage to
//! stage-1 resolution, concatenates, projects and classifies.
//!
//! Each stage is a strided patch merge (space-to-depth + channel linear)
//! followed by two residual pointwise-mixing blocks with a smooth
//! nonlinearity. The distillation mechanism lives in the losses, not here.

use ndarray::{ArrayD, IxDyn};
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autodiff::{Tape, Var};
use crate::error::{MmkdError, Result};
use crate::rmt::{self, RmtData};
use crate::rng;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RSCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub stage_channels: [usize; 4],
    pub stage_strides: [usize; 4],
    pub num_classes: usize,
    pub num_modalities: usize,
    pub decoder_dim: usize,
    /// One weight set applied to every modality (default) vs. per-modality
    /// encoder weights.
    pub shared_encoder: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            stage_channels: [8, 16, 32, 64],
            stage_strides: [4, 8, 16, 32],
            num_classes: 6,
            num_modalities: 4,
            decoder_dim: 64,
            shared_encoder: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for w in self.stage_strides.windows(2) {
            if w[1] <= w[0] {
                return Err(MmkdError::Config(
                    "stage strides must be strictly increasing".into(),
                ));
            }
            if w[1] % w[0] != 0 {
                return Err(MmkdError::Config("each stride must divide the next".into()));
            }
        }
        if self.num_classes < 2 {
            return Err(MmkdError::Config("num_classes must be >= 2".into()));
        }
        if self.num_modalities == 0 {
            return Err(MmkdError::Config("num_modalities must be >= 1".into()));
        }
        Ok(())
    }

    /// Merge ratio of stage `i` relative to the previous stage.
    fn merge_ratio(&self, i: usize) -> usize {
        if i == 0 {
            self.stage_strides[0]
        } else {
            self.stage_strides[i] / self.stage_strides[i - 1]
        }
    }

    fn encoder_prefixes(&self) -> Vec<String> {
        if self.shared_encoder {
            vec!["enc".to_string()]
        } else {
            (0..self.num_modalities)
                .map(|m| format!("enc{m}"))
                .collect()
        }
    }

    fn prefix_for_modality(&self, modality_index: usize) -> String {
        if self.shared_encoder {
            "enc".to_string()
        } else {
            format!("enc{modality_index}")
        }
    }
}

/// Feature pyramid of one modality: tape vars for stages 1..4.
pub type Pyramid = Vec<Var>;

pub struct SegModel {
    pub config: ModelConfig,
    pub params: BTreeMap<String, ArrayD<f64>>,
}

/// Leaf vars of all parameters on a tape, keyed by parameter name.
pub struct TapeParams {
    vars: BTreeMap<String, Var>,
}

impl TapeParams {
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

impl SegModel {
    /// Fresh model with deterministic fan-in-scaled Gaussian init.
    pub fn new(config: ModelConfig, seed: u64) -> Result<SegModel> {
        config.validate()?;
        let mut params = BTreeMap::new();
        let mut rng = rng::stream(seed, &[rng::tag("init")]);
        let mut init = |name: String, shape: &[usize], fan_in: usize| {
            let std = (2.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).unwrap();
            let a = ArrayD::from_shape_fn(IxDyn(shape), |_| normal.sample(&mut rng));
            params.insert(name, a);
        };
        for prefix in config.encoder_prefixes() {
            let mut in_ch = 3;
            for i in 0..4 {
                let r = config.merge_ratio(i);
                let d = config.stage_channels[i];
                let merged = in_ch * r * r;
                init(format!("{prefix}.s{i}.merge.w"), &[d, merged], merged);
                init(format!("{prefix}.s{i}.merge.b"), &[d], merged);
                for blk in 0..2 {
                    init(format!("{prefix}.s{i}.mix{blk}.w1"), &[d, d], d);
                    init(format!("{prefix}.s{i}.mix{blk}.b1"), &[d], d);
                    init(format!("{prefix}.s{i}.mix{blk}.w2"), &[d, d], d);
                    init(format!("{prefix}.s{i}.mix{blk}.b2"), &[d], d);
                }
                in_ch = d;
            }
        }
        let sum_d: usize = config.stage_channels.iter().sum();
        init("dec.proj.w".into(), &[config.decoder_dim, sum_d], sum_d);
        init("dec.proj.b".into(), &[config.decoder_dim], sum_d);
        // small classifier init keeps initial logits near zero; fan-in scaled
        // init here saturates the softmax through the residual-grown features
        init(
            "dec.cls.w".into(),
            &[config.num_classes, config.decoder_dim],
            config.decoder_dim * 100,
        );
        init(
            "dec.cls.b".into(),
            &[config.num_classes],
            config.decoder_dim * 100,
        );
        Ok(SegModel { config, params })
    }

    /// Registers every parameter as a tape leaf.
    pub fn params_on_tape(&self, tape: &mut Tape) -> TapeParams {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
            .collect();
        TapeParams { vars }
    }

    /// Encodes one modality batch [B,3,H,W] into its 4-stage pyramid.
    pub fn encode_modality(
        &self,
        tape: &mut Tape,
        params: &TapeParams,
        input: Var,
        modality_index: usize,
    ) -> Result<Pyramid> {
        let shape = tape.value(input).shape().to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(MmkdError::Contract(format!(
                "encode_modality expects [B,3,H,W], got {shape:?}"
            )));
        }
        let (h, w) = (shape[2], shape[3]);
        let max_stride = self.config.stage_strides[3];
        if h % max_stride != 0 || w % max_stride != 0 {
            return Err(MmkdError::Contract(format!(
                "input {h}x{w} not divisible by final stride {max_stride}"
            )));
        }
        if tape.value(input).iter().any(|v| !v.is_finite()) {
            return Err(MmkdError::Contract("non-finite encoder input".into()));
        }
        let prefix = self.config.prefix_for_modality(modality_index);
        let mut x = input;
        let mut pyramid = Vec::with_capacity(4);
        for i in 0..4 {
            let r = self.config.merge_ratio(i);
            let merged = tape.space_to_depth(x, r);
            let w_m = params.get(&format!("{prefix}.s{i}.merge.w"));
            let b_m = params.get(&format!("{prefix}.s{i}.merge.b"));
            let mut h = tape.linear_chan(merged, w_m, b_m);
            for blk in 0..2 {
                let w1 = params.get(&format!("{prefix}.s{i}.mix{blk}.w1"));
                let b1 = params.get(&format!("{prefix}.s{i}.mix{blk}.b1"));
                let w2 = params.get(&format!("{prefix}.s{i}.mix{blk}.w2"));
                let b2 = params.get(&format!("{prefix}.s{i}.mix{blk}.b2"));
                let t1 = tape.linear_chan(h, w1, b1);
                let a1 = tape.silu(t1);
                let t2 = tape.linear_chan(a1, w2, b2);
                h = tape.add(h, t2);
            }
            pyramid.push(h);
            x = h;
        }
        Ok(pyramid)
    }

    /// Mean-fuses the present pyramids and decodes to [B,C,H,W] logits.
    pub fn fuse_and_decode(
        &self,
        tape: &mut Tape,
        params: &TapeParams,
        pyramids: &[Pyramid],
    ) -> Result<Var> {
        if pyramids.is_empty() {
            return Err(MmkdError::Contract("no present modalities to fuse".into()));
        }
        let mut fused = Vec::with_capacity(4);
        for i in 0..4 {
            let stage: Vec<Var> = pyramids.iter().map(|p| p[i]).collect();
            fused.push(tape.mean_vars(&stage));
        }
        let s1 = self.config.stage_strides[0];
        let mut upsampled = Vec::with_capacity(4);
        for (i, f) in fused.iter().enumerate() {
            let factor = self.config.stage_strides[i] / s1;
            upsampled.push(if factor == 1 {
                *f
            } else {
                tape.upsample_nearest(*f, factor)
            });
        }
        let cat = tape.concat_chan(&upsampled);
        let p = tape.linear_chan(cat, params.get("dec.proj.w"), params.get("dec.proj.b"));
        let a = tape.silu(p);
        let logits = tape.linear_chan(a, params.get("dec.cls.w"), params.get("dec.cls.b"));
        // non-finite logits are possible after a diverged update; the caller
        // detects that from the loss. Bilinear here recovers sub-block
        // boundary precision that nearest upsampling cannot.
        Ok(tape.upsample_bilinear(logits, s1))
    }

    /// Full forward over the present modalities.
    ///
    /// `inputs` pairs each present modality index with its [B,3,H,W] tensor
    /// var. Returns the logits and the raw per-modality pyramids.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &TapeParams,
        inputs: &[(usize, Var)],
    ) -> Result<(Var, Vec<(usize, Pyramid)>)> {
        if inputs.is_empty() {
            return Err(MmkdError::Contract("empty presence mask".into()));
        }
        let mut pyramids = Vec::with_capacity(inputs.len());
        for &(m, x) in inputs {
            let p = self.encode_modality(tape, params, x, m)?;
            pyramids.push((m, p));
        }
        let only: Vec<Pyramid> = pyramids.iter().map(|(_, p)| p.clone()).collect();
        let logits = self.fuse_and_decode(tape, params, &only)?;
        Ok((logits, pyramids))
    }

    /// SHA-256 over all parameter bytes in name order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, a) in &self.params {
            h.update(name.as_bytes());
            for &v in a.iter() {
                h.update(v.to_le_bytes());
            }
        }
        let d = h.finalize();
        d.iter().map(|b| format!("{b:02x}")).collect()
    }

    // -- checkpoint i/o -----------------------------------------------------

    /// Saves weights, config and free-form metadata. Bit-exact roundtrip.
    pub fn save(&self, path: &Path, meta: &BTreeMap<String, String>) -> Result<()> {
        let f = File::create(path).map_err(|e| MmkdError::io(path, e))?;
        let mut w = BufWriter::new(f);
        let io = |e| MmkdError::io(path, e);
        w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(meta.len() as u32).to_le_bytes())
            .map_err(io)?;
        for (k, v) in meta {
            w.write_all(&(k.len() as u16).to_le_bytes()).map_err(io)?;
            w.write_all(k.as_bytes()).map_err(io)?;
            w.write_all(&(v.len() as u32).to_le_bytes()).map_err(io)?;
            w.write_all(v.as_bytes()).map_err(io)?;
        }
        let c = &self.config;
        for ch in c.stage_channels {
            w.write_all(&(ch as u32).to_le_bytes()).map_err(io)?;
        }
        for st in c.stage_strides {
            w.write_all(&(st as u32).to_le_bytes()).map_err(io)?;
        }
        w.write_all(&(c.num_classes as u32).to_le_bytes())
            .map_err(io)?;
        w.write_all(&(c.num_modalities as u32).to_le_bytes())
            .map_err(io)?;
        w.write_all(&(c.decoder_dim as u32).to_le_bytes())
            .map_err(io)?;
        w.write_all(&[c.shared_encoder as u8]).map_err(io)?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())
            .map_err(io)?;
        for (name, a) in &self.params {
            w.write_all(&(name.len() as u16).to_le_bytes())
                .map_err(io)?;
            w.write_all(name.as_bytes()).map_err(io)?;
            rmt::write_record(&mut w, &RmtData::F64(a.clone()), path)?;
        }
        w.flush().map_err(io)
    }

    /// Loads a checkpoint; if `expected` is given, every config field must
    /// match, and the first mismatching field is named in the error.
    pub fn load(
        path: &Path,
        expected: Option<&ModelConfig>,
    ) -> Result<(SegModel, BTreeMap<String, String>)> {
        let f = File::open(path).map_err(|e| MmkdError::io(path, e))?;
        let mut r = BufReader::new(f);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|e| MmkdError::format(path, "magic", e.to_string()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(MmkdError::format(path, "magic", "not an RSCK checkpoint"));
        }
        let version = read_u16(&mut r, path, "version")?;
        if version != CHECKPOINT_VERSION {
            return Err(MmkdError::format(
                path,
                "version",
                format!("unsupported version {version}"),
            ));
        }
        let meta_n = read_u32(&mut r, path, "meta count")? as usize;
        let mut meta = BTreeMap::new();
        for _ in 0..meta_n {
            let klen = read_u16(&mut r, path, "meta key")? as usize;
            let k = read_string(&mut r, klen, path, "meta key")?;
            let vlen = read_u32(&mut r, path, "meta value")? as usize;
            let v = read_string(&mut r, vlen, path, "meta value")?;
            meta.insert(k, v);
        }
        let mut stage_channels = [0usize; 4];
        for ch in &mut stage_channels {
            *ch = read_u32(&mut r, path, "stage_channels")? as usize;
        }
        let mut stage_strides = [0usize; 4];
        for st in &mut stage_strides {
            *st = read_u32(&mut r, path, "stage_strides")? as usize;
        }
        let num_classes = read_u32(&mut r, path, "num_classes")? as usize;
        let num_modalities = read_u32(&mut r, path, "num_modalities")? as usize;
        let decoder_dim = read_u32(&mut r, path, "decoder_dim")? as usize;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)
            .map_err(|e| MmkdError::format(path, "shared_encoder", e.to_string()))?;
        let config = ModelConfig {
            stage_channels,
            stage_strides,
            num_classes,
            num_modalities,
            decoder_dim,
            shared_encoder: flag[0] != 0,
        };
        if let Some(exp) = expected {
            check_field(exp.num_classes, config.num_classes, "num_classes")?;
            check_field(exp.num_modalities, config.num_modalities, "num_modalities")?;
            check_field(exp.decoder_dim, config.decoder_dim, "decoder_dim")?;
            for i in 0..4 {
                check_field(
                    exp.stage_channels[i],
                    config.stage_channels[i],
                    "stage_channels",
                )?;
                check_field(
                    exp.stage_strides[i],
                    config.stage_strides[i],
                    "stage_strides",
                )?;
            }
            if exp.shared_encoder != config.shared_encoder {
                return Err(MmkdError::Incompatible {
                    field: "shared_encoder".into(),
                    msg: format!(
                        "expected {}, found {}",
                        exp.shared_encoder, config.shared_encoder
                    ),
                });
            }
        }
        let n_params = read_u32(&mut r, path, "param count")? as usize;
        let mut params = BTreeMap::new();
        for _ in 0..n_params {
            let nlen = read_u16(&mut r, path, "param name")? as usize;
            let name = read_string(&mut r, nlen, path, "param name")?;
            let data = rmt::read_record(&mut r, path)?;
            let a = data
                .as_f64()
                .ok_or_else(|| MmkdError::format(path, "param dtype", "expected f64 block"))?
                .clone();
            params.insert(name, a);
        }
        config.validate()?;
        Ok((SegModel { config, params }, meta))
    }
}

fn check_field(expected: usize, found: usize, name: &str) -> Result<()> {
    if expected != found {
        return Err(MmkdError::Incompatible {
            field: name.into(),
            msg: format!("expected {expected}, found {found}"),
        });
    }
    Ok(())
}

fn read_u16<R: Read>(r: &mut R, path: &Path, field: &str) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)
        .map_err(|e| MmkdError::format(path, field, e.to_string()))?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R, path: &Path, field: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| MmkdError::format(path, field, e.to_string()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R, len: usize, path: &Path, field: &str) -> Result<String> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|e| MmkdError::format(path, field, e.to_string()))?;
    String::from_utf8(buf).map_err(|e| MmkdError::format(path, field, e.to_string()))
}
