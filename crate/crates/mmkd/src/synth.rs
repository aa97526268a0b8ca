//! Deterministic synthetic multi-modal segmentation scenes.
//!
//! Four modality analogs share one label grid per scene:
//!
//! - `rgb`   — dense; shapes filled with a class-keyed palette color plus
//!   texture noise.
//! - `depth` — dense; class-keyed base value with per-shape jitter and a
//!   vertical gradient.
//! - `event` — sparse; label-boundary edges with class-keyed intensity,
//!   everything else exactly zero.
//! - `lidar` — sparse; scanline subsample of the depth rendering, off-scan
//!   rows exactly zero.
//!
//! All tensors are H x W x 3 in [0,1]; sparse modalities replicate their
//! single channel. Generation is a pure function of (spec, split, index).

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::Rng;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{MmkdError, Result};
use crate::rmt::{self, RmtData};
use crate::rng;

pub const IGNORE_LABEL: u8 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Rgb,
    Depth,
    Event,
    Lidar,
}

impl Modality {
    pub const ALL: [Modality; 4] = [
        Modality::Rgb,
        Modality::Depth,
        Modality::Event,
        Modality::Lidar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Depth => "depth",
            Modality::Event => "event",
            Modality::Lidar => "lidar",
        }
    }

    /// Canonical single-letter name used in subset labels (e.g. `RDE`).
    pub fn initial(self) -> char {
        match self {
            Modality::Rgb => 'R',
            Modality::Depth => 'D',
            Modality::Event => 'E',
            Modality::Lidar => 'L',
        }
    }

    pub fn from_name(name: &str) -> Result<Modality> {
        match name {
            "rgb" => Ok(Modality::Rgb),
            "depth" => Ok(Modality::Depth),
            "event" => Ok(Modality::Event),
            "lidar" => Ok(Modality::Lidar),
            other => Err(MmkdError::Config(format!("unknown modality: {other}"))),
        }
    }

    /// Sparse modalities are mostly-zero by construction.
    pub fn is_sparse(self) -> bool {
        matches!(self, Modality::Event | Modality::Lidar)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub num_shapes: usize,
    /// Fraction of foreground training labels swapped to a wrong class,
    /// imitating annotation noise. Only the stored train labels are touched;
    /// modalities always depict the true scene and val labels stay clean.
    pub label_noise: f64,
    pub modalities: Vec<Modality>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            height: 64,
            width: 64,
            num_classes: 6,
            num_shapes: 5,
            label_noise: 0.0,
            modalities: Modality::ALL.to_vec(),
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(MmkdError::Config(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.num_classes as u32 >= IGNORE_LABEL as u32 {
            return Err(MmkdError::Config(
                "num_classes collides with ignore label".into(),
            ));
        }
        if self.height < 8 || self.width < 8 {
            return Err(MmkdError::Config("scene must be at least 8x8".into()));
        }
        if self.modalities.is_empty() {
            return Err(MmkdError::Config("modality list is empty".into()));
        }
        if self.num_shapes == 0 {
            return Err(MmkdError::Config("num_shapes must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(MmkdError::Config(format!(
                "label_noise must be in [0, 1], got {}",
                self.label_noise
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ModalitySample {
    /// Tensors in the order of the spec's modality list, each [H,W,3] in [0,1].
    pub tensors: Vec<(Modality, Array3<f32>)>,
    pub labels: Array2<u8>,
    pub case_tag: String,
}

impl ModalitySample {
    pub fn tensor(&self, m: Modality) -> Option<&Array3<f32>> {
        self.tensors.iter().find(|(mm, _)| *mm == m).map(|(_, t)| t)
    }
}

#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub seed: u64,
    pub files: Vec<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub root: PathBuf,
    pub split: String,
    pub entries: Vec<ManifestEntry>,
    /// Pixel counts per class over the whole split.
    pub class_histogram: Vec<u64>,
}

// ---------------------------------------------------------------------------
// scene synthesis

#[derive(Clone, Copy)]
enum ShapeKind {
    Circle,
    Rect,
    Diamond,
}

struct Shape {
    kind: ShapeKind,
    class: u8,
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    depth_jitter: f64,
}

fn class_color(class: u8, num_classes: usize) -> [f32; 3] {
    if class == 0 {
        return [0.2, 0.2, 0.2];
    }
    // evenly spaced hues, fixed saturation/value
    let h = (class as f64 - 1.0) / (num_classes as f64 - 1.0) * 6.0;
    let i = h.floor() as i64 % 6;
    let f = h - h.floor();
    let (v, p, q, t) = (0.85, 0.15, 0.85 - 0.7 * f, 0.15 + 0.7 * f);
    let (r, g, b) = match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r as f32, g as f32, b as f32]
}

fn class_depth(class: u8, num_classes: usize) -> f64 {
    0.15 + 0.7 * class as f64 / (num_classes as f64 - 1.0)
}

fn shape_contains(s: &Shape, y: usize, x: usize) -> bool {
    let dy = (y as f64 - s.cy) / s.ry;
    let dx = (x as f64 - s.cx) / s.rx;
    match s.kind {
        ShapeKind::Circle => dy * dy + dx * dx <= 1.0,
        ShapeKind::Rect => dy.abs() <= 1.0 && dx.abs() <= 1.0,
        ShapeKind::Diamond => dy.abs() + dx.abs() <= 1.0,
    }
}

/// Generates the shared label grid plus shape metadata for one sample.
fn generate_scene(spec: &SceneSpec, sample_seed: u64) -> (Array2<u8>, Vec<Shape>) {
    let (h, w) = (spec.height, spec.width);
    let c = spec.num_classes;
    let mut rng = rng::stream(sample_seed, &[rng::tag("scene")]);
    let mut shapes = Vec::with_capacity(spec.num_shapes);
    for s in 0..spec.num_shapes {
        // cycle classes so every class appears across a split; kind is drawn
        // independently of class so outline geometry carries no class signal
        let class = (1 + (sample_seed as usize % (c - 1) + s) % (c - 1)) as u8;
        let kind = match rng.gen_range(0..3u32) {
            0 => ShapeKind::Circle,
            1 => ShapeKind::Rect,
            _ => ShapeKind::Diamond,
        };
        let cy = rng.gen_range(0.15..0.85) * h as f64;
        let cx = rng.gen_range(0.15..0.85) * w as f64;
        let ry = rng.gen_range(0.08..0.22) * h as f64;
        let rx = rng.gen_range(0.08..0.22) * w as f64;
        let depth_jitter = rng.gen_range(-0.04..0.04);
        shapes.push(Shape {
            kind,
            class,
            cy,
            cx,
            ry,
            rx,
            depth_jitter,
        });
    }
    let mut labels = Array2::<u8>::zeros((h, w));
    let mut shape_idx = Array2::<i32>::from_elem((h, w), -1);
    for (si, s) in shapes.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                if shape_contains(s, y, x) {
                    labels[[y, x]] = s.class;
                    shape_idx[[y, x]] = si as i32;
                }
            }
        }
    }
    (labels, shapes)
}

fn render_rgb(spec: &SceneSpec, labels: &Array2<u8>, sample_seed: u64) -> Array3<f32> {
    let (h, w) = labels.dim();
    let mut rng = rng::stream(sample_seed, &[rng::tag("rgb")]);
    let mut out = Array3::<f32>::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let col = class_color(labels[[y, x]], spec.num_classes);
            for ch in 0..3 {
                let n: f32 = rng.gen_range(-0.08..0.08);
                out[[y, x, ch]] = (col[ch] + n).clamp(0.0, 1.0);
            }
        }
    }
    out
}

fn render_depth(
    spec: &SceneSpec,
    labels: &Array2<u8>,
    shapes: &[Shape],
    _sample_seed: u64,
) -> Array3<f32> {
    let (h, w) = labels.dim();
    let mut out = Array3::<f32>::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let class = labels[[y, x]];
            let mut v = class_depth(class, spec.num_classes);
            // jitter of the topmost shape covering this pixel
            if class != 0 {
                if let Some(s) = shapes
                    .iter()
                    .rev()
                    .find(|s| s.class == class && shape_contains(s, y, x))
                {
                    v += s.depth_jitter;
                }
            }
            v += 0.05 * (y as f64 / h as f64 - 0.5);
            let v = v.clamp(0.0, 1.0) as f32;
            for ch in 0..3 {
                out[[y, x, ch]] = v;
            }
        }
    }
    out
}

fn render_event(spec: &SceneSpec, labels: &Array2<u8>, sample_seed: u64) -> Array3<f32> {
    let (h, w) = labels.dim();
    let mut rng = rng::stream(sample_seed, &[rng::tag("event")]);
    // inner band of width EDGE_BAND along every label change; the band keeps
    // the pixel's own class intensity so edges stay class-pure
    const EDGE_BAND: i64 = 3;
    let mut out = Array3::<f32>::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let l = labels[[y, x]];
            if l == 0 {
                continue;
            }
            // sparse dotted band: half the boundary pixels fire, at
            // sample-specific positions, so the stream has no dense fixed
            // pattern a per-pixel objective could memorize
            let fire = rng.gen_range(0.0f32..1.0) < 0.5;
            if !fire {
                continue;
            }
            let mut boundary = false;
            'scan: for dy in -EDGE_BAND..=EDGE_BAND {
                for dx in -EDGE_BAND..=EDGE_BAND {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        boundary = true; // frame counts as a change
                        break 'scan;
                    }
                    if labels[[ny as usize, nx as usize]] != l {
                        boundary = true;
                        break 'scan;
                    }
                }
            }
            if boundary {
                // band carries a dim copy of the class color: the event
                // stream shares rgb's chromatic structure but at low
                // contrast, so it reads mainly through guided amplification
                let col = class_color(l, spec.num_classes);
                for ch in 0..3 {
                    out[[y, x, ch]] = (0.30 * col[ch]).max(1.0 / 255.0);
                }
            }
        }
    }
    out
}

fn render_lidar(
    spec: &SceneSpec,
    labels: &Array2<u8>,
    depth: &Array3<f32>,
    sample_seed: u64,
) -> Array3<f32> {
    let (h, w, _) = depth.dim();
    let mut rng = rng::stream(sample_seed, &[rng::tag("lidar")]);
    let phase: usize = rng.gen_range(0..12);
    let mut out = Array3::<f32>::zeros((h, w, 3));
    for y in 0..h {
        // three-row sweep bands survive the stride-4 stem
        if (y + phase) % 12 > 2 {
            continue;
        }
        for x in 0..w {
            // channel 0 carries dim range, channels 1-2 a dim return
            // intensity keyed like rgb chroma; off-scan rows stay exact zero
            let n: f32 = rng.gen_range(-0.03..0.03);
            let col = class_color(labels[[y, x]], spec.num_classes);
            out[[y, x, 0]] = (0.2 * depth[[y, x, 0]] + n).clamp(1.0 / 255.0, 1.0);
            for ch in 1..3 {
                out[[y, x, ch]] = (0.3 * col[ch] + n).clamp(1.0 / 255.0, 1.0);
            }
        }
    }
    out
}

/// Generates one sample. Pure in (spec, sample_seed).
pub fn generate_sample(spec: &SceneSpec, sample_seed: u64) -> Result<ModalitySample> {
    spec.validate()?;
    let (labels, shapes) = generate_scene(spec, sample_seed);
    let depth = render_depth(spec, &labels, &shapes, sample_seed);
    let mut tensors = Vec::with_capacity(spec.modalities.len());
    for &m in &spec.modalities {
        let t = match m {
            Modality::Rgb => render_rgb(spec, &labels, sample_seed),
            Modality::Depth => depth.clone(),
            Modality::Event => render_event(spec, &labels, sample_seed),
            Modality::Lidar => render_lidar(spec, &labels, &depth, sample_seed),
        };
        tensors.push((m, t));
    }
    Ok(ModalitySample {
        tensors,
        labels,
        case_tag: "normal".to_string(),
    })
}

/// Relabels a fraction of foreground pixels to a uniformly drawn wrong
/// foreground class. Deterministic in (labels, spec, sample_seed).
fn corrupt_labels(labels: &mut Array2<u8>, spec: &SceneSpec, sample_seed: u64) {
    let c = spec.num_classes as u8;
    if c < 3 {
        return; // with one foreground class there is no wrong class to draw
    }
    let mut rng = rng::stream(sample_seed, &[rng::tag("label-noise")]);
    for l in labels.iter_mut() {
        if *l == 0 {
            continue;
        }
        if rng.gen_range(0.0f64..1.0) < spec.label_noise {
            let offset = rng.gen_range(1..c - 1);
            *l = 1 + (*l - 1 + offset) % (c - 1);
        }
    }
}

// ---------------------------------------------------------------------------
// dataset i/o

fn sample_dir(root: &Path, split: &str, sample_id: &str) -> PathBuf {
    root.join(split).join(sample_id)
}

/// Writes one sample under `<root>/<split>/<sample_id>/`.
pub fn write_sample(
    root: &Path,
    split: &str,
    sample_id: &str,
    sample: &ModalitySample,
) -> Result<Vec<PathBuf>> {
    let dir = sample_dir(root, split, sample_id);
    fs::create_dir_all(&dir).map_err(|e| MmkdError::io(&dir, e))?;
    let mut files = Vec::new();
    for (m, t) in &sample.tensors {
        let path = dir.join(format!("{}.rmt", m.name()));
        rmt::write_file(&path, &RmtData::F32(t.clone().into_dyn()))?;
        files.push(path);
    }
    let label_path = dir.join("label.rmt");
    rmt::write_file(&label_path, &RmtData::U8(sample.labels.clone().into_dyn()))?;
    files.push(label_path);
    Ok(files)
}

/// Loads one sample, validating shapes and label range.
pub fn load_sample(
    root: &Path,
    split: &str,
    sample_id: &str,
    modalities: &[Modality],
    num_classes: usize,
) -> Result<ModalitySample> {
    let dir = sample_dir(root, split, sample_id);
    let label_path = dir.join("label.rmt");
    let labels = match rmt::read_file(&label_path)? {
        RmtData::U8(a) if a.ndim() == 2 => a,
        other => {
            return Err(MmkdError::format(
                &label_path,
                "shape",
                format!(
                    "expected u8 rank 2 labels, got dtype {} rank {}",
                    other.dtype_code(),
                    other.shape().len()
                ),
            ))
        }
    };
    for &v in labels.iter() {
        if v != IGNORE_LABEL && v as usize >= num_classes {
            return Err(MmkdError::format(
                &label_path,
                "label values",
                format!("label {v} outside [0,{num_classes}) and not ignore"),
            ));
        }
    }
    let (h, w) = (labels.shape()[0], labels.shape()[1]);
    let mut tensors = Vec::with_capacity(modalities.len());
    for &m in modalities {
        let path = dir.join(format!("{}.rmt", m.name()));
        let t = match rmt::read_file(&path)? {
            RmtData::F32(a) if a.shape() == [h, w, 3] => a,
            other => {
                return Err(MmkdError::format(
                    &path,
                    "shape",
                    format!("expected f32 [{h},{w},3], got {:?}", other.shape()),
                ))
            }
        };
        let t3 = t.into_dimensionality::<ndarray::Ix3>().unwrap();
        tensors.push((m, t3));
    }
    let labels = labels.into_dimensionality::<ndarray::Ix2>().unwrap();
    Ok(ModalitySample {
        tensors,
        labels,
        case_tag: "normal".to_string(),
    })
}

fn manifest_path(root: &Path) -> PathBuf {
    root.join("manifest.txt")
}

fn read_manifest_lines(root: &Path) -> Result<Vec<(String, u64)>> {
    let path = manifest_path(root);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(&path).map_err(|e| MmkdError::io(&path, e))?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let mut it = line.splitn(2, '\t');
        let id = it
            .next()
            .ok_or_else(|| MmkdError::format(&path, "sample_id", "missing"))?;
        let seed: u64 = it
            .next()
            .ok_or_else(|| MmkdError::format(&path, "seed", "missing"))?
            .parse()
            .map_err(|e| MmkdError::format(&path, "seed", format!("{e}")))?;
        out.push((id.to_string(), seed));
    }
    Ok(out)
}

/// Reads manifest entries whose sample id belongs to `split`.
pub fn split_sample_ids(root: &Path, split: &str) -> Result<Vec<(String, u64)>> {
    let prefix = format!("{split}_");
    Ok(read_manifest_lines(root)?
        .into_iter()
        .filter(|(id, _)| id.starts_with(&prefix))
        .collect())
}

/// Generates `count` samples for `split` under `root`.
///
/// Pure in (spec, count, split): regenerating with the same arguments is
/// byte-identical. Entries for other splits already in the manifest are kept.
pub fn generate_dataset(
    spec: &SceneSpec,
    count: usize,
    split: &str,
    root: &Path,
) -> Result<Manifest> {
    spec.validate()?;
    if count == 0 {
        return Err(MmkdError::Config("count must be >= 1".into()));
    }
    let split_tag = rng::tag(split);
    let mut entries = Vec::with_capacity(count);
    let mut histogram = vec![0u64; spec.num_classes];
    let mut seen = vec![false; spec.num_classes];
    for i in 0..count {
        let sample_seed: u64 = rand::Rng::gen(&mut rng::stream(spec.seed, &[split_tag, i as u64]));
        let mut sample = generate_sample(spec, sample_seed)?;
        // annotation noise on stored train labels only: the rendered
        // modalities keep depicting the true scene, and val stays clean so
        // checkpoint selection and evaluation see uncorrupted ground truth
        if split == "train" && spec.label_noise > 0.0 {
            corrupt_labels(&mut sample.labels, spec, sample_seed);
        }
        let sample_id = format!("{split}_{i:05}");
        let files = write_sample(root, split, &sample_id, &sample)?;
        for &v in sample.labels.iter() {
            if (v as usize) < spec.num_classes {
                histogram[v as usize] += 1;
                seen[v as usize] = true;
            }
        }
        entries.push(ManifestEntry {
            sample_id,
            seed: sample_seed,
            files,
        });
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(MmkdError::Config(format!(
            "class {missing} absent from split {split}; increase count or num_shapes"
        )));
    }

    // merge with entries from other splits, keyed and sorted by id
    let prefix = format!("{split}_");
    let mut merged: BTreeMap<String, u64> = read_manifest_lines(root)?
        .into_iter()
        .filter(|(id, _)| !id.starts_with(&prefix))
        .collect();
    for e in &entries {
        merged.insert(e.sample_id.clone(), e.seed);
    }
    let mut text = String::new();
    for (id, seed) in &merged {
        text.push_str(&format!("{id}\t{seed}\n"));
    }
    let mpath = manifest_path(root);
    fs::write(&mpath, text).map_err(|e| MmkdError::io(&mpath, e))?;

    Ok(Manifest {
        root: root.to_path_buf(),
        split: split.to_string(),
        entries,
        class_histogram: histogram,
    })
}

// ---------------------------------------------------------------------------
// adverse-condition cases

pub const CASE_NORMAL: &str = "normal";
pub const CASE_UNDER_EXPOSURE: &str = "under-exposure-analog";
pub const CASE_JITTER: &str = "jitter-analog";
pub const CASE_BLUR: &str = "blur-analog";

pub fn case_names() -> Vec<&'static str> {
    vec![CASE_NORMAL, CASE_UNDER_EXPOSURE, CASE_JITTER, CASE_BLUR]
}

fn box_blur3(t: &Array3<f32>) -> Array3<f32> {
    let (h, w, c) = t.dim();
    let mut out = Array3::<f32>::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut sum = 0.0;
                let mut n = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let yy = y as i64 + dy;
                        let xx = x as i64 + dx;
                        if yy >= 0 && yy < h as i64 && xx >= 0 && xx < w as i64 {
                            sum += t[[yy as usize, xx as usize, ch]];
                            n += 1.0;
                        }
                    }
                }
                out[[y, x, ch]] = sum / n;
            }
        }
    }
    out
}

/// Applies one named degradation. Labels are never touched; only the targeted
/// modality changes.
pub fn apply_case(sample: &ModalitySample, case: &str, seed: u64) -> Result<ModalitySample> {
    let mut out = sample.clone();
    out.case_tag = case.to_string();
    match case {
        CASE_NORMAL => {
            out.case_tag = CASE_NORMAL.to_string();
            Ok(out)
        }
        CASE_UNDER_EXPOSURE => {
            for (m, t) in &mut out.tensors {
                if *m == Modality::Rgb {
                    t.mapv_inplace(|v| v * 0.2);
                }
            }
            Ok(out)
        }
        CASE_JITTER => {
            let mut rng = rng::stream(seed, &[rng::tag("case-jitter")]);
            for (m, t) in &mut out.tensors {
                if *m == Modality::Lidar {
                    t.mapv_inplace(|v| {
                        if v > 0.0 {
                            let n: f32 = rng.gen_range(-0.1..0.1);
                            (v + n).clamp(1.0 / 255.0, 1.0)
                        } else {
                            v
                        }
                    });
                }
            }
            Ok(out)
        }
        CASE_BLUR => {
            for (m, t) in &mut out.tensors {
                if *m == Modality::Rgb {
                    *t = box_blur3(t);
                }
            }
            Ok(out)
        }
        other => Err(MmkdError::UnknownCase(other.to_string())),
    }
}

/// Converts a HWC f32 tensor to the CHW f64 layout the model consumes.
pub fn to_chw_f64(t: &Array3<f32>) -> ArrayD<f64> {
    let (h, w, c) = t.dim();
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[c, h, w]));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out[[ch, y, x]] = t[[y, x, ch]] as f64;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn spec(seed: u64) -> SceneSpec {
        SceneSpec {
            seed,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic_and_seed_sensitive() {
        let dir_a = TempDir::new().unwrap();
        let dir_b = TempDir::new().unwrap();
        let dir_c = TempDir::new().unwrap();
        let m_a = generate_dataset(&spec(7), 2, "train", dir_a.path()).unwrap();
        generate_dataset(&spec(7), 2, "train", dir_b.path()).unwrap();
        generate_dataset(&spec(8), 2, "train", dir_c.path()).unwrap();
        let mut any_diff = false;
        for e in &m_a.entries {
            for f in &e.files {
                let rel = f.strip_prefix(dir_a.path()).unwrap();
                let a = std::fs::read(f).unwrap();
                let b = std::fs::read(dir_b.path().join(rel)).unwrap();
                assert_eq!(a, b, "seed 7 regeneration differs at {rel:?}");
                let c = std::fs::read(dir_c.path().join(rel)).unwrap();
                if a != c {
                    any_diff = true;
                }
            }
        }
        assert!(any_diff, "seed 7 and seed 8 generated identical bytes");
    }

    #[test]
    fn manifest_lists_all_files_and_classes() {
        let dir = TempDir::new().unwrap();
        let m = generate_dataset(&spec(7), 2, "train", dir.path()).unwrap();
        assert_eq!(m.entries.len(), 2);
        for e in &m.entries {
            // 4 modality files + 1 label file
            assert_eq!(e.files.len(), 5);
        }
        assert!(m.class_histogram.iter().all(|&c| c > 0));
        let ids = split_sample_ids(dir.path(), "train").unwrap();
        assert_eq!(ids.len(), 2);
    }

    #[test]
    fn roundtrip_and_label_validation() {
        let dir = TempDir::new().unwrap();
        let s = spec(3);
        generate_dataset(&s, 1, "val", dir.path()).unwrap();
        let loaded =
            load_sample(dir.path(), "val", "val_00000", &s.modalities, s.num_classes).unwrap();
        let orig_seed = split_sample_ids(dir.path(), "val").unwrap()[0].1;
        let orig = generate_sample(&s, orig_seed).unwrap();
        assert_eq!(loaded.labels, orig.labels);
        for ((m1, t1), (m2, t2)) in loaded.tensors.iter().zip(orig.tensors.iter()) {
            assert_eq!(m1, m2);
            assert_eq!(t1, t2, "tensor mismatch for {}", m1.name());
        }

        // corrupt labels with an out-of-range value
        let lp = dir.path().join("val/val_00000/label.rmt");
        let mut labels = orig.labels.clone();
        labels[[0, 0]] = s.num_classes as u8 + 3;
        rmt::write_file(&lp, &RmtData::U8(labels.into_dyn())).unwrap();
        let err =
            load_sample(dir.path(), "val", "val_00000", &s.modalities, s.num_classes).unwrap_err();
        match err {
            MmkdError::Format { field, .. } => assert_eq!(field, "label values"),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn sparse_modalities_are_mostly_zero() {
        let s = spec(11);
        let sample = generate_sample(&s, 1234).unwrap();
        for (m, t) in &sample.tensors {
            if m.is_sparse() {
                let zeros = t.iter().filter(|&&v| v == 0.0).count();
                let frac = zeros as f64 / t.len() as f64;
                assert!(frac >= 0.5, "{} has only {frac:.2} zeros", m.name());
            }
        }
    }

    #[test]
    fn cases_are_targeted_and_deterministic() {
        let s = spec(5);
        let sample = generate_sample(&s, 99).unwrap();
        let normal = apply_case(&sample, CASE_NORMAL, 1).unwrap();
        for ((_, a), (_, b)) in normal.tensors.iter().zip(sample.tensors.iter()) {
            assert_eq!(a, b);
        }

        let under = apply_case(&sample, CASE_UNDER_EXPOSURE, 1).unwrap();
        let rgb0 = sample.tensor(Modality::Rgb).unwrap();
        let rgb1 = under.tensor(Modality::Rgb).unwrap();
        let mean0: f64 = rgb0.iter().map(|&v| v as f64).sum::<f64>() / rgb0.len() as f64;
        let mean1: f64 = rgb1.iter().map(|&v| v as f64).sum::<f64>() / rgb1.len() as f64;
        assert!((mean1 - 0.2 * mean0).abs() < 1e-6);

        let jit = apply_case(&sample, CASE_JITTER, 1).unwrap();
        for m in [Modality::Rgb, Modality::Depth, Modality::Event] {
            assert_eq!(jit.tensor(m).unwrap(), sample.tensor(m).unwrap());
        }
        let jit2 = apply_case(&sample, CASE_JITTER, 1).unwrap();
        assert_eq!(
            jit.tensor(Modality::Lidar).unwrap(),
            jit2.tensor(Modality::Lidar).unwrap()
        );
        assert_eq!(jit.labels, sample.labels);

        assert!(matches!(
            apply_case(&sample, "no-such-case", 1),
            Err(MmkdError::UnknownCase(_))
        ));
    }

    #[test]
    fn within_class_variance_is_below_cross_class_variance() {
        let s = spec(21);
        let sample = generate_sample(&s, 7).unwrap();
        // check the dense RGB analog: per-class mean pixel intensities separate
        let rgb = sample.tensor(Modality::Rgb).unwrap();
        let mut per_class: Vec<Vec<f64>> = vec![Vec::new(); s.num_classes];
        for y in 0..s.height {
            for x in 0..s.width {
                let l = sample.labels[[y, x]] as usize;
                let v = (rgb[[y, x, 0]] + rgb[[y, x, 1]] + rgb[[y, x, 2]]) as f64 / 3.0;
                per_class[l].push(v);
            }
        }
        let means: Vec<f64> = per_class
            .iter()
            .map(|v| v.iter().sum::<f64>() / v.len().max(1) as f64)
            .collect();
        let present: Vec<usize> = (0..s.num_classes)
            .filter(|&c| !per_class[c].is_empty())
            .collect();
        let grand = present.iter().map(|&c| means[c]).sum::<f64>() / present.len() as f64;
        let cross: f64 = present
            .iter()
            .map(|&c| (means[c] - grand).powi(2))
            .sum::<f64>()
            / present.len() as f64;
        for &c in &present {
            let within: f64 = per_class[c]
                .iter()
                .map(|v| (v - means[c]).powi(2))
                .sum::<f64>()
                / per_class[c].len() as f64;
            assert!(
                within < cross,
                "class {c}: within {within:.4} !< cross {cross:.4}"
            );
        }
    }
}
