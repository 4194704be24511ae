//! Synthetic multi-task scenes, partial-label protocols, and the on-disk
//! sample format.
//!
//! A scene is a fronto-parallel background plane with non-overlapping
//! geometric shapes in front of it. Each shape is a tilted plane, so the
//! segmentation, depth and surface-normal labels all derive from the same
//! geometry: class boundaries coincide with depth discontinuities.
//!
//! Layout under a dataset root:
//!
//! ```text
//! manifest.txt
//! <split>/<sample_id>/header.txt
//! <split>/<sample_id>/image.bin      f32 [3, H, W]
//! <split>/<sample_id>/task<k>.bin    i32 [H, W] or f32 [C, H, W]
//! ```
//!
//! All binary payloads are raw little-endian.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const MANIFEST_FORMAT: u32 = 1;
pub const MIN_SIDE: usize = 16;
/// Segmentation classes: background plus three shape families.
pub const SEG_CLASSES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Categorical,
    Regression,
}

/// What a task's labels mean; picks the loss and metric.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskRole {
    Segmentation,
    Depth,
    Normal,
    Saliency,
    Boundary,
}

impl TaskRole {
    pub const ALL: [TaskRole; 5] = [
        TaskRole::Segmentation,
        TaskRole::Depth,
        TaskRole::Normal,
        TaskRole::Saliency,
        TaskRole::Boundary,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskRole::Segmentation => "segmentation",
            TaskRole::Depth => "depth",
            TaskRole::Normal => "normal",
            TaskRole::Saliency => "saliency",
            TaskRole::Boundary => "boundary",
        }
    }

    pub fn from_name(s: &str) -> Option<TaskRole> {
        TaskRole::ALL.into_iter().find(|r| r.name() == s)
    }

    pub fn kind(self) -> TaskKind {
        match self {
            TaskRole::Depth | TaskRole::Normal => TaskKind::Regression,
            _ => TaskKind::Categorical,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskSpec {
    pub id: usize,
    pub role: TaskRole,
    pub kind: TaskKind,
    /// Label channels (1 for categorical class maps).
    pub channels: usize,
    /// Class count for categorical tasks, 0 for regression.
    pub classes: usize,
}

impl TaskSpec {
    pub fn for_role(id: usize, role: TaskRole) -> TaskSpec {
        let (channels, classes) = match role {
            TaskRole::Segmentation => (1, SEG_CLASSES),
            TaskRole::Depth => (1, 0),
            TaskRole::Normal => (3, 0),
            TaskRole::Saliency | TaskRole::Boundary => (1, 2),
        };
        TaskSpec {
            id,
            role,
            kind: role.kind(),
            channels,
            classes,
        }
    }

    /// Channels the prediction head emits.
    pub fn output_channels(&self) -> usize {
        match self.kind {
            TaskKind::Categorical => self.classes,
            TaskKind::Regression => self.channels,
        }
    }
}

/// The first `count` tasks of segmentation, depth, normal, saliency, boundary.
pub fn standard_tasks(count: usize) -> Result<Vec<TaskSpec>> {
    ensure!(
        (2..=TaskRole::ALL.len()).contains(&count),
        "task count must be in 2..=5, got {count}"
    );
    Ok(TaskRole::ALL[..count]
        .iter()
        .enumerate()
        .map(|(i, &r)| TaskSpec::for_role(i, r))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelProtocol {
    OneLabel,
    RandomLabel { max_labels: usize },
    Full,
}

impl fmt::Display for LabelProtocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LabelProtocol::OneLabel => write!(f, "one-label"),
            LabelProtocol::RandomLabel { max_labels } => write!(f, "random-label:{max_labels}"),
            LabelProtocol::Full => write!(f, "full"),
        }
    }
}

impl FromStr for LabelProtocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one-label" => Ok(LabelProtocol::OneLabel),
            "full" => Ok(LabelProtocol::Full),
            _ => {
                let rest = s
                    .strip_prefix("random-label:")
                    .ok_or_else(|| Error::Validation(format!("unknown label protocol '{s}'")))?;
                let max_labels = rest
                    .parse()
                    .map_err(|_| Error::Validation(format!("bad max_labels in '{s}'")))?;
                Ok(LabelProtocol::RandomLabel { max_labels })
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn salt(self) -> u64 {
        match self {
            Split::Train => 0x7261_696e,
            Split::Test => 0x7465_7374,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Label {
    /// Class map `[H, W]`.
    Classes(Vec<u32>),
    /// Real-valued map `[C, H, W]`.
    Values(Tensor),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    /// Labels for every task, indexed by task id.
    pub labels: Vec<Label>,
    pub label_mask: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub sample_count: usize,
    pub test_count: usize,
    pub height: usize,
    pub width: usize,
    pub n_shapes: usize,
    pub tasks: Vec<TaskSpec>,
    pub protocol: LabelProtocol,
    pub seed: u64,
    /// Train-split label masks; the test split is always fully labeled.
    pub masks: Vec<Vec<bool>>,
}

impl DatasetManifest {
    pub fn task_count(&self) -> usize {
        self.tasks.len()
    }

    pub fn split_len(&self, split: Split) -> usize {
        match split {
            Split::Train => self.sample_count,
            Split::Test => self.test_count,
        }
    }

    pub fn mask(&self, split: Split, index: usize) -> Vec<bool> {
        match split {
            Split::Train => self.masks[index].clone(),
            Split::Test => vec![true; self.tasks.len()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, t) in self.tasks.iter().enumerate() {
            ensure!(t.id == i, "task ids must be contiguous from 0");
        }
        ensure!(
            self.masks.len() == self.sample_count,
            "manifest has {} masks for {} train samples",
            self.masks.len(),
            self.sample_count
        );
        for (i, m) in self.masks.iter().enumerate() {
            ensure!(m.len() == self.tasks.len(), "mask {i} has wrong length");
            let n = m.iter().filter(|&&b| b).count();
            let ok = match self.protocol {
                LabelProtocol::OneLabel => n == 1,
                LabelProtocol::RandomLabel { max_labels } => (1..=max_labels).contains(&n),
                LabelProtocol::Full => n == self.tasks.len(),
            };
            ensure!(ok, "mask {i} violates protocol {}", self.protocol);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub n_samples: usize,
    pub n_test: usize,
    pub height: usize,
    pub width: usize,
    pub n_shapes: usize,
    pub tasks: usize,
    pub protocol: LabelProtocol,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_samples: 600,
            n_test: 200,
            height: 32,
            width: 32,
            n_shapes: 3,
            tasks: 3,
            protocol: LabelProtocol::OneLabel,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.height >= MIN_SIDE && self.width >= MIN_SIDE,
            "H and W must be at least {MIN_SIDE}, got {}x{}",
            self.height,
            self.width
        );
        ensure!(self.n_samples >= 1, "n_samples must be at least 1");
        standard_tasks(self.tasks)?;
        Ok(())
    }
}

struct Shape {
    class: u32,
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    depth: f64,
    slope_y: f64,
    slope_x: f64,
    albedo: [f64; 3],
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        let dy = (y - self.cy) / self.ry;
        let dx = (x - self.cx) / self.rx;
        match self.class {
            1 => dy.abs() <= 1.0 && dx.abs() <= 1.0,
            2 => dy * dy + dx * dx <= 1.0,
            _ => dy.abs() + dx.abs() <= 1.0,
        }
    }

    fn depth_at(&self, y: f64, x: f64) -> f64 {
        self.depth + self.slope_y * (y - self.cy) + self.slope_x * (x - self.cx)
    }

    fn normal(&self) -> [f64; 3] {
        normalize3([-self.slope_x, -self.slope_y, 1.0])
    }

    fn bbox(&self) -> (f64, f64, f64, f64) {
        (
            self.cy - self.ry,
            self.cy + self.ry,
            self.cx - self.rx,
            self.cx + self.rx,
        )
    }
}

fn normalize3(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

const CLASS_HUES: [[f64; 3]; 3] = [[0.9, 0.3, 0.25], [0.3, 0.85, 0.3], [0.3, 0.35, 0.95]];
const LIGHT: [f64; 3] = [0.35, -0.45, 0.82];

/// Deterministic scene for one sample; all labels are populated.
pub fn render_scene(
    height: usize,
    width: usize,
    n_shapes: usize,
    tasks: &[TaskSpec],
    rng: &mut ChaCha8Rng,
) -> Sample {
    let bg_depth = rng.gen_range(7.0..9.0);
    let bg_albedo: [f64; 3] = [
        rng.gen_range(0.35..0.6),
        rng.gen_range(0.35..0.6),
        rng.gen_range(0.35..0.6),
    ];
    let (hf, wf) = (height as f64, width as f64);
    let max_r = (hf.min(wf) / 4.0).max(3.0);
    let mut shapes: Vec<Shape> = Vec::new();
    for _ in 0..n_shapes {
        for _attempt in 0..64 {
            let class = rng.gen_range(1..SEG_CLASSES as u32);
            let ry = rng.gen_range(2.5..max_r);
            let rx = rng.gen_range(2.5..max_r);
            let cy = rng.gen_range(ry..hf - 1.0 - ry);
            let cx = rng.gen_range(rx..wf - 1.0 - rx);
            let hue = CLASS_HUES[class as usize - 1];
            let jitter = rng.gen_range(0.85..1.0);
            let cand = Shape {
                class,
                cy,
                cx,
                ry,
                rx,
                depth: rng.gen_range(2.0..6.0),
                slope_y: rng.gen_range(-0.12..0.12),
                slope_x: rng.gen_range(-0.12..0.12),
                albedo: [hue[0] * jitter, hue[1] * jitter, hue[2] * jitter],
            };
            let (a0, a1, b0, b1) = cand.bbox();
            // keep a two-pixel gap so shapes never touch
            let clear = shapes.iter().all(|s| {
                let (c0, c1, d0, d1) = s.bbox();
                a1 + 2.0 < c0 || c1 + 2.0 < a0 || b1 + 2.0 < d0 || d1 + 2.0 < b0
            });
            if clear {
                shapes.push(cand);
                break;
            }
        }
    }
    let salient = shapes
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.depth.total_cmp(&b.1.depth))
        .map(|(i, _)| i);

    let hw = height * width;
    let mut image = vec![0.0; 3 * hw];
    let mut seg = vec![0u32; hw];
    let mut owner: Vec<Option<usize>> = vec![None; hw];
    let mut depth = vec![0.0; hw];
    let mut normal = vec![0.0; 3 * hw];
    let mut saliency = vec![0u32; hw];
    for y in 0..height {
        for x in 0..width {
            let p = y * width + x;
            let (yc, xc) = (y as f64 + 0.5, x as f64 + 0.5);
            let hit = shapes.iter().position(|s| s.contains(yc, xc));
            let (z, n, albedo) = match hit {
                Some(i) => {
                    let s = &shapes[i];
                    seg[p] = s.class;
                    owner[p] = Some(i);
                    if Some(i) == salient {
                        saliency[p] = 1;
                    }
                    (s.depth_at(yc, xc), s.normal(), s.albedo)
                }
                None => (bg_depth, [0.0, 0.0, 1.0], bg_albedo),
            };
            depth[p] = z;
            let light = normalize3(LIGHT);
            let shade = 0.45 + 0.55 * (n[0] * light[0] + n[1] * light[1] + n[2] * light[2]).max(0.0);
            let fog = (-0.06 * z).exp();
            for ch in 0..3 {
                normal[ch * hw + p] = n[ch];
                let noise = rng.gen_range(-0.02..0.02);
                image[ch * hw + p] = (albedo[ch] * shade * fog * 1.25 + noise).clamp(0.0, 1.0);
            }
        }
    }
    let mut boundary = vec![0u32; hw];
    for y in 0..height {
        for x in 0..width {
            let p = y * width + x;
            let nbrs = [
                (y > 0).then(|| p - width),
                (y + 1 < height).then(|| p + width),
                (x > 0).then(|| p - 1),
                (x + 1 < width).then(|| p + 1),
            ];
            if nbrs.iter().flatten().any(|&q| owner[q] != owner[p]) {
                boundary[p] = 1;
            }
        }
    }

    let to_f32 = |v: Vec<f64>| -> Vec<f64> { v.into_iter().map(|x| x as f32 as f64).collect() };
    // normals are renormalized after the f32 cast so stored pixels stay unit length
    let normal = {
        let mut nv = to_f32(normal);
        for p in 0..hw {
            let len = (0..3).map(|c| nv[c * hw + p].powi(2)).sum::<f64>().sqrt();
            for c in 0..3 {
                nv[c * hw + p] = (nv[c * hw + p] / len) as f32 as f64;
            }
        }
        nv
    };
    let image = Tensor::from_parts(vec![3, height, width], to_f32(image));
    let labels = tasks
        .iter()
        .map(|t| match t.role {
            TaskRole::Segmentation => Label::Classes(seg.clone()),
            TaskRole::Depth => {
                Label::Values(Tensor::from_parts(vec![1, height, width], to_f32(depth.clone())))
            }
            TaskRole::Normal => {
                Label::Values(Tensor::from_parts(vec![3, height, width], normal.clone()))
            }
            TaskRole::Saliency => Label::Classes(saliency.clone()),
            TaskRole::Boundary => Label::Classes(boundary.clone()),
        })
        .collect();
    Sample {
        image,
        labels,
        label_mask: vec![true; tasks.len()],
    }
}

fn sample_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ split.salt());
    r.set_stream(index as u64 + 1);
    r
}

pub fn sample_id(index: usize) -> String {
    format!("{index:06}")
}

pub fn sample_dir(root: &Path, split: Split, index: usize) -> PathBuf {
    root.join(split.name()).join(sample_id(index))
}

/// Renders sample `index` of `split` exactly as `generate_dataset` writes it.
pub fn generate_sample(cfg: &GenConfig, split: Split, index: usize) -> Result<Sample> {
    cfg.validate()?;
    let tasks = standard_tasks(cfg.tasks)?;
    let mut rng = sample_rng(cfg.seed, split, index);
    Ok(render_scene(cfg.height, cfg.width, cfg.n_shapes, &tasks, &mut rng))
}

/// Writes both splits and the manifest under `root`.
pub fn generate_dataset(cfg: &GenConfig, root: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let tasks = standard_tasks(cfg.tasks)?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for split in [Split::Train, Split::Test] {
        let n = match split {
            Split::Train => cfg.n_samples,
            Split::Test => cfg.n_test,
        };
        for i in 0..n {
            let mut rng = sample_rng(cfg.seed, split, i);
            let s = render_scene(cfg.height, cfg.width, cfg.n_shapes, &tasks, &mut rng);
            write_sample(&sample_dir(root, split, i), split, i, &s, &tasks)?;
        }
    }
    let manifest = DatasetManifest {
        sample_count: cfg.n_samples,
        test_count: cfg.n_test,
        height: cfg.height,
        width: cfg.width,
        n_shapes: cfg.n_shapes,
        tasks,
        protocol: LabelProtocol::Full,
        seed: cfg.seed,
        masks: vec![vec![true; cfg.tasks]; cfg.n_samples],
    };
    let manifest = assign_labels(&manifest, cfg.protocol, cfg.seed)?;
    write_manifest(&manifest, root)?;
    Ok(manifest)
}

/// Draws train-split label masks under `protocol`.
///
/// Random-label masks pick a cardinality uniformly from `1..=max_labels`,
/// then a uniformly random task subset of that size.
pub fn assign_labels(
    manifest: &DatasetManifest,
    protocol: LabelProtocol,
    seed: u64,
) -> Result<DatasetManifest> {
    let t = manifest.tasks.len();
    ensure!(t >= 2, "partial labelling needs at least two tasks, got {t}");
    if let LabelProtocol::RandomLabel { max_labels } = protocol {
        ensure!(
            (1..=t).contains(&max_labels),
            "max_labels must be in 1..={t}, got {max_labels}"
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6c61_6265_6c73);
    let masks = (0..manifest.sample_count)
        .map(|_| {
            let mut m = vec![false; t];
            match protocol {
                LabelProtocol::OneLabel => m[rng.gen_range(0..t)] = true,
                LabelProtocol::RandomLabel { max_labels } => {
                    let k = rng.gen_range(1..=max_labels);
                    for i in sample_indices(&mut rng, t, k) {
                        m[i] = true;
                    }
                }
                LabelProtocol::Full => m.iter_mut().for_each(|b| *b = true),
            }
            m
        })
        .collect();
    let out = DatasetManifest {
        protocol,
        masks,
        ..manifest.clone()
    };
    out.validate()?;
    Ok(out)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn f32_bytes(v: &[f64]) -> Vec<u8> {
    v.iter().flat_map(|&x| (x as f32).to_le_bytes()).collect()
}

fn i32_bytes(v: &[u32]) -> Vec<u8> {
    v.iter().flat_map(|&x| (x as i32).to_le_bytes()).collect()
}

fn dims_str(d: &[usize]) -> String {
    d.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

fn write_sample(dir: &Path, split: Split, index: usize, s: &Sample, tasks: &[TaskSpec]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut header = format!(
        "sample = {}\nsplit = {}\nimage.bin = f32 {}\n",
        sample_id(index),
        split.name(),
        dims_str(s.image.shape())
    );
    write_file(&dir.join("image.bin"), &f32_bytes(s.image.data()))?;
    let (h, w) = (s.image.shape()[1], s.image.shape()[2]);
    for (t, label) in tasks.iter().zip(&s.labels) {
        let name = format!("task{}.bin", t.id);
        match label {
            Label::Classes(c) => {
                header.push_str(&format!("{name} = i32 {h} {w} task={}\n", t.id));
                write_file(&dir.join(&name), &i32_bytes(c))?;
            }
            Label::Values(v) => {
                header.push_str(&format!(
                    "{name} = f32 {} task={}\n",
                    dims_str(v.shape()),
                    t.id
                ));
                write_file(&dir.join(&name), &f32_bytes(v.data()))?;
            }
        }
    }
    write_file(&dir.join("header.txt"), header.as_bytes())
}

pub fn write_manifest(m: &DatasetManifest, root: &Path) -> Result<()> {
    let mut s = String::from("# proto-mtl dataset manifest\n");
    s.push_str(&format!("format = {MANIFEST_FORMAT}\n"));
    s.push_str(&format!("seed = {}\n", m.seed));
    s.push_str(&format!("height = {}\n", m.height));
    s.push_str(&format!("width = {}\n", m.width));
    s.push_str(&format!("n_shapes = {}\n", m.n_shapes));
    s.push_str(&format!("train_count = {}\n", m.sample_count));
    s.push_str(&format!("test_count = {}\n", m.test_count));
    s.push_str(&format!("protocol = {}\n", m.protocol));
    s.push_str(&format!("task_count = {}\n", m.tasks.len()));
    for t in &m.tasks {
        let kind = match t.kind {
            TaskKind::Categorical => "categorical",
            TaskKind::Regression => "regression",
        };
        s.push_str(&format!(
            "task.{} = {} {} {} {}\n",
            t.id,
            t.role.name(),
            kind,
            t.channels,
            t.classes
        ));
    }
    for (i, mask) in m.masks.iter().enumerate() {
        let bits: String = mask.iter().map(|&b| if b { '1' } else { '0' }).collect();
        s.push_str(&format!("mask.{} = {bits}\n", sample_id(i)));
    }
    write_file(&root.join(MANIFEST_FILE), s.as_bytes())
}

/// Parses `key = value` lines; `#` starts a comment line.
pub fn parse_key_values(path: &Path, text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: format!("expected 'key = value', got '{line}'"),
        })?;
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let kv = parse_key_values(&path, &text)?;
    let perr = |line: usize, message: String| Error::Parse {
        path: path.clone(),
        line,
        message,
    };
    let mut fields: BTreeMap<String, (usize, String)> = BTreeMap::new();
    let mut tasks = Vec::new();
    let mut masks: Vec<(usize, Vec<bool>)> = Vec::new();
    for (line, k, v) in kv {
        if let Some(id) = k.strip_prefix("task.") {
            let id: usize = id.parse().map_err(|_| perr(line, format!("bad task key '{k}'")))?;
            let parts: Vec<&str> = v.split_whitespace().collect();
            if parts.len() != 4 {
                return Err(perr(line, format!("bad task descriptor '{v}'")));
            }
            let role = TaskRole::from_name(parts[0])
                .ok_or_else(|| perr(line, format!("unknown task '{}'", parts[0])))?;
            let kind = match parts[1] {
                "categorical" => TaskKind::Categorical,
                "regression" => TaskKind::Regression,
                other => return Err(perr(line, format!("unknown task kind '{other}'"))),
            };
            let num = |s: &str| s.parse::<usize>().map_err(|_| perr(line, format!("bad number '{s}'")));
            tasks.push(TaskSpec {
                id,
                role,
                kind,
                channels: num(parts[2])?,
                classes: num(parts[3])?,
            });
        } else if let Some(id) = k.strip_prefix("mask.") {
            let idx: usize = id.parse().map_err(|_| perr(line, format!("bad mask key '{k}'")))?;
            let bits = v
                .chars()
                .map(|c| match c {
                    '1' => Ok(true),
                    '0' => Ok(false),
                    _ => Err(perr(line, format!("bad mask '{v}'"))),
                })
                .collect::<Result<Vec<bool>>>()?;
            masks.push((idx, bits));
        } else {
            fields.insert(k, (line, v));
        }
    }
    let get = |key: &str| -> Result<&(usize, String)> {
        fields
            .get(key)
            .ok_or_else(|| perr(0, format!("missing key '{key}'")))
    };
    let num = |key: &str| -> Result<u64> {
        let (line, v) = get(key)?;
        v.parse().map_err(|_| perr(*line, format!("bad value for {key}: '{v}'")))
    };
    let format = num("format")?;
    if format != MANIFEST_FORMAT as u64 {
        return Err(perr(get("format")?.0, format!("unsupported manifest format {format}")));
    }
    tasks.sort_by_key(|t| t.id);
    masks.sort_by_key(|m| m.0);
    for (i, (idx, _)) in masks.iter().enumerate() {
        if *idx != i {
            return Err(perr(0, format!("mask entries not contiguous at {i}")));
        }
    }
    let (pline, pv) = get("protocol")?;
    let protocol: LabelProtocol = pv.parse().map_err(|e: Error| perr(*pline, e.to_string()))?;
    let m = DatasetManifest {
        sample_count: num("train_count")? as usize,
        test_count: num("test_count")? as usize,
        height: num("height")? as usize,
        width: num("width")? as usize,
        n_shapes: num("n_shapes")? as usize,
        tasks,
        protocol,
        seed: num("seed")?,
        masks: masks.into_iter().map(|m| m.1).collect(),
    };
    if m.tasks.len() != num("task_count")? as usize {
        return Err(perr(0, "task_count disagrees with task lines".into()));
    }
    m.validate()?;
    Ok(m)
}

/// Images plus the labels the mask allows, for a list of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct PartialLabelBatch {
    /// `[B, 3, H, W]`.
    pub images: Tensor,
    /// `labels[t][b]` is present only where `mask[b][t]`.
    pub labels: Vec<Vec<Option<Label>>>,
    pub mask: Vec<Vec<bool>>,
}

impl PartialLabelBatch {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn height(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.images.shape()[3]
    }

    pub fn from_samples(samples: Vec<Sample>) -> Result<PartialLabelBatch> {
        ensure!(!samples.is_empty(), "empty batch");
        let shape = samples[0].image.shape().to_vec();
        let t = samples[0].labels.len();
        let mut images = Vec::with_capacity(samples.len() * samples[0].image.numel());
        let mut labels: Vec<Vec<Option<Label>>> = vec![Vec::with_capacity(samples.len()); t];
        let mut mask = Vec::with_capacity(samples.len());
        for s in samples {
            ensure!(s.image.shape() == &shape[..], "image shapes differ within batch");
            ensure!(s.labels.len() == t, "task counts differ within batch");
            images.extend_from_slice(s.image.data());
            for (task, label) in s.labels.into_iter().enumerate() {
                labels[task].push(s.label_mask[task].then_some(label));
            }
            mask.push(s.label_mask);
        }
        let b = mask.len();
        Ok(PartialLabelBatch {
            images: Tensor::from_parts(vec![b, shape[0], shape[1], shape[2]], images),
            labels,
            mask,
        })
    }

    /// Rows `indices` of this batch, in that order.
    pub fn select(&self, indices: &[usize]) -> PartialLabelBatch {
        let per = self.images.numel() / self.len();
        let mut images = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            images.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        PartialLabelBatch {
            images: Tensor::from_parts(shape, images),
            labels: self
                .labels
                .iter()
                .map(|l| indices.iter().map(|&i| l[i].clone()).collect())
                .collect(),
            mask: indices.iter().map(|&i| self.mask[i].clone()).collect(),
        }
    }

    pub fn concat(parts: &[PartialLabelBatch]) -> Result<PartialLabelBatch> {
        ensure!(!parts.is_empty(), "nothing to concatenate");
        let mut shape = parts[0].images.shape().to_vec();
        let mut images = Vec::new();
        let mut labels = vec![Vec::new(); parts[0].labels.len()];
        let mut mask = Vec::new();
        for p in parts {
            ensure!(p.images.shape()[1..] == shape[1..], "image shapes differ");
            images.extend_from_slice(p.images.data());
            for (dst, src) in labels.iter_mut().zip(&p.labels) {
                dst.extend(src.iter().cloned());
            }
            mask.extend(p.mask.iter().cloned());
        }
        shape[0] = mask.len();
        Ok(PartialLabelBatch {
            images: Tensor::from_parts(shape, images),
            labels,
            mask,
        })
    }
}

fn read_payload(path: &Path, index: usize, expect: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::Sample {
        index,
        message: format!("cannot read {}: {e}", path.display()),
    })?;
    if bytes.len() != expect * 4 {
        return Err(Error::Sample {
            index,
            message: format!(
                "{} has {} bytes, expected {}",
                path.display(),
                bytes.len(),
                expect * 4
            ),
        });
    }
    Ok(bytes)
}

fn parse_f32(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect()
}

/// Reads one sample directory, checking payload sizes against the header.
pub fn read_sample(root: &Path, manifest: &DatasetManifest, split: Split, index: usize) -> Result<Sample> {
    let serr = |message: String| Error::Sample { index, message };
    let dir = sample_dir(root, split, index);
    let header_path = dir.join("header.txt");
    let text = fs::read_to_string(&header_path)
        .map_err(|e| serr(format!("cannot read {}: {e}", header_path.display())))?;
    let entries = parse_key_values(&header_path, &text).map_err(|e| serr(e.to_string()))?;
    let mut files: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (_, k, v) in entries {
        files.insert(k, v.split_whitespace().map(str::to_string).collect());
    }
    let dims_of = |name: &str, dtype: &str| -> Result<Vec<usize>> {
        let f = files
            .get(name)
            .ok_or_else(|| serr(format!("header lacks {name}")))?;
        if f.first().map(String::as_str) != Some(dtype) {
            return Err(serr(format!("{name} has dtype {:?}, expected {dtype}", f.first())));
        }
        f[1..]
            .iter()
            .take_while(|s| !s.starts_with("task="))
            .map(|s| s.parse().map_err(|_| serr(format!("bad dim '{s}' for {name}"))))
            .collect()
    };
    let (h, w) = (manifest.height, manifest.width);
    let dims = dims_of("image.bin", "f32")?;
    if dims != [3, h, w] {
        return Err(serr(format!("image dims {dims:?} disagree with manifest")));
    }
    let image = Tensor::from_parts(dims, parse_f32(&read_payload(&dir.join("image.bin"), index, 3 * h * w)?));
    let mut labels = Vec::with_capacity(manifest.tasks.len());
    for t in &manifest.tasks {
        let name = format!("task{}.bin", t.id);
        let path = dir.join(&name);
        let label = match t.kind {
            TaskKind::Categorical => {
                let d = dims_of(&name, "i32")?;
                if d != [h, w] {
                    return Err(serr(format!("{name} dims {d:?} disagree with manifest")));
                }
                let bytes = read_payload(&path, index, h * w)?;
                let classes = bytes
                    .chunks_exact(4)
                    .map(|c| {
                        let v = i32::from_le_bytes([c[0], c[1], c[2], c[3]]);
                        if v < 0 || v as usize >= t.classes {
                            Err(serr(format!("{name} holds class {v} outside 0..{}", t.classes)))
                        } else {
                            Ok(v as u32)
                        }
                    })
                    .collect::<Result<Vec<u32>>>()?;
                Label::Classes(classes)
            }
            TaskKind::Regression => {
                let d = dims_of(&name, "f32")?;
                if d != [t.channels, h, w] {
                    return Err(serr(format!("{name} dims {d:?} disagree with manifest")));
                }
                let bytes = read_payload(&path, index, t.channels * h * w)?;
                Label::Values(Tensor::from_parts(d, parse_f32(&bytes)))
            }
        };
        labels.push(label);
    }
    Ok(Sample {
        image,
        labels,
        label_mask: manifest.mask(split, index),
    })
}

/// Stacks samples `indices` of `split`; labels outside each mask are dropped.
pub fn load_batch(
    root: &Path,
    manifest: &DatasetManifest,
    split: Split,
    indices: &[usize],
) -> Result<PartialLabelBatch> {
    let n = manifest.split_len(split);
    let samples = indices
        .iter()
        .map(|&i| {
            if i >= n {
                return Err(Error::Sample {
                    index: i,
                    message: format!("index out of range for {} split of {n}", split.name()),
                });
            }
            read_sample(root, manifest, split, i)
        })
        .collect::<Result<Vec<_>>>()?;
    PartialLabelBatch::from_samples(samples)
}

/// Every sample of a split in index order.
pub fn load_split(root: &Path, manifest: &DatasetManifest, split: Split) -> Result<PartialLabelBatch> {
    let all: Vec<usize> = (0..manifest.split_len(split)).collect();
    if all.is_empty() {
        return Ok(PartialLabelBatch {
            images: Tensor::zeros(&[0, 3, manifest.height, manifest.width]),
            labels: vec![Vec::new(); manifest.tasks.len()],
            mask: Vec::new(),
        });
    }
    load_batch(root, manifest, split, &all)
}
