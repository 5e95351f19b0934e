//! Seeded synthetic benchmark: Gaussian feature clusters for base, few-shot
//! novel and held-out unknown classes plus background, each proposal with a
//! jittered box.
//!
//! Every object image carries a single proposal and a single annotated
//! object; background images carry a single proposal and no annotation.
//! The canonical box of an image is the annotation of object images.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FoodError, Result};
use crate::head::ProposalBatch;
use crate::metrics::{valid_box, BBox, GroundTruthBox};
use crate::numerics::{l2_normalize, Mat64, Rng, Vec64};

pub const DATASET_FORMAT: &str = "food-synth";
pub const DATASET_VERSION: u32 = 1;

const DATA_STREAM: u64 = 0x5eed_da7a;
const MAX_CENTER_ATTEMPTS: usize = 10_000;
const CANVAS: f64 = 512.0;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSpec {
    pub num_base: usize,
    pub num_novel: usize,
    pub num_unknown: usize,
    pub shots: usize,
    pub feature_dim: usize,
    /// Minimum distance between class centers, in within-class standard
    /// deviations.
    pub separation: f64,
    pub base_train_per_class: usize,
    pub test_per_class: usize,
    /// Background proposals per foreground proposal, in every split.
    pub background_ratio: f64,
    /// Standard deviation of the background cloud around the origin.
    pub background_scale: f64,
    /// Standard deviation, in pixels, of each proposal box coordinate.
    pub box_jitter: f64,
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            num_base: 6,
            num_novel: 3,
            num_unknown: 4,
            shots: 10,
            feature_dim: 16,
            separation: 6.0,
            base_train_per_class: 200,
            test_per_class: 50,
            background_ratio: 3.0,
            background_scale: 0.5,
            box_jitter: 4.0,
            seed: 0,
        }
    }
}

impl BenchmarkSpec {
    pub fn num_known(&self) -> usize {
        self.num_base + self.num_novel
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_base", self.num_base),
            ("num_novel", self.num_novel),
            ("shots", self.shots),
            ("feature_dim", self.feature_dim),
            ("base_train_per_class", self.base_train_per_class),
            ("test_per_class", self.test_per_class),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(FoodError::Spec(format!("{name} must be >= 1")));
        }
        if !(self.separation > 0.0) || !self.separation.is_finite() {
            return Err(FoodError::Spec(format!(
                "separation must be positive, got {}",
                self.separation
            )));
        }
        for (name, v) in [
            ("background_ratio", self.background_ratio),
            ("background_scale", self.background_scale),
            ("box_jitter", self.box_jitter),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(FoodError::Spec(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Ground-truth role of a proposal. Known classes use their global output
/// slot (`0..B` base, `B..K` novel); unknown classes use their cluster id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Base(usize),
    Novel(usize),
    Background,
    Unknown(usize),
}

impl Role {
    pub fn is_foreground(self) -> bool {
        !matches!(self, Role::Background)
    }

    pub fn known_class(self) -> Option<usize> {
        match self {
            Role::Base(c) | Role::Novel(c) => Some(c),
            _ => None,
        }
    }

    fn tag(self) -> (&'static str, Option<usize>) {
        match self {
            Role::Base(c) => ("base", Some(c)),
            Role::Novel(c) => ("novel", Some(c)),
            Role::Background => ("background", None),
            Role::Unknown(c) => ("unknown", Some(c)),
        }
    }

    fn from_tag(tag: &str, class: Option<usize>) -> Result<Self> {
        match (tag, class) {
            ("base", Some(c)) => Ok(Role::Base(c)),
            ("novel", Some(c)) => Ok(Role::Novel(c)),
            ("background", None) => Ok(Role::Background),
            ("unknown", Some(c)) => Ok(Role::Unknown(c)),
            _ => Err(FoodError::Format(format!("invalid role `{tag}` with class {class:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub image_id: u64,
    pub proposal_id: u32,
    pub feature: Vec64,
    pub bbox: BBox,
    /// Canonical box of the proposal's image (the annotation for object
    /// images).
    pub image_box: BBox,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SynthDataset {
    pub train_base: Vec<Proposal>,
    pub train_fewshot: Vec<Proposal>,
    pub test: Vec<Proposal>,
}

impl SynthDataset {
    /// Annotated objects of the test split; unknown objects use category -1.
    pub fn test_ground_truth(&self) -> Vec<GroundTruthBox> {
        self.test
            .iter()
            .filter_map(|p| {
                let category = match p.role {
                    Role::Base(c) | Role::Novel(c) => c as i64,
                    Role::Unknown(_) => crate::metrics::UNKNOWN_CATEGORY,
                    Role::Background => return None,
                };
                Some(GroundTruthBox {
                    image_id: p.image_id,
                    category,
                    bbox: p.image_box,
                })
            })
            .collect()
    }
}

fn random_direction(rng: &mut Rng, dim: usize) -> Vec64 {
    loop {
        let v: Vec64 = (0..dim).map(|_| rng.normal()).collect();
        if let Ok(u) = l2_normalize(&v) {
            return u;
        }
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn sample_centers(spec: &BenchmarkSpec, rng: &mut Rng) -> Result<Vec<Vec64>> {
    let total = spec.num_known() + spec.num_unknown;
    let radius = spec.separation;
    let mut centers: Vec<Vec64> = Vec::with_capacity(total);
    for k in 0..total {
        let mut placed = false;
        for _ in 0..MAX_CENTER_ATTEMPTS {
            let c: Vec64 = random_direction(rng, spec.feature_dim)
                .into_iter()
                .map(|v| v * radius)
                .collect();
            if centers.iter().all(|o| distance(o, &c) >= spec.separation) {
                centers.push(c);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(FoodError::Spec(format!(
                "could not place center {k} at separation {} in {} dimensions",
                spec.separation, spec.feature_dim
            )));
        }
    }
    Ok(centers)
}

/// Cluster centers in generation order: base, novel, then unknown.
pub fn class_centers(spec: &BenchmarkSpec) -> Result<Vec<Vec64>> {
    spec.validate()?;
    sample_centers(spec, &mut Rng::with_stream(spec.seed, DATA_STREAM))
}

struct Builder<'a> {
    spec: &'a BenchmarkSpec,
    rng: Rng,
    next_image: u64,
}

impl Builder<'_> {
    fn canonical_box(&mut self) -> BBox {
        let w = self.rng.uniform_range(32.0, 112.0);
        let h = self.rng.uniform_range(32.0, 112.0);
        let x1 = self.rng.uniform_range(0.0, CANVAS - w);
        let y1 = self.rng.uniform_range(0.0, CANVAS - h);
        [x1, y1, x1 + w, y1 + h]
    }

    fn jitter(&mut self, b: BBox) -> BBox {
        let s = self.spec.box_jitter;
        let mut out = [0.0; 4];
        for (o, v) in out.iter_mut().zip(b) {
            *o = v + s * self.rng.normal();
        }
        if out[2] < out[0] + 1.0 {
            out[2] = out[0] + 1.0;
        }
        if out[3] < out[1] + 1.0 {
            out[3] = out[1] + 1.0;
        }
        out
    }

    fn proposal(&mut self, role: Role, center: Option<&[f64]>) -> Proposal {
        let image_box = self.canonical_box();
        let bbox = self.jitter(image_box);
        let dim = self.spec.feature_dim;
        let feature = match center {
            Some(c) => c.iter().map(|m| m + self.rng.normal()).collect(),
            None => (0..dim)
                .map(|_| self.spec.background_scale * self.rng.normal())
                .collect(),
        };
        let image_id = self.next_image;
        self.next_image += 1;
        Proposal {
            image_id,
            proposal_id: 0,
            feature,
            bbox,
            image_box,
            role,
        }
    }

    fn split(&mut self, classes: &[(Role, &[f64])], per_class: usize) -> Vec<Proposal> {
        let mut out = Vec::new();
        for (role, center) in classes {
            for _ in 0..per_class {
                out.push(self.proposal(*role, Some(center)));
            }
        }
        let fg = out.len();
        let bg = (self.spec.background_ratio * fg as f64).round() as usize;
        for _ in 0..bg {
            out.push(self.proposal(Role::Background, None));
        }
        out
    }
}

pub fn generate(spec: &BenchmarkSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let mut rng = Rng::with_stream(spec.seed, DATA_STREAM);
    let centers = sample_centers(spec, &mut rng)?;
    let (b, k) = (spec.num_base, spec.num_known());
    let base: Vec<(Role, &[f64])> = (0..b).map(|c| (Role::Base(c), centers[c].as_slice())).collect();
    let known: Vec<(Role, &[f64])> = (0..k)
        .map(|c| {
            let role = if c < b { Role::Base(c) } else { Role::Novel(c) };
            (role, centers[c].as_slice())
        })
        .collect();
    let mut test_classes = known.clone();
    test_classes.extend((0..spec.num_unknown).map(|u| (Role::Unknown(u), centers[k + u].as_slice())));

    let mut builder = Builder {
        spec,
        rng,
        next_image: 0,
    };
    let train_base = builder.split(&base, spec.base_train_per_class);
    let train_fewshot = builder.split(&known, spec.shots);
    let test = builder.split(&test_classes, spec.test_per_class);
    let dataset = SynthDataset {
        train_base,
        train_fewshot,
        test,
    };
    check_training_split(&dataset.train_base)?;
    check_training_split(&dataset.train_fewshot)?;
    Ok(dataset)
}

/// Rejects any split holding a held-out unknown proposal.
pub fn check_training_split(split: &[Proposal]) -> Result<()> {
    if split.iter().any(|p| matches!(p.role, Role::Unknown(_))) {
        return Err(FoodError::UnknownLabelInTraining);
    }
    Ok(())
}

/// Uniform with-replacement sampler over one split.
#[derive(Debug, Clone)]
pub struct BatchSampler<'a> {
    split: &'a [Proposal],
    fg: Vec<usize>,
    bg: Vec<usize>,
    num_known: usize,
}

impl<'a> BatchSampler<'a> {
    pub fn new(split: &'a [Proposal], num_known: usize) -> Result<Self> {
        if split.is_empty() {
            return Err(FoodError::EmptySplit("split has no proposals".into()));
        }
        check_training_split(split)?;
        let mut fg = Vec::new();
        let mut bg = Vec::new();
        for (i, p) in split.iter().enumerate() {
            if p.role.is_foreground() {
                fg.push(i);
            } else {
                bg.push(i);
            }
        }
        Ok(Self {
            split,
            fg,
            bg,
            num_known,
        })
    }

    pub fn sample(&self, batch_size: usize, fg_fraction: f64, rng: &mut Rng) -> Result<ProposalBatch> {
        if batch_size == 0 {
            return Err(FoodError::EmptySplit("batch size is zero".into()));
        }
        let n_fg = (fg_fraction.clamp(0.0, 1.0) * batch_size as f64).round() as usize;
        let n_bg = batch_size - n_fg;
        if (n_fg > 0 && self.fg.is_empty()) || (n_bg > 0 && self.bg.is_empty()) {
            return Err(FoodError::EmptySplit(format!(
                "need {n_fg} foreground and {n_bg} background proposals, split has {} and {}",
                self.fg.len(),
                self.bg.len()
            )));
        }
        let dim = self.split[0].feature.len();
        let mut data = Vec::with_capacity(batch_size * dim);
        let mut labels = Vec::with_capacity(batch_size);
        let mut fg = Vec::with_capacity(batch_size);
        for (pool, count) in [(&self.fg, n_fg), (&self.bg, n_bg)] {
            for _ in 0..count {
                let p = &self.split[pool[rng.below(pool.len())]];
                data.extend_from_slice(&p.feature);
                labels.push(match p.role {
                    Role::Base(c) | Role::Novel(c) => c,
                    Role::Background => self.num_known + 1,
                    Role::Unknown(_) => return Err(FoodError::UnknownLabelInTraining),
                });
                fg.push(p.role.is_foreground());
            }
        }
        ProposalBatch::new(Mat64::from_vec(batch_size, dim, data)?, labels, fg)
    }
}

/// `round(fg_fraction * batch_size)` foreground proposals and the rest
/// background, drawn uniformly with replacement.
pub fn sample_batch(
    split: &[Proposal],
    batch_size: usize,
    fg_fraction: f64,
    num_known: usize,
    rng: &mut Rng,
) -> Result<ProposalBatch> {
    BatchSampler::new(split, num_known)?.sample(batch_size, fg_fraction, rng)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    split: String,
    image_id: u64,
    proposal_id: u32,
    role: String,
    class: Option<usize>,
    #[serde(rename = "box")]
    bbox: BBox,
    image_box: BBox,
    feature: Vec64,
}

const SPLITS: [&str; 3] = ["train_base", "train_fewshot", "test"];

pub fn write_dataset(dataset: &SynthDataset, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let header = Header {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
    };
    writeln!(
        out,
        "{}",
        serde_json::to_string(&header).map_err(|e| FoodError::Format(e.to_string()))?
    )?;
    for (name, split) in SPLITS
        .iter()
        .zip([&dataset.train_base, &dataset.train_fewshot, &dataset.test])
    {
        for p in split {
            let (role, class) = p.role.tag();
            let rec = Record {
                split: (*name).into(),
                image_id: p.image_id,
                proposal_id: p.proposal_id,
                role: role.into(),
                class,
                bbox: p.bbox,
                image_box: p.image_box,
                feature: p.feature.clone(),
            };
            writeln!(
                out,
                "{}",
                serde_json::to_string(&rec).map_err(|e| FoodError::Format(e.to_string()))?
            )?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<SynthDataset> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let first = lines
        .next()
        .ok_or_else(|| FoodError::Format("empty dataset file".into()))??;
    let header: Header =
        serde_json::from_str(&first).map_err(|e| FoodError::Format(format!("line 1: bad header: {e}")))?;
    if header.format != DATASET_FORMAT {
        return Err(FoodError::Format(format!(
            "line 1: unexpected format `{}`",
            header.format
        )));
    }
    if header.version != DATASET_VERSION {
        return Err(FoodError::Format(format!(
            "line 1: unsupported dataset version {} (expected {DATASET_VERSION})",
            header.version
        )));
    }
    let mut dataset = SynthDataset::default();
    let mut dim: Option<usize> = None;
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line?;
        let rec: Record = serde_json::from_str(&line).map_err(|e| FoodError::Format(format!("line {lineno}: {e}")))?;
        if rec.feature.iter().any(|v| !v.is_finite()) {
            return Err(FoodError::Format(format!("line {lineno}: non-finite feature")));
        }
        if *dim.get_or_insert(rec.feature.len()) != rec.feature.len() || rec.feature.is_empty() {
            return Err(FoodError::Format(format!(
                "line {lineno}: inconsistent feature dimension"
            )));
        }
        if !valid_box(&rec.bbox) || !valid_box(&rec.image_box) {
            return Err(FoodError::Format(format!("line {lineno}: invalid box")));
        }
        let role =
            Role::from_tag(&rec.role, rec.class).map_err(|e| FoodError::Format(format!("line {lineno}: {e}")))?;
        let proposal = Proposal {
            image_id: rec.image_id,
            proposal_id: rec.proposal_id,
            feature: rec.feature,
            bbox: rec.bbox,
            image_box: rec.image_box,
            role,
        };
        match rec.split.as_str() {
            "train_base" => dataset.train_base.push(proposal),
            "train_fewshot" => dataset.train_fewshot.push(proposal),
            "test" => dataset.test.push(proposal),
            other => return Err(FoodError::Format(format!("line {lineno}: unknown split `{other}`"))),
        }
    }
    check_training_split(&dataset.train_base)
        .map_err(|_| FoodError::Format("unknown proposal in train_base".into()))?;
    check_training_split(&dataset.train_fewshot)
        .map_err(|_| FoodError::Format("unknown proposal in train_fewshot".into()))?;
    Ok(dataset)
}
