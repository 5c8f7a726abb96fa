//! Feature/label ingestion, the `FTNS` tensor container, dataset splits and a
//! synthetic opinion-score generator.
//!
//! `FTNS` layout (all integers little-endian):
//!
//! ```text
//! "FTNS" | version: u32 = 1 | entry count: u32
//! per entry: name length: u32 | UTF-8 name | rank: u32 | extents: u32 × rank
//!            | f64 × product(extents), row-major
//! ```

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::stats::{label_from_votes, ScoreLabel, StatsError, SCORE_BINS};

pub const MAGIC: &[u8; 4] = b"FTNS";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("bad magic at offset 0: expected \"FTNS\", found {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {version} at offset 4")]
    Version { version: u32 },
    #[error("truncated payload: needed {needed} bytes at offset {offset}, file has {len}")]
    Truncated { offset: usize, needed: usize, len: usize },
    #[error("duplicate tensor name '{name}' at offset {offset}")]
    DuplicateName { name: String, offset: usize },
    #[error("invalid UTF-8 tensor name at offset {offset}")]
    BadName { offset: usize },
    #[error("tensor '{name}' at offset {offset}: shape {shape:?} is invalid")]
    BadShape {
        name: String,
        offset: usize,
        shape: Vec<usize>,
    },
    #[error("{len} trailing bytes after the last entry at offset {offset}")]
    TrailingBytes { offset: usize, len: usize },
    #[error("tensor '{name}': shape {shape:?} does not hold {len} values")]
    DataLength {
        name: String,
        shape: Vec<usize>,
        len: usize,
    },
    #[error("labels row {row}: {reason}")]
    LabelRow { row: usize, reason: String },
    #[error("labels header must be 'id,n_obs,mu,sigma' or 'id,n_obs,v1,...,v10', got '{0}'")]
    LabelHeader(String),
    #[error("splits row {row}: {reason}")]
    SplitRow { row: usize, reason: String },
    #[error("dataset: {0}")]
    Inconsistent(String),
    #[error("split fractions must be non-negative and sum to 1, got {0:?}")]
    Fractions([f64; 3]),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Plain named array as stored in an `FTNS` file.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(DataError::DataLength {
                name,
                shape,
                len: data.len(),
            });
        }
        Ok(NamedTensor { name, shape, data })
    }
}

pub fn encode_tensors(tensors: &[NamedTensor]) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        if !seen.insert(t.name.as_str()) {
            return Err(DataError::DuplicateName {
                name: t.name.clone(),
                offset: out.len(),
            });
        }
        if t.shape.iter().product::<usize>() != t.data.len() {
            return Err(DataError::DataLength {
                name: t.name.clone(),
                shape: t.shape.clone(),
                len: t.data.len(),
            });
        }
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &e in &t.shape {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(DataError::Truncated {
                offset: self.pos,
                needed: n,
                len: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = match bytes.get(..4) {
        Some(m) => m.try_into().unwrap(),
        None => {
            let mut m = [0u8; 4];
            m[..bytes.len()].copy_from_slice(bytes);
            return Err(DataError::BadMagic(m));
        }
    };
    if &magic != MAGIC {
        return Err(DataError::BadMagic(magic));
    }
    r.pos = 4;
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(DataError::Version { version });
    }
    let count = r.u32()? as usize;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let entry_offset = r.pos;
        let name_len = r.u32()? as usize;
        let name_offset = r.pos;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| DataError::BadName { offset: name_offset })?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(DataError::DuplicateName {
                name,
                offset: entry_offset,
            });
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .filter(|n| n.checked_mul(8).is_some())
            .ok_or_else(|| DataError::BadShape {
                name: name.clone(),
                offset: entry_offset,
                shape: shape.clone(),
            })?;
        let data = r
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push(NamedTensor { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(DataError::TrailingBytes {
            offset: r.pos,
            len: bytes.len() - r.pos,
        });
    }
    Ok(out)
}

pub fn write_tensor_file(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    let bytes = encode_tensors(tensors)?;
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_tensor_file(path: &Path) -> Result<Vec<NamedTensor>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_tensors(&bytes)
}

/// Stores UTF-8 text as a 1-D tensor with one byte value per element.
pub fn text_tensor(name: &str, text: &str) -> NamedTensor {
    let data: Vec<f64> = text.bytes().map(f64::from).collect();
    NamedTensor {
        name: name.to_string(),
        shape: vec![data.len().max(1)],
        data: if data.is_empty() { vec![0.0] } else { data },
    }
}

/// Inverse of [`text_tensor`].
pub fn tensor_text(t: &NamedTensor) -> Option<String> {
    let bytes: Option<Vec<u8>> = t
        .data
        .iter()
        .filter(|&&v| v != 0.0)
        .map(|&v| (v.fract() == 0.0 && (1.0..=255.0).contains(&v)).then_some(v as u8))
        .collect();
    String::from_utf8(bytes?).ok()
}

fn parse_labels(text: &str) -> Result<Vec<ScoreLabel>> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    let (_, header) = lines.next().ok_or_else(|| DataError::LabelHeader(String::new()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let direct = cols == ["id", "n_obs", "mu", "sigma"];
    let votes_header: Vec<String> = ["id".to_string(), "n_obs".to_string()]
        .into_iter()
        .chain((1..=SCORE_BINS).map(|s| format!("v{s}")))
        .collect();
    if !direct && cols != votes_header {
        return Err(DataError::LabelHeader(header.to_string()));
    }
    let mut seen = HashSet::new();
    let mut labels = Vec::new();
    for (row, line) in lines {
        let fail = |reason: String| DataError::LabelRow { row, reason };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != cols.len() {
            return Err(fail(format!("expected {} fields, found {}", cols.len(), fields.len())));
        }
        let id = fields[0];
        if id.is_empty() {
            return Err(fail("empty id".into()));
        }
        if !seen.insert(id.to_string()) {
            return Err(fail(format!("duplicate id '{id}'")));
        }
        let n_obs: u32 = fields[1]
            .parse()
            .map_err(|_| fail(format!("n_obs '{}' is not a positive integer", fields[1])))?;
        let label = if direct {
            let num = |s: &str, what: &str| {
                s.parse::<f64>()
                    .map_err(|_| fail(format!("{what} '{s}' is not a number")))
            };
            ScoreLabel::direct(id, n_obs, num(fields[2], "mu")?, num(fields[3], "sigma")?)
                .map_err(|e| fail(e.to_string()))?
        } else {
            let mut votes = [0u64; SCORE_BINS];
            for (k, f) in fields[2..].iter().enumerate() {
                votes[k] = f
                    .parse()
                    .map_err(|_| fail(format!("vote count v{} = '{f}' is not a non-negative integer", k + 1)))?;
            }
            let total: u64 = votes.iter().sum();
            if total != n_obs as u64 {
                return Err(fail(format!("n_obs is {n_obs} but votes sum to {total}")));
            }
            label_from_votes(votes, id).map_err(|e| fail(e.to_string()))?
        };
        labels.push(label);
    }
    Ok(labels)
}

/// Reads a labels table, either direct `(μ, σ)` rows or vote histograms.
pub fn load_labels(path: &Path) -> Result<Vec<ScoreLabel>> {
    parse_labels(&fs::read_to_string(path).map_err(io_err(path))?)
}

pub fn labels_from_str(text: &str) -> Result<Vec<ScoreLabel>> {
    parse_labels(text)
}

/// Renders labels; histogram form when every label carries votes.
pub fn labels_to_string(labels: &[ScoreLabel]) -> String {
    let mut out = String::new();
    if !labels.is_empty() && labels.iter().all(|l| l.votes.is_some()) {
        out.push_str("id,n_obs");
        for s in 1..=SCORE_BINS {
            write!(out, ",v{s}").unwrap();
        }
        out.push('\n');
        for l in labels {
            write!(out, "{},{}", l.item_id, l.n_obs).unwrap();
            for c in l.votes.unwrap() {
                write!(out, ",{c}").unwrap();
            }
            out.push('\n');
        }
    } else {
        out.push_str("id,n_obs,mu,sigma\n");
        for l in labels {
            // `{}` on f64 prints the shortest round-tripping form
            writeln!(out, "{},{},{},{}", l.item_id, l.n_obs, l.mu, l.sigma).unwrap();
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// One item: full `C×H×W` features plus its label.
#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub id: String,
    pub features: NamedTensor,
    pub label: ScoreLabel,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub items: Vec<Item>,
}

impl Dataset {
    /// Joins features and labels by id. Every item starts in `train`.
    pub fn from_parts(features: Vec<NamedTensor>, labels: Vec<ScoreLabel>) -> Result<Dataset> {
        let mut by_id: HashMap<String, NamedTensor> = HashMap::new();
        for f in features {
            by_id.insert(f.name.clone(), f);
        }
        if by_id.len() != labels.len() {
            return Err(DataError::Inconsistent(format!(
                "{} feature tensors but {} labels",
                by_id.len(),
                labels.len()
            )));
        }
        let mut items = Vec::with_capacity(labels.len());
        for label in labels {
            let features = by_id
                .remove(&label.item_id)
                .ok_or_else(|| DataError::Inconsistent(format!("label '{}' has no features", label.item_id)))?;
            items.push(Item {
                id: label.item_id.clone(),
                features,
                label,
                split: Split::Train,
            });
        }
        let ds = Dataset { items };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        let shape = self.items.first().map(|i| i.features.shape.clone());
        for item in &self.items {
            if !ids.insert(item.id.as_str()) {
                return Err(DataError::Inconsistent(format!("duplicate id '{}'", item.id)));
            }
            if Some(&item.features.shape) != shape.as_ref() || item.features.shape.len() != 3 {
                return Err(DataError::Inconsistent(format!(
                    "item '{}' has feature shape {:?}, expected {:?} (rank 3)",
                    item.id, item.features.shape, shape
                )));
            }
        }
        Ok(())
    }

    pub fn feature_shape(&self) -> Option<&[usize]> {
        self.items.first().map(|i| i.features.shape.as_slice())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn split(&self, split: Split) -> Vec<&Item> {
        self.items.iter().filter(|i| i.split == split).collect()
    }

    pub fn has_split(&self, split: Split) -> bool {
        self.items.iter().any(|i| i.split == split)
    }

    pub fn labels(&self) -> Vec<ScoreLabel> {
        self.items.iter().map(|i| i.label.clone()).collect()
    }

    pub fn features(&self) -> Vec<NamedTensor> {
        self.items.iter().map(|i| i.features.clone()).collect()
    }

    pub fn splits_to_string(&self) -> String {
        let mut out = String::from("id,split\n");
        for item in &self.items {
            writeln!(out, "{},{}", item.id, item.split.as_str()).unwrap();
        }
        out
    }

    /// Applies an `id,split` table. Every item must be listed exactly once.
    pub fn apply_splits(&mut self, text: &str) -> Result<()> {
        let mut tags = HashMap::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            let row = i + 1;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fail = |reason: String| DataError::SplitRow { row, reason };
            let (id, tag) = line.split_once(',').ok_or_else(|| fail("expected 'id,split'".into()))?;
            let split = Split::parse(tag.trim()).ok_or_else(|| fail(format!("unknown split '{}'", tag.trim())))?;
            if tags.insert(id.trim().to_string(), split).is_some() {
                return Err(fail(format!("duplicate id '{id}'")));
            }
        }
        for item in &mut self.items {
            item.split = tags
                .remove(&item.id)
                .ok_or_else(|| DataError::Inconsistent(format!("item '{}' missing from splits table", item.id)))?;
        }
        if let Some(id) = tags.keys().next() {
            return Err(DataError::Inconsistent(format!(
                "splits table lists unknown item '{id}'"
            )));
        }
        Ok(())
    }
}

/// Deterministic shuffled partition into train/val/test.
///
/// Sizes are `floor(f·N)` for train and val; test receives the remainder.
pub fn split_dataset(ds: &Dataset, fractions: [f64; 3], seed: u64) -> Result<Dataset> {
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !(*f >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(DataError::Fractions(fractions));
    }
    let n = ds.len();
    let count = |f: f64| ((f * n as f64) + 1e-9).floor() as usize;
    let n_train = count(fractions[0]).min(n);
    let n_val = count(fractions[1]).min(n - n_train);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = ds.clone();
    for (rank, &idx) in order.iter().enumerate() {
        out.items[idx].split = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(out)
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_items: usize,
    /// `[C, H, W]`.
    pub feature_shape: [usize; 3],
    pub seed: u64,
    pub n_obs: u32,
    /// Centre and spread of the latent mean before clipping.
    pub mu_center: f64,
    pub mu_spread: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_items: 256,
            feature_shape: [64, 5, 5],
            seed: 0,
            n_obs: 210,
            mu_center: 5.5,
            mu_spread: 1.2,
            sigma_min: 0.3,
            sigma_max: 2.5,
        }
    }
}

impl SynthSpec {
    pub fn to_manifest(&self) -> String {
        let [c, h, w] = self.feature_shape;
        format!(
            "n_items={}\nchannels={c}\nheight={h}\nwidth={w}\nseed={}\nn_obs={}\nmu_center={}\nmu_spread={}\nsigma_min={}\nsigma_max={}\n",
            self.n_items,
            self.seed,
            self.n_obs,
            self.mu_center,
            self.mu_spread,
            self.sigma_min,
            self.sigma_max
        )
    }
}

/// Ground-truth latent values behind one synthetic item.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Latent {
    pub mu: f64,
    pub sigma: f64,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Synthetic dataset plus the latent (μ*, σ*) each histogram was drawn from.
pub fn generate_synthetic_with_latents(spec: &SynthSpec) -> Result<(Dataset, Vec<Latent>)> {
    let [c, h, w] = spec.feature_shape;
    if c == 0 || h == 0 || w == 0 || spec.n_obs == 0 {
        return Err(DataError::Inconsistent(format!(
            "synthetic spec needs positive extents and n_obs, got {:?} / {}",
            spec.feature_shape, spec.n_obs
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // Random linear read-outs of the per-channel means. Each GAP entry of
    // U(-1,1) features has variance 1/(3·H·W); scale so the read-out is ~N(0,1).
    let w_mu: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w_sigma: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let gap_var = 1.0 / (3.0 * (h * w) as f64);
    let norm = |v: &[f64]| (v.iter().map(|x| x * x).sum::<f64>() * gap_var).sqrt().max(1e-12);
    let (n_mu, n_sigma) = (norm(&w_mu), norm(&w_sigma));

    let mut items = Vec::with_capacity(spec.n_items);
    let mut latents = Vec::with_capacity(spec.n_items);
    let width = spec.n_items.max(1).to_string().len();
    for k in 0..spec.n_items {
        let data: Vec<f64> = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let gap: Vec<f64> = data
            .chunks_exact(h * w)
            .map(|p| p.iter().sum::<f64>() / (h * w) as f64)
            .collect();
        let dot = |wv: &[f64]| wv.iter().zip(&gap).map(|(a, b)| a * b).sum::<f64>();
        let mu = (spec.mu_center + spec.mu_spread * dot(&w_mu) / n_mu).clamp(1.5, 9.5);
        // softplus read-out squashed into [sigma_min, sigma_max]
        let s = softplus(1.5 * dot(&w_sigma) / n_sigma);
        let sigma = spec.sigma_min + (spec.sigma_max - spec.sigma_min) * (1.0 - (-s).exp());
        let normal = Normal::new(mu, sigma).expect("sigma is positive");
        let mut votes = [0u64; SCORE_BINS];
        for _ in 0..spec.n_obs {
            let v = normal.sample(&mut rng).round().clamp(1.0, SCORE_BINS as f64);
            votes[v as usize - 1] += 1;
        }
        let id = format!("item{k:0width$}");
        let label = label_from_votes(votes, id.clone())?;
        items.push(Item {
            features: NamedTensor {
                name: id.clone(),
                shape: vec![c, h, w],
                data,
            },
            id,
            label,
            split: Split::Train,
        });
        latents.push(Latent { mu, sigma });
    }
    Ok((Dataset { items }, latents))
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<Dataset> {
    generate_synthetic_with_latents(spec).map(|(ds, _)| ds)
}

/// File names inside a dataset directory.
pub const FEATURES_FILE: &str = "features.ftns";
pub const LABELS_FILE: &str = "labels.csv";
pub const SPLITS_FILE: &str = "splits.csv";
pub const MANIFEST_FILE: &str = "manifest.txt";

/// Writes features, labels and split tags into `dir`.
pub fn write_dataset_dir(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_tensor_file(&dir.join(FEATURES_FILE), &ds.features())?;
    let labels = dir.join(LABELS_FILE);
    fs::write(&labels, labels_to_string(&ds.labels())).map_err(io_err(&labels))?;
    let splits = dir.join(SPLITS_FILE);
    fs::write(&splits, ds.splits_to_string()).map_err(io_err(&splits))
}

/// Loads a dataset directory. Without a splits table every item is `train`.
pub fn read_dataset_dir(dir: &Path) -> Result<Dataset> {
    let features = read_tensor_file(&dir.join(FEATURES_FILE))?;
    let labels = load_labels(&dir.join(LABELS_FILE))?;
    let mut ds = Dataset::from_parts(features, labels)?;
    let splits = dir.join(SPLITS_FILE);
    if splits.exists() {
        ds.apply_splits(&fs::read_to_string(&splits).map_err(io_err(&splits))?)?;
    }
    Ok(ds)
}
