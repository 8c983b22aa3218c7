//! Video records, the synthetic corpus generator, temporal augmentation,
//! duration-sorted batching, and the dataset file format.
//!
//! Dataset file layout (integers little-endian):
//!
//! | bytes   | content                                        |
//! |---------|------------------------------------------------|
//! | 8       | magic `AGTDATA\0`                              |
//! | 4       | format version (`u32`, currently 1)            |
//! | 8       | header length `H` (`u64`)                      |
//! | H       | UTF-8 JSON header                              |
//! | 8 × N   | `f64` feature payload, records back to back    |
//!
//! The header is `{"input_dim": C, "records": [...]}` where each record
//! entry carries `id`, `duration` (seconds), `chunks` (feature rows),
//! `offset` (first payload element) and `annotations` (`class`, `start`,
//! `end` in seconds, zero-based class).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{contract_err, Error, Result};
use crate::matching::{GroundTruthSet, Instance, Segment};
use crate::nn::NodeMask;

pub const DATASET_MAGIC: &[u8; 8] = b"AGTDATA\0";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub class: usize,
    pub start: f64,
    pub end: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    /// Seconds.
    pub duration: f64,
    /// `T' × C_in`.
    pub features: Tensor,
    pub annotations: Vec<Annotation>,
}

impl VideoRecord {
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Error::parse(Some(&self.id), msg);
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(err(format!("duration {} must be positive", self.duration)));
        }
        self.features.dims2().map_err(|e| err(e.to_string()))?;
        if !self.features.is_finite() {
            return Err(err("non-finite feature value".into()));
        }
        for a in &self.annotations {
            if !(a.start.is_finite()
                && a.end.is_finite()
                && 0.0 <= a.start
                && a.start <= a.end
                && a.end <= self.duration)
            {
                return Err(err(format!(
                    "annotation [{}, {}] outside [0, {}]",
                    a.start, a.end, self.duration
                )));
            }
        }
        Ok(())
    }

    pub fn chunks(&self) -> usize {
        self.features.rows()
    }

    /// Annotations with times divided by the duration.
    pub fn targets(&self) -> GroundTruthSet {
        GroundTruthSet::new(
            self.annotations
                .iter()
                .map(|a| Instance {
                    class: a.class,
                    segment: Segment::new(
                        (a.start / self.duration).clamp(0.0, 1.0),
                        (a.end / self.duration).clamp(0.0, 1.0),
                    ),
                })
                .collect(),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_videos: usize,
    pub input_dim: usize,
    pub num_classes: usize,
    /// Inclusive range of chunks per video.
    pub chunks: (usize, usize),
    /// Inclusive range of action instances per video.
    pub instances: (usize, usize),
    /// Inclusive range of instance lengths in chunks (clipped to the video).
    pub instance_chunks: (usize, usize),
    /// Probability that an instance is placed overlapping an earlier one.
    pub overlap_prob: f64,
    /// Probability that an instance reuses the class of an earlier one.
    pub recurrence_prob: f64,
    pub noise: f64,
    pub prototype_scale: f64,
    pub marker_scale: f64,
    pub chunk_seconds: f64,
    /// Seeds the per-video draws.
    pub seed: u64,
    /// Seeds class prototypes and boundary markers; corpora sharing it share
    /// the same class appearance.
    pub prototype_seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_videos: 20,
            input_dim: 16,
            num_classes: 3,
            chunks: (24, 40),
            instances: (1, 5),
            instance_chunks: (3, 10),
            overlap_prob: 0.2,
            recurrence_prob: 0.3,
            noise: 0.1,
            prototype_scale: 1.0,
            marker_scale: 1.0,
            chunk_seconds: 1.0,
            seed: 0,
            prototype_seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_videos == 0 {
            return Err(contract_err!("synthetic corpus needs at least one video"));
        }
        if self.num_classes == 0 || self.input_dim == 0 {
            return Err(contract_err!(
                "synthetic corpus needs at least one class and one feature channel"
            ));
        }
        if self.num_classes > self.input_dim {
            return Err(contract_err!(
                "{} classes need {} orthogonal prototypes but features have {} channels",
                self.num_classes,
                self.num_classes,
                self.input_dim
            ));
        }
        for (name, (lo, hi)) in [
            ("chunks", self.chunks),
            ("instances", self.instances),
            ("instance_chunks", self.instance_chunks),
        ] {
            if lo > hi {
                return Err(contract_err!(
                    "synthetic range {name} [{lo}, {hi}] is empty"
                ));
            }
        }
        if self.chunks.0 == 0 || self.instance_chunks.0 == 0 {
            return Err(contract_err!(
                "videos and instances need at least one chunk"
            ));
        }
        for (name, p) in [
            ("overlap_prob", self.overlap_prob),
            ("recurrence_prob", self.recurrence_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(contract_err!("{name} {p} outside [0, 1]"));
            }
        }
        for (name, v) in [
            ("noise", self.noise),
            ("prototype_scale", self.prototype_scale),
            ("marker_scale", self.marker_scale),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(contract_err!("{name} must be finite and non-negative"));
            }
        }
        if !(self.chunk_seconds.is_finite() && self.chunk_seconds > 0.0) {
            return Err(contract_err!("chunk_seconds must be positive"));
        }
        Ok(())
    }
}

/// Class appearance shared by every video of a corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassVectors {
    pub prototypes: Vec<Vec<f64>>,
    pub start_markers: Vec<Vec<f64>>,
    pub end_markers: Vec<Vec<f64>>,
}

fn gaussian_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn normalized(mut v: Vec<f64>, scale: f64) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x *= scale / norm);
    v
}

impl ClassVectors {
    /// Orthonormal prototypes (Gram–Schmidt on Gaussian draws) and random
    /// unit-direction start/end markers.
    pub fn generate(spec: &SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.prototype_seed);
        let c = spec.input_dim;
        let mut basis: Vec<Vec<f64>> = Vec::new();
        while basis.len() < spec.num_classes {
            let mut v = gaussian_vec(&mut rng, c);
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
            if v.iter().map(|x| x * x).sum::<f64>() > 1e-6 {
                basis.push(normalized(v, 1.0));
            }
        }
        let prototypes = basis
            .into_iter()
            .map(|b| b.into_iter().map(|x| x * spec.prototype_scale).collect())
            .collect();
        let mut markers = |_| normalized(gaussian_vec(&mut rng, c), spec.marker_scale);
        let start_markers = (0..spec.num_classes).map(&mut markers).collect();
        let end_markers = (0..spec.num_classes).map(&mut markers).collect();
        Ok(Self {
            prototypes,
            start_markers,
            end_markers,
        })
    }
}

/// Covered chunk span `first..=last` of an instance.
#[derive(Clone, Copy, Debug)]
struct Span {
    class: usize,
    first: usize,
    last: usize,
}

fn draw_spans(rng: &mut impl Rng, spec: &SyntheticSpec, chunks: usize) -> Vec<Span> {
    let count = rng.gen_range(spec.instances.0..=spec.instances.1);
    let mut spans: Vec<Span> = Vec::with_capacity(count);
    for _ in 0..count {
        let len = rng
            .gen_range(spec.instance_chunks.0..=spec.instance_chunks.1)
            .min(chunks);
        let class = if !spans.is_empty() && rng.gen_bool(spec.recurrence_prob) {
            spans[rng.gen_range(0..spans.len())].class
        } else {
            rng.gen_range(0..spec.num_classes)
        };
        let first = if !spans.is_empty() && rng.gen_bool(spec.overlap_prob) {
            let host = spans[rng.gen_range(0..spans.len())];
            rng.gen_range(host.first..=host.last).min(chunks - len)
        } else {
            let free = |f: usize| spans.iter().all(|s| f + len <= s.first || f > s.last);
            let mut pick = rng.gen_range(0..=chunks - len);
            for _ in 0..32 {
                if free(pick) {
                    break;
                }
                pick = rng.gen_range(0..=chunks - len);
            }
            pick
        };
        spans.push(Span {
            class,
            first,
            last: first + len - 1,
        });
    }
    spans.sort_by_key(|s| (s.first, s.last, s.class));
    spans
}

/// Deterministic corpus: chunk features are Gaussian noise plus, for every
/// covering instance, its class prototype, with start/end markers added at
/// the first and last covered chunk.
pub fn synthesize_dataset(spec: &SyntheticSpec) -> Result<Vec<VideoRecord>> {
    let classes = ClassVectors::generate(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let c = spec.input_dim;
    let mut records = Vec::with_capacity(spec.num_videos);
    for v in 0..spec.num_videos {
        let chunks = rng.gen_range(spec.chunks.0..=spec.chunks.1);
        let spans = draw_spans(&mut rng, spec, chunks);
        let mut data: Vec<f64> = (0..chunks * c)
            .map(|_| spec.noise * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut add = |row: usize, vec: &[f64]| {
            data[row * c..(row + 1) * c]
                .iter_mut()
                .zip(vec)
                .for_each(|(d, x)| *d += x);
        };
        for s in &spans {
            for t in s.first..=s.last {
                add(t, &classes.prototypes[s.class]);
            }
            add(s.first, &classes.start_markers[s.class]);
            add(s.last, &classes.end_markers[s.class]);
        }
        let annotations = spans
            .iter()
            .map(|s| Annotation {
                class: s.class,
                start: s.first as f64 * spec.chunk_seconds,
                end: (s.last + 1) as f64 * spec.chunk_seconds,
            })
            .collect();
        records.push(VideoRecord {
            id: format!("video_{v:05}"),
            duration: chunks as f64 * spec.chunk_seconds,
            features: Tensor::matrix(chunks, c, data)?,
            annotations,
        });
    }
    Ok(records)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentMode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub max_positions: usize,
    /// Temporal repetition factor before resampling in training.
    pub repeat: usize,
    pub mode: AugmentMode,
}

/// Row indices chosen by [`augment_features`].
pub fn augment_indices(len: usize, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if len == 0 {
        return Err(contract_err!("cannot augment an empty feature sequence"));
    }
    if cfg.repeat == 0 || cfg.max_positions == 0 {
        return Err(contract_err!(
            "repeat factor and max_positions must be at least 1"
        ));
    }
    let out = len.min(cfg.max_positions);
    let idx = match (cfg.mode, len <= cfg.max_positions) {
        (AugmentMode::Eval, true) => (0..len).collect(),
        (AugmentMode::Eval, false) => (0..out).map(|k| k * len / out).collect(),
        (AugmentMode::Train, true) => {
            let mut pos = sample(rng, len * cfg.repeat, out).into_vec();
            pos.sort_unstable();
            pos.into_iter().map(|p| p / cfg.repeat).collect()
        }
        (AugmentMode::Train, false) => {
            let mut pos = sample(rng, len, out).into_vec();
            pos.sort_unstable();
            pos
        }
    };
    Ok(idx)
}

/// Output length is always `min(T', max_positions)`.
pub fn augment_features(
    features: &Tensor,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let (len, c) = features.dims2()?;
    let idx = augment_indices(len, cfg, rng)?;
    let data = idx
        .iter()
        .flat_map(|&i| features.row(i).iter().copied())
        .collect();
    Tensor::matrix(idx.len(), c, data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    /// One `N_max × C_in` matrix per record, zero-padded.
    pub features: Vec<Tensor>,
    pub masks: Vec<NodeMask>,
    pub targets: Vec<GroundTruthSet>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn padded_len(&self) -> usize {
        self.features.first().map_or(0, |f| f.rows())
    }
}

/// Sorts by duration, cuts contiguous groups of `batch_size`, shuffles the
/// group order, then augments and zero-pads each record.
pub fn make_batches(
    records: &[VideoRecord],
    batch_size: usize,
    augment: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(contract_err!("batch_size must be at least 1"));
    }
    if let Some(r) = records.iter().find(|r| !(r.duration > 0.0)) {
        return Err(contract_err!("record {} has non-positive duration", r.id));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[a].duration.total_cmp(&records[b].duration));
    let mut groups: Vec<&[usize]> = order.chunks(batch_size).collect();
    groups.shuffle(rng);
    groups
        .into_iter()
        .map(|group| {
            let feats = group
                .iter()
                .map(|&i| augment_features(&records[i].features, augment, rng))
                .collect::<Result<Vec<_>>>()?;
            let n_max = feats.iter().map(Tensor::rows).max().unwrap_or(0);
            let mut batch = Batch {
                ids: Vec::new(),
                features: Vec::new(),
                masks: Vec::new(),
                targets: Vec::new(),
            };
            for (&i, f) in group.iter().zip(feats) {
                let (n, c) = f.dims2()?;
                let mut data = f.into_data();
                data.resize(n_max * c, 0.0);
                batch.ids.push(records[i].id.clone());
                batch.features.push(Tensor::matrix(n_max, c, data)?);
                batch.masks.push(NodeMask::prefix(n, n_max)?);
                batch.targets.push(records[i].targets());
            }
            Ok(batch)
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct FileHeader {
    input_dim: usize,
    records: Vec<FileRecord>,
}

#[derive(Serialize, Deserialize)]
struct FileRecord {
    id: String,
    duration: f64,
    chunks: usize,
    offset: usize,
    annotations: Vec<Annotation>,
}

pub fn write_dataset(records: &[VideoRecord], mut w: impl Write) -> Result<()> {
    let input_dim = records.first().map_or(0, |r| r.features.cols());
    let mut offset = 0;
    let mut entries = Vec::with_capacity(records.len());
    for r in records {
        r.validate()?;
        if r.features.cols() != input_dim {
            return Err(Error::parse(
                Some(&r.id),
                format!(
                    "{} feature channels, corpus has {input_dim}",
                    r.features.cols()
                ),
            ));
        }
        entries.push(FileRecord {
            id: r.id.clone(),
            duration: r.duration,
            chunks: r.chunks(),
            offset,
            annotations: r.annotations.clone(),
        });
        offset += r.features.numel();
    }
    let json = serde_json::to_vec(&FileHeader {
        input_dim,
        records: entries,
    })
    .map_err(|e| Error::parse(None, e.to_string()))?;
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for r in records {
        for v in r.features.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(mut r: impl Read) -> Result<Vec<VideoRecord>> {
    let bad = |msg: &str| Error::parse(None, msg);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| bad("file too short for a dataset header"))?;
    if &magic != DATASET_MAGIC {
        return Err(bad("not a dataset file (bad magic)"));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)
        .map_err(|_| bad("truncated dataset header"))?;
    let version = u32::from_le_bytes(word);
    if version != DATASET_VERSION {
        return Err(Error::parse(
            None,
            format!("unsupported dataset version {version}"),
        ));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)
        .map_err(|_| bad("truncated dataset header"))?;
    let len = u64::from_le_bytes(len);
    let mut json = Vec::new();
    r.by_ref().take(len).read_to_end(&mut json)?;
    if json.len() as u64 != len {
        return Err(bad("truncated dataset header"));
    }
    let header: FileHeader = serde_json::from_slice(&json)
        .map_err(|e| Error::parse(None, format!("dataset header: {e}")))?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() % 8 != 0 {
        return Err(bad("dataset payload is not a whole number of f64 values"));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let c = header.input_dim;
    let mut expected = 0;
    let mut records = Vec::with_capacity(header.records.len());
    for e in header.records {
        let n = e.chunks * c;
        if e.chunks == 0 || c == 0 {
            return Err(Error::parse(Some(&e.id), "record has no feature rows"));
        }
        if e.offset != expected || e.offset + n > values.len() {
            return Err(Error::parse(
                Some(&e.id),
                "feature payload missing or misplaced",
            ));
        }
        let features = Tensor::matrix(e.chunks, c, values[e.offset..e.offset + n].to_vec())
            .map_err(|err| Error::parse(Some(&e.id), err.to_string()))?;
        let record = VideoRecord {
            id: e.id,
            duration: e.duration,
            features,
            annotations: e.annotations,
        };
        record.validate()?;
        records.push(record);
        expected += n;
    }
    if expected != values.len() {
        return Err(bad("trailing data after dataset payload"));
    }
    Ok(records)
}

pub fn save_dataset(records: &[VideoRecord], path: impl AsRef<Path>) -> Result<()> {
    write_dataset(records, BufWriter::new(File::create(path)?))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<VideoRecord>> {
    read_dataset(BufReader::new(File::open(path)?))
}
