//! Synthetic video tasks where the label is carried by frame ORDER alone.
//!
//! Samples come in mirrored pairs sharing the exact same frames (noise
//! included): the class-1 twin is the class-0 sample played backwards. Any
//! model whose output is invariant to frame permutation therefore produces
//! identical logits for both twins and is pinned to chance accuracy by
//! construction — temporal modeling is necessary, not just helpful.
//!
//! * `direction` — a bright sprite traverses left-to-right (class 0) or
//!   right-to-left (class 1).
//! * `order` — the sprite appears at location A then location B, or B then A.
//!
//! Datasets serialize to a single binary file: magic `ZI2D`, version,
//! JSON header, then labels and little-endian f32 frames.

use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{Elem, Tensor};

pub const DATASET_MAGIC: [u8; 4] = *b"ZI2D";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthTask {
    Direction,
    Order,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticVideoSpec {
    pub task: SynthTask,
    pub frames: usize,
    pub image_size: usize,
    /// Sprite side in pixels.
    pub sprite: usize,
    pub noise_std: f64,
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    pub dataset_size: usize,
    pub seed: u64,
}

fn default_num_classes() -> usize {
    2
}

impl SyntheticVideoSpec {
    pub fn validate(&self) -> Result<()> {
        if self.sprite == 0 || self.sprite > self.image_size {
            return Err(Error::Config(format!(
                "sprite {} does not fit image {}",
                self.sprite, self.image_size
            )));
        }
        if self.frames == 0 || self.dataset_size == 0 {
            return Err(Error::Config(
                "frames and dataset_size must be positive".into(),
            ));
        }
        if self.num_classes != 2 {
            return Err(Error::Config(
                "synthetic tasks are binary (num_classes = 2)".into(),
            ));
        }
        if self.noise_std < 0.0 {
            return Err(Error::Config(format!(
                "noise_std {} must be >= 0",
                self.noise_std
            )));
        }
        if self.task == SynthTask::Order && self.frames < 2 {
            return Err(Error::Config("order task needs at least 2 frames".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct VideoDataset<E: Elem> {
    pub spec: SyntheticVideoSpec,
    /// `(frames [T, s, s, 1], label)` pairs.
    pub samples: Vec<(Tensor<E>, usize)>,
}

fn sprite_frame(
    s: usize,
    sprite: usize,
    x: usize,
    y: usize,
    noise_std: f64,
    rng: &mut SeededRng,
) -> Vec<f64> {
    let mut px = vec![0.0f64; s * s];
    for dy in 0..sprite {
        for dx in 0..sprite {
            px[(y + dy) * s + (x + dx)] = 1.0;
        }
    }
    if noise_std > 0.0 {
        for p in px.iter_mut() {
            *p += noise_std * rng.normal();
        }
    }
    px
}

/// Fully seed-determined dataset of mirrored twins, interleaved
/// (class 0, class 1, class 0, ...).
pub fn gen_synthetic<E: Elem>(spec: &SyntheticVideoSpec) -> Result<VideoDataset<E>> {
    spec.validate()?;
    let (t_len, s) = (spec.frames, spec.image_size);
    let span = s - spec.sprite;
    let root = SeededRng::new(spec.seed);
    let pairs = spec.dataset_size.div_ceil(2);
    let mut samples = Vec::with_capacity(spec.dataset_size);
    for pair in 0..pairs {
        let mut rng = root.derive(pair as u64);
        let frames: Vec<Vec<f64>> = match spec.task {
            SynthTask::Direction => {
                let y = rng.next_below(span as u64 + 1) as usize;
                (0..t_len)
                    .map(|t| {
                        let x = if t_len == 1 {
                            0
                        } else {
                            (t * span + (t_len - 1) / 2) / (t_len - 1)
                        };
                        sprite_frame(s, spec.sprite, x, y, spec.noise_std, &mut rng)
                    })
                    .collect()
            }
            SynthTask::Order => {
                // event A in the left half, event B in the right half
                let half_span = span / 2;
                let ax = rng.next_below(half_span as u64 + 1) as usize;
                let ay = rng.next_below(span as u64 + 1) as usize;
                let bx = span - rng.next_below(half_span as u64 + 1) as usize;
                let by = rng.next_below(span as u64 + 1) as usize;
                (0..t_len)
                    .map(|t| {
                        let (x, y) = if t < t_len / 2 { (ax, ay) } else { (bx, by) };
                        sprite_frame(s, spec.sprite, x, y, spec.noise_std, &mut rng)
                    })
                    .collect()
            }
        };
        let forward = Tensor::<E>::from_fn(vec![t_len, s, s, 1], |i| {
            E::from_f64(frames[i / (s * s)][i % (s * s)])
        });
        let backward = Tensor::<E>::from_fn(vec![t_len, s, s, 1], |i| {
            E::from_f64(frames[t_len - 1 - i / (s * s)][i % (s * s)])
        });
        samples.push((forward, 0));
        if samples.len() < spec.dataset_size {
            samples.push((backward, 1));
        }
    }
    Ok(VideoDataset {
        spec: spec.clone(),
        samples,
    })
}

// ── on-disk format ───────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    spec: SyntheticVideoSpec,
    count: u64,
    dtype: String,
}

pub fn dataset_to_bytes<E: Elem>(ds: &VideoDataset<E>) -> Result<Vec<u8>> {
    let header = DatasetHeader {
        spec: ds.spec.clone(),
        count: ds.samples.len() as u64,
        dtype: E::DTYPE.name().to_string(),
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::Data(format!("header encode: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(&DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    for (_, label) in &ds.samples {
        out.push(*label as u8);
    }
    for (frames, _) in &ds.samples {
        for &v in frames.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

pub fn dataset_from_bytes<E: Elem>(bytes: &[u8]) -> Result<VideoDataset<E>> {
    let need = |n: u64, have: usize, section: &'static str| -> Result<()> {
        if (have as u64) < n {
            Err(Error::Checkpoint(CheckpointError::Truncated {
                section,
                needed: n,
                available: have as u64,
            }))
        } else {
            Ok(())
        }
    };
    need(16, bytes.len(), "dataset header")?;
    if bytes[0..4] != DATASET_MAGIC {
        return Err(Error::Checkpoint(CheckpointError::BadMagic(
            bytes[0..4].try_into().unwrap(),
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != DATASET_VERSION {
        return Err(Error::Checkpoint(CheckpointError::UnsupportedVersion(
            version,
        )));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let body = 16u64
        .checked_add(hlen)
        .ok_or(Error::Checkpoint(CheckpointError::Truncated {
            section: "dataset header",
            needed: u64::MAX,
            available: bytes.len() as u64,
        }))?;
    need(body, bytes.len(), "dataset header")?;
    let header: DatasetHeader = serde_json::from_slice(&bytes[16..body as usize])
        .map_err(|e| Error::Checkpoint(CheckpointError::Manifest(e.to_string())))?;
    header.spec.validate()?;
    if header.dtype != E::DTYPE.name() {
        return Err(Error::Data(format!(
            "dataset holds {} samples but {} was requested",
            header.dtype,
            E::DTYPE.name()
        )));
    }
    let count = header.count as usize;
    let frame_elems = header
        .spec
        .frames
        .checked_mul(header.spec.image_size)
        .and_then(|v| v.checked_mul(header.spec.image_size))
        .ok_or_else(|| Error::Data("frame size overflow".into()))?;
    let per_sample = (frame_elems as u64)
        .checked_mul(E::DTYPE.size_bytes() as u64)
        .and_then(|b| b.checked_add(1))
        .ok_or_else(|| Error::Data("payload size overflow".into()))?;
    let payload = (count as u64)
        .checked_mul(per_sample)
        .ok_or_else(|| Error::Data("payload size overflow".into()))?;
    let total = body
        .checked_add(payload)
        .ok_or_else(|| Error::Data("payload size overflow".into()))?;
    need(total, bytes.len(), "dataset payload")?;
    if bytes.len() as u64 != total {
        return Err(Error::Data(format!(
            "trailing bytes: file is {} but payload ends at {}",
            bytes.len(),
            total
        )));
    }
    let labels = &bytes[body as usize..body as usize + count];
    let esz = E::DTYPE.size_bytes();
    let mut samples = Vec::with_capacity(count);
    let frames_base = body as usize + count;
    for (i, &raw_label) in labels.iter().enumerate() {
        let label = raw_label as usize;
        if label >= header.spec.num_classes {
            return Err(Error::Data(format!(
                "label {label} out of {} classes at sample {i}",
                header.spec.num_classes
            )));
        }
        let start = frames_base + i * frame_elems * esz;
        let data: Vec<E> = (0..frame_elems)
            .map(|j| E::read_le(&bytes[start + j * esz..]))
            .collect();
        let t = Tensor::new(
            vec![
                header.spec.frames,
                header.spec.image_size,
                header.spec.image_size,
                1,
            ],
            data,
        )?;
        samples.push((t, label));
    }
    Ok(VideoDataset {
        spec: header.spec,
        samples,
    })
}

pub fn save_dataset<E: Elem>(ds: &VideoDataset<E>, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, dataset_to_bytes(ds)?)?;
    Ok(())
}

pub fn load_dataset<E: Elem>(path: &std::path::Path) -> Result<VideoDataset<E>> {
    dataset_from_bytes(&std::fs::read(path)?)
}
