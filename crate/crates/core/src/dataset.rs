//! Synthetic two-domain data, zero-shot splits and the `EMB1` file format.
//!
//! Each class gets an anchor on a sphere. Photos scatter around the anchor;
//! sketches scatter around a fixed orthogonal transform of the anchor,
//! stretched by `1 + domain_gain`. The gap between domains is therefore
//! deterministic and invertible, and the encoder has to learn to undo it.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::batch::{Domain, EmbeddingBatch};
use crate::error::{Error, Result};
use crate::linalg::{norm, random_orthogonal, Matrix};

pub const EMB_MAGIC: &[u8; 4] = b"EMB1";
pub const EMB_HEADER_LEN: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub classes: usize,
    /// Samples per class in each domain.
    pub per_class: usize,
    pub dim: usize,
    /// Standard deviation of the per-sample Gaussian noise.
    pub sigma: f64,
    pub domain_gain: f64,
    /// Anchor sphere radius; defaults to `10 σ √dim` (or `√dim` when `σ = 0`).
    pub anchor_radius: Option<f64>,
    pub seed: u64,
    /// Separate seed for the per-sample noise. Reusing `seed` with a new
    /// `noise_seed` draws a fresh sample of the same classes.
    pub noise_seed: Option<u64>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            per_class: 200,
            dim: 16,
            sigma: 1.0,
            domain_gain: 0.5,
            anchor_radius: None,
            seed: 0,
            noise_seed: None,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidParameter("need at least 2 classes".into()));
        }
        if self.per_class < 1 || self.dim < 1 {
            return Err(Error::InvalidParameter("per_class and dim must be >= 1".into()));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if !(self.domain_gain >= 0.0 && self.domain_gain.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "domain_gain must be >= 0, got {}",
                self.domain_gain
            )));
        }
        if let Some(r) = self.anchor_radius {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::InvalidParameter(format!("anchor_radius must be > 0, got {r}")));
            }
        }
        Ok(())
    }

    pub fn radius(&self) -> f64 {
        self.anchor_radius.unwrap_or_else(|| {
            let r = 10.0 * self.sigma * (self.dim as f64).sqrt();
            if r > 0.0 {
                r
            } else {
                (self.dim as f64).sqrt()
            }
        })
    }

    pub fn num_samples(&self) -> usize {
        self.classes * self.per_class * 2
    }
}

/// Generated samples plus the hidden structure that produced them.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub samples: EmbeddingBatch,
    pub anchors: Matrix,
    /// Orthogonal map from photo space to sketch space.
    pub transform: Matrix,
}

/// Draws the dataset. Samples are ordered by class, photos before sketches.
pub fn generate(config: &SyntheticConfig) -> Result<SyntheticData> {
    config.validate()?;
    let d = config.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let transform = random_orthogonal(d, &mut rng);
    let radius = config.radius();
    let mut anchors = Matrix::zeros(config.classes, d);
    for k in 0..config.classes {
        let v: Vec<f64> = loop {
            let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            if norm(&v) > 0.0 {
                break v;
            }
        };
        let n = norm(&v);
        for (a, x) in anchors.row_mut(k).iter_mut().zip(&v) {
            *a = x / n * radius;
        }
    }

    let mut noise_rng = match config.noise_seed {
        Some(s) => ChaCha8Rng::seed_from_u64(s),
        None => rng,
    };
    let n = config.num_samples();
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let mut domains = Vec::with_capacity(n);
    let gain = 1.0 + config.domain_gain;
    for k in 0..config.classes {
        let anchor = anchors.row(k);
        let sketch_center: Vec<f64> = transform.mul_vec(anchor).iter().map(|v| v * gain).collect();
        for (domain, center) in [(Domain::Photo, anchor), (Domain::Sketch, &sketch_center[..])] {
            for _ in 0..config.per_class {
                for c in center {
                    let e: f64 = StandardNormal.sample(&mut noise_rng);
                    data.push(c + config.sigma * e);
                }
                labels.push(k);
                domains.push(domain);
            }
        }
    }
    Ok(SyntheticData {
        samples: EmbeddingBatch::new(Matrix::from_vec(n, d, data)?, labels, domains)?,
        anchors,
        transform,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    Standard,
    ZeroShot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub holdout: Vec<usize>,
    pub seed: u64,
}

impl SplitSpec {
    pub fn standard() -> Self {
        Self {
            mode: SplitMode::Standard,
            holdout: Vec::new(),
            seed: 0,
        }
    }

    pub fn zero_shot(holdout: Vec<usize>) -> Self {
        Self {
            mode: SplitMode::ZeroShot,
            holdout,
            seed: 0,
        }
    }

    /// Zero-shot split holding out `count` of `classes` classes chosen by `seed`.
    pub fn random_zero_shot(classes: usize, count: usize, seed: u64) -> Self {
        use rand::seq::index::sample;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut holdout = sample(&mut rng, classes, count.min(classes)).into_vec();
        holdout.sort_unstable();
        Self {
            mode: SplitMode::ZeroShot,
            holdout,
            seed,
        }
    }
}

/// Partitions `dataset` into `(source, target)`: target holds exactly the
/// held-out classes. In standard mode the target is empty.
pub fn split_zero_shot(dataset: &EmbeddingBatch, spec: &SplitSpec) -> Result<(EmbeddingBatch, EmbeddingBatch)> {
    match spec.mode {
        SplitMode::Standard => {
            if !spec.holdout.is_empty() {
                return Err(Error::InvalidParameter(
                    "standard split takes no held-out classes".into(),
                ));
            }
            Ok((dataset.clone(), dataset.select(&[])))
        }
        SplitMode::ZeroShot => {
            let held: BTreeSet<usize> = spec.holdout.iter().copied().collect();
            if held.is_empty() {
                return Err(Error::InvalidParameter("zero-shot split needs held-out classes".into()));
            }
            let present: BTreeSet<usize> = dataset.labels().iter().copied().collect();
            if let Some(missing) = held.iter().find(|c| !present.contains(c)) {
                return Err(Error::InvalidParameter(format!(
                    "held-out class {missing} does not occur in the dataset"
                )));
            }
            if present.iter().all(|c| held.contains(c)) {
                return Err(Error::InvalidParameter("held-out classes leave the source empty".into()));
            }
            let source = dataset.filter(|l, _| !held.contains(&l));
            let target = dataset.filter(|l, _| held.contains(&l));
            Ok((source, target))
        }
    }
}

/// Serialises a batch as `EMB1`: magic, `u32` N, `u32` D, then per record D
/// `f32` values, a `u32` label and a domain byte, all little-endian.
pub fn write_embeddings_to<W: Write>(mut w: W, batch: &EmbeddingBatch) -> Result<()> {
    let n = u32::try_from(batch.len()).map_err(|_| Error::Format("more than 2^32 records".into()))?;
    let d = u32::try_from(batch.dim()).map_err(|_| Error::Format("dimension exceeds 2^32".into()))?;
    w.write_all(EMB_MAGIC)?;
    w.write_all(&n.to_le_bytes())?;
    w.write_all(&d.to_le_bytes())?;
    for i in 0..batch.len() {
        for &v in batch.vector(i) {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        let label = u32::try_from(batch.labels()[i])
            .map_err(|_| Error::Format(format!("label {} exceeds u32", batch.labels()[i])))?;
        w.write_all(&label.to_le_bytes())?;
        w.write_all(&[batch.domains()[i].to_byte()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_embeddings_from<R: Read>(mut r: R) -> Result<EmbeddingBatch> {
    let mut header = [0u8; EMB_HEADER_LEN];
    r.read_exact(&mut header)
        .map_err(|_| Error::Format("truncated EMB1 header".into()))?;
    if &header[..4] != EMB_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"EMB1\"",
            String::from_utf8_lossy(&header[..4])
        )));
    }
    let n = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let record = d
        .checked_mul(4)
        .and_then(|b| b.checked_add(5))
        .ok_or_else(|| Error::Format(format!("dimension {d} overflows the record size")))?;
    n.checked_mul(record)
        .ok_or_else(|| Error::Format(format!("{n} records of {record} bytes overflow")))?;

    let mut buf = vec![0u8; record];
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut domains = Vec::new();
    for i in 0..n {
        r.read_exact(&mut buf)
            .map_err(|_| Error::Format(format!("truncated at record {i} of {n}")))?;
        for c in buf[..4 * d].chunks_exact(4) {
            data.push(f32::from_le_bytes(c.try_into().unwrap()) as f64);
        }
        labels.push(u32::from_le_bytes(buf[4 * d..4 * d + 4].try_into().unwrap()) as usize);
        domains.push(Domain::from_byte(buf[4 * d + 4])?);
    }
    EmbeddingBatch::new(Matrix::from_vec(n, d, data)?, labels, domains)
}

pub fn write_embeddings(path: impl AsRef<Path>, batch: &EmbeddingBatch) -> Result<()> {
    write_embeddings_to(BufWriter::new(File::create(path)?), batch)
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingBatch> {
    read_embeddings_from(BufReader::new(File::open(path)?))
}
