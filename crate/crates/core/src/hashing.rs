//! Binary codes from a small autoencoder trained over the class prototypes.
//!
//! The encoder `E` is affine followed by `tanh`, the decoder is affine. The
//! reconstruction term keeps the prototype layout, the scatter term spreads
//! the encoded prototypes apart and the optional quantisation term pulls
//! every embedding onto the signed code of its class.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::batch::EmbeddingBatch;
use crate::encoder::Dense;
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix};
use crate::losses::PrototypeSet;
use crate::training::{adam_step, AdamHyper, AdamState};

pub const HSH_MAGIC: &[u8; 4] = b"HSH1";
pub const SUPPORTED_BITS: [usize; 3] = [32, 64, 128];
pub const DEFAULT_HASH_STEPS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HashAutoencoder {
    pub encoder: Dense,
    pub decoder: Dense,
}

impl HashAutoencoder {
    pub fn new(encoder: Dense, decoder: Dense) -> Result<Self> {
        if decoder.in_dim() != encoder.out_dim() || decoder.out_dim() != encoder.in_dim() {
            return Err(Error::DimensionMismatch(format!(
                "encoder {}->{} and decoder {}->{} do not mirror each other",
                encoder.in_dim(),
                encoder.out_dim(),
                decoder.in_dim(),
                decoder.out_dim()
            )));
        }
        Ok(Self { encoder, decoder })
    }

    pub fn bits(&self) -> usize {
        self.encoder.out_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.in_dim()
    }

    pub fn encode(&self, x: &[f64]) -> Vec<f64> {
        self.encoder.apply(x).into_iter().map(f64::tanh).collect()
    }

    pub fn decode(&self, u: &[f64]) -> Vec<f64> {
        self.decoder.apply(u)
    }

    fn tensors(&self) -> Vec<&[f64]> {
        vec![
            self.encoder.weight.as_slice(),
            &self.encoder.bias,
            self.decoder.weight.as_slice(),
            &self.decoder.bias,
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.encoder.weight.as_mut_slice(),
            &mut self.encoder.bias,
            self.decoder.weight.as_mut_slice(),
            &mut self.decoder.bias,
        ]
    }
}

/// Which terms of the hashing objective are optimised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashTerms {
    pub rec: bool,
    pub scat: bool,
    pub quant: bool,
}

impl HashTerms {
    pub const REC_SCAT: HashTerms = HashTerms {
        rec: true,
        scat: true,
        quant: false,
    };
}

impl Default for HashTerms {
    fn default() -> Self {
        Self::REC_SCAT
    }
}

/// Parses `r`, `s`, `q` joined by `+`, e.g. `r+s` or `r+s+q`.
impl FromStr for HashTerms {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut t = HashTerms {
            rec: false,
            scat: false,
            quant: false,
        };
        for part in s.split('+').map(str::trim) {
            let slot = match part {
                "r" | "rec" => &mut t.rec,
                "s" | "scat" => &mut t.scat,
                "q" | "quant" => &mut t.quant,
                other => {
                    return Err(Error::InvalidParameter(format!(
                        "unknown hash loss term '{other}' (expected r, s or q)"
                    )))
                }
            };
            if *slot {
                return Err(Error::InvalidParameter(format!("hash loss term '{part}' repeated")));
            }
            *slot = true;
        }
        Ok(t)
    }
}

impl fmt::Display for HashTerms {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = [(self.rec, "r"), (self.scat, "s"), (self.quant, "q")]
            .into_iter()
            .filter_map(|(on, n)| on.then_some(n))
            .collect();
        f.write_str(&parts.join("+"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HashLossTerms {
    pub rec: f64,
    pub scat: f64,
    pub quant: f64,
    pub total: f64,
}

fn sign_target(u: &[f64]) -> Vec<f64> {
    u.iter().map(|&v| if v > 0.0 { 1.0 } else { -1.0 }).collect()
}

fn check_inputs(protos: &PrototypeSet, embeddings: Option<&EmbeddingBatch>, ae: &HashAutoencoder, terms: HashTerms) -> Result<()> {
    if protos.num_classes() < 2 {
        return Err(Error::InvalidParameter("hashing needs at least 2 prototypes".into()));
    }
    if protos.dim() != ae.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "prototypes have dim {}, autoencoder expects {}",
            protos.dim(),
            ae.input_dim()
        )));
    }
    match (terms.quant, embeddings) {
        (true, None) => Err(Error::InvalidParameter("quantisation term needs embeddings".into())),
        (true, Some(e)) => {
            if e.is_empty() {
                return Err(Error::Empty("quantisation embeddings"));
            }
            if e.dim() != protos.dim() {
                return Err(Error::DimensionMismatch(format!(
                    "embeddings have dim {}, prototypes {}",
                    e.dim(),
                    protos.dim()
                )));
            }
            e.check_labels(protos.num_classes())
        }
        (false, _) => Ok(()),
    }
}

/// Loss terms and gradients (encoder W, b, decoder W, b). `quant_rows`
/// restricts the quantisation term to a subset of the embeddings.
fn loss_and_grads(
    protos: &PrototypeSet,
    embeddings: Option<&EmbeddingBatch>,
    quant_rows: Option<&[usize]>,
    ae: &HashAutoencoder,
    terms: HashTerms,
) -> Result<(HashLossTerms, HashAutoencoder)> {
    check_inputs(protos, embeddings, ae, terms)?;
    let k = protos.num_classes();
    let bits = ae.bits();
    let mut grad = HashAutoencoder {
        encoder: Dense::zeros(bits, ae.input_dim()),
        decoder: Dense::zeros(ae.input_dim(), bits),
    };
    let encoded: Vec<Vec<f64>> = (0..k).map(|j| ae.encode(protos.center(j))).collect();
    let mut du: Vec<Vec<f64>> = vec![vec![0.0; bits]; k];

    let mut rec = 0.0;
    for (j, u) in encoded.iter().enumerate() {
        let c = protos.center(j);
        let r = ae.decode(u);
        let diff: Vec<f64> = r.iter().zip(c).map(|(a, b)| a - b).collect();
        rec += dot(&diff, &diff);
        if terms.rec {
            let dr: Vec<f64> = diff.iter().map(|v| 2.0 * v / k as f64).collect();
            grad.decoder.weight.add_outer(1.0, &dr, u);
            crate::linalg::axpy(1.0, &dr, &mut grad.decoder.bias);
            let back = ae.decoder.weight.tr_mul_vec(&dr);
            crate::linalg::axpy(1.0, &back, &mut du[j]);
        }
    }
    rec /= k as f64;

    let norms: Vec<f64> = encoded.iter().map(|u| norm(u)).collect();
    if let Some(j) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::ZeroNorm(format!("encoded prototype {j}")));
    }
    let unit: Vec<Vec<f64>> = encoded
        .iter()
        .zip(&norms)
        .map(|(u, n)| u.iter().map(|v| v / n).collect())
        .collect();
    let pairs = (k * (k - 1)) as f64;
    let mut sum = vec![0.0; bits];
    for u in &unit {
        crate::linalg::axpy(1.0, u, &mut sum);
    }
    let scat = ((dot(&sum, &sum) - unit.iter().map(|u| dot(u, u)).sum::<f64>()) / pairs).clamp(-1.0, 1.0);
    if terms.scat {
        for j in 0..k {
            // d/du_j of the pair sum is (S - u_j); project out the radial part
            let g: Vec<f64> = sum.iter().zip(&unit[j]).map(|(s, u)| 2.0 * (s - u) / pairs).collect();
            let radial = dot(&g, &unit[j]);
            for b in 0..bits {
                du[j][b] += (g[b] - radial * unit[j][b]) / norms[j];
            }
        }
    }

    for (j, d) in du.iter().enumerate() {
        backprop_encoder(&mut grad, protos.center(j), &encoded[j], d);
    }

    let mut quant = 0.0;
    if let (true, Some(emb)) = (terms.quant, embeddings) {
        let targets: Vec<Vec<f64>> = encoded.iter().map(|u| sign_target(u)).collect();
        let all: Vec<usize>;
        let rows = match quant_rows {
            Some(r) => r,
            None => {
                all = (0..emb.len()).collect();
                &all
            }
        };
        let n = rows.len() as f64;
        for &i in rows {
            let x = emb.vector(i);
            let u = ae.encode(x);
            let t = &targets[emb.labels()[i]];
            let diff: Vec<f64> = u.iter().zip(t).map(|(a, b)| a - b).collect();
            quant += dot(&diff, &diff);
            let d: Vec<f64> = diff.iter().map(|v| 2.0 * v / n).collect();
            backprop_encoder(&mut grad, x, &u, &d);
        }
        quant /= n;
    }

    let total = rec * f64::from(u8::from(terms.rec))
        + scat * f64::from(u8::from(terms.scat))
        + quant * f64::from(u8::from(terms.quant));
    Ok((HashLossTerms { rec, scat, quant, total }, grad))
}

fn backprop_encoder(grad: &mut HashAutoencoder, x: &[f64], u: &[f64], du: &[f64]) {
    let dz: Vec<f64> = du.iter().zip(u).map(|(g, u)| g * (1.0 - u * u)).collect();
    grad.encoder.weight.add_outer(1.0, &dz, x);
    crate::linalg::axpy(1.0, &dz, &mut grad.encoder.bias);
}

/// Hashing objective on the prototypes; `embeddings` are required when the
/// quantisation term is enabled. `total` sums only the enabled terms.
pub fn hash_losses(
    protos: &PrototypeSet,
    embeddings: Option<&EmbeddingBatch>,
    ae: &HashAutoencoder,
    terms: HashTerms,
) -> Result<HashLossTerms> {
    loss_and_grads(protos, embeddings, None, ae, terms).map(|(t, _)| t)
}

/// Gradient of the enabled terms, flattened in the order encoder W, encoder
/// b, decoder W, decoder b.
pub fn hash_gradients(
    protos: &PrototypeSet,
    embeddings: Option<&EmbeddingBatch>,
    ae: &HashAutoencoder,
    terms: HashTerms,
) -> Result<Vec<Vec<f64>>> {
    let (_, g) = loss_and_grads(protos, embeddings, None, ae, terms)?;
    Ok(g.tensors().iter().map(|t| t.to_vec()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HashConfig {
    pub bits: usize,
    pub steps: usize,
    pub seed: u64,
    pub terms: HashTerms,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Embeddings sampled per step for the quantisation term.
    pub quant_batch: usize,
}

impl Default for HashConfig {
    fn default() -> Self {
        Self {
            bits: 32,
            steps: DEFAULT_HASH_STEPS,
            seed: 0,
            terms: HashTerms::REC_SCAT,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 5e-4,
            quant_batch: 16,
        }
    }
}

impl HashConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bits < 1 {
            return Err(Error::InvalidParameter("bit width must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidParameter(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.quant_batch < 1 {
            return Err(Error::InvalidParameter("quant_batch must be >= 1".into()));
        }
        if !(self.terms.rec || self.terms.scat || self.terms.quant) {
            return Err(Error::InvalidParameter("no hash loss term enabled".into()));
        }
        Ok(())
    }
}

/// Initial autoencoder: Gaussian weights with variance `1/fan_in`, zero biases.
pub fn init_hasher(dim: usize, bits: usize, seed: u64) -> HashAutoencoder {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dense = |out: usize, inp: usize| {
        let normal = Normal::new(0.0, 1.0 / (inp as f64).sqrt()).unwrap();
        let data = (0..out * inp).map(|_| normal.sample(&mut rng)).collect();
        Dense::new(Matrix::from_vec(out, inp, data).unwrap(), vec![0.0; out]).unwrap()
    };
    let encoder = dense(bits, dim);
    let decoder = dense(dim, bits);
    HashAutoencoder { encoder, decoder }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HashTraining {
    pub autoencoder: HashAutoencoder,
    pub initial: HashLossTerms,
    #[serde(rename = "final")]
    pub final_terms: HashLossTerms,
}

/// Adam on the enabled hashing terms with linear learning-rate decay.
pub fn train_hasher(
    protos: &PrototypeSet,
    embeddings: Option<&EmbeddingBatch>,
    cfg: &HashConfig,
) -> Result<HashTraining> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ae = init_hasher(protos.dim(), cfg.bits, rng.random());
    let initial = hash_losses(protos, embeddings, &ae, cfg.terms)?;
    let mut state = AdamState::new(&ae.tensors());
    for step in 0..cfg.steps {
        let lr = crate::training::lr_schedule(step, cfg.steps, cfg.lr)?;
        let rows: Option<Vec<usize>> = match (cfg.terms.quant, embeddings) {
            (true, Some(e)) => Some((0..cfg.quant_batch).map(|_| rng.random_range(0..e.len())).collect()),
            _ => None,
        };
        let (terms, g) = loss_and_grads(protos, embeddings, rows.as_deref(), &ae, cfg.terms)?;
        if !terms.total.is_finite() {
            return Err(Error::Diverged { step, loss: terms.total });
        }
        let grads: Vec<Vec<f64>> = g.tensors().iter().map(|t| t.to_vec()).collect();
        let hyper = AdamHyper {
            lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: 1e-8,
            weight_decay: cfg.weight_decay,
        };
        adam_step(&mut ae.tensors_mut(), &grads, &mut state, &hyper)?;
    }
    let final_terms = hash_losses(protos, embeddings, &ae, cfg.terms)?;
    Ok(HashTraining {
        autoencoder: ae,
        initial,
        final_terms,
    })
}

/// A fixed-width bit string; bit `b` lives in word `b / 64`, position `b % 64`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct HashCode {
    bits: usize,
    words: Vec<u64>,
}

impl HashCode {
    pub fn zeros(bits: usize) -> Self {
        Self {
            bits,
            words: vec![0; bits.div_ceil(64)],
        }
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        let mut c = Self::zeros(bits.len());
        for (i, &b) in bits.iter().enumerate() {
            c.set(i, b);
        }
        c
    }

    pub fn len(&self) -> usize {
        self.bits
    }

    pub fn is_empty(&self) -> bool {
        self.bits == 0
    }

    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.bits, "bit {i} out of range for width {}", self.bits);
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn set(&mut self, i: usize, on: bool) {
        assert!(i < self.bits, "bit {i} out of range for width {}", self.bits);
        let mask = 1u64 << (i % 64);
        if on {
            self.words[i / 64] |= mask;
        } else {
            self.words[i / 64] &= !mask;
        }
    }

    /// Bitwise complement within the code width.
    pub fn complement(&self) -> Self {
        let mut c = Self::zeros(self.bits);
        for i in 0..self.bits {
            c.set(i, !self.get(i));
        }
        c
    }

    /// `⌈bits/8⌉` bytes, bit 0 in the least significant bit of byte 0.
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.bits.div_ceil(8);
        self.words.iter().flat_map(|w| w.to_le_bytes()).take(n).collect()
    }

    pub fn from_bytes(bytes: &[u8], bits: usize) -> Result<Self> {
        if bytes.len() != bits.div_ceil(8) {
            return Err(Error::Format(format!(
                "{} bytes cannot hold exactly {bits} bits",
                bytes.len()
            )));
        }
        let mut c = Self::zeros(bits);
        for (i, chunk) in bytes.chunks(8).enumerate() {
            let mut w = [0u8; 8];
            w[..chunk.len()].copy_from_slice(chunk);
            c.words[i] = u64::from_le_bytes(w);
        }
        if !bits.is_multiple_of(64) {
            let last = c.words.len() - 1;
            if c.words[last] >> (bits % 64) != 0 {
                return Err(Error::Format("padding bits beyond the code width are set".into()));
            }
        }
        Ok(c)
    }
}

impl fmt::Display for HashCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.bits {
            f.write_str(if self.get(i) { "1" } else { "0" })?;
        }
        Ok(())
    }
}

pub fn hamming_distance(a: &HashCode, b: &HashCode) -> Result<u32> {
    if a.bits != b.bits {
        return Err(Error::DimensionMismatch(format!(
            "codes of width {} and {}",
            a.bits, b.bits
        )));
    }
    Ok(a.words.iter().zip(&b.words).map(|(x, y)| (x ^ y).count_ones()).sum())
}

/// Bit `b` is set iff `E(x)_b > 0`.
pub fn encode_binary(ae: &HashAutoencoder, x: &[f64]) -> Result<HashCode> {
    if x.len() != ae.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "vector of dim {}, autoencoder expects {}",
            x.len(),
            ae.input_dim()
        )));
    }
    let u = ae.encode(x);
    Ok(HashCode::from_bools(&u.iter().map(|&v| v > 0.0).collect::<Vec<_>>()))
}

/// Labelled codes of one width.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HashCodes {
    bits: usize,
    codes: Vec<HashCode>,
    labels: Vec<usize>,
}

impl HashCodes {
    pub fn new(bits: usize, codes: Vec<HashCode>, labels: Vec<usize>) -> Result<Self> {
        if codes.len() != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} codes but {} labels",
                codes.len(),
                labels.len()
            )));
        }
        if let Some(c) = codes.iter().find(|c| c.len() != bits) {
            return Err(Error::DimensionMismatch(format!(
                "code of width {} in a set of width {bits}",
                c.len()
            )));
        }
        Ok(Self { bits, codes, labels })
    }

    pub fn encode(ae: &HashAutoencoder, batch: &EmbeddingBatch) -> Result<Self> {
        let codes = (0..batch.len())
            .map(|i| encode_binary(ae, batch.vector(i)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(ae.bits(), codes, batch.labels().to_vec())
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn codes(&self) -> &[HashCode] {
        &self.codes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn code(&self, i: usize) -> &HashCode {
        &self.codes[i]
    }
}

/// `HSH1` file: magic, `u32` N, `u32` B, then N records of `⌈B/8⌉` code
/// bytes and a `u32` label, all little-endian.
pub fn write_codes_to<W: Write>(mut w: W, codes: &HashCodes) -> Result<()> {
    let n = u32::try_from(codes.len()).map_err(|_| Error::Format("more than 2^32 codes".into()))?;
    let b = u32::try_from(codes.bits).map_err(|_| Error::Format("bit width exceeds 2^32".into()))?;
    w.write_all(HSH_MAGIC)?;
    w.write_all(&n.to_le_bytes())?;
    w.write_all(&b.to_le_bytes())?;
    for (c, &l) in codes.codes.iter().zip(&codes.labels) {
        w.write_all(&c.to_bytes())?;
        let l = u32::try_from(l).map_err(|_| Error::Format(format!("label {l} exceeds u32")))?;
        w.write_all(&l.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_codes_from<R: Read>(mut r: R) -> Result<HashCodes> {
    let mut header = [0u8; 12];
    r.read_exact(&mut header)
        .map_err(|_| Error::Format("truncated HSH1 header".into()))?;
    if &header[..4] != HSH_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"HSH1\"",
            String::from_utf8_lossy(&header[..4])
        )));
    }
    let n = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let bits = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let width = bits.div_ceil(8);
    let mut buf = vec![0u8; width + 4];
    let mut codes = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        r.read_exact(&mut buf)
            .map_err(|_| Error::Format(format!("truncated at record {i} of {n}")))?;
        codes.push(HashCode::from_bytes(&buf[..width], bits)?);
        labels.push(u32::from_le_bytes(buf[width..].try_into().unwrap()) as usize);
    }
    HashCodes::new(bits, codes, labels)
}

pub fn write_codes(path: impl AsRef<Path>, codes: &HashCodes) -> Result<()> {
    write_codes_to(BufWriter::new(File::create(path)?), codes)
}

pub fn read_codes(path: impl AsRef<Path>) -> Result<HashCodes> {
    read_codes_from(BufReader::new(File::open(path)?))
}
