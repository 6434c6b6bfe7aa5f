//! Joint optimisation of the encoder and the loss head.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::batch::EmbeddingBatch;
use crate::encoder::{self, EncoderParams, InputScaler, DEFAULT_SQUEEZE_RATIO};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::losses::{self, ClassifierWeights, Head, LossConfig, LossKind, PrototypeSet};

/// Learning rate at `step` under linear decay to zero at `total`.
pub fn lr_schedule(step: usize, total: usize, base_lr: f64) -> Result<f64> {
    if step > total {
        return Err(Error::InvalidParameter(format!(
            "step {step} is past the end of the schedule ({total})"
        )));
    }
    if total == 0 {
        return Ok(base_lr);
    }
    Ok(base_lr * (1.0 - step as f64 / total as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 coefficient added to the gradient before the moment update.
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

/// Moment accumulators for a list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(tensors: &[&[f64]]) -> Self {
        Self {
            step: 0,
            m: tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
            v: tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(
    params: &mut [&mut [f64]],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} parameter tensors, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (t, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[t].len() {
            return Err(Error::DimensionMismatch(format!(
                "tensor {t}: {} parameters, {} gradient entries",
                p.len(),
                g.len()
            )));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for i in 0..p.len() {
            let gi = g[i] + hyper.weight_decay * p[i];
            m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * gi;
            v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * gi * gi;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            p[i] -= hyper.lr * mh / (vh.sqrt() + hyper.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrototypeMode {
    /// Centers are trainable parameters.
    Parameter,
    /// Centers track a running mean of each class's batch embeddings.
    BatchMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub prototype_mode: PrototypeMode,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub squeeze_ratio: usize,
    /// Rate of the running class mean in batch-mean mode.
    pub mean_rate: f64,
    /// Standardise each input feature with training-set statistics.
    pub standardize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::with_defaults(LossKind::Ems),
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 5e-4,
            lr: 1e-4,
            steps: 2000,
            batch_size: 16,
            seed: 0,
            prototype_mode: PrototypeMode::Parameter,
            hidden: vec![64],
            embed_dim: 16,
            squeeze_ratio: DEFAULT_SQUEEZE_RATIO,
            mean_rate: 0.1,
            standardize: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::InvalidParameter(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidParameter(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidParameter("batch_size must be >= 1".into()));
        }
        if self.embed_dim < 1 {
            return Err(Error::InvalidParameter("embed_dim must be >= 1".into()));
        }
        if self.prototype_mode == PrototypeMode::BatchMean {
            if !self.loss.kind.uses_prototypes() {
                return Err(Error::InvalidParameter(format!(
                    "batch-mean prototypes need a prototype loss, not '{}'",
                    self.loss.kind
                )));
            }
            if !(self.mean_rate > 0.0 && self.mean_rate <= 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "mean_rate must lie in (0, 1], got {}",
                    self.mean_rate
                )));
            }
        }
        Ok(())
    }

    pub fn layer_dims(&self, input_dim: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend(&self.hidden);
        dims.push(self.embed_dim);
        dims
    }

    fn hyper(&self, lr: f64, weight_decay: f64) -> AdamHyper {
        AdamHyper {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
    pub final_prototypes: Matrix,
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.records {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(BufWriter::new(File::create(path)?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub scaler: InputScaler,
    pub encoder: EncoderParams,
    /// The trained head. For classifier losses this holds the classifier.
    pub head: Head,
    /// Class centers. For classifier losses these are the class means of
    /// the final training embeddings.
    pub prototypes: PrototypeSet,
    pub log: TrainLog,
}

impl TrainOutput {
    /// Embeds raw inputs: scaler, then encoder.
    pub fn embed(&self, raw: &EmbeddingBatch) -> Result<EmbeddingBatch> {
        encoder::embed(&self.encoder, &self.scaler.apply_batch(raw)?)
    }
}

fn init_head(cfg: &TrainConfig, classes: usize, rng: &mut ChaCha8Rng) -> Head {
    let d = cfg.embed_dim;
    let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).unwrap();
    let data: Vec<f64> = (0..classes * d).map(|_| normal.sample(rng)).collect();
    let m = Matrix::from_vec(classes, d, data).unwrap();
    if cfg.loss.kind.uses_prototypes() {
        Head::Prototypes(PrototypeSet::new(m).unwrap())
    } else {
        Head::Classifier(ClassifierWeights::new(m, vec![0.0; classes]).unwrap())
    }
}

/// Per-class means of `emb`; rows of absent classes are `None`.
pub fn class_means(emb: &EmbeddingBatch, classes: usize) -> Vec<Option<Vec<f64>>> {
    let d = emb.dim();
    let mut sums = vec![vec![0.0; d]; classes];
    let mut counts = vec![0usize; classes];
    for (i, &l) in emb.labels().iter().enumerate() {
        if l < classes {
            crate::linalg::axpy(1.0, emb.vector(i), &mut sums[l]);
            counts[l] += 1;
        }
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, c)| (c > 0).then(|| s.into_iter().map(|v| v / c as f64).collect()))
        .collect()
}

/// Trains encoder and head on `dataset` (raw inputs). Classes are
/// `0..=max label`.
pub fn train(dataset: &EmbeddingBatch, cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let classes = dataset.num_classes();
    let scaler = if cfg.standardize {
        InputScaler::fit(dataset.vectors())?
    } else {
        InputScaler::identity(dataset.dim())
    };
    let raw = dataset;
    let dataset = &scaler.apply_batch(raw)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut enc = encoder::init_params(&cfg.layer_dims(dataset.dim()), cfg.squeeze_ratio, rng.random())?;
    let mut head = init_head(cfg, classes, &mut rng);
    let batch_mean = cfg.prototype_mode == PrototypeMode::BatchMean;
    let mut seen = vec![false; classes];

    let mut enc_state = AdamState::new(&enc.tensors());
    let mut head_state = AdamState::new(&head.tensors());
    // prototypes are exempt from decay, classifier weights are not
    let head_decay = if cfg.loss.kind.uses_prototypes() { 0.0 } else { cfg.weight_decay };
    let mut records = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let lr = lr_schedule(step, cfg.steps, cfg.lr)?;
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..dataset.len())).collect();
        let batch = dataset.select(&idx);
        let (emb, trace) = encoder::forward(&enc, batch.vectors(), batch.domains())?;
        let emb_batch = batch.with_vectors(emb)?;

        if batch_mean {
            if let Head::Prototypes(p) = &mut head {
                for (j, mean) in class_means(&emb_batch, classes).into_iter().enumerate() {
                    if let Some(mean) = mean {
                        let row = p.centers_mut().row_mut(j);
                        let rate = if seen[j] { cfg.mean_rate } else { 1.0 };
                        for (c, v) in row.iter_mut().zip(&mean) {
                            *c += rate * (v - *c);
                        }
                        seen[j] = true;
                    }
                }
            }
        }

        let eval = losses::evaluate(&cfg.loss, &emb_batch, &head)?;
        if !eval.loss.is_finite() {
            return Err(Error::Diverged { step, loss: eval.loss });
        }
        records.push(LogRecord { step, lr, loss: eval.loss });

        let (grads, _) = encoder::backward(&enc, &trace, &eval.grad_embeddings)?;
        let enc_grads: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
        adam_step(&mut enc.tensors_mut(), &enc_grads, &mut enc_state, &cfg.hyper(lr, cfg.weight_decay))?;
        if !batch_mean {
            adam_step(&mut head.tensors_mut(), &eval.grad_head, &mut head_state, &cfg.hyper(lr, head_decay))?;
        }
    }

    let prototypes = match &head {
        Head::Prototypes(p) => p.clone(),
        Head::Classifier(w) => {
            let emb = encoder::embed(&enc, dataset)?;
            let mut m = Matrix::zeros(classes, w.dim());
            for (j, mean) in class_means(&emb, classes).into_iter().enumerate() {
                if let Some(mean) = mean {
                    m.row_mut(j).copy_from_slice(&mean);
                }
            }
            PrototypeSet::new(m)?
        }
    };
    Ok(TrainOutput {
        scaler,
        encoder: enc,
        head,
        log: TrainLog {
            records,
            final_prototypes: prototypes.centers().clone(),
        },
        prototypes,
    })
}

/// Everything needed to embed new data or resume evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub layer_dims: Vec<usize>,
    pub config: TrainConfig,
    pub scaler: InputScaler,
    pub encoder: EncoderParams,
    pub head: Head,
    pub prototypes: PrototypeSet,
}

impl ModelFile {
    pub fn from_output(cfg: &TrainConfig, out: &TrainOutput) -> Self {
        Self {
            layer_dims: out.encoder.dims(),
            config: cfg.clone(),
            scaler: out.scaler.clone(),
            encoder: out.encoder.clone(),
            head: out.head.clone(),
            prototypes: out.prototypes.clone(),
        }
    }

    pub fn embed(&self, raw: &EmbeddingBatch) -> Result<EmbeddingBatch> {
        encoder::embed(&self.encoder, &self.scaler.apply_batch(raw)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let m: ModelFile = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        m.encoder.validate()?;
        if m.scaler.dim() != m.encoder.input_dim() {
            return Err(Error::Format(format!(
                "scaler has dim {}, encoder input {}",
                m.scaler.dim(),
                m.encoder.input_dim()
            )));
        }
        if m.encoder.dims() != m.layer_dims {
            return Err(Error::Format(format!(
                "model declares layer dims {:?} but the weights have {:?}",
                m.layer_dims,
                m.encoder.dims()
            )));
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate, SyntheticConfig};
    use crate::linalg::dist;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(lr_schedule(0, 100, 1e-4).unwrap(), 1e-4);
        assert_eq!(lr_schedule(100, 100, 1e-4).unwrap(), 0.0);
        assert!((lr_schedule(50, 100, 1e-4).unwrap() - 5e-5).abs() < 1e-20);
        assert!(lr_schedule(101, 100, 1e-4).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let hyper = AdamHyper {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = vec![1.0];
        let mut st = AdamState::new(&[&p]);
        adam_step(&mut [&mut p[..]], &[vec![-3.0]], &mut st, &hyper).unwrap();
        assert!((p[0] - 1.0 - 1e-4).abs() < 1e-12);
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let hyper = AdamHyper {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = vec![0.5, -2.0];
        let mut st = AdamState::new(&[&p]);
        for _ in 0..5 {
            adam_step(&mut [&mut p[..]], &[vec![0.0, 0.0]], &mut st, &hyper).unwrap();
        }
        assert_eq!(p, vec![0.5, -2.0]);
    }

    #[test]
    fn adam_rejects_bad_input() {
        let hyper = AdamHyper::default();
        let mut p = vec![0.0; 2];
        let mut st = AdamState::new(&[&p]);
        assert!(adam_step(&mut [&mut p[..]], &[vec![0.0]], &mut st, &hyper).is_err());
        assert!(adam_step(&mut [&mut p[..]], &[vec![f64::NAN, 0.0]], &mut st, &hyper).is_err());
        assert_eq!(st.step, 0);
    }

    fn small_data() -> EmbeddingBatch {
        generate(&SyntheticConfig {
            classes: 4,
            per_class: 20,
            dim: 8,
            seed: 1,
            ..Default::default()
        })
        .unwrap()
        .samples
    }

    #[test]
    fn zero_steps_returns_initialisation() {
        let data = small_data();
        let cfg = TrainConfig {
            steps: 0,
            ..Default::default()
        };
        let a = train(&data, &cfg).unwrap();
        let enc = encoder::init_params(&cfg.layer_dims(8), 4, {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            rng.random()
        })
        .unwrap();
        assert_eq!(a.encoder, enc);
        assert!(a.log.records.is_empty());
    }

    #[test]
    fn separable_set_converges() {
        let data = small_data();
        let cfg = TrainConfig {
            steps: 2000,
            lr: 1e-2,
            seed: 3,
            ..Default::default()
        };
        let out = train(&data, &cfg).unwrap();
        let again = train(&data, &cfg).unwrap();
        assert_eq!(out.log, again.log);
        let tail: f64 = out.log.records[1900..].iter().map(|r| r.loss).sum::<f64>() / 100.0;
        assert!(tail < 0.05, "tail loss {tail}");
        let emb = out.embed(&data).unwrap();
        for i in 0..emb.len() {
            let x = emb.vector(i);
            let best = (0..4)
                .min_by(|&a, &b| {
                    dist(x, out.prototypes.center(a)).total_cmp(&dist(x, out.prototypes.center(b)))
                })
                .unwrap();
            assert_eq!(best, emb.labels()[i]);
        }
        assert_eq!(out.prototypes.num_classes(), 4);
        assert_eq!(out.prototypes.dim(), cfg.embed_dim);
    }

    #[test]
    fn batch_mean_and_classifier_modes_run() {
        let data = small_data();
        let cfg = TrainConfig {
            steps: 50,
            prototype_mode: PrototypeMode::BatchMean,
            ..Default::default()
        };
        assert!(train(&data, &cfg).is_ok());
        let cfg = TrainConfig {
            steps: 50,
            loss: LossConfig::with_defaults(LossKind::Lmcl),
            ..Default::default()
        };
        let out = train(&data, &cfg).unwrap();
        assert!(matches!(out.head, Head::Classifier(_)));
        let bad = TrainConfig {
            prototype_mode: PrototypeMode::BatchMean,
            ..cfg
        };
        assert!(train(&data, &bad).is_err());
    }

    #[test]
    fn log_csv_and_model_round_trip() {
        let data = small_data();
        let cfg = TrainConfig {
            steps: 3,
            ..Default::default()
        };
        let out = train(&data, &cfg).unwrap();
        let mut buf = Vec::new();
        out.log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,lr,loss\n"));
        assert_eq!(text.lines().count(), 4);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let model = ModelFile::from_output(&cfg, &out);
        model.save(&path).unwrap();
        assert_eq!(ModelFile::load(&path).unwrap(), model);
    }
}
