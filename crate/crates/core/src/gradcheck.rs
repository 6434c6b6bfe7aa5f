//! Central finite-difference verification of analytic gradients.
//!
//! Errors are measured per parameter tensor as `‖a - n‖ / max(‖a‖, ‖n‖)`;
//! the reported figure is the worst tensor. When both norms are below
//! [`ZERO_GRAD`] the error is 0.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::batch::{Domain, EmbeddingBatch};
use crate::encoder::{self, EncoderParams};
use crate::error::Result;
use crate::linalg::{norm, Matrix};
use crate::losses::{self, ClassifierWeights, Head, LossConfig, LossKind, PrototypeSet};

pub const DEFAULT_STEP: f64 = 1e-6;
pub const ZERO_GRAD: f64 = 1e-12;
/// Angular distance from an A-Softmax breakpoint `kπ/m` inside which random
/// instances are redrawn.
pub const KINK_EXCLUSION: f64 = 1e-3;

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let na = norm(analytic);
    let nn = norm(numeric);
    if na < ZERO_GRAD && nn < ZERO_GRAD {
        return 0.0;
    }
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    diff / na.max(nn)
}

/// Central differences of `f` around `x`.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Relative error between `analytic` and the central-difference gradient of `f`.
pub fn check_gradient(f: impl FnMut(&[f64]) -> f64, x: &[f64], analytic: &[f64], h: f64) -> f64 {
    relative_error(analytic, &numeric_gradient(f, x, h))
}

/// Inputs for one gradient check: embeddings and the loss head.
#[derive(Debug, Clone)]
pub struct LossInstance {
    pub batch: EmbeddingBatch,
    pub head: Head,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub loss: LossKind,
    pub max_rel_error: f64,
    pub per_tensor: Vec<(String, f64)>,
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

fn near_kink(batch: &EmbeddingBatch, w: &ClassifierWeights, m: u32) -> bool {
    let step = std::f64::consts::PI / m as f64;
    (0..batch.len()).any(|i| {
        let x = batch.vector(i);
        let row = w.weights.row(batch.labels()[i]);
        let c = (crate::linalg::dot(x, row) / (norm(x) * norm(row))).clamp(-1.0, 1.0);
        let theta = c.acos();
        let nearest = (theta / step).round() * step;
        (theta - nearest).abs() < KINK_EXCLUSION
    })
}

/// Seeded Gaussian instance with `n` samples, dimension `d` and `k` classes
/// (labels cycle through the classes). A-Softmax instances are redrawn until
/// no target angle lies within [`KINK_EXCLUSION`] of a breakpoint.
pub fn random_instance(cfg: &LossConfig, n: usize, d: usize, k: usize, seed: u64) -> LossInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let x = gaussian_matrix(n, d, &mut rng);
        let labels = (0..n).map(|i| i % k).collect();
        let batch = EmbeddingBatch::single_domain(x, labels).unwrap();
        let head = if cfg.kind.uses_prototypes() {
            Head::Prototypes(PrototypeSet::new(gaussian_matrix(k, d, &mut rng)).unwrap())
        } else {
            let w = gaussian_matrix(k, d, &mut rng);
            let b = (0..k).map(|_| StandardNormal.sample(&mut rng)).collect();
            Head::Classifier(ClassifierWeights::new(w, b).unwrap())
        };
        if let (LossKind::ASoftmax, Head::Classifier(w)) = (cfg.kind, &head) {
            if near_kink(&batch, w, cfg.margin as u32) {
                continue;
            }
        }
        return LossInstance { batch, head };
    }
}

fn tensor_names(head: &Head) -> Vec<&'static str> {
    match head {
        Head::Prototypes(_) => vec!["centers"],
        Head::Classifier(_) => vec!["weights", "biases"],
    }
}

/// Checks the analytic gradients of `cfg` against central differences on
/// both the embeddings and every head tensor.
pub fn grad_check(cfg: &LossConfig, instance: &LossInstance, h: f64) -> Result<GradCheckReport> {
    let eval = losses::evaluate(cfg, &instance.batch, &instance.head)?;
    let loss_at = |batch: &EmbeddingBatch, head: &Head| -> f64 {
        losses::evaluate(cfg, batch, head).map_or(f64::NAN, |e| e.loss)
    };

    let mut per_tensor = Vec::new();

    let x0 = instance.batch.vectors().as_slice().to_vec();
    let (rows, cols) = instance.batch.vectors().shape();
    let err = check_gradient(
        |x| {
            let b = instance
                .batch
                .with_vectors(Matrix::from_vec(rows, cols, x.to_vec()).unwrap());
            b.map_or(f64::NAN, |b| loss_at(&b, &instance.head))
        },
        &x0,
        eval.grad_embeddings.as_slice(),
        h,
    );
    per_tensor.push(("embeddings".to_string(), err));

    for (t, name) in tensor_names(&instance.head).into_iter().enumerate() {
        let p0 = instance.head.tensors()[t].to_vec();
        let err = check_gradient(
            |p| {
                let mut head = instance.head.clone();
                head.tensors_mut()[t].copy_from_slice(p);
                loss_at(&instance.batch, &head)
            },
            &p0,
            &eval.grad_head[t],
            h,
        );
        per_tensor.push((name.to_string(), err));
    }

    let max_rel_error = per_tensor.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    Ok(GradCheckReport {
        loss: cfg.kind,
        max_rel_error,
        per_tensor,
    })
}

/// Loss of `cfg` on the encoder's embeddings of `inputs`, with gradients for
/// every encoder tensor followed by every head tensor.
pub fn encoder_loss_and_grads(
    params: &EncoderParams,
    inputs: &EmbeddingBatch,
    cfg: &LossConfig,
    head: &Head,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let (emb, trace) = encoder::forward(params, inputs.vectors(), inputs.domains())?;
    let batch = inputs.with_vectors(emb)?;
    let eval = losses::evaluate(cfg, &batch, head)?;
    let (g, _) = encoder::backward(params, &trace, &eval.grad_embeddings)?;
    let mut grads: Vec<Vec<f64>> = g.tensors().iter().map(|t| t.to_vec()).collect();
    grads.extend(eval.grad_head);
    Ok((eval.loss, grads))
}

/// End-to-end check through the CSE encoder. Parameters whose ±h
/// perturbation flips any ReLU are skipped (their entries are dropped from
/// both gradients before comparison).
pub fn encoder_grad_check(
    params: &EncoderParams,
    inputs: &EmbeddingBatch,
    cfg: &LossConfig,
    head: &Head,
    h: f64,
) -> Result<GradCheckReport> {
    let (_, analytic) = encoder_loss_and_grads(params, inputs, cfg, head)?;
    let (_, base_trace) = encoder::forward(params, inputs.vectors(), inputs.domains())?;
    let base_pattern = base_trace.relu_pattern();

    let eval_with = |p: &EncoderParams, hd: &Head| -> (f64, bool) {
        let (emb, trace) = match encoder::forward(p, inputs.vectors(), inputs.domains()) {
            Ok(v) => v,
            Err(_) => return (f64::NAN, false),
        };
        let same = trace.relu_pattern() == base_pattern;
        let loss = inputs
            .with_vectors(emb)
            .and_then(|b| losses::evaluate(cfg, &b, hd))
            .map_or(f64::NAN, |e| e.loss);
        (loss, same)
    };

    let n_enc = params.tensors().len();
    let n_head = head.tensors().len();
    let mut per_tensor = Vec::new();
    for t in 0..n_enc + n_head {
        let base: Vec<f64> = if t < n_enc {
            params.tensors()[t].to_vec()
        } else {
            head.tensors()[t - n_enc].to_vec()
        };
        let mut a_kept = Vec::new();
        let mut n_kept = Vec::new();
        for i in 0..base.len() {
            let mut vals = [0.0; 2];
            let mut smooth = true;
            for (s, sign) in [1.0, -1.0].into_iter().enumerate() {
                let mut p = params.clone();
                let mut hd = head.clone();
                if t < n_enc {
                    p.tensors_mut()[t][i] = base[i] + sign * h;
                } else {
                    hd.tensors_mut()[t - n_enc][i] = base[i] + sign * h;
                }
                let (l, same) = eval_with(&p, &hd);
                vals[s] = l;
                smooth &= same;
            }
            if smooth {
                a_kept.push(analytic[t][i]);
                n_kept.push((vals[0] - vals[1]) / (2.0 * h));
            }
        }
        per_tensor.push((format!("tensor{t}"), relative_error(&a_kept, &n_kept)));
    }
    let max_rel_error = per_tensor.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    Ok(GradCheckReport {
        loss: cfg.kind,
        max_rel_error,
        per_tensor,
    })
}

/// Seeded raw inputs with mixed domain tags for end-to-end checks.
pub fn random_inputs(n: usize, d: usize, k: usize, seed: u64) -> EmbeddingBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = gaussian_matrix(n, d, &mut rng);
    let labels = (0..n).map(|i| i % k).collect();
    let domains = (0..n)
        .map(|i| if i % 2 == 0 { Domain::Photo } else { Domain::Sketch })
        .collect();
    EmbeddingBatch::new(x, labels, domains).unwrap()
}

/// Default tolerance for a loss: 1e-4 for A-Softmax, 1e-5 otherwise.
pub fn tolerance(kind: LossKind) -> f64 {
    match kind {
        LossKind::ASoftmax => 1e-4,
        _ => 1e-5,
    }
}
