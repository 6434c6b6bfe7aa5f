//! Softmax-family losses with analytic gradients.
//!
//! Every loss here is a cross-entropy over per-class logits, averaged over the
//! batch. They differ only in how the logits are built:
//!
//! | loss            | target logit              | other logits        |
//! |-----------------|---------------------------|---------------------|
//! | softmax         | `W_y·x + b_y`             | `W_j·x + b_j`       |
//! | EMS             | `-m‖x - c_y‖`             | `-‖x - c_j‖`        |
//! | squared EMS     | `-m‖x - c_y‖²`            | `-‖x - c_j‖²`       |
//! | prototypical    | `-‖x - c_y‖²`             | `-‖x - c_j‖²`       |
//! | A-Softmax       | `‖x‖ ψ(θ_y)`              | `‖x‖ cos θ_j`       |
//! | LMCL            | `s (cos θ_y - m)`         | `s cos θ_j`         |

use serde::{Deserialize, Serialize};

use crate::batch::EmbeddingBatch;
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm, Matrix};

/// Added under the square root of every Euclidean distance so that the
/// distance stays differentiable when a sample sits on its prototype.
pub const DISTANCE_EPS: f64 = 1e-12;

/// Class centers `c_j`, one row per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    centers: Matrix,
}

impl PrototypeSet {
    pub fn new(centers: Matrix) -> Result<Self> {
        if centers.rows() == 0 || centers.cols() == 0 {
            return Err(Error::Empty("prototype set"));
        }
        if !centers.is_finite() {
            return Err(Error::NonFinite("prototypes"));
        }
        Ok(Self { centers })
    }

    pub fn num_classes(&self) -> usize {
        self.centers.rows()
    }

    pub fn dim(&self) -> usize {
        self.centers.cols()
    }

    pub fn center(&self, j: usize) -> &[f64] {
        self.centers.row(j)
    }

    pub fn centers(&self) -> &Matrix {
        &self.centers
    }

    pub fn centers_mut(&mut self) -> &mut Matrix {
        &mut self.centers
    }

    pub fn into_matrix(self) -> Matrix {
        self.centers
    }
}

/// Linear classifier head `f_j = W_j·x + b_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierWeights {
    pub weights: Matrix,
    pub biases: Vec<f64>,
}

impl ClassifierWeights {
    pub fn new(weights: Matrix, biases: Vec<f64>) -> Result<Self> {
        if weights.rows() != biases.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} weight rows but {} biases",
                weights.rows(),
                biases.len()
            )));
        }
        if weights.rows() == 0 {
            return Err(Error::Empty("classifier weights"));
        }
        if !weights.is_finite() || biases.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFinite("classifier weights"));
        }
        Ok(Self { weights, biases })
    }

    pub fn num_classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }
}

/// Loss value with gradients for a prototype-based loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub loss: f64,
    pub grad_embeddings: Matrix,
    pub grad_centers: Matrix,
}

/// Loss value with gradients for a classifier-head loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierLossResult {
    pub loss: f64,
    pub grad_embeddings: Matrix,
    pub grad_weights: Matrix,
    pub grad_biases: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AngularVariant {
    ASoftmax,
    Lmcl,
}

/// Margin configuration for the angular losses. `scale` is only read by LMCL.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngularParams {
    pub variant: AngularVariant,
    pub margin: f64,
    pub scale: f64,
}

impl AngularParams {
    pub fn a_softmax(margin: u32) -> Self {
        Self {
            variant: AngularVariant::ASoftmax,
            margin: margin as f64,
            scale: 1.0,
        }
    }

    pub fn lmcl(margin: f64, scale: f64) -> Self {
        Self {
            variant: AngularVariant::Lmcl,
            margin,
            scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.variant {
            AngularVariant::ASoftmax => {
                if !(self.margin >= 1.0 && self.margin.fract() == 0.0 && self.margin <= 64.0) {
                    return Err(Error::InvalidParameter(format!(
                        "A-Softmax margin must be a positive integer, got {}",
                        self.margin
                    )));
                }
            }
            AngularVariant::Lmcl => {
                if !(self.scale > 0.0 && self.scale.is_finite()) {
                    return Err(Error::InvalidParameter(format!(
                        "LMCL scale must be positive, got {}",
                        self.scale
                    )));
                }
                if !self.margin.is_finite() {
                    return Err(Error::NonFinite("LMCL margin"));
                }
            }
        }
        Ok(())
    }
}

/// Cross-entropy of `softmax(logits)` against `target`. Writes
/// `softmax(logits) - onehot(target)` into `dlogits` and returns the loss.
fn cross_entropy(logits: &[f64], target: usize, dlogits: &mut [f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (d, &f) in dlogits.iter_mut().zip(logits) {
        *d = (f - max).exp();
        sum += *d;
    }
    for d in dlogits.iter_mut() {
        *d /= sum;
    }
    dlogits[target] -= 1.0;
    sum.ln() + max - logits[target]
}

/// Class probabilities implied by a row of logits.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|f| (f - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn check_dims(batch: &EmbeddingBatch, dim: usize, classes: usize) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Empty("embedding batch"));
    }
    if batch.dim() != dim {
        return Err(Error::DimensionMismatch(format!(
            "embeddings have dimension {}, parameters {dim}",
            batch.dim()
        )));
    }
    batch.check_labels(classes)
}

fn check_margin(m: f64) -> Result<()> {
    if !m.is_finite() {
        return Err(Error::NonFinite("margin"));
    }
    if m < 1.0 {
        return Err(Error::InvalidParameter(format!("margin must be >= 1, got {m}")));
    }
    Ok(())
}

#[derive(Clone, Copy)]
enum Metric {
    Euclidean,
    Squared,
}

/// Shared kernel for the distance-logit losses. `logit_scale(j, y)` is the
/// factor applied to the distance to class `j` for a sample of class `y`.
fn distance_loss(
    batch: &EmbeddingBatch,
    protos: &PrototypeSet,
    metric: Metric,
    logit_scale: impl Fn(usize, usize) -> f64,
) -> Result<LossResult> {
    check_dims(batch, protos.dim(), protos.num_classes())?;
    let n = batch.len();
    let k = protos.num_classes();
    let dim = protos.dim();
    let inv_n = 1.0 / n as f64;

    let mut grad_x = Matrix::zeros(n, dim);
    let mut grad_c = Matrix::zeros(k, dim);
    let mut total = 0.0;

    let mut dist = vec![0.0; k];
    let mut logits = vec![0.0; k];
    let mut dlogits = vec![0.0; k];
    let mut delta = vec![0.0; k * dim];

    for i in 0..n {
        let x = batch.vector(i);
        let y = batch.labels()[i];
        for j in 0..k {
            let dj = &mut delta[j * dim..(j + 1) * dim];
            for ((d, xv), cv) in dj.iter_mut().zip(x).zip(protos.center(j)) {
                *d = xv - cv;
            }
            let sq = dot(dj, dj);
            dist[j] = match metric {
                Metric::Euclidean => (sq + DISTANCE_EPS).sqrt(),
                Metric::Squared => sq,
            };
            logits[j] = -(logit_scale(j, y) * dist[j]);
        }
        total += cross_entropy(&logits, y, &mut dlogits);

        // d f_j / d x = -scale_j * d r_j / d x, with d r / d x = δ / r or 2δ.
        for j in 0..k {
            let dr = match metric {
                Metric::Euclidean => 1.0 / dist[j],
                Metric::Squared => 2.0,
            };
            let coef = -dlogits[j] * inv_n * logit_scale(j, y) * dr;
            if coef == 0.0 {
                continue;
            }
            let dj = &delta[j * dim..(j + 1) * dim];
            axpy(coef, dj, grad_x.row_mut(i));
            axpy(-coef, dj, grad_c.row_mut(j));
        }
    }

    Ok(LossResult {
        loss: total * inv_n,
        grad_embeddings: grad_x,
        grad_centers: grad_c,
    })
}

/// Plain softmax cross-entropy over a linear head.
pub fn softmax_loss(batch: &EmbeddingBatch, w: &ClassifierWeights) -> Result<ClassifierLossResult> {
    check_dims(batch, w.dim(), w.num_classes())?;
    let n = batch.len();
    let k = w.num_classes();
    let inv_n = 1.0 / n as f64;
    let mut grad_x = Matrix::zeros(n, w.dim());
    let mut grad_w = Matrix::zeros(k, w.dim());
    let mut grad_b = vec![0.0; k];
    let mut dlogits = vec![0.0; k];
    let mut total = 0.0;

    for i in 0..n {
        let x = batch.vector(i);
        let logits: Vec<f64> = w
            .weights
            .iter_rows()
            .zip(&w.biases)
            .map(|(row, b)| dot(row, x) + b)
            .collect();
        total += cross_entropy(&logits, batch.labels()[i], &mut dlogits);
        for j in 0..k {
            let g = dlogits[j] * inv_n;
            axpy(g, w.weights.row(j), grad_x.row_mut(i));
            axpy(g, x, grad_w.row_mut(j));
            grad_b[j] += g;
        }
    }

    Ok(ClassifierLossResult {
        loss: total * inv_n,
        grad_embeddings: grad_x,
        grad_weights: grad_w,
        grad_biases: grad_b,
    })
}

/// Euclidean margin softmax: the margin scales only the distance to the
/// sample's own prototype.
pub fn ems_loss(batch: &EmbeddingBatch, protos: &PrototypeSet, m: f64) -> Result<LossResult> {
    check_margin(m)?;
    distance_loss(batch, protos, Metric::Euclidean, |j, y| if j == y { m } else { 1.0 })
}

/// EMS with squared distances in every exponent.
pub fn squared_ems_loss(batch: &EmbeddingBatch, protos: &PrototypeSet, m: f64) -> Result<LossResult> {
    check_margin(m)?;
    distance_loss(batch, protos, Metric::Squared, |j, y| if j == y { m } else { 1.0 })
}

/// Softmax over negative squared distances to the prototypes.
pub fn prototypical_loss(batch: &EmbeddingBatch, protos: &PrototypeSet) -> Result<LossResult> {
    distance_loss(batch, protos, Metric::Squared, |_, _| 1.0)
}

/// Piecewise monotone extension of `cos(mθ)` used by A-Softmax, evaluated
/// from `cos θ`. Returns `(ψ, dψ/d cos θ)`.
///
/// `ψ(θ) = (-1)^k cos(mθ) - 2k` for `θ ∈ [kπ/m, (k+1)π/m]`; `cos(mθ)` is the
/// Chebyshev polynomial `T_m(cos θ)` whose derivative is `m U_{m-1}(cos θ)`.
pub fn psi(cos_theta: f64, m: u32) -> (f64, f64) {
    let c = cos_theta.clamp(-1.0, 1.0);
    let theta = c.acos();
    let k = ((theta * m as f64 / std::f64::consts::PI).floor() as u32).min(m - 1);

    // T_n and U_{n-1} by the three-term recurrence.
    let (mut t_prev, mut t) = (1.0, c);
    let (mut u_prev, mut u) = (0.0, 1.0);
    for _ in 1..m {
        let t_next = 2.0 * c * t - t_prev;
        let u_next = 2.0 * c * u - u_prev;
        t_prev = t;
        t = t_next;
        u_prev = u;
        u = u_next;
    }
    let sign = if k.is_multiple_of(2) { 1.0 } else { -1.0 };
    (sign * t - 2.0 * k as f64, sign * m as f64 * u)
}

struct AngularRow {
    logits: Vec<f64>,
    norm_x: f64,
    norm_w: Vec<f64>,
    cos: Vec<f64>,
    /// d f_j / d cos θ_j
    df_dcos: Vec<f64>,
    /// d f_j / d ‖x‖ holding cos θ_j fixed
    df_dnorm: Vec<f64>,
}

fn angular_row(x: &[f64], w: &ClassifierWeights, target: usize, p: &AngularParams) -> Result<AngularRow> {
    p.validate()?;
    if x.len() != w.dim() {
        return Err(Error::DimensionMismatch(format!(
            "input has dimension {}, weights {}",
            x.len(),
            w.dim()
        )));
    }
    if target >= w.num_classes() {
        return Err(Error::LabelOutOfRange {
            label: target,
            classes: w.num_classes(),
        });
    }
    let norm_x = norm(x);
    if norm_x == 0.0 {
        return Err(Error::ZeroNorm("input vector".into()));
    }
    let k = w.num_classes();
    let mut out = AngularRow {
        logits: vec![0.0; k],
        norm_x,
        norm_w: vec![0.0; k],
        cos: vec![0.0; k],
        df_dcos: vec![0.0; k],
        df_dnorm: vec![0.0; k],
    };
    for j in 0..k {
        let row = w.weights.row(j);
        let nw = norm(row);
        if nw == 0.0 {
            return Err(Error::ZeroNorm(format!("weight row {j}")));
        }
        let c = dot(row, x) / (nw * norm_x);
        out.norm_w[j] = nw;
        out.cos[j] = c;
        match (p.variant, j == target) {
            (AngularVariant::ASoftmax, true) => {
                let (v, dv) = psi(c, p.margin as u32);
                out.logits[j] = norm_x * v;
                out.df_dcos[j] = norm_x * dv;
                out.df_dnorm[j] = v;
            }
            (AngularVariant::ASoftmax, false) => {
                out.logits[j] = norm_x * c;
                out.df_dcos[j] = norm_x;
                out.df_dnorm[j] = c;
            }
            (AngularVariant::Lmcl, true) => {
                out.logits[j] = p.scale * (c - p.margin);
                out.df_dcos[j] = p.scale;
            }
            (AngularVariant::Lmcl, false) => {
                out.logits[j] = p.scale * c;
                out.df_dcos[j] = p.scale;
            }
        }
    }
    Ok(out)
}

/// Per-class logits of A-Softmax or LMCL for a single sample.
pub fn angular_logits(
    x: &[f64],
    w: &ClassifierWeights,
    target: usize,
    p: &AngularParams,
) -> Result<Vec<f64>> {
    angular_row(x, w, target, p).map(|r| r.logits)
}

/// Softmax cross-entropy over [`angular_logits`]. Biases are ignored by the
/// angular heads; their gradient is zero.
pub fn angular_margin_loss(
    batch: &EmbeddingBatch,
    w: &ClassifierWeights,
    p: &AngularParams,
) -> Result<ClassifierLossResult> {
    check_dims(batch, w.dim(), w.num_classes())?;
    let n = batch.len();
    let k = w.num_classes();
    let dim = w.dim();
    let inv_n = 1.0 / n as f64;
    let mut grad_x = Matrix::zeros(n, dim);
    let mut grad_w = Matrix::zeros(k, dim);
    let mut dlogits = vec![0.0; k];
    let mut total = 0.0;

    for i in 0..n {
        let x = batch.vector(i);
        let y = batch.labels()[i];
        let r = angular_row(x, w, y, p)?;
        total += cross_entropy(&r.logits, y, &mut dlogits);
        let nx = r.norm_x;
        for j in 0..k {
            let g = dlogits[j] * inv_n;
            if g == 0.0 {
                continue;
            }
            let row = w.weights.row(j);
            let nw = r.norm_w[j];
            let c = r.cos[j];
            let gc = g * r.df_dcos[j];
            let gn = g * r.df_dnorm[j];
            // ∂cos/∂x = W/(‖W‖‖x‖) - cos·x/‖x‖²,  ∂‖x‖/∂x = x/‖x‖
            let gx = grad_x.row_mut(i);
            axpy(gc / (nw * nx), row, gx);
            axpy(-gc * c / (nx * nx) + gn / nx, x, gx);
            // ∂cos/∂W = x/(‖W‖‖x‖) - cos·W/‖W‖²
            let gw = grad_w.row_mut(j);
            axpy(gc / (nw * nx), x, gw);
            axpy(-gc * c / (nw * nw), row, gw);
        }
    }

    Ok(ClassifierLossResult {
        loss: total * inv_n,
        grad_embeddings: grad_x,
        grad_weights: grad_w,
        grad_biases: vec![0.0; k],
    })
}

/// The six supported objectives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Softmax,
    Ems,
    SquaredEms,
    Prototypical,
    ASoftmax,
    Lmcl,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        LossKind::Softmax,
        LossKind::Ems,
        LossKind::SquaredEms,
        LossKind::Prototypical,
        LossKind::ASoftmax,
        LossKind::Lmcl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Softmax => "softmax",
            LossKind::Ems => "ems",
            LossKind::SquaredEms => "squared-ems",
            LossKind::Prototypical => "prototypical",
            LossKind::ASoftmax => "a-softmax",
            LossKind::Lmcl => "lmcl",
        }
    }

    /// Prototype losses train class centers; the rest train a classifier head.
    pub fn uses_prototypes(self) -> bool {
        matches!(self, LossKind::Ems | LossKind::SquaredEms | LossKind::Prototypical)
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown loss '{s}'")))
    }
}

/// A loss together with its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    pub margin: f64,
    #[serde(default = "default_scale")]
    pub scale: f64,
}

fn default_scale() -> f64 {
    30.0
}

impl LossConfig {
    /// Default margins: 4 for the Euclidean and A-Softmax losses, `m = 0.35,
    /// s = 30` for LMCL.
    pub fn with_defaults(kind: LossKind) -> Self {
        let (margin, scale) = match kind {
            LossKind::Softmax | LossKind::Prototypical => (1.0, 1.0),
            LossKind::Ems | LossKind::SquaredEms | LossKind::ASoftmax => (4.0, 1.0),
            LossKind::Lmcl => (0.35, 30.0),
        };
        Self { kind, margin, scale }
    }

    pub fn ems(margin: f64) -> Self {
        Self {
            kind: LossKind::Ems,
            margin,
            scale: 1.0,
        }
    }

    pub fn angular(&self) -> Option<AngularParams> {
        match self.kind {
            LossKind::ASoftmax => Some(AngularParams {
                variant: AngularVariant::ASoftmax,
                margin: self.margin,
                scale: self.scale,
            }),
            LossKind::Lmcl => Some(AngularParams::lmcl(self.margin, self.scale)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            LossKind::Ems | LossKind::SquaredEms => check_margin(self.margin),
            LossKind::ASoftmax | LossKind::Lmcl => self.angular().unwrap().validate(),
            LossKind::Softmax | LossKind::Prototypical => Ok(()),
        }
    }
}

/// Trainable parameters of the loss: class centers or a classifier head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Prototypes(PrototypeSet),
    Classifier(ClassifierWeights),
}

impl Head {
    pub fn num_classes(&self) -> usize {
        match self {
            Head::Prototypes(p) => p.num_classes(),
            Head::Classifier(w) => w.num_classes(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Head::Prototypes(p) => p.dim(),
            Head::Classifier(w) => w.dim(),
        }
    }

    /// Flat views of every parameter tensor, in a fixed order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        match self {
            Head::Prototypes(p) => vec![p.centers.as_slice()],
            Head::Classifier(w) => vec![w.weights.as_slice(), &w.biases],
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Head::Prototypes(p) => vec![p.centers.as_mut_slice()],
            Head::Classifier(w) => vec![w.weights.as_mut_slice(), &mut w.biases],
        }
    }
}

/// Loss value, gradient w.r.t. the embeddings, and gradient w.r.t. each
/// tensor of the head (same order as [`Head::tensors`]).
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub grad_embeddings: Matrix,
    pub grad_head: Vec<Vec<f64>>,
}

/// Evaluates any configured loss against a matching head.
pub fn evaluate(cfg: &LossConfig, batch: &EmbeddingBatch, head: &Head) -> Result<Evaluation> {
    cfg.validate()?;
    match (cfg.kind, head) {
        (LossKind::Ems | LossKind::SquaredEms | LossKind::Prototypical, Head::Prototypes(p)) => {
            let r = match cfg.kind {
                LossKind::Ems => ems_loss(batch, p, cfg.margin)?,
                LossKind::SquaredEms => squared_ems_loss(batch, p, cfg.margin)?,
                _ => prototypical_loss(batch, p)?,
            };
            Ok(Evaluation {
                loss: r.loss,
                grad_embeddings: r.grad_embeddings,
                grad_head: vec![r.grad_centers.into_vec()],
            })
        }
        (LossKind::Softmax | LossKind::ASoftmax | LossKind::Lmcl, Head::Classifier(w)) => {
            let r = match cfg.angular() {
                Some(p) => angular_margin_loss(batch, w, &p)?,
                None => softmax_loss(batch, w)?,
            };
            Ok(Evaluation {
                loss: r.loss,
                grad_embeddings: r.grad_embeddings,
                grad_head: vec![r.grad_weights.into_vec(), r.grad_biases],
            })
        }
        (kind, _) => Err(Error::InvalidParameter(format!(
            "loss '{kind}' does not match the supplied head"
        ))),
    }
}
