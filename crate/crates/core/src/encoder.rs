//! Fully-connected encoder with conditional squeeze-excitation gating.
//!
//! Every hidden layer is `affine → ReLU → gate`, the last layer is affine
//! only and produces the embedding. The gate squeezes the layer's activation
//! vector to `r` units, appends the domain bit, and excites back to one
//! sigmoid weight per unit:
//!
//! ```text
//! s = relu(W_sq a + b_sq)             (r)
//! g = sigmoid(W_ex [s; bit] + b_ex)   (C)
//! out = a ⊙ g
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::batch::{Domain, EmbeddingBatch};
use crate::error::{Error, Result};
use crate::linalg::{axpy, Matrix};

pub const DEFAULT_SQUEEZE_RATIO: usize = 4;

/// Affine map `y = W x + b` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn new(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if weight.rows() != bias.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} weight rows, {} biases",
                weight.rows(),
                bias.len()
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            weight: Matrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            weight: Matrix::identity(n),
            bias: vec![0.0; n],
        }
    }

    /// Zero-mean Gaussian weights with standard deviation `√(2 / fan_in)`,
    /// zero biases.
    pub fn he_normal<R: rand::Rng + ?Sized>(out_dim: usize, in_dim: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, (2.0 / in_dim as f64).sqrt()).unwrap();
        let data = (0..out_dim * in_dim).map(|_| normal.sample(rng)).collect();
        Self {
            weight: Matrix::from_vec(out_dim, in_dim, data).unwrap(),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.weight.mul_vec(x);
        for (v, b) in y.iter_mut().zip(&self.bias) {
            *v += b;
        }
        y
    }

    fn is_finite(&self) -> bool {
        self.weight.is_finite() && self.bias.iter().all(|b| b.is_finite())
    }
}

/// Parameters of one conditional squeeze-excitation block. The excite map
/// has one input column more than the squeeze output: the domain bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CseGate {
    pub squeeze: Dense,
    pub excite: Dense,
}

impl CseGate {
    pub fn zeros(channels: usize, reduced: usize) -> Self {
        Self {
            squeeze: Dense::zeros(reduced, channels),
            excite: Dense::zeros(channels, reduced + 1),
        }
    }

    pub fn channels(&self) -> usize {
        self.squeeze.in_dim()
    }

    pub fn reduced(&self) -> usize {
        self.squeeze.out_dim()
    }

    fn validate(&self) -> Result<()> {
        let c = self.channels();
        let r = self.reduced();
        if r == 0 || r >= c {
            return Err(Error::DimensionMismatch(format!(
                "squeeze width {r} must be in [1, {c})"
            )));
        }
        if self.excite.in_dim() != r + 1 || self.excite.out_dim() != c {
            return Err(Error::DimensionMismatch(format!(
                "excite map is {}x{}, expected {c}x{}",
                self.excite.out_dim(),
                self.excite.in_dim(),
                r + 1
            )));
        }
        Ok(())
    }

    /// Column of the excite matrix that multiplies the domain bit.
    pub fn domain_column(&self) -> Vec<f64> {
        let r = self.reduced();
        (0..self.channels()).map(|i| self.excite.weight[(i, r)]).collect()
    }

    pub fn set_domain_column(&mut self, col: &[f64]) {
        let r = self.reduced();
        for (i, &v) in col.iter().enumerate() {
            self.excite.weight[(i, r)] = v;
        }
    }
}

#[inline]
fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

struct GateOut {
    squeeze_pre: Vec<f64>,
    squeezed: Vec<f64>,
    gate: Vec<f64>,
    out: Vec<f64>,
}

fn gate_forward(features: &[f64], domain: Domain, gate: &CseGate) -> GateOut {
    let squeeze_pre = gate.squeeze.apply(features);
    let mut z: Vec<f64> = squeeze_pre.iter().map(|&v| relu(v)).collect();
    let squeezed = z.clone();
    z.push(domain.bit());
    let g: Vec<f64> = gate.excite.apply(&z).into_iter().map(sigmoid).collect();
    let out = features.iter().zip(&g).map(|(f, g)| f * g).collect();
    GateOut {
        squeeze_pre,
        squeezed,
        gate: g,
        out,
    }
}

/// Applies one conditional squeeze-excitation block to a channel vector.
pub fn cse_gate(features: &[f64], domain: Domain, gate: &CseGate) -> Result<Vec<f64>> {
    gate.validate()?;
    if features.len() != gate.channels() {
        return Err(Error::DimensionMismatch(format!(
            "{} features into a {}-channel gate",
            features.len(),
            gate.channels()
        )));
    }
    Ok(gate_forward(features, domain, gate).out)
}

/// Gate activations alone, for inspection.
pub fn gate_values(features: &[f64], domain: Domain, gate: &CseGate) -> Result<Vec<f64>> {
    cse_gate(features, domain, gate)?;
    Ok(gate_forward(features, domain, gate).gate)
}

/// Weights of the whole encoder. `gates[l]` follows `layers[l]` for every
/// layer but the last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub layers: Vec<Dense>,
    pub gates: Vec<CseGate>,
}

impl EncoderParams {
    pub fn new(layers: Vec<Dense>, gates: Vec<CseGate>) -> Result<Self> {
        let p = Self { layers, gates };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidParameter("encoder needs at least one layer".into()));
        }
        if self.gates.len() + 1 != self.layers.len() {
            return Err(Error::InvalidParameter(format!(
                "{} layers need {} gates, got {}",
                self.layers.len(),
                self.layers.len() - 1,
                self.gates.len()
            )));
        }
        for (l, pair) in self.layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::DimensionMismatch(format!(
                    "layer {l} outputs {} but layer {} takes {}",
                    pair[0].out_dim(),
                    l + 1,
                    pair[1].in_dim()
                )));
            }
        }
        for (l, (layer, gate)) in self.layers.iter().zip(&self.gates).enumerate() {
            gate.validate()?;
            if gate.channels() != layer.out_dim() {
                return Err(Error::DimensionMismatch(format!(
                    "gate {l} has {} channels, layer has {}",
                    gate.channels(),
                    layer.out_dim()
                )));
            }
        }
        let finite = self.layers.iter().all(Dense::is_finite)
            && self
                .gates
                .iter()
                .all(|g| g.squeeze.is_finite() && g.excite.is_finite());
        if !finite {
            return Err(Error::NonFinite("encoder parameters"));
        }
        Ok(())
    }

    /// `[input, hidden..., output]` widths.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].in_dim()];
        d.extend(self.layers.iter().map(Dense::out_dim));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    /// Same architecture with every parameter set to zero.
    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.out_dim(), l.in_dim()))
                .collect(),
            gates: self
                .gates
                .iter()
                .map(|g| CseGate::zeros(g.channels(), g.reduced()))
                .collect(),
        }
    }

    /// Flat views of every parameter tensor: each layer's weight and bias,
    /// then each gate's squeeze weight, squeeze bias, excite weight and
    /// excite bias.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in &self.layers {
            out.push(l.weight.as_slice());
            out.push(&l.bias);
        }
        for g in &self.gates {
            out.push(g.squeeze.weight.as_slice());
            out.push(&g.squeeze.bias);
            out.push(g.excite.weight.as_slice());
            out.push(&g.excite.bias);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.layers {
            out.push(l.weight.as_mut_slice());
            out.push(&mut l.bias);
        }
        for g in &mut self.gates {
            out.push(g.squeeze.weight.as_mut_slice());
            out.push(&mut g.squeeze.bias);
            out.push(g.excite.weight.as_mut_slice());
            out.push(&mut g.excite.bias);
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// He-initialised encoder for `layer_dims = [input, hidden..., output]`.
/// Each gated layer of width `C` squeezes to `C / squeeze_ratio` units.
pub fn init_params(layer_dims: &[usize], squeeze_ratio: usize, seed: u64) -> Result<EncoderParams> {
    if layer_dims.len() < 2 {
        return Err(Error::InvalidParameter(
            "layer_dims needs an input and an output width".into(),
        ));
    }
    if layer_dims.contains(&0) {
        return Err(Error::InvalidParameter("layer widths must be positive".into()));
    }
    if squeeze_ratio < 1 {
        return Err(Error::InvalidParameter("squeeze ratio must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut gates = Vec::new();
    let last = layer_dims.len() - 2;
    for (l, w) in layer_dims.windows(2).enumerate() {
        layers.push(Dense::he_normal(w[1], w[0], &mut rng));
        if l < last {
            let c = w[1];
            let r = c / squeeze_ratio;
            if r == 0 || r >= c {
                return Err(Error::InvalidParameter(format!(
                    "hidden width {c} with squeeze ratio {squeeze_ratio} gives squeeze width {r}; need 1 <= r < {c}"
                )));
            }
            gates.push(CseGate {
                squeeze: Dense::he_normal(r, c, &mut rng),
                excite: Dense::he_normal(c, r + 1, &mut rng),
            });
        }
    }
    EncoderParams::new(layers, gates)
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Matrix,
    pre: Matrix,
    /// Present on gated layers: `(relu(pre), squeeze pre-activation, squeezed, gate)`.
    gate: Option<GateCache>,
}

#[derive(Debug, Clone)]
struct GateCache {
    act: Matrix,
    squeeze_pre: Matrix,
    squeezed: Matrix,
    gate: Matrix,
}

/// Intermediate values of one forward pass, consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    dims: Vec<usize>,
    domains: Vec<Domain>,
    layers: Vec<LayerCache>,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.domains.len()
    }

    /// Sign pattern of every ReLU input (trunk and squeeze) in the pass.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for l in &self.layers {
            if let Some(g) = &l.gate {
                out.extend(l.pre.as_slice().iter().map(|&v| v > 0.0));
                out.extend(g.squeeze_pre.as_slice().iter().map(|&v| v > 0.0));
            }
        }
        out
    }

    /// Gate activations of gated layer `l`, one row per sample.
    pub fn gates(&self, l: usize) -> Option<&Matrix> {
        self.layers.get(l)?.gate.as_ref().map(|g| &g.gate)
    }
}

/// Runs the encoder over `inputs` (one row per sample).
pub fn forward(
    params: &EncoderParams,
    inputs: &Matrix,
    domains: &[Domain],
) -> Result<(Matrix, ForwardTrace)> {
    if inputs.cols() != params.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "inputs have {} columns, encoder expects {}",
            inputs.cols(),
            params.input_dim()
        )));
    }
    if domains.len() != inputs.rows() {
        return Err(Error::DimensionMismatch(format!(
            "{} inputs but {} domain tags",
            inputs.rows(),
            domains.len()
        )));
    }
    if !inputs.is_finite() {
        return Err(Error::NonFinite("encoder inputs"));
    }

    let n = inputs.rows();
    let mut h = inputs.clone();
    let mut caches = Vec::with_capacity(params.layers.len());
    for (l, layer) in params.layers.iter().enumerate() {
        let pre = h.map_rows(|x| layer.apply(x));
        match params.gates.get(l) {
            None => {
                caches.push(LayerCache {
                    input: std::mem::replace(&mut h, pre.clone()),
                    pre,
                    gate: None,
                });
            }
            Some(gate) => {
                let c = layer.out_dim();
                let r = gate.reduced();
                let mut act = Matrix::zeros(n, c);
                let mut squeeze_pre = Matrix::zeros(n, r);
                let mut squeezed = Matrix::zeros(n, r);
                let mut gates = Matrix::zeros(n, c);
                let mut out = Matrix::zeros(n, c);
                for i in 0..n {
                    let a: Vec<f64> = pre.row(i).iter().map(|&v| relu(v)).collect();
                    let g = gate_forward(&a, domains[i], gate);
                    act.row_mut(i).copy_from_slice(&a);
                    squeeze_pre.row_mut(i).copy_from_slice(&g.squeeze_pre);
                    squeezed.row_mut(i).copy_from_slice(&g.squeezed);
                    gates.row_mut(i).copy_from_slice(&g.gate);
                    out.row_mut(i).copy_from_slice(&g.out);
                }
                caches.push(LayerCache {
                    input: std::mem::replace(&mut h, out),
                    pre,
                    gate: Some(GateCache {
                        act,
                        squeeze_pre,
                        squeezed,
                        gate: gates,
                    }),
                });
            }
        }
    }
    let trace = ForwardTrace {
        dims: params.dims(),
        domains: domains.to_vec(),
        layers: caches,
    };
    Ok((h, trace))
}

/// Fixed per-feature affine map `(x - mean) / scale` applied before the
/// first layer. Not trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputScaler {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl InputScaler {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Per-feature mean and population standard deviation of `inputs`.
    /// Constant features keep scale 1.
    pub fn fit(inputs: &Matrix) -> Result<Self> {
        if inputs.rows() == 0 {
            return Err(Error::Empty("scaler inputs"));
        }
        let n = inputs.rows() as f64;
        let mut mean = vec![0.0; inputs.cols()];
        for x in inputs.iter_rows() {
            axpy(1.0 / n, x, &mut mean);
        }
        let mut var = vec![0.0; inputs.cols()];
        for x in inputs.iter_rows() {
            for ((v, xi), m) in var.iter_mut().zip(x).zip(&mean) {
                *v += (xi - m) * (xi - m) / n;
            }
        }
        let scale = var.into_iter().map(|v| if v > 0.0 { v.sqrt() } else { 1.0 }).collect();
        Ok(Self { mean, scale })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, inputs: &Matrix) -> Result<Matrix> {
        if inputs.cols() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "inputs have {} columns, scaler expects {}",
                inputs.cols(),
                self.dim()
            )));
        }
        Ok(inputs.map_rows(|x| {
            x.iter()
                .zip(&self.mean)
                .zip(&self.scale)
                .map(|((v, m), s)| (v - m) / s)
                .collect()
        }))
    }

    pub fn apply_batch(&self, batch: &EmbeddingBatch) -> Result<EmbeddingBatch> {
        batch.with_vectors(self.apply(batch.vectors())?)
    }
}

/// Embeds a batch of raw inputs, keeping labels and domain tags.
pub fn embed(params: &EncoderParams, batch: &EmbeddingBatch) -> Result<EmbeddingBatch> {
    let (out, _) = forward(params, batch.vectors(), batch.domains())?;
    batch.with_vectors(out)
}

/// Reverse-mode pass. Returns parameter gradients (shaped like `params`) and
/// the gradient w.r.t. the inputs. The domain bit is data and gets none.
pub fn backward(
    params: &EncoderParams,
    trace: &ForwardTrace,
    grad_embeddings: &Matrix,
) -> Result<(EncoderParams, Matrix)> {
    if trace.dims != params.dims() || trace.layers.len() != params.layers.len() {
        return Err(Error::DimensionMismatch(
            "trace was produced by an encoder with a different architecture".into(),
        ));
    }
    if grad_embeddings.shape() != (trace.batch_size(), params.output_dim()) {
        return Err(Error::DimensionMismatch(format!(
            "upstream gradient is {:?}, expected {:?}",
            grad_embeddings.shape(),
            (trace.batch_size(), params.output_dim())
        )));
    }

    let n = trace.batch_size();
    let mut grads = params.zeros_like();
    let mut gh = grad_embeddings.clone();

    for l in (0..params.layers.len()).rev() {
        let layer = &params.layers[l];
        let cache = &trace.layers[l];
        let mut gz = Matrix::zeros(n, layer.out_dim());

        match (&cache.gate, params.gates.get(l)) {
            (None, _) => gz = gh,
            (Some(gc), Some(gate)) => {
                let r = gate.reduced();
                let ggrad = &mut grads.gates[l];
                for i in 0..n {
                    let up = gh.row(i);
                    let a = gc.act.row(i);
                    let g = gc.gate.row(i);
                    // out = a ⊙ g
                    let mut ga: Vec<f64> = up.iter().zip(g).map(|(u, g)| u * g).collect();
                    let ge: Vec<f64> = up
                        .iter()
                        .zip(a)
                        .zip(g)
                        .map(|((u, a), g)| u * a * g * (1.0 - g))
                        .collect();
                    // excite input is [s; bit]
                    let mut ex_in = gc.squeezed.row(i).to_vec();
                    ex_in.push(trace.domains[i].bit());
                    ggrad.excite.weight.add_outer(1.0, &ge, &ex_in);
                    axpy(1.0, &ge, &mut ggrad.excite.bias);
                    let gs_full = gate.excite.weight.tr_mul_vec(&ge);
                    let gsp: Vec<f64> = gs_full[..r]
                        .iter()
                        .zip(gc.squeeze_pre.row(i))
                        .map(|(g, &p)| if p > 0.0 { *g } else { 0.0 })
                        .collect();
                    ggrad.squeeze.weight.add_outer(1.0, &gsp, a);
                    axpy(1.0, &gsp, &mut ggrad.squeeze.bias);
                    axpy(1.0, &gate.squeeze.weight.tr_mul_vec(&gsp), &mut ga);
                    for ((z, &p), g) in gz.row_mut(i).iter_mut().zip(cache.pre.row(i)).zip(&ga) {
                        *z = if p > 0.0 { *g } else { 0.0 };
                    }
                }
            }
            (Some(_), None) => unreachable!("validated: gated layers have gates"),
        }

        let lgrad = &mut grads.layers[l];
        let mut gin = Matrix::zeros(n, layer.in_dim());
        for i in 0..n {
            lgrad.weight.add_outer(1.0, gz.row(i), cache.input.row(i));
            axpy(1.0, gz.row(i), &mut lgrad.bias);
            gin.row_mut(i).copy_from_slice(&layer.weight.tr_mul_vec(gz.row(i)));
        }
        gh = gin;
    }
    Ok((grads, gh))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gate_with(channels: usize, reduced: usize, seed: u64) -> CseGate {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CseGate {
            squeeze: Dense::he_normal(reduced, channels, &mut rng),
            excite: Dense::he_normal(channels, reduced + 1, &mut rng),
        }
    }

    #[test]
    fn zero_gate_halves_features() {
        let gate = CseGate::zeros(4, 2);
        let f = [1.0, -2.0, 3.0, 0.5];
        for d in [Domain::Photo, Domain::Sketch] {
            let out = cse_gate(&f, d, &gate).unwrap();
            assert_eq!(out, vec![0.5, -1.0, 1.5, 0.25]);
        }
    }

    #[test]
    fn domain_column_changes_gate() {
        let mut gate = CseGate::zeros(4, 2);
        gate.set_domain_column(&[0.7, -0.3, 1.2, 0.0]);
        let f = [1.0, 1.0, 1.0, 1.0];
        let gp = gate_values(&f, Domain::Photo, &gate).unwrap();
        let gs = gate_values(&f, Domain::Sketch, &gate).unwrap();
        let diff = gp.iter().zip(&gs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff > 0.0);
        assert!((gs[0] - sigmoid(0.7)).abs() < 1e-15);
        assert_eq!(gs[3], 0.5);
    }

    #[test]
    fn zero_features_propagate_domain_only() {
        let mut gate = gate_with(6, 2, 11);
        gate.squeeze.bias = vec![0.0; 2];
        gate.excite.bias = vec![0.0; 6];
        let g = gate_values(&[0.0; 6], Domain::Sketch, &gate).unwrap();
        let col = gate.domain_column();
        for (gi, c) in g.iter().zip(col) {
            assert!((gi - sigmoid(c)).abs() < 1e-15);
        }
    }

    #[test]
    fn gate_dimension_errors() {
        let gate = CseGate::zeros(4, 2);
        assert!(cse_gate(&[1.0; 3], Domain::Photo, &gate).is_err());
        let bad = CseGate::zeros(4, 4);
        assert!(cse_gate(&[1.0; 4], Domain::Photo, &bad).is_err());
    }

    #[test]
    fn identity_single_layer_is_identity() {
        let p = EncoderParams::new(vec![Dense::identity(3)], vec![]).unwrap();
        let x = Matrix::from_rows(&[[1.0, -2.0, 0.5], [0.0, 3.0, 4.0]]).unwrap();
        let (y, _) = forward(&p, &x, &[Domain::Photo, Domain::Sketch]).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn init_shapes_and_determinism() {
        let a = init_params(&[4, 8, 8, 16], 4, 9).unwrap();
        let b = init_params(&[4, 8, 8, 16], 4, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.gates.len(), 2);
        assert!(a.gates.iter().all(|g| g.reduced() == 2));
        assert_eq!(a.dims(), vec![4, 8, 8, 16]);
        assert!(a.layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
        assert_ne!(a, init_params(&[4, 8, 8, 16], 4, 10).unwrap());
        assert!(init_params(&[4], 4, 0).is_err());
        assert!(init_params(&[4, 8, 2], 1, 0).is_err());
        assert!(init_params(&[4, 0, 2], 4, 0).is_err());
    }

    #[test]
    fn he_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = Dense::he_normal(100, 100, &mut rng);
        let v = d.weight.as_slice();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        let want = 2.0 / 100.0;
        assert!((var - want).abs() / want < 0.1, "var {var}");
    }

    #[test]
    fn domain_changes_embedding_and_zeroed_column_removes_it() {
        let mut p = init_params(&[5, 8, 3], 4, 3).unwrap();
        let x = Matrix::from_rows(&[[0.5, -1.0, 2.0, 0.3, 1.1], [0.5, -1.0, 2.0, 0.3, 1.1]]).unwrap();
        let d = [Domain::Photo, Domain::Sketch];
        let (y, _) = forward(&p, &x, &d).unwrap();
        assert_ne!(y.row(0), y.row(1));
        for g in &mut p.gates {
            let c = g.channels();
            g.set_domain_column(&vec![0.0; c]);
        }
        let (y, _) = forward(&p, &x, &d).unwrap();
        assert_eq!(y.row(0), y.row(1));
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let p = init_params(&[3, 8, 2], 4, 1).unwrap();
        let x = Matrix::from_rows(&[[1.0, 2.0, 3.0]]).unwrap();
        let (_, t) = forward(&p, &x, &[Domain::Sketch]).unwrap();
        let (g, gi) = backward(&p, &t, &Matrix::zeros(1, 2)).unwrap();
        assert!(g.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)));
        assert!(gi.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_layer_gradient_by_hand() {
        // y = W x + b, L = Σ G ⊙ Y  ⇒  dW = Gᵀ X, db = Σ_i G_i
        let p = EncoderParams::new(
            vec![Dense::new(Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap(), vec![0.0, 0.0]).unwrap()],
            vec![],
        )
        .unwrap();
        let x = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let gy = Matrix::from_rows(&[[1.0, 0.0], [0.5, -1.0]]).unwrap();
        let (_, t) = forward(&p, &x, &[Domain::Photo, Domain::Photo]).unwrap();
        let (g, gi) = backward(&p, &t, &gy).unwrap();
        // Gᵀ X = [[1*1 + 0.5*3, 1*2 + 0.5*4], [0*1 - 1*3, 0*2 - 1*4]]
        assert_eq!(g.layers[0].weight.as_slice(), &[2.5, 4.0, -3.0, -4.0]);
        assert_eq!(g.layers[0].bias, vec![1.5, -1.0]);
        // G W = [[1, 2], [0.5 - 3, 1 - 4]]
        assert_eq!(gi.as_slice(), &[1.0, 2.0, -2.5, -3.0]);
    }

    #[test]
    fn stale_trace_rejected() {
        let p = init_params(&[3, 8, 2], 4, 1).unwrap();
        let q = init_params(&[3, 12, 2], 4, 1).unwrap();
        let x = Matrix::from_rows(&[[1.0, 2.0, 3.0]]).unwrap();
        let (_, t) = forward(&p, &x, &[Domain::Photo]).unwrap();
        assert!(backward(&q, &t, &Matrix::zeros(1, 2)).is_err());
        assert!(backward(&p, &t, &Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn forward_errors() {
        let p = init_params(&[3, 8, 2], 4, 1).unwrap();
        let x = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        assert!(forward(&p, &x, &[Domain::Photo]).is_err());
        let x = Matrix::from_rows(&[[1.0, f64::INFINITY, 0.0]]).unwrap();
        assert!(matches!(forward(&p, &x, &[Domain::Photo]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn scaler_standardises_columns() {
        let x = Matrix::from_rows(&[[1.0, 5.0], [3.0, 5.0], [5.0, 5.0]]).unwrap();
        let s = InputScaler::fit(&x).unwrap();
        assert_eq!(s.mean, vec![3.0, 5.0]);
        assert_eq!(s.scale[1], 1.0);
        let y = s.apply(&x).unwrap();
        let col: Vec<f64> = y.iter_rows().map(|r| r[0]).collect();
        let var: f64 = col.iter().map(|v| v * v).sum::<f64>() / 3.0;
        assert!((var - 1.0).abs() < 1e-12);
        assert_eq!(y.row(0)[1], 0.0);
        assert_eq!(InputScaler::identity(2).apply(&x).unwrap(), x);
        assert!(s.apply(&Matrix::zeros(1, 3)).is_err());
    }
}
