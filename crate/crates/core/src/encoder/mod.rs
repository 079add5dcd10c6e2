//! Query/momentum encoder: a tanh MLP producing L2-normalized embeddings,
//! plus the coarse classifier head and hand-written backpropagation.

mod optim;

pub use optim::{apply_gradients, clip_global_norm, global_norm, AdamState, OptimConfig};

use serde::{Deserialize, Serialize};

use crate::error::{DnaError, Result};
use crate::linalg::Matrix;
use crate::rng::Rng;

/// Rows whose pre-normalization norm falls below this are rejected.
pub const NORM_EPS: f64 = 1e-12;

/// Fully connected layer computing `x · weight + bias`; `weight` is `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Dense {
            weight: Matrix::zeros(input, output),
            bias: vec![0.0; output],
        }
    }

    fn xavier(input: usize, output: usize, rng: &mut Rng) -> Self {
        let a = (6.0 / (input + output) as f64).sqrt();
        let mut layer = Dense::zeros(input, output);
        for w in layer.weight.as_mut_slice() {
            *w = a * (2.0 * rng.uniform() - 1.0);
        }
        layer
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }

    /// `x · W + b` for every row of `x`.
    pub fn apply(&self, x: &Matrix) -> Matrix {
        let (b, n_in) = x.shape();
        let n_out = self.output_dim();
        let mut out = Matrix::zeros(b, n_out);
        for r in 0..b {
            let xr = x.row(r);
            let o = out.row_mut(r);
            o.copy_from_slice(&self.bias);
            for (i, &xi) in xr.iter().enumerate().take(n_in) {
                if xi == 0.0 {
                    continue;
                }
                let wr = self.weight.row(i);
                for (oj, &wj) in o.iter_mut().zip(wr) {
                    *oj += xi * wj;
                }
            }
        }
        out
    }

    /// Accumulate parameter gradients for `out = x · W + b` and return `dL/dx`.
    fn backward(&self, x: &Matrix, d_out: &Matrix, grad: &mut Dense) -> Matrix {
        let b = x.rows();
        let n_in = self.input_dim();
        let mut dx = Matrix::zeros(b, n_in);
        for r in 0..b {
            let xr = x.row(r);
            let dor = d_out.row(r);
            for (gb, &d) in grad.bias.iter_mut().zip(dor) {
                *gb += d;
            }
            for (i, &xi) in xr.iter().enumerate() {
                for (g, &d) in grad.weight.row_mut(i).iter_mut().zip(dor) {
                    *g += xi * d;
                }
            }
            let dxr = dx.row_mut(r);
            for (i, dxi) in dxr.iter_mut().enumerate() {
                *dxi = crate::linalg::dot(self.weight.row(i), dor);
            }
        }
        dx
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub num_coarse: usize,
}

/// Weights of one encoder instance plus its classifier head.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    pub layers: Vec<Dense>,
    pub classifier: Dense,
}

impl ParameterSet {
    /// Xavier-uniform weights and zero biases, drawn layer by layer (row-major),
    /// then the classifier.
    pub fn init(arch: &Architecture, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let layers = vec![
            Dense::xavier(arch.input_dim, arch.hidden_dim, &mut rng),
            Dense::xavier(arch.hidden_dim, arch.embed_dim, &mut rng),
        ];
        let classifier = Dense::xavier(arch.embed_dim, arch.num_coarse, &mut rng);
        ParameterSet { layers, classifier }
    }

    /// A zero-valued set with the same shapes, used for gradients and moments.
    pub fn zeros_like(&self) -> Self {
        ParameterSet {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.input_dim(), l.output_dim()))
                .collect(),
            classifier: Dense::zeros(self.classifier.input_dim(), self.classifier.output_dim()),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.layers.last().map_or(0, Dense::output_dim)
    }

    pub fn num_coarse(&self) -> usize {
        self.classifier.output_dim()
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_dim: self.input_dim(),
            hidden_dim: self.layers[0].output_dim(),
            embed_dim: self.embed_dim(),
            num_coarse: self.num_coarse(),
        }
    }

    /// Tensors in canonical order: `w0, b0, w1, b1, ..., cls_w, cls_b`.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 2);
        for l in self.layers.iter().chain(std::iter::once(&self.classifier)) {
            out.push(l.weight.as_slice());
            out.push(l.bias.as_slice());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 2);
        for l in self
            .layers
            .iter_mut()
            .chain(std::iter::once(&mut self.classifier))
        {
            out.push(l.weight.as_mut_slice());
            out.push(l.bias.as_mut_slice());
        }
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn same_shape(&self, other: &ParameterSet) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .tensors()
                .iter()
                .zip(other.tensors())
                .all(|(a, b)| a.len() == b.len())
            && self
                .layers
                .iter()
                .chain(std::iter::once(&self.classifier))
                .zip(
                    other
                        .layers
                        .iter()
                        .chain(std::iter::once(&other.classifier)),
                )
                .all(|(a, b)| a.weight.shape() == b.weight.shape())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Check that layer shapes chain and the classifier reads the embedding.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(DnaError::Structural("encoder has no layers".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.bias.len() != l.output_dim() {
                return Err(DnaError::Structural(format!(
                    "layer {i} bias length mismatch"
                )));
            }
            if i > 0 && self.layers[i - 1].output_dim() != l.input_dim() {
                return Err(DnaError::Structural(format!(
                    "layer {i} expects {} inputs but layer {} emits {}",
                    l.input_dim(),
                    i - 1,
                    self.layers[i - 1].output_dim()
                )));
            }
        }
        if self.classifier.input_dim() != self.embed_dim()
            || self.classifier.bias.len() != self.classifier.output_dim()
        {
            return Err(DnaError::Structural(
                "classifier shape does not match encoder".into(),
            ));
        }
        if !self.is_finite() {
            return Err(DnaError::Numeric(
                "parameter set contains non-finite values".into(),
            ));
        }
        Ok(())
    }
}

/// Forward pass results, with the intermediates backpropagation needs.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Input to each layer (`inputs[0]` is the batch itself).
    inputs: Vec<Matrix>,
    /// Unnormalized encoder output, `B × D`.
    pub features: Matrix,
    /// Row-wise L2-normalized features.
    pub embedding: Matrix,
    norms: Vec<f64>,
}

pub fn forward(params: &ParameterSet, batch: &Matrix) -> Result<Forward> {
    if batch.cols() != params.input_dim() {
        return Err(DnaError::Structural(format!(
            "batch has {} columns, encoder expects {}",
            batch.cols(),
            params.input_dim()
        )));
    }
    if !batch.is_finite() {
        return Err(DnaError::Numeric(
            "input batch contains non-finite values".into(),
        ));
    }
    let last = params.layers.len() - 1;
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut x = batch.clone();
    for (i, layer) in params.layers.iter().enumerate() {
        let mut z = layer.apply(&x);
        if i < last {
            z.as_mut_slice().iter_mut().for_each(|v| *v = v.tanh());
        }
        if !z.is_finite() {
            return Err(DnaError::Numeric(format!(
                "non-finite activation in layer {i}"
            )));
        }
        inputs.push(std::mem::replace(&mut x, z));
    }
    let features = x;
    let mut embedding = features.clone();
    let mut norms = Vec::with_capacity(features.rows());
    for r in 0..features.rows() {
        let n = crate::linalg::norm(features.row(r));
        if n < NORM_EPS {
            return Err(DnaError::Numeric(format!(
                "encoder output row {r} has norm {n:e}, below {NORM_EPS:e}; cannot normalize"
            )));
        }
        embedding.row_mut(r).iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok(Forward {
        inputs,
        features,
        embedding,
        norms,
    })
}

/// Normalized embeddings only.
pub fn embed(params: &ParameterSet, batch: &Matrix) -> Result<Matrix> {
    Ok(forward(params, batch)?.embedding)
}

/// Classifier logits from the unnormalized encoder output.
pub fn classify(params: &ParameterSet, features: &Matrix) -> Result<Matrix> {
    if features.cols() != params.classifier.input_dim() {
        return Err(DnaError::Structural(format!(
            "classifier expects {} features, got {}",
            params.classifier.input_dim(),
            features.cols()
        )));
    }
    Ok(params.classifier.apply(features))
}

/// Backpropagate through the classifier head and the encoder.
///
/// `d_embedding` is the loss gradient with respect to the normalized
/// embedding, `d_logits` with respect to the classifier logits (computed from
/// the unnormalized features). Either may be absent.
pub fn backward(
    params: &ParameterSet,
    fwd: &Forward,
    d_embedding: Option<&Matrix>,
    d_logits: Option<&Matrix>,
) -> ParameterSet {
    let mut grads = params.zeros_like();
    let (b, d) = fwd.features.shape();
    let mut d_features = Matrix::zeros(b, d);

    if let Some(de) = d_embedding {
        for r in 0..b {
            let e = fwd.embedding.row(r);
            let g = de.row(r);
            let proj = crate::linalg::dot(e, g);
            let n = fwd.norms[r];
            for ((df, &gi), &ei) in d_features.row_mut(r).iter_mut().zip(g).zip(e) {
                *df += (gi - ei * proj) / n;
            }
        }
    }
    if let Some(dl) = d_logits {
        let df = params
            .classifier
            .backward(&fwd.features, dl, &mut grads.classifier);
        for (a, &v) in d_features.as_mut_slice().iter_mut().zip(df.as_slice()) {
            *a += v;
        }
    }

    let last = params.layers.len() - 1;
    let mut d_out = d_features;
    for i in (0..params.layers.len()).rev() {
        if i < last {
            // output of layer i is tanh(pre); it is stored as the input of layer i + 1
            let act = &fwd.inputs[i + 1];
            for (g, &a) in d_out.as_mut_slice().iter_mut().zip(act.as_slice()) {
                *g *= 1.0 - a * a;
            }
        }
        d_out = params.layers[i].backward(&fwd.inputs[i], &d_out, &mut grads.layers[i]);
    }
    grads
}

/// Exponential moving average `θm ← α θm + (1 − α) θ`, elementwise over every tensor.
pub fn momentum_update(theta_m: &mut ParameterSet, theta: &ParameterSet, alpha: f64) -> Result<()> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(DnaError::Config(format!(
            "momentum alpha must lie in [0, 1), got {alpha}"
        )));
    }
    if !theta_m.same_shape(theta) {
        return Err(DnaError::Structural(
            "momentum encoder and query encoder shapes differ".into(),
        ));
    }
    for (pm, p) in theta_m.tensors_mut().into_iter().zip(theta.tensors()) {
        for (a, &b) in pm.iter_mut().zip(p) {
            *a = alpha * *a + (1.0 - alpha) * b;
        }
    }
    Ok(())
}
