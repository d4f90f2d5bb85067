//! Trainable classifiers: logistic regression, MLP and a small CNN.

mod checkpoint;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::explain::{perturbed_batch, ComponentScheme};
use crate::tensor::Tensor;

pub use checkpoint::CheckpointError;
pub use train::{
    train, EpochStats, LabeledSet, Lambda1, LossSpec, OptimKind, OptimSpec, RrrTarget, TrainReport,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("class {0} has no instances")]
    EmptyClass(usize),
    #[error("invalid optimizer settings: {0}")]
    InvalidOptim(String),
    #[error("training diverged in epoch {epoch}; parameters restored to the last finite state")]
    Divergence { epoch: usize, report: Box<TrainReport> },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Architecture {
    Logreg,
    /// `widths` includes the input width first and the class count last.
    Mlp { widths: Vec<usize> },
    /// Same-padded convolutions; every conv but the last is followed by
    /// relu and max pooling. The last conv (after relu) is the layer used by
    /// Grad-CAM and the latent gradient penalty. `dense` lists hidden widths
    /// between the flattened last-conv output and the class layer.
    Cnn {
        conv_channels: Vec<usize>,
        kernel: usize,
        pool: usize,
        dense: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    /// Per-instance input shape; `[C, H, W]` or `[H, W]` for CNNs.
    pub input_shape: Vec<usize>,
    pub classes: usize,
}

impl ModelSpec {
    pub fn logreg(input_dim: usize, classes: usize) -> Self {
        Self {
            architecture: Architecture::Logreg,
            input_shape: vec![input_dim],
            classes,
        }
    }

    pub fn mlp(widths: Vec<usize>) -> Self {
        let input = widths.first().copied().unwrap_or(0);
        let classes = widths.last().copied().unwrap_or(0);
        Self {
            architecture: Architecture::Mlp { widths },
            input_shape: vec![input],
            classes,
        }
    }

    /// Two hidden relu layers of 50 and 30 units.
    pub fn decoy_mlp(input_shape: Vec<usize>, classes: usize) -> Self {
        let d = input_shape.iter().product();
        Self {
            architecture: Architecture::Mlp {
                widths: vec![d, 50, 30, classes],
            },
            input_shape,
            classes,
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    fn conv_input(&self) -> (usize, usize, usize) {
        match self.input_shape.as_slice() {
            [h, w] => (1, *h, *w),
            [c, h, w] => (*c, *h, *w),
            _ => (0, 0, 0),
        }
    }

    /// Spatial size of the last-conv activations, for CNNs.
    pub fn last_conv_grid(&self) -> Option<(usize, usize)> {
        let Architecture::Cnn { conv_channels, pool, .. } = &self.architecture else {
            return None;
        };
        let (_, mut h, mut w) = self.conv_input();
        for _ in 1..conv_channels.len() {
            h /= pool;
            w /= pool;
        }
        Some((h, w))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidSpec(m));
        if self.classes < 2 {
            return bad(format!("class count {} < 2", self.classes));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return bad(format!("input shape {:?}", self.input_shape));
        }
        match &self.architecture {
            Architecture::Logreg => Ok(()),
            Architecture::Mlp { widths } => {
                if widths.len() < 2 || widths.contains(&0) {
                    return bad(format!("mlp widths {widths:?}"));
                }
                if widths[0] != self.input_len() || *widths.last().unwrap() != self.classes {
                    return bad(format!(
                        "mlp widths {widths:?} must start at input size {} and end at {} classes",
                        self.input_len(),
                        self.classes
                    ));
                }
                Ok(())
            }
            Architecture::Cnn {
                conv_channels,
                kernel,
                pool,
                dense,
            } => {
                if conv_channels.is_empty() || conv_channels.contains(&0) || dense.contains(&0) {
                    return bad(format!("cnn widths {conv_channels:?} / {dense:?}"));
                }
                if kernel % 2 == 0 || *pool == 0 {
                    return bad(format!("cnn kernel {kernel} must be odd, pool {pool} must be positive"));
                }
                if !(2..=3).contains(&self.input_shape.len()) {
                    return bad(format!("cnn input shape {:?}", self.input_shape));
                }
                match self.last_conv_grid() {
                    Some((h, w)) if h > 0 && w > 0 => Ok(()),
                    _ => bad("pooling reduces the last-conv grid to nothing".into()),
                }
            }
        }
    }

    /// Parameter names and shapes in a fixed order, with Glorot fan sizes.
    fn layout(&self) -> Vec<(String, Vec<usize>, Option<(usize, usize)>)> {
        let mut out = Vec::new();
        let dense = |out: &mut Vec<_>, i: usize, a: usize, b: usize| {
            out.push((format!("dense{i}.weight"), vec![a, b], Some((a, b))));
            out.push((format!("dense{i}.bias"), vec![b], None));
        };
        match &self.architecture {
            Architecture::Logreg => dense(&mut out, 0, self.input_len(), self.classes),
            Architecture::Mlp { widths } => {
                for (i, w) in widths.windows(2).enumerate() {
                    dense(&mut out, i, w[0], w[1]);
                }
            }
            Architecture::Cnn {
                conv_channels,
                kernel,
                dense: hidden,
                ..
            } => {
                let (mut c, _, _) = self.conv_input();
                for (i, &o) in conv_channels.iter().enumerate() {
                    let k2 = kernel * kernel;
                    out.push((format!("conv{i}.kernel"), vec![o, c, *kernel, *kernel], Some((c * k2, o * k2))));
                    out.push((format!("conv{i}.bias"), vec![o], None));
                    c = o;
                }
                let (h, w) = self.last_conv_grid().unwrap_or((0, 0));
                let mut width = c * h * w;
                for (i, &hid) in hidden.iter().chain(std::iter::once(&self.classes)).enumerate() {
                    dense(&mut out, i, width, hid);
                    width = hid;
                }
            }
        }
        out
    }
}

/// Per-feature affine normalization `(x - mean) / std`, fitted on a
/// training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Fits on the rows of `x`. Features with (near) zero spread keep a
    /// unit scale.
    pub fn fit(x: &Tensor) -> Self {
        let n = x.shape()[0].max(1) as f64;
        let d = x.row_width();
        let mut mean = vec![0.0; d];
        for row in x.data().chunks(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for row in x.data().chunks(d) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd < 1e-8 {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        let d = self.mean.len();
        let data = x
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s))
            .collect();
        Tensor::from_parts(x.shape().to_vec(), data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub spec: ModelSpec,
    /// Parameter tensors in [`ModelSpec`] layout order.
    pub params: Vec<Tensor>,
    pub param_names: Vec<String>,
    pub seed: u64,
    /// Optimizer updates applied so far.
    pub step: u64,
    /// Training epochs completed so far; drives the shuffle order.
    pub epochs: u64,
    pub standardizer: Option<Standardizer>,
}

/// The recorded forward pass of a model on one batch.
pub struct ForwardPass {
    pub input: Var,
    pub params: Vec<Var>,
    pub logits: Var,
    /// Post-relu activations of the last conv layer (CNNs only).
    pub last_conv: Option<Var>,
}

/// Anything that maps a batch of instances to class probabilities.
pub trait Classifier {
    fn classes(&self) -> usize;
    fn input_shape(&self) -> &[usize];
    /// `[N, ...input_shape]` in, `[N, K]` out; rows sum to one.
    fn predict_proba(&self, batch: &Tensor) -> Result<Tensor>;

    /// A typical input, used as the "off" value by perturbation explainers.
    fn reference_input(&self) -> Option<&[f64]> {
        None
    }

    /// Probabilities for copies of `x` where the components switched off in
    /// each mask take their `baseline` values.
    fn predict_perturbed(&self, x: &Tensor, baseline: &[f64], scheme: &ComponentScheme, masks: &[Vec<bool>]) -> Result<Tensor> {
        self.predict_proba(&perturbed_batch(x, baseline, scheme, masks))
    }
}

impl Model {
    /// Glorot-uniform weights, zero biases.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut names = Vec::new();
        for (name, shape, fans) in spec.layout() {
            let n: usize = shape.iter().product();
            let data = match fans {
                Some((fan_in, fan_out)) => {
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    (0..n).map(|_| rng.gen_range(-a..a)).collect()
                }
                None => vec![0.0; n],
            };
            params.push(Tensor::from_parts(shape, data));
            names.push(name);
        }
        Ok(Self {
            spec,
            params,
            param_names: names,
            seed,
            step: 0,
            epochs: 0,
            standardizer: None,
        })
    }

    pub fn with_standardizer(mut self, standardizer: Standardizer) -> Self {
        self.standardizer = Some(standardizer);
        self
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.param_names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.param_names.iter().position(|n| n == name).map(|i| &mut self.params[i])
    }

    pub fn param_norm_sq(&self) -> f64 {
        self.params.iter().map(Tensor::norm_sq).sum()
    }

    fn check_batch(&self, batch: &Tensor) -> Result<usize> {
        let s = batch.shape();
        if s.len() != self.spec.input_shape.len() + 1 || s[1..] != self.spec.input_shape[..] {
            return Err(ModelError::ShapeMismatch(format!(
                "batch {:?} does not match input shape {:?}",
                s, self.spec.input_shape
            )));
        }
        Ok(s[0])
    }

    /// Records the forward pass of `batch` on `tape`.
    pub fn forward(&self, tape: &Tape, batch: &Tensor) -> Result<ForwardPass> {
        self.check_batch(batch)?;
        let input = tape.input("x", batch.clone());
        let params: Vec<Var> = self
            .params
            .iter()
            .zip(&self.param_names)
            .map(|(p, n)| tape.parameter(n, p.clone()))
            .collect();
        let (logits, last_conv) = self.forward_vars(tape, &input, &params)?;
        Ok(ForwardPass {
            input,
            params,
            logits,
            last_conv,
        })
    }

    fn standardize(&self, tape: &Tape, x: &Var) -> Result<Var> {
        let Some(st) = &self.standardizer else {
            return Ok(x.clone());
        };
        let shape = x.shape();
        let n = shape[0];
        let mean = Tensor::from_parts(shape.clone(), st.mean.iter().copied().cycle().take(n * st.mean.len()).collect());
        let inv = Tensor::from_parts(
            shape.clone(),
            st.std.iter().map(|s| 1.0 / s).cycle().take(n * st.std.len()).collect(),
        );
        Ok(x.sub(&tape.constant(mean))?.mask_mul(&inv)?)
    }

    fn forward_vars(&self, tape: &Tape, input: &Var, params: &[Var]) -> Result<(Var, Option<Var>)> {
        let n = input.shape()[0];
        let x = self.standardize(tape, input)?;
        let dense_stack = |mut h: Var, params: &[Var]| -> Result<Var> {
            let layers = params.len() / 2;
            for (i, pair) in params.chunks(2).enumerate() {
                h = h.matmul(&pair[0])?.add_bias(&pair[1], 1)?;
                if i + 1 < layers {
                    h = h.relu()?;
                }
            }
            Ok(h)
        };
        match &self.spec.architecture {
            Architecture::Logreg | Architecture::Mlp { .. } => {
                let flat = x.reshape(&[n, self.spec.input_len()])?;
                Ok((dense_stack(flat, params)?, None))
            }
            Architecture::Cnn {
                conv_channels,
                kernel,
                pool,
                ..
            } => {
                let (c, h, w) = self.spec.conv_input();
                let mut act = x.reshape(&[n, c, h, w])?;
                let pad = (kernel - 1) / 2;
                let convs = conv_channels.len();
                for i in 0..convs {
                    act = act.conv2d(&params[2 * i], pad)?.add_bias(&params[2 * i + 1], 1)?.relu()?;
                    if i + 1 < convs && *pool > 1 {
                        act = act.max_pool2d(*pool)?;
                    }
                }
                let last = act.clone();
                let width = last.shape()[1..].iter().product();
                let flat = act.reshape(&[n, width])?;
                Ok((dense_stack(flat, &params[2 * convs..])?, Some(last)))
            }
        }
    }

    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let fp = self.forward(&tape, batch)?;
        let v = fp.logits.value();
        Ok((*v).clone())
    }

    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        Ok(self.predict_proba(batch)?.argmax_rows())
    }

    pub fn accuracy(&self, batch: &Tensor, labels: &[usize]) -> Result<f64> {
        if labels.is_empty() {
            return Ok(0.0);
        }
        let mut correct = 0usize;
        // chunked to bound tape memory
        for start in (0..labels.len()).step_by(512) {
            let end = (start + 512).min(labels.len());
            let rows: Vec<usize> = (start..end).collect();
            let pred = self.predict(&batch.select_rows(&rows))?;
            correct += pred.iter().zip(&labels[start..end]).filter(|(p, y)| p == y).count();
        }
        Ok(correct as f64 / labels.len() as f64)
    }

    /// First-layer weights and bias for architectures whose first operation
    /// is a dense layer on the (standardized) flat input.
    pub(crate) fn dense_first_layer(&self) -> Option<(&Tensor, &Tensor)> {
        match self.spec.architecture {
            Architecture::Logreg | Architecture::Mlp { .. } => Some((&self.params[0], &self.params[1])),
            Architecture::Cnn { .. } => None,
        }
    }

    /// First-layer pre-activations of a one-row batch.
    fn first_layer_pre(&self, one: &Tensor) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let x = tape.input("x", one.clone());
        let flat = self.standardize(&tape, &x)?.reshape(&[1, self.spec.input_len()])?;
        let w = tape.parameter("w", self.params[0].clone());
        let b = tape.parameter("b", self.params[1].clone());
        let pre = flat.matmul(&w)?.add_bias(&b, 1)?;
        let v = pre.value();
        Ok(v.data().to_vec())
    }

    /// Continues the forward pass from first-layer pre-activations
    /// `[N, width]` (dense architectures only).
    pub(crate) fn predict_from_first_layer(&self, pre: Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let mut h = tape.input("pre", pre);
        let layers = self.params.len() / 2;
        for i in 1..layers {
            h = h.relu()?;
            let w = tape.parameter("w", self.params[2 * i].clone());
            let b = tape.parameter("b", self.params[2 * i + 1].clone());
            h = h.matmul(&w)?.add_bias(&b, 1)?;
        }
        let lp = h.log_softmax()?;
        let v = lp.value();
        v.map(f64::exp).map_err(|e| ModelError::ShapeMismatch(e.to_string()))
    }
}

impl Classifier for Model {
    fn classes(&self) -> usize {
        self.spec.classes
    }

    fn input_shape(&self) -> &[usize] {
        &self.spec.input_shape
    }

    fn predict_proba(&self, batch: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let fp = self.forward(&tape, batch)?;
        let lp = fp.logits.log_softmax()?;
        let v = lp.value();
        v.map(f64::exp).map_err(|e| ModelError::ShapeMismatch(e.to_string()))
    }

    fn reference_input(&self) -> Option<&[f64]> {
        self.standardizer.as_ref().map(|s| s.mean.as_slice())
    }

    /// Dense-first models precompute each component's effect on the first
    /// layer, so a sample costs `O(components * width)` instead of a full
    /// first-layer product.
    fn predict_perturbed(&self, x: &Tensor, baseline: &[f64], scheme: &ComponentScheme, masks: &[Vec<bool>]) -> Result<Tensor> {
        let Some((w, b)) = self.dense_first_layer() else {
            return self.predict_proba(&perturbed_batch(x, baseline, scheme, masks));
        };
        if x.shape() != self.spec.input_shape.as_slice() || baseline.len() != x.len() || scheme.input_len() != x.len() {
            return Err(ModelError::ShapeMismatch(format!("instance {:?} vs input {:?}", x.shape(), self.spec.input_shape)));
        }
        let width = b.len();
        let inv: Vec<f64> = match &self.standardizer {
            Some(st) => st.std.iter().map(|s| 1.0 / s).collect(),
            None => vec![1.0; x.len()],
        };
        let mut one = vec![1];
        one.extend_from_slice(x.shape());
        let base_pre = self.first_layer_pre(&Tensor::from_parts(one, x.data().to_vec()))?;
        let mut deltas = vec![0.0; scheme.len() * width];
        for j in 0..scheme.len() {
            let dj = &mut deltas[j * width..(j + 1) * width];
            for &i in scheme.indices(j) {
                let step = (baseline[i] - x.data()[i]) * inv[i];
                if step != 0.0 {
                    for (d, wv) in dj.iter_mut().zip(w.row(i)) {
                        *d += step * wv;
                    }
                }
            }
        }
        let mut pre = Vec::with_capacity(masks.len() * width);
        for z in masks {
            let start = pre.len();
            pre.extend_from_slice(&base_pre);
            for (j, &on) in z.iter().enumerate() {
                if !on {
                    for (p, d) in pre[start..].iter_mut().zip(&deltas[j * width..(j + 1) * width]) {
                        *p += d;
                    }
                }
            }
        }
        self.predict_from_first_layer(Tensor::from_parts(vec![masks.len(), width], pre))
    }
}

/// Class weights `c_k = N / (K * count_k)`, so that `sum_k count_k c_k = N`.
pub fn class_weights(labels: &[usize], classes: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; classes];
    for &y in labels {
        if y >= classes {
            return Err(ModelError::ShapeMismatch(format!("label {y} >= {classes} classes")));
        }
        counts[y] += 1;
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(ModelError::EmptyClass(empty));
    }
    let n = labels.len() as f64;
    Ok(counts.iter().map(|&c| n / (classes as f64 * c as f64)).collect())
}
