//! Dense MLP engine.
//!
//! A model is a ReLU feature extractor (every layer followed by ReLU, so
//! features are nonnegative) and a linear classifier whose row `k` is the
//! neuron for class `k`. Gradients are analytic and written by hand for the
//! fixed set of loss compositions in [`crate::losses`].
//!
//! All arithmetic is `f64`. Weights are row-major with shape `(out, in)`.

use rand::distr::{Distribution, Uniform};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::losses::{self, LossSpec};
use crate::prototype::PrototypeSet;

pub type FeatureVec = Vec<f64>;

/// Dense affine layer `z = W x + b`. Also used as the gradient container
/// for a layer of the same shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    in_dim: usize,
    out_dim: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    pub fn from_parts(in_dim: usize, out_dim: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::Config("layer dims must be > 0".into()));
        }
        if weights.len() != in_dim * out_dim {
            return Err(Error::dim("layer weights", in_dim * out_dim, weights.len()));
        }
        if bias.len() != out_dim {
            return Err(Error::dim("layer bias", out_dim, bias.len()));
        }
        Ok(Self {
            in_dim,
            out_dim,
            weights,
            bias,
        })
    }

    /// Glorot-uniform weights in `(-a, a)`, `a = sqrt(6 / (fan_in + fan_out))`,
    /// zero biases.
    pub fn glorot<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let dist = Uniform::new(-limit, limit).expect("finite nonempty range");
        let weights = (0..in_dim * out_dim).map(|_| dist.sample(rng)).collect();
        Self {
            in_dim,
            out_dim,
            weights,
            bias: vec![0.0; out_dim],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut d = Self::zeros(n, n);
        for i in 0..n {
            d.weights[i * n + i] = 1.0;
        }
        d
    }

    #[inline]
    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.weights[r * self.in_dim..(r + 1) * self.in_dim]
    }

    pub fn same_shape(&self, other: &Dense) -> bool {
        self.in_dim == other.in_dim && self.out_dim == other.out_dim
    }

    /// `W x + b` written into `out`. Dimensions are the caller's contract.
    #[inline]
    pub(crate) fn affine_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.in_dim);
        debug_assert_eq!(out.len(), self.out_dim);
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.weights[r * self.in_dim..(r + 1) * self.in_dim];
            let mut acc = 0.0;
            for (w, xi) in row.iter().zip(x) {
                acc += w * xi;
            }
            *o = acc + self.bias[r];
        }
    }

    pub fn affine(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim {
            return Err(Error::dim("layer input", self.in_dim, x.len()));
        }
        let mut out = vec![0.0; self.out_dim];
        self.affine_into(x, &mut out);
        Ok(out)
    }

    /// Gradient accumulation: `W += dz x^T`, `b += dz`.
    #[inline]
    pub(crate) fn add_outer(&mut self, dz: &[f64], x: &[f64]) {
        for (r, &d) in dz.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let row = &mut self.weights[r * self.in_dim..(r + 1) * self.in_dim];
            for (w, xi) in row.iter_mut().zip(x) {
                *w += d * xi;
            }
            self.bias[r] += d;
        }
    }

    /// `W^T dz`.
    #[inline]
    pub(crate) fn transpose_mul(&self, dz: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.in_dim];
        for (r, &d) in dz.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let row = &self.weights[r * self.in_dim..(r + 1) * self.in_dim];
            for (o, w) in out.iter_mut().zip(row) {
                *o += d * w;
            }
        }
        out
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Dense) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += alpha * b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += alpha * b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|&v| v == 0.0)
    }

    /// All parameters, weights first then biases.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().chain(&self.bias)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.iter_mut().chain(self.bias.iter_mut())
    }

    pub fn max_abs_diff(&self, other: &Dense) -> f64 {
        self.values()
            .zip(other.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Number of scalar parameters a block carries, biases included.
pub trait ParamCount {
    fn param_count(&self) -> usize;
}

pub fn param_count<T: ParamCount + ?Sized>(block: &T) -> usize {
    block.param_count()
}

impl ParamCount for Dense {
    fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

impl ParamCount for PrototypeSet {
    fn param_count(&self) -> usize {
        PrototypeSet::param_count(self)
    }
}

/// Activations recorded by [`Extractor::forward_trace`]: `acts[0]` is the
/// input, `acts[l + 1]` the ReLU output of layer `l`.
#[derive(Debug, Clone)]
pub struct Trace {
    acts: Vec<Vec<f64>>,
}

impl Trace {
    pub fn features(&self) -> &[f64] {
        self.acts.last().expect("trace holds the input")
    }
}

/// Feature extractor: a stack of dense layers, each followed by ReLU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extractor {
    layers: Vec<Dense>,
}

impl Extractor {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("extractor needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::dim("extractor layer chain", pair[0].out_dim, pair[1].in_dim));
            }
        }
        Ok(Self { layers })
    }

    pub fn init<R: Rng + ?Sized>(input_dim: usize, hidden: &[usize], feature_dim: usize, rng: &mut R) -> Self {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(feature_dim);
        let layers = dims.windows(2).map(|w| Dense::glorot(w[0], w[1], rng)).collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn same_shape(&self, other: &Extractor) -> bool {
        self.layers.len() == other.layers.len() && self.layers.iter().zip(&other.layers).all(|(a, b)| a.same_shape(b))
    }

    pub fn forward(&self, x: &[f64]) -> Result<FeatureVec> {
        if x.len() != self.input_dim() {
            return Err(Error::dim("extractor input", self.input_dim(), x.len()));
        }
        let mut cur = x.to_vec();
        for layer in &self.layers {
            let mut next = vec![0.0; layer.out_dim];
            layer.affine_into(&cur, &mut next);
            relu_in_place(&mut next);
            cur = next;
        }
        Ok(cur)
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<Trace> {
        if x.len() != self.input_dim() {
            return Err(Error::dim("extractor input", self.input_dim(), x.len()));
        }
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        for layer in &self.layers {
            let mut next = vec![0.0; layer.out_dim];
            layer.affine_into(acts.last().unwrap(), &mut next);
            relu_in_place(&mut next);
            acts.push(next);
        }
        Ok(Trace { acts })
    }

    /// Backpropagates `dfeat` (gradient w.r.t. the extractor output) through
    /// the recorded trace, accumulating into `grads`.
    pub(crate) fn backward(&self, trace: &Trace, dfeat: &[f64], grads: &mut [Dense]) {
        let mut delta = dfeat.to_vec();
        for l in (0..self.layers.len()).rev() {
            let out = &trace.acts[l + 1];
            // ReLU: a > 0 iff z > 0
            for (d, &a) in delta.iter_mut().zip(out) {
                if a <= 0.0 {
                    *d = 0.0;
                }
            }
            grads[l].add_outer(&delta, &trace.acts[l]);
            if l > 0 {
                delta = self.layers[l].transpose_mul(&delta);
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Dense::is_finite)
    }

    pub fn zeros_like(&self) -> Vec<Dense> {
        self.layers.iter().map(|l| Dense::zeros(l.in_dim, l.out_dim)).collect()
    }
}

impl ParamCount for Extractor {
    fn param_count(&self) -> usize {
        self.layers.iter().map(ParamCount::param_count).sum()
    }
}

#[inline]
fn relu_in_place(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Linear classifier over features. Row `k` plus bias `k` is the neuron of
/// class `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    layer: Dense,
}

impl Classifier {
    pub fn new(layer: Dense) -> Self {
        Self { layer }
    }

    pub fn init<R: Rng + ?Sized>(feature_dim: usize, num_classes: usize, rng: &mut R) -> Self {
        Self::new(Dense::glorot(feature_dim, num_classes, rng))
    }

    pub fn dense(&self) -> &Dense {
        &self.layer
    }

    pub fn dense_mut(&mut self) -> &mut Dense {
        &mut self.layer
    }

    pub fn into_dense(self) -> Dense {
        self.layer
    }

    pub fn num_classes(&self) -> usize {
        self.layer.out_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.layer.in_dim
    }

    pub fn logits(&self, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.feature_dim() {
            return Err(Error::dim("classifier input", self.feature_dim(), h.len()));
        }
        let mut out = vec![0.0; self.num_classes()];
        self.layer.affine_into(h, &mut out);
        Ok(out)
    }

    /// Unchecked variant for hot loops where the caller guarantees `h.len() == K`.
    #[inline]
    pub(crate) fn logits_unchecked(&self, h: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.num_classes()];
        self.layer.affine_into(h, &mut out);
        out
    }

    pub fn neuron(&self, class: usize) -> (&[f64], f64) {
        (self.layer.row(class), self.layer.bias[class])
    }

    pub fn set_neuron(&mut self, class: usize, weights: &[f64], bias: f64) {
        let k = self.layer.in_dim;
        self.layer.weights[class * k..(class + 1) * k].copy_from_slice(weights);
        self.layer.bias[class] = bias;
    }

    pub fn same_shape(&self, other: &Classifier) -> bool {
        self.layer.same_shape(&other.layer)
    }
}

impl ParamCount for Classifier {
    fn param_count(&self) -> usize {
        self.layer.param_count()
    }
}

/// Layer sizes of the extractor/classifier pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub num_classes: usize,
}

/// Extractor `θ` plus classifier `φ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub extractor: Extractor,
    pub classifier: Classifier,
}

impl ModelParams {
    pub fn new(extractor: Extractor, classifier: Classifier) -> Result<Self> {
        if extractor.output_dim() != classifier.feature_dim() {
            return Err(Error::dim(
                "classifier input vs extractor output",
                extractor.output_dim(),
                classifier.feature_dim(),
            ));
        }
        Ok(Self { extractor, classifier })
    }

    pub fn init<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Self {
        let extractor = Extractor::init(arch.input_dim, &arch.hidden, arch.feature_dim, rng);
        let classifier = Classifier::init(arch.feature_dim, arch.num_classes, rng);
        Self { extractor, classifier }
    }

    pub fn architecture(&self) -> Architecture {
        let layers = self.extractor.layers();
        Architecture {
            input_dim: self.extractor.input_dim(),
            hidden: layers[..layers.len() - 1].iter().map(Dense::out_dim).collect(),
            feature_dim: self.extractor.output_dim(),
            num_classes: self.classifier.num_classes(),
        }
    }

    pub fn features(&self, x: &[f64]) -> Result<FeatureVec> {
        self.extractor.forward(x)
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        let h = self.extractor.forward(x)?;
        Ok(self.classifier.logits_unchecked(&h))
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }

    pub fn is_finite(&self) -> bool {
        self.extractor.is_finite() && self.classifier.dense().is_finite()
    }
}

impl ParamCount for ModelParams {
    fn param_count(&self) -> usize {
        self.extractor.param_count() + self.classifier.param_count()
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `f(θ; x)`.
pub fn forward_features(extractor: &Extractor, x: &[f64]) -> Result<FeatureVec> {
    extractor.forward(x)
}

/// `g(φ; h) = W h + b`, unnormalized.
pub fn forward_logits(classifier: &Classifier, h: &[f64]) -> Result<Vec<f64>> {
    classifier.logits(h)
}

/// Which parameter blocks a training step may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamMask {
    Full,
    ClassifierOnly,
    ExtractorOnly,
}

impl ParamMask {
    pub fn trains_extractor(self) -> bool {
        matches!(self, ParamMask::Full | ParamMask::ExtractorOnly)
    }

    pub fn trains_classifier(self) -> bool {
        matches!(self, ParamMask::Full | ParamMask::ClassifierOnly)
    }
}

/// Gradient tree congruent with [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub extractor: Vec<Dense>,
    pub classifier: Dense,
}

impl Gradients {
    pub fn zeros_like(model: &ModelParams) -> Self {
        Self {
            extractor: model.extractor.zeros_like(),
            classifier: Dense::zeros(model.classifier.feature_dim(), model.classifier.num_classes()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.extractor.iter().all(Dense::is_finite) && self.classifier.is_finite()
    }

    fn congruent(&self, model: &ModelParams) -> bool {
        self.classifier.same_shape(model.classifier.dense())
            && self.extractor.len() == model.extractor.layers().len()
            && self
                .extractor
                .iter()
                .zip(model.extractor.layers())
                .all(|(g, l)| g.same_shape(l))
    }
}

/// Loss and analytic gradients of `spec` on `batch`. Masked blocks receive
/// exactly zero gradient.
pub fn compute_gradients(
    model: &ModelParams,
    batch: &[&Sample],
    spec: &LossSpec<'_>,
    mask: ParamMask,
) -> Result<(f64, Gradients)> {
    let mut traces = Vec::with_capacity(batch.len());
    for s in batch {
        traces.push(model.extractor.forward_trace(&s.x)?);
    }
    let feats: Vec<(&[f64], usize)> = traces.iter().zip(batch).map(|(t, s)| (t.features(), s.y)).collect();
    let head = losses::head_objective(&model.classifier, &feats, spec, mask.trains_extractor())?;
    if !head.loss.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss {}", head.loss)));
    }

    let mut grads = Gradients::zeros_like(model);
    if mask.trains_classifier() {
        grads.classifier = head.classifier;
    }
    if mask.trains_extractor() {
        for (trace, dfeat) in traces.iter().zip(&head.features) {
            model.extractor.backward(trace, dfeat, &mut grads.extractor);
        }
    }
    Ok((head.loss, grads))
}

/// `p <- p - lr * g` on unmasked blocks only.
pub fn sgd_step(model: &ModelParams, grads: &Gradients, lr: f64, mask: ParamMask) -> Result<ModelParams> {
    let mut next = model.clone();
    sgd_step_in_place(&mut next, grads, lr, mask)?;
    Ok(next)
}

pub(crate) fn sgd_step_in_place(model: &mut ModelParams, grads: &Gradients, lr: f64, mask: ParamMask) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Argument(format!(
            "learning rate must be finite and > 0, got {lr}"
        )));
    }
    if !grads.congruent(model) {
        return Err(Error::Argument("gradient shape does not match model".into()));
    }
    if mask.trains_extractor() {
        for (layer, g) in model.extractor.layers_mut().iter_mut().zip(&grads.extractor) {
            layer.axpy(-lr, g);
        }
    }
    if mask.trains_classifier() {
        model.classifier.dense_mut().axpy(-lr, &grads.classifier);
    }
    if !model.is_finite() {
        return Err(Error::Numerical("non-finite parameters after SGD step".into()));
    }
    Ok(())
}
