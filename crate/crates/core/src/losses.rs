//! Loss functions with analytic gradients.
//!
//! Adversarial terms use the non-saturating binary cross-entropy form: the
//! discriminators minimize BCE towards "global = 1, local = 0" and the local
//! classifier, acting as generator, minimizes BCE of its own outputs towards 1.
//! Every BCE is evaluated from the discriminator logit through a stable
//! softplus, so saturated discriminators never produce `ln 0`.

use log::debug;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::nn::{Classifier, Dense, ModelParams, ParamCount};
use crate::prototype::PrototypeSet;

/// `ln(sum exp(v))`, shifted by the max.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// BCE of `sigmoid(logit)` against a binary target.
#[inline]
pub fn bce_with_logit(logit: f64, target_one: bool) -> f64 {
    if target_one {
        softplus(-logit)
    } else {
        softplus(logit)
    }
}

/// Derivative of [`bce_with_logit`] w.r.t. the logit.
#[inline]
fn bce_logit_grad(logit: f64, target_one: bool) -> f64 {
    sigmoid(logit) - if target_one { 1.0 } else { 0.0 }
}

/// `-ln softmax(logits)[y]`.
pub fn cross_entropy(logits: &[f64], y: usize) -> f64 {
    log_sum_exp(logits) - logits[y]
}

/// Cross-entropy and its gradient w.r.t. the logits (`softmax - onehot`).
pub fn cross_entropy_grad(logits: &[f64], y: usize) -> (f64, Vec<f64>) {
    let lse = log_sum_exp(logits);
    let mut g: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
    g[y] -= 1.0;
    (lse - logits[y], g)
}

/// Linearly decaying adversarial weight `1 - t / t_max`, clamped to `[0, 1]`.
pub fn kappa(t: usize, t_max: usize) -> f64 {
    if t_max == 0 || t >= t_max {
        return 0.0;
    }
    1.0 - t as f64 / t_max as f64
}

/// Mean squared distance of features to their class prototype, and the
/// per-sample feature gradients. Samples whose class has no prototype are
/// skipped and get a zero gradient.
pub fn center_loss_grad(features: &[(&[f64], usize)], prototypes: &PrototypeSet) -> (f64, Vec<Vec<f64>>) {
    let included = features.iter().filter(|(_, y)| prototypes.contains(*y)).count();
    let mut grads: Vec<Vec<f64>> = features.iter().map(|(h, _)| vec![0.0; h.len()]).collect();
    if included == 0 {
        debug!("center loss: no sample has a global prototype, loss is 0");
        return (0.0, grads);
    }
    let n = included as f64;
    let mut loss = 0.0;
    for ((h, y), g) in features.iter().zip(grads.iter_mut()) {
        let Some(p) = prototypes.get(*y) else { continue };
        for ((gi, hi), pi) in g.iter_mut().zip(h.iter()).zip(p) {
            let d = hi - pi;
            loss += d * d;
            *gi = 2.0 * d / n;
        }
    }
    (loss / n, grads)
}

pub fn center_loss(features: &[(&[f64], usize)], prototypes: &PrototypeSet) -> f64 {
    center_loss_grad(features, prototypes).0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DiscriminatorRole {
    Prototype,
    Classification,
}

/// Binary discriminator over logit vectors: `|C| -> 2|C| -> 1`, ReLU hidden
/// layer, sigmoid output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    hidden: Dense,
    output: Dense,
    role: DiscriminatorRole,
}

/// Gradients of a [`Discriminator`].
#[derive(Debug, Clone, PartialEq)]
pub struct DiscGradients {
    pub hidden: Dense,
    pub output: Dense,
}

impl DiscGradients {
    pub fn is_zero(&self) -> bool {
        self.hidden.is_zero() && self.output.is_zero()
    }
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(num_classes: usize, role: DiscriminatorRole, rng: &mut R) -> Self {
        Self {
            hidden: Dense::glorot(num_classes, 2 * num_classes, rng),
            output: Dense::glorot(2 * num_classes, 1, rng),
            role,
        }
    }

    pub fn from_layers(hidden: Dense, output: Dense, role: DiscriminatorRole) -> Result<Self> {
        if hidden.out_dim() != output.in_dim() || output.out_dim() != 1 {
            return Err(Error::Config("discriminator layers do not chain to a scalar".into()));
        }
        Ok(Self { hidden, output, role })
    }

    /// A discriminator whose output is the constant `sigmoid(logit)`.
    pub fn constant(num_classes: usize, logit: f64, role: DiscriminatorRole) -> Self {
        let mut output = Dense::zeros(2 * num_classes, 1);
        output.bias_mut()[0] = logit;
        Self {
            hidden: Dense::zeros(num_classes, 2 * num_classes),
            output,
            role,
        }
    }

    pub fn role(&self) -> DiscriminatorRole {
        self.role
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.in_dim()
    }

    pub fn hidden(&self) -> &Dense {
        &self.hidden
    }

    pub fn output(&self) -> &Dense {
        &self.output
    }

    pub fn layers_mut(&mut self) -> (&mut Dense, &mut Dense) {
        (&mut self.hidden, &mut self.output)
    }

    fn hidden_act(&self, input: &[f64]) -> Vec<f64> {
        let mut a = vec![0.0; self.hidden.out_dim()];
        self.hidden.affine_into(input, &mut a);
        for v in &mut a {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        a
    }

    /// Pre-sigmoid output.
    pub fn logit(&self, input: &[f64]) -> f64 {
        let a = self.hidden_act(input);
        let mut out = [0.0];
        self.output.affine_into(&a, &mut out);
        out[0]
    }

    /// Probability that `input` came from the global path.
    pub fn prob(&self, input: &[f64]) -> f64 {
        sigmoid(self.logit(input))
    }

    /// Backpropagates `dlogit`; accumulates parameter gradients when `grads`
    /// is given and returns the gradient w.r.t. the input.
    fn backward(&self, input: &[f64], dlogit: f64, grads: Option<&mut DiscGradients>) -> Vec<f64> {
        let a = self.hidden_act(input);
        let mut dz: Vec<f64> = self.output.row(0).iter().map(|w| w * dlogit).collect();
        for (d, &act) in dz.iter_mut().zip(&a) {
            if act <= 0.0 {
                *d = 0.0;
            }
        }
        if let Some(g) = grads {
            g.output.add_outer(&[dlogit], &a);
            g.hidden.add_outer(&dz, input);
        }
        self.hidden.transpose_mul(&dz)
    }

    pub fn zero_grads(&self) -> DiscGradients {
        DiscGradients {
            hidden: Dense::zeros(self.hidden.in_dim(), self.hidden.out_dim()),
            output: Dense::zeros(self.output.in_dim(), 1),
        }
    }

    pub fn apply(&mut self, grads: &DiscGradients, lr: f64) -> Result<()> {
        self.hidden.axpy(-lr, &grads.hidden);
        self.output.axpy(-lr, &grads.output);
        if !(self.hidden.is_finite() && self.output.is_finite()) {
            return Err(Error::Numerical("non-finite discriminator parameters".into()));
        }
        Ok(())
    }
}

impl ParamCount for Discriminator {
    fn param_count(&self) -> usize {
        self.hidden.param_count() + self.output.param_count()
    }
}

/// Prototype discriminator loss and gradients. Target 1 on `φ_i(P_k)`
/// (global prototypes), target 0 on `φ_i(P_{i,k})` (local prototypes), for
/// classes present in both sets. `φ_i` is a constant here.
pub fn disc_pr_loss_grad(
    disc: &Discriminator,
    local_classifier: &Classifier,
    global_prototypes: &PrototypeSet,
    local_prototypes: &PrototypeSet,
) -> (f64, DiscGradients) {
    let mut grads = disc.zero_grads();
    let mut loss = 0.0;
    let mut shared = 0;
    for (k, local) in local_prototypes.iter() {
        let Some(global) = global_prototypes.get(k) else {
            continue;
        };
        shared += 1;
        let og = local_classifier.logits_unchecked(global);
        let zg = disc.logit(&og);
        loss += bce_with_logit(zg, true);
        disc.backward(&og, bce_logit_grad(zg, true), Some(&mut grads));

        let ol = local_classifier.logits_unchecked(local);
        let zl = disc.logit(&ol);
        loss += bce_with_logit(zl, false);
        disc.backward(&ol, bce_logit_grad(zl, false), Some(&mut grads));
    }
    if shared == 0 {
        debug!("prototype discriminator: no class shared between local and global prototypes");
    }
    (loss, grads)
}

pub fn disc_pr_loss(
    disc: &Discriminator,
    local_classifier: &Classifier,
    global_prototypes: &PrototypeSet,
    local_prototypes: &PrototypeSet,
) -> f64 {
    disc_pr_loss_grad(disc, local_classifier, global_prototypes, local_prototypes).0
}

/// Classification discriminator loss and gradients. Target 1 on
/// `φ(P_k)` (global classifier), target 0 on `φ_i(P_k)` (local classifier),
/// over every global prototype class.
pub fn disc_cl_loss_grad(
    disc: &Discriminator,
    local_classifier: &Classifier,
    global_classifier: &Classifier,
    global_prototypes: &PrototypeSet,
) -> (f64, DiscGradients) {
    let mut grads = disc.zero_grads();
    let mut loss = 0.0;
    if global_prototypes.is_empty() {
        debug!("classification discriminator: no global prototypes");
    }
    for (_, p) in global_prototypes.iter() {
        let og = global_classifier.logits_unchecked(p);
        let zg = disc.logit(&og);
        loss += bce_with_logit(zg, true);
        disc.backward(&og, bce_logit_grad(zg, true), Some(&mut grads));

        let ol = local_classifier.logits_unchecked(p);
        let zl = disc.logit(&ol);
        loss += bce_with_logit(zl, false);
        disc.backward(&ol, bce_logit_grad(zl, false), Some(&mut grads));
    }
    (loss, grads)
}

pub fn disc_cl_loss(
    disc: &Discriminator,
    local_classifier: &Classifier,
    global_classifier: &Classifier,
    global_prototypes: &PrototypeSet,
) -> f64 {
    disc_cl_loss_grad(disc, local_classifier, global_classifier, global_prototypes).0
}

fn classifier_grad_like(c: &Classifier) -> Dense {
    Dense::zeros(c.feature_dim(), c.num_classes())
}

/// Generator loss of the local classifier against both discriminators,
/// with its gradient w.r.t. `φ_i` (discriminators are constants).
pub fn generator_adv_loss_grad(
    disc_pr: &Discriminator,
    disc_cl: &Discriminator,
    local_classifier: &Classifier,
    local_prototypes: &PrototypeSet,
    global_prototypes: &PrototypeSet,
) -> (f64, Dense) {
    let mut grad = classifier_grad_like(local_classifier);
    let mut loss = 0.0;
    let mut push = |disc: &Discriminator, p: &[f64]| {
        let o = local_classifier.logits_unchecked(p);
        let z = disc.logit(&o);
        loss += bce_with_logit(z, true);
        let dout = disc.backward(&o, bce_logit_grad(z, true), None);
        grad.add_outer(&dout, p);
    };
    for (_, p) in local_prototypes.iter() {
        push(disc_pr, p);
    }
    for (_, p) in global_prototypes.iter() {
        push(disc_cl, p);
    }
    (loss, grad)
}

pub fn generator_adv_loss(
    disc_pr: &Discriminator,
    disc_cl: &Discriminator,
    local_classifier: &Classifier,
    local_prototypes: &PrototypeSet,
    global_prototypes: &PrototypeSet,
) -> f64 {
    generator_adv_loss_grad(disc_pr, disc_cl, local_classifier, local_prototypes, global_prototypes).0
}

/// Inputs of the fusion term that are fixed during a classifier step.
#[derive(Debug, Clone, Copy)]
pub struct CcfContext<'a> {
    pub local_prototypes: &'a PrototypeSet,
    pub global_prototypes: &'a PrototypeSet,
    pub disc_pr: &'a Discriminator,
    pub disc_cl: &'a Discriminator,
    pub round: usize,
    pub max_round: usize,
}

/// Prototype cross-entropy over local classes plus `kappa(t)` times the
/// generator loss, with the gradient w.r.t. `φ_i`.
pub fn ccf_loss_grad(local_classifier: &Classifier, ctx: &CcfContext<'_>) -> (f64, Dense) {
    let mut grad = classifier_grad_like(local_classifier);
    let mut loss = 0.0;
    for (k, p) in ctx.local_prototypes.iter() {
        let logits = local_classifier.logits_unchecked(p);
        let (l, dl) = cross_entropy_grad(&logits, k);
        loss += l;
        grad.add_outer(&dl, p);
    }
    let w = kappa(ctx.round, ctx.max_round);
    if w > 0.0 {
        let (adv, dadv) = generator_adv_loss_grad(
            ctx.disc_pr,
            ctx.disc_cl,
            local_classifier,
            ctx.local_prototypes,
            ctx.global_prototypes,
        );
        loss += w * adv;
        grad.axpy(w, &dadv);
    }
    (loss, grad)
}

pub fn ccf_loss(local_classifier: &Classifier, ctx: &CcfContext<'_>) -> f64 {
    ccf_loss_grad(local_classifier, ctx).0
}

/// Loss compositions understood by [`crate::nn::compute_gradients`].
#[derive(Debug, Clone, Copy)]
pub enum LossSpec<'a> {
    /// Batch-mean cross-entropy.
    CrossEntropy,
    /// Center loss alone.
    Center { global_prototypes: &'a PrototypeSet },
    /// Batch-mean cross-entropy plus `lambda_c` times the fusion term; the
    /// fusion term is absent before any global prototype exists.
    ClassifierPhase { lambda_c: f64, ccf: Option<CcfContext<'a>> },
    /// Batch-mean cross-entropy plus `lambda_e` times the center loss.
    ExtractorPhase {
        lambda_e: f64,
        global_prototypes: &'a PrototypeSet,
    },
}

/// Loss and gradients of the classifier-side part of a loss: gradient w.r.t.
/// the classifier and, when requested, w.r.t. each input feature vector.
pub(crate) struct HeadGrad {
    pub loss: f64,
    pub classifier: Dense,
    pub features: Vec<Vec<f64>>,
}

fn mean_cross_entropy(classifier: &Classifier, feats: &[(&[f64], usize)], need_features: bool, out: &mut HeadGrad) {
    if feats.is_empty() {
        return;
    }
    let n = feats.len() as f64;
    for (i, (h, y)) in feats.iter().enumerate() {
        let logits = classifier.logits_unchecked(h);
        let (l, mut dl) = cross_entropy_grad(&logits, *y);
        out.loss += l / n;
        for d in &mut dl {
            *d /= n;
        }
        out.classifier.add_outer(&dl, h);
        if need_features {
            let df = classifier.dense().transpose_mul(&dl);
            for (a, b) in out.features[i].iter_mut().zip(df) {
                *a += b;
            }
        }
    }
}

pub(crate) fn head_objective(
    classifier: &Classifier,
    feats: &[(&[f64], usize)],
    spec: &LossSpec<'_>,
    need_features: bool,
) -> Result<HeadGrad> {
    for (h, y) in feats {
        if h.len() != classifier.feature_dim() {
            return Err(Error::dim("feature vector", classifier.feature_dim(), h.len()));
        }
        if *y >= classifier.num_classes() {
            return Err(Error::Argument(format!("label {y} out of range")));
        }
    }
    let mut out = HeadGrad {
        loss: 0.0,
        classifier: classifier_grad_like(classifier),
        features: if need_features {
            feats.iter().map(|(h, _)| vec![0.0; h.len()]).collect()
        } else {
            Vec::new()
        },
    };
    match spec {
        LossSpec::CrossEntropy => mean_cross_entropy(classifier, feats, need_features, &mut out),
        LossSpec::Center { global_prototypes } => {
            let (l, g) = center_loss_grad(feats, global_prototypes);
            out.loss = l;
            if need_features {
                out.features = g;
            }
        }
        LossSpec::ClassifierPhase { lambda_c, ccf } => {
            mean_cross_entropy(classifier, feats, need_features, &mut out);
            if let Some(ctx) = ccf {
                if *lambda_c != 0.0 {
                    let (l, g) = ccf_loss_grad(classifier, ctx);
                    out.loss += lambda_c * l;
                    out.classifier.axpy(*lambda_c, &g);
                }
            }
        }
        LossSpec::ExtractorPhase {
            lambda_e,
            global_prototypes,
        } => {
            mean_cross_entropy(classifier, feats, need_features, &mut out);
            if *lambda_e != 0.0 {
                let (l, g) = center_loss_grad(feats, global_prototypes);
                out.loss += lambda_e * l;
                if need_features {
                    for (acc, gi) in out.features.iter_mut().zip(g) {
                        for (a, b) in acc.iter_mut().zip(gi) {
                            *a += lambda_e * b;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

fn batch_features(model: &ModelParams, batch: &[&Sample]) -> Result<Vec<Vec<f64>>> {
    batch.iter().map(|s| model.features(&s.x)).collect()
}

fn eval_spec(model: &ModelParams, batch: &[&Sample], spec: &LossSpec<'_>) -> Result<f64> {
    let feats = batch_features(model, batch)?;
    let pairs: Vec<(&[f64], usize)> = feats.iter().zip(batch).map(|(h, s)| (h.as_slice(), s.y)).collect();
    Ok(head_objective(&model.classifier, &pairs, spec, false)?.loss)
}

/// Batch-mean cross-entropy plus `lambda_c` times the fusion term.
pub fn classifier_phase_loss(
    model: &ModelParams,
    batch: &[&Sample],
    lambda_c: f64,
    ccf: Option<CcfContext<'_>>,
) -> Result<f64> {
    eval_spec(model, batch, &LossSpec::ClassifierPhase { lambda_c, ccf })
}

/// Batch-mean cross-entropy plus `lambda_e` times the center loss.
pub fn extractor_phase_loss(
    model: &ModelParams,
    batch: &[&Sample],
    lambda_e: f64,
    global_prototypes: &PrototypeSet,
) -> Result<f64> {
    eval_spec(
        model,
        batch,
        &LossSpec::ExtractorPhase {
            lambda_e,
            global_prototypes,
        },
    )
}

/// Mean cross-entropy of `model` over `data` (zero for an empty set).
pub fn mean_cross_entropy_on(model: &ModelParams, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for s in samples {
        total += cross_entropy(&model.logits(&s.x)?, s.y);
    }
    Ok(total / samples.len() as f64)
}
