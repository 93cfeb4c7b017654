//! Server-side aggregation.
//!
//! Per round, after the barrier:
//!
//! 1. multi-view prototype aggregation: three weightings of each class's
//!    contributors (sample size, centroid agreement, prediction by the held
//!    global classifier) are fused with weights that penalize views that
//!    disagree with the others;
//! 2. class-wise classifier integration: each class neuron is the
//!    sample-weighted mean of the neurons of the clients holding that class;
//! 3. a few cross-entropy steps of the global classifier on the global
//!    prototypes;
//! 4. sample-weighted averaging of whichever extractors were uploaded.
//!
//! Extractor uploads follow a cost-aware schedule: rounds whose index is a
//! multiple of `ceil(x * q)` carry no extractor, where `q` is the ratio of
//! extractor size to prototype-set size.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::client::{Broadcast, ClientUpdate};
use crate::error::{Error, Result};
use crate::losses::{self, softmax, LossSpec};
use crate::nn::{Classifier, Dense, Extractor, ModelParams};
use crate::prototype::PrototypeSet;

const SUM_TOL: f64 = 1e-9;

/// Weights used to fuse the prototypes of one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationWeights {
    /// Client ids contributing to the class, in ascending order.
    pub clients: Vec<usize>,
    pub sample: Vec<f64>,
    pub centroid: Vec<f64>,
    pub prediction: Vec<f64>,
    /// Fusion weights of the sample, centroid and prediction views.
    pub view_weights: [f64; 3],
    pub combined: Vec<f64>,
}

fn normalize_or_uniform(mut v: Vec<f64>) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    if s > 0.0 && s.is_finite() {
        for x in &mut v {
            *x /= s;
        }
    } else {
        let u = 1.0 / v.len() as f64;
        v.iter_mut().for_each(|x| *x = u);
    }
    v
}

/// Normalized sample counts.
pub fn sample_weights(counts: &[usize]) -> Result<Vec<f64>> {
    if counts.is_empty() {
        return Err(Error::Argument("sample_weights: no contributors".into()));
    }
    if counts.contains(&0) {
        return Err(Error::Argument("sample_weights: zero count".into()));
    }
    let total: usize = counts.iter().sum();
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        log::debug!("zero-norm vector in centroid similarity; cosine set to 0");
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Agreement of each prototype with the unweighted mean of all of them,
/// as `(1 + cos) / 2`, normalized.
pub fn centroid_weights(prototypes: &[&[f64]]) -> Result<Vec<f64>> {
    let Some(first) = prototypes.first() else {
        return Err(Error::Argument("centroid_weights: no prototypes".into()));
    };
    let dim = first.len();
    if let Some(p) = prototypes.iter().find(|p| p.len() != dim) {
        return Err(Error::dim("prototype", dim, p.len()));
    }
    let n = prototypes.len() as f64;
    let mut anchor = vec![0.0; dim];
    for p in prototypes {
        for (a, v) in anchor.iter_mut().zip(p.iter()) {
            *a += v;
        }
    }
    anchor.iter_mut().for_each(|a| *a /= n);
    let scores = prototypes.iter().map(|p| (1.0 + cosine(p, &anchor)) / 2.0).collect();
    Ok(normalize_or_uniform(scores))
}

/// Probability the reference classifier assigns to `class` for each
/// prototype, normalized over contributors.
pub fn prediction_weights(prototypes: &[&[f64]], class: usize, reference: &Classifier) -> Result<Vec<f64>> {
    if prototypes.is_empty() {
        return Err(Error::Argument("prediction_weights: no prototypes".into()));
    }
    if class >= reference.num_classes() {
        return Err(Error::Argument(format!("class {class} out of range")));
    }
    let mut scores = Vec::with_capacity(prototypes.len());
    for p in prototypes {
        scores.push(softmax(&reference.logits(p)?)[class]);
    }
    Ok(normalize_or_uniform(scores))
}

fn check_distribution(p: &[f64], name: &str) -> Result<()> {
    if p.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::Argument(format!("{name}: negative or non-finite entry")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > SUM_TOL {
        return Err(Error::Argument(format!("{name}: sums to {s}")));
    }
    Ok(())
}

fn kl_to_mixture(p: &[f64], m: &[f64]) -> f64 {
    p.iter()
        .zip(m)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a / b).ln())
        .sum()
}

/// Jensen-Shannon divergence in nats.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::dim("distribution", p.len(), q.len()));
    }
    check_distribution(p, "js_divergence p")?;
    check_distribution(q, "js_divergence q")?;
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    let js = 0.5 * kl_to_mixture(p, &m) + 0.5 * kl_to_mixture(q, &m);
    Ok(js.max(0.0))
}

/// Softmax of minus each view's summed divergence to the other two.
pub fn mps_view_weights(sample: &[f64], centroid: &[f64], prediction: &[f64]) -> Result<[f64; 3]> {
    let views = [sample, centroid, prediction];
    let mut pair = [[0.0; 3]; 3];
    for a in 0..3 {
        for b in (a + 1)..3 {
            let d = js_divergence(views[a], views[b])?;
            pair[a][b] = d;
            pair[b][a] = d;
        }
    }
    let neg: Vec<f64> = (0..3).map(|s| -(pair[s].iter().sum::<f64>())).collect();
    let w = softmax(&neg);
    Ok([w[0], w[1], w[2]])
}

/// `Σ w_i v_i`, accumulated in order from zero.
fn weighted_sum<'a>(weights: &[f64], vectors: impl IntoIterator<Item = &'a [f64]>, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for (w, v) in weights.iter().zip(vectors) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
    out
}

fn check_updates(updates: &[ClientUpdate]) -> Result<(usize, usize)> {
    let Some(first) = updates.first() else {
        return Err(Error::Argument("no client updates".into()));
    };
    let classes = first.classifier.num_classes();
    let dim = first.prototypes.dim();
    for u in updates {
        if !u.classifier.same_shape(&first.classifier) {
            return Err(Error::Argument(format!(
                "client {}: classifier shape mismatch",
                u.client_id
            )));
        }
        if u.prototypes.dim() != dim {
            return Err(Error::dim("prototype", dim, u.prototypes.dim()));
        }
        if u.per_class_counts.len() != classes {
            return Err(Error::dim("per-class counts", classes, u.per_class_counts.len()));
        }
        for k in u.prototypes.classes() {
            if k >= classes || u.per_class_counts[k] == 0 {
                return Err(Error::Argument(format!(
                    "client {}: prototype for class {k} without samples",
                    u.client_id
                )));
            }
        }
    }
    Ok((classes, dim))
}

/// Fuses the clients' prototypes class by class. Classes held by no client
/// are absent from the result. Without a reference classifier the
/// prediction view is replaced by the sample view.
pub fn aggregate_prototypes(
    updates: &[ClientUpdate],
    reference: Option<&Classifier>,
) -> Result<(PrototypeSet, BTreeMap<usize, AggregationWeights>)> {
    let (classes, dim) = check_updates(updates)?;
    let mut out = PrototypeSet::new(dim);
    let mut weights = BTreeMap::new();
    for k in 0..classes {
        let holders: Vec<&ClientUpdate> = updates.iter().filter(|u| u.prototypes.contains(k)).collect();
        if holders.is_empty() {
            continue;
        }
        let protos: Vec<&[f64]> = holders.iter().map(|u| u.prototypes.get(k).expect("holder")).collect();
        let counts: Vec<usize> = holders.iter().map(|u| u.per_class_counts[k]).collect();
        let sample = sample_weights(&counts)?;
        let centroid = centroid_weights(&protos)?;
        let prediction = match reference {
            Some(phi) => prediction_weights(&protos, k, phi)?,
            None => sample.clone(),
        };
        let view_weights = mps_view_weights(&sample, &centroid, &prediction)?;
        let combined: Vec<f64> = (0..holders.len())
            .map(|i| view_weights[0] * sample[i] + view_weights[1] * centroid[i] + view_weights[2] * prediction[i])
            .collect();
        out.insert(k, weighted_sum(&combined, protos.iter().copied(), dim))?;
        weights.insert(
            k,
            AggregationWeights {
                clients: holders.iter().map(|u| u.client_id).collect(),
                sample,
                centroid,
                prediction,
                view_weights,
                combined,
            },
        );
    }
    Ok((out, weights))
}

fn neuron_vec(phi: &Classifier, k: usize) -> Vec<f64> {
    let (w, b) = phi.neuron(k);
    let mut v = w.to_vec();
    v.push(b);
    v
}

/// Each class neuron (weight row and bias) becomes the sample-weighted mean
/// over the clients holding that class; other neurons keep `previous`.
pub fn aggregate_classifier_classwise(updates: &[ClientUpdate], previous: &Classifier) -> Result<Classifier> {
    let (classes, _) = check_updates(updates)?;
    if !updates[0].classifier.same_shape(previous) {
        return Err(Error::Argument("previous classifier shape mismatch".into()));
    }
    let width = previous.feature_dim() + 1;
    let mut out = previous.clone();
    for k in 0..classes {
        let holders: Vec<&ClientUpdate> = updates.iter().filter(|u| u.per_class_counts[k] > 0).collect();
        if holders.is_empty() {
            continue;
        }
        let counts: Vec<usize> = holders.iter().map(|u| u.per_class_counts[k]).collect();
        let alpha = sample_weights(&counts)?;
        let neurons: Vec<Vec<f64>> = holders.iter().map(|u| neuron_vec(&u.classifier, k)).collect();
        let v = weighted_sum(&alpha, neurons.iter().map(Vec::as_slice), width);
        out.set_neuron(k, &v[..width - 1], v[width - 1]);
    }
    Ok(out)
}

/// Whole-classifier sample-weighted averaging with the same per-neuron
/// summation order as [`aggregate_classifier_classwise`].
pub fn aggregate_classifier_fedavg(updates: &[ClientUpdate]) -> Result<Classifier> {
    let (classes, _) = check_updates(updates)?;
    let counts: Vec<usize> = updates.iter().map(|u| u.total_count).collect();
    let alpha = sample_weights(&counts)?;
    let width = updates[0].classifier.feature_dim() + 1;
    let mut out = updates[0].classifier.clone();
    for k in 0..classes {
        let neurons: Vec<Vec<f64>> = updates.iter().map(|u| neuron_vec(&u.classifier, k)).collect();
        let v = weighted_sum(&alpha, neurons.iter().map(Vec::as_slice), width);
        out.set_neuron(k, &v[..width - 1], v[width - 1]);
    }
    Ok(out)
}

/// `steps` gradient steps of mean cross-entropy on `{(P_k, k)}`.
pub fn finetune_classifier(phi: &Classifier, prototypes: &PrototypeSet, lr: f64, steps: usize) -> Result<Classifier> {
    let mut out = phi.clone();
    if lr == 0.0 || steps == 0 || prototypes.is_empty() {
        return Ok(out);
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("fine-tune learning rate {lr}")));
    }
    if prototypes.dim() != phi.feature_dim() {
        return Err(Error::dim("prototype", phi.feature_dim(), prototypes.dim()));
    }
    let pairs: Vec<(&[f64], usize)> = prototypes.iter().map(|(k, p)| (p, k)).collect();
    if let Some(&(_, k)) = pairs.iter().find(|(_, k)| *k >= phi.num_classes()) {
        return Err(Error::Argument(format!("prototype class {k} out of range")));
    }
    for _ in 0..steps {
        let head = losses::head_objective(&out, &pairs, &LossSpec::CrossEntropy, false)?;
        out.dense_mut().axpy(-lr, &head.classifier);
    }
    if !out.dense().is_finite() {
        return Err(Error::Numerical("non-finite classifier after fine-tuning".into()));
    }
    Ok(out)
}

/// Sample-weighted average of the uploaded extractors, `None` when no update
/// carries one.
pub fn aggregate_extractors(updates: &[ClientUpdate]) -> Result<Option<Extractor>> {
    let carriers: Vec<(&Extractor, usize)> = updates
        .iter()
        .filter_map(|u| u.extractor.as_ref().map(|e| (e, u.total_count)))
        .collect();
    if carriers.is_empty() {
        return Ok(None);
    }
    let exs: Vec<&Extractor> = carriers.iter().map(|c| c.0).collect();
    let counts: Vec<usize> = carriers.iter().map(|c| c.1).collect();
    average_extractors(&exs, &counts).map(Some)
}

/// Parameterwise `Σ α_i θ_i` with `α` the normalized counts.
pub fn average_extractors(extractors: &[&Extractor], counts: &[usize]) -> Result<Extractor> {
    if extractors.len() != counts.len() {
        return Err(Error::dim("extractor weights", extractors.len(), counts.len()));
    }
    let alpha = sample_weights(counts)?;
    let first = extractors[0];
    if extractors.iter().any(|e| !e.same_shape(first)) {
        return Err(Error::Argument("extractor shape mismatch".into()));
    }
    let mut layers = Vec::with_capacity(first.layers().len());
    for (li, l0) in first.layers().iter().enumerate() {
        let mut acc = Dense::zeros(l0.in_dim(), l0.out_dim());
        for (a, e) in alpha.iter().zip(extractors) {
            acc.axpy(*a, &e.layers()[li]);
        }
        layers.push(acc);
    }
    Extractor::new(layers)
}

/// Sample-weighted average of whole models.
pub fn average_models(models: &[&ModelParams], counts: &[usize]) -> Result<ModelParams> {
    if models.is_empty() {
        return Err(Error::Argument("no models to average".into()));
    }
    let exs: Vec<&Extractor> = models.iter().map(|m| &m.extractor).collect();
    let extractor = average_extractors(&exs, counts)?;
    let alpha = sample_weights(counts)?;
    let c0 = models[0].classifier.dense();
    if models.iter().any(|m| !m.classifier.dense().same_shape(c0)) {
        return Err(Error::Argument("classifier shape mismatch".into()));
    }
    let mut acc = Dense::zeros(c0.in_dim(), c0.out_dim());
    for (a, m) in alpha.iter().zip(models) {
        acc.axpy(*a, m.classifier.dense());
    }
    ModelParams::new(extractor, Classifier::new(acc))
}

/// Extractor upload schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CftSchedule {
    pub q: f64,
    pub x: f64,
    pub skip_stride: usize,
    pub rounds: usize,
}

impl CftSchedule {
    pub fn new(par_extractor: usize, par_prototypes: usize, x: f64, rounds: usize) -> Result<Self> {
        if par_prototypes == 0 {
            return Err(Error::Config("prototype payload size is zero".into()));
        }
        if !(x > 0.0 && x.is_finite()) {
            return Err(Error::Config(format!("transmission multiplier {x} must be positive")));
        }
        let q = par_extractor as f64 / par_prototypes as f64;
        let stride = (x * q).ceil();
        if stride < 2.0 {
            return Err(Error::Config(format!(
                "skip stride {stride} < 2: extractor ({par_extractor}) is too small relative to prototypes ({par_prototypes})"
            )));
        }
        Ok(Self {
            q,
            x,
            skip_stride: stride as usize,
            rounds,
        })
    }

    /// Whether round index `t` (1-based) carries an extractor upload.
    pub fn uploads_at(&self, t: usize) -> bool {
        t >= 1 && !t.is_multiple_of(self.skip_stride)
    }

    pub fn upload_rounds(&self) -> Vec<usize> {
        (1..=self.rounds).filter(|&t| self.uploads_at(t)).collect()
    }
}

/// `cft_schedule(Par(θ), Par(P), x, T)`.
pub fn cft_schedule(par_extractor: usize, par_prototypes: usize, x: f64, rounds: usize) -> Result<CftSchedule> {
    CftSchedule::new(par_extractor, par_prototypes, x, rounds)
}

/// Fine-tuning hyperparameters of the server.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ServerConfig {
    pub finetune_lr: f64,
    pub finetune_steps: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            finetune_lr: 0.01,
            finetune_steps: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalState {
    pub extractor: Extractor,
    pub classifier: Classifier,
    pub prototypes: Option<PrototypeSet>,
    pub round: usize,
    /// Whether the extractor was re-aggregated in the last server round.
    pub extractor_fresh: bool,
}

impl GlobalState {
    pub fn new(model: &ModelParams) -> Self {
        Self {
            extractor: model.extractor.clone(),
            classifier: model.classifier.clone(),
            prototypes: None,
            round: 0,
            extractor_fresh: false,
        }
    }

    /// Classifier used by the prediction view; none before the first
    /// aggregation.
    pub fn beta_reference(&self) -> Option<&Classifier> {
        (self.round > 0).then_some(&self.classifier)
    }

    /// Message for the current round. The extractor is attached at round 0
    /// and after rounds that re-aggregated it.
    pub fn broadcast(&self) -> Broadcast {
        Broadcast {
            round: self.round,
            global_classifier: self.classifier.clone(),
            global_prototypes: self.prototypes.clone(),
            global_extractor: (self.round == 0 || self.extractor_fresh).then(|| self.extractor.clone()),
        }
    }

    /// Aggregates one round of updates (sorted by client id) into the next
    /// state.
    pub fn server_round(&self, updates: &[ClientUpdate], cfg: &ServerConfig) -> Result<GlobalState> {
        if updates.is_empty() {
            log::warn!("round {}: no client updates, state carried forward", self.round);
            return Ok(GlobalState {
                round: self.round + 1,
                extractor_fresh: false,
                ..self.clone()
            });
        }
        let (mut prototypes, _) = aggregate_prototypes(updates, self.beta_reference())?;
        if let Some(old) = &self.prototypes {
            prototypes.fill_missing_from(old);
        }
        let classifier = aggregate_classifier_classwise(updates, &self.classifier)?;
        let classifier = finetune_classifier(&classifier, &prototypes, cfg.finetune_lr, cfg.finetune_steps)?;
        let fresh = aggregate_extractors(updates)?;
        Ok(GlobalState {
            extractor_fresh: fresh.is_some(),
            extractor: fresh.unwrap_or_else(|| self.extractor.clone()),
            classifier,
            prototypes: Some(prototypes),
            round: self.round + 1,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::cross_entropy;
    use crate::nn::ParamCount;
    use crate::rng::rng_from_seed;
    use proptest::prelude::*;
    use rand::Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    fn update(id: usize, phi: Classifier, protos: PrototypeSet, counts: Vec<usize>) -> ClientUpdate {
        ClientUpdate {
            client_id: id,
            classifier: phi,
            prototypes: protos,
            total_count: counts.iter().sum(),
            per_class_counts: counts,
            extractor: None,
        }
    }

    fn random_update<R: Rng>(id: usize, classes: usize, dim: usize, rng: &mut R) -> ClientUpdate {
        let phi = Classifier::init(dim, classes, rng);
        let mut p = PrototypeSet::new(dim);
        let mut counts = vec![0; classes];
        for (k, n) in counts.iter_mut().enumerate() {
            if rng.random_bool(0.7) {
                *n = rng.random_range(1..50);
                p.insert(k, (0..dim).map(|_| rng.random_range(0.0..3.0)).collect())
                    .unwrap();
            }
        }
        update(id, phi, p, counts)
    }

    #[test]
    fn sample_weight_examples() {
        assert_eq!(sample_weights(&[5]).unwrap(), vec![1.0]);
        assert_eq!(sample_weights(&[3, 1]).unwrap(), vec![0.75, 0.25]);
        assert!(sample_weights(&[]).is_err());
        assert!(sample_weights(&[2, 0]).is_err());
    }

    #[test]
    fn centroid_weight_examples() {
        let a = [1.0, 2.0];
        assert!(close(&centroid_weights(&[&a, &a, &a]).unwrap(), &[1.0 / 3.0; 3], 1e-15));
        let w = centroid_weights(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        assert!(close(&w, &[0.5, 0.5], 1e-15));
        // zero-norm prototype scores 0.5 before normalization
        let w = centroid_weights(&[&[0.0, 0.0], &[1.0, 0.0]]).unwrap();
        assert!(close(&w, &[0.5 / 1.5, 1.0 / 1.5], 1e-15));

        let mut rng = rng_from_seed(3);
        let ps: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let refs: Vec<&[f64]> = ps.iter().map(Vec::as_slice).collect();
        let got = centroid_weights(&refs).unwrap();
        let an: Vec<f64> = (0..4).map(|j| (ps[0][j] + ps[1][j] + ps[2][j]) / 3.0).collect();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let raw: Vec<f64> = ps
            .iter()
            .map(|p| {
                let c = p.iter().zip(&an).map(|(a, b)| a * b).sum::<f64>() / (norm(p) * norm(&an));
                (1.0 + c) / 2.0
            })
            .collect();
        let s: f64 = raw.iter().sum();
        assert!(close(&got, &raw.iter().map(|r| r / s).collect::<Vec<_>>(), 1e-12));
    }

    #[test]
    fn prediction_weight_examples() {
        let mut rng = rng_from_seed(4);
        let phi = Classifier::init(3, 4, &mut rng);
        assert_eq!(prediction_weights(&[&[1.0, 2.0, 3.0]], 2, &phi).unwrap(), vec![1.0]);
        let p = [0.3, 0.1, 0.9];
        assert!(close(
            &prediction_weights(&[&p, &p], 1, &phi).unwrap(),
            &[0.5, 0.5],
            1e-15
        ));

        let ps: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..3).map(|_| rng.random_range(0.0..2.0)).collect())
            .collect();
        let refs: Vec<&[f64]> = ps.iter().map(Vec::as_slice).collect();
        let got = prediction_weights(&refs, 3, &phi).unwrap();
        let raw: Vec<f64> = ps
            .iter()
            .map(|p| {
                let z: Vec<f64> = (0..4)
                    .map(|k| {
                        let (w, b) = phi.neuron(k);
                        w.iter().zip(p).map(|(a, x)| a * x).sum::<f64>() + b
                    })
                    .collect();
                let den: f64 = z.iter().map(|v| v.exp()).sum();
                z[3].exp() / den
            })
            .collect();
        let s: f64 = raw.iter().sum();
        assert!(close(&got, &raw.iter().map(|r| r / s).collect::<Vec<_>>(), 1e-12));
    }

    #[test]
    fn js_examples() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(js_divergence(&p, &p).unwrap(), 0.0);
        let v = js_divergence(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        // 0.5*(0.5 ln(0.5/0.75) + 0.5 ln(0.5/0.25)) + 0.5*(ln(1/0.75))
        let oracle = 0.5 * (0.5 * (0.5f64 / 0.75).ln() + 0.5 * 2f64.ln()) + 0.5 * (1.0f64 / 0.75).ln();
        assert!((v - oracle).abs() < 1e-15);
        assert!((v - 0.215762).abs() < 1e-6);
        assert!(js_divergence(&[1.2, -0.2], &[0.5, 0.5]).is_err());
        assert!(js_divergence(&[0.5, 0.5], &[0.3, 0.3, 0.4]).is_err());
    }

    #[test]
    fn view_weight_examples() {
        let a = [0.2, 0.8];
        let w = mps_view_weights(&a, &a, &a).unwrap();
        assert!(close(&w, &[1.0 / 3.0; 3], 1e-15));
        let w = mps_view_weights(&[1.0], &[1.0], &[1.0]).unwrap();
        assert!(close(&w, &[1.0 / 3.0; 3], 1e-15));

        let w = mps_view_weights(&[1.0, 0.0], &[0.5, 0.5], &[0.5, 0.5]).unwrap();
        let j = js_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        let e = [(-2.0 * j).exp(), (-j).exp(), (-j).exp()];
        let s: f64 = e.iter().sum();
        assert!(close(&w, &[e[0] / s, e[1] / s, e[2] / s], 1e-15));
        assert!(w[0] < w[1] && w[1] == w[2]);
    }

    #[test]
    fn aggregate_single_holder_is_exact() {
        let mut rng = rng_from_seed(9);
        let phi = Classifier::init(3, 2, &mut rng);
        let mut p = PrototypeSet::new(3);
        p.insert(1, vec![0.1, 0.7, 0.3]).unwrap();
        let mut q = PrototypeSet::new(3);
        q.insert(0, vec![1.0, 1.0, 1.0]).unwrap();
        let ups = [
            update(0, phi.clone(), p.clone(), vec![0, 4]),
            update(1, phi.clone(), q, vec![2, 0]),
        ];
        let (g, w) = aggregate_prototypes(&ups, Some(&phi)).unwrap();
        assert_eq!(g.get(1).unwrap(), p.get(1).unwrap());
        assert_eq!(w[&1].clients, vec![0]);
        assert_eq!(w[&1].combined, vec![1.0]);
    }

    #[test]
    fn agreeing_views_give_sample_weighted_mean() {
        let mut rng = rng_from_seed(10);
        let phi = Classifier::init(2, 1, &mut rng);
        let mk = |v: Vec<f64>| {
            let mut p = PrototypeSet::new(2);
            p.insert(0, v).unwrap();
            p
        };
        // identical direction => uniform centroid view; counts equal => uniform sample view;
        // no reference => prediction view equals sample view
        let ups = [
            update(0, phi.clone(), mk(vec![1.0, 1.0]), vec![5]),
            update(1, phi.clone(), mk(vec![2.0, 2.0]), vec![5]),
        ];
        let (g, w) = aggregate_prototypes(&ups, None).unwrap();
        assert!(close(&w[&0].combined, &w[&0].sample, 1e-15));
        assert!(close(g.get(0).unwrap(), &[1.5, 1.5], 1e-15));
    }

    #[test]
    fn classwise_examples() {
        let mut rng = rng_from_seed(12);
        let a = Classifier::init(2, 2, &mut rng);
        let b = Classifier::init(2, 2, &mut rng);
        let prev = Classifier::init(2, 2, &mut rng);
        let p = PrototypeSet::new(2);
        let ups = [
            update(0, a.clone(), p.clone(), vec![4, 0]),
            update(1, b.clone(), p, vec![6, 0]),
        ];
        let out = aggregate_classifier_classwise(&ups, &prev).unwrap();
        let (wa, ba) = a.neuron(0);
        let (wb, bb) = b.neuron(0);
        let (wo, bo) = out.neuron(0);
        assert!(close(
            wo,
            &[0.4 * wa[0] + 0.6 * wb[0], 0.4 * wa[1] + 0.6 * wb[1]],
            1e-15
        ));
        assert!((bo - (0.4 * ba + 0.6 * bb)).abs() < 1e-15);
        assert_eq!(out.neuron(1), prev.neuron(1));
    }

    #[test]
    fn finetune_examples() {
        let mut rng = rng_from_seed(13);
        let phi = Classifier::init(2, 2, &mut rng);
        let mut p = PrototypeSet::new(2);
        p.insert(0, vec![1.0, 0.0]).unwrap();
        p.insert(1, vec![0.0, 1.0]).unwrap();
        assert_eq!(finetune_classifier(&phi, &p, 0.0, 5).unwrap(), phi);
        assert_eq!(finetune_classifier(&phi, &p, 0.1, 0).unwrap(), phi);

        // hand-derived softmax regression step
        let eta = 0.3;
        let got = finetune_classifier(&phi, &p, eta, 1).unwrap();
        let mut expect = phi.dense().clone();
        for (k, proto) in [(0usize, [1.0, 0.0]), (1, [0.0, 1.0])] {
            let z: Vec<f64> = (0..2)
                .map(|c| {
                    let (w, b) = phi.neuron(c);
                    w[0] * proto[0] + w[1] * proto[1] + b
                })
                .collect();
            let den = z[0].exp() + z[1].exp();
            for (c, zc) in z.iter().enumerate() {
                let g = (zc.exp() / den - if c == k { 1.0 } else { 0.0 }) / 2.0;
                expect.weights_mut()[c * 2] -= eta * g * proto[0];
                expect.weights_mut()[c * 2 + 1] -= eta * g * proto[1];
                expect.bias_mut()[c] -= eta * g;
            }
        }
        assert!(got.dense().max_abs_diff(&expect) < 1e-14);

        let perfect = Classifier::new(Dense::from_parts(2, 2, vec![60.0, -60.0, -60.0, 60.0], vec![0.0, 0.0]).unwrap());
        let loss: f64 = p
            .iter()
            .map(|(k, v)| cross_entropy(&perfect.logits(v).unwrap(), k))
            .sum();
        assert!(loss < 1e-12);
        let tuned = finetune_classifier(&perfect, &p, 0.01, 5).unwrap();
        assert!(tuned.dense().max_abs_diff(perfect.dense()) < 1e-10);
    }

    #[test]
    fn extractor_average_examples() {
        let mut rng = rng_from_seed(14);
        let exs: Vec<Extractor> = (0..3).map(|_| Extractor::init(3, &[4], 2, &mut rng)).collect();
        let mk = |i: usize, n: usize| ClientUpdate {
            extractor: Some(exs[i].clone()),
            ..update(
                i,
                Classifier::init(2, 2, &mut rng_from_seed(0)),
                PrototypeSet::new(2),
                vec![n, 0],
            )
        };
        assert_eq!(aggregate_extractors(&[mk(0, 3)]).unwrap().unwrap(), exs[0]);
        let got = aggregate_extractors(&[mk(0, 1), mk(1, 2), mk(2, 7)]).unwrap().unwrap();
        for (li, l) in got.layers().iter().enumerate() {
            for (j, v) in l.weights().iter().enumerate() {
                let o = 0.1 * exs[0].layers()[li].weights()[j]
                    + 0.2 * exs[1].layers()[li].weights()[j]
                    + 0.7 * exs[2].layers()[li].weights()[j];
                assert!((v - o).abs() < 1e-15);
            }
        }
        let eq = aggregate_extractors(&[mk(0, 5), mk(1, 5)]).unwrap().unwrap();
        let w0 = eq.layers()[0].weights()[0];
        assert!((w0 - 0.5 * (exs[0].layers()[0].weights()[0] + exs[1].layers()[0].weights()[0])).abs() < 1e-15);
        let none = update(0, Classifier::init(2, 2, &mut rng), PrototypeSet::new(2), vec![1, 0]);
        assert!(aggregate_extractors(&[none]).unwrap().is_none());
    }

    #[test]
    fn cft_examples() {
        let s = cft_schedule(9000, 900, 1.0, 30).unwrap();
        assert_eq!(s.q, 10.0);
        assert_eq!(s.skip_stride, 10);
        let skipped: Vec<usize> = (1..=30).filter(|&t| !s.uploads_at(t)).collect();
        assert_eq!(skipped, vec![10, 20, 30]);
        let s2 = cft_schedule(9000, 900, 2.0, 30).unwrap();
        assert_eq!((1..=30).filter(|&t| !s2.uploads_at(t)).collect::<Vec<_>>(), vec![20]);

        let s = cft_schedule(9000, 900, 1.0, 100).unwrap();
        let total = s.upload_rounds().len() * 9000 + 100 * 900;
        assert_eq!(s.upload_rounds().len(), 90);
        assert_eq!(total, 100 * 9000);

        assert!(matches!(cft_schedule(900, 900, 1.0, 10), Err(Error::Config(_))));
        assert!(cft_schedule(10, 0, 1.0, 10).is_err());
    }

    #[test]
    fn bootstrap_broadcast_and_fixed_point() {
        let mut rng = rng_from_seed(20);
        let model = ModelParams::init(
            &crate::nn::Architecture {
                input_dim: 3,
                hidden: vec![4],
                feature_dim: 2,
                num_classes: 2,
            },
            &mut rng,
        );
        let g = GlobalState::new(&model);
        let b = g.broadcast();
        assert_eq!(b.global_extractor.as_ref(), Some(&model.extractor));
        assert!(b.global_prototypes.is_none());
        assert_eq!(b.payload().extractor, model.extractor.param_count());

        let mut p = PrototypeSet::new(2);
        p.insert(0, vec![0.5, 0.1]).unwrap();
        p.insert(1, vec![0.2, 0.9]).unwrap();
        let u = ClientUpdate {
            extractor: Some(model.extractor.clone()),
            ..update(0, model.classifier.clone(), p.clone(), vec![3, 4])
        };
        let ups = [
            u.clone(),
            ClientUpdate {
                client_id: 1,
                ..u.clone()
            },
            ClientUpdate { client_id: 2, ..u },
        ];
        let cfg = ServerConfig {
            finetune_lr: 0.0,
            finetune_steps: 0,
        };
        let next = g.server_round(&ups, &cfg).unwrap();
        for (a, b) in next.extractor.layers().iter().zip(model.extractor.layers()) {
            assert!(a.max_abs_diff(b) < 1e-15);
        }
        assert!(next.classifier.dense().max_abs_diff(model.classifier.dense()) < 1e-15);
        for (k, v) in p.iter() {
            assert!(close(next.prototypes.as_ref().unwrap().get(k).unwrap(), v, 1e-15));
        }
        assert!(next.broadcast().global_extractor.is_some());

        let idle = next.server_round(&[], &cfg).unwrap();
        assert_eq!(idle.round, 2);
        assert!(idle.broadcast().global_extractor.is_none());
        assert_eq!(idle.classifier, next.classifier);
        assert_eq!(idle.extractor, next.extractor);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn weights_convex_and_hull_bound(seed in any::<u64>(), n in 1usize..6) {
            let mut rng = rng_from_seed(seed);
            let ups: Vec<ClientUpdate> = (0..n).map(|i| random_update(i, 4, 3, &mut rng)).collect();
            let phi = Classifier::init(3, 4, &mut rng);
            let (g, ws) = aggregate_prototypes(&ups, Some(&phi)).unwrap();
            for (k, w) in &ws {
                for v in [&w.sample, &w.centroid, &w.prediction, &w.combined] {
                    prop_assert!(v.iter().all(|&x| x >= 0.0));
                    prop_assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
                prop_assert!((w.view_weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                let pk = g.get(*k).unwrap();
                for (j, &v) in pk.iter().enumerate() {
                    let vals: Vec<f64> = w.clients.iter().map(|&c| ups[c].prototypes.get(*k).unwrap()[j]).collect();
                    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                }
            }
            let held: Vec<usize> = (0..4).filter(|&k| ups.iter().any(|u| u.prototypes.contains(k))).collect();
            prop_assert_eq!(g.classes().collect::<Vec<_>>(), held);
        }

        #[test]
        fn count_scaling_leaves_weights_unchanged(seed in any::<u64>(), n in 1usize..6, scale in 1usize..1000) {
            let mut rng = rng_from_seed(seed);
            let ups: Vec<ClientUpdate> = (0..n).map(|i| random_update(i, 4, 3, &mut rng)).collect();
            let scaled: Vec<ClientUpdate> = ups
                .iter()
                .map(|u| {
                    let counts: Vec<usize> = u.per_class_counts.iter().map(|c| c * scale).collect();
                    update(u.client_id, u.classifier.clone(), u.prototypes.clone(), counts)
                })
                .collect();
            let phi = Classifier::init(3, 4, &mut rng);
            let (g1, w1) = aggregate_prototypes(&ups, Some(&phi)).unwrap();
            let (g2, w2) = aggregate_prototypes(&scaled, Some(&phi)).unwrap();
            prop_assert_eq!(w1, w2);
            prop_assert_eq!(g1, g2);
        }

        #[test]
        fn js_bounded_and_symmetric(a in prop::collection::vec(0.0f64..1.0, 1..8), seed in any::<u64>()) {
            let mut rng = rng_from_seed(seed);
            let b: Vec<f64> = a.iter().map(|_| rng.random_range(0.0..1.0)).collect();
            let sa: f64 = a.iter().sum();
            let sb: f64 = b.iter().sum();
            prop_assume!(sa > 1e-6 && sb > 1e-6);
            let p: Vec<f64> = a.iter().map(|v| v / sa).collect();
            let q: Vec<f64> = b.iter().map(|v| v / sb).collect();
            let pq = js_divergence(&p, &q).unwrap();
            let qp = js_divergence(&q, &p).unwrap();
            prop_assert!((0.0..=std::f64::consts::LN_2 + 1e-12).contains(&pq));
            prop_assert!((pq - qp).abs() < 1e-15);
        }
    }
}
