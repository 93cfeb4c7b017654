//! Client side of a round.
//!
//! A round on client `i`:
//!
//! 1. adopt the global extractor if the broadcast carries one (the local
//!    classifier is never overwritten);
//! 2. compute local prototypes `P_i^t`;
//! 3. for each local epoch, train the classifier with the extractor frozen,
//!    then the extractor with the classifier frozen (only once global
//!    prototypes exist);
//! 4. recompute prototypes `P_i^{t+1}` and assemble the upload.

use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, Sample};
use crate::error::{Error, Result};
use crate::losses::{
    self, disc_cl_loss_grad, disc_pr_loss_grad, CcfContext, Discriminator, DiscriminatorRole, LossSpec,
};
use crate::nn::{compute_gradients, sgd_step_in_place, Classifier, Extractor, ModelParams, ParamCount, ParamMask};
use crate::prototype::PrototypeSet;
use crate::rng::{child_rng, SimRng, Stream};

/// Scalar parameter counts of one transmission, split by payload kind.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PayloadCounts {
    pub extractor: usize,
    pub classifier: usize,
    pub prototypes: usize,
}

impl PayloadCounts {
    pub fn total(&self) -> usize {
        self.extractor + self.classifier + self.prototypes
    }
}

impl std::ops::AddAssign for PayloadCounts {
    fn add_assign(&mut self, o: Self) {
        self.extractor += o.extractor;
        self.classifier += o.classifier;
        self.prototypes += o.prototypes;
    }
}

/// Server-to-client message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Broadcast {
    pub round: usize,
    pub global_classifier: Classifier,
    pub global_prototypes: Option<PrototypeSet>,
    pub global_extractor: Option<Extractor>,
}

impl Broadcast {
    pub fn payload(&self) -> PayloadCounts {
        PayloadCounts {
            extractor: self.global_extractor.as_ref().map_or(0, ParamCount::param_count),
            classifier: self.global_classifier.param_count(),
            prototypes: self.global_prototypes.as_ref().map_or(0, PrototypeSet::param_count),
        }
    }
}

/// Client-to-server message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub classifier: Classifier,
    pub prototypes: PrototypeSet,
    pub total_count: usize,
    pub per_class_counts: Vec<usize>,
    pub extractor: Option<Extractor>,
}

impl ClientUpdate {
    pub fn payload(&self) -> PayloadCounts {
        PayloadCounts {
            extractor: self.extractor.as_ref().map_or(0, ParamCount::param_count),
            classifier: self.classifier.param_count(),
            prototypes: self.prototypes.param_count(),
        }
    }
}

/// Hyperparameters of local training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda_c: f64,
    pub lambda_e: f64,
    /// Round at which the adversarial weight reaches zero.
    pub max_round: usize,
}

impl Default for LocalConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 32,
            lr: 0.05,
            lambda_c: 0.6,
            lambda_e: 0.8,
            max_round: 100,
        }
    }
}

/// Globals and local prototypes visible to the training phases of a round.
#[derive(Debug, Clone, Copy)]
pub struct RoundContext<'a> {
    pub round: usize,
    pub max_round: usize,
    pub lambda_c: f64,
    pub lambda_e: f64,
    pub global_classifier: &'a Classifier,
    pub global_prototypes: Option<&'a PrototypeSet>,
    pub local_prototypes: &'a PrototypeSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PhaseKind {
    Classifier,
    Extractor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub epoch: usize,
    pub kind: PhaseKind,
}

/// Diagnostics of a local round (not transmitted).
#[derive(Debug, Clone, PartialEq)]
pub struct LocalStats {
    /// Mean training cross-entropy after adopting the broadcast.
    pub loss_before: f64,
    /// Mean training cross-entropy at the end of the round.
    pub loss_after: f64,
    /// Executed phases in execution order.
    pub phases: Vec<PhaseRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub id: usize,
    pub model: ModelParams,
    pub disc_pr: Discriminator,
    pub disc_cl: Discriminator,
    pub train_data: Arc<LabeledDataset>,
    pub rng_seed: u64,
}

/// Features of every sample in order.
fn all_features(extractor: &Extractor, samples: &[Sample]) -> Result<Vec<Vec<f64>>> {
    samples.iter().map(|s| extractor.forward(&s.x)).collect()
}

fn prototypes_from_features(feats: &[Vec<f64>], samples: &[Sample], dim: usize) -> PrototypeSet {
    let mut sums: std::collections::BTreeMap<usize, (Vec<f64>, usize)> = Default::default();
    for (h, s) in feats.iter().zip(samples) {
        let e = sums.entry(s.y).or_insert_with(|| (vec![0.0; dim], 0));
        for (a, b) in e.0.iter_mut().zip(h) {
            *a += b;
        }
        e.1 += 1;
    }
    let mut out = PrototypeSet::new(dim);
    for (k, (sum, n)) in sums {
        let mean = sum.into_iter().map(|v| v / n as f64).collect();
        out.insert(k, mean).expect("prototype has extractor output dim");
    }
    out
}

fn mean_ce_from_features(classifier: &Classifier, feats: &[Vec<f64>], samples: &[Sample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let total: f64 = feats
        .iter()
        .zip(samples)
        .map(|(h, s)| losses::cross_entropy(&classifier.logits_unchecked(h), s.y))
        .sum();
    total / samples.len() as f64
}

/// Per-class mean feature of `data` under `extractor`; classes without
/// samples are absent.
pub fn compute_prototypes(extractor: &Extractor, data: &LabeledDataset) -> Result<PrototypeSet> {
    let feats = all_features(extractor, data.samples())?;
    Ok(prototypes_from_features(&feats, data.samples(), extractor.output_dim()))
}

/// Mini-batch SGD on plain cross-entropy over the masked blocks.
pub fn sgd_epochs(
    model: &mut ModelParams,
    data: &LabeledDataset,
    mask: ParamMask,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    rng: &mut SimRng,
) -> Result<()> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks(batch_size.max(1)) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data.samples()[i]).collect();
            let (_, g) = compute_gradients(model, &batch, &LossSpec::CrossEntropy, mask)?;
            sgd_step_in_place(model, &g, lr, mask)?;
        }
    }
    Ok(())
}

impl ClientState {
    pub fn new(id: usize, model: ModelParams, train_data: Arc<LabeledDataset>, rng_seed: u64) -> Self {
        let c = model.classifier.num_classes();
        let mut rng = child_rng(rng_seed, Stream::Discriminator, id as u64, 0);
        let disc_pr = Discriminator::new(c, DiscriminatorRole::Prototype, &mut rng);
        let disc_cl = Discriminator::new(c, DiscriminatorRole::Classification, &mut rng);
        Self {
            id,
            model,
            disc_pr,
            disc_cl,
            train_data,
            rng_seed,
        }
    }

    /// Overwrites the local extractor when the broadcast carries one.
    pub fn adopt_broadcast(&mut self, b: &Broadcast) -> Result<()> {
        if !b.global_classifier.same_shape(&self.model.classifier) {
            return Err(Error::Config(
                "broadcast classifier shape does not match client model".into(),
            ));
        }
        if let Some(ex) = &b.global_extractor {
            if !ex.same_shape(&self.model.extractor) {
                return Err(Error::Config(
                    "broadcast extractor shape does not match client model".into(),
                ));
            }
            self.model.extractor = ex.clone();
        }
        Ok(())
    }

    /// Classifier training with the extractor frozen. Each mini-batch runs one
    /// step on each discriminator and then one classifier step; the
    /// discriminators and the fusion term are skipped until global prototypes
    /// exist.
    pub fn train_classifier_phase(
        &mut self,
        ctx: &RoundContext<'_>,
        epochs: usize,
        batch_size: usize,
        lr: f64,
        rng: &mut SimRng,
    ) -> Result<()> {
        let samples = self.train_data.samples();
        let feats = all_features(&self.model.extractor, samples)?;
        let mut order: Vec<usize> = (0..samples.len()).collect();
        for _ in 0..epochs {
            order.shuffle(rng);
            for chunk in order.chunks(batch_size.max(1)) {
                if let Some(gp) = ctx.global_prototypes {
                    let (_, g) = disc_pr_loss_grad(&self.disc_pr, &self.model.classifier, gp, ctx.local_prototypes);
                    self.disc_pr.apply(&g, lr)?;
                    let (_, g) = disc_cl_loss_grad(&self.disc_cl, &self.model.classifier, ctx.global_classifier, gp);
                    self.disc_cl.apply(&g, lr)?;
                }
                let ccf = ctx.global_prototypes.map(|gp| CcfContext {
                    local_prototypes: ctx.local_prototypes,
                    global_prototypes: gp,
                    disc_pr: &self.disc_pr,
                    disc_cl: &self.disc_cl,
                    round: ctx.round,
                    max_round: ctx.max_round,
                });
                let spec = LossSpec::ClassifierPhase {
                    lambda_c: ctx.lambda_c,
                    ccf,
                };
                let pairs: Vec<(&[f64], usize)> = chunk.iter().map(|&i| (feats[i].as_slice(), samples[i].y)).collect();
                let head = losses::head_objective(&self.model.classifier, &pairs, &spec, false)?;
                if !head.loss.is_finite() {
                    return Err(Error::Numerical(format!("classifier phase loss {}", head.loss)));
                }
                let dense = self.model.classifier.dense_mut();
                dense.axpy(-lr, &head.classifier);
                if !dense.is_finite() {
                    return Err(Error::Numerical("non-finite classifier after step".into()));
                }
            }
        }
        Ok(())
    }

    /// Extractor training with the classifier frozen, on cross-entropy plus
    /// the center loss. A no-op without global prototypes.
    pub fn train_extractor_phase(
        &mut self,
        ctx: &RoundContext<'_>,
        epochs: usize,
        batch_size: usize,
        lr: f64,
        rng: &mut SimRng,
    ) -> Result<()> {
        let Some(gp) = ctx.global_prototypes else {
            return Ok(());
        };
        let spec = LossSpec::ExtractorPhase {
            lambda_e: ctx.lambda_e,
            global_prototypes: gp,
        };
        let data = Arc::clone(&self.train_data);
        let mut order: Vec<usize> = (0..data.len()).collect();
        for _ in 0..epochs {
            order.shuffle(rng);
            for chunk in order.chunks(batch_size.max(1)) {
                let batch: Vec<&Sample> = chunk.iter().map(|&i| &data.samples()[i]).collect();
                let (_, g) = compute_gradients(&self.model, &batch, &spec, ParamMask::ExtractorOnly)?;
                sgd_step_in_place(&mut self.model, &g, lr, ParamMask::ExtractorOnly)?;
            }
        }
        Ok(())
    }

    fn run_round(
        &self,
        b: &Broadcast,
        cfg: &LocalConfig,
        upload_extractor: bool,
    ) -> Result<(ClientState, ClientUpdate, LocalStats)> {
        let mut st = self.clone();
        st.adopt_broadcast(b)?;
        let data = Arc::clone(&st.train_data);
        let samples = data.samples();
        let dim = st.model.extractor.output_dim();

        let feats = all_features(&st.model.extractor, samples)?;
        let local_prototypes = prototypes_from_features(&feats, samples, dim);
        let loss_before = mean_ce_from_features(&st.model.classifier, &feats, samples);

        let ctx = RoundContext {
            round: b.round,
            max_round: cfg.max_round,
            lambda_c: cfg.lambda_c,
            lambda_e: cfg.lambda_e,
            global_classifier: &b.global_classifier,
            global_prototypes: b.global_prototypes.as_ref(),
            local_prototypes: &local_prototypes,
        };
        let mut rng = child_rng(self.rng_seed, Stream::ClientRound, self.id as u64, b.round as u64);
        let mut phases = Vec::new();
        for epoch in 0..cfg.epochs {
            st.train_classifier_phase(&ctx, 1, cfg.batch_size, cfg.lr, &mut rng)?;
            phases.push(PhaseRecord {
                epoch,
                kind: PhaseKind::Classifier,
            });
            if ctx.global_prototypes.is_some() {
                st.train_extractor_phase(&ctx, 1, cfg.batch_size, cfg.lr, &mut rng)?;
                phases.push(PhaseRecord {
                    epoch,
                    kind: PhaseKind::Extractor,
                });
            }
        }

        let feats = all_features(&st.model.extractor, samples)?;
        let prototypes = prototypes_from_features(&feats, samples, dim);
        let loss_after = mean_ce_from_features(&st.model.classifier, &feats, samples);
        if !loss_after.is_finite() || !st.model.is_finite() {
            return Err(Error::Numerical(format!("training diverged (loss {loss_after})")));
        }

        let update = ClientUpdate {
            client_id: st.id,
            classifier: st.model.classifier.clone(),
            prototypes,
            total_count: st.train_data.len(),
            per_class_counts: st.train_data.class_counts().to_vec(),
            extractor: upload_extractor.then(|| st.model.extractor.clone()),
        };
        let stats = LocalStats {
            loss_before,
            loss_after,
            phases,
        };
        Ok((st, update, stats))
    }

    /// One full local round. `upload_extractor` is whether round `t + 1`
    /// belongs to the transmission schedule.
    pub fn local_round(
        &self,
        b: &Broadcast,
        cfg: &LocalConfig,
        upload_extractor: bool,
    ) -> Result<(ClientState, ClientUpdate, LocalStats)> {
        self.run_round(b, cfg, upload_extractor).map_err(|e| Error::Client {
            client: self.id,
            round: b.round,
            source: Box::new(e),
        })
    }
}
