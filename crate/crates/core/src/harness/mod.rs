//! Round loop, baselines, evaluation and persistence.
//!
//! Every random draw descends from the configured master seed through
//! [`crate::rng::child_seed`], keyed by purpose, client and round, so
//! changing participation does not perturb other clients' streams. Client
//! rounds run on the rayon pool and are merged in ascending client order.

pub mod config;
pub mod eval;
pub mod io;
pub mod ledger;

use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{Method, PartitionKind, RunConfig};
pub use eval::{accuracy, evaluate, Evaluation};
pub use io::{load_snapshot, read_snapshot, save_snapshot, write_outputs, write_snapshot};
pub use ledger::{comm_ledger_totals, CommTotals, Ledger, LedgerRow, RoundLedger};

use crate::client::{sgd_epochs, Broadcast, ClientState, ClientUpdate, LocalStats, PayloadCounts};
use crate::data::{make_test_sets, partition, random_subset, GaussianMixture, LabeledDataset};
use crate::error::{Error, Result};
use crate::losses::mean_cross_entropy_on;
use crate::nn::{ModelParams, ParamCount, ParamMask};
use crate::rng::{child_rng, child_seed, Stream};
use crate::server::{average_models, cft_schedule, CftSchedule, GlobalState};

/// One row of `metrics.csv`. Communication columns are cumulative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub round: usize,
    pub method: String,
    pub mean_balanced_acc: f64,
    pub mean_matched_acc: f64,
    pub system_loss: f64,
    pub upload_params: usize,
    pub download_params: usize,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub method: Method,
    pub metrics: Vec<MetricsRow>,
    pub ledger: Ledger,
    /// Final model of each client, as evaluated in the last metrics row.
    pub client_models: Vec<ModelParams>,
    pub global_model: Option<ModelParams>,
    pub final_evaluation: Evaluation,
    pub totals: CommTotals,
}

impl RunResult {
    pub fn last_row(&self, method: &str) -> Option<&MetricsRow> {
        self.metrics.iter().rev().find(|r| r.method == method)
    }
}

/// Data and initial model shared by every method under one seed.
#[derive(Debug, Clone)]
pub struct Environment {
    pub mixture: GaussianMixture,
    pub train: Vec<Arc<LabeledDataset>>,
    pub balanced_test: LabeledDataset,
    pub matched_test: Vec<LabeledDataset>,
    pub init: ModelParams,
}

impl Environment {
    pub fn build(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.seed;
        let radius = cfg
            .sphere_radius
            .unwrap_or_else(|| GaussianMixture::default_radius(cfg.cluster_spread));
        let mixture = GaussianMixture::new(
            cfg.num_classes,
            cfg.input_dim,
            cfg.cluster_spread,
            radius,
            child_seed(seed, Stream::Data, 0, 0),
        )?;
        let pool = mixture.sample_balanced(cfg.samples_per_class, &mut child_rng(seed, Stream::Data, 1, 0));
        let parts = partition(&pool, &cfg.partition_spec(child_seed(seed, Stream::Partition, 0, 0)))?;
        if let Some(i) = parts.iter().position(LabeledDataset::is_empty) {
            return Err(Error::Config(format!("client {i} received no training samples")));
        }
        let (balanced_test, matched_test) = make_test_sets(
            &mixture,
            &parts,
            cfg.test_samples_per_class,
            child_seed(seed, Stream::TestData, 0, 0),
        );
        let init = ModelParams::init(&cfg.architecture(), &mut child_rng(seed, Stream::ModelInit, 0, 0));
        Ok(Self {
            mixture,
            train: parts.into_iter().map(Arc::new).collect(),
            balanced_test,
            matched_test,
            init,
        })
    }

    pub fn num_clients(&self) -> usize {
        self.train.len()
    }

    pub fn evaluate(&self, models: &[ModelParams]) -> Result<Evaluation> {
        evaluate(models, &self.balanced_test, &self.matched_test, &self.train)
    }
}

/// `ceil(fraction * N)` distinct ids in ascending order, drawn uniformly
/// without replacement from a stream keyed by `(seed, round)`.
pub fn select_clients(num_clients: usize, fraction: f64, seed: u64, round: usize) -> Vec<usize> {
    let k = ((fraction * num_clients as f64) - 1e-9)
        .ceil()
        .clamp(1.0, num_clients as f64) as usize;
    if k >= num_clients {
        return (0..num_clients).collect();
    }
    let mut rng = child_rng(seed, Stream::Selection, round as u64, 0);
    random_subset(num_clients, k, &mut rng)
}

fn scaled(p: PayloadCounts, n: usize) -> PayloadCounts {
    PayloadCounts {
        extractor: p.extractor * n,
        classifier: p.classifier * n,
        prototypes: p.prototypes * n,
    }
}

fn full_model_payload(m: &ModelParams) -> PayloadCounts {
    PayloadCounts {
        extractor: m.extractor.param_count(),
        classifier: m.classifier.param_count(),
        prototypes: 0,
    }
}

fn mean_opt(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn due(cfg: &RunConfig, done: usize) -> bool {
    done.is_multiple_of(cfg.eval_every) || done == cfg.rounds
}

struct Recorder {
    label: &'static str,
    metrics: Vec<MetricsRow>,
    last: Option<Evaluation>,
}

impl Recorder {
    fn new(label: &'static str) -> Self {
        Self {
            label,
            metrics: Vec::new(),
            last: None,
        }
    }

    /// Scores `models` and appends a row; accuracies are also attached to
    /// the latest ledger round.
    fn record(&mut self, env: &Environment, ledger: &mut Ledger, round: usize, models: &[ModelParams]) -> Result<()> {
        self.push_row(self.label, env, ledger.cumulative(), round, models)?;
        if round > 0 {
            let ev = self.last.as_ref().expect("just recorded");
            ledger.annotate_last(ev.mean_balanced_acc, ev.mean_matched_acc);
        }
        Ok(())
    }

    fn push_row(
        &mut self,
        label: &str,
        env: &Environment,
        (up, down): (usize, usize),
        round: usize,
        models: &[ModelParams],
    ) -> Result<()> {
        let ev = env.evaluate(models)?;
        self.metrics.push(MetricsRow {
            round,
            method: label.to_string(),
            mean_balanced_acc: ev.mean_balanced_acc,
            mean_matched_acc: ev.mean_matched_acc,
            system_loss: ev.system_loss,
            upload_params: up,
            download_params: down,
        });
        self.last = Some(ev);
        Ok(())
    }
}

/// Everything observable about one protocol round.
#[derive(Debug, Clone)]
pub struct RoundTrace {
    pub round: usize,
    pub participants: Vec<usize>,
    pub broadcast: Broadcast,
    /// Successful updates in ascending client order.
    pub updates: Vec<ClientUpdate>,
    pub stats: Vec<LocalStats>,
    pub failures: Vec<(usize, String)>,
}

/// Step-wise driver of the full protocol.
#[derive(Debug, Clone)]
pub struct FedMateSim {
    cfg: RunConfig,
    env: Arc<Environment>,
    clients: Vec<ClientState>,
    global: GlobalState,
    schedule: CftSchedule,
    ledger: Ledger,
}

impl FedMateSim {
    pub fn new(cfg: &RunConfig, env: Arc<Environment>) -> Result<Self> {
        cfg.validate()?;
        if env.num_clients() != cfg.num_clients {
            return Err(Error::Config(format!(
                "environment has {} clients, config {}",
                env.num_clients(),
                cfg.num_clients
            )));
        }
        let par_prototypes = cfg.num_classes * cfg.feature_dim;
        let schedule = cft_schedule(
            env.init.extractor.param_count(),
            par_prototypes,
            cfg.cft_multiplier,
            cfg.rounds,
        )?;
        let clients = env
            .train
            .iter()
            .enumerate()
            .map(|(i, d)| ClientState::new(i, env.init.clone(), Arc::clone(d), cfg.seed))
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            global: GlobalState::new(&env.init),
            env,
            clients,
            schedule,
            ledger: Ledger::default(),
        })
    }

    pub fn round(&self) -> usize {
        self.global.round
    }

    pub fn schedule(&self) -> &CftSchedule {
        &self.schedule
    }

    pub fn global(&self) -> &GlobalState {
        &self.global
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn environment(&self) -> &Environment {
        &self.env
    }

    pub fn client_models(&self) -> Vec<ModelParams> {
        self.clients.iter().map(|c| c.model.clone()).collect()
    }

    pub fn global_model(&self) -> Result<ModelParams> {
        ModelParams::new(self.global.extractor.clone(), self.global.classifier.clone())
    }

    /// Broadcast, parallel local rounds, barrier, aggregation, ledger entry.
    pub fn step(&mut self) -> Result<RoundTrace> {
        let t = self.global.round;
        let broadcast = self.global.broadcast();
        let participants = select_clients(self.cfg.num_clients, self.cfg.participation, self.cfg.seed, t);
        let upload_extractor = self.schedule.uploads_at(t + 1);
        let local = self.cfg.local_config();

        let clients = &self.clients;
        let results: Vec<_> = participants
            .par_iter()
            .map(|&i| clients[i].local_round(&broadcast, &local, upload_extractor))
            .collect();

        let mut updates = Vec::new();
        let mut stats = Vec::new();
        let mut failures = Vec::new();
        for (&i, r) in participants.iter().zip(results) {
            match r {
                Ok((state, update, s)) => {
                    self.clients[i] = state;
                    updates.push(update);
                    stats.push(s);
                }
                Err(e) => {
                    log::warn!("{e}; client excluded from round {t}");
                    failures.push((i, e.to_string()));
                }
            }
        }

        self.global = self.global.server_round(&updates, &self.cfg.server_config())?;

        let mut upload = PayloadCounts::default();
        for u in &updates {
            upload += u.payload();
        }
        let before: Vec<f64> = stats.iter().map(|s| s.loss_before).collect();
        let after: Vec<f64> = stats.iter().map(|s| s.loss_after).collect();
        self.ledger.push(
            t,
            participants.clone(),
            upload,
            scaled(broadcast.payload(), participants.len()),
            mean_opt(&before),
            mean_opt(&after),
        );
        Ok(RoundTrace {
            round: t,
            participants,
            broadcast,
            updates,
            stats,
            failures,
        })
    }
}

fn finish(
    method: Method,
    rec: Recorder,
    ledger: Ledger,
    client_models: Vec<ModelParams>,
    global_model: Option<ModelParams>,
    model_params: usize,
) -> RunResult {
    RunResult {
        method,
        metrics: rec.metrics,
        totals: comm_ledger_totals(&ledger, model_params),
        ledger,
        client_models,
        global_model,
        final_evaluation: rec.last.expect("initial evaluation always recorded"),
    }
}

pub fn run_fedmate(cfg: &RunConfig, env: Arc<Environment>) -> Result<RunResult> {
    let mut sim = FedMateSim::new(cfg, env)?;
    let env = Arc::clone(&sim.env);
    let mut rec = Recorder::new(Method::Fedmate.as_str());
    let models = sim.client_models();
    rec.record(&env, &mut sim.ledger, 0, &models)?;
    for t in 0..cfg.rounds {
        sim.step()?;
        if due(cfg, t + 1) {
            let models = sim.client_models();
            rec.record(&env, &mut sim.ledger, t + 1, &models)?;
        }
    }
    let global = sim.global_model()?;
    let models = sim.client_models();
    let model_params = full_model_payload(&global).total();
    Ok(finish(
        Method::Fedmate,
        rec,
        sim.ledger,
        models,
        Some(global),
        model_params,
    ))
}

/// Trains a copy of `model` on each listed client; failures are logged and
/// dropped. Returns `(client, model, loss_before, loss_after)`.
fn train_copies(
    cfg: &RunConfig,
    env: &Environment,
    ids: &[usize],
    start: &[&ModelParams],
    epochs: usize,
    stream: Stream,
    round: usize,
) -> Vec<(usize, ModelParams, f64, f64)> {
    let results: Vec<Result<(ModelParams, f64, f64)>> = ids
        .par_iter()
        .zip(start.par_iter())
        .map(|(&i, m)| {
            let data = &env.train[i];
            let mut model = (*m).clone();
            let before = mean_cross_entropy_on(&model, data.samples())?;
            let mut rng = child_rng(cfg.seed, stream, i as u64, round as u64);
            sgd_epochs(
                &mut model,
                data,
                ParamMask::Full,
                epochs,
                cfg.batch_size,
                cfg.local_lr,
                &mut rng,
            )?;
            let after = mean_cross_entropy_on(&model, data.samples())?;
            if !after.is_finite() {
                return Err(Error::Numerical(format!("training diverged (loss {after})")));
            }
            Ok((model, before, after))
        })
        .collect();
    ids.iter()
        .zip(results)
        .filter_map(|(&i, r)| match r {
            Ok((m, b, a)) => Some((i, m, b, a)),
            Err(e) => {
                log::warn!("client {i}, round {round}: {e}; excluded");
                None
            }
        })
        .collect()
}

/// Full-model sample-weighted averaging each round; afterwards every client
/// fine-tunes the final global model locally. The last metrics row, labelled
/// `fedavg_ft_finetuned`, scores the fine-tuned models.
pub fn run_baseline_fedavg_ft(cfg: &RunConfig, env: Arc<Environment>) -> Result<RunResult> {
    let n = env.num_clients();
    let mut global = env.init.clone();
    let payload = full_model_payload(&global);
    let mut rec = Recorder::new(Method::FedavgFt.as_str());
    let mut ledger = Ledger::default();
    rec.record(&env, &mut ledger, 0, &vec![global.clone(); n])?;
    for t in 0..cfg.rounds {
        let ids = select_clients(n, cfg.participation, cfg.seed, t);
        let starts = vec![&global; ids.len()];
        let trained = train_copies(cfg, &env, &ids, &starts, cfg.local_epochs, Stream::ClientRound, t);
        if trained.is_empty() {
            log::warn!("round {t}: no surviving clients, global model carried forward");
        } else {
            let models: Vec<&ModelParams> = trained.iter().map(|r| &r.1).collect();
            let counts: Vec<usize> = trained.iter().map(|r| env.train[r.0].len()).collect();
            global = average_models(&models, &counts)?;
        }
        let before: Vec<f64> = trained.iter().map(|r| r.2).collect();
        let after: Vec<f64> = trained.iter().map(|r| r.3).collect();
        ledger.push(
            t,
            ids.clone(),
            scaled(payload, trained.len()),
            scaled(payload, ids.len()),
            mean_opt(&before),
            mean_opt(&after),
        );
        if due(cfg, t + 1) {
            rec.record(&env, &mut ledger, t + 1, &vec![global.clone(); n])?;
        }
    }

    let all: Vec<usize> = (0..n).collect();
    let starts = vec![&global; n];
    let tuned = train_copies(
        cfg,
        &env,
        &all,
        &starts,
        cfg.baseline_finetune_epochs,
        Stream::Finetune,
        0,
    );
    let mut models = vec![global.clone(); n];
    for (i, m, _, _) in tuned {
        models[i] = m;
    }
    rec.push_row("fedavg_ft_finetuned", &env, ledger.cumulative(), cfg.rounds, &models)?;
    Ok(finish(
        Method::FedavgFt,
        rec,
        ledger,
        models,
        Some(global),
        payload.total(),
    ))
}

/// Each client trains alone for `local_epochs` per round; nothing is
/// communicated.
pub fn run_baseline_local(cfg: &RunConfig, env: Arc<Environment>) -> Result<RunResult> {
    let n = env.num_clients();
    let mut models = vec![env.init.clone(); n];
    let payload = full_model_payload(&env.init);
    let mut rec = Recorder::new(Method::LocalOnly.as_str());
    let mut ledger = Ledger::default();
    rec.record(&env, &mut ledger, 0, &models)?;
    let all: Vec<usize> = (0..n).collect();
    for t in 0..cfg.rounds {
        let starts: Vec<&ModelParams> = models.iter().collect();
        let trained = train_copies(cfg, &env, &all, &starts, cfg.local_epochs, Stream::ClientRound, t);
        let before: Vec<f64> = trained.iter().map(|r| r.2).collect();
        let after: Vec<f64> = trained.iter().map(|r| r.3).collect();
        for (i, m, _, _) in trained {
            models[i] = m;
        }
        ledger.push(
            t,
            all.clone(),
            PayloadCounts::default(),
            PayloadCounts::default(),
            mean_opt(&before),
            mean_opt(&after),
        );
        if due(cfg, t + 1) {
            rec.record(&env, &mut ledger, t + 1, &models)?;
        }
    }
    Ok(finish(Method::LocalOnly, rec, ledger, models, None, payload.total()))
}

/// Runs `method` on a prepared environment.
pub fn run_method(cfg: &RunConfig, method: Method, env: Arc<Environment>) -> Result<RunResult> {
    match method {
        Method::Fedmate => run_fedmate(cfg, env),
        Method::FedavgFt => run_baseline_fedavg_ft(cfg, env),
        Method::LocalOnly => run_baseline_local(cfg, env),
    }
}

/// Builds the environment, runs the configured method and, when an output
/// directory is configured, writes the results there.
pub fn run_simulation(cfg: &RunConfig) -> Result<RunResult> {
    let env = Arc::new(Environment::build(cfg)?);
    let result = run_method(cfg, cfg.method, env)?;
    if let Some(dir) = &cfg.output_dir {
        write_outputs(cfg, &result, dir)?;
    }
    Ok(result)
}

/// Side-by-side table of the final metrics rows of several runs.
pub fn compare_summary(runs: &[(String, &RunResult)]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<28} {:<20} {:>6} {:>9} {:>9} {:>9} {:>12} {:>12}",
        "run", "method", "round", "balanced", "matched", "loss", "upload", "download"
    );
    for (label, r) in runs {
        let mut rows: Vec<&MetricsRow> = Vec::new();
        if let Some(row) = r.last_row(r.method.as_str()) {
            rows.push(row);
        }
        if let Some(row) = r.last_row("fedavg_ft_finetuned") {
            rows.push(row);
        }
        for row in rows {
            let _ = writeln!(
                out,
                "{:<28} {:<20} {:>6} {:>9.4} {:>9.4} {:>9.4} {:>12} {:>12}",
                label,
                row.method,
                row.round,
                row.mean_balanced_acc,
                row.mean_matched_acc,
                row.system_loss,
                row.upload_params,
                row.download_params
            );
        }
    }
    out
}
