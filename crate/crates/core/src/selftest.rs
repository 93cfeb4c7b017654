//! Quick oracle and property checks runnable from the command line.

use crate::client::ClientUpdate;
use crate::data::{LabeledDataset, Sample};
use crate::harness::io::{read_snapshot, write_snapshot};
use crate::losses::{
    classifier_phase_loss, disc_pr_loss, disc_pr_loss_grad, extractor_phase_loss, kappa, CcfContext, Discriminator,
    DiscriminatorRole, LossSpec,
};
use crate::nn::{compute_gradients, Architecture, Classifier, Dense, ModelParams, ParamMask};
use crate::prototype::PrototypeSet;
use crate::rng::{rng_from_seed, SimRng};
use crate::server::{
    aggregate_classifier_classwise, aggregate_classifier_fedavg, aggregate_prototypes, cft_schedule, js_divergence,
};
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type LossFn<'a> = Box<dyn Fn(&ModelParams) -> f64 + 'a>;

fn outcome(name: &'static str, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome { name, passed, detail }
}

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

fn random_protos(rng: &mut SimRng, classes: &[usize], dim: usize) -> PrototypeSet {
    let mut p = PrototypeSet::new(dim);
    for &k in classes {
        p.insert(k, (0..dim).map(|_| rng.random_range(0.0..1.5)).collect())
            .expect("dim");
    }
    p
}

fn random_batch(rng: &mut SimRng, n: usize, dim: usize, classes: usize) -> Vec<Sample> {
    (0..n)
        .map(|_| Sample {
            x: (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
            y: rng.random_range(0..classes),
        })
        .collect()
}

/// Parameter `j` of layer `li`, where the classifier follows the extractor
/// layers.
fn param_mut(m: &mut ModelParams, li: usize, j: usize) -> &mut f64 {
    let n = m.extractor.layers().len();
    let d: &mut Dense = if li < n {
        &mut m.extractor.layers_mut()[li]
    } else {
        m.classifier.dense_mut()
    };
    d.values_mut().nth(j).expect("index in range")
}

/// Whether any ReLU pre-activation of `model` on `batch` lies within
/// `margin` of zero, where finite differences straddle the kink.
fn near_kink(model: &ModelParams, batch: &[&Sample], margin: f64) -> bool {
    batch.iter().any(|s| {
        let mut a = s.x.clone();
        model.extractor.layers().iter().any(|l| {
            let z = l.affine(&a).expect("dims");
            let hit = z.iter().any(|v| v.abs() < margin);
            a = z.into_iter().map(|v| v.max(0.0)).collect();
            hit
        })
    })
}

/// Largest relative error between analytic and central-difference
/// gradients of `loss` over every parameter of `model`.
fn model_fd_error(
    model: &ModelParams,
    batch: &[&Sample],
    spec: &LossSpec<'_>,
    loss: &dyn Fn(&ModelParams) -> f64,
) -> crate::Result<f64> {
    let (_, g) = compute_gradients(model, batch, spec, ParamMask::Full)?;
    let mut worst = 0.0f64;
    let mut probe = model.clone();
    let n_layers = model.extractor.layers().len();
    for li in 0..=n_layers {
        let analytic: Vec<f64> = if li < n_layers {
            g.extractor[li].values().copied().collect()
        } else {
            g.classifier.values().copied().collect()
        };
        for (j, &a) in analytic.iter().enumerate() {
            let orig = *param_mut(&mut probe, li, j);
            *param_mut(&mut probe, li, j) = orig + FD_STEP;
            let up = loss(&probe);
            *param_mut(&mut probe, li, j) = orig - FD_STEP;
            let down = loss(&probe);
            *param_mut(&mut probe, li, j) = orig;
            worst = worst.max(rel_err(a, (up - down) / (2.0 * FD_STEP)));
        }
    }
    Ok(worst)
}

fn check_model_gradients() -> CheckOutcome {
    let arch = Architecture {
        input_dim: 3,
        hidden: vec![5],
        feature_dim: 4,
        num_classes: 3,
    };
    let mut worst = 0.0f64;
    let mut checked = 0;
    for seed in 0..32u64 {
        if checked == 8 {
            break;
        }
        let mut rng = rng_from_seed(1000 + seed);
        let mut model = ModelParams::init(&arch, &mut rng);
        for b in model
            .extractor
            .layers_mut()
            .iter_mut()
            .flat_map(|l| l.bias_mut().iter_mut())
        {
            *b = rng.random_range(-0.5..0.5);
        }
        let data = random_batch(&mut rng, 4, 3, 3);
        let batch: Vec<&Sample> = data.iter().collect();
        if near_kink(&model, &batch, 1e-4) {
            continue;
        }
        checked += 1;
        let global = random_protos(&mut rng, &[0, 1, 2], 4);
        let local = random_protos(&mut rng, &[0, 2], 4);
        let dpr = Discriminator::new(3, DiscriminatorRole::Prototype, &mut rng);
        let dcl = Discriminator::new(3, DiscriminatorRole::Classification, &mut rng);
        let ccf = CcfContext {
            local_prototypes: &local,
            global_prototypes: &global,
            disc_pr: &dpr,
            disc_cl: &dcl,
            round: 2,
            max_round: 10,
        };
        let specs: [(LossSpec<'_>, LossFn<'_>); 2] = [
            (
                LossSpec::ClassifierPhase {
                    lambda_c: 0.6,
                    ccf: Some(ccf),
                },
                Box::new(|m: &ModelParams| classifier_phase_loss(m, &batch, 0.6, Some(ccf)).unwrap_or(f64::NAN)),
            ),
            (
                LossSpec::ExtractorPhase {
                    lambda_e: 0.8,
                    global_prototypes: &global,
                },
                Box::new(|m: &ModelParams| extractor_phase_loss(m, &batch, 0.8, &global).unwrap_or(f64::NAN)),
            ),
        ];
        for (spec, f) in &specs {
            match model_fd_error(&model, &batch, spec, f.as_ref()) {
                Ok(e) if e.is_finite() => worst = worst.max(e),
                _ => return outcome("phase loss gradients", false, "evaluation failed".into()),
            }
        }
    }
    outcome(
        "phase loss gradients",
        worst < FD_TOL,
        format!("max relative error {worst:.2e}"),
    )
}

fn check_discriminator_gradients() -> CheckOutcome {
    let mut worst = 0.0f64;
    for seed in 0..8u64 {
        let mut rng = rng_from_seed(2000 + seed);
        let phi = Classifier::init(4, 3, &mut rng);
        let global = random_protos(&mut rng, &[0, 1, 2], 4);
        let local = random_protos(&mut rng, &[1, 2], 4);
        let disc = Discriminator::new(3, DiscriminatorRole::Prototype, &mut rng);
        let (_, g) = disc_pr_loss_grad(&disc, &phi, &global, &local);
        let analytic: Vec<f64> = g.hidden.values().chain(g.output.values()).copied().collect();
        let n_hidden = disc.hidden().values().count();
        for (j, &a) in analytic.iter().enumerate() {
            let eval = |delta: f64| {
                let mut d = disc.clone();
                let (h, o) = d.layers_mut();
                let cell = if j < n_hidden {
                    h.values_mut().nth(j)
                } else {
                    o.values_mut().nth(j - n_hidden)
                };
                *cell.expect("index in range") += delta;
                disc_pr_loss(&d, &phi, &global, &local)
            };
            worst = worst.max(rel_err(a, (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP)));
        }
    }
    outcome(
        "discriminator gradients",
        worst < FD_TOL,
        format!("max relative error {worst:.2e}"),
    )
}

fn check_js_value() -> CheckOutcome {
    let v = js_divergence(&[0.5, 0.5], &[1.0, 0.0]).unwrap_or(f64::NAN);
    let oracle = 0.5 * (0.5 * (0.5f64 / 0.75).ln() + 0.5 * 2f64.ln()) + 0.5 * (1.0f64 / 0.75).ln();
    outcome("js divergence", (v - oracle).abs() < 1e-12, format!("{v:.6} nats"))
}

fn random_update(
    rng: &mut SimRng,
    id: usize,
    classes: usize,
    dim: usize,
    proportional: Option<&[usize]>,
) -> ClientUpdate {
    let phi = Classifier::init(dim, classes, rng);
    let counts: Vec<usize> = match proportional {
        Some(base) => {
            let m = rng.random_range(1..5);
            base.iter().map(|c| c * m).collect()
        }
        None => (0..classes).map(|_| rng.random_range(1..30)).collect(),
    };
    let present: Vec<usize> = (0..classes).filter(|&k| counts[k] > 0).collect();
    ClientUpdate {
        client_id: id,
        classifier: phi,
        prototypes: random_protos(rng, &present, dim),
        total_count: counts.iter().sum(),
        per_class_counts: counts,
        extractor: None,
    }
}

fn check_prototype_weights() -> CheckOutcome {
    let mut rng = rng_from_seed(3000);
    for _ in 0..50 {
        let n = rng.random_range(1..6);
        let ups: Vec<ClientUpdate> = (0..n).map(|i| random_update(&mut rng, i, 3, 4, None)).collect();
        let phi = Classifier::init(4, 3, &mut rng);
        let Ok((g, ws)) = aggregate_prototypes(&ups, Some(&phi)) else {
            return outcome("prototype weights", false, "aggregation failed".into());
        };
        for (k, w) in &ws {
            let s: f64 = w.combined.iter().sum();
            if (s - 1.0).abs() > 1e-9 || w.combined.iter().any(|&x| x < 0.0) {
                return outcome("prototype weights", false, format!("class {k}: weights sum {s}"));
            }
            let pk = g.get(*k).unwrap_or(&[]);
            for (j, &v) in pk.iter().enumerate() {
                let vals = w
                    .clients
                    .iter()
                    .map(|&c| ups[c].prototypes.get(*k).map_or(f64::NAN, |p| p[j]));
                let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), x| (l.min(x), h.max(x)));
                if v < lo - 1e-12 || v > hi + 1e-12 {
                    return outcome("prototype weights", false, format!("class {k} leaves convex hull"));
                }
            }
        }
    }
    outcome(
        "prototype weights",
        true,
        "convex and within hull on 50 instances".into(),
    )
}

fn check_classwise_reduction() -> CheckOutcome {
    let mut rng = rng_from_seed(4000);
    for _ in 0..100 {
        let base: Vec<usize> = (0..4).map(|_| rng.random_range(1..6)).collect();
        let n = rng.random_range(1..6);
        let ups: Vec<ClientUpdate> = (0..n).map(|i| random_update(&mut rng, i, 4, 3, Some(&base))).collect();
        let prev = Classifier::init(3, 4, &mut rng);
        match (
            aggregate_classifier_classwise(&ups, &prev),
            aggregate_classifier_fedavg(&ups),
        ) {
            (Ok(a), Ok(b)) if a == b => {}
            _ => return outcome("class-wise reduces to averaging", false, "mismatch".into()),
        }
    }
    outcome(
        "class-wise reduces to averaging",
        true,
        "bit-identical on 100 instances".into(),
    )
}

fn check_schedule_cost() -> CheckOutcome {
    let ok = cft_schedule(9000, 900, 1.0, 100)
        .map(|s| s.upload_rounds().len() * 9000 + 100 * 900 == 100 * 9000)
        .unwrap_or(false);
    outcome("transmission schedule cost", ok, "q = 10, T = 100".into())
}

fn check_kappa() -> CheckOutcome {
    let ok = kappa(0, 50) == 1.0 && kappa(50, 50) == 0.0 && kappa(25, 50) == 0.5;
    outcome("adversarial weight schedule", ok, "endpoints and midpoint".into())
}

fn check_snapshot() -> CheckOutcome {
    let arch = Architecture {
        input_dim: 3,
        hidden: vec![4],
        feature_dim: 2,
        num_classes: 2,
    };
    let m = ModelParams::init(&arch, &mut rng_from_seed(5000));
    let mut buf = Vec::new();
    let ok = write_snapshot(&m, &mut buf).is_ok() && read_snapshot(&buf[..]).map(|r| r == m).unwrap_or(false);
    outcome("snapshot round trip", ok, format!("{} bytes", buf.len()))
}

fn check_dataset_csv() -> CheckOutcome {
    let mut rng = rng_from_seed(6000);
    let samples = random_batch(&mut rng, 10, 3, 4);
    let Ok(ds) = LabeledDataset::new(4, 3, samples) else {
        return outcome("dataset csv round trip", false, "construction failed".into());
    };
    let mut buf = Vec::new();
    let ok = ds.write_csv(&mut buf).is_ok() && LabeledDataset::read_csv(&buf[..], 4).map(|r| r == ds).unwrap_or(false);
    outcome("dataset csv round trip", ok, format!("{} rows", ds.len()))
}

/// Runs every check; the caller decides how to report.
pub fn run_all() -> Vec<CheckOutcome> {
    vec![
        check_model_gradients(),
        check_discriminator_gradients(),
        check_js_value(),
        check_prototype_weights(),
        check_classwise_reduction(),
        check_schedule_cost(),
        check_kappa(),
        check_snapshot(),
        check_dataset_csv(),
    ]
}
