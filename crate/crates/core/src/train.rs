//! SGD with Nesterov momentum, reduce-on-plateau scheduling, and the three-phase training scheme.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::cluster::{mean_map, ClusterConfig, ClusterModel, IntensitySource};
use crate::data::augment::{augment, AugmentConfig};
use crate::data::fer::{Dataset, LabeledExample, Split};
use crate::data::image::{GrayImage, PIXELS};
use crate::data::mask::{apply_membership, Fill};
use crate::error::{Error, Result};
use crate::eval::{argmax, evaluate, MetricsReport};
use crate::nn::analysis::extract_attention_batch;
use crate::nn::model::{build_model, images_to_tensor, Model, ModelSpec, Variant};
use crate::seed::derive_seed;
use crate::tape::Tape;

const TAG_PHASE1: u64 = 1;
const TAG_PHASE3: u64 = 3;
const TAG_INIT: u64 = 0x1417;
const TAG_SHUFFLE: u64 = 0x5e;
const TAG_AUGMENT: u64 = 0xa0;
const TAG_MASK: u64 = 0x3a;

#[derive(Clone, Debug, PartialEq)]
pub struct RlrpConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    /// Minimum rise of the monitored metric that counts as an improvement.
    pub threshold: f64,
}

impl Default for RlrpConfig {
    fn default() -> Self {
        RlrpConfig {
            factor: 0.1,
            patience: 10,
            min_lr: 1e-5,
            threshold: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Epochs for the predictor (phase 3 and the baseline).
    pub epochs: usize,
    /// Epochs for the attention classifier (phase 1).
    pub attention_epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub rlrp: RlrpConfig,
    pub mask_prob: f64,
    pub fill: Fill,
    pub seed: u64,
    pub cluster: ClusterConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 15,
            attention_epochs: 15,
            batch_size: 32,
            lr0: 0.01,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 1e-4,
            rlrp: RlrpConfig::default(),
            mask_prob: 0.5,
            fill: Fill::Mean,
            seed: 0,
            cluster: ClusterConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::config("optimizer.lr0", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("optimizer.momentum", "must lie in [0, 1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("optimizer.weight_decay", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::config("mask.prob", "must lie in [0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if !(self.rlrp.factor > 0.0 && self.rlrp.factor < 1.0) {
            return Err(Error::config("rlrp.factor", "must lie in (0, 1)"));
        }
        if self.rlrp.patience == 0 {
            return Err(Error::config("rlrp.patience", "must be at least 1"));
        }
        if self.rlrp.min_lr < 0.0 {
            return Err(Error::config("rlrp.min_lr", "must be non-negative"));
        }
        if let Fill::Value(v) = self.fill {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config("mask.fill", "must be `mean` or a value in [0, 1]"));
            }
        }
        self.cluster.validate()?;
        self.augment.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<Vec<f64>>,
    pub lr: f64,
    pub best_metric: Option<f64>,
    pub bad_epochs: usize,
}

impl OptimizerState {
    pub fn new(sizes: impl IntoIterator<Item = usize>, lr: f64) -> Self {
        OptimizerState {
            velocity: sizes.into_iter().map(|n| vec![0.0; n]).collect(),
            lr,
            best_metric: None,
            bad_epochs: 0,
        }
    }

    pub fn for_model(model: &Model, lr: f64) -> Self {
        Self::new(model.params.iter().map(|p| p.tensor.numel()), lr)
    }

    /// Applies one update to every parameter from its accumulated gradient.
    pub fn step(&mut self, model: &mut Model, momentum: f64, weight_decay: f64, nesterov: bool) -> Result<()> {
        if self.velocity.len() != model.params.len() {
            return Err(Error::Shape(format!(
                "{} velocity buffers for {} parameters",
                self.velocity.len(),
                model.params.len()
            )));
        }
        let lr = self.lr;
        for (p, v) in model.params.iter_mut().zip(&mut self.velocity) {
            let g = p.tensor.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; v.len()]);
            sgd_nesterov_step(p.tensor.data_mut(), &g, v, lr, momentum, weight_decay, nesterov)?;
        }
        Ok(())
    }
}

/// `g' = g + wd·p`, `v' = μ·v + g'`, then `p' = p − lr·(g' + μ·v')` (Nesterov) or `p' = p − lr·v'`.
pub fn sgd_nesterov_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    nesterov: bool,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::Shape(format!(
            "parameter, gradient and velocity lengths differ: {}, {}, {}",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        let g = g + weight_decay * *p;
        *v = momentum * *v + g;
        *p -= lr * if nesterov { g + momentum * *v } else { *v };
    }
    Ok(())
}

/// Feeds one epoch's monitored metric (higher is better) to the scheduler and returns the new rate.
pub fn rlrp_step(state: &mut OptimizerState, metric: f64, config: &RlrpConfig) -> Result<f64> {
    if !metric.is_finite() {
        return Err(Error::Numeric(format!("scheduler metric {metric} is not finite")));
    }
    match state.best_metric {
        Some(best) if metric <= best + config.threshold => {
            state.bad_epochs += 1;
            if state.bad_epochs >= config.patience {
                state.lr = (state.lr * config.factor).max(config.min_lr).min(state.lr);
                state.bad_epochs = 0;
            }
        }
        _ => {
            state.best_metric = Some(metric);
            state.bad_epochs = 0;
        }
    }
    Ok(state.lr)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub lr: f64,
}

pub const CURVES_HEADER: &str = "epoch,train_loss,train_acc,val_acc,lr";

pub fn curves_csv(curves: &[EpochRecord]) -> String {
    let mut out = format!("{CURVES_HEADER}\n");
    for r in curves {
        let _ = writeln!(out, "{},{:?},{:?},{:?},{:?}", r.epoch, r.train_loss, r.train_acc, r.val_acc, r.lr);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation accuracy (initialization when no epoch ran).
    pub best: Model,
    pub best_epoch: Option<usize>,
    pub best_val_acc: Option<f64>,
    pub curves: Vec<EpochRecord>,
    /// Clusterings used during each epoch (phase 3 only).
    pub clusters: Vec<ClusterModel>,
    /// SHA-256 of the validation inputs seen at each epoch's evaluation.
    pub eval_digests: Vec<String>,
}

/// Hex SHA-256 over the little-endian pixel values of the examples, in order.
pub fn digest_examples(examples: &[&LabeledExample]) -> String {
    let mut h = Sha256::new();
    for e in examples {
        for v in e.image.pixels() {
            h.update(v.to_le_bytes());
        }
        h.update((e.label as u64).to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

struct Masking<'a> {
    grid: &'a [f64],
}

fn train_loop(
    data: &Dataset,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    epochs: usize,
    tag: u64,
    masking: Option<Masking<'_>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train = data.split(Split::Train);
    let val = data.split(Split::Val);
    if train.is_empty() {
        return Err(Error::Contract("training split is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::Contract("validation split is empty".into()));
    }
    let mut model = build_model(spec, derive_seed(cfg.seed, &[tag, TAG_INIT]))?;
    let mut state = OptimizerState::for_model(&model, cfg.lr0);
    let mut outcome = TrainOutcome {
        best: model.clone(),
        best_epoch: None,
        best_val_acc: None,
        curves: Vec::with_capacity(epochs),
        clusters: Vec::new(),
        eval_digests: Vec::new(),
    };
    let mut clusters = ClusterModel::unfitted(cfg.cluster.clone());
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=epochs {
        let membership = match &masking {
            Some(m) => {
                clusters = clusters.epoch_update_mean(m.grid, &cfg.cluster)?;
                outcome.clusters.push(clusters.clone());
                Some(clusters.membership()?)
            }
            None => None,
        };
        let e = epoch as u64;
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[tag, e, TAG_SHUFFLE])));

        let prepare = |i: usize| -> GrayImage {
            let mut image = train[i].image.clone();
            if let Some(members) = &membership {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[tag, e, i as u64, TAG_MASK]));
                if rng.random_bool(cfg.mask_prob) {
                    let c = rng.random_range(0..members.len());
                    image = apply_membership(&image, &members[c], cfg.fill);
                }
            }
            augment(&image, derive_seed(cfg.seed, &[tag, e, i as u64, TAG_AUGMENT]), &cfg.augment)
        };

        let (mut loss_sum, mut correct) = (0.0, 0usize);
        let lr = state.lr;
        for batch in order.chunks(cfg.batch_size) {
            let inputs: Vec<GrayImage> = batch.par_iter().map(|&i| prepare(i)).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| train[i].label).collect();
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true)?;
            let x = tape.constant(images_to_tensor(inputs.iter()))?;
            let out = model.forward(&mut tape, x, &bound)?;
            let loss = tape.softmax_cross_entropy(out.logits, &labels)?;
            loss_sum += tape.value(loss).item()? * batch.len() as f64;
            let logits = tape.value(out.logits);
            correct += logits
                .data()
                .chunks(logits.shape()[1])
                .zip(&labels)
                .filter(|(row, &l)| argmax(row) == l)
                .count();
            tape.backward(loss)?;
            model.zero_grad();
            model.accumulate_grads(&tape, &bound)?;
            state.step(&mut model, cfg.momentum, cfg.weight_decay, cfg.nesterov)?;
        }

        outcome.eval_digests.push(digest_examples(&val));
        let val_acc = evaluate(&model, &val)?.accuracy;
        let n = train.len() as f64;
        outcome.curves.push(EpochRecord {
            epoch,
            train_loss: loss_sum / n,
            train_acc: correct as f64 / n,
            val_acc,
            lr,
        });
        if outcome.best_val_acc.is_none_or(|b| val_acc > b) {
            outcome.best_val_acc = Some(val_acc);
            outcome.best_epoch = Some(epoch);
            outcome.best = model.clone();
        }
        rlrp_step(&mut state, val_acc, &cfg.rlrp)?;
    }
    outcome.best.zero_grad();
    Ok(outcome)
}

pub fn train_phase1(data: &Dataset, spec: &ModelSpec, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if spec.variant != Variant::AttentionClassifier {
        return Err(Error::Variant("phase 1 trains an attention_classifier".into()));
    }
    train_loop(data, spec, cfg, cfg.attention_epochs, TAG_PHASE1, None)
}

/// The grid fed to clustering: the mean upsampled attention over the training split,
/// or the mean training image in pixel mode.
pub fn clustering_grid(data: &Dataset, attention_model: &Model, source: IntensitySource) -> Result<Vec<f64>> {
    let train = data.split(Split::Train);
    if train.is_empty() {
        return Err(Error::Contract("training split is empty".into()));
    }
    match source {
        IntensitySource::Pixel => mean_map(&train.iter().map(|e| e.image.pixels().to_vec()).collect::<Vec<_>>()),
        IntensitySource::Attention => {
            let sums: Vec<Result<Vec<f64>>> = train
                .par_chunks(128)
                .map(|chunk| {
                    let imgs: Vec<&GrayImage> = chunk.iter().map(|e| &e.image).collect();
                    let maps = extract_attention_batch(attention_model, &imgs)?;
                    let mut s = vec![0.0; PIXELS];
                    for m in maps {
                        s.iter_mut().zip(&m.values).for_each(|(a, v)| *a += v);
                    }
                    Ok(s)
                })
                .collect();
            let mut total = vec![0.0; PIXELS];
            for s in sums {
                total.iter_mut().zip(s?).for_each(|(a, v)| *a += v);
            }
            let n = train.len() as f64;
            Ok(total.into_iter().map(|v| (v / n).clamp(0.0, 1.0)).collect())
        }
    }
}

/// Trains the predictor with cluster-guided masking of training samples.
///
/// The phase-1 model is frozen, so the mean attention grid is the same every
/// epoch; it is computed once and each epoch still runs its own cluster update.
pub fn train_phase3(
    data: &Dataset,
    predictor: &ModelSpec,
    attention_model: &Model,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if cfg.cluster.intensity == IntensitySource::Attention && attention_model.spec.variant != Variant::AttentionClassifier {
        return Err(Error::Variant("phase 3 needs an attention_classifier checkpoint".into()));
    }
    let grid = clustering_grid(data, attention_model, cfg.cluster.intensity)?;
    train_loop(data, predictor, cfg, cfg.epochs, TAG_PHASE3, Some(Masking { grid: &grid }))
}

/// The predictor trained the same way as phase 3 but without any masking.
pub fn train_baseline(data: &Dataset, predictor: &ModelSpec, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_loop(data, predictor, cfg, cfg.epochs, TAG_PHASE3, None)
}

/// Everything one scheme run produces.
#[derive(Clone, Debug)]
pub struct SchemeArtifacts {
    pub phase1: TrainOutcome,
    pub phase3: TrainOutcome,
    pub reports: SchemeReports,
    /// (what, digest) for every evaluation input batch of the run.
    pub eval_digests: Vec<(String, String)>,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SchemeReports {
    pub attention_test: MetricsReport,
    pub predictor_test: MetricsReport,
    pub predictor_occluded_test: Option<MetricsReport>,
}

/// Data a run trains and reports on.
#[derive(Clone, Copy, Debug)]
pub struct RunData<'a> {
    pub dataset: &'a Dataset,
    /// Optional extra test set (e.g. occluded images) reported alongside the clean one.
    pub occluded: Option<&'a Dataset>,
}

fn write_outcome(dir: &Path, name: &str, outcome: &TrainOutcome, metadata: &str) -> Result<()> {
    let sub = dir.join(name);
    fs::create_dir_all(&sub).map_err(Error::file(&sub))?;
    let p = sub.join("curves.csv");
    fs::write(&p, curves_csv(&outcome.curves)).map_err(Error::file(&p))?;
    outcome.best.to_checkpoint(metadata).save(&sub.join("model.ptck"))?;
    for c in &outcome.clusters {
        let p = sub.join(format!("clusters_epoch{:03}.txt", c.epoch_stamp));
        fs::write(&p, c.to_text()).map_err(Error::file(&p))?;
        c.write_pgm(&sub.join(format!("clusters_epoch{:03}.pgm", c.epoch_stamp)))?;
    }
    Ok(())
}

fn test_report(model: &Model, ds: &Dataset, what: &str, digests: &mut Vec<(String, String)>) -> Result<MetricsReport> {
    let test = ds.split(Split::Test);
    digests.push((what.to_string(), digest_examples(&test)));
    evaluate(model, &test)
}

/// Phase 3 and final evaluation on top of an already trained attention classifier.
pub fn run_perturb_scheme_from(
    data: RunData<'_>,
    phase1: TrainOutcome,
    predictor: &ModelSpec,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<SchemeArtifacts> {
    let mut digests: Vec<(String, String)> = phase1
        .eval_digests
        .iter()
        .enumerate()
        .map(|(i, d)| (format!("phase1 val epoch {}", i + 1), d.clone()))
        .collect();
    let phase3 = train_phase3(data.dataset, predictor, &phase1.best, cfg)?;
    if let Some(dir) = out_dir {
        write_outcome(dir, "phase3", &phase3, &format!("seed = {}\n", cfg.seed))?;
    }
    digests.extend(
        phase3
            .eval_digests
            .iter()
            .enumerate()
            .map(|(i, d)| (format!("phase3 val epoch {}", i + 1), d.clone())),
    );
    let attention_test = test_report(&phase1.best, data.dataset, "phase1 test", &mut digests)?;
    let predictor_test = test_report(&phase3.best, data.dataset, "phase3 test", &mut digests)?;
    let predictor_occluded_test = match data.occluded {
        Some(o) => Some(test_report(&phase3.best, o, "phase3 occluded test", &mut digests)?),
        None => None,
    };
    let reports = SchemeReports {
        attention_test,
        predictor_test,
        predictor_occluded_test,
    };
    if let Some(dir) = out_dir {
        let p = dir.join("metrics.json");
        fs::write(&p, serde_json::to_string_pretty(&reports)?).map_err(Error::file(&p))?;
    }
    Ok(SchemeArtifacts {
        phase1,
        phase3,
        reports,
        eval_digests: digests,
    })
}

/// Phase 1, then phase 3 with per-epoch clustering, then evaluation.
/// With `out_dir`, each phase's curves and checkpoint are written as soon as it finishes.
pub fn run_perturb_scheme(
    data: RunData<'_>,
    attention: &ModelSpec,
    predictor: &ModelSpec,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<SchemeArtifacts> {
    let phase1 = train_phase1(data.dataset, attention, cfg)?;
    if let Some(dir) = out_dir {
        write_outcome(dir, "phase1", &phase1, &format!("seed = {}\n", cfg.seed))?;
    }
    run_perturb_scheme_from(data, phase1, predictor, cfg, out_dir)
}

/// Baseline predictor plus its test reports; written like a scheme run's phase 3.
pub fn run_baseline(
    data: RunData<'_>,
    predictor: &ModelSpec,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(TrainOutcome, MetricsReport, Option<MetricsReport>)> {
    let outcome = train_baseline(data.dataset, predictor, cfg)?;
    if let Some(dir) = out_dir {
        write_outcome(dir, "baseline", &outcome, &format!("seed = {}\n", cfg.seed))?;
    }
    let mut digests = Vec::new();
    let clean = test_report(&outcome.best, data.dataset, "baseline test", &mut digests)?;
    let occluded = match data.occluded {
        Some(o) => Some(test_report(&outcome.best, o, "baseline occluded test", &mut digests)?),
        None => None,
    };
    if let Some(dir) = out_dir {
        let json = serde_json::json!({ "predictor_test": clean, "predictor_occluded_test": occluded });
        let p = dir.join("metrics.json");
        fs::write(&p, serde_json::to_string_pretty(&json)?).map_err(Error::file(&p))?;
    }
    Ok((outcome, clean, occluded))
}
