//! Training loop, NMSE evaluation, modality ablation, few-shot transfer and
//! cost reporting.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ConditionTag, Sample};
use crate::embed::{EmbedInput, Modalities};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParamCounts};
use crate::nn::{Adam, AdamConfig, Mode, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    /// Stops early once this many optimiser steps have run.
    pub max_steps: Option<usize>,
    pub seed: u64,
    /// Report the mean of per-sample ratios next to the pooled NMSE.
    pub per_sample_nmse: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            lr: 1e-4,
            epochs: 50,
            max_steps: None,
            seed: 0,
            per_sample_nmse: true,
        }
    }
}

impl TrainConfig {
    pub fn paper() -> Self {
        TrainConfig {
            batch_size: 128,
            epochs: 200,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

pub fn write_metrics(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r)?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub steps: usize,
    pub epochs_run: usize,
    /// Epoch whose weights the model holds on return.
    pub best_epoch: usize,
    pub best_val_mse: Option<f64>,
    pub train_mse: Vec<f64>,
    pub val_mse: Vec<f64>,
    pub metrics: Vec<MetricRecord>,
}

/// Stacks samples into model inputs and `B x p^2` targets scaled to `[0, 1]`.
pub fn make_batch(samples: &[&Sample]) -> (EmbedInput<f32>, Array2<f32>) {
    let b = samples.len();
    let (c, r, _) = samples[0].rgb.dim();
    let mut rgb = Array4::zeros((b, c, r, r));
    let mut depth = Array4::zeros((b, 1, r, r));
    let p2 = samples[0].target_db.len();
    let mut target = Array2::zeros((b, p2));
    for (i, s) in samples.iter().enumerate() {
        rgb.index_axis_mut(Axis(0), i).assign(&s.rgb);
        depth.index_axis_mut(Axis(0), i).assign(&s.depth);
        for (t, &v) in target.row_mut(i).iter_mut().zip(&s.target_db) {
            *t = v / 255.0;
        }
    }
    let input = EmbedInput {
        rgb,
        depth,
        frequency_hz: samples.iter().map(|s| s.condition.frequency_hz).collect(),
    };
    (input, target)
}

fn check_targets(model: &Model<f32>, samples: &[Sample]) -> Result<()> {
    let p = model.cfg.output_side();
    let r = model.cfg.embed.resolution;
    for s in samples {
        if s.target_db.len() != p * p || s.rgb.dim() != (3, r, r) || s.depth.dim() != (1, r, r) {
            return Err(Error::ShapeMismatch(format!(
                "sample {} does not match the model (images {r}, output {p})",
                s.id
            )));
        }
    }
    Ok(())
}

fn snapshot(model: &Model<f32>) -> [ParamStore<f32>; 3] {
    let [a, b, c] = model.stores();
    [a.clone(), b.clone(), c.clone()]
}

fn restore(model: &mut Model<f32>, s: [ParamStore<f32>; 3]) {
    let [a, b, c] = s;
    model.embed.store = a;
    model.backbone.store = b;
    model.decoder.store = c;
}

/// Mean squared error on `[0, 1]` targets in evaluation mode.
pub fn evaluate_mse(model: &mut Model<f32>, samples: &[Sample], batch: usize) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (x, t) = make_batch(&refs);
        let y = model.forward(&x, Mode::Eval)?;
        sum += (&y - &t).iter().map(|&d| (d as f64) * (d as f64)).sum::<f64>();
        n += t.len();
    }
    Ok(sum / n.max(1) as f64)
}

/// Adam on the mean squared error. On return the model holds the weights of
/// the epoch with the lowest validation MSE, or the final weights when
/// `val` is empty.
pub fn train(model: &mut Model<f32>, train_set: &[Sample], val: &[Sample], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptySplit("training split is empty".into()));
    }
    if train_set.len() < cfg.batch_size {
        return Err(Error::EmptySplit(format!(
            "{} training records are fewer than one batch of {}",
            train_set.len(),
            cfg.batch_size
        )));
    }
    check_targets(model, train_set)?;
    check_targets(model, val)?;
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut report = TrainReport {
        steps: 0,
        epochs_run: 0,
        best_epoch: 0,
        best_val_mse: None,
        train_mse: Vec::new(),
        val_mse: Vec::new(),
        metrics: Vec::new(),
    };
    let mut best: Option<[ParamStore<f32>; 3]> = None;
    'epochs: for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| report.steps >= m) {
                break 'epochs;
            }
            let refs: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (x, t) = make_batch(&refs);
            model.zero_grad();
            let y = model.forward(&x, Mode::Train)?;
            let diff = &y - &t;
            let loss = diff.iter().map(|&d| (d as f64) * (d as f64)).sum::<f64>() / diff.len() as f64;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    step: report.steps,
                    loss,
                });
            }
            model.backward(&(diff * (2.0 / t.len() as f32)));
            opt.step(&mut model.stores_mut());
            report.steps += 1;
            sum += loss * chunk.len() as f64;
            count += chunk.len();
        }
        if count == 0 {
            break;
        }
        report.epochs_run = epoch;
        let train_mse = sum / count as f64;
        report.train_mse.push(train_mse);
        report.metrics.push(MetricRecord {
            step: report.steps,
            split: "train".into(),
            metric: "mse".into(),
            value: train_mse,
        });
        if !val.is_empty() {
            let v = evaluate_mse(model, val, cfg.batch_size)?;
            report.val_mse.push(v);
            report.metrics.push(MetricRecord {
                step: report.steps,
                split: "val".into(),
                metric: "mse".into(),
                value: v,
            });
            if report.best_val_mse.is_none_or(|b| v < b) {
                report.best_val_mse = Some(v);
                report.best_epoch = epoch;
                best = Some(snapshot(model));
            }
        }
    }
    match best {
        Some(s) => restore(model, s),
        None => report.best_epoch = report.epochs_run,
    }
    Ok(report)
}

/// Pooled NMSE: summed squared error over summed squared ground truth.
pub fn nmse(pairs: &[(&[f64], &[f64])]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptySplit("no samples to evaluate".into()));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (pred, truth) in pairs {
        if pred.len() != truth.len() {
            return Err(Error::ShapeMismatch(format!("{} predictions for {} pixels", pred.len(), truth.len())));
        }
        for (p, t) in pred.iter().zip(truth.iter()) {
            num += (p - t) * (p - t);
            den += t * t;
        }
    }
    if den == 0.0 {
        return Err(Error::ZeroGroundTruth);
    }
    Ok(num / den)
}

/// Mean of per-sample NMSE ratios.
pub fn nmse_per_sample(pairs: &[(&[f64], &[f64])]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptySplit("no samples to evaluate".into()));
    }
    let mut total = 0.0;
    for p in pairs {
        total += nmse(std::slice::from_ref(p))?;
    }
    Ok(total / pairs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub nmse: f64,
    pub nmse_per_sample_mean: Option<f64>,
    pub per_condition: BTreeMap<String, f64>,
    pub n_test: usize,
    pub trainable_params: usize,
    pub total_params: usize,
    pub train_step_ms: Option<f64>,
    pub inference_ms: Option<f64>,
}

/// Predictions on the dB scale, one row per sample.
pub fn predict_db(model: &mut Model<f32>, samples: &[Sample], batch: usize) -> Result<Vec<Vec<f64>>> {
    check_targets(model, samples)?;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (x, _) = make_batch(&refs);
        let y = model.forward(&x, Mode::Eval)?;
        for row in y.rows() {
            out.push(row.iter().map(|&v| v as f64 * 255.0).collect());
        }
    }
    Ok(out)
}

pub fn evaluate_nmse(model: &mut Model<f32>, test: &[Sample], batch: usize) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::EmptySplit("test split is empty".into()));
    }
    let preds = predict_db(model, test, batch)?;
    let truths: Vec<Vec<f64>> = test.iter().map(|s| s.target_db.iter().map(|&v| v as f64).collect()).collect();
    let pairs: Vec<(&[f64], &[f64])> = preds.iter().zip(&truths).map(|(p, t)| (&p[..], &t[..])).collect();
    let mut groups: BTreeMap<String, Vec<(&[f64], &[f64])>> = BTreeMap::new();
    for (s, pair) in test.iter().zip(&pairs) {
        groups.entry(s.condition.key()).or_default().push(*pair);
    }
    let per_condition = groups
        .into_iter()
        .map(|(k, v)| nmse(&v).map(|x| (k, x)))
        .collect::<Result<_>>()?;
    let counts = model.counts();
    Ok(EvalReport {
        nmse: nmse(&pairs)?,
        nmse_per_sample_mean: Some(nmse_per_sample(&pairs)?),
        per_condition,
        n_test: test.len(),
        trainable_params: counts.trainable,
        total_params: counts.total,
        train_step_ms: None,
        inference_ms: None,
    })
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationArm {
    pub modalities: Modalities,
    pub nmse: Vec<f64>,
    pub median: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub arms: Vec<AblationArm>,
}

impl AblationReport {
    pub fn median_of(&self, m: Modalities) -> Option<f64> {
        self.arms.iter().find(|a| a.modalities == m).map(|a| a.median)
    }
}

/// Trains one model per (stream set, seed), identical except for the fused
/// streams, and reports test NMSE.
pub fn ablate_modalities(
    base: &ModelConfig,
    train_set: &[Sample],
    val: &[Sample],
    test: &[Sample],
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<AblationReport> {
    let mut arms = Vec::new();
    for m in [Modalities::RGB, Modalities::DEPTH, Modalities::RGBD] {
        let mut scores = Vec::new();
        for &seed in seeds {
            let mut mc = base.clone().with_modalities(m);
            mc.seed = seed;
            let mut model = Model::<f32>::new(&mc)?;
            train(&mut model, train_set, val, &TrainConfig { seed, ..cfg.clone() })?;
            scores.push(evaluate_nmse(&mut model, test, cfg.batch_size)?.nmse);
        }
        arms.push(AblationArm {
            modalities: m,
            median: median(&scores),
            nmse: scores,
        });
    }
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        arms,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferPlan {
    pub source: Vec<ConditionTag>,
    pub target: ConditionTag,
    pub k_list: Vec<usize>,
    pub finetune_epochs: usize,
    pub seeds: Vec<u64>,
}

impl TransferPlan {
    pub fn validate(&self) -> Result<()> {
        if self.source.contains(&self.target) {
            return Err(Error::InvalidCondition(format!("target {} is also a source", self.target)));
        }
        if self.k_list.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("k_list must be strictly ascending".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("transfer needs at least one seed".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferPoint {
    pub k: usize,
    pub nmse: Vec<f64>,
    pub median: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferCurve {
    pub target: ConditionTag,
    pub points: Vec<TransferPoint>,
}

impl TransferCurve {
    pub fn at(&self, k: usize) -> Option<&TransferPoint> {
        self.points.iter().find(|p| p.k == k)
    }
}

/// For every `k`, fine-tunes a fresh copy of `source` on `k` records drawn
/// from `target_pool` and evaluates on `target_test`. `k = 0` is the source
/// model evaluated as is.
pub fn few_shot_transfer(
    source: &Model<f32>,
    plan: &TransferPlan,
    target_pool: &[Sample],
    target_test: &[Sample],
    cfg: &TrainConfig,
) -> Result<TransferCurve> {
    plan.validate()?;
    let needed = plan.k_list.iter().copied().max().unwrap_or(0);
    if target_pool.len() < needed {
        return Err(Error::InsufficientTargetSamples {
            needed,
            available: target_pool.len(),
        });
    }
    let test_ids: BTreeSet<&str> = target_test.iter().map(|s| s.id.as_str()).collect();
    if let Some(s) = target_pool.iter().find(|s| test_ids.contains(s.id.as_str())) {
        return Err(Error::InvalidCondition(format!("test record {} is in the fine-tune pool", s.id)));
    }
    let zero_shot = evaluate_nmse(&mut source.clone(), target_test, cfg.batch_size)?.nmse;
    let mut points = Vec::new();
    for &k in &plan.k_list {
        let mut scores = Vec::new();
        for &seed in &plan.seeds {
            if k == 0 {
                scores.push(zero_shot);
                continue;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f00d);
            let mut idx: Vec<usize> = (0..target_pool.len()).collect();
            idx.shuffle(&mut rng);
            let subset: Vec<Sample> = idx[..k].iter().map(|&i| target_pool[i].clone()).collect();
            let mut model = source.clone();
            let ft = TrainConfig {
                batch_size: cfg.batch_size.min(k),
                epochs: plan.finetune_epochs,
                seed,
                ..cfg.clone()
            };
            train(&mut model, &subset, &[], &ft)?;
            scores.push(evaluate_nmse(&mut model, target_test, cfg.batch_size)?.nmse);
        }
        points.push(TransferPoint {
            k,
            median: median(&scores),
            nmse: scores,
        });
    }
    Ok(TransferCurve {
        target: plan.target,
        points,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub counts: ParamCounts,
    pub train_step_ms: Option<f64>,
    pub inference_ms: Option<f64>,
    pub timing_batch: usize,
    pub timing_steps: usize,
}

/// Parameter counts by enumeration and, when `steps > 0`, mean wall time of
/// a training step and of an inference pass on synthetic inputs after one
/// warm-up pass. Timing runs on a copy of the model.
pub fn report_costs(model: &Model<f32>, steps: usize, batch: usize) -> Result<CostReport> {
    let counts = model.counts();
    let mut report = CostReport {
        counts,
        train_step_ms: None,
        inference_ms: None,
        timing_batch: batch,
        timing_steps: steps,
    };
    if steps == 0 {
        return Ok(report);
    }
    let mut m = model.clone();
    let r = m.cfg.embed.resolution;
    let p = m.cfg.output_side();
    let input = EmbedInput {
        rgb: Array4::from_shape_fn((batch, 3, r, r), |(b, c, y, x)| ((b + c + y * 3 + x * 5) % 17) as f32 / 17.0),
        depth: Array4::from_shape_fn((batch, 1, r, r), |(b, _, y, x)| ((b + y + x * 2) % 13) as f32 / 13.0),
        frequency_hz: vec![28e9; batch],
    };
    let target = Array2::from_elem((batch, p * p), 0.5f32);
    let mut opt = Adam::new(AdamConfig::default());
    let mut step = |m: &mut Model<f32>| -> Result<()> {
        m.zero_grad();
        let y = m.forward(&input, Mode::Train)?;
        m.backward(&((&y - &target) * (2.0 / target.len() as f32)));
        opt.step(&mut m.stores_mut());
        Ok(())
    };
    step(&mut m)?;
    let t0 = Instant::now();
    for _ in 0..steps {
        step(&mut m)?;
    }
    report.train_step_ms = Some(t0.elapsed().as_secs_f64() * 1e3 / steps as f64);
    m.forward(&input, Mode::Eval)?;
    let t0 = Instant::now();
    for _ in 0..steps {
        m.forward(&input, Mode::Eval)?;
    }
    report.inference_ms = Some(t0.elapsed().as_secs_f64() * 1e3 / steps as f64);
    Ok(report)
}
