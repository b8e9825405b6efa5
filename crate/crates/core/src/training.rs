//! Training loop and the loss-component, consistency-formulation and
//! consistency-weight experiments.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{batches, Dataset, Split};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalReport, LabelKind, Protocol, Subset, DEFAULT_TOP_K};
use crate::hierarchy::{build_cooccurrence, CooccurrenceModel, DEFAULT_SMOOTHING};
use crate::losses::{total_loss, ConsistencyVariant, LossConfig};
use crate::model::{backward_into, forward_pooled, init_params, ModelParams, DEFAULT_HIDDEN_WIDTH};
use crate::optim::Adam;

fn d_batch() -> usize {
    64
}
fn d_epochs() -> usize {
    30
}
fn d_lr() -> f64 {
    1e-3
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_adam_eps() -> f64 {
    1e-8
}
fn d_hidden() -> usize {
    DEFAULT_HIDDEN_WIDTH
}
fn d_eval_every() -> usize {
    10
}
fn d_top_k() -> usize {
    DEFAULT_TOP_K
}
fn d_smoothing() -> f64 {
    DEFAULT_SMOOTHING
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "d_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "d_adam_eps")]
    pub adam_epsilon: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default = "d_hidden")]
    pub hidden_width: usize,
    /// Evaluate on the validation split every this many epochs (0: only at the end).
    #[serde(default = "d_eval_every")]
    pub eval_every: usize,
    #[serde(default = "d_top_k")]
    pub top_k: usize,
    /// Smoothing used when the co-occurrence statistics are built on the fly.
    #[serde(default = "d_smoothing")]
    pub smoothing_epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialise")
    }
}

impl TrainConfig {
    pub fn validate(&self, num_levels: usize) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        for (field, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::config(field, format!("{b} outside (0, 1)")));
            }
        }
        if self.adam_epsilon.is_nan() || self.adam_epsilon <= 0.0 {
            return Err(Error::config("adam_epsilon", "must be positive"));
        }
        if self.hidden_width == 0 {
            return Err(Error::config("hidden_width", "must be positive"));
        }
        if self.top_k == 0 {
            return Err(Error::config("top_k", "must be at least 1"));
        }
        if !(self.smoothing_epsilon >= 0.0 && self.smoothing_epsilon.is_finite()) {
            return Err(Error::config("smoothing_epsilon", "must be finite and non-negative"));
        }
        self.loss.validate(num_levels)
    }
}

/// Example-averaged loss terms over one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub fine_ce: f64,
    pub goal_ce: Vec<f64>,
    pub consistency: Vec<f64>,
    pub total: f64,
    /// Sum of the per-example totals (the batch-summed objective).
    pub total_sum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossSummary,
    /// Not part of any written artifact, so outputs stay reproducible.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub report: EvalReport,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub evals: Vec<EvalRecord>,
}

impl TrainHistory {
    pub fn final_report(&self) -> Option<&EvalReport> {
        self.evals.last().map(|e| &e.report)
    }

    /// Per-view overall action recall of the last evaluation.
    pub fn final_action_recall(&self) -> Option<f64> {
        self.final_report().map(EvalReport::action_recall)
    }

    /// One row per epoch: every loss term, then every recall cell (blank when
    /// not evaluated at that epoch or absent).
    pub fn to_csv(&self) -> String {
        let levels = self.epochs.first().map(|e| e.loss.goal_ce.len()).unwrap_or(0);
        let mut header = String::from("epoch,fine_ce");
        for l in 0..levels {
            let _ = write!(header, ",goal_ce_{l}");
        }
        for l in 0..levels {
            let _ = write!(header, ",consistency_{l}");
        }
        header.push_str(",total,total_sum");
        let mut cells = Vec::new();
        for kind in LabelKind::ALL {
            for protocol in Protocol::ALL {
                for subset in Subset::ALL {
                    cells.push((kind, protocol, subset));
                    let _ = write!(header, ",recall_{}_{}_{}", kind.as_str(), protocol.as_str(), subset.as_str());
                }
            }
        }
        let mut out = header;
        out.push('\n');
        for e in &self.epochs {
            let _ = write!(out, "{},{}", e.epoch, e.loss.fine_ce);
            for v in e.loss.goal_ce.iter().chain(&e.loss.consistency) {
                let _ = write!(out, ",{v}");
            }
            let _ = write!(out, ",{},{}", e.loss.total, e.loss.total_sum);
            let report = self.evals.iter().find(|r| r.epoch == e.epoch).map(|r| &r.report);
            for &(k, p, s) in &cells {
                match report.and_then(|r| r.get(k, p, s)) {
                    Some(c) => {
                        let _ = write!(out, ",{}", c.recall);
                    }
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((epoch as u64).wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Checks that `hierarchy` is exactly the training-split statistics.
fn check_hierarchy(dataset: &Dataset, hierarchy: &[CooccurrenceModel]) -> Result<()> {
    let space = dataset.label_space();
    if hierarchy.len() != space.num_goal_levels() {
        return Err(Error::config(
            "hierarchy",
            format!("{} co-occurrence models for {} goal levels", hierarchy.len(), space.num_goal_levels()),
        ));
    }
    let manifest = &dataset.manifest;
    for (level, given) in hierarchy.iter().enumerate() {
        let pairs: Vec<(usize, usize)> = manifest
            .split_ids(Split::Train)
            .iter()
            .map(|&i| (manifest.records[i].fine_label, manifest.records[i].goal_labels[level]))
            .collect();
        if *given.counts() != build_cooccurrence(&pairs, space, level)? {
            return Err(Error::Data(format!(
                "co-occurrence counts for goal level {level} do not match the training split"
            )));
        }
    }
    Ok(())
}

#[cfg(not(target_arch = "wasm32"))]
fn timer() -> impl FnOnce() -> f64 {
    let start = std::time::Instant::now();
    move || start.elapsed().as_secs_f64()
}

#[cfg(target_arch = "wasm32")]
fn timer() -> impl FnOnce() -> f64 {
    || 0.0
}

/// Trains the two-branch model with Adam on batch-mean losses.
///
/// `hierarchy` must hold the co-occurrence statistics of the training split
/// (one model per goal level); it may be empty when consistency is disabled.
/// Evaluation uses the validation split and only the fine branch.
pub fn train(config: &TrainConfig, dataset: &Dataset, hierarchy: &[CooccurrenceModel]) -> Result<(ModelParams, TrainHistory)> {
    train_with_progress(config, dataset, hierarchy, |_| {})
}

/// [`train`], calling `on_epoch` after every epoch.
pub fn train_with_progress(
    config: &TrainConfig,
    dataset: &Dataset,
    hierarchy: &[CooccurrenceModel],
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(ModelParams, TrainHistory)> {
    let space = dataset.label_space();
    let levels = space.num_goal_levels();
    config.validate(levels)?;
    if config.loss.use_consistency || !hierarchy.is_empty() {
        check_hierarchy(dataset, hierarchy)?;
    }
    let manifest = &dataset.manifest;
    let mut params = init_params(space, manifest.feature_dim, config.hidden_width, config.seed)?;
    let mut adam = Adam::new(config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_epsilon);
    let mut history = TrainHistory::default();
    let has_val = !manifest.splits.val.is_empty();

    // Mean-pooled inputs, indexed by record; identical to what `forward` computes.
    let mut pooled: Vec<Vec<f64>> = vec![Vec::new(); manifest.records.len()];
    for &i in &manifest.splits.train {
        pooled[i] = dataset.sequence(i).pooled();
    }

    for epoch in 1..=config.epochs {
        let elapsed = timer();
        let mut sums = LossSummary {
            fine_ce: 0.0,
            goal_ce: vec![0.0; levels],
            consistency: vec![0.0; levels],
            total: 0.0,
            total_sum: 0.0,
        };
        let mut seen = 0usize;
        for batch in batches(manifest, Split::Train, config.batch_size, epoch_seed(config.seed, epoch))? {
            let mut grads = params.zeros_like();
            let scale = 1.0 / batch.len() as f64;
            for &i in &batch {
                let record = &manifest.records[i];
                let out = forward_pooled(&params, &pooled[i]);
                let b = total_loss(&out, record.fine_label, &record.goal_labels, hierarchy, &config.loss)?;
                backward_into(&mut grads, &params, &pooled[i], &out, &b.grad_fine_logits, &b.grad_goal_logits, scale)?;
                sums.fine_ce += b.fine_ce;
                for l in 0..levels {
                    sums.goal_ce[l] += b.goal_ce[l];
                    sums.consistency[l] += b.consistency[l];
                }
                sums.total_sum += b.total;
            }
            seen += batch.len();
            adam.step(&mut params, &grads);
        }
        if !params.is_finite() {
            return Err(Error::Check(format!("parameters became non-finite in epoch {epoch}")));
        }
        let n = seen as f64;
        let record = EpochRecord {
            epoch,
            loss: LossSummary {
                fine_ce: sums.fine_ce / n,
                goal_ce: sums.goal_ce.iter().map(|v| v / n).collect(),
                consistency: sums.consistency.iter().map(|v| v / n).collect(),
                total: sums.total_sum / n,
                total_sum: sums.total_sum,
            },
            wall_clock_secs: elapsed(),
        };
        on_epoch(&record);
        history.epochs.push(record);
        let due = config.eval_every > 0 && epoch % config.eval_every == 0;
        if has_val && (due || epoch == config.epochs) {
            history.evals.push(EvalRecord {
                epoch,
                report: evaluate(&params, dataset, Split::Val, config.top_k)?,
            });
        }
    }
    if config.epochs == 0 && has_val {
        history.evals.push(EvalRecord {
            epoch: 0,
            report: evaluate(&params, dataset, Split::Val, config.top_k)?,
        });
    }
    Ok((params, history))
}

/// One configuration of an experiment and its per-seed results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub name: String,
    pub loss: LossConfig,
    /// `(seed, per-view overall class-mean top-k action recall)`.
    pub runs: Vec<(u64, f64)>,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentTable {
    pub rows: Vec<ExperimentRow>,
}

impl ExperimentTable {
    pub fn row(&self, name: &str) -> Option<&ExperimentRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// `name,mean,sd,runs`, one line per configuration.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("name,mean,sd,runs\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.name, r.mean, r.sd, r.runs.len());
        }
        out
    }

    /// `name,seed,recall`, one line per training run.
    pub fn runs_csv(&self) -> String {
        let mut out = String::from("name,seed,recall\n");
        for r in &self.rows {
            for (seed, recall) in &r.runs {
                let _ = writeln!(out, "{},{},{}", r.name, seed, recall);
            }
        }
        out
    }
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn final_recall(config: &TrainConfig, dataset: &Dataset, hierarchy: &[CooccurrenceModel]) -> Result<f64> {
    let hierarchy = if config.loss.use_consistency { hierarchy } else { &[] };
    let (_, history) = train(config, dataset, hierarchy)?;
    history
        .final_action_recall()
        .filter(|r| r.is_finite())
        .ok_or_else(|| Error::Input("experiments need a non-empty validation split".into()))
}

/// Trains every `(configuration, seed)` pair; independent runs may execute
/// concurrently, results are merged in declaration order.
pub fn run_grid(
    base: &TrainConfig,
    variants: &[(String, LossConfig)],
    dataset: &Dataset,
    hierarchy: &[CooccurrenceModel],
    seeds: &[u64],
) -> Result<ExperimentTable> {
    if seeds.is_empty() {
        return Err(Error::config("seeds", "at least one seed is required"));
    }
    check_hierarchy(dataset, hierarchy)?;
    let jobs: Vec<(usize, u64)> = (0..variants.len())
        .flat_map(|v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let run = |&(v, seed): &(usize, u64)| {
        let config = TrainConfig {
            seed,
            loss: variants[v].1.clone(),
            ..base.clone()
        };
        final_recall(&config, dataset, hierarchy)
    };
    #[cfg(feature = "parallel")]
    let results: Vec<Result<f64>> = {
        use rayon::prelude::*;
        jobs.par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<Result<f64>> = jobs.iter().map(run).collect();

    let mut rows: Vec<ExperimentRow> = variants
        .iter()
        .map(|(name, loss)| ExperimentRow {
            name: name.clone(),
            loss: loss.clone(),
            runs: Vec::new(),
            mean: 0.0,
            sd: 0.0,
        })
        .collect();
    for (&(v, seed), result) in jobs.iter().zip(results) {
        rows[v].runs.push((seed, result?));
    }
    for row in &mut rows {
        let values: Vec<f64> = row.runs.iter().map(|r| r.1).collect();
        (row.mean, row.sd) = mean_sd(&values);
    }
    Ok(ExperimentTable { rows })
}

pub const ROW_FINE: &str = "fine";
pub const ROW_FINE_GOAL: &str = "fine+goal";
pub const ROW_FULL: &str = "fine+goal+cons";
pub const ROW_CE: &str = "ground-truth-ce";
pub const ROW_KL: &str = "predicted-kl";

/// Fine only, fine + goal, and fine + goal + consistency.
pub fn run_component_ablation(
    base: &TrainConfig,
    dataset: &Dataset,
    hierarchy: &[CooccurrenceModel],
    seeds: &[u64],
) -> Result<ExperimentTable> {
    let with = |goal: bool, cons: bool| LossConfig {
        use_goal_loss: goal,
        use_consistency: cons,
        consistency_variant: ConsistencyVariant::GroundTruthCe,
        ..base.loss.clone()
    };
    let variants = vec![
        (ROW_FINE.to_string(), with(false, false)),
        (ROW_FINE_GOAL.to_string(), with(true, false)),
        (ROW_FULL.to_string(), with(true, true)),
    ];
    run_grid(base, &variants, dataset, hierarchy, seeds)
}

/// Ground-truth cross-entropy against goal-branch KL consistency.
pub fn run_formulation_ablation(
    base: &TrainConfig,
    dataset: &Dataset,
    hierarchy: &[CooccurrenceModel],
    seeds: &[u64],
) -> Result<ExperimentTable> {
    let with = |variant| LossConfig {
        use_goal_loss: true,
        use_consistency: true,
        consistency_variant: variant,
        ..base.loss.clone()
    };
    let variants = vec![
        (ROW_CE.to_string(), with(ConsistencyVariant::GroundTruthCe)),
        (ROW_KL.to_string(), with(ConsistencyVariant::PredictedKl)),
    ];
    run_grid(base, &variants, dataset, hierarchy, seeds)
}

/// One row per consistency weight, named `lambda=<value>`.
pub fn run_lambda_sweep(
    base: &TrainConfig,
    dataset: &Dataset,
    hierarchy: &[CooccurrenceModel],
    lambdas: &[f64],
    seeds: &[u64],
) -> Result<ExperimentTable> {
    if lambdas.is_empty() {
        return Err(Error::config("lambdas", "at least one value is required"));
    }
    let variants: Vec<(String, LossConfig)> = lambdas
        .iter()
        .map(|&lambda| {
            (
                format!("lambda={lambda}"),
                LossConfig {
                    use_goal_loss: true,
                    use_consistency: true,
                    lambda_cons: lambda,
                    lambda_cons_per_level: None,
                    ..base.loss.clone()
                },
            )
        })
        .collect();
    run_grid(base, &variants, dataset, hierarchy, seeds)
}
