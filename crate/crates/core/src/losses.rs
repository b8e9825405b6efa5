//! Branch cross-entropies, the goal remap, the consistency losses and their
//! weighted combination, each with analytic gradients w.r.t. the logits.
//!
//! The consistency loss maps the fine-action distribution `p` onto goals
//! through the co-occurrence conditional, `ĝ[l] = Σ_c P(l | c) · p[c]`, and
//! scores `ĝ` against the true goal. Every log is taken of a probability
//! floored at `log_clamp_epsilon`; below that floor the consistency terms
//! contribute no gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::CooccurrenceModel;
use crate::model::ForwardOutput;

pub const DEFAULT_LOG_CLAMP: f64 = 1e-12;
pub const DEFAULT_LAMBDA_CONS: f64 = 1.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConsistencyVariant {
    /// Cross-entropy of the remapped distribution against the true goal.
    #[default]
    GroundTruthCe,
    /// `KL(goal-branch prediction ‖ remapped distribution)`.
    PredictedKl,
}

impl std::fmt::Display for ConsistencyVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ConsistencyVariant::GroundTruthCe => "ground-truth-ce",
            ConsistencyVariant::PredictedKl => "predicted-kl",
        })
    }
}

fn d_lambda() -> f64 {
    DEFAULT_LAMBDA_CONS
}
fn d_true() -> bool {
    true
}
fn d_variant() -> ConsistencyVariant {
    ConsistencyVariant::GroundTruthCe
}
fn d_clamp() -> f64 {
    DEFAULT_LOG_CLAMP
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Consistency weight shared by all goal levels...
    #[serde(default = "d_lambda")]
    pub lambda_cons: f64,
    /// ...unless overridden per level.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_cons_per_level: Option<Vec<f64>>,
    #[serde(default = "d_true")]
    pub use_goal_loss: bool,
    #[serde(default = "d_true")]
    pub use_consistency: bool,
    #[serde(default = "d_variant")]
    pub consistency_variant: ConsistencyVariant,
    #[serde(default = "d_clamp")]
    pub log_clamp_epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_cons: DEFAULT_LAMBDA_CONS,
            lambda_cons_per_level: None,
            use_goal_loss: true,
            use_consistency: true,
            consistency_variant: ConsistencyVariant::GroundTruthCe,
            log_clamp_epsilon: DEFAULT_LOG_CLAMP,
        }
    }
}

impl LossConfig {
    pub fn validate(&self, num_levels: usize) -> Result<()> {
        let check = |field: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(field, format!("{v} must be finite and non-negative")))
            }
        };
        check("loss.lambda_cons", self.lambda_cons)?;
        if let Some(per_level) = &self.lambda_cons_per_level {
            if per_level.len() != num_levels {
                return Err(Error::config(
                    "loss.lambda_cons_per_level",
                    format!("{} values for {num_levels} goal levels", per_level.len()),
                ));
            }
            for &v in per_level {
                check("loss.lambda_cons_per_level", v)?;
            }
        }
        if !(self.log_clamp_epsilon > 0.0 && self.log_clamp_epsilon <= 1e-3) {
            return Err(Error::config("loss.log_clamp_epsilon", "must lie in (0, 1e-3]"));
        }
        Ok(())
    }

    pub fn lambda_for(&self, level: usize) -> f64 {
        self.lambda_cons_per_level
            .as_ref()
            .and_then(|v| v.get(level).copied())
            .unwrap_or(self.lambda_cons)
    }
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

/// Pulls a gradient w.r.t. softmax probabilities back onto the logits.
fn softmax_backward(probs: &[f64], grad_probs: &[f64]) -> Vec<f64> {
    let inner: f64 = probs.iter().zip(grad_probs).map(|(p, g)| p * g).sum();
    probs
        .iter()
        .zip(grad_probs)
        .map(|(p, g)| p * (g - inner))
        .collect()
}

fn check_label(label: usize, n: usize, what: &str) -> Result<()> {
    if label < n {
        Ok(())
    } else {
        Err(Error::Input(format!("{what} label {label} outside [0, {n})")))
    }
}

/// `−log softmax(logits)[label]`, with gradient `softmax − onehot`.
pub fn cross_entropy(logits: &[f64], label: usize, log_clamp_epsilon: f64) -> Result<(f64, Vec<f64>)> {
    check_label(label, logits.len(), "target")?;
    let mut grad = softmax(logits);
    let loss = -grad[label].max(log_clamp_epsilon).ln();
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// A `|L| × |C|` conditional table, row-major, every column on the simplex.
#[derive(Debug, Clone, Copy)]
pub struct ConditionalTable<'a> {
    data: &'a [f64],
    num_goals: usize,
    num_actions: usize,
}

impl<'a> ConditionalTable<'a> {
    /// Wraps a raw table, checking that every column is a distribution.
    pub fn new(data: &'a [f64], num_goals: usize, num_actions: usize) -> Result<Self> {
        if data.len() != num_goals * num_actions || num_goals == 0 || num_actions == 0 {
            return Err(Error::dim("conditional table", num_goals * num_actions, data.len()));
        }
        for c in 0..num_actions {
            let mut sum = 0.0;
            for l in 0..num_goals {
                let v = data[l * num_actions + c];
                if v.is_nan() || v < 0.0 {
                    return Err(Error::Input(format!("conditional entry ({l}, {c}) is {v}")));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Input(format!("conditional column {c} sums to {sum}")));
            }
        }
        Ok(ConditionalTable {
            data,
            num_goals,
            num_actions,
        })
    }

    pub fn num_goals(&self) -> usize {
        self.num_goals
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn row(&self, goal: usize) -> &'a [f64] {
        &self.data[goal * self.num_actions..(goal + 1) * self.num_actions]
    }

    fn remap(&self, probs: &[f64]) -> Vec<f64> {
        (0..self.num_goals)
            .map(|l| self.row(l).iter().zip(probs).map(|(r, p)| r * p).sum())
            .collect()
    }

    /// `Rᵀ · v`: pulls a gradient w.r.t. goal probabilities onto actions.
    fn transpose_mul(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.num_actions];
        for (l, &vl) in v.iter().enumerate() {
            if vl == 0.0 {
                continue;
            }
            for (o, r) in out.iter_mut().zip(self.row(l)) {
                *o += vl * r;
            }
        }
        out
    }
}

impl<'a> From<&'a CooccurrenceModel> for ConditionalTable<'a> {
    fn from(model: &'a CooccurrenceModel) -> Self {
        ConditionalTable {
            data: model.conditional_matrix(),
            num_goals: model.num_goals(),
            num_actions: model.num_actions(),
        }
    }
}

/// Marginalises fine-action probabilities onto goals.
pub fn remap_to_goal(fine_probs: &[f64], conditional: ConditionalTable<'_>) -> Result<Vec<f64>> {
    if fine_probs.len() != conditional.num_actions {
        return Err(Error::dim("remap input", conditional.num_actions, fine_probs.len()));
    }
    let sum: f64 = fine_probs.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || fine_probs.iter().any(|&p| p.is_nan() || p < 0.0) {
        return Err(Error::Input(format!("fine probabilities are not a distribution (sum {sum})")));
    }
    Ok(conditional.remap(fine_probs))
}

/// Cross-entropy between the remapped goal distribution and the true goal.
pub fn consistency_loss_ce(
    fine_logits: &[f64],
    conditional: ConditionalTable<'_>,
    true_goal: usize,
    log_clamp_epsilon: f64,
) -> Result<(f64, Vec<f64>)> {
    if fine_logits.len() != conditional.num_actions {
        return Err(Error::dim("consistency logits", conditional.num_actions, fine_logits.len()));
    }
    check_label(true_goal, conditional.num_goals, "goal")?;
    let probs = softmax(fine_logits);
    let row = conditional.row(true_goal);
    let remapped: f64 = row.iter().zip(&probs).map(|(r, p)| r * p).sum();
    if remapped <= log_clamp_epsilon {
        return Ok((-log_clamp_epsilon.ln(), vec![0.0; fine_logits.len()]));
    }
    let grad_probs: Vec<f64> = row.iter().map(|r| -r / remapped).collect();
    Ok((-remapped.ln(), softmax_backward(&probs, &grad_probs)))
}

/// Floors at `eps` and renormalises. Returns the result, the pre-floor mask
/// and the normaliser.
fn floor_normalize(v: &[f64], eps: f64) -> (Vec<f64>, Vec<bool>, f64) {
    let floored: Vec<f64> = v.iter().map(|&x| x.max(eps)).collect();
    let active: Vec<bool> = v.iter().map(|&x| x > eps).collect();
    let total: f64 = floored.iter().sum();
    (floored.iter().map(|x| x / total).collect(), active, total)
}

/// Chains a gradient w.r.t. the output of [`floor_normalize`] to its input.
fn floor_normalize_backward(normalized: &[f64], active: &[bool], total: f64, grad: &[f64]) -> Vec<f64> {
    let inner: f64 = grad.iter().zip(normalized).map(|(g, x)| g * x).sum();
    grad.iter()
        .zip(active)
        .map(|(g, &on)| if on { (g - inner) / total } else { 0.0 })
        .collect()
}

/// `KL(softmax(goal_logits) ‖ ĝ)` with `ĝ` remapped from the fine branch.
///
/// Returns the loss and the gradients w.r.t. the fine and the goal logits.
pub fn consistency_loss_kl(
    fine_logits: &[f64],
    conditional: ConditionalTable<'_>,
    goal_logits: &[f64],
    log_clamp_epsilon: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if fine_logits.len() != conditional.num_actions {
        return Err(Error::dim("consistency fine logits", conditional.num_actions, fine_logits.len()));
    }
    if goal_logits.len() != conditional.num_goals {
        return Err(Error::dim("consistency goal logits", conditional.num_goals, goal_logits.len()));
    }
    let fine_probs = softmax(fine_logits);
    let goal_probs = softmax(goal_logits);
    let remapped = conditional.remap(&fine_probs);

    let (target, target_active, target_total) = floor_normalize(&goal_probs, log_clamp_epsilon);
    let (approx, approx_active, approx_total) = floor_normalize(&remapped, log_clamp_epsilon);

    let loss: f64 = target
        .iter()
        .zip(&approx)
        .map(|(t, a)| t * (t.ln() - a.ln()))
        .sum();

    let grad_target: Vec<f64> = target.iter().zip(&approx).map(|(t, a)| t.ln() + 1.0 - a.ln()).collect();
    let grad_approx: Vec<f64> = target.iter().zip(&approx).map(|(t, a)| -t / a).collect();

    let grad_goal_probs = floor_normalize_backward(&target, &target_active, target_total, &grad_target);
    let grad_remapped = floor_normalize_backward(&approx, &approx_active, approx_total, &grad_approx);
    let grad_fine_probs = conditional.transpose_mul(&grad_remapped);

    Ok((
        loss,
        softmax_backward(&fine_probs, &grad_fine_probs),
        softmax_backward(&goal_probs, &grad_goal_probs),
    ))
}

/// Per-example loss terms and the gradient of `total` w.r.t. every logit.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub fine_ce: f64,
    pub goal_ce: Vec<f64>,
    pub consistency: Vec<f64>,
    pub total: f64,
    pub grad_fine_logits: Vec<f64>,
    pub grad_goal_logits: Vec<Vec<f64>>,
}

/// Fine CE, plus goal CE and weighted consistency per goal level when enabled.
pub fn total_loss(
    output: &ForwardOutput,
    fine_label: usize,
    goal_labels: &[usize],
    hierarchy: &[CooccurrenceModel],
    config: &LossConfig,
) -> Result<LossBreakdown> {
    let levels = output.goal_logits.len();
    if goal_labels.len() != levels {
        return Err(Error::dim("goal labels", levels, goal_labels.len()));
    }
    if config.use_consistency && hierarchy.len() != levels {
        return Err(Error::config(
            "hierarchy",
            format!(
                "consistency needs one co-occurrence model per goal level ({levels}), got {}",
                hierarchy.len()
            ),
        ));
    }
    let eps = config.log_clamp_epsilon;
    let (fine_ce, mut grad_fine) = cross_entropy(&output.fine_logits, fine_label, eps)?;
    let mut total = fine_ce;
    let mut goal_ce = vec![0.0; levels];
    let mut consistency = vec![0.0; levels];
    let mut grad_goal: Vec<Vec<f64>> = output.goal_logits.iter().map(|g| vec![0.0; g.len()]).collect();

    for level in 0..levels {
        let logits = &output.goal_logits[level];
        if config.use_goal_loss {
            let (loss, grad) = cross_entropy(logits, goal_labels[level], eps)?;
            goal_ce[level] = loss;
            total += loss;
            grad_goal[level] = grad;
        }
        if !config.use_consistency {
            continue;
        }
        let table = ConditionalTable::from(&hierarchy[level]);
        if table.num_actions() != output.fine_logits.len() || table.num_goals() != logits.len() {
            return Err(Error::config(
                "hierarchy",
                format!("co-occurrence model for level {level} does not match the model dimensions"),
            ));
        }
        let lambda = config.lambda_for(level);
        match config.consistency_variant {
            ConsistencyVariant::GroundTruthCe => {
                let (loss, grad) = consistency_loss_ce(&output.fine_logits, table, goal_labels[level], eps)?;
                consistency[level] = loss;
                if lambda != 0.0 {
                    total += lambda * loss;
                    crate::linalg::axpy(lambda, &grad, &mut grad_fine);
                }
            }
            ConsistencyVariant::PredictedKl => {
                let (loss, grad_f, grad_g) = consistency_loss_kl(&output.fine_logits, table, logits, eps)?;
                consistency[level] = loss;
                if lambda != 0.0 {
                    total += lambda * loss;
                    crate::linalg::axpy(lambda, &grad_f, &mut grad_fine);
                    crate::linalg::axpy(lambda, &grad_g, &mut grad_goal[level]);
                }
            }
        }
    }
    Ok(LossBreakdown {
        fine_ce,
        goal_ce,
        consistency,
        total,
        grad_fine_logits: grad_fine,
        grad_goal_logits: grad_goal,
    })
}
