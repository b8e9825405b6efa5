//! Central finite-difference checks of every analytic gradient, run on
//! random small instances. Backs the `gradcheck` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::dataset::FeatureSequence;
use crate::error::Result;
use crate::hierarchy::{derive_conditional, CooccurrenceModel, CountMatrix, GoalLevel, LabelSpace};
use crate::linalg::dot;
use crate::losses::{
    consistency_loss_ce, consistency_loss_kl, cross_entropy, total_loss, ConditionalTable, ConsistencyVariant,
    LossConfig, DEFAULT_LOG_CLAMP,
};
use crate::model::{backward, forward, init_params, ForwardOutput};

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOLERANCE: f64 = 1e-4;
pub const ABS_FLOOR: f64 = 1e-7;
pub const MAX_DIM: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckSummary {
    pub name: &'static str,
    pub instances: usize,
    pub components: usize,
    pub failures: usize,
    /// Largest relative error over components whose magnitude reaches the floor.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

impl CheckSummary {
    fn new(name: &'static str) -> Self {
        CheckSummary {
            name,
            instances: 0,
            components: 0,
            failures: 0,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
        }
    }

    /// Records one analytic/numeric pair. A component fails when both its
    /// relative error reaches the tolerance and its absolute error the floor.
    fn record(&mut self, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let rel = if abs == 0.0 { 0.0 } else { abs / analytic.abs().max(numeric.abs()) };
        self.components += 1;
        self.max_abs_error = self.max_abs_error.max(abs);
        if analytic.abs().max(numeric.abs()) >= ABS_FLOOR {
            self.max_rel_error = self.max_rel_error.max(rel);
        }
        if abs >= ABS_FLOOR && rel >= REL_TOLERANCE {
            self.failures += 1;
        }
    }

    fn compare(&mut self, analytic: &[f64], numeric: &[f64]) {
        self.instances += 1;
        for (&a, &n) in analytic.iter().zip(numeric) {
            self.record(a, n);
        }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Central differences of `f` at `x`.
pub fn numeric_gradient(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + FD_STEP;
            let up = f(&probe);
            probe[i] = orig - FD_STEP;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// A random co-occurrence model; some entries are zero, smoothing keeps
/// every column well defined.
fn random_model(rng: &mut ChaCha8Rng, goals: usize, actions: usize) -> CooccurrenceModel {
    let counts = (0..goals * actions)
        .map(|_| if rng.random::<f64>() < 0.3 { 0 } else { rng.random_range(1..20) })
        .collect();
    let counts = CountMatrix::from_counts(goals, actions, counts).expect("dims");
    let eps = if counts.total() == 0 { 1.0 } else { 1e-3 };
    derive_conditional(&counts, eps).expect("smoothed")
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.random_range(2..=MAX_DIM), rng.random_range(2..=MAX_DIM))
}

pub fn check_cross_entropy(rng: &mut ChaCha8Rng, instances: usize) -> Result<CheckSummary> {
    let mut s = CheckSummary::new("cross_entropy");
    for _ in 0..instances {
        let n = rng.random_range(2..=MAX_DIM);
        let logits = normal_vec(rng, n, 2.0);
        let label = rng.random_range(0..n);
        let (_, grad) = cross_entropy(&logits, label, DEFAULT_LOG_CLAMP)?;
        let num = numeric_gradient(&logits, |z| cross_entropy(z, label, DEFAULT_LOG_CLAMP).unwrap().0);
        s.compare(&grad, &num);
    }
    Ok(s)
}

pub fn check_consistency_ce(rng: &mut ChaCha8Rng, instances: usize) -> Result<CheckSummary> {
    let mut s = CheckSummary::new("consistency_loss_ce");
    for _ in 0..instances {
        let (actions, goals) = dims(rng);
        let model = random_model(rng, goals, actions);
        let table = ConditionalTable::from(&model);
        let logits = normal_vec(rng, actions, 2.0);
        let goal = rng.random_range(0..goals);
        let (_, grad) = consistency_loss_ce(&logits, table, goal, DEFAULT_LOG_CLAMP)?;
        let num = numeric_gradient(&logits, |z| {
            consistency_loss_ce(z, table, goal, DEFAULT_LOG_CLAMP).unwrap().0
        });
        s.compare(&grad, &num);
    }
    Ok(s)
}

pub fn check_consistency_kl(rng: &mut ChaCha8Rng, instances: usize) -> Result<CheckSummary> {
    let mut s = CheckSummary::new("consistency_loss_kl");
    for _ in 0..instances {
        let (actions, goals) = dims(rng);
        let model = random_model(rng, goals, actions);
        let table = ConditionalTable::from(&model);
        let fine = normal_vec(rng, actions, 2.0);
        let goal = normal_vec(rng, goals, 2.0);
        let (_, grad_fine, grad_goal) = consistency_loss_kl(&fine, table, &goal, DEFAULT_LOG_CLAMP)?;
        let num_fine = numeric_gradient(&fine, |z| {
            consistency_loss_kl(z, table, &goal, DEFAULT_LOG_CLAMP).unwrap().0
        });
        let num_goal = numeric_gradient(&goal, |z| {
            consistency_loss_kl(&fine, table, z, DEFAULT_LOG_CLAMP).unwrap().0
        });
        s.compare(&[grad_fine, grad_goal].concat(), &[num_fine, num_goal].concat());
    }
    Ok(s)
}

pub fn check_total_loss(rng: &mut ChaCha8Rng, instances: usize) -> Result<CheckSummary> {
    let mut s = CheckSummary::new("total_loss");
    for _ in 0..instances {
        let actions = rng.random_range(2..=MAX_DIM);
        let levels = rng.random_range(1..=2);
        let goal_sizes: Vec<usize> = (0..levels).map(|_| rng.random_range(2..=MAX_DIM)).collect();
        let hierarchy: Vec<CooccurrenceModel> = goal_sizes.iter().map(|&g| random_model(rng, g, actions)).collect();
        let config = LossConfig {
            lambda_cons: rng.random_range(0.1..5.0),
            use_goal_loss: rng.random::<bool>(),
            use_consistency: true,
            consistency_variant: if rng.random::<bool>() {
                ConsistencyVariant::GroundTruthCe
            } else {
                ConsistencyVariant::PredictedKl
            },
            ..LossConfig::default()
        };
        let fine_label = rng.random_range(0..actions);
        let goal_labels: Vec<usize> = goal_sizes.iter().map(|&g| rng.random_range(0..g)).collect();
        let mut flat = normal_vec(rng, actions, 2.0);
        for &g in &goal_sizes {
            flat.extend(normal_vec(rng, g, 2.0));
        }
        let unflatten = |z: &[f64]| {
            let mut goal_logits = Vec::with_capacity(levels);
            let mut at = actions;
            for &g in &goal_sizes {
                goal_logits.push(z[at..at + g].to_vec());
                at += g;
            }
            ForwardOutput {
                fine_logits: z[..actions].to_vec(),
                goal_logits,
                hidden: Vec::new(),
            }
        };
        let b = total_loss(&unflatten(&flat), fine_label, &goal_labels, &hierarchy, &config)?;
        let analytic: Vec<f64> = b
            .grad_fine_logits
            .iter()
            .chain(b.grad_goal_logits.iter().flatten())
            .copied()
            .collect();
        let num = numeric_gradient(&flat, |z| {
            total_loss(&unflatten(z), fine_label, &goal_labels, &hierarchy, &config)
                .unwrap()
                .total
        });
        s.compare(&analytic, &num);
    }
    Ok(s)
}

pub fn check_model_backward(rng: &mut ChaCha8Rng, instances: usize) -> Result<CheckSummary> {
    let mut s = CheckSummary::new("model_backward");
    for _ in 0..instances {
        let feature_dim = rng.random_range(1..=MAX_DIM);
        let hidden = rng.random_range(1..=MAX_DIM);
        let actions = rng.random_range(2..=MAX_DIM);
        let levels = rng.random_range(1..=2);
        let space = LabelSpace {
            num_fine_actions: actions,
            goal_levels: (0..levels)
                .map(|l| GoalLevel {
                    name: format!("level{l}"),
                    num_goals: rng.random_range(2..=MAX_DIM),
                })
                .collect(),
            action_to_verb: vec![0; actions],
            action_to_noun: vec![0; actions],
            num_verbs: 1,
            num_nouns: 1,
        };
        let mut params = init_params(&space, feature_dim, hidden, rng.random())?;
        // non-zero biases so the ReLU pattern is not determined by the weights alone
        for head in std::iter::once(&mut params.trunk)
            .chain(std::iter::once(&mut params.fine_head))
            .chain(params.goal_heads.iter_mut())
        {
            let n = head.bias.len();
            head.bias = normal_vec(rng, n, 0.3);
        }
        let snippets = rng.random_range(1..=4);
        let features = FeatureSequence::new(snippets, feature_dim, normal_vec(rng, snippets * feature_dim, 1.0))?;
        let grad_fine = normal_vec(rng, actions, 1.0);
        let grad_goal: Vec<Vec<f64>> = space.goal_levels.iter().map(|l| normal_vec(rng, l.num_goals, 1.0)).collect();

        let out = forward(&params, &features)?;
        let grads = backward(&params, &features, &out, &grad_fine, &grad_goal)?;

        // Scalar objective whose logit gradient is exactly (grad_fine, grad_goal).
        let objective = |p: &crate::model::ModelParams| {
            let o = forward(p, &features).unwrap();
            dot(&o.fine_logits, &grad_fine)
                + o.goal_logits.iter().zip(&grad_goal).map(|(z, g)| dot(z, g)).sum::<f64>()
        };
        let flat: Vec<f64> = params.tensors().iter().flat_map(|t| t.2.iter().copied()).collect();
        let analytic: Vec<f64> = grads.tensors().iter().flat_map(|t| t.2.iter().copied()).collect();
        let mut scratch = params.clone();
        let num = numeric_gradient(&flat, |z| {
            let mut at = 0;
            for t in scratch.tensors_mut() {
                let n = t.len();
                t.copy_from_slice(&z[at..at + n]);
                at += n;
            }
            objective(&scratch)
        });
        s.compare(&analytic, &num);
    }
    Ok(s)
}

/// Runs every check with `instances` random instances each.
pub fn run_all(seed: u64, instances: usize) -> Result<Vec<CheckSummary>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(vec![
        check_cross_entropy(&mut rng, instances)?,
        check_consistency_ce(&mut rng, instances)?,
        check_consistency_kl(&mut rng, instances)?,
        check_total_loss(&mut rng, instances)?,
        check_model_backward(&mut rng, instances)?,
    ])
}
