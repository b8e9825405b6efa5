//! Label spaces and action-goal co-occurrence statistics.
//!
//! A [`CooccurrenceModel`] holds, for one goal level, the integer count
//! matrix `M[l][c]` collected over the training split, the joint estimate
//! `P(l, c) = M[l][c] / N` and the conditional `P(l | c)` obtained by
//! normalising each action column of the joint. The conditional is what the
//! consistency loss uses to push fine-action probabilities onto goals.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{DatasetManifest, Split};
use crate::error::{Error, Result};

/// Default additive smoothing applied when deriving conditionals.
pub const DEFAULT_SMOOTHING: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoalLevel {
    pub name: String,
    pub num_goals: usize,
}

/// Fine actions, goal levels and the verb/noun factorisation of actions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelSpace {
    pub num_fine_actions: usize,
    pub goal_levels: Vec<GoalLevel>,
    pub action_to_verb: Vec<usize>,
    pub action_to_noun: Vec<usize>,
    pub num_verbs: usize,
    pub num_nouns: usize,
}

impl LabelSpace {
    pub fn validate(&self) -> Result<()> {
        if self.num_fine_actions == 0 {
            return Err(Error::config("num_fine_actions", "must be positive"));
        }
        if self.goal_levels.is_empty() {
            return Err(Error::config("goal_levels", "at least one goal level is required"));
        }
        if let Some(level) = self.goal_levels.iter().find(|l| l.num_goals == 0) {
            return Err(Error::config(
                "goal_levels",
                format!("level `{}` has no goals", level.name),
            ));
        }
        if self.num_verbs == 0 || self.num_nouns == 0 {
            return Err(Error::config("num_verbs/num_nouns", "must be positive"));
        }
        for (field, map, bound) in [
            ("action_to_verb", &self.action_to_verb, self.num_verbs),
            ("action_to_noun", &self.action_to_noun, self.num_nouns),
        ] {
            if map.len() != self.num_fine_actions {
                return Err(Error::config(
                    field,
                    format!(
                        "expected {} entries, found {}",
                        self.num_fine_actions,
                        map.len()
                    ),
                ));
            }
            if let Some((action, id)) = map.iter().enumerate().find(|(_, &id)| id >= bound) {
                return Err(Error::config(
                    field,
                    format!("action {action} maps to {id}, outside [0, {bound})"),
                ));
            }
        }
        Ok(())
    }

    pub fn num_goal_levels(&self) -> usize {
        self.goal_levels.len()
    }

    pub fn num_goals(&self, level: usize) -> usize {
        self.goal_levels[level].num_goals
    }

    /// Hex SHA-256 of the canonical JSON encoding; stored in checkpoints.
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("label space serialises");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// Exact integer co-occurrence counts, `num_goals × num_actions`, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountMatrix {
    num_goals: usize,
    num_actions: usize,
    counts: Vec<u64>,
}

impl CountMatrix {
    pub fn from_counts(num_goals: usize, num_actions: usize, counts: Vec<u64>) -> Result<Self> {
        if num_goals == 0 || num_actions == 0 {
            return Err(Error::Input("count matrix needs positive dimensions".into()));
        }
        if counts.len() != num_goals * num_actions {
            return Err(Error::dim("count matrix", num_goals * num_actions, counts.len()));
        }
        Ok(CountMatrix {
            num_goals,
            num_actions,
            counts,
        })
    }

    pub fn num_goals(&self) -> usize {
        self.num_goals
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn get(&self, goal: usize, action: usize) -> u64 {
        self.counts[goal * self.num_actions + action]
    }

    pub fn as_slice(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn column_total(&self, action: usize) -> u64 {
        (0..self.num_goals).map(|l| self.get(l, action)).sum()
    }
}

/// Counts how often each (goal, fine action) pair occurs in `records`.
///
/// `records` holds `(fine_label, goal_label)` pairs for goal level `level`.
pub fn build_cooccurrence(
    records: &[(usize, usize)],
    space: &LabelSpace,
    level: usize,
) -> Result<CountMatrix> {
    if level >= space.num_goal_levels() {
        return Err(Error::Input(format!(
            "goal level {level} does not exist ({} levels)",
            space.num_goal_levels()
        )));
    }
    if records.is_empty() {
        return Err(Error::Input("no records to count; the joint is undefined".into()));
    }
    let num_actions = space.num_fine_actions;
    let num_goals = space.num_goals(level);
    let mut counts = vec![0u64; num_goals * num_actions];
    for (i, &(action, goal)) in records.iter().enumerate() {
        if action >= num_actions {
            return Err(Error::Record {
                index: i,
                message: format!("fine label {action} outside [0, {num_actions})"),
            });
        }
        if goal >= num_goals {
            return Err(Error::Record {
                index: i,
                message: format!("goal label {goal} outside [0, {num_goals})"),
            });
        }
        counts[goal * num_actions + action] += 1;
    }
    Ok(CountMatrix {
        num_goals,
        num_actions,
        counts,
    })
}

/// Counts, joint and conditional for one goal level. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct CooccurrenceModel {
    counts: CountMatrix,
    joint: Vec<f64>,
    conditional: Vec<f64>,
    smoothing_epsilon: f64,
}

/// Derives `P(l, c)` and `P(l | c)` from a count matrix.
///
/// With `smoothing_epsilon = ε > 0`, each joint entry receives `ε / |L|`
/// before column normalisation, so an action never seen in training maps to
/// the uniform goal distribution. With `ε = 0` such a column is an error.
pub fn derive_conditional(counts: &CountMatrix, smoothing_epsilon: f64) -> Result<CooccurrenceModel> {
    if !(smoothing_epsilon >= 0.0 && smoothing_epsilon.is_finite()) {
        return Err(Error::config("epsilon", "smoothing must be finite and non-negative"));
    }
    let total = counts.total();
    if total == 0 {
        return Err(Error::Input("count matrix is empty; the joint is undefined".into()));
    }
    let (num_goals, num_actions) = (counts.num_goals, counts.num_actions);
    let total_f = total as f64;
    let joint: Vec<f64> = counts.counts.iter().map(|&m| m as f64 / total_f).collect();

    let per_goal = smoothing_epsilon / num_goals as f64;
    let mut conditional = vec![0.0; joint.len()];
    for c in 0..num_actions {
        let column_sum: f64 = (0..num_goals)
            .map(|l| joint[l * num_actions + c] + per_goal)
            .sum();
        if column_sum <= 0.0 {
            return Err(Error::DegenerateColumn { action: c });
        }
        for l in 0..num_goals {
            conditional[l * num_actions + c] = (joint[l * num_actions + c] + per_goal) / column_sum;
        }
    }
    Ok(CooccurrenceModel {
        counts: counts.clone(),
        joint,
        conditional,
        smoothing_epsilon,
    })
}

impl CooccurrenceModel {
    pub fn num_goals(&self) -> usize {
        self.counts.num_goals
    }

    pub fn num_actions(&self) -> usize {
        self.counts.num_actions
    }

    pub fn counts(&self) -> &CountMatrix {
        &self.counts
    }

    pub fn smoothing_epsilon(&self) -> f64 {
        self.smoothing_epsilon
    }

    pub fn joint(&self, goal: usize, action: usize) -> f64 {
        self.joint[goal * self.num_actions() + action]
    }

    pub fn conditional(&self, goal: usize, action: usize) -> f64 {
        self.conditional[goal * self.num_actions() + action]
    }

    /// `P(goal | c)` for every action `c`.
    pub fn conditional_row(&self, goal: usize) -> &[f64] {
        let n = self.num_actions();
        &self.conditional[goal * n..(goal + 1) * n]
    }

    /// `P(l | action)` for every goal `l`.
    pub fn conditional_column(&self, action: usize) -> Vec<f64> {
        (0..self.num_goals())
            .map(|l| self.conditional(l, action))
            .collect()
    }

    /// The full conditional as a row-major `|L| × |C|` slice.
    pub fn conditional_matrix(&self) -> &[f64] {
        &self.conditional
    }

    pub fn to_doc(&self) -> CooccurrenceDoc {
        CooccurrenceDoc {
            num_goals: self.num_goals(),
            num_actions: self.num_actions(),
            counts: self.counts.counts.clone(),
            epsilon: self.smoothing_epsilon,
        }
    }

    pub fn from_doc(doc: &CooccurrenceDoc) -> Result<Self> {
        let counts = CountMatrix::from_counts(doc.num_goals, doc.num_actions, doc.counts.clone())?;
        derive_conditional(&counts, doc.epsilon)
    }
}

/// On-disk form of one goal level. Conditionals are re-derived on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CooccurrenceDoc {
    pub num_goals: usize,
    pub num_actions: usize,
    pub counts: Vec<u64>,
    pub epsilon: f64,
}

/// Builds one co-occurrence model per goal level from a manifest split.
///
/// Only the training split is accepted; statistics must never see
/// validation labels.
pub fn build_hierarchy(
    manifest: &DatasetManifest,
    split: Split,
    smoothing_epsilon: f64,
) -> Result<Vec<CooccurrenceModel>> {
    if split != Split::Train {
        return Err(Error::Input(format!(
            "co-occurrence statistics may only be built from the training split, not `{split}`"
        )));
    }
    let ids = manifest.split_ids(Split::Train);
    (0..manifest.label_space.num_goal_levels())
        .map(|level| {
            let pairs: Vec<(usize, usize)> = ids
                .iter()
                .map(|&i| {
                    let r = &manifest.records[i];
                    (r.fine_label, r.goal_labels[level])
                })
                .collect();
            let counts = build_cooccurrence(&pairs, &manifest.label_space, level)?;
            derive_conditional(&counts, smoothing_epsilon)
        })
        .collect()
}

pub fn hierarchy_to_json(models: &[CooccurrenceModel]) -> Result<String> {
    let docs: Vec<CooccurrenceDoc> = models.iter().map(CooccurrenceModel::to_doc).collect();
    Ok(serde_json::to_string_pretty(&docs)?)
}

pub fn hierarchy_from_json(text: &str) -> Result<Vec<CooccurrenceModel>> {
    let docs: Vec<CooccurrenceDoc> = serde_json::from_str(text)?;
    docs.iter().map(CooccurrenceModel::from_doc).collect()
}

/// Sums action probabilities into their verb (or noun) classes.
pub fn marginalize_action_distribution(
    action_probs: &[f64],
    mapping: &[usize],
    num_classes: usize,
) -> Result<Vec<f64>> {
    if action_probs.len() != mapping.len() {
        return Err(Error::dim("action marginalisation", mapping.len(), action_probs.len()));
    }
    let sum: f64 = action_probs.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Input(format!(
            "action probabilities sum to {sum}, not 1"
        )));
    }
    let mut out = vec![0.0; num_classes];
    for (&p, &class) in action_probs.iter().zip(mapping) {
        if class >= num_classes {
            return Err(Error::Input(format!(
                "mapping target {class} outside [0, {num_classes})"
            )));
        }
        out[class] += p;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn space(actions: usize, goals: usize) -> LabelSpace {
        LabelSpace {
            num_fine_actions: actions,
            goal_levels: vec![GoalLevel {
                name: "goal".into(),
                num_goals: goals,
            }],
            action_to_verb: vec![0; actions],
            action_to_noun: (0..actions).collect(),
            num_verbs: 1,
            num_nouns: actions,
        }
    }

    #[test]
    fn single_pair_count() {
        let m = build_cooccurrence(&[(0, 0)], &space(2, 2), 0).unwrap();
        assert_eq!(m.as_slice(), &[1, 0, 0, 0]);
    }

    #[test]
    fn hand_counted_matrix() {
        let recs = [(0, 0), (0, 0), (0, 0), (1, 0), (0, 1), (1, 1), (1, 1), (1, 1)];
        let m = build_cooccurrence(&recs, &space(2, 2), 0).unwrap();
        assert_eq!(m.as_slice(), &[3, 1, 1, 3]);
        assert_eq!(m.total(), 8);
    }

    #[test]
    fn out_of_range_and_empty_records_rejected() {
        let s = space(2, 2);
        assert!(matches!(
            build_cooccurrence(&[(0, 0), (2, 0)], &s, 0),
            Err(Error::Record { index: 1, .. })
        ));
        assert!(matches!(
            build_cooccurrence(&[(0, 5)], &s, 0),
            Err(Error::Record { index: 0, .. })
        ));
        assert!(matches!(build_cooccurrence(&[], &s, 0), Err(Error::Input(_))));
    }

    #[test]
    fn conditional_matches_hand_computation() {
        let counts = CountMatrix::from_counts(2, 2, vec![3, 1, 1, 3]).unwrap();
        let model = derive_conditional(&counts, 0.0).unwrap();
        let expected = [0.75, 0.25, 0.25, 0.75];
        for (a, b) in model.conditional_matrix().iter().zip(expected) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(model.joint(0, 0), 3.0 / 8.0, epsilon = 1e-15);
    }

    #[test]
    fn unseen_action_falls_back_to_uniform() {
        let counts = CountMatrix::from_counts(2, 2, vec![1, 0, 0, 0]).unwrap();
        let model = derive_conditional(&counts, 1e-6).unwrap();
        assert_abs_diff_eq!(model.conditional(0, 1), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(model.conditional(1, 1), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn zero_column_without_smoothing_names_action() {
        let counts = CountMatrix::from_counts(2, 2, vec![1, 0, 0, 0]).unwrap();
        assert!(matches!(
            derive_conditional(&counts, 0.0),
            Err(Error::DegenerateColumn { action: 1 })
        ));
    }

    #[test]
    fn marginalisation_examples() {
        let verbs = marginalize_action_distribution(&[0.5, 0.3, 0.2], &[0, 0, 1], 2).unwrap();
        assert_abs_diff_eq!(verbs[0], 0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(verbs[1], 0.2, epsilon = 1e-15);

        let onehot = marginalize_action_distribution(&[0.0, 0.0, 1.0, 0.0], &[1, 0, 2, 1], 3).unwrap();
        assert_eq!(onehot, vec![0.0, 0.0, 1.0]);

        let uniform = marginalize_action_distribution(&[0.25; 4], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(uniform, vec![0.5, 0.5]);

        assert!(marginalize_action_distribution(&[0.5, 0.4], &[0, 1], 2).is_err());
    }

    #[test]
    fn doc_round_trip_rederives() {
        let counts = CountMatrix::from_counts(2, 3, vec![2, 0, 1, 1, 4, 0]).unwrap();
        let model = derive_conditional(&counts, 1e-6).unwrap();
        let json = hierarchy_to_json(std::slice::from_ref(&model)).unwrap();
        let back = hierarchy_from_json(&json).unwrap();
        assert_eq!(back, vec![model]);
    }

    #[test]
    fn label_space_validation() {
        let mut s = space(3, 2);
        assert!(s.validate().is_ok());
        s.action_to_verb[2] = 1;
        assert!(matches!(s.validate(), Err(Error::Config { ref field, .. }) if field == "action_to_verb"));
        let mut s = space(3, 2);
        s.goal_levels.clear();
        assert!(s.validate().is_err());
    }
}
