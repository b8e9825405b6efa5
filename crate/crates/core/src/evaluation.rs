//! Class-mean top-k recall over actions, verbs and nouns, under the
//! per-view and multi-view protocols, for the overall, unseen and tail
//! subsets.
//!
//! Only the fine-action branch is scored; verb and noun distributions are
//! obtained by summing action probabilities.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, SegmentRecord, Split};
use crate::error::{Error, Result};
use crate::hierarchy::{marginalize_action_distribution, LabelSpace};
use crate::losses::softmax;
use crate::model::{forward, ModelParams};

pub const DEFAULT_TOP_K: usize = 5;

/// Fine-branch output for one record, with the labels needed to score it.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub sequence_id: String,
    pub view_id: String,
    pub fine_label: usize,
    pub verb_label: usize,
    pub noun_label: usize,
    pub is_unseen: bool,
    pub is_tail: bool,
}

impl Prediction {
    pub fn from_record(record: &SegmentRecord, probs: Vec<f64>) -> Self {
        Prediction {
            probs,
            sequence_id: record.sequence_id.clone(),
            view_id: record.view_id.clone(),
            fine_label: record.fine_label,
            verb_label: record.verb_label,
            noun_label: record.noun_label,
            is_unseen: record.is_unseen,
            is_tail: record.is_tail,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMeanRecall {
    /// Mean over classes with at least one sample, in percent.
    pub mean_percent: f64,
    /// Per-class recall in percent; `None` for classes without samples.
    pub per_class: Vec<Option<f64>>,
    pub class_count: usize,
}

/// Whether `label` ranks among the `k` largest entries of `scores`, ties
/// resolved in favour of the lower class index.
pub fn in_top_k(scores: &[f64], label: usize, k: usize) -> bool {
    let target = scores[label];
    let ahead = scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > target || (s == target && j < label))
        .count();
    ahead < k
}

pub fn topk_classmean_recall(
    predictions: &[Vec<f64>],
    labels: &[usize],
    k: usize,
    num_classes: usize,
) -> Result<ClassMeanRecall> {
    if k == 0 {
        return Err(Error::Input("top-k needs k ≥ 1".into()));
    }
    if predictions.is_empty() {
        return Err(Error::Input("no samples to evaluate".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::dim("recall labels", predictions.len(), labels.len()));
    }
    let mut hits = vec![0usize; num_classes];
    let mut instances = vec![0usize; num_classes];
    for (scores, &label) in predictions.iter().zip(labels) {
        if scores.len() != num_classes {
            return Err(Error::dim("recall scores", num_classes, scores.len()));
        }
        if label >= num_classes {
            return Err(Error::Input(format!("label {label} outside [0, {num_classes})")));
        }
        instances[label] += 1;
        if in_top_k(scores, label, k) {
            hits[label] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = hits
        .iter()
        .zip(&instances)
        .map(|(&h, &n)| (n > 0).then(|| 100.0 * h as f64 / n as f64))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    Ok(ClassMeanRecall {
        mean_percent: present.iter().sum::<f64>() / present.len() as f64,
        per_class,
        class_count: present.len(),
    })
}

/// Averages the per-view probability vectors of every sequence.
///
/// Output order follows the first appearance of each sequence id.
pub fn multiview_aggregate(predictions: &[Prediction]) -> Result<Vec<Prediction>> {
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut merged: Vec<Prediction> = Vec::new();
    let mut views: Vec<usize> = Vec::new();
    for p in predictions {
        match index.get(p.sequence_id.as_str()) {
            Some(&i) => {
                let m = &mut merged[i];
                if (m.fine_label, m.verb_label, m.noun_label, m.is_unseen, m.is_tail)
                    != (p.fine_label, p.verb_label, p.noun_label, p.is_unseen, p.is_tail)
                {
                    return Err(Error::Data(format!(
                        "views of sequence `{}` carry conflicting labels",
                        p.sequence_id
                    )));
                }
                if m.probs.len() != p.probs.len() {
                    return Err(Error::dim("multi-view probabilities", m.probs.len(), p.probs.len()));
                }
                m.probs.iter_mut().zip(&p.probs).for_each(|(a, b)| *a += b);
                views[i] += 1;
            }
            None => {
                index.insert(&p.sequence_id, merged.len());
                merged.push(p.clone());
                views.push(1);
            }
        }
    }
    for (m, &n) in merged.iter_mut().zip(&views) {
        if n == 1 {
            continue;
        }
        m.probs.iter_mut().for_each(|v| *v /= n as f64);
        let total: f64 = m.probs.iter().sum();
        m.probs.iter_mut().for_each(|v| *v /= total);
        m.view_id = "all".into();
    }
    Ok(merged)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    Action,
    Verb,
    Noun,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    PerView,
    MultiView,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Overall,
    Unseen,
    Tail,
}

impl LabelKind {
    pub const ALL: [LabelKind; 3] = [LabelKind::Action, LabelKind::Verb, LabelKind::Noun];

    pub fn as_str(self) -> &'static str {
        match self {
            LabelKind::Action => "action",
            LabelKind::Verb => "verb",
            LabelKind::Noun => "noun",
        }
    }
}

impl Protocol {
    pub const ALL: [Protocol; 2] = [Protocol::PerView, Protocol::MultiView];

    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::PerView => "per-view",
            Protocol::MultiView => "multi-view",
        }
    }
}

impl Subset {
    pub const ALL: [Subset; 3] = [Subset::Overall, Subset::Unseen, Subset::Tail];

    pub fn as_str(self) -> &'static str {
        match self {
            Subset::Overall => "overall",
            Subset::Unseen => "unseen",
            Subset::Tail => "tail",
        }
    }

    fn admits(self, p: &Prediction) -> bool {
        match self {
            Subset::Overall => true,
            Subset::Unseen => p.is_unseen,
            Subset::Tail => p.is_tail,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    pub kind: LabelKind,
    pub protocol: Protocol,
    pub subset: Subset,
    pub recall: f64,
    pub class_count: usize,
    /// Per-class recall in percent, `null` for classes absent from the subset.
    pub per_class: Vec<Option<f64>>,
}

/// Every kind × protocol × subset cell that has at least one eligible class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub top_k: usize,
    pub cells: Vec<EvalCell>,
}

impl EvalReport {
    pub fn get(&self, kind: LabelKind, protocol: Protocol, subset: Subset) -> Option<&EvalCell> {
        self.cells
            .iter()
            .find(|c| c.kind == kind && c.protocol == protocol && c.subset == subset)
    }

    /// Per-view overall action recall, the headline number.
    pub fn action_recall(&self) -> f64 {
        self.get(LabelKind::Action, Protocol::PerView, Subset::Overall)
            .map(|c| c.recall)
            .unwrap_or(f64::NAN)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,protocol,subset,recall,class_count\n");
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                c.kind.as_str(),
                c.protocol.as_str(),
                c.subset.as_str(),
                c.recall,
                c.class_count
            );
        }
        out
    }
}

fn scores_for(p: &Prediction, kind: LabelKind, space: &LabelSpace) -> Result<(Vec<f64>, usize)> {
    Ok(match kind {
        LabelKind::Action => (p.probs.clone(), p.fine_label),
        LabelKind::Verb => (
            marginalize_action_distribution(&p.probs, &space.action_to_verb, space.num_verbs)?,
            p.verb_label,
        ),
        LabelKind::Noun => (
            marginalize_action_distribution(&p.probs, &space.action_to_noun, space.num_nouns)?,
            p.noun_label,
        ),
    })
}

/// Scores a prediction set under both protocols and all subsets.
pub fn evaluate_predictions(predictions: &[Prediction], space: &LabelSpace, k: usize) -> Result<EvalReport> {
    if predictions.is_empty() {
        return Err(Error::Input("no predictions to evaluate".into()));
    }
    for p in predictions {
        let sum: f64 = p.probs.iter().sum();
        if p.probs.len() != space.num_fine_actions || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Input(format!(
                "prediction for `{}`/`{}` is not a distribution over {} actions",
                p.sequence_id, p.view_id, space.num_fine_actions
            )));
        }
    }
    let multi = multiview_aggregate(predictions)?;
    let mut cells = Vec::new();
    for kind in LabelKind::ALL {
        let num_classes = match kind {
            LabelKind::Action => space.num_fine_actions,
            LabelKind::Verb => space.num_verbs,
            LabelKind::Noun => space.num_nouns,
        };
        for protocol in Protocol::ALL {
            let set = match protocol {
                Protocol::PerView => predictions,
                Protocol::MultiView => multi.as_slice(),
            };
            for subset in Subset::ALL {
                let mut scores = Vec::new();
                let mut labels = Vec::new();
                for p in set.iter().filter(|p| subset.admits(p)) {
                    let (s, l) = scores_for(p, kind, space)?;
                    scores.push(s);
                    labels.push(l);
                }
                if scores.is_empty() {
                    continue;
                }
                let r = topk_classmean_recall(&scores, &labels, k, num_classes)?;
                cells.push(EvalCell {
                    kind,
                    protocol,
                    subset,
                    recall: r.mean_percent,
                    class_count: r.class_count,
                    per_class: r.per_class,
                });
            }
        }
    }
    Ok(EvalReport { top_k: k, cells })
}

/// Fine-branch softmax for every record of `split`, in split order.
pub fn predict(params: &ModelParams, dataset: &Dataset, split: Split) -> Result<Vec<Prediction>> {
    let ids = dataset.manifest.split_ids(split);
    if ids.is_empty() {
        return Err(Error::Input(format!("split `{split}` is empty")));
    }
    ids.iter()
        .map(|&i| {
            let out = forward(params, &dataset.sequence(i))?;
            Ok(Prediction::from_record(dataset.record(i), softmax(&out.fine_logits)))
        })
        .collect()
}

pub fn evaluate(params: &ModelParams, dataset: &Dataset, split: Split, k: usize) -> Result<EvalReport> {
    let predictions = predict(params, dataset, split)?;
    evaluate_predictions(&predictions, dataset.label_space(), k)
}
