//! Anticipation examples, on-disk formats, batching and the synthetic
//! procedural-activity generator.
//!
//! An example is an observed segment (a short sequence of snippet features)
//! labelled with the action that starts one anticipation gap after it ends,
//! together with the goal(s) that action serves.
//!
//! Feature store layout (`features.gcft`), all little-endian:
//!
//! ```text
//! b"GCFT" | u16 version | u16 reserved | u64 total_snippets | u64 dim | f32 × total_snippets·dim
//! ```
//!
//! Version 1 carries `f32` payloads. Version 2 carries `f64` payloads and is
//! used for model checkpoints.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{weighted::WeightedIndex, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{GoalLevel, LabelSpace};

pub const FEATURE_MAGIC: &[u8; 4] = b"GCFT";
pub const FEATURE_VERSION_F32: u16 = 1;
pub const FEATURE_VERSION_F64: u16 = 2;
pub const FEATURE_HEADER_LEN: usize = 24;
pub const DEFAULT_ANTICIPATION_GAP: f64 = 1.0;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FEATURE_FILE: &str = "features.gcft";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            other => Err(Error::Input(format!("unknown split `{other}`"))),
        }
    }
}

fn default_gap() -> f64 {
    DEFAULT_ANTICIPATION_GAP
}

/// One anticipation example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentRecord {
    pub sequence_id: String,
    pub view_id: String,
    pub snippet_count: usize,
    pub feature_offset: usize,
    pub fine_label: usize,
    pub goal_labels: Vec<usize>,
    pub verb_label: usize,
    pub noun_label: usize,
    #[serde(default)]
    pub is_unseen: bool,
    #[serde(default)]
    pub is_tail: bool,
    /// Seconds between the end of the observed segment and the action onset.
    #[serde(default = "default_gap")]
    pub anticipation_gap: f64,
}

/// The observed segment: `snippets × dim` features, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    snippets: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureSequence {
    pub fn new(snippets: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if snippets == 0 || dim == 0 {
            return Err(Error::Input("feature sequence needs at least one snippet and one dimension".into()));
        }
        if data.len() != snippets * dim {
            return Err(Error::dim("feature sequence", snippets * dim, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("feature sequence contains non-finite values".into()));
        }
        Ok(FeatureSequence { snippets, dim, data })
    }

    pub fn snippets(&self) -> usize {
        self.snippets
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn snippet(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Mean over snippets.
    pub fn pooled(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for s in 0..self.snippets {
            for (o, &v) in out.iter_mut().zip(self.snippet(s)) {
                *o += v;
            }
        }
        let inv = 1.0 / self.snippets as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub label_space: LabelSpace,
    pub feature_dim: usize,
    /// Feature store path, relative to the manifest's directory.
    pub feature_file: String,
    /// Number of training records.
    pub num_train: usize,
    pub splits: Splits,
    pub records: Vec<SegmentRecord>,
}

impl DatasetManifest {
    pub fn split_ids(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.splits.train,
            Split::Val => &self.splits.val,
        }
    }

    /// Checks every invariant against a feature store holding
    /// `total_snippets` snippets of dimension `store_dim`.
    pub fn validate(&self, total_snippets: usize, store_dim: usize) -> Result<()> {
        let space = &self.label_space;
        space.validate()?;
        if self.feature_dim == 0 {
            return Err(Error::config("feature_dim", "must be positive"));
        }
        if store_dim != self.feature_dim {
            return Err(Error::Data(format!(
                "feature store has dimension {store_dim}, manifest declares {}",
                self.feature_dim
            )));
        }
        for (index, r) in self.records.iter().enumerate() {
            let fail = |message: String| Err(Error::Record { index, message });
            if r.fine_label >= space.num_fine_actions {
                return fail(format!("fine label {} outside [0, {})", r.fine_label, space.num_fine_actions));
            }
            if r.goal_labels.len() != space.num_goal_levels() {
                return fail(format!(
                    "{} goal labels for {} goal levels",
                    r.goal_labels.len(),
                    space.num_goal_levels()
                ));
            }
            for (level, &g) in r.goal_labels.iter().enumerate() {
                if g >= space.num_goals(level) {
                    return fail(format!(
                        "goal label {g} at level {level} outside [0, {})",
                        space.num_goals(level)
                    ));
                }
            }
            if r.verb_label != space.action_to_verb[r.fine_label] {
                return fail(format!("verb label {} inconsistent with action {}", r.verb_label, r.fine_label));
            }
            if r.noun_label != space.action_to_noun[r.fine_label] {
                return fail(format!("noun label {} inconsistent with action {}", r.noun_label, r.fine_label));
            }
            if !(r.anticipation_gap > 0.0 && r.anticipation_gap.is_finite()) {
                return fail(format!("anticipation gap {} must be positive", r.anticipation_gap));
            }
            if r.snippet_count == 0 {
                return fail("snippet count must be positive".into());
            }
            if r.feature_offset + r.snippet_count > total_snippets {
                return fail(format!(
                    "snippets [{}, {}) exceed the feature store ({total_snippets} snippets)",
                    r.feature_offset,
                    r.feature_offset + r.snippet_count
                ));
            }
        }
        let mut seen = vec![false; self.records.len()];
        for (split, ids) in [("train", &self.splits.train), ("val", &self.splits.val)] {
            for &i in ids.iter() {
                if i >= self.records.len() {
                    return Err(Error::Data(format!("{split} split references missing record {i}")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Data(format!("record {i} assigned to more than one split slot")));
                }
            }
        }
        if self.num_train != self.splits.train.len() {
            return Err(Error::Data(format!(
                "num_train is {}, training split has {} records",
                self.num_train,
                self.splits.train.len()
            )));
        }
        Ok(())
    }
}

/// Snippet features kept exactly as stored (`f32`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    dim: usize,
    data: Vec<f32>,
}

impl FeatureStore {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::Format(format!("{} values do not tile dimension {dim}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("feature store contains non-finite values".into()));
        }
        Ok(FeatureStore { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn total_snippets(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn sequence(&self, offset: usize, count: usize) -> Result<FeatureSequence> {
        if offset + count > self.total_snippets() {
            return Err(Error::Input(format!(
                "snippets [{offset}, {}) outside the store",
                offset + count
            )));
        }
        let slice = &self.data[offset * self.dim..(offset + count) * self.dim];
        FeatureSequence::new(count, self.dim, slice.iter().map(|&v| f64::from(v)).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FEATURE_HEADER_LEN + 4 * self.data.len());
        write_header(&mut out, FEATURE_VERSION_F32, self.total_snippets(), self.dim);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (version, rows, dim) = read_header(bytes)?;
        if version != FEATURE_VERSION_F32 {
            return Err(Error::Format(format!("feature store version {version}, expected {FEATURE_VERSION_F32}")));
        }
        let payload = &bytes[FEATURE_HEADER_LEN..];
        let expected = rows
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format("header dimensions overflow".into()))?;
        if payload.len() != expected {
            return Err(Error::Format(format!("payload is {} bytes, header implies {expected}", payload.len())));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        FeatureStore::new(dim, data)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        FeatureStore::from_bytes(&fs::read(path)?)
    }
}

pub(crate) fn write_header(out: &mut Vec<u8>, version: u16, rows: usize, cols: usize) {
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    out.extend_from_slice(&(cols as u64).to_le_bytes());
}

/// Returns `(version, rows, cols)`.
pub(crate) fn read_header(bytes: &[u8]) -> Result<(u16, usize, usize)> {
    if bytes.len() < FEATURE_HEADER_LEN {
        return Err(Error::Format("truncated header".into()));
    }
    if &bytes[0..4] != FEATURE_MAGIC {
        return Err(Error::Format("bad magic, expected GCFT".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let to_usize = |v: u64| usize::try_from(v).map_err(|_| Error::Format("header size exceeds address space".into()));
    Ok((version, to_usize(rows)?, to_usize(cols)?))
}

fn read_header_from_file(path: &Path) -> Result<(u16, usize, usize)> {
    let mut buf = [0u8; FEATURE_HEADER_LEN];
    let mut f = fs::File::open(path)?;
    f.read_exact(&mut buf)
        .map_err(|_| Error::Format(format!("{}: truncated header", path.display())))?;
    read_header(&buf)
}

fn feature_path(manifest_path: &Path, manifest: &DatasetManifest) -> PathBuf {
    manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.feature_file)
}

/// Parses and fully validates a manifest, including the feature file header.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(path)?)?;
    let features = feature_path(path, &manifest);
    if !features.exists() {
        return Err(Error::MissingFile(features));
    }
    let (version, rows, dim) = read_header_from_file(&features)?;
    if version != FEATURE_VERSION_F32 {
        return Err(Error::Format(format!("feature store version {version}, expected {FEATURE_VERSION_F32}")));
    }
    manifest.validate(rows, dim)?;
    Ok(manifest)
}

pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(serde_json::to_string_pretty(manifest)?.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(())
}

/// A manifest together with its loaded feature store.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub features: FeatureStore,
}

impl Dataset {
    pub fn new(manifest: DatasetManifest, features: FeatureStore) -> Result<Self> {
        manifest.validate(features.total_snippets(), features.dim())?;
        Ok(Dataset { manifest, features })
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = load_manifest(manifest_path)?;
        let features = FeatureStore::load(&feature_path(manifest_path, &manifest))?;
        Dataset::new(manifest, features)
    }

    /// Writes `manifest.json` and the feature store into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.features.write(&dir.join(&self.manifest.feature_file))?;
        write_manifest(&dir.join(MANIFEST_FILE), &self.manifest)
    }

    pub fn label_space(&self) -> &LabelSpace {
        &self.manifest.label_space
    }

    pub fn record(&self, index: usize) -> &SegmentRecord {
        &self.manifest.records[index]
    }

    pub fn sequence(&self, index: usize) -> FeatureSequence {
        let r = self.record(index);
        self.features
            .sequence(r.feature_offset, r.snippet_count)
            .expect("validated manifest offsets")
    }
}

/// Splits one epoch of `split` into batches of record indices.
///
/// The order is a permutation seeded by `seed`; the final partial batch is
/// kept.
pub fn batches(
    manifest: &DatasetManifest,
    split: Split,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::config("batch_size", "must be at least 1"));
    }
    let ids = manifest.split_ids(split);
    if ids.is_empty() {
        return Err(Error::Input(format!("split `{split}` is empty")));
    }
    let mut order = ids.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

fn d_num_goals() -> usize {
    6
}
fn d_actions_per_goal() -> usize {
    8
}
fn d_overlap() -> f64 {
    0.25
}
fn d_feature_dim() -> usize {
    32
}
fn d_snippets() -> usize {
    8
}
fn d_noise() -> f64 {
    0.8
}
fn d_mix() -> f64 {
    0.5
}
fn d_sequences() -> usize {
    600
}
fn d_views() -> usize {
    2
}
fn d_steps() -> usize {
    8
}
fn d_forward() -> f64 {
    0.3
}
fn d_jump_skew() -> f64 {
    1.0
}
fn d_val_fraction() -> f64 {
    0.2
}
fn d_unseen_fraction() -> f64 {
    0.17
}
fn d_verbs() -> usize {
    6
}

/// Knobs of the synthetic procedural-activity generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    #[serde(default = "d_num_goals")]
    pub num_goals: usize,
    #[serde(default = "d_actions_per_goal")]
    pub actions_per_goal: usize,
    /// Fraction of each goal's vocabulary shared with the next goal.
    #[serde(default = "d_overlap")]
    pub action_overlap_fraction: f64,
    #[serde(default = "d_feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "d_snippets")]
    pub snippets: usize,
    #[serde(default = "d_noise")]
    pub noise_sigma: f64,
    /// Weight of the context (current action + goal) against the next action.
    #[serde(default = "d_mix")]
    pub signal_mix: f64,
    #[serde(default = "d_sequences")]
    pub num_sequences: usize,
    #[serde(default = "d_views")]
    pub views_per_sequence: usize,
    #[serde(default)]
    pub seed: u64,
    /// Transitions per sequence; each one yields an example per view.
    #[serde(default = "d_steps")]
    pub steps_per_sequence: usize,
    /// Probability that the chain advances to the next vocabulary position.
    #[serde(default = "d_forward")]
    pub forward_prob: f64,
    /// Zipf exponent of the jump target over vocabulary positions (0: uniform).
    /// Positive values make late positions, and so some actions, rare.
    #[serde(default = "d_jump_skew")]
    pub jump_skew: f64,
    /// Fraction of the seen sequences placed in the validation split.
    #[serde(default = "d_val_fraction")]
    pub val_fraction: f64,
    /// Fraction of goals withheld from training (their records are unseen).
    #[serde(default = "d_unseen_fraction")]
    pub unseen_goal_fraction: f64,
    #[serde(default = "d_verbs")]
    pub num_verbs: usize,
    /// When positive, adds a second goal level with `goal % num_super_goals`.
    #[serde(default)]
    pub num_super_goals: usize,
    #[serde(default = "default_gap")]
    pub anticipation_gap: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialise")
    }
}

const MAX_ACTIONS: usize = 100_000;
const MAX_FEATURE_VALUES: usize = 1 << 30;

impl SyntheticConfig {
    fn shared_actions(&self) -> usize {
        if self.num_goals == 1 {
            0
        } else {
            (self.action_overlap_fraction * self.actions_per_goal as f64).round() as usize
        }
    }

    pub fn num_actions(&self) -> usize {
        self.num_goals * (self.actions_per_goal - self.shared_actions())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_goals", self.num_goals),
            ("actions_per_goal", self.actions_per_goal),
            ("feature_dim", self.feature_dim),
            ("snippets", self.snippets),
            ("num_sequences", self.num_sequences),
            ("views_per_sequence", self.views_per_sequence),
            ("steps_per_sequence", self.steps_per_sequence),
            ("num_verbs", self.num_verbs),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        let unit = [
            ("action_overlap_fraction", self.action_overlap_fraction),
            ("signal_mix", self.signal_mix),
            ("forward_prob", self.forward_prob),
            ("val_fraction", self.val_fraction),
            ("unseen_goal_fraction", self.unseen_goal_fraction),
        ];
        for (field, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(field, format!("{v} outside [0, 1]")));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma", "must be finite and non-negative"));
        }
        if !(self.jump_skew >= 0.0 && self.jump_skew.is_finite()) {
            return Err(Error::config("jump_skew", "must be finite and non-negative"));
        }
        if !(self.anticipation_gap > 0.0 && self.anticipation_gap.is_finite()) {
            return Err(Error::config("anticipation_gap", "must be positive"));
        }
        let shared = self.shared_actions();
        if shared >= self.actions_per_goal || self.actions_per_goal > self.num_actions() {
            return Err(Error::config(
                "action_overlap_fraction",
                "overlap leaves a goal vocabulary with repeated actions",
            ));
        }
        if self.num_goals.saturating_mul(self.actions_per_goal) > MAX_ACTIONS {
            return Err(Error::config(
                "actions_per_goal",
                format!("num_goals · actions_per_goal exceeds {MAX_ACTIONS}"),
            ));
        }
        let values = self
            .num_sequences
            .saturating_mul(self.views_per_sequence)
            .saturating_mul(self.steps_per_sequence)
            .saturating_mul(self.snippets)
            .saturating_mul(self.feature_dim);
        if values > MAX_FEATURE_VALUES {
            return Err(Error::config("num_sequences", "generated feature store would be too large"));
        }
        if self.num_super_goals > self.num_goals {
            return Err(Error::config("num_super_goals", "cannot exceed num_goals"));
        }
        Ok(())
    }

    fn withheld_goals(&self) -> usize {
        let n = (self.unseen_goal_fraction * self.num_goals as f64).round() as usize;
        n.min(self.num_goals - 1)
    }

    /// Vocabulary of `goal`, in procedural order.
    pub fn goal_vocabulary(&self, goal: usize) -> Vec<usize> {
        let stride = self.actions_per_goal - self.shared_actions();
        let n = self.num_actions();
        (0..self.actions_per_goal)
            .map(|i| (goal * stride + i) % n)
            .collect()
    }
}

fn unit_prototypes(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-8 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect()
}

/// Generates a deterministic synthetic dataset from `config`.
///
/// Action ids are laid out on a ring: goal `g` owns the contiguous block
/// starting at `g · (A − s)`, and its last `s` actions are the first `s` of
/// goal `g + 1`. Each sequence draws a goal, walks a Markov chain over its
/// vocabulary (advance with `forward_prob`, otherwise jump to a position
/// drawn from a Zipf law with exponent `jump_skew`) and
/// emits one example per transition and view.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let num_actions = config.num_actions();
    let (dim, snippets) = (config.feature_dim, config.snippets);

    let action_protos = unit_prototypes(&mut rng, num_actions, dim);
    let goal_protos = unit_prototypes(&mut rng, config.num_goals, dim);
    let vocabularies: Vec<Vec<usize>> = (0..config.num_goals).map(|g| config.goal_vocabulary(g)).collect();
    let jump_weights: Vec<f64> = (0..config.actions_per_goal)
        .map(|k| ((k + 1) as f64).powf(-config.jump_skew))
        .collect();
    let jump = WeightedIndex::new(&jump_weights).expect("positive weights");

    let mut goal_order: Vec<usize> = (0..config.num_goals).collect();
    goal_order.shuffle(&mut rng);
    let mut withheld = vec![false; config.num_goals];
    for &g in &goal_order[..config.withheld_goals()] {
        withheld[g] = true;
    }

    let mut goal_levels = vec![GoalLevel {
        name: "goal".into(),
        num_goals: config.num_goals,
    }];
    if config.num_super_goals > 0 {
        goal_levels.push(GoalLevel {
            name: "super_goal".into(),
            num_goals: config.num_super_goals,
        });
    }
    let action_to_verb: Vec<usize> = (0..num_actions).map(|c| c % config.num_verbs).collect();
    let action_to_noun: Vec<usize> = (0..num_actions).map(|c| c / config.num_verbs).collect();
    let label_space = LabelSpace {
        num_fine_actions: num_actions,
        goal_levels,
        action_to_verb,
        action_to_noun,
        num_verbs: config.num_verbs.min(num_actions),
        num_nouns: num_actions.div_ceil(config.num_verbs),
    };

    let mut records = Vec::new();
    let mut features: Vec<f32> = Vec::with_capacity(
        config.num_sequences * config.views_per_sequence * config.steps_per_sequence * snippets * dim,
    );
    let mut sequence_goal = Vec::with_capacity(config.num_sequences);
    let mut sequence_records: Vec<Vec<usize>> = Vec::with_capacity(config.num_sequences);
    let mut clean = vec![0.0f64; dim];

    for seq in 0..config.num_sequences {
        let goal = rng.random_range(0..config.num_goals);
        let vocab = &vocabularies[goal];
        let mut pos = rng.sample(&jump);
        let mut chain = vec![vocab[pos]];
        for _ in 0..config.steps_per_sequence {
            pos = if rng.random::<f64>() < config.forward_prob {
                (pos + 1) % vocab.len()
            } else {
                rng.sample(&jump)
            };
            chain.push(vocab[pos]);
        }

        let mut goal_labels = vec![goal];
        if config.num_super_goals > 0 {
            goal_labels.push(goal % config.num_super_goals);
        }
        let mut ids = Vec::with_capacity(config.steps_per_sequence * config.views_per_sequence);
        for step in 0..config.steps_per_sequence {
            let (current, next) = (chain[step], chain[step + 1]);
            for ((c, &a), (&g, &n)) in clean
                .iter_mut()
                .zip(&action_protos[current])
                .zip(goal_protos[goal].iter().zip(&action_protos[next]))
            {
                *c = config.signal_mix * (a + 0.5 * g) + (1.0 - config.signal_mix) * n;
            }
            for view in 0..config.views_per_sequence {
                let offset = features.len() / dim;
                for _ in 0..snippets {
                    for &c in &clean {
                        let noise: f64 = rng.sample(StandardNormal);
                        features.push((c + config.noise_sigma * noise) as f32);
                    }
                }
                ids.push(records.len());
                records.push(SegmentRecord {
                    sequence_id: format!("seq{seq:05}-t{step:03}"),
                    view_id: format!("view{view}"),
                    snippet_count: snippets,
                    feature_offset: offset,
                    fine_label: next,
                    goal_labels: goal_labels.clone(),
                    verb_label: label_space.action_to_verb[next],
                    noun_label: label_space.action_to_noun[next],
                    is_unseen: withheld[goal],
                    is_tail: false,
                    anticipation_gap: config.anticipation_gap,
                });
            }
        }
        sequence_goal.push(goal);
        sequence_records.push(ids);
    }

    let mut seen_sequences: Vec<usize> = (0..config.num_sequences)
        .filter(|&s| !withheld[sequence_goal[s]])
        .collect();
    seen_sequences.shuffle(&mut rng);
    let num_val = (config.val_fraction * seen_sequences.len() as f64).round() as usize;
    let mut is_val = vec![false; config.num_sequences];
    for &s in &seen_sequences[..num_val] {
        is_val[s] = true;
    }
    for s in 0..config.num_sequences {
        if withheld[sequence_goal[s]] {
            is_val[s] = true;
        }
    }
    let mut splits = Splits::default();
    for (s, ids) in sequence_records.iter().enumerate() {
        let target = if is_val[s] { &mut splits.val } else { &mut splits.train };
        target.extend_from_slice(ids);
    }

    mark_tail_actions(&mut records, &splits.train, num_actions);

    let manifest = DatasetManifest {
        label_space,
        feature_dim: dim,
        feature_file: FEATURE_FILE.into(),
        num_train: splits.train.len(),
        splits,
        records,
    };
    Dataset::new(manifest, FeatureStore::new(dim, features)?)
}

/// Flags records whose action is in the bottom count-quintile of the
/// actions observed in training. Ties break towards the lower action id.
fn mark_tail_actions(records: &mut [SegmentRecord], train: &[usize], num_actions: usize) {
    let mut counts = vec![0usize; num_actions];
    for &i in train {
        counts[records[i].fine_label] += 1;
    }
    let mut observed: Vec<usize> = (0..num_actions).filter(|&c| counts[c] > 0).collect();
    if observed.is_empty() {
        return;
    }
    observed.sort_by_key(|&c| (counts[c], c));
    let tail_len = (observed.len() / 5).max(1);
    let mut is_tail = vec![false; num_actions];
    for &c in &observed[..tail_len] {
        is_tail[c] = true;
    }
    for r in records.iter_mut() {
        r.is_tail = is_tail[r.fine_label];
    }
}
