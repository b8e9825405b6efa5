//! Two-branch predictor: a shared trunk over the observed segment, a fine
//! action head and one goal head per goal level.
//!
//! The trunk mean-pools the snippet features and applies one hidden layer
//! with a ReLU. It stands in for a temporal-aggregation backbone; the loss
//! structure on top of it does not depend on the trunk's internals.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{read_header, write_header, FeatureSequence, FEATURE_HEADER_LEN, FEATURE_VERSION_F64};
use crate::error::{Error, Result};
use crate::hierarchy::LabelSpace;
use crate::linalg::Matrix;

pub const DEFAULT_HIDDEN_WIDTH: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Head {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Head {
            weight: Matrix::zeros(inputs, outputs),
            bias: vec![0.0; outputs],
        }
    }

    fn apply(&self, h: &[f64]) -> Vec<f64> {
        let mut out = self.weight.left_mul(h);
        for (o, b) in out.iter_mut().zip(&self.bias) {
            *o += b;
        }
        out
    }
}

/// Trunk and head parameters. Also used as the container for gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub trunk: Head,
    pub fine_head: Head,
    pub goal_heads: Vec<Head>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub fine_logits: Vec<f64>,
    pub goal_logits: Vec<Vec<f64>>,
    /// Post-ReLU trunk activation.
    pub hidden: Vec<f64>,
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

/// Glorot-uniform weights, zero biases. Deterministic in `seed`.
pub fn init_params(space: &LabelSpace, feature_dim: usize, hidden: usize, seed: u64) -> Result<ModelParams> {
    if feature_dim == 0 {
        return Err(Error::config("feature_dim", "must be positive"));
    }
    if hidden == 0 {
        return Err(Error::config("hidden_width", "must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trunk = Head {
        weight: glorot(&mut rng, feature_dim, hidden),
        bias: vec![0.0; hidden],
    };
    let fine_head = Head {
        weight: glorot(&mut rng, hidden, space.num_fine_actions),
        bias: vec![0.0; space.num_fine_actions],
    };
    let goal_heads = space
        .goal_levels
        .iter()
        .map(|level| Head {
            weight: glorot(&mut rng, hidden, level.num_goals),
            bias: vec![0.0; level.num_goals],
        })
        .collect();
    Ok(ModelParams {
        trunk,
        fine_head,
        goal_heads,
    })
}

impl ModelParams {
    pub fn feature_dim(&self) -> usize {
        self.trunk.weight.rows()
    }

    pub fn hidden_width(&self) -> usize {
        self.trunk.weight.cols()
    }

    pub fn num_fine_actions(&self) -> usize {
        self.fine_head.bias.len()
    }

    pub fn goal_sizes(&self) -> Vec<usize> {
        self.goal_heads.iter().map(|h| h.bias.len()).collect()
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            trunk: Head::zeros(self.feature_dim(), self.hidden_width()),
            fine_head: Head::zeros(self.hidden_width(), self.num_fine_actions()),
            goal_heads: self
                .goal_sizes()
                .into_iter()
                .map(|n| Head::zeros(self.hidden_width(), n))
                .collect(),
        }
    }

    /// Every tensor in declared field order, as `(rows, cols, values)`.
    pub fn tensors(&self) -> Vec<(usize, usize, &[f64])> {
        let mut out = Vec::with_capacity(4 + 2 * self.goal_heads.len());
        for head in std::iter::once(&self.trunk)
            .chain(std::iter::once(&self.fine_head))
            .chain(&self.goal_heads)
        {
            out.push((head.weight.rows(), head.weight.cols(), head.weight.as_slice()));
            out.push((1, head.bias.len(), head.bias.as_slice()));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(4 + 2 * self.goal_heads.len());
        for head in std::iter::once(&mut self.trunk)
            .chain(std::iter::once(&mut self.fine_head))
            .chain(self.goal_heads.iter_mut())
        {
            out.push(head.weight.as_mut_slice());
            out.push(head.bias.as_mut_slice());
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.2.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.2.iter().all(|v| v.is_finite()))
    }

    /// `self += alpha · other`, tensor by tensor.
    pub fn add_scaled(&mut self, alpha: f64, other: &ModelParams) {
        let src = other.tensors();
        for (dst, (_, _, s)) in self.tensors_mut().into_iter().zip(src) {
            crate::linalg::axpy(alpha, s, dst);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= alpha);
        }
    }
}

/// Runs the trunk and every head on one observed segment.
pub fn forward(params: &ModelParams, features: &FeatureSequence) -> Result<ForwardOutput> {
    if features.dim() != params.feature_dim() {
        return Err(Error::dim("forward features", params.feature_dim(), features.dim()));
    }
    Ok(forward_pooled(params, &features.pooled()))
}

pub(crate) fn forward_pooled(params: &ModelParams, pooled: &[f64]) -> ForwardOutput {
    let mut hidden = params.trunk.apply(pooled);
    hidden.iter_mut().for_each(|v| *v = v.max(0.0));
    ForwardOutput {
        fine_logits: params.fine_head.apply(&hidden),
        goal_logits: params.goal_heads.iter().map(|g| g.apply(&hidden)).collect(),
        hidden,
    }
}

/// Gradients of every parameter given gradients w.r.t. the logits.
pub fn backward(
    params: &ModelParams,
    features: &FeatureSequence,
    output: &ForwardOutput,
    grad_fine_logits: &[f64],
    grad_goal_logits: &[Vec<f64>],
) -> Result<ModelParams> {
    if features.dim() != params.feature_dim() {
        return Err(Error::dim("backward features", params.feature_dim(), features.dim()));
    }
    let mut grads = params.zeros_like();
    backward_into(&mut grads, params, &features.pooled(), output, grad_fine_logits, grad_goal_logits, 1.0)?;
    Ok(grads)
}

/// Accumulates `scale ·` the parameter gradients into `grads`.
pub(crate) fn backward_into(
    grads: &mut ModelParams,
    params: &ModelParams,
    pooled: &[f64],
    output: &ForwardOutput,
    grad_fine_logits: &[f64],
    grad_goal_logits: &[Vec<f64>],
    scale: f64,
) -> Result<()> {
    if grad_fine_logits.len() != params.num_fine_actions() {
        return Err(Error::dim("fine logit gradient", params.num_fine_actions(), grad_fine_logits.len()));
    }
    if grad_goal_logits.len() != params.goal_heads.len() {
        return Err(Error::dim("goal levels in gradient", params.goal_heads.len(), grad_goal_logits.len()));
    }
    for (g, head) in grad_goal_logits.iter().zip(&params.goal_heads) {
        if g.len() != head.bias.len() {
            return Err(Error::dim("goal logit gradient", head.bias.len(), g.len()));
        }
    }
    let h = &output.hidden;

    let mut grad_hidden = params.fine_head.weight.right_mul(grad_fine_logits);
    grads.fine_head.weight.add_outer(scale, h, grad_fine_logits);
    crate::linalg::axpy(scale, grad_fine_logits, &mut grads.fine_head.bias);

    for ((g, head), ghead) in grad_goal_logits.iter().zip(&params.goal_heads).zip(&mut grads.goal_heads) {
        for (gh, v) in grad_hidden.iter_mut().zip(head.weight.right_mul(g)) {
            *gh += v;
        }
        ghead.weight.add_outer(scale, h, g);
        crate::linalg::axpy(scale, g, &mut ghead.bias);
    }

    // ReLU: h > 0 exactly where the pre-activation is positive; zero subgradient at 0.
    for (gh, &hv) in grad_hidden.iter_mut().zip(h) {
        if hv <= 0.0 {
            *gh = 0.0;
        }
    }
    grads.trunk.weight.add_outer(scale, pooled, &grad_hidden);
    crate::linalg::axpy(scale, &grad_hidden, &mut grads.trunk.bias);
    Ok(())
}

/// Metadata written ahead of the tensors in a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub feature_dim: usize,
    pub hidden_width: usize,
    pub num_fine_actions: usize,
    pub goal_sizes: Vec<usize>,
    pub seed: u64,
    pub label_space_hash: String,
}

/// Serialises a checkpoint: one line of JSON header, then each tensor as a
/// GCFT block (version 2, `f64`) in declared field order.
pub fn checkpoint_to_bytes(params: &ModelParams, seed: u64, space: &LabelSpace) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        feature_dim: params.feature_dim(),
        hidden_width: params.hidden_width(),
        num_fine_actions: params.num_fine_actions(),
        goal_sizes: params.goal_sizes(),
        seed,
        label_space_hash: space.fingerprint(),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    for (rows, cols, values) in params.tensors() {
        write_header(&mut out, FEATURE_VERSION_F64, rows, cols);
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(CheckpointHeader, ModelParams)> {
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("checkpoint header line missing".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..newline])?;
    let mut params = ModelParams {
        trunk: Head::zeros(header.feature_dim, header.hidden_width),
        fine_head: Head::zeros(header.hidden_width, header.num_fine_actions),
        goal_heads: header
            .goal_sizes
            .iter()
            .map(|&n| Head::zeros(header.hidden_width, n))
            .collect(),
    };
    let shapes: Vec<(usize, usize)> = params.tensors().iter().map(|t| (t.0, t.1)).collect();
    let mut cursor = &bytes[newline + 1..];
    for (dst, (rows, cols)) in params.tensors_mut().into_iter().zip(shapes) {
        let (version, r, c) = read_header(cursor)?;
        if version != FEATURE_VERSION_F64 || (r, c) != (rows, cols) {
            return Err(Error::Format(format!(
                "checkpoint tensor block v{version} {r}x{c}, expected v{FEATURE_VERSION_F64} {rows}x{cols}"
            )));
        }
        let len = FEATURE_HEADER_LEN + 8 * rows * cols;
        if cursor.len() < len {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        for (d, chunk) in dst.iter_mut().zip(cursor[FEATURE_HEADER_LEN..len].chunks_exact(8)) {
            *d = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        cursor = &cursor[len..];
    }
    if !cursor.is_empty() {
        return Err(Error::Format("trailing bytes after checkpoint tensors".into()));
    }
    if !params.is_finite() {
        return Err(Error::Format("checkpoint contains non-finite parameters".into()));
    }
    Ok((header, params))
}

pub fn save_checkpoint(path: &Path, params: &ModelParams, seed: u64, space: &LabelSpace) -> Result<()> {
    fs::write(path, checkpoint_to_bytes(params, seed, space)?)?;
    Ok(())
}

/// Loads a checkpoint and checks it was trained on `space`.
pub fn load_checkpoint(path: &Path, space: &LabelSpace) -> Result<(CheckpointHeader, ModelParams)> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let (header, params) = checkpoint_from_bytes(&fs::read(path)?)?;
    if header.label_space_hash != space.fingerprint() {
        return Err(Error::Data("checkpoint was trained on a different label space".into()));
    }
    Ok((header, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::GoalLevel;

    pub(crate) fn space(actions: usize, goals: &[usize]) -> LabelSpace {
        LabelSpace {
            num_fine_actions: actions,
            goal_levels: goals
                .iter()
                .enumerate()
                .map(|(i, &n)| GoalLevel {
                    name: format!("level{i}"),
                    num_goals: n,
                })
                .collect(),
            action_to_verb: vec![0; actions],
            action_to_noun: vec![0; actions],
            num_verbs: 1,
            num_nouns: 1,
        }
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let s = space(48, &[6]);
        let a = init_params(&s, 32, 16, 9).unwrap();
        assert_eq!(a, init_params(&s, 32, 16, 9).unwrap());
        assert_ne!(a, init_params(&s, 32, 16, 10).unwrap());
        assert_eq!(a.fine_head.weight.as_slice().len(), 16 * 48);
        let bound = (6.0f64 / 64.0).sqrt();
        assert!(a.fine_head.weight.as_slice().iter().all(|w| w.abs() <= bound));
        assert!(a.fine_head.bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn zero_features_give_zero_logits() {
        let s = space(5, &[3, 2]);
        let p = init_params(&s, 4, 6, 1).unwrap();
        let f = FeatureSequence::new(3, 4, vec![0.0; 12]).unwrap();
        let out = forward(&p, &f).unwrap();
        assert!(out.fine_logits.iter().all(|&v| v == 0.0));
        assert!(out.goal_logits.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let s = space(5, &[3]);
        let p = init_params(&s, 4, 6, 1).unwrap();
        let f = FeatureSequence::new(1, 3, vec![0.0; 3]).unwrap();
        assert!(matches!(forward(&p, &f), Err(Error::Dimension { .. })));
    }

    #[test]
    fn fine_bias_gradient_is_logit_gradient() {
        let s = space(5, &[3]);
        let p = init_params(&s, 4, 6, 1).unwrap();
        let f = FeatureSequence::new(2, 4, (0..8).map(|i| i as f64 * 0.1 - 0.3).collect()).unwrap();
        let out = forward(&p, &f).unwrap();
        let g = vec![0.1, -0.2, 0.3, 0.0, 0.05];
        let grads = backward(&p, &f, &out, &g, &[vec![0.0; 3]]).unwrap();
        assert_eq!(grads.fine_head.bias, g);

        let zero = backward(&p, &f, &out, &[0.0; 5], &[vec![0.0; 3]]).unwrap();
        assert!(zero.tensors().iter().all(|t| t.2.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let s = space(7, &[3, 2]);
        let p = init_params(&s, 5, 4, 3).unwrap();
        let bytes = checkpoint_to_bytes(&p, 3, &s).unwrap();
        let (header, back) = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(back, p);
        assert_eq!(header.goal_sizes, vec![3, 2]);
        assert!(checkpoint_from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
