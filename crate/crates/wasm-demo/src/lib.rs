//! Browser bindings for three small demonstrations: the goal remap, the
//! consistency-loss landscape over two logits, and a short training run.
//!
//! Every entry point takes and returns JSON text. The `*_json` functions are
//! plain Rust and are what the native tests exercise; the `#[wasm_bindgen]`
//! wrappers only convert errors into JavaScript exceptions.

use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

use goalcons::evaluation::{LabelKind, Protocol, Subset};
use goalcons::hierarchy::CountMatrix;
use goalcons::losses::{consistency_loss_ce, consistency_loss_kl, cross_entropy, remap_to_goal, softmax, ConditionalTable};
use goalcons::{
    build_hierarchy, derive_conditional, generate_synthetic, train, ConsistencyVariant, CooccurrenceModel, LossConfig,
    Split, SyntheticConfig, TrainConfig,
};

type DemoResult<T> = Result<T, String>;

fn to_json<T: Serialize>(value: &T) -> DemoResult<String> {
    serde_json::to_string(value).map_err(|e| e.to_string())
}

fn parse<'a, T: Deserialize<'a>>(text: &'a str) -> DemoResult<T> {
    serde_json::from_str(text).map_err(|e| e.to_string())
}

/// Builds the co-occurrence model from a goals × actions table of counts.
fn model_from_rows(counts: &[Vec<u64>], epsilon: f64) -> DemoResult<CooccurrenceModel> {
    let goals = counts.len();
    let actions = counts.first().map_or(0, Vec::len);
    if goals == 0 || actions == 0 || counts.iter().any(|r| r.len() != actions) {
        return Err("counts must be a non-empty rectangular table (one row per goal)".into());
    }
    let flat: Vec<u64> = counts.concat();
    let matrix = CountMatrix::from_counts(goals, actions, flat).map_err(|e| e.to_string())?;
    derive_conditional(&matrix, epsilon).map_err(|e| e.to_string())
}

fn rows(model: &CooccurrenceModel, value: impl Fn(usize, usize) -> f64) -> Vec<Vec<f64>> {
    (0..model.num_goals())
        .map(|l| (0..model.num_actions()).map(|c| value(l, c)).collect())
        .collect()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RemapInput {
    counts: Vec<Vec<u64>>,
    #[serde(default = "default_epsilon")]
    epsilon: f64,
    fine_logits: Vec<f64>,
    true_goal: usize,
}

fn default_epsilon() -> f64 {
    goalcons::hierarchy::DEFAULT_SMOOTHING
}

#[derive(Serialize)]
struct RemapOutput {
    joint: Vec<Vec<f64>>,
    conditional: Vec<Vec<f64>>,
    fine_probs: Vec<f64>,
    goal_probs: Vec<f64>,
    consistency_loss: f64,
}

/// Conditional table, remapped goal distribution and consistency loss for
/// a count table and a vector of fine logits.
pub fn remap_json(input: &str) -> DemoResult<String> {
    let input: RemapInput = parse(input)?;
    let model = model_from_rows(&input.counts, input.epsilon)?;
    if input.fine_logits.len() != model.num_actions() {
        return Err(format!(
            "{} fine logits for {} actions",
            input.fine_logits.len(),
            model.num_actions()
        ));
    }
    if input.true_goal >= model.num_goals() {
        return Err(format!("true_goal {} outside [0, {})", input.true_goal, model.num_goals()));
    }
    let fine_probs = softmax(&input.fine_logits);
    let table = ConditionalTable::from(&model);
    let goal_probs = remap_to_goal(&fine_probs, table).map_err(|e| e.to_string())?;
    let (consistency_loss, _) =
        consistency_loss_ce(&input.fine_logits, table, input.true_goal, 1e-12).map_err(|e| e.to_string())?;
    to_json(&RemapOutput {
        joint: rows(&model, |l, c| model.joint(l, c)),
        conditional: rows(&model, |l, c| model.conditional(l, c)),
        fine_probs,
        goal_probs,
        consistency_loss,
    })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LandscapeInput {
    counts: Vec<Vec<u64>>,
    #[serde(default = "default_epsilon")]
    epsilon: f64,
    true_goal: usize,
    fine_label: usize,
    /// The two actions whose logits span the grid; the others stay at 0.
    actions: [usize; 2],
    #[serde(default = "default_extent")]
    extent: f64,
    #[serde(default = "default_steps")]
    steps: usize,
    /// Goal-branch logits used by the KL form.
    #[serde(default)]
    goal_logits: Option<Vec<f64>>,
}

fn default_extent() -> f64 {
    6.0
}

fn default_steps() -> usize {
    25
}

#[derive(Serialize)]
struct LandscapeOutput {
    axis: Vec<f64>,
    /// `[i][j]`: first action's logit `axis[i]`, second's `axis[j]`.
    consistency_ce: Vec<Vec<f64>>,
    consistency_kl: Vec<Vec<f64>>,
    fine_ce: Vec<Vec<f64>>,
}

/// Loss surfaces over a square grid of two fine logits.
pub fn landscape_json(input: &str) -> DemoResult<String> {
    let input: LandscapeInput = parse(input)?;
    let model = model_from_rows(&input.counts, input.epsilon)?;
    let (goals, actions) = (model.num_goals(), model.num_actions());
    if input.actions.iter().any(|&a| a >= actions) || input.actions[0] == input.actions[1] {
        return Err(format!("grid actions must be two distinct ids below {actions}"));
    }
    if input.true_goal >= goals || input.fine_label >= actions {
        return Err("true_goal or fine_label out of range".into());
    }
    if !(2..=101).contains(&input.steps) || !(input.extent > 0.0 && input.extent.is_finite()) {
        return Err("steps must lie in [2, 101] and extent must be positive".into());
    }
    let goal_logits = input.goal_logits.unwrap_or_else(|| {
        let mut g = vec![0.0; goals];
        g[input.true_goal] = 3.0;
        g
    });
    if goal_logits.len() != goals {
        return Err(format!("{} goal logits for {goals} goals", goal_logits.len()));
    }
    let table = ConditionalTable::from(&model);
    let n = input.steps;
    let axis: Vec<f64> = (0..n)
        .map(|i| -input.extent + 2.0 * input.extent * i as f64 / (n - 1) as f64)
        .collect();
    let mut out = LandscapeOutput {
        axis: axis.clone(),
        consistency_ce: vec![vec![0.0; n]; n],
        consistency_kl: vec![vec![0.0; n]; n],
        fine_ce: vec![vec![0.0; n]; n],
    };
    let mut logits = vec![0.0; actions];
    for (i, &x) in axis.iter().enumerate() {
        for (j, &y) in axis.iter().enumerate() {
            logits[input.actions[0]] = x;
            logits[input.actions[1]] = y;
            let err = |e: goalcons::Error| e.to_string();
            out.consistency_ce[i][j] = consistency_loss_ce(&logits, table, input.true_goal, 1e-12).map_err(err)?.0;
            out.consistency_kl[i][j] = consistency_loss_kl(&logits, table, &goal_logits, 1e-12).map_err(err)?.0;
            out.fine_ce[i][j] = cross_entropy(&logits, input.fine_label, 1e-12).map_err(err)?.0;
        }
    }
    to_json(&out)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainDemoInput {
    #[serde(default = "default_lambda")]
    lambda: f64,
    #[serde(default)]
    variant: ConsistencyVariant,
    #[serde(default = "default_demo_epochs")]
    epochs: usize,
    #[serde(default = "default_demo_sequences")]
    num_sequences: usize,
    #[serde(default)]
    seed: u64,
}

fn default_lambda() -> f64 {
    1.0
}

fn default_demo_epochs() -> usize {
    10
}

fn default_demo_sequences() -> usize {
    200
}

#[derive(Serialize)]
struct EpochPoint {
    epoch: usize,
    fine_ce: f64,
    goal_ce: f64,
    consistency: f64,
    total: f64,
}

#[derive(Serialize)]
struct TrainDemoOutput {
    lambda: f64,
    train_records: usize,
    val_records: usize,
    epochs: Vec<EpochPoint>,
    action_recall: f64,
    multi_view_action_recall: Option<f64>,
    verb_recall: Option<f64>,
}

/// Generates a small synthetic dataset and trains with the chosen weight.
pub fn train_json(input: &str) -> DemoResult<String> {
    let input: TrainDemoInput = parse(input)?;
    if !(input.lambda >= 0.0 && input.lambda.is_finite()) {
        return Err("lambda must be finite and non-negative".into());
    }
    if input.epochs > 200 || !(20..=2000).contains(&input.num_sequences) {
        return Err("keep epochs ≤ 200 and num_sequences within [20, 2000] in the browser".into());
    }
    let data = SyntheticConfig {
        num_sequences: input.num_sequences,
        seed: input.seed,
        ..SyntheticConfig::default()
    };
    let dataset = generate_synthetic(&data).map_err(|e| e.to_string())?;
    let hierarchy = build_hierarchy(&dataset.manifest, Split::Train, default_epsilon()).map_err(|e| e.to_string())?;
    let config = TrainConfig {
        epochs: input.epochs,
        eval_every: 0,
        seed: input.seed,
        loss: LossConfig {
            lambda_cons: input.lambda,
            consistency_variant: input.variant,
            ..LossConfig::default()
        },
        ..TrainConfig::default()
    };
    let (_, history) = train(&config, &dataset, &hierarchy).map_err(|e| e.to_string())?;
    let report = history.final_report().ok_or("no evaluation was recorded")?;
    let cell = |kind, protocol| report.get(kind, protocol, Subset::Overall).map(|c| c.recall);
    to_json(&TrainDemoOutput {
        lambda: input.lambda,
        train_records: dataset.manifest.splits.train.len(),
        val_records: dataset.manifest.splits.val.len(),
        epochs: history
            .epochs
            .iter()
            .map(|e| EpochPoint {
                epoch: e.epoch,
                fine_ce: e.loss.fine_ce,
                goal_ce: e.loss.goal_ce.iter().sum(),
                consistency: e.loss.consistency.iter().sum(),
                total: e.loss.total,
            })
            .collect(),
        action_recall: report.action_recall(),
        multi_view_action_recall: cell(LabelKind::Action, Protocol::MultiView),
        verb_recall: cell(LabelKind::Verb, Protocol::PerView),
    })
}

fn js(result: DemoResult<String>) -> Result<String, JsValue> {
    result.map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn remap(input: &str) -> Result<String, JsValue> {
    js(remap_json(input))
}

#[wasm_bindgen]
pub fn landscape(input: &str) -> Result<String, JsValue> {
    js(landscape_json(input))
}

#[wasm_bindgen]
pub fn train_demo(input: &str) -> Result<String, JsValue> {
    js(train_json(input))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    fn call(f: fn(&str) -> DemoResult<String>, input: &str) -> Value {
        serde_json::from_str(&f(input).unwrap()).unwrap()
    }

    #[test]
    fn remap_reports_the_conditional_and_goal_distribution() {
        let v = call(remap_json, r#"{"counts": [[3, 1], [1, 3]], "epsilon": 0, "fine_logits": [0, 0], "true_goal": 0}"#);
        assert_eq!(v["conditional"], serde_json::json!([[0.75, 0.25], [0.25, 0.75]]));
        let g: Vec<f64> = serde_json::from_value(v["goal_probs"].clone()).unwrap();
        assert!((g[0] - 0.5).abs() < 1e-12 && (g[1] - 0.5).abs() < 1e-12);
        assert!((v["consistency_loss"].as_f64().unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn remap_rejects_bad_shapes() {
        assert!(remap_json(r#"{"counts": [[1, 2], [3]], "fine_logits": [0, 0], "true_goal": 0}"#).is_err());
        assert!(remap_json(r#"{"counts": [[1, 2]], "fine_logits": [0], "true_goal": 0}"#).is_err());
        assert!(remap_json(r#"{"counts": [[1, 0], [0, 0]], "epsilon": 0, "fine_logits": [0, 0], "true_goal": 0}"#)
            .unwrap_err()
            .contains("action 1"));
    }

    #[test]
    fn landscape_is_lowest_where_the_aligned_action_dominates() {
        // Action 0 only occurs with goal 0, action 1 only with goal 1.
        let v = call(
            landscape_json,
            r#"{"counts": [[5, 0, 2], [0, 5, 2]], "true_goal": 0, "fine_label": 0, "actions": [0, 1], "steps": 5}"#,
        );
        let grid: Vec<Vec<f64>> = serde_json::from_value(v["consistency_ce"].clone()).unwrap();
        assert_eq!(grid.len(), 5);
        // high logit for action 0, low for action 1
        let best = grid[4][0];
        let worst = grid[0][4];
        assert!(grid.iter().flatten().all(|&x| x >= best - 1e-12));
        assert!(best < worst);
        assert!(landscape_json(r#"{"counts": [[1]], "true_goal": 0, "fine_label": 0, "actions": [0, 0]}"#).is_err());
    }

    #[test]
    fn train_demo_returns_a_loss_curve_and_recall() {
        let input = r#"{"lambda": 1.0, "epochs": 3, "num_sequences": 40, "seed": 1}"#;
        let v = call(train_json, input);
        assert_eq!(v["epochs"].as_array().unwrap().len(), 3);
        let recall = v["action_recall"].as_f64().unwrap();
        assert!((0.0..=100.0).contains(&recall));
        assert_eq!(train_json(input).unwrap(), train_json(input).unwrap());
        assert!(train_json(r#"{"lambda": -1}"#).is_err());
    }
}
