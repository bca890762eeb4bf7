//! The db_id router: hashed bag-of-n-grams featurization over the augmented
//! question concatenated with the multi-hot entity vector, a linear softmax
//! head trained with mini-batch Adam and cross-entropy, and ranked
//! prediction.
//!
//! The model is an encoder contract: anything that can rank classes for an
//! augmented question can stand behind [`QuestionRouter`]. The shipped
//! implementation is the desk-scale default; a fine-tuned transformer
//! encoder would slot in behind the same trait.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rules::{entity_vector, EntityAssignment, EntityVocabulary};

#[derive(Debug, Error)]
pub enum RouterError {
    #[error("training needs at least 2 distinct classes, got {0}")]
    DegenerateClasses(usize),
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    TrainingDiverged { epoch: usize, loss: f64 },
    #[error("k must be at least 1")]
    InvalidK,
    #[error("epsilon {0} outside [1e-7, 1e-3]")]
    InvalidEpsilon(f64),
    #[error("model format version {found} does not match expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("model i/o at `{path}`: {message}")]
    Io { path: String, message: String },
}

/// Featurizer settings, frozen when a model is trained and persisted with it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureConfig {
    /// Number of hash buckets for text n-grams.
    pub text_dims: usize,
    pub hash_seed: u64,
    pub tokenizer_version: u32,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { text_dims: 1 << 16, hash_seed: 0, tokenizer_version: 1 }
    }
}

/// Sparse text counts plus dense entity bits. The concatenated feature space
/// has dimension `text_dims + entity_bits.len()`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    /// (bucket, count) pairs sorted by bucket.
    pub text_counts: Vec<(u32, f64)>,
    pub entity_bits: Vec<bool>,
    pub text_dims: usize,
}

impl FeatureVector {
    pub fn dims(&self) -> usize {
        self.text_dims + self.entity_bits.len()
    }
}

/// FNV-1a (64-bit) with the seed folded into the offset basis. Stable across
/// platforms and toolchains, which the persisted model format relies on.
fn fnv1a64(seed: u64, term: &str) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for byte in term.as_bytes() {
        hash ^= u64::from(*byte);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Deterministic featurization: lowercased, punctuation-stripped unigram and
/// bigram counts hashed into `text_dims` buckets, concatenated with the
/// entity bits from the assignment.
pub fn featurize(
    q_augmented: &str,
    assignment: &EntityAssignment,
    config: &FeatureConfig,
    vocabulary: &EntityVocabulary,
) -> FeatureVector {
    let tokens = tokenize(q_augmented);
    let mut counts: std::collections::BTreeMap<u32, f64> = std::collections::BTreeMap::new();
    let mut add = |term: &str| {
        let bucket = (fnv1a64(config.hash_seed, term) % config.text_dims as u64) as u32;
        *counts.entry(bucket).or_insert(0.0) += 1.0;
    };
    for token in &tokens {
        add(token);
    }
    for pair in tokens.windows(2) {
        add(&format!("{} {}", pair[0], pair[1]));
    }
    FeatureVector {
        text_counts: counts.into_iter().collect(),
        entity_bits: entity_vector(assignment, vocabulary),
        text_dims: config.text_dims,
    }
}

/// Training hyperparameters. The default learning rate targets this linear
/// head; transformer fine-tuning conventionally uses 1e-5, available through
/// the same field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Early stopping on validation accuracy: stop after this many epochs
    /// without improvement and restore the best weights.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 8,
            epochs: 50,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            patience: None,
        }
    }
}

pub const ROUTER_FORMAT_VERSION: u32 = 1;

/// The trained router: a linear softmax head over the feature space, plus
/// everything needed to reproduce featurization at inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterModel {
    pub format_version: u32,
    pub feature_config: FeatureConfig,
    pub entity_vocabulary: EntityVocabulary,
    pub class_list: Vec<String>,
    /// One row per class, `dims` columns.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

/// One ranked class with its softmax probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class: String,
    pub probability: f64,
}

/// Ranking contract for db_id prediction. External encoders can replace the
/// linear model behind this interface.
pub trait QuestionRouter: Send + Sync {
    fn class_list(&self) -> &[String];
    fn predict_question(
        &self,
        q_augmented: &str,
        assignment: &EntityAssignment,
        k: usize,
    ) -> Result<Vec<Prediction>, RouterError>;
}

impl RouterModel {
    pub fn dims(&self) -> usize {
        self.feature_config.text_dims + self.entity_vocabulary.len()
    }

    fn check_compatible(&self, fv: &FeatureVector) -> Result<(), RouterError> {
        let expected = self.dims();
        let got = fv.dims();
        if expected != got {
            return Err(RouterError::DimensionMismatch { expected, got });
        }
        Ok(())
    }

    fn logits(&self, fv: &FeatureVector) -> Vec<f64> {
        let offset = self.feature_config.text_dims;
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(row, b)| {
                let text: f64 = fv.text_counts.iter().map(|(i, v)| row[*i as usize] * v).sum();
                let bits: f64 = fv
                    .entity_bits
                    .iter()
                    .enumerate()
                    .filter(|(_, set)| **set)
                    .map(|(j, _)| row[offset + j])
                    .sum();
                text + bits + b
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), RouterError> {
        let io_err = |e: String| RouterError::Io { path: path.display().to_string(), message: e };
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| io_err(e.to_string()))?;
        }
        let json = serde_json::to_string(self).map_err(|e| io_err(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| io_err(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, RouterError> {
        let io_err = |e: String| RouterError::Io { path: path.display().to_string(), message: e };
        let text = std::fs::read_to_string(path).map_err(|e| io_err(e.to_string()))?;
        let model: RouterModel = serde_json::from_str(&text).map_err(|e| io_err(e.to_string()))?;
        if model.format_version != ROUTER_FORMAT_VERSION {
            return Err(RouterError::VersionMismatch {
                found: model.format_version,
                expected: ROUTER_FORMAT_VERSION,
            });
        }
        Ok(model)
    }
}

impl QuestionRouter for RouterModel {
    fn class_list(&self) -> &[String] {
        &self.class_list
    }

    fn predict_question(
        &self,
        q_augmented: &str,
        assignment: &EntityAssignment,
        k: usize,
    ) -> Result<Vec<Prediction>, RouterError> {
        let fv = featurize(q_augmented, assignment, &self.feature_config, &self.entity_vocabulary);
        predict_topk(self, &fv, k)
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Cross-entropy of one sample via log-sum-exp.
fn sample_loss(logits: &[f64], label_idx: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[label_idx]
}

/// Softmax probabilities over the classes, ranked descending; ties resolve
/// in class-list order. `k` larger than the class count is truncated.
pub fn predict_topk(model: &RouterModel, fv: &FeatureVector, k: usize) -> Result<Vec<Prediction>, RouterError> {
    if k == 0 {
        return Err(RouterError::InvalidK);
    }
    model.check_compatible(fv)?;
    let probs = softmax(&model.logits(fv));
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
    Ok(order
        .into_iter()
        .take(k.min(probs.len()))
        .map(|i| Prediction { class: model.class_list[i].clone(), probability: probs[i] })
        .collect())
}

/// Training output: the model plus the per-epoch full-dataset loss trace
/// (and, when a validation set was supplied, its accuracy trace).
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: RouterModel,
    pub loss_trace: Vec<f64>,
    pub val_accuracy_trace: Vec<f64>,
    /// Epoch at which early stopping triggered, if it did.
    pub stopped_early: Option<usize>,
}

struct AdamState {
    m_w: Vec<Vec<f64>>,
    v_w: Vec<Vec<f64>>,
    m_b: Vec<f64>,
    v_b: Vec<f64>,
    t: u64,
}

/// Train the softmax head with mini-batch Adam over shuffled epochs.
///
/// Deterministic for a fixed seed: identical data and config reproduce the
/// loss trace bit for bit.
pub fn train(
    pairs: &[(FeatureVector, String)],
    validation: Option<&[(FeatureVector, String)]>,
    feature_config: &FeatureConfig,
    vocabulary: &EntityVocabulary,
    config: &TrainConfig,
) -> Result<TrainOutcome, RouterError> {
    if pairs.is_empty() {
        return Err(RouterError::EmptyTrainingSet);
    }
    let mut class_list: Vec<String> = pairs.iter().map(|(_, c)| c.clone()).collect();
    class_list.sort();
    class_list.dedup();
    if class_list.len() < 2 {
        return Err(RouterError::DegenerateClasses(class_list.len()));
    }

    let dims = feature_config.text_dims + vocabulary.len();
    for (fv, _) in pairs {
        if fv.dims() != dims {
            return Err(RouterError::DimensionMismatch { expected: dims, got: fv.dims() });
        }
    }

    let n_classes = class_list.len();
    let label_idx: Vec<usize> = pairs
        .iter()
        .map(|(_, c)| class_list.binary_search(c).expect("label in class list"))
        .collect();

    let mut model = RouterModel {
        format_version: ROUTER_FORMAT_VERSION,
        feature_config: feature_config.clone(),
        entity_vocabulary: vocabulary.clone(),
        class_list,
        weights: vec![vec![0.0; dims]; n_classes],
        bias: vec![0.0; n_classes],
    };
    let mut adam = AdamState {
        m_w: vec![vec![0.0; dims]; n_classes],
        v_w: vec![vec![0.0; dims]; n_classes],
        m_b: vec![0.0; n_classes],
        v_b: vec![0.0; n_classes],
        t: 0,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut grad_w = vec![vec![0.0; dims]; n_classes];
    let mut grad_b = vec![0.0; n_classes];

    let mut loss_trace = Vec::new();
    let mut val_accuracy_trace = Vec::new();
    let mut best: Option<(f64, usize, Vec<Vec<f64>>, Vec<f64>)> = None;
    let mut stopped_early = None;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size.max(1)) {
            for row in grad_w.iter_mut() {
                row.fill(0.0);
            }
            grad_b.fill(0.0);

            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let (fv, _) = &pairs[i];
                let probs = softmax(&model.logits(fv));
                let offset = model.feature_config.text_dims;
                for c in 0..n_classes {
                    let delta = (probs[c] - if c == label_idx[i] { 1.0 } else { 0.0 }) * scale;
                    if delta == 0.0 {
                        continue;
                    }
                    for (bucket, count) in &fv.text_counts {
                        grad_w[c][*bucket as usize] += delta * count;
                    }
                    for (j, set) in fv.entity_bits.iter().enumerate() {
                        if *set {
                            grad_w[c][offset + j] += delta;
                        }
                    }
                    grad_b[c] += delta;
                }
            }

            adam_step(&mut model, &mut adam, &grad_w, &grad_b, config);
        }

        let epoch_loss = dataset_loss(&model, pairs, &label_idx);
        if !epoch_loss.is_finite() {
            return Err(RouterError::TrainingDiverged { epoch, loss: epoch_loss });
        }
        loss_trace.push(epoch_loss);

        if let Some(val) = validation {
            let acc = accuracy(&model, val);
            val_accuracy_trace.push(acc);
            if let Some(patience) = config.patience {
                let improved = best.as_ref().map_or(true, |(b, _, _, _)| acc > *b);
                if improved {
                    best = Some((acc, epoch, model.weights.clone(), model.bias.clone()));
                } else if let Some((_, best_epoch, _, _)) = &best {
                    if epoch - best_epoch > patience {
                        stopped_early = Some(epoch);
                        break;
                    }
                }
            }
        }
    }

    if let Some((_, _, weights, bias)) = best {
        if stopped_early.is_some() {
            model.weights = weights;
            model.bias = bias;
        }
    }

    Ok(TrainOutcome { model, loss_trace, val_accuracy_trace, stopped_early })
}

fn adam_step(
    model: &mut RouterModel,
    adam: &mut AdamState,
    grad_w: &[Vec<f64>],
    grad_b: &[f64],
    config: &TrainConfig,
) {
    adam.t += 1;
    let t = adam.t as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);

    for c in 0..model.weights.len() {
        for j in 0..model.weights[c].len() {
            let g = grad_w[c][j];
            let m = &mut adam.m_w[c][j];
            let v = &mut adam.v_w[c][j];
            *m = config.beta1 * *m + (1.0 - config.beta1) * g;
            *v = config.beta2 * *v + (1.0 - config.beta2) * g * g;
            model.weights[c][j] -= config.learning_rate * (*m / bc1) / ((*v / bc2).sqrt() + config.epsilon);
        }
        let g = grad_b[c];
        let m = &mut adam.m_b[c];
        let v = &mut adam.v_b[c];
        *m = config.beta1 * *m + (1.0 - config.beta1) * g;
        *v = config.beta2 * *v + (1.0 - config.beta2) * g * g;
        model.bias[c] -= config.learning_rate * (*m / bc1) / ((*v / bc2).sqrt() + config.epsilon);
    }
}

fn dataset_loss(model: &RouterModel, pairs: &[(FeatureVector, String)], label_idx: &[usize]) -> f64 {
    let total: f64 = pairs
        .iter()
        .zip(label_idx)
        .map(|((fv, _), &y)| sample_loss(&model.logits(fv), y))
        .sum();
    total / pairs.len() as f64
}

/// Fraction of pairs whose top-1 prediction equals the label.
pub fn accuracy(model: &RouterModel, pairs: &[(FeatureVector, String)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let hits = pairs
        .iter()
        .filter(|(fv, label)| {
            predict_topk(model, fv, 1)
                .map(|top| top.first().is_some_and(|p| p.class == *label))
                .unwrap_or(false)
        })
        .count();
    hits as f64 / pairs.len() as f64
}

/// Compare the analytic cross-entropy gradient against central finite
/// differences over every weight and bias coordinate for one sample.
/// Returns the maximum relative error.
pub fn gradient_check(
    model: &RouterModel,
    sample: &(FeatureVector, String),
    epsilon: f64,
) -> Result<f64, RouterError> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(RouterError::InvalidEpsilon(epsilon));
    }
    let (fv, label) = sample;
    model.check_compatible(fv)?;
    let y = model
        .class_list
        .iter()
        .position(|c| c == label)
        .ok_or_else(|| RouterError::DegenerateClasses(0))?;

    // Analytic gradient: dW[c][j] = (p_c - 1[c=y]) x_j, db[c] = p_c - 1[c=y].
    let probs = softmax(&model.logits(fv));
    let offset = model.feature_config.text_dims;
    let n_classes = model.class_list.len();
    let dims = model.dims();
    let mut analytic_w = vec![vec![0.0; dims]; n_classes];
    let mut analytic_b = vec![0.0; n_classes];
    for c in 0..n_classes {
        let delta = probs[c] - if c == y { 1.0 } else { 0.0 };
        for (bucket, count) in &fv.text_counts {
            analytic_w[c][*bucket as usize] = delta * count;
        }
        for (j, set) in fv.entity_bits.iter().enumerate() {
            if *set {
                analytic_w[c][offset + j] = delta;
            }
        }
        analytic_b[c] = delta;
    }

    let mut probe = model.clone();
    let mut max_rel = 0.0f64;
    let mut check = |analytic: f64, plus: f64, minus: f64| {
        let fd = (plus - minus) / (2.0 * epsilon);
        let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-8);
        max_rel = max_rel.max(rel);
    };

    for c in 0..n_classes {
        for j in 0..dims {
            let orig = probe.weights[c][j];
            probe.weights[c][j] = orig + epsilon;
            let plus = sample_loss(&probe.logits(fv), y);
            probe.weights[c][j] = orig - epsilon;
            let minus = sample_loss(&probe.logits(fv), y);
            probe.weights[c][j] = orig;
            check(analytic_w[c][j], plus, minus);
        }
        let orig = probe.bias[c];
        probe.bias[c] = orig + epsilon;
        let plus = sample_loss(&probe.logits(fv), y);
        probe.bias[c] = orig - epsilon;
        let minus = sample_loss(&probe.logits(fv), y);
        probe.bias[c] = orig;
        check(analytic_b[c], plus, minus);
    }

    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn no_entities() -> (EntityAssignment, EntityVocabulary) {
        let assignment = EntityAssignment {
            question: String::new(),
            values: Default::default(),
            true_entities: vec![],
        };
        let vocabulary = EntityVocabulary::from_rulesets([]);
        (assignment, vocabulary)
    }

    fn sparse(text_dims: usize, counts: &[(u32, f64)]) -> FeatureVector {
        FeatureVector { text_counts: counts.to_vec(), entity_bits: vec![], text_dims }
    }

    fn fixture_model(text_dims: usize, weights: Vec<Vec<f64>>, bias: Vec<f64>) -> RouterModel {
        let classes = (0..weights.len()).map(|i| format!("c{i}")).collect();
        RouterModel {
            format_version: ROUTER_FORMAT_VERSION,
            feature_config: FeatureConfig { text_dims, hash_seed: 0, tokenizer_version: 1 },
            entity_vocabulary: EntityVocabulary::from_rulesets([]),
            class_list: classes,
            weights,
            bias,
        }
    }

    #[test]
    fn test_featurize_deterministic() {
        let (assignment, vocabulary) = no_entities();
        let config = FeatureConfig { text_dims: 512, hash_seed: 3, tokenizer_version: 1 };
        let a = featurize("How many heads?", &assignment, &config, &vocabulary);
        let b = featurize("How many heads?", &assignment, &config, &vocabulary);
        assert_eq!(a, b);
    }

    #[test]
    fn test_featurize_empty_question_zero_vector() {
        let (assignment, vocabulary) = no_entities();
        let config = FeatureConfig { text_dims: 64, hash_seed: 0, tokenizer_version: 1 };
        let fv = featurize("?!.,", &assignment, &config, &vocabulary);
        assert!(fv.text_counts.is_empty());
        assert!(fv.entity_bits.is_empty());
    }

    #[test]
    fn test_featurize_entity_bits_isolated() {
        // Two calls differing only in the assignment differ only in the
        // entity-bit region.
        let rules = crate::rules::tests_support::two_entity_ruleset();
        let vocabulary = EntityVocabulary::from_rulesets([&rules]);
        let config = FeatureConfig { text_dims: 128, hash_seed: 0, tokenizer_version: 1 };

        let off = EntityAssignment::all_false("q text", &rules);
        let mut on = EntityAssignment::all_false("q text", &rules);
        on.values.insert("first_entity".into(), true);
        on.true_entities = vec!["first_entity".into()];

        let a = featurize("q text", &off, &config, &vocabulary);
        let b = featurize("q text", &on, &config, &vocabulary);
        assert_eq!(a.text_counts, b.text_counts);
        assert_ne!(a.entity_bits, b.entity_bits);
        assert_eq!(a.dims(), b.dims());
    }

    #[test]
    fn test_fnv_is_stable() {
        // Frozen values: the persisted model format depends on this hash
        // never changing.
        assert_eq!(fnv1a64(0, ""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(0, "a"), 0xaf63dc4c8601ec8c);
        assert_ne!(fnv1a64(1, "a"), fnv1a64(0, "a"));
    }

    #[test]
    fn test_predict_hand_computed_three_class() {
        // logits for x = (1,1,1): [1, 1, 2]
        let model = fixture_model(
            3,
            vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 2.0]],
            vec![0.0; 3],
        );
        let fv = sparse(3, &[(0, 1.0), (1, 1.0), (2, 1.0)]);
        let top = predict_topk(&model, &fv, 3).unwrap();

        assert_eq!(top[0].class, "c2");
        // e / (2e + e^2) and e^2 / (2e + e^2), computed by hand.
        let e = std::f64::consts::E;
        let denom = 2.0 * e + e * e;
        assert!((top[0].probability - (e * e) / denom).abs() < 1e-9);
        assert!((top[1].probability - e / denom).abs() < 1e-9);
        // Tie between c0 and c1 resolves in class-list order.
        assert_eq!(top[1].class, "c0");
        assert_eq!(top[2].class, "c1");
    }

    #[test]
    fn test_predict_zero_model_uniform() {
        let model = fixture_model(4, vec![vec![0.0; 4]; 5], vec![0.0; 5]);
        let fv = sparse(4, &[(0, 3.0), (2, 1.0)]);
        let top = predict_topk(&model, &fv, 5).unwrap();
        for p in &top {
            assert!((p.probability - 0.2).abs() < 1e-12);
        }
        let classes: Vec<&str> = top.iter().map(|p| p.class.as_str()).collect();
        assert_eq!(classes, vec!["c0", "c1", "c2", "c3", "c4"]);
    }

    #[test]
    fn test_predict_full_k_sums_to_one() {
        let model = fixture_model(2, vec![vec![0.3, -0.2], vec![-1.0, 2.0], vec![0.0, 0.1]], vec![0.1, 0.0, -0.4]);
        let fv = sparse(2, &[(0, 1.0), (1, 2.0)]);
        let top = predict_topk(&model, &fv, 3).unwrap();
        let sum: f64 = top.iter().map(|p| p.probability).sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn test_predict_k_truncated_and_k_zero_rejected() {
        let model = fixture_model(2, vec![vec![0.0; 2]; 2], vec![0.0; 2]);
        let fv = sparse(2, &[(0, 1.0)]);
        assert_eq!(predict_topk(&model, &fv, 99).unwrap().len(), 2);
        assert!(matches!(predict_topk(&model, &fv, 0), Err(RouterError::InvalidK)));
    }

    /// Test-only separability oracle: the perceptron algorithm converges on
    /// a dataset iff it is linearly separable (with margin).
    fn perceptron_separable(points: &[(Vec<f64>, usize)], max_epochs: usize) -> bool {
        let dims = points[0].0.len();
        let mut w = vec![0.0f64; dims + 1];
        for _ in 0..max_epochs {
            let mut errors = 0;
            for (x, label) in points {
                let sign = if *label == 0 { -1.0 } else { 1.0 };
                let act: f64 = w[..dims].iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>() + w[dims];
                if act * sign <= 0.0 {
                    for (wi, xi) in w[..dims].iter_mut().zip(x) {
                        *wi += sign * xi;
                    }
                    w[dims] += sign;
                    errors += 1;
                }
            }
            if errors == 0 {
                return true;
            }
        }
        false
    }

    pub(crate) fn separable_fixture() -> Vec<(FeatureVector, String)> {
        let mut pairs = Vec::new();
        for i in 0..10 {
            let shift = i as f64 * 0.1;
            pairs.push((sparse(4, &[(0, 2.0 + shift), (1, 0.5)]), "alpha".to_string()));
            pairs.push((sparse(4, &[(0, 0.5), (1, 2.0 + shift)]), "beta".to_string()));
        }
        pairs
    }

    fn dense(fv: &FeatureVector) -> Vec<f64> {
        let mut x = vec![0.0; fv.dims()];
        for (b, v) in &fv.text_counts {
            x[*b as usize] = *v;
        }
        x
    }

    #[test]
    fn test_separable_fixture_reaches_full_accuracy() {
        let pairs = separable_fixture();

        // Oracle first: confirm the fixture really is linearly separable.
        let points: Vec<(Vec<f64>, usize)> = pairs
            .iter()
            .map(|(fv, c)| (dense(fv), if c == "alpha" { 0 } else { 1 }))
            .collect();
        assert!(perceptron_separable(&points, 1000), "fixture must be linearly separable");

        let config = TrainConfig { learning_rate: 0.05, epochs: 200, seed: 42, ..Default::default() };
        let feature_config = FeatureConfig { text_dims: 4, hash_seed: 0, tokenizer_version: 1 };
        let vocabulary = EntityVocabulary::from_rulesets([]);
        let outcome = train(&pairs, None, &feature_config, &vocabulary, &config).unwrap();
        assert_eq!(accuracy(&outcome.model, &pairs), 1.0);
    }

    #[test]
    fn test_loss_trace_non_increasing_on_separable_fixture() {
        let pairs = separable_fixture();
        // Full-batch updates keep the epoch-end loss monotone here.
        let config = TrainConfig {
            learning_rate: 0.02,
            batch_size: pairs.len(),
            epochs: 100,
            seed: 7,
            ..Default::default()
        };
        let feature_config = FeatureConfig { text_dims: 4, hash_seed: 0, tokenizer_version: 1 };
        let vocabulary = EntityVocabulary::from_rulesets([]);
        let outcome = train(&pairs, None, &feature_config, &vocabulary, &config).unwrap();
        for pair in outcome.loss_trace.windows(2) {
            assert!(
                pair[1] <= pair[0] + 1e-12,
                "loss increased: {} -> {}",
                pair[0],
                pair[1]
            );
        }
    }

    #[test]
    fn test_training_deterministic_loss_trace() {
        let pairs = separable_fixture();
        let config = TrainConfig { learning_rate: 0.05, epochs: 30, seed: 9, ..Default::default() };
        let feature_config = FeatureConfig { text_dims: 4, hash_seed: 0, tokenizer_version: 1 };
        let vocabulary = EntityVocabulary::from_rulesets([]);
        let a = train(&pairs, None, &feature_config, &vocabulary, &config).unwrap();
        let b = train(&pairs, None, &feature_config, &vocabulary, &config).unwrap();
        assert_eq!(a.loss_trace, b.loss_trace);
        assert_eq!(a.model.weights, b.model.weights);
        assert_eq!(a.model.bias, b.model.bias);
    }

    #[test]
    fn test_single_adam_step_bounded_by_learning_rate() {
        // At step 1 the bias-corrected update is lr * g / (|g| + eps), so no
        // coordinate can move more than lr.
        let pairs = vec![
            (sparse(3, &[(0, 1.5), (2, 0.5)]), "a".to_string()),
            (sparse(3, &[(1, 2.0)]), "b".to_string()),
        ];
        let config = TrainConfig {
            learning_rate: 0.01,
            batch_size: 2,
            epochs: 1,
            seed: 0,
            ..Default::default()
        };
        let feature_config = FeatureConfig { text_dims: 3, hash_seed: 0, tokenizer_version: 1 };
        let vocabulary = EntityVocabulary::from_rulesets([]);
        let outcome = train(&pairs, None, &feature_config, &vocabulary, &config).unwrap();
        for row in &outcome.model.weights {
            for w in row {
                assert!(w.abs() <= config.learning_rate * (1.0 + 1e-9), "|{w}| > lr");
            }
        }
        for b in &outcome.model.bias {
            assert!(b.abs() <= config.learning_rate * (1.0 + 1e-9));
        }
    }

    #[test]
    fn test_train_rejects_degenerate_classes() {
        let pairs = vec![
            (sparse(2, &[(0, 1.0)]), "only".to_string()),
            (sparse(2, &[(1, 1.0)]), "only".to_string()),
        ];
        let feature_config = FeatureConfig { text_dims: 2, hash_seed: 0, tokenizer_version: 1 };
        let vocabulary = EntityVocabulary::from_rulesets([]);
        let err = train(&pairs, None, &feature_config, &vocabulary, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, RouterError::DegenerateClasses(1)));
    }

    #[test]
    fn test_gradient_check_random_small_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..3 {
            let n_classes = 3;
            let dims = 10;
            let weights: Vec<Vec<f64>> =
                (0..n_classes).map(|_| (0..dims).map(|_| rng.gen_range(-0.5..0.5)).collect()).collect();
            let bias: Vec<f64> = (0..n_classes).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let model = fixture_model(dims, weights, bias);
            let fv = sparse(dims, &[(0, 1.2), (3, -0.7), (7, 2.0)]);
            let err = gradient_check(&model, &(fv, "c1".to_string()), 1e-5).unwrap();
            assert!(err < 1e-4, "gradient check failed: {err}");
        }
    }

    #[test]
    fn test_gradient_check_two_step_sizes() {
        let model = fixture_model(
            4,
            vec![vec![0.2, -0.1, 0.3, 0.0], vec![-0.2, 0.4, 0.0, 0.1], vec![0.0, 0.0, -0.3, 0.2]],
            vec![0.1, -0.1, 0.0],
        );
        let sample = (sparse(4, &[(1, 1.0), (2, 2.0)]), "c0".to_string());
        assert!(gradient_check(&model, &sample, 1e-4).unwrap() < 1e-3);
        assert!(gradient_check(&model, &sample, 1e-6).unwrap() < 1e-3);
    }

    #[test]
    fn test_gradient_check_near_zero_gradient_reported() {
        // Saturated model: correct-class probability ~1, gradients ~0. The
        // error is dominated by epsilon^2 terms; just confirm it reports.
        let model = fixture_model(2, vec![vec![50.0, 0.0], vec![0.0, 50.0]], vec![0.0, 0.0]);
        let sample = (sparse(2, &[(0, 1.0)]), "c0".to_string());
        let err = gradient_check(&model, &sample, 1e-5).unwrap();
        assert!(err.is_finite());
    }

    #[test]
    fn test_gradient_check_epsilon_bounds() {
        let model = fixture_model(2, vec![vec![0.0; 2]; 2], vec![0.0; 2]);
        let sample = (sparse(2, &[(0, 1.0)]), "c0".to_string());
        assert!(matches!(gradient_check(&model, &sample, 1e-8), Err(RouterError::InvalidEpsilon(_))));
        assert!(matches!(gradient_check(&model, &sample, 1e-2), Err(RouterError::InvalidEpsilon(_))));
    }

    #[test]
    fn test_model_save_load_roundtrip_and_version_gate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let model = fixture_model(3, vec![vec![0.25, -1.5, 0.0], vec![0.1, 0.2, 0.3]], vec![0.5, -0.5]);
        model.save(&path).unwrap();
        let loaded = RouterModel::load(&path).unwrap();
        assert_eq!(loaded, model);

        // Tamper the version: loading must fail loudly.
        let text = std::fs::read_to_string(&path).unwrap();
        let tampered = text.replace("\"format_version\":1", "\"format_version\":99");
        std::fs::write(&path, tampered).unwrap();
        assert!(matches!(RouterModel::load(&path), Err(RouterError::VersionMismatch { found: 99, .. })));
    }

    #[test]
    fn test_early_stopping_on_validation() {
        let pairs = separable_fixture();
        let config = TrainConfig {
            learning_rate: 0.05,
            epochs: 200,
            seed: 1,
            patience: Some(5),
            ..Default::default()
        };
        let feature_config = FeatureConfig { text_dims: 4, hash_seed: 0, tokenizer_version: 1 };
        let vocabulary = EntityVocabulary::from_rulesets([]);
        let outcome = train(&pairs, Some(&pairs), &feature_config, &vocabulary, &config).unwrap();
        // Validation accuracy saturates at 1.0 quickly, so patience triggers
        // long before the epoch cap.
        assert!(outcome.stopped_early.is_some());
        assert!(outcome.loss_trace.len() < 200);
        assert_eq!(accuracy(&outcome.model, &pairs), 1.0);
    }
}
