//! The norm-bound regression model.
//!
//! Same encoder family as the classifier — its own embedding table, mean
//! pooling, two feed-forward layers — with a scalar head squashed into
//! (0, eps_max) by a scaled sigmoid, trained with squared error against the
//! found norm bounds. Trained from scratch: sharing weights with the
//! classifier would let it read the attacked model's internals instead of
//! learning the correlation from text.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::stats::{kendall_tau, pearson_r, spearman_rho, CorrelationReport, MeasureRow};
use crate::textmodel::{read_param_file, write_param_file, ModelHeader, MODEL_FORMAT};
use crate::tuplestore::ScorerExample;

/// Architecture and optimization settings of the scorer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub max_len: usize,
    /// Upper end of the prediction range; matches the sweep cap of the
    /// dataset the scorer learns from.
    pub eps_max: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Extra learning-rate factor for embedding rows. Each row sees a
    /// gradient only when its token occurs, scaled down by the pooling mean,
    /// so rows need a larger step to keep pace with the dense parameters.
    pub embed_lr_scale: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        ScorerConfig {
            embed_dim: 24,
            hidden_dim: 32,
            max_len: 64,
            eps_max: 1.0,
            epochs: 40,
            learning_rate: 0.1,
            embed_lr_scale: 20.0,
            clip_norm: 5.0,
            seed: 42,
        }
    }
}

/// Regression model predicting a norm bound from a marked-up token sequence.
#[derive(Debug, Clone)]
pub struct ScorerModel {
    pub config: ScorerConfig,
    /// Hash of the vocabulary the input ids refer to; evaluation refuses
    /// datasets built against a different one.
    pub vocab_hash: String,
    pub embedding: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub w_head: Tensor,
    pub b_head: Tensor,
}

struct ScorerGraph {
    graph: Graph,
    x: NodeId,
    params: [NodeId; 6],
}

impl ScorerModel {
    pub fn init(vocab_size: usize, vocab_hash: String, config: ScorerConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h) = (config.embed_dim, config.hidden_dim);
        let mut uniform = |shape: Vec<usize>, scale: f64| {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
            Tensor::new(shape, data).expect("bounded init values are finite")
        };
        ScorerModel {
            embedding: uniform(vec![vocab_size, d], 0.5 / (d as f64).sqrt()),
            w1: uniform(vec![d, h], 1.0 / (d as f64).sqrt()),
            b1: Tensor::zeros(vec![1, h]),
            w2: uniform(vec![h, h], 1.0 / (h as f64).sqrt()),
            b2: Tensor::zeros(vec![1, h]),
            w_head: uniform(vec![h, 1], 1.0 / (h as f64).sqrt()),
            b_head: Tensor::zeros(vec![1, 1]),
            config,
            vocab_hash,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.shape()[0]
    }

    fn embed_ids(&self, ids: &[u32]) -> Result<Tensor> {
        let (l, d) = (self.config.max_len, self.config.embed_dim);
        let mut x = Tensor::zeros(vec![l, d]);
        for (i, &tok) in ids.iter().take(l).enumerate() {
            if tok as usize >= self.vocab_size() {
                return Err(Error::TokenOutOfRange {
                    id: tok,
                    size: self.vocab_size(),
                });
            }
            for c in 0..d {
                x.set(i, c, self.embedding.at(tok as usize, c));
            }
        }
        Ok(x)
    }

    /// Graph computing `eps_max * sigmoid(head(encoder(x)))`, with the
    /// sigmoid phrased through tanh. A target extends the root to the
    /// squared error.
    fn build_graph(&self, n_tokens: usize, target: Option<f64>) -> Result<ScorerGraph> {
        let (l, d) = (self.config.max_len, self.config.embed_dim);
        let mut g = Graph::new();
        let x = g.input("x", &[l, d]);

        let n = n_tokens.min(l).max(1);
        let mut mask = Tensor::zeros(vec![1, l]);
        for i in 0..n {
            mask.data_mut()[i] = 1.0 / n as f64;
        }
        let mask = g.constant(mask);
        let pooled = g.matmul(mask, x)?;

        let w1 = g.constant(self.w1.clone());
        let b1 = g.constant(self.b1.clone());
        let w2 = g.constant(self.w2.clone());
        let b2 = g.constant(self.b2.clone());
        let wh = g.constant(self.w_head.clone());
        let bh = g.constant(self.b_head.clone());

        let h1 = g.matmul(pooled, w1)?;
        let h1 = g.add(h1, b1)?;
        let h1 = g.relu(h1);
        let h2 = g.matmul(h1, w2)?;
        let h2 = g.add(h2, b2)?;
        let h2 = g.relu(h2);
        let z = g.matmul(h2, wh)?;
        let z = g.add(z, bh)?;

        // sigmoid(z) = (tanh(z/2) + 1) / 2, scaled to the prediction range
        let half = g.constant(Tensor::scalar(0.5));
        let one = g.constant(Tensor::scalar(1.0));
        let zh = g.mul(z, half)?;
        let t = g.tanh(zh);
        let t1 = g.add(t, one)?;
        let sig = g.mul(t1, half)?;
        let cap = g.constant(Tensor::scalar(self.config.eps_max));
        let prediction = g.mul(sig, cap)?;

        if let Some(eps) = target {
            let neg_target = g.constant(Tensor::scalar(-eps));
            let diff = g.add(prediction, neg_target)?;
            g.mul(diff, diff)?;
        }

        if target.is_none() {
            debug_assert_eq!(g.output(), prediction);
        }
        Ok(ScorerGraph {
            graph: g,
            x,
            params: [w1, b1, w2, b2, wh, bh],
        })
    }
}

/// Predict the norm bound for one marked-up input. The squashing keeps the
/// raw output in [0, eps_max]; the clamp pins it strictly inside.
pub fn predict_epsilon(model: &ScorerModel, input_ids: &[u32]) -> Result<f64> {
    let mut built = model.build_graph(input_ids.len(), None)?;
    let mut bound = HashMap::new();
    bound.insert("x".to_string(), model.embed_ids(input_ids)?);
    let out = built.graph.forward(&bound)?;
    Ok(out.data()[0].clamp(1e-12, model.config.eps_max - 1e-12))
}

/// Train/validation loss trajectory, both evaluated on the full sets after
/// each epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScorerTrainLog {
    pub train_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
}

fn mean_squared_error(model: &ScorerModel, data: &[ScorerExample]) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for ex in data {
        let pred = predict_epsilon(model, &ex.input_ids)?;
        total += (pred - ex.target_epsilon).powi(2);
    }
    Ok(total / data.len() as f64)
}

/// SGD on squared error over shuffled examples; deterministic under the
/// config seed.
pub fn train_scorer(
    train: &[ScorerExample],
    val: &[ScorerExample],
    vocab_size: usize,
    vocab_hash: String,
    cfg: &ScorerConfig,
) -> Result<(ScorerModel, ScorerTrainLog)> {
    let distinct: std::collections::HashSet<u64> =
        train.iter().map(|e| e.target_epsilon.to_bits()).collect();
    if distinct.len() < 2 {
        return Err(Error::InvalidConfig(vec![format!(
            "scorer training needs at least 2 distinct targets, found {}",
            distinct.len()
        )]));
    }

    let mut model = ScorerModel::init(vocab_size, vocab_hash, cfg.clone(), cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = ScorerTrainLog {
        train_losses: Vec::new(),
        val_losses: Vec::new(),
    };

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        for &idx in &order {
            let ex = &train[idx];
            let x = model.embed_ids(&ex.input_ids)?;
            let mut built = model.build_graph(ex.input_ids.len(), Some(ex.target_epsilon))?;
            let mut bound = HashMap::new();
            bound.insert("x".to_string(), x);
            let loss = built.graph.forward(&bound).map_err(|e| match e {
                Error::NonFinite { .. } => Error::TrainingDiverged { epoch },
                other => other,
            })?;
            if !loss.data()[0].is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }

            let mut wrt = vec![built.x];
            wrt.extend(built.params);
            let mut grads = built.graph.backward(&wrt)?;
            let dx = grads.remove(&built.x).expect("requested");
            let mut pgrads: Vec<Tensor> = built
                .params
                .iter()
                .map(|id| grads.remove(id).expect("requested"))
                .collect();

            let mut sq = dx.data().iter().map(|v| v * v).sum::<f64>();
            for g in &pgrads {
                sq += g.data().iter().map(|v| v * v).sum::<f64>();
            }
            let gnorm = sq.sqrt();
            let scale = if gnorm > cfg.clip_norm {
                cfg.clip_norm / gnorm
            } else {
                1.0
            };
            let lr = cfg.learning_rate * scale;

            for (g, p) in pgrads.drain(..).zip([
                &mut model.w1,
                &mut model.b1,
                &mut model.w2,
                &mut model.b2,
                &mut model.w_head,
                &mut model.b_head,
            ]) {
                p.add_scaled(&g, -lr);
            }
            let d = model.config.embed_dim;
            let emb_lr = lr * cfg.embed_lr_scale;
            for (i, &tok) in ex.input_ids.iter().take(model.config.max_len).enumerate() {
                for c in 0..d {
                    let g = dx.at(i, c);
                    if g != 0.0 {
                        let cur = model.embedding.at(tok as usize, c);
                        model.embedding.set(tok as usize, c, cur - emb_lr * g);
                    }
                }
            }
        }
        log.train_losses.push(mean_squared_error(&model, train)?);
        log.val_losses.push(mean_squared_error(&model, val)?);
    }
    Ok((model, log))
}

/// Identifiers stamped onto a report.
#[derive(Debug, Clone)]
pub struct ReportIds {
    pub setup: String,
    pub dataset: String,
    pub method: String,
    pub model_id: String,
}

/// One line of the prediction dump CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub text_hash: String,
    pub epsilon_true: f64,
    pub epsilon_pred: f64,
    pub edit_distance: usize,
    pub similarity_proxy: f64,
}

pub fn render_prediction_csv(rows: &[PredictionRow]) -> String {
    let mut out =
        String::from("text_hash,epsilon_true,epsilon_pred,edit_distance,similarity_proxy\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.text_hash, r.epsilon_true, r.epsilon_pred, r.edit_distance, r.similarity_proxy
        ));
    }
    out
}

/// Correlate the scorer's predictions and both baseline measures against
/// the found norm bounds of a test set. The similarity proxy enters
/// negated so every measure is expected to correlate positively.
pub fn evaluate_scorer(
    model: &ScorerModel,
    test: &[ScorerExample],
    dataset_vocab_hash: &str,
    ids: &ReportIds,
) -> Result<(CorrelationReport, Vec<PredictionRow>)> {
    if model.vocab_hash != dataset_vocab_hash {
        return Err(Error::VocabMismatch {
            model: model.vocab_hash[..16.min(model.vocab_hash.len())].to_string(),
            dataset: dataset_vocab_hash[..16.min(dataset_vocab_hash.len())].to_string(),
        });
    }
    let mut rows = Vec::with_capacity(test.len());
    for ex in test {
        rows.push(PredictionRow {
            text_hash: ex.text_hash.clone(),
            epsilon_true: ex.target_epsilon,
            epsilon_pred: predict_epsilon(model, &ex.input_ids)?,
            edit_distance: ex.edit_distance,
            similarity_proxy: ex.similarity_proxy,
        });
    }

    let eps: Vec<f64> = rows.iter().map(|r| r.epsilon_true).collect();
    let measure = |name: &str, values: Vec<f64>| -> Result<MeasureRow> {
        Ok(MeasureRow {
            measure: name.to_string(),
            kendall: kendall_tau(&values, &eps)?,
            spearman: spearman_rho(&values, &eps)?,
            pearson: pearson_r(&values, &eps)?,
        })
    };
    let report = CorrelationReport {
        setup: ids.setup.clone(),
        dataset: ids.dataset.clone(),
        method: ids.method.clone(),
        model_id: ids.model_id.clone(),
        samples: rows.len(),
        rows: vec![
            measure(
                "edit_distance",
                rows.iter().map(|r| r.edit_distance as f64).collect(),
            )?,
            measure(
                "neg_similarity",
                rows.iter().map(|r| -r.similarity_proxy).collect(),
            )?,
            measure("scorer", rows.iter().map(|r| r.epsilon_pred).collect())?,
        ],
    };
    Ok((report, rows))
}

/// Evaluate against a dataset the scorer was not trained on; `ids.setup`
/// should name the train/test pairing.
pub fn cross_evaluate(
    model: &ScorerModel,
    foreign_test: &[ScorerExample],
    dataset_vocab_hash: &str,
    ids: &ReportIds,
) -> Result<(CorrelationReport, Vec<PredictionRow>)> {
    evaluate_scorer(model, foreign_test, dataset_vocab_hash, ids)
}

impl ScorerModel {
    fn params(&self) -> [(&'static str, &Tensor); 7] {
        [
            ("embedding", &self.embedding),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
            ("w_head", &self.w_head),
            ("b_head", &self.b_head),
        ]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = ModelHeader {
            format: MODEL_FORMAT.to_string(),
            kind: "scorer".to_string(),
            config: serde_json::to_value(&self.config)?,
            vocab: None,
            vocab_hash: self.vocab_hash.clone(),
            shapes: self
                .params()
                .iter()
                .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
                .collect(),
        };
        let data: Vec<&Tensor> = self.params().iter().map(|(_, t)| *t).collect();
        write_param_file(path, &header, &data)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, mut tensors) = read_param_file(path)?;
        let bad = |reason: &str| Error::ModelFormat {
            path: path.display().to_string(),
            reason: reason.to_string(),
        };
        if header.kind != "scorer" {
            return Err(bad(&format!(
                "expected a scorer model, found `{}`",
                header.kind
            )));
        }
        let config: ScorerConfig = serde_json::from_value(header.config)?;
        let mut take = |name: &str| {
            tensors
                .remove(name)
                .ok_or_else(|| bad(&format!("missing parameter `{name}`")))
        };
        Ok(ScorerModel {
            config,
            vocab_hash: header.vocab_hash,
            embedding: take("embedding")?,
            w1: take("w1")?,
            b1: take("b1")?,
            w2: take("w2")?,
            b2: take("b2")?,
            w_head: take("w_head")?,
            b_head: take("b_head")?,
        })
    }
}
