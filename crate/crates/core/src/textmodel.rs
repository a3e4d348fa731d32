//! Tokenizer, vocabulary, embedding table and the classifier under attack.
//!
//! The classifier is a mean-pooled feed-forward net over token embeddings:
//! differentiable with respect to the embedding matrix `X`, cheap enough for
//! the norm-bound search's forward-pass volume, and still sharp enough to
//! show the monotone relation between perturbation strength and output
//! shift. Training is plain per-example SGD with gradient clipping so runs
//! are bit-reproducible under a fixed seed; the adversarial variant ascends
//! an embedding-space perturbation inside an L2 ball before each update.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffcore::{Graph, NodeId, Tensor};
use crate::epsilon_search::project_l2;
use crate::error::{Error, Result};

/// Reserved token ids. Positions beyond a sequence's length are padding,
/// `[` / `]` delimit replacement tokens in scorer inputs.
pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const MARK_OPEN_ID: u32 = 2;
pub const MARK_CLOSE_ID: u32 = 3;

const RESERVED: [&str; 4] = ["<pad>", "<unk>", "[", "]"];

/// Token/id bijection with the four reserved entries pinned to ids 0..3.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    /// Build from raw texts: tokens are counted with the same splitter used
    /// by [`tokenize`], then kept by descending frequency (ties broken
    /// lexicographically) up to `max_size` entries including the reserved
    /// four.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, max_size: usize) -> Self {
        let mut counts: HashMap<String, u64> = HashMap::new();
        for text in texts {
            for tok in split_tokens(text) {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(String, u64)> = counts
            .into_iter()
            .filter(|(t, _)| !RESERVED.contains(&t.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(
            ranked
                .into_iter()
                .take(max_size.saturating_sub(RESERVED.len()))
                .map(|(t, _)| t),
        );
        Self::from_tokens(id_to_token)
    }

    /// Rebuild from an id-ordered token list (reserved entries first).
    pub fn from_tokens(id_to_token: Vec<String>) -> Self {
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary {
            token_to_id,
            id_to_token,
        }
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn is_reserved(id: u32) -> bool {
        id < RESERVED.len() as u32
    }

    /// Content hash of the id-ordered token list.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for t in &self.id_to_token {
            hasher.update(t.as_bytes());
            hasher.update(b"\n");
        }
        hex::encode(hasher.finalize())
    }
}

/// Lowercase and split on non-alphanumeric characters; `[` and `]` survive
/// as standalone tokens so scorer markup round-trips through tokenization.
pub fn split_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if ch == '[' || ch == ']' {
                out.push(ch.to_string());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// A tokenized text with its class label.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
    pub label: usize,
    pub raw_text: String,
}

impl TokenSequence {
    /// Stable content hash of the raw text, used to tie perturbations and
    /// tuples back to their parent.
    pub fn text_hash(&self) -> String {
        text_hash(&self.raw_text)
    }
}

/// Hash of a raw text (first 16 hex chars of sha256).
pub fn text_hash(raw_text: &str) -> String {
    let digest = Sha256::digest(raw_text.as_bytes());
    hex::encode(&digest[..8])
}

/// Tokenize a text against a vocabulary: lowercased, split on
/// whitespace/punctuation, OOV mapped to `<unk>`, truncated to `max_len`.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<TokenSequence> {
    let mut tokens: Vec<u32> = split_tokens(text)
        .into_iter()
        .map(|t| vocab.id(&t).unwrap_or(UNK_ID))
        .collect();
    if tokens.is_empty() {
        return Err(Error::EmptyTokenization(text.to_string()));
    }
    tokens.truncate(max_len);
    Ok(TokenSequence {
        tokens,
        label: 0,
        raw_text: text.to_string(),
    })
}

/// Architecture hyperparameters of the classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub n_classes: usize,
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 16,
            hidden_dim: 32,
            n_classes: 2,
            max_len: 32,
        }
    }
}

/// Mean-pool encoder with a two-layer feed-forward stack and a linear head.
#[derive(Debug, Clone)]
pub struct ClassifierModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    /// V x d token embedding table; the padding row stays zero.
    pub embedding: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub w3: Tensor,
    pub b3: Tensor,
}

/// Logits and softmax probabilities of one forward pass.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl ModelOutput {
    pub fn predicted(&self) -> usize {
        argmax(&self.probs)
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

fn uniform_tensor<R: Rng>(rng: &mut R, shape: Vec<usize>, scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape, data).expect("bounded init values are finite")
}

pub(crate) struct BuiltGraph {
    pub graph: Graph,
    pub x: NodeId,
    pub delta: Option<NodeId>,
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
    pub w3: NodeId,
    pub b3: NodeId,
    pub logits: NodeId,
    pub probs: NodeId,
}

impl ClassifierModel {
    /// Fresh model with seeded uniform init, fan-in scaled.
    pub fn init(vocab: Vocabulary, config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (v, d, h, c) = (
            vocab.len(),
            config.embed_dim,
            config.hidden_dim,
            config.n_classes,
        );
        let mut embedding = uniform_tensor(&mut rng, vec![v, d], 0.5 / (d as f64).sqrt());
        for col in 0..d {
            embedding.set(PAD_ID as usize, col, 0.0);
        }
        let w1 = uniform_tensor(&mut rng, vec![d, h], 1.0 / (d as f64).sqrt());
        let w2 = uniform_tensor(&mut rng, vec![h, h], 1.0 / (h as f64).sqrt());
        let w3 = uniform_tensor(&mut rng, vec![h, c], 1.0 / (h as f64).sqrt());
        ClassifierModel {
            config,
            vocab,
            embedding,
            w1,
            b1: Tensor::zeros(vec![1, h]),
            w2,
            b2: Tensor::zeros(vec![1, h]),
            w3,
            b3: Tensor::zeros(vec![1, c]),
        }
    }

    /// Embedding matrix of a sequence: row i is the embedding of token i,
    /// rows past the sequence length are zero padding. Always `max_len x d`.
    pub fn embed(&self, s: &TokenSequence) -> Result<Tensor> {
        let (l, d) = (self.config.max_len, self.config.embed_dim);
        let mut x = Tensor::zeros(vec![l, d]);
        for (i, &tok) in s.tokens.iter().take(l).enumerate() {
            if tok as usize >= self.vocab.len() {
                return Err(Error::TokenOutOfRange {
                    id: tok,
                    size: self.vocab.len(),
                });
            }
            for c in 0..d {
                x.set(i, c, self.embedding.at(tok as usize, c));
            }
        }
        Ok(x)
    }

    fn n_tokens(&self, s: &TokenSequence) -> usize {
        s.tokens.len().min(self.config.max_len)
    }

    /// Pooling mask: averages the first `n_tokens` rows, ignores padding.
    fn pool_mask(&self, n_tokens: usize) -> Tensor {
        let l = self.config.max_len;
        let n = n_tokens.min(l).max(1);
        let mut mask = Tensor::zeros(vec![1, l]);
        for i in 0..n {
            mask.data_mut()[i] = 1.0 / n as f64;
        }
        mask
    }

    /// Assemble the forward graph. `x` is an input node bound at run time;
    /// with `with_delta` the net consumes `x + delta` so gradients with
    /// respect to the perturbation are available. A `target` label appends
    /// the cross-entropy loss as the scalar root.
    pub(crate) fn build_graph(
        &self,
        n_tokens: usize,
        target: Option<usize>,
        with_delta: bool,
    ) -> Result<BuiltGraph> {
        let (l, d) = (self.config.max_len, self.config.embed_dim);
        let mut g = Graph::new();
        let x = g.input("x", &[l, d]);
        let delta = with_delta.then(|| g.input("delta", &[l, d]));
        let fed = match delta {
            Some(dn) => g.add(x, dn)?,
            None => x,
        };
        let mask = g.constant(self.pool_mask(n_tokens));
        let pooled = g.matmul(mask, fed)?;

        let w1 = g.constant(self.w1.clone());
        let b1 = g.constant(self.b1.clone());
        let w2 = g.constant(self.w2.clone());
        let b2 = g.constant(self.b2.clone());
        let w3 = g.constant(self.w3.clone());
        let b3 = g.constant(self.b3.clone());

        let h1 = g.matmul(pooled, w1)?;
        let h1 = g.add(h1, b1)?;
        let h1 = g.relu(h1);
        let h2 = g.matmul(h1, w2)?;
        let h2 = g.add(h2, b2)?;
        let h2 = g.relu(h2);
        let logits = g.matmul(h2, w3)?;
        let logits = g.add(logits, b3)?;
        let probs = g.softmax(logits)?;

        if let Some(label) = target {
            let c = self.config.n_classes;
            let mut onehot = vec![0.0; c];
            onehot[label] = 1.0;
            let oh = g.constant(Tensor::row(onehot));
            let picked = g.mul(probs, oh)?;
            let picked = g.sum(picked);
            let logp = g.log(picked);
            let neg = g.constant(Tensor::scalar(-1.0));
            g.mul(logp, neg)?;
        }

        Ok(BuiltGraph {
            graph: g,
            x,
            delta,
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            logits,
            probs,
        })
    }

    /// Run the net on an embedding matrix, masking `n_tokens` real rows.
    pub fn forward_from_embeddings(&self, x: &Tensor, n_tokens: usize) -> Result<ModelOutput> {
        if x.shape() != [self.config.max_len, self.config.embed_dim] {
            return Err(Error::ShapeMismatch {
                op: "forward_from_embeddings",
                details: format!(
                    "expected [{}, {}], got {:?}",
                    self.config.max_len,
                    self.config.embed_dim,
                    x.shape()
                ),
            });
        }
        let mut built = self.build_graph(n_tokens, None, false)?;
        let mut bound = HashMap::new();
        bound.insert("x".to_string(), x.clone());
        built.graph.forward(&bound)?;
        Ok(ModelOutput {
            logits: built
                .graph
                .value(built.logits)
                .expect("forward ran")
                .data()
                .to_vec(),
            probs: built
                .graph
                .value(built.probs)
                .expect("forward ran")
                .data()
                .to_vec(),
        })
    }

    /// Token-level entry point; identical to embedding then
    /// [`Self::forward_from_embeddings`] by construction.
    pub fn forward(&self, s: &TokenSequence) -> Result<ModelOutput> {
        let x = self.embed(s)?;
        self.forward_from_embeddings(&x, self.n_tokens(s))
    }

    /// Fraction of correctly classified sequences.
    pub fn accuracy(&self, corpus: &[TokenSequence]) -> Result<f64> {
        if corpus.is_empty() {
            return Ok(0.0);
        }
        let mut hits = 0usize;
        for s in corpus {
            if self.forward(s)?.predicted() == s.label {
                hits += 1;
            }
        }
        Ok(hits as f64 / corpus.len() as f64)
    }

    #[cfg(test)]
    fn params_mut(&mut self) -> [(&'static str, &mut Tensor); 7] {
        [
            ("embedding", &mut self.embedding),
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
            ("w3", &mut self.w3),
            ("b3", &mut self.b3),
        ]
    }

    fn params(&self) -> [(&'static str, &Tensor); 7] {
        [
            ("embedding", &self.embedding),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
            ("w3", &self.w3),
            ("b3", &self.b3),
        ]
    }

    /// Serialize as a JSON header followed by the flat little-endian f64
    /// parameter block.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = ModelHeader {
            format: MODEL_FORMAT.to_string(),
            kind: "classifier".to_string(),
            config: serde_json::to_value(&self.config)?,
            vocab: Some(self.vocab.tokens().to_vec()),
            vocab_hash: self.vocab.hash(),
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
        if header.kind != "classifier" {
            return Err(bad(&format!(
                "expected a classifier model, found `{}`",
                header.kind
            )));
        }
        let config: ModelConfig = serde_json::from_value(header.config)?;
        let vocab = Vocabulary::from_tokens(header.vocab.ok_or_else(|| bad("missing vocab"))?);
        if vocab.hash() != header.vocab_hash {
            return Err(bad("vocab hash does not match the stored vocabulary"));
        }
        let mut take = |name: &str| {
            tensors
                .remove(name)
                .ok_or_else(|| bad(&format!("missing parameter `{name}`")))
        };
        Ok(ClassifierModel {
            config,
            vocab,
            embedding: take("embedding")?,
            w1: take("w1")?,
            b1: take("b1")?,
            w2: take("w2")?,
            b2: take("b2")?,
            w3: take("w3")?,
            b3: take("b3")?,
        })
    }
}

/// Normalized output shift between two model output vectors:
/// `||a - b|| / (||a|| * ||b||)`. Zero exactly when the outputs coincide.
pub fn model_output_shift(a: &[f64], b: &[f64]) -> Result<f64> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNormOutput);
    }
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    Ok(diff / (na * nb))
}

/// Optimization settings shared by both training modes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Fixed extra factor on embedding-row updates. The pooling mean scales
    /// embedding gradients down by the text length and each row is touched
    /// only when its token occurs, so without the boost the head learns
    /// orders of magnitude faster than the features under it.
    pub embed_lr_scale: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            learning_rate: 0.08,
            embed_lr_scale: 20.0,
            clip_norm: 5.0,
            seed: 42,
        }
    }
}

/// Adversarial training settings: inner ascent steps, step size and the L2
/// ball radius for the embedding perturbation. `eps_train == 0` degenerates
/// to standard training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdvTrainConfig {
    pub base: TrainConfig,
    pub inner_steps: usize,
    pub step_size: f64,
    pub eps_train: f64,
}

/// Per-epoch record of a training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLog {
    pub epoch_losses: Vec<f64>,
    pub eval_accuracy: f64,
    /// Mean final inner perturbation norm per epoch; empty for standard runs.
    pub epoch_delta_norms: Vec<f64>,
}

/// Standard training: SGD over shuffled examples, fixed learning rate,
/// gradient clipping, deterministic under the seed.
pub fn train_classifier(
    train: &[TokenSequence],
    eval: &[TokenSequence],
    vocab: Vocabulary,
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
) -> Result<(ClassifierModel, TrainLog)> {
    let adv = AdvTrainConfig {
        base: cfg.clone(),
        inner_steps: 0,
        step_size: 0.0,
        eps_train: 0.0,
    };
    adv_train_classifier(train, eval, vocab, model_cfg, &adv)
}

/// FreeLB-style training: before each parameter update, ascend a
/// perturbation of the embedding matrix inside the `eps_train` ball
/// (normalized gradient steps with projection), then descend the loss at
/// the perturbed point.
pub fn adv_train_classifier(
    train: &[TokenSequence],
    eval: &[TokenSequence],
    vocab: Vocabulary,
    model_cfg: ModelConfig,
    cfg: &AdvTrainConfig,
) -> Result<(ClassifierModel, TrainLog)> {
    let classes: std::collections::HashSet<usize> = train.iter().map(|s| s.label).collect();
    if classes.len() < 2 {
        return Err(Error::InvalidConfig(vec![format!(
            "training corpus must contain at least 2 classes, found {}",
            classes.len()
        )]));
    }

    let mut model = ClassifierModel::init(vocab, model_cfg, cfg.base.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.base.seed);
    let mut log = TrainLog {
        epoch_losses: Vec::with_capacity(cfg.base.epochs),
        eval_accuracy: 0.0,
        epoch_delta_norms: Vec::new(),
    };
    let adversarial = cfg.eps_train > 0.0;

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.base.epochs {
        shuffle(&mut order, &mut rng);
        let mut loss_sum = 0.0;
        let mut delta_norm_sum = 0.0;

        for &idx in &order {
            let s = &train[idx];
            let x = model.embed(s)?;
            let n = model.n_tokens(s);
            let mut built = model.build_graph(n, Some(s.label), adversarial)?;

            let mut bound = HashMap::new();
            bound.insert("x".to_string(), x);

            if adversarial {
                let shape = vec![model.config.max_len, model.config.embed_dim];
                let mut delta = Tensor::zeros(shape);
                let delta_node = built.delta.expect("graph built with delta");
                for _ in 0..cfg.inner_steps {
                    bound.insert("delta".to_string(), delta.clone());
                    built
                        .graph
                        .forward(&bound)
                        .map_err(|e| diverged(e, epoch))?;
                    let g = built
                        .graph
                        .backward(&[delta_node])?
                        .remove(&delta_node)
                        .expect("requested");
                    let gnorm = g.l2_norm();
                    if gnorm == 0.0 {
                        break;
                    }
                    delta.add_scaled(&g, cfg.step_size / gnorm);
                    delta = project_l2(&delta, cfg.eps_train);
                }
                delta_norm_sum += delta.l2_norm();
                bound.insert("delta".to_string(), delta);
            }

            let loss = built
                .graph
                .forward(&bound)
                .map_err(|e| diverged(e, epoch))?
                .data()[0];
            loss_sum += loss;

            let wrt = [
                built.x, built.w1, built.b1, built.w2, built.b2, built.w3, built.b3,
            ];
            let mut grads = built.graph.backward(&wrt)?;
            let dx = grads.remove(&built.x).expect("requested");
            let mut param_grads = [
                grads.remove(&built.w1).expect("requested"),
                grads.remove(&built.b1).expect("requested"),
                grads.remove(&built.w2).expect("requested"),
                grads.remove(&built.b2).expect("requested"),
                grads.remove(&built.w3).expect("requested"),
                grads.remove(&built.b3).expect("requested"),
            ];

            // clip by the global norm over every updated tensor
            let mut sq = dx.data().iter().map(|v| v * v).sum::<f64>();
            for g in &param_grads {
                sq += g.data().iter().map(|v| v * v).sum::<f64>();
            }
            let gnorm = sq.sqrt();
            let scale = if gnorm > cfg.base.clip_norm {
                cfg.base.clip_norm / gnorm
            } else {
                1.0
            };
            let lr = cfg.base.learning_rate * scale;

            for (g, name) in param_grads
                .iter_mut()
                .zip(["w1", "b1", "w2", "b2", "w3", "b3"])
            {
                let param = match name {
                    "w1" => &mut model.w1,
                    "b1" => &mut model.b1,
                    "w2" => &mut model.w2,
                    "b2" => &mut model.b2,
                    "w3" => &mut model.w3,
                    _ => &mut model.b3,
                };
                param.add_scaled(g, -lr);
            }
            // scatter embedding-row gradients back through the gather
            let d = model.config.embed_dim;
            let emb_lr = lr * cfg.base.embed_lr_scale;
            for (i, &tok) in s.tokens.iter().take(model.config.max_len).enumerate() {
                for c in 0..d {
                    let g = dx.at(i, c);
                    if g != 0.0 {
                        let cur = model.embedding.at(tok as usize, c);
                        model.embedding.set(tok as usize, c, cur - emb_lr * g);
                    }
                }
            }
        }

        let mean_loss = loss_sum / train.len().max(1) as f64;
        if !mean_loss.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        log.epoch_losses.push(mean_loss);
        if adversarial {
            log.epoch_delta_norms
                .push(delta_norm_sum / train.len().max(1) as f64);
        }
    }

    log.eval_accuracy = model.accuracy(eval)?;
    Ok((model, log))
}

fn diverged(err: Error, epoch: usize) -> Error {
    match err {
        Error::NonFinite { .. } => Error::TrainingDiverged { epoch },
        other => other,
    }
}

/// Fisher-Yates with the caller's rng; kept local so shuffles stay identical
/// across rand version bumps.
fn shuffle<R: Rng>(xs: &mut [usize], rng: &mut R) {
    for i in (1..xs.len()).rev() {
        let j = rng.random_range(0..=i);
        xs.swap(i, j);
    }
}

/// Empirical Lipschitz probe: sampled ratios of output change to
/// perturbation norm around a sequence's embedding matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    pub max_ratio: f64,
    pub mean_ratio: f64,
    pub samples: usize,
}

pub fn estimate_lipschitz<R: Rng>(
    model: &ClassifierModel,
    s: &TokenSequence,
    samples: usize,
    radius: f64,
    rng: &mut R,
) -> Result<LipschitzEstimate> {
    let x = model.embed(s)?;
    let n = model.n_tokens(s);
    let base = model.forward_from_embeddings(&x, n)?.probs;
    let mut max_ratio: f64 = 0.0;
    let mut sum = 0.0;
    for _ in 0..samples {
        let mut delta = Tensor::zeros(x.shape().to_vec());
        for v in delta.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let norm = delta.l2_norm();
        if norm == 0.0 {
            continue;
        }
        let target = rng.random_range(0.0..radius).max(1e-6);
        delta.scale(target / norm);
        let mut moved = x.clone();
        moved.add_scaled(&delta, 1.0);
        let out = model.forward_from_embeddings(&moved, n)?.probs;
        let change: f64 = base
            .iter()
            .zip(&out)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let ratio = change / target;
        max_ratio = max_ratio.max(ratio);
        sum += ratio;
    }
    Ok(LipschitzEstimate {
        max_ratio,
        mean_ratio: sum / samples.max(1) as f64,
        samples,
    })
}

/// Read a `label<TAB>text` corpus; labels are non-negative integers.
pub fn read_corpus_tsv(path: &Path) -> Result<Vec<(usize, String)>> {
    let raw =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (lineno, line) in raw.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (label, text) = line.split_once('\t').ok_or_else(|| Error::MalformedLine {
            path: path.display().to_string(),
            line: lineno + 1,
            reason: "expected `label<TAB>text`".to_string(),
        })?;
        let label: usize = label.trim().parse().map_err(|_| Error::MalformedLine {
            path: path.display().to_string(),
            line: lineno + 1,
            reason: format!("label `{label}` is not a non-negative integer"),
        })?;
        out.push((label, text.to_string()));
    }
    Ok(out)
}

pub fn write_corpus_tsv(path: &Path, rows: &[(usize, String)]) -> Result<()> {
    let mut buf = String::new();
    for (label, text) in rows {
        buf.push_str(&format!("{label}\t{text}\n"));
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Tokenize a whole corpus against a vocabulary.
pub fn tokenize_corpus(
    rows: &[(usize, String)],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Vec<TokenSequence>> {
    rows.iter()
        .map(|(label, text)| {
            let mut s = tokenize(text, vocab, max_len)?;
            s.label = *label;
            Ok(s)
        })
        .collect()
}

pub(crate) const MODEL_FORMAT: &str = "perturblab.model.v1";

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct ModelHeader {
    pub format: String,
    pub kind: String,
    pub config: serde_json::Value,
    pub vocab: Option<Vec<String>>,
    pub vocab_hash: String,
    pub shapes: Vec<(String, Vec<usize>)>,
}

/// Model file layout: u64 little-endian header length, JSON header, then
/// every parameter tensor as little-endian f64 in header order.
pub(crate) fn write_param_file(
    path: &Path,
    header: &ModelHeader,
    params: &[&Tensor],
) -> Result<()> {
    let mut bytes = Vec::new();
    let header_json = serde_json::to_vec(header)?;
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    for t in params {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

pub(crate) fn read_param_file(path: &Path) -> Result<(ModelHeader, HashMap<String, Tensor>)> {
    let mut file =
        std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let bad = |reason: &str| Error::ModelFormat {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    if bytes.len() < 8 {
        return Err(bad("file too short for a header"));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    if bytes.len() < 8 + header_len {
        return Err(bad("header length exceeds file size"));
    }
    let header: ModelHeader = serde_json::from_slice(&bytes[8..8 + header_len])?;
    if header.format != MODEL_FORMAT {
        return Err(bad(&format!("unsupported format `{}`", header.format)));
    }
    let mut offset = 8 + header_len;
    let mut tensors = HashMap::new();
    for (name, shape) in &header.shapes {
        let n: usize = shape.iter().product();
        let end = offset + n * 8;
        if bytes.len() < end {
            return Err(bad(&format!("parameter block for `{name}` is truncated")));
        }
        let data: Vec<f64> = bytes[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.insert(name.clone(), Tensor::new(shape.clone(), data)?);
        offset = end;
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes after the last parameter"));
    }
    Ok((header, tensors))
}

/// Write the full little-endian f64 content hash of a file, used as a model
/// id in manifests and reports.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let digest = Sha256::digest(&bytes);
    Ok(hex::encode(&digest[..8]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{finite_diff_grad, max_rel_error};

    fn tiny_vocab() -> Vocabulary {
        Vocabulary::build(
            [
                "apple recalls batch",
                "good great fine",
                "bad awful poor",
                "the a of and",
            ],
            64,
        )
    }

    /// Small separable corpus: label 1 texts contain `good` or `great`,
    /// label 0 texts contain `bad` or `awful`, padded with filler words.
    fn separable_corpus(n: usize, seed: u64) -> (Vocabulary, Vec<TokenSequence>) {
        let filler = ["the", "a", "of", "and", "with", "about", "story", "film"];
        let pos = ["good", "great"];
        let neg = ["bad", "awful"];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows: Vec<(usize, String)> = Vec::new();
        for i in 0..n {
            let label = i % 2;
            let kw = if label == 1 {
                pos[i / 2 % 2]
            } else {
                neg[i / 2 % 2]
            };
            let mut words: Vec<&str> = (0..6)
                .map(|_| filler[rng.random_range(0..filler.len())])
                .collect();
            let at = rng.random_range(0..=words.len());
            words.insert(at, kw);
            rows.push((label, words.join(" ")));
        }
        let vocab = Vocabulary::build(rows.iter().map(|(_, t)| t.as_str()), 64);
        let seqs = tokenize_corpus(&rows, &vocab, 16).unwrap();
        (vocab, seqs)
    }

    #[test]
    fn reserved_ids_are_pinned() {
        let v = tiny_vocab();
        assert_eq!(v.id("<pad>"), Some(PAD_ID));
        assert_eq!(v.id("<unk>"), Some(UNK_ID));
        assert_eq!(v.id("["), Some(MARK_OPEN_ID));
        assert_eq!(v.id("]"), Some(MARK_CLOSE_ID));
    }

    #[test]
    fn vocabulary_is_a_bijection() {
        let v = tiny_vocab();
        for id in 0..v.len() as u32 {
            let tok = v.token(id).unwrap();
            assert_eq!(v.id(tok), Some(id));
        }
    }

    #[test]
    fn tokenize_lowercases_and_looks_up() {
        let v = tiny_vocab();
        let s = tokenize("Apple Recalls Batch", &v, 16).unwrap();
        assert_eq!(
            s.tokens,
            vec![
                v.id("apple").unwrap(),
                v.id("recalls").unwrap(),
                v.id("batch").unwrap()
            ]
        );
    }

    #[test]
    fn oov_maps_to_unk() {
        let v = tiny_vocab();
        let s = tokenize("zzzunknownzzz", &v, 16).unwrap();
        assert_eq!(s.tokens, vec![UNK_ID]);
    }

    #[test]
    fn tokenize_truncates_to_max_len() {
        let v = tiny_vocab();
        let long = vec!["apple"; 600].join(" ");
        let s = tokenize(&long, &v, 256).unwrap();
        assert_eq!(s.tokens.len(), 256);
    }

    #[test]
    fn empty_tokenization_errors() {
        let v = tiny_vocab();
        assert!(matches!(
            tokenize("...!!!", &v, 16),
            Err(Error::EmptyTokenization(_))
        ));
    }

    #[test]
    fn embed_single_token_matches_table_row() {
        let v = tiny_vocab();
        let model = ClassifierModel::init(v.clone(), ModelConfig::default(), 1);
        let s = tokenize("apple", &v, 32).unwrap();
        let x = model.embed(&s).unwrap();
        let tok = v.id("apple").unwrap() as usize;
        for c in 0..model.config.embed_dim {
            assert_eq!(x.at(0, c), model.embedding.at(tok, c));
        }
        // padding rows stay zero
        assert!(x.data()[model.config.embed_dim..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identical_tokens_get_identical_rows() {
        let v = tiny_vocab();
        let model = ClassifierModel::init(v.clone(), ModelConfig::default(), 1);
        let s = tokenize("apple apple", &v, 32).unwrap();
        let x = model.embed(&s).unwrap();
        for c in 0..model.config.embed_dim {
            assert_eq!(x.at(0, c), x.at(1, c));
        }
    }

    #[test]
    fn forward_equals_forward_from_embeddings_bitwise() {
        let (vocab, seqs) = separable_corpus(8, 3);
        let model = ClassifierModel::init(vocab, ModelConfig::default(), 9);
        for s in &seqs {
            let direct = model.forward(s).unwrap();
            let x = model.embed(s).unwrap();
            let via = model.forward_from_embeddings(&x, s.tokens.len()).unwrap();
            assert_eq!(direct.logits, via.logits);
            assert_eq!(direct.probs, via.probs);
        }
    }

    #[test]
    fn zeroed_model_is_uniform() {
        let v = tiny_vocab();
        let mut model = ClassifierModel::init(v.clone(), ModelConfig::default(), 5);
        for (_, p) in model.params_mut() {
            for x in p.data_mut() {
                *x = 0.0;
            }
        }
        let s = tokenize("apple recalls", &v, 32).unwrap();
        let out = model.forward(&s).unwrap();
        assert_eq!(out.probs, vec![0.5, 0.5]);
    }

    #[test]
    fn probabilities_sum_to_one() {
        let (vocab, seqs) = separable_corpus(16, 17);
        let model = ClassifierModel::init(vocab, ModelConfig::default(), 2);
        for s in &seqs {
            let out = model.forward(s).unwrap();
            let total: f64 = out.probs.iter().sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn loss_gradient_wrt_embeddings_matches_finite_differences() {
        let (vocab, seqs) = separable_corpus(4, 23);
        let model = ClassifierModel::init(vocab, ModelConfig::default(), 31);
        let s = &seqs[0];
        let x = model.embed(s).unwrap();
        let n = s.tokens.len();

        let mut built = model.build_graph(n, Some(s.label), false).unwrap();
        let mut bound = HashMap::new();
        bound.insert("x".to_string(), x.clone());
        built.graph.forward(&bound).unwrap();
        let analytic = built
            .graph
            .backward(&[built.x])
            .unwrap()
            .remove(&built.x)
            .unwrap();

        let numeric = finite_diff_grad(
            |t| {
                let mut b2 = model.build_graph(n, Some(s.label), false)?;
                let mut bound = HashMap::new();
                bound.insert("x".to_string(), t.clone());
                Ok(b2.graph.forward(&bound)?.data()[0])
            },
            &x,
            1e-4,
        )
        .unwrap();

        assert!(max_rel_error(&analytic, &numeric) < 1e-4);
    }

    #[test]
    fn output_shift_trivial_values() {
        assert_eq!(model_output_shift(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        let v = model_output_shift(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!((v - std::f64::consts::SQRT_2).abs() < 1e-12);
        assert!(matches!(
            model_output_shift(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::ZeroNormOutput)
        ));
    }

    #[test]
    fn output_shift_is_symmetric_and_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..100 {
            let a: Vec<f64> = (0..2).map(|_| rng.random_range(0.05..1.0)).collect();
            let b: Vec<f64> = (0..2).map(|_| rng.random_range(0.05..1.0)).collect();
            let s1 = model_output_shift(&a, &b).unwrap();
            let s2 = model_output_shift(&b, &a).unwrap();
            assert!((s1 - s2).abs() < 1e-15);
            // rotate both vectors by a common angle: norms and distance persist
            let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let rot = |v: &[f64]| {
                vec![
                    v[0] * theta.cos() - v[1] * theta.sin(),
                    v[0] * theta.sin() + v[1] * theta.cos(),
                ]
            };
            let s3 = model_output_shift(&rot(&a), &rot(&b)).unwrap();
            assert!((s1 - s3).abs() < 1e-12, "{s1} vs {s3}");
        }
    }

    #[test]
    fn training_on_separable_corpus_reaches_accuracy() {
        let (vocab, seqs) = separable_corpus(120, 5);
        let (train, eval) = seqs.split_at(100);
        let cfg = TrainConfig {
            epochs: 12,
            ..TrainConfig::default()
        };
        let (model, log) =
            train_classifier(train, eval, vocab, ModelConfig::default(), &cfg).unwrap();
        assert!(log.eval_accuracy >= 0.95, "accuracy {}", log.eval_accuracy);
        assert!(log.epoch_losses.windows(2).all(|w| w[1].is_finite()));
        let _ = model;
    }

    #[test]
    fn zero_epochs_returns_initialized_model() {
        let (vocab, seqs) = separable_corpus(10, 7);
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let (trained, _) =
            train_classifier(&seqs, &seqs, vocab.clone(), ModelConfig::default(), &cfg).unwrap();
        let fresh = ClassifierModel::init(vocab, ModelConfig::default(), cfg.seed);
        assert_eq!(trained.embedding, fresh.embedding);
        assert_eq!(trained.w1, fresh.w1);
        assert_eq!(trained.w3, fresh.w3);
    }

    #[test]
    fn same_seed_trains_bit_identical_models() {
        let (vocab, seqs) = separable_corpus(40, 13);
        let cfg = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        let (m1, l1) =
            train_classifier(&seqs, &seqs, vocab.clone(), ModelConfig::default(), &cfg).unwrap();
        let (m2, l2) = train_classifier(&seqs, &seqs, vocab, ModelConfig::default(), &cfg).unwrap();
        assert_eq!(m1.embedding, m2.embedding);
        assert_eq!(m1.w1, m2.w1);
        assert_eq!(m1.b3, m2.b3);
        assert_eq!(l1.epoch_losses, l2.epoch_losses);
    }

    #[test]
    fn adv_with_zero_ball_reproduces_standard_training() {
        let (vocab, seqs) = separable_corpus(40, 19);
        let base = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        let (std_model, std_log) =
            train_classifier(&seqs, &seqs, vocab.clone(), ModelConfig::default(), &base).unwrap();
        let adv_cfg = AdvTrainConfig {
            base,
            inner_steps: 15,
            step_size: 0.1,
            eps_train: 0.0,
        };
        let (adv_model, adv_log) =
            adv_train_classifier(&seqs, &seqs, vocab, ModelConfig::default(), &adv_cfg).unwrap();
        assert_eq!(std_model.embedding, adv_model.embedding);
        assert_eq!(std_model.w2, adv_model.w2);
        assert_eq!(std_log.epoch_losses, adv_log.epoch_losses);
    }

    #[test]
    fn one_class_corpus_is_rejected() {
        let (vocab, mut seqs) = separable_corpus(10, 29);
        for s in &mut seqs {
            s.label = 0;
        }
        let r = train_classifier(
            &seqs,
            &seqs,
            vocab,
            ModelConfig::default(),
            &TrainConfig::default(),
        );
        assert!(r.is_err());
    }

    #[test]
    fn adv_training_keeps_delta_inside_the_ball() {
        // the trainer projects after every step; replay one inner loop and check
        let (vocab, seqs) = separable_corpus(20, 37);
        let eps = 0.25;
        let cfg = AdvTrainConfig {
            base: TrainConfig {
                epochs: 2,
                ..TrainConfig::default()
            },
            inner_steps: 7,
            step_size: 0.1,
            eps_train: eps,
        };
        let (model, log) =
            adv_train_classifier(&seqs, &seqs, vocab, ModelConfig::default(), &cfg).unwrap();
        // mean final delta norms are recorded per epoch and bounded by eps
        assert_eq!(log.epoch_delta_norms.len(), 2);
        for n in &log.epoch_delta_norms {
            assert!(*n <= eps + 1e-9, "delta norm {n} left the ball");
        }
        let _ = model;
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let (vocab, seqs) = separable_corpus(30, 41);
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        let (model, _) =
            train_classifier(&seqs, &seqs, vocab, ModelConfig::default(), &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        model.save(&path).unwrap();
        let loaded = ClassifierModel::load(&path).unwrap();
        assert_eq!(model.embedding, loaded.embedding);
        assert_eq!(model.w1, loaded.w1);
        assert_eq!(model.b3, loaded.b3);
        assert_eq!(model.vocab, loaded.vocab);
        assert_eq!(model.config, loaded.config);
    }

    #[test]
    fn lipschitz_probe_is_finite_and_positive() {
        let (vocab, seqs) = separable_corpus(10, 43);
        let model = ClassifierModel::init(vocab, ModelConfig::default(), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let est = estimate_lipschitz(&model, &seqs[0], 50, 0.5, &mut rng).unwrap();
        assert!(est.max_ratio.is_finite());
        assert!(est.max_ratio >= est.mean_ratio);
        assert!(est.mean_ratio >= 0.0);
    }

    #[test]
    fn corpus_tsv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.tsv");
        let rows = vec![
            (0, "a bad film".to_string()),
            (1, "a good film".to_string()),
        ];
        write_corpus_tsv(&path, &rows).unwrap();
        assert_eq!(read_corpus_tsv(&path).unwrap(), rows);

        std::fs::write(&path, "1\tok\nno-tab-here\n").unwrap();
        let err = read_corpus_tsv(&path).unwrap_err();
        assert!(matches!(err, Error::MalformedLine { line: 2, .. }));
    }
}
