//! Discrete perturbation generation and intensity measures.
//!
//! Two generators produce substitution-only edit sets: uniform random
//! replacement, and an importance-guided greedy attack that ranks positions
//! by how much deleting the token hurts the true-class probability, then
//! substitutes top positions with the synonym that hurts it most. Greedy
//! runs emit every intermediate edit set, so one text yields perturbations
//! across the whole edit-distance range. Substitution-only edits keep the
//! embedding matrices of original and perturbed text the same shape.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::textmodel::{ClassifierModel, TokenSequence, Vocabulary};

/// How an edit set was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbMethod {
    Random,
    Greedy,
}

impl fmt::Display for PerturbMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PerturbMethod::Random => "random",
            PerturbMethod::Greedy => "greedy",
        })
    }
}

impl std::str::FromStr for PerturbMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(PerturbMethod::Random),
            "greedy" => Ok(PerturbMethod::Greedy),
            other => Err(Error::InvalidPerturbation(format!(
                "unknown method `{other}`"
            ))),
        }
    }
}

/// One token substitution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edit {
    pub position: usize,
    pub original: u32,
    pub replacement: u32,
}

/// An edit set over one parent text: positions strictly increasing, every
/// replacement different from its original, at least one edit.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub edits: Vec<Edit>,
    pub method: PerturbMethod,
    pub parent_hash: String,
}

impl Perturbation {
    /// Check the structural invariants against the parent sequence.
    pub fn validate(&self, s: &TokenSequence) -> Result<()> {
        if self.edits.is_empty() {
            return Err(Error::InvalidPerturbation("edit set is empty".into()));
        }
        if self.parent_hash != s.text_hash() {
            return Err(Error::HashMismatch {
                expected: s.text_hash(),
                got: self.parent_hash.clone(),
            });
        }
        let mut prev: Option<usize> = None;
        for e in &self.edits {
            if prev.is_some_and(|p| e.position <= p) {
                return Err(Error::InvalidPerturbation(format!(
                    "positions not strictly increasing at {}",
                    e.position
                )));
            }
            prev = Some(e.position);
            if e.position >= s.tokens.len() {
                return Err(Error::InvalidPerturbation(format!(
                    "position {} beyond text length {}",
                    e.position,
                    s.tokens.len()
                )));
            }
            if s.tokens[e.position] != e.original {
                return Err(Error::InvalidPerturbation(format!(
                    "original token mismatch at position {}",
                    e.position
                )));
            }
            if e.replacement == e.original {
                return Err(Error::InvalidPerturbation(format!(
                    "replacement equals original at position {}",
                    e.position
                )));
            }
        }
        Ok(())
    }
}

/// Apply an edit set. The returned sequence carries the perturbed tokens but
/// keeps the parent's raw text (and therefore its hash) for provenance;
/// applying the inverted edit set recovers the original exactly.
pub fn apply(s: &TokenSequence, p: &Perturbation) -> Result<TokenSequence> {
    p.validate(s)?;
    let mut tokens = s.tokens.clone();
    for e in &p.edits {
        tokens[e.position] = e.replacement;
    }
    Ok(TokenSequence {
        tokens,
        label: s.label,
        raw_text: s.raw_text.clone(),
    })
}

/// Per-token nearest neighbors in the classifier's embedding space.
#[derive(Debug, Clone)]
pub struct SynonymTable {
    pub k: usize,
    /// Indexed by token id; reserved ids keep empty candidate lists.
    candidates: Vec<Vec<(u32, f64)>>,
}

impl SynonymTable {
    pub fn candidates(&self, id: u32) -> &[(u32, f64)] {
        self.candidates.get(id as usize).map_or(&[], Vec::as_slice)
    }
}

/// Nearest neighbors by cosine similarity of embedding rows, k per token,
/// excluding the token itself and all reserved tokens. Scores descend; ties
/// break toward the smaller id.
pub fn build_synonym_table(model: &ClassifierModel, k: usize) -> Result<SynonymTable> {
    let v = model.vocab.len();
    let reserved = 4usize;
    if v.saturating_sub(reserved) < k + 1 {
        return Err(Error::VocabTooSmall { size: v, k });
    }
    let d = model.config.embed_dim;
    let norms: Vec<f64> = (0..v)
        .map(|i| {
            (0..d)
                .map(|c| model.embedding.at(i, c).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();

    let mut candidates = vec![Vec::new(); v];
    for i in reserved..v {
        if norms[i] == 0.0 {
            continue;
        }
        let mut scored: Vec<(u32, f64)> = Vec::with_capacity(v - reserved - 1);
        for j in reserved..v {
            if j == i || norms[j] == 0.0 {
                continue;
            }
            let dot: f64 = (0..d)
                .map(|c| model.embedding.at(i, c) * model.embedding.at(j, c))
                .sum();
            scored.push((j as u32, dot / (norms[i] * norms[j])));
        }
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        scored.truncate(k);
        candidates[i] = scored;
    }
    Ok(SynonymTable { k, candidates })
}

/// Uniformly sample `n_edits` distinct non-reserved positions and replace
/// each with a uniform draw from the non-reserved vocabulary (never the
/// original token).
pub fn random_perturb<R: Rng>(
    s: &TokenSequence,
    n_edits: usize,
    vocab: &Vocabulary,
    rng: &mut R,
) -> Result<Perturbation> {
    if n_edits == 0 {
        return Err(Error::InvalidPerturbation(
            "edit count must be at least 1".into(),
        ));
    }
    if vocab.len() < 6 {
        return Err(Error::VocabTooSmall {
            size: vocab.len(),
            k: 1,
        });
    }
    let mut eligible: Vec<usize> = (0..s.tokens.len())
        .filter(|&i| !Vocabulary::is_reserved(s.tokens[i]))
        .collect();
    if n_edits > eligible.len() {
        return Err(Error::TextTooShort {
            eligible: eligible.len(),
            requested: n_edits,
        });
    }
    // partial Fisher-Yates: the first n_edits slots become the sample
    for i in 0..n_edits {
        let j = rng.random_range(i..eligible.len());
        eligible.swap(i, j);
    }
    let mut positions: Vec<usize> = eligible[..n_edits].to_vec();
    positions.sort_unstable();

    let edits = positions
        .into_iter()
        .map(|position| {
            let original = s.tokens[position];
            let replacement = loop {
                let id = rng.random_range(4..vocab.len() as u32);
                if id != original {
                    break id;
                }
            };
            Edit {
                position,
                original,
                replacement,
            }
        })
        .collect();
    Ok(Perturbation {
        edits,
        method: PerturbMethod::Random,
        parent_hash: s.text_hash(),
    })
}

fn true_class_prob(model: &ClassifierModel, tokens: &[u32], s: &TokenSequence) -> Result<f64> {
    let seq = TokenSequence {
        tokens: tokens.to_vec(),
        label: s.label,
        raw_text: s.raw_text.clone(),
    };
    Ok(model.forward(&seq)?.probs[s.label])
}

/// Importance-guided greedy substitution.
///
/// Positions are ranked by deletion importance (drop in true-class
/// probability when the token is removed), then substituted in rank order
/// with the synonym candidate that lowers the true-class probability most.
/// The perturbation after every edit is emitted, so edit counts run
/// 1..=max_edits. A substitution is applied even when no candidate lowers
/// the probability; these edit sets measure perturbation, they do not have
/// to succeed as attacks.
pub fn greedy_perturbs(
    s: &TokenSequence,
    model: &ClassifierModel,
    table: &SynonymTable,
    max_edits: usize,
) -> Result<Vec<Perturbation>> {
    let limit = s.tokens.len().min(model.config.max_len);
    let eligible: Vec<usize> = (0..limit)
        .filter(|&i| !Vocabulary::is_reserved(s.tokens[i]))
        .collect();
    if eligible.is_empty() || max_edits == 0 {
        return Ok(Vec::new());
    }

    let base = true_class_prob(model, &s.tokens, s)?;
    let mut ranked: Vec<(usize, f64)> = Vec::with_capacity(eligible.len());
    for &pos in &eligible {
        let importance = if s.tokens.len() == 1 {
            0.0
        } else {
            let mut deleted = s.tokens.clone();
            deleted.remove(pos);
            base - true_class_prob(model, &deleted, s)?
        };
        ranked.push((pos, importance));
    }
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));

    let mut current = s.tokens.clone();
    let mut edits: Vec<Edit> = Vec::new();
    let mut out = Vec::new();
    for &(pos, _) in ranked.iter().take(max_edits) {
        let original = s.tokens[pos];
        let mut best: Option<(u32, f64)> = None;
        for &(cand, _) in table.candidates(original) {
            current[pos] = cand;
            let prob = true_class_prob(model, &current, s)?;
            if best.is_none_or(|(_, p)| prob < p) {
                best = Some((cand, prob));
            }
        }
        current[pos] = original;
        let Some((choice, _)) = best else { continue };
        current[pos] = choice;
        edits.push(Edit {
            position: pos,
            original,
            replacement: choice,
        });

        let mut sorted = edits.clone();
        sorted.sort_by_key(|e| e.position);
        out.push(Perturbation {
            edits: sorted,
            method: PerturbMethod::Greedy,
            parent_hash: s.text_hash(),
        });
    }
    Ok(out)
}

/// Edit distance of a substitution-only perturbation: the edit count.
pub fn edit_distance(s: &TokenSequence, p: &Perturbation) -> Result<usize> {
    p.validate(s)?;
    Ok(p.edits.len())
}

/// Cosine similarity of mean-pooled embeddings of the original and the
/// perturbed text — a stand-in for external sentence-similarity models.
/// Its negation serves as a perturbation intensity measure.
pub fn similarity_proxy(
    s: &TokenSequence,
    p: &Perturbation,
    model: &ClassifierModel,
) -> Result<f64> {
    let perturbed = apply(s, p)?;
    let pool = |seq: &TokenSequence| -> Result<Vec<f64>> {
        let d = model.config.embed_dim;
        let n = seq.tokens.len().min(model.config.max_len);
        let mut acc = vec![0.0; d];
        for &tok in seq.tokens.iter().take(n) {
            if tok as usize >= model.vocab.len() {
                return Err(Error::TokenOutOfRange {
                    id: tok,
                    size: model.vocab.len(),
                });
            }
            for (c, slot) in acc.iter_mut().enumerate() {
                *slot += model.embedding.at(tok as usize, c);
            }
        }
        for slot in &mut acc {
            *slot /= n as f64;
        }
        Ok(acc)
    };
    let (a, b) = (pool(s)?, pool(&perturbed)?);
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let (na, nb) = (norm(&a), norm(&b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNormOutput);
    }
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    Ok(dot / (na * nb))
}

/// JSONL form of a perturbation: token strings instead of ids, so the file
/// stays readable without the vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationRecord {
    pub text_hash: String,
    pub method: PerturbMethod,
    pub edits: Vec<(usize, String, String)>,
}

impl PerturbationRecord {
    pub fn from_perturbation(p: &Perturbation, vocab: &Vocabulary) -> Self {
        PerturbationRecord {
            text_hash: p.parent_hash.clone(),
            method: p.method,
            edits: p
                .edits
                .iter()
                .map(|e| {
                    (
                        e.position,
                        vocab.token(e.original).unwrap_or("<unk>").to_string(),
                        vocab.token(e.replacement).unwrap_or("<unk>").to_string(),
                    )
                })
                .collect(),
        }
    }

    pub fn to_perturbation(&self, vocab: &Vocabulary) -> Result<Perturbation> {
        let edits = self
            .edits
            .iter()
            .map(|(pos, orig, repl)| {
                Ok(Edit {
                    position: *pos,
                    original: vocab
                        .id(orig)
                        .ok_or_else(|| Error::UnknownToken(orig.clone()))?,
                    replacement: vocab
                        .id(repl)
                        .ok_or_else(|| Error::UnknownToken(repl.clone()))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Perturbation {
            edits,
            method: self.method,
            parent_hash: self.text_hash.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;
    use crate::textmodel::{tokenize, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn words_vocab(n: usize) -> Vocabulary {
        let words: Vec<String> = (0..n).map(|i| format!("w{i:03}")).collect();
        let text = words.join(" ");
        Vocabulary::build([text.as_str()], n + 4)
    }

    fn model_with_vocab(vocab: Vocabulary, seed: u64) -> ClassifierModel {
        ClassifierModel::init(
            vocab,
            ModelConfig {
                max_len: 16,
                ..ModelConfig::default()
            },
            seed,
        )
    }

    fn sample_text(vocab: &Vocabulary, words: &[&str]) -> TokenSequence {
        tokenize(&words.join(" "), vocab, 16).unwrap()
    }

    #[test]
    fn apply_differs_exactly_at_edit_positions_and_inverts() {
        let vocab = words_vocab(20);
        let s = sample_text(&vocab, &["w000", "w001", "w002", "w003"]);
        let p = Perturbation {
            edits: vec![
                Edit {
                    position: 1,
                    original: s.tokens[1],
                    replacement: s.tokens[1] + 5,
                },
                Edit {
                    position: 3,
                    original: s.tokens[3],
                    replacement: s.tokens[3] + 7,
                },
            ],
            method: PerturbMethod::Random,
            parent_hash: s.text_hash(),
        };
        let perturbed = apply(&s, &p).unwrap();
        for i in 0..s.tokens.len() {
            if i == 1 || i == 3 {
                assert_ne!(perturbed.tokens[i], s.tokens[i]);
            } else {
                assert_eq!(perturbed.tokens[i], s.tokens[i]);
            }
        }
        let inverse = Perturbation {
            edits: p
                .edits
                .iter()
                .map(|e| Edit {
                    position: e.position,
                    original: e.replacement,
                    replacement: e.original,
                })
                .collect(),
            method: p.method,
            parent_hash: perturbed.text_hash(),
        };
        assert_eq!(apply(&perturbed, &inverse).unwrap(), s);
    }

    #[test]
    fn synonym_table_pairs_identical_embeddings() {
        let vocab = words_vocab(30);
        let mut model = model_with_vocab(vocab.clone(), 3);
        let (a, b) = (vocab.id("w004").unwrap(), vocab.id("w011").unwrap());
        for c in 0..model.config.embed_dim {
            let v = model.embedding.at(a as usize, c);
            model.embedding.set(b as usize, c, v);
        }
        let table = build_synonym_table(&model, 5).unwrap();
        assert_eq!(table.candidates(a)[0].0, b);
        assert!((table.candidates(a)[0].1 - 1.0).abs() < 1e-12);
        assert_eq!(table.candidates(b)[0].0, a);
    }

    #[test]
    fn synonym_candidates_exclude_self_and_reserved() {
        let vocab = words_vocab(40);
        let model = model_with_vocab(vocab, 5);
        let table = build_synonym_table(&model, 10).unwrap();
        for id in 4..model.vocab.len() as u32 {
            for &(cand, _) in table.candidates(id) {
                assert_ne!(cand, id);
                assert!(!Vocabulary::is_reserved(cand));
            }
        }
        // reserved tokens never get candidate lists
        for id in 0..4 {
            assert!(table.candidates(id).is_empty());
        }
    }

    #[test]
    fn synonym_table_matches_exhaustive_cosine_oracle() {
        let vocab = words_vocab(50);
        let model = model_with_vocab(vocab, 17);
        let k = 7;
        let table = build_synonym_table(&model, k).unwrap();

        // oracle: per pair, fresh cosine from raw rows, full sort
        let d = model.config.embed_dim;
        let row = |i: usize| {
            (0..d)
                .map(|c| model.embedding.at(i, c))
                .collect::<Vec<f64>>()
        };
        let cos = |x: &[f64], y: &[f64]| {
            let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
            let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            dot / (nx * ny)
        };
        for i in 4..model.vocab.len() {
            let ri = row(i);
            let mut expect: Vec<(u32, f64)> = (4..model.vocab.len())
                .filter(|j| *j != i)
                .map(|j| (j as u32, cos(&ri, &row(j))))
                .collect();
            expect.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            expect.truncate(k);
            let got = table.candidates(i as u32);
            assert_eq!(got.len(), k);
            for (g, e) in got.iter().zip(&expect) {
                assert_eq!(g.0, e.0);
                assert!((g.1 - e.1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn vocab_smaller_than_k_plus_one_errors() {
        let vocab = words_vocab(5);
        let model = model_with_vocab(vocab, 1);
        assert!(matches!(
            build_synonym_table(&model, 5),
            Err(Error::VocabTooSmall { .. })
        ));
    }

    #[test]
    fn random_perturb_rejects_zero_edits() {
        let vocab = words_vocab(20);
        let s = sample_text(&vocab, &["w000", "w001"]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(random_perturb(&s, 0, &vocab, &mut rng).is_err());
    }

    #[test]
    fn random_perturb_can_edit_every_position() {
        let vocab = words_vocab(20);
        let s = sample_text(&vocab, &["w000", "w001", "w002", "w003", "w004"]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_perturb(&s, s.tokens.len(), &vocab, &mut rng).unwrap();
        assert_eq!(p.edits.len(), s.tokens.len());
        let positions: Vec<usize> = p.edits.iter().map(|e| e.position).collect();
        assert_eq!(positions, (0..s.tokens.len()).collect::<Vec<_>>());
        p.validate(&s).unwrap();
    }

    #[test]
    fn random_perturb_overlong_request_errors() {
        let vocab = words_vocab(20);
        let s = sample_text(&vocab, &["w000", "w001"]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(matches!(
            random_perturb(&s, 3, &vocab, &mut rng),
            Err(Error::TextTooShort {
                eligible: 2,
                requested: 3
            })
        ));
    }

    #[test]
    fn random_perturb_positions_are_uniform() {
        // binomial check: each of 10 positions picked with frequency 1/10
        // within 3 sigma over 10^4 single-edit draws
        let vocab = words_vocab(30);
        let words: Vec<&str> = vec![
            "w000", "w001", "w002", "w003", "w004", "w005", "w006", "w007", "w008", "w009",
        ];
        let s = sample_text(&vocab, &words);
        let mut rng = ChaCha8Rng::seed_from_u64(12345);
        let draws = 10_000;
        let mut counts = [0usize; 10];
        for _ in 0..draws {
            let p = random_perturb(&s, 1, &vocab, &mut rng).unwrap();
            counts[p.edits[0].position] += 1;
        }
        let expect = draws as f64 / 10.0;
        let sigma = (draws as f64 * 0.1 * 0.9).sqrt();
        for (pos, &c) in counts.iter().enumerate() {
            assert!(
                (c as f64 - expect).abs() <= 3.0 * sigma,
                "position {pos} drawn {c} times, expected {expect} +/- {:.1}",
                3.0 * sigma
            );
        }
    }

    /// Hand-built model where one token dominates the true class and one
    /// candidate reverses it, so deletion importance and the best
    /// (position, candidate) pair coincide unambiguously.
    fn planted_attack_fixture() -> (ClassifierModel, TokenSequence, SynonymTable) {
        let vocab = words_vocab(12);
        let cfg = ModelConfig {
            embed_dim: 2,
            hidden_dim: 2,
            n_classes: 2,
            max_len: 8,
        };
        let mut model = ClassifierModel::init(vocab.clone(), cfg, 0);
        // identity hidden stack kept linear by a large positive bias
        for (r, c, v) in [(0, 0, 1.0), (0, 1, 0.0), (1, 0, 0.0), (1, 1, 1.0)] {
            model.w1.set(r, c, v);
            model.w2.set(r, c, v);
        }
        model.b1 = Tensor::row(vec![10.0, 10.0]);
        model.b2 = Tensor::zeros(vec![1, 2]);
        model.w3 = Tensor::from_rows(&[vec![-6.0, 6.0], vec![0.0, 0.0]]).unwrap();
        model.b3 = Tensor::zeros(vec![1, 2]);
        // token w000 pushes class 1 hard, w001 pulls it down, rest are noise
        let rows: Vec<(u32, [f64; 2])> = vec![
            (vocab.id("w000").unwrap(), [1.0, 0.0]),
            (vocab.id("w001").unwrap(), [-1.0, 0.0]),
            (vocab.id("w002").unwrap(), [0.01, 0.02]),
            (vocab.id("w003").unwrap(), [0.02, -0.01]),
            (vocab.id("w004").unwrap(), [-0.01, 0.01]),
            (vocab.id("w005").unwrap(), [0.0, 0.03]),
            (vocab.id("w006").unwrap(), [0.03, 0.0]),
            (vocab.id("w007").unwrap(), [0.0, -0.02]),
        ];
        for (id, row) in rows {
            model.embedding.set(id as usize, 0, row[0]);
            model.embedding.set(id as usize, 1, row[1]);
        }
        let mut s = sample_text(&vocab, &["w002", "w000", "w003", "w004"]);
        s.label = 1;
        let table = build_synonym_table(&model, 3).unwrap();
        (model, s, table)
    }

    #[test]
    fn greedy_first_edit_matches_exhaustive_search() {
        let (model, s, table) = planted_attack_fixture();
        let got = greedy_perturbs(&s, &model, &table, 1).unwrap();
        assert_eq!(got.len(), 1);
        let first = got[0].edits[0];

        // oracle: try every (position, candidate) pair, keep the largest
        // true-class probability drop
        let base = model.forward(&s).unwrap().probs[s.label];
        let mut best: Option<(usize, u32, f64)> = None;
        for pos in 0..s.tokens.len() {
            for &(cand, _) in table.candidates(s.tokens[pos]) {
                let mut tokens = s.tokens.clone();
                tokens[pos] = cand;
                let seq = TokenSequence {
                    tokens,
                    label: s.label,
                    raw_text: s.raw_text.clone(),
                };
                let drop = base - model.forward(&seq).unwrap().probs[s.label];
                if best.is_none_or(|(_, _, d)| drop > d) {
                    best = Some((pos, cand, drop));
                }
            }
        }
        let (pos, cand, _) = best.unwrap();
        assert_eq!(first.position, pos);
        assert_eq!(first.replacement, cand);
    }

    #[test]
    fn greedy_edit_counts_increase_one_by_one() {
        let (model, s, table) = planted_attack_fixture();
        let chain = greedy_perturbs(&s, &model, &table, 4).unwrap();
        assert_eq!(chain.len(), 4);
        for (i, p) in chain.iter().enumerate() {
            assert_eq!(p.edits.len(), i + 1);
            p.validate(&s).unwrap();
        }
    }

    #[test]
    fn greedy_is_deterministic() {
        let (model, s, table) = planted_attack_fixture();
        let a = greedy_perturbs(&s, &model, &table, 3).unwrap();
        let b = greedy_perturbs(&s, &model, &table, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn edit_distance_counts_substitutions() {
        let vocab = words_vocab(20);
        let s = sample_text(&vocab, &["w000", "w001", "w002", "w003", "w004", "w005"]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p5 = random_perturb(&s, 5, &vocab, &mut rng).unwrap();
        assert_eq!(edit_distance(&s, &p5).unwrap(), 5);
        let p1 = random_perturb(&s, 1, &vocab, &mut rng).unwrap();
        assert_eq!(edit_distance(&s, &p1).unwrap(), 1);
    }

    #[test]
    fn edit_distance_matches_levenshtein_dp_oracle() {
        let vocab = words_vocab(30);
        let s = sample_text(
            &vocab,
            &["w000", "w001", "w002", "w003", "w004", "w005", "w006"],
        );
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for n in 1..=5 {
            let p = random_perturb(&s, n, &vocab, &mut rng).unwrap();
            let perturbed = apply(&s, &p).unwrap();
            assert_eq!(
                edit_distance(&s, &p).unwrap(),
                levenshtein(&s.tokens, &perturbed.tokens)
            );
        }
    }

    /// Full dynamic-programming Levenshtein over token sequences.
    fn levenshtein(a: &[u32], b: &[u32]) -> usize {
        let mut dp: Vec<Vec<usize>> = vec![vec![0; b.len() + 1]; a.len() + 1];
        for (i, row) in dp.iter_mut().enumerate() {
            row[0] = i;
        }
        for (j, slot) in dp[0].iter_mut().enumerate() {
            *slot = j;
        }
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                let sub = dp[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
                dp[i][j] = sub.min(dp[i - 1][j] + 1).min(dp[i][j - 1] + 1);
            }
        }
        dp[a.len()][b.len()]
    }

    #[test]
    fn hash_mismatch_is_rejected() {
        let vocab = words_vocab(20);
        let s = sample_text(&vocab, &["w000", "w001", "w002"]);
        let other = sample_text(&vocab, &["w003", "w004", "w005"]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_perturb(&s, 1, &vocab, &mut rng).unwrap();
        assert!(matches!(
            edit_distance(&other, &p),
            Err(Error::HashMismatch { .. })
        ));
    }

    #[test]
    fn similarity_of_identity_is_one_and_orthogonal_is_zero() {
        let vocab = words_vocab(12);
        let cfg = ModelConfig {
            embed_dim: 4,
            hidden_dim: 4,
            n_classes: 2,
            max_len: 8,
        };
        let mut model = ClassifierModel::init(vocab.clone(), cfg, 0);
        let a = vocab.id("w000").unwrap();
        let b = vocab.id("w001").unwrap();
        for c in 0..4 {
            model
                .embedding
                .set(a as usize, c, if c == 0 { 1.0 } else { 0.0 });
            model
                .embedding
                .set(b as usize, c, if c == 1 { 1.0 } else { 0.0 });
        }
        let s = sample_text(&vocab, &["w000"]);

        // replace a token and revert it: cosine with itself
        let p_noop_pair = Perturbation {
            edits: vec![Edit {
                position: 0,
                original: a,
                replacement: b,
            }],
            method: PerturbMethod::Random,
            parent_hash: s.text_hash(),
        };
        let perturbed = apply(&s, &p_noop_pair).unwrap();
        let back = Perturbation {
            edits: vec![Edit {
                position: 0,
                original: b,
                replacement: a,
            }],
            method: PerturbMethod::Random,
            parent_hash: perturbed.text_hash(),
        };
        let restored = apply(&perturbed, &back).unwrap();
        assert_eq!(restored.tokens, s.tokens);
        let p_self = Perturbation {
            edits: vec![Edit {
                position: 0,
                original: a,
                replacement: b,
            }],
            method: PerturbMethod::Random,
            parent_hash: s.text_hash(),
        };
        // orthogonal embedding rows pool to orthogonal vectors
        assert!(similarity_proxy(&s, &p_self, &model).unwrap().abs() < 1e-12);

        // identical pooled vectors give exactly cosine 1
        let two = sample_text(&vocab, &["w000", "w002"]);
        let swap_noise = Perturbation {
            edits: vec![Edit {
                position: 1,
                original: two.tokens[1],
                replacement: vocab.id("w003").unwrap(),
            }],
            method: PerturbMethod::Random,
            parent_hash: two.text_hash(),
        };
        // set w003's row equal to w002's so the pooled vector is unchanged
        let (from, to) = (two.tokens[1] as usize, vocab.id("w003").unwrap() as usize);
        for c in 0..4 {
            let v = model.embedding.at(from, c);
            model.embedding.set(to, c, v);
        }
        assert!((similarity_proxy(&two, &swap_noise, &model).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn record_round_trip_preserves_the_perturbation() {
        let vocab = words_vocab(25);
        let s = sample_text(&vocab, &["w000", "w001", "w002", "w003"]);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = random_perturb(&s, 2, &vocab, &mut rng).unwrap();
        let rec = PerturbationRecord::from_perturbation(&p, &vocab);
        let back = rec.to_perturbation(&vocab).unwrap();
        assert_eq!(p, back);
    }
}
