//! Tuple dataset persistence, scorer input construction and splitting.
//!
//! Scorer inputs concatenate each replacement behind its original token
//! between reserved bracket tokens ("it would recall [ reminds ] about"),
//! so the regression model sees both the context and the substitution.
//! Datasets split at the text level: every tuple of one parent text lands
//! on the same side, otherwise near-duplicates of a text would leak across
//! the split and inflate the scorer's correlation.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::epsilon_search::{DataTuple, SearchConfig, TupleStatus};
use crate::error::{Error, Result};
use crate::perturbgen::{similarity_proxy, Perturbation, PerturbationRecord};
use crate::textmodel::{ClassifierModel, TokenSequence, MARK_CLOSE_ID, MARK_OPEN_ID};

/// One regression example: marked-up token ids and the norm bound to predict,
/// with enough provenance to compute the baseline measures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerExample {
    pub text_hash: String,
    pub method: String,
    pub input_ids: Vec<u32>,
    pub target_epsilon: f64,
    pub edit_distance: usize,
    pub similarity_proxy: f64,
}

/// Build the scorer input for a perturbed text: unedited tokens pass
/// through, each edited position emits `original [ replacement ]`.
///
/// Truncation to `max_len` may only drop plain trailing tokens; an edit
/// marker falling past the cut is an error so no example silently loses
/// its perturbation.
pub fn encode_scorer_input(
    s: &TokenSequence,
    p: &Perturbation,
    max_len: usize,
) -> Result<Vec<u32>> {
    p.validate(s)?;
    let by_pos: HashMap<usize, u32> = p
        .edits
        .iter()
        .map(|e| (e.position, e.replacement))
        .collect();
    let mut out = Vec::with_capacity(s.tokens.len() + 3 * p.edits.len());
    for (i, &tok) in s.tokens.iter().enumerate() {
        match by_pos.get(&i) {
            Some(&replacement) => {
                if out.len() + 4 > max_len {
                    return Err(Error::MarkerTruncated { position: i });
                }
                out.extend([tok, MARK_OPEN_ID, replacement, MARK_CLOSE_ID]);
            }
            None => {
                if out.len() < max_len {
                    out.push(tok);
                }
                // plain tokens past the cut are dropped silently
            }
        }
    }
    Ok(out)
}

/// Token ids of the parent text plus `(position, original, replacement)`
/// edit triples recovered from a marked-up input.
pub type DecodedInput = (Vec<u32>, Vec<(usize, u32, u32)>);

/// Recover the original token sequence and the edit triples from a marked-up
/// input. Inverse of [`encode_scorer_input`] for non-truncated inputs.
pub fn decode_scorer_input(ids: &[u32]) -> Result<DecodedInput> {
    let mut tokens = Vec::new();
    let mut edits = Vec::new();
    let mut i = 0;
    while i < ids.len() {
        let tok = ids[i];
        if tok == MARK_OPEN_ID || tok == MARK_CLOSE_ID {
            return Err(Error::InvalidPerturbation(format!(
                "dangling marker at input offset {i}"
            )));
        }
        if ids.get(i + 1) == Some(&MARK_OPEN_ID) {
            let replacement = *ids.get(i + 2).ok_or_else(|| {
                Error::InvalidPerturbation("marker opened at end of input".into())
            })?;
            if ids.get(i + 3) != Some(&MARK_CLOSE_ID) {
                return Err(Error::InvalidPerturbation(format!(
                    "unclosed marker after input offset {i}"
                )));
            }
            edits.push((tokens.len(), tok, replacement));
            tokens.push(tok);
            i += 4;
        } else {
            tokens.push(tok);
            i += 1;
        }
    }
    Ok((tokens, edits))
}

/// Text-level split: distinct parent hashes are shuffled under the seed and
/// assigned wholesale, so no text contributes to both sides.
pub fn split_by_text<T: Clone>(
    items: &[T],
    key: impl Fn(&T) -> &str,
    ratio: f64,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidConfig(vec![format!(
            "split ratio must be in (0, 1), got {ratio}"
        )]));
    }
    let mut hashes: Vec<&str> = Vec::new();
    let mut seen = HashSet::new();
    for item in items {
        let h = key(item);
        if seen.insert(h.to_string()) {
            hashes.push(h);
        }
    }
    if hashes.len() < 2 {
        return Err(Error::TooFewTexts(hashes.len()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..hashes.len()).rev() {
        let j = rng.random_range(0..=i);
        hashes.swap(i, j);
    }
    let n_train = ((ratio * hashes.len() as f64).round() as usize).clamp(1, hashes.len() - 1);
    let train_hashes: HashSet<&str> = hashes[..n_train].iter().copied().collect();

    let mut train = Vec::new();
    let mut test = Vec::new();
    for item in items {
        if train_hashes.contains(key(item)) {
            train.push(item.clone());
        } else {
            test.push(item.clone());
        }
    }
    Ok((train, test))
}

type TupleKey = (String, Vec<(usize, String, String)>);

/// Drop duplicate (text hash, edit set) tuples, keeping first occurrences.
pub fn dedup_tuples(tuples: Vec<DataTuple>) -> Vec<DataTuple> {
    let mut seen: HashSet<TupleKey> = HashSet::new();
    tuples
        .into_iter()
        .filter(|t| seen.insert((t.text_hash.clone(), t.edits.clone())))
        .collect()
}

/// Write one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = std::io::BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")
            .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    w.flush()
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Read a JSONL file; a malformed line reports its 1-based line number.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            path: path.display().to_string(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

/// Provenance of a tuple dataset: where it came from and the choices that
/// shaped it, enough to regenerate the files bit-identically.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub corpus_path: String,
    pub corpus_hash: String,
    pub model_id: String,
    pub vocab_hash: String,
    pub search_config: SearchConfig,
    pub seed: u64,
    pub accepted: usize,
    pub discarded_overshoot: usize,
    pub discarded_exhausted: usize,
    /// Accepted tuples that could not become scorer examples because the
    /// marker would not fit the scorer's input length.
    pub rejected_marker_truncation: usize,
    /// Regression loss of the scorer trained on this dataset.
    pub scorer_loss: String,
    /// Whether targets were rescaled before regression.
    pub target_normalization: String,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(serde_json::from_str(&raw)?)
    }
}

/// Turn accepted tuples into scorer examples, computing the baseline
/// measures on the way. Returns the examples and the count of tuples
/// rejected because their markers would not fit `scorer_max_len`.
pub fn build_scorer_examples(
    tuples: &[DataTuple],
    texts: &HashMap<String, TokenSequence>,
    model: &ClassifierModel,
    scorer_max_len: usize,
) -> Result<(Vec<ScorerExample>, usize)> {
    let mut out = Vec::new();
    let mut rejected = 0usize;
    for t in tuples {
        if t.status != TupleStatus::Accepted {
            continue;
        }
        let s = texts.get(&t.text_hash).ok_or_else(|| {
            Error::InvalidPerturbation(format!("tuple references unknown text {}", t.text_hash))
        })?;
        let record = PerturbationRecord {
            text_hash: t.text_hash.clone(),
            method: t.method.parse()?,
            edits: t.edits.clone(),
        };
        let p = record.to_perturbation(&model.vocab)?;
        let input_ids = match encode_scorer_input(s, &p, scorer_max_len) {
            Ok(ids) => ids,
            Err(Error::MarkerTruncated { .. }) => {
                rejected += 1;
                continue;
            }
            Err(other) => return Err(other),
        };
        out.push(ScorerExample {
            text_hash: t.text_hash.clone(),
            method: t.method.clone(),
            input_ids,
            target_epsilon: t.epsilon,
            edit_distance: t.edits.len(),
            similarity_proxy: similarity_proxy(s, &p, model)?,
        });
    }
    Ok((out, rejected))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perturbgen::{Edit, PerturbMethod};
    use crate::textmodel::{tokenize, Vocabulary};

    fn fixture() -> (Vocabulary, TokenSequence, Perturbation) {
        let vocab = Vocabulary::build(["it would recall about reminds the a"], 32);
        let s = tokenize("it would recall about", &vocab, 16).unwrap();
        let pos = 2; // "recall"
        let p = Perturbation {
            edits: vec![Edit {
                position: pos,
                original: s.tokens[pos],
                replacement: vocab.id("reminds").unwrap(),
            }],
            method: PerturbMethod::Greedy,
            parent_hash: s.text_hash(),
        };
        (vocab, s, p)
    }

    #[test]
    fn encode_places_replacement_behind_original_in_brackets() {
        let (vocab, s, p) = fixture();
        let ids = encode_scorer_input(&s, &p, 32).unwrap();
        let toks: Vec<&str> = ids.iter().map(|&id| vocab.token(id).unwrap()).collect();
        assert_eq!(
            toks,
            vec!["it", "would", "recall", "[", "reminds", "]", "about"]
        );
    }

    #[test]
    fn decode_recovers_text_and_edits() {
        let (_, s, p) = fixture();
        let ids = encode_scorer_input(&s, &p, 32).unwrap();
        let (tokens, edits) = decode_scorer_input(&ids).unwrap();
        assert_eq!(tokens, s.tokens);
        assert_eq!(
            edits,
            vec![(
                p.edits[0].position,
                p.edits[0].original,
                p.edits[0].replacement
            )]
        );
    }

    #[test]
    fn truncation_may_drop_plain_tokens_but_not_markers() {
        let (_, s, p) = fixture();
        // length 6 cuts the trailing "about" only
        let ids = encode_scorer_input(&s, &p, 6).unwrap();
        assert_eq!(ids.len(), 6);
        let (tokens, edits) = decode_scorer_input(&ids).unwrap();
        assert_eq!(tokens, s.tokens[..3]);
        assert_eq!(edits.len(), 1);
        // length 5 would cut inside the marker
        assert!(matches!(
            encode_scorer_input(&s, &p, 5),
            Err(Error::MarkerTruncated { position: 2 })
        ));
    }

    #[test]
    fn split_is_disjoint_union_complete_and_seeded() {
        let items: Vec<(String, usize)> = (0..100)
            .flat_map(|text| (0..3).map(move |k| (format!("hash{text:03}"), k)))
            .collect();
        let (train, test) = split_by_text(&items, |it| it.0.as_str(), 0.8, 7).unwrap();
        assert_eq!(train.len() + test.len(), items.len());
        let train_hashes: HashSet<&str> = train.iter().map(|it| it.0.as_str()).collect();
        let test_hashes: HashSet<&str> = test.iter().map(|it| it.0.as_str()).collect();
        assert!(train_hashes.is_disjoint(&test_hashes));
        assert_eq!(train_hashes.len(), 80);
        assert_eq!(test_hashes.len(), 20);

        let again = split_by_text(&items, |it| it.0.as_str(), 0.8, 7).unwrap();
        assert_eq!((train, test), again);
    }

    #[test]
    fn split_requires_two_texts_and_a_sane_ratio() {
        let one = vec![("h".to_string(), 1)];
        assert!(matches!(
            split_by_text(&one, |it| it.0.as_str(), 0.8, 0),
            Err(Error::TooFewTexts(1))
        ));
        let two = vec![("a".to_string(), 1), ("b".to_string(), 2)];
        assert!(split_by_text(&two, |it| it.0.as_str(), 1.0, 0).is_err());
        // both sides stay non-empty even at extreme ratios
        let (tr, te) = split_by_text(&two, |it| it.0.as_str(), 0.99, 0).unwrap();
        assert_eq!(tr.len(), 1);
        assert_eq!(te.len(), 1);
    }

    #[test]
    fn jsonl_round_trip_and_line_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let items: Vec<ScorerExample> = (0..5)
            .map(|i| ScorerExample {
                text_hash: format!("h{i}"),
                method: "random".into(),
                input_ids: vec![4, 5, 6],
                target_epsilon: 0.1 * (i + 1) as f64,
                edit_distance: i,
                similarity_proxy: 0.9,
            })
            .collect();
        write_jsonl(&path, &items).unwrap();
        let back: Vec<ScorerExample> = read_jsonl(&path).unwrap();
        assert_eq!(items, back);

        // empty file reads as an empty dataset
        std::fs::write(&path, "").unwrap();
        let empty: Vec<ScorerExample> = read_jsonl(&path).unwrap();
        assert!(empty.is_empty());

        // corruption on line 7 names line 7
        let mut lines: Vec<String> = items
            .iter()
            .map(|i| serde_json::to_string(i).unwrap())
            .collect();
        lines.push(serde_json::to_string(&items[0]).unwrap());
        lines.push("{not json".to_string());
        std::fs::write(&path, lines.join("\n")).unwrap();
        match read_jsonl::<ScorerExample>(&path) {
            Err(Error::MalformedLine { line: 7, .. }) => {}
            other => panic!("expected line-7 error, got {other:?}"),
        }
    }

    #[test]
    fn dedup_keeps_first_of_each_edit_set() {
        let t = |hash: &str, pos: usize| DataTuple {
            text_hash: hash.into(),
            method: "random".into(),
            edits: vec![(pos, "a".into(), "b".into())],
            epsilon: 0.1,
            gamma: 0.2,
            achieved_shift: 0.2,
            status: TupleStatus::Accepted,
            seed: 0,
        };
        let tuples = vec![t("x", 0), t("x", 1), t("x", 0), t("y", 0)];
        let kept = dedup_tuples(tuples);
        assert_eq!(kept.len(), 3);
    }
}
