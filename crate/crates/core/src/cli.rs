//! Pipeline commands: everything the binary does, callable as a library.
//!
//! Each command reads files produced by earlier stages plus the run config,
//! writes its outputs under the output directory, and drops a manifest
//! (resolved config, seed, content hashes of inputs and outputs) next to
//! them. Re-running a command with the same config and inputs reproduces
//! the output files byte for byte: every random choice flows from the seed,
//! and parallel sections collect results in input order.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::epsilon_search::{find_epsilon, DataTuple, SearchConfig, TupleStatus};
use crate::error::{Error, Result};
use crate::perturbgen::{
    build_synonym_table, greedy_perturbs, random_perturb, PerturbMethod, Perturbation,
    PerturbationRecord,
};
use crate::scorer::{
    evaluate_scorer, render_prediction_csv, train_scorer, ReportIds, ScorerConfig, ScorerModel,
};
use crate::stats::epsilon_histogram;
use crate::textmodel::{
    adv_train_classifier, file_hash, read_corpus_tsv, tokenize_corpus, write_corpus_tsv,
    AdvTrainConfig, ClassifierModel, ModelConfig, TokenSequence, TrainConfig, Vocabulary,
};
use crate::tuplestore::{
    build_scorer_examples, dedup_tuples, read_jsonl, split_by_text, write_jsonl, DatasetManifest,
    ScorerExample,
};

/// Synthetic corpus settings: a two-class keyword corpus. Texts are filler
/// words plus one to three keywords of the text's class, so class membership
/// is linearly separable by keyword presence.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub n_texts: usize,
    pub vocab_size: usize,
    pub text_len_min: usize,
    pub text_len_max: usize,
    pub keywords_per_class: usize,
    /// Held-out fraction for classifier accuracy reporting.
    pub eval_fraction: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_texts: 2000,
            vocab_size: 2000,
            text_len_min: 6,
            text_len_max: 14,
            keywords_per_class: 40,
            eval_fraction: 0.2,
        }
    }
}

/// Classifier architecture plus optimization settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub n_classes: usize,
    pub max_len: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub embed_lr_scale: f64,
    pub clip_norm: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            embed_dim: 16,
            hidden_dim: 32,
            n_classes: 2,
            max_len: 24,
            epochs: 8,
            learning_rate: 0.08,
            embed_lr_scale: 20.0,
            clip_norm: 5.0,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            n_classes: self.n_classes,
            max_len: self.max_len,
        }
    }

    fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            embed_lr_scale: self.embed_lr_scale,
            clip_norm: self.clip_norm,
            seed,
        }
    }
}

/// Inner-ascent settings for adversarial training.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AdvSection {
    pub inner_steps: usize,
    pub step_size: f64,
    pub eps_train: f64,
}

impl Default for AdvSection {
    fn default() -> Self {
        AdvSection {
            inner_steps: 5,
            step_size: 0.1,
            eps_train: 0.3,
        }
    }
}

/// Perturbation generation settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbSection {
    /// Random perturbations per text; edit counts cycle 1..=max_edits.
    pub per_text: usize,
    pub max_edits: usize,
    pub synonym_k: usize,
}

impl Default for PerturbSection {
    fn default() -> Self {
        PerturbSection {
            per_text: 5,
            max_edits: 5,
            synonym_k: 10,
        }
    }
}

/// Scorer architecture, optimization and split settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ScorerSection {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub max_len: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub embed_lr_scale: f64,
    pub clip_norm: f64,
    pub split_ratio: f64,
}

impl Default for ScorerSection {
    fn default() -> Self {
        let base = ScorerConfig::default();
        ScorerSection {
            embed_dim: base.embed_dim,
            hidden_dim: base.hidden_dim,
            max_len: base.max_len,
            epochs: base.epochs,
            learning_rate: base.learning_rate,
            embed_lr_scale: base.embed_lr_scale,
            clip_norm: base.clip_norm,
            split_ratio: 0.8,
        }
    }
}

impl ScorerSection {
    fn scorer_config(&self, eps_max: f64, seed: u64) -> ScorerConfig {
        ScorerConfig {
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            max_len: self.max_len,
            eps_max,
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            embed_lr_scale: self.embed_lr_scale,
            clip_norm: self.clip_norm,
            seed,
        }
    }
}

/// The resolved run configuration: a TOML file plus flag overrides.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Master seed; required, there is no default randomness.
    pub seed: Option<u64>,
    /// Worker threads for the parallel stages; 0 takes every core.
    pub workers: usize,
    pub out_dir: PathBuf,
    pub corpus: CorpusConfig,
    pub model: ModelSection,
    pub adv: AdvSection,
    pub search: SearchConfig,
    pub perturb: PerturbSection,
    pub scorer: ScorerSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            workers: 0,
            out_dir: PathBuf::from("out"),
            corpus: CorpusConfig::default(),
            model: ModelSection::default(),
            adv: AdvSection::default(),
            search: SearchConfig::default(),
            perturb: PerturbSection::default(),
            scorer: ScorerSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let raw =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        toml::from_str(&raw)
            .map_err(|e| Error::InvalidConfig(vec![format!("{}: {e}", path.display())]))
    }

    pub fn seed(&self) -> u64 {
        self.seed.expect("validated configs carry a seed")
    }

    /// Check every invariant at once and report the full list of violations.
    pub fn validate(&self, input_paths: &[&Path]) -> Result<()> {
        let mut problems = Vec::new();
        if self.seed.is_none() {
            problems.push("seed is required: set `seed` in the config or pass --seed".to_string());
        }
        if let Err(Error::InvalidConfig(more)) = self.search.validate() {
            problems.extend(more);
        }
        if self.corpus.n_texts < 2 {
            problems.push("corpus.n_texts must be at least 2".to_string());
        }
        if self.corpus.text_len_min == 0 || self.corpus.text_len_min > self.corpus.text_len_max {
            problems.push("corpus text length bounds must satisfy 0 < min <= max".to_string());
        }
        if self.corpus.vocab_size < 2 * self.corpus.keywords_per_class + 16 {
            problems.push("corpus.vocab_size leaves no room for filler words".to_string());
        }
        if !(self.corpus.eval_fraction > 0.0 && self.corpus.eval_fraction < 1.0) {
            problems.push("corpus.eval_fraction must be in (0, 1)".to_string());
        }
        if self.model.n_classes < 2 {
            problems.push("model.n_classes must be at least 2".to_string());
        }
        if self.perturb.per_text == 0 {
            problems.push("perturb.per_text must be at least 1".to_string());
        }
        if self.perturb.max_edits == 0 {
            problems.push("perturb.max_edits must be at least 1".to_string());
        }
        if self.perturb.synonym_k == 0 {
            problems.push("perturb.synonym_k must be at least 1".to_string());
        }
        if !(self.scorer.split_ratio > 0.0 && self.scorer.split_ratio < 1.0) {
            problems.push("scorer.split_ratio must be in (0, 1)".to_string());
        }
        if self.scorer.max_len < self.model.max_len + 3 {
            problems.push(
                "scorer.max_len must exceed model.max_len by at least one marker width (3)"
                    .to_string(),
            );
        }
        for path in input_paths {
            if !path.exists() {
                problems.push(format!("input path does not exist: {}", path.display()));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems))
        }
    }

    fn thread_pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| Error::InvalidConfig(vec![format!("worker pool: {e}")]))
    }
}

/// Per-command provenance record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CommandManifest {
    pub command: String,
    pub seed: u64,
    pub config: RunConfig,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl CommandManifest {
    fn new(command: &str, cfg: &RunConfig) -> Self {
        CommandManifest {
            command: command.to_string(),
            seed: cfg.seed(),
            config: cfg.clone(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    fn record_input(&mut self, path: &Path) -> Result<()> {
        self.inputs
            .insert(path.display().to_string(), file_hash(path)?);
        Ok(())
    }

    fn record_output(&mut self, path: &Path) -> Result<()> {
        self.outputs
            .insert(path.display().to_string(), file_hash(path)?);
        Ok(())
    }

    fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(format!("{}.manifest.json", self.command));
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, json).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(path)
    }
}

fn ensure_out_dir(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| Error::io(cfg.out_dir.display().to_string(), e))
}

fn write_text(path: &Path, content: &str) -> Result<()> {
    std::fs::write(path, content).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Deterministic pseudo-word list: consonant-vowel syllables, two or three
/// per word, all distinct.
fn synth_words(count: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    const CONSONANTS: [char; 18] = [
        'b', 'd', 'f', 'g', 'h', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't', 'v', 'w', 'y', 'z', 'c',
    ];
    const VOWELS: [char; 5] = ['a', 'e', 'i', 'o', 'u'];
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let syllables = rng.random_range(2..=3);
        let mut word = String::new();
        for _ in 0..syllables {
            word.push(CONSONANTS[rng.random_range(0..CONSONANTS.len())]);
            word.push(VOWELS[rng.random_range(0..VOWELS.len())]);
        }
        if seen.insert(word.clone()) {
            out.push(word);
        }
    }
    out
}

/// Generate the two-class keyword corpus.
pub fn synth_corpus(cfg: &CorpusConfig, seed: u64) -> Vec<(usize, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_words = cfg.vocab_size.saturating_sub(4);
    let words = synth_words(n_words, &mut rng);
    let k = cfg.keywords_per_class;
    let class_keywords = [&words[0..k], &words[k..2 * k]];
    let filler = &words[2 * k..];

    let mut rows = Vec::with_capacity(cfg.n_texts);
    for i in 0..cfg.n_texts {
        let label = i % 2;
        let len = rng.random_range(cfg.text_len_min..=cfg.text_len_max);
        let mut tokens: Vec<&str> = (0..len)
            .map(|_| filler[rng.random_range(0..filler.len())].as_str())
            .collect();
        let n_keywords = rng.random_range(1..=3usize).min(len);
        for _ in 0..n_keywords {
            let kw = class_keywords[label][rng.random_range(0..k)].as_str();
            let at = rng.random_range(0..tokens.len());
            tokens[at] = kw;
        }
        rows.push((label, tokens.join(" ")));
    }
    rows
}

/// Write the synthetic corpus TSV.
pub fn cmd_synth_corpus(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate(&[])?;
    ensure_out_dir(cfg)?;
    let rows = synth_corpus(&cfg.corpus, cfg.seed());
    let path = cfg.out_dir.join("corpus.tsv");
    write_corpus_tsv(&path, &rows)?;

    let mut manifest = CommandManifest::new("synth-corpus", cfg);
    manifest.record_output(&path)?;
    manifest.save(&cfg.out_dir)?;
    println!("wrote {} texts to {}", rows.len(), path.display());
    Ok(path)
}

fn load_corpus(cfg: &RunConfig, corpus: &Path) -> Result<(Vocabulary, Vec<TokenSequence>)> {
    let rows = read_corpus_tsv(corpus)?;
    let vocab = Vocabulary::build(rows.iter().map(|(_, t)| t.as_str()), cfg.corpus.vocab_size);
    let seqs = tokenize_corpus(&rows, &vocab, cfg.model.max_len)?;
    Ok((vocab, seqs))
}

fn train_eval_split(
    seqs: &[TokenSequence],
    eval_fraction: f64,
    seed: u64,
) -> Result<(Vec<TokenSequence>, Vec<TokenSequence>)> {
    split_by_text(seqs, |s| s.raw_text.as_str(), 1.0 - eval_fraction, seed)
}

/// Train the classifier (standard or adversarial) and persist it.
pub fn cmd_train_classifier(cfg: &RunConfig, corpus: &Path, adversarial: bool) -> Result<PathBuf> {
    cfg.validate(&[corpus])?;
    ensure_out_dir(cfg)?;
    let (vocab, seqs) = load_corpus(cfg, corpus)?;
    let (train, eval) = train_eval_split(&seqs, cfg.corpus.eval_fraction, cfg.seed())?;

    let adv_cfg = AdvTrainConfig {
        base: cfg.model.train_config(cfg.seed()),
        inner_steps: cfg.adv.inner_steps,
        step_size: cfg.adv.step_size,
        eps_train: if adversarial { cfg.adv.eps_train } else { 0.0 },
    };
    let (model, log) =
        adv_train_classifier(&train, &eval, vocab, cfg.model.model_config(), &adv_cfg)?;

    let (name, command) = if adversarial {
        ("classifier-adv.bin", "adv-train")
    } else {
        ("classifier.bin", "train-classifier")
    };
    let model_path = cfg.out_dir.join(name);
    model.save(&model_path)?;
    let log_path = cfg.out_dir.join(format!("{command}-log.json"));
    write_text(&log_path, &serde_json::to_string_pretty(&log)?)?;

    let mut manifest = CommandManifest::new(command, cfg);
    manifest.record_input(corpus)?;
    manifest.record_output(&model_path)?;
    manifest.record_output(&log_path)?;
    manifest.save(&cfg.out_dir)?;
    println!(
        "{command}: eval accuracy {:.4}, final epoch loss {:.4e}, model {}",
        log.eval_accuracy,
        log.epoch_losses.last().copied().unwrap_or(f64::NAN),
        model_path.display()
    );
    Ok(model_path)
}

/// Standard training entry point.
pub fn cmd_train_standard(cfg: &RunConfig, corpus: &Path) -> Result<PathBuf> {
    cmd_train_classifier(cfg, corpus, false)
}

/// Adversarial (embedding-space) training entry point.
pub fn cmd_adv_train(cfg: &RunConfig, corpus: &Path) -> Result<PathBuf> {
    cmd_train_classifier(cfg, corpus, true)
}

/// Generate perturbations for every corpus text with the given methods.
pub fn cmd_gen_perturbs(
    cfg: &RunConfig,
    corpus: &Path,
    model_path: &Path,
    methods: &[PerturbMethod],
) -> Result<PathBuf> {
    cfg.validate(&[corpus, model_path])?;
    ensure_out_dir(cfg)?;
    let model = ClassifierModel::load(model_path)?;
    let rows = read_corpus_tsv(corpus)?;
    let seqs = tokenize_corpus(&rows, &model.vocab, model.config.max_len)?;
    let seed = cfg.seed();

    let table = if methods.contains(&PerturbMethod::Greedy) {
        Some(build_synonym_table(&model, cfg.perturb.synonym_k)?)
    } else {
        None
    };

    let pool = cfg.thread_pool()?;
    let per_text_records: Vec<Vec<PerturbationRecord>> = pool.install(|| {
        seqs.par_iter()
            .enumerate()
            .map(|(idx, s)| -> Result<Vec<PerturbationRecord>> {
                let mut records = Vec::new();
                for method in methods {
                    let perturbs = match method {
                        PerturbMethod::Random => {
                            let mut rng = ChaCha8Rng::seed_from_u64(seed);
                            rng.set_stream(idx as u64);
                            random_chain(s, &model.vocab, &cfg.perturb, &mut rng)?
                        }
                        PerturbMethod::Greedy => greedy_perturbs(
                            s,
                            &model,
                            table.as_ref().expect("table built for greedy runs"),
                            cfg.perturb.max_edits,
                        )?,
                    };
                    records.extend(
                        perturbs
                            .iter()
                            .map(|p| PerturbationRecord::from_perturbation(p, &model.vocab)),
                    );
                }
                Ok(records)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let records: Vec<PerturbationRecord> = per_text_records.into_iter().flatten().collect();

    let path = cfg.out_dir.join("perturbs.jsonl");
    write_jsonl(&path, &records)?;

    let mut manifest = CommandManifest::new("gen-perturbs", cfg);
    manifest.record_input(corpus)?;
    manifest.record_input(model_path)?;
    manifest.record_output(&path)?;
    manifest.save(&cfg.out_dir)?;
    println!(
        "gen-perturbs: {} perturbations over {} texts -> {}",
        records.len(),
        seqs.len(),
        path.display()
    );
    Ok(path)
}

/// Random perturbations with edit counts cycling 1..=max_edits, capped by
/// the text's editable length.
fn random_chain(
    s: &TokenSequence,
    vocab: &Vocabulary,
    section: &PerturbSection,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Perturbation>> {
    let eligible = s
        .tokens
        .iter()
        .filter(|t| !Vocabulary::is_reserved(**t))
        .count();
    if eligible == 0 {
        return Ok(Vec::new());
    }
    (0..section.per_text)
        .map(|j| {
            let n_edits = (j % section.max_edits + 1).min(eligible);
            random_perturb(s, n_edits, vocab, rng)
        })
        .collect()
}

/// Run the norm-bound search over a perturbation file; writes the tuple
/// dataset, the bucket histogram and the dataset manifest.
pub fn cmd_find_epsilon(
    cfg: &RunConfig,
    corpus: &Path,
    model_path: &Path,
    perturbs: &Path,
) -> Result<PathBuf> {
    cfg.validate(&[corpus, model_path, perturbs])?;
    ensure_out_dir(cfg)?;
    let model = ClassifierModel::load(model_path)?;
    let rows = read_corpus_tsv(corpus)?;
    let seqs = tokenize_corpus(&rows, &model.vocab, model.config.max_len)?;
    let by_hash: HashMap<String, &TokenSequence> =
        seqs.iter().map(|s| (s.text_hash(), s)).collect();
    let records: Vec<PerturbationRecord> = read_jsonl(perturbs)?;

    let search = SearchConfig {
        seed: cfg.seed(),
        ..cfg.search
    };
    let pool = cfg.thread_pool()?;
    let tuples: Vec<DataTuple> = pool.install(|| {
        records
            .par_iter()
            .map(|rec| -> Result<DataTuple> {
                let s = by_hash.get(&rec.text_hash).ok_or_else(|| {
                    Error::InvalidPerturbation(format!(
                        "perturbation references unknown text {}",
                        rec.text_hash
                    ))
                })?;
                let p = rec.to_perturbation(&model.vocab)?;
                find_epsilon(&model, s, &p, &search)
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let tuples_path = cfg.out_dir.join("tuples.jsonl");
    write_jsonl(&tuples_path, &tuples)?;

    let hist = epsilon_histogram(&tuples, search.eps_max)?;
    let hist_txt = cfg.out_dir.join("histogram.txt");
    write_text(&hist_txt, &hist.render_text())?;
    let hist_csv = cfg.out_dir.join("histogram.csv");
    write_text(&hist_csv, &hist.render_csv())?;

    let overshoot = tuples
        .iter()
        .filter(|t| t.status == TupleStatus::DiscardedOvershoot)
        .count();
    let exhausted = tuples
        .iter()
        .filter(|t| t.status == TupleStatus::DiscardedExhausted)
        .count();
    let dataset_manifest = DatasetManifest {
        corpus_path: corpus.display().to_string(),
        corpus_hash: file_hash(corpus)?,
        model_id: file_hash(model_path)?,
        vocab_hash: model.vocab.hash(),
        search_config: search,
        seed: cfg.seed(),
        accepted: hist.total,
        discarded_overshoot: overshoot,
        discarded_exhausted: exhausted,
        rejected_marker_truncation: 0,
        scorer_loss: "mse".to_string(),
        target_normalization: "none".to_string(),
    };
    let dm_path = cfg.out_dir.join("dataset-manifest.json");
    dataset_manifest.save(&dm_path)?;

    let mut manifest = CommandManifest::new("find-epsilon", cfg);
    manifest.record_input(corpus)?;
    manifest.record_input(model_path)?;
    manifest.record_input(perturbs)?;
    manifest.record_output(&tuples_path)?;
    manifest.record_output(&hist_txt)?;
    manifest.record_output(&hist_csv)?;
    manifest.record_output(&dm_path)?;
    manifest.save(&cfg.out_dir)?;

    println!(
        "find-epsilon: {} accepted, {} overshoot, {} exhausted (discard fraction {:.3})",
        hist.total,
        overshoot,
        exhausted,
        hist.discard_fraction()
    );
    println!("{}", hist.render_text());
    Ok(tuples_path)
}

/// Build scorer datasets from a tuple file, train the scorer, evaluate on
/// the held-out split and dump the report plus predictions.
pub fn cmd_train_scorer(
    cfg: &RunConfig,
    corpus: &Path,
    model_path: &Path,
    tuples_path: &Path,
) -> Result<PathBuf> {
    cfg.validate(&[corpus, model_path, tuples_path])?;
    ensure_out_dir(cfg)?;
    let model = ClassifierModel::load(model_path)?;
    let rows = read_corpus_tsv(corpus)?;
    let seqs = tokenize_corpus(&rows, &model.vocab, model.config.max_len)?;
    let texts: HashMap<String, TokenSequence> =
        seqs.into_iter().map(|s| (s.text_hash(), s)).collect();

    let tuples: Vec<DataTuple> = dedup_tuples(read_jsonl(tuples_path)?);
    let (examples, rejected) = build_scorer_examples(&tuples, &texts, &model, cfg.scorer.max_len)?;
    let (train, test) = split_by_text(
        &examples,
        |e| e.text_hash.as_str(),
        cfg.scorer.split_ratio,
        cfg.seed(),
    )?;

    let scorer_cfg = cfg.scorer.scorer_config(cfg.search.eps_max, cfg.seed());
    let vocab_hash = model.vocab.hash();
    let (scorer, log) = train_scorer(
        &train,
        &test,
        model.vocab.len(),
        vocab_hash.clone(),
        &scorer_cfg,
    )?;

    let scorer_path = cfg.out_dir.join("scorer.bin");
    scorer.save(&scorer_path)?;
    let train_path = cfg.out_dir.join("scorer-train.jsonl");
    write_jsonl(&train_path, &train)?;
    let test_path = cfg.out_dir.join("scorer-test.jsonl");
    write_jsonl(&test_path, &test)?;
    let log_path = cfg.out_dir.join("scorer-log.json");
    write_text(&log_path, &serde_json::to_string_pretty(&log)?)?;

    let ids = ReportIds {
        setup: "own-test-split".to_string(),
        dataset: corpus.display().to_string(),
        method: "mixed".to_string(),
        model_id: file_hash(model_path)?,
    };
    let (report, predictions) = evaluate_scorer(&scorer, &test, &vocab_hash, &ids)?;
    let report_txt = cfg.out_dir.join("report.txt");
    write_text(&report_txt, &report.render_text())?;
    let report_csv = cfg.out_dir.join("report.csv");
    write_text(&report_csv, &report.render_csv())?;
    let pred_path = cfg.out_dir.join("predictions.csv");
    write_text(&pred_path, &render_prediction_csv(&predictions))?;

    // dataset manifest for the scorer splits, vocab hash included so
    // evaluation can refuse foreign vocabularies
    let base = DatasetManifest::load(&tuples_path.with_file_name("dataset-manifest.json"))
        .unwrap_or(DatasetManifest {
            corpus_path: corpus.display().to_string(),
            corpus_hash: file_hash(corpus)?,
            model_id: file_hash(model_path)?,
            vocab_hash: vocab_hash.clone(),
            search_config: cfg.search,
            seed: cfg.seed(),
            accepted: 0,
            discarded_overshoot: 0,
            discarded_exhausted: 0,
            rejected_marker_truncation: 0,
            scorer_loss: "mse".to_string(),
            target_normalization: "none".to_string(),
        });
    let dataset_manifest = DatasetManifest {
        vocab_hash: vocab_hash.clone(),
        rejected_marker_truncation: rejected,
        scorer_loss: "mse".to_string(),
        target_normalization: "none".to_string(),
        ..base
    };
    let dm_path = cfg.out_dir.join("scorer-dataset-manifest.json");
    dataset_manifest.save(&dm_path)?;

    let mut manifest = CommandManifest::new("train-scorer", cfg);
    manifest.record_input(corpus)?;
    manifest.record_input(model_path)?;
    manifest.record_input(tuples_path)?;
    for p in [
        &scorer_path,
        &train_path,
        &test_path,
        &log_path,
        &report_txt,
        &report_csv,
        &pred_path,
        &dm_path,
    ] {
        manifest.record_output(p)?;
    }
    manifest.save(&cfg.out_dir)?;

    println!(
        "train-scorer: {} train / {} test examples ({rejected} rejected), final val mse {:.4e}",
        train.len(),
        test.len(),
        log.val_losses.last().copied().unwrap_or(f64::NAN)
    );
    println!("{}", report.render_text());
    Ok(scorer_path)
}

/// Evaluate a stored scorer against a scorer dataset (own or foreign).
pub fn cmd_evaluate(
    cfg: &RunConfig,
    scorer_path: &Path,
    test_path: &Path,
    dataset_manifest_path: &Path,
    setup: &str,
) -> Result<PathBuf> {
    cfg.validate(&[scorer_path, test_path, dataset_manifest_path])?;
    ensure_out_dir(cfg)?;
    let scorer = ScorerModel::load(scorer_path)?;
    let test: Vec<ScorerExample> = read_jsonl(test_path)?;
    let dm = DatasetManifest::load(dataset_manifest_path)?;

    let ids = ReportIds {
        setup: setup.to_string(),
        dataset: dm.corpus_path.clone(),
        method: "mixed".to_string(),
        model_id: dm.model_id.clone(),
    };
    let (report, predictions) = evaluate_scorer(&scorer, &test, &dm.vocab_hash, &ids)?;

    let report_txt = cfg.out_dir.join("eval-report.txt");
    write_text(&report_txt, &report.render_text())?;
    let report_csv = cfg.out_dir.join("eval-report.csv");
    write_text(&report_csv, &report.render_csv())?;
    let pred_path = cfg.out_dir.join("eval-predictions.csv");
    write_text(&pred_path, &render_prediction_csv(&predictions))?;

    let mut manifest = CommandManifest::new("evaluate", cfg);
    manifest.record_input(scorer_path)?;
    manifest.record_input(test_path)?;
    manifest.record_input(dataset_manifest_path)?;
    manifest.record_output(&report_txt)?;
    manifest.record_output(&report_csv)?;
    manifest.record_output(&pred_path)?;
    manifest.save(&cfg.out_dir)?;

    println!("{}", report.render_text());
    Ok(report_txt)
}
