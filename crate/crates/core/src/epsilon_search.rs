//! Norm-bound search: for one (text, perturbation) pair, find the minimum L2
//! budget whose projected-gradient perturbation of the embedding matrix
//! shifts the model output as much as the discrete edit did.
//!
//! The sweep walks the epsilon grid from the interval upward. At each grid
//! value it restarts projected gradient ascent from delta = 0 (normalized
//! cross-entropy gradient steps, projected back onto the ball) and tests the
//! acceptance band after every step: the first step whose continuous shift
//! lands within the half-band of the discrete shift accepts that epsilon.
//! If a grid value maximizes past the band without ever entering it, the
//! pair is discarded as an overshoot — the grid has no finer value to try.
//! Exhausting the grid discards the pair as unreachable.

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::perturbgen::{apply, Perturbation};
use crate::textmodel::{model_output_shift, ClassifierModel, TokenSequence, Vocabulary};

/// Sweep and inner-ascent settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Inner ascent steps per grid value.
    pub t_a: usize,
    /// Ascent step size applied to the normalized gradient.
    pub alpha: f64,
    /// Grid spacing of the epsilon sweep.
    pub eps_interval: f64,
    /// Acceptance half-band around the discrete shift.
    pub phi: f64,
    /// Largest epsilon the sweep visits.
    pub eps_max: f64,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            t_a: 15,
            alpha: 0.1,
            eps_interval: 0.01,
            phi: 0.005,
            eps_max: 1.0,
            seed: 42,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.t_a < 1 {
            problems.push("search.t_a must be at least 1".to_string());
        }
        if self.alpha <= 0.0 {
            problems.push("search.alpha must be positive".to_string());
        }
        if self.eps_interval <= 0.0 || self.eps_interval >= self.eps_max {
            problems.push("search.eps_interval must satisfy 0 < interval < eps_max".to_string());
        }
        if self.phi <= 0.0 {
            problems.push("search.phi must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems))
        }
    }

    /// Grid values swept by [`find_epsilon`]: interval, 2*interval, ...
    pub fn grid_len(&self) -> usize {
        (self.eps_max / self.eps_interval + 1e-9).floor() as usize
    }
}

/// Project onto the closed L2 ball of radius `eps`: identity inside the
/// ball, radial scaling outside. Direction is preserved exactly.
pub fn project_l2(delta: &Tensor, eps: f64) -> Tensor {
    let norm = delta.l2_norm();
    if norm <= eps {
        return delta.clone();
    }
    let mut out = delta.clone();
    out.scale(eps / norm);
    out
}

/// Discrete-side shift: the normalized distance between the probability
/// outputs on the original and the perturbed text.
pub fn discrete_shift(model: &ClassifierModel, s: &TokenSequence, p: &Perturbation) -> Result<f64> {
    let perturbed = apply(s, p)?;
    let a = model.forward(s)?.probs;
    let b = model.forward(&perturbed)?.probs;
    model_output_shift(&a, &b)
}

/// One recorded ascent step: the perturbation norm after the update and the
/// continuous shift it produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PgdStep {
    pub step: usize,
    pub delta_norm: f64,
    pub shift: f64,
}

/// Result of one inner ascent run at a fixed ball radius.
#[derive(Debug, Clone)]
pub struct PgdOutcome {
    /// Perturbation at the best (or band-entering) step.
    pub delta: Tensor,
    /// Largest continuous shift seen over the run.
    pub shift: f64,
    /// Per-step trace, starting with the delta = 0 state as step 0.
    pub steps: Vec<PgdStep>,
    /// The gradient vanished and the ascent stopped early.
    pub plateau: bool,
    /// Index into `steps` of the first step inside the acceptance band,
    /// when a band was given.
    pub band_entry: Option<usize>,
}

/// Projected gradient ascent of the cross-entropy loss at `(x + delta, label)`
/// inside the `eps` ball, from a zero start.
///
/// The per-step trace lets the caller test the acceptance band at every
/// step; passing `band = (gamma, phi)` makes the ascent stop at the first
/// in-band step itself.
pub fn pgd_max_shift(
    model: &ClassifierModel,
    x: &Tensor,
    n_tokens: usize,
    label: usize,
    eps: f64,
    cfg: &SearchConfig,
    band: Option<(f64, f64)>,
) -> Result<PgdOutcome> {
    let base = model.forward_from_embeddings(x, n_tokens)?.probs;
    let shape = x.shape().to_vec();
    let mut delta = Tensor::zeros(shape);
    let in_band = |shift: f64| band.is_some_and(|(gamma, phi)| (shift - gamma).abs() < phi);

    let mut outcome = PgdOutcome {
        delta: delta.clone(),
        shift: 0.0,
        steps: vec![PgdStep {
            step: 0,
            delta_norm: 0.0,
            shift: 0.0,
        }],
        plateau: false,
        band_entry: None,
    };
    if in_band(0.0) {
        outcome.band_entry = Some(0);
        return Ok(outcome);
    }

    let mut built = model.build_graph(n_tokens, Some(label), true)?;
    let delta_node = built.delta.expect("graph built with delta");
    let mut bound = std::collections::HashMap::new();
    bound.insert("x".to_string(), x.clone());
    bound.insert("delta".to_string(), delta.clone());
    built.graph.forward(&bound)?;

    for t in 1..=cfg.t_a {
        let grad = built
            .graph
            .backward(&[delta_node])?
            .remove(&delta_node)
            .expect("requested");
        let gnorm = grad.l2_norm();
        if gnorm == 0.0 {
            outcome.plateau = true;
            break;
        }
        delta.add_scaled(&grad, cfg.alpha / gnorm);
        delta = project_l2(&delta, eps);

        bound.insert("delta".to_string(), delta.clone());
        built.graph.forward(&bound)?;
        let probs = built
            .graph
            .value(built.probs)
            .expect("forward ran")
            .data()
            .to_vec();
        let shift = model_output_shift(&base, &probs)?;
        outcome.steps.push(PgdStep {
            step: t,
            delta_norm: delta.l2_norm(),
            shift,
        });

        if shift > outcome.shift {
            outcome.shift = shift;
            outcome.delta = delta.clone();
        }
        if in_band(shift) {
            outcome.band_entry = Some(outcome.steps.len() - 1);
            outcome.delta = delta;
            return Ok(outcome);
        }
    }
    Ok(outcome)
}

/// Terminal state of one norm-bound search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TupleStatus {
    Accepted,
    DiscardedOvershoot,
    DiscardedExhausted,
}

impl TupleStatus {
    pub fn is_accepted(self) -> bool {
        self == TupleStatus::Accepted
    }
}

/// The learned correlation unit: a text, its discrete perturbation and the
/// norm bound whose continuous perturbation matched it (or why none did).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataTuple {
    pub text_hash: String,
    pub method: String,
    /// `[position, original token, replacement token]` triples.
    pub edits: Vec<(usize, String, String)>,
    pub epsilon: f64,
    pub gamma: f64,
    pub achieved_shift: f64,
    pub status: TupleStatus,
    pub seed: u64,
}

impl DataTuple {
    pub fn edit_distance(&self) -> usize {
        self.edits.len()
    }
}

fn edit_triples(p: &Perturbation, vocab: &Vocabulary) -> Vec<(usize, String, String)> {
    p.edits
        .iter()
        .map(|e| {
            (
                e.position,
                vocab.token(e.original).unwrap_or("<unk>").to_string(),
                vocab.token(e.replacement).unwrap_or("<unk>").to_string(),
            )
        })
        .collect()
}

/// Sweep the epsilon grid for one (text, perturbation) pair.
///
/// Grid values start at the interval itself — a zero radius admits only the
/// zero perturbation, so a discrete shift below the band half-width accepts
/// immediately at the first grid value with delta = 0.
pub fn find_epsilon(
    model: &ClassifierModel,
    s: &TokenSequence,
    p: &Perturbation,
    cfg: &SearchConfig,
) -> Result<DataTuple> {
    cfg.validate()?;
    let gamma = discrete_shift(model, s, p)?;
    let x = model.embed(s)?;
    let n_tokens = s.tokens.len().min(model.config.max_len);

    let template = DataTuple {
        text_hash: s.text_hash(),
        method: p.method.to_string(),
        edits: edit_triples(p, &model.vocab),
        epsilon: 0.0,
        gamma,
        achieved_shift: 0.0,
        status: TupleStatus::DiscardedExhausted,
        seed: cfg.seed,
    };

    let mut last_shift = 0.0;
    let mut last_eps = cfg.eps_interval;
    for i in 1..=cfg.grid_len() {
        let eps = i as f64 * cfg.eps_interval;
        let run = pgd_max_shift(
            model,
            &x,
            n_tokens,
            s.label,
            eps,
            cfg,
            Some((gamma, cfg.phi)),
        )?;
        if let Some(idx) = run.band_entry {
            return Ok(DataTuple {
                epsilon: eps,
                achieved_shift: run.steps[idx].shift,
                status: TupleStatus::Accepted,
                ..template
            });
        }
        if run.shift > gamma + cfg.phi {
            return Ok(DataTuple {
                epsilon: eps,
                achieved_shift: run.shift,
                status: TupleStatus::DiscardedOvershoot,
                ..template
            });
        }
        last_shift = run.shift;
        last_eps = eps;
    }
    Ok(DataTuple {
        epsilon: last_eps,
        achieved_shift: last_shift,
        status: TupleStatus::DiscardedExhausted,
        ..template
    })
}
