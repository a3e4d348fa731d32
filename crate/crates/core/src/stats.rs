//! Rank correlations and report tables.
//!
//! Kendall is the tie-corrected tau-b computed by sort-and-merge (x-sorted
//! discordant pairs counted as merge inversions on y), not by pair
//! enumeration — the O(n^2) enumeration lives in the test suites as the
//! independent oracle. Spearman rank-transforms with average ranks for ties
//! and takes Pearson on the ranks. Edit distance over a handful of integer
//! values makes ties dominate, which is why the tie-corrected variant is
//! the one implemented.

use serde::{Deserialize, Serialize};

use crate::epsilon_search::{DataTuple, TupleStatus};
use crate::error::{Error, Result};

fn check_pair(measure: &'static str, xs: &[f64], ys: &[f64]) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(Error::UndefinedStatistic {
            measure,
            reason: format!("length mismatch: {} vs {}", xs.len(), ys.len()),
        });
    }
    if xs.len() < 2 {
        return Err(Error::UndefinedStatistic {
            measure,
            reason: format!("need at least 2 samples, got {}", xs.len()),
        });
    }
    let constant = |v: &[f64]| v.iter().all(|x| *x == v[0]);
    if constant(xs) || constant(ys) {
        return Err(Error::UndefinedStatistic {
            measure,
            reason: "an input is all ties".into(),
        });
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::UndefinedStatistic {
            measure,
            reason: "non-finite input".into(),
        });
    }
    Ok(())
}

fn tie_pairs(sorted: &[f64]) -> f64 {
    let mut total = 0.0;
    let mut run = 1.0f64;
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            run += 1.0;
        } else {
            total += run * (run - 1.0) / 2.0;
            run = 1.0;
        }
    }
    total + run * (run - 1.0) / 2.0
}

/// Merge sort over y, counting pairs that arrive out of order. After an
/// (x, y) lexicographic pre-sort these are exactly the discordant pairs:
/// x-tied pairs enter y-sorted and never count.
fn merge_count(ys: &mut [f64]) -> f64 {
    let n = ys.len();
    let mut buf = vec![0.0; n];
    let mut swaps = 0.0f64;
    let mut width = 1;
    while width < n {
        let mut lo = 0;
        while lo + width < n {
            let mid = lo + width;
            let hi = (mid + width).min(n);
            let (mut i, mut j, mut k) = (lo, mid, lo);
            while i < mid && j < hi {
                if ys[j] < ys[i] {
                    swaps += (mid - i) as f64;
                    buf[k] = ys[j];
                    j += 1;
                } else {
                    buf[k] = ys[i];
                    i += 1;
                }
                k += 1;
            }
            while i < mid {
                buf[k] = ys[i];
                i += 1;
                k += 1;
            }
            while j < hi {
                buf[k] = ys[j];
                j += 1;
                k += 1;
            }
            ys[lo..hi].copy_from_slice(&buf[lo..hi]);
            lo = hi;
        }
        width *= 2;
    }
    swaps
}

/// Kendall tau-b: `(C - D) / sqrt((n0 - n1)(n0 - n2))` with n1/n2 the tied
/// pair counts of each side. Undefined (an error) when either side is all
/// ties.
pub fn kendall_tau(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair("kendall_tau", xs, ys)?;
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        xs[a]
            .partial_cmp(&xs[b])
            .unwrap()
            .then(ys[a].partial_cmp(&ys[b]).unwrap())
    });

    let n0 = n as f64 * (n as f64 - 1.0) / 2.0;
    let x_sorted: Vec<f64> = order.iter().map(|&i| xs[i]).collect();
    let mut y_in_x_order: Vec<f64> = order.iter().map(|&i| ys[i]).collect();

    // tied pairs in x and jointly in (x, y), from run lengths
    let n1 = tie_pairs(&x_sorted);
    let mut joint = 0.0f64;
    let mut run = 1.0f64;
    for w in order.windows(2) {
        if xs[w[0]] == xs[w[1]] && ys[w[0]] == ys[w[1]] {
            run += 1.0;
        } else {
            joint += run * (run - 1.0) / 2.0;
            run = 1.0;
        }
    }
    joint += run * (run - 1.0) / 2.0;

    let discordant = merge_count(&mut y_in_x_order);
    // y_in_x_order is now plain sorted y
    let n2 = tie_pairs(&y_in_x_order);

    let con_minus_dis = n0 - n1 - n2 + joint - 2.0 * discordant;
    let denom = ((n0 - n1) * (n0 - n2)).sqrt();
    Ok(con_minus_dis / denom)
}

/// Average ranks (1-based), ties sharing the mean of their positions.
fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let mean_rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = mean_rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rho: Pearson correlation of average ranks.
pub fn spearman_rho(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair("spearman_rho", xs, ys)?;
    pearson_r(&average_ranks(xs), &average_ranks(ys))
}

/// Product-moment correlation. Zero variance on either side is an error.
pub fn pearson_r(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair("pearson_r", xs, ys)?;
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::UndefinedStatistic {
            measure: "pearson_r",
            reason: "zero variance".into(),
        });
    }
    Ok(cov / (vx.sqrt() * vy.sqrt()))
}

/// Accepted-epsilon bucket counts in the report layout: closed-right edges
/// at 0.1..0.6 and one final bucket up to the sweep cap, plus the total and
/// the discarded count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonHistogram {
    /// Upper bucket edges; the first bucket is `[0, edges[0]]`, later ones
    /// `(edges[i-1], edges[i]]`.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub total: usize,
    pub discarded: usize,
}

pub fn epsilon_histogram(tuples: &[DataTuple], eps_max: f64) -> Result<EpsilonHistogram> {
    let mut edges: Vec<f64> = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6]
        .into_iter()
        .filter(|e| *e < eps_max)
        .collect();
    edges.push(eps_max);
    let mut counts = vec![0usize; edges.len()];
    let mut total = 0;
    let mut discarded = 0;
    for t in tuples {
        if t.status != TupleStatus::Accepted {
            discarded += 1;
            continue;
        }
        if t.epsilon <= 0.0 || t.epsilon > eps_max + 1e-12 {
            return Err(Error::EpsilonOutOfRange {
                value: t.epsilon,
                max: eps_max,
            });
        }
        let bucket = edges
            .iter()
            .position(|e| t.epsilon <= e + 1e-12)
            .expect("final edge is the sweep cap");
        counts[bucket] += 1;
        total += 1;
    }
    Ok(EpsilonHistogram {
        edges,
        counts,
        total,
        discarded,
    })
}

impl EpsilonHistogram {
    pub fn discard_fraction(&self) -> f64 {
        let all = self.total + self.discarded;
        if all == 0 {
            0.0
        } else {
            self.discarded as f64 / all as f64
        }
    }

    pub fn render_text(&self) -> String {
        let mut header = String::from("range   ");
        let mut values = String::from("count   ");
        let mut lo = 0.0;
        for (edge, count) in self.edges.iter().zip(&self.counts) {
            let label = if lo == 0.0 {
                format!("[0,{edge}]")
            } else {
                format!("({lo},{edge}]")
            };
            header.push_str(&format!("{label:>12}"));
            values.push_str(&format!("{count:>12}"));
            lo = *edge;
        }
        header.push_str(&format!("{:>12}{:>12}", "TOTAL", "Discarded"));
        values.push_str(&format!("{:>12}{:>12}", self.total, self.discarded));
        format!("{header}\n{values}\n")
    }

    pub fn render_csv(&self) -> String {
        let mut head = Vec::new();
        let mut row = Vec::new();
        let mut lo = 0.0;
        for (edge, count) in self.edges.iter().zip(&self.counts) {
            head.push(if lo == 0.0 {
                format!("[0,{edge}]")
            } else {
                format!("({lo},{edge}]")
            });
            row.push(count.to_string());
            lo = *edge;
        }
        head.push("TOTAL".into());
        head.push("Discarded".into());
        row.push(self.total.to_string());
        row.push(self.discarded.to_string());
        format!("{}\n{}\n", head.join(","), row.join(","))
    }
}

/// Correlation of one intensity measure against the found epsilon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureRow {
    pub measure: String,
    pub kendall: f64,
    pub spearman: f64,
    pub pearson: f64,
}

/// Per-measure correlation table for one evaluation setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    /// Free-form tag for train/test pairing in generalization runs.
    pub setup: String,
    pub dataset: String,
    pub method: String,
    pub model_id: String,
    pub samples: usize,
    pub rows: Vec<MeasureRow>,
}

impl CorrelationReport {
    pub fn row(&self, measure: &str) -> Option<&MeasureRow> {
        self.rows.iter().find(|r| r.measure == measure)
    }

    pub fn render_text(&self) -> String {
        let mut out = format!(
            "setup: {}  dataset: {}  method: {}  model: {}  n: {}\n",
            self.setup, self.dataset, self.method, self.model_id, self.samples
        );
        out.push_str(&format!(
            "{:<24}{:>10}{:>10}{:>10}\n",
            "measure", "kendall", "spearman", "pearson"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<24}{:>10.4}{:>10.4}{:>10.4}\n",
                r.measure, r.kendall, r.spearman, r.pearson
            ));
        }
        out
    }

    pub fn render_csv(&self) -> String {
        let mut out = String::from(
            "setup,dataset,method,model_id,samples,measure,kendall,spearman,pearson\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                self.setup,
                self.dataset,
                self.method,
                self.model_id,
                self.samples,
                r.measure,
                r.kendall,
                r.spearman,
                r.pearson
            ));
        }
        out
    }
}
