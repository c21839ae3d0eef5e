//! ROUGE-L, BLEU@2, macro-accuracy, per-relative-position breakdowns and the
//! paired t-test.
//!
//! ROUGE-L uses β = 1.2 in `F = (1+β²)PR / (R + β²P)`, the value used by the
//! nlg-eval package. β changes absolute scores, so compare numbers only
//! between runs of this crate.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::text::tokenize;

pub const ROUGE_L_BETA: f64 = 1.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    RougeL,
    Bleu2,
    /// Exact match after tokenization.
    Accuracy,
    MacroAccuracy,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::RougeL => "rouge-l",
            Metric::Bleu2 => "bleu-2",
            Metric::Accuracy => "accuracy",
            Metric::MacroAccuracy => "macro-accuracy",
        }
    }

    /// Per-sample score. Macro-accuracy is a corpus-level statistic; its per-sample
    /// value is exact match.
    pub fn score(self, candidate: &str, reference: &str) -> Result<f64> {
        match self {
            Metric::RougeL => rouge_l(candidate, reference),
            Metric::Bleu2 => bleu_2(candidate, reference),
            Metric::Accuracy | Metric::MacroAccuracy => Ok(exact_match(candidate, reference)),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rouge-l" | "rougel" | "rouge_l" => Ok(Metric::RougeL),
            "bleu-2" | "bleu2" | "bleu@2" => Ok(Metric::Bleu2),
            "accuracy" | "acc" | "exact-match" => Ok(Metric::Accuracy),
            "macro-accuracy" | "macro-acc" => Ok(Metric::MacroAccuracy),
            other => Err(Error::invalid(format!("unknown metric {other:?}"))),
        }
    }
}

pub fn exact_match(candidate: &str, reference: &str) -> f64 {
    if tokenize(candidate) == tokenize(reference) {
        1.0
    } else {
        0.0
    }
}

/// Length of the longest common subsequence of two token sequences.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-score on pre-tokenized sequences. `reference` must be non-empty.
pub fn rouge_l_tokens<T: PartialEq>(candidate: &[T], reference: &[T]) -> f64 {
    let lcs = lcs_len(candidate, reference);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / candidate.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    let b2 = ROUGE_L_BETA * ROUGE_L_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

pub fn rouge_l(candidate: &str, reference: &str) -> Result<f64> {
    let reference = tokenize(reference);
    if reference.is_empty() {
        return Err(Error::invalid("rouge_l: empty reference"));
    }
    Ok(rouge_l_tokens(&tokenize(candidate), &reference))
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    for gram in tokens.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

fn clipped_matches(cand: &[String], reference: &[String], n: usize) -> (usize, usize) {
    let c = ngram_counts(cand, n);
    let r = ngram_counts(reference, n);
    let matched = c
        .iter()
        .map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, cand.len().saturating_sub(n - 1))
}

/// Sentence BLEU with unigram and bigram precision, add-one smoothing on the
/// bigram term and the standard brevity penalty.
pub fn bleu_2(candidate: &str, reference: &str) -> Result<f64> {
    let reference = tokenize(reference);
    if reference.is_empty() {
        return Err(Error::invalid("bleu_2: empty reference"));
    }
    let cand = tokenize(candidate);
    if cand.is_empty() {
        return Ok(0.0);
    }
    let (m1, c1) = clipped_matches(&cand, &reference, 1);
    if m1 == 0 {
        return Ok(0.0);
    }
    let (m2, c2) = clipped_matches(&cand, &reference, 2);
    let p1 = m1 as f64 / c1 as f64;
    let p2 = (m2 as f64 + 1.0) / (c2 as f64 + 1.0);
    let (c, r) = (cand.len() as f64, reference.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    Ok(bp * (0.5 * p1.ln() + 0.5 * p2.ln()).exp())
}

/// Unweighted mean over gold classes of per-class accuracy.
pub fn macro_accuracy<S: AsRef<str>>(predictions: &[S], gold: &[S]) -> Result<f64> {
    if predictions.len() != gold.len() {
        return Err(Error::invalid(format!(
            "macro_accuracy: {} predictions for {} gold labels",
            predictions.len(),
            gold.len()
        )));
    }
    if gold.is_empty() {
        return Err(Error::invalid("macro_accuracy: no gold labels"));
    }
    let mut per_class: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for (p, g) in predictions.iter().zip(gold) {
        let e = per_class.entry(g.as_ref()).or_default();
        e.1 += 1;
        if p.as_ref() == g.as_ref() {
            e.0 += 1;
        }
    }
    let sum: f64 = per_class
        .values()
        .map(|&(ok, n)| ok as f64 / n as f64)
        .sum();
    Ok(sum / per_class.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionRow {
    pub relpos: i64,
    pub mean: f64,
    pub count: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PositionTable {
    /// Sorted ascending by `relpos`.
    pub rows: Vec<PositionRow>,
    /// Samples without a relative position: (mean, count).
    pub unpositioned: Option<(f64, usize)>,
}

impl PositionTable {
    /// max − min of the row means; 0 for fewer than two rows.
    pub fn spread(&self) -> f64 {
        let means = self.rows.iter().map(|r| r.mean);
        let (lo, hi) = means.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), m| {
            (lo.min(m), hi.max(m))
        });
        if self.rows.len() < 2 {
            0.0
        } else {
            hi - lo
        }
    }

    pub fn row(&self, relpos: i64) -> Option<&PositionRow> {
        self.rows.iter().find(|r| r.relpos == relpos)
    }
}

pub fn per_position_table(entries: &[(Option<i64>, f64)]) -> PositionTable {
    let mut by_pos: BTreeMap<i64, (f64, usize)> = BTreeMap::new();
    let mut none = (0.0, 0usize);
    for &(pos, score) in entries {
        let slot = match pos {
            Some(p) => by_pos.entry(p).or_default(),
            None => &mut none,
        };
        slot.0 += score;
        slot.1 += 1;
    }
    PositionTable {
        rows: by_pos
            .into_iter()
            .map(|(relpos, (sum, count))| PositionRow {
                relpos,
                mean: sum / count as f64,
                count,
            })
            .collect(),
        unpositioned: (none.1 > 0).then(|| (none.0 / none.1 as f64, none.1)),
    }
}

/// Two-sided paired t-test on `a[i] - b[i]`; returns the p-value.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid("paired_t_test: length mismatch"));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::invalid("paired_t_test: need at least two pairs"));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if !(var > 0.0) {
        return Err(Error::ZeroVariance);
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| Error::invalid(e.to_string()))?;
    Ok((2.0 * dist.sf(t.abs())).clamp(0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub metric: Metric,
    pub per_sample: Vec<f64>,
    /// Mean of `per_sample` (macro-accuracy for [`Metric::MacroAccuracy`]).
    pub aggregate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub by_relpos: Option<PositionTable>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_value: Option<f64>,
}

/// Scores aligned `(prediction, gold)` pairs.
pub fn score_pairs<S: AsRef<str>>(metric: Metric, predictions: &[S], gold: &[S]) -> Result<ScoreReport> {
    if predictions.len() != gold.len() {
        return Err(Error::invalid("score_pairs: length mismatch"));
    }
    let per_sample = predictions
        .iter()
        .zip(gold)
        .map(|(p, g)| metric.score(p.as_ref(), g.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    let aggregate = if per_sample.is_empty() {
        None
    } else if metric == Metric::MacroAccuracy {
        let p: Vec<String> = predictions.iter().map(|s| crate::text::normalize(s.as_ref())).collect();
        let g: Vec<String> = gold.iter().map(|s| crate::text::normalize(s.as_ref())).collect();
        Some(macro_accuracy(&p, &g)?)
    } else {
        Some(per_sample.iter().sum::<f64>() / per_sample.len() as f64)
    };
    Ok(ScoreReport {
        metric,
        per_sample,
        aggregate,
        by_relpos: None,
        p_value: None,
    })
}
