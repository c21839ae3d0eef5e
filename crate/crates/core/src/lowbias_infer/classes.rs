use serde::{Deserialize, Serialize};

use super::backend::{score_continuation, Backend};
use super::prompt::nli_prompt;
use crate::corpus::{Sample, Task};
use crate::error::{Error, Result};

/// Normalized class probabilities `s`, the class mask and the masked vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution {
    pub classes: Vec<String>,
    pub probs: Vec<f64>,
    pub mask: Vec<u8>,
    pub masked: Vec<f64>,
    pub selected_index: usize,
}

/// Index of the largest value; ties go to the smallest index.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

impl ClassDistribution {
    /// Normalizes per-class sequence log-probabilities in log space.
    pub fn from_log_scores(classes: Vec<String>, log_scores: &[f64]) -> Result<Self> {
        if classes.is_empty() || classes.len() != log_scores.len() {
            return Err(Error::invalid("class distribution: need one score per class"));
        }
        let max = log_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::invalid("class distribution: all classes have zero probability"));
        }
        let weights: Vec<f64> = log_scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        let probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
        Ok(Self::unmasked(classes, probs))
    }

    /// Normalizes raw non-negative class probabilities.
    pub fn from_raw(classes: Vec<String>, raw: &[f64]) -> Result<Self> {
        if raw.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(Error::invalid("class distribution: raw probabilities must be finite and ≥ 0"));
        }
        let logs: Vec<f64> = raw.iter().map(|p| p.ln()).collect();
        Self::from_log_scores(classes, &logs)
    }

    fn unmasked(classes: Vec<String>, probs: Vec<f64>) -> Self {
        let n = probs.len();
        ClassDistribution {
            classes,
            selected_index: argmax(&probs),
            masked: probs.clone(),
            probs,
            mask: vec![1; n],
        }
    }

    pub fn index_of(&self, class: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == class)
    }

    pub fn selected_class(&self) -> &str {
        &self.classes[self.selected_index]
    }
}

/// Class probabilities for an NLI sample from the product of each class
/// string's token probabilities under `backend`.
pub fn nli_class_distribution<B, S>(sample: &Sample, classes: &[S], backend: &B) -> Result<ClassDistribution>
where
    B: Backend + ?Sized,
    S: AsRef<str>,
{
    if sample.task != Task::Nli {
        return Err(Error::invalid("nli_class_distribution: sample is not NLI"));
    }
    nli_class_distribution_for_prompt(&nli_prompt(sample), classes, backend)
}

pub fn nli_class_distribution_for_prompt<B, S>(
    prompt: &str,
    classes: &[S],
    backend: &B,
) -> Result<ClassDistribution>
where
    B: Backend + ?Sized,
    S: AsRef<str>,
{
    if classes.is_empty() {
        return Err(Error::invalid("nli_class_distribution: empty class list"));
    }
    let scores = classes
        .iter()
        .map(|c| score_continuation(backend, prompt, c.as_ref()))
        .collect::<Result<Vec<f64>>>()?;
    ClassDistribution::from_log_scores(
        classes.iter().map(|c| c.as_ref().to_string()).collect(),
        &scores,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn raw_normalization() {
        let d = ClassDistribution::from_raw(names(3), &[1.0, 1.0, 2.0]).unwrap();
        for (p, e) in d.probs.iter().zip([0.25, 0.25, 0.5]) {
            assert!((p - e).abs() < 1e-12);
        }
        assert_eq!(d.selected_index, 2);
        assert_eq!(d.mask, vec![1, 1, 1]);
        let d = ClassDistribution::from_raw(names(2), &[0.3, 0.1]).unwrap();
        assert!((d.probs[0] - 0.75).abs() < 1e-12 && (d.probs[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn rejects_degenerate() {
        assert!(ClassDistribution::from_raw(names(2), &[0.0, 0.0]).is_err());
        assert!(ClassDistribution::from_raw(names(2), &[0.5]).is_err());
        assert!(ClassDistribution::from_raw(names(2), &[-1.0, 1.0]).is_err());
    }

    #[test]
    fn argmax_ties_to_smallest() {
        assert_eq!(argmax(&[0.1, 0.8, 0.8]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }
}
