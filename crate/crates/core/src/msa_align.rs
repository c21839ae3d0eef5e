//! Multi-strategy alignment: prune unsupervised responses and mask the gold
//! NLI class.
//!
//! CQA, SUM and KGC drop unreliable responses (low overlap with the target).
//! CQG drops non-compliant, dull or incoherent ones and never consults the
//! target. Rejected responses are dropped, never rewritten.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::{Sample, Task};
use crate::error::{Error, Result};
use crate::lowbias_infer::{argmax, CandidateRecord, ClassDistribution, GenerationResult};
use crate::metrics::rouge_l_tokens;
use crate::text::tokenize;

const DEFAULT_ALIGN_CONFIG: &str = include_str!("../config/align.json");

/// Two keep fractions closer than this are treated as equally near the target.
const TIE_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentConfig {
    pub instruction_keywords: Vec<String>,
    pub dull_patterns: Vec<String>,
    /// Minimum acceptable per-token probability.
    pub incoherence_threshold: f64,
    /// Minimum acceptable ROUGE-L against the target.
    pub unreliable_threshold: f64,
    pub candidate_thresholds: Vec<f64>,
    pub target_keep_fraction: f64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        serde_json::from_str(DEFAULT_ALIGN_CONFIG).expect("shipped align config is valid")
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |x: f64| x > 0.0 && x < 1.0;
        if !open_unit(self.incoherence_threshold) || !open_unit(self.unreliable_threshold) {
            return Err(Error::invalid("alignment thresholds must lie in (0, 1)"));
        }
        if self.candidate_thresholds.is_empty() {
            return Err(Error::invalid("candidate_thresholds must be non-empty"));
        }
        if !self.candidate_thresholds.iter().all(|t| open_unit(*t)) {
            return Err(Error::invalid("candidate thresholds must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.target_keep_fraction) {
            return Err(Error::invalid("target_keep_fraction must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: AlignmentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RejectionReason {
    NonCompliant,
    Dull,
    Incoherent,
    Unreliable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignedResponse {
    pub sample_id: String,
    pub text: String,
    pub token_logprobs: Vec<f64>,
    pub kept: bool,
    pub rejection_reasons: BTreeSet<RejectionReason>,
    /// Scale on this response's NLL in the alignment loss: 1 for generated
    /// responses, the backend probability of the selected class for NLI.
    #[serde(default = "unit_weight")]
    pub weight: f64,
}

fn unit_weight() -> f64 {
    1.0
}

fn contains_run(haystack: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

/// True when none of the instruction keywords appears as a whole token.
pub fn identify_noncompliant<S: AsRef<str>>(response: &GenerationResult, instruction_keywords: &[S]) -> bool {
    let toks = tokenize(&response.text);
    !instruction_keywords
        .iter()
        .any(|k| contains_run(&toks, &tokenize(k.as_ref())))
}

pub fn identify_dull<S: AsRef<str>>(response: &str, dull_patterns: &[S]) -> bool {
    let toks = tokenize(response);
    dull_patterns
        .iter()
        .any(|p| contains_run(&toks, &tokenize(p.as_ref())))
}

/// True when some token's probability is strictly below `threshold`.
pub fn identify_incoherent(response: &GenerationResult, threshold: f64) -> Result<bool> {
    if response.token_logprobs.len() != response.tokens.len() {
        return Err(Error::MissingLogprobs);
    }
    let cut = threshold.ln();
    Ok(response.token_logprobs.iter().any(|lp| *lp < cut))
}

/// True when ROUGE-L against the target is below `threshold`.
pub fn identify_unreliable(response: &str, target: &str, threshold: f64) -> Result<bool> {
    Ok(unreliable_stat(response, target)? < threshold)
}

/// Gate statistic for unreliable identification: ROUGE-L against the target.
pub fn unreliable_stat(response: &str, target: &str) -> Result<f64> {
    let target = tokenize(target);
    if target.is_empty() {
        return Err(Error::invalid("identify_unreliable: empty target"));
    }
    Ok(rouge_l_tokens(&tokenize(response), &target))
}

/// Gate statistic for incoherent identification: the smallest token probability.
pub fn incoherence_stat(response: &GenerationResult) -> f64 {
    response.min_token_prob().unwrap_or(1.0)
}

pub fn align_responses(
    task: Task,
    sample: &Sample,
    candidates: &[GenerationResult],
    config: &AlignmentConfig,
) -> Result<Vec<AlignedResponse>> {
    if task == Task::Nli {
        return Err(Error::UseNliMask);
    }
    if candidates.is_empty() {
        return Err(Error::invalid(format!("sample {}: no candidates to align", sample.id)));
    }
    candidates
        .iter()
        .map(|c| {
            let mut reasons = BTreeSet::new();
            match task {
                Task::Cqg => {
                    if !config.instruction_keywords.is_empty()
                        && identify_noncompliant(c, &config.instruction_keywords)
                    {
                        reasons.insert(RejectionReason::NonCompliant);
                    }
                    if identify_dull(&c.text, &config.dull_patterns) {
                        reasons.insert(RejectionReason::Dull);
                    }
                    if identify_incoherent(c, config.incoherence_threshold)? {
                        reasons.insert(RejectionReason::Incoherent);
                    }
                }
                _ => {
                    if identify_unreliable(&c.text, &sample.target, config.unreliable_threshold)? {
                        reasons.insert(RejectionReason::Unreliable);
                    }
                }
            }
            Ok(AlignedResponse {
                sample_id: sample.id.clone(),
                text: c.text.clone(),
                token_logprobs: c.token_logprobs.clone(),
                kept: reasons.is_empty(),
                rejection_reasons: reasons,
                weight: 1.0,
            })
        })
        .collect()
}

/// Aligns every sample's candidates; output follows sample order, then
/// candidate order. Samples without candidates contribute nothing.
pub fn align_corpus(
    task: Task,
    samples: &[Sample],
    candidates: &[CandidateRecord],
    config: &AlignmentConfig,
) -> Result<Vec<AlignedResponse>> {
    let mut grouped: HashMap<&str, Vec<GenerationResult>> = HashMap::new();
    for c in candidates {
        grouped.entry(c.sample_id.as_str()).or_default().push(c.generation());
    }
    let per_sample = crate::par::map(samples, |s| match grouped.get(s.id.as_str()) {
        Some(cands) => align_responses(task, s, cands, config),
        None => Ok(Vec::new()),
    });
    let mut out = Vec::new();
    for r in per_sample {
        out.extend(r?);
    }
    Ok(out)
}

/// Fraction of statistics at or above `threshold` (those that pass the gate).
pub fn keep_fraction(stats: &[f64], threshold: f64) -> f64 {
    if stats.is_empty() {
        return 0.0;
    }
    stats.iter().filter(|s| **s >= threshold).count() as f64 / stats.len() as f64
}

/// Picks the threshold whose keep fraction is nearest `target_keep_fraction`;
/// ties go to the smaller threshold.
pub fn calibrate_from_fractions(fractions: &[(f64, f64)], target_keep_fraction: f64) -> Result<f64> {
    let mut sorted = fractions.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut best: Option<(f64, f64)> = None;
    for (threshold, frac) in sorted {
        let dist = (frac - target_keep_fraction).abs();
        match best {
            Some((_, d)) if dist >= d - TIE_EPS => {}
            _ => best = Some((threshold, dist)),
        }
    }
    best.map(|(t, _)| t)
        .ok_or_else(|| Error::invalid("calibrate_threshold: no candidate thresholds"))
}

pub fn calibrate_threshold(stats: &[f64], candidate_thresholds: &[f64], target_keep_fraction: f64) -> Result<f64> {
    if stats.is_empty() {
        return Err(Error::invalid("calibrate_threshold: no gate statistics"));
    }
    let fractions: Vec<(f64, f64)> = candidate_thresholds
        .iter()
        .map(|&t| (t, keep_fraction(stats, t)))
        .collect();
    calibrate_from_fractions(&fractions, target_keep_fraction)
}

/// Calibrates the gate the task actually uses (unreliable for CQA/SUM/KGC,
/// incoherent for CQG) over a whole candidate pool and returns the updated config.
pub fn calibrate_config(
    task: Task,
    candidates: &[CandidateRecord],
    config: &AlignmentConfig,
) -> Result<AlignmentConfig> {
    let mut out = config.clone();
    match task {
        Task::Nli => return Err(Error::UseNliMask),
        Task::Cqg => {
            let stats: Vec<f64> = candidates.iter().map(|c| incoherence_stat(&c.generation())).collect();
            out.incoherence_threshold =
                calibrate_threshold(&stats, &config.candidate_thresholds, config.target_keep_fraction)?;
        }
        _ => {
            let stats = candidates
                .iter()
                .map(|c| unreliable_stat(&c.text, &c.target))
                .collect::<Result<Vec<f64>>>()?;
            out.unreliable_threshold =
                calibrate_threshold(&stats, &config.candidate_thresholds, config.target_keep_fraction)?;
        }
    }
    Ok(out)
}

/// Zeroes the gold class and selects the most probable remaining class.
pub fn nli_mask(dist: &ClassDistribution, target_class: &str) -> Result<ClassDistribution> {
    if dist.classes.len() < 2 {
        return Err(Error::invalid("nli_mask: need at least two classes"));
    }
    let target = dist
        .index_of(target_class)
        .ok_or_else(|| Error::invalid(format!("nli_mask: target {target_class:?} not in classes")))?;
    let mask: Vec<u8> = (0..dist.classes.len()).map(|j| u8::from(j != target)).collect();
    let masked: Vec<f64> = dist
        .probs
        .iter()
        .zip(&mask)
        .map(|(p, m)| if *m == 1 { *p } else { 0.0 })
        .collect();
    // With every remaining class at zero probability argmax could land on the target.
    let mut selected = argmax(&masked);
    if selected == target {
        selected = if target == 0 { 1 } else { 0 };
    }
    Ok(ClassDistribution {
        classes: dist.classes.clone(),
        probs: dist.probs.clone(),
        mask,
        masked,
        selected_index: selected,
    })
}

/// Masks the gold class of an NLI sample and returns the selected non-gold
/// class as an alignment target weighted by its backend probability.
pub fn align_nli(sample: &Sample, dist: &ClassDistribution) -> Result<(ClassDistribution, AlignedResponse)> {
    if sample.task != Task::Nli {
        return Err(Error::invalid("align_nli: sample is not NLI"));
    }
    let masked = nli_mask(dist, sample.target.trim())?;
    let resp = AlignedResponse {
        sample_id: sample.id.clone(),
        text: masked.selected_class().to_string(),
        token_logprobs: Vec::new(),
        kept: true,
        rejection_reasons: BTreeSet::new(),
        weight: masked.probs[masked.selected_index],
    };
    Ok((masked, resp))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gen(text: &str, lps: &[f64]) -> GenerationResult {
        GenerationResult {
            text: text.into(),
            tokens: text.split_whitespace().map(str::to_string).collect(),
            token_logprobs: lps.to_vec(),
            backend_id: "t".into(),
        }
    }

    fn dist(probs: &[f64]) -> ClassDistribution {
        ClassDistribution::from_raw((0..probs.len()).map(|i| format!("c{i}")).collect(), probs).unwrap()
    }

    #[test]
    fn noncompliant_keyword() {
        assert!(!identify_noncompliant(&gen("What is the capital?", &[0.0; 4]), &["what"]));
        assert!(identify_noncompliant(&gen("Who won the game?", &[0.0; 4]), &["what"]));
        assert!(identify_noncompliant(&gen("", &[]), &["what"]));
    }

    #[test]
    fn dull_patterns() {
        let p = ["what is the title of the passage"];
        assert!(identify_dull("What is the title of the passage?", &p));
        assert!(!identify_dull("What did Gaston do in 1992?", &p));
        assert!(!identify_dull::<&str>("What is the title of the passage?", &[]));
    }

    #[test]
    fn incoherent_boundary() {
        let g = gen("a b", &[0.5f64.ln(), 0.4f64.ln()]);
        assert!(!identify_incoherent(&g, 0.1).unwrap());
        let g = gen("a b", &[0.5f64.ln(), 0.05f64.ln()]);
        assert!(identify_incoherent(&g, 0.1).unwrap());
        let g = gen("a", &[0.1f64.ln()]);
        assert!(!identify_incoherent(&g, 0.1).unwrap());
        let g = gen("a b", &[0.0]);
        assert!(matches!(identify_incoherent(&g, 0.1), Err(Error::MissingLogprobs)));
    }

    #[test]
    fn unreliable_examples() {
        assert!(!identify_unreliable("the cat sat", "the cat sat", 0.99).unwrap());
        assert!(identify_unreliable("x y", "a b", 0.1).unwrap());
        assert!(!identify_unreliable("the cat sat", "the cat sat down", 0.15).unwrap());
        assert!(identify_unreliable("a", "", 0.1).is_err());
    }

    #[test]
    fn task_combination() {
        let cfg = AlignmentConfig {
            instruction_keywords: vec!["what".into()],
            ..AlignmentConfig::default()
        };
        let mut s = Sample::nli("s", "p", "h", "neutral");
        s.task = Task::Cqg;
        s.target = "what did gaston do".into();
        // unrelated to the target but compliant, not dull and coherent
        let c = gen("what about the series", &[-0.1; 4]);
        let out = align_responses(Task::Cqg, &s, &[c.clone()], &cfg).unwrap();
        assert!(out[0].kept);

        s.task = Task::Cqa;
        s.target = "alpha beta gamma delta eps zeta eta theta iota kappa".into();
        let c = gen("alpha x1 x2 x3 x4 x5 x6 x7 x8 x9 y1 y2 y3 y4 y5 y6 y7 y8 y9 z1", &[-0.1; 20]);
        assert!(unreliable_stat(&c.text, &s.target).unwrap() < 0.15);
        let out = align_responses(Task::Cqa, &s, &[c], &cfg).unwrap();
        assert!(!out[0].kept);
        assert_eq!(out[0].rejection_reasons, BTreeSet::from([RejectionReason::Unreliable]));

        let out = align_responses(Task::Cqa, &s, &[gen("zzz", &[0.0])], &cfg).unwrap();
        assert!(out.iter().all(|a| !a.kept));
        assert!(matches!(align_responses(Task::Nli, &s, &[gen("a", &[0.0])], &cfg), Err(Error::UseNliMask)));
        assert!(align_responses(Task::Cqa, &s, &[], &cfg).is_err());
    }

    #[test]
    fn calibration_examples() {
        assert_eq!(calibrate_from_fractions(&[(0.1, 0.55), (0.15, 0.22), (0.2, 0.08)], 0.2).unwrap(), 0.15);
        assert_eq!(calibrate_from_fractions(&[(0.1, 0.3), (0.15, 0.3), (0.2, 0.3)], 0.2).unwrap(), 0.1);
        assert_eq!(calibrate_from_fractions(&[(0.15, 0.15), (0.1, 0.25)], 0.2).unwrap(), 0.1);
        let stats = [0.05, 0.12, 0.12, 0.18, 0.5];
        // fractions: 0.1 -> 0.8, 0.15 -> 0.4, 0.2 -> 0.2
        assert_eq!(calibrate_threshold(&stats, &[0.1, 0.15, 0.2], 0.2).unwrap(), 0.2);
        assert!(calibrate_threshold(&[], &[0.1], 0.2).is_err());
    }

    #[test]
    fn mask_examples() {
        let m = nli_mask(&dist(&[0.7, 0.2, 0.1]), "c0").unwrap();
        assert_eq!(m.masked, vec![0.0, m.probs[1], m.probs[2]]);
        assert_eq!(m.selected_index, 1);
        assert_eq!(m.mask, vec![0, 1, 1]);

        let m = nli_mask(&dist(&[0.1, 0.8, 0.1]), "c1").unwrap();
        assert_eq!(m.selected_index, 0);

        let m = nli_mask(&dist(&[0.9, 0.1]), "c0").unwrap();
        assert_eq!(m.selected_index, 1);
        let m = nli_mask(&dist(&[1.0, 0.0]), "c0").unwrap();
        assert_eq!(m.selected_index, 1);

        assert!(nli_mask(&dist(&[0.5, 0.5]), "zz").is_err());
        assert!(nli_mask(&dist(&[1.0]), "c0").is_err());
    }

    #[test]
    fn default_config_valid() {
        AlignmentConfig::default().validate().unwrap();
    }
}
