//! Response grounding and biased / non-biased corpus partitioning.
//!
//! Three bias types are supported:
//!
//! * relative position (CQA, CQG): index distance between the utterance that
//!   grounds the current target and the one that grounds the previous answer;
//! * lead (SUM, KGC): the target grounds to the first utterance;
//! * lexical (NLI): the hypothesis contains a trigger word.
//!
//! Grounding picks the utterance with the highest ROUGE-L against the
//! response, ties going to the smallest index.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Document, Sample, Task, Utterance};
use crate::error::{Error, Result};
use crate::metrics::rouge_l_tokens;
use crate::text::tokenize;

/// Negation cues commonly associated with the contradiction class in
/// SNLI-style data. Not claimed to match any published list.
pub const DEFAULT_LEXICAL_TRIGGERS: [&str; 7] =
    ["not", "no", "never", "nobody", "nothing", "none", "cannot"];

pub const DEFAULT_BIASED_POSITIONS: [i64; 2] = [0, 1];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingResult {
    pub utterance_index: usize,
    pub score: f64,
}

pub fn ground_response(response: &str, document: &Document) -> Result<GroundingResult> {
    ground_tokens(&tokenize(response), document)
}

pub(crate) fn ground_tokens(response: &[String], document: &Document) -> Result<GroundingResult> {
    if response.is_empty() {
        return Err(Error::invalid("ground_response: empty response"));
    }
    if document.is_empty() {
        return Err(Error::invalid("ground_response: empty document"));
    }
    let mut best = GroundingResult {
        utterance_index: 0,
        score: f64::NEG_INFINITY,
    };
    for (i, u) in document.utterances.iter().enumerate() {
        let toks = tokenize(&u.text);
        let score = if toks.is_empty() {
            0.0
        } else {
            rouge_l_tokens(response, &toks)
        };
        if score > best.score {
            best = GroundingResult {
                utterance_index: i,
                score,
            };
        }
    }
    Ok(best)
}

/// Index of the utterance grounding the target minus the index of the one
/// grounding the last answered turn.
pub fn relative_position(sample: &Sample) -> Result<i64> {
    let doc = sample
        .document
        .as_ref()
        .ok_or_else(|| Error::invalid(format!("sample {} has no document", sample.id)))?;
    let anchor = sample
        .anchor_turn()
        .and_then(|t| t.answer.as_deref())
        .ok_or_else(|| Error::NoAnchorTurn(sample.id.clone()))?;
    let anchor = ground_response(anchor, doc)?.utterance_index as i64;
    let target = ground_response(&sample.target, doc)?.utterance_index as i64;
    Ok(target - anchor)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BiasEvidence {
    RelativePosition {
        /// `None` when it could not be computed; see `reason`.
        relative_position: Option<i64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reason: Option<String>,
    },
    Lead {
        lead_score: f64,
        grounded_index: usize,
    },
    Lexical {
        matched_triggers: Vec<String>,
    },
}

impl BiasEvidence {
    pub fn relative_position(&self) -> Option<i64> {
        match self {
            BiasEvidence::RelativePosition {
                relative_position, ..
            } => *relative_position,
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiasPartition {
    pub biased: Corpus,
    pub non_biased: Corpus,
    pub evidence: BTreeMap<String, BiasEvidence>,
}

impl BiasPartition {
    fn assemble(corpus: &Corpus, verdicts: Vec<(bool, BiasEvidence)>) -> Result<Self> {
        let mut biased = Vec::new();
        let mut non_biased = Vec::new();
        let mut evidence = BTreeMap::new();
        for (sample, (is_biased, ev)) in corpus.samples().iter().zip(verdicts) {
            evidence.insert(sample.id.clone(), ev);
            if is_biased {
                biased.push(sample.clone());
            } else {
                non_biased.push(sample.clone());
            }
        }
        Ok(BiasPartition {
            biased: Corpus::new(corpus.task(), biased)?,
            non_biased: Corpus::new(corpus.task(), non_biased)?,
            evidence,
        })
    }

    pub fn relative_position_of(&self, id: &str) -> Option<i64> {
        self.evidence.get(id).and_then(BiasEvidence::relative_position)
    }
}

fn require_task(corpus: &Corpus, allowed: &[Task], what: &str) -> Result<()> {
    if allowed.contains(&corpus.task()) {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "{what} does not apply to task {}",
            corpus.task()
        )))
    }
}

pub fn split_by_relative_position(corpus: &Corpus, biased_set: &BTreeSet<i64>) -> Result<BiasPartition> {
    require_task(corpus, &[Task::Cqa, Task::Cqg], "relative-position split")?;
    let verdicts = crate::par::map(corpus.samples(), |s| match relative_position(s) {
        Ok(rp) => (
            biased_set.contains(&rp),
            BiasEvidence::RelativePosition {
                relative_position: Some(rp),
                reason: None,
            },
        ),
        Err(e) => (
            false,
            BiasEvidence::RelativePosition {
                relative_position: None,
                reason: Some(e.to_string()),
            },
        ),
    });
    BiasPartition::assemble(corpus, verdicts)
}

pub fn split_by_lead_bias(corpus: &Corpus) -> Result<BiasPartition> {
    split_by_lead_bias_with(corpus, 0.0)
}

/// A sample is lead-biased when its target grounds to utterance 0 with a
/// positive overlap of at least `min_lead_score`.
pub fn split_by_lead_bias_with(corpus: &Corpus, min_lead_score: f64) -> Result<BiasPartition> {
    require_task(corpus, &[Task::Sum, Task::Kgc], "lead split")?;
    let verdicts = crate::par::map(corpus.samples(), |s| {
        let doc = s.document.as_ref();
        let grounded = doc.and_then(|d| ground_response(&s.target, d).ok());
        let lead_score = doc
            .and_then(|d| d.utterances.first())
            .map(|u| {
                let lead = tokenize(&u.text);
                if lead.is_empty() {
                    0.0
                } else {
                    rouge_l_tokens(&tokenize(&s.target), &lead)
                }
            })
            .unwrap_or(0.0);
        let grounded_index = grounded.map_or(usize::MAX, |g| g.utterance_index);
        let biased = grounded_index == 0 && lead_score > 0.0 && lead_score >= min_lead_score;
        (
            biased,
            BiasEvidence::Lead {
                lead_score,
                grounded_index,
            },
        )
    });
    BiasPartition::assemble(corpus, verdicts)
}

pub fn split_by_lexical_bias<S: AsRef<str>>(corpus: &Corpus, triggers: &[S]) -> Result<BiasPartition> {
    require_task(corpus, &[Task::Nli], "lexical split")?;
    let triggers: Vec<String> = triggers
        .iter()
        .flat_map(|t| tokenize(t.as_ref()))
        .collect();
    if triggers.is_empty() {
        return Err(Error::invalid("lexical split: empty trigger list"));
    }
    let verdicts = crate::par::map(corpus.samples(), |s| {
        let hyp = tokenize(s.nli_hypothesis.as_deref().unwrap_or(""));
        let matched: Vec<String> = triggers
            .iter()
            .filter(|t| hyp.contains(t))
            .cloned()
            .collect();
        (
            !matched.is_empty(),
            BiasEvidence::Lexical {
                matched_triggers: matched,
            },
        )
    });
    BiasPartition::assemble(corpus, verdicts)
}

/// Shuffles the document utterances uniformly at random under `seed`.
pub fn perturb_positions(sample: &Sample, seed: u64) -> Result<Sample> {
    if sample.task == Task::Nli {
        return Err(Error::invalid("perturb_positions: NLI samples have no document"));
    }
    let doc = sample
        .document
        .as_ref()
        .ok_or_else(|| Error::invalid(format!("sample {} has no document", sample.id)))?;
    let mut out = sample.clone();
    if doc.len() < 2 {
        return Ok(out);
    }
    let mut texts: Vec<String> = doc.utterances.iter().map(|u| u.text.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    texts.shuffle(&mut rng);
    out.document = Some(Document {
        utterances: texts
            .into_iter()
            .enumerate()
            .map(|(index, text)| Utterance { index, text })
            .collect(),
    });
    Ok(out)
}
