use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Sample, Task};
use crate::error::{Error, Result};

const DEFAULT_DIVERSE_PROMPTS: &str = include_str!("../../config/diverse_prompts.json");

pub const DEFAULT_ICL_EXEMPLARS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    InstructionOnly,
    Diverse,
    Icl,
}

impl Strategy {
    /// ICL for NLI, diverse prompting for CQG, instruction-only elsewhere.
    pub fn default_for(task: Task) -> Strategy {
        match task {
            Task::Nli => Strategy::Icl,
            Task::Cqg => Strategy::Diverse,
            Task::Cqa | Task::Kgc | Task::Sum => Strategy::InstructionOnly,
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "instruction" | "instruction-only" | "instruction_only" => Ok(Strategy::InstructionOnly),
            "diverse" => Ok(Strategy::Diverse),
            "icl" => Ok(Strategy::Icl),
            other => Err(Error::invalid(format!("unknown prompting strategy {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub strategy: Strategy,
    pub instruction: String,
    #[serde(default)]
    pub diverse_prompts: Vec<String>,
    /// `(input, output)` demonstrations for ICL.
    #[serde(default)]
    pub exemplars: Vec<(String, String)>,
    /// Permit a strategy other than the task default.
    #[serde(default)]
    pub allow_override: bool,
}

impl PromptSpec {
    pub fn instruction_only(instruction: impl Into<String>) -> Self {
        PromptSpec {
            strategy: Strategy::InstructionOnly,
            instruction: instruction.into(),
            diverse_prompts: Vec::new(),
            exemplars: Vec::new(),
            allow_override: false,
        }
    }

    pub fn diverse(instruction: impl Into<String>, prompts: Vec<String>) -> Self {
        PromptSpec {
            strategy: Strategy::Diverse,
            diverse_prompts: prompts,
            ..Self::instruction_only(instruction)
        }
    }

    pub fn icl(instruction: impl Into<String>, exemplars: Vec<(String, String)>) -> Self {
        PromptSpec {
            strategy: Strategy::Icl,
            exemplars,
            ..Self::instruction_only(instruction)
        }
    }

    /// Task default: instruction text plus the shipped diverse prompt set for CQG.
    /// ICL exemplars must still be filled in by the caller.
    pub fn default_for(task: Task) -> Self {
        match Strategy::default_for(task) {
            Strategy::InstructionOnly => Self::instruction_only(default_instruction(task)),
            Strategy::Diverse => Self::diverse(default_instruction(task), default_diverse_prompts()),
            Strategy::Icl => Self::icl(default_instruction(task), Vec::new()),
        }
    }

    fn check(&self, task: Task) -> Result<()> {
        if self.strategy != Strategy::default_for(task) && !self.allow_override {
            return Err(Error::invalid(format!(
                "strategy {:?} is not the default for {task} ({:?}); set allow_override",
                self.strategy,
                Strategy::default_for(task)
            )));
        }
        match self.strategy {
            Strategy::InstructionOnly if self.instruction.trim().is_empty() => {
                Err(Error::invalid("instruction-only prompting needs an instruction"))
            }
            Strategy::Diverse if self.diverse_prompts.is_empty() => {
                Err(Error::invalid("diverse prompting needs at least one prompt"))
            }
            Strategy::Icl if self.exemplars.is_empty() => {
                Err(Error::invalid("ICL prompting needs at least one exemplar"))
            }
            _ => Ok(()),
        }
    }
}

pub fn default_instruction(task: Task) -> &'static str {
    match task {
        Task::Cqa => "Answer the question using the document.",
        Task::Cqg => "Ask the next question of the conversation about the document.",
        Task::Kgc => "Continue the conversation using knowledge from the document.",
        Task::Sum => "Summarize the document.",
        Task::Nli => "Decide whether the hypothesis is entailed by, neutral to, or contradicted by the premise.",
    }
}

pub fn default_diverse_prompts() -> Vec<String> {
    serde_json::from_str(DEFAULT_DIVERSE_PROMPTS).expect("shipped diverse prompt file is valid JSON")
}

/// First `k` samples by id order, as `(input, target)` demonstrations.
pub fn select_icl_exemplars(corpus: &Corpus, k: usize) -> Vec<(String, String)> {
    let mut samples: Vec<&Sample> = corpus.samples().iter().collect();
    samples.sort_by(|a, b| a.id.cmp(&b.id));
    samples
        .into_iter()
        .take(k)
        .map(|s| (s.input_text(), s.target.clone()))
        .collect()
}

/// Renders the prompts for one sample: one for instruction-only and ICL, one per
/// prompt for diverse prompting.
pub fn build_prompt(sample: &Sample, spec: &PromptSpec) -> Result<Vec<String>> {
    spec.check(sample.task)?;
    let input = sample.input_text();
    Ok(match spec.strategy {
        Strategy::InstructionOnly => vec![format!("{}\n\n{input}\n\nResponse:", spec.instruction)],
        Strategy::Diverse => spec
            .diverse_prompts
            .iter()
            .map(|p| {
                if spec.instruction.trim().is_empty() {
                    format!("{p}\n\n{input}\n\nResponse:")
                } else {
                    format!("{} {p}\n\n{input}\n\nResponse:", spec.instruction)
                }
            })
            .collect(),
        Strategy::Icl => {
            let mut out = String::new();
            if !spec.instruction.trim().is_empty() {
                out.push_str(&spec.instruction);
                out.push_str("\n\n");
            }
            for (x, y) in &spec.exemplars {
                out.push_str(&format!("Input: {x}\nOutput: {y}\n\n"));
            }
            out.push_str(&format!("Input: {input}\nOutput:"));
            vec![out]
        }
    })
}

/// Scoring prompt for NLI class probabilities.
pub fn nli_prompt(sample: &Sample) -> String {
    format!("{}\n\n{}\nAnswer:", default_instruction(Task::Nli), sample.input_text())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Document;

    fn cqa() -> Sample {
        Sample::grounded(
            "s",
            Task::Cqa,
            Document::from_texts(["the doc"]),
            vec![("who?".into(), None)],
            "x",
        )
    }

    #[test]
    fn instruction_first() {
        let s = cqa();
        let p = build_prompt(&s, &PromptSpec::instruction_only("Answer the question.")).unwrap();
        assert_eq!(p.len(), 1);
        let i = p[0].find("Answer the question.").unwrap();
        let j = p[0].find("who?").unwrap();
        assert!(i < j);
        assert!(p[0].contains("the doc"));
        assert_eq!(p, build_prompt(&s, &PromptSpec::instruction_only("Answer the question.")).unwrap());
    }

    #[test]
    fn diverse_order() {
        let mut s = cqa();
        s.task = Task::Cqg;
        let spec = PromptSpec::diverse("", vec!["A1".into(), "B2".into(), "C3".into()]);
        let p = build_prompt(&s, &spec).unwrap();
        assert_eq!(p.len(), 3);
        assert!(p[0].starts_with("A1") && p[1].starts_with("B2") && p[2].starts_with("C3"));
        assert_eq!(PromptSpec::default_for(Task::Cqg).diverse_prompts.len(), 5);
    }

    #[test]
    fn icl_exemplars_before_query() {
        let s = Sample::nli("q", "QUERYPREMISE", "h", "neutral");
        let spec = PromptSpec::icl(
            "Classify.",
            vec![("in one".into(), "OUTONE".into()), ("in two".into(), "OUTTWO".into())],
        );
        let p = build_prompt(&s, &spec).unwrap();
        assert_eq!(p.len(), 1);
        let q = p[0].find("QUERYPREMISE").unwrap();
        assert!(p[0].find("OUTONE").unwrap() < q);
        assert!(p[0].find("OUTTWO").unwrap() < q);
    }

    #[test]
    fn non_default_strategy_needs_override() {
        let s = cqa();
        let mut spec = PromptSpec::diverse("", vec!["a".into()]);
        assert!(build_prompt(&s, &spec).is_err());
        spec.allow_override = true;
        assert!(build_prompt(&s, &spec).is_ok());
        let empty_icl = PromptSpec::icl("x", vec![]);
        assert!(build_prompt(&Sample::nli("q", "p", "h", "neutral"), &empty_icl).is_err());
    }
}
