//! Task / alignment loss terms and their α-weighted combination.
//!
//! NLL is a token *sum*. The alignment loss over several kept responses is the
//! unweighted mean of their NLLs, so α keeps its meaning as the kept count varies.

use serde::{Deserialize, Serialize};

use crate::corpus::Task;
use crate::error::{Error, Result};
use crate::lowbias_infer::ClassDistribution;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
}

impl LossConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
        }
        Ok(LossConfig { alpha })
    }

    /// 0.2 for NLI, KGC and CQA on CoQAR; 0.1 otherwise.
    pub fn default_for(task: Task, dataset: Option<&str>) -> Self {
        let coqar = dataset.is_some_and(|d| d.eq_ignore_ascii_case("coqar"));
        let alpha = match task {
            Task::Nli | Task::Kgc => 0.2,
            Task::Cqa if coqar => 0.2,
            _ => 0.1,
        };
        LossConfig { alpha }
    }

    /// Weights on the target and alignment terms; all weight goes to the target
    /// term when no aligned response survived.
    pub fn weights(&self, has_align: bool) -> (f64, f64) {
        if has_align {
            (1.0 - self.alpha, self.alpha)
        } else {
            (1.0, 0.0)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_target: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_align: Option<f64>,
    pub combined: f64,
}

/// `−Σ logprob` over the reference tokens.
pub fn nll(token_logprobs: &[f64]) -> Result<f64> {
    if token_logprobs.is_empty() {
        return Err(Error::invalid("nll: empty token sequence"));
    }
    if let Some(bad) = token_logprobs.iter().find(|l| !l.is_finite()) {
        return Err(Error::invalid(format!("nll: non-finite logprob {bad}")));
    }
    Ok(-token_logprobs.iter().sum::<f64>())
}

pub fn combined_loss(l_target: f64, l_align: Option<f64>, config: &LossConfig) -> LossBreakdown {
    let (wt, wa) = config.weights(l_align.is_some());
    let combined = match l_align {
        Some(a) if wa == 1.0 => a,
        Some(_) if wa == 0.0 => l_target,
        Some(a) => wt * l_target + wa * a,
        None => l_target,
    };
    LossBreakdown {
        l_target,
        l_align,
        combined,
    }
}

/// `−s[ind] · log p(class_ind | x)` where `s` comes from the backend and `p`
/// from the model being trained.
pub fn nli_align_loss(dist: &ClassDistribution, model_class_logprob: f64) -> Result<f64> {
    let s = dist
        .probs
        .get(dist.selected_index)
        .ok_or_else(|| Error::invalid("nli_align_loss: selected index out of range"))?;
    if *s == 0.0 {
        return Ok(0.0);
    }
    Ok(-s * model_class_logprob)
}

/// Mean NLL over the kept responses, each given as its per-token model logprobs.
pub fn multi_response_align_loss<L: AsRef<[f64]>>(kept: &[L]) -> Result<f64> {
    if kept.is_empty() {
        return Err(Error::invalid("multi_response_align_loss: no kept responses"));
    }
    let total = kept
        .iter()
        .map(|r| nll(r.as_ref()))
        .sum::<Result<f64>>()?;
    Ok(total / kept.len() as f64)
}

/// Gradient of the combined loss with respect to each model token logprob:
/// `−w_target` for target tokens and `−α / K` for tokens of each of the `K` kept
/// responses.
pub fn combined_logprob_grads(target_len: usize, kept_lens: &[usize], config: &LossConfig) -> (Vec<f64>, Vec<Vec<f64>>) {
    let (wt, wa) = config.weights(!kept_lens.is_empty());
    let per_response = if kept_lens.is_empty() {
        0.0
    } else {
        wa / kept_lens.len() as f64
    };
    (
        vec![-wt; target_len],
        kept_lens.iter().map(|&n| vec![-per_response; n]).collect(),
    )
}
