//! A small linear-softmax next-token model and a synthetic position-biased
//! conversational QA task.
//!
//! Synthetic documents are lists of `"<topic> is <fact>"` utterances. Every
//! topic maps to one fact through a fixed many-to-one table, so a question
//! `"what is <topic>"` can be answered from the topic alone. The previous
//! turn asked about another utterance; the offset between the two is the
//! relative position, and training data plants the answer at offset 0 or 1.
//!
//! The model sees four feature groups, all sparse and binary:
//! question tokens, document tokens keyed by their utterance offset from the
//! utterance grounding the previous answer, the previous output token, and a
//! bias. Logits are a single linear map of the active features.

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bias_split::{
    ground_response, perturb_positions, split_by_relative_position, BiasPartition,
    DEFAULT_BIASED_POSITIONS,
};
use crate::corpus::{Corpus, Document, Sample, Task};
use crate::error::{Error, Result};
use crate::lowbias_infer::{
    build_prompt, infer_corpus, CompletionResponse, GenerateOptions, PromptSpec, ReplayTable,
    StubBackend,
};
use crate::metrics::{bleu_2, per_position_table, Metric, PositionTable};
use crate::msa_align::{align_corpus, AlignedResponse, AlignmentConfig};
use crate::objective::{combined_loss, multi_response_align_loss, nll, LossBreakdown, LossConfig};
use crate::text::tokenize;

pub const EOS: &str = "</s>";
pub const MODEL_FORMAT: &str = "posdebias-toy/1";
const MAX_DECODE_TOKENS: usize = 8;

// ---------------------------------------------------------------------------
// Synthetic task

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_utterances: usize,
    pub n_train: usize,
    #[serde(default = "default_n_dev")]
    pub n_dev: usize,
    pub n_eval: usize,
    pub biased_fraction: f64,
    /// Number of distinct topic tokens.
    pub vocab_size: usize,
    #[serde(default = "default_n_facts")]
    pub n_facts: usize,
    pub seed: u64,
}

fn default_n_dev() -> usize {
    250
}

fn default_n_facts() -> usize {
    12
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_utterances: 8,
            n_train: 500,
            n_dev: default_n_dev(),
            n_eval: 500,
            biased_fraction: 0.95,
            vocab_size: 24,
            n_facts: default_n_facts(),
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_utterances < 3 {
            return Err(Error::invalid(
                "n_utterances must be at least 3 to realize non-biased positions",
            ));
        }
        if self.n_train == 0 || self.n_eval == 0 {
            return Err(Error::invalid("n_train and n_eval must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.biased_fraction) {
            return Err(Error::invalid("biased_fraction must lie in [0, 1]"));
        }
        if self.n_facts < self.n_utterances {
            return Err(Error::invalid("n_facts must be at least n_utterances"));
        }
        if self.vocab_size < self.n_facts {
            return Err(Error::invalid("vocab_size must be at least n_facts"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SynthCorpora {
    pub train: Corpus,
    pub dev: Corpus,
    pub eval_biased: Corpus,
    pub eval_nonbiased: Corpus,
}

fn topic(i: usize) -> String {
    format!("t{i}")
}

fn fact(j: usize) -> String {
    format!("f{j}")
}

struct World {
    /// Topics grouped by the fact they map to.
    topics_of: Vec<Vec<usize>>,
    n_utterances: usize,
}

impl World {
    fn new(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Self {
        let mut topics: Vec<usize> = (0..spec.vocab_size).collect();
        topics.shuffle(rng);
        let mut topics_of = vec![Vec::new(); spec.n_facts];
        for (k, t) in topics.into_iter().enumerate() {
            topics_of[k % spec.n_facts].push(t);
        }
        World {
            topics_of,
            n_utterances: spec.n_utterances,
        }
    }

    fn sample(&self, id: String, biased: bool, rng: &mut ChaCha8Rng) -> Sample {
        let n = self.n_utterances;
        let mut facts: Vec<usize> = (0..self.topics_of.len()).collect();
        facts.shuffle(rng);
        facts.truncate(n);
        let topics: Vec<usize> = facts
            .iter()
            .map(|&f| *self.topics_of[f].choose(rng).expect("every fact has a topic"))
            .collect();
        let (prev, cur) = if biased {
            loop {
                let p = rng.gen_range(0..n);
                let q = p + rng.gen_range(0..2);
                if q < n {
                    break (p, q);
                }
            }
        } else {
            loop {
                let p = rng.gen_range(0..n);
                let q = rng.gen_range(0..n);
                let d = q as i64 - p as i64;
                if d != 0 && d != 1 {
                    break (p, q);
                }
            }
        };
        let doc = Document::from_texts(
            (0..n).map(|i| format!("{} is {}", topic(topics[i]), fact(facts[i]))),
        );
        let history = vec![
            (
                format!("what is {}", topic(topics[prev])),
                Some(format!("is {}", fact(facts[prev]))),
            ),
            (format!("what is {}", topic(topics[cur])), None),
        ];
        Sample::grounded(id, Task::Cqa, doc, history, format!("is {}", fact(facts[cur])))
    }
}

fn draw_split(world: &World, prefix: &str, n: usize, biased_fraction: f64, rng: &mut ChaCha8Rng) -> Result<Corpus> {
    let n_biased = (biased_fraction * n as f64).round() as usize;
    let mut flags: Vec<bool> = (0..n).map(|i| i < n_biased).collect();
    flags.shuffle(rng);
    let samples = flags
        .into_iter()
        .enumerate()
        .map(|(i, b)| world.sample(format!("{prefix}-{i:05}"), b, rng))
        .collect();
    Corpus::new(Task::Cqa, samples)
}

/// Draws train / dev / biased eval / non-biased eval corpora. Exactly
/// `round(biased_fraction · n)` training and dev samples are biased.
pub fn synth_corpus(spec: &SynthSpec) -> Result<SynthCorpora> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let world = World::new(spec, &mut rng);
    Ok(SynthCorpora {
        train: draw_split(&world, "train", spec.n_train, spec.biased_fraction, &mut rng)?,
        dev: draw_split(&world, "dev", spec.n_dev, spec.biased_fraction, &mut rng)?,
        eval_biased: draw_split(&world, "eval-b", spec.n_eval, 1.0, &mut rng)?,
        eval_nonbiased: draw_split(&world, "eval-n", spec.n_eval, 0.0, &mut rng)?,
    })
}

/// Replay table of unsupervised responses for a synthetic corpus. Each draw
/// names the fact of a uniformly chosen utterance, so the responses carry no
/// positional preference; a `noise_rate` share are off-task and fail the
/// unreliable gate.
pub fn synth_unsupervised_table(
    corpus: &Corpus,
    spec: &PromptSpec,
    n_per_prompt: usize,
    noise_rate: f64,
    seed: u64,
) -> Result<ReplayTable> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut table = ReplayTable::default();
    for sample in corpus.samples() {
        let doc = sample
            .document
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("sample {} has no document", sample.id)))?;
        for prompt in build_prompt(sample, spec)? {
            let responses = (0..n_per_prompt)
                .map(|_| {
                    let text = if rng.gen_bool(noise_rate) {
                        "the passage does not say".to_string()
                    } else {
                        let u = &doc.utterances[rng.gen_range(0..doc.len())].text;
                        let toks = tokenize(u);
                        format!("is {}", toks.last().map(String::as_str).unwrap_or(""))
                    };
                    let tokens: Vec<String> = text.split_whitespace().map(str::to_string).collect();
                    let lp = (1.0 / doc.len() as f64).ln();
                    CompletionResponse {
                        token_logprobs: Some(vec![lp; tokens.len()]),
                        tokens,
                        text,
                    }
                })
                .collect();
            table.insert_responses(&prompt, responses);
        }
    }
    Ok(table)
}

/// Collects unsupervised responses for `corpus` from the stub table backend
/// and runs them through alignment.
pub fn synth_aligned_responses(
    corpus: &Corpus,
    align: &AlignmentConfig,
    n_per_prompt: usize,
    noise_rate: f64,
    seed: u64,
) -> Result<Vec<AlignedResponse>> {
    let spec = PromptSpec::default_for(corpus.task());
    let table = synth_unsupervised_table(corpus, &spec, n_per_prompt, noise_rate, seed)?;
    let backend = StubBackend::table(table);
    let candidates = infer_corpus(
        corpus.samples(),
        &spec,
        &backend,
        n_per_prompt,
        seed,
        GenerateOptions::default(),
    )?;
    align_corpus(corpus.task(), corpus.samples(), &candidates, align)
}

// ---------------------------------------------------------------------------
// Model

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format: String,
    vocabulary: Vec<String>,
    max_offset: usize,
    n_features: usize,
    seed: u64,
    /// Row-major `n_features × vocabulary.len()`.
    weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelFile", into = "ModelFile")]
pub struct ToyModel {
    vocabulary: Vec<String>,
    index: HashMap<String, usize>,
    max_offset: usize,
    seed: u64,
    weights: Vec<f64>,
}

impl TryFrom<ModelFile> for ToyModel {
    type Error = Error;

    fn try_from(f: ModelFile) -> Result<Self> {
        if f.format != MODEL_FORMAT {
            return Err(Error::invalid(format!("unsupported model format {:?}", f.format)));
        }
        let mut m = ToyModel::new(f.vocabulary, f.max_offset, f.seed)?;
        if f.n_features != m.n_features() || f.weights.len() != m.weights.len() {
            return Err(Error::invalid("model weights do not match vocabulary and max_offset"));
        }
        if f.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::invalid("model weights must be finite"));
        }
        m.weights = f.weights;
        Ok(m)
    }
}

impl From<ToyModel> for ModelFile {
    fn from(m: ToyModel) -> Self {
        ModelFile {
            format: MODEL_FORMAT.into(),
            n_features: m.n_features(),
            vocabulary: m.vocabulary,
            max_offset: m.max_offset,
            seed: m.seed,
            weights: m.weights,
        }
    }
}

/// Active features for one sample, excluding the previous-token feature.
#[derive(Clone, Debug)]
struct Context {
    base: Vec<usize>,
}

/// Sorted, de-duplicated token list drawn from questions, documents, targets
/// and any extra texts. [`EOS`] is appended last.
pub fn build_vocabulary<'a>(corpora: &[&Corpus], extra: impl IntoIterator<Item = &'a str>) -> Vec<String> {
    let mut set = BTreeSet::new();
    for c in corpora {
        for s in c.samples() {
            let mut texts: Vec<&str> = vec![s.target.as_str()];
            texts.extend(s.nli_premise.as_deref());
            texts.extend(s.nli_hypothesis.as_deref());
            if let Some(d) = &s.document {
                texts.extend(d.texts());
            }
            for t in &s.history {
                texts.push(&t.question);
                if let Some(a) = &t.answer {
                    texts.push(a);
                }
            }
            for t in texts {
                set.extend(tokenize(t));
            }
        }
    }
    for t in extra {
        set.extend(tokenize(t));
    }
    let mut v: Vec<String> = set.into_iter().collect();
    v.push(EOS.to_string());
    v
}

fn log_softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    for x in z.iter_mut() {
        *x -= lse;
    }
}

impl ToyModel {
    /// Zero-initialized model: every next-token distribution is uniform.
    pub fn new(vocabulary: Vec<String>, max_offset: usize, seed: u64) -> Result<Self> {
        if vocabulary.is_empty() {
            return Err(Error::invalid("empty vocabulary"));
        }
        let mut index = HashMap::new();
        for (i, t) in vocabulary.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary token {t:?}")));
            }
        }
        if !index.contains_key(EOS) {
            return Err(Error::invalid("vocabulary lacks the end-of-sequence token"));
        }
        let mut m = ToyModel {
            vocabulary,
            index,
            max_offset,
            seed,
            weights: Vec::new(),
        };
        m.weights = vec![0.0; m.n_features() * m.vocab_size()];
        Ok(m)
    }

    /// Model over the vocabulary of `corpora`, sized for their longest document.
    pub fn for_corpora(corpora: &[&Corpus], extra: &[&str], seed: u64) -> Result<Self> {
        let longest = corpora
            .iter()
            .flat_map(|c| c.samples())
            .filter_map(|s| s.document.as_ref().map(Document::len))
            .max()
            .unwrap_or(1);
        Self::new(build_vocabulary(corpora, extra.iter().copied()), longest.saturating_sub(1), seed)
    }

    /// Adds independent `N(0, scale²)`-ish noise (uniform in ±scale·√3) to every weight.
    pub fn perturbed(mut self, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let half = scale * 3f64.sqrt();
        for w in &mut self.weights {
            *w += rng.gen_range(-half..=half);
        }
        self
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.vocabulary
    }

    pub fn vocab_size(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn max_offset(&self) -> usize {
        self.max_offset
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn n_features(&self) -> usize {
        let v = self.vocab_size();
        v + (2 * self.max_offset + 1) * v + (v + 1) + 1
    }

    fn offset_feature(&self, k: i64, tok: usize) -> usize {
        let v = self.vocab_size();
        v + (k + self.max_offset as i64) as usize * v + tok
    }

    /// `prev = None` is the start-of-sequence slot.
    fn prev_feature(&self, prev: Option<usize>) -> usize {
        let v = self.vocab_size();
        v + (2 * self.max_offset + 1) * v + prev.unwrap_or(v)
    }

    fn bias_feature(&self) -> usize {
        self.n_features() - 1
    }

    fn token_id(&self, tok: &str) -> Result<usize> {
        self.index
            .get(tok)
            .copied()
            .ok_or_else(|| Error::OutOfVocabulary(tok.to_string()))
    }

    fn context(&self, sample: &Sample) -> Context {
        let mut base = Vec::new();
        let question = match sample.current_question() {
            Some(q) => q.to_string(),
            None => [sample.nli_premise.as_deref(), sample.nli_hypothesis.as_deref()]
                .into_iter()
                .flatten()
                .collect::<Vec<_>>()
                .join(" "),
        };
        base.extend(tokenize(&question).iter().filter_map(|t| self.index.get(t)));
        if let Some(doc) = &sample.document {
            let anchor = sample
                .anchor_turn()
                .and_then(|t| t.answer.as_deref())
                .and_then(|a| ground_response(a, doc).ok())
                .map(|g| g.utterance_index as i64)
                .unwrap_or(0);
            for (i, u) in doc.utterances.iter().enumerate() {
                let k = i as i64 - anchor;
                if k.unsigned_abs() as usize > self.max_offset {
                    continue;
                }
                for t in tokenize(&u.text) {
                    if let Some(&id) = self.index.get(&t) {
                        base.push(self.offset_feature(k, id));
                    }
                }
            }
        }
        base.push(self.bias_feature());
        Context { base }
    }

    fn logits(&self, ctx: &Context, prev: Option<usize>, out: &mut [f64]) {
        let v = self.vocab_size();
        out.iter_mut().for_each(|x| *x = 0.0);
        for f in ctx.base.iter().copied().chain(std::iter::once(self.prev_feature(prev))) {
            let row = &self.weights[f * v..(f + 1) * v];
            for (o, w) in out.iter_mut().zip(row) {
                *o += w;
            }
        }
    }

    fn encode(&self, response: &str) -> Result<Vec<usize>> {
        tokenize(response).iter().map(|t| self.token_id(t)).collect()
    }

    fn seq_logprobs(&self, ctx: &Context, ids: &[usize]) -> Vec<f64> {
        let mut z = vec![0.0; self.vocab_size()];
        let mut prev = None;
        ids.iter()
            .map(|&y| {
                self.logits(ctx, prev, &mut z);
                log_softmax_in_place(&mut z);
                prev = Some(y);
                z[y]
            })
            .collect()
    }

    /// Per-token log-probabilities of `response` given `sample`; one value per
    /// response token.
    pub fn score_tokens(&self, sample: &Sample, response: &str) -> Result<Vec<f64>> {
        let ids = self.encode(response)?;
        Ok(self.seq_logprobs(&self.context(sample), &ids))
    }

    /// Full next-token distribution after the given prefix.
    pub fn next_token_logprobs(&self, sample: &Sample, prefix: &str) -> Result<Vec<f64>> {
        let ids = self.encode(prefix)?;
        let mut z = vec![0.0; self.vocab_size()];
        self.logits(&self.context(sample), ids.last().copied(), &mut z);
        log_softmax_in_place(&mut z);
        Ok(z)
    }

    /// Greedy decoding until the end token or a short length cap.
    pub fn decode(&self, sample: &Sample) -> String {
        let ctx = self.context(sample);
        let eos = self.index[EOS];
        let mut z = vec![0.0; self.vocab_size()];
        let mut out: Vec<&str> = Vec::new();
        let mut prev = None;
        for _ in 0..MAX_DECODE_TOKENS {
            self.logits(&ctx, prev, &mut z);
            let y = crate::lowbias_infer::argmax(&z);
            if y == eos {
                break;
            }
            out.push(&self.vocabulary[y]);
            prev = Some(y);
        }
        out.join(" ")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

// ---------------------------------------------------------------------------
// Loss and gradients

/// Dense gradient buffer that remembers which rows were written.
struct GradBuf {
    data: Vec<f64>,
    touched: Vec<usize>,
    mark: Vec<bool>,
    v: usize,
}

impl GradBuf {
    fn new(model: &ToyModel) -> Self {
        GradBuf {
            data: vec![0.0; model.weights.len()],
            touched: Vec::new(),
            mark: vec![false; model.n_features()],
            v: model.vocab_size(),
        }
    }

    fn row(&mut self, f: usize) -> &mut [f64] {
        if !self.mark[f] {
            self.mark[f] = true;
            self.touched.push(f);
        }
        &mut self.data[f * self.v..(f + 1) * self.v]
    }

    fn norm(&self) -> f64 {
        self.touched
            .iter()
            .flat_map(|&f| &self.data[f * self.v..(f + 1) * self.v])
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    fn clear(&mut self) {
        for &f in &self.touched {
            self.data[f * self.v..(f + 1) * self.v].fill(0.0);
            self.mark[f] = false;
        }
        self.touched.clear();
    }
}

/// Token ids of a training sequence with the end token appended.
fn training_ids(model: &ToyModel, text: &str) -> Result<Vec<usize>> {
    let mut ids = model.encode(text)?;
    ids.push(model.index[EOS]);
    Ok(ids)
}

struct Example {
    ctx: Context,
    target: Vec<usize>,
    /// Aligned responses with their loss weights.
    aligned: Vec<(Vec<usize>, f64)>,
}

impl Example {
    fn new(model: &ToyModel, sample: &Sample, aligned: &[(&str, f64)]) -> Result<Self> {
        Ok(Example {
            ctx: model.context(sample),
            target: training_ids(model, &sample.target)?,
            aligned: aligned
                .iter()
                .map(|(t, w)| Ok((training_ids(model, t)?, *w)))
                .collect::<Result<_>>()?,
        })
    }
}

fn unit_weights<'a>(texts: &[&'a str]) -> Vec<(&'a str, f64)> {
    texts.iter().map(|t| (*t, 1.0)).collect()
}

/// Adds `weight · ∂(−Σ log p)/∂W` for one sequence to `grad`.
fn accumulate_seq_grad(model: &ToyModel, ctx: &Context, ids: &[usize], weight: f64, grad: &mut GradBuf) {
    let v = model.vocab_size();
    let mut z = vec![0.0; v];
    let mut prev = None;
    for &y in ids {
        model.logits(ctx, prev, &mut z);
        log_softmax_in_place(&mut z);
        for x in z.iter_mut() {
            *x = x.exp() * weight;
        }
        z[y] -= weight;
        for f in ctx.base.iter().copied().chain(std::iter::once(model.prev_feature(prev))) {
            for (g, d) in grad.row(f).iter_mut().zip(&z) {
                *g += d;
            }
        }
        prev = Some(y);
    }
}

/// Non-finite model log-probabilities yield a NaN combined loss rather than an error.
fn example_loss(model: &ToyModel, ex: &Example, config: &LossConfig) -> Result<LossBreakdown> {
    let target = model.seq_logprobs(&ex.ctx, &ex.target);
    let aligned: Vec<Vec<f64>> = ex
        .aligned
        .iter()
        .map(|(a, w)| model.seq_logprobs(&ex.ctx, a).into_iter().map(|l| w * l).collect())
        .collect();
    if target.iter().chain(aligned.iter().flatten()).any(|l| !l.is_finite()) {
        return Ok(LossBreakdown {
            l_target: f64::NAN,
            l_align: None,
            combined: f64::NAN,
        });
    }
    let lt = nll(&target)?;
    let la = if aligned.is_empty() {
        None
    } else {
        Some(multi_response_align_loss(&aligned)?)
    };
    Ok(combined_loss(lt, la, config))
}

fn accumulate_example_grad(model: &ToyModel, ex: &Example, config: &LossConfig, scale: f64, grad: &mut GradBuf) {
    let (wt, wa) = config.weights(!ex.aligned.is_empty());
    accumulate_seq_grad(model, &ex.ctx, &ex.target, wt * scale, grad);
    if wa > 0.0 {
        let per = wa * scale / ex.aligned.len() as f64;
        for (a, w) in &ex.aligned {
            accumulate_seq_grad(model, &ex.ctx, a, per * w, grad);
        }
    }
}

/// Combined loss of one sample and its aligned responses under `model`.
pub fn sample_loss(model: &ToyModel, sample: &Sample, aligned: &[&str], config: &LossConfig) -> Result<LossBreakdown> {
    example_loss(model, &Example::new(model, sample, &unit_weights(aligned))?, config)
}

/// Analytic gradient of [`sample_loss`]'s combined value, as a dense vector.
pub fn sample_gradient(model: &ToyModel, sample: &Sample, aligned: &[&str], config: &LossConfig) -> Result<Vec<f64>> {
    let ex = Example::new(model, sample, &unit_weights(aligned))?;
    let mut g = GradBuf::new(model);
    accumulate_example_grad(model, &ex, config, 1.0, &mut g);
    Ok(g.data)
}

/// Denominator floor for the relative error; below it central differences at
/// small epsilon are dominated by round-off in the loss.
const GRAD_CHECK_FLOOR: f64 = 1e-5;

/// Largest relative error `|a − n| / max(|a|, |n|, 1e-5)` between analytic and
/// central-difference gradients over `probes` parameters. Probes are drawn from
/// the rows the sample activates.
pub fn finite_diff_check(
    model: &ToyModel,
    sample: &Sample,
    aligned: &[&str],
    config: &LossConfig,
    epsilon: f64,
    probes: usize,
    seed: u64,
) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::invalid("finite_diff_check: epsilon must be positive"));
    }
    let ex = Example::new(model, sample, &unit_weights(aligned))?;
    let mut g = GradBuf::new(model);
    accumulate_example_grad(model, &ex, config, 1.0, &mut g);
    let mut rows = g.touched.clone();
    rows.sort_unstable();
    let v = model.vocab_size();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let idx = rows[rng.gen_range(0..rows.len())] * v + rng.gen_range(0..v);
        let w0 = probe.weights[idx];
        probe.weights[idx] = w0 + epsilon;
        let up = example_loss(&probe, &ex, config)?.combined;
        probe.weights[idx] = w0 - epsilon;
        let down = example_loss(&probe, &ex, config)?.combined;
        probe.weights[idx] = w0;
        let numeric = (up - down) / (2.0 * epsilon);
        let analytic = g.data[idx];
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        worst = worst.max(err);
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// Training

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub seed: u64,
    /// Shuffle utterance order of every training sample each epoch.
    #[serde(default)]
    pub permute_positions: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossConfig { alpha: 0.0 },
            epochs: 100,
            learning_rate: 0.1,
            batch_size: 16,
            clip_norm: 1.0,
            seed: 0,
            permute_positions: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub epoch: usize,
    pub l_target: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_align: Option<f64>,
    pub combined: f64,
    pub l_target_per_token: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ToyModel,
    pub trace: Vec<TraceRecord>,
    /// Dev BLEU@2 after each epoch, when a dev corpus was given.
    pub dev_scores: Vec<f64>,
    pub best_epoch: Option<usize>,
}

/// Kept response texts and weights per sample id.
pub fn kept_by_sample(aligned: &[AlignedResponse]) -> HashMap<&str, Vec<(&str, f64)>> {
    let mut out: HashMap<&str, Vec<(&str, f64)>> = HashMap::new();
    for a in aligned.iter().filter(|a| a.kept) {
        out.entry(a.sample_id.as_str())
            .or_default()
            .push((a.text.as_str(), a.weight));
    }
    out
}

/// Mean BLEU@2 of greedy decodes against targets.
pub fn dev_bleu(model: &ToyModel, dev: &Corpus) -> Result<f64> {
    if dev.is_empty() {
        return Err(Error::invalid("dev corpus is empty"));
    }
    let total = dev
        .samples()
        .iter()
        .map(|s| bleu_2(&model.decode(s), &s.target))
        .sum::<Result<f64>>()?;
    Ok(total / dev.len() as f64)
}

/// Mini-batch gradient descent on the combined loss with gradient-norm
/// clipping. With a dev corpus the parameters of the best dev epoch are returned.
pub fn train(
    model: ToyModel,
    corpus: &Corpus,
    aligned: &[AlignedResponse],
    dev: Option<&Corpus>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if !(cfg.learning_rate >= 0.0) || !cfg.learning_rate.is_finite() {
        return Err(Error::invalid("learning_rate must be finite and non-negative"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus("<train>".into()));
    }
    let loss = LossConfig::new(cfg.loss.alpha)?;
    let kept = kept_by_sample(aligned);
    let mut model = model;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut grad = GradBuf::new(&model);
    let mut trace = Vec::new();
    let mut dev_scores = Vec::new();
    let mut best: Option<(f64, usize, Vec<f64>)> = None;
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut step = 0;

    let mut examples: Vec<Example> = corpus
        .samples()
        .iter()
        .map(|s| {
            let a = kept.get(s.id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
            Example::new(&model, s, a)
        })
        .collect::<Result<_>>()?;

    for epoch in 0..cfg.epochs {
        if cfg.permute_positions {
            for (i, s) in corpus.samples().iter().enumerate() {
                let p = perturb_positions(s, rng.gen())?;
                examples[i].ctx = model.context(&p);
            }
        }
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let (mut lt, mut la, mut n_la, mut comb, mut toks) = (0.0, 0.0, 0usize, 0.0, 0usize);
            for &i in batch {
                let ex = &examples[i];
                let b = example_loss(&model, ex, &loss)?;
                if !b.combined.is_finite() {
                    return Err(Error::Diverged { step, loss: b.combined });
                }
                lt += b.l_target;
                if let Some(a) = b.l_align {
                    la += a;
                    n_la += 1;
                }
                comb += b.combined;
                toks += ex.target.len();
                accumulate_example_grad(&model, ex, &loss, scale, &mut grad);
            }
            let norm = grad.norm();
            if !norm.is_finite() {
                return Err(Error::Diverged { step, loss: f64::NAN });
            }
            let clip = if norm > cfg.clip_norm { cfg.clip_norm / norm } else { 1.0 };
            let lr = cfg.learning_rate * clip;
            if lr != 0.0 {
                let v = model.vocab_size();
                for &f in &grad.touched {
                    let rows = f * v..(f + 1) * v;
                    for (w, g) in model.weights[rows.clone()].iter_mut().zip(&grad.data[rows]) {
                        *w -= lr * g;
                    }
                }
            }
            grad.clear();
            trace.push(TraceRecord {
                step,
                epoch,
                l_target: lt * scale,
                l_align: (n_la > 0).then(|| la / n_la as f64),
                combined: comb * scale,
                l_target_per_token: lt / toks as f64,
                grad_norm: norm,
            });
            step += 1;
        }
        if let Some(dev) = dev {
            let score = dev_bleu(&model, dev)?;
            dev_scores.push(score);
            if best.as_ref().map_or(true, |(b, _, _)| score > *b) {
                best = Some((score, epoch, model.weights.clone()));
            }
        }
    }
    let best_epoch = best.as_ref().map(|(_, e, _)| *e);
    if let Some((_, _, w)) = best {
        model.weights = w;
    }
    Ok(TrainOutcome {
        model,
        trace,
        dev_scores,
        best_epoch,
    })
}

// ---------------------------------------------------------------------------
// Evaluation

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub prediction: String,
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relpos: Option<i64>,
    /// Split membership; `None` when the predictions were not partitioned.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub biased: Option<bool>,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: Metric,
    pub overall: Option<f64>,
    /// Absent when the split is empty.
    pub biased: Option<f64>,
    pub non_biased: Option<f64>,
    pub biased_count: usize,
    pub non_biased_count: usize,
    pub by_relpos: PositionTable,
    pub predictions: Vec<Prediction>,
}

impl EvalReport {
    pub fn is_partitioned(&self) -> bool {
        self.predictions.iter().any(|p| p.biased.is_some())
    }
}

fn aggregate(metric: Metric, preds: &[&Prediction]) -> Result<Option<f64>> {
    if preds.is_empty() {
        return Ok(None);
    }
    if metric == Metric::MacroAccuracy {
        let p: Vec<String> = preds.iter().map(|p| crate::text::normalize(&p.prediction)).collect();
        let g: Vec<String> = preds.iter().map(|p| crate::text::normalize(&p.target)).collect();
        return crate::metrics::macro_accuracy(&p, &g).map(Some);
    }
    Ok(Some(preds.iter().map(|p| p.score).sum::<f64>() / preds.len() as f64))
}

/// Aggregates scored predictions overall, per split and per relative position.
pub fn score_predictions(metric: Metric, predictions: Vec<Prediction>) -> Result<EvalReport> {
    let all: Vec<&Prediction> = predictions.iter().collect();
    let b: Vec<&Prediction> = predictions.iter().filter(|p| p.biased == Some(true)).collect();
    let n: Vec<&Prediction> = predictions.iter().filter(|p| p.biased == Some(false)).collect();
    let table_in: Vec<(Option<i64>, f64)> = predictions.iter().map(|p| (p.relpos, p.score)).collect();
    Ok(EvalReport {
        metric,
        overall: aggregate(metric, &all)?,
        biased: aggregate(metric, &b)?,
        non_biased: aggregate(metric, &n)?,
        biased_count: b.len(),
        non_biased_count: n.len(),
        by_relpos: per_position_table(&table_in),
        predictions,
    })
}

/// Decodes both sides of `partition` and scores them per split and per
/// relative position.
pub fn evaluate(model: &ToyModel, partition: &BiasPartition, metric: Metric) -> Result<EvalReport> {
    let members: Vec<(&Sample, bool)> = partition
        .biased
        .samples()
        .iter()
        .map(|s| (s, true))
        .chain(partition.non_biased.samples().iter().map(|s| (s, false)))
        .collect();
    let predictions = crate::par::map(&members, |(s, b)| -> Result<Prediction> {
        let prediction = model.decode(s);
        Ok(Prediction {
            score: metric.score(&prediction, &s.target)?,
            id: s.id.clone(),
            prediction,
            target: s.target.clone(),
            relpos: partition.relative_position_of(&s.id),
            biased: Some(*b),
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    score_predictions(metric, predictions)
}

/// Evaluates on the union of `corpora`, partitioned by relative position
/// with the default biased set.
pub fn evaluate_relpos(model: &ToyModel, corpora: &[&Corpus], metric: Metric) -> Result<EvalReport> {
    let task = corpora.first().map(|c| c.task()).unwrap_or(Task::Cqa);
    let all: Vec<Sample> = corpora.iter().flat_map(|c| c.samples().iter().cloned()).collect();
    let merged = Corpus::new(task, all)?;
    let set: BTreeSet<i64> = DEFAULT_BIASED_POSITIONS.into_iter().collect();
    let partition = split_by_relative_position(&merged, &set)?;
    evaluate(model, &partition, metric)
}

// ---------------------------------------------------------------------------
// Seeded experiment

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub synth: SynthSpec,
    pub train: TrainConfig,
    /// Run responses through alignment before training.
    pub msa: bool,
    pub n_per_prompt: usize,
    pub noise_rate: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            synth: SynthSpec::default(),
            train: TrainConfig::default(),
            msa: true,
            n_per_prompt: crate::lowbias_infer::DEFAULT_N_PER_PROMPT,
            noise_rate: 0.3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub eval: EvalReport,
    pub train: TrainOutcome,
    pub kept_fraction: Option<f64>,
}

/// Synthesizes data, collects and aligns unsupervised responses when α > 0,
/// trains with dev selection and evaluates on both eval splits.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let data = synth_corpus(&cfg.synth)?;
    let (aligned, kept_fraction) = if cfg.train.loss.alpha > 0.0 {
        let align = AlignmentConfig::default();
        let mut a = synth_aligned_responses(&data.train, &align, cfg.n_per_prompt, cfg.noise_rate, cfg.synth.seed)?;
        if !cfg.msa {
            a.iter_mut().for_each(|r| {
                r.kept = true;
                r.rejection_reasons.clear();
            });
        }
        let kf = a.iter().filter(|r| r.kept).count() as f64 / a.len().max(1) as f64;
        (a, Some(kf))
    } else {
        (Vec::new(), None)
    };
    let extra: Vec<&str> = aligned.iter().filter(|a| a.kept).map(|a| a.text.as_str()).collect();
    let model = ToyModel::for_corpora(&[&data.train], &extra, cfg.train.seed)?;
    let outcome = train(model, &data.train, &aligned, Some(&data.dev), &cfg.train)?;
    let eval = evaluate_relpos(
        &outcome.model,
        &[&data.eval_biased, &data.eval_nonbiased],
        Metric::Accuracy,
    )?;
    Ok(ExperimentOutcome {
        eval,
        train: outcome,
        kept_fraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bias_split::relative_position;

    fn small_spec(seed: u64) -> SynthSpec {
        SynthSpec {
            n_utterances: 5,
            n_train: 40,
            n_dev: 10,
            n_eval: 20,
            biased_fraction: 0.9,
            vocab_size: 20,
            n_facts: 8,
            seed,
        }
    }

    #[test]
    fn synth_relative_positions_match_construction() {
        let d = synth_corpus(&small_spec(3)).unwrap();
        for s in d.eval_biased.samples() {
            assert!([0, 1].contains(&relative_position(s).unwrap()));
        }
        for s in d.eval_nonbiased.samples() {
            assert!(![0, 1].contains(&relative_position(s).unwrap()));
        }
        let biased = d
            .train
            .samples()
            .iter()
            .filter(|s| [0, 1].contains(&relative_position(s).unwrap()))
            .count();
        assert_eq!(biased, 36);
    }

    #[test]
    fn synth_is_deterministic_and_validated() {
        let a = synth_corpus(&small_spec(9)).unwrap();
        let b = synth_corpus(&small_spec(9)).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.eval_nonbiased, b.eval_nonbiased);
        let mut bad = small_spec(0);
        bad.n_utterances = 2;
        assert!(synth_corpus(&bad).is_err());
    }

    #[test]
    fn uniform_model_scores() {
        let d = synth_corpus(&small_spec(1)).unwrap();
        let m = ToyModel::for_corpora(&[&d.train], &[], 0).unwrap();
        let s = &d.train.samples()[0];
        let lps = m.score_tokens(s, &s.target).unwrap();
        assert_eq!(lps.len(), tokenize(&s.target).len());
        let expect = -(m.vocab_size() as f64).ln();
        assert!(lps.iter().all(|l| (l - expect).abs() < 1e-12));
        assert!(matches!(m.score_tokens(s, "zzz"), Err(Error::OutOfVocabulary(_))));
        let total: f64 = m.next_token_logprobs(s, "is").unwrap().iter().map(|l| l.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let d = synth_corpus(&small_spec(2)).unwrap();
        let m = ToyModel::for_corpora(&[&d.train], &[], 0).unwrap().perturbed(0.1, 4);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 1,
            ..TrainConfig::default()
        };
        let out = train(m.clone(), &d.train, &[], None, &cfg).unwrap();
        assert_eq!(out.model.weights(), m.weights());
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let d = synth_corpus(&small_spec(5)).unwrap();
        let m = ToyModel::for_corpora(&[&d.train], &[], 0).unwrap();
        let cfg = TrainConfig {
            epochs: 10,
            ..TrainConfig::default()
        };
        let a = train(m.clone(), &d.train, &[], None, &cfg).unwrap();
        let b = train(m, &d.train, &[], None, &cfg).unwrap();
        assert_eq!(a.model.weights(), b.model.weights());
        assert!(a.trace.last().unwrap().combined < a.trace[0].combined);
    }

    #[test]
    fn divergence_names_the_step() {
        let d = synth_corpus(&small_spec(5)).unwrap();
        let mut m = ToyModel::for_corpora(&[&d.train], &[], 0).unwrap();
        m.weights_mut().iter_mut().for_each(|w| *w = 1e308);
        let err = train(m, &d.train, &[], None, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Diverged { step: 0, .. }), "{err}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let d = synth_corpus(&small_spec(6)).unwrap();
        let m = ToyModel::for_corpora(&[&d.train], &[], 0).unwrap().perturbed(0.5, 1);
        let s = &d.train.samples()[0];
        for alpha in [0.0, 0.2, 1.0] {
            let c = LossConfig::new(alpha).unwrap();
            let e = finite_diff_check(&m, s, &["is f1", "is f2"], &c, 1e-5, 50, 7).unwrap();
            assert!(e < 1e-4, "alpha {alpha}: {e}");
        }
    }

    #[test]
    fn model_json_round_trip() {
        let d = synth_corpus(&small_spec(8)).unwrap();
        let m = ToyModel::for_corpora(&[&d.train], &[], 3).unwrap().perturbed(0.2, 2);
        let back = ToyModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        let mut v: serde_json::Value = serde_json::from_str(&m.to_json().unwrap()).unwrap();
        v["weights"].as_array_mut().unwrap().pop();
        assert!(ToyModel::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn unsupervised_table_responses_ground_in_document() {
        let d = synth_corpus(&small_spec(4)).unwrap();
        let aligned = synth_aligned_responses(&d.train, &AlignmentConfig::default(), 3, 0.3, 4).unwrap();
        assert_eq!(aligned.len(), 3 * d.train.len());
        for a in &aligned {
            assert_eq!(a.kept, !a.text.starts_with("the passage"));
        }
    }
}
