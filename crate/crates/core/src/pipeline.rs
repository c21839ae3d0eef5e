//! End-to-end run: split, infer, align, train, eval, report.
//!
//! Every file a stage writes is recorded in `manifest.json` with its SHA-256.
//! A failing stage is marked in the manifest; files from earlier stages stay.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bias_split::{
    split_by_lead_bias, split_by_lexical_bias, split_by_relative_position, BiasEvidence,
    BiasPartition, DEFAULT_BIASED_POSITIONS, DEFAULT_LEXICAL_TRIGGERS,
};
use crate::corpus::{load_corpus, write_corpus, Corpus, Task, DEFAULT_NLI_CLASSES};
use crate::error::{Error, Result};
use crate::lowbias_infer::{
    infer_corpus, nli_class_distribution, write_exchanges, write_jsonl, Backend, BackendSpec,
    CandidateRecord, GenerateOptions, PromptSpec, StubBackend, DEFAULT_N_PER_PROMPT,
};
use crate::metrics::Metric;
use crate::msa_align::{align_corpus, align_nli, calibrate_config, AlignedResponse, AlignmentConfig};
use crate::objective::LossConfig;
use crate::report::{emit_report, Sweep, SweepPoint, SystemEval};
use crate::toy_model::{
    evaluate, synth_corpus, synth_unsupervised_table, train, EvalReport, SynthSpec, ToyModel,
    TrainConfig,
};

pub const PIPELINE_SCHEMA: &str = include_str!("../config/pipeline.schema.json");
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synth(SynthSpec),
    Files {
        train: PathBuf,
        #[serde(default)]
        dev: Option<PathBuf>,
        eval: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub clip_norm: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSettings {
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            clip_norm: t.clip_norm,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    #[serde(default)]
    pub infer: u64,
    #[serde(default)]
    pub train: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// Plain fine-tuning (α = 0).
    Ft,
    /// Fine-tuning with utterance order shuffled every epoch.
    Rp,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    #[serde(default)]
    pub alphas: Option<Vec<f64>>,
    #[serde(default)]
    pub train_sizes: Option<Vec<usize>>,
}

fn default_baselines() -> Vec<Baseline> {
    vec![Baseline::Ft, Baseline::Rp]
}

fn default_n_per_prompt() -> usize {
    DEFAULT_N_PER_PROMPT
}

fn default_noise_rate() -> f64 {
    0.3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub task: Task,
    #[serde(default)]
    pub dataset: Option<String>,
    pub data: DataSource,
    pub out_dir: PathBuf,
    /// Unset: a synthesized replay table for synthetic data, `stub:echo` otherwise.
    #[serde(default)]
    pub backend: Option<BackendSpec>,
    #[serde(default)]
    pub prompt: Option<PromptSpec>,
    #[serde(default = "default_n_per_prompt")]
    pub n_per_prompt: usize,
    /// Share of off-task responses in the synthesized replay table.
    #[serde(default = "default_noise_rate")]
    pub noise_rate: f64,
    #[serde(default)]
    pub align: AlignmentConfig,
    #[serde(default)]
    pub calibrate: bool,
    /// Unset: the task default.
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default = "default_baselines")]
    pub baselines: Vec<Baseline>,
    #[serde(default)]
    pub sweep: SweepGrid,
    #[serde(default)]
    pub metric: Option<Metric>,
    #[serde(default)]
    pub biased_positions: Option<Vec<i64>>,
    #[serde(default)]
    pub lexical_triggers: Option<Vec<String>>,
    #[serde(default)]
    pub nli_classes: Option<Vec<String>>,
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_str(text)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Checks everything that can be checked before a stage runs.
    pub fn validate(&self) -> Result<()> {
        match &self.data {
            DataSource::Synth(spec) => {
                spec.validate()?;
                if self.task != Task::Cqa {
                    return Err(Error::invalid("synthetic data is conversational QA; set task to cqa"));
                }
            }
            DataSource::Files { train, dev, eval } => {
                for p in [Some(train), dev.as_ref(), Some(eval)].into_iter().flatten() {
                    if !p.is_file() {
                        return Err(Error::io(
                            p,
                            std::io::Error::new(std::io::ErrorKind::NotFound, "corpus file not found"),
                        ));
                    }
                }
            }
        }
        if let Some(BackendSpec::Table(p)) = &self.backend {
            if !p.is_file() {
                return Err(Error::io(
                    p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "replay table not found"),
                ));
            }
        }
        self.align.validate()?;
        LossConfig::new(self.alpha())?;
        if self.n_per_prompt == 0 {
            return Err(Error::invalid("n_per_prompt must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(Error::invalid("noise_rate must lie in [0, 1]"));
        }
        if !(self.train.learning_rate >= 0.0) || self.train.batch_size == 0 {
            return Err(Error::invalid("invalid training settings"));
        }
        if let Some(a) = &self.sweep.alphas {
            if a.is_empty() {
                return Err(Error::invalid("sweep.alphas must be non-empty when given"));
            }
            for &x in a {
                LossConfig::new(x)?;
            }
        }
        if let Some(n) = &self.sweep.train_sizes {
            if n.is_empty() || n.contains(&0) {
                return Err(Error::invalid("sweep.train_sizes must be non-empty and positive"));
            }
        }
        Ok(())
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
            .unwrap_or_else(|| LossConfig::default_for(self.task, self.dataset.as_deref()).alpha)
    }

    pub fn metric(&self) -> Metric {
        self.metric.unwrap_or(match (&self.data, self.task) {
            (DataSource::Synth(_), _) => Metric::Accuracy,
            (_, Task::Nli) => Metric::MacroAccuracy,
            _ => Metric::RougeL,
        })
    }

    fn train_config(&self, alpha: f64, permute: bool) -> TrainConfig {
        TrainConfig {
            loss: LossConfig { alpha },
            epochs: self.train.epochs,
            learning_rate: self.train.learning_rate,
            batch_size: self.train.batch_size,
            clip_norm: self.train.clip_norm,
            seed: self.seeds.train,
            permute_positions: permute,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ok,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub stage: String,
    /// Relative to the run directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stages: Vec<StageRecord>,
    pub artifacts: Vec<Artifact>,
}

impl Manifest {
    pub fn artifact(&self, path: &str) -> Option<&Artifact> {
        self.artifacts.iter().find(|a| a.path == path)
    }

    pub fn failed_stage(&self) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.status == StageStatus::Failed)
    }
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Serializable view of a [`BiasPartition`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionRecord {
    pub biased: Vec<String>,
    pub non_biased: Vec<String>,
    pub evidence: std::collections::BTreeMap<String, BiasEvidence>,
}

impl From<&BiasPartition> for PartitionRecord {
    fn from(p: &BiasPartition) -> Self {
        PartitionRecord {
            biased: p.biased.samples().iter().map(|s| s.id.clone()).collect(),
            non_biased: p.non_biased.samples().iter().map(|s| s.id.clone()).collect(),
            evidence: p.evidence.clone(),
        }
    }
}

/// Partitions `corpus` with the splitter that matches its task: relative
/// position for CQA/CQG, lead for SUM, lexical triggers for NLI. KGC has no
/// positional clue and every sample lands in the non-biased side.
pub fn partition_for_task(corpus: &Corpus, biased_positions: Option<&[i64]>, triggers: Option<&[String]>) -> Result<BiasPartition> {
    match corpus.task() {
        Task::Cqa | Task::Cqg => {
            let set: BTreeSet<i64> = biased_positions
                .map(|p| p.iter().copied().collect())
                .unwrap_or_else(|| DEFAULT_BIASED_POSITIONS.into_iter().collect());
            split_by_relative_position(corpus, &set)
        }
        Task::Sum => split_by_lead_bias(corpus),
        Task::Nli => match triggers {
            Some(t) => split_by_lexical_bias(corpus, t),
            None => split_by_lexical_bias(corpus, &DEFAULT_LEXICAL_TRIGGERS),
        },
        Task::Kgc => Ok(BiasPartition {
            biased: Corpus::empty(Task::Kgc),
            non_biased: corpus.clone(),
            evidence: Default::default(),
        }),
    }
}

struct Run<'a> {
    cfg: &'a PipelineConfig,
    dir: PathBuf,
    manifest: Manifest,
    stage: String,
}

impl Run<'_> {
    fn path(&self, rel: &str) -> Result<PathBuf> {
        let p = self.dir.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        Ok(p)
    }

    fn record(&mut self, rel: &str) -> Result<()> {
        let p = self.dir.join(rel);
        let bytes = fs::metadata(&p).map_err(|e| Error::io(&p, e))?.len();
        self.manifest.artifacts.push(Artifact {
            stage: self.stage.clone(),
            path: rel.to_string(),
            sha256: sha256_file(&p)?,
            bytes,
        });
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let p = self.path(rel)?;
        let text = serde_json::to_string_pretty(value)?;
        fs::write(&p, text + "\n").map_err(|e| Error::io(&p, e))?;
        self.record(rel)
    }

    fn write_jsonl<T: Serialize>(&mut self, rel: &str, records: &[T]) -> Result<()> {
        write_jsonl(self.path(rel)?, records)?;
        self.record(rel)
    }

    fn write_corpus(&mut self, rel: &str, corpus: &Corpus) -> Result<()> {
        write_corpus(self.path(rel)?, corpus)?;
        self.record(rel)
    }

    fn save_manifest(&self) -> Result<()> {
        let p = self.dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(&p, text + "\n").map_err(|e| Error::io(&p, e))
    }

    fn stage<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        self.stage = name.to_string();
        match f(self) {
            Ok(v) => {
                self.manifest.stages.push(StageRecord {
                    name: name.into(),
                    status: StageStatus::Ok,
                    error: None,
                });
                Ok(v)
            }
            Err(e) => {
                self.manifest.stages.push(StageRecord {
                    name: name.into(),
                    status: StageStatus::Failed,
                    error: Some(e.to_string()),
                });
                self.save_manifest()?;
                Err(e)
            }
        }
    }
}

struct Data {
    train: Corpus,
    dev: Option<Corpus>,
    partition: BiasPartition,
    synth_table: bool,
}

struct SystemSpec {
    name: String,
    alpha: f64,
    permute: bool,
    train_size: Option<usize>,
}

fn slug(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect::<String>()
        .trim_matches('_')
        .to_string()
}

fn systems(cfg: &PipelineConfig, has_docs: bool) -> Vec<SystemSpec> {
    let mut out = Vec::new();
    let mk = |name: String, alpha, permute, train_size| SystemSpec {
        name,
        alpha,
        permute,
        train_size,
    };
    for b in &cfg.baselines {
        match b {
            Baseline::Ft => out.push(mk("ft".into(), 0.0, false, None)),
            Baseline::Rp if has_docs => out.push(mk("rp".into(), 0.0, true, None)),
            Baseline::Rp => {}
        }
    }
    out.push(mk("debiased".into(), cfg.alpha(), false, None));
    for &a in cfg.sweep.alphas.iter().flatten() {
        out.push(mk(format!("debiased[alpha={a}]"), a, false, None));
    }
    for &n in cfg.sweep.train_sizes.iter().flatten() {
        out.push(mk(format!("ft[n={n}]"), 0.0, false, Some(n)));
        out.push(mk(format!("debiased[n={n}]"), cfg.alpha(), false, Some(n)));
    }
    out
}

fn open_backend(cfg: &PipelineConfig, table: Option<StubBackend>) -> Result<Box<dyn Backend + Send>> {
    match (table, &cfg.backend) {
        (Some(t), None) => Ok(Box::new(t)),
        (_, Some(spec)) => spec.open(),
        (None, None) => BackendSpec::Echo.open(),
    }
}

/// Runs every stage in order and writes `manifest.json` into the output
/// directory. Stage failures are recorded in the manifest before the error
/// is returned.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<Manifest> {
    cfg.validate()?;
    let dir = cfg.out_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut run = Run {
        cfg,
        dir,
        manifest: Manifest::default(),
        stage: String::new(),
    };
    run.write_json("config.json", cfg)?;
    let task = cfg.task;

    let data = run.stage("split", |r| {
        let (train, dev, eval, synth_table) = match &r.cfg.data {
            DataSource::Synth(spec) => {
                let d = synth_corpus(spec)?;
                let mut eval = d.eval_biased.into_samples();
                eval.extend(d.eval_nonbiased.into_samples());
                (d.train, Some(d.dev), Corpus::new(Task::Cqa, eval)?, r.cfg.backend.is_none())
            }
            DataSource::Files { train, dev, eval } => (
                load_corpus(train, task)?,
                dev.as_ref().map(|p| load_corpus(p, task)).transpose()?,
                load_corpus(eval, task)?,
                false,
            ),
        };
        r.write_corpus("data/train.jsonl", &train)?;
        if let Some(d) = &dev {
            r.write_corpus("data/dev.jsonl", d)?;
        }
        r.write_corpus("data/eval.jsonl", &eval)?;
        let bp = r.cfg.biased_positions.as_deref();
        let trig = r.cfg.lexical_triggers.as_deref();
        let train_part = partition_for_task(&train, bp, trig)?;
        r.write_json("split/train_partition.json", &PartitionRecord::from(&train_part))?;
        let partition = partition_for_task(&eval, bp, trig)?;
        r.write_json("split/eval_partition.json", &PartitionRecord::from(&partition))?;
        Ok(Data {
            train,
            dev,
            partition,
            synth_table,
        })
    })?;

    let classes: Vec<String> = cfg
        .nli_classes
        .clone()
        .unwrap_or_else(|| DEFAULT_NLI_CLASSES.iter().map(|c| c.to_string()).collect());

    let candidates = run.stage("infer", |r| {
        let spec = r.cfg.prompt.clone().unwrap_or_else(|| PromptSpec::default_for(task));
        let table = if data.synth_table {
            let t = synth_unsupervised_table(&data.train, &spec, r.cfg.n_per_prompt, r.cfg.noise_rate, r.cfg.seeds.infer)?;
            write_exchanges(r.path("infer/stub_table.jsonl")?, &t.to_exchanges())?;
            r.record("infer/stub_table.jsonl")?;
            Some(StubBackend::table(t))
        } else {
            None
        };
        let backend = open_backend(r.cfg, table)?;
        if task == Task::Nli {
            let dists = data
                .train
                .samples()
                .iter()
                .map(|s| nli_class_distribution(s, &classes, &backend).map(|d| (s.id.clone(), d)))
                .collect::<Result<Vec<_>>>()?;
            r.write_jsonl("infer/class_distributions.jsonl", &dists)?;
            return Ok(Candidates::Nli(dists));
        }
        let cands = infer_corpus(
            data.train.samples(),
            &spec,
            &backend,
            r.cfg.n_per_prompt,
            r.cfg.seeds.infer,
            GenerateOptions::default(),
        )?;
        r.write_jsonl("infer/candidates.jsonl", &cands)?;
        Ok(Candidates::Generated(cands))
    })?;

    let aligned = run.stage("align", |r| {
        let aligned: Vec<AlignedResponse> = match &candidates {
            Candidates::Nli(dists) => {
                let mut out = Vec::new();
                for (s, (_, d)) in data.train.samples().iter().zip(dists) {
                    out.push(align_nli(s, d)?.1);
                }
                out
            }
            Candidates::Generated(cands) => {
                let align = if r.cfg.calibrate {
                    calibrate_config(task, cands, &r.cfg.align)?
                } else {
                    r.cfg.align.clone()
                };
                r.write_json("align/config.json", &align)?;
                align_corpus(task, data.train.samples(), cands, &align)?
            }
        };
        r.write_jsonl("align/aligned.jsonl", &aligned)?;
        Ok(aligned)
    })?;

    let has_docs = task.has_document();
    let specs = systems(cfg, has_docs);
    let trained = run.stage("train", |r| {
        let extra: Vec<&str> = aligned.iter().filter(|a| a.kept).map(|a| a.text.as_str()).collect();
        let mut corpora = vec![&data.train];
        if let Some(d) = &data.dev {
            corpora.push(d);
        }
        let base = ToyModel::for_corpora(&corpora, &extra, r.cfg.seeds.train)?;
        let outcomes = crate::par::map(&specs, |s| {
            let subset;
            let train_corpus = match s.train_size {
                Some(n) => {
                    let take = data.train.samples().iter().take(n).cloned().collect();
                    subset = Corpus::new(task, take)?;
                    &subset
                }
                None => &data.train,
            };
            let tc = r.cfg.train_config(s.alpha, s.permute);
            let al: &[AlignedResponse] = if s.alpha > 0.0 { &aligned } else { &[] };
            train(base.clone(), train_corpus, al, data.dev.as_ref(), &tc)
        });
        let mut models = Vec::new();
        for (s, o) in specs.iter().zip(outcomes) {
            let o = o?;
            let name = slug(&s.name);
            let model_rel = format!("models/{name}.json");
            o.model.save(r.path(&model_rel)?)?;
            r.record(&model_rel)?;
            r.write_jsonl(&format!("traces/{name}.jsonl"), &o.trace)?;
            models.push(o.model);
        }
        Ok(models)
    })?;

    let metric = cfg.metric();
    let evals = run.stage("eval", |r| {
        let reports = crate::par::map(&trained, |m| evaluate(m, &data.partition, metric));
        let mut out = Vec::new();
        for (s, e) in specs.iter().zip(reports) {
            let e: EvalReport = e?;
            r.write_json(&format!("eval/{}.json", slug(&s.name)), &e)?;
            out.push(SystemEval {
                system: s.name.clone(),
                eval: e,
            });
        }
        Ok(out)
    })?;

    run.stage("report", |r| {
        let main: Vec<SystemEval> = specs
            .iter()
            .zip(&evals)
            .filter(|(s, _)| s.train_size.is_none() && !s.name.contains('['))
            .map(|(_, e)| e.clone())
            .collect();
        let mut sweeps = Vec::new();
        if r.cfg.sweep.alphas.is_some() {
            sweeps.push(Sweep {
                parameter: "alpha".into(),
                points: specs
                    .iter()
                    .zip(&evals)
                    .filter(|(s, _)| s.name.starts_with("debiased[alpha="))
                    .map(|(s, e)| SweepPoint {
                        value: s.alpha,
                        system: e.clone(),
                    })
                    .collect(),
            });
        }
        if r.cfg.sweep.train_sizes.is_some() {
            for prefix in ["ft", "debiased"] {
                sweeps.push(Sweep {
                    parameter: format!("train_size_{prefix}"),
                    points: specs
                        .iter()
                        .zip(&evals)
                        .filter(|(s, _)| s.train_size.is_some() && s.name.starts_with(prefix))
                        .map(|(s, e)| SweepPoint {
                            value: s.train_size.unwrap_or(0) as f64,
                            system: e.clone(),
                        })
                        .collect(),
                });
            }
        }
        let dir = r.path("report/x")?.parent().map(Path::to_path_buf).unwrap_or_default();
        for p in emit_report(&main, &sweeps, &dir)? {
            let rel = format!("report/{}", p.file_name().and_then(|n| n.to_str()).unwrap_or_default());
            r.record(&rel)?;
        }
        Ok(())
    })?;

    run.save_manifest()?;
    Ok(run.manifest)
}

enum Candidates {
    Nli(Vec<(String, crate::lowbias_infer::ClassDistribution)>),
    Generated(Vec<CandidateRecord>),
}
