use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use posdebias::bias_split::{
    split_by_lead_bias_with, split_by_lexical_bias, split_by_relative_position, BiasPartition,
    DEFAULT_LEXICAL_TRIGGERS,
};
use posdebias::corpus::{load_corpus, write_corpus, Corpus, Task, DEFAULT_NLI_CLASSES};
use posdebias::lowbias_infer::{
    infer_corpus, nli_class_distribution, read_jsonl, select_icl_exemplars, write_jsonl,
    BackendSpec, CandidateRecord, ClassDistribution, GenerateOptions, PromptSpec,
    RecordingBackend, Strategy, DEFAULT_ICL_EXEMPLARS,
};
use posdebias::metrics::{paired_t_test, Metric};
use posdebias::msa_align::{align_corpus, align_nli, calibrate_config, AlignedResponse, AlignmentConfig};
use posdebias::objective::LossConfig;
use posdebias::pipeline::{partition_for_task, run_pipeline, PartitionRecord, PipelineConfig, PIPELINE_SCHEMA};
use posdebias::report::{combined_csv, emit_report, results_csv, SystemEval};
use posdebias::toy_model::{
    evaluate, score_predictions, synth_aligned_responses, synth_corpus, train, EvalReport,
    Prediction, SynthSpec, ToyModel, TrainConfig,
};

#[derive(Parser)]
#[command(name = "posdebias", version, about = "Position-bias splitting, low-bias response alignment and toy-scale debiasing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Partition a corpus into biased / non-biased subsets, or draw a synthetic one.
    Split(SplitArgs),
    /// Collect unsupervised responses (or NLI class distributions) from a backend.
    Infer(InferArgs),
    /// Filter unsupervised responses and mask NLI gold classes.
    Align(AlignArgs),
    /// Train the toy next-token model.
    TrainToy(TrainArgs),
    /// Score predictions, optionally per relative position.
    Eval(EvalArgs),
    /// Render CSV tables and SVG charts from evaluation JSON files.
    Report(ReportArgs),
    /// Run the whole pipeline from a JSON config.
    Run(RunArgs),
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    task: Option<Task>,
    #[arg(long, required_unless_present = "synth")]
    corpus: Option<PathBuf>,
    /// Synthetic task spec (JSON); writes train/dev/eval corpora instead of splitting.
    #[arg(long, conflicts_with = "corpus")]
    synth: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "0,1")]
    biased_positions: Vec<i64>,
    #[arg(long, value_delimiter = ',')]
    triggers: Option<Vec<String>>,
    #[arg(long, default_value_t = 0.0)]
    min_lead_score: f64,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    task: Option<Task>,
    #[arg(long)]
    corpus: PathBuf,
    /// stub:echo | stub:markov[:SEED] | stub:table=PATH | http(s)://URL
    #[arg(long, env = "POSDEBIAS_BACKEND_URL", default_value = "stub:echo")]
    backend: String,
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    instruction: Option<String>,
    #[arg(long, default_value_t = 3)]
    n_per_prompt: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    concurrency: usize,
    #[arg(long, default_value_t = 64)]
    max_tokens: u32,
    #[arg(long, value_delimiter = ',')]
    classes: Option<Vec<String>>,
    /// Also save every request/response pair as a replay table.
    #[arg(long)]
    record: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AlignArgs {
    #[arg(long)]
    task: Option<Task>,
    #[arg(long)]
    corpus: PathBuf,
    /// Candidate responses, or class distributions for NLI.
    #[arg(long)]
    candidates: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Pick the gate threshold whose keep fraction is nearest the target.
    #[arg(long)]
    calibrate: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Synthetic task spec (JSON).
    #[arg(long, required_unless_present = "train")]
    spec: Option<PathBuf>,
    #[arg(long, conflicts_with = "spec")]
    train: Option<PathBuf>,
    #[arg(long, requires = "train")]
    dev: Option<PathBuf>,
    #[arg(long, requires = "train")]
    aligned: Option<PathBuf>,
    #[arg(long)]
    task: Option<Task>,
    #[arg(long, default_value_t = 0.0)]
    alpha: f64,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 1.0)]
    clip_norm: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Shuffle utterance order every epoch.
    #[arg(long)]
    permute_positions: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    trace: Option<PathBuf>,
    /// With --spec: evaluate on the synthetic eval splits and write the report JSON here.
    #[arg(long)]
    eval_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, default_value = "rouge-l")]
    metric: Metric,
    /// JSONL of {"id", "prediction"}.
    #[arg(long, required_unless_present = "model")]
    pred: Option<PathBuf>,
    /// Decode predictions with a toy model instead of reading them.
    #[arg(long, conflicts_with = "pred")]
    model: Option<PathBuf>,
    #[arg(long)]
    gold: PathBuf,
    #[arg(long)]
    task: Option<Task>,
    #[arg(long)]
    by_relpos: bool,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "0,1")]
    biased_positions: Vec<i64>,
    #[arg(long, default_value = "system")]
    system: String,
    /// Second prediction file for a paired t-test.
    #[arg(long)]
    compare: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Full evaluation report (predictions included) as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// NAME=PATH of an evaluation report JSON; repeatable.
    #[arg(long = "eval", required = true)]
    evals: Vec<String>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, required_unless_present = "print_schema")]
    config: Option<PathBuf>,
    /// Print the configuration JSON schema and exit.
    #[arg(long)]
    print_schema: bool,
}

/// Reads the `task` field of the first record when `--task` is absent.
fn resolve_task(task: Option<Task>, corpus: &Path) -> Result<Task> {
    if let Some(t) = task {
        return Ok(t);
    }
    let text = fs::read_to_string(corpus).with_context(|| format!("reading {}", corpus.display()))?;
    let first = text
        .lines()
        .find(|l| !l.trim().is_empty())
        .with_context(|| format!("{} is empty", corpus.display()))?;
    let v: serde_json::Value = serde_json::from_str(first)?;
    let t = v["task"]
        .as_str()
        .with_context(|| format!("{}: no task field; pass --task", corpus.display()))?;
    Ok(t.parse()?)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn partition(corpus: &Corpus, positions: &[i64], triggers: Option<&[String]>, min_lead: f64) -> Result<BiasPartition> {
    Ok(match corpus.task() {
        Task::Cqa | Task::Cqg => {
            let set: BTreeSet<i64> = positions.iter().copied().collect();
            split_by_relative_position(corpus, &set)?
        }
        Task::Sum => split_by_lead_bias_with(corpus, min_lead)?,
        Task::Nli => match triggers {
            Some(t) => split_by_lexical_bias(corpus, t)?,
            None => split_by_lexical_bias(corpus, &DEFAULT_LEXICAL_TRIGGERS)?,
        },
        Task::Kgc => partition_for_task(corpus, None, None)?,
    })
}

fn cmd_split(a: SplitArgs) -> Result<()> {
    fs::create_dir_all(&a.out_dir)?;
    if let Some(spec_path) = &a.synth {
        let spec: SynthSpec = read_json(spec_path)?;
        let d = synth_corpus(&spec)?;
        for (name, c) in [
            ("train", &d.train),
            ("dev", &d.dev),
            ("eval_biased", &d.eval_biased),
            ("eval_nonbiased", &d.eval_nonbiased),
        ] {
            write_corpus(a.out_dir.join(format!("{name}.jsonl")), c)?;
            println!("{name}: {} samples", c.len());
        }
        return Ok(());
    }
    let path = a.corpus.as_deref().expect("clap enforces --corpus");
    let task = resolve_task(a.task, path)?;
    let corpus = load_corpus(path, task)?;
    let p = partition(&corpus, &a.biased_positions, a.triggers.as_deref(), a.min_lead_score)?;
    write_corpus(a.out_dir.join("biased.jsonl"), &p.biased)?;
    write_corpus(a.out_dir.join("non_biased.jsonl"), &p.non_biased)?;
    write_json(&a.out_dir.join("evidence.json"), &PartitionRecord::from(&p))?;
    println!("biased: {}  non-biased: {}", p.biased.len(), p.non_biased.len());
    Ok(())
}

fn cmd_infer(a: InferArgs) -> Result<()> {
    let task = resolve_task(a.task, &a.corpus)?;
    let corpus = load_corpus(&a.corpus, task)?;
    let spec: BackendSpec = a.backend.parse()?;
    let backend = RecordingBackend::new(spec.open()?);
    if task == Task::Nli {
        let classes: Vec<String> = a
            .classes
            .unwrap_or_else(|| DEFAULT_NLI_CLASSES.iter().map(|c| c.to_string()).collect());
        let dists = corpus
            .samples()
            .iter()
            .map(|s| nli_class_distribution(s, &classes, &backend).map(|d| (s.id.clone(), d)))
            .collect::<posdebias::Result<Vec<_>>>()?;
        write_jsonl(&a.out, &dists)?;
        println!("{} class distributions -> {}", dists.len(), a.out.display());
    } else {
        let mut prompt = PromptSpec::default_for(task);
        if let Some(s) = a.strategy {
            prompt = match s {
                Strategy::InstructionOnly => PromptSpec::instruction_only(prompt.instruction),
                Strategy::Diverse => PromptSpec::diverse(prompt.instruction, posdebias::lowbias_infer::default_diverse_prompts()),
                Strategy::Icl => PromptSpec::icl(prompt.instruction, Vec::new()),
            };
            prompt.allow_override = true;
        }
        if let Some(i) = a.instruction {
            prompt.instruction = i;
        }
        if prompt.strategy == Strategy::Icl && prompt.exemplars.is_empty() {
            prompt.exemplars = select_icl_exemplars(&corpus, DEFAULT_ICL_EXEMPLARS);
        }
        let opts = GenerateOptions {
            max_tokens: a.max_tokens,
            concurrency: a.concurrency,
        };
        let cands = infer_corpus(corpus.samples(), &prompt, &backend, a.n_per_prompt, a.seed, opts)?;
        write_jsonl(&a.out, &cands)?;
        println!("{} candidates -> {}", cands.len(), a.out.display());
    }
    if let Some(rec) = a.record {
        backend.save(&rec)?;
    }
    Ok(())
}

fn cmd_align(a: AlignArgs) -> Result<()> {
    let task = resolve_task(a.task, &a.corpus)?;
    let corpus = load_corpus(&a.corpus, task)?;
    let aligned: Vec<AlignedResponse> = if task == Task::Nli {
        let dists: Vec<(String, ClassDistribution)> = read_jsonl(&a.candidates)?;
        let mut out = Vec::new();
        for (id, d) in &dists {
            let s = corpus.get(id).with_context(|| format!("unknown sample {id}"))?;
            out.push(align_nli(s, d)?.1);
        }
        out
    } else {
        let cands: Vec<CandidateRecord> = read_jsonl(&a.candidates)?;
        let mut cfg = match &a.config {
            Some(p) => AlignmentConfig::from_json(&fs::read_to_string(p)?)?,
            None => AlignmentConfig::default(),
        };
        if a.calibrate {
            cfg = calibrate_config(task, &cands, &cfg)?;
            println!(
                "calibrated thresholds: unreliable {} incoherence {}",
                cfg.unreliable_threshold, cfg.incoherence_threshold
            );
        }
        align_corpus(task, corpus.samples(), &cands, &cfg)?
    };
    write_jsonl(&a.out, &aligned)?;
    let kept = aligned.iter().filter(|r| r.kept).count();
    println!("kept {kept} of {} -> {}", aligned.len(), a.out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = TrainConfig {
        loss: LossConfig::new(a.alpha)?,
        epochs: a.epochs,
        learning_rate: a.lr,
        batch_size: a.batch_size,
        clip_norm: a.clip_norm,
        seed: a.seed,
        permute_positions: a.permute_positions,
    };
    let (train_c, dev, aligned, eval_parts) = if let Some(spec_path) = &a.spec {
        let spec: SynthSpec = read_json(spec_path)?;
        let d = synth_corpus(&spec)?;
        let aligned = if a.alpha > 0.0 {
            synth_aligned_responses(&d.train, &AlignmentConfig::default(), 3, 0.3, spec.seed)?
        } else {
            Vec::new()
        };
        let mut eval = d.eval_biased.into_samples();
        eval.extend(d.eval_nonbiased.into_samples());
        (d.train, Some(d.dev), aligned, Some(Corpus::new(Task::Cqa, eval)?))
    } else {
        let path = a.train.as_deref().expect("clap enforces --train");
        let task = resolve_task(a.task, path)?;
        let train_c = load_corpus(path, task)?;
        let dev = a.dev.as_ref().map(|p| load_corpus(p, task)).transpose()?;
        let aligned: Vec<AlignedResponse> = match &a.aligned {
            Some(p) => read_jsonl(p)?,
            None => Vec::new(),
        };
        (train_c, dev, aligned, None)
    };
    let extra: Vec<&str> = aligned.iter().filter(|r| r.kept).map(|r| r.text.as_str()).collect();
    let mut corpora = vec![&train_c];
    if let Some(d) = &dev {
        corpora.push(d);
    }
    let model = ToyModel::for_corpora(&corpora, &extra, a.seed)?;
    let outcome = train(model, &train_c, &aligned, dev.as_ref(), &cfg)?;
    outcome.model.save(&a.out)?;
    if let Some(t) = &a.trace {
        write_jsonl(t, &outcome.trace)?;
    }
    if let (Some(first), Some(last)) = (outcome.trace.first(), outcome.trace.last()) {
        println!(
            "{} steps, loss {:.4} -> {:.4}, best epoch {:?}",
            outcome.trace.len(),
            first.combined,
            last.combined,
            outcome.best_epoch
        );
    }
    if let (Some(out), Some(eval)) = (&a.eval_out, &eval_parts) {
        let p = partition_for_task(eval, None, None)?;
        let report = evaluate(&outcome.model, &p, Metric::Accuracy)?;
        write_json(out, &report)?;
        println!(
            "eval accuracy: biased {:.2}  non-biased {:.2}",
            100.0 * report.biased.unwrap_or(f64::NAN),
            100.0 * report.non_biased.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

fn read_predictions(path: &Path) -> Result<Vec<(String, String)>> {
    let rows: Vec<serde_json::Value> = read_jsonl(path)?;
    rows.into_iter()
        .enumerate()
        .map(|(i, v)| {
            let id = v["id"].as_str().with_context(|| format!("{}:{}: missing id", path.display(), i + 1))?;
            let p = v["prediction"]
                .as_str()
                .with_context(|| format!("{}:{}: missing prediction", path.display(), i + 1))?;
            Ok((id.to_string(), p.to_string()))
        })
        .collect()
}

fn build_eval(
    metric: Metric,
    gold: &Corpus,
    preds: &[(String, String)],
    part: Option<&BiasPartition>,
) -> Result<EvalReport> {
    let by_id: std::collections::HashMap<&str, &str> = preds.iter().map(|(i, p)| (i.as_str(), p.as_str())).collect();
    let biased: BTreeSet<&str> = part
        .map(|p| p.biased.samples().iter().map(|s| s.id.as_str()).collect())
        .unwrap_or_default();
    let mut out = Vec::new();
    for s in gold.samples() {
        let pred = by_id
            .get(s.id.as_str())
            .with_context(|| format!("no prediction for sample {}", s.id))?;
        out.push(Prediction {
            id: s.id.clone(),
            prediction: pred.to_string(),
            target: s.target.clone(),
            relpos: part.and_then(|p| p.relative_position_of(&s.id)),
            biased: part.map(|_| biased.contains(s.id.as_str())),
            score: metric.score(pred, &s.target)?,
        });
    }
    Ok(score_predictions(metric, out)?)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let task = resolve_task(a.task, &a.gold)?;
    let gold = load_corpus(&a.gold, task)?;
    let preds = match (&a.pred, &a.model) {
        (Some(p), _) => read_predictions(p)?,
        (None, Some(m)) => {
            let model = ToyModel::load(m)?;
            gold.samples().iter().map(|s| (s.id.clone(), model.decode(s))).collect()
        }
        (None, None) => bail!("pass --pred or --model"),
    };
    let part = if a.by_relpos {
        Some(partition(&gold, &a.biased_positions, None, 0.0)?)
    } else {
        None
    };
    let report = build_eval(a.metric, &gold, &preds, part.as_ref())?;
    let system = SystemEval {
        system: a.system.clone(),
        eval: report,
    };
    let csv = if a.by_relpos {
        combined_csv(std::slice::from_ref(&system))
    } else {
        results_csv(std::slice::from_ref(&system))
    };
    match &a.out {
        Some(p) => fs::write(p, &csv).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{csv}"),
    }
    if let Some(j) = &a.json {
        write_json(j, &system.eval)?;
    }
    if let Some(c) = &a.compare {
        let other = build_eval(a.metric, &gold, &read_predictions(c)?, None)?;
        let sa: Vec<f64> = system.eval.predictions.iter().map(|p| p.score).collect();
        let sb: Vec<f64> = other.predictions.iter().map(|p| p.score).collect();
        let p = paired_t_test(&sa, &sb)?;
        println!("{}", json!({ "paired_t_test_p_value": p }));
    }
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let mut systems = Vec::new();
    for spec in &a.evals {
        let (name, path) = spec
            .split_once('=')
            .with_context(|| format!("--eval expects NAME=PATH, got {spec:?}"))?;
        systems.push(SystemEval {
            system: name.to_string(),
            eval: read_json(Path::new(path))?,
        });
    }
    for p in emit_report(&systems, &[], &a.out_dir)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn cmd_run(a: RunArgs) -> Result<()> {
    if a.print_schema {
        print!("{PIPELINE_SCHEMA}");
        return Ok(());
    }
    let path = a.config.expect("clap enforces --config");
    let cfg = PipelineConfig::load(&path)?;
    let manifest = run_pipeline(&cfg)?;
    for s in &manifest.stages {
        println!("{:<7} {:?}", s.name, s.status);
    }
    println!(
        "{} artifacts; manifest at {}",
        manifest.artifacts.len(),
        cfg.out_dir.join(posdebias::pipeline::MANIFEST_FILE).display()
    );
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Split(a) => cmd_split(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Align(a) => cmd_align(a),
        Command::TrainToy(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Report(a) => cmd_report(a),
        Command::Run(a) => cmd_run(a),
    }
}
