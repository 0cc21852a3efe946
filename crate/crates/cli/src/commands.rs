use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::anyhow;
use serde_json::json;
use tracing::info;

use kgagent::config::{require_existing, require_set, Backend, ConfigError, RunConfig};
use kgagent::data::{read_jsonl, read_questions, write_jsonl, Document, QuestionRecord};
use kgagent::env::{CorpusRetriever, EnvResources, Retriever};
use kgagent::eval::{error_report, evaluate, path_coverage};
use kgagent::kg::{construct_incomplete_kg, load_kg, read_triples_tsv, write_triples_tsv, KnowledgeGraph, LabeledTriple};
use kgagent::policy::{HttpPolicy, Policy, ReplayPolicy, ScriptedPolicy};
use kgagent::rules::{DemoCacheEntry, DemonstrationPool};
use kgagent::selflearn::{explore, iterate, ExternalTrainer, IterateConfig, ReplayTrainer, StopReason, TrainStep};
use kgagent::synthetic::{SyntheticDataset, SyntheticSpec};
use kgagent::template::Templates;
use kgagent::trajectory::{read_trajectories, write_trajectories, Trajectory};

use crate::{
    BackendArg, BuildKgArgs, Cli, Command, CommitTriplesArgs, EnvArgs, EvaluateArgs, MakeIncompleteArgs,
    MineRulesArgs, SelflearnArgs, SynthArgs, TrainerArg,
};

/// A failure and the exit code it maps to.
pub enum CliError {
    /// Bad flags, bad config values, missing or malformed inputs.
    Invalid(anyhow::Error),
    /// The pipeline itself failed.
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    pub fn error(&self) -> &anyhow::Error {
        match self {
            CliError::Invalid(e) | CliError::Runtime(e) => e,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Invalid(e.into())
    }
}

trait Classify<T> {
    fn invalid(self) -> Result<T, CliError>;
    fn runtime(self) -> Result<T, CliError>;
}

impl<T, E> Classify<T> for Result<T, E>
where
    E: std::error::Error + Send + Sync + 'static,
{
    fn invalid(self) -> Result<T, CliError> {
        self.map_err(|e| CliError::Invalid(e.into()))
    }

    fn runtime(self) -> Result<T, CliError> {
        self.map_err(|e| CliError::Runtime(e.into()))
    }
}

type CliResult<T = ()> = Result<T, CliError>;

pub fn run(cli: Cli) -> CliResult {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.params.seed = seed;
    }
    match cli.command {
        Command::BuildKg(a) => build_kg(cfg, a),
        Command::MakeIncomplete(a) => make_incomplete(cfg, a),
        Command::MineRules(a) => mine_rules(cfg, a),
        Command::RunAgent(a) => run_agent(cfg, a.env),
        Command::Selflearn(a) => selflearn(cfg, a),
        Command::Evaluate(a) => evaluate_cmd(cfg, a),
        Command::CommitTriples(a) => commit_triples(cfg, a),
        Command::Synth(a) => synth(cfg, a),
    }
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn set_path(slot: &mut Option<PathBuf>, flag: Option<PathBuf>) {
    if flag.is_some() {
        *slot = flag;
    }
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json value serializes"));
}

fn create_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(anyhow!("cannot create {}: {e}", dir.display())))
}

fn create_parent(path: &Path) -> CliResult {
    match path.parent().filter(|p| !p.as_os_str().is_empty()) {
        Some(dir) => create_dir(dir),
        None => Ok(()),
    }
}

/// Output directory from the flag or `paths.output`.
fn output_dir(cfg: &RunConfig) -> CliResult<PathBuf> {
    Ok(require_set("output directory (--out or paths.output)", cfg.paths.output.as_deref())?)
}

fn load_graph(cfg: &RunConfig) -> CliResult<KnowledgeGraph> {
    let path = require_existing("knowledge graph", cfg.paths.kg.as_deref())?;
    let (g, report) = load_kg(&path).invalid()?;
    info!(path = %path.display(), triples = report.unique_triples, duplicates = report.duplicates, "graph loaded");
    Ok(g)
}

fn load_questions(what: &str, path: Option<&Path>) -> CliResult<Vec<QuestionRecord>> {
    let path = require_existing(what, path)?;
    read_questions(&path).invalid()
}

fn build_kg(mut cfg: RunConfig, a: BuildKgArgs) -> CliResult {
    set_path(&mut cfg.paths.kg, a.kg);
    cfg.validate()?;
    let out = match a.out {
        Some(p) => p,
        None => output_dir(&cfg)?.join("kg.tsv"),
    };
    let path = require_existing("knowledge graph", cfg.paths.kg.as_deref())?;
    let (g, report) = load_kg(&path).invalid()?;
    create_parent(&out)?;
    g.write_tsv(&out).runtime()?;
    print_json(&json!({
        "out": out.display().to_string(),
        "lines": report.lines,
        "triples": report.unique_triples,
        "duplicates": report.duplicates,
        "entities": report.entities,
        "relations": report.relations,
    }));
    Ok(())
}

fn make_incomplete(mut cfg: RunConfig, a: MakeIncompleteArgs) -> CliResult {
    set_path(&mut cfg.paths.kg, a.kg);
    set_path(&mut cfg.paths.questions, a.questions);
    set_path(&mut cfg.paths.output, a.out);
    set(&mut cfg.params.removal_ratio, a.ratio);
    set(&mut cfg.params.max_len, a.max_len);
    cfg.validate()?;
    let out = output_dir(&cfg)?;
    let g = load_graph(&cfg)?;
    let questions = load_questions("questions", cfg.paths.questions.as_deref())?;
    let p = &cfg.params;
    let inc = construct_incomplete_kg(&g, &questions, p.removal_ratio, p.seed, p.max_len).invalid()?;
    create_dir(&out)?;
    inc.graph.write_tsv(out.join("kg.tsv")).runtime()?;
    write_triples_tsv(out.join("removed.tsv"), &inc.removed).runtime()?;
    print_json(&json!({
        "out": out.display().to_string(),
        "candidates": inc.candidates,
        "removed": inc.removed.len(),
        "triples_before": g.len(),
        "triples_after": inc.graph.len(),
        "coverage_before": path_coverage(&g, &questions, p.max_len).coverage,
        "coverage_after": path_coverage(&inc.graph, &questions, p.max_len).coverage,
        "warnings": inc.warnings.len(),
    }));
    Ok(())
}

fn mine_rules(mut cfg: RunConfig, a: MineRulesArgs) -> CliResult {
    set_path(&mut cfg.paths.kg, a.kg);
    set_path(&mut cfg.paths.train_questions, a.questions);
    set(&mut cfg.params.m, a.m);
    set(&mut cfg.params.max_len, a.max_len);
    cfg.validate()?;
    let out = match a.out.or_else(|| cfg.paths.demonstrations.clone()) {
        Some(p) => p,
        None => output_dir(&cfg)?.join("demonstrations.jsonl"),
    };
    let g = load_graph(&cfg)?;
    let seeds = cfg.paths.train_questions.as_deref().or(cfg.paths.questions.as_deref());
    let questions = load_questions("seed questions", seeds)?;
    let pool = DemonstrationPool::mine(&questions, &g, cfg.planner_config()).runtime()?;
    create_parent(&out)?;
    write_jsonl(&out, pool.entries()).runtime()?;
    let with_rules = pool.entries().iter().filter(|e| !e.rules.is_empty()).count();
    let rules: usize = pool.entries().iter().map(|e| e.rules.len()).sum();
    print_json(&json!({
        "out": out.display().to_string(),
        "questions": questions.len(),
        "with_rules": with_rules,
        "rules": rules,
    }));
    Ok(())
}

fn apply_env_args(cfg: &mut RunConfig, a: EnvArgs) {
    let p = &mut cfg.paths;
    set_path(&mut p.kg, a.kg);
    set_path(&mut p.questions, a.questions);
    set_path(&mut p.corpus, a.corpus);
    set_path(&mut p.templates, a.templates);
    set_path(&mut p.demonstrations, a.demonstrations);
    set_path(&mut p.output, a.out);
    set_path(&mut cfg.policy.script, a.script);
    set_path(&mut cfg.policy.replay, a.replay);
    if let Some(b) = a.policy {
        cfg.policy.backend = match b {
            BackendArg::Http => Backend::Http,
            BackendArg::Scripted => Backend::Scripted,
            BackendArg::Replay => Backend::Replay,
        };
    }
    set(&mut cfg.policy.http.endpoint, a.endpoint);
    set(&mut cfg.policy.http.model, a.model);
    set(&mut cfg.params.max_steps, a.max_steps);
    set(&mut cfg.params.k, a.k);
    set(&mut cfg.params.concurrency, a.concurrency);
    if a.plan_on_reset {
        cfg.params.plan_on_reset = true;
    }
}

/// Everything an environment borrows, loaded once per run.
struct Loaded {
    graph: KnowledgeGraph,
    questions: Vec<QuestionRecord>,
    templates: Templates,
    demonstrations: Option<DemonstrationPool>,
    retriever: Option<CorpusRetriever>,
}

impl Loaded {
    fn load(cfg: &RunConfig) -> CliResult<Self> {
        let graph = load_graph(cfg)?;
        let questions = load_questions("questions", cfg.paths.questions.as_deref())?;
        let templates = match &cfg.paths.templates {
            Some(dir) => Templates::load_dir(require_existing("templates directory", Some(dir))?).invalid()?,
            None => Templates::default(),
        };
        let demonstrations = match &cfg.paths.demonstrations {
            Some(path) => {
                let path = require_existing("demonstrations", Some(path))?;
                let entries: Vec<DemoCacheEntry> = read_jsonl(&path).invalid()?;
                Some(DemonstrationPool::from_cache(entries).invalid()?)
            }
            None => None,
        };
        let retriever = match &cfg.paths.corpus {
            Some(path) => {
                let path = require_existing("corpus", Some(path))?;
                let docs: Vec<Document> = read_jsonl(&path).invalid()?;
                Some(CorpusRetriever::new(docs).invalid()?)
            }
            None => None,
        };
        Ok(Self {
            graph,
            questions,
            templates,
            demonstrations,
            retriever,
        })
    }

    fn resources(&self, cfg: &RunConfig) -> EnvResources<'_> {
        let mut r = EnvResources::new(&self.graph, &self.templates);
        r.demonstrations = self.demonstrations.as_ref();
        r.retriever = self.retriever.as_ref().map(|r| r as &dyn Retriever);
        r.config = cfg.env_config();
        r
    }
}

fn make_policy(cfg: &RunConfig) -> CliResult<Arc<dyn Policy>> {
    Ok(match cfg.policy.backend {
        Backend::Scripted => {
            let path = require_existing("policy script (--script)", cfg.policy.script.as_deref())?;
            Arc::new(ScriptedPolicy::from_file(&path).invalid()?)
        }
        Backend::Replay => {
            let path = require_existing("replay trajectories (--replay)", cfg.policy.replay.as_deref())?;
            Arc::new(ReplayPolicy::from_trajectories(read_trajectories(&path).invalid()?))
        }
        Backend::Http => Arc::new(HttpPolicy::new(cfg.policy.http.clone()).invalid()?),
    })
}

fn run_agent(mut cfg: RunConfig, a: EnvArgs) -> CliResult {
    apply_env_args(&mut cfg, a);
    cfg.validate()?;
    let out = output_dir(&cfg)?;
    let loaded = Loaded::load(&cfg)?;
    let policy = make_policy(&cfg)?;
    let resources = loaded.resources(&cfg);
    let env = resources.with_policy(policy.as_ref());
    let ex = explore(&env, &loaded.questions, cfg.params.concurrency);

    create_dir(&out)?;
    let trajectories: Vec<Trajectory> = ex.trajectories.iter().map(|rt| rt.trajectory.clone()).collect();
    write_trajectories(out.join("trajectories.jsonl"), &trajectories).runtime()?;
    let extracted: BTreeSet<LabeledTriple> = ex
        .trajectories
        .iter()
        .flat_map(|rt| rt.extracted.iter().cloned())
        .filter(|t| !loaded.graph.contains_labels(t))
        .collect();
    write_triples_tsv(out.join("extracted.tsv"), &extracted).runtime()?;
    write_jsonl(out.join("failures.jsonl"), &ex.failures).runtime()?;
    print_json(&json!({
        "out": out.display().to_string(),
        "episodes": ex.trajectories.len(),
        "failures": ex.failures.len(),
        "mean_reward": ex.mean_reward(),
        "extracted": extracted.len(),
    }));
    if ex.trajectories.is_empty() && !ex.failures.is_empty() {
        return Err(CliError::Runtime(anyhow!(
            "every episode failed; first error: {}",
            ex.failures[0].error
        )));
    }
    Ok(())
}

fn selflearn(mut cfg: RunConfig, a: SelflearnArgs) -> CliResult {
    apply_env_args(&mut cfg, a.env);
    set_path(&mut cfg.paths.validation, a.validation);
    set(&mut cfg.params.iterations, a.iterations);
    set(&mut cfg.params.epsilon, a.epsilon);
    if a.baseline {
        cfg.params.baseline_validation = true;
    }
    cfg.validate()?;
    let out = output_dir(&cfg)?;
    let loaded = Loaded::load(&cfg)?;
    let validation = match &cfg.paths.validation {
        Some(p) => load_questions("validation questions", Some(p))?,
        None => loaded.questions.clone(),
    };
    let initial = make_policy(&cfg)?;
    let mut trainer: Box<dyn TrainStep> = match a.trainer {
        TrainerArg::Replay => Box::new(ReplayTrainer::new()),
        TrainerArg::Command => {
            let program = a
                .train_program
                .ok_or_else(|| CliError::Invalid(anyhow!("--trainer command needs --train-program")))?;
            let http = cfg.policy.http.clone();
            Box::new(ExternalTrainer::new(program, a.train_args, move |report| {
                let mut c = http.clone();
                c.model = report.checkpoint.clone();
                HttpPolicy::new(c).map(|p| Arc::new(p) as Arc<dyn Policy>).map_err(|e| e.to_string())
            }))
        }
    };
    let config = IterateConfig {
        max_iterations: cfg.params.iterations,
        epsilon: cfg.params.epsilon,
        concurrency: cfg.params.concurrency,
        baseline_validation: cfg.params.baseline_validation,
        out_dir: out.clone(),
    };
    let resources = loaded.resources(&cfg);
    let report = iterate(&resources, initial, &loaded.questions, &validation, trainer.as_mut(), &config).runtime()?;
    let value = serde_json::to_value(&report).expect("report serializes");
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&value).expect("json") + "\n")
        .map_err(|e| CliError::Runtime(anyhow!("cannot write report: {e}")))?;
    print_json(&value);
    if report.stop == StopReason::Failed {
        return Err(CliError::Runtime(anyhow!(
            "self-learning stopped early: {}",
            report.error.unwrap_or_default()
        )));
    }
    Ok(())
}

fn evaluate_cmd(mut cfg: RunConfig, a: EvaluateArgs) -> CliResult {
    set_path(&mut cfg.paths.questions, a.questions);
    set_path(&mut cfg.paths.kg, a.kg);
    set_path(&mut cfg.paths.output, a.out);
    set(&mut cfg.params.max_len, a.max_len);
    cfg.validate()?;
    let out = output_dir(&cfg)?;
    let questions = load_questions("questions", cfg.paths.questions.as_deref())?;
    let path = require_existing("trajectories", Some(&a.trajectories))?;
    let trajectories = read_trajectories(&path).invalid()?;
    let metrics = evaluate(&questions, &trajectories).invalid()?;
    let errors = error_report(&trajectories);
    let coverage = match cfg.paths.kg {
        Some(_) => Some(path_coverage(&load_graph(&cfg)?, &questions, cfg.params.max_len)),
        None => None,
    };
    create_dir(&out)?;
    let write = |name: &str, text: String| {
        fs::write(out.join(name), text).map_err(|e| CliError::Runtime(anyhow!("cannot write {name}: {e}")))
    };
    write("metrics.csv", metrics.to_csv())?;
    write("errors.tsv", errors.to_tsv())?;
    let mut summary = metrics.summary();
    summary["errors"] = json!({
        "failures": errors.failures,
        "counts": errors.counts,
        "percent": errors.percentages,
    });
    if let Some(c) = &coverage {
        summary["coverage"] = json!({ "coverage": c.coverage, "covered": c.covered, "questions": c.questions });
    }
    write("summary.json", serde_json::to_string_pretty(&summary).expect("json") + "\n")?;
    print_json(&summary);
    Ok(())
}

fn commit_triples(mut cfg: RunConfig, a: CommitTriplesArgs) -> CliResult {
    set_path(&mut cfg.paths.kg, a.kg);
    cfg.validate()?;
    let mut g = load_graph(&cfg)?;
    let path = require_existing("triples", Some(&a.triples))?;
    let triples = read_triples_tsv(&path).invalid()?;
    let mut added = 0;
    for t in &triples {
        if g.add_triple(t).invalid()? {
            added += 1;
        }
    }
    let out = match a.out {
        Some(p) => p,
        None => require_set("knowledge graph", cfg.paths.kg.as_deref())?,
    };
    create_parent(&out)?;
    g.write_tsv(&out).runtime()?;
    print_json(&json!({
        "out": out.display().to_string(),
        "read": triples.len(),
        "added": added,
        "already_present": triples.len() - added,
        "triples": g.len(),
    }));
    Ok(())
}

fn synth(cfg: RunConfig, a: SynthArgs) -> CliResult {
    if a.hops == 0 || a.max_answers == 0 || (a.unreachable > 0 && a.hops < 2) {
        return Err(CliError::Invalid(anyhow!(
            "hops and max-answers must be at least 1, and unreachable questions need at least 2 hops"
        )));
    }
    let spec = SyntheticSpec {
        questions: a.questions,
        hops: a.hops,
        max_answers: a.max_answers,
        unreachable: a.unreachable,
        noise_entities: a.noise_entities,
        noise_triples: a.noise_triples,
        seed: cfg.params.seed,
        ..SyntheticSpec::default()
    };
    let ds = SyntheticDataset::generate(&spec);
    ds.write_to(&a.out).runtime()?;
    print_json(&json!({
        "out": a.out.display().to_string(),
        "triples": ds.triples.len(),
        "questions": ds.questions.len(),
        "documents": ds.documents.len(),
    }));
    Ok(())
}
