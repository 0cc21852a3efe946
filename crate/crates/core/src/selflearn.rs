//! Exploration, refinement, merging, SFT emission and the outer loop.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{info, warn};

use crate::agent::{run_episode, Episode, EpisodeError};
use crate::data::{DataError, QuestionRecord};
use crate::env::{EnvResources, Environment};
use crate::eval::{evaluate, normalize_label, EvalError, MetricsReport};
use crate::kg::LabeledTriple;
use crate::policy::{build_agent_prompt, ChatMessage, Policy, PolicyContext, PolicyRequest, Purpose, ReplayPolicy, Role};
use crate::template::{render, TemplateError};
use crate::trajectory::{write_trajectories, Trajectory};

#[derive(Debug, Error)]
pub enum SelfLearnError {
    #[error("explored and refined sets are misaligned: {0}")]
    Misaligned(String),
    #[error("no trajectories survived the merge; nothing to train on")]
    EmptyDataset,
    #[error("train step failed: {0}")]
    Train(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SelfLearnError + '_ {
    move |source| SelfLearnError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Recall of the predicted answers against gold, on normalized labels.
pub fn compute_reward<P: AsRef<str>, G: AsRef<str>>(predicted: &[P], gold: &[G]) -> Result<f64, EvalError> {
    let gold: std::collections::BTreeSet<String> = gold.iter().map(|g| normalize_label(g.as_ref())).collect();
    if gold.is_empty() {
        return Err(EvalError::EmptyGold(String::new()));
    }
    let predicted: std::collections::BTreeSet<String> =
        predicted.iter().map(|p| normalize_label(p.as_ref())).collect();
    let hit = predicted.intersection(&gold).count();
    Ok(hit as f64 / gold.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Explored,
    Refined,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RewardedTrajectory {
    pub trajectory: Trajectory,
    pub origin: Origin,
    /// Initial observation of the episode, needed to rebuild its prompts.
    pub task: String,
    pub extracted: Vec<LabeledTriple>,
}

impl RewardedTrajectory {
    pub fn from_episode(ep: Episode, origin: Origin) -> Self {
        let mut trajectory = ep.trajectory;
        trajectory.refined = origin == Origin::Refined;
        Self {
            trajectory,
            origin,
            task: ep.task,
            extracted: ep.extracted,
        }
    }

    pub fn reward(&self) -> f64 {
        self.trajectory.reward
    }

    pub fn id(&self) -> &str {
        &self.trajectory.id
    }
}

/// Maps `f` over `items` on up to `concurrency` threads; results keep the
/// input order.
pub fn parallel_map<T, R, F>(items: &[T], concurrency: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = concurrency.max(1).min(items.len().max(1));
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("result slots")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots")
        .into_iter()
        .map(|r| r.expect("every item is processed"))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeFailure {
    pub id: String,
    pub error: String,
    pub policy_unavailable: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Exploration {
    /// In question order; failed episodes are absent.
    pub trajectories: Vec<RewardedTrajectory>,
    pub failures: Vec<EpisodeFailure>,
}

impl Exploration {
    /// Mean reward over completed episodes; 0 when there are none.
    pub fn mean_reward(&self) -> f64 {
        mean_reward(&self.trajectories)
    }
}

pub fn mean_reward(ts: &[RewardedTrajectory]) -> f64 {
    if ts.is_empty() {
        0.0
    } else {
        ts.iter().map(RewardedTrajectory::reward).sum::<f64>() / ts.len() as f64
    }
}

fn failure(e: &EpisodeError, id: &str) -> EpisodeFailure {
    EpisodeFailure {
        id: id.to_string(),
        error: e.to_string(),
        policy_unavailable: e.is_policy_unavailable(),
    }
}

/// One episode per question. Failures are isolated and reported apart.
pub fn explore(env: &Environment<'_>, questions: &[QuestionRecord], concurrency: usize) -> Exploration {
    let results = parallel_map(questions, concurrency, |q| run_episode(env, q, None));
    let mut out = Exploration::default();
    for (q, r) in questions.iter().zip(results) {
        match r {
            Ok(ep) => out.trajectories.push(RewardedTrajectory::from_episode(ep, Origin::Explored)),
            Err(e) => {
                warn!(episode = %q.id, error = %e, "exploration episode failed");
                out.failures.push(failure(&e, &q.id));
            }
        }
    }
    out
}

/// Plain-text rendering of a trajectory for the refinement prompt.
pub fn render_trajectory(task: &str, t: &Trajectory) -> String {
    let mut s = task.to_string();
    if !t.plan.is_empty() {
        s.push_str(&format!("\nPlan:\n{}", t.plan.join("\n")));
    }
    for step in &t.steps {
        s.push_str(&format!(
            "\nThought: {}\nAction: {}\nObservation: {}",
            step.thought, step.action_raw, step.observation
        ));
    }
    s.push_str(&format!("\nFinal answers: {}", t.final_answers.join(", ")));
    s
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Refinement {
    /// Aligned with the explored input.
    pub trajectories: Vec<RewardedTrajectory>,
    /// Items that fell back to a copy of the original.
    pub fallbacks: usize,
}

/// Asks the policy to critique each explored trajectory, then re-runs the
/// episode with the critique in the system prompt. Any failure keeps a
/// copy of the original, marked refined.
pub fn refine(
    env: &Environment<'_>,
    questions: &[QuestionRecord],
    explored: &[RewardedTrajectory],
    concurrency: usize,
) -> Refinement {
    let by_id: HashMap<&str, &QuestionRecord> = questions.iter().map(|q| (q.id.as_str(), q)).collect();
    let results = parallel_map(explored, concurrency, |mu| -> Option<RewardedTrajectory> {
        let q = by_id.get(mu.id())?;
        let prompt = render(
            "refinement",
            &env.templates.refinement,
            &[
                ("trajectory", &render_trajectory(&mu.task, &mu.trajectory)),
                ("reward", &format!("{:.2}", mu.reward())),
            ],
        )
        .ok()?;
        let messages = [ChatMessage::user(prompt)];
        let critique = env
            .policy
            .generate(&PolicyRequest {
                purpose: Purpose::Refine,
                episode_id: mu.id(),
                step: 0,
                messages: &messages,
            })
            .map_err(|e| warn!(episode = %mu.id(), error = %e, "critique failed"))
            .ok()?;
        let ep = run_episode(env, q, Some(critique))
            .map_err(|e| warn!(episode = %mu.id(), error = %e, "refined episode failed"))
            .ok()?;
        Some(RewardedTrajectory::from_episode(ep, Origin::Refined))
    });
    let mut out = Refinement::default();
    for (mu, r) in explored.iter().zip(results) {
        let refined = r.unwrap_or_else(|| {
            out.fallbacks += 1;
            let mut copy = mu.clone();
            copy.origin = Origin::Refined;
            copy.trajectory.refined = true;
            copy
        });
        out.trajectories.push(refined);
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MergedSet {
    pub survivors: Vec<RewardedTrajectory>,
    /// Pairs dropped because both rewards were zero.
    pub filtered: usize,
}

/// Keeps the higher-reward trajectory of each pair; on equal positive
/// rewards the one with fewer steps, and the refined one when steps tie
/// too. Pairs where both rewards are zero are dropped.
pub fn merge(explored: &[RewardedTrajectory], refined: &[RewardedTrajectory]) -> Result<MergedSet, SelfLearnError> {
    if explored.len() != refined.len() {
        return Err(SelfLearnError::Misaligned(format!(
            "{} explored vs {} refined",
            explored.len(),
            refined.len()
        )));
    }
    let mut out = MergedSet::default();
    for (mu, hat) in explored.iter().zip(refined) {
        if mu.id() != hat.id() {
            return Err(SelfLearnError::Misaligned(format!("`{}` paired with `{}`", mu.id(), hat.id())));
        }
        let (r, r_hat) = (mu.reward(), hat.reward());
        let keep = if r > r_hat {
            mu
        } else if r < r_hat {
            hat
        } else if r == 0.0 {
            out.filtered += 1;
            continue;
        } else if mu.trajectory.len() < hat.trajectory.len() {
            mu
        } else {
            hat
        };
        out.survivors.push(keep.clone());
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftMessage {
    pub role: Role,
    pub content: String,
    pub train: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftExample {
    pub id: String,
    pub messages: Vec<SftMessage>,
}

/// The dialogue the executor saw on its final turn, minus the trailing
/// observation; assistant turns are the training targets.
pub fn sft_example(system: &str, rt: &RewardedTrajectory) -> SftExample {
    let ctx = PolicyContext::from_trajectory(system, rt.task.clone(), &rt.trajectory);
    let mut messages = build_agent_prompt(&ctx);
    if !rt.trajectory.is_empty() {
        messages.pop();
    }
    SftExample {
        id: rt.id().to_string(),
        messages: messages
            .into_iter()
            .map(|m| SftMessage {
                train: m.role == Role::Assistant,
                role: m.role,
                content: m.content,
            })
            .collect(),
    }
}

/// Writes one example per survivor as JSONL; returns the count.
pub fn emit_sft(merged: &MergedSet, system: &str, path: &Path) -> Result<usize, SelfLearnError> {
    if merged.survivors.is_empty() {
        return Err(SelfLearnError::EmptyDataset);
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for rt in &merged.survivors {
        let line = serde_json::to_string(&sft_example(system, rt)).expect("SFT example serializes");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(merged.survivors.len())
}

/// What the train step hands back to the loop.
pub struct TrainOutcome {
    pub policy: Arc<dyn Policy>,
    pub checkpoint: Option<String>,
    pub final_loss: Option<f64>,
    pub trainable_tokens: Option<u64>,
}

pub struct TrainInput<'a> {
    pub iteration: usize,
    pub merged: &'a MergedSet,
    pub sft_path: &'a Path,
    pub out_dir: &'a Path,
}

pub trait TrainStep {
    fn train(&mut self, input: &TrainInput<'_>) -> Result<TrainOutcome, SelfLearnError>;
}

/// Stands in for fine-tuning: survivors go into a replay store, and the
/// replay policy is the "trained" model.
#[derive(Debug, Default)]
pub struct ReplayTrainer {
    store: Arc<ReplayPolicy>,
}

impl ReplayTrainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn store(&self) -> &Arc<ReplayPolicy> {
        &self.store
    }
}

impl TrainStep for ReplayTrainer {
    fn train(&mut self, input: &TrainInput<'_>) -> Result<TrainOutcome, SelfLearnError> {
        self.store
            .extend(input.merged.survivors.iter().map(|rt| rt.trajectory.clone()));
        Ok(TrainOutcome {
            policy: self.store.clone(),
            checkpoint: None,
            final_loss: None,
            trainable_tokens: None,
        })
    }
}

/// JSON the external trainer prints as its last line of output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerReport {
    pub checkpoint: String,
    pub final_loss: f64,
    pub trainable_tokens: u64,
}

type PolicyFactory = dyn Fn(&TrainerReport) -> Result<Arc<dyn Policy>, String>;

/// Runs a training command. `{sft}`, `{out}` and `{iteration}` in the
/// arguments are replaced; the policy for the next round is built from the
/// reported checkpoint.
pub struct ExternalTrainer {
    pub program: String,
    pub args: Vec<String>,
    make_policy: Box<PolicyFactory>,
}

impl ExternalTrainer {
    pub fn new<F>(program: impl Into<String>, args: Vec<String>, make_policy: F) -> Self
    where
        F: Fn(&TrainerReport) -> Result<Arc<dyn Policy>, String> + 'static,
    {
        Self {
            program: program.into(),
            args,
            make_policy: Box::new(make_policy),
        }
    }
}

impl TrainStep for ExternalTrainer {
    fn train(&mut self, input: &TrainInput<'_>) -> Result<TrainOutcome, SelfLearnError> {
        let args: Vec<String> = self
            .args
            .iter()
            .map(|a| {
                a.replace("{sft}", &input.sft_path.display().to_string())
                    .replace("{out}", &input.out_dir.display().to_string())
                    .replace("{iteration}", &input.iteration.to_string())
            })
            .collect();
        info!(program = %self.program, ?args, "running train step");
        let output = Command::new(&self.program)
            .args(&args)
            .output()
            .map_err(|e| SelfLearnError::Train(format!("cannot run `{}`: {e}", self.program)))?;
        if !output.status.success() {
            return Err(SelfLearnError::Train(format!(
                "`{}` exited with {}: {}",
                self.program,
                output.status,
                String::from_utf8_lossy(&output.stderr).trim()
            )));
        }
        let stdout = String::from_utf8_lossy(&output.stdout);
        let last = stdout.lines().rev().find(|l| !l.trim().is_empty()).unwrap_or("");
        let report: TrainerReport = serde_json::from_str(last)
            .map_err(|e| SelfLearnError::Train(format!("unreadable trainer report `{last}`: {e}")))?;
        let policy = (self.make_policy)(&report).map_err(SelfLearnError::Train)?;
        Ok(TrainOutcome {
            policy,
            checkpoint: Some(report.checkpoint),
            final_loss: Some(report.final_loss),
            trainable_tokens: Some(report.trainable_tokens),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterateConfig {
    pub max_iterations: usize,
    /// Minimum validation Hits@1 gain, in percentage points, to continue.
    pub epsilon: f64,
    pub concurrency: usize,
    /// Validate the initial policy so the first iteration has a reference.
    pub baseline_validation: bool,
    pub out_dir: PathBuf,
}

impl Default for IterateConfig {
    fn default() -> Self {
        Self {
            max_iterations: 2,
            epsilon: 0.5,
            concurrency: 1,
            baseline_validation: false,
            out_dir: PathBuf::from("selflearn"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub hits1: f64,
    pub accuracy: f64,
    pub f1: f64,
}

impl From<&MetricsReport> for Validation {
    fn from(m: &MetricsReport) -> Self {
        Self {
            hits1: m.hits1,
            accuracy: m.accuracy,
            f1: m.f1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub trajectories: String,
    pub sft: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    /// Mean outcome reward of this round's exploration.
    pub mean_reward: f64,
    pub filtered: usize,
    pub survivors: usize,
    pub validation: Validation,
    pub artifacts: Artifacts,
    pub explored: usize,
    pub policy_failures: usize,
    pub refine_fallbacks: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_loss: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIterations,
    Converged,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfLearnReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<Validation>,
    pub iterations: Vec<IterationReport>,
    pub stop: StopReason,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Runs every validation question and scores the answers.
pub fn validate(
    env: &Environment<'_>,
    validation: &[QuestionRecord],
    concurrency: usize,
) -> Result<MetricsReport, SelfLearnError> {
    let ex = explore(env, validation, concurrency);
    let ts: Vec<Trajectory> = ex.trajectories.into_iter().map(|rt| rt.trajectory).collect();
    Ok(evaluate(validation, &ts)?)
}

fn write_rewarded(path: &Path, ts: &[RewardedTrajectory]) -> Result<(), SelfLearnError> {
    let plain: Vec<Trajectory> = ts.iter().map(|rt| rt.trajectory.clone()).collect();
    write_trajectories(path, &plain)?;
    Ok(())
}

/// explore, refine, merge, emit, train, validate; repeated until the
/// validation gain drops below epsilon or the iteration budget runs out.
/// A failing round ends the loop with the rounds completed so far.
pub fn iterate(
    resources: &EnvResources<'_>,
    initial: Arc<dyn Policy>,
    questions: &[QuestionRecord],
    validation: &[QuestionRecord],
    trainer: &mut dyn TrainStep,
    config: &IterateConfig,
) -> Result<SelfLearnReport, SelfLearnError> {
    let system = resources.with_policy(initial.as_ref()).system_prompt()?;
    fs::create_dir_all(&config.out_dir).map_err(io_err(&config.out_dir))?;
    let mut policy = initial;
    let baseline = if config.baseline_validation {
        let m = validate(&resources.with_policy(policy.as_ref()), validation, config.concurrency)?;
        info!(hits1 = m.hits1, "baseline validation");
        Some(Validation::from(&m))
    } else {
        None
    };
    let mut report = SelfLearnReport {
        baseline,
        iterations: Vec::new(),
        stop: StopReason::MaxIterations,
        error: None,
    };
    let mut previous = baseline.map(|b| b.hits1);
    for iteration in 1..=config.max_iterations {
        let dir = config.out_dir.join(format!("iter{iteration}"));
        let round = run_round(resources, &policy, questions, validation, trainer, config, &system, iteration, &dir);
        let (it_report, next_policy) = match round {
            Ok(r) => r,
            Err(e) => {
                warn!(iteration, error = %e, "self-learning round failed");
                report.stop = StopReason::Failed;
                report.error = Some(e.to_string());
                return Ok(report);
            }
        };
        let hits1 = it_report.validation.hits1;
        info!(
            iteration,
            mean_reward = it_report.mean_reward,
            survivors = it_report.survivors,
            filtered = it_report.filtered,
            hits1,
            "self-learning round finished"
        );
        report.iterations.push(it_report);
        policy = next_policy;
        if let Some(prev) = previous.filter(|_| iteration < config.max_iterations) {
            if (hits1 - prev) * 100.0 < config.epsilon {
                report.stop = StopReason::Converged;
                break;
            }
        }
        previous = Some(hits1);
    }
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn run_round(
    resources: &EnvResources<'_>,
    policy: &Arc<dyn Policy>,
    questions: &[QuestionRecord],
    validation: &[QuestionRecord],
    trainer: &mut dyn TrainStep,
    config: &IterateConfig,
    system: &str,
    iteration: usize,
    dir: &Path,
) -> Result<(IterationReport, Arc<dyn Policy>), SelfLearnError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let env = resources.with_policy(policy.as_ref());
    let explored = explore(&env, questions, config.concurrency);
    let refined = refine(&env, questions, &explored.trajectories, config.concurrency);
    let merged = merge(&explored.trajectories, &refined.trajectories)?;
    write_rewarded(&dir.join("explored.jsonl"), &explored.trajectories)?;
    write_rewarded(&dir.join("refined.jsonl"), &refined.trajectories)?;
    let traj_path = dir.join("trajectories.jsonl");
    write_rewarded(&traj_path, &merged.survivors)?;
    let sft_path = dir.join("sft.jsonl");
    emit_sft(&merged, system, &sft_path)?;
    let outcome = trainer.train(&TrainInput {
        iteration,
        merged: &merged,
        sft_path: &sft_path,
        out_dir: dir,
    })?;
    let metrics = validate(&resources.with_policy(outcome.policy.as_ref()), validation, config.concurrency)?;
    let report = IterationReport {
        iteration,
        mean_reward: explored.mean_reward(),
        filtered: merged.filtered,
        survivors: merged.survivors.len(),
        validation: Validation::from(&metrics),
        artifacts: Artifacts {
            trajectories: traj_path.display().to_string(),
            sft: sft_path.display().to_string(),
        },
        explored: explored.trajectories.len(),
        policy_failures: explored.failures.iter().filter(|f| f.policy_unavailable).count(),
        refine_fallbacks: refined.fallbacks,
        checkpoint: outcome.checkpoint,
        final_loss: outcome.final_loss,
    };
    Ok((report, outcome.policy))
}
