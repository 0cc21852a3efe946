use std::collections::{HashMap, VecDeque};
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use super::{render_step, Policy, PolicyError, PolicyRequest, Purpose};
use crate::data::{read_jsonl, DataError};
use crate::trajectory::Trajectory;

/// What [`ReplayPolicy`] answers for questions it has no trajectory for.
pub const REPLAY_FALLBACK: &str = "Action: finish(unknown)";

const REPLAY_CRITIQUE: &str = "Repeat the best attempt recorded so far.";

/// One line of a script file. Lines without an id feed the shared queue.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub outputs: Vec<String>,
}

/// Pops queued outputs in order. Episodes with their own queue read from
/// it; everything else reads from the shared queue.
#[derive(Debug, Default)]
pub struct ScriptedPolicy {
    shared: Mutex<VecDeque<String>>,
    per_episode: Mutex<HashMap<String, VecDeque<String>>>,
}

impl ScriptedPolicy {
    pub fn new<I, S>(outputs: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            shared: Mutex::new(outputs.into_iter().map(Into::into).collect()),
            per_episode: Mutex::default(),
        }
    }

    pub fn from_entries(entries: Vec<ScriptEntry>) -> Self {
        let policy = Self::default();
        for entry in entries {
            match entry.id {
                Some(id) => policy
                    .per_episode
                    .lock()
                    .expect("script lock")
                    .entry(id)
                    .or_default()
                    .extend(entry.outputs),
                None => policy.shared.lock().expect("script lock").extend(entry.outputs),
            }
        }
        policy
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, DataError> {
        Ok(Self::from_entries(read_jsonl(path)?))
    }

    pub fn push_for(&self, episode_id: &str, output: impl Into<String>) {
        self.per_episode
            .lock()
            .expect("script lock")
            .entry(episode_id.to_string())
            .or_default()
            .push_back(output.into());
    }

    /// Outputs not yet consumed, across all queues.
    pub fn remaining(&self) -> usize {
        let shared = self.shared.lock().expect("script lock").len();
        let keyed: usize = self.per_episode.lock().expect("script lock").values().map(VecDeque::len).sum();
        shared + keyed
    }
}

impl Policy for ScriptedPolicy {
    fn name(&self) -> &str {
        "scripted"
    }

    fn generate(&self, request: &PolicyRequest<'_>) -> Result<String, PolicyError> {
        {
            let mut keyed = self.per_episode.lock().expect("script lock");
            if let Some(queue) = keyed.get_mut(request.episode_id) {
                return queue.pop_front().ok_or_else(|| {
                    PolicyError::Unavailable(format!("script for `{}` is exhausted", request.episode_id))
                });
            }
        }
        self.shared
            .lock()
            .expect("script lock")
            .pop_front()
            .ok_or_else(|| PolicyError::Unavailable("script is exhausted".into()))
    }
}

type GenerateFn = dyn Fn(&PolicyRequest<'_>) -> Result<String, PolicyError> + Send + Sync;

/// A policy backed by a closure.
pub struct FnPolicy {
    name: String,
    f: Box<GenerateFn>,
}

impl FnPolicy {
    pub fn new<F>(name: impl Into<String>, f: F) -> Self
    where
        F: Fn(&PolicyRequest<'_>) -> Result<String, PolicyError> + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            f: Box::new(f),
        }
    }
}

impl std::fmt::Debug for FnPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FnPolicy").field("name", &self.name).finish()
    }
}

impl Policy for FnPolicy {
    fn name(&self) -> &str {
        &self.name
    }

    fn generate(&self, request: &PolicyRequest<'_>) -> Result<String, PolicyError> {
        (self.f)(request)
    }
}

/// Sends each purpose to its own policy, falling back to `default`.
pub struct RoutedPolicy {
    default: Arc<dyn Policy>,
    routes: Vec<(Purpose, Arc<dyn Policy>)>,
}

impl RoutedPolicy {
    pub fn new(default: Arc<dyn Policy>) -> Self {
        Self {
            default,
            routes: Vec::new(),
        }
    }

    pub fn route(mut self, purpose: Purpose, policy: Arc<dyn Policy>) -> Self {
        self.routes.retain(|(p, _)| *p != purpose);
        self.routes.push((purpose, policy));
        self
    }
}

impl Policy for RoutedPolicy {
    fn name(&self) -> &str {
        self.default.name()
    }

    fn generate(&self, request: &PolicyRequest<'_>) -> Result<String, PolicyError> {
        let target = self
            .routes
            .iter()
            .find(|(p, _)| *p == request.purpose)
            .map(|(_, policy)| policy)
            .unwrap_or(&self.default);
        target.generate(request)
    }
}

/// Re-emits the best stored trajectory of each question step by step.
///
/// "Best" means higher reward, then fewer steps; on a full tie the most
/// recently inserted trajectory wins.
#[derive(Debug, Default)]
pub struct ReplayPolicy {
    store: RwLock<HashMap<String, Trajectory>>,
}

impl ReplayPolicy {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_trajectories<I: IntoIterator<Item = Trajectory>>(trajectories: I) -> Self {
        let p = Self::new();
        p.extend(trajectories);
        p
    }

    /// Stores `t` if it beats the current entry for its question.
    pub fn insert(&self, t: Trajectory) -> bool {
        let mut store = self.store.write().expect("replay lock");
        let better = match store.get(&t.id) {
            None => true,
            Some(cur) => t.reward > cur.reward || (t.reward == cur.reward && t.len() <= cur.len()),
        };
        if better {
            store.insert(t.id.clone(), t);
        }
        better
    }

    pub fn extend<I: IntoIterator<Item = Trajectory>>(&self, trajectories: I) {
        for t in trajectories {
            self.insert(t);
        }
    }

    pub fn len(&self) -> usize {
        self.store.read().expect("replay lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, id: &str) -> Option<Trajectory> {
        self.store.read().expect("replay lock").get(id).cloned()
    }

    pub fn snapshot(&self) -> Vec<Trajectory> {
        let store = self.store.read().expect("replay lock");
        let mut all: Vec<Trajectory> = store.values().cloned().collect();
        all.sort_by(|a, b| a.id.cmp(&b.id));
        all
    }
}

/// The extracted-triples part of a wikiSearch observation.
fn extracted_section(observation: &str) -> String {
    match observation.find(crate::env::EXTRACTED_HEADER) {
        Some(at) => observation[at + crate::env::EXTRACTED_HEADER.len()..].trim().to_string(),
        None => String::new(),
    }
}

impl Policy for ReplayPolicy {
    fn name(&self) -> &str {
        "replay"
    }

    fn generate(&self, request: &PolicyRequest<'_>) -> Result<String, PolicyError> {
        let store = self.store.read().expect("replay lock");
        let Some(t) = store.get(request.episode_id) else {
            return Ok(match request.purpose {
                Purpose::Act => REPLAY_FALLBACK.to_string(),
                _ => String::new(),
            });
        };
        let step = t.steps.get(request.step);
        Ok(match request.purpose {
            Purpose::Act => match step {
                Some(s) => render_step(&s.thought, &s.action_raw),
                None => REPLAY_FALLBACK.to_string(),
            },
            Purpose::InitialPlan => t.plan.join("\n"),
            Purpose::Plan => step.map(|s| s.observation.clone()).unwrap_or_default(),
            Purpose::Extract => step.map(|s| extracted_section(&s.observation)).unwrap_or_default(),
            Purpose::Refine => REPLAY_CRITIQUE.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::{ActionRecord, StepRecord, Termination};

    fn req(id: &str, step: usize, purpose: Purpose) -> PolicyRequest<'static> {
        let id: &'static str = Box::leak(id.to_string().into_boxed_str());
        PolicyRequest {
            purpose,
            episode_id: id,
            step,
            messages: &[],
        }
    }

    fn traj(id: &str, reward: f64, steps: usize) -> Trajectory {
        Trajectory {
            id: id.into(),
            question: "q".into(),
            plan: vec![],
            steps: (0..steps)
                .map(|i| StepRecord {
                    thought: format!("t{i}"),
                    action: ActionRecord {
                        name: "finish".into(),
                        args: vec!["a".into()],
                    },
                    action_raw: format!("finish(a{i})"),
                    observation: "o".into(),
                })
                .collect(),
            final_answers: vec![],
            reward,
            termination: Termination::Finish,
            refined: false,
        }
    }

    #[test]
    fn scripted_pops_in_order_then_errors() {
        let p = ScriptedPolicy::new(["a", "b", "c"]);
        for want in ["a", "b", "c"] {
            assert_eq!(p.generate(&req("q", 0, Purpose::Act)).unwrap(), want);
        }
        assert!(matches!(
            p.generate(&req("q", 0, Purpose::Act)),
            Err(PolicyError::Unavailable(_))
        ));
    }

    #[test]
    fn keyed_queues_are_separate() {
        let p = ScriptedPolicy::from_entries(vec![
            ScriptEntry {
                id: Some("q1".into()),
                outputs: vec!["one".into()],
            },
            ScriptEntry {
                id: None,
                outputs: vec!["shared".into()],
            },
        ]);
        assert_eq!(p.generate(&req("q2", 0, Purpose::Act)).unwrap(), "shared");
        assert_eq!(p.generate(&req("q1", 0, Purpose::Act)).unwrap(), "one");
        assert!(p.generate(&req("q1", 1, Purpose::Act)).is_err());
        assert_eq!(p.remaining(), 0);
    }

    #[test]
    fn routes_by_purpose() {
        let p = RoutedPolicy::new(Arc::new(ScriptedPolicy::new(["act"])))
            .route(Purpose::Extract, Arc::new(ScriptedPolicy::new(["extract"])));
        assert_eq!(p.generate(&req("q", 0, Purpose::Extract)).unwrap(), "extract");
        assert_eq!(p.generate(&req("q", 0, Purpose::Act)).unwrap(), "act");
    }

    #[test]
    fn replay_prefers_reward_then_length() {
        let p = ReplayPolicy::new();
        assert!(p.insert(traj("q", 0.5, 3)));
        assert!(!p.insert(traj("q", 0.4, 1)));
        assert!(p.insert(traj("q", 0.5, 2)));
        assert!(!p.insert(traj("q", 0.5, 4)));
        assert!(p.insert(traj("q", 1.0, 9)));
        assert_eq!(p.get("q").unwrap().len(), 9);
    }

    #[test]
    fn replay_emits_steps_and_falls_back() {
        let p = ReplayPolicy::from_trajectories([traj("q", 1.0, 2)]);
        assert_eq!(p.generate(&req("q", 1, Purpose::Act)).unwrap(), "Thought: t1\nAction: finish(a1)");
        assert_eq!(p.generate(&req("q", 2, Purpose::Act)).unwrap(), REPLAY_FALLBACK);
        assert_eq!(p.generate(&req("other", 0, Purpose::Act)).unwrap(), REPLAY_FALLBACK);
    }
}
