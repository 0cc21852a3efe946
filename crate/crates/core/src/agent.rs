//! The executor loop: prompt, parse, step, until the episode ends.

use std::time::Instant;

use thiserror::Error;
use tracing::info;

use crate::data::QuestionRecord;
use crate::env::{EnvError, Environment};
use crate::eval::EvalError;
use crate::kg::LabeledTriple;
use crate::policy::{parse_react, PolicyError, PolicyRequest, Purpose};
use crate::selflearn::compute_reward;
use crate::trajectory::{Termination, Trajectory};

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error("episode `{id}`: {source}")]
    Env {
        id: String,
        #[source]
        source: EnvError,
    },
    #[error("episode `{id}`: {source}")]
    Reward {
        id: String,
        #[source]
        source: EvalError,
    },
}

impl EpisodeError {
    pub fn is_policy_unavailable(&self) -> bool {
        matches!(
            self,
            EpisodeError::Env {
                source: EnvError::Policy(PolicyError::Unavailable(_)),
                ..
            }
        )
    }
}

/// A finished episode with what the trajectory file does not carry.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub trajectory: Trajectory,
    /// Initial observation; the first user message of every prompt.
    pub task: String,
    /// Triples extracted during the episode, not yet in the graph.
    pub extracted: Vec<LabeledTriple>,
}

pub fn run_episode(env: &Environment<'_>, q: &QuestionRecord, critique: Option<String>) -> Result<Episode, EpisodeError> {
    let wrap = |source: EnvError| EpisodeError::Env {
        id: q.id.clone(),
        source,
    };
    let started = Instant::now();
    let (mut state, _) = env.reset_with(q, critique).map_err(wrap)?;
    while !state.done {
        let messages = env.prompt(&state).map_err(|e| wrap(e.into()))?;
        let text = env
            .policy
            .generate(&PolicyRequest {
                purpose: Purpose::Act,
                episode_id: &q.id,
                step: state.step_count(),
                messages: &messages,
            })
            .map_err(|e| wrap(e.into()))?;
        let (thought, action_raw) = parse_react(&text);
        env.step(&mut state, &thought, &action_raw).map_err(wrap)?;
    }
    let reward = compute_reward(&state.final_answers, &q.answer_entities).map_err(|source| EpisodeError::Reward {
        id: q.id.clone(),
        source,
    })?;
    let termination = state.termination.unwrap_or(Termination::MaxSteps);
    info!(
        episode = %q.id,
        steps = state.steps.len(),
        reward,
        termination = ?termination,
        latency_ms = started.elapsed().as_millis() as u64,
        "episode finished"
    );
    Ok(Episode {
        trajectory: Trajectory {
            id: q.id.clone(),
            question: q.question.clone(),
            plan: state.plan,
            steps: state.steps,
            final_answers: state.final_answers,
            reward,
            termination,
            refined: false,
        },
        task: state.task,
        extracted: state.buffered,
    })
}
