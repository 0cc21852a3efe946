//! Episode records as written to trajectory JSONL.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{read_jsonl, write_jsonl, DataError};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionRecord {
    pub name: String,
    pub args: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub thought: String,
    pub action: ActionRecord,
    pub action_raw: String,
    pub observation: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Finish,
    MaxSteps,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub question: String,
    pub plan: Vec<String>,
    pub steps: Vec<StepRecord>,
    pub final_answers: Vec<String>,
    pub reward: f64,
    pub termination: Termination,
    pub refined: bool,
}

impl Trajectory {
    /// Step count; the merge tie-break compares this.
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

pub fn read_trajectories(path: impl AsRef<Path>) -> Result<Vec<Trajectory>, DataError> {
    read_jsonl(path)
}

pub fn write_trajectories(path: impl AsRef<Path>, trajectories: &[Trajectory]) -> Result<usize, DataError> {
    write_jsonl(path, trajectories)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_keys_are_exact_and_ordered() {
        let t = Trajectory {
            id: "q1".into(),
            question: "where?".into(),
            plan: vec!["r(x, y)".into()],
            steps: vec![StepRecord {
                thought: "t".into(),
                action: ActionRecord {
                    name: "finish".into(),
                    args: vec!["SF".into()],
                },
                action_raw: "finish(SF)".into(),
                observation: "Answers: SF".into(),
            }],
            final_answers: vec!["SF".into()],
            reward: 1.0,
            termination: Termination::Finish,
            refined: false,
        };
        let line = serde_json::to_string(&t).unwrap();
        assert_eq!(
            line,
            r#"{"id":"q1","question":"where?","plan":["r(x, y)"],"steps":[{"thought":"t","action":{"name":"finish","args":["SF"]},"action_raw":"finish(SF)","observation":"Answers: SF"}],"final_answers":["SF"],"reward":1.0,"termination":"finish","refined":false}"#
        );
        let back: Trajectory = serde_json::from_str(&line).unwrap();
        assert_eq!(back, t);
        assert_eq!(serde_json::to_string(&Termination::MaxSteps).unwrap(), "\"max_steps\"");
    }
}
