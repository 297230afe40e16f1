use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::{Mutex, OnceLock};

use thiserror::Error;

use super::{EnvState, Scenario};

/// Search stops after this many distinct states.
const STATE_LIMIT: usize = 2_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OracleError {
    #[error("goal unreachable from the initial state of {0}")]
    Unreachable(String),
    #[error("search for {0} exceeded {STATE_LIMIT} states")]
    TooLarge(String),
}

/// A shortest action sequence from reset to the goal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Solution {
    pub steps: usize,
    pub actions: Vec<String>,
}

/// Breadth-first search over valid actions from the scenario's reset state.
pub fn solve(scenario: &Scenario) -> Result<Solution, OracleError> {
    let start = scenario.initial_state();
    if start.goal_reached() {
        return Ok(Solution {
            steps: 0,
            actions: Vec::new(),
        });
    }
    let mut parents: Vec<(usize, String)> = vec![(usize::MAX, String::new())];
    let mut seen = HashSet::from([start.key()]);
    let mut queue: VecDeque<(usize, EnvState)> = VecDeque::from([(0, start)]);
    while let Some((index, state)) = queue.pop_front() {
        for action in state.legal_actions() {
            let mut next = state.clone();
            next.apply(&action);
            if !seen.insert(next.key()) {
                continue;
            }
            parents.push((index, action.to_string()));
            let child = parents.len() - 1;
            if next.goal_reached() {
                let mut actions = Vec::new();
                let mut at = child;
                while at != 0 {
                    actions.push(parents[at].1.clone());
                    at = parents[at].0;
                }
                actions.reverse();
                return Ok(Solution {
                    steps: actions.len(),
                    actions,
                });
            }
            if seen.len() > STATE_LIMIT {
                return Err(OracleError::TooLarge(scenario.name.clone()));
            }
            queue.push_back((child, next));
        }
    }
    Err(OracleError::Unreachable(scenario.name.clone()))
}

/// Memoized [`solve`] step count, keyed by the full scenario definition.
pub fn optimal_steps(scenario: &Scenario) -> Result<usize, OracleError> {
    static MEMO: OnceLock<Mutex<HashMap<String, Result<usize, OracleError>>>> = OnceLock::new();
    let key = toml::to_string(scenario).expect("scenarios serialize");
    let memo = MEMO.get_or_init(Default::default);
    if let Some(hit) = memo.lock().expect("memo lock").get(&key) {
        return hit.clone();
    }
    let result = solve(scenario).map(|s| s.steps);
    memo.lock().expect("memo lock").insert(key, result.clone());
    result
}
