use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{EnvState, Goal, GoalLayer, Item, ItemKind, Station, StationKind};

pub const BUILTIN_SCENARIOS: [&str; 3] = ["sandwich", "blocked_board", "cook_patty"];

const SANDWICH: &str = include_str!("../../assets/scenarios/sandwich.toml");
const BLOCKED_BOARD: &str = include_str!("../../assets/scenarios/blocked_board.toml");
const COOK_PATTY: &str = include_str!("../../assets/scenarios/cook_patty.toml");

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("unknown scenario {0:?} (known: sandwich, blocked_board, cook_patty)")]
    Unknown(String),
    #[error("invalid scenario definition: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("invalid scenario {name}: {reason}")]
    Invalid { name: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StationSpec {
    pub name: String,
    pub kind: StationKind,
    /// Bottom first.
    #[serde(default)]
    pub items: Vec<String>,
}

/// A static kitchen layout: stations, items, goal and task text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub task: String,
    pub items: BTreeMap<String, ItemKind>,
    pub stations: Vec<StationSpec>,
    pub goal: Vec<GoalLayer>,
}

impl Scenario {
    pub fn builtin(name: &str) -> Result<Self, ScenarioError> {
        let text = match name {
            "sandwich" => SANDWICH,
            "blocked_board" => BLOCKED_BOARD,
            "cook_patty" => COOK_PATTY,
            other => return Err(ScenarioError::Unknown(other.to_string())),
        };
        Self::from_toml(text)
    }

    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let scenario: Scenario = toml::from_str(text)?;
        scenario.validate()?;
        Ok(scenario)
    }

    fn validate(&self) -> Result<(), ScenarioError> {
        let invalid = |reason: String| ScenarioError::Invalid {
            name: self.name.clone(),
            reason,
        };
        let names: BTreeSet<&str> = self.stations.iter().map(|s| s.name.as_str()).collect();
        if names.len() != self.stations.len() {
            return Err(invalid("duplicate station name".into()));
        }
        if let Some(clash) = names.iter().find(|n| self.items.contains_key(**n)) {
            return Err(invalid(format!("{clash} is both a station and an item")));
        }
        let mut seen = BTreeSet::new();
        for item in self.stations.iter().flat_map(|s| &s.items) {
            if !self.items.contains_key(item) {
                return Err(invalid(format!("undeclared item {item}")));
            }
            if !seen.insert(item) {
                return Err(invalid(format!("{item} placed twice")));
            }
        }
        if let Some(missing) = self.items.keys().find(|i| !seen.contains(i)) {
            return Err(invalid(format!("{missing} is not on any station")));
        }
        let bad_name = |n: &str| n.is_empty() || n.chars().any(|c| !c.is_ascii_lowercase() && !c.is_ascii_digit());
        if let Some(n) = names.iter().copied().chain(self.items.keys().map(String::as_str)).find(|n| bad_name(n)) {
            return Err(invalid(format!("name {n:?} must be lowercase letters and digits")));
        }
        if self.goal.is_empty() {
            return Err(invalid("empty goal".into()));
        }
        Ok(())
    }

    pub fn initial_state(&self) -> EnvState {
        EnvState {
            stations: self
                .stations
                .iter()
                .map(|s| {
                    (
                        s.name.clone(),
                        Station {
                            kind: s.kind,
                            occupant_stack: s.items.clone(),
                        },
                    )
                })
                .collect(),
            items: self
                .items
                .iter()
                .map(|(name, kind)| (name.clone(), Item::new(*kind)))
                .collect(),
            holding: None,
            clock: 0,
            goal: Goal {
                layers: self.goal.clone(),
            },
        }
    }
}
