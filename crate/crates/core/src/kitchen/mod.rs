//! A small deterministic cooking simulator.
//!
//! Stations hold stacks of items (bottom first). A player holds at most one
//! item. Cutting takes three cuts; cooking takes three timesteps after it is
//! started and only progresses while the item stays on its stove. Invalid
//! actions leave the state untouched and produce error feedback.

mod oracle;
mod scenario;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::engine::Environment;
use crate::prompts::KITCHEN_RULES;

pub use oracle::{optimal_steps, solve, OracleError, Solution};
pub use scenario::{Scenario, ScenarioError, BUILTIN_SCENARIOS};

/// Cuts (or cooking timesteps) needed to finish an item.
pub const PROGRESS_DONE: u8 = 3;
pub const DO_NOTHING: &str = "Do Nothing";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StationKind {
    Table,
    Board,
    Stove,
}

impl fmt::Display for StationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StationKind::Table => "table",
            StationKind::Board => "board",
            StationKind::Stove => "stove",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemKind {
    Bread,
    Bun,
    Lettuce,
    Onion,
    Tomato,
    Cheese,
    Patty,
}

impl ItemKind {
    pub fn cuttable(self) -> bool {
        matches!(self, ItemKind::Lettuce | ItemKind::Onion | ItemKind::Tomato)
    }

    pub fn cookable(self) -> bool {
        matches!(self, ItemKind::Patty)
    }
}

impl fmt::Display for ItemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ItemKind::Bread => "bread",
            ItemKind::Bun => "bun",
            ItemKind::Lettuce => "lettuce",
            ItemKind::Onion => "onion",
            ItemKind::Tomato => "tomato",
            ItemKind::Cheese => "cheese",
            ItemKind::Patty => "patty",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Station {
    pub kind: StationKind,
    /// Bottom first.
    pub occupant_stack: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Item {
    pub kind: ItemKind,
    pub cut_progress: u8,
    pub cook_progress: u8,
    pub cooking: bool,
}

impl Item {
    pub fn new(kind: ItemKind) -> Self {
        Self {
            kind,
            cut_progress: 0,
            cook_progress: 0,
            cooking: false,
        }
    }

    pub fn is_cut(&self) -> bool {
        self.cut_progress == PROGRESS_DONE
    }

    pub fn is_cooked(&self) -> bool {
        self.cook_progress == PROGRESS_DONE
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemCondition {
    #[default]
    Any,
    Cut,
    Cooked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GoalLayer {
    pub kind: ItemKind,
    #[serde(default)]
    pub state: ItemCondition,
}

impl GoalLayer {
    fn accepts(&self, item: &Item) -> bool {
        item.kind == self.kind
            && match self.state {
                ItemCondition::Any => true,
                ItemCondition::Cut => item.is_cut(),
                ItemCondition::Cooked => item.is_cooked(),
            }
    }
}

impl fmt::Display for GoalLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.state {
            ItemCondition::Any => write!(f, "{}", self.kind),
            ItemCondition::Cut => write!(f, "cut {}", self.kind),
            ItemCondition::Cooked => write!(f, "cooked {}", self.kind),
        }
    }
}

/// A table whose stack is exactly these layers, bottom first.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Goal {
    pub layers: Vec<GoalLayer>,
}

impl fmt::Display for Goal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let layers: Vec<String> = self.layers.iter().map(ToString::to_string).collect();
        write!(
            f,
            "on a table, stack {} (bottom to top) with nothing else on that table",
            layers.join(", ")
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Action {
    PickUp(String),
    Unstack { item: String, from: String },
    Place { item: String, station: String },
    Stack { item: String, onto: String },
    Cut(String),
    StartCook(String),
    DoNothing,
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::PickUp(item) => write!(f, "pick up {item}"),
            Action::Unstack { item, from } => write!(f, "unstack {item} from {from}"),
            Action::Place { item, station } => write!(f, "place {item} on {station}"),
            Action::Stack { item, onto } => write!(f, "stack {item} on {onto}"),
            Action::Cut(item) => write!(f, "cut {item}"),
            Action::StartCook(item) => write!(f, "start cook {item}"),
            Action::DoNothing => f.write_str(DO_NOTHING),
        }
    }
}

/// Trim, collapse internal whitespace, lowercase.
pub fn normalize(text: &str) -> String {
    text.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub text: String,
    pub valid_actions: Vec<String>,
    pub error_feedback: Option<String>,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EnvState {
    pub stations: BTreeMap<String, Station>,
    pub items: BTreeMap<String, Item>,
    pub holding: Option<String>,
    pub clock: u32,
    pub goal: Goal,
}

/// State minus the clock and goal; what the dynamics depend on.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub(crate) struct StateKey {
    stations: Vec<Vec<String>>,
    items: Vec<Item>,
    holding: Option<String>,
}

impl EnvState {
    pub(crate) fn key(&self) -> StateKey {
        StateKey {
            stations: self.stations.values().map(|s| s.occupant_stack.clone()).collect(),
            items: self.items.values().copied().collect(),
            holding: self.holding.clone(),
        }
    }

    fn locate(&self, item: &str) -> Option<(&str, usize)> {
        self.stations.iter().find_map(|(name, s)| {
            s.occupant_stack
                .iter()
                .position(|i| i == item)
                .map(|pos| (name.as_str(), pos))
        })
    }

    fn top_of(&self, item: &str) -> bool {
        self.locate(item)
            .is_some_and(|(s, pos)| pos + 1 == self.stations[s].occupant_stack.len())
    }

    fn alone_on(&self, item: &str, kind: StationKind) -> Result<(), String> {
        match self.locate(item) {
            Some((s, _)) if self.stations[s].kind != kind => {
                Err(format!("{item} must be on a {kind}, but it is on {s}"))
            }
            Some((s, _)) if self.stations[s].occupant_stack.len() != 1 => Err(format!(
                "{item} must be alone on {s}, which holds {}",
                self.stations[s].occupant_stack.join(", ")
            )),
            Some(_) => Ok(()),
            None if self.holding.as_deref() == Some(item) => {
                Err(format!("{item} is in your hand; place it on a {kind} first"))
            }
            None => Err(format!("{item} is not on any station")),
        }
    }

    fn occupied(&self, kind: StationKind) -> Vec<String> {
        self.stations
            .iter()
            .filter(|(_, s)| s.kind == kind && !s.occupant_stack.is_empty())
            .map(|(n, s)| format!("{n} is occupied by {}", s.occupant_stack.join(", ")))
            .collect()
    }

    /// Why `action` cannot be taken right now, or `Ok` if it can.
    pub fn check(&self, action: &Action) -> Result<(), String> {
        let hands_free = || match &self.holding {
            Some(h) => Err(format!("you are already holding {h}")),
            None => Ok(()),
        };
        let holding = |item: &str| match &self.holding {
            Some(h) if h == item => Ok(()),
            Some(h) => Err(format!("you are holding {h}, not {item}")),
            None => Err(format!("you are not holding {item}")),
        };
        match action {
            Action::DoNothing => Ok(()),
            Action::PickUp(item) => {
                hands_free()?;
                match self.locate(item) {
                    Some((_, 0)) if self.top_of(item) => Ok(()),
                    Some((s, 0)) => Err(format!("something is stacked on {item} at {s}")),
                    Some(_) => Err(format!("{item} sits on another item; unstack it instead")),
                    None => Err(format!("{item} is not on any station")),
                }
            }
            Action::Unstack { item, from } => {
                hands_free()?;
                match self.locate(item) {
                    Some((s, pos)) if pos > 0 && self.stations[s].occupant_stack[pos - 1] == *from => {
                        if self.top_of(item) {
                            Ok(())
                        } else {
                            Err(format!("something is stacked on {item}"))
                        }
                    }
                    Some(_) => Err(format!("{item} is not directly on {from}")),
                    None => Err(format!("{item} is not on any station")),
                }
            }
            Action::Place { item, station } => {
                holding(item)?;
                if self.stations[station].occupant_stack.is_empty() {
                    Ok(())
                } else {
                    Err(format!(
                        "{station} is occupied by {}; remove it first or stack on top",
                        self.stations[station].occupant_stack.join(", ")
                    ))
                }
            }
            Action::Stack { item, onto } => {
                holding(item)?;
                if self.top_of(onto) {
                    Ok(())
                } else {
                    Err(format!("{onto} is not the top item of a station"))
                }
            }
            Action::Cut(item) => {
                let it = &self.items[item];
                if !it.kind.cuttable() {
                    return Err(format!("{item} cannot be cut"));
                }
                if it.is_cut() {
                    return Err(format!("{item} is already cut"));
                }
                self.alone_on(item, StationKind::Board).map_err(|e| {
                    let boards = self.occupied(StationKind::Board);
                    if boards.is_empty() {
                        e
                    } else {
                        format!("{e}; {}", boards.join("; "))
                    }
                })
            }
            Action::StartCook(item) => {
                let it = &self.items[item];
                if !it.kind.cookable() {
                    return Err(format!("{item} cannot be cooked"));
                }
                if it.is_cooked() {
                    return Err(format!("{item} is already cooked"));
                }
                if it.cooking {
                    return Err(format!("{item} is already cooking"));
                }
                self.alone_on(item, StationKind::Stove)
            }
        }
    }

    /// Every syntactically possible action over this state's names.
    fn candidates(&self) -> Vec<Action> {
        let mut out = Vec::new();
        for item in self.items.keys() {
            out.push(Action::PickUp(item.clone()));
            for other in self.items.keys().filter(|o| *o != item) {
                out.push(Action::Unstack {
                    item: item.clone(),
                    from: other.clone(),
                });
            }
        }
        for item in self.items.keys() {
            for station in self.stations.keys() {
                out.push(Action::Place {
                    item: item.clone(),
                    station: station.clone(),
                });
            }
            for other in self.items.keys().filter(|o| *o != item) {
                out.push(Action::Stack {
                    item: item.clone(),
                    onto: other.clone(),
                });
            }
        }
        for item in self.items.keys() {
            out.push(Action::Cut(item.clone()));
            out.push(Action::StartCook(item.clone()));
        }
        out.push(Action::DoNothing);
        out
    }

    pub fn legal_actions(&self) -> Vec<Action> {
        self.candidates()
            .into_iter()
            .filter(|a| self.check(a).is_ok())
            .collect()
    }

    pub fn valid_actions(&self) -> Vec<String> {
        self.legal_actions().iter().map(ToString::to_string).collect()
    }

    /// Parses a (normalized) action string over this state's item and
    /// station names. Legality is not checked.
    pub fn parse_action(&self, text: &str) -> Option<Action> {
        let text = normalize(text);
        let item = |s: &str| self.items.contains_key(s).then(|| s.to_string());
        let station = |s: &str| self.stations.contains_key(s).then(|| s.to_string());
        let words: Vec<&str> = text.split(' ').collect();
        match words.as_slice() {
            ["do", "nothing"] => Some(Action::DoNothing),
            ["pick", "up", x] => item(x).map(Action::PickUp),
            ["unstack", x, "from", y] => Some(Action::Unstack {
                item: item(x)?,
                from: item(y)?,
            }),
            ["place", x, "on", s] => Some(Action::Place {
                item: item(x)?,
                station: station(s)?,
            }),
            ["stack", x, "on", y] => Some(Action::Stack {
                item: item(x)?,
                onto: item(y)?,
            }),
            ["cut", x] => item(x).map(Action::Cut),
            ["start", "cook", x] => item(x).map(Action::StartCook),
            _ => None,
        }
    }

    pub fn goal_reached(&self) -> bool {
        self.stations.values().any(|s| {
            s.kind == StationKind::Table
                && s.occupant_stack.len() == self.goal.layers.len()
                && s.occupant_stack
                    .iter()
                    .zip(&self.goal.layers)
                    .all(|(item, layer)| layer.accepts(&self.items[item]))
        })
    }

    fn remove_top(&mut self, item: &str) {
        let (station, _) = self.locate(item).expect("checked");
        let station = station.to_string();
        let s = self.stations.get_mut(&station).expect("exists");
        s.occupant_stack.pop();
        if s.kind == StationKind::Stove {
            self.items.get_mut(item).expect("exists").cooking = false;
        }
    }

    fn station_of_top(&self, item: &str) -> String {
        self.locate(item).expect("checked").0.to_string()
    }

    /// Applies a legal action: ticks cooking items, then performs the action.
    fn apply(&mut self, action: &Action) {
        for item in self.items.values_mut().filter(|i| i.cooking) {
            item.cook_progress += 1;
            if item.is_cooked() {
                item.cooking = false;
            }
        }
        match action {
            Action::DoNothing => {}
            Action::PickUp(item) | Action::Unstack { item, .. } => {
                self.remove_top(item);
                self.holding = Some(item.clone());
            }
            Action::Place { item, station } => {
                self.holding = None;
                self.stations
                    .get_mut(station)
                    .expect("exists")
                    .occupant_stack
                    .push(item.clone());
            }
            Action::Stack { item, onto } => {
                self.holding = None;
                let station = self.station_of_top(onto);
                self.stations
                    .get_mut(&station)
                    .expect("exists")
                    .occupant_stack
                    .push(item.clone());
            }
            Action::Cut(item) => self.items.get_mut(item).expect("exists").cut_progress += 1,
            Action::StartCook(item) => self.items.get_mut(item).expect("exists").cooking = true,
        }
        self.clock += 1;
    }

    fn render_state(&self) -> String {
        let mut out = String::from("Observation:\n");
        out.push_str(&format!("Time: {}\n", self.clock));
        out.push_str(&format!(
            "Holding: {}\n",
            self.holding.as_deref().unwrap_or("nothing")
        ));
        out.push_str("Stations (items bottom to top):\n");
        for (name, s) in &self.stations {
            let content = if s.occupant_stack.is_empty() {
                "empty".to_string()
            } else {
                s.occupant_stack.join(", ")
            };
            out.push_str(&format!("- {name} ({}): {content}\n", s.kind));
        }
        out.push_str("Items:\n");
        for (name, item) in &self.items {
            let mut desc = item.kind.to_string();
            if item.kind.cuttable() {
                desc.push_str(&match item.cut_progress {
                    0 => ", uncut".to_string(),
                    PROGRESS_DONE => ", cut".to_string(),
                    n => format!(", cut {n}/{PROGRESS_DONE}"),
                });
            }
            if item.kind.cookable() {
                desc.push_str(&if item.is_cooked() {
                    ", cooked".to_string()
                } else if item.cooking {
                    format!(", cooking {}/{PROGRESS_DONE}", item.cook_progress)
                } else if item.cook_progress == 0 {
                    ", raw".to_string()
                } else {
                    format!(", partly cooked {}/{PROGRESS_DONE}", item.cook_progress)
                });
            }
            out.push_str(&format!("- {name}: {desc}\n"));
        }
        out.push_str(&format!("Goal: {}", self.goal));
        out
    }

    pub fn observe(&self, error_feedback: Option<String>) -> Observation {
        let valid_actions = self.valid_actions();
        let mut text = String::new();
        if let Some(e) = &error_feedback {
            text.push_str(&format!("Error Feedback: {e}\n"));
        }
        text.push_str(&self.render_state());
        text.push_str("\nValid Actions:\n");
        text.push_str(
            &valid_actions
                .iter()
                .map(|a| format!("- {a}"))
                .collect::<Vec<_>>()
                .join("\n"),
        );
        Observation {
            text,
            valid_actions,
            error_feedback,
            done: self.goal_reached(),
        }
    }

    /// Steps the state. Unknown or illegal actions leave it unchanged (clock
    /// included) and report why.
    pub fn step(&self, action: &str) -> (EnvState, Observation) {
        let wanted = normalize(action);
        let legal = self
            .legal_actions()
            .into_iter()
            .find(|a| normalize(&a.to_string()) == wanted);
        match legal {
            Some(a) => {
                let mut next = self.clone();
                next.apply(&a);
                let obs = next.observe(None);
                (next, obs)
            }
            None => {
                let reason = match self.parse_action(action) {
                    Some(a) => self.check(&a).err().unwrap_or_default(),
                    None => "it is not a recognised action".to_string(),
                };
                let feedback = format!(
                    "'{}' is not in the valid actions list: {reason}.",
                    action.trim()
                );
                (self.clone(), self.observe(Some(feedback)))
            }
        }
    }
}

/// A scenario plus its live state.
#[derive(Debug, Clone)]
pub struct KitchenEnv {
    scenario: Scenario,
    state: EnvState,
}

impl KitchenEnv {
    pub fn new(scenario: Scenario) -> Self {
        let state = scenario.initial_state();
        Self { scenario, state }
    }

    pub fn reset(name: &str) -> Result<(Self, Observation), ScenarioError> {
        let env = Self::new(Scenario::builtin(name)?);
        let obs = env.observe();
        Ok((env, obs))
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn observe(&self) -> Observation {
        self.state.observe(None)
    }

    pub fn step(&mut self, action: &str) -> Observation {
        let (next, obs) = self.state.step(action);
        self.state = next;
        obs
    }
}

impl Environment for KitchenEnv {
    fn task(&self) -> &str {
        &self.scenario.task
    }

    fn rules(&self) -> &str {
        KITCHEN_RULES
    }

    fn observe(&self) -> Observation {
        KitchenEnv::observe(self)
    }

    fn step(&mut self, action: &str) -> Observation {
        KitchenEnv::step(self, action)
    }

    fn recognizes(&self, text: &str) -> bool {
        self.state.parse_action(text).is_some()
    }

    fn goal_reached(&self) -> bool {
        self.state.goal_reached()
    }

    fn optimal_steps(&self) -> Result<usize, String> {
        optimal_steps(&self.scenario).map_err(|e| e.to_string())
    }
}
