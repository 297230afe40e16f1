//! The recursive plan/act/refine loop.
//!
//! The engine keeps one shared context window and a task tree of
//! decomposition nodes. Each model call returns a full subtask list; only
//! the head is acted on. A head that is an environment action is executed
//! and the node is asked to refine its plan. Any other head becomes a child
//! node that is planned in turn. When a node finishes, its parent's name,
//! latest thought and remaining subtasks are injected back into the window
//! before the parent refines.
//!
//! The recursion is run as an explicit loop over the deepest open node, so
//! the only state carried between iterations is the tree itself.

use std::collections::HashMap;
use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::{ContextWindow, Message, WindowError, DEFAULT_REMINDER_INTERVAL, DEFAULT_WINDOW_CAP};
use crate::kitchen::{normalize, Observation};
use crate::llm::{call_llm, CallKey, ChatBackend, DecodeParams, RetryPolicy};
use crate::prompts::{
    apply_variant, format_remaining, render, PromptContext, RenderError, TemplateKind, VariantConfig,
    DEFAULT_SUBTASK_BULLET, DEFAULT_SYSTEM_PROMPT,
};
use crate::trace::{
    self, Close, EnvStep, Event, Expand, LlmCall, Recorder, Refine, RuleReminder, RunEnd, Truncate, TruncateReason,
};
use crate::tree::{NodeId, NodeStatus, TaskTree, TreeError};

pub const DEFAULT_STEP_MULTIPLIER: f64 = 4.0;
/// Default model-call allowance per unit of step budget.
pub const CALLS_PER_STEP: usize = 8;
/// Consecutive completion checks a node may receive before it is closed.
pub const MAX_JUDGE_DONE: u32 = 2;

/// What the engine needs from a text environment.
pub trait Environment {
    /// Task description given to the root.
    fn task(&self) -> &str;
    fn rules(&self) -> &str;
    fn observe(&self) -> Observation;
    /// Invalid actions must leave the environment unchanged and report
    /// `error_feedback`.
    fn step(&mut self, action: &str) -> Observation;
    /// Whether `text` is phrased as an action of this environment, legal in
    /// the current state or not.
    fn recognizes(&self, text: &str) -> bool;
    fn goal_reached(&self) -> bool;
    fn optimal_steps(&self) -> Result<usize, String>;
}

/// Whether `subtask` names one of the currently valid actions.
pub fn is_primitive(subtask: &str, valid_actions: &[String]) -> bool {
    let wanted = normalize(subtask);
    valid_actions.iter().any(|a| normalize(a) == wanted)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub window_cap: usize,
    pub reminder_interval: u64,
    pub variant: VariantConfig,
    pub max_step_multiplier: f64,
    /// Model-call allowance; defaults to 8 × the step budget (at least 16).
    pub max_llm_calls: Option<usize>,
    pub decode: DecodeParams,
    /// Recorded for reproducibility; scripted backends are deterministic.
    pub seed: u64,
    /// Prefix for each line of the remaining-subtask list.
    pub subtask_bullet: String,
    /// Overrides the shipped system prompt.
    pub system_prompt: Option<String>,
    /// Optional worked example appended to the fixed head.
    pub demonstration: Option<String>,
    /// First transport-retry delay; doubles per retry.
    pub retry_delay_ms: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            window_cap: DEFAULT_WINDOW_CAP,
            reminder_interval: DEFAULT_REMINDER_INTERVAL,
            variant: VariantConfig::default(),
            max_step_multiplier: DEFAULT_STEP_MULTIPLIER,
            max_llm_calls: None,
            decode: DecodeParams::default(),
            seed: 0,
            subtask_bullet: DEFAULT_SUBTASK_BULLET.to_string(),
            system_prompt: None,
            demonstration: None,
            retry_delay_ms: 500,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |msg: &str| Err(EngineError::Config(msg.to_string()));
        if !self.max_step_multiplier.is_finite() || self.max_step_multiplier < 1.0 {
            return bad("max_step_multiplier must be a finite number >= 1");
        }
        if self.variant.depth_cap.is_some_and(|d| d < 2) {
            return bad("depth_cap must be at least 2");
        }
        if self.max_llm_calls == Some(0) {
            return bad("max_llm_calls must be positive");
        }
        if !(0.0..=2.0).contains(&self.decode.temperature) {
            return bad("temperature must be within 0..=2");
        }
        Ok(())
    }

    pub fn step_budget(&self, optimal: usize) -> usize {
        (self.max_step_multiplier * optimal as f64).ceil() as usize
    }

    pub fn call_budget(&self, step_budget: usize) -> usize {
        self.max_llm_calls
            .unwrap_or_else(|| (CALLS_PER_STEP * step_budget).max(16))
    }

    fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            base_delay: Duration::from_millis(self.retry_delay_ms),
            ..RetryPolicy::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GoalReached,
    /// The root refined its plan to nothing.
    RootCompleted,
    StepBudget,
    CallBudget,
    CallFailure,
    EnvTerminal,
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Termination::GoalReached => "goal_reached",
            Termination::RootCompleted => "root_completed",
            Termination::StepBudget => "step_budget",
            Termination::CallBudget => "call_budget",
            Termination::CallFailure => "call_failure",
            Termination::EnvTerminal => "env_terminal",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    /// The environment's goal holds at the end of the run.
    pub success: bool,
    pub env_steps: usize,
    pub llm_calls: usize,
    pub tree: TaskTree,
    pub termination: Termination,
    pub detail: Option<String>,
    pub step_budget: usize,
    pub call_budget: usize,
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("cannot compute the optimal step count: {0}")]
    Oracle(String),
    #[error("trace write failed: {0}")]
    Trace(#[from] std::io::Error),
    #[error("prompt rendering failed: {0}")]
    Render(#[from] RenderError),
    #[error("task tree: {0}")]
    Tree(#[from] TreeError),
    #[error("context window: {0}")]
    Window(#[from] WindowError),
}

struct Stop {
    termination: Termination,
    detail: Option<String>,
}

impl Stop {
    fn new(termination: Termination) -> Self {
        Self {
            termination,
            detail: None,
        }
    }
}

/// `Ok(Some(stop))` ends the run; `Ok(None)` continues.
type Flow = Result<Option<Stop>, EngineError>;

struct Engine<'a, E: Environment + ?Sized> {
    config: &'a RunConfig,
    env: &'a mut E,
    backend: &'a dyn ChatBackend,
    recorder: &'a mut Recorder,
    policy: RetryPolicy,
    tree: TaskTree,
    window: ContextWindow,
    /// Thoughts produced for each open node, oldest first.
    thinks: HashMap<NodeId, Vec<String>>,
    judge_streak: HashMap<NodeId, u32>,
    /// Observation that accompanied the last rejected forced attempt.
    failure_obs: String,
    env_steps: usize,
    llm_calls: usize,
    step_budget: usize,
    call_budget: usize,
}

/// Runs one uninterrupted trajectory from a freshly reset environment.
///
/// Model and environment failures end the run and are reported in the
/// result; only configuration, rendering and trace I/O problems are errors.
pub fn run<E: Environment + ?Sized>(
    config: &RunConfig,
    env: &mut E,
    backend: &dyn ChatBackend,
    recorder: &mut Recorder,
) -> Result<RunResult, EngineError> {
    config.validate()?;
    let optimal = env.optimal_steps().map_err(EngineError::Oracle)?;
    let step_budget = config.step_budget(optimal);
    let system_prompt = config.system_prompt.as_deref().unwrap_or(DEFAULT_SYSTEM_PROMPT);
    let mut head = format!("{system_prompt}\n\n{}", env.rules());
    if let Some(demo) = &config.demonstration {
        head.push_str("\n\n");
        head.push_str(demo);
    }
    let window = ContextWindow::new(
        Message::head(head),
        config.window_cap,
        env.rules(),
        config.reminder_interval,
    )?;
    let tree = TaskTree::create_root(env.task())?;
    let mut engine = Engine {
        config,
        policy: config.retry_policy(),
        env,
        backend,
        recorder,
        tree,
        window,
        thinks: HashMap::new(),
        judge_streak: HashMap::new(),
        failure_obs: String::new(),
        env_steps: 0,
        llm_calls: 0,
        step_budget,
        call_budget: config.call_budget(step_budget),
    };
    let stop = engine.drive()?;
    let success = engine.env.goal_reached();
    engine.recorder.record(Event::RunEnd(RunEnd {
        success,
        termination: stop.termination,
        env_steps: engine.env_steps,
        llm_calls: engine.llm_calls,
        detail: stop.detail.clone(),
    }))?;
    Ok(RunResult {
        success,
        env_steps: engine.env_steps,
        llm_calls: engine.llm_calls,
        tree: engine.tree,
        termination: stop.termination,
        detail: stop.detail,
        step_budget: engine.step_budget,
        call_budget: engine.call_budget,
    })
}

impl<E: Environment + ?Sized> Engine<'_, E> {
    fn drive(&mut self) -> Result<Stop, EngineError> {
        let root = self.tree.root();
        self.recorder.record(Event::Expand(Expand {
            node: root,
            parent: None,
            task_name: self.env.task().to_string(),
            depth: 1,
        }))?;
        let ctx = PromptContext {
            system_prompt: Some(
                self.config
                    .system_prompt
                    .clone()
                    .unwrap_or_else(|| DEFAULT_SYSTEM_PROMPT.to_string()),
            ),
            rules: Some(self.env.rules().to_string()),
            init_obs: Some(self.env.observe().text),
            task_name: Some(self.env.task().to_string()),
            ..PromptContext::default()
        };
        if let Some(stop) = self.plan(root, TemplateKind::InitialDecomposition, ctx)? {
            return Ok(stop);
        }
        if let Some(stop) = self.settle_if_closed(root)? {
            return Ok(stop);
        }
        loop {
            let Some(node) = self.tree.current() else {
                return Ok(Stop::new(Termination::RootCompleted));
            };
            if let Some(stop) = self.advance(node)? {
                return Ok(stop);
            }
        }
    }

    /// One iteration on the deepest open node: act on, or descend into, the
    /// head subtask.
    fn advance(&mut self, node: NodeId) -> Flow {
        let n = self.tree.node(node)?;
        let depth = n.depth;
        let Some(head) = n.plan.head().map(str::to_string) else {
            self.close(node, NodeStatus::Done)?;
            return self.settle(node);
        };
        let valid = self.env.observe().valid_actions;
        if is_primitive(&head, &valid) || self.env.recognizes(&head) {
            return self.act(node, &head, false);
        }
        if self.config.variant.depth_cap == Some(depth) {
            return self.act(node, &head, true);
        }
        let child = self.tree.expand(node, &head)?;
        self.recorder.record(Event::Expand(Expand {
            node: child,
            parent: Some(node),
            task_name: head.clone(),
            depth: depth + 1,
        }))?;
        let ctx = PromptContext {
            task_name: Some(head),
            ..PromptContext::default()
        };
        if let Some(stop) = self.plan(child, TemplateKind::RecursiveDownward, ctx)? {
            return Ok(Some(stop));
        }
        self.settle_if_closed(child)
    }

    /// Sends `action` to the environment on behalf of `node`, then asks the
    /// node to refine. A rejected `forced` attempt fails the node instead.
    fn act(&mut self, node: NodeId, action: &str, forced: bool) -> Flow {
        if self.env_steps >= self.step_budget {
            return Ok(Some(Stop {
                termination: Termination::StepBudget,
                detail: Some(format!("step budget of {} exhausted", self.step_budget)),
            }));
        }
        let obs = self.env.step(action);
        let accepted = obs.error_feedback.is_none();
        if accepted {
            self.env_steps += 1;
        }
        let depth = self.tree.node(node)?.depth;
        self.recorder.record(Event::EnvStep(EnvStep {
            node,
            action: action.to_string(),
            accepted,
            feedback: obs.error_feedback.clone(),
            observation: obs.text.clone(),
            env_steps: self.env_steps,
            depth,
            open_nodes: self.tree.open_count(),
        }))?;
        if accepted && obs.done {
            return Ok(Some(if self.env.goal_reached() {
                Stop::new(Termination::GoalReached)
            } else {
                Stop::new(Termination::EnvTerminal)
            }));
        }
        if !accepted && forced {
            self.failure_obs = obs.text;
            self.close(node, NodeStatus::Failed)?;
            return self.settle(node);
        }

        let n = self.tree.node(node)?;
        let remaining = n.plan.remaining();
        let mut ctx = PromptContext {
            obs: Some(obs.text),
            previous_stage_task_name: Some(n.task_name.clone()),
            previous_stage_think: Some(n.plan.think.clone()),
            remaining_subtask_str: Some(format_remaining(remaining, &self.config.subtask_bullet)),
            ..PromptContext::default()
        };
        let kind = if !accepted {
            ctx.fail_task_name = Some(action.to_string());
            TemplateKind::LeafFailure
        } else if remaining.is_empty() {
            ctx.done_task_name = Some(action.to_string());
            ctx.remaining_subtask_str = None;
            TemplateKind::LeafCompletion
        } else {
            ctx.done_task_name = Some(action.to_string());
            TemplateKind::LeafBacktrack
        };
        if let Some(stop) = self.plan(node, kind, ctx)? {
            return Ok(Some(stop));
        }
        self.settle_if_closed(node)
    }

    fn settle_if_closed(&mut self, node: NodeId) -> Flow {
        if self.tree.node(node)?.is_open() {
            Ok(None)
        } else {
            self.settle(node)
        }
    }

    /// Hands control from a closed node back to its ancestors, re-injecting
    /// each parent's state, until some node stays open or the root closes.
    fn settle(&mut self, mut closed: NodeId) -> Flow {
        loop {
            let c = self.tree.node(closed)?;
            let Some(parent) = c.parent else {
                return Ok(Some(Stop::new(Termination::RootCompleted)));
            };
            let (child_name, child_status) = (c.task_name.clone(), c.status);
            let p = self.tree.node(parent)?;
            let remaining = p.plan.remaining();
            let mut ctx = PromptContext {
                previous_stage_task_name: Some(p.task_name.clone()),
                previous_stage_think: Some(p.plan.think.clone()),
                ..PromptContext::default()
            };
            let kind = if child_status == NodeStatus::Failed {
                ctx.fail_task_name = Some(child_name);
                ctx.obs = Some(self.failure_obs.clone());
                ctx.remaining_subtask_str = Some(format_remaining(remaining, &self.config.subtask_bullet));
                TemplateKind::LeafFailure
            } else if remaining.is_empty() {
                let streak = self.judge_streak.entry(parent).or_default();
                *streak += 1;
                if *streak > MAX_JUDGE_DONE {
                    self.close(parent, NodeStatus::Done)?;
                    closed = parent;
                    continue;
                }
                ctx.done_task_name = Some(child_name);
                TemplateKind::NonleafJudgeDone
            } else {
                ctx.done_task_name = Some(child_name);
                ctx.remaining_subtask_str = Some(format_remaining(remaining, &self.config.subtask_bullet));
                TemplateKind::NonleafBacktrack
            };
            if let Some(stop) = self.plan(parent, kind, ctx)? {
                return Ok(Some(stop));
            }
            if self.tree.node(parent)?.is_open() {
                return Ok(None);
            }
            closed = parent;
        }
    }

    fn close(&mut self, node: NodeId, status: NodeStatus) -> Result<(), EngineError> {
        if self.tree.node(node)?.is_open() {
            self.tree.close(node, status)?;
        }
        self.thinks.remove(&node);
        self.judge_streak.remove(&node);
        self.recorder.record(Event::Close(Close { node, status }))?;
        Ok(())
    }

    /// Every thought produced on the path from the root to `node`.
    fn think_history(&self, node: NodeId) -> Vec<String> {
        let mut path = self.tree.ancestors(node);
        path.push(node);
        path.iter()
            .filter_map(|id| self.thinks.get(id))
            .flatten()
            .cloned()
            .collect()
    }

    /// Renders `kind` for `node`, calls the model and installs the returned
    /// plan on `node`.
    fn plan(&mut self, node: NodeId, kind: TemplateKind, ctx: PromptContext) -> Flow {
        if self.llm_calls >= self.call_budget {
            return Ok(Some(Stop {
                termination: Termination::CallBudget,
                detail: Some(format!("model call budget of {} exhausted", self.call_budget)),
            }));
        }
        if kind != TemplateKind::NonleafJudgeDone {
            self.judge_streak.remove(&node);
        }
        let ctx = apply_variant(ctx, &self.config.variant, &self.think_history(node));
        let prompt = render(kind, &ctx)?;
        self.window.append(Message::user(prompt))?;
        let n = self.tree.node(node)?;
        let (task_name, depth) = (n.task_name.clone(), n.depth);
        let key = CallKey::new(task_name.clone(), kind);
        let report = match call_llm(
            &mut self.window,
            self.backend,
            &self.config.decode,
            self.config.variant.mode,
            &key,
            &self.policy,
        ) {
            Ok(report) => report,
            Err(failure) => {
                return Ok(Some(Stop {
                    termination: Termination::CallFailure,
                    detail: Some(failure.to_string()),
                }))
            }
        };
        self.llm_calls += 1;
        if report.cap_removed > 0 {
            self.recorder.record(Event::Truncate(Truncate {
                reason: TruncateReason::Cap,
                removed: report.cap_removed,
                call_index: report.call_index,
            }))?;
        }
        if report.reminder_injected {
            self.recorder.record(Event::RuleReminder(RuleReminder {
                call_index: report.call_index,
            }))?;
        }
        if report.overflow_removed > 0 {
            self.recorder.record(Event::Truncate(Truncate {
                reason: TruncateReason::Overflow,
                removed: report.overflow_removed,
                call_index: report.call_index,
            }))?;
        }
        self.recorder.record(Event::LlmCall(LlmCall {
            node,
            task_name,
            template: kind,
            call_index: report.call_index,
            input_tokens: trace::prompt_tokens(&report.sent),
            output_tokens: trace::response_tokens(&report.response),
            messages: report.sent,
            response: report.response,
            attempts: report.attempts,
            depth,
            open_nodes: self.tree.open_count(),
        }))?;
        self.thinks.entry(node).or_default().push(report.plan.think.clone());
        let plan = report.plan;
        let done = plan.is_complete();
        let previous = self.tree.refine(node, plan.clone())?;
        self.recorder.record(Event::Refine(Refine { node, previous, plan }))?;
        if done {
            self.close(node, NodeStatus::Done)?;
        }
        Ok(None)
    }
}
