//! Append-only JSON-lines run trace, replay verification and accounting.
//!
//! Line one is a [`TraceHeader`]; every following line is a [`TraceEvent`]
//! with a strictly increasing `seq` starting at 1. Traces carry no
//! timestamps, so identical runs produce identical bytes.

use std::fmt;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::{estimate_tokens, Message};
use crate::engine::{RunConfig, Termination};
use crate::kitchen::{KitchenEnv, Scenario};
use crate::prompts::TemplateKind;
use crate::tree::{NodeId, NodeStatus, Plan, TaskTree, TreeError, TreeStats};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub format_version: u32,
    pub scenario: String,
    pub config: RunConfig,
}

impl TraceHeader {
    pub fn new(scenario: impl Into<String>, config: &RunConfig) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            scenario: scenario.into(),
            config: config.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmCall {
    pub node: NodeId,
    pub task_name: String,
    pub template: TemplateKind,
    pub call_index: u64,
    /// Exactly what was sent, after truncation and any rule reminder.
    pub messages: Vec<Message>,
    pub response: String,
    pub input_tokens: usize,
    pub output_tokens: usize,
    pub attempts: u32,
    pub depth: usize,
    pub open_nodes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvStep {
    pub node: NodeId,
    pub action: String,
    pub accepted: bool,
    pub feedback: Option<String>,
    pub observation: String,
    /// Accepted steps so far, this one included.
    pub env_steps: usize,
    pub depth: usize,
    pub open_nodes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Expand {
    pub node: NodeId,
    pub parent: Option<NodeId>,
    pub task_name: String,
    pub depth: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Refine {
    pub node: NodeId,
    pub previous: Plan,
    pub plan: Plan,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Close {
    pub node: NodeId,
    pub status: NodeStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruncateReason {
    Cap,
    Overflow,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Truncate {
    pub reason: TruncateReason,
    pub removed: usize,
    pub call_index: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleReminder {
    pub call_index: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunEnd {
    pub success: bool,
    pub termination: Termination,
    pub env_steps: usize,
    pub llm_calls: usize,
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum Event {
    LlmCall(LlmCall),
    EnvStep(EnvStep),
    Expand(Expand),
    Refine(Refine),
    Close(Close),
    Truncate(Truncate),
    RuleReminder(RuleReminder),
    RunEnd(RunEnd),
}

impl Event {
    pub fn kind(&self) -> &'static str {
        match self {
            Event::LlmCall(_) => "llm_call",
            Event::EnvStep(_) => "env_step",
            Event::Expand(_) => "expand",
            Event::Refine(_) => "refine",
            Event::Close(_) => "close",
            Event::Truncate(_) => "truncate",
            Event::RuleReminder(_) => "rule_reminder",
            Event::RunEnd(_) => "run_end",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub seq: u64,
    #[serde(flatten)]
    pub event: Event,
}

/// Numbers events, keeps them in memory and streams them to an optional sink.
pub struct Recorder {
    header: TraceHeader,
    events: Vec<TraceEvent>,
    sink: Option<Box<dyn Write + Send>>,
}

impl fmt::Debug for Recorder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Recorder")
            .field("header", &self.header)
            .field("events", &self.events.len())
            .field("streaming", &self.sink.is_some())
            .finish()
    }
}

fn json_line<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("trace types serialize")
}

impl Recorder {
    pub fn in_memory(header: TraceHeader) -> Self {
        Self {
            header,
            events: Vec::new(),
            sink: None,
        }
    }

    /// Writes the header line immediately, then one flushed line per event.
    pub fn streaming(header: TraceHeader, mut sink: impl Write + Send + 'static) -> io::Result<Self> {
        writeln!(sink, "{}", json_line(&header))?;
        sink.flush()?;
        Ok(Self {
            header,
            events: Vec::new(),
            sink: Some(Box::new(sink)),
        })
    }

    pub fn record(&mut self, event: Event) -> io::Result<u64> {
        let seq = self.events.len() as u64 + 1;
        let event = TraceEvent { seq, event };
        if let Some(sink) = &mut self.sink {
            writeln!(sink, "{}", json_line(&event))?;
            sink.flush()?;
        }
        self.events.push(event);
        Ok(seq)
    }

    pub fn header(&self) -> &TraceHeader {
        &self.header
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn into_trace(self) -> Trace {
        Trace {
            header: self.header,
            events: self.events,
        }
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("cannot read trace {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("trace is empty")]
    Empty,
    #[error("line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error("unsupported trace format version {0}")]
    Version(u32),
    #[error("trace is truncated: last event is not run_end")]
    Truncated,
    #[error("unknown scenario {0:?} in trace header")]
    Scenario(String),
    #[error("incoherent tree events at seq {seq}: {reason}")]
    Incoherent { seq: u64, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub header: TraceHeader,
    pub events: Vec<TraceEvent>,
}

impl Trace {
    pub fn to_jsonl(&self) -> String {
        let mut out = json_line(&self.header);
        out.push('\n');
        for e in &self.events {
            out.push_str(&json_line(e));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, TraceError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or(TraceError::Empty)?;
        let header: TraceHeader =
            serde_json::from_str(first).map_err(|source| TraceError::Parse { line: 1, source })?;
        if header.format_version != FORMAT_VERSION {
            return Err(TraceError::Version(header.format_version));
        }
        let events = lines
            .map(|(i, l)| serde_json::from_str(l).map_err(|source| TraceError::Parse { line: i + 1, source }))
            .collect::<Result<_, _>>()?;
        Ok(Self { header, events })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TraceError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| TraceError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn llm_calls(&self) -> impl Iterator<Item = (u64, &LlmCall)> {
        self.events.iter().filter_map(|e| match &e.event {
            Event::LlmCall(c) => Some((e.seq, c)),
            _ => None,
        })
    }

    pub fn env_steps(&self) -> impl Iterator<Item = (u64, &EnvStep)> {
        self.events.iter().filter_map(|e| match &e.event {
            Event::EnvStep(s) => Some((e.seq, s)),
            _ => None,
        })
    }

    pub fn run_end(&self) -> Option<&RunEnd> {
        match self.events.last().map(|e| &e.event) {
            Some(Event::RunEnd(end)) => Some(end),
            _ => None,
        }
    }
}

fn incoherent(seq: u64, reason: impl Into<String>) -> TraceError {
    TraceError::Incoherent {
        seq,
        reason: reason.into(),
    }
}

fn tree_err(seq: u64, e: TreeError) -> TraceError {
    incoherent(seq, e.to_string())
}

/// Applies one tree event. `tree` is `None` until the root expand.
fn apply_tree_event(tree: &mut Option<TaskTree>, seq: u64, event: &Event) -> Result<(), TraceError> {
    match event {
        Event::Expand(x) => match (tree.as_mut(), x.parent) {
            (None, None) => {
                *tree = Some(TaskTree::create_root(&x.task_name).map_err(|e| tree_err(seq, e))?);
            }
            (Some(t), Some(parent)) => {
                let id = t.expand(parent, &x.task_name).map_err(|e| tree_err(seq, e))?;
                if id != x.node {
                    return Err(incoherent(seq, format!("expand created {id}, trace says {}", x.node)));
                }
                if t.node(id).map_err(|e| tree_err(seq, e))?.depth != x.depth {
                    return Err(incoherent(seq, "depth mismatch"));
                }
            }
            (None, Some(_)) => return Err(incoherent(seq, "child expanded before root")),
            (Some(_), None) => return Err(incoherent(seq, "second root")),
        },
        Event::Refine(r) => {
            let t = tree.as_mut().ok_or_else(|| incoherent(seq, "refine before root"))?;
            let old = t.refine(r.node, r.plan.clone()).map_err(|e| tree_err(seq, e))?;
            if old != r.previous {
                return Err(incoherent(seq, format!("refine of {} did not replace its current plan", r.node)));
            }
        }
        Event::Close(c) => {
            let t = tree.as_mut().ok_or_else(|| incoherent(seq, "close before root"))?;
            let node = t.node(c.node).map_err(|e| tree_err(seq, e))?;
            // An empty refinement has already closed the node as done.
            if node.is_open() {
                t.close(c.node, c.status).map_err(|e| tree_err(seq, e))?;
            } else if node.status != c.status {
                return Err(incoherent(seq, format!("{} closed twice", c.node)));
            }
        }
        _ => {}
    }
    Ok(())
}

/// Rebuilds the final task tree from expand/refine/close events.
pub fn reconstruct_tree(trace: &Trace) -> Result<TaskTree, TraceError> {
    let mut tree = None;
    for e in &trace.events {
        apply_tree_event(&mut tree, e.seq, &e.event)?;
    }
    tree.ok_or(TraceError::Empty)
}

pub fn tree_stats_from_trace(trace: &Trace) -> Result<TreeStats, TraceError> {
    reconstruct_tree(trace).map(|t| t.stats())
}

/// Σ (input tokens × input price + output tokens × output price) / 1000 over
/// every model call. Token counts are estimates.
pub fn cost_estimate(trace: &Trace, price_per_1k_input: f64, price_per_1k_output: f64) -> f64 {
    trace
        .llm_calls()
        .map(|(_, c)| c.input_tokens as f64 * price_per_1k_input + c.output_tokens as f64 * price_per_1k_output)
        .sum::<f64>()
        / 1000.0
}

/// Token estimate for a prompt as sent.
pub fn prompt_tokens(messages: &[Message]) -> usize {
    messages.iter().map(|m| m.tokens_estimate).sum()
}

pub fn response_tokens(response: &str) -> usize {
    estimate_tokens(response)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Divergence {
    pub seq: u64,
    pub reason: String,
}

impl fmt::Display for Divergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "seq {}: {}", self.seq, self.reason)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReplayReport {
    pub events: usize,
    pub env_steps_checked: usize,
    pub llm_calls: usize,
    pub divergence: Option<Divergence>,
}

impl ReplayReport {
    pub fn is_clean(&self) -> bool {
        self.divergence.is_none()
    }
}

impl fmt::Display for ReplayReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.divergence {
            None => write!(
                f,
                "clean: {} events, {} env steps re-executed, {} model calls",
                self.events, self.env_steps_checked, self.llm_calls
            ),
            Some(d) => write!(f, "divergence at {d}"),
        }
    }
}

/// Replays a trace of a built-in scenario.
pub fn replay(trace: &Trace) -> Result<ReplayReport, TraceError> {
    let scenario = Scenario::builtin(&trace.header.scenario)
        .map_err(|_| TraceError::Scenario(trace.header.scenario.clone()))?;
    replay_with(trace, &scenario)
}

/// Re-executes every env step against a fresh environment and checks the
/// recorded observations, counters and tree events. Stops at the first
/// divergence. Truncated or empty traces are errors rather than divergences.
pub fn replay_with(trace: &Trace, scenario: &Scenario) -> Result<ReplayReport, TraceError> {
    if trace.events.is_empty() {
        return Err(TraceError::Empty);
    }
    if trace.run_end().is_none() {
        return Err(TraceError::Truncated);
    }
    let mut report = ReplayReport {
        events: trace.events.len(),
        env_steps_checked: 0,
        llm_calls: 0,
        divergence: None,
    };
    let mut env = KitchenEnv::new(scenario.clone());
    let mut tree = None;
    let mut accepted = 0usize;
    let mut last_call_index = 0u64;
    let mut last_seq = 0u64;

    let diverge = |report: &mut ReplayReport, seq: u64, reason: String| {
        report.divergence = Some(Divergence { seq, reason });
    };

    for e in &trace.events {
        if e.seq != last_seq + 1 {
            diverge(&mut report, e.seq, format!("expected seq {}", last_seq + 1));
            break;
        }
        last_seq = e.seq;
        match &e.event {
            Event::EnvStep(s) => {
                let obs = env.step(&s.action);
                report.env_steps_checked += 1;
                let ok = obs.error_feedback.is_none();
                if ok {
                    accepted += 1;
                }
                let reason = if ok != s.accepted {
                    Some(format!(
                        "action {:?} was {} on replay but recorded as {}",
                        s.action,
                        if ok { "accepted" } else { "rejected" },
                        if s.accepted { "accepted" } else { "rejected" }
                    ))
                } else if obs.error_feedback != s.feedback {
                    Some(format!("feedback for {:?} differs", s.action))
                } else if obs.text != s.observation {
                    Some(format!("observation after {:?} differs", s.action))
                } else if accepted != s.env_steps {
                    Some(format!("step counter {} but {} accepted steps", s.env_steps, accepted))
                } else {
                    None
                };
                if let Some(reason) = reason {
                    diverge(&mut report, e.seq, reason);
                    break;
                }
            }
            Event::LlmCall(c) => {
                report.llm_calls += 1;
                let reason = if c.call_index != last_call_index + 1 {
                    Some(format!("call index {} after {}", c.call_index, last_call_index))
                } else if tree.as_ref().is_none_or(|t: &TaskTree| t.node(c.node).is_err()) {
                    Some(format!("call for unknown node {}", c.node))
                } else if c.input_tokens != prompt_tokens(&c.messages) {
                    Some("input token count does not match the recorded prompt".to_string())
                } else {
                    None
                };
                last_call_index = c.call_index;
                if let Some(reason) = reason {
                    diverge(&mut report, e.seq, reason);
                    break;
                }
            }
            Event::RunEnd(end) => {
                let reason = if end.env_steps != accepted {
                    Some(format!("run_end reports {} steps, replay counted {accepted}", end.env_steps))
                } else if end.llm_calls != report.llm_calls {
                    Some(format!("run_end reports {} calls, trace has {}", end.llm_calls, report.llm_calls))
                } else if end.success != env.state().goal_reached() {
                    Some(format!("run_end success={} but goal reached={}", end.success, env.state().goal_reached()))
                } else {
                    None
                };
                if let Some(reason) = reason {
                    diverge(&mut report, e.seq, reason);
                    break;
                }
            }
            other => {
                if let Err(TraceError::Incoherent { seq, reason }) = apply_tree_event(&mut tree, e.seq, other) {
                    diverge(&mut report, seq, reason);
                    break;
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header() -> TraceHeader {
        TraceHeader::new("sandwich", &RunConfig::default())
    }

    #[test]
    fn first_event_is_seq_one() {
        let mut r = Recorder::in_memory(header());
        let seq = r
            .record(Event::RuleReminder(RuleReminder { call_index: 10 }))
            .unwrap();
        assert_eq!(seq, 1);
    }

    #[test]
    fn lines_round_trip() {
        let buf = std::sync::Arc::new(std::sync::Mutex::new(Vec::new()));
        struct Shared(std::sync::Arc<std::sync::Mutex<Vec<u8>>>);
        impl Write for Shared {
            fn write(&mut self, b: &[u8]) -> io::Result<usize> {
                self.0.lock().unwrap().write(b)
            }
            fn flush(&mut self) -> io::Result<()> {
                Ok(())
            }
        }
        let mut r = Recorder::streaming(header(), Shared(buf.clone())).unwrap();
        r.record(Event::Expand(Expand {
            node: NodeId(0),
            parent: None,
            task_name: "t".into(),
            depth: 1,
        }))
        .unwrap();
        r.record(Event::Refine(Refine {
            node: NodeId(0),
            previous: Plan::default(),
            plan: Plan::new("x", ["a"]),
        }))
        .unwrap();
        let text = String::from_utf8(buf.lock().unwrap().clone()).unwrap();
        assert_eq!(text.lines().count(), 3);
        let trace = Trace::parse(&text).unwrap();
        assert_eq!(trace, r.into_trace());
        assert!(text.lines().nth(1).unwrap().starts_with(r#"{"seq":1,"kind":"expand","payload":{"#));
    }

    #[test]
    fn empty_trace_is_error() {
        assert!(matches!(Trace::parse(""), Err(TraceError::Empty)));
        let t = Trace {
            header: header(),
            events: Vec::new(),
        };
        assert!(matches!(replay(&t), Err(TraceError::Empty)));
    }

    fn call(input: usize, output: usize) -> TraceEvent {
        TraceEvent {
            seq: 1,
            event: Event::LlmCall(LlmCall {
                node: NodeId(0),
                task_name: "t".into(),
                template: TemplateKind::InitialDecomposition,
                call_index: 1,
                messages: Vec::new(),
                response: String::new(),
                input_tokens: input,
                output_tokens: output,
                attempts: 1,
                depth: 1,
                open_nodes: 1,
            }),
        }
    }

    #[test]
    fn cost_arithmetic() {
        let t = Trace {
            header: header(),
            events: vec![call(1000, 1000)],
        };
        assert_eq!(cost_estimate(&t, 0.0, 0.0), 0.0);
        assert_eq!(cost_estimate(&t, 2.0, 8.0), 10.0);
    }

    #[test]
    fn truncated_trace_is_error() {
        let t = Trace {
            header: header(),
            events: vec![call(1, 1)],
        };
        assert!(matches!(replay(&t), Err(TraceError::Truncated)));
    }
}
