use std::time::Duration;

use thiserror::Error;

use super::{parse_plan, BackendResult, CallKey, ChatBackend, CompletionRequest, DecodeParams, ParseError};
use crate::context::{ContextWindow, Message, Role};
use crate::prompts::VariantMode;
use crate::tree::Plan;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    /// Retries after a retryable transport error.
    pub transport_retries: u32,
    /// Delay before the first transport retry; doubles each time.
    pub base_delay: Duration,
    /// Re-asks with the identical prompt after an unparseable response.
    pub parse_retries: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            transport_retries: 3,
            base_delay: Duration::from_millis(500),
            parse_retries: 1,
        }
    }
}

impl RetryPolicy {
    /// No sleeping between retries; for tests and scripted runs.
    pub fn immediate() -> Self {
        Self {
            base_delay: Duration::ZERO,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CallFailure {
    #[error("the window does not end with a pending user prompt")]
    NoPendingPrompt,
    #[error("context length exceeded again after overflow recovery")]
    DoubleOverflow,
    #[error("transport failure after {attempts} attempt(s): {detail}")]
    Transport { detail: String, attempts: u32 },
    #[error("unparseable response: {0}")]
    Parse(ParseError),
}

/// Everything that happened during one guarded call.
#[derive(Debug, Clone, PartialEq)]
pub struct CallReport {
    pub plan: Plan,
    pub response: String,
    /// Exactly what the successful attempt transmitted.
    pub sent: Vec<Message>,
    pub call_index: u64,
    pub cap_removed: usize,
    pub overflow_removed: usize,
    pub reminder_injected: bool,
    pub attempts: u32,
}

/// Sends the window's pending user prompt and parses the answer into a plan.
///
/// Order of operations: cap the window, count the call and maybe prepend the
/// rules, send. An overflow drops 32 old messages and resends the same prompt
/// once. The assistant reply is appended to the window on success.
pub fn call_llm(
    window: &mut ContextWindow,
    backend: &dyn ChatBackend,
    params: &DecodeParams,
    mode: VariantMode,
    key: &CallKey,
    policy: &RetryPolicy,
) -> Result<CallReport, CallFailure> {
    if window.len() < 2 || window.last().role != Role::User {
        return Err(CallFailure::NoPendingPrompt);
    }
    let cap_removed = window.enforce_cap();
    let call_index = window.bump_call_count();
    let reminder_injected = window.maybe_inject_rules();

    let mut overflow_removed = None;
    let mut transport_failures = 0u32;
    let mut parse_failures = 0u32;
    let mut attempts = 0u32;
    loop {
        attempts += 1;
        let result = backend.complete(&CompletionRequest {
            messages: window.render(),
            params,
            key,
        });
        match result {
            BackendResult::Text(text) => match parse_plan(&text, mode) {
                Ok(plan) => {
                    let sent = window.render().to_vec();
                    window
                        .append(Message::assistant(text.clone()))
                        .expect("parsed responses are non-empty");
                    return Ok(CallReport {
                        plan,
                        response: text,
                        sent,
                        call_index,
                        cap_removed,
                        overflow_removed: overflow_removed.unwrap_or(0),
                        reminder_injected,
                        attempts,
                    });
                }
                Err(_) if parse_failures < policy.parse_retries => parse_failures += 1,
                Err(e) => return Err(CallFailure::Parse(e)),
            },
            BackendResult::Overflow => {
                if overflow_removed.is_some() {
                    return Err(CallFailure::DoubleOverflow);
                }
                let pending = window.take_pending().expect("checked on entry");
                overflow_removed = Some(window.overflow_recover());
                window.append(pending).expect("pending prompt was valid");
            }
            BackendResult::Transport { detail, retryable } => {
                if !retryable || transport_failures >= policy.transport_retries {
                    return Err(CallFailure::Transport { detail, attempts });
                }
                std::thread::sleep(policy.base_delay * 2u32.pow(transport_failures));
                transport_failures += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{ScriptRecord, ScriptedBackend};
    use crate::llm::scripted::ScriptedFault;
    use crate::prompts::TemplateKind;

    const PLAN: &str = r#"{"think":"t","subtasks":["a"]}"#;

    fn key() -> CallKey {
        CallKey::new("task", TemplateKind::LeafBacktrack)
    }

    fn window(cap: usize) -> ContextWindow {
        ContextWindow::new(Message::head("HEAD"), cap, "RULES", 10).unwrap()
    }

    fn script(replies: Vec<Result<&str, ScriptedFault>>) -> ScriptedBackend {
        ScriptedBackend::new(
            replies
                .into_iter()
                .map(|r| match r {
                    Ok(text) => ScriptRecord::text(key(), text),
                    Err(fault) => ScriptRecord::fault(key(), fault),
                })
                .collect(),
        )
        .unwrap()
    }

    fn call(w: &mut ContextWindow, b: &ScriptedBackend) -> Result<CallReport, CallFailure> {
        call_llm(
            w,
            b,
            &DecodeParams::default(),
            VariantMode::Original,
            &key(),
            &RetryPolicy::immediate(),
        )
    }

    #[test]
    fn requires_pending_prompt() {
        let mut w = window(128);
        let b = script(vec![Ok(PLAN)]);
        assert_eq!(call(&mut w, &b).unwrap_err(), CallFailure::NoPendingPrompt);
    }

    #[test]
    fn cap_applied_once_before_send() {
        let mut w = window(128);
        for i in 0..129 {
            let m = if i % 2 == 0 { Message::user("u") } else { Message::assistant("a") };
            w.append(m).unwrap();
        }
        assert_eq!(w.len(), 130);
        let b = script(vec![Ok(PLAN)]);
        let report = call(&mut w, &b).unwrap();
        assert_eq!(report.cap_removed, 2);
        assert_eq!(report.sent.len(), 128);
        assert_eq!(w.len(), 129);
    }

    #[test]
    fn five_calls_append_in_order() {
        let mut w = window(128);
        let replies: Vec<String> = (0..5)
            .map(|i| format!(r#"{{"think":"t{i}","subtasks":[]}}"#))
            .collect();
        let b = script(replies.iter().map(|s| Ok(s.as_str())).collect());
        for i in 0..5 {
            w.append(Message::user(format!("p{i}"))).unwrap();
            let before = w.len();
            let report = call(&mut w, &b).unwrap();
            assert_eq!(w.len(), before + 1);
            assert_eq!(report.plan.think, format!("t{i}"));
        }
        let assistants: Vec<&str> = w
            .render()
            .iter()
            .filter(|m| m.role == Role::Assistant)
            .map(|m| m.text.as_str())
            .collect();
        assert_eq!(assistants, replies.iter().map(String::as_str).collect::<Vec<_>>());
    }

    #[test]
    fn tenth_call_carries_rules() {
        let mut w = window(128);
        let b = script(vec![Ok(PLAN); 10]);
        for i in 1..=10 {
            w.append(Message::user(format!("p{i}"))).unwrap();
            let report = call(&mut w, &b).unwrap();
            assert_eq!(report.reminder_injected, i == 10);
            let pending = &report.sent.last().unwrap().text;
            assert_eq!(pending.starts_with("RULES\n\n"), i == 10, "call {i}");
        }
    }

    #[test]
    fn overflow_recovers_and_resends_same_prompt() {
        let mut w = window(1000);
        for i in 0..40 {
            let m = if i % 2 == 0 { Message::user("u") } else { Message::assistant("a") };
            w.append(m).unwrap();
        }
        w.append(Message::user("pending")).unwrap();
        let b = script(vec![Err(ScriptedFault::Overflow), Ok(PLAN)]);
        let report = call(&mut w, &b).unwrap();
        assert_eq!(report.overflow_removed, 32);
        assert_eq!(report.attempts, 2);
        assert_eq!(report.sent.len(), 41 - 32 + 1);
        assert_eq!(report.sent.last().unwrap().text, "pending");
        assert_eq!(report.sent[0].text, "HEAD");
    }

    #[test]
    fn double_overflow_fails() {
        let mut w = window(1000);
        w.append(Message::user("pending")).unwrap();
        let b = script(vec![Err(ScriptedFault::Overflow), Err(ScriptedFault::Overflow)]);
        assert_eq!(call(&mut w, &b).unwrap_err(), CallFailure::DoubleOverflow);
    }

    #[test]
    fn transport_retried_three_times() {
        let mut w = window(128);
        w.append(Message::user("p")).unwrap();
        let b = script(vec![
            Err(ScriptedFault::Transport),
            Err(ScriptedFault::Transport),
            Err(ScriptedFault::Transport),
            Ok(PLAN),
        ]);
        assert_eq!(call(&mut w, &b).unwrap().attempts, 4);

        let mut w = window(128);
        w.append(Message::user("p")).unwrap();
        let b = script(vec![Err(ScriptedFault::Transport); 4]);
        assert!(matches!(
            call(&mut w, &b).unwrap_err(),
            CallFailure::Transport { attempts: 4, .. }
        ));
    }

    #[test]
    fn parse_failure_reasked_once() {
        let mut w = window(128);
        w.append(Message::user("p")).unwrap();
        let b = script(vec![Ok("garbage"), Ok(PLAN)]);
        let report = call(&mut w, &b).unwrap();
        assert_eq!(report.attempts, 2);
        assert_eq!(w.len(), 3);

        let mut w = window(128);
        w.append(Message::user("p")).unwrap();
        let b = script(vec![Ok("garbage"), Ok("still garbage")]);
        match call(&mut w, &b).unwrap_err() {
            CallFailure::Parse(e) => assert_eq!(e.raw, "still garbage"),
            other => panic!("{other:?}"),
        }
        assert_eq!(w.len(), 2, "failed calls leave no assistant message");
    }
}
