//! The single shared message history sent to the model.
//!
//! Index 0 always holds the fixed head (system prompt, environment rules and an
//! optional one-shot demonstration). Everything after it is an alternating
//! user/assistant dialogue that is trimmed oldest-first.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default window cap, in messages (64 user/assistant rounds).
pub const DEFAULT_WINDOW_CAP: usize = 128;
/// Default number of model calls between rule reminders.
pub const DEFAULT_REMINDER_INTERVAL: u64 = 10;
/// Number of messages dropped after a context-length overflow.
pub const OVERFLOW_DROP: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    SystemFixedHead,
    User,
    Assistant,
}

impl Role {
    /// Role name on the chat-completions wire.
    pub fn wire_name(self) -> &'static str {
        match self {
            Role::SystemFixedHead => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub text: String,
    pub tokens_estimate: usize,
}

impl Message {
    pub fn new(role: Role, text: impl Into<String>) -> Self {
        let text = text.into();
        let tokens_estimate = estimate_tokens(&text);
        Self {
            role,
            text,
            tokens_estimate,
        }
    }

    pub fn head(text: impl Into<String>) -> Self {
        Self::new(Role::SystemFixedHead, text)
    }

    pub fn user(text: impl Into<String>) -> Self {
        Self::new(Role::User, text)
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self::new(Role::Assistant, text)
    }

    fn set_text(&mut self, text: String) {
        self.tokens_estimate = estimate_tokens(&text);
        self.text = text;
    }
}

/// Whitespace-token count scaled by 4/3, rounded up. Approximate; used for
/// metrics and cost only.
pub fn estimate_tokens(text: &str) -> usize {
    let words = text.split_whitespace().count();
    (words * 4).div_ceil(3)
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WindowError {
    #[error("the window already has a fixed head message")]
    DuplicateHead,
    #[error("message text must not be empty")]
    EmptyText,
    #[error("the head message must have the system-fixed-head role")]
    HeadRole,
    #[error("window cap must be at least 3, got {0}")]
    CapTooSmall(usize),
    #[error("reminder interval must be positive")]
    ZeroInterval,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextWindow {
    messages: Vec<Message>,
    cap: usize,
    call_count: u64,
    rules_text: String,
    reminder_interval: u64,
}

impl ContextWindow {
    pub fn new(
        head: Message,
        cap: usize,
        rules_text: impl Into<String>,
        reminder_interval: u64,
    ) -> Result<Self, WindowError> {
        if head.role != Role::SystemFixedHead {
            return Err(WindowError::HeadRole);
        }
        if head.text.is_empty() {
            return Err(WindowError::EmptyText);
        }
        if cap < 3 {
            return Err(WindowError::CapTooSmall(cap));
        }
        if reminder_interval == 0 {
            return Err(WindowError::ZeroInterval);
        }
        Ok(Self {
            messages: vec![head],
            cap,
            call_count: 0,
            rules_text: rules_text.into(),
            reminder_interval,
        })
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    pub fn call_count(&self) -> u64 {
        self.call_count
    }

    pub fn head(&self) -> &Message {
        &self.messages[0]
    }

    pub fn last(&self) -> &Message {
        self.messages.last().expect("window always holds its head")
    }

    /// Appends `msg` at the end. Never truncates.
    pub fn append(&mut self, msg: Message) -> Result<(), WindowError> {
        if msg.role == Role::SystemFixedHead {
            return Err(WindowError::DuplicateHead);
        }
        if msg.text.is_empty() {
            return Err(WindowError::EmptyText);
        }
        self.messages.push(msg);
        Ok(())
    }

    /// Drops the oldest exchange after the head (positions 1 and 2) until the
    /// window fits its cap. Returns the number of messages removed.
    pub fn enforce_cap(&mut self) -> usize {
        let before = self.messages.len();
        while self.messages.len() > self.cap {
            self.messages.drain(1..3);
        }
        before - self.messages.len()
    }

    /// Recovery after a context-length error: drops positions 1..=32, or every
    /// non-head message if fewer exist. Returns the number removed.
    pub fn overflow_recover(&mut self) -> usize {
        let end = (1 + OVERFLOW_DROP).min(self.messages.len());
        self.messages.drain(1..end);
        end - 1
    }

    pub(crate) fn bump_call_count(&mut self) -> u64 {
        self.call_count += 1;
        self.call_count
    }

    /// Prepends the rules to the pending user message when the call counter
    /// lands on a multiple of the reminder interval. Returns whether it did.
    pub fn maybe_inject_rules(&mut self) -> bool {
        if self.call_count == 0 || !self.call_count.is_multiple_of(self.reminder_interval) {
            return false;
        }
        if self.messages.len() < 2 || self.rules_text.is_empty() {
            return false;
        }
        let pending = self.messages.last_mut().expect("checked above");
        if pending.role != Role::User {
            return false;
        }
        let text = format!("{}\n\n{}", self.rules_text, pending.text);
        pending.set_text(text);
        true
    }

    /// Removes and returns the pending user message, if the window ends in one.
    pub(crate) fn take_pending(&mut self) -> Option<Message> {
        if self.messages.len() > 1 && self.last().role == Role::User {
            self.messages.pop()
        } else {
            None
        }
    }

    /// The exact message sequence transmitted to the backend.
    pub fn render(&self) -> &[Message] {
        &self.messages
    }

    #[cfg(test)]
    pub(crate) fn set_call_count(&mut self, n: u64) {
        self.call_count = n;
    }
}
