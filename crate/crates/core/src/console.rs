//! Operator console protocol: the versioned JSON messages exchanged over
//! the serve-mode WebSocket, a snapshot view folded from the event log, and
//! the prompt broker that turns console decisions into operator answers.

use std::collections::BTreeMap;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::bus::LogEntry;
use crate::controller::{
    ControllerError, OperatorDecision, OperatorPolicy, Phase, Prompt, CH_CONTROLLER, CH_DECISION, CH_PROMPT,
    SVC_DRIVE, SVC_EDGE_SCAN, SVC_MOVE, SVC_VISION,
};
use crate::devices::Side;

pub const CONSOLE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConsoleError {
    #[error("malformed console message: {0}")]
    Malformed(String),
    #[error("unsupported schema version {0} (expected {CONSOLE_SCHEMA_VERSION})")]
    Version(u32),
    #[error("unexpected {0:?} message from console")]
    Unexpected(ConsoleKind),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConsoleKind {
    StateSnapshot,
    AScanFrame,
    CameraPair,
    Prompt,
    Decision,
    Ack,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsoleMessage {
    pub v: u32,
    pub kind: ConsoleKind,
    pub seq: u64,
    pub logical_time: u64,
    pub payload: Value,
}

impl ConsoleMessage {
    pub fn new(kind: ConsoleKind, seq: u64, logical_time: u64, payload: Value) -> Self {
        Self {
            v: CONSOLE_SCHEMA_VERSION,
            kind,
            seq,
            logical_time,
            payload,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("message serializes")
    }

    pub fn parse(text: &str) -> Result<Self, ConsoleError> {
        let raw: Value = serde_json::from_str(text).map_err(|e| ConsoleError::Malformed(e.to_string()))?;
        match raw.get("v").and_then(Value::as_u64) {
            Some(v) if v == u64::from(CONSOLE_SCHEMA_VERSION) => {}
            Some(v) => return Err(ConsoleError::Version(v as u32)),
            None => return Err(ConsoleError::Malformed("missing schema version `v`".into())),
        }
        serde_json::from_value(raw).map_err(|e| ConsoleError::Malformed(e.to_string()))
    }
}

/// Payload of a console Decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionPayload {
    pub prompt_seq: u64,
    pub decision: OperatorDecision,
}

impl DecisionPayload {
    pub fn from_message(msg: &ConsoleMessage) -> Result<Self, ConsoleError> {
        if msg.kind != ConsoleKind::Decision {
            return Err(ConsoleError::Unexpected(msg.kind));
        }
        serde_json::from_value(msg.payload.clone()).map_err(|e| ConsoleError::Malformed(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AckStatus {
    Accepted,
    /// Already answered; acknowledged again but not re-delivered.
    Duplicate,
    /// Refers to a prompt that is not the outstanding one; the console
    /// should re-sync from the next snapshot.
    Stale,
    KindMismatch,
    Invalid,
    Closed,
}

impl AckStatus {
    pub fn is_ok(self) -> bool {
        matches!(self, Self::Accepted | Self::Duplicate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AckPayload {
    pub prompt_seq: Option<u64>,
    pub status: AckStatus,
    pub message: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeView {
    pub suture: usize,
    pub side: Side,
    pub found: bool,
    pub edge_position_mm: Option<f64>,
    pub attempts_used: u64,
}

/// Everything the console needs to redraw from scratch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSnapshot {
    pub phase: Phase,
    pub suture: usize,
    pub side: Side,
    pub logical_time_ms: u64,
    pub prompt: Option<Prompt>,
    pub arm_connected: bool,
    pub drives: usize,
    pub engaged_drives: usize,
    pub interventions: usize,
    pub last_edge: Option<EdgeView>,
    pub last_verdict: Option<String>,
    pub finished: bool,
    pub aborted: Option<String>,
}

impl Default for StateSnapshot {
    fn default() -> Self {
        Self {
            phase: Phase::LoadVessels,
            suture: 1,
            side: Side::Right,
            logical_time_ms: 0,
            prompt: None,
            arm_connected: true,
            drives: 0,
            engaged_drives: 0,
            interventions: 0,
            last_edge: None,
            last_verdict: None,
            finished: false,
            aborted: None,
        }
    }
}

/// Folds event-log entries into a [`StateSnapshot`].
#[derive(Debug, Clone, Default)]
pub struct SnapshotTracker {
    snapshot: StateSnapshot,
}

impl SnapshotTracker {
    pub fn snapshot(&self) -> &StateSnapshot {
        &self.snapshot
    }

    /// Returns true when the entry changed something the console shows.
    pub fn apply(&mut self, e: &LogEntry) -> bool {
        let s = &mut self.snapshot;
        s.logical_time_ms = e.t;
        let p = &e.payload;
        match (e.channel.as_str(), e.kind.as_str()) {
            (CH_CONTROLLER, "transition") => {
                if let Ok(phase) = serde_json::from_value(p["to"].clone()) {
                    s.phase = phase;
                }
                if let Some(k) = p["suture"].as_u64() {
                    s.suture = k as usize;
                }
                if let Ok(side) = serde_json::from_value(p["side"].clone()) {
                    s.side = side;
                }
                s.finished = s.phase == Phase::Done;
                true
            }
            (CH_CONTROLLER, "abort") => {
                s.aborted = Some(p["reason"].as_str().unwrap_or("aborted").to_string());
                s.finished = true;
                true
            }
            (CH_PROMPT, "prompt") => {
                s.prompt = serde_json::from_value(p.clone()).ok();
                true
            }
            (CH_DECISION, "decision") => {
                let kind = s.prompt.as_ref().map(|q| q.kind);
                if matches!(
                    kind,
                    Some(crate::controller::PromptKind::RetryMissed | crate::controller::PromptKind::ManualJog)
                ) {
                    s.interventions += 1;
                }
                s.prompt = None;
                true
            }
            (SVC_MOVE, "connectivity") => {
                s.arm_connected = p["connected"].as_bool().unwrap_or(true);
                true
            }
            (SVC_EDGE_SCAN, "response") => {
                s.last_edge = Some(EdgeView {
                    suture: s.suture,
                    side: s.side,
                    found: p["found"].as_bool().unwrap_or(false),
                    edge_position_mm: p["edge_position_mm"].as_f64(),
                    attempts_used: p["attempts_used"].as_u64().unwrap_or(0),
                });
                true
            }
            (SVC_DRIVE, "response") => {
                if !p["redundant"].as_bool().unwrap_or(false) {
                    s.drives += 1;
                    if p["engaged"].as_bool().unwrap_or(false) {
                        s.engaged_drives += 1;
                    }
                }
                true
            }
            (SVC_VISION, "response") => {
                s.last_verdict = p["verdict"].as_str().map(str::to_string);
                true
            }
            _ => false,
        }
    }
}

/// Numbers outgoing console messages.
#[derive(Debug, Default)]
pub struct MessageSequencer {
    next: u64,
}

impl MessageSequencer {
    pub fn message(&mut self, kind: ConsoleKind, logical_time: u64, payload: Value) -> ConsoleMessage {
        let seq = self.next;
        self.next += 1;
        ConsoleMessage::new(kind, seq, logical_time, payload)
    }

    pub fn snapshot(&mut self, s: &StateSnapshot) -> ConsoleMessage {
        self.message(
            ConsoleKind::StateSnapshot,
            s.logical_time_ms,
            serde_json::to_value(s).expect("snapshot serializes"),
        )
    }

    pub fn ack(&mut self, logical_time: u64, prompt_seq: Option<u64>, status: AckStatus, message: Option<String>) -> ConsoleMessage {
        let payload = AckPayload {
            prompt_seq,
            status,
            message,
        };
        self.message(
            ConsoleKind::Ack,
            logical_time,
            serde_json::to_value(payload).expect("ack serializes"),
        )
    }
}

#[derive(Debug, Default)]
struct BrokerState {
    outstanding: Option<Prompt>,
    answered: BTreeMap<u64, OperatorDecision>,
    delivery: Option<(u64, OperatorDecision)>,
    closed: bool,
}

/// Hands prompts to the console and collects exactly one decision for each.
#[derive(Debug, Clone, Default)]
pub struct PromptBroker {
    inner: Arc<(Mutex<BrokerState>, Condvar)>,
}

impl PromptBroker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn outstanding(&self) -> Option<Prompt> {
        self.inner.0.lock().expect("broker lock").outstanding.clone()
    }

    /// Opening a prompt that is already open or answered is a no-op, so a
    /// server may open it before the policy does.
    pub fn open(&self, prompt: Prompt) {
        let mut st = self.inner.0.lock().expect("broker lock");
        if st.answered.contains_key(&prompt.seq) || st.outstanding.as_ref().is_some_and(|p| p.seq == prompt.seq) {
            return;
        }
        st.outstanding = Some(prompt);
        st.delivery = None;
    }

    pub fn submit(&self, prompt_seq: u64, decision: OperatorDecision) -> AckStatus {
        let (lock, cv) = &*self.inner;
        let mut st = lock.lock().expect("broker lock");
        if st.answered.contains_key(&prompt_seq) {
            return AckStatus::Duplicate;
        }
        if st.closed {
            return AckStatus::Closed;
        }
        let Some(prompt) = st.outstanding.as_ref() else {
            return AckStatus::Stale;
        };
        if prompt.seq != prompt_seq {
            return AckStatus::Stale;
        }
        if !decision.answers(prompt.kind) {
            return AckStatus::KindMismatch;
        }
        st.answered.insert(prompt_seq, decision);
        st.outstanding = None;
        st.delivery = Some((prompt_seq, decision));
        cv.notify_all();
        AckStatus::Accepted
    }

    /// Blocks until the prompt is answered or the broker closes.
    pub fn wait(&self, prompt_seq: u64, timeout: Option<Duration>) -> Option<OperatorDecision> {
        let (lock, cv) = &*self.inner;
        let mut st = lock.lock().expect("broker lock");
        loop {
            if let Some((seq, d)) = st.delivery {
                if seq == prompt_seq {
                    st.delivery = None;
                    return Some(d);
                }
            }
            if st.closed {
                return None;
            }
            st = match timeout {
                Some(t) => {
                    let (g, res) = cv.wait_timeout(st, t).expect("broker lock");
                    if res.timed_out() {
                        return None;
                    }
                    g
                }
                None => cv.wait(st).expect("broker lock"),
            };
        }
    }

    pub fn close(&self) {
        let (lock, cv) = &*self.inner;
        lock.lock().expect("broker lock").closed = true;
        cv.notify_all();
    }
}

/// Operator policy answered from the console through a [`PromptBroker`].
pub struct ConsolePolicy {
    broker: PromptBroker,
}

impl ConsolePolicy {
    pub fn new(broker: PromptBroker) -> Self {
        Self { broker }
    }
}

impl OperatorPolicy for ConsolePolicy {
    fn decide(&mut self, prompt: &Prompt) -> Result<OperatorDecision, ControllerError> {
        self.broker.open(prompt.clone());
        self.broker
            .wait(prompt.seq, None)
            .ok_or_else(|| ControllerError::Policy("console closed before answering".into()))
    }
}

/// Console message carrying a prompt.
pub fn prompt_message(seq: &mut MessageSequencer, prompt: &Prompt) -> ConsoleMessage {
    seq.message(
        ConsoleKind::Prompt,
        prompt.logical_time_ms,
        serde_json::to_value(prompt).expect("prompt serializes"),
    )
}

/// Builds a Decision message as a console would send it.
pub fn decision_message(seq: u64, prompt_seq: u64, decision: OperatorDecision) -> ConsoleMessage {
    ConsoleMessage::new(ConsoleKind::Decision, seq, 0, json!({ "prompt_seq": prompt_seq, "decision": decision }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::PromptKind;

    fn prompt(seq: u64, kind: PromptKind) -> Prompt {
        Prompt {
            seq,
            kind,
            suture: 2,
            side: Some(Side::Left),
            logical_time_ms: 10,
        }
    }

    #[test]
    fn message_roundtrip_and_version_check() {
        let m = decision_message(4, 7, OperatorDecision::RetryYes);
        let back = ConsoleMessage::parse(&m.to_json()).unwrap();
        assert_eq!(back, m);
        assert_eq!(DecisionPayload::from_message(&back).unwrap().prompt_seq, 7);

        let old = m.to_json().replace("\"v\":1", "\"v\":9");
        assert!(matches!(ConsoleMessage::parse(&old), Err(ConsoleError::Version(9))));
        assert!(matches!(
            ConsoleMessage::parse("{\"kind\":\"Ack\"}"),
            Err(ConsoleError::Malformed(_))
        ));
    }

    #[test]
    fn broker_accepts_once() {
        let b = PromptBroker::new();
        b.open(prompt(3, PromptKind::RetryMissed));
        assert_eq!(b.submit(3, OperatorDecision::RetryYes), AckStatus::Accepted);
        assert_eq!(b.submit(3, OperatorDecision::RetryNo), AckStatus::Duplicate);
        assert_eq!(b.wait(3, Some(Duration::from_millis(10))), Some(OperatorDecision::RetryYes));
        // duplicates never produce a second delivery
        assert_eq!(b.wait(3, Some(Duration::from_millis(10))), None);
    }

    #[test]
    fn broker_rejects_stale_and_mismatched() {
        let b = PromptBroker::new();
        assert_eq!(b.submit(0, OperatorDecision::RetryYes), AckStatus::Stale);
        b.open(prompt(5, PromptKind::ManualJog));
        assert_eq!(b.submit(4, OperatorDecision::RetryYes), AckStatus::Stale);
        assert_eq!(b.submit(5, OperatorDecision::RetryYes), AckStatus::KindMismatch);
        assert!(b.outstanding().is_some());
        let jog = OperatorDecision::ManualJog { dx: 0.5, dy: 0.0, dz: 0.0 };
        assert_eq!(b.submit(5, jog), AckStatus::Accepted);
        assert!(b.outstanding().is_none());
    }

    #[test]
    fn reopening_keeps_an_early_answer() {
        let b = PromptBroker::new();
        b.open(prompt(2, PromptKind::PullAndCut));
        assert_eq!(b.submit(2, OperatorDecision::PullAndCutDone), AckStatus::Accepted);
        b.open(prompt(2, PromptKind::PullAndCut));
        assert!(b.outstanding().is_none());
        let mut policy = ConsolePolicy::new(b.clone());
        assert_eq!(policy.decide(&prompt(2, PromptKind::PullAndCut)).unwrap(), OperatorDecision::PullAndCutDone);
    }

    #[test]
    fn policy_unblocks_on_submit() {
        let b = PromptBroker::new();
        let mut policy = ConsolePolicy::new(b.clone());
        let h = std::thread::spawn(move || policy.decide(&prompt(1, PromptKind::TieOff)));
        while b.outstanding().is_none() {
            std::thread::yield_now();
        }
        assert_eq!(b.submit(1, OperatorDecision::TieOffDone), AckStatus::Accepted);
        assert_eq!(h.join().unwrap().unwrap(), OperatorDecision::TieOffDone);
    }

    #[test]
    fn closing_fails_pending_decision() {
        let b = PromptBroker::new();
        let mut policy = ConsolePolicy::new(b.clone());
        let h = std::thread::spawn(move || policy.decide(&prompt(1, PromptKind::PullAndCut)));
        while b.outstanding().is_none() {
            std::thread::yield_now();
        }
        b.close();
        assert!(h.join().unwrap().is_err());
        assert_eq!(b.submit(1, OperatorDecision::PullAndCutDone), AckStatus::Closed);
    }

    #[test]
    fn tracker_follows_transitions_and_prompts() {
        let mut t = SnapshotTracker::default();
        let entry = |seq: u64, channel: &str, kind: &str, payload: Value| LogEntry {
            seq,
            t: seq * 100,
            channel: channel.into(),
            kind: kind.into(),
            payload,
        };
        assert!(t.apply(&entry(
            0,
            CH_CONTROLLER,
            "transition",
            json!({"from": "MissedPrompt", "to": "CaptureBefore", "event": "RetryYes", "suture": 3, "side": "Left"})
        )));
        let s = t.snapshot();
        assert_eq!((s.phase, s.suture, s.side), (Phase::CaptureBefore, 3, Side::Left));
        let p = prompt(9, PromptKind::RetryMissed);
        t.apply(&entry(1, CH_PROMPT, "prompt", serde_json::to_value(&p).unwrap()));
        assert_eq!(t.snapshot().prompt.as_ref().map(|q| q.seq), Some(9));
        t.apply(&entry(2, CH_DECISION, "decision", json!({"prompt_seq": 9, "decision": "RetryYes"})));
        assert!(t.snapshot().prompt.is_none());
        assert_eq!(t.snapshot().interventions, 1);
        assert!(!t.apply(&entry(3, "unrelated", "x", Value::Null)));
    }
}
