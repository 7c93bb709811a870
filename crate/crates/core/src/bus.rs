//! In-process message bus over a logical clock: request/response services,
//! publish/subscribe topics and scheduled events, all ordered by
//! `(time, seq)` and written to a JSONL event log.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum BusError {
    #[error("no endpoint registered for {0}")]
    NoEndpoint(String),
    #[error("connection lost: {0}")]
    ConnectionLost(String),
    #[error("{service}: {message}")]
    Handler { service: String, message: String },
}

impl BusError {
    pub fn handler(service: &str, message: impl Into<String>) -> Self {
        BusError::Handler {
            service: service.to_string(),
            message: message.into(),
        }
    }
}

pub type BusResult<T> = std::result::Result<T, BusError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusConfig {
    pub service_latency_ms: u64,
    pub topic_latency_ms: u64,
}

impl Default for BusConfig {
    fn default() -> Self {
        Self {
            service_latency_ms: 2,
            topic_latency_ms: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub seq: u64,
    pub t: u64,
    pub channel: String,
    pub kind: String,
    pub payload: Value,
}

/// Handler result: response payload plus how long the handler kept the
/// service busy.
#[derive(Debug, Clone, PartialEq)]
pub struct Reply {
    pub payload: Value,
    pub busy_ms: u64,
}

impl Reply {
    pub fn new(payload: Value, busy_ms: u64) -> Self {
        Self { payload, busy_ms }
    }

    pub fn instant(payload: Value) -> Self {
        Self { payload, busy_ms: 0 }
    }
}

/// Side effects a handler may request; applied by the bus once the handler
/// returns.
#[derive(Debug, Default)]
pub struct Ctx {
    now_ms: u64,
    scheduled: Vec<(u64, String, Value)>,
    published: Vec<(String, Value)>,
    connectivity: Vec<(String, bool)>,
    notes: Vec<(String, Value)>,
}

impl Ctx {
    pub fn now(&self) -> u64 {
        self.now_ms
    }

    pub fn schedule(&mut self, at_ms: u64, channel: &str, payload: Value) {
        self.scheduled.push((at_ms, channel.to_string(), payload));
    }

    pub fn publish(&mut self, topic: &str, payload: Value) {
        self.published.push((topic.to_string(), payload));
    }

    pub fn set_connected(&mut self, service: &str, connected: bool) {
        self.connectivity.push((service.to_string(), connected));
    }

    /// Extra log line attributed to `channel`.
    pub fn note(&mut self, channel: &str, payload: Value) {
        self.notes.push((channel.to_string(), payload));
    }
}

pub type ServiceFn<S> = Box<dyn FnMut(&mut S, &mut Ctx, &Value) -> BusResult<Reply> + Send>;
pub type TopicFn<S> = Box<dyn FnMut(&mut S, &mut Ctx, &Value) + Send>;
pub type AdvanceHook = Box<dyn FnMut(u64, u64) + Send>;

struct Service<S> {
    handler: Option<ServiceFn<S>>,
    latency_ms: u64,
    connected: bool,
}

enum Pending {
    Event { channel: String, payload: Value },
    Delivery { topic: String, payload: Value, subscribers: Vec<usize> },
}

pub struct Bus<S> {
    state: S,
    config: BusConfig,
    now_ms: u64,
    seq: u64,
    event_id: u64,
    services: BTreeMap<String, Service<S>>,
    topics: BTreeMap<String, Vec<Option<TopicFn<S>>>>,
    event_handlers: BTreeMap<String, Option<TopicFn<S>>>,
    queue: BinaryHeap<Reverse<(u64, u64)>>,
    pending: BTreeMap<u64, Pending>,
    log: Vec<LogEntry>,
    on_advance: Option<AdvanceHook>,
    on_log: Option<Box<dyn FnMut(&LogEntry) + Send>>,
}

impl<S> Bus<S> {
    pub fn new(state: S, config: BusConfig) -> Self {
        Self {
            state,
            config,
            now_ms: 0,
            seq: 0,
            event_id: 0,
            services: BTreeMap::new(),
            topics: BTreeMap::new(),
            event_handlers: BTreeMap::new(),
            queue: BinaryHeap::new(),
            pending: BTreeMap::new(),
            log: Vec::new(),
            on_advance: None,
            on_log: None,
        }
    }

    pub fn now(&self) -> u64 {
        self.now_ms
    }

    pub fn state(&self) -> &S {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut S {
        &mut self.state
    }

    pub fn into_state(self) -> S {
        self.state
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    /// Called with `(from, to)` whenever the clock moves forward; serve
    /// mode uses it to pace logical time against the wall clock.
    pub fn set_advance_hook(&mut self, hook: AdvanceHook) {
        self.on_advance = Some(hook);
    }

    /// Called for every log entry as it is written.
    pub fn set_log_hook(&mut self, hook: Box<dyn FnMut(&LogEntry) + Send>) {
        self.on_log = Some(hook);
    }

    pub fn register_service(&mut self, name: &str, latency_ms: Option<u64>, handler: ServiceFn<S>) {
        self.services.insert(
            name.to_string(),
            Service {
                handler: Some(handler),
                latency_ms: latency_ms.unwrap_or(self.config.service_latency_ms),
                connected: true,
            },
        );
    }

    pub fn subscribe(&mut self, topic: &str, handler: TopicFn<S>) {
        self.topics.entry(topic.to_string()).or_default().push(Some(handler));
    }

    pub fn on_event(&mut self, channel: &str, handler: TopicFn<S>) {
        self.event_handlers.insert(channel.to_string(), Some(handler));
    }

    pub fn set_connected(&mut self, service: &str, connected: bool) -> BusResult<()> {
        let s = self
            .services
            .get_mut(service)
            .ok_or_else(|| BusError::NoEndpoint(service.to_string()))?;
        if s.connected != connected {
            s.connected = connected;
            self.record(service, "connectivity", serde_json::json!({ "connected": connected }));
        }
        Ok(())
    }

    pub fn is_connected(&self, service: &str) -> Option<bool> {
        self.services.get(service).map(|s| s.connected)
    }

    pub fn record(&mut self, channel: &str, kind: &str, payload: Value) {
        let entry = LogEntry {
            seq: self.seq,
            t: self.now_ms,
            channel: channel.to_string(),
            kind: kind.to_string(),
            payload,
        };
        self.seq += 1;
        if let Some(h) = self.on_log.as_mut() {
            h(&entry);
        }
        self.log.push(entry);
    }

    fn advance_clock(&mut self, to_ms: u64) {
        if to_ms > self.now_ms {
            let from = self.now_ms;
            self.now_ms = to_ms;
            if let Some(h) = self.on_advance.as_mut() {
                h(from, to_ms);
            }
        }
    }

    fn enqueue(&mut self, at_ms: u64, item: Pending) {
        let id = self.event_id;
        self.event_id += 1;
        self.queue.push(Reverse((at_ms.max(self.now_ms), id)));
        self.pending.insert(id, item);
    }

    pub fn schedule(&mut self, at_ms: u64, channel: &str, payload: Value) {
        self.record(channel, "schedule", serde_json::json!({ "at": at_ms, "payload": payload }));
        self.enqueue(
            at_ms,
            Pending::Event {
                channel: channel.to_string(),
                payload,
            },
        );
    }

    /// Fans out to the subscribers present now, delivered after the topic
    /// latency.
    pub fn publish(&mut self, topic: &str, payload: Value) {
        let subscribers: Vec<usize> = self.topics.get(topic).map(|v| (0..v.len()).collect()).unwrap_or_default();
        self.record(topic, "publish", payload.clone());
        let at = self.now_ms + self.config.topic_latency_ms;
        self.enqueue(
            at,
            Pending::Delivery {
                topic: topic.to_string(),
                payload,
                subscribers,
            },
        );
    }

    fn apply_ctx(&mut self, ctx: Ctx) {
        for (channel, payload) in ctx.notes {
            self.record(&channel, "note", payload);
        }
        for (service, connected) in ctx.connectivity {
            // unknown services are ignored; handlers may toggle optional endpoints
            let _ = self.set_connected(&service, connected);
        }
        for (at, channel, payload) in ctx.scheduled {
            self.schedule(at, &channel, payload);
        }
        for (topic, payload) in ctx.published {
            self.publish(&topic, payload);
        }
    }

    fn new_ctx(&self) -> Ctx {
        Ctx {
            now_ms: self.now_ms,
            ..Ctx::default()
        }
    }

    fn dispatch(&mut self, item: Pending) {
        match item {
            Pending::Event { channel, payload } => {
                self.record(&channel, "event", payload.clone());
                let Some(mut h) = self.event_handlers.get_mut(&channel).and_then(Option::take) else {
                    return;
                };
                let mut ctx = self.new_ctx();
                h(&mut self.state, &mut ctx, &payload);
                self.event_handlers.insert(channel, Some(h));
                self.apply_ctx(ctx);
            }
            Pending::Delivery {
                topic,
                payload,
                subscribers,
            } => {
                for idx in subscribers {
                    let Some(mut h) = self.topics.get_mut(&topic).and_then(|v| v[idx].take()) else {
                        continue;
                    };
                    self.record(&topic, "deliver", serde_json::json!({ "subscriber": idx }));
                    let mut ctx = self.new_ctx();
                    h(&mut self.state, &mut ctx, &payload);
                    if let Some(v) = self.topics.get_mut(&topic) {
                        v[idx] = Some(h);
                    }
                    self.apply_ctx(ctx);
                }
            }
        }
    }

    /// Processes every queued item due at or before `until_ms` in
    /// `(time, seq)` order, then leaves the clock at `until_ms`.
    pub fn step(&mut self, until_ms: u64) -> usize {
        let mut n = 0;
        while let Some(Reverse((t, id))) = self.queue.peek().copied() {
            if t > until_ms {
                break;
            }
            self.queue.pop();
            self.advance_clock(t);
            if let Some(item) = self.pending.remove(&id) {
                self.dispatch(item);
                n += 1;
            }
        }
        self.advance_clock(until_ms);
        n
    }

    /// Drains the queue completely.
    pub fn run_until_idle(&mut self) -> usize {
        let mut n = 0;
        while let Some(Reverse((t, _))) = self.queue.peek().copied() {
            n += self.step(t);
        }
        n
    }

    pub fn next_event_time(&self) -> Option<u64> {
        self.queue.peek().map(|Reverse((t, _))| *t)
    }

    /// Synchronous request/response. The request travels for the service
    /// latency (firing anything due meanwhile), the handler runs and keeps
    /// the service busy for its reported time, and the response travels
    /// back for the same latency.
    pub fn call(&mut self, service: &str, request: Value) -> BusResult<Value> {
        self.record(service, "request", request.clone());
        let Some(entry) = self.services.get(service) else {
            let err = BusError::NoEndpoint(service.to_string());
            self.record(service, "error", serde_json::to_value(&err).expect("error serializes"));
            return Err(err);
        };
        let latency = entry.latency_ms;
        let target = self.now_ms + latency;
        self.step(target);
        let entry = self.services.get_mut(service).expect("service still registered");
        if !entry.connected {
            let err = BusError::ConnectionLost(service.to_string());
            self.record(service, "error", serde_json::to_value(&err).expect("error serializes"));
            return Err(err);
        }
        let mut handler = entry.handler.take().expect("service handler not re-entered");
        self.record(service, "handle", Value::Null);
        let mut ctx = self.new_ctx();
        let result = handler(&mut self.state, &mut ctx, &request);
        if let Some(e) = self.services.get_mut(service) {
            e.handler = Some(handler);
        }
        let busy = result.as_ref().map_or(0, |r| r.busy_ms);
        self.apply_ctx(ctx);
        self.step(self.now_ms + busy + latency);
        match result {
            Ok(reply) => {
                self.record(service, "response", reply.payload.clone());
                Ok(reply.payload)
            }
            Err(err) => {
                self.record(service, "error", serde_json::to_value(&err).expect("error serializes"));
                Err(err)
            }
        }
    }

    pub fn log_jsonl(&self) -> String {
        log_to_jsonl(&self.log)
    }

    pub fn log_hash(&self) -> String {
        hash_text(&self.log_jsonl())
    }
}

pub fn log_to_jsonl(entries: &[LogEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        let _ = writeln!(out, "{}", serde_json::to_string(e).expect("log entry serializes"));
    }
    out
}

pub fn hash_text(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[derive(Default)]
    struct World {
        hits: Vec<String>,
    }

    #[test]
    fn call_orders_request_handle_response() {
        let mut bus = Bus::new(World::default(), BusConfig::default());
        bus.register_service(
            "arm/move_to",
            None,
            Box::new(|w: &mut World, ctx: &mut Ctx, req: &Value| {
                w.hits.push(format!("move@{}", ctx.now()));
                Ok(Reply::new(json!({ "ok": req["x"] }), 10))
            }),
        );
        let resp = bus.call("arm/move_to", json!({ "x": 1 })).unwrap();
        assert_eq!(resp, json!({ "ok": 1 }));
        assert_eq!(bus.state().hits, vec!["move@2"]);
        assert_eq!(bus.now(), 14);
        let kinds: Vec<&str> = bus.log().iter().map(|e| e.kind.as_str()).collect();
        assert_eq!(kinds, ["request", "handle", "response"]);
        assert_eq!(bus.log()[2].seq, 2);
    }

    #[test]
    fn echo_latency_arithmetic() {
        for (latency, expect) in [(0, 0), (5, 10)] {
            let mut bus = Bus::new(World::default(), BusConfig::default());
            bus.register_service("echo", Some(latency), Box::new(|_: &mut World, _: &mut Ctx, v: &Value| Ok(Reply::instant(v.clone()))));
            bus.call("echo", json!("hi")).unwrap();
            let log = bus.log();
            assert_eq!(log.last().unwrap().t - log[0].t, expect);
            assert_eq!(log.last().unwrap().seq - log[0].seq, 2);
        }
        let mut bus = Bus::new(World::default(), BusConfig::default());
        assert_eq!(bus.step(30), 0);
        assert_eq!(bus.now(), 30);
    }

    #[test]
    fn missing_and_disconnected_endpoints() {
        let mut bus = Bus::new(World::default(), BusConfig::default());
        assert_eq!(bus.call("nope", json!(null)), Err(BusError::NoEndpoint("nope".into())));
        bus.register_service("cam", Some(5), Box::new(|_: &mut World, _: &mut Ctx, _: &Value| Ok(Reply::instant(json!(1)))));
        bus.set_connected("cam", false).unwrap();
        assert_eq!(bus.call("cam", json!(null)), Err(BusError::ConnectionLost("cam".into())));
        bus.set_connected("cam", true).unwrap();
        assert!(bus.call("cam", json!(null)).is_ok());
    }

    #[test]
    fn events_fire_in_time_then_seq_order() {
        let mut bus = Bus::new(World::default(), BusConfig::default());
        for ch in ["a", "b", "c"] {
            bus.on_event(
                ch,
                Box::new(move |w: &mut World, ctx: &mut Ctx, _: &Value| w.hits.push(format!("{ch}@{}", ctx.now()))),
            );
        }
        bus.schedule(50, "b", json!(null));
        bus.schedule(10, "c", json!(null));
        bus.schedule(50, "a", json!(null));
        assert_eq!(bus.step(20), 1);
        assert_eq!(bus.now(), 20);
        bus.run_until_idle();
        assert_eq!(bus.state().hits, ["c@10", "b@50", "a@50"]);
    }

    #[test]
    fn fault_event_during_latency_blocks_call() {
        let mut bus = Bus::new(World::default(), BusConfig::default());
        bus.register_service("arm", None, Box::new(|_: &mut World, _: &mut Ctx, _: &Value| Ok(Reply::instant(json!(0)))));
        bus.on_event(
            "fault",
            Box::new(|_: &mut World, ctx: &mut Ctx, _: &Value| {
                ctx.set_connected("arm", false);
                ctx.schedule(ctx.now() + 100, "reconnect", json!(null));
            }),
        );
        bus.on_event("reconnect", Box::new(|_: &mut World, ctx: &mut Ctx, _: &Value| ctx.set_connected("arm", true)));
        bus.schedule(1, "fault", json!(null));
        assert!(matches!(bus.call("arm", json!(null)), Err(BusError::ConnectionLost(_))));
        bus.run_until_idle();
        assert_eq!(bus.now(), 101);
        assert!(bus.call("arm", json!(null)).is_ok());
    }

    #[test]
    fn subscribers_captured_at_publish_time() {
        let mut bus = Bus::new(World::default(), BusConfig::default());
        bus.subscribe("t", Box::new(|w: &mut World, _: &mut Ctx, v: &Value| w.hits.push(format!("first:{v}"))));
        bus.publish("t", json!(1));
        bus.subscribe("t", Box::new(|w: &mut World, _: &mut Ctx, v: &Value| w.hits.push(format!("late:{v}"))));
        bus.run_until_idle();
        assert_eq!(bus.state().hits, ["first:1"]);
        assert_eq!(bus.now(), 1);
    }

    #[test]
    fn log_hash_is_stable() {
        let run = || {
            let mut bus = Bus::new(World::default(), BusConfig::default());
            bus.register_service("s", None, Box::new(|_: &mut World, _: &mut Ctx, v: &Value| Ok(Reply::new(v.clone(), 3))));
            for i in 0..5 {
                bus.call("s", json!(i)).unwrap();
            }
            bus.log_hash()
        };
        assert_eq!(run(), run());
        assert_eq!(run().len(), 64);
    }
}
