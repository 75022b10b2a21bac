//! In-process publish/subscribe event bus with priority routing.
//!
//! Every session has its own routing table. Each subscription owns a
//! bounded priority queue ordered by `(priority, event_id)`, so control
//! signals overtake pending data events while data stays FIFO. Publishing
//! only enqueues; handlers run wherever the subscriber dequeues.

mod event;

pub use event::{Event, EventKind, FalseReason, Payload, Priority, SessionId, TtsChunk, TurnId};

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap};
use std::pin::pin;
use std::sync::{Arc, Weak};

use parking_lot::Mutex;
use thiserror::Error;
use tokio::sync::Notify;
use tokio::time::Instant;

pub const DEFAULT_QUEUE_CAPACITY: usize = 1024;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BusError {
    #[error("unknown or closed session {0}")]
    UnknownSession(SessionId),
    #[error("subscriber `{0}` already registered for this session")]
    DuplicateSubscriber(String),
    #[error("session closed")]
    SessionClosed,
}

/// A set of event kinds, stored as a bitmask.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct KindSet(u32);

impl KindSet {
    pub const fn empty() -> Self {
        KindSet(0)
    }

    pub fn all() -> Self {
        EventKind::ALL.iter().copied().collect()
    }

    pub fn contains(self, kind: EventKind) -> bool {
        self.0 & (1 << kind as u32) != 0
    }

    pub fn insert(&mut self, kind: EventKind) {
        self.0 |= 1 << kind as u32;
    }
}

impl FromIterator<EventKind> for KindSet {
    fn from_iter<I: IntoIterator<Item = EventKind>>(iter: I) -> Self {
        let mut set = KindSet::empty();
        for k in iter {
            set.insert(k);
        }
        set
    }
}

impl<const N: usize> From<[EventKind; N]> for KindSet {
    fn from(kinds: [EventKind; N]) -> Self {
        kinds.into_iter().collect()
    }
}

struct Pending(Arc<Event>);

impl Pending {
    fn key(&self) -> (Priority, u64) {
        (self.0.priority(), self.0.event_id)
    }
}

impl PartialEq for Pending {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}
impl Eq for Pending {}
impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Pending {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key().cmp(&other.key())
    }
}

#[derive(Default)]
struct QueueState {
    heap: BinaryHeap<Reverse<Pending>>,
    closed: bool,
}

struct SubQueue {
    subscriber_id: String,
    kinds: KindSet,
    capacity: usize,
    state: Mutex<QueueState>,
    items: Notify,
    space: Notify,
}

impl SubQueue {
    /// Enqueues an event. Non-control events wait for space when the queue
    /// is full; control events are never refused. Returns `false` if the
    /// queue was closed.
    async fn push(&self, event: Arc<Event>) -> bool {
        let control = event.priority() == Priority::Control;
        let mut event = Some(event);
        loop {
            let mut space = pin!(self.space.notified());
            space.as_mut().enable();
            {
                let mut st = self.state.lock();
                if st.closed {
                    return false;
                }
                if control || st.heap.len() < self.capacity {
                    st.heap.push(Reverse(Pending(event.take().expect("pushed once"))));
                    drop(st);
                    self.items.notify_one();
                    return true;
                }
            }
            space.await;
        }
    }

    fn try_pop(&self) -> Option<Result<Arc<Event>, BusError>> {
        let mut st = self.state.lock();
        match st.heap.pop() {
            Some(Reverse(Pending(ev))) => {
                drop(st);
                self.space.notify_waiters();
                Some(Ok(ev))
            }
            None if st.closed => Some(Err(BusError::SessionClosed)),
            None => None,
        }
    }

    fn close(&self) {
        self.state.lock().closed = true;
        self.items.notify_one();
        self.space.notify_waiters();
    }
}

#[derive(Default)]
struct Route {
    next_event_id: u64,
    subscriptions: Vec<Arc<SubQueue>>,
}

struct BusInner {
    epoch: Instant,
    capacity: usize,
    routes: Mutex<HashMap<SessionId, Route>>,
}

/// Shared handle to the event bus. Cheap to clone.
#[derive(Clone)]
pub struct EventBus {
    inner: Arc<BusInner>,
}

impl Default for EventBus {
    fn default() -> Self {
        Self::new()
    }
}

impl EventBus {
    pub fn new() -> Self {
        Self::with_capacity(DEFAULT_QUEUE_CAPACITY)
    }

    pub fn with_capacity(capacity: usize) -> Self {
        assert!(capacity > 0);
        Self {
            inner: Arc::new(BusInner {
                epoch: Instant::now(),
                capacity,
                routes: Mutex::new(HashMap::new()),
            }),
        }
    }

    /// Nanoseconds since the bus was created, on the runtime clock.
    pub fn now_ns(&self) -> u64 {
        Instant::now()
            .saturating_duration_since(self.inner.epoch)
            .as_nanos() as u64
    }

    pub fn instant_of(&self, ns: u64) -> Instant {
        self.inner.epoch + std::time::Duration::from_nanos(ns)
    }

    /// Creates the routing table for a session so managers can subscribe
    /// before `SessionOpen` is published. Idempotent.
    pub fn register_session(&self, session: SessionId) {
        self.inner.routes.lock().entry(session).or_default();
    }

    pub fn is_open(&self, session: SessionId) -> bool {
        self.inner.routes.lock().contains_key(&session)
    }

    pub fn subscribe(
        &self,
        session: SessionId,
        subscriber_id: impl Into<String>,
        kinds: impl Into<KindSet>,
    ) -> Result<Subscription, BusError> {
        let subscriber_id = subscriber_id.into();
        let mut routes = self.inner.routes.lock();
        let route = routes
            .get_mut(&session)
            .ok_or(BusError::UnknownSession(session))?;
        if route
            .subscriptions
            .iter()
            .any(|q| q.subscriber_id == subscriber_id)
        {
            return Err(BusError::DuplicateSubscriber(subscriber_id));
        }
        let queue = Arc::new(SubQueue {
            subscriber_id,
            kinds: kinds.into(),
            capacity: self.inner.capacity,
            state: Mutex::new(QueueState::default()),
            items: Notify::new(),
            space: Notify::new(),
        });
        route.subscriptions.push(queue.clone());
        Ok(Subscription {
            session,
            queue,
            bus: Arc::downgrade(&self.inner),
        })
    }

    /// Publishes a payload to every matching subscription of `session` and
    /// returns the number of subscriptions it was enqueued for.
    ///
    /// Publishing `SessionOpen` registers an unknown session. Publishing
    /// `SessionClose` delivers the close event and then shuts the session's
    /// routes; later publishes fail with `UnknownSession`.
    pub async fn publish(&self, session: SessionId, payload: Payload) -> Result<usize, BusError> {
        let kind = payload.kind();
        let (event, targets, closing) = {
            let mut routes = self.inner.routes.lock();
            if kind == EventKind::SessionOpen {
                routes.entry(session).or_default();
            }
            let route = routes
                .get_mut(&session)
                .ok_or(BusError::UnknownSession(session))?;
            let event = Arc::new(Event {
                event_id: route.next_event_id,
                session_id: session,
                created_at_ns: self.now_ns(),
                payload,
            });
            route.next_event_id += 1;
            let targets: Vec<_> = route
                .subscriptions
                .iter()
                .filter(|q| q.kinds.contains(kind))
                .cloned()
                .collect();
            let closing = if kind == EventKind::SessionClose {
                routes.remove(&session).map(|r| r.subscriptions)
            } else {
                None
            };
            (event, targets, closing)
        };
        let mut delivered = 0;
        for q in &targets {
            if q.push(event.clone()).await {
                delivered += 1;
            }
        }
        if let Some(all) = closing {
            for q in all {
                q.close();
            }
        }
        Ok(delivered)
    }
}

/// A bus handle bound to one session, as held by that session's managers.
#[derive(Clone)]
pub struct SessionBus {
    pub bus: EventBus,
    pub session: SessionId,
}

impl SessionBus {
    pub fn new(bus: EventBus, session: SessionId) -> Self {
        Self { bus, session }
    }

    pub fn subscribe(
        &self,
        subscriber_id: impl Into<String>,
        kinds: impl Into<KindSet>,
    ) -> Result<Subscription, BusError> {
        self.bus.subscribe(self.session, subscriber_id, kinds)
    }

    /// Publishes; `false` once the session is gone.
    pub async fn publish(&self, payload: Payload) -> bool {
        self.bus.publish(self.session, payload).await.is_ok()
    }

    pub async fn metric(&self, turn_id: Option<TurnId>, name: &str, value_ms: f64) -> bool {
        self.publish(Payload::Metric {
            turn_id,
            name: name.to_string(),
            value_ms,
        })
        .await
    }

    pub fn now_ns(&self) -> u64 {
        self.bus.now_ns()
    }
}

/// The receiving side of one subscriber's registration.
///
/// Dropping it removes the subscription from its session.
pub struct Subscription {
    session: SessionId,
    queue: Arc<SubQueue>,
    bus: Weak<BusInner>,
}

impl Subscription {
    pub fn session(&self) -> SessionId {
        self.session
    }

    pub fn subscriber_id(&self) -> &str {
        &self.queue.subscriber_id
    }

    pub fn kinds(&self) -> KindSet {
        self.queue.kinds
    }

    /// Waits for the pending event with the smallest `(priority, event_id)`.
    /// Fails with `SessionClosed` once the session is closed and drained.
    pub async fn next(&self) -> Result<Arc<Event>, BusError> {
        loop {
            if let Some(r) = self.queue.try_pop() {
                return r;
            }
            self.queue.items.notified().await;
        }
    }

    pub fn try_next(&self) -> Option<Result<Arc<Event>, BusError>> {
        self.queue.try_pop()
    }

    pub fn pending(&self) -> usize {
        self.queue.state.lock().heap.len()
    }
}

impl Drop for Subscription {
    fn drop(&mut self) {
        self.queue.close();
        if let Some(bus) = self.bus.upgrade() {
            if let Some(route) = bus.routes.lock().get_mut(&self.session) {
                route
                    .subscriptions
                    .retain(|q| !Arc::ptr_eq(q, &self.queue));
            }
        }
    }
}
