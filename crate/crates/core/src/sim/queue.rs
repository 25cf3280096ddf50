use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;
use std::ops::{Add, Sub};
use std::time::Duration;

use thiserror::Error;

/// Virtual time in microseconds since the start of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn from_millis(ms: u64) -> Self {
        SimTime(ms * 1_000)
    }

    pub fn from_secs_f64(s: f64) -> Self {
        SimTime((s * 1e6).round() as u64)
    }

    pub fn as_micros(self) -> u64 {
        self.0
    }

    pub fn as_millis_f64(self) -> f64 {
        self.0 as f64 / 1e3
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e6
    }

    pub fn saturating_since(self, earlier: SimTime) -> Duration {
        Duration::from_micros(self.0.saturating_sub(earlier.0))
    }
}

impl Add<Duration> for SimTime {
    type Output = SimTime;

    fn add(self, rhs: Duration) -> SimTime {
        SimTime(self.0 + rhs.as_micros() as u64)
    }
}

impl Sub for SimTime {
    type Output = Duration;

    fn sub(self, rhs: SimTime) -> Duration {
        Duration::from_micros(self.0 - rhs.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3}ms", self.as_millis_f64())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("cannot schedule at {at}, clock is already at {now}")]
    PastTime { at: SimTime, now: SimTime },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimEvent<A> {
    pub at: SimTime,
    pub seq: u64,
    pub action: A,
}

struct Entry<A>(SimEvent<A>);

impl<A> PartialEq for Entry<A> {
    fn eq(&self, other: &Self) -> bool {
        (self.0.at, self.0.seq) == (other.0.at, other.0.seq)
    }
}

impl<A> Eq for Entry<A> {}

impl<A> PartialOrd for Entry<A> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<A> Ord for Entry<A> {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        (other.0.at, other.0.seq).cmp(&(self.0.at, self.0.seq))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunStats {
    pub executed: u64,
    pub now: SimTime,
    pub pending: usize,
}

/// Ordered queue of timestamped actions plus the virtual clock.
pub struct EventQueue<A> {
    heap: BinaryHeap<Entry<A>>,
    now: SimTime,
    next_seq: u64,
    executed: u64,
    trace: Option<Vec<(SimTime, u64)>>,
}

impl<A> Default for EventQueue<A> {
    fn default() -> Self {
        Self::new()
    }
}

impl<A> EventQueue<A> {
    pub fn new() -> Self {
        EventQueue { heap: BinaryHeap::new(), now: SimTime::ZERO, next_seq: 0, executed: 0, trace: None }
    }

    /// Record `(at, seq)` of every executed event.
    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn trace(&self) -> Option<&[(SimTime, u64)]> {
        self.trace.as_deref()
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn peek_time(&self) -> Option<SimTime> {
        self.heap.peek().map(|e| e.0.at)
    }

    pub fn schedule(&mut self, at: SimTime, action: A) -> Result<u64, SimError> {
        if at < self.now {
            return Err(SimError::PastTime { at, now: self.now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Entry(SimEvent { at, seq, action }));
        Ok(seq)
    }

    pub fn schedule_in(&mut self, delay: Duration, action: A) -> u64 {
        let at = self.now + delay;
        self.schedule(at, action).expect("future time")
    }

    /// Removes the next event and advances the clock to it.
    pub fn pop(&mut self) -> Option<SimEvent<A>> {
        let Entry(event) = self.heap.pop()?;
        debug_assert!(event.at >= self.now);
        self.now = event.at;
        self.executed += 1;
        if let Some(trace) = &mut self.trace {
            trace.push((event.at, event.seq));
        }
        Some(event)
    }

    /// Executes every event with `at <= t_end`, then sets the clock to `t_end`.
    pub fn run_until<F>(&mut self, t_end: SimTime, mut handler: F) -> RunStats
    where
        F: FnMut(&mut Self, SimEvent<A>),
    {
        let start = self.executed;
        while self.peek_time().is_some_and(|t| t <= t_end) {
            let event = self.pop().expect("peeked");
            handler(self, event);
        }
        if t_end > self.now {
            self.now = t_end;
        }
        RunStats { executed: self.executed - start, now: self.now, pending: self.heap.len() }
    }
}

/// Something that accepts future events of type `E`.
///
/// Components with their own event enums schedule through this, so an outer
/// world can embed them with `impl From<ComponentEvent> for WorldEvent`.
pub trait Scheduler<E> {
    fn now(&self) -> SimTime;
    fn schedule_at(&mut self, at: SimTime, event: E) -> Result<(), SimError>;

    fn schedule_after(&mut self, delay: Duration, event: E) {
        let at = self.now() + delay;
        self.schedule_at(at, event).expect("future time");
    }
}

impl<A, E: Into<A>> Scheduler<E> for EventQueue<A> {
    fn now(&self) -> SimTime {
        self.now
    }

    fn schedule_at(&mut self, at: SimTime, event: E) -> Result<(), SimError> {
        self.schedule(at, event.into()).map(|_| ())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_times_run_in_schedule_order() {
        let mut q = EventQueue::new();
        q.schedule(SimTime(5), "b").unwrap();
        q.schedule(SimTime(5), "c").unwrap();
        q.schedule(SimTime(1), "a").unwrap();
        let mut seen = Vec::new();
        q.run_until(SimTime(10), |_, e| seen.push(e.action));
        assert_eq!(seen, ["a", "b", "c"]);
        assert_eq!(q.now(), SimTime(10));
    }

    #[test]
    fn schedule_now_runs_before_later_events() {
        let mut q = EventQueue::new();
        q.schedule(SimTime::from_millis(20), 2).unwrap();
        q.schedule(SimTime::ZERO, 1).unwrap();
        assert_eq!(q.pop().unwrap().action, 1);
    }

    #[test]
    fn past_scheduling_is_rejected() {
        let mut q: EventQueue<u8> = EventQueue::new();
        q.run_until(SimTime(100), |_, _| {});
        assert_eq!(q.schedule(SimTime(99), 0), Err(SimError::PastTime { at: SimTime(99), now: SimTime(100) }));
    }

    #[test]
    fn events_scheduled_during_execution() {
        let mut q = EventQueue::new();
        q.schedule(SimTime::ZERO, 0u32).unwrap();
        let mut times = Vec::new();
        q.run_until(SimTime::from_millis(100), |q, e| {
            times.push((q.now(), e.action));
            if e.action < 3 {
                q.schedule_in(Duration::from_millis(10), e.action + 1);
            }
        });
        assert_eq!(
            times,
            vec![
                (SimTime::ZERO, 0),
                (SimTime::from_millis(10), 1),
                (SimTime::from_millis(20), 2),
                (SimTime::from_millis(30), 3)
            ]
        );
    }

    #[test]
    fn empty_queue_returns_immediately() {
        let mut q: EventQueue<()> = EventQueue::new();
        let stats = q.run_until(SimTime::from_millis(5), |_, _| unreachable!());
        assert_eq!(stats, RunStats { executed: 0, now: SimTime::from_millis(5), pending: 0 });
    }

    #[test]
    fn events_past_horizon_stay_queued() {
        let mut q = EventQueue::new();
        q.schedule(SimTime(50), ()).unwrap();
        let stats = q.run_until(SimTime(10), |_, _| {});
        assert_eq!(stats.pending, 1);
        assert_eq!(q.now(), SimTime(10));
    }

    #[test]
    fn clock_never_goes_backwards() {
        let mut q = EventQueue::new();
        for t in [30u64, 10, 20, 10, 0, 25] {
            q.schedule(SimTime(t), t).unwrap();
        }
        let mut last = SimTime::ZERO;
        q.run_until(SimTime(100), |q, e| {
            assert!(e.at >= last);
            assert_eq!(q.now(), e.at);
            last = e.at;
        });
    }
}
