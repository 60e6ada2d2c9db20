//! Emergency-stop state machine and rate-limited, latest-wins streaming.

use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::eval::classify;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RunState {
    Running,
    Stopped,
}

/// Stops after `hysteresis_k` consecutive unsafe probabilities (`p ≤
/// threshold`), resumes after `hysteresis_k` consecutive safe ones. `k = 1`
/// is raw thresholding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EStop {
    pub state: RunState,
    /// Length of the current run of frames disagreeing with `state`.
    pub consecutive: usize,
    pub threshold: f64,
    pub hysteresis_k: usize,
}

impl Default for EStop {
    fn default() -> Self {
        Self::new(0.5, 2)
    }
}

impl EStop {
    pub fn new(threshold: f64, hysteresis_k: usize) -> Self {
        assert!(hysteresis_k >= 1, "hysteresis_k must be at least 1");
        Self {
            state: RunState::Running,
            consecutive: 0,
            threshold,
            hysteresis_k,
        }
    }

    /// Consecutive unsafe frames counted toward a stop (0 while stopped).
    pub fn consecutive_unsafe(&self) -> usize {
        if self.state == RunState::Running {
            self.consecutive
        } else {
            0
        }
    }

    pub fn update(&mut self, p: f64) -> RunState {
        let safe = classify(p, self.threshold);
        let against = match self.state {
            RunState::Running => !safe,
            RunState::Stopped => safe,
        };
        if against {
            self.consecutive += 1;
            if self.consecutive >= self.hysteresis_k {
                self.state = match self.state {
                    RunState::Running => RunState::Stopped,
                    RunState::Stopped => RunState::Running,
                };
                self.consecutive = 0;
            }
        } else {
            self.consecutive = 0;
        }
        self.state
    }
}

/// One-slot buffer: a put replaces any unread frame.
#[derive(Debug)]
pub struct LatestSlot<T> {
    inner: Mutex<SlotInner<T>>,
    ready: Condvar,
}

#[derive(Debug)]
struct SlotInner<T> {
    item: Option<T>,
    closed: bool,
    dropped: usize,
}

impl<T> Default for LatestSlot<T> {
    fn default() -> Self {
        Self {
            inner: Mutex::new(SlotInner { item: None, closed: false, dropped: 0 }),
            ready: Condvar::new(),
        }
    }
}

impl<T> LatestSlot<T> {
    pub fn put(&self, item: T) {
        let mut g = self.inner.lock().expect("slot lock");
        if g.item.replace(item).is_some() {
            g.dropped += 1;
        }
        self.ready.notify_one();
    }

    pub fn close(&self) {
        self.inner.lock().expect("slot lock").closed = true;
        self.ready.notify_all();
    }

    /// Blocks for the next item; `None` once closed and drained.
    pub fn take(&self) -> Option<T> {
        let mut g = self.inner.lock().expect("slot lock");
        loop {
            if let Some(item) = g.item.take() {
                return Some(item);
            }
            if g.closed {
                return None;
            }
            g = self.ready.wait(g).expect("slot lock");
        }
    }

    pub fn dropped(&self) -> usize {
        self.inner.lock().expect("slot lock").dropped
    }
}

/// One newline-delimited output record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreamRecord {
    pub t: f64,
    pub p: f64,
    pub state: RunState,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreamSummary {
    pub processed: usize,
    pub dropped: usize,
    pub stops: usize,
    pub final_state: RunState,
}

/// Runs `source` on a producer thread and `infer` on the calling thread,
/// joined by a [`LatestSlot`]. The consumer handles at most `rate_hz` frames
/// per second (`None` for no limit) and skips frames whose timestamp is not
/// newer than the last one emitted.
pub fn stream<F, I, S, E>(
    source: S,
    rate_hz: Option<f64>,
    mut estop: EStop,
    mut infer: I,
    mut emit: E,
) -> StreamSummary
where
    F: Send + 'static,
    S: Iterator<Item = (f64, F)> + Send + 'static,
    I: FnMut(&F) -> f64,
    E: FnMut(&StreamRecord),
{
    let slot = Arc::new(LatestSlot::default());
    let producer = {
        let slot = Arc::clone(&slot);
        std::thread::spawn(move || {
            for item in source {
                slot.put(item);
            }
            slot.close();
        })
    };
    let period = rate_hz.filter(|r| *r > 0.0).map(|r| Duration::from_secs_f64(1.0 / r));
    let mut next_at = Instant::now();
    let mut last_t = f64::NEG_INFINITY;
    let (mut processed, mut stops) = (0, 0);
    while let Some((t, frame)) = slot.take() {
        if t <= last_t {
            continue;
        }
        if let Some(period) = period {
            let now = Instant::now();
            if now < next_at {
                std::thread::sleep(next_at - now);
            }
            next_at = Instant::now() + period;
        }
        let p = infer(&frame);
        let before = estop.state;
        let state = estop.update(p);
        if before == RunState::Running && state == RunState::Stopped {
            stops += 1;
        }
        last_t = t;
        processed += 1;
        emit(&StreamRecord { t, p, state });
    }
    producer.join().expect("frame source thread panicked");
    StreamSummary {
        processed,
        dropped: slot.dropped(),
        stops,
        final_state: estop.state,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct restatement of the rule over the whole history.
    fn reference(bits: &[bool], k: usize) -> Vec<RunState> {
        let mut state = RunState::Running;
        let mut run_start = 0;
        let mut out = Vec::new();
        for (i, &safe) in bits.iter().enumerate() {
            let against = (state == RunState::Running) != safe;
            if !against {
                run_start = i + 1;
            } else if i + 1 - run_start >= k {
                state = if safe { RunState::Running } else { RunState::Stopped };
                run_start = i + 1;
            }
            out.push(state);
        }
        out
    }

    #[test]
    fn exhaustive_streams_up_to_twelve() {
        for k in 1..=3 {
            for len in 0..=12 {
                for mask in 0u32..(1 << len) {
                    let bits: Vec<bool> = (0..len).map(|i| mask >> i & 1 == 1).collect();
                    let mut e = EStop::new(0.5, k);
                    let got: Vec<RunState> = bits.iter().map(|&s| e.update(if s { 0.9 } else { 0.1 })).collect();
                    assert_eq!(got, reference(&bits, k), "k {k} stream {bits:?}");
                    // a change of state is always preceded by k agreeing frames
                    let mut prev = RunState::Running;
                    for (i, s) in got.iter().enumerate() {
                        if *s != prev {
                            assert!(i + 1 >= k);
                            let want = *s == RunState::Running;
                            assert!(bits[i + 1 - k..=i].iter().all(|&b| b == want));
                        }
                        prev = *s;
                    }
                }
            }
        }
    }

    #[test]
    fn three_unsafe_frames_stop_on_the_second() {
        let mut e = EStop::default();
        let s: Vec<_> = [0.1, 0.2, 0.3].iter().map(|&p| e.update(p)).collect();
        assert_eq!(s, [RunState::Running, RunState::Stopped, RunState::Stopped]);
        let mut e = EStop::default();
        assert!((0..50).all(|_| e.update(0.8) == RunState::Running));
        // exactly at the threshold counts as unsafe
        let mut e = EStop::new(0.5, 1);
        assert_eq!(e.update(0.5), RunState::Stopped);
    }

    #[test]
    fn stream_is_ordered_and_keeps_the_latest() {
        let frames: Vec<(f64, f64)> = (0..200).map(|i| (i as f64 / 3.0, if i < 150 { 0.9 } else { 0.1 })).collect();
        let mut out = Vec::new();
        let summary = stream(frames.into_iter(), None, EStop::default(), |p| *p, |r| out.push(*r));
        assert!(out.windows(2).all(|w| w[0].t < w[1].t));
        assert_eq!(summary.processed + summary.dropped, 200);
        // under backlog the newest frame always survives
        assert_eq!(out.last().map(|r| r.t), Some(199.0 / 3.0));
    }

    #[test]
    fn stream_skips_stale_timestamps() {
        let frames = vec![(1.0, 0.9), (0.5, 0.1), (2.0, 0.9)];
        let mut out = Vec::new();
        let s = stream(
            frames.into_iter().inspect(|_| std::thread::sleep(Duration::from_millis(20))),
            None,
            EStop::default(),
            |p| *p,
            |r| out.push(*r),
        );
        assert!(out.iter().all(|r| r.t != 0.5));
        assert_eq!(s.final_state, RunState::Running);
    }

    #[test]
    fn rate_limit_bounds_throughput() {
        let frames: Vec<(f64, f64)> = (0..6).map(|i| (i as f64, 0.9)).collect();
        let t = Instant::now();
        let slow = frames.into_iter().inspect(|_| std::thread::sleep(Duration::from_millis(15)));
        let s = stream(slow, Some(20.0), EStop::default(), |p| *p, |_| {});
        let elapsed = t.elapsed().as_secs_f64();
        assert!(s.processed >= 1);
        assert!(elapsed >= (s.processed - 1) as f64 / 20.0 - 1e-3);
    }
}
