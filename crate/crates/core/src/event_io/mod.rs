//! Event records and streams.
//!
//! An event is a single per-pixel brightness change `(x, y, t, p)`. Streams
//! carry the sensor geometry and keep events ordered by timestamp.

mod codec;
mod synth;

pub use codec::{parse_events, read_manifest, write_events, write_manifest, EventFormat};
pub use synth::{
    simulate, synthesize_stream, MotionKind, SceneConfig, ShapeKind, SimulatedEvent,
};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Polarity {
    On,
    Off,
}

impl Polarity {
    pub fn sign(self) -> i8 {
        match self {
            Polarity::On => 1,
            Polarity::Off => -1,
        }
    }

    pub fn from_sign(sign: i64) -> Option<Self> {
        match sign {
            1 => Some(Polarity::On),
            -1 => Some(Polarity::Off),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Event {
    pub x: u16,
    pub y: u16,
    /// Timestamp in microseconds.
    pub t: u64,
    pub p: Polarity,
}

impl Event {
    pub fn new(x: u16, y: u16, t: u64, p: Polarity) -> Self {
        Self { x, y, t, p }
    }
}

/// Time-ordered events on a `width` x `height` sensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStream {
    events: Vec<Event>,
    width: u16,
    height: u16,
    pub label: Option<u32>,
}

impl EventStream {
    /// Validates bounds and sorts by timestamp. The sort is stable, so events
    /// sharing a timestamp keep their input order.
    pub fn new(mut events: Vec<Event>, width: u16, height: u16) -> Result<Self> {
        if let Some(e) = events.iter().find(|e| e.x >= width || e.y >= height) {
            return Err(Error::OutOfBounds {
                x: e.x as u32,
                y: e.y as u32,
                width,
                height,
            });
        }
        events.sort_by_key(|e| e.t);
        Ok(Self {
            events,
            width,
            height,
            label: None,
        })
    }

    pub fn with_label(mut self, label: u32) -> Self {
        self.label = Some(label);
        self
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn width(&self) -> u16 {
        self.width
    }

    pub fn height(&self) -> u16 {
        self.height
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// `(t_first, t_last)`, or `None` for an empty stream.
    pub fn time_span(&self) -> Option<(u64, u64)> {
        Some((self.events.first()?.t, self.events.last()?.t))
    }

    /// Splits into `count` windows of equal duration.
    ///
    /// Window `k` (zero-based) covers `[t_1 + k*d, t_1 + (k+1)*d)` with
    /// `d = (t_M - t_1 + 1) / count`, so the last event always falls in the
    /// last window. Membership is computed in integer arithmetic.
    pub fn split_segments(&self, count: usize) -> Result<Vec<EventStream>> {
        if count == 0 {
            return Err(Error::Config("segment count must be at least 1".into()));
        }
        let (first, last) = self.time_span().ok_or(Error::EmptyStream)?;
        let span = (last - first + 1) as u128;
        let mut buckets: Vec<Vec<Event>> = vec![Vec::new(); count];
        for e in &self.events {
            let k = ((e.t - first) as u128 * count as u128 / span) as usize;
            buckets[k].push(*e);
        }
        if let Some(index) = buckets.iter().position(|b| b.is_empty()) {
            return Err(Error::DegenerateSegment { index, count });
        }
        Ok(buckets
            .into_iter()
            .map(|events| EventStream {
                events,
                width: self.width,
                height: self.height,
                label: self.label,
            })
            .collect())
    }
}

/// Free-function form of [`EventStream::split_segments`].
pub fn split_segments(stream: &EventStream, count: usize) -> Result<Vec<EventStream>> {
    stream.split_segments(count)
}
