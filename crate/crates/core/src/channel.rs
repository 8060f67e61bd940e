//! Packet-level communication channel applying per-link delays and
//! dropouts to broadcast frames.
//!
//! The channel is a single logical event queue mutated only between
//! simulation steps: all sends of step `k` complete before deliveries of
//! step `k + 1` begin. Each directed link has its own delay source; frames
//! whose drawn delay equals the mask are dropped, everything else matures
//! after at least one step.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::fmt;

use nalgebra::DVector;

// f64 math comes from the trait under no_std; std test builds use the
// inherent methods instead.
#[allow(unused_imports)]
use num_traits::Float;

use crate::rng::link_rng;
use crate::schmm::{DelayTrace, SchmmModel, TraceSampler};

#[derive(Debug, Clone, PartialEq)]
pub enum ChannelError {
    /// The (sender, receiver) pair is not a link of the topology.
    NoSuchLink { sender: usize, receiver: usize },
}

impl fmt::Display for ChannelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChannelError::NoSuchLink { sender, receiver } => {
                write!(f, "no link {sender} -> {receiver}")
            }
        }
    }
}

impl core::error::Error for ChannelError {}

/// One broadcast frame: the sender's state at send time plus its latest
/// planned input sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct PacketFrame {
    pub sender: usize,
    pub send_step: usize,
    pub state: DVector<f64>,
    pub planned_inputs: Vec<DVector<f64>>,
}

/// Per-link delay source.
#[derive(Debug, Clone)]
pub enum DelaySource {
    /// Replay a recorded trace (wrapping around at the end).
    Trace { trace: DelayTrace, cursor: usize },
    /// Sample a live model, one hidden chain per link.
    Model(TraceSampler),
    /// Fixed delay; handy for tests and calibration runs.
    Constant(f64),
}

impl DelaySource {
    fn next_delay(&mut self) -> f64 {
        match self {
            DelaySource::Trace { trace, cursor } => {
                let v = trace.samples()[*cursor % trace.len()];
                *cursor += 1;
                v
            }
            DelaySource::Model(sampler) => sampler.next_delay(),
            DelaySource::Constant(v) => *v,
        }
    }
}

/// Running totals per directed link.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LinkStats {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
}

/// One telemetry row: what happened on a link during one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkEvent {
    pub step: usize,
    pub sender: usize,
    pub receiver: usize,
    /// Realized delay in ms (mask when dropped).
    pub delay_ms: f64,
    pub dropped: bool,
}

struct Link {
    source: DelaySource,
    stats: LinkStats,
}

/// The event-queue channel.
pub struct Channel {
    links: BTreeMap<(usize, usize), Link>,
    // (deliver_step, receiver, send_step, sender) -> frame; the key order
    // gives deterministic per-receiver delivery sorted by (send_step, sender)
    queue: BTreeMap<(usize, usize, usize, usize), PacketFrame>,
    events: Vec<LinkEvent>,
    bin_ms: f64,
    mask: f64,
    in_flight: usize,
}

impl Channel {
    /// Build a channel over the given directed links.
    pub fn new(
        links: impl IntoIterator<Item = (usize, usize)>,
        mut make_source: impl FnMut(usize, usize) -> DelaySource,
        bin_ms: f64,
        mask: f64,
    ) -> Self {
        let links = links
            .into_iter()
            .map(|(s, r)| {
                (
                    (s, r),
                    Link {
                        source: make_source(s, r),
                        stats: LinkStats::default(),
                    },
                )
            })
            .collect();
        Channel {
            links,
            queue: BTreeMap::new(),
            events: Vec::new(),
            bin_ms,
            mask,
            in_flight: 0,
        }
    }

    /// Channel whose every link samples a fresh hidden chain of `model`,
    /// seeded per link from the master seed.
    pub fn from_model(
        links: impl IntoIterator<Item = (usize, usize)>,
        model: &SchmmModel,
        master_seed: u64,
        bin_ms: f64,
    ) -> Self {
        let mask = model.mask();
        Channel::new(
            links,
            |s, r| {
                let mut rng = link_rng(master_seed, s, r);
                let seed = rand::Rng::gen::<u64>(&mut rng);
                DelaySource::Model(TraceSampler::new(model.clone(), seed))
            },
            bin_ms,
            mask,
        )
    }

    /// Channel whose every link replays the same recorded trace.
    pub fn from_trace(
        links: impl IntoIterator<Item = (usize, usize)>,
        trace: &DelayTrace,
        bin_ms: f64,
    ) -> Self {
        let mask = trace.mask();
        Channel::new(
            links,
            |_, _| DelaySource::Trace {
                trace: trace.clone(),
                cursor: 0,
            },
            bin_ms,
            mask,
        )
    }

    /// Send a frame over `sender -> receiver`.
    ///
    /// Draws the link's next delay; if it equals the mask the frame is
    /// dropped, otherwise it matures at `send_step + ceil(delay / bin)`,
    /// never earlier than the next step. Returns the realized delay.
    pub fn send(
        &mut self,
        frame: PacketFrame,
        sender: usize,
        receiver: usize,
    ) -> Result<f64, ChannelError> {
        let mask = self.mask;
        let link = self
            .links
            .get_mut(&(sender, receiver))
            .ok_or(ChannelError::NoSuchLink { sender, receiver })?;
        link.stats.sent += 1;
        let delay = link.source.next_delay();
        let dropped = delay == mask;
        self.events.push(LinkEvent {
            step: frame.send_step,
            sender,
            receiver,
            delay_ms: delay,
            dropped,
        });
        if dropped {
            link.stats.dropped += 1;
            return Ok(delay);
        }
        let lag = ((delay / self.bin_ms).ceil() as usize).max(1);
        let deliver_step = frame.send_step + lag;
        self.queue
            .insert((deliver_step, receiver, frame.send_step, sender), frame);
        self.in_flight += 1;
        Ok(delay)
    }

    /// Remove and return every frame addressed to `receiver` that matures
    /// at step `k`, ordered by (send_step, sender).
    pub fn deliver(&mut self, k: usize, receiver: usize) -> Vec<PacketFrame> {
        let keys: Vec<_> = self
            .queue
            .range((k, receiver, 0, 0)..(k, receiver + 1, 0, 0))
            .map(|(key, _)| *key)
            .collect();
        let mut out = Vec::with_capacity(keys.len());
        for key in keys {
            let frame = self.queue.remove(&key).expect("key just enumerated");
            if let Some(link) = self.links.get_mut(&(key.3, receiver)) {
                link.stats.delivered += 1;
            }
            self.in_flight -= 1;
            out.push(frame);
        }
        out
    }

    pub fn stats(&self, sender: usize, receiver: usize) -> Option<LinkStats> {
        self.links.get(&(sender, receiver)).map(|l| l.stats)
    }

    /// Per-link totals, sorted by link.
    pub fn all_stats(&self) -> Vec<((usize, usize), LinkStats)> {
        self.links.iter().map(|(&k, l)| (k, l.stats)).collect()
    }

    /// Drain the per-send telemetry accumulated so far.
    pub fn take_events(&mut self) -> Vec<LinkEvent> {
        core::mem::take(&mut self.events)
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight
    }

    pub fn mask(&self) -> f64 {
        self.mask
    }

    /// Sent frames equal delivered + dropped + still in flight.
    pub fn conserves_frames(&self) -> bool {
        let (mut sent, mut delivered, mut dropped) = (0u64, 0u64, 0u64);
        for link in self.links.values() {
            sent += link.stats.sent;
            delivered += link.stats.delivered;
            dropped += link.stats.dropped;
        }
        sent == delivered + dropped + self.in_flight as u64
    }
}
