//! Discrete-event simulation of burst molding: a live packet stream is held
//! in per-burst queues, each queue is released after a timeout and padded
//! with dummy packets so the wire shows the target burst sequence.
//!
//! Outgoing bursts announce the size of the next incoming burst. The
//! announcement rides on a padding packet of kind `signal` when the burst has
//! one; otherwise it is piggybacked on a real packet and only counted.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::trace::{BurstTrace, INCOMING, OUTGOING};

#[derive(Debug, Error)]
pub enum MoldError {
    #[error("target burst {burst} has {target} packets but the real stream needs {real}")]
    TargetSmallerThanReal {
        burst: usize,
        target: u64,
        real: u64,
    },
    #[error("event {index} is out of order or has an invalid time")]
    UnorderedEvents { index: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PacketKind {
    Real,
    Dummy,
    Signal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PacketEvent {
    /// Milliseconds.
    #[serde(rename = "t")]
    pub time: f64,
    #[serde(rename = "dir")]
    pub direction: i8,
    pub kind: PacketKind,
    /// Position of a real packet in the input stream.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq: Option<usize>,
    /// Announced size of the next incoming burst (signal packets).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<u64>,
}

impl PacketEvent {
    pub fn real(time: f64, direction: i8) -> Self {
        Self {
            time,
            direction,
            kind: PacketKind::Real,
            seq: None,
            size: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MoldingConfig {
    pub timeout_ms: f64,
    /// Signal packets per outgoing burst; 0 disables signaling.
    pub signal_overhead: usize,
}

impl Default for MoldingConfig {
    fn default() -> Self {
        Self {
            timeout_ms: 50.0,
            signal_overhead: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoldResult {
    pub events: Vec<PacketEvent>,
    pub added_latency_ms: f64,
    /// Non-real packets on the wire, signals included.
    pub dummy_count: u64,
    /// Bursts released by a timeout (those holding real packets).
    pub closed_bursts: usize,
    /// Announcements that had no padding packet to ride on.
    pub piggybacked_signals: usize,
}

/// Target bursts on the wire: the non-zero entries in order, directions
/// alternating from outgoing.
fn target_runs<S: Scalar>(target: &BurstTrace<S>) -> Result<Vec<u64>, MoldError> {
    target
        .nonzero_bursts()
        .into_iter()
        .map(|b| {
            let v = b.to_f64_lossy();
            if v.fract() != 0.0 || v < 0.0 {
                Err(MoldError::InvalidInput(format!(
                    "target burst {v} is not a packet count"
                )))
            } else {
                Ok(v as u64)
            }
        })
        .collect()
}

fn direction_of(burst: usize) -> i8 {
    if burst.is_multiple_of(2) {
        OUTGOING
    } else {
        INCOMING
    }
}

/// Splits real events into direction runs, as index ranges.
fn real_bursts(events: &[PacketEvent]) -> Result<Vec<std::ops::Range<usize>>, MoldError> {
    let mut last_time = 0.0;
    for (i, e) in events.iter().enumerate() {
        if !(e.time.is_finite() && e.time >= last_time) {
            return Err(MoldError::UnorderedEvents { index: i });
        }
        last_time = e.time;
        if e.direction != OUTGOING && e.direction != INCOMING {
            return Err(MoldError::InvalidInput(format!(
                "event {i} has direction {}",
                e.direction
            )));
        }
        if e.kind != PacketKind::Real {
            return Err(MoldError::InvalidInput(format!(
                "event {i} is not a real packet"
            )));
        }
    }
    match events.first() {
        None => return Err(MoldError::InvalidInput("empty event stream".into())),
        Some(e) if e.direction != OUTGOING => {
            return Err(MoldError::InvalidInput("stream must begin outgoing".into()))
        }
        _ => {}
    }
    let mut runs = Vec::new();
    let mut start = 0;
    for i in 1..=events.len() {
        if i == events.len() || events[i].direction != events[start].direction {
            runs.push(start..i);
            start = i;
        }
    }
    Ok(runs)
}

/// Molds `real_events` onto `target`.
///
/// Every burst holding real packets is released one timeout after its last
/// real packet; its real packets keep their relative timing, padding follows
/// at release time, and the next burst cannot start before the release.
/// Target bursts beyond the real stream are pure padding sent at the
/// previous release.
pub fn mold<S: Scalar>(
    real_events: &[PacketEvent],
    target: &BurstTrace<S>,
    cfg: &MoldingConfig,
) -> Result<MoldResult, MoldError> {
    if !(cfg.timeout_ms > 0.0 && cfg.timeout_ms.is_finite()) {
        return Err(MoldError::InvalidInput(
            "timeout_ms must be positive".into(),
        ));
    }
    let runs = target_runs(target)?;
    let bursts = real_bursts(real_events)?;
    if bursts.len() > runs.len() {
        return Err(MoldError::TargetSmallerThanReal {
            burst: runs.len(),
            target: 0,
            real: bursts[runs.len()].len() as u64,
        });
    }
    for (i, (r, &t)) in bursts.iter().zip(&runs).enumerate() {
        if (r.len() as u64) > t {
            return Err(MoldError::TargetSmallerThanReal {
                burst: i,
                target: t,
                real: r.len() as u64,
            });
        }
    }

    let mut events = Vec::with_capacity(runs.iter().sum::<u64>() as usize);
    let mut shift = 0.0;
    let mut release = 0.0;
    let mut closed = 0;
    let mut piggybacked = 0;
    for (i, &size) in runs.iter().enumerate() {
        let dir = direction_of(i);
        let real = bursts.get(i).cloned().unwrap_or(0..0);
        if !real.is_empty() {
            shift = f64::max(shift, release - real_events[real.start].time);
            for k in real.clone() {
                events.push(PacketEvent {
                    time: (real_events[k].time + shift).max(release),
                    direction: dir,
                    kind: PacketKind::Real,
                    seq: Some(k),
                    size: None,
                });
            }
            release = real_events[real.end - 1].time + shift + cfg.timeout_ms;
            closed += 1;
        }
        let padding = size - real.len() as u64;
        let announce = runs
            .get(i + 1)
            .filter(|_| dir == OUTGOING && cfg.signal_overhead > 0);
        let signals = match announce {
            Some(_) => {
                let n = (cfg.signal_overhead as u64).min(padding);
                if n == 0 {
                    piggybacked += 1;
                }
                n
            }
            None => 0,
        };
        for p in 0..padding {
            let is_signal = p < signals;
            events.push(PacketEvent {
                time: release,
                direction: dir,
                kind: if is_signal {
                    PacketKind::Signal
                } else {
                    PacketKind::Dummy
                },
                seq: None,
                size: if is_signal { announce.copied() } else { None },
            });
        }
    }
    let dummy_count = events.iter().filter(|e| e.kind != PacketKind::Real).count() as u64;
    Ok(MoldResult {
        events,
        added_latency_ms: cfg.timeout_ms * closed as f64,
        dummy_count,
        closed_bursts: closed,
        piggybacked_signals: piggybacked,
    })
}

/// Direction run-lengths over all packet kinds.
pub fn run_lengths(events: &[PacketEvent]) -> Vec<u64> {
    let mut runs: Vec<u64> = Vec::new();
    let mut prev = 0;
    for e in events {
        if e.direction == prev {
            *runs.last_mut().unwrap() += 1;
        } else {
            runs.push(1);
            prev = e.direction;
        }
    }
    runs
}

/// Checks that `output` shows exactly the target bursts, starts outgoing, is
/// time-ordered, and carries every real packet of `real` in its original order.
pub fn verify_molding<S: Scalar>(
    real: &[PacketEvent],
    output: &[PacketEvent],
    target: &BurstTrace<S>,
) -> bool {
    let Ok(runs) = target_runs(target) else {
        return false;
    };
    if output.first().is_some_and(|e| e.direction != OUTGOING) || run_lengths(output) != runs {
        return false;
    }
    if output.windows(2).any(|w| w[1].time < w[0].time) {
        return false;
    }
    let forwarded: Vec<&PacketEvent> = output
        .iter()
        .filter(|e| e.kind == PacketKind::Real)
        .collect();
    forwarded.len() == real.len()
        && forwarded
            .iter()
            .zip(real)
            .enumerate()
            .all(|(k, (o, r))| o.seq == Some(k) && o.direction == r.direction && o.time >= r.time)
}

/// A stream with `gap_ms` between packets of a burst and `burst_gap_ms`
/// between bursts, for the given direction runs.
pub fn synthetic_stream(real_bursts: &[u64], gap_ms: f64, burst_gap_ms: f64) -> Vec<PacketEvent> {
    let mut events = Vec::new();
    let mut t = 0.0;
    for (i, &n) in real_bursts.iter().enumerate() {
        for k in 0..n {
            if !events.is_empty() {
                t += if k == 0 { burst_gap_ms } else { gap_ms };
            }
            events.push(PacketEvent::real(t, direction_of(i)));
        }
    }
    events
}

pub fn read_events(reader: impl BufRead) -> Result<Vec<PacketEvent>, MoldError> {
    let mut events = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        events.push(serde_json::from_str(&line).map_err(|e| MoldError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(events)
}

pub fn write_events(mut writer: impl Write, events: &[PacketEvent]) -> Result<(), MoldError> {
    for e in events {
        serde_json::to_writer(&mut writer, e).map_err(std::io::Error::from)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_events(path: &Path) -> Result<Vec<PacketEvent>, MoldError> {
    read_events(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn target(v: &[f64]) -> BurstTrace<f64> {
        BurstTrace::from_values(0, v, 16).unwrap()
    }

    #[test]
    fn pads_to_target() {
        let real = synthetic_stream(&[3, 5], 1.0, 10.0);
        let out = mold(&real, &target(&[4.0, 6.0]), &MoldingConfig::default()).unwrap();
        assert_eq!(run_lengths(&out.events), vec![4, 6]);
        assert_eq!(out.dummy_count, 2);
        let signal: Vec<_> = out
            .events
            .iter()
            .filter(|e| e.kind == PacketKind::Signal)
            .collect();
        assert_eq!(signal.len(), 1);
        assert_eq!(signal[0].size, Some(6));
        assert_eq!(out.added_latency_ms, 100.0);
        assert!(verify_molding(&real, &out.events, &target(&[4.0, 6.0])));
    }

    #[test]
    fn identity_molding() {
        let real = synthetic_stream(&[2, 3, 1], 1.0, 5.0);
        let t = target(&[2.0, 3.0, 1.0]);
        let out = mold(&real, &t, &MoldingConfig::default()).unwrap();
        assert_eq!(out.dummy_count, 0);
        assert_eq!(out.piggybacked_signals, 1);
        assert_eq!(out.added_latency_ms, 150.0);
        assert!(verify_molding(&real, &out.events, &t));
    }

    #[test]
    fn timing_follows_the_release_clock() {
        // bursts at t=0,1,2 (out) and 12 (in); release of burst 0 at 52
        let real = synthetic_stream(&[3, 1], 1.0, 10.0);
        let out = mold(&real, &target(&[4.0, 1.0]), &MoldingConfig::default()).unwrap();
        let times: Vec<f64> = out.events.iter().map(|e| e.time).collect();
        assert_eq!(times, vec![0.0, 1.0, 2.0, 52.0, 52.0]);
    }

    #[test]
    fn extra_target_bursts_are_pure_padding() {
        let real = synthetic_stream(&[1], 1.0, 1.0);
        let out = mold(&real, &target(&[2.0, 3.0, 1.0]), &MoldingConfig::default()).unwrap();
        assert_eq!(run_lengths(&out.events), vec![2, 3, 1]);
        assert_eq!(out.closed_bursts, 1);
        assert_eq!(out.dummy_count, 5);
    }

    #[test]
    fn rejects_bad_input() {
        let real = synthetic_stream(&[3, 5], 1.0, 10.0);
        let cfg = MoldingConfig::default();
        assert!(matches!(
            mold(&real, &target(&[2.0, 6.0]), &cfg),
            Err(MoldError::TargetSmallerThanReal { burst: 0, .. })
        ));
        assert!(matches!(
            mold(&real, &target(&[3.0]), &cfg),
            Err(MoldError::TargetSmallerThanReal { burst: 1, .. })
        ));
        let mut unordered = real.clone();
        unordered[2].time = 0.5;
        assert!(matches!(
            mold(&unordered, &target(&[4.0, 6.0]), &cfg),
            Err(MoldError::UnorderedEvents { index: 2 })
        ));
        let incoming = vec![PacketEvent::real(0.0, INCOMING)];
        assert!(matches!(
            mold(&incoming, &target(&[1.0]), &cfg),
            Err(MoldError::InvalidInput(_))
        ));
    }

    #[test]
    fn verification_catches_tampering() {
        let real = synthetic_stream(&[3, 5], 1.0, 10.0);
        let t = target(&[4.0, 6.0]);
        let out = mold(&real, &t, &MoldingConfig::default()).unwrap().events;
        let mut missing = out.clone();
        let pos = missing
            .iter()
            .position(|e| e.kind == PacketKind::Dummy)
            .unwrap();
        missing.remove(pos);
        assert!(!verify_molding(&real, &missing, &t));
        let mut swapped = out.clone();
        swapped.swap(0, 1);
        swapped[0].time = 0.0;
        swapped[1].time = 1.0;
        assert!(!verify_molding(&real, &swapped, &t));
    }

    #[test]
    fn json_lines_round_trip() {
        let real = synthetic_stream(&[1, 1], 1.0, 1.0);
        let out = mold(&real, &target(&[2.0, 1.0]), &MoldingConfig::default()).unwrap();
        let mut buf = Vec::new();
        write_events(&mut buf, &out.events).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            r#"{"t":0.0,"dir":1,"kind":"real","seq":0}"#
        );
        assert!(text.contains(r#""kind":"signal","size":1"#));
        assert_eq!(read_events(&buf[..]).unwrap(), out.events);
        assert!(matches!(
            read_events(&b"{\"t\":1}\n"[..]),
            Err(MoldError::Parse { line: 1, .. })
        ));
    }

    proptest! {
        #[test]
        fn molding_laws(
            pairs in prop::collection::vec((1u64..6, 0u64..4), 1..12),
            tail in prop::collection::vec(1u64..4, 0..3),
            gap in 0.1f64..5.0,
            burst_gap in 0.0f64..80.0,
        ) {
            let real_runs: Vec<u64> = pairs.iter().map(|p| p.0).collect();
            let mut runs: Vec<f64> = pairs.iter().map(|p| (p.0 + p.1) as f64).collect();
            runs.extend(tail.iter().map(|&t| t as f64));
            let t = BurstTrace::from_values(0, &runs, 16).unwrap();
            let real = synthetic_stream(&real_runs, gap, burst_gap);
            let cfg = MoldingConfig::default();
            let out = mold(&real, &t, &cfg).unwrap();
            prop_assert_eq!(run_lengths(&out.events), runs.iter().map(|&r| r as u64).collect::<Vec<_>>());
            prop_assert!(verify_molding(&real, &out.events, &t));
            let target_size: f64 = runs.iter().sum();
            prop_assert_eq!(out.dummy_count, target_size as u64 - real.len() as u64);
            prop_assert_eq!(out.added_latency_ms, cfg.timeout_ms * real_runs.len() as f64);
            for e in out.events.iter().filter(|e| e.kind == PacketKind::Real) {
                let delay = e.time - real[e.seq.unwrap()].time;
                prop_assert!(delay >= 0.0 && delay <= out.added_latency_ms);
            }
        }
    }
}
