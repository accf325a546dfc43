//! Packet-direction and burst representations of a traffic trace.
//!
//! A burst is a maximal run of packets travelling in the same direction. Burst
//! vectors always start with an outgoing (client to server) burst and
//! alternate from there; only non-zero entries count when alternating.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

/// Default width of a burst vector.
pub const DEFAULT_BURST_LEN: usize = 750;
/// Default width of the attacker's packet-direction input.
pub const DEFAULT_DIRECTION_LEN: usize = 5000;

pub const OUTGOING: i8 = 1;
pub const INCOMING: i8 = -1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TraceError {
    #[error("trace is empty")]
    EmptyTrace,
    #[error("trace starts with an incoming packet")]
    StartsIncoming,
    #[error("invalid direction {value} at position {index}")]
    InvalidDirection { index: usize, value: i64 },
    #[error("burst {index} is not a non-negative integer ({value})")]
    NonIntegerBurst { index: usize, value: f64 },
    #[error("burst {index} is negative or not finite ({value})")]
    NegativeBurst { index: usize, value: f64 },
    #[error("original trace has zero size")]
    ZeroSizeOriginal,
    #[error("defended burst {index} is smaller than the original")]
    ShrunkBurst { index: usize },
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
}

/// A labelled sequence of packet directions (`+1` outgoing, `-1` incoming).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PacketTrace {
    pub label: usize,
    directions: Vec<i8>,
}

impl PacketTrace {
    pub fn new(label: usize, directions: Vec<i8>) -> Result<Self, TraceError> {
        if let Some((index, &d)) = directions
            .iter()
            .enumerate()
            .find(|(_, &d)| d != OUTGOING && d != INCOMING)
        {
            return Err(TraceError::InvalidDirection {
                index,
                value: d as i64,
            });
        }
        Ok(Self { label, directions })
    }

    pub fn directions(&self) -> &[i8] {
        &self.directions
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    pub fn starts_outgoing(&self) -> bool {
        self.directions.first() == Some(&OUTGOING)
    }

    /// Fixed-width attacker input: truncated or zero-padded to `len`.
    pub fn padded(&self, len: usize) -> Vec<i8> {
        let mut out: Vec<i8> = self.directions.iter().copied().take(len).collect();
        out.resize(len, 0);
        out
    }
}

/// A labelled, fixed-width vector of burst magnitudes (in packets).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BurstTrace<S> {
    pub label: usize,
    bursts: Vec<S>,
    logical_len: usize,
}

impl<S: Scalar> BurstTrace<S> {
    /// Builds a trace of width `fixed_len`, truncating or zero-padding `values`.
    pub fn from_values(label: usize, values: &[S], fixed_len: usize) -> Result<Self, TraceError> {
        let mut bursts: Vec<S> = values.iter().copied().take(fixed_len).collect();
        bursts.resize(fixed_len, S::zero());
        Self::from_vec(label, bursts)
    }

    /// Takes `bursts` as the full fixed-width vector.
    pub fn from_vec(label: usize, bursts: Vec<S>) -> Result<Self, TraceError> {
        if let Some((index, v)) = bursts
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < S::zero())
        {
            return Err(TraceError::NegativeBurst {
                index,
                value: v.to_f64_lossy(),
            });
        }
        let logical_len = bursts.iter().take_while(|v| **v > S::zero()).count();
        Ok(Self {
            label,
            bursts,
            logical_len,
        })
    }

    pub fn zeros(label: usize, fixed_len: usize) -> Self {
        Self {
            label,
            bursts: vec![S::zero(); fixed_len],
            logical_len: 0,
        }
    }

    pub fn bursts(&self) -> &[S] {
        &self.bursts
    }

    pub fn fixed_len(&self) -> usize {
        self.bursts.len()
    }

    /// Number of leading non-zero bursts.
    pub fn logical_len(&self) -> usize {
        self.logical_len
    }

    /// Index of the last non-zero burst plus one.
    pub fn extent(&self) -> usize {
        self.bursts
            .iter()
            .rposition(|v| *v > S::zero())
            .map_or(0, |i| i + 1)
    }

    /// Non-zero bursts in order; the effective alternating sequence.
    pub fn nonzero_bursts(&self) -> Vec<S> {
        self.bursts
            .iter()
            .copied()
            .filter(|v| *v > S::zero())
            .collect()
    }

    pub fn into_vec(self) -> Vec<S> {
        self.bursts
    }

    /// Same label and width with every entry multiplied by `factor` (must be >= 0).
    pub fn scaled(&self, factor: S) -> Self {
        Self::from_vec(
            self.label,
            self.bursts.iter().map(|&v| v * factor).collect(),
        )
        .expect("non-negative factor keeps bursts valid")
    }

    pub fn cast<T: Scalar>(&self) -> BurstTrace<T> {
        BurstTrace {
            label: self.label,
            bursts: self
                .bursts
                .iter()
                .map(|v| T::of(v.to_f64_lossy()))
                .collect(),
            logical_len: self.logical_len,
        }
    }

    pub fn is_integral(&self) -> bool {
        self.bursts.iter().all(|v| v.fract() == S::zero())
    }
}

/// Total packet count of a trace.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct TraceSize<S>(pub S);

impl<S: Scalar> TraceSize<S> {
    pub fn packets(self) -> S {
        self.0
    }
}

/// Run-length encodes a packet trace into a burst trace of width `fixed_len`.
pub fn directions_to_bursts<S: Scalar>(
    trace: &PacketTrace,
    fixed_len: usize,
) -> Result<BurstTrace<S>, TraceError> {
    let dirs = trace.directions();
    match dirs.first() {
        None => return Err(TraceError::EmptyTrace),
        Some(&INCOMING) => return Err(TraceError::StartsIncoming),
        _ => {}
    }
    let mut runs: Vec<usize> = Vec::new();
    let mut prev = 0i8;
    for &d in dirs {
        if d == prev {
            *runs.last_mut().expect("run started") += 1;
        } else {
            if runs.len() == fixed_len {
                break;
            }
            runs.push(1);
            prev = d;
        }
    }
    let values: Vec<S> = runs.into_iter().map(S::of_usize).collect();
    BurstTrace::from_values(trace.label, &values, fixed_len)
}

/// Expands integer bursts back into packet directions, keeping at most `max_len`.
///
/// Zero bursts transmit nothing, so direction alternates per non-zero burst.
/// The result is not padded; use [`PacketTrace::padded`] for a fixed-width view.
pub fn bursts_to_directions<S: Scalar>(
    trace: &BurstTrace<S>,
    max_len: usize,
) -> Result<PacketTrace, TraceError> {
    for (index, v) in trace.bursts().iter().enumerate() {
        if v.fract() != S::zero() {
            return Err(TraceError::NonIntegerBurst {
                index,
                value: v.to_f64_lossy(),
            });
        }
    }
    let mut directions = Vec::new();
    let mut dir = OUTGOING;
    'outer: for v in trace.bursts().iter().filter(|v| **v > S::zero()) {
        let count = v.to_usize().unwrap_or(usize::MAX);
        for _ in 0..count {
            if directions.len() == max_len {
                break 'outer;
            }
            directions.push(dir);
        }
        dir = -dir;
    }
    Ok(PacketTrace {
        label: trace.label,
        directions,
    })
}

pub fn size<S: Scalar>(trace: &BurstTrace<S>) -> TraceSize<S> {
    TraceSize(trace.bursts().iter().copied().sum())
}

/// Added volume over original volume; insertion-only defenses only.
pub fn bandwidth_overhead<S: Scalar>(
    original: &BurstTrace<S>,
    defended: &BurstTrace<S>,
) -> Result<S, TraceError> {
    if original.fixed_len() != defended.fixed_len() {
        return Err(TraceError::LengthMismatch {
            expected: original.fixed_len(),
            actual: defended.fixed_len(),
        });
    }
    if let Some(index) = original
        .bursts()
        .iter()
        .zip(defended.bursts())
        .position(|(o, d)| d < o)
    {
        return Err(TraceError::ShrunkBurst { index });
    }
    let base = size(original).0;
    if base <= S::zero() {
        return Err(TraceError::ZeroSizeOriginal);
    }
    Ok((size(defended).0 - base) / base)
}

/// Ceil of every entry; never shrinks a burst.
pub fn round_bursts<S: Scalar>(trace: &BurstTrace<S>) -> BurstTrace<S> {
    BurstTrace::from_vec(
        trace.label,
        trace.bursts().iter().map(|v| v.ceil()).collect(),
    )
    .expect("ceil of non-negative values is non-negative")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pt(dirs: &[i8]) -> PacketTrace {
        PacketTrace::new(0, dirs.to_vec()).unwrap()
    }

    fn bt(values: &[f64]) -> BurstTrace<f64> {
        BurstTrace::from_values(0, values, values.len()).unwrap()
    }

    #[test]
    fn run_length_encodes_directions() {
        let b: BurstTrace<f64> = directions_to_bursts(&pt(&[1, 1, -1, -1, -1, 1]), 5).unwrap();
        assert_eq!(b.bursts(), &[2.0, 3.0, 1.0, 0.0, 0.0]);
        assert_eq!(b.logical_len(), 3);

        let b: BurstTrace<f64> = directions_to_bursts(&pt(&[1]), 3).unwrap();
        assert_eq!(b.bursts(), &[1.0, 0.0, 0.0]);

        let b: BurstTrace<f64> = directions_to_bursts(&pt(&[1, -1, 1, -1]), 2).unwrap();
        assert_eq!(b.bursts(), &[1.0, 1.0]);
        assert_eq!(b.logical_len(), 2);
    }

    #[test]
    fn encoding_errors() {
        assert_eq!(
            directions_to_bursts::<f64>(&pt(&[]), 4).unwrap_err(),
            TraceError::EmptyTrace
        );
        assert_eq!(
            directions_to_bursts::<f64>(&pt(&[-1, 1]), 4).unwrap_err(),
            TraceError::StartsIncoming
        );
        assert!(matches!(
            PacketTrace::new(0, vec![1, 0]),
            Err(TraceError::InvalidDirection { index: 1, .. })
        ));
    }

    #[test]
    fn expands_bursts() {
        let p = bursts_to_directions(&bt(&[2.0, 3.0, 1.0]), DEFAULT_DIRECTION_LEN).unwrap();
        assert_eq!(p.directions(), &[1, 1, -1, -1, -1, 1]);
        let padded = p.padded(DEFAULT_DIRECTION_LEN);
        assert_eq!(padded.len(), 5000);
        assert!(padded[6..].iter().all(|&d| d == 0));

        let p = bursts_to_directions(&bt(&[0.0, 0.0, 0.0]), DEFAULT_DIRECTION_LEN).unwrap();
        assert!(p.is_empty());
        assert!(p.padded(5000).iter().all(|&d| d == 0));

        let p = bursts_to_directions(&bt(&[1.0, 0.0, 2.0]), 100).unwrap();
        assert_eq!(p.directions(), &[1, -1, -1]);
    }

    #[test]
    fn expansion_truncates_and_rejects_fractions() {
        let p = bursts_to_directions(&bt(&[3.0, 4.0]), 5).unwrap();
        assert_eq!(p.directions(), &[1, 1, 1, -1, -1]);
        assert!(matches!(
            bursts_to_directions(&bt(&[1.5]), 10),
            Err(TraceError::NonIntegerBurst { index: 0, .. })
        ));
    }

    #[test]
    fn sizes() {
        assert_eq!(size(&bt(&[2.0, 3.0, 1.0, 0.0, 0.0])).packets(), 6.0);
        assert_eq!(size(&bt(&[0.0; 4])).packets(), 0.0);
        assert_eq!(size(&bt(&[1.5, 2.5])).packets(), 4.0);
    }

    #[test]
    fn overhead() {
        let mut o = vec![0.0; 10];
        o[0] = 100.0;
        let mut d = o.clone();
        d[1] = 58.0;
        let r = bandwidth_overhead(&bt(&o), &bt(&d)).unwrap();
        assert!((r - 0.58).abs() < 1e-12);
        assert_eq!(bandwidth_overhead(&bt(&o), &bt(&o)).unwrap(), 0.0);
        assert_eq!(
            bandwidth_overhead(&bt(&[2.0, 2.0]), &bt(&[3.0, 5.0])).unwrap(),
            1.0
        );
        assert_eq!(
            bandwidth_overhead(&bt(&[0.0, 0.0]), &bt(&[1.0, 0.0])).unwrap_err(),
            TraceError::ZeroSizeOriginal
        );
        assert_eq!(
            bandwidth_overhead(&bt(&[2.0, 2.0]), &bt(&[3.0, 1.0])).unwrap_err(),
            TraceError::ShrunkBurst { index: 1 }
        );
    }

    #[test]
    fn rounding_is_ceil() {
        assert_eq!(
            round_bursts(&bt(&[2.1, 3.0, 0.0])).bursts(),
            &[3.0, 3.0, 0.0]
        );
        assert_eq!(round_bursts(&bt(&[4.0, 1.0])).bursts(), &[4.0, 1.0]);
        assert_eq!(round_bursts(&bt(&[0.0001])).bursts(), &[1.0]);
    }

    #[test]
    fn works_in_single_precision() {
        let b: BurstTrace<f32> = directions_to_bursts(&pt(&[1, 1, -1]), 4).unwrap();
        assert_eq!(b.bursts(), &[2.0f32, 1.0, 0.0, 0.0]);
        assert_eq!(size(&b).packets(), 3.0f32);
    }

    fn preprocessed_trace() -> impl Strategy<Value = PacketTrace> {
        prop::collection::vec(1usize..6, 1..40).prop_map(|runs| {
            let mut dirs = Vec::new();
            let mut d = OUTGOING;
            for r in runs {
                dirs.extend(std::iter::repeat_n(d, r));
                d = -d;
            }
            PacketTrace::new(3, dirs).unwrap()
        })
    }

    proptest! {
        #[test]
        fn direction_round_trip(t in preprocessed_trace()) {
            let b: BurstTrace<f64> = directions_to_bursts(&t, 64).unwrap();
            let back = bursts_to_directions(&b, DEFAULT_DIRECTION_LEN).unwrap();
            prop_assert_eq!(back, t);
        }

        #[test]
        fn size_is_additive(a in prop::collection::vec(0.0f64..50.0, 8),
                            d in prop::collection::vec(0.0f64..50.0, 8)) {
            let sum: Vec<f64> = a.iter().zip(&d).map(|(x, y)| x + y).collect();
            let lhs = size(&bt(&sum)).packets();
            let rhs = size(&bt(&a)).packets() + size(&bt(&d)).packets();
            prop_assert!((lhs - rhs).abs() < 1e-9);
        }

        #[test]
        fn overhead_increases_with_defended_size(a in prop::collection::vec(1.0f64..50.0, 6),
                                                 extra in 0.0f64..20.0, more in 0.01f64..20.0) {
            let o = bt(&a);
            let mut d1 = a.clone();
            d1[0] += extra;
            let mut d2 = d1.clone();
            d2[1] += more;
            let r1 = bandwidth_overhead(&o, &bt(&d1)).unwrap();
            let r2 = bandwidth_overhead(&o, &bt(&d2)).unwrap();
            prop_assert!(r2 > r1);
            prop_assert_eq!(bandwidth_overhead(&o, &o).unwrap(), 0.0);
        }

        #[test]
        fn rounding_never_shrinks(a in prop::collection::vec(0.0f64..50.0, 1..30)) {
            let t = bt(&a);
            let r = round_bursts(&t);
            prop_assert!(r.bursts().iter().zip(t.bursts()).all(|(x, y)| x >= y));
            let excess = size(&r).packets() - size(&t).packets();
            prop_assert!(excess >= 0.0 && excess < a.len() as f64);
        }
    }
}
