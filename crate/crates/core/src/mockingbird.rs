//! Target-pool trace generation.
//!
//! The source trace is pushed, one gradient step at a time, towards the
//! nearest member of a random pool of traces from other sites. Only bursts
//! below the target grow. After every step the detector is queried and the
//! loop ends once its confidence in the source class drops under `tau_c`. When
//! the per-step change stays under `tau_d` for `lambda` consecutive steps, a
//! fresh pool is drawn and the walk continues from the already perturbed
//! trace. All geometry happens on bursts divided by the detector's
//! normalization scale.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::LabeledDataset;
use crate::defended::{run_batch, BatchResult, DefendedTrace};
use crate::detector::{DetectorError, DetectorModel};
use crate::scalar::{l2_distance, l2_norm, Scalar};
use crate::trace::{BurstTrace, TraceError};

/// How many times a pool made only of exact copies of the current trace is
/// redrawn before giving up.
const DEGENERATE_RETRIES: usize = 32;

#[derive(Debug, Error)]
pub enum GenError {
    #[error("target pool needs {needed} candidates, only {available} available")]
    InsufficientPool { needed: usize, available: usize },
    #[error("every pool member coincides with the current trace")]
    AllTargetsDegenerate,
    #[error("current trace already equals the target")]
    ZeroDistance,
    #[error("invalid generation config: {0}")]
    InvalidConfig(String),
    #[error("no target class available")]
    NoTarget,
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

/// Where target pools come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TargetCase {
    /// Other monitored sites, drawn from the same set the sources come from.
    #[serde(rename = "I")]
    CaseI,
    /// Unmonitored sites never seen by the detector; any label qualifies.
    #[serde(rename = "II")]
    CaseII,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub alpha: f64,
    pub tau_c: f64,
    pub tau_d: f64,
    pub lambda: usize,
    pub pool_size: usize,
    pub max_iters: usize,
    pub target_case: TargetCase,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            alpha: 5.0,
            tau_c: 0.01,
            tau_d: 1e-4,
            lambda: 10,
            pool_size: 10,
            max_iters: 500,
            target_case: TargetCase::CaseI,
            seed: 0,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), GenError> {
        let bad = |m: &str| Err(GenError::InvalidConfig(m.into()));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be non-negative");
        }
        if !(self.tau_c > 0.0 && self.tau_c <= 1.0) {
            return bad("tau_c must be in (0, 1]");
        }
        if !(self.tau_d > 0.0 && self.tau_d.is_finite()) {
            return bad("tau_d must be positive");
        }
        if self.lambda == 0 || self.pool_size == 0 || self.max_iters == 0 {
            return bad("lambda, pool_size and max_iters must be positive");
        }
        Ok(())
    }
}

/// Candidate targets for one source trace.
#[derive(Debug, Clone)]
pub struct TargetPool<'a, S> {
    pub members: Vec<&'a BurstTrace<S>>,
    pub provenance: TargetCase,
}

/// Draws `pool_size` candidates uniformly without replacement.
pub fn sample_pool_with<'a, S: Scalar>(
    source_label: usize,
    pool_source: &'a LabeledDataset<BurstTrace<S>>,
    case: TargetCase,
    pool_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TargetPool<'a, S>, GenError> {
    let candidates: Vec<&BurstTrace<S>> = pool_source
        .traces
        .iter()
        .filter(|t| case == TargetCase::CaseII || t.label != source_label)
        .collect();
    if candidates.len() < pool_size {
        return Err(GenError::InsufficientPool {
            needed: pool_size,
            available: candidates.len(),
        });
    }
    let members = sample(rng, candidates.len(), pool_size)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    Ok(TargetPool {
        members,
        provenance: case,
    })
}

/// Pool for `source_label` seeded from `cfg.seed`.
pub fn sample_pool<'a, S: Scalar>(
    source_label: usize,
    pool_source: &'a LabeledDataset<BurstTrace<S>>,
    cfg: &GenerationConfig,
) -> Result<TargetPool<'a, S>, GenError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    sample_pool_with(
        source_label,
        pool_source,
        cfg.target_case,
        cfg.pool_size,
        &mut rng,
    )
}

/// Index and l2 distance of the pool member closest to `current`, comparing
/// `current` against members divided by `scale`. Members at distance zero are
/// skipped; ties go to the lower index.
pub fn nearest_target<S: Scalar>(
    current: &[S],
    pool: &TargetPool<'_, S>,
    scale: S,
) -> Result<(usize, S), GenError> {
    let mut best: Option<(usize, S)> = None;
    for (i, member) in pool.members.iter().enumerate() {
        let d = current
            .iter()
            .zip(member.bursts())
            .map(|(&c, &m)| {
                let diff = c - m / scale;
                diff * diff
            })
            .sum::<S>()
            .sqrt();
        if d == S::zero() {
            continue;
        }
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best.ok_or(GenError::AllTargetsDegenerate)
}

/// One move towards `target`: `alpha * (t_i - b_i) / D` where the target burst
/// is larger, zero elsewhere. This is `alpha` times the positive part of the
/// gradient of `-D`, with `D = ||current - target||`.
pub fn perturbation_step<S: Scalar>(
    current: &[S],
    target: &[S],
    alpha: S,
) -> Result<Vec<S>, GenError> {
    let dist = l2_distance(current, target);
    if dist == S::zero() {
        return Err(GenError::ZeroDistance);
    }
    Ok(current
        .iter()
        .zip(target)
        .map(|(&b, &t)| {
            if t > b {
                alpha * (t - b) / dist
            } else {
                S::zero()
            }
        })
        .collect())
}

struct Walk<'a, S> {
    pool_source: &'a LabeledDataset<BurstTrace<S>>,
    cfg: &'a GenerationConfig,
    source_label: usize,
    scale: S,
    rng: ChaCha8Rng,
}

impl<S: Scalar> Walk<'_, S> {
    /// Draws pools until one has a member distinct from `current`; returns the
    /// nearest member in normalized space.
    fn pick_target(&mut self, current: &[S]) -> Result<Vec<S>, GenError> {
        for _ in 0..DEGENERATE_RETRIES {
            let pool = sample_pool_with(
                self.source_label,
                self.pool_source,
                self.cfg.target_case,
                self.cfg.pool_size,
                &mut self.rng,
            )?;
            match nearest_target(current, &pool, self.scale) {
                Ok((i, _)) => {
                    return Ok(pool.members[i]
                        .bursts()
                        .iter()
                        .map(|&v| v / self.scale)
                        .collect())
                }
                Err(GenError::AllTargetsDegenerate) => continue,
                Err(e) => return Err(e),
            }
        }
        Err(GenError::AllTargetsDegenerate)
    }
}

/// Defends one source trace against `detector`.
pub fn generate<S: Scalar>(
    source: &BurstTrace<S>,
    detector: &DetectorModel<S>,
    pool_source: &LabeledDataset<BurstTrace<S>>,
    cfg: &GenerationConfig,
) -> Result<DefendedTrace<S>, GenError> {
    cfg.validate()?;
    let scale = detector.normalization_scale();
    let label = source.label;
    let tau_c = S::of(cfg.tau_c);
    let tau_d = S::of(cfg.tau_d);
    let alpha = S::of(cfg.alpha);

    let base = detector.normalize(source)?;
    let mut delta = vec![S::zero(); base.len()];
    let mut current = base.clone();
    let confidence_of = |x: &[S]| -> Result<S, GenError> {
        let probs = detector.predict_proba_normalized(x)?;
        probs
            .get(label)
            .copied()
            .ok_or(GenError::Detector(DetectorError::UnknownClass {
                class: label,
                classes: probs.len(),
            }))
    };

    let mut confidence = confidence_of(&current)?;
    let mut iterations = 0;
    let mut restarts = 0;
    if confidence >= tau_c {
        let mut walk = Walk {
            pool_source,
            cfg,
            source_label: label,
            scale,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        };
        let mut target = walk.pick_target(&current)?;
        let mut stalled = 0;
        while iterations < cfg.max_iters {
            iterations += 1;
            let step = match perturbation_step(&current, &target, alpha) {
                Ok(step) => step,
                Err(GenError::ZeroDistance) => vec![S::zero(); current.len()],
                Err(e) => return Err(e),
            };
            for ((c, d), &s) in current.iter_mut().zip(delta.iter_mut()).zip(&step) {
                *d += s;
                *c += s;
            }
            confidence = confidence_of(&current)?;
            if confidence < tau_c {
                break;
            }
            if l2_norm(&step) < tau_d {
                stalled += 1;
            } else {
                stalled = 0;
            }
            if stalled >= cfg.lambda {
                target = walk.pick_target(&current)?;
                restarts += 1;
                stalled = 0;
            }
        }
    }
    let raw_delta: Vec<S> = delta.iter().map(|&d| d * scale).collect();
    Ok(DefendedTrace::package(
        source,
        &raw_delta,
        iterations,
        restarts,
        confidence,
        confidence < tau_c,
    )?)
}

/// Defends every trace of `dataset`; trace `i` uses seed `cfg.seed ^ i`.
pub fn generate_batch<S: Scalar>(
    dataset: &LabeledDataset<BurstTrace<S>>,
    detector: &DetectorModel<S>,
    pool_source: &LabeledDataset<BurstTrace<S>>,
    cfg: &GenerationConfig,
) -> Result<BatchResult<S>, GenError> {
    cfg.validate()?;
    Ok(run_batch(dataset, cfg.seed, |_, source, seed| {
        let per_trace = GenerationConfig {
            seed,
            ..cfg.clone()
        };
        generate(source, detector, pool_source, &per_trace)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bt(label: usize, v: &[f64]) -> BurstTrace<f64> {
        BurstTrace::from_values(label, v, v.len()).unwrap()
    }

    fn three_class_set() -> LabeledDataset<BurstTrace<f64>> {
        let traces = (0..12)
            .map(|i| bt(i % 3, &[1.0 + i as f64, 2.0, 3.0]))
            .collect();
        LabeledDataset::new(3, traces)
    }

    #[test]
    fn case_one_pool_excludes_source_class() {
        let ds = three_class_set();
        let cfg = GenerationConfig {
            pool_size: 5,
            ..Default::default()
        };
        let pool = sample_pool(0, &ds, &cfg).unwrap();
        assert_eq!(pool.members.len(), 5);
        assert!(pool.members.iter().all(|m| m.label != 0));
        let again = sample_pool(0, &ds, &cfg).unwrap();
        assert_eq!(pool.members, again.members);
    }

    #[test]
    fn full_pool_is_the_candidate_set() {
        let ds = three_class_set();
        let cfg = GenerationConfig {
            pool_size: 8,
            ..Default::default()
        };
        let pool = sample_pool(1, &ds, &cfg).unwrap();
        let mut got: Vec<f64> = pool.members.iter().map(|m| m.bursts()[0]).collect();
        got.sort_by(f64::total_cmp);
        let mut want: Vec<f64> = ds
            .traces
            .iter()
            .filter(|t| t.label != 1)
            .map(|t| t.bursts()[0])
            .collect();
        want.sort_by(f64::total_cmp);
        assert_eq!(got, want);
        let too_many = GenerationConfig {
            pool_size: 9,
            ..Default::default()
        };
        assert!(matches!(
            sample_pool(1, &ds, &too_many),
            Err(GenError::InsufficientPool {
                needed: 9,
                available: 8
            })
        ));
        let open = GenerationConfig {
            pool_size: 12,
            target_case: TargetCase::CaseII,
            ..Default::default()
        };
        assert_eq!(sample_pool(1, &ds, &open).unwrap().members.len(), 12);
    }

    fn pool_of(members: &[BurstTrace<f64>]) -> TargetPool<'_, f64> {
        TargetPool {
            members: members.iter().collect(),
            provenance: TargetCase::CaseI,
        }
    }

    #[test]
    fn nearest_target_rules() {
        let members = [bt(1, &[2.0, 4.0]), bt(2, &[5.0, 3.0])];
        let (i, d) = nearest_target(&[2.0, 3.0], &pool_of(&members), 1.0).unwrap();
        assert_eq!((i, d), (0, 1.0));

        let members = [bt(1, &[2.0, 3.0]), bt(2, &[9.0, 3.0])];
        assert_eq!(
            nearest_target(&[2.0, 3.0], &pool_of(&members), 1.0)
                .unwrap()
                .0,
            1
        );

        let members = [bt(1, &[3.0, 3.0]), bt(2, &[1.0, 3.0])];
        assert_eq!(
            nearest_target(&[2.0, 3.0], &pool_of(&members), 1.0)
                .unwrap()
                .0,
            0
        );

        let members = [bt(1, &[4.0, 6.0])];
        assert!(matches!(
            nearest_target(&[2.0, 3.0], &pool_of(&[bt(1, &[2.0, 3.0])]), 1.0),
            Err(GenError::AllTargetsDegenerate)
        ));
        // Scale maps the member [4, 6] onto [2, 3], a degenerate target.
        assert!(matches!(
            nearest_target(&[2.0, 3.0], &pool_of(&members), 2.0),
            Err(GenError::AllTargetsDegenerate)
        ));
    }

    #[test]
    fn step_examples() {
        let s = perturbation_step(&[2.0, 5.0, 1.0], &[4.0, 5.0, 3.0], 1.0).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((s[0] - h).abs() < 1e-12 && s[1] == 0.0 && (s[2] - h).abs() < 1e-12);
        assert!(perturbation_step(&[2.0, 5.0], &[4.0, 1.0], 0.0)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
        assert!(perturbation_step(&[4.0, 5.0], &[3.0, 1.0], 2.0)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
        assert!(matches!(
            perturbation_step(&[1.0], &[1.0], 1.0),
            Err(GenError::ZeroDistance)
        ));
    }

    fn neg_distance_fd(b: &[f64], t: &[f64], h: f64) -> Vec<f64> {
        (0..b.len())
            .map(|i| {
                let mut up = b.to_vec();
                let mut down = b.to_vec();
                up[i] += h;
                down[i] -= h;
                (-l2_distance(&up, t) + l2_distance(&down, t)) / (2.0 * h)
            })
            .collect()
    }

    proptest! {
        #[test]
        fn step_is_clamped_gradient_of_negative_distance(
            b in prop::collection::vec(0.0f64..10.0, 6),
            t in prop::collection::vec(0.0f64..10.0, 6),
            alpha in 0.1f64..8.0,
        ) {
            prop_assume!(l2_distance(&b, &t) > 1e-3);
            let step = perturbation_step(&b, &t, alpha).unwrap();
            let fd = neg_distance_fd(&b, &t, 1e-5);
            for (s, g) in step.iter().zip(&fd) {
                let expected = if *g > 1e-9 { alpha * g } else { 0.0 };
                prop_assert!((s - expected).abs() <= 1e-6 * alpha.max(1.0), "{} vs {}", s, expected);
                prop_assert!(*s >= 0.0);
            }
        }

        #[test]
        fn small_steps_approach_the_target(
            b in prop::collection::vec(0.0f64..10.0, 6),
            t in prop::collection::vec(0.0f64..10.0, 6),
        ) {
            let d0 = l2_distance(&b, &t);
            prop_assume!(d0 > 1e-3);
            let step = perturbation_step(&b, &t, 0.01 * d0).unwrap();
            prop_assume!(step.iter().any(|&s| s > 0.0));
            let moved: Vec<f64> = b.iter().zip(&step).map(|(x, s)| x + s).collect();
            prop_assert!(l2_distance(&moved, &t) < d0);
        }
    }

    #[test]
    fn uniform_detector_runs_to_the_iteration_budget() {
        let detector = DetectorModel::<f64>::zeros(&[3, 2], 10.0, "mlp");
        let pool = LabeledDataset::new(
            2,
            vec![
                bt(1, &[9.0, 1.0, 4.0]),
                bt(1, &[3.0, 8.0, 2.0]),
                bt(1, &[1.0, 1.0, 9.0]),
            ],
        );
        let cfg = GenerationConfig {
            pool_size: 2,
            max_iters: 40,
            ..Default::default()
        };
        let out = generate(&bt(0, &[2.0, 2.0, 2.0]), &detector, &pool, &cfg).unwrap();
        assert_eq!(out.iterations_used, 40);
        assert!(!out.escaped);
        assert!((out.final_source_confidence - 0.5).abs() < 1e-12);
        assert!(out.restarts >= 1);
        for (d, o) in out.defended.bursts().iter().zip(out.original.bursts()) {
            assert!(d >= o);
        }
    }

    #[test]
    fn threshold_of_one_escapes_immediately() {
        let detector = DetectorModel::<f64>::zeros(&[3, 2], 10.0, "mlp");
        let pool = LabeledDataset::new(2, vec![bt(1, &[9.0, 1.0, 4.0])]);
        let cfg = GenerationConfig {
            pool_size: 1,
            tau_c: 1.0,
            ..Default::default()
        };
        // The uniform 0.5 is already under the threshold before the first step.
        let out = generate(&bt(0, &[2.0, 2.0, 2.0]), &detector, &pool, &cfg).unwrap();
        assert!(out.escaped);
        assert_eq!(out.iterations_used, 0);
        assert!(out.delta.iter().all(|&d| d == 0.0));
        assert_eq!(out.overhead, 0.0);
    }

    #[test]
    fn batches_are_deterministic() {
        let detector = DetectorModel::<f64>::random(&[3, 4, 3], 12.0, "mlp", 3);
        let ds = three_class_set();
        let cfg = GenerationConfig {
            pool_size: 3,
            max_iters: 30,
            ..Default::default()
        };
        let a = generate_batch(&ds, &detector, &ds, &cfg).unwrap();
        let b = generate_batch(&ds, &detector, &ds, &cfg).unwrap();
        assert_eq!(a.summary, b.summary);
        assert_eq!(a.traces, b.traces);
        let empty = LabeledDataset::new(3, vec![]);
        let e = generate_batch(&empty, &detector, &ds, &cfg).unwrap();
        assert!(e.traces.is_empty());
        assert_eq!(e.summary.count, 0);
        assert_eq!(e.summary.mean_overhead, None);
    }
}
