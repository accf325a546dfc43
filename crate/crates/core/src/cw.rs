//! Gradient-based baselines: untargeted and targeted C&W-style traces, and the
//! overhead-capped hybrid that swaps the distance walk of the target-pool
//! generator for objective descent.
//!
//! The perturbation is parameterized as `delta^2` so it is never negative. A
//! run is split into segments of at most `iters_per_target` descent steps; a
//! segment that ends without success commits its perturbation and moves on to
//! a new target, at most `max_target_changes` times. In hybrid mode each
//! segment's increment is scaled down so the total size never exceeds
//! `(1 + max_overhead)` times the source size.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::defended::{run_batch, BatchResult, DefendedTrace};
use crate::detector::{DetectorError, DetectorModel, Objective};
use crate::mockingbird::{nearest_target, sample_pool_with, GenError, TargetCase};
use crate::scalar::Scalar;
use crate::trace::BurstTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CwMode {
    BaseUntargeted,
    BaseTargeted,
    HybridCapped,
}

impl CwMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CwMode::BaseUntargeted => "base_untargeted",
            CwMode::BaseTargeted => "base_targeted",
            CwMode::HybridCapped => "hybrid_capped",
        }
    }

    fn objective(self, class: usize) -> Objective {
        match self {
            CwMode::BaseUntargeted => Objective::CwUntargeted(class),
            CwMode::BaseTargeted | CwMode::HybridCapped => Objective::CwTargeted(class),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CwConfig {
    /// Maximum bandwidth overhead `M` in hybrid mode.
    pub max_overhead: f64,
    /// Maximum number of target changes `T`.
    pub max_target_changes: usize,
    /// Descent steps per target `k`.
    pub iters_per_target: usize,
    /// Largest change of any `delta` entry in one descent step; the gradient
    /// is rescaled so its largest entry has unit magnitude.
    pub step_size: f64,
    /// Starting value of every `delta` entry; zero would have zero gradient.
    pub init_delta: f64,
    /// Required objective margin: success means objective `< -kappa`.
    pub kappa: f64,
    pub seed: u64,
    pub mode: CwMode,
    /// Pool size used by [`PoolTargets`].
    pub pool_size: usize,
}

impl Default for CwConfig {
    fn default() -> Self {
        Self {
            max_overhead: 0.5,
            max_target_changes: 8,
            iters_per_target: 50,
            step_size: 0.03,
            init_delta: 0.03,
            kappa: 0.5,
            seed: 0,
            mode: CwMode::BaseUntargeted,
            pool_size: 10,
        }
    }
}

impl CwConfig {
    pub fn validate(&self) -> Result<(), GenError> {
        let bad = |m: &str| Err(GenError::InvalidConfig(m.into()));
        if !(self.max_overhead > 0.0 && self.max_overhead <= 1.0) {
            return bad("max_overhead must be in (0, 1]");
        }
        if self.max_target_changes < 1 || self.iters_per_target < 1 {
            return bad("max_target_changes and iters_per_target must be at least 1");
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad("step_size must be positive");
        }
        if !(self.init_delta > 0.0 && self.init_delta.is_finite()) {
            return bad("init_delta must be positive");
        }
        if !(self.kappa >= 0.0 && self.kappa < 1.0) {
            return bad("kappa must be in [0, 1)");
        }
        if self.pool_size == 0 {
            return bad("pool_size must be positive");
        }
        Ok(())
    }
}

/// Supplies the target class for each segment of a targeted run.
pub trait TargetProvider<S: Scalar> {
    /// `current` is the normalized working trace.
    fn next_target(&mut self, source_label: usize, current: &[S]) -> Result<usize, GenError>;
}

/// Label of the nearest member of a fresh target pool, as in the
/// target-pool generator.
pub struct PoolTargets<'a, S> {
    pool_source: &'a LabeledDataset<BurstTrace<S>>,
    pool_size: usize,
    scale: S,
    classes: usize,
    rng: ChaCha8Rng,
}

impl<'a, S: Scalar> PoolTargets<'a, S> {
    pub fn new(
        pool_source: &'a LabeledDataset<BurstTrace<S>>,
        pool_size: usize,
        detector: &DetectorModel<S>,
        seed: u64,
    ) -> Self {
        Self {
            pool_source,
            pool_size,
            scale: detector.normalization_scale(),
            classes: detector.classes(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl<S: Scalar> TargetProvider<S> for PoolTargets<'_, S> {
    fn next_target(&mut self, source_label: usize, current: &[S]) -> Result<usize, GenError> {
        let pool = sample_pool_with(
            source_label,
            self.pool_source,
            TargetCase::CaseI,
            self.pool_size,
            &mut self.rng,
        )?;
        let (i, _) = nearest_target(current, &pool, self.scale)?;
        let label = pool.members[i].label;
        if label >= self.classes {
            return Err(GenError::Detector(DetectorError::UnknownClass {
                class: label,
                classes: self.classes,
            }));
        }
        Ok(label)
    }
}

/// A uniformly random class other than the source.
pub struct RandomClassTargets {
    classes: usize,
    rng: ChaCha8Rng,
}

impl RandomClassTargets {
    pub fn new(classes: usize, seed: u64) -> Self {
        Self {
            classes,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl<S: Scalar> TargetProvider<S> for RandomClassTargets {
    fn next_target(&mut self, source_label: usize, _current: &[S]) -> Result<usize, GenError> {
        let others: Vec<usize> = (0..self.classes).filter(|&c| c != source_label).collect();
        others
            .choose(&mut self.rng)
            .copied()
            .ok_or(GenError::NoTarget)
    }
}

/// Objective of `mode` towards (targeted) or away from (untargeted) `class`.
pub fn cw_objective<S: Scalar>(
    model: &DetectorModel<S>,
    trace: &BurstTrace<S>,
    mode: CwMode,
    class: usize,
) -> Result<S, GenError> {
    Ok(model.objective_value(trace, mode.objective(class))?)
}

/// Scales `raw_delta` so that `current + result` stays within
/// `(1 + max_overhead) * size(source)`.
pub fn scale_cap<S: Scalar>(
    source: &[S],
    current: &[S],
    raw_delta: &[S],
    max_overhead: S,
) -> Vec<S> {
    let sum = |v: &[S]| v.iter().copied().sum::<S>();
    let budget = (S::one() + max_overhead) * sum(source) - sum(current);
    let raw_size = sum(raw_delta);
    if raw_size <= S::zero() {
        return raw_delta.to_vec();
    }
    let factor = (budget.max(S::zero()) / raw_size).min(S::one());
    raw_delta.iter().map(|&d| d * factor).collect()
}

fn increment<S: Scalar>(
    cfg: &CwConfig,
    base: &[S],
    segment_start: &[S],
    delta: &[S],
) -> (Vec<S>, S) {
    let raw: Vec<S> = delta.iter().map(|&d| d * d).collect();
    if cfg.mode != CwMode::HybridCapped {
        return (raw, S::one());
    }
    let capped = scale_cap(base, segment_start, &raw, S::of(cfg.max_overhead));
    let raw_size: S = raw.iter().copied().sum();
    let factor = if raw_size > S::zero() {
        capped.iter().copied().sum::<S>() / raw_size
    } else {
        S::one()
    };
    (capped, factor)
}

/// Runs the configured mode on one source trace.
///
/// Only bursts inside the source's non-zero extent are perturbed. `escaped`
/// reports whether the mode's misclassification condition was met;
/// `restarts` counts target changes.
pub fn cw_generate<S: Scalar, P: TargetProvider<S>>(
    source: &BurstTrace<S>,
    detector: &DetectorModel<S>,
    cfg: &CwConfig,
    targets: &mut P,
) -> Result<DefendedTrace<S>, GenError> {
    descend(source, detector, cfg, targets, |_, _| {})
}

/// `observe(segment, objective)` sees the objective before every descent step.
fn descend<S: Scalar, P: TargetProvider<S>, O: FnMut(usize, S)>(
    source: &BurstTrace<S>,
    detector: &DetectorModel<S>,
    cfg: &CwConfig,
    targets: &mut P,
    mut observe: O,
) -> Result<DefendedTrace<S>, GenError> {
    cfg.validate()?;
    let label = source.label;
    if label >= detector.classes() {
        return Err(GenError::Detector(DetectorError::UnknownClass {
            class: label,
            classes: detector.classes(),
        }));
    }
    let scale = detector.normalization_scale();
    let kappa = S::of(cfg.kappa);
    let lr = S::of(cfg.step_size);
    let two = S::of(2.0);
    let extent = source.extent();
    let base = detector.normalize(source)?;
    let mut segment_start = base.clone();
    let mut iterations = 0;
    let mut restarts = 0;
    let mut success = false;

    let source_confidence =
        |x: &[S]| -> Result<S, GenError> { Ok(detector.predict_proba_normalized(x)?[label]) };

    if cfg.mode == CwMode::BaseUntargeted {
        let (value, _) =
            detector.objective_gradient_normalized(&base, Objective::CwUntargeted(label))?;
        success = value < -kappa;
    }

    let mut segment = 0;
    while !success && segment <= cfg.max_target_changes {
        if segment > 0 {
            restarts += 1;
        }
        segment += 1;
        let class = match cfg.mode {
            CwMode::BaseUntargeted => label,
            _ => targets.next_target(label, &segment_start)?,
        };
        let objective = cfg.mode.objective(class);
        let mut delta: Vec<S> = (0..base.len())
            .map(|i| {
                if i < extent {
                    S::of(cfg.init_delta)
                } else {
                    S::zero()
                }
            })
            .collect();
        let mut current = segment_start.clone();
        for _ in 0..cfg.iters_per_target {
            iterations += 1;
            let (inc, factor) = increment(cfg, &base, &segment_start, &delta);
            current = segment_start
                .iter()
                .zip(&inc)
                .map(|(&s, &d)| s + d)
                .collect();
            let (value, grad) = detector.objective_gradient_normalized(&current, objective)?;
            observe(segment, value);
            if value < -kappa {
                success = true;
                break;
            }
            let step: Vec<S> = delta
                .iter()
                .zip(&grad)
                .take(extent)
                .map(|(&d, &g)| two * factor * d * g)
                .collect();
            let peak = step.iter().fold(S::zero(), |m, s| m.max(s.abs()));
            if peak > S::zero() {
                for (d, &s) in delta.iter_mut().zip(&step) {
                    *d -= lr * s / peak;
                }
            }
        }
        if !success {
            let (inc, _) = increment(cfg, &base, &segment_start, &delta);
            current = segment_start
                .iter()
                .zip(&inc)
                .map(|(&s, &d)| s + d)
                .collect();
            let (value, _) = detector.objective_gradient_normalized(&current, objective)?;
            success = value < -kappa;
        }
        segment_start = current;
    }

    let confidence = source_confidence(&segment_start)?;
    let raw_delta: Vec<S> = segment_start
        .iter()
        .zip(&base)
        .map(|(&w, &b)| (w - b).max(S::zero()) * scale)
        .collect();
    Ok(DefendedTrace::package(
        source, &raw_delta, iterations, restarts, confidence, success,
    )?)
}

/// Runs [`cw_generate`] over a dataset; targeted modes draw targets from
/// pools over `pool_source` with per-trace seeds.
pub fn cw_generate_batch<S: Scalar>(
    dataset: &LabeledDataset<BurstTrace<S>>,
    detector: &DetectorModel<S>,
    pool_source: &LabeledDataset<BurstTrace<S>>,
    cfg: &CwConfig,
) -> Result<BatchResult<S>, GenError> {
    cfg.validate()?;
    Ok(run_batch(dataset, cfg.seed, |_, source, seed| {
        let per_trace = CwConfig {
            seed,
            ..cfg.clone()
        };
        let mut targets = PoolTargets::new(pool_source, cfg.pool_size, detector, seed);
        cw_generate(source, detector, &per_trace, &mut targets)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::softmax;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn scale_cap_examples() {
        // size(source) = 100, size(current) = 120, size(raw) = 60 -> budget 30.
        let source = [60.0, 40.0];
        let current = [70.0, 50.0];
        let raw = [30.0, 30.0];
        let capped = scale_cap(&source, &current, &raw, 0.5);
        assert_eq!(capped, vec![15.0, 15.0]);
        let total: f64 = current.iter().chain(&capped).sum();
        assert_eq!(total, 150.0);

        assert_eq!(
            scale_cap(&source, &current, &[10.0, 5.0], 0.5),
            vec![10.0, 5.0]
        );
        assert_eq!(scale_cap(&source, &[90.0, 60.0], &raw, 0.5), vec![0.0, 0.0]);
        assert_eq!(
            scale_cap(&source, &[100.0, 60.0], &raw, 0.5),
            vec![0.0, 0.0]
        );
    }

    proptest! {
        #[test]
        fn scale_cap_respects_budget(source in prop::collection::vec(0.0f64..50.0, 5),
                                     extra in prop::collection::vec(0.0f64..20.0, 5),
                                     raw in prop::collection::vec(0.0f64..30.0, 5),
                                     m in 0.01f64..1.0) {
            let current: Vec<f64> = source.iter().zip(&extra).map(|(a, b)| a + b).collect();
            let capped = scale_cap(&source, &current, &raw, m);
            prop_assert!(capped.iter().all(|&c| c >= 0.0));
            let before: f64 = current.iter().sum();
            let after = before + capped.iter().sum::<f64>();
            let limit = (1.0 + m) * source.iter().sum::<f64>();
            prop_assert!(after <= limit.max(before) + 1e-9);
        }

        #[test]
        fn objective_sign_matches_argmax(logits in prop::collection::vec(-5.0f64..5.0, 2..8), c in 0usize..8) {
            let probs = softmax(&logits);
            let c = c % probs.len();
            let argmax = crate::detector::top_k_of(&probs, 1)[0];
            let unique = probs.iter().filter(|&&p| p == probs[argmax]).count() == 1;
            prop_assume!(unique);
            let targeted = Objective::CwTargeted(c).value(&probs);
            let untargeted = Objective::CwUntargeted(c).value(&probs);
            prop_assert_eq!(targeted <= 0.0, argmax == c);
            prop_assert_eq!(untargeted <= 0.0, argmax != c);
        }
    }

    #[test]
    fn objective_examples() {
        let probs = [0.2f64, 0.5, 0.3];
        assert!((Objective::CwTargeted(1).value(&probs) - (0.3 - 0.5)).abs() < 1e-12);
        let probs = [0.65f64, 0.35];
        assert!((Objective::CwTargeted(0).value(&probs) + 0.3).abs() < 1e-12);
        let uniform = [0.25; 4];
        assert_eq!(Objective::CwUntargeted(2).value(&uniform), 0.0);
    }

    fn bt(label: usize, v: &[f64]) -> BurstTrace<f64> {
        BurstTrace::from_values(label, v, 6).unwrap()
    }

    fn toy_detector() -> (DetectorModel<f64>, LabeledDataset<BurstTrace<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut traces = Vec::new();
        for i in 0..60 {
            let label = i % 3;
            let mut v = vec![2.0; 4];
            v[label] = 12.0;
            for x in &mut v {
                *x += rng.gen_range(0.0..1.0);
            }
            traces.push(bt(label, &v));
        }
        let ds = LabeledDataset::new(3, traces);
        let cfg = crate::detector::TrainConfig {
            hidden_dims: vec![8],
            epochs: 60,
            ..Default::default()
        };
        (crate::detector::train(&ds, &cfg).unwrap(), ds)
    }

    #[test]
    fn base_untargeted_flips_the_toy_detector() {
        let (det, ds) = toy_detector();
        let cfg = CwConfig::default();
        let mut targets = RandomClassTargets::new(3, 0);
        let out = cw_generate(&ds.traces[0], &det, &cfg, &mut targets).unwrap();
        assert!(out.escaped);
        assert_ne!(det.predict(&out.defended).unwrap(), 0);
        assert!(out
            .defended
            .bursts()
            .iter()
            .zip(out.original.bursts())
            .all(|(d, o)| d >= o));
        assert!(out.delta[4..].iter().all(|&d| d == 0.0));
    }

    #[test]
    fn hybrid_never_exceeds_cap() {
        let (det, ds) = toy_detector();
        let cfg = CwConfig {
            mode: CwMode::HybridCapped,
            max_overhead: 0.2,
            ..Default::default()
        };
        let batch = cw_generate_batch(&ds, &det, &ds, &cfg).unwrap();
        assert!(batch.failures.is_empty());
        for (_, t) in &batch.traces {
            let slack = t.original.extent() as f64 / crate::trace::size(&t.original).packets();
            assert!(t.overhead <= 0.2 + slack + 1e-12, "overhead {}", t.overhead);
        }
    }

    #[test]
    fn exhausted_budget_reports_all_target_changes() {
        let det = DetectorModel::<f64>::zeros(&[6, 3], 10.0, "mlp");
        let cfg = CwConfig {
            mode: CwMode::BaseTargeted,
            iters_per_target: 3,
            max_target_changes: 4,
            ..Default::default()
        };
        let mut targets = RandomClassTargets::new(3, 1);
        let out = cw_generate(&bt(0, &[3.0, 4.0]), &det, &cfg, &mut targets).unwrap();
        assert!(!out.escaped);
        assert_eq!(out.restarts, 4);
        assert_eq!(out.iterations_used, 15);
    }

    #[test]
    fn rejects_bad_config_and_class() {
        let det = DetectorModel::<f64>::zeros(&[6, 3], 10.0, "mlp");
        let mut targets = RandomClassTargets::new(3, 1);
        let bad = CwConfig {
            max_overhead: 0.0,
            ..Default::default()
        };
        assert!(matches!(
            cw_generate(&bt(0, &[1.0]), &det, &bad, &mut targets),
            Err(GenError::InvalidConfig(_))
        ));
        assert!(matches!(
            cw_generate(&bt(5, &[1.0]), &det, &CwConfig::default(), &mut targets),
            Err(GenError::Detector(DetectorError::UnknownClass { .. }))
        ));
        assert!(matches!(
            cw_objective(&det, &bt(0, &[1.0]), CwMode::BaseTargeted, 7),
            Err(GenError::Detector(DetectorError::UnknownClass { .. }))
        ));
    }

    #[test]
    fn small_steps_mostly_decrease_the_objective() {
        let spec = crate::dataset::SyntheticSpec {
            classes: 5,
            instances_per_class: 10,
            ..Default::default()
        };
        let ds = crate::dataset::generate_synthetic::<f64>(&spec).unwrap();
        let det = crate::detector::train(&ds, &crate::detector::TrainConfig::default()).unwrap();
        let cfg = CwConfig {
            mode: CwMode::BaseTargeted,
            step_size: 0.005,
            iters_per_target: 20,
            max_target_changes: 1,
            ..Default::default()
        };
        let (mut steps, mut down) = (0, 0);
        for (i, source) in ds.traces.iter().enumerate().step_by(5) {
            let mut last: Option<(usize, f64)> = None;
            let mut targets = RandomClassTargets::new(5, i as u64);
            descend(source, &det, &cfg, &mut targets, |seg, v| {
                if let Some((s, prev)) = last {
                    if s == seg {
                        steps += 1;
                        down += usize::from(v <= prev);
                    }
                }
                last = Some((seg, v));
            })
            .unwrap();
        }
        assert!(steps > 50);
        assert!(down as f64 >= 0.9 * steps as f64, "{down}/{steps}");
    }
}
