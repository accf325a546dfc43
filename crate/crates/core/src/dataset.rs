//! Labelled trace collections: preprocessing, splitting, text persistence and
//! a seeded synthetic generator used in place of crawled traffic.
//!
//! Text formats, one trace per line, single-space separated, LF endings:
//!
//! * directions: `<label> <d1> <d2> ...` with each `d` either `1` or `-1`
//! * bursts: `<label> <b1> <b2> ...` with non-negative decimal numbers
//!
//! Burst lines stop at the last non-zero burst; the reader zero-pads to the
//! requested width.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::trace::{BurstTrace, PacketTrace, DEFAULT_BURST_LEN};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("class {class} has {count} instances, need at least {needed}")]
    ClassTooSmall {
        class: usize,
        count: usize,
        needed: usize,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: label {label} out of range for {classes} classes")]
    LabelOutOfRange {
        line: usize,
        label: usize,
        classes: usize,
    },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub trait Labeled {
    fn label(&self) -> usize;
}

impl Labeled for PacketTrace {
    fn label(&self) -> usize {
        self.label
    }
}

impl<S> Labeled for BurstTrace<S> {
    fn label(&self) -> usize {
        self.label
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset<T> {
    pub classes: usize,
    pub traces: Vec<T>,
}

impl<T: Labeled> LabeledDataset<T> {
    /// Panics if a label is not below `classes`.
    pub fn new(classes: usize, traces: Vec<T>) -> Self {
        assert!(
            traces.iter().all(|t| t.label() < classes),
            "trace label out of range"
        );
        Self { classes, traces }
    }

    /// Class count is one more than the largest label.
    pub fn from_traces(traces: Vec<T>) -> Self {
        let classes = traces.iter().map(|t| t.label() + 1).max().unwrap_or(0);
        Self { classes, traces }
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    pub fn per_class_counts(&self) -> BTreeMap<usize, usize> {
        let mut counts = BTreeMap::new();
        for t in &self.traces {
            *counts.entry(t.label()).or_insert(0) += 1;
        }
        counts
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.traces.iter()
    }
}

impl<T: Labeled + Clone> LabeledDataset<T> {
    /// The traces at `indices`, in that order, with the same class count.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            classes: self.classes,
            traces: indices.iter().map(|&i| self.traces[i].clone()).collect(),
        }
    }

    pub fn of_class(&self, class: usize) -> Vec<T> {
        self.traces
            .iter()
            .filter(|t| t.label() == class)
            .cloned()
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit<T> {
    pub adv_set: LabeledDataset<T>,
    pub detector_set: LabeledDataset<T>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub input: usize,
    pub removed_short: usize,
    pub removed_incoming_start: usize,
    pub retained: usize,
    pub empty_result: bool,
}

/// Drops traces shorter than `min_packets`, then traces starting incoming.
pub fn preprocess(
    raw: &LabeledDataset<PacketTrace>,
    min_packets: usize,
) -> (LabeledDataset<PacketTrace>, PreprocessReport) {
    let mut report = PreprocessReport {
        input: raw.len(),
        ..Default::default()
    };
    let mut kept = Vec::with_capacity(raw.len());
    for t in &raw.traces {
        if t.len() < min_packets {
            report.removed_short += 1;
        } else if !t.starts_outgoing() {
            report.removed_incoming_start += 1;
        } else {
            kept.push(t.clone());
        }
    }
    report.retained = kept.len();
    report.empty_result = kept.is_empty();
    (
        LabeledDataset {
            classes: raw.classes,
            traces: kept,
        },
        report,
    )
}

/// Seeded per-class indices, shuffled; classes in ascending order.
fn shuffled_class_indices<T: Labeled>(
    dataset: &LabeledDataset<T>,
    seed: u64,
) -> BTreeMap<usize, Vec<usize>> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, t) in dataset.traces.iter().enumerate() {
        by_class.entry(t.label()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for idx in by_class.values_mut() {
        idx.shuffle(&mut rng);
    }
    by_class
}

fn partition<T: Labeled + Clone>(
    dataset: &LabeledDataset<T>,
    by_class: &BTreeMap<usize, Vec<usize>>,
    first_count: impl Fn(usize) -> usize,
) -> (LabeledDataset<T>, LabeledDataset<T>) {
    let mut first = Vec::new();
    let mut second = Vec::new();
    for idx in by_class.values() {
        let cut = first_count(idx.len());
        first.extend(idx[..cut].iter().map(|&i| dataset.traces[i].clone()));
        second.extend(idx[cut..].iter().map(|&i| dataset.traces[i].clone()));
    }
    (
        LabeledDataset {
            classes: dataset.classes,
            traces: first,
        },
        LabeledDataset {
            classes: dataset.classes,
            traces: second,
        },
    )
}

fn check_class_sizes<T: Labeled>(
    dataset: &LabeledDataset<T>,
    needed: usize,
) -> Result<(), DatasetError> {
    for (&class, &count) in &dataset.per_class_counts() {
        if count < needed {
            return Err(DatasetError::ClassTooSmall {
                class,
                count,
                needed,
            });
        }
    }
    Ok(())
}

/// Per class, half of the shuffled instances go to the adversarial set and
/// the rest to the detector set (the adversarial set gets the odd one out).
pub fn split_half<T: Labeled + Clone>(
    dataset: &LabeledDataset<T>,
    seed: u64,
) -> Result<DatasetSplit<T>, DatasetError> {
    check_class_sizes(dataset, 2)?;
    let by_class = shuffled_class_indices(dataset, seed);
    let (adv_set, detector_set) = partition(dataset, &by_class, |n| n.div_ceil(2));
    Ok(DatasetSplit {
        adv_set,
        detector_set,
    })
}

/// Per-class k-fold partition of trace indices: returns `(train, test)` for
/// fold `fold` of `folds`, each ascending.
pub fn stratified_fold_indices<T: Labeled>(
    dataset: &LabeledDataset<T>,
    folds: usize,
    fold: usize,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), DatasetError> {
    assert!(folds >= 2 && fold < folds, "fold out of range");
    check_class_sizes(dataset, folds)?;
    let by_class = shuffled_class_indices(dataset, seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for idx in by_class.values() {
        let n = idx.len();
        let (lo, hi) = (fold * n / folds, (fold + 1) * n / folds);
        for (pos, &i) in idx.iter().enumerate() {
            if (lo..hi).contains(&pos) {
                test.push(i);
            } else {
                train.push(i);
            }
        }
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Per-class k-fold partition: returns `(train, test)` for fold `fold` of `folds`.
///
/// With `folds = 10` this is the 90/10 convention used for adversarial training.
pub fn stratified_fold<T: Labeled + Clone>(
    dataset: &LabeledDataset<T>,
    folds: usize,
    fold: usize,
    seed: u64,
) -> Result<(LabeledDataset<T>, LabeledDataset<T>), DatasetError> {
    let (train, test) = stratified_fold_indices(dataset, folds, fold, seed)?;
    Ok((dataset.subset(&train), dataset.subset(&test)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceFormat {
    Directions,
    Bursts,
}

fn parse_label(
    tok: Option<&str>,
    line: usize,
    classes: Option<usize>,
) -> Result<usize, DatasetError> {
    let tok = tok.ok_or_else(|| DatasetError::Parse {
        line,
        message: "missing label".into(),
    })?;
    let label: usize = tok.parse().map_err(|_| DatasetError::Parse {
        line,
        message: format!("invalid label {tok:?}"),
    })?;
    if let Some(classes) = classes {
        if label >= classes {
            return Err(DatasetError::LabelOutOfRange {
                line,
                label,
                classes,
            });
        }
    }
    Ok(label)
}

fn finish<T: Labeled>(traces: Vec<T>, classes: Option<usize>) -> LabeledDataset<T> {
    match classes {
        Some(classes) => LabeledDataset { classes, traces },
        None => LabeledDataset::from_traces(traces),
    }
}

/// Lines are numbered from 1. Blank lines are skipped.
pub fn parse_directions(
    text: &str,
    classes: Option<usize>,
) -> Result<LabeledDataset<PacketTrace>, DatasetError> {
    let mut traces = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let mut toks = raw.split_whitespace();
        let label = parse_label(toks.next(), line, classes)?;
        let dirs = toks
            .map(|tok| match tok {
                "1" => Ok(1i8),
                "-1" => Ok(-1i8),
                other => Err(DatasetError::Parse {
                    line,
                    message: format!("invalid direction {other:?}"),
                }),
            })
            .collect::<Result<Vec<_>, _>>()?;
        traces.push(PacketTrace::new(label, dirs).expect("directions validated"));
    }
    Ok(finish(traces, classes))
}

pub fn parse_bursts<S: Scalar>(
    text: &str,
    fixed_len: usize,
    classes: Option<usize>,
) -> Result<LabeledDataset<BurstTrace<S>>, DatasetError> {
    let mut traces = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let mut toks = raw.split_whitespace();
        let label = parse_label(toks.next(), line, classes)?;
        let values = toks
            .map(|tok| {
                tok.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite() && *v >= 0.0)
                    .map(S::of)
                    .ok_or_else(|| DatasetError::Parse {
                        line,
                        message: format!("invalid burst {tok:?}"),
                    })
            })
            .collect::<Result<Vec<S>, _>>()?;
        let trace = BurstTrace::from_values(label, &values, fixed_len).map_err(|e| {
            DatasetError::Parse {
                line,
                message: e.to_string(),
            }
        })?;
        traces.push(trace);
    }
    Ok(finish(traces, classes))
}

pub fn format_directions(dataset: &LabeledDataset<PacketTrace>) -> String {
    let mut out = String::new();
    for t in &dataset.traces {
        write!(out, "{}", t.label).unwrap();
        for d in t.directions() {
            write!(out, " {d}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn format_bursts<S: Scalar>(dataset: &LabeledDataset<BurstTrace<S>>) -> String {
    let mut out = String::new();
    for t in &dataset.traces {
        write!(out, "{}", t.label).unwrap();
        for v in &t.bursts()[..t.extent()] {
            write!(out, " {v}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn load_directions(
    path: impl AsRef<Path>,
    classes: Option<usize>,
) -> Result<LabeledDataset<PacketTrace>, DatasetError> {
    parse_directions(&fs::read_to_string(path)?, classes)
}

pub fn load_bursts<S: Scalar>(
    path: impl AsRef<Path>,
    fixed_len: usize,
    classes: Option<usize>,
) -> Result<LabeledDataset<BurstTrace<S>>, DatasetError> {
    parse_bursts(&fs::read_to_string(path)?, fixed_len, classes)
}

pub fn save_directions(
    dataset: &LabeledDataset<PacketTrace>,
    path: impl AsRef<Path>,
) -> Result<(), DatasetError> {
    Ok(fs::write(path, format_directions(dataset))?)
}

pub fn save_bursts<S: Scalar>(
    dataset: &LabeledDataset<BurstTrace<S>>,
    path: impl AsRef<Path>,
) -> Result<(), DatasetError> {
    Ok(fs::write(path, format_bursts(dataset))?)
}

/// Parametric family for prototype burst magnitudes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum MagnitudeDist {
    Uniform { low: f64, high: f64 },
    LogUniform { low: f64, high: f64 },
}

impl MagnitudeDist {
    pub fn bounds(&self) -> (f64, f64) {
        match *self {
            MagnitudeDist::Uniform { low, high } | MagnitudeDist::LogUniform { low, high } => {
                (low, high)
            }
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            MagnitudeDist::Uniform { low, high } => rng.gen_range(low..=high),
            MagnitudeDist::LogUniform { low, high } => rng.gen_range(low.ln()..=high.ln()).exp(),
        }
    }
}

/// Seeded prototype-plus-noise dataset description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub instances_per_class: usize,
    /// Inclusive range of prototype burst counts.
    pub burst_count_range: (usize, usize),
    pub magnitude: MagnitudeDist,
    /// Relative multiplicative noise bound applied per burst.
    pub noise: f64,
    /// Maximum number of bursts an instance drops or adds relative to its prototype.
    pub length_jitter: usize,
    pub fixed_len: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 20,
            instances_per_class: 40,
            burst_count_range: (20, 60),
            magnitude: MagnitudeDist::LogUniform {
                low: 1.0,
                high: 60.0,
            },
            noise: 0.25,
            length_jitter: 2,
            fixed_len: DEFAULT_BURST_LEN,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let (lo, hi) = self.burst_count_range;
        let (mlo, mhi) = self.magnitude.bounds();
        let problem = if lo < 1 || hi < lo {
            Some("burst_count_range must satisfy 1 <= min <= max")
        } else if self.instances_per_class < 2 {
            Some("instances_per_class must be at least 2")
        } else if self.classes < 1 {
            Some("classes must be at least 1")
        } else if !(mlo >= 1.0 && mhi >= mlo && mhi.is_finite()) {
            Some("magnitude bounds must satisfy 1 <= low <= high")
        } else if !(0.0..1.0).contains(&self.noise) {
            Some("noise must be in [0, 1)")
        } else if hi + self.length_jitter > self.fixed_len {
            Some("burst counts plus jitter exceed fixed_len")
        } else {
            None
        };
        problem.map_or(Ok(()), |p| Err(DatasetError::InvalidSpec(p.into())))
    }

    fn draw_prototype<R: Rng>(&self, rng: &mut R) -> (usize, Vec<f64>) {
        let (lo, hi) = self.burst_count_range;
        let len = rng.gen_range(lo..=hi);
        let values = (0..len + self.length_jitter)
            .map(|_| self.magnitude.sample(rng))
            .collect();
        (len, values)
    }

    fn draw_instance<R: Rng, S: Scalar>(
        &self,
        rng: &mut R,
        label: usize,
        proto_len: usize,
        proto: &[f64],
    ) -> BurstTrace<S> {
        let (lo, hi) = self.burst_count_range;
        let (mlo, mhi) = self.magnitude.bounds();
        let j = self.length_jitter as i64;
        let shift = if j > 0 { rng.gen_range(-j..=j) } else { 0 };
        let len = (proto_len as i64 + shift).clamp(
            lo.saturating_sub(self.length_jitter).max(1) as i64,
            (hi + self.length_jitter) as i64,
        ) as usize;
        let values: Vec<S> = proto[..len.min(proto.len())]
            .iter()
            .map(|&p| {
                let factor = 1.0 + rng.gen_range(-self.noise..=self.noise);
                S::of((p * factor).round().clamp(mlo.max(1.0), mhi))
            })
            .collect();
        BurstTrace::from_values(label, &values, self.fixed_len).expect("positive synthetic bursts")
    }
}

/// Closed-world synthetic dataset: `classes` prototypes, noisy instances of each.
pub fn generate_synthetic<S: Scalar>(
    spec: &SyntheticSpec,
) -> Result<LabeledDataset<BurstTrace<S>>, DatasetError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut traces = Vec::with_capacity(spec.classes * spec.instances_per_class);
    for class in 0..spec.classes {
        let (len, proto) = spec.draw_prototype(&mut rng);
        for _ in 0..spec.instances_per_class {
            traces.push(spec.draw_instance(&mut rng, class, len, &proto));
        }
    }
    Ok(LabeledDataset::new(spec.classes, traces))
}

/// Open-world (unmonitored) sites: one instance per site, each site with its
/// own prototype drawn from an rng stream independent of the closed world.
pub fn generate_open_world<S: Scalar>(
    spec: &SyntheticSpec,
    sites: usize,
) -> Result<LabeledDataset<BurstTrace<S>>, DatasetError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x6f70_656e_776f_726c);
    let traces = (0..sites)
        .map(|site| {
            let (len, proto) = spec.draw_prototype(&mut rng);
            spec.draw_instance(&mut rng, site, len, &proto)
        })
        .collect();
    Ok(LabeledDataset::new(sites, traces))
}
