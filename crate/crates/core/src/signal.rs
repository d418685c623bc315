//! Signal and dataset data model: multivariate ECG windows, labelled
//! collections, the three input layouts fed to the networks, and
//! class-stratified splitting.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Default number of time steps per window.
pub const DEFAULT_T: usize = 200;
/// Default number of leads.
pub const DEFAULT_L: usize = 12;
/// Default number of pathway regions.
pub const DEFAULT_C: usize = 24;

/// Conventional 12-lead ordering.
pub const LEAD_NAMES: [&str; 12] = [
    "I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6",
];

/// Lead names for `l` leads: the standard names when `l == 12`, otherwise `L1..Ll`.
pub fn default_lead_names(l: usize) -> Vec<String> {
    if l == LEAD_NAMES.len() {
        LEAD_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        (1..=l).map(|i| format!("L{i}")).collect()
    }
}

/// One T×L window of lead voltages (millivolts), stored time-major:
/// `values[t * L + l]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EcgSignal {
    t: usize,
    l: usize,
    values: Vec<f32>,
    lead_names: Vec<String>,
}

impl EcgSignal {
    pub fn new(t: usize, l: usize, values: Vec<f32>) -> Result<Self> {
        Self::with_leads(t, l, values, default_lead_names(l))
    }

    pub fn with_leads(t: usize, l: usize, values: Vec<f32>, lead_names: Vec<String>) -> Result<Self> {
        if t == 0 || l == 0 {
            return Err(Error::InvalidSignal(format!("empty shape {t}x{l}")));
        }
        if values.len() != t * l {
            return Err(Error::InvalidSignal(format!(
                "{} values for shape {t}x{l}",
                values.len()
            )));
        }
        if lead_names.len() != l {
            return Err(Error::InvalidSignal(format!(
                "{} lead names for {l} leads",
                lead_names.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidSignal(format!(
                "non-finite value at t={}, lead={}",
                i / l,
                i % l
            )));
        }
        Ok(Self {
            t,
            l,
            values,
            lead_names,
        })
    }

    pub fn time_steps(&self) -> usize {
        self.t
    }

    pub fn leads(&self) -> usize {
        self.l
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn lead_names(&self) -> &[String] {
        &self.lead_names
    }

    #[inline]
    pub fn at(&self, t: usize, l: usize) -> f32 {
        self.values[t * self.l + l]
    }

    /// Values of one time step across all leads.
    pub fn row(&self, t: usize) -> &[f32] {
        &self.values[t * self.l..(t + 1) * self.l]
    }

    /// Samples of one lead over time.
    pub fn lead(&self, l: usize) -> Vec<f32> {
        (0..self.t).map(|t| self.at(t, l)).collect()
    }

    pub fn reshape(&self, layout: Layout) -> ReshapedInput {
        reshape(self, layout)
    }
}

/// The way a signal is presented to a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Layout {
    /// All leads concatenated end to end into one sequence of length T·L.
    Stacked,
    /// L channels of length T.
    MultiChannel,
    /// A single-channel T×L image.
    Image,
}

impl std::fmt::Display for Layout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Layout::Stacked => "stacked",
            Layout::MultiChannel => "multichannel",
            Layout::Image => "image",
        };
        f.write_str(s)
    }
}

/// A signal rearranged for one layout.
///
/// * `Stacked`: length T·L, lead-major (lead 0's T samples, then lead 1's, ...).
/// * `MultiChannel`: T×L matrix, time-major.
/// * `Image`: T×L×1 tensor, time-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ReshapedInput {
    pub layout: Layout,
    pub t: usize,
    pub l: usize,
    pub data: Vec<f32>,
}

impl ReshapedInput {
    pub fn dims(&self) -> Vec<usize> {
        layout_dims(self.layout, self.t, self.l)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Tensor dimensions of a layout for a T×L signal.
pub fn layout_dims(layout: Layout, t: usize, l: usize) -> Vec<usize> {
    match layout {
        Layout::Stacked => vec![t * l],
        Layout::MultiChannel => vec![t, l],
        Layout::Image => vec![t, l, 1],
    }
}

pub fn reshape(signal: &EcgSignal, layout: Layout) -> ReshapedInput {
    let (t, l) = (signal.t, signal.l);
    let data = match layout {
        Layout::Stacked => {
            let mut out = Vec::with_capacity(t * l);
            for lead in 0..l {
                out.extend((0..t).map(|ti| signal.at(ti, lead)));
            }
            out
        }
        Layout::MultiChannel | Layout::Image => signal.values.clone(),
    };
    ReshapedInput { layout, t, l, data }
}

/// Inverse of [`reshape`].
pub fn unreshape(input: &ReshapedInput) -> Result<EcgSignal> {
    let (t, l) = (input.t, input.l);
    if input.data.len() != t * l {
        return Err(Error::ShapeMismatch(format!(
            "{} elements for {t}x{l}",
            input.data.len()
        )));
    }
    let values = match input.layout {
        Layout::Stacked => {
            let mut v = vec![0.0f32; t * l];
            for lead in 0..l {
                for ti in 0..t {
                    v[ti * l + lead] = input.data[lead * t + ti];
                }
            }
            v
        }
        Layout::MultiChannel | Layout::Image => input.data.clone(),
    };
    EcgSignal::new(t, l, values)
}

/// Which ventricle a region belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Ventricle {
    Left,
    Right,
}

impl Ventricle {
    pub fn short(self) -> &'static str {
        match self {
            Ventricle::Left => "LV",
            Ventricle::Right => "RV",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "LV" | "L" => Some(Ventricle::Left),
            "RV" | "R" => Some(Ventricle::Right),
            _ => None,
        }
    }
}

/// Default class→ventricle map: the first half of the classes are left
/// ventricular, the rest right.
pub fn default_ventricles(class_count: usize) -> Vec<Ventricle> {
    (0..class_count)
        .map(|c| {
            if c < class_count.div_ceil(2) {
                Ventricle::Left
            } else {
                Ventricle::Right
            }
        })
        .collect()
}

/// Labelled signals sharing one T×L shape.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    t: usize,
    l: usize,
    class_count: usize,
    signals: Vec<EcgSignal>,
    labels: Vec<usize>,
    ventricles: Vec<Ventricle>,
}

impl LabeledDataset {
    pub fn new(
        t: usize,
        l: usize,
        class_count: usize,
        signals: Vec<EcgSignal>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        Self::with_ventricles(t, l, class_count, signals, labels, default_ventricles(class_count))
    }

    pub fn with_ventricles(
        t: usize,
        l: usize,
        class_count: usize,
        signals: Vec<EcgSignal>,
        labels: Vec<usize>,
        ventricles: Vec<Ventricle>,
    ) -> Result<Self> {
        if t == 0 || l == 0 || class_count == 0 {
            return Err(Error::InvalidDataset(format!(
                "degenerate shape T={t}, L={l}, C={class_count}"
            )));
        }
        if signals.len() != labels.len() {
            return Err(Error::InvalidDataset(format!(
                "{} signals but {} labels",
                signals.len(),
                labels.len()
            )));
        }
        if ventricles.len() != class_count {
            return Err(Error::InvalidDataset(format!(
                "ventricle map has {} entries for {class_count} classes",
                ventricles.len()
            )));
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= class_count) {
            return Err(Error::InvalidDataset(format!(
                "label {y} of sample {i} outside 0..{class_count}"
            )));
        }
        if let Some(i) = signals.iter().position(|s| s.t != t || s.l != l) {
            return Err(Error::InvalidDataset(format!(
                "sample {i} has shape {}x{}, expected {t}x{l}",
                signals[i].t, signals[i].l
            )));
        }
        Ok(Self {
            t,
            l,
            class_count,
            signals,
            labels,
            ventricles,
        })
    }

    pub fn len(&self) -> usize {
        self.signals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signals.is_empty()
    }

    pub fn time_steps(&self) -> usize {
        self.t
    }

    pub fn leads(&self) -> usize {
        self.l
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn signals(&self) -> &[EcgSignal] {
        &self.signals
    }

    pub fn signal(&self, i: usize) -> &EcgSignal {
        &self.signals[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn ventricles(&self) -> &[Ventricle] {
        &self.ventricles
    }

    pub fn ventricle_of(&self, class: usize) -> Ventricle {
        self.ventricles[class]
    }

    pub fn lead_names(&self) -> Vec<String> {
        self.signals
            .first()
            .map(|s| s.lead_names.clone())
            .unwrap_or_else(|| default_lead_names(self.l))
    }

    /// Indices of the samples of each class.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.class_count];
        for (i, &y) in self.labels.iter().enumerate() {
            out[y].push(i);
        }
        out
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.class_indices().iter().map(Vec::len).collect()
    }
}

/// Disjoint train/validation/test index lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Split ratios; must be positive and sum to one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.75,
            val: 0.15,
            test: 0.10,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let r = [self.train, self.val, self.test];
        if r.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
            return Err(Error::InvalidConfig(format!("split ratios must be positive: {r:?}")));
        }
        let sum: f64 = r.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("split ratios sum to {sum}, expected 1")));
        }
        Ok(())
    }
}

/// Largest-remainder allocation of `n` items over the three ratios.
/// Ties in the remainder go to train first, then val, then test.
pub fn allocate_counts(n: usize, ratios: SplitRatios) -> [usize; 3] {
    let r = [ratios.train, ratios.val, ratios.test];
    let exact: Vec<f64> = r.iter().map(|x| x * n as f64).collect();
    let mut counts: [usize; 3] = [0; 3];
    for i in 0..3 {
        counts[i] = exact[i].floor() as usize;
    }
    let assigned: usize = counts.iter().sum();
    let mut order = [0usize, 1, 2];
    // stable sort keeps train ahead on equal remainders
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal)
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Class-stratified split; every class is shuffled with a seeded generator
/// and cut according to [`allocate_counts`].
pub fn stratified_split(dataset: &LabeledDataset, ratios: SplitRatios, seed: u64) -> Result<SplitIndices> {
    ratios.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = SplitIndices {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (class, mut idx) in dataset.class_indices().into_iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 3 {
            return Err(Error::ClassTooSmall {
                class,
                count: idx.len(),
                parts: 3,
            });
        }
        idx.shuffle(&mut rng);
        let [n_train, n_val, _] = allocate_counts(idx.len(), ratios);
        split.train.extend_from_slice(&idx[..n_train]);
        split.val.extend_from_slice(&idx[n_train..n_train + n_val]);
        split.test.extend_from_slice(&idx[n_train + n_val..]);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy(n_per_class: usize, classes: usize) -> LabeledDataset {
        let mut signals = Vec::new();
        let mut labels = Vec::new();
        for c in 0..classes {
            for i in 0..n_per_class {
                signals.push(EcgSignal::new(2, 1, vec![c as f32, i as f32]).unwrap());
                labels.push(c);
            }
        }
        LabeledDataset::new(2, 1, classes, signals, labels).unwrap()
    }

    #[test]
    fn stacked_default_length() {
        let s = EcgSignal::new(200, 12, vec![0.5; 2400]).unwrap();
        assert_eq!(s.reshape(Layout::Stacked).len(), 2400);
        assert_eq!(s.reshape(Layout::Image).dims(), vec![200, 12, 1]);
    }

    #[test]
    fn stacked_is_lead_major() {
        // [[a,b],[c,d]] with rows = time
        let s = EcgSignal::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.reshape(Layout::Stacked).data, vec![1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn rejects_non_finite() {
        assert!(EcgSignal::new(1, 2, vec![0.0, f32::NAN]).is_err());
        assert!(EcgSignal::new(0, 2, vec![]).is_err());
    }

    #[test]
    fn exact_divisible_split() {
        let ds = toy(100, 3);
        let split = stratified_split(&ds, SplitRatios::default(), 1).unwrap();
        for c in 0..3 {
            let count = |v: &[usize]| v.iter().filter(|&&i| ds.label(i) == c).count();
            assert_eq!(count(&split.train), 75);
            assert_eq!(count(&split.val), 15);
            assert_eq!(count(&split.test), 10);
        }
    }

    #[test]
    fn split_is_deterministic() {
        let ds = toy(17, 4);
        let a = stratified_split(&ds, SplitRatios::default(), 9).unwrap();
        let b = stratified_split(&ds, SplitRatios::default(), 9).unwrap();
        assert_eq!(a, b);
        let c = stratified_split(&ds, SplitRatios::default(), 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn split_partitions_all_indices() {
        let ds = toy(40, 24);
        let s = stratified_split(&ds, SplitRatios::default(), 3).unwrap();
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        assert_eq!(all.len(), 960);
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 960);
    }

    #[test]
    fn too_small_class_is_named() {
        let mut signals = Vec::new();
        let mut labels = Vec::new();
        for (c, n) in [(0usize, 5usize), (1, 2)] {
            for _ in 0..n {
                signals.push(EcgSignal::new(1, 1, vec![0.0]).unwrap());
                labels.push(c);
            }
        }
        let ds = LabeledDataset::new(1, 1, 2, signals, labels).unwrap();
        match stratified_split(&ds, SplitRatios::default(), 0) {
            Err(Error::ClassTooSmall { class: 1, count: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn largest_remainder_goes_to_train_first() {
        assert_eq!(allocate_counts(100, SplitRatios::default()), [75, 15, 10]);
        assert_eq!(allocate_counts(3, SplitRatios::default()), [2, 1, 0]);
        let even = SplitRatios { train: 0.5, val: 0.25, test: 0.25 };
        assert_eq!(allocate_counts(2, even), [1, 1, 0]);
        assert_eq!(allocate_counts(1, SplitRatios { train: 1.0 / 3.0, val: 1.0 / 3.0, test: 1.0 / 3.0 }), [1, 0, 0]);
    }

    proptest! {
        #[test]
        fn reshape_roundtrip(t in 1usize..12, l in 1usize..6, seed in any::<u64>()) {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let values: Vec<f32> = (0..t * l).map(|_| rng.random_range(-5.0..5.0)).collect();
            let s = EcgSignal::new(t, l, values).unwrap();
            for layout in [Layout::Stacked, Layout::MultiChannel, Layout::Image] {
                let r = s.reshape(layout);
                prop_assert_eq!(r.len(), t * l);
                prop_assert_eq!(unreshape(&r).unwrap(), s.clone());
            }
        }

        #[test]
        fn split_fraction_within_one_sample(sizes in proptest::collection::vec(3usize..60, 1..6), seed in any::<u64>()) {
            let mut signals = Vec::new();
            let mut labels = Vec::new();
            for (c, &n) in sizes.iter().enumerate() {
                for _ in 0..n {
                    signals.push(EcgSignal::new(1, 1, vec![0.0]).unwrap());
                    labels.push(c);
                }
            }
            let ds = LabeledDataset::new(1, 1, sizes.len(), signals, labels).unwrap();
            let ratios = SplitRatios::default();
            let split = stratified_split(&ds, ratios, seed).unwrap();
            for (c, &n) in sizes.iter().enumerate() {
                let nc = n as f64;
                for (part, r) in [(&split.train, ratios.train), (&split.val, ratios.val), (&split.test, ratios.test)] {
                    let k = part.iter().filter(|&&i| ds.label(i) == c).count() as f64;
                    prop_assert!((k / nc - r).abs() <= 1.0 / nc + 1e-12);
                }
            }
        }
    }
}
