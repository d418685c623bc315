//! Parametric surrogate for simulated pre-excited ECG windows.
//!
//! Every class owns a waveform made of a low, broad raised-cosine bump (the
//! slurred onset) followed by a taller, narrower bump (the main complex),
//! projected onto the leads through one row of a class×lead amplitude
//! matrix. Samples are shifted in time by a uniform integer jitter and
//! receive i.i.d. Gaussian noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::signal::{default_ventricles, EcgSignal, LabeledDataset, Ventricle};

/// Peak amplitude of the main complex before projection (mV).
pub const COMPLEX_PEAK: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub onset_start: usize,
    pub onset_width: usize,
    pub onset_amplitude: f64,
    pub complex_start: usize,
    pub complex_width: usize,
}

impl Template {
    /// Last time step (exclusive) touched by the template.
    pub fn end(&self) -> usize {
        (self.onset_start + self.onset_width).max(self.complex_start + self.complex_width)
    }

    /// Template value at (possibly fractional or out-of-window) time `t`.
    pub fn value(&self, t: f64) -> f64 {
        raised_cosine(t, self.onset_start as f64, self.onset_width as f64) * self.onset_amplitude
            + raised_cosine(t, self.complex_start as f64, self.complex_width as f64) * COMPLEX_PEAK
    }
}

fn raised_cosine(t: f64, start: f64, width: f64) -> f64 {
    if t < start || t > start + width {
        0.0
    } else {
        0.5 * (1.0 - (2.0 * std::f64::consts::PI * (t - start) / width).cos())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub samples_per_class: usize,
    pub class_count: usize,
    pub t: usize,
    pub l: usize,
    /// Standard deviation of the additive noise (mV).
    pub noise_std: f64,
    /// Shifts are drawn uniformly from `-jitter..=jitter` time steps.
    pub jitter: usize,
    pub seed: u64,
    /// Explicit C×L projection (row-major); generated from the seed when absent.
    pub projection: Option<Vec<f64>>,
    /// Explicit per-class templates; generated from the seed when absent.
    pub templates: Option<Vec<Template>>,
    /// When set, projection columns of all other leads are zeroed.
    pub active_leads: Option<Vec<usize>>,
    /// Whether leads outside `active_leads` receive noise.
    pub noise_on_inactive: bool,
    /// Minimum Euclidean distance between generated projection rows.
    pub min_row_distance: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            samples_per_class: 100,
            class_count: 24,
            t: 200,
            l: 12,
            noise_std: 0.05 * COMPLEX_PEAK,
            jitter: 10,
            seed: 0,
            projection: None,
            templates: None,
            active_leads: None,
            noise_on_inactive: true,
            min_row_distance: 1.0,
        }
    }
}

/// Class-level structure shared by every sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassStructure {
    pub projection: Vec<f64>,
    pub templates: Vec<Template>,
    pub ventricles: Vec<Ventricle>,
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_class == 0 {
            return Err(Error::InvalidConfig("samples_per_class must be at least 1".into()));
        }
        if self.class_count == 0 || self.t == 0 || self.l == 0 {
            return Err(Error::InvalidConfig("class_count, t and l must be positive".into()));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::InvalidConfig(format!("noise_std must be ≥ 0, got {}", self.noise_std)));
        }
        if let Some(p) = &self.projection {
            if p.len() != self.class_count * self.l {
                return Err(Error::InvalidConfig(format!(
                    "projection has {} entries, expected {}x{}",
                    p.len(),
                    self.class_count,
                    self.l
                )));
            }
        }
        if let Some(tp) = &self.templates {
            if tp.len() != self.class_count {
                return Err(Error::InvalidConfig(format!(
                    "{} templates for {} classes",
                    tp.len(),
                    self.class_count
                )));
            }
        }
        if let Some(a) = &self.active_leads {
            if a.is_empty() || a.iter().any(|&l| l >= self.l) {
                return Err(Error::InvalidConfig(format!("active leads {a:?} outside 0..{}", self.l)));
            }
        }
        Ok(())
    }
}

fn random_template(rng: &mut ChaCha8Rng, t: usize) -> Template {
    // positions scale with the window so short test windows stay valid
    let scale = t as f64 / 200.0;
    let at = |x: f64| ((x * scale).round() as usize).max(1);
    let onset_start = at(rng.random_range(55.0..95.0));
    let onset_width = at(rng.random_range(18.0..36.0));
    let complex_start = onset_start + (onset_width as f64 * rng.random_range(0.5..0.8)).round() as usize;
    Template {
        onset_start,
        onset_width,
        onset_amplitude: rng.random_range(0.2..0.45),
        complex_start,
        complex_width: at(rng.random_range(14.0..32.0)),
    }
}

fn random_projection(rng: &mut ChaCha8Rng, cfg: &GeneratorConfig, ventricles: &[Ventricle]) -> Result<Vec<f64>> {
    let l = cfg.l;
    let base = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..l)
            .map(|_| {
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                sign * rng.random_range(0.5..1.5)
            })
            .collect()
    };
    let left = base(rng);
    let right = base(rng);
    let perturb = Normal::new(0.0, 0.6).expect("valid normal");
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(cfg.class_count);
    for v in ventricles {
        let shared = if *v == Ventricle::Left { &left } else { &right };
        let mut tries = 0;
        loop {
            let row: Vec<f64> = shared.iter().map(|b| b + perturb.sample(rng)).collect();
            let ok = rows.iter().all(|r| {
                r.iter().zip(&row).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() >= cfg.min_row_distance
            });
            if ok {
                rows.push(row);
                break;
            }
            tries += 1;
            if tries > 10_000 {
                return Err(Error::InvalidConfig(format!(
                    "could not draw {} projection rows {} apart",
                    cfg.class_count, cfg.min_row_distance
                )));
            }
        }
    }
    Ok(rows.concat())
}

/// Projection, templates and ventricle grouping implied by a config.
pub fn class_structure(cfg: &GeneratorConfig) -> Result<ClassStructure> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ventricles = default_ventricles(cfg.class_count);
    let templates = match &cfg.templates {
        Some(t) => t.clone(),
        None => (0..cfg.class_count).map(|_| random_template(&mut rng, cfg.t)).collect(),
    };
    let mut projection = match &cfg.projection {
        Some(p) => p.clone(),
        None => random_projection(&mut rng, cfg, &ventricles)?,
    };
    if let Some(active) = &cfg.active_leads {
        for c in 0..cfg.class_count {
            for l in 0..cfg.l {
                if !active.contains(&l) {
                    projection[c * cfg.l + l] = 0.0;
                }
            }
        }
    }
    for (c, tp) in templates.iter().enumerate() {
        let first = tp.onset_start.min(tp.complex_start);
        if first < cfg.jitter || tp.end() + cfg.jitter > cfg.t {
            return Err(Error::InvalidConfig(format!(
                "class {c}: template spans {first}..{} and jitter ±{} leaves the {}-step window",
                tp.end(),
                cfg.jitter,
                cfg.t
            )));
        }
    }
    Ok(ClassStructure {
        projection,
        templates,
        ventricles,
    })
}

/// Random stream for one sample, independent of generation order.
fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Time shift applied to sample `index` (same stream as [`generate_dataset`]).
pub fn sample_shift(cfg: &GeneratorConfig, index: usize) -> i64 {
    let mut rng = sample_rng(cfg.seed, index);
    draw_shift(&mut rng, cfg.jitter)
}

fn draw_shift(rng: &mut ChaCha8Rng, jitter: usize) -> i64 {
    let j = jitter as i64;
    rng.random_range(-j..=j)
}

/// Noise-free, unshifted signal of a class.
pub fn class_template(structure: &ClassStructure, cfg: &GeneratorConfig, class: usize) -> Vec<f32> {
    render(structure, cfg, class, 0, None)
}

fn render(
    structure: &ClassStructure,
    cfg: &GeneratorConfig,
    class: usize,
    shift: i64,
    mut noise: Option<(&mut ChaCha8Rng, Normal<f64>)>,
) -> Vec<f32> {
    let (t_len, l) = (cfg.t, cfg.l);
    let tp = &structure.templates[class];
    let row = &structure.projection[class * l..(class + 1) * l];
    let mut out = Vec::with_capacity(t_len * l);
    for t in 0..t_len {
        let base = tp.value(t as f64 - shift as f64);
        for (lead, &p) in row.iter().enumerate() {
            let mut v = base * p;
            if let Some((rng, dist)) = noise.as_mut() {
                let active = cfg.active_leads.as_ref().is_none_or(|a| a.contains(&lead));
                if active || cfg.noise_on_inactive {
                    v += dist.sample(*rng);
                }
            }
            out.push(v as f32);
        }
    }
    out
}

/// Generate `class_count · samples_per_class` labelled signals, ordered by
/// class then sample.
pub fn generate_dataset(cfg: &GeneratorConfig) -> Result<LabeledDataset> {
    let structure = class_structure(cfg)?;
    let normal = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let n = cfg.class_count * cfg.samples_per_class;
    let mut signals = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for index in 0..n {
        let class = index / cfg.samples_per_class;
        let mut rng = sample_rng(cfg.seed, index);
        let shift = draw_shift(&mut rng, cfg.jitter);
        let noise = (cfg.noise_std > 0.0).then_some((&mut rng, normal));
        let values = render(&structure, cfg, class, shift, noise);
        signals.push(EcgSignal::new(cfg.t, cfg.l, values)?);
        labels.push(class);
    }
    LabeledDataset::with_ventricles(cfg.t, cfg.l, cfg.class_count, signals, labels, structure.ventricles)
}
