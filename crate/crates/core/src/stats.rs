//! Lead importance, ventricle aggregation, Fisher's exact test and the
//! region remapping used to compare against decision-tree algorithms.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::signal::Ventricle;

/// Significance level of the classifier comparison.
pub const ALPHA: f64 = 0.05;

/// Absolute saliency of one correctly classified sample as a time-major T×L table.
#[derive(Debug, Clone, Copy)]
pub struct SampleSaliency<'a> {
    pub table: &'a [f64],
    pub label: usize,
    pub predicted: usize,
}

/// Per-class share of absolute saliency carried by each lead.
#[derive(Debug, Clone, PartialEq)]
pub struct LeadImportanceMatrix {
    pub leads: usize,
    /// Σ over samples and time of |M| per lead, per class.
    pub mass: Vec<Vec<f64>>,
    /// Samples contributing to each class.
    pub counts: Vec<usize>,
}

impl LeadImportanceMatrix {
    pub fn class_count(&self) -> usize {
        self.mass.len()
    }

    /// Normalized row of a class; `None` when no sample contributed or the
    /// total mass is zero.
    pub fn row(&self, class: usize) -> Option<Vec<f64>> {
        normalized(&self.mass[class]).filter(|_| self.counts[class] > 0)
    }

    pub fn write_csv(&self, path: &Path, lead_names: &[String], ventricles: &[VentricleRanking]) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "row,samples,{}", lead_names.join(","))?;
        let cells = |row: Option<Vec<f64>>| match row {
            Some(r) => r.iter().map(|v| format!("{v:.9}")).collect::<Vec<_>>().join(","),
            None => vec!["NA"; self.leads].join(","),
        };
        for c in 0..self.class_count() {
            writeln!(f, "{c},{},{}", self.counts[c], cells(self.row(c)))?;
        }
        for v in ventricles {
            writeln!(f, "{},{},{}", v.ventricle.short(), v.samples, cells(Some(v.row.clone())))?;
        }
        f.flush()?;
        Ok(())
    }
}

fn normalized(mass: &[f64]) -> Option<Vec<f64>> {
    let total: f64 = mass.iter().sum();
    (total > 0.0).then(|| mass.iter().map(|m| m / total).collect())
}

/// Accumulate lead importance from saliency maps of correctly classified samples.
pub fn lead_importance(
    samples: &[SampleSaliency<'_>],
    class_count: usize,
    t: usize,
    l: usize,
) -> Result<LeadImportanceMatrix> {
    let mut mass = vec![vec![0.0; l]; class_count];
    let mut counts = vec![0; class_count];
    for (i, s) in samples.iter().enumerate() {
        if s.table.len() != t * l {
            return Err(Error::ShapeMismatch(format!(
                "saliency map {i} has {} values, expected {t}x{l}",
                s.table.len()
            )));
        }
        if s.label >= class_count {
            return Err(Error::ClassOutOfRange {
                class: s.label,
                class_count,
            });
        }
        if s.predicted != s.label {
            return Err(Error::Misclassified {
                sample: i,
                label: s.label,
                predicted: s.predicted,
            });
        }
        for row in s.table.chunks(l) {
            for (m, v) in mass[s.label].iter_mut().zip(row) {
                *m += v.abs();
            }
        }
        counts[s.label] += 1;
    }
    Ok(LeadImportanceMatrix { leads: l, mass, counts })
}

#[derive(Debug, Clone, PartialEq)]
pub struct VentricleRanking {
    pub ventricle: Ventricle,
    pub classes: Vec<usize>,
    pub samples: usize,
    /// Pooled importance per lead.
    pub row: Vec<f64>,
    /// Leads from most to least important (lower index first on ties).
    pub ranking: Vec<usize>,
    /// Rank of each lead, 0 = most important.
    pub rank_of_lead: Vec<usize>,
}

/// Pool the per-lead mass of every class in a ventricle before normalizing.
/// Ventricles without any contributing class are left out.
pub fn ventricle_rank(li: &LeadImportanceMatrix, ventricle_of_class: &[Ventricle]) -> Result<Vec<VentricleRanking>> {
    if ventricle_of_class.len() != li.class_count() {
        return Err(Error::ShapeMismatch(format!(
            "{} ventricle labels for {} classes",
            ventricle_of_class.len(),
            li.class_count()
        )));
    }
    let ranked: Vec<VentricleRanking> = [Ventricle::Left, Ventricle::Right]
        .into_iter()
        .filter_map(|v| {
            let classes: Vec<usize> = (0..li.class_count())
                .filter(|&c| ventricle_of_class[c] == v && li.row(c).is_some())
                .collect();
            let mut pooled = vec![0.0; li.leads];
            for &c in &classes {
                for (p, m) in pooled.iter_mut().zip(&li.mass[c]) {
                    *p += m;
                }
            }
            let row = normalized(&pooled)?;
            let mut ranking: Vec<usize> = (0..li.leads).collect();
            ranking.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            let mut rank_of_lead = vec![0; li.leads];
            for (r, &lead) in ranking.iter().enumerate() {
                rank_of_lead[lead] = r;
            }
            Some(VentricleRanking {
                ventricle: v,
                samples: classes.iter().map(|&c| li.counts[c]).sum(),
                classes,
                row,
                ranking,
                rank_of_lead,
            })
        })
        .collect();
    if ranked.is_empty() {
        return Err(Error::EmptyGroup("no class of either ventricle has saliency".into()));
    }
    Ok(ranked)
}

/// Rows are methods, columns are (correct, incorrect).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContingencyTable {
    pub a: u64,
    pub b: u64,
    pub c: u64,
    pub d: u64,
}

impl ContingencyTable {
    pub fn new(a: u64, b: u64, c: u64, d: u64) -> Self {
        Self { a, b, c, d }
    }

    pub fn total(&self) -> u64 {
        self.a + self.b + self.c + self.d
    }
}

fn ln_factorials(n: u64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n as usize + 1);
    out.push(0.0);
    let mut acc = 0.0;
    for k in 1..=n {
        acc += (k as f64).ln();
        out.push(acc);
    }
    out
}

/// One-sided Fisher exact test: P(X ≥ a) for the top-left cell under the
/// hypergeometric distribution with the table's margins.
pub fn fisher_one_sided(t: ContingencyTable) -> f64 {
    let n = t.total();
    if n == 0 {
        return 1.0;
    }
    let row1 = t.a + t.b;
    let col1 = t.a + t.c;
    let lf = ln_factorials(n);
    let ln_choose = |n: u64, k: u64| lf[n as usize] - lf[k as usize] - lf[(n - k) as usize];
    let lo = (row1 + col1).saturating_sub(n);
    let hi = row1.min(col1);
    let ln_total = ln_choose(n, row1);
    let terms: Vec<f64> = (t.a.max(lo)..=hi)
        .map(|x| ln_choose(col1, x) + ln_choose(n - col1, row1 - x) - ln_total)
        .collect();
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return 0.0;
    }
    let p = max.exp() * terms.iter().map(|x| (x - max).exp()).sum::<f64>();
    p.min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    EasyWpw,
    Arruda,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::EasyWpw => "easy-wpw",
            Scheme::Arruda => "arruda",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "easy-wpw" | "easywpw" => Ok(Scheme::EasyWpw),
            "arruda" => Ok(Scheme::Arruda),
            _ => Err(Error::UnknownScheme(s.to_string())),
        }
    }

    /// Region names with the dataset classes each covers.
    pub fn table(self) -> &'static [(&'static str, &'static [usize])] {
        match self {
            Scheme::EasyWpw => EASY_WPW,
            Scheme::Arruda => ARRUDA,
        }
    }

    pub fn regions(self) -> Vec<&'static str> {
        self.table().iter().map(|(r, _)| *r).collect()
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

const EASY_WPW: &[(&str, &[usize])] = &[
    ("MV-AL", &[3, 9, 4, 10, 5, 11]),
    ("MV-PL", &[0, 6, 1, 7, 5, 11]),
    ("MV-PS", &[1, 7, 2, 8]),
    ("TV-AL", &[13, 19, 14, 20, 15, 21, 16, 22, 17, 23]),
    ("TV-PL", &[12, 18, 13, 19]),
    ("TV-PS", &[12, 18, 1, 7, 2, 8]),
    ("TV-AS", &[17, 23, 2, 8, 3, 9, 4, 10]),
];

const ARRUDA: &[(&str, &[usize])] = &[
    ("LAL", &[4, 10, 5, 11]),
    ("LL", &[0, 6, 5, 11]),
    ("LP", &[1, 7, 0, 6]),
    ("LPL", &[0, 6]),
    ("PSMA", &[1, 7, 2, 8]),
    ("PSTA", &[12, 18, 1, 7, 2, 8]),
    ("MSTA", &[2, 8]),
    ("AS", &[2, 8, 3, 9]),
    ("RA", &[3, 9, 4, 10, 16, 22, 17, 23]),
    ("RP", &[12, 18]),
    ("RPL", &[12, 18, 13, 19]),
    ("RL", &[13, 19, 14, 20]),
    ("RAL", &[14, 20, 15, 21, 16, 22]),
];

/// Scheme regions whose table row lists `class`.
pub fn remap_region(class: usize, scheme: Scheme) -> Result<BTreeSet<&'static str>> {
    if class >= 24 {
        return Err(Error::ClassOutOfRange { class, class_count: 24 });
    }
    Ok(scheme
        .table()
        .iter()
        .filter(|(_, classes)| classes.contains(&class))
        .map(|(r, _)| *r)
        .collect())
}

/// A method's answer for one sample: a dataset class or a scheme region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Prediction {
    Class(usize),
    Region(String),
}

impl Prediction {
    pub fn label(&self) -> String {
        match self {
            Prediction::Class(c) => c.to_string(),
            Prediction::Region(r) => r.clone(),
        }
    }
}

/// Whether a prediction agrees with the sample's true class under a scheme:
/// a region must be among the true class's regions; a class must share at
/// least one region with it.
pub fn is_correct(pred: &Prediction, truth: &BTreeSet<&str>, scheme: Scheme) -> Result<bool> {
    match pred {
        Prediction::Region(r) => {
            if !scheme.regions().contains(&r.as_str()) {
                return Err(Error::SchemeMismatch(format!("region {r} is not part of the {scheme} scheme")));
            }
            Ok(truth.contains(r.as_str()))
        }
        Prediction::Class(c) => Ok(remap_region(*c, scheme)?.iter().any(|r| truth.contains(r))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub scheme: Scheme,
    pub correct_a: Vec<bool>,
    pub correct_b: Vec<bool>,
    pub table: ContingencyTable,
    pub p_value: f64,
}

impl Comparison {
    pub fn accuracy_a(&self) -> f64 {
        self.table.a as f64 / (self.table.a + self.table.b).max(1) as f64
    }

    pub fn accuracy_b(&self) -> f64 {
        self.table.c as f64 / (self.table.c + self.table.d).max(1) as f64
    }

    pub fn significant(&self) -> bool {
        self.p_value < ALPHA
    }
}

/// Compare method A against method B on the same samples.
pub fn dt_comparison(
    truth_classes: &[usize],
    method_a: &[Prediction],
    method_b: &[Prediction],
    scheme: Scheme,
) -> Result<Comparison> {
    let n = truth_classes.len();
    if method_a.len() != n || method_b.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{n} samples but {} and {} predictions",
            method_a.len(),
            method_b.len()
        )));
    }
    let mut correct_a = Vec::with_capacity(n);
    let mut correct_b = Vec::with_capacity(n);
    for (i, &t) in truth_classes.iter().enumerate() {
        let truth = remap_region(t, scheme)?;
        correct_a.push(is_correct(&method_a[i], &truth, scheme)?);
        correct_b.push(is_correct(&method_b[i], &truth, scheme)?);
    }
    let ka = correct_a.iter().filter(|&&c| c).count() as u64;
    let kb = correct_b.iter().filter(|&&c| c).count() as u64;
    let table = ContingencyTable::new(ka, n as u64 - ka, kb, n as u64 - kb);
    Ok(Comparison {
        scheme,
        correct_a,
        correct_b,
        table,
        p_value: fisher_one_sided(table),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_mass_and_uniform_rows() {
        let mut table = vec![0.0; 5 * 12];
        table[2 * 12 + 7] = 3.0;
        let li = lead_importance(&[SampleSaliency { table: &table, label: 1, predicted: 1 }], 2, 5, 12).unwrap();
        let row = li.row(1).unwrap();
        assert_eq!(row[7], 1.0);
        assert_eq!(row.iter().sum::<f64>(), 1.0);
        assert!(li.row(0).is_none());

        let flat = vec![0.5; 5 * 12];
        let li = lead_importance(&[SampleSaliency { table: &flat, label: 0, predicted: 0 }], 1, 5, 12).unwrap();
        assert!(li.row(0).unwrap().iter().all(|&v| (v - 1.0 / 12.0).abs() < 1e-15));
    }

    #[test]
    fn two_sample_hand_row() {
        let mut s1 = vec![0.0; 12];
        s1[0] = 1.0;
        s1[1] = 1.0;
        let mut s2 = vec![0.0; 12];
        s2[0] = 3.0;
        s2[1] = 1.0;
        let samples = [
            SampleSaliency { table: &s1, label: 0, predicted: 0 },
            SampleSaliency { table: &s2, label: 0, predicted: 0 },
        ];
        let row = lead_importance(&samples, 1, 1, 12).unwrap().row(0).unwrap();
        assert!((row[0] - 4.0 / 6.0).abs() < 1e-15 && (row[1] - 2.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn misclassified_and_misshaped_rejected() {
        let t = vec![1.0; 12];
        let bad = [SampleSaliency { table: &t, label: 0, predicted: 1 }];
        assert!(matches!(lead_importance(&bad, 2, 1, 12), Err(Error::Misclassified { .. })));
        let short = [SampleSaliency { table: &t[..5], label: 0, predicted: 0 }];
        assert!(lead_importance(&short, 2, 1, 12).is_err());
    }

    #[test]
    fn ventricle_pooling() {
        let mut a = vec![0.0; 12];
        a[0] = 2.0;
        let mut b = vec![0.0; 12];
        b[1] = 2.0;
        let li = lead_importance(
            &[
                SampleSaliency { table: &a, label: 0, predicted: 0 },
                SampleSaliency { table: &b, label: 1, predicted: 1 },
                SampleSaliency { table: &b, label: 2, predicted: 2 },
            ],
            3,
            1,
            12,
        )
        .unwrap();
        let v = ventricle_rank(&li, &[Ventricle::Left, Ventricle::Left, Ventricle::Right]).unwrap();
        assert_eq!(&v[0].row[..2], &[0.5, 0.5]);
        assert_eq!(v[1].row, li.row(2).unwrap());
        assert_eq!(v[1].ranking[0], 1);
        assert_eq!(v[1].rank_of_lead[1], 0);
        let left_only = ventricle_rank(&li, &[Ventricle::Left; 3]).unwrap();
        assert_eq!(left_only.len(), 1);
        assert_eq!(left_only[0].ventricle, Ventricle::Left);
        let empty = LeadImportanceMatrix { leads: 12, mass: vec![vec![0.0; 12]; 3], counts: vec![0; 3] };
        assert!(matches!(ventricle_rank(&empty, &[Ventricle::Left; 3]), Err(Error::EmptyGroup(_))));
    }

    #[test]
    fn fisher_reference_values() {
        let p = fisher_one_sided(ContingencyTable::new(3, 0, 1, 2));
        assert!((p - 0.2).abs() < 1e-12);
        assert_eq!(fisher_one_sided(ContingencyTable::new(0, 5, 0, 5)), 1.0);
        let easy_wpw = fisher_one_sided(ContingencyTable::new(75, 0, 57, 18));
        assert!((easy_wpw / 1.20e-6 - 1.0).abs() < 0.02, "{easy_wpw}");
        let arruda = fisher_one_sided(ContingencyTable::new(75, 0, 54, 21));
        assert!((arruda / 9.36e-8 - 1.0).abs() < 0.02, "{arruda}");
    }

    #[test]
    fn remap_examples() {
        let set = |v: &[&'static str]| v.iter().copied().collect::<BTreeSet<_>>();
        assert_eq!(remap_region(0, Scheme::EasyWpw).unwrap(), set(&["MV-PL"]));
        assert_eq!(remap_region(3, Scheme::EasyWpw).unwrap(), set(&["MV-AL", "TV-AS"]));
        assert_eq!(remap_region(18, Scheme::Arruda).unwrap(), set(&["PSTA", "RP", "RPL"]));
        assert!(remap_region(24, Scheme::Arruda).is_err());
        assert!(Scheme::parse("bogus").is_err());
        assert_eq!(Scheme::parse("EASY_WPW").unwrap(), Scheme::EasyWpw);
    }

    #[test]
    fn region_outside_scheme_is_rejected() {
        let truth = remap_region(0, Scheme::EasyWpw).unwrap();
        let r = is_correct(&Prediction::Region("RAL".into()), &truth, Scheme::EasyWpw);
        assert!(matches!(r, Err(Error::SchemeMismatch(_))));
    }
}
