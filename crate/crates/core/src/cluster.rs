//! Dynamic time warping, K-medoids and silhouette-based choice of k.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::signal::EcgSignal;

/// Accumulated DTW cost between two multivariate series given as time-major
/// rows of `leads` values. The local cost is the squared Euclidean distance
/// across leads; steps are (1,0), (0,1) and (1,1). With `window`, cells
/// farther than that from the (rescaled) diagonal are excluded.
pub fn dtw_rows(a: &[f32], b: &[f32], leads: usize, window: Option<usize>) -> Result<f64> {
    if leads == 0 || a.is_empty() || b.is_empty() {
        return Err(Error::InvalidSignal("DTW needs non-empty series".into()));
    }
    if a.len() % leads != 0 || b.len() % leads != 0 {
        return Err(Error::ShapeMismatch(format!(
            "series of {} and {} values are not multiples of {leads} leads",
            a.len(),
            b.len()
        )));
    }
    let (n, m) = (a.len() / leads, b.len() / leads);
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for i in 1..=n {
        cur.fill(f64::INFINITY);
        let (lo, hi) = match window {
            Some(w) => {
                let centre = ((i - 1) as f64 * (m as f64 - 1.0) / (n as f64 - 1.0).max(1.0)).round() as usize;
                (centre.saturating_sub(w) + 1, (centre + w + 1).min(m))
            }
            None => (1, m),
        };
        let ra = &a[(i - 1) * leads..i * leads];
        for j in lo..=hi {
            let rb = &b[(j - 1) * leads..j * leads];
            let cost: f64 = ra.iter().zip(rb).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
            let best = prev[j - 1].min(prev[j]).min(cur[j - 1]);
            cur[j] = cost + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let d = prev[m];
    if d.is_finite() {
        Ok(d)
    } else {
        Err(Error::InvalidConfig(format!("window {window:?} admits no warping path between lengths {n} and {m}")))
    }
}

pub fn dtw_distance(a: &EcgSignal, b: &EcgSignal) -> Result<f64> {
    dtw_distance_windowed(a, b, None)
}

pub fn dtw_distance_windowed(a: &EcgSignal, b: &EcgSignal, window: Option<usize>) -> Result<f64> {
    if a.leads() != b.leads() {
        return Err(Error::ShapeMismatch(format!("{} leads vs {} leads", a.leads(), b.leads())));
    }
    dtw_rows(a.values(), b.values(), a.leads(), window)
}

/// Symmetric matrix of pairwise distances with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let d = f(i, j);
                data[i * n + j] = d;
                data[j * n + i] = d;
            }
        }
        Self { n, data }
    }

    /// Validate and wrap a row-major matrix.
    pub fn from_rows(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::InvalidClustering(format!("{} entries for a {n}x{n} matrix", data.len())));
        }
        for i in 0..n {
            if data[i * n + i] != 0.0 {
                return Err(Error::InvalidClustering(format!("diagonal entry {i} is not zero")));
            }
            for j in 0..n {
                let (x, y) = (data[i * n + j], data[j * n + i]);
                if !(x >= 0.0) || !x.is_finite() || (x - y).abs() > 1e-9 * x.abs().max(1.0) {
                    return Err(Error::InvalidClustering(format!("entry ({i},{j}) is negative, non-finite or asymmetric")));
                }
            }
        }
        Ok(Self { n, data })
    }

    /// Pairwise DTW distances, computed in parallel.
    pub fn dtw(signals: &[&EcgSignal], window: Option<usize>) -> Result<Self> {
        let n = signals.len();
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
        let values: Vec<f64> = pairs
            .par_iter()
            .map(|&(i, j)| dtw_distance_windowed(signals[i], signals[j], window))
            .collect::<Result<_>>()?;
        let mut data = vec![0.0; n * n];
        for (&(i, j), d) in pairs.iter().zip(values) {
            data[i * n + j] = d;
            data[j * n + i] = d;
        }
        Ok(Self { n, data })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusteringResult {
    pub k: usize,
    /// Medoid of each cluster, as an index into the clustered set.
    pub medoids: Vec<usize>,
    /// Cluster of each sample.
    pub assignment: Vec<usize>,
    pub cost: f64,
    /// Total cost after initialization and after every iteration.
    pub cost_trace: Vec<f64>,
    pub silhouette: Option<f64>,
}

impl ClusteringResult {
    pub fn cluster_members(&self, cluster: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] == cluster).collect()
    }

    /// Per-sample rows: index, cluster, medoid flag, silhouette contribution.
    pub fn write_csv(&self, path: &Path, dist: &DistanceMatrix, ids: &[usize]) -> Result<()> {
        let scores = if self.k >= 2 {
            silhouette_samples(dist, &self.assignment)?
        } else {
            vec![0.0; self.assignment.len()]
        };
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "sample,cluster,medoid,silhouette")?;
        for (i, (&c, s)) in self.assignment.iter().zip(&scores).enumerate() {
            writeln!(f, "{},{c},{},{s:.6}", ids[i], u8::from(self.medoids.contains(&i)))?;
        }
        f.flush()?;
        Ok(())
    }
}

fn assign(dist: &DistanceMatrix, medoids: &[usize]) -> (Vec<usize>, f64) {
    let mut cost = 0.0;
    let assignment = (0..dist.len())
        .map(|i| {
            if let Some(c) = medoids.iter().position(|&m| m == i) {
                return c;
            }
            let (c, d) = medoids
                .iter()
                .enumerate()
                .map(|(c, &m)| (c, dist.get(i, m)))
                .fold((0, f64::INFINITY), |best, x| if x.1 < best.1 { x } else { best });
            cost += d;
            c
        })
        .collect();
    (assignment, cost)
}

/// Seeded random first medoid, then repeatedly the point farthest from its
/// nearest chosen medoid (smallest index on ties).
fn farthest_point_init(dist: &DistanceMatrix, k: usize, seed: u64) -> Vec<usize> {
    let n = dist.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut medoids = vec![rng.random_range(0..n)];
    let mut nearest: Vec<f64> = dist.row(medoids[0]).to_vec();
    while medoids.len() < k {
        let next = (0..n)
            .filter(|i| !medoids.contains(i))
            .fold(None::<(usize, f64)>, |best, i| match best {
                Some((_, d)) if nearest[i] <= d => best,
                _ => Some((i, nearest[i])),
            })
            .expect("k ≤ n")
            .0;
        medoids.push(next);
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(dist.get(i, next));
        }
    }
    medoids
}

/// K-medoids by alternating assignment and in-cluster medoid updates. A
/// medoid is replaced only by a member with strictly lower in-cluster cost,
/// so the total cost never increases and the loop terminates.
pub fn kmedoids(dist: &DistanceMatrix, k: usize, seed: u64) -> Result<ClusteringResult> {
    let n = dist.len();
    if k == 0 || k > n {
        return Err(Error::InvalidClustering(format!("k = {k} for {n} samples")));
    }
    let mut medoids = farthest_point_init(dist, k, seed);
    let (mut assignment, mut cost) = assign(dist, &medoids);
    let mut trace = vec![cost];
    loop {
        let mut changed = false;
        for (c, medoid) in medoids.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| assignment[i] == c).collect();
            let within = |m: usize| members.iter().map(|&i| dist.get(m, i)).sum::<f64>();
            let mut best = (*medoid, within(*medoid));
            for &m in &members {
                let s = within(m);
                if s < best.1 {
                    best = (m, s);
                }
            }
            if best.0 != *medoid {
                *medoid = best.0;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let (a, c) = assign(dist, &medoids);
        if c > cost {
            // cannot happen: each update lowers its cluster's cost and
            // reassignment can only lower it further
            return Err(Error::InvalidClustering("k-medoids cost increased".into()));
        }
        assignment = a;
        cost = c;
        trace.push(cost);
    }
    let silhouette = if k >= 2 { Some(silhouette(dist, &assignment)?) } else { None };
    Ok(ClusteringResult {
        k,
        medoids,
        assignment,
        cost,
        cost_trace: trace,
        silhouette,
    })
}

/// Silhouette value of every sample; samples in singleton clusters score 0.
pub fn silhouette_samples(dist: &DistanceMatrix, assignment: &[usize]) -> Result<Vec<f64>> {
    let n = dist.len();
    if assignment.len() != n {
        return Err(Error::InvalidClustering(format!("{} labels for {n} samples", assignment.len())));
    }
    let k = assignment.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &c in assignment {
        sizes[c] += 1;
    }
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(Error::InvalidClustering("silhouette needs at least two non-empty clusters".into()));
    }
    Ok((0..n)
        .map(|i| {
            let own = assignment[i];
            if sizes[own] == 1 {
                return 0.0;
            }
            let mut sums = vec![0.0; k];
            for j in 0..n {
                if j != i {
                    sums[assignment[j]] += dist.get(i, j);
                }
            }
            let a = sums[own] / (sizes[own] - 1) as f64;
            let b = (0..k)
                .filter(|&c| c != own && sizes[c] > 0)
                .map(|c| sums[c] / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            let den = a.max(b);
            if den > 0.0 {
                (b - a) / den
            } else {
                0.0
            }
        })
        .collect())
}

pub fn silhouette(dist: &DistanceMatrix, assignment: &[usize]) -> Result<f64> {
    let s = silhouette_samples(dist, assignment)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

/// Cluster with every candidate k and keep the highest silhouette (the
/// smaller k on ties).
pub fn select_k_from_matrix(dist: &DistanceMatrix, candidates: &[usize], seed: u64) -> Result<ClusteringResult> {
    let &max_k = candidates
        .iter()
        .max()
        .ok_or_else(|| Error::InvalidClustering("no candidate k".into()))?;
    if candidates.contains(&1) || candidates.contains(&0) {
        return Err(Error::InvalidClustering("silhouette selection needs k ≥ 2".into()));
    }
    if dist.len() < max_k + 1 {
        return Err(Error::TooFewSamples(format!(
            "{} samples for candidate k up to {max_k} (need at least {})",
            dist.len(),
            max_k + 1
        )));
    }
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut best: Option<ClusteringResult> = None;
    for k in sorted {
        let r = kmedoids(dist, k, seed)?;
        let s = r.silhouette.expect("k ≥ 2");
        if best.as_ref().is_none_or(|b| s > b.silhouette.expect("k ≥ 2")) {
            best = Some(r);
        }
    }
    Ok(best.expect("at least one candidate"))
}

pub const DEFAULT_K: [usize; 3] = [2, 3, 4];

pub fn select_k(signals: &[&EcgSignal], candidates: &[usize], seed: u64) -> Result<(ClusteringResult, DistanceMatrix)> {
    let max_k = candidates.iter().copied().max().unwrap_or(0);
    if signals.len() < max_k + 1 {
        return Err(Error::TooFewSamples(format!(
            "{} signals for candidate k up to {max_k} (need at least {})",
            signals.len(),
            max_k + 1
        )));
    }
    let dist = DistanceMatrix::dtw(signals, None)?;
    Ok((select_k_from_matrix(&dist, candidates, seed)?, dist))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uni(v: &[f32]) -> Vec<f32> {
        v.to_vec()
    }

    #[test]
    fn dtw_hand_cases() {
        assert_eq!(dtw_rows(&uni(&[0., 0., 1., 0.]), &uni(&[0., 1., 0., 0.]), 1, None).unwrap(), 0.0);
        assert_eq!(dtw_rows(&[0., 0.], &[1., 1.], 1, None).unwrap(), 2.0);
        let x = [0.3, -1.0, 2.0, 0.5, 0.1, 0.0];
        assert_eq!(dtw_rows(&x, &x, 2, None).unwrap(), 0.0);
        assert!(dtw_rows(&[], &x, 2, None).is_err());
        // different lengths are fine
        assert_eq!(dtw_rows(&[1., 2., 3.], &[1., 2., 2., 3.], 1, None).unwrap(), 0.0);
    }

    #[test]
    fn window_restricts_warping() {
        let a = [0., 1., 0., 0., 0., 0.];
        let b = [0., 0., 0., 0., 1., 0.];
        let full = dtw_rows(&a, &b, 1, None).unwrap();
        let narrow = dtw_rows(&a, &b, 1, Some(0)).unwrap();
        assert_eq!(full, 0.0);
        assert_eq!(narrow, 2.0);
    }

    #[test]
    fn silhouette_hand_cases() {
        let pairs = DistanceMatrix::from_fn(4, |i, j| if i / 2 == j / 2 { 0.0 } else { 10.0 });
        assert_eq!(silhouette(&pairs, &[0, 0, 1, 1]).unwrap(), 1.0);
        let flat = DistanceMatrix::from_fn(5, |_, _| 1.0);
        assert_eq!(silhouette(&flat, &[0, 0, 1, 1, 1]).unwrap(), 0.0);
        let four = DistanceMatrix::from_fn(4, |i, j| if i / 2 == j / 2 { 1.0 } else { 3.0 });
        assert!((silhouette(&four, &[0, 0, 1, 1]).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!(silhouette(&four, &[0, 0, 0, 0]).is_err());
        // singleton scores 0
        let s = silhouette_samples(&four, &[0, 0, 0, 1]).unwrap();
        assert_eq!(s[3], 0.0);
    }

    #[test]
    fn kmedoids_degenerate_k() {
        let d = DistanceMatrix::from_fn(5, |i, j| (i as f64 - j as f64).abs().powi(2));
        let all = kmedoids(&d, 5, 3).unwrap();
        assert_eq!(all.cost, 0.0);
        let mut m = all.medoids.clone();
        m.sort();
        assert_eq!(m, vec![0, 1, 2, 3, 4]);
        assert!(kmedoids(&d, 6, 0).is_err());
    }

    #[test]
    fn from_rows_validates() {
        assert!(DistanceMatrix::from_rows(2, vec![0.0, 1.0, 2.0, 0.0]).is_err());
        assert!(DistanceMatrix::from_rows(2, vec![1.0, 1.0, 1.0, 0.0]).is_err());
        assert!(DistanceMatrix::from_rows(2, vec![0.0, 1.0, 1.0, 0.0]).is_ok());
    }
}
