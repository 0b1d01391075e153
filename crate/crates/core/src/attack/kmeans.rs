use rand::Rng;

use crate::error::{Error, Result};
use crate::seed::SeedStream;

pub const RESTARTS: usize = 10;
pub const MAX_ITER: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
}

/// Column-wise z-scores with population std. Constant columns become zero.
pub fn standardize(data: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let Some(first) = data.first() else { return vec![] };
    let n = data.len() as f64;
    let d = first.len();
    let mut out = data.to_vec();
    for j in 0..d {
        let mean = data.iter().map(|r| r[j]).sum::<f64>() / n;
        let var = data.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        for r in out.iter_mut() {
            r[j] = if sd > 0.0 { (r[j] - mean) / sd } else { 0.0 };
        }
    }
    out
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    centroids.iter().enumerate().map(|(i, c)| (i, dist2(point, c))).fold((0, f64::INFINITY), |best, cur| {
        if cur.1 < best.1 {
            cur
        } else {
            best
        }
    })
}

fn plus_plus_seed<R: Rng>(data: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut centroids = vec![data[rng.random_range(0..data.len())].clone()];
    while centroids.len() < k {
        let d: Vec<f64> = data.iter().map(|p| nearest(p, &centroids).1).collect();
        let total: f64 = d.iter().sum();
        if total == 0.0 {
            centroids.push(data[rng.random_range(0..data.len())].clone());
            continue;
        }
        let mut r = rng.random::<f64>() * total;
        let mut pick = data.len() - 1;
        for (i, w) in d.iter().enumerate() {
            if r < *w {
                pick = i;
                break;
            }
            r -= w;
        }
        centroids.push(data[pick].clone());
    }
    centroids
}

fn lloyd(data: &[Vec<f64>], mut centroids: Vec<Vec<f64>>) -> KMeansFit {
    let k = centroids.len();
    let dim = data[0].len();
    let mut assignments = vec![usize::MAX; data.len()];
    for _ in 0..MAX_ITER {
        let mut changed = false;
        for (a, p) in assignments.iter_mut().zip(data) {
            let (c, _) = nearest(p, &centroids);
            if *a != c {
                *a = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&a, p) in assignments.iter().zip(data) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(p) {
                *s += x;
            }
        }
        for c in 0..k {
            // empty clusters keep their previous centroid
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    let inertia = data.iter().zip(&assignments).map(|(p, &a)| dist2(p, &centroids[a])).sum();
    KMeansFit { centroids, assignments, inertia }
}

/// k-means++ seeding, Lloyd iterations, best of [`RESTARTS`] by inertia.
pub fn kmeans(data: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeansFit> {
    if k == 0 || data.len() < k {
        return Err(Error::Input(format!("cannot form {k} clusters from {} points", data.len())));
    }
    let dim = data[0].len();
    if data.iter().any(|r| r.len() != dim) {
        return Err(Error::Input("ragged feature matrix".into()));
    }
    let stream = SeedStream::new(seed).child("kmeans");
    let mut best: Option<KMeansFit> = None;
    for restart in 0..RESTARTS {
        let mut rng = stream.index(restart as u64).rng();
        let fit = lloyd(data, plus_plus_seed(data, k, &mut rng));
        if best.as_ref().is_none_or(|b| fit.inertia < b.inertia) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}
