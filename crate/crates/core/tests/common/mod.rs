//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use statrs::function::erf::erfc;

fn phi_upper(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

/// Exact ε of the Gaussian mechanism with sensitivity 1 composed `t` times,
/// from the closed-form privacy profile
/// `δ(ε) = Φ(-ε/μ + μ/2) - e^ε Φ(-ε/μ - μ/2)` with `μ = sqrt(t)/σ`.
pub fn gaussian_epsilon_closed_form(sigma: f64, t: u64, delta: f64) -> f64 {
    let mu = (t as f64).sqrt() / sigma;
    let profile = |eps: f64| phi_upper(eps / mu - mu / 2.0) - eps.exp() * phi_upper(eps / mu + mu / 2.0);
    bisect(|e| profile(e) - delta, 0.0, 500.0)
}

fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    if f(lo) <= 0.0 {
        return lo;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

const LOSS_STEP: f64 = 1e-3;
const TRIM: f64 = 1e-25;

/// Discretized privacy-loss distribution: `pmf[i]` is the mass at loss
/// `(offset + i) * LOSS_STEP`. Mass not in `pmf` counts as infinite loss.
struct Pld {
    offset: i64,
    pmf: Vec<f64>,
}

impl Pld {
    fn from_pair(a: &[f64], b: &[f64]) -> Self {
        let idx: Vec<i64> = a.iter().zip(b).map(|(x, y)| ((x.ln() - y.ln()) / LOSS_STEP).round() as i64).collect();
        let lo = *idx.iter().min().unwrap();
        let hi = *idx.iter().max().unwrap();
        let mut pmf = vec![0.0; (hi - lo + 1) as usize];
        for (i, m) in idx.iter().zip(a) {
            pmf[(i - lo) as usize] += m;
        }
        let mut p = Pld { offset: lo, pmf };
        p.trim();
        p
    }

    fn trim(&mut self) {
        let start = self.pmf.iter().position(|&m| m > TRIM).unwrap_or(0);
        let end = self.pmf.iter().rposition(|&m| m > TRIM).map_or(0, |e| e + 1);
        self.pmf = self.pmf[start..end].to_vec();
        self.offset += start as i64;
    }

    fn compose(&self, other: &Pld) -> Pld {
        let mut out = vec![0.0; self.pmf.len() + other.pmf.len() - 1];
        for (i, &a) in self.pmf.iter().enumerate() {
            for (o, &b) in out[i..].iter_mut().zip(&other.pmf) {
                *o += a * b;
            }
        }
        let mut p = Pld { offset: self.offset + other.offset, pmf: out };
        p.trim();
        p
    }

    fn delta(&self, eps: f64) -> f64 {
        let mut d = (1.0 - self.pmf.iter().sum::<f64>()).max(0.0);
        for (i, &m) in self.pmf.iter().enumerate() {
            let loss = (self.offset + i as i64) as f64 * LOSS_STEP;
            if loss > eps {
                d += m * (1.0 - (eps - loss).exp());
            }
        }
        d
    }

    fn epsilon(&self, delta: f64) -> f64 {
        bisect(|e| self.delta(e) - delta, 0.0, 200.0)
    }
}

/// ε of the Poisson-subsampled Gaussian composed `t` times, by numerically
/// convolving the discretized privacy-loss distribution. Both adjacency
/// directions are evaluated and the larger ε is returned.
pub fn pld_epsilon(sigma: f64, q: f64, t: u64, delta: f64) -> f64 {
    let n = 200_001;
    let (lo, hi) = (-12.0 * sigma - 1.0, 12.0 * sigma + 2.0);
    let dx = (hi - lo) / (n - 1) as f64;
    let pdf = |x: f64, mu: f64| {
        let z = (x - mu) / sigma;
        (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt()) * dx
    };
    let xs: Vec<f64> = (0..n).map(|i| lo + i as f64 * dx).collect();
    let mixture: Vec<f64> = xs.iter().map(|&x| (1.0 - q) * pdf(x, 0.0) + q * pdf(x, 1.0)).collect();
    let base: Vec<f64> = xs.iter().map(|&x| pdf(x, 0.0)).collect();
    [(&mixture, &base), (&base, &mixture)]
        .into_iter()
        .map(|(a, b)| {
            let one = Pld::from_pair(a, b);
            let mut acc = Pld { offset: one.offset, pmf: one.pmf.clone() };
            for _ in 1..t {
                acc = acc.compose(&one);
            }
            acc.epsilon(delta)
        })
        .fold(0.0, f64::max)
}

/// Levenshtein distance by exhaustive recursion with memoization, over chars.
pub fn levenshtein_oracle(a: &str, b: &str) -> usize {
    fn go(a: &[char], b: &[char], memo: &mut std::collections::HashMap<(usize, usize), usize>) -> usize {
        if a.is_empty() {
            return b.len();
        }
        if b.is_empty() {
            return a.len();
        }
        if let Some(&v) = memo.get(&(a.len(), b.len())) {
            return v;
        }
        let cost = usize::from(a[0] != b[0]);
        let v = (go(&a[1..], &b[1..], memo) + cost).min(go(&a[1..], b, memo) + 1).min(go(a, &b[1..], memo) + 1);
        memo.insert((a.len(), b.len()), v);
        v
    }
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    go(&a, &b, &mut std::collections::HashMap::new())
}
