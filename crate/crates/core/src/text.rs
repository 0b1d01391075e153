//! Edit distance and normalized Levenshtein similarity.

/// Levenshtein distance over Unicode scalar values.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Normalized Levenshtein similarity, case-folded: `1 - d / max(|p|, |g|)`.
/// Two empty strings are identical.
pub fn nls(predicted: &str, gold: &str) -> f64 {
    let p = predicted.to_lowercase();
    let g = gold.to_lowercase();
    let len = p.chars().count().max(g.chars().count());
    if len == 0 {
        return 1.0;
    }
    1.0 - levenshtein(&p, &g) as f64 / len as f64
}

/// Normalization used for exact-match accuracy.
pub fn normalize_answer(s: &str) -> String {
    s.trim().to_lowercase()
}

pub fn exact_match(predicted: &str, gold: &str) -> bool {
    normalize_answer(predicted) == normalize_answer(gold)
}
