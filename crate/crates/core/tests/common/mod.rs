#![allow(dead_code)]

/// All `k`-subsets of `0..n`.
pub fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    (0u32..1 << n)
        .filter(|m| m.count_ones() as usize == k)
        .map(|m| (0..n).filter(|i| m & (1 << i) != 0).collect())
        .collect()
}

/// Minimum of `‖w − x‖²` over every `(s, σ)`-sparse support, by full enumeration.
pub fn brute_force_distance(data: &[f64], blocks: usize, n: usize, s: usize, sigma: usize) -> f64 {
    let total: f64 = data.iter().map(|v| v * v).sum();
    let entry_sets = subsets(n, sigma);
    let mut best = f64::INFINITY;
    for chosen in subsets(blocks, s) {
        let mut picks = vec![0usize; chosen.len()];
        loop {
            let kept: f64 = chosen
                .iter()
                .zip(&picks)
                .map(|(&b, &p)| {
                    entry_sets[p]
                        .iter()
                        .map(|&j| data[b * n + j].powi(2))
                        .sum::<f64>()
                })
                .sum();
            best = best.min(total - kept);
            let mut i = 0;
            while i < picks.len() {
                picks[i] += 1;
                if picks[i] < entry_sets.len() {
                    break;
                }
                picks[i] = 0;
                i += 1;
            }
            if i == picks.len() {
                break;
            }
        }
    }
    best
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}
