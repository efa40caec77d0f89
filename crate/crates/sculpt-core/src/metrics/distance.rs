//! Point-cloud distances: symmetric Chamfer and Earth-Mover's Distance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Largest cloud EMD accepts; everything here is desk scale.
pub const EMD_MAX_POINTS: usize = 1024;
/// Exact assignment up to this size, greedy + 2-opt above.
pub const EMD_EXACT_LIMIT: usize = 256;

#[inline]
fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Symmetric Chamfer distance: mean nearest-neighbour distance from `a` to
/// `b` plus the reverse term.
pub fn chamfer(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput("chamfer point set".into()));
    }
    let one_way = |from: &[[f64; 3]], to: &[[f64; 3]]| -> f64 {
        let total: f64 = from
            .iter()
            .map(|p| {
                to.iter()
                    .map(|q| dist(p, q))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum();
        total / from.len() as f64
    };
    Ok(one_way(a, b) + one_way(b, a))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmdResult {
    pub value: f64,
    /// False when the greedy + 2-opt approximation was used.
    pub exact: bool,
}

/// Earth-Mover's Distance: mean pair distance under a minimum-cost perfect
/// matching. Unequal sizes are reconciled by resampling the smaller set
/// with a seeded rule.
pub fn emd(a: &[[f64; 3]], b: &[[f64; 3]], seed: u64) -> Result<EmdResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput("emd point set".into()));
    }
    if a.len().max(b.len()) > EMD_MAX_POINTS {
        return Err(Error::InvalidConfig(format!(
            "emd accepts at most {EMD_MAX_POINTS} points, got {}",
            a.len().max(b.len())
        )));
    }
    let n = a.len().max(b.len());
    let a = pad_resample(a, n, seed);
    let b = pad_resample(b, n, seed.wrapping_add(1));
    if n <= EMD_EXACT_LIMIT {
        Ok(EmdResult {
            value: emd_exact(&a, &b),
            exact: true,
        })
    } else {
        Ok(EmdResult {
            value: emd_greedy_2opt(&a, &b),
            exact: false,
        })
    }
}

fn pad_resample(points: &[[f64; 3]], n: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut out = points.to_vec();
    if out.len() < n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        while out.len() < n {
            out.push(points[rng.gen_range(0..points.len())]);
        }
    }
    out
}

/// Exact assignment via the Hungarian algorithm with potentials, O(n^3).
pub fn emd_exact(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    let n = a.len();
    debug_assert_eq!(n, b.len());
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            cost[i * n + j] = dist(&a[i], &b[j]);
        }
    }
    let assignment = hungarian(&cost, n);
    let total: f64 = (0..n).map(|i| cost[i * n + assignment[i]]).sum();
    total / n as f64
}

/// Greedy nearest-unmatched assignment improved by 2-opt swap passes.
pub fn emd_greedy_2opt(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    let n = a.len();
    debug_assert_eq!(n, b.len());
    let mut matched = vec![false; n];
    let mut assign = vec![0usize; n];
    for i in 0..n {
        let mut best = (f64::INFINITY, 0usize);
        for (j, m) in matched.iter().enumerate() {
            if !m {
                let d = dist(&a[i], &b[j]);
                if d < best.0 {
                    best = (d, j);
                }
            }
        }
        assign[i] = best.1;
        matched[best.1] = true;
    }
    // 2-opt: swap assignments while any pair improves
    for _ in 0..50 {
        let mut improved = false;
        for i in 0..n {
            for k in (i + 1)..n {
                let cur = dist(&a[i], &b[assign[i]]) + dist(&a[k], &b[assign[k]]);
                let swapped = dist(&a[i], &b[assign[k]]) + dist(&a[k], &b[assign[i]]);
                if swapped + 1e-15 < cur {
                    assign.swap(i, k);
                    improved = true;
                }
            }
        }
        if !improved {
            break;
        }
    }
    let total: f64 = (0..n).map(|i| dist(&a[i], &b[assign[i]])).sum();
    total / n as f64
}

/// Minimum-cost perfect matching on a square cost matrix; returns the
/// column assigned to each row.
fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rnd_cloud(n: usize, seed: u64) -> Vec<[f64; 3]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| [rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0)])
            .collect()
    }

    #[test]
    fn identical_sets_have_zero_distance() {
        let a = rnd_cloud(20, 1);
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
        assert_eq!(emd(&a, &a, 0).unwrap().value, 0.0);
    }

    #[test]
    fn chamfer_arithmetic() {
        let a = vec![[0.0, 0.0, 0.0]];
        let b = vec![[3.0, 4.0, 0.0]];
        assert!((chamfer(&a, &b).unwrap() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn chamfer_matches_brute_force() {
        let a = rnd_cloud(50, 2);
        let b = rnd_cloud(50, 3);
        let got = chamfer(&a, &b).unwrap();
        let mut fwd = 0.0;
        for p in &a {
            let mut best = f64::INFINITY;
            for q in &b {
                best = best.min(dist(p, q));
            }
            fwd += best;
        }
        let mut bwd = 0.0;
        for q in &b {
            let mut best = f64::INFINITY;
            for p in &a {
                best = best.min(dist(q, p));
            }
            bwd += best;
        }
        let expect = fwd / 50.0 + bwd / 50.0;
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn chamfer_symmetry() {
        let a = rnd_cloud(17, 4);
        let b = rnd_cloud(23, 5);
        let ab = chamfer(&a, &b).unwrap();
        let ba = chamfer(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn emd_permutation_invariance() {
        let a = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let b = vec![[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]];
        assert_eq!(emd(&a, &b, 0).unwrap().value, 0.0);
    }

    #[test]
    fn emd_matches_factorial_oracle() {
        let a = rnd_cloud(8, 6);
        let b = rnd_cloud(8, 7);
        let got = emd(&a, &b, 0).unwrap();
        assert!(got.exact);
        // brute force over all 8! matchings
        let mut perm: Vec<usize> = (0..8).collect();
        let mut best = f64::INFINITY;
        permute(&mut perm, 0, &mut |p| {
            let total: f64 = (0..8).map(|i| dist(&a[i], &b[p[i]])).sum();
            if total < best {
                best = total;
            }
        });
        assert!((got.value - best / 8.0).abs() < 1e-10);
    }

    fn permute(p: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
        if k == p.len() {
            f(p);
            return;
        }
        for i in k..p.len() {
            p.swap(k, i);
            permute(p, k + 1, f);
            p.swap(k, i);
        }
    }

    #[test]
    fn exact_no_worse_than_greedy() {
        for seed in 0..5 {
            let a = rnd_cloud(40, 100 + seed);
            let b = rnd_cloud(40, 200 + seed);
            let exact = emd_exact(&a, &b);
            let greedy = emd_greedy_2opt(&a, &b);
            assert!(exact <= greedy + 1e-12, "{exact} > {greedy}");
        }
    }

    #[test]
    fn unequal_sizes_pad_deterministically() {
        let a = rnd_cloud(10, 8);
        let b = rnd_cloud(17, 9);
        let r1 = emd(&a, &b, 42).unwrap();
        let r2 = emd(&a, &b, 42).unwrap();
        assert_eq!(r1.value, r2.value);
    }

    #[test]
    fn empty_and_oversized_rejected() {
        let a = rnd_cloud(4, 10);
        assert!(chamfer(&a, &[]).is_err());
        assert!(emd(&[], &a, 0).is_err());
        let big = rnd_cloud(EMD_MAX_POINTS + 1, 11);
        assert!(emd(&big, &big, 0).is_err());
    }

    #[test]
    fn large_sets_use_approximation() {
        let a = rnd_cloud(300, 12);
        let b = rnd_cloud(300, 13);
        let r = emd(&a, &b, 0).unwrap();
        assert!(!r.exact);
        assert!(r.value > 0.0 && r.value.is_finite());
    }
}
