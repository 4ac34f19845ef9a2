use serde::{Deserialize, Serialize};

use crate::diffcore::NdArray;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(row, col)` pairs ascending by row.
    pub pairs: Vec<(usize, usize)>,
    /// Rows left without a column.
    pub unmatched: Vec<usize>,
    pub total_cost: f64,
}

impl MatchResult {
    pub fn rows(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.0).collect()
    }
}

/// Optimal cost of assigning every row of `cost` (rows ≤ cols), plus the
/// column picked per row. Shortest augmenting paths with potentials.
fn solve_rows(cost: &[Vec<f64>]) -> (f64, Vec<usize>) {
    let n = cost.len();
    if n == 0 {
        return (0.0, Vec::new());
    }
    let m = cost[0].len();
    debug_assert!(n <= m);
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
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
            for j in 0..=m {
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
    let mut col_of = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            col_of[p[j] - 1] = j - 1;
        }
    }
    let total = (0..n).map(|i| cost[i][col_of[i]]).sum();
    (total, col_of)
}

/// Minimum cost of any `min(n, m)`-pair assignment of a dense matrix.
fn optimum(cost: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> f64 {
    if rows.is_empty() || cols.is_empty() {
        return 0.0;
    }
    let sub: Vec<Vec<f64>> = if rows.len() <= cols.len() {
        rows.iter()
            .map(|&r| cols.iter().map(|&c| cost[r][c]).collect())
            .collect()
    } else {
        cols.iter()
            .map(|&c| rows.iter().map(|&r| cost[r][c]).collect())
            .collect()
    };
    solve_rows(&sub).0
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0)
}

/// Minimum-cost injective assignment of `min(n, m)` pairs. Among optimal
/// assignments the one with the lexicographically smallest `(row, col)`
/// pair list is returned.
pub fn hungarian(cost: &NdArray) -> MatchResult {
    let (n, m) = match cost.shape() {
        [n, m] => (*n, *m),
        _ => (0, 0),
    };
    if n == 0 || m == 0 {
        return MatchResult {
            pairs: Vec::new(),
            unmatched: (0..n).collect(),
            total_cost: 0.0,
        };
    }
    let c: Vec<Vec<f64>> = (0..n).map(|r| cost.row(r).to_vec()).collect();
    let best = optimum(&c, &(0..n).collect::<Vec<_>>(), &(0..m).collect::<Vec<_>>());
    let need = n.min(m);

    let mut pairs = Vec::with_capacity(need);
    let mut unmatched = Vec::new();
    let mut free_cols: Vec<usize> = (0..m).collect();
    let mut spent = 0.0;
    for r in 0..n {
        let rest: Vec<usize> = (r + 1..n).collect();
        let mut chosen = None;
        if pairs.len() < need {
            for (k, &col) in free_cols.iter().enumerate() {
                let mut cols = free_cols.clone();
                cols.remove(k);
                if pairs.len() + 1 + rest.len().min(cols.len()) < need {
                    continue;
                }
                if close(spent + c[r][col] + optimum(&c, &rest, &cols), best) {
                    chosen = Some(k);
                    break;
                }
            }
        }
        match chosen {
            Some(k) => {
                let col = free_cols.remove(k);
                spent += c[r][col];
                pairs.push((r, col));
            }
            None => unmatched.push(r),
        }
    }
    MatchResult {
        pairs,
        unmatched,
        total_cost: spent,
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn m(rows: &[Vec<f64>]) -> NdArray {
        NdArray::from_rows(rows).unwrap()
    }

    /// Enumerates every injective assignment of min(n, m) pairs.
    fn brute(c: &[Vec<f64>]) -> f64 {
        let (n, mm) = (c.len(), c[0].len());
        let need = n.min(mm);
        fn rec(c: &[Vec<f64>], r: usize, used: &mut Vec<bool>, left: usize, acc: f64, best: &mut f64) {
            if left == 0 {
                *best = best.min(acc);
                return;
            }
            if c.len() - r < left {
                return;
            }
            for j in 0..used.len() {
                if !used[j] {
                    used[j] = true;
                    rec(c, r + 1, used, left - 1, acc + c[r][j], best);
                    used[j] = false;
                }
            }
            rec(c, r + 1, used, left, acc, best);
        }
        let mut best = f64::INFINITY;
        rec(c, 0, &mut vec![false; mm], need, 0.0, &mut best);
        best
    }

    #[test]
    fn two_by_two() {
        let r = hungarian(&m(&[vec![1.0, 2.0], vec![2.0, 1.0]]));
        assert_eq!(r.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(r.total_cost, 2.0);
    }

    #[test]
    fn diagonal_zero() {
        let c: Vec<Vec<f64>> = (0..5)
            .map(|i| (0..5).map(|j| if i == j { 0.0 } else { 1.0 + j as f64 }).collect())
            .collect();
        assert_eq!(hungarian(&m(&c)).pairs, (0..5).map(|i| (i, i)).collect::<Vec<_>>());
    }

    #[test]
    fn ties_break_lexicographically() {
        let r = hungarian(&m(&[vec![1.0, 1.0], vec![1.0, 1.0]]));
        assert_eq!(r.pairs, vec![(0, 0), (1, 1)]);
        let r = hungarian(&m(&[vec![3.0], vec![3.0], vec![3.0]]));
        assert_eq!(r.pairs, vec![(0, 0)]);
        assert_eq!(r.unmatched, vec![1, 2]);
        let r = hungarian(&m(&[vec![5.0, 0.0, 0.0]]));
        assert_eq!(r.pairs, vec![(0, 1)]);
    }

    #[test]
    fn empty_and_rectangular() {
        assert!(hungarian(&NdArray::zeros(&[0, 3])).pairs.is_empty());
        let r = hungarian(&m(&[vec![9.0], vec![1.0], vec![4.0]]));
        assert_eq!(r.pairs, vec![(1, 0)]);
        assert_eq!(r.unmatched, vec![0, 2]);
    }

    #[test]
    fn equals_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for trial in 0..300 {
            let n = rng.gen_range(1..=6);
            let k = rng.gen_range(1..=6);
            let c: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    (0..k)
                        .map(|_| {
                            if trial % 3 == 0 {
                                rng.gen_range(0..4) as f64
                            } else {
                                rng.gen_range(-5.0..5.0)
                            }
                        })
                        .collect()
                })
                .collect();
            let r = hungarian(&m(&c));
            assert_eq!(r.pairs.len(), n.min(k));
            let mut cols: Vec<_> = r.pairs.iter().map(|p| p.1).collect();
            cols.sort();
            cols.dedup();
            assert_eq!(cols.len(), r.pairs.len());
            assert_eq!(r.total_cost, brute(&c), "trial {trial}");
        }
    }
}
