#![allow(dead_code)]

use gamma_ddpg::approximator::Mlp;
use rand::Rng;

/// Optimal transport cost by enumerating every basis of the transportation
/// polytope. Only practical for supports of a few points.
pub fn transport_by_vertices(supply: &[f64], demand: &[f64], cost: &[Vec<f64>]) -> f64 {
    let n = supply.len();
    let m = demand.len();
    let vars = n * m;
    let rank = n + m - 1;
    // constraint rows: n supply rows, then m - 1 demand rows (the last is implied)
    let mut a = vec![vec![0.0; vars]; rank];
    let mut b = vec![0.0; rank];
    for i in 0..n {
        for j in 0..m {
            a[i][i * m + j] = 1.0;
        }
        b[i] = supply[i];
    }
    for j in 0..m - 1 {
        for i in 0..n {
            a[n + j][i * m + j] = 1.0;
        }
        b[n + j] = demand[j];
    }
    let mut best = f64::INFINITY;
    for basis in combinations(vars, rank) {
        let mat: Vec<Vec<f64>> = a.iter().map(|row| basis.iter().map(|&k| row[k]).collect()).collect();
        let Some(x) = solve(mat, b.clone()) else { continue };
        if x.iter().any(|&v| v < -1e-12) {
            continue;
        }
        let total: f64 = basis.iter().zip(&x).map(|(&k, &v)| v * cost[k / m][k % m]).sum();
        best = best.min(total);
    }
    best
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        let mut i = k;
        while i > 0 && idx[i - 1] == n - k + i - 1 {
            i -= 1;
        }
        if i == 0 {
            return out;
        }
        idx[i - 1] += 1;
        for j in i..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Gaussian elimination with partial pivoting; `None` when singular.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            if f != 0.0 {
                for c in col..n {
                    a[r][c] -= f * a[col][c];
                }
                b[r] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

/// A distribution over `len` points with a random support of 1..=`max_support`.
pub fn random_sparse<R: Rng>(rng: &mut R, len: usize, max_support: usize) -> Vec<f64> {
    let k = rng.random_range(1..=max_support);
    let support = rand::seq::index::sample(rng, len, k);
    let mut p = vec![0.0; len];
    let weights: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = weights.iter().sum();
    for (i, w) in support.iter().zip(weights) {
        p[i] = w / total;
    }
    p
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-6)
}

/// Worst relative error between analytic and central-difference gradients
/// of `sum(output * g)` for random `x` and `g`. Checks every input and
/// `per_layer` sampled weights and biases of each layer.
pub fn gradient_check<R: Rng>(net: &Mlp, per_layer: usize, rng: &mut R) -> f64 {
    let eps = 1e-5;
    let x: Vec<f64> = (0..net.input_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let g: Vec<f64> = (0..net.output_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let f = |n: &Mlp, x: &[f64]| n.forward(x).unwrap().iter().zip(&g).map(|(a, b)| a * b).sum::<f64>();
    let (grads, dx) = net.gradients(&x, &g).unwrap();
    let flat = grads.flatten();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp[i] += eps;
        xm[i] -= eps;
        worst = worst.max(rel_err(dx[i], (f(net, &xp) - f(net, &xm)) / (2.0 * eps)));
    }
    let mut indices = Vec::new();
    let mut offset = 0;
    for layer in net.layers() {
        let (nw, nb) = (layer.weights.len(), layer.bias.len());
        indices.extend((0..per_layer.min(nw)).map(|_| offset + rng.random_range(0..nw)));
        indices.extend((0..per_layer.min(nb)).map(|_| offset + nw + rng.random_range(0..nb)));
        offset += nw + nb;
    }
    let mut probe = net.clone();
    for i in indices {
        let orig = *probe.param_mut(i);
        *probe.param_mut(i) = orig + eps;
        let fp = f(&probe, &x);
        *probe.param_mut(i) = orig - eps;
        let fm = f(&probe, &x);
        *probe.param_mut(i) = orig;
        worst = worst.max(rel_err(flat[i], (fp - fm) / (2.0 * eps)));
    }
    worst
}

/// Count slot values in an `archive_history.csv` that got worse from one
/// episode to the next. Returns (violations, episodes).
pub fn archive_regressions(path: &std::path::Path) -> (usize, usize) {
    use gamma_ddpg::harness::StrategyArchive;
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), StrategyArchive::history_header());
    let higher: Vec<bool> = StrategyArchive::new().slots().iter().map(|s| s.criterion.higher_is_better()).collect();
    let mut prev: Option<Vec<f64>> = None;
    let (mut bad, mut episodes) = (0, 0);
    for line in lines {
        let vals: Vec<f64> = line.split(',').skip(1).map(|v| v.parse().unwrap()).collect();
        assert_eq!(vals.len(), higher.len());
        if let Some(p) = &prev {
            for ((now, before), up) in vals.iter().zip(p).zip(&higher) {
                if (*up && now < before) || (!*up && now > before) {
                    bad += 1;
                }
            }
        }
        prev = Some(vals);
        episodes += 1;
    }
    (bad, episodes)
}

/// Every logged discount from a `discounts.jsonl`.
pub fn logged_gammas(path: &std::path::Path) -> Vec<f64> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<gamma_ddpg::divergence::DiscountRecord>(l).unwrap().gamma)
        .collect()
}
