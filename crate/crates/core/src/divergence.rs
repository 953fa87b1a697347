//! Joint state-action chains, their divergences, and the dynamic discount.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridworld::{Action, GridSpec, TransitionTensor};
use crate::victim::PolicyEstimate;

const STOCHASTIC_TOL: f64 = 1e-9;
pub const KLR_SMOOTHING: f64 = 1e-6;
const STATIONARY_RESIDUAL: f64 = 1e-10;
const STATIONARY_MAX_ITERS: usize = 10_000;

/// Markov chain over joint `(cell, action)` states, indexed `cell * 4 + action`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointChain {
    p: Array2<f64>,
    q0: Array1<f64>,
}

fn check_distribution(v: &[f64], what: &str) -> Result<()> {
    if v.iter().any(|x| !x.is_finite() || *x < -STOCHASTIC_TOL) {
        return Err(Error::InvalidDistribution(format!("{what} has a negative or non-finite entry")));
    }
    let sum: f64 = v.iter().sum();
    if (sum - 1.0).abs() > STOCHASTIC_TOL {
        return Err(Error::InvalidDistribution(format!("{what} sums to {sum}")));
    }
    Ok(())
}

impl JointChain {
    /// Any row-stochastic matrix with an initial distribution.
    pub fn from_matrix(p: Array2<f64>, q0: Vec<f64>) -> Result<JointChain> {
        if !p.is_square() || p.nrows() != q0.len() {
            return Err(Error::DimensionMismatch { expected: p.nrows(), got: q0.len() });
        }
        for (i, row) in p.rows().into_iter().enumerate() {
            check_distribution(row.as_slice().expect("standard layout"), &format!("row {i}"))?;
        }
        check_distribution(&q0, "initial distribution")?;
        Ok(JointChain { p, q0: Array1::from(q0) })
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.p
    }

    pub fn initial(&self) -> &[f64] {
        self.q0.as_slice().expect("contiguous")
    }

    pub fn len(&self) -> usize {
        self.q0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q0.is_empty()
    }
}

/// `P[(s,a)][(s',a')] = T(s'|s,a) * pi(a'|s')` and `q0(s,a) = q0(s) * pi(a|s)`.
pub fn build_joint_chain(t: &TransitionTensor, pi: &PolicyEstimate, q0: &[f64]) -> Result<JointChain> {
    let m = t.cells();
    if pi.cells() != m {
        return Err(Error::DimensionMismatch { expected: m, got: pi.cells() });
    }
    if q0.len() != m {
        return Err(Error::DimensionMismatch { expected: m, got: q0.len() });
    }
    check_distribution(q0, "initial cell distribution")?;
    for s in 0..m {
        check_distribution(pi.row(s), &format!("policy row {s}"))?;
        for a in 0..Action::COUNT {
            check_distribution(t.row(s, a), &format!("transition row ({s},{a})"))?;
        }
    }
    let n = m * Action::COUNT;
    let mut p = Array2::zeros((n, n));
    for s in 0..m {
        for a in 0..Action::COUNT {
            let mut row = p.row_mut(s * Action::COUNT + a);
            for (next, &tp) in t.row(s, a).iter().enumerate() {
                if tp == 0.0 {
                    continue;
                }
                for (a2, &pp) in pi.row(next).iter().enumerate() {
                    row[next * Action::COUNT + a2] = tp * pp;
                }
            }
        }
    }
    let q0_joint = (0..n).map(|x| q0[x / Action::COUNT] * pi.row(x / Action::COUNT)[x % Action::COUNT]).collect();
    Ok(JointChain { p, q0: Array1::from_vec(q0_joint) })
}

/// `q0 * P^k`.
pub fn kstep_distribution(chain: &JointChain, k: usize) -> Vec<f64> {
    let mut q = chain.q0.clone();
    for _ in 0..k {
        q = q.dot(&chain.p);
    }
    q.to_vec()
}

/// Normalised cell distance plus an action-mismatch indicator.
pub fn ground_metric(spec: &GridSpec, x: usize, y: usize) -> f64 {
    let (cx, ax) = (x / Action::COUNT, x % Action::COUNT);
    let (cy, ay) = (y / Action::COUNT, y % Action::COUNT);
    let diameter = spec.diameter().max(1) as f64;
    spec.manhattan(cx, cy) as f64 / diameter + if ax == ay { 0.0 } else { 1.0 }
}

/// Exact Wasserstein-1 distance between `p` and `q` under `cost`.
///
/// Solves the transportation problem on the two supports by successive
/// shortest paths with node potentials.
pub fn wasserstein1<F: Fn(usize, usize) -> f64>(p: &[f64], q: &[f64], cost: F) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch { expected: p.len(), got: q.len() });
    }
    check_distribution(p, "p")?;
    check_distribution(q, "q")?;
    let src: Vec<usize> = (0..p.len()).filter(|&i| p[i] > 0.0).collect();
    let dst: Vec<usize> = (0..q.len()).filter(|&j| q[j] > 0.0).collect();
    let c: Vec<Vec<f64>> = src.iter().map(|&i| dst.iter().map(|&j| cost(i, j)).collect()).collect();
    let supply: Vec<f64> = src.iter().map(|&i| p[i]).collect();
    let demand: Vec<f64> = dst.iter().map(|&j| q[j]).collect();
    Ok(transport(&c, supply, demand))
}

/// Minimum-cost transport for a dense nonnegative cost matrix.
fn transport(c: &[Vec<f64>], mut supply: Vec<f64>, mut demand: Vec<f64>) -> f64 {
    let n = supply.len();
    let m = demand.len();
    let nodes = n + m;
    let mut flow = vec![vec![0.0f64; m]; n];
    let mut pot = vec![0.0f64; nodes];
    let mut dist = vec![0.0f64; nodes];
    let mut prev = vec![usize::MAX; nodes];
    let mut done = vec![false; nodes];
    // each augmentation zeroes a supply, a demand, or a reverse arc, so this
    // bound is never reached on well-formed input
    for _ in 0..(4 * n * m + nodes) {
        if !supply.iter().any(|&s| s > 0.0) || !demand.iter().any(|&d| d > 0.0) {
            break;
        }
        dist.fill(f64::INFINITY);
        prev.fill(usize::MAX);
        done.fill(false);
        for i in 0..n {
            if supply[i] > 0.0 {
                dist[i] = 0.0;
            }
        }
        loop {
            let mut u = usize::MAX;
            let mut best = f64::INFINITY;
            for v in 0..nodes {
                if !done[v] && dist[v] < best {
                    best = dist[v];
                    u = v;
                }
            }
            if u == usize::MAX {
                break;
            }
            done[u] = true;
            if u < n {
                for j in 0..m {
                    let v = n + j;
                    let nd = dist[u] + (c[u][j] + pot[u] - pot[v]).max(0.0);
                    if nd < dist[v] {
                        dist[v] = nd;
                        prev[v] = u;
                    }
                }
            } else {
                let j = u - n;
                for i in 0..n {
                    if flow[i][j] > 0.0 {
                        let nd = dist[u] + (pot[u] - pot[i] - c[i][j]).max(0.0);
                        if nd < dist[i] {
                            dist[i] = nd;
                            prev[i] = u;
                        }
                    }
                }
            }
        }
        let Some(sink) = (0..m)
            .filter(|&j| demand[j] > 0.0 && dist[n + j].is_finite())
            .min_by(|&a, &b| dist[n + a].total_cmp(&dist[n + b]))
        else {
            break;
        };
        let reach = dist[n + sink];
        for v in 0..nodes {
            pot[v] += dist[v].min(reach);
        }
        // walk back to the source, collecting the bottleneck
        let mut delta = demand[sink];
        let mut v = n + sink;
        loop {
            let u = prev[v];
            if u == usize::MAX {
                delta = delta.min(supply[v]);
                break;
            }
            if u >= n {
                delta = delta.min(flow[v][u - n]);
            }
            v = u;
        }
        let source = v;
        let mut v = n + sink;
        while prev[v] != usize::MAX {
            let u = prev[v];
            if u < n {
                flow[u][v - n] += delta;
            } else {
                let f = &mut flow[v][u - n];
                *f = if *f == delta { 0.0 } else { *f - delta };
            }
            v = u;
        }
        supply[source] = if supply[source] == delta { 0.0 } else { supply[source] - delta };
        demand[sink] = if demand[sink] == delta { 0.0 } else { demand[sink] - delta };
    }
    flow.iter().zip(c).map(|(fr, cr)| fr.iter().zip(cr).map(|(f, c)| f * c).sum::<f64>()).sum()
}

fn smoothed(p: &Array2<f64>) -> Array2<f64> {
    let n = p.ncols() as f64;
    p.mapv(|x| (x + KLR_SMOOTHING) / (1.0 + n * KLR_SMOOTHING))
}

/// Stationary distribution of the smoothed chain by power iteration.
pub fn stationary_distribution(chain: &JointChain) -> Result<Vec<f64>> {
    let p = smoothed(&chain.p);
    let n = p.nrows();
    let mut mu = Array1::from_elem(n, 1.0 / n as f64);
    // Iterating with P^(2^j) instead of P: smoothing leaves a spectral gap
    // of order epsilon, far too slow for plain iteration.
    let mut step = p.clone();
    for _ in 0..STATIONARY_MAX_ITERS {
        mu = mu.dot(&step);
        mu /= mu.sum();
        let residual: f64 = mu.dot(&p).iter().zip(&mu).map(|(a, b)| (a - b).abs()).sum();
        if residual < STATIONARY_RESIDUAL {
            return Ok(mu.to_vec());
        }
        step = step.dot(&step);
        for mut row in step.rows_mut() {
            let total = row.sum();
            row /= total;
        }
    }
    Err(Error::NoConvergence(STATIONARY_MAX_ITERS))
}

/// KL divergence rate of `chain1` from `chain2`.
pub fn klr(chain1: &JointChain, chain2: &JointChain) -> Result<f64> {
    if chain1.len() != chain2.len() {
        return Err(Error::DimensionMismatch { expected: chain1.len(), got: chain2.len() });
    }
    let mu = stationary_distribution(chain1)?;
    let mut total = 0.0;
    for ((w, r1), r2) in mu.iter().zip(chain1.p.rows()).zip(chain2.p.rows()) {
        let row: f64 = r1
            .iter()
            .zip(r2.iter())
            .filter(|(a, _)| **a > 0.0)
            .map(|(a, b)| a * ((a + KLR_SMOOTHING) / (b + KLR_SMOOTHING)).ln())
            .sum();
        total += w * row;
    }
    Ok(total)
}

/// W1 between the k-step distributions of two chains.
pub fn kstep_wasserstein(spec: &GridSpec, chain1: &JointChain, chain2: &JointChain, k: usize) -> Result<f64> {
    let p = kstep_distribution(chain1, k);
    let q = kstep_distribution(chain2, k);
    wasserstein1(&p, &q, |x, y| ground_metric(spec, x, y))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Variant {
    Wd,
    Klr,
    TargetWd,
    TargetKlr,
    Fixed(f64),
}

impl Variant {
    pub fn is_klr(self) -> bool {
        matches!(self, Variant::Klr | Variant::TargetKlr)
    }

    pub fn is_wd(self) -> bool {
        matches!(self, Variant::Wd | Variant::TargetWd)
    }

    /// Bounds used when a config does not set them.
    pub fn default_bounds(self) -> (f64, f64) {
        match self {
            Variant::Klr | Variant::TargetKlr => (0.90, 0.99),
            Variant::Wd | Variant::TargetWd => (0.80, 0.99),
            Variant::Fixed(g) => (g, g),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Wd => f.write_str("wd"),
            Variant::Klr => f.write_str("klr"),
            Variant::TargetWd => f.write_str("targetwd"),
            Variant::TargetKlr => f.write_str("targetklr"),
            Variant::Fixed(g) => write!(f, "fixed:{g}"),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "wd" => Ok(Variant::Wd),
            "klr" => Ok(Variant::Klr),
            "targetwd" => Ok(Variant::TargetWd),
            "targetklr" => Ok(Variant::TargetKlr),
            other => {
                let g = other
                    .strip_prefix("fixed:")
                    .and_then(|g| g.parse::<f64>().ok())
                    .ok_or_else(|| Error::Config(format!("unknown discount variant {s:?}")))?;
                if !(g > 0.0 && g < 1.0) {
                    return Err(Error::Config(format!("fixed discount {g} not in (0,1)")));
                }
                Ok(Variant::Fixed(g))
            }
        }
    }
}

impl Serialize for Variant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscountConfig {
    pub variant: Variant,
    pub k: usize,
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub squash_scale: f64,
}

impl DiscountConfig {
    pub fn new(variant: Variant) -> Self {
        let (gamma_min, gamma_max) = variant.default_bounds();
        DiscountConfig { variant, k: 5, gamma_min, gamma_max, squash_scale: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if let Variant::Fixed(g) = self.variant {
            if !(g > 0.0 && g < 1.0) {
                return Err(Error::Config(format!("fixed discount {g} not in (0,1)")));
            }
            return Ok(());
        }
        if !(0.5 < self.gamma_min && self.gamma_min < self.gamma_max && self.gamma_max < 1.0) {
            return Err(Error::Config(format!("need 0.5 < gamma_min < gamma_max < 1, got [{}, {}]", self.gamma_min, self.gamma_max)));
        }
        if !(self.squash_scale > 0.0) {
            return Err(Error::Config("squash_scale must be positive".into()));
        }
        Ok(())
    }

    /// Map a raw divergence into `[gamma_min, gamma_max]`.
    pub fn squash(&self, raw: f64) -> f64 {
        if let Variant::Fixed(g) = self.variant {
            return g;
        }
        // smoothed KLR can dip a hair below zero
        let d = raw.max(0.0);
        let frac = if d.is_infinite() { 1.0 } else { d / (d + self.squash_scale) };
        (self.gamma_min + (self.gamma_max - self.gamma_min) * frac).clamp(self.gamma_min, self.gamma_max)
    }
}

impl Default for DiscountConfig {
    fn default() -> Self {
        DiscountConfig::new(Variant::Wd)
    }
}

/// Everything the divergences are computed from.
#[derive(Debug, Clone, Copy)]
pub struct ChainInputs<'a> {
    pub spec: &'a GridSpec,
    pub t_current: &'a TransitionTensor,
    pub t_default: &'a TransitionTensor,
    pub policy: &'a PolicyEstimate,
    pub target_policy: &'a PolicyEstimate,
    pub q0: &'a [f64],
}

/// The six raw divergences tracked per attack step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Divergences {
    pub klr: f64,
    pub target_klr: f64,
    pub default_klr: f64,
    pub wd: f64,
    pub target_wd: f64,
    pub default_wd: f64,
}

impl Divergences {
    pub fn raw(&self, variant: Variant) -> f64 {
        match variant {
            Variant::Wd => self.wd,
            Variant::Klr => self.klr,
            Variant::TargetWd => self.target_wd,
            Variant::TargetKlr => self.target_klr,
            Variant::Fixed(_) => 0.0,
        }
    }
}

/// Vanilla-current, target-current and default-current chains, each against
/// the perfect chain.
pub fn all_divergences(inputs: &ChainInputs, k: usize) -> Result<Divergences> {
    let vanilla = build_joint_chain(inputs.t_current, inputs.policy, inputs.q0)?;
    let target = build_joint_chain(inputs.t_current, inputs.target_policy, inputs.q0)?;
    let default = build_joint_chain(inputs.t_default, inputs.policy, inputs.q0)?;
    let perfect = build_joint_chain(inputs.t_default, inputs.target_policy, inputs.q0)?;
    let spec = inputs.spec;
    Ok(Divergences {
        klr: klr(&vanilla, &perfect)?,
        target_klr: klr(&target, &perfect)?,
        default_klr: klr(&default, &perfect)?,
        wd: kstep_wasserstein(spec, &vanilla, &perfect, k)?,
        target_wd: kstep_wasserstein(spec, &target, &perfect, k)?,
        default_wd: kstep_wasserstein(spec, &default, &perfect, k)?,
    })
}

/// Raw divergence for the configured variant and the discount it maps to.
pub fn dynamic_discount(cfg: &DiscountConfig, inputs: &ChainInputs) -> Result<(f64, f64)> {
    let current = match cfg.variant {
        Variant::Fixed(g) => return Ok((0.0, g)),
        Variant::Wd | Variant::Klr => inputs.policy,
        Variant::TargetWd | Variant::TargetKlr => inputs.target_policy,
    };
    let a = build_joint_chain(inputs.t_current, current, inputs.q0)?;
    let b = build_joint_chain(inputs.t_default, inputs.target_policy, inputs.q0)?;
    let raw = if cfg.variant.is_klr() { klr(&a, &b)? } else { kstep_wasserstein(inputs.spec, &a, &b, cfg.k)? };
    Ok((raw, cfg.squash(raw)))
}

/// Debug record written once per attack step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscountRecord {
    pub variant: Variant,
    pub raw_divergence: f64,
    pub gamma: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::{default_env, GridWorld};
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rows<R: Rng>(rng: &mut R, n: usize) -> Vec<[f64; 4]> {
        (0..n)
            .map(|_| {
                let r: [f64; 4] = std::array::from_fn(|_| rng.random::<f64>() + 1e-3);
                let s: f64 = r.iter().sum();
                r.map(|x| x / s)
            })
            .collect()
    }

    fn point_mass(n: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        v[i] = 1.0;
        v
    }

    fn random_chain<R: Rng>(rng: &mut R, n: usize) -> JointChain {
        let mut p = Array2::zeros((n, n));
        for mut row in p.rows_mut() {
            row.mapv_inplace(|_| rng.random::<f64>());
            let s = row.sum();
            row /= s;
        }
        JointChain::from_matrix(p, vec![1.0 / n as f64; n]).unwrap()
    }

    #[test]
    fn joint_chain_rows_are_stochastic() {
        let world = default_env();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pi = PolicyEstimate::from_rows(random_rows(&mut rng, 16));
        let chain = build_joint_chain(world.transition_tensor(), &pi, &point_mass(16, 1)).unwrap();
        for row in chain.matrix().rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
        assert!((chain.initial().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn deterministic_inputs_give_one_unit_entry_per_row() {
        // 2 cells; every action moves to the other cell
        let mut t = vec![0.0; 2 * 4 * 2];
        for s in 0..2 {
            for a in 0..4 {
                t[(s * 4 + a) * 2 + (1 - s)] = 1.0;
            }
        }
        let t = TransitionTensor::from_raw(2, t).unwrap();
        let pi = PolicyEstimate::from_rows(vec![[0.0, 0.0, 1.0, 0.0], [1.0, 0.0, 0.0, 0.0]]);
        let chain = build_joint_chain(&t, &pi, &[1.0, 0.0]).unwrap();
        for row in chain.matrix().rows() {
            assert_eq!(row.iter().filter(|&&x| x == 1.0).count(), 1);
            assert_eq!(row.iter().filter(|&&x| x == 0.0).count(), 7);
        }
    }

    #[test]
    fn two_cell_toy_matches_hand_multiplication() {
        // only North and South are used; East/West rows mirror them
        let mut t = vec![0.0; 2 * 4 * 2];
        let rows = [[0.7, 0.3], [0.2, 0.8], [0.7, 0.3], [0.2, 0.8], [0.4, 0.6], [1.0, 0.0], [0.4, 0.6], [1.0, 0.0]];
        for (i, r) in rows.iter().enumerate() {
            t[i * 2..i * 2 + 2].copy_from_slice(r);
        }
        let t = TransitionTensor::from_raw(2, t).unwrap();
        let pi = PolicyEstimate::from_rows(vec![[0.5, 0.5, 0.0, 0.0], [0.9, 0.1, 0.0, 0.0]]);
        let chain = build_joint_chain(&t, &pi, &[0.25, 0.75]).unwrap();
        let p = chain.matrix();
        // (cell 0, N) -> (cell 0, S): 0.7 * 0.5
        assert!((p[[0, 1]] - 0.35).abs() < 1e-15);
        // (cell 0, S) -> (cell 1, N): 0.8 * 0.9
        assert!((p[[1, 4]] - 0.72).abs() < 1e-15);
        // (cell 1, N) -> (cell 1, S): 0.6 * 0.1
        assert!((p[[4, 5]] - 0.06).abs() < 1e-15);
        // (cell 1, S) -> (cell 0, N): 1.0 * 0.5
        assert!((p[[5, 0]] - 0.5).abs() < 1e-15);
        assert_eq!(p[[5, 4]], 0.0);
        assert!((chain.initial()[4] - 0.675).abs() < 1e-15);
        assert!((chain.initial()[1] - 0.125).abs() < 1e-15);
    }

    #[test]
    fn non_stochastic_rows_rejected() {
        let t = TransitionTensor::from_raw(1, vec![1.0, 1.0, 1.0, 0.5]).unwrap();
        let pi = PolicyEstimate::from_rows(vec![[0.25; 4]]);
        assert!(matches!(build_joint_chain(&t, &pi, &[1.0]), Err(Error::InvalidDistribution(_))));
        let t = TransitionTensor::from_raw(1, vec![1.0; 4]).unwrap();
        let bad = PolicyEstimate::from_rows(vec![[0.5; 4]]);
        assert!(build_joint_chain(&t, &bad, &[1.0]).is_err());
    }

    #[test]
    fn kstep_cases() {
        let p = array![[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [1.0, 0.0, 0.0]];
        let chain = JointChain::from_matrix(p.clone(), vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(kstep_distribution(&chain, 0), vec![1.0, 0.0, 0.0]);
        // row 0 of P^2 by hand: (0.25, 0.5, 0.25)
        let q2 = kstep_distribution(&chain, 2);
        let expected = p.dot(&p).row(0).to_vec();
        for (a, b) in q2.iter().zip([0.25, 0.5, 0.25]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(q2, expected);

        let ds = array![[0.2, 0.3, 0.5], [0.5, 0.2, 0.3], [0.3, 0.5, 0.2]];
        let chain = JointChain::from_matrix(ds, vec![1.0 / 3.0; 3]).unwrap();
        for k in 0..6 {
            assert!(kstep_distribution(&chain, k).iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-12));
        }
    }

    #[test]
    fn ground_metric_cases() {
        let spec = GridSpec::default();
        assert_eq!(ground_metric(&spec, 5, 5), 0.0);
        assert_eq!(ground_metric(&spec, 4 * 3, 4 * 3 + 2), 1.0);
        // cell 0 to cell 15 is the full diameter
        assert_eq!(ground_metric(&spec, 0, 15 * 4), 1.0);
        assert_eq!(ground_metric(&spec, 1, 15 * 4), 2.0);
    }

    #[test]
    fn wasserstein_cases() {
        let spec = GridSpec::default();
        let d = |x: usize, y: usize| ground_metric(&spec, x, y);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p: Vec<f64> = {
            let v: Vec<f64> = (0..64).map(|_| rng.random::<f64>()).collect();
            let s: f64 = v.iter().sum();
            v.iter().map(|x| x / s).collect()
        };
        assert_eq!(wasserstein1(&p, &p, d).unwrap(), 0.0);
        let w = wasserstein1(&point_mass(64, 3), &point_mass(64, 41), d).unwrap();
        assert!((w - ground_metric(&spec, 3, 41)).abs() < 1e-15);
        assert!(wasserstein1(&[0.5, 0.4], &[0.5, 0.5], d).is_err());
        assert!(wasserstein1(&[1.0], &[0.5, 0.5], d).is_err());
    }

    #[test]
    fn wasserstein_on_a_line_matches_cdf_formula() {
        // |i - j| cost on a line: W1 is the L1 distance between the CDFs
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let n = 8;
            let norm = |v: Vec<f64>| {
                let s: f64 = v.iter().sum();
                v.into_iter().map(|x| x / s).collect::<Vec<_>>()
            };
            let p = norm((0..n).map(|_| rng.random::<f64>()).collect());
            let mut q: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.5) { rng.random::<f64>() } else { 0.0 }).collect();
            q[n - 1] += 0.1;
            let q = norm(q);
            let (mut cp, mut cq, mut cdf) = (0.0, 0.0, 0.0);
            for i in 0..n - 1 {
                cp += p[i];
                cq += q[i];
                cdf += (cp - cq).abs();
            }
            let w = wasserstein1(&p, &q, |i, j| (i as f64 - j as f64).abs()).unwrap();
            assert!((w - cdf).abs() < 1e-12, "{w} vs {cdf}");
        }
    }

    #[test]
    fn klr_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_chain(&mut rng, 10);
        assert!(klr(&a, &a).unwrap().abs() < 1e-9);
        for _ in 0..100 {
            let a = random_chain(&mut rng, 6);
            let b = random_chain(&mut rng, 6);
            assert!(klr(&a, &b).unwrap() >= -1e-9);
        }
    }

    #[test]
    fn klr_two_state_hand_value() {
        let p1 = array![[0.9, 0.1], [0.4, 0.6]];
        let p2 = array![[0.5, 0.5], [0.5, 0.5]];
        let c1 = JointChain::from_matrix(p1, vec![0.5, 0.5]).unwrap();
        let c2 = JointChain::from_matrix(p2, vec![0.5, 0.5]).unwrap();
        // stationary of the unsmoothed chain: (0.8, 0.2)
        let e = KLR_SMOOTHING;
        let kl = |r: [f64; 2]| r.iter().map(|x| x * ((x + e) / (0.5 + e)).ln()).sum::<f64>();
        let expected = 0.8 * kl([0.9, 0.1]) + 0.2 * kl([0.4, 0.6]);
        assert!((klr(&c1, &c2).unwrap() - expected).abs() < 1e-6);
        let mu = stationary_distribution(&c1).unwrap();
        assert!((mu[0] - 0.8).abs() < 1e-5);
    }

    #[test]
    fn near_deterministic_chain_converges() {
        // two absorbing states plus a transient cycle: mixing time ~ 1/epsilon
        let n = 64;
        let mut p = Array2::zeros((n, n));
        p[[0, 0]] = 1.0;
        p[[1, 1]] = 1.0;
        for i in 2..n {
            p[[i, if i + 1 < n { i + 1 } else { 2 }]] = 1.0;
        }
        let mut q0 = vec![0.0; n];
        q0[0] = 1.0;
        let c = JointChain::from_matrix(p, q0).unwrap();
        let mu = stationary_distribution(&c).unwrap();
        let pm = smoothed(c.matrix());
        let next = Array1::from(mu.clone()).dot(&pm);
        let residual: f64 = next.iter().zip(&mu).map(|(a, b)| (a - b).abs()).sum();
        assert!(residual < 1e-10);
        assert!((mu[0] - mu[1]).abs() < 1e-9);
        assert!((mu.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // balance between the absorbing pair and the cycle gives 1/64 each
        assert!((mu[0] - 1.0 / 64.0).abs() < 1e-4);
    }

    #[test]
    fn periodic_chain_still_converges_when_smoothed() {
        let p = array![[0.0, 1.0], [1.0, 0.0]];
        let c = JointChain::from_matrix(p, vec![1.0, 0.0]).unwrap();
        let mu = stationary_distribution(&c).unwrap();
        assert!((mu[0] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("wd".parse::<Variant>().unwrap(), Variant::Wd);
        assert_eq!("TargetKLR".parse::<Variant>().unwrap(), Variant::TargetKlr);
        assert_eq!("fixed:0.85".parse::<Variant>().unwrap(), Variant::Fixed(0.85));
        assert!("fixed:1.5".parse::<Variant>().is_err());
        assert!("nope".parse::<Variant>().is_err());
        let cfg = DiscountConfig::new(Variant::Fixed(0.9));
        let json = serde_json::to_string(&cfg).unwrap();
        assert!(json.contains("\"fixed:0.9\""));
        assert_eq!(serde_json::from_str::<DiscountConfig>(&json).unwrap(), cfg);
    }

    #[test]
    fn squash_boundaries() {
        let klr_cfg = DiscountConfig::new(Variant::Klr);
        assert_eq!(klr_cfg.squash(0.0), 0.90);
        assert_eq!(klr_cfg.squash(-1e-8), 0.90);
        assert!(klr_cfg.squash(1e12) <= 0.99);
        assert_eq!(klr_cfg.squash(f64::INFINITY), 0.99);
        let wd_cfg = DiscountConfig::new(Variant::Wd);
        assert_eq!(wd_cfg.squash(0.0), 0.80);
        assert!((wd_cfg.squash(1.0) - 0.895).abs() < 1e-12);
        assert!(DiscountConfig { gamma_min: 0.95, gamma_max: 0.9, ..wd_cfg.clone() }.validate().is_err());
        assert!(DiscountConfig { gamma_min: 0.4, ..wd_cfg }.validate().is_err());
    }

    #[test]
    fn zero_divergence_gives_gamma_min() {
        let world = default_env();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pi = PolicyEstimate::from_rows(random_rows(&mut rng, 16));
        let t = world.transition_tensor();
        let q0 = point_mass(16, world.spec().start);
        let inputs = ChainInputs { spec: world.spec(), t_current: t, t_default: t, policy: &pi, target_policy: &pi, q0: &q0 };
        for v in [Variant::Wd, Variant::Klr, Variant::TargetWd, Variant::TargetKlr] {
            let cfg = DiscountConfig::new(v);
            let (raw, gamma) = dynamic_discount(&cfg, &inputs).unwrap();
            assert!(raw.abs() < 1e-9, "{v}: {raw}");
            assert_eq!(gamma, cfg.gamma_min);
        }
        let (raw, gamma) = dynamic_discount(&DiscountConfig::new(Variant::Fixed(0.85)), &inputs).unwrap();
        assert_eq!((raw, gamma), (0.0, 0.85));
    }

    #[test]
    fn target_variants_ignore_policy_when_world_is_default() {
        let world = default_env();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = world.transition_tensor();
        let q0 = point_mass(16, 1);
        for _ in 0..5 {
            let pi = PolicyEstimate::from_rows(random_rows(&mut rng, 16));
            let star = PolicyEstimate::from_rows(random_rows(&mut rng, 16));
            let inputs = ChainInputs { spec: world.spec(), t_current: t, t_default: t, policy: &pi, target_policy: &star, q0: &q0 };
            let d = all_divergences(&inputs, 5).unwrap();
            assert_eq!(d.target_wd, 0.0);
            assert!(d.target_klr.abs() < 1e-9);
            assert!(d.wd > 0.0 && d.klr > 0.0);
        }
    }

    #[test]
    fn attacked_world_moves_all_divergences() {
        let world = default_env();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let u: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let attacked = world.apply_attack(&u).unwrap();
        let pi = PolicyEstimate::from_rows(random_rows(&mut rng, 16));
        let star = PolicyEstimate::from_rows(random_rows(&mut rng, 16));
        let q0 = point_mass(16, 1);
        let inputs = ChainInputs {
            spec: world.spec(),
            t_current: attacked.transition_tensor(),
            t_default: world.transition_tensor(),
            policy: &pi,
            target_policy: &star,
            q0: &q0,
        };
        let d = all_divergences(&inputs, 5).unwrap();
        assert!(d.target_wd > 0.0 && d.target_klr > 0.0);
        for v in [Variant::Wd, Variant::Klr, Variant::TargetWd, Variant::TargetKlr] {
            let (raw, _) = dynamic_discount(&DiscountConfig::new(v), &inputs).unwrap();
            assert_eq!(raw, d.raw(v));
        }
        let _ = GridWorld::flat(GridSpec::default()).unwrap();
    }

    fn dist_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.0f64..1.0, n).prop_map(|v| {
            let v: Vec<f64> = v.iter().map(|x| if *x < 0.3 { 0.0 } else { *x }).collect();
            let s: f64 = v.iter().sum();
            if s == 0.0 {
                let mut p = vec![0.0; v.len()];
                p[0] = 1.0;
                p
            } else {
                v.iter().map(|x| x / s).collect()
            }
        })
    }

    proptest! {
        #[test]
        fn wasserstein_metric_axioms(p in dist_strategy(64), q in dist_strategy(64), r in dist_strategy(64)) {
            let spec = GridSpec::default();
            let d = |x: usize, y: usize| ground_metric(&spec, x, y);
            let pq = wasserstein1(&p, &q, d).unwrap();
            let qp = wasserstein1(&q, &p, d).unwrap();
            let pr = wasserstein1(&p, &r, d).unwrap();
            let rq = wasserstein1(&r, &q, d).unwrap();
            prop_assert!(pq >= 0.0);
            prop_assert!((pq - qp).abs() < 1e-8);
            prop_assert!(pq <= pr + rq + 1e-8);
        }

        #[test]
        fn wasserstein_lipschitz_in_total_variation(p in dist_strategy(32), q in dist_strategy(32), r in dist_strategy(32), t in 0.0f64..1.0) {
            // p' = (1-t) p + t r moves p by TV distance at most t * TV(p, r)
            let spec = GridSpec { width: 4, height: 2, goal: 6, ..GridSpec::default() };
            let d = |x: usize, y: usize| ground_metric(&spec, x, y);
            let moved: Vec<f64> = p.iter().zip(&r).map(|(a, b)| (1.0 - t) * a + t * b).collect();
            let tv: f64 = p.iter().zip(&moved).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0;
            let diff = (wasserstein1(&p, &q, d).unwrap() - wasserstein1(&moved, &q, d).unwrap()).abs();
            prop_assert!(diff <= tv * 2.0 + 1e-9);
        }

        #[test]
        fn squash_is_monotone_and_bounded(a in 0.0f64..1e6, b in 0.0f64..1e6) {
            for cfg in [DiscountConfig::new(Variant::Wd), DiscountConfig::new(Variant::Klr)] {
                let (ga, gb) = (cfg.squash(a), cfg.squash(b));
                prop_assert!(ga >= cfg.gamma_min && ga <= cfg.gamma_max);
                if a < b && b < 1e3 {
                    prop_assert!(ga < gb);
                }
            }
        }
    }
}
