//! DDPG attacker whose replay records carry their own discount.

use std::collections::VecDeque;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::approximator::{soft_update, Activation, Adam, Gradients, Mlp};
use crate::codec::{Latent, LATENT_DIM};
use crate::error::{Error, Result};
use crate::gridworld::GridSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackerParams {
    pub batch_size: usize,
    /// Target network update rate.
    pub rho: f64,
    pub noise_theta: f64,
    pub noise_sigma: f64,
    pub warmup_episodes: usize,
    pub buffer_capacity: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub hidden: [usize; 2],
}

impl Default for AttackerParams {
    fn default() -> Self {
        AttackerParams {
            batch_size: 64,
            rho: 0.005,
            noise_theta: 0.15,
            noise_sigma: 0.2,
            warmup_episodes: 30,
            buffer_capacity: 50_000,
            actor_lr: 1e-4,
            critic_lr: 1e-3,
            hidden: [400, 300],
        }
    }
}

impl AttackerParams {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.buffer_capacity == 0 {
            return Err(Error::Config("batch size and buffer capacity must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Config(format!("rho {} not in [0,1]", self.rho)));
        }
        Ok(())
    }
}

/// Attacker observation: world parameters plus latent behaviour.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackerState {
    pub altitudes: Vec<f64>,
    pub latent: Latent,
}

impl AttackerState {
    /// Altitudes rescaled from the grid bounds to `[-1, 1]`, then the latent.
    pub fn to_vec(&self, spec: &GridSpec) -> Vec<f64> {
        let (lo, hi) = spec.altitude_bounds;
        let mut v: Vec<f64> = self.altitudes.iter().map(|h| 2.0 * (h - lo) / (hi - lo) - 1.0).collect();
        v.extend(self.latent);
        v
    }

    pub fn dim(spec: &GridSpec) -> usize {
        spec.cells() + LATENT_DIM
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionRecord {
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub r: f64,
    pub x_next: Vec<f64>,
    pub gamma: f64,
    pub done: bool,
}

/// Mean-reverting temporally correlated noise, reset per episode.
#[derive(Debug, Clone)]
pub struct OuNoise {
    theta: f64,
    sigma: f64,
    state: Vec<f64>,
}

impl OuNoise {
    pub fn new(dim: usize, theta: f64, sigma: f64) -> Self {
        OuNoise { theta, sigma, state: vec![0.0; dim] }
    }

    pub fn reset(&mut self) {
        self.state.fill(0.0);
    }

    pub fn sample<R: Rng + ?Sized>(&mut self, rng: &mut R) -> &[f64] {
        for x in &mut self.state {
            let n: f64 = StandardNormal.sample(rng);
            *x += -self.theta * *x + self.sigma * n;
        }
        &self.state
    }
}

/// Actor output, plus noise when exploring, clamped into `[-1, 1]`.
pub fn select_action<R: Rng + ?Sized>(
    actor: &Mlp,
    x: &[f64],
    noise: &mut OuNoise,
    explore: bool,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut u = actor.forward(x)?;
    if explore {
        for (a, n) in u.iter_mut().zip(noise.sample(rng)) {
            *a = (*a + n).clamp(-1.0, 1.0);
        }
    }
    Ok(u)
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    records: VecDeque<TransitionRecord>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer { capacity, records: VecDeque::with_capacity(capacity.min(4096)) }
    }

    pub fn store(&mut self, rec: TransitionRecord) {
        if self.records.len() == self.capacity {
            self.records.pop_front();
        }
        self.records.push_back(rec);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &TransitionRecord> {
        self.records.iter()
    }

    /// `n` distinct records chosen uniformly.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<&TransitionRecord>> {
        if self.records.len() < n {
            return Err(Error::InsufficientBuffer { have: self.records.len(), need: n });
        }
        Ok(rand::seq::index::sample(rng, self.records.len(), n).into_iter().map(|i| &self.records[i]).collect())
    }
}

fn stack<'a, I: Iterator<Item = &'a [f64]>>(rows: I, n: usize, dim: usize) -> Array2<f64> {
    let mut out = Array2::zeros((n, dim));
    for (mut dst, src) in out.rows_mut().into_iter().zip(rows) {
        dst.assign(&ndarray::ArrayView1::from(src));
    }
    out
}

fn concat(x: ArrayView2<f64>, u: ArrayView2<f64>) -> Array2<f64> {
    ndarray::concatenate(Axis(1), &[x, u]).expect("same row count")
}

/// `y = r + gamma * Q'(x', actor'(x'))`, or `y = r` on terminal records, with
/// each record's own `gamma`.
pub fn bellman_targets(batch: &[&TransitionRecord], critic_target: &Mlp, actor_target: &Mlp) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Ok(Vec::new());
    }
    let dim = batch[0].x_next.len();
    let x_next = stack(batch.iter().map(|r| r.x_next.as_slice()), batch.len(), dim);
    let u_next = actor_target.forward_batch(x_next.view())?;
    let q_next = critic_target.forward_batch(concat(x_next.view(), u_next.view()).view())?;
    Ok(batch
        .iter()
        .zip(q_next.column(0))
        .map(|(rec, &q)| if rec.done { rec.r } else { rec.r + rec.gamma * q })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_objective: f64,
}

#[derive(Debug, Clone)]
pub struct Ddpg {
    pub actor: Mlp,
    pub critic: Mlp,
    pub actor_target: Mlp,
    pub critic_target: Mlp,
    actor_opt: Adam,
    critic_opt: Adam,
    pub params: AttackerParams,
}

impl Ddpg {
    pub fn new<R: Rng + ?Sized>(state_dim: usize, action_dim: usize, params: AttackerParams, rng: &mut R) -> Result<Ddpg> {
        params.validate()?;
        let [h1, h2] = params.hidden;
        let actor = Mlp::new(
            &[state_dim, h1, h2, action_dim],
            &[Activation::Relu, Activation::Relu, Activation::Tanh],
            rng,
        )?;
        let critic = Mlp::new(
            &[state_dim + action_dim, h1, h2, 1],
            &[Activation::Relu, Activation::Relu, Activation::Identity],
            rng,
        )?;
        Ok(Ddpg::from_networks(actor, critic, params))
    }

    /// Wraps existing networks; targets start as copies.
    pub fn from_networks(actor: Mlp, critic: Mlp, params: AttackerParams) -> Ddpg {
        Ddpg {
            actor_target: actor.clone(),
            critic_target: critic.clone(),
            actor_opt: Adam::new(&actor, params.actor_lr),
            critic_opt: Adam::new(&critic, params.critic_lr),
            actor,
            critic,
            params,
        }
    }

    /// Gradient of `mean_i Q(x_i, actor(x_i))` w.r.t. actor parameters.
    pub fn actor_gradient(&self, states: ArrayView2<f64>) -> Result<(Gradients, f64)> {
        let n = states.nrows() as f64;
        let actor_cache = self.actor.forward_cached(states)?;
        let u = actor_cache.output();
        let critic_in = concat(states, u.view());
        let critic_cache = self.critic.forward_cached(critic_in.view())?;
        let objective = critic_cache.output().sum() / n;
        let upstream = Array2::from_elem((states.nrows(), 1), 1.0 / n);
        let (_, dinput) = self.critic.backward(&critic_cache, upstream.view())?;
        let du = dinput.slice(s![.., states.ncols()..]);
        let (grads, _) = self.actor.backward(&actor_cache, du)?;
        Ok((grads, objective))
    }

    /// Critic regression, actor ascent, then target soft updates.
    pub fn update<R: Rng + ?Sized>(&mut self, buffer: &ReplayBuffer, rng: &mut R) -> Result<UpdateStats> {
        let n = self.params.batch_size;
        let batch = buffer.sample(n, rng)?;
        let y = bellman_targets(&batch, &self.critic_target, &self.actor_target)?;
        let sdim = batch[0].x.len();
        let adim = batch[0].u.len();
        let x = stack(batch.iter().map(|r| r.x.as_slice()), n, sdim);
        let u = stack(batch.iter().map(|r| r.u.as_slice()), n, adim);

        let cache = self.critic.forward_cached(concat(x.view(), u.view()).view())?;
        let q = cache.output().column(0).to_owned();
        let mut upstream = Array2::zeros((n, 1));
        let mut loss = 0.0;
        for i in 0..n {
            let diff = q[i] - y[i];
            loss += diff * diff;
            upstream[[i, 0]] = 2.0 * diff / n as f64;
        }
        let (critic_grads, _) = self.critic.backward(&cache, upstream.view())?;
        self.critic_opt.step(&mut self.critic, &critic_grads)?;

        let (mut actor_grads, objective) = self.actor_gradient(x.view())?;
        actor_grads.scale(-1.0);
        self.actor_opt.step(&mut self.actor, &actor_grads)?;

        soft_update(&mut self.critic_target, &self.critic, self.params.rho)?;
        soft_update(&mut self.actor_target, &self.actor, self.params.rho)?;
        Ok(UpdateStats { critic_loss: loss / n as f64, actor_objective: objective })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approximator::tests::rel_err;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn record(r: f64, gamma: f64, done: bool, x_next: Vec<f64>) -> TransitionRecord {
        TransitionRecord { x: vec![0.0; 3], u: vec![0.0; 2], r, x_next, gamma, done }
    }

    /// Critic whose output is the constant `c` (zero final weights, bias `c`).
    fn constant_critic(rng: &mut ChaCha8Rng, c: f64) -> Mlp {
        let mut critic = Mlp::new(&[5, 4, 1], &[Activation::Relu, Activation::Identity], rng).unwrap();
        let last = critic.layers_mut().last_mut().unwrap();
        last.weights.fill(0.0);
        last.bias.fill(c);
        critic
    }

    fn tiny_actor(rng: &mut ChaCha8Rng) -> Mlp {
        Mlp::new(&[3, 4, 2], &[Activation::Relu, Activation::Tanh], rng).unwrap()
    }

    #[test]
    fn deterministic_selection_and_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let actor = tiny_actor(&mut rng);
        let x = [0.3, -0.2, 0.9];
        let mut noise = OuNoise::new(2, 0.15, 0.2);
        let a = select_action(&actor, &x, &mut noise, false, &mut rng).unwrap();
        assert_eq!(a, actor.forward(&x).unwrap());
        let mut loud = OuNoise::new(2, 0.15, 5.0);
        for _ in 0..200 {
            let u = select_action(&actor, &x, &mut loud, true, &mut rng).unwrap();
            assert!(u.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        let zero = Mlp::zeros(&[3, 4, 2], &[Activation::Relu, Activation::Tanh]).unwrap();
        assert_eq!(select_action(&zero, &x, &mut noise, false, &mut rng).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn noise_is_correlated_and_resets() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut noise = OuNoise::new(1, 0.15, 0.2);
        let xs: Vec<f64> = (0..5000).map(|_| noise.sample(&mut rng)[0]).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        let cov = xs.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum::<f64>() / (xs.len() - 1) as f64;
        // lag-1 autocorrelation of the discrete process is 1 - theta
        assert!((cov / var - 0.85).abs() < 0.05);
        noise.reset();
        assert_eq!(noise.state, vec![0.0]);
    }

    #[test]
    fn buffer_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut buf = ReplayBuffer::new(2);
        assert!(matches!(buf.sample(1, &mut rng), Err(Error::InsufficientBuffer { have: 0, need: 1 })));
        buf.store(record(0.1, 0.83, false, vec![0.0; 3]));
        assert_eq!(buf.sample(1, &mut rng).unwrap()[0].gamma, 0.83);
        buf.store(record(0.2, 0.9, false, vec![0.0; 3]));
        buf.store(record(0.3, 0.9, false, vec![0.0; 3]));
        assert_eq!(buf.len(), 2);
        assert!(buf.iter().all(|r| r.r != 0.1));
    }

    #[test]
    fn sampling_is_without_replacement_and_seeded() {
        let mut buf = ReplayBuffer::new(100);
        for i in 0..100 {
            buf.store(record(i as f64, 0.9, false, vec![0.0; 3]));
        }
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            buf.sample(64, &mut rng).unwrap().iter().map(|r| r.r as usize).collect::<Vec<_>>()
        };
        let a = draw(7);
        assert_eq!(a, draw(7));
        let mut sorted = a.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 64);
    }

    #[test]
    fn bellman_target_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let actor = tiny_actor(&mut rng);
        let critic = constant_critic(&mut rng, 2.0);
        let live = record(0.5, 0.9, false, vec![0.1, 0.2, 0.3]);
        let terminal = record(1.0, 0.9, true, vec![0.1, 0.2, 0.3]);
        let y = bellman_targets(&[&live, &terminal], &critic, &actor).unwrap();
        assert!((y[0] - 2.3).abs() < 1e-15);
        assert_eq!(y[1], 1.0);
    }

    #[test]
    fn per_record_gamma_is_honoured() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let actor = tiny_actor(&mut rng);
        let critic = Mlp::new(&[5, 6, 1], &[Activation::Relu, Activation::Identity], &mut rng).unwrap();
        let gammas = [0.80, 0.85, 0.90, 0.99];
        let recs: Vec<TransitionRecord> = gammas
            .iter()
            .enumerate()
            .map(|(i, &g)| record(0.1 * i as f64, g, false, vec![0.2 * i as f64, -0.1, 0.4]))
            .collect();
        let refs: Vec<&TransitionRecord> = recs.iter().collect();
        let y = bellman_targets(&refs, &critic, &actor).unwrap();
        for (rec, yi) in recs.iter().zip(&y) {
            let mut input = rec.x_next.clone();
            input.extend(actor.forward(&rec.x_next).unwrap());
            let q = critic.forward(&input).unwrap()[0];
            assert_eq!(*yi, rec.r + rec.gamma * q);
        }
        let lo = record(0.3, 0.80, false, vec![0.5, 0.5, 0.5]);
        let hi = record(0.3, 0.99, false, vec![0.5, 0.5, 0.5]);
        let y = bellman_targets(&[&lo, &hi], &critic, &actor).unwrap();
        let mut input = lo.x_next.clone();
        input.extend(actor.forward(&lo.x_next).unwrap());
        let q = critic.forward(&input).unwrap()[0];
        assert!((y[1] - y[0] - 0.19 * q).abs() < 1e-12);
    }

    #[test]
    fn zero_loss_batch_leaves_critic_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let actor = tiny_actor(&mut rng);
        let critic = constant_critic(&mut rng, 0.0);
        let params = AttackerParams { batch_size: 4, ..AttackerParams::default() };
        let mut ddpg = Ddpg::from_networks(actor, critic, params);
        let mut buf = ReplayBuffer::new(10);
        for i in 0..6 {
            let mut rec = record(0.0, 0.9, i % 2 == 0, vec![0.1 * i as f64, 0.0, 1.0]);
            rec.u = vec![0.5, -0.5];
            buf.store(rec);
        }
        let before = ddpg.critic.clone();
        let stats = ddpg.update(&buf, &mut rng).unwrap();
        assert_eq!(stats.critic_loss, 0.0);
        assert_eq!(ddpg.critic, before);
    }

    #[test]
    fn actor_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let actor = tiny_actor(&mut rng);
        let critic = Mlp::new(&[5, 6, 1], &[Activation::Tanh, Activation::Identity], &mut rng).unwrap();
        let ddpg = Ddpg::from_networks(actor, critic, AttackerParams::default());
        let states = Array2::from_shape_fn((5, 3), |_| rng.random_range(-1.0..1.0));
        let (grads, _) = ddpg.actor_gradient(states.view()).unwrap();
        let flat = grads.flatten();
        let objective = |net: &Mlp| {
            let u = net.forward_batch(states.view()).unwrap();
            ddpg.critic.forward_batch(concat(states.view(), u.view()).view()).unwrap().mean().unwrap()
        };
        let mut probe = ddpg.actor.clone();
        let eps = 1e-5;
        for i in 0..probe.param_count() {
            let orig = *probe.param_mut(i);
            *probe.param_mut(i) = orig + eps;
            let fp = objective(&probe);
            *probe.param_mut(i) = orig - eps;
            let fm = objective(&probe);
            *probe.param_mut(i) = orig;
            let fd = (fp - fm) / (2.0 * eps);
            assert!(rel_err(flat[i], fd) < 1e-3, "param {i}: {} vs {fd}", flat[i]);
        }
    }

    #[test]
    fn update_moves_targets_by_rho() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = AttackerParams { batch_size: 8, hidden: [6, 5], ..AttackerParams::default() };
        let mut ddpg = Ddpg::new(3, 2, params, &mut rng).unwrap();
        let mut buf = ReplayBuffer::new(100);
        for _ in 0..20 {
            buf.store(TransitionRecord {
                x: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
                u: (0..2).map(|_| rng.random_range(-1.0..1.0)).collect(),
                r: rng.random(),
                x_next: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
                gamma: 0.9,
                done: false,
            });
        }
        let old_target = ddpg.critic_target.clone();
        ddpg.update(&buf, &mut rng).unwrap();
        let rho = ddpg.params.rho;
        for ((t, o), s) in ddpg
            .critic_target
            .flat_params()
            .iter()
            .zip(old_target.flat_params())
            .zip(ddpg.critic.flat_params())
        {
            assert!((t - (rho * s + (1.0 - rho) * o)).abs() < 1e-15);
        }
        let small = ReplayBuffer::new(4);
        assert!(matches!(ddpg.update(&small, &mut rng), Err(Error::InsufficientBuffer { .. })));
    }

    #[test]
    fn state_vector_layout() {
        let spec = GridSpec::default();
        let st = AttackerState { altitudes: vec![2.5; 16], latent: [1.0, 2.0, 3.0, 4.0, 5.0] };
        let v = st.to_vec(&spec);
        assert_eq!(v.len(), AttackerState::dim(&spec));
        assert_eq!(v.len(), 21);
        assert!(v[..16].iter().all(|&h| h == 0.0));
        assert_eq!(&v[16..], &[1.0, 2.0, 3.0, 4.0, 5.0]);
    }
}
