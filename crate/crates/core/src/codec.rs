//! Auto-encoder from behaviour traces to a 5-d latent behaviour.

use std::path::Path;

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::approximator::{Activation, Adam, Mlp};
use crate::error::{Error, Result};
use crate::gridworld::{Action, GridSpec, GridWorld};
use crate::victim::{train_episodes, BehaviorTrace, QTable, VictimParams};

pub const LATENT_DIM: usize = 5;
const STATE_FEATURES: usize = 2;
const HIDDEN: usize = 36;

pub type Latent = [f64; LATENT_DIM];

/// Numeric code per trace symbol; unvisited states map to zero.
pub fn symbol_code(a: Option<Action>) -> f64 {
    match a {
        Some(Action::North) => 0.2,
        Some(Action::South) => 0.4,
        Some(Action::East) => 0.6,
        Some(Action::West) => 0.8,
        None => 0.0,
    }
}

pub fn trace_to_vector(trace: &BehaviorTrace) -> Vec<f64> {
    trace.symbols().iter().map(|&a| symbol_code(a)).collect()
}

/// `(row / (height - 1), col / (width - 1))`.
pub fn state_features(spec: &GridSpec, s: usize) -> [f64; STATE_FEATURES] {
    let (r, c) = spec.coords(s);
    let norm = |v: usize, n: usize| if n > 1 { v as f64 / (n - 1) as f64 } else { 0.0 };
    [norm(r, spec.height), norm(c, spec.width)]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    latent_dim: usize,
    grid_m: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Traces per minibatch.
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { epochs: 200, learning_rate: 1e-3, batch_size: 32 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codec {
    spec: GridSpec,
    pub encoder: Mlp,
    pub decoder: Mlp,
}

impl Codec {
    pub fn new<R: Rng + ?Sized>(spec: &GridSpec, rng: &mut R) -> Result<Codec> {
        let m = spec.cells();
        let encoder = Mlp::new(
            &[m, HIDDEN, HIDDEN, LATENT_DIM],
            &[Activation::Relu, Activation::Relu, Activation::Identity],
            rng,
        )?;
        let decoder = Mlp::new(
            &[LATENT_DIM + STATE_FEATURES, HIDDEN, HIDDEN, Action::COUNT],
            &[Activation::Relu, Activation::Relu, Activation::Softmax],
            rng,
        )?;
        Ok(Codec { spec: spec.clone(), encoder, decoder })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn encode(&self, trace: &BehaviorTrace) -> Result<Latent> {
        let out = self.encoder.forward(&trace_to_vector(trace))?;
        Ok(out.try_into().expect("encoder output is latent sized"))
    }

    pub fn decode(&self, latent: &Latent, s: usize) -> Result<[f64; 4]> {
        if s >= self.spec.cells() {
            return Err(Error::CellOutOfRange { cell: s, cells: self.spec.cells() });
        }
        let mut input = latent.to_vec();
        input.extend(state_features(&self.spec, s));
        let out = self.decoder.forward(&input)?;
        Ok(out.try_into().expect("decoder output has four actions"))
    }

    /// Argmax exact-match rate over visited states.
    pub fn reconstruction_accuracy(&self, traces: &[BehaviorTrace]) -> Result<f64> {
        let (mut hits, mut total) = (0usize, 0usize);
        for trace in traces {
            let z = self.encode(trace)?;
            for (s, a) in trace.visited() {
                let p = self.decode(&z, s)?;
                let best = (0..4).fold(0, |b, i| if p[i] > p[b] { i } else { b });
                hits += usize::from(best == a.index());
                total += 1;
            }
        }
        Ok(if total == 0 { 1.0 } else { hits as f64 / total as f64 })
    }

    /// Mean cross-entropy over every visited state of every trace.
    pub fn loss(&self, traces: &[BehaviorTrace]) -> Result<f64> {
        let refs: Vec<&BehaviorTrace> = traces.iter().collect();
        let batch = self.batch(&refs)?;
        let Some((_, decoder_in, targets, _)) = batch else { return Ok(0.0) };
        let p = self.decoder.forward_batch(decoder_in.view())?;
        Ok(cross_entropy(&p, &targets))
    }

    #[allow(clippy::type_complexity)]
    fn batch(&self, traces: &[&BehaviorTrace]) -> Result<Option<(Array2<f64>, Array2<f64>, Vec<usize>, Vec<usize>)>> {
        let m = self.spec.cells();
        let mut x = Array2::zeros((traces.len(), m));
        for (i, t) in traces.iter().enumerate() {
            if t.len() != m {
                return Err(Error::DimensionMismatch { expected: m, got: t.len() });
            }
            x.row_mut(i).assign(&ndarray::ArrayView1::from(&trace_to_vector(t)));
        }
        let z = self.encoder.forward_batch(x.view())?;
        let pairs: Vec<(usize, usize, usize)> = traces
            .iter()
            .enumerate()
            .flat_map(|(i, t)| t.visited().map(move |(s, a)| (i, s, a.index())))
            .collect();
        if pairs.is_empty() {
            return Ok(None);
        }
        let mut dec = Array2::zeros((pairs.len(), LATENT_DIM + STATE_FEATURES));
        for (row, &(i, s, _)) in pairs.iter().enumerate() {
            dec.slice_mut(s![row, ..LATENT_DIM]).assign(&z.row(i));
            let f = state_features(&self.spec, s);
            dec[[row, LATENT_DIM]] = f[0];
            dec[[row, LATENT_DIM + 1]] = f[1];
        }
        let owners = pairs.iter().map(|p| p.0).collect();
        let targets = pairs.iter().map(|p| p.2).collect();
        Ok(Some((x, dec, targets, owners)))
    }

    /// One Adam step on the mean cross-entropy of `traces`.
    fn train_step(&mut self, traces: &[&BehaviorTrace], enc_opt: &mut Adam, dec_opt: &mut Adam) -> Result<()> {
        let Some((x, dec_in, targets, owners)) = self.batch(traces)? else { return Ok(()) };
        let n = targets.len() as f64;
        let dec_cache = self.decoder.forward_cached(dec_in.view())?;
        let p = dec_cache.output();
        let mut upstream = Array2::zeros(p.raw_dim());
        for (row, &t) in targets.iter().enumerate() {
            upstream[[row, t]] = -1.0 / (n * p[[row, t]].max(1e-300));
        }
        let (dec_grads, dec_dx) = self.decoder.backward(&dec_cache, upstream.view())?;
        let mut dz = Array2::zeros((traces.len(), LATENT_DIM));
        for (row, &i) in owners.iter().enumerate() {
            let mut r = dz.row_mut(i);
            r += &dec_dx.slice(s![row, ..LATENT_DIM]);
        }
        let enc_cache = self.encoder.forward_cached(x.view())?;
        let (enc_grads, _) = self.encoder.backward(&enc_cache, dz.view())?;
        dec_opt.step(&mut self.decoder, &dec_grads)?;
        enc_opt.step(&mut self.encoder, &enc_grads)?;
        Ok(())
    }

    /// Minibatch Adam on the reconstruction cross-entropy. Returns the
    /// full-corpus loss after each epoch.
    pub fn pretrain<R: Rng + ?Sized>(
        &mut self,
        corpus: &[BehaviorTrace],
        cfg: &PretrainConfig,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut enc_opt = Adam::new(&self.encoder, cfg.learning_rate);
        let mut dec_opt = Adam::new(&self.decoder, cfg.learning_rate);
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        let mut losses = Vec::with_capacity(cfg.epochs);
        for _ in 0..cfg.epochs {
            order.shuffle(rng);
            for chunk in order.chunks(cfg.batch_size.max(1)) {
                let batch: Vec<&BehaviorTrace> = chunk.iter().map(|&i| &corpus[i]).collect();
                self.train_step(&batch, &mut enc_opt, &mut dec_opt)?;
            }
            losses.push(self.loss(corpus)?);
        }
        Ok(losses)
    }

    /// Writes `encoder.w`, `decoder.w` and `codec.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.encoder.save(&dir.join("encoder.w"))?;
        self.decoder.save(&dir.join("decoder.w"))?;
        let sidecar = Sidecar { latent_dim: LATENT_DIM, grid_m: self.spec.cells() };
        std::fs::write(dir.join("codec.json"), serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn load(dir: &Path, spec: &GridSpec) -> Result<Codec> {
        let sidecar: Sidecar = serde_json::from_str(&std::fs::read_to_string(dir.join("codec.json"))?)?;
        if sidecar.latent_dim != LATENT_DIM || sidecar.grid_m != spec.cells() {
            return Err(Error::ArchitectureMismatch(format!(
                "codec built for M={} latent={}, grid has M={}",
                sidecar.grid_m,
                sidecar.latent_dim,
                spec.cells()
            )));
        }
        let encoder = Mlp::load(&dir.join("encoder.w"))?;
        let decoder = Mlp::load(&dir.join("decoder.w"))?;
        if encoder.dims() != [spec.cells(), HIDDEN, HIDDEN, LATENT_DIM]
            || decoder.dims() != [LATENT_DIM + STATE_FEATURES, HIDDEN, HIDDEN, Action::COUNT]
        {
            return Err(Error::ArchitectureMismatch("codec weight file dims".into()));
        }
        Ok(Codec { spec: spec.clone(), encoder, decoder })
    }
}

fn cross_entropy(p: &Array2<f64>, targets: &[usize]) -> f64 {
    let total: f64 = targets.iter().enumerate().map(|(row, &t)| -p[[row, t]].max(1e-300).ln()).sum();
    total / targets.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub victim_traces: usize,
    pub max_victim_episodes: usize,
    pub random_traces: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig { victim_traces: 5_000, max_victim_episodes: 500, random_traces: 1_000 }
    }
}

/// Uniform symbol per state, `None` included.
pub fn random_trace<R: Rng + ?Sized>(cells: usize, rng: &mut R) -> BehaviorTrace {
    BehaviorTrace::from_symbols(
        (0..cells)
            .map(|_| match rng.random_range(0..5) {
                4 => None,
                i => Some(Action::from_index(i)),
            })
            .collect(),
    )
}

/// Traces of victims trained in random terrain, then fully random traces.
pub fn generate_corpus<R: Rng + ?Sized>(
    spec: &GridSpec,
    victim: &VictimParams,
    cfg: &CorpusConfig,
    rng: &mut R,
) -> Result<Vec<BehaviorTrace>> {
    let (lo, hi) = spec.altitude_bounds;
    let m = spec.cells();
    let mut corpus = Vec::with_capacity(cfg.victim_traces + cfg.random_traces);
    for _ in 0..cfg.victim_traces {
        let altitudes = (0..m).map(|_| rng.random_range(lo..=hi)).collect();
        let world = GridWorld::new(spec.clone(), altitudes)?;
        let episodes = rng.random_range(0..=cfg.max_victim_episodes);
        let mut q = QTable::zeros(m);
        let (trace, _) = train_episodes(&world, &mut q, victim, episodes, rng);
        corpus.push(trace);
    }
    for _ in 0..cfg.random_traces {
        corpus.push(random_trace(m, rng));
    }
    Ok(corpus)
}
