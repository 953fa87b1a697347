//! Attack episodes, training, the strategy archive, evaluation and statistics.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::approximator::Mlp;
use crate::attacker::{select_action, AttackerParams, AttackerState, Ddpg, OuNoise, ReplayBuffer, TransitionRecord};
use crate::codec::{generate_corpus, Codec, CorpusConfig, PretrainConfig};
use crate::divergence::{all_divergences, ChainInputs, DiscountConfig, DiscountRecord, Divergences, Variant};
use crate::error::{Error, Result};
use crate::gridworld::{GridSpec, GridWorld};
use crate::metrics::{self, MetricRow};
use crate::victim::{default_target, make_target_policy, train_and_trace, QTable, TargetSpec, VictimParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMetric {
    Acc,
    SoftAcc,
}

/// Where the codec comes from: loaded from `dir` if present there, else
/// pretrained from scratch (and saved to `dir` when set).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecSetup {
    pub dir: Option<PathBuf>,
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub pretrain: PretrainConfig,
}

impl Default for CodecSetup {
    fn default() -> Self {
        CodecSetup { dir: None, seed: 0, corpus: CorpusConfig::default(), pretrain: PretrainConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub discount: DiscountConfig,
    pub attacker: AttackerParams,
    pub victim: VictimParams,
    pub grid: GridSpec,
    /// Attack episodes per training run.
    pub episodes: usize,
    pub attack_horizon: usize,
    pub train_seed: u64,
    /// Evaluation victims sharing the training seed.
    pub same_seed_evaluations: usize,
    /// Seeds of the remaining evaluation victims.
    pub eval_seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub reward: RewardMetric,
    /// When false, `wall_time_s` is written as 0 so runs are byte-reproducible.
    pub record_wall_time: bool,
    pub codec: CodecSetup,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            discount: DiscountConfig::default(),
            attacker: AttackerParams::default(),
            victim: VictimParams::default(),
            grid: GridSpec::default(),
            episodes: 1_000,
            attack_horizon: 15,
            train_seed: 0,
            same_seed_evaluations: 10,
            eval_seeds: (101..=110).collect(),
            output_dir: PathBuf::from("runs"),
            reward: RewardMetric::Acc,
            record_wall_time: true,
            codec: CodecSetup::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.discount.validate()?;
        self.attacker.validate()?;
        self.victim.validate()?;
        self.grid.validate()?;
        if self.attack_horizon == 0 {
            return Err(Error::Config("attack_horizon must be positive".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = serde_json::from_str(&fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }

    pub fn run_id(&self) -> String {
        format!("{}-s{}", self.discount.variant, self.train_seed)
    }
}

/// Everything recorded at one attack step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub attack_step: usize,
    pub acc: f64,
    pub soft_acc: f64,
    pub partial_soft_acc: f64,
    pub effort: Option<f64>,
    pub wall_time_s: f64,
    pub raw_divergence: f64,
    pub gamma: f64,
    pub reward: f64,
    pub divergences: Divergences,
    pub altitudes: Vec<f64>,
}

impl StepRecord {
    pub fn to_row(&self, run_id: &str, seed: u64, episode: usize) -> MetricRow {
        MetricRow {
            run_id: run_id.to_string(),
            seed,
            episode,
            attack_step: self.attack_step,
            acc: self.acc,
            soft_acc: self.soft_acc,
            partial_soft_acc: self.partial_soft_acc,
            effort: self.effort,
            wall_time_s: self.wall_time_s,
            raw_divergence: self.raw_divergence,
            gamma: self.gamma,
            reward: self.reward,
        }
    }
}

/// Fixed pieces shared by every episode of a run.
#[derive(Debug, Clone)]
pub struct AttackSetup<'a> {
    pub cfg: &'a ExperimentConfig,
    pub codec: &'a Codec,
    pub default_world: GridWorld,
    pub target: TargetSpec,
    q0: Vec<f64>,
}

impl<'a> AttackSetup<'a> {
    pub fn new(cfg: &'a ExperimentConfig, codec: &'a Codec) -> Result<AttackSetup<'a>> {
        cfg.validate()?;
        if codec.spec().cells() != cfg.grid.cells() {
            return Err(Error::ArchitectureMismatch("codec grid differs from config grid".into()));
        }
        let default_world = GridWorld::flat(cfg.grid.clone())?;
        let target = default_target(&cfg.grid)?;
        let mut q0 = vec![0.0; cfg.grid.cells()];
        q0[cfg.grid.start] = 1.0;
        Ok(AttackSetup { cfg, codec, default_world, target, q0 })
    }

    pub fn state_dim(&self) -> usize {
        AttackerState::dim(&self.cfg.grid)
    }

    pub fn action_dim(&self) -> usize {
        self.cfg.grid.cells()
    }
}

/// One attack episode, advanced an action at a time. The victim's Q-table
/// and rng live here and are never exposed to the attacker.
pub struct AttackEpisode<'s, 'a> {
    setup: &'s AttackSetup<'a>,
    world: GridWorld,
    q: QTable,
    victim_rng: ChaCha8Rng,
    observation: Vec<f64>,
    step: usize,
    done: bool,
}

impl<'s, 'a> AttackEpisode<'s, 'a> {
    /// Fresh victim in the default world; returns the step-0 record.
    pub fn start(setup: &'s AttackSetup<'a>, victim_seed: u64) -> Result<(Self, StepRecord)> {
        let clock = Instant::now();
        let mut ep = AttackEpisode {
            setup,
            world: setup.default_world.clone(),
            q: QTable::zeros(setup.cfg.grid.cells()),
            victim_rng: ChaCha8Rng::seed_from_u64(victim_seed),
            observation: Vec::new(),
            step: 0,
            done: false,
        };
        let record = ep.observe(None, clock)?;
        Ok((ep, record))
    }

    pub fn observation(&self) -> &[f64] {
        &self.observation
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn world(&self) -> &GridWorld {
        &self.world
    }

    fn observe(&mut self, previous: Option<&[f64]>, clock: Instant) -> Result<StepRecord> {
        let cfg = self.setup.cfg;
        let (trace, policy) = train_and_trace(&self.world, &mut self.q, &cfg.victim, &mut self.victim_rng);
        let latent = self.setup.codec.encode(&trace)?;
        let target = &self.setup.target;
        let acc = metrics::acc(&policy, target)?;
        let soft_acc = metrics::soft_acc(&policy, target)?;
        let partial_soft_acc = metrics::partial_soft_acc(&policy, target)?;
        let (pi_star, _) = make_target_policy(&policy, &trace, target);
        let inputs = ChainInputs {
            spec: &cfg.grid,
            t_current: self.world.transition_tensor(),
            t_default: self.setup.default_world.transition_tensor(),
            policy: &policy,
            target_policy: &pi_star,
            q0: &self.setup.q0,
        };
        let divergences = all_divergences(&inputs, cfg.discount.k)?;
        let raw_divergence = divergences.raw(cfg.discount.variant);
        let gamma = cfg.discount.squash(raw_divergence);
        let effort = previous.map(|h| metrics::effort(h, self.world.altitudes())).transpose()?;
        let altitudes = self.world.altitudes().to_vec();
        self.observation = AttackerState { altitudes: altitudes.clone(), latent }.to_vec(&cfg.grid);
        Ok(StepRecord {
            attack_step: self.step,
            acc,
            soft_acc,
            partial_soft_acc,
            effort,
            wall_time_s: if cfg.record_wall_time { clock.elapsed().as_secs_f64() } else { 0.0 },
            raw_divergence,
            gamma,
            reward: match cfg.reward {
                RewardMetric::Acc => acc,
                RewardMetric::SoftAcc => soft_acc,
            },
            divergences,
            altitudes,
        })
    }

    /// Apply `u`, let the victim train, and report what happened.
    pub fn step(&mut self, u: &[f64]) -> Result<(StepRecord, TransitionRecord)> {
        if self.done {
            return Err(Error::Config("attack episode already finished".into()));
        }
        let clock = Instant::now();
        let x = self.observation.clone();
        let previous = self.world.altitudes().to_vec();
        self.world = self.world.apply_attack(u)?;
        self.step += 1;
        let record = self.observe(Some(&previous), clock)?;
        self.done = record.acc >= 1.0 || self.step >= self.setup.cfg.attack_horizon;
        let transition = TransitionRecord {
            x,
            u: u.to_vec(),
            r: record.reward,
            x_next: self.observation.clone(),
            gamma: record.gamma,
            done: self.done,
        };
        Ok((record, transition))
    }
}

/// Run a whole episode with a fixed actor.
pub fn run_attack_episode<R: rand::Rng + ?Sized>(
    setup: &AttackSetup,
    actor: &Mlp,
    noise: &mut OuNoise,
    explore: bool,
    rng: &mut R,
    victim_seed: u64,
) -> Result<(Vec<StepRecord>, Vec<TransitionRecord>)> {
    noise.reset();
    let (mut ep, first) = AttackEpisode::start(setup, victim_seed)?;
    let mut steps = vec![first];
    let mut transitions = Vec::new();
    while !ep.is_done() {
        let clock = Instant::now();
        let u = select_action(actor, ep.observation(), noise, explore, rng)?;
        let (mut rec, tr) = ep.step(&u)?;
        if setup.cfg.record_wall_time {
            rec.wall_time_s = clock.elapsed().as_secs_f64();
        }
        steps.push(rec);
        transitions.push(tr);
    }
    Ok((steps, transitions))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Criterion {
    Klr,
    TargetKlr,
    DefaultKlr,
    Wd,
    TargetWd,
    DefaultWd,
    Acc,
    SoftAcc,
    PartialSoftAcc,
    Effort,
    Time,
}

impl Criterion {
    pub const ALL: [Criterion; 11] = [
        Criterion::Klr,
        Criterion::TargetKlr,
        Criterion::DefaultKlr,
        Criterion::Wd,
        Criterion::TargetWd,
        Criterion::DefaultWd,
        Criterion::Acc,
        Criterion::SoftAcc,
        Criterion::PartialSoftAcc,
        Criterion::Effort,
        Criterion::Time,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Criterion::Klr => "klr",
            Criterion::TargetKlr => "target-klr",
            Criterion::DefaultKlr => "default-klr",
            Criterion::Wd => "wd",
            Criterion::TargetWd => "target-wd",
            Criterion::DefaultWd => "default-wd",
            Criterion::Acc => "acc",
            Criterion::SoftAcc => "soft-acc",
            Criterion::PartialSoftAcc => "partial-soft-acc",
            Criterion::Effort => "effort",
            Criterion::Time => "time",
        }
    }

    /// Accuracies improve upward; divergences, effort and time downward.
    pub fn higher_is_better(self) -> bool {
        matches!(self, Criterion::Acc | Criterion::SoftAcc | Criterion::PartialSoftAcc)
    }

    pub fn value(self, step: &StepRecord) -> f64 {
        let d = &step.divergences;
        match self {
            Criterion::Klr => d.klr,
            Criterion::TargetKlr => d.target_klr,
            Criterion::DefaultKlr => d.default_klr,
            Criterion::Wd => d.wd,
            Criterion::TargetWd => d.target_wd,
            Criterion::DefaultWd => d.default_wd,
            Criterion::Acc => step.acc,
            Criterion::SoftAcc => step.soft_acc,
            Criterion::PartialSoftAcc => step.partial_soft_acc,
            Criterion::Effort => step.effort.unwrap_or(0.0),
            Criterion::Time => step.wall_time_s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    Last,
    Mean,
    Cumulative,
}

impl Aggregation {
    pub const ALL: [Aggregation; 3] = [Aggregation::Last, Aggregation::Mean, Aggregation::Cumulative];

    pub fn name(self) -> &'static str {
        match self {
            Aggregation::Last => "last",
            Aggregation::Mean => "mean",
            Aggregation::Cumulative => "cumulative",
        }
    }
}

/// Aggregate a criterion over the attack steps (step 0 excluded).
pub fn aggregate(steps: &[StepRecord], criterion: Criterion, aggregation: Aggregation) -> f64 {
    let values: Vec<f64> = steps.iter().filter(|s| s.attack_step > 0).map(|s| criterion.value(s)).collect();
    if values.is_empty() {
        return 0.0;
    }
    match aggregation {
        Aggregation::Last => *values.last().expect("non-empty"),
        Aggregation::Mean => values.iter().sum::<f64>() / values.len() as f64,
        Aggregation::Cumulative => values.iter().sum(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveSlot {
    pub criterion: Criterion,
    pub aggregation: Aggregation,
    pub best: Option<f64>,
    pub episode: Option<usize>,
    #[serde(skip)]
    pub actor: Option<Mlp>,
}

impl ArchiveSlot {
    pub fn name(&self) -> String {
        format!("{}-{}", self.criterion.name(), self.aggregation.name())
    }

    fn admits(&self, value: f64) -> bool {
        match self.best {
            None => true,
            Some(best) if self.criterion.higher_is_better() => value >= best,
            Some(best) => value <= best,
        }
    }
}

/// Best-so-far actors for every criterion and aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyArchive {
    slots: Vec<ArchiveSlot>,
}

impl Default for StrategyArchive {
    fn default() -> Self {
        StrategyArchive::new()
    }
}

impl StrategyArchive {
    pub fn new() -> Self {
        let slots = Criterion::ALL
            .iter()
            .flat_map(|&criterion| {
                Aggregation::ALL.iter().map(move |&aggregation| ArchiveSlot {
                    criterion,
                    aggregation,
                    best: None,
                    episode: None,
                    actor: None,
                })
            })
            .collect();
        StrategyArchive { slots }
    }

    pub fn slots(&self) -> &[ArchiveSlot] {
        &self.slots
    }

    pub fn slot(&self, criterion: Criterion, aggregation: Aggregation) -> &ArchiveSlot {
        self.slots
            .iter()
            .find(|s| s.criterion == criterion && s.aggregation == aggregation)
            .expect("every pair has a slot")
    }

    pub fn best_values(&self) -> Vec<Option<f64>> {
        self.slots.iter().map(|s| s.best).collect()
    }

    pub fn history_header() -> String {
        let names: Vec<String> = StrategyArchive::new().slots.iter().map(|s| s.name()).collect();
        format!("episode,{}", names.join(","))
    }

    pub fn history_line(&self, episode: usize) -> String {
        let vals: Vec<String> = self.slots.iter().map(|s| s.best.map(|v| v.to_string()).unwrap_or_default()).collect();
        format!("{episode},{}", vals.join(","))
    }

    /// Writes one weight file and one metadata JSON per filled slot.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for slot in &self.slots {
            let (Some(actor), Some(episode)) = (&slot.actor, slot.episode) else { continue };
            let weights = format!("actor_{}_{}.w", slot.name(), episode);
            actor.save(&dir.join(&weights))?;
            let meta = serde_json::json!({
                "criterion": slot.criterion,
                "aggregation": slot.aggregation,
                "best": slot.best,
                "episode": episode,
                "weights": weights,
            });
            fs::write(dir.join(format!("{}.json", slot.name())), serde_json::to_string_pretty(&meta)?)?;
        }
        Ok(())
    }

    /// Path of the weight file saved for a slot by [`StrategyArchive::save`].
    pub fn saved_actor_path(dir: &Path, criterion: Criterion, aggregation: Aggregation) -> Result<PathBuf> {
        let name = format!("{}-{}", criterion.name(), aggregation.name());
        let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join(format!("{name}.json")))?)?;
        let weights = meta["weights"]
            .as_str()
            .ok_or_else(|| Error::Config(format!("{name}.json has no weights entry")))?;
        Ok(dir.join(weights))
    }
}

/// Snapshot `actor` into every slot the episode ties or beats. Returns the
/// indices of the updated slots.
pub fn archive_update(archive: &mut StrategyArchive, episode: usize, steps: &[StepRecord], actor: &Mlp) -> Vec<usize> {
    let mut updated = Vec::new();
    for (i, slot) in archive.slots.iter_mut().enumerate() {
        let value = aggregate(steps, slot.criterion, slot.aggregation);
        if slot.admits(value) {
            slot.best = Some(value);
            slot.episode = Some(episode);
            slot.actor = Some(actor.clone());
            updated.push(i);
        }
    }
    updated
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_digest: String,
    pub code_version: String,
    pub train_seed: u64,
    pub eval_seeds: Vec<u64>,
    pub start_timestamp: u64,
    pub end_timestamp: u64,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub struct TrainOutcome {
    pub archive: StrategyArchive,
    pub ddpg: Ddpg,
    pub episodes: Vec<Vec<StepRecord>>,
    /// Archive best values after each episode.
    pub archive_history: Vec<Vec<Option<f64>>>,
    pub updates: usize,
}

struct RunFiles {
    metrics: BufWriter<File>,
    history: BufWriter<File>,
    discounts: BufWriter<File>,
}

impl RunFiles {
    fn create(dir: &Path) -> Result<RunFiles> {
        fs::create_dir_all(dir)?;
        let mut metrics = BufWriter::new(File::create(dir.join("metrics.csv"))?);
        writeln!(metrics, "{}", MetricRow::HEADER)?;
        let mut history = BufWriter::new(File::create(dir.join("archive_history.csv"))?);
        writeln!(history, "{}", StrategyArchive::history_header())?;
        let discounts = BufWriter::new(File::create(dir.join("discounts.jsonl"))?);
        Ok(RunFiles { metrics, history, discounts })
    }
}

/// Train an attacker for `cfg.episodes` episodes. With `out` set, streams
/// `metrics.csv`, `archive_history.csv` and `discounts.jsonl` there and
/// finishes with the archive, final networks and a run manifest.
pub fn train(cfg: &ExperimentConfig, codec: &Codec, out: Option<&Path>) -> Result<TrainOutcome> {
    let start_timestamp = unix_now();
    let setup = AttackSetup::new(cfg, codec)?;
    let mut files = out.map(RunFiles::create).transpose()?;
    if let Some(dir) = out {
        fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    }
    let run_id = cfg.run_id();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train_seed);
    let mut ddpg = Ddpg::new(setup.state_dim(), setup.action_dim(), cfg.attacker.clone(), &mut rng)?;
    let mut buffer = ReplayBuffer::new(cfg.attacker.buffer_capacity);
    let mut noise = OuNoise::new(setup.action_dim(), cfg.attacker.noise_theta, cfg.attacker.noise_sigma);
    let mut archive = StrategyArchive::new();
    let mut episodes = Vec::with_capacity(cfg.episodes);
    let mut archive_history = Vec::with_capacity(cfg.episodes);
    let mut updates = 0;

    for episode in 1..=cfg.episodes {
        noise.reset();
        let (mut ep, first) = AttackEpisode::start(&setup, cfg.train_seed)?;
        let mut steps = vec![first];
        while !ep.is_done() {
            let clock = Instant::now();
            let u = select_action(&ddpg.actor, ep.observation(), &mut noise, true, &mut rng)?;
            let (mut rec, transition) = ep.step(&u)?;
            buffer.store(transition);
            if episode > cfg.attacker.warmup_episodes && buffer.len() >= cfg.attacker.batch_size {
                ddpg.update(&buffer, &mut rng)?;
                updates += 1;
            }
            if cfg.record_wall_time {
                rec.wall_time_s = clock.elapsed().as_secs_f64();
            }
            steps.push(rec);
        }
        archive_update(&mut archive, episode, &steps, &ddpg.actor);
        if let Some(f) = files.as_mut() {
            for s in &steps {
                writeln!(f.metrics, "{}", s.to_row(&run_id, cfg.train_seed, episode).to_csv_line())?;
                let rec = DiscountRecord { variant: cfg.discount.variant, raw_divergence: s.raw_divergence, gamma: s.gamma };
                writeln!(f.discounts, "{}", serde_json::to_string(&rec)?)?;
            }
            writeln!(f.history, "{}", archive.history_line(episode))?;
        }
        archive_history.push(archive.best_values());
        episodes.push(steps);
    }

    if let (Some(dir), Some(mut f)) = (out, files) {
        f.metrics.flush()?;
        f.history.flush()?;
        f.discounts.flush()?;
        archive.save(&dir.join("archive"))?;
        ddpg.actor.save(&dir.join("actor_final.w"))?;
        ddpg.critic.save(&dir.join("critic_final.w"))?;
        let manifest = RunManifest {
            config_digest: cfg.digest()?,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            train_seed: cfg.train_seed,
            eval_seeds: cfg.eval_seeds.clone(),
            start_timestamp,
            end_timestamp: unix_now(),
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    }
    Ok(TrainOutcome { archive, ddpg, episodes, archive_history, updates })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTrace {
    pub victim_seed: u64,
    pub same_seed: bool,
    pub steps: Vec<StepRecord>,
}

impl EvalTrace {
    pub fn final_acc(&self) -> f64 {
        self.steps.last().map(|s| s.acc).unwrap_or(0.0)
    }

    /// Mean @Acc over the attack steps (step 0 excluded).
    pub fn mean_acc(&self) -> f64 {
        aggregate(&self.steps, Criterion::Acc, Aggregation::Mean)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub traces: Vec<EvalTrace>,
    pub same_seed_final_acc: f64,
    pub different_seed_final_acc: f64,
    pub same_seed_mean_acc: f64,
    pub different_seed_mean_acc: f64,
    pub max_effort: f64,
}

fn mean_of<I: Iterator<Item = f64>>(it: I) -> f64 {
    let (sum, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

impl EvalReport {
    pub fn write(&self, dir: &Path, run_id: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("eval.json"), serde_json::to_string_pretty(self)?)?;
        let mut w = BufWriter::new(File::create(dir.join("eval_metrics.csv"))?);
        writeln!(w, "{}", MetricRow::HEADER)?;
        for (i, t) in self.traces.iter().enumerate() {
            for s in &t.steps {
                writeln!(w, "{}", s.to_row(run_id, t.victim_seed, i + 1).to_csv_line())?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Noiseless attacks on the same-seed victims, then on each `eval_seeds` victim.
pub fn evaluate(setup: &AttackSetup, actor: &Mlp) -> Result<EvalReport> {
    let cfg = setup.cfg;
    let seeds = std::iter::repeat_n((cfg.train_seed, true), cfg.same_seed_evaluations)
        .chain(cfg.eval_seeds.iter().map(|&s| (s, false)));
    let mut noise = OuNoise::new(setup.action_dim(), 0.0, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut traces = Vec::new();
    for (victim_seed, same_seed) in seeds {
        let (steps, _) = run_attack_episode(setup, actor, &mut noise, false, &mut rng, victim_seed)?;
        traces.push(EvalTrace { victim_seed, same_seed, steps });
    }
    let group = |same: bool, f: fn(&EvalTrace) -> f64| mean_of(traces.iter().filter(|t| t.same_seed == same).map(f));
    Ok(EvalReport {
        same_seed_final_acc: group(true, EvalTrace::final_acc),
        different_seed_final_acc: group(false, EvalTrace::final_acc),
        same_seed_mean_acc: group(true, EvalTrace::mean_acc),
        different_seed_mean_acc: group(false, EvalTrace::mean_acc),
        max_effort: traces.iter().flat_map(|t| t.steps.iter().filter_map(|s| s.effort)).fold(0.0, f64::max),
        traces,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    Greater,
    Less,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    pub statistic: f64,
    pub p_value: f64,
    pub n: usize,
}

/// Exact one-sided Wilcoxon signed-rank test of `a - b`. Zero differences
/// are dropped; tied magnitudes share their average rank.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64], alternative: Alternative) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), got: b.len() });
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|v| *v != 0.0).collect();
    if d.is_empty() {
        return Err(Error::AllZeroDifferences);
    }
    let n = d.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[i].abs().total_cmp(&d[j].abs()));
    // doubled ranks keep averaged ties integral
    let mut rank2 = vec![0usize; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && d[order[j + 1]].abs() == d[order[i]].abs() {
            j += 1;
        }
        for &k in &order[i..=j] {
            rank2[k] = i + j + 2;
        }
        i = j + 1;
    }
    let w2: usize = (0..n).filter(|&k| d[k] > 0.0).map(|k| rank2[k]).sum();
    // counts[s] = sign patterns whose doubled statistic is s
    let total: usize = rank2.iter().sum();
    let mut counts = vec![0.0f64; total + 1];
    counts[0] = 1.0;
    for &r in &rank2 {
        for s in (r..=total).rev() {
            counts[s] += counts[s - r];
        }
    }
    let tail: f64 = match alternative {
        Alternative::Greater => counts[w2..].iter().sum(),
        Alternative::Less => counts[..=w2].iter().sum(),
    };
    Ok(WilcoxonResult { statistic: w2 as f64 / 2.0, p_value: tail / 2f64.powi(n as i32), n })
}

/// Maximum over the trailing `window` values at each index.
pub fn sliding_window_max(series: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 {
        return Err(Error::Config("window must be at least 1".into()));
    }
    Ok((0..series.len())
        .map(|i| series[i.saturating_sub(window - 1)..=i].iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect())
}

/// Per-episode mean of `acc` over attack steps (step 0 excluded).
pub fn episode_mean_acc(rows: &[MetricRow]) -> Vec<f64> {
    let mut out: Vec<(usize, f64, usize)> = Vec::new();
    for r in rows.iter().filter(|r| r.attack_step > 0) {
        match out.last_mut() {
            Some(last) if last.0 == r.episode => {
                last.1 += r.acc;
                last.2 += 1;
            }
            _ => out.push((r.episode, r.acc, 1)),
        }
    }
    out.into_iter().map(|(_, s, n)| s / n as f64).collect()
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    fs::read_to_string(path)?
        .lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(MetricRow::parse_csv_line)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub gamma: f64,
    pub best_mean_acc: f64,
    pub best_last_acc: f64,
    pub final_window_mean_acc: f64,
}

pub const DEFAULT_SWEEP: [f64; 5] = [0.80, 0.85, 0.90, 0.95, 0.99];

/// One training run per fixed discount, each in `out/fixed-<gamma>`.
pub fn sweep_fixed(cfg: &ExperimentConfig, gammas: &[f64], codec: &Codec, out: &Path) -> Result<Vec<SweepEntry>> {
    let mut entries = Vec::new();
    for &gamma in gammas {
        let mut run_cfg = cfg.clone();
        run_cfg.discount = DiscountConfig::new(Variant::Fixed(gamma));
        let dir = out.join(format!("fixed-{gamma}"));
        run_cfg.output_dir = dir.clone();
        let outcome = train(&run_cfg, codec, Some(&dir))?;
        let means: Vec<f64> = outcome.episodes.iter().map(|s| aggregate(s, Criterion::Acc, Aggregation::Mean)).collect();
        let tail = &means[means.len().saturating_sub(75)..];
        entries.push(SweepEntry {
            gamma,
            best_mean_acc: outcome.archive.slot(Criterion::Acc, Aggregation::Mean).best.unwrap_or(0.0),
            best_last_acc: outcome.archive.slot(Criterion::Acc, Aggregation::Last).best.unwrap_or(0.0),
            final_window_mean_acc: mean_of(tail.iter().copied()),
        });
    }
    fs::create_dir_all(out)?;
    let mut w = BufWriter::new(File::create(out.join("comparison.csv"))?);
    writeln!(w, "gamma,best_mean_acc,best_last_acc,final_window_mean_acc")?;
    for e in &entries {
        writeln!(w, "{},{},{},{}", e.gamma, e.best_mean_acc, e.best_last_acc, e.final_window_mean_acc)?;
    }
    w.flush()?;
    Ok(entries)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub losses: Vec<f64>,
    pub train_accuracy: f64,
    pub holdout_accuracy: f64,
}

/// Generate the corpus, hold out a tenth, and pretrain a fresh codec.
pub fn pretrain_codec(cfg: &ExperimentConfig) -> Result<(Codec, PretrainReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.codec.seed);
    let mut corpus = generate_corpus(&cfg.grid, &cfg.victim, &cfg.codec.corpus, &mut rng)?;
    rand::seq::SliceRandom::shuffle(corpus.as_mut_slice(), &mut rng);
    let holdout = corpus.split_off(corpus.len() - corpus.len() / 10);
    let mut codec = Codec::new(&cfg.grid, &mut rng)?;
    let losses = codec.pretrain(&corpus, &cfg.codec.pretrain, &mut rng)?;
    let report = PretrainReport {
        losses,
        train_accuracy: codec.reconstruction_accuracy(&corpus)?,
        holdout_accuracy: codec.reconstruction_accuracy(&holdout)?,
    };
    Ok((codec, report))
}

/// Load the codec from `cfg.codec.dir` when one is saved there, otherwise
/// pretrain it (and save it to that directory if set).
pub fn load_or_pretrain_codec(cfg: &ExperimentConfig) -> Result<Codec> {
    if let Some(dir) = &cfg.codec.dir {
        if dir.join("codec.json").exists() {
            return Codec::load(dir, &cfg.grid);
        }
    }
    let (codec, _) = pretrain_codec(cfg)?;
    if let Some(dir) = &cfg.codec.dir {
        codec.save(dir)?;
    }
    Ok(codec)
}
