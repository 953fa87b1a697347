//! Tabular Q-learning victim with softmax exploration.
//!
//! The attacker never reads the Q table. What it sees are the behaviour
//! trace (last action per state) and the empirical policy estimate built from
//! the last `h` actions per state, both gathered while the victim trains.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridworld::{Action, GridSpec, GridWorld};

#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    values: Vec<[f64; 4]>,
}

impl QTable {
    pub fn zeros(cells: usize) -> Self {
        QTable { values: vec![[0.0; 4]; cells] }
    }

    pub fn row(&self, s: usize) -> &[f64; 4] {
        &self.values[s]
    }

    pub fn get(&self, s: usize, a: Action) -> f64 {
        self.values[s][a.index()]
    }

    pub fn set(&mut self, s: usize, a: Action, v: f64) {
        self.values[s][a.index()] = v;
    }

    pub fn cells(&self) -> usize {
        self.values.len()
    }

    pub fn max(&self, s: usize) -> f64 {
        self.values[s].iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// First action with the largest value.
    pub fn greedy(&self, s: usize) -> Action {
        let row = &self.values[s];
        let mut best = 0;
        for a in 1..4 {
            if row[a] > row[best] {
                best = a;
            }
        }
        Action::from_index(best)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VictimParams {
    pub discount: f64,
    pub learning_rate: f64,
    pub temperature: f64,
    /// Training episodes observed per attack step.
    pub episodes_per_attack_step: usize,
    /// Actions remembered per state for the policy estimate.
    pub history_depth: usize,
}

impl Default for VictimParams {
    fn default() -> Self {
        VictimParams {
            discount: 0.90,
            learning_rate: 0.100,
            temperature: 1.0,
            episodes_per_attack_step: 80,
            history_depth: 8,
        }
    }
}

impl VictimParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return Err(Error::Config(format!("victim discount {} not in (0,1)", self.discount)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("victim temperature must be positive".into()));
        }
        if self.history_depth == 0 {
            return Err(Error::Config("history depth must be positive".into()));
        }
        Ok(())
    }
}

/// Last observed action per state; `None` is the no-action symbol.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BehaviorTrace {
    symbols: Vec<Option<Action>>,
}

impl BehaviorTrace {
    pub fn empty(cells: usize) -> Self {
        BehaviorTrace { symbols: vec![None; cells] }
    }

    pub fn from_symbols(symbols: Vec<Option<Action>>) -> Self {
        BehaviorTrace { symbols }
    }

    pub fn symbols(&self) -> &[Option<Action>] {
        &self.symbols
    }

    pub fn get(&self, s: usize) -> Option<Action> {
        self.symbols[s]
    }

    pub fn set(&mut self, s: usize, a: Option<Action>) {
        self.symbols[s] = a;
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn visited(&self) -> impl Iterator<Item = (usize, Action)> + '_ {
        self.symbols.iter().enumerate().filter_map(|(s, a)| a.map(|a| (s, a)))
    }
}

impl fmt::Display for BehaviorTrace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for sym in &self.symbols {
            write!(f, "{}", sym.map_or('-', Action::symbol))?;
        }
        Ok(())
    }
}

impl FromStr for BehaviorTrace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let symbols = s
            .chars()
            .map(|c| match c {
                '-' => Ok(None),
                other => Action::from_symbol(other)
                    .map(Some)
                    .ok_or_else(|| Error::Config(format!("bad trace symbol {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BehaviorTrace { symbols })
    }
}

/// Empirical per-state action distribution from the last `h` actions.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyEstimate {
    probs: Vec<[f64; 4]>,
    histories: Vec<VecDeque<Action>>,
    depth: usize,
}

impl PolicyEstimate {
    /// Uniform rows, empty histories.
    pub fn uniform(cells: usize, depth: usize) -> Self {
        PolicyEstimate {
            probs: vec![[0.25; 4]; cells],
            histories: vec![VecDeque::with_capacity(depth); cells],
            depth,
        }
    }

    /// Rows given directly; histories are left empty.
    pub fn from_rows(probs: Vec<[f64; 4]>) -> Self {
        let cells = probs.len();
        PolicyEstimate { probs, histories: vec![VecDeque::new(); cells], depth: 0 }
    }

    pub fn record(&mut self, s: usize, a: Action) {
        let h = &mut self.histories[s];
        if h.len() == self.depth {
            h.pop_front();
        }
        h.push_back(a);
        let mut row = [0.0; 4];
        for act in h.iter() {
            row[act.index()] += 1.0;
        }
        let n = h.len() as f64;
        row.iter_mut().for_each(|p| *p /= n);
        self.probs[s] = row;
    }

    pub fn row(&self, s: usize) -> &[f64; 4] {
        &self.probs[s]
    }

    pub fn set_row(&mut self, s: usize, row: [f64; 4]) {
        self.probs[s] = row;
    }

    pub fn rows(&self) -> &[[f64; 4]] {
        &self.probs
    }

    pub fn history(&self, s: usize) -> &VecDeque<Action> {
        &self.histories[s]
    }

    pub fn cells(&self) -> usize {
        self.probs.len()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in &self.probs {
            out.push_str(&format!("{},{},{},{}\n", row[0], row[1], row[2], row[3]));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let rows = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|line| {
                let vals = line
                    .split(',')
                    .map(|v| v.trim().parse::<f64>().map_err(|e| Error::Config(e.to_string())))
                    .collect::<Result<Vec<_>>>()?;
                <[f64; 4]>::try_from(vals)
                    .map_err(|v| Error::DimensionMismatch { expected: 4, got: v.len() })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PolicyEstimate::from_rows(rows))
    }
}

/// Target states, each paired with its attacker-desired action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    /// Full cell sequence start..=goal.
    pub path: Vec<usize>,
    pub states: Vec<usize>,
    pub actions: Vec<Action>,
}

impl TargetSpec {
    pub fn from_path(spec: &GridSpec, path: Vec<usize>) -> Result<Self> {
        let mut states = Vec::new();
        let mut actions = Vec::new();
        for pair in path.windows(2) {
            let action = Action::ALL
                .into_iter()
                .find(|&a| spec.neighbor(pair[0], a) == Some(pair[1]))
                .ok_or_else(|| {
                    Error::InvalidGrid(format!("cells {} and {} are not adjacent", pair[0], pair[1]))
                })?;
            states.push(pair[0]);
            actions.push(action);
        }
        Ok(TargetSpec { path, states, actions })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, Action)> + '_ {
        self.states.iter().copied().zip(self.actions.iter().copied())
    }
}

pub fn softmax_probs(row: &[f64; 4], temperature: f64) -> [f64; 4] {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p = row.map(|q| ((q - max) / temperature).exp());
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= z);
    p
}

pub fn softmax_action<R: Rng + ?Sized>(q: &QTable, s: usize, temperature: f64, rng: &mut R) -> Action {
    let p = softmax_probs(q.row(s), temperature);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (a, pa) in p.iter().enumerate() {
        acc += pa;
        if u < acc {
            return Action::from_index(a);
        }
    }
    Action::West
}

/// One Q-learning backup. A terminal `next` bootstraps from zero.
pub fn td_update(
    q: &mut QTable,
    s: usize,
    a: Action,
    reward: f64,
    next: usize,
    terminal: bool,
    params: &VictimParams,
) {
    let bootstrap = if terminal { 0.0 } else { q.max(next) };
    let old = q.get(s, a);
    q.set(s, a, old + params.learning_rate * (reward + params.discount * bootstrap - old));
}

/// Run `episodes_per_attack_step` training episodes in `world`, updating `q`
/// in place, and return what an outside observer sees.
pub fn train_and_trace<R: Rng + ?Sized>(
    world: &GridWorld,
    q: &mut QTable,
    params: &VictimParams,
    rng: &mut R,
) -> (BehaviorTrace, PolicyEstimate) {
    train_episodes(world, q, params, params.episodes_per_attack_step, rng)
}

pub fn train_episodes<R: Rng + ?Sized>(
    world: &GridWorld,
    q: &mut QTable,
    params: &VictimParams,
    episodes: usize,
    rng: &mut R,
) -> (BehaviorTrace, PolicyEstimate) {
    let spec = world.spec();
    let m = spec.cells();
    let mut trace = BehaviorTrace::empty(m);
    let mut policy = PolicyEstimate::uniform(m, params.history_depth);
    for _ in 0..episodes {
        let mut state = spec.start;
        for _ in 0..spec.max_episode_steps {
            let action = softmax_action(q, state, params.temperature, rng);
            let out = world.step(state, action, rng);
            trace.set(state, Some(action));
            policy.record(state, action);
            td_update(q, state, action, out.reward, out.next_state, out.done, params);
            state = out.next_state;
            if out.done {
                break;
            }
        }
    }
    (trace, policy)
}

/// Cells visited by following the greedy action's intended move from the
/// start, stopping at the goal, a wall bump, a revisit, or `max_steps`.
pub fn greedy_path(q: &QTable, spec: &GridSpec, max_steps: usize) -> Vec<usize> {
    let mut path = vec![spec.start];
    let mut state = spec.start;
    for _ in 0..max_steps {
        if state == spec.goal {
            break;
        }
        match spec.neighbor(state, q.greedy(state)) {
            Some(next) if !path.contains(&next) => {
                path.push(next);
                state = next;
            }
            _ => break,
        }
    }
    path
}

/// Whether the greedy rollout reaches the goal in the Manhattan distance.
pub fn greedy_is_shortest(q: &QTable, spec: &GridSpec) -> bool {
    let path = greedy_path(q, spec, spec.cells());
    path.last() == Some(&spec.goal) && path.len() - 1 == spec.manhattan(spec.start, spec.goal)
}

/// Overwrite target-state rows with one-hot target actions.
pub fn make_target_policy(
    policy: &PolicyEstimate,
    trace: &BehaviorTrace,
    target: &TargetSpec,
) -> (PolicyEstimate, BehaviorTrace) {
    let mut pi_star = policy.clone();
    let mut tau_star = trace.clone();
    for (s, a) in target.pairs() {
        let mut row = [0.0; 4];
        row[a.index()] = 1.0;
        pi_star.set_row(s, row);
        tau_star.set(s, Some(a));
    }
    (pi_star, tau_star)
}

const TARGET_SEARCH_LIMIT: usize = 5_000_000;

/// A simple start-to-goal path three times the Manhattan length.
///
/// Among all such paths the one chosen has the fewest interior cells inside
/// the start/goal bounding rectangle (cells on some shortest path), then the
/// fewest non-consecutive adjacent pairs, then the lexicographically
/// smallest cell sequence.
pub fn default_target(spec: &GridSpec) -> Result<TargetSpec> {
    spec.validate()?;
    let moves = 3 * spec.manhattan(spec.start, spec.goal);
    let err = || Error::NoTargetPath { start: spec.start, goal: spec.goal, moves };
    if moves + 1 > spec.cells() {
        return Err(err());
    }
    let on_shortest = |c: usize| {
        c != spec.start
            && c != spec.goal
            && spec.manhattan(spec.start, c) + spec.manhattan(c, spec.goal)
                == spec.manhattan(spec.start, spec.goal)
    };
    let score = |path: &[usize]| {
        let overlap = path.iter().filter(|&&c| on_shortest(c)).count();
        let mut pos = vec![usize::MAX; spec.cells()];
        for (i, &c) in path.iter().enumerate() {
            pos[c] = i;
        }
        let shortcuts = path
            .iter()
            .enumerate()
            .flat_map(|(i, &c)| Action::ALL.into_iter().filter_map(move |a| spec.neighbor(c, a).map(|n| (i, n))))
            .filter(|&(i, n)| pos[n] != usize::MAX && pos[n] > i + 1)
            .count();
        (overlap, shortcuts)
    };

    struct Search<'a> {
        spec: &'a GridSpec,
        moves: usize,
        visited: Vec<bool>,
        path: Vec<usize>,
        expanded: usize,
        best: Option<((usize, usize), Vec<usize>)>,
    }
    impl Search<'_> {
        fn run(&mut self, score: &dyn Fn(&[usize]) -> (usize, usize)) {
            self.expanded += 1;
            if self.expanded > TARGET_SEARCH_LIMIT {
                return;
            }
            let cur = *self.path.last().unwrap();
            let used = self.path.len() - 1;
            if cur == self.spec.goal {
                if used == self.moves {
                    let sc = score(&self.path);
                    let better = match &self.best {
                        None => true,
                        Some((bs, bp)) => sc < *bs || (sc == *bs && self.path < *bp),
                    };
                    if better {
                        self.best = Some((sc, self.path.clone()));
                    }
                }
                return;
            }
            let left = self.moves - used;
            let dist = self.spec.manhattan(cur, self.spec.goal);
            if dist > left || (left - dist) % 2 == 1 {
                return;
            }
            for a in Action::ALL {
                if let Some(n) = self.spec.neighbor(cur, a) {
                    if !self.visited[n] {
                        self.visited[n] = true;
                        self.path.push(n);
                        self.run(score);
                        self.path.pop();
                        self.visited[n] = false;
                    }
                }
            }
        }
    }

    let mut search = Search {
        spec,
        moves,
        visited: vec![false; spec.cells()],
        path: vec![spec.start],
        expanded: 0,
        best: None,
    };
    search.visited[spec.start] = true;
    search.run(&score);
    let (_, path) = search.best.ok_or_else(err)?;
    TargetSpec::from_path(spec, path)
}
