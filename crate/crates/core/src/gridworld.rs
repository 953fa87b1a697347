//! Elevation grid world: the victim's environment.
//!
//! Each cell carries an altitude. Moving from one cell to a neighbour is
//! stochastic: the four compass outcomes are weighted by a softmax over
//! `kappa * [direction == intended] - beta * (h_dest - h_cell)`, so the
//! intended move is favoured and climbing is penalised. Moves off the grid
//! leave the agent in place with zero altitude change.

use std::fmt;
use std::sync::OnceLock;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Compass moves available to the navigating agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Action {
    North,
    South,
    East,
    West,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::North, Action::South, Action::East, Action::West];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Action {
        Self::ALL[i]
    }

    pub fn symbol(self) -> char {
        match self {
            Action::North => 'N',
            Action::South => 'S',
            Action::East => 'E',
            Action::West => 'W',
        }
    }

    pub fn from_symbol(c: char) -> Option<Action> {
        match c {
            'N' => Some(Action::North),
            'S' => Some(Action::South),
            'E' => Some(Action::East),
            'W' => Some(Action::West),
            _ => None,
        }
    }

    fn delta(self) -> (isize, isize) {
        match self {
            Action::North => (-1, 0),
            Action::South => (1, 0),
            Action::East => (0, 1),
            Action::West => (0, -1),
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.symbol())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    pub start: usize,
    pub goal: usize,
    /// beta: logit penalty per unit of climb.
    pub slope_sensitivity: f64,
    /// kappa: logit bonus of the intended direction.
    pub intent_strength: f64,
    pub altitude_bounds: (f64, f64),
    pub max_episode_steps: usize,
    pub victim_reward: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            width: 4,
            height: 4,
            start: 1,
            goal: 14,
            slope_sensitivity: 1.5,
            intent_strength: 3.0,
            altitude_bounds: (0.0, 5.0),
            max_episode_steps: 100,
            victim_reward: -1.0,
        }
    }
}

impl GridSpec {
    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.cells();
        if m == 0 {
            return Err(Error::InvalidGrid("grid has no cells".into()));
        }
        if self.start >= m || self.goal >= m {
            return Err(Error::InvalidGrid(format!(
                "start {} / goal {} outside [0, {m})",
                self.start, self.goal
            )));
        }
        if self.start == self.goal {
            return Err(Error::InvalidGrid("start equals goal".into()));
        }
        let (lo, hi) = self.altitude_bounds;
        if !(lo < hi) {
            return Err(Error::InvalidGrid(format!("altitude bounds [{lo}, {hi}] are empty")));
        }
        if !(self.slope_sensitivity >= 0.0) || !(self.intent_strength >= 0.0) {
            return Err(Error::InvalidGrid("kappa and beta must be non-negative".into()));
        }
        if self.max_episode_steps == 0 {
            return Err(Error::InvalidGrid("episode budget must be positive".into()));
        }
        Ok(())
    }

    pub fn coords(&self, cell: usize) -> (usize, usize) {
        (cell / self.width, cell % self.width)
    }

    pub fn manhattan(&self, a: usize, b: usize) -> usize {
        let (ra, ca) = self.coords(a);
        let (rb, cb) = self.coords(b);
        ra.abs_diff(rb) + ca.abs_diff(cb)
    }

    /// Largest Manhattan distance between two cells.
    pub fn diameter(&self) -> usize {
        (self.width - 1) + (self.height - 1)
    }

    /// The cell reached by moving `action` from `cell`, or `None` off-grid.
    pub fn neighbor(&self, cell: usize, action: Action) -> Option<usize> {
        let (r, c) = self.coords(cell);
        let (dr, dc) = action.delta();
        let nr = r as isize + dr;
        let nc = c as isize + dc;
        if nr < 0 || nc < 0 || nr >= self.height as isize || nc >= self.width as isize {
            None
        } else {
            Some(nr as usize * self.width + nc as usize)
        }
    }

    /// Midpoint of the altitude bounds.
    pub fn mid_altitude(&self) -> f64 {
        0.5 * (self.altitude_bounds.0 + self.altitude_bounds.1)
    }
}

/// Full `M x 4 x M` transition probabilities, flattened.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionTensor {
    cells: usize,
    probs: Vec<f64>,
}

impl TransitionTensor {
    pub fn cells(&self) -> usize {
        self.cells
    }

    /// Distribution over next cells for `(cell, action)`.
    pub fn row(&self, cell: usize, action: usize) -> &[f64] {
        let start = (cell * Action::COUNT + action) * self.cells;
        &self.probs[start..start + self.cells]
    }

    pub fn get(&self, cell: usize, action: usize, next: usize) -> f64 {
        self.row(cell, action)[next]
    }

    /// Build from an explicit row-major `M x 4 x M` buffer.
    pub fn from_raw(cells: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != cells * Action::COUNT * cells {
            return Err(Error::DimensionMismatch {
                expected: cells * Action::COUNT * cells,
                got: probs.len(),
            });
        }
        Ok(TransitionTensor { cells, probs })
    }
}

#[derive(Debug, Clone)]
struct Dynamics {
    /// Per (cell, intended): probabilities of the four direction outcomes.
    directions: Vec<[f64; 4]>,
    /// Per (cell, direction): resulting cell.
    destinations: Vec<[usize; 4]>,
    tensor: TransitionTensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next_state: usize,
    pub reward: f64,
    pub done: bool,
}

#[derive(Debug, Clone)]
pub struct GridWorld {
    spec: GridSpec,
    altitudes: Vec<f64>,
    cache: OnceLock<Dynamics>,
}

impl PartialEq for GridWorld {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.altitudes == other.altitudes
    }
}

/// The canonical 4x4 world with flat terrain.
pub fn default_env() -> GridWorld {
    GridWorld::flat(GridSpec::default()).expect("default spec is valid")
}

impl GridWorld {
    pub fn new(spec: GridSpec, altitudes: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if altitudes.len() != spec.cells() {
            return Err(Error::DimensionMismatch { expected: spec.cells(), got: altitudes.len() });
        }
        let (lo, hi) = spec.altitude_bounds;
        if let Some(bad) = altitudes.iter().find(|h| !(**h >= lo && **h <= hi)) {
            return Err(Error::InvalidGrid(format!("altitude {bad} outside [{lo}, {hi}]")));
        }
        Ok(GridWorld { spec, altitudes, cache: OnceLock::new() })
    }

    /// Every cell at the midpoint altitude.
    pub fn flat(spec: GridSpec) -> Result<Self> {
        let h = spec.mid_altitude();
        let m = spec.cells();
        Self::new(spec, vec![h; m])
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn altitudes(&self) -> &[f64] {
        &self.altitudes
    }

    pub fn cells(&self) -> usize {
        self.spec.cells()
    }

    fn check_cell(&self, cell: usize) -> Result<()> {
        if cell >= self.cells() {
            Err(Error::CellOutOfRange { cell, cells: self.cells() })
        } else {
            Ok(())
        }
    }

    fn direction_probs_unchecked(&self, cell: usize, intended: Action) -> [f64; 4] {
        let h_cell = self.altitudes[cell];
        let mut logits = [0.0; 4];
        for dir in Action::ALL {
            let dh = match self.spec.neighbor(cell, dir) {
                Some(dest) => self.altitudes[dest] - h_cell,
                None => 0.0,
            };
            let bonus = if dir == intended { self.spec.intent_strength } else { 0.0 };
            logits[dir.index()] = bonus - self.spec.slope_sensitivity * dh;
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut out = logits.map(|l| (l - max).exp());
        let z: f64 = out.iter().sum();
        out.iter_mut().for_each(|p| *p /= z);
        out
    }

    /// Probability of each of the four direction outcomes when `intended` is chosen.
    pub fn direction_probs(&self, cell: usize, intended: Action) -> Result<[f64; 4]> {
        self.check_cell(cell)?;
        Ok(self.direction_probs_unchecked(cell, intended))
    }

    /// Distribution over next cells (length M).
    pub fn transition_probs(&self, cell: usize, intended: Action) -> Result<Vec<f64>> {
        self.check_cell(cell)?;
        Ok(self.dynamics().tensor.row(cell, intended.index()).to_vec())
    }

    fn dynamics(&self) -> &Dynamics {
        self.cache.get_or_init(|| {
            let m = self.cells();
            let mut directions = Vec::with_capacity(m * 4);
            let mut destinations = Vec::with_capacity(m);
            let mut probs = vec![0.0; m * 4 * m];
            for cell in 0..m {
                let dest = Action::ALL.map(|d| self.spec.neighbor(cell, d).unwrap_or(cell));
                destinations.push(dest);
                for a in Action::ALL {
                    let p = self.direction_probs_unchecked(cell, a);
                    let row = &mut probs[(cell * 4 + a.index()) * m..(cell * 4 + a.index() + 1) * m];
                    for (d, &pd) in p.iter().enumerate() {
                        row[dest[d]] += pd;
                    }
                    directions.push(p);
                }
            }
            Dynamics { directions, destinations, tensor: TransitionTensor { cells: m, probs } }
        })
    }

    pub fn transition_tensor(&self) -> &TransitionTensor {
        &self.dynamics().tensor
    }

    /// Sample one victim move. The caller tracks the episode step budget.
    pub fn step<R: Rng + ?Sized>(&self, state: usize, action: Action, rng: &mut R) -> StepOutcome {
        let dyn_ = self.dynamics();
        let probs = &dyn_.directions[state * 4 + action.index()];
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut dir = 3;
        for (d, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                dir = d;
                break;
            }
        }
        let next_state = dyn_.destinations[state][dir];
        StepOutcome { next_state, reward: self.spec.victim_reward, done: next_state == self.spec.goal }
    }

    /// Add `u` to the altitudes and clamp to bounds. Changes accumulate.
    pub fn apply_attack(&self, u: &[f64]) -> Result<GridWorld> {
        if u.len() != self.cells() {
            return Err(Error::DimensionMismatch { expected: self.cells(), got: u.len() });
        }
        if let Some((index, &value)) = u.iter().enumerate().find(|(_, v)| !(v.abs() <= 1.0)) {
            return Err(Error::AttackOutOfBounds { index, value });
        }
        let (lo, hi) = self.spec.altitude_bounds;
        let altitudes = self.altitudes.iter().zip(u).map(|(h, d)| (h + d).clamp(lo, hi)).collect();
        Ok(GridWorld { spec: self.spec.clone(), altitudes, cache: OnceLock::new() })
    }

    pub fn to_file(&self) -> GridFile {
        GridFile {
            width: self.spec.width,
            height: self.spec.height,
            start: self.spec.start,
            goal: self.spec.goal,
            altitudes: self.altitudes.clone(),
            kappa: self.spec.intent_strength,
            beta: self.spec.slope_sensitivity,
            bounds: [self.spec.altitude_bounds.0, self.spec.altitude_bounds.1],
        }
    }

    pub fn from_file(file: GridFile) -> Result<GridWorld> {
        let spec = GridSpec {
            width: file.width,
            height: file.height,
            start: file.start,
            goal: file.goal,
            slope_sensitivity: file.beta,
            intent_strength: file.kappa,
            altitude_bounds: (file.bounds[0], file.bounds[1]),
            ..GridSpec::default()
        };
        GridWorld::new(spec, file.altitudes)
    }
}

/// On-disk JSON form of a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFile {
    pub width: usize,
    pub height: usize,
    pub start: usize,
    pub goal: usize,
    pub altitudes: Vec<f64>,
    pub kappa: f64,
    pub beta: f64,
    pub bounds: [f64; 2],
}
