//! Small finite-horizon gridworld tasks.
//!
//! * `gridnav`: one agent walks from the top-left corner to the bottom-right
//!   goal while avoiding trap cells.
//! * `pursuit2v1`: two weak units must coordinate to bring down one scripted
//!   enemy that chases and attacks them. Joint actions are flattened into a
//!   single index `a0 * 5 + a1`.
//! * `widegrid`: a larger gridnav whose features carry extra seeded noise
//!   dimensions.
//!
//! Every task is small enough to enumerate, which the value-iteration and
//! agreement oracles rely on.

use std::collections::{HashSet, VecDeque};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{splitmix64, Branch, EnumerableMdp, Mdp, Sampled, SimRng, StepKind};

pub const MAX_ENUMERATED_STATES: usize = 1_000_000;

const GRID_ACTIONS: usize = 4;
const PURSUIT_UNIT_ACTIONS: usize = 5;
const ATTACK: usize = 4;
/// Effective action of a unit whose action slipped.
const NOOP: usize = usize::MAX;
const FOCUS_FIRE_BONUS: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvName {
    Gridnav,
    Pursuit2v1,
    Widegrid,
}

impl fmt::Display for EnvName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            EnvName::Gridnav => "gridnav",
            EnvName::Pursuit2v1 => "pursuit2v1",
            EnvName::Widegrid => "widegrid",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pos {
    pub x: u8,
    pub y: u8,
}

impl Pos {
    pub fn new(x: u8, y: u8) -> Self {
        Pos { x, y }
    }

    fn manhattan(self, other: Pos) -> u32 {
        (self.x.abs_diff(other.x) + self.y.abs_diff(other.y)) as u32
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSpec {
    pub name: EnvName,
    pub width: usize,
    pub height: usize,
    pub horizon: usize,
    pub reward_bounds: (f64, f64),
    pub rng_seed: u64,
    /// Probability that a unit's chosen action fails and the unit does
    /// nothing that step.
    pub slip: f64,
    pub step_cost: f64,
    pub win_reward: f64,
    pub loss_penalty: f64,
    /// Gridnav/widegrid trap cells; entering one ends the episode as a loss.
    pub traps: Vec<Pos>,
    /// Widegrid noise dimensions appended to the features.
    pub distractors: usize,
    /// Pursuit: reward per enemy hit point removed.
    pub hit_reward: f64,
    pub unit_hp: u32,
    pub enemy_hp: u32,
}

impl EnvSpec {
    pub fn gridnav(width: usize, height: usize) -> Self {
        let mut spec = EnvSpec {
            name: EnvName::Gridnav,
            width,
            height,
            horizon: 5 * (width + height),
            reward_bounds: (0.0, 0.0),
            rng_seed: 0,
            slip: 0.1,
            step_cost: 0.04,
            win_reward: 1.0,
            loss_penalty: 1.0,
            traps: Vec::new(),
            distractors: 0,
            hit_reward: 0.0,
            unit_hp: 1,
            enemy_hp: 0,
        };
        if width == 5 && height == 5 {
            spec.traps = vec![Pos::new(1, 2), Pos::new(3, 2)];
        }
        spec.reward_bounds = spec.natural_reward_bounds();
        spec
    }

    pub fn pursuit(width: usize, height: usize) -> Self {
        let mut spec = EnvSpec {
            name: EnvName::Pursuit2v1,
            width,
            height,
            horizon: 20,
            reward_bounds: (0.0, 0.0),
            rng_seed: 0,
            slip: 0.1,
            step_cost: 0.02,
            win_reward: 1.0,
            loss_penalty: 1.0,
            traps: Vec::new(),
            distractors: 0,
            hit_reward: 0.1,
            unit_hp: 2,
            enemy_hp: 4,
        };
        spec.reward_bounds = spec.natural_reward_bounds();
        spec
    }

    pub fn widegrid(width: usize, height: usize, distractors: usize) -> Self {
        let mut spec = EnvSpec {
            name: EnvName::Widegrid,
            width,
            height,
            horizon: 4 * (width + height),
            reward_bounds: (0.0, 0.0),
            rng_seed: 0,
            slip: 0.1,
            step_cost: 0.02,
            win_reward: 1.0,
            loss_penalty: 1.0,
            traps: Vec::new(),
            distractors,
            hit_reward: 0.0,
            unit_hp: 1,
            enemy_hp: 0,
        };
        if width == 8 && height == 8 {
            spec.traps = vec![
                Pos::new(2, 2),
                Pos::new(5, 2),
                Pos::new(2, 5),
                Pos::new(5, 5),
                Pos::new(3, 6),
            ];
        }
        spec.reward_bounds = spec.natural_reward_bounds();
        spec
    }

    /// Default spec for each task.
    pub fn default_for(name: EnvName) -> Self {
        match name {
            EnvName::Gridnav => EnvSpec::gridnav(5, 5),
            EnvName::Pursuit2v1 => EnvSpec::pursuit(4, 3),
            EnvName::Widegrid => EnvSpec::widegrid(8, 8, 32),
        }
    }

    /// Tightest per-episode bounds implied by the reward parameters.
    pub fn natural_reward_bounds(&self) -> (f64, f64) {
        let worst = -self.step_cost * self.horizon as f64 - self.loss_penalty;
        let best = match self.name {
            EnvName::Pursuit2v1 => {
                self.win_reward + self.hit_reward * self.enemy_hp as f64 - self.step_cost
            }
            _ => self.win_reward - self.step_cost,
        };
        (worst.min(-self.step_cost * self.horizon as f64), best)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("env.{msg}")));
        if self.width < 2 || self.height < 2 {
            return bad(format!(
                "width/height must be >= 2 (got {}x{})",
                self.width, self.height
            ));
        }
        if self.width > 64 || self.height > 64 {
            return bad("width/height must be <= 64".into());
        }
        if self.horizon == 0 {
            return bad("horizon must be >= 1".into());
        }
        let (lo, hi) = self.reward_bounds;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return bad(format!("reward_bounds must satisfy R_min < R_max (got [{lo}, {hi}])"));
        }
        let (nat_lo, nat_hi) = self.natural_reward_bounds();
        if lo > nat_lo + 1e-12 || hi < nat_hi - 1e-12 {
            return bad(format!(
                "reward_bounds [{lo}, {hi}] do not cover the achievable range [{nat_lo}, {nat_hi}]"
            ));
        }
        if !(0.0..=1.0).contains(&self.slip) {
            return bad(format!("slip must be in [0, 1] (got {})", self.slip));
        }
        for (key, v) in [
            ("step_cost", self.step_cost),
            ("win_reward", self.win_reward),
            ("loss_penalty", self.loss_penalty),
            ("hit_reward", self.hit_reward),
        ] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{key} must be finite and >= 0 (got {v})"));
            }
        }
        match self.name {
            EnvName::Gridnav | EnvName::Widegrid => {
                let start = Pos::new(0, 0);
                let goal = self.goal();
                for t in &self.traps {
                    if t.x as usize >= self.width || t.y as usize >= self.height {
                        return bad(format!("trap ({}, {}) is out of bounds", t.x, t.y));
                    }
                    if *t == start || *t == goal {
                        return bad(format!("trap ({}, {}) overlaps start or goal", t.x, t.y));
                    }
                }
                if self.name == EnvName::Gridnav && self.distractors != 0 {
                    return bad("distractors are only supported on widegrid".into());
                }
            }
            EnvName::Pursuit2v1 => {
                if !self.traps.is_empty() || self.distractors != 0 {
                    return bad("pursuit2v1 does not take traps or distractors".into());
                }
                if self.unit_hp == 0 || self.enemy_hp == 0 || self.unit_hp > 15 || self.enemy_hp > 15 {
                    return bad("unit_hp and enemy_hp must be in 1..=15".into());
                }
            }
        }
        Ok(())
    }

    fn goal(&self) -> Pos {
        Pos::new((self.width - 1) as u8, (self.height - 1) as u8)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Unit {
    pub pos: Pos,
    pub hp: u32,
}

impl Unit {
    pub fn alive(&self) -> bool {
        self.hp > 0
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct State {
    pub units: Vec<Unit>,
    pub enemies: Vec<Unit>,
    pub step_index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    Win,
    Loss,
    Timeout,
    Ongoing,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub next_state: State,
    pub reward: f64,
    pub terminal: bool,
    pub outcome: Outcome,
}

/// A validated environment.
#[derive(Clone, Debug)]
pub struct Env {
    spec: EnvSpec,
}

impl Env {
    pub fn new(spec: EnvSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Env { spec })
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn action_count(&self) -> usize {
        match self.spec.name {
            EnvName::Pursuit2v1 => PURSUIT_UNIT_ACTIONS * PURSUIT_UNIT_ACTIONS,
            _ => GRID_ACTIONS,
        }
    }

    fn cells(&self) -> usize {
        self.spec.width * self.spec.height
    }

    fn cell_index(&self, p: Pos) -> usize {
        p.y as usize * self.spec.width + p.x as usize
    }

    /// Support of the initial-state distribution, in a fixed order.
    pub fn initial_states(&self) -> Vec<State> {
        match self.spec.name {
            EnvName::Gridnav | EnvName::Widegrid => vec![State {
                units: vec![Unit {
                    pos: Pos::new(0, 0),
                    hp: 1,
                }],
                enemies: Vec::new(),
                step_index: 0,
            }],
            EnvName::Pursuit2v1 => {
                let (w, h) = (self.spec.width, self.spec.height);
                let half = w / 2;
                let left: Vec<Pos> = (0..h)
                    .flat_map(|y| (0..half).map(move |x| Pos::new(x as u8, y as u8)))
                    .collect();
                let right: Vec<Pos> = (0..h)
                    .flat_map(|y| (half..w).map(move |x| Pos::new(x as u8, y as u8)))
                    .collect();
                let mut out = Vec::new();
                for &a in &left {
                    for &b in &left {
                        if a == b {
                            continue;
                        }
                        for &e in &right {
                            out.push(State {
                                units: vec![
                                    Unit { pos: a, hp: self.spec.unit_hp },
                                    Unit { pos: b, hp: self.spec.unit_hp },
                                ],
                                enemies: vec![Unit { pos: e, hp: self.spec.enemy_hp }],
                                step_index: 0,
                            });
                        }
                    }
                }
                out
            }
        }
    }

    /// Deterministic initial state for `seed`.
    pub fn reset(&self, seed: u64) -> State {
        let mut starts = self.initial_states();
        let idx = if starts.len() == 1 {
            0
        } else {
            (splitmix64(seed ^ self.spec.rng_seed.rotate_left(17)) % starts.len() as u64) as usize
        };
        starts.swap_remove(idx)
    }

    /// Outcome of `state` if it is terminal, `Ongoing` otherwise.
    pub fn status(&self, state: &State) -> Outcome {
        match self.spec.name {
            EnvName::Gridnav | EnvName::Widegrid => {
                let p = state.units[0].pos;
                if p == self.spec.goal() {
                    return Outcome::Win;
                }
                if self.spec.traps.contains(&p) {
                    return Outcome::Loss;
                }
            }
            EnvName::Pursuit2v1 => {
                if state.enemies[0].hp == 0 {
                    return Outcome::Win;
                }
                if state.units.iter().all(|u| !u.alive()) {
                    return Outcome::Loss;
                }
            }
        }
        if state.step_index >= self.spec.horizon {
            Outcome::Timeout
        } else {
            Outcome::Ongoing
        }
    }

    fn check_state(&self, state: &State) -> Result<()> {
        let expected_units = match self.spec.name {
            EnvName::Pursuit2v1 => (2, 1),
            _ => (1, 0),
        };
        if (state.units.len(), state.enemies.len()) != expected_units {
            return Err(Error::Usage(format!(
                "state has {} units and {} enemies, {} expects {:?}",
                state.units.len(),
                state.enemies.len(),
                self.spec.name,
                expected_units
            )));
        }
        let in_bounds = |p: Pos| (p.x as usize) < self.spec.width && (p.y as usize) < self.spec.height;
        if !state.units.iter().chain(&state.enemies).all(|u| in_bounds(u.pos)) {
            return Err(Error::Usage("state has a coordinate outside the grid".into()));
        }
        if state.step_index > self.spec.horizon {
            return Err(Error::Usage("state step_index exceeds the horizon".into()));
        }
        Ok(())
    }

    fn split_action(&self, action: usize) -> Vec<usize> {
        match self.spec.name {
            EnvName::Pursuit2v1 => vec![action / PURSUIT_UNIT_ACTIONS, action % PURSUIT_UNIT_ACTIONS],
            _ => vec![action],
        }
    }

    pub fn step(&self, state: &State, action: usize, rng: &mut SimRng) -> Result<StepResult> {
        self.check_state(state)?;
        if self.status(state) != Outcome::Ongoing {
            return Err(Error::Usage("step called on a terminal state".into()));
        }
        if action >= self.action_count() {
            return Err(Error::Usage(format!(
                "action {action} out of range for {} actions",
                self.action_count()
            )));
        }
        let effective: Vec<usize> = self
            .split_action(action)
            .into_iter()
            .map(|a| if rng.gen::<f64>() < self.spec.slip { NOOP } else { a })
            .collect();
        Ok(self.apply(state, &effective, true))
    }

    /// Exact transition distribution of `step`, honoring the horizon.
    pub fn transitions(&self, state: &State, action: usize) -> Vec<(f64, StepResult)> {
        self.enumerate_effects(state, action, true)
    }

    fn enumerate_effects(
        &self,
        state: &State,
        action: usize,
        timeout: bool,
    ) -> Vec<(f64, StepResult)> {
        let intended = self.split_action(action);
        let slip = self.spec.slip;
        let mut combos: Vec<(f64, Vec<usize>)> = vec![(1.0, Vec::new())];
        for (i, &a) in intended.iter().enumerate() {
            let alive = state.units.get(i).is_none_or(Unit::alive);
            let options: &[(f64, usize)] = if alive {
                &[(1.0 - slip, a), (slip, NOOP)]
            } else {
                &[(1.0, NOOP)]
            };
            let mut next = Vec::with_capacity(combos.len() * 2);
            for (p, prefix) in &combos {
                for &(q, e) in options {
                    if q == 0.0 {
                        continue;
                    }
                    let mut v = prefix.clone();
                    v.push(e);
                    next.push((p * q, v));
                }
            }
            combos = next;
        }
        let mut out: Vec<(f64, StepResult)> = Vec::new();
        for (p, eff) in combos {
            let r = self.apply(state, &eff, timeout);
            match out
                .iter_mut()
                .find(|(_, o)| o.next_state == r.next_state && o.reward == r.reward)
            {
                Some((q, _)) => *q += p,
                None => out.push((p, r)),
            }
        }
        out
    }

    fn moved(&self, p: Pos, dir: usize) -> Pos {
        let (w, h) = (self.spec.width as u8, self.spec.height as u8);
        match dir {
            0 if p.y > 0 => Pos::new(p.x, p.y - 1),
            1 if p.y + 1 < h => Pos::new(p.x, p.y + 1),
            2 if p.x > 0 => Pos::new(p.x - 1, p.y),
            3 if p.x + 1 < w => Pos::new(p.x + 1, p.y),
            _ => p,
        }
    }

    fn apply(&self, state: &State, effective: &[usize], timeout: bool) -> StepResult {
        let mut next = state.clone();
        next.step_index += 1;
        let mut reward = -self.spec.step_cost;
        let outcome = match self.spec.name {
            EnvName::Gridnav | EnvName::Widegrid => {
                let p = self.moved(next.units[0].pos, effective[0]);
                next.units[0].pos = p;
                if p == self.spec.goal() {
                    reward += self.spec.win_reward;
                    Outcome::Win
                } else if self.spec.traps.contains(&p) {
                    reward -= self.spec.loss_penalty;
                    Outcome::Loss
                } else {
                    Outcome::Ongoing
                }
            }
            EnvName::Pursuit2v1 => self.apply_pursuit(&mut next, effective, &mut reward),
        };
        let outcome = if outcome == Outcome::Ongoing && timeout && next.step_index >= self.spec.horizon {
            Outcome::Timeout
        } else {
            outcome
        };
        StepResult {
            next_state: next,
            reward,
            terminal: outcome != Outcome::Ongoing,
            outcome,
        }
    }

    fn apply_pursuit(&self, next: &mut State, effective: &[usize], reward: &mut f64) -> Outcome {
        let enemy_pos = next.enemies[0].pos;
        for (unit, &a) in next.units.iter_mut().zip(effective) {
            if unit.alive() && a < ATTACK {
                let target = self.moved(unit.pos, a);
                if target != enemy_pos {
                    unit.pos = target;
                }
            }
        }
        let hitters = next
            .units
            .iter()
            .zip(effective)
            .filter(|(u, &a)| u.alive() && a == ATTACK && u.pos.manhattan(enemy_pos) <= 1)
            .count() as u32;
        let damage = hitters + if hitters >= 2 { FOCUS_FIRE_BONUS } else { 0 };
        let dealt = damage.min(next.enemies[0].hp);
        next.enemies[0].hp -= dealt;
        *reward += self.spec.hit_reward * dealt as f64;
        if next.enemies[0].hp == 0 {
            *reward += self.spec.win_reward;
            return Outcome::Win;
        }

        // Scripted enemy: hit the weakest adjacent unit, otherwise chase the
        // nearest one.
        let target = next
            .units
            .iter()
            .enumerate()
            .filter(|(_, u)| u.alive() && u.pos.manhattan(enemy_pos) <= 1)
            .min_by_key(|(i, u)| (u.hp, *i))
            .map(|(i, _)| i);
        if let Some(i) = target {
            let unit = &mut next.units[i];
            unit.hp -= 1;
            if unit.hp == 0 {
                unit.pos = Pos::new(0, 0);
            }
        } else if let Some((_, chase)) = next
            .units
            .iter()
            .enumerate()
            .filter(|(_, u)| u.alive())
            .min_by_key(|(i, u)| (u.pos.manhattan(enemy_pos), *i))
        {
            let chase = chase.pos;
            let dx = chase.x as i32 - enemy_pos.x as i32;
            let dy = chase.y as i32 - enemy_pos.y as i32;
            let x_move = match dx.signum() {
                1 => Some(3),
                -1 => Some(2),
                _ => None,
            };
            let y_move = match dy.signum() {
                1 => Some(1),
                -1 => Some(0),
                _ => None,
            };
            let order = if dx.abs() >= dy.abs() {
                [x_move, y_move]
            } else {
                [y_move, x_move]
            };
            for dir in order.into_iter().flatten() {
                let cand = self.moved(enemy_pos, dir);
                if !next.units.iter().any(|u| u.alive() && u.pos == cand) {
                    next.enemies[0].pos = cand;
                    break;
                }
            }
        }
        if next.units.iter().all(|u| !u.alive()) {
            *reward -= self.spec.loss_penalty;
            return Outcome::Loss;
        }
        Outcome::Ongoing
    }

    /// Time-independent key of a state (step_index is ignored).
    pub fn state_key(&self, state: &State) -> u64 {
        let cells = self.cells() as u64;
        match self.spec.name {
            EnvName::Gridnav | EnvName::Widegrid => self.cell_index(state.units[0].pos) as u64,
            EnvName::Pursuit2v1 => {
                let uh = self.spec.unit_hp as u64 + 1;
                let eh = self.spec.enemy_hp as u64 + 1;
                let mut key = 0u64;
                for u in &state.units {
                    let pos = if u.alive() { self.cell_index(u.pos) as u64 } else { 0 };
                    key = key * cells * uh + pos * uh + u.hp as u64;
                }
                let e = &state.enemies[0];
                key * cells * eh + self.cell_index(e.pos) as u64 * eh + e.hp as u64
            }
        }
    }

    pub fn feature_len(&self) -> usize {
        match self.spec.name {
            EnvName::Gridnav => self.cells() + 2,
            EnvName::Widegrid => self.cells() + 2 + self.spec.distractors,
            EnvName::Pursuit2v1 => 2 * 7 + 3,
        }
    }

    pub fn feature_names(&self) -> Vec<String> {
        match self.spec.name {
            EnvName::Gridnav | EnvName::Widegrid => {
                let mut names: Vec<String> = (0..self.cells()).map(|i| format!("cell_{i}")).collect();
                names.push("x".into());
                names.push("y".into());
                if self.spec.name == EnvName::Widegrid {
                    names.extend((0..self.spec.distractors).map(|j| format!("noise_{j}")));
                }
                names
            }
            EnvName::Pursuit2v1 => {
                let mut names = Vec::new();
                for i in 0..2 {
                    for f in ["alive", "x", "y", "hp", "dx", "dy", "adj"] {
                        names.push(format!("u{i}_{f}"));
                    }
                }
                names.extend(["enemy_x", "enemy_y", "enemy_hp"].map(String::from));
                names
            }
        }
    }

    pub fn featurize(&self, state: &State) -> Vec<f64> {
        let wx = (self.spec.width - 1) as f64;
        let hy = (self.spec.height - 1) as f64;
        let mut f = Vec::with_capacity(self.feature_len());
        match self.spec.name {
            EnvName::Gridnav | EnvName::Widegrid => {
                let p = state.units[0].pos;
                f.resize(self.cells(), 0.0);
                f[self.cell_index(p)] = 1.0;
                f.push(p.x as f64 / wx);
                f.push(p.y as f64 / hy);
                if self.spec.name == EnvName::Widegrid {
                    let base = splitmix64(
                        self.spec.rng_seed
                            ^ splitmix64(self.state_key(state))
                            ^ (state.step_index as u64).rotate_left(32),
                    );
                    for j in 0..self.spec.distractors {
                        let h = splitmix64(base.wrapping_add(j as u64));
                        f.push((h >> 11) as f64 / (1u64 << 53) as f64);
                    }
                }
            }
            EnvName::Pursuit2v1 => {
                let e = &state.enemies[0];
                for u in &state.units {
                    if u.alive() {
                        let dx = e.pos.x as f64 - u.pos.x as f64;
                        let dy = e.pos.y as f64 - u.pos.y as f64;
                        f.extend([
                            1.0,
                            u.pos.x as f64 / wx,
                            u.pos.y as f64 / hy,
                            u.hp as f64 / self.spec.unit_hp as f64,
                            dx / wx,
                            dy / hy,
                            if u.pos.manhattan(e.pos) <= 1 { 1.0 } else { 0.0 },
                        ]);
                    } else {
                        f.extend([0.0; 7]);
                    }
                }
                f.push(e.pos.x as f64 / wx);
                f.push(e.pos.y as f64 / hy);
                f.push(e.hp as f64 / self.spec.enemy_hp as f64);
            }
        }
        f
    }

    pub fn enumerate_states(&self) -> Result<Vec<State>> {
        self.enumerate_states_with_limit(MAX_ENUMERATED_STATES)
    }

    /// Breadth-first search over the horizon-free transition graph. Returned
    /// states have `step_index == 0`.
    pub fn enumerate_states_with_limit(&self, limit: usize) -> Result<Vec<State>> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        let mut queue = VecDeque::new();
        for s in self.initial_states() {
            if self.status(&s) == Outcome::Ongoing && seen.insert(self.state_key(&s)) {
                queue.push_back(s.clone());
                out.push(s);
            }
        }
        while let Some(s) = queue.pop_front() {
            for a in 0..self.action_count() {
                for (_, r) in self.enumerate_effects(&s, a, false) {
                    if r.terminal {
                        continue;
                    }
                    let mut next = r.next_state;
                    next.step_index = 0;
                    if seen.insert(self.state_key(&next)) {
                        if out.len() >= limit {
                            return Err(Error::Capacity {
                                what: format!("{}", self.spec.name),
                                count: out.len() + 1,
                                limit,
                            });
                        }
                        queue.push_back(next.clone());
                        out.push(next);
                    }
                }
            }
        }
        Ok(out)
    }
}

impl Mdp for Env {
    type State = State;

    fn action_count(&self) -> usize {
        Env::action_count(self)
    }

    fn state_key(&self, state: &State) -> u64 {
        Env::state_key(self, state)
    }

    fn initial_state(&self, rng: &mut SimRng) -> State {
        self.reset(rng.gen())
    }

    fn sample(&self, state: &State, action: usize, rng: &mut SimRng) -> Result<Sampled<State>> {
        let r = self.step(state, action, rng)?;
        let kind = match r.outcome {
            Outcome::Ongoing => StepKind::Continue,
            Outcome::Timeout => StepKind::Truncated,
            Outcome::Win | Outcome::Loss => StepKind::Terminal,
        };
        Ok(Sampled {
            next: r.next_state,
            reward: r.reward,
            kind,
        })
    }
}

impl EnumerableMdp for Env {
    fn states(&self) -> Result<Vec<State>> {
        self.enumerate_states()
    }

    fn branches(&self, state: &State, action: usize) -> Vec<Branch<State>> {
        let mut s = state.clone();
        s.step_index = 0;
        self.enumerate_effects(&s, action, false)
            .into_iter()
            .map(|(prob, r)| Branch {
                prob,
                reward: r.reward,
                next: if r.terminal {
                    None
                } else {
                    let mut n = r.next_state;
                    n.step_index = 0;
                    Some(n)
                },
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::rng_from_seed;

    fn grid(w: usize, h: usize, traps: Vec<Pos>) -> Env {
        let mut spec = EnvSpec::gridnav(w, h);
        spec.traps = traps;
        spec.slip = 0.0;
        Env::new(spec).unwrap()
    }

    #[test]
    fn gridnav_reset_is_start_cell() {
        let env = Env::new(EnvSpec::gridnav(5, 5)).unwrap();
        let s = env.reset(0);
        assert_eq!(s.units[0].pos, Pos::new(0, 0));
        assert_eq!(s.step_index, 0);
        assert_eq!(env.reset(0), s);
    }

    #[test]
    fn pursuit_reset_in_bounds_and_deterministic() {
        let env = Env::new(EnvSpec::pursuit(4, 3)).unwrap();
        for seed in 0..200u64 {
            let s = env.reset(seed);
            assert_eq!(s, env.reset(seed));
            assert_eq!(s.units.len(), 2);
            assert_eq!(s.enemies.len(), 1);
            for u in s.units.iter().chain(&s.enemies) {
                assert!((u.pos.x as usize) < 4 && (u.pos.y as usize) < 3);
                assert!(u.alive());
            }
            assert_ne!(s.units[0].pos, s.units[1].pos);
        }
        let s7 = env.reset(7);
        assert_eq!(s7.enemies[0].hp, 4);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = EnvSpec::gridnav(5, 5);
        spec.horizon = 0;
        assert!(matches!(Env::new(spec), Err(Error::Config(_))));
        let mut spec = EnvSpec::gridnav(5, 5);
        spec.reward_bounds = (1.0, 1.0);
        assert!(Env::new(spec).is_err());
        let spec = EnvSpec::gridnav(1, 5);
        assert!(Env::new(spec).is_err());
        let mut spec = EnvSpec::gridnav(5, 5);
        spec.reward_bounds = (-0.5, 1.0);
        assert!(Env::new(spec).is_err(), "bounds narrower than achievable range");
    }

    #[test]
    fn stepping_into_goal_wins() {
        let env = grid(3, 3, vec![]);
        let mut s = env.reset(0);
        s.units[0].pos = Pos::new(2, 1);
        let r = env.step(&s, 1, &mut rng_from_seed(0)).unwrap();
        assert!(r.terminal);
        assert_eq!(r.outcome, Outcome::Win);
        assert!((r.reward - (1.0 - 0.04)).abs() < 1e-12);
    }

    #[test]
    fn last_step_times_out() {
        let env = grid(3, 3, vec![]);
        let mut s = env.reset(0);
        s.step_index = env.spec().horizon - 1;
        // moving up from the top row stays put
        let r = env.step(&s, 0, &mut rng_from_seed(0)).unwrap();
        assert_eq!(r.outcome, Outcome::Timeout);
        assert!(r.terminal);
        assert_eq!(r.next_state.step_index, env.spec().horizon);
        assert!(env.step(&r.next_state, 0, &mut rng_from_seed(0)).is_err());
    }

    #[test]
    fn stepping_terminal_state_is_usage_error() {
        let env = grid(3, 3, vec![]);
        let mut s = env.reset(0);
        s.units[0].pos = Pos::new(2, 2);
        assert!(matches!(
            env.step(&s, 0, &mut rng_from_seed(0)),
            Err(Error::Usage(_))
        ));
        assert!(env.step(&env.reset(0), 9, &mut rng_from_seed(0)).is_err());
    }

    /// Two-cell board: units at (0,0) and (1,1), enemy at (1,0) with 1 HP.
    #[test]
    fn pursuit_focus_fire_on_weak_enemy_wins() {
        let mut spec = EnvSpec::pursuit(2, 2);
        spec.slip = 0.0;
        let env = Env::new(spec).unwrap();
        let s = State {
            units: vec![
                Unit { pos: Pos::new(0, 0), hp: 2 },
                Unit { pos: Pos::new(1, 1), hp: 2 },
            ],
            enemies: vec![Unit { pos: Pos::new(1, 0), hp: 1 }],
            step_index: 0,
        };
        let both_attack = ATTACK * PURSUIT_UNIT_ACTIONS + ATTACK;
        let r = env.step(&s, both_attack, &mut rng_from_seed(0)).unwrap();
        assert_eq!(r.outcome, Outcome::Win);
        // Enumerate every joint action on this board: only attacks by an
        // adjacent unit can remove the last hit point.
        for a in 0..env.action_count() {
            let r = env.step(&s, a, &mut rng_from_seed(0)).unwrap();
            let attacks = a / 5 == ATTACK || a % 5 == ATTACK;
            assert_eq!(r.outcome == Outcome::Win, attacks, "action {a}");
        }
    }

    #[test]
    fn pursuit_enemy_kills_lone_unit() {
        let mut spec = EnvSpec::pursuit(3, 3);
        spec.slip = 0.0;
        let env = Env::new(spec).unwrap();
        let s = State {
            units: vec![
                Unit { pos: Pos::new(0, 0), hp: 1 },
                Unit { pos: Pos::new(0, 0), hp: 0 },
            ],
            enemies: vec![Unit { pos: Pos::new(1, 0), hp: 4 }],
            step_index: 0,
        };
        // unit 0 attacks once, enemy hits back
        let r = env.step(&s, ATTACK * 5, &mut rng_from_seed(0)).unwrap();
        assert_eq!(r.outcome, Outcome::Loss);
        assert_eq!(r.next_state.enemies[0].hp, 3);
    }

    #[test]
    fn featurize_one_hot_position() {
        let env = grid(3, 3, vec![]);
        let f = env.featurize(&env.reset(0));
        assert_eq!(f.len(), 11);
        assert_eq!(f[0], 1.0);
        assert!(f[1..9].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn widegrid_feature_length_includes_distractors() {
        let env = Env::new(EnvSpec::widegrid(8, 8, 32)).unwrap();
        let s = env.reset(0);
        let f = env.featurize(&s);
        assert_eq!(f.len(), 64 + 2 + 32);
        assert_eq!(f.len(), env.feature_names().len());
        assert_eq!(f, env.featurize(&s));
        assert!(f.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn featurize_injective_on_enumerated_states() {
        for env in [
            Env::new(EnvSpec::gridnav(5, 5)).unwrap(),
            Env::new(EnvSpec::pursuit(4, 3)).unwrap(),
        ] {
            let states = env.enumerate_states().unwrap();
            let mut seen = HashSet::new();
            for s in &states {
                let bits: Vec<u64> = env.featurize(s).iter().map(|v| v.to_bits()).collect();
                assert!(seen.insert(bits), "duplicate features in {}", env.spec().name);
            }
        }
    }

    /// Independent reachability oracle over positions only.
    fn bfs_positions(w: usize, h: usize, traps: &[Pos]) -> usize {
        let goal = Pos::new(w as u8 - 1, h as u8 - 1);
        let mut seen = HashSet::from([Pos::new(0, 0)]);
        let mut queue = VecDeque::from([Pos::new(0, 0)]);
        while let Some(p) = queue.pop_front() {
            if p == goal || traps.contains(&p) {
                continue;
            }
            let (x, y) = (p.x as i32, p.y as i32);
            for (nx, ny) in [(x, y - 1), (x, y + 1), (x - 1, y), (x + 1, y)] {
                if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                    let q = Pos::new(nx as u8, ny as u8);
                    if seen.insert(q) {
                        queue.push_back(q);
                    }
                }
            }
        }
        seen.iter().filter(|p| **p != goal && !traps.contains(p)).count()
    }

    #[test]
    fn enumerate_matches_bfs_and_hand_counts() {
        // 2x2: (0,0), (1,0), (0,1); (1,1) is the goal
        assert_eq!(grid(2, 2, vec![]).enumerate_states().unwrap().len(), 3);
        assert_eq!(bfs_positions(2, 2, &[]), 3);

        let traps = vec![Pos::new(1, 1)];
        let states = grid(3, 3, traps.clone()).enumerate_states().unwrap();
        assert_eq!(states.len(), bfs_positions(3, 3, &traps));
        assert_eq!(states.len(), 7);

        let env = Env::new(EnvSpec::pursuit(4, 3)).unwrap();
        let states = env.enumerate_states().unwrap();
        let keys: HashSet<u64> = states.iter().map(|s| env.state_key(s)).collect();
        assert_eq!(keys.len(), states.len());
        assert!(states.iter().all(|s| env.status(s) == Outcome::Ongoing));
    }

    #[test]
    fn enumerate_capacity_guard() {
        let env = Env::new(EnvSpec::pursuit(4, 3)).unwrap();
        assert!(matches!(
            env.enumerate_states_with_limit(10),
            Err(Error::Capacity { limit: 10, .. })
        ));
    }

    #[test]
    fn transitions_sum_to_one_and_match_sampling() {
        let env = Env::new(EnvSpec::pursuit(4, 3)).unwrap();
        let s = env.reset(3);
        for a in [0, 7, 24] {
            let t = env.transitions(&s, a);
            let total: f64 = t.iter().map(|(p, _)| p).sum();
            assert!((total - 1.0).abs() < 1e-12);
            let mut rng = rng_from_seed(a as u64);
            for _ in 0..50 {
                let r = env.step(&s, a, &mut rng).unwrap();
                assert!(t.iter().any(|(_, o)| *o == r));
            }
        }
    }

    #[test]
    fn random_episodes_stay_within_bounds() {
        for spec in [
            EnvSpec::gridnav(5, 5),
            EnvSpec::pursuit(4, 3),
            EnvSpec::widegrid(8, 8, 32),
        ] {
            let env = Env::new(spec).unwrap();
            let (lo, hi) = env.spec().reward_bounds;
            let mut rng = rng_from_seed(11);
            for ep in 0..10_000u64 {
                let mut s = env.reset(ep);
                let mut total = 0.0;
                let mut len = 0;
                loop {
                    let a = rng.gen_range(0..env.action_count());
                    let r = env.step(&s, a, &mut rng).unwrap();
                    total += r.reward;
                    len += 1;
                    s = r.next_state;
                    if r.terminal {
                        assert_ne!(r.outcome, Outcome::Ongoing);
                        if r.outcome == Outcome::Timeout {
                            assert_eq!(s.step_index, env.spec().horizon);
                        }
                        break;
                    }
                }
                assert!(len <= env.spec().horizon);
                assert!(total >= lo - 1e-9 && total <= hi + 1e-9, "{total} not in [{lo}, {hi}]");
            }
        }
    }

    #[test]
    fn identical_action_sequences_give_identical_trajectories() {
        let env = Env::new(EnvSpec::pursuit(4, 3)).unwrap();
        let run = || {
            let mut rng = rng_from_seed(5);
            let mut s = env.reset(5);
            let mut out = Vec::new();
            for t in 0..20 {
                let r = env.step(&s, (t * 7) % 25, &mut rng).unwrap();
                out.push((r.next_state.clone(), r.reward.to_bits()));
                if r.terminal {
                    break;
                }
                s = r.next_state;
            }
            out
        };
        assert_eq!(run(), run());
    }
}
