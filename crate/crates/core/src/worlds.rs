//! Deterministic goal-reaching worlds and scripted experts.
//!
//! States are plain coordinate vectors: `[x, y]` in the unit square for the
//! point mass, `[col, row]` for the grid. Actions are `[ax, ay]` for the point
//! mass and `[move_index]` for the grid (see [`GridMove`]).

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::trajstore::{Trajectory, TrajectoryMeta};

pub const IMAGE_SIDE: usize = 16;
pub const IMAGE_DIM: usize = IMAGE_SIDE * IMAGE_SIDE;

/// Proportional gain of the point-mass expert.
pub const EXPERT_GAIN: f64 = 5.0;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum WorldError {
    #[error("invalid world: {0}")]
    Invalid(String),
    #[error("goal {goal:?} is unreachable from {start:?}")]
    Unreachable { start: Vec<f64>, goal: Vec<f64> },
    #[error("expert did not reach {goal:?} within {max_len} frames")]
    GoalNotReached { goal: Vec<f64>, max_len: usize },
    #[error("state {0:?} is outside the world or blocked")]
    InvalidState(Vec<f64>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationMode {
    RawState,
    Image16,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Hard,
}

impl Difficulty {
    /// Episode horizon: 50 steps for Easy, 100 for Hard.
    pub fn horizon(self) -> usize {
        match self {
            Difficulty::Easy => 50,
            Difficulty::Hard => 100,
        }
    }
}

/// Easy starts lie within this radius of the goal (point mass).
pub const EASY_RADIUS: f64 = 0.2;
/// Easy starts lie within this many moves of the goal (grid).
pub const EASY_GRID_STEPS: usize = 4;

/// Axis-aligned rectangle `[x0, x1] × [y0, y1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn contains(&self, p: &[f64]) -> bool {
        p[0] >= self.x0 && p[0] <= self.x1 && p[1] >= self.y0 && p[1] <= self.y1
    }
}

fn default_dt() -> f64 {
    0.05
}
fn default_max_action() -> f64 {
    1.0
}
fn default_tolerance() -> f64 {
    0.05
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointMassWorld {
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_max_action")]
    pub max_action: f64,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default)]
    pub obstacles: Vec<Rect>,
}

impl Default for PointMassWorld {
    fn default() -> Self {
        Self {
            dt: default_dt(),
            max_action: default_max_action(),
            tolerance: default_tolerance(),
            obstacles: Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridMove {
    Up,
    Down,
    Left,
    Right,
    Stay,
}

impl GridMove {
    pub const ALL: [GridMove; 5] = [
        GridMove::Up,
        GridMove::Down,
        GridMove::Left,
        GridMove::Right,
        GridMove::Stay,
    ];

    fn delta(self) -> (i64, i64) {
        match self {
            GridMove::Up => (0, -1),
            GridMove::Down => (0, 1),
            GridMove::Left => (-1, 0),
            GridMove::Right => (1, 0),
            GridMove::Stay => (0, 0),
        }
    }

    fn index(self) -> usize {
        GridMove::ALL.iter().position(|&m| m == self).unwrap()
    }

    /// Decodes `[index]`, rounding and clamping into range.
    pub fn from_action(action: &[f64]) -> GridMove {
        let i = action.first().copied().unwrap_or(4.0).round();
        let i = if i.is_finite() { i.clamp(0.0, 4.0) as usize } else { 4 };
        GridMove::ALL[i]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridWorld {
    pub width: usize,
    pub height: usize,
    /// Blocked `[col, row]` cells.
    #[serde(default)]
    pub blocked: Vec<[usize; 2]>,
}

impl Default for GridWorld {
    /// 10×10 grid with a 2×2 block in the centre.
    fn default() -> Self {
        Self {
            width: 10,
            height: 10,
            blocked: vec![[4, 4], [5, 4], [4, 5], [5, 5]],
        }
    }
}

impl GridWorld {
    fn is_free(&self, c: usize, r: usize) -> bool {
        c < self.width && r < self.height && !self.blocked.contains(&[c, r])
    }

    fn cell(&self, state: &[f64]) -> (usize, usize) {
        (state[0].round() as usize, state[1].round() as usize)
    }

    fn free_cells(&self) -> Vec<(usize, usize)> {
        (0..self.height)
            .flat_map(|r| (0..self.width).map(move |c| (c, r)))
            .filter(|&(c, r)| self.is_free(c, r))
            .collect()
    }

    fn moved(&self, (c, r): (usize, usize), m: GridMove) -> (usize, usize) {
        let (dc, dr) = m.delta();
        let (nc, nr) = (c as i64 + dc, r as i64 + dr);
        if nc < 0 || nr < 0 || !self.is_free(nc as usize, nr as usize) {
            (c, r)
        } else {
            (nc as usize, nr as usize)
        }
    }

    /// Shortest-path move counts to `goal` for every cell (`usize::MAX` if
    /// unreachable). Moves are symmetric, so a search from the goal suffices.
    pub fn distances_to(&self, goal: (usize, usize)) -> Vec<usize> {
        let mut dist = vec![usize::MAX; self.width * self.height];
        if !self.is_free(goal.0, goal.1) {
            return dist;
        }
        let mut queue = VecDeque::from([goal]);
        dist[goal.1 * self.width + goal.0] = 0;
        while let Some(cell) = queue.pop_front() {
            let d = dist[cell.1 * self.width + cell.0];
            for m in &GridMove::ALL[..4] {
                let n = self.moved(cell, *m);
                let slot = &mut dist[n.1 * self.width + n.0];
                if *slot == usize::MAX {
                    *slot = d + 1;
                    queue.push_back(n);
                }
            }
        }
        dist
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum World {
    PointMass(PointMassWorld),
    Grid(GridWorld),
}

impl World {
    pub fn validate(&self) -> Result<(), WorldError> {
        match self {
            World::PointMass(w) => {
                if !(w.dt > 0.0) || !(w.tolerance > 0.0) || !(w.max_action > 0.0) {
                    return Err(WorldError::Invalid(format!(
                        "dt, tolerance and max_action must be > 0 (got {}, {}, {})",
                        w.dt, w.tolerance, w.max_action
                    )));
                }
                for o in &w.obstacles {
                    let inside = |v: f64| (0.0..=1.0).contains(&v);
                    if !(inside(o.x0) && inside(o.x1) && inside(o.y0) && inside(o.y1))
                        || o.x0 > o.x1
                        || o.y0 > o.y1
                    {
                        return Err(WorldError::Invalid(format!("obstacle {o:?} outside bounds")));
                    }
                }
            }
            World::Grid(g) => {
                if g.width == 0 || g.height == 0 {
                    return Err(WorldError::Invalid("grid must be at least 1x1".into()));
                }
                if let Some(b) = g.blocked.iter().find(|b| b[0] >= g.width || b[1] >= g.height) {
                    return Err(WorldError::Invalid(format!("blocked cell {b:?} outside grid")));
                }
                if g.free_cells().len() < 2 {
                    return Err(WorldError::Invalid("grid needs two free cells".into()));
                }
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self {
            World::PointMass(_) => "point_mass",
            World::Grid(_) => "grid",
        }
    }

    pub fn state_dim(&self) -> usize {
        2
    }

    pub fn action_dim(&self) -> usize {
        match self {
            World::PointMass(_) => 2,
            World::Grid(_) => 1,
        }
    }

    /// Width of the action box per dimension (used to scale planner noise).
    pub fn action_range(&self) -> f64 {
        match self {
            World::PointMass(w) => 2.0 * w.max_action,
            World::Grid(_) => 4.0,
        }
    }

    /// Per-dimension action limits `(low, high)`.
    pub fn action_bounds(&self) -> (f64, f64) {
        match self {
            World::PointMass(w) => (-w.max_action, w.max_action),
            World::Grid(_) => (0.0, 4.0),
        }
    }

    pub fn tolerance(&self) -> f64 {
        match self {
            World::PointMass(w) => w.tolerance,
            World::Grid(_) => 0.5,
        }
    }

    pub fn obs_dim(&self, mode: ObservationMode) -> usize {
        match (self, mode) {
            (_, ObservationMode::Image16) => IMAGE_DIM,
            (World::PointMass(_), ObservationMode::RawState) => 2,
            (World::Grid(g), ObservationMode::RawState) => g.width * g.height,
        }
    }

    pub fn is_valid_state(&self, state: &[f64]) -> bool {
        if state.len() != 2 || !state.iter().all(|v| v.is_finite()) {
            return false;
        }
        match self {
            World::PointMass(w) => {
                state.iter().all(|v| (0.0..=1.0).contains(v))
                    && !w.obstacles.iter().any(|o| o.contains(state))
            }
            World::Grid(g) => {
                state.iter().all(|v| *v >= 0.0 && v.fract() == 0.0) && {
                    let (c, r) = g.cell(state);
                    g.is_free(c, r)
                }
            }
        }
    }

    /// Deterministic transition. Actions are clipped; moves into obstacles,
    /// walls or blocked cells leave the state unchanged.
    pub fn step(&self, state: &[f64], action: &[f64]) -> Vec<f64> {
        match self {
            World::PointMass(w) => {
                let next: Vec<f64> = state
                    .iter()
                    .zip(action)
                    .map(|(x, a)| {
                        let a = if a.is_finite() { a.clamp(-w.max_action, w.max_action) } else { 0.0 };
                        (x + w.dt * a).clamp(0.0, 1.0)
                    })
                    .collect();
                if w.obstacles.iter().any(|o| o.contains(&next)) {
                    state.to_vec()
                } else {
                    next
                }
            }
            World::Grid(g) => {
                let (c, r) = g.moved(g.cell(state), GridMove::from_action(action));
                vec![c as f64, r as f64]
            }
        }
    }

    pub fn observe(&self, state: &[f64], mode: ObservationMode) -> Vec<f64> {
        match (self, mode) {
            (World::PointMass(_), ObservationMode::RawState) => state.to_vec(),
            (World::Grid(g), ObservationMode::RawState) => {
                let (c, r) = g.cell(state);
                let mut v = vec![0.0; g.width * g.height];
                v[r * g.width + c] = 1.0;
                v
            }
            (World::PointMass(w), ObservationMode::Image16) => {
                let mut img = vec![0.0; IMAGE_DIM];
                for r in 0..IMAGE_SIDE {
                    for c in 0..IMAGE_SIDE {
                        let centre = [(c as f64 + 0.5) / 16.0, (r as f64 + 0.5) / 16.0];
                        if w.obstacles.iter().any(|o| o.contains(&centre)) {
                            img[r * IMAGE_SIDE + c] = 1.0;
                        }
                    }
                }
                let to_cell = |v: f64| ((v * IMAGE_SIDE as f64) as usize).min(IMAGE_SIDE - 1);
                img[to_cell(state[1]) * IMAGE_SIDE + to_cell(state[0])] += 1.0;
                img
            }
            (World::Grid(g), ObservationMode::Image16) => {
                let mut img = vec![0.0; IMAGE_DIM];
                for b in &g.blocked {
                    if b[0] < IMAGE_SIDE && b[1] < IMAGE_SIDE {
                        img[b[1] * IMAGE_SIDE + b[0]] = 1.0;
                    }
                }
                let (c, r) = g.cell(state);
                if c < IMAGE_SIDE && r < IMAGE_SIDE {
                    img[r * IMAGE_SIDE + c] += 1.0;
                }
                img
            }
        }
    }

    /// Euclidean distance between two states.
    pub fn state_distance(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    }

    pub fn reached(&self, state: &[f64], goal: &[f64]) -> bool {
        match self {
            World::PointMass(w) => self.state_distance(state, goal) <= w.tolerance,
            World::Grid(g) => g.cell(state) == g.cell(goal),
        }
    }

    fn uniform_free_state<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            World::PointMass(_) => loop {
                let s = vec![rng.random::<f64>(), rng.random::<f64>()];
                if self.is_valid_state(&s) {
                    return s;
                }
            },
            World::Grid(g) => {
                let cells = g.free_cells();
                let (c, r) = cells[rng.random_range(0..cells.len())];
                vec![c as f64, r as f64]
            }
        }
    }

    /// Draws a `(start, goal)` pair of distinct free states. Easy starts lie
    /// near the goal; Hard starts are uniform.
    pub fn sample_task<R: Rng + ?Sized>(
        &self,
        difficulty: Difficulty,
        rng: &mut R,
    ) -> (Vec<f64>, Vec<f64>) {
        loop {
            let goal = self.uniform_free_state(rng);
            match (self, difficulty) {
                (_, Difficulty::Hard) => {
                    let start = self.uniform_free_state(rng);
                    if !self.reached(&start, &goal) {
                        return (start, goal);
                    }
                }
                (World::PointMass(w), Difficulty::Easy) => {
                    // rejection sample the disc; retry the goal if it is hemmed in
                    for _ in 0..100 {
                        let start = vec![
                            goal[0] + rng.random_range(-EASY_RADIUS..EASY_RADIUS),
                            goal[1] + rng.random_range(-EASY_RADIUS..EASY_RADIUS),
                        ];
                        let d = self.state_distance(&start, &goal);
                        if d <= EASY_RADIUS && d > w.tolerance && self.is_valid_state(&start) {
                            return (start, goal);
                        }
                    }
                }
                (World::Grid(g), Difficulty::Easy) => {
                    let dist = g.distances_to(g.cell(&goal));
                    let near: Vec<_> = g
                        .free_cells()
                        .into_iter()
                        .filter(|&(c, r)| {
                            let d = dist[r * g.width + c];
                            (1..=EASY_GRID_STEPS).contains(&d)
                        })
                        .collect();
                    if !near.is_empty() {
                        let (c, r) = near[rng.random_range(0..near.len())];
                        return (vec![c as f64, r as f64], goal);
                    }
                }
            }
        }
    }

    /// Scripted demonstration from `start` to `goal`.
    ///
    /// The point-mass expert applies `a = k (goal − x) + σ ε`; the grid expert
    /// follows a shortest path and, with probability `noise_scale`, takes a
    /// uniformly random move instead. The episode ends once the goal is
    /// reached (after at least one step) and has at most `max_len` frames.
    pub fn expert_rollout<R: Rng + ?Sized>(
        &self,
        start: &[f64],
        goal: &[f64],
        noise_scale: f64,
        max_len: usize,
        mode: ObservationMode,
        rng: &mut R,
    ) -> Result<Trajectory, WorldError> {
        for s in [start, goal] {
            if !self.is_valid_state(s) {
                return Err(WorldError::InvalidState(s.to_vec()));
            }
        }
        let max_len = max_len.max(2);
        let mut states = vec![start.to_vec()];
        let mut actions: Vec<Vec<f64>> = Vec::new();

        let grid_dist = match self {
            World::Grid(g) => {
                let d = g.distances_to(g.cell(goal));
                let (c, r) = g.cell(start);
                if d[r * g.width + c] == usize::MAX {
                    return Err(WorldError::Unreachable {
                        start: start.to_vec(),
                        goal: goal.to_vec(),
                    });
                }
                Some(d)
            }
            World::PointMass(_) => None,
        };

        while states.len() < max_len {
            let x = states.last().unwrap();
            let action = match self {
                World::PointMass(_) => goal
                    .iter()
                    .zip(x)
                    .map(|(g, x)| {
                        let eps: f64 = StandardNormal.sample(rng);
                        EXPERT_GAIN * (g - x) + noise_scale * eps
                    })
                    .collect(),
                World::Grid(g) => {
                    let dist = grid_dist.as_ref().unwrap();
                    let cell = g.cell(x);
                    let m = if cell == g.cell(goal) {
                        GridMove::Stay
                    } else if noise_scale > 0.0 && rng.random::<f64>() < noise_scale {
                        GridMove::ALL[rng.random_range(0..4)]
                    } else {
                        let here = dist[cell.1 * g.width + cell.0];
                        *GridMove::ALL[..4]
                            .iter()
                            .find(|&&m| {
                                let n = g.moved(cell, m);
                                dist[n.1 * g.width + n.0] < here
                            })
                            .expect("a reachable cell has a downhill neighbour")
                    };
                    vec![m.index() as f64]
                }
            };
            let next = self.step(x, &action);
            actions.push(action);
            states.push(next);
            if self.reached(states.last().unwrap(), goal) {
                break;
            }
        }
        if !self.reached(states.last().unwrap(), goal) {
            return Err(WorldError::GoalNotReached {
                goal: goal.to_vec(),
                max_len,
            });
        }
        let frames: Vec<Vec<f64>> = states.iter().map(|s| self.observe(s, mode)).collect();
        let meta = TrajectoryMeta {
            world: self.name().to_string(),
            start: start.to_vec(),
            goal: goal.to_vec(),
            noise: noise_scale,
            tag: "expert".into(),
        };
        Ok(Trajectory::new(frames, Some(actions), Some(states), meta)
            .expect("rollout produces consistent rows"))
    }
}
