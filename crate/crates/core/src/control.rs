//! Control on top of a frozen encoder: the embedding reward, MPPI planning
//! with ground-truth rollouts, and offline policy learning by reward-weighted
//! regression (behavior cloning being the uniform-weight special case).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{Activation, Encoder, EncoderConfig, EncoderError, Layer};
use crate::gradcore::{Adam, GradError, Graph, Tensor};
use crate::trajstore::{StoreError, Trajectory, TrajectoryDataset, TrajectoryMeta};
use crate::worlds::{Difficulty, ObservationMode, World, WorldError, EXPERT_GAIN};

#[derive(Debug, thiserror::Error)]
pub enum ControlError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("goal spec needs at least one frame")]
    EmptyGoal,
    #[error("observation has {got} dims, encoder expects {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("dataset has no actions")]
    MissingActions,
    #[error("dataset has no transitions")]
    NoTransitions,
    #[error("policy training diverged at step {0}")]
    Diverged(usize),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("malformed policy file: {0}")]
    PolicyFile(#[from] serde_json::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// One or more goal frames, summarized by the mean of their embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct GoalSpec {
    frames: Vec<Vec<f64>>,
    embedding: Vec<f64>,
}

impl GoalSpec {
    pub fn new(encoder: &Encoder, frames: Vec<Vec<f64>>) -> Result<Self, ControlError> {
        if frames.is_empty() {
            return Err(ControlError::EmptyGoal);
        }
        let mut embedding = vec![0.0; encoder.output_dim()];
        for f in &frames {
            let e = embed(encoder, f)?;
            for (acc, v) in embedding.iter_mut().zip(e) {
                *acc += v;
            }
        }
        let n = frames.len() as f64;
        embedding.iter_mut().for_each(|v| *v /= n);
        Ok(Self { frames, embedding })
    }

    pub fn single(encoder: &Encoder, frame: &[f64]) -> Result<Self, ControlError> {
        Self::new(encoder, vec![frame.to_vec()])
    }

    pub fn frames(&self) -> &[Vec<f64>] {
        &self.frames
    }

    pub fn embedding(&self) -> &[f64] {
        &self.embedding
    }

    /// `S = −‖e − ḡ‖` for an already computed embedding.
    pub fn score(&self, embedding: &[f64]) -> f64 {
        -euclid(embedding, &self.embedding)
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn embed(encoder: &Encoder, obs: &[f64]) -> Result<Vec<f64>, ControlError> {
    if obs.len() != encoder.input_dim() {
        return Err(ControlError::DimMismatch {
            expected: encoder.input_dim(),
            got: obs.len(),
        });
    }
    Ok(encoder.embed(obs)?)
}

/// Negative embedding distance of `obs` to the goal.
pub fn distance(encoder: &Encoder, obs: &[f64], goal: &GoalSpec) -> Result<f64, ControlError> {
    Ok(goal.score(&embed(encoder, obs)?))
}

/// `R(o, o') = S(o') − S(o)`.
pub fn embedding_reward(
    encoder: &Encoder,
    obs: &[f64],
    next_obs: &[f64],
    goal: &GoalSpec,
) -> Result<f64, ControlError> {
    Ok(distance(encoder, next_obs, goal)? - distance(encoder, obs, goal)?)
}

/// The same reward written as `(1 − γ) S(o') + (γ S(o') − S(o))`.
pub fn shaped_embedding_reward(
    encoder: &Encoder,
    obs: &[f64],
    next_obs: &[f64],
    goal: &GoalSpec,
    gamma: f64,
) -> Result<f64, ControlError> {
    let s = distance(encoder, obs, goal)?;
    let s_next = distance(encoder, next_obs, goal)?;
    Ok((1.0 - gamma) * s_next + (gamma * s_next - s))
}

/// Per-frame `S` values along a trajectory, embedded in one batch.
pub fn trajectory_scores(
    encoder: &Encoder,
    frames: &Tensor,
    goal: &GoalSpec,
) -> Result<Vec<f64>, ControlError> {
    if frames.cols() != encoder.input_dim() {
        return Err(ControlError::DimMismatch {
            expected: encoder.input_dim(),
            got: frames.cols(),
        });
    }
    let emb = encoder.embed_batch(frames)?;
    Ok((0..emb.rows()).map(|i| goal.score(emb.row(i))).collect())
}

fn default_plan_horizon() -> usize {
    12
}
fn default_samples() -> usize {
    32
}
fn default_noise_fraction() -> f64 {
    0.1
}
fn default_temperature() -> f64 {
    0.05
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MppiConfig {
    #[serde(default = "default_plan_horizon")]
    pub horizon: usize,
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Sampling standard deviation as a fraction of the action range.
    #[serde(default = "default_noise_fraction")]
    pub noise_fraction: f64,
    /// Softmax temperature `λ`.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Shift the previous mean sequence forward instead of resetting it.
    #[serde(default = "default_true")]
    pub warm_start: bool,
    /// Episode length; `None` uses the difficulty's horizon.
    #[serde(default)]
    pub episode_horizon: Option<usize>,
    /// End the episode as soon as the goal is within tolerance.
    #[serde(default = "default_true")]
    pub stop_on_success: bool,
}

impl Default for MppiConfig {
    fn default() -> Self {
        Self {
            horizon: default_plan_horizon(),
            samples: default_samples(),
            noise_fraction: default_noise_fraction(),
            temperature: default_temperature(),
            warm_start: true,
            episode_horizon: None,
            stop_on_success: true,
        }
    }
}

impl MppiConfig {
    pub fn validate(&self) -> Result<(), ControlError> {
        if self.horizon == 0 || self.samples < 2 {
            return Err(ControlError::Config("MPPI needs horizon >= 1 and samples >= 2".into()));
        }
        if !(self.noise_fraction > 0.0) || !(self.temperature > 0.0) {
            return Err(ControlError::Config(
                "MPPI noise_fraction and temperature must be > 0".into(),
            ));
        }
        if self.episode_horizon == Some(0) {
            return Err(ControlError::Config("episode_horizon must be >= 1".into()));
        }
        Ok(())
    }

    pub fn sigma(&self, world: &World) -> f64 {
        self.noise_fraction * world.action_range()
    }

    pub fn episode_length(&self, difficulty: Difficulty) -> usize {
        self.episode_horizon.unwrap_or_else(|| difficulty.horizon())
    }
}

/// Softmax of `scores / λ`, shifted by the maximum for stability.
pub fn mppi_weights(scores: &[f64], temperature: f64) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = scores.iter().map(|s| ((s - max) / temperature).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Output of one planning call.
#[derive(Clone, Debug)]
pub struct PlanStep {
    pub action: Vec<f64>,
    pub scores: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Receding-horizon MPPI state: the running mean action sequence.
#[derive(Clone, Debug)]
pub struct MppiPlanner {
    config: MppiConfig,
    mean: Vec<Vec<f64>>,
    sigma: f64,
    bounds: (f64, f64),
    rest: f64,
}

impl MppiPlanner {
    pub fn new(world: &World, config: MppiConfig) -> Result<Self, ControlError> {
        config.validate()?;
        let (lo, hi) = world.action_bounds();
        let rest = if lo <= 0.0 && hi >= 0.0 { 0.0 } else { 0.5 * (lo + hi) };
        Ok(Self {
            mean: vec![vec![rest; world.action_dim()]; config.horizon],
            sigma: config.sigma(world),
            bounds: (lo, hi),
            rest,
            config,
        })
    }

    pub fn mean(&self) -> &[Vec<f64>] {
        &self.mean
    }

    pub fn set_mean(&mut self, mean: Vec<Vec<f64>>) {
        assert_eq!(mean.len(), self.config.horizon, "mean sequence length");
        self.mean = mean;
    }

    /// Samples action sequences around the mean, rolls each out from
    /// `state`, scores the terminal observation, and moves the mean to the
    /// score-weighted average. Returns the first action of the new mean.
    pub fn plan<R: Rng + ?Sized>(
        &mut self,
        world: &World,
        state: &[f64],
        mode: ObservationMode,
        encoder: &Encoder,
        goal: &GoalSpec,
        rng: &mut R,
    ) -> Result<PlanStep, ControlError> {
        let h = self.config.horizon;
        let n = self.config.samples;
        let (lo, hi) = self.bounds;
        let mut sequences = Vec::with_capacity(n);
        for _ in 0..n {
            let seq: Vec<Vec<f64>> = self
                .mean
                .iter()
                .map(|m| {
                    m.iter()
                        .map(|&mu| {
                            let eps: f64 = StandardNormal.sample(rng);
                            (mu + self.sigma * eps).clamp(lo, hi)
                        })
                        .collect()
                })
                .collect();
            sequences.push(seq);
        }
        let obs_dim = world.obs_dim(mode);
        let mut terminal = Vec::with_capacity(n * obs_dim);
        for seq in &sequences {
            let mut s = state.to_vec();
            for a in seq {
                s = world.step(&s, a);
            }
            terminal.extend(world.observe(&s, mode));
        }
        let scores =
            trajectory_scores(encoder, &Tensor::matrix(n, obs_dim, terminal), goal)?;
        let weights = mppi_weights(&scores, self.config.temperature);
        for t in 0..h {
            for (d, m) in self.mean[t].iter_mut().enumerate() {
                *m = sequences.iter().zip(&weights).map(|(s, w)| w * s[t][d]).sum();
            }
        }
        let action = self.mean[0].clone();
        if self.config.warm_start {
            self.mean.rotate_left(1);
            self.mean[h - 1] = self.mean[h.saturating_sub(2)].clone();
        } else {
            let rest = self.rest;
            self.mean.iter_mut().flatten().for_each(|m| *m = rest);
        }
        Ok(PlanStep {
            action,
            scores,
            weights,
        })
    }
}

/// Closed-loop outcome of one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeResult {
    pub success: bool,
    /// First step at which the goal was within tolerance, if ever.
    pub first_success: Option<usize>,
    pub states: Vec<Vec<f64>>,
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    /// True-state distance to the goal at every visited state.
    pub true_errors: Vec<f64>,
    /// Embedding distance `‖φ(o) − ḡ‖` at every visited state.
    pub embedding_distances: Vec<f64>,
}

impl EpisodeResult {
    pub fn steps(&self) -> usize {
        self.actions.len()
    }

    pub fn final_error(&self) -> f64 {
        *self.true_errors.last().expect("episode has an initial state")
    }

    /// Per-step true reward: decrease in true distance to the goal.
    pub fn true_rewards(&self) -> Vec<f64> {
        self.true_errors.windows(2).map(|w| w[0] - w[1]).collect()
    }

    /// Per-step embedding reward `S(o') − S(o)`.
    pub fn embedding_rewards(&self) -> Vec<f64> {
        self.embedding_distances.windows(2).map(|w| w[0] - w[1]).collect()
    }
}

fn finish_episode(
    world: &World,
    goal_state: &[f64],
    mode: ObservationMode,
    encoder: &Encoder,
    goal: &GoalSpec,
    states: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
) -> Result<EpisodeResult, ControlError> {
    let observations: Vec<Vec<f64>> = states.iter().map(|s| world.observe(s, mode)).collect();
    let frames = Tensor::from_rows(&observations);
    let embedding_distances = trajectory_scores(encoder, &frames, goal)?
        .into_iter()
        .map(|s| -s)
        .collect();
    let true_errors = states.iter().map(|s| world.state_distance(s, goal_state)).collect();
    let first_success = states.iter().position(|s| world.reached(s, goal_state));
    Ok(EpisodeResult {
        success: world.reached(states.last().unwrap(), goal_state),
        first_success,
        states,
        observations,
        actions,
        true_errors,
        embedding_distances,
    })
}

/// Runs MPPI in closed loop for up to `length` steps. Success means the final
/// true state is within the world's tolerance of `goal_state`; with
/// `stop_on_success` the episode ends at the first such state.
#[allow(clippy::too_many_arguments)]
pub fn mppi_episode<R: Rng + ?Sized>(
    world: &World,
    start: &[f64],
    goal_state: &[f64],
    mode: ObservationMode,
    encoder: &Encoder,
    goal: &GoalSpec,
    config: &MppiConfig,
    length: usize,
    rng: &mut R,
) -> Result<EpisodeResult, ControlError> {
    if !world.is_valid_state(start) {
        return Err(WorldError::InvalidState(start.to_vec()).into());
    }
    let mut planner = MppiPlanner::new(world, config.clone())?;
    let mut states = vec![start.to_vec()];
    let mut actions = Vec::with_capacity(length);
    for _ in 0..length {
        let s = states.last().unwrap();
        if config.stop_on_success && world.reached(s, goal_state) {
            break;
        }
        let step = planner.plan(world, s, mode, encoder, goal, rng)?;
        let next = world.step(s, &step.action);
        actions.push(step.action);
        states.push(next);
    }
    finish_episode(world, goal_state, mode, encoder, goal, states, actions)
}

/// A start/goal pair in true state space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub start: Vec<f64>,
    pub goal: Vec<f64>,
}

/// Derives the RNG for episode `index` of a run seeded with `seed`.
pub fn episode_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// MPPI over a list of tasks, each with the goal frame observed at the task
/// goal. Episodes run in parallel with per-episode RNG streams.
pub fn mppi_evaluate(
    world: &World,
    tasks: &[Task],
    mode: ObservationMode,
    encoder: &Encoder,
    config: &MppiConfig,
    length: usize,
    seed: u64,
) -> Result<Vec<EpisodeResult>, ControlError> {
    tasks
        .par_iter()
        .enumerate()
        .map(|(i, task)| {
            let goal = GoalSpec::single(encoder, &world.observe(&task.goal, mode))?;
            let mut rng = episode_rng(seed, i);
            mppi_episode(
                world, &task.start, &task.goal, mode, encoder, &goal, config, length, &mut rng,
            )
        })
        .collect()
}

pub const EPISODE_CSV_HEADER: &str = "episode,success,steps,final_error";
pub const STEP_CSV_HEADER: &str = "episode,step,true_error,embedding_distance";

/// Summary CSV. `steps` is the first step at which the goal was reached, or
/// the episode length if it never was.
pub fn episodes_csv(results: &[EpisodeResult]) -> String {
    let mut s = format!("{EPISODE_CSV_HEADER}\n");
    for (i, r) in results.iter().enumerate() {
        s.push_str(&format!(
            "{},{},{},{:e}\n",
            i,
            u8::from(r.success),
            r.first_success.unwrap_or(r.steps()),
            r.final_error()
        ));
    }
    s
}

pub fn step_errors_csv(results: &[EpisodeResult]) -> String {
    let mut s = format!("{STEP_CSV_HEADER}\n");
    for (i, r) in results.iter().enumerate() {
        for (t, (e, d)) in r.true_errors.iter().zip(&r.embedding_distances).enumerate() {
            s.push_str(&format!("{i},{t},{e:e},{d:e}\n"));
        }
    }
    s
}

pub fn success_rate(results: &[EpisodeResult]) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    results.iter().filter(|r| r.success).count() as f64 / results.len() as f64
}

/// Anything that maps the current embedding and proprioceptive state to an
/// action.
pub trait Policy: Sync {
    fn mean_action(&self, embedding: &[f64], state: &[f64]) -> Vec<f64>;

    fn sample_action(&self, embedding: &[f64], state: &[f64], _rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.mean_action(embedding, state)
    }
}

/// The scripted point-mass controller toward a fixed goal state.
#[derive(Clone, Debug)]
pub struct ExpertPolicy {
    pub goal: Vec<f64>,
}

impl Policy for ExpertPolicy {
    fn mean_action(&self, _embedding: &[f64], state: &[f64]) -> Vec<f64> {
        self.goal.iter().zip(state).map(|(g, x)| EXPERT_GAIN * (g - x)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct ZeroPolicy {
    pub action_dim: usize,
}

impl Policy for ZeroPolicy {
    fn mean_action(&self, _embedding: &[f64], _state: &[f64]) -> Vec<f64> {
        vec![0.0; self.action_dim]
    }
}

/// Gaussian policy `N(μ(x), diag σ²)` with an MLP mean over standardized
/// `x = [φ(o), state]` and a learned per-dimension log σ.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPolicy {
    net: Encoder,
    log_std: Tensor,
    input_shift: Vec<f64>,
    input_scale: Vec<f64>,
    use_state: bool,
}

impl GaussianPolicy {
    pub fn new(
        input_dim: usize,
        action_dim: usize,
        hidden_widths: Vec<usize>,
        use_state: bool,
        seed: u64,
    ) -> Result<Self, ControlError> {
        let net = Encoder::init(EncoderConfig {
            input_dim,
            hidden_widths,
            output_dim: action_dim,
            activation: Activation::Relu,
            init_seed: seed,
        })?;
        Ok(Self {
            net,
            log_std: Tensor::zeros(&[action_dim]),
            input_shift: vec![0.0; input_dim],
            input_scale: vec![1.0; input_dim],
            use_state,
        })
    }

    pub fn net(&self) -> &Encoder {
        &self.net
    }

    pub fn log_std(&self) -> &[f64] {
        self.log_std.data()
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std.data().iter().map(|v| v.exp()).collect()
    }

    pub fn action_dim(&self) -> usize {
        self.net.output_dim()
    }

    fn input(&self, embedding: &[f64], state: &[f64]) -> Vec<f64> {
        let raw = embedding.iter().chain(if self.use_state { state } else { &[] });
        raw.zip(self.input_shift.iter().zip(&self.input_scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    /// All parameters in a fixed order, for bit-level comparisons.
    pub fn flat_parameters(&self) -> Vec<f64> {
        self.net
            .parameters()
            .into_iter()
            .flat_map(|t| t.data().iter().copied())
            .chain(self.log_std.data().iter().copied())
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyFile {
    config: EncoderConfig,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
    log_std: Tensor,
    input_shift: Vec<f64>,
    input_scale: Vec<f64>,
    use_state: bool,
}

impl GaussianPolicy {
    /// JSON form; floats round-trip exactly.
    pub fn to_json(&self) -> serde_json::Value {
        let file = PolicyFile {
            config: self.net.config().clone(),
            weights: self.net.layers().iter().map(|l| l.weight.clone()).collect(),
            biases: self.net.layers().iter().map(|l| l.bias.clone()).collect(),
            log_std: self.log_std.clone(),
            input_shift: self.input_shift.clone(),
            input_scale: self.input_scale.clone(),
            use_state: self.use_state,
        };
        serde_json::to_value(file).expect("policy serializes")
    }

    pub fn from_json(value: serde_json::Value) -> Result<Self, ControlError> {
        let file: PolicyFile = serde_json::from_value(value)?;
        let in_dim = file.config.input_dim;
        let layers = file
            .weights
            .into_iter()
            .zip(file.biases)
            .map(|(weight, bias)| Layer { weight, bias })
            .collect();
        let net = Encoder::from_layers(file.config, layers)?;
        if file.input_shift.len() != in_dim
            || file.input_scale.len() != in_dim
            || file.log_std.len() != net.output_dim()
        {
            return Err(ControlError::Config("policy file sizes do not match its network".into()));
        }
        Ok(Self {
            net,
            log_std: file.log_std,
            input_shift: file.input_shift,
            input_scale: file.input_scale,
            use_state: file.use_state,
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<(), ControlError> {
        let text = serde_json::to_string(&self.to_json())?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, ControlError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(serde_json::from_str(&text)?)
    }
}

impl Policy for GaussianPolicy {
    fn mean_action(&self, embedding: &[f64], state: &[f64]) -> Vec<f64> {
        self.net.embed(&self.input(embedding, state)).expect("policy input width")
    }

    fn sample_action(&self, embedding: &[f64], state: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mean = self.mean_action(embedding, state);
        mean.iter()
            .zip(self.log_std.data())
            .map(|(m, ls)| {
                let eps: f64 = StandardNormal.sample(rng);
                m + ls.exp() * eps
            })
            .collect()
    }
}

fn default_tau() -> f64 {
    0.1
}
fn default_policy_lr() -> f64 {
    1e-3
}
fn default_policy_batch() -> usize {
    32
}
fn default_policy_steps() -> usize {
    20_000
}
fn default_clip() -> f64 {
    10.0
}
fn default_policy_widths() -> Vec<usize> {
    vec![256, 256]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RwrConfig {
    /// Temperature `τ`; zero gives behavior cloning.
    #[serde(default = "default_tau")]
    pub temperature: f64,
    #[serde(default = "default_policy_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_policy_batch")]
    pub batch_size: usize,
    #[serde(default = "default_policy_steps")]
    pub steps: usize,
    /// Weights are clipped at `exp(log_weight_clip)`.
    #[serde(default = "default_clip")]
    pub log_weight_clip: f64,
    #[serde(default = "default_policy_widths")]
    pub hidden_widths: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for RwrConfig {
    fn default() -> Self {
        Self {
            temperature: default_tau(),
            learning_rate: default_policy_lr(),
            batch_size: default_policy_batch(),
            steps: default_policy_steps(),
            log_weight_clip: default_clip(),
            hidden_widths: default_policy_widths(),
            seed: 0,
        }
    }
}

impl RwrConfig {
    pub fn validate(&self) -> Result<(), ControlError> {
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return Err(ControlError::Config("temperature must be >= 0".into()));
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.steps == 0 {
            return Err(ControlError::Config(
                "learning_rate must be > 0 and batch_size, steps >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// `clip(exp(τ R), exp(clip))`.
pub fn rwr_weight(reward: f64, temperature: f64, log_clip: f64) -> f64 {
    (temperature * reward).min(log_clip).exp()
}

/// Transitions prepared for policy regression.
#[derive(Clone, Debug)]
pub struct PolicyData {
    pub inputs: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub use_state: bool,
}

impl PolicyData {
    /// Embeds every frame once and pairs each transition with its embedding
    /// reward toward `goal`.
    pub fn build(
        dataset: &TrajectoryDataset,
        encoder: &Encoder,
        goal: &GoalSpec,
    ) -> Result<Self, ControlError> {
        if dataset.obs_dim() != encoder.input_dim() {
            return Err(ControlError::DimMismatch {
                expected: encoder.input_dim(),
                got: dataset.obs_dim(),
            });
        }
        let use_state = dataset.trajectories().iter().all(|t| t.states().is_some());
        let mut data = PolicyData {
            inputs: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            use_state,
        };
        for traj in dataset.trajectories() {
            let actions = traj.actions().ok_or(ControlError::MissingActions)?;
            let emb = encoder.embed_batch(traj.frames())?;
            let scores: Vec<f64> = (0..emb.rows()).map(|i| goal.score(emb.row(i))).collect();
            for t in 0..traj.len() - 1 {
                let mut x = emb.row(t).to_vec();
                if use_state {
                    x.extend_from_slice(traj.states().unwrap().row(t));
                }
                data.inputs.push(x);
                data.actions.push(actions.row(t).to_vec());
                data.rewards.push(scores[t + 1] - scores[t]);
            }
        }
        if data.inputs.is_empty() {
            return Err(ControlError::NoTransitions);
        }
        Ok(data)
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn weights(&self, config: &RwrConfig) -> Vec<f64> {
        self.rewards
            .iter()
            .map(|&r| rwr_weight(r, config.temperature, config.log_weight_clip))
            .collect()
    }
}

/// Training trace of a policy fit.
#[derive(Clone, Debug)]
pub struct PolicyFit {
    pub policy: GaussianPolicy,
    pub losses: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Minimizes the weighted Gaussian negative log-likelihood
/// `−mean w · log N(a; μ(x), σ)` with Adam.
pub fn rwr_fit(data: &PolicyData, config: &RwrConfig) -> Result<PolicyFit, ControlError> {
    config.validate()?;
    if data.is_empty() {
        return Err(ControlError::NoTransitions);
    }
    let input_dim = data.inputs[0].len();
    let action_dim = data.actions[0].len();
    let mut policy = GaussianPolicy::new(
        input_dim,
        action_dim,
        config.hidden_widths.clone(),
        data.use_state,
        config.seed,
    )?;
    let n = data.len() as f64;
    for j in 0..input_dim {
        let mean = data.inputs.iter().map(|x| x[j]).sum::<f64>() / n;
        let var = data.inputs.iter().map(|x| (x[j] - mean).powi(2)).sum::<f64>() / n;
        policy.input_shift[j] = mean;
        policy.input_scale[j] = if var.sqrt() > 1e-8 { var.sqrt() } else { 1.0 };
    }
    let inputs: Vec<Vec<f64>> = data
        .inputs
        .iter()
        .map(|x| {
            x.iter()
                .zip(policy.input_shift.iter().zip(&policy.input_scale))
                .map(|(v, (m, s))| (v - m) / s)
                .collect()
        })
        .collect();
    let weights = data.weights(config);

    let mut params: Vec<&Tensor> = policy.net.parameters();
    params.push(&policy.log_std);
    let mut adam = Adam::new(params, config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5257_5200);
    let b = config.batch_size;
    let log_2pi = (2.0 * std::f64::consts::PI).ln();
    let mut losses = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..data.len())).collect();
        let x = Tensor::from_rows(&idx.iter().map(|&i| inputs[i].as_slice()).collect::<Vec<_>>());
        let a = Tensor::from_rows(
            &idx.iter().map(|&i| data.actions[i].as_slice()).collect::<Vec<_>>(),
        );
        let w: Vec<f64> = idx.iter().map(|&i| weights[i]).collect();
        let w_mean = w.iter().sum::<f64>() / b as f64;
        let w_mat = Tensor::matrix(
            b,
            action_dim,
            w.iter().flat_map(|&wi| std::iter::repeat_n(wi, action_dim)).collect(),
        );

        let mut g = Graph::new();
        let mut vars = policy.net.leaves(&mut g);
        let ls = g.leaf(policy.log_std.clone());
        vars.push(ls);
        let xv = g.leaf(x);
        let av = g.leaf(a);
        let wv = g.leaf(w_mat);
        let mu = policy.net.forward_graph(&mut g, &vars[..vars.len() - 1], xv)?;
        let diff = g.sub(av, mu)?;
        let neg_ls = g.scale(ls, -1.0);
        let inv = g.exp(neg_ls);
        let inv = g.broadcast_rows(inv, b)?;
        let z = g.mul(diff, inv)?;
        let z2 = g.square(z);
        let weighted = g.mul(z2, wv)?;
        let quad = g.sum(weighted);
        let quad = g.scale(quad, 0.5 / b as f64);
        let ls_sum = g.sum(ls);
        let norm = g.scale(ls_sum, w_mean);
        let loss = g.add(quad, norm)?;
        let loss = g.add_scalar(loss, 0.5 * action_dim as f64 * log_2pi * w_mean);
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(ControlError::Diverged(step));
        }
        let grads = g.backward(loss)?;
        let grad_refs: Vec<&Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();
        let mut named = policy.net.named_parameters_mut();
        named.push(("log_std".to_string(), &mut policy.log_std));
        adam.step(named, &grad_refs)?;
        losses.push(value);
    }
    Ok(PolicyFit {
        policy,
        losses,
        weights,
    })
}

/// Reward-weighted regression on `dataset` with rewards from `encoder`
/// toward `goal`.
pub fn rwr_train(
    dataset: &TrajectoryDataset,
    encoder: &Encoder,
    goal: &GoalSpec,
    config: &RwrConfig,
) -> Result<PolicyFit, ControlError> {
    let data = PolicyData::build(dataset, encoder, goal)?;
    rwr_fit(&data, config)
}

/// Behavior cloning: [`rwr_train`] with `τ = 0`.
pub fn bc_train(
    dataset: &TrajectoryDataset,
    encoder: &Encoder,
    goal: &GoalSpec,
    config: &RwrConfig,
) -> Result<PolicyFit, ControlError> {
    let config = RwrConfig {
        temperature: 0.0,
        ..config.clone()
    };
    rwr_train(dataset, encoder, goal, &config)
}

/// Per-episode outcome of a policy rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyEpisode {
    pub success: bool,
    pub steps: usize,
    pub final_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyEval {
    pub success_rate: f64,
    pub episodes: Vec<PolicyEpisode>,
}

/// How [`eval_policy`] runs its episodes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RolloutOptions {
    pub length: usize,
    /// Sample from the policy instead of taking its mean action.
    pub stochastic: bool,
    /// End an episode as soon as the goal is within tolerance.
    pub stop_on_success: bool,
    pub seed: u64,
}

impl RolloutOptions {
    pub fn new(length: usize, seed: u64) -> Self {
        Self {
            length,
            stochastic: false,
            stop_on_success: true,
            seed,
        }
    }
}

/// Rolls out `policy` from each start toward a fixed goal state. Success
/// means the final state is within tolerance.
pub fn eval_policy<P: Policy>(
    world: &World,
    policy: &P,
    encoder: &Encoder,
    mode: ObservationMode,
    starts: &[Vec<f64>],
    goal_state: &[f64],
    options: &RolloutOptions,
) -> Result<PolicyEval, ControlError> {
    let episodes: Vec<PolicyEpisode> = starts
        .par_iter()
        .enumerate()
        .map(|(i, start)| {
            let mut rng = episode_rng(options.seed, i);
            let mut s = start.clone();
            let mut first = None;
            for t in 0..options.length {
                if first.is_none() && world.reached(&s, goal_state) {
                    first = Some(t);
                    if options.stop_on_success {
                        break;
                    }
                }
                let e = embed(encoder, &world.observe(&s, mode))?;
                let a = if options.stochastic {
                    policy.sample_action(&e, &s, &mut rng)
                } else {
                    policy.mean_action(&e, &s)
                };
                s = world.step(&s, &a);
            }
            Ok(PolicyEpisode {
                success: world.reached(&s, goal_state),
                steps: first.unwrap_or(options.length),
                final_error: world.state_distance(&s, goal_state),
            })
        })
        .collect::<Result<_, ControlError>>()?;
    let success_rate =
        episodes.iter().filter(|e| e.success).count() as f64 / episodes.len().max(1) as f64;
    Ok(PolicyEval {
        success_rate,
        episodes,
    })
}

pub fn policy_eval_csv(eval: &PolicyEval) -> String {
    let mut s = format!("{EPISODE_CSV_HEADER}\n");
    for (i, e) in eval.episodes.iter().enumerate() {
        s.push_str(&format!("{},{},{},{:e}\n", i, u8::from(e.success), e.steps, e.final_error));
    }
    s
}

fn default_demos() -> usize {
    10
}
fn default_failures() -> usize {
    20
}
fn default_demo_noise() -> f64 {
    0.1
}

/// A single-goal offline dataset: expert demonstrations to `goal` mixed with
/// failed attempts that head for a decoy instead.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixedDatasetConfig {
    pub goal: Vec<f64>,
    pub decoys: Vec<Vec<f64>>,
    pub start_center: Vec<f64>,
    pub start_radius: f64,
    #[serde(default = "default_demos")]
    pub num_demos: usize,
    #[serde(default = "default_failures")]
    pub num_failures: usize,
    #[serde(default = "default_demo_noise")]
    pub noise: f64,
    pub max_len: usize,
}

impl MixedDatasetConfig {
    pub fn validate(&self, world: &World) -> Result<(), ControlError> {
        if self.decoys.is_empty() && self.num_failures > 0 {
            return Err(ControlError::Config("failures need at least one decoy".into()));
        }
        for s in std::iter::once(&self.goal).chain(&self.decoys).chain([&self.start_center]) {
            if !world.is_valid_state(s) {
                return Err(WorldError::InvalidState(s.clone()).into());
            }
        }
        if self.num_demos + self.num_failures == 0 || self.max_len < 2 {
            return Err(ControlError::Config("need trajectories and max_len >= 2".into()));
        }
        Ok(())
    }

    /// Uniform start in the square of half-width `start_radius`, rejecting
    /// invalid states and starts already at the goal.
    pub fn sample_start<R: Rng + ?Sized>(&self, world: &World, rng: &mut R) -> Vec<f64> {
        loop {
            let s: Vec<f64> = self
                .start_center
                .iter()
                .map(|c| c + rng.random_range(-self.start_radius..=self.start_radius))
                .collect();
            if world.is_valid_state(&s) && !world.reached(&s, &self.goal) {
                return s;
            }
        }
    }
}

/// Generates the mixed dataset; demos are tagged `expert`, the rest `failure`.
pub fn generate_mixed_dataset<R: Rng + ?Sized>(
    world: &World,
    config: &MixedDatasetConfig,
    mode: ObservationMode,
    rng: &mut R,
) -> Result<TrajectoryDataset, ControlError> {
    config.validate(world)?;
    let mut trajs: Vec<Trajectory> = Vec::new();
    for i in 0..config.num_demos + config.num_failures {
        let start = config.sample_start(world, rng);
        let (target, tag) = if i < config.num_demos {
            (config.goal.clone(), "expert")
        } else {
            (config.decoys[rng.random_range(0..config.decoys.len())].clone(), "failure")
        };
        let mut t = world.expert_rollout(&start, &target, config.noise, config.max_len, mode, rng)?;
        *t.meta_mut() = TrajectoryMeta {
            tag: tag.into(),
            ..t.meta().clone()
        };
        trajs.push(t);
    }
    let generation = serde_json::json!({ "mixed": config, "world": world, "mode": mode });
    Ok(TrajectoryDataset::new(trajs, mode, generation)?)
}

#[cfg(test)]
mod tests;
