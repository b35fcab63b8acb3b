//! Experiment configuration: one strict JSON document binding the world,
//! data generation, encoder, objectives, planner, offline RL and analysis
//! options, plus the dataset and task generators driven by it.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::AnalysisError;
use crate::control::{ControlError, MixedDatasetConfig, MppiConfig, RwrConfig, Task};
use crate::encoder::{Activation, EncoderConfig, EncoderError};
use crate::objectives::{LossConfig, ObjectiveError, TrainConfig};
use crate::trajstore::{StoreError, TrajectoryDataset};
use crate::worlds::{Difficulty, ObservationMode, PointMassWorld, World, WorldError};

/// Name of the resolved config written beside every run's outputs.
pub const RESOLVED_CONFIG: &str = "config.resolved.json";

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("config error at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("unknown acceptance check {0:?}")]
    UnknownCheck(String),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl ExperimentError {
    /// Whether the error comes from the configuration rather than the run.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            ExperimentError::Schema { .. }
                | ExperimentError::Config(_)
                | ExperimentError::UnknownCheck(_)
        )
    }
}

fn default_trajectories() -> usize {
    100
}
fn default_difficulty() -> Difficulty {
    Difficulty::Hard
}
fn default_max_len() -> usize {
    200
}

/// Scripted-expert dataset generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "default_trajectories")]
    pub num_trajectories: usize,
    /// Expert noise: action std for the point mass, detour probability on the grid.
    #[serde(default)]
    pub noise: f64,
    /// Start/goal distribution of the demonstrations.
    #[serde(default = "default_difficulty")]
    pub difficulty: Difficulty,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_trajectories: default_trajectories(),
            noise: 0.0,
            difficulty: default_difficulty(),
            max_len: default_max_len(),
        }
    }
}

fn default_widths() -> Vec<usize> {
    vec![64, 64]
}
fn default_output() -> usize {
    8
}
fn default_activation() -> Activation {
    Activation::Relu
}

/// Encoder architecture; the input width comes from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    #[serde(default = "default_widths")]
    pub hidden_widths: Vec<usize>,
    #[serde(default = "default_output")]
    pub output_dim: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            hidden_widths: default_widths(),
            output_dim: default_output(),
            activation: default_activation(),
        }
    }
}

impl EncoderSpec {
    pub fn config(&self, input_dim: usize, init_seed: u64) -> EncoderConfig {
        EncoderConfig {
            input_dim,
            hidden_widths: self.hidden_widths.clone(),
            output_dim: self.output_dim,
            activation: self.activation,
            init_seed,
        }
    }
}

fn default_episodes() -> usize {
    50
}
fn default_eval_difficulty() -> Difficulty {
    Difficulty::Easy
}

/// Planning / policy evaluation tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_episodes")]
    pub episodes: usize,
    #[serde(default = "default_eval_difficulty")]
    pub difficulty: Difficulty,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: default_episodes(),
            difficulty: default_eval_difficulty(),
        }
    }
}

fn default_bins() -> usize {
    20
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisOptions {
    /// Histogram bins over the symmetric reward range.
    #[serde(default = "default_bins")]
    pub bins: usize,
    /// Histogram half-range; `None` uses the largest observed magnitude.
    #[serde(default)]
    pub range: Option<f64>,
    /// Truncate trajectories to this many frames before bump counting.
    #[serde(default)]
    pub frame_cap: Option<usize>,
    /// Divide distance curves by their initial value.
    #[serde(default = "default_true")]
    pub normalize: bool,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            bins: default_bins(),
            range: None,
            frame_cap: None,
            normalize: true,
        }
    }
}

fn default_world() -> World {
    World::PointMass(PointMassWorld::default())
}
fn default_mode() -> ObservationMode {
    ObservationMode::RawState
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_world")]
    pub world: World,
    #[serde(default = "default_mode")]
    pub observation: ObservationMode,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub encoder: EncoderSpec,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub mppi: MppiConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub rwr: RwrConfig,
    /// Demos-plus-failures dataset for offline RL.
    #[serde(default)]
    pub mixed: Option<MixedDatasetConfig>,
    #[serde(default)]
    pub analysis: AnalysisOptions,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Master seed; command-line `--seed` overrides it.
    #[serde(default)]
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            world: default_world(),
            observation: default_mode(),
            data: DataConfig::default(),
            encoder: EncoderSpec::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            mppi: MppiConfig::default(),
            eval: EvalConfig::default(),
            rwr: RwrConfig::default(),
            mixed: None,
            analysis: AnalysisOptions::default(),
            output_dir: None,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates; schema errors carry the JSON path of the offending key.
    pub fn from_json_str(text: &str) -> Result<Self, ExperimentError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            ExperimentError::Schema {
                path,
                message: e.into_inner().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExperimentError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ExperimentError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json_str(&text)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let config = |e: &dyn std::fmt::Display| ExperimentError::Config(e.to_string());
        self.world.validate().map_err(|e| config(&e))?;
        if self.data.num_trajectories == 0 || self.data.max_len < 2 || !(self.data.noise >= 0.0) {
            return Err(ExperimentError::Config(
                "data needs num_trajectories >= 1, max_len >= 2 and noise >= 0".into(),
            ));
        }
        self.encoder.config(1, 0).validate().map_err(|e| config(&e))?;
        self.loss.validate().map_err(|e| config(&e))?;
        self.train.validate().map_err(|e| config(&e))?;
        self.mppi.validate().map_err(|e| config(&e))?;
        self.rwr.validate().map_err(|e| config(&e))?;
        if let Some(m) = &self.mixed {
            m.validate(&self.world).map_err(|e| config(&e))?;
        }
        if self.analysis.bins == 0 || self.analysis.range.is_some_and(|r| !(r > 0.0)) {
            return Err(ExperimentError::Config("analysis needs bins >= 1 and range > 0".into()));
        }
        Ok(())
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Writes [`RESOLVED_CONFIG`] into `dir` and returns its path.
    pub fn write_resolved(&self, dir: impl AsRef<Path>) -> Result<PathBuf, ExperimentError> {
        let path = dir.as_ref().join(RESOLVED_CONFIG);
        std::fs::write(&path, self.to_json_pretty() + "\n").map_err(|source| {
            ExperimentError::Io {
                path: path.clone(),
                source,
            }
        })?;
        Ok(path)
    }
}

/// Expert demonstrations between sampled start/goal pairs.
pub fn generate_dataset(
    world: &World,
    mode: ObservationMode,
    data: &DataConfig,
    seed: u64,
) -> Result<TrajectoryDataset, ExperimentError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trajs = (0..data.num_trajectories)
        .map(|_| {
            let (start, goal) = world.sample_task(data.difficulty, &mut rng);
            world.expert_rollout(&start, &goal, data.noise, data.max_len, mode, &mut rng)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let generation = serde_json::json!({
        "world": world,
        "observation": mode,
        "data": data,
        "seed": seed,
    });
    Ok(TrajectoryDataset::new(trajs, mode, generation)?)
}

/// `n` start/goal tasks at the given difficulty.
pub fn sample_tasks(world: &World, difficulty: Difficulty, n: usize, seed: u64) -> Vec<Task> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let (start, goal) = world.sample_task(difficulty, &mut rng);
            Task { start, goal }
        })
        .collect()
}
