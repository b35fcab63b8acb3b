//! Pre-training objectives and the training loop.
//!
//! * `vip`: value-implicit loss. Initial and goal frames are pulled together
//!   with weight `1 − γ`; intermediate transitions enter a log-mean-exp of
//!   one-step TD residuals under the sparse reward `δ̃ = 𝕀(o = g) − 1`.
//! * `tcn`: single-view time-contrastive InfoNCE with similarity
//!   `exp(−‖φ(a) − φ(b)‖)`.
//! * `lstd`: squared one-step TD error of `V(o; g) = −‖φ(o) − φ(g)‖`.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderConfig, EncoderError};
use crate::gradcore::{Adam, GradError, Graph, Tensor, Var, DEFAULT_NORM_EPS};
use crate::trajstore::{
    sample_lstd_tuples, sample_tcn_triplets, sample_vip_batch, LstdBatch, StoreError, TcnBatch,
    TrajectoryDataset, VipBatch,
};

#[derive(Debug, thiserror::Error)]
pub enum ObjectiveError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("dataset observations have {data} dims, encoder expects {encoder}")]
    DimMismatch { data: usize, encoder: usize },
    #[error("loss diverged at batch {batch} (value {value}){}", dump.as_ref().map(|p| format!("; batch dumped to {}", p.display())).unwrap_or_default())]
    Diverged {
        batch: usize,
        value: f64,
        dump: Option<PathBuf>,
    },
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

fn default_gamma() -> f64 {
    0.98
}
fn default_n_neg() -> usize {
    3
}
fn default_l1() -> f64 {
    0.001
}
fn default_eps() -> f64 {
    DEFAULT_NORM_EPS
}
fn default_window() -> usize {
    3
}

/// Sign convention of the distance terms inside the VIP exponent.
///
/// `Value` is `1 − flag + γ‖φ(o') − φ(g)‖ − ‖φ(o) − φ(g)‖`, the Jensen bound of the
/// dual value objective with `V = −‖φ(o) − φ(g)‖`. `Printed` is the typeset form
/// `‖φ(o) − φ(g)‖ + 1 − flag − γ‖φ(o') − φ(g)‖`, whose minimiser makes distances
/// grow towards the goal.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VipExponent {
    #[default]
    Value,
    Printed,
}

/// Loss hyperparameters shared by the three objectives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Cross-trajectory negatives per element.
    #[serde(default = "default_n_neg")]
    pub n_neg: usize,
    /// Weight of the mean L1 norm of the batch embeddings.
    #[serde(default = "default_l1")]
    pub l1_embedding_coeff: f64,
    #[serde(default = "default_eps")]
    pub eps_norm: f64,
    /// Probability of sampling the mid frame at the goal.
    #[serde(default)]
    pub goal_selfloop: f64,
    /// Positive window of the time-contrastive sampler.
    #[serde(default = "default_window")]
    pub tcn_window: usize,
    #[serde(default)]
    pub vip_exponent: VipExponent,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: default_gamma(),
            n_neg: default_n_neg(),
            l1_embedding_coeff: default_l1(),
            eps_norm: default_eps(),
            goal_selfloop: 0.0,
            tcn_window: default_window(),
            vip_exponent: VipExponent::Value,
        }
    }
}

impl LossConfig {
    /// The in-domain toy setting: no embedding penalty, no extra negatives.
    pub fn toy() -> Self {
        Self {
            n_neg: 0,
            l1_embedding_coeff: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(ObjectiveError::Config(format!("gamma {} not in (0, 1)", self.gamma)));
        }
        if !(self.eps_norm > 0.0) || self.l1_embedding_coeff < 0.0 {
            return Err(ObjectiveError::Config(
                "eps_norm must be > 0 and l1_embedding_coeff >= 0".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.goal_selfloop) || self.tcn_window == 0 {
            return Err(ObjectiveError::Config(
                "goal_selfloop must be in [0, 1] and tcn_window >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Weight of the initial-to-goal attraction term.
    pub fn attraction_weight(&self) -> f64 {
        1.0 - self.gamma
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Vip,
    Tcn,
    Lstd,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Vip => "vip",
            Objective::Tcn => "tcn",
            Objective::Lstd => "lstd",
        })
    }
}

impl FromStr for Objective {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vip" => Ok(Objective::Vip),
            "tcn" => Ok(Objective::Tcn),
            "lstd" => Ok(Objective::Lstd),
            other => Err(format!("unknown objective `{other}` (expected vip, tcn or lstd)")),
        }
    }
}

fn default_batch() -> usize {
    32
}
fn default_lr() -> f64 {
    1e-4
}
fn default_batches() -> usize {
    2000
}
fn default_eval() -> usize {
    500
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batches")]
    pub num_batches: usize,
    /// Checkpoint every this many batches.
    #[serde(default = "default_eval")]
    pub eval_interval: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "Objective::default_vip")]
    pub objective: Objective,
    /// Fill the `ms` column with wall-clock time. Off by default so metrics
    /// files are reproducible.
    #[serde(default)]
    pub record_wall_clock: bool,
}

impl Objective {
    fn default_vip() -> Self {
        Objective::Vip
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: default_batch(),
            learning_rate: default_lr(),
            num_batches: default_batches(),
            eval_interval: default_eval(),
            seed: 0,
            objective: Objective::Vip,
            record_wall_clock: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if self.batch_size == 0 || self.num_batches == 0 || self.eval_interval == 0 {
            return Err(ObjectiveError::Config(
                "batch_size, num_batches and eval_interval must be >= 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(ObjectiveError::Config("learning_rate must be > 0".into()));
        }
        Ok(())
    }
}

/// A recorded loss together with the parameter leaves it depends on.
pub struct LossGraph {
    pub graph: Graph,
    pub params: Vec<Var>,
    pub loss: Var,
}

impl LossGraph {
    pub fn value(&self) -> f64 {
        self.graph.value(self.loss).item()
    }
}

fn stack(parts: &[&Tensor]) -> Tensor {
    let cols = parts.iter().find(|t| t.rows() > 0 && !t.is_empty()).map_or(0, |t| t.cols());
    let mut data = Vec::new();
    let mut rows = 0;
    for t in parts {
        if t.is_empty() {
            continue;
        }
        rows += t.rows();
        data.extend_from_slice(t.data());
    }
    Tensor::matrix(rows, cols, data)
}

/// Adds `coeff · mean_rows ‖e‖₁` to `loss` when `coeff > 0`.
fn with_l1(g: &mut Graph, loss: Var, emb: Var, coeff: f64) -> Result<Var, GradError> {
    if coeff == 0.0 {
        return Ok(loss);
    }
    let rows = g.value(emb).rows() as f64;
    let a = g.abs(emb);
    let s = g.sum(a);
    let pen = g.scale(s, coeff / rows);
    g.add(loss, pen)
}

/// Distances between two `[B, K]` embedding blocks.
fn dist(g: &mut Graph, a: Var, b: Var, eps: f64) -> Result<Var, GradError> {
    let d = g.sub(a, b)?;
    g.row_l2norm(d, eps)
}

/// Records the value-implicit loss on `g` with encoder parameters `params`.
pub fn record_vip(
    g: &mut Graph,
    encoder: &Encoder,
    params: &[Var],
    batch: &VipBatch,
    cfg: &LossConfig,
) -> Result<Var, GradError> {
    let b = batch.len();
    let n = batch.negatives.len();
    let x = stack(&[
        &batch.o_start,
        &batch.o_goal,
        &batch.o_mid,
        &batch.o_mid_next,
        &batch.neg,
        &batch.neg_next,
    ]);
    let xv = g.leaf(x);
    let emb = encoder.forward_graph(g, params, xv)?;
    let start = g.rows(emb, 0, b)?;
    let goal = g.rows(emb, b, b)?;
    let mid = g.rows(emb, 2 * b, b)?;
    let mid_next = g.rows(emb, 3 * b, b)?;

    let d0 = dist(g, start, goal, cfg.eps_norm)?;
    let d0 = g.mean(d0)?;
    let attraction = g.scale(d0, cfg.attraction_weight());

    // −δ̃ ± (‖φ(o) − φ(g)‖ − γ‖φ(o') − φ(g)‖) with δ̃ = flag − 1
    let sign = match cfg.vip_exponent {
        VipExponent::Value => -1.0,
        VipExponent::Printed => 1.0,
    };
    let dm = dist(g, mid, goal, cfg.eps_norm)?;
    let dn = dist(g, mid_next, goal, cfg.eps_norm)?;
    let dn = g.scale(dn, -cfg.gamma);
    let neg_reward = g.leaf(Tensor::vector(batch.goal_flag.iter().map(|f| 1.0 - f).collect()));
    let td = g.add(dm, dn)?;
    let td = g.scale(td, sign);
    let mut terms = vec![g.add(td, neg_reward)?];

    if n > 0 {
        let neg = g.rows(emb, 4 * b, n)?;
        let neg_next = g.rows(emb, 4 * b + n, n)?;
        let anchors: Vec<usize> = batch.negatives.iter().map(|p| p.anchor).collect();
        let anchor_goal = g.gather_rows(goal, &anchors)?;
        let a = dist(g, neg, anchor_goal, cfg.eps_norm)?;
        let c = dist(g, neg_next, anchor_goal, cfg.eps_norm)?;
        let c = g.scale(c, -cfg.gamma);
        let t = g.add(a, c)?;
        let t = g.scale(t, sign);
        terms.push(g.add_scalar(t, 1.0));
    }
    let pooled = g.concat(&terms)?;
    let repulsion = g.log_mean_exp(pooled)?;
    let loss = g.add(attraction, repulsion)?;
    with_l1(g, loss, emb, cfg.l1_embedding_coeff)
}

/// Records the time-contrastive InfoNCE loss.
pub fn record_tcn(
    g: &mut Graph,
    encoder: &Encoder,
    params: &[Var],
    batch: &TcnBatch,
    cfg: &LossConfig,
) -> Result<Var, GradError> {
    let b = batch.len();
    let e = batch.extra.len();
    let x = stack(&[&batch.anchors, &batch.positives, &batch.negatives, &batch.extra_frames]);
    let xv = g.leaf(x);
    let emb = encoder.forward_graph(g, params, xv)?;
    let anchors = g.rows(emb, 0, b)?;
    let positives = g.rows(emb, b, b)?;
    let d_pos = dist(g, anchors, positives, cfg.eps_norm)?;

    // (anchor, negative row in emb) pairs, grouped by anchor
    let pooled = batch.pooled_negatives();
    let mut pair_anchor = Vec::new();
    let mut pair_neg = Vec::new();
    let mut groups = Vec::with_capacity(b);
    for (i, own) in pooled.iter().enumerate() {
        let before = pair_anchor.len();
        for &j in own {
            pair_anchor.push(i);
            pair_neg.push(2 * b + j);
        }
        for (k, x) in batch.extra.iter().enumerate() {
            if x.anchor == i {
                pair_anchor.push(i);
                pair_neg.push(3 * b + k);
            }
        }
        groups.push((before, pair_anchor.len() - before));
    }
    debug_assert!(e == 0 || pair_neg.iter().any(|&r| r >= 3 * b));
    let pa = g.gather_rows(emb, &pair_anchor)?;
    let pn = g.gather_rows(emb, &pair_neg)?;
    let d_neg = dist(g, pa, pn, cfg.eps_norm)?;
    let sim = g.scale(d_neg, -1.0);
    let mut denoms = Vec::with_capacity(b);
    for (start, len) in groups {
        let s = g.rows(sim, start, len)?;
        denoms.push(g.log_mean_exp(s)?);
    }
    // −log[e^{−d⁺} / mean e^{−d⁻}] = d⁺ + log mean e^{−d⁻}
    let denom = g.concat(&denoms)?;
    let per = g.add(d_pos, denom)?;
    let loss = g.mean(per)?;
    with_l1(g, loss, emb, cfg.l1_embedding_coeff)
}

/// Records the squared TD error of the implicit value.
pub fn record_lstd(
    g: &mut Graph,
    encoder: &Encoder,
    params: &[Var],
    batch: &LstdBatch,
    cfg: &LossConfig,
) -> Result<Var, GradError> {
    let b = batch.obs.rows();
    let x = stack(&[&batch.obs, &batch.next_obs, &batch.goals]);
    let xv = g.leaf(x);
    let emb = encoder.forward_graph(g, params, xv)?;
    let o = g.rows(emb, 0, b)?;
    let o2 = g.rows(emb, b, b)?;
    let goal = g.rows(emb, 2 * b, b)?;
    // δ̃ + γ V(o') − V(o) = (flag − 1) − γ d(o') + d(o)
    let d = dist(g, o, goal, cfg.eps_norm)?;
    let d2 = dist(g, o2, goal, cfg.eps_norm)?;
    let d2 = g.scale(d2, -cfg.gamma);
    let reward = g.leaf(Tensor::vector(batch.goal_flag.iter().map(|f| f - 1.0).collect()));
    let td = g.add(d, d2)?;
    let td = g.add(td, reward)?;
    let sq = g.square(td);
    let loss = g.mean(sq)?;
    with_l1(g, loss, emb, cfg.l1_embedding_coeff)
}

fn finish(
    encoder: &Encoder,
    record: impl FnOnce(&mut Graph, &[Var]) -> Result<Var, GradError>,
) -> Result<LossGraph, ObjectiveError> {
    let mut graph = Graph::new();
    let params = encoder.leaves(&mut graph);
    let loss = record(&mut graph, &params)?;
    let value = graph.value(loss).item();
    if !value.is_finite() {
        return Err(ObjectiveError::Diverged {
            batch: 0,
            value,
            dump: None,
        });
    }
    Ok(LossGraph {
        graph,
        params,
        loss,
    })
}

pub fn vip_loss(
    encoder: &Encoder,
    batch: &VipBatch,
    cfg: &LossConfig,
) -> Result<LossGraph, ObjectiveError> {
    finish(encoder, |g, p| record_vip(g, encoder, p, batch, cfg))
}

pub fn tcn_loss(
    encoder: &Encoder,
    batch: &TcnBatch,
    cfg: &LossConfig,
) -> Result<LossGraph, ObjectiveError> {
    finish(encoder, |g, p| record_tcn(g, encoder, p, batch, cfg))
}

pub fn lstd_loss(
    encoder: &Encoder,
    batch: &LstdBatch,
    cfg: &LossConfig,
) -> Result<LossGraph, ObjectiveError> {
    finish(encoder, |g, p| record_lstd(g, encoder, p, batch, cfg))
}

/// A sampled batch for any of the objectives.
#[derive(Clone, Debug)]
pub enum AnyBatch {
    Vip(VipBatch),
    Tcn(TcnBatch),
    Lstd(LstdBatch),
}

impl AnyBatch {
    pub fn sample<R: rand::Rng + ?Sized>(
        objective: Objective,
        dataset: &TrajectoryDataset,
        batch_size: usize,
        cfg: &LossConfig,
        rng: &mut R,
    ) -> Result<Self, StoreError> {
        Ok(match objective {
            Objective::Vip => AnyBatch::Vip(sample_vip_batch(
                dataset,
                batch_size,
                cfg.n_neg,
                cfg.goal_selfloop,
                rng,
            )?),
            Objective::Tcn => AnyBatch::Tcn(sample_tcn_triplets(
                dataset,
                batch_size,
                cfg.tcn_window,
                cfg.n_neg,
                rng,
            )?),
            Objective::Lstd => {
                AnyBatch::Lstd(sample_lstd_tuples(dataset, batch_size, cfg.goal_selfloop, rng)?)
            }
        })
    }

    pub fn record(
        &self,
        g: &mut Graph,
        encoder: &Encoder,
        params: &[Var],
        cfg: &LossConfig,
    ) -> Result<Var, GradError> {
        match self {
            AnyBatch::Vip(b) => record_vip(g, encoder, params, b, cfg),
            AnyBatch::Tcn(b) => record_tcn(g, encoder, params, b, cfg),
            AnyBatch::Lstd(b) => record_lstd(g, encoder, params, b, cfg),
        }
    }

    /// Frame indices, for diagnosing a diverged batch.
    fn describe(&self) -> serde_json::Value {
        match self {
            AnyBatch::Vip(b) => serde_json::json!({
                "objective": "vip",
                "elements": b.elements.iter().map(|e| [e.traj, e.start, e.mid, e.goal]).collect::<Vec<_>>(),
                "negatives": b.negatives.iter().map(|n| [n.anchor, n.traj, n.index]).collect::<Vec<_>>(),
            }),
            AnyBatch::Tcn(b) => serde_json::json!({
                "objective": "tcn",
                "triplets": b.triplets.iter().map(|t| [t.traj, t.t1, t.t2, t.t3]).collect::<Vec<_>>(),
            }),
            AnyBatch::Lstd(b) => serde_json::json!({
                "objective": "lstd",
                "elements": b.elements.iter().map(|e| [e.traj, e.mid, e.goal]).collect::<Vec<_>>(),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub batch: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub ms: Option<f64>,
}

pub const METRICS_HEADER: &str = "batch,loss,grad_norm,ms";

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let ms = r.ms.map(|m| format!("{m:.3}")).unwrap_or_default();
        s.push_str(&format!("{},{:e},{:e},{}\n", r.batch, r.loss, r.grad_norm, ms));
    }
    s
}

pub struct TrainOutcome {
    pub encoder: Encoder,
    pub metrics: Vec<MetricRow>,
}

/// Trains a freshly initialized encoder on `dataset`.
///
/// With `out_dir` set, writes `encoder_{batch}.venc` every `eval_interval`
/// batches, `encoder.venc` at the end, and `metrics.csv`.
pub fn train(
    dataset: &TrajectoryDataset,
    encoder_config: &EncoderConfig,
    train_config: &TrainConfig,
    loss_config: &LossConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, ObjectiveError> {
    train_config.validate()?;
    loss_config.validate()?;
    if dataset.obs_dim() != encoder_config.input_dim {
        return Err(ObjectiveError::DimMismatch {
            data: dataset.obs_dim(),
            encoder: encoder_config.input_dim,
        });
    }
    let mut encoder = Encoder::init(encoder_config.clone())?;
    let mut adam = Adam::new(encoder.parameters(), train_config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed);
    let mut metrics = Vec::with_capacity(train_config.num_batches);
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let clock = Instant::now();

    for batch_idx in 1..=train_config.num_batches {
        let batch = AnyBatch::sample(
            train_config.objective,
            dataset,
            train_config.batch_size,
            loss_config,
            &mut rng,
        )?;
        let mut g = Graph::new();
        let params = encoder.leaves(&mut g);
        let loss = batch.record(&mut g, &encoder, &params, loss_config)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            let dump = match out_dir {
                Some(dir) => {
                    let p = dir.join(format!("diverged_batch_{batch_idx}.json"));
                    fs::write(&p, serde_json::to_vec_pretty(&batch.describe()).unwrap())?;
                    Some(p)
                }
                None => None,
            };
            return Err(ObjectiveError::Diverged {
                batch: batch_idx,
                value,
                dump,
            });
        }
        let grads = g.backward(loss)?;
        let grad_refs: Vec<&Tensor> = params.iter().map(|&p| grads.wrt(p)).collect();
        let grad_norm = grad_refs
            .iter()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if !grad_norm.is_finite() {
            return Err(ObjectiveError::Diverged {
                batch: batch_idx,
                value: grad_norm,
                dump: None,
            });
        }
        adam.step(encoder.named_parameters_mut(), &grad_refs)?;
        metrics.push(MetricRow {
            batch: batch_idx,
            loss: value,
            grad_norm,
            ms: train_config
                .record_wall_clock
                .then(|| clock.elapsed().as_secs_f64() * 1e3),
        });
        if let Some(dir) = out_dir {
            if batch_idx % train_config.eval_interval == 0 && batch_idx != train_config.num_batches {
                encoder.save(dir.join(format!("encoder_{batch_idx}.venc")))?;
            }
        }
    }
    if let Some(dir) = out_dir {
        encoder.save(dir.join("encoder.venc"))?;
        let mut f = fs::File::create(dir.join("metrics.csv"))?;
        f.write_all(metrics_csv(&metrics).as_bytes())?;
    }
    Ok(TrainOutcome { encoder, metrics })
}

/// Mean of the first and last `window` losses, for checking that training
/// made progress.
pub fn smoothed_loss_ends(metrics: &[MetricRow], window: usize) -> (f64, f64) {
    let w = window.clamp(1, metrics.len().max(1));
    let mean = |rows: &[MetricRow]| rows.iter().map(|r| r.loss).sum::<f64>() / rows.len() as f64;
    (mean(&metrics[..w]), mean(&metrics[metrics.len() - w..]))
}
