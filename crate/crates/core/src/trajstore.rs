//! Trajectory datasets, their binary format, and the training samplers.
//!
//! # `VIPDATA1` layout
//!
//! ```text
//! b"VIPDATA1"                         8-byte magic
//! u32 LE  N                           number of trajectories
//! N × (u32 T, u32 D, u32 A, u32 S)    frames, obs dim, action dim, state dim
//! per trajectory, in order:
//!     f32 LE × T·D                    frames, row-major
//!     f32 LE × (T−1)·A                actions (A = 0 when absent)
//!     f32 LE × T·S                    true states (S = 0 when absent)
//! JSON trailer                        {"manifest": Manifest, "trajectories": [TrajectoryMeta]}
//! u64 LE                              byte offset of the JSON trailer
//! ```
//!
//! Values are stored as 32-bit floats; in memory they are widened to 64 bits.
//! Trajectories quantize their values through `f32` on construction, so a
//! save/load round trip is bit-exact.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::gradcore::Tensor;
use crate::worlds::ObservationMode;

pub const DATA_MAGIC: &[u8; 8] = b"VIPDATA1";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("bad magic: not a trajectory dataset")]
    BadMagic,
    #[error("truncated dataset: {0}")]
    Truncated(String),
    #[error("count mismatch: {0}")]
    CountMismatch(String),
    #[error("empty dataset")]
    Empty,
    #[error("inconsistent trajectory: {0}")]
    Inconsistent(String),
    #[error("sampler precondition violated: {0}")]
    Sampler(String),
    #[error("malformed metadata trailer: {0}")]
    Trailer(#[from] serde_json::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub world: String,
    pub start: Vec<f64>,
    pub goal: Vec<f64>,
    pub noise: f64,
    /// Free-form label such as `expert` or `failure`.
    pub tag: String,
}

fn quantize(rows: &[Vec<f64>]) -> Result<Tensor, StoreError> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(StoreError::Inconsistent("ragged rows".into()));
    }
    let data = rows
        .iter()
        .flat_map(|r| r.iter().map(|&v| v as f32 as f64))
        .collect();
    Ok(Tensor::matrix(rows.len(), cols, data))
}

/// An ordered sequence of observation frames with optional actions and
/// ground-truth states.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    frames: Tensor,
    actions: Option<Tensor>,
    states: Option<Tensor>,
    meta: TrajectoryMeta,
}

impl Trajectory {
    /// Builds a trajectory, rounding every value through `f32`.
    ///
    /// Single-frame trajectories are representable (so that malformed data
    /// can be loaded and diagnosed); every sampler and analysis requires at
    /// least two frames and reports an error otherwise.
    pub fn new(
        frames: Vec<Vec<f64>>,
        actions: Option<Vec<Vec<f64>>>,
        states: Option<Vec<Vec<f64>>>,
        meta: TrajectoryMeta,
    ) -> Result<Self, StoreError> {
        if frames.is_empty() || frames[0].is_empty() {
            return Err(StoreError::Inconsistent("trajectory without frames".into()));
        }
        let t = frames.len();
        let frames = quantize(&frames)?;
        let actions = match actions {
            Some(a) if a.iter().any(|r| !r.is_empty()) => {
                if a.len() != t - 1 {
                    return Err(StoreError::Inconsistent(format!(
                        "{} actions for {t} frames",
                        a.len()
                    )));
                }
                Some(quantize(&a)?)
            }
            _ => None,
        };
        let states = match states {
            Some(s) if !s.is_empty() && !s[0].is_empty() => {
                if s.len() != t {
                    return Err(StoreError::Inconsistent(format!(
                        "{} states for {t} frames",
                        s.len()
                    )));
                }
                Some(quantize(&s)?)
            }
            _ => None,
        };
        Ok(Self {
            frames,
            actions,
            states,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn obs_dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn action_dim(&self) -> usize {
        self.actions.as_ref().map_or(0, Tensor::cols)
    }

    pub fn state_dim(&self) -> usize {
        self.states.as_ref().map_or(0, Tensor::cols)
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        self.frames.row(i)
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn actions(&self) -> Option<&Tensor> {
        self.actions.as_ref()
    }

    pub fn states(&self) -> Option<&Tensor> {
        self.states.as_ref()
    }

    pub fn meta(&self) -> &TrajectoryMeta {
        &self.meta
    }

    pub fn meta_mut(&mut self) -> &mut TrajectoryMeta {
        &mut self.meta
    }

    /// The first `len` frames (and matching actions and states).
    pub fn truncated(&self, len: usize) -> Trajectory {
        let len = len.min(self.len()).max(1);
        let take = |t: &Tensor, n: usize| {
            Tensor::matrix(n, t.cols(), t.data()[..n * t.cols()].to_vec())
        };
        Trajectory {
            frames: take(&self.frames, len),
            actions: self.actions.as_ref().map(|a| take(a, len - 1)),
            states: self.states.as_ref().map(|s| take(s, len)),
            meta: self.meta.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub observation_mode: ObservationMode,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub state_dim: usize,
    pub num_trajectories: usize,
    pub total_frames: usize,
    /// The generation parameters, echoed verbatim.
    pub generation: serde_json::Value,
    /// Hex SHA-256 of the canonical JSON of `generation`.
    pub generation_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryDataset {
    trajectories: Vec<Trajectory>,
    manifest: Manifest,
}

#[derive(Serialize, Deserialize)]
struct Trailer {
    manifest: Manifest,
    trajectories: Vec<TrajectoryMeta>,
}

pub fn config_hash(generation: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(generation).expect("json value serializes");
    hex::encode(Sha256::digest(&bytes))
}

impl TrajectoryDataset {
    pub fn new(
        trajectories: Vec<Trajectory>,
        observation_mode: ObservationMode,
        generation: serde_json::Value,
    ) -> Result<Self, StoreError> {
        let first = trajectories.first().ok_or(StoreError::Empty)?;
        let (d, a, s) = (first.obs_dim(), first.action_dim(), first.state_dim());
        for (i, t) in trajectories.iter().enumerate() {
            if (t.obs_dim(), t.action_dim(), t.state_dim()) != (d, a, s) {
                return Err(StoreError::Inconsistent(format!(
                    "trajectory {i} has dims (D={}, A={}, S={}), dataset has (D={d}, A={a}, S={s})",
                    t.obs_dim(),
                    t.action_dim(),
                    t.state_dim()
                )));
            }
        }
        let manifest = Manifest {
            observation_mode,
            obs_dim: d,
            action_dim: a,
            state_dim: s,
            num_trajectories: trajectories.len(),
            total_frames: trajectories.iter().map(Trajectory::len).sum(),
            generation_hash: config_hash(&generation),
            generation,
        };
        Ok(Self {
            trajectories,
            manifest,
        })
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn get(&self, i: usize) -> &Trajectory {
        &self.trajectories[i]
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn obs_dim(&self) -> usize {
        self.manifest.obs_dim
    }

    /// A dataset holding the given subset of trajectories.
    pub fn subset(&self, indices: impl IntoIterator<Item = usize>) -> Result<Self, StoreError> {
        let trajs = indices.into_iter().map(|i| self.trajectories[i].clone()).collect();
        Self::new(trajs, self.manifest.observation_mode, self.manifest.generation.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, StoreError> {
        if self.trajectories.is_empty() {
            return Err(StoreError::Empty);
        }
        let mut buf = Vec::new();
        buf.extend_from_slice(DATA_MAGIC);
        buf.extend_from_slice(&(self.trajectories.len() as u32).to_le_bytes());
        for t in &self.trajectories {
            for n in [t.len(), t.obs_dim(), t.action_dim(), t.state_dim()] {
                buf.extend_from_slice(&(n as u32).to_le_bytes());
            }
        }
        let mut put = |t: Option<&Tensor>| {
            if let Some(t) = t {
                for &v in t.data() {
                    buf.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        };
        for t in &self.trajectories {
            put(Some(&t.frames));
            put(t.actions.as_ref());
            put(t.states.as_ref());
        }
        let offset = buf.len() as u64;
        let trailer = Trailer {
            manifest: self.manifest.clone(),
            trajectories: self.trajectories.iter().map(|t| t.meta.clone()).collect(),
        };
        serde_json::to_writer(&mut buf, &trailer)?;
        buf.extend_from_slice(&offset.to_le_bytes());
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, StoreError> {
        if bytes.len() < 8 || &bytes[..8] != DATA_MAGIC {
            return Err(StoreError::BadMagic);
        }
        let mut cur = Cursor { bytes, pos: 8 };
        let n = cur.u32()? as usize;
        if n == 0 {
            return Err(StoreError::Empty);
        }
        let mut dims = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            dims.push([cur.u32()?, cur.u32()?, cur.u32()?, cur.u32()?].map(|v| v as usize));
        }
        let mut blobs = Vec::with_capacity(n);
        for &[t, d, a, s] in &dims {
            if t == 0 || d == 0 {
                return Err(StoreError::CountMismatch(format!("trajectory with T={t}, D={d}")));
            }
            let frames = cur.f32s(t * d)?;
            let actions = cur.f32s((t - 1) * a)?;
            let states = cur.f32s(t * s)?;
            blobs.push((frames, actions, states));
        }
        if bytes.len() < cur.pos + 8 {
            return Err(StoreError::Truncated("missing metadata trailer".into()));
        }
        let footer = bytes.len() - 8;
        let offset = u64::from_le_bytes(bytes[footer..].try_into().unwrap()) as usize;
        if offset != cur.pos {
            return Err(StoreError::CountMismatch(format!(
                "blobs end at byte {}, footer says trailer starts at {offset}",
                cur.pos
            )));
        }
        let trailer: Trailer = serde_json::from_slice(&bytes[offset..footer])?;
        if trailer.trajectories.len() != n || trailer.manifest.num_trajectories != n {
            return Err(StoreError::CountMismatch(format!(
                "header lists {n} trajectories, trailer lists {} (manifest {})",
                trailer.trajectories.len(),
                trailer.manifest.num_trajectories
            )));
        }
        let trajectories = dims
            .iter()
            .zip(blobs)
            .zip(trailer.trajectories)
            .map(|((&[t, d, a, s], (f, ac, st)), meta)| Trajectory {
                frames: Tensor::matrix(t, d, f),
                actions: (a > 0).then(|| Tensor::matrix(t - 1, a, ac)),
                states: (s > 0).then(|| Tensor::matrix(t, s, st)),
                meta,
            })
            .collect();
        let ds = Self::new(
            trajectories,
            trailer.manifest.observation_mode,
            trailer.manifest.generation.clone(),
        )
        .map_err(|e| StoreError::CountMismatch(e.to_string()))?;
        if ds.manifest != trailer.manifest {
            return Err(StoreError::CountMismatch(
                "manifest does not describe the stored trajectories".into(),
            ));
        }
        Ok(ds)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), StoreError> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], StoreError> {
        // leave room for the footer
        let end = self.pos.checked_add(n).filter(|&e| e + 8 <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(StoreError::Truncated(format!(
                "needed {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))),
        }
    }

    fn u32(&mut self) -> Result<u32, StoreError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>, StoreError> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| {
            StoreError::CountMismatch(format!("{n} values overflow"))
        })?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }
}

// ---------------------------------------------------------------------------
// samplers

/// Frame indices of one sub-trajectory: `start ≤ mid < goal`, or
/// `mid == goal` when the goal self-loop option fires.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VipElement {
    pub traj: usize,
    pub start: usize,
    pub mid: usize,
    pub goal: usize,
}

impl VipElement {
    /// Index of the frame following `mid` (the goal itself on a self-loop).
    pub fn mid_next(&self) -> usize {
        if self.mid == self.goal {
            self.goal
        } else {
            self.mid + 1
        }
    }
}

/// A consecutive pair `(index, index + 1)` from a trajectory other than the
/// anchor element's.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NegativePair {
    pub anchor: usize,
    pub traj: usize,
    pub index: usize,
}

/// Materialized batch for the value-implicit objective.
#[derive(Clone, Debug, PartialEq)]
pub struct VipBatch {
    pub elements: Vec<VipElement>,
    pub negatives: Vec<NegativePair>,
    pub o_start: Tensor,
    pub o_goal: Tensor,
    pub o_mid: Tensor,
    pub o_mid_next: Tensor,
    /// 1 where the mid frame is the goal frame.
    pub goal_flag: Vec<f64>,
    pub neg: Tensor,
    pub neg_next: Tensor,
}

impl VipBatch {
    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    /// Panics if an element or negative breaks the sampling contract.
    pub fn assert_well_formed(&self, dataset: &TrajectoryDataset) {
        for e in &self.elements {
            let h = dataset.get(e.traj).len();
            assert!(e.start <= e.mid && e.mid <= e.goal && e.goal < h, "{e:?} (h={h})");
            assert!(e.start < e.goal, "{e:?}");
        }
        for n in &self.negatives {
            assert_ne!(n.traj, self.elements[n.anchor].traj);
            assert!(n.index + 1 < dataset.get(n.traj).len());
        }
    }
}

fn gather(dataset: &TrajectoryDataset, idx: impl Iterator<Item = (usize, usize)>) -> Tensor {
    let d = dataset.obs_dim();
    let mut data = Vec::new();
    let mut rows = 0;
    for (t, i) in idx {
        data.extend_from_slice(dataset.get(t).frame(i));
        rows += 1;
    }
    Tensor::matrix(rows, d, data)
}

fn require_min_len(dataset: &TrajectoryDataset, min: usize) -> Result<(), StoreError> {
    if let Some((i, t)) = dataset.trajectories().iter().enumerate().find(|(_, t)| t.len() < min) {
        return Err(StoreError::Sampler(format!(
            "trajectory {i} has {} frames, need at least {min}",
            t.len()
        )));
    }
    Ok(())
}

/// Samples `batch_size` sub-trajectories plus `n_neg` cross-trajectory
/// negative pairs per element.
///
/// The trajectory is uniform, then `start ~ U[0, h−2]`,
/// `goal ~ U[start+1, h−1]`, `mid ~ U[start, goal−1]`. With probability
/// `goal_selfloop`, `mid` is set to `goal` instead.
pub fn sample_vip_batch<R: Rng + ?Sized>(
    dataset: &TrajectoryDataset,
    batch_size: usize,
    n_neg: usize,
    goal_selfloop: f64,
    rng: &mut R,
) -> Result<VipBatch, StoreError> {
    require_min_len(dataset, 2)?;
    if batch_size == 0 {
        return Err(StoreError::Sampler("batch size must be >= 1".into()));
    }
    if n_neg > 0 && dataset.len() < 2 {
        return Err(StoreError::Sampler(
            "negatives need at least two trajectories".into(),
        ));
    }
    if !(0.0..=1.0).contains(&goal_selfloop) {
        return Err(StoreError::Sampler(format!(
            "goal self-loop probability {goal_selfloop} outside [0, 1]"
        )));
    }
    let mut elements = Vec::with_capacity(batch_size);
    let mut negatives = Vec::with_capacity(batch_size * n_neg);
    for b in 0..batch_size {
        let traj = rng.random_range(0..dataset.len());
        let h = dataset.get(traj).len();
        let start = rng.random_range(0..=h - 2);
        let goal = rng.random_range(start + 1..=h - 1);
        let mut mid = rng.random_range(start..=goal - 1);
        if goal_selfloop > 0.0 && rng.random::<f64>() < goal_selfloop {
            mid = goal;
        }
        elements.push(VipElement {
            traj,
            start,
            mid,
            goal,
        });
        for _ in 0..n_neg {
            // uniform over the other trajectories
            let mut other = rng.random_range(0..dataset.len() - 1);
            if other >= traj {
                other += 1;
            }
            let index = rng.random_range(0..=dataset.get(other).len() - 2);
            negatives.push(NegativePair {
                anchor: b,
                traj: other,
                index,
            });
        }
    }
    Ok(VipBatch {
        o_start: gather(dataset, elements.iter().map(|e| (e.traj, e.start))),
        o_goal: gather(dataset, elements.iter().map(|e| (e.traj, e.goal))),
        o_mid: gather(dataset, elements.iter().map(|e| (e.traj, e.mid))),
        o_mid_next: gather(dataset, elements.iter().map(|e| (e.traj, e.mid_next()))),
        goal_flag: elements.iter().map(|e| f64::from(u8::from(e.mid == e.goal))).collect(),
        neg: gather(dataset, negatives.iter().map(|n| (n.traj, n.index))),
        neg_next: gather(dataset, negatives.iter().map(|n| (n.traj, n.index + 1))),
        elements,
        negatives,
    })
}

/// Anchor, positive and in-trajectory negative indices (`t1 < t2 < t3`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triplet {
    pub traj: usize,
    pub t1: usize,
    pub t2: usize,
    pub t3: usize,
}

/// One extra negative frame drawn from a different trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExtraNegative {
    pub anchor: usize,
    pub traj: usize,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TcnBatch {
    pub triplets: Vec<Triplet>,
    pub extra: Vec<ExtraNegative>,
    pub anchors: Tensor,
    pub positives: Tensor,
    pub negatives: Tensor,
    pub extra_frames: Tensor,
}

impl TcnBatch {
    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    /// For each anchor, the rows of `negatives` it is contrasted against:
    /// every in-batch `t3` from the same trajectory that lies after its `t2`.
    pub fn pooled_negatives(&self) -> Vec<Vec<usize>> {
        self.triplets
            .iter()
            .map(|a| {
                self.triplets
                    .iter()
                    .enumerate()
                    .filter(|(_, b)| b.traj == a.traj && b.t3 > a.t2)
                    .map(|(j, _)| j)
                    .collect()
            })
            .collect()
    }
}

/// Samples time-contrastive triplets: `t1` uniform, `t2 = t1 + k` with
/// `k ~ U[1, window]` clamped to leave room for `t3`, and `t3 ~ U(t2, h−1]`.
/// Trajectories shorter than three frames are skipped. `n_extra` frames from
/// other trajectories are added per anchor as further negatives.
pub fn sample_tcn_triplets<R: Rng + ?Sized>(
    dataset: &TrajectoryDataset,
    batch_size: usize,
    window: usize,
    n_extra: usize,
    rng: &mut R,
) -> Result<TcnBatch, StoreError> {
    let eligible: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.get(i).len() >= 3).collect();
    if eligible.is_empty() {
        return Err(StoreError::Sampler("no trajectory has three frames".into()));
    }
    if window == 0 || batch_size == 0 {
        return Err(StoreError::Sampler("window and batch size must be >= 1".into()));
    }
    if n_extra > 0 && dataset.len() < 2 {
        return Err(StoreError::Sampler(
            "extra negatives need at least two trajectories".into(),
        ));
    }
    let mut triplets = Vec::with_capacity(batch_size);
    let mut extra = Vec::new();
    for b in 0..batch_size {
        let traj = eligible[rng.random_range(0..eligible.len())];
        let h = dataset.get(traj).len();
        let t1 = rng.random_range(0..=h - 3);
        let k = rng.random_range(1..=window).min(h - 2 - t1);
        let t2 = t1 + k;
        let t3 = rng.random_range(t2 + 1..=h - 1);
        triplets.push(Triplet { traj, t1, t2, t3 });
        for _ in 0..n_extra {
            let mut other = rng.random_range(0..dataset.len() - 1);
            if other >= traj {
                other += 1;
            }
            let index = rng.random_range(0..dataset.get(other).len());
            extra.push(ExtraNegative {
                anchor: b,
                traj: other,
                index,
            });
        }
    }
    Ok(TcnBatch {
        anchors: gather(dataset, triplets.iter().map(|t| (t.traj, t.t1))),
        positives: gather(dataset, triplets.iter().map(|t| (t.traj, t.t2))),
        negatives: gather(dataset, triplets.iter().map(|t| (t.traj, t.t3))),
        extra_frames: gather(dataset, extra.iter().map(|e| (e.traj, e.index))),
        triplets,
        extra,
    })
}

/// `(o, o', g)` transitions with the VIP sampler's marginal.
#[derive(Clone, Debug, PartialEq)]
pub struct LstdBatch {
    pub elements: Vec<VipElement>,
    pub obs: Tensor,
    pub next_obs: Tensor,
    pub goals: Tensor,
    pub goal_flag: Vec<f64>,
}

pub fn sample_lstd_tuples<R: Rng + ?Sized>(
    dataset: &TrajectoryDataset,
    batch_size: usize,
    goal_selfloop: f64,
    rng: &mut R,
) -> Result<LstdBatch, StoreError> {
    let b = sample_vip_batch(dataset, batch_size, 0, goal_selfloop, rng)?;
    Ok(LstdBatch {
        elements: b.elements,
        obs: b.o_mid,
        next_obs: b.o_mid_next,
        goals: b.o_goal,
        goal_flag: b.goal_flag,
    })
}
