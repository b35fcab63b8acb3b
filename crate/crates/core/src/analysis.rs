//! Evaluation battery over frozen encoders.
//!
//! Every analysis measures distance to a goal as `‖φ(o) − ḡ‖` and, unless a
//! goal spec is given, uses each trajectory's last frame as its goal.

use serde::Serialize;

use crate::control::{ControlError, GoalSpec};
use crate::encoder::{Encoder, EncoderError};
use crate::gradcore::Tensor;
use crate::trajstore::{Trajectory, TrajectoryDataset};

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error("curve too short: {0} points, need at least 2")]
    CurveTooShort(usize),
    #[error("no trajectory has at least {0} frames")]
    NoQualifyingTrajectory(usize),
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("expected 1 or 2 encoders, got {0}")]
    EncoderCount(usize),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("observation has {got} dims, encoder expects {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Control(#[from] ControlError),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DistanceCurve {
    pub traj_id: usize,
    pub values: Vec<f64>,
    pub normalized: bool,
    /// The initial distance was zero, so the curve could not be normalized.
    pub degenerate: bool,
}

fn embedding_distances(
    encoder: &Encoder,
    frames: &Tensor,
    goal: &[f64],
) -> Result<Vec<f64>, AnalysisError> {
    if frames.cols() != encoder.input_dim() {
        return Err(AnalysisError::DimMismatch {
            expected: encoder.input_dim(),
            got: frames.cols(),
        });
    }
    let emb = encoder.embed_batch(frames)?;
    Ok((0..emb.rows())
        .map(|i| {
            emb.row(i)
                .iter()
                .zip(goal)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect())
}

fn last_frame_goal(encoder: &Encoder, frames: &Tensor) -> Result<Vec<f64>, AnalysisError> {
    let last = frames.row(frames.rows() - 1);
    if last.len() != encoder.input_dim() {
        return Err(AnalysisError::DimMismatch {
            expected: encoder.input_dim(),
            got: last.len(),
        });
    }
    Ok(encoder.embed(last)?)
}

/// Distance of every frame to the goal; the last frame when `goal` is `None`.
pub fn distance_curve(
    encoder: &Encoder,
    traj_id: usize,
    trajectory: &Trajectory,
    goal: Option<&GoalSpec>,
    normalize: bool,
) -> Result<DistanceCurve, AnalysisError> {
    let frames = trajectory.frames();
    let g = match goal {
        Some(spec) => spec.embedding().to_vec(),
        None => last_frame_goal(encoder, frames)?,
    };
    let mut values = embedding_distances(encoder, frames, &g)?;
    let first = values[0];
    let degenerate = first <= 0.0;
    let normalized = normalize && !degenerate;
    if normalized {
        values.iter_mut().for_each(|v| *v /= first);
    }
    Ok(DistanceCurve {
        traj_id,
        values,
        normalized,
        degenerate,
    })
}

/// Fraction of steps where the curve strictly increases.
pub fn bump_fraction(curve: &[f64]) -> Result<f64, AnalysisError> {
    if curve.len() < 2 {
        return Err(AnalysisError::CurveTooShort(curve.len()));
    }
    let bumps = curve.windows(2).filter(|w| w[1] > w[0]).count();
    Ok(bumps as f64 / (curve.len() - 1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BumpReport {
    /// `(trajectory id, bump fraction)` for every qualifying trajectory.
    pub fractions: Vec<(usize, f64)>,
    pub mean: f64,
    pub std: f64,
    /// Trajectories shorter than the frame cap.
    pub skipped_short: Vec<usize>,
    /// Trajectories whose initial distance was zero.
    pub degenerate: Vec<usize>,
}

/// Bump fractions over a dataset. With `frame_cap`, trajectories are cut to
/// their first `frame_cap` frames and shorter ones are skipped; the goal is
/// the last retained frame.
pub fn dataset_bump_report(
    encoder: &Encoder,
    dataset: &TrajectoryDataset,
    frame_cap: Option<usize>,
) -> Result<BumpReport, AnalysisError> {
    if frame_cap == Some(0) {
        return Err(AnalysisError::Invalid("frame_cap must be >= 1".into()));
    }
    let mut fractions = Vec::new();
    let mut skipped_short = Vec::new();
    let mut degenerate = Vec::new();
    for (i, traj) in dataset.trajectories().iter().enumerate() {
        let traj = match frame_cap {
            Some(cap) if traj.len() < cap => {
                skipped_short.push(i);
                continue;
            }
            Some(cap) => traj.truncated(cap),
            None => traj.clone(),
        };
        if traj.len() < 2 {
            return Err(AnalysisError::CurveTooShort(traj.len()));
        }
        let curve = distance_curve(encoder, i, &traj, None, false)?;
        if curve.degenerate {
            degenerate.push(i);
            continue;
        }
        fractions.push((i, bump_fraction(&curve.values)?));
    }
    if fractions.is_empty() {
        if let Some(cap) = frame_cap {
            if degenerate.is_empty() {
                return Err(AnalysisError::NoQualifyingTrajectory(cap));
            }
        }
        return Err(AnalysisError::Invalid(
            "every qualifying trajectory has a degenerate curve".into(),
        ));
    }
    let n = fractions.len() as f64;
    let mean = fractions.iter().map(|f| f.1).sum::<f64>() / n;
    let std = (fractions.iter().map(|f| (f.1 - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(BumpReport {
        fractions,
        mean,
        std,
        skipped_short,
        degenerate,
    })
}

/// Per-transition embedding rewards toward each trajectory's last frame,
/// divided by the trajectory's initial distance (left raw when that is zero).
pub fn normalized_rewards(
    encoder: &Encoder,
    trajectory: &Trajectory,
) -> Result<Vec<f64>, AnalysisError> {
    let curve = distance_curve(encoder, 0, trajectory, None, true)?;
    Ok(curve.values.windows(2).map(|w| w[0] - w[1]).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HistogramReport {
    pub edges: Vec<f64>,
    pub counts_a: Vec<usize>,
    pub counts_b: Option<Vec<usize>>,
    /// `(|A| − |B|) / |B|` per bin; `None` where `|B| = 0`.
    pub ratios: Option<Vec<Option<f64>>>,
}

impl HistogramReport {
    /// Bins whose ratio was omitted for a zero divisor.
    pub fn flagged_bins(&self) -> Vec<usize> {
        self.ratios
            .as_ref()
            .map(|r| r.iter().enumerate().filter(|(_, v)| v.is_none()).map(|(i, _)| i).collect())
            .unwrap_or_default()
    }
}

fn bin_index(value: f64, half_width: f64, bins: usize) -> usize {
    let w = 2.0 * half_width / bins as f64;
    (((value + half_width) / w).floor().max(0.0) as usize).min(bins - 1)
}

/// Histograms of normalized embedding rewards for one or two encoders over
/// uniform bins on `[−m, m]`, where `m` is `range` or else the largest
/// observed magnitude (1 if every reward is zero).
pub fn reward_histogram(
    encoders: &[&Encoder],
    dataset: &TrajectoryDataset,
    bins: usize,
    range: Option<f64>,
) -> Result<HistogramReport, AnalysisError> {
    if encoders.is_empty() || encoders.len() > 2 {
        return Err(AnalysisError::EncoderCount(encoders.len()));
    }
    if bins == 0 || range.is_some_and(|r| !(r > 0.0)) {
        return Err(AnalysisError::Invalid("bins must be >= 1 and range > 0".into()));
    }
    let rewards: Vec<Vec<f64>> = encoders
        .iter()
        .map(|enc| {
            let mut all = Vec::new();
            for t in dataset.trajectories() {
                if t.len() >= 2 {
                    all.extend(normalized_rewards(enc, t)?);
                }
            }
            Ok(all)
        })
        .collect::<Result<_, AnalysisError>>()?;
    let m = range.unwrap_or_else(|| {
        let max = rewards.iter().flatten().fold(0.0f64, |a, r| a.max(r.abs()));
        if max > 0.0 {
            max
        } else {
            1.0
        }
    });
    let edges: Vec<f64> = (0..=bins).map(|i| -m + 2.0 * m * i as f64 / bins as f64).collect();
    let count = |rs: &[f64]| {
        let mut c = vec![0usize; bins];
        for &r in rs {
            c[bin_index(r, m, bins)] += 1;
        }
        c
    };
    let counts_a = count(&rewards[0]);
    let counts_b = rewards.get(1).map(|r| count(r));
    let ratios = counts_b.as_ref().map(|b| {
        counts_a
            .iter()
            .zip(b)
            .map(|(&a, &b)| (b > 0).then(|| (a as f64 - b as f64) / b as f64))
            .collect()
    });
    Ok(HistogramReport {
        edges,
        counts_a,
        counts_b,
        ratios,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorrelationReport {
    pub r2: f64,
    pub slope: f64,
    pub intercept: f64,
    pub n: usize,
    /// One of the variables has zero variance; `r2` is reported as 0.
    pub degenerate: bool,
}

/// Ordinary least squares of `y` on `x` and its coefficient of determination.
pub fn ols(x: &[f64], y: &[f64]) -> Result<CorrelationReport, AnalysisError> {
    if x.len() != y.len() {
        return Err(AnalysisError::Invalid(format!(
            "{} predictors vs {} targets",
            x.len(),
            y.len()
        )));
    }
    let n = x.len();
    if n < 2 {
        return Err(AnalysisError::TooFewSamples(n));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return Ok(CorrelationReport {
            r2: 0.0,
            slope: 0.0,
            intercept: my,
            n,
            degenerate: true,
        });
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    Ok(CorrelationReport {
        r2: 1.0 - ss_res / syy,
        slope,
        intercept,
        n,
        degenerate: false,
    })
}

/// Observations of one episode with the true per-step rewards that go with
/// its transitions.
#[derive(Clone, Debug)]
pub struct RewardEpisode<'a> {
    pub observations: &'a [Vec<f64>],
    pub true_rewards: &'a [f64],
    pub goal: &'a GoalSpec,
}

/// Pairs each transition's embedding reward with its true reward and fits
/// `true ≈ slope · embedding + intercept`.
pub fn reward_correlation(
    encoder: &Encoder,
    episodes: &[RewardEpisode<'_>],
) -> Result<(Vec<(f64, f64)>, CorrelationReport), AnalysisError> {
    let mut pairs = Vec::new();
    for ep in episodes {
        if ep.observations.len() != ep.true_rewards.len() + 1 {
            return Err(AnalysisError::Invalid(format!(
                "{} observations but {} rewards",
                ep.observations.len(),
                ep.true_rewards.len()
            )));
        }
        if ep.observations.len() < 2 {
            continue;
        }
        let frames = Tensor::from_rows(ep.observations);
        let d = embedding_distances(encoder, &frames, ep.goal.embedding())?;
        for (w, &t) in d.windows(2).zip(ep.true_rewards) {
            pairs.push((w[0] - w[1], t));
        }
    }
    let (x, y): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
    let report = ols(&x, &y)?;
    Ok((pairs, report))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Prop2Report {
    pub fraction: f64,
    pub decreasing: usize,
    pub steps: usize,
}

/// Pooled fraction of steps along (optimal) trajectories where the distance
/// to the trajectory's last frame strictly decreases.
pub fn prop2_check<'a>(
    encoder: &Encoder,
    trajectories: impl IntoIterator<Item = &'a Trajectory>,
) -> Result<Prop2Report, AnalysisError> {
    let mut decreasing = 0;
    let mut steps = 0;
    for t in trajectories {
        if t.len() < 2 {
            continue;
        }
        let curve = distance_curve(encoder, 0, t, None, false)?;
        steps += t.len() - 1;
        decreasing += curve.values.windows(2).filter(|w| w[1] < w[0]).count();
    }
    Ok(Prop2Report {
        fraction: if steps == 0 { 0.0 } else { decreasing as f64 / steps as f64 },
        decreasing,
        steps,
    })
}

pub fn curves_csv(curves: &[DistanceCurve]) -> String {
    let mut s = String::from("traj_id,step,distance\n");
    for c in curves {
        for (t, v) in c.values.iter().enumerate() {
            s.push_str(&format!("{},{},{:e}\n", c.traj_id, t, v));
        }
    }
    s
}

/// Per-trajectory rows followed by `mean` and `std` summary rows.
pub fn bumps_csv(report: &BumpReport) -> String {
    let mut s = String::from("traj_id,bump_fraction\n");
    for (i, f) in &report.fractions {
        s.push_str(&format!("{i},{f:e}\n"));
    }
    s.push_str(&format!("mean,{:e}\nstd,{:e}\n", report.mean, report.std));
    s
}

pub fn histogram_csv(report: &HistogramReport) -> String {
    let mut s = String::from("bin_lo,bin_hi,count_a,count_b,ratio\n");
    for (i, a) in report.counts_a.iter().enumerate() {
        let b = report.counts_b.as_ref().map(|b| b[i].to_string()).unwrap_or_default();
        let r = report
            .ratios
            .as_ref()
            .and_then(|r| r[i])
            .map(|v| format!("{v:e}"))
            .unwrap_or_default();
        s.push_str(&format!(
            "{:e},{:e},{},{},{}\n",
            report.edges[i],
            report.edges[i + 1],
            a,
            b,
            r
        ));
    }
    s
}

pub fn correlation_csv(pairs: &[(f64, f64)]) -> String {
    let mut s = String::from("embedding_reward,true_reward\n");
    for (e, t) in pairs {
        s.push_str(&format!("{e:e},{t:e}\n"));
    }
    s
}

/// `{r2, slope, intercept, n}` plus the degeneracy flag.
pub fn correlation_json(report: &CorrelationReport) -> serde_json::Value {
    serde_json::json!({
        "r2": report.r2,
        "slope": report.slope,
        "intercept": report.intercept,
        "n": report.n,
        "degenerate": report.degenerate,
    })
}

#[cfg(test)]
mod tests;
