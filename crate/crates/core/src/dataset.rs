//! Response ingestion and preparation: session-wise z-scoring, repetition
//! averaging, caption-embedding aggregation, multi-hot category vectors.

use std::collections::{BTreeSet, HashMap, HashSet};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::context::{Context, Degeneracy};
use crate::error::{Error, Result};
use crate::scalar::Float;

/// Single-trial response amplitudes with session/condition bookkeeping.
#[derive(Debug, Clone)]
pub struct BetaTensor<T: Float> {
    pub trials: Array2<T>,
    pub session_of_trial: Vec<usize>,
    pub condition_of_trial: Vec<String>,
    pub voxel_coords: Vec<[i32; 3]>,
}

impl<T: Float> BetaTensor<T> {
    pub fn new(
        trials: Array2<T>,
        session_of_trial: Vec<usize>,
        condition_of_trial: Vec<String>,
        voxel_coords: Vec<[i32; 3]>,
    ) -> Result<Self> {
        let tensor = Self {
            trials,
            session_of_trial,
            condition_of_trial,
            voxel_coords,
        };
        tensor.validate()?;
        Ok(tensor)
    }

    pub fn n_trials(&self) -> usize {
        self.trials.nrows()
    }

    pub fn n_voxels(&self) -> usize {
        self.trials.ncols()
    }

    pub fn n_sessions(&self) -> usize {
        self.session_of_trial.iter().copied().max().map_or(0, |m| m + 1)
    }

    pub fn validate(&self) -> Result<()> {
        let (t, p) = self.trials.dim();
        if self.session_of_trial.len() != t {
            return Err(Error::DimensionMismatch {
                context: "session_of_trial vs trials",
                left: self.session_of_trial.len(),
                right: t,
            });
        }
        if self.condition_of_trial.len() != t {
            return Err(Error::DimensionMismatch {
                context: "condition_of_trial vs trials",
                left: self.condition_of_trial.len(),
                right: t,
            });
        }
        if self.voxel_coords.len() != p {
            return Err(Error::DimensionMismatch {
                context: "voxel_coords vs trials",
                left: self.voxel_coords.len(),
                right: p,
            });
        }
        let mut seen = HashSet::with_capacity(p);
        for c in &self.voxel_coords {
            if !seen.insert(*c) {
                return Err(Error::validation(format!(
                    "duplicate voxel coordinate ({}, {}, {})",
                    c[0], c[1], c[2]
                )));
            }
        }
        // sessions must be contiguous from 0
        let present: HashSet<usize> = self.session_of_trial.iter().copied().collect();
        let n_sessions = self.n_sessions();
        for s in 0..n_sessions {
            if !present.contains(&s) {
                return Err(Error::validation(format!(
                    "session indices not contiguous: {s} missing below {n_sessions}"
                )));
            }
        }
        if !self.trials.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("beta trials".into()));
        }
        Ok(())
    }
}

/// Per-condition responses after repetition averaging (z-units).
#[derive(Debug, Clone)]
pub struct ConditionResponses<T: Float> {
    pub conditions: Vec<String>,
    pub responses: Array2<T>,
    pub repetitions_used: Vec<usize>,
    pub voxel_coords: Vec<[i32; 3]>,
}

impl<T: Float> ConditionResponses<T> {
    pub fn n_conditions(&self) -> usize {
        self.conditions.len()
    }

    pub fn n_voxels(&self) -> usize {
        self.responses.ncols()
    }

    pub fn condition_index(&self) -> HashMap<&str, usize> {
        self.conditions
            .iter()
            .enumerate()
            .map(|(i, c)| (c.as_str(), i))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    Semantic,
    Multihot,
}

/// Item-by-dimension feature matrix (semantic embeddings or multi-hot
/// category vectors).
#[derive(Debug, Clone)]
pub struct EmbeddingMatrix<T: Float> {
    pub values: Array2<T>,
    pub item_ids: Vec<String>,
    pub kind: EmbeddingKind,
}

impl<T: Float> EmbeddingMatrix<T> {
    pub fn new(values: Array2<T>, item_ids: Vec<String>, kind: EmbeddingKind) -> Result<Self> {
        if values.nrows() != item_ids.len() {
            return Err(Error::DimensionMismatch {
                context: "embedding rows vs item ids",
                left: values.nrows(),
                right: item_ids.len(),
            });
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("embedding values".into()));
        }
        if kind == EmbeddingKind::Multihot
            && !values.iter().all(|v| *v == T::zero() || *v == T::one())
        {
            return Err(Error::validation("multi-hot entries must be 0 or 1"));
        }
        Ok(Self {
            values,
            item_ids,
            kind,
        })
    }

    pub fn n_items(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }
}

/// Z-scores every voxel across the trials of each scanning session
/// independently (sample standard deviation). Zero-variance voxels are set
/// to 0 and flagged.
pub fn zscore_within_session<T: Float>(betas: &BetaTensor<T>, ctx: &Context) -> Result<BetaTensor<T>> {
    betas.validate()?;
    let (t, p) = betas.trials.dim();
    let n_sessions = betas.n_sessions();
    let mut by_session: Vec<Vec<usize>> = vec![Vec::new(); n_sessions];
    for (trial, &s) in betas.session_of_trial.iter().enumerate() {
        by_session[s].push(trial);
    }
    for (s, trials) in by_session.iter().enumerate() {
        if trials.len() < 2 {
            return Err(Error::validation(format!(
                "session {s} has {} trial(s); z-scoring needs >= 2",
                trials.len()
            )));
        }
    }

    let mut out = Array2::zeros((t, p));
    for trials in &by_session {
        let k = trials.len() as f64;
        for v in 0..p {
            let mut mean = 0.0f64;
            for &trial in trials {
                mean += betas.trials[(trial, v)].as_f64();
            }
            mean /= k;
            let mut var = 0.0f64;
            for &trial in trials {
                let d = betas.trials[(trial, v)].as_f64() - mean;
                var += d * d;
            }
            let std = (var / (k - 1.0)).sqrt();
            if std == 0.0 {
                ctx.flag(Degeneracy::ZeroVariance);
                for &trial in trials {
                    out[(trial, v)] = T::zero();
                }
            } else {
                for &trial in trials {
                    out[(trial, v)] = T::of_f64((betas.trials[(trial, v)].as_f64() - mean) / std);
                }
            }
        }
    }
    Ok(BetaTensor {
        trials: out,
        session_of_trial: betas.session_of_trial.clone(),
        condition_of_trial: betas.condition_of_trial.clone(),
        voxel_coords: betas.voxel_coords.clone(),
    })
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct AverageReport {
    pub conditions_kept: usize,
    pub conditions_dropped: usize,
}

/// Averages each condition's trials into one response row. Conditions seen a
/// number of times other than `required_reps` are dropped and counted, not
/// errors: incomplete repetition schedules are expected in real sessions.
/// Condition order is first-appearance order of the retained conditions.
pub fn average_repetitions<T: Float>(
    betas: &BetaTensor<T>,
    required_reps: usize,
) -> Result<(ConditionResponses<T>, AverageReport)> {
    if required_reps == 0 {
        return Err(Error::validation("required_reps must be >= 1"));
    }
    betas.validate()?;
    let p = betas.n_voxels();

    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, Vec<usize>> = HashMap::new();
    for (trial, cond) in betas.condition_of_trial.iter().enumerate() {
        let entry = groups.entry(cond.as_str()).or_default();
        if entry.is_empty() {
            order.push(cond.as_str());
        }
        entry.push(trial);
    }

    let mut conditions = Vec::new();
    let mut repetitions_used = Vec::new();
    let mut rows: Vec<f64> = Vec::new();
    let mut dropped = 0usize;
    for cond in order {
        let trials = &groups[cond];
        if trials.len() != required_reps {
            dropped += 1;
            continue;
        }
        conditions.push(cond.to_string());
        repetitions_used.push(trials.len());
        for v in 0..p {
            let mut acc = 0.0f64;
            for &trial in trials {
                acc += betas.trials[(trial, v)].as_f64();
            }
            rows.push(acc / trials.len() as f64);
        }
    }

    let n = conditions.len();
    let responses = Array2::from_shape_vec((n, p), rows)
        .expect("row-major construction")
        .mapv(T::of_f64);
    let report = AverageReport {
        conditions_kept: n,
        conditions_dropped: dropped,
    };
    Ok((
        ConditionResponses {
            conditions,
            responses,
            repetitions_used,
            voxel_coords: betas.voxel_coords.clone(),
        },
        report,
    ))
}

/// Mean of k caption embeddings, no renormalization.
pub fn mean_caption_embedding<T: Float>(caption_embeddings: ArrayView2<'_, T>) -> Result<Vec<T>> {
    let (k, d) = caption_embeddings.dim();
    if k == 0 {
        return Err(Error::validation("mean_caption_embedding needs >= 1 row"));
    }
    let mut mean = vec![0.0f64; d];
    for row in caption_embeddings.rows() {
        for (m, v) in mean.iter_mut().zip(row.iter()) {
            *m += v.as_f64();
        }
    }
    Ok(mean.into_iter().map(|m| T::of_f64(m / k as f64)).collect())
}

/// Multi-hot category matrix over an ordered vocabulary. An image with no
/// categories becomes an all-zero row and is flagged.
pub fn build_multihot<T: Float>(
    annotations: &[BTreeSet<String>],
    vocabulary: &[String],
    ctx: &Context,
) -> Result<EmbeddingMatrix<T>> {
    let slot: HashMap<&str, usize> = vocabulary
        .iter()
        .enumerate()
        .map(|(i, v)| (v.as_str(), i))
        .collect();
    if slot.len() != vocabulary.len() {
        return Err(Error::validation("vocabulary contains duplicate ids"));
    }
    let mut values = Array2::zeros((annotations.len(), vocabulary.len()));
    for (i, cats) in annotations.iter().enumerate() {
        if cats.is_empty() {
            ctx.flag(Degeneracy::EmptyCategorySet);
            continue;
        }
        for cat in cats {
            let Some(&j) = slot.get(cat.as_str()) else {
                return Err(Error::validation(format!(
                    "category id '{cat}' not in vocabulary"
                )));
            };
            values[(i, j)] = T::one();
        }
    }
    let ids = (0..annotations.len()).map(|i| i.to_string()).collect();
    EmbeddingMatrix::new(values, ids, EmbeddingKind::Multihot)
}
