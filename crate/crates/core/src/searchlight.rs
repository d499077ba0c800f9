//! Volumetric searchlight machinery: sphere indexing, split-sampled
//! brain-vs-model RDM correlation volumes, t statistics, group maps,
//! and map contrasts.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::context::{Context, Degeneracy};
use crate::dataset::ConditionResponses;
use crate::error::{Error, Result};
use crate::rdm::{pairwise_utv, pearson64, Metric, Rdm};
use crate::scalar::Float;

/// 3-D scalar grid with an analysis-inclusion mask. Values are finite
/// wherever the mask is true and NaN elsewhere. Linear layout is x-fastest:
/// `index = x + nx*(y + ny*z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T: Float> {
    pub dims: [usize; 3],
    pub mask: Vec<bool>,
    pub values: Vec<T>,
}

impl<T: Float> Volume<T> {
    /// All-masked-out volume filled with the NaN sentinel.
    pub fn empty(dims: [usize; 3]) -> Self {
        let len = dims[0] * dims[1] * dims[2];
        Volume {
            dims,
            mask: vec![false; len],
            values: vec![T::nan(); len],
        }
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn linear(&self, coord: [i32; 3]) -> Option<usize> {
        let [nx, ny, nz] = self.dims;
        let (x, y, z) = (coord[0], coord[1], coord[2]);
        if x < 0 || y < 0 || z < 0 {
            return None;
        }
        let (x, y, z) = (x as usize, y as usize, z as usize);
        (x < nx && y < ny && z < nz).then_some(x + nx * (y + ny * z))
    }

    pub fn set(&mut self, coord: [i32; 3], value: T) -> Result<()> {
        let idx = self
            .linear(coord)
            .ok_or_else(|| Error::validation(format!("coordinate {coord:?} outside {:?}", self.dims)))?;
        self.mask[idx] = true;
        self.values[idx] = value;
        Ok(())
    }

    pub fn get(&self, coord: [i32; 3]) -> Option<T> {
        self.linear(coord)
            .filter(|&i| self.mask[i])
            .map(|i| self.values[i])
    }

    pub fn n_masked(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// In-mask argmax coordinate, ties to the lowest linear index.
    pub fn argmax(&self) -> Option<[i32; 3]> {
        let [nx, ny, _] = self.dims;
        let mut best: Option<(usize, T)> = None;
        for (i, (&m, &v)) in self.mask.iter().zip(&self.values).enumerate() {
            if m && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((i, v));
            }
        }
        best.map(|(i, _)| {
            let x = i % nx;
            let y = (i / nx) % ny;
            let z = i / (nx * ny);
            [x as i32, y as i32, z as i32]
        })
    }

    fn same_grid(&self, other: &Self, what: &'static str) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::validation(format!(
                "{what}: grid mismatch {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        if self.mask != other.mask {
            return Err(Error::validation(format!("{what}: mask mismatch")));
        }
        Ok(())
    }
}

/// Sphere neighborhoods over the in-mask voxels. `centers` lists every
/// in-mask voxel in x-fastest scan order; `neighbors[i]` are indices into
/// `centers` (the center itself included).
#[derive(Debug, Clone)]
pub struct SearchlightIndex {
    pub dims: [usize; 3],
    pub radius: f64,
    pub centers: Vec<[i32; 3]>,
    pub neighbors: Vec<Vec<u32>>,
}

/// Inclusion mask with `true` at each listed coordinate.
pub fn mask_from_coords(dims: [usize; 3], coords: &[[i32; 3]]) -> Result<Vec<bool>> {
    let len = dims[0] * dims[1] * dims[2];
    let mut mask = vec![false; len];
    for c in coords {
        if c[0] < 0 || c[1] < 0 || c[2] < 0 {
            return Err(Error::validation(format!("negative voxel coordinate {c:?}")));
        }
        let (x, y, z) = (c[0] as usize, c[1] as usize, c[2] as usize);
        if x >= dims[0] || y >= dims[1] || z >= dims[2] {
            return Err(Error::validation(format!(
                "voxel coordinate {c:?} outside grid {dims:?}"
            )));
        }
        mask[x + dims[0] * (y + dims[1] * z)] = true;
    }
    Ok(mask)
}

/// Builds the searchlight index: for every in-mask voxel c, all in-mask
/// voxels u with ‖u−c‖₂ ≤ radius. Spheres are clipped at the mask and
/// volume borders, never padded.
pub fn build_sphere_index(dims: [usize; 3], mask: &[bool], radius: f64) -> Result<SearchlightIndex> {
    let len = dims[0] * dims[1] * dims[2];
    if mask.len() != len {
        return Err(Error::DimensionMismatch {
            context: "mask vs dims",
            left: mask.len(),
            right: len,
        });
    }
    if radius < 0.0 || !radius.is_finite() {
        return Err(Error::validation("radius must be finite and >= 0"));
    }

    let mut centers = Vec::new();
    let mut slot = vec![u32::MAX; len];
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let li = x + dims[0] * (y + dims[1] * z);
                if mask[li] {
                    slot[li] = centers.len() as u32;
                    centers.push([x as i32, y as i32, z as i32]);
                }
            }
        }
    }
    if centers.is_empty() {
        return Err(Error::validation("mask has no true voxels"));
    }

    let r = radius.floor() as i32;
    let r2 = radius * radius;
    let neighbors: Vec<Vec<u32>> = centers
        .par_iter()
        .map(|&[cx, cy, cz]| {
            let mut list = Vec::new();
            for dz in -r..=r {
                let z = cz + dz;
                if z < 0 || z as usize >= dims[2] {
                    continue;
                }
                for dy in -r..=r {
                    let y = cy + dy;
                    if y < 0 || y as usize >= dims[1] {
                        continue;
                    }
                    for dx in -r..=r {
                        let x = cx + dx;
                        if x < 0 || x as usize >= dims[0] {
                            continue;
                        }
                        if (dx * dx + dy * dy + dz * dz) as f64 > r2 {
                            continue;
                        }
                        let li = x as usize + dims[0] * (y as usize + dims[1] * z as usize);
                        if mask[li] {
                            list.push(slot[li]);
                        }
                    }
                }
            }
            list
        })
        .collect();

    Ok(SearchlightIndex {
        dims,
        radius,
        centers,
        neighbors,
    })
}

/// Disjoint fixed-size condition splits drawn from a seeded permutation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub split_size: usize,
    pub splits: Vec<Vec<usize>>,
    pub unused: Vec<usize>,
}

pub fn make_split_plan(n_conditions: usize, split_size: usize, seed: u64) -> Result<SplitPlan> {
    if split_size == 0 {
        return Err(Error::validation("split_size must be >= 1"));
    }
    if split_size > n_conditions {
        return Err(Error::validation(format!(
            "split_size {split_size} exceeds condition count {n_conditions}"
        )));
    }
    let mut order: Vec<usize> = (0..n_conditions).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let n_splits = n_conditions / split_size;
    let splits = (0..n_splits)
        .map(|s| order[s * split_size..(s + 1) * split_size].to_vec())
        .collect();
    let unused = order[n_splits * split_size..].to_vec();
    Ok(SplitPlan {
        seed,
        split_size,
        splits,
        unused,
    })
}

/// Cosine-distance dissimilarities of the selected condition patterns over
/// one sphere, row-major upper triangle in the order of `cond_rows`.
pub(crate) fn sphere_utv(
    responses: &Array2<f64>,
    sphere_cols: &[u32],
    cond_rows: &[usize],
    ctx: &Context,
) -> Vec<f64> {
    let k = cond_rows.len();
    let s = sphere_cols.len();
    let mut patterns = Array2::<f64>::zeros((k, s));
    for (a, &row) in cond_rows.iter().enumerate() {
        for (b, &col) in sphere_cols.iter().enumerate() {
            patterns[(a, b)] = responses[(row, col as usize)];
        }
    }
    pairwise_utv(patterns.view(), Metric::Cosine, ctx)
}

fn model_indices<T: Float>(
    responses: &ConditionResponses<T>,
    model_rdm: &Rdm<T>,
) -> Result<Vec<usize>> {
    let model_index: std::collections::HashMap<&str, usize> = model_rdm
        .condition_ids()
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    responses
        .conditions
        .iter()
        .map(|id| {
            model_index.get(id.as_str()).copied().ok_or_else(|| {
                Error::validation(format!("condition '{id}' missing from model RDM"))
            })
        })
        .collect()
}

/// One Pearson-correlation volume per split: at each center, the cosine
/// brain RDM of the sphere patterns against the model sub-RDM over the same
/// conditions.
pub fn searchlight_correlation<T: Float>(
    responses: &ConditionResponses<T>,
    model_rdm: &Rdm<T>,
    index: &SearchlightIndex,
    plan: &SplitPlan,
    ctx: &Context,
) -> Result<Vec<Volume<T>>> {
    let n = responses.n_conditions();
    if plan.splits.iter().flatten().any(|&c| c >= n) {
        return Err(Error::validation(
            "split plan references conditions beyond the response set",
        ));
    }
    let to_model = model_indices(responses, model_rdm)?;

    // column lookup: index centers -> response columns
    let col_of: std::collections::HashMap<[i32; 3], u32> = responses
        .voxel_coords
        .iter()
        .enumerate()
        .map(|(i, &c)| (c, i as u32))
        .collect();
    let center_col: Vec<u32> = index
        .centers
        .iter()
        .map(|c| {
            col_of.get(c).copied().ok_or_else(|| {
                Error::validation(format!("index voxel {c:?} has no response column"))
            })
        })
        .collect::<Result<_>>()?;

    let resp64 = responses.responses.mapv(|v| v.as_f64());

    let mut out = Vec::with_capacity(plan.splits.len());
    for split in &plan.splits {
        let model_utv: Vec<f64> = {
            let rows: Vec<usize> = split.iter().map(|&c| to_model[c]).collect();
            model_rdm
                .utv_subset(&rows)
                .into_iter()
                .map(|v| v.as_f64())
                .collect()
        };

        let values: Vec<T> = index
            .neighbors
            .par_iter()
            .map(|sphere| {
                let cols: Vec<u32> = sphere.iter().map(|&s| center_col[s as usize]).collect();
                let brain_utv = sphere_utv(&resp64, &cols, split, ctx);
                match pearson64(&brain_utv, &model_utv) {
                    Some(r) => T::of_f64(r),
                    None => {
                        ctx.flag(Degeneracy::DegenerateUtv);
                        T::zero()
                    }
                }
            })
            .collect();

        let mut vol = Volume::empty(index.dims);
        for (center, v) in index.centers.iter().zip(values) {
            vol.set(*center, v)?;
        }
        out.push(vol);
    }
    Ok(out)
}

/// Voxel-wise mean across same-grid volumes.
pub fn mean_volume<T: Float>(volumes: &[Volume<T>]) -> Result<Volume<T>> {
    let first = volumes
        .first()
        .ok_or_else(|| Error::validation("mean_volume of zero volumes"))?;
    for v in &volumes[1..] {
        first.same_grid(v, "mean_volume")?;
    }
    let mut out = Volume::empty(first.dims);
    out.mask.copy_from_slice(&first.mask);
    for i in 0..out.mask.len() {
        if out.mask[i] {
            let m = volumes.iter().map(|v| v.values[i].as_f64()).sum::<f64>()
                / volumes.len() as f64;
            out.values[i] = T::of_f64(m);
        }
    }
    Ok(out)
}

/// Voxel-wise one-sample t of the per-split values against 0.
/// Returns the t volume and its degrees of freedom (k − 1).
pub fn tstat_volume<T: Float>(per_split: &[Volume<T>], ctx: &Context) -> Result<(Volume<T>, usize)> {
    if per_split.len() < 3 {
        return Err(Error::validation(format!(
            "t statistic needs >= 3 splits, got {}",
            per_split.len()
        )));
    }
    let first = &per_split[0];
    for v in &per_split[1..] {
        first.same_grid(v, "tstat_volume")?;
    }
    let k = per_split.len() as f64;
    let mut out = Volume::empty(first.dims);
    out.mask.copy_from_slice(&first.mask);
    for i in 0..out.mask.len() {
        if !out.mask[i] {
            continue;
        }
        let mean = per_split.iter().map(|v| v.values[i].as_f64()).sum::<f64>() / k;
        let var = per_split
            .iter()
            .map(|v| {
                let d = v.values[i].as_f64() - mean;
                d * d
            })
            .sum::<f64>()
            / (k - 1.0);
        let std = var.sqrt();
        out.values[i] = if std == 0.0 {
            if mean == 0.0 {
                T::zero()
            } else {
                ctx.flag(Degeneracy::ZeroVariance);
                if mean > 0.0 {
                    T::infinity()
                } else {
                    T::neg_infinity()
                }
            }
        } else {
            T::of_f64(mean / (std / k.sqrt()))
        };
    }
    Ok((out, per_split.len() - 1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Correction {
    Bonferroni,
    None,
}

impl std::fmt::Display for Correction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Correction::Bonferroni => write!(f, "bonferroni"),
            Correction::None => write!(f, "none"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GroupStats<T: Float> {
    pub mean: Volume<T>,
    pub t: Volume<T>,
    /// 1.0 where the one-sided corrected test passes, 0.0 elsewhere.
    pub threshold_mask: Volume<T>,
    pub dof: usize,
    pub alpha: f64,
    pub corrected_alpha: f64,
    pub t_critical: f64,
    pub correction: Correction,
}

/// Voxel-wise one-sample t across subjects with a one-sided threshold at
/// `alpha`, corrected over the in-mask voxel count.
pub fn group_stats<T: Float>(
    per_subject: &[Volume<T>],
    alpha: f64,
    correction: Correction,
    ctx: &Context,
) -> Result<GroupStats<T>> {
    if per_subject.len() < 2 {
        return Err(Error::validation(format!(
            "group statistics need >= 2 subjects, got {}",
            per_subject.len()
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::validation("alpha must be in (0, 1)"));
    }
    let first = &per_subject[0];
    for v in &per_subject[1..] {
        first.same_grid(v, "group_stats")?;
    }

    let mean = mean_volume(per_subject)?;
    let k = per_subject.len() as f64;
    let dof = per_subject.len() - 1;
    let n_mask = first.n_masked();
    let corrected_alpha = match correction {
        Correction::Bonferroni => alpha / n_mask as f64,
        Correction::None => alpha,
    };
    let dist = StudentsT::new(0.0, 1.0, dof as f64)
        .map_err(|e| Error::validation(format!("t distribution: {e}")))?;
    let t_critical = dist.inverse_cdf(1.0 - corrected_alpha);

    let mut t = Volume::empty(first.dims);
    t.mask.copy_from_slice(&first.mask);
    let mut threshold = Volume::empty(first.dims);
    threshold.mask.copy_from_slice(&first.mask);
    for i in 0..t.mask.len() {
        if !t.mask[i] {
            continue;
        }
        let m = mean.values[i].as_f64();
        let var = per_subject
            .iter()
            .map(|v| {
                let d = v.values[i].as_f64() - m;
                d * d
            })
            .sum::<f64>()
            / (k - 1.0);
        let std = var.sqrt();
        let tv = if std == 0.0 {
            if m == 0.0 {
                0.0
            } else {
                ctx.flag(Degeneracy::ZeroVariance);
                if m > 0.0 {
                    f64::INFINITY
                } else {
                    f64::NEG_INFINITY
                }
            }
        } else {
            m / (std / k.sqrt())
        };
        t.values[i] = T::of_f64(tv);
        threshold.values[i] = if tv > t_critical { T::one() } else { T::zero() };
    }

    Ok(GroupStats {
        mean,
        t,
        threshold_mask: threshold,
        dof,
        alpha,
        corrected_alpha,
        t_critical,
        correction,
    })
}

/// Voxel-wise a − b over the shared mask.
pub fn contrast_maps<T: Float>(a: &Volume<T>, b: &Volume<T>) -> Result<Volume<T>> {
    a.same_grid(b, "contrast_maps")?;
    let mut out = Volume::empty(a.dims);
    out.mask.copy_from_slice(&a.mask);
    for i in 0..out.mask.len() {
        if out.mask[i] {
            out.values[i] = T::of_f64(a.values[i].as_f64() - b.values[i].as_f64());
        }
    }
    Ok(out)
}
