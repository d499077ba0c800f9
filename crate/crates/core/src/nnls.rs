//! Non-negative least squares (Lawson–Hanson active set) and the
//! cross-validated reweighting of predictor RDMs against brain RDMs.

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use crate::context::{Context, Degeneracy};
use crate::dataset::ConditionResponses;
use crate::error::{Error, Result};
use crate::rdm::{pearson64, Rdm};
use crate::scalar::Float;
use crate::searchlight::{contrast_maps, sphere_utv, SearchlightIndex, SplitPlan, Volume};

/// Dual-feasibility tolerance for entering variables, relative to ‖Aᵀb‖∞.
const ENTER_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct NnlsSolution<T: Float> {
    pub weights: Vec<T>,
    pub residual_norm: f64,
    pub iterations: usize,
}

/// Minimizes ‖A·x − b‖₂ subject to x ≥ 0.
pub fn nnls_solve<T: Float>(a: ArrayView2<'_, T>, b: &[T]) -> Result<NnlsSolution<T>> {
    let (m, q) = a.dim();
    if m == 0 || q == 0 {
        return Err(Error::validation("nnls needs a non-empty design"));
    }
    if b.len() != m {
        return Err(Error::DimensionMismatch {
            context: "nnls design rows vs response",
            left: m,
            right: b.len(),
        });
    }
    if !a.iter().all(|v| v.is_finite()) || !b.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("nnls inputs".into()));
    }

    // normal-equation form: everything past this point is O(q²) per step
    let mut gram = vec![0.0f64; q * q];
    let mut atb = vec![0.0f64; q];
    for i in 0..m {
        let bi = b[i].as_f64();
        for j in 0..q {
            let aij = a[(i, j)].as_f64();
            atb[j] += aij * bi;
            for k in j..q {
                gram[j * q + k] += aij * a[(i, k)].as_f64();
            }
        }
    }
    for j in 0..q {
        for k in 0..j {
            gram[j * q + k] = gram[k * q + j];
        }
    }
    let (x, iterations) = nnls_gram(&gram, &atb, q)?;
    let mut res2 = 0.0f64;
    for i in 0..m {
        let mut ri = -b[i].as_f64();
        for j in 0..q {
            ri += a[(i, j)].as_f64() * x[j];
        }
        res2 += ri * ri;
    }
    Ok(NnlsSolution {
        weights: x.into_iter().map(T::of_f64).collect(),
        residual_norm: res2.sqrt(),
        iterations,
    })
}

/// Lawson–Hanson on precomputed normal equations. Ties in the entering and
/// leaving rules break toward the smallest index (anti-cycling).
fn nnls_gram(gram: &[f64], atb: &[f64], q: usize) -> Result<(Vec<f64>, usize)> {
    let scale = atb.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut x = vec![0.0f64; q];
    if scale == 0.0 {
        return Ok((x, 0));
    }
    let tol = ENTER_TOL * scale;
    let mut passive = vec![false; q];
    let max_outer = 3 * q;

    for outer in 0..=max_outer {
        // dual vector w = Aᵀb − Gx
        let mut w = vec![0.0f64; q];
        let mut best: Option<usize> = None;
        for j in 0..q {
            if passive[j] {
                continue;
            }
            let mut wj = atb[j];
            for k in 0..q {
                wj -= gram[j * q + k] * x[k];
            }
            w[j] = wj;
            if wj > tol && best.map_or(true, |b| wj > w[b]) {
                best = Some(j);
            }
        }
        let Some(enter) = best else {
            return Ok((x, outer));
        };
        if outer == max_outer {
            let mut res2 = 0.0;
            for j in 0..q {
                res2 += w[j] * w[j];
            }
            return Err(Error::Convergence {
                what: "nnls active set",
                iterations: max_outer,
                residual: res2.sqrt(),
            });
        }
        passive[enter] = true;

        // inner loop: keep the passive-set LS solution feasible
        loop {
            let z = solve_passive(gram, atb, &passive, q)?;
            let feasible = passive
                .iter()
                .enumerate()
                .all(|(j, &p)| !p || z[j] > 0.0);
            if feasible {
                for j in 0..q {
                    x[j] = if passive[j] { z[j] } else { 0.0 };
                }
                break;
            }
            // step toward z until the first passive variable hits zero
            let mut alpha = f64::INFINITY;
            let mut drop_j = usize::MAX;
            for j in 0..q {
                if passive[j] && z[j] <= 0.0 {
                    let t = x[j] / (x[j] - z[j]);
                    if t < alpha {
                        alpha = t;
                        drop_j = j;
                    }
                }
            }
            for j in 0..q {
                if passive[j] {
                    x[j] += alpha * (z[j] - x[j]);
                }
            }
            x[drop_j] = 0.0;
            passive[drop_j] = false;
            for j in 0..q {
                if passive[j] && x[j] <= 0.0 {
                    x[j] = 0.0;
                    passive[j] = false;
                }
            }
        }
    }
    unreachable!("loop returns or errors at the iteration cap")
}

/// Solves the unconstrained normal equations restricted to the passive set
/// (Gaussian elimination, partial pivoting).
fn solve_passive(gram: &[f64], atb: &[f64], passive: &[bool], q: usize) -> Result<Vec<f64>> {
    let idx: Vec<usize> = (0..q).filter(|&j| passive[j]).collect();
    let k = idx.len();
    let mut m = vec![0.0f64; k * (k + 1)];
    for (r, &jr) in idx.iter().enumerate() {
        for (c, &jc) in idx.iter().enumerate() {
            m[r * (k + 1) + c] = gram[jr * q + jc];
        }
        m[r * (k + 1) + k] = atb[jr];
    }
    for col in 0..k {
        let mut piv = col;
        for r in (col + 1)..k {
            if m[r * (k + 1) + col].abs() > m[piv * (k + 1) + col].abs() {
                piv = r;
            }
        }
        if m[piv * (k + 1) + col].abs() < 1e-300 {
            return Err(Error::validation(
                "singular passive-set system in nnls (collinear design columns)",
            ));
        }
        if piv != col {
            for c in 0..=k {
                m.swap(col * (k + 1) + c, piv * (k + 1) + c);
            }
        }
        let d = m[col * (k + 1) + col];
        for r in (col + 1)..k {
            let f = m[r * (k + 1) + col] / d;
            if f != 0.0 {
                for c in col..=k {
                    m[r * (k + 1) + c] -= f * m[col * (k + 1) + c];
                }
            }
        }
    }
    let mut z_sub = vec![0.0f64; k];
    for r in (0..k).rev() {
        let mut acc = m[r * (k + 1) + k];
        for c in (r + 1)..k {
            acc -= m[r * (k + 1) + c] * z_sub[c];
        }
        z_sub[r] = acc / m[r * (k + 1) + r];
    }
    let mut z = vec![0.0f64; q];
    for (r, &j) in idx.iter().enumerate() {
        z[j] = z_sub[r];
    }
    Ok(z)
}

/// Karush–Kuhn–Tucker check: gradient ≈ 0 on positive weights, ≥ 0 on zero
/// weights, at tolerance `tol` × ‖Aᵀb‖∞.
pub fn kkt_satisfied<T: Float>(a: ArrayView2<'_, T>, b: &[T], x: &[T], tol: f64) -> bool {
    let (m, q) = a.dim();
    let mut scale = 0.0f64;
    let mut grad = vec![0.0f64; q];
    // grad = Aᵀ(Ax − b)
    for i in 0..m {
        let mut ri = -b[i].as_f64();
        for j in 0..q {
            ri += a[(i, j)].as_f64() * x[j].as_f64();
        }
        for j in 0..q {
            grad[j] += a[(i, j)].as_f64() * ri;
        }
    }
    for i in 0..m {
        for j in 0..q {
            scale = scale.max((a[(i, j)].as_f64() * b[i].as_f64()).abs());
        }
    }
    let eps = tol * scale.max(1.0);
    x.iter().zip(&grad).all(|(xi, g)| {
        if xi.as_f64() > 0.0 {
            g.abs() <= eps
        } else {
            *g >= -eps
        }
    })
}

/// Per-split NNLS reweighting of predictor RDMs against one brain RDM.
#[derive(Debug, Clone)]
pub struct RdmReweightFit<T: Float> {
    /// Per split: one non-negative weight per predictor.
    pub weights: Vec<Vec<f64>>,
    /// Per split: Pearson between predicted and brain test dissimilarities.
    pub test_pearson: Vec<T>,
}

impl<T: Float> RdmReweightFit<T> {
    pub fn mean_weights(&self) -> Vec<f64> {
        let q = self.weights.first().map_or(0, |w| w.len());
        let mut out = vec![0.0; q];
        for w in &self.weights {
            for (o, v) in out.iter_mut().zip(w) {
                *o += v;
            }
        }
        out.iter_mut()
            .for_each(|v| *v /= self.weights.len() as f64);
        out
    }

    pub fn mean_pearson(&self) -> f64 {
        self.test_pearson.iter().map(|v| v.as_f64()).sum::<f64>() / self.test_pearson.len() as f64
    }
}

fn map_conditions<T: Float>(ids: &[String], rdm: &Rdm<T>, what: &str) -> Result<Vec<usize>> {
    let index: std::collections::HashMap<&str, usize> = rdm
        .condition_ids()
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    ids.iter()
        .map(|id| {
            index
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::validation(format!("condition '{id}' missing from {what}")))
        })
        .collect()
}

/// Fits non-negative predictor weights on the first `train_count` conditions
/// of each split and scores the remainder. Train and test dissimilarities
/// never mix: only within-set pairs enter either side.
pub fn reweight_rdms<T: Float>(
    predictors: &[Rdm<T>],
    brain: &Rdm<T>,
    plan: &SplitPlan,
    train_count: usize,
    ctx: &Context,
) -> Result<RdmReweightFit<T>> {
    if predictors.is_empty() {
        return Err(Error::validation("no predictor RDMs supplied"));
    }
    if train_count == 0 || train_count >= plan.split_size {
        return Err(Error::validation(format!(
            "train count {train_count} must be in 1..{}",
            plan.split_size
        )));
    }
    let n = brain.n();
    if plan.splits.iter().flatten().any(|&c| c >= n) {
        return Err(Error::validation(
            "split plan references conditions beyond the brain RDM",
        ));
    }
    let maps: Vec<Vec<usize>> = predictors
        .iter()
        .map(|p| map_conditions(brain.condition_ids(), p, "predictor RDM"))
        .collect::<Result<_>>()?;

    let q = predictors.len();
    let mut weights = Vec::with_capacity(plan.splits.len());
    let mut test_pearson = Vec::with_capacity(plan.splits.len());
    for split in &plan.splits {
        let train = &split[..train_count];
        let test = &split[train_count..];

        let design_cols: Vec<Vec<f64>> = predictors
            .iter()
            .zip(&maps)
            .map(|(p, map)| {
                let rows: Vec<usize> = train.iter().map(|&c| map[c]).collect();
                p.utv_subset(&rows).iter().map(|v| v.as_f64()).collect()
            })
            .collect();
        let m = design_cols[0].len();
        let mut design = Array2::<f64>::zeros((m, q));
        for (j, col) in design_cols.iter().enumerate() {
            for (i, &v) in col.iter().enumerate() {
                design[(i, j)] = v;
            }
        }
        let target: Vec<f64> = brain.utv_subset(train).iter().map(|v| v.as_f64()).collect();
        let sol = nnls_solve(design.view(), &target)?;
        let w: Vec<f64> = sol.weights.iter().map(|v| v.as_f64()).collect();

        let predicted: Vec<f64> = {
            let cols: Vec<Vec<f64>> = predictors
                .iter()
                .zip(&maps)
                .map(|(p, map)| {
                    let rows: Vec<usize> = test.iter().map(|&c| map[c]).collect();
                    p.utv_subset(&rows).iter().map(|v| v.as_f64()).collect()
                })
                .collect();
            (0..cols[0].len())
                .map(|i| cols.iter().zip(&w).map(|(c, wj)| c[i] * wj).sum())
                .collect()
        };
        let brain_test: Vec<f64> = brain.utv_subset(test).iter().map(|v| v.as_f64()).collect();
        let r = match pearson64(&predicted, &brain_test) {
            Some(r) => r,
            None => {
                ctx.flag(Degeneracy::DegenerateUtv);
                0.0
            }
        };
        weights.push(w);
        test_pearson.push(T::of_f64(r));
    }
    Ok(RdmReweightFit {
        weights,
        test_pearson,
    })
}

/// Searchlight NNLS reweighting result.
#[derive(Debug, Clone)]
pub struct CvFitResult<T: Float> {
    pub per_split: Vec<Volume<T>>,
    pub mean: Volume<T>,
    /// Per center: weights averaged over splits, one row per center in
    /// index order.
    pub mean_weights: Array2<f64>,
}

/// At each searchlight center, fits non-negative weights mixing the
/// predictor RDMs to the sphere's brain RDM on each split's training
/// conditions, and scores the held-out conditions.
pub fn cv_rdm_reweight<T: Float>(
    predictors: &[Rdm<T>],
    responses: &ConditionResponses<T>,
    index: &SearchlightIndex,
    plan: &SplitPlan,
    train_count: usize,
    ctx: &Context,
) -> Result<CvFitResult<T>> {
    if predictors.is_empty() {
        return Err(Error::validation("no predictor RDMs supplied"));
    }
    if train_count == 0 || train_count >= plan.split_size {
        return Err(Error::validation(format!(
            "train count {train_count} must be in 1..{}",
            plan.split_size
        )));
    }
    let n = responses.n_conditions();
    if plan.splits.iter().flatten().any(|&c| c >= n) {
        return Err(Error::validation(
            "split plan references conditions beyond the response set",
        ));
    }
    let maps: Vec<Vec<usize>> = predictors
        .iter()
        .map(|p| map_conditions(&responses.conditions, p, "predictor RDM"))
        .collect::<Result<_>>()?;

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
    let q = predictors.len();
    let n_centers = index.centers.len();

    let mut per_split = Vec::with_capacity(plan.splits.len());
    let mut weight_acc = Array2::<f64>::zeros((n_centers, q));
    for split in &plan.splits {
        let train = split[..train_count].to_vec();
        let test = split[train_count..].to_vec();

        // predictor dissimilarities are shared by every center in this split
        let train_cols: Vec<Vec<f64>> = predictors
            .iter()
            .zip(&maps)
            .map(|(p, map)| {
                let rows: Vec<usize> = train.iter().map(|&c| map[c]).collect();
                p.utv_subset(&rows).iter().map(|v| v.as_f64()).collect()
            })
            .collect();
        let test_cols: Vec<Vec<f64>> = predictors
            .iter()
            .zip(&maps)
            .map(|(p, map)| {
                let rows: Vec<usize> = test.iter().map(|&c| map[c]).collect();
                p.utv_subset(&rows).iter().map(|v| v.as_f64()).collect()
            })
            .collect();
        let mut gram = vec![0.0f64; q * q];
        for j in 0..q {
            for k in j..q {
                let g = train_cols[j]
                    .iter()
                    .zip(&train_cols[k])
                    .fold(0.0, |acc, (a, b)| acc + a * b);
                gram[j * q + k] = g;
                gram[k * q + j] = g;
            }
        }

        let results: Vec<(f64, Vec<f64>)> = index
            .neighbors
            .par_iter()
            .map(|sphere| -> Result<(f64, Vec<f64>)> {
                let cols: Vec<u32> = sphere.iter().map(|&s| center_col[s as usize]).collect();
                let brain_train = sphere_utv(&resp64, &cols, &train, ctx);
                let mut atb = vec![0.0f64; q];
                for j in 0..q {
                    atb[j] = train_cols[j]
                        .iter()
                        .zip(&brain_train)
                        .fold(0.0, |acc, (a, b)| acc + a * b);
                }
                let (w, _) = nnls_gram(&gram, &atb, q)?;

                let brain_test = sphere_utv(&resp64, &cols, &test, ctx);
                let predicted: Vec<f64> = (0..brain_test.len())
                    .map(|i| test_cols.iter().zip(&w).map(|(c, wj)| c[i] * wj).sum())
                    .collect();
                let r = match pearson64(&predicted, &brain_test) {
                    Some(r) => r,
                    None => {
                        ctx.flag(Degeneracy::DegenerateUtv);
                        0.0
                    }
                };
                Ok((r, w))
            })
            .collect::<Result<_>>()?;

        let mut vol = Volume::empty(index.dims);
        for (slot, (center, (r, w))) in index.centers.iter().zip(&results).enumerate() {
            vol.set(*center, T::of_f64(*r))?;
            for j in 0..q {
                weight_acc[(slot, j)] += w[j];
            }
        }
        per_split.push(vol);
    }
    let n_splits = plan.splits.len() as f64;
    weight_acc.mapv_inplace(|v| v / n_splits);
    let mean = crate::searchlight::mean_volume(&per_split)?;
    Ok(CvFitResult {
        per_split,
        mean,
        mean_weights: weight_acc,
    })
}

/// All pairwise differences among named maps, in input order.
pub fn map_contrast_suite<T: Float>(
    maps: &[(String, Volume<T>)],
) -> Result<Vec<(String, Volume<T>)>> {
    let mut out = Vec::new();
    for i in 0..maps.len() {
        for j in (i + 1)..maps.len() {
            let name = format!("{}_minus_{}", maps[i].0, maps[j].0);
            out.push((name, contrast_maps(&maps[i].1, &maps[j].1)?));
        }
    }
    Ok(out)
}
