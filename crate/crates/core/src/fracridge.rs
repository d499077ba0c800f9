//! Fractional ridge regression: the ridge path is parameterized by the
//! ratio of regularized to unregularized coefficient norms instead of the
//! raw penalty. Used brain→embedding (decoding) and embedding→voxel
//! (encoding), with per-target-feature fraction selection.

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::context::{Context, Degeneracy};
use crate::dataset::{ConditionResponses, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::rdm::pearson64;
use crate::scalar::Float;
use crate::searchlight::Volume;

/// Achieved-over-requested norm fraction tolerance. The public contract is
/// ±0.01; the solver targets half of it.
pub const FRACTION_TOL: f64 = 0.01;
const REFINE_TOL: f64 = 0.005;
/// Singular values below `s_max * RANK_TOL` are treated as zero.
const RANK_TOL: f64 = 1e-10;
const ALPHA_GRID_LO: f64 = 1e-6;
const ALPHA_GRID_HI: f64 = 1e6;
const ALPHA_GRID_PER_DECADE: usize = 10;

/// The 20-step grid 0.05, 0.10, …, 1.00.
pub fn default_fraction_grid() -> Vec<f64> {
    (1..=20).map(|k| k as f64 / 20.0).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitMeta {
    pub n: usize,
    pub p: usize,
    pub d: usize,
    pub seed: Option<u64>,
}

/// Ridge solutions for every requested fraction, plus per-target selection
/// state. Weights live in centered coordinates; `predict` re-applies the
/// stored means.
#[derive(Debug, Clone)]
pub struct FracridgeModel<T: Float> {
    pub fractions: Vec<f64>,
    /// Per fraction: p×d coefficients.
    pub weights: Vec<Array2<T>>,
    /// Per fraction, per target: the penalty that realized the fraction.
    pub alphas: Vec<Vec<f64>>,
    /// Per fraction, per target: the achieved norm ratio.
    pub achieved_fraction: Vec<Vec<f64>>,
    /// Per target: selected fraction (after `select_fractions`).
    pub chosen_fraction: Option<Vec<f64>>,
    pub x_mean: Vec<f64>,
    pub y_mean: Vec<f64>,
    pub meta: FitMeta,
}

/// Disjoint train / test (hyperparameter) / validation condition-id sets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataSplit {
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub validation: Vec<String>,
}

impl DataSplit {
    pub fn new(train: Vec<String>, test: Vec<String>, validation: Vec<String>) -> Result<Self> {
        let split = Self {
            train,
            test,
            validation,
        };
        split.validate()?;
        Ok(split)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for id in self
            .train
            .iter()
            .chain(&self.test)
            .chain(&self.validation)
        {
            if !seen.insert(id.as_str()) {
                return Err(Error::validation(format!(
                    "condition '{id}' appears in more than one split"
                )));
            }
        }
        Ok(())
    }

    /// Holds out `validation_ids`, draws a seeded `test_size` sample from the
    /// remainder, and trains on the rest.
    pub fn sample(
        all_ids: &[String],
        validation_ids: &[String],
        test_size: usize,
        seed: u64,
    ) -> Result<Self> {
        let validation: std::collections::HashSet<&str> =
            validation_ids.iter().map(|s| s.as_str()).collect();
        for v in &validation {
            if !all_ids.iter().any(|id| id == v) {
                return Err(Error::validation(format!(
                    "validation id '{v}' not among the conditions"
                )));
            }
        }
        let mut pool: Vec<&String> = all_ids
            .iter()
            .filter(|id| !validation.contains(id.as_str()))
            .collect();
        if test_size >= pool.len() {
            return Err(Error::validation(format!(
                "test size {test_size} leaves no training items (pool {})",
                pool.len()
            )));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        pool.shuffle(&mut rng);
        let test = pool[..test_size].iter().map(|s| s.to_string()).collect();
        let train = pool[test_size..].iter().map(|s| s.to_string()).collect();
        DataSplit::new(train, test, validation_ids.to_vec())
    }
}

fn center_columns(m: ArrayView2<'_, f64>) -> (Array2<f64>, Vec<f64>) {
    let (n, p) = m.dim();
    let mut means = vec![0.0; p];
    for row in m.rows() {
        for (mean, v) in means.iter_mut().zip(row) {
            *mean += v;
        }
    }
    means.iter_mut().for_each(|m| *m /= n as f64);
    let mut out = m.to_owned();
    for mut row in out.rows_mut() {
        for (v, mean) in row.iter_mut().zip(&means) {
            *v -= mean;
        }
    }
    (out, means)
}

struct RotatedProblem {
    /// Right singular vectors, p×r.
    v: Array2<f64>,
    /// Retained singular values, length r.
    s: Vec<f64>,
    /// OLS solution in rotated coordinates, r×d: q = S⁻¹ Uᵀ Y.
    q: Array2<f64>,
    /// Per-target OLS coefficient norm (‖q_j‖; V is orthonormal).
    ols_norm: Vec<f64>,
}

fn rotate(xc: &Array2<f64>, yc: &Array2<f64>) -> Result<RotatedProblem> {
    let (n, p) = xc.dim();
    let d = yc.ncols();
    let mx = nalgebra::DMatrix::from_fn(n, p, |i, j| xc[(i, j)]);
    let svd = mx.svd(true, true);
    let u = svd.u.as_ref().expect("svd requested u");
    let vt = svd.v_t.as_ref().expect("svd requested v_t");
    let s_all = &svd.singular_values;
    let s_max = s_all.iter().cloned().fold(0.0f64, f64::max);
    if s_max == 0.0 {
        return Err(Error::validation("predictor matrix is all zeros"));
    }
    let keep: Vec<usize> = (0..s_all.len())
        .filter(|&i| s_all[i] > RANK_TOL * s_max)
        .collect();
    let r = keep.len();

    let mut v = Array2::zeros((p, r));
    let mut s = Vec::with_capacity(r);
    for (col, &i) in keep.iter().enumerate() {
        s.push(s_all[i]);
        for row in 0..p {
            v[(row, col)] = vt[(i, row)];
        }
    }
    // q = S⁻¹ Uᵀ Y, restricted to the retained components
    let mut q = Array2::zeros((r, d));
    for (qi, &i) in keep.iter().enumerate() {
        for j in 0..d {
            let mut acc = 0.0;
            for row in 0..n {
                acc += u[(row, i)] * yc[(row, j)];
            }
            q[(qi, j)] = acc / s_all[i];
        }
    }
    let ols_norm = (0..d)
        .map(|j| (0..r).map(|i| q[(i, j)] * q[(i, j)]).sum::<f64>().sqrt())
        .collect();
    Ok(RotatedProblem { v, s, q, ols_norm })
}

/// Norm ratio ‖b(α)‖/‖b_OLS‖ for one target, given its rotated coordinates.
fn norm_ratio(s: &[f64], q_col: &[f64], ols_norm: f64, alpha: f64) -> f64 {
    let mut acc = 0.0;
    for (si, qi) in s.iter().zip(q_col) {
        let shrink = si * si / (si * si + alpha);
        let v = shrink * qi;
        acc += v * v;
    }
    acc.sqrt() / ols_norm
}

/// Finds α with norm ratio = `fraction` ± tolerance: bracket on the log grid,
/// log-linear interpolation, then bisection to the internal tolerance.
fn solve_alpha(s: &[f64], q_col: &[f64], ols_norm: f64, fraction: f64, grid: &[f64]) -> f64 {
    if fraction >= 1.0 {
        return 0.0;
    }
    let ratio = |a: f64| norm_ratio(s, q_col, ols_norm, a);

    // locate the bracket [lo, hi] with ratio(lo) >= fraction >= ratio(hi)
    let mut lo = 0.0f64;
    let mut hi = *grid.last().unwrap();
    let mut found = false;
    let mut prev_alpha = 0.0;
    let mut prev_ratio = 1.0;
    for &a in grid {
        let r = ratio(a);
        if r <= fraction {
            lo = prev_alpha;
            hi = a;
            // log-linear interpolation for the starting point
            if prev_alpha > 0.0 && r < prev_ratio {
                let t = (prev_ratio - fraction) / (prev_ratio - r);
                let la = prev_alpha.ln() + t * (a.ln() - prev_alpha.ln());
                let cand = la.exp();
                if cand > lo && cand < hi {
                    let rc = ratio(cand);
                    if rc > fraction {
                        lo = cand;
                    } else {
                        hi = cand;
                    }
                }
            }
            found = true;
            break;
        }
        prev_alpha = a;
        prev_ratio = r;
    }
    if !found {
        // fraction below the ratio at the top of the grid; extend upward
        lo = hi;
        while ratio(hi) > fraction {
            hi *= 10.0;
        }
    }

    let mut best = hi;
    for _ in 0..200 {
        let mid = if lo == 0.0 { hi / 2.0 } else { (lo.ln() / 2.0 + hi.ln() / 2.0).exp() };
        let r = ratio(mid);
        best = mid;
        if (r - fraction).abs() <= REFINE_TOL {
            break;
        }
        if r > fraction {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    best
}

fn validate_fractions(fractions: &[f64]) -> Result<()> {
    if fractions.is_empty() {
        return Err(Error::validation("fraction grid is empty"));
    }
    let mut prev = 0.0;
    for &f in fractions {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::validation(format!("fraction {f} outside (0, 1]")));
        }
        if f <= prev {
            return Err(Error::validation("fractions must be strictly increasing"));
        }
        prev = f;
    }
    Ok(())
}

/// Fits ridge solutions whose coefficient norms are the requested fractions
/// of the OLS norm, one α per (fraction, target). X and Y columns are
/// centered with training means; the means are stored on the model.
pub fn fracridge_fit<T: Float>(
    x: ArrayView2<'_, T>,
    y: ArrayView2<'_, T>,
    fractions: &[f64],
) -> Result<FracridgeModel<T>> {
    let (n, p) = x.dim();
    let d = y.ncols();
    if n < 2 {
        return Err(Error::validation(format!("fit needs >= 2 rows, got {n}")));
    }
    if y.nrows() != n {
        return Err(Error::DimensionMismatch {
            context: "fracridge X rows vs Y rows",
            left: n,
            right: y.nrows(),
        });
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("fracridge predictors".into()));
    }
    if !y.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("fracridge targets".into()));
    }
    validate_fractions(fractions)?;

    let x64 = x.mapv(|v| v.as_f64());
    let y64 = y.mapv(|v| v.as_f64());
    let (xc, x_mean) = center_columns(x64.view());
    let (yc, y_mean) = center_columns(y64.view());
    let rot = rotate(&xc, &yc)?;
    let r = rot.s.len();

    let s_max = rot.s[0].max(rot.s.iter().cloned().fold(0.0, f64::max));
    let alpha_grid = log_grid(
        ALPHA_GRID_LO * s_max * s_max,
        ALPHA_GRID_HI * s_max * s_max,
        ALPHA_GRID_PER_DECADE,
    );

    let mut weights = Vec::with_capacity(fractions.len());
    let mut alphas = Vec::with_capacity(fractions.len());
    let mut achieved = Vec::with_capacity(fractions.len());
    for &f in fractions {
        let mut w = Array2::<f64>::zeros((p, d));
        let mut a_row = Vec::with_capacity(d);
        let mut g_row = Vec::with_capacity(d);
        for j in 0..d {
            let q_col: Vec<f64> = (0..r).map(|i| rot.q[(i, j)]).collect();
            if rot.ols_norm[j] == 0.0 {
                // target orthogonal to the predictor column space: every
                // ridge solution is zero and the ratio is undefined
                a_row.push(0.0);
                g_row.push(f);
                continue;
            }
            let alpha = solve_alpha(&rot.s, &q_col, rot.ols_norm[j], f, &alpha_grid);
            a_row.push(alpha);
            g_row.push(norm_ratio(&rot.s, &q_col, rot.ols_norm[j], alpha));
            for row in 0..p {
                let mut acc = 0.0;
                for i in 0..r {
                    let shrink = rot.s[i] * rot.s[i] / (rot.s[i] * rot.s[i] + alpha);
                    acc += rot.v[(row, i)] * shrink * q_col[i];
                }
                w[(row, j)] = acc;
            }
        }
        weights.push(w.mapv(T::of_f64));
        alphas.push(a_row);
        achieved.push(g_row);
    }

    Ok(FracridgeModel {
        fractions: fractions.to_vec(),
        weights,
        alphas,
        achieved_fraction: achieved,
        chosen_fraction: None,
        x_mean,
        y_mean,
        meta: FitMeta {
            n,
            p,
            d,
            seed: None,
        },
    })
}

fn log_grid(lo: f64, hi: f64, per_decade: usize) -> Vec<f64> {
    let decades = (hi / lo).log10();
    let steps = (decades * per_decade as f64).ceil() as usize;
    (0..=steps)
        .map(|k| lo * 10f64.powf(k as f64 / per_decade as f64))
        .map(|a| a.min(hi))
        .collect()
}

impl<T: Float> FracridgeModel<T> {
    pub fn n_fractions(&self) -> usize {
        self.fractions.len()
    }

    /// Prediction with one fraction's weights for every target.
    pub fn predict_with_fraction(
        &self,
        x: ArrayView2<'_, T>,
        fraction_idx: usize,
    ) -> Result<Array2<T>> {
        Ok(predict_fraction_f64(self, x, fraction_idx)?.mapv(T::of_f64))
    }
}

/// Per-target argmax of test-set Pearson across the fraction grid, ties to
/// the smaller fraction (stronger regularization).
pub fn select_fractions<T: Float>(
    model: &mut FracridgeModel<T>,
    x_test: ArrayView2<'_, T>,
    y_test: ArrayView2<'_, T>,
    ctx: &Context,
) -> Result<()> {
    if x_test.nrows() != y_test.nrows() {
        return Err(Error::DimensionMismatch {
            context: "test X rows vs Y rows",
            left: x_test.nrows(),
            right: y_test.nrows(),
        });
    }
    if y_test.ncols() != model.meta.d {
        return Err(Error::DimensionMismatch {
            context: "test Y columns vs model d",
            left: y_test.ncols(),
            right: model.meta.d,
        });
    }
    let d = model.meta.d;
    let preds: Vec<Array2<f64>> = (0..model.n_fractions())
        .map(|f| predict_fraction_f64(model, x_test, f))
        .collect::<Result<_>>()?;

    let mut chosen = Vec::with_capacity(d);
    for j in 0..d {
        let truth: Vec<f64> = y_test.column(j).iter().map(|v| v.as_f64()).collect();
        let constant = truth.iter().all(|&v| v == truth[0]);
        if constant {
            ctx.flag(Degeneracy::DegenerateTestColumn);
            chosen.push(1.0);
            continue;
        }
        let mut best_f = 1.0;
        let mut best_r = f64::NEG_INFINITY;
        for (fi, pred) in preds.iter().enumerate() {
            let col: Vec<f64> = (0..pred.nrows()).map(|i| pred[(i, j)]).collect();
            let r = pearson64(&col, &truth).unwrap_or(f64::NEG_INFINITY);
            if r > best_r {
                best_r = r;
                best_f = model.fractions[fi];
            }
        }
        if best_r == f64::NEG_INFINITY {
            ctx.flag(Degeneracy::DegenerateTestColumn);
            best_f = 1.0;
        }
        chosen.push(best_f);
    }
    model.chosen_fraction = Some(chosen);
    Ok(())
}

fn predict_fraction_f64<T: Float>(
    model: &FracridgeModel<T>,
    x: ArrayView2<'_, T>,
    fraction_idx: usize,
) -> Result<Array2<f64>> {
    if x.ncols() != model.meta.p {
        return Err(Error::DimensionMismatch {
            context: "prediction columns vs model p",
            left: x.ncols(),
            right: model.meta.p,
        });
    }
    let (v, p) = x.dim();
    let d = model.meta.d;
    let w = &model.weights[fraction_idx];
    let mut out = Array2::<f64>::zeros((v, d));
    for i in 0..v {
        for j in 0..d {
            let mut acc = model.y_mean[j];
            for k in 0..p {
                acc += (x[(i, k)].as_f64() - model.x_mean[k]) * w[(k, j)].as_f64();
            }
            out[(i, j)] = acc;
        }
    }
    Ok(out)
}

/// Prediction using each target's chosen fraction.
pub fn predict<T: Float>(model: &FracridgeModel<T>, x_new: ArrayView2<'_, T>) -> Result<Array2<T>> {
    let chosen = model
        .chosen_fraction
        .as_ref()
        .ok_or_else(|| Error::validation("predict before select_fractions"))?;
    if x_new.ncols() != model.meta.p {
        return Err(Error::DimensionMismatch {
            context: "prediction columns vs model p",
            left: x_new.ncols(),
            right: model.meta.p,
        });
    }
    // gather each target's chosen-fraction column into one p×d matrix
    let (v, p) = x_new.dim();
    let d = model.meta.d;
    let mut gathered = Array2::<f64>::zeros((p, d));
    for j in 0..d {
        let fi = model
            .fractions
            .iter()
            .position(|&f| f == chosen[j])
            .ok_or_else(|| Error::validation(format!("chosen fraction {} not in grid", chosen[j])))?;
        for k in 0..p {
            gathered[(k, j)] = model.weights[fi][(k, j)].as_f64();
        }
    }
    let mut out = Array2::<T>::zeros((v, d));
    for i in 0..v {
        for j in 0..d {
            let mut acc = model.y_mean[j];
            for k in 0..p {
                acc += (x_new[(i, k)].as_f64() - model.x_mean[k]) * gathered[(k, j)];
            }
            out[(i, j)] = T::of_f64(acc);
        }
    }
    Ok(out)
}

/// Per-item decoding quality: correlation with the matching true row minus
/// the mean correlation with all other true rows.
pub fn prediction_accuracy_gain<T: Float>(
    y_hat: ArrayView2<'_, T>,
    y_true: ArrayView2<'_, T>,
    ctx: &Context,
) -> Result<Vec<T>> {
    let (v, d) = y_hat.dim();
    if y_true.dim() != (v, d) {
        return Err(Error::DimensionMismatch {
            context: "gain y_hat vs y_true",
            left: v,
            right: y_true.nrows(),
        });
    }
    if v < 2 {
        return Err(Error::validation("gain needs >= 2 items"));
    }
    let hat: Vec<Vec<f64>> = y_hat
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|x| x.as_f64()).collect())
        .collect();
    let tru: Vec<Vec<f64>> = y_true
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|x| x.as_f64()).collect())
        .collect();

    let mut gains = Vec::with_capacity(v);
    for i in 0..v {
        let mut diag = 0.0;
        let mut off = 0.0;
        for k in 0..v {
            let r = match pearson64(&hat[i], &tru[k]) {
                Some(r) => r,
                None => {
                    ctx.flag(Degeneracy::ZeroVariance);
                    0.0
                }
            };
            if k == i {
                diag = r;
            } else {
                off += r;
            }
        }
        gains.push(T::of_f64(diag - off / (v as f64 - 1.0)));
    }
    Ok(gains)
}

/// Encoding direction: fit embedding→voxel, select per-voxel fractions on
/// the test set, and write validation-set Pearson per voxel into a volume.
pub fn encode_voxelwise<T: Float>(
    embeddings: &EmbeddingMatrix<T>,
    responses: &ConditionResponses<T>,
    split: &DataSplit,
    fractions: &[f64],
    dims: [usize; 3],
    ctx: &Context,
) -> Result<(Volume<T>, FracridgeModel<T>)> {
    split.validate()?;
    let emb_rows = rows_by_id(&embeddings.item_ids, "embedding")?;
    let resp_rows = rows_by_id(&responses.conditions, "response")?;

    let gather = |ids: &[String]| -> Result<(Array2<T>, Array2<T>)> {
        let mut e = Array2::zeros((ids.len(), embeddings.dim()));
        let mut b = Array2::zeros((ids.len(), responses.n_voxels()));
        for (i, id) in ids.iter().enumerate() {
            let &er = emb_rows
                .get(id.as_str())
                .ok_or_else(|| Error::validation(format!("embedding for '{id}' missing")))?;
            let &br = resp_rows
                .get(id.as_str())
                .ok_or_else(|| Error::validation(format!("response for '{id}' missing")))?;
            e.row_mut(i).assign(&embeddings.values.row(er));
            b.row_mut(i).assign(&responses.responses.row(br));
        }
        Ok((e, b))
    };

    let (e_train, b_train) = gather(&split.train)?;
    let (e_test, b_test) = gather(&split.test)?;
    let (e_val, b_val) = gather(&split.validation)?;

    let mut model = fracridge_fit(e_train.view(), b_train.view(), fractions)?;
    select_fractions(&mut model, e_test.view(), b_test.view(), ctx)?;
    let predicted = predict(&model, e_val.view())?;

    let mut volume = Volume::empty(dims);
    for (vox, coord) in responses.voxel_coords.iter().enumerate() {
        let pred: Vec<f64> = (0..predicted.nrows())
            .map(|i| predicted[(i, vox)].as_f64())
            .collect();
        let obs: Vec<f64> = (0..b_val.nrows()).map(|i| b_val[(i, vox)].as_f64()).collect();
        let r = match pearson64(&pred, &obs) {
            Some(r) => r,
            None => {
                ctx.flag(Degeneracy::ZeroVariance);
                0.0
            }
        };
        volume.set(*coord, T::of_f64(r))?;
    }
    Ok((volume, model))
}

fn rows_by_id<'a>(
    ids: &'a [String],
    what: &'static str,
) -> Result<std::collections::HashMap<&'a str, usize>> {
    let mut map = std::collections::HashMap::with_capacity(ids.len());
    for (i, id) in ids.iter().enumerate() {
        if map.insert(id.as_str(), i).is_some() {
            return Err(Error::validation(format!("duplicate {what} id '{id}'")));
        }
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand_chacha::ChaCha20Rng;
    use rand_distr::StandardNormal;

    fn randn(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
    }

    /// Direct ridge solve (XᵀX + αI) b = Xᵀy on centered data.
    fn ridge_direct(xc: &Array2<f64>, yc: &[f64], alpha: f64) -> Vec<f64> {
        let (n, p) = xc.dim();
        let mx = nalgebra::DMatrix::from_fn(n, p, |i, j| xc[(i, j)]);
        let xtx = mx.transpose() * &mx + nalgebra::DMatrix::identity(p, p) * alpha;
        let xty = mx.transpose() * nalgebra::DVector::from_row_slice(yc);
        let sol = xtx.lu().solve(&xty).expect("ridge system solvable");
        sol.iter().copied().collect()
    }

    #[test]
    fn default_grid_is_twenty_steps() {
        let g = default_fraction_grid();
        assert_eq!(g.len(), 20);
        assert_eq!(g[0], 0.05);
        assert_eq!(g[1], 0.10);
        assert_eq!(g[19], 1.0);
        for (k, &f) in g.iter().enumerate() {
            assert_eq!(f, (k + 1) as f64 / 20.0);
        }
    }

    #[test]
    fn fraction_one_is_ols() {
        let x = randn(40, 6, 1);
        let w = randn(6, 3, 2);
        let y = x.dot(&w);
        let model = fracridge_fit(x.view(), y.view(), &[1.0]).unwrap();
        // noiseless: OLS of centered data recovers w exactly
        for j in 0..3 {
            for k in 0..6 {
                assert_abs_diff_eq!(model.weights[0][(k, j)], w[(k, j)], epsilon = 1e-8);
            }
        }
        for j in 0..3 {
            assert_eq!(model.alphas[0][j], 0.0);
        }
    }

    #[test]
    fn norm_ratio_contract_holds() {
        let x = randn(200, 50, 3);
        let y = randn(200, 8, 4);
        let grid = default_fraction_grid();
        let model = fracridge_fit(x.view(), y.view(), &grid).unwrap();
        for (fi, &f) in grid.iter().enumerate() {
            for j in 0..8 {
                let got = model.achieved_fraction[fi][j];
                assert!(
                    (got - f).abs() <= FRACTION_TOL,
                    "fraction {f}: achieved {got}"
                );
            }
        }
    }

    #[test]
    fn matches_direct_ridge_solve() {
        // tiny problems: each per-fraction solution equals the direct
        // (XᵀX+αI) solve at the recovered α
        for seed in 0..5u64 {
            let n = 20 + (seed as usize % 11);
            let p = 4 + (seed as usize % 7);
            let x = randn(n, p, 100 + seed);
            let y = randn(n, 2, 200 + seed);
            let grid = [0.1, 0.35, 0.7, 1.0];
            let model = fracridge_fit(x.view(), y.view(), &grid).unwrap();

            let (xc, _) = center_columns(x.view());
            let (yc, _) = center_columns(y.view());
            for (fi, _) in grid.iter().enumerate() {
                for j in 0..2 {
                    let alpha = model.alphas[fi][j];
                    let ycol: Vec<f64> = (0..n).map(|i| yc[(i, j)]).collect();
                    let direct = ridge_direct(&xc, &ycol, alpha);
                    let norm: f64 = direct.iter().map(|v| v * v).sum::<f64>().sqrt();
                    for k in 0..p {
                        let mine = model.weights[fi][(k, j)];
                        assert!(
                            (mine - direct[k]).abs() <= 1e-8 * norm.max(1.0),
                            "seed {seed} fraction {fi} target {j}: {mine} vs {}",
                            direct[k]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn coefficient_norm_decreases_with_alpha() {
        let x = randn(60, 10, 7);
        let y = randn(60, 1, 8);
        let (xc, _) = center_columns(x.view());
        let (yc, _) = center_columns(y.view());
        let rot = rotate(&xc, &yc).unwrap();
        let q: Vec<f64> = (0..rot.s.len()).map(|i| rot.q[(i, 0)]).collect();
        let s_max = rot.s.iter().cloned().fold(0.0, f64::max);
        let grid = log_grid(1e-6 * s_max * s_max, 1e6 * s_max * s_max, 10);
        let mut prev = f64::INFINITY;
        for &a in &grid {
            let r = norm_ratio(&rot.s, &q, rot.ols_norm[0], a);
            assert!(r < prev, "norm ratio not strictly decreasing at alpha {a}");
            prev = r;
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let x = Array2::<f64>::zeros((10, 3));
        let y = randn(10, 2, 1);
        assert!(fracridge_fit(x.view(), y.view(), &[0.5]).is_err()); // all-zero X
        let x = randn(10, 3, 1);
        assert!(fracridge_fit(x.view(), y.view(), &[]).is_err());
        assert!(fracridge_fit(x.view(), y.view(), &[0.0, 0.5]).is_err());
        assert!(fracridge_fit(x.view(), y.view(), &[0.5, 0.5]).is_err());
        assert!(fracridge_fit(x.view(), y.view(), &[0.5, 1.1]).is_err());
    }

    #[test]
    fn rank_deficient_predictors_handled() {
        // duplicate a column: rank 3 out of p=4
        let base = randn(30, 3, 11);
        let mut x = Array2::<f64>::zeros((30, 4));
        for i in 0..30 {
            for j in 0..3 {
                x[(i, j)] = base[(i, j)];
            }
            x[(i, 3)] = base[(i, 1)];
        }
        let y = randn(30, 2, 12);
        let model = fracridge_fit(x.view(), y.view(), &[0.3, 1.0]).unwrap();
        for fi in 0..2 {
            for j in 0..2 {
                assert!(model.weights[fi].column(j).iter().all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn select_noiseless_prefers_unregularized() {
        let x = randn(60, 5, 21);
        let w = randn(5, 3, 22);
        let y = x.dot(&w);
        let xt = randn(30, 5, 23);
        let yt = xt.dot(&w);
        let grid = default_fraction_grid();
        let mut model = fracridge_fit(x.view(), y.view(), &grid).unwrap();
        let ctx = Context::new();
        select_fractions(&mut model, xt.view(), yt.view(), &ctx).unwrap();
        let chosen = model.chosen_fraction.as_ref().unwrap();
        assert_eq!(chosen.len(), 3);
        for &f in chosen {
            assert_eq!(f, 1.0);
        }
    }

    #[test]
    fn select_noisy_prefers_regularization() {
        // few samples, many predictors, strong noise: small fractions win
        let x = randn(30, 25, 31);
        let w = randn(25, 6, 32);
        let clean = x.dot(&w);
        let noise = randn(30, 6, 33);
        let y = &clean + &(noise * 12.0);
        let xt = randn(60, 25, 34);
        let yt = xt.dot(&w);
        let grid = default_fraction_grid();
        let mut model = fracridge_fit(x.view(), y.view(), &grid).unwrap();
        let ctx = Context::new();
        select_fractions(&mut model, xt.view(), yt.view(), &ctx).unwrap();
        let chosen = model.chosen_fraction.as_ref().unwrap();
        let mean: f64 = chosen.iter().sum::<f64>() / chosen.len() as f64;
        assert!(mean < 0.9, "mean chosen fraction {mean}");
    }

    #[test]
    fn select_constant_test_column_flags() {
        let x = randn(20, 4, 41);
        let y = randn(20, 2, 42);
        let mut model = fracridge_fit(x.view(), y.view(), &[0.5, 1.0]).unwrap();
        let xt = randn(10, 4, 43);
        let mut yt = randn(10, 2, 44);
        for i in 0..10 {
            yt[(i, 0)] = 3.0;
        }
        let ctx = Context::new();
        select_fractions(&mut model, xt.view(), yt.view(), &ctx).unwrap();
        assert_eq!(model.chosen_fraction.as_ref().unwrap()[0], 1.0);
        assert_eq!(ctx.count(Degeneracy::DegenerateTestColumn), 1);
    }

    #[test]
    fn predict_roundtrip_and_shapes() {
        let x = randn(50, 6, 51);
        let w = randn(6, 4, 52);
        let y = x.dot(&w);
        let grid = default_fraction_grid();
        let mut model = fracridge_fit(x.view(), y.view(), &grid).unwrap();
        let ctx = Context::new();
        select_fractions(&mut model, x.view(), y.view(), &ctx).unwrap();
        let y_hat = predict(&model, x.view()).unwrap();
        for i in 0..50 {
            for j in 0..4 {
                let scale = y[(i, j)].abs().max(1.0);
                assert!((y_hat[(i, j)] - y[(i, j)]).abs() <= 1e-6 * scale);
            }
        }
        let one = predict(&model, x.slice(ndarray::s![0..1, ..])).unwrap();
        assert_eq!(one.dim(), (1, 4));
        // wrong predictor count
        assert!(predict(&model, randn(3, 5, 53).view()).is_err());
    }

    #[test]
    fn prediction_row_order_invariant() {
        let x = randn(25, 5, 61);
        let y = randn(25, 3, 62);
        let grid = [0.25, 0.6, 1.0];
        let probe = randn(4, 5, 63);

        let mut a = fracridge_fit(x.view(), y.view(), &grid).unwrap();
        a.chosen_fraction = Some(vec![0.6; 3]);
        let pa = predict(&a, probe.view()).unwrap();

        // reverse row order
        let mut xr = Array2::zeros((25, 5));
        let mut yr = Array2::zeros((25, 3));
        for i in 0..25 {
            for j in 0..5 {
                xr[(i, j)] = x[(24 - i, j)];
            }
            for j in 0..3 {
                yr[(i, j)] = y[(24 - i, j)];
            }
        }
        let mut b = fracridge_fit(xr.view(), yr.view(), &grid).unwrap();
        b.chosen_fraction = Some(vec![0.6; 3]);
        let pb = predict(&b, probe.view()).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                assert_abs_diff_eq!(pa[(i, j)], pb[(i, j)], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn gain_self_prediction_near_one() {
        let ctx = Context::new();
        let y = randn(10, 200, 71);
        let gains = prediction_accuracy_gain(y.view(), y.view(), &ctx).unwrap();
        for g in gains {
            assert!((g - 1.0).abs() < 0.15, "gain {g}");
        }
    }

    #[test]
    fn gain_identical_predictions_average_zero() {
        let ctx = Context::new();
        let truth = randn(8, 40, 72);
        let mut hat = Array2::zeros((8, 40));
        for i in 0..8 {
            for j in 0..40 {
                hat[(i, j)] = truth[(0, j)] * 0.5 + 1.0;
            }
        }
        let gains = prediction_accuracy_gain(hat.view(), truth.view(), &ctx).unwrap();
        let mean: f64 = gains.iter().sum::<f64>() / gains.len() as f64;
        assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn gain_matches_double_loop_oracle() {
        let ctx = Context::new();
        let hat = randn(10, 8, 73);
        let truth = randn(10, 8, 74);
        let gains = prediction_accuracy_gain(hat.view(), truth.view(), &ctx).unwrap();

        // independent double-loop Pearson
        let pear = |a: &[f64], b: &[f64]| -> f64 {
            let n = a.len() as f64;
            let ma = a.iter().sum::<f64>() / n;
            let mb = b.iter().sum::<f64>() / n;
            let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
            let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
            let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
            cov / (va.sqrt() * vb.sqrt())
        };
        for i in 0..10 {
            let hi: Vec<f64> = hat.row(i).to_vec();
            let diag = pear(&hi, &truth.row(i).to_vec());
            let mut off = 0.0;
            for k in 0..10 {
                if k != i {
                    off += pear(&hi, &truth.row(k).to_vec());
                }
            }
            let expect = diag - off / 9.0;
            assert_abs_diff_eq!(gains[i], expect, epsilon = 1e-10);
        }
    }

    #[test]
    fn data_split_sampling() {
        let ids: Vec<String> = (0..50).map(|i| format!("c{i}")).collect();
        let val: Vec<String> = (45..50).map(|i| format!("c{i}")).collect();
        let split = DataSplit::sample(&ids, &val, 10, 5).unwrap();
        assert_eq!(split.validation.len(), 5);
        assert_eq!(split.test.len(), 10);
        assert_eq!(split.train.len(), 35);
        split.validate().unwrap();
        // deterministic
        let again = DataSplit::sample(&ids, &val, 10, 5).unwrap();
        assert_eq!(split.test, again.test);
        // unknown validation id
        assert!(DataSplit::sample(&ids, &["zz".to_string()], 10, 5).is_err());
        // overlap rejected
        assert!(DataSplit::new(
            vec!["a".into(), "b".into()],
            vec!["b".into()],
            vec![]
        )
        .is_err());
    }

    fn grid_coords(n: usize) -> Vec<[i32; 3]> {
        (0..n).map(|i| [i as i32, 0, 0]).collect()
    }

    #[test]
    fn encode_noiseless_linear_model() {
        let ctx = Context::new();
        let n = 60;
        let d = 8;
        let p = 12;
        let e = randn(n, d, 81);
        let g = randn(p, d, 82);
        let b = e.dot(&g.t());
        let ids: Vec<String> = (0..n).map(|i| format!("c{i}")).collect();
        let emb = EmbeddingMatrix::new(e, ids.clone(), crate::dataset::EmbeddingKind::Semantic)
            .unwrap();
        let resp = ConditionResponses {
            conditions: ids.clone(),
            responses: b,
            repetitions_used: vec![3; n],
            voxel_coords: grid_coords(p),
        };
        let val: Vec<String> = (50..60).map(|i| format!("c{i}")).collect();
        let split = DataSplit::sample(&ids, &val, 10, 3).unwrap();
        let (vol, model) = encode_voxelwise(
            &emb,
            &resp,
            &split,
            &default_fraction_grid(),
            [p, 1, 1],
            &ctx,
        )
        .unwrap();
        assert_eq!(model.chosen_fraction.as_ref().unwrap().len(), p);
        for vox in 0..p {
            let r = vol.get([vox as i32, 0, 0]).unwrap();
            assert!(r > 0.999, "voxel {vox} pearson {r}");
        }
    }

    #[test]
    fn encode_pure_noise_centers_near_zero() {
        let ctx = Context::new();
        let n = 80;
        let e = randn(n, 6, 91);
        let b = randn(n, 10, 92);
        let ids: Vec<String> = (0..n).map(|i| format!("c{i}")).collect();
        let emb = EmbeddingMatrix::new(e, ids.clone(), crate::dataset::EmbeddingKind::Semantic)
            .unwrap();
        let resp = ConditionResponses {
            conditions: ids.clone(),
            responses: b,
            repetitions_used: vec![3; n],
            voxel_coords: grid_coords(10),
        };
        let val: Vec<String> = (60..80).map(|i| format!("c{i}")).collect();
        let split = DataSplit::sample(&ids, &val, 20, 7).unwrap();
        let (vol, _) = encode_voxelwise(
            &emb,
            &resp,
            &split,
            &default_fraction_grid(),
            [10, 1, 1],
            &ctx,
        )
        .unwrap();
        let mean: f64 = (0..10)
            .map(|v| vol.get([v as i32, 0, 0]).unwrap())
            .sum::<f64>()
            / 10.0;
        assert!(mean.abs() < 0.3, "null mean pearson {mean}");
    }

    #[test]
    fn encode_driven_voxels_beat_noise_voxels() {
        // half the voxels linear in the embedding at SNR 4, half pure noise
        let ctx = Context::new();
        let n = 120;
        let d = 8;
        let p = 16;
        let e = randn(n, d, 101);
        let g = randn(p / 2, d, 102);
        let signal = e.dot(&g.t());
        let rms = (signal.iter().map(|v| v * v).sum::<f64>() / signal.len() as f64).sqrt();
        let sigma = rms / 4.0;
        let noise = randn(n, p, 103);
        let mut b = Array2::<f64>::zeros((n, p));
        for i in 0..n {
            for v in 0..p {
                b[(i, v)] = noise[(i, v)] * sigma
                    + if v < p / 2 { signal[(i, v)] } else { 0.0 };
            }
        }
        let ids: Vec<String> = (0..n).map(|i| format!("c{i}")).collect();
        let emb = EmbeddingMatrix::new(e, ids.clone(), crate::dataset::EmbeddingKind::Semantic)
            .unwrap();
        let resp = ConditionResponses {
            conditions: ids.clone(),
            responses: b,
            repetitions_used: vec![3; n],
            voxel_coords: grid_coords(p),
        };
        let val: Vec<String> = (100..120).map(|i| format!("c{i}")).collect();
        let split = DataSplit::sample(&ids, &val, 20, 9).unwrap();
        let (vol, _) = encode_voxelwise(
            &emb,
            &resp,
            &split,
            &default_fraction_grid(),
            [p, 1, 1],
            &ctx,
        )
        .unwrap();
        let driven: f64 = (0..p / 2)
            .map(|v| vol.get([v as i32, 0, 0]).unwrap())
            .sum::<f64>()
            / (p / 2) as f64;
        let undriven: f64 = (p / 2..p)
            .map(|v| vol.get([v as i32, 0, 0]).unwrap())
            .sum::<f64>()
            / (p / 2) as f64;
        assert!(
            driven - undriven > 0.5,
            "driven {driven} vs undriven {undriven}"
        );
    }
}
