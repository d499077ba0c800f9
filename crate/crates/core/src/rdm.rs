//! Dissimilarity matrices: pairwise distances, upper-triangular
//! vectorization, and RDM-to-RDM comparison.

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::context::{Context, Degeneracy};
use crate::error::{ensure_finite, Error, Result};
use crate::scalar::Float;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Cosine,
    Correlation,
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Metric::Cosine => write!(f, "cosine"),
            Metric::Correlation => write!(f, "correlation"),
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "correlation" => Ok(Metric::Correlation),
            other => Err(Error::validation(format!("unknown metric '{other}'"))),
        }
    }
}

/// Symmetric condition-by-condition dissimilarity matrix.
///
/// Invariants: zero diagonal, exact symmetry (each pair computed once and
/// mirrored), finite entries, one id per condition.
#[derive(Debug, Clone, PartialEq)]
pub struct Rdm<T: Float> {
    values: Array2<T>,
    condition_ids: Vec<String>,
}

impl<T: Float> Rdm<T> {
    pub fn new(values: Array2<T>, condition_ids: Vec<String>) -> Result<Self> {
        let n = condition_ids.len();
        if values.dim() != (n, n) {
            return Err(Error::DimensionMismatch {
                context: "rdm values vs condition ids",
                left: values.dim().0,
                right: n,
            });
        }
        for i in 0..n {
            if values[(i, i)] != T::zero() {
                return Err(Error::validation(format!("rdm diagonal nonzero at {i}")));
            }
            for j in (i + 1)..n {
                if values[(i, j)] != values[(j, i)] {
                    return Err(Error::validation(format!("rdm asymmetric at ({i},{j})")));
                }
                if !values[(i, j)].is_finite() {
                    return Err(Error::NonFinite("rdm entry".into()));
                }
            }
        }
        Ok(Self {
            values,
            condition_ids,
        })
    }

    pub fn n(&self) -> usize {
        self.condition_ids.len()
    }

    pub fn values(&self) -> ArrayView2<'_, T> {
        self.values.view()
    }

    pub fn condition_ids(&self) -> &[String] {
        &self.condition_ids
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.values[(i, j)]
    }

    /// Sub-RDM over `indices`, keeping their given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Rdm<T>> {
        let n = self.n();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::validation(format!(
                "condition index {bad} out of range ({n} conditions)"
            )));
        }
        let k = indices.len();
        let mut values = Array2::zeros((k, k));
        for (a, &i) in indices.iter().enumerate() {
            for (b, &j) in indices.iter().enumerate() {
                values[(a, b)] = self.values[(i, j)];
            }
        }
        let ids = indices
            .iter()
            .map(|&i| self.condition_ids[i].clone())
            .collect();
        Rdm::new(values, ids)
    }

    /// Pairwise dissimilarities for `indices`, row-major upper triangle,
    /// without building the intermediate sub-RDM.
    pub fn utv_subset(&self, indices: &[usize]) -> Vec<T> {
        let k = indices.len();
        let mut out = Vec::with_capacity(utv_len(k));
        for a in 0..k {
            for b in (a + 1)..k {
                out.push(self.values[(indices[a], indices[b])]);
            }
        }
        out
    }
}

/// Row-major upper-triangular vectorization of an RDM, diagonal excluded.
#[derive(Debug, Clone, PartialEq)]
pub struct Utv<T: Float> {
    n: usize,
    values: Vec<T>,
}

impl<T: Float> Utv<T> {
    pub fn new(n: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != utv_len(n) {
            return Err(Error::DimensionMismatch {
                context: "utv length vs n(n-1)/2",
                left: values.len(),
                right: utv_len(n),
            });
        }
        Ok(Self { n, values })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }
}

pub const fn utv_len(n: usize) -> usize {
    n * (n - 1) / 2
}

/// Position of pair (i, j), i < j, in the row-major upper triangle.
pub fn utv_index(i: usize, j: usize, n: usize) -> usize {
    debug_assert!(i < j && j < n);
    i * n - i * (i + 1) / 2 + (j - i - 1)
}

/// Cosine distance 1 − a·b/(‖a‖‖b‖).
///
/// A zero-norm input yields 1.0 and flags [`Degeneracy::ZeroNormVector`]:
/// all-zero rows occur in real inputs (unannotated multi-hot items) and must
/// not abort a full run.
pub fn cosine_distance<T: Float>(a: &[T], b: &[T], ctx: &Context) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            context: "cosine_distance vectors",
            left: a.len(),
            right: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::validation("cosine_distance of empty vectors"));
    }
    ensure_finite(a, "cosine_distance lhs")?;
    ensure_finite(b, "cosine_distance rhs")?;

    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (x.as_f64(), y.as_f64());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        ctx.flag(Degeneracy::ZeroNormVector);
        return Ok(T::one());
    }
    Ok(T::of_f64(clamp(1.0 - dot / (na.sqrt() * nb.sqrt()), 0.0, 2.0)))
}

/// Sample Pearson correlation, clamped to [−1, 1].
///
/// A constant argument yields 0.0 with a [`Degeneracy::ZeroVariance`] flag.
pub fn pearson<T: Float>(x: &[T], y: &[T], ctx: &Context) -> Result<T> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            context: "pearson vectors",
            left: x.len(),
            right: y.len(),
        });
    }
    if x.len() < 3 {
        return Err(Error::validation(format!(
            "pearson needs length >= 3, got {}",
            x.len()
        )));
    }
    ensure_finite(x, "pearson lhs")?;
    ensure_finite(y, "pearson rhs")?;
    let xs: Vec<f64> = x.iter().map(|v| v.as_f64()).collect();
    let ys: Vec<f64> = y.iter().map(|v| v.as_f64()).collect();
    match pearson64(&xs, &ys) {
        Some(r) => Ok(T::of_f64(r)),
        None => {
            ctx.flag(Degeneracy::ZeroVariance);
            Ok(T::zero())
        }
    }
}

/// f64 Pearson kernel. `None` when either argument is constant.
pub(crate) fn pearson64(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in x.iter().zip(y) {
        let dx = a - mx;
        let dy = b - my;
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(clamp(cov / (vx.sqrt() * vy.sqrt()), -1.0, 1.0))
}

fn clamp(v: f64, lo: f64, hi: f64) -> f64 {
    v.max(lo).min(hi)
}

/// RDM over the rows of `patterns` with numbered condition ids.
pub fn build_rdm<T: Float>(
    patterns: ArrayView2<'_, T>,
    metric: Metric,
    ctx: &Context,
) -> Result<Rdm<T>> {
    let ids = (0..patterns.nrows()).map(|i| i.to_string()).collect();
    build_rdm_with_ids(patterns, ids, metric, ctx)
}

pub fn build_rdm_with_ids<T: Float>(
    patterns: ArrayView2<'_, T>,
    condition_ids: Vec<String>,
    metric: Metric,
    ctx: &Context,
) -> Result<Rdm<T>> {
    let (n, p) = patterns.dim();
    if n < 2 {
        return Err(Error::validation(format!("build_rdm needs >= 2 rows, got {n}")));
    }
    if p < 1 {
        return Err(Error::validation("build_rdm needs >= 1 column"));
    }
    if condition_ids.len() != n {
        return Err(Error::DimensionMismatch {
            context: "build_rdm ids vs rows",
            left: condition_ids.len(),
            right: n,
        });
    }
    for row in patterns.rows() {
        ensure_finite(row.as_slice().unwrap_or(&row.to_vec()), "build_rdm patterns")?;
    }

    let utv = pairwise_utv(patterns, metric, ctx);
    let mut values = Array2::zeros((n, n));
    let mut idx = 0;
    for i in 0..n {
        for j in (i + 1)..n {
            let v = T::of_f64(utv[idx]);
            values[(i, j)] = v;
            values[(j, i)] = v;
            idx += 1;
        }
    }
    Rdm::new(values, condition_ids)
}

/// Pairwise dissimilarities of the rows of `patterns`, row-major upper
/// triangle, f64. This is the searchlight hot path: rows are standardized
/// once, then every pair costs one dot product.
pub(crate) fn pairwise_utv<T: Float>(
    patterns: ArrayView2<'_, T>,
    metric: Metric,
    ctx: &Context,
) -> Vec<f64> {
    let (n, p) = patterns.dim();
    // Per-row preprocessing: unit-normalize (cosine) or center-and-normalize
    // (correlation). Degenerate rows become zero rows, which produce the
    // conventional distance 1.0 for every pair they join.
    let mut rows = vec![0.0f64; n * p];
    let mut degenerate = vec![false; n];
    for (i, row) in patterns.rows().into_iter().enumerate() {
        let dst = &mut rows[i * p..(i + 1) * p];
        for (d, v) in dst.iter_mut().zip(row.iter()) {
            *d = v.as_f64();
        }
        if metric == Metric::Correlation {
            let mean = dst.iter().sum::<f64>() / p as f64;
            dst.iter_mut().for_each(|v| *v -= mean);
        }
        let norm = dst.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            ctx.flag(match metric {
                Metric::Cosine => Degeneracy::ZeroNormVector,
                Metric::Correlation => Degeneracy::ConstantRow,
            });
            degenerate[i] = true;
            dst.iter_mut().for_each(|v| *v = 0.0);
        } else {
            dst.iter_mut().for_each(|v| *v /= norm);
        }
    }

    // One output span per row; the dot order inside a pair is fixed, so the
    // result is independent of the parallel schedule.
    let spans: Vec<Vec<f64>> = (0..n.saturating_sub(1))
        .into_par_iter()
        .map(|i| {
            let a = &rows[i * p..(i + 1) * p];
            ((i + 1)..n)
                .map(|j| {
                    if degenerate[i] || degenerate[j] {
                        return 1.0;
                    }
                    let b = &rows[j * p..(j + 1) * p];
                    let dot = a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y);
                    clamp(1.0 - dot, 0.0, 2.0)
                })
                .collect()
        })
        .collect();
    let mut utv = Vec::with_capacity(utv_len(n));
    spans.into_iter().for_each(|s| utv.extend(s));
    utv
}

pub fn rdm_to_utv<T: Float>(rdm: &Rdm<T>) -> Utv<T> {
    let n = rdm.n();
    let mut values = Vec::with_capacity(utv_len(n));
    for i in 0..n {
        for j in (i + 1)..n {
            values.push(rdm.get(i, j));
        }
    }
    Utv { n, values }
}

pub fn utv_to_rdm<T: Float>(utv: &Utv<T>) -> Rdm<T> {
    let n = utv.n;
    let mut values = Array2::zeros((n, n));
    let mut idx = 0;
    for i in 0..n {
        for j in (i + 1)..n {
            let v = utv.values[idx];
            values[(i, j)] = v;
            values[(j, i)] = v;
            idx += 1;
        }
    }
    Rdm {
        values,
        condition_ids: (0..n).map(|i| i.to_string()).collect(),
    }
}
