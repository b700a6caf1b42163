//! Evaluation: image and feature errors, sparsification and AUSE, Spearman rank
//! correlation, and mesh reconstruction metrics.

mod mc_tables;
pub mod mesh;
pub mod protocol;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

pub use mesh::{extract_mesh, extract_mesh_masked, reconstruction_metrics, ReconstructionMetrics, TriangleMesh};

/// Stand-in for an infinite PSNR when the images are identical.
pub const PSNR_INF: f64 = f64::INFINITY;
pub const SPARSIFICATION_STEPS: usize = 100;
pub const ALPHA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ImageMetrics {
    pub psnr: f64,
    pub mae: f64,
    pub mse: f64,
    pub rmse: f64,
}

/// Per-element errors of two equally sized arrays.
pub fn image_metrics(pred: &[f64], gt: &[f64]) -> Result<ImageMetrics> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::domain(format!("size mismatch: {} vs {}", pred.len(), gt.len())));
    }
    let n = pred.len() as f64;
    let (mut mae, mut mse) = (0.0, 0.0);
    for (p, g) in pred.iter().zip(gt) {
        let d = p - g;
        mae += d.abs();
        mse += d * d;
    }
    mae /= n;
    mse /= n;
    let psnr = if mse == 0.0 { PSNR_INF } else { -10.0 * mse.log10() };
    Ok(ImageMetrics {
        psnr,
        mae,
        mse,
        rmse: mse.sqrt(),
    })
}

/// Mean over pixels of `1 - cos` between pixel-major feature vectors.
pub fn cosine_distance(pred: &[f64], gt: &[f64], dim: usize) -> Result<f64> {
    if dim == 0 || pred.len() != gt.len() || pred.len() % dim != 0 || pred.is_empty() {
        return Err(Error::domain("feature maps must have equal size and a whole number of pixels"));
    }
    let n = pred.len() / dim;
    let mut acc = 0.0;
    for i in 0..n {
        let a = &pred[i * dim..(i + 1) * dim];
        let b = &gt[i * dim..(i + 1) * dim];
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        let cos = if na > 0.0 && nb > 0.0 {
            a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
        } else {
            0.0
        };
        acc += 1.0 - cos;
    }
    Ok(acc / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ErrorKind {
    Mae,
    Mse,
    Rmse,
}

impl ErrorKind {
    pub const ALL: [ErrorKind; 3] = [ErrorKind::Mae, ErrorKind::Mse, ErrorKind::Rmse];

    fn item(self, e: f64) -> f64 {
        match self {
            ErrorKind::Mae => e.abs(),
            ErrorKind::Mse | ErrorKind::Rmse => e * e,
        }
    }

    fn finish(self, mean: f64) -> f64 {
        match self {
            ErrorKind::Rmse => mean.sqrt(),
            _ => mean,
        }
    }
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::domain(format!("length mismatch: {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::domain("empty input"));
    }
    Ok(())
}

/// Indices sorted by decreasing key, ties by increasing index.
fn removal_order(keys: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..keys.len()).collect();
    idx.sort_by(|&i, &j| keys[j].total_cmp(&keys[i]).then(i.cmp(&j)));
    idx
}

fn curve_for_order(items: &[f64], order: &[usize], n_steps: usize, kind: ErrorKind) -> Vec<f64> {
    let n = items.len();
    // suffix sums over the removal order: the remainder after removing the first r
    let mut suffix = vec![0.0; n + 1];
    for r in (0..n).rev() {
        suffix[r] = suffix[r + 1] + items[order[r]];
    }
    let value = |r: usize| -> f64 {
        if r >= n {
            0.0
        } else {
            kind.finish(suffix[r] / (n - r) as f64)
        }
    };
    let base = value(0);
    (0..=n_steps)
        .map(|k| {
            let r = k * n / n_steps;
            if base == 0.0 {
                0.0
            } else {
                value(r) / base
            }
        })
        .collect()
}

/// Error of the retained set as the most uncertain predictions are removed,
/// normalized by the full-set error; `n_steps + 1` points ending at 0.
pub fn sparsification_curve(errors: &[f64], uncertainties: &[f64], n_steps: usize, kind: ErrorKind) -> Result<Vec<f64>> {
    check_pair(errors, uncertainties)?;
    if n_steps == 0 {
        return Err(Error::domain("need at least one sparsification step"));
    }
    let items: Vec<f64> = errors.iter().map(|&e| kind.item(e)).collect();
    Ok(curve_for_order(&items, &removal_order(uncertainties), n_steps, kind))
}

/// The curve obtained by removing the largest true errors first.
pub fn oracle_curve(errors: &[f64], n_steps: usize, kind: ErrorKind) -> Result<Vec<f64>> {
    let items: Vec<f64> = errors.iter().map(|&e| kind.item(e)).collect();
    sparsification_curve(errors, &items, n_steps, kind)
}

/// Area between the uncertainty-ordered and oracle curves over the unit
/// removal interval (trapezoid rule on the step grid).
pub fn ause_with_steps(errors: &[f64], uncertainties: &[f64], kind: ErrorKind, n_steps: usize) -> Result<f64> {
    let c = sparsification_curve(errors, uncertainties, n_steps, kind)?;
    let o = oracle_curve(errors, n_steps, kind)?;
    let d: Vec<f64> = c.iter().zip(&o).map(|(a, b)| a - b).collect();
    let inner: f64 = d[1..n_steps].iter().sum();
    Ok((inner + 0.5 * (d[0] + d[n_steps])) / n_steps as f64)
}

pub fn ause(errors: &[f64], uncertainties: &[f64], kind: ErrorKind) -> Result<f64> {
    ause_with_steps(errors, uncertainties, kind, SPARSIFICATION_STEPS)
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Largest sample size tested by full permutation enumeration.
pub const EXACT_PERMUTATION_MAX: usize = 8;

/// Spearman rank correlation and its two-sided p-value. A constant input has
/// no defined correlation and yields `(NaN, 1.0)`.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    check_pair(a, b)?;
    let n = a.len();
    if n < 3 {
        return Err(Error::domain("rank correlation needs at least 3 samples"));
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let Some(rho) = pearson(&ra, &rb) else {
        return Ok((f64::NAN, 1.0));
    };
    let p = if n <= EXACT_PERMUTATION_MAX {
        permutation_p(&ra, &rb, rho)
    } else if rho.abs() >= 1.0 {
        0.0
    } else {
        let df = (n - 2) as f64;
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::domain(e.to_string()))?;
        (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
    };
    Ok((rho, p))
}

/// Fraction of all rank permutations at least as extreme as `rho`.
fn permutation_p(ra: &[f64], rb: &[f64], rho: f64) -> f64 {
    let mut perm = rb.to_vec();
    let (mut hits, mut total) = (0u64, 0u64);
    heap_permutations(&mut perm, &mut |p| {
        total += 1;
        if pearson(ra, p).map_or(false, |r| r.abs() >= rho.abs() - 1e-12) {
            hits += 1;
        }
    });
    hits as f64 / total as f64
}

fn heap_permutations(v: &mut [f64], visit: &mut impl FnMut(&[f64])) {
    let n = v.len();
    let mut c = vec![0usize; n];
    visit(v);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                v.swap(0, i);
            } else {
                v.swap(c[i], i);
            }
            visit(v);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
}

/// Seeded uniform `[0, 1)` uncertainties.
pub fn random_uncertainty_baseline(n: usize, seed: u64) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::domain("baseline needs at least one value"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| rng.gen()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UncertaintyReport {
    pub n: usize,
    pub ause_mae: f64,
    pub ause_mse: f64,
    pub ause_rmse: f64,
    pub rho: f64,
    pub p_value: f64,
    pub significant: bool,
}

impl UncertaintyReport {
    pub fn ause(&self, kind: ErrorKind) -> f64 {
        match kind {
            ErrorKind::Mae => self.ause_mae,
            ErrorKind::Mse => self.ause_mse,
            ErrorKind::Rmse => self.ause_rmse,
        }
    }
}

/// AUSE for every error kind plus the rank correlation of uncertainty with error.
pub fn uncertainty_report(errors: &[f64], uncertainties: &[f64]) -> Result<UncertaintyReport> {
    check_pair(errors, uncertainties)?;
    if errors.len() < 10 {
        return Err(Error::domain("uncertainty report needs at least 10 predictions"));
    }
    if errors.iter().any(|e| !(*e >= 0.0)) {
        return Err(Error::domain("errors must be non-negative"));
    }
    let (rho, p_value) = spearman(uncertainties, errors)?;
    Ok(UncertaintyReport {
        n: errors.len(),
        ause_mae: ause(errors, uncertainties, ErrorKind::Mae)?,
        ause_mse: ause(errors, uncertainties, ErrorKind::Mse)?,
        ause_rmse: ause(errors, uncertainties, ErrorKind::Rmse)?,
        rho,
        p_value,
        significant: rho.is_finite() && p_value < ALPHA,
    })
}
