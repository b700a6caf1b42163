//! Semantic similarity search over the field and uncertainty post-processing
//! for decisions.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::eval::TriangleMesh;
use crate::field::{Head, UnifiedField};
use crate::geom::{trilinear_stencil_clamped, GridSpec};
use crate::scene::{teacher_feature, SyntheticScene};
use crate::volume::VoxelVolume;

pub const DEFAULT_TEMPERATURE: f64 = 0.1;
pub const DEFAULT_QUANTILES: (f64, f64) = (0.05, 0.95);
const UNIT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct QuerySpec {
    pub positive: Vec<f64>,
    pub negatives: Vec<Vec<f64>>,
    pub temperature: f64,
}

fn is_unit(v: &[f64]) -> bool {
    (v.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < UNIT_TOL
}

impl QuerySpec {
    pub fn new(positive: Vec<f64>, negatives: Vec<Vec<f64>>, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(Error::domain("temperature must be positive"));
        }
        if !is_unit(&positive) || !negatives.iter().all(|n| is_unit(n)) {
            return Err(Error::domain("query vectors must be unit-norm"));
        }
        if negatives.iter().any(|n| n.len() != positive.len()) {
            return Err(Error::domain("query vectors differ in length"));
        }
        Ok(Self {
            positive,
            negatives,
            temperature,
        })
    }

    /// Positive = teacher feature of `target_class`; negatives = every other
    /// class in the scene (the ground plane included).
    pub fn for_scene_class(scene: &SyntheticScene, target_class: u32, dim: usize, teacher_seed: u64, temperature: f64) -> Result<Self> {
        let positive = teacher_feature(target_class, dim, teacher_seed)?;
        let mut classes = scene.class_ids();
        classes.push(0);
        classes.sort_unstable();
        classes.dedup();
        let negatives = classes
            .into_iter()
            .filter(|&c| c != target_class)
            .map(|c| teacher_feature(c, dim, teacher_seed))
            .collect::<Result<_>>()?;
        Self::new(positive, negatives, temperature)
    }
}

/// Cosine of `f` with a unit `query`; a zero feature scores 0.
pub fn cosine_to_unit(f: &[f64], query: &[f64]) -> f64 {
    let n = f.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return 0.0;
    }
    f.iter().zip(query).map(|(a, b)| a * b).sum::<f64>() / n
}

/// Decoded semantic features at every voxel center, voxel-major.
pub fn feature_volume(field: &UnifiedField) -> VoxelVolume {
    let d = field.decode_voxel_centers(Head::Sem);
    VoxelVolume::from_data(*field.grid(), d.width, d.mean).expect("decoder width matches")
}

pub fn similarity_volume(features: &VoxelVolume, query: &[f64]) -> Result<VoxelVolume> {
    if !is_unit(query) {
        return Err(Error::domain("query must be unit-norm"));
    }
    if query.len() != features.channels {
        return Err(Error::domain(format!(
            "query has {} channels, features have {}",
            query.len(),
            features.channels
        )));
    }
    let data = (0..features.n_voxels())
        .into_par_iter()
        .map(|v| cosine_to_unit(features.at(v), query))
        .collect();
    VoxelVolume::from_data(features.grid, 1, data)
}

/// Temperatured softmax probability of the positive against the negatives.
pub fn contrastive_score(sim_pos: f64, sim_negs: &[f64], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::domain("temperature must be positive"));
    }
    let m = sim_negs.iter().fold(sim_pos, |a, &b| a.max(b));
    let pos = ((sim_pos - m) / tau).exp();
    let neg: f64 = sim_negs.iter().map(|s| ((s - m) / tau).exp()).sum();
    Ok(pos / (pos + neg))
}

/// Per-voxel contrastive probability of the query.
pub fn contrastive_volume(features: &VoxelVolume, spec: &QuerySpec) -> Result<VoxelVolume> {
    if spec.positive.len() != features.channels {
        return Err(Error::domain("query length differs from feature channels"));
    }
    let data = (0..features.n_voxels())
        .into_par_iter()
        .map(|v| {
            let f = features.at(v);
            let pos = cosine_to_unit(f, &spec.positive);
            let negs: Vec<f64> = spec.negatives.iter().map(|n| cosine_to_unit(f, n)).collect();
            contrastive_score(pos, &negs, spec.temperature)
        })
        .collect::<Result<_>>()?;
    VoxelVolume::from_data(features.grid, 1, data)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Normalization {
    MinMax,
    Quantile { lo: f64, hi: f64 },
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization::Quantile {
            lo: DEFAULT_QUANTILES.0,
            hi: DEFAULT_QUANTILES.1,
        }
    }
}

/// Quantile of sorted values, linear between order statistics at `q (n - 1)`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Maps values to `[0, 1]`; constant input gives all 0.5.
pub fn normalize_uncertainty(values: &[f64], mode: Normalization) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::domain("cannot normalize an empty set"));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::domain("uncertainties contain NaN"));
    }
    let (lo, hi) = match mode {
        Normalization::MinMax => (
            values.iter().copied().fold(f64::INFINITY, f64::min),
            values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        ),
        Normalization::Quantile { lo, hi } => {
            if !(0.0 <= lo && lo < hi && hi <= 1.0) {
                return Err(Error::domain(format!("invalid quantile range ({lo}, {hi})")));
            }
            let mut s = values.to_vec();
            s.sort_by(f64::total_cmp);
            (quantile_sorted(&s, lo), quantile_sorted(&s, hi))
        }
    };
    if !(hi > lo) {
        return Ok(vec![0.5; values.len()]);
    }
    Ok(values.iter().map(|v| (v.clamp(lo, hi) - lo) / (hi - lo)).collect())
}

/// Normalizes a 1-channel volume.
pub fn normalize_volume(v: &VoxelVolume, mode: Normalization) -> Result<VoxelVolume> {
    if v.channels != 1 {
        return Err(Error::domain("expected a single-channel volume"));
    }
    VoxelVolume::from_data(v.grid, 1, normalize_uncertainty(&v.data, mode)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Combine {
    /// Weight by the first (spatial) uncertainty only.
    SpatialOnly,
    /// Weight by the product over all uncertainties.
    AllProduct,
}

/// Similarity weighted by `1 - û`.
pub fn combine_similarity(sim: &VoxelVolume, uncertainties: &[VoxelVolume], mode: Combine) -> Result<VoxelVolume> {
    if sim.channels != 1 {
        return Err(Error::domain("similarity must be a single-channel volume"));
    }
    let used = match mode {
        Combine::SpatialOnly => uncertainties.get(..1).unwrap_or(&[]),
        Combine::AllProduct => uncertainties,
    };
    for u in used {
        if !u.grid.same_layout(&sim.grid) || u.channels != 1 {
            return Err(Error::domain("uncertainty volume grid differs from the similarity grid"));
        }
    }
    let data = (0..sim.n_voxels())
        .map(|v| used.iter().fold(sim.data[v], |acc, u| acc * (1.0 - u.data[v])))
        .collect();
    VoxelVolume::from_data(sim.grid, 1, data)
}

/// Decoded log-variance of `head` at every voxel center.
pub fn logvar_volume(field: &UnifiedField, head: Head) -> VoxelVolume {
    let d = field.decode_voxel_centers(head);
    VoxelVolume::from_data(*field.grid(), 1, d.logvar).expect("one logvar per voxel")
}

/// Voxels whose centers lie inside, or within `margin` meters of, an object of
/// class `class_id`.
pub fn object_voxel_mask(scene: &SyntheticScene, grid: &GridSpec, class_id: u32, margin: f64) -> Vec<bool> {
    let prims: Vec<_> = scene.class_primitives(class_id).collect();
    grid.centers()
        .iter()
        .map(|x| prims.iter().any(|p| p.shape.sdf(x) <= margin))
        .collect()
}

/// Index of the largest value among voxels where `allowed` holds (all when
/// `None`); ties resolve to the lowest index.
pub fn argmax_voxel(v: &VoxelVolume, allowed: Option<&[bool]>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &x) in v.data.iter().enumerate() {
        if allowed.map_or(false, |a| !a[i]) || x.is_nan() {
            continue;
        }
        if best.map_or(true, |(_, b)| x > b) {
            best = Some((i, x));
        }
    }
    best.map(|(i, _)| i)
}

/// Trilinear sample of a scalar volume at each mesh vertex (clamped to the grid).
pub fn surface_project(volume: &VoxelVolume, mesh: &TriangleMesh) -> Result<Vec<f64>> {
    if volume.channels != 1 {
        return Err(Error::domain("expected a single-channel volume"));
    }
    Ok(mesh
        .vertices
        .iter()
        .map(|x| {
            let (st, _) = trilinear_stencil_clamped(&volume.grid, x);
            volume.apply_stencil(&st)[0]
        })
        .collect())
}
