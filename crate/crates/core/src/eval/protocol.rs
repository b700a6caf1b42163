//! Collects per-prediction errors and predicted uncertainties of a trained
//! field on held-out views and voxels.

use serde::Serialize;

use super::{cosine_distance, random_uncertainty_baseline, uncertainty_report, ErrorKind, UncertaintyReport};
use crate::error::{Error, Result};
use crate::field::{mc_dropout_variance, Head, Model, UnifiedField};
use crate::fusion::FusionState;
use crate::geom::Vec3;
use crate::render::render_image;
use crate::scene::FrameObservation;
use crate::volume::VoxelVolume;

/// Paired errors and uncertainties of one prediction type.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ErrorSet {
    pub errors: Vec<f64>,
    pub uncertainty: Vec<f64>,
}

impl ErrorSet {
    pub fn len(&self) -> usize {
        self.errors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.errors.is_empty()
    }

    fn push(&mut self, e: f64, u: f64) {
        self.errors.push(e);
        self.uncertainty.push(u);
    }

    pub fn report(&self) -> Result<UncertaintyReport> {
        uncertainty_report(&self.errors, &self.uncertainty)
    }

    /// AUSE of a uniform random ranking of the same errors.
    pub fn random_ause(&self, kind: ErrorKind, seed: u64) -> Result<f64> {
        let r = random_uncertainty_baseline(self.len(), seed)?;
        super::ause(&self.errors, &r, kind)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct FieldEvaluation {
    /// Per pixel: mean absolute RGB error vs rendered color log-variance.
    pub color: ErrorSet,
    /// Per pixel: cosine distance to the teacher vs rendered feature log-variance.
    pub feature: ErrorSet,
    /// Per voxel: absolute TSDF error vs decoded geometric log-variance.
    pub tsdf: ErrorSet,
}

/// World point seen by pixel `p` of `frame` at its recorded depth.
fn surface_point(frame: &FrameObservation, p: usize) -> Option<Vec3> {
    let d = frame.depth[p];
    if !(d > 0.0) {
        return None;
    }
    let w = frame.intr.width;
    let (col, row) = ((p % w) as f64 + 0.5, (p / w) as f64 + 0.5);
    let cam = Vec3::new((col - frame.intr.cx) / frame.intr.fx * d, (row - frame.intr.cy) / frame.intr.fy * d, d);
    Some(frame.pose.camera_to_world(&cam))
}

/// Renders every held-out frame and pairs image errors with rendered
/// uncertainty on pixels whose observed surface lies inside the grid. The TSDF
/// set covers voxels where `voxel_mask` holds.
pub fn evaluate_field(
    field: &UnifiedField,
    frames: &[FrameObservation],
    gt_tsdf: &VoxelVolume,
    voxel_mask: &[bool],
    n_s: usize,
    stride: usize,
) -> Result<FieldEvaluation> {
    let grid = *field.grid();
    if !gt_tsdf.grid.same_layout(&grid) || gt_tsdf.channels != 1 || voxel_mask.len() != grid.n_voxels() {
        return Err(Error::shape("evaluate_field", "ground truth and mask must match the field grid"));
    }
    let aabb = grid.aabb();
    let mut out = FieldEvaluation::default();
    for frame in frames {
        let img = render_image(field, &grid, &frame.pose, &frame.intr, n_s, stride)?;
        for (px, &(col, row)) in img.pixels.iter().zip(&img.source) {
            let p = row * frame.intr.width + col;
            if !surface_point(frame, p).is_some_and(|x| aabb.contains(&x)) || !(px.opacity > 0.0) {
                continue;
            }
            let gt = frame.pixel_rgb(p);
            let e: f64 = (0..3).map(|c| (px.color[c] - gt[c]).abs()).sum::<f64>() / 3.0;
            out.color.push(e, px.logvar_c);
            let fe = cosine_distance(&px.feature, frame.pixel_teacher(p), frame.feature_dim)?;
            out.feature.push(fe, px.logvar_f);
        }
    }
    let geo = field.decode_voxel_centers(Head::Geo);
    for (i, &m) in voxel_mask.iter().enumerate() {
        if m {
            out.tsdf.push((geo.mean[i] - gt_tsdf.data[i]).abs(), geo.logvar[i]);
        }
    }
    Ok(out)
}

/// Voxels that were observed during fusion and lie within the truncation band
/// of the true surface.
pub fn observed_band_mask(state: &FusionState, gt_tsdf: &VoxelVolume) -> Vec<bool> {
    state
        .tsdf_weight
        .data
        .iter()
        .zip(&gt_tsdf.data)
        .map(|(w, t)| *w > 0.0 && t.abs() < 1.0)
        .collect()
}

/// MC-dropout TSDF variance at the masked voxel centers, in mask order.
pub fn mc_dropout_tsdf(
    model: &Model,
    state: &FusionState,
    voxel_mask: &[bool],
    n_passes: usize,
    rate: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let input = crate::fusion::assemble_input(state, model.config.count_cap);
    let xs: Vec<Vec3> = voxel_mask
        .iter()
        .enumerate()
        .filter(|(_, m)| **m)
        .map(|(i, _)| state.tsdf.grid.voxel_center(state.tsdf.grid.unravel(i)))
        .collect();
    mc_dropout_variance(model, &input, state.trunc, &xs, Head::Geo, n_passes, rate, seed)
}
