//! Incremental fusion of RGB-D frames into feature, TSDF and observation
//! statistics volumes, and the 2D encoder that produces per-pixel features.

use rand::Rng;
use rayon::prelude::*;

use crate::autodiff::{Bound, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::geom::{for_each_traversed_voxel, pixel_center_ray, CameraIntrinsics, GridSpec, Pose, Vec3};
use crate::scene::FrameObservation;
use crate::volume::VoxelVolume;

#[derive(Debug, Clone, PartialEq)]
pub struct FusionState {
    pub feat_mean: VoxelVolume,
    /// Running sum of squared deviations per channel.
    pub feat_m2: VoxelVolume,
    pub count: VoxelVolume,
    pub tsdf: VoxelVolume,
    pub tsdf_weight: VoxelVolume,
    pub trunc: f64,
}

impl FusionState {
    pub fn new(grid: GridSpec, feat_channels: usize, trunc: f64) -> Result<Self> {
        grid.validate()?;
        if feat_channels == 0 {
            return Err(Error::domain("feature channels must be positive"));
        }
        if !(trunc > 0.0) {
            return Err(Error::domain("truncation distance must be positive"));
        }
        Ok(Self {
            feat_mean: VoxelVolume::zeros(grid, feat_channels),
            feat_m2: VoxelVolume::zeros(grid, feat_channels),
            count: VoxelVolume::zeros(grid, 1),
            tsdf: VoxelVolume::zeros(grid, 1),
            tsdf_weight: VoxelVolume::zeros(grid, 1),
            trunc,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.feat_mean.grid
    }

    pub fn feat_channels(&self) -> usize {
        self.feat_mean.channels
    }

    fn check_compatible(&self, other: &FusionState) -> Result<()> {
        if self.grid() != other.grid() {
            return Err(Error::domain("fusion states live on different grids"));
        }
        if self.feat_channels() != other.feat_channels() {
            return Err(Error::domain("fusion states have different feature widths"));
        }
        if self.trunc != other.trunc {
            return Err(Error::domain("fusion states use different truncation distances"));
        }
        Ok(())
    }
}

/// Camera-frame coordinates of world point `x`, written out per component so
/// the arithmetic is fixed: `p_k = (R_0k d_0 + R_1k d_1) + R_2k d_2`, `d = x - t`.
#[inline]
pub fn camera_coords(pose: &Pose, x: &Vec3) -> [f64; 3] {
    let r = &pose.rotation;
    let d = [
        x[0] - pose.translation[0],
        x[1] - pose.translation[1],
        x[2] - pose.translation[2],
    ];
    [0, 1, 2].map(|k| r[(0, k)] * d[0] + r[(1, k)] * d[1] + r[(2, k)] * d[2])
}

/// Pixel `(col, row)` containing the projection of camera point `p`, if any.
#[inline]
pub fn project_to_pixel(intr: &CameraIntrinsics, p: &[f64; 3]) -> Option<(usize, usize)> {
    if p[2] <= 0.0 {
        return None;
    }
    let u = intr.fx * p[0] / p[2] + intr.cx;
    let v = intr.fy * p[1] / p[2] + intr.cy;
    if !(u >= 0.0 && v >= 0.0 && u < intr.width as f64 && v < intr.height as f64) {
        return None;
    }
    Some((u.floor() as usize, v.floor() as usize))
}

/// Projective TSDF update with unit weight per frame.
pub fn integrate_depth(state: &mut FusionState, frame: &FrameObservation) {
    let grid = *state.grid();
    let trunc = state.trunc;
    let (pose, intr) = (frame.pose, frame.intr);
    state
        .tsdf
        .data
        .par_iter_mut()
        .zip(state.tsdf_weight.data.par_iter_mut())
        .enumerate()
        .for_each(|(l, (t, w))| {
            let x = grid.voxel_center(grid.unravel(l));
            let p = camera_coords(&pose, &x);
            let Some((col, row)) = project_to_pixel(&intr, &p) else {
                return;
            };
            let d = frame.depth[row * intr.width + col];
            if d <= 0.0 {
                return;
            }
            let sdf = d - p[2];
            if sdf > -trunc {
                let new = (sdf / trunc).clamp(-1.0, 1.0);
                *t = (*t * *w + new) / (*w + 1.0);
                *w += 1.0;
            }
        });
}

/// Ordered `(voxel, pixel)` pairs visited by feature back-projection: every
/// valid-depth pixel in row-major order, each ray traversed from the camera to
/// `depth + trunc` along the ray.
pub fn feature_assignments(grid: &GridSpec, frame: &FrameObservation, trunc: f64) -> Result<Vec<(usize, usize)>> {
    let intr = frame.intr;
    let forward = frame.pose.forward();
    let mut out = Vec::new();
    for row in 0..intr.height {
        for col in 0..intr.width {
            let p = row * intr.width + col;
            let d = frame.depth[p];
            if d <= 0.0 {
                continue;
            }
            let ray = pixel_center_ray(&intr, &frame.pose, col, row)?;
            let t_end = d / ray.direction.dot(&forward) + trunc;
            let seg = ray.with_bounds(0.0, t_end)?;
            for_each_traversed_voxel(grid, &seg, |idx| out.push((grid.linear_index(idx), p)));
        }
    }
    Ok(out)
}

/// Welford update of the per-voxel feature statistics from a pixel-major
/// `H x W x C_E` feature map.
pub fn backproject_features(state: &mut FusionState, frame: &FrameObservation, feat_map: &[f64]) -> Result<()> {
    let c = state.feat_channels();
    if feat_map.len() != frame.intr.n_pixels() * c {
        return Err(Error::shape(
            "backproject_features",
            format!("{} values for {} pixels x {c}", feat_map.len(), frame.intr.n_pixels()),
        ));
    }
    let assignments = feature_assignments(state.grid(), frame, state.trunc)?;
    accumulate_assignments(state, &assignments, feat_map);
    Ok(())
}

pub(crate) fn accumulate_assignments(state: &mut FusionState, assignments: &[(usize, usize)], feat_map: &[f64]) {
    let c = state.feat_channels();
    for &(v, p) in assignments {
        let n = state.count.data[v] + 1.0;
        state.count.data[v] = n;
        let f = &feat_map[p * c..(p + 1) * c];
        let mean = &mut state.feat_mean.data[v * c..(v + 1) * c];
        let m2 = &mut state.feat_m2.data[v * c..(v + 1) * c];
        for ch in 0..c {
            let delta = f[ch] - mean[ch];
            mean[ch] += delta / n;
            m2[ch] += delta * (f[ch] - mean[ch]);
        }
    }
}

/// Parallel combination of two states (Chan et al. for the feature moments,
/// weight-averaged TSDF).
pub fn merge_states(a: &FusionState, b: &FusionState) -> Result<FusionState> {
    a.check_compatible(b)?;
    let mut out = a.clone();
    let c = a.feat_channels();
    for v in 0..a.feat_mean.n_voxels() {
        let (na, nb) = (a.count.data[v], b.count.data[v]);
        if nb > 0.0 {
            if na == 0.0 {
                out.feat_mean.at_mut(v).copy_from_slice(b.feat_mean.at(v));
                out.feat_m2.at_mut(v).copy_from_slice(b.feat_m2.at(v));
            } else {
                let n = na + nb;
                let (ma, mb) = (a.feat_mean.at(v), b.feat_mean.at(v));
                let (sa, sb) = (a.feat_m2.at(v), b.feat_m2.at(v));
                let mut mean = vec![0.0; c];
                let mut m2 = vec![0.0; c];
                for ch in 0..c {
                    let delta = mb[ch] - ma[ch];
                    mean[ch] = (na * ma[ch] + nb * mb[ch]) / n;
                    m2[ch] = sa[ch] + sb[ch] + delta * delta * na * nb / n;
                }
                out.feat_mean.at_mut(v).copy_from_slice(&mean);
                out.feat_m2.at_mut(v).copy_from_slice(&m2);
            }
            out.count.data[v] = na + nb;
        }
        let (wa, wb) = (a.tsdf_weight.data[v], b.tsdf_weight.data[v]);
        if wb > 0.0 {
            out.tsdf.data[v] = if wa == 0.0 {
                b.tsdf.data[v]
            } else {
                (a.tsdf.data[v] * wa + b.tsdf.data[v] * wb) / (wa + wb)
            };
            out.tsdf_weight.data[v] = wa + wb;
        }
    }
    Ok(out)
}

/// Network input `[feat_mean (C_E), tsdf, count_normalized, variance]`,
/// voxel-major. `count_cap` sets where the log-compressed count reaches 1.
pub fn assemble_input(state: &FusionState, count_cap: f64) -> VoxelVolume {
    let c = state.feat_channels();
    let grid = *state.grid();
    let mut out = VoxelVolume::zeros(grid, c + 3);
    let denom = (1.0 + count_cap).ln();
    for v in 0..grid.n_voxels() {
        let count = state.count.data[v];
        let row = out.at_mut(v);
        if count > 0.0 {
            row[..c].copy_from_slice(state.feat_mean.at(v));
            let m2 = state.feat_m2.at(v);
            row[c + 2] = m2.iter().map(|s| s / count.max(1.0)).sum::<f64>() / c as f64;
        }
        row[c] = if state.tsdf_weight.data[v] > 0.0 {
            state.tsdf.data[v]
        } else {
            1.0
        };
        row[c + 1] = (1.0 + count).ln() / denom;
    }
    out
}

/// Sequentially fuses `frames` with precomputed pixel-major feature maps.
pub fn fuse_frames(
    grid: GridSpec,
    trunc: f64,
    frames: &[FrameObservation],
    feat_maps: &[Vec<f64>],
    feat_channels: usize,
) -> Result<FusionState> {
    let mut state = FusionState::new(grid, feat_channels, trunc)?;
    for (f, m) in frames.iter().zip(feat_maps) {
        integrate_depth(&mut state, f);
        backproject_features(&mut state, f, m)?;
    }
    Ok(state)
}

/// Two 3x3 convolutions `3 -> C_E -> C_E` with a relu in between.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Encoder {
    pub channels: usize,
}

impl Encoder {
    pub const W1: &'static str = "enc.w1";
    pub const B1: &'static str = "enc.b1";
    pub const W2: &'static str = "enc.w2";
    pub const B2: &'static str = "enc.b2";

    /// He-initialized weights, zero biases.
    pub fn init(&self, rng: &mut impl Rng) -> ParamStore {
        let c = self.channels;
        let mut ps = ParamStore::new();
        ps.insert(Self::W1, Tensor::randn(&[c, 3, 3, 3], (2.0 / 27.0f64).sqrt(), rng));
        ps.insert(Self::B1, Tensor::zeros(&[c]));
        ps.insert(Self::W2, Tensor::randn(&[c, c, 3, 3], (2.0 / (9.0 * c as f64)).sqrt(), rng));
        ps.insert(Self::B2, Tensor::zeros(&[c]));
        ps
    }

    /// Passthrough weights (`C_E = 3`): both layers copy their input.
    pub fn identity() -> (Encoder, ParamStore) {
        let mut ps = ParamStore::new();
        for (w, b) in [(Self::W1, Self::B1), (Self::W2, Self::B2)] {
            let mut t = Tensor::zeros(&[3, 3, 3, 3]);
            for c in 0..3 {
                t.data[(c * 3 + c) * 9 + 4] = 1.0;
            }
            ps.insert(w, t);
            ps.insert(b, Tensor::zeros(&[3]));
        }
        (Encoder { channels: 3 }, ps)
    }

    /// Feature map `[C_E, H*W]` of a pixel-major RGB image.
    pub fn forward(&self, g: &mut Graph, p: &Bound, rgb: &[f64], width: usize, height: usize) -> Result<Var> {
        if rgb.len() != width * height * 3 {
            return Err(Error::shape("Encoder::forward", "rgb size does not match image"));
        }
        let mut cf = vec![0.0; rgb.len()];
        let n = width * height;
        for px in 0..n {
            for c in 0..3 {
                cf[c * n + px] = rgb[px * 3 + c];
            }
        }
        let x = g.constant(Tensor::new(vec![3, height, width], cf)?);
        let h = g.conv2d(x, p.get(Self::W1), p.get(Self::B1))?;
        let h = g.relu(h);
        let h = g.conv2d(h, p.get(Self::W2), p.get(Self::B2))?;
        g.reshape(h, &[self.channels, n])
    }
}

/// Pixel-major `H x W x C_E` features of one image.
pub fn encode_image(enc: &Encoder, params: &ParamStore, rgb: &[f64], width: usize, height: usize) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let f = enc.forward(&mut g, &p, rgb, width, height)?;
    let f = g.transpose(f)?;
    Ok(g.value(f).data.clone())
}
