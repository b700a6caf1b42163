//! Volume rendering of the field: Laplace density from signed distance, ray
//! sampling, alpha compositing, and a differentiable batch renderer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{laplace_sigma, Bound, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::field::{decode_graph, Head, ModelConfig, UnifiedField};
use crate::geom::{pixel_to_ray, trilinear_stencil_clamped, CameraIntrinsics, GridSpec, Pose, Ray, Vec3};
use crate::volume::VoxelVolume;

/// Lower bound on the first sample depth.
pub const T_NEAR_FLOOR: f64 = 0.05;
pub const TRAIN_SAMPLES: usize = 64;
pub const EVAL_SAMPLES: usize = 128;

/// Laplace-CDF density of signed distance `s` (meters) with scale `beta`.
pub fn density(s: f64, beta: f64) -> f64 {
    laplace_sigma(s, beta)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RaySamples {
    pub ts: Vec<f64>,
    pub xs: Vec<Vec3>,
    /// `t_{i+1} - t_i`, the last one reaching `t_far`.
    pub deltas: Vec<f64>,
}

impl RaySamples {
    pub fn len(&self) -> usize {
        self.ts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ts.is_empty()
    }
}

/// `n_s` samples over `[t_near, t_far]`: bin midpoints, or one uniform draw per
/// bin when `stratified`.
pub fn sample_ray(ray: &Ray, n_s: usize, stratified: bool, seed: u64) -> Result<RaySamples> {
    if n_s < 2 {
        return Err(Error::domain("need at least two samples per ray"));
    }
    if !ray.t_far.is_finite() {
        return Err(Error::domain("ray must have a finite far bound"));
    }
    let width = (ray.t_far - ray.t_near) / n_s as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ts: Vec<f64> = (0..n_s)
        .map(|i| {
            let u = if stratified { rng.gen::<f64>() } else { 0.5 };
            ray.t_near + (i as f64 + u) * width
        })
        .collect();
    let mut deltas: Vec<f64> = ts.windows(2).map(|w| w[1] - w[0]).collect();
    deltas.push(ray.t_far - ts[n_s - 1]);
    // a draw exactly at a bin edge would give a zero-length segment
    for d in deltas.iter_mut() {
        if *d <= 0.0 {
            *d = f64::MIN_POSITIVE;
        }
    }
    let xs = ts.iter().map(|&t| ray.at(t)).collect();
    Ok(RaySamples { ts, xs, deltas })
}

/// The part of `ray` inside the grid, starting no closer than [`T_NEAR_FLOOR`].
pub fn clip_to_grid(grid: &GridSpec, ray: &Ray) -> Option<Ray> {
    let (t0, t1) = grid.aabb().clip(ray)?;
    let t0 = t0.max(T_NEAR_FLOOR).max(ray.t_near);
    let t1 = t1.min(ray.t_far);
    ray.with_bounds(t0, t1).ok()
}

/// Per-point quantities for compositing; multi-channel arrays are point-major.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointBatch {
    /// Signed distance in meters.
    pub sdf: Vec<f64>,
    pub color: Vec<f64>,
    pub feature: Vec<f64>,
    pub feature_dim: usize,
    pub logvar_c: Vec<f64>,
    pub logvar_f: Vec<f64>,
    pub logvar_s: Vec<f64>,
}

/// Anything that can be rendered.
pub trait FieldSampler: Sync {
    fn sample(&self, xs: &[Vec3]) -> PointBatch;
    fn beta(&self) -> f64;
}

impl FieldSampler for UnifiedField {
    fn sample(&self, xs: &[Vec3]) -> PointBatch {
        let feats = self.query_many(xs);
        let n = xs.len();
        let vis = self.decode_features(feats.clone(), n, Head::Vis);
        let sem = self.decode_features(feats.clone(), n, Head::Sem);
        let geo = self.decode_features(feats, n, Head::Geo);
        PointBatch {
            sdf: geo.mean.iter().map(|s| s * self.trunc).collect(),
            color: vis.mean,
            feature: sem.mean,
            feature_dim: self.config.feature_dim,
            logvar_c: vis.logvar,
            logvar_f: sem.logvar,
            logvar_s: geo.logvar,
        }
    }

    fn beta(&self) -> f64 {
        UnifiedField::beta(self)
    }
}

/// A plain TSDF volume (truncation-normalized) with constant color, used to
/// render known geometry.
#[derive(Debug, Clone)]
pub struct TsdfSampler {
    pub tsdf: VoxelVolume,
    pub trunc: f64,
    pub beta: f64,
    pub color: [f64; 3],
}

impl FieldSampler for TsdfSampler {
    fn sample(&self, xs: &[Vec3]) -> PointBatch {
        let sdf = xs
            .iter()
            .map(|x| {
                let (st, _) = trilinear_stencil_clamped(&self.tsdf.grid, x);
                self.tsdf.apply_stencil(&st)[0] * self.trunc
            })
            .collect();
        let n = xs.len();
        PointBatch {
            sdf,
            color: self.color.iter().copied().cycle().take(3 * n).collect(),
            feature: Vec::new(),
            feature_dim: 0,
            logvar_c: vec![0.0; n],
            logvar_f: vec![0.0; n],
            logvar_s: vec![0.0; n],
        }
    }

    fn beta(&self) -> f64 {
        self.beta
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RenderBuffers {
    pub color: [f64; 3],
    pub feature: Vec<f64>,
    pub depth: f64,
    pub logvar_c: f64,
    pub logvar_f: f64,
    pub logvar_s: f64,
    pub opacity: f64,
}

/// Alpha-compositing weights `w_i = T_i (1 - exp(-σ_i δ_i))`.
pub fn compositing_weights(sigma: &[f64], deltas: &[f64]) -> Vec<f64> {
    let mut trans = 1.0;
    sigma
        .iter()
        .zip(deltas)
        .map(|(s, d)| {
            let tau = s * d;
            let w = trans * -(-tau).exp_m1();
            trans *= (-tau).exp();
            w
        })
        .collect()
}

/// Composites per-point quantities along one ray.
pub fn composite(ts: &[f64], weights: &[f64], pts: &PointBatch) -> RenderBuffers {
    let c = pts.feature_dim;
    let mut out = RenderBuffers {
        feature: vec![0.0; c],
        ..RenderBuffers::default()
    };
    for (i, &w) in weights.iter().enumerate() {
        for k in 0..3 {
            out.color[k] += w * pts.color[3 * i + k];
        }
        for k in 0..c {
            out.feature[k] += w * pts.feature[c * i + k];
        }
        out.depth += w * ts[i];
        out.logvar_c += w * pts.logvar_c[i];
        out.logvar_f += w * pts.logvar_f[i];
        out.logvar_s += w * pts.logvar_s[i];
        out.opacity += w;
    }
    out
}

pub fn render_ray(field: &impl FieldSampler, samples: &RaySamples) -> RenderBuffers {
    let pts = field.sample(&samples.xs);
    let beta = field.beta();
    let sigma: Vec<f64> = pts.sdf.iter().map(|&s| density(s, beta)).collect();
    let w = compositing_weights(&sigma, &samples.deltas);
    composite(&samples.ts, &w, &pts)
}

/// Rendered buffers of every `stride`-th pixel in both directions.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<RenderBuffers>,
    /// Source pixel `(col, row)` of each output pixel.
    pub source: Vec<(usize, usize)>,
}

impl RenderedImage {
    pub fn rgb(&self) -> Vec<f64> {
        self.pixels.iter().flat_map(|p| p.color).collect()
    }

    pub fn depth(&self) -> Vec<f64> {
        self.pixels.iter().map(|p| p.depth).collect()
    }
}

/// Ray through the center of pixel `(col, row)`, clipped to the grid.
pub fn pixel_ray(grid: &GridSpec, intr: &CameraIntrinsics, pose: &Pose, col: usize, row: usize) -> Result<Option<Ray>> {
    let ray = pixel_to_ray(intr, pose, (col as f64 + 0.5, row as f64 + 0.5))?;
    Ok(clip_to_grid(grid, &ray))
}

pub fn render_image(
    field: &impl FieldSampler,
    grid: &GridSpec,
    pose: &Pose,
    intr: &CameraIntrinsics,
    n_s: usize,
    stride: usize,
) -> Result<RenderedImage> {
    if stride == 0 {
        return Err(Error::domain("stride must be >= 1"));
    }
    let cols: Vec<usize> = (0..intr.width).step_by(stride).collect();
    let rows: Vec<usize> = (0..intr.height).step_by(stride).collect();
    let source: Vec<(usize, usize)> = rows.iter().flat_map(|&r| cols.iter().map(move |&c| (c, r))).collect();
    let pixels = source
        .par_iter()
        .map(|&(c, r)| -> Result<RenderBuffers> {
            match pixel_ray(grid, intr, pose, c, r)? {
                Some(ray) => Ok(render_ray(field, &sample_ray(&ray, n_s, false, 0)?)),
                None => Ok(RenderBuffers::default()),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RenderedImage {
        width: cols.len(),
        height: rows.len(),
        pixels,
        source,
    })
}

/// Outputs of the differentiable renderer for `R` rays of `S` samples each.
pub struct GraphRender {
    pub color: Var,
    pub feature: Var,
    pub depth: Var,
    pub logvar_c: Var,
    pub logvar_f: Var,
    pub logvar_s: Var,
    pub opacity: Var,
    /// Decoded TSDF (truncation units) and its logvar at every sample, `[R*S, 1]`.
    pub point_tsdf: Var,
    pub point_logvar_s: Var,
}

/// Renders equal-length ray sample sets through the graph, differentiable
/// w.r.t. the refined volume `vol` (`[C_Ψ, X, Y, Z]`), decoders and β.
pub fn render_rays_graph(
    cfg: &ModelConfig,
    g: &mut Graph,
    p: &Bound,
    vol: Var,
    grid: &GridSpec,
    trunc: f64,
    rays: &[RaySamples],
) -> Result<GraphRender> {
    let r = rays.len();
    let s = rays.first().map(RaySamples::len).unwrap_or(0);
    if r == 0 || s == 0 || rays.iter().any(|x| x.len() != s) {
        return Err(Error::shape("render_rays_graph", "need rays with equal, nonzero sample counts"));
    }
    let stencils: Vec<_> = rays
        .iter()
        .flat_map(|ray| ray.xs.iter().map(|x| trilinear_stencil_clamped(grid, x).0))
        .collect();
    let feats = g.trilinear_sample(vol, &stencils)?;
    let (color, lc) = decode_graph(cfg, g, p, feats, Head::Vis)?;
    let (feature, lf) = decode_graph(cfg, g, p, feats, Head::Sem)?;
    let (tsdf, ls) = decode_graph(cfg, g, p, feats, Head::Geo)?;
    let log_beta = p.get(crate::field::LOG_BETA);
    let beta = g.exp(log_beta);
    let sdf = g.scale(tsdf, trunc);
    let sigma = g.laplace_density(sdf, beta)?;
    let sigma = g.reshape(sigma, &[r, s])?;
    let deltas = Tensor::new(vec![r, s], rays.iter().flat_map(|x| x.deltas.iter().copied()).collect())?;
    let deltas = g.constant(deltas);
    let tau = g.mul(sigma, deltas)?;
    let w = g.render_weights(tau)?;
    let ts = Tensor::new(vec![r * s, 1], rays.iter().flat_map(|x| x.ts.iter().copied()).collect())?;
    let ts = g.constant(ts);
    let ones = g.constant(Tensor::filled(&[r * s, 1], 1.0));
    Ok(GraphRender {
        color: g.ray_reduce(w, color)?,
        feature: g.ray_reduce(w, feature)?,
        depth: g.ray_reduce(w, ts)?,
        logvar_c: g.ray_reduce(w, lc)?,
        logvar_f: g.ray_reduce(w, lf)?,
        logvar_s: g.ray_reduce(w, ls)?,
        opacity: g.ray_reduce(w, ones)?,
        point_tsdf: tsdf,
        point_logvar_s: ls,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check_sampled, ParamStore};
    use crate::field::Model;
    use crate::scene::{ground_truth_tsdf, presets};

    #[test]
    fn density_examples() {
        assert!((density(0.0, 0.1) - 5.0).abs() < 1e-12);
        assert!((density(-1e-12, 0.1) - 5.0).abs() < 1e-9);
        assert!((density(-50.0, 0.1) - 10.0).abs() < 1e-12);
        assert!((density(0.1, 0.1) - 5.0 * (-1f64).exp()).abs() < 1e-12);
        assert!((density(0.1, 0.1) - 1.8394).abs() < 1e-4);
    }

    #[test]
    fn midpoint_and_stratified_samples() {
        let ray = Ray::new(Vec3::zeros(), Vec3::z(), 0.0, 1.0).unwrap();
        let s = sample_ray(&ray, 4, false, 0).unwrap();
        assert_eq!(s.ts, vec![0.125, 0.375, 0.625, 0.875]);
        assert_eq!(s.deltas, vec![0.25, 0.25, 0.25, 0.125]);
        let a = sample_ray(&ray, 16, true, 9).unwrap();
        assert_eq!(a, sample_ray(&ray, 16, true, 9).unwrap());
        for (i, t) in a.ts.iter().enumerate() {
            assert!(*t >= i as f64 / 16.0 && *t < (i + 1) as f64 / 16.0);
        }
        assert!(a.deltas.iter().all(|&d| d > 0.0));
        assert!(sample_ray(&ray, 1, false, 0).is_err());
    }

    fn flat_batch(n: usize, sdf: f64) -> PointBatch {
        PointBatch {
            sdf: vec![sdf; n],
            color: (0..3 * n).map(|i| (i % 7) as f64 / 7.0).collect(),
            feature: vec![0.5; 2 * n],
            feature_dim: 2,
            logvar_c: vec![-1.0; n],
            logvar_f: vec![-2.0; n],
            logvar_s: vec![-3.0; n],
        }
    }

    #[test]
    fn zero_density_renders_nothing() {
        let ts = [0.1, 0.2, 0.3];
        let w = compositing_weights(&[0.0; 3], &[0.1; 3]);
        let out = composite(&ts, &w, &flat_batch(3, 0.0));
        assert_eq!(out.opacity, 0.0);
        assert_eq!(out.depth, 0.0);
        assert_eq!(out.color, [0.0; 3]);
    }

    #[test]
    fn opaque_first_sample_dominates() {
        let ts = [0.4, 0.6, 0.8];
        let w = compositing_weights(&[1e6, 5.0, 5.0], &[0.2; 3]);
        let pts = flat_batch(3, 0.0);
        let out = composite(&ts, &w, &pts);
        assert!((out.depth - 0.4).abs() < 1e-9);
        for k in 0..3 {
            assert!((out.color[k] - pts.color[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn weight_identities_and_linearity() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = 20;
            let sigma: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..30.0)).collect();
            let deltas: Vec<f64> = (0..n).map(|_| r.gen_range(0.001..0.1)).collect();
            let w = compositing_weights(&sigma, &deltas);
            let prod: f64 = sigma.iter().zip(&deltas).map(|(s, d)| (-(s * d)).exp()).product();
            let total: f64 = w.iter().sum();
            assert!((total - (1.0 - prod)).abs() < 1e-12);
            assert!(w.iter().all(|&x| x >= 0.0));
            // transmittance T_i = 1 - sum_{j<i} w_j never increases
            let mut t = 1.0;
            for x in &w {
                let next = t - x;
                assert!(next <= t + 1e-15);
                t = next;
            }
            let ts: Vec<f64> = (0..n).map(|i| i as f64).collect();
            let a = flat_batch(n, 0.0);
            let mut b = flat_batch(n, 0.0);
            b.color.iter_mut().for_each(|c| *c = r.gen_range(0.0..1.0));
            let mut ab = a.clone();
            for i in 0..ab.color.len() {
                ab.color[i] = a.color[i] + b.color[i];
            }
            let (ra, rb, rab) = (composite(&ts, &w, &a), composite(&ts, &w, &b), composite(&ts, &w, &ab));
            for k in 0..3 {
                assert!((ra.color[k] + rb.color[k] - rab.color[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn graph_weights_match_plain_compositing() {
        let mut g = Graph::new();
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let tau: Vec<f64> = (0..12).map(|_| r.gen_range(0.0..2.0)).collect();
        let t = g.constant(Tensor::new(vec![3, 4], tau.clone()).unwrap());
        let w = g.render_weights(t).unwrap();
        for ray in 0..3 {
            let plain = compositing_weights(&tau[ray * 4..ray * 4 + 4], &[1.0; 4]);
            for i in 0..4 {
                assert!((g.value(w).data[ray * 4 + i] - plain[i]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn stride_selects_pixels_and_matches_single_rays() {
        let scene = presets::single_sphere(Vec3::zeros(), 0.3);
        let grid = GridSpec::new([-0.5; 3], 1.0 / 16.0, [16; 3]).unwrap();
        let tsdf = ground_truth_tsdf(&scene, &grid, 0.1).unwrap();
        let sampler = TsdfSampler {
            tsdf,
            trunc: 0.1,
            beta: 0.01,
            color: [0.2, 0.4, 0.6],
        };
        let intr = CameraIntrinsics::from_fov(4, 4, 40.0).unwrap();
        let pose = Pose::look_at(Vec3::new(0.0, -1.5, 0.2), Vec3::zeros()).unwrap();
        let img = render_image(&sampler, &grid, &pose, &intr, 32, 2).unwrap();
        assert_eq!((img.width, img.height), (2, 2));
        assert_eq!(img.source, vec![(0, 0), (2, 0), (0, 2), (2, 2)]);
        let full = render_image(&sampler, &grid, &pose, &intr, 32, 1).unwrap();
        for (i, &(c, r)) in img.source.iter().enumerate() {
            let ray = pixel_ray(&grid, &intr, &pose, c, r).unwrap().unwrap();
            let single = render_ray(&sampler, &sample_ray(&ray, 32, false, 0).unwrap());
            assert_eq!(img.pixels[i], single);
            assert_eq!(full.pixels[r * 4 + c], single);
        }
        let odd = CameraIntrinsics::from_fov(9, 7, 40.0).unwrap();
        let img = render_image(&sampler, &grid, &pose, &odd, 8, 4).unwrap();
        assert_eq!((img.width, img.height), (3, 2));
    }

    #[test]
    fn ground_truth_depth_matches_analytic_sphere() {
        let (c, radius) = (Vec3::new(0.03, -0.02, 0.01), 0.3);
        let scene = presets::single_sphere(c, radius);
        let grid = GridSpec::new([-0.5; 3], 1.0 / 32.0, [32; 3]).unwrap();
        let trunc = 0.1;
        let sampler = TsdfSampler {
            tsdf: ground_truth_tsdf(&scene, &grid, trunc).unwrap(),
            trunc,
            beta: 0.1 * grid.voxel_size,
            color: [1.0; 3],
        };
        let intr = CameraIntrinsics::from_fov(24, 18, 50.0).unwrap();
        let pose = Pose::look_at(Vec3::new(1.1, 0.7, 0.5), c).unwrap();
        let (mut hits, mut good) = (0, 0);
        for row in 0..18 {
            for col in 0..24 {
                let ray = pixel_to_ray(&intr, &pose, (col as f64 + 0.5, row as f64 + 0.5)).unwrap();
                let oc = ray.origin - c;
                let b = oc.dot(&ray.direction);
                let disc = b * b - (oc.norm_squared() - radius * radius);
                if disc < 0.0 {
                    continue;
                }
                let t_hit = -b - disc.sqrt();
                let clipped = clip_to_grid(&grid, &ray).unwrap();
                let out = render_ray(&sampler, &sample_ray(&clipped, 512, false, 0).unwrap());
                hits += 1;
                // rendered depth is ray distance; compare along the ray
                if (out.depth / out.opacity.max(1e-12) - t_hit).abs() < grid.voxel_size && out.opacity > 0.5 {
                    good += 1;
                }
            }
        }
        assert!(hits > 50);
        assert!(good as f64 >= 0.95 * hits as f64, "{good}/{hits}");
    }

    #[test]
    fn graph_renderer_matches_inference_renderer() {
        let cfg = ModelConfig {
            encoder_channels: 2,
            refine_channels: 3,
            hidden: 5,
            feature_dim: 3,
            count_cap: 10.0,
            beta_init: 0.05,
        };
        let model = Model::init(cfg, 4).unwrap();
        let grid = GridSpec::new([0.0; 3], 0.125, [8; 3]).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let input = VoxelVolume::from_data(
            grid,
            cfg.input_channels(),
            (0..grid.n_voxels() * cfg.input_channels()).map(|_| r.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let field = model.field_from_input(&input, 0.2, None).unwrap();
        let rays: Vec<RaySamples> = (0..3)
            .map(|i| {
                let ray = Ray::new(Vec3::new(0.1 + 0.2 * i as f64, -0.5, 0.4), Vec3::new(0.1, 1.0, 0.2), 0.0, f64::INFINITY).unwrap();
                sample_ray(&clip_to_grid(&grid, &ray).unwrap(), 10, true, i).unwrap()
            })
            .collect();
        let mut g = Graph::new();
        let p = ParamStore {
            tensors: field.decoders.tensors.clone(),
        }
        .bind(&mut g, false);
        let d = grid.dims;
        let vol = g.constant(Tensor::new(vec![3, d[0], d[1], d[2]], field.refined.to_channel_first()).unwrap());
        let out = render_rays_graph(&cfg, &mut g, &p, vol, &grid, 0.2, &rays).unwrap();
        for (i, rs) in rays.iter().enumerate() {
            let plain = render_ray(&field, rs);
            for k in 0..3 {
                assert!((g.value(out.color).data[i * 3 + k] - plain.color[k]).abs() < 1e-12);
                assert!((g.value(out.feature).data[i * 3 + k] - plain.feature[k]).abs() < 1e-12);
            }
            assert!((g.value(out.depth).data[i] - plain.depth).abs() < 1e-12);
            assert!((g.value(out.opacity).data[i] - plain.opacity).abs() < 1e-12);
            assert!((g.value(out.logvar_s).data[i] - plain.logvar_s).abs() < 1e-12);
        }
    }

    #[test]
    fn color_loss_gradient_wrt_beta_and_decoders() {
        let cfg = ModelConfig {
            encoder_channels: 2,
            refine_channels: 3,
            hidden: 5,
            feature_dim: 3,
            count_cap: 10.0,
            beta_init: 0.05,
        };
        let model = Model::init(cfg, 9).unwrap();
        let grid = GridSpec::new([0.0; 3], 0.125, [8; 3]).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let input = VoxelVolume::from_data(
            grid,
            cfg.input_channels(),
            (0..grid.n_voxels() * cfg.input_channels()).map(|_| r.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let field = model.field_from_input(&input, 0.2, None).unwrap();
        let rays: Vec<RaySamples> = (0..4)
            .map(|i| {
                let ray = Ray::new(Vec3::new(0.2 + 0.15 * i as f64, -0.5, 0.5), Vec3::new(0.05, 1.0, -0.1), 0.0, f64::INFINITY).unwrap();
                sample_ray(&clip_to_grid(&grid, &ray).unwrap(), 12, false, 0).unwrap()
            })
            .collect();
        let names: Vec<String> = field.decoders.tensors.keys().cloned().collect();
        // zero-initialized biases would put relu inputs exactly on the kink
        let params: Vec<Tensor> = names
            .iter()
            .map(|n| {
                let mut t = field.decoders.tensors[n].clone();
                if n.ends_with(".b") {
                    t.data.iter_mut().for_each(|x| *x += r.gen_range(-0.1..0.1));
                }
                t
            })
            .collect();
        let refined = field.refined.to_channel_first();
        let target: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37) % 1.0).collect();
        let e = grad_check_sampled(
            |g, v| {
                let p = Bound::from_pairs(names.iter().cloned().zip(v.iter().copied()));
                let vol = g.constant(Tensor::new(vec![3, 8, 8, 8], refined.clone())?);
                let out = render_rays_graph(&cfg, g, &p, vol, &grid, 0.2, &rays)?;
                let t = g.constant(Tensor::new(vec![4, 3], target.clone())?);
                let diff = g.sub(out.color, t)?;
                let sq = g.mul(diff, diff)?;
                g.sum(sq, None)
            },
            &params,
            1e-5,
            12,
            3,
        )
        .unwrap();
        assert!(e < 1e-4, "{e}");
    }
}
