//! Uncertainty-aware supervision and the optimization loop.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamConfig, AdamState, Bound, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::field::{refine_graph, Model, ModelConfig};
use crate::fusion::{accumulate_assignments, assemble_input, feature_assignments, integrate_depth, FusionState};
use crate::geom::{trilinear_stencil_clamped, GridSpec};
use crate::render::{pixel_ray, render_rays_graph, sample_ray, RaySamples};
use crate::scene::{ground_truth_tsdf, mix_seed, FrameObservation, SyntheticScene};
use crate::volume::VoxelVolume;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub m_ref: usize,
    pub m_tgt: usize,
    pub n_ray: usize,
    pub n_s: usize,
    /// Probability that a sample uses the heteroscedastic form.
    pub p: f64,
    pub lambda_rgb: f64,
    pub lambda_feat: f64,
    pub lambda_tsdf: f64,
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
    /// Write a checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            m_ref: 8,
            m_tgt: 2,
            n_ray: 256,
            n_s: 64,
            p: 0.5,
            lambda_rgb: 1.0,
            lambda_feat: 1.0,
            lambda_tsdf: 1.0,
            lr: 1e-3,
            steps: 2000,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::domain(format!("mask probability {} outside [0, 1]", self.p)));
        }
        if self.m_ref == 0 || self.m_tgt == 0 || self.n_ray == 0 {
            return Err(Error::domain("frame and ray counts must be >= 1"));
        }
        if self.n_s < 2 {
            return Err(Error::domain("need at least two samples per ray"));
        }
        for (name, w) in [
            ("lambda_rgb", self.lambda_rgb),
            ("lambda_feat", self.lambda_feat),
            ("lambda_tsdf", self.lambda_tsdf),
        ] {
            if !(w >= 0.0) {
                return Err(Error::domain(format!("{name} must be >= 0")));
            }
        }
        if !(self.lr > 0.0) {
            return Err(Error::domain("learning rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaseLoss {
    L1,
    L2,
}

/// Per-sample base loss summed over channels: `[P, C]` pairs -> `[P, 1]`.
pub fn base_loss(g: &mut Graph, y: Var, y_hat: Var, base: BaseLoss) -> Result<Var> {
    if g.shape(y) != g.shape(y_hat) || g.shape(y).len() != 2 {
        return Err(Error::shape(
            "base_loss",
            format!("{:?} vs {:?}", g.shape(y), g.shape(y_hat)),
        ));
    }
    let d = g.sub(y_hat, y)?;
    let e = match base {
        BaseLoss::L1 => g.abs(d),
        BaseLoss::L2 => g.mul(d, d)?,
    };
    let s = g.sum(e, Some(1))?;
    let n = g.shape(y)[0];
    g.reshape(s, &[n, 1])
}

/// `½ e^{-u} L + ½ u` per sample, `[P, 1]`.
pub fn heteroscedastic_terms(g: &mut Graph, l: Var, u: Var) -> Result<Var> {
    if g.shape(l) != g.shape(u) {
        return Err(Error::shape("heteroscedastic", "one log-variance per sample"));
    }
    let neg = g.scale(u, -1.0);
    let prec = g.exp(neg);
    let a = g.mul(prec, l)?;
    let s = g.add(a, u)?;
    Ok(g.scale(s, 0.5))
}

/// Heteroscedastic loss averaged over the batch.
pub fn heteroscedastic_loss(g: &mut Graph, y: Var, y_hat: Var, u: Var, base: BaseLoss) -> Result<Var> {
    let l = base_loss(g, y, y_hat, base)?;
    let t = heteroscedastic_terms(g, l, u)?;
    g.mean(t, None)
}

/// Seeded Bernoulli(p) mask.
pub fn bernoulli_mask(n: usize, p: f64, seed: u64) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen::<f64>() < p).collect()
}

/// Per-sample blend `m L^U + (1 - m) L`, `[P, 1]`, using an explicit mask.
pub fn masked_terms(g: &mut Graph, l: Var, u: Var, mask: &[bool]) -> Result<Var> {
    let n = g.shape(l)[0];
    if mask.len() != n {
        return Err(Error::shape("masked_loss", "mask length differs from sample count"));
    }
    let hetero = heteroscedastic_terms(g, l, u)?;
    let m = g.constant(Tensor::new(vec![n, 1], mask.iter().map(|&b| b as u8 as f64).collect())?);
    let inv = g.constant(Tensor::new(vec![n, 1], mask.iter().map(|&b| (!b) as u8 as f64).collect())?);
    let a = g.mul(m, hetero)?;
    let b = g.mul(inv, l)?;
    g.add(a, b)
}

/// Sum over samples of the Bernoulli blend; returns the loss and the mask used.
pub fn masked_loss(
    g: &mut Graph,
    y: Var,
    y_hat: Var,
    u: Var,
    p: f64,
    base: BaseLoss,
    seed: u64,
) -> Result<(Var, Vec<bool>)> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::domain(format!("mask probability {p} outside [0, 1]")));
    }
    let l = base_loss(g, y, y_hat, base)?;
    let mask = bernoulli_mask(g.shape(l)[0], p, seed);
    let t = masked_terms(g, l, u, &mask)?;
    Ok((g.sum(t, None)?, mask))
}

/// Frames of one scene plus its ground-truth TSDF on the training grid.
#[derive(Debug, Clone)]
pub struct TrainScene {
    pub frames: Vec<FrameObservation>,
    pub grid: GridSpec,
    pub trunc: f64,
    pub gt_tsdf: VoxelVolume,
}

impl TrainScene {
    pub fn new(scene: &SyntheticScene, frames: Vec<FrameObservation>, grid: GridSpec, trunc: f64) -> Result<Self> {
        let gt_tsdf = ground_truth_tsdf(scene, &grid, trunc)?;
        Ok(Self {
            frames,
            grid,
            trunc,
            gt_tsdf,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub reference: Vec<usize>,
    pub target: Vec<usize>,
    /// Depth-only fusion of the reference frames (feature statistics empty).
    pub state: FusionState,
    /// Pixel -> voxel assignments of each reference frame.
    pub assignments: Vec<Vec<(usize, usize)>>,
    /// `(frame, pixel)` of each ray.
    pub pixels: Vec<(usize, usize)>,
    pub rays: Vec<RaySamples>,
    /// `[R, 3]`.
    pub rgb: Vec<f64>,
    /// `[R, C_F]`.
    pub feature: Vec<f64>,
    pub feature_dim: usize,
    /// Ground-truth TSDF at every ray sample, `[R * N_s]`.
    pub tsdf: Vec<f64>,
}

pub fn sample_batch(scene: &TrainScene, feat_channels: usize, cfg: &TrainConfig, seed: u64) -> Result<Batch> {
    cfg.validate()?;
    let n = scene.frames.len();
    if n < cfg.m_ref + cfg.m_tgt {
        return Err(Error::domain(format!(
            "need {} frames, scene has {n}",
            cfg.m_ref + cfg.m_tgt
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let reference = order[..cfg.m_ref].to_vec();
    let target = order[cfg.m_ref..cfg.m_ref + cfg.m_tgt].to_vec();

    let mut state = FusionState::new(scene.grid, feat_channels, scene.trunc)?;
    let mut assignments = Vec::with_capacity(reference.len());
    for &f in &reference {
        let frame = &scene.frames[f];
        integrate_depth(&mut state, frame);
        assignments.push(feature_assignments(&scene.grid, frame, scene.trunc)?);
    }

    let c_f = scene.frames[target[0]].feature_dim;
    let mut out = Batch {
        reference,
        target: target.clone(),
        state,
        assignments,
        pixels: Vec::new(),
        rays: Vec::new(),
        rgb: Vec::new(),
        feature: Vec::new(),
        feature_dim: c_f,
        tsdf: Vec::new(),
    };
    for &f in &target {
        let frame = &scene.frames[f];
        let intr = &frame.intr;
        let mut candidates = Vec::new();
        for px in frame.valid_pixels() {
            if let Some(ray) = pixel_ray(&scene.grid, intr, &frame.pose, px % intr.width, px / intr.width)? {
                candidates.push((px, ray));
            }
        }
        if candidates.is_empty() {
            return Err(Error::domain(format!("target frame {f} sees no valid pixel inside the grid")));
        }
        for _ in 0..cfg.n_ray {
            let (px, ray) = &candidates[rng.gen_range(0..candidates.len())];
            let samples = sample_ray(ray, cfg.n_s, true, rng.gen())?;
            for x in &samples.xs {
                let (st, _) = trilinear_stencil_clamped(&scene.grid, x);
                out.tsdf.push(scene.gt_tsdf.apply_stencil(&st)[0]);
            }
            out.rgb.extend_from_slice(&frame.pixel_rgb(*px));
            out.feature.extend_from_slice(frame.pixel_teacher(*px));
            out.pixels.push((f, *px));
            out.rays.push(samples);
        }
    }
    Ok(out)
}

/// Loss terms as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub rgb: Var,
    pub feat: Var,
    pub tsdf: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub total: f64,
    pub rgb: f64,
    pub feat: f64,
    pub tsdf: f64,
}

/// Graph-side outputs needed by [`total_loss`].
#[derive(Debug, Clone, Copy)]
pub struct FieldOutputs {
    pub color: Var,
    pub logvar_c: Var,
    pub feature: Var,
    pub logvar_f: Var,
    pub point_tsdf: Var,
    pub point_logvar_s: Var,
}

/// Weighted sum of the three masked terms, each averaged over its samples.
pub fn total_loss(g: &mut Graph, out: &FieldOutputs, batch: &Batch, cfg: &TrainConfig, seed: u64) -> Result<LossVars> {
    let r = batch.rays.len();
    let term = |g: &mut Graph, pred: Var, u: Var, target: &[f64], width: usize, base: BaseLoss, k: u64| -> Result<Var> {
        let rows = target.len() / width;
        let y = g.constant(Tensor::new(vec![rows, width], target.to_vec())?);
        let l = base_loss(g, y, pred, base)?;
        let mask = bernoulli_mask(rows, cfg.p, mix_seed(seed, k));
        let t = masked_terms(g, l, u, &mask)?;
        g.mean(t, None)
    };
    let rgb = term(g, out.color, out.logvar_c, &batch.rgb, 3, BaseLoss::L2, 1)?;
    let feat = term(g, out.feature, out.logvar_f, &batch.feature, batch.feature_dim, BaseLoss::L1, 2)?;
    let tsdf = term(g, out.point_tsdf, out.point_logvar_s, &batch.tsdf, 1, BaseLoss::L2, 3)?;
    debug_assert_eq!(batch.tsdf.len(), r * batch.rays[0].len());
    let a = g.scale(rgb, cfg.lambda_rgb);
    let b = g.scale(feat, cfg.lambda_feat);
    let c = g.scale(tsdf, cfg.lambda_tsdf);
    let ab = g.add(a, b)?;
    let total = g.add(ab, c)?;
    Ok(LossVars { total, rgb, feat, tsdf })
}

/// The network input of a batch, differentiable w.r.t. the encoder through
/// the recorded pixel -> voxel assignments.
pub fn input_graph(model_cfg: &ModelConfig, g: &mut Graph, p: &Bound, scene: &TrainScene, batch: &Batch) -> Result<Var> {
    let enc = model_cfg.encoder();
    let c = model_cfg.encoder_channels;
    let grid = scene.grid;
    let nv = grid.n_voxels();
    let mut state = batch.state.clone();
    let mut gathered = Vec::new();
    let mut voxels = Vec::new();
    for (k, &f) in batch.reference.iter().enumerate() {
        let frame = &scene.frames[f];
        let feats = enc.forward(g, p, &frame.rgb, frame.intr.width, frame.intr.height)?;
        let feats = g.transpose(feats)?;
        let asg = &batch.assignments[k];
        accumulate_assignments(&mut state, asg, &g.value(feats).data);
        if asg.is_empty() {
            continue;
        }
        let pix: Vec<usize> = asg.iter().map(|&(_, px)| px).collect();
        gathered.push(g.gather(feats, &pix)?);
        voxels.extend(asg.iter().map(|&(v, _)| v));
    }
    let assembled = assemble_input(&state, model_cfg.count_cap);
    let (mean, var) = if gathered.is_empty() {
        (g.constant(Tensor::zeros(&[nv, c])), g.constant(Tensor::zeros(&[nv, 1])))
    } else {
        let mut inv = vec![0.0; nv * c];
        for v in 0..nv {
            let n = state.count.data[v];
            if n > 0.0 {
                inv[v * c..(v + 1) * c].iter_mut().for_each(|x| *x = 1.0 / n);
            }
        }
        let inv = g.constant(Tensor::new(vec![nv, c], inv)?);
        let all = g.concat(&gathered, 0)?;
        let sums = g.scatter_add(all, &voxels, nv)?;
        let mean = g.mul(sums, inv)?;
        // population variance E[f^2] - mean^2, averaged over channels
        let sq = g.mul(all, all)?;
        let sq = g.scatter_add(sq, &voxels, nv)?;
        let ex2 = g.mul(sq, inv)?;
        let m2 = g.mul(mean, mean)?;
        let var = g.sub(ex2, m2)?;
        let var = g.mean(var, Some(1))?;
        (mean, g.reshape(var, &[nv, 1])?)
    };
    let mut stats = Vec::with_capacity(nv * 2);
    for v in 0..nv {
        stats.extend_from_slice(&assembled.at(v)[c..c + 2]);
    }
    let stats = g.constant(Tensor::new(vec![nv, 2], stats)?);
    let x = g.concat(&[mean, stats, var], 1)?;
    let x = g.transpose(x)?;
    let d = grid.dims;
    g.reshape(x, &[c + 3, d[0], d[1], d[2]])
}

/// Builds the full loss of one batch.
pub fn batch_loss(model_cfg: &ModelConfig, g: &mut Graph, p: &Bound, scene: &TrainScene, batch: &Batch, cfg: &TrainConfig, seed: u64) -> Result<LossVars> {
    let x = input_graph(model_cfg, g, p, scene, batch)?;
    let vol = refine_graph(model_cfg, g, p, x, None)?;
    let r = render_rays_graph(model_cfg, g, p, vol, &scene.grid, scene.trunc, &batch.rays)?;
    let out = FieldOutputs {
        color: r.color,
        logvar_c: r.logvar_c,
        feature: r.feature,
        logvar_f: r.logvar_f,
        point_tsdf: r.point_tsdf,
        point_logvar_s: r.point_logvar_s,
    };
    total_loss(g, &out, batch, cfg, seed)
}

pub struct FitResult {
    pub model: Model,
    pub history: Vec<LossRecord>,
    pub checkpoints: Vec<PathBuf>,
}

/// Adam over seeded batches, cycling through `scenes`.
pub fn fit(scenes: &[TrainScene], model: Model, cfg: &TrainConfig, checkpoint_dir: Option<&Path>) -> Result<FitResult> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::domain("need at least one training scene"));
    }
    let mut model = model;
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut state = AdamState::default();
    let mut history = Vec::with_capacity(cfg.steps);
    let mut checkpoints = Vec::new();
    for step in 0..cfg.steps {
        let scene = &scenes[step % scenes.len()];
        let seed = mix_seed(cfg.seed, step as u64);
        let batch = sample_batch(scene, model.config.encoder_channels, cfg, seed)?;
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, true);
        let loss = batch_loss(&model.config, &mut g, &p, scene, &batch, cfg, seed)?;
        let rec = LossRecord {
            step,
            total: g.value(loss.total).item(),
            rgb: g.value(loss.rgb).item(),
            feat: g.value(loss.feat).item(),
            tsdf: g.value(loss.tsdf).item(),
        };
        if !rec.total.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!("loss {} (rgb {}, feat {}, tsdf {})", rec.total, rec.rgb, rec.feat, rec.tsdf),
            });
        }
        let grads = g.backward(loss.total)?;
        let grads = p.collect(&grads);
        if let Some((name, _)) = grads.iter().find(|(_, t)| t.data.iter().any(|x| !x.is_finite())) {
            return Err(Error::Divergence {
                step,
                detail: format!("non-finite gradient for {name}"),
            });
        }
        adam_step(&mut model.params, &grads, &mut state, &adam)?;
        history.push(rec);
        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                let path = dir.join(format!("checkpoint_{:06}.vfck", step + 1));
                model.params.save(&path)?;
                checkpoints.push(path);
            }
        }
    }
    Ok(FitResult {
        model,
        history,
        checkpoints,
    })
}

/// Trailing moving average with the given window.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for i in 0..values.len() {
        acc += values[i];
        if i >= window {
            acc -= values[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

/// Fits `y = w x + c` with log-variance `u = a x + d` on data with Gaussian
/// noise of variance `sigma2` and returns the mean predicted `exp(u)`.
pub fn calibrate_1d(sigma2: f64, n: usize, steps: usize, lr: f64, seed: u64) -> Result<f64> {
    use rand_distr::{Distribution, Normal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma2.sqrt()).map_err(|e| Error::domain(e.to_string()))?;
    let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let ys: Vec<f64> = xs.iter().map(|x| 0.7 * x - 0.2 + noise.sample(&mut rng)).collect();
    let mut params = crate::autodiff::ParamStore::new();
    for name in ["w", "c", "a", "d"] {
        params.insert(name, Tensor::scalar(0.0));
    }
    let adam = AdamConfig {
        lr,
        ..AdamConfig::default()
    };
    let mut state = AdamState::default();
    let xt = Tensor::new(vec![n, 1], xs.clone())?;
    let yt = Tensor::new(vec![n, 1], ys)?;
    let predict = |g: &mut Graph, p: &Bound, x: Var| -> Result<(Var, Var)> {
        let wx = g.mul(x, p.get("w"))?;
        let y_hat = g.add(wx, p.get("c"))?;
        let ax = g.mul(x, p.get("a"))?;
        let u = g.add(ax, p.get("d"))?;
        Ok((y_hat, u))
    };
    for _ in 0..steps {
        let mut g = Graph::new();
        let p = params.bind(&mut g, true);
        let x = g.constant(xt.clone());
        let y = g.constant(yt.clone());
        let (y_hat, u) = predict(&mut g, &p, x)?;
        let loss = heteroscedastic_loss(&mut g, y, y_hat, u, BaseLoss::L2)?;
        let grads = g.backward(loss)?;
        adam_step(&mut params, &p.collect(&grads), &mut state, &adam)?;
    }
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let x = g.constant(xt);
    let (_, u) = predict(&mut g, &p, x)?;
    Ok(g.value(u).data.iter().map(|u| u.exp()).sum::<f64>() / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check_sampled;
    use crate::geom::{CameraIntrinsics, Vec3};
    use crate::scene::{orbit_poses, presets, render_frame, SensorConfig};

    fn scalar_loss(l: f64, u: f64) -> f64 {
        let mut g = Graph::new();
        let y = g.constant(Tensor::new(vec![1, 1], vec![0.0]).unwrap());
        let yh = g.constant(Tensor::new(vec![1, 1], vec![l.sqrt()]).unwrap());
        let uv = g.constant(Tensor::new(vec![1, 1], vec![u]).unwrap());
        let out = heteroscedastic_loss(&mut g, y, yh, uv, BaseLoss::L2).unwrap();
        g.value(out).item()
    }

    #[test]
    fn heteroscedastic_examples() {
        assert!((scalar_loss(0.36, 0.0) - 0.18).abs() < 1e-12);
        let v = scalar_loss(1.0, 2f64.ln());
        assert!((v - (0.25 + 0.5 * 2f64.ln())).abs() < 1e-12);
        assert!((v - 0.59657).abs() < 1e-5);
    }

    #[test]
    fn minimizer_is_log_of_base_loss() {
        for &l in &[0.01, 0.3, 1.0, 4.5] {
            // golden-section search over u
            let (mut a, mut b) = (-10.0, 5.0);
            let phi = (5f64.sqrt() - 1.0) / 2.0;
            for _ in 0..200 {
                let c = b - phi * (b - a);
                let d = a + phi * (b - a);
                if scalar_loss(l, c) < scalar_loss(l, d) {
                    b = d;
                } else {
                    a = c;
                }
            }
            let u = 0.5 * (a + b);
            assert!((u - f64::ln(l)).abs() < 1e-5, "{l}: {u}");
        }
    }

    fn random_problem(g: &mut Graph, n: usize, seed: u64) -> (Var, Var, Var, Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<f64> = (0..n * 2).map(|_| r.gen_range(-1.0..1.0)).collect();
        let yh: Vec<f64> = (0..n * 2).map(|_| r.gen_range(-1.0..1.0)).collect();
        let u: Vec<f64> = (0..n).map(|_| r.gen_range(-2.0..2.0)).collect();
        let yv = g.constant(Tensor::new(vec![n, 2], y.clone()).unwrap());
        let yhv = g.param(Tensor::new(vec![n, 2], yh.clone()).unwrap());
        let uv = g.param(Tensor::new(vec![n, 1], u.clone()).unwrap());
        (yv, yhv, uv, y, yh, u)
    }

    fn hand_terms(y: &[f64], yh: &[f64], u: &[f64], base: BaseLoss) -> Vec<(f64, f64)> {
        (0..u.len())
            .map(|i| {
                let l: f64 = (0..2)
                    .map(|k| {
                        let d = yh[2 * i + k] - y[2 * i + k];
                        match base {
                            BaseLoss::L1 => d.abs(),
                            BaseLoss::L2 => d * d,
                        }
                    })
                    .sum();
                (0.5 * (-u[i]).exp() * l + 0.5 * u[i], l)
            })
            .collect()
    }

    #[test]
    fn masked_loss_extremes_and_hand_mix() {
        for base in [BaseLoss::L1, BaseLoss::L2] {
            let mut g = Graph::new();
            let (y, yh, u, yd, yhd, ud) = random_problem(&mut g, 30, 1);
            let terms = hand_terms(&yd, &yhd, &ud, base);
            let (all, m1) = masked_loss(&mut g, y, yh, u, 1.0, base, 3).unwrap();
            assert!(m1.iter().all(|&b| b));
            let want: f64 = terms.iter().map(|t| t.0).sum();
            assert!((g.value(all).item() - want).abs() < 1e-12);
            let (none, m0) = masked_loss(&mut g, y, yh, u, 0.0, base, 3).unwrap();
            assert!(m0.iter().all(|&b| !b));
            let want: f64 = terms.iter().map(|t| t.1).sum();
            assert!((g.value(none).item() - want).abs() < 1e-12);
            let grads = g.backward(none).unwrap();
            assert!(grads.get_or_zeros(u).data.iter().all(|&x| x == 0.0));
            let (half, mask) = masked_loss(&mut g, y, yh, u, 0.5, base, 11).unwrap();
            assert!(mask.iter().any(|&b| b) && mask.iter().any(|&b| !b));
            let want: f64 = terms.iter().zip(&mask).map(|(t, &m)| if m { t.0 } else { t.1 }).sum();
            assert!((g.value(half).item() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_gradient_isolated_to_heteroscedastic_samples() {
        let mut g = Graph::new();
        let (y, yh, u, ..) = random_problem(&mut g, 40, 2);
        let (loss, mask) = masked_loss(&mut g, y, yh, u, 0.4, BaseLoss::L2, 5).unwrap();
        let gu = g.backward(loss).unwrap().get_or_zeros(u);
        for (i, &m) in mask.iter().enumerate() {
            if m {
                assert!(gu.data[i] != 0.0);
            } else {
                assert_eq!(gu.data[i], 0.0);
            }
        }
    }

    #[test]
    fn masked_expectation_matches_blend() {
        let mut g = Graph::new();
        let (y, yh, u, yd, yhd, ud) = random_problem(&mut g, 1, 4);
        let (lu, l) = hand_terms(&yd, &yhd, &ud, BaseLoss::L2)[0];
        let p = 0.3;
        let trials = 10_000;
        let mut acc = 0.0;
        for s in 0..trials {
            let (v, _) = masked_loss(&mut g, y, yh, u, p, BaseLoss::L2, s).unwrap();
            acc += g.value(v).item();
        }
        let want = p * lu + (1.0 - p) * l;
        assert!((acc / trials as f64 - want).abs() < 0.02 * want.abs(), "{} vs {want}", acc / trials as f64);
    }

    #[test]
    fn calibration_recovers_noise_variance() {
        for &s2 in &[0.01, 0.04] {
            let v = calibrate_1d(s2, 1024, 2000, 0.01, 3).unwrap();
            assert!((v / s2 - 1.0).abs() < 0.2, "{s2}: {v}");
        }
    }

    pub(crate) fn toy_scene(n_frames: usize, grid_n: usize) -> TrainScene {
        let scene = presets::single_sphere(Vec3::new(0.0, 0.0, 0.0), 0.3);
        let intr = CameraIntrinsics::from_fov(16, 12, 60.0).unwrap();
        let sensor = SensorConfig {
            feature_dim: 3,
            ..SensorConfig::default()
        };
        let frames = orbit_poses(Vec3::zeros(), 1.2, 20.0, n_frames)
            .unwrap()
            .iter()
            .enumerate()
            .map(|(i, p)| render_frame(&scene, p, &intr, &sensor, i as u64).unwrap())
            .collect();
        let vs = 1.0 / grid_n as f64;
        let grid = GridSpec::new([-0.5; 3], vs, [grid_n; 3]).unwrap();
        TrainScene::new(&scene, frames, grid, 3.0 * vs).unwrap()
    }

    fn tiny_model_cfg() -> ModelConfig {
        ModelConfig {
            encoder_channels: 2,
            refine_channels: 3,
            hidden: 6,
            feature_dim: 3,
            count_cap: 8.0,
            beta_init: 0.05,
        }
    }

    fn tiny_train_cfg() -> TrainConfig {
        TrainConfig {
            m_ref: 3,
            m_tgt: 1,
            n_ray: 4,
            n_s: 8,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn batches_are_deterministic_disjoint_and_valid() {
        let scene = toy_scene(6, 8);
        let cfg = tiny_train_cfg();
        let a = sample_batch(&scene, 2, &cfg, 9).unwrap();
        assert_eq!(a, sample_batch(&scene, 2, &cfg, 9).unwrap());
        assert!(a.reference.iter().all(|r| !a.target.contains(r)));
        assert_eq!(a.rays.len(), cfg.m_tgt * cfg.n_ray);
        for &(f, px) in &a.pixels {
            assert!(scene.frames[f].depth[px] > 0.0);
        }
        assert!(a.tsdf.iter().all(|t| (-1.0..=1.0).contains(t)));
        let big = TrainConfig { m_ref: 6, ..cfg };
        assert!(matches!(sample_batch(&scene, 2, &big, 0), Err(Error::Domain(_))));
    }

    #[test]
    fn graph_input_matches_plain_fusion() {
        let scene = toy_scene(6, 8);
        let cfg = tiny_train_cfg();
        let model = Model::init(tiny_model_cfg(), 1).unwrap();
        let batch = sample_batch(&scene, 2, &cfg, 2).unwrap();
        let frames: Vec<FrameObservation> = batch.reference.iter().map(|&f| scene.frames[f].clone()).collect();
        let state = model.fuse(scene.grid, scene.trunc, &frames).unwrap();
        let plain = assemble_input(&state, model.config.count_cap);
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, false);
        let x = input_graph(&model.config, &mut g, &p, &scene, &batch).unwrap();
        let cf = plain.to_channel_first();
        for (a, b) in g.value(x).data.iter().zip(&cf) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_predictions_leave_variance_penalty() {
        let scene = toy_scene(6, 8);
        let cfg = TrainConfig {
            p: 1.0,
            ..tiny_train_cfg()
        };
        let batch = sample_batch(&scene, 2, &cfg, 4).unwrap();
        let r = batch.rays.len();
        let ns = batch.rays[0].len();
        let u0 = -10.0;
        let mut g = Graph::new();
        let out = FieldOutputs {
            color: g.constant(Tensor::new(vec![r, 3], batch.rgb.clone()).unwrap()),
            logvar_c: g.constant(Tensor::filled(&[r, 1], u0)),
            feature: g.constant(Tensor::new(vec![r, 3], batch.feature.clone()).unwrap()),
            logvar_f: g.constant(Tensor::filled(&[r, 1], u0)),
            point_tsdf: g.constant(Tensor::new(vec![r * ns, 1], batch.tsdf.clone()).unwrap()),
            point_logvar_s: g.constant(Tensor::filled(&[r * ns, 1], u0)),
        };
        let l = total_loss(&mut g, &out, &batch, &cfg, 0).unwrap();
        assert!((g.value(l.total).item() - 3.0 * 0.5 * u0).abs() < 1e-12);
        let only_rgb = TrainConfig {
            lambda_feat: 0.0,
            lambda_tsdf: 0.0,
            ..cfg
        };
        let l = total_loss(&mut g, &out, &batch, &only_rgb, 0).unwrap();
        assert_eq!(g.value(l.total).item(), g.value(l.rgb).item());
    }

    #[test]
    fn end_to_end_gradient_reaches_every_group() {
        let scene = toy_scene(6, 8);
        let cfg = tiny_train_cfg();
        let mut model = Model::init(tiny_model_cfg(), 5).unwrap();
        // move off the zero-initialized values so no relu sits on its kink
        let mut r = ChaCha8Rng::seed_from_u64(8);
        for t in model.params.tensors.values_mut() {
            t.data.iter_mut().for_each(|x| *x += r.gen_range(-0.05..0.05));
        }
        let batch = sample_batch(&scene, 2, &cfg, 6).unwrap();
        let names: Vec<String> = model.params.tensors.keys().cloned().collect();
        let params: Vec<Tensor> = names.iter().map(|n| model.params.tensors[n].clone()).collect();
        let mcfg = model.config;
        let f = |g: &mut Graph, v: &[Var]| -> Result<Var> {
            let p = Bound::from_pairs(names.iter().cloned().zip(v.iter().copied()));
            Ok(batch_loss(&mcfg, g, &p, &scene, &batch, &cfg, 1)?.total)
        };
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
        let loss = f(&mut g, &vars).unwrap();
        let grads = g.backward(loss).unwrap();
        for group in ["enc.", "ref.", "dec.", "log_beta"] {
            let norm: f64 = names
                .iter()
                .zip(&vars)
                .filter(|(n, _)| n.starts_with(group))
                .map(|(_, &v)| grads.get_or_zeros(v).data.iter().map(|x| x * x).sum::<f64>())
                .sum();
            assert!(norm > 0.0, "{group}");
        }
        let e = grad_check_sampled(f, &params, 1e-6, 3, 2).unwrap();
        assert!(e < 1e-4, "{e}");
    }

    #[test]
    fn fit_is_deterministic_and_zero_steps_is_identity() {
        let scene = toy_scene(6, 8);
        let model = Model::init(tiny_model_cfg(), 2).unwrap();
        let zero = TrainConfig {
            steps: 0,
            ..tiny_train_cfg()
        };
        let out = fit(&[scene.clone()], model.clone(), &zero, None).unwrap();
        assert_eq!(out.model, model);
        assert!(out.history.is_empty());
        let cfg = TrainConfig {
            steps: 5,
            checkpoint_every: 2,
            lr: 1e-2,
            ..tiny_train_cfg()
        };
        let dir = tempfile::tempdir().unwrap();
        let a = fit(&[scene.clone()], model.clone(), &cfg, Some(dir.path())).unwrap();
        let b = fit(&[scene], model.clone(), &cfg, None).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model, b.model);
        assert_ne!(a.model, model);
        assert_eq!(a.checkpoints.len(), 2);
        let ck = crate::autodiff::ParamStore::load(&a.checkpoints[1]).unwrap();
        assert_eq!(ck.tensors.len(), model.params.tensors.len());
    }

    #[test]
    fn divergence_is_reported() {
        let scene = toy_scene(6, 8);
        let mut model = Model::init(tiny_model_cfg(), 2).unwrap();
        model.params.tensors.get_mut("log_beta").unwrap().data[0] = f64::NAN;
        let cfg = TrainConfig {
            steps: 3,
            ..tiny_train_cfg()
        };
        match fit(&[scene], model, &cfg, None) {
            Err(Error::Divergence { step: 0, .. }) => {}
            Err(e) => panic!("unexpected error {e}"),
            Ok(_) => panic!("expected divergence"),
        }
    }

    #[test]
    fn smoothing_window() {
        assert_eq!(smoothed(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
    }
}
