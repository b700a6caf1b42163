//! Rule-based active object search: initialization views, uncertainty-driven
//! exploration and similarity-driven exploitation against the simulator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{extract_mesh_masked, TriangleMesh};
use crate::field::{Head, Model, UnifiedField};
use crate::fusion::{fuse_frames, merge_states, FusionState};
use crate::geom::{Aabb, CameraIntrinsics, GridSpec, Pose, Vec3};
use crate::query::{
    argmax_voxel, combine_similarity, contrastive_volume, feature_volume, logvar_volume, normalize_uncertainty,
    normalize_volume, quantile_sorted, surface_project, Combine, Normalization, QuerySpec,
};
use crate::scene::{mix_seed, orbit_poses, render_frame, scene_sdf, FrameObservation, SensorConfig, SyntheticScene};
use crate::volume::VoxelVolume;

/// Camera positions must keep at least this clearance from geometry.
pub const CLEARANCE: f64 = 0.05;
const PLACEMENT_ATTEMPTS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LookatPolicy {
    /// Sample among the most visually uncertain surface points.
    Uncertainty,
    /// Sample uniformly among all surface points.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub n_init_views: usize,
    pub n_explore_steps: usize,
    pub min_lookat_distance: f64,
    pub camera_standoff: f64,
    /// Vertices above this quantile of visual uncertainty are look-at candidates.
    pub top_quantile: f64,
    /// Camera elevation above the horizontal for all placements, degrees.
    pub elevation_deg: f64,
    /// Azimuth of the first initialization view, degrees.
    pub init_azimuth_deg: f64,
    /// Angular span covered by the initialization views, degrees.
    pub init_span_deg: f64,
    pub temperature: f64,
    /// Restrict the target search to voxels with |decoded TSDF| below this
    /// value (truncation units).
    pub surface_band: f64,
    pub policy: LookatPolicy,
    pub seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            n_init_views: 4,
            n_explore_steps: 6,
            min_lookat_distance: 0.3,
            camera_standoff: 1.0,
            top_quantile: 0.9,
            elevation_deg: 30.0,
            init_azimuth_deg: 0.0,
            init_span_deg: 360.0,
            temperature: crate::query::DEFAULT_TEMPERATURE,
            surface_band: 0.5,
            policy: LookatPolicy::Uncertainty,
            seed: 0,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_init_views == 0 {
            return Err(Error::domain("need at least one initialization view"));
        }
        if !(self.min_lookat_distance > 0.0 && self.camera_standoff > 0.0) {
            return Err(Error::domain("distances must be positive"));
        }
        if !(self.top_quantile > 0.0 && self.top_quantile < 1.0) {
            return Err(Error::domain("top_quantile must lie in (0, 1)"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::domain("temperature must be positive"));
        }
        if !(self.surface_band > 0.0) {
            return Err(Error::domain("surface_band must be positive"));
        }
        Ok(())
    }
}

/// `n` poses evenly spaced in azimuth on a circle of radius `standoff` around
/// `center`, all looking at it.
pub fn init_views(center: Vec3, n: usize, standoff: f64, elevation_deg: f64) -> Result<Vec<Pose>> {
    init_views_span(center, n, standoff, elevation_deg, 0.0, 360.0)
}

/// As [`init_views`] over an arc of `span_deg` starting at `azimuth_deg`.
pub fn init_views_span(center: Vec3, n: usize, standoff: f64, elevation_deg: f64, azimuth_deg: f64, span_deg: f64) -> Result<Vec<Pose>> {
    if n == 0 {
        return Err(Error::domain("need at least one view"));
    }
    if (span_deg - 360.0).abs() < 1e-12 && azimuth_deg == 0.0 {
        return orbit_poses(center, standoff, elevation_deg, n);
    }
    let el = elevation_deg.to_radians();
    (0..n)
        .map(|i| {
            let az = (azimuth_deg + span_deg * i as f64 / n as f64).to_radians();
            let eye = center + standoff * Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
            Pose::look_at(eye, center)
        })
        .collect()
}

/// Candidate vertices: strictly above the `top_quantile` value, or every
/// vertex at it when nothing exceeds it.
pub fn lookat_candidates(values: &[f64], top_quantile: f64) -> Vec<usize> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let t = quantile_sorted(&sorted, top_quantile);
    let above: Vec<usize> = (0..values.len()).filter(|&i| values[i] > t).collect();
    if above.is_empty() {
        (0..values.len()).filter(|&i| values[i] >= t).collect()
    } else {
        above
    }
}

/// Samples the next look-at point among the most uncertain surface vertices.
pub fn next_lookat(vertex_uncertainty: &[f64], mesh: &TriangleMesh, top_quantile: f64, rng: &mut impl Rng) -> Result<Vec3> {
    if mesh.vertices.is_empty() {
        return Err(Error::domain("no surface to explore"));
    }
    if vertex_uncertainty.len() != mesh.vertices.len() {
        return Err(Error::domain("one uncertainty per vertex required"));
    }
    // threshold on the raw values: quantile normalization is monotone but can
    // collapse a lone peak onto the bulk
    let cand = lookat_candidates(vertex_uncertainty, top_quantile);
    Ok(mesh.vertices[cand[rng.gen_range(0..cand.len())]])
}

#[derive(Debug, Clone, PartialEq)]
pub enum PlanOutcome {
    Move(Pose),
    /// The look-at point is already within the minimum distance.
    TooClose,
    /// No collision-free placement was found.
    Blocked(String),
}

/// Places the camera `standoff` from `lookat` on the side facing away from
/// `center`, raised by the policy elevation, looking at `lookat`.
pub fn plan_view(
    lookat: Vec3,
    current: &Pose,
    scene: &SyntheticScene,
    center: Vec3,
    cfg: &PolicyConfig,
    rng: &mut impl Rng,
) -> PlanOutcome {
    if (lookat - current.position()).norm() < cfg.min_lookat_distance {
        return PlanOutcome::TooClose;
    }
    let mut out = lookat - center;
    out.z = 0.0;
    if out.norm() < 1e-6 {
        out = current.position() - lookat;
        out.z = 0.0;
    }
    if out.norm() < 1e-6 {
        out = Vec3::x();
    }
    let out = out.normalize();
    let el = cfg.elevation_deg.to_radians();
    let base = (out * el.cos() + Vec3::z() * el.sin()).normalize();
    let inner = Aabb {
        min: scene.bounds.min.add_scalar(CLEARANCE),
        max: scene.bounds.max.add_scalar(-CLEARANCE),
    };
    for attempt in 0..=PLACEMENT_ATTEMPTS {
        let dir = if attempt == 0 {
            base
        } else {
            // widen the perturbation each attempt, biased upward
            let r = 2.0 * attempt as f64 / PLACEMENT_ATTEMPTS as f64;
            let j = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.0..1.0));
            (base + j * r).normalize()
        };
        let eye = inner.clamp(&(lookat + dir * cfg.camera_standoff), 0.0);
        if scene_sdf(scene, &eye).distance <= CLEARANCE || (eye - lookat).norm() < 1e-3 {
            continue;
        }
        if let Ok(p) = Pose::look_at(eye, lookat) {
            return PlanOutcome::Move(p);
        }
    }
    PlanOutcome::Blocked(format!("no free placement around ({:.3}, {:.3}, {:.3})", lookat.x, lookat.y, lookat.z))
}

/// Voxels whose decoded TSDF magnitude is below `band`.
pub fn surface_mask(field: &UnifiedField, band: f64) -> Vec<bool> {
    field.decode_voxel_centers(Head::Geo).mean.iter().map(|t| t.abs() < band).collect()
}

/// Target estimate: contrastive similarity weighted by `1 - û_s`, argmax over
/// near-surface voxels.
pub fn exploit_target(field: &UnifiedField, query: &QuerySpec, band: f64) -> Result<Vec3> {
    let feats = feature_volume(field);
    let sim = contrastive_volume(&feats, query)?;
    let spatial = normalize_volume(&logvar_volume(field, Head::Geo), Normalization::default())?;
    let mask = surface_mask(field, band);
    locate(&sim, &spatial, Some(&mask))
}

/// Argmax of similarity weighted by `1 - spatial` (ties: lowest index).
pub fn locate(sim: &VoxelVolume, spatial: &VoxelVolume, mask: Option<&[bool]>) -> Result<Vec3> {
    let masked_zero = sim
        .data
        .iter()
        .enumerate()
        .all(|(i, &s)| s == 0.0 || mask.map_or(false, |m| !m[i]));
    if masked_zero {
        return Err(Error::domain("similarity is zero everywhere"));
    }
    let combined = combine_similarity(sim, std::slice::from_ref(spatial), Combine::SpatialOnly)?;
    let best = argmax_voxel(&combined, mask).ok_or_else(|| Error::domain("no candidate voxel"))?;
    Ok(sim.grid.voxel_center(sim.grid.unravel(best)))
}

/// Everything the episode needs besides the policy.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSetup {
    pub grid: GridSpec,
    pub trunc: f64,
    pub intr: CameraIntrinsics,
    pub sensor: SensorConfig,
    pub target_class: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepSummary {
    pub step: usize,
    pub lookat: Option<[f64; 3]>,
    /// Mean and max of the quantile-normalized visual uncertainty over the surface.
    pub mean_uncertainty: f64,
    pub max_uncertainty: f64,
    pub captured: bool,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeLog {
    /// Init views, one per exploration step (repeated on no-ops), then the
    /// final view toward the estimate.
    pub poses: Vec<[f64; 12]>,
    pub steps: Vec<StepSummary>,
    pub estimate: Option<[f64; 3]>,
    pub target: [f64; 3],
    pub error_m: Option<f64>,
    pub success: bool,
    pub step_count: usize,
    pub abort: Option<String>,
}

pub struct Episode {
    pub log: EpisodeLog,
    pub state: FusionState,
    pub frames: Vec<FrameObservation>,
}

fn target_centroid(scene: &SyntheticScene, class: u32) -> Result<Vec3> {
    let cs: Vec<Vec3> = scene.class_primitives(class).filter_map(|p| p.shape.centroid()).collect();
    if cs.is_empty() {
        return Err(Error::domain(format!("scene has no bounded object of class {class}")));
    }
    Ok(cs.iter().sum::<Vec3>() / cs.len() as f64)
}

/// Voxels off the side and top faces of the grid. The bottom layer is kept so
/// a ground plane just above it survives extraction.
pub fn interior_mask(grid: &GridSpec) -> Vec<bool> {
    let [nx, ny, nz] = grid.dims;
    (0..grid.n_voxels())
        .map(|l| {
            let [i, j, k] = grid.unravel(l);
            i > 0 && j > 0 && i + 1 < nx && j + 1 < ny && k + 1 < nz
        })
        .collect()
}

/// Visual uncertainty of the predicted surface: decoded color logvar at voxel
/// centers projected onto the mesh of the decoded TSDF. The outer voxel layer
/// is left out: zero padding in the refinement network makes spurious,
/// highly uncertain surfaces there.
pub fn surface_uncertainty(field: &UnifiedField) -> Result<(TriangleMesh, Vec<f64>)> {
    let geo = field.decode_voxel_centers(Head::Geo);
    let tsdf = VoxelVolume::from_data(*field.grid(), 1, geo.mean)?;
    let mesh = extract_mesh_masked(&tsdf, 0.0, &interior_mask(field.grid()))?;
    let u = surface_project(&logvar_volume(field, Head::Vis), &mesh)?;
    Ok((mesh, u))
}

pub fn run_episode(
    scene: &SyntheticScene,
    query: &QuerySpec,
    model: &Model,
    setup: &EpisodeSetup,
    cfg: &PolicyConfig,
    seed: u64,
) -> Result<Episode> {
    cfg.validate()?;
    let target = target_centroid(scene, setup.target_class)?;
    let center = setup.grid.aabb().center();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, cfg.seed));
    let poses = init_views_span(
        center,
        cfg.n_init_views,
        cfg.camera_standoff,
        cfg.elevation_deg,
        cfg.init_azimuth_deg,
        cfg.init_span_deg,
    )?;
    let mut log = EpisodeLog {
        poses: poses.iter().map(Pose::to_array).collect(),
        steps: Vec::new(),
        estimate: None,
        target: [target.x, target.y, target.z],
        error_m: None,
        success: false,
        step_count: 0,
        abort: None,
    };
    let capture = |pose: &Pose, k: usize| render_frame(scene, pose, &setup.intr, &setup.sensor, mix_seed(seed, k as u64));
    let mut frames: Vec<FrameObservation> = poses.iter().enumerate().map(|(k, p)| capture(p, k)).collect::<Result<_>>()?;
    let mut state = model.fuse(setup.grid, setup.trunc, &frames)?;
    let mut current = *poses.last().expect("at least one view");

    let mut aborted = false;
    for step in 0..cfg.n_explore_steps {
        log.step_count += 1;
        let mut summary = StepSummary {
            step,
            lookat: None,
            mean_uncertainty: f64::NAN,
            max_uncertainty: f64::NAN,
            captured: false,
            note: None,
        };
        if aborted {
            summary.note = Some("skipped after abort".into());
            log.poses.push(current.to_array());
            log.steps.push(summary);
            continue;
        }
        let field = model.field(&state)?;
        let (mesh, u) = surface_uncertainty(&field)?;
        if mesh.vertices.is_empty() {
            aborted = true;
            log.abort = Some(format!("step {step}: empty predicted surface"));
            summary.note = log.abort.clone();
            log.poses.push(current.to_array());
            log.steps.push(summary);
            continue;
        }
        let un = normalize_uncertainty(&u, Normalization::default())?;
        summary.mean_uncertainty = un.iter().sum::<f64>() / un.len() as f64;
        summary.max_uncertainty = un.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lookat = match cfg.policy {
            LookatPolicy::Uncertainty => next_lookat(&u, &mesh, cfg.top_quantile, &mut rng)?,
            LookatPolicy::Random => mesh.vertices[rng.gen_range(0..mesh.vertices.len())],
        };
        summary.lookat = Some([lookat.x, lookat.y, lookat.z]);
        match plan_view(lookat, &current, scene, center, cfg, &mut rng) {
            PlanOutcome::Move(p) => {
                let frame = capture(&p, frames.len())?;
                let partial = fuse_frames(
                    setup.grid,
                    setup.trunc,
                    std::slice::from_ref(&frame),
                    &model.encode_frames(std::slice::from_ref(&frame))?,
                    model.config.encoder_channels,
                )?;
                state = merge_states(&state, &partial)?;
                frames.push(frame);
                current = p;
                summary.captured = true;
            }
            PlanOutcome::TooClose => summary.note = Some("look-at within minimum distance".into()),
            PlanOutcome::Blocked(why) => summary.note = Some(why),
        }
        log.poses.push(current.to_array());
        log.steps.push(summary);
    }

    let field = model.field(&state)?;
    match exploit_target(&field, query, cfg.surface_band) {
        Ok(est) => {
            let err = (est - target).norm();
            log.estimate = Some([est.x, est.y, est.z]);
            log.error_m = Some(err);
            log.success = err <= 2.0 * setup.grid.voxel_size;
            let final_pose = match plan_view(est, &current, scene, center, cfg, &mut rng) {
                PlanOutcome::Move(p) => p,
                _ => current,
            };
            log.poses.push(final_pose.to_array());
        }
        Err(e) => {
            log.abort.get_or_insert(format!("exploitation failed: {e}"));
            log.poses.push(current.to_array());
        }
    }
    Ok(Episode { log, state, frames })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::ModelConfig;
    use crate::scene::presets;

    #[test]
    fn init_view_layout() {
        let c = Vec3::new(0.1, -0.2, 0.3);
        let v = init_views(c, 4, 1.0, 0.0).unwrap();
        for (i, p) in v.iter().enumerate() {
            let d = p.position() - c;
            let az = d.y.atan2(d.x).to_degrees().rem_euclid(360.0);
            assert!((az - 90.0 * i as f64).abs() < 1e-9 || (az - 360.0).abs() < 1e-9);
            assert!((d.norm() - 1.0).abs() < 1e-12);
        }
        for p in init_views(c, 7, 0.8, 30.0).unwrap() {
            let to = (c - p.position()).normalize();
            assert!(p.forward().dot(&to).clamp(-1.0, 1.0).acos() < 1e-6);
        }
        let one = init_views(c, 1, 1.0, 0.0).unwrap();
        assert!((one[0].position() - (c + Vec3::x())).norm() < 1e-12);
        assert!(init_views(c, 0, 1.0, 0.0).is_err());
    }

    fn fan_mesh(n: usize) -> TriangleMesh {
        let mut m = TriangleMesh::default();
        for i in 0..n {
            m.vertices.push(Vec3::new(i as f64, (i * i % 7) as f64, 0.0));
        }
        for i in 0..n - 2 {
            m.triangles.push([0, i + 1, i + 2]);
        }
        m
    }

    #[test]
    fn lookat_sampling() {
        let m = fan_mesh(200);
        let mut u = vec![0.0; 200];
        u[37] = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            assert_eq!(next_lookat(&u, &m, 0.99, &mut rng).unwrap(), m.vertices[37]);
        }
        let a = next_lookat(&[0.3; 200], &m, 0.9, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = next_lookat(&[0.3; 200], &m, 0.9, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        assert!(next_lookat(&[], &TriangleMesh::default(), 0.9, &mut rng).is_err());
    }

    #[test]
    fn uniform_uncertainty_samples_uniformly() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let m = fan_mesh(10);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut counts = [0usize; 10];
        for _ in 0..1000 {
            let v = next_lookat(&[0.5; 10], &m, 0.9, &mut rng).unwrap();
            counts[m.vertices.iter().position(|x| *x == v).unwrap()] += 1;
        }
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - 100.0).powi(2) / 100.0).sum();
        let p = 1.0 - ChiSquared::new(9.0).unwrap().cdf(chi2);
        assert!(p > 0.01, "chi2 {chi2}");
    }

    #[test]
    fn plan_view_examples() {
        let scene = presets::tabletop(1, 2);
        let cfg = PolicyConfig {
            camera_standoff: 0.5,
            elevation_deg: 0.0,
            ..PolicyConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let here = Pose::look_at(Vec3::new(0.0, -1.0, 0.5), Vec3::new(0.0, 0.0, 0.5)).unwrap();
        assert_eq!(plan_view(here.position(), &here, &scene, Vec3::zeros(), &cfg, &mut rng), PlanOutcome::TooClose);
        let lookat = Vec3::new(0.0, 0.0, 0.5);
        let center = Vec3::new(-0.3, 0.0, 0.5);
        match plan_view(lookat, &here, &scene, center, &cfg, &mut rng) {
            PlanOutcome::Move(p) => {
                assert!(((p.position() - lookat).norm() - 0.5).abs() < 1e-9);
                let to = (lookat - p.position()).normalize();
                assert!((p.forward().dot(&to) - 1.0).abs() < 1e-9);
            }
            other => panic!("{other:?}"),
        }
        // straight placement would go below the ground; jitter finds free space
        let low = PolicyConfig {
            elevation_deg: -60.0,
            camera_standoff: 0.6,
            ..PolicyConfig::default()
        };
        match plan_view(Vec3::new(0.5, 0.5, 0.05), &here, &scene, Vec3::zeros(), &low, &mut rng) {
            PlanOutcome::Move(p) => assert!(scene_sdf(&scene, &p.position()).distance > 0.0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn locate_examples() {
        let g = GridSpec::new([0.0; 3], 0.1, [3, 3, 3]).unwrap();
        let mut sim = VoxelVolume::zeros(g, 1);
        sim.data[13] = 1.0;
        let zero = VoxelVolume::zeros(g, 1);
        assert_eq!(locate(&sim, &zero, None).unwrap(), g.voxel_center([1, 1, 1]));
        let mut two = VoxelVolume::zeros(g, 1);
        two.data[4] = 0.7;
        two.data[20] = 0.7;
        let mut u = VoxelVolume::zeros(g, 1);
        u.data[4] = 0.9;
        assert_eq!(locate(&two, &u, None).unwrap(), g.voxel_center(g.unravel(20)));
        assert!(locate(&zero, &zero, None).is_err());
    }

    fn small_setup() -> (SyntheticScene, EpisodeSetup, Model, QuerySpec) {
        let scene = presets::search(3, 1, 0.06);
        let sensor = SensorConfig {
            feature_dim: 4,
            ..SensorConfig::default()
        };
        let grid = GridSpec::covering(&presets::tabletop_region(), 0.1).unwrap();
        let setup = EpisodeSetup {
            grid,
            trunc: 0.3,
            intr: CameraIntrinsics::from_fov(16, 12, 60.0).unwrap(),
            sensor,
            target_class: 1,
        };
        let cfg = ModelConfig {
            encoder_channels: 2,
            refine_channels: 4,
            hidden: 8,
            feature_dim: 4,
            ..ModelConfig::default()
        };
        let model = Model::init(cfg, 1).unwrap();
        let q = QuerySpec::for_scene_class(&scene, 1, 4, sensor.teacher_seed, 0.1).unwrap();
        (scene, setup, model, q)
    }

    #[test]
    fn episode_contracts() {
        let (scene, setup, model, q) = small_setup();
        let cfg = PolicyConfig {
            n_init_views: 2,
            n_explore_steps: 3,
            ..PolicyConfig::default()
        };
        let a = run_episode(&scene, &q, &model, &setup, &cfg, 5).unwrap();
        let b = run_episode(&scene, &q, &model, &setup, &cfg, 5).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.poses.len(), 2 + 3 + 1);
        assert_eq!(a.log.steps.len(), 3);
        for f in &a.frames {
            assert!(scene_sdf(&scene, &f.pose.position()).distance > 0.0);
        }
        // incremental merges equal one batch fusion of every captured frame
        let batch = model.fuse(setup.grid, setup.trunc, &a.frames).unwrap();
        for (x, y) in [
            (&a.state.feat_mean, &batch.feat_mean),
            (&a.state.feat_m2, &batch.feat_m2),
            (&a.state.count, &batch.count),
            (&a.state.tsdf, &batch.tsdf),
            (&a.state.tsdf_weight, &batch.tsdf_weight),
        ] {
            for (p, r) in x.data.iter().zip(&y.data) {
                assert!((p - r).abs() < 1e-9);
            }
        }
        let none = PolicyConfig {
            n_explore_steps: 0,
            ..cfg
        };
        let c = run_episode(&scene, &q, &model, &setup, &none, 5).unwrap();
        assert_eq!(c.log.poses.len(), 2 + 0 + 1);
        assert_eq!(c.frames.len(), 2);
        assert!(c.log.estimate.is_some());
    }
}
