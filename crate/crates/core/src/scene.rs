//! Procedural ground truth: analytic SDF scenes, a synthetic RGB-D sensor,
//! per-class teacher features and ground-truth TSDF volumes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{pixel_center_ray, Aabb, CameraIntrinsics, GridSpec, Pose, Vec3};
use crate::volume::VoxelVolume;

pub const DEFAULT_FEATURE_DIM: usize = 16;
const HIT_EPS: f64 = 1e-4;
const MAX_TRACE_STEPS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Sphere { center: Vec3, radius: f64 },
    Box { center: Vec3, half_extents: Vec3 },
    /// Solid half-space `normal . x < offset`.
    Plane { normal: Vec3, offset: f64 },
}

impl Shape {
    pub fn sdf(&self, x: &Vec3) -> f64 {
        match *self {
            Shape::Sphere { center, radius } => (x - center).norm() - radius,
            Shape::Box {
                center,
                half_extents,
            } => {
                let q = (x - center).abs() - half_extents;
                let outside = q.map(|v| v.max(0.0)).norm();
                outside + q.max().min(0.0)
            }
            Shape::Plane { normal, offset } => normal.dot(x) - offset,
        }
    }

    /// Outward unit normal of the level set through `x`.
    pub fn normal(&self, x: &Vec3) -> Vec3 {
        match *self {
            Shape::Sphere { center, .. } => {
                let d = x - center;
                if d.norm() > 0.0 {
                    d.normalize()
                } else {
                    Vec3::z()
                }
            }
            Shape::Box {
                center,
                half_extents,
            } => {
                let p = x - center;
                let q = p.abs() - half_extents;
                let sign = p.map(|v| if v < 0.0 { -1.0 } else { 1.0 });
                if q.max() > 0.0 {
                    let n = q.map(|v| v.max(0.0)).component_mul(&sign);
                    n.normalize()
                } else {
                    let axis = q.imax();
                    let mut n = Vec3::zeros();
                    n[axis] = sign[axis];
                    n
                }
            }
            Shape::Plane { normal, .. } => normal,
        }
    }

    fn bounding_box(&self) -> Option<Aabb> {
        match *self {
            Shape::Sphere { center, radius } => Some(Aabb {
                min: center.add_scalar(-radius),
                max: center.add_scalar(radius),
            }),
            Shape::Box {
                center,
                half_extents,
            } => Some(Aabb {
                min: center - half_extents,
                max: center + half_extents,
            }),
            Shape::Plane { .. } => None,
        }
    }

    /// Point used as the object's location for search tasks.
    pub fn centroid(&self) -> Option<Vec3> {
        match *self {
            Shape::Sphere { center, .. } | Shape::Box { center, .. } => Some(center),
            Shape::Plane { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenePrimitive {
    pub shape: Shape,
    pub albedo: [f64; 3],
    pub class_id: u32,
}

impl ScenePrimitive {
    pub fn new(shape: Shape, albedo: [f64; 3], class_id: u32) -> Result<Self> {
        match shape {
            Shape::Sphere { radius, .. } if !(radius > 0.0) => {
                return Err(Error::domain("sphere radius must be positive"))
            }
            Shape::Box { half_extents, .. } if half_extents.iter().any(|&h| !(h > 0.0)) => {
                return Err(Error::domain("box half-extents must be positive"))
            }
            Shape::Plane { normal, .. } if (normal.norm() - 1.0).abs() > 1e-9 => {
                return Err(Error::domain("plane normal must be unit length"))
            }
            _ => {}
        }
        if albedo.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::domain("albedo must lie in [0, 1]"));
        }
        Ok(Self {
            shape,
            albedo,
            class_id,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub primitives: Vec<ScenePrimitive>,
    pub bounds: Aabb,
    pub ambient: f64,
    pub diffuse: f64,
    /// Unit vector pointing towards the light.
    pub light_dir: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdfSample {
    pub distance: f64,
    pub class_id: u32,
    pub albedo: [f64; 3],
    /// Index of the closest primitive.
    pub primitive: usize,
}

impl SyntheticScene {
    pub fn new(
        primitives: Vec<ScenePrimitive>,
        bounds: Aabb,
        ambient: f64,
        diffuse: f64,
        light_dir: Vec3,
    ) -> Result<Self> {
        if primitives.is_empty() {
            return Err(Error::domain("scene needs at least one primitive"));
        }
        for (i, p) in primitives.iter().enumerate() {
            if let Some(bb) = p.shape.bounding_box() {
                let inside = (0..3).all(|a| bb.min[a] > bounds.min[a] && bb.max[a] < bounds.max[a]);
                if !inside {
                    return Err(Error::domain(format!("primitive {i} is not strictly inside the scene bounds")));
                }
            }
        }
        if !(0.0..=1.0).contains(&ambient) || !(0.0..=1.0).contains(&diffuse) {
            return Err(Error::domain("lighting coefficients must lie in [0, 1]"));
        }
        let n = light_dir.norm();
        if !(n > 0.0) {
            return Err(Error::domain("light direction must be non-zero"));
        }
        Ok(Self {
            primitives,
            bounds,
            ambient,
            diffuse,
            // Already-unit input is kept as is so a saved scene reloads bit-exactly.
            light_dir: if (n - 1.0).abs() < 1e-12 { light_dir } else { light_dir / n },
        })
    }

    pub fn centroid(&self) -> Vec3 {
        self.bounds.center()
    }

    /// Primitives carrying `class_id`.
    pub fn class_primitives(&self, class_id: u32) -> impl Iterator<Item = &ScenePrimitive> {
        self.primitives.iter().filter(move |p| p.class_id == class_id)
    }

    pub fn class_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.primitives.iter().map(|p| p.class_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// Union SDF; exact ties resolve to the lowest primitive index.
pub fn scene_sdf(scene: &SyntheticScene, x: &Vec3) -> SdfSample {
    let mut best = SdfSample {
        distance: f64::INFINITY,
        class_id: 0,
        albedo: [0.0; 3],
        primitive: 0,
    };
    for (i, p) in scene.primitives.iter().enumerate() {
        let d = p.shape.sdf(x);
        if d < best.distance {
            best = SdfSample {
                distance: d,
                class_id: p.class_id,
                albedo: p.albedo,
                primitive: i,
            };
        }
    }
    best
}

/// Settings of the synthetic sensor shared by every frame of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorConfig {
    pub feature_dim: usize,
    pub teacher_seed: u64,
    /// Standard deviation of additive Gaussian depth noise in meters; 0 disables it.
    pub depth_noise_std: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            feature_dim: DEFAULT_FEATURE_DIM,
            teacher_seed: 7,
            depth_noise_std: 0.0,
        }
    }
}

/// One posed RGB-D frame together with its dense teacher features.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameObservation {
    /// Row-major `H x W x 3`.
    pub rgb: Vec<f64>,
    /// Row-major `H x W` pinhole depth in meters; 0 marks invalid pixels.
    pub depth: Vec<f64>,
    pub pose: Pose,
    pub intr: CameraIntrinsics,
    /// Row-major `H x W x feature_dim`.
    pub teacher: Vec<f64>,
    pub feature_dim: usize,
}

impl FrameObservation {
    pub fn pixel_rgb(&self, p: usize) -> [f64; 3] {
        [self.rgb[3 * p], self.rgb[3 * p + 1], self.rgb[3 * p + 2]]
    }

    pub fn pixel_teacher(&self, p: usize) -> &[f64] {
        &self.teacher[p * self.feature_dim..(p + 1) * self.feature_dim]
    }

    pub fn valid_pixels(&self) -> Vec<usize> {
        (0..self.depth.len()).filter(|&p| self.depth[p] > 0.0).collect()
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic seed derivation used wherever a sub-stream of randomness is needed.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    splitmix64(a ^ splitmix64(b))
}

/// Fixed random unit vector standing in for the dense teacher model's output.
pub fn teacher_feature(class_id: u32, dim: usize, master_seed: u64) -> Result<Vec<f64>> {
    if dim < 2 {
        return Err(Error::domain("teacher feature dimension must be >= 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(class_id as u64, master_seed));
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return Ok(v.into_iter().map(|x| x / n).collect());
        }
    }
}

/// Sphere-traces every pixel center; returns `(t, primitive)` on a hit.
fn trace(scene: &SyntheticScene, origin: Vec3, dir: Vec3) -> Option<(f64, usize)> {
    let ray = crate::geom::Ray::new(origin, dir, 0.0, f64::INFINITY).ok()?;
    let (t0, t1) = scene.bounds.clip(&ray)?;
    let mut t = t0;
    for _ in 0..MAX_TRACE_STEPS {
        let s = scene_sdf(scene, &ray.at(t));
        if s.distance.abs() < HIT_EPS {
            return Some((t, s.primitive));
        }
        t += s.distance;
        if t > t1 || t < 0.0 {
            return None;
        }
    }
    None
}

pub fn render_frame(
    scene: &SyntheticScene,
    pose: &Pose,
    intr: &CameraIntrinsics,
    sensor: &SensorConfig,
    seed: u64,
) -> Result<FrameObservation> {
    let (w, h, cf) = (intr.width, intr.height, sensor.feature_dim);
    let teachers: Vec<Vec<f64>> = scene
        .primitives
        .iter()
        .map(|p| teacher_feature(p.class_id, cf, sensor.teacher_seed))
        .collect::<Result<_>>()?;
    let mut rgb = vec![0.0; w * h * 3];
    let mut depth = vec![0.0; w * h];
    let mut teacher = vec![0.0; w * h * cf];
    let forward = pose.forward();
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
    for row in 0..h {
        for col in 0..w {
            let p = row * w + col;
            let ray = pixel_center_ray(intr, pose, col, row)?;
            let Some((t, prim)) = trace(scene, ray.origin, ray.direction) else {
                continue;
            };
            let x = ray.at(t);
            let primitive = &scene.primitives[prim];
            let n = primitive.shape.normal(&x);
            let shade = scene.ambient + scene.diffuse * n.dot(&scene.light_dir).max(0.0);
            for c in 0..3 {
                rgb[3 * p + c] = (primitive.albedo[c] * shade).clamp(0.0, 1.0);
            }
            let mut d = t * ray.direction.dot(&forward);
            if sensor.depth_noise_std > 0.0 {
                let e: f64 = StandardNormal.sample(&mut noise_rng);
                d = (d + sensor.depth_noise_std * e).max(1e-3);
            }
            depth[p] = d;
            teacher[p * cf..(p + 1) * cf].copy_from_slice(&teachers[prim]);
        }
    }
    Ok(FrameObservation {
        rgb,
        depth,
        pose: *pose,
        intr: *intr,
        teacher,
        feature_dim: cf,
    })
}

pub fn ground_truth_tsdf(scene: &SyntheticScene, grid: &GridSpec, trunc: f64) -> Result<VoxelVolume> {
    if !(trunc > 0.0) {
        return Err(Error::domain("truncation distance must be positive"));
    }
    let data = (0..grid.n_voxels())
        .map(|l| {
            let x = grid.voxel_center(grid.unravel(l));
            (scene_sdf(scene, &x).distance / trunc).clamp(-1.0, 1.0)
        })
        .collect();
    VoxelVolume::from_data(*grid, 1, data)
}

/// `n` cameras evenly spaced in azimuth (starting at 0) on a circle of radius
/// `radius` around `center`, raised by `elevation_deg`, all looking at `center`.
pub fn orbit_poses(center: Vec3, radius: f64, elevation_deg: f64, n: usize) -> Result<Vec<Pose>> {
    let el = elevation_deg.to_radians();
    (0..n)
        .map(|i| {
            let az = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            let eye = center + radius * Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
            Pose::look_at(eye, center)
        })
        .collect()
}

/// Random viewpoints around `center`: azimuth uniform, elevation in [15, 55] degrees,
/// radius within +-20% of `radius`, look-at point jittered by up to 10% of `radius`.
pub fn random_poses(center: Vec3, radius: f64, n: usize, seed: u64) -> Result<Vec<Pose>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let az = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
            let el = rng.gen_range(15f64..55.0).to_radians();
            let r = radius * rng.gen_range(0.8..1.2);
            let jitter = Vec3::from_fn(|_, _| rng.gen_range(-0.1..0.1) * radius);
            let eye = center + r * Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
            Pose::look_at(eye, center + jitter)
        })
        .collect()
}

/// Class palette used by procedural scenes: albedo is a function of class.
pub fn class_albedo(class_id: u32) -> [f64; 3] {
    match class_id {
        0 => [0.55, 0.55, 0.5],
        1 => [0.9, 0.15, 0.1],
        2 => [0.15, 0.75, 0.2],
        3 => [0.15, 0.3, 0.9],
        4 => [0.9, 0.8, 0.15],
        5 => [0.85, 0.85, 0.85],
        _ => {
            let h = splitmix64(class_id as u64);
            [0, 1, 2].map(|i| 0.2 + 0.6 * (((h >> (16 * i)) & 0xffff) as f64 / 65535.0))
        }
    }
}

pub mod presets {
    //! Procedural scenes used by tests, the CLI and the acceptance suite.

    use super::*;

    pub fn light() -> Vec3 {
        Vec3::new(0.4, -0.3, 0.85)
    }

    fn prim(shape: Shape, class_id: u32) -> ScenePrimitive {
        ScenePrimitive {
            shape,
            albedo: class_albedo(class_id),
            class_id,
        }
    }

    fn ground() -> ScenePrimitive {
        prim(
            Shape::Plane {
                normal: Vec3::z(),
                offset: 0.0,
            },
            0,
        )
    }

    pub fn single_sphere(center: Vec3, radius: f64) -> SyntheticScene {
        let bounds = Aabb {
            min: center.add_scalar(-4.0 * radius - 1.0),
            max: center.add_scalar(4.0 * radius + 1.0),
        };
        SyntheticScene::new(
            vec![prim(Shape::Sphere { center, radius }, 1)],
            bounds,
            0.3,
            0.7,
            light(),
        )
        .expect("valid preset")
    }

    /// Bounds of the tabletop family of scenes.
    pub fn tabletop_bounds() -> Aabb {
        Aabb {
            min: Vec3::new(-1.5, -1.5, -0.2),
            max: Vec3::new(1.5, 1.5, 1.6),
        }
    }

    /// Region holding every object of the tabletop family.
    pub fn tabletop_region() -> Aabb {
        Aabb {
            min: Vec3::new(-0.6, -0.6, -0.12),
            max: Vec3::new(0.6, 0.6, 0.6),
        }
    }

    /// Ground plane plus `n_objects` spheres and boxes at random non-overlapping
    /// positions; each object's class (and therefore albedo) is drawn from 1..=4.
    pub fn tabletop(seed: u64, n_objects: usize) -> SyntheticScene {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x7ab1e));
        let mut prims = vec![ground()];
        let mut placed: Vec<(Vec3, f64)> = Vec::new();
        let mut attempts = 0;
        while placed.len() < n_objects && attempts < 1000 {
            attempts += 1;
            let size = rng.gen_range(0.12..0.2);
            let c = Vec3::new(rng.gen_range(-0.35..0.35), rng.gen_range(-0.35..0.35), size);
            if placed.iter().any(|(p, s)| (p.xy() - c.xy()).norm() < s + size + 0.08) {
                continue;
            }
            let class_id = rng.gen_range(1..=4);
            let shape = if rng.gen_bool(0.5) {
                Shape::Sphere {
                    center: c,
                    radius: size,
                }
            } else {
                Shape::Box {
                    center: c,
                    half_extents: Vec3::new(size * 0.9, size * 0.9, size),
                }
            };
            placed.push((c, size));
            prims.push(prim(shape, class_id));
        }
        SyntheticScene::new(prims, tabletop_bounds(), 0.35, 0.65, light()).expect("valid preset")
    }

    /// Object-search scene: a small target sphere of class `target_class`, a tall
    /// occluder wall of class 5 hiding it from azimuth 0, and a few distractors.
    pub fn search(seed: u64, target_class: u32, target_radius: f64) -> SyntheticScene {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5ea4c));
        let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let target = Vec3::new(
            rng.gen_range(-0.3..-0.15),
            side * rng.gen_range(0.0..0.2),
            target_radius,
        );
        let mut prims = vec![
            ground(),
            prim(
                Shape::Sphere {
                    center: target,
                    radius: target_radius,
                },
                target_class,
            ),
            // wall between the target and cameras at azimuth 0 (+x side)
            prim(
                Shape::Box {
                    center: Vec3::new(target.x + 0.22, target.y, 0.2),
                    half_extents: Vec3::new(0.04, 0.3, 0.2),
                },
                5,
            ),
        ];
        let distractors = [2u32, 3, 4];
        for (i, &cls) in distractors.iter().enumerate() {
            let size = rng.gen_range(0.08..0.13);
            let c = Vec3::new(
                rng.gen_range(0.1..0.45),
                -0.4 + 0.4 * i as f64 + rng.gen_range(-0.05..0.05),
                size,
            );
            prims.push(prim(
                Shape::Sphere {
                    center: c,
                    radius: size,
                },
                cls,
            ));
        }
        SyntheticScene::new(prims, tabletop_bounds(), 0.35, 0.65, light()).expect("valid preset")
    }

    /// Open-top room: floor and four inward-facing walls (half-spaces) with
    /// furniture-sized boxes and a sphere.
    pub fn room() -> SyntheticScene {
        let wall = |n: Vec3, off: f64| {
            prim(
                Shape::Plane {
                    normal: n,
                    offset: off,
                },
                5,
            )
        };
        let prims = vec![
            ground(),
            wall(Vec3::x(), -1.0),
            wall(-Vec3::x(), -1.0),
            wall(Vec3::y(), -1.0),
            wall(-Vec3::y(), -1.0),
            prim(
                Shape::Box {
                    center: Vec3::new(-0.6, -0.55, 0.2),
                    half_extents: Vec3::new(0.25, 0.3, 0.2),
                },
                2,
            ),
            prim(
                Shape::Box {
                    center: Vec3::new(0.55, 0.5, 0.35),
                    half_extents: Vec3::new(0.3, 0.2, 0.35),
                },
                3,
            ),
            prim(
                Shape::Sphere {
                    center: Vec3::new(0.2, -0.3, 0.25),
                    radius: 0.25,
                },
                1,
            ),
        ];
        let bounds = Aabb {
            min: Vec3::new(-1.3, -1.3, -0.3),
            max: Vec3::new(1.3, 1.3, 1.6),
        };
        SyntheticScene::new(prims, bounds, 0.3, 0.7, light()).expect("valid preset")
    }
}
