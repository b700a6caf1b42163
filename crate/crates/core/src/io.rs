//! File formats shared by the command-line tools.
//!
//! Binary layouts are little endian and open with a 4-byte magic and a u32
//! version:
//!
//! * frame archive `VFFA`: u32 frame count, then per frame the intrinsics
//!   (`fx fy cx cy` as f64, width and height as u64), the 12 pose values
//!   (row-major rotation then translation), u32 feature width, and the rgb,
//!   depth and teacher arrays as raw f64;
//! * volume snapshot `VFVV`: grid, u32 channel count, raw f64 data;
//! * fusion snapshot `VFFS`: grid, f64 truncation, u32 block count, then named
//!   blocks (u32 name length, name, u32 channels, raw f64 data).
//!
//! A grid is written as origin (3 f64), voxel size (f64), dims (3 u64).
//!
//! Meshes are ASCII PLY with optional per-vertex colors; scenes are TOML.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{write_atomic, ByteReader};
use crate::error::{Error, Result};
use crate::eval::TriangleMesh;
use crate::fusion::FusionState;
use crate::geom::{Aabb, CameraIntrinsics, GridSpec, Pose, Vec3};
use crate::scene::{FrameObservation, ScenePrimitive, Shape, SyntheticScene};
use crate::volume::VoxelVolume;

const FRAMES_MAGIC: &[u8; 4] = b"VFFA";
const VOLUME_MAGIC: &[u8; 4] = b"VFVV";
const STATE_MAGIC: &[u8; 4] = b"VFFS";
const VERSION: u32 = 1;

const STATE_BLOCKS: [&str; 5] = ["feat_mean", "feat_m2", "count", "tsdf", "tsdf_weight"];

struct Writer(Vec<u8>);

impl Writer {
    fn new(magic: &[u8; 4]) -> Self {
        let mut w = Writer(magic.to_vec());
        w.u32(VERSION);
        w
    }

    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s(&mut self, v: &[f64]) {
        self.0.reserve(8 * v.len());
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }

    fn grid(&mut self, g: &GridSpec) {
        self.f64s(&g.origin);
        self.f64s(&[g.voxel_size]);
        for d in g.dims {
            self.u64(d as u64);
        }
    }
}

fn open<'a>(bytes: &'a [u8], magic: &[u8; 4], what: &'static str) -> Result<ByteReader<'a>> {
    let mut r = ByteReader::new(bytes, what);
    if r.take(4)? != magic {
        return Err(Error::format(what, "bad magic"));
    }
    let v = r.u32()?;
    if v != VERSION {
        return Err(Error::format(what, format!("unsupported version {v}")));
    }
    Ok(r)
}

fn read_grid(r: &mut ByteReader) -> Result<GridSpec> {
    let o = r.f64s(3)?;
    let vs = r.f64()?;
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = r.u64()? as usize;
    }
    GridSpec::new([o[0], o[1], o[2]], vs, dims)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    Ok(bytes)
}

pub fn frames_to_bytes(frames: &[FrameObservation]) -> Vec<u8> {
    let mut w = Writer::new(FRAMES_MAGIC);
    w.u32(frames.len() as u32);
    for f in frames {
        w.f64s(&[f.intr.fx, f.intr.fy, f.intr.cx, f.intr.cy]);
        w.u64(f.intr.width as u64);
        w.u64(f.intr.height as u64);
        w.f64s(&f.pose.to_array());
        w.u32(f.feature_dim as u32);
        w.f64s(&f.rgb);
        w.f64s(&f.depth);
        w.f64s(&f.teacher);
    }
    w.0
}

pub fn frames_from_bytes(bytes: &[u8]) -> Result<Vec<FrameObservation>> {
    let mut r = open(bytes, FRAMES_MAGIC, "frame archive")?;
    let n = r.u32()?;
    let mut frames = Vec::new();
    for _ in 0..n {
        let k = r.f64s(4)?;
        let (w, h) = (r.u64()? as usize, r.u64()? as usize);
        let intr = CameraIntrinsics::new(k[0], k[1], k[2], k[3], w, h)?;
        let p: [f64; 12] = r.f64s(12)?.try_into().unwrap();
        let pose = Pose::from_array(&p)?;
        let feature_dim = r.u32()? as usize;
        let np = w * h;
        frames.push(FrameObservation {
            rgb: r.f64s(3 * np)?,
            depth: r.f64s(np)?,
            pose,
            intr,
            teacher: r.f64s(feature_dim * np)?,
            feature_dim,
        });
    }
    r.finish()?;
    Ok(frames)
}

pub fn save_frames(path: &Path, frames: &[FrameObservation]) -> Result<()> {
    write_atomic(path, &frames_to_bytes(frames))
}

pub fn load_frames(path: &Path) -> Result<Vec<FrameObservation>> {
    frames_from_bytes(&read_file(path)?)
}

pub fn volume_to_bytes(v: &VoxelVolume) -> Vec<u8> {
    let mut w = Writer::new(VOLUME_MAGIC);
    w.grid(&v.grid);
    w.u32(v.channels as u32);
    w.f64s(&v.data);
    w.0
}

pub fn volume_from_bytes(bytes: &[u8]) -> Result<VoxelVolume> {
    let mut r = open(bytes, VOLUME_MAGIC, "volume snapshot")?;
    let grid = read_grid(&mut r)?;
    let c = r.u32()? as usize;
    let data = r.f64s(grid.n_voxels() * c)?;
    r.finish()?;
    VoxelVolume::from_data(grid, c, data)
}

pub fn save_volume(path: &Path, v: &VoxelVolume) -> Result<()> {
    write_atomic(path, &volume_to_bytes(v))
}

pub fn load_volume(path: &Path) -> Result<VoxelVolume> {
    volume_from_bytes(&read_file(path)?)
}

fn state_blocks(s: &FusionState) -> [&VoxelVolume; 5] {
    [&s.feat_mean, &s.feat_m2, &s.count, &s.tsdf, &s.tsdf_weight]
}

pub fn state_to_bytes(s: &FusionState) -> Vec<u8> {
    let mut w = Writer::new(STATE_MAGIC);
    w.grid(s.grid());
    w.f64s(&[s.trunc]);
    w.u32(STATE_BLOCKS.len() as u32);
    for (name, v) in STATE_BLOCKS.iter().zip(state_blocks(s)) {
        w.u32(name.len() as u32);
        w.0.extend_from_slice(name.as_bytes());
        w.u32(v.channels as u32);
        w.f64s(&v.data);
    }
    w.0
}

pub fn state_from_bytes(bytes: &[u8]) -> Result<FusionState> {
    let mut r = open(bytes, STATE_MAGIC, "fusion snapshot")?;
    let grid = read_grid(&mut r)?;
    let trunc = r.f64()?;
    let n = r.u32()? as usize;
    if n != STATE_BLOCKS.len() {
        return Err(Error::format("fusion snapshot", format!("expected 5 blocks, found {n}")));
    }
    let mut vols = Vec::with_capacity(n);
    for expect in STATE_BLOCKS {
        let len = r.u32()? as usize;
        let name = r.take(len)?;
        if name != expect.as_bytes() {
            return Err(Error::format("fusion snapshot", format!("expected block {expect}")));
        }
        let c = r.u32()? as usize;
        vols.push(VoxelVolume::from_data(grid, c, r.f64s(grid.n_voxels() * c)?)?);
    }
    r.finish()?;
    let mut it = vols.into_iter();
    let mut next = || it.next().unwrap();
    let s = FusionState {
        feat_mean: next(),
        feat_m2: next(),
        count: next(),
        tsdf: next(),
        tsdf_weight: next(),
        trunc,
    };
    if s.feat_m2.channels != s.feat_mean.channels || [&s.count, &s.tsdf, &s.tsdf_weight].iter().any(|v| v.channels != 1) {
        return Err(Error::format("fusion snapshot", "inconsistent channel counts"));
    }
    if !(trunc > 0.0) {
        return Err(Error::format("fusion snapshot", "truncation must be positive"));
    }
    Ok(s)
}

pub fn save_state(path: &Path, s: &FusionState) -> Result<()> {
    write_atomic(path, &state_to_bytes(s))
}

pub fn load_state(path: &Path) -> Result<FusionState> {
    state_from_bytes(&read_file(path)?)
}

/// ASCII PLY. Vertex coordinates are written in shortest round-trip form.
pub fn mesh_to_ply(mesh: &TriangleMesh, colors: Option<&[[u8; 3]]>) -> Result<String> {
    if colors.is_some_and(|c| c.len() != mesh.vertices.len()) {
        return Err(Error::shape("mesh_to_ply", "one color per vertex required"));
    }
    let mut s = String::from("ply\nformat ascii 1.0\n");
    s += &format!("element vertex {}\nproperty double x\nproperty double y\nproperty double z\n", mesh.vertices.len());
    if colors.is_some() {
        s += "property uchar red\nproperty uchar green\nproperty uchar blue\n";
    }
    s += &format!("element face {}\nproperty list uchar int vertex_indices\nend_header\n", mesh.triangles.len());
    for (i, v) in mesh.vertices.iter().enumerate() {
        s += &format!("{} {} {}", v.x, v.y, v.z);
        if let Some(c) = colors {
            s += &format!(" {} {} {}", c[i][0], c[i][1], c[i][2]);
        }
        s.push('\n');
    }
    for t in &mesh.triangles {
        s += &format!("3 {} {} {}\n", t[0], t[1], t[2]);
    }
    Ok(s)
}

/// Reads the subset of PLY written by [`mesh_to_ply`].
pub fn mesh_from_ply(text: &str) -> Result<(TriangleMesh, Option<Vec<[u8; 3]>>)> {
    let bad = |d: &str| Error::format("PLY mesh", d.to_string());
    let mut lines = text.lines();
    if lines.next() != Some("ply") || lines.next() != Some("format ascii 1.0") {
        return Err(bad("not an ASCII PLY file"));
    }
    let (mut nv, mut nf, mut colored) = (None, None, false);
    for line in lines.by_ref() {
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.as_slice() {
            ["end_header"] => break,
            ["element", "vertex", n] => nv = n.parse::<usize>().ok(),
            ["element", "face", n] => nf = n.parse::<usize>().ok(),
            ["property", "uchar", "red"] => colored = true,
            _ => {}
        }
    }
    let (nv, nf) = nv.zip(nf).ok_or_else(|| bad("missing element counts"))?;
    let mut mesh = TriangleMesh::default();
    let mut colors = colored.then(Vec::new);
    for _ in 0..nv {
        let f: Vec<&str> = lines.next().ok_or_else(|| bad("truncated vertices"))?.split_whitespace().collect();
        if f.len() != if colored { 6 } else { 3 } {
            return Err(bad("wrong vertex arity"));
        }
        let x: Vec<f64> = f[..3].iter().map(|s| s.parse()).collect::<std::result::Result<_, _>>().map_err(|_| bad("bad coordinate"))?;
        mesh.vertices.push(Vec3::new(x[0], x[1], x[2]));
        if let Some(c) = colors.as_mut() {
            let rgb: Vec<u8> = f[3..].iter().map(|s| s.parse()).collect::<std::result::Result<_, _>>().map_err(|_| bad("bad color"))?;
            c.push([rgb[0], rgb[1], rgb[2]]);
        }
    }
    for _ in 0..nf {
        let f: Vec<usize> = lines
            .next()
            .ok_or_else(|| bad("truncated faces"))?
            .split_whitespace()
            .map(|s| s.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("bad face index"))?;
        if f.len() != 4 || f[0] != 3 {
            return Err(bad("only triangles are supported"));
        }
        mesh.triangles.push([f[1], f[2], f[3]]);
    }
    mesh.validate()?;
    Ok((mesh, colors))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum ShapeDef {
    Sphere { center: [f64; 3], radius: f64 },
    Box { center: [f64; 3], half_extents: [f64; 3] },
    Plane { normal: [f64; 3], offset: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PrimitiveDef {
    class_id: u32,
    albedo: [f64; 3],
    shape: ShapeDef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoundsDef {
    min: [f64; 3],
    max: [f64; 3],
}

/// Scene file schema:
///
/// ```toml
/// ambient = 0.3
/// diffuse = 0.7
/// light_dir = [0.0, 0.0, 1.0]
///
/// [bounds]
/// min = [-1.0, -1.0, -1.0]
/// max = [1.0, 1.0, 1.0]
///
/// [[primitives]]
/// class_id = 1
/// albedo = [0.8, 0.2, 0.2]
/// shape = { kind = "sphere", center = [0.0, 0.0, 0.0], radius = 0.3 }
/// ```
///
/// Shapes are `sphere` (center, radius), `box` (center, half_extents) or
/// `plane` (normal, offset; solid where `normal . x < offset`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneDef {
    ambient: f64,
    diffuse: f64,
    light_dir: [f64; 3],
    bounds: BoundsDef,
    primitives: Vec<PrimitiveDef>,
}

fn v3(a: [f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

fn a3(v: &Vec3) -> [f64; 3] {
    [v.x, v.y, v.z]
}

pub fn scene_to_toml(scene: &SyntheticScene) -> String {
    let def = SceneDef {
        ambient: scene.ambient,
        diffuse: scene.diffuse,
        light_dir: a3(&scene.light_dir),
        bounds: BoundsDef {
            min: a3(&scene.bounds.min),
            max: a3(&scene.bounds.max),
        },
        primitives: scene
            .primitives
            .iter()
            .map(|p| PrimitiveDef {
                class_id: p.class_id,
                albedo: p.albedo,
                shape: match p.shape {
                    Shape::Sphere { center, radius } => ShapeDef::Sphere {
                        center: a3(&center),
                        radius,
                    },
                    Shape::Box { center, half_extents } => ShapeDef::Box {
                        center: a3(&center),
                        half_extents: a3(&half_extents),
                    },
                    Shape::Plane { normal, offset } => ShapeDef::Plane {
                        normal: a3(&normal),
                        offset,
                    },
                },
            })
            .collect(),
    };
    toml::to_string(&def).expect("scene definitions always serialize")
}

pub fn scene_from_toml(text: &str) -> Result<SyntheticScene> {
    let def: SceneDef = toml::from_str(text).map_err(|e| Error::format("scene file", e.message().to_string()))?;
    let primitives = def
        .primitives
        .into_iter()
        .map(|p| {
            let shape = match p.shape {
                ShapeDef::Sphere { center, radius } => Shape::Sphere {
                    center: v3(center),
                    radius,
                },
                ShapeDef::Box { center, half_extents } => Shape::Box {
                    center: v3(center),
                    half_extents: v3(half_extents),
                },
                ShapeDef::Plane { normal, offset } => Shape::Plane {
                    normal: v3(normal),
                    offset,
                },
            };
            ScenePrimitive::new(shape, p.albedo, p.class_id)
        })
        .collect::<Result<Vec<_>>>()?;
    let bounds = Aabb::new(v3(def.bounds.min), v3(def.bounds.max))?;
    SyntheticScene::new(primitives, bounds, def.ambient, def.diffuse, v3(def.light_dir))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::extract_mesh;
    use crate::scene::{ground_truth_tsdf, orbit_poses, presets, render_frame, SensorConfig};

    fn frames(n: usize) -> Vec<FrameObservation> {
        let scene = presets::tabletop(3, 2);
        let intr = CameraIntrinsics::from_fov(10, 8, 60.0).unwrap();
        let sensor = SensorConfig {
            feature_dim: 3,
            depth_noise_std: 0.01,
            ..SensorConfig::default()
        };
        orbit_poses(Vec3::new(0.0, 0.0, 0.2), 1.0, 30.0, n.max(1))
            .unwrap()
            .iter()
            .take(n)
            .enumerate()
            .map(|(i, p)| render_frame(&scene, p, &intr, &sensor, i as u64).unwrap())
            .collect()
    }

    #[test]
    fn frame_archive_round_trips() {
        let f = frames(3);
        let b = frames_to_bytes(&f);
        let back = frames_from_bytes(&b).unwrap();
        assert_eq!(back, f);
        assert_eq!(frames_to_bytes(&back), b);
    }

    #[test]
    fn empty_archive_keeps_its_header() {
        let b = frames_to_bytes(&[]);
        assert_eq!(b.len(), 12);
        assert_eq!(&b[..4], b"VFFA");
        assert!(frames_from_bytes(&b).unwrap().is_empty());
    }

    #[test]
    fn loaders_reject_damage() {
        let b = frames_to_bytes(&frames(1));
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(frames_from_bytes(&bad).is_err());
        let mut bad = b.clone();
        bad[4] = 9;
        assert!(frames_from_bytes(&bad).is_err());
        assert!(frames_from_bytes(&b[..b.len() - 1]).is_err());
        let mut long = b.clone();
        long.push(0);
        assert!(frames_from_bytes(&long).is_err());
        assert!(volume_from_bytes(&b).is_err());
    }

    #[test]
    fn snapshots_round_trip() {
        let grid = GridSpec::new([-0.6, -0.6, -0.1], 0.1, [12, 12, 7]).unwrap();
        let f = frames(2);
        let maps: Vec<Vec<f64>> = f.iter().map(|x| x.teacher.clone()).collect();
        let s = crate::fusion::fuse_frames(grid, 0.3, &f, &maps, 3).unwrap();
        let b = state_to_bytes(&s);
        let back = state_from_bytes(&b).unwrap();
        assert_eq!(state_to_bytes(&back), b);
        assert_eq!(back.tsdf, s.tsdf);
        assert_eq!(back.feat_m2, s.feat_m2);

        let vb = volume_to_bytes(&s.feat_mean);
        assert_eq!(volume_from_bytes(&vb).unwrap(), s.feat_mean);
        assert!(state_from_bytes(&vb).is_err());
    }

    #[test]
    fn ply_round_trips_with_and_without_color() {
        let scene = presets::single_sphere(Vec3::zeros(), 0.3);
        let grid = GridSpec::new([-0.5; 3], 0.1, [10; 3]).unwrap();
        let mesh = extract_mesh(&ground_truth_tsdf(&scene, &grid, 0.3).unwrap(), 0.0).unwrap();
        let text = mesh_to_ply(&mesh, None).unwrap();
        let (back, c) = mesh_from_ply(&text).unwrap();
        assert!(c.is_none());
        assert_eq!(back, mesh);
        assert_eq!(mesh_to_ply(&back, None).unwrap(), text);

        let colors: Vec<[u8; 3]> = (0..mesh.vertices.len()).map(|i| [i as u8, 7, 255]).collect();
        let text = mesh_to_ply(&mesh, Some(&colors)).unwrap();
        let (back, c) = mesh_from_ply(&text).unwrap();
        assert_eq!(c.unwrap(), colors);
        assert_eq!(mesh_to_ply(&back, Some(&colors)).unwrap(), text);
        assert!(mesh_to_ply(&mesh, Some(&colors[1..])).is_err());
    }

    #[test]
    fn scene_files_round_trip() {
        for scene in [presets::tabletop(5, 3), presets::room(), presets::search(2, 1, 0.1)] {
            let text = scene_to_toml(&scene);
            let back = scene_from_toml(&text).unwrap();
            assert_eq!(back, scene);
            assert_eq!(scene_to_toml(&back), text);
        }
    }

    #[test]
    fn scene_files_reject_unknown_keys_and_bad_shapes() {
        let good = scene_to_toml(&presets::single_sphere(Vec3::zeros(), 0.3));
        assert!(scene_from_toml(&format!("extra = 1\n{good}")).is_err());
        let neg = good.replace("radius = 0.3", "radius = -0.3");
        assert!(neg != good && scene_from_toml(&neg).is_err());
        let unknown = good.replace("kind = \"sphere\"", "kind = \"cone\"");
        assert!(scene_from_toml(&unknown).is_err());
    }
}
