//! Marching-cubes surface extraction and point-sampled reconstruction metrics.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rstar::{PointDistance, RTree};
use serde::Serialize;

use super::mc_tables::TRIANGLES;
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::volume::VoxelVolume;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t].map(|i| self.vertices[i]);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    pub fn translated(&self, d: Vec3) -> TriangleMesh {
        TriangleMesh {
            vertices: self.vertices.iter().map(|v| v + d).collect(),
            triangles: self.triangles.clone(),
        }
    }

    /// Appends another mesh, re-indexing its triangles.
    pub fn append(&mut self, other: &TriangleMesh) {
        let off = self.vertices.len();
        self.vertices.extend_from_slice(&other.vertices);
        self.triangles.extend(other.triangles.iter().map(|t| t.map(|i| i + off)));
    }

    pub fn validate(&self) -> Result<()> {
        if self.triangles.iter().flatten().any(|&i| i >= self.vertices.len()) {
            return Err(Error::domain("triangle index out of range"));
        }
        Ok(())
    }

    /// `n` points drawn uniformly over the surface area.
    pub fn sample_points(&self, n: usize, seed: u64) -> Result<Vec<Vec3>> {
        if self.is_empty() {
            return Err(Error::domain("cannot sample an empty mesh"));
        }
        let mut cdf = Vec::with_capacity(self.triangles.len());
        let mut acc = 0.0;
        for t in 0..self.triangles.len() {
            acc += self.triangle_area(t);
            cdf.push(acc);
        }
        if !(acc > 0.0) {
            return Err(Error::domain("mesh has zero area"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..n)
            .map(|_| {
                let r = rng.gen::<f64>() * acc;
                let t = cdf.partition_point(|&c| c <= r).min(cdf.len() - 1);
                let [a, b, c] = self.triangles[t].map(|i| self.vertices[i]);
                let (mut u, mut v) = (rng.gen::<f64>(), rng.gen::<f64>());
                if u + v > 1.0 {
                    u = 1.0 - u;
                    v = 1.0 - v;
                }
                a + (b - a) * u + (c - a) * v
            })
            .collect())
    }
}

/// Cube corner offsets and edge endpoints in the table's numbering.
const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];
const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

/// Marching cubes over voxel centers of a 1-channel volume.
pub fn extract_mesh(tsdf: &VoxelVolume, iso: f64) -> Result<TriangleMesh> {
    extract(tsdf, iso, None)
}

/// As [`extract_mesh`], skipping every cube with a corner where `observed` is false.
pub fn extract_mesh_masked(tsdf: &VoxelVolume, iso: f64, observed: &[bool]) -> Result<TriangleMesh> {
    if observed.len() != tsdf.n_voxels() {
        return Err(Error::domain("observation mask size differs from the volume"));
    }
    extract(tsdf, iso, Some(observed))
}

fn extract(tsdf: &VoxelVolume, iso: f64, observed: Option<&[bool]>) -> Result<TriangleMesh> {
    if tsdf.channels != 1 {
        return Err(Error::domain("mesh extraction needs a single-channel volume"));
    }
    let grid = tsdf.grid;
    let d = grid.dims;
    let mut mesh = TriangleMesh::default();
    if d.iter().any(|&n| n < 2) {
        return Ok(mesh);
    }
    // vertex per crossed grid edge, keyed by (lower voxel, axis)
    let mut edge_vertex: HashMap<(usize, u8), usize> = HashMap::new();
    for i in 0..d[0] - 1 {
        for j in 0..d[1] - 1 {
            for k in 0..d[2] - 1 {
                let lin = CORNERS.map(|o| grid.linear_index([i + o[0], j + o[1], k + o[2]]));
                if let Some(mask) = observed {
                    if lin.iter().any(|&l| !mask[l]) {
                        continue;
                    }
                }
                let vals = lin.map(|l| tsdf.data[l]);
                if vals.iter().any(|v| !v.is_finite()) {
                    continue;
                }
                let mut case = 0usize;
                for (c, v) in vals.iter().enumerate() {
                    if *v < iso {
                        case |= 1 << c;
                    }
                }
                if case == 0 || case == 255 {
                    continue;
                }
                let mut local = [usize::MAX; 12];
                let row = &TRIANGLES[case];
                for &e in row.iter().take_while(|&&e| e >= 0) {
                    let e = e as usize;
                    if local[e] != usize::MAX {
                        continue;
                    }
                    let [a, b] = EDGES[e];
                    let (ca, cb) = (CORNERS[a], CORNERS[b]);
                    let (lo, hi) = if ca <= cb { (a, b) } else { (b, a) };
                    let axis = (0..3).find(|&q| CORNERS[lo][q] != CORNERS[hi][q]).unwrap() as u8;
                    let key = (lin[lo], axis);
                    let idx = *edge_vertex.entry(key).or_insert_with(|| {
                        let pa = grid.voxel_center([i + ca[0], j + ca[1], k + ca[2]]);
                        let pb = grid.voxel_center([i + cb[0], j + cb[1], k + cb[2]]);
                        let (va, vb) = (vals[a], vals[b]);
                        let t = if (vb - va).abs() > 0.0 { (iso - va) / (vb - va) } else { 0.5 };
                        mesh.vertices.push(pa + (pb - pa) * t.clamp(0.0, 1.0));
                        mesh.vertices.len() - 1
                    });
                    local[e] = idx;
                }
                for tri in row.chunks(3).take_while(|c| c[0] >= 0) {
                    let t = [local[tri[0] as usize], local[tri[1] as usize], local[tri[2] as usize]];
                    let [a, b, c] = t.map(|v| mesh.vertices[v]);
                    if (b - a).cross(&(c - a)).norm() > 1e-14 {
                        mesh.triangles.push(t);
                    }
                }
            }
        }
    }
    Ok(mesh)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReconstructionMetrics {
    pub accuracy: f64,
    pub completeness: f64,
    pub chamfer: f64,
    pub precision: f64,
    pub recall: f64,
    pub fscore: f64,
}

/// Distance from each query to its nearest point of `cloud`.
pub fn nearest_distances(queries: &[Vec3], cloud: &[Vec3]) -> Vec<f64> {
    let pts: Vec<[f64; 3]> = cloud.iter().map(|p| [p.x, p.y, p.z]).collect();
    let tree = RTree::bulk_load(pts);
    queries
        .par_iter()
        .map(|q| {
            let q = [q.x, q.y, q.z];
            tree.nearest_neighbor(&q).map_or(f64::INFINITY, |p| p.distance_2(&q).sqrt())
        })
        .collect()
}

/// Metrics from already sampled point sets.
pub fn metrics_from_points(pred: &[Vec3], gt: &[Vec3], threshold: f64) -> Result<ReconstructionMetrics> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::domain("reconstruction metrics need nonempty point sets"));
    }
    let d_pred = nearest_distances(pred, gt);
    let d_gt = nearest_distances(gt, pred);
    Ok(metrics_from_distances(&d_pred, &d_gt, threshold))
}

/// Metrics from nearest-neighbor distances pred -> gt and gt -> pred.
pub fn metrics_from_distances(d_pred: &[f64], d_gt: &[f64], threshold: f64) -> ReconstructionMetrics {
    let mean = |d: &[f64]| d.iter().sum::<f64>() / d.len() as f64;
    let frac = |d: &[f64]| d.iter().filter(|&&x| x < threshold).count() as f64 / d.len() as f64;
    let (accuracy, completeness) = (mean(d_pred), mean(d_gt));
    let (precision, recall) = (frac(d_pred), frac(d_gt));
    let fscore = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    ReconstructionMetrics {
        accuracy,
        completeness,
        chamfer: 0.5 * (accuracy + completeness),
        precision,
        recall,
        fscore,
    }
}

pub fn reconstruction_metrics(
    pred: &TriangleMesh,
    gt: &TriangleMesh,
    threshold: f64,
    n_points: usize,
    seed: u64,
) -> Result<ReconstructionMetrics> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::domain("reconstruction metrics need nonempty meshes"));
    }
    let a = pred.sample_points(n_points, seed)?;
    let b = gt.sample_points(n_points, seed.wrapping_add(1))?;
    metrics_from_points(&a, &b, threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::GridSpec;

    fn volume(n: usize, vs: f64, f: impl Fn(&Vec3) -> f64) -> VoxelVolume {
        let grid = GridSpec::new([-(n as f64) * vs / 2.0; 3], vs, [n; 3]).unwrap();
        let data = grid.centers().iter().map(f).collect();
        VoxelVolume::from_data(grid, 1, data).unwrap()
    }

    #[test]
    fn positive_volume_is_empty() {
        let v = volume(6, 0.1, |_| 0.5);
        assert!(extract_mesh(&v, 0.0).unwrap().is_empty());
    }

    #[test]
    fn sphere_vertices_lie_on_sphere() {
        let (c, r) = (Vec3::new(0.02, -0.03, 0.01), 0.3);
        let v = volume(32, 1.0 / 32.0, |x| (x - c).norm() - r);
        let m = extract_mesh(&v, 0.0).unwrap();
        m.validate().unwrap();
        assert!(m.triangles.len() > 100);
        let vs = v.grid.voxel_size;
        for p in &m.vertices {
            assert!(((p - c).norm() - r).abs() < vs);
        }
        assert!((m.area() - 4.0 * std::f64::consts::PI * r * r).abs() < 0.05 * m.area());
        for t in 0..m.triangles.len() {
            assert!(m.triangle_area(t) > 0.0);
        }
    }

    #[test]
    fn plane_vertices_at_height() {
        let h = 0.0371;
        let v = volume(10, 0.1, |x| x.z - h);
        let m = extract_mesh(&v, 0.0).unwrap();
        assert!(!m.is_empty());
        for p in &m.vertices {
            assert!((p.z - h).abs() < 1e-6);
        }
        // shared edges produce a closed grid of vertices, not per-cube copies
        assert_eq!(m.vertices.len(), 100);
    }

    #[test]
    fn masked_extraction_skips_unobserved_cubes() {
        let v = volume(10, 0.1, |x| x.z - 0.0371);
        let mut mask = vec![true; v.n_voxels()];
        for l in 0..v.n_voxels() {
            if v.grid.unravel(l)[0] >= 5 {
                mask[l] = false;
            }
        }
        let full = extract_mesh(&v, 0.0).unwrap();
        let half = extract_mesh_masked(&v, 0.0, &mask).unwrap();
        assert!(half.triangles.len() * 2 < full.triangles.len());
        let x_max = v.grid.voxel_center([4, 0, 0]).x;
        assert!(half.vertices.iter().all(|p| p.x <= x_max + 1e-12));
    }

    fn unit_cube(offset: Vec3) -> TriangleMesh {
        let mut m = TriangleMesh::default();
        for &(axis, side) in &[(0, 0.0), (0, 1.0), (1, 0.0), (1, 1.0), (2, 0.0), (2, 1.0)] {
            let base = m.vertices.len();
            let (u, w) = ((axis + 1) % 3, (axis + 2) % 3);
            for &(a, b) in &[(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)] {
                let mut p = Vec3::zeros();
                p[axis] = side;
                p[u] = a;
                p[w] = b;
                m.vertices.push(p + offset);
            }
            m.triangles.push([base, base + 1, base + 2]);
            m.triangles.push([base, base + 2, base + 3]);
        }
        m
    }

    fn brute_nearest(q: &[Vec3], cloud: &[Vec3]) -> Vec<f64> {
        q.iter()
            .map(|a| cloud.iter().map(|b| (a - b).norm()).fold(f64::INFINITY, f64::min))
            .collect()
    }

    #[test]
    fn identical_and_translated_meshes() {
        let m = unit_cube(Vec3::zeros());
        assert!((m.area() - 6.0).abs() < 1e-12);
        let pts = m.sample_points(2000, 1).unwrap();
        let r = metrics_from_points(&pts, &pts, 0.05).unwrap();
        assert_eq!((r.accuracy, r.completeness, r.chamfer), (0.0, 0.0, 0.0));
        assert_eq!((r.precision, r.recall, r.fscore), (1.0, 1.0, 1.0));
        let shifted = pts.iter().map(|p| p + Vec3::new(0.01, 0.0, 0.0)).collect::<Vec<_>>();
        let r = metrics_from_points(&shifted, &pts, 0.05).unwrap();
        assert_eq!((r.precision, r.recall), (1.0, 1.0));
        assert!(r.chamfer >= 0.005 && r.chamfer <= 0.01 + 1e-12);
        // independent samples add spacing noise on top of the shift
        let r = reconstruction_metrics(&m.translated(Vec3::new(0.01, 0.0, 0.0)), &m, 0.05, 4000, 2).unwrap();
        assert!(r.precision > 0.98 && r.recall > 0.98);
    }

    #[test]
    fn metrics_match_brute_force_on_offset_cubes() {
        let a = unit_cube(Vec3::zeros());
        let b = unit_cube(Vec3::new(0.1, 0.0, 0.0));
        let pa = a.sample_points(1500, 3).unwrap();
        let pb = b.sample_points(1500, 4).unwrap();
        let fast = metrics_from_points(&pa, &pb, 0.05).unwrap();
        let slow = metrics_from_distances(&brute_nearest(&pa, &pb), &brute_nearest(&pb, &pa), 0.05);
        for (x, y) in [
            (fast.accuracy, slow.accuracy),
            (fast.completeness, slow.completeness),
            (fast.precision, slow.precision),
            (fast.recall, slow.recall),
            (fast.fscore, slow.fscore),
        ] {
            assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
        let ab = reconstruction_metrics(&a, &b, 0.05, 5000, 7).unwrap();
        let ba = reconstruction_metrics(&b, &a, 0.05, 5000, 8).unwrap();
        assert!((ab.chamfer - ba.chamfer).abs() < 0.02 * ab.chamfer);
        assert!(ab.fscore > 0.0 && ab.fscore < 1.0);
    }

    #[test]
    fn empty_mesh_is_rejected() {
        let m = unit_cube(Vec3::zeros());
        assert!(reconstruction_metrics(&TriangleMesh::default(), &m, 0.05, 10, 0).is_err());
    }
}
