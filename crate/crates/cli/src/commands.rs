use std::fs;
use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};
use voxfield::autodiff::ParamStore;
use voxfield::eval::protocol::{evaluate_field, mc_dropout_tsdf};
use voxfield::eval::{extract_mesh, extract_mesh_masked, reconstruction_metrics, uncertainty_report, TriangleMesh, UncertaintyReport};
use voxfield::explorer::{init_views, run_episode, surface_mask, EpisodeSetup};
use voxfield::field::{Head, Model, UnifiedField};
use voxfield::fusion::{merge_states, FusionState};
use voxfield::geom::Vec3;
use voxfield::io;
use voxfield::query::{argmax_voxel, contrastive_volume, feature_volume, surface_project, QuerySpec};
use voxfield::render::render_image;
use voxfield::scene::{ground_truth_tsdf, mix_seed, presets, random_poses, render_frame, SyntheticScene};
use voxfield::training::{fit, TrainConfig, TrainScene};
use voxfield::volume::VoxelVolume;

use crate::config::RunConfig;
use crate::{CliError, Preset, Trajectory};

pub const FRAMES_FILE: &str = "frames.vffa";
pub const SCENE_FILE: &str = "scene.toml";

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::new("E_IO", format!("cannot write {}: {e}", path.display())))
}

fn make_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::new("E_IO", format!("cannot create {}: {e}", dir.display())))
}

fn read_scene(path: &Path) -> Result<SyntheticScene, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::new("E_IO", format!("cannot read {}: {e}", path.display())))?;
    Ok(io::scene_from_toml(&text)?)
}

fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<Model, CliError> {
    Ok(Model::from_params(cfg.model, ParamStore::load(checkpoint)?)?)
}

/// Decoded geometry extracted over observed voxels.
fn field_mesh(field: &UnifiedField, state: &FusionState) -> Result<TriangleMesh, CliError> {
    let geo = field.decode_voxel_centers(Head::Geo);
    let vol = VoxelVolume::from_data(*state.grid(), 1, geo.mean)?;
    let observed: Vec<bool> = state.tsdf_weight.data.iter().map(|w| *w > 0.0).collect();
    Ok(extract_mesh_masked(&vol, 0.0, &observed)?)
}

pub fn synth(
    cfg: &RunConfig,
    scene: Option<&Path>,
    preset: Option<Preset>,
    out: &Path,
    n_frames: usize,
    trajectory: Trajectory,
) -> Result<(), CliError> {
    let scene = match (scene, preset) {
        (Some(p), _) => read_scene(p)?,
        (None, Some(Preset::Sphere)) => presets::single_sphere(Vec3::zeros(), 0.3),
        (None, Some(Preset::Tabletop)) => presets::tabletop(cfg.seed, 3),
        (None, Some(Preset::Search)) => presets::search(cfg.seed, cfg.query.class_id, 0.1),
        (None, Some(Preset::Room)) => presets::room(),
        (None, None) => return Err(CliError::new("E_USAGE", "pass --scene or --preset")),
    };
    let intr = cfg.intrinsics()?;
    let t = &cfg.trajectory;
    let poses = match (n_frames, trajectory) {
        (0, _) => Vec::new(),
        (n, Trajectory::Orbit) => init_views(cfg.center(), n, t.radius, t.elevation_deg)?,
        (n, Trajectory::Random) => random_poses(cfg.center(), t.radius, n, mix_seed(cfg.seed, u64::MAX))?,
    };
    let frames = poses
        .iter()
        .enumerate()
        .map(|(i, p)| render_frame(&scene, p, &intr, &cfg.sensor, mix_seed(cfg.seed, i as u64)))
        .collect::<voxfield::Result<Vec<_>>>()?;
    make_dir(out)?;
    io::save_frames(&out.join(FRAMES_FILE), &frames)?;
    write_text(&out.join(SCENE_FILE), &io::scene_to_toml(&scene))
}

pub fn fuse(cfg: &RunConfig, archives: &[std::path::PathBuf], scene: Option<&Path>, checkpoint: Option<&Path>, out: &Path) -> Result<(), CliError> {
    if archives.is_empty() {
        return Err(CliError::new("E_USAGE", "pass at least one --frames archive, or --merge snapshots"));
    }
    let scene = scene.map(read_scene).transpose()?;
    let grid = cfg.grid_for(scene.as_ref())?;
    let model = match checkpoint {
        Some(c) => load_model(cfg, c)?,
        None => Model::init(cfg.model, cfg.seed)?,
    };
    let mut frames = Vec::new();
    for a in archives {
        frames.extend(io::load_frames(a)?);
    }
    let state = model.fuse(grid, cfg.trunc(), &frames)?;
    Ok(io::save_state(out, &state)?)
}

pub fn merge(snapshots: &[std::path::PathBuf], out: &Path) -> Result<(), CliError> {
    let mut merged = io::load_state(&snapshots[0])?;
    for s in &snapshots[1..] {
        merged = merge_states(&merged, &io::load_state(s)?)?;
    }
    Ok(io::save_state(out, &merged)?)
}

pub fn train(cfg: &RunConfig, data: &[std::path::PathBuf], out: &Path) -> Result<(), CliError> {
    let mut scenes = Vec::new();
    for dir in data {
        let scene = read_scene(&dir.join(SCENE_FILE))?;
        let frames = io::load_frames(&dir.join(FRAMES_FILE))?;
        let grid = cfg.grid_for(Some(&scene))?;
        scenes.push(TrainScene::new(&scene, frames, grid, cfg.trunc())?);
    }
    let tcfg = TrainConfig {
        seed: cfg.seed,
        ..cfg.train
    };
    make_dir(out)?;
    let model = Model::init(cfg.model, cfg.seed)?;
    let result = fit(&scenes, model, &tcfg, Some(out))?;
    result.model.params.save(&out.join("model.vfck"))?;
    let mut w = csv::Writer::from_path(out.join("losses.csv"))?;
    for r in &result.history {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Layout of the per-view raw buffer files written by `render`.
#[derive(Serialize)]
struct RenderManifest {
    width: usize,
    height: usize,
    stride: usize,
    feature_dim: usize,
    /// Arrays in file order, each row-major over the output pixels, f64 little endian.
    arrays: [&'static str; 7],
    views: Vec<String>,
}

pub fn render(cfg: &RunConfig, checkpoint: &Path, state: &Path, frames: &Path, stride: usize, out: &Path) -> Result<(), CliError> {
    let model = load_model(cfg, checkpoint)?;
    let state = io::load_state(state)?;
    let field = model.field(&state)?;
    let frames = io::load_frames(frames)?;
    make_dir(out)?;
    let mut manifest = RenderManifest {
        width: 0,
        height: 0,
        stride,
        feature_dim: cfg.model.feature_dim,
        arrays: ["rgb", "depth", "opacity", "logvar_c", "logvar_f", "logvar_s", "feature"],
        views: Vec::new(),
    };
    for (k, f) in frames.iter().enumerate() {
        let img = render_image(&field, field.grid(), &f.pose, &f.intr, cfg.render.n_s, stride)?;
        let (w, h) = (img.width as u32, img.height as u32);
        let rgb = ImageBuffer::from_fn(w, h, |x, y| {
            let c = img.pixels[(y * w + x) as usize].color;
            Rgb(c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
        });
        // depth in millimeters, expected depth normalized by opacity
        let depth = ImageBuffer::from_fn(w, h, |x, y| {
            let p = &img.pixels[(y * w + x) as usize];
            let d = if p.opacity > 1e-6 { p.depth / p.opacity } else { 0.0 };
            Luma([(d * 1000.0).round().clamp(0.0, u16::MAX as f64) as u16])
        });
        let name = format!("view_{k:03}");
        rgb.save(out.join(format!("{name}_rgb.png")))?;
        depth.save(out.join(format!("{name}_depth.png")))?;
        let mut bytes = Vec::new();
        let mut put = |v: f64| bytes.extend_from_slice(&v.to_le_bytes());
        img.rgb().into_iter().for_each(&mut put);
        img.pixels.iter().for_each(|p| put(p.depth));
        img.pixels.iter().for_each(|p| put(p.opacity));
        img.pixels.iter().for_each(|p| put(p.logvar_c));
        img.pixels.iter().for_each(|p| put(p.logvar_f));
        img.pixels.iter().for_each(|p| put(p.logvar_s));
        for p in &img.pixels {
            if p.feature.is_empty() {
                (0..cfg.model.feature_dim).for_each(|_| put(0.0));
            } else {
                p.feature.iter().for_each(|&v| put(v));
            }
        }
        fs::write(out.join(format!("{name}.bin")), bytes)?;
        manifest.width = img.width;
        manifest.height = img.height;
        manifest.views.push(name);
    }
    write_text(&out.join("render.json"), &serde_json::to_string_pretty(&manifest)?)
}

#[derive(Serialize)]
struct ReportRow<'a> {
    quantity: &'a str,
    n: usize,
    ause_mae: f64,
    ause_mse: f64,
    ause_rmse: f64,
    rho: f64,
    p_value: f64,
    significant: bool,
}

fn write_reports(path: &Path, rows: &[(&str, UncertaintyReport)]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    for (q, r) in rows {
        w.serialize(ReportRow {
            quantity: q,
            n: r.n,
            ause_mae: r.ause_mae,
            ause_mse: r.ause_mse,
            ause_rmse: r.ause_rmse,
            rho: r.rho,
            p_value: r.p_value,
            significant: r.significant,
        })?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Deserialize)]
struct Pair {
    error: f64,
    uncertainty: f64,
}

pub fn eval_pairs(pairs: &Path, out: &Path) -> Result<(), CliError> {
    let mut r = csv::Reader::from_path(pairs)?;
    let (mut e, mut u) = (Vec::new(), Vec::new());
    for row in r.deserialize() {
        let p: Pair = row.map_err(|err| CliError::new("E_FORMAT", format!("{}: {err}", pairs.display())))?;
        e.push(p.error);
        u.push(p.uncertainty);
    }
    let rep = uncertainty_report(&e, &u)?;
    make_dir(out)?;
    write_reports(&out.join("report.csv"), &[("pairs", rep)])
}

pub fn eval(cfg: &RunConfig, checkpoint: &Path, state: &Path, frames: &Path, scene: &Path, out: &Path) -> Result<(), CliError> {
    let model = load_model(cfg, checkpoint)?;
    let state = io::load_state(state)?;
    let scene = read_scene(scene)?;
    let frames = io::load_frames(frames)?;
    let field = model.field(&state)?;
    let grid = *state.grid();
    let gt = ground_truth_tsdf(&scene, &grid, state.trunc)?;
    let all = vec![true; grid.n_voxels()];
    let ev = evaluate_field(&field, &frames, &gt, &all, cfg.render.n_s, 1)?;
    let mut rows = vec![
        ("color", ev.color.report()?),
        ("feature", ev.feature.report()?),
        ("tsdf", ev.tsdf.report()?),
    ];
    if cfg.eval.mc_passes > 0 {
        let mc = mc_dropout_tsdf(&model, &state, &all, cfg.eval.mc_passes, cfg.eval.mc_rate, cfg.seed)?;
        rows.push(("tsdf_mc_dropout", uncertainty_report(&ev.tsdf.errors, &mc)?));
    }
    make_dir(out)?;
    write_reports(&out.join("report.csv"), &rows)?;

    let pred = field_mesh(&field, &state)?;
    let gt_mesh = extract_mesh(&gt, 0.0)?;
    let m = reconstruction_metrics(&pred, &gt_mesh, cfg.eval.threshold, cfg.eval.n_points, cfg.seed)?;
    let mut w = csv::Writer::from_path(out.join("metrics.csv"))?;
    w.serialize(m)?;
    w.flush()?;

    let mut summary = String::new();
    for (q, r) in &rows {
        summary += &format!(
            "{q:<16} n={:<7} AUSE mae {:.4} mse {:.4} rmse {:.4}  spearman {:+.3} (p={:.2e})\n",
            r.n, r.ause_mae, r.ause_mse, r.ause_rmse, r.rho, r.p_value
        );
    }
    summary += &format!(
        "mesh             accuracy {:.4} m  completeness {:.4} m  chamfer {:.4} m  precision {:.3}  recall {:.3}  F {:.3}\n",
        m.accuracy, m.completeness, m.chamfer, m.precision, m.recall, m.fscore
    );
    write_text(&out.join("summary.txt"), &summary)
}

#[derive(Serialize)]
struct QueryResult {
    class_id: u32,
    best_voxel: Option<[usize; 3]>,
    best_position: Option<[f64; 3]>,
    best_score: Option<f64>,
}

fn ramp(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    [(255.0 * v).round() as u8, 64, (255.0 * (1.0 - v)).round() as u8]
}

pub fn query(cfg: &RunConfig, checkpoint: &Path, state: &Path, scene: &Path, out: &Path) -> Result<(), CliError> {
    let model = load_model(cfg, checkpoint)?;
    let state = io::load_state(state)?;
    let scene = read_scene(scene)?;
    let field = model.field(&state)?;
    let q = QuerySpec::for_scene_class(&scene, cfg.query.class_id, cfg.model.feature_dim, cfg.sensor.teacher_seed, cfg.query.temperature)?;
    let sim = contrastive_volume(&feature_volume(&field), &q)?;
    make_dir(out)?;
    io::save_volume(&out.join("similarity.vfvv"), &sim)?;
    let mesh = field_mesh(&field, &state)?;
    let values = surface_project(&sim, &mesh)?;
    let colors: Vec<[u8; 3]> = values.iter().map(|&v| ramp(v)).collect();
    write_text(&out.join("mesh.ply"), &io::mesh_to_ply(&mesh, Some(&colors))?)?;
    let band = surface_mask(&field, cfg.policy.surface_band);
    let best = argmax_voxel(&sim, Some(&band));
    let grid = *state.grid();
    let res = QueryResult {
        class_id: cfg.query.class_id,
        best_voxel: best.map(|l| grid.unravel(l)),
        best_position: best.map(|l| {
            let c = grid.voxel_center(grid.unravel(l));
            [c.x, c.y, c.z]
        }),
        best_score: best.map(|l| sim.data[l]),
    };
    write_text(&out.join("query.json"), &serde_json::to_string_pretty(&res)?)
}

pub fn explore(cfg: &RunConfig, checkpoint: &Path, scene: &Path, out: &Path) -> Result<(), CliError> {
    let model = load_model(cfg, checkpoint)?;
    let scene = read_scene(scene)?;
    let setup = EpisodeSetup {
        grid: cfg.grid_for(Some(&scene))?,
        trunc: cfg.trunc(),
        intr: cfg.intrinsics()?,
        sensor: cfg.sensor,
        target_class: cfg.query.class_id,
    };
    let q = QuerySpec::for_scene_class(&scene, cfg.query.class_id, cfg.model.feature_dim, cfg.sensor.teacher_seed, cfg.query.temperature)?;
    let policy = voxfield::explorer::PolicyConfig {
        seed: cfg.seed,
        ..cfg.policy
    };
    let ep = run_episode(&scene, &q, &model, &setup, &policy, cfg.seed)?;
    make_dir(out)?;
    io::save_state(&out.join("state.vffs"), &ep.state)?;
    write_text(&out.join("episode.json"), &serde_json::to_string_pretty(&ep.log)?)
}
