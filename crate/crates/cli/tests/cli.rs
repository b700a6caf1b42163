use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use voxfield::io;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_voxfield"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small model and camera so every subcommand runs in well under a second.
const TINY: [&str; 16] = [
    "--set", "camera.width=16",
    "--set", "camera.height=12",
    "--set", "sensor.feature_dim=3",
    "--set", "model={encoder_channels=2, refine_channels=3, hidden=4, feature_dim=3, count_cap=8.0, beta_init=0.05}",
    "--set", "grid.voxel_size=0.15",
    "--set", "render.n_s=12",
    "--set", "train={m_ref=2, m_tgt=1, n_ray=8, n_s=8, steps=3}",
    "--set", "eval.mc_passes=2",
];

fn tiny(args: &[&str]) -> Vec<String> {
    args.iter().chain(TINY.iter()).map(|s| s.to_string()).collect()
}

fn ok_tiny(args: &[&str]) {
    let v = tiny(args);
    ok(&v.iter().map(String::as_str).collect::<Vec<_>>());
}

fn synth(dir: &Path, n: usize, seed: u64) -> PathBuf {
    ok_tiny(&["synth", "--preset", "tabletop", "--out", p(dir), "--n-frames", &n.to_string(), "--seed", &seed.to_string()]);
    dir.to_path_buf()
}

#[test]
fn synth_is_deterministic() {
    let t = tempfile::tempdir().unwrap();
    let a = synth(&t.path().join("a"), 3, 4);
    let b = synth(&t.path().join("b"), 3, 4);
    for f in ["frames.vffa", "scene.toml"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let c = synth(&t.path().join("c"), 3, 5);
    assert_ne!(std::fs::read(a.join("frames.vffa")).unwrap(), std::fs::read(c.join("frames.vffa")).unwrap());
}

#[test]
fn zero_frames_writes_a_valid_empty_archive() {
    let t = tempfile::tempdir().unwrap();
    let d = synth(t.path(), 0, 1);
    let bytes = std::fs::read(d.join("frames.vffa")).unwrap();
    assert_eq!(&bytes[..4], b"VFFA");
    assert!(io::frames_from_bytes(&bytes).unwrap().is_empty());
}

#[test]
fn orbit_trajectory_matches_init_views() {
    let t = tempfile::tempdir().unwrap();
    let d = synth(t.path(), 4, 1);
    let frames = io::load_frames(&d.join("frames.vffa")).unwrap();
    let poses = voxfield::explorer::init_views(voxfield::geom::Vec3::new(0.0, 0.0, 0.2), 4, 1.0, 35.0).unwrap();
    for (f, p) in frames.iter().zip(&poses) {
        assert_eq!(f.pose, *p);
    }
}

#[test]
fn scene_file_input_round_trips() {
    let t = tempfile::tempdir().unwrap();
    let d = synth(&t.path().join("a"), 2, 3);
    let scene = d.join("scene.toml");
    ok_tiny(&["synth", "--scene", p(&scene), "--out", p(&t.path().join("b")), "--n-frames", "2", "--seed", "3"]);
    assert_eq!(std::fs::read(&scene).unwrap(), std::fs::read(t.path().join("b/scene.toml")).unwrap());
    assert_eq!(
        std::fs::read(d.join("frames.vffa")).unwrap(),
        std::fs::read(t.path().join("b/frames.vffa")).unwrap()
    );
}

#[test]
fn merge_of_split_archives_matches_single_pass() {
    let t = tempfile::tempdir().unwrap();
    let d = synth(t.path(), 5, 2);
    let frames = io::load_frames(&d.join("frames.vffa")).unwrap();
    let (a, b) = (t.path().join("a.vffa"), t.path().join("b.vffa"));
    io::save_frames(&a, &frames[..2]).unwrap();
    io::save_frames(&b, &frames[2..]).unwrap();
    let scene = d.join("scene.toml");
    let [sa, sb, all, merged] =["sa.vffs", "sb.vffs", "all.vffs", "merged.vffs"].map(|n| t.path().join(n));
    ok_tiny(&["fuse", "--frames", p(&a), "--scene", p(&scene), "--out", p(&sa)]);
    ok_tiny(&["fuse", "--frames", p(&b), "--scene", p(&scene), "--out", p(&sb)]);
    ok_tiny(&["fuse", "--frames", p(&d.join("frames.vffa")), "--scene", p(&scene), "--out", p(&all)]);
    ok(&["fuse", "--merge", p(&sa), p(&sb), "--out", p(&merged)]);
    let (x, y) = (io::load_state(&merged).unwrap(), io::load_state(&all).unwrap());
    let pairs = [
        (&x.feat_mean, &y.feat_mean),
        (&x.feat_m2, &y.feat_m2),
        (&x.count, &y.count),
        (&x.tsdf, &y.tsdf),
        (&x.tsdf_weight, &y.tsdf_weight),
    ];
    for (u, v) in pairs {
        let d = u.data.iter().zip(&v.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(d < 1e-9, "{d}");
    }
    assert!(y.tsdf_weight.data.iter().any(|w| *w > 0.0));
}

fn write_pairs(path: &Path, rows: &[(f64, f64)]) {
    let mut s = String::from("error,uncertainty\n");
    for (e, u) in rows {
        s += &format!("{e},{u}\n");
    }
    std::fs::write(path, s).unwrap();
}

#[test]
fn eval_on_uncertainty_equal_error_reports_zero_ause() {
    let t = tempfile::tempdir().unwrap();
    let pairs = t.path().join("pairs.csv");
    let rows: Vec<(f64, f64)> = (0..40).map(|i| ((i * 7 % 13) as f64 * 0.1, (i * 7 % 13) as f64 * 0.1)).collect();
    write_pairs(&pairs, &rows);
    ok(&["eval", "--pairs", p(&pairs), "--out", p(t.path())]);
    let mut r = csv::Reader::from_path(t.path().join("report.csv")).unwrap();
    let h = r.headers().unwrap().clone();
    let rec = r.records().next().unwrap().unwrap();
    for col in ["ause_mae", "ause_mse", "ause_rmse"] {
        let i = h.iter().position(|c| c == col).unwrap();
        assert_eq!(rec[i].parse::<f64>().unwrap(), 0.0, "{col}");
    }
}

#[test]
fn pipeline_runs_end_to_end_and_render_stride_sets_dimensions() {
    let t = tempfile::tempdir().unwrap();
    let d = synth(&t.path().join("data"), 4, 6);
    let model = t.path().join("model");
    ok_tiny(&["train", "--data", p(&d), "--out", p(&model)]);
    let ckpt = model.join("model.vfck");
    let losses = std::fs::read_to_string(model.join("losses.csv")).unwrap();
    assert_eq!(losses.lines().next().unwrap(), "step,total,rgb,feat,tsdf");
    assert_eq!(losses.lines().count(), 4);

    let frames = d.join("frames.vffa");
    let scene = d.join("scene.toml");
    let state = t.path().join("state.vffs");
    ok_tiny(&["fuse", "--frames", p(&frames), "--scene", p(&scene), "--checkpoint", p(&ckpt), "--out", p(&state)]);

    let r = t.path().join("render");
    ok_tiny(&["render", "--checkpoint", p(&ckpt), "--state", p(&state), "--frames", p(&frames), "--stride", "4", "--out", p(&r)]);
    let img = image::open(r.join("view_000_rgb.png")).unwrap();
    assert_eq!((img.width(), img.height()), (4, 3));
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(r.join("render.json")).unwrap()).unwrap();
    assert_eq!(manifest["width"], 4);
    let bin = std::fs::read(r.join("view_000.bin")).unwrap();
    assert_eq!(bin.len(), 8 * 12 * (3 + 5 + 3));
    ok_tiny(&["render", "--checkpoint", p(&ckpt), "--state", p(&state), "--frames", p(&frames), "--stride", "5", "--out", p(&r)]);
    let img = image::open(r.join("view_000_rgb.png")).unwrap();
    assert_eq!((img.width(), img.height()), (4, 3));

    let e = t.path().join("eval");
    ok_tiny(&["eval", "--checkpoint", p(&ckpt), "--state", p(&state), "--frames", p(&frames), "--scene", p(&scene), "--out", p(&e)]);
    let report = std::fs::read_to_string(e.join("report.csv")).unwrap();
    let names: Vec<&str> = report.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["color", "feature", "tsdf", "tsdf_mc_dropout"]);
    assert!(e.join("metrics.csv").exists() && e.join("summary.txt").exists());

    let q = t.path().join("query");
    ok_tiny(&["query", "--checkpoint", p(&ckpt), "--state", p(&state), "--scene", p(&scene), "--out", p(&q)]);
    let sim = io::load_volume(&q.join("similarity.vfvv")).unwrap();
    let s = io::load_state(&state).unwrap();
    assert!(sim.grid.same_layout(s.grid()));
    let ply = std::fs::read_to_string(q.join("mesh.ply")).unwrap();
    let (mesh, colors) = io::mesh_from_ply(&ply).unwrap();
    assert_eq!(colors.unwrap().len(), mesh.vertices.len());

    let search = t.path().join("search");
    ok_tiny(&["synth", "--preset", "search", "--out", p(&search), "--n-frames", "0"]);
    let search_scene = search.join("scene.toml");
    let x = t.path().join("explore");
    let args = ["explore", "--checkpoint", p(&ckpt), "--scene", p(&search_scene), "--out", p(&x), "--set", "policy.n_explore_steps=2", "--set", "policy.n_init_views=2"];
    ok_tiny(&args);
    let log: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(x.join("episode.json")).unwrap()).unwrap();
    assert_eq!(log["poses"].as_array().unwrap().len(), 2 + 2 + 1);
    let first = std::fs::read(x.join("episode.json")).unwrap();
    ok_tiny(&args);
    assert_eq!(std::fs::read(x.join("episode.json")).unwrap(), first);
}

#[test]
fn failures_are_single_line_with_a_code() {
    let t = tempfile::tempdir().unwrap();
    let cases: [(&[&str], &str); 4] = [
        (&["synth", "--preset", "tabletop", "--out", "x", "--set", "bogus=1"], "E_CONFIG"),
        (&["eval", "--pairs", "/nonexistent/pairs.csv", "--out", "x"], "E_IO"),
        (&["fuse", "--merge", "/nonexistent.vffs", "--out", "x"], "E_IO"),
        (&["synth"], "E_USAGE"),
    ];
    for (args, code) in cases {
        let out = bin().current_dir(t.path()).args(args).output().unwrap();
        assert!(!out.status.success());
        let err = String::from_utf8(out.stderr).unwrap();
        assert_eq!(err.lines().count(), 1, "{err}");
        assert!(err.starts_with(&format!("error[{code}]: ")), "{err}");
    }
    let bad = t.path().join("bad.vffs");
    std::fs::write(&bad, b"VFFX\x01\0\0\0").unwrap();
    let out = bin().args(["fuse", "--merge", p(&bad), "--out", "x"]).output().unwrap();
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error[E_FORMAT]: "));
}
