use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use imls::geometry::{primitives, sample_surface, Vec3};
use imls::io;
use imls::mesher::extract_mesh;
use imls::metrics::{evaluate_meshes, MetricOptions};
use imls::recon::reconstruct;

fn imls(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_imls")).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

fn s(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_sphere(dir: &Path, radius: f64, subdivisions: u32) -> PathBuf {
    let path = p(dir, "sphere.obj");
    let m = primitives::icosphere(Vec3::zero(), radius, subdivisions);
    std::fs::write(&path, io::format_obj(&m)).unwrap();
    path
}

#[test]
fn header_echoes_version_seed_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let obj = write_sphere(dir.path(), 0.5, 2);
    let out = p(dir.path(), "c.xyz");
    let o = imls(&["--seed", "7", "sample", "--mesh", s(&obj), "--n", "50", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let e = stderr(&o);
    assert!(e.contains(&format!("# imls {}", env!("CARGO_PKG_VERSION"))));
    assert!(e.contains("# seed 7"));
    assert!(e.contains("# config n=50"));
    assert!(e.contains("# config noise=0"));
}

#[test]
fn validation_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let obj = write_sphere(dir.path(), 0.5, 1);
    let g = p(dir.path(), "g.bin");
    let o = imls(&["sdf", "--mesh", s(&obj), "--res", "1", "--out", s(&g)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("resolution too small"));

    let o = imls(&["sdf", "--mesh", s(&p(dir.path(), "missing.obj")), "--out", s(&g)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing.obj"));

    let o = imls(&["mesh", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));

    let empty = p(dir.path(), "empty.obj");
    std::fs::write(&empty, "# nothing\n").unwrap();
    let o = imls(&["eval", "--pred", s(&empty), "--gt", s(&obj)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("empty prediction"));
}

#[test]
fn recon_requires_normals_and_handles_two_points() {
    let dir = tempfile::tempdir().unwrap();
    let bare = p(dir.path(), "bare.xyz");
    std::fs::write(&bare, "0 0 0\n0.1 0 0\n").unwrap();
    let mls = p(dir.path(), "m.txt");
    let o = imls(&["recon", "--cloud", s(&bare), "--out", s(&mls)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("normals"));

    let two = p(dir.path(), "two.xyz");
    std::fs::write(&two, "0 0 0 0 0 1\n0.03 0 0.04 0 0 1\n").unwrap();
    let o = imls(&["recon", "--cloud", s(&two), "--out", s(&mls)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let set = io::read_mls::<f64>(&mls).unwrap();
    for q in set.points() {
        assert!((q.radius - 0.05).abs() < 1e-12);
    }
}

#[test]
fn config_file_values_yield_to_flags_and_unknown_keys_fail() {
    let dir = tempfile::tempdir().unwrap();
    let obj = write_sphere(dir.path(), 0.5, 2);
    let cfg = p(dir.path(), "run.cfg");
    let out = p(dir.path(), "c.xyz");
    std::fs::write(&cfg, "n = 40\nseed = 3\n").unwrap();
    let o = imls(&["--config", s(&cfg), "sample", "--mesh", s(&obj), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 40);
    assert!(stderr(&o).contains("# seed 3"));
    let o = imls(&["--config", s(&cfg), "sample", "--mesh", s(&obj), "--n", "12", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 12);

    std::fs::write(&cfg, "n = 40\nresolution = 9\n").unwrap();
    let o = imls(&["--config", s(&cfg), "sample", "--mesh", s(&obj), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown config key"));
}

#[test]
fn recon_pipeline_matches_in_process_and_is_accurate() {
    let dir = tempfile::tempdir().unwrap();
    let obj = write_sphere(dir.path(), 0.5, 5);
    let (cloud, mls, mesh, gt) = (p(dir.path(), "c.xyz"), p(dir.path(), "m.txt"), p(dir.path(), "r.obj"), p(dir.path(), "gt.obj"));
    let run = |args: &[&str]| {
        let o = imls(args);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
        o
    };
    run(&["--seed", "11", "sample", "--mesh", s(&obj), "--n", "3000", "--noise", "0.005", "--out", s(&cloud)]);
    run(&["recon", "--cloud", s(&cloud), "--out", s(&mls)]);
    run(&["mesh", "--mls", s(&mls), "--out", s(&mesh)]);

    let sphere = primitives::icosphere(Vec3::zero(), 0.5f64, 5);
    let c = sample_surface(&sphere, 3000, 0.005, 11).unwrap();
    let direct = extract_mesh(&reconstruct(&c, 10, 6).unwrap(), 128).unwrap();
    assert_eq!(std::fs::read_to_string(&mesh).unwrap(), io::format_obj(&direct));

    std::fs::write(&gt, io::format_obj(&primitives::icosphere(Vec3::zero(), 0.5f64, 6))).unwrap();
    let o = run(&["eval", "--pred", s(&mesh), "--gt", s(&gt), "--iou-samples", "20000", "--record"]);
    let line = String::from_utf8(o.stdout).unwrap();
    let field = |k: &str| -> f64 {
        line.split_whitespace().find_map(|kv| kv.strip_prefix(&format!("{k}="))).unwrap().parse().unwrap()
    };
    assert!(field("cd1") < 0.05, "{line}");
    assert!(field("nc") > 0.97, "{line}");
    assert!(field("iou") > 0.9, "{line}");
}

#[test]
fn eval_of_identical_meshes_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let obj = write_sphere(dir.path(), 0.5, 3);
    let o = imls(&["eval", "--pred", s(&obj), "--gt", s(&obj), "--samples", "4000", "--iou-samples", "4000"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let get = |k: &str| -> f64 {
        text.lines().find_map(|l| l.strip_prefix(&format!("{k} "))).unwrap().parse().unwrap()
    };
    assert_eq!(get("cd1"), 0.0);
    assert_eq!(get("nc"), 1.0);
    assert_eq!(get("iou"), 1.0);
    assert_eq!(get("fscore"), 1.0);
    let same = evaluate_meshes(
        &io::read_obj::<f64>(&obj).unwrap(),
        &io::read_obj::<f64>(&obj).unwrap(),
        &MetricOptions { surface_samples: 4000, iou_samples: 4000, ..MetricOptions::default() },
    )
    .unwrap();
    assert_eq!(text, same.to_kv());
}

#[test]
fn fit_is_reproducible_and_places_s_points_per_octant() {
    let dir = tempfile::tempdir().unwrap();
    let obj = write_sphere(dir.path(), 0.5, 4);
    let g = p(dir.path(), "g.bin");
    let o = imls(&["sdf", "--mesh", s(&obj), "--res", "128", "--out", s(&g)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let grid = io::read_sdf::<f64>(&g).unwrap();
    let octree = imls::octree::build_gt_octree(&grid, 4).unwrap();
    let mut hashes = Vec::new();
    for run in 0..2 {
        let out = p(dir.path(), &format!("m{run}.txt"));
        let args = ["fit", "--sdf", s(&g), "--depth", "4", "--s", "4", "--coarse-epochs", "1", "--fine-epochs", "1", "--out", s(&out)];
        let o = imls(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        let text = std::fs::read_to_string(&out).unwrap();
        let set = io::read_mls::<f64>(&out).unwrap();
        assert_eq!(set.len(), 4 * octree.finest().len());
        let trace = std::fs::read_to_string(format!("{}.trace", out.display())).unwrap();
        assert_eq!(trace.lines().count(), 3);
        hashes.push((text, trace));
    }
    assert_eq!(hashes[0], hashes[1]);
}
