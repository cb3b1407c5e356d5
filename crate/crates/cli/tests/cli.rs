use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use clap::Parser;
use hgs_core::gaussian::GaussianCloud;
use hgs_core::scene::{init_cloud, Scene};
use hgs_core::train::Trainer;

fn hgs(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hgs"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("run hgs")
}

fn ok(args: &[&str], cwd: &Path) -> Output {
    let out = hgs(args, cwd);
    assert!(
        out.status.success(),
        "hgs {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn small_scene(dir: &Path, name: &str, seed: &str) -> PathBuf {
    ok(
        &[
            "gen-scene",
            "--views",
            "8",
            "--size",
            "24",
            "--gaussians",
            "40",
            "--seed",
            seed,
            name,
        ],
        dir,
    );
    dir.join(name)
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

const FAST: &[&str] = &[
    "--iters",
    "60",
    "--interval",
    "20",
    "--densify-start",
    "20",
    "--eval-every",
    "20",
    "--init-count",
    "20",
];

fn with<'a>(base: &[&'a str], extra: &[&'a str]) -> Vec<&'a str> {
    base.iter().chain(extra).copied().collect()
}

#[test]
fn gen_scene_layout_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    ok(
        &[
            "gen-scene",
            "--views",
            "16",
            "--size",
            "64",
            "--gaussians",
            "300",
            "--seed",
            "7",
            "out",
        ],
        tmp.path(),
    );
    let cams: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("out/cameras.json")).unwrap()).unwrap();
    assert_eq!(cams.as_array().unwrap().len(), 16);
    let pngs = fs::read_dir(tmp.path().join("out/images")).unwrap().count();
    assert_eq!(pngs, 16);
    assert!(tmp.path().join("out/gt.hgs").exists());

    let a = small_scene(tmp.path(), "a", "3");
    let b = small_scene(tmp.path(), "b", "3");
    let c = small_scene(tmp.path(), "c", "4");
    assert_eq!(tree(&a), tree(&b));
    assert_ne!(tree(&a), tree(&c));
}

#[test]
fn usage_errors_exit_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = hgs(&["gen-scene", "--views", "2", "x"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    let scene = small_scene(tmp.path(), "s", "1");
    let out = hgs(
        &["train", scene.to_str().unwrap(), "--policy", "bogus"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--policy"));
}

#[test]
fn runtime_errors_exit_with_1() {
    let tmp = tempfile::tempdir().unwrap();
    let out = hgs(&["train", "missing-scene"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    let scene = small_scene(tmp.path(), "s", "1");
    GaussianCloud::new().save(&tmp.path().join("empty.hgs")).unwrap();
    let out = hgs(
        &[
            "diag",
            scene.to_str().unwrap(),
            "--checkpoint",
            "empty.hgs",
            "--view",
            "99",
            "--out",
            "d",
        ],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_writes_reports_and_freezes_n_after_densify_end() {
    let tmp = tempfile::tempdir().unwrap();
    small_scene(tmp.path(), "s", "1");
    let args = with(
        &[
            "train",
            "s",
            "--policy",
            "og",
            "--seed",
            "1",
            "--out",
            "run",
            "--tau-grad",
            "1e-5",
        ],
        FAST,
    );
    ok(&args, tmp.path());
    for f in [
        "report.csv",
        "report.json",
        "growth_log.csv",
        "timing.csv",
        "config.toml",
        "checkpoint.hgs",
    ] {
        assert!(tmp.path().join("run").join(f).exists(), "{f}");
    }
    // Densification ends at 60% of 60 iterations.
    let csv = fs::read_to_string(tmp.path().join("run/report.csv")).unwrap();
    let n: Vec<(usize, usize)> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[4].parse().unwrap())
        })
        .collect();
    let after: Vec<usize> = n.iter().filter(|r| r.0 >= 36).map(|r| r.1).collect();
    assert!(after.windows(2).all(|w| w[0] == w[1]), "{n:?}");
    let log = fs::read_to_string(tmp.path().join("run/growth_log.csv")).unwrap();
    assert!(log.starts_with(
        "iteration,policy,N_before,og_count,pghgs_count,rehgs_count,effi_count,union_count,pruned,N_after"
    ));
}

#[test]
fn hgs_logs_hard_gaussian_growth() {
    let tmp = tempfile::tempdir().unwrap();
    small_scene(tmp.path(), "s", "1");
    ok(
        &with(&["train", "s", "--policy", "hgs", "--out", "run"], FAST),
        tmp.path(),
    );
    let log = fs::read_to_string(tmp.path().join("run/growth_log.csv")).unwrap();
    let extra: usize = log
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<usize> = l.split(',').skip(4).take(2).map(|v| v.parse().unwrap()).collect();
            f[0] + f[1]
        })
        .sum();
    assert!(extra > 0, "{log}");
}

#[test]
fn checkpoint_resume_through_the_cli() {
    let tmp = tempfile::tempdir().unwrap();
    let scene_dir = small_scene(tmp.path(), "s", "1");
    let base = with(&["train", "s", "--policy", "hgs"], FAST);
    ok(&with(&base, &["--out", "full"]), tmp.path());
    ok(
        &with(&base, &["--out", "periodic", "--checkpoint-every", "25"]),
        tmp.path(),
    );
    let full = fs::read(tmp.path().join("full/report.json")).unwrap();
    assert_eq!(full, fs::read(tmp.path().join("periodic/report.json")).unwrap());

    // Stop a run with the same flags after 30 iterations.
    let flags = hgs_cli::Cli::parse_from(with(&["hgs"], &base));
    let hgs_cli::Command::Train(a) = flags.command else {
        unreachable!()
    };
    let cfg = a.train.resolve().unwrap();
    let scene = Scene::load(&scene_dir).unwrap();
    let init = init_cloud(&scene, cfg.init.count, cfg.init.mode, cfg.train.seed).unwrap();
    let mut t = Trainer::new(&scene, init, &cfg.train).unwrap();
    t.run_until(30).unwrap();
    t.save_checkpoint(&tmp.path().join("prefix.hgs")).unwrap();

    ok(
        &with(&base, &["--out", "resumed", "--resume", "prefix.hgs"]),
        tmp.path(),
    );
    assert_eq!(full, fs::read(tmp.path().join("resumed/report.json")).unwrap());
    assert_eq!(
        fs::read(tmp.path().join("full/checkpoint.hgs")).unwrap(),
        fs::read(tmp.path().join("resumed/checkpoint.hgs")).unwrap()
    );
}

#[test]
fn config_file_values_are_overridden_by_flags() {
    let tmp = tempfile::tempdir().unwrap();
    small_scene(tmp.path(), "s", "1");
    fs::write(
        tmp.path().join("run.toml"),
        "[init]\ncount = 15\n[train]\ntotal_iters = 40\neval_every = 20\n[train.policy]\npolicy = \"pghgs\"\nk = 2\n",
    )
    .unwrap();
    ok(
        &["train", "s", "--config", "run.toml", "--k", "4", "--out", "run"],
        tmp.path(),
    );
    let cfg: toml::Table =
        toml::from_str(&fs::read_to_string(tmp.path().join("run/config.toml")).unwrap()).unwrap();
    let train = cfg["train"].as_table().unwrap();
    assert_eq!(train["total_iters"].as_integer(), Some(40));
    assert_eq!(train["policy"]["policy"].as_str(), Some("pghgs"));
    assert_eq!(train["policy"]["k"].as_integer(), Some(4));
    assert_eq!(train["policy"]["densify_end"].as_integer(), Some(24));
    assert_eq!(cfg["init"]["count"].as_integer(), Some(15));
}

#[test]
fn compare_single_run_matches_its_report() {
    let tmp = tempfile::tempdir().unwrap();
    small_scene(tmp.path(), "s", "1");
    ok(
        &with(
            &["compare", "s", "--policies", "og", "--seeds", "3", "--out", "cmp"],
            FAST,
        ),
        tmp.path(),
    );
    ok(
        &with(
            &["train", "s", "--policy", "og", "--seed", "3", "--out", "single"],
            FAST,
        ),
        tmp.path(),
    );
    let last = |p: &str| {
        fs::read_to_string(tmp.path().join(p))
            .unwrap()
            .lines()
            .last()
            .unwrap()
            .to_string()
    };
    let report: Vec<String> = last("single/report.csv").split(',').map(String::from).collect();
    let runs: Vec<String> = last("cmp/compare_runs.csv")
        .split(',')
        .map(String::from)
        .collect();
    // test_psnr, test_ssim and final N, as formatted in the report.
    assert_eq!(runs[2..5], report[2..5]);
    let table = fs::read_to_string(tmp.path().join("cmp/compare.csv")).unwrap();
    assert_eq!(table.lines().count(), 2);
    let row: Vec<&str> = table.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[4], report[2]);
    assert_eq!(row[5], "0.000000");
    assert!(fs::read_to_string(tmp.path().join("cmp/compare.md"))
        .unwrap()
        .contains("| og | 1 |"));
    // The per-seed run directory holds the same report bytes.
    assert_eq!(
        fs::read(tmp.path().join("cmp/og/seed_3/report.json")).unwrap(),
        fs::read(tmp.path().join("single/report.json")).unwrap()
    );
}

#[test]
fn compare_aggregates_policies_and_seeds() {
    let tmp = tempfile::tempdir().unwrap();
    small_scene(tmp.path(), "s", "1");
    ok(
        &with(
            &[
                "compare",
                "s",
                "--policies",
                "og,hgs",
                "--seeds",
                "0,1,2",
                "--tau-grad-sweep",
                "2e-4,7e-5",
                "--out",
                "cmp",
            ],
            &[
                "--iters",
                "20",
                "--interval",
                "10",
                "--densify-start",
                "10",
                "--eval-every",
                "20",
                "--init-count",
                "10",
            ],
        ),
        tmp.path(),
    );
    let table = fs::read_to_string(tmp.path().join("cmp/compare.csv")).unwrap();
    let labels: Vec<&str> = table
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(labels, ["og", "hgs", "og@tau=2e-4", "og@tau=7e-5"]);
    assert!(table.lines().skip(1).all(|l| l.split(',').nth(3) == Some("3")));
    let runs = fs::read_to_string(tmp.path().join("cmp/compare_runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 1 + 12);
}

#[test]
fn diag_bundle_for_empty_and_ground_truth_clouds() {
    let tmp = tempfile::tempdir().unwrap();
    small_scene(tmp.path(), "s", "1");
    GaussianCloud::new().save(&tmp.path().join("empty.hgs")).unwrap();
    ok(
        &[
            "diag",
            "s",
            "--checkpoint",
            "empty.hgs",
            "--view",
            "1",
            "--out",
            "d_empty",
        ],
        tmp.path(),
    );
    let idx = image::open(tmp.path().join("d_empty/rendered_index.png"))
        .unwrap()
        .to_rgb8();
    assert!(idx.pixels().all(|p| p.0 == [0, 0, 0]));
    let raw = fs::read(tmp.path().join("d_empty/rendered_index.i32")).unwrap();
    assert_eq!(raw.len(), 24 * 24 * 4);
    assert!(raw
        .chunks_exact(4)
        .all(|c| i32::from_le_bytes(c.try_into().unwrap()) == -1));

    ok(
        &[
            "diag",
            "s",
            "--checkpoint",
            "s/gt.hgs",
            "--view",
            "1",
            "--out",
            "d_gt",
        ],
        tmp.path(),
    );
    for f in [
        "ssim.png",
        "over_large.png",
        "hard.png",
        "gradients.csv",
        "over_large.csv",
        "hard.csv",
        "render.png",
    ] {
        assert!(tmp.path().join("d_gt").join(f).exists(), "{f}");
    }
    // Only 8-bit storage of the ground truth separates the two images.
    let ssim = image::open(tmp.path().join("d_gt/ssim.png")).unwrap().to_luma8();
    let min = ssim.pixels().map(|p| p.0[0]).min().unwrap();
    assert!(min >= 254, "darkest SSIM pixel {min}");
    let hard = fs::read_to_string(tmp.path().join("d_gt/hard.csv")).unwrap();
    assert_eq!(hard.lines().count(), 1, "no hard gaussians when the fit is exact");
}

#[test]
fn render_and_eval() {
    let tmp = tempfile::tempdir().unwrap();
    small_scene(tmp.path(), "s", "1");
    ok(
        &[
            "render",
            "s",
            "--checkpoint",
            "s/gt.hgs",
            "--view",
            "2",
            "--out",
            "img/v2.png",
        ],
        tmp.path(),
    );
    let a = image::open(tmp.path().join("img/v2.png")).unwrap().to_rgb8();
    let b = image::open(tmp.path().join("s/images/2.png")).unwrap().to_rgb8();
    let worst = a
        .pixels()
        .zip(b.pixels())
        .flat_map(|(p, q)| (0..3).map(move |c| p.0[c].abs_diff(q.0[c])))
        .max()
        .unwrap();
    assert!(worst <= 1);
    let out = ok(&["eval", "s", "--checkpoint", "s/gt.hgs"], tmp.path());
    let text = String::from_utf8(out.stdout).unwrap();
    let psnr: f64 = text
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .next()
        .unwrap()
        .parse()
        .unwrap();
    assert!(psnr > 40.0, "{text}");
}
