use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use inr_recon::experiment::read_metrics_csv;
use inr_recon::figures::{format_nrmse, read_png, read_png_text};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_inr-recon"))
}

fn run<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn every_subcommand_documents_its_flags() {
    let top = run(&["--help"]);
    assert_eq!(code(&top), 0);
    let text = String::from_utf8_lossy(&top.stdout);
    for sub in ["phantom", "mask", "train-prior", "recon", "cohort", "eval", "figures"] {
        assert!(text.contains(sub), "{sub} missing from --help");
        let o = run(&[sub, "--help"]);
        assert_eq!(code(&o), 0, "{sub} --help");
        assert!(String::from_utf8_lossy(&o.stdout).contains("--"), "{sub} lists no flags");
    }
}

fn acquire(dir: &Path) {
    let mask = dir.join("mask.cpxa");
    let o = run(&["mask", "--rows", "32", "--cols", "32", "--acceleration", "3", "--calib", "6", "--seed", "2", "--out", s(&mask)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&["phantom", "--nx", "32", "--ny", "32", "--coils", "2", "--mask", s(&mask), "--noise-std", "0.01", "--out", s(dir)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["image.cpxa", "maps.cpxa", "kspace.cpxa"] {
        assert!(dir.join(f).is_file(), "{f}");
    }
}

fn recon_args(dir: &Path, config: &Path, out: &Path) -> Vec<String> {
    let p = |f: &str| dir.join(f).display().to_string();
    vec![
        "recon".into(),
        "--kspace".into(),
        p("kspace.cpxa"),
        "--maps".into(),
        p("maps.cpxa"),
        "--mask".into(),
        p("mask.cpxa"),
        "--config".into(),
        config.display().to_string(),
        "--out".into(),
        out.display().to_string(),
    ]
}

#[test]
fn recon_pipeline_writes_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    acquire(dir);
    let config = dir.join("recon.toml");
    fs::write(&config, "seed = 3\nregularizer = \"wavelet\"\n[inr]\niters = 15\nhidden = 32\nfeatures = 16\n").unwrap();
    let out = dir.join("out");
    let o = run(&recon_args(dir, &config, &out));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["image.cpxa", "trace.csv", "config.toml", "inr/manifest.txt"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().next(), Some("j,L_data,L_diffusion,w,L_total"));
    assert_eq!(trace.lines().count(), 16);
}

#[test]
fn diffusion_recon_without_prior_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    acquire(dir);
    let config = dir.join("recon.toml");
    fs::write(&config, "regularizer = \"diffusion\"\n[inr]\niters = 5\n").unwrap();
    let o = run(&recon_args(dir, &config, &dir.join("out")));
    assert_eq!(code(&o), 2);
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    acquire(dir);
    let config = dir.join("recon.toml");
    fs::write(&config, "regulariser = \"none\"\n").unwrap();
    let o = run(&recon_args(dir, &config, &dir.join("out")));
    assert_eq!(code(&o), 2);
}

#[test]
fn divergent_optimizer_is_a_numerical_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    acquire(dir);
    let config = dir.join("recon.toml");
    fs::write(&config, "regularizer = \"none\"\n[inr]\niters = 50\nhidden = 16\nfeatures = 8\nlr = 1e38\n").unwrap();
    let o = run(&recon_args(dir, &config, &dir.join("out")));
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn missing_run_directory_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["figures", "--run", s(&tmp.path().join("nothing"))]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("metrics.csv"));
}

#[test]
fn eval_with_missing_prior_fails_before_compute() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("spec.toml");
    fs::write(
        &spec,
        "name = \"x\"\noutput_dir = \"run\"\narms = [\"infusion\"]\nprior = \"no-such-prior\"\n\
         [phantom]\nkind = \"shepp-logan\"\nnx = 16\nny = 16\nvariant_seed = 0\n[mask]\nkind = \"full\"\n",
    )
    .unwrap();
    let o = run(&["eval", "--config", s(&spec)]);
    assert_eq!(code(&o), 2);
    assert!(!tmp.path().join("run").exists());
}

#[test]
fn eval_figures_match_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("spec.toml");
    fs::write(
        &spec,
        "name = \"fig\"\noutput_dir = \"run\"\nnoise_std = 0.01\narms = [\"zero-filled\", \"cs-wavelet\", \"inr-none\"]\n\
         [phantom]\nkind = \"shepp-logan\"\nnx = 32\nny = 32\nvariant_seed = 4\n\
         [mask]\nkind = \"poisson\"\nacceleration = 3.0\ncalib = 6\nseed = 1\n\
         [coils]\ncount = 2\nseed = 0\n[cs]\nlambda = 0.01\niters = 20\n[inr]\niters = 10\nhidden = 16\nfeatures = 8\n",
    )
    .unwrap();
    let o = run(&["eval", "--config", s(&spec), "--figures"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let run_dir = tmp.path().join("run");
    let figs = run_dir.join("figures");
    let panels = fs::read_dir(&figs).unwrap().filter_map(|e| e.ok()).map(|e| e.file_name().into_string().unwrap()).collect::<Vec<_>>();
    let arm_panels = panels.iter().filter(|n| n.starts_with("panel_") && !n.contains("ground_truth")).count();
    let arm_errors = panels.iter().filter(|n| n.starts_with("error_") && !n.contains("ground_truth")).count();
    assert_eq!((arm_panels, arm_errors), (3, 3));
    assert!(figs.join("trace_inr-none.png").is_file());

    for row in read_metrics_csv(&run_dir.join("metrics.csv")).unwrap() {
        let text = read_png_text(&figs.join(format!("panel_{}.png", row.arm))).unwrap();
        let shown = text.iter().find(|(k, _)| k == "nrmse").map(|(_, v)| v.clone()).unwrap();
        assert_eq!(shown, format_nrmse(row.nrmse));
    }

    let err_gt = read_png(&figs.join("error_ground_truth.png")).unwrap();
    let banner = 24;
    assert!(err_gt.pixels[banner * err_gt.width..].iter().all(|&p| p == 0));
}
