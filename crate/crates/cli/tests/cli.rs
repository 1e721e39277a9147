use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ovs(args: &[&str], dirs: &[&Path]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ovs"));
    cmd.args(args);
    for d in dirs {
        cmd.arg(d);
    }
    cmd.output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(dir: &Path, frames: &str) {
    let o = ovs(
        &[
            "synth",
            "--scale",
            "0.25",
            "--emit-gt",
            "--frames",
            frames,
            "--out",
        ],
        &[dir],
    );
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn missing_input_directory_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = ovs(
        &["expand", "--input"],
        &[
            &tmp.path().join("absent"),
            Path::new("--out"),
            &tmp.path().join("o"),
        ],
    );
    assert_eq!(o.status.code(), Some(2));
    let first = stderr(&o).lines().next().unwrap().to_string();
    assert!(
        first.starts_with("ovs: error[usage]: input directory"),
        "{first}"
    );
}

#[test]
fn bad_flags_and_keys_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let o = ovs(&["expand", "--input"], &[tmp.path()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("ovs: error[usage]: "));
    let o = ovs(&["frobnicate"], &[]);
    assert_eq!(o.status.code(), Some(2));

    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "bogus.key = 1\n").unwrap();
    let o = ovs(
        &["expand", "--config"],
        &[
            &cfg,
            Path::new("--input"),
            tmp.path(),
            Path::new("--out"),
            tmp.path(),
        ],
    );
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(
        stderr(&o).trim(),
        "ovs: error[config]: unknown key `bogus.key`"
    );
}

#[test]
fn unreadable_frames_are_processing_errors() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("frame_000000.png"), b"not a png").unwrap();
    let o = ovs(
        &["expand", "--input"],
        &[tmp.path(), Path::new("--out"), &tmp.path().join("o")],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("ovs: error[io]: "), "{}", stderr(&o));
    assert_eq!(stderr(&o).lines().count(), 1);
}

#[test]
fn static_video_without_ovs_is_unchanged() {
    let tmp = tempfile::tempdir().unwrap();
    synth(&tmp.path().join("s"), "2");
    let input = tmp.path().join("still");
    fs::create_dir(&input).unwrap();
    let src = fs::read(tmp.path().join("s/frames/frame_000000.png")).unwrap();
    for i in 0..5 {
        fs::write(input.join(format!("frame_{i:06}.png")), &src).unwrap();
    }
    let out = tmp.path().join("out");
    let o = ovs(
        &["stabilize", "--ovs", "off", "--input"],
        &[&input, Path::new("--out"), &out],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    for i in 0..5 {
        assert_eq!(
            fs::read(out.join(format!("frame_{i:06}.png"))).unwrap(),
            src
        );
    }
}

#[test]
fn expand_then_eval_reports_every_key() {
    let tmp = tempfile::tempdir().unwrap();
    let seq = tmp.path().join("s");
    synth(&seq, "5");
    let traj: toml::Table = fs::read_to_string(seq.join("trajectory.toml"))
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(traj["poses"].as_array().unwrap().len(), 5);

    let exp = tmp.path().join("exp");
    let o = ovs(
        &["expand", "--iterations", "1", "--mode", "coarse", "--input"],
        &[&seq.join("frames"), Path::new("--out"), &exp],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(exp.join("canvas_000004.png").is_file() && exp.join("mask_000004.pgm").is_file());
    let rep: toml::Table = fs::read_to_string(exp.join("expand.toml"))
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(rep["config"]["expand"]["mode"].as_str(), Some("coarse"));

    let report = tmp.path().join("eval.toml");
    let o = ovs(
        &["eval", "--input"],
        &[
            &seq.join("frames"),
            Path::new("--output"),
            &seq.join("frames"),
            Path::new("--report"),
            &report,
            Path::new("--gt"),
            &seq.join("gt"),
            Path::new("--canvases"),
            &exp,
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let r: toml::Table = fs::read_to_string(&report).unwrap().parse().unwrap();
    for key in [
        "cropping",
        "distortion",
        "per_frame_cropping",
        "per_frame_distortion",
        "psnr",
        "L_I",
        "L_G",
        "L_M",
    ] {
        assert!(r.contains_key(key), "missing {key}");
    }
    assert!((r["cropping"].as_float().unwrap() - 1.0).abs() < 0.01);
    assert!(r["psnr"].as_float().unwrap() > 25.0);
}

#[test]
fn ablate_writes_report_plot_and_frames() {
    let tmp = tempfile::tempdir().unwrap();
    let seq = tmp.path().join("s");
    synth(&seq, "4");
    let out = tmp.path().join("ab");
    let o = ovs(
        &[
            "ablate",
            "--iterations",
            "0,1",
            "--set",
            "affinity.radius=2",
            "--input",
        ],
        &[
            &seq.join("frames"),
            Path::new("--gt"),
            &seq.join("gt"),
            Path::new("--out"),
            &out,
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let r: toml::Table = fs::read_to_string(out.join("report.toml"))
        .unwrap()
        .parse()
        .unwrap();
    let modes: Vec<&str> = r["modes"]
        .as_array()
        .unwrap()
        .iter()
        .map(|m| m["mode"].as_str().unwrap())
        .collect();
    assert_eq!(modes, ["baseline", "coarse", "fine", "full"]);
    assert_eq!(r["iterations"].as_array().unwrap().len(), 2);
    assert_eq!(r["config"]["affinity"]["radius"].as_integer(), Some(2));
    assert!(fs::read_to_string(out.join("cropping.svg"))
        .unwrap()
        .starts_with("<svg"));
    assert!(out.join("k01/frame_000003.png").is_file());
}
