use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use clgt_core::image::Image;

fn clgt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clgt"))
        .args(args)
        .env("CLGT_THREADS", "1")
        .output()
        .expect("spawn clgt")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn textured(h: usize, w: usize) -> Image {
    Image::from_fn(h, w, 3, |y, x, c| {
        let v = ((x * 7 + y * 13 + c * 31) % 97) as f32 / 96.0;
        0.5 * v + 0.25 * ((x as f32 * 0.3).sin() * 0.5 + 0.5) + 0.1 * c as f32 / 2.0
    })
}

fn bytes_of(img: &Image) -> Vec<u8> {
    img.data.iter().map(|v| (v * 255.0).round() as u8).collect()
}

#[test]
fn zero_noise_cfe_reproduces_input() {
    let dir = tempfile::tempdir().unwrap();
    let (src, dst) = (dir.path().join("in.png"), dir.path().join("out.png"));
    textured(24, 40).save_png(&src).unwrap();
    let o = clgt(&[
        "cfe", "apply", "--in", s(&src), "--out", s(&dst), "--seed", "9",
        "--noise-low", "0", "--noise-mid-high", "0", "--noise-high", "0",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (a, b) = (Image::load_png(&src).unwrap(), Image::load_png(&dst).unwrap());
    assert_eq!((a.height, a.width, a.channels), (b.height, b.width, b.channels));
    let worst = bytes_of(&a).iter().zip(bytes_of(&b)).map(|(&x, y)| x.abs_diff(y)).max().unwrap();
    assert!(worst <= 1, "max pixel difference {worst}");
}

#[test]
fn cfe_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("in.png");
    textured(32, 32).save_png(&src).unwrap();
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        assert!(clgt(&["cfe", "apply", "--in", s(&src), "--out", s(&out), "--seed", seed]).status.success());
        fs::read(out).unwrap()
    };
    assert_eq!(run("a.png", "4"), run("b.png", "4"));
    assert_ne!(run("a.png", "4"), run("c.png", "5"));
}

#[test]
fn bev_project_writes_requested_grid() {
    let dir = tempfile::tempdir().unwrap();
    let (src, dst) = (dir.path().join("pano.png"), dir.path().join("bev.png"));
    textured(64, 128).save_png(&src).unwrap();
    let o = clgt(&["bev", "project", "--in", s(&src), "--out", s(&dst), "--grid", "24", "--extent", "10"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let b = Image::load_png(&dst).unwrap();
    assert_eq!((b.height, b.width), (24, 24));
}

#[test]
fn usage_errors_exit_one() {
    for args in [
        &["frobnicate"][..],
        &["cfe", "apply", "--in", "x.png"],
        &["eval", "--data", "d", "--ckpt", "c", "--bogus"],
        &["eval", "--data", "d", "--ckpt", "c", "--corrupt", "rain"],
        &["eval", "--data", "d", "--ckpt", "c", "--corrupt", "fog", "--severity", "9"],
        &["gradcheck", "--module", "nope"],
        &[],
    ] {
        let o = clgt(args);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        assert!(!o.stderr.is_empty(), "{args:?} printed no usage text");
    }
    assert_eq!(clgt(&["--help"]).status.code(), Some(0));
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.png");
    let out = dir.path().join("o.png");
    let o = clgt(&["cfe", "apply", "--in", s(&missing), "--out", s(&out), "--seed", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.png"));

    let ckpt = dir.path().join("junk.bin");
    fs::write(&ckpt, b"not a checkpoint").unwrap();
    assert_eq!(clgt(&["stats", "--ckpt", s(&ckpt)]).status.code(), Some(2));

    let cfg = dir.path().join("bad.txt");
    fs::write(&cfg, "model.nonsense = 3\n").unwrap();
    let o = clgt(&["train", "--data", s(dir.path()), "--config", s(&cfg), "--out", s(&dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_reports_each_module() {
    let o = clgt(&["gradcheck", "--module", "pool"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.lines().any(|l| l.starts_with("module pool") && l.ends_with("PASS")), "{text}");
    assert!(!text.contains("FAIL"));
}

#[test]
fn gradcheck_all_modules() {
    let o = clgt(&["gradcheck"]);
    let text = stdout(&o);
    assert!(o.status.success(), "{text}");
    for m in clgt_core::gradsuite::modules() {
        assert!(text.lines().any(|l| l.starts_with(&format!("module {m} "))), "no line for {m}");
    }
}

const TINY: &str = "model.widths = 4,8\nmodel.strides = 2,1\nmodel.embed_dim = 8\nmodel.heads = 2\n\
model.input_hw = 16\nmodel.fusion_hw = 8\ntrain.epochs = 2\ntrain.batch_size = 4\n";

struct Run {
    echo: String,
    checkpoint: Vec<u8>,
    metrics: Vec<u8>,
}

fn train(data: &Path, cfg_text: &str, out: &Path, extra: &[&str]) -> Run {
    let cfg = out.with_extension("cfg");
    fs::write(&cfg, cfg_text).unwrap();
    let mut args = vec!["train", "--data", s(data), "--config", s(&cfg), "--out", s(out)];
    args.extend_from_slice(extra);
    let o = clgt(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    Run {
        echo: stdout(&o),
        checkpoint: fs::read(out.join("checkpoint.bin")).unwrap(),
        metrics: fs::read(out.join("metrics.jsonl")).unwrap(),
    }
}

#[test]
fn train_eval_stats_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = clgt(&["synth", "generate", "--out", s(&data), "--count", "8", "--seed", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let a = train(&data, TINY, &dir.path().join("a"), &["--seed", "5", "--set", "loss.gamma=0.2"]);
    assert!(a.echo.contains("train.seed = 5\n"), "{}", a.echo);
    assert!(a.echo.contains("loss.gamma = 0.2\n"));
    assert!(a.echo.contains("model.embed_dim = 8\n"));
    assert_eq!(fs::read_to_string(dir.path().join("a/config.txt")).unwrap(), a.echo);

    // rerun: identical artifacts
    let b = train(&data, TINY, &dir.path().join("b"), &["--seed", "5", "--set", "loss.gamma=0.2"]);
    assert_eq!(a.checkpoint, b.checkpoint);
    assert_eq!(a.metrics, b.metrics);

    // the echo alone reproduces the run
    let c = train(&data, &a.echo, &dir.path().join("c"), &[]);
    assert_eq!(c.echo, a.echo);
    assert_eq!(c.checkpoint, a.checkpoint);
    assert_eq!(c.metrics, a.metrics);

    let other = train(&data, TINY, &dir.path().join("d"), &["--seed", "6", "--set", "loss.gamma=0.2"]);
    assert_ne!(other.checkpoint, a.checkpoint);

    let ckpt = dir.path().join("a/checkpoint.bin");
    let o = clgt(&["eval", "--data", s(&data), "--ckpt", s(&ckpt)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = stdout(&o);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "queries 8");
    assert_eq!(lines[1].split_whitespace().collect::<Vec<_>>(), ["R@1", "R@5", "R@10", "R@1%"]);
    let values: Vec<f64> = lines[2].split_whitespace().map(|v| v.parse().unwrap()).collect();
    assert_eq!(values.len(), 4);
    assert!(values.windows(2).take(2).all(|w| w[0] <= w[1]));
    assert_eq!(values[2], 100.0, "R@10 over 8 references");

    let o = clgt(&["eval", "--data", s(&data), "--ckpt", s(&ckpt), "--corrupt", "snow", "--severity", "2", "--k", "1,3,50%"]);
    assert!(o.status.success());
    let table = stdout(&o);
    assert_eq!(table.lines().nth(1).unwrap().split_whitespace().collect::<Vec<_>>(), ["R@1", "R@3", "R@50%"]);
    let again = stdout(&clgt(&["eval", "--data", s(&data), "--ckpt", s(&ckpt), "--corrupt", "snow", "--severity", "2", "--k", "1,3,50%"]));
    assert_eq!(table, again);

    let o = clgt(&["stats", "--ckpt", s(&ckpt)]);
    assert!(o.status.success());
    let text = stdout(&o);
    let params: usize = text.lines().find_map(|l| l.strip_prefix("params ")).unwrap().parse().unwrap();
    let cfg = clgt_core::pipeline::ModelConfig::parse(&a.echo).unwrap();
    assert_eq!(params, clgt_core::pipeline::ModelParams::<clgt_core::Tensor<f32>>::init(&cfg).unwrap().param_count());
    assert!(text.contains("step 4"), "{text}");
}

#[test]
fn synth_generate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        assert!(clgt(&["synth", "generate", "--out", s(d), "--count", "3", "--seed", "11"]).status.success());
    }
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 10);
    for n in names {
        assert_eq!(fs::read(a.join(&n)).unwrap(), fs::read(b.join(&n)).unwrap(), "{n:?}");
    }
}
