use std::fs;
use std::path::Path;
use std::process::Command;

use lemevit::cli::run;
use lemevit::io::save_tensor;
use lemevit::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn argv(args: &[&str]) -> Vec<String> {
    std::iter::once("lemevit").chain(args.iter().copied()).map(String::from).collect()
}

fn run_ok(args: &[&str]) -> String {
    let mut out = Vec::new();
    let code = run(&argv(args), &mut out).unwrap_or_else(|e| panic!("{args:?}: {e}"));
    assert_eq!(code, 0, "{args:?}");
    String::from_utf8(out).unwrap()
}

fn bin(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_lemevit")).args(args).output().unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn write_image(path: &Path) {
    let t = Tensor::<f32>::randn(&[3, 64, 64], 1.0, &mut ChaCha8Rng::seed_from_u64(0));
    save_tensor(path, "image", &t).unwrap();
}

#[test]
fn exit_codes() {
    assert_eq!(bin(&["--help"]).0, 0);
    let (code, _, err) = bin(&["frobnicate"]);
    assert_eq!(code, 1);
    assert!(err.contains("Usage"), "{err}");
    assert_eq!(bin(&["analyze", "--no-such-flag"]).0, 1);
    assert_eq!(bin(&["analyze", "--variant", "huge"]).0, 1);
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.lmvt");
    fs::write(&junk, b"not a checkpoint").unwrap();
    let img = dir.path().join("x.ten");
    write_image(&img);
    let (code, _, err) = bin(&["infer", "--checkpoint", junk.to_str().unwrap(), "--image", img.to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(err.contains("bad magic"), "{err}");
}

#[test]
fn analyze_formats_and_out_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.json");
    let text = run_ok(&["analyze", "--variant", "small", "--format", "json", "--out", out.to_str().unwrap()]);
    assert!(text.starts_with("seed: 0\n"));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v["variant"], "small");
    let csv = run_ok(&["analyze", "--format", "csv", "--input", "64", "--meta-len", "8"]);
    assert!(csv.lines().nth(1).unwrap().starts_with("name,kind"));
    assert!(csv.lines().last().unwrap().starts_with("total,"));
    let strict = run_ok(&["analyze", "--convention", "strict"]);
    assert!(strict.contains("4NMD"));
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# analysis defaults\nvariant = base\nseed = 42\nformat = csv\n").unwrap();
    let c = cfg.to_str().unwrap();
    let text = run_ok(&["analyze", "--config", c]);
    assert!(text.starts_with("seed: 42\n"));
    assert!(text.contains("stages.3.blocks.2,sa"), "base has three last-stage blocks");
    let text = run_ok(&["analyze", "--config", c, "--variant", "tiny", "--seed", "1"]);
    assert!(text.starts_with("seed: 1\n"));
    assert!(!text.contains("stages.3.blocks.2,"));

    fs::write(&cfg, "varient = base\n").unwrap();
    let (code, _, err) = bin(&["analyze", "--config", c]);
    assert_eq!(code, 1);
    assert!(err.contains("unknown key"), "{err}");
    fs::write(&cfg, "seed = many\n").unwrap();
    assert_eq!(bin(&["analyze", "--config", c]).0, 1);
}

#[test]
fn bench_block_pair_small() {
    let text = run_ok(&["bench", "--n", "16", "--m", "4", "--d", "16", "--format", "csv"]);
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "seed: 0");
    assert!(rows[2].starts_with("dca,16,4,16,10,30,"));
    assert!(rows[3].starts_with("sa,16,4,16,10,30,"));
    let mut out = Vec::new();
    assert!(run(&argv(&["bench", "--iters", "5"]), &mut out).is_err());
}

#[test]
fn train_infer_attmap_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
    let (ckpt, hist, img, maps) = (p("m.lmvt"), p("h.csv"), p("x.ten"), p("maps"));
    let text = run_ok(&["train", "--steps", "2", "--batch-size", "2", "--samples", "6", "--checkpoint", &ckpt, "--history", &hist]);
    assert!(text.contains("train accuracy"));
    assert_eq!(fs::read_to_string(&hist).unwrap().lines().count(), 3);

    write_image(Path::new(&img));
    let a = run_ok(&["infer", "--checkpoint", &ckpt, "--image", &img]);
    let b = run_ok(&["infer", "--checkpoint", &ckpt, "--image", &img]);
    assert_eq!(a, b);
    let logits = a.lines().find(|l| l.starts_with("logits:")).unwrap();
    assert_eq!(logits.split_whitespace().count(), 4);

    run_ok(&["attmap", "--checkpoint", &ckpt, "--image", &img, "--out-dir", &maps]);
    let pgms = fs::read_dir(&maps).unwrap().filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "pgm").count();
    assert_eq!(pgms, 16);
    let pgm = fs::read(Path::new(&maps).join("meta_00.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n8 8\n65535\n"));
    let csv = fs::read_to_string(Path::new(&maps).join("maps.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 16 * 64);
}

#[test]
fn train_rejects_other_resolutions() {
    let mut out = Vec::new();
    let err = run(&argv(&["train", "--input", "96", "--steps", "1"]), &mut out).unwrap_err();
    assert_eq!(lemevit::cli::exit_code(&err), 1);
}
