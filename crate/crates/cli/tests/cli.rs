use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use robust_diffusion::eval::parse_results;
use robust_diffusion_cli::reproduce::{RunManifest, SweepSpec, CURVE_FILE, DELTAS_FILE, MANIFEST_FILE, RESULTS_FILE, SUMMARY_FILE};
use robust_diffusion_cli::OUT_ENV;
use tempfile::TempDir;

const TINY_NET: [&str; 6] = ["--set", "trunk_width=16", "--set", "head_width=8", "--set", "batch_size=32"];

fn bin(out_root: &Path) -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_robust-diff"));
    c.env(OUT_ENV, out_root);
    c
}

fn run(out_root: &Path, args: &[&str]) -> Output {
    bin(out_root).args(args).output().expect("binary runs")
}

fn ok(out_root: &Path, args: &[&str]) -> String {
    let o = run(out_root, args);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{args:?}\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn code(out_root: &Path, args: &[&str]) -> i32 {
    run(out_root, args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, name: &str, n: &str, eta: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    ok(dir, &["gen-data", "--n-per-class", n, "--eta", eta, "--seed", "1", "--out", s(&path)]);
    path
}

#[test]
fn gen_data_writes_the_noisy_table() {
    let tmp = TempDir::new().unwrap();
    let path = gen(tmp.path(), "d.csv", "2000", "0.4");
    let text = fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "x1,x2,clean,noisy");
    assert_eq!(lines.len(), 8001);
    let flipped = lines[1..]
        .iter()
        .filter(|l| {
            let f: Vec<&str> = l.split(',').collect();
            f[2] != f[3]
        })
        .count();
    assert!((flipped as f64 / 8000.0 - 0.4).abs() < 0.02);

    let again = gen(tmp.path(), "d2.csv", "2000", "0.4");
    assert_eq!(fs::read(&path).unwrap(), fs::read(again).unwrap());

    let clean = gen(tmp.path(), "c.csv", "50", "0");
    for l in fs::read_to_string(clean).unwrap().lines().skip(1) {
        let f: Vec<&str> = l.split(',').collect();
        assert_eq!(f[2], f[3]);
    }
}

#[test]
fn output_root_comes_from_the_environment() {
    let tmp = TempDir::new().unwrap();
    ok(tmp.path(), &["gen-data", "--n-per-class", "10"]);
    assert!(tmp.path().join("data.csv").exists());
    ok(tmp.path(), &["train", "--data", s(&tmp.path().join("data.csv")), "--total-iters", "2", "--set", "trunk_width=8"]);
    assert!(tmp.path().join("train").join("params.bin").exists());
}

#[test]
fn train_sample_eval_round_trip() {
    let tmp = TempDir::new().unwrap();
    let data = gen(tmp.path(), "d.csv", "100", "0.2");
    for variant in ["vanilla", "pc_only", "pc_rdc"] {
        let ck = tmp.path().join(format!("ck_{variant}"));
        let mut args = vec!["train", "--data", s(&data), "--variant", variant, "--total-iters", "0", "--out", s(&ck)];
        args.extend(TINY_NET);
        ok(tmp.path(), &args);
        for f in ["params.bin", "opt.bin", "config.txt", "meta.txt"] {
            assert!(ck.join(f).exists(), "{variant}: {f}");
        }
        assert_eq!(ck.join("pseudo.txt").exists(), variant != "vanilla");
    }

    let ck = tmp.path().join("ck");
    let mut args = vec!["train", "--data", s(&data), "--variant", "pc_rdc", "--total-iters", "30", "--out", s(&ck)];
    args.extend(TINY_NET);
    ok(tmp.path(), &args);
    let log = fs::read_to_string(ck.join("train.log")).unwrap();
    assert!(log.starts_with("iter,demo_loss,cond_loss,wall_secs"));
    assert!(fs::read_to_string(ck.join("meta.txt")).unwrap().contains("iter=30"));

    let samples = tmp.path().join("samples");
    let svg = tmp.path().join("samples.svg");
    let sample_args = ["sample", "--checkpoint", s(&ck), "--per-class", "1000", "--seed", "3", "--out", s(&samples)];
    ok(tmp.path(), &[&sample_args[..], &["--svg", s(&svg)]].concat());
    let first: Vec<Vec<u8>> = (0..4).map(|c| fs::read(samples.join(format!("class_{c}.csv"))).unwrap()).collect();
    for f in &first {
        let text = String::from_utf8_lossy(f);
        assert_eq!(text.lines().next(), Some("x1,x2"));
        assert_eq!(text.lines().count(), 1001);
    }
    ok(tmp.path(), &sample_args);
    for (c, f) in first.iter().enumerate() {
        assert_eq!(&fs::read(samples.join(format!("class_{c}.csv"))).unwrap(), f, "class {c} not stable");
    }

    let doc_text = fs::read_to_string(&svg).unwrap();
    let doc = roxmltree::Document::parse(&doc_text).expect("well-formed SVG");
    let root = doc.root_element();
    assert_eq!(root.attribute("width"), Some("600"));
    let fills: BTreeSet<&str> = doc
        .descendants()
        .filter(|n| n.has_tag_name("g") && n.attribute("class") == Some("group"))
        .filter_map(|n| n.attribute("fill"))
        .collect();
    assert_eq!(fills.len(), 4);

    let results = tmp.path().join("results.csv");
    let eval = ["eval", "--data", s(&data), "--samples", s(&samples), "--variant", "pc_rdc", "--eta", "0.2", "--seed", "1", "--out", s(&results)];
    let printed = ok(tmp.path(), &eval);
    assert!(printed.contains("mae=") && printed.contains("controllability="));
    ok(tmp.path(), &eval);
    let records = parse_results(&fs::read_to_string(&results).unwrap()).unwrap();
    assert_eq!(records.len(), 2);
    assert_eq!(records[0], records[1]);
    assert!(records[0].mae >= 0.0 && (0.0..=1.0).contains(&records[0].controllability));
}

#[test]
fn config_files_and_overrides() {
    let tmp = TempDir::new().unwrap();
    let data = gen(tmp.path(), "d.csv", "20", "0.4");
    let cfg = tmp.path().join("train.cfg");
    fs::write(&cfg, "# tiny\nvariant = pc_only\ntrunk_width = 8\nhead_width = 4\nbatch_size = 16\nalpha = 0.3\n").unwrap();
    let ck = tmp.path().join("ck");
    ok(tmp.path(), &["train", "--data", s(&data), "--config", s(&cfg), "--total-iters", "3", "--set", "alpha=0.5", "--out", s(&ck)]);
    let saved = fs::read_to_string(ck.join("config.txt")).unwrap();
    for line in ["variant=pc_only", "trunk_width=8", "alpha=0.5", "total_iters=3"] {
        assert!(saved.lines().any(|l| l.replace(' ', "") == line), "missing {line} in\n{saved}");
    }

    fs::write(&cfg, "no_such_key = 1\n").unwrap();
    assert_eq!(code(tmp.path(), &["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&ck)]), 1);
}

#[test]
fn exit_codes_follow_the_contract() {
    let tmp = TempDir::new().unwrap();
    let t = tmp.path();
    assert_eq!(code(t, &[]), 1);
    assert_eq!(code(t, &["frobnicate"]), 1);
    assert_eq!(code(t, &["--help"]), 0);
    assert_eq!(code(t, &["train", "--help"]), 0);
    assert_eq!(code(t, &["gen-data", "--eta", "1.5"]), 1);
    assert_eq!(code(t, &["gen-data", "--noise", "weird"]), 1);
    assert_eq!(code(t, &["gen-data", "--n-per-class", "nope"]), 1);

    let missing = t.join("missing.csv");
    assert_eq!(code(t, &["train", "--data", s(&missing)]), 2);
    let data = gen(t, "d.csv", "10", "0");
    assert_eq!(code(t, &["train", "--data", s(&data), "--variant", "bogus"]), 1);
    assert_eq!(code(t, &["train", "--data", s(&data), "--set", "alpha"]), 1);
    assert_eq!(code(t, &["train", "--data", s(&data), "--set", "alpha=2"]), 1);
    assert_eq!(code(t, &["sample", "--checkpoint", s(&t.join("nowhere"))]), 2);
    assert_eq!(code(t, &["reproduce", "--jobs", "0"]), 1);
    assert_eq!(code(t, &["reproduce", "--etas", "0.4,x"]), 1);

    fs::write(t.join("bad.csv"), "x1,x2,clean,noisy\n0.1,oops,0,0\n").unwrap();
    assert_eq!(code(t, &["train", "--data", s(&t.join("bad.csv"))]), 2);

    let boom = t.join("boom");
    let huge_lr = ["train", "--data", s(&data), "--total-iters", "20", "--set", "lr=1e200", "--set", "trunk_width=8", "--out", s(&boom)];
    assert_eq!(code(t, &huge_lr), 2);
    assert!(boom.join("params.bin").exists(), "partial checkpoint kept");
}

#[test]
fn default_sweep_has_thirty_six_cells() {
    let spec = SweepSpec::default();
    let cells = spec.cells();
    assert_eq!(cells.len(), 36);
    let names: BTreeSet<String> = cells.iter().map(|c| c.dir_name(spec.noise)).collect();
    assert_eq!(names.len(), 36);
}

#[test]
fn reproduce_reruns_byte_identically_from_its_manifest() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("sweep");
    let args = [
        "reproduce", "--out", s(&out), "--seeds", "0,1", "--etas", "0.4", "--variants", "vanilla,pc_rdc",
        "--n-per-class", "40", "--total-iters", "20", "--eval-per-class", "20", "--curve-every", "10",
        "--set", "trunk_width=16", "--set", "head_width=8", "--set", "batch_size=32", "--set", "curve_per_class=10",
        "--jobs", "2",
    ];
    let first = run(tmp.path(), &args).status.code().unwrap();
    assert!(first == 0 || first == 2, "sweep exit {first}");
    let manifest = out.join(MANIFEST_FILE);
    let parsed = RunManifest::parse(&fs::read_to_string(&manifest).unwrap()).unwrap();
    assert_eq!(parsed.spec.seeds, vec![0, 1]);

    let files = [RESULTS_FILE, SUMMARY_FILE, DELTAS_FILE, CURVE_FILE];
    let before: Vec<Vec<u8>> = files.iter().map(|f| fs::read(out.join(f)).unwrap()).collect();
    let records = parse_results(&String::from_utf8_lossy(&before[0])).unwrap();
    assert_eq!(records.len(), 4);
    assert!(out.join("plots").join("controllability_curve.svg").exists());

    let again = bin(tmp.path()).args(["reproduce", "--manifest", s(&manifest)]).output().unwrap();
    assert_eq!(again.status.code(), Some(first));
    for (f, b) in files.iter().zip(&before) {
        assert_eq!(&fs::read(out.join(f)).unwrap(), b, "{f} differs on rerun");
    }
    // A single worker yields the same tables.
    let serial = tmp.path().join("serial");
    let mut serial_args: Vec<&str> = args.to_vec();
    let pos = serial_args.iter().position(|a| *a == s(&out)).unwrap();
    serial_args[pos] = s(&serial);
    *serial_args.last_mut().unwrap() = "1";
    run(tmp.path(), &serial_args);
    assert_eq!(fs::read(serial.join(RESULTS_FILE)).unwrap(), before[0]);
}
