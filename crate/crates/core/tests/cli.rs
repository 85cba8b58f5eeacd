use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn deflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deflow"))
        .args(args)
        .env_remove("DEFLOW_SEED")
        .output()
        .expect("spawn deflow")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn ok(args: &[&str]) -> String {
    let o = deflow(args);
    assert_eq!(code(&o), 0, "deflow {args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TOY: &str = "iterations=200\nbatch_size=4\npatch_size=8\nlevels=1\nsteps=1\nhidden=4\ncond_down_factor=4\nlog_every=50\n";

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let f = Fixture { dir };
        ok(&[
            "synth-corpus", "--out-dir", s(&f.corpus()), "--oracle", "white_noise", "--sigma", "0.05", "--n-clean", "6",
            "--n-degraded", "6", "--size", "16", "--seed", "2",
        ]);
        fs::write(f.path("toy.cfg"), TOY).unwrap();
        f
    }

    fn path(&self, name: &str) -> std::path::PathBuf {
        self.dir.path().join(name)
    }

    fn corpus(&self) -> std::path::PathBuf {
        self.path("corpus")
    }

    fn train(&self, out: &str, extra: &[&str]) -> std::path::PathBuf {
        let run = self.path(out);
        let cfg = self.path("toy.cfg");
        let corpus = self.corpus();
        let mut args = vec!["train", "--config", s(&cfg), "--corpus", s(&corpus), "--out-dir", s(&run), "--seed", "4"];
        args.extend_from_slice(extra);
        ok(&args);
        run
    }
}

fn parse_kv(text: &str) -> Vec<(String, f64)> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .filter_map(|(k, v)| v.trim().parse().ok().map(|v| (k.trim().to_string(), v)))
        .collect()
}

#[test]
fn gauss1d_recovers_truth_and_is_repeatable() {
    let args = ["gauss1d", "--mu-x", "0.5", "--var-x", "1", "--mu-u", "0.3", "--var-u", "0.64", "--n", "100000", "--seed", "7"];
    let out = ok(&args);
    let kv = parse_kv(&out);
    let find = |k: &str| kv.iter().find(|(n, _)| n.ends_with(k)).unwrap_or_else(|| panic!("{k} missing in\n{out}")).1;
    for (k, truth) in [("mu_x", 0.5), ("var_x", 1.0), ("mu_u", 0.3), ("var_u", 0.64)] {
        assert!((find(k) - truth).abs() / truth <= 0.02, "{k}: {}", find(k));
    }
    assert_eq!(ok(&args), out);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&deflow(&["gauss1d", "--mu-x", "0.5"])), 2);
    assert_eq!(code(&deflow(&["no-such-command"])), 2);
    let f = Fixture::new();
    let bad = f.path("bad.cfg");
    fs::write(&bad, "iterations=5\nwarp_drive=on\n").unwrap();
    let o = deflow(&["train", "--config", s(&bad), "--corpus", s(&f.corpus()), "--out-dir", s(&f.path("r")), "--seed", "1"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("warp_drive"));
    let o = deflow(&[
        "sample", "--checkpoint", s(&f.path("missing.ckpt")), "--input-dir", s(&f.corpus().join("clean")), "--out-dir",
        s(&f.path("o")), "--tau", "1", "--seed", "1",
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn train_writes_checkpoint_and_log_deterministically() {
    let f = Fixture::new();
    let a = f.train("a", &[]);
    let ckpt = fs::read(a.join("model.ckpt")).unwrap();
    let log = fs::read(a.join("metrics.csv")).unwrap();
    assert!(!ckpt.is_empty());
    // The checkpoint echoes the output path, so rerun into the same place.
    fs::remove_dir_all(&a).unwrap();
    f.train("a", &[]);
    assert_eq!(ckpt, fs::read(a.join("model.ckpt")).unwrap());
    assert_eq!(log, fs::read(a.join("metrics.csv")).unwrap());

    let mut reader = csv::Reader::from_path(a.join("metrics.csv")).unwrap();
    let headers = reader.headers().unwrap().clone();
    assert_eq!(headers.iter().collect::<Vec<_>>(), ["iter", "lr", "nll_total", "nll_x", "nll_y", "grad_norm"]);
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert!(rows.len() >= 4);
    assert_eq!(rows.last().unwrap()[0].parse::<usize>().unwrap(), 199);
    for r in &rows {
        assert!(r.iter().all(|v| v.parse::<f64>().unwrap().is_finite()));
    }
    // --set overrides the file.
    let c = f.train("c", &["--set", "iterations=3"]);
    let n = csv::Reader::from_path(c.join("metrics.csv")).unwrap().records().count();
    assert!(n <= 2, "{n} rows");
}

#[test]
fn sample_at_zero_temperature_returns_inputs() {
    let f = Fixture::new();
    let run = f.train("run", &[]);
    let out = f.path("zero");
    ok(&[
        "sample", "--checkpoint", s(&run.join("model.ckpt")), "--input-dir", s(&f.corpus().join("clean")), "--out-dir",
        s(&out), "--tau", "0", "--count", "1", "--seed", "3",
    ]);
    let mut names: Vec<_> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().path()).collect();
    names.sort();
    assert_eq!(names.len(), 6);
    for p in &names {
        let name = p.file_name().unwrap().to_str().unwrap();
        assert!(name.contains("_v0_tau0p00"), "{name}");
        let stem = name.split("_v0").next().unwrap();
        let src = image::open(f.corpus().join("clean").join(format!("{stem}.png"))).unwrap().to_rgb8();
        let got = image::open(p).unwrap().to_rgb8();
        let worst = src.as_raw().iter().zip(got.as_raw()).map(|(a, b)| a.abs_diff(*b)).max().unwrap();
        assert!(worst <= 1, "{name}: max difference {worst}");
    }
}

#[test]
fn sample_variants_differ() {
    let f = Fixture::new();
    let run = f.train("run", &[]);
    let out = f.path("var");
    ok(&[
        "sample", "--checkpoint", s(&run.join("model.ckpt")), "--input-dir", s(&f.corpus().join("clean")), "--out-dir",
        s(&out), "--tau", "1", "--count", "3", "--seed", "3",
    ]);
    let mut names: Vec<_> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().path()).collect();
    names.sort();
    assert_eq!(names.len(), 18);
    let stem = names[0].file_name().unwrap().to_str().unwrap().split("_v").next().unwrap().to_string();
    let variants: Vec<Vec<u8>> = names
        .iter()
        .filter(|p| p.file_name().unwrap().to_str().unwrap().starts_with(&format!("{stem}_v")))
        .map(|p| image::open(p).unwrap().to_rgb8().into_raw())
        .collect();
    assert_eq!(variants.len(), 3);
    assert_ne!(variants[0], variants[1]);
    assert_ne!(variants[1], variants[2]);
    assert_ne!(variants[0], variants[2]);
}

#[test]
fn eval_reports_truth_only_for_oracle_corpora() {
    let f = Fixture::new();
    let run = f.train("run", &[]);
    let ckpt = run.join("model.ckpt");
    let rep = f.path("rep");
    ok(&["eval", "--checkpoint", s(&ckpt), "--corpus", s(&f.corpus()), "--out-dir", s(&rep), "--seed", "5"]);
    let mut r = csv::Reader::from_path(rep.join("residuals.csv")).unwrap();
    assert_eq!(
        r.headers().unwrap().iter().collect::<Vec<_>>(),
        ["statistic", "channel", "channel2", "estimate", "truth", "abs_error", "rel_error"]
    );
    let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    let means: Vec<_> = rows.iter().filter(|r| &r[0] == "mean").collect();
    assert_eq!(means.len(), 3);
    assert!(means.iter().all(|r| r[4].parse::<f64>().is_ok()));
    let nll: Vec<csv::StringRecord> = csv::Reader::from_path(rep.join("nll.csv")).unwrap().records().map(Result::unwrap).collect();
    for q in ["nll_x", "nll_y"] {
        let row = nll.iter().find(|r| &r[0] == q).unwrap();
        assert!(row[1].parse::<f64>().unwrap().is_finite());
    }

    // Same images without metadata or hidden pairing: an unpaired real corpus.
    let real = f.path("real");
    for sub in ["clean", "degraded"] {
        fs::create_dir_all(real.join(sub)).unwrap();
        for e in fs::read_dir(f.corpus().join(sub)).unwrap() {
            let p = e.unwrap().path();
            fs::copy(&p, real.join(sub).join(p.file_name().unwrap())).unwrap();
        }
    }
    let rep2 = f.path("rep2");
    ok(&["eval", "--checkpoint", s(&ckpt), "--corpus", s(&real), "--out-dir", s(&rep2), "--seed", "5"]);
    let rows: Vec<csv::StringRecord> =
        csv::Reader::from_path(rep2.join("residuals.csv")).unwrap().records().map(Result::unwrap).collect();
    assert!(rows.iter().all(|r| r[4].is_empty()));
    let nll = fs::read_to_string(rep2.join("nll.csv")).unwrap();
    assert!(nll.lines().any(|l| l.starts_with("nll_x,")));
}

#[test]
fn seed_env_and_entropy_fallback() {
    let args = ["gauss1d", "--mu-x", "0", "--var-x", "1", "--mu-u", "0", "--var-u", "1", "--n", "500"];
    let with_env = |seed: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_deflow")).args(args).env("DEFLOW_SEED", seed).output().unwrap();
        assert_eq!(code(&o), 0);
        String::from_utf8(o.stdout).unwrap()
    };
    assert_eq!(with_env("11"), with_env("11"));
    let mut flagged = args.to_vec();
    flagged.extend(["--seed", "11"]);
    assert_eq!(ok(&flagged), with_env("11"));
    let o = deflow(&args);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed="));
}
