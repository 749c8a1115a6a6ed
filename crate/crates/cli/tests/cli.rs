use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_flowguess");

struct Scratch(PathBuf);

impl Scratch {
    fn new(name: &str) -> Self {
        let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(format!("cli-{name}"));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        Scratch(dir)
    }

    fn path(&self, name: &str) -> String {
        self.0.join(name).to_str().unwrap().to_owned()
    }
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("FLOWGUESS_MODEL").env_remove("FLOWGUESS_CORPUS").output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

/// Tiny two-epoch model plus its corpus, built through the CLI.
fn tiny(s: &Scratch) -> (String, String) {
    let corpus = s.path("corpus.txt");
    let model = s.path("m.fgc");
    ok(&["gen-corpus", "--n", "300", "--seed", "3", "--out", &corpus]);
    ok(&["train", "--corpus", &corpus, "--out", &model, "--epochs", "2", "--layers", "2", "--hidden", "8", "--blocks", "1", "--batch", "64"]);
    (corpus, model)
}

#[test]
fn missing_corpus_is_a_usage_error() {
    let out = run(&["train", "--out", "/nonexistent/x.fgc"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--corpus"));
}

#[test]
fn zero_epoch_checkpoint_uses_defaults() {
    let s = Scratch::new("defaults");
    let corpus = s.path("c.txt");
    fs::write(&corpus, "abc\nhello1\n").unwrap();
    let model = s.path("id.fgc");
    ok(&["train", "--corpus", &corpus, "--out", &model, "--epochs", "0"]);
    let lp = ok(&["logprob", "--model", &model, "--password", ""]);
    assert_eq!(stdout(&lp).trim(), "-9.189385");
    let bytes = fs::read(&model).unwrap();
    let header = String::from_utf8_lossy(&bytes[8..8 + u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize]).into_owned();
    for want in ["dim=10", "layers=18", "mask_kind=char-run:1", "hidden=256", "blocks=2"] {
        assert!(header.lines().any(|l| l == want), "missing {want}");
    }
    assert!(fs::read_to_string(format!("{model}.loss.tsv")).unwrap().starts_with("epoch\tloss\n0\t"));
}

#[test]
fn gen_corpus_is_deterministic() {
    let s = Scratch::new("gen");
    let (a, b) = (s.path("a.txt"), s.path("b.txt"));
    ok(&["gen-corpus", "--n", "100", "--seed", "7", "--out", &a]);
    ok(&["gen-corpus", "--n", "100", "--seed", "7", "--out", &b]);
    let text = fs::read(&a).unwrap();
    assert_eq!(text, fs::read(&b).unwrap());
    assert_eq!(String::from_utf8(text).unwrap().lines().count(), 100);
    assert_eq!(run(&["gen-corpus", "--n", "5", "--weights", "1,0,0"]).status.code(), Some(2));
}

#[test]
fn latent_commands() {
    let s = Scratch::new("latent");
    let (_, model) = tiny(&s);
    let path = ok(&["interpolate", "--model", &model, "--start", "abc", "--target", "zz99", "--steps", "1"]);
    assert_eq!(stdout(&path), "abc\nzz99\n");
    let verbose = ok(&["interpolate", "--model", &model, "--start", "abc", "--target", "zz99", "--steps", "3", "--verbose"]);
    let lines: Vec<String> = stdout(&verbose).lines().map(str::to_owned).collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0], "0\tabc");
    assert_eq!(lines[3], "3\tzz99");
    let n = ok(&["neighborhood", "--model", &model, "--pivot", "abc", "--sigma", "0.3", "--n", "10", "--unique", "--seed", "2"]);
    let text = stdout(&n);
    let found: Vec<&str> = text.lines().collect();
    let distinct: std::collections::HashSet<_> = found.iter().collect();
    assert_eq!(distinct.len(), found.len());
    assert!(!found.contains(&"abc"));
    let bad = run(&["interpolate", "--model", &model, "--start", "abc", "--target", "waytoolongpassword", "--steps", "2"]);
    assert_eq!(bad.status.code(), Some(3));
    let line = String::from_utf8_lossy(&bad.stderr).into_owned();
    assert!(line.starts_with("flowguess: error kind=data code=too_long"), "{line}");
    assert_eq!(line.lines().count(), 1);
}

#[test]
fn sample_streams_deterministically() {
    let s = Scratch::new("sample");
    let (_, model) = tiny(&s);
    let a = ok(&["sample", "--model", &model, "--n", "3000", "--seed", "4"]);
    let b = ok(&["sample", "--model", &model, "--n", "3000", "--seed", "4", "--workers", "3"]);
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(stdout(&a).lines().count(), 3000);
}

#[test]
fn guess_reports_and_parameter_defaults() {
    let s = Scratch::new("guess");
    let (corpus, model) = tiny(&s);
    let report = s.path("r.txt");
    let matched = s.path("m.txt");
    let out = ok(&[
        "guess", "--model", &model, "--targets", &corpus, "--n", "1000000", "--mode", "dynamic", "--report", &report,
        "--matched-out", &matched, "--quiet",
    ]);
    assert!(out.stdout.is_empty());
    let text = fs::read_to_string(&report).unwrap();
    for want in ["mode: dynamic", "guesses: 1000000", "alpha: 5", "sigma: 0.12", "gamma: 2"] {
        assert!(text.lines().any(|l| l == want), "missing {want} in\n{text}");
    }
    assert!(text.contains("milestone\tguesses\tunique\tmatched\tmatch_rate\n10000\t"));
    assert!(!text.contains("wall_time"));
    let matched_count: usize = text.lines().find_map(|l| l.strip_prefix("matched: ")).unwrap().parse().unwrap();
    assert_eq!(fs::read_to_string(&matched).unwrap().lines().count(), matched_count);

    let warn = ok(&["guess", "--model", &model, "--targets", &corpus, "--n", "10", "--alpha", "3", "--quiet"]);
    assert!(String::from_utf8_lossy(&warn.stderr).contains("warning"));
    let streamed = ok(&["guess", "--model", &model, "--targets", &corpus, "--n", "50", "--mode", "dynamic-gs"]);
    assert_eq!(stdout(&streamed).lines().count(), 50);
}

#[test]
fn guess_error_codes() {
    let s = Scratch::new("errors");
    let (corpus, model) = tiny(&s);
    let md5 = s.path("md5.txt");
    fs::write(&md5, "digest: md5\n900150983cd24fb0d6963f7d28e17f72\n").unwrap();
    let out = run(&["guess", "--model", &model, "--targets", &md5, "--n", "10"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("code=unsupported_digest"));

    let missing = run(&["guess", "--model", &model, "--targets", &s.path("none.txt"), "--n", "10"]);
    assert_eq!(missing.status.code(), Some(5));
    let bad_mode = run(&["guess", "--model", &model, "--targets", &corpus, "--n", "10", "--mode", "fancy"]);
    assert_eq!(bad_mode.status.code(), Some(2));

    let mut bytes = fs::read(&model).unwrap();
    let last = bytes.len() - 40;
    bytes[last] ^= 0x10;
    let broken = s.path("broken.fgc");
    fs::write(&broken, bytes).unwrap();
    let out = run(&["logprob", "--model", &broken, "--password", "abc"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("code=corrupt_payload"));
}

#[test]
fn split_and_ablation() {
    let s = Scratch::new("split");
    let (corpus, _) = tiny(&s);
    let (tr, te) = (s.path("train.txt"), s.path("test.txt"));
    ok(&["split", "--corpus", &corpus, "--train-out", &tr, "--test-out", &te, "--fraction", "0.8", "--seed", "1"]);
    let train = fs::read_to_string(&tr).unwrap();
    let test = fs::read_to_string(&te).unwrap();
    assert_eq!(train.lines().count(), 240);
    let train_set: std::collections::HashSet<&str> = train.lines().collect();
    assert!(test.lines().all(|t| !train_set.contains(t)));

    let table = ok(&[
        "ablate-masks", "--train", &tr, "--test", &te, "--masks", "horizontal,char-run:1", "--epochs", "1", "--layers", "2",
        "--hidden", "8", "--blocks", "1", "--batch", "64", "--guesses", "500",
    ]);
    let text = stdout(&table);
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].starts_with("config\t"));
    assert!(rows[1].starts_with("horizontal\t") && rows[2].starts_with("char-run:1\t"));
}
