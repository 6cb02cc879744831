use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = "epochs=2\nbatch_size=2\nsegment_samples=512\nn_blocks=1\nchannels=8\nblock_hidden=8\npsd_channels=4\ncheckpoint_every=1\n";

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_phaseforge"));
    c.env_remove("PHASEFORGE_THREADS");
    c
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("spawn phaseforge")
}

fn ok(cmd: &mut Command) -> String {
    let out = run(cmd);
    assert!(
        out.status.success(),
        "command failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        ok(bin()
            .args(["gen-data", "--n-utts", "5", "--duration", "0.2", "--test", "2", "--out"])
            .arg(dir.path().join("data")));
        fs::write(dir.path().join("tiny.txt"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn train(&self, stage: &str, out: &str, extra: &[&str]) -> Output {
        run(bin()
            .args(["train", "--stage", stage, "--config"])
            .arg(self.path("tiny.txt"))
            .arg("--data")
            .arg(self.path("data/train"))
            .arg("--out")
            .arg(self.path(out))
            .args(extra))
    }
}

fn bytes(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn unknown_method_is_a_usage_error() {
    let out = run(bin().args(["reconstruct", "--method", "magic", "--in", "a.wav", "--out", "b.wav"]));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn neural_method_without_checkpoint_fails() {
    let fx = Fixture::new();
    let out = run(bin()
        .args(["reconstruct", "--method", "prior", "--in"])
        .arg(fx.path("data/test/syn_00003.wav"))
        .arg("--out")
        .arg(fx.path("o.wav")));
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--ckpt"));
}

#[test]
fn gla_reconstruction_reports_snr_and_is_repeatable() {
    let fx = Fixture::new();
    let input = fx.path("data/test/syn_00003.wav");
    let go = |name: &str| {
        ok(bin()
            .args(["reconstruct", "--method", "gla", "--iters", "20", "--preset", "desk", "--random-init", "--seed", "7"])
            .arg("--in")
            .arg(&input)
            .arg("--ref")
            .arg(&input)
            .arg("--out")
            .arg(fx.path(name)))
    };
    let stdout = go("a.wav");
    assert!(stdout.contains("snr_db="));
    go("b.wav");
    assert_eq!(bytes(&fx.path("a.wav")), bytes(&fx.path("b.wav")));
}

#[test]
fn refine_stage_requires_prior_checkpoint() {
    let fx = Fixture::new();
    let out = fx.train("refine", "r", &[]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--prior-ckpt"));
}

#[test]
fn training_is_deterministic_across_runs_and_threads() {
    let fx = Fixture::new();
    assert!(fx.train("prior", "a", &[]).status.success());
    let out = run(bin()
        .env("PHASEFORGE_THREADS", "3")
        .args(["train", "--stage", "prior", "--config"])
        .arg(fx.path("tiny.txt"))
        .arg("--data")
        .arg(fx.path("data/train"))
        .arg("--out")
        .arg(fx.path("b")));
    assert!(out.status.success());
    assert_eq!(bytes(&fx.path("a/final.pfckpt")), bytes(&fx.path("b/final.pfckpt")));
    assert_eq!(bytes(&fx.path("a/train_log.csv")), bytes(&fx.path("b/train_log.csv")));
    let log = fs::read_to_string(fx.path("a/train_log.csv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), "epoch,lr,loss_p,loss_tfid,loss_adv_g,loss_fm,loss_adv_d");
    assert_eq!(log.lines().count(), 3);

    // A different seed changes the result.
    assert!(fx.train("prior", "c", &["--seed", "1"]).status.success());
    assert_ne!(bytes(&fx.path("a/final.pfckpt")), bytes(&fx.path("c/final.pfckpt")));
}

#[test]
fn resumed_training_matches_straight_run() {
    let fx = Fixture::new();
    assert!(fx.train("prior", "full", &[]).status.success());
    let resume = fx.path("full/epoch_00001.pfckpt");
    let out = fx.train("prior", "resumed", &["--resume", resume.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(bytes(&fx.path("full/final.pfckpt")), bytes(&fx.path("resumed/final.pfckpt")));
    assert_eq!(bytes(&fx.path("full/train_log.csv")), bytes(&fx.path("resumed/train_log.csv")));
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let fx = Fixture::new();
    let bad = fx.path("bad.pfckpt");
    fs::write(&bad, b"PFCKPT v9\ngarbage").unwrap();
    let out = fx.train("prior", "x", &["--resume", bad.to_str().unwrap()]);
    assert!(!out.status.success());
    let out = run(bin().args(["info", "--ckpt"]).arg(&bad));
    assert!(!out.status.success());
}

#[test]
fn staged_methods_and_iteration_zero() {
    let fx = Fixture::new();
    assert!(fx.train("prior", "p", &[]).status.success());
    let prior = fx.path("p/final.pfckpt");
    assert!(fx.train("refine", "r", &["--prior-ckpt", prior.to_str().unwrap()]).status.success());
    let refine = fx.path("r/final.pfckpt");
    let input = fx.path("data/test/syn_00004.wav");
    let recon = |method: &str, out: &str| {
        ok(bin()
            .args(["reconstruct", "--method", method, "--ckpt"])
            .arg(&prior)
            .arg("--refine-ckpt")
            .arg(&refine)
            .arg("--in")
            .arg(&input)
            .arg("--out")
            .arg(fx.path(out)));
    };
    recon("prior", "prior.wav");
    recon("sp-nspp-iter-0", "iter0.wav");
    recon("sp-nspp", "refined.wav");
    recon("sp-nspp-iter-1", "iter1.wav");
    assert_eq!(bytes(&fx.path("prior.wav")), bytes(&fx.path("iter0.wav")));
    assert_eq!(bytes(&fx.path("refined.wav")), bytes(&fx.path("iter1.wav")));

    let out = run(bin()
        .args(["reconstruct", "--method", "sp-nspp-iter-2", "--ckpt"])
        .arg(&prior)
        .arg("--refine-ckpt")
        .arg(&refine)
        .arg("--in")
        .arg(&input)
        .arg("--out")
        .arg(fx.path("iter2.wav")));
    assert!(!out.status.success());

    let info = ok(bin().args(["info", "--ckpt"]).arg(&refine));
    assert!(info.contains("refinement model"));
}

#[test]
fn pfspec_input_must_match_checkpoint_analysis() {
    let fx = Fixture::new();
    assert!(fx.train("prior", "p", &[]).status.success());
    let input = fx.path("data/test/syn_00004.wav");
    ok(bin().args(["analyze", "--preset", "paper", "--in"]).arg(&input).arg("--out").arg(fx.path("s.pfspec")));
    let out = run(bin()
        .args(["reconstruct", "--method", "prior", "--ckpt"])
        .arg(fx.path("p/final.pfckpt"))
        .arg("--in")
        .arg(fx.path("s.pfspec"))
        .arg("--out")
        .arg(fx.path("o.wav")));
    assert!(!out.status.success());

    ok(bin().args(["analyze", "--preset", "desk", "--in"]).arg(&input).arg("--out").arg(fx.path("d.pfspec")));
    ok(bin()
        .args(["reconstruct", "--method", "prior", "--ckpt"])
        .arg(fx.path("p/final.pfckpt"))
        .arg("--in")
        .arg(fx.path("d.pfspec"))
        .arg("--out")
        .arg(fx.path("o.wav")));
}

#[test]
fn eval_identity_and_missing_reference() {
    let fx = Fixture::new();
    let test = fx.path("data/test");
    ok(bin()
        .args(["eval", "--method", "natural", "--preset", "desk", "--data"])
        .arg(&test)
        .arg("--ref-data")
        .arg(&test)
        .arg("--out")
        .arg(fx.path("rep.csv")));
    let rep = fs::read_to_string(fx.path("rep.csv")).unwrap();
    let lines: Vec<&str> = rep.lines().collect();
    assert_eq!(lines[0], "utt,pd_ip,pd_gd,pd_iaf,pd_tfid,snr_db,lsd_db");
    assert_eq!(lines.len(), 4);
    for l in &lines[1..] {
        let cols: Vec<&str> = l.split(',').collect();
        assert_eq!(&cols[1..5], &["0.000000"; 4]);
        assert_eq!(cols[5], "120.000000");
    }

    // References for only one of the two inputs.
    let refs = fx.path("refs");
    fs::create_dir_all(&refs).unwrap();
    fs::copy(test.join("syn_00003.wav"), refs.join("syn_00003.wav")).unwrap();
    let out = run(bin()
        .args(["eval", "--method", "gla", "--iters", "5", "--preset", "desk", "--data"])
        .arg(&test)
        .arg("--ref-data")
        .arg(&refs)
        .arg("--out")
        .arg(fx.path("rep2.csv")));
    assert!(!out.status.success());
    let rep = fs::read_to_string(fx.path("rep2.csv")).unwrap();
    assert!(rep.contains("syn_00004,nan"));
    assert!(rep.lines().last().unwrap().starts_with("mean,"));
}
