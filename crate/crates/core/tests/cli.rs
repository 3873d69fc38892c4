use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use pianoplan::notedata::io::read_note_file;
use pianoplan::notedata::midi::read_midi;
use pianoplan::plot::CurveTable;
use pianoplan::regularizers::fit_planning_signal;
use pianoplan::trainer::TrainConfig;
use pianoplan::Matrix;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_pianoplan"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small world, its dataset and a briefly trained checkpoint, shared by
/// every test in this file.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn p(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        std::fs::write(root.join("world.toml"), "seed = 3\npieces = 16\nnoise = 0.02\n").unwrap();
        std::fs::write(root.join("train.toml"), "profile = \"desk\"\nepochs = 2\nbatch_size = 8\n").unwrap();
        ok(&["synth", "--spec", s(&root.join("world.toml")), "--out", s(&root.join("world"))]);
        ok(&["prepare", "--in", s(&root.join("world/notes.jsonl")), "--out", s(&root.join("data"))]);
        ok(&[
            "train",
            "--config",
            s(&root.join("train.toml")),
            "--data",
            s(&root.join("data")),
            "--out",
            s(&root.join("ck")),
        ]);
        Fixture { _dir: dir, root }
    })
}

#[test]
fn written_files_are_read_back() {
    let f = fixture();
    assert_eq!(read_note_file(f.p("world/notes.jsonl")).unwrap().len(), 16);
    // the saved config is a valid config for a second run
    let cfg = TrainConfig::load(f.p("ck/config.toml")).unwrap();
    assert_eq!(cfg.epochs, 2);
    let resumed = f.p("resumed");
    std::fs::create_dir_all(&resumed).unwrap();
    std::fs::copy(f.p("ck/last.ckpt"), resumed.join("last.ckpt")).unwrap();
    let out = ok(&[
        "train",
        "--config",
        s(&f.p("ck/config.toml")),
        "--data",
        s(&f.p("data")),
        "--out",
        s(&resumed),
        "--resume",
        "--epochs",
        "3",
    ]);
    assert!(out.status.success());
    let log = std::fs::read_to_string(resumed.join("log.jsonl")).unwrap();
    assert!(log.lines().all(|l| l.contains("\"epoch\":2")));

    let mid = f.p("rt.mid");
    ok(&["render", "--ckpt", s(&f.p("ck/last.ckpt")), "--score", s(&f.p("world/notes.jsonl")), "--out", s(&mid)]);
    let notes = read_note_file(f.p("world/notes.jsonl")).unwrap();
    assert_eq!(read_midi(&mid).unwrap().notes.len(), notes[0].notes.len());

    let report = f.p("listening.json");
    std::fs::write(
        f.p("responses.csv"),
        "participant,group,trial,model,beat_plain\np1,T,1,ours,1\np1,T,1,base,0\np2,UT,1,ours,0\np2,UT,1,base,1\n",
    )
    .unwrap();
    ok(&["report-listening", "--responses", s(&f.p("responses.csv")), "--out", s(&report)]);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(v.is_array());
}

#[test]
fn plain_rendering_uses_reference_velocity_and_tempo() {
    let f = fixture();
    let mid = f.p("plain.mid");
    ok(&["render", "--score", s(&f.p("world/notes.jsonl")), "--mode", "plain", "--out", s(&mid)]);
    let m = read_midi(&mid).unwrap();
    assert!(!m.notes.is_empty());
    assert!(m.notes.iter().all(|n| n.velocity == 64));
    assert_eq!(m.tempos, vec![500_000]);
}

#[test]
fn seed_determines_every_sampled_output() {
    let f = fixture();
    let ck = f.p("ck/last.ckpt");
    let score = f.p("world/notes.jsonl");
    let render = |name: &str, seed: &str| {
        let out = f.p(name);
        ok(&["render", "--ckpt", s(&ck), "--score", s(&score), "--seed", seed, "--out", s(&out)]);
        std::fs::read(out).unwrap()
    };
    assert_eq!(render("a.mid", "5"), render("b.mid", "5"));
    assert_ne!(render("a.mid", "5"), render("c.mid", "6"));

    let control = |dir: &str| {
        let out = f.p(dir);
        ok(&["control", "--ckpt", s(&ck), "--perf", s(&score), "--attr", "vel", "--steps", "3", "--seed", "2", "--out", s(&out)]);
        let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(&out)
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
            })
            .collect();
        files.sort();
        files
    };
    let first = control("ctl1");
    assert_eq!(first.len(), 5, "3 MIDI files and 2 CSVs");
    assert_eq!(first, control("ctl2"));
    // the sweep table plots
    let svg = f.p("ctl.svg");
    ok(&["plot", "--csv", s(&f.p("ctl1/control.csv")), "--out", s(&svg)]);
    assert!(std::fs::read_to_string(svg).unwrap().starts_with("<svg"));

    let eval = |name: &str| {
        let out = f.p(name);
        ok(&["eval", "--ckpt", s(&ck), "--data", s(&f.p("data")), "--report", s(&out), "--repeats", "2"]);
        std::fs::read(out).unwrap()
    };
    let report = eval("r1.json");
    assert_eq!(report, eval("r2.json"));
    let v: serde_json::Value = serde_json::from_slice(&report).unwrap();
    assert!(v["pearson"]["r_recon"]["mean"].is_number());
}

#[test]
fn zero_sketch_gives_a_flat_contour() {
    let f = fixture();
    let curves = f.p("zero_curves.csv");
    std::fs::write(&curves, "attr,position,value\nvel,0,0\ntempo,0,0\nart,0,0\n").unwrap();
    let mid = f.p("zero.mid");
    ok(&[
        "sketch",
        "--ckpt",
        s(&f.p("ck/last.ckpt")),
        "--score",
        s(&f.p("world/notes.jsonl")),
        "--curves",
        s(&curves),
        "--out",
        s(&mid),
    ]);
    assert!(read_midi(&mid).is_ok());
    let t = CurveTable::read_csv(std::fs::File::open(mid.with_extension("csv")).unwrap()).unwrap();
    let col = |name: &str| t.series.iter().find(|(n, _)| n == name).unwrap().1.clone();
    for a in ["vel", "tempo", "art"] {
        assert!(col(&format!("sketch_{a}")).iter().all(|&v| v == 0.0));
    }
    let out = Matrix::from_vec(
        t.x.len(),
        3,
        (0..t.x.len()).flat_map(|i| ["vel", "tempo", "art"].map(|a| col(&format!("output_{a}"))[i])).collect(),
    );
    // spread of the refitted planning contour over the piece
    let fit = fit_planning_signal(&out, 4).i_pln;
    for a in 0..3 {
        let c = fit.col(a);
        let spread = c.iter().cloned().fold(f64::MIN, f64::max) - c.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread < 0.5, "attribute {a}: contour spread {spread}");
    }
    ok(&["plot", "--csv", s(&mid.with_extension("csv")), "--out", s(&f.p("zero.svg"))]);
}

#[test]
fn failures_exit_with_their_category() {
    let f = fixture();
    let code = |args: &[&str]| {
        let out = run(args);
        let err = String::from_utf8_lossy(&out.stderr).into_owned();
        assert_eq!(err.trim_end().lines().count(), 1, "single-line diagnostic: {err}");
        out.status.code().unwrap()
    };
    assert_eq!(code(&["render", "--bogus"]), 1);
    assert_eq!(code(&["control", "--ckpt", s(&f.p("ck/last.ckpt")), "--perf", s(&f.p("world/notes.jsonl")), "--attr", "loud"]), 1);
    assert_eq!(code(&["render", "--score", s(&f.p("missing.jsonl")), "--mode", "plain", "--out", s(&f.p("x.mid"))]), 2);
    std::fs::write(f.p("bad.csv"), "attr,position,value\nvel,2,0\n").unwrap();
    assert_eq!(
        code(&[
            "sketch",
            "--ckpt",
            s(&f.p("ck/last.ckpt")),
            "--score",
            s(&f.p("world/notes.jsonl")),
            "--curves",
            s(&f.p("bad.csv")),
            "--out",
            s(&f.p("bad.mid")),
        ]),
        2
    );
    let out = run(&["--help"]);
    assert!(out.status.success());
}
