use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use pianoplan::checkpoint::Checkpoint;
use pianoplan::dataset::{build_dataset, load_dataset, piece_features, write_dataset};
use pianoplan::metrics::{evaluate, listening_report, listening_table, parse_listening_csv, EvalConfig};
use pianoplan::notedata::io::{read_aligned_pieces, read_note_file, NotePiece};
use pianoplan::notedata::midi::write_midi;
use pianoplan::notedata::plain_performance;
use pianoplan::plot::{render_svg, CurveTable};
use pianoplan::regularizers::chord_positions;
use pianoplan::render::{control_sweep, parse_attr, parse_curves, render_sample, sketch, ScoreContext, ATTR_NAMES};
use pianoplan::seqcvae::{seeded_rng, Arch, SeqCvae};
use pianoplan::synthworld::{generate_world, write_world, WorldSpec};
use pianoplan::trainer::{prepare_items, TrainConfig, Trainer};

/// Expressive piano performance rendering with controllable planning.
#[derive(Parser)]
#[command(name = "pianoplan", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchArg {
    Hierarchical,
    Notewise,
    Cvae,
}

impl From<ArchArg> for Arch {
    fn from(a: ArchArg) -> Self {
        match a {
            ArchArg::Hierarchical => Arch::Hierarchical,
            ArchArg::Notewise => Arch::Notewise,
            ArchArg::Cvae => Arch::Cvae,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Sample,
    Plain,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic world (notes.jsonl + truth/).
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract features, signals and excerpts from a note file.
    Prepare {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fraction of pieces held out for testing.
        #[arg(long, default_value_t = 0.2)]
        test_fraction: f64,
        /// Degree of the planning polynomial for signals.csv.
        #[arg(long, default_value_t = 4)]
        degree: usize,
    },
    /// Train a model; writes log.jsonl and checkpoints under --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        arch: Option<ArchArg>,
        #[arg(long)]
        degree: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        no_pln: bool,
        #[arg(long)]
        no_str: bool,
        #[arg(long)]
        no_fac: bool,
        #[arg(long)]
        no_reg: bool,
        /// Continue from <out>/last.ckpt when present.
        #[arg(long)]
        resume: bool,
    },
    /// Render a score to MIDI.
    Render {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        score: PathBuf,
        #[arg(long, value_enum, default_value = "sample")]
        mode: Mode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Piece id inside the note file (default: first piece).
        #[arg(long)]
        piece: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render with sketch curves written into the planning code.
    Sketch {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        score: PathBuf,
        #[arg(long)]
        curves: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        piece: Option<String>,
        /// MIDI output; a CSV of sketch and output curves is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Sliding-fader sweep of one attribute of a performance.
    Control {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        perf: PathBuf,
        #[arg(long)]
        attr: String,
        #[arg(long, default_value_t = 5)]
        steps: usize,
        /// Fader range; defaults to the range of the performance's own code.
        #[arg(long, allow_hyphen_values = true)]
        lo: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        hi: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        piece: Option<String>,
        #[arg(long, default_value = "control_out")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the held-out excerpts of a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Generations per excerpt for the sampled metrics.
        #[arg(long, default_value_t = 20)]
        repeats: usize,
    },
    /// Winning and top-ranking rates from listening-test responses.
    ReportListening {
        #[arg(long)]
        responses: PathBuf,
        /// Optional JSON output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Plot a curve CSV as SVG.
    Plot {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            eprintln!("{}", msg.lines().next().unwrap_or("invalid arguments"));
            return ExitCode::from(1);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {line}");
            let code = e.chain().find_map(|c| c.downcast_ref::<pianoplan::Error>()).map_or(2, |e| e.exit_code());
            ExitCode::from(code as u8)
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Synth { spec, out } => {
            let text = std::fs::read_to_string(&spec).with_context(|| format!("reading {}", spec.display()))?;
            let world = generate_world(&WorldSpec::from_toml(&text)?)?;
            write_world(&world, &out)?;
            info!("wrote {} pieces to {}", world.pieces.len(), out.display());
        }
        Cmd::Prepare { input, out, test_fraction, degree } => {
            if !(0.0..=1.0).contains(&test_fraction) {
                return Err(pianoplan::Error::Config("--test-fraction must lie in [0, 1]".into()).into());
            }
            let pieces = read_aligned_pieces(&input).with_context(|| format!("reading {}", input.display()))?;
            let (ds, feats) = build_dataset(&pieces, test_fraction)?;
            let summary = write_dataset(&out, &ds, &feats, degree)?;
            println!("{}", serde_json::to_string(&summary)?);
        }
        Cmd::Train { config, data, out, arch, degree, epochs, seed, no_pln, no_str, no_fac, no_reg, resume } => {
            let mut cfg = TrainConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            if let Some(a) = arch {
                cfg.arch = a.into();
            }
            if let Some(d) = degree {
                cfg.degree = d;
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            for (off, w) in [(no_pln, &mut cfg.lambda.pln), (no_str, &mut cfg.lambda.str_), (no_fac, &mut cfg.lambda.fac), (no_reg, &mut cfg.lambda.reg)] {
                if off {
                    *w = 0.0;
                }
            }
            cfg.validate()?;
            let ds = load_dataset(&data).with_context(|| format!("loading dataset {}", data.display()))?;
            let items = prepare_items(&ds.train, cfg.arch, cfg.degree)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("config.toml"), cfg.to_toml())?;
            let last = out.join("last.ckpt");
            let mut trainer = if resume && last.exists() {
                let state = Checkpoint::load(&last)?;
                info!("resuming from epoch {}", state.epoch);
                Trainer::resume(cfg, state)?
            } else {
                Trainer::new(cfg)?
            };
            info!("{} excerpts, {} parameters", items.len(), trainer.model().param_count());
            let log = trainer.fit(&items, Some(&out))?;
            let last_loss = log.last().map_or(f64::NAN, |r| r.loss.total);
            info!("done: {} epochs, {} steps, last loss {last_loss:.5}", trainer.state.epoch, trainer.state.step);
        }
        Cmd::Render { ckpt, score, mode, seed, piece, out } => {
            let piece = pick_piece(&score, piece.as_deref())?;
            let notes = piece.score()?;
            let perf = match mode {
                Mode::Plain => plain_performance(&notes),
                Mode::Sample => {
                    let model = load_model(ckpt.as_deref())?;
                    let ctx = ScoreContext::new(&piece.id, notes.clone(), model.config().arch)?;
                    let x = render_sample(&model, &ctx, &mut seeded_rng(seed))?;
                    ctx.perform(&x)?
                }
            };
            write_midi(&out, &perf, &notes)?;
            info!("wrote {}", out.display());
        }
        Cmd::Sketch { ckpt, score, curves, seed, piece, out } => {
            let model = load_model(Some(&ckpt))?;
            let piece = pick_piece(&score, piece.as_deref())?;
            let curves = parse_curves(open(&curves)?).with_context(|| format!("reading {}", curves.display()))?;
            if curves.iter().all(Vec::is_empty) {
                return Err(pianoplan::Error::Config("curves file has no rows".into()).into());
            }
            let ctx = ScoreContext::new(&piece.id, piece.score()?, model.config().arch)?;
            let sk = sketch(&model, &ctx, &curves, &mut seeded_rng(seed))?;
            write_midi(&out, &ctx.perform(&sk.x)?, &ctx.score)?;
            let mut table = chord_table(&ctx);
            let alpha = if ctx.steps() == ctx.chords.num_chords() { sk.alpha.clone() } else { ctx.chordwise(&sk.alpha)? };
            table.push_attrs("sketch", &alpha);
            table.push_attrs("output", &ctx.chordwise(&sk.x)?);
            let csv_path = out.with_extension("csv");
            table.write_csv(create(&csv_path)?)?;
            info!("wrote {} and {}", out.display(), csv_path.display());
        }
        Cmd::Control { ckpt, perf, attr, steps, lo, hi, seed, piece, out } => {
            let a = parse_attr(&attr)?;
            let model = load_model(Some(&ckpt))?;
            let np = pick_piece(&perf, piece.as_deref())?;
            let aligned = np.aligned()?;
            let feats = piece_features(&aligned)?;
            let ctx = ScoreContext::new(&np.id, aligned.score.clone(), model.config().arch)?;
            let sweep = control_sweep(&model, &ctx, &feats.x, a, steps, (lo, hi), &mut seeded_rng(seed))?;
            std::fs::create_dir_all(&out)?;
            let mut table = chord_table(&ctx);
            table.push_attrs("truth", &ctx.chordwise(&feats.x)?);
            let mut faders = csv::Writer::from_writer(create(&out.join("faders.csv"))?);
            faders.write_record(["step", "attr", "fader_dim", "value", "midi"])?;
            for (j, st) in sweep.iter().enumerate() {
                let name = format!("step_{:02}.mid", j + 1);
                write_midi(out.join(&name), &ctx.perform(&st.x)?, &ctx.score)?;
                table.push_attrs(&format!("step{:02}", j + 1), &ctx.chordwise(&st.x)?);
                let dim = model.config().fader_dim(a).to_string();
                faders.write_record([&(j + 1).to_string(), ATTR_NAMES[a], &dim, &st.value.to_string(), &name])?;
            }
            faders.flush()?;
            table.write_csv(create(&out.join("control.csv"))?)?;
            info!("wrote {} steps to {}", steps, out.display());
        }
        Cmd::Eval { ckpt, data, report, seed, repeats } => {
            let model = load_model(Some(&ckpt))?;
            let ds = load_dataset(&data).with_context(|| format!("loading dataset {}", data.display()))?;
            if ds.test.is_empty() {
                bail!(pianoplan::Error::Config("dataset has no held-out excerpts".into()));
            }
            let items = prepare_items(&ds.test, model.config().arch, model.config().degree)?;
            let rep = evaluate(&model, &items, EvalConfig { repeats, n_samples: repeats, seed });
            let mut w = create(&report)?;
            serde_json::to_writer_pretty(&mut w, &rep)?;
            writeln!(w)?;
            w.flush()?;
            print!("{}", rep.to_table());
        }
        Cmd::ReportListening { responses, out } => {
            let rows = parse_listening_csv(open(&responses)?).with_context(|| format!("reading {}", responses.display()))?;
            let groups = listening_report(&rows);
            print!("{}", listening_table(&groups));
            if let Some(path) = out {
                let mut w = create(&path)?;
                serde_json::to_writer_pretty(&mut w, &groups)?;
                writeln!(w)?;
                w.flush()?;
            }
        }
        Cmd::Plot { csv, out } => {
            let table = CurveTable::read_csv(open(&csv)?).with_context(|| format!("reading {}", csv.display()))?;
            std::fs::write(&out, render_svg(&table)?)?;
            info!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn open(path: &Path) -> Result<BufReader<File>> {
    let f = File::open(path).map_err(pianoplan::Error::from).with_context(|| format!("opening {}", path.display()))?;
    Ok(BufReader::new(f))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).map_err(pianoplan::Error::from).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn load_model(path: Option<&Path>) -> Result<SeqCvae> {
    let path = path.ok_or_else(|| pianoplan::Error::Config("--ckpt is required for this mode".into()))?;
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(ck.model)
}

fn pick_piece(path: &Path, id: Option<&str>) -> Result<NotePiece> {
    let pieces = read_note_file(path).with_context(|| format!("reading {}", path.display()))?;
    let found = match id {
        Some(id) => pieces.into_iter().find(|p| p.id == id),
        None => pieces.into_iter().next(),
    };
    found.ok_or_else(|| match id {
        Some(id) => anyhow::Error::from(pianoplan::Error::Config(format!("no piece '{id}' in {}", path.display()))),
        None => anyhow::Error::from(pianoplan::Error::EmptyPiece),
    })
}

/// Curve table over the chords of a score (x = chord position).
fn chord_table(ctx: &ScoreContext) -> CurveTable {
    CurveTable::new("position", chord_positions(ctx.chords.num_chords()))
}
