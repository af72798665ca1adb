use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use tempotrack_core::config::RunConfig;
use tempotrack_core::dump::{dump_traces, DumpOptions};
use tempotrack_core::metrics::{self, PixelBox};
use tempotrack_core::model::Model;
use tempotrack_core::synth::{self, Preset, SceneScript, SequenceRecord};
use tempotrack_core::tensor::{set_default_precision, Precision};
use tempotrack_core::tracker::{TrackRecord, Tracker};
use tempotrack_core::{check, train, Error, ParamStore};

#[derive(Parser)]
#[command(name = "tempotrack", version, about = "Toy multimodal spatial-temporal tracker")]
struct Cli {
    /// Run configuration (JSON). Defaults to the toy configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value_t = PrecisionArg::F64)]
    precision: PrecisionArg,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic sequence from a scene script or a preset.
    Gen {
        #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
        script: Option<PathBuf>,
        #[arg(long, value_parser = parse_preset)]
        preset: Option<Preset>,
        /// Frames per preset sequence.
        #[arg(long, default_value_t = 40)]
        frames: usize,
        /// Number of preset sequences; more than one writes numbered
        /// subdirectories seeded `seed, seed+1, …`.
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the toy model on generated sequences.
    TrainToy {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-step loss CSV; defaults to `loss.csv` beside the weights.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Track one sequence, writing JSON lines.
    Track {
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        seq: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Empty the temporal queues before every frame.
        #[arg(long)]
        no_temporal: bool,
        /// Write temporal-token attention heatmaps per frame and layer.
        #[arg(long)]
        dump_attention: bool,
        /// Write suppression masks and score heatmaps per frame and layer.
        #[arg(long)]
        dump_masks: bool,
        /// Heatmap directory; defaults to `<out>.dump`.
        #[arg(long)]
        dump_dir: Option<PathBuf>,
    },
    /// Score tracking results against annotations.
    Eval {
        #[arg(long)]
        results: PathBuf,
        /// A sequence directory or its anno.json.
        #[arg(long)]
        anno: PathBuf,
        /// Full report with per-frame values.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every oracle and invariant suite.
    Check,
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse::<Preset>().map_err(|e| e.to_string())
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn cmd_gen(
    cli: &Cli,
    script: Option<&Path>,
    preset: Option<Preset>,
    frames: usize,
    count: usize,
    out: &Path,
) -> Result<()> {
    let scripts: Vec<(PathBuf, SceneScript)> = match (script, preset) {
        (Some(path), _) => {
            let mut s = SceneScript::load(path)?;
            if let Some(seed) = cli.seed {
                s.seed = seed;
            }
            vec![(out.to_path_buf(), s)]
        }
        (None, Some(kind)) => {
            if count == 0 {
                return Err(Error::Validation("count must be positive".into()).into());
            }
            let seed = load_config(cli)?.seed;
            (0..count)
                .map(|i| {
                    let dir = if count == 1 {
                        out.to_path_buf()
                    } else {
                        out.join(format!("{i:03}"))
                    };
                    (dir, synth::preset(kind, seed + i as u64, frames))
                })
                .collect()
        }
        (None, None) => bail!("either --script or --preset is required"),
    };
    for (dir, s) in scripts {
        let rec = synth::gen_sequence(&s, &dir)?;
        println!(
            "{}: {} frames of {}x{}, seed {}",
            dir.display(),
            rec.len(),
            s.width,
            s.height,
            s.seed
        );
    }
    Ok(())
}

fn cmd_train(cli: &Cli, data: Option<PathBuf>, out: Option<PathBuf>, log: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(cli)?;
    let data = data
        .or(cfg.paths.data.clone())
        .context("no training data: pass --data or set paths.data")?;
    let out = out
        .or(cfg.paths.weights.clone())
        .unwrap_or_else(|| PathBuf::from("weights.bin"));
    let log = log
        .or(cfg.paths.loss_log.clone())
        .unwrap_or_else(|| out.with_file_name("loss.csv"));
    let (_, report) = train::run_training(&cfg, &data, &out, &log)?;
    println!(
        "trained {} steps: smoothed loss {:.6} -> {:.6}; weights {}, log {}",
        report.losses.len(),
        report.initial_smoothed,
        report.final_smoothed,
        out.display(),
        log.display()
    );
    Ok(())
}

struct TrackArgs {
    weights: Option<PathBuf>,
    seq: PathBuf,
    out: PathBuf,
    no_temporal: bool,
    dump: DumpOptions,
    dump_dir: Option<PathBuf>,
}

fn cmd_track(cli: &Cli, a: TrackArgs) -> Result<()> {
    let cfg = load_config(cli)?;
    let weights = a
        .weights
        .or(cfg.paths.weights.clone())
        .context("no weights: pass --weights or set paths.weights")?;
    let model = Model::from_params(cfg.model.clone(), ParamStore::load(&weights)?)?;
    let seq = SequenceRecord::load(&a.seq)?;
    let mut tracker = Tracker::new(&model, cfg.tracker.clone())?;
    tracker.use_temporal = !a.no_temporal;
    tracker.record_traces = a.dump.attention || a.dump.masks;
    let dump_dir = a.dump_dir.unwrap_or_else(|| {
        let mut name = a.out.file_name().unwrap_or_default().to_os_string();
        name.push(".dump");
        a.out.with_file_name(name)
    });
    let file = fs::File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut w = BufWriter::new(file);
    let mut state = tracker.init(&seq.frame(0)?, seq.gt(0))?;
    let first = TrackRecord {
        frame: 0,
        bbox: state.last_box,
        score: 1.0,
    };
    writeln!(w, "{}", serde_json::to_string(&first)?)?;
    let mut dumped = 0;
    for i in 1..seq.len() {
        let r = tracker.track_frame(&mut state, &seq.frame(i)?)?;
        if !(r.score.is_finite() && r.bbox.is_valid()) {
            return Err(Error::Numeric(format!("frame {i}: non-finite prediction {:?}", r.bbox)).into());
        }
        let rec = TrackRecord {
            frame: i,
            bbox: r.bbox,
            score: r.score,
        };
        writeln!(w, "{}", serde_json::to_string(&rec)?)?;
        if tracker.record_traces {
            dumped += dump_traces(&dump_dir, i, &r.traces, a.dump)?.len();
        }
    }
    w.flush()?;
    print!("tracked {} frames into {}", seq.len(), a.out.display());
    if dumped > 0 {
        print!("; {dumped} heatmaps in {}", dump_dir.display());
    }
    println!();
    Ok(())
}

fn read_results(path: &Path) -> Result<Vec<TrackRecord>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = vec![];
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrackRecord = serde_json::from_str(&line).map_err(|e| Error::Json {
            path: format!("{}:{}", path.display(), n + 1),
            source: e,
        })?;
        out.push(rec);
    }
    Ok(out)
}

fn cmd_eval(results: &Path, anno: &Path, out: Option<&Path>) -> Result<()> {
    let dir = if anno.extension().is_some_and(|e| e == "json") {
        anno.parent().unwrap_or(Path::new("."))
    } else {
        anno
    };
    let seq = SequenceRecord::load(dir)?;
    let recs = read_results(results)?;
    let mut preds: Vec<Option<PixelBox>> = vec![None; seq.len()];
    for r in recs {
        match preds.get_mut(r.frame) {
            Some(slot) => *slot = Some(r.bbox),
            None => {
                return Err(
                    Error::Alignment(format!("result for frame {} beyond {} frames", r.frame, seq.len())).into(),
                )
            }
        }
    }
    let preds: Vec<PixelBox> = preds
        .into_iter()
        .enumerate()
        .map(|(i, p)| p.ok_or_else(|| Error::Alignment(format!("no result for frame {i}"))))
        .collect::<Result<_, _>>()?;
    let report = metrics::report(&preds, &seq.gts())?;
    println!("{}", serde_json::json!({ "sr": report.sr, "pr": report.pr }));
    if let Some(p) = out {
        fs::write(p, serde_json::to_string_pretty(&report)?).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn cmd_check(cli: &Cli) -> Result<bool> {
    let seed = load_config(cli)?.seed;
    let suites = check::run_all(seed);
    for s in &suites {
        println!("{s}");
    }
    let passed = suites.iter().filter(|s| s.passed()).count();
    println!("{passed}/{} suites passed", suites.len());
    Ok(passed == suites.len())
}

fn run(cli: Cli) -> Result<bool> {
    set_default_precision(match cli.precision {
        PrecisionArg::F32 => Precision::F32,
        PrecisionArg::F64 => Precision::F64,
    });
    match &cli.cmd {
        Cmd::Gen {
            script,
            preset,
            frames,
            count,
            out,
        } => cmd_gen(&cli, script.as_deref(), *preset, *frames, *count, out)?,
        Cmd::TrainToy { data, out, log } => cmd_train(&cli, data.clone(), out.clone(), log.clone())?,
        Cmd::Track {
            weights,
            seq,
            out,
            no_temporal,
            dump_attention,
            dump_masks,
            dump_dir,
        } => cmd_track(
            &cli,
            TrackArgs {
                weights: weights.clone(),
                seq: seq.clone(),
                out: out.clone(),
                no_temporal: *no_temporal,
                dump: DumpOptions {
                    attention: *dump_attention,
                    masks: *dump_masks,
                },
                dump_dir: dump_dir.clone(),
            },
        )?,
        Cmd::Eval { results, anno, out } => cmd_eval(results, anno, out.as_deref())?,
        Cmd::Check => return cmd_check(&cli),
    }
    Ok(true)
}

/// Malformed or invalid input exits with 2, everything else with 1.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Json { .. } | Error::Config(_) | Error::Validation(_)) => 2,
        _ if err.downcast_ref::<serde_json::Error>().is_some() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            // Core errors already embed their source in the message.
            let mut msg = String::new();
            for cause in e.chain() {
                let s = cause.to_string();
                if !msg.contains(&s) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&s);
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(exit_code(&e))
        }
    }
}
