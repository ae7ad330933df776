//! Command-line front end. Every subcommand resolves and validates the full
//! configuration first, echoes it to its output directory, then runs.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use crate::config::{env_pairs, parse_assignment, RunConfig};
use crate::datagen::{build_dataset, Split};
use crate::dataset::Corpus;
use crate::error::{Error, Result};
use crate::eval::{band_activation_analysis, evaluate, sweep_from_scores};
use crate::events::{format_predictions, read_scored, read_strong, EventTable};
use crate::gradsuite::{model_suite, primitive_suite};
use crate::model::{load_checkpoint, save_checkpoint, AstSed};
use crate::parallel;
use crate::pipeline::{ablation_tsv, evaluate_params, run_ablation};
use crate::training::{pretrain_at, train, TrainOptions};

/// Tolerances of the gradient suites.
pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 5e-3;

#[derive(Parser, Debug)]
#[command(name = "ast-sed", version, about = "Sound event detection with a frequency-wise transformer encoder and local GRU decoder")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Layered `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any key, e.g. `--set model.gru_hidden=8`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default 1 for reproducible reductions).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
struct ModelFlags {
    /// `fte` or `mean_pool`.
    #[arg(long)]
    encoder: Option<String>,
    /// Upsampling ratio of the decoder.
    #[arg(long)]
    ur: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize the seeded toy corpus into the data directory.
    GenData,
    /// Clip-tagging pretraining of the backbone.
    Pretrain,
    /// Mean-teacher training.
    Train {
        #[command(flatten)]
        model: ModelFlags,
        /// Backbone checkpoint from `pretrain`.
        #[arg(long)]
        backbone: Option<PathBuf>,
    },
    /// Score a checkpoint on a split, or a predictions file against references.
    Eval {
        #[command(flatten)]
        model: ModelFlags,
        #[arg(long, conflicts_with_all = ["refs", "preds"])]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, requires = "preds")]
        refs: Option<PathBuf>,
        #[arg(long, requires = "refs")]
        preds: Option<PathBuf>,
    },
    /// Component ablation and upsampling-ratio sweep.
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "1,2,5,10")]
        ur_list: Vec<usize>,
        /// Reuse a backbone instead of pretraining one.
        #[arg(long)]
        backbone: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Finite-difference checks of every primitive and the model loss.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        points: usize,
        #[arg(long, default_value_t = 10)]
        coords: usize,
    },
    /// Per-frequency-row detection histogram of a checkpoint.
    AnalyzeBands {
        #[command(flatten)]
        model: ModelFlags,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
    },
}

fn flag_layers(common: &Common, model: Option<&ModelFlags>) -> Result<Vec<(String, Value)>> {
    let mut out = Vec::new();
    if let Some(s) = common.seed {
        out.push(("run.seed".into(), Value::from(s)));
    }
    if let Some(t) = common.threads {
        out.push(("run.threads".into(), Value::from(t)));
    }
    if let Some(d) = &common.data_dir {
        out.push(("run.data_dir".into(), Value::from(d.display().to_string())));
    }
    if let Some(d) = &common.out_dir {
        out.push(("run.out_dir".into(), Value::from(d.display().to_string())));
    }
    if let Some(m) = model {
        if let Some(e) = &m.encoder {
            out.push(("model.encoder".into(), Value::from(e.as_str())));
        }
        if let Some(u) = m.ur {
            out.push(("model.upsample_ratio".into(), Value::from(u)));
        }
    }
    for s in &common.set {
        out.push(parse_assignment(s)?);
    }
    Ok(out)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn train_options(cfg: &RunConfig, backbone: Option<PathBuf>) -> TrainOptions {
    TrainOptions {
        schedule: cfg.train.clone(),
        batch: cfg.batch.clone(),
        augment: cfg.augment.clone(),
        seed: cfg.run.seed,
        backbone,
        decode: cfg.eval.decode.clone(),
        matching: cfg.eval.matching.clone(),
        psds: cfg.eval.psds.clone(),
        validate: true,
    }
}

fn load_corpus(cfg: &RunConfig, which: &[Split]) -> Result<Corpus> {
    let corpus = Corpus::load(&cfg.run.data_dir, &cfg.features, which)?;
    if corpus.manifest.vocabulary != cfg.data.vocabulary || corpus.manifest.synth != cfg.data.synth {
        return Err(Error::Config(format!(
            "dataset at {} was generated with a different data.vocabulary or data.synth",
            cfg.run.data_dir.display()
        )));
    }
    corpus.check_model(&cfg.model)?;
    Ok(corpus)
}

fn pretrain_backbone(cfg: &RunConfig, corpus: &Corpus, out: &Path) -> Result<PathBuf> {
    let outcome = pretrain_at(corpus, &cfg.model, &cfg.pretrain, cfg.run.seed)?;
    let path = out.join("backbone.ckpt");
    save_checkpoint(&path, &outcome.params, &cfg.model)?;
    let mut tsv = String::from("epoch\ttagging_bce\n");
    for (i, l) in outcome.epoch_losses.iter().enumerate() {
        writeln!(tsv, "{i}\t{l:.6}").unwrap();
    }
    write(&out.join("pretrain.tsv"), &tsv)?;
    if let Some(f1) = outcome.val_macro_f1 {
        println!("pretraining: validation tagging macro F1 {f1:.4}");
    }
    Ok(path)
}

fn write_evaluation(out: &Path, ev: &crate::eval::Evaluation) -> Result<()> {
    write(&out.join("eval.tsv"), &ev.summary.to_tsv())?;
    write(&out.join("short_long.tsv"), &ev.short_long.to_tsv())?;
    write(&out.join("eval.json"), &ev.summary.to_json())?;
    println!(
        "EB-F1 {:.4}  PSDS1 {:.4}  short {}  long {}",
        ev.summary.eb_f1,
        ev.summary.psds1,
        crate::eval::fmt_opt(ev.summary.short_f1),
        crate::eval::fmt_opt(ev.summary.long_f1)
    );
    Ok(())
}

fn eval_files(cfg: &RunConfig, refs: &Path, preds: &Path, out: &Path) -> Result<()> {
    let refs: EventTable = read_strong(refs)?;
    let mut scored = read_scored(preds)?;
    for name in refs.keys() {
        scored.entry(name.clone()).or_default();
    }
    let mut refs = refs;
    for name in scored.keys() {
        refs.entry(name.clone()).or_default();
    }
    let classes = cfg.data.class_names();
    let ests: EventTable = scored.iter().map(|(k, v)| (k.clone(), v.iter().map(|s| s.event.clone()).collect())).collect();
    let sweep = sweep_from_scores(&scored, &cfg.eval.psds.thresholds);
    let seconds = refs.len() as f64 * cfg.data.synth.clip_length;
    let ev = evaluate(
        &refs,
        &ests,
        &sweep,
        &classes,
        seconds,
        &cfg.eval.matching,
        &cfg.eval.psds,
        cfg.eval.boundary(cfg.data.synth.clip_length),
    )?;
    write_evaluation(out, &ev)
}

fn execute(command: Command, cfg: &RunConfig) -> Result<()> {
    let out = cfg.run.out_dir.as_path();
    match command {
        Command::GenData => {
            let built = build_dataset(&cfg.data, &cfg.run.data_dir)?;
            println!(
                "wrote {} clips ({} strong events, {} weak rows, {} unlabeled) to {}",
                built.clips,
                built.strong_rows,
                built.weak_rows,
                built.unlabeled,
                cfg.run.data_dir.display()
            );
        }
        Command::Pretrain => {
            let corpus = load_corpus(cfg, &[Split::StrongReal, Split::StrongSynth, Split::Weak, Split::Validation])?;
            let path = pretrain_backbone(cfg, &corpus, out)?;
            println!("backbone written to {}", path.display());
        }
        Command::Train { backbone, .. } => {
            let corpus = load_corpus(cfg, &Split::ALL)?;
            let outcome = train(&corpus, &cfg.model, &train_options(cfg, backbone))?;
            outcome.write(out, &cfg.model)?;
            if let Some(last) = outcome.epochs.last() {
                println!("final epoch: L_c {:.4} L_f {:.4} val EB-F1 {}", last.loss.l_c, last.loss.l_f, crate::eval::fmt_opt(last.val_f1));
            }
        }
        Command::Eval { checkpoint, split, refs, preds, .. } => match (checkpoint, refs, preds) {
            (Some(ckpt), None, None) => {
                let params = load_checkpoint(&ckpt, &cfg.model)?;
                let corpus = load_corpus(cfg, &[split])?;
                let (ev, scored) = evaluate_params(&corpus, split, &cfg.model, &params, &cfg.eval)?;
                write(&out.join("predictions.tsv"), &format_predictions(&scored))?;
                write_evaluation(out, &ev)?;
            }
            (None, Some(r), Some(p)) => eval_files(cfg, &r, &p, out)?,
            _ => return Err(Error::Config("eval needs --checkpoint, or both --refs and --preds".into())),
        },
        Command::Ablate { ur_list, backbone, split } => {
            if ur_list.is_empty() || ur_list.contains(&0) {
                return Err(Error::Config("--ur-list needs positive ratios".into()));
            }
            let corpus = load_corpus(cfg, &Split::ALL)?;
            let backbone = match backbone {
                Some(b) => b,
                None => pretrain_backbone(cfg, &corpus, out)?,
            };
            let mut opts = train_options(cfg, Some(backbone));
            opts.validate = false;
            let rows = run_ablation(&corpus, &cfg.model, &opts, &cfg.eval, &ur_list, split);
            let table = ablation_tsv(&rows);
            write(&out.join("ablation.tsv"), &table)?;
            print!("{table}");
        }
        Command::Gradcheck { points, coords } => {
            let mut failures = Vec::new();
            let mut tsv = String::from("check\tmax_rel_error\ttolerance\tstatus\n");
            let mut row = |name: &str, err: f64, tol: f64, failures: &mut Vec<String>| {
                let ok = err <= tol;
                if !ok {
                    failures.push(format!("{name} ({err:.3e})"));
                }
                println!("{name:<16} {err:.3e}  {}", if ok { "ok" } else { "FAIL" });
                writeln!(tsv, "{name}\t{err:.6e}\t{tol:e}\t{}", if ok { "ok" } else { "fail" }).unwrap();
            };
            for e in primitive_suite(points, cfg.run.seed)? {
                row(e.name, e.max_rel_error, PRIMITIVE_TOL, &mut failures);
            }
            let err = model_suite(&cfg.model, coords, cfg.run.seed)?;
            row("model_loss", err, MODEL_TOL, &mut failures);
            write(&out.join("gradcheck.tsv"), &tsv)?;
            if !failures.is_empty() {
                return Err(Error::Numerical(format!("gradient checks above tolerance: {}", failures.join(", "))));
            }
        }
        Command::AnalyzeBands { checkpoint, split, .. } => {
            let params = load_checkpoint(&checkpoint, &cfg.model)?;
            let corpus = load_corpus(cfg, &[split])?;
            let model = AstSed::new(cfg.model.clone())?;
            let hist = band_activation_analysis(&model, &params, corpus.split(split), &corpus.classes, &cfg.eval.decode, &cfg.eval.matching)?;
            let csv = hist.to_csv();
            write(&out.join("bands.csv"), &csv)?;
            print!("{csv}");
        }
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I, env: impl IntoIterator<Item = (String, String)>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run_parsed(cli, env) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run_parsed(cli: Cli, env: impl IntoIterator<Item = (String, String)>) -> Result<()> {
    let model = match &cli.command {
        Command::Train { model, .. } | Command::Eval { model, .. } | Command::AnalyzeBands { model, .. } => Some(model),
        _ => None,
    };
    let cfg = RunConfig::load(cli.common.config.as_deref(), env_pairs(env), flag_layers(&cli.common, model)?)?;
    parallel::set_threads(cfg.run.threads);
    // Even for gen-data the echo goes to the output directory, so the dataset
    // tree only holds generated files.
    cfg.echo(&cfg.run.out_dir)?;
    execute(cli.command, &cfg)
}
