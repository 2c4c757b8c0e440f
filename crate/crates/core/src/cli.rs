//! The `mmlayout` command line.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::json;

use crate::cluster::{ClusterParams, DEFAULT_MIN_PTS, DEFAULT_RADIUS};
use crate::doc::{load_document, Page};
use crate::error::{Error, Result};
use crate::graph::{build_graph, Grid};
use crate::model::Model;
use crate::numerics::Tape;
use crate::render::{count_regions, render_svg};
use crate::tasks::synth::{synth_generate, write_corpus, Corpus, SynthParams, Variant};
use crate::trainer::{
    ablate, ablation_csv, evaluate_checkpoint, gradcheck_suite, prepare_corpus, summarize, train, write_file,
    AblationAxis, RunConfig, CHECKPOINT_FILE, LOG_FILE,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_INTERNAL: i32 = 2;

/// Largest end-to-end gradient-check error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "mmlayout", version, about = "Document graphs, region clustering and multi-grained layout models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the document graph of one page and write it as JSON.
    BuildGraph {
        /// Document JSON file.
        #[arg(long)]
        input: PathBuf,
        /// Clustering radius in page pixels.
        #[arg(long, default_value_t = DEFAULT_RADIUS)]
        radius: f64,
        /// Other segments that must lie within the radius for a segment to be core.
        #[arg(long, default_value_t = DEFAULT_MIN_PTS)]
        min_pts: usize,
        /// Patch grid as COLSxROWS.
        #[arg(long, default_value = "7x7")]
        grid: Grid,
        /// Output file; standard output when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Draw segment boxes and salient-region rectangles as SVG.
    Render {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = DEFAULT_RADIUS)]
        radius: f64,
        #[arg(long, default_value_t = DEFAULT_MIN_PTS)]
        min_pts: usize,
        #[arg(long)]
        svg_out: PathBuf,
    },
    /// Generate a labeled synthetic corpus.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        count: usize,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// `form` or `region-cue`.
        #[arg(long, default_value = "form")]
        variant: Variant,
        /// Upper bound on words per page.
        #[arg(long, default_value_t = 40)]
        max_words: usize,
    },
    /// Train a model; writes model.ckpt and metrics.jsonl into --out.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        /// JSON with `model` and `train` sections; the reference configuration when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a labeled corpus.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Write predicted word tags per document as JSON.
        #[arg(long)]
        predictions_out: Option<PathBuf>,
        /// Write per-stage tensor shapes and norms for every document as JSON.
        #[arg(long)]
        dump_intermediates: Option<PathBuf>,
    },
    /// Train every variant along one ablation axis and write a CSV table.
    Ablate {
        /// components, coarse_layers or radius.
        #[arg(long)]
        axis: AblationAxis,
        #[arg(long)]
        corpus: PathBuf,
        /// CSV output file.
        #[arg(long)]
        out: PathBuf,
        /// Base configuration; the reference configuration when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Finite-difference check of the full model; prints the max relative error.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Invalid(format!("{} does not exist", path.display())))
    }
}

fn read_page(path: &Path) -> Result<Page> {
    require(path)?;
    load_document(path)
}

fn read_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => {
            require(p)?;
            RunConfig::from_json(&fs::read_to_string(p)?)
        }
        None => Ok(RunConfig::reference()),
    }
}

fn read_corpus(dir: &Path) -> Result<Corpus> {
    require(dir)?;
    Corpus::load(dir)
}

fn pretty(v: &serde_json::Value) -> String {
    serde_json::to_string_pretty(v).expect("JSON values serialize")
}

/// Runs one command and returns the text for standard output.
pub fn execute(cmd: Command) -> Result<String> {
    match cmd {
        Command::BuildGraph { input, radius, min_pts, grid, output } => {
            let page = read_page(&input)?;
            let g = build_graph(&page, &ClusterParams::try_new(radius, min_pts)?, grid)?;
            let text = pretty(&serde_json::to_value(g.to_json())?);
            match output {
                Some(p) => {
                    write_file(&p, &text)?;
                    Ok(format!("wrote graph with {} regions to {}\n", g.regions().len(), p.display()))
                }
                None => Ok(text + "\n"),
            }
        }
        Command::Render { input, radius, min_pts, svg_out } => {
            let page = read_page(&input)?;
            let g = build_graph(&page, &ClusterParams::try_new(radius, min_pts)?, Grid::new(1, 1))?;
            let svg = render_svg(&g);
            write_file(&svg_out, &svg)?;
            Ok(format!("wrote {} regions to {}\n", count_regions(&svg), svg_out.display()))
        }
        Command::Synth { seed, count, out, variant, max_words } => {
            let params = SynthParams { variant, max_words, ..SynthParams::default() };
            let docs = synth_generate(seed, count, &params)?;
            let m = write_corpus(&out, seed, &params, &docs)?;
            Ok(format!("wrote {} documents to {}\n", m.files.len(), out.display()))
        }
        Command::Train { corpus, config, out } => {
            let rc = read_config(config.as_deref())?;
            let corpus = read_corpus(&corpus)?;
            let o = train(&corpus, &rc.model, &rc.train, Some(&out))?;
            Ok(pretty(&json!({
                "best_f1": o.best_f1,
                "best_step": o.best_step,
                "eval": o.eval,
                "seconds": o.seconds,
                "checkpoint": out.join(CHECKPOINT_FILE),
                "log": out.join(LOG_FILE),
            })) + "\n")
        }
        Command::Eval { checkpoint, corpus, predictions_out, dump_intermediates } => {
            require(&checkpoint)?;
            let corpus = read_corpus(&corpus)?;
            let (report, preds) = evaluate_checkpoint(&checkpoint, &corpus)?;
            if let Some(p) = predictions_out {
                let by_doc: serde_json::Map<String, serde_json::Value> =
                    corpus.docs.iter().zip(&preds).map(|((name, _), tags)| (name.clone(), json!(tags))).collect();
                write_file(&p, &pretty(&serde_json::Value::Object(by_doc)))?;
            }
            if let Some(p) = dump_intermediates {
                let (model, store, _) = Model::load(&checkpoint)?;
                let docs = prepare_corpus(&model, &corpus)?;
                let mut dump = serde_json::Map::new();
                for ((name, _), doc) in corpus.docs.iter().zip(&docs) {
                    let mut tape = Tape::inference();
                    let (logits, stages) = model.logits(&mut tape, &store, doc, None)?;
                    let mut s = stages.summary(&tape);
                    s["logits"] = json!({"shape": tape.shape(logits), "norm": tape.value(logits).norm()});
                    dump.insert(name.clone(), s);
                }
                write_file(&p, &pretty(&serde_json::Value::Object(dump)))?;
            }
            Ok(pretty(&serde_json::to_value(report)?) + "\n")
        }
        Command::Ablate { axis, corpus, out, config, seeds } => {
            let rc = read_config(config.as_deref())?;
            let corpus = read_corpus(&corpus)?;
            let rows = ablate(&corpus, &rc, axis, &seeds)?;
            write_file(&out, &ablation_csv(&rows))?;
            let mut text = String::new();
            for s in summarize(&rows) {
                text.push_str(&format!("{}\tmean F1 {:.4} over {} seeds\n", s.run, s.mean_f1, s.seeds));
            }
            Ok(text)
        }
        Command::Gradcheck { seed } => {
            let s = gradcheck_suite(seed)?;
            let line = format!(
                "max relative error {:e} ({} elements with |g| >= {:e}; {} below, strict max {:e}; {:.1}s)\n",
                s.max_rel_error, s.checked, s.resolution, s.unresolved, s.strict_max_rel_error, s.seconds
            );
            if s.max_rel_error < GRADCHECK_TOLERANCE {
                Ok(line)
            } else {
                Err(Error::Numeric(format!("gradient check failed: {}", line.trim_end())))
            }
        }
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit code. Output goes to standard output, diagnostics to standard error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(text) => {
            print!("{text}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                EXIT_VALIDATION
            } else {
                EXIT_INTERNAL
            }
        }
    }
}
