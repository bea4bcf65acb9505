//! Command-line front end. Exit codes: 0 success, 1 runtime error, 2 usage
//! error. `MMODALCC_THREADS` caps the worker pool.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use image::RgbImage;

use crate::attn_export::{collect_maps, write_maps, OverlayImages};
use crate::augment::augment_corpus;
use crate::checkpoint::Checkpoint;
use crate::dataset::lint::lint_captions;
use crate::dataset::stats::compute_stats;
use crate::dataset::{detokenize, entries_in, load_index, write_corpus, DatasetEntry, Split};
use crate::decoder::BeamOptions;
use crate::metrics::{build_items, evaluate, load_spice};
use crate::model::ImageBatch;
use crate::training::{caption_entries, TrainConfig, Trainer};

pub const THREADS_ENV: &str = "MMODALCC_THREADS";
pub const DEFAULT_BEAM: usize = 4;

#[derive(Debug, Parser)]
#[command(name = "mmodalcc", version, about = "Multimodal change captioning for bitemporal remote sensing pairs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes train_log.csv, last.ckpt and best.ckpt.
    Train(TrainArgs),
    /// Caption a split and write the metric report.
    Eval(EvalArgs),
    /// Caption one image pair.
    Caption(CaptionArgs),
    /// Write the augmented corpus (train and val doubled).
    Augment(AugmentArgs),
    /// Write corpus statistics as CSV.
    Stats(StatsArgs),
    /// Check captions against the annotation guidelines.
    Lint(LintArgs),
    /// Export attention maps for one corpus entry.
    AttnExport(AttnExportArgs),
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    /// Corpus root holding A/, B/, labelA/, labelB/ and index.json.
    #[arg(long)]
    pub root: PathBuf,
    /// Index file; defaults to ROOT/index.json.
    #[arg(long)]
    pub index: Option<PathBuf>,
}

impl CorpusArgs {
    pub fn load(&self) -> anyhow::Result<Vec<DatasetEntry>> {
        let index = self.index.clone().unwrap_or_else(|| self.root.join("index.json"));
        load_index(&self.root, &index).with_context(|| format!("loading corpus from {}", self.root.display()))
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// TOML training configuration; defaults to the full-size setup.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the configured epoch count.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

impl SplitArg {
    fn select(self, entries: &[DatasetEntry]) -> Vec<&DatasetEntry> {
        match self {
            SplitArg::Train => entries_in(entries, Split::Train),
            SplitArg::Val => entries_in(entries, Split::Val),
            SplitArg::Test => entries_in(entries, Split::Test),
            SplitArg::All => entries.iter().collect(),
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long, default_value_t = DEFAULT_BEAM, value_parser = clap::builder::RangedU64ValueParser::<usize>::new().range(1..))]
    pub beam: usize,
    /// Precomputed SPICE scores (JSON object or `id,spice` CSV).
    #[arg(long)]
    pub spice: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CaptionArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub before: PathBuf,
    #[arg(long)]
    pub after: PathBuf,
    #[arg(long)]
    pub sem_before: Option<PathBuf>,
    #[arg(long)]
    pub sem_after: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BEAM, value_parser = clap::builder::RangedU64ValueParser::<usize>::new().range(1..))]
    pub beam: usize,
    /// Also write attention maps and overlays (requires --out).
    #[arg(long, requires = "out")]
    pub attn: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// CSV files go to OUT/stats/.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct LintArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Write findings to this file instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AttnExportArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Entry id to caption.
    #[arg(long)]
    pub id: String,
    #[arg(long, default_value_t = DEFAULT_BEAM, value_parser = clap::builder::RangedU64ValueParser::<usize>::new().range(1..))]
    pub beam: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args`, runs the command and maps the outcome to an exit code.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match configure_threads().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = v.parse().with_context(|| format!("{THREADS_ENV}={v} is not a thread count"))?;
    if n == 0 {
        bail!("{THREADS_ENV} must be at least 1");
    }
    // a pool that already exists (e.g. in tests) keeps its size
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Caption(a) => {
            println!("{}", cmd_caption(&a)?);
            Ok(())
        }
        Command::Augment(a) => cmd_augment(&a),
        Command::Stats(a) => cmd_stats(&a),
        Command::Lint(a) => cmd_lint(&a),
        Command::AttnExport(a) => cmd_attn_export(&a),
    }
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn cmd_train(a: &TrainArgs) -> anyhow::Result<()> {
    let mut config = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(e) = a.epochs {
        config.max_epochs = e;
    }
    let entries = a.corpus.load()?;
    create_dir(&a.out)?;
    std::fs::write(a.out.join("config.toml"), config.to_toml_string()?)?;
    let mut trainer = Trainer::new(config, &entries)?;
    trainer.fit(&entries, Some(&a.out), |log| match &log.val {
        Some(v) => eprintln!("epoch {:>4}  loss {:.6}  val S_m* {:.4}", log.epoch, log.loss, v.s_m),
        None => eprintln!("epoch {:>4}  loss {:.6}", log.epoch, log.loss),
    })?;
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let model = ckpt.model()?;
    let entries = a.corpus.load()?;
    let subset = a.split.select(&entries);
    if subset.is_empty() {
        bail!("no entries in split {:?}", a.split);
    }
    let spice = a.spice.as_deref().map(load_spice).transpose()?;
    let opts = BeamOptions::new(a.beam, model.config.t_max);
    let hyps = caption_entries(&model, &ckpt.store, &ckpt.vocab, &subset, &opts)?;
    let items = build_items(&subset, &hyps)?;
    let report = evaluate(&items, spice.as_ref())?;
    create_dir(&a.out)?;
    report.write(&a.out, "eval_report")?;
    let captions: BTreeMap<&String, String> = hyps.iter().map(|(id, h)| (id, detokenize(h))).collect();
    std::fs::write(a.out.join("captions.json"), serde_json::to_string_pretty(&captions)? + "\n")?;
    print!("{}", report.to_csv());
    Ok(())
}

fn read_image(path: &Path) -> anyhow::Result<RgbImage> {
    Ok(image::open(path).with_context(|| format!("reading {}", path.display()))?.to_rgb8())
}

/// Captions one pair and returns the caption text.
pub fn cmd_caption(a: &CaptionArgs) -> anyhow::Result<String> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let model = ckpt.model()?;
    let before = read_image(&a.before)?;
    let after = read_image(&a.after)?;
    let (sem_before, sem_after) = match (&a.sem_before, &a.sem_after) {
        (Some(b), Some(f)) => (read_image(b)?, read_image(f)?),
        _ if model.config.needs_semantic() => {
            bail!("this model uses semantic maps: pass both --sem-before and --sem-after")
        }
        // the semantic branch is never read, so blank maps stand in
        _ => (RgbImage::new(before.width(), before.height()), RgbImage::new(before.width(), before.height())),
    };
    let side = model.config.encoder.image_side as u32;
    if before.dimensions() != (side, side) {
        bail!("the model expects {side}x{side} images, got {:?}", before.dimensions());
    }
    let images = [&before, &after, &sem_before, &sem_after];
    let batch = ImageBatch::from_images(images, model.config.encoder.semantic_input)?;
    let opts = BeamOptions::new(a.beam, model.config.t_max);
    let text = if a.attn {
        let trace = model.caption_with_attention(&ckpt.store, &batch, &opts)?;
        let maps = collect_maps(&trace.records, &trace.hypothesis.tokens, &ckpt.vocab, model.config.encoder.backbone.grid_side)?;
        let out = a.out.as_deref().expect("clap enforces --out with --attn");
        let overlay = OverlayImages { rgb_before: &before, rgb_after: &after, sem_before: &sem_before, sem_after: &sem_after };
        write_maps(out, &maps, overlay)?;
        detokenize(&ckpt.vocab.decode_caption(trace.hypothesis.generated()))
    } else {
        detokenize(&ckpt.vocab.decode_caption(model.caption(&ckpt.store, &batch, &opts)?.generated()))
    };
    if let Some(out) = &a.out {
        create_dir(out)?;
        std::fs::write(out.join("caption.txt"), format!("{text}\n"))?;
    }
    Ok(text)
}

pub fn cmd_augment(a: &AugmentArgs) -> anyhow::Result<()> {
    let entries = a.corpus.load()?;
    let augmented = augment_corpus(&entries, a.seed)?;
    write_corpus(&a.out, &augmented)?;
    eprintln!("{} entries written to {}", augmented.len(), a.out.display());
    Ok(())
}

pub fn cmd_stats(a: &StatsArgs) -> anyhow::Result<()> {
    let entries = a.corpus.load()?;
    let stats = compute_stats(&entries);
    stats.write_csv(&a.out.join("stats"))?;
    eprintln!(
        "{} entries, {} captions, mean length {:.3} (sd {:.3})",
        entries.len(),
        stats.caption_count,
        stats.mean_length,
        stats.std_length
    );
    Ok(())
}

pub fn cmd_lint(a: &LintArgs) -> anyhow::Result<()> {
    let entries = a.corpus.load()?;
    let text: String = lint_captions(&entries).iter().map(|f| format!("{f}\n")).collect();
    match &a.out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

pub fn cmd_attn_export(a: &AttnExportArgs) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let model = ckpt.model()?;
    let entries = a.corpus.load()?;
    let Some(entry) = entries.iter().find(|e| e.id == a.id) else { bail!("no entry with id `{}`", a.id) };
    let batch = ImageBatch::from_entries(&[entry], model.config.encoder.semantic_input)?;
    let trace = model.caption_with_attention(&ckpt.store, &batch, &BeamOptions::new(a.beam, model.config.t_max))?;
    let maps = collect_maps(&trace.records, &trace.hypothesis.tokens, &ckpt.vocab, model.config.encoder.backbone.grid_side)?;
    write_maps(&a.out, &maps, OverlayImages::of(entry))?;
    let text = detokenize(&ckpt.vocab.decode_caption(trace.hypothesis.generated()));
    std::fs::write(a.out.join("caption.txt"), format!("{text}\n"))?;
    println!("{text}");
    Ok(())
}
