use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tastesim::corpus::{read_corpus_file, DateRange};
use tastesim::ingest::{self, FeatureTensor, MalformedPolicy, TensorLayout};
use tastesim::pairs::{sample_pairs, write_pairs_csv, Cooccurrence, PairConfig, Strategy};
use tastesim::pipeline::{self, CorpusConfig, PipelineConfig, RunOptions};
use tastesim::simnet::{self, Activation, ArchitectureConfig, ConvConfig, NetCheckpoint, Optimizer, PoolOrder, TrainConfig};
use tastesim::synth::{generate_world, write_world, WorldSpec};
use tastesim::temporal::{self, HistogramBins};
use tastesim::topics::{fit_lda, song_theme_distribution, taste_similarity, Inversion, LdaConfig, TopicModel};
use tastesim::{Error, Result};

#[derive(Parser)]
#[command(name = "tastesim", version, about = "Learn song similarity in attribute space from listening proximity")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage of the pipeline from a TOML config.
    Run(RunArgs),
    /// Match events to the attribute catalog and write the resolved stream.
    Ingest(IngestArgs),
    /// Bucket resolved events into weekly documents.
    BuildCorpus(BuildCorpusArgs),
    /// Fit the taste model by collapsed Gibbs sampling.
    LdaFit(LdaFitArgs),
    /// Print the taste similarity of two songs.
    TasteSim(TasteSimArgs),
    /// Mean taste similarity by log gap time between consecutive listens.
    AnalyzeGaps(AnalyzeGapsArgs),
    /// Taste similarity of songs separated by n intervening listens.
    AnalyzeSkip(AnalyzeSkipArgs),
    /// Draw labelled song pairs.
    SamplePairs(SamplePairsArgs),
    /// Train the pairwise network.
    Train(TrainArgs),
    /// Print the attribute similarity of two songs under a trained network.
    Predict(PredictArgs),
    /// Generate a synthetic world.
    SynthGen(SynthArgs),
    /// Summarize the artifacts of a workdir as markdown.
    Report(ReportArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override a config key, e.g. `--set lda.k=8`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    events: Option<PathBuf>,
    #[arg(long)]
    attributes: Option<PathBuf>,
    #[arg(long)]
    workdir: Option<PathBuf>,
    /// Ignore an existing manifest and rerun every stage.
    #[arg(long)]
    fresh: bool,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    events: PathBuf,
    #[arg(long)]
    attributes: PathBuf,
    #[arg(long, default_value = "events.resolved.tsv")]
    out: PathBuf,
    #[arg(long, default_value = "matches.csv")]
    matches: PathBuf,
    #[arg(long, default_value_t = ingest::DEFAULT_MATCH_THRESHOLD)]
    threshold: f64,
    #[arg(long, default_value_t = 1)]
    min_listens: usize,
    /// Abort on the first malformed line.
    #[arg(long)]
    strict: bool,
}

#[derive(Args)]
struct BuildCorpusArgs {
    #[arg(long)]
    events: PathBuf,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Inclusive lower bound, RFC 3339.
    #[arg(long)]
    from: Option<chrono::DateTime<chrono::Utc>>,
    /// Exclusive upper bound, RFC 3339.
    #[arg(long)]
    to: Option<chrono::DateTime<chrono::Utc>>,
}

#[derive(Args)]
struct LdaFitArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "model.lda")]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    k: usize,
    /// Defaults to 50 / k.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, default_value_t = 0.01)]
    beta: f64,
    #[arg(long, default_value_t = 1000)]
    iterations: usize,
    #[arg(long, default_value_t = 500)]
    burn_in: usize,
    #[arg(long, default_value_t = 10)]
    thin: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    theta_csv: Option<PathBuf>,
    #[arg(long)]
    phi_csv: Option<PathBuf>,
}

#[derive(Args)]
struct TasteSimArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    song_x: String,
    #[arg(long)]
    song_y: String,
    #[arg(long, default_value = "bayes")]
    inversion: Inversion,
}

#[derive(Args)]
struct AnalysisInputs {
    #[arg(long)]
    events: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "bayes")]
    inversion: Inversion,
}

#[derive(Args)]
struct AnalyzeGapsArgs {
    #[command(flatten)]
    inputs: AnalysisInputs,
    #[arg(long, default_value = "gap_sim.csv")]
    out: PathBuf,
    /// Gap unit in minutes.
    #[arg(long, default_value_t = 1.0)]
    time_scale: f64,
    #[arg(long, default_value_t = 20)]
    bins: usize,
}

#[derive(Args)]
struct AnalyzeSkipArgs {
    #[command(flatten)]
    inputs: AnalysisInputs,
    #[arg(long, default_value = "nskip.csv")]
    out: PathBuf,
    #[arg(long, default_value_t = 10, allow_negative_numbers = true)]
    max_skip: i64,
}

#[derive(Args)]
struct SamplePairsArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "pairs.csv")]
    out: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    count: usize,
    #[arg(long, default_value = "stratified-by-label")]
    strategy: Strategy,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Train, validation and test fractions.
    #[arg(long, value_delimiter = ',', default_values_t = [0.8, 0.1, 0.1])]
    splits: Vec<f64>,
    #[arg(long, default_value_t = 10)]
    label_bins: usize,
    #[arg(long, default_value = "bayes")]
    inversion: Inversion,
}

#[derive(Args)]
struct TensorSource {
    /// Pre-assembled tensors (JSON lines).
    #[arg(long, conflicts_with = "attributes")]
    tensors: Option<PathBuf>,
    /// Attribute records to assemble tensors from.
    #[arg(long)]
    attributes: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    pairs: PathBuf,
    #[command(flatten)]
    source: TensorSource,
    /// Channel features, comma separated (with --attributes).
    #[arg(long, value_delimiter = ',')]
    channels: Vec<String>,
    /// Channel length (with --attributes).
    #[arg(long)]
    length: Option<usize>,
    #[arg(long, default_value = "net.ckpt")]
    out: PathBuf,
    #[arg(long, default_value = "loss_history.csv")]
    history: PathBuf,
    /// Conv layers as `channels:kernel:pool`, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = ["8:5:2".to_string(), "8:5:2".to_string()])]
    conv: Vec<String>,
    #[arg(long, value_delimiter = ',', default_values_t = [200usize, 150])]
    hidden: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    output: usize,
    #[arg(long)]
    conv_then_pool: bool,
    #[arg(long)]
    relu_output: bool,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    /// sgd, momentum or adam.
    #[arg(long, default_value = "adam")]
    optimizer: String,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    patience: Option<usize>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    source: TensorSource,
    #[arg(long)]
    song_x: String,
    #[arg(long)]
    song_y: String,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    themes: usize,
    #[arg(long, default_value_t = 25)]
    songs_per_theme: usize,
    #[arg(long, default_value_t = 50)]
    users: usize,
    #[arg(long, default_value_t = 20)]
    weeks: usize,
    #[arg(long, default_value_t = 8.0)]
    mean_streak_len: f64,
    #[arg(long, default_value_t = 3.0)]
    within_gap_minutes: f64,
    #[arg(long, default_value_t = 2880.0)]
    between_gap_minutes: f64,
    #[arg(long, default_value_t = 4)]
    channels: usize,
    #[arg(long, default_value_t = 64)]
    length: usize,
    #[arg(long, default_value_t = 0.5)]
    sigma_within: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma_between: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Also write a pipeline config for the world.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    workdir: PathBuf,
    /// Defaults to `<workdir>/report.md`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_conv(raw: &str) -> Result<ConvConfig> {
    let parts: Vec<usize> = raw
        .split(':')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("conv layer `{raw}` is not channels:kernel:pool")))?;
    match parts[..] {
        [channels, kernel, pool] => Ok(ConvConfig { channels, kernel, pool }),
        _ => Err(Error::Config(format!("conv layer `{raw}` is not channels:kernel:pool"))),
    }
}

fn parse_optimizer(name: &str, momentum: f64) -> Result<Optimizer> {
    match name {
        "sgd" => Ok(Optimizer::Sgd),
        "momentum" => Ok(Optimizer::Momentum { momentum }),
        "adam" => Ok(Optimizer::adam()),
        other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
    }
}

type Fitted = Option<(TensorLayout, ingest::ChannelStats)>;

/// Tensors either read as-is or assembled from attributes. Returns the
/// layout and statistics when they were fitted here.
fn load_tensors(
    source: &TensorSource,
    layout: Option<TensorLayout>,
    stats: Option<&ingest::ChannelStats>,
) -> Result<(HashMap<String, FeatureTensor>, Fitted)> {
    match (&source.tensors, &source.attributes) {
        (Some(path), _) => Ok((pipeline::tensor_map(path)?, None)),
        (None, Some(path)) => {
            let layout = layout.ok_or_else(|| Error::Config("--attributes needs a tensor layout".into()))?;
            let records = ingest::read_attributes_file(path)?;
            if let Some(stats) = stats {
                let tensors = records
                    .iter()
                    .map(|r| ingest::assemble_tensor(r, &layout, Some(stats)).map(|t| (t.song_key.clone(), t)))
                    .collect::<Result<_>>()?;
                return Ok((tensors, None));
            }
            let refs: Vec<_> = records.iter().collect();
            let (tensors, stats) = ingest::assemble_corpus(&refs, &layout)?;
            Ok((tensors.into_iter().map(|t| (t.song_key.clone(), t)).collect(), Some((layout, stats))))
        }
        (None, None) => Err(Error::Config("one of --tensors or --attributes is required".into())),
    }
}

fn table(model: &Path, inversion: Inversion) -> Result<tastesim::topics::SongTable> {
    Ok(TopicModel::load(model)?.song_table(inversion))
}

fn analysis_events(inputs: &AnalysisInputs) -> Result<Vec<ingest::ListeningEvent>> {
    let mut events = ingest::read_events_file(&inputs.events, MalformedPolicy::Lenient)?.events;
    temporal::sort_streams(&mut events);
    Ok(events)
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Run(a) => {
            let mut config = PipelineConfig::load(&a.config, &a.overrides)?;
            if let Some(p) = a.events {
                config.paths.events = p;
            }
            if let Some(p) = a.attributes {
                config.paths.attributes = p;
            }
            if let Some(p) = a.workdir {
                config.paths.workdir = p;
            }
            let manifest = pipeline::run_pipeline_with(&config, RunOptions { fresh: a.fresh })?;
            println!("{}", config.paths.workdir.join("manifest.json").display());
            if let Some(m) = manifest.stage(pipeline::Stage::Evaluate) {
                for (k, v) in &m.metrics {
                    println!("{k}\t{v}");
                }
            }
        }
        Command::Ingest(a) => {
            let config = CorpusConfig {
                min_listens: a.min_listens,
                match_threshold: a.threshold,
                malformed: if a.strict { MalformedPolicy::Strict } else { MalformedPolicy::Lenient },
                ..CorpusConfig::default()
            };
            let s = pipeline::ingest_files(&a.events, &a.attributes, &config, &a.out, &a.matches)?;
            println!(
                "events {}\tmalformed {}\tunresolved {}\tkept {}",
                s.events, s.malformed, s.unresolved, s.kept
            );
        }
        Command::BuildCorpus(a) => {
            std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
            let s = pipeline::corpus_files(&a.events, DateRange { from: a.from, to: a.to }, &a.out_dir)?;
            println!(
                "documents {}\tusers {}\tvocabulary {}\ttokens {}",
                s.documents, s.users, s.vocabulary, s.tokens
            );
        }
        Command::LdaFit(a) => {
            let corpus = read_corpus_file(&a.corpus)?;
            let config = LdaConfig {
                k: a.k,
                alpha: a.alpha,
                beta: a.beta,
                iterations: a.iterations,
                burn_in: a.burn_in,
                thin: a.thin,
                seed: a.seed,
                ..LdaConfig::default()
            };
            let model = fit_lda(&corpus, &config)?;
            model.save(&a.out)?;
            if let Some(p) = a.theta_csv {
                model.write_theta_csv(&p)?;
            }
            if let Some(p) = a.phi_csv {
                model.write_phi_csv(&p)?;
            }
        }
        Command::TasteSim(a) => {
            let model = TopicModel::load(&a.model)?;
            let px = song_theme_distribution(&model, &a.song_x, a.inversion)?;
            let py = song_theme_distribution(&model, &a.song_y, a.inversion)?;
            println!("{}", taste_similarity(&px.p, &py.p)?);
        }
        Command::AnalyzeGaps(a) => {
            let events = analysis_events(&a.inputs)?;
            let t = table(&a.inputs.model, a.inputs.inversion)?;
            let scan = temporal::gap_similarity_scan(&events, &t, a.time_scale)?;
            let bins = temporal::gap_histogram(&scan.observations, HistogramBins { count: a.bins, range: None })?;
            temporal::write_gap_csv(&a.out, &bins)?;
            let dt: Vec<f64> = scan.observations.iter().map(|o| o.delta_t).collect();
            let sim: Vec<f64> = scan.observations.iter().map(|o| o.sim).collect();
            println!(
                "pairs {}\tskipped {}\tspearman {}",
                dt.len(),
                scan.skipped,
                tastesim::stats::spearman(&dt, &sim).map_or("-".into(), |r| r.to_string())
            );
        }
        Command::AnalyzeSkip(a) => {
            let max_skip = usize::try_from(a.max_skip)
                .map_err(|_| Error::Config(format!("--max-skip must be non-negative, got {}", a.max_skip)))?;
            let events = analysis_events(&a.inputs)?;
            let t = table(&a.inputs.model, a.inputs.inversion)?;
            let levels = temporal::n_skip_analysis(&events, &t, max_skip)?;
            temporal::write_nskip_csv(&a.out, &levels)?;
        }
        Command::SamplePairs(a) => {
            let corpus = read_corpus_file(&a.corpus)?;
            let splits: [f64; 3] = a
                .splits
                .as_slice()
                .try_into()
                .map_err(|_| Error::Config("--splits needs exactly three fractions".into()))?;
            let t = table(&a.model, a.inversion)?;
            let config = PairConfig {
                count: a.count,
                strategy: a.strategy,
                seed: a.seed,
                splits,
                label_bins: a.label_bins,
            };
            let cooc = (a.strategy == Strategy::CooccurrenceWeighted).then(|| Cooccurrence::from_corpus(&corpus));
            let pairs = sample_pairs(&corpus.vocabulary, &t, &config, cooc.as_ref())?;
            write_pairs_csv(&a.out, &pairs)?;
        }
        Command::Train(a) => {
            let pairs = tastesim::pairs::read_pairs_csv(&a.pairs)?;
            let layout = (!a.channels.is_empty()).then(|| TensorLayout {
                channels: a.channels.clone(),
                length: a.length.unwrap_or(64),
            });
            let (tensors, fitted) = load_tensors(&a.source, layout, None)?;
            let first = tensors.values().next().ok_or_else(|| Error::Config("no tensors".into()))?;
            let arch = ArchitectureConfig {
                conv: a.conv.iter().map(|c| parse_conv(c)).collect::<Result<_>>()?,
                hidden: a.hidden.clone(),
                output: a.output,
                order: if a.conv_then_pool { PoolOrder::ConvThenPool } else { PoolOrder::PoolThenConv },
                output_activation: if a.relu_output { Activation::Relu } else { Activation::Identity },
            }
            .resolve(first.channels, first.length)
            .map_err(|e| Error::Config(e.to_string()))?;
            let config = TrainConfig {
                learning_rate: a.learning_rate,
                batch_size: a.batch_size,
                epochs: a.epochs,
                optimizer: parse_optimizer(&a.optimizer, a.momentum)?,
                seed: a.seed,
                patience: a.patience,
            };
            let out = simnet::train(&pairs, &tensors, &arch, &config)?;
            let mut ckpt = NetCheckpoint::new(&out, &config);
            if let Some((layout, stats)) = fitted {
                ckpt.layout = Some(layout);
                ckpt.channel_stats = Some(stats);
            }
            ckpt.save(&a.out)?;
            simnet::write_history_csv(&a.history, &out.history)?;
            println!("best epoch {}\tloss {}", out.best_epoch, out.best_loss);
        }
        Command::Predict(a) => {
            let ckpt = NetCheckpoint::load(&a.checkpoint)?;
            let (tensors, _) = load_tensors(&a.source, ckpt.layout.clone(), ckpt.channel_stats.as_ref())?;
            let get = |k: &str| tensors.get(k).ok_or_else(|| Error::UnknownSong(k.to_string()));
            println!("{}", simnet::predict(&ckpt.params, &get(&a.song_x)?.values, &get(&a.song_y)?.values)?);
        }
        Command::SynthGen(a) => {
            let spec = WorldSpec {
                themes: a.themes,
                songs_per_theme: a.songs_per_theme,
                users: a.users,
                weeks: a.weeks,
                mean_streak_len: a.mean_streak_len,
                within_gap_minutes: a.within_gap_minutes,
                between_gap_minutes: a.between_gap_minutes,
                channels: a.channels,
                length: a.length,
                sigma_within: a.sigma_within,
                sigma_between: a.sigma_between,
                seed: a.seed,
                ..WorldSpec::default()
            };
            let world = generate_world(&spec)?;
            write_world(&a.out, &world)?;
            if let Some(path) = a.config {
                let dir = a.out.canonicalize().map_err(|e| Error::io(&a.out, e))?;
                let text = PipelineConfig::for_world(&dir, &dir.join("work"), &spec).to_toml_string()?;
                std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            }
            println!("events {}\tsongs {}", world.events.len(), world.records.len());
        }
        Command::Report(a) => {
            let out = a.out.unwrap_or_else(|| a.workdir.join("report.md"));
            pipeline::write_report(&a.workdir, &out)?;
            println!("{}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
