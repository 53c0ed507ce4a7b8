//! End-to-end runs: configuration, the seven persisted stages, the run
//! manifest and the report.
//!
//! Every stage reads its inputs from the workdir and writes its artifacts
//! back, so a rerun skips the stages whose artifacts are intact.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{
    build_weekly_documents, corpus_stats, read_corpus_file, write_corpus_file, write_stats_file,
    write_vocabulary_file, CorpusStats, DateRange,
};
use crate::error::{Error, Result};
use crate::ingest::{
    self, read_attributes_file, read_events_file, read_tensors_file, write_events_file, write_match_report,
    write_tensors_file, CatalogEntry, ChannelStats, EventFilter, FeatureTensor, MalformedPolicy, TensorLayout,
};
use crate::pairs::{dataset_stats, read_pairs_csv, sample_pairs, write_pairs_csv, Cooccurrence, PairConfig, Split};
use crate::simnet::{self, ArchitectureConfig, NetCheckpoint, TrainConfig};
use crate::stats;
use crate::temporal::{gap_histogram, gap_similarity_scan, n_skip_analysis, write_gap_csv, write_nskip_csv, HistogramBins};
use crate::topics::{fit_lda, Inversion, LdaConfig, TopicModel};

pub const MANIFEST_FORMAT: &str = "tastesim-manifest";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub events: PathBuf,
    pub attributes: PathBuf,
    pub workdir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            events: "events.tsv".into(),
            attributes: "attributes.jsonl".into(),
            workdir: "work".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub from: Option<DateTime<Utc>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub to: Option<DateTime<Utc>>,
    pub min_listens: usize,
    pub match_threshold: f64,
    pub malformed: MalformedPolicy,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            from: None,
            to: None,
            min_listens: 1,
            match_threshold: ingest::DEFAULT_MATCH_THRESHOLD,
            malformed: MalformedPolicy::Lenient,
        }
    }
}

impl CorpusConfig {
    pub fn range(&self) -> DateRange {
        DateRange { from: self.from, to: self.to }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Gap unit in minutes.
    pub time_scale: f64,
    pub bins: usize,
    pub max_skip: usize,
    pub inversion: Inversion,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            time_scale: 1.0,
            bins: 20,
            max_skip: 10,
            inversion: Inversion::Bayes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    pub corpus: CorpusConfig,
    pub lda: LdaConfig,
    pub pairs: PairConfig,
    pub tensors: TensorLayout,
    pub network: ArchitectureConfig,
    pub train: TrainConfig,
    pub analysis: AnalysisConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            paths: PathsConfig::default(),
            corpus: CorpusConfig::default(),
            lda: LdaConfig::default(),
            pairs: PairConfig::default(),
            tensors: TensorLayout { channels: Vec::new(), length: 0 },
            network: ArchitectureConfig::default(),
            train: TrainConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

/// Parses `section.key=value` into a path and a TOML value; values that do
/// not parse as TOML are taken as strings.
pub fn parse_override(raw: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{raw}` is not of the form key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(Error::Config(format!("override `{raw}` has an empty key")));
    }
    let value = value.trim();
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    Ok((path, parsed))
}

fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` is not a section")))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

impl PipelineConfig {
    /// Parses a TOML document, applies `section.key=value` overrides on top
    /// and validates eagerly.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<PipelineConfig> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for raw in overrides {
            let (path, value) = parse_override(raw)?;
            set_path(&mut table, &path, value)?;
        }
        let config: PipelineConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<PipelineConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_toml_str(&text, overrides)?;
        // Relative data paths are resolved against the config file.
        if let Some(base) = path.parent() {
            for p in [&mut config.paths.events, &mut config.paths.attributes, &mut config.paths.workdir] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(config)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Configuration for a world written by [`crate::synth::write_world`].
    pub fn for_world(world_dir: &Path, workdir: &Path, spec: &crate::synth::WorldSpec) -> PipelineConfig {
        PipelineConfig {
            paths: PathsConfig {
                events: world_dir.join("events.tsv"),
                attributes: world_dir.join("attributes.jsonl"),
                workdir: workdir.to_path_buf(),
            },
            lda: LdaConfig {
                k: spec.themes.max(2),
                alpha: Some(0.1),
                iterations: 400,
                burn_in: 200,
                seed: spec.seed,
                ..LdaConfig::default()
            },
            pairs: PairConfig {
                count: 2000,
                seed: spec.seed,
                ..PairConfig::default()
            },
            tensors: spec.layout(),
            network: ArchitectureConfig::desk(),
            train: TrainConfig {
                learning_rate: 1e-3,
                epochs: 200,
                optimizer: simnet::Optimizer::adam(),
                seed: spec.seed,
                ..TrainConfig::default()
            },
            ..PipelineConfig::default()
        }
    }

    /// Checks every downstream numeric constraint without touching any file.
    pub fn validate(&self) -> Result<()> {
        self.lda.validate()?;
        if self.lda.thin == 0 {
            return Err(Error::Config("lda.thin must be positive".into()));
        }
        self.pairs.validate()?;
        self.train.validate()?;
        if self.tensors.channels.is_empty() || self.tensors.length == 0 {
            return Err(Error::Config("tensors.channels and tensors.length must be set".into()));
        }
        self.network
            .resolve(self.tensors.channels.len(), self.tensors.length)
            .map_err(|e| Error::Config(format!("network does not fit the tensor layout: {e}")))?;
        if !(self.corpus.match_threshold > 0.0 && self.corpus.match_threshold <= 1.0) {
            return Err(Error::Config("corpus.match_threshold must lie in (0, 1]".into()));
        }
        if let (Some(from), Some(to)) = (self.corpus.from, self.corpus.to) {
            if from >= to {
                return Err(Error::Config("corpus window is empty".into()));
            }
        }
        if !(self.analysis.time_scale > 0.0 && self.analysis.time_scale.is_finite()) || self.analysis.bins == 0 {
            return Err(Error::Config("analysis.time_scale and analysis.bins must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON of everything except the paths.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = value.as_object_mut() {
            obj.remove("paths");
        }
        sha256_hex(value.to_string().as_bytes())
    }

    pub fn seeds(&self) -> BTreeMap<String, u64> {
        BTreeMap::from([
            ("lda".to_string(), self.lda.seed),
            ("pairs".to_string(), self.pairs.seed),
            ("train".to_string(), self.train.seed),
        ])
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

// ---------------------------------------------------------------------------
// Stages

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ingest,
    Corpus,
    Lda,
    Pairs,
    Tensors,
    Train,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Ingest,
        Stage::Corpus,
        Stage::Lda,
        Stage::Pairs,
        Stage::Tensors,
        Stage::Train,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Corpus => "corpus",
            Stage::Lda => "lda",
            Stage::Pairs => "pairs",
            Stage::Tensors => "tensors",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
        }
    }

    /// Files written under the workdir.
    pub fn artifacts(self) -> &'static [&'static str] {
        match self {
            Stage::Ingest => &["events.resolved.tsv", "matches.csv"],
            Stage::Corpus => &["corpus.jsonl", "vocab.csv", "corpus_stats.json"],
            Stage::Lda => &["model.lda", "phi.csv"],
            Stage::Pairs => &["pairs.csv"],
            Stage::Tensors => &["tensors.jsonl", "channel_stats.json"],
            Stage::Train => &["net.ckpt", "loss_history.csv"],
            Stage::Evaluate => &["evaluation.json", "gap_sim.csv", "nskip.csv"],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub status: StageStatus,
    pub config_hash: String,
    /// Artifact file name to SHA-256.
    pub artifacts: BTreeMap<String, String>,
    pub metrics: BTreeMap<String, serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    /// Input file name to SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub stages: Vec<StageRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_stage: Option<Stage>,
}

impl Manifest {
    fn new(config: &PipelineConfig, inputs: BTreeMap<String, String>) -> Manifest {
        Manifest {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            config_hash: config.hash(),
            config: serde_json::to_value(config).expect("config serializes"),
            seeds: config.seeds(),
            inputs,
            stages: Vec::new(),
            failed_stage: None,
        }
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn stage(&self, stage: Stage) -> Option<&StageRecord> {
        self.stages.iter().find(|r| r.stage == stage)
    }

    /// `stage/file` to SHA-256 over every completed stage.
    pub fn artifact_hashes(&self) -> BTreeMap<String, String> {
        self.stages
            .iter()
            .filter(|r| r.status == StageStatus::Completed)
            .flat_map(|r| r.artifacts.iter().map(move |(f, h)| (format!("{}/{f}", r.stage.name()), h.clone())))
            .collect()
    }

    fn record(&mut self, rec: StageRecord) {
        self.stages.retain(|r| r.stage != rec.stage);
        self.stages.push(rec);
        self.stages.sort_by_key(|r| r.stage as u8);
    }
}

/// Exclusive hold on a workdir, released on drop.
struct WorkdirLock {
    path: PathBuf,
}

impl WorkdirLock {
    fn acquire(workdir: &Path) -> Result<WorkdirLock> {
        let path = workdir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(WorkdirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Pipeline(format!(
                "workdir {} is locked by another run (remove {} if it is stale)",
                workdir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for WorkdirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

type Metrics = BTreeMap<String, serde_json::Value>;

fn metric<T: Serialize>(m: &mut Metrics, key: &str, value: T) {
    m.insert(key.to_string(), serde_json::to_value(value).expect("metric serializes"));
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub events: usize,
    pub malformed: usize,
    pub unresolved: usize,
    pub kept: usize,
}

/// Parses events, matches the ones without a song key against the attribute
/// catalog, filters and writes the resolved stream plus the match report.
pub fn ingest_files(
    events_path: &Path,
    attributes_path: &Path,
    config: &CorpusConfig,
    out_events: &Path,
    out_matches: &Path,
) -> Result<IngestSummary> {
    let parsed = read_events_file(events_path, config.malformed)?;
    for d in &parsed.diagnostics {
        log::warn!("{}: {d}", events_path.display());
    }
    let records = read_attributes_file(attributes_path)?;
    let catalog = CatalogEntry::from_records(&records);
    let mut events = parsed.events;
    let (mut keyed, mut unkeyed): (Vec<_>, Vec<_>) = events.drain(..).enumerate().partition(|(_, e)| e.song_key.is_some());
    let pending: Vec<_> = unkeyed.iter().map(|(_, e)| e.clone()).collect();
    let matches = ingest::match_songs(&pending, &catalog, config.match_threshold);
    let mut resolved = pending;
    let unresolved = ingest::resolve_events(&mut resolved, &matches);
    for ((_, slot), ev) in unkeyed.iter_mut().zip(resolved) {
        *slot = ev;
    }
    keyed.append(&mut unkeyed);
    keyed.sort_by_key(|(i, _)| *i);
    let events: Vec<_> = keyed.into_iter().map(|(_, e)| e).collect();
    let total = events.len();
    let kept = ingest::filter_events(
        events,
        EventFilter {
            min_listens: config.min_listens,
            drop_unmatched: true,
        },
    );
    write_events_file(out_events, &kept)?;
    write_match_report(out_matches, &matches)?;
    Ok(IngestSummary {
        events: total,
        malformed: parsed.malformed,
        unresolved,
        kept: kept.len(),
    })
}

pub fn corpus_files(events_path: &Path, range: DateRange, out_dir: &Path) -> Result<CorpusStats> {
    let events = read_events_file(events_path, MalformedPolicy::Strict)?.events;
    let corpus = build_weekly_documents(&events, range)?;
    let stats = corpus_stats(&corpus);
    write_corpus_file(&out_dir.join("corpus.jsonl"), &corpus)?;
    write_vocabulary_file(&out_dir.join("vocab.csv"), &corpus.vocabulary)?;
    write_stats_file(&out_dir.join("corpus_stats.json"), &stats)?;
    Ok(stats)
}

/// Loads tensors into a map keyed by song.
pub fn tensor_map(path: &Path) -> Result<HashMap<String, FeatureTensor>> {
    Ok(read_tensors_file(path)?.into_iter().map(|t| (t.song_key.clone(), t)).collect())
}

/// Assembles standardized tensors for the given songs.
pub fn tensor_files(
    attributes_path: &Path,
    songs: &[String],
    layout: &TensorLayout,
    out_tensors: &Path,
    out_stats: &Path,
) -> Result<ChannelStats> {
    let records = read_attributes_file(attributes_path)?;
    let by_key: HashMap<&str, &ingest::SongAttributeRecord> = records.iter().map(|r| (r.song_key.as_str(), r)).collect();
    let selected = songs
        .iter()
        .map(|k| by_key.get(k.as_str()).copied().ok_or_else(|| Error::UnknownSong(k.clone())))
        .collect::<Result<Vec<_>>>()?;
    let (tensors, stats) = ingest::assemble_corpus(&selected, layout)?;
    write_tensors_file(out_tensors, &tensors)?;
    write_json(out_stats, &stats)?;
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub train_mse: Option<f64>,
    pub validation_mse: Option<f64>,
    pub test_mse: Option<f64>,
    pub gap_pairs: usize,
    pub gap_spearman: Option<f64>,
    pub nskip_means: Vec<Option<f64>>,
    pub nskip_kendall_tau: Option<f64>,
}

struct Runner<'a> {
    config: &'a PipelineConfig,
    dir: &'a Path,
}

impl Runner<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn model(&self) -> Result<TopicModel> {
        TopicModel::load(&self.path("model.lda"))
    }

    fn run(&self, stage: Stage) -> Result<Metrics> {
        let c = self.config;
        let mut m = Metrics::new();
        match stage {
            Stage::Ingest => {
                let s = ingest_files(
                    &c.paths.events,
                    &c.paths.attributes,
                    &c.corpus,
                    &self.path("events.resolved.tsv"),
                    &self.path("matches.csv"),
                )?;
                if s.kept == 0 {
                    return Err(Error::Pipeline("no events survived matching and filtering".into()));
                }
                metric(&mut m, "events", s.events);
                metric(&mut m, "malformed", s.malformed);
                metric(&mut m, "unresolved", s.unresolved);
                metric(&mut m, "kept", s.kept);
            }
            Stage::Corpus => {
                let s = corpus_files(&self.path("events.resolved.tsv"), c.corpus.range(), self.dir)?;
                metric(&mut m, "documents", s.documents);
                metric(&mut m, "users", s.users);
                metric(&mut m, "vocabulary", s.vocabulary);
                metric(&mut m, "tokens", s.tokens);
            }
            Stage::Lda => {
                let corpus = read_corpus_file(&self.path("corpus.jsonl"))?;
                let model = fit_lda(&corpus, &c.lda)?;
                model.save(&self.path("model.lda"))?;
                model.write_phi_csv(&self.path("phi.csv"))?;
                metric(&mut m, "samples", model.samples);
                if let Some((sweep, ll)) = model.log_likelihood.last() {
                    metric(&mut m, "final_sweep", sweep);
                    metric(&mut m, "log_likelihood", ll);
                }
            }
            Stage::Pairs => {
                let corpus = read_corpus_file(&self.path("corpus.jsonl"))?;
                let table = self.model()?.song_table(c.analysis.inversion);
                let cooc = (c.pairs.strategy == crate::pairs::Strategy::CooccurrenceWeighted)
                    .then(|| Cooccurrence::from_corpus(&corpus));
                let pairs = sample_pairs(&corpus.vocabulary, &table, &c.pairs, cooc.as_ref())?;
                write_pairs_csv(&self.path("pairs.csv"), &pairs)?;
                let s = dataset_stats(&pairs, c.pairs.label_bins);
                metric(&mut m, "pairs", pairs.len());
                metric(&mut m, "train", s.train);
                metric(&mut m, "validation", s.validation);
                metric(&mut m, "test", s.test);
                metric(&mut m, "label_histogram", s.label_histogram);
            }
            Stage::Tensors => {
                let corpus = read_corpus_file(&self.path("corpus.jsonl"))?;
                tensor_files(
                    &c.paths.attributes,
                    corpus.vocabulary.keys(),
                    &c.tensors,
                    &self.path("tensors.jsonl"),
                    &self.path("channel_stats.json"),
                )?;
                metric(&mut m, "songs", corpus.vocabulary.len());
            }
            Stage::Train => {
                let pairs = read_pairs_csv(&self.path("pairs.csv"))?;
                let tensors = tensor_map(&self.path("tensors.jsonl"))?;
                let arch = c.network.resolve(c.tensors.channels.len(), c.tensors.length)?;
                let out = simnet::train(&pairs, &tensors, &arch, &c.train)?;
                let mut ckpt = NetCheckpoint::new(&out, &c.train);
                ckpt.layout = Some(c.tensors.clone());
                ckpt.channel_stats = Some(read_json(&self.path("channel_stats.json"))?);
                ckpt.save(&self.path("net.ckpt"))?;
                simnet::write_history_csv(&self.path("loss_history.csv"), &out.history)?;
                let last = out.history.last().expect("history has the initial row");
                metric(&mut m, "parameters", arch.parameter_count());
                metric(&mut m, "epochs", last.epoch);
                metric(&mut m, "best_epoch", out.best_epoch);
                metric(&mut m, "best_loss", out.best_loss);
                metric(&mut m, "final_train_mse", last.train_mse);
                metric(&mut m, "final_validation_mse", last.validation_mse);
            }
            Stage::Evaluate => {
                let ev = self.evaluate()?;
                metric(&mut m, "test_mse", ev.test_mse);
                metric(&mut m, "validation_mse", ev.validation_mse);
                metric(&mut m, "gap_spearman", ev.gap_spearman);
                metric(&mut m, "nskip_kendall_tau", ev.nskip_kendall_tau);
            }
        }
        Ok(m)
    }

    fn evaluate(&self) -> Result<Evaluation> {
        let c = self.config;
        let pairs = read_pairs_csv(&self.path("pairs.csv"))?;
        let tensors = tensor_map(&self.path("tensors.jsonl"))?;
        let params = NetCheckpoint::load(&self.path("net.ckpt"))?.params;
        let mse = |split| simnet::evaluate(&params, &pairs, &tensors, split);
        let table = self.model()?.song_table(c.analysis.inversion);
        let events = read_events_file(&self.path("events.resolved.tsv"), MalformedPolicy::Strict)?.events;
        let events: Vec<_> = events.into_iter().filter(|e| c.corpus.range().contains(&e.timestamp)).collect();

        let scan = gap_similarity_scan(&events, &table, c.analysis.time_scale)?;
        let bins = if scan.observations.is_empty() {
            Vec::new()
        } else {
            gap_histogram(&scan.observations, HistogramBins { count: c.analysis.bins, range: None })?
        };
        write_gap_csv(&self.path("gap_sim.csv"), &bins)?;
        let dt: Vec<f64> = scan.observations.iter().map(|o| o.delta_t).collect();
        let sim: Vec<f64> = scan.observations.iter().map(|o| o.sim).collect();

        let levels = n_skip_analysis(&events, &table, c.analysis.max_skip)?;
        write_nskip_csv(&self.path("nskip.csv"), &levels)?;
        let means: Vec<Option<f64>> = levels.iter().map(|l| l.mean).collect();
        let (ns, ms): (Vec<f64>, Vec<f64>) = means
            .iter()
            .enumerate()
            .filter_map(|(n, m)| m.map(|m| (n as f64, m)))
            .unzip();

        let ev = Evaluation {
            train_mse: mse(Split::Train)?,
            validation_mse: mse(Split::Validation)?,
            test_mse: mse(Split::Test)?,
            gap_pairs: scan.observations.len(),
            gap_spearman: stats::spearman(&dt, &sim),
            nskip_means: means,
            nskip_kendall_tau: stats::kendall_tau(&ns, &ms),
        };
        write_json(&self.path("evaluation.json"), &ev)?;
        Ok(ev)
    }
}

/// Options for [`run_pipeline_with`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Discard the workdir's manifest and rerun every stage.
    pub fresh: bool,
}

pub fn run_pipeline(config: &PipelineConfig) -> Result<Manifest> {
    run_pipeline_with(config, RunOptions::default())
}

/// Runs the seven stages in order, skipping the ones completed by an earlier
/// run with the same configuration whose artifacts are unchanged.
pub fn run_pipeline_with(config: &PipelineConfig, options: RunOptions) -> Result<Manifest> {
    config.validate()?;
    for (what, p) in [("events", &config.paths.events), ("attributes", &config.paths.attributes)] {
        if !p.is_file() {
            return Err(Error::Config(format!("{what} file {} does not exist", p.display())));
        }
    }
    let dir = &config.paths.workdir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let _lock = WorkdirLock::acquire(dir)?;

    let inputs = BTreeMap::from([
        ("attributes".to_string(), file_sha256(&config.paths.attributes)?),
        ("events".to_string(), file_sha256(&config.paths.events)?),
    ]);
    let manifest_path = dir.join("manifest.json");
    let mut manifest = Manifest::new(config, inputs);
    if manifest_path.exists() && !options.fresh {
        let previous = Manifest::load(&manifest_path)?;
        if previous.config_hash != manifest.config_hash || previous.inputs != manifest.inputs {
            return Err(Error::Pipeline(format!(
                "workdir {} holds a run with config hash {} but this configuration hashes to {}; \
                 use a fresh workdir or rerun from scratch",
                dir.display(),
                previous.config_hash,
                manifest.config_hash
            )));
        }
        manifest.stages = previous.stages;
    }

    let runner = Runner { config, dir };
    let mut upstream_fresh = true;
    for stage in Stage::ALL {
        if upstream_fresh {
            if let Some(rec) = manifest.stage(stage) {
                if rec.status == StageStatus::Completed && artifacts_intact(dir, rec) {
                    log::info!("stage {}: up to date", stage.name());
                    continue;
                }
            }
        }
        upstream_fresh = false;
        log::info!("stage {}: running", stage.name());
        match runner.run(stage) {
            Ok(metrics) => {
                let mut artifacts = BTreeMap::new();
                for name in stage.artifacts() {
                    artifacts.insert(name.to_string(), file_sha256(&dir.join(name))?);
                }
                manifest.record(StageRecord {
                    stage,
                    status: StageStatus::Completed,
                    config_hash: manifest.config_hash.clone(),
                    artifacts,
                    metrics,
                    error: None,
                });
                manifest.failed_stage = None;
                manifest.save(&manifest_path)?;
            }
            Err(e) => {
                manifest.stages.retain(|r| (r.stage as u8) < (stage as u8));
                manifest.record(StageRecord {
                    stage,
                    status: StageStatus::Failed,
                    config_hash: manifest.config_hash.clone(),
                    artifacts: BTreeMap::new(),
                    metrics: Metrics::new(),
                    error: Some(e.to_string()),
                });
                manifest.failed_stage = Some(stage);
                manifest.save(&manifest_path)?;
                return Err(Error::Pipeline(format!("stage {} failed: {e}", stage.name())));
            }
        }
    }
    Ok(manifest)
}

fn artifacts_intact(dir: &Path, rec: &StageRecord) -> bool {
    rec.artifacts
        .iter()
        .all(|(name, hash)| file_sha256(&dir.join(name)).is_ok_and(|h| &h == hash))
}

// ---------------------------------------------------------------------------
// Report

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) if x != 0.0 && x.abs() < 1e-3 => format!("{x:.3e}"),
        Some(x) => format!("{x:.4}"),
        None => "-".into(),
    }
}

fn csv_rows(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()))
        .collect::<std::result::Result<Vec<Vec<String>>, _>>()?;
    Ok((header, rows))
}

fn markdown_table(out: &mut String, header: &[String], rows: &[Vec<String>]) {
    out.push_str(&format!("| {} |\n", header.join(" | ")));
    out.push_str(&format!("|{}\n", "---|".repeat(header.len())));
    for row in rows {
        out.push_str(&format!("| {} |\n", row.join(" | ")));
    }
    out.push('\n');
}

/// Markdown summary of the artifacts already present in `workdir`. Missing
/// artifacts are noted, never recomputed.
pub fn build_report(workdir: &Path) -> Result<String> {
    let mut out = String::from("# Run report\n\n");
    let manifest_path = workdir.join("manifest.json");
    if manifest_path.exists() {
        let m = Manifest::load(&manifest_path)?;
        out.push_str(&format!("Config hash `{}`.\n\n", m.config_hash));
        let rows: Vec<Vec<String>> = m
            .stages
            .iter()
            .map(|r| {
                vec![
                    r.stage.name().to_string(),
                    format!("{:?}", r.status).to_lowercase(),
                    r.metrics.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(", "),
                ]
            })
            .collect();
        markdown_table(&mut out, &["stage".into(), "status".into(), "metrics".into()], &rows);
    } else {
        out.push_str("No manifest found.\n\n");
    }

    let eval_path = workdir.join("evaluation.json");
    if eval_path.exists() {
        let ev: Evaluation = read_json(&eval_path)?;
        out.push_str("## Evaluation\n\n");
        out.push_str(&format!(
            "Network MSE: train {}, validation {}, test {}.\n\n",
            fmt_opt(ev.train_mse),
            fmt_opt(ev.validation_mse),
            fmt_opt(ev.test_mse)
        ));
        out.push_str(&format!(
            "Gap-time vs taste similarity over {} consecutive pairs: Spearman {}.\n\n",
            ev.gap_pairs,
            fmt_opt(ev.gap_spearman)
        ));
        out.push_str(&format!("Skip-level trend: Kendall tau {}.\n\n", fmt_opt(ev.nskip_kendall_tau)));
    }

    for (file, title) in [
        ("gap_sim.csv", "Mean taste similarity by log gap time"),
        ("nskip.csv", "Taste similarity by skip level"),
        ("loss_history.csv", "Loss curves"),
    ] {
        let path = workdir.join(file);
        out.push_str(&format!("## {title}\n\n"));
        if path.exists() {
            let (header, mut rows) = csv_rows(&path)?;
            if file == "loss_history.csv" && rows.len() > 25 {
                let step = rows.len().div_ceil(20);
                let last = rows.len() - 1;
                rows = rows.into_iter().enumerate().filter(|(i, _)| i % step == 0 || *i == last).map(|(_, r)| r).collect();
            }
            markdown_table(&mut out, &header, &rows);
        } else {
            out.push_str(&format!("`{file}` not found.\n\n"));
        }
    }

    let pairs_path = workdir.join("pairs.csv");
    if pairs_path.exists() {
        let pairs = read_pairs_csv(&pairs_path)?;
        let s = dataset_stats(&pairs, 10);
        out.push_str("## Pair labels\n\n");
        let rows: Vec<Vec<String>> = s
            .label_histogram
            .iter()
            .enumerate()
            .map(|(i, c)| vec![format!("[{:.1}, {:.1})", i as f64 / 10.0, (i + 1) as f64 / 10.0), c.to_string()])
            .collect();
        markdown_table(&mut out, &["label".into(), "pairs".into()], &rows);
        out.push_str(&format!("Splits: train {}, validation {}, test {}.\n", s.train, s.validation, s.test));
    }
    Ok(out)
}

pub fn write_report(workdir: &Path, out: &Path) -> Result<()> {
    let text = build_report(workdir)?;
    fs::write(out, text).map_err(|e| Error::io(out, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_world, write_world, WorldSpec};

    fn tiny(root: &Path) -> PipelineConfig {
        let spec = WorldSpec { users: 6, weeks: 3, songs_per_theme: 6, themes: 3, length: 32, seed: 4, ..WorldSpec::default() };
        write_world(&root.join("world"), &generate_world(&spec).unwrap()).unwrap();
        let mut cfg = PipelineConfig::for_world(&root.join("world"), &root.join("work"), &spec);
        cfg.lda.iterations = 20;
        cfg.lda.burn_in = 10;
        cfg.pairs.count = 60;
        cfg.train.epochs = 2;
        cfg.analysis.max_skip = 3;
        cfg.network.hidden = vec![8];
        cfg
    }

    #[test]
    fn toml_round_trip_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(PipelineConfig::from_toml_str(&text, &[]).unwrap(), cfg);
        let changed = PipelineConfig::from_toml_str(&text, &["lda.k=7".into(), "pairs.strategy=uniform-random".into()]).unwrap();
        assert_eq!(changed.lda.k, 7);
        assert_eq!(changed.pairs.strategy, crate::pairs::Strategy::UniformRandom);
        assert_ne!(changed.hash(), cfg.hash());
    }

    #[test]
    fn k_one_fails_before_any_stage() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let text = cfg.to_toml_string().unwrap();
        let err = PipelineConfig::from_toml_str(&text, &["lda.k=1".into()]).unwrap_err();
        assert!(err.is_usage());
        let mut bad = cfg.clone();
        bad.lda.k = 1;
        assert!(run_pipeline(&bad).unwrap_err().is_usage());
        assert!(!cfg.paths.workdir.exists());
    }

    #[test]
    fn hash_ignores_paths() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let mut moved = cfg.clone();
        moved.paths.workdir = "elsewhere".into();
        assert_eq!(cfg.hash(), moved.hash());
    }

    #[test]
    fn full_run_resume_and_refusal() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let m1 = run_pipeline(&cfg).unwrap();
        assert_eq!(m1.stages.len(), 7);
        for stage in Stage::ALL {
            for f in stage.artifacts() {
                assert!(cfg.paths.workdir.join(f).is_file(), "{f}");
            }
        }
        assert!(!cfg.paths.workdir.join(".lock").exists());
        // Resume with everything intact reruns nothing and reproduces the manifest.
        let m2 = run_pipeline(&cfg).unwrap();
        assert_eq!(m1, m2);
        // A damaged artifact reruns its stage and everything after it.
        fs::write(cfg.paths.workdir.join("pairs.csv"), "song_x,song_y,label,split\n").unwrap();
        let m3 = run_pipeline(&cfg).unwrap();
        assert_eq!(m3.artifact_hashes(), m1.artifact_hashes());
        // A different config is refused in the same workdir.
        let mut other = cfg.clone();
        other.train.epochs = 3;
        assert!(matches!(run_pipeline(&other), Err(Error::Pipeline(_))));
        assert!(run_pipeline_with(&other, RunOptions { fresh: true }).is_ok());

        let report = build_report(&cfg.paths.workdir).unwrap();
        assert!(report.contains("Loss curves"));
        assert!(report.contains("| n | pairs | mean"));
    }

    #[test]
    fn failed_stage_is_recorded() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        cfg.tensors.channels.push("no_such_feature".into());
        assert!(run_pipeline(&cfg).is_err());
        let m = Manifest::load(&cfg.paths.workdir.join("manifest.json")).unwrap();
        assert_eq!(m.failed_stage, Some(Stage::Tensors));
        assert!(cfg.paths.workdir.join("pairs.csv").is_file());
        assert_eq!(m.stage(Stage::Pairs).unwrap().status, StageStatus::Completed);
    }

    #[test]
    fn locked_workdir_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        fs::create_dir_all(&cfg.paths.workdir).unwrap();
        fs::write(cfg.paths.workdir.join(".lock"), "1").unwrap();
        assert!(matches!(run_pipeline(&cfg), Err(Error::Pipeline(_))));
    }
}
