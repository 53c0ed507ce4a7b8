//! Listening-event logs, song attribute records, cross-source song matching
//! and fixed-shape feature tensors.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::{DateTime, SecondsFormat, Timelike, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default minimum title similarity for a catalog match.
pub const DEFAULT_MATCH_THRESHOLD: f64 = 0.85;

/// One consumption record of a user.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ListeningEvent {
    pub user_id: String,
    pub timestamp: DateTime<Utc>,
    pub artist_id: Option<String>,
    pub artist_name: String,
    pub track_id: Option<String>,
    pub song_title: String,
    /// Canonical song identifier, filled in by [`resolve_events`].
    pub song_key: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MalformedPolicy {
    /// The first malformed line aborts parsing.
    Strict,
    /// Malformed lines are skipped and counted.
    #[default]
    Lenient,
}

#[derive(Debug, Clone, Default)]
pub struct ParsedEvents {
    pub events: Vec<ListeningEvent>,
    pub malformed: usize,
    /// One message per malformed line, `line N: reason`.
    pub diagnostics: Vec<String>,
}

fn parse_timestamp(raw: &str) -> Option<DateTime<Utc>> {
    let ts = DateTime::parse_from_rfc3339(raw).ok()?.with_timezone(&Utc);
    ts.with_nanosecond(0)
}

pub fn format_timestamp(ts: &DateTime<Utc>) -> String {
    ts.to_rfc3339_opts(SecondsFormat::Secs, true)
}

fn optional(field: &str) -> Option<String> {
    if field.is_empty() {
        None
    } else {
        Some(field.to_string())
    }
}

fn parse_line(line: &str) -> std::result::Result<ListeningEvent, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 6 && fields.len() != 7 {
        return Err(format!("expected 6 or 7 tab-separated fields, found {}", fields.len()));
    }
    if fields[0].is_empty() {
        return Err("empty user id".into());
    }
    let timestamp =
        parse_timestamp(fields[1]).ok_or_else(|| format!("unparseable timestamp `{}`", fields[1]))?;
    Ok(ListeningEvent {
        user_id: fields[0].to_string(),
        timestamp,
        artist_id: optional(fields[2]),
        artist_name: fields[3].to_string(),
        track_id: optional(fields[4]),
        song_title: fields[5].to_string(),
        song_key: fields.get(6).and_then(|f| optional(f)),
    })
}

/// Parses a tab-separated event stream with columns
/// `user_id, timestamp, artist_id, artist_name, track_id, track_name` and an
/// optional seventh `song_key` column. Blank lines are ignored.
pub fn parse_events<R: BufRead>(reader: R, policy: MalformedPolicy) -> Result<ParsedEvents> {
    let mut out = ParsedEvents::default();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io("<event stream>", e))?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(line) {
            Ok(ev) => out.events.push(ev),
            Err(message) => match policy {
                MalformedPolicy::Strict => return Err(Error::Parse { line: line_no, message }),
                MalformedPolicy::Lenient => {
                    out.malformed += 1;
                    out.diagnostics.push(format!("line {line_no}: {message}"));
                }
            },
        }
    }
    if out.malformed > 0 {
        log::warn!("skipped {} malformed event lines", out.malformed);
    }
    Ok(out)
}

pub fn read_events_file(path: &Path, policy: MalformedPolicy) -> Result<ParsedEvents> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_events(BufReader::new(file), policy)
}

/// Writes events in the tab-separated log format. The `song_key` column is
/// emitted only for resolved events.
pub fn write_events<W: Write>(mut writer: W, events: &[ListeningEvent]) -> std::io::Result<()> {
    for ev in events {
        write!(
            writer,
            "{}\t{}\t{}\t{}\t{}\t{}",
            ev.user_id,
            format_timestamp(&ev.timestamp),
            ev.artist_id.as_deref().unwrap_or(""),
            ev.artist_name,
            ev.track_id.as_deref().unwrap_or(""),
            ev.song_title
        )?;
        if let Some(key) = &ev.song_key {
            write!(writer, "\t{key}")?;
        }
        writeln!(writer)?;
    }
    Ok(())
}

pub fn write_events_file(path: &Path, events: &[ListeningEvent]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_events(&mut w, events)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Precomputed attributes of one catalog song.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SongAttributeRecord {
    pub song_key: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artist_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    pub features: BTreeMap<String, Vec<f64>>,
}

impl SongAttributeRecord {
    pub fn validate(&self) -> Result<()> {
        if self.features.is_empty() {
            return Err(Error::Config(format!("record `{}` has no features", self.song_key)));
        }
        for (name, values) in &self.features {
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!(
                    "feature `{name}` of `{}` has non-finite values",
                    self.song_key
                )));
            }
        }
        Ok(())
    }
}

/// Reads one JSON attribute record per line.
pub fn parse_attributes<R: BufRead>(reader: R) -> Result<Vec<SongAttributeRecord>> {
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<attribute stream>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SongAttributeRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        record.validate()?;
        records.push(record);
    }
    Ok(records)
}

pub fn read_attributes_file(path: &Path) -> Result<Vec<SongAttributeRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_attributes(BufReader::new(file))
}

pub fn write_attributes_file(path: &Path, records: &[SongAttributeRecord]) -> Result<()> {
    write_jsonl(path, records)
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Matching

/// Matching metadata of one catalog song.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CatalogEntry {
    pub song_key: String,
    pub artist_id: Option<String>,
    pub title: String,
}

impl CatalogEntry {
    /// Catalog metadata of the records that carry a title.
    pub fn from_records(records: &[SongAttributeRecord]) -> Vec<CatalogEntry> {
        records
            .iter()
            .filter_map(|r| {
                r.title.as_ref().map(|t| CatalogEntry {
                    song_key: r.song_key.clone(),
                    artist_id: r.artist_id.clone(),
                    title: t.clone(),
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub event_title: String,
    pub event_artist: String,
    #[serde(skip)]
    pub event_artist_id: Option<String>,
    pub matched_song_key: Option<String>,
    pub score: f64,
}

/// Lowercases, drops punctuation and collapses whitespace.
pub fn normalize_title(title: &str) -> String {
    let stripped: String = title
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect();
    stripped.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Edit distance over Unicode scalar values.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 - distance / max_len` on already-normalized strings; two empty strings
/// are identical.
pub fn title_similarity(a: &str, b: &str) -> f64 {
    let max_len = a.chars().count().max(b.chars().count());
    if max_len == 0 {
        return 1.0;
    }
    1.0 - levenshtein(a, b) as f64 / max_len as f64
}

/// Matches every distinct event song (artist id, artist name, title) against
/// the catalog, in order of first appearance.
///
/// An exact `(artist_id, normalized title)` hit scores 1. Otherwise titles are
/// compared by normalized Levenshtein similarity, restricted to the event's
/// artist when the catalog knows that artist id. Ties go to the smallest
/// `song_key`.
pub fn match_songs(events: &[ListeningEvent], catalog: &[CatalogEntry], threshold: f64) -> Vec<MatchResult> {
    struct Norm<'a> {
        entry: &'a CatalogEntry,
        title: String,
    }
    let normalized: Vec<Norm> = catalog
        .iter()
        .map(|entry| Norm {
            entry,
            title: normalize_title(&entry.title),
        })
        .collect();
    let mut by_artist: HashMap<&str, Vec<usize>> = HashMap::new();
    let mut exact: HashMap<(&str, &str), &str> = HashMap::new();
    for (i, n) in normalized.iter().enumerate() {
        if let Some(artist) = n.entry.artist_id.as_deref() {
            by_artist.entry(artist).or_default().push(i);
            let slot = exact.entry((artist, n.title.as_str())).or_insert(&n.entry.song_key);
            if n.entry.song_key.as_str() < *slot {
                *slot = &n.entry.song_key;
            }
        }
    }
    let all: Vec<usize> = (0..normalized.len()).collect();

    let mut seen: HashMap<(Option<&str>, &str, &str), ()> = HashMap::new();
    let mut results = Vec::new();
    for ev in events {
        let key = (ev.artist_id.as_deref(), ev.artist_name.as_str(), ev.song_title.as_str());
        if seen.insert(key, ()).is_some() {
            continue;
        }
        let title = normalize_title(&ev.song_title);
        let exact_hit = ev
            .artist_id
            .as_deref()
            .and_then(|a| exact.get(&(a, title.as_str())).copied());
        let (best_key, best_score) = if let Some(k) = exact_hit {
            (Some(k), 1.0)
        } else {
            let candidates = ev
                .artist_id
                .as_deref()
                .and_then(|a| by_artist.get(a))
                .unwrap_or(&all);
            let mut best: Option<(&str, f64)> = None;
            for &i in candidates {
                let n = &normalized[i];
                let score = title_similarity(&title, &n.title);
                let better = match best {
                    None => true,
                    Some((k, s)) => score > s || (score == s && n.entry.song_key.as_str() < k),
                };
                if better {
                    best = Some((&n.entry.song_key, score));
                }
            }
            match best {
                Some((k, s)) => (Some(k), s),
                None => (None, 0.0),
            }
        };
        let matched = best_key.filter(|_| best_score >= threshold).map(str::to_string);
        results.push(MatchResult {
            event_title: ev.song_title.clone(),
            event_artist: ev.artist_name.clone(),
            event_artist_id: ev.artist_id.clone(),
            matched_song_key: matched,
            score: best_score,
        });
    }
    results
}

/// Copies matched keys onto the events. Returns the number of events left
/// unresolved.
pub fn resolve_events(events: &mut [ListeningEvent], matches: &[MatchResult]) -> usize {
    let lookup: HashMap<(Option<&str>, &str, &str), Option<&str>> = matches
        .iter()
        .map(|m| {
            (
                (m.event_artist_id.as_deref(), m.event_artist.as_str(), m.event_title.as_str()),
                m.matched_song_key.as_deref(),
            )
        })
        .collect();
    let mut unresolved = 0;
    for ev in events.iter_mut() {
        let key = (ev.artist_id.as_deref(), ev.artist_name.as_str(), ev.song_title.as_str());
        ev.song_key = lookup.get(&key).copied().flatten().map(str::to_string);
        if ev.song_key.is_none() {
            unresolved += 1;
        }
    }
    unresolved
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventFilter {
    /// Songs with fewer total listens are removed.
    pub min_listens: usize,
    pub drop_unmatched: bool,
}

impl Default for EventFilter {
    fn default() -> Self {
        EventFilter {
            min_listens: 1,
            drop_unmatched: true,
        }
    }
}

/// Applies the listen-count and unmatched filters, preserving order.
pub fn filter_events(events: Vec<ListeningEvent>, filter: EventFilter) -> Vec<ListeningEvent> {
    let mut listens: HashMap<String, usize> = HashMap::new();
    for ev in &events {
        if let Some(k) = &ev.song_key {
            *listens.entry(k.clone()).or_default() += 1;
        }
    }
    events
        .into_iter()
        .filter(|ev| match &ev.song_key {
            Some(k) => listens[k] >= filter.min_listens,
            None => !filter.drop_unmatched,
        })
        .collect()
}

pub fn write_match_report(path: &Path, matches: &[MatchResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["event_title", "event_artist", "matched_song_key", "score"])?;
    for m in matches {
        w.write_record([
            m.event_title.as_str(),
            m.event_artist.as_str(),
            m.matched_song_key.as_deref().unwrap_or(""),
            &m.score.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Tensors

/// Which features become channels, in order, and the common channel length.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorLayout {
    pub channels: Vec<String>,
    pub length: usize,
}

/// A `channels x length` row-major matrix of one song's attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTensor {
    pub song_key: String,
    pub channels: usize,
    pub length: usize,
    pub values: Vec<f64>,
}

impl FeatureTensor {
    pub fn channel(&self, c: usize) -> &[f64] {
        &self.values[c * self.length..(c + 1) * self.length]
    }
}

/// Corpus-level per-channel mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn fit(tensors: &[FeatureTensor]) -> Result<ChannelStats> {
        let first = tensors
            .first()
            .ok_or_else(|| Error::Config("cannot fit channel statistics on zero tensors".into()))?;
        let (c, t) = (first.channels, first.length);
        let mut mean = vec![0.0; c];
        let mut std = vec![0.0; c];
        if tensors.iter().any(|x| x.channels != c || x.length != t) {
            return Err(Error::Shape("tensors disagree on shape".into()));
        }
        let n = (tensors.len() * t) as f64;
        for ch in 0..c {
            let m = tensors.iter().flat_map(|x| x.channel(ch)).sum::<f64>() / n;
            let var = tensors
                .iter()
                .flat_map(|x| x.channel(ch))
                .map(|v| (v - m) * (v - m))
                .sum::<f64>()
                / n;
            mean[ch] = m;
            std[ch] = var.sqrt();
        }
        Ok(ChannelStats { mean, std })
    }

    /// Z-scores each channel in place. Constant channels are centred only.
    pub fn apply(&self, tensor: &mut FeatureTensor) -> Result<()> {
        if tensor.channels != self.mean.len() {
            return Err(Error::Shape(format!(
                "tensor has {} channels, statistics have {}",
                tensor.channels,
                self.mean.len()
            )));
        }
        let len = tensor.length;
        for (ch, row) in tensor.values.chunks_mut(len.max(1)).enumerate().take(self.mean.len()) {
            let (m, s) = (self.mean[ch], self.std[ch]);
            for v in row {
                *v -= m;
                if s > 0.0 {
                    *v /= s;
                }
            }
        }
        Ok(())
    }
}

/// Lays the record's features out as a fixed-shape tensor.
///
/// Sequences are truncated or zero-padded at the tail; single-value features
/// are broadcast over the whole channel.
pub fn assemble_tensor(
    record: &SongAttributeRecord,
    layout: &TensorLayout,
    stats: Option<&ChannelStats>,
) -> Result<FeatureTensor> {
    let t = layout.length;
    let mut values = Vec::with_capacity(layout.channels.len() * t);
    for name in &layout.channels {
        let seq = record.features.get(name).ok_or_else(|| Error::MissingFeature {
            song_key: record.song_key.clone(),
            feature: name.clone(),
        })?;
        if seq.len() == 1 {
            values.extend(std::iter::repeat_n(seq[0], t));
        } else {
            values.extend(seq.iter().copied().take(t));
            values.extend(std::iter::repeat_n(0.0, t.saturating_sub(seq.len())));
        }
    }
    let mut tensor = FeatureTensor {
        song_key: record.song_key.clone(),
        channels: layout.channels.len(),
        length: t,
        values,
    };
    if let Some(stats) = stats {
        stats.apply(&mut tensor)?;
    }
    Ok(tensor)
}

/// Assembles all records, fits corpus statistics over them and standardizes.
pub fn assemble_corpus(
    records: &[&SongAttributeRecord],
    layout: &TensorLayout,
) -> Result<(Vec<FeatureTensor>, ChannelStats)> {
    let mut tensors = records
        .iter()
        .map(|r| assemble_tensor(r, layout, None))
        .collect::<Result<Vec<_>>>()?;
    let stats = ChannelStats::fit(&tensors)?;
    for t in &mut tensors {
        stats.apply(t)?;
    }
    Ok((tensors, stats))
}

pub fn write_tensors_file(path: &Path, tensors: &[FeatureTensor]) -> Result<()> {
    write_jsonl(path, tensors)
}

pub fn read_tensors_file(path: &Path) -> Result<Vec<FeatureTensor>> {
    read_jsonl(path)
}
