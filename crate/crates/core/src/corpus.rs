//! Weekly bag-of-songs documents.
//!
//! Every (user, ISO week) with at least one listen becomes one document whose
//! tokens are the songs played that week, with multiplicity.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use chrono::{DateTime, Datelike, NaiveDate, TimeZone, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{read_jsonl, ListeningEvent};

/// Monday 1970-01-05, the first ISO week start after the Unix epoch. Week
/// indices count whole weeks from here and are negative before it.
pub fn week_epoch() -> NaiveDate {
    NaiveDate::from_ymd_opt(1970, 1, 5).expect("valid date")
}

pub fn week_index(ts: &DateTime<Utc>) -> i64 {
    let date = ts.date_naive();
    let monday = date - chrono::Days::new(u64::from(date.weekday().num_days_from_monday()));
    (monday - week_epoch()).num_days().div_euclid(7)
}

pub fn week_start(index: i64) -> DateTime<Utc> {
    let date = week_epoch() + chrono::Duration::days(index * 7);
    Utc.from_utc_datetime(&date.and_hms_opt(0, 0, 0).expect("midnight"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusDocument {
    pub user: String,
    pub week: i64,
    pub counts: BTreeMap<String, u32>,
}

impl CorpusDocument {
    pub fn len(&self) -> u64 {
        self.counts.values().map(|&c| u64::from(c)).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn week_start(&self) -> DateTime<Utc> {
        week_start(self.week)
    }
}

/// Dense song indices, assigned in lexicographic key order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocabulary {
    keys: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_keys<I: IntoIterator<Item = String>>(keys: I) -> Vocabulary {
        let keys: Vec<String> = keys.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
        let index = keys.iter().enumerate().map(|(i, k)| (k.clone(), i)).collect();
        Vocabulary { keys, index }
    }

    pub fn from_documents(docs: &[CorpusDocument]) -> Vocabulary {
        Vocabulary::from_keys(docs.iter().flat_map(|d| d.counts.keys().cloned()))
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn index_of(&self, key: &str) -> Option<usize> {
        self.index.get(key).copied()
    }

    pub fn key(&self, index: usize) -> &str {
        &self.keys[index]
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub documents: Vec<CorpusDocument>,
    pub vocabulary: Vocabulary,
}

/// Optional inclusive-exclusive `[from, to)` restriction on event timestamps.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateRange {
    pub from: Option<DateTime<Utc>>,
    pub to: Option<DateTime<Utc>>,
}

impl DateRange {
    pub fn contains(&self, ts: &DateTime<Utc>) -> bool {
        self.from.is_none_or(|f| *ts >= f) && self.to.is_none_or(|t| *ts < t)
    }
}

/// Buckets resolved events into one document per (user, ISO week).
///
/// Documents are ordered by user id then week. Every event must carry a
/// `song_key`.
pub fn build_weekly_documents(events: &[ListeningEvent], range: DateRange) -> Result<Corpus> {
    let mut buckets: BTreeMap<(&str, i64), BTreeMap<String, u32>> = BTreeMap::new();
    for ev in events {
        if !range.contains(&ev.timestamp) {
            continue;
        }
        let key = ev.song_key.as_ref().ok_or_else(|| {
            Error::Config(format!(
                "event of user `{}` at {} has no resolved song key",
                ev.user_id, ev.timestamp
            ))
        })?;
        *buckets
            .entry((ev.user_id.as_str(), week_index(&ev.timestamp)))
            .or_default()
            .entry(key.clone())
            .or_default() += 1;
    }
    let documents: Vec<CorpusDocument> = buckets
        .into_iter()
        .map(|((user, week), counts)| CorpusDocument {
            user: user.to_string(),
            week,
            counts,
        })
        .collect();
    let vocabulary = Vocabulary::from_documents(&documents);
    Ok(Corpus { documents, vocabulary })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub documents: usize,
    pub users: usize,
    pub vocabulary: usize,
    pub tokens: u64,
    pub mean_document_length: f64,
}

pub fn corpus_stats(corpus: &Corpus) -> CorpusStats {
    let tokens: u64 = corpus.documents.iter().map(CorpusDocument::len).sum();
    let users: BTreeSet<&str> = corpus.documents.iter().map(|d| d.user.as_str()).collect();
    let documents = corpus.documents.len();
    CorpusStats {
        documents,
        users: users.len(),
        vocabulary: corpus.vocabulary.len(),
        tokens,
        mean_document_length: if documents == 0 { 0.0 } else { tokens as f64 / documents as f64 },
    }
}

pub fn write_corpus_file(path: &Path, corpus: &Corpus) -> Result<()> {
    crate::ingest::write_jsonl(path, &corpus.documents)
}

pub fn read_corpus_file(path: &Path) -> Result<Corpus> {
    let documents: Vec<CorpusDocument> = read_jsonl(path)?;
    if let Some(d) = documents.iter().find(|d| d.is_empty()) {
        return Err(Error::Config(format!("document ({}, {}) has no tokens", d.user, d.week)));
    }
    let vocabulary = Vocabulary::from_documents(&documents);
    Ok(Corpus { documents, vocabulary })
}

pub fn write_vocabulary_file(path: &Path, vocab: &Vocabulary) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(["song_key", "index"])?;
    for (i, k) in vocab.keys().iter().enumerate() {
        w.write_record([k.as_str(), &i.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_vocabulary_file(path: &Path) -> Result<Vocabulary> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows: Vec<(usize, String)> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let idx: usize = rec[1]
            .parse()
            .map_err(|_| Error::Config(format!("bad vocabulary index `{}`", &rec[1])))?;
        rows.push((idx, rec[0].to_string()));
    }
    let vocab = Vocabulary::from_keys(rows.iter().map(|(_, k)| k.clone()));
    for (idx, key) in &rows {
        if vocab.index_of(key) != Some(*idx) {
            return Err(Error::Config(format!("vocabulary file is not in canonical order at `{key}`")));
        }
    }
    Ok(vocab)
}

/// Writes a human-readable corpus summary as pretty JSON.
pub fn write_stats_file(path: &Path, stats: &CorpusStats) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, stats)?;
    w.flush().map_err(|e| Error::io(path, e))
}
