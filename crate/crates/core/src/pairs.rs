//! Labelled song-pair datasets.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Vocabulary};
use crate::error::{Error, Result};
use crate::topics::SongTable;

/// Above this many candidate pairs the pool is sampled instead of enumerated.
const MAX_ENUMERATED_PAIRS: u64 = 2_000_000;
/// Pool size relative to the requested count when sampling candidates.
const POOL_FACTOR: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSample {
    pub song_x: String,
    pub song_y: String,
    pub label: f64,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    UniformRandom,
    CooccurrenceWeighted,
    #[default]
    StratifiedByLabel,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform-random" => Ok(Strategy::UniformRandom),
            "co-occurrence-weighted" | "cooccurrence-weighted" => Ok(Strategy::CooccurrenceWeighted),
            "stratified-by-label" => Ok(Strategy::StratifiedByLabel),
            other => Err(Error::Config(format!("unknown pair strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairConfig {
    pub count: usize,
    pub strategy: Strategy,
    pub seed: u64,
    /// train, validation, test
    pub splits: [f64; 3],
    /// Equal-width label bins used by the stratified strategy.
    pub label_bins: usize,
}

impl Default for PairConfig {
    fn default() -> Self {
        PairConfig {
            count: 10_000,
            strategy: Strategy::StratifiedByLabel,
            seed: 0,
            splits: [0.8, 0.1, 0.1],
            label_bins: 10,
        }
    }
}

impl PairConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("pair count must be at least 1".into()));
        }
        if self.splits.iter().any(|f| f.is_nan() || *f < 0.0) || (self.splits.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions {:?} must be non-negative and sum to 1", self.splits)));
        }
        if self.label_bins == 0 {
            return Err(Error::Config("label_bins must be at least 1".into()));
        }
        Ok(())
    }
}

/// Number of documents in which each unordered song pair appears together.
#[derive(Debug, Clone, Default)]
pub struct Cooccurrence {
    counts: HashMap<(usize, usize), u32>,
}

impl Cooccurrence {
    pub fn from_corpus(corpus: &Corpus) -> Cooccurrence {
        let mut counts = HashMap::new();
        for doc in &corpus.documents {
            let ids: Vec<usize> = doc
                .counts
                .keys()
                .filter_map(|k| corpus.vocabulary.index_of(k))
                .collect();
            for (i, &a) in ids.iter().enumerate() {
                for &b in &ids[i + 1..] {
                    *counts.entry((a.min(b), a.max(b))).or_insert(0) += 1;
                }
            }
        }
        Cooccurrence { counts }
    }

    pub fn get(&self, a: usize, b: usize) -> u32 {
        self.counts.get(&(a.min(b), a.max(b))).copied().unwrap_or(0)
    }
}

/// Split sizes by the largest-remainder method; ties favour earlier splits.
pub fn split_sizes(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes: [usize; 3] = [0; 3];
    for (s, q) in sizes.iter_mut().zip(&quotas) {
        *s = q.floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut left = n.saturating_sub(sizes.iter().sum());
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    sizes
}

fn label_bin(label: f64, bins: usize) -> usize {
    ((label * bins as f64).floor().max(0.0) as usize).min(bins - 1)
}

fn candidate_pool(v: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let total = (v as u64) * (v as u64 - 1) / 2;
    if total <= MAX_ENUMERATED_PAIRS {
        let mut out = Vec::with_capacity(total as usize);
        for i in 0..v {
            for j in i + 1..v {
                out.push((i, j));
            }
        }
        return out;
    }
    let target = (count.saturating_mul(POOL_FACTOR) as u64).min(total) as usize;
    let mut seen = HashSet::with_capacity(target);
    let mut out = Vec::with_capacity(target);
    while out.len() < target {
        let a = rng.random_range(0..v);
        let b = rng.random_range(0..v);
        if a != b && seen.insert((a.min(b), a.max(b))) {
            out.push((a.min(b), a.max(b)));
        }
    }
    out
}

/// Draws `config.count` distinct unordered pairs (all of them when fewer
/// exist), labels each with its taste similarity and assigns splits by a
/// seeded shuffle.
///
/// Pairs are stored with `song_x < song_y`. The co-occurrence strategy needs
/// `cooccurrence`.
pub fn sample_pairs(
    vocabulary: &Vocabulary,
    table: &SongTable,
    config: &PairConfig,
    cooccurrence: Option<&Cooccurrence>,
) -> Result<Vec<PairSample>> {
    config.validate()?;
    let v = vocabulary.len();
    if v < 2 {
        return Err(Error::Config(format!("need at least 2 songs to form pairs, have {v}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let pool = candidate_pool(v, config.count, &mut rng);
    let total_pairs = (v as u64) * (v as u64 - 1) / 2;
    if config.count as u64 > total_pairs {
        log::warn!(
            "requested {} pairs but only {} exist; returning all of them",
            config.count,
            total_pairs
        );
    }
    let label_of = |(a, b): (usize, usize)| table.similarity(vocabulary.key(a), vocabulary.key(b));

    let mut chosen: Vec<((usize, usize), f64)> = match config.strategy {
        Strategy::UniformRandom => {
            let mut pool = pool;
            pool.shuffle(&mut rng);
            pool.truncate(config.count);
            pool.into_iter().map(|p| label_of(p).map(|l| (p, l))).collect::<Result<_>>()?
        }
        Strategy::StratifiedByLabel => {
            let bins = config.label_bins;
            let mut by_bin: Vec<Vec<((usize, usize), f64)>> = vec![Vec::new(); bins];
            for p in pool {
                let l = label_of(p)?;
                by_bin[label_bin(l, bins)].push((p, l));
            }
            for b in &mut by_bin {
                b.shuffle(&mut rng);
            }
            // Round-robin over bins keeps per-bin counts within one of each
            // other until a bin runs dry.
            let mut out = Vec::with_capacity(config.count);
            let mut cursor = vec![0usize; bins];
            while out.len() < config.count {
                let mut progressed = false;
                for b in 0..bins {
                    if out.len() == config.count {
                        break;
                    }
                    if let Some(item) = by_bin[b].get(cursor[b]) {
                        out.push(*item);
                        cursor[b] += 1;
                        progressed = true;
                    }
                }
                if !progressed {
                    break;
                }
            }
            out
        }
        Strategy::CooccurrenceWeighted => {
            let co = cooccurrence.ok_or_else(|| {
                Error::Config("co-occurrence-weighted sampling needs co-occurrence counts".into())
            })?;
            // Efraimidis-Spirakis keys; zero-weight pairs only fill the remainder.
            let mut keyed: Vec<(f64, (usize, usize))> = pool
                .into_iter()
                .map(|p| {
                    let w = f64::from(co.get(p.0, p.1));
                    let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
                    let key = if w > 0.0 { u.ln() / w } else { f64::NEG_INFINITY };
                    (key, p)
                })
                .collect();
            let mut zero: Vec<(usize, usize)> = keyed.iter().filter(|(k, _)| k.is_infinite()).map(|(_, p)| *p).collect();
            keyed.retain(|(k, _)| k.is_finite());
            keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut picked: Vec<(usize, usize)> = keyed.into_iter().map(|(_, p)| p).take(config.count).collect();
            if picked.len() < config.count {
                zero.shuffle(&mut rng);
                picked.extend(zero.into_iter().take(config.count - picked.len()));
            }
            picked.into_iter().map(|p| label_of(p).map(|l| (p, l))).collect::<Result<_>>()?
        }
    };

    chosen.shuffle(&mut rng);
    let [n_train, n_val, _] = split_sizes(chosen.len(), config.splits);
    Ok(chosen
        .into_iter()
        .enumerate()
        .map(|(i, ((a, b), label))| PairSample {
            song_x: vocabulary.key(a).to_string(),
            song_y: vocabulary.key(b).to_string(),
            label,
            split: if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Validation
            } else {
                Split::Test
            },
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub label_histogram: Vec<usize>,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

pub fn dataset_stats(pairs: &[PairSample], bins: usize) -> DatasetStats {
    let bins = bins.max(1);
    let mut hist = vec![0; bins];
    let mut stats = DatasetStats {
        label_histogram: Vec::new(),
        train: 0,
        validation: 0,
        test: 0,
    };
    for p in pairs {
        hist[label_bin(p.label, bins)] += 1;
        match p.split {
            Split::Train => stats.train += 1,
            Split::Validation => stats.validation += 1,
            Split::Test => stats.test += 1,
        }
    }
    stats.label_histogram = hist;
    stats
}

pub fn write_pairs_csv(path: &Path, pairs: &[PairSample]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["song_x", "song_y", "label", "split"])?;
    for p in pairs {
        w.write_record([p.song_x.as_str(), p.song_y.as_str(), &p.label.to_string(), p.split.as_str()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_pairs_csv(path: &Path) -> Result<Vec<PairSample>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| Error::Parse {
            line: i + 2,
            message: format!("bad {what}"),
        };
        if rec.len() != 4 {
            return Err(bad("column count"));
        }
        out.push(PairSample {
            song_x: rec[0].to_string(),
            song_y: rec[1].to_string(),
            label: rec[2].parse().map_err(|_| bad("label"))?,
            split: rec[3].parse().map_err(|_| bad("split"))?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topics::{Inversion, TopicModel, MODEL_FORMAT, MODEL_VERSION};

    /// Model whose songs' theme mixtures sweep a range so labels cover [0, 1].
    fn spread_model(v: usize) -> TopicModel {
        let k = 3;
        let mut phi = vec![vec![0.0; v]; k];
        for w in 0..v {
            let t = w as f64 / (v - 1) as f64;
            let mix = [(1.0 - t).powi(3), 3.0 * t * (1.0 - t) * 0.3, t.powi(3)];
            for (row, m) in phi.iter_mut().zip(mix) {
                row[w] = m + 1e-6;
            }
        }
        for row in &mut phi {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= s);
        }
        TopicModel {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            k,
            alpha: 0.1,
            beta: 0.01,
            seed: 0,
            iterations: 1,
            burn_in: 0,
            samples: 1,
            documents: vec![],
            vocabulary: (0..v).map(|i| format!("s{i:03}")).collect(),
            theta: vec![],
            phi,
            topic_weights: vec![1.0 / 3.0; 3],
            log_likelihood: vec![],
        }
    }

    fn vocab(model: &TopicModel) -> Vocabulary {
        Vocabulary::from_keys(model.vocabulary.iter().cloned())
    }

    #[test]
    fn two_songs_one_pair() {
        let model = spread_model(2);
        let cfg = PairConfig { count: 1, ..Default::default() };
        let pairs = sample_pairs(&vocab(&model), &model.song_table(Inversion::Bayes), &cfg, None).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!((pairs[0].song_x.as_str(), pairs[0].song_y.as_str()), ("s000", "s001"));
    }

    #[test]
    fn exhaustion_returns_all() {
        let model = spread_model(6);
        let cfg = PairConfig { count: 100, strategy: Strategy::UniformRandom, ..Default::default() };
        let pairs = sample_pairs(&vocab(&model), &model.song_table(Inversion::Bayes), &cfg, None).unwrap();
        assert_eq!(pairs.len(), 15);
        let set: HashSet<_> = pairs.iter().map(|p| (p.song_x.clone(), p.song_y.clone())).collect();
        assert_eq!(set.len(), 15);
        assert!(pairs.iter().all(|p| p.song_x < p.song_y));
    }

    #[test]
    fn stratified_bins_are_balanced() {
        let model = spread_model(80);
        let table = model.song_table(Inversion::Bayes);
        let v = vocab(&model);
        let cfg = PairConfig { count: 200, seed: 5, ..Default::default() };
        // Every bin must have at least count / bins candidates for the check to be meaningful.
        let mut avail = [0usize; 10];
        for i in 0..80 {
            for j in i + 1..80 {
                avail[label_bin(table.similarity(v.key(i), v.key(j)).unwrap(), 10)] += 1;
            }
        }
        assert!(avail.iter().all(|&a| a >= 20), "{avail:?}");
        let pairs = sample_pairs(&v, &table, &cfg, None).unwrap();
        let hist = dataset_stats(&pairs, 10).label_histogram;
        assert!(hist.iter().all(|&c| c.abs_diff(20) <= 1), "{hist:?}");
    }

    #[test]
    fn labels_match_recomputation_and_rerun_is_stable() {
        let model = spread_model(30);
        let table = model.song_table(Inversion::Bayes);
        let v = vocab(&model);
        let cfg = PairConfig { count: 100, seed: 9, ..Default::default() };
        let a = sample_pairs(&v, &table, &cfg, None).unwrap();
        let b = sample_pairs(&v, &table, &cfg, None).unwrap();
        assert_eq!(a, b);
        for p in &a {
            assert_eq!(p.label.to_bits(), table.similarity(&p.song_x, &p.song_y).unwrap().to_bits());
        }
        let s = dataset_stats(&a, 10);
        assert_eq!((s.train, s.validation, s.test), (80, 10, 10));
    }

    #[test]
    fn cooccurrence_prefers_co_listened_pairs() {
        use crate::corpus::CorpusDocument;
        let docs = vec![
            CorpusDocument { user: "u".into(), week: 0, counts: [("s000".to_string(), 1), ("s001".to_string(), 1)].into() },
            CorpusDocument { user: "v".into(), week: 0, counts: [("s002".to_string(), 1)].into() },
        ];
        let model = spread_model(3);
        let corpus = Corpus { vocabulary: Vocabulary::from_documents(&docs), documents: docs };
        let co = Cooccurrence::from_corpus(&corpus);
        assert_eq!(co.get(1, 0), 1);
        let cfg = PairConfig { count: 1, strategy: Strategy::CooccurrenceWeighted, ..Default::default() };
        let pairs = sample_pairs(&corpus.vocabulary, &model.song_table(Inversion::Bayes), &cfg, Some(&co)).unwrap();
        assert_eq!((pairs[0].song_x.as_str(), pairs[0].song_y.as_str()), ("s000", "s001"));
        assert!(sample_pairs(&corpus.vocabulary, &model.song_table(Inversion::Bayes), &cfg, None).is_err());
    }

    #[test]
    fn errors() {
        let model = spread_model(2);
        let one = Vocabulary::from_keys(["s000".to_string()]);
        let table = model.song_table(Inversion::Bayes);
        assert!(sample_pairs(&one, &table, &PairConfig::default(), None).is_err());
        let bad = PairConfig { splits: [0.5, 0.1, 0.1], ..Default::default() };
        assert!(sample_pairs(&vocab(&model), &table, &bad, None).is_err());
    }

    #[test]
    fn rounding_and_stats() {
        assert_eq!(split_sizes(10, [0.8, 0.1, 0.1]), [8, 1, 1]);
        assert_eq!(split_sizes(7, [1.0 / 3.0; 3]), [3, 2, 2]);
        assert_eq!(split_sizes(0, [0.8, 0.1, 0.1]), [0, 0, 0]);
        let empty = dataset_stats(&[], 10);
        assert_eq!(empty.label_histogram, vec![0; 10]);
        assert_eq!((empty.train, empty.validation, empty.test), (0, 0, 0));
        let fixture: Vec<PairSample> = (0..10)
            .map(|i| PairSample {
                song_x: format!("a{i}"),
                song_y: format!("b{i}"),
                label: if i < 5 { 0.1 } else { 0.9 },
                split: Split::Train,
            })
            .collect();
        assert_eq!(dataset_stats(&fixture, 2).label_histogram, vec![5, 5]);
    }

    #[test]
    fn csv_round_trip() {
        let model = spread_model(10);
        let pairs = sample_pairs(&vocab(&model), &model.song_table(Inversion::Bayes), &PairConfig { count: 20, ..Default::default() }, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pairs.csv");
        write_pairs_csv(&p, &pairs).unwrap();
        assert_eq!(read_pairs_csv(&p).unwrap(), pairs);
    }
}
