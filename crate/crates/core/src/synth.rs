//! Synthetic worlds with planted themes, planted attribute structure and
//! planted temporal proximity.
//!
//! Every song belongs to one theme. Its attribute sequences are the theme
//! prototype plus isotropic Gaussian noise. Users listen in streaks: a streak
//! plays songs of a single theme separated by short gaps, and the next streak
//! switches to a different theme after a long gap.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use chrono::{DateTime, Duration, NaiveDate, Utc};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Geometric, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{write_attributes_file, write_events_file, ListeningEvent, SongAttributeRecord, TensorLayout};

const SEQUENCE_FEATURES: [&str; 8] = ["pitches", "timbre", "loudness", "segments", "beats", "bars", "tatums", "sections"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldSpec {
    pub themes: usize,
    pub songs_per_theme: usize,
    pub users: usize,
    pub weeks: usize,
    /// Mean songs per streak; lengths are geometric on {1, 2, ...}.
    pub mean_streak_len: f64,
    /// Mean gap between songs of one streak, minutes.
    pub within_gap_minutes: f64,
    /// Mean gap before a theme switch, minutes.
    pub between_gap_minutes: f64,
    /// Sequence features per song.
    pub channels: usize,
    pub length: usize,
    pub sigma_within: f64,
    pub sigma_between: f64,
    pub seed: u64,
    /// First day of the world; users start listening on this day.
    pub start: NaiveDate,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            themes: 4,
            songs_per_theme: 25,
            users: 50,
            weeks: 20,
            mean_streak_len: 8.0,
            within_gap_minutes: 3.0,
            between_gap_minutes: 2880.0,
            channels: 4,
            length: 64,
            sigma_within: 0.5,
            sigma_between: 1.0,
            seed: 42,
            start: NaiveDate::from_ymd_opt(2024, 1, 1).expect("valid date"),
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("themes", self.themes),
            ("songs_per_theme", self.songs_per_theme),
            ("users", self.users),
            ("weeks", self.weeks),
            ("channels", self.channels),
            ("length", self.length),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("world {name} must be positive")));
        }
        if !(self.mean_streak_len >= 1.0 && self.mean_streak_len.is_finite()) {
            return Err(Error::Config("mean streak length must be at least 1".into()));
        }
        for (name, v) in [
            ("within_gap_minutes", self.within_gap_minutes),
            ("between_gap_minutes", self.between_gap_minutes),
            ("sigma_between", self.sigma_between),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("world {name} must be positive")));
            }
        }
        if !(self.sigma_within >= 0.0 && self.sigma_within < self.sigma_between) {
            return Err(Error::Config("sigma_within must lie in [0, sigma_between)".into()));
        }
        Ok(())
    }

    pub fn song_count(&self) -> usize {
        self.themes * self.songs_per_theme
    }

    /// Names of the sequence features, in channel order.
    pub fn feature_names(&self) -> Vec<String> {
        (0..self.channels)
            .map(|c| match SEQUENCE_FEATURES.get(c) {
                Some(name) => name.to_string(),
                None => format!("feature{c}"),
            })
            .collect()
    }

    /// Layout selecting every sequence feature at full length.
    pub fn layout(&self) -> TensorLayout {
        TensorLayout {
            channels: self.feature_names(),
            length: self.length,
        }
    }

    fn end(&self) -> DateTime<Utc> {
        self.start.and_hms_opt(0, 0, 0).expect("midnight").and_utc() + Duration::weeks(self.weeks as i64)
    }
}

/// One transition of a generated stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub within_streak: bool,
    pub gap_minutes: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub spec: WorldSpec,
    /// Sorted by user, then time. Song keys are filled in.
    pub events: Vec<ListeningEvent>,
    pub records: Vec<SongAttributeRecord>,
    /// Song key to planted theme.
    pub ground_truth: BTreeMap<String, usize>,
    pub transitions: Vec<Transition>,
}

pub fn song_key(theme: usize, j: usize) -> String {
    format!("S{theme:02}{j:04}")
}

/// Short and long gaps, exponentially distributed.
pub struct GapModel {
    within: Exp<f64>,
    between: Exp<f64>,
}

impl GapModel {
    pub fn new(within_minutes: f64, between_minutes: f64) -> Result<GapModel> {
        let exp = |m: f64| Exp::new(1.0 / m).map_err(|e| Error::Config(format!("gap mean {m}: {e}")));
        Ok(GapModel {
            within: exp(within_minutes)?,
            between: exp(between_minutes)?,
        })
    }

    /// Gap in minutes, never shorter than one second.
    pub fn sample<R: Rng>(&self, rng: &mut R, within_streak: bool) -> f64 {
        let d = if within_streak { &self.within } else { &self.between };
        d.sample(rng).max(1.0 / 60.0)
    }
}

fn attribute_records(spec: &WorldSpec, rng: &mut ChaCha8Rng) -> Vec<SongAttributeRecord> {
    let between = Normal::new(0.0, spec.sigma_between).expect("validated sigma");
    let within = Normal::new(0.0, spec.sigma_within).expect("validated sigma");
    let names = spec.feature_names();
    let mut records = Vec::with_capacity(spec.song_count());
    for theme in 0..spec.themes {
        let prototype: Vec<f64> = (0..spec.channels * spec.length).map(|_| between.sample(rng)).collect();
        let tempo = 80.0 + 80.0 * rng.random::<f64>();
        for j in 0..spec.songs_per_theme {
            let mut features = BTreeMap::new();
            for (c, name) in names.iter().enumerate() {
                let row = &prototype[c * spec.length..(c + 1) * spec.length];
                features.insert(name.clone(), row.iter().map(|p| p + within.sample(rng)).collect());
            }
            features.insert("tempo".into(), vec![tempo + 5.0 * within.sample(rng)]);
            features.insert("duration".into(), vec![(180.0 + 30.0 * between.sample(rng)).max(30.0)]);
            records.push(SongAttributeRecord {
                song_key: song_key(theme, j),
                artist_id: Some(format!("AR{theme:02}{:03}", j / 5)),
                title: Some(format!("Theme {theme} Track {j}")),
                features,
            });
        }
    }
    records
}

/// Generates a world. Deterministic in `spec.seed`.
pub fn generate_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let records = attribute_records(spec, &mut rng);
    let ground_truth: BTreeMap<String, usize> = records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.song_key.clone(), i / spec.songs_per_theme))
        .collect();

    let gaps = GapModel::new(spec.within_gap_minutes, spec.between_gap_minutes)?;
    let streak = Geometric::new(1.0 / spec.mean_streak_len).map_err(|e| Error::Config(e.to_string()))?;
    let start = spec.start.and_hms_opt(0, 0, 0).expect("midnight").and_utc();
    let end = spec.end();
    let width = (spec.users.max(2) - 1).to_string().len();

    let mut events = Vec::new();
    let mut transitions = Vec::new();
    for u in 0..spec.users {
        let user = format!("user{u:0width$}");
        let mut t = start + Duration::seconds(rng.random_range(0..86_400));
        let mut theme = rng.random_range(0..spec.themes);
        let mut first_streak = true;
        'stream: loop {
            if !first_streak {
                let gap = gaps.sample(&mut rng, false);
                t += Duration::seconds((gap * 60.0).round() as i64);
                if spec.themes > 1 {
                    let others: Vec<usize> = (0..spec.themes).filter(|&k| k != theme).collect();
                    theme = *others.choose(&mut rng).expect("at least one other theme");
                }
                if t >= end {
                    break;
                }
                transitions.push(Transition { within_streak: false, gap_minutes: gap });
            }
            first_streak = false;
            let len = 1 + streak.sample(&mut rng);
            for i in 0..len {
                if i > 0 {
                    let gap = gaps.sample(&mut rng, true);
                    t += Duration::seconds((gap * 60.0).round() as i64);
                    if t >= end {
                        break 'stream;
                    }
                    transitions.push(Transition { within_streak: true, gap_minutes: gap });
                }
                let j = rng.random_range(0..spec.songs_per_theme);
                let record = &records[theme * spec.songs_per_theme + j];
                events.push(ListeningEvent {
                    user_id: user.clone(),
                    timestamp: t,
                    artist_id: record.artist_id.clone(),
                    artist_name: format!("Artist {theme}-{}", j / 5),
                    track_id: Some(format!("TR{theme:02}{j:04}")),
                    song_title: record.title.clone().expect("synthetic songs are titled"),
                    song_key: Some(record.song_key.clone()),
                });
            }
        }
    }

    Ok(World {
        spec: spec.clone(),
        events,
        records,
        ground_truth,
        transitions,
    })
}

pub fn write_ground_truth(path: &Path, truth: &BTreeMap<String, usize>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["song_key", "true_theme"])?;
    for (k, t) in truth {
        w.write_record([k.as_str(), &t.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_ground_truth(path: &Path) -> Result<BTreeMap<String, usize>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = BTreeMap::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let theme = rec.get(1).and_then(|s| s.parse().ok()).ok_or_else(|| Error::Parse {
            line: i + 2,
            message: "bad true_theme".into(),
        })?;
        out.insert(rec.get(0).unwrap_or_default().to_string(), theme);
    }
    Ok(out)
}

/// Writes `events.tsv` (without song keys, so they must be matched),
/// `attributes.jsonl` and `ground_truth.csv` into `dir`.
pub fn write_world(dir: &Path, world: &World) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let unkeyed: Vec<ListeningEvent> = world
        .events
        .iter()
        .map(|e| ListeningEvent { song_key: None, ..e.clone() })
        .collect();
    write_events_file(&dir.join("events.tsv"), &unkeyed)?;
    write_attributes_file(&dir.join("attributes.jsonl"), &world.records)?;
    write_ground_truth(&dir.join("ground_truth.csv"), &world.ground_truth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_weekly_documents, DateRange};

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (n(a) * n(b))
    }

    #[test]
    fn desk_world_counts() {
        let world = generate_world(&WorldSpec::default()).unwrap();
        assert_eq!(world.records.len(), 100);
        assert_eq!(world.ground_truth.len(), 100);
        let corpus = build_weekly_documents(&world.events, DateRange::default()).unwrap();
        assert!(corpus.documents.len() <= 1000, "{}", corpus.documents.len());
        assert!(corpus.documents.len() > 500);
    }

    #[test]
    fn streams_are_sorted_and_in_window() {
        let spec = WorldSpec::default();
        let world = generate_world(&spec).unwrap();
        for w in world.events.windows(2) {
            if w[0].user_id == w[1].user_id {
                assert!(w[0].timestamp <= w[1].timestamp);
            } else {
                assert!(w[0].user_id < w[1].user_id);
            }
        }
        assert!(world.events.iter().all(|e| e.timestamp < spec.end()));
    }

    #[test]
    fn same_seed_is_identical() {
        let spec = WorldSpec { users: 5, weeks: 3, ..Default::default() };
        assert_eq!(generate_world(&spec).unwrap(), generate_world(&spec).unwrap());
        let other = generate_world(&WorldSpec { seed: 7, ..spec.clone() }).unwrap();
        assert_ne!(other.events, generate_world(&spec).unwrap().events);
    }

    #[test]
    fn one_theme_world() {
        let spec = WorldSpec { themes: 1, users: 3, weeks: 2, ..Default::default() };
        let world = generate_world(&spec).unwrap();
        assert!(world.ground_truth.values().all(|&t| t == 0));
        assert!(!world.events.is_empty());
    }

    #[test]
    fn gap_means_match_within_ten_percent() {
        let gaps = GapModel::new(3.0, 300.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (within, target) in [(true, 3.0), (false, 300.0)] {
            let mean = (0..10_000).map(|_| gaps.sample(&mut rng, within)).sum::<f64>() / 10_000.0;
            assert!((mean - target).abs() / target < 0.1, "{mean} vs {target}");
        }
        let spec = WorldSpec { between_gap_minutes: 300.0, users: 20, ..Default::default() };
        let world = generate_world(&spec).unwrap();
        for within in [true, false] {
            let g: Vec<f64> = world.transitions.iter().filter(|t| t.within_streak == within).map(|t| t.gap_minutes).collect();
            let target = if within { 3.0 } else { 300.0 };
            assert!(g.len() >= 10_000, "{}", g.len());
            let mean = g.iter().sum::<f64>() / g.len() as f64;
            assert!((mean - target).abs() / target < 0.1, "{mean} vs {target}");
        }
    }

    #[test]
    fn within_theme_tensors_are_closer() {
        let spec = WorldSpec::default();
        let world = generate_world(&spec).unwrap();
        let layout = spec.layout();
        let flat: Vec<Vec<f64>> = world
            .records
            .iter()
            .map(|r| layout.channels.iter().flat_map(|c| r.features[c].clone()).collect())
            .collect();
        let (mut within, mut between) = (Vec::new(), Vec::new());
        for i in 0..flat.len() {
            for j in i + 1..flat.len() {
                let c = cosine(&flat[i], &flat[j]);
                if i / spec.songs_per_theme == j / spec.songs_per_theme {
                    within.push(c);
                } else {
                    between.push(c);
                }
            }
        }
        let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(avg(&within) - avg(&between) > 0.1, "{} vs {}", avg(&within), avg(&between));
    }

    #[test]
    fn invalid_specs() {
        assert!(WorldSpec { themes: 0, ..Default::default() }.validate().is_err());
        assert!(WorldSpec { sigma_within: 1.0, sigma_between: 1.0, ..Default::default() }.validate().is_err());
        assert!(WorldSpec { mean_streak_len: 0.5, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn files_round_trip() {
        let spec = WorldSpec { users: 2, weeks: 1, ..Default::default() };
        let world = generate_world(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_world(dir.path(), &world).unwrap();
        assert_eq!(read_ground_truth(&dir.path().join("ground_truth.csv")).unwrap(), world.ground_truth);
        let parsed = crate::ingest::read_events_file(&dir.path().join("events.tsv"), Default::default()).unwrap();
        assert_eq!(parsed.events.len(), world.events.len());
        assert!(parsed.events.iter().all(|e| e.song_key.is_none()));
    }
}
