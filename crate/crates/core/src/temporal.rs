//! Gap-time and n-skip analyses of raw listening streams.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::ListeningEvent;
use crate::stats;
use crate::topics::SongTable;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapObservation {
    pub user_id: String,
    /// Gap in units of the time scale.
    pub delta_t: f64,
    /// `ln(max(delta_t, 1))`.
    pub log_delta_t: f64,
    pub sim: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GapScan {
    pub observations: Vec<GapObservation>,
    /// Consecutive pairs dropped because a song has no theme distribution.
    pub skipped: usize,
}

/// Groups events by user (sorted by user id), preserving per-user order and
/// checking that each stream is time-sorted.
pub fn user_streams(events: &[ListeningEvent]) -> Result<BTreeMap<&str, Vec<&ListeningEvent>>> {
    let mut streams: BTreeMap<&str, Vec<&ListeningEvent>> = BTreeMap::new();
    for ev in events {
        streams.entry(ev.user_id.as_str()).or_default().push(ev);
    }
    for (user, stream) in &streams {
        if stream.windows(2).any(|w| w[1].timestamp < w[0].timestamp) {
            return Err(Error::Unsorted { user: user.to_string() });
        }
    }
    Ok(streams)
}

/// Sorts events by user then time, stably.
pub fn sort_streams(events: &mut [ListeningEvent]) {
    events.sort_by(|a, b| a.user_id.cmp(&b.user_id).then(a.timestamp.cmp(&b.timestamp)));
}

fn lookup<'a>(table: &'a SongTable, ev: &ListeningEvent) -> Option<&'a [f64]> {
    ev.song_key.as_deref().and_then(|k| table.get(k))
}

/// One observation per consecutive same-user pair. `time_scale` is the gap
/// unit in minutes.
pub fn gap_similarity_scan(events: &[ListeningEvent], table: &SongTable, time_scale: f64) -> Result<GapScan> {
    if !(time_scale > 0.0 && time_scale.is_finite()) {
        return Err(Error::Config(format!("time scale must be positive, got {time_scale}")));
    }
    let mut scan = GapScan::default();
    for (user, stream) in user_streams(events)? {
        for pair in stream.windows(2) {
            let (Some(px), Some(py)) = (lookup(table, pair[0]), lookup(table, pair[1])) else {
                scan.skipped += 1;
                continue;
            };
            let seconds = (pair[1].timestamp - pair[0].timestamp).num_seconds() as f64;
            let delta_t = seconds / 60.0 / time_scale;
            scan.observations.push(GapObservation {
                user_id: user.to_string(),
                delta_t,
                log_delta_t: delta_t.max(1.0).ln(),
                sim: crate::topics::taste_similarity(px, py)?,
            });
        }
    }
    Ok(scan)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBins {
    pub count: usize,
    /// Range over `log_delta_t`; `None` spans `[0, max observed]`.
    pub range: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// `None` for empty bins.
    pub mean_sim: Option<f64>,
}

/// Equal-width histogram over `log_delta_t`. Values outside the range land in
/// the edge bins so the counts partition the observations.
pub fn gap_histogram(observations: &[GapObservation], bins: HistogramBins) -> Result<Vec<GapBin>> {
    if bins.count == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    if observations.is_empty() {
        return Err(Error::Config("histogram needs at least one observation".into()));
    }
    let (lo, hi) = bins.range.unwrap_or_else(|| {
        let max = observations.iter().map(|o| o.log_delta_t).fold(0.0, f64::max);
        (0.0, if max > 0.0 { max } else { 1.0 })
    });
    if hi.is_nan() || lo.is_nan() || hi <= lo {
        return Err(Error::Config(format!("empty histogram range [{lo}, {hi}]")));
    }
    let width = (hi - lo) / bins.count as f64;
    let mut counts = vec![0usize; bins.count];
    let mut sums = vec![0.0; bins.count];
    for o in observations {
        let idx = (((o.log_delta_t - lo) / width).floor().max(0.0) as usize).min(bins.count - 1);
        counts[idx] += 1;
        sums[idx] += o.sim;
    }
    Ok((0..bins.count)
        .map(|i| GapBin {
            lo: lo + width * i as f64,
            hi: lo + width * (i + 1) as f64,
            count: counts[i],
            mean_sim: (counts[i] > 0).then(|| sums[i] / counts[i] as f64),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipDistribution {
    pub n: usize,
    pub similarities: Vec<f64>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

impl SkipDistribution {
    fn new(n: usize, similarities: Vec<f64>) -> Self {
        SkipDistribution {
            n,
            mean: stats::mean(&similarities),
            std: stats::std_dev(&similarities),
            similarities,
        }
    }

    /// min, lower quartile, median, upper quartile, max.
    pub fn five_numbers(&self) -> Option<[f64; 5]> {
        let mut sorted = self.similarities.clone();
        sorted.sort_by(f64::total_cmp);
        Some([
            stats::quantile_sorted(&sorted, 0.0)?,
            stats::quantile_sorted(&sorted, 0.25)?,
            stats::quantile_sorted(&sorted, 0.5)?,
            stats::quantile_sorted(&sorted, 0.75)?,
            stats::quantile_sorted(&sorted, 1.0)?,
        ])
    }
}

/// Pairs `(s_i, s_{i+n+1})` within each user stream, for `n = 0..=max_skip`.
pub fn n_skip_pairs<T: Copy>(stream: &[T], n: usize) -> impl Iterator<Item = (T, T)> + '_ {
    stream.iter().zip(stream.iter().skip(n + 1)).map(|(a, b)| (*a, *b))
}

pub fn n_skip_analysis(events: &[ListeningEvent], table: &SongTable, max_skip: usize) -> Result<Vec<SkipDistribution>> {
    let streams = user_streams(events)?;
    let mut levels = Vec::with_capacity(max_skip + 1);
    for n in 0..=max_skip {
        let mut sims = Vec::new();
        for stream in streams.values() {
            for (a, b) in n_skip_pairs(stream, n) {
                if let (Some(px), Some(py)) = (lookup(table, a), lookup(table, b)) {
                    sims.push(crate::topics::taste_similarity(px, py)?);
                }
            }
        }
        levels.push(SkipDistribution::new(n, sims));
    }
    Ok(levels)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_gap_csv(path: &Path, bins: &[GapBin]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["log_delta_t_lo", "log_delta_t_hi", "count", "mean_sim"])?;
    for b in bins {
        w.write_record([b.lo.to_string(), b.hi.to_string(), b.count.to_string(), opt(b.mean_sim)])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_nskip_csv(path: &Path, levels: &[SkipDistribution]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["n", "pairs", "mean", "std", "min", "q1", "median", "q3", "max"])?;
    for l in levels {
        let five = l.five_numbers();
        let mut rec = vec![l.n.to_string(), l.similarities.len().to_string(), opt(l.mean), opt(l.std)];
        rec.extend((0..5).map(|i| opt(five.map(|f| f[i]))));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topics::{Inversion, TopicModel, MODEL_FORMAT, MODEL_VERSION};
    use chrono::{DateTime, Utc};

    fn table() -> SongTable {
        // a, b own theme 0 / 1 outright; c is an even mix.
        TopicModel {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            k: 2,
            alpha: 0.1,
            beta: 0.01,
            seed: 0,
            iterations: 1,
            burn_in: 0,
            samples: 1,
            documents: vec![],
            vocabulary: vec!["a".into(), "b".into(), "c".into()],
            theta: vec![],
            phi: vec![vec![0.5, 0.0, 0.5], vec![0.0, 0.5, 0.5]],
            topic_weights: vec![0.5, 0.5],
            log_likelihood: vec![],
        }
        .song_table(Inversion::Bayes)
    }

    fn ev(user: &str, minute: i64, song: &str) -> ListeningEvent {
        let base = DateTime::parse_from_rfc3339("2008-01-07T10:00:00Z").unwrap().with_timezone(&Utc);
        ListeningEvent {
            user_id: user.into(),
            timestamp: base + chrono::Duration::minutes(minute),
            artist_id: None,
            artist_name: String::new(),
            track_id: None,
            song_title: song.into(),
            song_key: Some(song.into()),
        }
    }

    fn obs(log: f64, sim: f64) -> GapObservation {
        GapObservation { user_id: "u".into(), delta_t: log.exp(), log_delta_t: log, sim }
    }

    #[test]
    fn unit_gap_same_song() {
        let scan = gap_similarity_scan(&[ev("u", 0, "a"), ev("u", 1, "a")], &table(), 1.0).unwrap();
        assert_eq!(scan.observations.len(), 1);
        let o = &scan.observations[0];
        assert_eq!(o.delta_t, 1.0);
        assert_eq!(o.log_delta_t, 0.0);
        assert_eq!(o.sim, 1.0);
    }

    #[test]
    fn hour_gap_and_zero_gap() {
        let scan = gap_similarity_scan(&[ev("u", 0, "a"), ev("u", 60, "b"), ev("u", 60, "c")], &table(), 1.0).unwrap();
        assert!((scan.observations[0].log_delta_t - 4.0943445622).abs() < 1e-9);
        assert_eq!(scan.observations[0].sim, 0.0);
        assert_eq!(scan.observations[1].delta_t, 0.0);
        assert_eq!(scan.observations[1].log_delta_t, 0.0);
    }

    #[test]
    fn single_event_and_cross_user() {
        let scan = gap_similarity_scan(&[ev("u", 0, "a"), ev("v", 1, "a")], &table(), 1.0).unwrap();
        assert!(scan.observations.is_empty());
    }

    #[test]
    fn unknown_songs_are_counted() {
        let scan = gap_similarity_scan(&[ev("u", 0, "a"), ev("u", 1, "zzz"), ev("u", 2, "a")], &table(), 1.0).unwrap();
        assert!(scan.observations.is_empty());
        assert_eq!(scan.skipped, 2);
    }

    #[test]
    fn unsorted_is_rejected() {
        let r = gap_similarity_scan(&[ev("u", 5, "a"), ev("u", 1, "a")], &table(), 1.0);
        assert!(matches!(r, Err(Error::Unsorted { .. })));
    }

    #[test]
    fn histogram_cases() {
        let one = gap_histogram(&[obs(0.5, 0.2), obs(0.6, 0.8)], HistogramBins { count: 1, range: None }).unwrap();
        assert_eq!(one[0].count, 2);
        assert!((one[0].mean_sim.unwrap() - 0.5).abs() < 1e-15);

        // bins of width 1 over [0, 3): 0.2, 0.9 | 1.5 | 2.1, 3.0 (edge)
        let five = [obs(0.2, 1.0), obs(0.9, 0.5), obs(1.5, 0.3), obs(2.1, 0.1), obs(3.0, 0.3)];
        let bins = gap_histogram(&five, HistogramBins { count: 3, range: Some((0.0, 3.0)) }).unwrap();
        assert_eq!(bins.iter().map(|b| b.count).collect::<Vec<_>>(), vec![2, 1, 2]);
        assert!((bins[0].mean_sim.unwrap() - 0.75).abs() < 1e-15);
        assert!((bins[2].mean_sim.unwrap() - 0.2).abs() < 1e-15);

        assert!(gap_histogram(&five, HistogramBins { count: 0, range: None }).is_err());
        assert!(gap_histogram(&[], HistogramBins { count: 2, range: None }).is_err());
    }

    #[test]
    fn skip_pairs_definition() {
        let s = ['a', 'b', 'c', 'd'];
        assert_eq!(n_skip_pairs(&s, 1).collect::<Vec<_>>(), vec![('a', 'c'), ('b', 'd')]);
        assert_eq!(n_skip_pairs(&s[..2], 1).count(), 0);
        assert_eq!(n_skip_pairs(&s, 0).count(), 3);
    }

    #[test]
    fn skip_levels() {
        let events = [ev("u", 0, "a"), ev("u", 1, "a"), ev("u", 2, "b"), ev("u", 3, "b")];
        let levels = n_skip_analysis(&events, &table(), 3).unwrap();
        assert_eq!(levels.len(), 4);
        assert_eq!(levels[0].similarities, vec![1.0, 0.0, 1.0]);
        assert_eq!(levels[1].similarities, vec![0.0, 0.0]);
        assert_eq!(levels[3].similarities.len(), 0);
        assert_eq!(levels[3].mean, None);
        let dir = tempfile::tempdir().unwrap();
        write_nskip_csv(&dir.path().join("n.csv"), &levels).unwrap();
        let text = std::fs::read_to_string(dir.path().join("n.csv")).unwrap();
        assert_eq!(text.lines().count(), 5);
    }
}
