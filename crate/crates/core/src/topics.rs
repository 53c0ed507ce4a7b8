//! Latent taste model: LDA fitted by collapsed Gibbs sampling over weekly
//! documents, per-song theme distributions, and the cosine taste similarity
//! used as the teaching signal.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::corpus::Corpus;
use crate::error::{Error, Result};

pub const MODEL_FORMAT: &str = "tastesim-lda";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LdaConfig {
    pub k: usize,
    /// Symmetric document-theme prior; `None` means `50 / k`.
    pub alpha: Option<f64>,
    pub beta: f64,
    pub iterations: usize,
    pub burn_in: usize,
    /// Sweeps between retained samples after burn-in.
    pub thin: usize,
    pub seed: u64,
    /// Record the collapsed log-likelihood every this many sweeps (0 = never).
    pub likelihood_every: usize,
}

impl Default for LdaConfig {
    fn default() -> Self {
        LdaConfig {
            k: 20,
            alpha: None,
            beta: 0.01,
            iterations: 1000,
            burn_in: 500,
            thin: 10,
            seed: 0,
            likelihood_every: 10,
        }
    }
}

impl LdaConfig {
    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(50.0 / self.k as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!("theme count must be at least 2, got {}", self.k)));
        }
        if !(self.alpha() > 0.0 && self.alpha().is_finite()) || !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config("alpha and beta must be positive".into()));
        }
        if self.iterations <= self.burn_in {
            return Err(Error::Config(format!(
                "iterations ({}) must exceed burn_in ({})",
                self.iterations, self.burn_in
            )));
        }
        if self.thin == 0 {
            return Err(Error::Config("thin must be at least 1".into()));
        }
        Ok(())
    }
}

/// Token assignments and the count matrices they induce.
#[derive(Debug, Clone)]
pub struct GibbsState {
    k: usize,
    vocab: usize,
    alpha: f64,
    beta: f64,
    docs: Vec<Vec<u32>>,
    assignments: Vec<Vec<u16>>,
    /// doc x topic
    n_dk: Vec<u32>,
    /// topic x word
    n_kw: Vec<u32>,
    n_k: Vec<u32>,
    rng: ChaCha8Rng,
    iteration: usize,
    scratch: Vec<f64>,
}

impl GibbsState {
    pub fn new(corpus: &Corpus, k: usize, alpha: f64, beta: f64, seed: u64) -> Result<GibbsState> {
        if k < 2 || k > usize::from(u16::MAX) {
            return Err(Error::Config(format!("theme count {k} out of range")));
        }
        if corpus.documents.is_empty() {
            return Err(Error::Config("cannot fit a topic model on an empty corpus".into()));
        }
        let vocab = corpus.vocabulary.len();
        let docs: Vec<Vec<u32>> = corpus
            .documents
            .iter()
            .map(|d| {
                d.counts
                    .iter()
                    .flat_map(|(key, &c)| {
                        let w = corpus.vocabulary.index_of(key).expect("vocabulary covers corpus") as u32;
                        std::iter::repeat_n(w, c as usize)
                    })
                    .collect()
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut n_dk = vec![0u32; docs.len() * k];
        let mut n_kw = vec![0u32; k * vocab];
        let mut n_k = vec![0u32; k];
        let assignments = docs
            .iter()
            .enumerate()
            .map(|(d, words)| {
                words
                    .iter()
                    .map(|&w| {
                        let z = rng.random_range(0..k);
                        n_dk[d * k + z] += 1;
                        n_kw[z * vocab + w as usize] += 1;
                        n_k[z] += 1;
                        z as u16
                    })
                    .collect()
            })
            .collect();
        Ok(GibbsState {
            k,
            vocab,
            alpha,
            beta,
            docs,
            assignments,
            n_dk,
            n_kw,
            n_k,
            rng,
            iteration: 0,
            scratch: vec![0.0; k],
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// One full pass resampling every token's theme.
    pub fn sweep(&mut self) {
        let (k, v) = (self.k, self.vocab);
        let vbeta = v as f64 * self.beta;
        for d in 0..self.docs.len() {
            for i in 0..self.docs[d].len() {
                let w = self.docs[d][i] as usize;
                let old = self.assignments[d][i] as usize;
                self.n_dk[d * k + old] -= 1;
                self.n_kw[old * v + w] -= 1;
                self.n_k[old] -= 1;

                let mut total = 0.0;
                for z in 0..k {
                    let p = (f64::from(self.n_dk[d * k + z]) + self.alpha)
                        * (f64::from(self.n_kw[z * v + w]) + self.beta)
                        / (f64::from(self.n_k[z]) + vbeta);
                    total += p;
                    self.scratch[z] = total;
                }
                let u = self.rng.random::<f64>() * total;
                let new = self.scratch.iter().position(|&c| u < c).unwrap_or(k - 1);

                self.assignments[d][i] = new as u16;
                self.n_dk[d * k + new] += 1;
                self.n_kw[new * v + w] += 1;
                self.n_k[new] += 1;
            }
        }
        self.iteration += 1;
    }

    /// Verifies that the count matrices are the exact marginals of the
    /// assignment vector.
    pub fn check_consistency(&self) -> bool {
        let (k, v) = (self.k, self.vocab);
        let mut n_dk = vec![0u32; self.docs.len() * k];
        let mut n_kw = vec![0u32; k * v];
        let mut n_k = vec![0u32; k];
        for (d, (words, zs)) in self.docs.iter().zip(&self.assignments).enumerate() {
            for (&w, &z) in words.iter().zip(zs) {
                n_dk[d * k + z as usize] += 1;
                n_kw[z as usize * v + w as usize] += 1;
                n_k[z as usize] += 1;
            }
        }
        n_dk == self.n_dk && n_kw == self.n_kw && n_k == self.n_k
    }

    /// Collapsed log p(w | z) of the current assignment.
    pub fn log_likelihood(&self) -> f64 {
        let (k, v) = (self.k, self.vocab);
        let vbeta = v as f64 * self.beta;
        let lg_beta = ln_gamma(self.beta);
        let mut ll = k as f64 * (ln_gamma(vbeta) - v as f64 * lg_beta);
        for z in 0..k {
            for w in 0..v {
                let c = self.n_kw[z * v + w];
                if c > 0 {
                    ll += ln_gamma(f64::from(c) + self.beta) - lg_beta;
                }
            }
            ll -= ln_gamma(f64::from(self.n_k[z]) + vbeta);
        }
        ll
    }

    fn accumulate(&self, acc_dk: &mut [f64], acc_kw: &mut [f64]) {
        for (a, &c) in acc_dk.iter_mut().zip(&self.n_dk) {
            *a += f64::from(c);
        }
        for (a, &c) in acc_kw.iter_mut().zip(&self.n_kw) {
            *a += f64::from(c);
        }
    }
}

/// Fitted taste model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicModel {
    pub format: String,
    pub version: u32,
    pub k: usize,
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
    pub iterations: usize,
    pub burn_in: usize,
    pub samples: usize,
    /// `(user, week)` of each theta row.
    pub documents: Vec<(String, i64)>,
    /// Song key of each phi column.
    pub vocabulary: Vec<String>,
    /// Document x theme.
    pub theta: Vec<Vec<f64>>,
    /// Theme x song.
    pub phi: Vec<Vec<f64>>,
    /// Corpus-level p(z).
    pub topic_weights: Vec<f64>,
    /// `(sweep, log-likelihood)` trace.
    #[serde(default)]
    pub log_likelihood: Vec<(usize, f64)>,
}

/// Runs collapsed Gibbs sampling and estimates theta and phi from counts
/// averaged over every `thin`-th sweep after burn-in.
pub fn fit_lda(corpus: &Corpus, config: &LdaConfig) -> Result<TopicModel> {
    config.validate()?;
    let (k, alpha, beta) = (config.k, config.alpha(), config.beta);
    let mut state = GibbsState::new(corpus, k, alpha, beta, config.seed)?;
    let d_count = corpus.documents.len();
    let v = corpus.vocabulary.len();
    let mut acc_dk = vec![0.0; d_count * k];
    let mut acc_kw = vec![0.0; k * v];
    let mut samples = 0usize;
    let mut trace = Vec::new();

    for sweep in 1..=config.iterations {
        state.sweep();
        debug_assert!(state.check_consistency());
        if config.likelihood_every > 0 && sweep.is_multiple_of(config.likelihood_every) {
            trace.push((sweep, state.log_likelihood()));
        }
        if sweep > config.burn_in && (sweep - config.burn_in).is_multiple_of(config.thin) {
            state.accumulate(&mut acc_dk, &mut acc_kw);
            samples += 1;
        }
    }
    if samples == 0 {
        state.accumulate(&mut acc_dk, &mut acc_kw);
        samples = 1;
    }
    let s = samples as f64;

    let theta: Vec<Vec<f64>> = acc_dk
        .chunks(k)
        .map(|row| normalize(row.iter().map(|c| c / s + alpha)))
        .collect();
    let phi: Vec<Vec<f64>> = acc_kw
        .chunks(v)
        .map(|row| normalize(row.iter().map(|c| c / s + beta)))
        .collect();

    // p(z): token-weighted average of the document distributions.
    let lengths: Vec<f64> = corpus.documents.iter().map(|d| d.len() as f64).collect();
    let mut weights = vec![0.0; k];
    for (row, len) in theta.iter().zip(&lengths) {
        for (w, p) in weights.iter_mut().zip(row) {
            *w += p * len;
        }
    }
    let topic_weights = normalize(weights.into_iter());

    Ok(TopicModel {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        k,
        alpha,
        beta,
        seed: config.seed,
        iterations: config.iterations,
        burn_in: config.burn_in,
        samples,
        documents: corpus.documents.iter().map(|d| (d.user.clone(), d.week)).collect(),
        vocabulary: corpus.vocabulary.keys().to_vec(),
        theta,
        phi,
        topic_weights,
        log_likelihood: trace,
    })
}

fn normalize<I: Iterator<Item = f64>>(values: I) -> Vec<f64> {
    let v: Vec<f64> = values.collect();
    let total: f64 = v.iter().sum();
    v.into_iter().map(|x| x / total).collect()
}

/// How per-song theme distributions are derived from phi.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Inversion {
    /// `P(z | w) ∝ phi[z][w] p(z)`.
    #[default]
    Bayes,
    /// `P(z | w) ∝ phi[z][w]`.
    Column,
}

impl std::str::FromStr for Inversion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bayes" => Ok(Inversion::Bayes),
            "column" => Ok(Inversion::Column),
            other => Err(Error::Config(format!("unknown inversion `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SongThemeDistribution {
    pub song_key: String,
    pub p: Vec<f64>,
}

impl TopicModel {
    pub fn song_index(&self, song_key: &str) -> Option<usize> {
        self.vocabulary.binary_search_by(|k| k.as_str().cmp(song_key)).ok()
    }

    fn distribution_at(&self, w: usize, inversion: Inversion) -> Vec<f64> {
        normalize((0..self.k).map(|z| match inversion {
            Inversion::Bayes => self.phi[z][w] * self.topic_weights[z],
            Inversion::Column => self.phi[z][w],
        }))
    }

    /// Theme distributions of every vocabulary song, keyed by song.
    pub fn song_table(&self, inversion: Inversion) -> SongTable {
        SongTable {
            index: self.vocabulary.iter().enumerate().map(|(i, k)| (k.clone(), i)).collect(),
            rows: (0..self.vocabulary.len()).map(|w| self.distribution_at(w, inversion)).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != MODEL_FORMAT || self.version != MODEL_VERSION {
            return Err(Error::Config(format!(
                "unsupported model container {} v{}",
                self.format, self.version
            )));
        }
        let rows_ok = |rows: &[Vec<f64>], width: usize| {
            rows.iter().all(|r| {
                r.len() == width
                    && r.iter().all(|&p| p >= 0.0 && p.is_finite())
                    && (r.iter().sum::<f64>() - 1.0).abs() <= 1e-9
            })
        };
        if self.phi.len() != self.k
            || self.topic_weights.len() != self.k
            || !rows_ok(&self.phi, self.vocabulary.len())
            || !rows_ok(&self.theta, self.k)
            || !rows_ok(std::slice::from_ref(&self.topic_weights), self.k)
            || !self.vocabulary.windows(2).all(|w| w[0] < w[1])
        {
            return Err(Error::Config("model checkpoint is inconsistent".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer(&mut w, self)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<TopicModel> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let model: TopicModel = serde_json::from_reader(BufReader::new(file))?;
        model.validate()?;
        Ok(model)
    }

    pub fn write_theta_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["user".to_string(), "week".to_string()];
        header.extend((0..self.k).map(|z| format!("theme_{z}")));
        w.write_record(&header)?;
        for ((user, week), row) in self.documents.iter().zip(&self.theta) {
            let mut rec = vec![user.clone(), week.to_string()];
            rec.extend(row.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// One row per song with its phi column.
    pub fn write_phi_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["song_key".to_string()];
        header.extend((0..self.k).map(|z| format!("theme_{z}")));
        w.write_record(&header)?;
        for (i, key) in self.vocabulary.iter().enumerate() {
            let mut rec = vec![key.clone()];
            rec.extend(self.phi.iter().map(|row| row[i].to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Per-song theme distributions for fast repeated lookups.
#[derive(Debug, Clone)]
pub struct SongTable {
    index: HashMap<String, usize>,
    rows: Vec<Vec<f64>>,
}

impl SongTable {
    pub fn get(&self, song_key: &str) -> Option<&[f64]> {
        self.index.get(song_key).map(|&i| self.rows[i].as_slice())
    }

    pub fn similarity(&self, x: &str, y: &str) -> Result<f64> {
        let px = self.get(x).ok_or_else(|| Error::UnknownSong(x.to_string()))?;
        let py = self.get(y).ok_or_else(|| Error::UnknownSong(y.to_string()))?;
        taste_similarity(px, py)
    }
}

pub fn song_theme_distribution(
    model: &TopicModel,
    song_key: &str,
    inversion: Inversion,
) -> Result<SongThemeDistribution> {
    let w = model
        .song_index(song_key)
        .ok_or_else(|| Error::UnknownSong(song_key.to_string()))?;
    Ok(SongThemeDistribution {
        song_key: song_key.to_string(),
        p: model.distribution_at(w, inversion),
    })
}

/// Cosine similarity of two theme distributions, clamped to `[0, 1]`.
pub fn taste_similarity(px: &[f64], py: &[f64]) -> Result<f64> {
    if px.len() != py.len() {
        return Err(Error::Shape(format!(
            "distributions have lengths {} and {}",
            px.len(),
            py.len()
        )));
    }
    let dot: f64 = px.iter().zip(py).map(|(a, b)| a * b).sum();
    let nx = px.iter().map(|a| a * a).sum::<f64>().sqrt();
    let ny = py.iter().map(|b| b * b).sum::<f64>().sqrt();
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::UndefinedSimilarity);
    }
    Ok((dot / (nx * ny)).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{CorpusDocument, Vocabulary};
    use std::collections::BTreeMap;

    fn corpus_from(docs: Vec<Vec<(&str, u32)>>) -> Corpus {
        let documents: Vec<CorpusDocument> = docs
            .into_iter()
            .enumerate()
            .map(|(i, tokens)| CorpusDocument {
                user: format!("u{i:03}"),
                week: 0,
                counts: tokens.into_iter().map(|(k, c)| (k.to_string(), c)).collect::<BTreeMap<_, _>>(),
            })
            .collect();
        let vocabulary = Vocabulary::from_documents(&documents);
        Corpus { documents, vocabulary }
    }

    fn model_from_phi(phi: Vec<Vec<f64>>, weights: Vec<f64>) -> TopicModel {
        let k = phi.len();
        let v = phi[0].len();
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
            vocabulary: (0..v).map(|i| format!("s{i}")).collect(),
            theta: vec![],
            phi,
            topic_weights: weights,
            log_likelihood: vec![],
        }
    }

    fn quick(k: usize, seed: u64) -> LdaConfig {
        LdaConfig {
            k,
            alpha: Some(0.1),
            beta: 0.01,
            iterations: 300,
            burn_in: 150,
            thin: 10,
            seed,
            likelihood_every: 1,
        }
    }

    #[test]
    fn config_validation() {
        let corpus = corpus_from(vec![vec![("a", 1)]]);
        assert!(matches!(fit_lda(&corpus, &quick(1, 0)), Err(Error::Config(_))));
        assert!(matches!(fit_lda(&Corpus::default(), &quick(2, 0)), Err(Error::Config(_))));
        let mut c = quick(2, 0);
        c.burn_in = c.iterations;
        assert!(fit_lda(&corpus, &c).is_err());
        assert!((LdaConfig { k: 20, ..Default::default() }.alpha() - 2.5).abs() < 1e-15);
    }

    #[test]
    fn single_word_corpus() {
        let corpus = corpus_from((0..5).map(|_| vec![("a", 4)]).collect());
        let model = fit_lda(&corpus, &quick(2, 3)).unwrap();
        assert!(model.phi.iter().any(|row| row[0] >= 0.99));
        model.validate().unwrap();
    }

    /// Best one-to-one theme/cluster alignment by greedy max mass.
    pub(crate) fn greedy_alignment(model: &TopicModel, cluster_of: impl Fn(&str) -> usize, clusters: usize) -> Vec<f64> {
        let mut mass = vec![vec![0.0; clusters]; model.k];
        for (z, row) in model.phi.iter().enumerate() {
            for (w, p) in row.iter().enumerate() {
                mass[z][cluster_of(&model.vocabulary[w])] += p;
            }
        }
        let mut used_t = vec![false; model.k];
        let mut used_c = vec![false; clusters];
        let mut out = Vec::new();
        for _ in 0..clusters.min(model.k) {
            let mut best = (0, 0, -1.0);
            for z in 0..model.k {
                for c in 0..clusters {
                    if !used_t[z] && !used_c[c] && mass[z][c] > best.2 {
                        best = (z, c, mass[z][c]);
                    }
                }
            }
            used_t[best.0] = true;
            used_c[best.1] = true;
            out.push(best.2);
        }
        out
    }

    #[test]
    fn two_planted_clusters() {
        let mut docs = Vec::new();
        for i in 0..10u32 {
            docs.push(vec![("a1", 1 + i % 3), ("a2", 2), ("a3", 1), ("a4", 1 + i % 2)]);
            docs.push(vec![("b1", 2), ("b2", 1 + i % 2), ("b3", 1), ("b4", 1 + i % 3)]);
        }
        let corpus = corpus_from(docs);
        let model = fit_lda(&corpus, &quick(2, 11)).unwrap();
        let masses = greedy_alignment(&model, |k| usize::from(k.starts_with('b')), 2);
        assert!(masses.iter().all(|&m| m >= 0.9), "{masses:?}");
    }

    #[test]
    fn counts_stay_consistent() {
        let corpus = corpus_from(vec![vec![("a", 3), ("b", 1)], vec![("b", 2), ("c", 5)]]);
        let mut state = GibbsState::new(&corpus, 3, 0.5, 0.1, 9).unwrap();
        for _ in 0..20 {
            state.sweep();
            assert!(state.check_consistency());
        }
        assert_eq!(state.iteration(), 20);
    }

    #[test]
    fn rows_are_distributions() {
        let corpus = corpus_from(vec![vec![("a", 3), ("b", 1)], vec![("b", 2), ("c", 5)], vec![("c", 1)]]);
        let model = fit_lda(&corpus, &quick(3, 5)).unwrap();
        model.validate().unwrap();
        assert_eq!(model.theta.len(), 3);
        assert_eq!(model.samples, 15);
    }

    #[test]
    fn same_seed_same_model() {
        let corpus = corpus_from(vec![vec![("a", 3), ("b", 1)], vec![("b", 2), ("c", 5)]]);
        let a = fit_lda(&corpus, &quick(2, 42)).unwrap();
        let b = fit_lda(&corpus, &quick(2, 42)).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn exclusive_ownership_gives_one_hot() {
        let model = model_from_phi(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.5, 0.5]);
        let d = song_theme_distribution(&model, "s1", Inversion::Bayes).unwrap();
        assert_eq!(d.p, vec![0.0, 1.0]);
    }

    #[test]
    fn bayes_inversion_value() {
        let model = model_from_phi(vec![vec![0.2, 0.8], vec![0.1, 0.9]], vec![0.5, 0.5]);
        let d = song_theme_distribution(&model, "s0", Inversion::Bayes).unwrap();
        assert!((d.p[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((d.p[1] - 1.0 / 3.0).abs() < 1e-12);
        let skewed = model_from_phi(vec![vec![0.2, 0.8], vec![0.1, 0.9]], vec![0.25, 0.75]);
        let b = song_theme_distribution(&skewed, "s0", Inversion::Bayes).unwrap();
        // 0.05 : 0.075
        assert!((b.p[0] - 0.4).abs() < 1e-12);
        let c = song_theme_distribution(&skewed, "s0", Inversion::Column).unwrap();
        assert!((c.p[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!(matches!(
            song_theme_distribution(&model, "zzz", Inversion::Bayes),
            Err(Error::UnknownSong(_))
        ));
    }

    #[test]
    fn unseen_word_in_a_theme_stays_positive() {
        // "b" only ever co-occurs with itself; beta smoothing keeps every entry > 0.
        let corpus = corpus_from(vec![vec![("a", 5)], vec![("a", 4)], vec![("b", 1)]]);
        let model = fit_lda(&corpus, &quick(3, 1)).unwrap();
        for key in ["a", "b"] {
            let d = song_theme_distribution(&model, key, Inversion::Bayes).unwrap();
            assert!(d.p.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn eq1_examples() {
        let x = [0.3, 0.7];
        assert_eq!(taste_similarity(&x, &x).unwrap(), 1.0);
        assert_eq!(taste_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        // 0.5 / (sqrt(0.5) * sqrt(0.625))
        let expected = 0.5 / (0.5f64.sqrt() * 0.625f64.sqrt());
        let got = taste_similarity(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
        assert!((got - expected).abs() < 1e-15);
        assert!((got - 0.894427).abs() < 1e-6);
        assert!(matches!(taste_similarity(&[0.0, 0.0], &x), Err(Error::UndefinedSimilarity)));
    }

    #[test]
    fn checkpoint_round_trip() {
        let corpus = corpus_from(vec![vec![("a", 3), ("b", 1)], vec![("b", 2), ("c", 5)]]);
        let model = fit_lda(&corpus, &quick(2, 4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.lda");
        model.save(&p).unwrap();
        assert_eq!(TopicModel::load(&p).unwrap(), model);
        model.write_theta_csv(&dir.path().join("theta.csv")).unwrap();
        model.write_phi_csv(&dir.path().join("phi.csv")).unwrap();
        let phi = std::fs::read_to_string(dir.path().join("phi.csv")).unwrap();
        assert_eq!(phi.lines().count(), 4);
    }
}
