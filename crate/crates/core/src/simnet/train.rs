use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{ChannelStats, FeatureTensor, TensorLayout};
use crate::pairs::{PairSample, Split};

use super::network::{backward, forward_batch, mse, predict, PairInput};
use super::{Architecture, NetworkParams};

pub const CHECKPOINT_FORMAT: &str = "tastesim-net";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Sgd,
    Momentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Optimizer {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: Optimizer,
    /// Seeds both initialisation and batch shuffling.
    pub seed: u64,
    /// Stop after this many epochs without a new best validation loss.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            batch_size: 32,
            epochs: 100,
            optimizer: Optimizer::Sgd,
            seed: 0,
            patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be non-negative, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.patience == Some(0) {
            return Err(Error::Config("patience must be positive".into()));
        }
        match self.optimizer {
            Optimizer::Momentum { momentum } if !(0.0..1.0).contains(&momentum) => {
                Err(Error::Config("momentum must lie in [0, 1)".into()))
            }
            Optimizer::Adam { beta1, beta2, eps }
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps.is_nan()
                    || eps <= 0.0 =>
            {
                Err(Error::Config("adam betas must lie in [0, 1) and eps must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Optimizer moments, persisted with checkpoints.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

impl OptimizerState {
    fn apply(&mut self, optimizer: Optimizer, lr: f64, params: &mut NetworkParams, grads: &[f64]) {
        self.step += 1;
        let values = params.values_mut();
        match optimizer {
            Optimizer::Sgd => {
                for (v, g) in values.iter_mut().zip(grads) {
                    *v -= lr * g;
                }
            }
            Optimizer::Momentum { momentum } => {
                self.first.resize(values.len(), 0.0);
                for ((v, g), m) in values.iter_mut().zip(grads).zip(&mut self.first) {
                    *m = momentum * *m + g;
                    *v -= lr * *m;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                self.first.resize(values.len(), 0.0);
                self.second.resize(values.len(), 0.0);
                let c1 = 1.0 - beta1.powi(self.step as i32);
                let c2 = 1.0 - beta2.powi(self.step as i32);
                for (((v, g), m), s) in values.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *s = beta2 * *s + (1.0 - beta2) * g * g;
                    *v -= lr * (*m / c1) / ((*s / c2).sqrt() + eps);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_mse: f64,
    pub validation_mse: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation loss (train loss when
    /// there is no validation split).
    pub params: NetworkParams,
    /// Parameters after the last epoch.
    pub last_params: NetworkParams,
    pub optimizer_state: OptimizerState,
    /// Row 0 holds the losses of the initial parameters.
    pub history: Vec<EpochLoss>,
    pub best_epoch: usize,
    pub best_loss: f64,
}

fn inputs<'a>(
    pairs: &[&'a PairSample],
    tensors: &'a HashMap<String, FeatureTensor>,
) -> Result<Vec<PairInput<'a>>> {
    pairs
        .iter()
        .map(|p| {
            let x = tensors.get(&p.song_x).ok_or_else(|| Error::UnknownSong(p.song_x.clone()))?;
            let y = tensors.get(&p.song_y).ok_or_else(|| Error::UnknownSong(p.song_y.clone()))?;
            Ok(PairInput {
                x: &x.values,
                y: &y.values,
                label: p.label,
            })
        })
        .collect()
}

fn batch_mse(params: &NetworkParams, batch: &[PairInput]) -> Result<Option<f64>> {
    if batch.is_empty() {
        return Ok(None);
    }
    let preds = batch.iter().map(|p| predict(params, p.x, p.y)).collect::<Result<Vec<_>>>()?;
    let labels: Vec<f64> = batch.iter().map(|p| p.label).collect();
    Ok(Some(mse(&preds, &labels)))
}

/// MSE of `params` on the pairs of one split, `None` when the split is empty.
pub fn evaluate(
    params: &NetworkParams,
    pairs: &[PairSample],
    tensors: &HashMap<String, FeatureTensor>,
    split: Split,
) -> Result<Option<f64>> {
    let selected: Vec<&PairSample> = pairs.iter().filter(|p| p.split == split).collect();
    batch_mse(params, &inputs(&selected, tensors)?)
}

/// Mini-batch training on the train split, recording train and validation
/// MSE after every epoch.
pub fn train(
    pairs: &[PairSample],
    tensors: &HashMap<String, FeatureTensor>,
    architecture: &Architecture,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let train_pairs: Vec<&PairSample> = pairs.iter().filter(|p| p.split == Split::Train).collect();
    let val_pairs: Vec<&PairSample> = pairs.iter().filter(|p| p.split == Split::Validation).collect();
    if train_pairs.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let train_in = inputs(&train_pairs, tensors)?;
    let val_in = inputs(&val_pairs, tensors)?;

    let mut params = NetworkParams::init(architecture.clone(), config.seed);
    let mut state = OptimizerState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let mut order: Vec<usize> = (0..train_in.len()).collect();

    let score = |h: &EpochLoss| h.validation_mse.unwrap_or(h.train_mse);
    let initial = EpochLoss {
        epoch: 0,
        train_mse: batch_mse(&params, &train_in)?.expect("non-empty"),
        validation_mse: batch_mse(&params, &val_in)?,
    };
    let mut best = (params.clone(), 0, score(&initial));
    let mut history = vec![initial];
    let mut since_best = 0;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<PairInput> = chunk.iter().map(|&i| train_in[i]).collect();
            let traces = forward_batch(&params, &batch)?;
            let grads = backward(&params, &batch, &traces)?;
            if let Some(bad) = grads.values.iter().position(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!("non-finite gradient at parameter {bad}"),
                });
            }
            if config.learning_rate > 0.0 {
                state.apply(config.optimizer, config.learning_rate, &mut params, &grads.values);
            }
        }
        let row = EpochLoss {
            epoch,
            train_mse: batch_mse(&params, &train_in)?.expect("non-empty"),
            validation_mse: batch_mse(&params, &val_in)?,
        };
        if !row.train_mse.is_finite() || row.validation_mse.is_some_and(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                epoch,
                detail: format!("train mse {}, validation mse {:?}", row.train_mse, row.validation_mse),
            });
        }
        log::debug!("epoch {epoch}: train {:.6} validation {:?}", row.train_mse, row.validation_mse);
        history.push(row);
        if score(&row) < best.2 {
            best = (params.clone(), epoch, score(&row));
            since_best = 0;
        } else {
            since_best += 1;
            if config.patience.is_some_and(|p| since_best >= p) {
                log::info!("early stop at epoch {epoch}, best epoch {}", best.1);
                break;
            }
        }
    }

    Ok(TrainOutcome {
        params: best.0,
        last_params: params,
        optimizer_state: state,
        history,
        best_epoch: best.1,
        best_loss: best.2,
    })
}

pub fn write_history_csv(path: &Path, history: &[EpochLoss]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "train_mse", "validation_mse"])?;
    for h in history {
        w.write_record([
            h.epoch.to_string(),
            h.train_mse.to_string(),
            h.validation_mse.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_history_csv(path: &Path) -> Result<Vec<EpochLoss>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = || Error::Parse {
            line: i + 2,
            message: "bad loss history row".into(),
        };
        out.push(EpochLoss {
            epoch: rec.get(0).and_then(|s| s.parse().ok()).ok_or_else(bad)?,
            train_mse: rec.get(1).and_then(|s| s.parse().ok()).ok_or_else(bad)?,
            validation_mse: match rec.get(2) {
                Some("") | None => None,
                Some(s) => Some(s.parse().map_err(|_| bad())?),
            },
        });
    }
    Ok(out)
}

/// Everything needed to resume training or score new pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetCheckpoint {
    pub format: String,
    pub version: u32,
    pub params: NetworkParams,
    pub optimizer: Optimizer,
    pub optimizer_state: OptimizerState,
    pub seed: u64,
    pub epoch: usize,
    pub best_validation: f64,
    #[serde(default)]
    pub layout: Option<TensorLayout>,
    #[serde(default)]
    pub channel_stats: Option<ChannelStats>,
}

impl NetCheckpoint {
    pub fn new(outcome: &TrainOutcome, config: &TrainConfig) -> NetCheckpoint {
        NetCheckpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            params: outcome.params.clone(),
            optimizer: config.optimizer,
            optimizer_state: outcome.optimizer_state.clone(),
            seed: config.seed,
            epoch: outcome.best_epoch,
            best_validation: outcome.best_loss,
            layout: None,
            channel_stats: None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer(&mut w, self)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<NetCheckpoint> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let ckpt: NetCheckpoint = serde_json::from_reader(BufReader::new(file))?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint container {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        // Re-validate shapes and finiteness.
        let params = NetworkParams::from_values(ckpt.params.architecture().clone(), ckpt.params.values().to_vec())?;
        Ok(NetCheckpoint { params, ..ckpt })
    }
}

#[cfg(test)]
mod tests {
    use super::super::ArchitectureConfig;
    use super::*;

    fn tensor(key: &str, seed: u64) -> FeatureTensor {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureTensor {
            song_key: key.into(),
            channels: 2,
            length: 16,
            values: (0..32).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    fn small_arch() -> Architecture {
        ArchitectureConfig {
            conv: vec![super::super::ConvConfig { channels: 3, kernel: 3, pool: 2 }],
            hidden: vec![8],
            output: 4,
            ..Default::default()
        }
        .resolve(2, 16)
        .unwrap()
    }

    fn pair(x: &str, y: &str, label: f64, split: Split) -> PairSample {
        PairSample { song_x: x.into(), song_y: y.into(), label, split }
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let tensors: HashMap<_, _> = [("a", 1), ("b", 2)].iter().map(|(k, s)| (k.to_string(), tensor(k, *s))).collect();
        let pairs = [pair("a", "b", 0.5, Split::Train)];
        let cfg = TrainConfig { learning_rate: 0.0, epochs: 5, seed: 3, ..Default::default() };
        let out = train(&pairs, &tensors, &small_arch(), &cfg).unwrap();
        assert_eq!(out.last_params, NetworkParams::init(small_arch(), 3));
        assert!(out.history.windows(2).all(|w| w[0].train_mse == w[1].train_mse));
    }

    #[test]
    fn single_pair_memorization() {
        let tensors: HashMap<_, _> = [("a", 1), ("b", 2)].iter().map(|(k, s)| (k.to_string(), tensor(k, *s))).collect();
        let pairs = [pair("a", "b", 0.3, Split::Train)];
        let cfg = TrainConfig { learning_rate: 0.01, epochs: 300, optimizer: Optimizer::adam(), seed: 1, ..Default::default() };
        let out = train(&pairs, &tensors, &small_arch(), &cfg).unwrap();
        assert!(out.history.last().unwrap().train_mse < 1e-4, "{:?}", out.history.last());
        assert!(out.best_loss < 1e-4);
    }

    #[test]
    fn deterministic_history_and_momentum_runs() {
        let tensors: HashMap<_, _> = (0..6).map(|i| (format!("s{i}"), tensor(&format!("s{i}"), i))).collect();
        let pairs: Vec<_> = (0..5)
            .map(|i| pair(&format!("s{i}"), &format!("s{}", i + 1), 0.2 * i as f64, if i < 4 { Split::Train } else { Split::Validation }))
            .collect();
        for opt in [Optimizer::Sgd, Optimizer::Momentum { momentum: 0.9 }, Optimizer::adam()] {
            let cfg = TrainConfig { learning_rate: 0.01, epochs: 4, batch_size: 2, optimizer: opt, seed: 7, patience: None };
            let a = train(&pairs, &tensors, &small_arch(), &cfg).unwrap();
            let b = train(&pairs, &tensors, &small_arch(), &cfg).unwrap();
            assert_eq!(a.history, b.history);
            assert_eq!(a.history.len(), 5);
            assert!(a.history.iter().all(|h| h.validation_mse.is_some()));
        }
    }

    #[test]
    fn missing_tensor_and_bad_config() {
        let tensors: HashMap<String, FeatureTensor> = HashMap::new();
        let pairs = [pair("a", "b", 0.5, Split::Train)];
        assert!(matches!(train(&pairs, &tensors, &small_arch(), &TrainConfig::default()), Err(Error::UnknownSong(_))));
        let cfg = TrainConfig { batch_size: 0, ..Default::default() };
        assert!(train(&pairs, &tensors, &small_arch(), &cfg).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let tensors: HashMap<_, _> = [("a", 1), ("b", 2)].iter().map(|(k, s)| (k.to_string(), tensor(k, *s))).collect();
        let pairs = [pair("a", "b", 0.3, Split::Train)];
        let cfg = TrainConfig { learning_rate: 1e300, epochs: 50, seed: 1, ..Default::default() };
        match train(&pairs, &tensors, &small_arch(), &cfg) {
            Err(Error::Divergence { .. }) => {}
            other => panic!("expected divergence, got {:?}", other.map(|o| o.history.last().copied())),
        }
    }

    #[test]
    fn checkpoint_and_history_round_trip() {
        let tensors: HashMap<_, _> = [("a", 1), ("b", 2)].iter().map(|(k, s)| (k.to_string(), tensor(k, *s))).collect();
        let pairs = [pair("a", "b", 0.3, Split::Train)];
        let cfg = TrainConfig { epochs: 3, optimizer: Optimizer::adam(), ..Default::default() };
        let out = train(&pairs, &tensors, &small_arch(), &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let ck = NetCheckpoint::new(&out, &cfg);
        ck.save(&dir.path().join("net.ckpt")).unwrap();
        let back = NetCheckpoint::load(&dir.path().join("net.ckpt")).unwrap();
        assert_eq!(back, ck);
        write_history_csv(&dir.path().join("h.csv"), &out.history).unwrap();
        assert_eq!(read_history_csv(&dir.path().join("h.csv")).unwrap(), out.history);
    }
}
