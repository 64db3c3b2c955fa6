//! Seed-averaged edge probing and source x target transfer matrices.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::activation::{ActivationSet, RecordSet};
use crate::corpus::{subsample_train, CorpusSplits};
use crate::probe::{evaluate_accuracy, train_probe, ProbeConfig};
use crate::rng::derive_seed;
use crate::{Error, Result};

pub const DEFAULT_SEEDS: [u64; 3] = [1, 2, 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightsMode {
    Pretrained,
    Randomized,
}

impl WeightsMode {
    pub const BOTH: [WeightsMode; 2] = [WeightsMode::Pretrained, WeightsMode::Randomized];

    pub fn as_str(self) -> &'static str {
        match self {
            WeightsMode::Pretrained => "pretrained",
            WeightsMode::Randomized => "randomized",
        }
    }
}

impl fmt::Display for WeightsMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for WeightsMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrained" => Ok(WeightsMode::Pretrained),
            "randomized" => Ok(WeightsMode::Randomized),
            other => Err(Error::invalid(format!("unknown weights mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DistributionKey {
    pub dataset: String,
    pub lang: String,
    pub encoder: String,
    pub weights_mode: WeightsMode,
}

impl DistributionKey {
    pub fn new(dataset: &str, lang: &str, encoder: &str, weights_mode: WeightsMode) -> Self {
        DistributionKey {
            dataset: dataset.into(),
            lang: lang.into(),
            encoder: encoder.into(),
            weights_mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.is_empty() || self.lang.is_empty() || self.encoder.is_empty() {
            return Err(Error::Config(format!("distribution key has an empty tag: {self}")));
        }
        Ok(())
    }

    pub fn with_mode(&self, weights_mode: WeightsMode) -> Self {
        DistributionKey {
            weights_mode,
            ..self.clone()
        }
    }

    /// `dataset/lang/encoder`, without the weights mode.
    pub fn name(&self) -> String {
        format!("{}/{}/{}", self.dataset, self.lang, self.encoder)
    }

    /// Same corpus (dataset and language), so example ids are comparable.
    pub fn same_corpus(&self, other: &DistributionKey) -> bool {
        self.dataset == other.dataset && self.lang == other.lang
    }
}

impl fmt::Display for DistributionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{}]", self.name(), self.weights_mode)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeProbeResult {
    pub mean_accuracy: f64,
    pub accuracies: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Final-epoch training loss per seed, in bits.
    pub final_losses: Vec<f64>,
}

fn check_disjoint(train: &RecordSet, test: &RecordSet) -> Result<()> {
    let train_ids: HashSet<u64> = train.records.iter().map(|r| r.example_id).collect();
    let shared: Vec<u64> = test
        .records
        .iter()
        .map(|r| r.example_id)
        .filter(|id| train_ids.contains(id))
        .collect();
    match shared.first() {
        Some(&first) => Err(Error::Leakage {
            count: shared.len(),
            first,
        }),
        None => Ok(()),
    }
}

fn probe_once(train: &RecordSet, test: &RecordSet, config: &ProbeConfig, seed: u64) -> Result<(f64, f64)> {
    let (params, report) = train_probe(train, config, seed)?;
    let accuracy = evaluate_accuracy(&params, test, config)?;
    Ok((accuracy, report.epoch_losses.last().copied().unwrap_or(f64::NAN)))
}

fn aggregate(seeds: &[u64], runs: Vec<(f64, f64)>) -> EdgeProbeResult {
    let accuracies: Vec<f64> = runs.iter().map(|r| r.0).collect();
    EdgeProbeResult {
        mean_accuracy: accuracies.iter().sum::<f64>() / accuracies.len() as f64,
        final_losses: runs.iter().map(|r| r.1).collect(),
        accuracies,
        seeds: seeds.to_vec(),
    }
}

/// Trains one probe per seed on `train`, evaluates each on `test`.
///
/// Train and test are expected to come from the same corpus, so shared
/// example ids abort the run.
pub fn run_edge_probe(train: &RecordSet, test: &RecordSet, config: &ProbeConfig, seeds: &[u64]) -> Result<EdgeProbeResult> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    check_disjoint(train, test)?;
    let runs = config.exec.try_map(seeds, |&s| probe_once(train, test, config, s))?;
    Ok(aggregate(seeds, runs))
}

/// Train/test records of one distribution.
#[derive(Debug, Clone)]
pub struct TransferSplit {
    pub train: RecordSet,
    pub test: RecordSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferCell {
    /// Source and target without weights mode applied; see `weights_mode`.
    pub source: DistributionKey,
    pub target: DistributionKey,
    pub weights_mode: WeightsMode,
    pub result: EdgeProbeResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub sources: Vec<DistributionKey>,
    pub targets: Vec<DistributionKey>,
    pub train_size: usize,
    pub seeds: Vec<u64>,
    pub cells: Vec<TransferCell>,
}

impl TransferMatrix {
    pub fn cell(&self, source: &DistributionKey, target: &DistributionKey, mode: WeightsMode) -> Option<&TransferCell> {
        self.cells.iter().find(|c| {
            c.weights_mode == mode && c.source.with_mode(mode) == source.with_mode(mode) && c.target.with_mode(mode) == target.with_mode(mode)
        })
    }
}

/// Every (source, target, weights mode) cell: train on the source's train
/// split, test on the target's test split, all cells sharing config, seeds
/// and train size. Sources and targets are the pretrained keys; each must
/// have a randomized counterpart.
pub fn run_transfer_matrix(sets: &BTreeMap<DistributionKey, TransferSplit>, config: &ProbeConfig, seeds: &[u64]) -> Result<TransferMatrix> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let keys: Vec<DistributionKey> = sets
        .keys()
        .filter(|k| k.weights_mode == WeightsMode::Pretrained)
        .cloned()
        .collect();
    if keys.is_empty() {
        return Err(Error::Config("transfer needs at least one pretrained distribution".into()));
    }
    for key in sets.keys() {
        key.validate()?;
        for mode in WeightsMode::BOTH {
            if !sets.contains_key(&key.with_mode(mode)) {
                return Err(Error::Config(format!("{key} has no {mode} counterpart")));
            }
        }
    }
    let train_size = sets.values().next().map(|s| s.train.len()).unwrap_or(0);
    if let Some((k, _)) = sets.iter().find(|(_, s)| s.train.len() != train_size) {
        return Err(Error::Config(format!(
            "train sizes differ ({k} has {}, expected {train_size}); equalize with subsample_train first",
            sets[k].train.len()
        )));
    }

    let mut cells = Vec::new();
    for source in &keys {
        for target in &keys {
            for mode in WeightsMode::BOTH {
                cells.push((source.clone(), target.clone(), mode));
            }
        }
    }
    for (s, t, mode) in &cells {
        let (train, test) = (&sets[&s.with_mode(*mode)].train, &sets[&t.with_mode(*mode)].test);
        if (train.num_layers, train.hidden_dim, train.num_classes) != (test.num_layers, test.hidden_dim, test.num_classes) {
            return Err(Error::Config(format!("{s} and {t} have incompatible shapes")));
        }
        if s.same_corpus(t) {
            check_disjoint(train, test)?;
        }
    }

    let jobs: Vec<(usize, u64)> = (0..cells.len()).flat_map(|c| seeds.iter().map(move |&s| (c, s))).collect();
    let runs = config.exec.try_map(&jobs, |&(c, seed)| {
        let (s, t, mode) = &cells[c];
        probe_once(&sets[&s.with_mode(*mode)].train, &sets[&t.with_mode(*mode)].test, config, seed)
    })?;
    let cells = cells
        .into_iter()
        .zip(runs.chunks(seeds.len()))
        .map(|((source, target, weights_mode), r)| TransferCell {
            source,
            target,
            weights_mode,
            result: aggregate(seeds, r.to_vec()),
        })
        .collect();
    Ok(TransferMatrix {
        sources: keys.clone(),
        targets: keys,
        train_size,
        seeds: seeds.to_vec(),
        cells,
    })
}

/// One distribution in a transfer run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferInput {
    #[serde(flatten)]
    pub key: DistributionKey,
    pub activations: PathBuf,
    pub splits: PathBuf,
}

/// Loads every input, subsampling each train split to `train_size` (or the
/// smallest train split when `None`).
pub fn load_transfer_sets(
    inputs: &[TransferInput],
    train_size: Option<usize>,
    seed: u64,
) -> Result<BTreeMap<DistributionKey, TransferSplit>> {
    let loaded = inputs
        .iter()
        .map(|input| {
            let set = ActivationSet::open(&input.activations)?;
            let splits = CorpusSplits::load(&input.splits)?;
            Ok((input.key.clone(), set, splits))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = match train_size {
        Some(n) => n,
        None => loaded.iter().map(|(_, _, s)| s.train.len()).min().unwrap_or(0),
    };
    let mut out = BTreeMap::new();
    for (key, set, splits) in loaded {
        // Pretrained and randomized files of one corpus share the subsample.
        let sub_seed = derive_seed(seed, "subsample", 0);
        let splits = subsample_train(&splits, n, sub_seed)?;
        let split = TransferSplit {
            train: set.select(&splits.train_ids())?,
            test: set.select(&splits.test_ids())?,
        };
        if out.insert(key.clone(), split).is_some() {
            return Err(Error::Config(format!("duplicate distribution {key}")));
        }
    }
    Ok(out)
}
