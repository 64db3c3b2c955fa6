//! Labeled examples, label balancing, stratified splits and train-set
//! subsampling.
//!
//! The canonical record file is newline-delimited JSON, one object per line:
//!
//! ```json
//! {"id": 7, "text": "Burn all government buildings !", "span_start": 0, "span_end": 1,
//!  "label": "metaphor", "lang": "en", "dataset": "lcc",
//!  "source_domain": "FIRE", "target_domain": "ANGER"}
//! ```
//!
//! Spans are half-open word intervals over the whitespace-separated words of
//! `text`. Label indices follow the sorted order of the distinct label names.

use std::collections::{BTreeSet, HashSet};
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::activation::ActivationSet;
use crate::rng::substream;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub id: u64,
    pub text: String,
    pub span_start: usize,
    pub span_end: usize,
    pub label: String,
    #[serde(default)]
    pub label_index: usize,
    pub lang: String,
    pub dataset: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_domain: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_domain: Option<String>,
}

impl LabeledExample {
    pub fn word_count(&self) -> usize {
        self.text.split_whitespace().count()
    }

    fn check_span(&self) -> Result<()> {
        let words = self.word_count();
        if self.span_start >= self.span_end || self.span_end > words {
            return Err(Error::invalid(format!(
                "example {}: span [{}, {}) out of bounds for {words} words",
                self.id, self.span_start, self.span_end
            )));
        }
        Ok(())
    }
}

/// Examples plus the label map (`labels[i]` is the name of class `i`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub labels: Vec<String>,
    pub examples: Vec<LabeledExample>,
}

impl Corpus {
    /// Builds a corpus whose label map is the sorted set of label names.
    pub fn new(examples: Vec<LabeledExample>) -> Result<Self> {
        let labels: Vec<String> = examples
            .iter()
            .map(|e| e.label.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        Self::with_labels(labels, examples)
    }

    /// Builds a corpus with an explicit label map. Labels absent from the
    /// examples are allowed here and rejected by [`balance_and_split`].
    pub fn with_labels(labels: Vec<String>, mut examples: Vec<LabeledExample>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(examples.len());
        for e in &mut examples {
            e.check_span()?;
            if !seen.insert(e.id) {
                return Err(Error::invalid(format!("duplicate example id {}", e.id)));
            }
            e.label_index = labels
                .iter()
                .position(|l| *l == e.label)
                .ok_or_else(|| Error::invalid(format!("example {}: unknown label {:?}", e.id, e.label)))?;
        }
        Ok(Corpus { labels, examples })
    }

    /// One placeholder example per activation record, labeled by class index.
    /// Lets activation files without a record file go through the same
    /// balancing and splitting.
    pub fn from_activations(set: &ActivationSet, dataset: &str, lang: &str) -> Result<Self> {
        let labels: Vec<String> = (0..set.header().num_classes).map(|k| format!("class{k}")).collect();
        let examples = set
            .records()
            .map(|r| {
                let r = r?;
                Ok(LabeledExample {
                    id: r.example_id,
                    text: "span".into(),
                    span_start: 0,
                    span_end: 1,
                    label: labels[r.label as usize].clone(),
                    label_index: r.label as usize,
                    lang: lang.into(),
                    dataset: dataset.into(),
                    source_domain: None,
                    target_domain: None,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::with_labels(labels, examples)
    }
}

/// Reads a canonical record file.
pub fn load_examples(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut examples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let example: LabeledExample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        examples.push(example);
    }
    Corpus::new(examples)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ratios {
    pub train: f64,
    pub dev: f64,
    pub test: f64,
}

impl Default for Ratios {
    fn default() -> Self {
        Ratios {
            train: 0.7,
            dev: 0.1,
            test: 0.2,
        }
    }
}

impl Ratios {
    pub fn validate(&self) -> Result<()> {
        let all = [self.train, self.dev, self.test];
        if all.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::invalid("split ratios must be positive"));
        }
        if (all.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("split ratios must sum to 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSplits {
    pub labels: Vec<String>,
    pub seed: u64,
    pub ratios: Ratios,
    pub train: Vec<LabeledExample>,
    pub dev: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
}

fn ids(xs: &[LabeledExample]) -> Vec<u64> {
    xs.iter().map(|e| e.id).collect()
}

impl CorpusSplits {
    pub fn train_ids(&self) -> Vec<u64> {
        ids(&self.train)
    }

    pub fn dev_ids(&self) -> Vec<u64> {
        ids(&self.dev)
    }

    pub fn test_ids(&self) -> Vec<u64> {
        ids(&self.test)
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    /// Examples per class in `split`.
    pub fn class_counts(&self, split: &[LabeledExample]) -> Vec<usize> {
        let mut counts = vec![0; self.labels.len()];
        for e in split {
            counts[e.label_index] += 1;
        }
        counts
    }

    /// Ids shared by any two splits.
    pub fn overlap(&self) -> Vec<u64> {
        let train: HashSet<u64> = self.train_ids().into_iter().collect();
        let dev: HashSet<u64> = self.dev_ids().into_iter().collect();
        let mut shared: BTreeSet<u64> = BTreeSet::new();
        for e in &self.dev {
            if train.contains(&e.id) {
                shared.insert(e.id);
            }
        }
        for e in &self.test {
            if train.contains(&e.id) || dev.contains(&e.id) {
                shared.insert(e.id);
            }
        }
        shared.into_iter().collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_vec_pretty(self).map_err(|e| Error::invalid(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
            line: e.line(),
            message: format!("{}: {e}", path.display()),
        })
    }
}

/// Downsamples every class to the minority count, then splits each class by
/// `ratios` so every split is exactly balanced. Deterministic in `seed`.
pub fn balance_and_split(corpus: &Corpus, ratios: Ratios, seed: u64) -> Result<CorpusSplits> {
    ratios.validate()?;
    if corpus.labels.len() < 2 {
        return Err(Error::invalid("balancing needs at least 2 classes"));
    }
    let mut by_class: Vec<Vec<&LabeledExample>> = vec![Vec::new(); corpus.labels.len()];
    for e in &corpus.examples {
        by_class[e.label_index].push(e);
    }
    if let Some(k) = by_class.iter().position(|c| c.is_empty()) {
        return Err(Error::invalid(format!("class {:?} has no examples", corpus.labels[k])));
    }
    let keep = by_class.iter().map(Vec::len).min().unwrap_or(0);
    let cut_train = ((ratios.train * keep as f64).round() as usize).min(keep);
    let cut_dev = (((ratios.train + ratios.dev) * keep as f64).round() as usize).clamp(cut_train, keep);

    let (mut train, mut dev, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (k, members) in by_class.iter_mut().enumerate() {
        members.shuffle(&mut substream(seed, "balance", k as u64));
        members.truncate(keep);
        train.extend(members[..cut_train].iter().map(|e| (*e).clone()));
        dev.extend(members[cut_train..cut_dev].iter().map(|e| (*e).clone()));
        test.extend(members[cut_dev..].iter().map(|e| (*e).clone()));
    }
    for (s, split) in [&mut train, &mut dev, &mut test].into_iter().enumerate() {
        split.shuffle(&mut substream(seed, "split-order", s as u64));
    }
    Ok(CorpusSplits {
        labels: corpus.labels.clone(),
        seed,
        ratios,
        train,
        dev,
        test,
    })
}

/// Class-stratified subsample of the train split to exactly `n` examples,
/// keeping the original order. Dev and test are untouched.
pub fn subsample_train(splits: &CorpusSplits, n: usize, seed: u64) -> Result<CorpusSplits> {
    let total = splits.train.len();
    if n > total {
        return Err(Error::invalid(format!(
            "requested train size {n} exceeds current train size {total}"
        )));
    }
    let counts = splits.class_counts(&splits.train);
    let quotas = stratified_quotas(&counts, n);

    let mut keep = vec![false; total];
    for (k, &quota) in quotas.iter().enumerate() {
        let mut members: Vec<usize> = (0..total).filter(|&i| splits.train[i].label_index == k).collect();
        members.shuffle(&mut substream(seed, "subsample", k as u64));
        for &i in &members[..quota] {
            keep[i] = true;
        }
    }
    let mut out = splits.clone();
    out.train = splits
        .train
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(e, _)| e.clone())
        .collect();
    Ok(out)
}

/// Largest-remainder allocation of `n` over classes proportional to
/// `counts`; remainder ties go to the lower class index.
fn stratified_quotas(counts: &[usize], n: usize) -> Vec<usize> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return vec![0; counts.len()];
    }
    let mut quotas: Vec<usize> = counts.iter().map(|&c| n * c / total).collect();
    let mut left = n - quotas.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by_key(|&k| (std::cmp::Reverse(n * counts[k] % total), k));
    for k in order {
        if left == 0 {
            break;
        }
        if quotas[k] < counts[k] {
            quotas[k] += 1;
            left -= 1;
        }
    }
    quotas
}
