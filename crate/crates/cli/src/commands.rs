use std::io::Read;
use std::path::Path;

use layerprobe::activation::{synth_activations, write_activation_set, ActivationSet, SynthSpec};
use layerprobe::corpus::{balance_and_split, load_examples, subsample_train, Corpus, CorpusSplits, Ratios};
use layerprobe::mdl::{layerwise_compression, mdl_probe, DEFAULT_FRACTIONS};
use layerprobe::probe::{LayerMode, ProbeConfig};
use layerprobe::report::{emit_reports, ManifestInput, NamedCurve, NamedEdge, NamedMdl, Results, RunManifest};
use layerprobe::rng::derive_seed;
use layerprobe::selfcheck::{gradient_sweep, naive_online_total, tampered_gradient_error, GradientSweep};
use layerprobe::transfer::{load_transfer_sets, run_edge_probe, run_transfer_matrix, TransferInput, WeightsMode};
use layerprobe::{Error, Result, ENGINE_VERSION};
use serde::Deserialize;

use crate::{PrepArgs, ReportArgs, RunArgs, SynthArgs, TransferArgs};

fn parse_mode(layers: Option<&str>) -> Result<LayerMode> {
    match layers.map(str::trim) {
        None | Some("mix") => Ok(LayerMode::Mix),
        Some(s) => s
            .parse()
            .map(LayerMode::Single)
            .map_err(|_| Error::Config(format!("--layers expects `mix` or a layer index, got {s:?}"))),
    }
}

fn parse_layer_list(layers: Option<&str>) -> Result<Option<Vec<usize>>> {
    let Some(s) = layers else { return Ok(None) };
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Config(format!("--layers expects a comma list of layer indices, got {s:?}")))
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

fn parse_weights_mode(s: Option<&str>) -> Result<Option<WeightsMode>> {
    s.map(str::parse).transpose()
}

fn first_seed(seeds: &[u64]) -> Result<u64> {
    seeds
        .first()
        .copied()
        .ok_or_else(|| Error::Config("--seeds must list at least one seed".into()))
}

fn is_apf(path: &Path) -> Result<bool> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    let mut magic = [0u8; 4];
    Ok(f.read_exact(&mut magic).is_ok() && &magic == layerprobe::activation::MAGIC)
}

fn meta<'a>(set: &'a ActivationSet, key: &str) -> &'a str {
    set.header().metadata.get(key).map(String::as_str).unwrap_or("unknown")
}

/// Weights mode from the file metadata, checked against `--weights-mode`.
fn resolve_weights_mode(set: &ActivationSet, flag: Option<WeightsMode>) -> Result<WeightsMode> {
    let stored = set.header().metadata.get("weights_mode").map(|s| s.parse::<WeightsMode>()).transpose()?;
    match (stored, flag) {
        (Some(s), Some(f)) if s != f => Err(Error::Config(format!(
            "--weights-mode {f} contradicts file metadata ({s})"
        ))),
        (Some(s), _) => Ok(s),
        (None, Some(f)) => Ok(f),
        (None, None) => Ok(WeightsMode::Pretrained),
    }
}

fn run_id(set: &ActivationSet, mode: WeightsMode) -> String {
    format!("{}/{}/{}[{mode}]", meta(set, "dataset"), meta(set, "lang"), meta(set, "encoder"))
}

fn manifest(command: &str, inputs: Vec<ManifestInput>, config: ProbeConfig, out: &Path) -> RunManifest {
    RunManifest {
        command: command.into(),
        inputs,
        config,
        fractions: Vec::new(),
        seeds: Vec::new(),
        layers: None,
        train_size: None,
        weights_mode: None,
        output_dir: out.to_path_buf(),
        engine_version: ENGINE_VERSION.into(),
    }
}

/// Checks resume compatibility and records the manifest before any compute.
fn start(m: &RunManifest) -> Result<()> {
    m.check_resume(&m.output_dir)?;
    m.save(&m.output_dir)?;
    Ok(())
}

pub(crate) fn prep(a: &PrepArgs) -> Result<()> {
    let seed = first_seed(&a.seeds)?;
    let mut m = manifest("prep", vec![ManifestInput::hash("records", &a.input)?], ProbeConfig::default(), &a.out);
    m.seeds = a.seeds.clone();
    m.train_size = a.train_size;
    start(&m)?;
    let corpus = if is_apf(&a.input)? {
        let set = ActivationSet::open(&a.input)?;
        Corpus::from_activations(&set, meta(&set, "dataset"), meta(&set, "lang"))?
    } else {
        load_examples(&a.input)?
    };
    let mut splits = balance_and_split(&corpus, Ratios::default(), seed)?;
    if let Some(n) = a.train_size {
        splits = subsample_train(&splits, n, derive_seed(seed, "subsample", 0))?;
    }
    splits.save(a.out.join("splits.json"))?;
    println!(
        "splits: train {} / dev {} / test {} ({} classes)",
        splits.train.len(),
        splits.dev.len(),
        splits.test.len(),
        splits.num_classes()
    );
    Ok(())
}

struct Loaded {
    set: ActivationSet,
    splits: CorpusSplits,
    config: ProbeConfig,
    weights_mode: WeightsMode,
}

fn load_run(a: &RunArgs, command: &str, mode: LayerMode) -> Result<Loaded> {
    let seed = first_seed(&a.seeds)?;
    let inputs = vec![ManifestInput::hash("activations", &a.input)?, ManifestInput::hash("splits", &a.splits)?];
    let set = ActivationSet::open(&a.input)?;
    let weights_mode = resolve_weights_mode(&set, parse_weights_mode(a.weights_mode.as_deref())?)?;
    let mut splits = CorpusSplits::load(&a.splits)?;
    if splits.num_classes() != set.header().num_classes as usize {
        return Err(Error::Config(format!(
            "splits have {} classes, activation file has {}",
            splits.num_classes(),
            set.header().num_classes
        )));
    }
    if let Some(n) = a.train_size {
        splits = subsample_train(&splits, n, derive_seed(seed, "subsample", 0))?;
    }
    let mut config = ProbeConfig::default()
        .with_classes(set.header().num_classes as usize)
        .with_layer(mode);
    config.seed = seed;
    config.validate(set.header().layers())?;

    let mut m = manifest(command, inputs, config.clone(), &a.out);
    m.seeds = a.seeds.clone();
    m.layers = a.layers.clone();
    m.train_size = a.train_size;
    m.weights_mode = Some(weights_mode);
    m.fractions = a.fractions.clone().unwrap_or_else(|| DEFAULT_FRACTIONS.to_vec());
    start(&m)?;
    Ok(Loaded {
        set,
        splits,
        config,
        weights_mode,
    })
}

pub(crate) fn edge(a: &RunArgs) -> Result<()> {
    let l = load_run(a, "edge", parse_mode(a.layers.as_deref())?)?;
    let train = l.set.select(&l.splits.train_ids())?;
    let test = l.set.select(&l.splits.test_ids())?;
    let result = run_edge_probe(&train, &test, &l.config, &a.seeds)?;
    println!("edge accuracy {:.4} (seeds {:?})", result.mean_accuracy, result.seeds);
    let results = Results {
        edge: vec![NamedEdge {
            run_id: run_id(&l.set, l.weights_mode),
            result,
        }],
        ..Results::default()
    };
    emit_reports(&results, &a.out)?;
    Ok(())
}

fn fractions(a: &RunArgs) -> Vec<f64> {
    a.fractions.clone().unwrap_or_else(|| DEFAULT_FRACTIONS.to_vec())
}

pub(crate) fn mdl(a: &RunArgs) -> Result<()> {
    let l = load_run(a, "mdl", parse_mode(a.layers.as_deref())?)?;
    let fr = fractions(a);
    let id = run_id(&l.set, l.weights_mode);
    let mut results = Results::default();
    for &seed in &a.seeds {
        let report = mdl_probe(&l.set, &l.splits, &l.config, &fr, seed)?;
        println!("seed {seed}: MDL {:.1} bits, compression {:.4}", report.total_mdl_bits, report.compression);
        results.mdl.push(NamedMdl {
            run_id: format!("{id}#seed{seed}"),
            report,
        });
    }
    emit_reports(&results, &a.out)?;
    Ok(())
}

pub(crate) fn mdl_layers(a: &RunArgs) -> Result<()> {
    let layers = parse_layer_list(a.layers.as_deref())?;
    let l = load_run(a, "mdl-layers", LayerMode::Mix)?;
    let fr = fractions(a);
    let id = run_id(&l.set, l.weights_mode);
    let mut results = Results::default();
    for &seed in &a.seeds {
        let curve = layerwise_compression(&l.set, &l.splits, &l.config, &fr, seed, layers.as_deref())?;
        println!(
            "seed {seed}: best layer {} (compression {:.4})",
            curve.best_layer,
            curve.at(curve.best_layer).unwrap_or(f64::NAN)
        );
        results.curves.push(NamedCurve {
            run_id: format!("{id}#seed{seed}"),
            curve,
        });
    }
    emit_reports(&results, &a.out)?;
    Ok(())
}

#[derive(Debug, Deserialize)]
struct TransferManifest {
    inputs: Vec<TransferInput>,
}

pub(crate) fn transfer(a: &TransferArgs) -> Result<()> {
    let seed = first_seed(&a.seeds)?;
    let bytes = std::fs::read(&a.input).map_err(|e| Error::Io {
        path: a.input.clone(),
        source: e,
    })?;
    let spec: TransferManifest = serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
        line: e.line(),
        message: format!("{}: {e}", a.input.display()),
    })?;
    let mut inputs = vec![ManifestInput::hash("runs", &a.input)?];
    for t in &spec.inputs {
        let name = t.key.to_string();
        inputs.push(ManifestInput::hash(&format!("{name}:activations"), &t.activations)?);
        inputs.push(ManifestInput::hash(&format!("{name}:splits"), &t.splits)?);
    }
    let sets = load_transfer_sets(&spec.inputs, a.train_size, seed)?;
    let first = sets
        .values()
        .next()
        .ok_or_else(|| Error::Config("transfer manifest lists no inputs".into()))?;
    let mut config = ProbeConfig::default()
        .with_classes(first.train.num_classes)
        .with_layer(parse_mode(a.layers.as_deref())?);
    config.seed = seed;
    let mut m = manifest("transfer", inputs, config.clone(), &a.out);
    m.seeds = a.seeds.clone();
    m.layers = a.layers.clone();
    m.train_size = a.train_size;
    start(&m)?;
    let matrix = run_transfer_matrix(&sets, &config, &a.seeds)?;
    println!("transfer: {} cells at train size {}", matrix.cells.len(), matrix.train_size);
    let results = Results {
        transfer: vec![matrix],
        ..Results::default()
    };
    emit_reports(&results, &a.out)?;
    Ok(())
}

pub(crate) fn report(a: &ReportArgs) -> Result<()> {
    let mut inputs = Vec::new();
    let mut merged = Results::default();
    for dir in &a.input {
        let path = dir.join("results.json");
        inputs.push(ManifestInput::hash(&dir.display().to_string(), &path)?);
        merged.merge(Results::load(&path)?);
    }
    start(&manifest("report", inputs, ProbeConfig::default(), &a.out))?;
    for p in emit_reports(&merged, &a.out)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}

pub(crate) fn synth(a: &SynthArgs) -> Result<()> {
    let mode: WeightsMode = a.weights_mode.parse()?;
    let mut spec = SynthSpec::new(a.examples, a.num_layers, a.hidden, a.classes, first_seed(&a.seeds)?);
    spec.signal_layer = a.signal_layer;
    spec.signal_strength = a.signal_strength;
    let set = synth_activations(&spec)?;
    let mut header = set.header().clone();
    header.metadata.insert("dataset".into(), a.dataset.clone());
    header.metadata.insert("lang".into(), a.lang.clone());
    header.metadata.insert("weights_mode".into(), mode.to_string());
    let records = set.to_records()?;
    write_activation_set(&a.out, &header, &records)?;
    println!("wrote {} records to {}", records.len(), a.out.display());
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SelftestSummary {
    pub gradients: GradientSweep,
    pub tampered_error: f64,
    pub mdl_total: f64,
    pub mdl_oracle_total: f64,
}

impl SelftestSummary {
    pub fn passed(&self) -> bool {
        self.gradients.max_rel_error < 1e-4 && self.tampered_error > 1e-2 && self.mdl_total == self.mdl_oracle_total
    }

    pub fn render(&self) -> String {
        format!(
            "max gradient error {:.3e} over {} draws (worst group {})\ntampered gradient error {:.3e}\nMDL online coding {} bits, oracle {} bits, {}",
            self.gradients.max_rel_error,
            self.gradients.draws,
            self.gradients.worst_group,
            self.tampered_error,
            self.mdl_total,
            self.mdl_oracle_total,
            if self.mdl_total == self.mdl_oracle_total { "match" } else { "MISMATCH" }
        )
    }
}

pub fn selftest(seeds: &[u64]) -> Result<SelftestSummary> {
    use layerprobe::mdl::{online_coding, PortionSchedule};
    let seed = first_seed(seeds)?;
    let gradients = gradient_sweep(20, seed)?;
    let tampered_error = tampered_gradient_error(seed)?;

    let set = synth_activations(&SynthSpec::new(8, 2, 3, 2, seed).with_signal(1, 3.0))?;
    let data = set.all()?;
    let config = ProbeConfig {
        projection_dim: 16,
        mlp_hidden_dim: 16,
        batch_size: 2,
        ..ProbeConfig::default()
    };
    let boundaries = vec![2, 4, 8];
    let schedule = PortionSchedule::new(8, boundaries.clone())?;
    let report = online_coding(&data, &config, &schedule, seed)?;
    let oracle = naive_online_total(&data, &config, &boundaries, seed)?;
    Ok(SelftestSummary {
        gradients,
        tampered_error,
        mdl_total: report.total_mdl_bits,
        mdl_oracle_total: oracle,
    })
}
