//! CSV and SVG report emission and run manifests.
//!
//! CSV files start with a `schema_version` column; the column set of each
//! file is fixed for a given version. List-valued fields (schedules,
//! per-seed values) are space-separated inside one cell.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::mdl::{LayerCurve, MdlReport};
use crate::probe::ProbeConfig;
use crate::transfer::{EdgeProbeResult, TransferMatrix, WeightsMode};
use crate::{Error, Result};

pub const CSV_SCHEMA_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedMdl {
    pub run_id: String,
    pub report: MdlReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedCurve {
    pub run_id: String,
    pub curve: LayerCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedEdge {
    pub run_id: String,
    pub result: EdgeProbeResult,
}

/// Everything a run produced; merged by the `report` command.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Results {
    #[serde(default)]
    pub mdl: Vec<NamedMdl>,
    #[serde(default)]
    pub curves: Vec<NamedCurve>,
    #[serde(default)]
    pub edge: Vec<NamedEdge>,
    #[serde(default)]
    pub transfer: Vec<TransferMatrix>,
}

impl Results {
    pub fn is_empty(&self) -> bool {
        self.mdl.is_empty() && self.curves.is_empty() && self.edge.is_empty() && self.transfer.is_empty()
    }

    pub fn merge(&mut self, other: Results) {
        self.mdl.extend(other.mdl);
        self.curves.extend(other.curves);
        self.edge.extend(other.edge);
        self.transfer.extend(other.transfer);
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

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ")
}

fn csv_bytes(header: &[&str], rows: Vec<Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let werr = |e: csv::Error| Error::invalid(format!("csv: {e}"));
    w.write_record(header).map_err(werr)?;
    for row in rows {
        w.write_record(&row).map_err(werr)?;
    }
    w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))
}

fn mdl_row(run_id: &str, r: &MdlReport) -> Vec<String> {
    vec![
        CSV_SCHEMA_VERSION.into(),
        run_id.into(),
        r.layer.map(|l| l.to_string()).unwrap_or_else(|| "mix".into()),
        r.num_examples.to_string(),
        r.num_classes.to_string(),
        r.seed.to_string(),
        join(&r.schedule),
        r.uniform_cost_bits.to_string(),
        join(&r.block_codelengths_bits),
        r.total_mdl_bits.to_string(),
        r.compression.to_string(),
    ]
}

pub fn mdl_csv(results: &Results) -> Result<Vec<u8>> {
    let mut rows: Vec<Vec<String>> = results.mdl.iter().map(|m| mdl_row(&m.run_id, &m.report)).collect();
    for c in &results.curves {
        rows.extend(c.curve.reports.iter().map(|r| mdl_row(&c.run_id, r)));
    }
    csv_bytes(
        &[
            "schema_version",
            "run_id",
            "layer",
            "n",
            "k",
            "seed",
            "schedule",
            "uniform_cost_bits",
            "block_codelengths_bits",
            "total_mdl_bits",
            "compression",
        ],
        rows,
    )
}

pub fn layer_curve_csv(curves: &[NamedCurve]) -> Result<Vec<u8>> {
    let rows = curves
        .iter()
        .flat_map(|c| {
            c.curve.layers.iter().zip(&c.curve.compression).map(move |(l, v)| {
                vec![
                    CSV_SCHEMA_VERSION.into(),
                    c.run_id.clone(),
                    l.to_string(),
                    v.to_string(),
                    c.curve.best_layer.to_string(),
                ]
            })
        })
        .collect();
    csv_bytes(&["schema_version", "run_id", "layer", "compression", "best_layer"], rows)
}

pub fn edge_csv(edge: &[NamedEdge]) -> Result<Vec<u8>> {
    let rows = edge
        .iter()
        .map(|e| {
            vec![
                CSV_SCHEMA_VERSION.into(),
                e.run_id.clone(),
                e.result.mean_accuracy.to_string(),
                join(&e.result.seeds),
                join(&e.result.accuracies),
                join(&e.result.final_losses),
            ]
        })
        .collect();
    csv_bytes(
        &["schema_version", "run_id", "mean_accuracy", "seeds", "accuracies", "final_losses_bits"],
        rows,
    )
}

pub fn transfer_csv(matrices: &[TransferMatrix]) -> Result<Vec<u8>> {
    let rows = matrices
        .iter()
        .flat_map(|m| {
            m.cells.iter().map(move |c| {
                vec![
                    CSV_SCHEMA_VERSION.into(),
                    c.source.name(),
                    c.target.name(),
                    c.weights_mode.to_string(),
                    m.train_size.to_string(),
                    c.result.mean_accuracy.to_string(),
                    join(&c.result.seeds),
                    join(&c.result.accuracies),
                ]
            })
        })
        .collect();
    csv_bytes(
        &[
            "schema_version",
            "source",
            "target",
            "weights_mode",
            "train_size",
            "mean_accuracy",
            "seeds",
            "accuracies",
        ],
        rows,
    )
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn escape_xml(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Compression-versus-layer line plot, one polyline per curve.
pub fn layer_curves_svg(curves: &[NamedCurve]) -> Result<String> {
    if curves.is_empty() {
        return Err(Error::invalid("no layer curves to plot"));
    }
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 160.0, 20.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let max_layer = curves.iter().flat_map(|c| c.curve.layers.iter().copied()).max().unwrap_or(0);
    let values = curves.iter().flat_map(|c| c.curve.compression.iter().copied());
    let (lo, hi) = values.fold((1.0f64, 1.0f64), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let (y0, y1) = ((lo * 10.0).floor() / 10.0, (hi * 10.0).ceil() / 10.0 + 0.1);
    let x_at = |l: usize| left + if max_layer == 0 { pw / 2.0 } else { pw * l as f64 / max_layer as f64 };
    let y_at = |v: f64| top + ph * (1.0 - (v - y0) / (y1 - y0));

    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<g class="axes" stroke="black"><line x1="{left}" y1="{yb}" x2="{xr}" y2="{yb}"/><line x1="{left}" y1="{top}" x2="{left}" y2="{yb}"/></g>"#,
        yb = top + ph,
        xr = left + pw
    );
    for l in 0..=max_layer {
        let x = x_at(l);
        let _ = writeln!(
            s,
            r#"<g class="xtick"><line x1="{x:.2}" y1="{yb}" x2="{x:.2}" y2="{yt}" stroke="black"/><text x="{x:.2}" y="{yl}" text-anchor="middle">{l}</text></g>"#,
            yb = top + ph,
            yt = top + ph + 4.0,
            yl = top + ph + 16.0
        );
    }
    let steps = ((y1 - y0) / 0.1).round() as usize;
    let stride = steps.div_ceil(8).max(1);
    for i in (0..=steps).step_by(stride) {
        let v = y0 + 0.1 * i as f64;
        let y = y_at(v);
        let _ = writeln!(
            s,
            r#"<g class="ytick"><line x1="{xl}" y1="{y:.2}" x2="{left}" y2="{y:.2}" stroke="black"/><text x="{xt}" y="{yt:.2}" text-anchor="end">{v:.1}</text></g>"#,
            xl = left - 4.0,
            xt = left - 6.0,
            yt = y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{x}" y="{y}" text-anchor="middle">layer</text>"#,
        x = left + pw / 2.0,
        y = h - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="15" y="{y}" text-anchor="middle" transform="rotate(-90 15 {y})">compression</text>"#,
        y = top + ph / 2.0
    );
    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points = c
            .curve
            .layers
            .iter()
            .zip(&c.curve.compression)
            .map(|(&l, &v)| format!("{:.2},{:.2}", x_at(l), y_at(v)))
            .collect::<Vec<_>>()
            .join(" ");
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{points}"/>"#
        );
        let ly = top + 14.0 * i as f64 + 8.0;
        let lx = left + pw + 10.0;
        let _ = writeln!(
            s,
            r#"<g class="legend"><line x1="{lx}" y1="{ly}" x2="{lx2}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{tx}" y="{ty}">{name}</text></g>"#,
            lx2 = lx + 16.0,
            tx = lx + 20.0,
            ty = ly + 4.0,
            name = escape_xml(&c.run_id)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<PathBuf> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

/// Writes every non-empty report kind plus `results.json` to `outdir`.
/// Returns the written paths.
pub fn emit_reports(results: &Results, outdir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    if results.is_empty() {
        return Err(Error::invalid("no results to report"));
    }
    let outdir = outdir.as_ref();
    std::fs::create_dir_all(outdir).map_err(|e| Error::io(outdir, e))?;
    let mut written = Vec::new();
    if !results.mdl.is_empty() || !results.curves.is_empty() {
        written.push(write_file(&outdir.join("mdl_report.csv"), &mdl_csv(results)?)?);
    }
    if !results.curves.is_empty() {
        written.push(write_file(&outdir.join("layer_curve.csv"), &layer_curve_csv(&results.curves)?)?);
        written.push(write_file(
            &outdir.join("layer_curves.svg"),
            layer_curves_svg(&results.curves)?.as_bytes(),
        )?);
    }
    if !results.edge.is_empty() {
        written.push(write_file(&outdir.join("edge_report.csv"), &edge_csv(&results.edge)?)?);
    }
    if !results.transfer.is_empty() {
        written.push(write_file(&outdir.join("transfer_matrix.csv"), &transfer_csv(&results.transfer)?)?);
    }
    let json = serde_json::to_vec_pretty(results).map_err(|e| Error::invalid(e.to_string()))?;
    written.push(write_file(&outdir.join("results.json"), &json)?);
    Ok(written)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestInput {
    pub name: String,
    pub path: PathBuf,
    pub sha256: String,
}

impl ManifestInput {
    /// Hashes the file at `path`.
    pub fn hash(name: &str, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(ManifestInput {
            name: name.into(),
            path: path.to_path_buf(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        })
    }
}

/// Everything needed to re-run a job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub inputs: Vec<ManifestInput>,
    pub config: ProbeConfig,
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    pub layers: Option<String>,
    pub train_size: Option<usize>,
    pub weights_mode: Option<WeightsMode>,
    pub output_dir: PathBuf,
    pub engine_version: String,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl RunManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
            line: e.line(),
            message: format!("{}: {e}", path.display()),
        })
    }

    pub fn save(&self, outdir: impl AsRef<Path>) -> Result<PathBuf> {
        let outdir = outdir.as_ref();
        std::fs::create_dir_all(outdir).map_err(|e| Error::io(outdir, e))?;
        let json = serde_json::to_vec_pretty(self).map_err(|e| Error::invalid(e.to_string()))?;
        write_file(&outdir.join(MANIFEST_FILE), &json)
    }

    /// A manifest left in `outdir` by an earlier run must describe the same
    /// command over the same input bytes with the same settings. Only the
    /// spelling of the output path may differ.
    pub fn check_resume(&self, outdir: impl AsRef<Path>) -> Result<()> {
        let path = outdir.as_ref().join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(());
        }
        let previous = Self::load(&path)?;
        if previous.command != self.command {
            return Err(Error::ManifestMismatch(format!(
                "{} holds a {:?} run, not {:?}",
                path.display(),
                previous.command,
                self.command
            )));
        }
        let hashes = |m: &RunManifest| m.inputs.iter().map(|i| (i.name.clone(), i.sha256.clone())).collect::<Vec<_>>();
        if hashes(&previous) != hashes(self) {
            return Err(Error::ManifestMismatch(format!(
                "input hashes differ from {}",
                path.display()
            )));
        }
        let fields = |m: &RunManifest| match serde_json::to_value(m) {
            Ok(serde_json::Value::Object(map)) => map,
            _ => serde_json::Map::new(),
        };
        let (old, new) = (fields(&previous), fields(self));
        for (key, value) in &new {
            if key != "output_dir" && key != "inputs" && old.get(key) != Some(value) {
                return Err(Error::ManifestMismatch(format!(
                    "{key} differs from {} (was {}, now {value})",
                    path.display(),
                    old.get(key).unwrap_or(&serde_json::Value::Null)
                )));
            }
        }
        Ok(())
    }
}
