//! File formats: experiment config (TOML), datasets and transition logs
//! (JSON lines with a meta header), checkpoints (versioned JSON), and the
//! CSV telemetry/report families.
//!
//! Every output embeds the fingerprint of the config that produced it. CSVs
//! carry it as a leading `# config=<hex>` comment line; JSONL files carry a
//! meta object on the first line; checkpoints store it as a field.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write as IoWrite};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::CemConfig;
use crate::correct::{CorrectionResult, DEFAULT_BAND};
use crate::domain::{
    BudgetSpec, LambdaTable, LambdaVector, Phase, RewardWeights, PHASES,
};
use crate::error::{Error, Result};
use crate::serving::{ControlSample, SliceReport, StreamConfig};
use crate::sim::{EncodingSpec, EnvConfig, NoiseMode, SyntheticRequest};
use crate::train::{Algo, TrainConfig, TransitionRecord};
use crate::qnet::QNetworkParams;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const JSONL_VERSION: u32 = 1;

/// Hex SHA-256 of the canonical JSON serialization. Identical configs give
/// identical fingerprints across runs and platforms.
pub fn config_fingerprint<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectConfig {
    /// Fraction of logged trajectories rolled by the scripted policy.
    pub scripted_fraction: f64,
    pub noise: NoiseMode,
}

impl Default for CollectConfig {
    fn default() -> Self {
        CollectConfig { scripted_fraction: 0.0, noise: NoiseMode::Bounded(0.1) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrectionConfig {
    /// Utilization tolerance around 100%.
    pub band: f64,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        CorrectionConfig { band: DEFAULT_BAND }
    }
}

/// Everything one experiment needs. Each section has working defaults, so a
/// config file only states what it overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub weights: RewardWeights,
    /// Absent means "anchor budgets to the static rule's measured cost".
    pub budgets: Option<BudgetSpec>,
    pub train: TrainConfig,
    pub collect: CollectConfig,
    pub correction: CorrectionConfig,
    pub serving: StreamConfig,
    pub cem: CemConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.weights.validate()?;
        if let Some(b) = &self.budgets {
            b.validate()?;
        }
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.collect.scripted_fraction) {
            return Err(Error::config("collect.scripted_fraction must be in [0, 1]"));
        }
        if !(self.correction.band > 0.0 && self.correction.band < 1.0) {
            return Err(Error::config("correction.band must be in (0, 1)"));
        }
        self.serving.validate()?;
        Ok(())
    }

    pub fn fingerprint(&self) -> Result<String> {
        config_fingerprint(self)
    }
}

pub fn load_experiment_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    let cfg: ExperimentConfig = toml::from_str(&text)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn save_experiment_config(path: &Path, cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    let text = toml::to_string_pretty(cfg).map_err(|e| Error::format(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

/// First-line header of every JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileMeta {
    pub kind: String,
    pub version: u32,
    pub fingerprint: String,
    pub seed: u64,
    pub count: usize,
}

fn write_jsonl<T: Serialize>(path: &Path, meta: &FileMeta, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, meta)?;
    w.write_all(b"\n")?;
    for row in rows {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl<T: DeserializeOwned>(path: &Path, expected_kind: &str) -> Result<(FileMeta, Vec<T>)> {
    let mut lines = BufReader::new(File::open(path)?).lines();
    let head = lines
        .next()
        .ok_or_else(|| Error::format(format!("{}: empty file", path.display())))??;
    let meta: FileMeta = serde_json::from_str(&head)?;
    if meta.kind != expected_kind {
        return Err(Error::format(format!(
            "{}: holds '{}' records, expected '{expected_kind}'",
            path.display(),
            meta.kind
        )));
    }
    if meta.version != JSONL_VERSION {
        return Err(Error::format(format!(
            "{}: format version {} unsupported (this build reads {JSONL_VERSION})",
            path.display(),
            meta.version
        )));
    }
    let mut rows = Vec::with_capacity(meta.count);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line)?);
    }
    if rows.len() != meta.count {
        return Err(Error::format(format!(
            "{}: header promises {} records, found {}",
            path.display(),
            meta.count,
            rows.len()
        )));
    }
    Ok((meta, rows))
}

pub fn write_dataset(
    path: &Path,
    fingerprint: &str,
    seed: u64,
    reqs: &[SyntheticRequest],
) -> Result<()> {
    let meta = FileMeta {
        kind: "dataset".into(),
        version: JSONL_VERSION,
        fingerprint: fingerprint.into(),
        seed,
        count: reqs.len(),
    };
    write_jsonl(path, &meta, reqs)
}

pub fn read_dataset(path: &Path) -> Result<(FileMeta, Vec<SyntheticRequest>)> {
    read_jsonl(path, "dataset")
}

pub fn write_transitions(
    path: &Path,
    fingerprint: &str,
    seed: u64,
    log: &[TransitionRecord],
) -> Result<()> {
    let meta = FileMeta {
        kind: "transitions".into(),
        version: JSONL_VERSION,
        fingerprint: fingerprint.into(),
        seed,
        count: log.len(),
    };
    write_jsonl(path, &meta, log)
}

pub fn read_transitions(path: &Path) -> Result<(FileMeta, Vec<TransitionRecord>)> {
    read_jsonl(path, "transitions")
}

/// Trained policy plus everything needed to serve it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub fingerprint: String,
    pub algo: Algo,
    pub encoding: EncodingSpec,
    pub params: QNetworkParams,
    pub lambda: LambdaVector,
}

impl Checkpoint {
    pub fn validate(&self) -> Result<()> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::format(format!(
                "checkpoint version {} unsupported (this build reads {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        self.params.validate()?;
        if self.params.input_dim != self.encoding.len() {
            return Err(Error::format(format!(
                "checkpoint input width {} does not match its encoding ({})",
                self.params.input_dim,
                self.encoding.len()
            )));
        }
        if self.params.action_sizes != self.encoding.action_space.sizes() {
            return Err(Error::format(
                "checkpoint head sizes do not match its action space",
            ));
        }
        Ok(())
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    ckpt.validate()?;
    let w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(w, ckpt)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let r = BufReader::new(File::open(path)?);
    let ckpt: Checkpoint = serde_json::from_reader(r)?;
    ckpt.validate()?;
    Ok(ckpt)
}

fn write_csv_with_meta<T: Serialize>(path: &Path, fingerprint: &str, rows: &[T]) -> Result<()> {
    let mut file = BufWriter::new(File::create(path)?);
    writeln!(file, "# config={fingerprint}")?;
    let mut w = csv::Writer::from_writer(file);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

fn read_csv_with_meta<T: DeserializeOwned>(path: &Path) -> Result<(Option<String>, Vec<T>)> {
    let text = std::fs::read_to_string(path)?;
    let (fingerprint, body) = match text.strip_prefix("# config=") {
        Some(rest) => {
            let nl = rest
                .find('\n')
                .ok_or_else(|| Error::format(format!("{}: header-only CSV", path.display())))?;
            (Some(rest[..nl].trim().to_string()), &rest[nl + 1..])
        }
        None => (None, text.as_str()),
    };
    let mut rows = Vec::new();
    let mut reader = csv::Reader::from_reader(body.as_bytes());
    for row in reader.deserialize() {
        rows.push(row?);
    }
    Ok((fingerprint, rows))
}

/// One multiplier-table entry. Utilization is absent for slices that carried
/// no traffic during correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaTableRow {
    pub slice: usize,
    pub phase: Phase,
    pub lambda: f64,
    pub utilization: Option<f64>,
}

pub fn lambda_table_rows(result: &CorrectionResult) -> Vec<LambdaTableRow> {
    let mut rows = Vec::with_capacity(result.table.slices() * PHASES);
    for slice in 0..result.table.slices() {
        let corrected = result.slices.iter().find(|s| s.slice == slice);
        let vec = result.table.get(slice);
        for phase in Phase::ALL {
            rows.push(LambdaTableRow {
                slice,
                phase,
                lambda: vec.get(phase),
                utilization: corrected.map(|c| c.utilization[phase.index()]),
            });
        }
    }
    rows
}

pub fn write_lambda_table(path: &Path, fingerprint: &str, rows: &[LambdaTableRow]) -> Result<()> {
    write_csv_with_meta(path, fingerprint, rows)
}

/// Reads a multiplier table back. Every slice must carry all phases; slices
/// must be 0..S.
pub fn read_lambda_table(
    path: &Path,
) -> Result<(LambdaTable, Vec<LambdaTableRow>, Option<String>)> {
    let (fingerprint, rows): (_, Vec<LambdaTableRow>) = read_csv_with_meta(path)?;
    if rows.is_empty() {
        return Err(Error::format(format!("{}: empty multiplier table", path.display())));
    }
    let slices = rows.iter().map(|r| r.slice).max().unwrap() + 1;
    let mut values = vec![[None; PHASES]; slices];
    for row in &rows {
        let cell = &mut values[row.slice][row.phase.index()];
        if cell.is_some() {
            return Err(Error::format(format!(
                "duplicate multiplier row for slice {} {} phase",
                row.slice,
                row.phase.label()
            )));
        }
        *cell = Some(row.lambda);
    }
    let mut per_slice = Vec::with_capacity(slices);
    for (slice, entry) in values.iter().enumerate() {
        let mut arr = [0.0; PHASES];
        for (t, v) in entry.iter().enumerate() {
            arr[t] = v.ok_or_else(|| {
                Error::format(format!(
                    "slice {slice} is missing its {} phase multiplier",
                    Phase::ALL[t].label()
                ))
            })?;
        }
        per_slice.push(LambdaVector::new(arr)?);
    }
    Ok((LambdaTable { per_slice }, rows, fingerprint))
}

pub fn write_telemetry(
    path: &Path,
    fingerprint: &str,
    rows: &[crate::train::TelemetryRow],
) -> Result<()> {
    write_csv_with_meta(path, fingerprint, rows)
}

pub fn read_telemetry(path: &Path) -> Result<(Option<String>, Vec<crate::train::TelemetryRow>)> {
    read_csv_with_meta(path)
}

/// Flat serving-report row: one line per slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServingReportRow {
    pub slice: usize,
    pub requests: usize,
    pub util_channel: f64,
    pub util_queue: f64,
    pub util_model: f64,
    #[serde(rename = "return")]
    pub ret: f64,
    pub clamp_seconds: f64,
}

impl From<&SliceReport> for ServingReportRow {
    fn from(r: &SliceReport) -> Self {
        ServingReportRow {
            slice: r.slice,
            requests: r.requests,
            util_channel: r.utilization[0],
            util_queue: r.utilization[1],
            util_model: r.utilization[2],
            ret: r.ret,
            clamp_seconds: r.clamp_seconds,
        }
    }
}

pub fn write_serving_report(
    path: &Path,
    fingerprint: &str,
    slices: &[SliceReport],
) -> Result<()> {
    let rows: Vec<ServingReportRow> = slices.iter().map(ServingReportRow::from).collect();
    write_csv_with_meta(path, fingerprint, &rows)
}

pub fn read_serving_report(path: &Path) -> Result<(Option<String>, Vec<ServingReportRow>)> {
    read_csv_with_meta(path)
}

/// Controller telemetry row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlCsvRow {
    pub step: usize,
    pub slice: usize,
    pub measurement: f64,
    pub output: f64,
    pub clamp: f64,
}

impl From<&ControlSample> for ControlCsvRow {
    fn from(s: &ControlSample) -> Self {
        ControlCsvRow {
            step: s.tick,
            slice: s.slice,
            measurement: s.measurement,
            output: s.output,
            clamp: s.clamp_fraction,
        }
    }
}

pub fn write_control_log(
    path: &Path,
    fingerprint: &str,
    samples: &[ControlSample],
) -> Result<()> {
    let rows: Vec<ControlCsvRow> = samples.iter().map(ControlCsvRow::from).collect();
    write_csv_with_meta(path, fingerprint, &rows)
}

pub fn read_control_log(path: &Path) -> Result<(Option<String>, Vec<ControlCsvRow>)> {
    read_csv_with_meta(path)
}

pub fn write_cem_log(
    path: &Path,
    fingerprint: &str,
    rows: &[crate::baselines::CemLogRow],
) -> Result<()> {
    write_csv_with_meta(path, fingerprint, rows)
}

/// One line of the headline results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub label: String,
    #[serde(rename = "return")]
    pub ret: f64,
    /// Summed over-budget metric: sum of (utilization - 1) across phases.
    pub cost: f64,
    pub util_channel: f64,
    pub util_queue: f64,
    pub util_model: f64,
    /// 0 = static anchor, 100 = expert anchor; absent until anchors exist.
    pub score: Option<f64>,
}

pub fn write_results(path: &Path, fingerprint: &str, rows: &[ResultRow]) -> Result<()> {
    write_csv_with_meta(path, fingerprint, rows)
}

pub fn read_results(path: &Path) -> Result<(Option<String>, Vec<ResultRow>)> {
    read_csv_with_meta(path)
}

/// Fixed-width text rendering of the results table.
pub fn render_results(rows: &[ResultRow]) -> String {
    let headers =
        ["policy", "return", "cost", "util_ch", "util_q", "util_m", "score"];
    let mut cells: Vec<Vec<String>> = vec![headers.iter().map(|h| h.to_string()).collect()];
    for r in rows {
        cells.push(vec![
            r.label.clone(),
            format!("{:.2}", r.ret),
            format!("{:+.3}", r.cost),
            format!("{:.1}%", 100.0 * r.util_channel),
            format!("{:.1}%", 100.0 * r.util_queue),
            format!("{:.1}%", 100.0 * r.util_model),
            r.score.map_or("-".into(), |s| format!("{s:.1}")),
        ]);
    }
    render_table(&cells)
}

/// One cell of the multiplier-tuning grid: step size `alpha` crossed with
/// re-selection rounds `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub k: usize,
    #[serde(rename = "return")]
    pub ret: f64,
    pub util_channel: f64,
    pub util_queue: f64,
    pub util_model: f64,
    /// Wall-clock seconds of this cell's training run.
    pub seconds: f64,
    /// Wall clock relative to the k=1 cell at the same alpha (1.0 there).
    pub relative_time: f64,
}

pub fn write_sweep(path: &Path, fingerprint: &str, rows: &[SweepRow]) -> Result<()> {
    write_csv_with_meta(path, fingerprint, rows)
}

pub fn read_sweep(path: &Path) -> Result<(Option<String>, Vec<SweepRow>)> {
    read_csv_with_meta(path)
}

/// Fixed-width text rendering of the tuning grid.
pub fn render_sweep(rows: &[SweepRow]) -> String {
    let headers = ["alpha", "K", "return", "util_ch", "util_q", "util_m", "time_vs_K1"];
    let mut cells: Vec<Vec<String>> = vec![headers.iter().map(|h| h.to_string()).collect()];
    for r in rows {
        cells.push(vec![
            format!("{:.3}", r.alpha),
            r.k.to_string(),
            format!("{:.2}", r.ret),
            format!("{:.1}%", 100.0 * r.util_channel),
            format!("{:.1}%", 100.0 * r.util_queue),
            format!("{:.1}%", 100.0 * r.util_model),
            format!("{:.0}%", 100.0 * r.relative_time),
        ]);
    }
    render_table(&cells)
}

/// First row is the header: left-aligned, separated from the right-aligned
/// data rows by a dash rule.
fn render_table(cells: &[Vec<String>]) -> String {
    let columns = cells[0].len();
    let widths: Vec<usize> = (0..columns)
        .map(|c| cells.iter().map(|row| row[c].len()).max().unwrap())
        .collect();
    let mut out = String::new();
    for (i, row) in cells.iter().enumerate() {
        for (c, cell) in row.iter().enumerate() {
            if c > 0 {
                out.push_str("  ");
            }
            if c == 0 {
                out.push_str(&format!("{cell:<w$}", w = widths[c]));
            } else {
                out.push_str(&format!("{cell:>w$}", w = widths[c]));
            }
        }
        out.push('\n');
        if i == 0 {
            let total: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
            out.push_str(&"-".repeat(total));
            out.push('\n');
        }
    }
    out
}
