//! Run artifacts on disk and human-readable reports.
//!
//! A persisted run directory contains:
//!
//! * `record.jsonl`: a header line (config), one line per month, a footer
//!   line (totals and usage)
//! * `transcript.txt`: announcements and utterances in order
//! * `trajectory.csv`: stock levels and per-agent extraction per month
//! * `usage.json`: token counts and estimated cost
//! * `manifest.json`: every file above with its SHA-256 digest

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dynamics::Direction;
use crate::engine::{MonthRecord, RunConfig, RunRecord};
use crate::gateway::UsageMeter;
use crate::metrics::{MeanStd, MetricsSummary};
use crate::scenario::format_quantity;

pub const RECORD_FILE: &str = "record.jsonl";
pub const TRANSCRIPT_FILE: &str = "transcript.txt";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const USAGE_FILE: &str = "usage.json";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), StoreError> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, StoreError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| StoreError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub dir: PathBuf,
    pub files: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn paths(&self) -> impl Iterator<Item = PathBuf> + '_ {
        self.files.iter().map(|f| self.dir.join(&f.path))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum RecordLine {
    Header {
        config: Box<RunConfig>,
    },
    Month(Box<MonthRecord>),
    Footer {
        survival_months: u32,
        per_agent_totals: Vec<f64>,
        final_amount: f64,
        usage: UsageMeter,
    },
}

/// Serializes a record as JSON lines.
pub fn record_to_jsonl(record: &RunRecord) -> String {
    let mut out = String::new();
    let mut push = |line: RecordLine| {
        out.push_str(&serde_json::to_string(&line).expect("record serializes"));
        out.push('\n');
    };
    push(RecordLine::Header {
        config: Box::new(record.config.clone()),
    });
    for m in &record.months {
        push(RecordLine::Month(Box::new(m.clone())));
    }
    push(RecordLine::Footer {
        survival_months: record.survival_months,
        per_agent_totals: record.per_agent_totals.clone(),
        final_amount: record.final_amount,
        usage: record.usage.clone(),
    });
    out
}

pub fn record_from_jsonl(text: &str, path: &Path) -> Result<RunRecord, StoreError> {
    let parse_err = |line: usize, message: String| StoreError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut config = None;
    let mut months = Vec::new();
    let mut footer = None;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: RecordLine = serde_json::from_str(line).map_err(|e| parse_err(i + 1, e.to_string()))?;
        match parsed {
            RecordLine::Header { config: c } if config.is_none() => config = Some(*c),
            RecordLine::Header { .. } => return Err(parse_err(i + 1, "duplicate header".into())),
            RecordLine::Month(m) if config.is_some() && footer.is_none() => months.push(*m),
            RecordLine::Month(_) => return Err(parse_err(i + 1, "month line outside header/footer".into())),
            RecordLine::Footer {
                survival_months,
                per_agent_totals,
                final_amount,
                usage,
            } if footer.is_none() => footer = Some((survival_months, per_agent_totals, final_amount, usage)),
            RecordLine::Footer { .. } => return Err(parse_err(i + 1, "duplicate footer".into())),
        }
    }
    let config = config.ok_or_else(|| parse_err(1, "missing header line".into()))?;
    let (survival_months, per_agent_totals, final_amount, usage) = footer.ok_or_else(|| {
        parse_err(
            text.lines().count().max(1),
            "missing footer line (truncated record?)".into(),
        )
    })?;
    Ok(RunRecord {
        config,
        months,
        survival_months,
        per_agent_totals,
        final_amount,
        usage,
    })
}

pub fn load_run(path: &Path) -> Result<RunRecord, StoreError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    record_from_jsonl(&text, path)
}

/// Trajectory as RFC-4180 CSV, one row per simulated month.
pub fn trajectory_csv(record: &RunRecord) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec![
        "month".to_string(),
        "amount_at_start".into(),
        "amount_after_harvest".into(),
        "amount_after_regrowth".into(),
    ];
    header.extend(record.config.agents.iter().map(|a| a.name.clone()));
    w.write_record(&header).expect("in-memory csv");
    for m in &record.months {
        let mut row = vec![
            m.month.to_string(),
            format_quantity(m.amount_at_start),
            format_quantity(m.amount_after_harvest),
            format_quantity(m.amount_after_regrowth),
        ];
        row.extend(m.allocations.per_agent.iter().map(|x| format_quantity(*x)));
        w.write_record(&row).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
}

/// Dialogue as `Name: text` lines; each month opens with the announcer.
pub fn transcript_text(record: &RunRecord) -> String {
    let sc = &record.config.scenario;
    let mut out = String::new();
    for (i, m) in record.months.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let _ = writeln!(out, "{} (month {}): {}", sc.announcer_title, m.month, m.announcement);
        for u in m.discussion.iter().filter(|u| !u.pass) {
            let name = record
                .config
                .agents
                .get(u.agent_index)
                .map(|a| a.name.as_str())
                .unwrap_or("?");
            let _ = writeln!(out, "{name}: {}", u.text);
        }
    }
    out
}

fn usage_json(usage: &UsageMeter) -> serde_json::Value {
    serde_json::json!({
        "input_tokens": usage.input_tokens(),
        "output_tokens": usage.output_tokens(),
        "request_count": usage.request_count(),
        "estimated_cost_usd": usage.estimated_cost_usd(),
        "models": usage.models,
    })
}

/// Writes all artifacts of a run into `dir`, removing partial output on
/// failure.
pub fn persist_run(record: &RunRecord, dir: &Path) -> Result<Manifest, StoreError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let files: [(&str, String); 4] = [
        (RECORD_FILE, record_to_jsonl(record)),
        (TRANSCRIPT_FILE, transcript_text(record)),
        (TRAJECTORY_FILE, trajectory_csv(record)),
        (
            USAGE_FILE,
            serde_json::to_string_pretty(&usage_json(&record.usage)).expect("usage serializes") + "\n",
        ),
    ];
    let mut written: Vec<PathBuf> = Vec::new();
    let mut entries = Vec::new();
    let result = (|| {
        for (name, content) in &files {
            let path = dir.join(name);
            fs::write(&path, content).map_err(io_err(&path))?;
            written.push(path);
            entries.push(ManifestEntry {
                path: name.to_string(),
                sha256: sha256_hex(content.as_bytes()),
            });
        }
        let manifest = Manifest {
            dir: dir.to_path_buf(),
            files: entries.clone(),
        };
        let path = dir.join(MANIFEST_FILE);
        let listing = serde_json::to_string_pretty(&entries).expect("manifest serializes") + "\n";
        fs::write(&path, listing).map_err(io_err(&path))?;
        Ok(manifest)
    })();
    if result.is_err() {
        for p in &written {
            let _ = fs::remove_file(p);
        }
    }
    result
}

/// Reads a manifest written by [`persist_run`].
pub fn load_manifest(dir: &Path) -> Result<Manifest, StoreError> {
    let files: Vec<ManifestEntry> = read_json(&dir.join(MANIFEST_FILE))?;
    Ok(Manifest {
        dir: dir.to_path_buf(),
        files,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntegrityWarning {
    pub path: PathBuf,
    pub expected: String,
    pub actual: String,
}

impl std::fmt::Display for IntegrityWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "integrity warning: {} digest {} does not match manifest {}",
            self.path.display(),
            self.actual,
            self.expected
        )
    }
}

/// Renders the dialogue of a persisted record, checking it against the
/// manifest in the same directory when one exists.
pub fn replay_transcript(record_path: &Path) -> Result<(String, Vec<IntegrityWarning>), StoreError> {
    let bytes = fs::read(record_path).map_err(io_err(record_path))?;
    let text = String::from_utf8(bytes.clone()).map_err(|e| StoreError::Parse {
        path: record_path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })?;
    let record = record_from_jsonl(&text, record_path)?;
    let mut warnings = Vec::new();
    let dir = record_path.parent().unwrap_or(Path::new("."));
    if dir.join(MANIFEST_FILE).exists() {
        let manifest = load_manifest(dir)?;
        let name = record_path.file_name().map(|n| n.to_string_lossy().to_string());
        if let Some(entry) = manifest.files.iter().find(|f| Some(&f.path) == name.as_ref()) {
            let actual = sha256_hex(&bytes);
            if actual != entry.sha256 {
                warnings.push(IntegrityWarning {
                    path: record_path.to_path_buf(),
                    expected: entry.sha256.clone(),
                    actual,
                });
            }
        }
    }
    Ok((transcript_text(&record), warnings))
}

/// One decimal, half away from zero.
pub fn fmt1(x: f64) -> String {
    let r = (x * 10.0).round() / 10.0;
    let r = if r == 0.0 { 0.0 } else { r };
    format!("{r:.1}")
}

pub fn fmt_mean_std(m: &MeanStd) -> String {
    format!("{} ± {}", fmt1(m.mean), fmt1(m.std))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableRow {
    pub label: String,
    pub survival_rate: String,
    pub survival_time: String,
    pub gain_or_loss: String,
    pub efficiency: String,
    pub equality: String,
    pub over_usage: String,
}

impl TableRow {
    fn cells(&self) -> [&str; 7] {
        [
            &self.label,
            &self.survival_rate,
            &self.survival_time,
            &self.gain_or_loss,
            &self.efficiency,
            &self.equality,
            &self.over_usage,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResultsTable {
    pub caption: String,
    pub header: [String; 7],
    pub rows: Vec<TableRow>,
}

/// Builds the results table, rows sorted by label.
pub fn emit_table(summaries: &[(String, MetricsSummary)]) -> ResultsTable {
    let mut sorted: Vec<&(String, MetricsSummary)> = summaries.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let all_bad = !summaries.is_empty() && summaries.iter().all(|(_, s)| s.direction == Direction::RemoveBad);
    let any_bad = summaries.iter().any(|(_, s)| s.direction == Direction::RemoveBad);
    let gain_header = match (all_bad, any_bad) {
        (true, _) => "Total Loss",
        (false, true) => "Total Gain/Loss",
        _ => "Total Gain",
    };
    let header = [
        "Model",
        "Survival Rate",
        "Survival Time",
        gain_header,
        "Efficiency",
        "Equality",
        "Over-usage",
    ]
    .map(String::from);
    let rows = sorted
        .into_iter()
        .map(|(label, s)| TableRow {
            label: label.clone(),
            survival_rate: fmt1(s.survival_rate),
            survival_time: fmt_mean_std(&s.survival_time),
            gain_or_loss: fmt_mean_std(&s.gain_or_loss),
            efficiency: fmt_mean_std(&s.efficiency),
            equality: fmt_mean_std(&s.equality),
            over_usage: fmt_mean_std(&s.over_usage),
        })
        .collect();
    let runs: Vec<String> = summaries.iter().map(|(_, s)| s.runs.to_string()).collect();
    let noun = if summaries.iter().all(|(_, s)| s.runs == 1) {
        "run"
    } else {
        "runs"
    };
    ResultsTable {
        caption: format!("Mean ± sample std over runs ({} {noun} per row)", runs.join("/")),
        header,
        rows,
    }
}

impl ResultsTable {
    /// Column-aligned plain text.
    pub fn render_text(&self) -> String {
        let mut widths: Vec<usize> = self.header.iter().map(|h| h.chars().count()).collect();
        for r in &self.rows {
            for (w, c) in widths.iter_mut().zip(r.cells()) {
                *w = (*w).max(c.chars().count());
            }
        }
        let line = |cells: Vec<&str>| -> String {
            let padded: Vec<String> = cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
                .collect();
            padded.join(" | ").trim_end().to_string()
        };
        let mut out = String::new();
        out.push_str(&line(self.header.iter().map(String::as_str).collect()));
        out.push('\n');
        out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-"));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&line(r.cells().to_vec()));
            out.push('\n');
        }
        out.push_str(&self.caption);
        out.push('\n');
        out
    }

    pub fn render_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory csv");
        for r in &self.rows {
            w.write_record(r.cells()).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
    }
}

/// Reads every `record.jsonl` below `dir`.
pub fn load_runs_under(dir: &Path) -> Result<Vec<RunRecord>, StoreError> {
    let mut found = Vec::new();
    collect_records(dir, &mut found)?;
    found.sort();
    found.iter().map(|p| load_run(p)).collect()
}

fn collect_records(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), StoreError> {
    let direct = dir.join(RECORD_FILE);
    if direct.is_file() {
        out.push(direct);
    }
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.is_dir() {
            collect_records(&path, out)?;
        }
    }
    Ok(())
}

/// Lines of a file, for tests and tooling.
pub fn read_lines(path: &Path) -> Result<Vec<String>, StoreError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    BufReader::new(file)
        .lines()
        .collect::<Result<_, _>>()
        .map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::MeanStd;

    fn summary(direction: Direction, mean: f64, std: f64) -> MetricsSummary {
        let m = MeanStd { mean, std };
        MetricsSummary {
            direction,
            runs: 3,
            survival_rate: 1.0 / 3.0,
            survival_time: m,
            gain_or_loss: m,
            efficiency: m,
            equality: m,
            over_usage: m,
        }
    }

    #[test]
    fn one_decimal_formatting() {
        assert_eq!(fmt_mean_std(&MeanStd { mean: 12.0, std: 0.0 }), "12.0 ± 0.0");
        assert_eq!(
            fmt_mean_std(&MeanStd {
                mean: 6.333,
                std: 4.933
            }),
            "6.3 ± 4.9"
        );
        assert_eq!(fmt1(100.0 * 20.0 / 120.0), "16.7");
        assert_eq!(fmt1(0.25), "0.3");
        assert_eq!(fmt1(-0.01), "0.0");
    }

    #[test]
    fn table_rows_sorted_and_stable() {
        let t = emit_table(&[
            ("b-model".into(), summary(Direction::HarvestGood, 1.0, 0.0)),
            ("a-model".into(), summary(Direction::HarvestGood, 2.0, 0.5)),
        ]);
        assert_eq!(t.rows.len(), 2);
        assert_eq!(t.rows[0].label, "a-model");
        assert_eq!(t.rows[0].survival_rate, "0.3");
        assert_eq!(t.header[3], "Total Gain");
        let text = t.render_text();
        assert_eq!(
            text,
            emit_table(&[
                ("a-model".into(), summary(Direction::HarvestGood, 2.0, 0.5)),
                ("b-model".into(), summary(Direction::HarvestGood, 1.0, 0.0)),
            ])
            .render_text()
        );
        assert!(t.render_csv().starts_with("Model,Survival Rate"));

        let loss = emit_table(&[("x".into(), summary(Direction::RemoveBad, 130.0, 0.0))]);
        assert_eq!(loss.header[3], "Total Loss");
    }
}
