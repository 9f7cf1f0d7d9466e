use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chimera_core::metrics::MetricsReport;

pub const LOCK_FILE: &str = ".chimera.lock";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSONL: &str = "metrics.jsonl";
pub const CHECKPOINT: &str = "checkpoint.json";
pub const SUMMARY: &str = "summary.json";
pub const CONFIG_COPY: &str = "config.json";
pub const TRAIN_DATA: &str = "train.dataset";
pub const TEST_DATA: &str = "test.dataset";

/// Exclusive claim on an output directory; removed on drop.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(LOCK_FILE);
        let mut f = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .with_context(|| {
                format!(
                    "output directory {} is in use by another run (remove {} if stale)",
                    dir.display(),
                    path.display()
                )
            })?;
        writeln!(f, "{}", std::process::id())?;
        Ok(Self { path })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Writes to a sibling temp file and renames, so readers never see a torn file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp).with_context(|| format!("writing {}", tmp.display()))?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path).with_context(|| format!("replacing {}", path.display()))
}

pub const CSV_HEADER: [&str; 13] = [
    "run_id",
    "stage",
    "epoch",
    "test_accuracy",
    "precision",
    "recall",
    "auc",
    "split_accuracy",
    "knn_accuracy",
    "mean_alignment",
    "silhouette",
    "partition",
    "losses",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

pub fn csv_row(run_id: &str, r: &MetricsReport) -> Vec<String> {
    let det = r.detection.as_ref();
    let rep = r.representation.as_ref();
    let losses: Vec<String> = r.losses.iter().map(|(k, v)| format!("{k}={v}")).collect();
    vec![
        run_id.to_string(),
        r.stage.clone(),
        r.epoch.to_string(),
        opt(r.test_accuracy),
        opt(det.map(|d| d.precision)),
        opt(det.map(|d| d.recall)),
        opt(det.and_then(|d| d.auc)),
        opt(det.map(|d| d.split_accuracy)),
        opt(rep.map(|x| x.knn_accuracy)),
        opt(rep.map(|x| x.mean_alignment)),
        opt(rep.and_then(|x| x.silhouette)),
        r.partition.as_ref().map(|p| p.to_string()).unwrap_or_default(),
        losses.join(";"),
    ]
}

/// Per-epoch records. Every row is flushed as soon as it is written, so an
/// interrupted run leaves only complete rows behind.
pub struct MetricsSink {
    run_id: String,
    csv: Option<csv::Writer<File>>,
    jsonl: Option<BufWriter<File>>,
}

impl MetricsSink {
    /// Starts both files afresh and replays `history` into them.
    pub fn create(dir: &Path, run_id: &str, csv: bool, jsonl: bool, history: &[MetricsReport]) -> Result<Self> {
        let csv = if csv {
            let mut w = csv::Writer::from_path(dir.join(METRICS_CSV)).context("creating metrics.csv")?;
            w.write_record(CSV_HEADER)?;
            Some(w)
        } else {
            None
        };
        let jsonl = if jsonl {
            Some(BufWriter::new(
                File::create(dir.join(METRICS_JSONL)).context("creating metrics.jsonl")?,
            ))
        } else {
            None
        };
        let mut sink = Self {
            run_id: run_id.to_string(),
            csv,
            jsonl,
        };
        for r in history {
            sink.push(r)?;
        }
        Ok(sink)
    }

    pub fn push(&mut self, r: &MetricsReport) -> Result<()> {
        if let Some(w) = &mut self.csv {
            w.write_record(csv_row(&self.run_id, r))?;
            w.flush()?;
        }
        if let Some(w) = &mut self.jsonl {
            serde_json::to_writer(&mut *w, r)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        Ok(())
    }
}
