//! Run directories: trace files plus a manifest, written all-or-nothing.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;

use tqs_core::sim::{self, ExperimentConfig};
use tqs_core::trace::RunSummary;

pub const CONFIG_FILE: &str = "config.json";
pub const OPS_FILE: &str = "ops.csv";
pub const SNAPSHOTS_FILE: &str = "snapshots.csv";
pub const MESSAGES_FILE: &str = "messages.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub config_digest: String,
    pub trace_digest: String,
    pub seed: u64,
    pub version: String,
    pub out_dir: PathBuf,
    pub outputs: BTreeMap<String, PathBuf>,
    pub started_at: String,
    pub finished_at: String,
    pub ops: u64,
    pub completed: u64,
    pub summary: RunSummary,
}

/// Files written so far; removed again unless the run is committed.
struct Pending {
    files: Vec<PathBuf>,
    dir: Option<PathBuf>,
    committed: bool,
}

impl Pending {
    fn write(&mut self, path: PathBuf, bytes: &[u8]) -> anyhow::Result<()> {
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.files.push(path);
        Ok(())
    }
}

impl Drop for Pending {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for f in &self.files {
            let _ = std::fs::remove_file(f);
        }
        if let Some(d) = &self.dir {
            let _ = std::fs::remove_dir(d);
        }
    }
}

/// Runs `cfg` and writes config, trace and manifest into `dir`.
pub fn write_run(cfg: &ExperimentConfig, dir: &Path) -> anyhow::Result<Manifest> {
    let started_at = chrono::Utc::now().to_rfc3339();
    let created_dir = !dir.exists();
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut pending = Pending { files: Vec::new(), dir: created_dir.then(|| dir.to_path_buf()), committed: false };

    log::info!("running seed {} for {} time units", cfg.seed, cfg.duration);
    let bundle = sim::run(cfg)?;
    if bundle.summary.truncated {
        log::warn!("event queue ran dry at t={} before the configured duration", bundle.summary.end_time);
    }

    let mut outputs = BTreeMap::new();
    let mut emit = |name: &str, bytes: &[u8]| -> anyhow::Result<()> {
        let path = dir.join(name);
        pending.write(path.clone(), bytes)?;
        outputs.insert(name.to_string(), path);
        Ok(())
    };
    emit(CONFIG_FILE, cfg.to_json().as_bytes())?;
    emit(OPS_FILE, &bundle.ops_csv())?;
    emit(SNAPSHOTS_FILE, &bundle.snapshots_csv())?;
    if cfg.record_messages {
        emit(MESSAGES_FILE, &bundle.messages_csv())?;
    }
    let manifest = Manifest {
        config_digest: cfg.digest(),
        trace_digest: bundle.digest(),
        seed: cfg.seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        out_dir: dir.to_path_buf(),
        outputs,
        started_at,
        finished_at: chrono::Utc::now().to_rfc3339(),
        ops: bundle.ops.len() as u64,
        completed: bundle.ops.iter().filter(|o| o.is_completed()).count() as u64,
        summary: bundle.summary.clone(),
    };
    pending.write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    pending.committed = true;
    Ok(manifest)
}

/// One CSV row per sweep run.
pub fn sweep_table(runs: &[ExperimentConfig], manifests: &[Manifest]) -> String {
    let mut out = String::from("run,seed,n,c,delta,beta,k,duration,ops,completed,trace_digest,dir\n");
    for (i, (cfg, m)) in runs.iter().zip(manifests).enumerate() {
        let p = &cfg.params;
        let _ = writeln!(
            out,
            "{i},{},{},{},{},{},{},{},{},{},{},{}",
            cfg.seed,
            p.n,
            p.c,
            p.delta,
            p.beta,
            p.k,
            cfg.duration,
            m.ops,
            m.completed,
            m.trace_digest,
            m.out_dir.display()
        );
    }
    out
}
