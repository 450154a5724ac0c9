//! Scenario and run persistence: bundles and run directories on disk, an
//! SQLite index next to them.
//!
//! ```text
//! <data>/index.sqlite
//! <data>/scenarios/<id>/...   bundle files as uploaded
//! <data>/runs/<id>/...        run directory
//! ```
//!
//! Every directory is written under a temporary name and renamed into
//! place; the index row is committed only after the rename.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use rusqlite::{params, Connection, OptionalExtension};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use trackbench_core::ingest::{self, BundleFiles, IngestError};
use trackbench_core::model::{Scenario, TimeAlignment};
use trackbench_core::plugins::PipelineConfig;
use trackbench_core::replay::RunArtifacts;
use trackbench_core::rundir;
use ulid::Ulid;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{0} not found")]
    NotFound(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Db(#[from] rusqlite::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunStatus {
    Pending,
    Running,
    Done,
    Failed,
}

impl RunStatus {
    fn as_str(self) -> &'static str {
        match self {
            RunStatus::Pending => "Pending",
            RunStatus::Running => "Running",
            RunStatus::Done => "Done",
            RunStatus::Failed => "Failed",
        }
    }

    fn parse(s: &str) -> Self {
        match s {
            "Pending" => RunStatus::Pending,
            "Running" => RunStatus::Running,
            "Done" => RunStatus::Done,
            _ => RunStatus::Failed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredScenario {
    pub id: String,
    pub name: String,
    /// Milliseconds since the Unix epoch.
    pub created_at: i64,
    pub bundle_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredRun {
    pub id: String,
    pub scenario_id: String,
    pub created_at: i64,
    pub status: RunStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error_message: Option<String>,
    pub pipeline: PipelineConfig,
    pub seed: u64,
    pub alignment: TimeAlignment,
    pub run_path: PathBuf,
}

pub struct Store {
    root: PathBuf,
    conn: Mutex<Connection>,
    ids: Mutex<ulid::Generator>,
}

fn now_ms() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as i64)
        .unwrap_or(0)
}

const SCHEMA: &str = "
CREATE TABLE IF NOT EXISTS scenarios (
    id TEXT PRIMARY KEY,
    name TEXT NOT NULL,
    created_at INTEGER NOT NULL,
    bundle_path TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS runs (
    id TEXT PRIMARY KEY,
    scenario_id TEXT NOT NULL REFERENCES scenarios(id),
    created_at INTEGER NOT NULL,
    status TEXT NOT NULL,
    error_message TEXT,
    pipeline TEXT NOT NULL,
    seed INTEGER NOT NULL,
    alignment TEXT NOT NULL,
    run_path TEXT NOT NULL
);
";

/// Writes `files` into `<parent>/<name>` through a temporary sibling and a
/// rename. An existing target is replaced.
fn write_dir_atomically(parent: &Path, name: &str, files: &[(String, Vec<u8>)]) -> std::io::Result<PathBuf> {
    fs::create_dir_all(parent)?;
    let tmp = parent.join(format!(".{name}.tmp"));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;
    for (rel, bytes) in files {
        let path = tmp.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&path, bytes)?;
    }
    let target = parent.join(name);
    if target.exists() {
        let old = parent.join(format!(".{name}.old"));
        if old.exists() {
            fs::remove_dir_all(&old)?;
        }
        fs::rename(&target, &old)?;
        fs::rename(&tmp, &target)?;
        fs::remove_dir_all(&old)?;
    } else {
        fs::rename(&tmp, &target)?;
    }
    Ok(target)
}

fn alignment_str(a: TimeAlignment) -> &'static str {
    match a {
        TimeAlignment::AsRecorded => "as_recorded",
        TimeAlignment::CommonStart => "common_start",
    }
}

impl Store {
    /// Opens or creates a store. Runs left Pending or Running by a previous
    /// process are marked Failed.
    pub fn open(root: &Path) -> Result<Self, StoreError> {
        fs::create_dir_all(root.join("scenarios"))?;
        fs::create_dir_all(root.join("runs"))?;
        let conn = Connection::open(root.join("index.sqlite"))?;
        conn.execute_batch(SCHEMA)?;
        conn.execute(
            "UPDATE runs SET status = 'Failed', error_message = 'interrupted by restart'
             WHERE status IN ('Pending', 'Running')",
            [],
        )?;
        Ok(Self {
            root: root.to_path_buf(),
            conn: Mutex::new(conn),
            ids: Mutex::new(ulid::Generator::new()),
        })
    }

    /// Sortable id, strictly increasing within this process.
    fn next_id(&self) -> String {
        let mut g = self.ids.lock().unwrap_or_else(|e| e.into_inner());
        g.generate().unwrap_or_else(|_| Ulid::generate()).to_string()
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn conn(&self) -> std::sync::MutexGuard<'_, Connection> {
        self.conn.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Validates and stores an uploaded bundle, keeping the files byte for
    /// byte.
    pub fn insert_scenario(&self, files: &BundleFiles) -> Result<(StoredScenario, Scenario), StoreError> {
        let (scenario, _) = ingest::scenario_from_files(files)?;
        let id = self.next_id();
        let entries: Vec<(String, Vec<u8>)> = files.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        let path = write_dir_atomically(&self.root.join("scenarios"), &id, &entries)?;
        let stored = StoredScenario {
            id,
            name: if scenario.name.is_empty() { scenario.id.clone() } else { scenario.name.clone() },
            created_at: now_ms(),
            bundle_path: path,
        };
        self.conn().execute(
            "INSERT INTO scenarios (id, name, created_at, bundle_path) VALUES (?1, ?2, ?3, ?4)",
            params![stored.id, stored.name, stored.created_at, stored.bundle_path.to_string_lossy()],
        )?;
        Ok((stored, scenario))
    }

    pub fn list_scenarios(&self) -> Result<Vec<StoredScenario>, StoreError> {
        let conn = self.conn();
        let mut stmt = conn.prepare("SELECT id, name, created_at, bundle_path FROM scenarios ORDER BY id")?;
        let rows = stmt.query_map([], |r| {
            Ok(StoredScenario {
                id: r.get(0)?,
                name: r.get(1)?,
                created_at: r.get(2)?,
                bundle_path: PathBuf::from(r.get::<_, String>(3)?),
            })
        })?;
        Ok(rows.collect::<Result<_, _>>()?)
    }

    pub fn get_scenario(&self, id: &str) -> Result<StoredScenario, StoreError> {
        self.conn()
            .query_row(
                "SELECT id, name, created_at, bundle_path FROM scenarios WHERE id = ?1",
                [id],
                |r| {
                    Ok(StoredScenario {
                        id: r.get(0)?,
                        name: r.get(1)?,
                        created_at: r.get(2)?,
                        bundle_path: PathBuf::from(r.get::<_, String>(3)?),
                    })
                },
            )
            .optional()?
            .ok_or_else(|| StoreError::NotFound(format!("scenario {id}")))
    }

    pub fn load_scenario(&self, id: &str) -> Result<Scenario, StoreError> {
        let stored = self.get_scenario(id)?;
        Ok(ingest::load_scenario(&stored.bundle_path)?)
    }

    pub fn read_scenario_file(&self, id: &str, rel: &str) -> Result<Vec<u8>, StoreError> {
        let stored = self.get_scenario(id)?;
        Ok(fs::read(stored.bundle_path.join(rel))?)
    }

    /// Replaces a stored bundle with `files` after validating them.
    pub fn replace_scenario(&self, id: &str, files: &BundleFiles) -> Result<Scenario, StoreError> {
        self.get_scenario(id)?;
        let (scenario, _) = ingest::scenario_from_files(files)?;
        let entries: Vec<(String, Vec<u8>)> = files.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        write_dir_atomically(&self.root.join("scenarios"), id, &entries)?;
        Ok(scenario)
    }

    pub fn scenario_files(&self, id: &str) -> Result<BundleFiles, StoreError> {
        let stored = self.get_scenario(id)?;
        Ok(ingest::read_bundle(&stored.bundle_path)?)
    }

    pub fn create_run(
        &self,
        scenario_id: &str,
        pipeline: &PipelineConfig,
        seed: u64,
        alignment: TimeAlignment,
    ) -> Result<StoredRun, StoreError> {
        self.get_scenario(scenario_id)?;
        let id = self.next_id();
        let run = StoredRun {
            run_path: self.root.join("runs").join(&id),
            id,
            scenario_id: scenario_id.to_string(),
            created_at: now_ms(),
            status: RunStatus::Pending,
            error_message: None,
            pipeline: pipeline.clone(),
            seed,
            alignment,
        };
        self.conn().execute(
            "INSERT INTO runs (id, scenario_id, created_at, status, error_message, pipeline, seed, alignment, run_path)
             VALUES (?1, ?2, ?3, ?4, NULL, ?5, ?6, ?7, ?8)",
            params![
                run.id,
                run.scenario_id,
                run.created_at,
                run.status.as_str(),
                serde_json::to_string(&run.pipeline)?,
                run.seed as i64,
                alignment_str(alignment),
                run.run_path.to_string_lossy(),
            ],
        )?;
        Ok(run)
    }

    fn row_to_run(r: &rusqlite::Row<'_>) -> rusqlite::Result<(StoredRun, String)> {
        let pipeline: String = r.get(5)?;
        let alignment: String = r.get(7)?;
        Ok((
            StoredRun {
                id: r.get(0)?,
                scenario_id: r.get(1)?,
                created_at: r.get(2)?,
                status: RunStatus::parse(&r.get::<_, String>(3)?),
                error_message: r.get(4)?,
                pipeline: PipelineConfig::standard(),
                seed: r.get::<_, i64>(6)? as u64,
                alignment: if alignment == "as_recorded" {
                    TimeAlignment::AsRecorded
                } else {
                    TimeAlignment::CommonStart
                },
                run_path: PathBuf::from(r.get::<_, String>(8)?),
            },
            pipeline,
        ))
    }

    const RUN_COLUMNS: &'static str =
        "id, scenario_id, created_at, status, error_message, pipeline, seed, alignment, run_path";

    pub fn get_run(&self, id: &str) -> Result<StoredRun, StoreError> {
        let row = self
            .conn()
            .query_row(
                &format!("SELECT {} FROM runs WHERE id = ?1", Self::RUN_COLUMNS),
                [id],
                Self::row_to_run,
            )
            .optional()?;
        let (mut run, pipeline) = row.ok_or_else(|| StoreError::NotFound(format!("run {id}")))?;
        run.pipeline = serde_json::from_str(&pipeline)?;
        Ok(run)
    }

    pub fn list_runs(&self) -> Result<Vec<StoredRun>, StoreError> {
        let conn = self.conn();
        let mut stmt = conn.prepare(&format!("SELECT {} FROM runs ORDER BY id", Self::RUN_COLUMNS))?;
        let rows = stmt.query_map([], Self::row_to_run)?;
        let mut out = Vec::new();
        for row in rows {
            let (mut run, pipeline) = row?;
            run.pipeline = serde_json::from_str(&pipeline)?;
            out.push(run);
        }
        Ok(out)
    }

    pub fn set_status(&self, id: &str, status: RunStatus, error: Option<&str>) -> Result<(), StoreError> {
        let n = self.conn().execute(
            "UPDATE runs SET status = ?2, error_message = ?3 WHERE id = ?1",
            params![id, status.as_str(), error],
        )?;
        if n == 0 {
            return Err(StoreError::NotFound(format!("run {id}")));
        }
        Ok(())
    }

    /// Writes the run directory. The run stays in its current state until
    /// [`commit_run`](Self::commit_run).
    pub fn write_run_files(&self, id: &str, artifacts: &RunArtifacts) -> Result<PathBuf, StoreError> {
        let files: Vec<(String, Vec<u8>)> = rundir::run_files(artifacts)
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        Ok(write_dir_atomically(&self.root.join("runs"), id, &files)?)
    }

    pub fn commit_run(&self, id: &str) -> Result<(), StoreError> {
        self.set_status(id, RunStatus::Done, None)
    }

    /// Writes the artifacts then marks the run Done; any failure marks it
    /// Failed instead.
    pub fn persist_run(&self, id: &str, artifacts: &RunArtifacts) -> Result<StoredRun, StoreError> {
        let outcome = self.write_run_files(id, artifacts).and_then(|_| self.commit_run(id));
        if let Err(e) = outcome {
            let _ = self.set_status(id, RunStatus::Failed, Some(&e.to_string()));
            return Err(e);
        }
        self.get_run(id)
    }
}
