//! Output directories, manifests and the worker pool.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use anyhow::{Context, Result};
use serde_json::json;

use crate::config::RunConfig;

pub const BUILD_ID: &str = env!("HIWAE_BUILD_ID");
pub const OUT_ENV: &str = "HIWAE_OUT";

pub struct Output {
    pub dir: PathBuf,
    written: Mutex<Vec<String>>,
}

impl Output {
    /// `explicit`, else `$HIWAE_OUT/<command>`, else `runs/<command>`.
    pub fn create(explicit: Option<&Path>, command: &str) -> Result<Self> {
        let dir = match explicit {
            Some(d) => d.to_path_buf(),
            None => std::env::var_os(OUT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("runs"))
                .join(command),
        };
        std::fs::create_dir_all(&dir)
            .with_context(|| format!("cannot create output directory {}", dir.display()))?;
        let probe = dir.join(".write-test");
        File::create(&probe)
            .with_context(|| format!("output directory {} is not writable", dir.display()))?;
        std::fs::remove_file(&probe).ok();
        Ok(Output {
            dir,
            written: Mutex::new(Vec::new()),
        })
    }

    /// Opens `rel` for writing, creating parent directories.
    pub fn file(&self, rel: &str) -> Result<BufWriter<File>> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)
                .with_context(|| format!("cannot create {}", parent.display()))?;
        }
        let f = File::create(&path).with_context(|| format!("cannot write {}", path.display()))?;
        self.written.lock().unwrap().push(rel.to_string());
        Ok(BufWriter::new(f))
    }

    pub fn path(&self, rel: &str) -> Result<PathBuf> {
        drop(self.file(rel)?);
        Ok(self.dir.join(rel))
    }

    /// Writes `config.toml` (usable with `--config`) and `manifest.json`.
    pub fn finish(&self, command: &str, cfg: &RunConfig, started: Instant) -> Result<()> {
        std::fs::write(self.dir.join("config.toml"), cfg.to_toml()?)
            .context("cannot write config.toml")?;
        let mut outputs = self.written.lock().unwrap().clone();
        outputs.sort();
        outputs.push("config.toml".into());
        let manifest = json!({
            "command": command,
            "seed": cfg.train.seed,
            "build_id": BUILD_ID,
            "version": env!("CARGO_PKG_VERSION"),
            "workers": cfg.experiment.workers,
            "wall_time_secs": started.elapsed().as_secs_f64(),
            "config": cfg,
            "outputs": outputs,
        });
        let text = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(self.dir.join("manifest.json"), text + "\n")
            .context("cannot write manifest.json")?;
        Ok(())
    }
}

/// Runs `f` over `jobs` on up to `workers` threads. Results keep job order,
/// and the first failing job (in job order) decides the error.
pub fn parallel_map<J, R, F>(jobs: Vec<J>, workers: usize, f: F) -> Result<Vec<R>>
where
    J: Sync,
    R: Send,
    F: Fn(&J) -> Result<R> + Sync,
{
    if workers <= 1 || jobs.len() <= 1 {
        return jobs.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<R>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.min(jobs.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let r = f(&jobs[i]);
                slots.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}
