use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use emap_core::io::{file_hash, RunConfig};
use emap_core::{Error, Result};

const RUN_RECORD: &str = "run.json";

/// Output directory written under `<out>.partial` and renamed to `<out>`
/// only when the command succeeds.
pub struct Staging {
    final_dir: PathBuf,
    dir: PathBuf,
    inputs: BTreeMap<String, String>,
}

impl Staging {
    pub fn begin(out: &Path) -> Result<Self> {
        if out.exists() {
            let replaceable =
                out.join(RUN_RECORD).exists() || fs::read_dir(out).map_err(|e| Error::io(out, e))?.next().is_none();
            if !replaceable {
                return Err(Error::Config(format!(
                    "output directory {} exists and was not written by this tool",
                    out.display()
                )));
            }
        }
        let mut name = out.file_name().unwrap_or_default().to_os_string();
        name.push(".partial");
        let dir = out.with_file_name(name);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Staging {
            final_dir: out.to_path_buf(),
            dir,
            inputs: BTreeMap::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Records the SHA-256 of an input file.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        let hash = file_hash(path)?;
        self.inputs.insert(path.display().to_string(), hash);
        Ok(())
    }

    /// Writes the config echo and the run record, then publishes the directory.
    pub fn commit(self, command: &str, cfg: &RunConfig) -> Result<PathBuf> {
        let echo = self.path("config.ini");
        fs::write(&echo, cfg.to_ini()).map_err(|e| Error::io(&echo, e))?;
        let record = serde_json::json!({
            "command": command,
            "seed": cfg.experiment.seed,
            "inputs": self.inputs,
            "version": env!("CARGO_PKG_VERSION"),
        });
        let path = self.path(RUN_RECORD);
        fs::write(&path, serde_json::to_string_pretty(&record)? + "\n").map_err(|e| Error::io(&path, e))?;
        if self.final_dir.exists() {
            fs::remove_dir_all(&self.final_dir).map_err(|e| Error::io(&self.final_dir, e))?;
        }
        fs::rename(&self.dir, &self.final_dir).map_err(|e| Error::io(&self.final_dir, e))?;
        Ok(self.final_dir)
    }
}
