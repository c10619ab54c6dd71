use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Environment variable that supplies the run directory when `--out` is
/// not given.
pub const RUN_DIR_ENV: &str = "ORALBB_RUN_DIR";

/// Layout of a training run:
///
/// ```text
/// <root>/checkpoints/{best,last}.ckpt
/// <root>/history.csv
/// <root>/report.json
/// <root>/config.cfg
/// <root>/plots/
/// ```
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let d = RunDir::new(root);
        for dir in [d.checkpoints(), d.plots()] {
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        Ok(d)
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn best_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("best.ckpt")
    }

    pub fn last_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("last.ckpt")
    }

    pub fn history(&self) -> PathBuf {
        self.root.join("history.csv")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.cfg")
    }

    pub fn plots(&self) -> PathBuf {
        self.root.join("plots")
    }

    /// Resolves a checkpoint argument: a file is used as is, a run directory
    /// maps to its best checkpoint, and `<run>/best` or `<run>/last` name
    /// the corresponding file.
    pub fn resolve_checkpoint(path: &Path) -> PathBuf {
        if path.is_file() {
            return path.to_path_buf();
        }
        if path.is_dir() {
            return RunDir::new(path).best_checkpoint();
        }
        match (path.file_name().and_then(|n| n.to_str()), path.parent()) {
            (Some(name @ ("best" | "last")), Some(parent)) => {
                RunDir::new(parent).checkpoints().join(format!("{name}.ckpt"))
            }
            _ => path.to_path_buf(),
        }
    }
}
