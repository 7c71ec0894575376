//! All-or-nothing output files. Contents are staged in temporary files next
//! to their destinations and only renamed into place once the whole command
//! has succeeded.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use tempfile::NamedTempFile;

#[derive(Default)]
pub struct Outputs {
    staged: Vec<(NamedTempFile, PathBuf)>,
    stdout: Vec<u8>,
}

impl Outputs {
    pub fn stage(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let mut tmp = NamedTempFile::new_in(dir)
            .with_context(|| format!("cannot write into {}", dir.display()))?;
        tmp.write_all(bytes)?;
        tmp.as_file().sync_all()?;
        self.staged.push((tmp, path.to_path_buf()));
        Ok(())
    }

    /// Write to `path`, or to stdout when no path is given.
    pub fn emit(&mut self, path: Option<&Path>, bytes: &[u8]) -> Result<()> {
        match path {
            Some(p) => self.stage(p, bytes),
            None => {
                self.stdout.extend_from_slice(bytes);
                Ok(())
            }
        }
    }

    pub fn commit(self) -> Result<()> {
        let mut done: Vec<PathBuf> = Vec::new();
        for (tmp, path) in self.staged {
            if let Err(e) = tmp.persist(&path) {
                for p in &done {
                    let _ = std::fs::remove_file(p);
                }
                return Err(e.error).with_context(|| format!("cannot create {}", path.display()));
            }
            done.push(path);
        }
        std::io::stdout().write_all(&self.stdout)?;
        Ok(())
    }
}

/// `<path>.run.toml`, the config sidecar of a binary or data artifact.
pub fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".run.toml");
    PathBuf::from(s)
}
