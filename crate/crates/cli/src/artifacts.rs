//! Atomic file output and the per-run lock.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::CliError;

/// Writes `bytes` to a sibling temp file, syncs it and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    let ctx = || format!("writing {}", path.display());
    let mut f = File::create(&tmp).map_err(CliError::io(ctx()))?;
    f.write_all(bytes).map_err(CliError::io(ctx()))?;
    f.sync_all().map_err(CliError::io(ctx()))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(CliError::io(ctx()))
}

/// Append-only line stream whose initial content is installed atomically.
pub struct LineLog {
    path: PathBuf,
    file: File,
}

impl LineLog {
    pub fn create(path: &Path, header: Option<&str>) -> Result<Self, CliError> {
        let initial = header.map(|h| format!("{h}\n")).unwrap_or_default();
        write_atomic(path, initial.as_bytes())?;
        let file = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(CliError::io(format!("opening {}", path.display())))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    /// Appends one line with a single write.
    pub fn push(&mut self, line: &str) -> Result<(), CliError> {
        let mut buf = String::with_capacity(line.len() + 1);
        buf.push_str(line);
        buf.push('\n');
        self.file
            .write_all(buf.as_bytes())
            .map_err(CliError::io(format!("appending to {}", self.path.display())))
    }

    pub fn sync(&self) -> Result<(), CliError> {
        self.file
            .sync_all()
            .map_err(CliError::io(format!("syncing {}", self.path.display())))
    }
}

/// Exclusive `.lock` file in a run directory, removed on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(CliError::Locked(dir.display().to_string()))
            }
            Err(e) => Err(CliError::Io {
                context: format!("creating {}", path.display()),
                source: e,
            }),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}
