//! Timestamped run directories and per-directory write locks.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::CliError;

pub const TOOL_VERSION: &str = concat!("ddnet ", env!("CARGO_PKG_VERSION"));

/// Exclusive write access to a directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
        let path = dir.join(".lock");
        let mut f = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                CliError::Runtime(format!("{} is locked by another command ({})", dir.display(), path.display()))
            } else {
                CliError::Runtime(format!("{}: {e}", path.display()))
            }
        })?;
        let _ = writeln!(f, "{}", std::process::id());
        Ok(Self { path })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Output directory of one command invocation.
#[derive(Debug)]
pub struct RunDir {
    pub path: PathBuf,
    _lock: DirLock,
}

impl RunDir {
    /// Creates `<root>/<UTC timestamp>-<command>` and records the resolved
    /// config and tool version in it.
    pub fn create(root: &Path, command: &str, resolved_config: &str) -> Result<Self, CliError> {
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ");
        fs::create_dir_all(root).map_err(|e| CliError::Runtime(format!("{}: {e}", root.display())))?;
        let mut path = root.join(format!("{stamp}-{command}"));
        let mut n = 1;
        while path.exists() {
            n += 1;
            path = root.join(format!("{stamp}-{command}-{n}"));
        }
        let lock = DirLock::acquire(&path)?;
        let run = Self { path, _lock: lock };
        run.write("config.toml", resolved_config)?;
        run.write("VERSION", &format!("{TOOL_VERSION}\n"))?;
        Ok(run)
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&self, name: &str, body: &str) -> Result<PathBuf, CliError> {
        let p = self.file(name);
        fs::write(&p, body).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?;
        Ok(p)
    }
}

/// Most recent run directory of `command` under `root`.
pub fn latest_run(root: &Path, command: &str) -> Result<PathBuf, CliError> {
    let entries = fs::read_dir(root).map_err(|e| CliError::Runtime(format!("{}: {e}", root.display())))?;
    let suffix = format!("-{command}");
    let mut best: Option<(String, u32, PathBuf)> = None;
    for entry in entries.flatten() {
        let name = entry.file_name().to_string_lossy().into_owned();
        let Some((stamp, rest)) = name.split_once('-') else { continue };
        let rest = format!("-{rest}");
        let n = if rest == suffix {
            1
        } else if let Some(k) = rest.strip_prefix(&format!("{suffix}-")).and_then(|k| k.parse().ok()) {
            k
        } else {
            continue;
        };
        let key = (stamp.to_string(), n);
        if best.as_ref().is_none_or(|(s, m, _)| (s.clone(), *m) < key) {
            best = Some((key.0, key.1, entry.path()));
        }
    }
    best.map(|(_, _, p)| p)
        .ok_or_else(|| CliError::Runtime(format!("no {command} run found under {}", root.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let a = DirLock::acquire(dir.path()).unwrap();
        assert!(DirLock::acquire(dir.path()).is_err());
        drop(a);
        DirLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn run_dirs_record_config_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let a = RunDir::create(dir.path(), "run-baseline", "x = 1\n").unwrap();
        let b = RunDir::create(dir.path(), "run-baseline", "x = 1\n").unwrap();
        assert_ne!(a.path, b.path);
        assert_eq!(fs::read_to_string(a.file("config.toml")).unwrap(), "x = 1\n");
        assert!(fs::read_to_string(a.file("VERSION")).unwrap().starts_with("ddnet "));
        let latest = latest_run(dir.path(), "run-baseline").unwrap();
        assert_eq!(latest, b.path);
        assert!(latest_run(dir.path(), "run-operational").is_err());
    }
}
