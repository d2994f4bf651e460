//! Atomic output directories: everything is written into a hidden staging
//! directory next to the target, which is renamed into place on success. An
//! existing target is refused unless `--force` is given.

use std::path::{Path, PathBuf};

use tempfile::TempDir;

use crate::error::{Error, Result};

pub struct Staged {
    dir: TempDir,
    target: PathBuf,
    force: bool,
}

impl Staged {
    pub fn begin(target: &Path, force: bool) -> Result<Self> {
        if target.exists() && !force {
            return Err(Error::Config(format!("{} already exists; pass --force to replace it", target.display())));
        }
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        std::fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
        let name = target.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
        let dir = tempfile::Builder::new().prefix(&format!(".{name}.staging-")).tempdir_in(&parent).map_err(|e| Error::io(&parent, e))?;
        Ok(Staged { dir, target: target.to_path_buf(), force })
    }

    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    pub fn target(&self) -> &Path {
        &self.target
    }

    /// Moves the staged directory into place. On error the staging
    /// directory is removed and the target left as it was.
    pub fn commit(self) -> Result<PathBuf> {
        if self.target.exists() {
            if !self.force {
                return Err(Error::Config(format!("{} appeared while running; refusing to replace it", self.target.display())));
            }
            let old = if self.target.is_dir() { std::fs::remove_dir_all(&self.target) } else { std::fs::remove_file(&self.target) };
            old.map_err(|e| Error::io(&self.target, e))?;
        }
        let staged = self.dir.keep();
        std::fs::rename(&staged, &self.target).map_err(|e| {
            let _ = std::fs::remove_dir_all(&staged);
            Error::io(&self.target, e)
        })?;
        Ok(self.target)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn refuses_existing_target_without_force() {
        let root = tempfile::tempdir().unwrap();
        let target = root.path().join("out");
        std::fs::create_dir(&target).unwrap();
        assert!(matches!(Staged::begin(&target, false), Err(Error::Config(_))));

        let s = Staged::begin(&target, true).unwrap();
        std::fs::write(s.path().join("f"), "x").unwrap();
        s.commit().unwrap();
        assert_eq!(std::fs::read_to_string(target.join("f")).unwrap(), "x");
    }

    #[test]
    fn dropped_stage_leaves_nothing() {
        let root = tempfile::tempdir().unwrap();
        let target = root.path().join("out");
        drop(Staged::begin(&target, false).unwrap());
        assert!(!target.exists());
        assert_eq!(std::fs::read_dir(root.path()).unwrap().count(), 0);
    }
}
