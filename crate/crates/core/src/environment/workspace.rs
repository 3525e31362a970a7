//! Sandboxed task workspace with per-file undo stacks.

use std::collections::HashMap;
use std::path::{Component, Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::fs::{FileSystem, StdFs};
use super::EnvError;

static TEMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// One run's working directory. Every path argument is resolved relative to
/// `root`; nothing outside it is read or written.
#[derive(Debug)]
pub struct Workspace {
    root: PathBuf,
    fs: Arc<dyn FileSystem>,
    /// Prior contents per file, most recent last. `None` means the file did
    /// not exist before the edit, so undo deletes it.
    backups: HashMap<PathBuf, Vec<Option<Vec<u8>>>>,
}

impl Workspace {
    pub fn open(root: impl AsRef<Path>) -> Result<Self, EnvError> {
        Self::with_fs(root, Arc::new(StdFs))
    }

    pub fn with_fs(root: impl AsRef<Path>, fs: Arc<dyn FileSystem>) -> Result<Self, EnvError> {
        let root = fs
            .canonicalize(root.as_ref())
            .map_err(|e| EnvError::Io(format!("workspace root {}: {e}", root.as_ref().display())))?;
        if !fs.is_dir(&root) {
            return Err(EnvError::NotADirectory(root.display().to_string()));
        }
        Ok(Workspace { root, fs, backups: HashMap::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn fs(&self) -> &Arc<dyn FileSystem> {
        &self.fs
    }

    /// Lexically normalizes `rel` and rejects anything that leaves the root:
    /// absolute paths, `..` past the top, or a symlink resolving outside.
    pub fn resolve(&self, rel: &str) -> Result<PathBuf, EnvError> {
        let escape = || EnvError::PathEscapesSandbox(rel.to_string());
        if rel.contains('\0') {
            return Err(escape());
        }
        let mut parts: Vec<&std::ffi::OsStr> = Vec::new();
        for comp in Path::new(rel.trim()).components() {
            match comp {
                Component::Normal(p) => parts.push(p),
                Component::CurDir => {}
                Component::ParentDir => {
                    if parts.pop().is_none() {
                        return Err(escape());
                    }
                }
                Component::RootDir | Component::Prefix(_) => return Err(escape()),
            }
        }

        let mut current = self.root.clone();
        for part in parts {
            current.push(part);
            if !self.fs.exists(&current) {
                continue;
            }
            if self.fs.is_symlink(&current).unwrap_or(false) {
                match self.fs.canonicalize(&current) {
                    Ok(target) if target.starts_with(&self.root) => {}
                    _ => return Err(escape()),
                }
            }
        }
        Ok(current)
    }

    /// Path relative to the root, used as the undo-stack key.
    fn key(&self, abs: &Path) -> PathBuf {
        abs.strip_prefix(&self.root).unwrap_or(abs).to_path_buf()
    }

    pub fn list(&self, dir: &str) -> Result<Vec<String>, EnvError> {
        let path = self.resolve(dir)?;
        if !self.fs.exists(&path) {
            return Err(EnvError::FileNotFound(dir.to_string()));
        }
        if !self.fs.is_dir(&path) {
            return Err(EnvError::NotADirectory(dir.to_string()));
        }
        let mut names: Vec<String> = self
            .fs
            .read_dir(&path)
            .map_err(|e| EnvError::Io(e.to_string()))?
            .into_iter()
            .filter(|e| !is_temp_name(&e.name))
            .map(|e| if e.is_dir { format!("{}/", e.name) } else { e.name })
            .collect();
        names.sort();
        Ok(names)
    }

    pub fn read(&self, file: &str) -> Result<Vec<u8>, EnvError> {
        let path = self.resolve(file)?;
        if !self.fs.exists(&path) {
            return Err(EnvError::FileNotFound(file.to_string()));
        }
        if self.fs.is_dir(&path) {
            return Err(EnvError::InvalidInput(format!("{file} is a directory")));
        }
        self.fs.read(&path).map_err(|e| EnvError::Io(e.to_string()))
    }

    pub fn exists(&self, file: &str) -> Result<bool, EnvError> {
        let path = self.resolve(file)?;
        Ok(self.fs.exists(&path))
    }

    /// Writes through a temp file in the same directory, then renames.
    fn write_atomic(&self, path: &Path, data: &[u8]) -> Result<(), EnvError> {
        let parent = path.parent().unwrap_or(&self.root);
        if !self.fs.exists(parent) {
            self.fs.create_dir_all(parent).map_err(|e| EnvError::Io(e.to_string()))?;
        }
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let tmp =
            parent.join(format!(".{name}.tmp-{}-{}", std::process::id(), TEMP_COUNTER.fetch_add(1, Ordering::Relaxed)));
        self.fs.write(&tmp, data).map_err(|e| EnvError::Io(e.to_string()))?;
        self.fs.rename(&tmp, path).map_err(|e| {
            let _ = self.fs.remove_file(&tmp);
            EnvError::Io(e.to_string())
        })
    }

    pub fn write(&self, file: &str, data: &[u8]) -> Result<(), EnvError> {
        let path = self.resolve(file)?;
        if path == self.root || self.fs.is_dir(&path) {
            return Err(EnvError::InvalidInput(format!("{file} is a directory")));
        }
        self.write_atomic(&path, data)
    }

    pub fn append(&self, file: &str, data: &[u8]) -> Result<(), EnvError> {
        let path = self.resolve(file)?;
        if path == self.root || self.fs.is_dir(&path) {
            return Err(EnvError::InvalidInput(format!("{file} is a directory")));
        }
        let mut content = if self.fs.exists(&path) {
            self.fs.read(&path).map_err(|e| EnvError::Io(e.to_string()))?
        } else {
            Vec::new()
        };
        content.extend_from_slice(data);
        self.write_atomic(&path, &content)
    }

    pub fn copy(&self, source: &str, destination: &str, overwrite: bool) -> Result<(), EnvError> {
        let data = self.read(source)?;
        let dest = self.resolve(destination)?;
        if self.fs.exists(&dest) && !overwrite {
            return Err(EnvError::OverwriteRefused(destination.to_string()));
        }
        if dest == self.root || self.fs.is_dir(&dest) {
            return Err(EnvError::InvalidInput(format!("{destination} is a directory")));
        }
        self.write_atomic(&dest, &data)
    }

    /// Replaces `file` with `data`, remembering the previous content (or its
    /// absence) for [`Workspace::undo`].
    pub fn edit_with_backup(&mut self, file: &str, data: &[u8]) -> Result<(), EnvError> {
        let path = self.resolve(file)?;
        if path == self.root || self.fs.is_dir(&path) {
            return Err(EnvError::InvalidInput(format!("{file} is a directory")));
        }
        let previous = if self.fs.exists(&path) {
            Some(self.fs.read(&path).map_err(|e| EnvError::Io(e.to_string()))?)
        } else {
            None
        };
        self.write_atomic(&path, data)?;
        self.backups.entry(self.key(&path)).or_default().push(previous);
        Ok(())
    }

    /// Restores the most recent backup. Returns the restored content, or
    /// `None` when the undo removed a file the edit had created.
    pub fn undo(&mut self, file: &str) -> Result<Option<Vec<u8>>, EnvError> {
        let path = self.resolve(file)?;
        let key = self.key(&path);
        let snapshot =
            self.backups.get_mut(&key).and_then(Vec::pop).ok_or_else(|| EnvError::NothingToUndo(file.to_string()))?;
        match &snapshot {
            Some(bytes) => self.write_atomic(&path, bytes)?,
            None => {
                if self.fs.exists(&path) {
                    self.fs.remove_file(&path).map_err(|e| EnvError::Io(e.to_string()))?;
                }
            }
        }
        Ok(snapshot)
    }

    pub fn undo_depth(&self, file: &str) -> usize {
        self.resolve(file).ok().and_then(|p| self.backups.get(&self.key(&p)).map(Vec::len)).unwrap_or(0)
    }
}

fn is_temp_name(name: &str) -> bool {
    name.starts_with('.') && name.contains(".tmp-")
}
