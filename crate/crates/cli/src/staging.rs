//! Artifacts are written to a hidden staging directory and only moved into
//! the output directory once the whole command has succeeded.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use tprnn::{Error, Result};

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub struct Staging {
    dir: PathBuf,
    out: PathBuf,
    files: Vec<String>,
    committed: bool,
    created_out: bool,
}

impl Staging {
    pub fn new(out: &Path) -> Result<Self> {
        let created_out = !out.exists();
        fs::create_dir_all(out).map_err(io(out))?;
        let nanos = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.subsec_nanos())
            .unwrap_or(0);
        let dir = out.join(format!(".staging-{}-{nanos}", std::process::id()));
        fs::create_dir(&dir).map_err(io(&dir))?;
        Ok(Self {
            dir,
            out: out.to_path_buf(),
            files: Vec::new(),
            committed: false,
            created_out,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Path inside the staging area; the file is moved on commit.
    pub fn path(&mut self, name: &str) -> PathBuf {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_owned());
        }
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io(parent))?;
        }
        fs::write(&path, bytes).map_err(io(&path))
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    /// Moves every staged file into the output directory.
    pub fn commit(mut self) -> Result<Vec<PathBuf>> {
        let mut moved = Vec::with_capacity(self.files.len());
        for name in &self.files {
            let (from, to) = (self.dir.join(name), self.out.join(name));
            if let Some(parent) = to.parent() {
                fs::create_dir_all(parent).map_err(io(parent))?;
            }
            fs::rename(&from, &to).map_err(io(&to))?;
            moved.push(to);
        }
        self.committed = true;
        let _ = fs::remove_dir_all(&self.dir);
        Ok(moved)
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.dir);
            if self.created_out {
                // Fails harmlessly if something else was put there meanwhile.
                let _ = fs::remove_dir(&self.out);
            }
        }
    }
}
