//! Atomic output: every file is staged as a temp file in the target
//! directory and renamed into place only after all of them are complete.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use tempfile::NamedTempFile;

pub struct Staged {
    dir: PathBuf,
    files: Vec<(NamedTempFile, PathBuf)>,
}

impl Staged {
    pub fn new(dir: &Path) -> anyhow::Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn temp(&self) -> anyhow::Result<NamedTempFile> {
        tempfile::Builder::new()
            .prefix(".adashrink-")
            .tempfile_in(&self.dir)
            .with_context(|| format!("cannot create a temp file in {}", self.dir.display()))
    }

    /// Stages a CSV file from serializable rows.
    pub fn csv<R: Serialize>(
        &mut self,
        name: &str,
        rows: impl IntoIterator<Item = R>,
    ) -> anyhow::Result<()> {
        let tmp = self.temp()?;
        let mut w = csv::Writer::from_writer(tmp);
        for r in rows {
            w.serialize(r)?;
        }
        let tmp = w.into_inner().map_err(|e| e.into_error())?;
        self.files.push((tmp, self.dir.join(name)));
        Ok(())
    }

    /// Stages a CSV file with a header computed at run time.
    pub fn table(
        &mut self,
        name: &str,
        header: &[String],
        rows: &[Vec<String>],
    ) -> anyhow::Result<()> {
        let tmp = self.temp()?;
        let mut w = csv::Writer::from_writer(tmp);
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        let tmp = w.into_inner().map_err(|e| e.into_error())?;
        self.files.push((tmp, self.dir.join(name)));
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> anyhow::Result<()> {
        let mut tmp = self.temp()?;
        serde_json::to_writer_pretty(&mut tmp, value)?;
        tmp.write_all(b"\n")?;
        self.files.push((tmp, self.dir.join(name)));
        Ok(())
    }

    /// Syncs and renames every staged file; returns the final paths.
    pub fn commit(self) -> anyhow::Result<Vec<PathBuf>> {
        let mut out = Vec::with_capacity(self.files.len());
        for (tmp, _) in &self.files {
            tmp.as_file().sync_all()?;
        }
        for (tmp, path) in self.files {
            tmp.persist(&path)
                .with_context(|| format!("cannot write {}", path.display()))?;
            out.push(path);
        }
        Ok(out)
    }
}
