// SPDX-License-Identifier: MIT OR Apache-2.0

//! Artifact collection and atomic persistence.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::Serialize;

use crate::attn::{modality_string, Modality};
use crate::error::{Error, Result};
use crate::numfmt::{num, to_json};

/// Version stamped into every structured artifact.
pub const SCHEMA_VERSION: u32 = 1;

/// JSON wrapper adding `schema_version` ahead of the payload fields.
#[derive(Serialize)]
pub struct Versioned<'a, T: Serialize> {
    pub schema_version: u32,
    #[serde(flatten)]
    pub body: &'a T,
}

pub fn versioned_json<T: Serialize>(body: &T) -> Result<String> {
    to_json(&Versioned {
        schema_version: SCHEMA_VERSION,
        body,
    })
}

/// Files produced by one run, held in memory until the run succeeds.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Artifacts {
    files: Vec<(String, Vec<u8>)>,
}

impl Artifacts {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds or replaces the file `name`.
    pub fn add(&mut self, name: impl Into<String>, contents: impl Into<Vec<u8>>) {
        let name = name.into();
        let contents = contents.into();
        match self.files.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = contents,
            None => self.files.push((name, contents)),
        }
    }

    pub fn add_json<T: Serialize>(&mut self, name: impl Into<String>, body: &T) -> Result<()> {
        self.add(name, versioned_json(body)?);
        Ok(())
    }

    pub fn names(&self) -> Vec<&str> {
        self.files.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.files.iter().find(|(n, _)| n == name).map(|(_, c)| c.as_slice())
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    /// Writes every file into `dir`, each through a temporary file and a
    /// rename. Returns the written paths.
    pub fn commit(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        self.files.iter().map(|(name, bytes)| write_atomic(&dir.join(name), bytes)).collect()
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<PathBuf> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", file.to_string_lossy(), std::process::id()));
    let res = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if res.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    res?;
    Ok(path.to_path_buf())
}

/// Creates `dir` if needed and proves it writable with a probe file.
pub fn ensure_writable(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let probe = dir.join(format!(".airlens-probe-{}", std::process::id()));
    fs::write(&probe, b"")?;
    fs::remove_file(&probe)?;
    Ok(())
}

/// Matrix CSV with 12-significant-digit values and an optional
/// `# modalities:` header line.
pub fn matrix_csv(m: &Array2<f64>, modalities: Option<&[Modality]>) -> String {
    let mut out = String::new();
    if let Some(mods) = modalities {
        out.push_str(&format!("# modalities: {}\n", modality_string(mods)));
    }
    for row in m.rows() {
        let line: Vec<String> = row.iter().map(|&v| num(v)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}
