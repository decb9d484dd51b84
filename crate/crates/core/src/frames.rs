//! Where a backend finds the pixels for a frame index.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum FrameSource {
    Path(PathBuf),
    Inline(Vec<u8>),
    Url(String),
    /// No pixels available. Fine for oracle and fixture backends only.
    Placeholder,
}

pub trait FrameLibrary: Send + Sync {
    fn source(&self, frame: usize) -> FrameSource;
}

/// Frames without pixel data.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoFrames;

impl FrameLibrary for NoFrames {
    fn source(&self, _frame: usize) -> FrameSource {
        FrameSource::Placeholder
    }
}

/// Numbered image files in a directory, sorted by file name.
///
/// `offset` maps frame `i` of a virtual crop onto file `offset + i`.
#[derive(Debug, Clone)]
pub struct FrameDirectory {
    files: Vec<PathBuf>,
    offset: usize,
}

impl FrameDirectory {
    pub fn open(dir: &Path) -> Result<Self> {
        Ok(Self {
            files: list_frame_files(dir)?,
            offset: 0,
        })
    }

    pub fn with_offset(mut self, offset: usize) -> Self {
        self.offset = offset;
        self
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }
}

impl FrameLibrary for FrameDirectory {
    fn source(&self, frame: usize) -> FrameSource {
        self.files
            .get(self.offset + frame)
            .map(|p| FrameSource::Path(p.clone()))
            .unwrap_or(FrameSource::Placeholder)
    }
}

const IMAGE_EXTENSIONS: &[&str] = &["jpg", "jpeg", "png", "webp", "bmp"];

/// Image files directly inside `dir`, sorted by name.
pub fn list_frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::invalid(format!("{} is not a directory", dir.display())));
    }
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            .unwrap_or(false);
        if is_image && path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}
