use std::fs::{File, OpenOptions};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use memmap2::MmapMut;
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Where the H2 image lives.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum BackingKind {
    /// Sparse file in the system temp directory, removed on drop.
    #[default]
    TempFile,
    /// Sparse file at the given path. The file is truncated on open.
    File(PathBuf),
    /// Anonymous shared memory; no file at all.
    Anonymous,
}

impl From<String> for BackingKind {
    fn from(s: String) -> Self {
        match s.as_str() {
            "temp" | "" => BackingKind::TempFile,
            "anonymous" | "anon" => BackingKind::Anonymous,
            _ => BackingKind::File(PathBuf::from(s)),
        }
    }
}

impl From<BackingKind> for String {
    fn from(b: BackingKind) -> Self {
        match b {
            BackingKind::TempFile => "temp".into(),
            BackingKind::Anonymous => "anonymous".into(),
            BackingKind::File(p) => p.display().to_string(),
        }
    }
}

/// The mapped H2 image. Reads and writes go straight to the mapping; the
/// batched writer goes through the file descriptor instead.
pub struct Backing {
    map: MmapMut,
    file: Option<File>,
    remove_on_drop: Option<PathBuf>,
}

static TEMP_COUNTER: AtomicU64 = AtomicU64::new(0);

impl Backing {
    pub fn open(kind: &BackingKind, size: u64) -> Result<Self> {
        match kind {
            BackingKind::Anonymous => {
                Ok(Backing { map: MmapMut::map_anon(size as usize)?, file: None, remove_on_drop: None })
            }
            BackingKind::File(path) => Self::open_file(path, size, false),
            BackingKind::TempFile => {
                let n = TEMP_COUNTER.fetch_add(1, Ordering::Relaxed);
                let path =
                    std::env::temp_dir().join(format!("duoheap-h2-{}-{n}.img", std::process::id()));
                Self::open_file(&path, size, true)
            }
        }
    }

    fn open_file(path: &Path, size: u64, temporary: bool) -> Result<Self> {
        let file = OpenOptions::new().read(true).write(true).create(true).truncate(true).open(path)?;
        file.set_len(size)?;
        // SAFETY: the file is private to this process for the lifetime of the
        // mapping; nothing else truncates it while mapped.
        let map = unsafe { MmapMut::map_mut(&file)? };
        Ok(Backing { map, file: Some(file), remove_on_drop: temporary.then(|| path.to_path_buf()) })
    }

    pub fn is_file(&self) -> bool {
        self.file.is_some()
    }

    #[inline]
    pub fn bytes(&self) -> &[u8] {
        &self.map
    }

    #[inline]
    pub fn bytes_mut(&mut self) -> &mut [u8] {
        &mut self.map
    }

    /// A handle for writing the image from worker threads.
    ///
    /// The caller must not touch the mapping through `bytes`/`bytes_mut`
    /// while sinks are writing.
    pub(crate) fn sink(&mut self) -> Sink {
        match &self.file {
            Some(f) => Sink::File(f.try_clone().expect("dup H2 backing descriptor")),
            None => Sink::Memory { ptr: self.map.as_mut_ptr(), len: self.map.len() },
        }
    }
}

impl Drop for Backing {
    fn drop(&mut self) {
        if let Some(p) = &self.remove_on_drop {
            let _ = std::fs::remove_file(p);
        }
    }
}

pub(crate) enum Sink {
    File(File),
    Memory { ptr: *mut u8, len: usize },
}

// SAFETY: memory sinks are only used for disjoint ranges while the owning
// Backing is not otherwise accessed (see `Backing::sink`).
unsafe impl Send for Sink {}
unsafe impl Sync for Sink {}

impl Sink {
    pub(crate) fn write_at(&self, offset: u64, data: &[u8]) -> std::io::Result<()> {
        match self {
            Sink::File(f) => f.write_all_at(data, offset),
            Sink::Memory { ptr, len } => {
                assert!(offset as usize + data.len() <= *len);
                // SAFETY: bounds checked above; ranges written by concurrent
                // flushes never overlap.
                unsafe {
                    std::ptr::copy_nonoverlapping(data.as_ptr(), ptr.add(offset as usize), data.len())
                };
                Ok(())
            }
        }
    }
}
