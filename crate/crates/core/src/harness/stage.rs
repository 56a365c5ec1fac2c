use std::ffi::CString;
use std::fs::{self, File};
use std::io;
use std::os::unix::ffi::OsStrExt;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::checksum::digest_file;

#[derive(Debug, Error)]
pub enum StageError {
    #[error("not enough space in {dir}: need {needed} bytes, {available} available")]
    NoSpace {
        dir: PathBuf,
        needed: u64,
        available: u64,
    },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StageReport {
    /// Staged copies, in input order.
    pub paths: Vec<PathBuf>,
    pub copied: usize,
    /// Files already present with matching size, mtime and checksum.
    pub skipped: usize,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StageError + '_ {
    move |source| StageError::Io {
        path: path.to_owned(),
        source,
    }
}

fn available_bytes(dir: &Path) -> Result<u64, StageError> {
    let c = CString::new(dir.as_os_str().as_bytes())
        .map_err(|e| io_err(dir)(io::Error::new(io::ErrorKind::InvalidInput, e)))?;
    let mut st: libc::statvfs = unsafe { std::mem::zeroed() };
    // SAFETY: `c` is a valid NUL-terminated path and `st` a valid out-pointer.
    if unsafe { libc::statvfs(c.as_ptr(), &mut st) } != 0 {
        return Err(io_err(dir)(io::Error::last_os_error()));
    }
    Ok(st.f_bavail as u64 * st.f_frsize as u64)
}

fn is_current(src: &Path, dst: &Path, src_meta: &fs::Metadata) -> Result<bool, StageError> {
    let Ok(dst_meta) = fs::metadata(dst) else {
        return Ok(false);
    };
    if dst_meta.len() != src_meta.len() || dst_meta.modified().ok() != src_meta.modified().ok() {
        return Ok(false);
    }
    let a = digest_file(src).map_err(io_err(src))?;
    let b = digest_file(dst).map_err(io_err(dst))?;
    Ok(a == b)
}

/// Copies `paths` into `stage_dir` (created if missing), keeping file names.
/// Copies that are already current are left alone. Free space is checked
/// before anything is written.
pub fn stage_files(paths: &[PathBuf], stage_dir: &Path) -> Result<StageReport, StageError> {
    fs::create_dir_all(stage_dir).map_err(io_err(stage_dir))?;
    let mut plan = Vec::with_capacity(paths.len());
    let mut needed = 0u64;
    for src in paths {
        let meta = fs::metadata(src).map_err(io_err(src))?;
        let name = src.file_name().ok_or_else(|| {
            io_err(src)(io::Error::new(io::ErrorKind::InvalidInput, "not a file path"))
        })?;
        let dst = stage_dir.join(name);
        let current = is_current(src, &dst, &meta)?;
        if !current {
            let existing = fs::metadata(&dst).map_or(0, |m| m.len());
            needed += meta.len().saturating_sub(existing);
        }
        plan.push((src, dst, meta, current));
    }
    let available = available_bytes(stage_dir)?;
    if needed > available {
        return Err(StageError::NoSpace {
            dir: stage_dir.to_owned(),
            needed,
            available,
        });
    }

    let mut report = StageReport::default();
    for (src, dst, meta, current) in plan {
        if current {
            report.skipped += 1;
        } else {
            let tmp = dst.with_extension("staging");
            fs::copy(src, &tmp).map_err(io_err(&tmp))?;
            if let Ok(mtime) = meta.modified() {
                File::options()
                    .write(true)
                    .open(&tmp)
                    .and_then(|f| f.set_modified(mtime))
                    .map_err(io_err(&tmp))?;
            }
            fs::rename(&tmp, &dst).map_err(io_err(&dst))?;
            report.copied += 1;
        }
        report.paths.push(dst);
    }
    Ok(report)
}
