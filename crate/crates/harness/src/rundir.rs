//! Output directories that never overwrite earlier results.

use std::path::{Path, PathBuf};

use crate::error::Result;

/// Returns `root/<id>` when it does not exist or is empty, and otherwise
/// the first `root/<id>-run-<n>` (n = 1, 2, ...) that does not exist yet.
/// The returned directory is created.
pub fn allocate(root: &Path, id: &str) -> Result<PathBuf> {
    let base = root.join(id);
    if is_free(&base)? {
        std::fs::create_dir_all(&base)?;
        return Ok(base);
    }
    let mut n = 1usize;
    loop {
        let candidate = root.join(format!("{id}-run-{n}"));
        if !candidate.exists() {
            std::fs::create_dir_all(&candidate)?;
            return Ok(candidate);
        }
        n += 1;
    }
}

fn is_free(dir: &Path) -> Result<bool> {
    if !dir.exists() {
        return Ok(true);
    }
    Ok(dir.is_dir() && std::fs::read_dir(dir)?.next().is_none())
}
