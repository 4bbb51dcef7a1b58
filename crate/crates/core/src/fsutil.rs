use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Write to a sibling temp file, flush, then rename over `path`.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Argument(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::storage(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::storage(&tmp, e))?;
    f.sync_all().map_err(|e| Error::storage(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::storage(path, e))
}
