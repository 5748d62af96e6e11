//! Small shared helpers: canonical float formatting and atomic file writes.

use std::io::Write;
use std::path::Path;

/// Formats a float with 17 significant digits, enough to round-trip any f64.
///
/// All CSV artifacts use this so file hashes are meaningful.
pub fn fmt_f64(x: f64) -> String {
    format!("{:.16e}", x)
}

/// Writes a file atomically: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut tmp = tempfile_path(dir, path);
    let mut attempts = 0;
    let file = loop {
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&tmp)
        {
            Ok(f) => break f,
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists && attempts < 16 => {
                attempts += 1;
                tmp = tempfile_path(dir, path);
            }
            Err(e) => return Err(e),
        }
    };
    let mut file = std::io::BufWriter::new(file);
    file.write_all(bytes)?;
    file.flush()?;
    drop(file);
    std::fs::rename(&tmp, path)
}

fn tempfile_path(dir: &Path, target: &Path) -> std::path::PathBuf {
    let stem = target
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".to_string());
    let nonce = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or(0);
    dir.join(format!(".{stem}.{}.{nonce}.tmp", std::process::id()))
}
