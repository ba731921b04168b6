use std::fs;
use std::io;
use std::path::{Path, PathBuf};

/// Creates `<out>/<UTC timestamp>-<name>`, appending `-1`, `-2`, ... when
/// that directory already exists.
pub fn create_run_dir(out: &Path, name: &str) -> io::Result<PathBuf> {
    fs::create_dir_all(out)?;
    let name: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.+".contains(c) { c } else { '_' })
        .collect();
    let base = format!("{}-{name}", chrono::Utc::now().format("%Y%m%d-%H%M%S"));
    let mut n = 0usize;
    loop {
        let dir = if n == 0 {
            out.join(&base)
        } else {
            out.join(format!("{base}-{n}"))
        };
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => n += 1,
            Err(e) => return Err(e),
        }
    }
}
