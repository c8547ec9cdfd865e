//! Deterministic artifact writing: CSV with a config-hash header comment,
//! '.' decimals, ',' separators, LF endings and 17-significant-digit
//! floats; files land atomically via a rename.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::config::KernelBlock;

/// 17 significant digits, locale-independent.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn config_hash(text: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(16);
    for b in &digest[..8] {
        hex.push_str(&format!("{b:02x}"));
    }
    hex
}

pub fn header_comment(command: &str, hash: &str, kernel: &KernelBlock) -> String {
    format!(
        "# nlgrad {command}; config_sha256={hash}; kernel n={} s={} delta={} a0={} b0={}\n",
        kernel.n,
        fmt_f64(kernel.s),
        fmt_f64(kernel.delta),
        fmt_f64(kernel.a0),
        fmt_f64(kernel.b0)
    )
}

/// Write file contents atomically (temp file plus rename).
pub fn write_atomic(path: &Path, contents: &str) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp: PathBuf = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents.as_bytes())?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// One row of the identity report CSV.
pub struct IdentityRow {
    pub identity: String,
    pub h: f64,
    pub s: f64,
    pub delta: f64,
    pub abs_residual: f64,
    pub rel_residual: f64,
}

pub fn identities_csv(
    command: &str,
    hash: &str,
    kernel: &KernelBlock,
    rows: &[IdentityRow],
) -> String {
    let mut out = header_comment(command, hash, kernel);
    out.push_str("identity,h,s,delta,abs_residual,rel_residual\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.identity,
            fmt_f64(r.h),
            fmt_f64(r.s),
            fmt_f64(r.delta),
            fmt_f64(r.abs_residual),
            fmt_f64(r.rel_residual)
        ));
    }
    out
}
