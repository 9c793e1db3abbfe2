//! Output-file plumbing shared by every report writer: the provenance
//! header line and config hashing.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// First line of every emitted file.
pub fn header_line(config_hash: &str, seed: u64) -> String {
    format!("# pshield {VERSION} config={config_hash} seed={seed}")
}

/// Short SHA-256 digest of a config's canonical text.
pub fn config_hash(text: &str) -> String {
    hex::encode(&Sha256::digest(text.as_bytes())[..8])
}

/// CSV writer whose file already starts with `header` on its own line.
pub fn csv_writer(path: &Path, header: &str) -> Result<csv::Writer<File>> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{header}").map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

pub fn write_text(path: &Path, header: &str, body: &str) -> Result<()> {
    std::fs::write(path, format!("{header}\n{body}")).map_err(|e| Error::io(path, e))
}

/// Plain-text table with right-aligned columns.
pub fn text_table(head: &[String], rows: &[Vec<String>]) -> String {
    let mut width: Vec<usize> = head.iter().map(String::len).collect();
    for r in rows {
        for (w, c) in width.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: &[String]| {
        cells
            .iter()
            .zip(&width)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut out = line(head);
    out.push('\n');
    out.push_str(&"-".repeat(out.len() - 1));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r));
        out.push('\n');
    }
    out
}
