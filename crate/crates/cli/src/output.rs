//! Report emission: atomic file writes and the JSONL machine stream.
//!
//! Every artifact is written to a temporary sibling and renamed into place,
//! so a reader polling the output directory never observes a half-written
//! file. Machine reports are JSON Lines: a header object naming the command,
//! target, seed, and tolerances, then one object per result row. Identical
//! inputs produce byte-identical streams.

use serde::Serialize;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

/// Write-then-rename within the destination directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir)?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "report".into());
    // The pid keeps concurrent runs against the same directory from
    // clobbering each other's scratch file.
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

/// One JSON value per line, header first.
pub struct MachineReport {
    lines: Vec<String>,
}

impl MachineReport {
    pub fn new<H: Serialize>(header: &H) -> MachineReport {
        let mut report = MachineReport { lines: Vec::new() };
        report.push(header);
        report
    }

    pub fn push<R: Serialize>(&mut self, row: &R) {
        self.lines
            .push(serde_json::to_string(row).expect("report rows serialize"));
    }

    pub fn write_to(&self, path: &Path) -> io::Result<()> {
        let mut bytes = self.lines.join("\n").into_bytes();
        bytes.push(b'\n');
        write_atomic(path, &bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_existing_content() {
        let dir = std::env::temp_dir().join(format!("quadratura-out-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("report.txt");
        write_atomic(&path, b"first").unwrap();
        write_atomic(&path, b"second").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"second");
        // No scratch files left behind.
        let leftovers: Vec<_> = fs::read_dir(&dir)
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().ends_with(".tmp"))
            .collect();
        assert!(leftovers.is_empty());
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn machine_report_is_one_json_value_per_line() {
        #[derive(Serialize)]
        struct Header {
            command: &'static str,
            seed: u64,
        }
        let mut report = MachineReport::new(&Header {
            command: "check",
            seed: 7,
        });
        report.push(&serde_json::json!({"check": "independence", "pass": true}));
        let text = report.lines.join("\n");
        let mut lines = text.lines();
        assert!(lines.next().unwrap().contains("\"command\":\"check\""));
        assert!(lines.next().unwrap().contains("independence"));
    }
}
