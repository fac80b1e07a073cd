//! CSV and JSONL report emission. Every CSV gets a header row and a
//! trailing `# config-hash:` comment binding the output to its inputs.

use serde::Serialize;
use sha2::{Digest, Sha256};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use zrp_core::estimators::GateReport;

pub fn config_hash(raw: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(raw);
    hex::encode(hasher.finalize())
}

/// Write gate rows sorted by (test, time) with the standard columns.
pub fn write_gate_csv(path: &Path, rows: &[GateReport], hash: &str) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut rows: Vec<&GateReport> = rows.iter().collect();
    rows.sort_by(|a, b| {
        a.test
            .cmp(&b.test)
            .then(a.time.partial_cmp(&b.time).expect("finite times"))
    });
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "test,t,estimate,se,target,verdict")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.test,
            r.time,
            r.estimate,
            r.se,
            r.target,
            r.verdict()
        )?;
    }
    writeln!(out, "# config-hash: {hash}")?;
    out.flush()
}

/// Write free-form rows under an explicit header.
pub fn write_table_csv(
    path: &Path,
    header: &str,
    lines: &[String],
    hash: &str,
) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{header}")?;
    for line in lines {
        writeln!(out, "{line}")?;
    }
    writeln!(out, "# config-hash: {hash}")?;
    out.flush()
}

#[derive(Serialize)]
pub struct DumpRecord<'a> {
    pub replica: usize,
    pub t: f64,
    pub x: &'a [i64],
    pub a: &'a [f64],
    pub shifts: &'a std::collections::BTreeMap<String, u64>,
}

pub struct JsonlWriter {
    out: BufWriter<std::fs::File>,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> std::io::Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        Ok(JsonlWriter {
            out: BufWriter::new(std::fs::File::create(path)?),
        })
    }

    pub fn write(&mut self, record: &DumpRecord) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        writeln!(self.out)
    }

    pub fn finish(mut self) -> std::io::Result<()> {
        self.out.flush()
    }
}

pub fn out_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}
