//! Serialization of results: JSON with round-trippable floats, CSV tables,
//! and an output directory that refuses to overwrite.

use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::ser::{Formatter, PrettyFormatter};
use serde_json::Value;
use tapamp::ensemble::{check_schema_version, EnsembleReport, SCHEMA_VERSION};

use crate::CliError;

/// Pretty JSON with every `f64` printed as `{:.16e}`, which round-trips.
struct PreciseFormatter<'a>(PrettyFormatter<'a>);

impl Formatter for PreciseFormatter<'_> {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }
    fn begin_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }
    fn end_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }
    fn begin_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }
    fn begin_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }
    fn end_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }
    fn begin_object_key<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

pub fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>, CliError> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, PreciseFormatter(PrettyFormatter::new()));
    value.serialize(&mut ser).map_err(|e| CliError::Usage(format!("serialization failed: {e}")))?;
    out.push(b'\n');
    Ok(out)
}

/// CSV cell for a float: ten significant digits.
pub fn num(x: f64) -> String {
    format!("{x:.9e}")
}

/// Builds a CSV document from a header and string rows.
pub fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| CliError::Usage(format!("csv output failed: {e}"));
    w.write_record(header).map_err(fail)?;
    for r in rows {
        w.write_record(r).map_err(fail)?;
    }
    w.into_inner().map_err(|e| CliError::Usage(format!("csv output failed: {e}")))
}

/// Record written next to every set of outputs so a run can be replayed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: String,
    pub command: String,
    pub tool_version: String,
    /// Effective configuration after overrides.
    pub config: Value,
    #[serde(default)]
    pub seeds: Vec<u64>,
    pub files: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config: Value, seeds: Vec<u64>, files: &[(String, Vec<u8>)]) -> Self {
        Self {
            schema_version: SCHEMA_VERSION.to_string(),
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            seeds,
            files: files.iter().map(|(name, _)| name.clone()).collect(),
        }
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes named files into `dir`. Nothing is written if any target exists
/// and `force` is off.
pub fn write_outputs(dir: &Path, files: &[(String, Vec<u8>)], force: bool) -> Result<Vec<PathBuf>, CliError> {
    let paths: Vec<PathBuf> = files.iter().map(|(name, _)| dir.join(name)).collect();
    if !force {
        if let Some(p) = paths.iter().find(|p| p.exists()) {
            return Err(CliError::Usage(format!("{} exists; pass --force to overwrite", p.display())));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))?;
    for (p, (_, bytes)) in paths.iter().zip(files) {
        std::fs::write(p, bytes).map_err(|e| CliError::Usage(format!("cannot write {}: {e}", p.display())))?;
    }
    Ok(paths)
}

fn read_versioned(path: &Path) -> Result<Value, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    let value: Value =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{} is not valid JSON: {e}", path.display())))?;
    match value.get("schema_version").and_then(Value::as_str) {
        Some(v) => check_schema_version(v)?,
        None => return Err(CliError::Usage(format!("{} has no schema_version", path.display()))),
    }
    Ok(value)
}

/// Reads an ensemble report, rejecting unknown major schema versions.
pub fn read_report(path: &Path) -> Result<EnsembleReport, CliError> {
    serde_json::from_value(read_versioned(path)?)
        .map_err(|e| CliError::Usage(format!("{} is not an ensemble report: {e}", path.display())))
}

pub fn read_manifest(path: &Path) -> Result<RunManifest, CliError> {
    serde_json::from_value(read_versioned(path)?)
        .map_err(|e| CliError::Usage(format!("{} is not a run manifest: {e}", path.display())))
}
