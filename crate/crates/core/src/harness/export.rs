//! JSON and CSV persistence.
//!
//! JSON floats use the shortest representation that round-trips, with
//! integral values written without a fractional part (`1.0` becomes `1`).
//! CSV floats use 17 significant digits in scientific notation.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::error::{Error, Result};
use crate::scheme::{SchemeSolution, StepDiagnostics};

/// Pretty JSON formatter with compact float output.
pub struct CompactFloatFormatter<'a> {
    inner: PrettyFormatter<'a>,
}

impl Default for CompactFloatFormatter<'_> {
    fn default() -> Self {
        Self {
            inner: PrettyFormatter::new(),
        }
    }
}

/// Shortest round-trip text of a finite `f64`, without a trailing `.0`.
pub fn format_json_float(value: f64) -> String {
    let mut buf = ryu::Buffer::new();
    let s = buf.format_finite(value);
    s.strip_suffix(".0").unwrap_or(s).to_string()
}

/// `{:.16e}` form used in CSV output.
pub fn format_csv_float(value: f64) -> String {
    if value.is_finite() {
        format!("{value:.16e}")
    } else {
        "NA".to_string()
    }
}

impl Formatter for CompactFloatFormatter<'_> {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        writer.write_all(format_json_float(value).as_bytes())
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, value as f64)
    }

    fn begin_array<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.inner.begin_array(writer)
    }

    fn end_array<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.inner.end_array(writer)
    }

    fn begin_array_value<W: ?Sized + Write>(&mut self, writer: &mut W, first: bool) -> io::Result<()> {
        self.inner.begin_array_value(writer, first)
    }

    fn end_array_value<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.inner.end_array_value(writer)
    }

    fn begin_object<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.inner.begin_object(writer)
    }

    fn end_object<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.inner.end_object(writer)
    }

    fn begin_object_key<W: ?Sized + Write>(&mut self, writer: &mut W, first: bool) -> io::Result<()> {
        self.inner.begin_object_key(writer, first)
    }

    fn begin_object_value<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.inner.begin_object_value(writer)
    }

    fn end_object_value<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.inner.end_object_value(writer)
    }
}

pub fn to_json_string<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, CompactFloatFormatter::default());
    value.serialize(&mut ser)?;
    Ok(String::from_utf8(out).expect("serde_json writes UTF-8"))
}

pub fn write_json<T: Serialize + ?Sized>(value: &T, path: &Path) -> Result<()> {
    let text = to_json_string(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes a header and rows of already formatted fields.
pub fn write_csv_rows(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv_to(BufWriter::new(file), header, rows).map_err(|e| match e {
        Error::Csv(c) => match c.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Config(format!("CSV error: {other:?}")),
        },
        other => other,
    })
}

pub fn write_csv_to<W: Write>(writer: W, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))
}

/// JSON summary of a solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionSummary {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub n: usize,
    pub horizon: f64,
    pub h: f64,
    pub h_reflection: f64,
    pub kappa: usize,
    pub backend: String,
    pub y0: Vec<f64>,
    pub ytilde0: Vec<f64>,
    /// `d` rows of length `q`.
    pub z0: Vec<Vec<f64>>,
    pub y0_stderr: Vec<f64>,
    pub max_picard_iterations: usize,
    pub diagnostics: Vec<StepDiagnostics>,
}

impl SolutionSummary {
    pub fn new(solution: &SchemeSolution, name: Option<String>, backend: &str) -> Self {
        let grid = solution.grid();
        let q = solution.brownian_dim();
        Self {
            name,
            n: grid.n(),
            horizon: grid.horizon(),
            h: grid.modulus(),
            h_reflection: grid.reflection_modulus(),
            kappa: grid.kappa(),
            backend: backend.to_string(),
            y0: solution.y0().to_vec(),
            ytilde0: solution.ytilde0().to_vec(),
            z0: solution.z0().chunks(q).map(<[f64]>::to_vec).collect(),
            y0_stderr: solution.y0_stderr().to_vec(),
            max_picard_iterations: solution.max_picard_iterations(),
            diagnostics: solution.diagnostics().to_vec(),
        }
    }
}

/// Per-time-step aggregates of a solution.
pub fn solution_csv(solution: &SchemeSolution) -> (Vec<String>, Vec<Vec<String>>) {
    let d = solution.components();
    let mut header: Vec<String> = vec!["time_index".into(), "time".into(), "reflection".into()];
    for prefix in ["mean_y", "stderr_y", "mean_ytilde", "mean_dk"] {
        header.extend((1..=d).map(|j| format!("{prefix}{j}")));
    }
    header.push("max_iterations".into());
    header.push("projection_active".into());
    let rows = solution
        .aggregates()
        .iter()
        .zip(solution.diagnostics())
        .map(|(a, diag)| {
            let mut r = vec![
                diag.time_index.to_string(),
                format_csv_float(diag.time),
                (diag.reflection as u8).to_string(),
            ];
            for v in [&a.mean_y, &a.stderr_y, &a.mean_ytilde, &a.mean_dk] {
                r.extend(v.iter().map(|&x| format_csv_float(x)));
            }
            r.push(diag.max_iterations.to_string());
            r.push(format_csv_float(diag.projection_active));
            r
        })
        .collect();
    (header, rows)
}

pub fn write_solution_csv(solution: &SchemeSolution, path: &Path) -> Result<()> {
    let (header, rows) = solution_csv(solution);
    write_csv_rows(path, &header, &rows)
}
