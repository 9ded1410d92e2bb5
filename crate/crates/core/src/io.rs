//! Tab-separated tables with a provenance header.
//!
//! Every file written here starts with
//!
//! ```text
//! # browning schema=1 command=<name>
//! ```
//!
//! followed by one column-header line and the data rows. Missing values are
//! empty fields; undefined metrics are written as `NA`. Readers accept files
//! without the provenance line, but reject one naming another schema version.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::NaiveDate;

use crate::curve::PhenologyParams;
use crate::error::FormatError;
use crate::features::{
    MaskFlags, NdviObservation, PixelFeatures, RawObservation, RawPixelRecord, CONTINUOUS_FEATURES, N_CONTINUOUS,
};
use crate::train::QUANTILES;
use crate::QuantileCurveSet;

pub const SCHEMA_VERSION: u32 = 1;
pub const UNDEFINED: &str = "NA";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io { path: path.display().to_string(), source }
}

/// Shortest representation that parses back to the same value.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| UNDEFINED.to_string(), fmt_f64)
}

/// Buffered writer of one table.
pub struct TableWriter<W: Write> {
    out: W,
    n_cols: usize,
}

impl TableWriter<BufWriter<File>> {
    pub fn create(path: &Path, command: &str, columns: &[&str]) -> Result<Self, FormatError> {
        let file = File::create(path).map_err(io_err(path))?;
        Self::new(BufWriter::new(file), command, columns).map_err(io_err(path))
    }
}

impl<W: Write> TableWriter<W> {
    pub fn new(mut out: W, command: &str, columns: &[&str]) -> std::io::Result<Self> {
        writeln!(out, "# browning schema={SCHEMA_VERSION} command={command}")?;
        writeln!(out, "{}", columns.join("\t"))?;
        Ok(Self { out, n_cols: columns.len() })
    }

    pub fn row<S: AsRef<str>>(&mut self, fields: &[S]) -> std::io::Result<()> {
        debug_assert_eq!(fields.len(), self.n_cols, "row width");
        let mut first = true;
        for f in fields {
            if !first {
                self.out.write_all(b"\t")?;
            }
            self.out.write_all(f.as_ref().as_bytes())?;
            first = false;
        }
        self.out.write_all(b"\n")
    }

    pub fn finish(mut self) -> std::io::Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

/// A table read into memory.
#[derive(Debug, Clone)]
pub struct Table {
    pub path: String,
    pub command: Option<String>,
    pub columns: Vec<String>,
    /// `(line number, fields)`.
    pub rows: Vec<(usize, Vec<String>)>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self, FormatError> {
        let file = File::open(path).map_err(io_err(path))?;
        Self::parse(BufReader::new(file), &path.display().to_string())
    }

    pub fn parse(reader: impl BufRead, path: &str) -> Result<Self, FormatError> {
        let mut command = None;
        let mut columns: Option<Vec<String>> = None;
        let mut rows = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|source| FormatError::Io { path: path.to_string(), source })?;
            let line_no = i + 1;
            if let Some(rest) = line.strip_prefix('#') {
                if columns.is_none() {
                    command = parse_provenance(rest, path, line_no)?.or(command);
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let fields: Vec<String> = line.split('\t').map(str::to_string).collect();
            match &columns {
                None => columns = Some(fields),
                Some(cols) => {
                    if fields.len() != cols.len() {
                        return Err(FormatError::Parse {
                            path: path.to_string(),
                            line: line_no,
                            message: format!("{} fields, header has {}", fields.len(), cols.len()),
                        });
                    }
                    rows.push((line_no, fields));
                }
            }
        }
        let columns = columns.ok_or_else(|| FormatError::Parse {
            path: path.to_string(),
            line: 0,
            message: "no column header".into(),
        })?;
        Ok(Self { path: path.to_string(), command, columns, rows })
    }

    pub fn column(&self, name: &str) -> Result<usize, FormatError> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| FormatError::MissingColumn { path: self.path.clone(), column: name.to_string() })
    }

    pub fn has_column(&self, name: &str) -> bool {
        self.columns.iter().any(|c| c == name)
    }

    pub fn error(&self, line: usize, message: impl Display) -> FormatError {
        FormatError::Parse { path: self.path.clone(), line, message: message.to_string() }
    }

    /// Parses a required field.
    pub fn get<T: FromStr>(&self, row: &(usize, Vec<String>), col: usize) -> Result<T, FormatError>
    where
        T::Err: Display,
    {
        let s = &row.1[col];
        s.parse::<T>().map_err(|e| self.error(row.0, format!("column `{}`: `{s}`: {e}", self.columns[col])))
    }

    /// Parses an optional field; empty means missing.
    pub fn get_opt<T: FromStr>(&self, row: &(usize, Vec<String>), col: usize) -> Result<Option<T>, FormatError>
    where
        T::Err: Display,
    {
        if row.1[col].is_empty() {
            Ok(None)
        } else {
            self.get(row, col).map(Some)
        }
    }
}

fn parse_provenance(rest: &str, path: &str, line: usize) -> Result<Option<String>, FormatError> {
    let mut words = rest.split_whitespace();
    if words.next() != Some("browning") {
        return Ok(None);
    }
    let mut command = None;
    for w in words {
        if let Some(v) = w.strip_prefix("schema=") {
            let found: u32 = v.parse().map_err(|_| FormatError::Parse {
                path: path.to_string(),
                line,
                message: format!("bad schema version `{v}`"),
            })?;
            if found != SCHEMA_VERSION {
                return Err(FormatError::SchemaVersion { found, expected: SCHEMA_VERSION });
            }
        } else if let Some(v) = w.strip_prefix("command=") {
            command = Some(v.to_string());
        }
    }
    Ok(command)
}

fn write_err(path: &Path) -> impl Fn(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io { path: path.display().to_string(), source }
}

/// Habitat counts as `code:count;code:count`.
fn fmt_habitats(counts: &BTreeMap<String, u32>) -> String {
    counts.iter().map(|(k, v)| format!("{k}:{v}")).collect::<Vec<_>>().join(";")
}

fn parse_habitats(s: &str) -> Result<BTreeMap<String, u32>, String> {
    let mut out = BTreeMap::new();
    for part in s.split(';').filter(|p| !p.is_empty()) {
        let (code, count) = part.rsplit_once(':').ok_or_else(|| format!("habitat entry `{part}` lacks `:`"))?;
        let count: u32 = count.parse().map_err(|e| format!("habitat count `{count}`: {e}"))?;
        *out.entry(code.to_string()).or_insert(0) += count;
    }
    Ok(out)
}

pub const PIXEL_COLUMNS: [&str; 4] = ["pixel_id", "row", "col", "species"];

/// Pixel covariate table: `pixel_id, row, col, <12 features>, species, habitats`.
pub fn write_pixels(path: &Path, command: &str, pixels: &[RawPixelRecord]) -> Result<(), FormatError> {
    let mut cols = vec!["pixel_id", "row", "col"];
    cols.extend(CONTINUOUS_FEATURES);
    cols.extend(["species", "habitats"]);
    let mut w = TableWriter::create(path, command, &cols)?;
    for p in pixels {
        let mut f = vec![p.pixel_id.to_string()];
        match p.position {
            Some((r, c)) => f.extend([r.to_string(), c.to_string()]),
            None => f.extend([String::new(), String::new()]),
        }
        f.extend(p.continuous.iter().map(|v| v.map(fmt_f64).unwrap_or_default()));
        f.push(p.species.clone().unwrap_or_default());
        f.push(fmt_habitats(&p.habitat_counts));
        w.row(&f).map_err(write_err(path))?;
    }
    w.finish().map_err(write_err(path))?;
    Ok(())
}

pub fn read_pixels(path: &Path) -> Result<Vec<RawPixelRecord>, FormatError> {
    let t = Table::read(path)?;
    let id = t.column("pixel_id")?;
    let feats: Vec<usize> = CONTINUOUS_FEATURES.iter().map(|n| t.column(n)).collect::<Result<_, _>>()?;
    let species = t.column("species")?;
    let habitats = t.column("habitats")?;
    let row = t.column("row").ok();
    let col = t.column("col").ok();
    let mut out = Vec::with_capacity(t.rows.len());
    for r in &t.rows {
        let mut continuous = [None; N_CONTINUOUS];
        for (k, &c) in feats.iter().enumerate() {
            continuous[k] = t.get_opt::<f64>(r, c)?;
        }
        let position = match (row, col) {
            (Some(a), Some(b)) => match (t.get_opt::<i64>(r, a)?, t.get_opt::<i64>(r, b)?) {
                (Some(x), Some(y)) => Some((x, y)),
                _ => None,
            },
            _ => None,
        };
        let sp = &r.1[species];
        out.push(RawPixelRecord {
            pixel_id: t.get(r, id)?,
            continuous,
            species: (!sp.is_empty()).then(|| sp.clone()),
            habitat_counts: parse_habitats(&r.1[habitats]).map_err(|m| t.error(r.0, m))?,
            position,
        });
    }
    Ok(out)
}

/// Raw acquisitions: `pixel_id, date, ndvi, ndsi, flags`.
pub fn write_observations(path: &Path, command: &str, obs: &[RawObservation]) -> Result<(), FormatError> {
    let mut w = TableWriter::create(path, command, &["pixel_id", "date", "ndvi", "ndsi", "flags"])?;
    for o in obs {
        w.row(&[
            o.pixel_id.to_string(),
            o.date.to_string(),
            o.ndvi.map(fmt_f64).unwrap_or_default(),
            o.ndsi.map(fmt_f64).unwrap_or_default(),
            o.flags.0.to_string(),
        ])
        .map_err(write_err(path))?;
    }
    w.finish().map_err(write_err(path))?;
    Ok(())
}

pub fn read_observations(path: &Path) -> Result<Vec<RawObservation>, FormatError> {
    let t = Table::read(path)?;
    let (id, date, ndvi, ndsi, flags) =
        (t.column("pixel_id")?, t.column("date")?, t.column("ndvi")?, t.column("ndsi")?, t.column("flags")?);
    t.rows
        .iter()
        .map(|r| {
            Ok(RawObservation {
                pixel_id: t.get(r, id)?,
                date: t.get::<NaiveDate>(r, date)?,
                ndvi: t.get_opt(r, ndvi)?,
                ndsi: t.get_opt(r, ndsi)?,
                flags: MaskFlags(t.get_opt::<u8>(r, flags)?.unwrap_or(0)),
            })
        })
        .collect()
}

/// Encoded pixels: `pixel_id, z_<feature>..., species_index, habitats` with
/// habitats as `index:weight;...`.
pub fn write_features(path: &Path, command: &str, pixels: &[PixelFeatures]) -> Result<(), FormatError> {
    let names: Vec<String> = CONTINUOUS_FEATURES.iter().map(|n| format!("z_{n}")).collect();
    let mut cols = vec!["pixel_id"];
    cols.extend(names.iter().map(String::as_str));
    cols.extend(["species_index", "habitats"]);
    let mut w = TableWriter::create(path, command, &cols)?;
    for p in pixels {
        let mut f = vec![p.pixel_id.to_string()];
        f.extend(p.continuous.iter().map(|&v| fmt_f64(v)));
        f.push(p.species.to_string());
        f.push(p.habitats.iter().map(|(h, w)| format!("{h}:{}", fmt_f64(*w))).collect::<Vec<_>>().join(";"));
        w.row(&f).map_err(write_err(path))?;
    }
    w.finish().map_err(write_err(path))?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Vec<PixelFeatures>, FormatError> {
    let t = Table::read(path)?;
    let id = t.column("pixel_id")?;
    let feats: Vec<usize> = t.columns.iter().enumerate().filter(|(_, c)| c.starts_with("z_")).map(|(i, _)| i).collect();
    let species = t.column("species_index")?;
    let habitats = t.column("habitats")?;
    let mut out = Vec::with_capacity(t.rows.len());
    for r in &t.rows {
        let continuous = feats.iter().map(|&c| t.get::<f64>(r, c)).collect::<Result<Vec<_>, _>>()?;
        let mut hab = Vec::new();
        for part in r.1[habitats].split(';').filter(|p| !p.is_empty()) {
            let (h, w) = part.split_once(':').ok_or_else(|| t.error(r.0, format!("habitat entry `{part}`")))?;
            let h: usize = h.parse().map_err(|e| t.error(r.0, format!("habitat index `{h}`: {e}")))?;
            let w: f64 = w.parse().map_err(|e| t.error(r.0, format!("habitat weight `{w}`: {e}")))?;
            hab.push((h, w));
        }
        out.push(PixelFeatures { pixel_id: t.get(r, id)?, continuous, species: t.get(r, species)?, habitats: hab });
    }
    Ok(out)
}

/// Filtered observations: `pixel_id, date, t, ndvi`.
pub fn write_ndvi(path: &Path, command: &str, obs: &[NdviObservation]) -> Result<(), FormatError> {
    let mut w = TableWriter::create(path, command, &["pixel_id", "date", "t", "ndvi"])?;
    for o in obs {
        w.row(&[o.pixel_id.to_string(), o.date.to_string(), fmt_f64(o.t), fmt_f64(o.ndvi)]).map_err(write_err(path))?;
    }
    w.finish().map_err(write_err(path))?;
    Ok(())
}

pub fn read_ndvi(path: &Path) -> Result<Vec<NdviObservation>, FormatError> {
    let t = Table::read(path)?;
    let (id, date, ndvi) = (t.column("pixel_id")?, t.column("date")?, t.column("ndvi")?);
    t.rows
        .iter()
        .map(|r| {
            let date: NaiveDate = t.get(r, date)?;
            Ok(NdviObservation {
                pixel_id: t.get(r, id)?,
                date,
                t: crate::curve::day_fraction(date),
                ndvi: t.get(r, ndvi)?,
                ndsi: None,
                flags: MaskFlags::default(),
            })
        })
        .collect()
}

pub const CURVE_PARAM_COLUMNS: [&str; 8] =
    ["pixel_id", "quantile", "ndvi_min", "ndvi_max", "sos", "matsos", "sen", "eossen"];

/// Curve parameters, one row per pixel and quantile.
pub fn write_curve_params(
    path: &Path,
    command: &str,
    ids: &[u64],
    sets: &[QuantileCurveSet],
) -> Result<(), FormatError> {
    let mut w = TableWriter::create(path, command, &CURVE_PARAM_COLUMNS)?;
    for (id, set) in ids.iter().zip(sets) {
        for (q, c) in QUANTILES.iter().zip(&set.curves) {
            let mut row = vec![id.to_string(), fmt_f64(*q)];
            row.extend(c.to_array().iter().map(|&v| fmt_f64(v)));
            w.row(&row).map_err(write_err(path))?;
        }
    }
    w.finish().map_err(write_err(path))?;
    Ok(())
}

pub fn read_curve_params(path: &Path) -> Result<Vec<(u64, QuantileCurveSet)>, FormatError> {
    let t = Table::read(path)?;
    let cols: Vec<usize> = CURVE_PARAM_COLUMNS.iter().map(|c| t.column(c)).collect::<Result<_, _>>()?;
    if t.rows.len() % 3 != 0 {
        return Err(FormatError::Dimension(format!("{} curve rows is not a multiple of 3", t.rows.len())));
    }
    let mut out = Vec::with_capacity(t.rows.len() / 3);
    for block in t.rows.chunks(3) {
        let id: u64 = t.get(&block[0], cols[0])?;
        let mut curves = [PhenologyParams::constant(0.0); 3];
        for (q, row) in block.iter().enumerate() {
            if t.get::<u64>(row, cols[0])? != id || t.get::<f64>(row, cols[1])? != QUANTILES[q] {
                return Err(t.error(row.0, "expected rows for quantiles 0.25, 0.5, 0.75 of one pixel"));
            }
            let mut a = [0.0; 6];
            for k in 0..6 {
                a[k] = t.get(row, cols[2 + k])?;
            }
            curves[q] = PhenologyParams::from_array(a);
        }
        out.push((id, QuantileCurveSet { curves }));
    }
    Ok(out)
}

/// Predicted quartiles on a day grid: `pixel_id, t, f25, f50, f75`.
pub fn write_curve_values(
    path: &Path,
    command: &str,
    ids: &[u64],
    grid: &[f64],
    values: &[Vec<[f64; 3]>],
) -> Result<(), FormatError> {
    let mut w = TableWriter::create(path, command, &["pixel_id", "t", "f25", "f50", "f75"])?;
    for (id, series) in ids.iter().zip(values) {
        for (&t, v) in grid.iter().zip(series) {
            w.row(&[id.to_string(), fmt_f64(t), fmt_f64(v[0]), fmt_f64(v[1]), fmt_f64(v[2])])
                .map_err(write_err(path))?;
        }
    }
    w.finish().map_err(write_err(path))?;
    Ok(())
}

/// One pixel id per line; a header line `pixel_id` and `#` comments are
/// allowed.
pub fn read_pixel_set(path: &Path) -> Result<Vec<u64>, FormatError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line == "pixel_id" {
            continue;
        }
        let first = line.split('\t').next().unwrap_or(line);
        out.push(first.parse().map_err(|e| FormatError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: format!("pixel id `{first}`: {e}"),
        })?);
    }
    Ok(out)
}
