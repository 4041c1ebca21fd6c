//! Tabulated data: one datum per row, an outcome column followed by the
//! model's experiment fields.
//!
//! Text input is comma-separated when the first data line contains a comma,
//! otherwise whitespace-separated. Lines starting with `#` and blank lines are
//! ignored. A header row is optional; without one, columns are positional:
//! the outcome, then each experiment field in model order, with vector fields
//! spread over `name_0, name_1, …`. Header aliases: `counts`, `count`,
//! `n_plus` for the outcome and `n_shots`, `shots` for `n_meas`.
//!
//! Binary input (little-endian) is columnar:
//!
//! | bytes     | field                                             |
//! |-----------|---------------------------------------------------|
//! | 8         | magic `SMCDATA1`                                  |
//! | 8 (u64)   | row count `R`                                     |
//! | 4 (u32)   | column count `C`                                  |
//! | per column: 4 (u32) name length, name (UTF-8), 1 (u8) type (0 = u64, 1 = f64), then `R` values of 8 bytes |

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Experiment, FieldKind, FieldSpec, FieldValue, Model, Outcome};

pub const BINARY_MAGIC: &[u8; 8] = b"SMCDATA1";

#[derive(Clone, Debug, PartialEq)]
pub struct DataTable {
    pub rows: Vec<(Outcome, Experiment)>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Target {
    Outcome,
    Field { spec: usize, component: usize },
}

fn column_names(specs: &[FieldSpec]) -> Vec<(String, Target)> {
    let mut cols = vec![("outcome".to_string(), Target::Outcome)];
    for (s, f) in specs.iter().enumerate() {
        match f.kind {
            FieldKind::Vector(n) => {
                for c in 0..n {
                    cols.push((format!("{}_{c}", f.name), Target::Field { spec: s, component: c }));
                }
            }
            _ => cols.push((f.name.clone(), Target::Field { spec: s, component: 0 })),
        }
    }
    cols
}

fn canonical(name: &str) -> String {
    let n = name.trim().to_ascii_lowercase();
    match n.as_str() {
        "counts" | "count" | "n_plus" => "outcome".into(),
        "n_shots" | "shots" => "n_meas".into(),
        _ => n,
    }
}

/// Column headers written for `model`'s data: binomial chains use `counts`
/// and `n_shots`.
pub fn header_for(specs: &[FieldSpec]) -> Vec<String> {
    let binomial = specs.iter().any(|f| f.name == "n_meas");
    column_names(specs)
        .into_iter()
        .map(|(n, t)| match (t, n.as_str()) {
            (Target::Outcome, _) if binomial => "counts".into(),
            (_, "n_meas") => "n_shots".into(),
            _ => n,
        })
        .collect()
}

struct RowBuilder<'a> {
    model: &'a dyn Model,
    specs: Vec<FieldSpec>,
    layout: Vec<Target>,
    warned_truncation: bool,
}

impl<'a> RowBuilder<'a> {
    fn new(model: &'a dyn Model) -> Self {
        let specs = model.expparams_fields();
        let layout = column_names(&specs).into_iter().map(|(_, t)| t).collect();
        RowBuilder { model, specs, layout, warned_truncation: false }
    }

    fn set_header(&mut self, names: &[String], row: usize) -> Result<()> {
        let cols = column_names(&self.specs);
        let mut layout = Vec::with_capacity(names.len());
        for n in names {
            let c = canonical(n);
            let t = cols.iter().find(|(name, _)| *name == c).map(|(_, t)| *t).ok_or_else(|| Error::Ingestion {
                row,
                detail: format!("unknown column `{n}`; expected {:?}", cols.iter().map(|c| &c.0).collect::<Vec<_>>()),
            })?;
            if layout.contains(&t) {
                return Err(Error::Ingestion { row, detail: format!("column `{n}` appears twice") });
            }
            layout.push(t);
        }
        if layout.len() != cols.len() {
            return Err(Error::Ingestion {
                row,
                detail: format!("header has {} columns, {} needs {}", layout.len(), self.model.name(), cols.len()),
            });
        }
        self.layout = layout;
        Ok(())
    }

    fn build(&mut self, values: &[f64], row: usize) -> Result<(Outcome, Experiment)> {
        if values.len() != self.layout.len() {
            return Err(Error::Ingestion {
                row,
                detail: format!("expected {} columns, found {}", self.layout.len(), values.len()),
            });
        }
        let mut outcome = None;
        let mut fields: Vec<Vec<f64>> = self.specs.iter().map(|s| vec![0.0; s.width()]).collect();
        for (&t, &v) in self.layout.iter().zip(values) {
            match t {
                Target::Outcome => {
                    if !(v >= 0.0 && v.fract() == 0.0 && v < 2f64.powi(53)) {
                        return Err(Error::Ingestion { row, detail: format!("outcome {v} is not a non-negative integer") });
                    }
                    outcome = Some(v as Outcome);
                }
                Target::Field { spec, component } => fields[spec][component] = v,
            }
        }
        let outcome = outcome.expect("layout always has an outcome column");
        let mut e = Experiment::new();
        for (spec, vals) in self.specs.iter().zip(fields) {
            let value = match spec.kind {
                FieldKind::Real => FieldValue::Real(vals[0]),
                FieldKind::Int => {
                    let v = vals[0];
                    if v.fract() != 0.0 && !self.warned_truncation {
                        log::warn!("row {row}: `{}` value {v} truncated to an integer", spec.name);
                        self.warned_truncation = true;
                    }
                    FieldValue::Int(v.trunc() as i64)
                }
                FieldKind::Vector(_) => FieldValue::Vector(vals),
            };
            e.set(&spec.name, value);
        }
        if let Some(FieldValue::Int(n)) = e.get("n_meas") {
            if *n < 1 {
                return Err(Error::Ingestion { row, detail: format!("n_shots = {n}; at least one shot is required") });
            }
            if outcome as i64 > *n {
                return Err(Error::Ingestion { row, detail: format!("counts {outcome} exceed n_shots {n}") });
            }
        }
        let n_out = self.model.n_outcomes(&e).map_err(|err| Error::Ingestion { row, detail: err.to_string() })?;
        if outcome >= n_out {
            return Err(Error::Ingestion {
                row,
                detail: format!("outcome {outcome} is impossible ({n_out} outcomes)"),
            });
        }
        Ok((outcome, e))
    }
}

fn parse_number(tok: &str, row: usize) -> Result<f64> {
    let v: f64 = tok.trim().parse().map_err(|_| Error::Ingestion { row, detail: format!("`{tok}` is not a number") })?;
    if !v.is_finite() {
        return Err(Error::Ingestion { row, detail: format!("`{tok}` is not finite") });
    }
    Ok(v)
}

impl DataTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Parses delimited text. Errors carry the 1-based line number.
    pub fn parse_text(text: &str, model: &dyn Model) -> Result<Self> {
        let mut builder = RowBuilder::new(model);
        let mut rows = Vec::new();
        let mut comma: Option<bool> = None;
        let mut first = true;
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let comma = *comma.get_or_insert_with(|| trimmed.contains(','));
            let tokens: Vec<String> = if comma {
                let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(trimmed.as_bytes());
                let rec = r
                    .records()
                    .next()
                    .transpose()
                    .map_err(|e| Error::Ingestion { row: lineno, detail: e.to_string() })?
                    .unwrap_or_default();
                rec.iter().map(|s| s.trim().to_string()).collect()
            } else {
                trimmed.split_whitespace().map(str::to_string).collect()
            };
            if first {
                first = false;
                if tokens.iter().any(|t| t.parse::<f64>().is_err()) {
                    builder.set_header(&tokens, lineno)?;
                    continue;
                }
            }
            let values = tokens.iter().map(|t| parse_number(t, lineno)).collect::<Result<Vec<_>>>()?;
            rows.push(builder.build(&values, lineno)?);
        }
        Ok(DataTable { rows })
    }

    /// Parses the binary columnar format. Errors carry the 1-based row.
    pub fn parse_binary(bytes: &[u8], model: &dyn Model) -> Result<Self> {
        let bad = |row: usize, detail: &str| Error::Ingestion { row, detail: detail.to_string() };
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let end = pos.checked_add(n).filter(|e| *e <= bytes.len()).ok_or_else(|| bad(0, "truncated binary data"))?;
            let s = &bytes[pos..end];
            pos = end;
            Ok(s)
        };
        if take(8)? != BINARY_MAGIC {
            return Err(bad(0, "not a binary data file (bad magic)"));
        }
        let n_rows = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let n_rows = usize::try_from(n_rows).map_err(|_| bad(0, "row count overflows"))?;
        let n_cols = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut names = Vec::with_capacity(n_cols);
        let mut columns: Vec<Vec<f64>> = Vec::with_capacity(n_cols);
        for _ in 0..n_cols {
            let len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(len)?).map_err(|_| bad(0, "column name is not UTF-8"))?.to_string();
            let kind = take(1)?[0];
            let raw = take(n_rows.checked_mul(8).ok_or_else(|| bad(0, "column too large"))?)?;
            let col: Vec<f64> = match kind {
                0 => raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
                1 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
                k => return Err(bad(0, &format!("unknown column type {k} for `{name}`"))),
            };
            names.push(name);
            columns.push(col);
        }
        if pos != bytes.len() {
            return Err(bad(0, "trailing bytes after binary data"));
        }
        let mut builder = RowBuilder::new(model);
        builder.set_header(&names, 0)?;
        let mut rows = Vec::with_capacity(n_rows);
        let mut values = vec![0.0; n_cols];
        for r in 0..n_rows {
            for (c, col) in columns.iter().enumerate() {
                values[c] = col[r];
                if !col[r].is_finite() {
                    return Err(bad(r + 1, "non-finite value"));
                }
            }
            rows.push(builder.build(&values, r + 1)?);
        }
        Ok(DataTable { rows })
    }

    /// Reads text or binary data, detected by the magic prefix.
    pub fn read_path(path: &Path, model: &dyn Model) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        if bytes.starts_with(BINARY_MAGIC) {
            return Self::parse_binary(&bytes, model);
        }
        let text = String::from_utf8(bytes).map_err(|e| Error::Ingestion { row: 0, detail: format!("not UTF-8 text: {e}") })?;
        Self::parse_text(&text, model)
    }

    fn flat_row(&self, specs: &[FieldSpec], k: usize) -> Result<Vec<f64>> {
        let (d, e) = &self.rows[k];
        let mut v = vec![*d as f64];
        v.extend(e.to_flat(specs)?);
        Ok(v)
    }

    pub fn write_csv<W: Write>(&self, w: W, model: &dyn Model) -> Result<()> {
        let specs = model.expparams_fields();
        let mut out = csv::Writer::from_writer(w);
        out.write_record(header_for(&specs)).map_err(|e| Error::Io(e.to_string()))?;
        let layout = column_names(&specs);
        for k in 0..self.rows.len() {
            let flat = self.flat_row(&specs, k)?;
            let cells = layout.iter().zip(&flat).map(|((_, t), v)| match t {
                Target::Outcome => format!("{}", *v as u64),
                Target::Field { spec, .. } if specs[*spec].kind == FieldKind::Int => format!("{}", *v as i64),
                _ => v.to_string(),
            });
            out.write_record(cells).map_err(|e| Error::Io(e.to_string()))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_binary<W: Write>(&self, mut w: W, model: &dyn Model) -> Result<()> {
        let specs = model.expparams_fields();
        let layout = column_names(&specs);
        let names = header_for(&specs);
        let flat = (0..self.rows.len()).map(|k| self.flat_row(&specs, k)).collect::<Result<Vec<_>>>()?;
        w.write_all(BINARY_MAGIC)?;
        w.write_all(&(self.rows.len() as u64).to_le_bytes())?;
        w.write_all(&(layout.len() as u32).to_le_bytes())?;
        for (c, ((_, t), name)) in layout.iter().zip(&names).enumerate() {
            let integer = match t {
                Target::Outcome => true,
                Target::Field { spec, .. } => specs[*spec].kind == FieldKind::Int,
            };
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[if integer { 0 } else { 1 }])?;
            for row in &flat {
                if integer {
                    w.write_all(&(row[c] as u64).to_le_bytes())?;
                } else {
                    w.write_all(&row[c].to_le_bytes())?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ModelSpec, RebitModel};
    use serde_json::json;

    fn binomial_rb() -> std::sync::Arc<dyn Model> {
        ModelSpec::from_value(&json!(["binomial", "rb"])).unwrap().build().unwrap()
    }

    #[test]
    fn header_and_positional_forms_agree() {
        let m = binomial_rb();
        let a = DataTable::parse_text("counts,m,n_shots\n20,1,25\n# note\n13, 40.7, 25\n", m.as_ref()).unwrap();
        let b = DataTable::parse_text("20 1 25\n\n13 40 25\n", m.as_ref()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows[1].1.int("m").unwrap(), 40);
        // reordered header
        let c = DataTable::parse_text("m,n_shots,counts\n1,25,20\n40,25,13\n", m.as_ref()).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn bad_rows_name_their_line() {
        let m = binomial_rb();
        for (text, line) in [
            ("counts,m,n_shots\n20,1,25\n26,2,25\n", 3),
            ("1 1 0\n", 1),
            ("1 1 25\nx 2 25\n", 2),
            ("1 1\n", 1),
            ("counts,m,bogus\n1,1,1\n", 1),
        ] {
            match DataTable::parse_text(text, m.as_ref()) {
                Err(Error::Ingestion { row, .. }) => assert_eq!(row, line, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn csv_and_binary_round_trip() {
        let m = binomial_rb();
        let t = DataTable::parse_text("5 3 25\n0 800 25\n25 1 25\n", m.as_ref()).unwrap();
        let mut csv_bytes = Vec::new();
        t.write_csv(&mut csv_bytes, m.as_ref()).unwrap();
        assert!(String::from_utf8(csv_bytes.clone()).unwrap().starts_with("counts,m,n_shots\n5,3,25\n"));
        assert_eq!(DataTable::parse_text(std::str::from_utf8(&csv_bytes).unwrap(), m.as_ref()).unwrap(), t);
        let mut bin = Vec::new();
        t.write_binary(&mut bin, m.as_ref()).unwrap();
        assert_eq!(DataTable::parse_binary(&bin, m.as_ref()).unwrap(), t);
        assert!(DataTable::parse_binary(&bin[..bin.len() - 3], m.as_ref()).is_err());
    }

    #[test]
    fn vector_fields_spread_over_columns() {
        let t = DataTable::parse_text("outcome,axis_0,axis_1\n1,0,1\n", &RebitModel).unwrap();
        assert_eq!(t.rows[0].1.vector("axis", 2).unwrap(), &[0.0, 1.0]);
    }
}
