//! Historical program tables as comma-separated text.
//!
//! Table 1 has a `DFT type` header with one column per location plus a
//! total; rows whose label starts with `- ` are sub-rows of the row above.
//! Table 2 has a `Year` header; year labels are kept verbatim (a label may
//! carry a qualifier such as `2015 (June)`). Exporting an ingested table
//! reproduces the canonical input byte for byte.

use serde::{Deserialize, Serialize};

use super::CoordinatorError;

pub const TABLE1_HEADER: [&str; 7] = ["DFT type", "HQ", "D1", "D2", "D3", "D4", "Total"];
pub const TABLE2_HEADER: [&str; 5] = ["Year", "Files", "DFCT members", "DMFT members", "TCU files"];

/// One Table 1 row; counts are HQ then D1..D4.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocationRow {
    pub label: String,
    pub counts: [u32; 5],
    /// As printed, not recomputed.
    pub total: u32,
}

impl LocationRow {
    pub fn is_sub_row(&self) -> bool {
        self.label.starts_with("- ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocationTable {
    pub rows: Vec<LocationRow>,
}

impl LocationTable {
    /// Rows whose printed total differs from the sum of their counts.
    pub fn inconsistencies(&self) -> Vec<String> {
        self.rows
            .iter()
            .enumerate()
            .filter_map(|(i, r)| {
                let sum: u32 = r.counts.iter().sum();
                (sum != r.total)
                    .then(|| format!("row {} `{}`: counts sum to {sum}, total reads {}", i + 2, r.label, r.total))
            })
            .collect()
    }
}

/// One Table 2 row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct YearRow {
    /// Verbatim label, e.g. `2014` or `2015 (June)`.
    pub year_label: String,
    pub dft_files: u32,
    pub dcft_members: u32,
    pub dmft_members: u32,
    pub tcu_files: u32,
}

impl YearRow {
    /// Calendar year from the leading four digits of the label.
    pub fn year(&self) -> i32 {
        self.year_label[..4].parse().expect("validated on ingest")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct YearTable {
    pub rows: Vec<YearRow>,
}

impl YearTable {
    pub fn row(&self, year: i32) -> Option<&YearRow> {
        self.rows.iter().find(|r| r.year() == year)
    }
}

/// Which table a document holds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "table")]
pub enum HistoricalTable {
    Locations(LocationTable),
    Years(YearTable),
}

fn records(text: &str) -> Result<Vec<(usize, csv::StringRecord)>, CoordinatorError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = rec.as_ref().ok().and_then(|r| r.position()).map_or(i + 1, |p| p.line() as usize);
        let rec = rec.map_err(|e| CoordinatorError::MalformedRow { line, reason: e.to_string() })?;
        out.push((line, rec));
    }
    if out.is_empty() {
        return Err(CoordinatorError::MalformedRow { line: 1, reason: "missing header".into() });
    }
    Ok(out)
}

fn count(line: usize, name: &str, field: &str) -> Result<u32, CoordinatorError> {
    let canonical =
        !field.is_empty() && field.bytes().all(|b| b.is_ascii_digit()) && (field == "0" || !field.starts_with('0'));
    if !canonical {
        return Err(CoordinatorError::MalformedRow { line, reason: format!("{name} `{field}` is not a count") });
    }
    field
        .parse()
        .map_err(|_| CoordinatorError::MalformedRow { line, reason: format!("{name} `{field}` is out of range") })
}

fn check_header(line: usize, rec: &csv::StringRecord, want: &[&str]) -> Result<(), CoordinatorError> {
    if rec.iter().ne(want.iter().copied()) {
        return Err(CoordinatorError::MalformedRow { line, reason: format!("header must be `{}`", want.join(",")) });
    }
    Ok(())
}

/// Parses either table, chosen by the first header field.
pub fn parse_historical(text: &str) -> Result<HistoricalTable, CoordinatorError> {
    let recs = records(text)?;
    match recs[0].1.get(0) {
        Some("Year") => parse_years(recs).map(HistoricalTable::Years),
        Some("DFT type") => parse_locations(recs).map(HistoricalTable::Locations),
        _ => Err(CoordinatorError::MalformedRow { line: 1, reason: "unknown table header".into() }),
    }
}

fn parse_years(recs: Vec<(usize, csv::StringRecord)>) -> Result<YearTable, CoordinatorError> {
    check_header(recs[0].0, &recs[0].1, &TABLE2_HEADER)?;
    let mut rows: Vec<YearRow> = Vec::new();
    for (line, rec) in recs.into_iter().skip(1) {
        if rec.len() != TABLE2_HEADER.len() {
            return Err(CoordinatorError::MalformedRow {
                line,
                reason: format!("expected {} fields, got {}", TABLE2_HEADER.len(), rec.len()),
            });
        }
        let label = &rec[0];
        if label.len() < 4 || !label[..4].bytes().all(|b| b.is_ascii_digit()) || label.trim() != label {
            return Err(CoordinatorError::MalformedRow {
                line,
                reason: format!("year `{label}` does not start with four digits"),
            });
        }
        let row = YearRow {
            year_label: label.to_string(),
            dft_files: count(line, "files", &rec[1])?,
            dcft_members: count(line, "DCFT members", &rec[2])?,
            dmft_members: count(line, "DMFT members", &rec[3])?,
            tcu_files: count(line, "TCU files", &rec[4])?,
        };
        if rows.iter().any(|r| r.year() == row.year()) {
            return Err(CoordinatorError::MalformedRow { line, reason: format!("year {} repeated", row.year()) });
        }
        rows.push(row);
    }
    Ok(YearTable { rows })
}

fn parse_locations(recs: Vec<(usize, csv::StringRecord)>) -> Result<LocationTable, CoordinatorError> {
    check_header(recs[0].0, &recs[0].1, &TABLE1_HEADER)?;
    let mut rows: Vec<LocationRow> = Vec::new();
    for (line, rec) in recs.into_iter().skip(1) {
        if rec.len() != TABLE1_HEADER.len() {
            return Err(CoordinatorError::MalformedRow {
                line,
                reason: format!("expected {} fields, got {}", TABLE1_HEADER.len(), rec.len()),
            });
        }
        let label = rec[0].to_string();
        if label.is_empty() {
            return Err(CoordinatorError::MalformedRow { line, reason: "empty row label".into() });
        }
        if label.starts_with("- ") && rows.is_empty() {
            return Err(CoordinatorError::MalformedRow { line, reason: "sub-row without a parent row".into() });
        }
        let mut counts = [0; 5];
        for (i, c) in counts.iter_mut().enumerate() {
            *c = count(line, TABLE1_HEADER[i + 1], &rec[i + 1])?;
        }
        rows.push(LocationRow { label, counts, total: count(line, "total", &rec[6])? });
    }
    Ok(LocationTable { rows })
}

fn write_csv(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> String {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(header).expect("writing to memory");
    for row in rows {
        w.write_record(&row).expect("writing to memory");
    }
    String::from_utf8(w.into_inner().expect("writing to memory")).expect("fields are UTF-8")
}

pub fn export_years(table: &YearTable) -> String {
    write_csv(
        &TABLE2_HEADER,
        table.rows.iter().map(|r| {
            vec![
                r.year_label.clone(),
                r.dft_files.to_string(),
                r.dcft_members.to_string(),
                r.dmft_members.to_string(),
                r.tcu_files.to_string(),
            ]
        }),
    )
}

pub fn export_locations(table: &LocationTable) -> String {
    write_csv(
        &TABLE1_HEADER,
        table.rows.iter().map(|r| {
            std::iter::once(r.label.clone())
                .chain(r.counts.iter().map(u32::to_string))
                .chain(std::iter::once(r.total.to_string()))
                .collect()
        }),
    )
}

pub fn export_historical(table: &HistoricalTable) -> String {
    match table {
        HistoricalTable::Locations(t) => export_locations(t),
        HistoricalTable::Years(t) => export_years(t),
    }
}
