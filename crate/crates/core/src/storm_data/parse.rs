use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDateTime, Utc};

use super::{RawStormRecord, StormTrack};
use crate::error::{Error, Result};

pub const TRACK_HEADER: [&str; 12] = [
    "sid",
    "iso_time",
    "lat",
    "lon",
    "wmo_wind",
    "wmo_pres",
    "dist2land",
    "storm_speed",
    "storm_dir",
    "nature",
    "basin",
    "wind_avg_period",
];

/// A rejected CSV row.
#[derive(Clone, Debug, PartialEq)]
pub struct RowDiagnostic {
    /// 1-based line number in the source file (the header is line 1).
    pub line: u64,
    pub message: String,
}

impl std::fmt::Display for RowDiagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParsedTracks {
    pub tracks: Vec<StormTrack>,
    pub rejected: Vec<RowDiagnostic>,
}

pub fn parse_track_csv(path: &Path) -> Result<ParsedTracks> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_track_reader(file)
}

pub fn parse_track_reader<R: Read>(reader: R) -> Result<ParsedTracks> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .flexible(true)
        .from_reader(reader);

    let header = rdr
        .headers()
        .map_err(|e| Error::Format(format!("unreadable header: {e}")))?
        .clone();
    let found: Vec<&str> = header.iter().map(str::trim).collect();
    if found != TRACK_HEADER {
        return Err(Error::Format(format!(
            "track header must be `{}`, found `{}`",
            TRACK_HEADER.join(","),
            found.join(",")
        )));
    }

    let mut order: Vec<String> = Vec::new();
    let mut by_storm: HashMap<String, Vec<(u64, RawStormRecord)>> = HashMap::new();
    let mut rejected = Vec::new();

    for row in rdr.records() {
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                rejected.push(RowDiagnostic {
                    line,
                    message: e.to_string(),
                });
                continue;
            }
        };
        let line = row.position().map_or(0, |p| p.line());
        match parse_row(&row) {
            Ok(rec) => {
                if !by_storm.contains_key(&rec.storm_id) {
                    order.push(rec.storm_id.clone());
                }
                by_storm
                    .entry(rec.storm_id.clone())
                    .or_default()
                    .push((line, rec));
            }
            Err(e) => rejected.push(RowDiagnostic {
                line,
                message: e.to_string(),
            }),
        }
    }

    let mut tracks = Vec::with_capacity(order.len());
    for sid in order {
        let mut rows = by_storm.remove(&sid).unwrap_or_default();
        rows.sort_by_key(|(_, r)| r.timestamp);
        let mut records: Vec<RawStormRecord> = Vec::with_capacity(rows.len());
        for (line, rec) in rows {
            if records.last().is_some_and(|p| p.timestamp == rec.timestamp) {
                rejected.push(RowDiagnostic {
                    line,
                    message: format!("duplicate timestamp {} for storm {sid}", rec.timestamp),
                });
                continue;
            }
            records.push(rec);
        }
        tracks.push(StormTrack {
            storm_id: sid,
            records,
        });
    }
    rejected.sort_by_key(|d| d.line);
    Ok(ParsedTracks { tracks, rejected })
}

fn parse_row(row: &csv::StringRecord) -> Result<RawStormRecord> {
    if row.len() != TRACK_HEADER.len() {
        return Err(Error::Format(format!(
            "expected {} fields, found {}",
            TRACK_HEADER.len(),
            row.len()
        )));
    }
    let field = |i: usize| row.get(i).unwrap_or("").trim();
    let storm_id = field(0).to_string();
    if storm_id.is_empty() {
        return Err(Error::Format("empty sid".into()));
    }
    let rec = RawStormRecord {
        storm_id,
        timestamp: parse_iso_time(field(1))?,
        lat: required(field(2), "lat")?,
        lon: required(field(3), "lon")?,
        wmo_wind: optional(field(4), "wmo_wind")?,
        wmo_pressure: optional(field(5), "wmo_pres")?,
        dist_to_land: required(field(6), "dist2land")?,
        storm_speed: required(field(7), "storm_speed")?,
        storm_dir: required(field(8), "storm_dir")?,
        nature: field(9).parse()?,
        basin: field(10).parse()?,
        wind_avg_period: field(11).parse()?,
    };
    rec.validate()?;
    Ok(rec)
}

fn required(s: &str, name: &str) -> Result<f64> {
    optional(s, name)?.ok_or_else(|| Error::Format(format!("missing required field {name}")))
}

fn optional(s: &str, name: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    let v: f64 = s
        .parse()
        .map_err(|_| Error::Format(format!("field {name}: {s:?} is not a number")))?;
    if !v.is_finite() {
        return Err(Error::Format(format!("field {name}: {s:?} is not finite")));
    }
    Ok(Some(v))
}

/// Parse an ISO-8601 UTC timestamp. Accepts the extended form with or
/// without a trailing `Z`, a space separator, and the compact basic form
/// `YYYYMMDDTHHMMZ` used in cube filenames.
pub fn parse_iso_time(s: &str) -> Result<DateTime<Utc>> {
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Ok(dt.with_timezone(&Utc));
    }
    let trimmed = s.trim_end_matches('Z');
    for fmt in [
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%dT%H:%M",
        "%Y%m%dT%H%M%S",
        "%Y%m%dT%H%M",
    ] {
        if let Ok(naive) = NaiveDateTime::parse_from_str(trimmed, fmt) {
            return Ok(naive.and_utc());
        }
    }
    Err(Error::Format(format!("unparseable timestamp {s:?}")))
}

pub fn format_iso_time(t: &DateTime<Utc>) -> String {
    t.format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

/// Compact ISO-8601 basic form, safe in filenames.
pub fn format_iso_basic(t: &DateTime<Utc>) -> String {
    t.format("%Y%m%dT%H%MZ").to_string()
}

pub fn write_track_csv<W: Write>(writer: W, tracks: &[StormTrack]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let map_err = |e: csv::Error| Error::Format(format!("csv write failed: {e}"));
    w.write_record(TRACK_HEADER).map_err(map_err)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
    for t in tracks {
        for r in &t.records {
            w.write_record([
                r.storm_id.clone(),
                format_iso_time(&r.timestamp),
                format!("{}", r.lat),
                format!("{}", r.lon),
                opt(r.wmo_wind),
                opt(r.wmo_pressure),
                format!("{}", r.dist_to_land),
                format!("{}", r.storm_speed),
                format!("{}", r.storm_dir),
                r.nature.label().to_string(),
                r.basin.label().to_string(),
                r.wind_avg_period.label().to_string(),
            ])
            .map_err(map_err)?;
        }
    }
    w.flush().map_err(|e| Error::Format(format!("csv flush failed: {e}")))?;
    Ok(())
}
