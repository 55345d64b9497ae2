//! A single model's 24-hour forecast for one case, and the operational
//! forecast CSV used for consensus members.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::storm_data::{case_id, format_iso_time, normalize_lon, parse_iso_time, ForecastCase};

/// Operational members are matched at this lead time only.
pub const LEAD_HOURS: u32 = 24;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastRecord {
    pub model: String,
    pub storm_id: String,
    pub t0: DateTime<Utc>,
    /// 1-minute sustained wind, knots.
    pub wind: Option<f64>,
    /// Predicted displacement (Δlat, Δlon) in degrees.
    pub displacement: Option<(f64, f64)>,
    /// Predicted position (lat, lon) in degrees.
    pub position: Option<(f64, f64)>,
}

impl ForecastRecord {
    pub fn case_id(&self) -> String {
        case_id(&self.storm_id, &self.t0)
    }

    /// Predicted end position, reconstructing it from the displacement and
    /// the case's t0 fix when only a displacement is known.
    pub fn position_for(&self, case: &ForecastCase) -> Option<(f64, f64)> {
        self.position.or_else(|| {
            self.displacement
                .map(|(dlat, dlon)| (case.lat0 + dlat, normalize_lon(case.lon0 + dlon)))
        })
    }
}

/// Index forecasts by case id; duplicate ids are an error.
pub fn index_by_case(records: &[ForecastRecord]) -> Result<HashMap<String, &ForecastRecord>> {
    let mut out = HashMap::with_capacity(records.len());
    for r in records {
        if out.insert(r.case_id(), r).is_some() {
            return Err(Error::Format(format!(
                "duplicate forecast for case {} from model {}",
                r.case_id(),
                r.model
            )));
        }
    }
    Ok(out)
}

pub const OPERATIONAL_HEADER: [&str; 7] = [
    "model_id", "sid", "iso_t0", "lead_hours", "pred_lat", "pred_lon", "pred_wind",
];

/// Parse operational forecasts (`model_id,sid,iso_t0,lead_hours,pred_lat,pred_lon,pred_wind`).
/// Rows at other lead times are skipped.
pub fn parse_operational_reader<R: Read>(reader: R) -> Result<Vec<ForecastRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::Format(format!("unreadable header: {e}")))?
        .clone();
    let found: Vec<&str> = header.iter().map(str::trim).collect();
    if found != OPERATIONAL_HEADER {
        return Err(Error::Format(format!(
            "operational header must be `{}`, found `{}`",
            OPERATIONAL_HEADER.join(","),
            found.join(",")
        )));
    }
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| Error::Format(e.to_string()))?;
        let line = row.position().map_or(0, |p| p.line());
        let num = |i: usize| -> Result<Option<f64>> {
            let s = row.get(i).unwrap_or("").trim();
            if s.is_empty() {
                return Ok(None);
            }
            s.parse::<f64>()
                .map(Some)
                .map_err(|_| Error::Format(format!("line {line}: {s:?} is not a number")))
        };
        let lead = num(3)?.ok_or_else(|| Error::Format(format!("line {line}: missing lead_hours")))?;
        if lead != LEAD_HOURS as f64 {
            continue;
        }
        let position = match (num(4)?, num(5)?) {
            (Some(a), Some(b)) => Some((a, b)),
            _ => None,
        };
        out.push(ForecastRecord {
            model: row.get(0).unwrap_or("").trim().to_string(),
            storm_id: row.get(1).unwrap_or("").trim().to_string(),
            t0: parse_iso_time(row.get(2).unwrap_or("").trim())?,
            wind: num(6)?,
            displacement: None,
            position,
        });
    }
    Ok(out)
}

pub fn parse_operational_csv(path: &Path) -> Result<Vec<ForecastRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_operational_reader(f)
}

pub fn write_operational<W: std::io::Write>(w: W, records: &[ForecastRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    let err = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(OPERATIONAL_HEADER).map_err(err)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
    for r in records {
        w.write_record([
            r.model.clone(),
            r.storm_id.clone(),
            format_iso_time(&r.t0),
            LEAD_HOURS.to_string(),
            opt(r.position.map(|p| p.0)),
            opt(r.position.map(|p| p.1)),
            opt(r.wind),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))
}

pub const FORECAST_HEADER: [&str; 7] = [
    "sid", "iso_t0", "pred_wind", "pred_dlat", "pred_dlon", "pred_lat", "pred_lon",
];

/// Comment line written above forecast CSVs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub model: String,
    pub seed: u64,
    pub config_hash: String,
}

impl Provenance {
    pub fn to_line(&self) -> String {
        format!(
            "# generated-by=hurricast {}; model={}; seed={}; config={}",
            env!("CARGO_PKG_VERSION"),
            self.model,
            self.seed,
            self.config_hash
        )
    }

    pub fn from_line(line: &str) -> Option<Self> {
        let body = line.strip_prefix('#')?.trim();
        let mut model = None;
        let mut seed = None;
        let mut config_hash = None;
        for part in body.split("; ") {
            match part.split_once('=') {
                Some(("model", v)) => model = Some(v.to_string()),
                Some(("seed", v)) => seed = v.parse().ok(),
                Some(("config", v)) => config_hash = Some(v.to_string()),
                _ => {}
            }
        }
        Some(Self {
            model: model?,
            seed: seed?,
            config_hash: config_hash?,
        })
    }
}

/// Write forecasts as `sid,iso_t0,pred_wind,pred_dlat,pred_dlon,pred_lat,pred_lon`
/// below a provenance comment.
pub fn write_forecasts<W: std::io::Write>(
    mut w: W,
    records: &[ForecastRecord],
    provenance: &Provenance,
) -> Result<()> {
    writeln!(w, "{}", provenance.to_line()).map_err(|e| Error::Format(e.to_string()))?;
    let mut w = csv::Writer::from_writer(w);
    let err = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(FORECAST_HEADER).map_err(err)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
    for r in records {
        w.write_record([
            r.storm_id.clone(),
            format_iso_time(&r.t0),
            opt(r.wind),
            opt(r.displacement.map(|d| d.0)),
            opt(r.displacement.map(|d| d.1)),
            opt(r.position.map(|p| p.0)),
            opt(r.position.map(|p| p.1)),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))
}

/// Parse a forecast CSV. The model name comes from the provenance line,
/// or `fallback_model` when there is none.
pub fn parse_forecasts_reader<R: Read>(
    mut reader: R,
    fallback_model: &str,
) -> Result<(Vec<ForecastRecord>, Option<Provenance>)> {
    let mut text = String::new();
    reader
        .read_to_string(&mut text)
        .map_err(|e| Error::Format(format!("unreadable forecast file: {e}")))?;
    let provenance = text
        .lines()
        .take_while(|l| l.starts_with('#'))
        .find_map(Provenance::from_line);
    let model = provenance
        .as_ref()
        .map_or(fallback_model.to_string(), |p| p.model.clone());
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let header = rdr
        .headers()
        .map_err(|e| Error::Format(format!("unreadable header: {e}")))?
        .clone();
    let found: Vec<&str> = header.iter().map(str::trim).collect();
    if found != FORECAST_HEADER {
        return Err(Error::Format(format!(
            "forecast header must be `{}`, found `{}`",
            FORECAST_HEADER.join(","),
            found.join(",")
        )));
    }
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| Error::Format(e.to_string()))?;
        let line = row.position().map_or(0, |p| p.line());
        let num = |i: usize| -> Result<Option<f64>> {
            let s = row.get(i).unwrap_or("").trim();
            if s.is_empty() {
                return Ok(None);
            }
            s.parse::<f64>()
                .map(Some)
                .map_err(|_| Error::Format(format!("line {line}: {s:?} is not a number")))
        };
        let pair = |a: Option<f64>, b: Option<f64>| a.zip(b);
        out.push(ForecastRecord {
            model: model.clone(),
            storm_id: row.get(0).unwrap_or("").trim().to_string(),
            t0: parse_iso_time(row.get(1).unwrap_or("").trim())?,
            wind: num(2)?,
            displacement: pair(num(3)?, num(4)?),
            position: pair(num(5)?, num(6)?),
        });
    }
    Ok((out, provenance))
}

pub fn parse_forecasts_csv(path: &Path) -> Result<(Vec<ForecastRecord>, Option<Provenance>)> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let stem = path.file_stem().map_or(String::new(), |s| s.to_string_lossy().into_owned());
    parse_forecasts_reader(f, &stem)
}

/// Group records by model id, keeping first-appearance order.
pub fn group_by_model(records: Vec<ForecastRecord>) -> Vec<(String, Vec<ForecastRecord>)> {
    let mut out: Vec<(String, Vec<ForecastRecord>)> = Vec::new();
    for r in records {
        match out.iter_mut().find(|(m, _)| *m == r.model) {
            Some((_, v)) => v.push(r),
            None => out.push((r.model.clone(), vec![r])),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn operational_round_trip_and_lead_filter() {
        let csv = "model_id,sid,iso_t0,lead_hours,pred_lat,pred_lon,pred_wind\n\
                   OFCL,AL01,2017-08-01T00:00:00Z,24,15.5,-60.25,85\n\
                   OFCL,AL01,2017-08-01T00:00:00Z,48,17.0,-63.0,95\n\
                   GFSO,AL01,2017-08-01T00:00:00Z,24,,,80\n";
        let recs = parse_operational_reader(csv.as_bytes()).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].position, Some((15.5, -60.25)));
        assert_eq!(recs[1].position, None);
        assert_eq!(recs[1].wind, Some(80.0));
        let mut buf = Vec::new();
        write_operational(&mut buf, &recs).unwrap();
        assert_eq!(parse_operational_reader(buf.as_slice()).unwrap(), recs);
        let groups = group_by_model(recs);
        assert_eq!(groups[0].0, "OFCL");
        assert_eq!(groups[1].0, "GFSO");
    }

    #[test]
    fn bad_operational_header() {
        assert!(parse_operational_reader("a,b\n1,2\n".as_bytes()).is_err());
    }

    #[test]
    fn forecast_csv_round_trip() {
        let r = ForecastRecord {
            model: "HUML-(stat, xgb)".into(),
            storm_id: "NA1980000".into(),
            t0: parse_iso_time("2017-08-01T03:00:00Z").unwrap(),
            wind: Some(71.25),
            displacement: Some((1.5, -2.0)),
            position: Some((16.5, -62.0)),
        };
        let prov = Provenance {
            model: r.model.clone(),
            seed: 7,
            config_hash: "abc123".into(),
        };
        let mut buf = Vec::new();
        write_forecasts(&mut buf, std::slice::from_ref(&r), &prov).unwrap();
        let (back, p) = parse_forecasts_reader(buf.as_slice(), "x").unwrap();
        assert_eq!(back, vec![r]);
        assert_eq!(p, Some(prov));
    }
}
