use std::f64::consts::PI;

use chrono::{Datelike, Timelike};
use serde::{Deserialize, Serialize};

use super::{adjust_wind_averaging, wrap_degrees, Basin, Nature, RawStormRecord};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Column ordering of the per-step statistical vector.
///
/// The canonical layout has 27 slots:
/// `lat_cos, lat_sin, lon_cos, lon_sin, date_cos, date_sin, dir_cos, dir_sin,
/// wind_1min, pressure, dist_to_land, storm_speed, disp_lat, disp_lon`,
/// then the 7 basin one-hots and the 6 nature one-hots. With
/// `include_raw_position` the raw latitude and longitude are appended,
/// giving 29 slots.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub include_raw_position: bool,
}

const CYCLIC: [&str; 8] = [
    "lat_cos", "lat_sin", "lon_cos", "lon_sin", "date_cos", "date_sin", "dir_cos", "dir_sin",
];
const NUMERIC: [&str; 6] = [
    "wind_1min",
    "pressure",
    "dist_to_land",
    "storm_speed",
    "disp_lat",
    "disp_lon",
];

impl FeatureLayout {
    pub const BASIN_OFFSET: usize = 14;
    pub const NATURE_OFFSET: usize = 21;
    pub const WIND_INDEX: usize = 8;

    pub fn dim(&self) -> usize {
        27 + if self.include_raw_position { 2 } else { 0 }
    }

    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<String> = CYCLIC.iter().chain(NUMERIC.iter()).map(|s| s.to_string()).collect();
        names.extend(Basin::ALL.iter().map(|b| format!("basin_{b}")));
        names.extend(Nature::ALL.iter().map(|n| format!("nature_{n}")));
        if self.include_raw_position {
            names.push("lat".into());
            names.push("lon".into());
        }
        names
    }

    /// True for columns the scaler must leave untouched (cyclical pairs and
    /// one-hot blocks).
    pub fn passthrough_mask(&self) -> Vec<bool> {
        let mut mask = vec![true; CYCLIC.len()];
        mask.extend(std::iter::repeat_n(false, NUMERIC.len()));
        mask.extend(std::iter::repeat_n(true, Basin::ALL.len() + Nature::ALL.len()));
        if self.include_raw_position {
            mask.extend([false, false]);
        }
        mask
    }

    /// Layout for a given statistical dimension, if one exists.
    pub fn for_dim(s: usize) -> Result<Self> {
        match s {
            27 => Ok(FeatureLayout {
                include_raw_position: false,
            }),
            29 => Ok(FeatureLayout {
                include_raw_position: true,
            }),
            other => Err(Error::Config(format!(
                "statistical dimension {other} has no layout; supported: 27, 29"
            ))),
        }
    }
}

/// One encoded time step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
}

fn cyclic(angle_rad: f64) -> [f64; 2] {
    [angle_rad.cos(), angle_rad.sin()]
}

/// Fraction of the year elapsed, divided by 365 (a leap year's last day
/// therefore maps to 365/365).
fn day_of_year_fraction(t: &chrono::DateTime<chrono::Utc>) -> f64 {
    let day0 = t.ordinal0() as f64;
    let hours = t.hour() as f64 + t.minute() as f64 / 60.0;
    (day0 + hours / 24.0) / 365.0
}

/// Encode `record` using `prev` (the fix one step earlier) for the
/// displacement features. Pass the record itself as `prev` for the first
/// fix of a track.
pub fn encode_features(
    record: &RawStormRecord,
    prev: &RawStormRecord,
    layout: FeatureLayout,
) -> Result<FeatureVector> {
    if record.storm_id != prev.storm_id {
        return Err(Error::Domain(format!(
            "displacement between different storms {} and {}",
            prev.storm_id, record.storm_id
        )));
    }
    record.validate()?;
    let wind = record
        .wmo_wind
        .ok_or_else(|| Error::Domain(format!("missing wind at {}", record.timestamp)))?;
    let wind = adjust_wind_averaging(wind, record.wind_avg_period)?;
    let pressure = record
        .wmo_pressure
        .ok_or_else(|| Error::Domain(format!("missing pressure at {}", record.timestamp)))?;

    let mut v = Vec::with_capacity(layout.dim());
    v.extend(cyclic(PI * record.lat / 180.0));
    v.extend(cyclic(PI * record.lon / 180.0));
    v.extend(cyclic(2.0 * PI * day_of_year_fraction(&record.timestamp)));
    v.extend(cyclic(record.storm_dir.to_radians()));
    v.extend([
        wind,
        pressure,
        record.dist_to_land,
        record.storm_speed,
        record.lat - prev.lat,
        wrap_degrees(record.lon - prev.lon),
    ]);
    let mut basin = [0.0; 7];
    basin[record.basin.index()] = 1.0;
    v.extend(basin);
    let mut nature = [0.0; 6];
    nature[record.nature.index()] = 1.0;
    v.extend(nature);
    if layout.include_raw_position {
        v.extend([record.lat, record.lon]);
    }
    debug_assert_eq!(v.len(), layout.dim());
    Ok(FeatureVector { values: v })
}

/// Per-column standardization fitted on training rows.
///
/// Columns flagged as pass-through are copied unchanged; constant columns
/// are passed through as well (mean 0, std 1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    passthrough: Vec<bool>,
    mean: Vec<f64>,
    std: Vec<f64>,
    fitted: bool,
}

const CONSTANT_EPS: f64 = 1e-12;

impl Scaler {
    pub fn new(passthrough: Vec<bool>) -> Self {
        let n = passthrough.len();
        Self {
            passthrough,
            mean: vec![0.0; n],
            std: vec![1.0; n],
            fitted: false,
        }
    }

    pub fn for_layout(layout: FeatureLayout) -> Self {
        Self::new(layout.passthrough_mask())
    }

    /// Rebuild a fitted scaler from stored statistics.
    pub fn from_parts(passthrough: Vec<bool>, mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != passthrough.len() || std.len() != passthrough.len() {
            return Err(Error::Dimension("scaler arrays differ in length".into()));
        }
        if std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Domain("scaler std must be positive".into()));
        }
        Ok(Self {
            passthrough,
            mean,
            std,
            fitted: true,
        })
    }

    pub fn fit(&mut self, rows: &Matrix) -> Result<()> {
        let width = self.passthrough.len();
        if rows.cols() != width {
            return Err(Error::Dimension(format!(
                "scaler expects {width} columns, got {}",
                rows.cols()
            )));
        }
        if rows.rows() == 0 {
            return Err(Error::Empty("cannot fit scaler on zero rows".into()));
        }
        let n = rows.rows() as f64;
        for c in 0..width {
            if self.passthrough[c] {
                self.mean[c] = 0.0;
                self.std[c] = 1.0;
                continue;
            }
            let mean = (0..rows.rows()).map(|r| rows.get(r, c)).sum::<f64>() / n;
            let var = (0..rows.rows())
                .map(|r| (rows.get(r, c) - mean).powi(2))
                .sum::<f64>()
                / n;
            let std = var.sqrt();
            if std < CONSTANT_EPS {
                self.mean[c] = 0.0;
                self.std[c] = 1.0;
            } else {
                self.mean[c] = mean;
                self.std[c] = std;
            }
        }
        self.fitted = true;
        Ok(())
    }

    pub fn fitted(passthrough: Vec<bool>, rows: &Matrix) -> Result<Self> {
        let mut s = Self::new(passthrough);
        s.fit(rows)?;
        Ok(s)
    }

    pub fn is_fitted(&self) -> bool {
        self.fitted
    }

    pub fn width(&self) -> usize {
        self.passthrough.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    pub fn passthrough(&self) -> &[bool] {
        &self.passthrough
    }

    /// Standardize a single row in place.
    pub fn transform_row(&self, row: &mut [f64]) -> Result<()> {
        if !self.fitted {
            return Err(Error::State("scaler applied before fit".into()));
        }
        if row.len() != self.width() {
            return Err(Error::Dimension(format!(
                "scaler expects {} columns, got {}",
                self.width(),
                row.len()
            )));
        }
        for (c, v) in row.iter_mut().enumerate() {
            *v = (*v - self.mean[c]) / self.std[c];
        }
        Ok(())
    }

    pub fn transform(&self, rows: &Matrix) -> Result<Matrix> {
        let mut out = rows.clone();
        for r in 0..out.rows() {
            self.transform_row(out.row_mut(r))?;
        }
        Ok(out)
    }
}
