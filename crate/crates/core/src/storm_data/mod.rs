//! Storm-track ingestion, preprocessing and forecast-case assembly.
//!
//! Tracks arrive as CSV rows (one row per fix). They are brought to a
//! 3-hour cadence, winds are converted to 1-minute averaging, storms are
//! filtered by the tropical-storm criteria, and each eligible time step is
//! turned into a [`ForecastCase`] holding an 8-step history window and the
//! 24-hour-ahead targets.

mod cases;
mod features;
mod parse;
mod preprocess;

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use cases::{
    build_cases, case_id, split_by_year, CaseBuild, ForecastCase, Split, SplitCases, SplitYears,
    HISTORY_STEPS, LEAD_STEPS,
};
pub use features::{encode_features, FeatureLayout, FeatureVector, Scaler};
pub use parse::{
    format_iso_basic, format_iso_time, parse_iso_time, parse_track_csv, parse_track_reader,
    write_track_csv, ParsedTracks, RowDiagnostic, TRACK_HEADER,
};
pub use preprocess::{
    adjust_wind_averaging, interpolate_to_3h, select_storms, to_one_minute_winds, WIND_10MIN_FACTOR,
};

/// Hours between consecutive records after interpolation.
pub const CADENCE_HOURS: i64 = 3;

macro_rules! label_enum {
    ($(#[$doc:meta])* $name:ident, $kind:literal, [$($var:ident),+ $(,)?]) => {
        $(#[$doc])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum $name {
            $($var),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$var),+];

            pub fn label(self) -> &'static str {
                match self {
                    $($name::$var => stringify!($var)),+
                }
            }

            /// Position of this category in its one-hot block.
            pub fn index(self) -> usize {
                Self::ALL.iter().position(|c| *c == self).unwrap()
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s.trim() {
                    $(stringify!($var) => Ok($name::$var),)+
                    other => Err(Error::Category {
                        kind: $kind,
                        label: other.to_string(),
                        admissible: Self::ALL
                            .iter()
                            .map(|c| c.label())
                            .collect::<Vec<_>>()
                            .join(", "),
                    }),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.label())
            }
        }
    };
}

label_enum!(
    /// Ocean basin.
    Basin, "basin", [NA, EP, WP, NI, SI, SP, SA]
);

label_enum!(
    /// Storm nature as reported in the track archive.
    Nature, "nature", [DS, TS, ET, SS, NR, MX]
);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WindAvgPeriod {
    OneMin,
    TenMin,
}

impl WindAvgPeriod {
    pub fn label(self) -> &'static str {
        match self {
            WindAvgPeriod::OneMin => "1min",
            WindAvgPeriod::TenMin => "10min",
        }
    }
}

impl FromStr for WindAvgPeriod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "1min" => Ok(WindAvgPeriod::OneMin),
            "10min" => Ok(WindAvgPeriod::TenMin),
            other => Err(Error::Category {
                kind: "wind_avg_period",
                label: other.to_string(),
                admissible: "1min, 10min".to_string(),
            }),
        }
    }
}

/// One best-track fix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawStormRecord {
    pub storm_id: String,
    pub timestamp: DateTime<Utc>,
    pub lat: f64,
    pub lon: f64,
    /// Knots; `None` when not reported.
    pub wmo_wind: Option<f64>,
    /// Millibars; `None` when not reported.
    pub wmo_pressure: Option<f64>,
    /// Kilometers.
    pub dist_to_land: f64,
    /// Knots.
    pub storm_speed: f64,
    /// Degrees east of north.
    pub storm_dir: f64,
    pub nature: Nature,
    pub basin: Basin,
    pub wind_avg_period: WindAvgPeriod,
}

impl RawStormRecord {
    pub fn validate(&self) -> Result<()> {
        if !(-90.0..=90.0).contains(&self.lat) {
            return Err(Error::Domain(format!("latitude {} outside [-90, 90]", self.lat)));
        }
        if !(-180.0..=180.0).contains(&self.lon) {
            return Err(Error::Domain(format!("longitude {} outside [-180, 180]", self.lon)));
        }
        if let Some(w) = self.wmo_wind {
            if !(w >= 0.0) {
                return Err(Error::Domain(format!("wind {w} is negative")));
            }
        }
        if !(self.dist_to_land >= 0.0) {
            return Err(Error::Domain(format!(
                "distance to land {} is negative",
                self.dist_to_land
            )));
        }
        if !(self.storm_speed >= 0.0) {
            return Err(Error::Domain(format!(
                "storm speed {} is negative",
                self.storm_speed
            )));
        }
        if !(0.0..360.0).contains(&self.storm_dir) {
            return Err(Error::Domain(format!(
                "storm direction {} outside [0, 360)",
                self.storm_dir
            )));
        }
        Ok(())
    }
}

/// Time-ordered fixes of a single storm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StormTrack {
    pub storm_id: String,
    pub records: Vec<RawStormRecord>,
}

impl StormTrack {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Spacing between consecutive records if it is uniform.
    pub fn cadence_hours(&self) -> Option<i64> {
        let mut steps = self
            .records
            .windows(2)
            .map(|w| (w[1].timestamp - w[0].timestamp).num_minutes());
        let first = steps.next()?;
        if first % 60 != 0 || steps.any(|s| s != first) {
            return None;
        }
        Some(first / 60)
    }
}

/// Wrap a longitude difference into (-180, 180].
pub fn wrap_degrees(delta: f64) -> f64 {
    let mut d = delta % 360.0;
    if d > 180.0 {
        d -= 360.0;
    } else if d <= -180.0 {
        d += 360.0;
    }
    d
}

/// Wrap a longitude into [-180, 180).
pub fn normalize_lon(lon: f64) -> f64 {
    let d = wrap_degrees(lon);
    if d == 180.0 {
        -180.0
    } else {
        d
    }
}

/// Counts and cases produced by [`ingest_tracks`].
#[derive(Clone, Debug, Default)]
pub struct Ingest {
    pub storms_in: usize,
    pub storms_selected: usize,
    pub skipped_missing_cube: usize,
    pub skipped_incomplete: usize,
    pub cases: SplitCases,
}

/// Convert winds to 1-minute averaging, interpolate to 3 h, select storms,
/// slide the history window and tag each case with its split.
pub fn ingest_tracks(
    tracks: Vec<StormTrack>,
    layout: FeatureLayout,
    frames: Option<&dyn crate::tensor_ops::FrameSource>,
    years: &SplitYears,
) -> Result<Ingest> {
    let storms_in = tracks.len();
    let prepared = tracks
        .into_iter()
        .map(|t| interpolate_to_3h(to_one_minute_winds(t)?))
        .collect::<Result<Vec<_>>>()?;
    let selected = select_storms(prepared);
    let mut out = Ingest {
        storms_in,
        storms_selected: selected.len(),
        ..Ingest::default()
    };
    let mut all = Vec::new();
    for t in &selected {
        let b = build_cases(t, layout, frames)?;
        out.skipped_missing_cube += b.skipped_missing_cube;
        out.skipped_incomplete += b.skipped_incomplete;
        all.extend(b.cases);
    }
    out.cases = split_by_year(all, years);
    Ok(out)
}
