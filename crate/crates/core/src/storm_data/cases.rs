use chrono::{DateTime, Datelike, Utc};
use serde::{Deserialize, Serialize};

use super::{encode_features, wrap_degrees, Basin, FeatureLayout, StormTrack};
use crate::error::Result;
use crate::matrix::Matrix;
use crate::storm_data::parse::format_iso_time;
use crate::tensor_ops::FrameSource;

/// History window length (t0 and the seven preceding 3-hourly fixes).
pub const HISTORY_STEPS: usize = 8;
/// Steps between t0 and the 24-hour target.
pub const LEAD_STEPS: usize = 8;

/// Which partition a case was assigned to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    #[default]
    Unassigned,
    Train,
    Validation,
    Test,
    Excluded,
}

impl Split {
    pub fn label(self) -> &'static str {
        match self {
            Split::Unassigned => "unassigned",
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
            Split::Excluded => "excluded",
        }
    }
}

/// One forecasting sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastCase {
    pub storm_id: String,
    /// Time of the last history step.
    pub t0: DateTime<Utc>,
    pub basin: Basin,
    /// Position and 1-minute wind at t0.
    pub lat0: f64,
    pub lon0: f64,
    pub wind0: f64,
    /// Encoded (unscaled) statistics, `HISTORY_STEPS x stat_dim`, oldest first.
    pub history_stat: Vec<f64>,
    pub stat_dim: usize,
    /// Valid times of the history steps, oldest first.
    pub history_times: Vec<DateTime<Utc>>,
    /// 1-minute wind at t0 + 24 h, knots.
    pub target_intensity: f64,
    /// Displacement over [t0, t0 + 24 h], degrees.
    pub target_dlat: f64,
    pub target_dlon: f64,
    #[serde(default)]
    pub split: Split,
}

impl ForecastCase {
    pub fn id(&self) -> String {
        case_id(&self.storm_id, &self.t0)
    }

    pub fn history_row(&self, step: usize) -> &[f64] {
        &self.history_stat[step * self.stat_dim..(step + 1) * self.stat_dim]
    }

    pub fn history_matrix(&self) -> Matrix {
        Matrix::from_vec(HISTORY_STEPS, self.stat_dim, self.history_stat.clone())
            .expect("history shape is fixed at construction")
    }

    pub fn target_lat(&self) -> f64 {
        self.lat0 + self.target_dlat
    }

    pub fn target_lon(&self) -> f64 {
        super::normalize_lon(self.lon0 + self.target_dlon)
    }
}

pub fn case_id(storm_id: &str, t0: &DateTime<Utc>) -> String {
    format!("{storm_id}@{}", format_iso_time(t0))
}

#[derive(Clone, Debug, Default)]
pub struct CaseBuild {
    pub cases: Vec<ForecastCase>,
    /// Windows dropped because a history frame was missing from the cube store.
    pub skipped_missing_cube: usize,
    /// Windows dropped because wind/pressure was missing in the history or target.
    pub skipped_incomplete: usize,
}

/// Slide the history window along a 3-hourly track. Every index with seven
/// earlier fixes and a fix 24 h later yields a case; the first fix of the
/// track uses zero displacement.
pub fn build_cases(
    track: &StormTrack,
    layout: FeatureLayout,
    frames: Option<&dyn FrameSource>,
) -> Result<CaseBuild> {
    let mut out = CaseBuild::default();
    let recs = &track.records;
    if recs.len() < HISTORY_STEPS + LEAD_STEPS {
        return Ok(out);
    }
    // Encode every fix once; `None` where wind or pressure is missing.
    let encoded: Vec<Option<Vec<f64>>> = (0..recs.len())
        .map(|k| {
            let prev = if k == 0 { &recs[0] } else { &recs[k - 1] };
            encode_features(&recs[k], prev, layout).ok().map(|f| f.values)
        })
        .collect();

    for i in HISTORY_STEPS - 1..recs.len() - LEAD_STEPS {
        let window = i + 1 - HISTORY_STEPS..=i;
        let target = &recs[i + LEAD_STEPS];
        if window.clone().any(|k| encoded[k].is_none()) || target.wmo_wind.is_none() {
            out.skipped_incomplete += 1;
            continue;
        }
        if let Some(src) = frames {
            if window
                .clone()
                .any(|k| !src.has_frame(&track.storm_id, &recs[k].timestamp))
            {
                out.skipped_missing_cube += 1;
                continue;
            }
        }
        let mut history_stat = Vec::with_capacity(HISTORY_STEPS * layout.dim());
        for k in window.clone() {
            history_stat.extend_from_slice(encoded[k].as_ref().unwrap());
        }
        let now = &recs[i];
        let target_wind = super::adjust_wind_averaging(target.wmo_wind.unwrap(), target.wind_avg_period)?;
        out.cases.push(ForecastCase {
            storm_id: track.storm_id.clone(),
            t0: now.timestamp,
            basin: now.basin,
            lat0: now.lat,
            lon0: now.lon,
            wind0: encoded[i].as_ref().unwrap()[FeatureLayout::WIND_INDEX],
            history_stat,
            stat_dim: layout.dim(),
            history_times: window.map(|k| recs[k].timestamp).collect(),
            target_intensity: target_wind,
            target_dlat: target.lat - now.lat,
            target_dlon: wrap_degrees(target.lon - now.lon),
            split: Split::Unassigned,
        });
    }
    Ok(out)
}

/// Inclusive year ranges of the three partitions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitYears {
    pub train: (i32, i32),
    pub validation: (i32, i32),
    pub test: (i32, i32),
}

impl Default for SplitYears {
    fn default() -> Self {
        Self {
            train: (1980, 2011),
            validation: (2012, 2015),
            test: (2016, 2019),
        }
    }
}

impl SplitYears {
    pub fn classify(&self, year: i32) -> Split {
        let within = |(a, b): (i32, i32)| (a..=b).contains(&year);
        if within(self.train) {
            Split::Train
        } else if within(self.validation) {
            Split::Validation
        } else if within(self.test) {
            Split::Test
        } else {
            Split::Excluded
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct SplitCases {
    pub train: Vec<ForecastCase>,
    pub validation: Vec<ForecastCase>,
    pub test: Vec<ForecastCase>,
    /// Cases whose t0 year falls outside every range.
    pub excluded: Vec<ForecastCase>,
}

/// Partition by the calendar year of t0 and tag each case with its split.
pub fn split_by_year(cases: Vec<ForecastCase>, years: &SplitYears) -> SplitCases {
    let mut out = SplitCases::default();
    for mut c in cases {
        c.split = years.classify(c.t0.year());
        match c.split {
            Split::Train => out.train.push(c),
            Split::Validation => out.validation.push(c),
            Split::Test => out.test.push(c),
            _ => out.excluded.push(c),
        }
    }
    out
}
