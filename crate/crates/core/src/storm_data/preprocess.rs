use chrono::Duration;

use super::{normalize_lon, wrap_degrees, RawStormRecord, StormTrack, WindAvgPeriod, CADENCE_HOURS};
use crate::error::{Error, Result};

/// Ratio between 10-minute and 1-minute sustained winds.
pub const WIND_10MIN_FACTOR: f64 = 0.93;

/// Tropical-storm threshold in knots.
const TS_THRESHOLD_KT: f64 = 34.0;
/// Required track length after first reaching the threshold, exclusive.
const MIN_HOURS_AFTER_TS: i64 = 60;

pub fn adjust_wind_averaging(wind: f64, period: WindAvgPeriod) -> Result<f64> {
    if !(wind >= 0.0) {
        return Err(Error::Domain(format!("wind {wind} must be non-negative")));
    }
    Ok(match period {
        WindAvgPeriod::OneMin => wind,
        WindAvgPeriod::TenMin => wind / WIND_10MIN_FACTOR,
    })
}

/// Convert every reported wind to 1-minute averaging.
pub fn to_one_minute_winds(mut track: StormTrack) -> Result<StormTrack> {
    for r in &mut track.records {
        if let Some(w) = r.wmo_wind {
            r.wmo_wind = Some(adjust_wind_averaging(w, r.wind_avg_period)?);
        }
        r.wind_avg_period = WindAvgPeriod::OneMin;
    }
    Ok(track)
}

/// Bring a 6-hourly track to 3-hourly cadence by linear interpolation at
/// midpoints, then fill interior wind/pressure gaps linearly in time.
/// Missing values at either end of the track stay missing.
pub fn interpolate_to_3h(track: StormTrack) -> Result<StormTrack> {
    if track.records.len() < 2 {
        return Ok(fill_interior_gaps(track));
    }
    match track.cadence_hours() {
        Some(h) if h == CADENCE_HOURS => return Ok(fill_interior_gaps(track)),
        Some(h) if h == 2 * CADENCE_HOURS => {}
        _ => {
            let bad: Vec<String> = track
                .records
                .windows(2)
                .filter(|w| (w[1].timestamp - w[0].timestamp).num_minutes() != 2 * CADENCE_HOURS * 60)
                .map(|w| format!("{} -> {}", w[0].timestamp, w[1].timestamp))
                .collect();
            return Err(Error::Cadence(format!(
                "storm {} is not on a uniform 6 h cadence at {}",
                track.storm_id,
                bad.join("; ")
            )));
        }
    }

    let mut out = Vec::with_capacity(track.records.len() * 2 - 1);
    for w in track.records.windows(2) {
        out.push(w[0].clone());
        out.push(midpoint(&w[0], &w[1]));
    }
    out.push(track.records.last().unwrap().clone());
    Ok(fill_interior_gaps(StormTrack {
        storm_id: track.storm_id,
        records: out,
    }))
}

fn lerp_opt(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    Some(0.5 * (a? + b?))
}

fn midpoint(a: &RawStormRecord, b: &RawStormRecord) -> RawStormRecord {
    let half = Duration::minutes((b.timestamp - a.timestamp).num_minutes() / 2);
    let dir = (a.storm_dir + 0.5 * wrap_degrees(b.storm_dir - a.storm_dir)).rem_euclid(360.0);
    RawStormRecord {
        storm_id: a.storm_id.clone(),
        timestamp: a.timestamp + half,
        lat: 0.5 * (a.lat + b.lat),
        lon: normalize_lon(a.lon + 0.5 * wrap_degrees(b.lon - a.lon)),
        wmo_wind: lerp_opt(a.wmo_wind, b.wmo_wind),
        wmo_pressure: lerp_opt(a.wmo_pressure, b.wmo_pressure),
        dist_to_land: 0.5 * (a.dist_to_land + b.dist_to_land),
        storm_speed: 0.5 * (a.storm_speed + b.storm_speed),
        storm_dir: if dir >= 360.0 { 0.0 } else { dir },
        nature: a.nature,
        basin: a.basin,
        wind_avg_period: a.wind_avg_period,
    }
}

fn fill_interior_gaps(mut track: StormTrack) -> StormTrack {
    fill_series(&mut track.records, |r| &mut r.wmo_wind);
    fill_series(&mut track.records, |r| &mut r.wmo_pressure);
    track
}

fn fill_series<F>(records: &mut [RawStormRecord], mut field: F)
where
    F: FnMut(&mut RawStormRecord) -> &mut Option<f64>,
{
    let known: Vec<usize> = (0..records.len())
        .filter(|&i| field(&mut records[i]).is_some())
        .collect();
    for pair in known.windows(2) {
        let (i, j) = (pair[0], pair[1]);
        if j == i + 1 {
            continue;
        }
        let ti = records[i].timestamp;
        let span = (records[j].timestamp - ti).num_seconds() as f64;
        let vi = field(&mut records[i]).unwrap();
        let vj = field(&mut records[j]).unwrap();
        for k in i + 1..j {
            let frac = (records[k].timestamp - ti).num_seconds() as f64 / span;
            *field(&mut records[k]) = Some(vi + frac * (vj - vi));
        }
    }
}

/// Keep storms that reach tropical-storm strength and have more than 60 h
/// of track after first doing so. Winds must already be 1-minute.
pub fn select_storms(tracks: Vec<StormTrack>) -> Vec<StormTrack> {
    tracks.into_iter().filter(qualifies).collect()
}

fn qualifies(track: &StormTrack) -> bool {
    let Some(first) = track
        .records
        .iter()
        .find(|r| r.wmo_wind.is_some_and(|w| w >= TS_THRESHOLD_KT))
    else {
        return false;
    };
    let last = track.records.last().unwrap();
    (last.timestamp - first.timestamp).num_minutes() > MIN_HOURS_AFTER_TS * 60
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::storm_data::{Basin, Nature};
    use chrono::{TimeZone, Utc};

    pub(crate) fn record(hours: i64, lat: f64, wind: Option<f64>) -> RawStormRecord {
        RawStormRecord {
            storm_id: "S".into(),
            timestamp: Utc.with_ymd_and_hms(2016, 8, 1, 0, 0, 0).unwrap() + Duration::hours(hours),
            lat,
            lon: -40.0,
            wmo_wind: wind,
            wmo_pressure: wind.map(|w| 1010.0 - w),
            dist_to_land: 500.0,
            storm_speed: 10.0,
            storm_dir: 270.0,
            nature: Nature::TS,
            basin: Basin::NA,
            wind_avg_period: WindAvgPeriod::OneMin,
        }
    }

    fn track(step_h: i64, winds: &[f64]) -> StormTrack {
        StormTrack {
            storm_id: "S".into(),
            records: winds
                .iter()
                .enumerate()
                .map(|(i, w)| record(i as i64 * step_h, 10.0 + i as f64, Some(*w)))
                .collect(),
        }
    }

    #[test]
    fn wind_adjustment() {
        assert!((adjust_wind_averaging(93.0, WindAvgPeriod::TenMin).unwrap() - 100.0).abs() < 1e-12);
        assert_eq!(adjust_wind_averaging(100.0, WindAvgPeriod::OneMin).unwrap(), 100.0);
        assert_eq!(adjust_wind_averaging(0.0, WindAvgPeriod::TenMin).unwrap(), 0.0);
        assert!(matches!(
            adjust_wind_averaging(-1.0, WindAvgPeriod::OneMin),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn six_hour_midpoints() {
        let t = StormTrack {
            storm_id: "S".into(),
            records: vec![record(0, 10.0, Some(50.0)), record(6, 11.0, Some(60.0))],
        };
        let out = interpolate_to_3h(t).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(out.records[1].wmo_wind, Some(55.0));
        assert_eq!(out.records[1].lat, 10.5);
        assert_eq!(out.cadence_hours(), Some(3));
    }

    #[test]
    fn three_hour_track_is_unchanged() {
        let t = track(3, &[40.0, 45.0, 50.0]);
        assert_eq!(interpolate_to_3h(t.clone()).unwrap(), t);
    }

    #[test]
    fn irregular_cadence_names_timestamps() {
        let mut t = track(6, &[40.0, 45.0, 50.0]);
        t.records[2].timestamp += Duration::hours(3);
        let err = interpolate_to_3h(t).unwrap_err();
        assert!(matches!(err, Error::Cadence(_)));
        assert!(err.to_string().contains("2016-08-01 06:00:00 UTC"), "{err}");
    }

    #[test]
    fn interior_gaps_filled_ends_left() {
        let mut t = track(3, &[40.0, 0.0, 0.0, 46.0, 50.0]);
        t.records[1].wmo_wind = None;
        t.records[2].wmo_wind = None;
        t.records[4].wmo_wind = None;
        let out = interpolate_to_3h(t).unwrap();
        assert_eq!(out.records[1].wmo_wind, Some(42.0));
        assert_eq!(out.records[2].wmo_wind, Some(44.0));
        assert_eq!(out.records[4].wmo_wind, None);
    }

    #[test]
    fn direction_interpolates_across_north() {
        let mut a = record(0, 10.0, Some(40.0));
        let mut b = record(6, 10.0, Some(40.0));
        a.storm_dir = 350.0;
        b.storm_dir = 10.0;
        assert_eq!(midpoint(&a, &b).storm_dir, 0.0);
    }

    #[test]
    fn storm_selection_rules() {
        // 33 kt peak
        let weak = track(3, &[33.0; 40]);
        // 34 kt reached then 48 h of data
        let mut short = vec![30.0; 5];
        short.extend(vec![34.0; 17]);
        // 34 kt reached then 72 h of data
        let mut long = vec![30.0; 5];
        long.extend(vec![34.0; 25]);
        let kept = select_storms(vec![weak, track(3, &short), track(3, &long)]);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].len(), 30);
        assert_eq!(select_storms(kept.clone()), kept);
    }

    #[test]
    fn exactly_sixty_hours_is_excluded() {
        let mut winds = vec![34.0];
        winds.extend(vec![40.0; 20]);
        assert!(select_storms(vec![track(3, &winds)]).is_empty());
        winds.push(40.0);
        assert_eq!(select_storms(vec![track(3, &winds)]).len(), 1);
    }
}
