//! Synthetic storms, reanalysis cubes and operational forecasts with a
//! planted, known predictive signal.
//!
//! Tracks move with an AR(1) velocity around a basin-specific drift. Each
//! storm carries a latent AR(1) state `a_t`; its squashed value
//! `e_t = 1.5 tanh(a_t)` sets the amplitude `2 + e_t` of a Gaussian vortex in
//! the geopotential and wind channels of every cube frame. Intensity follows
//!
//! `w(t+24h) = 0.7 w(t) + 21 + [8 tanh((d(t) − 500) / 300)] + [10 e(t)] + N(0, σ²)`
//!
//! where `d` is the distance to land and the bracketed terms are switched
//! on by the signal placement. The Bayes predictor therefore has intensity
//! MAE `σ √(2/π)`.
//!
//! Operational members are noisy, biased views of the truth. Persistence
//! forecasts are also written under the CLP5 and Decay-SHIPS names so that
//! skill scores have a reference.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{Duration, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{haversine, Task};
use crate::forecast::{write_operational, ForecastRecord};
use crate::storm_data::{
    normalize_lon, write_track_csv, Basin, Nature, RawStormRecord, StormTrack, WindAvgPeriod,
    CADENCE_HOURS, LEAD_STEPS, WIND_10MIN_FACTOR,
};
use crate::tensor_ops::{CubeStore, CUBE_CHANNELS, CUBE_SIDE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SignalPlacement {
    Statistical,
    Vision,
    Both,
}

impl SignalPlacement {
    pub fn label(self) -> &'static str {
        match self {
            SignalPlacement::Statistical => "statistical",
            SignalPlacement::Vision => "vision",
            SignalPlacement::Both => "both",
        }
    }

    fn statistical(self) -> bool {
        matches!(self, SignalPlacement::Statistical | SignalPlacement::Both)
    }

    fn vision(self) -> bool {
        matches!(self, SignalPlacement::Vision | SignalPlacement::Both)
    }
}

impl fmt::Display for SignalPlacement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for SignalPlacement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "statistical" => Ok(SignalPlacement::Statistical),
            "vision" => Ok(SignalPlacement::Vision),
            "both" => Ok(SignalPlacement::Both),
            other => Err(Error::Category {
                kind: "signal placement",
                label: other.to_string(),
                admissible: "statistical, vision, both".into(),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub storms: usize,
    /// 3-hourly fixes per storm.
    pub steps: usize,
    pub signal: SignalPlacement,
    /// Intensity innovation sd, knots.
    pub noise_sd: f64,
    pub seed: u64,
    /// Operational members emitted alongside the tracks.
    pub members: usize,
    /// Member wind error sd (kt) and position error sd (degrees).
    pub member_wind_sd: f64,
    pub member_position_sd: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            storms: 200,
            steps: 40,
            signal: SignalPlacement::Both,
            noise_sd: 2.0,
            seed: 0,
            members: 2,
            member_wind_sd: 7.0,
            member_position_sd: 0.5,
        }
    }
}

/// Fewest fixes a storm may have: two 24-hour windows plus one spare.
pub const MIN_STEPS: usize = 2 * LEAD_STEPS + 6;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.storms == 0 {
            return Err(Error::Config("synthetic spec needs at least one storm".into()));
        }
        if self.steps < MIN_STEPS {
            return Err(Error::Config(format!(
                "storms need at least {MIN_STEPS} steps to pass selection, got {}",
                self.steps
            )));
        }
        for (name, v) in [
            ("noise_sd", self.noise_sd),
            ("member_wind_sd", self.member_wind_sd),
            ("member_position_sd", self.member_position_sd),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name}={v} must be non-negative")));
            }
        }
        Ok(())
    }

    /// MAE of the predictor that knows the planted rule.
    pub fn noise_floor(&self) -> f64 {
        self.noise_sd * (2.0 / PI).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: SyntheticSpec,
    pub intensity_rule: String,
    /// Intensity MAE of the Bayes predictor, knots.
    pub noise_floor_mae: f64,
    pub storms: usize,
    pub records: usize,
    pub member_models: Vec<String>,
    /// Persistence stand-ins written under the skill baseline names.
    pub baseline_models: Vec<String>,
    pub first_year: i32,
    pub last_year: i32,
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub tracks: Vec<StormTrack>,
    pub cubes: CubeStore,
    pub operational: Vec<ForecastRecord>,
    pub manifest: Manifest,
}

const FIRST_YEAR: i32 = 1980;
const YEARS: usize = 40;
const MIN_WIND: f64 = 20.0;
const KM_PER_NMI: f64 = 1.852;
/// Geopotential of the three levels (m), outermost first.
const Z_BASE: [f64; 3] = [11_000.0, 5_800.0, 3_000.0];
const LEVEL_WEIGHT: [f64; 3] = [0.6, 0.8, 1.0];

struct StormDraw {
    lat: Vec<f64>,
    lon: Vec<f64>,
    vel: Vec<(f64, f64)>,
    wind: Vec<f64>,
    dist: Vec<f64>,
    e: Vec<f64>,
    width: f64,
}

fn drift(basin: Basin) -> (f64, f64) {
    match basin {
        Basin::EP => (0.08, -0.25),
        Basin::WP => (0.15, -0.2),
        _ => (0.15, -0.18),
    }
}

fn draw_storm(rng: &mut ChaCha8Rng, spec: &SyntheticSpec, basin: Basin) -> StormDraw {
    let n = spec.steps;
    let std = Normal::new(0.0, 1.0).unwrap();
    loop {
        let (dlat, dlon) = drift(basin);
        let mut lat = vec![rng.random_range(10.0..22.0)];
        let lon0: f64 = match basin {
            Basin::EP => rng.random_range(-125.0..-100.0),
            Basin::WP => rng.random_range(130.0..160.0),
            _ => rng.random_range(-70.0..-40.0),
        };
        let mut lon = vec![lon0];
        let mut vel = vec![(dlat + 0.1 * std.sample(rng), dlon + 0.1 * std.sample(rng))];
        let mut a: f64 = std.sample(rng);
        let mut e = vec![1.5 * a.tanh()];
        let mut dist = vec![rng.random_range(200.0..1500.0)];
        for t in 1..n {
            let (pv, pu) = vel[t - 1];
            let v = (
                dlat + 0.8 * (pv - dlat) + 0.06 * std.sample(rng),
                dlon + 0.8 * (pu - dlon) + 0.06 * std.sample(rng),
            );
            lat.push(lat[t - 1] + v.0);
            lon.push(normalize_lon(lon[t - 1] + v.1));
            vel.push(v);
            a = 0.9 * a + (1.0f64 - 0.81).sqrt() * std.sample(rng);
            e.push(1.5 * a.tanh());
            let d: f64 = dist[t - 1] + 40.0 * std.sample(rng);
            dist.push(d.clamp(0.0, 2000.0));
        }
        let mut wind = vec![rng.random_range(40.0..60.0)];
        for t in 1..n {
            let w = if t < LEAD_STEPS {
                wind[t - 1] + 2.0 * std.sample(rng)
            } else {
                let s = t - LEAD_STEPS;
                let mut w = 0.7 * wind[s] + 21.0;
                if spec.signal.statistical() {
                    w += 8.0 * ((dist[s] - 500.0) / 300.0).tanh();
                }
                if spec.signal.vision() {
                    w += 10.0 * e[s];
                }
                w + spec.noise_sd * std.sample(rng)
            };
            wind.push(w);
        }
        if wind.iter().any(|w| *w < MIN_WIND) || lat.iter().any(|l| l.abs() > 50.0) {
            continue;
        }
        return StormDraw {
            lat,
            lon,
            vel,
            wind,
            dist,
            e,
            width: rng.random_range(2.5..4.0),
        };
    }
}

/// Bearing of a (Δlat, Δlon) step in degrees clockwise from north.
fn bearing(dlat: f64, dlon: f64, lat: f64) -> f64 {
    let east = dlon * lat.to_radians().cos();
    let b = east.atan2(dlat).to_degrees().rem_euclid(360.0);
    if b >= 360.0 {
        0.0
    } else {
        b
    }
}

fn frame(rng: &mut ChaCha8Rng, amp: f64, width: f64, steer: (f64, f64)) -> Vec<f32> {
    let side = CUBE_SIDE;
    let plane = side * side;
    let c = (side / 2) as f64;
    let mut f = vec![0f32; CUBE_CHANNELS * plane];
    let zn = Normal::new(0.0, 3.0).unwrap();
    let un = Normal::new(0.0, 1.0).unwrap();
    for y in 0..side {
        for x in 0..side {
            let (dx, dy) = (x as f64 - c, y as f64 - c);
            let g = (-(dx * dx + dy * dy) / (2.0 * width * width)).exp();
            let p = y * side + x;
            for l in 0..3 {
                let k = LEVEL_WEIGHT[l] * amp * g;
                f[l * plane + p] = (Z_BASE[l] - 30.0 * k + zn.sample(rng)) as f32;
                f[(3 + l) * plane + p] = (-10.0 * k * dy / width + steer.1 + un.sample(rng)) as f32;
                f[(6 + l) * plane + p] = (10.0 * k * dx / width + steer.0 + un.sample(rng)) as f32;
            }
        }
    }
    f
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut tracks = Vec::with_capacity(spec.storms);
    let mut cubes = CubeStore::default();
    let mut operational = Vec::new();
    let member_names: Vec<String> = (0..spec.members)
        .map(|m| format!("OP-{}", (b'A' + (m % 26) as u8) as char))
        .collect();
    let wind_noise = Normal::new(0.0, spec.member_wind_sd.max(f64::MIN_POSITIVE)).unwrap();
    let pos_noise = Normal::new(0.0, spec.member_position_sd.max(f64::MIN_POSITIVE)).unwrap();
    let biases: Vec<f64> = (0..spec.members).map(|m| if m % 2 == 0 { 1.5 } else { -1.0 }).collect();

    for i in 0..spec.storms {
        let year = FIRST_YEAR + (i % YEARS) as i32;
        let basin = match i % 5 {
            3 => Basin::EP,
            4 => Basin::WP,
            _ => Basin::NA,
        };
        let period = if basin == Basin::WP {
            WindAvgPeriod::TenMin
        } else {
            WindAvgPeriod::OneMin
        };
        let start = Utc
            .with_ymd_and_hms(
                year,
                rng.random_range(6..=10),
                rng.random_range(1..=28),
                3 * rng.random_range(0..8),
                0,
                0,
            )
            .single()
            .expect("valid start time");
        let sid = format!("{}{year}{i:03}", basin.label());
        let s = draw_storm(&mut rng, spec, basin);
        let mut records = Vec::with_capacity(spec.steps);
        for t in 0..spec.steps {
            let time = start + Duration::hours(CADENCE_HOURS * t as i64);
            let (vlat, vlon) = s.vel[t];
            let prev = (s.lat[t] - vlat, s.lon[t] - vlon);
            let km = haversine(prev, (s.lat[t], s.lon[t]));
            let wind = s.wind[t];
            let pressure = 1012.0 - 0.75 * wind + rng.random_range(-1.5..1.5);
            records.push(RawStormRecord {
                storm_id: sid.clone(),
                timestamp: time,
                lat: s.lat[t],
                lon: s.lon[t],
                wmo_wind: Some(match period {
                    WindAvgPeriod::TenMin => wind * WIND_10MIN_FACTOR,
                    WindAvgPeriod::OneMin => wind,
                }),
                wmo_pressure: Some(pressure),
                dist_to_land: s.dist[t],
                storm_speed: km / CADENCE_HOURS as f64 / KM_PER_NMI,
                storm_dir: bearing(vlat, vlon, s.lat[t]),
                nature: Nature::TS,
                basin,
                wind_avg_period: period,
            });
            let steer = (20.0 * vlat, 20.0 * vlon);
            cubes.insert_frame(&sid, time, frame(&mut rng, 2.0 + s.e[t], s.width, steer))?;
        }
        for t in 0..spec.steps.saturating_sub(LEAD_STEPS) {
            let v = t + LEAD_STEPS;
            for (m, name) in member_names.iter().enumerate() {
                operational.push(ForecastRecord {
                    model: name.clone(),
                    storm_id: sid.clone(),
                    t0: records[t].timestamp,
                    wind: Some(s.wind[v] + biases[m] + wind_noise.sample(&mut rng)),
                    displacement: None,
                    position: Some((
                        s.lat[v] + pos_noise.sample(&mut rng),
                        normalize_lon(s.lon[v] + pos_noise.sample(&mut rng)),
                    )),
                });
            }
            let (vlat, vlon) = s.vel[t];
            let steps = LEAD_STEPS as f64;
            operational.push(ForecastRecord {
                model: Task::Track.baseline_model().to_string(),
                storm_id: sid.clone(),
                t0: records[t].timestamp,
                wind: Some(s.wind[t]),
                displacement: None,
                position: Some((s.lat[t] + steps * vlat, normalize_lon(s.lon[t] + steps * vlon))),
            });
            operational.push(ForecastRecord {
                model: Task::Intensity.baseline_model().to_string(),
                storm_id: sid.clone(),
                t0: records[t].timestamp,
                wind: Some(s.wind[t]),
                displacement: None,
                position: Some((s.lat[t], s.lon[t])),
            });
        }
        tracks.push(StormTrack {
            storm_id: sid,
            records,
        });
    }

    let mut rule = String::from("w(t+24h) = 0.7 w(t) + 21");
    if spec.signal.statistical() {
        rule.push_str(" + 8 tanh((dist_to_land(t) - 500) / 300)");
    }
    if spec.signal.vision() {
        rule.push_str(" + 10 e(t), vortex amplitude 2 + e(t)");
    }
    rule.push_str(&format!(" + N(0, {}^2)", spec.noise_sd));
    let manifest = Manifest {
        spec: spec.clone(),
        intensity_rule: rule,
        noise_floor_mae: spec.noise_floor(),
        storms: tracks.len(),
        records: tracks.iter().map(StormTrack::len).sum(),
        member_models: member_names,
        baseline_models: [Task::Track, Task::Intensity]
            .iter()
            .map(|t| t.baseline_model().to_string())
            .collect(),
        first_year: FIRST_YEAR,
        last_year: FIRST_YEAR + (spec.storms.min(YEARS) as i32) - 1,
    };
    Ok(SyntheticData {
        tracks,
        cubes,
        operational,
        manifest,
    })
}

/// Files written by [`write_synthetic`].
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticPaths {
    pub tracks: PathBuf,
    pub cubes: PathBuf,
    pub operational: PathBuf,
    pub manifest: PathBuf,
}

impl SyntheticPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            tracks: dir.join("tracks.csv"),
            cubes: dir.join("cubes"),
            operational: dir.join("operational.csv"),
            manifest: dir.join("manifest.json"),
        }
    }
}

/// Write the data set into `dir`. A `comment` line, when given, is placed
/// above the header of both CSV files.
pub fn write_synthetic(data: &SyntheticData, dir: &Path, comment: Option<&str>) -> Result<SyntheticPaths> {
    let paths = SyntheticPaths::in_dir(dir);
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let create = |p: &Path| -> Result<std::io::BufWriter<std::fs::File>> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(p).map_err(|e| Error::io(p, e))?);
        if let Some(c) = comment {
            writeln!(w, "# {c}").map_err(|e| Error::io(p, e))?;
        }
        Ok(w)
    };
    write_track_csv(create(&paths.tracks)?, &data.tracks)?;
    data.cubes.save_dir(&paths.cubes)?;
    write_operational(create(&paths.operational)?, &data.operational)?;
    let json = serde_json::to_string_pretty(&data.manifest)
        .map_err(|e| Error::Format(format!("manifest: {e}")))?;
    std::fs::write(&paths.manifest, json + "\n").map_err(|e| Error::io(&paths.manifest, e))?;
    Ok(paths)
}
