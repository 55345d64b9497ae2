use std::collections::HashMap;
use std::path::Path;

use chrono::{DateTime, Duration, Utc};

use super::{read_hcub, write_hcub, Tensor4};
use crate::error::{Error, Result};
use crate::storm_data::{format_iso_basic, parse_iso_time, CADENCE_HOURS};

pub const CUBE_CHANNELS: usize = 9;
pub const CUBE_SIDE: usize = 25;

/// Access to per-time-step reanalysis frames (`C × H × W`, C order).
pub trait FrameSource {
    fn has_frame(&self, storm_id: &str, time: &DateTime<Utc>) -> bool;
    fn frame(&self, storm_id: &str, time: &DateTime<Utc>) -> Option<&[f32]>;
    /// `(C, H, W)` of every frame.
    fn frame_dims(&self) -> (usize, usize, usize);
}

/// In-memory frame store keyed by storm and valid time.
#[derive(Clone, Debug)]
pub struct CubeStore {
    dims: (usize, usize, usize),
    frames: HashMap<(String, i64), Vec<f32>>,
}

impl Default for CubeStore {
    fn default() -> Self {
        Self::new((CUBE_CHANNELS, CUBE_SIDE, CUBE_SIDE))
    }
}

impl CubeStore {
    pub fn new(dims: (usize, usize, usize)) -> Self {
        Self {
            dims,
            frames: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    fn frame_len(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }

    pub fn insert_frame(&mut self, storm_id: &str, time: DateTime<Utc>, frame: Vec<f32>) -> Result<()> {
        if frame.len() != self.frame_len() {
            return Err(Error::Dimension(format!(
                "frame has {} values, store expects {:?}",
                frame.len(),
                self.dims
            )));
        }
        self.frames.insert((storm_id.to_string(), time.timestamp()), frame);
        Ok(())
    }

    /// Insert a `(T, C, H, W)` block whose last frame is valid at `last_time`;
    /// earlier frames are spaced 3 h apart.
    pub fn insert_window(
        &mut self,
        storm_id: &str,
        last_time: DateTime<Utc>,
        dims: [usize; 4],
        data: &[f32],
    ) -> Result<()> {
        if (dims[1], dims[2], dims[3]) != self.dims {
            return Err(Error::Dimension(format!(
                "cube frame dims {:?} differ from store {:?}",
                &dims[1..],
                self.dims
            )));
        }
        let fl = self.frame_len();
        for k in 0..dims[0] {
            let t = last_time - Duration::hours(CADENCE_HOURS * (dims[0] - 1 - k) as i64);
            self.insert_frame(storm_id, t, data[k * fl..(k + 1) * fl].to_vec())?;
        }
        Ok(())
    }

    /// Load every `<sid>_<iso_time>.hcub` file in a directory. The timestamp
    /// in the name is the valid time of the last frame in the file.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut store = CubeStore::default();
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "hcub"))
            .collect();
        paths.sort();
        for path in paths {
            let (sid, time) = parse_cube_filename(&path)?;
            let (dims, data) = read_hcub(&path)?;
            store.insert_window(&sid, time, dims, &data)?;
        }
        Ok(store)
    }

    /// Write one file per storm holding all its frames in time order.
    /// Storm frames must be contiguous at 3-hour spacing.
    pub fn save_dir(&self, dir: &Path) -> Result<usize> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut by_storm: HashMap<&str, Vec<i64>> = HashMap::new();
        for (sid, t) in self.frames.keys() {
            by_storm.entry(sid.as_str()).or_default().push(*t);
        }
        let mut storms: Vec<_> = by_storm.into_iter().collect();
        storms.sort();
        let step = CADENCE_HOURS * 3600;
        let mut written = 0;
        for (sid, mut times) in storms {
            times.sort_unstable();
            // break into contiguous runs
            let mut start = 0;
            for i in 1..=times.len() {
                if i == times.len() || times[i] - times[i - 1] != step {
                    let run = &times[start..i];
                    let mut data = Vec::with_capacity(run.len() * self.frame_len());
                    for t in run {
                        data.extend_from_slice(&self.frames[&(sid.to_string(), *t)]);
                    }
                    let last = DateTime::from_timestamp(*run.last().unwrap(), 0).unwrap();
                    let path = dir.join(cube_filename(sid, &last));
                    write_hcub(&path, [run.len(), self.dims.0, self.dims.1, self.dims.2], &data)?;
                    written += 1;
                    start = i;
                }
            }
        }
        Ok(written)
    }

    /// History cube `(T, C, H, W)` for the given valid times.
    pub fn window(&self, storm_id: &str, times: &[DateTime<Utc>]) -> Result<Tensor4> {
        window_from(self, storm_id, times)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, DateTime<Utc>, &[f32])> {
        self.frames.iter().map(|((sid, t), f)| {
            (sid.as_str(), DateTime::from_timestamp(*t, 0).unwrap(), f.as_slice())
        })
    }
}

impl FrameSource for CubeStore {
    fn has_frame(&self, storm_id: &str, time: &DateTime<Utc>) -> bool {
        self.frames.contains_key(&(storm_id.to_string(), time.timestamp()))
    }

    fn frame(&self, storm_id: &str, time: &DateTime<Utc>) -> Option<&[f32]> {
        self.frames
            .get(&(storm_id.to_string(), time.timestamp()))
            .map(Vec::as_slice)
    }

    fn frame_dims(&self) -> (usize, usize, usize) {
        self.dims
    }
}

/// Stack frames into a `(T, C, H, W)` tensor.
pub(crate) fn window_from(
    src: &dyn FrameSource,
    storm_id: &str,
    times: &[DateTime<Utc>],
) -> Result<Tensor4> {
    let (c, h, w) = src.frame_dims();
    let mut data = Vec::with_capacity(times.len() * c * h * w);
    for t in times {
        let f = src.frame(storm_id, t).ok_or_else(|| Error::MissingCube {
            storm_id: storm_id.to_string(),
            time: t.to_rfc3339(),
        })?;
        data.extend(f.iter().map(|v| *v as f64));
    }
    Tensor4::from_vec([times.len(), c, h, w], data)
}

pub fn cube_filename(storm_id: &str, last_time: &DateTime<Utc>) -> String {
    format!("{storm_id}_{}.hcub", format_iso_basic(last_time))
}

fn parse_cube_filename(path: &Path) -> Result<(String, DateTime<Utc>)> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Format(format!("bad cube filename {}", path.display())))?;
    let (sid, iso) = stem
        .rsplit_once('_')
        .ok_or_else(|| Error::Format(format!("cube filename {stem} lacks <sid>_<iso_t0>")))?;
    Ok((sid.to_string(), parse_iso_time(iso)?))
}

/// Per-channel standardization of reanalysis frames, fitted on training
/// frames only.
#[derive(Clone, Debug, PartialEq)]
pub struct CubeScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl CubeScaler {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn fit<'a>(channels: usize, frames: impl IntoIterator<Item = &'a [f32]>) -> Result<Self> {
        let mut sum = vec![0.0; channels];
        let mut sq = vec![0.0; channels];
        let mut count = 0usize;
        let mut per_channel = 0usize;
        for f in frames {
            if f.len() % channels != 0 {
                return Err(Error::Dimension("frame length not divisible by channels".into()));
            }
            per_channel = f.len() / channels;
            for c in 0..channels {
                for v in &f[c * per_channel..(c + 1) * per_channel] {
                    let v = *v as f64;
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
            count += 1;
        }
        if count == 0 {
            return Err(Error::Empty("no frames to fit the cube scaler".into()));
        }
        let n = (count * per_channel) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let sd = (s / n - m * m).max(0.0).sqrt();
                if sd < 1e-12 {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    /// Standardize a `(T, C, H, W)` tensor in place along its channel mode.
    pub fn apply(&self, t: &Tensor4) -> Result<Tensor4> {
        let [tt, c, h, w] = t.dims();
        if c != self.mean.len() {
            return Err(Error::Dimension(format!(
                "cube has {c} channels, scaler has {}",
                self.mean.len()
            )));
        }
        let plane = h * w;
        let mut data = t.data().to_vec();
        for k in 0..tt {
            for ch in 0..c {
                let off = (k * c + ch) * plane;
                for v in &mut data[off..off + plane] {
                    *v = (*v - self.mean[ch]) / self.std[ch];
                }
            }
        }
        Tensor4::from_vec(t.dims(), data)
    }
}
