//! ElasticNet meta-learner and simple-average consensus.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecast::{index_by_case, ForecastRecord};
use crate::matrix::Matrix;
use crate::storm_data::{normalize_lon, wrap_degrees, ForecastCase};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElasticNetConfig {
    /// Share of the penalty on ‖β‖₁; 1 is the lasso, 0 ridge.
    pub l1_ratio: f64,
    pub alpha: f64,
    pub max_iter: usize,
    /// Convergence threshold on the largest coefficient change in a sweep.
    pub tol: f64,
}

impl Default for ElasticNetConfig {
    fn default() -> Self {
        Self {
            l1_ratio: 0.5,
            alpha: 1e-2,
            max_iter: 10_000,
            tol: 1e-10,
        }
    }
}

impl ElasticNetConfig {
    /// Configuration restricted to the tuned search ranges.
    pub fn new(l1_ratio: f64, alpha: f64) -> Result<Self> {
        if !(1e-4..=10.0).contains(&alpha) {
            return Err(Error::Config(format!("alpha={alpha} outside [1e-4, 10]")));
        }
        let c = Self {
            l1_ratio,
            alpha,
            ..Self::default()
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.l1_ratio) {
            return Err(Error::Config(format!("l1_ratio={} outside [0, 1]", self.l1_ratio)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha={} must be non-negative", self.alpha)));
        }
        if self.max_iter == 0 || !(self.tol > 0.0) {
            return Err(Error::Config("max_iter and tol must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElasticNetModel {
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub sweeps: usize,
    pub converged: bool,
    /// Objective value after each sweep.
    pub objective: Vec<f64>,
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// `(1/2N)‖y − Xβ − b‖² + α(l1‖β‖₁ + (1−l1)/2 ‖β‖²)`.
pub fn objective(x: &Matrix, y: &[f64], beta: &[f64], intercept: f64, cfg: &ElasticNetConfig) -> f64 {
    let n = x.rows() as f64;
    let mut rss = 0.0;
    for i in 0..x.rows() {
        let p: f64 = x.row(i).iter().zip(beta).map(|(a, b)| a * b).sum::<f64>() + intercept;
        rss += (y[i] - p).powi(2);
    }
    let l1: f64 = beta.iter().map(|b| b.abs()).sum();
    let l2: f64 = beta.iter().map(|b| b * b).sum();
    rss / (2.0 * n) + cfg.alpha * (cfg.l1_ratio * l1 + 0.5 * (1.0 - cfg.l1_ratio) * l2)
}

/// Cyclic coordinate descent on centered data; the intercept is recovered
/// from the means.
pub fn fit_elasticnet(x: &Matrix, y: &[f64], cfg: &ElasticNetConfig) -> Result<ElasticNetModel> {
    cfg.validate()?;
    let (n, f) = (x.rows(), x.cols());
    if n == 0 {
        return Err(Error::Empty("no rows for ElasticNet".into()));
    }
    if y.len() != n {
        return Err(Error::Dimension(format!("{n} rows but {} targets", y.len())));
    }
    if n < f {
        log::warn!("ElasticNet fitted on {n} rows for {f} features");
    }
    let nf = n as f64;
    let x_mean: Vec<f64> = (0..f).map(|j| (0..n).map(|i| x.get(i, j)).sum::<f64>() / nf).collect();
    let y_mean = y.iter().sum::<f64>() / nf;
    // column-major centered copy
    let xc: Vec<Vec<f64>> = (0..f)
        .map(|j| (0..n).map(|i| x.get(i, j) - x_mean[j]).collect())
        .collect();
    let z: Vec<f64> = xc.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>() / nf).collect();
    let mut resid: Vec<f64> = y.iter().map(|v| v - y_mean).collect();
    let mut beta = vec![0.0; f];
    let l1_pen = cfg.alpha * cfg.l1_ratio;
    let l2_pen = cfg.alpha * (1.0 - cfg.l1_ratio);
    let mut history = Vec::new();
    let mut converged = f == 0;
    let mut sweeps = 0;
    while !converged && sweeps < cfg.max_iter {
        sweeps += 1;
        let mut max_delta: f64 = 0.0;
        for j in 0..f {
            let col = &xc[j];
            let rho = col.iter().zip(&resid).map(|(a, r)| a * r).sum::<f64>() / nf + z[j] * beta[j];
            let denom = z[j] + l2_pen;
            let new = if denom > 0.0 {
                soft_threshold(rho, l1_pen) / denom
            } else {
                0.0
            };
            let delta = new - beta[j];
            if delta != 0.0 {
                for (r, a) in resid.iter_mut().zip(col) {
                    *r -= a * delta;
                }
                beta[j] = new;
            }
            max_delta = max_delta.max(delta.abs());
        }
        let intercept = y_mean - beta.iter().zip(&x_mean).map(|(b, m)| b * m).sum::<f64>();
        history.push(objective(x, y, &beta, intercept, cfg));
        if max_delta < cfg.tol {
            converged = true;
        }
    }
    if !converged {
        log::warn!("ElasticNet stopped after {sweeps} sweeps without converging");
    }
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(Error::Numerical("ElasticNet produced non-finite coefficients".into()));
    }
    let intercept = y_mean - beta.iter().zip(&x_mean).map(|(b, m)| b * m).sum::<f64>();
    Ok(ElasticNetModel {
        coefficients: beta,
        intercept,
        sweeps,
        converged,
        objective: history,
    })
}

impl ElasticNetModel {
    pub fn predict_row(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.coefficients.len() {
            return Err(Error::Dimension(format!(
                "model has {} coefficients, row has {} values",
                self.coefficients.len(),
                x.len()
            )));
        }
        Ok(self.intercept + x.iter().zip(&self.coefficients).map(|(a, b)| a * b).sum::<f64>())
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<f64>> {
        (0..x.rows()).map(|i| self.predict_row(x.row(i))).collect()
    }
}

/// Log-spaced penalties spanning the tuned range.
pub fn default_alpha_grid() -> Vec<f64> {
    (0..11).map(|k| 10f64.powf(-4.0 + 0.5 * k as f64)).collect()
}

pub const DEFAULT_L1_GRID: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

#[derive(Clone, Debug, PartialEq)]
pub struct GridSearch {
    pub config: ElasticNetConfig,
    pub cv_mse: f64,
    pub model: ElasticNetModel,
}

/// Pick `(l1_ratio, alpha)` by k-fold cross-validation over contiguous
/// folds, then refit on all rows. Ties go to the earlier grid point.
pub fn select_elasticnet(
    x: &Matrix,
    y: &[f64],
    l1_grid: &[f64],
    alpha_grid: &[f64],
    folds: usize,
) -> Result<GridSearch> {
    let n = x.rows();
    if n == 0 {
        return Err(Error::Empty("no rows for ElasticNet selection".into()));
    }
    if l1_grid.is_empty() || alpha_grid.is_empty() {
        return Err(Error::Config("empty ElasticNet grid".into()));
    }
    let k = folds.clamp(1, n);
    let bounds: Vec<(usize, usize)> = (0..k).map(|i| (i * n / k, (i + 1) * n / k)).collect();
    let mut best: Option<(ElasticNetConfig, f64)> = None;
    for &l1 in l1_grid {
        for &alpha in alpha_grid {
            let cfg = ElasticNetConfig {
                l1_ratio: l1,
                alpha,
                ..ElasticNetConfig::default()
            };
            let mse = if k < 2 {
                let m = fit_elasticnet(x, y, &cfg)?;
                let p = m.predict(x)?;
                p.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n as f64
            } else {
                let mut sse = 0.0;
                for &(lo, hi) in &bounds {
                    let train: Vec<usize> = (0..n).filter(|i| *i < lo || *i >= hi).collect();
                    let xt = x.select_rows(&train);
                    let yt: Vec<f64> = train.iter().map(|&i| y[i]).collect();
                    let m = fit_elasticnet(&xt, &yt, &cfg)?;
                    for i in lo..hi {
                        sse += (m.predict_row(x.row(i))? - y[i]).powi(2);
                    }
                }
                sse / n as f64
            };
            if best.as_ref().is_none_or(|(_, b)| mse < *b) {
                best = Some((cfg, mse));
            }
        }
    }
    let (config, cv_mse) = best.expect("non-empty grid");
    let model = fit_elasticnet(x, y, &config)?;
    Ok(GridSearch {
        config,
        cv_mse,
        model,
    })
}

/// Arithmetic mean of member forecasts for one case. Track members are
/// averaged as end positions; members that only carry a displacement are
/// converted with the case's t0 fix, which must then be supplied.
pub fn simple_average(
    model: &str,
    members: &[&ForecastRecord],
    case: Option<&ForecastCase>,
) -> Result<ForecastRecord> {
    let first = members
        .first()
        .ok_or_else(|| Error::Empty("no member forecasts to average".into()))?;
    let id = first.case_id();
    if let Some(m) = members.iter().find(|m| m.case_id() != id) {
        return Err(Error::Misaligned(vec![m.case_id()]));
    }
    let winds: Vec<f64> = members.iter().filter_map(|m| m.wind).collect();
    let wind = (!winds.is_empty()).then(|| winds.iter().sum::<f64>() / winds.len() as f64);

    let mut positions = Vec::new();
    for m in members {
        let p = match (m.position, m.displacement, case) {
            (Some(p), _, _) => Some(p),
            (None, Some(_), Some(c)) => m.position_for(c),
            (None, Some(_), None) => {
                return Err(Error::State(format!(
                    "{} forecasts a displacement; its case is needed to average positions",
                    m.model
                )))
            }
            (None, None, _) => None,
        };
        positions.extend(p);
    }
    let position = positions.first().map(|&(_, lon_ref)| {
        let k = positions.len() as f64;
        let lat = positions.iter().map(|p| p.0).sum::<f64>() / k;
        // average longitudes as offsets from the first member so the
        // dateline does not split them
        let off = positions.iter().map(|p| wrap_degrees(p.1 - lon_ref)).sum::<f64>() / k;
        (lat, normalize_lon(lon_ref + off))
    });
    let displacement = match (position, case) {
        (Some((lat, lon)), Some(c)) => Some((lat - c.lat0, wrap_degrees(lon - c.lon0))),
        _ => None,
    };
    Ok(ForecastRecord {
        model: model.to_string(),
        storm_id: first.storm_id.clone(),
        t0: first.t0,
        wind,
        displacement,
        position,
    })
}

/// Consensus forecast for every case; each member must cover all cases.
pub fn consensus(
    model: &str,
    members: &[&[ForecastRecord]],
    cases: &[ForecastCase],
) -> Result<Vec<ForecastRecord>> {
    if members.is_empty() {
        return Err(Error::Empty("consensus needs at least one member".into()));
    }
    let indices = members
        .iter()
        .map(|m| index_by_case(m))
        .collect::<Result<Vec<_>>>()?;
    let mut missing = Vec::new();
    let mut out = Vec::with_capacity(cases.len());
    for c in cases {
        let id = c.id();
        let recs: Vec<&ForecastRecord> = indices.iter().filter_map(|ix| ix.get(&id).copied()).collect();
        if recs.len() != members.len() {
            missing.push(id);
            continue;
        }
        out.push(simple_average(model, &recs, Some(c))?);
    }
    if !missing.is_empty() {
        return Err(Error::Misaligned(missing));
    }
    Ok(out)
}
