use serde::{Deserialize, Serialize};

use super::{check_split, predict_cases, HumlVariant, ModelBundle};
use crate::error::{Error, Result};
use crate::forecast::{index_by_case, ForecastRecord};
use crate::linear_ensemble::{
    consensus, default_alpha_grid, select_elasticnet, ElasticNetConfig, ElasticNetModel,
    DEFAULT_L1_GRID,
};
use crate::matrix::Matrix;
use crate::storm_data::{normalize_lon, wrap_degrees, ForecastCase, Split};
use crate::tensor_ops::FrameSource;

const CV_FOLDS: usize = 5;

/// Per-target ElasticNet stacking of base-variant forecasts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HumlEnsemble {
    /// Member model names in column order.
    pub members: Vec<String>,
    pub configs: [ElasticNetConfig; 3],
    pub intensity: ElasticNetModel,
    pub dlat: ElasticNetModel,
    pub dlon: ElasticNetModel,
}

/// Member predictions as three `(cases × members)` matrices: wind, Δlat, Δlon.
fn member_columns(members: &[&[ForecastRecord]], cases: &[ForecastCase]) -> Result<[Matrix; 3]> {
    let indices = members
        .iter()
        .map(|m| index_by_case(m))
        .collect::<Result<Vec<_>>>()?;
    let k = members.len();
    let mut cols = [
        Matrix::zeros(cases.len(), k),
        Matrix::zeros(cases.len(), k),
        Matrix::zeros(cases.len(), k),
    ];
    let mut missing = Vec::new();
    for (i, c) in cases.iter().enumerate() {
        let id = c.id();
        for (j, ix) in indices.iter().enumerate() {
            let rec = ix.get(&id);
            let wind = rec.and_then(|r| r.wind);
            let disp = rec.and_then(|r| {
                r.displacement
                    .or_else(|| r.position.map(|(lat, lon)| (lat - c.lat0, wrap_degrees(lon - c.lon0))))
            });
            match (wind, disp) {
                (Some(w), Some((dlat, dlon))) => {
                    cols[0].set(i, j, w);
                    cols[1].set(i, j, dlat);
                    cols[2].set(i, j, dlon);
                }
                _ => {
                    missing.push(id.clone());
                    break;
                }
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Misaligned(missing));
    }
    Ok(cols)
}

/// Fit the stacker on member forecasts for the validation-period cases.
pub fn fit_huml_ensemble(members: &[&[ForecastRecord]], cases: &[ForecastCase]) -> Result<HumlEnsemble> {
    if members.is_empty() {
        return Err(Error::Empty("ensemble needs at least one member".into()));
    }
    if cases.is_empty() {
        return Err(Error::Empty("no cases to fit the ensemble on".into()));
    }
    let cols = member_columns(members, cases)?;
    let alphas = default_alpha_grid();
    let fit = |x: &Matrix, y: Vec<f64>| select_elasticnet(x, &y, &DEFAULT_L1_GRID, &alphas, CV_FOLDS);
    let wind = fit(&cols[0], cases.iter().map(|c| c.target_intensity).collect())?;
    let dlat = fit(&cols[1], cases.iter().map(|c| c.target_dlat).collect())?;
    let dlon = fit(&cols[2], cases.iter().map(|c| c.target_dlon).collect())?;
    Ok(HumlEnsemble {
        members: members
            .iter()
            .map(|m| m.first().map_or(String::new(), |r| r.model.clone()))
            .collect(),
        configs: [wind.config, dlat.config, dlon.config],
        intensity: wind.model,
        dlat: dlat.model,
        dlon: dlon.model,
    })
}

impl HumlEnsemble {
    pub fn apply(&self, members: &[&[ForecastRecord]], cases: &[ForecastCase]) -> Result<Vec<ForecastRecord>> {
        if members.len() != self.members.len() {
            return Err(Error::Config(format!(
                "ensemble was fitted on {} members, got {}",
                self.members.len(),
                members.len()
            )));
        }
        let cols = member_columns(members, cases)?;
        let w = self.intensity.predict(&cols[0])?;
        let dlat = self.dlat.predict(&cols[1])?;
        let dlon = self.dlon.predict(&cols[2])?;
        Ok(cases
            .iter()
            .enumerate()
            .map(|(i, c)| ForecastRecord {
                model: HumlVariant::Ensemble.label().to_string(),
                storm_id: c.storm_id.clone(),
                t0: c.t0,
                wind: Some(w[i]),
                displacement: Some((dlat[i], dlon[i])),
                position: Some((c.lat0 + dlat[i], normalize_lon(c.lon0 + dlon[i]))),
            })
            .collect())
    }
}

fn slices(v: &[Vec<ForecastRecord>]) -> Vec<&[ForecastRecord]> {
    v.iter().map(Vec::as_slice).collect()
}

/// Fit the stacker on base forecasts for validation-period cases and apply
/// it to test-period cases.
pub fn train_huml_ensemble(
    bundles: &[&ModelBundle],
    val: &[ForecastCase],
    test: &[ForecastCase],
    frames: Option<&dyn FrameSource>,
) -> Result<(HumlEnsemble, Vec<ForecastRecord>)> {
    check_split(val, Split::Validation)?;
    check_split(test, Split::Test)?;
    let mut val_f = Vec::new();
    let mut test_f = Vec::new();
    for b in bundles {
        val_f.push(predict_cases(b, val, frames, None)?);
        test_f.push(predict_cases(b, test, frames, None)?);
    }
    let ens = fit_huml_ensemble(&slices(&val_f), val)?;
    let out = ens.apply(&slices(&test_f), test)?;
    Ok((ens, out))
}

/// Simple average of the variant 4 forecasts with operational members.
pub fn huml_op_average(
    huml: &[ForecastRecord],
    operational: &[&[ForecastRecord]],
    cases: &[ForecastCase],
) -> Result<Vec<ForecastRecord>> {
    let mut members: Vec<&[ForecastRecord]> = vec![huml];
    members.extend_from_slice(operational);
    consensus(HumlVariant::OpAverage.label(), &members, cases)
}
