//! Verification metrics, per-model reports and comparison tables.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecast::{index_by_case, ForecastRecord};
use crate::storm_data::{wrap_degrees, ForecastCase};

/// Mean Earth radius, km.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

fn check_pair(preds: &[f64], truths: &[f64]) -> Result<()> {
    if preds.len() != truths.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} truths",
            preds.len(),
            truths.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Empty("no forecasts to score".into()));
    }
    Ok(())
}

pub fn mae(preds: &[f64], truths: &[f64]) -> Result<f64> {
    check_pair(preds, truths)?;
    let sum: f64 = preds.iter().zip(truths).map(|(p, t)| (t - p).abs()).sum();
    Ok(sum / preds.len() as f64)
}

/// Sample standard deviation of the absolute errors.
pub fn error_sd(preds: &[f64], truths: &[f64]) -> Result<f64> {
    check_pair(preds, truths)?;
    let errors: Vec<f64> = preds.iter().zip(truths).map(|(p, t)| (t - p).abs()).collect();
    sample_sd(&errors)
}

fn sample_sd(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::Empty(format!(
            "error sd needs at least 2 cases, got {}",
            values.len()
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    Ok((ss / (n - 1.0)).sqrt())
}

/// Great-circle distance in km between two `(lat, lon)` points in degrees.
pub fn haversine(p1: (f64, f64), p2: (f64, f64)) -> f64 {
    let phi1 = p1.0.to_radians();
    let phi2 = p2.0.to_radians();
    let dphi = phi2 - phi1;
    let dlambda = wrap_degrees(p2.1 - p1.1).to_radians();
    let a = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * a.clamp(0.0, 1.0).sqrt().asin()
}

/// Percentage error reduction of a forecast relative to a baseline.
pub fn skill(e_baseline: f64, e_forecast: f64) -> Result<f64> {
    if !(e_baseline > 0.0) {
        return Err(Error::Domain(format!(
            "baseline error must be positive, got {e_baseline}"
        )));
    }
    Ok(100.0 * (e_baseline - e_forecast) / e_baseline)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    Track,
    Intensity,
}

impl Task {
    pub fn label(self) -> &'static str {
        match self {
            Task::Track => "track",
            Task::Intensity => "intensity",
        }
    }

    /// Reference model for skill scores.
    pub fn baseline_model(self) -> &'static str {
        match self {
            Task::Track => "CLP5",
            Task::Intensity => "Decay-SHIPS",
        }
    }

    pub fn unit(self) -> &'static str {
        match self {
            Task::Track => "km",
            Task::Intensity => "kt",
        }
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "track" => Ok(Task::Track),
            "intensity" => Ok(Task::Intensity),
            other => Err(Error::Category {
                kind: "task",
                label: other.to_string(),
                admissible: "track, intensity".into(),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub basin: String,
    pub cases: usize,
    pub mae: f64,
    /// `None` for a single case.
    pub error_sd: Option<f64>,
    pub skill: Option<f64>,
    pub baseline: Option<String>,
}

impl EvalReport {
    /// Aggregate absolute per-case errors, scoring skill against the
    /// baseline's errors on the same cases when given.
    pub fn from_errors(
        model: &str,
        basin: &str,
        errors: &[f64],
        baseline: Option<(&str, &[f64])>,
    ) -> Result<Self> {
        if errors.is_empty() {
            return Err(Error::Empty(format!("no cases to score for {model}")));
        }
        let mae = errors.iter().sum::<f64>() / errors.len() as f64;
        let (skill, baseline) = match baseline {
            Some((name, b)) => {
                if b.len() != errors.len() {
                    return Err(Error::Dimension(format!(
                        "baseline {name} scored on {} cases, {model} on {}",
                        b.len(),
                        errors.len()
                    )));
                }
                let b_mae = b.iter().sum::<f64>() / b.len() as f64;
                (Some(skill(b_mae, mae)?), Some(name.to_string()))
            }
            None => (None, None),
        };
        Ok(Self {
            model: model.to_string(),
            basin: basin.to_string(),
            cases: errors.len(),
            mae,
            error_sd: sample_sd(errors).ok(),
            skill,
            baseline,
        })
    }
}

/// Forecasts for every case, in case order; missing ids are listed.
fn aligned<'a>(
    forecasts: &'a [ForecastRecord],
    cases: &[ForecastCase],
) -> Result<Vec<&'a ForecastRecord>> {
    let index = index_by_case(forecasts)?;
    let mut missing = Vec::new();
    let mut out = Vec::with_capacity(cases.len());
    for c in cases {
        match index.get(&c.id()) {
            Some(r) => out.push(*r),
            None => missing.push(c.id()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Misaligned(missing));
    }
    Ok(out)
}

/// Haversine distance between predicted and observed 24-hour positions.
pub fn track_errors(forecasts: &[ForecastRecord], cases: &[ForecastCase]) -> Result<Vec<f64>> {
    let recs = aligned(forecasts, cases)?;
    recs.iter()
        .zip(cases)
        .map(|(r, c)| {
            let p = r.position_for(c).ok_or_else(|| {
                Error::Format(format!("{} has no track forecast for {}", r.model, c.id()))
            })?;
            Ok(haversine(p, (c.target_lat(), c.target_lon())))
        })
        .collect()
}

/// Absolute 24-hour intensity errors, knots.
pub fn intensity_errors(forecasts: &[ForecastRecord], cases: &[ForecastCase]) -> Result<Vec<f64>> {
    let recs = aligned(forecasts, cases)?;
    recs.iter()
        .zip(cases)
        .map(|(r, c)| {
            let w = r.wind.ok_or_else(|| {
                Error::Format(format!("{} has no intensity forecast for {}", r.model, c.id()))
            })?;
            Ok((c.target_intensity - w).abs())
        })
        .collect()
}

pub fn task_errors(task: Task, forecasts: &[ForecastRecord], cases: &[ForecastCase]) -> Result<Vec<f64>> {
    match task {
        Task::Track => track_errors(forecasts, cases),
        Task::Intensity => intensity_errors(forecasts, cases),
    }
}

fn evaluate(
    task: Task,
    model: &str,
    basin: &str,
    forecasts: &[ForecastRecord],
    cases: &[ForecastCase],
    baseline: Option<(&str, &[ForecastRecord])>,
) -> Result<EvalReport> {
    let errors = task_errors(task, forecasts, cases)?;
    let base_errors = match baseline {
        Some((name, recs)) => match task_errors(task, recs, cases) {
            Ok(e) => Some((name, e)),
            Err(e) => {
                log::warn!("skill for {model} omitted: baseline {name} unusable ({e})");
                None
            }
        },
        None => None,
    };
    EvalReport::from_errors(
        model,
        basin,
        &errors,
        base_errors.as_ref().map(|(n, e)| (*n, e.as_slice())),
    )
}

pub fn evaluate_track(
    model: &str,
    basin: &str,
    forecasts: &[ForecastRecord],
    cases: &[ForecastCase],
    baseline: Option<(&str, &[ForecastRecord])>,
) -> Result<EvalReport> {
    evaluate(Task::Track, model, basin, forecasts, cases, baseline)
}

pub fn evaluate_intensity(
    model: &str,
    basin: &str,
    forecasts: &[ForecastRecord],
    cases: &[ForecastCase],
    baseline: Option<(&str, &[ForecastRecord])>,
) -> Result<EvalReport> {
    evaluate(Task::Intensity, model, basin, forecasts, cases, baseline)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TableCell {
    pub cases: usize,
    pub mae: f64,
    pub skill: Option<f64>,
    pub error_sd: Option<f64>,
    /// Best MAE, best skill, best error sd within the basin.
    pub best: [bool; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub model: String,
    pub cells: Vec<Option<TableCell>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonTable {
    pub baseline: String,
    pub basins: Vec<String>,
    pub rows: Vec<TableRow>,
}

/// Lay reports out one row per model and one column group per basin,
/// marking the best value of each category. Skills are recomputed against
/// the named baseline's MAE when it is among the reports.
pub fn build_comparison_table(reports: &[EvalReport], baseline: &str) -> Result<ComparisonTable> {
    if reports.is_empty() {
        return Err(Error::Empty("no reports to tabulate".into()));
    }
    let mut basins: Vec<String> = Vec::new();
    let mut models: Vec<String> = Vec::new();
    for r in reports {
        if !basins.contains(&r.basin) {
            basins.push(r.basin.clone());
        }
        if !models.contains(&r.model) {
            models.push(r.model.clone());
        }
    }
    let mut cells: HashMap<(&str, &str), TableCell> = HashMap::new();
    for basin in &basins {
        let in_basin: Vec<&EvalReport> = reports.iter().filter(|r| &r.basin == basin).collect();
        let counts: Vec<usize> = in_basin.iter().map(|r| r.cases).collect();
        if counts.iter().any(|c| *c != counts[0]) {
            let detail: Vec<String> =
                in_basin.iter().map(|r| format!("{}={}", r.model, r.cases)).collect();
            return Err(Error::CaseCount(format!("basin {basin}: {}", detail.join(", "))));
        }
        let base_mae = in_basin.iter().find(|r| r.model == baseline).map(|r| r.mae);
        for r in &in_basin {
            let skill = match base_mae {
                Some(b) => Some(skill(b, r.mae)?),
                None => r.skill,
            };
            let key = (r.model.as_str(), basin.as_str());
            if cells.contains_key(&key) {
                return Err(Error::Format(format!("duplicate report for {} in {basin}", r.model)));
            }
            cells.insert(
                key,
                TableCell {
                    cases: r.cases,
                    mae: r.mae,
                    skill,
                    error_sd: r.error_sd,
                    best: [false; 3],
                },
            );
        }
        let group: Vec<&TableCell> = in_basin
            .iter()
            .map(|r| &cells[&(r.model.as_str(), basin.as_str())])
            .collect();
        let best_mae = group.iter().map(|c| c.mae).fold(f64::INFINITY, f64::min);
        let best_skill = group.iter().filter_map(|c| c.skill).fold(f64::NEG_INFINITY, f64::max);
        let best_sd = group.iter().filter_map(|c| c.error_sd).fold(f64::INFINITY, f64::min);
        for r in &in_basin {
            let c = cells.get_mut(&(r.model.as_str(), basin.as_str())).unwrap();
            c.best = [
                c.mae == best_mae,
                c.skill == Some(best_skill),
                c.error_sd == Some(best_sd),
            ];
        }
    }
    let rows = models
        .iter()
        .map(|m| TableRow {
            model: m.clone(),
            cells: basins
                .iter()
                .map(|b| cells.get(&(m.as_str(), b.as_str())).cloned())
                .collect(),
        })
        .collect();
    Ok(ComparisonTable {
        baseline: baseline.to_string(),
        basins,
        rows,
    })
}

fn fmt_opt(v: Option<f64>, decimals: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.decimals$}"))
}

impl ComparisonTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model");
        for b in &self.basins {
            write!(out, ",{b}_cases,{b}_mae,{b}_skill,{b}_error_sd,{b}_best").unwrap();
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&csv_field(&row.model));
            for cell in &row.cells {
                match cell {
                    Some(c) => {
                        let best: Vec<&str> = ["mae", "skill", "error_sd"]
                            .iter()
                            .zip(c.best)
                            .filter(|(_, b)| *b)
                            .map(|(n, _)| *n)
                            .collect();
                        write!(
                            out,
                            ",{},{:.4},{},{},{}",
                            c.cases,
                            c.mae,
                            fmt_opt(c.skill, 4),
                            fmt_opt(c.error_sd, 4),
                            best.join(";")
                        )
                        .unwrap();
                    }
                    None => out.push_str(",,,,,"),
                }
            }
            out.push('\n');
        }
        out
    }

    /// Aligned plain-text rendering; best values carry a trailing `*`.
    pub fn to_text(&self) -> String {
        let mark = |s: String, best: bool| if best { format!("{s}*") } else { s };
        let mut header = vec!["model".to_string()];
        for b in &self.basins {
            header.push(format!("{b} MAE"));
            header.push(format!("{b} skill%"));
            header.push(format!("{b} sd"));
        }
        let mut lines = vec![header];
        for row in &self.rows {
            let mut line = vec![row.model.clone()];
            for cell in &row.cells {
                match cell {
                    Some(c) => {
                        line.push(mark(format!("{:.1}", c.mae), c.best[0]));
                        line.push(mark(fmt_opt(c.skill, 1), c.best[1]));
                        line.push(mark(fmt_opt(c.error_sd, 1), c.best[2]));
                    }
                    None => line.extend(["-".to_string(), "-".to_string(), "-".to_string()]),
                }
            }
            lines.push(line);
        }
        let ncol = lines[0].len();
        let widths: Vec<usize> = (0..ncol)
            .map(|j| lines.iter().map(|l| l[j].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = format!("skill relative to {}\n", self.baseline);
        for line in &lines {
            let mut s = format!("{:<w$}", line[0], w = widths[0]);
            for j in 1..ncol {
                write!(s, "  {:>w$}", line[j], w = widths[j]).unwrap();
            }
            out.push_str(s.trim_end());
            out.push('\n');
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// One reference table entry.
#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
pub struct FixtureEntry {
    pub table: u32,
    pub task: String,
    pub basin: String,
    pub model: String,
    pub cases: usize,
    pub mae: f64,
    pub skill: f64,
    pub error_sd: f64,
    pub provenance: String,
}

impl FixtureEntry {
    pub fn task(&self) -> Result<Task> {
        self.task.parse()
    }
}

pub fn parse_fixture_reader<R: Read>(reader: R) -> Result<Vec<FixtureEntry>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(reader);
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let entry: FixtureEntry = row.map_err(|e| Error::Format(format!("fixture row: {e}")))?;
        entry.task()?;
        out.push(entry);
    }
    if out.is_empty() {
        return Err(Error::Empty("fixture file has no entries".into()));
    }
    Ok(out)
}

pub fn parse_fixture(path: &Path) -> Result<Vec<FixtureEntry>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_fixture_reader(f)
}

/// Reference skills are rounded to whole percent for track and to one
/// decimal for intensity.
pub fn skill_tolerance(task: Task) -> f64 {
    match task {
        Task::Track => 0.55,
        Task::Intensity => 0.05,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkillCheck {
    pub entry: FixtureEntry,
    pub baseline_mae: f64,
    pub computed: f64,
    pub tolerance: f64,
}

impl SkillCheck {
    pub fn deviation(&self) -> f64 {
        (self.computed - self.entry.skill).abs()
    }

    pub fn passed(&self) -> bool {
        self.deviation() <= self.tolerance
    }
}

/// Recompute every entry's skill from its MAE and the baseline MAE of the
/// same task and basin.
pub fn reproduce_skills(entries: &[FixtureEntry]) -> Result<Vec<SkillCheck>> {
    let mut base: HashMap<(Task, &str), f64> = HashMap::new();
    for e in entries {
        let task = e.task()?;
        if e.model == task.baseline_model() {
            if let Some(prev) = base.insert((task, e.basin.as_str()), e.mae) {
                if prev != e.mae {
                    return Err(Error::Format(format!(
                        "conflicting {} MAE in {} ({prev} vs {})",
                        e.model, e.basin, e.mae
                    )));
                }
            }
        }
    }
    entries
        .iter()
        .map(|e| {
            let task = e.task()?;
            let b = *base.get(&(task, e.basin.as_str())).ok_or_else(|| {
                Error::Format(format!(
                    "no {} entry for {} {}",
                    task.baseline_model(),
                    task.label(),
                    e.basin
                ))
            })?;
            Ok(SkillCheck {
                entry: e.clone(),
                baseline_mae: b,
                computed: skill(b, e.mae)?,
                tolerance: skill_tolerance(task),
            })
        })
        .collect()
}

/// Reports for one reference table, with the baseline row added when the
/// table itself does not list it.
pub fn fixture_reports(entries: &[FixtureEntry], table: u32) -> Result<(Task, Vec<EvalReport>)> {
    let rows: Vec<&FixtureEntry> = entries.iter().filter(|e| e.table == table).collect();
    let first = rows
        .first()
        .ok_or_else(|| Error::Empty(format!("fixture has no table {table}")))?;
    let task = first.task()?;
    let to_report = |e: &FixtureEntry| EvalReport {
        model: e.model.clone(),
        basin: e.basin.clone(),
        cases: e.cases,
        mae: e.mae,
        error_sd: Some(e.error_sd),
        skill: Some(e.skill),
        baseline: Some(task.baseline_model().to_string()),
    };
    let mut reports: Vec<EvalReport> = rows.iter().map(|e| to_report(e)).collect();
    let mut basins: Vec<&str> = rows.iter().map(|e| e.basin.as_str()).collect();
    basins.sort_unstable();
    basins.dedup();
    for b in basins {
        let listed = rows.iter().any(|e| e.basin == b && e.model == task.baseline_model());
        if !listed {
            if let Some(e) = entries.iter().find(|e| {
                e.basin == b && e.model == task.baseline_model() && e.task().ok() == Some(task)
            }) {
                let mut r = to_report(e);
                r.cases = rows.iter().find(|x| x.basin == b).map_or(e.cases, |x| x.cases);
                reports.push(r);
            }
        }
    }
    Ok((task, reports))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mae_and_sd() {
        assert_eq!(mae(&[1.0, 3.0], &[2.0, 1.0]).unwrap(), 1.5);
        assert_eq!(mae(&[4.0], &[4.0]).unwrap(), 0.0);
        assert!(matches!(mae(&[], &[]), Err(Error::Empty(_))));
        assert!(mae(&[1.0], &[1.0, 2.0]).is_err());
        // absolute errors {1, 3}
        let sd = error_sd(&[0.0, 0.0], &[1.0, -3.0]).unwrap();
        assert!((sd - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(error_sd(&[1.0, 2.0], &[2.0, 3.0]).unwrap(), 0.0);
        assert!(error_sd(&[1.0], &[2.0]).is_err());
    }

    #[test]
    fn haversine_reference_distances() {
        assert_eq!(haversine((12.0, -70.0), (12.0, -70.0)), 0.0);
        assert!((haversine((0.0, 0.0), (0.0, 1.0)) - 111.19492664455873).abs() < 1e-9);
        assert!((haversine((0.0, 0.0), (90.0, 0.0)) - 10007.543398010286).abs() < 1e-6);
        // across the dateline
        let a = haversine((0.0, 179.5), (0.0, -179.5));
        assert!((a - 111.19492664455873).abs() < 1e-9);
    }

    #[test]
    fn skill_values() {
        assert!((skill(121.0, 81.0).unwrap() - 33.057851239669).abs() < 1e-9);
        assert!((skill(11.7, 15.7).unwrap() + 34.188034188034).abs() < 1e-9);
        assert_eq!(skill(5.0, 5.0).unwrap(), 0.0);
        assert!(skill(0.0, 1.0).is_err());
    }

    fn report(model: &str, basin: &str, cases: usize, mae: f64) -> EvalReport {
        EvalReport {
            model: model.into(),
            basin: basin.into(),
            cases,
            mae,
            error_sd: Some(mae / 2.0),
            skill: None,
            baseline: None,
        }
    }

    #[test]
    fn table_marks_best_and_checks_counts() {
        let reports = vec![
            report("A", "EP", 10, 80.0),
            report("CLP5", "EP", 10, 120.0),
            report("B", "EP", 10, 70.0),
        ];
        let t = build_comparison_table(&reports, "CLP5").unwrap();
        let b = t.rows.iter().find(|r| r.model == "B").unwrap();
        assert_eq!(b.cells[0].as_ref().unwrap().best, [true, true, true]);
        let mut shuffled = reports.clone();
        shuffled.reverse();
        let t2 = build_comparison_table(&shuffled, "CLP5").unwrap();
        let b2 = t2.rows.iter().find(|r| r.model == "B").unwrap();
        assert_eq!(b2.cells, b.cells);
        assert!(t.to_text().contains("70.0*"));
        assert!(t.to_csv().starts_with("model,EP_cases,EP_mae"));

        let single = build_comparison_table(&reports[..1], "CLP5").unwrap();
        assert_eq!(single.rows.len(), 1);
        assert_eq!(single.rows[0].cells[0].as_ref().unwrap().best[0], true);

        let bad = vec![report("A", "EP", 10, 1.0), report("B", "EP", 11, 1.0)];
        assert!(matches!(build_comparison_table(&bad, "CLP5"), Err(Error::CaseCount(_))));
    }
}
