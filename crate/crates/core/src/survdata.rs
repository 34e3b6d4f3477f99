//! Individual-level survival data, the piecewise-constant baseline grid and the
//! piecewise-exponential (Poisson) expansion used by the frailty fits.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spatial::{csv_error, StudyRegion};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    /// Index of the unit in the study region.
    pub unit: usize,
    pub time: f64,
    pub event: bool,
    pub covariates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalDataset {
    individuals: Vec<Individual>,
    unit_ids: Vec<String>,
    p: usize,
}

impl SurvivalDataset {
    /// Validates individuals against a region with `unit_ids` (in region order).
    pub fn new(individuals: Vec<Individual>, unit_ids: Vec<String>) -> Result<Self> {
        let p = individuals.first().map_or(0, |i| i.covariates.len());
        for (i, ind) in individuals.iter().enumerate() {
            let row = i + 2;
            if ind.unit >= unit_ids.len() {
                return Err(Error::validation(format!("unknown unit at row {row}")));
            }
            if !(ind.time > 0.0 && ind.time.is_finite()) {
                return Err(Error::validation(format!("non-positive time at row {row}")));
            }
            if ind.covariates.len() != p {
                return Err(Error::validation(format!("ragged covariates at row {row}")));
            }
            if ind.covariates.iter().any(|z| !z.is_finite()) {
                return Err(Error::validation(format!("non-finite covariate at row {row}")));
            }
        }
        Ok(SurvivalDataset {
            individuals,
            unit_ids,
            p,
        })
    }

    pub fn individuals(&self) -> &[Individual] {
        &self.individuals
    }

    pub fn unit_ids(&self) -> &[String] {
        &self.unit_ids
    }

    pub fn len(&self) -> usize {
        self.individuals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.individuals.is_empty()
    }

    pub fn n_units(&self) -> usize {
        self.unit_ids.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.p
    }

    pub fn n_events(&self) -> usize {
        self.individuals.iter().filter(|i| i.event).count()
    }

    /// Individuals per unit, N_k.
    pub fn unit_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.unit_ids.len()];
        for ind in &self.individuals {
            counts[ind.unit] += 1;
        }
        counts
    }

    pub fn times(&self) -> Vec<f64> {
        self.individuals.iter().map(|i| i.time).collect()
    }

    /// Same individuals with replaced observation times and event flags.
    pub fn with_outcomes(&self, outcomes: &[(f64, bool)]) -> Result<Self> {
        assert_eq!(outcomes.len(), self.len());
        let individuals = self
            .individuals
            .iter()
            .zip(outcomes)
            .map(|(ind, &(time, event))| Individual {
                time,
                event,
                ..ind.clone()
            })
            .collect();
        Self::new(individuals, self.unit_ids.clone())
    }

    /// Writes the `unit_id,time,event,z1..zp` CSV.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        let mut header = vec!["unit_id".to_string(), "time".into(), "event".into()];
        header.extend((1..=self.p).map(|j| format!("z{j}")));
        writer.write_record(&header).map_err(|e| csv_error(path, e))?;
        for ind in &self.individuals {
            let mut row = vec![
                self.unit_ids[ind.unit].clone(),
                format!("{:?}", ind.time),
                if ind.event { "1" } else { "0" }.to_string(),
            ];
            row.extend(ind.covariates.iter().map(|z| format!("{z:?}")));
            writer.write_record(&row).map_err(|e| csv_error(path, e))?;
        }
        writer.flush().map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Reads individuals from a `unit_id,time,event,z1..zp` CSV, resolving unit
/// ids against `region`. Row order is preserved.
pub fn ingest_individuals(path: &Path, region: &StudyRegion) -> Result<SurvivalDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let names: Vec<&str> = headers.iter().collect();
    if names.contains(&"weights") {
        return Err(Error::validation(
            "individual weights are not supported (column `weights`)",
        ));
    }
    if names.len() < 3 || names[..3] != ["unit_id", "time", "event"] {
        return Err(Error::validation(format!(
            "individuals file {} must start with header unit_id,time,event",
            path.display()
        )));
    }
    for (j, name) in names[3..].iter().enumerate() {
        if *name != format!("z{}", j + 1) {
            return Err(Error::validation(format!(
                "covariate column {} must be named z{}",
                name,
                j + 1
            )));
        }
    }
    let p = names.len() - 3;
    let mut individuals = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| csv_error(path, e))?;
        if record.len() != p + 3 {
            return Err(Error::validation(format!("ragged covariates at row {row}")));
        }
        let unit = region.index_of(&record[0]).ok_or_else(|| {
            Error::validation(format!("unknown unit_id {} at row {row}", &record[0]))
        })?;
        let time: f64 = record[1]
            .parse()
            .map_err(|_| Error::validation(format!("invalid time at row {row}")))?;
        if !(time > 0.0 && time.is_finite()) {
            return Err(Error::validation(format!("non-positive time at row {row}")));
        }
        let event = match &record[2] {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::validation(format!(
                    "event must be 0 or 1 at row {row}, got {other}"
                )))
            }
        };
        let covariates = (3..p + 3)
            .map(|j| {
                record[j]
                    .parse::<f64>()
                    .map_err(|_| Error::validation(format!("invalid covariate at row {row}")))
            })
            .collect::<Result<Vec<_>>>()?;
        individuals.push(Individual {
            unit,
            time,
            event,
            covariates,
        });
    }
    let unit_ids = region.units().iter().map(|u| u.id.clone()).collect();
    SurvivalDataset::new(individuals, unit_ids)
}

/// Cutpoints 0 = t_0 < t_1 < ... < t_n of a piecewise-constant baseline hazard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseGrid {
    cutpoints: Vec<f64>,
}

impl PiecewiseGrid {
    pub fn new(cutpoints: Vec<f64>) -> Result<Self> {
        if cutpoints.len() < 2 || cutpoints[0] != 0.0 {
            return Err(Error::validation("grid must start at 0 and have an interval"));
        }
        if cutpoints.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::validation("grid cutpoints must be strictly increasing"));
        }
        Ok(PiecewiseGrid { cutpoints })
    }

    pub fn cutpoints(&self) -> &[f64] {
        &self.cutpoints
    }

    pub fn n_intervals(&self) -> usize {
        self.cutpoints.len() - 1
    }

    /// Interval I (0-based) with t_I < time <= t_{I+1}.
    pub fn interval_of(&self, time: f64) -> usize {
        let idx = self.cutpoints[1..].partition_point(|&c| c < time);
        idx.min(self.n_intervals() - 1)
    }
}

/// Type-7 empirical quantile of sorted data.
pub(crate) fn quantile_sorted(sorted: &[f64], level: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * level;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// One interval per 20 unique observation times (at least one), cut at the
/// empirical quantiles of the unique times.
pub fn build_grid(dataset: &SurvivalDataset) -> Result<PiecewiseGrid> {
    if dataset.is_empty() {
        return Err(Error::validation("cannot build a time grid for an empty dataset"));
    }
    let mut unique = dataset.times();
    unique.sort_by(f64::total_cmp);
    unique.dedup();
    let n = (unique.len() / 20).max(1);
    let mut cutpoints = Vec::with_capacity(n + 1);
    cutpoints.push(0.0);
    for j in 1..n {
        cutpoints.push(quantile_sorted(&unique, j as f64 / n as f64));
    }
    cutpoints.push(*unique.last().unwrap());
    PiecewiseGrid::new(cutpoints)
}

/// Time at risk of one individual within one baseline interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoissonRecord {
    pub individual: usize,
    pub interval: usize,
    pub unit: usize,
    pub exposure: f64,
    pub event: bool,
}

pub fn expand_piecewise(dataset: &SurvivalDataset, grid: &PiecewiseGrid) -> Result<Vec<PoissonRecord>> {
    let cuts = grid.cutpoints();
    let end = *cuts.last().unwrap();
    let mut out = Vec::new();
    for (i, ind) in dataset.individuals().iter().enumerate() {
        if ind.time > end {
            return Err(Error::validation(format!(
                "time {} of row {} lies beyond the grid end {end}",
                ind.time,
                i + 2
            )));
        }
        let last = grid.interval_of(ind.time);
        for interval in 0..=last {
            let exposure = ind.time.min(cuts[interval + 1]) - cuts[interval];
            if exposure > 0.0 {
                out.push(PoissonRecord {
                    individual: i,
                    interval,
                    unit: ind.unit,
                    exposure,
                    event: ind.event && interval == last,
                });
            }
        }
    }
    Ok(out)
}
