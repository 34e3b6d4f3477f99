//! Output documents: detected clusters as a GeoJSON FeatureCollection of unit
//! centroids, and the JSON result payloads of the scan and baseline runs.

use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};

use crate::baselines::{BaselineScanResult, HazardRatio};
use crate::error::{Error, Result};
use crate::pipeline::TwoStageResult;
use crate::spatial::{StudyRegion, WindowSet};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportedCluster {
    /// `mlc` or `secondary-<rank>`.
    pub role: String,
    pub window: usize,
    pub center_id: String,
    pub unit_ids: Vec<String>,
    pub n_individuals: usize,
    pub statistic: f64,
    pub p_value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hazard_ratio: Option<HazardRatio>,
    #[serde(skip)]
    members: Vec<usize>,
}

impl ReportedCluster {
    pub fn new(region: &StudyRegion, windows: &WindowSet, role: String, window: usize, statistic: f64, p_value: f64) -> Self {
        let w = &windows.windows()[window];
        ReportedCluster {
            role,
            window,
            center_id: region.unit_id(w.center).to_string(),
            unit_ids: w.members.iter().map(|&u| region.unit_id(u).to_string()).collect(),
            n_individuals: w.n_individuals,
            statistic,
            p_value,
            hazard_ratio: None,
            members: w.members.clone(),
        }
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }
}

fn role_label(rank: usize) -> String {
    if rank == 0 {
        "mlc".to_string()
    } else {
        format!("secondary-{rank}")
    }
}

/// The MLC followed by the secondaries, with their Monte Carlo p-values.
pub fn two_stage_clusters(region: &StudyRegion, windows: &WindowSet, result: &TwoStageResult) -> Vec<ReportedCluster> {
    let scan = &result.scan;
    std::iter::once((&scan.mlc, result.significance.p_mlc))
        .chain(scan.secondaries.iter().zip(result.significance.p_secondaries.iter().copied()))
        .enumerate()
        .map(|(rank, (s, p))| ReportedCluster::new(region, windows, role_label(rank), s.window, s.llr, p))
        .collect()
}

pub fn baseline_clusters(region: &StudyRegion, windows: &WindowSet, result: &BaselineScanResult) -> Vec<ReportedCluster> {
    std::iter::once((&result.mlc, result.p_value))
        .chain(result.secondaries.iter().zip(result.p_secondaries.iter().copied()))
        .enumerate()
        .map(|(rank, (s, p))| ReportedCluster::new(region, windows, role_label(rank), s.window, s.statistic, p))
        .collect()
}

/// One Point feature per unit. Units inside a reported cluster carry its role,
/// rank and p-value; the others carry a null role.
pub fn clusters_geojson(region: &StudyRegion, clusters: &[ReportedCluster]) -> Value {
    let mut role: Vec<Option<(usize, &ReportedCluster)>> = vec![None; region.len()];
    for (rank, c) in clusters.iter().enumerate() {
        for &u in c.members() {
            role[u].get_or_insert((rank, c));
        }
    }
    let features: Vec<Value> = region
        .units()
        .iter()
        .enumerate()
        .map(|(k, unit)| {
            let properties = match role[k] {
                Some((rank, c)) => json!({
                    "unit_id": unit.id,
                    "cluster": c.role,
                    "rank": rank,
                    "is_center": c.center_id == unit.id,
                    "p_value": c.p_value,
                    "statistic": c.statistic,
                }),
                None => json!({ "unit_id": unit.id, "cluster": Value::Null }),
            };
            json!({
                "type": "Feature",
                "geometry": { "type": "Point", "coordinates": [unit.x, unit.y] },
                "properties": properties,
            })
        })
        .collect();
    json!({ "type": "FeatureCollection", "features": features })
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Numerical(format!("serializing {}: {e}", path.display())))?;
    std::fs::write(path, text + "\n").map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}
