//! Synthetic data generators and the experiment runner for the simulation
//! studies: frailty-contaminated type I error of the baselines, power and
//! overlap metrics of the two-stage method, and censoring sensitivity.

use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{Cholesky, DVector};
use rand::Rng;
use rand_distr::{Distribution, Open01, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize};

use crate::baselines::{exponential_scan, logrank_scan, BaselineOptions};
use crate::error::{Error, Result};
use crate::frailty::SpatialModel;
use crate::pipeline::{run_two_stage_with, TwoStageOptions};
use crate::rng::{derive_seed, label_salt, stream_rng};
use crate::spatial::{build_neighbor_matrix, enumerate_windows, PrecisionModel, StudyRegion, WindowSet};
use crate::survdata::{Individual, SurvivalDataset};

/// Draws `φ ~ N(α·1_w, σ²[ρR + (1-ρ)I]⁻¹)`.
pub fn generate_frailty_field<R: Rng + ?Sized>(
    region: &StudyRegion,
    cluster: &[usize],
    alpha: f64,
    rho: f64,
    sigma2: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::validation(format!("rho must lie in [0, 1), got {rho}")));
    }
    if !(sigma2 >= 0.0 && sigma2.is_finite()) {
        return Err(Error::validation(format!("sigma2 must be nonnegative, got {sigma2}")));
    }
    let r = build_neighbor_matrix(region);
    let a = PrecisionModel::leroux(&r, rho, 1.0)?.a().clone();
    let l = Cholesky::new(a)
        .ok_or_else(|| Error::Numerical("Leroux matrix is not positive definite".into()))?
        .l();
    let k = region.len();
    let z = DVector::from_iterator(k, (0..k).map(|_| StandardNormal.sample(rng)));
    let x = l.transpose().solve_upper_triangular(&z).expect("positive Cholesky diagonal");
    let mut phi: Vec<f64> = x.iter().map(|v| sigma2.sqrt() * v).collect();
    for &u in cluster {
        phi[u] += alpha;
    }
    Ok(phi)
}

/// Exponential survival times with baseline hazard 1/2 and frailty `φ_k`:
/// `T = -2 ln(1 - u) exp(-φ_k)`. Every time is an observed event.
pub fn generate_survival_times<R: Rng + ?Sized>(
    field: &[f64],
    assignments: &[usize],
    unit_ids: &[String],
    rng: &mut R,
) -> Result<SurvivalDataset> {
    let individuals = assignments
        .iter()
        .map(|&unit| {
            let u: f64 = Open01.sample(rng);
            Individual {
                unit,
                time: survival_time(u, field[unit]),
                event: true,
                covariates: Vec::new(),
            }
        })
        .collect();
    SurvivalDataset::new(individuals, unit_ids.to_vec())
}

pub fn survival_time(u: f64, phi: f64) -> f64 {
    -2.0 * (-u).ln_1p() * (-phi).exp()
}

/// Censors every individual observed after the common end-of-study time
/// chosen so that `round(target·N)` individuals are censored.
pub fn apply_administrative_censoring(dataset: &SurvivalDataset, target: f64) -> Result<SurvivalDataset> {
    if !(0.0..1.0).contains(&target) {
        return Err(Error::validation(format!("censoring target must lie in [0, 1), got {target}")));
    }
    let n = dataset.len();
    let n_censored = (target * n as f64).round() as usize;
    if n_censored == 0 {
        return Ok(dataset.clone());
    }
    let mut times = dataset.times();
    times.sort_by(f64::total_cmp);
    let end = times[n - n_censored - 1];
    let outcomes: Vec<(f64, bool)> = dataset
        .individuals()
        .iter()
        .map(|i| if i.time > end { (end, false) } else { (i.time, i.event) })
        .collect();
    dataset.with_outcomes(&outcomes)
}

/// Splits `total` individuals over `n` units as evenly as possible; the first
/// `total mod n` units receive one extra.
pub fn even_allocation(total: usize, n: usize) -> Vec<usize> {
    let (base, extra) = (total / n, total % n);
    (0..n).map(|i| base + (i < extra) as usize).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionChoice {
    /// 13×13 lattice, 1690 individuals, 14-unit cluster holding 135 of them.
    Map169,
    /// 10×10 lattice minus six border cells, 940 individuals, 8-unit
    /// cluster holding 73 of them.
    Map94,
    Custom {
        units: PathBuf,
        adjacency: PathBuf,
        /// Unit ids of the planted cluster.
        cluster: Vec<String>,
        /// Individuals per unit in region order; 10 each when absent.
        #[serde(default)]
        counts: Option<Vec<usize>>,
    },
}

/// A study region with its planted cluster and individual allocation.
#[derive(Debug, Clone)]
pub struct SimulationRegion {
    pub region: StudyRegion,
    pub cluster: Vec<usize>,
    pub counts: Vec<usize>,
}

impl SimulationRegion {
    pub fn build(choice: &RegionChoice) -> Result<Self> {
        match choice {
            RegionChoice::Map169 => {
                let region = StudyRegion::lattice(13, 13)?;
                // 13-unit disc around (4, 4) plus one adjacent cell
                let cells = disc_cells(4, 4, 4)
                    .into_iter()
                    .chain([(5, 6)])
                    .collect::<Vec<_>>();
                Self::planted(region, &cells, 1690, 135)
            }
            RegionChoice::Map94 => {
                let removed = [(0, 0), (0, 1), (0, 9), (9, 0), (9, 8), (9, 9)];
                let region = StudyRegion::lattice_without(10, 10, &removed)?;
                let cells = disc_cells(4, 4, 1)
                    .into_iter()
                    .chain([(3, 3), (3, 5), (5, 3)])
                    .collect::<Vec<_>>();
                Self::planted(region, &cells, 940, 73)
            }
            RegionChoice::Custom {
                units,
                adjacency,
                cluster,
                counts,
            } => {
                let region = StudyRegion::read(units, adjacency)?;
                let cluster = cluster
                    .iter()
                    .map(|id| {
                        region
                            .index_of(id)
                            .ok_or_else(|| Error::validation(format!("cluster unit {id} is not in the region")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let counts = counts.clone().unwrap_or_else(|| vec![10; region.len()]);
                if counts.len() != region.len() || counts.iter().any(|&c| c == 0) {
                    return Err(Error::validation("counts need one positive entry per unit"));
                }
                Ok(SimulationRegion { region, cluster, counts })
            }
        }
    }

    fn planted(region: StudyRegion, cells: &[(usize, usize)], total: usize, in_cluster: usize) -> Result<Self> {
        let mut cluster: Vec<usize> = cells
            .iter()
            .map(|&(r, c)| region.index_of(&format!("r{r:02}c{c:02}")).expect("cell is on the lattice"))
            .collect();
        cluster.sort_unstable();
        let inside = even_allocation(in_cluster, cluster.len());
        let outside = even_allocation(total - in_cluster, region.len() - cluster.len());
        let (mut i, mut o) = (0, 0);
        let counts = (0..region.len())
            .map(|u| {
                if cluster.binary_search(&u).is_ok() {
                    i += 1;
                    inside[i - 1]
                } else {
                    o += 1;
                    outside[o - 1]
                }
            })
            .collect();
        Ok(SimulationRegion { region, cluster, counts })
    }

    pub fn unit_ids(&self) -> Vec<String> {
        self.region.units().iter().map(|u| u.id.clone()).collect()
    }

    /// Unit index of every individual, units in order.
    pub fn assignments(&self) -> Vec<usize> {
        self.counts
            .iter()
            .enumerate()
            .flat_map(|(u, &c)| std::iter::repeat_n(u, c))
            .collect()
    }

    pub fn n_individuals(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Individual-level overlap of a detected cluster with the planted one.
    pub fn overlap(&self, detected: &[usize]) -> Overlap {
        overlap_metrics(&self.counts, &self.cluster, detected)
    }
}

fn disc_cells(r0: usize, c0: usize, radius2: usize) -> Vec<(usize, usize)> {
    let mut cells = Vec::new();
    for r in r0.saturating_sub(3)..=r0 + 3 {
        for c in c0.saturating_sub(3)..=c0 + 3 {
            let d2 = (r as i64 - r0 as i64).pow(2) + (c as i64 - c0 as i64).pow(2);
            if d2 as usize <= radius2 {
                cells.push((r, c));
            }
        }
    }
    cells
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    pub true_positive_rate: f64,
    pub false_positive_rate: f64,
    pub positive_predictive_value: f64,
}

/// TPR: share of the planted cluster's individuals inside the detected one.
/// FPR: share of the other individuals inside it. PPV: share of the detected
/// cluster's individuals that belong to the planted one.
pub fn overlap_metrics(counts: &[usize], planted: &[usize], detected: &[usize]) -> Overlap {
    let mut in_planted = vec![false; counts.len()];
    for &u in planted {
        in_planted[u] = true;
    }
    let total: usize = counts.iter().sum();
    let n_w: usize = planted.iter().map(|&u| counts[u]).sum();
    let n_det: usize = detected.iter().map(|&u| counts[u]).sum();
    let hit: usize = detected.iter().filter(|&&u| in_planted[u]).map(|&u| counts[u]).sum();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Overlap {
        true_positive_rate: ratio(hit, n_w),
        false_positive_rate: ratio(n_det - hit, total - n_w),
        positive_predictive_value: ratio(hit, n_det),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Car,
    Iid,
    Icar,
    Exponential,
    Logrank,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Car => "car",
            Method::Iid => "iid",
            Method::Icar => "icar",
            Method::Exponential => "exponential",
            Method::Logrank => "logrank",
        }
    }

    pub fn spatial_model(self) -> Option<SpatialModel> {
        match self {
            Method::Car => Some(SpatialModel::Car),
            Method::Iid => Some(SpatialModel::Iid),
            Method::Icar => Some(SpatialModel::Icar),
            Method::Exponential | Method::Logrank => None,
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "car" => Ok(Method::Car),
            "iid" => Ok(Method::Iid),
            "icar" => Ok(Method::Icar),
            "exponential" => Ok(Method::Exponential),
            "logrank" | "log-rank" => Ok(Method::Logrank),
            other => Err(Error::validation(format!("unknown method {other}"))),
        }
    }
}

fn one_or_many<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(f64),
        Many(Vec<f64>),
    }
    Ok(match OneOrMany::deserialize(d)? {
        OneOrMany::One(v) => vec![v],
        OneOrMany::Many(v) => v,
    })
}

fn default_censoring() -> Vec<f64> {
    vec![0.0]
}

fn default_bf() -> Vec<f64> {
    vec![30.0]
}

fn default_level() -> f64 {
    0.05
}

/// One simulation study. Grid fields accept a single number or a list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub region: RegionChoice,
    #[serde(deserialize_with = "one_or_many")]
    pub alpha: Vec<f64>,
    #[serde(deserialize_with = "one_or_many")]
    pub rho: Vec<f64>,
    #[serde(deserialize_with = "one_or_many")]
    pub sigma2: Vec<f64>,
    #[serde(default = "default_censoring", deserialize_with = "one_or_many")]
    pub censoring_target: Vec<f64>,
    #[serde(default = "default_bf", deserialize_with = "one_or_many")]
    pub bf_threshold: Vec<f64>,
    pub methods: Vec<Method>,
    pub replicates: usize,
    pub mc_replicates: usize,
    pub seed: u64,
    /// Nominal level at which a replicate rejects the null.
    #[serde(default = "default_level")]
    pub level: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Study {
    /// Baselines under a non-spatial frailty of growing variance.
    Figure1,
    /// Two-stage method over the (α, ρ) grid.
    Figure3,
    /// Administrative censoring sensitivity on the 94-unit map.
    Censoring,
    /// Bayes-factor threshold sensitivity.
    Thresholds,
}

impl std::str::FromStr for Study {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "figure1" => Ok(Study::Figure1),
            "figure3" => Ok(Study::Figure3),
            "censoring" => Ok(Study::Censoring),
            "thresholds" => Ok(Study::Thresholds),
            other => Err(Error::validation(format!("unknown study {other}"))),
        }
    }
}

impl SimulationConfig {
    /// Built-in study designs; desk scale uses fewer grid points, replicates
    /// and Monte Carlo draws than the paper-scale versions.
    pub fn preset(study: Study, paper_scale: bool) -> Self {
        let paper_alpha = vec![0.0, 0.5, 1.0, 1.5, 2.0];
        let paper_rho = vec![0.0, 0.2, 0.4, 0.6, 0.8];
        let (replicates, mc_replicates) = if paper_scale { (100, 999) } else { (50, 199) };
        let base = SimulationConfig {
            region: RegionChoice::Map169,
            alpha: vec![0.0, 2.0],
            rho: vec![0.0, 0.4, 0.8],
            sigma2: vec![1.0],
            censoring_target: vec![0.0],
            bf_threshold: vec![30.0],
            methods: vec![Method::Car],
            replicates,
            mc_replicates,
            seed: 20_240_101,
            level: 0.05,
        };
        match study {
            Study::Figure1 => SimulationConfig {
                alpha: vec![0.0],
                rho: vec![0.0],
                sigma2: if paper_scale {
                    (0..=10).map(|i| 0.001 + 0.01 * i as f64).collect()
                } else {
                    vec![0.001, 0.051, 0.101]
                },
                methods: vec![Method::Exponential, Method::Logrank],
                replicates: 100,
                ..base
            },
            Study::Figure3 if paper_scale => SimulationConfig {
                alpha: paper_alpha,
                rho: paper_rho,
                methods: vec![Method::Car, Method::Iid, Method::Icar],
                ..base
            },
            Study::Figure3 => base,
            Study::Censoring => SimulationConfig {
                region: RegionChoice::Map94,
                alpha: if paper_scale { paper_alpha } else { vec![2.0] },
                rho: if paper_scale { paper_rho } else { vec![0.4] },
                censoring_target: vec![0.1, 0.2, 0.3, 0.4],
                ..base
            },
            Study::Thresholds => SimulationConfig {
                alpha: if paper_scale { paper_alpha } else { vec![0.0, 2.0] },
                rho: if paper_scale { paper_rho } else { vec![0.4] },
                bf_threshold: vec![3.0, 10.0, 30.0, 100.0],
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonempty = [
            ("alpha", &self.alpha),
            ("rho", &self.rho),
            ("sigma2", &self.sigma2),
            ("censoring_target", &self.censoring_target),
            ("bf_threshold", &self.bf_threshold),
        ];
        for (name, grid) in nonempty {
            if grid.is_empty() {
                return Err(Error::validation(format!("grid {name} is empty")));
            }
            if grid.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation(format!("grid {name} has a non-finite value")));
            }
        }
        if self.methods.is_empty() {
            return Err(Error::validation("no methods requested"));
        }
        if self.rho.iter().any(|r| !(0.0..1.0).contains(r)) {
            return Err(Error::validation("rho values must lie in [0, 1)"));
        }
        if self.sigma2.iter().any(|&s| s <= 0.0) {
            return Err(Error::validation("sigma2 values must be positive"));
        }
        if self.censoring_target.iter().any(|c| !(0.0..1.0).contains(c)) {
            return Err(Error::validation("censoring targets must lie in [0, 1)"));
        }
        if self.bf_threshold.iter().any(|&b| b <= 0.0) {
            return Err(Error::validation("Bayes factor thresholds must be positive"));
        }
        if self.replicates == 0 || self.mc_replicates == 0 {
            return Err(Error::validation("replicates and mc_replicates must be positive"));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::validation("level must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| Error::validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a `.json` file as JSON and anything else as TOML.
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json_str(&text)
        } else {
            Self::from_toml_str(&text)
        }
    }
}

/// Seed of the data-generating stream for one (α, ρ, σ²) triple. Censoring,
/// method and threshold do not enter, so those comparisons are paired.
pub fn data_seed(seed: u64, alpha: f64, rho: f64, sigma2: f64) -> u64 {
    [alpha, rho, sigma2]
        .iter()
        .fold(derive_seed(seed, label_salt("data")), |s, v| derive_seed(s, v.to_bits()))
}

/// Replicate `replicate` of the simulated dataset, before censoring.
pub fn simulate_dataset(sim: &SimulationRegion, alpha: f64, rho: f64, sigma2: f64, seed: u64, replicate: u64) -> Result<SurvivalDataset> {
    let s = data_seed(seed, alpha, rho, sigma2);
    let field = generate_frailty_field(&sim.region, &sim.cluster, alpha, rho, sigma2, &mut stream_rng(s, 2 * replicate))?;
    generate_survival_times(&field, &sim.assignments(), &sim.unit_ids(), &mut stream_rng(s, 2 * replicate + 1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub p_value: Option<f64>,
    pub rejected: bool,
    pub detected_units: Vec<usize>,
    pub overlap: Option<Overlap>,
    /// Selected ρ* (two-stage methods).
    pub rho_star: Option<f64>,
    /// Whether the Bayes-factor rule kept the cluster model.
    pub h1_selected: Option<bool>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub method: Method,
    pub alpha: f64,
    pub rho: f64,
    pub sigma2: f64,
    pub censoring_target: f64,
    pub bf_threshold: f64,
    /// `type_i_error` when α = 0, `power` otherwise.
    pub rate_kind: String,
    pub replicates: usize,
    pub completed: usize,
    pub failures: usize,
    pub rejections: usize,
    pub rejection_rate: f64,
    /// Averaged over rejecting replicates; absent when none rejected.
    pub true_positive_rate: Option<f64>,
    pub false_positive_rate: Option<f64>,
    pub positive_predictive_value: Option<f64>,
    pub mean_rho_star: Option<f64>,
    pub h1_rate: Option<f64>,
    pub records: Vec<ReplicateRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: SimulationConfig,
    pub cluster_units: Vec<String>,
    /// Individuals per unit, in region order.
    pub unit_counts: Vec<usize>,
    pub cells: Vec<CellMetrics>,
}

impl MetricsReport {
    pub fn cell(&self, method: Method, alpha: f64, rho: f64) -> Option<&CellMetrics> {
        self.cells
            .iter()
            .find(|c| c.method == method && c.alpha == alpha && c.rho == rho)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io_err = |source| Error::Io {
            path: path.display().to_string(),
            source,
        };
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
        writeln!(
            f,
            "method,alpha,rho,sigma2,censoring_target,bf_threshold,rate_kind,replicates,completed,failures,rejections,rejection_rate,true_positive_rate,false_positive_rate,positive_predictive_value,mean_rho_star,h1_rate"
        )
        .map_err(io_err)?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for c in &self.cells {
            writeln!(
                f,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                c.method.name(),
                c.alpha,
                c.rho,
                c.sigma2,
                c.censoring_target,
                c.bf_threshold,
                c.rate_kind,
                c.replicates,
                c.completed,
                c.failures,
                c.rejections,
                c.rejection_rate,
                opt(c.true_positive_rate),
                opt(c.false_positive_rate),
                opt(c.positive_predictive_value),
                opt(c.mean_rho_star),
                opt(c.h1_rate),
            )
            .map_err(io_err)?;
        }
        f.flush().map_err(io_err)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Numerical(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    method: Method,
    alpha: f64,
    rho: f64,
    sigma2: f64,
    censoring: f64,
    bf: f64,
}

fn run_replicate(cfg: &SimulationConfig, sim: &SimulationRegion, windows: &WindowSet, cell: &Cell, replicate: usize) -> Result<ReplicateRecord> {
    let raw = simulate_dataset(sim, cell.alpha, cell.rho, cell.sigma2, cfg.seed, replicate as u64)?;
    let ds = apply_administrative_censoring(&raw, cell.censoring)?;
    let method_seed = derive_seed(
        data_seed(cfg.seed, cell.alpha, cell.rho, cell.sigma2),
        derive_seed(label_salt(cell.method.name()), replicate as u64),
    );
    let (p, detected, rho_star, h1) = match cell.method.spatial_model() {
        Some(model) => {
            let opts = TwoStageOptions {
                model,
                bf_threshold: cell.bf,
                mc_replicates: cfg.mc_replicates,
                seed: method_seed,
                max_secondaries: 0,
                ..Default::default()
            };
            let res = run_two_stage_with(&ds, &sim.region, windows, &opts)?;
            let detected = windows.windows()[res.scan.mlc.window].members.clone();
            let h1 = matches!(res.selection.winner, crate::frailty::Winner::H1 { .. });
            (res.significance.p_mlc, detected, Some(res.selection.rho_star), Some(h1))
        }
        None => {
            let mut opts = BaselineOptions::new(cfg.mc_replicates, method_seed);
            opts.max_secondaries = 0;
            let res = if cell.method == Method::Exponential {
                exponential_scan(&ds, windows, &opts)?
            } else {
                logrank_scan(&ds, windows, &opts)?
            };
            let detected = windows.windows()[res.mlc.window].members.clone();
            (res.p_value, detected, None, None)
        }
    };
    let rejected = p <= cfg.level;
    Ok(ReplicateRecord {
        replicate,
        p_value: Some(p),
        rejected,
        overlap: Some(sim.overlap(&detected)),
        detected_units: detected,
        rho_star,
        h1_selected: h1,
        error: None,
    })
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (n, s) = values.fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    (n > 0).then(|| s / n as f64)
}

fn summarize(cell: &Cell, records: Vec<ReplicateRecord>) -> CellMetrics {
    let done: Vec<&ReplicateRecord> = records.iter().filter(|r| r.error.is_none()).collect();
    let rejecting: Vec<&ReplicateRecord> = done.iter().copied().filter(|r| r.rejected).collect();
    let over = |f: fn(&Overlap) -> f64| mean(rejecting.iter().filter_map(|r| r.overlap.as_ref()).map(f));
    CellMetrics {
        method: cell.method,
        alpha: cell.alpha,
        rho: cell.rho,
        sigma2: cell.sigma2,
        censoring_target: cell.censoring,
        bf_threshold: cell.bf,
        rate_kind: if cell.alpha == 0.0 { "type_i_error" } else { "power" }.to_string(),
        replicates: records.len(),
        completed: done.len(),
        failures: records.len() - done.len(),
        rejections: rejecting.len(),
        rejection_rate: if done.is_empty() { 0.0 } else { rejecting.len() as f64 / done.len() as f64 },
        true_positive_rate: over(|o| o.true_positive_rate),
        false_positive_rate: over(|o| o.false_positive_rate),
        positive_predictive_value: over(|o| o.positive_predictive_value),
        mean_rho_star: mean(done.iter().filter_map(|r| r.rho_star)),
        h1_rate: mean(done.iter().filter_map(|r| r.h1_selected.map(|h| h as u8 as f64))),
        records,
    }
}

/// Runs every grid cell for every configured method. Replicates run in
/// parallel; failures are kept as records and counted per cell.
pub fn run_experiment(config: &SimulationConfig) -> Result<MetricsReport> {
    config.validate()?;
    let sim = SimulationRegion::build(&config.region)?;
    let windows = enumerate_windows(&sim.region, &sim.counts)?;
    let mut cells = Vec::new();
    for &method in &config.methods {
        for &alpha in &config.alpha {
            for &rho in &config.rho {
                for &sigma2 in &config.sigma2 {
                    for &censoring in &config.censoring_target {
                        let thresholds: &[f64] = if method.spatial_model().is_some() {
                            &config.bf_threshold
                        } else {
                            &config.bf_threshold[..1]
                        };
                        for &bf in thresholds {
                            cells.push(Cell {
                                method,
                                alpha,
                                rho,
                                sigma2,
                                censoring,
                                bf,
                            });
                        }
                    }
                }
            }
        }
    }
    let jobs: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..config.replicates).map(move |r| (c, r)))
        .collect();
    let records: Vec<ReplicateRecord> = jobs
        .par_iter()
        .map(|&(c, r)| {
            run_replicate(config, &sim, &windows, &cells[c], r).unwrap_or_else(|e| {
                log::warn!("{} replicate {r}: {e}", cells[c].method.name());
                ReplicateRecord {
                    replicate: r,
                    p_value: None,
                    rejected: false,
                    detected_units: Vec::new(),
                    overlap: None,
                    rho_star: None,
                    h1_selected: None,
                    error: Some(e.to_string()),
                }
            })
        })
        .collect();
    let mut records = records.into_iter();
    let metrics = cells
        .iter()
        .map(|cell| {
            let recs: Vec<ReplicateRecord> = records.by_ref().take(config.replicates).collect();
            let m = summarize(cell, recs);
            log::info!(
                "{} alpha={} rho={} sigma2={} censoring={} bf={}: {} {:.3}",
                cell.method.name(),
                cell.alpha,
                cell.rho,
                cell.sigma2,
                cell.censoring,
                cell.bf,
                m.rate_kind,
                m.rejection_rate
            );
            m
        })
        .collect();
    Ok(MetricsReport {
        config: config.clone(),
        cluster_units: sim.cluster.iter().map(|&u| sim.region.unit_id(u).to_string()).collect(),
        unit_counts: sim.counts.clone(),
        cells: metrics,
    })
}
