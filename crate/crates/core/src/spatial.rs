//! Spatial units, adjacency, Leroux CAR precision matrices and the circular
//! candidate windows scanned for clusters.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use log::warn;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest spatial correlation accepted by [`PrecisionModel::leroux`]; the
/// intrinsic CAR limit is approximated by this value.
pub const ICAR_RHO: f64 = 0.999;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Unit {
    pub id: String,
    pub x: f64,
    pub y: f64,
}

/// Spatial units located by planar centroids, with a symmetric binary adjacency.
#[derive(Debug, Clone)]
pub struct StudyRegion {
    units: Vec<Unit>,
    index: HashMap<String, usize>,
    neighbors: Vec<Vec<usize>>,
}

impl StudyRegion {
    /// Builds a region from units and undirected edges given as unit indices.
    /// Duplicate edges are ignored.
    pub fn new(units: Vec<Unit>, edges: &[(usize, usize)]) -> Result<Self> {
        if units.len() < 2 {
            return Err(Error::validation("a study region needs at least 2 units"));
        }
        let mut index = HashMap::with_capacity(units.len());
        for (k, u) in units.iter().enumerate() {
            if !(u.x.is_finite() && u.y.is_finite()) {
                return Err(Error::validation(format!(
                    "unit {} has a non-finite centroid",
                    u.id
                )));
            }
            if index.insert(u.id.clone(), k).is_some() {
                return Err(Error::validation(format!("duplicate unit_id {}", u.id)));
            }
        }
        let k = units.len();
        let mut sets: Vec<HashSet<usize>> = vec![HashSet::new(); k];
        for &(a, b) in edges {
            if a >= k || b >= k {
                return Err(Error::validation(format!(
                    "edge ({a}, {b}) refers to a unit outside the region"
                )));
            }
            if a == b {
                return Err(Error::validation(format!(
                    "unit {} cannot be adjacent to itself",
                    units[a].id
                )));
            }
            sets[a].insert(b);
            sets[b].insert(a);
        }
        let neighbors = sets
            .into_iter()
            .map(|s| {
                let mut v: Vec<usize> = s.into_iter().collect();
                v.sort_unstable();
                v
            })
            .collect();
        let region = StudyRegion {
            units,
            index,
            neighbors,
        };
        if !region.is_connected() {
            warn!("adjacency graph is disconnected; R stays positive semidefinite");
        }
        Ok(region)
    }

    /// Builds a region from a full 0/1 adjacency matrix, rejecting asymmetric
    /// entries and self-adjacency.
    pub fn from_adjacency_matrix(units: Vec<Unit>, adjacency: &[Vec<u8>]) -> Result<Self> {
        let k = units.len();
        if adjacency.len() != k || adjacency.iter().any(|row| row.len() != k) {
            return Err(Error::validation(format!(
                "adjacency matrix must be {k}x{k}"
            )));
        }
        let mut edges = Vec::new();
        for a in 0..k {
            for b in 0..k {
                let v = adjacency[a][b];
                if v > 1 {
                    return Err(Error::validation(format!(
                        "adjacency entry ({}, {}) must be 0 or 1",
                        units[a].id, units[b].id
                    )));
                }
                if v != adjacency[b][a] {
                    return Err(Error::validation(format!(
                        "adjacency is not symmetric for pair ({}, {})",
                        units[a].id, units[b].id
                    )));
                }
                if v == 1 && a < b {
                    edges.push((a, b));
                } else if v == 1 && a == b {
                    return Err(Error::validation(format!(
                        "unit {} cannot be adjacent to itself",
                        units[a].id
                    )));
                }
            }
        }
        Self::new(units, &edges)
    }

    /// Reads a `unit_id,x,y` units CSV and a `unit_id_a,unit_id_b` edge list.
    pub fn read(units_path: &Path, adjacency_path: &Path) -> Result<Self> {
        let units = read_units(units_path)?;
        let ids: HashMap<&str, usize> = units
            .iter()
            .enumerate()
            .map(|(k, u)| (u.id.as_str(), k))
            .collect();
        let text = std::fs::read_to_string(adjacency_path).map_err(|source| Error::Io {
            path: adjacency_path.display().to_string(),
            source,
        })?;
        let mut edges = Vec::new();
        for (line_no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || (line_no == 0 && line == "unit_id_a,unit_id_b") {
                continue;
            }
            let mut parts = line.split(',').map(str::trim);
            let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::validation(format!(
                    "adjacency line {} must hold exactly two unit ids",
                    line_no + 1
                )));
            };
            let lookup = |id: &str| {
                ids.get(id).copied().ok_or_else(|| {
                    Error::validation(format!(
                        "unknown unit_id {id} in adjacency line {}",
                        line_no + 1
                    ))
                })
            };
            edges.push((lookup(a)?, lookup(b)?));
        }
        drop(ids);
        Self::new(units, &edges)
    }

    /// Rook-adjacent rectangular lattice with unit spacing; ids are `r{row}c{col}`.
    pub fn lattice(rows: usize, cols: usize) -> Result<Self> {
        Self::lattice_without(rows, cols, &[])
    }

    /// Lattice with the listed `(row, col)` cells removed.
    pub fn lattice_without(rows: usize, cols: usize, removed: &[(usize, usize)]) -> Result<Self> {
        let removed: HashSet<(usize, usize)> = removed.iter().copied().collect();
        let mut cell_index = HashMap::new();
        let mut units = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                if removed.contains(&(r, c)) {
                    continue;
                }
                cell_index.insert((r, c), units.len());
                units.push(Unit {
                    id: format!("r{r:02}c{c:02}"),
                    x: c as f64,
                    y: r as f64,
                });
            }
        }
        let mut edges = Vec::new();
        for (&(r, c), &k) in &cell_index {
            if let Some(&l) = cell_index.get(&(r + 1, c)) {
                edges.push((k, l));
            }
            if let Some(&l) = cell_index.get(&(r, c + 1)) {
                edges.push((k, l));
            }
        }
        edges.sort_unstable();
        Self::new(units, &edges)
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn units(&self) -> &[Unit] {
        &self.units
    }

    pub fn unit_id(&self, k: usize) -> &str {
        &self.units[k].id
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn neighbors(&self, k: usize) -> &[usize] {
        &self.neighbors[k]
    }

    pub fn are_adjacent(&self, k: usize, l: usize) -> bool {
        self.neighbors[k].binary_search(&l).is_ok()
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (k, nb) in self.neighbors.iter().enumerate() {
            out.extend(nb.iter().filter(|&&l| l > k).map(|&l| (k, l)));
        }
        out
    }

    pub fn squared_distance(&self, k: usize, l: usize) -> f64 {
        let (a, b) = (&self.units[k], &self.units[l]);
        (a.x - b.x).powi(2) + (a.y - b.y).powi(2)
    }

    pub fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.len()];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(k) = stack.pop() {
            for &l in &self.neighbors[k] {
                if !seen[l] {
                    seen[l] = true;
                    stack.push(l);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

fn read_units(path: &Path) -> Result<Vec<Unit>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["unit_id", "x", "y"] {
        return Err(Error::validation(format!(
            "units file {} must have header unit_id,x,y",
            path.display()
        )));
    }
    let mut units = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| csv_error(path, e))?;
        if record.len() != 3 {
            return Err(Error::validation(format!("units row {row} must have 3 fields")));
        }
        let coord = |j: usize| {
            record[j].parse::<f64>().map_err(|_| {
                Error::validation(format!("invalid coordinate at units row {row}"))
            })
        };
        units.push(Unit {
            id: record[0].to_string(),
            x: coord(1)?,
            y: coord(2)?,
        });
    }
    Ok(units)
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io {
            path: path.display().to_string(),
            source,
        },
        other => Error::validation(format!("{}: {:?}", path.display(), other)),
    }
}

/// The matrix R with node degrees on the diagonal and -1 for adjacent pairs.
#[derive(Debug, Clone)]
pub struct NeighborMatrix {
    r: DMatrix<f64>,
    eigenvalues: DVector<f64>,
}

impl NeighborMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.r
    }

    /// Eigenvalues of R, used for O(K) log-determinants of ρR + (1-ρ)I.
    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub fn dim(&self) -> usize {
        self.r.nrows()
    }
}

pub fn build_neighbor_matrix(region: &StudyRegion) -> NeighborMatrix {
    let k = region.len();
    let mut r = DMatrix::zeros(k, k);
    for a in 0..k {
        let nb = region.neighbors(a);
        r[(a, a)] = nb.len() as f64;
        for &b in nb {
            r[(a, b)] = -1.0;
        }
    }
    let eigenvalues = SymmetricEigen::new(r.clone())
        .eigenvalues
        .map(|v| v.max(0.0));
    NeighborMatrix { r, eigenvalues }
}

/// Leroux CAR precision structure A = ρR + (1-ρ)I with variance scale σ²;
/// the implied field has covariance σ²A⁻¹.
#[derive(Debug, Clone)]
pub struct PrecisionModel {
    rho: f64,
    sigma2: f64,
    a: DMatrix<f64>,
    log_det_a: f64,
}

impl PrecisionModel {
    pub fn leroux(r: &NeighborMatrix, rho: f64, sigma2: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rho) {
            return Err(Error::validation(format!(
                "spatial correlation rho = {rho} must lie in [0, 1); use rho = {ICAR_RHO} for the intrinsic CAR"
            )));
        }
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::validation(format!("variance {sigma2} must be positive")));
        }
        let k = r.dim();
        let a = if rho == 0.0 {
            DMatrix::identity(k, k)
        } else {
            r.matrix() * rho + DMatrix::identity(k, k) * (1.0 - rho)
        };
        Ok(PrecisionModel {
            rho,
            sigma2,
            a,
            log_det_a: leroux_log_det(r, rho),
        })
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn log_det_a(&self) -> f64 {
        self.log_det_a
    }

    /// Cholesky factor of A; A is positive definite for every accepted ρ.
    pub fn cholesky(&self) -> Result<Cholesky<f64, Dyn>> {
        Cholesky::new(self.a.clone()).ok_or_else(|| {
            Error::Numerical(format!(
                "precision matrix is not positive definite at rho = {}",
                self.rho
            ))
        })
    }
}

/// log det(ρR + (1-ρ)I) from the eigenvalues of R.
pub fn leroux_log_det(r: &NeighborMatrix, rho: f64) -> f64 {
    r.eigenvalues()
        .iter()
        .map(|&l| (rho * l + 1.0 - rho).ln())
        .sum()
}

/// A circular potential cluster: the units whose centroids fall in the disc
/// centred on `center` whose boundary passes through the `len`-th nearest unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateWindow {
    pub center: usize,
    /// Member units ordered by distance from the center (ties by index).
    pub members: Vec<usize>,
    pub n_individuals: usize,
    pub radius2: f64,
}

impl CandidateWindow {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, unit: usize) -> bool {
        self.members.contains(&unit)
    }

    /// Indicator vector over the `k` units.
    pub fn mask(&self, k: usize) -> Vec<bool> {
        let mut m = vec![false; k];
        for &u in &self.members {
            m[u] = true;
        }
        m
    }
}

/// The candidate set W, ordered by center index then radius.
///
/// Every window is a prefix of its center's distance ordering, which lets the
/// scans accumulate window sums incrementally per center.
#[derive(Debug, Clone)]
pub struct WindowSet {
    windows: Vec<CandidateWindow>,
    orders: Vec<Vec<usize>>,
    n_units: usize,
}

impl WindowSet {
    pub fn windows(&self) -> &[CandidateWindow] {
        &self.windows
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn n_units(&self) -> usize {
        self.n_units
    }

    /// Distance ordering of units around `center`, truncated to the largest
    /// retained window.
    pub fn order(&self, center: usize) -> &[usize] {
        &self.orders[center]
    }

    /// Windows grouped by center: `(center, range into windows())`.
    pub fn center_groups(&self) -> Vec<(usize, std::ops::Range<usize>)> {
        let mut out = Vec::new();
        let mut start = 0;
        while start < self.windows.len() {
            let c = self.windows[start].center;
            let mut end = start;
            while end < self.windows.len() && self.windows[end].center == c {
                end += 1;
            }
            out.push((c, start..end));
            start = end;
        }
        out
    }

    /// Keeps only the listed windows (in the given order of indices).
    pub fn subset(&self, keep: &[usize]) -> WindowSet {
        let mut idx = keep.to_vec();
        idx.sort_unstable();
        idx.dedup();
        WindowSet {
            windows: idx.iter().map(|&i| self.windows[i].clone()).collect(),
            orders: self.orders.clone(),
            n_units: self.n_units,
        }
    }
}

/// Enumerates the circular windows holding between 1 and N/2 individuals.
pub fn enumerate_windows(region: &StudyRegion, unit_counts: &[usize]) -> Result<WindowSet> {
    let k = region.len();
    if unit_counts.len() != k {
        return Err(Error::validation(format!(
            "unit_counts has {} entries for {k} units",
            unit_counts.len()
        )));
    }
    let total: usize = unit_counts.iter().sum();
    let cap = total as f64 / 2.0;
    let mut windows = Vec::new();
    let mut orders = Vec::with_capacity(k);
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    for center in 0..k {
        let mut order: Vec<(f64, usize)> = (0..k)
            .map(|l| (region.squared_distance(center, l), l))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut kept_len = 0;
        let mut count = 0usize;
        let mut i = 0;
        while i < k {
            // units equidistant from the center enter together
            let d = order[i].0;
            let mut j = i;
            while j < k && same_distance(order[j].0, d) {
                count += unit_counts[order[j].1];
                j += 1;
            }
            if count as f64 > cap {
                break;
            }
            if count >= 1 {
                let mut members: Vec<usize> = order[..j].iter().map(|&(_, l)| l).collect();
                let mut key = members.clone();
                key.sort_unstable();
                if seen.insert(key) {
                    members.shrink_to_fit();
                    windows.push(CandidateWindow {
                        center,
                        members,
                        n_individuals: count,
                        radius2: d,
                    });
                }
                kept_len = j;
            }
            i = j;
        }
        orders.push(order[..kept_len].iter().map(|&(_, l)| l).collect());
    }
    Ok(WindowSet {
        windows,
        orders,
        n_units: k,
    })
}

fn same_distance(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1e-300)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn path(n: usize) -> StudyRegion {
        let units = (0..n)
            .map(|i| Unit {
                id: format!("{}", i + 1),
                x: i as f64,
                y: 0.0,
            })
            .collect();
        let edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        StudyRegion::new(units, &edges).unwrap()
    }

    #[test]
    fn neighbor_matrix_small_graphs() {
        let r = build_neighbor_matrix(&path(2));
        assert_eq!(r.matrix().as_slice(), &[1.0, -1.0, -1.0, 1.0]);
        let r = build_neighbor_matrix(&path(3));
        let expected = DMatrix::from_row_slice(3, 3, &[1., -1., 0., -1., 2., -1., 0., -1., 1.]);
        assert_eq!(r.matrix(), &expected);
    }

    #[test]
    fn asymmetric_matrix_names_pair() {
        let units: Vec<Unit> = path(3).units().to_vec();
        let adj = vec![vec![0, 1, 0], vec![0, 0, 1], vec![0, 1, 0]];
        let err = StudyRegion::from_adjacency_matrix(units, &adj).unwrap_err();
        assert!(err.to_string().contains("(1, 2)"), "{err}");
    }

    #[test]
    fn lattice_neighbor_matrix_is_psd_with_zero_rows() {
        let region = StudyRegion::lattice(13, 13).unwrap();
        let r = build_neighbor_matrix(&region);
        for row in r.matrix().row_iter() {
            assert_eq!(row.sum(), 0.0);
        }
        let shifted = r.matrix() + DMatrix::identity(169, 169) * 1e-9;
        assert!(Cholesky::new(shifted).is_some());
        assert_eq!(r.matrix(), &r.matrix().transpose());
        // connected graph: exactly one zero eigenvalue
        let zeros = r.eigenvalues().iter().filter(|&&l| l < 1e-9).count();
        assert_eq!(zeros, 1);
    }

    #[test]
    fn leroux_precision_examples() {
        let r = build_neighbor_matrix(&path(3));
        let p = PrecisionModel::leroux(&r, 0.0, 1.0).unwrap();
        assert_eq!(p.a(), &DMatrix::identity(3, 3));
        let p = PrecisionModel::leroux(&r, 0.5, 1.0).unwrap();
        let expected =
            DMatrix::from_row_slice(3, 3, &[1., -0.5, 0., -0.5, 1.5, -0.5, 0., -0.5, 1.]);
        assert!((p.a() - expected).abs().max() < 1e-15);
        let p = PrecisionModel::leroux(&r, ICAR_RHO, 2.0).unwrap();
        let near = r.matrix() * ICAR_RHO + DMatrix::identity(3, 3) * (1.0 - ICAR_RHO);
        assert!((p.a() - near).abs().max() < 1e-12);
        assert!(p.cholesky().is_ok());
        let direct = p.cholesky().unwrap().determinant().ln();
        assert!((direct - p.log_det_a()).abs() < 1e-9);
    }

    #[test]
    fn leroux_rejects_rho_one() {
        let r = build_neighbor_matrix(&path(3));
        let err = PrecisionModel::leroux(&r, 1.0, 1.0).unwrap_err();
        assert!(err.to_string().contains("0.999"));
        assert!(PrecisionModel::leroux(&r, 0.5, 0.0).is_err());
    }

    #[test]
    fn windows_respect_population_cap() {
        let region = path(3);
        let ws = enumerate_windows(&region, &[10, 10, 10]).unwrap();
        let mut sets: Vec<Vec<usize>> = ws
            .windows()
            .iter()
            .map(|w| {
                let mut m = w.members.clone();
                m.sort();
                m
            })
            .collect();
        sets.sort();
        // {2} with neighbours 1 and 3 equidistant enters as {1,2,3} (30 > 15)
        assert_eq!(sets, vec![vec![0], vec![1], vec![2]]);
        assert!(ws.windows().iter().all(|w| w.n_individuals <= 15));

        let ws = enumerate_windows(&path(2), &[5, 5]).unwrap();
        assert_eq!(ws.len(), 2);
        assert!(ws.windows().iter().all(|w| w.len() == 1));
    }

    #[test]
    fn windows_include_equidistant_ties() {
        let region = path(5);
        let ws = enumerate_windows(&region, &[10; 5]).unwrap();
        // center 3 (index 2) jumps from {3} straight to {2,3,4}
        let around: Vec<usize> = ws
            .windows()
            .iter()
            .filter(|w| w.center == 2)
            .map(|w| w.len())
            .collect();
        assert_eq!(around, vec![1]);
        let first: Vec<usize> = ws
            .windows()
            .iter()
            .filter(|w| w.center == 0)
            .map(|w| w.len())
            .collect();
        assert_eq!(first, vec![1, 2]);
    }

    #[test]
    fn lattice_window_count_matches_brute_force() {
        let region = StudyRegion::lattice(13, 13).unwrap();
        let counts = vec![10usize; 169];
        let ws = enumerate_windows(&region, &counts).unwrap();
        // independent double loop over (center, boundary) pairs with set hashing
        let mut sets = HashSet::new();
        for c in 0..169 {
            for b in 0..169 {
                let radius = region.squared_distance(c, b);
                let mut members: Vec<usize> = (0..169)
                    .filter(|&l| region.squared_distance(c, l) <= radius)
                    .collect();
                members.sort();
                let n: usize = members.iter().map(|&l| counts[l]).sum();
                if n >= 1 && n * 2 <= 1690 {
                    sets.insert(members);
                }
            }
        }
        assert_eq!(ws.len(), sets.len());
        for w in ws.windows() {
            let mut m = w.members.clone();
            m.sort();
            assert!(sets.contains(&m));
            assert_eq!(&ws.order(w.center)[..w.len()], &w.members[..]);
        }
    }

    #[test]
    fn region_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let units = dir.path().join("units.csv");
        let adj = dir.path().join("adj.csv");
        std::fs::write(&units, "unit_id,x,y\na,0,0\nb,1,0\nc,2,0\n").unwrap();
        std::fs::write(&adj, "a,b\nb,c\nb,a\n").unwrap();
        let region = StudyRegion::read(&units, &adj).unwrap();
        assert_eq!(region.len(), 3);
        assert_eq!(region.edges(), vec![(0, 1), (1, 2)]);
        std::fs::write(&adj, "a,z\n").unwrap();
        assert!(StudyRegion::read(&units, &adj).is_err());
    }

    #[test]
    fn disconnected_regions_are_accepted() {
        let units = path(4).units().to_vec();
        let region = StudyRegion::new(units, &[(0, 1), (2, 3)]).unwrap();
        assert!(!region.is_connected());
        let r = build_neighbor_matrix(&region);
        assert!(r.eigenvalues().iter().all(|&l| l >= 0.0));
    }

    fn random_graph(k: usize, seed: u64) -> StudyRegion {
        use rand::Rng;
        let mut rng = crate::rng::stream_rng(seed, 0);
        let units: Vec<Unit> = (0..k)
            .map(|i| Unit {
                id: i.to_string(),
                x: rng.random(),
                y: rng.random(),
            })
            .collect();
        // spanning path keeps the graph connected, extra edges at random
        let mut edges: Vec<(usize, usize)> = (1..k).map(|i| (i - 1, i)).collect();
        for a in 0..k {
            for b in a + 2..k {
                if rng.random::<f64>() < 0.3 {
                    edges.push((a, b));
                }
            }
        }
        StudyRegion::new(units, &edges).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        // Conditional moments from the joint N(0, σ²A⁻¹) equal the Leroux conditionals.
        #[test]
        fn car_conditionals_match_joint(k in 2usize..=6, seed in 0u64..1000, high in any::<bool>()) {
            let rho = if high { 0.8 } else { 0.2 };
            let sigma2 = 1.7;
            let region = random_graph(k, seed);
            let r = build_neighbor_matrix(&region);
            let p = PrecisionModel::leroux(&r, rho, sigma2).unwrap();
            let q = p.a() / sigma2;
            let x: Vec<f64> = (0..k).map(|i| ((i as f64) * 1.3 + seed as f64).sin()).collect();
            for i in 0..k {
                // Gaussian conditional from the joint precision Q
                let cond_var = 1.0 / q[(i, i)];
                let cond_mean = -(0..k).filter(|&j| j != i).map(|j| q[(i, j)] * x[j]).sum::<f64>() * cond_var;
                let deg = region.neighbors(i).len() as f64;
                let nb_sum: f64 = region.neighbors(i).iter().map(|&j| x[j]).sum();
                let denom = rho * deg + 1.0 - rho;
                prop_assert!((cond_mean - rho * nb_sum / denom).abs() < 1e-10);
                prop_assert!((cond_var - sigma2 / denom).abs() < 1e-10);
            }
        }

        #[test]
        fn leroux_is_positive_definite(k in 2usize..=12, seed in 0u64..1000, rho in 0.0f64..=0.999) {
            let r = build_neighbor_matrix(&random_graph(k, seed));
            let p = PrecisionModel::leroux(&r, rho, 1.0).unwrap();
            prop_assert!(p.cholesky().is_ok());
        }

        #[test]
        fn windows_are_nested_per_center(rows in 2usize..6, cols in 2usize..6, seed in 0u64..100) {
            let region = StudyRegion::lattice(rows, cols).unwrap();
            let counts: Vec<usize> = (0..region.len()).map(|i| 1 + ((i as u64 * 31 + seed) % 7) as usize).collect();
            let ws = enumerate_windows(&region, &counts).unwrap();
            let total: usize = counts.iter().sum();
            for (c, range) in ws.center_groups() {
                let group = &ws.windows()[range];
                for pair in group.windows(2) {
                    prop_assert!(pair[0].radius2 < pair[1].radius2);
                    prop_assert!(pair[1].members.starts_with(&pair[0].members));
                }
                for w in group {
                    prop_assert_eq!(w.center, c);
                    prop_assert!(w.n_individuals >= 1 && 2 * w.n_individuals <= total);
                }
            }
        }
    }
}
