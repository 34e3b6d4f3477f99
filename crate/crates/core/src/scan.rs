//! Stage two: Gaussian scan over the selected frailties.
//!
//! Under H0 the frailty vector is `N(α·1, σ²A⁻¹)`; under the alternative for
//! window `w` the mean is `α_w` on `w` and `α_{w^c}` elsewhere. Both fits are
//! generalized least squares problems with closed forms, and the window's
//! log-likelihood ratio is `(K/2)·ln(σ̂²(0)/σ̂²(w))`.
//!
//! The quadratic forms `1_wᵀA1_w` and `1_wᵀA1` do not depend on the data and
//! are computed once per window set, so scoring a new frailty vector (as the
//! Monte Carlo replicates do) costs one product `Aφ` plus a running sum per
//! window.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spatial::WindowSet;

/// Relative size of the residual sum of squares below which a fit is
/// treated as exact.
const DEGENERATE_RTOL: f64 = 1e-12;

/// GLS estimates under H0: `α̂ = 1ᵀAφ / 1ᵀA1`, `σ̂²(0) = (φ - α̂1)ᵀA(φ - α̂1) / K`.
pub fn gls_null_estimates(phi: &[f64], a: &DMatrix<f64>) -> Result<(f64, f64)> {
    check_dims(phi, a)?;
    let k = phi.len() as f64;
    let p = DVector::from_column_slice(phi);
    let ap = a * &p;
    let a1: f64 = a.iter().sum();
    let t1: f64 = ap.iter().sum();
    let s = p.dot(&ap);
    let alpha = t1 / a1;
    let ss0 = s - 2.0 * alpha * t1 + alpha * alpha * a1;
    if ss0 <= DEGENERATE_RTOL * s.abs().max(f64::MIN_POSITIVE) {
        return Err(Error::DegenerateField(
            "null variance estimate is zero (constant frailty field)".into(),
        ));
    }
    Ok((alpha, ss0 / k))
}

/// GLS estimates under the cluster alternative for the window `members`:
/// `(α̂_w, α̂_{w^c}, σ̂²(w))`. A zero variance estimate is returned as is.
pub fn gls_alt_estimates(phi: &[f64], a: &DMatrix<f64>, members: &[usize]) -> Result<(f64, f64, f64)> {
    check_dims(phi, a)?;
    let kk = phi.len();
    let mut in_w = vec![false; kk];
    for &m in members {
        if m >= kk {
            return Err(Error::validation(format!("window unit index {m} out of range")));
        }
        in_w[m] = true;
    }
    let n_in = in_w.iter().filter(|&&b| b).count();
    if n_in == 0 || n_in == kk {
        return Err(Error::validation("window and its complement must both be non-empty"));
    }
    let ind_w = DVector::from_fn(kk, |i, _| if in_w[i] { 1.0 } else { 0.0 });
    let ind_c = DVector::from_fn(kk, |i, _| if in_w[i] { 0.0 } else { 1.0 });
    let p = DVector::from_column_slice(phi);
    let a_w = a * &ind_w;
    let a_c = a * &ind_c;
    let (qww, qwc, qcc) = (ind_w.dot(&a_w), ind_w.dot(&a_c), ind_c.dot(&a_c));
    let (bw, bc) = (a_w.dot(&p), a_c.dot(&p));
    let det = qww * qcc - qwc * qwc;
    if !(det > 0.0) {
        return Err(Error::Numerical("singular window design in the alternative fit".into()));
    }
    let alpha_w = (qcc * bw - qwc * bc) / det;
    let alpha_c = (qww * bc - qwc * bw) / det;
    let resid = &p - &ind_w * alpha_w - &ind_c * alpha_c;
    let ss = resid.dot(&(a * &resid)).max(0.0);
    Ok((alpha_w, alpha_c, ss / kk as f64))
}

fn check_dims(phi: &[f64], a: &DMatrix<f64>) -> Result<()> {
    if a.nrows() != phi.len() || a.ncols() != phi.len() {
        return Err(Error::validation(format!(
            "frailty vector has {} entries but the precision matrix is {}x{}",
            phi.len(),
            a.nrows(),
            a.ncols()
        )));
    }
    if phi.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("frailty vector contains non-finite values".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowScore {
    /// Index into the window set.
    pub window: usize,
    pub center: usize,
    pub n_units: usize,
    pub n_individuals: usize,
    pub alpha_w_hat: f64,
    pub alpha_wc_hat: f64,
    pub sigma2_w_hat: f64,
    /// `+inf` when the alternative fits the frailties exactly.
    pub llr: f64,
    pub degenerate: bool,
}

impl WindowScore {
    /// +1 when the window has the higher frailty (shorter survival).
    pub fn direction(&self) -> f64 {
        (self.alpha_w_hat - self.alpha_wc_hat).signum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NullParams {
    pub alpha_hat: f64,
    pub sigma2_0_hat: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScanResult {
    pub lambda: f64,
    pub mlc: WindowScore,
    pub secondaries: Vec<WindowScore>,
    pub null_params: NullParams,
    /// Number of windows whose alternative fit was exact.
    pub n_degenerate: usize,
}

/// Which windows may be reported as secondary clusters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SecondaryRule {
    /// No unit shared with any previously kept cluster.
    #[default]
    Disjoint,
    /// Only the center must lie outside every previously kept cluster.
    CenterOutside,
}

#[derive(Debug, Clone)]
pub struct GaussianScanInput<'a> {
    pub phi_star: &'a [f64],
    /// Leroux matrix `A` at the selected ρ*.
    pub a: &'a DMatrix<f64>,
    pub windows: &'a WindowSet,
    /// Unit ids, used to break LLR ties by center id.
    pub unit_ids: &'a [String],
}

/// Data-independent quantities for scanning many frailty vectors with the
/// same precision matrix and window set.
#[derive(Debug, Clone)]
pub struct ScanPlan<'a> {
    a: DMatrix<f64>,
    q11: f64,
    windows: &'a WindowSet,
    unit_ids: &'a [String],
    qww: Vec<f64>,
    qw1: Vec<f64>,
    pub secondary_rule: SecondaryRule,
    pub max_secondaries: usize,
}

impl<'a> ScanPlan<'a> {
    pub fn new(a: &DMatrix<f64>, windows: &'a WindowSet, unit_ids: &'a [String]) -> Result<Self> {
        let k = a.nrows();
        if a.ncols() != k || windows.n_units() != k || unit_ids.len() != k {
            return Err(Error::validation(
                "precision matrix, window set and unit ids disagree on the unit count",
            ));
        }
        if windows.is_empty() {
            return Err(Error::validation("the candidate window set is empty"));
        }
        if let Some(w) = windows.windows().iter().find(|w| w.is_empty() || w.len() >= k) {
            return Err(Error::validation(format!(
                "window centred on {} is not a strict non-empty subset of the units",
                unit_ids[w.center]
            )));
        }
        let a1: Vec<f64> = (0..k).map(|i| a.row(i).sum()).collect();
        let q11 = a1.iter().sum();
        let mut qww = vec![0.0; windows.len()];
        let mut qw1 = vec![0.0; windows.len()];
        for (center, range) in windows.center_groups() {
            let order = windows.order(center);
            // A·1_w maintained as units join the window
            let mut a_w = vec![0.0; k];
            let (mut sww, mut sw1) = (0.0, 0.0);
            let mut added = 0;
            for wi in range {
                let target = windows.windows()[wi].len();
                while added < target {
                    let u = order[added];
                    sww += 2.0 * a_w[u] + a[(u, u)];
                    sw1 += a1[u];
                    for (i, v) in a_w.iter_mut().enumerate() {
                        *v += a[(i, u)];
                    }
                    added += 1;
                }
                qww[wi] = sww;
                qw1[wi] = sw1;
            }
        }
        Ok(ScanPlan {
            a: a.clone(),
            q11,
            windows,
            unit_ids,
            qww,
            qw1,
            secondary_rule: SecondaryRule::default(),
            max_secondaries: 10,
        })
    }

    pub fn windows(&self) -> &WindowSet {
        self.windows
    }

    fn moments(&self, phi: &[f64]) -> Result<(DVector<f64>, f64, f64, f64)> {
        check_dims(phi, &self.a)?;
        let p = DVector::from_column_slice(phi);
        let ap = &self.a * &p;
        let s = p.dot(&ap);
        let t1: f64 = ap.iter().sum();
        let alpha = t1 / self.q11;
        let ss0 = s - alpha * t1;
        if ss0 <= DEGENERATE_RTOL * s.abs().max(f64::MIN_POSITIVE) {
            return Err(Error::DegenerateField(
                "null variance estimate is zero (constant frailty field)".into(),
            ));
        }
        Ok((ap, t1, alpha, ss0))
    }

    /// Calls `visit(window, tw)` with `tw = 1_wᵀAφ` for every window.
    fn for_each_window(&self, ap: &DVector<f64>, mut visit: impl FnMut(usize, f64)) {
        for (center, range) in self.windows.center_groups() {
            let order = self.windows.order(center);
            let mut tw = 0.0;
            let mut added = 0;
            for wi in range {
                let target = self.windows.windows()[wi].len();
                while added < target {
                    tw += ap[order[added]];
                    added += 1;
                }
                visit(wi, tw);
            }
        }
    }

    /// Share of the null residual sum of squares explained by the window.
    fn explained(&self, wi: usize, tw: f64, alpha: f64, ss0: f64) -> f64 {
        let (qww, qw1) = (self.qww[wi], self.qw1[wi]);
        let schur = qww - qw1 * qw1 / self.q11;
        let num = tw - alpha * qw1;
        (num * num / schur / ss0).clamp(0.0, 1.0)
    }

    fn llr_from_share(&self, share: f64) -> (f64, bool) {
        if share >= 1.0 - DEGENERATE_RTOL {
            (f64::INFINITY, true)
        } else {
            (-0.5 * self.a.nrows() as f64 * (-share).ln_1p(), false)
        }
    }

    /// The scan statistic Λ alone.
    pub fn lambda(&self, phi: &[f64]) -> Result<f64> {
        let (ap, _, alpha, ss0) = self.moments(phi)?;
        let mut best: f64 = 0.0;
        self.for_each_window(&ap, |wi, tw| best = best.max(self.explained(wi, tw, alpha, ss0)));
        Ok(self.llr_from_share(best).0)
    }

    /// Every window's score, in window order.
    pub fn scores(&self, phi: &[f64]) -> Result<(NullParams, Vec<WindowScore>)> {
        let (ap, t1, alpha, ss0) = self.moments(phi)?;
        let k = self.a.nrows() as f64;
        let mut out = Vec::with_capacity(self.windows.len());
        self.for_each_window(&ap, |wi, tw| {
            let w = &self.windows.windows()[wi];
            let share = self.explained(wi, tw, alpha, ss0);
            let (llr, degenerate) = self.llr_from_share(share);
            let (qww, qw1) = (self.qww[wi], self.qw1[wi]);
            let qwc = qw1 - qww;
            let qcc = self.q11 - 2.0 * qw1 + qww;
            let det = qww * qcc - qwc * qwc;
            let bc = t1 - tw;
            out.push(WindowScore {
                window: wi,
                center: w.center,
                n_units: w.len(),
                n_individuals: w.n_individuals,
                alpha_w_hat: (qcc * tw - qwc * bc) / det,
                alpha_wc_hat: (qww * bc - qwc * tw) / det,
                sigma2_w_hat: if degenerate { 0.0 } else { ss0 * (1.0 - share) / k },
                llr,
                degenerate,
            });
        });
        Ok((
            NullParams {
                alpha_hat: alpha,
                sigma2_0_hat: ss0 / k,
            },
            out,
        ))
    }

    /// Orders by decreasing LLR, then fewer units, then center id, then window index.
    fn rank(&self, a: &WindowScore, b: &WindowScore) -> std::cmp::Ordering {
        b.llr
            .total_cmp(&a.llr)
            .then(a.n_units.cmp(&b.n_units))
            .then_with(|| self.unit_ids[a.center].cmp(&self.unit_ids[b.center]))
            .then(a.window.cmp(&b.window))
    }

    pub fn scan(&self, phi: &[f64]) -> Result<ScanResult> {
        let (null_params, mut scores) = self.scores(phi)?;
        let n_degenerate = scores.iter().filter(|s| s.degenerate).count();
        scores.sort_by(|a, b| self.rank(a, b));
        let mlc = scores[0].clone();
        let k = self.a.nrows();
        let mut covered = vec![false; k];
        for &u in &self.windows.windows()[mlc.window].members {
            covered[u] = true;
        }
        let mut secondaries = Vec::new();
        for s in &scores[1..] {
            if secondaries.len() >= self.max_secondaries {
                break;
            }
            if !(s.llr > 0.0) {
                break;
            }
            let members = &self.windows.windows()[s.window].members;
            let free = match self.secondary_rule {
                SecondaryRule::Disjoint => members.iter().all(|&u| !covered[u]),
                SecondaryRule::CenterOutside => !covered[s.center],
            };
            if free {
                for &u in members {
                    covered[u] = true;
                }
                secondaries.push(s.clone());
            }
        }
        Ok(ScanResult {
            lambda: mlc.llr,
            mlc,
            secondaries,
            null_params,
            n_degenerate,
        })
    }
}

/// Scores every window and reports Λ, the most likely cluster and the
/// unit-disjoint secondary clusters.
pub fn scan_all(input: &GaussianScanInput<'_>) -> Result<ScanResult> {
    ScanPlan::new(input.a, input.windows, input.unit_ids)?.scan(input.phi_star)
}
