//! Brute-force marginal likelihood for tiny two-unit, two-interval survival
//! toys. Written independently of the library's Laplace code: hyperparameters
//! are integrated on a trapezoid grid over (logit ρ, log κ = -log σ², log τ)
//! and the latent field at each grid point by Gauss-Hermite quadrature
//! centred and scaled at the latent mode.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use statrs::function::gamma::ln_gamma;

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone)]
pub struct Toy {
    pub unit: Vec<usize>,
    pub time: Vec<f64>,
    pub event: Vec<bool>,
    /// Interval boundaries `[0, cut, end]`.
    pub cuts: [f64; 3],
}

impl Toy {
    /// `per_unit` individuals per unit, exponential times with rate
    /// exp(φ_k)/2, the last individual of unit 1 censored at 80% of its time.
    pub fn simulate(seed: u64, phi: [f64; 2], per_unit: usize) -> Toy {
        let mut rng = frailscan::rng::stream_rng(seed, 77);
        let mut unit = Vec::new();
        let mut time = Vec::new();
        let mut event = Vec::new();
        for (k, p) in phi.iter().enumerate() {
            for j in 0..per_unit {
                let u: f64 = rng.random();
                let t = -2.0 * (1.0 - u).ln() * (-p).exp();
                let censored = k == 1 && j + 1 == per_unit;
                unit.push(k);
                time.push(if censored { 0.8 * t } else { t });
                event.push(!censored);
            }
        }
        let mut sorted = time.clone();
        sorted.sort_by(f64::total_cmp);
        Toy {
            unit,
            time,
            event,
            cuts: [0.0, sorted[per_unit - 1], sorted[2 * per_unit - 1]],
        }
    }

    /// Events and exposure per (unit, interval), in row order (k, I).
    fn design(&self) -> (DMatrix<f64>, Vec<f64>, Vec<f64>) {
        let mut d = vec![0.0; 4];
        let mut e = vec![0.0; 4];
        for i in 0..self.time.len() {
            let t = self.time[i];
            for iv in 0..2 {
                let (lo, hi) = (self.cuts[iv], self.cuts[iv + 1]);
                let at_risk = (t.min(hi) - lo).max(0.0);
                e[self.unit[i] * 2 + iv] += at_risk;
                if self.event[i] && t > lo && t <= hi {
                    d[self.unit[i] * 2 + iv] += 1.0;
                }
            }
        }
        // columns: c1, c2, X1, X2, alpha (unit 0)
        let mut dm = DMatrix::zeros(4, 5);
        for k in 0..2 {
            for iv in 0..2 {
                let row = k * 2 + iv;
                dm[(row, iv)] = 1.0;
                dm[(row, 2 + k)] = 1.0;
                if k == 0 {
                    dm[(row, 4)] = 1.0;
                }
            }
        }
        (dm, d, e)
    }
}

struct Model {
    design: DMatrix<f64>,
    events: Vec<f64>,
    exposure: Vec<f64>,
    dim: usize,
}

impl Model {
    fn new(toy: &Toy, cluster: bool) -> Model {
        let (dm, events, exposure) = toy.design();
        let dim = if cluster { 5 } else { 4 };
        Model {
            design: dm.columns(0, dim).into_owned(),
            events,
            exposure,
            dim,
        }
    }

    fn prior_precision(&self, rho: f64, kappa: f64, tau: f64) -> DMatrix<f64> {
        let mut q = DMatrix::zeros(self.dim, self.dim);
        q[(0, 0)] = 1e-3 + tau;
        q[(1, 1)] = tau;
        q[(0, 1)] = -tau;
        q[(1, 0)] = -tau;
        q[(2, 2)] = kappa;
        q[(3, 3)] = kappa;
        q[(2, 3)] = -rho * kappa;
        q[(3, 2)] = -rho * kappa;
        if self.dim == 5 {
            q[(4, 4)] = 1e-3;
        }
        q
    }

    /// log of likelihood times normalized Gaussian prior density.
    fn log_joint(&self, q: &DMatrix<f64>, log_det_q: f64, v: &DVector<f64>) -> f64 {
        let eta = &self.design * v;
        let mut ll = 0.0;
        for r in 0..4 {
            ll += self.events[r] * eta[r] - self.exposure[r] * eta[r].exp();
        }
        ll - 0.5 * self.dim as f64 * LN_2PI + 0.5 * log_det_q - 0.5 * v.dot(&(q * v))
    }

    fn objective(&self, q: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
        let eta = &self.design * v;
        (0..4)
            .map(|r| self.events[r] * eta[r] - self.exposure[r] * eta[r].exp())
            .sum::<f64>()
            - 0.5 * v.dot(&(q * v))
    }

    fn mode(&self, q: &DMatrix<f64>, start: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let mut v = start.clone();
        let mut f = self.objective(q, &v);
        for _ in 0..2000 {
            let eta = &self.design * &v;
            let mu: Vec<f64> = (0..4).map(|r| self.exposure[r] * eta[r].exp()).collect();
            let resid = DVector::from_fn(4, |r, _| self.events[r] - mu[r]);
            let grad = self.design.transpose() * resid - q * &v;
            let w = DMatrix::from_diagonal(&DVector::from_vec(mu));
            let h = self.design.transpose() * w * &self.design + q;
            let step = h.clone().cholesky().expect("negative Hessian is positive definite").solve(&grad);
            if grad.dot(&step) < 1e-10 * (1.0 + f.abs()) {
                return (v, h);
            }
            let mut t = 1.0;
            loop {
                let trial = &v + &step * t;
                let ft = self.objective(q, &trial);
                if ft >= f {
                    let stalled = ft - f <= 1e-14 * (1.0 + f.abs());
                    v = trial;
                    f = ft;
                    if stalled {
                        return (v, h);
                    }
                    break;
                }
                t *= 0.5;
                if t < 1e-10 {
                    // no further ascent at working precision
                    return (v, h);
                }
            }
        }
        panic!("oracle Newton iteration did not converge");
    }

}

/// Physicists' Gauss-Hermite nodes and weights by Golub-Welsch.
fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut j = DMatrix::zeros(n, n);
    for i in 1..n {
        let b = (i as f64 / 2.0).sqrt();
        j[(i, i - 1)] = b;
        j[(i - 1, i)] = b;
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], std::f64::consts::PI.sqrt() * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn log_gamma_density_of_log(u: f64, a: f64, b: f64) -> f64 {
    a * b.ln() - ln_gamma(a) + a * u - b * u.exp()
}

/// Marginal likelihood of the toy under H0 (`cluster = false`) or the
/// cluster model with unit 0 as the window.
pub fn log_marginal(toy: &Toy, cluster: bool, gh_points: usize) -> f64 {
    log_marginal_with(toy, cluster, gh_points, false)
}

/// With `laplace_inner` the latent integral at each hyper point uses the
/// Laplace approximation, isolating the error of the hyper integration.
pub fn log_marginal_with(toy: &Toy, cluster: bool, gh_points: usize, laplace_inner: bool) -> f64 {
    let model = Model::new(toy, cluster);
    let (nodes, weights) = gauss_hermite(gh_points);
    let n = model.dim;
    let (h_rho, h_log) = (0.5, 1.0);
    let grid = |lo: f64, hi: f64, step: f64| -> Vec<f64> {
        let m = ((hi - lo) / step).round() as usize;
        (0..=m).map(|i| lo + i as f64 * step).collect()
    };
    let g_rho = grid(-12.0, 12.0, h_rho);
    let g_kappa = grid(-16.0, 16.0, h_log);
    let g_tau = grid(-34.0, 16.0, h_log);

    // cell (unit, interval) -> latent columns, events, exposure
    let cells: Vec<([usize; 3], usize, f64, f64)> = (0..4)
        .map(|r| {
            let (k, iv) = (r / 2, r % 2);
            let cols = if k == 0 && cluster { [iv, 2, 4] } else { [iv, 2 + k, usize::MAX] };
            (cols, if cols[2] == usize::MAX { 2 } else { 3 }, model.events[r], model.exposure[r])
        })
        .collect();

    // every GH node as (log weight + |u|²/2, u)
    let total_nodes = gh_points.pow(n as u32);
    let mut grid_nodes: Vec<(f64, [f64; 5])> = Vec::with_capacity(total_nodes);
    let mut idx = vec![0usize; n];
    for _ in 0..total_nodes {
        let mut u = [0.0; 5];
        let mut lw = 0.0;
        for i in 0..n {
            u[i] = std::f64::consts::SQRT_2 * nodes[idx[i]];
            lw += weights[idx[i]].ln() + 0.5 * u[i] * u[i];
        }
        grid_nodes.push((lw, u));
        for slot in idx.iter_mut() {
            *slot += 1;
            if *slot < gh_points {
                break;
            }
            *slot = 0;
        }
    }

    let mut terms = Vec::new();
    for &lr in &g_rho {
        let rho = 1.0 / (1.0 + (-lr).exp());
        let lp_rho = rho.ln() + (1.0 - rho).ln();
        for &lk in &g_kappa {
            let mut warm = DVector::zeros(n);
            for &lt in &g_tau {
                let (kappa, tau) = (lk.exp(), lt.exp());
                let q = model.prior_precision(rho, kappa, tau);
                let log_det_q = q.clone().cholesky().unwrap().ln_determinant();
                let (v, h) = model.mode(&q, &warm);
                warm = v.clone();
                let chol = h.cholesky().unwrap();
                let log_det_h = chol.ln_determinant();
                let prior = lp_rho + log_gamma_density_of_log(lk, 1e-3, 1e-3) + log_gamma_density_of_log(lt, 1e-3, 1e-3);
                let lap = model.log_joint(&q, log_det_q, &v) + 0.5 * n as f64 * LN_2PI - 0.5 * log_det_h;
                let lap_total = if (lap + prior).is_nan() { f64::NEG_INFINITY } else { lap + prior };
                terms.push((lap_total, prior, q, log_det_q, v, chol));
            }
        }
    }
    let best = terms.iter().map(|t| t.0).fold(f64::NEG_INFINITY, f64::max);
    let mut logs = Vec::with_capacity(terms.len());
    let mut vals = vec![0.0; total_nodes];
    for (lap_total, prior, q, log_det_q, v, chol) in &terms {
        if laplace_inner || *lap_total < best - 14.0 {
            logs.push(*lap_total);
            continue;
        }
        let lt_inv = chol.l().transpose().try_inverse().unwrap();
        let mut m = [[0.0; 5]; 5];
        let mut qa = [[0.0; 5]; 5];
        let mut center = [0.0; 5];
        for i in 0..n {
            center[i] = v[i];
            for j in 0..n {
                m[i][j] = lt_inv[(i, j)];
                qa[i][j] = q[(i, j)];
            }
        }
        let constant = -0.5 * n as f64 * LN_2PI + 0.5 * log_det_q;
        for (slot, (lw, u)) in vals.iter_mut().zip(&grid_nodes) {
            let mut x = center;
            for i in 0..n {
                for j in i..n {
                    x[i] += m[i][j] * u[j];
                }
            }
            let mut lj = constant;
            for (cols, used, d, e) in &cells {
                let eta: f64 = cols[..*used].iter().map(|&c| x[c]).sum();
                lj += d * eta - e * eta.exp();
            }
            let mut quad = 0.0;
            for i in 0..n {
                for j in 0..n {
                    quad += x[i] * qa[i][j] * x[j];
                }
            }
            let value = lw + lj - 0.5 * quad;
            *slot = if value.is_nan() { f64::NEG_INFINITY } else { value };
        }
        let log_latent = 0.5 * n as f64 * 2f64.ln() - 0.5 * chol.ln_determinant() + log_sum_exp(&vals);
        logs.push(log_latent + prior);
    }
    log_sum_exp(&logs) + h_rho.ln() + 2.0 * h_log.ln()
}
