//! Derivative-free maximization of the exact Gaussian log-likelihood
//! `-K/2 ln σ² - (φ-μ)ᵀA(φ-μ)/(2σ²)`, with μ piecewise constant on a window
//! and its complement. Objective values are carried in double-double
//! arithmetic so the simplex can resolve the optimum far below the usual
//! square-root-of-epsilon limit.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dd {
    hi: f64,
    lo: f64,
}

fn two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    let bb = s - a;
    let err = (a - (s - bb)) + (b - bb);
    Dd { hi: s, lo: err }
}

fn quick_two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    Dd { hi: s, lo: b - (s - a) }
}

fn two_prod(a: f64, b: f64) -> Dd {
    let p = a * b;
    Dd { hi: p, lo: a.mul_add(b, -p) }
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };

    pub fn from(a: f64) -> Dd {
        Dd { hi: a, lo: 0.0 }
    }

    pub fn add(self, o: Dd) -> Dd {
        let s = two_sum(self.hi, o.hi);
        let t = two_sum(self.lo, o.lo);
        let s = quick_two_sum(s.hi, s.lo + t.hi);
        quick_two_sum(s.hi, s.lo + t.lo)
    }

    pub fn neg(self) -> Dd {
        Dd { hi: -self.hi, lo: -self.lo }
    }

    pub fn sub(self, o: Dd) -> Dd {
        self.add(o.neg())
    }

    pub fn mul(self, o: Dd) -> Dd {
        let p = two_prod(self.hi, o.hi);
        quick_two_sum(p.hi, p.lo + (self.hi * o.lo + self.lo * o.hi))
    }

    pub fn mul_f(self, b: f64) -> Dd {
        let p = two_prod(self.hi, b);
        quick_two_sum(p.hi, p.lo + self.lo * b)
    }

    pub fn less(self, o: Dd) -> bool {
        self.hi < o.hi || (self.hi == o.hi && self.lo < o.lo)
    }

    pub fn value(self) -> f64 {
        self.hi + self.lo
    }
}

/// `(φ-μ)ᵀA(φ-μ)` in double-double.
fn quad_form(phi: &[f64], mu: &[f64], a: &[Vec<f64>]) -> Dd {
    let r: Vec<Dd> = phi.iter().zip(mu).map(|(&p, &m)| two_sum(p, -m)).collect();
    let mut acc = Dd::ZERO;
    for i in 0..phi.len() {
        let mut row = Dd::ZERO;
        for j in 0..phi.len() {
            if a[i][j] != 0.0 {
                row = row.add(r[j].mul_f(a[i][j]));
            }
        }
        acc = acc.add(row.mul(r[i]));
    }
    acc
}

/// Nelder-Mead maximization of a double-double objective, restarted until a
/// restart no longer improves the best point.
pub fn maximize(f: &dyn Fn(&[f64]) -> Dd, start: &[f64], step: f64) -> Vec<f64> {
    let n = start.len();
    let mut best = start.to_vec();
    let mut best_val = f(&best);
    let mut scale = step;
    for _restart in 0..40 {
        let mut simplex: Vec<(Vec<f64>, Dd)> = vec![(best.clone(), best_val)];
        for i in 0..n {
            let mut x = best.clone();
            x[i] += scale;
            let v = f(&x);
            simplex.push((x, v));
        }
        for _ in 0..20_000 {
            // descending by value
            simplex.sort_by(|a, b| {
                if b.1.less(a.1) {
                    std::cmp::Ordering::Less
                } else if a.1.less(b.1) {
                    std::cmp::Ordering::Greater
                } else {
                    std::cmp::Ordering::Equal
                }
            });
            let diameter = simplex[1..]
                .iter()
                .map(|(x, _)| x.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
                .fold(0.0, f64::max);
            if diameter < 1e-15 {
                break;
            }
            let centroid: Vec<f64> = (0..n).map(|j| simplex[..n].iter().map(|(x, _)| x[j]).sum::<f64>() / n as f64).collect();
            let worst = simplex[n].clone();
            let along = |t: f64| -> Vec<f64> { centroid.iter().zip(&worst.0).map(|(c, w)| c + t * (c - w)).collect() };
            let xr = along(1.0);
            let vr = f(&xr);
            if simplex[0].1.less(vr) {
                let xe = along(2.0);
                let ve = f(&xe);
                simplex[n] = if vr.less(ve) { (xe, ve) } else { (xr, vr) };
            } else if simplex[n - 1].1.less(vr) {
                simplex[n] = (xr, vr);
            } else {
                let (xc, vc) = if worst.1.less(vr) {
                    let x = along(0.5);
                    let v = f(&x);
                    (x, v)
                } else {
                    let x = along(-0.5);
                    let v = f(&x);
                    (x, v)
                };
                if worst.1.less(vc) || (vr.less(vc) && !worst.1.less(vr)) {
                    simplex[n] = (xc, vc);
                } else {
                    let head = simplex[0].0.clone();
                    for item in simplex.iter_mut().skip(1) {
                        let x: Vec<f64> = item.0.iter().zip(&head).map(|(a, b)| b + 0.5 * (a - b)).collect();
                        let v = f(&x);
                        *item = (x, v);
                    }
                }
            }
        }
        let (x, v) = simplex
            .into_iter()
            .reduce(|a, b| if a.1.less(b.1) { b } else { a })
            .unwrap();
        let improved = best_val.less(v);
        if improved {
            best = x;
            best_val = v;
        }
        if !improved && scale < 1e-9 {
            break;
        }
        scale = (scale * 0.1).max(1e-12);
    }
    best
}

/// Means (window, complement) or a single mean, and σ², maximizing the
/// exact likelihood. `window` empty means the null model.
pub fn gaussian_mle(phi: &[f64], a: &[Vec<f64>], window: &[usize]) -> (Vec<f64>, f64) {
    let k = phi.len();
    let mut inside = vec![false; k];
    for &u in window {
        inside[u] = true;
    }
    let n_mean = if window.is_empty() { 1 } else { 2 };
    let mu_of = |m: &[f64]| -> Vec<f64> { (0..k).map(|i| if n_mean == 2 && inside[i] { m[0] } else { m[n_mean - 1] }).collect() };

    // crude pilot fixes the precision scale v0 so that the final search runs
    // with σ² near v0⁻¹ and the logarithm stays well conditioned
    let mean: f64 = phi.iter().sum::<f64>() / k as f64;
    let pilot_start: Vec<f64> = std::iter::repeat_n(mean, n_mean).chain([0.0]).collect();
    let pilot = maximize(
        &|x: &[f64]| {
            let q = quad_form(phi, &mu_of(&x[..n_mean]), a).value();
            Dd::from(-0.5 * k as f64 * x[n_mean] - 0.5 * q * (-x[n_mean]).exp())
        },
        &pilot_start,
        0.5,
    );
    let v0 = (-pilot[n_mean]).exp();
    let objective = |x: &[f64]| -> Dd {
        let u = x[n_mean];
        if u <= -1.0 {
            return Dd::from(f64::NEG_INFINITY);
        }
        let q = quad_form(phi, &mu_of(&x[..n_mean]), a);
        let scaled = q.mul(two_sum(1.0, u)).mul_f(0.5 * v0);
        Dd::from(0.5 * k as f64 * u.ln_1p()).sub(scaled)
    };
    let start: Vec<f64> = pilot[..n_mean].iter().copied().chain([0.0]).collect();
    let x = maximize(&objective, &start, 1e-3);
    let sigma2 = 1.0 / (v0 * (1.0 + x[n_mean]));
    (x[..n_mean].to_vec(), sigma2)
}
