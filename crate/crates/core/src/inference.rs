//! Monte Carlo significance for the Gaussian scan.
//!
//! Null frailty fields are drawn from `N(α̂·1, σ̂²(0)A⁻¹)` and rescanned with
//! the same windows and precision matrix. Each replicate has its own random
//! stream derived from the seed and the replicate index, so results do not
//! depend on the thread count.

use std::io::Write;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::scan::{ScanPlan, ScanResult};

/// Stream offset used for the single resampling of a degenerate replicate.
const RESAMPLE_STREAM: u64 = 1 << 62;

#[derive(Debug, Clone)]
pub struct NullGenerator {
    alpha_hat: f64,
    sigma2_0_hat: f64,
    /// `Lᵀ` for `A = LLᵀ`.
    upper: DMatrix<f64>,
    seed: u64,
}

impl NullGenerator {
    pub fn new(alpha_hat: f64, sigma2_0_hat: f64, a: &DMatrix<f64>, seed: u64) -> Result<Self> {
        if !(sigma2_0_hat >= 0.0) || !alpha_hat.is_finite() || !sigma2_0_hat.is_finite() {
            return Err(Error::validation("null generator needs a finite mean and a nonnegative variance"));
        }
        let chol = Cholesky::new(a.clone())
            .ok_or_else(|| Error::Numerical("precision matrix is not positive definite".into()))?;
        Ok(NullGenerator {
            alpha_hat,
            sigma2_0_hat,
            upper: chol.l().transpose(),
            seed,
        })
    }

    pub fn dim(&self) -> usize {
        self.upper.nrows()
    }

    /// `α̂·1 + √σ̂² L⁻ᵀz` with `A = LLᵀ` and `z` standard normal.
    pub fn sample(&self, replicate: u64) -> Vec<f64> {
        self.sample_stream(replicate)
    }

    fn sample_stream(&self, stream: u64) -> Vec<f64> {
        let mut rng = stream_rng(self.seed, stream);
        let k = self.dim();
        let z = DVector::from_iterator(k, (0..k).map(|_| StandardNormal.sample(&mut rng)));
        let x = self
            .upper
            .solve_upper_triangular(&z)
            .expect("Cholesky factor has a positive diagonal");
        let scale = self.sigma2_0_hat.sqrt();
        x.iter().map(|v| self.alpha_hat + scale * v).collect()
    }
}

/// Draw for one replicate; see [`NullGenerator::sample`].
pub fn sample_gmrf(generator: &NullGenerator, replicate_index: u64) -> Vec<f64> {
    generator.sample(replicate_index)
}

/// `(1 + #{null ≥ observed}) / (M + 1)`.
pub fn p_value(observed: f64, null: &[f64]) -> f64 {
    let exceed = null.iter().filter(|&&v| v >= observed).count();
    (1 + exceed) as f64 / (null.len() + 1) as f64
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SignificanceReport {
    pub lambda_obs: f64,
    pub null_lambdas: Vec<f64>,
    pub p_mlc: f64,
    /// One per secondary cluster, each compared with the null Λ distribution.
    pub p_secondaries: Vec<f64>,
    pub replicates: usize,
    pub seed: u64,
    /// Replicates whose first draw was degenerate and had to be redrawn.
    pub resampled: usize,
}

impl SignificanceReport {
    pub fn write_null_csv(&self, path: &Path) -> Result<()> {
        let io_err = |source| Error::Io {
            path: path.display().to_string(),
            source,
        };
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
        writeln!(f, "replicate,lambda").map_err(io_err)?;
        for (i, l) in self.null_lambdas.iter().enumerate() {
            writeln!(f, "{i},{l}").map_err(io_err)?;
        }
        f.flush().map_err(io_err)
    }
}

/// Null Λ values for replicates `0..m`, in replicate order.
pub fn null_lambdas(plan: &ScanPlan<'_>, generator: &NullGenerator, m: usize) -> Result<(Vec<f64>, usize)> {
    let draws: Vec<Result<(f64, bool)>> = (0..m as u64)
        .into_par_iter()
        .map(|rep| match plan.lambda(&generator.sample(rep)) {
            Ok(l) => Ok((l, false)),
            Err(Error::DegenerateField(_)) => plan
                .lambda(&generator.sample_stream(rep | RESAMPLE_STREAM))
                .map(|l| (l, true))
                .map_err(|_| Error::DegenerateField(format!("null replicate {rep} is degenerate twice"))),
            Err(e) => Err(e),
        })
        .collect();
    let mut out = Vec::with_capacity(m);
    let mut resampled = 0;
    for d in draws {
        let (l, redrawn) = d?;
        resampled += redrawn as usize;
        out.push(l);
    }
    Ok((out, resampled))
}

/// Monte Carlo p-values for the most likely cluster and the secondaries.
pub fn monte_carlo_pvalue(plan: &ScanPlan<'_>, a: &DMatrix<f64>, result: &ScanResult, m: usize, seed: u64) -> Result<SignificanceReport> {
    if m == 0 {
        return Err(Error::validation("at least one Monte Carlo replicate is required"));
    }
    let generator = NullGenerator::new(result.null_params.alpha_hat, result.null_params.sigma2_0_hat, a, seed)?;
    let (null, resampled) = null_lambdas(plan, &generator, m)?;
    Ok(SignificanceReport {
        lambda_obs: result.lambda,
        p_mlc: p_value(result.lambda, &null),
        p_secondaries: result.secondaries.iter().map(|s| p_value(s.llr, &null)).collect(),
        null_lambdas: null,
        replicates: m,
        seed,
        resampled,
    })
}
