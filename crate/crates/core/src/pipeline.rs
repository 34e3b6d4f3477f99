//! The two-stage detection run end to end on one dataset: frailty selection,
//! Gaussian scan of the selected frailties, and Monte Carlo significance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frailty::{select_frailties, FrailtySelection, PriorSpec, SelectionOptions, SpatialModel};
use crate::inference::{monte_carlo_pvalue, SignificanceReport};
use crate::rng::{derive_seed, label_salt};
use crate::scan::{ScanPlan, ScanResult, SecondaryRule};
use crate::spatial::{build_neighbor_matrix, enumerate_windows, PrecisionModel, StudyRegion, WindowSet};
use crate::survdata::{build_grid, SurvivalDataset};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TwoStageOptions {
    pub model: SpatialModel,
    pub bf_threshold: f64,
    pub mc_replicates: usize,
    pub seed: u64,
    pub secondary_rule: SecondaryRule,
    pub max_secondaries: usize,
    pub priors: PriorSpec,
}

impl Default for TwoStageOptions {
    fn default() -> Self {
        TwoStageOptions {
            model: SpatialModel::Car,
            bf_threshold: 30.0,
            mc_replicates: 999,
            seed: 1,
            secondary_rule: SecondaryRule::Disjoint,
            max_secondaries: 10,
            priors: PriorSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TwoStageResult {
    pub selection: FrailtySelection,
    pub scan: ScanResult,
    pub significance: SignificanceReport,
}

impl TwoStageResult {
    /// Units of the most likely cluster.
    pub fn mlc_members<'w>(&self, windows: &'w WindowSet) -> &'w [usize] {
        &windows.windows()[self.scan.mlc.window].members
    }
}

/// Runs both stages with windows built from the dataset's unit counts.
pub fn run_two_stage(dataset: &SurvivalDataset, region: &StudyRegion, options: &TwoStageOptions) -> Result<(WindowSet, TwoStageResult)> {
    let windows = enumerate_windows(region, &dataset.unit_counts())?;
    let result = run_two_stage_with(dataset, region, &windows, options)?;
    Ok((windows, result))
}

pub fn run_two_stage_with(
    dataset: &SurvivalDataset,
    region: &StudyRegion,
    windows: &WindowSet,
    options: &TwoStageOptions,
) -> Result<TwoStageResult> {
    if options.mc_replicates == 0 {
        return Err(Error::validation("at least one Monte Carlo replicate is required"));
    }
    let grid = build_grid(dataset)?;
    let selection = select_frailties(
        dataset,
        region,
        &grid,
        &options.priors,
        windows,
        &SelectionOptions {
            bf_threshold: options.bf_threshold,
            model: options.model,
            ..Default::default()
        },
    )?;
    let r = build_neighbor_matrix(region);
    let rho = options.model.fixed_rho().unwrap_or(selection.rho_star);
    let precision = PrecisionModel::leroux(&r, rho, 1.0)?;
    let mut plan = ScanPlan::new(precision.a(), windows, dataset.unit_ids())?;
    plan.secondary_rule = options.secondary_rule;
    plan.max_secondaries = options.max_secondaries;
    let scan = plan.scan(&selection.phi_star)?;
    let mc_seed = derive_seed(options.seed, label_salt("monte-carlo"));
    let significance = monte_carlo_pvalue(&plan, precision.a(), &scan, options.mc_replicates, mc_seed)?;
    Ok(TwoStageResult {
        selection,
        scan,
        significance,
    })
}
