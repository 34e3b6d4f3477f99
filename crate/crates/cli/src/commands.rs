use std::path::Path;

use serde::Serialize;
use serde_json::json;

use frailscan::baselines::{
    adjust_covariates, cluster_hazard_ratio, exponential_scan, logrank_scan, AdjustMethod, BaselineMethod, BaselineOptions,
    BaselineScanResult, RegressionFit,
};
use frailscan::frailty::{BfEntry, FrailtySelection, SpatialModel, Winner};
use frailscan::inference::SignificanceReport;
use frailscan::pipeline::{run_two_stage, TwoStageOptions};
use frailscan::report::{baseline_clusters, clusters_geojson, two_stage_clusters, write_json, ReportedCluster};
use frailscan::scan::{ScanResult, SecondaryRule};
use frailscan::simulation::{run_experiment, Method, SimulationConfig, Study};
use frailscan::spatial::StudyRegion;
use frailscan::survdata::{ingest_individuals, SurvivalDataset};
use frailscan::Error;

use crate::manifest::ManifestBuilder;
use crate::{BaselineArgs, Common, Failure, Inputs, ScanArgs, SimulateArgs, Tag};

type Outcome = Result<(), Failure>;

fn load(inputs: &Inputs) -> Result<(StudyRegion, SurvivalDataset), Failure> {
    for (tag, path) in [("units", &inputs.units), ("adjacency", &inputs.adjacency), ("individuals", &inputs.individuals)] {
        if !path.is_file() {
            return Err(Failure {
                tag,
                error: Error::validation(format!("{} is not a readable file", path.display())),
            });
        }
    }
    let region = StudyRegion::read(&inputs.units, &inputs.adjacency).tag("region")?;
    let dataset = ingest_individuals(&inputs.individuals, &region).tag("individuals")?;
    Ok((region, dataset))
}

fn prepare_out(out: &Path) -> Outcome {
    std::fs::create_dir_all(out)
        .map_err(|source| Error::Io {
            path: out.display().to_string(),
            source,
        })
        .tag("out")
}

fn parse<T: std::str::FromStr<Err = Error>>(value: &str, tag: &'static str) -> Result<T, Failure> {
    value.parse().tag(tag)
}

fn attach_hazard_ratios(dataset: &SurvivalDataset, clusters: &mut [ReportedCluster]) {
    for c in clusters.iter_mut() {
        match cluster_hazard_ratio(dataset, c.members()) {
            Ok(hr) => c.hazard_ratio = Some(hr),
            Err(e) => log::warn!("hazard ratio for {}: {e}", c.role),
        }
    }
}

#[derive(Serialize)]
struct SelectionSummary<'a> {
    winner: &'a Winner,
    rho_star: f64,
    rho_null: f64,
    alpha_hat_wstar: Option<f64>,
    beta_hat: &'a [f64],
    bf_threshold: f64,
    max_exact_log_bf: Option<f64>,
    /// Highest-ranked windows of the Bayes-factor ledger.
    top_windows: &'a [BfEntry],
    phi_star: &'a [f64],
}

impl<'a> SelectionSummary<'a> {
    fn new(s: &'a FrailtySelection) -> Self {
        SelectionSummary {
            winner: &s.winner,
            rho_star: s.rho_star,
            rho_null: s.rho_null,
            alpha_hat_wstar: s.alpha_hat_wstar,
            beta_hat: &s.beta_hat,
            bf_threshold: s.bf_threshold,
            max_exact_log_bf: s.max_exact_log_bf().map(|(_, v)| v),
            top_windows: &s.bf_ledger[..s.bf_ledger.len().min(10)],
            phi_star: &s.phi_star,
        }
    }
}

#[derive(Serialize)]
struct SignificanceSummary {
    lambda_obs: f64,
    p_mlc: f64,
    p_secondaries: Vec<f64>,
    replicates: usize,
    seed: u64,
    resampled: usize,
}

impl From<&SignificanceReport> for SignificanceSummary {
    fn from(r: &SignificanceReport) -> Self {
        SignificanceSummary {
            lambda_obs: r.lambda_obs,
            p_mlc: r.p_mlc,
            p_secondaries: r.p_secondaries.clone(),
            replicates: r.replicates,
            seed: r.seed,
            resampled: r.resampled,
        }
    }
}

#[derive(Serialize)]
struct ScanDocument<'a> {
    command: &'static str,
    model: SpatialModel,
    clusters: &'a [ReportedCluster],
    scan: &'a ScanResult,
    significance: SignificanceSummary,
    selection: SelectionSummary<'a>,
}

pub fn scan(args: &ScanArgs) -> Outcome {
    let c = &args.common;
    let model: SpatialModel = parse(c.model.as_deref().unwrap_or("car"), "model")?;
    let secondary_rule = match args.secondary_rule.as_str() {
        "disjoint" => SecondaryRule::Disjoint,
        "center-outside" => SecondaryRule::CenterOutside,
        other => {
            return Err(Failure {
                tag: "secondary-rule",
                error: Error::validation(format!("unknown secondary rule {other}")),
            })
        }
    };
    let options = TwoStageOptions {
        model,
        bf_threshold: c.bf_threshold.unwrap_or(30.0),
        mc_replicates: c.replicates(),
        seed: c.seed(),
        secondary_rule,
        ..Default::default()
    };
    let mut manifest = ManifestBuilder::start("scan", serde_json::to_value(&options).expect("options serialize"), c.seed());
    manifest.input("units", &args.inputs.units);
    manifest.input("adjacency", &args.inputs.adjacency);
    manifest.input("individuals", &args.inputs.individuals);

    let (region, dataset) = load(&args.inputs)?;
    prepare_out(&c.out)?;
    let (windows, result) = run_two_stage(&dataset, &region, &options).tag("scan")?;
    let mut clusters = two_stage_clusters(&region, &windows, &result);
    attach_hazard_ratios(&dataset, &mut clusters);

    let doc = ScanDocument {
        command: "scan",
        model,
        clusters: &clusters,
        scan: &result.scan,
        significance: SignificanceSummary::from(&result.significance),
        selection: SelectionSummary::new(&result.selection),
    };
    let mut outputs = vec!["result.json", "clusters.geojson"];
    write_json(&c.out.join("result.json"), &doc).tag("out")?;
    write_json(&c.out.join("clusters.geojson"), &clusters_geojson(&region, &clusters)).tag("out")?;
    if c.diagnostics {
        result.significance.write_null_csv(&c.out.join("null_lambda.csv")).tag("out")?;
        write_json(&c.out.join("bf_ledger.json"), &result.selection.bf_ledger).tag("out")?;
        outputs.extend(["null_lambda.csv", "bf_ledger.json"]);
    }
    manifest.finish(&c.out, &outputs).tag("out")?;
    log::info!(
        "MLC {} units, LLR {:.4}, p = {:.4}",
        clusters[0].unit_ids.len(),
        clusters[0].statistic,
        clusters[0].p_value
    );
    Ok(())
}

#[derive(Serialize)]
struct BaselineDocument<'a> {
    command: &'static str,
    method: BaselineMethod,
    clusters: &'a [ReportedCluster],
    statistic: f64,
    p_value: f64,
    permutations: usize,
    seed: u64,
    adjustment: Option<AdjustmentSummary<'a>>,
}

#[derive(Serialize)]
struct AdjustmentSummary<'a> {
    method: AdjustMethod,
    fit: &'a RegressionFit,
}

pub fn baseline(args: &BaselineArgs) -> Outcome {
    let c = &args.common;
    let method: BaselineMethod = parse(&args.method, "method")?;
    let config = json!({
        "method": method,
        "permutations": c.replicates(),
        "seed": c.seed(),
        "adjust": !args.no_adjust,
    });
    let mut manifest = ManifestBuilder::start("baseline", config, c.seed());
    manifest.input("units", &args.inputs.units);
    manifest.input("adjacency", &args.inputs.adjacency);
    manifest.input("individuals", &args.inputs.individuals);

    let (region, dataset) = load(&args.inputs)?;
    prepare_out(&c.out)?;
    let windows = frailscan::spatial::enumerate_windows(&region, &dataset.unit_counts()).tag("windows")?;
    let mut opts = BaselineOptions::new(c.replicates(), c.seed());
    let adjustment = if dataset.n_covariates() > 0 && !args.no_adjust {
        let how = match method {
            BaselineMethod::Exponential => AdjustMethod::Exponential,
            BaselineMethod::Logrank => AdjustMethod::Cox,
        };
        Some(adjust_covariates(&dataset, how).tag("adjustment")?)
    } else {
        None
    };
    let scanned = adjustment.as_ref().and_then(|a| a.adjusted.as_ref()).unwrap_or(&dataset);
    opts.offsets = adjustment.as_ref().and_then(|a| a.offsets.clone());
    let result: BaselineScanResult = match method {
        BaselineMethod::Exponential => exponential_scan(scanned, &windows, &opts),
        BaselineMethod::Logrank => logrank_scan(scanned, &windows, &opts),
    }
    .tag("baseline")?;
    let mut clusters = baseline_clusters(&region, &windows, &result);
    attach_hazard_ratios(&dataset, &mut clusters);

    let doc = BaselineDocument {
        command: "baseline",
        method,
        clusters: &clusters,
        statistic: result.statistic,
        p_value: result.p_value,
        permutations: result.permutations,
        seed: result.seed,
        adjustment: adjustment.as_ref().map(|a| AdjustmentSummary {
            method: a.method,
            fit: &a.fit,
        }),
    };
    write_json(&c.out.join("result.json"), &doc).tag("out")?;
    write_json(&c.out.join("clusters.geojson"), &clusters_geojson(&region, &clusters)).tag("out")?;
    manifest.finish(&c.out, &["result.json", "clusters.geojson"]).tag("out")?;
    Ok(())
}

pub fn simulate(args: &SimulateArgs) -> Outcome {
    let c: &Common = &args.common;
    let mut config = match (&args.config, &args.study) {
        (Some(path), _) => SimulationConfig::read(path).tag("config")?,
        (None, Some(study)) => SimulationConfig::preset(parse::<Study>(study, "study")?, c.paper_scale),
        (None, None) => {
            return Err(Failure {
                tag: "config",
                error: Error::validation("pass --config or --study"),
            })
        }
    };
    if let Some(n) = args.replicates {
        config.replicates = n;
    }
    if let Some(m) = c.mc_replicates {
        config.mc_replicates = m;
    }
    if let Some(b) = c.bf_threshold {
        config.bf_threshold = vec![b];
    }
    if let Some(m) = &c.model {
        config.methods = vec![parse::<Method>(m, "model")?];
    }
    if let Some(seed) = c.seed {
        config.seed = seed;
    }
    config.validate().tag("config")?;

    let mut manifest = ManifestBuilder::start("simulate", serde_json::to_value(&config).expect("config serializes"), config.seed);
    if let Some(path) = &args.config {
        manifest.input("config", path);
    }
    prepare_out(&c.out)?;
    let report = run_experiment(&config).tag("simulate")?;
    report.write_csv(&c.out.join("metrics.csv")).tag("out")?;
    report.write_json(&c.out.join("metrics.json")).tag("out")?;
    manifest.finish(&c.out, &["metrics.csv", "metrics.json"]).tag("out")?;
    Ok(())
}
