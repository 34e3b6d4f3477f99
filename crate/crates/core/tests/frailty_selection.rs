use frailscan::frailty::{select_frailties, PriorSpec, SelectionOptions, Winner};
use frailscan::rng::stream_rng;
use frailscan::simulation::{generate_frailty_field, generate_survival_times};
use frailscan::spatial::{enumerate_windows, StudyRegion, WindowSet};
use frailscan::survdata::{build_grid, SurvivalDataset};

struct Case {
    region: StudyRegion,
    cluster: Vec<usize>,
    dataset: SurvivalDataset,
    windows: WindowSet,
}

/// 5×5 lattice, 10 individuals per unit, cluster = the 5-unit cross at the centre.
fn case(alpha: f64, seed: u64) -> Case {
    let region = StudyRegion::lattice(5, 5).unwrap();
    let mut cluster: Vec<usize> = ["r02c02", "r01c02", "r03c02", "r02c01", "r02c03"]
        .iter()
        .map(|id| region.index_of(id).unwrap())
        .collect();
    cluster.sort_unstable();
    // noise draws do not depend on α, so evidence can be compared across α
    let noise = generate_frailty_field(&region, &[], 0.0, 0.3, 0.05, &mut stream_rng(seed, 0)).unwrap();
    let mut field = noise;
    for &u in &cluster {
        field[u] += alpha;
    }
    let assignments: Vec<usize> = (0..region.len()).flat_map(|u| std::iter::repeat_n(u, 10)).collect();
    let ids: Vec<String> = region.units().iter().map(|u| u.id.clone()).collect();
    let dataset = generate_survival_times(&field, &assignments, &ids, &mut stream_rng(seed, 1)).unwrap();
    let windows = enumerate_windows(&region, &dataset.unit_counts()).unwrap();
    Case { region, cluster, dataset, windows }
}

fn planted_window(c: &Case) -> usize {
    c.windows
        .windows()
        .iter()
        .position(|w| {
            let mut m = w.members.clone();
            m.sort_unstable();
            m == c.cluster
        })
        .expect("the cross is a candidate window")
}

fn planted_log_bf(c: &Case) -> f64 {
    let grid = build_grid(&c.dataset).unwrap();
    let target = planted_window(c);
    let opts = SelectionOptions { max_refine: c.windows.len(), min_refine: c.windows.len(), ..Default::default() };
    let s = select_frailties(&c.dataset, &c.region, &grid, &PriorSpec::default(), &c.windows.subset(&[target]), &opts).unwrap();
    s.bf_ledger[0].log_bf
}

#[test]
fn strong_cluster_is_selected_in_most_datasets() {
    let mut selected = 0;
    for seed in 0..5 {
        let c = case(2.0, seed);
        let grid = build_grid(&c.dataset).unwrap();
        let s = select_frailties(&c.dataset, &c.region, &grid, &PriorSpec::default(), &c.windows, &SelectionOptions::default()).unwrap();
        if let Winner::H1 { window } = s.winner {
            let members = &c.windows.windows()[window].members;
            let hits = members.iter().filter(|u| c.cluster.contains(u)).count();
            if hits * 2 > c.cluster.len() && s.max_exact_log_bf().unwrap().1 > 30f64.ln() {
                selected += 1;
            }
        }
    }
    assert!(selected >= 4, "cluster model kept in {selected} of 5 datasets");
}

#[test]
fn null_data_keep_the_null_model() {
    let mut kept = 0;
    for seed in 10..15 {
        let c = case(0.0, seed);
        let grid = build_grid(&c.dataset).unwrap();
        let s = select_frailties(&c.dataset, &c.region, &grid, &PriorSpec::default(), &c.windows, &SelectionOptions::default()).unwrap();
        kept += matches!(s.winner, Winner::H0) as usize;
    }
    assert!(kept >= 4, "null kept in {kept} of 5 datasets");
}

#[test]
fn evidence_grows_with_the_effect() {
    let values: Vec<f64> = [0.0, 1.0, 2.0, 3.0].iter().map(|&a| planted_log_bf(&case(a, 21))).collect();
    assert!(values.windows(2).all(|w| w[1] > w[0]), "{values:?}");
    assert!(values[0] < 30f64.ln());
    assert!(values[3] > 30f64.ln());
}
