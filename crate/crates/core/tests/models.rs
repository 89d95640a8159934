use recapture::em::{fit_context, EmConfig};
use recapture::io::{ingest, write_events, write_subjects, IngestConfig};
use recapture::likelihood::LikContext;
use recapture::model::{Behavior, Dataset, ModelName};
use recapture::selection::{fit_submodel, grid_cells, grid_search, submodel_spec};
use recapture::simulator::{simulate, BaselineShape, CovariateGen, SimConfig};

fn config(n_true: usize, seed: u64) -> SimConfig {
    SimConfig {
        n_true,
        tau: 10.0,
        alpha: Some(1.5),
        beta: vec![0.5],
        covariates: vec![CovariateGen::Bernoulli {
            name: "x".into(),
            p: 0.4,
        }],
        phi: 0.6,
        c1: 1,
        c2: None,
        delta_b: None,
        baseline: BaselineShape::PiecewiseConstant {
            breaks: vec![4.0],
            rates: vec![0.1, 0.2],
        },
        seed,
    }
}

fn quick() -> EmConfig {
    EmConfig {
        information: false,
        ..EmConfig::default()
    }
}

fn loglik(data: &Dataset, name: &str, b: Option<Behavior>) -> f64 {
    let name: ModelName = name.parse().unwrap();
    let fit = fit_submodel(data, name, b, &quick()).unwrap();
    assert!(fit.converged, "{name} did not converge");
    fit.loglik
}

#[test]
fn lattice_logliks_increase_along_nesting() {
    let data = simulate(&config(400, 3)).unwrap().observed;
    let names = [
        "0", "h", "o", "t", "b", "ho", "ht", "hb", "ot", "ob", "tb", "hot", "hob", "htb", "otb",
        "hotb",
    ];
    let ll: Vec<(ModelName, f64)> = names
        .iter()
        .map(|n| (n.parse().unwrap(), loglik(&data, n, None)))
        .collect();
    for (small, a) in &ll {
        for (big, b) in &ll {
            if small != big && small.is_nested_in(big) {
                assert!(a <= &(b + 1e-7 * b.abs()), "{small} {a} above {big} {b}");
            }
        }
    }
}

#[test]
fn one_cell_grid_equals_single_fit() {
    let data = simulate(&config(300, 4)).unwrap().observed;
    let b = Behavior::new(2, Some(4), Some(3.0)).unwrap();
    let name: ModelName = "hotb".parse().unwrap();
    let single = fit_submodel(&data, name, Some(b), &quick()).unwrap();
    let base = submodel_spec(&data, name, Some(Behavior::classic()));
    let grid = grid_search(
        &data,
        &base,
        &grid_cells(&[2], &[Some(4)], &[Some(3.0)]),
        &quick(),
    )
    .unwrap();
    assert_eq!(grid.rows.len(), 1);
    assert_eq!(grid.rows[0].loglik, Some(single.loglik));
    assert_eq!(grid.rows[0].delta_loglik, Some(0.0));
}

#[test]
fn unbounded_window_from_first_capture_is_the_classic_response() {
    let data = simulate(&config(300, 5)).unwrap().observed;
    let classic = loglik(&data, "hotb", None);
    let general = loglik(&data, "hotb", Some(Behavior::new(1, None, None).unwrap()));
    assert_eq!(classic, general);
}

#[test]
fn truncating_then_fitting_matches_a_pre_truncated_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(&config(300, 6)).unwrap().observed;
    let cut = data.truncate(6.0).unwrap();

    let events = dir.path().join("events.csv");
    let subjects = dir.path().join("subjects.csv");
    write_events(&cut, std::fs::File::create(&events).unwrap()).unwrap();
    write_subjects(&cut, std::fs::File::create(&subjects).unwrap()).unwrap();
    let mut cfg = IngestConfig::new(6.0);
    cfg.covariates = None;
    let reread = ingest(&events, Some(&subjects), &cfg).unwrap();
    let ll_file = loglik(&reread.dataset, "hob", None);
    let ll_mem = loglik(&cut, "hob", None);
    assert!((ll_file - ll_mem).abs() <= 1e-9 * ll_mem.abs());
}

#[test]
fn warm_start_reaches_the_same_fit() {
    let data = simulate(&config(300, 7)).unwrap().observed;
    let name: ModelName = "htb".parse().unwrap();
    let ctx = LikContext::new(&data, &submodel_spec(&data, name, None)).unwrap();
    let cold = fit_context(&ctx, &quick(), None).unwrap();
    let warm = fit_context(&ctx, &quick(), Some(&cold.params)).unwrap();
    assert!((cold.loglik - warm.loglik).abs() <= 1e-8 * cold.loglik.abs());
    assert!(warm.iterations <= cold.iterations);
}
