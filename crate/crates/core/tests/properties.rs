use proptest::prelude::*;

use recapture::likelihood::{evaluate, total_cond_loglik, LikContext};
use recapture::model::{CaptureHistory, Dataset, ModelName, ModelSpec};
use recapture::population::{ht_from_weights, marginal_weights};
use recapture::special::hurwitz_zeta;

fn histories() -> impl Strategy<Value = Vec<(Vec<u32>, f64)>> {
    prop::collection::vec(
        (prop::collection::btree_set(1u32..=50, 1..5), -1.0f64..1.0)
            .prop_map(|(t, z)| (t.into_iter().collect(), z)),
        2..12,
    )
}

fn dataset(raw: &[(Vec<u32>, f64)], order: &[usize]) -> Dataset {
    let hs = order
        .iter()
        .map(|&i| {
            let (t, z) = &raw[i];
            let times = t.iter().map(|&k| k as f64 / 10.0).collect();
            CaptureHistory::new(format!("s{i:02}"), times, vec![*z]).unwrap()
        })
        .collect();
    Dataset::new(5.0, vec!["z".into()], hs).unwrap()
}

fn state(
    ctx: &LikContext,
    log_phi: f64,
    log_alpha: f64,
    beta: f64,
) -> recapture::model::ParamState {
    let mut st = ctx.initial_state();
    st.beta = vec![beta];
    st.log_phi = log_phi;
    st.log_alpha = Some(log_alpha);
    st
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loglik_ignores_input_order(raw in histories(), log_phi in -1.0f64..1.0, log_alpha in -1.0f64..3.0, beta in -1.0f64..1.0) {
        let n = raw.len();
        let forward: Vec<usize> = (0..n).collect();
        let backward: Vec<usize> = (0..n).rev().collect();
        let spec = ModelSpec::from_name("hotb".parse::<ModelName>().unwrap(), 5.0, vec!["z".into()]);
        let a = LikContext::new(&dataset(&raw, &forward), &spec).unwrap();
        let b = LikContext::new(&dataset(&raw, &backward), &spec).unwrap();
        let la = total_cond_loglik(&state(&a, log_phi, log_alpha, beta), &a);
        let lb = total_cond_loglik(&state(&b, log_phi, log_alpha, beta), &b);
        prop_assert_eq!(la, lb);
    }

    #[test]
    fn posterior_frailty_is_positive_and_finite(raw in histories(), log_phi in -1.0f64..1.0, log_alpha in -2.0f64..4.0) {
        let order: Vec<usize> = (0..raw.len()).collect();
        let data = dataset(&raw, &order);
        let spec = ModelSpec::from_name("hotb".parse::<ModelName>().unwrap(), 5.0, vec!["z".into()]);
        let ctx = LikContext::new(&data, &spec).unwrap();
        let ev = evaluate(&state(&ctx, log_phi, log_alpha, 0.3), &ctx).unwrap();
        for i in 0..ctx.n_subjects() {
            prop_assert!(ev.rho_hat[i] > 0.0 && ev.rho_hat[i].is_finite());
            prop_assert!(ev.e_ln_rho[i] < ev.rho_hat[i].ln() + 1e-12);
            prop_assert!(ev.omega_star[i] > 0.0);
            prop_assert!(ev.subject_loglik[i].is_finite());
        }
    }

    #[test]
    fn zeta_decreases_in_shift(s in 1.05f64..30.0, a in 0.01f64..50.0, step in 0.001f64..5.0) {
        let lo = hurwitz_zeta(s, a).unwrap();
        let hi = hurwitz_zeta(s, a + step).unwrap();
        prop_assert!(hi < lo);
        prop_assert!(hi > 0.0);
    }

    #[test]
    fn horvitz_thompson_is_at_least_the_observed_count(
        gammas in prop::collection::vec(0.05f64..5.0, 1..50),
        omega in 0.01f64..5.0,
        alpha in prop::option::of(0.05f64..50.0),
    ) {
        let w = marginal_weights(&gammas, omega, alpha).unwrap();
        prop_assert!(w.iter().all(|&x| x > 0.0 && x <= 1.0));
        prop_assert!(ht_from_weights(&w).unwrap() >= gammas.len() as f64);
    }
}
