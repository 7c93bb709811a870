use anastomosis_core::metrics::{
    anova_from_summary, anova_oneway, cov_percent, lumen_reduction, mean, pin_gauge, sample_sd, tukey_hsd,
    GroupSummary,
};
use proptest::prelude::*;

fn d1() -> Vec<Vec<f64>> {
    vec![vec![1.0, 2.0, 3.0], vec![2.0, 3.0, 4.0], vec![10.0, 11.0, 12.0]]
}

fn d2() -> Vec<Vec<f64>> {
    vec![
        vec![4.2, 5.1, 3.9, 4.8, 5.5],
        vec![6.1, 5.9, 7.2, 6.8],
        vec![5.0, 4.4, 5.6, 4.9, 5.2, 4.7],
    ]
}

fn d3() -> Vec<Vec<f64>> {
    vec![
        vec![12.1, 13.4, 11.8, 12.9],
        vec![14.2, 15.1, 13.8, 14.9, 14.4],
        vec![12.5, 13.0, 12.2, 13.6],
        vec![16.0, 15.2, 16.8, 15.5],
    ]
}

// (F, p) from scipy.stats.f_oneway, frozen.
const ORACLE: [(f64, f64); 3] = [
    (73.0, 6.150677941390873e-05),
    (13.50656934306569, 0.0008468804877045649),
    (23.755298693917595, 1.497813388014908e-05),
];

fn rel(a: f64, b: f64) -> f64 {
    ((a - b) / b).abs()
}

#[test]
fn anova_matches_frozen_oracle() {
    for (data, (f, p)) in [d1(), d2(), d3()].iter().zip(ORACLE) {
        let r = anova_oneway(data).unwrap();
        assert!(rel(r.f, f) < 1e-6, "F {} vs {f}", r.f);
        assert!(rel(r.p_value, p) < 1e-6, "p {} vs {p}", r.p_value);
    }
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

/// F upper tail through the incomplete beta, both integrals by quadrature.
fn f_upper_tail_quadrature(f: f64, d1: f64, d2: f64) -> f64 {
    let (a, b) = (d2 / 2.0, d1 / 2.0);
    let x = d2 / (d2 + d1 * f);
    let integrand = |t: f64| t.powf(a - 1.0) * (1.0 - t).powf(b - 1.0);
    simpson(integrand, 0.0, x, 200_000) / simpson(integrand, 0.0, 1.0, 2_000_000)
}

#[test]
fn anova_p_matches_quadrature() {
    for data in [d1(), d2(), d3()] {
        let r = anova_oneway(&data).unwrap();
        let q = f_upper_tail_quadrature(r.f, r.df_between as f64, r.df_within as f64);
        assert!(rel(r.p_value, q) < 1e-5, "p {} vs quadrature {q}", r.p_value);
    }
}

#[test]
fn two_group_f_is_pooled_t_squared() {
    let g = d2();
    let (a, b) = (&g[0], &g[1]);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let sp2 = ((na - 1.0) * sample_sd(a).powi(2) + (nb - 1.0) * sample_sd(b).powi(2)) / (na + nb - 2.0);
    let t = (mean(a) - mean(b)) / (sp2 * (1.0 / na + 1.0 / nb)).sqrt();
    let r = anova_oneway(&[a.clone(), b.clone()]).unwrap();
    assert!(rel(r.f, t * t) < 1e-12);
    assert!(rel(r.f, 18.0) < 1e-9);
}

#[test]
fn tukey_decisions_match_oracle() {
    let expected: [&[(usize, usize, bool)]; 3] = [
        &[(0, 1, false), (0, 2, true), (1, 2, true)],
        &[(0, 1, true), (0, 2, false), (1, 2, true)],
        &[(0, 1, true), (0, 2, false), (0, 3, true), (1, 2, true), (1, 3, true), (2, 3, true)],
    ];
    for (data, pairs) in [d1(), d2(), d3()].iter().zip(expected) {
        let t = tukey_hsd(data).unwrap();
        for &(i, j, sig) in pairs {
            assert_eq!(t.significant(i, j), sig, "pair ({i},{j})");
            assert_eq!(t.significant(j, i), sig);
        }
    }
}

#[test]
fn tukey_two_groups_agrees_with_anova() {
    let cases = [
        vec![vec![1.0, 2.0, 3.0, 4.0], vec![2.0, 3.0, 4.0, 5.0]],
        vec![vec![1.0, 2.0, 3.0, 4.0], vec![4.0, 5.0, 6.0, 7.0]],
        vec![vec![10.0, 12.0, 11.0, 13.0, 12.0], vec![13.0, 14.0, 12.5, 15.0, 14.5]],
        d2()[..2].to_vec(),
    ];
    for g in cases {
        let a = anova_oneway(&g).unwrap();
        let t = tukey_hsd(&g).unwrap();
        assert_eq!(t.significant(0, 1), a.p_value < 0.05, "p = {}", a.p_value);
    }
}

#[test]
fn fixture_summary_anova_pattern() {
    // lumen and time differ across groups, leak does not
    let groups = |rows: [(f64, f64, usize); 4]| -> Vec<GroupSummary> {
        rows.iter().map(|&(mean, sd, n)| GroupSummary { mean, sd, n }).collect()
    };
    let lumen = anova_from_summary(&groups([(21.0, 11.0, 6), (71.0, 28.0, 5), (39.0, 29.0, 5), (26.0, 17.0, 5)])).unwrap();
    let leak = anova_from_summary(&groups([(0.34, 0.13, 6), (0.38, 0.06, 4), (0.32, 0.11, 5), (0.32, 0.23, 5)])).unwrap();
    let time = anova_from_summary(&groups([(90.0, 22.0, 5), (158.0, 55.0, 5), (176.0, 27.0, 5), (353.0, 40.0, 5)])).unwrap();
    assert!((lumen.f - 5.4197).abs() < 1e-3 && lumen.p_value < 0.05);
    assert!((leak.f - 0.1549).abs() < 1e-3 && leak.p_value > 0.05);
    assert!((time.f - 43.07).abs() < 1e-2 && time.p_value < 1e-6);
}

#[test]
fn formula_spot_values() {
    assert_eq!(cov_percent(&[1.0, 2.0, 3.0]).unwrap(), 50.0);
    assert!((lumen_reduction(3.5, 4.5).unwrap() - 39.506).abs() < 1e-3);
}

proptest! {
    #[test]
    fn cov_scale_invariant(values in prop::collection::vec(0.1f64..100.0, 2..30), c in 0.01f64..100.0) {
        let scaled: Vec<f64> = values.iter().map(|v| v * c).collect();
        let a = cov_percent(&values).unwrap();
        let b = cov_percent(&scaled).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn cov_changes_under_shift(values in prop::collection::vec(0.1f64..10.0, 2..30), shift in 1.0f64..50.0) {
        let a = cov_percent(&values).unwrap();
        prop_assume!(a > 1e-6);
        let shifted: Vec<f64> = values.iter().map(|v| v + shift).collect();
        prop_assert!(cov_percent(&shifted).unwrap() < a);
    }

    #[test]
    fn lumen_monotone(raw in 0.5f64..10.0, a in 0.01f64..1.0, b in 0.01f64..1.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let r_lo = lumen_reduction(lo * raw, raw).unwrap();
        let r_hi = lumen_reduction(hi * raw, raw).unwrap();
        prop_assert!(r_lo >= r_hi);
        prop_assert_eq!(lumen_reduction(raw, raw).unwrap(), 0.0);
        if hi < 1.0 {
            prop_assert!(r_hi > 0.0);
        }
    }

    #[test]
    fn pin_gauge_idempotent(x in 0.0f64..20.0) {
        let once = pin_gauge(x).unwrap();
        prop_assert_eq!(pin_gauge(once).unwrap(), once);
        prop_assert!(once <= x + 1e-9 && x - once < 0.5 + 1e-9);
    }

    #[test]
    fn anova_translation_invariant(
        groups in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 2..8), 2..6),
        c in -1000.0f64..1000.0,
    ) {
        let a = anova_oneway(&groups).unwrap();
        let shifted: Vec<Vec<f64>> = groups.iter().map(|g| g.iter().map(|v| v + c).collect()).collect();
        let b = anova_oneway(&shifted).unwrap();
        prop_assert!((a.f - b.f).abs() <= 1e-10 * a.f.abs().max(1.0), "{} vs {}", a.f, b.f);
        prop_assert!(a.f >= 0.0 && (0.0..=1.0).contains(&a.p_value));
    }

    #[test]
    fn tukey_symmetric(groups in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 2..6), 2..7)) {
        let t = tukey_hsd(&groups).unwrap();
        for i in 0..groups.len() {
            for j in 0..groups.len() {
                if i != j {
                    prop_assert_eq!(t.significant(i, j), t.significant(j, i));
                }
            }
        }
    }
}
