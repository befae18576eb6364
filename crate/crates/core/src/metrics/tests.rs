use proptest::prelude::*;

use super::*;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

/// Replicating every value four times makes each quarter a whole number of
/// items, so plain trimming applies.
fn iqm_oracle(values: &[f64]) -> f64 {
    let mut rep: Vec<f64> = values.iter().flat_map(|&x| [x; 4]).collect();
    rep.sort_by(f64::total_cmp);
    let n = values.len();
    rep[n..3 * n].iter().sum::<f64>() / (2 * n) as f64
}

#[test]
fn hns_examples() {
    assert_eq!(normalize_hns(9.0, 1.0, 9.0).unwrap(), 1.0);
    assert_eq!(normalize_hns(1.0, 1.0, 9.0).unwrap(), 0.0);
    assert_eq!(normalize_hns(5.0, 1.0, 9.0).unwrap(), 0.5);
    assert!(matches!(
        normalize_hns(5.0, 2.0, 2.0),
        Err(MetricsError::DegenerateNormalization { .. })
    ));
}

#[test]
fn iqm_examples() {
    assert_eq!(iqm(&[0.0, 1.0, 2.0, 3.0]).unwrap(), 1.5);
    assert_eq!(iqm(&[3.0, 0.0, 2.0, 1.0]).unwrap(), 1.5);
    assert!(close(iqm(&[2.5; 7]).unwrap(), 2.5, 1e-15));
    assert!(close(iqm(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(), 3.5, 1e-15));
    assert!(close(iqm(&[7.0]).unwrap(), 7.0, 0.0));
    assert!(matches!(iqm(&[]), Err(MetricsError::Empty)));
}

#[test]
fn iqm_ignores_outliers_beyond_the_quartiles() {
    let base = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
    let mut moved = base;
    moved[7] = 1e6;
    moved[0] = -1e6;
    assert_eq!(iqm(&base).unwrap(), iqm(&moved).unwrap());
    // Symmetric data: equal to the mean.
    assert!(close(iqm(&base).unwrap(), mean(&base).unwrap(), 1e-12));
}

#[test]
fn mean_and_median() {
    assert_eq!(mean(&[1.0, 2.0, 6.0]).unwrap(), 3.0);
    assert_eq!(median(&[5.0, 1.0, 2.0]).unwrap(), 2.0);
    assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]).unwrap(), 2.5);
    let m = ScoreMatrix::new(
        vec!["a".into(), "b".into(), "c".into()],
        vec![vec![0.0, 2.0], vec![10.0, 10.0], vec![3.0, 5.0]],
    )
    .unwrap();
    assert_eq!(Aggregate::Mean.compute(&m), 5.0);
    assert_eq!(Aggregate::Median.compute(&m), 4.0);
}

#[test]
fn matrix_validation() {
    assert!(matches!(ScoreMatrix::new(vec![], vec![]), Err(MetricsError::Empty)));
    assert!(matches!(
        ScoreMatrix::new(vec!["a".into(), "b".into()], vec![vec![1.0], vec![1.0, 2.0]]),
        Err(MetricsError::RaggedTask { .. })
    ));
    assert!(matches!(
        ScoreMatrix::single_task("a", vec![f64::NAN]),
        Err(MetricsError::NonFinite { .. })
    ));
    let m = ScoreMatrix::single_task("a", vec![-28.0, 0.0, 28.0]).unwrap();
    let n = m.normalized(&[(-28.0, 28.0)]).unwrap();
    assert_eq!(n.column(0), &[0.0, 0.5, 1.0]);
}

#[test]
fn bootstrap_of_constant_scores_is_degenerate() {
    let m = ScoreMatrix::single_task("a", vec![0.7; 5]).unwrap();
    for agg in Aggregate::ALL {
        let ci = stratified_bootstrap_ci(&m, |x| agg.compute(x), 500, 0.05, 1).unwrap();
        assert_eq!((ci.low, ci.high), (0.7, 0.7));
        assert!(ci.standard_error < 1e-12);
    }
}

#[test]
fn bootstrap_is_seeded() {
    let m = ScoreMatrix::single_task("a", (0..10).map(|i| i as f64).collect()).unwrap();
    let a = stratified_bootstrap_ci(&m, |x| Aggregate::Iqm.compute(x), 300, 0.05, 9).unwrap();
    let b = stratified_bootstrap_ci(&m, |x| Aggregate::Iqm.compute(x), 300, 0.05, 9).unwrap();
    assert_eq!(a, b);
    assert!(matches!(
        stratified_bootstrap_ci(&m, |x| Aggregate::Mean.compute(x), 99, 0.05, 9),
        Err(MetricsError::TooFewResamples(99))
    ));
    assert!(matches!(
        stratified_bootstrap_ci(&m, |x| Aggregate::Mean.compute(x), 100, 1.0, 9),
        Err(MetricsError::InvalidAlpha(_))
    ));
}

#[test]
fn two_run_bootstrap_matches_enumeration() {
    let m = ScoreMatrix::single_task("a", vec![0.0, 1.0]).unwrap();
    let n = 10_000;
    let dist = bootstrap_distribution(&m, |x| Aggregate::Mean.compute(x), n, 3);
    for (value, p) in [(0.0, 0.25), (0.5, 0.5), (1.0, 0.25)] {
        let count = dist.iter().filter(|&&d| d == value).count() as f64;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((count - n as f64 * p).abs() <= 3.0 * sigma, "{value}: {count}");
    }
    let ci = stratified_bootstrap_ci(&m, |x| Aggregate::Mean.compute(x), n, 0.05, 3).unwrap();
    assert_eq!((ci.low, ci.high), (0.0, 1.0));
}

#[test]
fn bootstrap_narrows_with_more_runs() {
    let (mut narrower, mut total_small, mut total_large) = (0, 0.0, 0.0);
    for seed in 0..20u64 {
        let mut rng = SplitMix64::new(seed);
        let mut width = |m: usize| {
            let data: Vec<f64> = (0..m).map(|_| rng.next_f64()).collect();
            let matrix = ScoreMatrix::single_task("a", data).unwrap();
            let ci = stratified_bootstrap_ci(&matrix, |x| Aggregate::Mean.compute(x), 1000, 0.05, seed).unwrap();
            ci.high - ci.low
        };
        let small = width(4);
        let large = width(32);
        narrower += usize::from(large <= small);
        total_small += small;
        total_large += large;
    }
    // Four draws can cluster by chance, so this is a sign test (p < 0.025
    // under no effect) rather than a per-seed claim.
    assert!(narrower >= 15, "{narrower} of 20");
    assert!(total_large < total_small);
}

#[test]
fn profile_examples() {
    let m = ScoreMatrix::single_task("a", vec![0.2, 0.8]).unwrap();
    assert_eq!(performance_profile(&m, &[0.0, 0.5, 0.8, 1.0]).unwrap(), vec![1.0, 0.5, 0.0, 0.0]);
    assert!(matches!(performance_profile(&m, &[0.5, 0.1]), Err(MetricsError::UnsortedGrid)));
    let two = ScoreMatrix::new(vec!["a".into(), "b".into()], vec![vec![0.1, 0.9], vec![0.9, 0.9]]).unwrap();
    assert_eq!(performance_profile(&two, &[0.5]).unwrap(), vec![0.75]);
}

#[test]
fn auc_examples() {
    let grid = uniform_grid(0.0, 1.0, 1e-3).unwrap();
    assert_eq!(grid.len(), 1001);
    let s = ScoreMatrix::single_task("a", vec![0.37]).unwrap();
    let auc = auc_of_profile(&grid, &performance_profile(&s, &grid).unwrap());
    assert!(close(auc, 0.37, 1e-3));
    let z = ScoreMatrix::single_task("a", vec![0.0; 4]).unwrap();
    assert_eq!(auc_of_profile(&grid, &performance_profile(&z, &grid).unwrap()), 0.0);
}

#[test]
fn profile_bands_contain_point_for_degenerate_data() {
    let m = ScoreMatrix::single_task("a", vec![0.5; 6]).unwrap();
    let grid = uniform_grid(0.0, 1.0, 0.25).unwrap();
    for p in performance_profile_with_ci(&m, &grid, 200, 0.05, 0).unwrap() {
        assert_eq!((p.ci_low, p.ci_high), (p.fraction, p.fraction));
    }
}

#[test]
fn csv_round_trip_and_diagnostics() {
    let text = "config,seed,score\nvcd,0,0.5\nvcd,1,0.75\nbase,0,0.25\nbase,1,0\n";
    let m = read_scores_from(text.as_bytes(), "scores.csv").unwrap();
    assert_eq!(m.task_names(), &["vcd".to_string(), "base".to_string()]);
    assert_eq!(m.column(1), &[0.25, 0.0]);
    let alt = read_scores_from("task,run,score\nt,r,1\n".as_bytes(), "x").unwrap();
    assert_eq!(alt.num_runs(), 1);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.csv");
    write_scores_csv(&path, &m, &["0".into(), "1".into()]).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap(), text);
    assert_eq!(read_scores(&path).unwrap(), m);

    let bad = read_scores_from("config,seed,score\na,0,1\na,1,oops\n".as_bytes(), "s.csv").unwrap_err();
    let msg = bad.to_string();
    assert!(msg.contains("line 3") && msg.contains("score") && msg.contains("oops"), "{msg}");
    let header = read_scores_from("a,b,c\n".as_bytes(), "s.csv").unwrap_err();
    assert!(header.to_string().contains("line 1"));
    let dup = read_scores_from("config,seed,score\na,0,1\na,0,2\n".as_bytes(), "s.csv").unwrap_err();
    assert!(dup.to_string().contains("duplicate"));
    let short = read_scores_from("config,seed,score\na,0\n".as_bytes(), "s.csv").unwrap_err();
    assert!(short.to_string().contains("line 2"), "{short}");
    let ragged = read_scores_from("config,seed,score\na,0,1\na,1,1\nb,0,1\n".as_bytes(), "s.csv").unwrap_err();
    assert!(matches!(ragged, MetricsError::RaggedTask { .. }));
    assert!(read_scores_from("config,seed,score\n".as_bytes(), "s.csv").is_err());
}

#[test]
fn report_on_known_matrix() {
    let m = ScoreMatrix::single_task("a", vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let r = MetricsReport::compute(&m, 500, 0.05, 0).unwrap();
    assert_eq!(r.overall.iqm.value, 1.5);
    assert!(r.overall.iqm.ci_low <= 1.5 && 1.5 <= r.overall.iqm.ci_high);
    assert_eq!(r.per_task.len(), 1);
    assert_eq!(r.profile.first().unwrap().rho, 0.0);
    assert!(r.profile.last().unwrap().rho >= 3.0);
    let flat = ScoreMatrix::single_task("a", vec![0.4; 4]).unwrap();
    let r = MetricsReport::compute(&flat, 200, 0.05, 0).unwrap();
    for agg in Aggregate::ALL {
        let e = r.overall.get(agg);
        assert_eq!((e.ci_low, e.ci_high), (0.4, 0.4));
    }
}

proptest! {
    #[test]
    fn iqm_matches_trimmed_mean_oracle(values in proptest::collection::vec(-100.0f64..100.0, 1..40)) {
        let got = iqm(&values).unwrap();
        prop_assert!(close(got, iqm_oracle(&values), 1e-12));
    }

    #[test]
    fn profile_is_monotone_and_integrates_to_the_mean(
        values in proptest::collection::vec(0.0f64..1.0, 6),
    ) {
        let m = ScoreMatrix::new(vec!["a".into(), "b".into()], vec![values[..3].to_vec(), values[3..].to_vec()]).unwrap();
        let grid = uniform_grid(0.0, 1.0, 1e-3).unwrap();
        let prof = performance_profile(&m, &grid).unwrap();
        prop_assert!(prof.windows(2).all(|w| w[1] <= w[0]));
        let auc = auc_of_profile(&grid, &prof);
        prop_assert!((auc - Aggregate::Mean.compute(&m)).abs() <= 1e-3);
    }
}
