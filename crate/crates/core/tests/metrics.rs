use myodec::kinematics::{CalibrationMap, DofCalibration, DofVector};
use myodec::metrics::{self, kruskal_wallis, r_squared, response_delay, rmse_angular, MetricsError, MetricsReport};
use myodec::{DOF, STEP_US};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn map() -> CalibrationMap {
    let dofs = (0..DOF)
        .map(|d| DofCalibration { rho_min: 0.0, rho_max: 1.0, theta_min: -10.0 * d as f64, theta_max: 40.0 + 10.0 * d as f64 })
        .collect();
    CalibrationMap::new(dofs).unwrap()
}

fn smooth(n: usize, seed: u64) -> Vec<DofVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f: [f64; DOF] = std::array::from_fn(|_| rng.random_range(0.01..0.08));
    let p: [f64; DOF] = std::array::from_fn(|_| rng.random_range(0.0..6.0));
    (0..n).map(|k| DofVector::new(std::array::from_fn(|d| 0.5 + 0.4 * (f[d] * k as f64 + p[d]).sin()))).collect()
}

#[test]
fn angular_rmse_scales_by_each_range() {
    let truth = smooth(300, 1);
    let offsets: [f64; DOF] = std::array::from_fn(|d| 0.01 * (d + 1) as f64);
    let pred: Vec<DofVector> = truth.iter().map(|t| DofVector::new(std::array::from_fn(|d| t.phi[d] + offsets[d]))).collect();
    let (per, total) = rmse_angular(&pred, &truth, &map()).unwrap();
    let mut sq = 0.0;
    for d in 0..DOF {
        let span = 40.0 + 20.0 * d as f64;
        assert!((per[d] - offsets[d] * span).abs() < 1e-9);
        sq += (offsets[d] * span).powi(2);
    }
    assert!((total - (sq / DOF as f64).sqrt()).abs() < 1e-9);
}

#[test]
fn r_squared_anchors() {
    let truth = smooth(400, 2);
    let (_, perfect) = r_squared(&truth, &truth).unwrap();
    assert_eq!(perfect, 1.0);
    let m = metrics::mean_pose(&truth);
    let (per, mean_r2) = r_squared(&vec![m; truth.len()], &truth).unwrap();
    assert!(mean_r2.abs() < 1e-12);
    assert!(per.iter().all(|r| r.abs() < 1e-12));
}

#[test]
fn delay_sign_follows_which_series_leads() {
    let truth = smooth(800, 3);
    for shift in [-6i64, -1, 0, 3, 7] {
        let pred: Vec<DofVector> =
            (0..truth.len() as i64).map(|k| truth[(k - shift).clamp(0, truth.len() as i64 - 1) as usize]).collect();
        let d = response_delay(&pred, &truth, 20).unwrap();
        assert_eq!(d.lag_steps, shift);
        assert_eq!(d.lag_ms, (shift * STEP_US) as f64 / 1000.0);
        assert_eq!(d.curve.len(), 41);
    }
    assert!(matches!(response_delay(&truth[..30], &truth[..30], 20), Err(MetricsError::SeriesTooShort { .. })));
}

/// Kruskal-Wallis written straight from its rank definition, with the
/// usual tie correction.
fn kw_oracle(groups: &[Vec<f64>]) -> f64 {
    let mut all: Vec<(f64, usize)> = groups.iter().enumerate().flat_map(|(g, v)| v.iter().map(move |&x| (x, g))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = all.len();
    let mut ranks = vec![0.0; n];
    let mut ties = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let r = (i + j + 2) as f64 / 2.0;
        ranks[i..=j].iter_mut().for_each(|x| *x = r);
        let t = (j - i + 1) as f64;
        ties += t * t * t - t;
        i = j + 1;
    }
    let mut h = 0.0;
    for g in 0..groups.len() {
        let rs: f64 = all.iter().zip(&ranks).filter(|(a, _)| a.1 == g).map(|(_, r)| r).sum();
        h += rs * rs / groups[g].len() as f64;
    }
    let nf = n as f64;
    h = 12.0 / (nf * (nf + 1.0)) * h - 3.0 * (nf + 1.0);
    h / (1.0 - ties / (nf * nf * nf - nf))
}

#[test]
fn kruskal_wallis_matches_rank_definition_with_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..50 {
        let k = 2 + case % 3;
        let groups: Vec<Vec<f64>> =
            (0..k).map(|g| (0..3 + (case + g) % 6).map(|_| (rng.random_range(0..8) + g) as f64).collect()).collect();
        let kw = kruskal_wallis(&groups).unwrap();
        let h = kw_oracle(&groups);
        assert!((kw.h - h).abs() < 1e-9, "case {case}: {} vs {h}", kw.h);
        assert_eq!(kw.df, k - 1);
        let p = ChiSquared::new((k - 1) as f64).unwrap().sf(h);
        assert!((kw.p - p).abs() < 1e-8);
    }
}

#[test]
fn chi_square_tail_matches_reference() {
    for df in [1.0, 2.0, 3.0, 7.0, 20.0] {
        let dist = ChiSquared::new(df).unwrap();
        for x in [0.01, 0.5, 1.0, 3.3, 10.0, 40.0] {
            assert!((metrics::chi2_sf(x, df) - dist.sf(x)).abs() < 1e-10, "df {df}, x {x}");
        }
    }
}

#[test]
fn sem_uses_the_unbiased_deviation() {
    let v = [2.0, 4.0, 4.0, 5.0, 9.0];
    let m = 4.8;
    let sd = (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 4.0).sqrt();
    assert!((metrics::sem(&v).unwrap() - sd / 5f64.sqrt()).abs() < 1e-12);
    assert!(metrics::sem(&[3.0]).is_err());
}

#[test]
fn report_flags_constant_dofs() {
    let mut truth = smooth(200, 5);
    truth.iter_mut().for_each(|t| t.phi[3] = 0.25);
    let pred: Vec<DofVector> = truth.iter().map(|t| DofVector::new(t.phi.map(|x| x * 0.9))).collect();
    let r = MetricsReport::compute(&pred, &truth, &map(), 10).unwrap();
    assert!(r.r2[3].is_none());
    let live: Vec<f64> = r.r2.iter().flatten().copied().collect();
    assert_eq!(live.len(), DOF - 1);
    assert!((r.mean_r2 - live.iter().sum::<f64>() / live.len() as f64).abs() < 1e-15);
}
