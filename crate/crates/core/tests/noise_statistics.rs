use gbmei_core::noise::{aggregate_iterated, coarsen_increments, GridSpec, NoiseBatch};
use proptest::prelude::*;

fn moments(xs: &[f64]) -> (f64, f64, f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let c = |p: i32| xs.iter().map(|x| (x - mean).powi(p)).sum::<f64>() / n;
    let var = c(2);
    (mean, var, c(3) / var.powf(1.5), c(4) / (var * var))
}

#[test]
fn increments_are_gaussian_with_variance_h() {
    let steps = 1 << 16;
    let batch = NoiseBatch::generate(11, 3, 2, &GridSpec::new(2.0, &[steps]).unwrap(), None).unwrap();
    let level = batch.finest();
    let h = level.dt();
    for j in 0..2 {
        let xs: Vec<f64> = (0..steps).map(|n| level.increment(n)[j] / h.sqrt()).collect();
        let (mean, var, skew, kurt) = moments(&xs);
        let n = steps as f64;
        assert!(mean.abs() < 4.0 / n.sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() < 4.0 * (2.0 / n).sqrt(), "var {var}");
        // Jarque–Bera: asymptotically chi-square with 2 dof; 13.8 is its 0.999 quantile.
        let jb = n / 6.0 * (skew * skew + (kurt - 3.0).powi(2) / 4.0);
        assert!(jb < 13.8, "Jarque-Bera {jb}");
    }
}

#[test]
fn components_and_samples_are_uncorrelated() {
    let steps = 1 << 15;
    let grid = GridSpec::new(1.0, &[steps]).unwrap();
    let a = NoiseBatch::generate(5, 0, 2, &grid, None).unwrap();
    let b = NoiseBatch::generate(5, 1, 2, &grid, None).unwrap();
    let h = a.finest().dt();
    let corr = |f: &dyn Fn(usize) -> (f64, f64)| {
        (0..steps).map(|n| { let (x, y) = f(n); x * y }).sum::<f64>() / (steps as f64 * h)
    };
    let bound = 4.0 / (steps as f64).sqrt();
    let within = corr(&|n| (a.finest().increment(n)[0], a.finest().increment(n)[1]));
    let across = corr(&|n| (a.finest().increment(n)[0], b.finest().increment(n)[0]));
    assert!(within.abs() < bound, "{within}");
    assert!(across.abs() < bound, "{across}");
}

#[test]
fn coarse_levels_have_variance_of_their_step() {
    let grid = GridSpec::new(1.0, &[1 << 14, 1 << 6]).unwrap();
    let mut xs = Vec::new();
    for s in 0..40 {
        let batch = NoiseBatch::generate(9, s, 1, &grid, None).unwrap();
        let coarse = batch.level(1 << 6).unwrap();
        xs.extend(coarse.increments().iter().map(|v| v / coarse.dt().sqrt()));
    }
    let (_, var, _, _) = moments(&xs);
    assert!((var - 1.0).abs() < 4.0 * (2.0 / xs.len() as f64).sqrt(), "var {var}");
}

#[test]
fn area_second_moment_at_coarse_level() {
    // Aggregated areas keep E[L²] = h²/4 at every level.
    let grid = GridSpec::new(1.0, &[1 << 12, 1 << 8]).unwrap();
    let mut acc = 0.0;
    let mut count = 0usize;
    for s in 0..20 {
        let batch = NoiseBatch::generate(21, s, 3, &grid, Some(20)).unwrap();
        let coarse = batch.level(1 << 8).unwrap();
        let h = coarse.dt();
        for n in 0..coarse.steps() {
            for (l, i) in [(0, 1), (0, 2), (1, 2)] {
                acc += (coarse.area(n, l, i) / h).powi(2);
                count += 1;
            }
        }
    }
    let ratio = acc / count as f64 / 0.25;
    assert!((ratio - 1.0).abs() < 0.06, "{ratio}");
}

#[test]
fn ladder_choice_does_not_move_the_finest_path() {
    let a = NoiseBatch::generate(3, 17, 2, &GridSpec::new(1.0, &[512, 64, 8]).unwrap(), Some(10)).unwrap();
    let b = NoiseBatch::generate(3, 17, 2, &GridSpec::new(1.0, &[512, 128]).unwrap(), Some(10)).unwrap();
    assert_eq!(a.finest(), b.finest());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn coarsening_preserves_the_endpoint(
        seed in any::<u64>(),
        sample in 0u64..1000,
        k in 1usize..6,
    ) {
        let fine = 1usize << (k + 4);
        let coarse = 1usize << k;
        let batch = NoiseBatch::generate(seed, sample, 2, &GridSpec::new(1.0, &[fine, coarse]).unwrap(), None).unwrap();
        let w_fine = batch.finest().path();
        let w_coarse = batch.level(coarse).unwrap().path();
        for j in 0..2 {
            let a = w_fine[fine * 2 + j];
            let b = w_coarse[coarse * 2 + j];
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn aggregated_iterated_matches_coarse_level(
        seed in any::<u64>(),
        factor_pow in 1u32..5,
    ) {
        let factor = 1usize << factor_pow;
        let coarse = 8usize;
        let m = 2;
        let grid = GridSpec::new(1.0, &[coarse * factor, coarse]).unwrap();
        let batch = NoiseBatch::generate(seed, 0, m, &grid, Some(8)).unwrap();
        let fine = batch.finest();
        let level = batch.level(coarse).unwrap();
        let coarse_inc = coarsen_increments(fine.increments(), m, factor).unwrap();
        prop_assert_eq!(&coarse_inc[..], level.increments());
        for n in 0..coarse {
            let inc = &fine.increments()[n * factor * m..(n + 1) * factor * m];
            let mut it = Vec::with_capacity(factor * m * m);
            for k in n * factor..(n + 1) * factor {
                let mut block = vec![0.0; m * m];
                fine.iterated_into(k, &mut block);
                it.extend(block);
            }
            let agg = aggregate_iterated(inc, &it, m).unwrap();
            for l in 0..m {
                for i in 0..m {
                    let want = level.iterated(n, l, i);
                    prop_assert!((agg[l * m + i] - want).abs() <= 1e-13, "({l},{i}) {} vs {want}", agg[l * m + i]);
                }
            }
        }
    }
}
