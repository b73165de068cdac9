use harvest_sim::interconnect::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const SIZES: [f64; 8] = [4096.0, 65536.0, 1e6, 4e6, 16e6, 64e6, 256e6, 1e9];

fn line(params: LinkParams) -> Vec<(f64, f64)> {
    SIZES.iter().map(|&s| (s, params.fixed_cost + s / params.bandwidth)).collect()
}

#[test]
fn exact_points_recover_parameters() {
    for params in [
        LinkParams::new(19e-6, 300e9),
        LinkParams::new(38e-6, 31.25e9),
        LinkParams::new(50e-6, 44e9),
    ] {
        let fit = calibrate(&line(params)).unwrap();
        assert!((fit.params.fixed_cost - params.fixed_cost).abs() / params.fixed_cost < 1e-9);
        assert!((fit.params.bandwidth - params.bandwidth).abs() / params.bandwidth < 1e-9);
        assert!(fit.rms_relative_error < 1e-9);
        assert!(!fit.clamped);
    }
}

#[test]
fn noisy_points_recover_within_five_percent() {
    let truth = LinkParams::new(42e-6, 250e9);
    let noise = Normal::new(0.0, 0.01).unwrap();
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points: Vec<(f64, f64)> = line(truth)
            .into_iter()
            .map(|(s, t)| (s, t * (1.0 + noise.sample(&mut rng))))
            .collect();
        let fit = calibrate(&points).unwrap();
        assert!((fit.params.fixed_cost / truth.fixed_cost - 1.0).abs() < 0.05, "seed {seed}");
        assert!((fit.params.bandwidth / truth.bandwidth - 1.0).abs() < 0.05, "seed {seed}");
        let rms = {
            let sq: f64 = points
                .iter()
                .map(|&(s, t)| ((fit.params.fixed_cost + s / fit.params.bandwidth - t) / t).powi(2))
                .sum();
            (sq / points.len() as f64).sqrt()
        };
        assert!((fit.rms_relative_error - rms).abs() < 1e-12);
    }
}

#[test]
fn parse_then_calibrate() {
    let text = "# size,latency\n1000, 0.000011\n\n1000000,0.00002 # big\n";
    let pts = parse_points(text).unwrap();
    assert_eq!(pts.len(), 2);
    let fit = calibrate(&pts).unwrap();
    assert!((fit.params.bandwidth - 999_000.0 / 9e-6).abs() / fit.params.bandwidth < 1e-9);
    assert!(matches!(parse_points("1,2,3"), Err(CalibrationError::Parse { line: 1, .. })));
}

#[test]
fn fit_error_cases() {
    assert!(matches!(calibrate(&[(1.0, 1.0)]), Err(CalibrationError::TooFewPoints(1))));
    assert!(matches!(
        calibrate(&[(1.0, 1.0), (1.0, 2.0)]),
        Err(CalibrationError::DegenerateSizes)
    ));
    assert!(matches!(
        calibrate(&[(1.0, 2.0), (2.0, 1.0)]),
        Err(CalibrationError::NonPositiveSlope)
    ));
    assert!(calibrate(&[(1.0, -1.0), (2.0, 1.0)]).is_err());
}
