//! Statistical checks of the Gaussian mechanism and clipping.

use dpfl_core::dp::{clip, noisy_batch_mean, DPConfig, NoiseStream};
use dpfl_core::ParamVector;
use proptest::prelude::*;

#[test]
fn noise_mean_and_variance_monte_carlo() {
    // C=1, σ=1, sR=10: std 0.1; one gradient of norm < C repeated 10 times
    let cfg = DPConfig::new(1.0, 1.0, 0.1, 100).unwrap();
    let g = ParamVector::new(vec![0.3, -0.2, 0.1]).unwrap();
    let batch = vec![g.clone(); cfg.batch_size()];
    let n = 100_000;
    let mut sum = [0.0; 3];
    let mut sq = [0.0; 3];
    for i in 0..n {
        let mut noise = NoiseStream::new(5, 0, 0, i as u64);
        let out = noisy_batch_mean(&batch, &cfg, &mut noise).unwrap();
        for j in 0..3 {
            sum[j] += out[j];
            sq[j] += (out[j] - g[j]).powi(2);
        }
    }
    let std = cfg.noise_std();
    assert!((std - 0.1).abs() < 1e-15);
    for j in 0..3 {
        let mean = sum[j] / n as f64;
        assert!((mean - g[j]).abs() <= 4.0 * std / (n as f64).sqrt(), "coord {j}: mean {mean}");
        // sample variance of a Gaussian has relative SE √(2/n)
        let var = sq[j] / n as f64;
        let rel = (var / (std * std) - 1.0).abs();
        assert!(rel <= 5.0 * (2.0 / n as f64).sqrt(), "coord {j}: var {var}");
    }
}

#[test]
fn noiseless_mean_of_unclipped_batch_is_exact() {
    let cfg = DPConfig::new(10.0, 0.0, 0.5, 4).unwrap();
    let a = ParamVector::new(vec![1.0, 2.0]).unwrap();
    let b = ParamVector::new(vec![3.0, -4.0]).unwrap();
    let batch = [clip(&a, 10.0).unwrap(), clip(&b, 10.0).unwrap()];
    let out = noisy_batch_mean(&batch, &cfg, &mut NoiseStream::new(0, 0, 0, 0)).unwrap();
    assert_eq!(out.as_slice(), &[2.0, -1.0]);
}

#[test]
fn unclipped_input_is_rejected() {
    let cfg = DPConfig::new(1.0, 1.0, 0.5, 2).unwrap();
    let big = ParamVector::new(vec![3.0, 4.0]).unwrap();
    assert!(noisy_batch_mean(&[big], &cfg, &mut NoiseStream::new(0, 0, 0, 0)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn clip_preserves_direction(v in prop::collection::vec(-1e3f64..1e3, 1..16), c in 1e-3f64..10.0) {
        let g = ParamVector::new(v).unwrap();
        let out = clip(&g, c).unwrap();
        let n = g.l2_norm();
        prop_assume!(n > 0.0);
        // out = a·g with a ∈ (0, 1]
        let a = out.dot(&g) / (n * n);
        prop_assert!(a > 0.0 && a <= 1.0 + 1e-15);
        for j in 0..g.dim() {
            prop_assert!((out[j] - a * g[j]).abs() <= 1e-12 * g[j].abs().max(1e-300));
        }
    }

    #[test]
    fn noise_is_shared_across_identical_keys(seed in 0u64..1000, step in 0u64..100) {
        let cfg = DPConfig::new(1.0, 1.0, 0.2, 10).unwrap();
        let batch = vec![ParamVector::new(vec![0.1, 0.2]).unwrap(); 2];
        let a = noisy_batch_mean(&batch, &cfg, &mut NoiseStream::new(seed, 1, 2, step)).unwrap();
        let b = noisy_batch_mean(&batch, &cfg, &mut NoiseStream::new(seed, 1, 2, step)).unwrap();
        prop_assert_eq!(a, b);
    }
}
