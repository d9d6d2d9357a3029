use std::f64::consts::PI;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use specsep_core::dsp::{
    extract_patches, interior_range, istft, merge_patches, overlap_sum_deviation, stft, StftConfig,
};
use specsep_core::Tensor;

fn noise(len: usize, seed: u64) -> Vec<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| r.gen_range(-1.0..1.0)).collect()
}

/// Direct DFT of one windowed frame, unnormalized.
fn dft_oracle(frame: &[f64], window: &[f64], k: usize) -> (f64, f64) {
    let n = frame.len();
    let (mut re, mut im) = (0.0, 0.0);
    for (t, (&x, &w)) in frame.iter().zip(window).enumerate() {
        let ang = -2.0 * PI * (k * t) as f64 / n as f64;
        re += x * w * ang.cos();
        im += x * w * ang.sin();
    }
    (re, im)
}

#[test]
fn bin_centred_sinusoid_matches_direct_dft() {
    let cfg = StftConfig {
        fft_size: 256,
        hop: 128,
        ..StftConfig::default()
    };
    let k0 = 17;
    let x: Vec<f64> = (0..1024)
        .map(|t| (2.0 * PI * k0 as f64 * t as f64 / 256.0).cos())
        .collect();
    let spec = stft(std::slice::from_ref(&x), &cfg).unwrap();
    let window = cfg.window_samples();
    for m in 0..spec.frames() {
        let frame = &x[m * 128..m * 128 + 256];
        for k in 0..cfg.bins() {
            let (re, im) = dft_oracle(frame, &window, k);
            let z = spec.bin(0, k, m);
            assert!((z.re - re).abs() < 1e-10 && (z.im - im).abs() < 1e-10, "frame {m} bin {k}");
        }
    }
}

#[test]
fn cola_constant_for_default_pair() {
    let cfg = StftConfig::default();
    assert!(overlap_sum_deviation(&cfg.window_samples(), cfg.hop, |w| w) < 1e-12);
}

#[test]
fn stereo_three_second_round_trip() {
    let cfg = StftConfig::default();
    let len = 3 * 44100;
    let audio = vec![noise(len, 1), noise(len, 2)];
    let spec = stft(&audio, &cfg).unwrap();
    let back = istft(&spec).unwrap();
    let range = interior_range(&cfg, len);
    assert!(range.len() > len - 3 * cfg.fft_size);
    for (a, b) in audio.iter().zip(&back) {
        assert_eq!(b.len(), len);
        let err: f64 = range.clone().map(|i| (a[i] - b[i]).powi(2)).sum();
        let energy: f64 = range.clone().map(|i| a[i].powi(2)).sum();
        assert!((err / energy).sqrt() < 1e-10, "relative error {}", (err / energy).sqrt());
    }
}

#[test]
fn spectral_energy_matches_windowed_energy() {
    let cfg = StftConfig::default();
    let x = noise(20_000, 7);
    let spec = stft(std::slice::from_ref(&x), &cfg).unwrap();
    let w = cfg.window_samples();
    let n = cfg.fft_size;
    let mut time_energy = 0.0;
    for m in 0..spec.frames() {
        time_energy += (0..n).map(|i| (x[m * cfg.hop + i] * w[i]).powi(2)).sum::<f64>();
    }
    let mut freq_energy = 0.0;
    for m in 0..spec.frames() {
        for k in 0..cfg.bins() {
            let e = spec.bin(0, k, m).norm_sqr();
            freq_energy += if k == 0 || k == n / 2 { e } else { 2.0 * e };
        }
    }
    // Parseval for an unnormalized DFT
    assert!((freq_energy / n as f64 - time_energy).abs() / time_energy < 1e-8);
}

#[test]
fn patch_partition_lossless_for_all_frame_counts() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    for frames in 1..=300 {
        let data: Vec<f64> = (0..2 * 3 * frames).map(|_| r.gen()).collect();
        let m = Tensor::new([2, 3, frames], data).unwrap();
        let (patches, cov) = extract_patches(&m, 128).unwrap();
        assert_eq!(cov.patch_count, frames.div_ceil(128));
        let back = merge_patches(&patches, &cov).unwrap();
        assert_eq!(back, m, "frames {frames}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn round_trip_arbitrary_signals(seed in any::<u64>(), len in 256usize..2000, scale in 1e-3f64..1e3) {
        let cfg = StftConfig { fft_size: 128, hop: 64, ..StftConfig::default() };
        let x: Vec<f64> = noise(len, seed).into_iter().map(|v| v * scale).collect();
        let back = istft(&stft(std::slice::from_ref(&x), &cfg).unwrap()).unwrap();
        let range = interior_range(&cfg, len);
        let err: f64 = range.clone().map(|i| (x[i] - back[0][i]).powi(2)).sum();
        let energy: f64 = range.clone().map(|i| x[i].powi(2)).sum();
        prop_assume!(energy > 0.0);
        prop_assert!((err / energy).sqrt() < 1e-10);
    }
}
