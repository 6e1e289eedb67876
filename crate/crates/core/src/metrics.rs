//! Quantitative evaluation: bit/key error rates, detection accuracy,
//! masking ratios, Hamming-distance suites, autocorrelation, and a small
//! randomness battery (monobit and runs tests).

use crate::bits::BitGrid;
use crate::keygen::Key;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("every bit is masked, nothing to evaluate")]
    EmptyPopulation,
    #[error("no dark bits, detection accuracy undefined")]
    NoDarkBits,
    #[error("insufficient population: {0}")]
    InsufficientPopulation(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Bit error rate over the unmasked population.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BerReport {
    /// Total bits, masked ones included.
    pub n_bits: u64,
    pub n_unmasked: u64,
    pub n_evals: u64,
    pub n_errors: u64,
    pub masking_ratio: f64,
    /// errors / (unmasked bits * evaluations).
    pub ber: f64,
    /// Upper-bound rate assigned when no error was observed.
    pub pessimistic_ber: Option<f64>,
    /// Fraction of unmasked bits with at least one error.
    pub unstable_fraction: f64,
}

/// Builds a [`BerReport`] from per-cell error counts. `per_cell_errors`
/// covers every cell of the array, masked positions are ignored.
pub fn ber_from_counts(
    per_cell_errors: &[u64],
    mask: &BitGrid,
    n_evals: u64,
) -> Result<BerReport, MetricsError> {
    if per_cell_errors.len() != mask.len() {
        return Err(MetricsError::DimensionMismatch(format!(
            "{} error counts vs {} mask bits",
            per_cell_errors.len(),
            mask.len()
        )));
    }
    let n_bits = per_cell_errors.len() as u64;
    let mut n_unmasked = 0u64;
    let mut n_errors = 0u64;
    let mut unstable = 0u64;
    for (idx, &errs) in per_cell_errors.iter().enumerate() {
        if mask.get(idx) {
            continue;
        }
        n_unmasked += 1;
        n_errors += errs;
        if errs > 0 {
            unstable += 1;
        }
    }
    if n_unmasked == 0 {
        return Err(MetricsError::EmptyPopulation);
    }
    let masking_ratio = (n_bits - n_unmasked) as f64 / n_bits as f64;
    Ok(BerReport {
        n_bits,
        n_unmasked,
        n_evals,
        n_errors,
        masking_ratio,
        ber: n_errors as f64 / (n_unmasked as f64 * n_evals as f64),
        pessimistic_ber: if n_errors == 0 {
            Some(pessimistic_ber(n_bits as f64, masking_ratio, n_evals as f64))
        } else {
            None
        },
        unstable_fraction: unstable as f64 / n_unmasked as f64,
    })
}

/// Bit error rate of repeated evaluations against a golden plane,
/// counting only unmasked bits.
pub fn ber(
    evals: &[BitGrid],
    golden: &BitGrid,
    mask: &BitGrid,
) -> Result<BerReport, MetricsError> {
    if golden.len() != mask.len() {
        return Err(MetricsError::DimensionMismatch("golden vs mask".into()));
    }
    let mut counts = vec![0u64; golden.len()];
    for plane in evals {
        if plane.len() != golden.len() {
            return Err(MetricsError::DimensionMismatch("evaluation plane vs golden".into()));
        }
        for (idx, count) in counts.iter_mut().enumerate() {
            if plane.get(idx) != golden.get(idx) {
                *count += 1;
            }
        }
    }
    ber_from_counts(&counts, mask, evals.len() as u64)
}

/// Upper-bound error rate when zero errors were observed:
/// `1 / (bits * (1 - masking_ratio) * evaluations)`.
pub fn pessimistic_ber(n_bits: f64, masking_ratio: f64, n_evals: f64) -> f64 {
    assert!((0.0..1.0).contains(&masking_ratio), "masking ratio must be < 1");
    assert!(n_evals >= 1.0);
    1.0 / (n_bits * (1.0 - masking_ratio) * n_evals)
}

/// Key error rate: the chance an `n_key_bits` key holds at least one bad
/// bit, `1 - (1 - ber)^N`, evaluated stably for tiny rates.
pub fn ker(ber: f64, n_key_bits: u32) -> f64 {
    assert!((0.0..=1.0).contains(&ber), "ber must be a probability");
    -f64::exp_m1(n_key_bits as f64 * f64::ln_1p(-ber))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionReport {
    pub n_dark: usize,
    pub n_unstable: usize,
    pub n_detected: usize,
    /// Truly unstable fraction of the flagged set.
    pub accuracy: f64,
    /// Flagged fraction of the truly unstable set (1 when none exist).
    pub detection_rate: f64,
}

/// Compares a dark-bit flagging against the instability oracle.
pub fn detection_accuracy(
    dark: &BitGrid,
    unstable_oracle: &BitGrid,
) -> Result<DetectionReport, MetricsError> {
    if !dark.same_dims(unstable_oracle) {
        return Err(MetricsError::DimensionMismatch("dark vs oracle".into()));
    }
    let n_dark = dark.count_ones();
    if n_dark == 0 {
        return Err(MetricsError::NoDarkBits);
    }
    let n_unstable = unstable_oracle.count_ones();
    let n_detected = dark.and(unstable_oracle).count_ones();
    Ok(DetectionReport {
        n_dark,
        n_unstable,
        n_detected,
        accuracy: n_detected as f64 / n_dark as f64,
        detection_rate: if n_unstable == 0 {
            1.0
        } else {
            n_detected as f64 / n_unstable as f64
        },
    })
}

/// Inter- and intra-die Hamming distance means, normalized to key length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HdReport {
    pub inter_mean: f64,
    pub intra_mean: f64,
    /// inter / intra; infinite when the intra mean is zero.
    pub separation: f64,
}

/// Pairwise normalized Hamming distances: inter-die over one key per
/// chip, intra-die over repeated evaluations of each chip.
pub fn hamming_suites(
    keys_by_chip: &[Key],
    reevals_by_chip: &[Vec<Key>],
) -> Result<HdReport, MetricsError> {
    if keys_by_chip.len() < 2 {
        return Err(MetricsError::InsufficientPopulation(format!(
            "need >= 2 chips for inter-die distances, got {}",
            keys_by_chip.len()
        )));
    }
    let mut inter_sum = 0.0;
    let mut inter_n = 0u64;
    for i in 0..keys_by_chip.len() {
        for j in i + 1..keys_by_chip.len() {
            let d = keys_by_chip[i].hamming_distance(&keys_by_chip[j]).ok_or_else(|| {
                MetricsError::DimensionMismatch("inter-die key lengths differ".into())
            })?;
            inter_sum += d as f64 / keys_by_chip[i].len() as f64;
            inter_n += 1;
        }
    }

    let mut intra_sum = 0.0;
    let mut intra_n = 0u64;
    for reevals in reevals_by_chip {
        if reevals.len() < 2 {
            return Err(MetricsError::InsufficientPopulation(
                "need >= 2 re-evaluations per chip for intra-die distances".into(),
            ));
        }
        for i in 0..reevals.len() {
            for j in i + 1..reevals.len() {
                let d = reevals[i].hamming_distance(&reevals[j]).ok_or_else(|| {
                    MetricsError::DimensionMismatch("intra-die key lengths differ".into())
                })?;
                intra_sum += d as f64 / reevals[i].len() as f64;
                intra_n += 1;
            }
        }
    }
    if intra_n == 0 {
        return Err(MetricsError::InsufficientPopulation(
            "no intra-die populations supplied".into(),
        ));
    }

    let inter_mean = inter_sum / inter_n as f64;
    let intra_mean = intra_sum / intra_n as f64;
    Ok(HdReport {
        inter_mean,
        intra_mean,
        separation: if intra_mean == 0.0 { f64::INFINITY } else { inter_mean / intra_mean },
    })
}

/// Sample autocorrelation of the +/-1 mapped bit sequence at lags
/// `1..=max_lag`, plus the `z / sqrt(N)` white-noise bound.
pub fn autocorrelation(bits: &[bool], max_lag: usize, z: f64) -> (Vec<f64>, f64) {
    let n = bits.len();
    assert!(n > max_lag, "need more bits than the largest lag");
    let x: Vec<f64> = bits.iter().map(|&b| if b { 1.0 } else { -1.0 }).collect();
    let mean = x.iter().sum::<f64>() / n as f64;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let mut acf = Vec::with_capacity(max_lag);
    for lag in 1..=max_lag {
        if var == 0.0 {
            acf.push(0.0);
            continue;
        }
        let mut s = 0.0;
        for i in 0..n - lag {
            s += (x[i] - mean) * (x[i + lag] - mean);
        }
        acf.push(s / (n as f64 * var));
    }
    (acf, z / (n as f64).sqrt())
}

/// The default one-sided 95% multiplier for the autocorrelation bound.
pub const ACF_Z_95: f64 = 1.645;
/// Two-sided 95% multiplier, for comparison.
pub const ACF_Z_95_TWO_SIDED: f64 = 1.96;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomnessReport {
    pub n_bits: usize,
    pub monobit_p: f64,
    pub monobit_pass: bool,
    pub runs_p: f64,
    pub runs_pass: bool,
    /// The runs test requires the ones fraction to sit near one half.
    pub runs_applicable: bool,
}

pub const RANDOMNESS_ALPHA: f64 = 0.01;

/// Monobit frequency and runs tests with the standard statistics;
/// both pass at significance 0.01.
pub fn randomness_battery(bits: &[bool]) -> Result<RandomnessReport, MetricsError> {
    let n = bits.len();
    if n < 4096 {
        return Err(MetricsError::InsufficientPopulation(format!(
            "randomness battery needs >= 4096 bits, got {n}"
        )));
    }
    let nf = n as f64;
    let ones = bits.iter().filter(|&&b| b).count() as f64;
    let s = (2.0 * ones - nf).abs() / nf.sqrt();
    let monobit_p = libm::erfc(s / std::f64::consts::SQRT_2);

    let pi = ones / nf;
    let runs_applicable = (pi - 0.5).abs() < 2.0 / nf.sqrt();
    let runs_p = if runs_applicable {
        let mut v = 1u64;
        for w in bits.windows(2) {
            if w[0] != w[1] {
                v += 1;
            }
        }
        let num = (v as f64 - 2.0 * nf * pi * (1.0 - pi)).abs();
        let den = 2.0 * (2.0 * nf).sqrt() * pi * (1.0 - pi);
        libm::erfc(num / den)
    } else {
        0.0
    };

    Ok(RandomnessReport {
        n_bits: n,
        monobit_p,
        monobit_pass: monobit_p >= RANDOMNESS_ALPHA,
        runs_p,
        runs_pass: runs_p >= RANDOMNESS_ALPHA,
        runs_applicable,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid_from(bits: &[bool]) -> BitGrid {
        let mut g = BitGrid::new(1, bits.len() as u32);
        for (i, b) in bits.iter().enumerate() {
            g.set(i, *b);
        }
        g
    }

    #[test]
    fn ber_zero_when_evals_match_golden() {
        let golden = grid_from(&[true, false, true, false]);
        let mask = BitGrid::new(1, 4);
        let report = ber(&[golden.clone(), golden.clone()], &golden, &mask).unwrap();
        assert_eq!(report.n_errors, 0);
        assert_eq!(report.ber, 0.0);
        assert_eq!(report.unstable_fraction, 0.0);
        let pes = report.pessimistic_ber.unwrap();
        assert_eq!(pes, pessimistic_ber(4.0, 0.0, 2.0));
    }

    #[test]
    fn ber_single_error_arithmetic() {
        let mut counts = vec![0u64; 4096];
        counts[123] = 1;
        let mask = BitGrid::new(32, 128);
        let report = ber_from_counts(&counts, &mask, 20_000).unwrap();
        assert_relative_eq!(report.ber, 1.22e-8, max_relative = 1e-2);
        assert_eq!(report.ber, 1.0 / (4096.0 * 20_000.0));
        assert!(report.pessimistic_ber.is_none());
        assert_eq!(report.unstable_fraction, 1.0 / 4096.0);
    }

    #[test]
    fn ber_matches_naive_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..10 {
            let n = 64 * 64;
            let golden = grid_from(&(0..n).map(|_| rng.gen()).collect::<Vec<bool>>());
            let mut mask = BitGrid::new(64, 64);
            for i in 0..n {
                if rng.gen::<f64>() < 0.2 {
                    mask.set(i, true);
                }
            }
            let evals: Vec<BitGrid> = (0..8)
                .map(|_| grid_from(&(0..n).map(|_| rng.gen()).collect::<Vec<bool>>()))
                .collect();
            let report = ber(&evals, &golden, &mask).unwrap();

            // naive recount
            let mut errors = 0u64;
            let mut unmasked = 0u64;
            for idx in 0..n {
                if mask.get(idx) {
                    continue;
                }
                unmasked += 1;
                for plane in &evals {
                    if plane.get(idx) != golden.get(idx) {
                        errors += 1;
                    }
                }
            }
            assert_eq!(report.n_errors, errors);
            assert_eq!(report.ber, errors as f64 / (unmasked as f64 * 8.0));
        }
    }

    #[test]
    fn ber_rejects_fully_masked_population() {
        let golden = grid_from(&[true, false]);
        let mask = grid_from(&[true, true]);
        assert_eq!(
            ber(&[golden.clone()], &golden, &mask),
            Err(MetricsError::EmptyPopulation)
        );
    }

    #[test]
    fn pessimistic_ber_reference_points() {
        // 10 chips x 4096 bits, 10% masking, 20000 evaluations
        let v = pessimistic_ber(40_960.0, 0.10, 20_000.0);
        assert_eq!(v, 1.0 / (40_960.0 * 0.9 * 20_000.0));
        assert_eq!(format!("{v:.2e}"), "1.36e-9");

        assert_eq!(pessimistic_ber(1.0, 0.0, 1.0), 1.0);

        let v31 = pessimistic_ber(40_960.0, 0.31, 20_000.0);
        assert_eq!(format!("{v31:.2e}"), "1.77e-9");
    }

    #[test]
    fn pessimistic_ber_scales_exactly_with_evals() {
        for &(bits, mr) in &[(4096.0, 0.0), (40_960.0, 0.31), (1024.0, 0.5)] {
            let one = pessimistic_ber(bits, mr, 1000.0);
            let two = pessimistic_ber(bits, mr, 2000.0);
            assert_eq!(two, one / 2.0);
        }
    }

    /// Distance in representable values between two same-sign finite floats.
    fn ulps_apart(a: f64, b: f64) -> u64 {
        (a.to_bits() as i64 - b.to_bits() as i64).unsigned_abs()
    }

    #[test]
    fn ker_reference_points() {
        assert_eq!(ker(0.0, 128), 0.0);
        assert_eq!(ker(1.0, 7), 1.0);

        let k = ker(1e-8, 128);
        // binomial expansion of 1 - (1 - b)^128: later terms vanish below
        // f64 resolution, so the truncation is exact at this scale
        let b: f64 = 1e-8;
        let closed = 128.0 * b - 8128.0 * b * b + 341_376.0 * b * b * b;
        assert!(ulps_apart(k, closed) <= 1, "{k} vs {closed}");
        assert_relative_eq!(k, 1.28e-6, max_relative = 1e-4);

        // single-bit key: the key error rate is the bit error rate
        for b in [0.0, 1e-9, 0.3, 0.9999, 1.0] {
            assert_relative_eq!(ker(b, 1), b, max_relative = 1e-15);
        }
    }

    #[test]
    fn ker_is_monotone() {
        let mut last = 0.0;
        for i in 0..100 {
            let b = i as f64 / 99.0;
            let k = ker(b, 64);
            assert!(k >= last);
            last = k;
        }
        assert!(ker(1e-6, 256) > ker(1e-6, 128));
    }

    #[test]
    fn detection_reference_points() {
        let oracle = grid_from(&[true, true, false, false]);
        let same = detection_accuracy(&oracle, &oracle).unwrap();
        assert_eq!(same.accuracy, 1.0);
        assert_eq!(same.detection_rate, 1.0);

        let dark = grid_from(&[true, true, true, true]);
        let twice = detection_accuracy(&dark, &oracle).unwrap();
        assert_eq!(twice.accuracy, 0.5);
        assert_eq!(twice.detection_rate, 1.0);
        // accuracy = rate * |oracle| / |dark|
        assert_relative_eq!(
            twice.accuracy,
            twice.detection_rate * twice.n_unstable as f64 / twice.n_dark as f64,
        );

        let empty = BitGrid::new(1, 4);
        assert_eq!(detection_accuracy(&empty, &oracle), Err(MetricsError::NoDarkBits));
    }

    #[test]
    fn hamming_reference_points() {
        let a = Key::from_bits(vec![true; 64], "a");
        let reevals = vec![vec![a.clone(), a.clone(), a.clone()]];
        let keys = vec![a.clone(), Key::from_bits(vec![false; 64], "b")];
        let report = hamming_suites(&keys, &reevals).unwrap();
        assert_eq!(report.intra_mean, 0.0);
        assert_eq!(report.inter_mean, 1.0);
        assert!(report.separation.is_infinite());

        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let random_keys: Vec<Key> = (0..12)
            .map(|i| Key::from_bits((0..4096).map(|_| rng.gen()).collect(), format!("c{i}")))
            .collect();
        let report =
            hamming_suites(&random_keys, &[vec![random_keys[0].clone(); 2]]).unwrap();
        // binomial: sd of a single pair is ~0.0078, the mean over 66 pairs is tighter
        assert!((report.inter_mean - 0.5).abs() < 0.01, "inter {}", report.inter_mean);

        assert!(matches!(
            hamming_suites(&random_keys[..1], &[]),
            Err(MetricsError::InsufficientPopulation(_))
        ));
    }

    #[test]
    fn hamming_distance_is_a_metric_on_byte_keys() {
        // exhaustive over all 8-bit keys
        let d = |a: u8, b: u8| (a ^ b).count_ones();
        for a in 0u16..256 {
            let a = a as u8;
            assert_eq!(d(a, a), 0);
            for b in 0u16..256 {
                let b = b as u8;
                assert_eq!(d(a, b), d(b, a));
                if a != b {
                    assert!(d(a, b) > 0);
                }
                for c in 0u16..256 {
                    let c = c as u8;
                    assert!(d(a, c) <= d(a, b) + d(b, c));
                }
            }
        }
    }

    #[test]
    fn acf_bound_matches_the_reference_value() {
        let bits: Vec<bool> = (0..40_960).map(|i| i % 7 == 0).collect();
        let (_, bound) = autocorrelation(&bits, 10, ACF_Z_95);
        assert_relative_eq!(bound, 1.645 / (40_960f64).sqrt(), max_relative = 1e-12);
        assert_eq!(format!("{bound:.4}"), "0.0081");
        let (_, two_sided) = autocorrelation(&bits, 10, ACF_Z_95_TWO_SIDED);
        assert!(two_sided > bound);
    }

    #[test]
    fn alternating_bits_have_acf_minus_one() {
        let bits: Vec<bool> = (0..1000).map(|i| i % 2 == 0).collect();
        let (acf, _) = autocorrelation(&bits, 3, ACF_Z_95);
        assert!((acf[0] + 1.0).abs() < 0.01, "lag-1 acf {}", acf[0]);
        assert!((acf[1] - 1.0).abs() < 0.01, "lag-2 acf {}", acf[1]);
    }

    #[test]
    fn ideal_random_bits_stay_within_the_acf_bound() {
        // seeded draw; the one-sided bound leaves ~10% exceedances per lag
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let bits: Vec<bool> = (0..40_960).map(|_| rng.gen()).collect();
        let (acf, bound) = autocorrelation(&bits, 100, ACF_Z_95);
        let within = acf.iter().filter(|a| a.abs() <= bound).count();
        assert!(within >= 95, "only {within}/100 lags within the bound");
    }

    #[test]
    fn randomness_battery_reference_behavior() {
        // ideal bits pass both tests almost always
        let mut passes = 0;
        for seed in 1000..1100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bits: Vec<bool> = (0..8192).map(|_| rng.gen()).collect();
            let r = randomness_battery(&bits).unwrap();
            if r.monobit_pass && r.runs_pass {
                passes += 1;
            }
        }
        assert!(passes >= 98, "pass rate {passes}/100");

        let zeros = vec![false; 8192];
        let r = randomness_battery(&zeros).unwrap();
        assert!(!r.monobit_pass);
        assert!(!r.runs_applicable);

        let alternating: Vec<bool> = (0..8192).map(|i| i % 2 == 0).collect();
        let r = randomness_battery(&alternating).unwrap();
        assert!(r.monobit_pass);
        assert!(!r.runs_pass);

        assert!(matches!(
            randomness_battery(&[true; 100]),
            Err(MetricsError::InsufficientPopulation(_))
        ));
    }
}
