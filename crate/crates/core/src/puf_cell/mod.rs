//! Stochastic behavioral model of inverter-chain PUF cells and arrays.
//!
//! Each cell owns a static decision margin per configuration (the 4-stage
//! original and the 3-stage reconfigured variant obtained by shorting the
//! first two stages). The evaluated bit is the sign of
//!
//! `dv + tc*dT/1000 + vc*dV/1000 + drift + skew + noise`
//!
//! with `dv` in mV, `tc` in uV/degC, `vc` in uV/V, and per-evaluation
//! noise drawn from N(0, sigma_noise^2). All randomness is derived from
//! counter-based ChaCha streams keyed on (seed, chip id, cell, session),
//! so array evaluations are order-independent and reproducible.

mod config;
mod snapshot;

pub use config::ConfigError;
pub use snapshot::SnapshotError;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};

use crate::bits::BitGrid;

/// Supply voltage and temperature operating point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Environment {
    /// Supply voltage in volts.
    pub vdd: f64,
    /// Die temperature in degrees Celsius.
    pub temperature: f64,
}

impl Environment {
    pub const VDD_RANGE: (f64, f64) = (0.5, 1.6);
    pub const TEMP_RANGE: (f64, f64) = (-55.0, 150.0);

    pub fn new(vdd: f64, temperature: f64) -> Self {
        let env = Environment { vdd, temperature };
        assert!(env.is_valid(), "environment out of range: {env:?}");
        env
    }

    pub fn is_valid(&self) -> bool {
        let (vlo, vhi) = Self::VDD_RANGE;
        let (tlo, thi) = Self::TEMP_RANGE;
        self.vdd >= vlo && self.vdd <= vhi && self.temperature >= tlo && self.temperature <= thi
    }
}

/// Cell configuration: the as-fabricated 4-stage chain or the healed
/// 3-stage chain with a fresh mismatch draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CellConfig {
    Original,
    Healed,
}

/// Per-cell static parameters for both configurations.
///
/// `dv_*` are static switching-voltage mismatches in mV, `tc_*` are
/// temperature coefficients in uV/degC, `vc_*` are residual supply
/// sensitivities in uV/V, and `drift_*` hold accumulated aging in mV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellModel {
    pub dv_orig: f64,
    pub dv_heal: f64,
    pub tc_orig: f64,
    pub tc_heal: f64,
    pub vc_orig: f64,
    pub vc_heal: f64,
    pub drift_orig: f64,
    pub drift_heal: f64,
}

impl CellModel {
    pub fn zero() -> Self {
        CellModel {
            dv_orig: 0.0,
            dv_heal: 0.0,
            tc_orig: 0.0,
            tc_heal: 0.0,
            vc_orig: 0.0,
            vc_heal: 0.0,
            drift_orig: 0.0,
            drift_heal: 0.0,
        }
    }

    pub fn dv(&self, config: CellConfig) -> f64 {
        match config {
            CellConfig::Original => self.dv_orig,
            CellConfig::Healed => self.dv_heal,
        }
    }
}

/// Model distribution parameters plus the master seed.
///
/// The defaults are the shipped calibration; they reproduce the reference
/// stability figures (nominal raw bit error rate near 2.9e-3, about 3%
/// native unstable bits at 20000 evaluations, a few percent raw error
/// over the automotive temperature range, and sub-percent error over the
/// 0.7-1.4 V supply range).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Std-dev of per-cell static mismatch, mV.
    pub sigma_process: f64,
    /// Std-dev of per-evaluation noise, mV. Zero disables noise.
    pub sigma_noise: f64,
    /// Std-dev of the per-cell temperature coefficient, uV/degC.
    pub sigma_tempco: f64,
    /// Std-dev of the per-cell residual supply sensitivity, uV/V.
    pub sigma_voltco: f64,
    /// Correlation between original and healed mismatch draws, in [-1, 1].
    pub heal_correlation: f64,
    /// Optional mean offset on the healed mismatch, mV (layout asymmetry).
    pub heal_bias: f64,
    /// Max |V1-V2| load-imbalance offset at self-check start, mV.
    pub imbalance_range: f64,
    /// Enrollment / reference operating point.
    pub nominal_env: Environment,
    /// Aging drift scale, mV per sqrt(hour) at the nominal point.
    pub sigma_age: f64,
    /// Aging acceleration, 1/degC: accel *= exp(k * (T - T_nom)).
    pub aging_temp_coeff: f64,
    /// Aging acceleration, 1/V: accel *= exp(k * (V - V_nom)).
    pub aging_vdd_coeff: f64,
    /// Master seed for all derived streams.
    pub seed: u64,
}

// The tempco magnitude is drawn from a band of fixed +/-12% relative
// width around its mean. Bounded support keeps every cell's worst-case
// thermal margin shift below the detection skew, which is the property
// that makes skew-based dark-bit detection sound.
const TEMPCO_BAND_WIDTH: f64 = 0.12;

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            sigma_process: 20.0,
            sigma_noise: 0.185,
            sigma_tempco: 45.0,
            sigma_voltco: 740.0,
            heal_correlation: 0.0,
            heal_bias: 0.0,
            imbalance_range: 25.0,
            nominal_env: Environment { vdd: 1.2, temperature: 25.0 },
            sigma_age: 0.0059,
            aging_temp_coeff: 0.04,
            aging_vdd_coeff: 3.466,
            seed: 1,
        }
    }
}

impl ModelConfig {
    /// Checks field ranges; zero sigmas are allowed (they disable the
    /// corresponding variation source, which noiseless tests rely on).
    pub fn validate(&self) -> Result<(), ConfigError> {
        fn nonneg(name: &str, v: f64) -> Result<(), ConfigError> {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(ConfigError::InvalidValue {
                    key: name.to_string(),
                    reason: format!("must be finite and >= 0, got {v}"),
                })
            }
        }
        nonneg("sigma_process", self.sigma_process)?;
        nonneg("sigma_noise", self.sigma_noise)?;
        nonneg("sigma_tempco", self.sigma_tempco)?;
        nonneg("sigma_voltco", self.sigma_voltco)?;
        nonneg("imbalance_range", self.imbalance_range)?;
        nonneg("sigma_age", self.sigma_age)?;
        if !(self.heal_correlation.is_finite() && self.heal_correlation.abs() <= 1.0) {
            return Err(ConfigError::InvalidValue {
                key: "heal_correlation".to_string(),
                reason: format!("must be in [-1, 1], got {}", self.heal_correlation),
            });
        }
        if !self.nominal_env.is_valid() {
            return Err(ConfigError::InvalidValue {
                key: "nominal_env".to_string(),
                reason: format!("{:?} out of range", self.nominal_env),
            });
        }
        Ok(())
    }

    /// Mean of the tempco magnitude band, uV/degC.
    pub(crate) fn tempco_mean(&self) -> f64 {
        let w = TEMPCO_BAND_WIDTH;
        self.sigma_tempco / (1.0 + w * w / 3.0).sqrt()
    }
}

/// One sampled chip: an immutable grid of cells plus its model config.
#[derive(Debug, Clone, PartialEq)]
pub struct ChipModel {
    pub chip_id: String,
    pub rows: u32,
    pub cols: u32,
    pub cells: Vec<CellModel>,
    pub model: ModelConfig,
    stream_tag: u64,
}

impl ChipModel {
    pub fn array_size(&self) -> usize {
        self.rows as usize * self.cols as usize
    }

    #[inline]
    pub fn cell(&self, idx: usize) -> &CellModel {
        &self.cells[idx]
    }

    /// Per-(cell, session) evaluation noise stream.
    pub fn session_rng(&self, cell_idx: usize, label: u64) -> ChaCha8Rng {
        stream::rng_for(self.stream_tag, label, cell_idx as u64)
    }

    /// Chip-level stream for run-scoped draws (e.g. lock imbalance).
    pub fn run_rng(&self, label: u64) -> ChaCha8Rng {
        stream::rng_for(self.stream_tag, label, u64::MAX)
    }
}

/// Deterministic stream derivation: splitmix64-mixed keys feeding ChaCha.
pub mod stream {
    use super::*;

    pub fn splitmix64(mut x: u64) -> u64 {
        x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^ (x >> 31)
    }

    pub fn mix(a: u64, b: u64) -> u64 {
        splitmix64(a ^ b.rotate_left(32))
    }

    /// Stable fold of an id string into the seed space.
    pub fn chip_tag(seed: u64, chip_id: &str) -> u64 {
        let mut h = splitmix64(seed ^ 0x4153_4348_5055_4631); // "ASCHPUF1"
        for &b in chip_id.as_bytes() {
            h = splitmix64(h ^ b as u64);
        }
        h
    }

    /// Session label namespaces, one per evaluation purpose.
    pub const PH_SAMPLE: u64 = 0x01;
    pub const PH_SELF_CHECK: u64 = 0x02;
    pub const PH_GOLDEN: u64 = 0x03;
    pub const PH_KEYGEN: u64 = 0x04;
    pub const PH_ORACLE: u64 = 0x05;
    pub const PH_EVAL: u64 = 0x06;
    pub const PH_IMBALANCE: u64 = 0x07;

    pub fn label(run_seed: u64, phase: u64, sub: u64) -> u64 {
        mix(mix(run_seed, phase), sub)
    }

    pub(crate) fn rng_for(tag: u64, label: u64, cell: u64) -> ChaCha8Rng {
        let k0 = mix(tag, label);
        let k1 = mix(k0, cell);
        let mut key = [0u8; 32];
        let mut h = k1;
        for chunk in key.chunks_exact_mut(8) {
            h = splitmix64(h);
            chunk.copy_from_slice(&h.to_le_bytes());
        }
        ChaCha8Rng::from_seed(key)
    }
}

fn draw_normal(rng: &mut impl Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    let z: f64 = rng.sample(StandardNormal);
    sigma * z
}

/// Samples a full chip. Deterministic in `(cfg.seed, chip_id)`; distinct
/// chip ids give statistically independent grids.
pub fn sample_chip(cfg: &ModelConfig, chip_id: &str, rows: u32, cols: u32) -> ChipModel {
    assert!(rows >= 1 && cols >= 1, "array dimensions must be >= 1");
    let tag = stream::chip_tag(cfg.seed, chip_id);
    let mut rng = stream::rng_for(tag, stream::PH_SAMPLE, 0);

    let rho = cfg.heal_correlation;
    let ortho = (1.0 - rho * rho).sqrt();
    let tc_mean = cfg.tempco_mean();
    let tc_lo = tc_mean * (1.0 - TEMPCO_BAND_WIDTH);
    let tc_hi = tc_mean * (1.0 + TEMPCO_BAND_WIDTH);

    let n = rows as usize * cols as usize;
    let mut cells = Vec::with_capacity(n);
    for _ in 0..n {
        let z1 = draw_normal(&mut rng, 1.0);
        let z2 = draw_normal(&mut rng, 1.0);
        let dv_orig = cfg.sigma_process * z1;
        let dv_heal = cfg.sigma_process * (rho * z1 + ortho * z2) + cfg.heal_bias;

        let tempco = |rng: &mut ChaCha8Rng| {
            if cfg.sigma_tempco == 0.0 {
                return 0.0;
            }
            let mag = rng.gen_range(tc_lo..=tc_hi);
            let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            sign * mag
        };
        let tc_orig = tempco(&mut rng);
        let tc_heal = tempco(&mut rng);

        let vc_orig = draw_normal(&mut rng, cfg.sigma_voltco);
        let vc_heal = draw_normal(&mut rng, cfg.sigma_voltco);

        cells.push(CellModel {
            dv_orig,
            dv_heal,
            tc_orig,
            tc_heal,
            vc_orig,
            vc_heal,
            drift_orig: 0.0,
            drift_heal: 0.0,
        });
    }

    ChipModel {
        chip_id: chip_id.to_string(),
        rows,
        cols,
        cells,
        model: cfg.clone(),
        stream_tag: tag,
    }
}

/// Decision margin in mV for one cell under the given conditions.
///
/// Linear surrogate: `dv + tc*dT/1000 + vc*dV/1000 + drift + skew + noise`,
/// using the parameter set matching `config`.
pub fn margin(
    cell: &CellModel,
    config: CellConfig,
    model: &ModelConfig,
    env: Environment,
    skew_mv: f64,
    noise_sample_mv: f64,
) -> f64 {
    let (dv, tc, vc, drift) = match config {
        CellConfig::Original => (cell.dv_orig, cell.tc_orig, cell.vc_orig, cell.drift_orig),
        CellConfig::Healed => (cell.dv_heal, cell.tc_heal, cell.vc_heal, cell.drift_heal),
    };
    let dt = env.temperature - model.nominal_env.temperature;
    let dv_supply = env.vdd - model.nominal_env.vdd;
    dv + tc * dt / 1000.0 + vc * dv_supply / 1000.0 + drift + skew_mv + noise_sample_mv
}

/// Noiseless margin (the static part only).
pub fn static_margin(
    cell: &CellModel,
    config: CellConfig,
    model: &ModelConfig,
    env: Environment,
    skew_mv: f64,
) -> f64 {
    margin(cell, config, model, env, skew_mv, 0.0)
}

/// One evaluation: samples fresh noise and thresholds the margin.
/// An exact zero margin resolves to 1.
pub fn evaluate_bit(
    cell: &CellModel,
    config: CellConfig,
    model: &ModelConfig,
    env: Environment,
    skew_mv: f64,
    rng: &mut impl Rng,
) -> bool {
    let noise = draw_normal(rng, model.sigma_noise);
    margin(cell, config, model, env, skew_mv, noise) >= 0.0
}

/// Outcome of an evaluation session.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SessionOutcome {
    /// Modal value over the session; a tie resolves to 1.
    pub majority_bit: bool,
    /// True iff both 0 and 1 were observed (validity-detector semantics).
    pub flipped: bool,
}

/// Runs `n_evals` evaluations and reports the majority bit plus whether
/// any transition was observed within the session.
pub fn evaluate_session(
    cell: &CellModel,
    config: CellConfig,
    model: &ModelConfig,
    env: Environment,
    skew_mv: f64,
    n_evals: u32,
    rng: &mut impl Rng,
) -> SessionOutcome {
    assert!(n_evals >= 1, "session needs at least one evaluation");
    let base = static_margin(cell, config, model, env, skew_mv);
    let mut ones: u32 = 0;
    if model.sigma_noise == 0.0 {
        if base >= 0.0 {
            ones = n_evals;
        }
    } else {
        for _ in 0..n_evals {
            let z: f64 = rng.sample(StandardNormal);
            if base + model.sigma_noise * z >= 0.0 {
                ones += 1;
            }
        }
    }
    SessionOutcome {
        majority_bit: 2 * ones >= n_evals,
        flipped: ones != 0 && ones != n_evals,
    }
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Probability that a single evaluation at static margin `m` reads 1.
pub fn one_probability(static_margin_mv: f64, sigma_noise: f64) -> f64 {
    if sigma_noise == 0.0 {
        if static_margin_mv >= 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        normal_cdf(static_margin_mv / sigma_noise)
    }
}

/// Samples how many of `n_evals` evaluations at static margin `m` disagree
/// with `golden`. Count-level shortcut for array-scale experiments: the
/// error count of independent threshold evaluations is exactly
/// Binomial(n, p_err), so sampling the binomial is distribution-identical
/// to looping the evaluations.
pub fn error_count(
    static_margin_mv: f64,
    sigma_noise: f64,
    golden: bool,
    n_evals: u64,
    rng: &mut impl Rng,
) -> u64 {
    let p_one = one_probability(static_margin_mv, sigma_noise);
    let p_err = if golden { 1.0 - p_one } else { p_one };
    if p_err <= 0.0 {
        return 0;
    }
    if p_err >= 1.0 {
        return n_evals;
    }
    Binomial::new(n_evals, p_err)
        .expect("valid binomial parameters")
        .sample(rng)
}

/// Returns an aged copy of the chip. Each drift field gains an independent
/// N(0, sigma_age^2 * hours * accel) increment, where the acceleration
/// factor grows exponentially with stress temperature and supply:
/// `accel = exp(kT*(T-T_nom)) * exp(kV*(V-V_nom))`.
pub fn apply_aging(
    chip: &ChipModel,
    hours: f64,
    stress_env: Environment,
    rng: &mut impl Rng,
) -> ChipModel {
    assert!(hours >= 0.0, "hours must be >= 0");
    let mut aged = chip.clone();
    if hours == 0.0 {
        return aged;
    }
    let cfg = &chip.model;
    let accel = (cfg.aging_temp_coeff * (stress_env.temperature - cfg.nominal_env.temperature))
        .exp()
        * (cfg.aging_vdd_coeff * (stress_env.vdd - cfg.nominal_env.vdd)).exp();
    let sigma = cfg.sigma_age * (hours * accel).sqrt();
    for cell in &mut aged.cells {
        cell.drift_orig += draw_normal(rng, sigma);
        cell.drift_heal += draw_normal(rng, sigma);
    }
    aged
}

/// Acceleration factor of the aging model at a stress point.
pub fn aging_accel(cfg: &ModelConfig, stress_env: Environment) -> f64 {
    (cfg.aging_temp_coeff * (stress_env.temperature - cfg.nominal_env.temperature)).exp()
        * (cfg.aging_vdd_coeff * (stress_env.vdd - cfg.nominal_env.vdd)).exp()
}

/// Brute-force instability oracle: evaluates every cell `n_evals` times at
/// each grid point and marks the cells that ever disagree with their
/// nominal golden value (the noiseless sign at the nominal point).
pub fn ground_truth_unstable(
    chip: &ChipModel,
    config: CellConfig,
    env_grid: &[Environment],
    skew_mv: f64,
    n_evals: u32,
    run_seed: u64,
) -> BitGrid {
    assert!(!env_grid.is_empty(), "environment grid must be non-empty");
    let model = &chip.model;
    let mut out = BitGrid::new(chip.rows, chip.cols);
    for idx in 0..chip.array_size() {
        let cell = chip.cell(idx);
        let golden = static_margin(cell, config, model, model.nominal_env, 0.0) >= 0.0;
        'grid: for (pt, &env) in env_grid.iter().enumerate() {
            let label = stream::label(run_seed, stream::PH_ORACLE, pt as u64);
            let mut rng = chip.session_rng(idx, label);
            for _ in 0..n_evals {
                if evaluate_bit(cell, config, model, env, skew_mv, &mut rng) != golden {
                    out.set(idx, true);
                    break 'grid;
                }
            }
        }
    }
    out
}
