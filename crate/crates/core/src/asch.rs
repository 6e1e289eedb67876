//! Stabilization state machines: coarse-fine DAC locking, skewed dark-bit
//! self-checking with validity detection, healing with recheck, and the
//! static / dynamic orchestration flows with cycle-accurate timing.

use rand::Rng;

use crate::bits::BitGrid;
use crate::keygen::{self, BitPlane, Key, KeygenError};
use crate::puf_cell::{
    evaluate_session, stream, CellConfig, ChipModel, Environment,
};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum LockError {
    #[error("comparator target outside the DAC span")]
    TargetOutOfRange,
}

#[derive(Debug, thiserror::Error)]
pub enum FlowError {
    #[error(transparent)]
    Lock(#[from] LockError),
    #[error(transparent)]
    Keygen(#[from] KeygenError),
}

/// Resistive DAC with pulse-width-modulated dithering on top.
///
/// The fine step is one PWM LSB (130 uV by default); sixteen fine steps
/// make one coarse LSB, so the coarse LSB is 2.08 mV and the搜索able V1
/// window spans `center +/- 2^(coarse_bits-1)` coarse LSBs.
#[derive(Debug, Clone, PartialEq)]
pub struct DacModel {
    pub coarse_bits: u8,
    pub fine_bits: u8,
    /// One fine (PWM) step in mV.
    pub fine_lsb_mv: f64,
    /// DAC mid-scale output in mV.
    pub center_mv: f64,
    /// Load imbalance of the comparison target: V2 = center + offset, mV.
    pub v2_offset_mv: f64,
}

impl Default for DacModel {
    fn default() -> Self {
        DacModel {
            coarse_bits: 8,
            fine_bits: 4,
            fine_lsb_mv: 0.13,
            center_mv: 615.0,
            v2_offset_mv: 0.0,
        }
    }
}

impl DacModel {
    pub fn coarse_lsb_mv(&self) -> f64 {
        self.fine_lsb_mv * (1u32 << self.fine_bits) as f64
    }

    pub fn max_coarse(&self) -> u32 {
        (1u32 << self.coarse_bits) - 1
    }

    pub fn max_fine(&self) -> u32 {
        (1u32 << self.fine_bits) - 1
    }

    /// DAC output for a (coarse, fine) code pair, mV.
    pub fn v1(&self, coarse: u32, fine: u32) -> f64 {
        let mid = 1i64 << (self.coarse_bits - 1);
        self.center_mv
            + (coarse as i64 - mid) as f64 * self.coarse_lsb_mv()
            + fine as f64 * self.fine_lsb_mv
    }

    pub fn v2(&self) -> f64 {
        self.center_mv + self.v2_offset_mv
    }

    /// Half of the representable V1 span, mV.
    pub fn half_span_mv(&self) -> f64 {
        (1u64 << (self.coarse_bits - 1)) as f64 * self.coarse_lsb_mv()
    }

    fn target_in_range(&self) -> bool {
        self.v2_offset_mv.abs() <= self.half_span_mv()
    }
}

/// Auto-zeroing comparator activated `votes` times per decision; the
/// majority wins. Individual votes may flip with `flip_probability` when
/// the inputs are closer than `noise_window_mv`.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparator {
    pub votes: u32,
    pub flip_probability: f64,
    pub noise_window_mv: f64,
}

impl Default for Comparator {
    fn default() -> Self {
        Comparator { votes: 5, flip_probability: 0.05, noise_window_mv: 0.13 }
    }
}

impl Comparator {
    pub fn noiseless() -> Self {
        Comparator { flip_probability: 0.0, ..Comparator::default() }
    }

    /// Majority-of-votes decision for `v1 > v2`.
    pub fn v1_above(&self, v1: f64, v2: f64, rng: &mut impl Rng) -> bool {
        let raw = v1 > v2;
        if self.flip_probability <= 0.0 || (v1 - v2).abs() >= self.noise_window_mv {
            return raw;
        }
        let mut above_votes = 0u32;
        for _ in 0..self.votes {
            let vote = raw ^ (rng.gen::<f64>() < self.flip_probability);
            if vote {
                above_votes += 1;
            }
        }
        2 * above_votes > self.votes
    }
}

/// Result of the coarse-fine locking sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LockState {
    pub coarse_code: u32,
    pub fine_code: u32,
    /// V1 - V2 after locking, mV.
    pub residual_mv: f64,
    pub cycles_used: u32,
}

/// Binary search over the coarse codes; exactly one comparison per bit.
/// Lands on the largest code with V1 at or below V2.
pub fn coarse_lock(
    dac: &DacModel,
    cmp: &Comparator,
    rng: &mut impl Rng,
) -> Result<(u32, u32), LockError> {
    if !dac.target_in_range() {
        return Err(LockError::TargetOutOfRange);
    }
    let v2 = dac.v2();
    let mut code = 0u32;
    let mut cycles = 0u32;
    for bit in (0..dac.coarse_bits).rev() {
        let trial = code | (1 << bit);
        cycles += 1;
        if !cmp.v1_above(dac.v1(trial, 0), v2, rng) {
            code = trial;
        }
    }
    Ok((code, cycles))
}

/// Linear search over the fine codes, stopping at the first code whose
/// comparator decision flips (V1 reaches V2). Saturates at the top code.
/// Returns the code and the number of codes visited.
pub fn fine_lock(
    dac: &DacModel,
    coarse_code: u32,
    cmp: &Comparator,
    rng: &mut impl Rng,
) -> (u32, u32) {
    let v2 = dac.v2();
    let mut cycles = 0u32;
    for fine in 0..=dac.max_fine() {
        cycles += 1;
        let v1 = dac.v1(coarse_code, fine);
        let below = !cmp.v1_above(v1, v2, rng) && v1 != v2;
        if !below {
            return (fine, cycles);
        }
        if fine == dac.max_fine() {
            return (fine, cycles);
        }
    }
    unreachable!()
}

/// Full coarse + fine lock.
pub fn lock(dac: &DacModel, cmp: &Comparator, rng: &mut impl Rng) -> Result<LockState, LockError> {
    let (coarse_code, coarse_cycles) = coarse_lock(dac, cmp, rng)?;
    let (fine_code, fine_cycles) = fine_lock(dac, coarse_code, cmp, rng);
    Ok(LockState {
        coarse_code,
        fine_code,
        residual_mv: dac.v1(coarse_code, fine_code) - dac.v2(),
        cycles_used: coarse_cycles + fine_cycles,
    })
}

/// Cycle accounting for one flow step; wall time is cycles times period.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimingReport {
    pub lock_cycles: u32,
    pub skew_detect_cycles: u32,
    pub total_cycles: u32,
    pub cycle_period_us: f64,
    pub wall_time_us: f64,
}

impl TimingReport {
    fn new(lock_cycles: u32, skew_detect_cycles: u32, period_us: f64) -> Self {
        let total = lock_cycles + skew_detect_cycles;
        TimingReport {
            lock_cycles,
            skew_detect_cycles,
            total_cycles: total,
            cycle_period_us: period_us,
            wall_time_us: total as f64 * period_us,
        }
    }

    fn combine(a: &TimingReport, b: &TimingReport) -> TimingReport {
        debug_assert_eq!(a.cycle_period_us, b.cycle_period_us);
        TimingReport::new(
            a.lock_cycles + b.lock_cycles,
            a.skew_detect_cycles + b.skew_detect_cycles,
            a.cycle_period_us,
        )
    }
}

/// Which skew polarity runs first. The dark set must not depend on this
/// in the noiseless model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkewOrder {
    NegThenPos,
    PosThenNeg,
}

/// Knobs shared by every self-check invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckParams {
    pub dac: DacModel,
    pub comparator: Comparator,
    pub session_len: u32,
    pub cycle_period_us: f64,
    pub skew_order: SkewOrder,
}

impl Default for CheckParams {
    fn default() -> Self {
        CheckParams {
            dac: DacModel::default(),
            comparator: Comparator::default(),
            session_len: 64,
            cycle_period_us: 20.0,
            skew_order: SkewOrder::NegThenPos,
        }
    }
}

/// One skewed self-check pass over the whole array.
///
/// Locks once (drawing a fresh load imbalance), then runs two evaluation
/// sessions per cell at minus and plus the programmed skew. A cell is
/// dark if the validity detector saw a transition in either session or
/// the two session majorities disagree. The lock residual shifts both
/// effective skews identically, mirroring the DAC quantization error.
pub fn self_check(
    chip: &ChipModel,
    config: CellConfig,
    env: Environment,
    skew_mv: f64,
    params: &CheckParams,
    check_seed: u64,
) -> Result<(BitGrid, TimingReport), LockError> {
    let mut run_rng = chip.run_rng(stream::label(check_seed, stream::PH_IMBALANCE, 0));
    let imbalance = chip.model.imbalance_range;
    let v2_offset_mv = if imbalance > 0.0 {
        run_rng.gen_range(-imbalance..=imbalance)
    } else {
        0.0
    };
    let dac = DacModel { v2_offset_mv, ..params.dac.clone() };
    let lock_state = lock(&dac, &params.comparator, &mut run_rng)?;
    let quant = lock_state.residual_mv;

    let (first, second) = match params.skew_order {
        SkewOrder::NegThenPos => (-skew_mv + quant, skew_mv + quant),
        SkewOrder::PosThenNeg => (skew_mv + quant, -skew_mv + quant),
    };

    let model = &chip.model;
    let mut dark = BitGrid::new(chip.rows, chip.cols);
    for idx in 0..chip.array_size() {
        let cell = chip.cell(idx);
        let mut rng_a = chip.session_rng(idx, stream::label(check_seed, stream::PH_SELF_CHECK, 0));
        let a = evaluate_session(cell, config, model, env, first, params.session_len, &mut rng_a);
        let mut rng_b = chip.session_rng(idx, stream::label(check_seed, stream::PH_SELF_CHECK, 1));
        let b = evaluate_session(cell, config, model, env, second, params.session_len, &mut rng_b);
        if a.flipped || b.flipped || a.majority_bit != b.majority_bit {
            dark.set(idx, true);
        }
    }

    let timing = TimingReport::new(lock_state.cycles_used, 2 * chip.rows, params.cycle_period_us);
    Ok((dark, timing))
}

/// Map origin: produced at enrollment (static) or at power-up (dynamic).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapSource {
    Static,
    Dynamic,
}

/// Per-cell stabilization outcome: heal and mask bitmaps plus the check
/// conditions. Cells fall into three classes: untouched stable cells,
/// healed cells (read out in the reconfigured state), and masked cells
/// (skipped during key generation). The two bitmaps never intersect.
///
/// Environment and skew are held in their fixed-point wire units so the
/// canonical binary encoding round-trips exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StabilizationMap {
    pub heal: BitGrid,
    pub mask: BitGrid,
    /// Detection skew, microvolts.
    pub skew_uv: u32,
    pub source: MapSource,
    /// Supply at check time, microvolts.
    pub env_vdd_uv: u32,
    /// Temperature at check time, milli-degC.
    pub env_temp_mc: i32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellClass {
    /// Originally stable, used as-is.
    Stable,
    /// Dark once, stable after reconfiguration.
    Healed,
    /// Dark in both configurations, excluded from keys.
    Masked,
}

impl StabilizationMap {
    pub fn new(
        heal: BitGrid,
        mask: BitGrid,
        skew_mv: f64,
        source: MapSource,
        env: Environment,
    ) -> Self {
        assert!(heal.same_dims(&mask), "heal/mask dimension mismatch");
        assert!(!heal.intersects(&mask), "heal and mask bitmaps must be disjoint");
        StabilizationMap {
            heal,
            mask,
            skew_uv: (skew_mv * 1000.0).round() as u32,
            source,
            env_vdd_uv: (env.vdd * 1e6).round() as u32,
            env_temp_mc: (env.temperature * 1e3).round() as i32,
        }
    }

    pub fn empty(rows: u32, cols: u32, source: MapSource, env: Environment) -> Self {
        Self::new(BitGrid::new(rows, cols), BitGrid::new(rows, cols), 0.0, source, env)
    }

    pub fn skew_mv(&self) -> f64 {
        self.skew_uv as f64 / 1000.0
    }

    pub fn env_at_check(&self) -> Environment {
        Environment {
            vdd: self.env_vdd_uv as f64 / 1e6,
            temperature: self.env_temp_mc as f64 / 1e3,
        }
    }

    pub fn array_size(&self) -> usize {
        self.heal.len()
    }

    pub fn masking_ratio(&self) -> f64 {
        self.mask.count_ones() as f64 / self.array_size() as f64
    }

    pub fn unmasked_count(&self) -> usize {
        self.array_size() - self.mask.count_ones()
    }

    pub fn class(&self, idx: usize) -> CellClass {
        if self.mask.get(idx) {
            CellClass::Masked
        } else if self.heal.get(idx) {
            CellClass::Healed
        } else {
            CellClass::Stable
        }
    }
}

pub const MAP_MAGIC: &[u8; 8] = b"ASCHMAP1";

/// Byte length of an encoded map for a rows x cols array.
pub fn encoded_map_len(rows: u32, cols: u32) -> usize {
    let bits = rows as usize * cols as usize;
    MAP_MAGIC.len() + 4 + 4 + 4 + 1 + 4 + 4 + 2 * bits.div_ceil(8)
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum MapDecodeError {
    #[error("bad magic, not a stabilization map")]
    BadMagic,
    #[error("truncated map payload")]
    Truncated,
    #[error("malformed map: {0}")]
    Malformed(String),
}

impl StabilizationMap {
    /// Canonical binary form: magic, dims, skew in uV, source byte, the
    /// check-time environment as two little-endian 32-bit fixed-point
    /// fields, then the heal and mask bitmaps row-major LSB-first.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(encoded_map_len(self.heal.rows(), self.heal.cols()));
        out.extend_from_slice(MAP_MAGIC);
        out.extend_from_slice(&self.heal.rows().to_le_bytes());
        out.extend_from_slice(&self.heal.cols().to_le_bytes());
        out.extend_from_slice(&self.skew_uv.to_le_bytes());
        out.push(match self.source {
            MapSource::Static => 0,
            MapSource::Dynamic => 1,
        });
        out.extend_from_slice(&self.env_vdd_uv.to_le_bytes());
        out.extend_from_slice(&self.env_temp_mc.to_le_bytes());
        out.extend_from_slice(&self.heal.to_bytes());
        out.extend_from_slice(&self.mask.to_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<StabilizationMap, MapDecodeError> {
        if bytes.len() < MAP_MAGIC.len() + 21 {
            return Err(MapDecodeError::Truncated);
        }
        if &bytes[..8] != MAP_MAGIC {
            return Err(MapDecodeError::BadMagic);
        }
        let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        let rows = u32_at(8);
        let cols = u32_at(12);
        let skew_uv = u32_at(16);
        let source = match bytes[20] {
            0 => MapSource::Static,
            1 => MapSource::Dynamic,
            other => {
                return Err(MapDecodeError::Malformed(format!("unknown source byte {other}")))
            }
        };
        let env_vdd_uv = u32_at(21);
        let env_temp_mc = i32::from_le_bytes(bytes[25..29].try_into().unwrap());
        if rows == 0 || cols == 0 || rows as u64 * cols as u64 > 1 << 28 {
            return Err(MapDecodeError::Malformed(format!("bad dimensions {rows}x{cols}")));
        }
        let nbytes = (rows as usize * cols as usize).div_ceil(8);
        let expect = 29 + 2 * nbytes;
        if bytes.len() < expect {
            return Err(MapDecodeError::Truncated);
        }
        if bytes.len() > expect {
            return Err(MapDecodeError::Malformed("trailing bytes after map".into()));
        }
        let heal = BitGrid::from_bytes(rows, cols, &bytes[29..29 + nbytes])
            .ok_or_else(|| MapDecodeError::Malformed("bad heal bitmap padding".into()))?;
        let mask = BitGrid::from_bytes(rows, cols, &bytes[29 + nbytes..expect])
            .ok_or_else(|| MapDecodeError::Malformed("bad mask bitmap padding".into()))?;
        if heal.intersects(&mask) {
            return Err(MapDecodeError::Malformed("heal and mask bitmaps overlap".into()));
        }
        Ok(StabilizationMap { heal, mask, skew_uv, source, env_vdd_uv, env_temp_mc })
    }
}

/// Flow-level knobs on top of [`CheckParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct FlowParams {
    pub check: CheckParams,
    /// Evaluations averaged per golden-plane bit (odd).
    pub n_avg: u32,
    /// Requested key length; `None` reads every unmasked cell.
    pub key_len: Option<u32>,
}

impl Default for FlowParams {
    fn default() -> Self {
        FlowParams { check: CheckParams::default(), n_avg: 101, key_len: None }
    }
}

#[derive(Debug, Clone)]
pub struct SAschRun {
    pub map: StabilizationMap,
    pub golden_key: Key,
    pub timing: TimingReport,
    pub golden_orig: BitPlane,
    pub golden_heal: BitPlane,
}

#[derive(Debug, Clone)]
pub struct DAschRun {
    pub map: StabilizationMap,
    pub key: Key,
    pub timing: TimingReport,
}

fn dual_check(
    chip: &ChipModel,
    env: Environment,
    skew_mv: f64,
    params: &CheckParams,
    run_seed: u64,
) -> Result<(BitGrid, BitGrid, BitGrid, TimingReport), LockError> {
    let (dark1, t1) = self_check(
        chip,
        CellConfig::Original,
        env,
        skew_mv,
        params,
        stream::mix(run_seed, 0x5c00),
    )?;
    let (dark2, t2) = self_check(
        chip,
        CellConfig::Healed,
        env,
        skew_mv,
        params,
        stream::mix(run_seed, 0x5c01),
    )?;
    let mask = dark1.and(&dark2);
    let heal = dark1.and_not(&mask);
    Ok((heal, mask, dark1, TimingReport::combine(&t1, &t2)))
}

/// Builds just the stabilization map via the check/heal/recheck pipeline,
/// without touching golden planes or keys.
pub fn build_map(
    chip: &ChipModel,
    env: Environment,
    skew_mv: f64,
    source: MapSource,
    params: &CheckParams,
    run_seed: u64,
) -> Result<(StabilizationMap, TimingReport), LockError> {
    let (heal, mask, _dark1, timing) = dual_check(chip, env, skew_mv, params, run_seed)?;
    Ok((StabilizationMap::new(heal, mask, skew_mv, source, env), timing))
}

/// Static stabilization at enrollment time.
///
/// Checks the original array, heals every dark cell, rechecks the healed
/// configuration, masks what stays dark, and derives the golden key from
/// noise-averaged planes through the stabilized readout.
pub fn run_s_asch(
    chip: &ChipModel,
    env: Environment,
    skew_mv: f64,
    params: &FlowParams,
    run_seed: u64,
) -> Result<SAschRun, FlowError> {
    let (heal, mask, _dark1, timing) = dual_check(chip, env, skew_mv, &params.check, run_seed)?;
    let map = StabilizationMap::new(heal, mask, skew_mv, MapSource::Static, env);

    let golden_orig = keygen::golden_plane(
        chip,
        CellConfig::Original,
        env,
        params.n_avg,
        stream::mix(run_seed, 0x90),
    );
    let golden_heal = keygen::golden_plane(
        chip,
        CellConfig::Healed,
        env,
        params.n_avg,
        stream::mix(run_seed, 0x91),
    );
    let key_len = params.key_len.unwrap_or(map.unmasked_count() as u32);
    let golden_key = keygen::stabilize_readout(&golden_orig, &golden_heal, &map, key_len)?;
    Ok(SAschRun { map, golden_key, timing, golden_orig, golden_heal })
}

/// Dynamic stabilization at power-up: the same check/heal/recheck
/// pipeline executed at the field condition, producing a fresh volatile
/// map and a key read out under that map.
pub fn run_d_asch_powerup(
    chip: &ChipModel,
    env: Environment,
    skew_mv: f64,
    params: &FlowParams,
    run_seed: u64,
) -> Result<DAschRun, FlowError> {
    let (heal, mask, _dark1, timing) = dual_check(chip, env, skew_mv, &params.check, run_seed)?;
    let map = StabilizationMap::new(heal, mask, skew_mv, MapSource::Dynamic, env);
    let key_len = params.key_len.unwrap_or(map.unmasked_count() as u32);
    let key = keygen::generate_key(chip, &map, env, key_len, stream::mix(run_seed, 0x6e))?;
    Ok(DAschRun { map, key, timing })
}

/// Self-checking without healing: every dark bit is masked.
pub fn asc_only(
    chip: &ChipModel,
    env: Environment,
    skew_mv: f64,
    params: &CheckParams,
    run_seed: u64,
) -> Result<(BitGrid, TimingReport), LockError> {
    // same stream as the first S-ASCH round, so the dark sets coincide
    self_check(chip, CellConfig::Original, env, skew_mv, params, stream::mix(run_seed, 0x5c00))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::puf_cell::{sample_chip, static_margin, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const NOM: Environment = Environment { vdd: 1.2, temperature: 25.0 };

    fn noiseless_cfg(seed: u64) -> ModelConfig {
        ModelConfig {
            sigma_noise: 0.0,
            imbalance_range: 0.0,
            seed,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn dac_defaults_match_the_documented_geometry() {
        let dac = DacModel::default();
        assert_eq!(dac.coarse_lsb_mv(), 2.08);
        assert_eq!(dac.half_span_mv(), 128.0 * 2.08);
        assert_eq!(dac.v1(128, 0), 615.0);
        assert_eq!(dac.v1(129, 0), 615.0 + 2.08);
        assert_eq!(dac.v1(128, 3), 615.0 + 0.39);
    }

    #[test]
    fn coarse_lock_centers_on_zero_offset() {
        let dac = DacModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (code, cycles) = coarse_lock(&dac, &Comparator::noiseless(), &mut rng).unwrap();
        assert_eq!(code, 128);
        assert_eq!(cycles, 8);
        assert!((dac.v1(code, 0) - dac.v2()).abs() < dac.coarse_lsb_mv());
    }

    #[test]
    fn coarse_lock_matches_exhaustive_floor_scan() {
        let cmp = Comparator::noiseless();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for offset in [17.0, -17.0, 101.37, -233.3, 0.5, 265.9] {
            let dac = DacModel { v2_offset_mv: offset, ..DacModel::default() };
            let (code, _) = coarse_lock(&dac, &cmp, &mut rng).unwrap();
            // exhaustive 256-code scan for the nearest code
            let nearest = (0..=dac.max_coarse())
                .min_by(|&a, &b| {
                    let da = (dac.v1(a, 0) - dac.v2()).abs();
                    let db = (dac.v1(b, 0) - dac.v2()).abs();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            let err = (dac.v1(code, 0) - dac.v2()).abs();
            let best = (dac.v1(nearest, 0) - dac.v2()).abs();
            assert!(
                err <= best + dac.coarse_lsb_mv(),
                "offset {offset}: code {code} err {err} vs nearest {nearest} err {best}"
            );
        }
    }

    #[test]
    fn coarse_lock_rejects_out_of_span_targets() {
        let dac = DacModel { v2_offset_mv: 400.0, ..DacModel::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(
            coarse_lock(&dac, &Comparator::noiseless(), &mut rng),
            Err(LockError::TargetOutOfRange)
        );
    }

    #[test]
    fn fine_lock_examples() {
        let cmp = Comparator::noiseless();
        let mut rng = ChaCha8Rng::seed_from_u64(4);

        // residual after coarse = 0.2 mV below target
        let dac = DacModel { v2_offset_mv: 0.2, ..DacModel::default() };
        let (fine, cycles) = fine_lock(&dac, 128, &cmp, &mut rng);
        assert_eq!(fine, 2);
        assert_eq!(cycles, 3);
        // exhaustive 16-code scan optimum
        let best = (0..16u32)
            .min_by(|&a, &b| {
                let da = (dac.v1(128, a) - dac.v2()).abs();
                let db = (dac.v1(128, b) - dac.v2()).abs();
                da.partial_cmp(&db).unwrap()
            })
            .unwrap();
        assert!(fine.abs_diff(best) <= 1);

        // exact hit stops on the first cycle
        let dac0 = DacModel::default();
        let (fine0, cycles0) = fine_lock(&dac0, 128, &cmp, &mut rng);
        assert_eq!((fine0, cycles0), (0, 1));
    }

    #[test]
    fn lock_budget_and_residual_bound() {
        let cmp = Comparator::noiseless();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for i in 0..1000 {
            let offset = (i as f64 / 999.0 - 0.5) * 2.0 * 260.0;
            let dac = DacModel { v2_offset_mv: offset, ..DacModel::default() };
            let state = lock(&dac, &cmp, &mut rng).unwrap();
            assert!(state.cycles_used <= 24, "cycles {}", state.cycles_used);
            assert!(
                state.residual_mv.abs() <= dac.fine_lsb_mv + 1e-12,
                "offset {offset}: residual {}",
                state.residual_mv
            );
        }
    }

    #[test]
    fn lock_survives_comparator_noise() {
        let cmp = Comparator::default();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut within = 0;
        for i in 0..500 {
            let offset = (i as f64 * 0.97) % 250.0 - 125.0;
            let dac = DacModel { v2_offset_mv: offset, ..DacModel::default() };
            let state = lock(&dac, &cmp, &mut rng).unwrap();
            assert!(state.cycles_used <= 24);
            if state.residual_mv.abs() <= dac.fine_lsb_mv + 1e-12 {
                within += 1;
            }
        }
        // majority voting keeps almost every lock at full precision
        assert!(within >= 480, "only {within}/500 locks within one fine LSB");
    }

    #[test]
    fn self_check_flags_exactly_the_sub_skew_cells_when_noiseless() {
        let cfg = noiseless_cfg(11);
        let chip = sample_chip(&cfg, "sc", 8, 32);
        let skew = 6.0;
        let (dark, timing) =
            self_check(&chip, CellConfig::Original, NOM, skew, &CheckParams::default(), 77)
                .unwrap();
        for idx in 0..chip.array_size() {
            let m = static_margin(chip.cell(idx), CellConfig::Original, &cfg, NOM, 0.0);
            if m.abs() < skew {
                assert!(dark.get(idx), "cell {idx} margin {m} should be dark");
            }
            if m.abs() > skew {
                assert!(!dark.get(idx), "cell {idx} margin {m} should be stable");
            }
        }
        assert_eq!(timing.lock_cycles, 9); // centered target locks fast
        assert_eq!(timing.skew_detect_cycles, 16);
    }

    #[test]
    fn skew_order_does_not_change_the_noiseless_dark_set() {
        let cfg = noiseless_cfg(12);
        let chip = sample_chip(&cfg, "ord", 4, 32);
        let mut p1 = CheckParams::default();
        p1.skew_order = SkewOrder::NegThenPos;
        let mut p2 = CheckParams::default();
        p2.skew_order = SkewOrder::PosThenNeg;
        let (d1, _) = self_check(&chip, CellConfig::Original, NOM, 5.0, &p1, 9).unwrap();
        let (d2, _) = self_check(&chip, CellConfig::Original, NOM, 5.0, &p2, 9).unwrap();
        assert_eq!(d1, d2);
    }

    #[test]
    fn dark_sets_are_monotone_in_skew_noiseless() {
        let cfg = noiseless_cfg(13);
        let chip = sample_chip(&cfg, "mono", 8, 32);
        let params = CheckParams::default();
        let mut prev: Option<BitGrid> = None;
        for skew in [1.0, 3.0, 6.0, 10.0] {
            let (dark, _) =
                self_check(&chip, CellConfig::Original, NOM, skew, &params, 5).unwrap();
            if let Some(p) = &prev {
                assert!(p.is_subset_of(&dark), "dark set shrank at skew {skew}");
            }
            prev = Some(dark);
        }
    }

    #[test]
    fn s_asch_classifies_and_keeps_bitmaps_disjoint() {
        let cfg = ModelConfig { seed: 21, ..ModelConfig::default() };
        let chip = sample_chip(&cfg, "flow", 32, 128);
        let run = run_s_asch(&chip, NOM, 8.0, &FlowParams::default(), 1).unwrap();
        assert!(!run.map.heal.intersects(&run.map.mask));
        assert!(run.map.mask.count_ones() > 0);
        assert!(run.map.heal.count_ones() > 0);
        assert_eq!(run.golden_key.len() as usize, run.map.unmasked_count());

        // healing shrinks masks: the masked set is a subset of ASC's mask
        let (asc_mask, _) = asc_only(&chip, NOM, 8.0, &FlowParams::default().check, 1).unwrap();
        assert!(run.map.mask.is_subset_of(&asc_mask));
        assert!(run.map.mask.count_ones() < asc_mask.count_ones());
        // the dark set splits exactly into healed and masked cells
        assert_eq!(run.map.heal.or(&run.map.mask), asc_mask);
    }

    #[test]
    fn s_asch_noiseless_zero_skew_is_a_no_op() {
        let cfg = noiseless_cfg(22);
        let chip = sample_chip(&cfg, "noop", 8, 16);
        let run = run_s_asch(&chip, NOM, 0.0, &FlowParams::default(), 3).unwrap();
        assert_eq!(run.map.mask.count_ones(), 0);
        assert_eq!(run.map.heal.count_ones(), 0);
        // key equals the raw golden bits in row-major order
        for idx in 0..chip.array_size() {
            let raw = static_margin(chip.cell(idx), CellConfig::Original, &cfg, NOM, 0.0) >= 0.0;
            assert_eq!(run.golden_key.bit(idx), raw);
        }
    }

    #[test]
    fn d_asch_powerup_is_deterministic() {
        let cfg = ModelConfig { seed: 23, ..ModelConfig::default() };
        let chip = sample_chip(&cfg, "det", 16, 32);
        let hot = Environment { vdd: 0.8, temperature: 110.0 };
        let a = run_d_asch_powerup(&chip, hot, 8.0, &FlowParams::default(), 55).unwrap();
        let b = run_d_asch_powerup(&chip, hot, 8.0, &FlowParams::default(), 55).unwrap();
        assert_eq!(a.map, b.map);
        assert_eq!(a.key, b.key);
        assert_eq!(a.map.source, MapSource::Dynamic);
    }

    #[test]
    fn timing_respects_the_cycle_budget() {
        let cfg = ModelConfig { seed: 24, ..ModelConfig::default() };
        let chip = sample_chip(&cfg, "time", 32, 128);
        let (_, t) =
            self_check(&chip, CellConfig::Original, NOM, 8.0, &CheckParams::default(), 8).unwrap();
        assert!(t.lock_cycles <= 24);
        assert_eq!(t.skew_detect_cycles, 64);
        assert!(t.total_cycles <= 88);
        assert_eq!(t.wall_time_us, t.total_cycles as f64 * 20.0);
        assert!(t.wall_time_us <= 1760.0);

        let run = run_s_asch(&chip, NOM, 8.0, &FlowParams::default(), 8).unwrap();
        assert!(run.timing.total_cycles <= 176);
        assert!(run.timing.wall_time_us < 4000.0);
    }

    #[test]
    fn map_encoding_round_trips_and_rejects_damage() {
        let cfg = ModelConfig { seed: 31, ..ModelConfig::default() };
        let chip = sample_chip(&cfg, "map", 8, 24);
        let run = run_s_asch(&chip, NOM, 7.0, &FlowParams::default(), 2).unwrap();
        let bytes = run.map.encode();
        assert_eq!(bytes.len(), encoded_map_len(8, 24));
        let back = StabilizationMap::decode(&bytes).unwrap();
        assert_eq!(back, run.map);

        assert_eq!(StabilizationMap::decode(&bytes[..10]), Err(MapDecodeError::Truncated));
        let mut bad = bytes.clone();
        bad[0] ^= 0xFF;
        assert_eq!(StabilizationMap::decode(&bad), Err(MapDecodeError::BadMagic));
        let mut overlapping = bytes.clone();
        // force the same bit set in both bitmaps
        let heal_start = 29;
        let mask_start = heal_start + (8 * 24_usize).div_ceil(8);
        overlapping[heal_start] |= 1;
        overlapping[mask_start] |= 1;
        assert!(matches!(
            StabilizationMap::decode(&overlapping),
            Err(MapDecodeError::Malformed(_))
        ));
    }
}
