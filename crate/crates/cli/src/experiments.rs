//! Experiment drivers behind the CLI subcommands: calibration readback,
//! skew and environment sweeps, aging trends, and the dark-bit detection
//! study. All drivers are deterministic under their run seed and fan out
//! across chips with rayon.
//!
//! Array-scale error counting samples per-cell error counts from the
//! exact binomial law of independent threshold evaluations instead of
//! looping single evaluations; the low-level session operations stay
//! faithful per-evaluation loops and the two paths are cross-checked in
//! tests.

use anyhow::{Context, Result};
use rayon::prelude::*;

use aschpuf_core::puf_cell::stream;
use aschpuf_core::{
    asc_only, build_map, error_count, golden_plane, ground_truth_unstable, self_check,
    static_margin, BerReport, BitGrid, BitPlane, CellConfig, CheckParams, ChipModel,
    DetectionReport, Environment, MapSource, ModelConfig, StabilizationMap,
};

pub const ARRAY_ROWS: u32 = 32;
pub const ARRAY_COLS: u32 = 128;

/// Temperature sweep points, degC.
pub const SWEEP_TEMPS: [f64; 8] = [-45.0, -20.0, 0.0, 25.0, 50.0, 75.0, 100.0, 125.0];
/// Supply sweep points, V.
pub const SWEEP_VDDS: [f64; 8] = [0.7, 0.8, 0.9, 1.0, 1.1, 1.2, 1.3, 1.4];
/// Instability-oracle temperature grid, degC.
pub const ORACLE_TEMPS: [f64; 8] = [-40.0, -20.0, 0.0, 25.0, 50.0, 75.0, 100.0, 125.0];
/// Supply points crossed with the temperature sweep for full-grid runs.
pub const FULL_GRID_VDDS: [f64; 4] = [0.7, 1.0, 1.2, 1.4];

/// The worst voltage/temperature corner used for skew sweeps.
pub const WORST_CORNER: Environment = Environment { vdd: 0.7, temperature: 125.0 };
/// Accelerated-aging stress point.
pub const STRESS_ENV: Environment = Environment { vdd: 1.4, temperature: 150.0 };
/// Field corner at which dynamic-mode aging data is collected.
pub const AGING_CORNER: Environment = Environment { vdd: 0.7, temperature: 125.0 };

pub fn temp_envs(cfg: &ModelConfig) -> Vec<Environment> {
    SWEEP_TEMPS
        .iter()
        .map(|&t| Environment { vdd: cfg.nominal_env.vdd, temperature: t })
        .collect()
}

pub fn vdd_envs(cfg: &ModelConfig) -> Vec<Environment> {
    SWEEP_VDDS
        .iter()
        .map(|&v| Environment { vdd: v, temperature: cfg.nominal_env.temperature })
        .collect()
}

pub fn oracle_envs(cfg: &ModelConfig) -> Vec<Environment> {
    ORACLE_TEMPS
        .iter()
        .map(|&t| Environment { vdd: cfg.nominal_env.vdd, temperature: t })
        .collect()
}

/// Full voltage x temperature grid for zero-error qualification.
pub fn full_grid_envs() -> Vec<Environment> {
    let mut envs = Vec::new();
    for &t in &SWEEP_TEMPS {
        for &v in &FULL_GRID_VDDS {
            envs.push(Environment { vdd: v, temperature: t });
        }
    }
    envs
}

/// One chip plus its noise-averaged golden planes from enrollment.
pub struct Enrolled {
    pub chip: ChipModel,
    pub orig_plane: BitPlane,
    pub heal_plane: BitPlane,
}

pub fn chip_ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("chip-{i:02}")).collect()
}

/// Samples `n_chips` chips and collects both golden planes at the
/// nominal point.
pub fn enroll_population(
    cfg: &ModelConfig,
    n_chips: usize,
    n_avg: u32,
    run_seed: u64,
) -> Vec<Enrolled> {
    chip_ids(n_chips)
        .par_iter()
        .map(|id| {
            let chip = aschpuf_core::sample_chip(cfg, id, ARRAY_ROWS, ARRAY_COLS);
            let orig_plane = golden_plane(
                &chip,
                CellConfig::Original,
                cfg.nominal_env,
                n_avg,
                stream::mix(run_seed, 0x90),
            );
            let heal_plane = golden_plane(
                &chip,
                CellConfig::Healed,
                cfg.nominal_env,
                n_avg,
                stream::mix(run_seed, 0x91),
            );
            Enrolled { chip, orig_plane, heal_plane }
        })
        .collect()
}

/// What a batch evaluation is compared against.
pub enum EvalTarget<'a> {
    /// Original-configuration readout against the original golden plane.
    Raw { golden: &'a BitPlane },
    /// Original readout with dark bits masked (self-checking only).
    Masked { mask: &'a BitGrid, golden: &'a BitPlane },
    /// Stabilized readout under a heal/mask map against golden planes.
    Stabilized { map: &'a StabilizationMap, orig: &'a BitPlane, heal: &'a BitPlane },
}

impl<'a> EvalTarget<'a> {
    fn plan(&self, idx: usize) -> Option<(CellConfig, bool)> {
        match self {
            EvalTarget::Raw { golden } => Some((CellConfig::Original, golden.bits.get(idx))),
            EvalTarget::Masked { mask, golden } => {
                if mask.get(idx) {
                    None
                } else {
                    Some((CellConfig::Original, golden.bits.get(idx)))
                }
            }
            EvalTarget::Stabilized { map, orig, heal } => {
                if map.mask.get(idx) {
                    None
                } else if map.heal.get(idx) {
                    Some((CellConfig::Healed, heal.bits.get(idx)))
                } else {
                    Some((CellConfig::Original, orig.bits.get(idx)))
                }
            }
        }
    }

}

/// Per-cell error counts over `n_evals` evaluations at every environment
/// in the grid. Masked cells report zero.
pub fn batch_error_counts(
    chip: &ChipModel,
    target: &EvalTarget,
    envs: &[Environment],
    n_evals: u64,
    run_seed: u64,
) -> Vec<u64> {
    let model = &chip.model;
    let mut counts = vec![0u64; chip.array_size()];
    for (env_idx, &env) in envs.iter().enumerate() {
        let label = stream::label(run_seed, stream::PH_EVAL, env_idx as u64);
        for (idx, count) in counts.iter_mut().enumerate() {
            let Some((config, golden)) = target.plan(idx) else { continue };
            let m = static_margin(chip.cell(idx), config, model, env, 0.0);
            let mut rng = chip.session_rng(idx, label);
            *count += error_count(m, model.sigma_noise, golden, n_evals, &mut rng);
        }
    }
    counts
}

/// Like [`batch_error_counts`] but stops at the first error.
pub fn batch_has_errors(
    chip: &ChipModel,
    target: &EvalTarget,
    envs: &[Environment],
    n_evals: u64,
    run_seed: u64,
) -> bool {
    let model = &chip.model;
    for (env_idx, &env) in envs.iter().enumerate() {
        let label = stream::label(run_seed, stream::PH_EVAL, env_idx as u64);
        for idx in 0..chip.array_size() {
            let Some((config, golden)) = target.plan(idx) else { continue };
            let m = static_margin(chip.cell(idx), config, model, env, 0.0);
            let mut rng = chip.session_rng(idx, label);
            if error_count(m, model.sigma_noise, golden, n_evals, &mut rng) > 0 {
                return true;
            }
        }
    }
    false
}

/// Pools per-chip counts and masks into one population-level report.
pub fn pooled_report(
    counts_by_chip: &[Vec<u64>],
    masks_by_chip: &[BitGrid],
    n_evals_total: u64,
) -> BerReport {
    assert_eq!(counts_by_chip.len(), masks_by_chip.len());
    let total: usize = counts_by_chip.iter().map(Vec::len).sum();
    let mut counts = Vec::with_capacity(total);
    let mut mask = BitGrid::new(1, total as u32);
    let mut offset = 0usize;
    for (chip_counts, chip_mask) in counts_by_chip.iter().zip(masks_by_chip) {
        assert_eq!(chip_counts.len(), chip_mask.len());
        counts.extend_from_slice(chip_counts);
        for i in chip_mask.ones() {
            mask.set(offset + i, true);
        }
        offset += chip_counts.len();
    }
    aschpuf_core::ber_from_counts(&counts, &mask, n_evals_total)
        .expect("pooled population is never fully masked")
}

fn raw_population_report(
    pop: &[Enrolled],
    envs: &[Environment],
    n_evals: u64,
    run_seed: u64,
) -> BerReport {
    let counts: Vec<Vec<u64>> = pop
        .par_iter()
        .map(|e| {
            let target = EvalTarget::Raw { golden: &e.orig_plane };
            batch_error_counts(&e.chip, &target, envs, n_evals, run_seed)
        })
        .collect();
    let masks: Vec<BitGrid> = pop.iter().map(|_| BitGrid::new(ARRAY_ROWS, ARRAY_COLS)).collect();
    pooled_report(&counts, &masks, n_evals * envs.len() as u64)
}

// --- calibration ----------------------------------------------------------

pub struct Calibration {
    pub nominal: BerReport,
    pub temp_sweep: BerReport,
    pub vdd_sweep: BerReport,
}

/// Raw-stability readback of the configured model: nominal, temperature
/// sweep, and supply sweep error rates against nominal golden planes.
pub fn calibrate(cfg: &ModelConfig, n_chips: usize, n_evals: u64, run_seed: u64) -> Calibration {
    let pop = enroll_population(cfg, n_chips, 101, run_seed);
    Calibration {
        nominal: raw_population_report(
            &pop,
            &[cfg.nominal_env],
            n_evals,
            stream::mix(run_seed, 0xCA1),
        ),
        temp_sweep: raw_population_report(
            &pop,
            &temp_envs(cfg),
            n_evals,
            stream::mix(run_seed, 0xCA2),
        ),
        vdd_sweep: raw_population_report(
            &pop,
            &vdd_envs(cfg),
            n_evals,
            stream::mix(run_seed, 0xCA3),
        ),
    }
}

pub struct TargetRow {
    pub metric: &'static str,
    pub value: f64,
    pub target: f64,
    pub lo: f64,
    pub hi: f64,
    pub pass: bool,
}

/// Reference stability windows the shipped model must land in.
pub fn calibration_targets(c: &Calibration) -> Vec<TargetRow> {
    let mk = |metric, value: f64, target, lo, hi| TargetRow {
        metric,
        value,
        target,
        lo,
        hi,
        pass: value >= lo && value <= hi,
    };
    vec![
        mk("nominal_ber", c.nominal.ber, 2.9e-3, 1.5e-3, 6e-3),
        mk("nominal_unstable_fraction", c.nominal.unstable_fraction, 3.2e-2, 2.0e-2, 5.0e-2),
        mk("temp_sweep_ber", c.temp_sweep.ber, 4.2e-2, 2.0e-2, 8.0e-2),
        mk("vdd_sweep_ber", c.vdd_sweep.ber, 4.0e-3, 1.0e-3, 1.0e-2),
    ]
}

// --- dark-bit detection study ----------------------------------------------

pub struct DetectionOutcome {
    pub report: DetectionReport,
    pub oracle_fraction: f64,
    pub dark_fraction: f64,
    pub n_cells: usize,
}

/// Compares skewed self-checking against the brute-force instability
/// oracle on a large cell population.
pub fn detection_experiment(
    cfg: &ModelConfig,
    rows: u32,
    cols: u32,
    skew_mv: f64,
    oracle_evals: u32,
    run_seed: u64,
) -> Result<DetectionOutcome> {
    let chip = aschpuf_core::sample_chip(cfg, "detect-0", rows, cols);
    let oracle = ground_truth_unstable(
        &chip,
        CellConfig::Original,
        &oracle_envs(cfg),
        0.0,
        oracle_evals,
        stream::mix(run_seed, 0xB0),
    );
    let (dark, _) = self_check(
        &chip,
        CellConfig::Original,
        cfg.nominal_env,
        skew_mv,
        &CheckParams::default(),
        stream::mix(run_seed, 0xB1),
    )?;
    let n = chip.array_size();
    let report = aschpuf_core::detection_accuracy(&dark, &oracle)
        .context("self-check flagged no dark bits")?;
    Ok(DetectionOutcome {
        report,
        oracle_fraction: oracle.count_ones() as f64 / n as f64,
        dark_fraction: dark.count_ones() as f64 / n as f64,
        n_cells: n,
    })
}

// --- skew sweep -------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SkewRow {
    pub skew_mv: f64,
    pub mode: &'static str,
    pub masking_ratio: f64,
    pub report: BerReport,
}

struct ChipMaps {
    sasch: StabilizationMap,
    asc_mask: BitGrid,
}

fn build_chip_maps(pop: &[Enrolled], skew_mv: f64, map_seed: u64) -> Result<Vec<ChipMaps>> {
    pop.par_iter()
        .map(|e| {
            let params = CheckParams::default();
            let (sasch, _) = build_map(
                &e.chip,
                e.chip.model.nominal_env,
                skew_mv,
                MapSource::Static,
                &params,
                map_seed,
            )?;
            let (asc_mask, _) =
                asc_only(&e.chip, e.chip.model.nominal_env, skew_mv, &params, map_seed)?;
            Ok(ChipMaps { sasch, asc_mask })
        })
        .collect::<std::result::Result<Vec<_>, aschpuf_core::LockError>>()
        .map_err(Into::into)
}

fn mean_masking(maps: &[ChipMaps], sasch: bool) -> f64 {
    let total: usize = maps
        .iter()
        .map(|m| if sasch { m.sasch.mask.count_ones() } else { m.asc_mask.count_ones() })
        .sum();
    let cells: usize = maps.iter().map(|m| m.sasch.array_size()).sum();
    total as f64 / cells as f64
}

/// Masking ratio and worst-corner error rate for self-checking-only and
/// full check-and-heal stabilization, per programmed skew.
pub fn sweep_skew(
    cfg: &ModelConfig,
    n_chips: usize,
    skews: &[f64],
    n_evals: u64,
    run_seed: u64,
) -> Result<Vec<SkewRow>> {
    let pop = enroll_population(cfg, n_chips, 101, run_seed);
    let mut rows = Vec::new();
    for (k, &skew) in skews.iter().enumerate() {
        let map_seed = stream::label(run_seed, 0x10, k as u64);
        let eval_seed = stream::label(run_seed, 0x11, k as u64);
        let maps = build_chip_maps(&pop, skew, map_seed)?;
        let results: Vec<(Vec<u64>, Vec<u64>)> = pop
            .par_iter()
            .zip(&maps)
            .map(|(e, m)| {
                let stab = EvalTarget::Stabilized {
                    map: &m.sasch,
                    orig: &e.orig_plane,
                    heal: &e.heal_plane,
                };
                let masked = EvalTarget::Masked { mask: &m.asc_mask, golden: &e.orig_plane };
                (
                    batch_error_counts(&e.chip, &stab, &[WORST_CORNER], n_evals, eval_seed),
                    batch_error_counts(&e.chip, &masked, &[WORST_CORNER], n_evals, eval_seed),
                )
            })
            .collect();

        let s_counts: Vec<Vec<u64>> = results.iter().map(|r| r.0.clone()).collect();
        let a_counts: Vec<Vec<u64>> = results.iter().map(|r| r.1.clone()).collect();
        let s_masks: Vec<BitGrid> = maps.iter().map(|m| m.sasch.mask.clone()).collect();
        let a_masks: Vec<BitGrid> = maps.iter().map(|m| m.asc_mask.clone()).collect();
        rows.push(SkewRow {
            skew_mv: skew,
            mode: "asc",
            masking_ratio: mean_masking(&maps, false),
            report: pooled_report(&a_counts, &a_masks, n_evals),
        });
        rows.push(SkewRow {
            skew_mv: skew,
            mode: "s-asch",
            masking_ratio: mean_masking(&maps, true),
            report: pooled_report(&s_counts, &s_masks, n_evals),
        });
    }
    Ok(rows)
}

// --- zero-error qualification ------------------------------------------------

pub struct ZeroBerOutcome {
    pub skew_mv: f64,
    pub asc_ratio: f64,
    pub sasch_ratio: f64,
    pub asc_report: BerReport,
    pub sasch_report: BerReport,
}

/// Walks the skew list upward and returns the first skew at which both
/// stabilization modes show zero errors across the environment grid.
pub fn find_zero_ber_skew(
    pop: &[Enrolled],
    skews_ascending: &[f64],
    envs: &[Environment],
    n_evals: u64,
    run_seed: u64,
) -> Result<Option<ZeroBerOutcome>> {
    'skew: for (k, &skew) in skews_ascending.iter().enumerate() {
        let map_seed = stream::label(run_seed, 0x20, k as u64);
        let eval_seed = stream::label(run_seed, 0x21, k as u64);
        let maps = build_chip_maps(pop, skew, map_seed)?;

        let clean: Vec<bool> = pop
            .par_iter()
            .zip(&maps)
            .map(|(e, m)| {
                let stab = EvalTarget::Stabilized {
                    map: &m.sasch,
                    orig: &e.orig_plane,
                    heal: &e.heal_plane,
                };
                if batch_has_errors(&e.chip, &stab, envs, n_evals, eval_seed) {
                    return false;
                }
                let masked = EvalTarget::Masked { mask: &m.asc_mask, golden: &e.orig_plane };
                !batch_has_errors(&e.chip, &masked, envs, n_evals, eval_seed)
            })
            .collect();
        if clean.iter().any(|ok| !ok) {
            continue 'skew;
        }

        // zero confirmed; produce the full reports on the same streams
        let results: Vec<(Vec<u64>, Vec<u64>)> = pop
            .par_iter()
            .zip(&maps)
            .map(|(e, m)| {
                let stab = EvalTarget::Stabilized {
                    map: &m.sasch,
                    orig: &e.orig_plane,
                    heal: &e.heal_plane,
                };
                let masked = EvalTarget::Masked { mask: &m.asc_mask, golden: &e.orig_plane };
                (
                    batch_error_counts(&e.chip, &stab, envs, n_evals, eval_seed),
                    batch_error_counts(&e.chip, &masked, envs, n_evals, eval_seed),
                )
            })
            .collect();
        let s_counts: Vec<Vec<u64>> = results.iter().map(|r| r.0.clone()).collect();
        let a_counts: Vec<Vec<u64>> = results.iter().map(|r| r.1.clone()).collect();
        let s_masks: Vec<BitGrid> = maps.iter().map(|m| m.sasch.mask.clone()).collect();
        let a_masks: Vec<BitGrid> = maps.iter().map(|m| m.asc_mask.clone()).collect();
        let n_evals_total = n_evals * envs.len() as u64;
        return Ok(Some(ZeroBerOutcome {
            skew_mv: skew,
            asc_ratio: mean_masking(&maps, false),
            sasch_ratio: mean_masking(&maps, true),
            asc_report: pooled_report(&a_counts, &a_masks, n_evals_total),
            sasch_report: pooled_report(&s_counts, &s_masks, n_evals_total),
        }));
    }
    Ok(None)
}

// --- environment sweep ---------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EnvRow {
    pub axis: &'static str,
    pub value: f64,
    pub mode: &'static str,
    pub skew_mv: f64,
    pub masking_ratio: f64,
    pub report: BerReport,
}

/// Error rate versus temperature and versus supply voltage: raw, after
/// static stabilization at each listed skew, and after dynamic
/// stabilization re-run at every point.
pub fn sweep_env(
    cfg: &ModelConfig,
    n_chips: usize,
    temps: &[f64],
    vdds: &[f64],
    skews: &[f64],
    n_evals: u64,
    run_seed: u64,
) -> Result<Vec<EnvRow>> {
    let pop = enroll_population(cfg, n_chips, 101, run_seed);

    // static maps do not depend on the evaluation point; build once per skew
    let mut static_maps: Vec<Vec<ChipMaps>> = Vec::new();
    for (k, &skew) in skews.iter().enumerate() {
        static_maps.push(build_chip_maps(&pop, skew, stream::label(run_seed, 0x30, k as u64))?);
    }

    let mut rows = Vec::new();
    let axes: [(&'static str, Vec<Environment>); 2] = [
        (
            "temp",
            temps
                .iter()
                .map(|&t| Environment { vdd: cfg.nominal_env.vdd, temperature: t })
                .collect(),
        ),
        (
            "vdd",
            vdds.iter()
                .map(|&v| Environment { vdd: v, temperature: cfg.nominal_env.temperature })
                .collect(),
        ),
    ];

    for (axis, envs) in &axes {
        for (p, &env) in envs.iter().enumerate() {
            let value = if *axis == "temp" { env.temperature } else { env.vdd };
            let eval_seed = stream::label(run_seed, 0x31, p as u64 ^ ((*axis == "vdd") as u64) << 32);

            rows.push(EnvRow {
                axis,
                value,
                mode: "raw",
                skew_mv: 0.0,
                masking_ratio: 0.0,
                report: raw_population_report(&pop, &[env], n_evals, eval_seed),
            });

            for (k, &skew) in skews.iter().enumerate() {
                let maps = &static_maps[k];
                let counts: Vec<Vec<u64>> = pop
                    .par_iter()
                    .zip(maps)
                    .map(|(e, m)| {
                        let stab = EvalTarget::Stabilized {
                            map: &m.sasch,
                            orig: &e.orig_plane,
                            heal: &e.heal_plane,
                        };
                        batch_error_counts(&e.chip, &stab, &[env], n_evals, eval_seed)
                    })
                    .collect();
                let masks: Vec<BitGrid> = maps.iter().map(|m| m.sasch.mask.clone()).collect();
                rows.push(EnvRow {
                    axis,
                    value,
                    mode: "s-asch",
                    skew_mv: skew,
                    masking_ratio: mean_masking(maps, true),
                    report: pooled_report(&counts, &masks, n_evals),
                });

                // dynamic mode re-checks at the evaluation point itself
                let dmap_seed = stream::label(run_seed, 0x32, (k as u64) << 8 | p as u64);
                let dynamic: Vec<(Vec<u64>, BitGrid, usize)> = pop
                    .par_iter()
                    .map(|e| {
                        let (dmap, _) = build_map(
                            &e.chip,
                            env,
                            skew,
                            MapSource::Dynamic,
                            &CheckParams::default(),
                            dmap_seed,
                        )
                        .expect("dynamic check lock");
                        let stab = EvalTarget::Stabilized {
                            map: &dmap,
                            orig: &e.orig_plane,
                            heal: &e.heal_plane,
                        };
                        let counts =
                            batch_error_counts(&e.chip, &stab, &[env], n_evals, eval_seed);
                        let masked = dmap.mask.count_ones();
                        (counts, dmap.mask.clone(), masked)
                    })
                    .collect();
                let d_counts: Vec<Vec<u64>> = dynamic.iter().map(|d| d.0.clone()).collect();
                let d_masks: Vec<BitGrid> = dynamic.iter().map(|d| d.1.clone()).collect();
                let masked_total: usize = dynamic.iter().map(|d| d.2).sum();
                let cells_total: usize = pop.iter().map(|e| e.chip.array_size()).sum();
                rows.push(EnvRow {
                    axis,
                    value,
                    mode: "d-asch",
                    skew_mv: skew,
                    masking_ratio: masked_total as f64 / cells_total as f64,
                    report: pooled_report(&d_counts, &d_masks, n_evals),
                });
            }
        }
    }
    Ok(rows)
}

// --- aging ----------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AgingRow {
    pub hours: f64,
    pub mode: &'static str,
    pub skew_mv: f64,
    pub masking_ratio: f64,
}

/// Environments used to qualify zero-error operation during aging runs.
pub fn aging_eval_envs(cfg: &ModelConfig) -> Vec<Environment> {
    vec![
        cfg.nominal_env,
        Environment { vdd: 0.7, temperature: 125.0 },
        Environment { vdd: 1.4, temperature: -45.0 },
    ]
}

/// Tracks the masking ratio required for zero observed errors while the
/// parts age under accelerated stress: static maps frozen at hour zero
/// versus dynamic maps rebuilt at every checkpoint.
pub fn aging_experiment(
    cfg: &ModelConfig,
    n_chips: usize,
    checkpoints: &[f64],
    skews: &[f64],
    n_evals: u64,
    run_seed: u64,
) -> Result<Vec<AgingRow>> {
    use rand::SeedableRng;
    let pop = enroll_population(cfg, n_chips, 101, run_seed);
    let eval_envs = aging_eval_envs(cfg);

    // hour-zero static maps, one per (chip, skew)
    let mut static_maps: Vec<Vec<ChipMaps>> = Vec::new();
    for (k, &skew) in skews.iter().enumerate() {
        static_maps.push(build_chip_maps(&pop, skew, stream::label(run_seed, 0x40, k as u64))?);
    }

    let mut aged: Vec<ChipModel> = pop.iter().map(|e| e.chip.clone()).collect();
    let mut aging_rngs: Vec<rand_chacha::ChaCha8Rng> = (0..n_chips)
        .map(|i| {
            rand_chacha::ChaCha8Rng::seed_from_u64(stream::label(run_seed, 0x41, i as u64))
        })
        .collect();

    let mut rows = Vec::new();
    let mut prev_hours = 0.0;
    for (cp, &hours) in checkpoints.iter().enumerate() {
        assert!(hours >= prev_hours, "checkpoints must be non-decreasing");
        for (chip, rng) in aged.iter_mut().zip(&mut aging_rngs) {
            *chip = aschpuf_core::apply_aging(chip, hours - prev_hours, STRESS_ENV, rng);
        }
        prev_hours = hours;

        // static mode enrolled at hour zero
        let mut static_found = None;
        for (k, &skew) in skews.iter().enumerate() {
            let eval_seed = stream::label(run_seed, 0x42, ((cp as u64) << 16) | k as u64);
            let clean = aged.par_iter().zip(&pop).zip(&static_maps[k]).all(
                |((chip, e), m)| {
                    let stab = EvalTarget::Stabilized {
                        map: &m.sasch,
                        orig: &e.orig_plane,
                        heal: &e.heal_plane,
                    };
                    !batch_has_errors(chip, &stab, &eval_envs, n_evals, eval_seed)
                },
            );
            if clean {
                static_found = Some((skew, mean_masking(&static_maps[k], true)));
                break;
            }
        }
        let (skew, ratio) = static_found.ok_or_else(|| {
            anyhow::anyhow!("no skew in the list reaches zero errors at {hours} h (static)")
        })?;
        rows.push(AgingRow { hours, mode: "s-asch", skew_mv: skew, masking_ratio: ratio });

        // dynamic mode re-checks the aged parts at the field corner
        let mut dynamic_found = None;
        for (k, &skew) in skews.iter().enumerate() {
            let dmap_seed = stream::label(run_seed, 0x43, ((cp as u64) << 16) | k as u64);
            let eval_seed = stream::label(run_seed, 0x44, ((cp as u64) << 16) | k as u64);
            let outcomes: Vec<Option<f64>> = aged
                .par_iter()
                .zip(&pop)
                .map(|(chip, e)| {
                    let (dmap, _) = build_map(
                        chip,
                        AGING_CORNER,
                        skew,
                        MapSource::Dynamic,
                        &CheckParams::default(),
                        dmap_seed,
                    )
                    .expect("dynamic check lock");
                    let stab = EvalTarget::Stabilized {
                        map: &dmap,
                        orig: &e.orig_plane,
                        heal: &e.heal_plane,
                    };
                    if batch_has_errors(chip, &stab, &[AGING_CORNER], n_evals, eval_seed) {
                        None
                    } else {
                        Some(dmap.masking_ratio())
                    }
                })
                .collect();
            if outcomes.iter().all(Option::is_some) {
                let mean = outcomes.iter().map(|o| o.unwrap()).sum::<f64>()
                    / outcomes.len() as f64;
                dynamic_found = Some((skew, mean));
                break;
            }
        }
        let (skew, ratio) = dynamic_found.ok_or_else(|| {
            anyhow::anyhow!("no skew in the list reaches zero errors at {hours} h (dynamic)")
        })?;
        rows.push(AgingRow { hours, mode: "d-asch", skew_mv: skew, masking_ratio: ratio });
    }
    Ok(rows)
}

/// Default skew list for zero-error searches, mV.
pub fn default_skew_list() -> Vec<f64> {
    (0..=32).map(|i| i as f64 * 0.5).collect()
}

/// Default aging checkpoints, hours.
pub const AGING_CHECKPOINTS: [f64; 5] = [0.0, 24.0, 48.0, 72.0, 96.0];

#[cfg(test)]
mod tests {
    use super::*;
    use aschpuf_core::puf_cell::stream;

    #[test]
    fn batch_counts_agree_with_plain_ber_on_noiseless_models() {
        let cfg = ModelConfig { sigma_noise: 0.0, seed: 3, ..ModelConfig::default() };
        let pop = enroll_population(&cfg, 2, 1, 7);
        let hot = Environment { vdd: 1.2, temperature: 125.0 };
        for e in &pop {
            let target = EvalTarget::Raw { golden: &e.orig_plane };
            let counts = batch_error_counts(&e.chip, &target, &[hot], 5, 99);
            // noiseless: a cell errs on every evaluation iff its sign flips at 125C
            for idx in 0..e.chip.array_size() {
                let m = static_margin(e.chip.cell(idx), CellConfig::Original, &cfg, hot, 0.0);
                let expected = if (m >= 0.0) != e.orig_plane.bits.get(idx) { 5 } else { 0 };
                assert_eq!(counts[idx], expected, "cell {idx}");
            }
            assert_eq!(
                batch_has_errors(&e.chip, &target, &[hot], 5, 99),
                counts.iter().any(|&c| c > 0)
            );
        }
    }

    #[test]
    fn pooled_report_merges_masks_and_counts() {
        let counts = vec![vec![0, 2, 0, 1], vec![3, 0, 0, 0]];
        let mut m1 = BitGrid::new(1, 4);
        m1.set(1, true); // the 2-error cell is masked out
        let m2 = BitGrid::new(1, 4);
        let report = pooled_report(&counts, &[m1, m2], 10);
        assert_eq!(report.n_bits, 8);
        assert_eq!(report.n_unmasked, 7);
        assert_eq!(report.n_errors, 4);
        assert_eq!(report.unstable_fraction, 2.0 / 7.0);
    }

    #[test]
    fn eval_streams_are_stable_across_target_shapes() {
        // the same (chip, env, seed) triple gives identical draws whether
        // counted through a map or raw, for cells in the same configuration
        let cfg = ModelConfig { seed: 4, ..ModelConfig::default() };
        let pop = enroll_population(&cfg, 1, 11, 5);
        let e = &pop[0];
        let env = Environment { vdd: 0.8, temperature: 90.0 };
        let raw = EvalTarget::Raw { golden: &e.orig_plane };
        let empty_map = StabilizationMap::empty(
            ARRAY_ROWS,
            ARRAY_COLS,
            MapSource::Static,
            cfg.nominal_env,
        );
        let stab = EvalTarget::Stabilized {
            map: &empty_map,
            orig: &e.orig_plane,
            heal: &e.heal_plane,
        };
        let seed = stream::mix(5, 0xEE);
        let a = batch_error_counts(&e.chip, &raw, &[env], 64, seed);
        let b = batch_error_counts(&e.chip, &stab, &[env], 64, seed);
        assert_eq!(a, b);
    }
}
