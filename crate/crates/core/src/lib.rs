//! Behavioral simulator and protocol stack for an inverter-chain PUF
//! stabilized by automatic self-checking and healing.
//!
//! The crate models process/noise/voltage/temperature/aging variation per
//! cell, implements the coarse-fine DAC locking and skewed dark-bit
//! detection machinery, the static (enrollment-time) and dynamic
//! (per-power-up) stabilization flows, stabilized key readout, the
//! evaluation metrics, and the device/server enrollment and verification
//! protocol.

pub mod asch;
pub mod bits;
pub mod keygen;
pub mod metrics;
pub mod protocol;
pub mod puf_cell;

pub use asch::{
    asc_only, build_map, coarse_lock, fine_lock, lock, run_d_asch_powerup, run_s_asch,
    self_check, CheckParams, Comparator, DacModel, DAschRun, FlowParams, LockError, LockState,
    MapSource, SAschRun, SkewOrder, StabilizationMap, TimingReport,
};
pub use bits::BitGrid;
pub use keygen::{generate_key, golden_plane, stabilize_readout, BitPlane, Key, KeygenError};
pub use metrics::{
    autocorrelation, ber, ber_from_counts, detection_accuracy, hamming_suites, ker,
    pessimistic_ber, randomness_battery, BerReport, DetectionReport, HdReport, MetricsError,
    RandomnessReport,
};
pub use protocol::{
    handle_connection, server_expected_key, session_overhead, verify, EnrollmentRecord,
    ProtocolError, ServerDb, Verdict, WireMessage,
};
pub use puf_cell::{
    apply_aging, error_count, evaluate_bit, evaluate_session, ground_truth_unstable, margin,
    normal_cdf, one_probability, sample_chip, static_margin, CellConfig, CellModel, ChipModel,
    ConfigError, Environment, ModelConfig, SessionOutcome,
};

/// Default detection skew covering the full supported voltage and
/// temperature envelope, mV. Matches the programmed +/-8 mV skews the
/// hardware applies during self-checking.
pub const FULL_RANGE_SKEW_MV: f64 = 8.0;
