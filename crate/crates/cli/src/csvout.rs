//! CSV renderings of experiment rows. Headers are stable and outputs are
//! byte-identical across runs with the same seed.

use crate::experiments::{AgingRow, EnvRow, SkewRow, TargetRow};

fn fmt_ber(v: f64) -> String {
    format!("{v:.6e}")
}

fn fmt_opt_ber(v: Option<f64>) -> String {
    v.map(fmt_ber).unwrap_or_default()
}

pub const CALIBRATE_HEADER: &str = "metric,value,target,lower,upper,status";

pub fn calibrate_csv(rows: &[TargetRow]) -> String {
    let mut out = String::from(CALIBRATE_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.metric,
            fmt_ber(r.value),
            fmt_ber(r.target),
            fmt_ber(r.lo),
            fmt_ber(r.hi),
            if r.pass { "pass" } else { "miss" }
        ));
    }
    out
}

pub const SWEEP_SKEW_HEADER: &str = "skew_mv,mode,masking_ratio,ber,pessimistic_ber,n_errors";

pub fn sweep_skew_csv(rows: &[SkewRow]) -> String {
    let mut out = String::from(SWEEP_SKEW_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{:.3},{},{:.6},{},{},{}\n",
            r.skew_mv,
            r.mode,
            r.masking_ratio,
            fmt_ber(r.report.ber),
            fmt_opt_ber(r.report.pessimistic_ber),
            r.report.n_errors
        ));
    }
    out
}

pub const SWEEP_ENV_HEADER: &str =
    "axis,value,mode,skew_mv,masking_ratio,ber,pessimistic_ber";

pub fn sweep_env_csv(rows: &[EnvRow]) -> String {
    let mut out = String::from(SWEEP_ENV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.3},{:.6},{},{}\n",
            r.axis,
            r.value,
            r.mode,
            r.skew_mv,
            r.masking_ratio,
            fmt_ber(r.report.ber),
            fmt_opt_ber(r.report.pessimistic_ber)
        ));
    }
    out
}

pub const AGING_HEADER: &str = "hours,mode,skew_mv,masking_ratio";

pub fn aging_csv(rows: &[AgingRow]) -> String {
    let mut out = String::from(AGING_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.3},{:.6}\n",
            r.hours, r.mode, r.skew_mv, r.masking_ratio
        ));
    }
    out
}
