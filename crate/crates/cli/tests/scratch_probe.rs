use aschpuf_cli::experiments::*;
use aschpuf_core::ModelConfig;

#[test]
fn probe_detection() {
    for seed in [1u64, 2, 3] {
        let cfg = ModelConfig { seed, ..ModelConfig::default() };
        let d = detection_experiment(&cfg, 100, 1000, 6.0, 8, seed).unwrap();
        println!(
            "seed {seed}: rate {:.4} accuracy {:.4} oracle {:.4} dark {:.4} (n={})",
            d.report.detection_rate, d.report.accuracy, d.oracle_fraction, d.dark_fraction, d.n_cells
        );
    }
}

#[test]
fn probe_zero_ber() {
    for seed in [1u64, 2, 3, 4, 5] {
        let cfg = ModelConfig { seed, ..ModelConfig::default() };
        let pop = enroll_population(&cfg, 10, 101, seed);
        let envs = full_grid_envs();
        let skews = default_skew_list();
        let out = find_zero_ber_skew(&pop, &skews, &envs, 2000, seed).unwrap();
        match out {
            Some(z) => println!(
                "seed {seed}: skew {:.2} asc {:.4} sasch {:.4} reduction {:.3} errors {} pes {:?}",
                z.skew_mv,
                z.asc_ratio,
                z.sasch_ratio,
                (z.asc_ratio - z.sasch_ratio) / z.asc_ratio,
                z.sasch_report.n_errors,
                z.sasch_report.pessimistic_ber,
            ),
            None => println!("seed {seed}: NOT FOUND"),
        }
    }
}
