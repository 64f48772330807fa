//! Trains the desk profile on a synthetic cohort and prints the outcome.
//!
//! cargo run --release -p paths-core --example desk -- [seed ...]

use paths::analysis::cohort_experiment;
use paths::dataset::DESK_FINEST_GRID;
use paths::{AblationMode, PathsConfig};

fn main() {
    let seeds: Vec<u64> = std::env::args().skip(1).map(|s| s.parse().expect("seed")).collect();
    let seeds = if seeds.is_empty() { vec![1] } else { seeds };
    let cfg = PathsConfig::desk();
    for seed in seeds {
        let t = std::time::Instant::now();
        let (_, out) = cohort_experiment(&cfg, 200, DESK_FINEST_GRID, seed, AblationMode::default()).expect("run");
        println!(
            "seed {seed}: test c-index {:?}, enrichment {:?}, best epoch {}, {:.1}s",
            out.report.test_c_index,
            out.test_enrichment,
            out.report.best_epoch,
            t.elapsed().as_secs_f64()
        );
        println!("  loss {:?}", out.report.train_loss.iter().map(|l| format!("{l:.3}")).collect::<Vec<_>>());
        println!("  val  {:?}", out.report.val_c_index.iter().map(|c| c.map(|c| format!("{c:.3}"))).collect::<Vec<_>>());
    }
}
