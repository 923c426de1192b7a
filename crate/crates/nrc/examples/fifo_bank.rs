//! Compare full-bank adaptation against the fixed-capacity FIFO variant that
//! keeps only a fraction of the target features in memory.
//!
//! ```bash
//! cargo run --release -p nrc --example fifo_bank
//! ```

use nrc::data::{generate_synthetic_shift, ShiftSpec};
use nrc::diagnostics::accuracy;
use nrc::trainer::{adapt, pretrain_source, AdaptConfig, BankConfig, PretrainConfig};

fn main() -> nrc::Result<()> {
    let dataset = generate_synthetic_shift(4, 2, 500, &ShiftSpec::default(), 3)?;
    let params = pretrain_source(
        &PretrainConfig {
            seed: 3,
            ..PretrainConfig::default()
        },
        &dataset.source_features,
        &dataset.source_labels,
        dataset.num_classes,
    )?;
    let n_t = dataset.target_features.rows();
    let source_only = {
        let cache = params.forward_eval(&dataset.target_features)?;
        accuracy(cache.probs(), &dataset.target_labels)?
    };
    println!("source-only accuracy: {source_only:.4}");

    for (label, bank) in [
        ("full bank      ", BankConfig::Full),
        ("fifo 20% ring  ", BankConfig::Fifo { capacity: n_t / 5 }),
        ("fifo 10% ring  ", BankConfig::Fifo { capacity: n_t / 10 }),
    ] {
        let cfg = AdaptConfig {
            seed: 3,
            bank,
            ..AdaptConfig::default()
        };
        let start = std::time::Instant::now();
        let outcome = adapt(&cfg, params.clone(), &dataset.target_features)?;
        let cache = outcome.params.forward_eval(&dataset.target_features)?;
        let acc = accuracy(cache.probs(), &dataset.target_labels)?;
        println!(
            "{label} accuracy {acc:.4} ({:+.1} points) in {:.1?}",
            (acc - source_only) * 100.0,
            start.elapsed()
        );
    }
    Ok(())
}
