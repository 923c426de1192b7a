//! Toggle the loss terms and the affinity weighting one row at a time, the
//! way the method is usually dissected.
//!
//! ```bash
//! cargo run --release -p nrc --example ablation_study
//! ```

use nrc::data::{generate_synthetic_shift, ShiftSpec};
use nrc::diagnostics::accuracy;
use nrc::trainer::{adapt, pretrain_source, AdaptConfig, AdaptMode, PretrainConfig};

fn main() -> nrc::Result<()> {
    let dataset = generate_synthetic_shift(4, 2, 500, &ShiftSpec::default(), 11)?;
    let params = pretrain_source(
        &PretrainConfig {
            seed: 11,
            ..PretrainConfig::default()
        },
        &dataset.source_features,
        &dataset.source_labels,
        dataset.num_classes,
    )?;
    let source_only = {
        let cache = params.forward_eval(&dataset.target_features)?;
        accuracy(cache.probs(), &dataset.target_labels)?
    };
    println!("{:<34} {:>8}", "configuration", "accuracy");
    println!(
        "{:<34} {:>7.1}%",
        "source model (no adaptation)",
        source_only * 100.0
    );

    type Tweak = fn(&mut AdaptConfig);
    let rows: [(&str, Tweak); 7] = [
        ("div only", |c| {
            c.disable_loss_n = true;
            c.disable_loss_e = true;
            c.disable_loss_self = true;
        }),
        ("div + n (no affinity)", |c| {
            c.disable_loss_e = true;
            c.disable_loss_self = true;
            c.disable_affinity = true;
        }),
        ("div + n + affinity", |c| {
            c.disable_loss_e = true;
            c.disable_loss_self = true;
        }),
        ("div + n + e (no affinity)", |c| {
            c.disable_loss_self = true;
            c.disable_affinity = true;
        }),
        ("div + n + e + self + affinity", |_| {}),
        ("    ... with deduped expansion", |c| {
            c.dedupe_expanded = true
        }),
        ("    ... plus density (nrc++)", |c| {
            c.mode = AdaptMode::NrcPlusPlus
        }),
    ];

    for (label, tweak) in rows {
        let mut cfg = AdaptConfig {
            seed: 11,
            mode: AdaptMode::Nrc,
            ..AdaptConfig::default()
        };
        tweak(&mut cfg);
        let outcome = adapt(&cfg, params.clone(), &dataset.target_features)?;
        let cache = outcome.params.forward_eval(&dataset.target_features)?;
        let acc = accuracy(cache.probs(), &dataset.target_labels)?;
        println!("{label:<34} {:>7.1}%", acc * 100.0);
    }
    Ok(())
}
