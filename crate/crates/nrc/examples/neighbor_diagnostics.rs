//! Neighbor-quality statistics before and after adaptation: how often kNN /
//! reciprocal / non-reciprocal neighbors share or correctly predict a
//! sample's label, plus a full graph dump and an embeddings dump for
//! external plotting.
//!
//! ```bash
//! cargo run --release -p nrc --example neighbor_diagnostics -- /tmp/nrc-diag
//! ```

use nrc::banks::MemoryBanks;
use nrc::data::{generate_synthetic_shift, save_embeddings, ShiftSpec};
use nrc::diagnostics::neighbor_purity;
use nrc::graph::{GraphParams, NeighborGraph};
use nrc::trainer::{adapt, pretrain_source, AdaptConfig, PretrainConfig};

fn main() -> nrc::Result<()> {
    let out_dir = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "/tmp/nrc-diag".to_string());
    std::fs::create_dir_all(&out_dir)?;

    let dataset = generate_synthetic_shift(4, 2, 300, &ShiftSpec::default(), 5)?;
    let params = pretrain_source(
        &PretrainConfig {
            seed: 5,
            ..PretrainConfig::default()
        },
        &dataset.source_features,
        &dataset.source_labels,
        dataset.num_classes,
    )?;

    let k_max = 7;
    let labels = Some(dataset.target_labels.as_slice());

    // Before adaptation.
    let banks_pre = MemoryBanks::initialize(&params, &dataset.target_features)?;
    let pre = neighbor_purity(&banks_pre, k_max, labels)?;
    pre.write_csv(format!("{out_dir}/purity_pre.csv"))?;
    save_embeddings(
        format!("{out_dir}/embeddings_pre.nrcf"),
        banks_pre.features(),
        banks_pre.scores(),
        labels,
    )?;

    // After adaptation.
    let cfg = AdaptConfig {
        seed: 5,
        u: 15,
        v: 5,
        ..AdaptConfig::default()
    };
    let outcome = adapt(&cfg, params, &dataset.target_features)?;
    let banks_post = MemoryBanks::initialize(&outcome.params, &dataset.target_features)?;
    let post = neighbor_purity(&banks_post, k_max, labels)?;
    post.write_csv(format!("{out_dir}/purity_post.csv"))?;
    save_embeddings(
        format!("{out_dir}/embeddings_post.nrcf"),
        banks_post.features(),
        banks_post.scores(),
        labels,
    )?;

    // Edge list of the full neighborhood graph after adaptation.
    let graph = NeighborGraph::build_full(
        &banks_post,
        &GraphParams {
            k: 3,
            m: 2,
            u: 15,
            v: 5,
            r: 0.1,
            affinity_enabled: true,
            dedupe_expanded: false,
            with_expanded: true,
            with_density: true,
        },
    )?;
    graph.write_csv(format!("{out_dir}/graph_post.csv"))?;

    println!("k   rnn_true(pre)  rnn_true(post)  nrnn_true(pre)  nrnn_true(post)");
    for (a, b) in pre.rows.iter().zip(&post.rows) {
        println!(
            "{:<3} {:>13.3} {:>15.3} {:>15.3} {:>16.3}",
            a.k,
            a.rnn_true.unwrap_or(f64::NAN),
            b.rnn_true.unwrap_or(f64::NAN),
            a.nrnn_true.unwrap_or(f64::NAN),
            b.nrnn_true.unwrap_or(f64::NAN),
        );
    }
    println!("wrote curves, embeddings, and the graph edge list to {out_dir}");
    Ok(())
}
