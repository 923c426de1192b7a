//! Generate the synthetic covariate-shift benchmark and write it in every
//! supported encoding: binary feature files, CSV, and an embeddings dump.
//!
//! ```bash
//! cargo run --release -p nrc --example generate_dataset -- /tmp/nrc-data
//! ```

use nrc::data::{
    generate_synthetic_shift, load_features, save_features, save_features_csv, ShiftSpec,
};

fn main() -> nrc::Result<()> {
    let out_dir = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "/tmp/nrc-data".to_string());
    std::fs::create_dir_all(&out_dir)?;

    let shift = ShiftSpec {
        rotation_degrees: 30.0,
        translation: 0.5,
        noise_scale: 1.0,
    };
    let manifest = generate_synthetic_shift(4, 2, 500, &shift, 0)?;
    println!(
        "generated {}: {} source / {} target samples, {} classes",
        manifest.name,
        manifest.source_features.rows(),
        manifest.target_features.rows(),
        manifest.num_classes
    );

    let source = format!("{out_dir}/source.nrcf");
    let target = format!("{out_dir}/target.nrcf");
    let target_csv = format!("{out_dir}/target_labeled.csv");
    save_features(
        &source,
        &manifest.source_features,
        Some(&manifest.source_labels),
    )?;
    save_features(&target, &manifest.target_features, None)?;
    save_features_csv(
        &target_csv,
        &manifest.target_features,
        Some(&manifest.target_labels),
    )?;

    // Round trip: binary and CSV load to identical values (f32 on disk).
    let (bin, _) = load_features(&source)?;
    println!(
        "round trip ok: {} rows x {} cols from {source}",
        bin.rows(),
        bin.cols()
    );
    let (csv, labels) = load_features(&target_csv)?;
    println!(
        "csv fallback ok: {} rows, labels present: {}",
        csv.rows(),
        labels.is_some()
    );
    Ok(())
}
