//! Verify the hand-written backpropagation against central finite
//! differences for the composed adaptation objective.
//!
//! ```bash
//! cargo run --release -p nrc --example gradient_check
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use nrc::banks::MemoryBanks;
use nrc::graph::{GraphParams, NeighborGraph};
use nrc::losses::{total_loss, LossFlags};
use nrc::model::{ForwardMode, ModelConfig, ModelParams};
use nrc::numerics::{finite_difference_gradient, Matrix};

fn main() -> nrc::Result<()> {
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let params = ModelParams::init(ModelConfig::new(2, 4), &mut rng)?;
    let data: Vec<f64> = (0..60 * 2).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let target = Matrix::from_vec(60, 2, data)?;
    let banks = MemoryBanks::initialize(&params, &target)?;
    let batch: Vec<usize> = (0..8).collect();
    let x = target.select_rows(&batch)?;
    let graph = NeighborGraph::build(
        &banks,
        &batch,
        &GraphParams {
            k: 3,
            m: 2,
            u: 10,
            v: 3,
            r: 0.1,
            affinity_enabled: true,
            dedupe_expanded: false,
            with_expanded: true,
            with_density: true,
        },
    )?;
    let batch_scores = banks.scores().select_rows(&batch)?;

    let loss_at = |theta: &[f64]| {
        let mut p = params.clone();
        p.set_trainable(theta).unwrap();
        let cache = p.forward(&x, ForwardMode::Train).unwrap();
        total_loss(
            cache.probs(),
            &graph,
            banks.scores(),
            &batch_scores,
            LossFlags::all(),
            0.5,
        )
        .unwrap()
        .total
    };

    let theta = params.flatten_trainable();
    println!("checking {} parameters with h = 1e-5 ...", theta.len());
    let fd = finite_difference_gradient(loss_at, &theta, 1e-5);

    let mut p = params.clone();
    let cache = p.forward(&x, ForwardMode::Train)?;
    let breakdown = total_loss(
        cache.probs(),
        &graph,
        banks.scores(),
        &batch_scores,
        LossFlags::all(),
        0.5,
    )?;
    let analytic = p.backward(&cache, &breakdown.grad)?.flatten();

    let mut worst = 0.0f64;
    let mut worst_idx = 0;
    for (i, (&a, &f)) in analytic.iter().zip(&fd).enumerate() {
        let rel = (a - f).abs() / (a.abs() + f.abs() + 1e-6);
        if rel > worst {
            worst = rel;
            worst_idx = i;
        }
    }
    println!(
        "loss {:.6}; worst relative error {:.3e} at parameter {worst_idx} \
         (analytic {:.6e}, finite difference {:.6e})",
        breakdown.total, worst, analytic[worst_idx], fd[worst_idx]
    );
    assert!(worst < 1e-4, "gradient check failed");
    println!("gradient check passed (threshold 1e-4)");
    Ok(())
}
